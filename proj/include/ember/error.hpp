#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ember {

enum class Errc {
    precondition,
    parse_error,
    structural,
    unsupported_version,
    oversize,
    truncated,
    auth_failure,
    not_found,
    undecryptable_history,
    integrity,
    busy,
    protocol,
    duplicate,
    validation,
    io,
    timeout,
    delivery_failure,
    refused,
    closed,
    randomness,
};

std::string_view errcName(Errc code);
std::optional<Errc> errcFromName(std::string_view name);

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

} // namespace ember
