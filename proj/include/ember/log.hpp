#pragma once

// Structured line logger. Field values under sensitive names (message text,
// key material, tokens) are replaced before formatting, so call sites cannot
// leak them by accident.

#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ember::log {

enum class Level { debug, info, warn, error };

using Fields = std::vector<std::pair<std::string, std::string>>;
using Sink = std::function<void(std::string_view line)>;

inline constexpr std::string_view kRedacted = "[redacted]";

bool isSensitiveField(std::string_view name);

void setLevel(Level level);
/// Replaces the stderr sink; pass an empty function to restore it.
void setSink(Sink sink);

void write(Level level, std::string_view event, const Fields& fields = {});

inline void debug(std::string_view event, const Fields& fields = {}) { write(Level::debug, event, fields); }
inline void info(std::string_view event, const Fields& fields = {}) { write(Level::info, event, fields); }
inline void warn(std::string_view event, const Fields& fields = {}) { write(Level::warn, event, fields); }
inline void error(std::string_view event, const Fields& fields = {}) { write(Level::error, event, fields); }

} // namespace ember::log
