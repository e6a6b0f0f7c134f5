#include "ember/log.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <ctime>
#include <mutex>

namespace ember::log {

namespace {

std::mutex g_mutex;
Level g_level = Level::info;
Sink g_sink;

constexpr std::array<std::string_view, 11> kSensitive = {"text",  "plaintext",  "content", "body",      "key",
                                                         "token", "passphrase", "secret",  "masterkey", "importedkey",
                                                         "params"};

std::string_view levelName(Level l) {
    switch (l) {
    case Level::debug: return "DEBUG";
    case Level::info: return "INFO";
    case Level::warn: return "WARN";
    case Level::error: return "ERROR";
    }
    return "INFO";
}

bool needsQuotes(std::string_view v) {
    return v.empty() || std::any_of(v.begin(), v.end(), [](unsigned char c) { return std::isspace(c) || c == '"' || c == '='; });
}

std::string quote(std::string_view v) {
    std::string out = "\"";
    for (char c : v) {
        if (c == '"' || c == '\\') out.push_back('\\');
        if (c == '\n') {
            out += "\\n";
            continue;
        }
        out.push_back(c);
    }
    out.push_back('"');
    return out;
}

} // namespace

bool isSensitiveField(std::string_view name) {
    std::string lowered(name);
    std::transform(lowered.begin(), lowered.end(), lowered.begin(), [](unsigned char c) { return std::tolower(c); });
    return std::any_of(kSensitive.begin(), kSensitive.end(),
                       [&](std::string_view s) { return lowered == s; });
}

void setLevel(Level level) {
    std::lock_guard lock(g_mutex);
    g_level = level;
}

void setSink(Sink sink) {
    std::lock_guard lock(g_mutex);
    g_sink = std::move(sink);
}

void write(Level level, std::string_view event, const Fields& fields) {
    std::lock_guard lock(g_mutex);
    if (level < g_level) return;

    const auto now = std::chrono::system_clock::now();
    const auto secs = std::chrono::system_clock::to_time_t(now);
    const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
    std::tm tm{};
    gmtime_r(&secs, &tm);
    char stamp[64];
    std::snprintf(stamp, sizeof stamp, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1,
                  tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));

    std::string line = std::string(stamp) + " " + std::string(levelName(level)) + " " + std::string(event);
    for (const auto& [name, value] : fields) {
        std::string_view shown = isSensitiveField(name) ? kRedacted : std::string_view(value);
        line += " " + name + "=" + (needsQuotes(shown) ? quote(shown) : std::string(shown));
    }
    if (g_sink) {
        g_sink(line);
    } else {
        std::fprintf(stderr, "%s\n", line.c_str());
    }
}

} // namespace ember::log
