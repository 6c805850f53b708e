#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "needforge/agent.hpp"
#include "needforge/curation.hpp"
#include "needforge/envsim.hpp"
#include "needforge/policy.hpp"
#include "needforge/reward.hpp"
#include "needforge/trainer.hpp"

namespace needforge::cli {

/// Malformed config text, unknown section or key, or an unparsable value.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// INI-style run configuration. Only documented sections and keys are accepted.
class RunConfig {
public:
    static RunConfig parse(std::string_view text, const std::string& origin = "<config>");
    static RunConfig load(const std::string& path);

    /// Later values win.
    void merge(const RunConfig& other);
    void set(const std::string& section, const std::string& key, const std::string& value);

    bool has(const std::string& section, const std::string& key) const;
    std::string get(const std::string& section, const std::string& key, const std::string& fallback) const;
    double get_double(const std::string& section, const std::string& key, double fallback) const;
    std::int64_t get_int(const std::string& section, const std::string& key, std::int64_t fallback) const;
    std::uint64_t get_u64(const std::string& section, const std::string& key, std::uint64_t fallback) const;
    bool get_bool(const std::string& section, const std::string& key, bool fallback) const;

    const std::map<std::string, std::map<std::string, std::string>>& sections() const { return sections_; }

private:
    std::map<std::string, std::map<std::string, std::string>> sections_;
};

/// Every accepted key per section.
const std::map<std::string, std::vector<std::string>>& known_keys();

CurationConfig curation_config(const RunConfig& cfg);
WorldSpec world_spec(const RunConfig& cfg);
RewardParams reward_params(const RunConfig& cfg);
SamplingConfig sampling_config(const RunConfig& cfg);
GrpoConfig grpo_config(const RunConfig& cfg);
CurriculumPlan curriculum_plan(const RunConfig& cfg, PolicyMode mode);

enum class LogLevel { Debug, Info, Warn, Error };
LogLevel parse_log_level(std::string_view s);

/// One line per event on the error stream: level, subcommand, step, message.
class Logger {
public:
    Logger(std::ostream& out, LogLevel min_level, std::string subcommand)
        : out_(out), min_(min_level), cmd_(std::move(subcommand)) {}
    void log(LogLevel level, const std::string& message, std::optional<int> step = std::nullopt) const;
    void info(const std::string& m, std::optional<int> step = std::nullopt) const { log(LogLevel::Info, m, step); }
    void debug(const std::string& m, std::optional<int> step = std::nullopt) const { log(LogLevel::Debug, m, step); }
    void warn(const std::string& m) const { log(LogLevel::Warn, m); }
    void error(const std::string& m) const { log(LogLevel::Error, m); }

private:
    std::ostream& out_;
    LogLevel min_;
    std::string cmd_;
};

/// Exit codes: 0 success, 1 runtime error, 2 usage error.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

}  // namespace needforge::cli
