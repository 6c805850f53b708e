#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "needforge/domain.hpp"
#include "needforge/http.hpp"
#include "needforge/policy.hpp"
#include "needforge/reward.hpp"

namespace needforge {

enum class ChatRole { System, User, Assistant };
std::string_view to_string(ChatRole r);

struct ChatMessage {
    ChatRole role = ChatRole::User;
    std::string content;
    friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

class ChatBackend {
public:
    virtual ~ChatBackend() = default;
    virtual std::string complete(const std::vector<ChatMessage>& messages, const SamplingConfig& sampling) = 0;
    virtual std::string identity() const = 0;
};

enum class AgentStep { Intent, Category, Behavior };
std::string_view to_string(AgentStep s);
AgentStep parse_agent_step(std::string_view s);
/// JSON key holding the prediction: predicted_intent / predicted_category / predicted_behavior.
std::string predicted_key(AgentStep s);

struct StepOutput {
    AgentStep step = AgentStep::Intent;
    std::string predicted;
    std::string reasoning_summary;
    std::string json_text;  // the JSON enclosed by the tag
};

struct ProtocolError {
    enum class Kind { TagAbsent, BadJson, MissingKey };
    AgentStep step = AgentStep::Intent;
    Kind kind = Kind::TagAbsent;
    std::string message;  // "protocol: tag absent" | "protocol: bad json" | "protocol: missing key"
};

/// Parses the first <tag>...</tag> block for `step`; never throws.
std::variant<StepOutput, ProtocolError> parse_step_output(AgentStep step, std::string_view raw) noexcept;

/// Most recent history entries included in prompts.
inline constexpr std::size_t kPromptHistory = 20;

/// System message plus one user message for `step`. `prior` holds the earlier
/// steps' outputs (intent for step 2, intent and category for step 3).
std::vector<ChatMessage> build_prompt(const UserRecord& user, const Taxonomy& taxonomy,
                                      const SpatioTemporalContext& context, AgentStep step,
                                      std::span<const StepOutput> prior);

/// Serves canned step responses; deterministic and safe for concurrent use.
class StubBackend final : public ChatBackend {
public:
    explicit StubBackend(std::map<AgentStep, std::string> responses, std::string name = "stub");
    std::string complete(const std::vector<ChatMessage>& messages, const SamplingConfig& sampling) override;
    std::string identity() const override { return name_; }

private:
    std::map<AgentStep, std::string> responses_;
    std::string name_;
};

/// Transport-level failure (connection error, 5xx, 429) eligible for retry.
class TransportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct RetryPolicy {
    /// Delay before each retry; its size is the retry count.
    std::vector<std::chrono::milliseconds> backoff{std::chrono::milliseconds(500), std::chrono::milliseconds(2000),
                                                  std::chrono::milliseconds(8000)};
    std::function<void(std::chrono::milliseconds)> sleep;  // defaults to std::this_thread::sleep_for
};

/// Runs `post` with retries on TransportError-class outcomes; returns the 2xx body.
std::string post_with_retry(const HttpPost& post, const std::string& path, const std::string& body,
                            const std::string& bearer, const RetryPolicy& retry);

/// Reads the bearer token from NEEDFORGE_API_KEY (empty when unset).
std::string api_key_from_env();

class HttpChatBackend final : public ChatBackend {
public:
    HttpChatBackend(HttpPost transport, std::string model, std::string api_key, RetryPolicy retry = {});
    std::string complete(const std::vector<ChatMessage>& messages, const SamplingConfig& sampling) override;
    std::string identity() const override { return "http:" + model_; }

private:
    HttpPost post_;
    std::string model_;
    std::string key_;
    RetryPolicy retry_;
};

class HttpEmbedder final : public Embedder {
public:
    HttpEmbedder(HttpPost transport, std::string model, std::string api_key, std::size_t dim,
                 RetryPolicy retry = {});
    std::size_t dim() const override { return dim_; }
    std::vector<double> embed(std::string_view text) const override;
    std::vector<std::vector<double>> embed_batch(const std::vector<std::string>& texts) const override;

private:
    HttpPost post_;
    std::string model_;
    std::string key_;
    std::size_t dim_;
    RetryPolicy retry_;
};

struct Resolution {
    int id = -1;
    std::string label;
    std::string method;  // "exact" or "semantic"
};

/// Exact normalized-label match first, otherwise the nearest label embedding.
Resolution resolve_label(std::string_view text, const std::vector<std::string>& labels, const std::vector<int>& ids,
                         const Embedder& embedder);

struct TranscriptStep {
    AgentStep step = AgentStep::Intent;
    std::vector<ChatMessage> messages;
    std::string raw_output;
    StepOutput output;
    Resolution resolution;
};

struct Transcript {
    std::string user_id;
    std::string backend;
    std::vector<TranscriptStep> steps;
};

struct PipelineResult {
    HierarchicalDecision decision;
    Transcript transcript;
};

/// Raised when a step's output violates the protocol; names the failing step.
class PipelineError : public std::runtime_error {
public:
    PipelineError(AgentStep step, const std::string& message)
        : std::runtime_error(std::string(to_string(step)) + ": " + message), step_(step) {}
    AgentStep step() const { return step_; }

private:
    AgentStep step_;
};

/// Three sequential prompt -> complete -> parse rounds. Behaviors resolve within the
/// resolved category.
PipelineResult run_pipeline(ChatBackend& backend, const Embedder& embedder, const Taxonomy& taxonomy,
                            const UserRecord& user, const SpatioTemporalContext& context,
                            const SamplingConfig& sampling);

struct PipelineInput {
    const UserRecord* user = nullptr;
    SpatioTemporalContext context;
};

/// Outcome per input, in input order: a result or the error message.
using PipelineOutcome = std::variant<PipelineResult, std::string>;

/// Runs independent pipelines with at most `max_in_flight` in progress; `backend`
/// must tolerate concurrent calls.
std::vector<PipelineOutcome> run_pipelines(ChatBackend& backend, const Embedder& embedder, const Taxonomy& taxonomy,
                                           std::span<const PipelineInput> inputs, const SamplingConfig& sampling,
                                           int max_in_flight);

nlohmann::ordered_json transcript_to_json(const Transcript& t, const HierarchicalDecision& d,
                                          const Taxonomy& taxonomy);

/// Stub case fixture: a user, a context, canned responses and the expected outcome.
struct CaseFixture {
    std::string name;
    UserRecord user;
    SpatioTemporalContext context;
    std::map<AgentStep, std::string> responses;
    StageTruths expected;
};

CaseFixture load_case_fixture(const std::string& path, const Taxonomy& taxonomy);

/// One scored output: `raw_output` holds the step blocks the stage requires
/// (or a bare JSON object for single-step stages).
struct ScoredOutput {
    RewardStage stage = RewardStage::Need;
    std::string raw_output;
    double step = 0.0;
};

struct ScoreReport {
    std::vector<RewardBreakdown> items;
    double mean_total = 0.0;
    double mean_match = 0.0;
    double mean_fmt = 0.0;
    double mean_len = 0.0;
    std::optional<double> need_accuracy;  // over outputs that carry a need prediction
    std::size_t n = 0;
};

ScoreReport score_transcripts(std::span<const ScoredOutput> outputs, std::span<const StageTruths> truths,
                              const RewardParams& params, const Taxonomy& taxonomy, const Embedder& embedder);

/// Reads {stage, raw_output, truth_need, truth_category, truth_behavior, step} lines.
void load_scoring_file(const std::string& path, std::vector<ScoredOutput>& outputs,
                       std::vector<StageTruths>& truths);

nlohmann::json score_report_to_json(const ScoreReport& r);

}  // namespace needforge
