#include "needforge/agent.hpp"

#include <algorithm>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <thread>

namespace needforge {

namespace {

// Prompt protocol text. The system role and the per-step output formats are part of
// the wire protocol that fine-tuned agents are trained against; keep them byte-exact.
constexpr const char* kSystemRole =
    "You are an autonomous Recommendation Agent. Your objective is to formulate precise recommendations by "
    "orchestrating specific function tools to analyze user data, map semantic categories, and rank potential "
    "behaviors based on the current spatiotemporal context.";

constexpr const char* kStep1 =
    "Step 1: Living need Inference\n"
    "Agent Action:\n"
    "Query the UserProfile MCP to retrieve long-term preferences. Combine with current Context (Time/Location) "
    "to filter candidate living needs.\n"
    "Reasoning Requirement: Explain which profile feature triggered the selection of the living need from the "
    "candidate list.\n";

constexpr const char* kStep2 =
    "Step 2: Category Mapping\n"
    "Agent Action:\n"
    "Call the Intent Parser to retrieve the predicted living need from Step 1.\n"
    "Reasoning Requirement: Justify the category choice by linking the living need to specific domain "
    "availability.\n"
    "Semantic domains for categories:\n"
    "- Food & Beverage (e.g., Chinese/Western cuisine...)\n"
    "- Accommodation (e.g., luxury, budget hotels)\n"
    "- Entertainment & Leisure\n"
    "- Lifestyle Services (e.g., beauty, laundry)\n"
    "- Grocery & Fresh Produce\n";

constexpr const char* kStep3 =
    "Step 3: Behavior Ranking\n"
    "Agent Action:\n"
    "Call the Category Parser to retrieve the predicted category from Step 2 based on the semantic matching "
    "score.\n"
    "Reasoning Requirement: Explain why this behavior ranks highest.\n";

std::string output_format(AgentStep s) {
    const std::string tag(to_string(s));
    const std::string placeholder = s == AgentStep::Intent     ? "Intent Name"
                                    : s == AgentStep::Category ? "Category Name"
                                                               : "Behavior Name";
    return "<" + tag + ">\n{\"" + predicted_key(s) + "\": \"" + placeholder +
           "\",\n \"reasoning_summary\": \"Brief Reasoning\"}\n</" + tag + ">";
}

std::string format_time(std::int64_t ts, std::int64_t tz_offset_s) {
    const std::time_t t = static_cast<std::time_t>(ts + tz_offset_s);
    std::tm tm{};
    gmtime_r(&t, &tm);
    std::ostringstream os;
    os << std::put_time(&tm, "%Y-%m-%d %H:%M");
    return os.str();
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

ProtocolError protocol_error(AgentStep step, ProtocolError::Kind kind) {
    static constexpr const char* kMessages[] = {"protocol: tag absent", "protocol: bad json", "protocol: missing key"};
    return {step, kind, kMessages[static_cast<int>(kind)]};
}

/// Parses `json_text` as a step object; used for both tagged and bare outputs.
std::variant<StepOutput, ProtocolError> parse_step_json(AgentStep step, std::string_view json_text) {
    auto j = nlohmann::json::parse(json_text.begin(), json_text.end(), nullptr, false);
    if (j.is_discarded() || !j.is_object()) return protocol_error(step, ProtocolError::Kind::BadJson);
    const auto it = j.find(predicted_key(step));
    if (it == j.end() || !it->is_string() || trim(it->get<std::string>()).empty())
        return protocol_error(step, ProtocolError::Kind::MissingKey);
    StepOutput out;
    out.step = step;
    out.predicted = trim(it->get<std::string>());
    if (auto r = j.find("reasoning_summary"); r != j.end() && r->is_string()) out.reasoning_summary = *r;
    out.json_text = std::string(json_text);
    return out;
}

/// The text between the first <tag> and the following </tag>, if both exist.
std::optional<std::string_view> extract_block(AgentStep step, std::string_view raw) {
    const std::string tag(to_string(step));
    const std::string open = "<" + tag + ">", close = "</" + tag + ">";
    const auto b = raw.find(open);
    if (b == std::string_view::npos) return std::nullopt;
    const auto e = raw.find(close, b + open.size());
    if (e == std::string_view::npos) return std::nullopt;
    return raw.substr(b + open.size(), e - b - open.size());
}

}  // namespace

std::string_view to_string(ChatRole r) {
    switch (r) {
        case ChatRole::System: return "system";
        case ChatRole::User: return "user";
        case ChatRole::Assistant: return "assistant";
    }
    return "user";
}

std::string_view to_string(AgentStep s) {
    switch (s) {
        case AgentStep::Intent: return "intent";
        case AgentStep::Category: return "category";
        case AgentStep::Behavior: return "behavior";
    }
    return "intent";
}

AgentStep parse_agent_step(std::string_view s) {
    if (s == "intent") return AgentStep::Intent;
    if (s == "category") return AgentStep::Category;
    if (s == "behavior") return AgentStep::Behavior;
    throw DataError("unknown agent step: " + std::string(s));
}

std::string predicted_key(AgentStep s) { return "predicted_" + std::string(to_string(s)); }

std::variant<StepOutput, ProtocolError> parse_step_output(AgentStep step, std::string_view raw) noexcept {
    try {
        const auto block = extract_block(step, raw);
        if (!block) return protocol_error(step, ProtocolError::Kind::TagAbsent);
        return parse_step_json(step, trim(*block));
    } catch (...) {
        return protocol_error(step, ProtocolError::Kind::BadJson);
    }
}

std::vector<ChatMessage> build_prompt(const UserRecord& user, const Taxonomy& taxonomy,
                                      const SpatioTemporalContext& context, AgentStep step,
                                      std::span<const StepOutput> prior) {
    std::ostringstream u;
    u << (step == AgentStep::Intent ? kStep1 : step == AgentStep::Category ? kStep2 : kStep3) << "\n";

    u << "User profile:\n";
    if (user.profile.attributes().empty()) u << "- (none)\n";
    for (const auto& [k, v] : user.profile.attributes()) u << "- " << k << ": " << v << "\n";

    const std::size_t n = user.history.size();
    const std::size_t from = n > kPromptHistory ? n - kPromptHistory : 0;
    u << "Recent history (oldest first, " << (n - from) << " of " << n << "):\n";
    if (n == 0) u << "- (none)\n";
    for (std::size_t k = from; k < n; ++k) {
        const auto& it = user.history[k];
        u << "- " << format_time(it.context.timestamp, user.tz_offset_s) << " | "
          << to_string(it.context.location_type) << " | " << taxonomy.needs()[it.need_id].label << " | "
          << taxonomy.categories()[it.category_id].label << " | " << taxonomy.behaviors()[it.behavior_id].label
          << "\n";
    }

    u << "Current context:\n"
      << "- time: " << format_time(context.timestamp, user.tz_offset_s) << " (hour " << context.time_bucket << ")\n"
      << "- location: " << to_string(context.location_type) << " (" << std::fixed << std::setprecision(4)
      << context.latitude << ", " << context.longitude << ")\n";
    u.unsetf(std::ios::floatfield);

    switch (step) {
        case AgentStep::Intent:
            u << "Candidate living needs:\n";
            for (const auto& nd : taxonomy.needs()) u << "- " << nd.label << "\n";
            break;
        case AgentStep::Category:
            u << "Candidate categories:\n";
            for (const auto& c : taxonomy.categories()) u << "- " << c.label << " (" << to_string(c.domain) << ")\n";
            break;
        case AgentStep::Behavior: {
            std::optional<int> cat;
            for (const auto& p : prior)
                if (p.step == AgentStep::Category)
                    for (const auto& c : taxonomy.categories())
                        if (normalize_label(c.label) == normalize_label(p.predicted)) cat = c.id;
            u << "Candidate behaviors:\n";
            for (const auto& b : taxonomy.behaviors())
                if (!cat || b.category_id == *cat) u << "- " << b.label << "\n";
            break;
        }
    }

    for (const auto& p : prior) {
        if (p.step == step) continue;
        nlohmann::ordered_json j;
        j[predicted_key(p.step)] = p.predicted;
        j["reasoning_summary"] = p.reasoning_summary;
        u << "Output of the " << to_string(p.step) << " step:\n" << j.dump() << "\n";
    }

    u << "Output format:\n" << output_format(step) << "\n";
    return {{ChatRole::System, kSystemRole}, {ChatRole::User, u.str()}};
}

StubBackend::StubBackend(std::map<AgentStep, std::string> responses, std::string name)
    : responses_(std::move(responses)), name_(std::move(name)) {}

std::string StubBackend::complete(const std::vector<ChatMessage>& messages, const SamplingConfig&) {
    const ChatMessage* last = nullptr;
    for (const auto& m : messages)
        if (m.role == ChatRole::User) last = &m;
    if (!last) throw DataError("stub backend: no user message");
    AgentStep step = AgentStep::Intent;
    if (last->content.rfind("Step 3:", 0) == 0)
        step = AgentStep::Behavior;
    else if (last->content.rfind("Step 2:", 0) == 0)
        step = AgentStep::Category;
    const auto it = responses_.find(step);
    return it == responses_.end() ? std::string{} : it->second;
}

std::string post_with_retry(const HttpPost& post, const std::string& path, const std::string& body,
                            const std::string& bearer, const RetryPolicy& retry) {
    std::string last_error;
    for (std::size_t attempt = 0;; ++attempt) {
        const auto res = post(path, body, bearer);
        if (res.status >= 200 && res.status < 300) return res.body;
        const bool retryable = res.status == 0 || res.status == 429 || res.status >= 500;
        last_error = res.status == 0 ? "transport failure: " + res.body : "http status " + std::to_string(res.status);
        if (!retryable) throw DataError(path + ": " + last_error);
        if (attempt >= retry.backoff.size()) break;
        if (retry.sleep)
            retry.sleep(retry.backoff[attempt]);
        else
            std::this_thread::sleep_for(retry.backoff[attempt]);
    }
    throw TransportError(path + ": " + last_error + " after " + std::to_string(retry.backoff.size() + 1) +
                         " attempts");
}

std::string api_key_from_env() {
    const char* k = std::getenv("NEEDFORGE_API_KEY");
    return k ? std::string(k) : std::string{};
}

HttpChatBackend::HttpChatBackend(HttpPost transport, std::string model, std::string api_key, RetryPolicy retry)
    : post_(std::move(transport)), model_(std::move(model)), key_(std::move(api_key)), retry_(std::move(retry)) {}

std::string HttpChatBackend::complete(const std::vector<ChatMessage>& messages, const SamplingConfig& sampling) {
    nlohmann::json body = {{"model", model_},
                           {"messages", nlohmann::json::array()},
                           {"temperature", sampling.temperature},
                           {"top_p", sampling.top_p},
                           {"n", 1}};
    for (const auto& m : messages) body["messages"].push_back({{"role", to_string(m.role)}, {"content", m.content}});
    const auto reply = post_with_retry(post_, "/chat/completions", body.dump(), key_, retry_);
    auto j = nlohmann::json::parse(reply, nullptr, false);
    try {
        return j.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const nlohmann::json::exception&) {
        throw DataError("chat backend: malformed reply");
    }
}

HttpEmbedder::HttpEmbedder(HttpPost transport, std::string model, std::string api_key, std::size_t dim,
                           RetryPolicy retry)
    : post_(std::move(transport)), model_(std::move(model)), key_(std::move(api_key)), dim_(dim),
      retry_(std::move(retry)) {}

std::vector<double> HttpEmbedder::embed(std::string_view text) const {
    return embed_batch({std::string(text)}).front();
}

std::vector<std::vector<double>> HttpEmbedder::embed_batch(const std::vector<std::string>& texts) const {
    const nlohmann::json body = {{"model", model_}, {"input", texts}};
    const auto reply = post_with_retry(post_, "/embeddings", body.dump(), key_, retry_);
    auto j = nlohmann::json::parse(reply, nullptr, false);
    std::vector<std::vector<double>> out;
    try {
        const auto& data = j.at("data");
        if (data.size() != texts.size()) throw DataError("embedding backend: wrong number of vectors");
        for (const auto& d : data) {
            auto v = d.at("embedding").get<std::vector<double>>();
            if (v.size() != dim_) throw DataError("embedding backend: dimension mismatch");
            double norm = 0.0;
            for (double x : v) norm += x * x;
            norm = std::sqrt(norm);
            if (!(norm > 0.0) || !std::isfinite(norm)) throw DataError("embedding backend: degenerate vector");
            for (double& x : v) x /= norm;
            out.push_back(std::move(v));
        }
    } catch (const nlohmann::json::exception&) {
        throw DataError("embedding backend: malformed reply");
    }
    return out;
}

Resolution resolve_label(std::string_view text, const std::vector<std::string>& labels, const std::vector<int>& ids,
                         const Embedder& embedder) {
    if (labels.empty()) throw DataError("resolve: no candidates");
    const auto norm = normalize_label(text);
    for (std::size_t k = 0; k < labels.size(); ++k)
        if (normalize_label(labels[k]) == norm) return {ids[k], labels[k], "exact"};
    std::vector<std::vector<double>> cands;
    cands.reserve(labels.size());
    for (const auto& l : labels) cands.push_back(embedder.embed(l));
    const int k = nearest_candidate(embedder.embed(text), cands);
    return {ids[k], labels[k], "semantic"};
}

PipelineResult run_pipeline(ChatBackend& backend, const Embedder& embedder, const Taxonomy& taxonomy,
                            const UserRecord& user, const SpatioTemporalContext& context,
                            const SamplingConfig& sampling) {
    PipelineResult out;
    out.transcript.user_id = user.user_id;
    out.transcript.backend = backend.identity();
    std::vector<StepOutput> prior;
    for (AgentStep step : {AgentStep::Intent, AgentStep::Category, AgentStep::Behavior}) {
        TranscriptStep ts;
        ts.step = step;
        ts.messages = build_prompt(user, taxonomy, context, step, prior);
        ts.raw_output = backend.complete(ts.messages, sampling);
        auto parsed = parse_step_output(step, ts.raw_output);
        if (auto* err = std::get_if<ProtocolError>(&parsed)) throw PipelineError(step, err->message);
        ts.output = std::get<StepOutput>(parsed);

        std::vector<std::string> labels;
        std::vector<int> ids;
        switch (step) {
            case AgentStep::Intent:
                for (const auto& n : taxonomy.needs()) labels.push_back(n.label), ids.push_back(n.id);
                break;
            case AgentStep::Category:
                for (const auto& c : taxonomy.categories()) labels.push_back(c.label), ids.push_back(c.id);
                break;
            case AgentStep::Behavior:
                for (int b : taxonomy.behaviors_in(out.decision.category_id))
                    labels.push_back(taxonomy.behaviors()[b].label), ids.push_back(b);
                break;
        }
        ts.resolution = resolve_label(ts.output.predicted, labels, ids, embedder);
        switch (step) {
            case AgentStep::Intent: out.decision.need_id = ts.resolution.id; break;
            case AgentStep::Category: out.decision.category_id = ts.resolution.id; break;
            case AgentStep::Behavior: out.decision.behavior_id = ts.resolution.id; break;
        }
        out.decision.reasoning.push_back(ts.output.reasoning_summary);
        prior.push_back(ts.output);
        out.transcript.steps.push_back(std::move(ts));
    }
    return out;
}

std::vector<PipelineOutcome> run_pipelines(ChatBackend& backend, const Embedder& embedder, const Taxonomy& taxonomy,
                                           std::span<const PipelineInput> inputs, const SamplingConfig& sampling,
                                           int max_in_flight) {
    std::vector<PipelineOutcome> out(inputs.size());
    auto run_one = [&](std::size_t i) {
        try {
            out[i] = run_pipeline(backend, embedder, taxonomy, *inputs[i].user, inputs[i].context, sampling);
        } catch (const std::exception& e) {
            out[i] = std::string(e.what());
        }
    };
    const std::size_t workers = std::min<std::size_t>(std::max(max_in_flight, 1), inputs.size());
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < inputs.size(); i += workers) run_one(i);
        });
    return out;
}

nlohmann::ordered_json transcript_to_json(const Transcript& t, const HierarchicalDecision& d,
                                          const Taxonomy& taxonomy) {
    nlohmann::ordered_json j;
    j["user_id"] = t.user_id;
    j["backend"] = t.backend;
    j["decision"] = {{"need", taxonomy.needs().at(d.need_id).label},
                     {"category", taxonomy.categories().at(d.category_id).label},
                     {"behavior", taxonomy.behaviors().at(d.behavior_id).label}};
    j["steps"] = nlohmann::ordered_json::array();
    for (const auto& s : t.steps) {
        nlohmann::ordered_json js;
        js["step"] = to_string(s.step);
        js["messages"] = nlohmann::ordered_json::array();
        for (const auto& m : s.messages) js["messages"].push_back({{"role", to_string(m.role)}, {"content", m.content}});
        js["raw_output"] = s.raw_output;
        js["predicted"] = s.output.predicted;
        js["reasoning_summary"] = s.output.reasoning_summary;
        js["resolved"] = {{"id", s.resolution.id}, {"label", s.resolution.label}, {"method", s.resolution.method}};
        j["steps"].push_back(std::move(js));
    }
    return j;
}

CaseFixture load_case_fixture(const std::string& path, const Taxonomy& taxonomy) {
    std::ifstream in(path);
    if (!in) throw DataError("file not found: " + path);
    nlohmann::ordered_json j;
    try {
        j = nlohmann::ordered_json::parse(in);
        CaseFixture f;
        f.name = j.value("name", path);
        f.user = record_from_json(j.at("user"), taxonomy);
        const auto& c = j.at("context");
        f.context = SpatioTemporalContext::make(c.at("ts").get<std::int64_t>(), c.at("lat").get<double>(),
                                                c.at("lon").get<double>(),
                                                parse_location_type(c.at("loc_type").get<std::string>()),
                                                f.user.tz_offset_s);
        for (const auto& [k, v] : j.at("responses").items()) f.responses[parse_agent_step(k)] = v.get<std::string>();
        const auto& e = j.at("expected");
        f.expected = {e.at("need").get<std::string>(), e.at("category").get<std::string>(),
                      e.value("behavior", std::string{})};
        return f;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed case fixture " + path + ": " + e.what());
    }
}

ScoreReport score_transcripts(std::span<const ScoredOutput> outputs, std::span<const StageTruths> truths,
                              const RewardParams& params, const Taxonomy& taxonomy, const Embedder& embedder) {
    if (outputs.size() != truths.size())
        throw DataError("score: " + std::to_string(outputs.size()) + " outputs but " + std::to_string(truths.size()) +
                        " truths");
    params.validate();
    ScoreReport rep;
    rep.n = outputs.size();
    std::size_t need_n = 0, need_hits = 0;
    for (std::size_t k = 0; k < outputs.size(); ++k) {
        const auto& o = outputs[k];
        std::vector<AgentStep> steps;
        switch (o.stage) {
            case RewardStage::Need: steps = {AgentStep::Intent}; break;
            case RewardStage::Category: steps = {AgentStep::Category}; break;
            case RewardStage::FullPath: steps = {AgentStep::Intent, AgentStep::Category, AgentStep::Behavior}; break;
        }
        StagePredictions pred;
        std::vector<double> fmt, lens;
        for (AgentStep s : steps) {
            auto block = extract_block(s, o.raw_output);
            // Single-step stages also accept a bare JSON object.
            std::string json_text = block ? trim(*block) : steps.size() == 1 ? trim(o.raw_output) : std::string{};
            fmt.push_back(format_reward(json_text, {predicted_key(s), "reasoning_summary"}));
            lens.push_back(static_cast<double>(count_tokens(json_text)));
            auto parsed = parse_step_json(s, json_text);
            if (auto* so = std::get_if<StepOutput>(&parsed)) {
                if (s == AgentStep::Intent) pred.need = so->predicted;
                if (s == AgentStep::Category) pred.category = so->predicted;
                if (s == AgentStep::Behavior) pred.behavior = so->predicted;
            }
        }
        const double r_match = match_reward(o.stage, pred, truths[k], taxonomy, embedder);
        RewardBreakdown b;
        if (params.aux_per_step && steps.size() > 1) {
            const auto& w = params.weights(o.stage);
            b.r_match = r_match;
            b.correct = r_match > 0.0;
            for (std::size_t s = 0; s < steps.size(); ++s) {
                b.r_fmt += fmt[s] / static_cast<double>(steps.size());
                b.r_len += length_reward(b.correct, lens[s], o.step, params) / static_cast<double>(steps.size());
            }
            b.total = w.match * b.r_match + w.fmt * b.r_fmt + w.len * b.r_len;
        } else {
            const double r_fmt = *std::min_element(fmt.begin(), fmt.end());
            b = combine_reward(o.stage, r_match, r_fmt, static_cast<double>(count_tokens(o.raw_output)), o.step,
                               params);
        }
        if (pred.need) {
            ++need_n;
            need_hits += need_match_reward(*pred.need, truths[k].need);
        }
        rep.mean_total += b.total;
        rep.mean_match += b.r_match;
        rep.mean_fmt += b.r_fmt;
        rep.mean_len += b.r_len;
        rep.items.push_back(b);
    }
    if (rep.n > 0) {
        const double n = static_cast<double>(rep.n);
        rep.mean_total /= n;
        rep.mean_match /= n;
        rep.mean_fmt /= n;
        rep.mean_len /= n;
    }
    if (need_n > 0) rep.need_accuracy = static_cast<double>(need_hits) / static_cast<double>(need_n);
    return rep;
}

void load_scoring_file(const std::string& path, std::vector<ScoredOutput>& outputs,
                       std::vector<StageTruths>& truths) {
    std::ifstream in(path);
    if (!in) throw DataError("file not found: " + path);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            outputs.push_back({parse_reward_stage(j.at("stage").get<std::string>()), j.at("raw_output").get<std::string>(),
                               j.value("step", 0.0)});
            truths.push_back({j.at("truth_need").get<std::string>(), j.at("truth_category").get<std::string>(),
                              j.at("truth_behavior").get<std::string>()});
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
}

nlohmann::json score_report_to_json(const ScoreReport& r) {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& b : r.items)
        items.push_back({{"r_match", b.r_match}, {"r_fmt", b.r_fmt}, {"r_len", b.r_len}, {"total", b.total},
                         {"correct", b.correct}});
    return {{"n", r.n},
            {"mean_total", r.mean_total},
            {"mean_match", r.mean_match},
            {"mean_fmt", r.mean_fmt},
            {"mean_len", r.mean_len},
            {"need_accuracy", r.need_accuracy ? nlohmann::json(*r.need_accuracy) : nlohmann::json(nullptr)},
            {"items", items}};
}

}  // namespace needforge
