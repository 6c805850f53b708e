#include "needforge/eval.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

#include "needforge/envsim.hpp"
#include "needforge/reward.hpp"

namespace needforge {

int truth_rank(const RankedPrediction& pred) {
    for (std::size_t i = 0; i < pred.candidates.size(); ++i)
        if (pred.candidates[i] == pred.truth) return static_cast<int>(i) + 1;
    return 0;
}

int hr_at_k(const RankedPrediction& pred, int k) {
    const int r = truth_rank(pred);
    return r > 0 && r <= k ? 1 : 0;
}

double ndcg_at_k(const RankedPrediction& pred, int k) {
    const int r = truth_rank(pred);
    return r > 0 && r <= k ? 1.0 / std::log2(r + 1.0) : 0.0;
}

std::string_view to_string(RankLevel l) { return l == RankLevel::Behavior ? "behavior" : "category"; }

RankLevel parse_rank_level(std::string_view s) {
    if (s == "category") return RankLevel::Category;
    if (s == "behavior") return RankLevel::Behavior;
    throw DataError("unknown rank level: " + std::string(s));
}

RankedPrediction rank_by_scores(std::span<const double> scores, int truth) {
    RankedPrediction out;
    out.truth = truth;
    out.candidates.resize(scores.size());
    std::iota(out.candidates.begin(), out.candidates.end(), 0);
    std::stable_sort(out.candidates.begin(), out.candidates.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });
    return out;
}

RankedPrediction rank_candidates(const HierarchicalPolicy& policy, const StateFeatures& s, RankLevel level,
                                 int truth) {
    const auto m = policy.marginals(s);
    return rank_by_scores(level == RankLevel::Category ? m.category : m.behavior, truth);
}

RankedPrediction rank_from_text(std::string_view text, const std::vector<std::vector<double>>& label_embeddings,
                                const Embedder& embedder, int truth) {
    const auto e = embedder.embed(text);
    std::vector<double> scores;
    scores.reserve(label_embeddings.size());
    for (const auto& l : label_embeddings) scores.push_back(cosine(e, l));
    return rank_by_scores(scores, truth);
}

SliceDef cold_start_slice() {
    return {"cold_start", [](const EvalExample& e) { return e.history_length == 2; }};
}

SliceDef slice_by_name(const std::string& name) {
    if (name == "cold_start") return cold_start_slice();
    if (name.rfind("len_", 0) == 0) {
        std::size_t n = 0;
        try {
            n = std::stoul(name.substr(4));
        } catch (const std::exception&) {
            throw DataError("bad slice name: " + name);
        }
        return {name, [n](const EvalExample& e) { return e.history_length == n; }};
    }
    throw DataError("unknown slice: " + name);
}

namespace {

struct Tally {
    std::int64_t n = 0;
    std::array<std::int64_t, 6> hits_at_rank{};  // ranks 1..5 in slots 1..5
    std::int64_t need_n = 0;
    std::int64_t need_hits = 0;

    void add(const EvalExample& e) {
        ++n;
        const int r = truth_rank(e.ranking);
        if (r >= 1 && r <= 5) ++hits_at_rank[r];
        if (e.need_correct) {
            ++need_n;
            need_hits += *e.need_correct ? 1 : 0;
        }
    }

    MetricSet finish() const {
        MetricSet m;
        m.n_examples = n;
        if (n == 0) return m;
        const double dn = static_cast<double>(n);
        auto hr = [&](int k) {
            std::int64_t h = 0;
            for (int r = 1; r <= k; ++r) h += hits_at_rank[r];
            return static_cast<double>(h) / dn;
        };
        auto ndcg = [&](int k) {
            double g = 0.0;
            for (int r = 1; r <= k; ++r) g += static_cast<double>(hits_at_rank[r]) / std::log2(r + 1.0);
            return g / dn;
        };
        m.hr1 = hr(1);
        m.hr3 = hr(3);
        m.hr5 = hr(5);
        m.ndcg3 = ndcg(3);
        m.ndcg5 = ndcg(5);
        if (need_n > 0) m.need_accuracy = static_cast<double>(need_hits) / static_cast<double>(need_n);
        return m;
    }
};

nlohmann::json metrics_to_json(const MetricSet& m) {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    return {{"n_examples", m.n_examples}, {"hr@1", opt(m.hr1)},     {"hr@3", opt(m.hr3)},
            {"hr@5", opt(m.hr5)},         {"ndcg@3", opt(m.ndcg3)}, {"ndcg@5", opt(m.ndcg5)},
            {"need_accuracy", opt(m.need_accuracy)}};
}

}  // namespace

EvalReport evaluate_examples(std::span<const EvalExample> examples, const std::vector<SliceDef>& slices) {
    Tally all;
    std::vector<Tally> per(slices.size());
    for (const auto& e : examples) {
        all.add(e);
        for (std::size_t i = 0; i < slices.size(); ++i)
            if (slices[i].contains(e)) per[i].add(e);
    }
    EvalReport rep;
    rep.overall = all.finish();
    for (std::size_t i = 0; i < slices.size(); ++i) rep.slices[slices[i].name] = per[i].finish();
    return rep;
}

std::vector<EvalExample> policy_examples(const HierarchicalPolicy& policy, const World& world,
                                         const std::vector<UserRecord>& users, RankLevel level) {
    const auto& layout = policy.structure().layout;
    std::vector<EvalExample> out;
    for (const auto& u : users) {
        if (u.history.empty()) continue;
        const auto& target = u.history.back();
        const std::span<const Interaction> past(u.history.data(), u.history.size() - 1);
        const auto s = make_state(layout, world.archetype_of(u.profile), target.context, past);
        EvalExample e;
        e.history_length = u.history.size();
        const auto m = policy.marginals(s);
        const int truth = level == RankLevel::Category ? target.category_id : target.behavior_id;
        e.ranking = rank_by_scores(level == RankLevel::Category ? m.category : m.behavior, truth);
        if (!m.need.empty()) {
            const auto best = std::max_element(m.need.begin(), m.need.end()) - m.need.begin();
            e.need_correct = best == target.need_id;
        }
        out.push_back(std::move(e));
    }
    return out;
}

EvalReport evaluate(const HierarchicalPolicy& policy, const World& world, const std::vector<UserRecord>& users,
                    const std::vector<SliceDef>& slices, RankLevel level) {
    if (users.empty()) throw DataError("empty dataset");
    const auto ex = policy_examples(policy, world, users, level);
    return evaluate_examples(ex, slices);
}

nlohmann::json report_to_json(const EvalReport& report) {
    nlohmann::json j = metrics_to_json(report.overall);
    j["slices"] = nlohmann::json::object();
    for (const auto& [name, m] : report.slices) j["slices"][name] = metrics_to_json(m);
    return j;
}

}  // namespace needforge
