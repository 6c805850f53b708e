#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "needforge/domain.hpp"
#include "needforge/policy.hpp"

namespace needforge {

struct World;
class Embedder;

/// Candidate ids, most likely first, and the ground-truth id.
struct RankedPrediction {
    std::vector<int> candidates;
    int truth = -1;
};

/// 1-based rank of the truth, or 0 when absent.
int truth_rank(const RankedPrediction& pred);
int hr_at_k(const RankedPrediction& pred, int k);
/// Single relevant item: 1/log2(rank+1) when rank <= k, ideal DCG = 1.
double ndcg_at_k(const RankedPrediction& pred, int k);

enum class RankLevel { Category, Behavior };
std::string_view to_string(RankLevel l);
RankLevel parse_rank_level(std::string_view s);

/// Sorts ids by descending score; ties go to the lower id.
RankedPrediction rank_by_scores(std::span<const double> scores, int truth);
/// Ranks by the policy's marginal probability at `level`.
RankedPrediction rank_candidates(const HierarchicalPolicy& policy, const StateFeatures& s, RankLevel level,
                                 int truth);
/// Ranks labels by cosine to a free-text prediction.
RankedPrediction rank_from_text(std::string_view text, const std::vector<std::vector<double>>& label_embeddings,
                                const Embedder& embedder, int truth);

struct EvalExample {
    RankedPrediction ranking;
    std::optional<bool> need_correct;  // absent when the model has no need stage
    std::size_t history_length = 0;    // of the full user record
};

/// Metric block; every metric is null when the block has no examples.
struct MetricSet {
    std::optional<double> hr1, hr3, hr5, ndcg3, ndcg5, need_accuracy;
    std::int64_t n_examples = 0;
};

struct EvalReport {
    MetricSet overall;
    std::map<std::string, MetricSet> slices;
};

struct SliceDef {
    std::string name;
    std::function<bool(const EvalExample&)> contains;
};

/// Users whose history holds exactly two interactions.
SliceDef cold_start_slice();
/// Resolves a slice by name ("cold_start" or "len_<n>").
SliceDef slice_by_name(const std::string& name);

/// Order-independent aggregation: hit counts are integers summed per rank.
EvalReport evaluate_examples(std::span<const EvalExample> examples, const std::vector<SliceDef>& slices);

/// One example per user with a non-empty history: the last interaction is the
/// target, everything before it is the observed history.
std::vector<EvalExample> policy_examples(const HierarchicalPolicy& policy, const World& world,
                                         const std::vector<UserRecord>& users, RankLevel level);

EvalReport evaluate(const HierarchicalPolicy& policy, const World& world, const std::vector<UserRecord>& users,
                    const std::vector<SliceDef>& slices, RankLevel level = RankLevel::Category);

nlohmann::json report_to_json(const EvalReport& report);

}  // namespace needforge
