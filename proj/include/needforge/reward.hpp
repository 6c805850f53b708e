#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "needforge/domain.hpp"

namespace needforge {

/// Maps text into a shared unit-norm vector space.
class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::size_t dim() const = 0;
    /// Unit-norm, deterministic per text.
    virtual std::vector<double> embed(std::string_view text) const = 0;
    virtual std::vector<std::vector<double>> embed_batch(const std::vector<std::string>& texts) const;
};

double cosine(std::span<const double> a, std::span<const double> b);

/// Character-trigram counts hashed into `dim` buckets, L2-normalized.
class HashEmbedder final : public Embedder {
public:
    HashEmbedder(std::size_t dim, std::uint64_t seed);
    std::size_t dim() const override { return dim_; }
    std::vector<double> embed(std::string_view text) const override;

private:
    std::size_t dim_;
    std::uint64_t seed_;
};

/// Read-mostly memo in front of another embedder.
class CachedEmbedder final : public Embedder {
public:
    explicit CachedEmbedder(std::shared_ptr<const Embedder> inner) : inner_(std::move(inner)) {}
    std::size_t dim() const override { return inner_->dim(); }
    std::vector<double> embed(std::string_view text) const override;

private:
    std::shared_ptr<const Embedder> inner_;
    mutable std::shared_mutex mu_;
    mutable std::map<std::string, std::vector<double>, std::less<>> memo_;
};

enum class RewardStage { Need, Category, FullPath };
std::string_view to_string(RewardStage s);
RewardStage parse_reward_stage(std::string_view s);

struct RewardWeights {
    double match = 1.0;
    double fmt = 0.2;
    double len = 0.1;
};

struct RewardParams {
    RewardWeights need;
    RewardWeights category;
    RewardWeights full_path;
    double alpha = 0.5;
    double decay_steps = 500.0;  // T
    double len_min = 16.0;
    double len_max = 256.0;
    double eps_std = 1e-6;
    /// Score format/length for each step of a multi-step output instead of once.
    bool aux_per_step = false;

    const RewardWeights& weights(RewardStage s) const;
    void validate() const;
};

struct RewardBreakdown {
    double r_match = 0.0;
    double r_fmt = 0.0;
    double r_len = 0.0;
    double total = 0.0;
    bool correct = false;
};

/// Trim, case-fold (ASCII) and collapse internal whitespace.
std::string normalize_label(std::string_view text);
/// Whitespace-split token count.
std::size_t count_tokens(std::string_view text);

/// 1 iff `raw_output` is a JSON object holding every key with a string value.
int format_reward(std::string_view raw_output, const std::vector<std::string>& required_keys);

double length_reward(bool correct, double length, double step, const RewardParams& p);

int need_match_reward(std::string_view pred, std::string_view truth);
int behavior_match_reward(std::string_view pred, std::string_view truth);

/// Index of the candidate with the highest cosine to `embedding`, ties to lower index.
int nearest_candidate(std::span<const double> embedding, const std::vector<std::vector<double>>& candidates);

double category_reward(std::string_view pred, std::string_view truth_label, const Taxonomy& taxonomy,
                       const Embedder& embedder);

/// Labels predicted at each stage; absent when the output did not reach that stage.
struct StagePredictions {
    std::optional<std::string> need;
    std::optional<std::string> category;
    std::optional<std::string> behavior;
};

struct StageTruths {
    std::string need;
    std::string category;
    std::string behavior;
};

/// Match reward for one stage: need/behavior exact match, category semantic.
double match_reward(RewardStage stage, const StagePredictions& pred, const StageTruths& truth,
                    const Taxonomy& taxonomy, const Embedder& embedder);

/// Combines a match score with format and length terms.
RewardBreakdown combine_reward(RewardStage stage, double r_match, double r_fmt, double length,
                               double step, const RewardParams& p);

RewardBreakdown total_reward(RewardStage stage, const StagePredictions& pred, const StageTruths& truth,
                             double r_fmt, double length, double step, const RewardParams& p,
                             const Taxonomy& taxonomy, const Embedder& embedder);

/// Precomputed category_reward for every (predicted, truth) category pair of a taxonomy.
class CategoryRewardTable {
public:
    CategoryRewardTable(const Taxonomy& taxonomy, const Embedder& embedder);
    double operator()(int predicted, int truth) const {
        return table_[static_cast<std::size_t>(predicted) * n_ + truth];
    }
    int size() const { return n_; }

private:
    int n_;
    std::vector<double> table_;
};

}  // namespace needforge
