#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "needforge/domain.hpp"
#include "needforge/random.hpp"

namespace needforge {

struct World;
class Embedder;

/// Rollout sampling controls. Defaults follow the production rollout setup.
struct SamplingConfig {
    double temperature = 0.6;
    double top_p = 0.95;
    int n = 16;

    void validate() const;
    friend bool operator==(const SamplingConfig&, const SamplingConfig&) = default;
};

/// Layout of the state feature vector phi(s):
/// [hour one-hot (24) | zone one-hot (5) | archetype one-hot (A) | history category histogram (C) | bias].
struct FeatureLayout {
    int n_archetypes = 0;
    int n_categories = 0;

    int dim() const { return kNumTimeBuckets + kNumLocationTypes + n_archetypes + n_categories + 1; }
    friend bool operator==(const FeatureLayout&, const FeatureLayout&) = default;
};

using StateFeatures = std::vector<double>;

/// `archetype` may be -1 (unknown); `history` is everything before the target.
StateFeatures make_state(const FeatureLayout& layout, int archetype, const SpatioTemporalContext& context,
                         std::span<const Interaction> history);

enum class PolicyMode { Hierarchical, Flat };
std::string_view to_string(PolicyMode m);
PolicyMode parse_policy_mode(std::string_view s);

/// How far down the need -> category -> behavior chain a rollout goes.
enum class Depth { Need = 1, Category = 2, Behavior = 3 };

struct PolicyStructure {
    int n_needs = 0;
    int n_categories = 0;
    int n_behaviors = 0;
    FeatureLayout layout;
    std::vector<int> behavior_category;
    /// Row-major |I| x |C|; empty means the category stage is unmasked.
    std::vector<char> category_support;

    static PolicyStructure from_world(const World& world);
    int feature_dim() const { return layout.dim(); }
    bool category_allowed(int need, int category) const {
        return category_support.empty() ||
               category_support[static_cast<std::size_t>(need) * n_categories + category] != 0;
    }
    friend bool operator==(const PolicyStructure&, const PolicyStructure&) = default;
};

/// Parameter-shaped triple, used for both weights and gradients. Flat mode keeps
/// its single |B| x d matrix in `behavior` and leaves the others empty.
struct PolicyParams {
    Eigen::MatrixXd need;
    Eigen::MatrixXd category;
    Eigen::MatrixXd behavior;

    PolicyParams& operator+=(const PolicyParams& o);
    PolicyParams& operator*=(double s);
    double squared_norm() const;
    bool all_finite() const;
    void set_zero();
};

struct StageLogprobs {
    std::array<double, 3> stage{0.0, 0.0, 0.0};
    double total = 0.0;
};

struct Rollout {
    HierarchicalDecision decision;
    StageLogprobs logprob;
};

struct EntropyBreakdown {
    double need = 0.0;
    double category = 0.0;
    double behavior = 0.0;
    double total = 0.0;
};

struct Marginals {
    std::vector<double> need;  // empty for flat policies
    std::vector<double> category;
    std::vector<double> behavior;
};

/// Factored categorical policy P(i|s) P(c|i,s) P(b|c,i,s), or the flat P(b|s) ablation.
/// Stage scores are log-linear in the stage features; earlier choices enter later
/// stages as one-hots. Probabilities are softmax(scores / temperature).
class HierarchicalPolicy {
public:
    HierarchicalPolicy() = default;
    HierarchicalPolicy(PolicyStructure structure, PolicyMode mode, SamplingConfig sampling);

    const PolicyStructure& structure() const { return structure_; }
    PolicyMode mode() const { return mode_; }
    const SamplingConfig& sampling() const { return sampling_; }
    void set_sampling(const SamplingConfig& s) {
        s.validate();
        sampling_ = s;
    }
    const PolicyParams& params() const { return params_; }
    PolicyParams& mutable_params() { return params_; }

    /// Free-form tag recorded in checkpoints (e.g. the curriculum phase).
    const std::string& stage_tag() const { return stage_tag_; }
    void set_stage_tag(std::string tag) { stage_tag_ = std::move(tag); }

    std::vector<double> need_probs(const StateFeatures& s) const;
    std::vector<double> category_probs(const StateFeatures& s, int need) const;
    std::vector<double> behavior_probs(const StateFeatures& s, int need, int category) const;
    std::vector<double> flat_probs(const StateFeatures& s) const;

    /// Sum of stage log-probabilities up to `depth` (flat mode: the single stage).
    /// Throws std::out_of_range for ids outside the taxonomy.
    double logprob(const StateFeatures& s, const HierarchicalDecision& d, Depth depth = Depth::Behavior) const;
    StageLogprobs stage_logprobs(const StateFeatures& s, const HierarchicalDecision& d,
                                 Depth depth = Depth::Behavior) const;

    /// Gradient of logprob with respect to every parameter.
    PolicyParams grad_logprob(const StateFeatures& s, const HierarchicalDecision& d,
                              Depth depth = Depth::Behavior) const;
    /// grad += scale * grad_logprob(s, d, depth), touching only the affected rows.
    void accumulate_grad(PolicyParams& grad, const StateFeatures& s, const HierarchicalDecision& d,
                         Depth depth, double scale) const;

    /// Temperature then nucleus truncation per stage; n independent draws.
    std::vector<Rollout> sample(const StateFeatures& s, const SamplingConfig& cfg, Rng& rng,
                                Depth depth = Depth::Behavior) const;

    EntropyBreakdown entropy(const StateFeatures& s) const;
    /// Behavior marginals are skipped when depth < Behavior (hierarchical mode).
    Marginals marginals(const StateFeatures& s, Depth depth = Depth::Behavior) const;

    PolicyParams zeros_like() const;

    friend bool operator==(const HierarchicalPolicy& a, const HierarchicalPolicy& b);

private:
    double temperature() const;
    Eigen::VectorXd base_scores(const Eigen::MatrixXd& w, const StateFeatures& s) const;
    void check_decision(const HierarchicalDecision& d, Depth depth) const;

    PolicyStructure structure_;
    PolicyMode mode_ = PolicyMode::Hierarchical;
    SamplingConfig sampling_;
    PolicyParams params_;
    std::string stage_tag_ = "init";
};

/// Tempered, masked softmax; masked entries (mask[i] == 0) get probability 0.
std::vector<double> tempered_softmax(std::span<const double> scores, double temperature,
                                     std::span<const char> mask = {});
/// Indices kept by nucleus truncation; ties at the boundary are all kept.
std::vector<int> nucleus(std::span<const double> probs, double top_p);
double categorical_entropy(std::span<const double> probs);

/// Seeds the need->category and category->behavior one-hot blocks with
/// strength * cosine(label embeddings), a stand-in for a pretrained model's
/// commonsense association between labels.
void apply_label_prior(HierarchicalPolicy& policy, const Taxonomy& taxonomy, const Embedder& embedder,
                       double strength);

nlohmann::json policy_to_json(const HierarchicalPolicy& policy);
HierarchicalPolicy policy_from_json(const nlohmann::json& j);
void save_policy(const std::string& path, const HierarchicalPolicy& policy);
HierarchicalPolicy load_policy(const std::string& path);

}  // namespace needforge
