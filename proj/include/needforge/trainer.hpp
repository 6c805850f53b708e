#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "needforge/domain.hpp"
#include "needforge/envsim.hpp"
#include "needforge/policy.hpp"
#include "needforge/reward.hpp"

namespace needforge {

/// Raised when an update would write non-finite parameters.
class TrainError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct GrpoConfig {
    int group_size = 16;
    double clip_eps = 0.2;
    double kl_beta = 0.01;
    double learning_rate = 0.05;
    int steps = 200;
    int prompts_per_step = 16;
    /// Optimizer passes over each rollout group; 1 keeps the update on-policy.
    int inner_epochs = 1;
    std::uint64_t seed = 1;

    void validate() const;
};

enum class Phase { NeedAlignment, CategoryConstrained, FullPath };
std::string_view to_string(Phase p);
Phase parse_phase(std::string_view s);
/// Rollout depth a phase trains: need, need+category, or the full path.
Depth phase_depth(Phase p);

struct PhaseSpec {
    Phase phase = Phase::NeedAlignment;
    RewardStage reward_stage = RewardStage::Need;
    GrpoConfig grpo;
};

enum class KlReference { PhaseInitial, GlobalInitial };

struct CurriculumPlan {
    std::vector<PhaseSpec> phases;
    /// Allows phases out of order or skipped; recorded in the plan tag.
    bool ablation = false;
    KlReference kl_reference = KlReference::PhaseInitial;

    /// The three phases in order, each with `base` and its own step count.
    static CurriculumPlan standard(const GrpoConfig& base, int need_steps, int category_steps, int full_steps);
    /// Full-path training from scratch.
    static CurriculumPlan full_path_only(const GrpoConfig& base, int steps);

    void validate() const;
    /// "curriculum" or "ablation:<phase>+<phase>...".
    std::string tag() const;
};

/// One (state, target) prompt.
struct Example {
    StateFeatures state;
    int archetype = -1;
    int need_id = 0;
    int category_id = 0;
    int behavior_id = 0;
    std::size_t history_length = 0;
};

/// With `all_positions`, every interaction k >= 1 becomes a target over history[0..k);
/// otherwise only the last interaction of each non-empty history does.
std::vector<Example> make_examples(const World& world, const FeatureLayout& layout,
                                   const std::vector<UserRecord>& users, bool all_positions);

using RewardFn = std::function<RewardBreakdown(const Example& ex, const HierarchicalDecision& d,
                                               RewardStage stage, double step)>;

/// Verifiable reward for the compact policy: id-level matches, the category
/// embedding table, r_fmt = 1 and zero output length.
RewardFn make_reward_fn(const Taxonomy& taxonomy, const Embedder& embedder, const RewardParams& params);

std::vector<double> group_advantages(std::span<const double> rewards, double eps_std);

struct ProbeResult {
    std::optional<double> need_acc;  // absent for flat policies
    double cat_hr1 = 0.0;
};

ProbeResult probe(const HierarchicalPolicy& policy, std::span<const Example> probe_set);

struct StepStats {
    int step = 0;        // global, across phases
    int phase_step = 0;  // 1-based within the phase
    std::string phase;
    double mean_reward = 0.0;
    double max_reward = 0.0;
    double mean_abs_advantage = 0.0;
    EntropyBreakdown entropy;
    double kl = 0.0;
    std::optional<double> need_acc;
    std::optional<double> cat_hr1;
};

/// Mean policy entropy over a state sample.
EntropyBreakdown mean_entropy(const HierarchicalPolicy& policy, std::span<const Example> states);

struct StepInputs {
    std::span<const Example> prompts;
    RewardStage reward_stage = RewardStage::Need;
    Depth depth = Depth::Need;
    int global_step = 0;
    std::uint64_t seed = 0;
    int jobs = 1;
    double eps_std = 1e-6;
};

/// One GRPO update in place. Entropy and probe fields of the result are left for the caller.
StepStats grpo_step(HierarchicalPolicy& policy, const HierarchicalPolicy& reference, const StepInputs& in,
                    const GrpoConfig& cfg, const RewardFn& reward);

struct TrainContext {
    const World* world = nullptr;
    std::span<const Example> train;
    std::span<const Example> probe;
    RewardFn reward;
    double eps_std = 1e-6;
    int jobs = 1;
    /// Probe states used for the per-step entropy trace.
    int entropy_states = 128;
};

struct PhaseResult {
    HierarchicalPolicy policy;
    std::vector<StepStats> rows;
    ProbeResult initial_probe;
    ProbeResult final_probe;
};

/// Probe rows land at 20/40/60/80/100% of the phase steps.
std::vector<int> probe_marks(int steps);

/// `reference` overrides the phase-initial KL reference when given.
PhaseResult run_phase(const PhaseSpec& spec, const HierarchicalPolicy& initial, const TrainContext& ctx,
                      int global_step_offset, const HierarchicalPolicy* reference = nullptr);

struct CurriculumResult {
    HierarchicalPolicy policy;
    std::vector<StepStats> rows;
    std::vector<PhaseResult> phases;  // policies kept as per-phase checkpoints
    std::string tag;
};

CurriculumResult run_curriculum(const CurriculumPlan& plan, const HierarchicalPolicy& initial,
                                const TrainContext& ctx);

/// Header plus one line per row; probe columns empty when not probed.
std::string stats_to_csv(std::span<const StepStats> rows);

struct VarianceSample {
    int behavior = 0;
    int category = 0;
    int need = 0;
    std::int64_t state = 0;
    double value = 0.0;
};

struct VarianceDecomposition {
    double intra = 0.0;
    double inter = 0.0;
    double total = 0.0;
};

/// Population-variance split of `value` grouped by (category, need, state).
VarianceDecomposition variance_decomposition(std::span<const VarianceSample> samples);

struct CollapseResult {
    bool collapsed = false;
    std::optional<int> first_step;  // index where the trailing window first drops below the floor
};

/// Flags when the mean of the last `window` entries falls strictly below `floor`.
CollapseResult collapse_monitor(std::span<const double> total_entropy, double floor, int window);

}  // namespace needforge
