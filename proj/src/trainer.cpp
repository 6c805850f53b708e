#include "needforge/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>
#include <thread>
#include <tuple>

namespace needforge {

void GrpoConfig::validate() const {
    if (group_size < 2) throw DataError("grpo: group_size must be >= 2");
    if (!(clip_eps > 0.0 && clip_eps < 1.0)) throw DataError("grpo: clip_eps must be in (0,1)");
    if (!(kl_beta >= 0.0)) throw DataError("grpo: kl_beta must be >= 0");
    if (!(learning_rate > 0.0)) throw DataError("grpo: learning_rate must be > 0");
    if (steps < 0) throw DataError("grpo: steps must be >= 0");
    if (prompts_per_step < 1) throw DataError("grpo: prompts_per_step must be >= 1");
    if (inner_epochs < 1) throw DataError("grpo: inner_epochs must be >= 1");
}

std::string_view to_string(Phase p) {
    switch (p) {
        case Phase::NeedAlignment: return "need_alignment";
        case Phase::CategoryConstrained: return "category_constrained";
        case Phase::FullPath: return "full_path";
    }
    return "unknown";
}

Phase parse_phase(std::string_view s) {
    if (s == "need_alignment") return Phase::NeedAlignment;
    if (s == "category_constrained") return Phase::CategoryConstrained;
    if (s == "full_path") return Phase::FullPath;
    throw DataError("unknown phase: " + std::string(s));
}

Depth phase_depth(Phase p) {
    switch (p) {
        case Phase::NeedAlignment: return Depth::Need;
        case Phase::CategoryConstrained: return Depth::Category;
        case Phase::FullPath: return Depth::Behavior;
    }
    return Depth::Behavior;
}

CurriculumPlan CurriculumPlan::standard(const GrpoConfig& base, int need_steps, int category_steps, int full_steps) {
    CurriculumPlan plan;
    const std::pair<Phase, RewardStage> order[] = {{Phase::NeedAlignment, RewardStage::Need},
                                                   {Phase::CategoryConstrained, RewardStage::Category},
                                                   {Phase::FullPath, RewardStage::FullPath}};
    const int steps[] = {need_steps, category_steps, full_steps};
    for (int k = 0; k < 3; ++k) {
        PhaseSpec ps{order[k].first, order[k].second, base};
        ps.grpo.steps = steps[k];
        ps.grpo.seed = derive_seed(base.seed, static_cast<std::uint64_t>(k));
        plan.phases.push_back(ps);
    }
    return plan;
}

CurriculumPlan CurriculumPlan::full_path_only(const GrpoConfig& base, int steps) {
    CurriculumPlan plan;
    plan.ablation = true;
    PhaseSpec ps{Phase::FullPath, RewardStage::FullPath, base};
    ps.grpo.steps = steps;
    ps.grpo.seed = derive_seed(base.seed, 2);
    plan.phases.push_back(ps);
    return plan;
}

void CurriculumPlan::validate() const {
    if (phases.empty()) throw DataError("curriculum: no phases");
    for (const auto& p : phases) p.grpo.validate();
    if (ablation) return;
    if (phases.size() != 3) throw DataError("curriculum: expected the three phases (set ablation to override)");
    for (std::size_t k = 0; k < phases.size(); ++k)
        if (static_cast<std::size_t>(phases[k].phase) != k)
            throw DataError("curriculum: phases out of order (set ablation to override)");
}

std::string CurriculumPlan::tag() const {
    if (!ablation) return "curriculum";
    std::string t = "ablation:";
    for (std::size_t k = 0; k < phases.size(); ++k) {
        if (k) t += "+";
        t += to_string(phases[k].phase);
    }
    return t;
}

std::vector<Example> make_examples(const World& world, const FeatureLayout& layout,
                                   const std::vector<UserRecord>& users, bool all_positions) {
    std::vector<Example> out;
    for (const auto& u : users) {
        if (u.history.empty()) continue;
        const int arch = world.archetype_of(u.profile);
        const std::size_t first = all_positions ? 1 : u.history.size() - 1;
        for (std::size_t k = std::min(first, u.history.size() - 1); k < u.history.size(); ++k) {
            const auto& t = u.history[k];
            Example ex;
            ex.state = make_state(layout, arch, t.context, std::span<const Interaction>(u.history.data(), k));
            ex.archetype = arch;
            ex.need_id = t.need_id;
            ex.category_id = t.category_id;
            ex.behavior_id = t.behavior_id;
            ex.history_length = u.history.size();
            out.push_back(std::move(ex));
        }
    }
    return out;
}

RewardFn make_reward_fn(const Taxonomy& taxonomy, const Embedder& embedder, const RewardParams& params) {
    params.validate();
    auto table = std::make_shared<const CategoryRewardTable>(taxonomy, embedder);
    return [table, params](const Example& ex, const HierarchicalDecision& d, RewardStage stage, double step) {
        const double need = d.need_id == ex.need_id ? 1.0 : 0.0;
        const double cat = d.category_id >= 0 ? (*table)(d.category_id, ex.category_id) : 0.0;
        const double beh = d.behavior_id == ex.behavior_id ? 1.0 : 0.0;
        double r_match = 0.0;
        switch (stage) {
            case RewardStage::Need: r_match = need; break;
            case RewardStage::Category: r_match = cat; break;
            case RewardStage::FullPath: r_match = (need + cat + beh) / 3.0; break;
        }
        return combine_reward(stage, r_match, 1.0, 0.0, step, params);
    };
}

std::vector<double> group_advantages(std::span<const double> rewards, double eps_std) {
    const double n = static_cast<double>(rewards.size());
    if (rewards.empty()) return {};
    // Equal rewards carry no signal; rounding in the mean must not be amplified by eps_std.
    const auto [lo, hi] = std::minmax_element(rewards.begin(), rewards.end());
    if (*lo == *hi) return std::vector<double>(rewards.size(), 0.0);
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= n;
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    const double sd = std::max(std::sqrt(var / n), eps_std);
    std::vector<double> a;
    a.reserve(rewards.size());
    for (double r : rewards) a.push_back((r - mean) / sd);
    return a;
}

ProbeResult probe(const HierarchicalPolicy& policy, std::span<const Example> probe_set) {
    ProbeResult out;
    if (probe_set.empty()) return out;
    std::int64_t need_hits = 0, cat_hits = 0;
    for (const auto& ex : probe_set) {
        const auto m = policy.marginals(ex.state, Depth::Category);
        if (!m.need.empty())
            need_hits += (std::max_element(m.need.begin(), m.need.end()) - m.need.begin()) == ex.need_id;
        cat_hits += (std::max_element(m.category.begin(), m.category.end()) - m.category.begin()) == ex.category_id;
    }
    const double n = static_cast<double>(probe_set.size());
    if (policy.mode() == PolicyMode::Hierarchical) out.need_acc = static_cast<double>(need_hits) / n;
    out.cat_hr1 = static_cast<double>(cat_hits) / n;
    return out;
}

EntropyBreakdown mean_entropy(const HierarchicalPolicy& policy, std::span<const Example> states) {
    EntropyBreakdown m;
    if (states.empty()) return m;
    for (const auto& ex : states) {
        const auto e = policy.entropy(ex.state);
        m.need += e.need;
        m.category += e.category;
        m.behavior += e.behavior;
        m.total += e.total;
    }
    const double n = static_cast<double>(states.size());
    m.need /= n;
    m.category /= n;
    m.behavior /= n;
    m.total /= n;
    return m;
}

namespace {

/// Runs fn(i) for i in [0, n) on up to `jobs` threads; fn must only touch slot i.
template <class Fn>
void parallel_for(std::size_t n, int jobs, Fn&& fn) {
    const std::size_t workers = std::min<std::size_t>(std::max(jobs, 1), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += workers) fn(i);
        });
}

struct GroupRollouts {
    std::vector<HierarchicalDecision> decisions;
    std::vector<double> old_logprob;
    std::vector<double> rewards;
    std::vector<double> advantages;
};

}  // namespace

StepStats grpo_step(HierarchicalPolicy& policy, const HierarchicalPolicy& reference, const StepInputs& in,
                    const GrpoConfig& cfg, const RewardFn& reward) {
    cfg.validate();
    if (in.prompts.empty()) throw DataError("grpo_step: no prompts");
    const std::size_t n_prompts = in.prompts.size();
    const int n = cfg.group_size;
    SamplingConfig one = policy.sampling();
    one.n = 1;

    std::vector<GroupRollouts> groups(n_prompts);
    parallel_for(n_prompts, in.jobs, [&](std::size_t p) {
        auto& g = groups[p];
        const auto& ex = in.prompts[p];
        for (int r = 0; r < n; ++r) {
            Rng rng(derive_seed(in.seed, p, static_cast<std::uint64_t>(r)));
            auto ro = policy.sample(ex.state, one, rng, in.depth).front();
            g.rewards.push_back(reward(ex, ro.decision, in.reward_stage, in.global_step).total);
            g.old_logprob.push_back(ro.logprob.total);
            g.decisions.push_back(ro.decision);
        }
        g.advantages = group_advantages(g.rewards, in.eps_std);
    });

    StepStats st;
    st.step = in.global_step;
    st.max_reward = -INFINITY;
    for (const auto& g : groups)
        for (int r = 0; r < n; ++r) {
            st.mean_reward += g.rewards[r];
            st.max_reward = std::max(st.max_reward, g.rewards[r]);
            st.mean_abs_advantage += std::abs(g.advantages[r]);
        }
    const double denom = static_cast<double>(n_prompts) * n;
    st.mean_reward /= denom;
    st.mean_abs_advantage /= denom;

    for (int epoch = 0; epoch < cfg.inner_epochs; ++epoch) {
        std::vector<PolicyParams> grads(n_prompts);
        std::vector<double> kl(n_prompts, 0.0);
        parallel_for(n_prompts, in.jobs, [&](std::size_t p) {
            const auto& g = groups[p];
            const auto& s = in.prompts[p].state;
            grads[p] = policy.zeros_like();
            for (int r = 0; r < n; ++r) {
                const auto& d = g.decisions[r];
                const double lp = policy.logprob(s, d, in.depth);
                const double ratio = std::exp(lp - g.old_logprob[r]);
                const double a = g.advantages[r];
                // Clipped surrogate: the gradient vanishes once the ratio leaves the trust band
                // in the direction the advantage favors.
                const bool clipped = (a > 0 && ratio > 1.0 + cfg.clip_eps) || (a < 0 && ratio < 1.0 - cfg.clip_eps);
                double coef = clipped ? 0.0 : a * ratio;
                if (cfg.kl_beta > 0.0) {
                    // k3 estimator q - log q - 1 with q = pi_ref / pi; its gradient is (1 - q) grad log pi.
                    const double q = std::exp(reference.logprob(s, d, in.depth) - lp);
                    kl[p] += q - std::log(q) - 1.0;
                    coef -= cfg.kl_beta * (1.0 - q);
                }
                if (coef != 0.0) policy.accumulate_grad(grads[p], s, d, in.depth, coef);
            }
        });
        PolicyParams step = policy.zeros_like();
        double kl_sum = 0.0;
        for (std::size_t p = 0; p < n_prompts; ++p) {
            step += grads[p];
            kl_sum += kl[p];
        }
        step *= cfg.learning_rate / denom;
        if (!step.all_finite())
            throw TrainError("non-finite gradient at step " + std::to_string(in.global_step) + " (epoch " +
                             std::to_string(epoch) + ")");
        policy.mutable_params() += step;
        if (epoch == 0) st.kl = std::max(0.0, kl_sum / denom);
    }
    return st;
}

std::vector<int> probe_marks(int steps) {
    std::vector<int> marks;
    for (int q = 1; q <= 5; ++q) {
        const int m = static_cast<int>((2LL * steps * q + 5) / 10);
        if (m > 0 && (marks.empty() || marks.back() != m)) marks.push_back(m);
    }
    return marks;
}

namespace {

void check_compatible(const HierarchicalPolicy& policy, const World& world) {
    const auto expected = PolicyStructure::from_world(world);
    const auto& st = policy.structure();
    if (st.n_needs != expected.n_needs || st.n_categories != expected.n_categories ||
        st.n_behaviors != expected.n_behaviors || !(st.layout == expected.layout) ||
        st.behavior_category != expected.behavior_category)
        throw DataError("checkpoint does not match world");
}

}  // namespace

PhaseResult run_phase(const PhaseSpec& spec, const HierarchicalPolicy& initial, const TrainContext& ctx,
                      int global_step_offset, const HierarchicalPolicy* reference) {
    if (!ctx.world) throw DataError("run_phase: no world");
    spec.grpo.validate();
    check_compatible(initial, *ctx.world);
    PhaseResult out{initial, {}, probe(initial, ctx.probe), {}};
    out.final_probe = out.initial_probe;
    if (spec.grpo.steps == 0) return out;
    if (ctx.train.empty()) throw DataError("run_phase: empty training set");

    auto& policy = out.policy;
    policy.set_stage_tag(std::string(to_string(spec.phase)));
    const HierarchicalPolicy& ref = reference ? *reference : initial;
    const auto marks = probe_marks(spec.grpo.steps);
    const auto entropy_set = ctx.probe.first(std::min<std::size_t>(ctx.probe.size(), ctx.entropy_states));
    Rng picker(derive_seed(spec.grpo.seed, 0x9e37));
    std::vector<Example> batch(spec.grpo.prompts_per_step);

    for (int t = 1; t <= spec.grpo.steps; ++t) {
        for (auto& ex : batch) ex = ctx.train[picker.below(ctx.train.size())];
        StepInputs in;
        in.prompts = batch;
        in.reward_stage = spec.reward_stage;
        in.depth = phase_depth(spec.phase);
        in.global_step = global_step_offset + t - 1;
        in.seed = derive_seed(spec.grpo.seed, static_cast<std::uint64_t>(t));
        in.jobs = ctx.jobs;
        in.eps_std = ctx.eps_std;
        auto row = grpo_step(policy, ref, in, spec.grpo, ctx.reward);
        row.step = global_step_offset + t;
        row.phase_step = t;
        row.phase = std::string(to_string(spec.phase));
        row.entropy = mean_entropy(policy, entropy_set);
        if (std::find(marks.begin(), marks.end(), t) != marks.end()) {
            out.final_probe = probe(policy, ctx.probe);
            row.need_acc = out.final_probe.need_acc;
            row.cat_hr1 = out.final_probe.cat_hr1;
        }
        out.rows.push_back(std::move(row));
    }
    return out;
}

CurriculumResult run_curriculum(const CurriculumPlan& plan, const HierarchicalPolicy& initial,
                                const TrainContext& ctx) {
    plan.validate();
    CurriculumResult out{initial, {}, {}, plan.tag()};
    int offset = 0;
    for (const auto& spec : plan.phases) {
        const HierarchicalPolicy* ref = plan.kl_reference == KlReference::GlobalInitial ? &initial : nullptr;
        auto res = run_phase(spec, out.policy, ctx, offset, ref);
        offset += spec.grpo.steps;
        out.policy = res.policy;
        out.rows.insert(out.rows.end(), res.rows.begin(), res.rows.end());
        out.phases.push_back(std::move(res));
    }
    return out;
}

std::string stats_to_csv(std::span<const StepStats> rows) {
    std::ostringstream os;
    os << std::setprecision(10);
    os << "step,phase,mean_reward,entropy_need,entropy_cat,entropy_beh,kl,need_acc,cat_hr1\n";
    for (const auto& r : rows) {
        os << r.step << ',' << r.phase << ',' << r.mean_reward << ',' << r.entropy.need << ',' << r.entropy.category
           << ',' << r.entropy.behavior << ',' << r.kl << ',';
        if (r.need_acc) os << *r.need_acc;
        os << ',';
        if (r.cat_hr1) os << *r.cat_hr1;
        os << '\n';
    }
    return os.str();
}

VarianceDecomposition variance_decomposition(std::span<const VarianceSample> samples) {
    if (samples.size() < 2) throw DataError("variance decomposition needs at least 2 samples");
    const double n = static_cast<double>(samples.size());
    double mean = 0.0;
    for (const auto& s : samples) mean += s.value;
    mean /= n;

    struct Group {
        double sum = 0.0;
        std::vector<double> values;
    };
    std::map<std::tuple<int, int, std::int64_t>, Group> groups;
    for (const auto& s : samples) {
        auto& g = groups[{s.category, s.need, s.state}];
        g.sum += s.value;
        g.values.push_back(s.value);
    }
    VarianceDecomposition out;
    for (const auto& s : samples) out.total += (s.value - mean) * (s.value - mean);
    out.total /= n;
    for (const auto& [key, g] : groups) {
        const double m = static_cast<double>(g.values.size());
        const double gm = g.sum / m;
        double ss = 0.0;
        for (double v : g.values) ss += (v - gm) * (v - gm);
        out.intra += ss / n;  // (m/n) * (ss/m)
        out.inter += m / n * (gm - mean) * (gm - mean);
    }
    return out;
}

CollapseResult collapse_monitor(std::span<const double> total_entropy, double floor, int window) {
    if (window < 1) throw DataError("collapse monitor: window must be >= 1");
    CollapseResult out;
    const std::size_t w = static_cast<std::size_t>(window);
    for (std::size_t i = w - 1; i < total_entropy.size(); ++i) {
        double sum = 0.0;
        for (std::size_t j = i + 1 - w; j <= i; ++j) sum += total_entropy[j];
        if (sum / static_cast<double>(w) < floor) {
            out.collapsed = true;
            out.first_step = static_cast<int>(i);
            break;
        }
    }
    return out;
}

}  // namespace needforge
