// Runs every acceptance criterion at its stated tolerance and prints one line per criterion.
// Exit status is nonzero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "needforge/agent.hpp"
#include "needforge/curation.hpp"
#include "needforge/domain.hpp"
#include "needforge/envsim.hpp"
#include "needforge/eval.hpp"
#include "needforge/policy.hpp"
#include "needforge/reward.hpp"
#include "needforge/trainer.hpp"
#include "oracles.hpp"

using namespace needforge;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    int id;
    std::string name;
    double time_limit_s;  // 0 when the criterion states no runtime bound
    std::function<Outcome()> run;
};

std::string fmt(double x, int prec = 4) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(prec) << x;
    return os.str();
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

int jobs() { return static_cast<int>(std::max(1u, std::thread::hardware_concurrency())); }

std::string fixture(const std::string& rel) { return std::string(NEEDFORGE_FIXTURES) + "/" + rel; }

/// Independent random unit vectors per text.
class MockEmbedder final : public Embedder {
public:
    std::size_t dim() const override { return 32; }
    std::vector<double> embed(std::string_view text) const override {
        std::mt19937_64 gen(std::hash<std::string_view>{}(text) ^ 0x5bd1e995ULL);
        std::normal_distribution<double> nd;
        std::vector<double> v(32);
        double n = 0.0;
        for (auto& x : v) {
            x = nd(gen);
            n += x * x;
        }
        for (auto& x : v) x /= std::sqrt(n);
        return v;
    }
};

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// 1. Dataset statistics from the published counts.
Outcome dataset_statistics() {
    const auto s = dataset_stats_from_counts(10302, 422, 263437);
    const bool ok = std::abs(s.avg_seq_len - 25.57) <= 0.005 && std::abs(s.sparsity * 100.0 - 93.94) <= 0.005;
    return {ok, "avg_seq_len=" + fmt(s.avg_seq_len) + " sparsity=" + fmt(100.0 * s.sparsity) + "%"};
}

// 2. Typicality score properties.
Outcome typicality_suite() {
    std::vector<std::string> failures;
    {
        ClusterModel m{1, {{1.0, 1.0}}, {}, {0, 0, 0}, {}};
        const std::vector<FeatureVector> xs = {{1.0, 1.0}, {0.0, 1.0}, {2.0, 1.0}};
        refresh_sigmas(m, xs);
        if (typicality_scores(m, xs)[0] != 0.0) failures.push_back("centroid");
    }
    {
        ClusterModel m{1, {{4.0}}, {}, {0, 0, 0}, {}};
        const std::vector<FeatureVector> xs = {{4.0}, {4.0}, {4.0}};
        refresh_sigmas(m, xs);
        for (double z : typicality_scores(m, xs))
            if (z != 0.0 || !std::isfinite(z)) failures.push_back("sigma guard");
    }
    {
        ClusterModel m{1, {{1.0}}, {}, {0, 0}, {}};
        const std::vector<FeatureVector> xs = {{0.0}, {2.0}};
        refresh_sigmas(m, xs);
        const auto z = typicality_scores(m, xs);
        if (std::abs(z[0] - 1.0) > 1e-12 || std::abs(z[1] - 1.0) > 1e-12) failures.push_back("hand {0,2}");
    }
    std::mt19937_64 gen(2);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> ud(0.1, 10.0);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int k = 3, dim = 5, n = 60;
        ClusterModel m;
        m.k = k;
        m.centroids.assign(k, FeatureVector(dim, 0.0));
        std::vector<FeatureVector> xs;
        for (int u = 0; u < n; ++u) {
            const int c = u % k;
            FeatureVector x(dim);
            for (int j = 0; j < dim; ++j) x[j] = 3.0 * c + nd(gen);
            xs.push_back(x);
            m.assignments.push_back(c);
        }
        for (int u = 0; u < n; ++u)
            for (int j = 0; j < dim; ++j) m.centroids[m.assignments[u]][j] += xs[u][j] / (n / k);
        refresh_sigmas(m, xs);
        const auto z = typicality_scores(m, xs);
        const double lambda = ud(gen);
        auto scaled = xs;
        for (int u = 0; u < n; ++u)
            for (int j = 0; j < dim; ++j) {
                const double mu = m.centroids[m.assignments[u]][j];
                scaled[u][j] = mu + lambda * (xs[u][j] - mu);
            }
        ClusterModel ms = m;
        refresh_sigmas(ms, scaled);
        const auto zs = typicality_scores(ms, scaled);
        for (int u = 0; u < n; ++u) worst = std::max(worst, std::abs(z[u] - zs[u]));
    }
    if (worst > 1e-9) failures.push_back("scale invariance");
    std::string detail = "max scale deviation=" + fmt(worst, 15);
    for (const auto& f : failures) detail += " FAILED:" + f;
    return {failures.empty(), detail};
}

// 3. Curation contract on a noisy world.
Outcome curation_contract() {
    WorldSpec spec;
    spec.noise_rate = 0.2;
    const World w = generate_world(spec);
    const auto users = generate_users(w, 1000, 2, 20, 21);
    CurationConfig cfg;
    cfg.k = 24;
    cfg.z_threshold = 2.0;
    cfg.r_high = 0.8;
    const auto a = curate(users, w.taxonomy, cfg);
    const auto b = curate(users, w.taxonomy, cfg);

    std::size_t flagged = 0, leaked = 0;
    for (bool o : a.outliers) flagged += o;
    for (std::size_t i : a.kept) leaked += a.outliers[i];

    int boosted = 0, boost_mismatch = 0;
    for (int c = 0; c < a.model.k; ++c) {
        const auto& s = a.report.clusters[c];
        if (s.verdict != Verdict::Boost) continue;
        ++boosted;
        std::size_t kept_here = 0;
        for (std::size_t i : a.kept) kept_here += a.model.assignments[i] == c;
        // ceil(0.8 * n) in integer arithmetic.
        const std::size_t expected = (4 * static_cast<std::size_t>(s.inliers) + 4) / 5;
        boost_mismatch += kept_here != expected;
    }
    const bool deterministic = a.kept == b.kept && a.outliers == b.outliers;
    const bool ok = flagged > 0 && leaked == 0 && boosted > 0 && boost_mismatch == 0 && deterministic;
    return {ok, "flagged=" + std::to_string(flagged) + " leaked=" + std::to_string(leaked) +
                    " boosted_clusters=" + std::to_string(boosted) + " boost_mismatch=" +
                    std::to_string(boost_mismatch) + " deterministic=" + (deterministic ? "yes" : "no")};
}

// 4. Length reward examples and monotonicity.
Outcome length_reward_suite() {
    RewardParams p;
    p.alpha = 0.5;
    p.decay_steps = 500.0;
    p.len_min = 16.0;
    p.len_max = 256.0;
    bool ok = true;
    ok &= std::abs(length_reward(true, 10.0, 0.0, p) - p.alpha) <= 1e-9;
    ok &= std::abs(length_reward(true, p.len_min, 0.0, p) - p.alpha) <= 1e-9;
    for (double l : {0.0, 100.0, 1000.0})
        for (double s : {0.0, 250.0, 5000.0}) ok &= length_reward(false, l, s, p) == 0.0;
    const double mid = 0.5 * (p.len_min + p.len_max);
    ok &= std::abs(length_reward(true, mid, p.decay_steps, p) - p.alpha * std::exp(-1.0) * 0.5) <= 1e-9;
    const bool examples = ok;

    std::mt19937_64 gen(4);
    std::uniform_real_distribution<double> len(0.0, 400.0), step(0.0, 3000.0), delta(0.0, 50.0);
    int violations = 0;
    for (int k = 0; k < 1000; ++k) {
        const double l = len(gen), s = step(gen);
        const double r = length_reward(true, l, s, p);
        if (length_reward(true, l + delta(gen), s, p) > r) ++violations;
        if (length_reward(true, l, s + delta(gen), p) > r) ++violations;
        if (r < 0.0 || r > p.alpha) ++violations;
    }
    return {examples && violations == 0,
            std::string("examples=") + (examples ? "ok" : "FAILED") + " monotonicity_violations=" +
                std::to_string(violations) + "/2000"};
}

// 5. Category reward under the hash embedder and a mock embedder.
Outcome category_reward_suite() {
    const World w = generate_world(WorldSpec{});
    const Taxonomy cases = load_taxonomy(fixture("cases/taxonomy.json"));
    const HashEmbedder hash(256, 11);
    const MockEmbedder mock;
    int exact_total = 0, exact_ok = 0, nearest = 0, nearest_ok = 0, partial = 0;
    double worst = 0.0;
    const std::vector<std::string> probes = {"Budget Hotel", "Fruit Shop", "Night Snacks", "Cake Shop",
                                             "Massage",      "Cinema Tickets", "Grocery", "Hot Pot Dinner"};
    for (const Taxonomy* t : {&w.taxonomy, &cases})
        for (const Embedder* e : std::initializer_list<const Embedder*>{&hash, &mock}) {
            for (const auto& c : t->categories()) {
                ++exact_total;
                exact_ok += category_reward(c.label, c.label, *t, *e) == 1.0;
            }
            std::vector<std::vector<double>> cands;
            for (const auto& c : t->categories()) cands.push_back(e->embed(c.label));
            for (const auto& text : probes) {
                const auto v = e->embed(text);
                int best = 0;
                for (int c = 1; c < static_cast<int>(cands.size()); ++c)
                    if (dot(v, cands[c]) > dot(v, cands[best])) best = c;
                for (const auto& truth : t->categories()) {
                    const double got = category_reward(text, truth.label, *t, *e);
                    if (truth.id == best) {
                        ++nearest;
                        nearest_ok += got == 1.0;
                    } else {
                        ++partial;
                        worst = std::max(worst, std::abs(got - std::max(0.0, dot(v, cands[truth.id]))));
                    }
                }
            }
        }
    const bool ok = exact_ok == exact_total && nearest_ok == nearest && partial > 0 && worst <= 1e-6;
    return {ok, "exact=" + std::to_string(exact_ok) + "/" + std::to_string(exact_total) +
                    " nearest=" + std::to_string(nearest_ok) + "/" + std::to_string(nearest) +
                    " partial_max_err=" + fmt(worst, 12) + " over " + std::to_string(partial)};
}

// 6. Analytic gradient against central differences.
Outcome gradient_check() {
    std::mt19937_64 gen(6);
    double worst = 0.0;
    int bad = 0;
    for (int k = 0; k < 100; ++k) {
        const World w = oracles::small_world(100 + k, k % 3 == 0);
        const PolicyMode mode = k % 4 == 3 ? PolicyMode::Flat : PolicyMode::Hierarchical;
        HierarchicalPolicy p(PolicyStructure::from_world(w), mode, SamplingConfig{k % 2 ? 0.6 : 1.0, 0.95, 16});
        oracles::randomize(p, gen);
        const auto s = oracles::random_state(p.structure().layout, gen);
        const auto d = oracles::random_decision(p, gen);
        const double err = oracles::fd_relative_error(p, s, d, 1e-5);
        worst = std::max(worst, err);
        bad += !(err < 1e-4);
    }
    return {bad == 0, "max_rel_err=" + fmt(worst, 10) + " failures=" + std::to_string(bad) + "/100"};
}

// 7. Two-arm deterministic bandit.
Outcome grpo_bandit() {
    const World w = oracles::tiny_world(1, 1, 2);
    const std::vector<Example> prompts = {oracles::fixed_example(w, 0, 0, 0)};
    const auto reward = oracles::arm0_reward();
    int solved = 0;
    std::string steps;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        HierarchicalPolicy p(PolicyStructure::from_world(w), PolicyMode::Flat, SamplingConfig{});
        const HierarchicalPolicy ref = p;
        GrpoConfig g;
        g.seed = seed;
        int reached = -1;
        for (int t = 1; t <= 200 && reached < 0; ++t) {
            StepInputs in;
            in.prompts = prompts;
            in.reward_stage = RewardStage::FullPath;
            in.depth = Depth::Behavior;
            in.global_step = t - 1;
            in.seed = derive_seed(g.seed, static_cast<std::uint64_t>(t));
            grpo_step(p, ref, in, g, reward);
            if (std::exp(p.logprob(prompts[0].state, {-1, 0, 0, {}})) >= 0.9) reached = t;
        }
        solved += reached > 0;
        steps += (steps.empty() ? "" : ",") + std::to_string(reached);
    }
    return {solved == 5, "seeds_solved=" + std::to_string(solved) + "/5 steps_to_0.9=[" + steps + "]"};
}

struct RunData {
    World world;
    std::vector<Example> train, probe;
};

RunData make_run_data(const WorldSpec& spec, std::uint64_t seed) {
    RunData d{generate_world(spec), {}, {}};
    const auto layout = PolicyStructure::from_world(d.world).layout;
    d.train = make_examples(d.world, layout, generate_users(d.world, 1000, 2, 12, derive_seed(seed, 1), jobs()), true);
    d.probe = make_examples(d.world, layout, generate_users(d.world, 512, 2, 12, derive_seed(seed, 2), jobs()), false);
    return d;
}

// 8. Curriculum transfer on the default world.
Outcome curriculum_transfer() {
    std::vector<double> fresh_cat, init_cat, need_p1, need_p2;
    const HashEmbedder emb(256, 11);
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        WorldSpec spec;
        spec.seed = seed;
        const auto data = make_run_data(spec, seed);
        const auto structure = PolicyStructure::from_world(data.world);
        TrainContext ctx;
        ctx.world = &data.world;
        ctx.train = data.train;
        ctx.probe = data.probe;
        ctx.reward = make_reward_fn(data.world.taxonomy, emb, RewardParams{});
        ctx.jobs = jobs();
        HierarchicalPolicy init(structure, PolicyMode::Hierarchical, SamplingConfig{});
        apply_label_prior(init, data.world.taxonomy, emb, 1.0);
        GrpoConfig g;
        g.seed = seed;
        g.learning_rate = 0.5;
        g.kl_beta = 0.3;
        const auto res = run_curriculum(CurriculumPlan::standard(g, 400, 400, 0), init, ctx);
        fresh_cat.push_back(probe(init, data.probe).cat_hr1);
        init_cat.push_back(res.phases[1].initial_probe.cat_hr1);
        need_p1.push_back(*res.phases[0].final_probe.need_acc);
        need_p2.push_back(*res.phases[1].final_probe.need_acc);
    }
    const bool a = median(init_cat) >= median(fresh_cat);
    const bool b = median(need_p2) >= median(need_p1) - 0.02;
    return {a && b, "(a) phase2_init_cat_hr1=" + fmt(median(init_cat)) + " fresh=" + fmt(median(fresh_cat)) +
                        " (b) need_acc_p2=" + fmt(median(need_p2)) + " need_acc_p1=" + fmt(median(need_p1))};
}

// 9. Entropy collapse: flat versus hierarchical on a noisy sparse-reward world.
Outcome collapse_experiment() {
    const HashEmbedder emb(256, 11);
    const double floor = 0.05 * std::log(100.0);
    int flat_collapsed = 0, hier_collapsed = 0;
    std::string mins;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        WorldSpec spec;
        spec.seed = seed;
        spec.noise_rate = 0.5;
        spec.behavior_sharpness = 0.5;
        const auto data = make_run_data(spec, seed);
        const auto structure = PolicyStructure::from_world(data.world);
        TrainContext ctx;
        ctx.world = &data.world;
        ctx.train = data.train;
        ctx.probe = data.probe;
        ctx.reward = make_reward_fn(data.world.taxonomy, emb, RewardParams{});
        ctx.jobs = jobs();
        GrpoConfig g;
        g.seed = seed;
        g.learning_rate = 1.0;
        g.kl_beta = 0.01;
        auto trace = [](const CurriculumResult& r) {
            std::vector<double> e;
            for (const auto& row : r.rows) e.push_back(row.entropy.total);
            return e;
        };
        const HierarchicalPolicy flat(structure, PolicyMode::Flat, SamplingConfig{});
        const auto fe = trace(run_curriculum(CurriculumPlan::full_path_only(g, 1200), flat, ctx));
        const HierarchicalPolicy hier(structure, PolicyMode::Hierarchical, SamplingConfig{});
        const auto he = trace(run_curriculum(CurriculumPlan::standard(g, 400, 400, 400), hier, ctx));
        flat_collapsed += collapse_monitor(fe, floor, 50).collapsed;
        hier_collapsed += collapse_monitor(he, floor, 50).collapsed;
        mins += (mins.empty() ? "" : ",") + fmt(*std::min_element(fe.begin(), fe.end()), 3);
    }
    return {flat_collapsed >= 4 && hier_collapsed <= 1,
            "flat_collapsed=" + std::to_string(flat_collapsed) + "/5 hierarchical_collapsed=" +
                std::to_string(hier_collapsed) + "/5 floor=" + fmt(floor, 3) + " flat_min_entropy=[" + mins + "]"};
}

// 10. Law of total variance.
Outcome total_variance() {
    const std::vector<VarianceSample> hand = {
        {0, 0, 0, 0, 0.0}, {0, 0, 0, 0, 2.0}, {0, 1, 0, 0, 10.0}, {0, 1, 0, 0, 10.0}};
    const auto h = variance_decomposition(hand);
    const bool hand_ok = h.intra == 0.5 && h.inter == 20.25 && h.total == 20.75;
    std::mt19937_64 gen(10);
    std::normal_distribution<double> nd(0.0, 5.0);
    double worst = 0.0;
    for (int k = 0; k < 1000; ++k) {
        std::vector<VarianceSample> s(2 + gen() % 200);
        for (auto& x : s)
            x = {static_cast<int>(gen() % 10), static_cast<int>(gen() % 4), static_cast<int>(gen() % 3),
                 static_cast<std::int64_t>(gen() % 3), nd(gen)};
        const auto v = variance_decomposition(s);
        worst = std::max(worst, std::abs(v.intra + v.inter - v.total));
    }
    return {hand_ok && worst <= 1e-9, std::string("hand=") + (hand_ok ? "exact" : "FAILED") +
                                          " max_identity_err=" + fmt(worst, 15) + " over 1000 sets"};
}

// 11. Metrics against brute-force enumeration.
Outcome metrics_oracle() {
    std::mt19937_64 gen(11);
    int mismatches = 0, monotone = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int len = 1 + static_cast<int>(gen() % 30);
        RankedPrediction p;
        p.candidates.resize(len);
        std::iota(p.candidates.begin(), p.candidates.end(), 0);
        std::shuffle(p.candidates.begin(), p.candidates.end(), gen);
        p.truth = static_cast<int>(gen() % static_cast<std::uint64_t>(len + 5));
        int prev_hr = 0;
        double prev_nd = 0.0;
        for (int k = 1; k <= len + 2; ++k) {
            const int hr = hr_at_k(p, k);
            const double nd = ndcg_at_k(p, k);
            mismatches += hr != oracles::brute_hr(p.candidates, p.truth, k);
            mismatches += nd != oracles::brute_ndcg(p.candidates, p.truth, k);
            monotone += hr < prev_hr || nd < prev_nd;
            prev_hr = hr;
            prev_nd = nd;
        }
    }
    return {mismatches == 0 && monotone == 0,
            "mismatches=" + std::to_string(mismatches) + " monotonicity_violations=" + std::to_string(monotone)};
}

// 12. Protocol fuzzing and the three stub case transcripts.
Outcome protocol_robustness() {
    std::mt19937_64 gen(12);
    const std::string pieces[] = {"<intent>",   "</intent>", "<category>", "</category>", "<behavior>",
                                  "</behavior>", "{",        "}",          "\"",          "predicted_intent",
                                  ":",          "\\u",       "\xc3",       "\x00"};
    std::size_t structured = 0, parsed = 0, other = 0;
    const AgentStep steps[] = {AgentStep::Intent, AgentStep::Category, AgentStep::Behavior};
    for (int k = 0; k < 100000; ++k) {
        const AgentStep step = steps[(k / 3) % 3];
        std::string s;
        if (k % 3 == 2) {
            // A valid block with a few random byte edits.
            const std::string tag(to_string(step));
            s = "note <" + tag + ">{\"" + predicted_key(step) + "\": \"X\", \"reasoning_summary\": \"y\"}</" +
                tag + ">";
            const int edits = static_cast<int>(gen() % 3);
            for (int e = 0; e < edits; ++e) s[gen() % s.size()] = static_cast<char>(gen() & 0xff);
        } else {
            const int len = static_cast<int>(gen() % 96);
            for (int i = 0; i < len; ++i) {
                if (k % 2 && gen() % 3 == 0)
                    s += pieces[gen() % std::size(pieces)];
                else
                    s += static_cast<char>(gen() & 0xff);
            }
        }
        try {
            const auto r = parse_step_output(step, s);
            if (std::holds_alternative<StepOutput>(r))
                ++parsed;
            else if (!std::get<ProtocolError>(r).message.empty())
                ++structured;
            else
                ++other;
        } catch (...) {
            ++other;
        }
    }
    const Taxonomy tax = load_taxonomy(fixture("cases/taxonomy.json"));
    const HashEmbedder emb(256, 11);
    int cases_ok = 0;
    for (const char* file : {"cases/case1.json", "cases/case2.json", "cases/case3.json"}) {
        const auto fx = load_case_fixture(fixture(file), tax);
        StubBackend stub(fx.responses);
        const auto res = run_pipeline(stub, emb, tax, fx.user, fx.context, SamplingConfig{});
        cases_ok += tax.needs()[res.decision.need_id].label == fx.expected.need &&
                    tax.categories()[res.decision.category_id].label == fx.expected.category;
    }
    return {other == 0 && cases_ok == 3, "fuzz: parsed=" + std::to_string(parsed) + " structured_errors=" +
                                             std::to_string(structured) + " crashes_or_unstructured=" +
                                             std::to_string(other) + "; cases=" + std::to_string(cases_ok) + "/3"};
}

}  // namespace

int main() {
    const std::vector<Criterion> criteria = {
        {1, "dataset statistics oracle", 1.0, dataset_statistics},
        {2, "typicality score suite", 1.0, typicality_suite},
        {3, "curation contract", 10.0, curation_contract},
        {4, "length reward suite", 0.0, length_reward_suite},
        {5, "category reward", 0.0, category_reward_suite},
        {6, "gradient check", 5.0, gradient_check},
        {7, "GRPO bandit", 10.0, grpo_bandit},
        {8, "curriculum transfer", 600.0, curriculum_transfer},
        {9, "entropy collapse", 600.0, collapse_experiment},
        {10, "law of total variance", 0.0, total_variance},
        {11, "metrics oracle", 0.0, metrics_oracle},
        {12, "protocol robustness", 0.0, protocol_robustness},
    };
    int failed = 0;
    for (const auto& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool in_time = c.time_limit_s <= 0.0 || dt < c.time_limit_s;
        const bool pass = o.pass && in_time;
        failed += !pass;
        std::cout << (pass ? "PASS" : "FAIL") << " criterion " << std::setw(2) << c.id << " " << c.name << " ["
                  << fmt(dt, 2) << "s" << (c.time_limit_s > 0 ? " < " + fmt(c.time_limit_s, 0) + "s" : "")
                  << (in_time ? "" : " TIME LIMIT EXCEEDED") << "] " << o.detail << std::endl;
    }
    std::cout << (failed == 0 ? "ALL PASS" : std::to_string(failed) + " FAILED") << std::endl;
    return failed == 0 ? 0 : 1;
}
