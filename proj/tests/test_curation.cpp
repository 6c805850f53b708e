#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "needforge/curation.hpp"
#include "needforge/envsim.hpp"
#include "support.hpp"

using namespace needforge;

namespace {

// Plain Lloyd iterations from a given start; the reference for the mini-batch fit.
std::vector<FeatureVector> lloyd(const std::vector<FeatureVector>& xs, std::vector<FeatureVector> c) {
    for (int it = 0; it < 100; ++it) {
        std::vector<FeatureVector> sum(c.size(), FeatureVector(xs[0].size(), 0.0));
        std::vector<int> n(c.size(), 0);
        for (const auto& x : xs) {
            std::size_t best = 0;
            double bd = 1e300;
            for (std::size_t k = 0; k < c.size(); ++k) {
                double d = 0;
                for (std::size_t j = 0; j < x.size(); ++j) d += (x[j] - c[k][j]) * (x[j] - c[k][j]);
                if (d < bd) bd = d, best = k;
            }
            for (std::size_t j = 0; j < x.size(); ++j) sum[best][j] += x[j];
            ++n[best];
        }
        for (std::size_t k = 0; k < c.size(); ++k)
            if (n[k] > 0)
                for (std::size_t j = 0; j < c[k].size(); ++j) c[k][j] = sum[k][j] / n[k];
    }
    return c;
}

std::vector<FeatureVector> sorted(std::vector<FeatureVector> v) {
    std::sort(v.begin(), v.end());
    return v;
}

CurationConfig cfg_k(int k) {
    CurationConfig c;
    c.k = k;
    c.batch_size = 4;
    return c;
}

}  // namespace

TEST_CASE("featurize histograms") {
    const auto tax = testing::tiny_taxonomy();
    UserRecord one{"a", {}, {testing::interaction(0, 0, 0, 3600 * 5), testing::interaction(0, 0, 1, 3600 * 6)}};
    auto x = featurize(one, tax);
    REQUIRE(x.size() == 2u + 24 + 5);
    CHECK(x[0] == 1.0);
    CHECK(x[1] == 0.0);

    UserRecord split{"b", {}, {testing::interaction(0, 0, 0, 10), testing::interaction(1, 1, 2, 20)}};
    x = featurize(split, tax);
    CHECK(x[0] == 0.5);
    CHECK(x[1] == 0.5);

    x = featurize(UserRecord{"c", {}, {}}, tax);
    CHECK(std::all_of(x.begin(), x.end(), [](double v) { return v == 0.0; }));
}

TEST_CASE("two separated pairs match the Lloyd oracle") {
    const std::vector<FeatureVector> xs = {{0.0, 0.0}, {0.0, 1.0}, {10.0, 10.0}, {11.0, 10.0}};
    const auto m = fit_clusters(xs, cfg_k(2));
    const auto ref = lloyd(xs, {xs[0], xs[2]});
    const auto got = sorted(m.centroids);
    const auto want = sorted(ref);
    for (int k = 0; k < 2; ++k)
        for (int j = 0; j < 2; ++j) CHECK(std::abs(got[k][j] - want[k][j]) < 1e-9);
}

TEST_CASE("K=1 gives the global mean and K=N gives zero inertia") {
    std::mt19937_64 gen(3);
    std::uniform_real_distribution<double> u(-5, 5);
    std::vector<FeatureVector> xs(20, FeatureVector(3));
    for (auto& x : xs)
        for (auto& v : x) v = u(gen);
    auto m = fit_clusters(xs, cfg_k(1));
    for (int j = 0; j < 3; ++j) {
        double mean = 0;
        for (const auto& x : xs) mean += x[j];
        CHECK(std::abs(m.centroids[0][j] - mean / 20.0) < 1e-9);
    }
    m = fit_clusters(xs, cfg_k(20));
    CHECK(m.inertia_history.back() < 1e-18);
    CHECK(std::set<int>(m.assignments.begin(), m.assignments.end()).size() == 20u);
    CHECK_THROWS_WITH(fit_clusters(xs, cfg_k(21)), "over-partitioned");
}

TEST_CASE("inertia never increases across epochs") {
    const World w = generate_world(WorldSpec{});
    const auto users = generate_users(w, 300, 2, 20, 9);
    std::vector<FeatureVector> xs;
    for (const auto& u : users) xs.push_back(featurize(u, w.taxonomy));
    for (std::uint64_t seed : {1ULL, 2ULL, 3ULL}) {
        CurationConfig c;
        c.k = 6;
        c.batch_size = 32;
        c.seed = seed;
        const auto m = fit_clusters(xs, c);
        for (std::size_t e = 1; e < m.inertia_history.size(); ++e)
            CHECK(m.inertia_history[e] <= m.inertia_history[e - 1]);
    }
}

TEST_CASE("typicality scores") {
    SUBCASE("hand example {0,2}") {
        ClusterModel m{1, {{1.0}}, {}, {0, 0}, {}};
        const std::vector<FeatureVector> xs = {{0.0}, {2.0}};
        refresh_sigmas(m, xs);
        CHECK(m.sigmas[0] == doctest::Approx(1.0));
        const auto z = typicality_scores(m, xs);
        CHECK(std::abs(z[0] - 1.0) < 1e-12);
        CHECK(std::abs(z[1] - 1.0) < 1e-12);
    }
    SUBCASE("member at the centroid") {
        ClusterModel m{1, {{1.0, 1.0}}, {}, {0, 0, 0}, {}};
        const std::vector<FeatureVector> xs = {{1.0, 1.0}, {0.0, 1.0}, {2.0, 1.0}};
        refresh_sigmas(m, xs);
        CHECK(typicality_scores(m, xs)[0] == 0.0);
    }
    SUBCASE("identical members trigger the sigma guard") {
        ClusterModel m{1, {{4.0}}, {}, {0, 0, 0}, {}};
        const std::vector<FeatureVector> xs = {{4.0}, {4.0}, {4.0}};
        refresh_sigmas(m, xs);
        for (double z : typicality_scores(m, xs)) CHECK(z == 0.0);
    }
    SUBCASE("dimension mismatch") {
        ClusterModel m{1, {{0.0, 0.0}}, {1.0}, {0}, {}};
        const std::vector<FeatureVector> xs = {{0.0}};
        CHECK_THROWS_AS(typicality_scores(m, xs), DataError);
    }
}

TEST_CASE("typicality is invariant to scaling member offsets") {
    std::mt19937_64 gen(11);
    std::normal_distribution<double> nd;
    for (int trial = 0; trial < 50; ++trial) {
        const std::vector<FeatureVector> mu = {{1.0, -2.0, 0.5}, {-4.0, 3.0, 2.0}};
        std::vector<FeatureVector> xs;
        std::vector<int> asg;
        for (int u = 0; u < 30; ++u) {
            const int c = u % 2;
            FeatureVector x = mu[c];
            for (auto& v : x) v += nd(gen);
            xs.push_back(x);
            asg.push_back(c);
        }
        ClusterModel m{2, {}, {}, asg, {}};
        m.centroids.assign(2, FeatureVector(3, 0.0));
        std::vector<int> n(2, 0);
        for (std::size_t u = 0; u < xs.size(); ++u) {
            for (int j = 0; j < 3; ++j) m.centroids[asg[u]][j] += xs[u][j];
            ++n[asg[u]];
        }
        for (int c = 0; c < 2; ++c)
            for (auto& v : m.centroids[c]) v /= n[c];
        refresh_sigmas(m, xs);
        const auto z = typicality_scores(m, xs);

        const double lambda = 0.1 + 10.0 * std::uniform_real_distribution<double>(0, 1)(gen);
        auto scaled = xs;
        for (std::size_t u = 0; u < xs.size(); ++u)
            for (int j = 0; j < 3; ++j)
                scaled[u][j] = m.centroids[asg[u]][j] + lambda * (xs[u][j] - m.centroids[asg[u]][j]);
        ClusterModel ms = m;
        refresh_sigmas(ms, scaled);
        const auto zs = typicality_scores(ms, scaled);
        for (std::size_t u = 0; u < z.size(); ++u) CHECK(std::abs(z[u] - zs[u]) < 1e-9);
    }
}

TEST_CASE("outlier flags") {
    const std::vector<double> z = {0.1, 5.0};
    CHECK(flag_outliers(z, 3.0) == std::vector<bool>{false, true});
    const std::vector<double> low = {0.1, 2.9, 3.0};
    CHECK(flag_outliers(low, 3.0) == std::vector<bool>{false, false, false});
    CHECK(flag_outliers(std::vector<double>{}, 3.0).empty());
}

TEST_CASE("cluster verdicts") {
    CurationConfig cfg;  // tau_min 5, tau_size 20, tau_quality 0.9
    auto model_of = [](std::vector<int> sizes) {
        ClusterModel m;
        m.k = static_cast<int>(sizes.size());
        for (int c = 0; c < m.k; ++c) m.assignments.insert(m.assignments.end(), sizes[c], c);
        return m;
    };
    SUBCASE("cohesion ratio") {
        const auto m = model_of({10});
        std::vector<bool> out(10, false);
        out[0] = out[1] = true;
        const auto r = score_clusters(m, out, cfg);
        CHECK(r.clusters[0].cohesion == doctest::Approx(0.8));
        CHECK(r.clusters[0].verdict == Verdict::Discard);  // small and below quality
    }
    SUBCASE("below minimum support") {
        const auto m = model_of({3});
        const auto r = score_clusters(m, std::vector<bool>(3, false), cfg);
        CHECK(r.clusters[0].verdict == Verdict::Discard);
    }
    SUBCASE("small but clean is boosted") {
        const auto m = model_of({20, 8});
        std::vector<bool> out(28, false);
        const auto r = score_clusters(m, out, cfg);
        CHECK(r.clusters[1].verdict == Verdict::Boost);
        CHECK(r.clusters[1].sample_rate == cfg.r_high);
        CHECK(r.clusters[0].verdict == Verdict::Keep);
        CHECK(r.clusters[0].sample_rate == cfg.r_base);
    }
}

TEST_CASE("adaptive sampling") {
    CurationConfig cfg;
    SUBCASE("rate 0.5 over 100 inliers") {
        ClusterModel m;
        m.k = 1;
        m.assignments.assign(100, 0);
        ClusterReport r;
        r.clusters.push_back({100, 100, 1.0, 0.0, Verdict::Keep, 0.5});
        const auto kept = adaptive_sample(m, std::vector<bool>(100, false), r, 4);
        CHECK(kept.size() == 50u);
        CHECK(kept == adaptive_sample(m, std::vector<bool>(100, false), r, 4));
    }
    SUBCASE("all discarded") {
        ClusterModel m;
        m.k = 2;
        m.assignments = {0, 1, 1};
        ClusterReport r;
        r.clusters.resize(2);
        CHECK(adaptive_sample(m, std::vector<bool>(3, false), r, 1).empty());
    }
    SUBCASE("ceiling arithmetic") {
        CHECK(sample_count(0.3, 10) == 3u);
        CHECK(sample_count(0.3, 11) == 4u);
        CHECK(sample_count(1.0, 7) == 7u);
    }
}

TEST_CASE("curate excludes outliers and is deterministic") {
    WorldSpec spec;
    spec.noise_rate = 0.2;
    const World w = generate_world(spec);
    const auto users = generate_users(w, 400, 2, 20, 21);
    CurationConfig cfg;
    cfg.k = 12;
    cfg.z_threshold = 1.8;
    const auto a = curate(users, w.taxonomy, cfg);
    const auto b = curate(users, w.taxonomy, cfg);
    CHECK(a.kept == b.kept);
    std::size_t n_out = 0;
    for (std::size_t i : a.kept) CHECK_FALSE(a.outliers[i]);
    for (bool o : a.outliers) n_out += o;
    CHECK(n_out > 0);
}
