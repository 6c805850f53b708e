#include "needforge/curation.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "needforge/random.hpp"

namespace needforge {

namespace {

constexpr double kSigmaGuard = 1e-12;

double sq_dist(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

int nearest(const std::vector<FeatureVector>& centroids, std::span<const double> x) {
    int best = 0;
    double best_d = sq_dist(centroids[0], x);
    for (int c = 1; c < static_cast<int>(centroids.size()); ++c) {
        const double d = sq_dist(centroids[c], x);
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

double inertia(const std::vector<FeatureVector>& centroids, std::span<const FeatureVector> xs) {
    double s = 0.0;
    for (const auto& x : xs) s += sq_dist(centroids[nearest(centroids, x)], x);
    return s;
}

std::size_t count_distinct(std::span<const FeatureVector> xs) {
    std::vector<FeatureVector> sorted(xs.begin(), xs.end());
    std::sort(sorted.begin(), sorted.end());
    return static_cast<std::size_t>(std::unique(sorted.begin(), sorted.end()) - sorted.begin());
}

std::vector<FeatureVector> kmeanspp_init(std::span<const FeatureVector> xs, int k, Rng& rng) {
    std::vector<FeatureVector> centers;
    centers.push_back(xs[rng.below(xs.size())]);
    std::vector<double> d2(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) d2[i] = sq_dist(xs[i], centers[0]);
    while (static_cast<int>(centers.size()) < k) {
        const int pick = rng.categorical(d2);
        centers.push_back(xs[pick]);
        for (std::size_t i = 0; i < xs.size(); ++i) d2[i] = std::min(d2[i], sq_dist(xs[i], centers.back()));
    }
    return centers;
}

}  // namespace

void CurationConfig::validate() const {
    if (k < 1) throw DataError("curation: k must be >= 1");
    if (batch_size < 1 || max_epochs < 0) throw DataError("curation: batch_size/max_epochs invalid");
    if (!(z_threshold > 0) || tau_min <= 0 || tau_size <= 0 || !(tau_quality > 0))
        throw DataError("curation: thresholds must be > 0");
    if (!(r_base > 0 && r_base <= r_high && r_high <= 1.0))
        throw DataError("curation: need 0 < r_base <= r_high <= 1");
}

std::string_view to_string(Verdict v) {
    switch (v) {
        case Verdict::Discard: return "discard";
        case Verdict::Keep: return "keep";
        case Verdict::Boost: return "boost";
    }
    return "unknown";
}

FeatureVector featurize(const UserRecord& record, const Taxonomy& taxonomy) {
    const int C = taxonomy.num_categories();
    FeatureVector x(static_cast<std::size_t>(C + kNumTimeBuckets + kNumLocationTypes), 0.0);
    if (record.history.empty()) return x;
    const double w = 1.0 / static_cast<double>(record.history.size());
    for (const auto& it : record.history) {
        x[it.category_id] += w;
        x[C + it.context.time_bucket] += w;
        x[C + kNumTimeBuckets + static_cast<int>(it.context.location_type)] += w;
    }
    return x;
}

ClusterModel fit_clusters(std::span<const FeatureVector> features, const CurationConfig& cfg) {
    cfg.validate();
    if (features.empty()) throw DataError("fit_clusters: no features");
    const std::size_t dim = features[0].size();
    for (const auto& x : features) {
        if (x.size() != dim) throw DataError("fit_clusters: dimension mismatch");
        for (double v : x)
            if (!std::isfinite(v)) throw DataError("fit_clusters: non-finite feature");
    }
    if (static_cast<std::size_t>(cfg.k) > count_distinct(features)) throw DataError("over-partitioned");

    Rng rng(cfg.seed);
    ClusterModel m;
    m.k = cfg.k;
    m.centroids = kmeanspp_init(features, cfg.k, rng);
    double current = inertia(m.centroids, features);
    m.inertia_history.push_back(current);

    std::vector<std::size_t> order(features.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<double> counts(cfg.k, 0.0);
    std::vector<int> batch_assign;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        auto candidate = m.centroids;
        auto candidate_counts = counts;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            // Assign the whole batch against the batch-start centroids, then apply
            // per-center learning rates 1/count.
            batch_assign.clear();
            for (std::size_t p = start; p < end; ++p) batch_assign.push_back(nearest(candidate, features[order[p]]));
            for (std::size_t p = start; p < end; ++p) {
                const int c = batch_assign[p - start];
                candidate_counts[c] += 1.0;
                const double eta = 1.0 / candidate_counts[c];
                const auto& x = features[order[p]];
                for (std::size_t d = 0; d < dim; ++d) candidate[c][d] = (1.0 - eta) * candidate[c][d] + eta * x[d];
            }
        }
        const double next = inertia(candidate, features);
        if (next > current) break;  // keeps the inertia trajectory monotone
        const bool converged = current - next <= 1e-12 * std::max(1.0, current);
        m.centroids = std::move(candidate);
        counts = std::move(candidate_counts);
        current = next;
        m.inertia_history.push_back(current);
        if (converged) break;
    }

    m.assignments.resize(features.size());
    for (std::size_t u = 0; u < features.size(); ++u) m.assignments[u] = nearest(m.centroids, features[u]);
    refresh_sigmas(m, features);
    return m;
}

void refresh_sigmas(ClusterModel& model, std::span<const FeatureVector> features) {
    if (features.size() != model.assignments.size())
        throw DataError("refresh_sigmas: features do not match the assignments");
    std::vector<double> sq_sum(model.k, 0.0);
    std::vector<int> members(model.k, 0);
    for (std::size_t u = 0; u < features.size(); ++u) {
        const int c = model.assignments[u];
        sq_sum[c] += sq_dist(model.centroids[c], features[u]);
        ++members[c];
    }
    model.sigmas.assign(model.k, 0.0);
    for (int c = 0; c < model.k; ++c)
        if (members[c] > 0) model.sigmas[c] = std::sqrt(sq_sum[c] / members[c]);
}

int nearest_centroid(const ClusterModel& model, std::span<const double> x) {
    return nearest(model.centroids, x);
}

std::vector<double> typicality_scores(const ClusterModel& model, std::span<const FeatureVector> features) {
    if (features.size() != model.assignments.size())
        throw DataError("typicality_scores: features do not match the fitted assignments");
    std::vector<double> z(features.size());
    for (std::size_t u = 0; u < features.size(); ++u) {
        const int c = model.assignments[u];
        if (features[u].size() != model.centroids[c].size()) throw DataError("typicality_scores: dimension mismatch");
        const double sigma = model.sigmas[c];
        z[u] = sigma < kSigmaGuard ? 0.0 : std::sqrt(sq_dist(features[u], model.centroids[c])) / sigma;
    }
    return z;
}

std::vector<bool> flag_outliers(std::span<const double> scores, double z_threshold) {
    std::vector<bool> out(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) out[i] = scores[i] > z_threshold;
    return out;
}

int majority_need(const UserRecord& record, int n_needs) {
    if (record.history.empty()) return -1;
    std::vector<int> counts(n_needs, 0);
    for (const auto& it : record.history) ++counts[it.need_id];
    return static_cast<int>(std::max_element(counts.begin(), counts.end()) - counts.begin());
}

ClusterReport score_clusters(const ClusterModel& model, const std::vector<bool>& outliers,
                             const CurationConfig& cfg, std::span<const int> majority_needs) {
    if (outliers.size() != model.assignments.size())
        throw DataError("score_clusters: flags do not align with assignments");
    ClusterReport report;
    report.clusters.resize(model.k);
    std::vector<std::vector<int>> need_counts(model.k);
    for (std::size_t u = 0; u < outliers.size(); ++u) {
        auto& s = report.clusters[model.assignments[u]];
        ++s.size;
        if (!outliers[u]) ++s.inliers;
        if (!majority_needs.empty() && majority_needs[u] >= 0) {
            auto& counts = need_counts[model.assignments[u]];
            if (static_cast<int>(counts.size()) <= majority_needs[u]) counts.resize(majority_needs[u] + 1, 0);
            ++counts[majority_needs[u]];
        }
    }
    for (int c = 0; c < model.k; ++c) {
        auto& s = report.clusters[c];
        s.cohesion = s.size > 0 ? static_cast<double>(s.inliers) / s.size : 0.0;
        const auto& counts = need_counts[c];
        if (s.size > 0 && !counts.empty())
            s.dominance = static_cast<double>(*std::max_element(counts.begin(), counts.end())) / s.size;

        if (s.size < cfg.tau_min || (s.size < cfg.tau_size && s.cohesion < cfg.tau_quality) ||
            (cfg.min_dominance > 0.0 && s.dominance < cfg.min_dominance)) {
            s.verdict = Verdict::Discard;
            s.sample_rate = 0.0;
        } else if (s.size < cfg.tau_size) {
            s.verdict = Verdict::Boost;
            s.sample_rate = cfg.r_high;
        } else {
            s.verdict = Verdict::Keep;
            s.sample_rate = cfg.r_base;
        }
    }
    return report;
}

std::size_t sample_count(double rate, std::size_t n) {
    const double raw = rate * static_cast<double>(n);
    const double nearest_int = std::round(raw);
    if (std::abs(raw - nearest_int) < 1e-9) return static_cast<std::size_t>(nearest_int);
    return static_cast<std::size_t>(std::ceil(raw));
}

std::vector<std::size_t> adaptive_sample(const ClusterModel& model, const std::vector<bool>& outliers,
                                         const ClusterReport& report, std::uint64_t seed) {
    if (static_cast<int>(report.clusters.size()) != model.k)
        throw DataError("adaptive_sample: report does not cover all clusters");
    std::vector<std::vector<std::size_t>> inliers(model.k);
    for (std::size_t u = 0; u < model.assignments.size(); ++u)
        if (!outliers[u]) inliers[model.assignments[u]].push_back(u);

    std::vector<std::size_t> kept;
    for (int c = 0; c < model.k; ++c) {
        const auto& s = report.clusters[c];
        if (s.verdict == Verdict::Discard) continue;
        auto pool = inliers[c];
        const std::size_t take = std::min(pool.size(), sample_count(s.sample_rate, pool.size()));
        Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
        // Partial Fisher-Yates: the first `take` slots are a uniform draw without replacement.
        for (std::size_t i = 0; i < take; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
        kept.insert(kept.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(take));
    }
    std::sort(kept.begin(), kept.end());
    return kept;
}

CurationResult curate(const std::vector<UserRecord>& records, const Taxonomy& taxonomy,
                      const CurationConfig& cfg) {
    std::vector<FeatureVector> features;
    features.reserve(records.size());
    std::vector<int> majority;
    for (const auto& r : records) {
        features.push_back(featurize(r, taxonomy));
        majority.push_back(majority_need(r, taxonomy.num_needs()));
    }
    CurationResult out;
    out.model = fit_clusters(features, cfg);
    out.scores = typicality_scores(out.model, features);
    out.outliers = flag_outliers(out.scores, cfg.z_threshold);
    out.report = score_clusters(out.model, out.outliers, cfg, majority);
    out.kept = adaptive_sample(out.model, out.outliers, out.report, derive_seed(cfg.seed, 99));
    return out;
}

nlohmann::json report_to_json(const ClusterReport& report) {
    nlohmann::json clusters = nlohmann::json::array();
    for (std::size_t c = 0; c < report.clusters.size(); ++c) {
        const auto& s = report.clusters[c];
        clusters.push_back({{"cluster", c},
                            {"size", s.size},
                            {"inliers", s.inliers},
                            {"cohesion", s.cohesion},
                            {"dominance", s.dominance},
                            {"verdict", to_string(s.verdict)},
                            {"sample_rate", s.sample_rate}});
    }
    return {{"clusters", clusters}};
}

}  // namespace needforge
