#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "needforge/domain.hpp"

namespace needforge {

using FeatureVector = std::vector<double>;

struct CurationConfig {
    int k = 8;
    int batch_size = 256;
    int max_epochs = 30;
    double z_threshold = 3.0;
    int tau_min = 5;
    int tau_size = 20;
    double tau_quality = 0.9;
    double r_base = 0.3;
    double r_high = 1.0;
    /// Clusters whose dominance falls below this are discarded; 0 disables the rule.
    double min_dominance = 0.0;
    std::uint64_t seed = 17;

    void validate() const;
};

struct ClusterModel {
    int k = 0;
    std::vector<FeatureVector> centroids;
    std::vector<double> sigmas;
    std::vector<int> assignments;
    /// Full-data inertia after initialization and after every accepted epoch.
    std::vector<double> inertia_history;
};

enum class Verdict { Discard, Keep, Boost };
std::string_view to_string(Verdict v);

struct ClusterScore {
    int size = 0;
    int inliers = 0;
    double cohesion = 0.0;
    double dominance = 0.0;
    Verdict verdict = Verdict::Discard;
    /// Sampling rate applied to inliers; 0 for discarded clusters.
    double sample_rate = 0.0;
};

struct ClusterReport {
    std::vector<ClusterScore> clusters;
};

/// Category histogram ++ hour-of-day histogram ++ location-type histogram, each
/// normalized by history length. Dimension |C| + 24 + 5.
FeatureVector featurize(const UserRecord& record, const Taxonomy& taxonomy);

/// Mini-batch k-means with k-means++ seeding. Each epoch visits every point once in
/// seeded-shuffled batches; an epoch that would raise full-data inertia is rejected
/// and ends the fit. Throws DataError("over-partitioned") when k exceeds distinct points.
ClusterModel fit_clusters(std::span<const FeatureVector> features, const CurationConfig& cfg);

/// Recomputes sigmas as the RMS member-to-centroid distance under the current assignments.
void refresh_sigmas(ClusterModel& model, std::span<const FeatureVector> features);

/// Nearest centroid, ties toward the lower index.
int nearest_centroid(const ClusterModel& model, std::span<const double> x);

/// ||x_u - mu_k|| / sigma_k per user; 0 where sigma_k < 1e-12.
std::vector<double> typicality_scores(const ClusterModel& model,
                                      std::span<const FeatureVector> features);

/// true marks an outlier (z > threshold).
std::vector<bool> flag_outliers(std::span<const double> scores, double z_threshold);

/// Most frequent need in the history (ties to lower id); -1 for empty histories.
int majority_need(const UserRecord& record, int n_needs);

ClusterReport score_clusters(const ClusterModel& model, const std::vector<bool>& outliers,
                             const CurationConfig& cfg, std::span<const int> majority_needs = {});

/// Indices (into records) kept in the curated dataset, ascending.
std::vector<std::size_t> adaptive_sample(const ClusterModel& model, const std::vector<bool>& outliers,
                                         const ClusterReport& report, std::uint64_t seed);

/// ceil(rate * n) robust to representation error in `rate`.
std::size_t sample_count(double rate, std::size_t n);

struct CurationResult {
    ClusterModel model;
    std::vector<double> scores;
    std::vector<bool> outliers;
    ClusterReport report;
    std::vector<std::size_t> kept;
};

/// Runs the whole pipeline over `records`.
CurationResult curate(const std::vector<UserRecord>& records, const Taxonomy& taxonomy,
                      const CurationConfig& cfg);

nlohmann::json report_to_json(const ClusterReport& report);

}  // namespace needforge
