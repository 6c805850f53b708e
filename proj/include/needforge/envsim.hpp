#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "needforge/domain.hpp"
#include "needforge/random.hpp"

namespace needforge {

/// Row-major probability table: rows() conditional distributions over cols() outcomes.
struct ProbTable {
    int rows = 0;
    int cols = 0;
    std::vector<double> p;

    double at(int r, int c) const { return p[static_cast<std::size_t>(r) * cols + c]; }
    double& at(int r, int c) { return p[static_cast<std::size_t>(r) * cols + c]; }
    std::span<const double> row(int r) const {
        return {p.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
    }
    friend bool operator==(const ProbTable&, const ProbTable&) = default;
};

struct WorldSpec {
    int n_needs = 8;
    int n_categories = 20;
    int n_behaviors = 100;
    int n_archetypes = 6;
    /// Fraction of interactions whose whole path is redrawn uniformly.
    double noise_rate = 0.1;
    std::uint64_t seed = 7;

    // Logit scales used when tables are generated from the seed.
    double need_sharpness = 1.5;
    double category_sharpness = 3.0;
    double behavior_sharpness = 1.0;

    /// When set, P(category | need) is zero outside each need's home categories and the
    /// policy's category stage masks unreachable categories.
    bool support_masks = false;

    // Optional explicit tables. need_table rows: 1 (broadcast), 24 (per hour) or
    // n_archetypes*24*5 (archetype, hour, zone). category_table: n_needs rows.
    // behavior_table: n_categories rows over all behaviors.
    std::vector<std::vector<double>> need_table;
    std::vector<std::vector<double>> category_table;
    std::vector<std::vector<double>> behavior_table;
};

struct Archetype {
    std::string name;
    UserProfile profile;
    friend bool operator==(const Archetype&, const Archetype&) = default;
};

/// A fully materialized synthetic world.
struct World {
    Taxonomy taxonomy;
    WorldSpec spec;
    std::vector<Archetype> archetypes;
    ProbTable need_given_context;   // rows: (archetype * 24 + hour) * 5 + zone
    ProbTable category_given_need;  // rows: need
    ProbTable behavior_given_category;  // rows: category

    int need_row(int archetype, int hour, LocationType zone) const {
        return (archetype * kNumTimeBuckets + hour) * kNumLocationTypes + static_cast<int>(zone);
    }
    /// Index of the archetype named by the profile's "archetype" attribute, or -1.
    int archetype_of(const UserProfile& profile) const;
    int archetype_index(const std::string& name) const;
    /// Whether `category` is reachable from `need` (only meaningful with support masks).
    bool category_supported(int need, int category) const {
        return category_given_need.at(need, category) > 0.0;
    }
};

/// Generates taxonomy labels, archetypes and (absent explicit ones) conditional tables.
/// Throws DataError on inconsistent table shapes or rows that do not sum to one.
World generate_world(const WorldSpec& spec);

/// Draws one interaction for the given archetype and context, honoring noise_rate.
Interaction sample_interaction(const World& world, int archetype,
                               const SpatioTemporalContext& context, Rng& rng);

/// Draws a uniform context (hour and zone) around `day_start`.
SpatioTemporalContext sample_context(std::int64_t day_start, Rng& rng);

/// Users are generated independently from per-user derived seeds.
std::vector<UserRecord> generate_users(const World& world, int n_users, int min_len, int max_len,
                                       std::uint64_t seed, int jobs = 1);

struct OracleResult {
    std::vector<double> need;                  // P(need | archetype, context)
    std::vector<std::vector<double>> category;  // P(category | need) for every need
    std::vector<std::vector<double>> behavior;  // P(behavior | category) for every category
    std::vector<double> category_marginal;
    std::vector<double> behavior_marginal;
    HierarchicalDecision argmax_path;
};

OracleResult oracle(const World& world, int archetype, const SpatioTemporalContext& context);
/// Looks the archetype up by name; throws DataError when unknown.
OracleResult oracle(const World& world, const std::string& archetype,
                    const SpatioTemporalContext& context);

nlohmann::json world_spec_to_json(const WorldSpec& spec);
WorldSpec world_spec_from_json(const nlohmann::json& j);
nlohmann::json world_to_json(const World& world);
World world_from_json(const nlohmann::json& j);
World load_world(const std::string& path);

}  // namespace needforge
