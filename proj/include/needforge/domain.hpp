#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

namespace needforge {

/// Raised when input data cannot be turned into domain values.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class SemanticDomain {
    FoodBeverage,
    Accommodation,
    EntertainmentLeisure,
    LifestyleServices,
    GroceryFreshProduce,
};

inline constexpr std::array<SemanticDomain, 5> kAllDomains = {
    SemanticDomain::FoodBeverage,         SemanticDomain::Accommodation,
    SemanticDomain::EntertainmentLeisure, SemanticDomain::LifestyleServices,
    SemanticDomain::GroceryFreshProduce,
};

std::string_view to_string(SemanticDomain d);
SemanticDomain parse_domain(std::string_view label);

enum class LocationType { Home, Workplace, Commercial, Scenic, Transit };

inline constexpr int kNumLocationTypes = 5;
inline constexpr int kNumTimeBuckets = 24;

std::string_view to_string(LocationType t);
LocationType parse_location_type(std::string_view label);

struct LivingNeed {
    int id = 0;
    std::string label;
    friend bool operator==(const LivingNeed&, const LivingNeed&) = default;
};

struct SemanticCategory {
    int id = 0;
    std::string label;
    SemanticDomain domain = SemanticDomain::FoodBeverage;
    friend bool operator==(const SemanticCategory&, const SemanticCategory&) = default;
};

struct Behavior {
    int id = 0;
    std::string label;
    int category_id = 0;
    friend bool operator==(const Behavior&, const Behavior&) = default;
};

/// The decision space. Ids are dense indices into the three vectors.
class Taxonomy {
public:
    Taxonomy() = default;
    /// Validates density, B->C resolution and that every category owns a behavior.
    Taxonomy(std::vector<LivingNeed> needs, std::vector<SemanticCategory> categories,
             std::vector<Behavior> behaviors);

    const std::vector<LivingNeed>& needs() const { return needs_; }
    const std::vector<SemanticCategory>& categories() const { return categories_; }
    const std::vector<Behavior>& behaviors() const { return behaviors_; }

    int num_needs() const { return static_cast<int>(needs_.size()); }
    int num_categories() const { return static_cast<int>(categories_.size()); }
    int num_behaviors() const { return static_cast<int>(behaviors_.size()); }

    int category_of(int behavior_id) const { return behaviors_.at(behavior_id).category_id; }
    const std::vector<int>& behaviors_in(int category_id) const {
        return behaviors_by_category_.at(category_id);
    }

    std::optional<int> find_need(std::string_view label) const;
    std::optional<int> find_category(std::string_view label) const;
    std::optional<int> find_behavior(std::string_view label) const;

    friend bool operator==(const Taxonomy& a, const Taxonomy& b) {
        return a.needs_ == b.needs_ && a.categories_ == b.categories_ &&
               a.behaviors_ == b.behaviors_;
    }

private:
    std::vector<LivingNeed> needs_;
    std::vector<SemanticCategory> categories_;
    std::vector<Behavior> behaviors_;
    std::vector<std::vector<int>> behaviors_by_category_;
};

/// Derives the hour-of-day bucket in UTC shifted by `tz_offset_s`.
int hour_bucket(std::int64_t timestamp, std::int64_t tz_offset_s = 0);

struct SpatioTemporalContext {
    std::int64_t timestamp = 0;
    int time_bucket = 0;
    double latitude = 0.0;
    double longitude = 0.0;
    LocationType location_type = LocationType::Home;

    /// Builds a context and derives time_bucket; throws DataError on bad coordinates.
    static SpatioTemporalContext make(std::int64_t timestamp, double lat, double lon,
                                      LocationType zone, std::int64_t tz_offset_s = 0);

    friend bool operator==(const SpatioTemporalContext&, const SpatioTemporalContext&) = default;
};

struct Interaction {
    int need_id = 0;
    int category_id = 0;
    int behavior_id = 0;
    SpatioTemporalContext context;
    friend bool operator==(const Interaction&, const Interaction&) = default;
};

/// Ordered attribute list; keys are unique.
class UserProfile {
public:
    UserProfile() = default;
    explicit UserProfile(std::vector<std::pair<std::string, std::string>> attributes);

    const std::vector<std::pair<std::string, std::string>>& attributes() const { return attrs_; }
    std::optional<std::string> get(std::string_view key) const;
    void set(std::string key, std::string value);

    friend bool operator==(const UserProfile&, const UserProfile&) = default;

private:
    std::vector<std::pair<std::string, std::string>> attrs_;
};

struct UserRecord {
    std::string user_id;
    UserProfile profile;
    std::vector<Interaction> history;
    std::int64_t tz_offset_s = 0;
    friend bool operator==(const UserRecord&, const UserRecord&) = default;
};

struct HierarchicalDecision {
    /// kUnspecified when the producing policy does not model the stage.
    static constexpr int kUnspecified = -1;

    int need_id = kUnspecified;
    int category_id = kUnspecified;
    int behavior_id = kUnspecified;
    std::vector<std::string> reasoning;
    friend bool operator==(const HierarchicalDecision&, const HierarchicalDecision&) = default;
};

struct DatasetStats {
    std::int64_t n_users = 0;
    std::int64_t n_categories = 0;
    std::int64_t n_interactions = 0;
    double avg_seq_len = 0.0;
    double sparsity = 0.0;
};

enum class ViolationKind {
    DanglingNeed,
    DanglingCategory,
    DanglingBehavior,
    PathInconsistency,
    TimeDisorder,
};

std::string_view to_string(ViolationKind k);

struct Violation {
    ViolationKind kind;
    std::size_t interaction_index;
    std::string message;
};

struct ValidationResult {
    std::vector<Violation> violations;
    bool ok() const { return violations.empty(); }
};

ValidationResult validate_record(const UserRecord& record, const Taxonomy& taxonomy);

DatasetStats dataset_stats(const std::vector<UserRecord>& records, const Taxonomy& taxonomy);
DatasetStats dataset_stats_from_counts(std::int64_t n_users, std::int64_t n_categories,
                                       std::int64_t n_interactions);

// ---- serialization -------------------------------------------------------

nlohmann::json taxonomy_to_json(const Taxonomy& taxonomy);
Taxonomy taxonomy_from_json(const nlohmann::json& j);

/// Label-based wire form of a record (one JSONL line).
nlohmann::ordered_json record_to_json(const UserRecord& record, const Taxonomy& taxonomy);
/// Resolves labels against `taxonomy`; unknown labels and path inconsistencies throw DataError.
UserRecord record_from_json(const nlohmann::ordered_json& j, const Taxonomy& taxonomy);

nlohmann::json stats_to_json(const DatasetStats& stats);

/// Reads a taxonomy file, or the "taxonomy" member of a world file.
Taxonomy load_taxonomy(const std::string& path);
std::vector<UserRecord> load_records(const std::string& path, const Taxonomy& taxonomy);
void save_records(const std::string& path, const std::vector<UserRecord>& records,
                  const Taxonomy& taxonomy);

nlohmann::json read_json_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace needforge
