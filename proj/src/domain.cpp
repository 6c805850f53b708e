#include "needforge/domain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace needforge {

namespace {

constexpr std::array<std::string_view, 5> kDomainLabels = {
    "Food & Beverage", "Accommodation", "Entertainment & Leisure", "Lifestyle Services",
    "Grocery & Fresh Produce"};

constexpr std::array<std::string_view, 5> kZoneLabels = {"home", "workplace", "commercial",
                                                         "scenic", "transit"};

template <typename T>
std::optional<int> find_label(const std::vector<T>& items, std::string_view label) {
    for (const auto& item : items) {
        if (item.label == label) return item.id;
    }
    return std::nullopt;
}

}  // namespace

std::string_view to_string(SemanticDomain d) { return kDomainLabels.at(static_cast<int>(d)); }

SemanticDomain parse_domain(std::string_view label) {
    for (std::size_t i = 0; i < kDomainLabels.size(); ++i) {
        if (kDomainLabels[i] == label) return static_cast<SemanticDomain>(i);
    }
    throw DataError("unknown semantic domain: " + std::string(label));
}

std::string_view to_string(LocationType t) { return kZoneLabels.at(static_cast<int>(t)); }

LocationType parse_location_type(std::string_view label) {
    for (std::size_t i = 0; i < kZoneLabels.size(); ++i) {
        if (kZoneLabels[i] == label) return static_cast<LocationType>(i);
    }
    throw DataError("unknown location type: " + std::string(label));
}

std::string_view to_string(ViolationKind k) {
    switch (k) {
        case ViolationKind::DanglingNeed: return "dangling need";
        case ViolationKind::DanglingCategory: return "dangling category";
        case ViolationKind::DanglingBehavior: return "dangling behavior";
        case ViolationKind::PathInconsistency: return "path inconsistency";
        case ViolationKind::TimeDisorder: return "time disorder";
    }
    return "unknown";
}

Taxonomy::Taxonomy(std::vector<LivingNeed> needs, std::vector<SemanticCategory> categories,
                   std::vector<Behavior> behaviors)
    : needs_(std::move(needs)), categories_(std::move(categories)), behaviors_(std::move(behaviors)) {
    for (std::size_t i = 0; i < needs_.size(); ++i) {
        if (needs_[i].id != static_cast<int>(i)) throw DataError("need ids must be dense 0..n-1");
        if (needs_[i].label.empty()) throw DataError("need label must be non-empty");
    }
    for (std::size_t i = 0; i < categories_.size(); ++i) {
        if (categories_[i].id != static_cast<int>(i))
            throw DataError("category ids must be dense 0..n-1");
    }
    behaviors_by_category_.assign(categories_.size(), {});
    for (std::size_t i = 0; i < behaviors_.size(); ++i) {
        const auto& b = behaviors_[i];
        if (b.id != static_cast<int>(i)) throw DataError("behavior ids must be dense 0..n-1");
        if (b.category_id < 0 || b.category_id >= num_categories())
            throw DataError("behavior '" + b.label + "' maps to a missing category");
        behaviors_by_category_[b.category_id].push_back(b.id);
    }
    for (std::size_t c = 0; c < categories_.size(); ++c) {
        if (behaviors_by_category_[c].empty())
            throw DataError("category '" + categories_[c].label + "' has no behavior");
    }
}

std::optional<int> Taxonomy::find_need(std::string_view label) const {
    return find_label(needs_, label);
}
std::optional<int> Taxonomy::find_category(std::string_view label) const {
    return find_label(categories_, label);
}
std::optional<int> Taxonomy::find_behavior(std::string_view label) const {
    return find_label(behaviors_, label);
}

int hour_bucket(std::int64_t timestamp, std::int64_t tz_offset_s) {
    constexpr std::int64_t kDay = 86400;
    std::int64_t local = (timestamp + tz_offset_s) % kDay;
    if (local < 0) local += kDay;
    return static_cast<int>(local / 3600);
}

SpatioTemporalContext SpatioTemporalContext::make(std::int64_t timestamp, double lat, double lon,
                                                  LocationType zone, std::int64_t tz_offset_s) {
    if (!(lat >= -90.0 && lat <= 90.0)) throw DataError("latitude out of range");
    if (!(lon >= -180.0 && lon <= 180.0)) throw DataError("longitude out of range");
    return {timestamp, hour_bucket(timestamp, tz_offset_s), lat, lon, zone};
}

UserProfile::UserProfile(std::vector<std::pair<std::string, std::string>> attributes) {
    for (auto& [k, v] : attributes) {
        if (get(k)) throw DataError("duplicate profile key: " + k);
        attrs_.emplace_back(std::move(k), std::move(v));
    }
}

std::optional<std::string> UserProfile::get(std::string_view key) const {
    for (const auto& [k, v] : attrs_) {
        if (k == key) return v;
    }
    return std::nullopt;
}

void UserProfile::set(std::string key, std::string value) {
    for (auto& [k, v] : attrs_) {
        if (k == key) {
            v = std::move(value);
            return;
        }
    }
    attrs_.emplace_back(std::move(key), std::move(value));
}

ValidationResult validate_record(const UserRecord& record, const Taxonomy& taxonomy) {
    ValidationResult result;
    auto add = [&](ViolationKind kind, std::size_t idx) {
        result.violations.push_back(
            {kind, idx, std::string(to_string(kind)) + " at interaction " + std::to_string(idx)});
    };
    for (std::size_t k = 0; k < record.history.size(); ++k) {
        const auto& it = record.history[k];
        if (it.need_id < 0 || it.need_id >= taxonomy.num_needs()) add(ViolationKind::DanglingNeed, k);
        const bool cat_ok = it.category_id >= 0 && it.category_id < taxonomy.num_categories();
        const bool beh_ok = it.behavior_id >= 0 && it.behavior_id < taxonomy.num_behaviors();
        if (!cat_ok) add(ViolationKind::DanglingCategory, k);
        if (!beh_ok) add(ViolationKind::DanglingBehavior, k);
        if (cat_ok && beh_ok && taxonomy.category_of(it.behavior_id) != it.category_id)
            add(ViolationKind::PathInconsistency, k);
        if (k > 0 && it.context.timestamp < record.history[k - 1].context.timestamp)
            add(ViolationKind::TimeDisorder, k);
    }
    return result;
}

DatasetStats dataset_stats_from_counts(std::int64_t n_users, std::int64_t n_categories,
                                       std::int64_t n_interactions) {
    if (n_users < 1) throw DataError("empty dataset");
    if (n_categories < 1) throw DataError("taxonomy has no categories");
    DatasetStats s;
    s.n_users = n_users;
    s.n_categories = n_categories;
    s.n_interactions = n_interactions;
    s.avg_seq_len = static_cast<double>(n_interactions) / static_cast<double>(n_users);
    s.sparsity = 1.0 - static_cast<double>(n_interactions) /
                           (static_cast<double>(n_users) * static_cast<double>(n_categories));
    return s;
}

DatasetStats dataset_stats(const std::vector<UserRecord>& records, const Taxonomy& taxonomy) {
    std::int64_t n = 0;
    for (const auto& r : records) n += static_cast<std::int64_t>(r.history.size());
    return dataset_stats_from_counts(static_cast<std::int64_t>(records.size()),
                                     taxonomy.num_categories(), n);
}

// ---- serialization -------------------------------------------------------

nlohmann::json taxonomy_to_json(const Taxonomy& taxonomy) {
    nlohmann::json j;
    j["needs"] = nlohmann::json::array();
    for (const auto& n : taxonomy.needs()) j["needs"].push_back(n.label);
    j["categories"] = nlohmann::json::array();
    for (const auto& c : taxonomy.categories())
        j["categories"].push_back({{"label", c.label}, {"domain", to_string(c.domain)}});
    j["behaviors"] = nlohmann::json::array();
    for (const auto& b : taxonomy.behaviors())
        j["behaviors"].push_back(
            {{"label", b.label}, {"category", taxonomy.categories()[b.category_id].label}});
    return j;
}

Taxonomy taxonomy_from_json(const nlohmann::json& j) {
    try {
        std::vector<LivingNeed> needs;
        for (const auto& n : j.at("needs"))
            needs.push_back({static_cast<int>(needs.size()), n.get<std::string>()});
        std::vector<SemanticCategory> cats;
        for (const auto& c : j.at("categories")) {
            cats.push_back({static_cast<int>(cats.size()), c.at("label").get<std::string>(),
                            parse_domain(c.at("domain").get<std::string>())});
        }
        std::vector<Behavior> behs;
        for (const auto& b : j.at("behaviors")) {
            const auto cat_label = b.at("category").get<std::string>();
            auto it = std::find_if(cats.begin(), cats.end(),
                                   [&](const auto& c) { return c.label == cat_label; });
            if (it == cats.end()) throw DataError("behavior references unknown category: " + cat_label);
            behs.push_back({static_cast<int>(behs.size()), b.at("label").get<std::string>(), it->id});
        }
        return Taxonomy(std::move(needs), std::move(cats), std::move(behs));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed taxonomy: ") + e.what());
    }
}

nlohmann::ordered_json record_to_json(const UserRecord& record, const Taxonomy& taxonomy) {
    nlohmann::ordered_json j;
    j["user_id"] = record.user_id;
    j["profile"] = nlohmann::ordered_json::object();
    for (const auto& [k, v] : record.profile.attributes()) j["profile"][k] = v;
    if (record.tz_offset_s != 0) j["tz_offset"] = record.tz_offset_s;
    j["history"] = nlohmann::ordered_json::array();
    for (const auto& it : record.history) {
        nlohmann::ordered_json h;
        h["need"] = taxonomy.needs().at(it.need_id).label;
        h["category"] = taxonomy.categories().at(it.category_id).label;
        h["behavior"] = taxonomy.behaviors().at(it.behavior_id).label;
        h["ts"] = it.context.timestamp;
        h["lat"] = it.context.latitude;
        h["lon"] = it.context.longitude;
        h["loc_type"] = to_string(it.context.location_type);
        j["history"].push_back(std::move(h));
    }
    return j;
}

UserRecord record_from_json(const nlohmann::ordered_json& j, const Taxonomy& taxonomy) {
    try {
        UserRecord r;
        r.user_id = j.at("user_id").get<std::string>();
        r.tz_offset_s = j.value("tz_offset", std::int64_t{0});
        std::vector<std::pair<std::string, std::string>> attrs;
        for (const auto& [k, v] : j.at("profile").items()) attrs.emplace_back(k, v.get<std::string>());
        r.profile = UserProfile(std::move(attrs));
        for (const auto& h : j.at("history")) {
            const auto need = h.at("need").get<std::string>();
            const auto cat = h.at("category").get<std::string>();
            const auto beh = h.at("behavior").get<std::string>();
            auto n = taxonomy.find_need(need);
            auto c = taxonomy.find_category(cat);
            auto b = taxonomy.find_behavior(beh);
            if (!n) throw DataError("dangling need: " + need);
            if (!c) throw DataError("dangling category: " + cat);
            if (!b) throw DataError("dangling behavior: " + beh);
            if (taxonomy.category_of(*b) != *c)
                throw DataError("path inconsistency: behavior '" + beh + "' is not in '" + cat + "'");
            Interaction it;
            it.need_id = *n;
            it.category_id = *c;
            it.behavior_id = *b;
            it.context = SpatioTemporalContext::make(
                h.at("ts").get<std::int64_t>(), h.at("lat").get<double>(), h.at("lon").get<double>(),
                parse_location_type(h.at("loc_type").get<std::string>()), r.tz_offset_s);
            r.history.push_back(it);
        }
        auto v = validate_record(r, taxonomy);
        if (!v.ok()) throw DataError("record " + r.user_id + ": " + v.violations.front().message);
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed record: ") + e.what());
    }
}

nlohmann::json stats_to_json(const DatasetStats& s) {
    return {{"n_users", s.n_users},
            {"n_categories", s.n_categories},
            {"n_interactions", s.n_interactions},
            {"avg_seq_len", s.avg_seq_len},
            {"sparsity", s.sparsity}};
}

nlohmann::json read_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("file not found: " + path);
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("invalid JSON in " + path + ": " + e.what());
    }
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write: " + path);
    out << text;
}

Taxonomy load_taxonomy(const std::string& path) {
    auto j = read_json_file(path);
    if (j.contains("taxonomy")) return taxonomy_from_json(j.at("taxonomy"));
    return taxonomy_from_json(j);
}

std::vector<UserRecord> load_records(const std::string& path, const Taxonomy& taxonomy) {
    std::ifstream in(path);
    if (!in) throw DataError("file not found: " + path);
    std::vector<UserRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::ordered_json j;
        try {
            j = nlohmann::ordered_json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw DataError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        out.push_back(record_from_json(j, taxonomy));
    }
    return out;
}

void save_records(const std::string& path, const std::vector<UserRecord>& records,
                  const Taxonomy& taxonomy) {
    std::ostringstream os;
    for (const auto& r : records) os << record_to_json(r, taxonomy).dump() << '\n';
    write_text_file(path, os.str());
}

}  // namespace needforge
