#include "needforge/envsim.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string_view>
#include <thread>

namespace needforge {

namespace {

constexpr double kRowTolerance = 1e-9;
constexpr std::int64_t kEpochBase = 1'700'006'400;  // a UTC midnight
constexpr std::int64_t kDay = 86'400;

constexpr std::array<std::string_view, 8> kNeedCatalog = {
    "Family Care",     "Business Travel",  "Late-Night Snack", "Social Dining",
    "Leisure Outing",  "Personal Care",    "Daily Groceries",  "Weekend Getaway"};

struct CategorySeed {
    std::string_view label;
    SemanticDomain domain;
    int home_need;
};

constexpr std::array<CategorySeed, 20> kCategoryCatalog = {{
    {"Fruit", SemanticDomain::GroceryFreshProduce, 0},
    {"Family Restaurant", SemanticDomain::FoodBeverage, 0},
    {"Kids Playground", SemanticDomain::EntertainmentLeisure, 0},
    {"Economy Hotel", SemanticDomain::Accommodation, 1},
    {"Business Hotel", SemanticDomain::Accommodation, 1},
    {"Fast Food", SemanticDomain::FoodBeverage, 1},
    {"Bread & Cakes", SemanticDomain::FoodBeverage, 2},
    {"Night Market Snacks", SemanticDomain::FoodBeverage, 2},
    {"Hot Pot", SemanticDomain::FoodBeverage, 3},
    {"Sichuan Cuisine", SemanticDomain::FoodBeverage, 3},
    {"KTV", SemanticDomain::EntertainmentLeisure, 4},
    {"Cinema", SemanticDomain::EntertainmentLeisure, 4},
    {"Escape Room", SemanticDomain::EntertainmentLeisure, 4},
    {"Hair Salon", SemanticDomain::LifestyleServices, 5},
    {"Laundry", SemanticDomain::LifestyleServices, 5},
    {"Spa & Massage", SemanticDomain::LifestyleServices, 5},
    {"Fresh Vegetables", SemanticDomain::GroceryFreshProduce, 6},
    {"Supermarket Delivery", SemanticDomain::GroceryFreshProduce, 6},
    {"Luxury Hotel", SemanticDomain::Accommodation, 7},
    {"Scenic Spot Tickets", SemanticDomain::EntertainmentLeisure, 7},
}};

struct ArchetypeSeed {
    std::string_view name;
    std::string_view marital_status;
    std::string_view has_kids;
    std::string_view age_band;
};

constexpr std::array<ArchetypeSeed, 6> kArchetypeCatalog = {{
    {"family", "married", "yes", "30-45"},
    {"business_traveler", "single", "no", "25-40"},
    {"student", "single", "no", "18-24"},
    {"retiree", "married", "no", "60+"},
    {"young_professional", "single", "no", "22-30"},
    {"couple", "married", "no", "25-35"},
}};

int home_need_of(int category, int n_needs) {
    if (category < static_cast<int>(kCategoryCatalog.size()))
        return kCategoryCatalog[category].home_need % n_needs;
    return category % n_needs;
}

Taxonomy make_taxonomy(const WorldSpec& spec) {
    std::vector<LivingNeed> needs;
    for (int i = 0; i < spec.n_needs; ++i) {
        std::string label = i < static_cast<int>(kNeedCatalog.size())
                                ? std::string(kNeedCatalog[i])
                                : "Need " + std::to_string(i + 1);
        needs.push_back({i, std::move(label)});
    }
    std::vector<SemanticCategory> cats;
    for (int c = 0; c < spec.n_categories; ++c) {
        if (c < static_cast<int>(kCategoryCatalog.size())) {
            cats.push_back({c, std::string(kCategoryCatalog[c].label), kCategoryCatalog[c].domain});
        } else {
            cats.push_back({c, "Category " + std::to_string(c + 1), kAllDomains[c % kAllDomains.size()]});
        }
    }
    // Contiguous blocks keep the B->C map surjective whenever |B| >= |C|.
    std::vector<Behavior> behs;
    std::vector<int> per_cat(spec.n_categories, 0);
    for (int b = 0; b < spec.n_behaviors; ++b) {
        const int c = static_cast<int>(static_cast<std::int64_t>(b) * spec.n_categories / spec.n_behaviors);
        ++per_cat[c];
        behs.push_back({b, cats[c].label + " - Shop " + std::to_string(per_cat[c]), c});
    }
    return Taxonomy(std::move(needs), std::move(cats), std::move(behs));
}

std::vector<Archetype> make_archetypes(int n) {
    std::vector<Archetype> out;
    for (int a = 0; a < n; ++a) {
        Archetype arch;
        if (a < static_cast<int>(kArchetypeCatalog.size())) {
            const auto& s = kArchetypeCatalog[a];
            arch.name = std::string(s.name);
            arch.profile = UserProfile({{"archetype", arch.name},
                                        {"marital_status", std::string(s.marital_status)},
                                        {"has_kids", std::string(s.has_kids)},
                                        {"age_band", std::string(s.age_band)}});
        } else {
            arch.name = "archetype_" + std::to_string(a + 1);
            arch.profile = UserProfile({{"archetype", arch.name}});
        }
        out.push_back(std::move(arch));
    }
    return out;
}

void softmax_into(std::span<const double> logits, std::span<double> out) {
    double m = -INFINITY;
    for (double v : logits) m = std::max(m, v);
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = std::isinf(logits[i]) && logits[i] < 0 ? 0.0 : std::exp(logits[i] - m);
        z += out[i];
    }
    for (double& v : out) v /= z;
}

void check_row(std::span<const double> row, const std::string& what) {
    double s = 0.0;
    for (double v : row) {
        if (!(v >= 0.0) || !std::isfinite(v)) throw DataError(what + ": negative or non-finite entry");
        s += v;
    }
    if (std::abs(s - 1.0) > kRowTolerance)
        throw DataError(what + ": row sums to " + std::to_string(s) + ", expected 1");
}

ProbTable table_from_rows(const std::vector<std::vector<double>>& rows, int cols,
                          const std::string& what) {
    ProbTable t{static_cast<int>(rows.size()), cols, {}};
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (static_cast<int>(rows[r].size()) != cols)
            throw DataError(what + ": inconsistent table shape at row " + std::to_string(r));
        check_row(rows[r], what + " row " + std::to_string(r));
        t.p.insert(t.p.end(), rows[r].begin(), rows[r].end());
    }
    return t;
}

ProbTable generate_need_table(const WorldSpec& spec, Rng& rng) {
    const int A = spec.n_archetypes, I = spec.n_needs;
    std::vector<double> arch(A * I), hour(kNumTimeBuckets * I), zone(kNumLocationTypes * I);
    for (int a = 0; a < A; ++a)
        for (int i = 0; i < I; ++i) arch[a * I + i] = rng.normal() + (i == a % I ? 1.0 : 0.0);
    for (auto& v : hour) v = rng.normal();
    for (auto& v : zone) v = rng.normal();
    ProbTable t{A * kNumTimeBuckets * kNumLocationTypes, I, {}};
    t.p.resize(static_cast<std::size_t>(t.rows) * I);
    std::vector<double> logits(I);
    for (int a = 0; a < A; ++a)
        for (int h = 0; h < kNumTimeBuckets; ++h)
            for (int z = 0; z < kNumLocationTypes; ++z) {
                for (int i = 0; i < I; ++i)
                    logits[i] = spec.need_sharpness * (arch[a * I + i] + hour[h * I + i] + zone[z * I + i]);
                const int r = (a * kNumTimeBuckets + h) * kNumLocationTypes + z;
                softmax_into(logits, {t.p.data() + static_cast<std::size_t>(r) * I, static_cast<std::size_t>(I)});
            }
    return t;
}

ProbTable generate_category_table(const WorldSpec& spec, Rng& rng) {
    const int I = spec.n_needs, C = spec.n_categories;
    ProbTable t{I, C, std::vector<double>(static_cast<std::size_t>(I) * C)};
    std::vector<double> logits(C);
    for (int i = 0; i < I; ++i) {
        for (int c = 0; c < C; ++c) {
            const bool home = home_need_of(c, I) == i;
            logits[c] = 0.5 * rng.normal() + (home ? spec.category_sharpness : 0.0);
            if (spec.support_masks && !home) logits[c] = -INFINITY;
        }
        // A need with no home category falls back to the full row.
        if (std::all_of(logits.begin(), logits.end(), [](double v) { return std::isinf(v); }))
            std::fill(logits.begin(), logits.end(), 0.0);
        softmax_into(logits, {t.p.data() + static_cast<std::size_t>(i) * C, static_cast<std::size_t>(C)});
    }
    return t;
}

ProbTable generate_behavior_table(const WorldSpec& spec, const Taxonomy& tax, Rng& rng) {
    const int C = spec.n_categories, B = spec.n_behaviors;
    ProbTable t{C, B, std::vector<double>(static_cast<std::size_t>(C) * B, 0.0)};
    for (int c = 0; c < C; ++c) {
        const auto& members = tax.behaviors_in(c);
        std::vector<double> logits(members.size()), probs(members.size());
        for (auto& v : logits) v = spec.behavior_sharpness * rng.normal();
        softmax_into(logits, probs);
        for (std::size_t k = 0; k < members.size(); ++k) t.at(c, members[k]) = probs[k];
    }
    return t;
}

ProbTable expand_need_table(const WorldSpec& spec) {
    const int full = spec.n_archetypes * kNumTimeBuckets * kNumLocationTypes;
    const auto& rows = spec.need_table;
    const int n = static_cast<int>(rows.size());
    if (n != 1 && n != kNumTimeBuckets && n != full)
        throw DataError("need_table: inconsistent table shape (" + std::to_string(n) +
                        " rows; expected 1, 24 or " + std::to_string(full) + ")");
    auto base = table_from_rows(rows, spec.n_needs, "need_table");
    ProbTable t{full, spec.n_needs, {}};
    t.p.reserve(static_cast<std::size_t>(full) * spec.n_needs);
    for (int r = 0; r < full; ++r) {
        const int hour = (r / kNumLocationTypes) % kNumTimeBuckets;
        const int src = n == 1 ? 0 : (n == kNumTimeBuckets ? hour : r);
        auto row = base.row(src);
        t.p.insert(t.p.end(), row.begin(), row.end());
    }
    return t;
}

int argmax_lowest(std::span<const double> v) {
    int best = 0;
    for (int i = 1; i < static_cast<int>(v.size()); ++i)
        if (v[i] > v[best]) best = i;
    return best;
}

}  // namespace

int World::archetype_of(const UserProfile& profile) const {
    auto name = profile.get("archetype");
    if (!name) return -1;
    return archetype_index(*name);
}

int World::archetype_index(const std::string& name) const {
    for (std::size_t a = 0; a < archetypes.size(); ++a)
        if (archetypes[a].name == name) return static_cast<int>(a);
    return -1;
}

World generate_world(const WorldSpec& spec) {
    if (spec.n_needs < 1 || spec.n_categories < spec.n_needs || spec.n_behaviors < spec.n_categories)
        throw DataError("world counts must satisfy |B| >= |C| >= |I| >= 1");
    if (spec.n_archetypes < 1) throw DataError("world needs at least one archetype");
    if (!(spec.noise_rate >= 0.0 && spec.noise_rate < 1.0)) throw DataError("noise_rate must be in [0,1)");

    World w;
    w.spec = spec;
    w.taxonomy = make_taxonomy(spec);
    w.archetypes = make_archetypes(spec.n_archetypes);

    // Independent streams so that overriding one table leaves the others unchanged.
    Rng need_rng(derive_seed(spec.seed, 1));
    Rng cat_rng(derive_seed(spec.seed, 2));
    Rng beh_rng(derive_seed(spec.seed, 3));

    w.need_given_context = spec.need_table.empty() ? generate_need_table(spec, need_rng)
                                                   : expand_need_table(spec);
    if (spec.category_table.empty()) {
        w.category_given_need = generate_category_table(spec, cat_rng);
    } else {
        if (static_cast<int>(spec.category_table.size()) != spec.n_needs)
            throw DataError("category_table: inconsistent table shape");
        w.category_given_need = table_from_rows(spec.category_table, spec.n_categories, "category_table");
    }
    if (spec.behavior_table.empty()) {
        w.behavior_given_category = generate_behavior_table(spec, w.taxonomy, beh_rng);
    } else {
        if (static_cast<int>(spec.behavior_table.size()) != spec.n_categories)
            throw DataError("behavior_table: inconsistent table shape");
        w.behavior_given_category =
            table_from_rows(spec.behavior_table, spec.n_behaviors, "behavior_table");
        for (int c = 0; c < spec.n_categories; ++c)
            for (int b = 0; b < spec.n_behaviors; ++b)
                if (w.behavior_given_category.at(c, b) > 0.0 && w.taxonomy.category_of(b) != c)
                    throw DataError("behavior_table: mass on a behavior outside its category");
    }
    return w;
}

SpatioTemporalContext sample_context(std::int64_t day_start, Rng& rng) {
    const int hour = static_cast<int>(rng.below(kNumTimeBuckets));
    const auto zone = static_cast<LocationType>(rng.below(kNumLocationTypes));
    const std::int64_t ts = day_start + hour * 3600 + static_cast<std::int64_t>(rng.below(3600));
    // Rough metro-area box; only the zone tag carries signal.
    const double lat = 31.0 + 0.5 * rng.uniform();
    const double lon = 121.2 + 0.5 * rng.uniform();
    return SpatioTemporalContext::make(ts, lat, lon, zone);
}

Interaction sample_interaction(const World& world, int archetype,
                               const SpatioTemporalContext& context, Rng& rng) {
    const auto& tax = world.taxonomy;
    Interaction it;
    it.context = context;
    if (rng.uniform() < world.spec.noise_rate) {
        it.need_id = static_cast<int>(rng.below(tax.num_needs()));
        it.category_id = static_cast<int>(rng.below(tax.num_categories()));
        const auto& members = tax.behaviors_in(it.category_id);
        it.behavior_id = members[rng.below(members.size())];
        return it;
    }
    const int row = world.need_row(archetype, context.time_bucket, context.location_type);
    it.need_id = rng.categorical(world.need_given_context.row(row));
    it.category_id = rng.categorical(world.category_given_need.row(it.need_id));
    it.behavior_id = rng.categorical(world.behavior_given_category.row(it.category_id));
    return it;
}

namespace {

UserRecord generate_one_user(const World& world, int index, int min_len, int max_len,
                             std::uint64_t seed) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(index)));
    const int archetype = static_cast<int>(rng.below(world.archetypes.size()));
    const int len = min_len + static_cast<int>(rng.below(static_cast<std::uint64_t>(max_len - min_len + 1)));
    UserRecord r;
    r.user_id = "u" + std::to_string(index);
    r.profile = world.archetypes[archetype].profile;
    std::int64_t day = kEpochBase + static_cast<std::int64_t>(rng.below(30)) * kDay;
    for (int k = 0; k < len; ++k) {
        day += static_cast<std::int64_t>(1 + rng.below(3)) * kDay;
        auto ctx = sample_context(day, rng);
        r.history.push_back(sample_interaction(world, archetype, ctx, rng));
    }
    return r;
}

}  // namespace

std::vector<UserRecord> generate_users(const World& world, int n_users, int min_len, int max_len,
                                       std::uint64_t seed, int jobs) {
    if (n_users < 1) throw DataError("n_users must be >= 1");
    if (min_len < 0 || max_len < min_len) throw DataError("invalid sequence length range");
    std::vector<UserRecord> users(n_users);
    const int workers = std::clamp(jobs, 1, n_users);
    auto work = [&](int w) {
        for (int u = w; u < n_users; u += workers)
            users[u] = generate_one_user(world, u, min_len, max_len, seed);
    };
    if (workers == 1) {
        work(0);
    } else {
        std::vector<std::jthread> pool;
        for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
    }
    return users;
}

OracleResult oracle(const World& world, int archetype, const SpatioTemporalContext& context) {
    if (archetype < 0 || archetype >= static_cast<int>(world.archetypes.size()))
        throw DataError("unknown archetype index " + std::to_string(archetype));
    const auto& tax = world.taxonomy;
    const int I = tax.num_needs(), C = tax.num_categories(), B = tax.num_behaviors();
    OracleResult out;
    auto need_row = world.need_given_context.row(world.need_row(archetype, context.time_bucket, context.location_type));
    out.need.assign(need_row.begin(), need_row.end());
    out.category.resize(I);
    for (int i = 0; i < I; ++i) {
        auto row = world.category_given_need.row(i);
        out.category[i].assign(row.begin(), row.end());
    }
    out.behavior.resize(C);
    for (int c = 0; c < C; ++c) {
        auto row = world.behavior_given_category.row(c);
        out.behavior[c].assign(row.begin(), row.end());
    }
    out.category_marginal.assign(C, 0.0);
    for (int i = 0; i < I; ++i)
        for (int c = 0; c < C; ++c) out.category_marginal[c] += out.need[i] * out.category[i][c];
    out.behavior_marginal.assign(B, 0.0);
    for (int c = 0; c < C; ++c)
        for (int b = 0; b < B; ++b) out.behavior_marginal[b] += out.category_marginal[c] * out.behavior[c][b];

    auto& path = out.argmax_path;
    path.need_id = argmax_lowest(out.need);
    path.category_id = argmax_lowest(out.category[path.need_id]);
    path.behavior_id = argmax_lowest(out.behavior[path.category_id]);
    return out;
}

OracleResult oracle(const World& world, const std::string& archetype,
                    const SpatioTemporalContext& context) {
    const int a = world.archetype_index(archetype);
    if (a < 0) throw DataError("unknown archetype: " + archetype);
    return oracle(world, a, context);
}

// ---- serialization -------------------------------------------------------

nlohmann::json world_spec_to_json(const WorldSpec& s) {
    nlohmann::json j = {{"n_needs", s.n_needs},
                        {"n_categories", s.n_categories},
                        {"n_behaviors", s.n_behaviors},
                        {"n_archetypes", s.n_archetypes},
                        {"noise_rate", s.noise_rate},
                        {"seed", s.seed},
                        {"need_sharpness", s.need_sharpness},
                        {"category_sharpness", s.category_sharpness},
                        {"behavior_sharpness", s.behavior_sharpness},
                        {"support_masks", s.support_masks}};
    if (!s.need_table.empty()) j["need_table"] = s.need_table;
    if (!s.category_table.empty()) j["category_table"] = s.category_table;
    if (!s.behavior_table.empty()) j["behavior_table"] = s.behavior_table;
    return j;
}

WorldSpec world_spec_from_json(const nlohmann::json& j) {
    static const std::array<std::string_view, 13> kKeys = {
        "n_needs", "n_categories", "n_behaviors", "n_archetypes", "noise_rate", "seed",
        "need_sharpness", "category_sharpness", "behavior_sharpness", "support_masks",
        "need_table", "category_table", "behavior_table"};
    for (const auto& [k, v] : j.items()) {
        if (std::find(kKeys.begin(), kKeys.end(), k) == kKeys.end())
            throw DataError("unknown world spec key: " + k);
    }
    WorldSpec s;
    try {
        s.n_needs = j.value("n_needs", s.n_needs);
        s.n_categories = j.value("n_categories", s.n_categories);
        s.n_behaviors = j.value("n_behaviors", s.n_behaviors);
        s.n_archetypes = j.value("n_archetypes", s.n_archetypes);
        s.noise_rate = j.value("noise_rate", s.noise_rate);
        s.seed = j.value("seed", s.seed);
        s.need_sharpness = j.value("need_sharpness", s.need_sharpness);
        s.category_sharpness = j.value("category_sharpness", s.category_sharpness);
        s.behavior_sharpness = j.value("behavior_sharpness", s.behavior_sharpness);
        s.support_masks = j.value("support_masks", s.support_masks);
        if (j.contains("need_table")) s.need_table = j["need_table"].get<std::vector<std::vector<double>>>();
        if (j.contains("category_table"))
            s.category_table = j["category_table"].get<std::vector<std::vector<double>>>();
        if (j.contains("behavior_table"))
            s.behavior_table = j["behavior_table"].get<std::vector<std::vector<double>>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed world spec: ") + e.what());
    }
    return s;
}

namespace {

nlohmann::json table_to_json(const ProbTable& t) {
    return {{"rows", t.rows}, {"cols", t.cols}, {"p", t.p}};
}

ProbTable table_from_json(const nlohmann::json& j, const std::string& what) {
    ProbTable t{j.at("rows").get<int>(), j.at("cols").get<int>(), j.at("p").get<std::vector<double>>()};
    if (t.p.size() != static_cast<std::size_t>(t.rows) * t.cols)
        throw DataError(what + ": inconsistent table shape");
    for (int r = 0; r < t.rows; ++r) check_row(t.row(r), what + " row " + std::to_string(r));
    return t;
}

}  // namespace

nlohmann::json world_to_json(const World& w) {
    nlohmann::json arch = nlohmann::json::array();
    for (const auto& a : w.archetypes) {
        nlohmann::json profile = nlohmann::json::array();
        for (const auto& [k, v] : a.profile.attributes()) profile.push_back({k, v});
        arch.push_back({{"name", a.name}, {"profile", profile}});
    }
    return {{"format", "needforge-world"},
            {"version", 1},
            {"spec", world_spec_to_json(w.spec)},
            {"taxonomy", taxonomy_to_json(w.taxonomy)},
            {"archetypes", arch},
            {"need_given_context", table_to_json(w.need_given_context)},
            {"category_given_need", table_to_json(w.category_given_need)},
            {"behavior_given_category", table_to_json(w.behavior_given_category)}};
}

World world_from_json(const nlohmann::json& j) {
    try {
        if (j.value("format", std::string{}) != "needforge-world") throw DataError("not a world file");
        World w;
        w.spec = world_spec_from_json(j.at("spec"));
        w.taxonomy = taxonomy_from_json(j.at("taxonomy"));
        for (const auto& a : j.at("archetypes")) {
            std::vector<std::pair<std::string, std::string>> attrs;
            for (const auto& kv : a.at("profile"))
                attrs.emplace_back(kv.at(0).get<std::string>(), kv.at(1).get<std::string>());
            w.archetypes.push_back({a.at("name").get<std::string>(), UserProfile(std::move(attrs))});
        }
        w.need_given_context = table_from_json(j.at("need_given_context"), "need_given_context");
        w.category_given_need = table_from_json(j.at("category_given_need"), "category_given_need");
        w.behavior_given_category = table_from_json(j.at("behavior_given_category"), "behavior_given_category");
        const int A = static_cast<int>(w.archetypes.size());
        if (w.need_given_context.rows != A * kNumTimeBuckets * kNumLocationTypes ||
            w.need_given_context.cols != w.taxonomy.num_needs() ||
            w.category_given_need.rows != w.taxonomy.num_needs() ||
            w.category_given_need.cols != w.taxonomy.num_categories() ||
            w.behavior_given_category.rows != w.taxonomy.num_categories() ||
            w.behavior_given_category.cols != w.taxonomy.num_behaviors())
            throw DataError("world tables are not index-consistent with the taxonomy");
        return w;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed world: ") + e.what());
    }
}

World load_world(const std::string& path) { return world_from_json(read_json_file(path)); }

}  // namespace needforge
