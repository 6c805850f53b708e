#include "needforge/cli.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "needforge/eval.hpp"

namespace needforge::cli {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

[[noreturn]] void bad_value(const std::string& section, const std::string& key, const std::string& value,
                            const char* what) {
    throw ConfigError("config [" + section + "] " + key + ": expected " + what + ", got '" + value + "'");
}

}  // namespace

const std::map<std::string, std::vector<std::string>>& known_keys() {
    static const std::map<std::string, std::vector<std::string>> keys = {
        {"curation",
         {"k", "batch_size", "max_epochs", "z_threshold", "tau_min", "tau_size", "tau_quality", "r_base", "r_high",
          "min_dominance", "seed"}},
        {"world",
         {"n_needs", "n_categories", "n_behaviors", "n_archetypes", "noise_rate", "seed", "need_sharpness",
          "category_sharpness", "behavior_sharpness", "support_masks", "n_users", "min_len", "max_len"}},
        {"reward",
         {"need_w_match", "need_w_fmt", "need_w_len", "category_w_match", "category_w_fmt", "category_w_len",
          "full_path_w_match", "full_path_w_fmt", "full_path_w_len", "alpha", "decay_steps", "len_min", "len_max",
          "eps_std", "aux_per_step", "embed_dim", "embed_seed"}},
        {"policy", {"mode", "temperature", "top_p", "n", "label_prior"}},
        {"grpo", {"group_size", "clip_eps", "kl_beta", "learning_rate", "prompts_per_step", "inner_epochs", "seed"}},
        {"curriculum",
         {"need_steps", "category_steps", "full_steps", "ablation", "kl_reference", "train_users", "probe_users",
          "min_len", "max_len", "all_positions"}},
        {"agent", {"backend", "base_url", "model", "embed_model", "embed_dim", "timeout_s", "max_in_flight"}},
        {"eval", {"level", "slices"}},
    };
    return keys;
}

void RunConfig::set(const std::string& section, const std::string& key, const std::string& value) {
    const auto& keys = known_keys();
    const auto it = keys.find(section);
    if (it == keys.end()) throw ConfigError("config: unknown section [" + section + "]");
    if (std::find(it->second.begin(), it->second.end(), key) == it->second.end())
        throw ConfigError("config: unknown key '" + key + "' in [" + section + "]");
    sections_[section][key] = value;
}

RunConfig RunConfig::parse(std::string_view text, const std::string& origin) {
    RunConfig cfg;
    std::string section;
    std::istringstream in{std::string(text)};
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        const std::string where = origin + ":" + std::to_string(lineno);
        if (t.front() == '[') {
            if (t.back() != ']') throw ConfigError(where + ": unterminated section header");
            section = trim(std::string_view(t).substr(1, t.size() - 2));
            if (!known_keys().contains(section)) throw ConfigError(where + ": unknown section [" + section + "]");
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
        if (section.empty()) throw ConfigError(where + ": key outside any section");
        const std::string key = trim(std::string_view(t).substr(0, eq));
        try {
            cfg.set(section, key, trim(std::string_view(t).substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(where + ": " + e.what());
        }
    }
    return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("file not found: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
}

void RunConfig::merge(const RunConfig& other) {
    for (const auto& [s, kv] : other.sections_)
        for (const auto& [k, v] : kv) sections_[s][k] = v;
}

bool RunConfig::has(const std::string& section, const std::string& key) const {
    const auto it = sections_.find(section);
    return it != sections_.end() && it->second.contains(key);
}

std::string RunConfig::get(const std::string& section, const std::string& key, const std::string& fallback) const {
    if (!has(section, key)) return fallback;
    return sections_.at(section).at(key);
}

double RunConfig::get_double(const std::string& section, const std::string& key, double fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = get(section, key, "");
    try {
        std::size_t pos = 0;
        const double d = std::stod(v, &pos);
        if (pos != v.size()) bad_value(section, key, v, "a number");
        return d;
    } catch (const std::logic_error&) {
        bad_value(section, key, v, "a number");
    }
}

std::int64_t RunConfig::get_int(const std::string& section, const std::string& key, std::int64_t fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = get(section, key, "");
    std::int64_t x = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc{} || p != v.data() + v.size()) bad_value(section, key, v, "an integer");
    return x;
}

std::uint64_t RunConfig::get_u64(const std::string& section, const std::string& key, std::uint64_t fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = get(section, key, "");
    std::uint64_t x = 0;
    const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc{} || p != v.data() + v.size()) bad_value(section, key, v, "an unsigned integer");
    return x;
}

bool RunConfig::get_bool(const std::string& section, const std::string& key, bool fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = get(section, key, "");
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    bad_value(section, key, v, "a boolean");
}

CurationConfig curation_config(const RunConfig& c) {
    CurationConfig k;
    const std::string s = "curation";
    k.k = static_cast<int>(c.get_int(s, "k", k.k));
    k.batch_size = static_cast<int>(c.get_int(s, "batch_size", k.batch_size));
    k.max_epochs = static_cast<int>(c.get_int(s, "max_epochs", k.max_epochs));
    k.z_threshold = c.get_double(s, "z_threshold", k.z_threshold);
    k.tau_min = static_cast<int>(c.get_int(s, "tau_min", k.tau_min));
    k.tau_size = static_cast<int>(c.get_int(s, "tau_size", k.tau_size));
    k.tau_quality = c.get_double(s, "tau_quality", k.tau_quality);
    k.r_base = c.get_double(s, "r_base", k.r_base);
    k.r_high = c.get_double(s, "r_high", k.r_high);
    k.min_dominance = c.get_double(s, "min_dominance", k.min_dominance);
    k.seed = c.get_u64(s, "seed", k.seed);
    k.validate();
    return k;
}

WorldSpec world_spec(const RunConfig& c) {
    WorldSpec w;
    const std::string s = "world";
    w.n_needs = static_cast<int>(c.get_int(s, "n_needs", w.n_needs));
    w.n_categories = static_cast<int>(c.get_int(s, "n_categories", w.n_categories));
    w.n_behaviors = static_cast<int>(c.get_int(s, "n_behaviors", w.n_behaviors));
    w.n_archetypes = static_cast<int>(c.get_int(s, "n_archetypes", w.n_archetypes));
    w.noise_rate = c.get_double(s, "noise_rate", w.noise_rate);
    w.seed = c.get_u64(s, "seed", w.seed);
    w.need_sharpness = c.get_double(s, "need_sharpness", w.need_sharpness);
    w.category_sharpness = c.get_double(s, "category_sharpness", w.category_sharpness);
    w.behavior_sharpness = c.get_double(s, "behavior_sharpness", w.behavior_sharpness);
    w.support_masks = c.get_bool(s, "support_masks", w.support_masks);
    return w;
}

RewardParams reward_params(const RunConfig& c) {
    RewardParams p;
    const std::string s = "reward";
    auto weights = [&](const std::string& prefix, RewardWeights& w) {
        w.match = c.get_double(s, prefix + "_w_match", w.match);
        w.fmt = c.get_double(s, prefix + "_w_fmt", w.fmt);
        w.len = c.get_double(s, prefix + "_w_len", w.len);
    };
    weights("need", p.need);
    weights("category", p.category);
    weights("full_path", p.full_path);
    p.alpha = c.get_double(s, "alpha", p.alpha);
    p.decay_steps = c.get_double(s, "decay_steps", p.decay_steps);
    p.len_min = c.get_double(s, "len_min", p.len_min);
    p.len_max = c.get_double(s, "len_max", p.len_max);
    p.eps_std = c.get_double(s, "eps_std", p.eps_std);
    p.aux_per_step = c.get_bool(s, "aux_per_step", p.aux_per_step);
    p.validate();
    return p;
}

SamplingConfig sampling_config(const RunConfig& c) {
    SamplingConfig sc;
    sc.temperature = c.get_double("policy", "temperature", sc.temperature);
    sc.top_p = c.get_double("policy", "top_p", sc.top_p);
    sc.n = static_cast<int>(c.get_int("policy", "n", sc.n));
    sc.validate();
    return sc;
}

GrpoConfig grpo_config(const RunConfig& c) {
    GrpoConfig g;
    const std::string s = "grpo";
    g.group_size = static_cast<int>(c.get_int(s, "group_size", g.group_size));
    g.clip_eps = c.get_double(s, "clip_eps", g.clip_eps);
    g.kl_beta = c.get_double(s, "kl_beta", g.kl_beta);
    g.learning_rate = c.get_double(s, "learning_rate", g.learning_rate);
    g.prompts_per_step = static_cast<int>(c.get_int(s, "prompts_per_step", g.prompts_per_step));
    g.inner_epochs = static_cast<int>(c.get_int(s, "inner_epochs", g.inner_epochs));
    g.seed = c.get_u64(s, "seed", g.seed);
    g.validate();
    return g;
}

CurriculumPlan curriculum_plan(const RunConfig& c, PolicyMode mode) {
    const std::string s = "curriculum";
    const GrpoConfig g = grpo_config(c);
    const int need = static_cast<int>(c.get_int(s, "need_steps", 200));
    const int cat = static_cast<int>(c.get_int(s, "category_steps", 200));
    const int full = static_cast<int>(c.get_int(s, "full_steps", 200));
    const std::string ablation = c.get(s, "ablation", "none");
    CurriculumPlan plan;
    if (ablation == "full_path" || mode == PolicyMode::Flat) {
        // The flat policy has no upstream stages to align, so it always trains the full path.
        plan = CurriculumPlan::full_path_only(g, c.has(s, "full_steps") || ablation == "full_path" ? full
                                                                                                  : need + cat + full);
    } else if (ablation == "none") {
        plan = CurriculumPlan::standard(g, need, cat, full);
    } else {
        throw ConfigError("config [curriculum] ablation: expected none or full_path, got '" + ablation + "'");
    }
    const std::string ref = c.get(s, "kl_reference", "phase_initial");
    if (ref == "phase_initial") {
        plan.kl_reference = KlReference::PhaseInitial;
    } else if (ref == "global_initial") {
        plan.kl_reference = KlReference::GlobalInitial;
    } else {
        throw ConfigError("config [curriculum] kl_reference: expected phase_initial or global_initial, got '" + ref +
                          "'");
    }
    plan.validate();
    return plan;
}

LogLevel parse_log_level(std::string_view s) {
    if (s == "debug") return LogLevel::Debug;
    if (s == "info") return LogLevel::Info;
    if (s == "warn") return LogLevel::Warn;
    if (s == "error") return LogLevel::Error;
    throw ConfigError("unknown log level: " + std::string(s));
}

void Logger::log(LogLevel level, const std::string& message, std::optional<int> step) const {
    if (level < min_) return;
    static constexpr const char* names[] = {"debug", "info", "warn", "error"};
    out_ << "level=" << names[static_cast<int>(level)] << " cmd=" << cmd_
         << " step=" << (step ? std::to_string(*step) : std::string("-")) << " msg=" << std::quoted(message) << '\n';
}

namespace {

struct Globals {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    int jobs = std::max(1u, std::thread::hardware_concurrency());
    std::string log_level = "info";
};

RunConfig load_config(const Globals& g) {
    return g.config_path.empty() ? RunConfig{} : RunConfig::load(g.config_path);
}

std::unique_ptr<Embedder> hash_embedder(const RunConfig& c) {
    const auto dim = static_cast<std::size_t>(c.get_int("reward", "embed_dim", 256));
    const auto seed = c.get_u64("reward", "embed_seed", 11);
    return std::make_unique<CachedEmbedder>(std::make_shared<HashEmbedder>(dim, seed));
}

void write_json(const std::string& path, const nlohmann::json& j) { write_text_file(path, j.dump(2) + "\n"); }

// ---- curate ---------------------------------------------------------------

struct CurateArgs {
    std::string input, taxonomy, out, report;
};

int cmd_curate(const Globals& g, const CurateArgs& a, std::ostream& out, const Logger& log) {
    RunConfig c = load_config(g);
    if (g.seed) c.set("curation", "seed", std::to_string(*g.seed));
    const CurationConfig cfg = curation_config(c);
    const Taxonomy tax = load_taxonomy(a.taxonomy);
    const auto records = load_records(a.input, tax);
    log.info("loaded " + std::to_string(records.size()) + " records");
    const CurationResult res = curate(records, tax, cfg);
    std::vector<UserRecord> kept;
    kept.reserve(res.kept.size());
    for (std::size_t i : res.kept) kept.push_back(records[i]);
    save_records(a.out, kept, tax);
    std::size_t n_out = static_cast<std::size_t>(std::count(res.outliers.begin(), res.outliers.end(), true));
    if (!a.report.empty()) {
        nlohmann::json rep = report_to_json(res.report);
        rep["n_input"] = records.size();
        rep["n_outliers"] = n_out;
        rep["n_kept"] = kept.size();
        write_json(a.report, rep);
    }
    log.info("kept " + std::to_string(kept.size()) + " of " + std::to_string(records.size()) + " users, " +
             std::to_string(n_out) + " outliers");
    out << nlohmann::json{{"n_input", records.size()}, {"n_outliers", n_out}, {"n_kept", kept.size()}}.dump() << '\n';
    return 0;
}

// ---- gen-world ------------------------------------------------------------

struct GenWorldArgs {
    std::string spec, out, users;
    std::optional<int> n_users;
};

int cmd_gen_world(const Globals& g, const GenWorldArgs& a, std::ostream& out, const Logger& log) {
    RunConfig c = load_config(g);
    WorldSpec spec = a.spec.empty() ? world_spec(c) : world_spec_from_json(read_json_file(a.spec));
    if (g.seed) spec.seed = *g.seed;
    const World w = generate_world(spec);
    write_json(a.out, world_to_json(w));
    log.info("world with " + std::to_string(w.taxonomy.num_needs()) + " needs, " +
             std::to_string(w.taxonomy.num_categories()) + " categories, " +
             std::to_string(w.taxonomy.num_behaviors()) + " behaviors");
    nlohmann::json summary = {{"needs", w.taxonomy.num_needs()},
                              {"categories", w.taxonomy.num_categories()},
                              {"behaviors", w.taxonomy.num_behaviors()}};
    if (!a.users.empty()) {
        const int n = a.n_users.value_or(static_cast<int>(c.get_int("world", "n_users", 1000)));
        const int lo = static_cast<int>(c.get_int("world", "min_len", 2));
        const int hi = static_cast<int>(c.get_int("world", "max_len", 30));
        const auto users = generate_users(w, n, lo, hi, derive_seed(spec.seed, 0x05e5), g.jobs);
        save_records(a.users, users, w.taxonomy);
        const auto st = dataset_stats(users, w.taxonomy);
        summary["stats"] = stats_to_json(st);
        log.info("wrote " + std::to_string(users.size()) + " users");
    }
    out << summary.dump() << '\n';
    return 0;
}

// ---- train ----------------------------------------------------------------

struct TrainArgs {
    std::string world, plan, out, stats, data, init;
};

int cmd_train(const Globals& g, const TrainArgs& a, std::ostream& out, const Logger& log) {
    RunConfig c = load_config(g);
    const World w = load_world(a.world);
    if (!a.plan.empty()) c.merge(RunConfig::load(a.plan));
    if (g.seed) c.set("grpo", "seed", std::to_string(*g.seed));

    const PolicyMode mode = parse_policy_mode(c.get("policy", "mode", "hierarchical"));
    const CurriculumPlan plan = curriculum_plan(c, mode);
    const std::uint64_t seed = grpo_config(c).seed;
    const auto structure = PolicyStructure::from_world(w);

    std::vector<UserRecord> train_users;
    if (!a.data.empty()) {
        train_users = load_records(a.data, w.taxonomy);
    } else {
        train_users = generate_users(w, static_cast<int>(c.get_int("curriculum", "train_users", 1000)),
                                     static_cast<int>(c.get_int("curriculum", "min_len", 2)),
                                     static_cast<int>(c.get_int("curriculum", "max_len", 12)), derive_seed(seed, 1),
                                     g.jobs);
    }
    const auto probe_users = generate_users(w, static_cast<int>(c.get_int("curriculum", "probe_users", 512)),
                                            static_cast<int>(c.get_int("curriculum", "min_len", 2)),
                                            static_cast<int>(c.get_int("curriculum", "max_len", 12)),
                                            derive_seed(seed, 2), g.jobs);
    const auto train = make_examples(w, structure.layout, train_users, c.get_bool("curriculum", "all_positions", true));
    const auto probe_set = make_examples(w, structure.layout, probe_users, false);
    if (train.empty()) throw DataError("train: no training examples");
    log.info("training on " + std::to_string(train.size()) + " examples, probing " +
             std::to_string(probe_set.size()));

    const auto embedder = hash_embedder(c);
    HierarchicalPolicy initial;
    if (!a.init.empty()) {
        initial = load_policy(a.init);
    } else {
        initial = HierarchicalPolicy(structure, mode, sampling_config(c));
        const double prior = c.get_double("policy", "label_prior", 0.0);
        if (prior != 0.0) apply_label_prior(initial, w.taxonomy, *embedder, prior);
    }

    TrainContext ctx;
    ctx.world = &w;
    ctx.train = train;
    ctx.probe = probe_set;
    ctx.reward = make_reward_fn(w.taxonomy, *embedder, reward_params(c));
    ctx.eps_std = reward_params(c).eps_std;
    ctx.jobs = g.jobs;
    const CurriculumResult res = run_curriculum(plan, initial, ctx);
    for (const auto& row : res.rows) {
        if (!row.cat_hr1) continue;
        std::ostringstream m;
        m << row.phase << " reward=" << row.mean_reward << " H=" << row.entropy.total;
        if (row.need_acc) m << " need_acc=" << *row.need_acc;
        m << " cat_hr1=" << *row.cat_hr1;
        log.info(m.str(), row.step);
    }
    if (!a.stats.empty()) write_text_file(a.stats, stats_to_csv(res.rows));
    if (!a.out.empty()) {
        std::filesystem::create_directories(a.out);
        for (std::size_t k = 0; k < res.phases.size(); ++k) {
            const auto& p = res.phases[k];
            save_policy((std::filesystem::path(a.out) / (std::to_string(k + 1) + "_" +
                                                         std::string(to_string(plan.phases[k].phase)) + ".json"))
                            .string(),
                        p.policy);
        }
        save_policy((std::filesystem::path(a.out) / "final.json").string(), res.policy);
        write_json((std::filesystem::path(a.out) / "meta.json").string(),
                   {{"plan", res.tag}, {"seed", seed}, {"steps", res.rows.size()}, {"mode", to_string(mode)}});
    }
    nlohmann::json summary = {{"plan", res.tag}, {"steps", res.rows.size()}};
    if (!res.phases.empty()) {
        const auto& fp = res.phases.back().final_probe;
        summary["cat_hr1"] = fp.cat_hr1;
        summary["need_acc"] = fp.need_acc ? nlohmann::json(*fp.need_acc) : nlohmann::json(nullptr);
    }
    out << summary.dump() << '\n';
    return 0;
}

// ---- eval -----------------------------------------------------------------

struct EvalArgs {
    std::string ckpt, data, world, report, slices, level;
};

int cmd_eval(const Globals& g, const EvalArgs& a, std::ostream& out, const Logger& log) {
    const RunConfig c = load_config(g);
    const World w = load_world(a.world);
    const HierarchicalPolicy policy = load_policy(a.ckpt);
    if (!(policy.structure() == PolicyStructure::from_world(w))) throw DataError("checkpoint does not match world");
    const auto users = load_records(a.data, w.taxonomy);
    std::vector<SliceDef> slices;
    for (const auto& name : split(a.slices.empty() ? c.get("eval", "slices", "cold_start") : a.slices, ','))
        slices.push_back(slice_by_name(name));
    const RankLevel level = parse_rank_level(a.level.empty() ? c.get("eval", "level", "category") : a.level);
    const EvalReport rep = evaluate(policy, w, users, slices, level);
    const auto j = report_to_json(rep);
    if (!a.report.empty()) write_json(a.report, j);
    log.info("evaluated " + std::to_string(rep.overall.n_examples) + " examples at " + std::string(to_string(level)));
    out << j.dump() << '\n';
    return 0;
}

// ---- infer ----------------------------------------------------------------

struct InferArgs {
    std::string backend, fixtures, user, context, taxonomy, out;
};

SpatioTemporalContext override_context(const SpatioTemporalContext& base, const std::string& spec,
                                       std::int64_t tz) {
    const auto parts = split(spec, ',');
    if (parts.size() != 2) throw DataError("--context expects \"hour,zone\", got '" + spec + "'");
    int hour = -1;
    const auto [p, ec] = std::from_chars(parts[0].data(), parts[0].data() + parts[0].size(), hour);
    if (ec != std::errc{} || p != parts[0].data() + parts[0].size() || hour < 0 || hour > 23)
        throw DataError("--context hour must be 0..23, got '" + parts[0] + "'");
    const std::int64_t local = base.timestamp + tz;
    const std::int64_t day = local - ((local % 86400) + 86400) % 86400;
    return SpatioTemporalContext::make(day + hour * 3600 - tz, base.latitude, base.longitude,
                                       parse_location_type(parts[1]), tz);
}

int cmd_infer(const Globals& g, const InferArgs& a, std::ostream& out, const Logger& log) {
    const RunConfig c = load_config(g);
    const Taxonomy tax = load_taxonomy(a.taxonomy);
    if (!std::filesystem::is_directory(a.fixtures)) throw DataError("file not found: " + a.fixtures);
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::directory_iterator(a.fixtures))
        if (e.path().extension() == ".json") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    std::optional<CaseFixture> fixture;
    for (const auto& f : files) {
        const auto j = read_json_file(f.string());
        if (!j.is_object() || !j.contains("user") || !j.contains("responses")) continue;
        auto fx = load_case_fixture(f.string(), tax);
        if (fx.user.user_id == a.user) {
            fixture = std::move(fx);
            break;
        }
    }
    if (!fixture) throw DataError("no fixture for user '" + a.user + "' in " + a.fixtures);
    const SpatioTemporalContext ctx =
        a.context.empty() ? fixture->context : override_context(fixture->context, a.context, fixture->user.tz_offset_s);

    const std::string backend_name = a.backend.empty() ? c.get("agent", "backend", "stub") : a.backend;
    std::unique_ptr<ChatBackend> backend;
    std::unique_ptr<Embedder> embedder;
    if (backend_name == "stub") {
        backend = std::make_unique<StubBackend>(fixture->responses);
        embedder = hash_embedder(c);
    } else if (backend_name == "http") {
        const std::string base = c.get("agent", "base_url", "");
        if (base.empty()) throw ConfigError("config [agent] base_url is required for the http backend");
        const auto timeout = std::chrono::seconds(c.get_int("agent", "timeout_s", 60));
        const std::string key = api_key_from_env();
        if (key.empty()) log.warn("NEEDFORGE_API_KEY is not set");
        backend = std::make_unique<HttpChatBackend>(make_http_transport(base, timeout), c.get("agent", "model", ""), key);
        const std::string embed_model = c.get("agent", "embed_model", "");
        if (embed_model.empty()) {
            embedder = hash_embedder(c);
        } else {
            embedder = std::make_unique<CachedEmbedder>(std::make_shared<HttpEmbedder>(
                make_http_transport(base, timeout), embed_model, key,
                static_cast<std::size_t>(c.get_int("agent", "embed_dim", 1024))));
        }
    } else {
        throw ConfigError("unknown backend: " + backend_name);
    }
    SamplingConfig sampling = sampling_config(c);
    sampling.n = 1;
    const PipelineResult res = run_pipeline(*backend, *embedder, tax, fixture->user, ctx, sampling);
    for (const auto& s : res.transcript.steps)
        log.info(std::string(to_string(s.step)) + " -> " + s.resolution.label + " (" + s.resolution.method + ")");
    auto j = transcript_to_json(res.transcript, res.decision, tax);
    if (!a.out.empty()) write_text_file(a.out, j.dump() + "\n");
    out << j["decision"].dump() << '\n';
    return 0;
}

// ---- score ----------------------------------------------------------------

struct ScoreArgs {
    std::string input, taxonomy, report;
};

int cmd_score(const Globals& g, const ScoreArgs& a, std::ostream& out, const Logger& log) {
    const RunConfig c = load_config(g);
    const Taxonomy tax = load_taxonomy(a.taxonomy);
    std::vector<ScoredOutput> outputs;
    std::vector<StageTruths> truths;
    load_scoring_file(a.input, outputs, truths);
    const auto embedder = hash_embedder(c);
    const ScoreReport rep = score_transcripts(outputs, truths, reward_params(c), tax, *embedder);
    const auto j = score_report_to_json(rep);
    if (!a.report.empty()) write_json(a.report, j);
    log.info("scored " + std::to_string(rep.n) + " outputs");
    nlohmann::json summary = j;
    summary.erase("items");
    out << summary.dump() << '\n';
    return 0;
}

// ---- stats ----------------------------------------------------------------

struct StatsArgs {
    std::string data, taxonomy, counts, out;
};

int cmd_stats(const Globals&, const StatsArgs& a, std::ostream& out, const Logger& log) {
    DatasetStats st;
    if (!a.counts.empty()) {
        const auto parts = split(a.counts, ',');
        if (parts.size() != 3) throw DataError("--counts expects users,categories,interactions");
        std::int64_t v[3];
        for (int i = 0; i < 3; ++i) {
            const auto [p, ec] = std::from_chars(parts[i].data(), parts[i].data() + parts[i].size(), v[i]);
            if (ec != std::errc{} || p != parts[i].data() + parts[i].size())
                throw DataError("--counts: not an integer: " + parts[i]);
        }
        st = dataset_stats_from_counts(v[0], v[1], v[2]);
    } else {
        if (a.data.empty() || a.taxonomy.empty()) throw DataError("stats needs --data and --taxonomy, or --counts");
        const Taxonomy tax = load_taxonomy(a.taxonomy);
        std::size_t bad = 0;
        const auto records = load_records(a.data, tax);
        for (const auto& r : records) bad += validate_record(r, tax).violations.size();
        if (bad > 0) log.warn(std::to_string(bad) + " validation violations");
        st = dataset_stats(records, tax);
    }
    const auto j = stats_to_json(st);
    if (!a.out.empty()) write_json(a.out, j);
    out << j.dump() << '\n';
    return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"needforge: hierarchical need-driven recommendation toolkit", "needforge"};
    app.require_subcommand(1);
    Globals g;
    std::uint64_t seed = 0;
    auto* seed_opt = app.add_option("--seed", seed, "Base seed for every seeded component");
    app.add_option("--config", g.config_path, "INI run configuration");
    app.add_option("--jobs", g.jobs, "Worker cap")->check(CLI::PositiveNumber);
    app.add_option("--log-level", g.log_level, "debug|info|warn|error")
        ->check(CLI::IsMember({"debug", "info", "warn", "error"}));

    CurateArgs ca;
    auto* curate = app.add_subcommand("curate", "Cluster, prune and resample a dataset");
    curate->add_option("--input", ca.input, "Dataset JSONL")->required();
    curate->add_option("--taxonomy", ca.taxonomy, "Taxonomy or world JSON")->required();
    curate->add_option("--out", ca.out, "Curated dataset JSONL")->required();
    curate->add_option("--report", ca.report, "Cluster report JSON");

    GenWorldArgs ga;
    int n_users = 0;
    auto* gen = app.add_subcommand("gen-world", "Generate a synthetic world and users");
    gen->add_option("--spec", ga.spec, "World spec JSON (defaults to the [world] section)");
    gen->add_option("--out", ga.out, "World JSON")->required();
    gen->add_option("--users", ga.users, "Users JSONL");
    auto* n_users_opt = gen->add_option("--n-users", n_users, "Number of users")->check(CLI::PositiveNumber);

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "GRPO curriculum training");
    train->add_option("--world", ta.world, "World JSON")->required();
    train->add_option("--plan", ta.plan, "INI overrides for [grpo], [curriculum] and [policy]");
    train->add_option("--out", ta.out, "Checkpoint directory");
    train->add_option("--stats", ta.stats, "Per-step CSV");
    train->add_option("--data", ta.data, "Training users JSONL (generated from the world when absent)");
    train->add_option("--init", ta.init, "Initial checkpoint");

    EvalArgs ea;
    auto* ev = app.add_subcommand("eval", "Ranking metrics for a checkpoint");
    ev->add_option("--ckpt", ea.ckpt, "Checkpoint JSON")->required();
    ev->add_option("--data", ea.data, "Test users JSONL")->required();
    ev->add_option("--world", ea.world, "World JSON")->required();
    ev->add_option("--report", ea.report, "Report JSON");
    ev->add_option("--slices", ea.slices, "Comma-separated slices (cold_start, len_<n>)");
    ev->add_option("--level", ea.level, "category|behavior");

    InferArgs ia;
    auto* inf = app.add_subcommand("infer", "Three-step agent pipeline for one user");
    inf->add_option("--backend", ia.backend, "stub|http")->check(CLI::IsMember({"stub", "http"}));
    inf->add_option("--fixtures", ia.fixtures, "Directory of case fixtures")->required();
    inf->add_option("--user", ia.user, "User id")->required();
    inf->add_option("--context", ia.context, "\"hour,zone\" override");
    inf->add_option("--taxonomy", ia.taxonomy, "Taxonomy JSON")->required();
    inf->add_option("--out", ia.out, "Transcript JSONL");

    ScoreArgs sa;
    auto* score = app.add_subcommand("score", "Offline reward scoring of model outputs");
    score->add_option("--input", sa.input, "Outputs JSONL")->required();
    score->add_option("--taxonomy", sa.taxonomy, "Taxonomy JSON")->required();
    score->add_option("--report", sa.report, "Report JSON");

    StatsArgs st;
    auto* stats = app.add_subcommand("stats", "Dataset statistics");
    stats->add_option("--data", st.data, "Users JSONL");
    stats->add_option("--taxonomy", st.taxonomy, "Taxonomy JSON");
    stats->add_option("--counts", st.counts, "users,categories,interactions");
    stats->add_option("--out", st.out, "Stats JSON");

    std::vector<std::string> argv_store{"needforge"};
    argv_store.insert(argv_store.end(), args.begin(), args.end());
    std::vector<char*> argv;
    for (auto& s : argv_store) argv.push_back(s.data());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }
    if (*seed_opt) g.seed = seed;
    if (*n_users_opt) ga.n_users = n_users;

    const CLI::App* sub = app.get_subcommands().front();
    Logger log(err, parse_log_level(g.log_level), sub->get_name());
    try {
        if (sub == curate) return cmd_curate(g, ca, out, log);
        if (sub == gen) return cmd_gen_world(g, ga, out, log);
        if (sub == train) return cmd_train(g, ta, out, log);
        if (sub == ev) return cmd_eval(g, ea, out, log);
        if (sub == inf) return cmd_infer(g, ia, out, log);
        if (sub == score) return cmd_score(g, sa, out, log);
        if (sub == stats) return cmd_stats(g, st, out, log);
    } catch (const std::exception& e) {
        log.error(e.what());
        return 1;
    }
    return 2;
}

int run(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return run(args, std::cout, std::cerr);
}

}  // namespace needforge::cli
