#include "needforge/policy.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <stdexcept>

#include "needforge/envsim.hpp"
#include "needforge/reward.hpp"

namespace needforge {

namespace {

constexpr double kMinTemperature = 1e-6;
constexpr int kCheckpointVersion = 1;

int argmax_lowest(std::span<const double> v) {
    int best = -1;
    for (int i = 0; i < static_cast<int>(v.size()); ++i)
        if (best < 0 || v[i] > v[best]) best = i;
    return best;
}

void check_id(int id, int n, const char* what) {
    if (id < 0 || id >= n) throw std::out_of_range(std::string(what) + " id out of range: " + std::to_string(id));
}

nlohmann::json matrix_to_json(const Eigen::MatrixXd& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        std::vector<double> row(static_cast<std::size_t>(m.cols()));
        for (Eigen::Index c = 0; c < m.cols(); ++c) row[c] = m(r, c);
        rows.push_back(row);
    }
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", rows}};
}

Eigen::MatrixXd matrix_from_json(const nlohmann::json& j) {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    Eigen::MatrixXd m(rows, cols);
    const auto& data = j.at("data");
    if (static_cast<Eigen::Index>(data.size()) != rows) throw DataError("checkpoint: matrix row count mismatch");
    for (Eigen::Index r = 0; r < rows; ++r) {
        const auto& row = data.at(r);
        if (static_cast<Eigen::Index>(row.size()) != cols) throw DataError("checkpoint: matrix column count mismatch");
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row.at(c).get<double>();
    }
    return m;
}

}  // namespace

void SamplingConfig::validate() const {
    if (!(temperature > 0.0)) throw DataError("sampling: temperature must be > 0");
    if (!(top_p > 0.0 && top_p <= 1.0)) throw DataError("sampling: top_p must be in (0,1]");
    if (n < 1) throw DataError("sampling: n must be >= 1");
}

StateFeatures make_state(const FeatureLayout& layout, int archetype, const SpatioTemporalContext& context,
                         std::span<const Interaction> history) {
    StateFeatures s(static_cast<std::size_t>(layout.dim()), 0.0);
    s[context.time_bucket] = 1.0;
    s[kNumTimeBuckets + static_cast<int>(context.location_type)] = 1.0;
    const int arch_off = kNumTimeBuckets + kNumLocationTypes;
    if (archetype >= 0 && archetype < layout.n_archetypes) s[arch_off + archetype] = 1.0;
    const int hist_off = arch_off + layout.n_archetypes;
    if (!history.empty()) {
        const double w = 1.0 / static_cast<double>(history.size());
        for (const auto& it : history)
            if (it.category_id >= 0 && it.category_id < layout.n_categories) s[hist_off + it.category_id] += w;
    }
    s.back() = 1.0;
    return s;
}

std::string_view to_string(PolicyMode m) { return m == PolicyMode::Flat ? "flat" : "hierarchical"; }

PolicyMode parse_policy_mode(std::string_view s) {
    if (s == "hierarchical") return PolicyMode::Hierarchical;
    if (s == "flat") return PolicyMode::Flat;
    throw DataError("unknown policy mode: " + std::string(s));
}

PolicyStructure PolicyStructure::from_world(const World& world) {
    const auto& tax = world.taxonomy;
    PolicyStructure st;
    st.n_needs = tax.num_needs();
    st.n_categories = tax.num_categories();
    st.n_behaviors = tax.num_behaviors();
    st.layout = {static_cast<int>(world.archetypes.size()), tax.num_categories()};
    for (const auto& b : tax.behaviors()) st.behavior_category.push_back(b.category_id);
    if (world.spec.support_masks) {
        st.category_support.resize(static_cast<std::size_t>(st.n_needs) * st.n_categories);
        for (int i = 0; i < st.n_needs; ++i)
            for (int c = 0; c < st.n_categories; ++c)
                st.category_support[static_cast<std::size_t>(i) * st.n_categories + c] =
                    world.category_supported(i, c) ? 1 : 0;
    }
    return st;
}

PolicyParams& PolicyParams::operator+=(const PolicyParams& o) {
    if (o.need.size()) need += o.need;
    if (o.category.size()) category += o.category;
    if (o.behavior.size()) behavior += o.behavior;
    return *this;
}

PolicyParams& PolicyParams::operator*=(double s) {
    need *= s;
    category *= s;
    behavior *= s;
    return *this;
}

double PolicyParams::squared_norm() const {
    return need.squaredNorm() + category.squaredNorm() + behavior.squaredNorm();
}

bool PolicyParams::all_finite() const {
    return need.allFinite() && category.allFinite() && behavior.allFinite();
}

void PolicyParams::set_zero() {
    need.setZero();
    category.setZero();
    behavior.setZero();
}

std::vector<double> tempered_softmax(std::span<const double> scores, double temperature,
                                     std::span<const char> mask) {
    const double t = std::max(temperature, kMinTemperature);
    std::vector<double> p(scores.size(), 0.0);
    double m = -INFINITY;
    for (std::size_t i = 0; i < scores.size(); ++i)
        if (mask.empty() || mask[i]) m = std::max(m, scores[i] / t);
    double z = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (!mask.empty() && !mask[i]) continue;
        p[i] = std::exp(scores[i] / t - m);
        z += p[i];
    }
    for (double& v : p) v /= z;
    return p;
}

std::vector<int> nucleus(std::span<const double> probs, double top_p) {
    std::vector<int> order;
    for (int i = 0; i < static_cast<int>(probs.size()); ++i)
        if (probs[i] > 0.0) order.push_back(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return probs[a] > probs[b]; });
    double mass = 0.0;
    std::size_t keep = 0;
    while (keep < order.size()) {
        mass += probs[order[keep++]];
        if (mass >= top_p) break;
    }
    // Include every token tied with the last one kept.
    while (keep < order.size() && probs[order[keep]] == probs[order[keep - 1]]) ++keep;
    order.resize(keep);
    return order;
}

double categorical_entropy(std::span<const double> probs) {
    double h = 0.0;
    for (double p : probs)
        if (p > 0.0) h -= p * std::log(p);
    return std::max(0.0, h);
}

HierarchicalPolicy::HierarchicalPolicy(PolicyStructure structure, PolicyMode mode, SamplingConfig sampling)
    : structure_(std::move(structure)), mode_(mode), sampling_(sampling) {
    sampling_.validate();
    const int d = structure_.feature_dim();
    const auto& st = structure_;
    if (static_cast<int>(st.behavior_category.size()) != st.n_behaviors)
        throw DataError("policy structure: behavior map size mismatch");
    if (mode_ == PolicyMode::Hierarchical) {
        params_.need = Eigen::MatrixXd::Zero(st.n_needs, d);
        params_.category = Eigen::MatrixXd::Zero(st.n_categories, d + st.n_needs);
        params_.behavior = Eigen::MatrixXd::Zero(st.n_behaviors, d + st.n_needs + st.n_categories);
    } else {
        params_.need = Eigen::MatrixXd(0, 0);
        params_.category = Eigen::MatrixXd(0, 0);
        params_.behavior = Eigen::MatrixXd::Zero(st.n_behaviors, d);
    }
}

PolicyParams HierarchicalPolicy::zeros_like() const {
    PolicyParams z;
    z.need = Eigen::MatrixXd::Zero(params_.need.rows(), params_.need.cols());
    z.category = Eigen::MatrixXd::Zero(params_.category.rows(), params_.category.cols());
    z.behavior = Eigen::MatrixXd::Zero(params_.behavior.rows(), params_.behavior.cols());
    return z;
}

double HierarchicalPolicy::temperature() const { return std::max(sampling_.temperature, kMinTemperature); }

Eigen::VectorXd HierarchicalPolicy::base_scores(const Eigen::MatrixXd& w, const StateFeatures& s) const {
    const int d = structure_.feature_dim();
    if (static_cast<int>(s.size()) != d) throw std::invalid_argument("state feature dimension mismatch");
    Eigen::Map<const Eigen::VectorXd> phi(s.data(), d);
    return w.leftCols(d) * phi;
}

std::vector<double> HierarchicalPolicy::need_probs(const StateFeatures& s) const {
    if (mode_ != PolicyMode::Hierarchical) throw std::logic_error("flat policy has no need stage");
    Eigen::VectorXd z = base_scores(params_.need, s);
    return tempered_softmax({z.data(), static_cast<std::size_t>(z.size())}, temperature());
}

std::vector<double> HierarchicalPolicy::category_probs(const StateFeatures& s, int need) const {
    if (mode_ != PolicyMode::Hierarchical) throw std::logic_error("flat policy has no category stage");
    check_id(need, structure_.n_needs, "need");
    const int d = structure_.feature_dim();
    Eigen::VectorXd z = base_scores(params_.category, s) + params_.category.col(d + need);
    std::vector<char> mask;
    if (!structure_.category_support.empty()) {
        const auto* row = structure_.category_support.data() + static_cast<std::size_t>(need) * structure_.n_categories;
        mask.assign(row, row + structure_.n_categories);
    }
    return tempered_softmax({z.data(), static_cast<std::size_t>(z.size())}, temperature(), mask);
}

std::vector<double> HierarchicalPolicy::behavior_probs(const StateFeatures& s, int need, int category) const {
    if (mode_ != PolicyMode::Hierarchical) throw std::logic_error("use flat_probs for flat policies");
    check_id(need, structure_.n_needs, "need");
    check_id(category, structure_.n_categories, "category");
    const int d = structure_.feature_dim();
    Eigen::VectorXd z = base_scores(params_.behavior, s) + params_.behavior.col(d + need) +
                        params_.behavior.col(d + structure_.n_needs + category);
    std::vector<char> mask(structure_.n_behaviors);
    for (int b = 0; b < structure_.n_behaviors; ++b) mask[b] = structure_.behavior_category[b] == category;
    return tempered_softmax({z.data(), static_cast<std::size_t>(z.size())}, temperature(), mask);
}

std::vector<double> HierarchicalPolicy::flat_probs(const StateFeatures& s) const {
    if (mode_ != PolicyMode::Flat) throw std::logic_error("flat_probs on a hierarchical policy");
    Eigen::VectorXd z = base_scores(params_.behavior, s);
    return tempered_softmax({z.data(), static_cast<std::size_t>(z.size())}, temperature());
}

void HierarchicalPolicy::check_decision(const HierarchicalDecision& d, Depth depth) const {
    const auto& st = structure_;
    if (mode_ == PolicyMode::Flat) {
        check_id(d.behavior_id, st.n_behaviors, "behavior");
        return;
    }
    check_id(d.need_id, st.n_needs, "need");
    if (depth >= Depth::Category) check_id(d.category_id, st.n_categories, "category");
    if (depth >= Depth::Behavior) check_id(d.behavior_id, st.n_behaviors, "behavior");
}

StageLogprobs HierarchicalPolicy::stage_logprobs(const StateFeatures& s, const HierarchicalDecision& d,
                                                 Depth depth) const {
    check_decision(d, depth);
    StageLogprobs out;
    if (mode_ == PolicyMode::Flat) {
        out.stage[2] = std::log(flat_probs(s)[d.behavior_id]);
    } else {
        out.stage[0] = std::log(need_probs(s)[d.need_id]);
        if (depth >= Depth::Category) out.stage[1] = std::log(category_probs(s, d.need_id)[d.category_id]);
        if (depth >= Depth::Behavior)
            out.stage[2] = std::log(behavior_probs(s, d.need_id, d.category_id)[d.behavior_id]);
    }
    out.total = out.stage[0] + out.stage[1] + out.stage[2];
    return out;
}

double HierarchicalPolicy::logprob(const StateFeatures& s, const HierarchicalDecision& d, Depth depth) const {
    return stage_logprobs(s, d, depth).total;
}

void HierarchicalPolicy::accumulate_grad(PolicyParams& grad, const StateFeatures& s,
                                         const HierarchicalDecision& d, Depth depth, double scale) const {
    check_decision(d, depth);
    const int dim = structure_.feature_dim();
    const double k = scale / temperature();
    Eigen::Map<const Eigen::VectorXd> phi(s.data(), dim);

    // d log softmax(z/T)_a / dW_r = (1[r = a] - p_r) x / T, for every unmasked row r.
    auto apply = [&](Eigen::MatrixXd& g, const std::vector<double>& probs, int chosen,
                     std::span<const int> extra_cols) {
        for (int r = 0; r < static_cast<int>(probs.size()); ++r) {
            const double coef = k * ((r == chosen ? 1.0 : 0.0) - probs[r]);
            if (coef == 0.0) continue;
            g.row(r).head(dim) += coef * phi.transpose();
            for (int c : extra_cols) g(r, c) += coef;
        }
    };

    if (mode_ == PolicyMode::Flat) {
        apply(grad.behavior, flat_probs(s), d.behavior_id, {});
        return;
    }
    apply(grad.need, need_probs(s), d.need_id, {});
    if (depth >= Depth::Category) {
        const int cols[] = {dim + d.need_id};
        apply(grad.category, category_probs(s, d.need_id), d.category_id, cols);
    }
    if (depth >= Depth::Behavior) {
        const int cols[] = {dim + d.need_id, dim + structure_.n_needs + d.category_id};
        apply(grad.behavior, behavior_probs(s, d.need_id, d.category_id), d.behavior_id, cols);
    }
}

PolicyParams HierarchicalPolicy::grad_logprob(const StateFeatures& s, const HierarchicalDecision& d,
                                              Depth depth) const {
    PolicyParams g = zeros_like();
    accumulate_grad(g, s, d, depth, 1.0);
    return g;
}

std::vector<Rollout> HierarchicalPolicy::sample(const StateFeatures& s, const SamplingConfig& cfg, Rng& rng,
                                                Depth depth) const {
    cfg.validate();
    const bool greedy = cfg.temperature < kMinTemperature;
    auto draw = [&](const std::vector<double>& probs) {
        if (greedy) return argmax_lowest(probs);
        const auto keep = nucleus(probs, cfg.top_p);
        std::vector<double> w(keep.size());
        for (std::size_t i = 0; i < keep.size(); ++i) w[i] = probs[keep[i]];
        return keep[rng.categorical(w)];
    };
    // Sampling uses the request temperature; recorded logprobs use the policy's own.
    std::optional<HierarchicalPolicy> retempered;
    if (std::max(cfg.temperature, kMinTemperature) != temperature()) {
        retempered.emplace(*this);
        retempered->sampling_.temperature = std::max(cfg.temperature, kMinTemperature);
    }
    const HierarchicalPolicy& tempered = retempered ? *retempered : *this;

    std::vector<Rollout> out;
    out.reserve(cfg.n);
    const std::vector<double> first = mode_ == PolicyMode::Flat ? tempered.flat_probs(s) : tempered.need_probs(s);
    for (int r = 0; r < cfg.n; ++r) {
        Rollout ro;
        auto& dec = ro.decision;
        if (mode_ == PolicyMode::Flat) {
            dec.behavior_id = draw(first);
            dec.category_id = structure_.behavior_category[dec.behavior_id];
        } else {
            dec.need_id = draw(first);
            if (depth >= Depth::Category) dec.category_id = draw(tempered.category_probs(s, dec.need_id));
            if (depth >= Depth::Behavior)
                dec.behavior_id = draw(tempered.behavior_probs(s, dec.need_id, dec.category_id));
        }
        ro.logprob = stage_logprobs(s, dec, depth);
        out.push_back(std::move(ro));
    }
    return out;
}

EntropyBreakdown HierarchicalPolicy::entropy(const StateFeatures& s) const {
    EntropyBreakdown e;
    if (mode_ == PolicyMode::Flat) {
        e.behavior = categorical_entropy(flat_probs(s));
        e.total = e.behavior;
        return e;
    }
    const auto pn = need_probs(s);
    e.need = categorical_entropy(pn);
    const int dim = structure_.feature_dim();
    const Eigen::VectorXd beh_base = base_scores(params_.behavior, s);
    const double t = temperature();
    for (int i = 0; i < structure_.n_needs; ++i) {
        if (pn[i] == 0.0) continue;
        const auto pc = category_probs(s, i);
        e.category += pn[i] * categorical_entropy(pc);
        for (int c = 0; c < structure_.n_categories; ++c) {
            if (pc[c] == 0.0) continue;
            const auto& members = structure_.behavior_category;
            std::vector<double> z;
            for (int b = 0; b < structure_.n_behaviors; ++b) {
                if (members[b] != c) continue;
                z.push_back(beh_base(b) + params_.behavior(b, dim + i) +
                            params_.behavior(b, dim + structure_.n_needs + c));
            }
            e.behavior += pn[i] * pc[c] * categorical_entropy(tempered_softmax(z, t));
        }
    }
    e.total = e.need + e.category + e.behavior;
    return e;
}

Marginals HierarchicalPolicy::marginals(const StateFeatures& s, Depth depth) const {
    Marginals m;
    const auto& st = structure_;
    m.category.assign(st.n_categories, 0.0);
    if (mode_ == PolicyMode::Flat) {
        m.behavior = flat_probs(s);
        for (int b = 0; b < st.n_behaviors; ++b) m.category[st.behavior_category[b]] += m.behavior[b];
        return m;
    }
    m.need = need_probs(s);
    if (depth >= Depth::Behavior) m.behavior.assign(st.n_behaviors, 0.0);
    for (int i = 0; i < st.n_needs; ++i) {
        if (m.need[i] == 0.0) continue;
        const auto pc = category_probs(s, i);
        for (int c = 0; c < st.n_categories; ++c) {
            const double pic = m.need[i] * pc[c];
            if (pic == 0.0) continue;
            m.category[c] += pic;
            if (depth < Depth::Behavior) continue;
            const auto pb = behavior_probs(s, i, c);
            for (int b = 0; b < st.n_behaviors; ++b) m.behavior[b] += pic * pb[b];
        }
    }
    return m;
}

bool operator==(const HierarchicalPolicy& a, const HierarchicalPolicy& b) {
    return a.structure_ == b.structure_ && a.mode_ == b.mode_ && a.sampling_ == b.sampling_ &&
           a.stage_tag_ == b.stage_tag_ && a.params_.need == b.params_.need &&
           a.params_.category == b.params_.category && a.params_.behavior == b.params_.behavior;
}

void apply_label_prior(HierarchicalPolicy& policy, const Taxonomy& taxonomy, const Embedder& embedder,
                       double strength) {
    if (policy.mode() != PolicyMode::Hierarchical || strength == 0.0) return;
    const auto& st = policy.structure();
    const int d = st.feature_dim();
    auto& p = policy.mutable_params();
    std::vector<std::vector<double>> need_emb, cat_emb;
    for (const auto& n : taxonomy.needs()) need_emb.push_back(embedder.embed(n.label));
    for (const auto& c : taxonomy.categories()) cat_emb.push_back(embedder.embed(c.label));
    for (int c = 0; c < st.n_categories; ++c)
        for (int i = 0; i < st.n_needs; ++i) p.category(c, d + i) = strength * cosine(cat_emb[c], need_emb[i]);
    for (int b = 0; b < st.n_behaviors; ++b) {
        const auto e = embedder.embed(taxonomy.behaviors()[b].label);
        for (int c = 0; c < st.n_categories; ++c) p.behavior(b, d + st.n_needs + c) = strength * cosine(e, cat_emb[c]);
    }
}

nlohmann::json policy_to_json(const HierarchicalPolicy& policy) {
    const auto& st = policy.structure();
    nlohmann::json structure = {{"n_needs", st.n_needs},
                                {"n_categories", st.n_categories},
                                {"n_behaviors", st.n_behaviors},
                                {"n_archetypes", st.layout.n_archetypes},
                                {"behavior_category", st.behavior_category},
                                {"category_support", std::vector<int>(st.category_support.begin(), st.category_support.end())}};
    const auto& s = policy.sampling();
    nlohmann::json j = {{"format", "needforge-policy"},
                        {"version", kCheckpointVersion},
                        {"stage", policy.stage_tag()},
                        {"mode", to_string(policy.mode())},
                        {"structure", structure},
                        {"sampling", {{"temperature", s.temperature}, {"top_p", s.top_p}, {"n", s.n}}}};
    j["weights"]["behavior"] = matrix_to_json(policy.params().behavior);
    if (policy.mode() == PolicyMode::Hierarchical) {
        j["weights"]["need"] = matrix_to_json(policy.params().need);
        j["weights"]["category"] = matrix_to_json(policy.params().category);
    }
    return j;
}

HierarchicalPolicy policy_from_json(const nlohmann::json& j) {
    try {
        if (j.value("format", std::string{}) != "needforge-policy") throw DataError("not a policy checkpoint");
        if (j.at("version").get<int>() != kCheckpointVersion) throw DataError("unsupported checkpoint version");
        const auto& js = j.at("structure");
        PolicyStructure st;
        st.n_needs = js.at("n_needs").get<int>();
        st.n_categories = js.at("n_categories").get<int>();
        st.n_behaviors = js.at("n_behaviors").get<int>();
        st.layout = {js.at("n_archetypes").get<int>(), st.n_categories};
        st.behavior_category = js.at("behavior_category").get<std::vector<int>>();
        for (int v : js.at("category_support").get<std::vector<int>>()) st.category_support.push_back(static_cast<char>(v));
        SamplingConfig s{j.at("sampling").at("temperature").get<double>(), j.at("sampling").at("top_p").get<double>(),
                         j.at("sampling").at("n").get<int>()};
        HierarchicalPolicy policy(st, parse_policy_mode(j.at("mode").get<std::string>()), s);
        policy.set_stage_tag(j.at("stage").get<std::string>());
        auto& p = policy.mutable_params();
        auto load = [&](const char* key, Eigen::MatrixXd& m) {
            auto loaded = matrix_from_json(j.at("weights").at(key));
            if (loaded.rows() != m.rows() || loaded.cols() != m.cols())
                throw DataError(std::string("checkpoint: ") + key + " matrix has the wrong shape");
            m = std::move(loaded);
        };
        load("behavior", p.behavior);
        if (policy.mode() == PolicyMode::Hierarchical) {
            load("need", p.need);
            load("category", p.category);
        }
        if (!p.all_finite()) throw DataError("checkpoint: non-finite weights");
        return policy;
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("malformed checkpoint: ") + e.what());
    }
}

void save_policy(const std::string& path, const HierarchicalPolicy& policy) {
    write_text_file(path, policy_to_json(policy).dump() + "\n");
}

HierarchicalPolicy load_policy(const std::string& path) { return policy_from_json(read_json_file(path)); }

}  // namespace needforge
