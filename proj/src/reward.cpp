#include "needforge/reward.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <mutex>

#include <json.hpp>

#include "needforge/random.hpp"

namespace needforge {

std::vector<std::vector<double>> Embedder::embed_batch(const std::vector<std::string>& texts) const {
    std::vector<std::vector<double>> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(embed(t));
    return out;
}

double cosine(std::span<const double> a, std::span<const double> b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na <= 0.0 || nb <= 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

HashEmbedder::HashEmbedder(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
    if (dim < 8) throw std::invalid_argument("hash embedder dim must be >= 8");
}

std::vector<double> HashEmbedder::embed(std::string_view text) const {
    const std::string padded = " " + normalize_label(text) + " ";
    std::vector<double> v(dim_, 0.0);
    auto bucket = [&](std::string_view gram) {
        std::uint64_t h = 0xcbf29ce484222325ULL ^ mix_seed(seed_);
        for (unsigned char ch : gram) {
            h ^= ch;
            h *= 0x100000001b3ULL;
        }
        return static_cast<std::size_t>(mix_seed(h) % dim_);
    };
    if (padded.size() < 3) {
        v[bucket("\x01")] = 1.0;
        return v;
    }
    for (std::size_t i = 0; i + 3 <= padded.size(); ++i) v[bucket(std::string_view(padded).substr(i, 3))] += 1.0;
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : v) x /= norm;
    return v;
}

std::vector<double> CachedEmbedder::embed(std::string_view text) const {
    {
        std::shared_lock lock(mu_);
        if (auto it = memo_.find(text); it != memo_.end()) return it->second;
    }
    auto v = inner_->embed(text);
    std::unique_lock lock(mu_);
    return memo_.emplace(std::string(text), std::move(v)).first->second;
}

std::string_view to_string(RewardStage s) {
    switch (s) {
        case RewardStage::Need: return "need";
        case RewardStage::Category: return "category";
        case RewardStage::FullPath: return "full_path";
    }
    return "unknown";
}

RewardStage parse_reward_stage(std::string_view s) {
    if (s == "need") return RewardStage::Need;
    if (s == "category") return RewardStage::Category;
    if (s == "full_path") return RewardStage::FullPath;
    throw DataError("unknown reward stage: " + std::string(s));
}

const RewardWeights& RewardParams::weights(RewardStage s) const {
    switch (s) {
        case RewardStage::Need: return need;
        case RewardStage::Category: return category;
        case RewardStage::FullPath: return full_path;
    }
    return full_path;
}

void RewardParams::validate() const {
    for (const auto* w : {&need, &category, &full_path})
        if (w->match < 0 || w->fmt < 0 || w->len < 0) throw DataError("reward weights must be >= 0");
    if (!(len_min < len_max)) throw DataError("reward: need len_min < len_max");
    if (!(alpha >= 0)) throw DataError("reward: alpha must be >= 0");
    if (!(decay_steps > 0)) throw DataError("reward: T must be > 0");
}

std::string normalize_label(std::string_view text) {
    std::string out;
    bool pending_space = false;
    for (unsigned char ch : text) {
        if (std::isspace(ch)) {
            pending_space = !out.empty();
            continue;
        }
        if (pending_space) out.push_back(' ');
        pending_space = false;
        out.push_back(static_cast<char>(std::tolower(ch)));
    }
    return out;
}

std::size_t count_tokens(std::string_view text) {
    std::size_t n = 0;
    bool in_token = false;
    for (unsigned char ch : text) {
        const bool space = std::isspace(ch) != 0;
        if (!space && !in_token) ++n;
        in_token = !space;
    }
    return n;
}

int format_reward(std::string_view raw_output, const std::vector<std::string>& required_keys) {
    auto j = nlohmann::json::parse(raw_output.begin(), raw_output.end(), nullptr, false);
    if (j.is_discarded() || !j.is_object()) return 0;
    for (const auto& k : required_keys) {
        auto it = j.find(k);
        if (it == j.end() || !it->is_string()) return 0;
    }
    return 1;
}

double length_reward(bool correct, double length, double step, const RewardParams& p) {
    if (!correct) return 0.0;
    const double ramp = 1.0 - (length - p.len_min) / (p.len_max - p.len_min);
    return p.alpha * std::exp(-step / p.decay_steps) * std::min(1.0, std::max(0.0, ramp));
}

int need_match_reward(std::string_view pred, std::string_view truth) {
    return normalize_label(pred) == normalize_label(truth) ? 1 : 0;
}

int behavior_match_reward(std::string_view pred, std::string_view truth) {
    return need_match_reward(pred, truth);
}

int nearest_candidate(std::span<const double> embedding, const std::vector<std::vector<double>>& candidates) {
    int best = -1;
    double best_cos = -INFINITY;
    for (int i = 0; i < static_cast<int>(candidates.size()); ++i) {
        const double c = cosine(embedding, candidates[i]);
        if (c > best_cos) {
            best_cos = c;
            best = i;
        }
    }
    return best;
}

double category_reward(std::string_view pred, std::string_view truth_label, const Taxonomy& taxonomy,
                       const Embedder& embedder) {
    if (taxonomy.num_categories() == 0) throw DataError("category_reward: empty taxonomy");
    const auto truth_id = taxonomy.find_category(truth_label);
    if (!truth_id) throw DataError("category_reward: truth label not in taxonomy: " + std::string(truth_label));
    const auto e_pred = embedder.embed(pred);
    std::vector<std::vector<double>> cands;
    cands.reserve(taxonomy.num_categories());
    for (const auto& c : taxonomy.categories()) cands.push_back(embedder.embed(c.label));
    const double truth_cos = cosine(e_pred, cands[*truth_id]);
    // A truth tied for the top cosine counts as the nearest candidate.
    if (truth_cos >= cosine(e_pred, cands[nearest_candidate(e_pred, cands)])) return 1.0;
    return std::max(0.0, truth_cos);
}

double match_reward(RewardStage stage, const StagePredictions& pred, const StageTruths& truth,
                    const Taxonomy& taxonomy, const Embedder& embedder) {
    auto need = [&] { return pred.need ? need_match_reward(*pred.need, truth.need) : 0.0; };
    auto cat = [&] {
        return pred.category ? category_reward(*pred.category, truth.category, taxonomy, embedder) : 0.0;
    };
    auto beh = [&] { return pred.behavior ? behavior_match_reward(*pred.behavior, truth.behavior) : 0.0; };
    switch (stage) {
        case RewardStage::Need: return need();
        case RewardStage::Category: return cat();
        case RewardStage::FullPath: return (need() + cat() + beh()) / 3.0;
    }
    return 0.0;
}

RewardBreakdown combine_reward(RewardStage stage, double r_match, double r_fmt, double length,
                               double step, const RewardParams& p) {
    const auto& w = p.weights(stage);
    RewardBreakdown out;
    out.r_match = r_match;
    out.r_fmt = r_fmt;
    out.correct = r_match > 0.0;
    out.r_len = length_reward(out.correct, length, step, p);
    out.total = w.match * out.r_match + w.fmt * out.r_fmt + w.len * out.r_len;
    return out;
}

RewardBreakdown total_reward(RewardStage stage, const StagePredictions& pred, const StageTruths& truth,
                             double r_fmt, double length, double step, const RewardParams& p,
                             const Taxonomy& taxonomy, const Embedder& embedder) {
    return combine_reward(stage, match_reward(stage, pred, truth, taxonomy, embedder), r_fmt, length, step, p);
}

CategoryRewardTable::CategoryRewardTable(const Taxonomy& taxonomy, const Embedder& embedder)
    : n_(taxonomy.num_categories()), table_(static_cast<std::size_t>(n_) * n_) {
    std::vector<std::vector<double>> emb;
    for (const auto& c : taxonomy.categories()) emb.push_back(embedder.embed(c.label));
    for (int p = 0; p < n_; ++p) {
        const double best = cosine(emb[p], emb[nearest_candidate(emb[p], emb)]);
        for (int t = 0; t < n_; ++t) {
            const double c = cosine(emb[p], emb[t]);
            table_[static_cast<std::size_t>(p) * n_ + t] = c >= best ? 1.0 : std::max(0.0, c);
        }
    }
}

}  // namespace needforge
