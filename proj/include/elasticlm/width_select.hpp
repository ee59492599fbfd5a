#pragma once

// Importance-driven width shrinking: per-channel fluctuation scores over a
// calibration set, per-layer normalization, a global group ranking, nested
// retention masks per width ratio, and output-compensation biases.

#include <elasticlm/model_config.hpp>

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace elm {

enum class BlockKind { attention = 0, ffn = 1 };

inline const char* block_kind_name(BlockKind k) {
  return k == BlockKind::attention ? "attention" : "ffn";
}

// Running mean / variance per input channel of one block's last matrix,
// accumulated over (batch, token) with Chan's parallel-merge form so that
// concurrent collection over calibration slices is well defined.
struct BlockStats {
  int64_t count = 0;
  std::vector<double> mean;
  std::vector<double> m2;

  explicit BlockStats(size_t channels = 0) : mean(channels, 0.0), m2(channels, 0.0) {}

  size_t channels() const { return mean.size(); }

  void update_row(std::span<const double> row) {
    if (row.size() != mean.size())
      throw std::invalid_argument("BlockStats: row width mismatch");
    ++count;
    for (size_t i = 0; i < row.size(); ++i) {
      double delta = row[i] - mean[i];
      mean[i] += delta / double(count);
      m2[i] += delta * (row[i] - mean[i]);
    }
  }

  void merge(const BlockStats& other) {
    if (other.channels() != channels())
      throw std::invalid_argument("BlockStats: merge width mismatch");
    if (other.count == 0) return;
    if (count == 0) {
      *this = other;
      return;
    }
    int64_t n = count + other.count;
    for (size_t i = 0; i < mean.size(); ++i) {
      double delta = other.mean[i] - mean[i];
      m2[i] += other.m2[i] + delta * delta * double(count) * double(other.count) / double(n);
      mean[i] += delta * double(other.count) / double(n);
    }
    count = n;
  }

  // Population variance (divide by count).
  double variance(size_t i) const { return count > 0 ? m2[i] / double(count) : 0.0; }
};

struct ActivationStats {
  int n_layers = 0;
  std::vector<BlockStats> attention;  // channels = n_heads * d_head
  std::vector<BlockStats> ffn;        // channels = d_ffn

  ActivationStats() = default;
  ActivationStats(const ModelConfig& cfg)
      : n_layers(cfg.n_layers),
        attention(size_t(cfg.n_layers), BlockStats(size_t(cfg.attn_width()))),
        ffn(size_t(cfg.n_layers), BlockStats(size_t(cfg.d_ffn))) {}

  BlockStats& block(int layer, BlockKind kind) {
    return kind == BlockKind::attention ? attention[size_t(layer)] : ffn[size_t(layer)];
  }
  const BlockStats& block(int layer, BlockKind kind) const {
    return kind == BlockKind::attention ? attention[size_t(layer)] : ffn[size_t(layer)];
  }

  int64_t token_count() const { return n_layers > 0 ? attention[0].count : 0; }

  void merge(const ActivationStats& other) {
    if (other.n_layers != n_layers) throw std::invalid_argument("ActivationStats: layer mismatch");
    for (int l = 0; l < n_layers; ++l) {
      attention[size_t(l)].merge(other.attention[size_t(l)]);
      ffn[size_t(l)].merge(other.ffn[size_t(l)]);
    }
  }
};

// F_i = Var_{k,t}(X_i) * ||W_{:,i}||^2 for the last matrix of a block.
// `weight` is row-major [in, out], so the paper's column i is our row i.
inline std::vector<double> fluctuation_scores(const BlockStats& stats,
                                              std::span<const double> weight,
                                              size_t out_dim) {
  size_t in_dim = stats.channels();
  if (weight.size() != in_dim * out_dim)
    throw std::invalid_argument("fluctuation_scores: weight size mismatch for block with " +
                                std::to_string(in_dim) + " input channels");
  std::vector<double> f(in_dim, 0.0);
  for (size_t i = 0; i < in_dim; ++i) {
    double sq = 0.0;
    for (size_t j = 0; j < out_dim; ++j) {
      double w = weight[i * out_dim + j];
      sq += w * w;
    }
    f[i] = stats.variance(i) * sq;
  }
  return f;
}

// B = W ((1 - M) ⊙ X̄): the mean contribution of the pruned input channels,
// added to the block output. `mask` is per input channel.
inline std::vector<double> compensation_bias(std::span<const double> weight, size_t out_dim,
                                             std::span<const uint8_t> mask,
                                             std::span<const double> mean) {
  size_t in_dim = mask.size();
  if (weight.size() != in_dim * out_dim || mean.size() != in_dim)
    throw std::invalid_argument("compensation_bias: mask/stat dimension mismatch");
  std::vector<double> bias(out_dim, 0.0);
  for (size_t i = 0; i < in_dim; ++i) {
    if (mask[i]) continue;
    double x = mean[i];
    if (x == 0.0) continue;
    for (size_t j = 0; j < out_dim; ++j) bias[j] += weight[i * out_dim + j] * x;
  }
  return bias;
}

struct WidthPlan {
  struct Block {
    std::vector<double> raw_scores;   // per input channel
    std::vector<double> norm_scores;  // raw / per-block sum
    std::vector<double> mean;         // calibration mean per channel
    std::vector<double> variance;
    // masks[r]: per group (head for attention, channel for ffn)
    std::vector<std::vector<uint8_t>> masks;
    // biases[r]: length out_dim (d_model); biases[0] is all zero
    std::vector<std::vector<double>> biases;
  };

  struct RankEntry {
    int layer = 0;
    BlockKind kind = BlockKind::attention;
    int group = 0;
    double score = 0.0;
    double variance = 0.0;
    int size = 1;
  };

  int n_layers = 0, n_heads = 0, d_head = 0, d_ffn = 0;
  std::vector<double> ratios;  // descending, ratios[0] == 1
  std::vector<Block> attention, ffn;
  std::vector<RankEntry> ranking;
  std::string fingerprint;

  const Block& block(int layer, BlockKind kind) const {
    return kind == BlockKind::attention ? attention[size_t(layer)] : ffn[size_t(layer)];
  }

  size_t ratio_index(double r) const {
    for (size_t i = 0; i < ratios.size(); ++i)
      if (std::abs(ratios[i] - r) < 1e-12) return i;
    throw std::out_of_range("WidthPlan: ratio not in plan");
  }

  // Per-channel attention mask (head mask expanded to d_head channels each).
  std::vector<uint8_t> attn_channel_mask(int layer, size_t ratio_idx) const {
    const auto& heads = attention[size_t(layer)].masks[ratio_idx];
    std::vector<uint8_t> m(heads.size() * size_t(d_head));
    for (size_t h = 0; h < heads.size(); ++h)
      std::fill_n(m.begin() + int64_t(h) * d_head, d_head, heads[h]);
    return m;
  }

  const std::vector<uint8_t>& ffn_channel_mask(int layer, size_t ratio_idx) const {
    return ffn[size_t(layer)].masks[ratio_idx];
  }

  // Retained channel count across all blocks at one ratio.
  int64_t retained_channels(size_t ratio_idx) const {
    int64_t n = 0;
    for (const auto& b : attention)
      for (uint8_t h : b.masks[ratio_idx]) n += h ? d_head : 0;
    for (const auto& b : ffn)
      for (uint8_t c : b.masks[ratio_idx]) n += c ? 1 : 0;
    return n;
  }

  int64_t total_channels() const { return int64_t(n_layers) * (int64_t(n_heads) * d_head + d_ffn); }
};

namespace detail {

inline std::vector<double> normalize_scores(const std::vector<double>& raw) {
  double sum = 0.0;
  for (double v : raw) sum += v;
  std::vector<double> out(raw.size(), 0.0);
  if (sum > 0.0)
    for (size_t i = 0; i < raw.size(); ++i) out[i] = raw[i] / sum;
  return out;
}

}  // namespace detail

// Global ordering: normalized score descending; zero-variance groups rank
// below positive-variance groups on score ties; then (layer, kind, group).
inline void sort_ranking(std::vector<WidthPlan::RankEntry>& ranking) {
  std::sort(ranking.begin(), ranking.end(), [](const auto& a, const auto& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.variance != b.variance) return a.variance > b.variance;
    if (a.layer != b.layer) return a.layer < b.layer;
    if (a.kind != b.kind) return int(a.kind) < int(b.kind);
    return a.group < b.group;
  });
}

// Greedy prefix of the ranking until at least `target` channels are retained;
// whole groups only, so the overshoot is bounded by one group size.
inline std::vector<uint8_t> retained_prefix(const std::vector<WidthPlan::RankEntry>& ranking,
                                            int64_t target) {
  std::vector<uint8_t> keep(ranking.size(), 0);
  int64_t kept = 0;
  for (size_t i = 0; i < ranking.size() && kept < target; ++i) {
    keep[i] = 1;
    kept += ranking[i].size;
  }
  return keep;
}

// Builds the per-ratio retention masks and compensation biases. `weights`
// returns the last matrix of a block as row-major [in, out] doubles.
inline WidthPlan build_width_plan(
    const ModelConfig& cfg, const ActivationStats& stats,
    const std::function<std::vector<double>(int layer, BlockKind kind)>& weights,
    std::vector<double> ratios) {
  if (ratios.empty() || ratios.front() != 1.0)
    throw std::invalid_argument("build_width_plan: ratios must be descending and include 1");
  for (size_t i = 0; i < ratios.size(); ++i) {
    if (ratios[i] <= 0.0 || ratios[i] > 1.0)
      throw std::out_of_range("build_width_plan: ratio " + std::to_string(ratios[i]) +
                              " outside (0,1]");
    if (i > 0 && ratios[i] >= ratios[i - 1])
      throw std::invalid_argument("build_width_plan: ratios must be strictly descending");
  }
  if (stats.n_layers != cfg.n_layers)
    throw std::invalid_argument("build_width_plan: missing stats for some blocks");

  WidthPlan plan;
  plan.n_layers = cfg.n_layers;
  plan.n_heads = cfg.n_heads;
  plan.d_head = cfg.d_head;
  plan.d_ffn = cfg.d_ffn;
  plan.ratios = ratios;
  plan.attention.resize(size_t(cfg.n_layers));
  plan.ffn.resize(size_t(cfg.n_layers));

  std::vector<std::vector<double>> weight_cache(size_t(cfg.n_layers) * 2);

  for (int l = 0; l < cfg.n_layers; ++l) {
    for (BlockKind kind : {BlockKind::attention, BlockKind::ffn}) {
      const BlockStats& bs = stats.block(l, kind);
      auto w = weights(l, kind);
      weight_cache[size_t(l) * 2 + size_t(kind)] = w;
      auto raw = fluctuation_scores(bs, w, size_t(cfg.d_model));
      WidthPlan::Block blk;
      blk.raw_scores = raw;
      blk.norm_scores = detail::normalize_scores(raw);
      blk.mean = bs.mean;
      blk.variance.resize(bs.channels());
      for (size_t i = 0; i < bs.channels(); ++i) blk.variance[i] = bs.variance(i);
      (kind == BlockKind::attention ? plan.attention : plan.ffn)[size_t(l)] = std::move(blk);
    }
  }

  // Global ranking over structural groups: whole heads for attention (group
  // score = mean of member-channel scores), single channels for the ffn.
  for (int l = 0; l < cfg.n_layers; ++l) {
    const auto& ab = plan.attention[size_t(l)];
    for (int h = 0; h < cfg.n_heads; ++h) {
      double s = 0.0, v = 0.0;
      for (int c = 0; c < cfg.d_head; ++c) {
        s += ab.norm_scores[size_t(h * cfg.d_head + c)];
        v += ab.variance[size_t(h * cfg.d_head + c)];
      }
      plan.ranking.push_back({l, BlockKind::attention, h, s / cfg.d_head, v / cfg.d_head, cfg.d_head});
    }
    const auto& fb = plan.ffn[size_t(l)];
    for (int c = 0; c < cfg.d_ffn; ++c)
      plan.ranking.push_back({l, BlockKind::ffn, c, fb.norm_scores[size_t(c)], fb.variance[size_t(c)], 1});
  }
  sort_ranking(plan.ranking);

  // Retained channel budget per ratio, distributed to whole groups in ranking
  // order; the realized count may exceed the target by at most one group.
  int64_t total = plan.total_channels();
  for (size_t r = 0; r < ratios.size(); ++r) {
    int64_t target = int64_t(std::ceil(ratios[r] * double(total)));
    for (int l = 0; l < cfg.n_layers; ++l) {
      plan.attention[size_t(l)].masks.emplace_back(size_t(cfg.n_heads), 0);
      plan.ffn[size_t(l)].masks.emplace_back(size_t(cfg.d_ffn), 0);
    }
    auto keep = retained_prefix(plan.ranking, target);
    for (size_t i = 0; i < plan.ranking.size(); ++i) {
      if (!keep[i]) continue;
      const auto& e = plan.ranking[i];
      auto& blk = e.kind == BlockKind::attention ? plan.attention[size_t(e.layer)]
                                                 : plan.ffn[size_t(e.layer)];
      blk.masks[r][size_t(e.group)] = 1;
    }
  }

  // Compensation biases; zero at the full ratio by construction.
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (BlockKind kind : {BlockKind::attention, BlockKind::ffn}) {
      auto& blk = (kind == BlockKind::attention ? plan.attention : plan.ffn)[size_t(l)];
      const auto& w = weight_cache[size_t(l) * 2 + size_t(kind)];
      for (size_t r = 0; r < ratios.size(); ++r) {
        std::vector<uint8_t> ch_mask = kind == BlockKind::attention
                                           ? plan.attn_channel_mask(l, r)
                                           : blk.masks[r];
        blk.biases.push_back(
            compensation_bias(w, size_t(cfg.d_model), ch_mask, blk.mean));
      }
    }
  }
  return plan;
}

// --- JSON persistence -------------------------------------------------------

inline std::string mask_to_string(const std::vector<uint8_t>& m) {
  std::string s(m.size(), '0');
  for (size_t i = 0; i < m.size(); ++i)
    if (m[i]) s[i] = '1';
  return s;
}

inline std::vector<uint8_t> mask_from_string(const std::string& s) {
  std::vector<uint8_t> m(s.size());
  for (size_t i = 0; i < s.size(); ++i) {
    if (s[i] != '0' && s[i] != '1')
      throw std::invalid_argument("mask string must be 0/1");
    m[i] = s[i] == '1';
  }
  return m;
}

inline nlohmann::json width_plan_to_json(const WidthPlan& plan) {
  nlohmann::json j;
  j["version"] = 1;
  j["n_layers"] = plan.n_layers;
  j["n_heads"] = plan.n_heads;
  j["d_head"] = plan.d_head;
  j["d_ffn"] = plan.d_ffn;
  j["ratios"] = plan.ratios;
  j["fingerprint"] = plan.fingerprint;
  auto block_json = [](const WidthPlan::Block& b) {
    nlohmann::json bj;
    bj["raw_scores"] = b.raw_scores;
    bj["norm_scores"] = b.norm_scores;
    bj["mean"] = b.mean;
    bj["variance"] = b.variance;
    bj["masks"] = nlohmann::json::array();
    for (const auto& m : b.masks) bj["masks"].push_back(mask_to_string(m));
    bj["biases"] = b.biases;
    return bj;
  };
  j["attention"] = nlohmann::json::array();
  for (const auto& b : plan.attention) j["attention"].push_back(block_json(b));
  j["ffn"] = nlohmann::json::array();
  for (const auto& b : plan.ffn) j["ffn"].push_back(block_json(b));
  j["ranking"] = nlohmann::json::array();
  for (const auto& e : plan.ranking)
    j["ranking"].push_back({{"layer", e.layer},
                            {"kind", block_kind_name(e.kind)},
                            {"group", e.group},
                            {"score", e.score},
                            {"variance", e.variance},
                            {"size", e.size}});
  return j;
}

inline WidthPlan width_plan_from_json(const nlohmann::json& j) {
  WidthPlan plan;
  plan.n_layers = j.at("n_layers").get<int>();
  plan.n_heads = j.at("n_heads").get<int>();
  plan.d_head = j.at("d_head").get<int>();
  plan.d_ffn = j.at("d_ffn").get<int>();
  plan.ratios = j.at("ratios").get<std::vector<double>>();
  plan.fingerprint = j.value("fingerprint", "");
  auto block_from = [](const nlohmann::json& bj) {
    WidthPlan::Block b;
    b.raw_scores = bj.at("raw_scores").get<std::vector<double>>();
    b.norm_scores = bj.at("norm_scores").get<std::vector<double>>();
    b.mean = bj.at("mean").get<std::vector<double>>();
    b.variance = bj.at("variance").get<std::vector<double>>();
    for (const auto& m : bj.at("masks")) b.masks.push_back(mask_from_string(m.get<std::string>()));
    b.biases = bj.at("biases").get<std::vector<std::vector<double>>>();
    return b;
  };
  for (const auto& bj : j.at("attention")) plan.attention.push_back(block_from(bj));
  for (const auto& bj : j.at("ffn")) plan.ffn.push_back(block_from(bj));
  for (const auto& ej : j.at("ranking")) {
    WidthPlan::RankEntry e;
    e.layer = ej.at("layer").get<int>();
    e.kind = ej.at("kind").get<std::string>() == "attention" ? BlockKind::attention : BlockKind::ffn;
    e.group = ej.at("group").get<int>();
    e.score = ej.at("score").get<double>();
    e.variance = ej.at("variance").get<double>();
    e.size = ej.at("size").get<int>();
    plan.ranking.push_back(e);
  }
  return plan;
}

}  // namespace elm
