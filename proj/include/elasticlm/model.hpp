#pragma once

// A small decoder-only transformer with elastic execution: every forward pass
// takes a subnet shape and applies layer skipping, per-block width masks and
// compensation biases, and (when a LoRA bank is attached) composite weights.
// Pre-norm blocks with RMS normalization, causal attention, SiLU-gated FFN.

#include <elasticlm/checkpoint.hpp>
#include <elasticlm/lora_bank.hpp>
#include <elasticlm/model_config.hpp>
#include <elasticlm/tensor.hpp>
#include <elasticlm/width_select.hpp>

#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace elm {

template <typename T>
struct ActivationObserver {
  virtual ~ActivationObserver() = default;
  // `x` is the input of the block's last matrix, rows = (batch, token).
  virtual void on_block_input(int layer, BlockKind kind, const TensorT<T>& x) = 0;
};

template <typename T>
struct ForwardOptions {
  const SubnetShape* shape = nullptr;  // null = full shape
  bool gate_training = false;          // enables gate noise when the bank allows it
  Rng* rng = nullptr;                  // for gate noise
  ActivationObserver<T>* observer = nullptr;
  const GateEval<T>* gate_override = nullptr;  // reuse a prior gate decision
};

template <typename T>
struct ElasticModelT {
  ModelConfig cfg;

  TensorT<T> tok_emb;  // [vocab, d_model]
  TensorT<T> pos_emb;  // [max_seq_len, d_model]
  struct Layer {
    TensorT<T> wq, wk, wv;        // [d_model, attn_width]
    TensorT<T> wo;                // [attn_width, d_model]
    TensorT<T> w_gate, w_up;      // [d_model, d_ffn]
    TensorT<T> w_down;            // [d_ffn, d_model]
    TensorT<T> norm_attn, norm_ffn;  // [d_model]
  };
  std::vector<Layer> layers;
  TensorT<T> norm_final;  // [d_model]
  TensorT<T> head;        // [d_model, vocab]

  std::shared_ptr<const WidthPlan> plan;  // optional
  std::shared_ptr<LoraBankT<T>> bank;     // optional

  static ElasticModelT init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    ElasticModelT m;
    m.cfg = cfg;
    T std_emb = T(0.02);
    T std_proj = T(0.02);
    // Residual-feeding projections scaled down with depth.
    T std_res = T(0.02 / std::sqrt(2.0 * cfg.n_layers));
    int aw = cfg.attn_width();
    m.tok_emb = TensorT<T>::randn({cfg.vocab_size, cfg.d_model}, rng, std_emb);
    m.pos_emb = TensorT<T>::randn({cfg.max_seq_len, cfg.d_model}, rng, std_emb);
    for (int l = 0; l < cfg.n_layers; ++l) {
      Layer lay;
      lay.wq = TensorT<T>::randn({cfg.d_model, aw}, rng, std_proj);
      lay.wk = TensorT<T>::randn({cfg.d_model, aw}, rng, std_proj);
      lay.wv = TensorT<T>::randn({cfg.d_model, aw}, rng, std_proj);
      lay.wo = TensorT<T>::randn({aw, cfg.d_model}, rng, std_res);
      lay.w_gate = TensorT<T>::randn({cfg.d_model, cfg.d_ffn}, rng, std_proj);
      lay.w_up = TensorT<T>::randn({cfg.d_model, cfg.d_ffn}, rng, std_proj);
      lay.w_down = TensorT<T>::randn({cfg.d_ffn, cfg.d_model}, rng, std_res);
      lay.norm_attn = TensorT<T>::full({cfg.d_model}, T(1));
      lay.norm_ffn = TensorT<T>::full({cfg.d_model}, T(1));
      m.layers.push_back(std::move(lay));
    }
    m.norm_final = TensorT<T>::full({cfg.d_model}, T(1));
    m.head = TensorT<T>::randn({cfg.d_model, cfg.vocab_size}, rng, std_emb);
    return m;
  }

  template <typename Fn>
  void for_each_param(Fn&& fn) {
    fn(std::string("model.tok_emb"), tok_emb);
    fn(std::string("model.pos_emb"), pos_emb);
    for (size_t l = 0; l < layers.size(); ++l) {
      std::string base = "model.layers." + std::to_string(l) + ".";
      fn(base + "wq", layers[l].wq);
      fn(base + "wk", layers[l].wk);
      fn(base + "wv", layers[l].wv);
      fn(base + "wo", layers[l].wo);
      fn(base + "w_gate", layers[l].w_gate);
      fn(base + "w_up", layers[l].w_up);
      fn(base + "w_down", layers[l].w_down);
      fn(base + "norm_attn", layers[l].norm_attn);
      fn(base + "norm_ffn", layers[l].norm_ffn);
    }
    fn(std::string("model.norm_final"), norm_final);
    fn(std::string("model.head"), head);
  }

  void set_base_trainable(bool rg) {
    for_each_param([rg](const std::string&, TensorT<T>& t) { t.set_requires_grad(rg); });
  }

  const TensorT<T>& base_matrix(int layer, MatrixKind kind) const {
    const Layer& l = layers[size_t(layer)];
    switch (kind) {
      case MatrixKind::q: return l.wq;
      case MatrixKind::k: return l.wk;
      case MatrixKind::v: return l.wv;
      case MatrixKind::o: return l.wo;
      case MatrixKind::gate: return l.w_gate;
      case MatrixKind::up: return l.w_up;
      case MatrixKind::down: return l.w_down;
    }
    throw std::logic_error("base_matrix: bad kind");
  }

  // Last matrix of a block as row-major [in, out] doubles (width planning).
  std::vector<double> last_matrix_f64(int layer, BlockKind kind) const {
    const TensorT<T>& w =
        kind == BlockKind::attention ? layers[size_t(layer)].wo : layers[size_t(layer)].w_down;
    return std::vector<double>(w.data().begin(), w.data().end());
  }
};

namespace detail {

template <typename T>
std::vector<uint8_t> causal_mask(int64_t s) {
  std::vector<uint8_t> m(size_t(s * s), 0);
  for (int64_t i = 0; i < s; ++i)
    for (int64_t j = i + 1; j < s; ++j) m[size_t(i * s + j)] = 1;
  return m;
}

}  // namespace detail

// Forward pass over `batch` sequences of `seq` tokens (flattened row-major).
// Returns logits [batch*seq, vocab].
template <typename T>
TensorT<T> forward(ElasticModelT<T>& model, std::span<const int32_t> tokens, int64_t batch,
                   int64_t seq, const ForwardOptions<T>& opt = {}) {
  const ModelConfig& cfg = model.cfg;
  if (int64_t(tokens.size()) != batch * seq)
    throw ShapeError("forward", "token count " + std::to_string(tokens.size()) + " vs batch " +
                                    std::to_string(batch) + " x seq " + std::to_string(seq));
  if (seq > cfg.max_seq_len)
    throw ShapeError("forward", "sequence length " + std::to_string(seq) + " exceeds max " +
                                    std::to_string(cfg.max_seq_len));

  const SubnetShape* shape = opt.shape;
  if (shape != nullptr) {
    if (int(shape->retained_layers.size()) != cfg.n_layers)
      throw ShapeError("forward", "retained-layer mask length " +
                                      std::to_string(shape->retained_layers.size()) +
                                      " vs n_layers " + std::to_string(cfg.n_layers));
    if (shape->width_index > 0) {
      if (!model.plan)
        throw std::logic_error("forward: width-shrunk shape but no width plan attached");
      if (size_t(shape->width_index) >= model.plan->ratios.size())
        throw std::out_of_range("forward: width index " + std::to_string(shape->width_index) +
                                " outside plan");
    }
  }
  auto retained = [&](int l) {
    return shape ? shape->retained_layers[size_t(l)] != 0 : true;
  };
  size_t width_idx = shape ? size_t(shape->width_index) : 0;

  // One gate decision per forward, shared by every adapted matrix.
  std::optional<GateEval<T>> gate_eval;
  const GateEval<T>* gate_ptr = opt.gate_override;
  if (model.bank && gate_ptr == nullptr) {
    if (!shape)
      throw std::logic_error("forward: bank attached but no shape (gate mask) provided");
    gate_eval = gate(*model.bank, shape->gate_mask, opt.rng, opt.gate_training);
    gate_ptr = &*gate_eval;
  }

  auto effective = [&](int l, MatrixKind kind) -> TensorT<T> {
    const TensorT<T>& base = model.base_matrix(l, kind);
    if (model.bank && gate_ptr)
      return composite(*model.bank, base, matrix_index(l, kind), *gate_ptr);
    return base;
  };

  // Embeddings.
  std::vector<int32_t> ids(tokens.begin(), tokens.end());
  std::vector<int32_t> pos_ids(size_t(batch * seq));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t t = 0; t < seq; ++t) pos_ids[size_t(b * seq + t)] = int32_t(t);
  auto h = add(embedding(model.tok_emb, ids), embedding(model.pos_emb, pos_ids));

  auto upper = detail::causal_mask<T>(seq);
  const T attn_scale = T(1) / std::sqrt(T(cfg.d_head));
  const T neg_inf = -std::numeric_limits<T>::infinity();

  for (int l = 0; l < cfg.n_layers; ++l) {
    if (!retained(l)) continue;
    const auto& lay = model.layers[size_t(l)];

    // Attention block.
    auto xn = rms_norm(h, lay.norm_attn);
    auto q = matmul(xn, effective(l, MatrixKind::q));
    auto kk = matmul(xn, effective(l, MatrixKind::k));
    auto v = matmul(xn, effective(l, MatrixKind::v));

    std::vector<uint8_t> head_mask(size_t(cfg.n_heads), 1);
    if (width_idx > 0)
      head_mask = model.plan->attention[size_t(l)].masks[width_idx];

    std::vector<TensorT<T>> seq_ctx;
    seq_ctx.reserve(size_t(batch));
    for (int64_t b = 0; b < batch; ++b) {
      auto qb = slice_rows(q, b * seq, (b + 1) * seq);
      auto kb = slice_rows(kk, b * seq, (b + 1) * seq);
      auto vb = slice_rows(v, b * seq, (b + 1) * seq);
      std::vector<TensorT<T>> heads;
      heads.reserve(size_t(cfg.n_heads));
      for (int hd = 0; hd < cfg.n_heads; ++hd) {
        if (!head_mask[size_t(hd)]) {
          // Pruned head: its input neurons to the o-projection are excluded.
          heads.push_back(TensorT<T>::zeros({seq, cfg.d_head}));
          continue;
        }
        int64_t c0 = int64_t(hd) * cfg.d_head, c1 = c0 + cfg.d_head;
        auto qh = slice_cols(qb, c0, c1);
        auto kh = slice_cols(kb, c0, c1);
        auto vh = slice_cols(vb, c0, c1);
        auto att = masked_fill(scale(matmul_nt(qh, kh), attn_scale), upper, neg_inf);
        heads.push_back(matmul(softmax_rows(att), vh));
      }
      seq_ctx.push_back(concat_cols(heads));
    }
    auto ctx = batch == 1 ? seq_ctx[0] : concat_rows(seq_ctx);
    if (opt.observer) opt.observer->on_block_input(l, BlockKind::attention, ctx);
    auto attn_out = matmul(ctx, effective(l, MatrixKind::o));
    if (width_idx > 0) {
      const auto& bias = model.plan->attention[size_t(l)].biases[width_idx];
      std::vector<T> bv(bias.begin(), bias.end());
      attn_out = add_bias(attn_out, TensorT<T>::from({cfg.d_model}, std::move(bv)));
    }
    h = add(h, attn_out);

    // Feed-forward block.
    auto xn2 = rms_norm(h, lay.norm_ffn);
    auto gated = mul(silu(matmul(xn2, effective(l, MatrixKind::gate))),
                     matmul(xn2, effective(l, MatrixKind::up)));
    if (opt.observer) opt.observer->on_block_input(l, BlockKind::ffn, gated);
    if (width_idx > 0) {
      const auto& cm = model.plan->ffn_channel_mask(l, width_idx);
      std::vector<T> mv(cm.begin(), cm.end());
      gated = mul_rowvec(gated, TensorT<T>::from({cfg.d_ffn}, std::move(mv)));
    }
    auto ffn_out = matmul(gated, effective(l, MatrixKind::down));
    if (width_idx > 0) {
      const auto& bias = model.plan->ffn[size_t(l)].biases[width_idx];
      std::vector<T> bv(bias.begin(), bias.end());
      ffn_out = add_bias(ffn_out, TensorT<T>::from({cfg.d_model}, std::move(bv)));
    }
    h = add(h, ffn_out);
  }

  return matmul(rms_norm(h, model.norm_final), model.head);
}

// Mean/variance collection over the calibration stream: full-shape forwards
// with an observer on each block's last-matrix input.
template <typename T>
class StatsCollector : public ActivationObserver<T> {
 public:
  explicit StatsCollector(const ModelConfig& cfg) : stats_(cfg) {}

  void on_block_input(int layer, BlockKind kind, const TensorT<T>& x) override {
    auto& bs = stats_.block(layer, kind);
    auto [rows, cols] = detail::as_2d<T>(x.shape(), "StatsCollector");
    std::vector<double> row(static_cast<size_t>(cols));
    for (int64_t r = 0; r < rows; ++r) {
      for (int64_t c = 0; c < cols; ++c) row[size_t(c)] = double(x.data()[size_t(r * cols + c)]);
      bs.update_row(row);
    }
  }

  ActivationStats take() { return std::move(stats_); }

 private:
  ActivationStats stats_;
};

// Full-shape forwards of the base model (any attached adapter is ignored;
// width statistics are a property of the pretrained weights).
template <typename T>
ActivationStats collect_stats(ElasticModelT<T>& model, std::span<const int32_t> tokens,
                              int64_t seq, int64_t batch = 8) {
  if (tokens.empty()) throw std::invalid_argument("collect_stats: empty calibration set");
  StatsCollector<T> collector(model.cfg);
  ForwardOptions<T> opt;
  opt.observer = &collector;
  int64_t n_windows = int64_t(tokens.size()) / seq;
  if (n_windows == 0)
    throw std::invalid_argument("collect_stats: calibration set shorter than one window");
  auto bank = std::move(model.bank);
  model.bank = nullptr;
  try {
    for (int64_t w = 0; w < n_windows; w += batch) {
      int64_t b = std::min(batch, n_windows - w);
      forward(model, tokens.subspan(size_t(w * seq), size_t(b * seq)), b, seq, opt);
    }
  } catch (...) {
    model.bank = std::move(bank);
    throw;
  }
  model.bank = std::move(bank);
  return collector.take();
}

// ---------------------------------------------------------------------------
// Extraction: standalone dense subnet with merged adapters and baked biases
// ---------------------------------------------------------------------------

template <typename T>
struct ExtractedModelT {
  ModelConfig base_cfg;  // original dims; n_layers is the retained count below
  struct Layer {
    TensorT<T> wq, wk, wv;   // [d_model, attn_width]
    TensorT<T> wo;           // [attn_width, d_model]
    TensorT<T> bias_attn;    // [d_model]
    TensorT<T> w_gate, w_up; // [d_model, ffn_width]
    TensorT<T> w_down;       // [ffn_width, d_model]
    TensorT<T> bias_ffn;     // [d_model]
    TensorT<T> norm_attn, norm_ffn;
    std::vector<int> heads;  // retained head indices in the base model
    int64_t ffn_width = 0;
  };
  std::vector<Layer> layers;
  TensorT<T> tok_emb, pos_emb, norm_final, head;
  std::string shape_id;

  int64_t param_count() const {
    int64_t n = tok_emb.numel() + pos_emb.numel() + norm_final.numel() + head.numel();
    for (const auto& l : layers)
      n += l.wq.numel() + l.wk.numel() + l.wv.numel() + l.wo.numel() + l.bias_attn.numel() +
           l.w_gate.numel() + l.w_up.numel() + l.w_down.numel() + l.bias_ffn.numel() +
           l.norm_attn.numel() + l.norm_ffn.numel();
    return n;
  }
};

namespace detail {

template <typename T>
TensorT<T> dense_effective(const TensorT<T>& base, const std::vector<T>& delta) {
  Buffer<T> w(base.data());
  if (!delta.empty()) {
    if (delta.size() != w.size()) throw std::logic_error("dense_effective: delta size mismatch");
    EVecMap<T>(w.data(), Eigen::Index(w.size())) +=
        ECVecMap<T>(delta.data(), Eigen::Index(delta.size()));
  }
  return TensorT<T>::from(base.shape(), std::move(w));
}

template <typename T>
TensorT<T> take_cols(const TensorT<T>& w, const std::vector<int64_t>& cols) {
  int64_t r = w.dim(0), c = w.dim(1);
  std::vector<T> out(size_t(r) * cols.size());
  for (int64_t i = 0; i < r; ++i)
    for (size_t j = 0; j < cols.size(); ++j)
      out[size_t(i) * cols.size() + j] = w.data()[size_t(i * c + cols[j])];
  return TensorT<T>::from({r, int64_t(cols.size())}, std::move(out));
}

template <typename T>
TensorT<T> take_rows(const TensorT<T>& w, const std::vector<int64_t>& rows) {
  int64_t c = w.dim(1);
  std::vector<T> out(rows.size() * size_t(c));
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy_n(w.data().data() + rows[i] * c, c, out.data() + int64_t(i) * c);
  return TensorT<T>::from({int64_t(rows.size()), c}, std::move(out));
}

}  // namespace detail

template <typename T>
ExtractedModelT<T> extract(ElasticModelT<T>& model, const SubnetShape& shape) {
  const ModelConfig& cfg = model.cfg;
  if (!model.bank) throw std::logic_error("extract: no adapter bank attached");
  if (int(shape.retained_layers.size()) != cfg.n_layers)
    throw ShapeError("extract", "retained-layer mask length " +
                                    std::to_string(shape.retained_layers.size()) + " vs n_layers " +
                                    std::to_string(cfg.n_layers));
  if (int(shape.gate_mask.size()) != model.bank->mask_dim)
    throw std::out_of_range("extract: shape outside the configured grid (gate mask dim " +
                            std::to_string(shape.gate_mask.size()) + " vs " +
                            std::to_string(model.bank->mask_dim) + ")");
  if (shape.width_index > 0) {
    if (!model.plan) throw std::logic_error("extract: width-shrunk shape but no width plan attached");
    if (size_t(shape.width_index) >= model.plan->ratios.size())
      throw std::out_of_range("extract: width index outside the configured grid");
  }

  auto deltas = merge_deltas(*model.bank, shape.gate_mask);
  size_t widx = size_t(shape.width_index);

  ExtractedModelT<T> out;
  out.base_cfg = cfg;
  out.tok_emb = model.tok_emb.detach();
  out.pos_emb = model.pos_emb.detach();
  out.norm_final = model.norm_final.detach();
  out.head = model.head.detach();

  for (int l = 0; l < cfg.n_layers; ++l) {
    if (!shape.retained_layers[size_t(l)]) continue;
    typename ExtractedModelT<T>::Layer lay;

    std::vector<int64_t> head_cols;
    std::vector<int> kept_heads;
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
      bool keep = widx == 0 || model.plan->attention[size_t(l)].masks[widx][size_t(hd)];
      if (!keep) continue;
      kept_heads.push_back(hd);
      for (int c = 0; c < cfg.d_head; ++c) head_cols.push_back(int64_t(hd) * cfg.d_head + c);
    }
    std::vector<int64_t> ffn_rows;
    for (int c = 0; c < cfg.d_ffn; ++c) {
      bool keep = widx == 0 || model.plan->ffn[size_t(l)].masks[widx][size_t(c)];
      if (keep) ffn_rows.push_back(c);
    }

    auto eff = [&](MatrixKind kind) {
      return detail::dense_effective(model.base_matrix(l, kind),
                                     deltas[size_t(matrix_index(l, kind))]);
    };

    lay.wq = detail::take_cols(eff(MatrixKind::q), head_cols);
    lay.wk = detail::take_cols(eff(MatrixKind::k), head_cols);
    lay.wv = detail::take_cols(eff(MatrixKind::v), head_cols);
    lay.wo = detail::take_rows(eff(MatrixKind::o), head_cols);
    lay.w_gate = detail::take_cols(eff(MatrixKind::gate), ffn_rows);
    lay.w_up = detail::take_cols(eff(MatrixKind::up), ffn_rows);
    lay.w_down = detail::take_rows(eff(MatrixKind::down), ffn_rows);
    lay.norm_attn = model.layers[size_t(l)].norm_attn.detach();
    lay.norm_ffn = model.layers[size_t(l)].norm_ffn.detach();

    // Compensation biases fold into the block output projections.
    auto bias_tensor = [&](BlockKind kind) {
      if (widx == 0) return TensorT<T>::zeros({cfg.d_model});
      const auto& b = kind == BlockKind::attention ? model.plan->attention[size_t(l)].biases[widx]
                                                   : model.plan->ffn[size_t(l)].biases[widx];
      std::vector<T> bv(b.begin(), b.end());
      return TensorT<T>::from({cfg.d_model}, std::move(bv));
    };
    lay.bias_attn = bias_tensor(BlockKind::attention);
    lay.bias_ffn = bias_tensor(BlockKind::ffn);
    lay.heads = kept_heads;
    lay.ffn_width = int64_t(ffn_rows.size());
    out.layers.push_back(std::move(lay));
  }
  return out;
}

template <typename T>
TensorT<T> forward(const ExtractedModelT<T>& model, std::span<const int32_t> tokens,
                   int64_t batch, int64_t seq) {
  const ModelConfig& cfg = model.base_cfg;
  if (int64_t(tokens.size()) != batch * seq)
    throw ShapeError("forward", "token count " + std::to_string(tokens.size()) + " vs batch " +
                                    std::to_string(batch) + " x seq " + std::to_string(seq));
  std::vector<int32_t> ids(tokens.begin(), tokens.end());
  std::vector<int32_t> pos_ids(size_t(batch * seq));
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t t = 0; t < seq; ++t) pos_ids[size_t(b * seq + t)] = int32_t(t);
  auto h = add(embedding(model.tok_emb, ids), embedding(model.pos_emb, pos_ids));

  auto upper = detail::causal_mask<T>(seq);
  const T attn_scale = T(1) / std::sqrt(T(cfg.d_head));
  const T neg_inf = -std::numeric_limits<T>::infinity();

  for (const auto& lay : model.layers) {
    int64_t n_heads = int64_t(lay.heads.size());
    auto xn = rms_norm(h, lay.norm_attn);
    auto q = matmul(xn, lay.wq);
    auto kk = matmul(xn, lay.wk);
    auto v = matmul(xn, lay.wv);
    std::vector<TensorT<T>> seq_ctx;
    for (int64_t b = 0; b < batch; ++b) {
      auto qb = slice_rows(q, b * seq, (b + 1) * seq);
      auto kb = slice_rows(kk, b * seq, (b + 1) * seq);
      auto vb = slice_rows(v, b * seq, (b + 1) * seq);
      std::vector<TensorT<T>> heads;
      for (int64_t hd = 0; hd < n_heads; ++hd) {
        int64_t c0 = hd * cfg.d_head, c1 = c0 + cfg.d_head;
        auto att = masked_fill(
            scale(matmul_nt(slice_cols(qb, c0, c1), slice_cols(kb, c0, c1)), attn_scale), upper,
            neg_inf);
        heads.push_back(matmul(softmax_rows(att), slice_cols(vb, c0, c1)));
      }
      seq_ctx.push_back(concat_cols(heads));
    }
    auto ctx = batch == 1 ? seq_ctx[0] : concat_rows(seq_ctx);
    h = add(h, add_bias(matmul(ctx, lay.wo), lay.bias_attn));

    auto xn2 = rms_norm(h, lay.norm_ffn);
    auto gated = mul(silu(matmul(xn2, lay.w_gate)), matmul(xn2, lay.w_up));
    h = add(h, add_bias(matmul(gated, lay.w_down), lay.bias_ffn));
  }
  return matmul(rms_norm(h, model.norm_final), model.head);
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},   {"d_model", c.d_model},
          {"n_heads", c.n_heads},     {"d_head", c.d_head},
          {"d_ffn", c.d_ffn},         {"vocab_size", c.vocab_size},
          {"max_seq_len", c.max_seq_len}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_head = j.at("d_head").get<int>();
  c.d_ffn = j.at("d_ffn").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.validate();
  return c;
}

template <typename T>
Checkpoint model_checkpoint(ElasticModelT<T>& model) {
  Checkpoint ckpt;
  model.for_each_param([&](const std::string& name, TensorT<T>& t) { ckpt.add(name, t); });
  ckpt.meta["kind"] = "elastic_model";
  ckpt.meta["config"] = model_config_to_json(model.cfg);
  return ckpt;
}

template <typename T>
ElasticModelT<T> model_from_checkpoint(const Checkpoint& ckpt) {
  ModelConfig cfg = model_config_from_json(ckpt.meta.at("config"));
  Rng dummy(0);
  ElasticModelT<T> m = ElasticModelT<T>::init(cfg, dummy);
  m.for_each_param([&](const std::string& name, TensorT<T>& t) {
    auto loaded = ckpt.template get<T>(name);
    if (loaded.shape() != t.shape())
      throw ShapeError("model_from_checkpoint", loaded.shape(), t.shape());
    t.data() = loaded.data();
  });
  return m;
}

template <typename T>
Checkpoint bank_checkpoint(LoraBankT<T>& bank) {
  Checkpoint ckpt;
  bank.for_each_param([&](const std::string& name, TensorT<T>& t) { ckpt.add(name, t); });
  ckpt.meta["kind"] = "lora_bank";
  ckpt.meta["rank"] = bank.rank;
  ckpt.meta["count"] = bank.count;
  ckpt.meta["active"] = bank.active;
  ckpt.meta["mask_dim"] = bank.mask_dim;
  ckpt.meta["noise_enabled"] = bank.noise_enabled;
  return ckpt;
}

template <typename T>
LoraBankT<T> bank_from_checkpoint(const Checkpoint& ckpt, const ModelConfig& cfg) {
  Rng dummy(0);
  LoraBankT<T> bank = LoraBankT<T>::init(cfg, ckpt.meta.at("mask_dim").get<int>(),
                                         ckpt.meta.at("rank").get<int>(),
                                         ckpt.meta.at("count").get<int>(),
                                         ckpt.meta.at("active").get<int>(), dummy);
  bank.noise_enabled = ckpt.meta.at("noise_enabled").get<bool>();
  bank.for_each_param([&](const std::string& name, TensorT<T>& t) {
    auto loaded = ckpt.template get<T>(name);
    if (loaded.shape() != t.shape())
      throw ShapeError("bank_from_checkpoint", loaded.shape(), t.shape());
    t.data() = loaded.data();
  });
  return bank;
}

template <typename T>
Checkpoint extracted_checkpoint(ExtractedModelT<T>& model) {
  Checkpoint ckpt;
  ckpt.add("model.tok_emb", model.tok_emb);
  ckpt.add("model.pos_emb", model.pos_emb);
  ckpt.add("model.norm_final", model.norm_final);
  ckpt.add("model.head", model.head);
  nlohmann::json layer_meta = nlohmann::json::array();
  for (size_t l = 0; l < model.layers.size(); ++l) {
    auto& lay = model.layers[l];
    std::string base = "model.layers." + std::to_string(l) + ".";
    ckpt.add(base + "wq", lay.wq);
    ckpt.add(base + "wk", lay.wk);
    ckpt.add(base + "wv", lay.wv);
    ckpt.add(base + "wo", lay.wo);
    ckpt.add(base + "bias_attn", lay.bias_attn);
    ckpt.add(base + "w_gate", lay.w_gate);
    ckpt.add(base + "w_up", lay.w_up);
    ckpt.add(base + "w_down", lay.w_down);
    ckpt.add(base + "bias_ffn", lay.bias_ffn);
    ckpt.add(base + "norm_attn", lay.norm_attn);
    ckpt.add(base + "norm_ffn", lay.norm_ffn);
    layer_meta.push_back({{"heads", lay.heads}, {"ffn_width", lay.ffn_width}});
  }
  ckpt.meta["kind"] = "extracted_model";
  ckpt.meta["config"] = model_config_to_json(model.base_cfg);
  ckpt.meta["layers"] = layer_meta;
  ckpt.meta["shape_id"] = model.shape_id;
  return ckpt;
}

template <typename T>
ExtractedModelT<T> extracted_from_checkpoint(const Checkpoint& ckpt) {
  ExtractedModelT<T> m;
  m.base_cfg = model_config_from_json(ckpt.meta.at("config"));
  m.shape_id = ckpt.meta.value("shape_id", "");
  m.tok_emb = ckpt.template get<T>("model.tok_emb");
  m.pos_emb = ckpt.template get<T>("model.pos_emb");
  m.norm_final = ckpt.template get<T>("model.norm_final");
  m.head = ckpt.template get<T>("model.head");
  const auto& layer_meta = ckpt.meta.at("layers");
  for (size_t l = 0; l < layer_meta.size(); ++l) {
    typename ExtractedModelT<T>::Layer lay;
    std::string base = "model.layers." + std::to_string(l) + ".";
    lay.wq = ckpt.template get<T>(base + "wq");
    lay.wk = ckpt.template get<T>(base + "wk");
    lay.wv = ckpt.template get<T>(base + "wv");
    lay.wo = ckpt.template get<T>(base + "wo");
    lay.bias_attn = ckpt.template get<T>(base + "bias_attn");
    lay.w_gate = ckpt.template get<T>(base + "w_gate");
    lay.w_up = ckpt.template get<T>(base + "w_up");
    lay.w_down = ckpt.template get<T>(base + "w_down");
    lay.bias_ffn = ckpt.template get<T>(base + "bias_ffn");
    lay.norm_attn = ckpt.template get<T>(base + "norm_attn");
    lay.norm_ffn = ckpt.template get<T>(base + "norm_ffn");
    lay.heads = layer_meta[l].at("heads").get<std::vector<int>>();
    lay.ffn_width = layer_meta[l].at("ffn_width").get<int64_t>();
    m.layers.push_back(std::move(lay));
  }
  return m;
}

}  // namespace elm
