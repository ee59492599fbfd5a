#pragma once

// One-for-all fine-tuning: sandwich sampling of K shapes per step, in-place
// distillation from the largest subnet, loss-magnitude balancing, and
// gradient accumulation into adapter parameters only. Also hosts the
// decoupled-weight-decay adaptive-moment optimizer and the base-model
// pretraining loop.

#include <elasticlm/data.hpp>
#include <elasticlm/depth_dp.hpp>
#include <elasticlm/model.hpp>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace elm {

template <typename T>
struct AdamW {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  struct Slot {
    std::vector<double> m, v;
  };
  std::vector<Slot> slots;
  int64_t t = 0;

  // Applies one update to every (name, tensor) pair yielded by the
  // enumeration; slot order must be stable across calls.
  template <typename ParamList>
  void step(ParamList& params) {
    ++t;
    if (slots.empty()) {
      slots.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        slots[i].m.assign(params[i]->data().size(), 0.0);
        slots[i].v.assign(params[i]->data().size(), 0.0);
      }
    }
    if (slots.size() != params.size())
      throw std::invalid_argument("AdamW: parameter list changed size");
    double bc1 = 1.0 - std::pow(beta1, double(t));
    double bc2 = 1.0 - std::pow(beta2, double(t));
    for (size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      if (!p.has_grad()) continue;
      auto& val = p.data();
      auto& g = p.grad();
      if (slots[i].m.size() != val.size())
        throw ShapeError("AdamW", "state shape mismatch for parameter " + std::to_string(i));
      auto& m = slots[i].m;
      auto& v = slots[i].v;
      for (size_t j = 0; j < val.size(); ++j) {
        double gj = double(g[j]);
        m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
        v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
        double mh = m[j] / bc1;
        double vh = v[j] / bc2;
        double upd = lr * (mh / (std::sqrt(vh) + eps) + weight_decay * double(val[j]));
        val[j] = T(double(val[j]) - upd);
      }
      p.zero_grad();
    }
  }
};

// Largest shape first, smallest second, then k-2 uniform without replacement
// from the rest of the grid. Returned as (depth_index, width_index) pairs.
inline std::vector<std::pair<int, int>> sandwich_sample(const ShapeGrid& grid, int k, Rng& rng) {
  size_t n = grid.size();
  if (k < 2) throw std::invalid_argument("sandwich_sample: need k >= 2");
  if (size_t(k) > n)
    throw std::invalid_argument("sandwich_sample: k " + std::to_string(k) +
                                " exceeds grid size " + std::to_string(n));
  int dmax = int(grid.depths.size()) - 1;
  int wmax = int(grid.width_ratios.size()) - 1;
  std::vector<std::pair<int, int>> out;
  out.emplace_back(0, 0);        // largest
  out.emplace_back(dmax, wmax);  // smallest

  std::vector<std::pair<int, int>> rest;
  for (int d = 0; d <= dmax; ++d)
    for (int w = 0; w <= wmax; ++w)
      if (!(d == 0 && w == 0) && !(d == dmax && w == wmax)) rest.emplace_back(d, w);
  for (int i = 0; i < k - 2; ++i) {
    size_t j = size_t(i) + size_t(rng.uniform_int(int64_t(rest.size() - size_t(i))));
    std::swap(rest[size_t(i)], rest[j]);
    out.push_back(rest[size_t(i)]);
  }
  return out;
}

// One subnet shape per grid cell, depth sets taken from the DP table.
inline std::vector<SubnetShape> build_grid_shapes(const ShapeGrid& grid, const DPTable& table) {
  int n_layers = grid.depths.front();
  if (table.n != n_layers)
    throw std::invalid_argument("build_grid_shapes: DP table is for " + std::to_string(table.n) +
                                " layers, grid expects " + std::to_string(n_layers));
  std::vector<SubnetShape> shapes;
  for (size_t di = 0; di < grid.depths.size(); ++di) {
    int m = n_layers - grid.depths[di];
    const auto& retained = table.select(m);
    for (size_t wi = 0; wi < grid.width_ratios.size(); ++wi)
      shapes.push_back(SubnetShape::make(grid, int(di), int(wi), retained));
  }
  return shapes;
}

struct StepLosses {
  std::vector<std::pair<int, int>> sampled;  // (depth_index, width_index), largest first
  double ground_truth = 0.0;                 // L1
  std::vector<double> distill;               // L_i, i = 2..K
  std::vector<double> scales;                // s_i
  double total = 0.0;
};

// L_total = L1 + sum_i s_i L_i with s_i = |L1| / (|L_i| + eps) as a constant.
inline double balanced_total(double l1, const std::vector<double>& distill, double eps,
                             bool balance, std::vector<double>* scales_out) {
  if (!std::isfinite(l1)) throw std::runtime_error("balanced_total: non-finite ground-truth loss");
  double total = l1;
  if (scales_out) scales_out->clear();
  for (double li : distill) {
    if (!std::isfinite(li)) throw std::runtime_error("balanced_total: non-finite distill loss");
    double s = balance ? std::abs(l1) / (std::abs(li) + eps) : 1.0;
    if (scales_out) scales_out->push_back(s);
    total += s * li;
  }
  return total;
}

template <typename T>
struct OfaTrainer {
  ElasticModelT<T>* model = nullptr;  // base parameters frozen
  LoraBankT<T>* bank = nullptr;
  ShapeGrid grid;
  std::vector<SubnetShape> shapes;  // index = depth_index * |ratios| + width_index
  AdamW<T> opt;
  int k_subnets = 4;
  double balance_eps = 1e-8;
  bool balance = true;
  Rng rng{0};

  std::vector<TensorT<T>*> params;

  void init_params() {
    params.clear();
    bank->for_each_param([&](const std::string&, TensorT<T>& t) {
      t.set_requires_grad(true);
      params.push_back(&t);
    });
    model->set_base_trainable(false);
  }

  const SubnetShape& shape_at(int di, int wi) const {
    return shapes[size_t(di) * grid.width_ratios.size() + size_t(wi)];
  }

  // One optimizer step over a token batch. The largest subnet runs first with
  // a noise-free gate; its detached distribution is the distillation teacher.
  StepLosses train_step(std::span<const int32_t> tokens, int64_t batch, int64_t seq,
                        std::optional<std::vector<std::pair<int, int>>> sampled_override =
                            std::nullopt) {
    StepLosses losses;
    losses.sampled = sampled_override ? std::move(*sampled_override)
                                      : sandwich_sample(grid, k_subnets, rng);

    // The caller provides rows of seq+1 tokens; inputs are the first seq.
    if (int64_t(tokens.size()) != batch * (seq + 1))
      throw ShapeError("train_step", "expected batch*(seq+1) tokens, got " +
                                         std::to_string(tokens.size()));
    std::vector<int32_t> inputs(size_t(batch * seq));
    std::vector<int32_t> tgt(size_t(batch * seq));
    for (int64_t b = 0; b < batch; ++b) {
      const int32_t* base = tokens.data() + b * (seq + 1);
      std::copy_n(base, seq, inputs.data() + b * seq);
      std::copy_n(base + 1, seq, tgt.data() + b * seq);
    }

    // Teacher pass (largest subnet, stable gate).
    const SubnetShape& largest = shape_at(losses.sampled[0].first, losses.sampled[0].second);
    ForwardOptions<T> teacher_opt;
    teacher_opt.shape = &largest;
    teacher_opt.gate_training = false;
    auto teacher_logits = forward(*model, std::span<const int32_t>(inputs), batch, seq,
                                  teacher_opt);
    auto l1 = cross_entropy(teacher_logits, tgt);
    losses.ground_truth = double(l1.item());
    auto teacher_probs = softmax_rows(teacher_logits).detach();
    try {
      l1.backward();
    } catch (const std::exception& e) {
      throw std::runtime_error("train_step: backward failed on shape " +
                               largest.id(grid) + ": " + e.what());
    }

    // Student passes with in-place distillation.
    for (size_t i = 1; i < losses.sampled.size(); ++i) {
      const SubnetShape& s = shape_at(losses.sampled[i].first, losses.sampled[i].second);
      ForwardOptions<T> student_opt;
      student_opt.shape = &s;
      student_opt.gate_training = true;
      student_opt.rng = &rng;
      auto student_logits = forward(*model, std::span<const int32_t>(inputs), batch, seq,
                                    student_opt);
      auto li = soft_cross_entropy(student_logits, teacher_probs);
      double li_val = double(li.item());
      if (!std::isfinite(li_val))
        throw std::runtime_error("train_step: non-finite distill loss on shape " + s.id(grid));
      losses.distill.push_back(li_val);
      double scale_i =
          balance ? std::abs(losses.ground_truth) / (std::abs(li_val) + balance_eps) : 1.0;
      losses.scales.push_back(scale_i);
      scale(li, T(scale_i)).backward();
    }

    losses.total = balanced_total(losses.ground_truth, losses.distill, balance_eps, balance,
                                  nullptr);
    opt.step(params);
    return losses;
  }
};

// ---------------------------------------------------------------------------
// Base-model pretraining (stands in for a public pretrained checkpoint)
// ---------------------------------------------------------------------------

struct PretrainParams {
  int steps = 2000;
  int batch = 8;
  int seq_len = 128;
  double lr = 1e-3;
};

// Uniformly sampled training windows of seq_len+1 tokens.
inline std::vector<int32_t> sample_batch(std::span<const int32_t> train, int batch, int seq_len,
                                         Rng& rng) {
  int64_t window = seq_len + 1;
  if (int64_t(train.size()) < window)
    throw std::invalid_argument("sample_batch: corpus too small for one batch (need " +
                                std::to_string(window) + " tokens, have " +
                                std::to_string(train.size()) + ")");
  std::vector<int32_t> out(size_t(batch) * size_t(window));
  for (int b = 0; b < batch; ++b) {
    int64_t start = rng.uniform_int(int64_t(train.size()) - window + 1);
    std::copy_n(train.data() + start, window, out.data() + int64_t(b) * window);
  }
  return out;
}

template <typename T>
ElasticModelT<T> pretrain(const ModelConfig& cfg, std::span<const int32_t> train,
                          const PretrainParams& params, Rng& rng,
                          const std::function<void(int, double)>& on_step = nullptr) {
  auto model = ElasticModelT<T>::init(cfg, rng);
  model.set_base_trainable(true);
  std::vector<TensorT<T>*> plist;
  model.for_each_param([&](const std::string&, TensorT<T>& t) { plist.push_back(&t); });

  AdamW<T> opt;
  opt.lr = params.lr;
  for (int step = 0; step < params.steps; ++step) {
    auto batch_tokens = sample_batch(train, params.batch, params.seq_len, rng);
    std::vector<int32_t> inputs(size_t(params.batch) * size_t(params.seq_len));
    std::vector<int32_t> targets(inputs.size());
    int64_t window = params.seq_len + 1;
    for (int b = 0; b < params.batch; ++b) {
      const int32_t* base = batch_tokens.data() + int64_t(b) * window;
      std::copy_n(base, params.seq_len, inputs.data() + int64_t(b) * params.seq_len);
      std::copy_n(base + 1, params.seq_len, targets.data() + int64_t(b) * params.seq_len);
    }
    auto logits = forward(model, std::span<const int32_t>(inputs), params.batch, params.seq_len);
    auto loss = cross_entropy(logits, targets);
    double loss_val = double(loss.item());
    if (!std::isfinite(loss_val))
      throw std::runtime_error("pretrain: non-finite loss at step " + std::to_string(step));
    loss.backward();
    opt.step(plist);
    if (on_step) on_step(step, loss_val);
  }
  model.set_base_trainable(false);
  return model;
}

}  // namespace elm
