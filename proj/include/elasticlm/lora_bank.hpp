#pragma once

// Shape-routed mixture of low-rank adapters: every adapted matrix carries a
// bank of `count` LoRA pairs; a single global noisy top-k gate, driven only
// by the subnet-shape one-hot mask, picks which pairs are active and with
// what weights. Active pairs can be merged densely at deployment time.

#include <elasticlm/model_config.hpp>
#include <elasticlm/tensor.hpp>

#include <limits>
#include <numeric>
#include <string>
#include <vector>

namespace elm {

enum class MatrixKind : int { q = 0, k, v, o, gate, up, down };
constexpr int kMatrixKinds = 7;

inline const char* matrix_kind_name(MatrixKind k) {
  static const char* names[] = {"q", "k", "v", "o", "gate", "up", "down"};
  return names[int(k)];
}

inline int matrix_index(int layer, MatrixKind kind) {
  return layer * kMatrixKinds + int(kind);
}

// Gate decision for one subnet shape: a dense coefficient vector with exactly
// min(active, count) nonzeros summing to one, plus the surviving indices.
struct GateOutput {
  std::vector<double> coefficients;  // length = count
  std::vector<int> active;           // ascending indices of nonzeros
};

template <typename T>
struct LoraBankT {
  int rank = 4;
  int count = 5;   // LoRAs per adapted matrix
  int active = 2;  // top-k
  int mask_dim = 0;
  bool noise_enabled = true;

  TensorT<T> gate_w;        // [mask_dim, count]
  TensorT<T> gate_noise_w;  // [mask_dim, count]

  struct Entry {
    std::vector<TensorT<T>> a;  // [in, rank], small gaussian
    std::vector<TensorT<T>> b;  // [rank, out], zero
    int64_t in = 0, out = 0;
  };
  std::vector<Entry> entries;  // indexed by matrix_index(layer, kind)

  static LoraBankT init(const ModelConfig& cfg, int mask_dim, int rank, int count,
                        int active, Rng& rng, T init_std = T(0.02)) {
    if (count < 1 || active < 1 || active > count)
      throw std::invalid_argument("LoraBank: need 1 <= active <= count");
    LoraBankT bank;
    bank.rank = rank;
    bank.count = count;
    bank.active = active;
    bank.mask_dim = mask_dim;
    bank.gate_w = TensorT<T>::randn({mask_dim, count}, rng, init_std);
    bank.gate_w.set_requires_grad(true);
    bank.gate_noise_w = TensorT<T>::zeros({mask_dim, count});
    bank.gate_noise_w.set_requires_grad(true);

    auto dims = [&cfg](MatrixKind kind) -> std::pair<int64_t, int64_t> {
      int attn = cfg.attn_width();
      switch (kind) {
        case MatrixKind::q:
        case MatrixKind::k:
        case MatrixKind::v: return {cfg.d_model, attn};
        case MatrixKind::o: return {attn, cfg.d_model};
        case MatrixKind::gate:
        case MatrixKind::up: return {cfg.d_model, cfg.d_ffn};
        case MatrixKind::down: return {cfg.d_ffn, cfg.d_model};
      }
      return {0, 0};
    };

    bank.entries.resize(size_t(cfg.n_layers) * kMatrixKinds);
    for (int l = 0; l < cfg.n_layers; ++l) {
      for (int k = 0; k < kMatrixKinds; ++k) {
        auto [in, out] = dims(MatrixKind(k));
        Entry e;
        e.in = in;
        e.out = out;
        for (int i = 0; i < count; ++i) {
          e.a.push_back(TensorT<T>::randn({in, rank}, rng, init_std).set_requires_grad(true));
          e.b.push_back(TensorT<T>::zeros({rank, out}).set_requires_grad(true));
        }
        bank.entries[size_t(matrix_index(l, MatrixKind(k)))] = std::move(e);
      }
    }
    return bank;
  }

  // Stable (name, tensor) enumeration of all trainable parameters.
  template <typename Fn>
  void for_each_param(Fn&& fn) {
    fn(std::string("bank.gate.w"), gate_w);
    fn(std::string("bank.gate.noise_w"), gate_noise_w);
    int n_layers = int(entries.size()) / kMatrixKinds;
    for (int l = 0; l < n_layers; ++l) {
      for (int k = 0; k < kMatrixKinds; ++k) {
        auto& e = entries[size_t(matrix_index(l, MatrixKind(k)))];
        std::string base = "bank.layers." + std::to_string(l) + "." +
                           matrix_kind_name(MatrixKind(k));
        for (int i = 0; i < count; ++i) {
          fn(base + ".a." + std::to_string(i), e.a[size_t(i)]);
          fn(base + ".b." + std::to_string(i), e.b[size_t(i)]);
        }
      }
    }
  }
};

// Differentiable gate evaluation for one shape mask. The top-k selection is
// made on values (noise included); gradients flow through the softmax over
// the surviving logits into gate_w and, when noise is on, gate_noise_w.
template <typename T>
struct GateEval {
  GateOutput out;
  TensorT<T> coefficients;  // [k], aligned with out.active
};

template <typename T>
GateEval<T> gate(LoraBankT<T>& bank, const std::vector<double>& shape_mask, Rng* rng,
                 bool training) {
  if (int(shape_mask.size()) != bank.mask_dim)
    throw ShapeError("gate", "mask dimension " + std::to_string(shape_mask.size()) +
                                 " vs gate input " + std::to_string(bank.mask_dim));
  std::vector<T> mv(shape_mask.begin(), shape_mask.end());
  auto mask = TensorT<T>::from({1, int64_t(bank.mask_dim)}, std::move(mv));

  auto h = matmul(mask, bank.gate_w);  // [1, count]
  bool with_noise = training && bank.noise_enabled;
  if (with_noise) {
    if (rng == nullptr) throw std::invalid_argument("gate: rng required when noise is on");
    std::vector<T> eps(size_t(bank.count));
    for (auto& e : eps) e = T(rng->normal());
    auto eps_t = TensorT<T>::from({1, int64_t(bank.count)}, std::move(eps));
    h = add(h, mul(softplus(matmul(mask, bank.gate_noise_w)), eps_t));
  }

  // KeepTopK on the noisy logits; ties broken toward the lower index.
  int k = std::min(bank.active, bank.count);
  std::vector<int> order(size_t(bank.count));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return h.data()[size_t(a)] > h.data()[size_t(b)];
  });
  std::vector<int> active(order.begin(), order.begin() + k);
  std::sort(active.begin(), active.end());

  std::vector<int64_t> idx(active.begin(), active.end());
  auto survivors = gather(reshape(h, {int64_t(bank.count)}), idx);
  auto coeff = softmax_rows(reshape(survivors, {1, int64_t(k)}));
  coeff = reshape(coeff, {int64_t(k)});

  GateEval<T> ev;
  ev.coefficients = coeff;
  ev.out.coefficients.assign(size_t(bank.count), 0.0);
  for (int i = 0; i < k; ++i)
    ev.out.coefficients[size_t(active[size_t(i)])] = double(coeff.data()[size_t(i)]);
  ev.out.active = std::move(active);
  return ev;
}

// Effective weight of one adapted matrix under a gate decision:
//   W = W_base + sum_i g_i * (A_i @ B_i), active terms only.
template <typename T>
TensorT<T> composite(LoraBankT<T>& bank, const TensorT<T>& base, int matrix_id,
                     const GateEval<T>& ev) {
  if (matrix_id < 0 || size_t(matrix_id) >= bank.entries.size())
    throw std::out_of_range("composite: unknown matrix id " + std::to_string(matrix_id));
  auto& e = bank.entries[size_t(matrix_id)];
  TensorT<T> w = base;
  for (size_t i = 0; i < ev.out.active.size(); ++i) {
    int j = ev.out.active[i];
    auto coeff_i = gather(ev.coefficients, {int64_t(i)});
    w = add(w, scale_by(matmul(e.a[size_t(j)], e.b[size_t(j)]), coeff_i));
  }
  return w;
}

// Dense per-matrix deltas sum_i g_i A_i B_i for a shape, evaluated with the
// gate noise off. Used when extracting a subnet for deployment.
template <typename T>
std::vector<std::vector<T>> merge_deltas(LoraBankT<T>& bank,
                                         const std::vector<double>& shape_mask,
                                         bool training = false) {
  if (training) throw std::invalid_argument("merge_deltas: gate noise must be off at merge time");
  auto ev = gate(bank, shape_mask, nullptr, false);
  std::vector<std::vector<T>> deltas(bank.entries.size());
  for (size_t m = 0; m < bank.entries.size(); ++m) {
    auto& e = bank.entries[m];
    std::vector<T> d(size_t(e.in * e.out), T(0));
    EMap<T> dm(d.data(), e.in, e.out);
    for (size_t i = 0; i < ev.out.active.size(); ++i) {
      int j = ev.out.active[i];
      T g = T(ev.out.coefficients[size_t(j)]);
      dm.noalias() += g * (ECMap<T>(e.a[size_t(j)].data().data(), e.in, bank.rank) *
                           ECMap<T>(e.b[size_t(j)].data().data(), bank.rank, e.out));
    }
    deltas[m] = std::move(d);
  }
  return deltas;
}

}  // namespace elm
