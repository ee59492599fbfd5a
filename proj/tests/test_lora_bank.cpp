#include <elasticlm/lora_bank.hpp>
#include <elasticlm/model.hpp>

#include <doctest.h>

#include "gradcheck.hpp"

using namespace elm;

namespace {

ModelConfig bank_cfg() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 12;
  cfg.n_heads = 2;
  cfg.d_head = 6;
  cfg.d_ffn = 24;
  cfg.vocab_size = 20;
  cfg.max_seq_len = 16;
  return cfg;
}

std::vector<double> random_one_hot_mask(int dim, Rng& rng) {
  std::vector<double> m(size_t(dim), 0.0);
  int split = dim / 2;
  m[size_t(rng.uniform_int(split))] = 1.0;
  m[size_t(split + rng.uniform_int(dim - split))] = 1.0;
  return m;
}

}  // namespace

TEST_CASE("gate coefficients: exactly min(k,T) nonzero, sum one, nonnegative") {
  Rng rng(1);
  auto cfg = bank_cfg();
  auto bank = LoraBankT<double>::init(cfg, 7, 2, 5, 2, rng);
  // Spread the gate weights so draws vary.
  bank.gate_w.data() = TensorT<double>::randn({7, 5}, rng, 1.0).data();

  for (int trial = 0; trial < 300; ++trial) {
    auto mask = random_one_hot_mask(7, rng);
    auto ev = gate(bank, mask, &rng, trial % 2 == 0);  // alternate noise on/off
    int nonzero = 0;
    double sum = 0.0;
    for (double c : ev.out.coefficients) {
      CHECK(c >= 0.0);
      if (c != 0.0) ++nonzero;
      sum += c;
    }
    CHECK(nonzero == 2);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(ev.out.active.size() == 2);
  }
}

TEST_CASE("noise off with k = T reduces to a plain softmax over H") {
  Rng rng(2);
  auto cfg = bank_cfg();
  auto bank = LoraBankT<double>::init(cfg, 3, 2, 3, 3, rng);
  bank.gate_w.data() = {0.5, -1.0, 2.0,  //
                        0.0, 0.0, 0.0,   //
                        1.0, 1.0, 1.0};
  std::vector<double> mask = {1, 0, 0};
  auto ev = gate(bank, mask, nullptr, false);
  // softmax(0.5, -1.0, 2.0)
  double z = std::exp(0.5) + std::exp(-1.0) + std::exp(2.0);
  CHECK(ev.out.coefficients[0] == doctest::Approx(std::exp(0.5) / z));
  CHECK(ev.out.coefficients[1] == doctest::Approx(std::exp(-1.0) / z));
  CHECK(ev.out.coefficients[2] == doctest::Approx(std::exp(2.0) / z));
}

TEST_CASE("noise off with k = 1 is one-hot at the argmax") {
  Rng rng(3);
  auto cfg = bank_cfg();
  auto bank = LoraBankT<double>::init(cfg, 3, 2, 4, 1, rng);
  bank.gate_w.data().assign(3 * 4, 0.0);
  bank.gate_w.data()[2] = 3.0;  // row 0, lora 2
  std::vector<double> mask = {1, 0, 0};
  auto ev = gate(bank, mask, nullptr, false);
  CHECK(ev.out.coefficients == std::vector<double>{0, 0, 1, 0});
  CHECK(ev.out.active == std::vector<int>{2});
}

TEST_CASE("hand case: H = (1, 2, 0) with k = 2") {
  Rng rng(4);
  auto cfg = bank_cfg();
  auto bank = LoraBankT<double>::init(cfg, 3, 2, 3, 2, rng);
  bank.gate_w.data() = {1.0, 2.0, 0.0};
  bank.mask_dim = 1;
  bank.gate_w = TensorT<double>::from({1, 3}, {1.0, 2.0, 0.0});
  bank.gate_noise_w = TensorT<double>::zeros({1, 3});
  std::vector<double> mask = {1.0};
  auto ev = gate(bank, mask, nullptr, false);
  CHECK(ev.out.coefficients[0] == doctest::Approx(0.2689).epsilon(1e-3));
  CHECK(ev.out.coefficients[1] == doctest::Approx(0.7311).epsilon(1e-3));
  CHECK(ev.out.coefficients[2] == 0.0);
}

TEST_CASE("gate determinism and mask-dependent routing") {
  Rng rng(5);
  auto cfg = bank_cfg();
  auto bank = LoraBankT<double>::init(cfg, 4, 2, 4, 2, rng);
  // Mask position 0 prefers loras {0,1}; mask position 1 prefers {2,3}.
  bank.gate_w = TensorT<double>::from({2, 4}, {5.0, 4.0, 0.0, 0.0,  //
                                               0.0, 0.0, 5.0, 4.0});
  bank.gate_noise_w = TensorT<double>::zeros({2, 4});
  bank.mask_dim = 2;

  auto a1 = gate(bank, {1, 0}, nullptr, false);
  auto a2 = gate(bank, {1, 0}, nullptr, false);
  CHECK(a1.out.coefficients == a2.out.coefficients);  // pure with noise off
  CHECK(a1.out.active == std::vector<int>{0, 1});

  auto b = gate(bank, {0, 1}, nullptr, false);
  CHECK(b.out.active == std::vector<int>{2, 3});

  // With noise on, the same mask can route differently across draws.
  bank.gate_noise_w = TensorT<double>::from({2, 4}, std::vector<double>(8, 3.0));
  Rng noise_rng(6);
  bool saw_coeff_change = false;
  auto base = gate(bank, {1, 0}, &noise_rng, true);
  for (int i = 0; i < 20 && !saw_coeff_change; ++i)
    saw_coeff_change = gate(bank, {1, 0}, &noise_rng, true).out.coefficients !=
                       base.out.coefficients;
  CHECK(saw_coeff_change);
}

TEST_CASE("ties in the top-k break toward the lower index") {
  Rng rng(7);
  auto cfg = bank_cfg();
  auto bank = LoraBankT<double>::init(cfg, 3, 2, 4, 2, rng);
  bank.gate_w = TensorT<double>::zeros({1, 4});  // H identically zero
  bank.gate_noise_w = TensorT<double>::zeros({1, 4});
  bank.mask_dim = 1;
  auto ev = gate(bank, {1.0}, nullptr, false);
  CHECK(ev.out.active == std::vector<int>{0, 1});
}

TEST_CASE("composite forward equals the densely materialized weight") {
  Rng rng(8);
  auto cfg = bank_cfg();
  auto bank = LoraBankT<double>::init(cfg, 7, 2, 5, 2, rng);
  for (auto& e : bank.entries)
    for (auto& b : e.b) b.data() = TensorT<double>::randn(b.shape(), rng, 0.1).data();
  bank.gate_w.data() = TensorT<double>::randn({7, 5}, rng, 1.0).data();

  auto base = TensorT<double>::randn({cfg.d_model, cfg.attn_width()}, rng);
  std::vector<double> mask = {0, 1, 0, 0, 1, 0, 0};
  auto ev = gate(bank, mask, nullptr, false);
  int mid = matrix_index(1, MatrixKind::q);
  auto w_eff = composite(bank, base, mid, ev);

  // Dense oracle.
  auto& e = bank.entries[size_t(mid)];
  std::vector<double> dense(base.data().begin(), base.data().end());
  for (int j : ev.out.active) {
    double g = ev.out.coefficients[size_t(j)];
    for (int64_t r = 0; r < e.in; ++r)
      for (int64_t c = 0; c < e.out; ++c) {
        double dot = 0;
        for (int rk = 0; rk < bank.rank; ++rk)
          dot += e.a[size_t(j)].data()[size_t(r * bank.rank + rk)] *
                 e.b[size_t(j)].data()[size_t(rk * e.out + c)];
        dense[size_t(r * e.out + c)] += g * dot;
      }
  }
  auto x = TensorT<double>::randn({4, cfg.d_model}, rng);
  auto y1 = matmul(x, w_eff);
  auto y2 = matmul(x, TensorT<double>::from(base.shape(), std::move(dense)));
  for (int64_t i = 0; i < y1.numel(); ++i)
    CHECK(std::abs(y1.data()[size_t(i)] - y2.data()[size_t(i)]) < 1e-6);

  CHECK_THROWS_AS(composite(bank, base, 9999, ev), std::out_of_range);
}

TEST_CASE("merge: zero-B banks give zero deltas; merging twice is bit-identical") {
  Rng rng(9);
  auto cfg = bank_cfg();
  auto bank = LoraBankT<double>::init(cfg, 7, 2, 5, 2, rng);
  std::vector<double> mask = {1, 0, 0, 0, 1, 0, 0};

  auto deltas = merge_deltas(bank, mask);
  for (const auto& d : deltas)
    for (double v : d) CHECK(v == 0.0);

  for (auto& e : bank.entries)
    for (auto& b : e.b) b.data() = TensorT<double>::randn(b.shape(), rng, 0.1).data();
  auto d1 = merge_deltas(bank, mask);
  auto d2 = merge_deltas(bank, mask);
  CHECK(d1 == d2);

  CHECK_THROWS_AS(merge_deltas(bank, mask, /*training=*/true), std::invalid_argument);
}

TEST_CASE("distillation gradients stay out of the frozen base") {
  Rng rng(10);
  auto cfg = bank_cfg();
  auto model = ElasticModelT<double>::init(cfg, rng);
  model.set_base_trainable(false);
  auto bank = std::make_shared<LoraBankT<double>>(LoraBankT<double>::init(cfg, 4, 2, 3, 2, rng));
  for (auto& e : bank->entries)
    for (auto& b : e.b) b.data() = TensorT<double>::randn(b.shape(), rng, 0.05).data();
  model.bank = bank;

  ShapeGrid grid;
  grid.depths = {2, 1};
  grid.width_ratios = {1.0, 0.5};
  auto shape = SubnetShape::full(grid, cfg.n_layers);

  std::vector<int32_t> toks = {1, 2, 3, 4, 5, 6};
  ForwardOptions<double> opt;
  opt.shape = &shape;
  auto teacher_logits = forward(model, std::span<const int32_t>(toks), 1, 6, opt);
  auto teacher_probs = softmax_rows(teacher_logits).detach();

  auto student_logits = forward(model, std::span<const int32_t>(toks), 1, 6, opt);
  auto loss = soft_cross_entropy(student_logits, teacher_probs);
  loss.backward();

  model.for_each_param(
      [&](const std::string&, TensorT<double>& t) { CHECK_FALSE(t.has_grad()); });

  int bank_params_with_grad = 0;
  bank->for_each_param([&](const std::string&, TensorT<double>& t) {
    if (t.has_grad()) ++bank_params_with_grad;
  });
  CHECK(bank_params_with_grad > 0);
  CHECK(bank->gate_w.has_grad());
}

TEST_CASE("gradcheck through gate and composite") {
  Rng rng(11);
  auto cfg = bank_cfg();
  auto bank = LoraBankT<double>::init(cfg, 2, 2, 3, 2, rng);
  // Separate the gate logits so the top-k set is stable under perturbation.
  bank.gate_w = TensorT<double>::from({2, 3}, {2.0, 1.0, -3.0, 0.5, 0.2, -1.0});
  bank.gate_w.set_requires_grad(true);
  bank.gate_noise_w = TensorT<double>::zeros({2, 3}).set_requires_grad(true);
  bank.mask_dim = 2;
  for (auto& e : bank.entries)
    for (auto& b : e.b)
      b = TensorT<double>::randn(b.shape(), rng, 0.1).set_requires_grad(true);

  int mid = matrix_index(0, MatrixKind::down);
  auto base = TensorT<double>::randn(bank.entries[size_t(mid)].a[0].shape(), rng);
  base = TensorT<double>::randn({cfg.d_ffn, cfg.d_model}, rng);
  auto x = TensorT<double>::randn({3, cfg.d_ffn}, rng);
  auto probe = TensorT<double>::randn({3, cfg.d_model}, rng);
  std::vector<double> mask = {1, 0};

  auto f = [&]() {
    auto ev = gate(bank, mask, nullptr, false);
    return sum_all(mul(matmul(x, composite(bank, base, mid, ev)), probe));
  };
  auto& e = bank.entries[size_t(mid)];
  auto res = elm::testing::gradcheck(f, {bank.gate_w, e.a[0], e.b[0], e.a[1], e.b[1]});
  CHECK(res.max_rel_err < 1e-4);
  CHECK(res.all_finite);
}
