#include <elasticlm/model.hpp>
#include <elasticlm/width_select.hpp>

#include <doctest.h>

using namespace elm;

namespace {

BlockStats stats_from_rows(const std::vector<std::vector<double>>& rows) {
  BlockStats bs(rows[0].size());
  for (const auto& r : rows) bs.update_row(r);
  return bs;
}

ModelConfig plan_cfg() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.d_model = 8;
  cfg.n_heads = 2;
  cfg.d_head = 4;
  cfg.d_ffn = 16;
  cfg.vocab_size = 20;
  cfg.max_seq_len = 32;
  return cfg;
}

}  // namespace

TEST_CASE("stats: constant channel has variance zero; hand case checks out") {
  auto bs = stats_from_rows({{5, 1}, {5, 3}, {5, 1}, {5, 3}});
  CHECK(bs.mean[0] == doctest::Approx(5.0));
  CHECK(bs.variance(0) == doctest::Approx(0.0));
  CHECK(bs.mean[1] == doctest::Approx(2.0));
  CHECK(bs.variance(1) == doctest::Approx(1.0));  // population variance
}

TEST_CASE("stats from disjoint halves merge to whole-set stats") {
  Rng rng(3);
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < 64; ++i) {
    std::vector<double> r(5);
    for (auto& v : r) v = rng.normal() * 3.0 + 1.0;
    rows.push_back(std::move(r));
  }
  auto whole = stats_from_rows(rows);
  auto first = stats_from_rows({rows.begin(), rows.begin() + 31});
  auto second = stats_from_rows({rows.begin() + 31, rows.end()});
  first.merge(second);
  CHECK(first.count == whole.count);
  for (size_t i = 0; i < 5; ++i) {
    CHECK(first.mean[i] == doctest::Approx(whole.mean[i]).epsilon(1e-12));
    CHECK(first.variance(i) == doctest::Approx(whole.variance(i)).epsilon(1e-12));
  }
}

TEST_CASE("fluctuation score is variance times squared column norm") {
  // Two input channels, two outputs; weight stored row-major [in, out], so
  // the paper's column i is row i here.
  auto bs = stats_from_rows({{0, 1}, {0, 3}});  // variances {0, 1}
  std::vector<double> w = {7, 7,   // channel 0
                           2, 1};  // channel 1 -> norm^2 = 5
  auto f = fluctuation_scores(bs, w, 2);
  CHECK(f[0] == doctest::Approx(0.0));  // zero variance
  CHECK(f[1] == doctest::Approx(5.0));  // 1 * (4 + 1)

  std::vector<double> w2 = {0, 0, 1, 1};
  auto zero_col = fluctuation_scores(stats_from_rows({{1, 2}, {3, 0}}), w2, 2);
  CHECK(zero_col[0] == doctest::Approx(0.0));  // zero weight column

  CHECK_THROWS_AS(fluctuation_scores(bs, w, 3), std::invalid_argument);
}

TEST_CASE("global ranking retains the top groups across blocks non-uniformly") {
  // Two blocks with raw scores {10, 1} and {5, 4}; per-block normalization
  // then global sort; ratio 1/2 keeps {10, 5}.
  std::vector<WidthPlan::RankEntry> ranking;
  auto n0 = detail::normalize_scores({10, 1});
  auto n1 = detail::normalize_scores({5, 4});
  ranking.push_back({0, BlockKind::ffn, 0, n0[0], 1.0, 1});
  ranking.push_back({0, BlockKind::ffn, 1, n0[1], 1.0, 1});
  ranking.push_back({1, BlockKind::ffn, 0, n1[0], 1.0, 1});
  ranking.push_back({1, BlockKind::ffn, 1, n1[1], 1.0, 1});
  sort_ranking(ranking);
  auto keep = retained_prefix(ranking, 2);  // ceil(0.5 * 4)
  std::vector<std::pair<int, int>> kept;
  for (size_t i = 0; i < ranking.size(); ++i)
    if (keep[i]) kept.push_back({ranking[i].layer, ranking[i].group});
  CHECK(kept == std::vector<std::pair<int, int>>{{0, 0}, {1, 0}});
}

TEST_CASE("compensation bias hand case") {
  // W = [[1,2],[3,4]] in paper layout [out, in]; ours is [in, out]:
  // rows are input channels, so channel 0 -> (1,3), channel 1 -> (2,4).
  std::vector<double> w = {1, 3, 2, 4};
  std::vector<uint8_t> mask = {1, 0};
  std::vector<double> mean = {0.5, -1.0};
  auto b = compensation_bias(w, 2, mask, mean);
  CHECK(b[0] == doctest::Approx(-2.0));
  CHECK(b[1] == doctest::Approx(-4.0));

  // All-retained mask and zero means both give a zero bias.
  auto b1 = compensation_bias(w, 2, std::vector<uint8_t>{1, 1}, mean);
  CHECK(b1 == std::vector<double>{0, 0});
  auto b2 = compensation_bias(w, 2, mask, std::vector<double>{0, 0});
  CHECK(b2 == std::vector<double>{0, 0});

  CHECK_THROWS_AS(compensation_bias(w, 2, mask, std::vector<double>{1.0}),
                  std::invalid_argument);
}

TEST_CASE("masked forward plus bias equals full forward at calibration means") {
  Rng rng(5);
  int in = 6, out = 4;
  auto w64 = TensorT<double>::randn({in, out}, rng);
  std::vector<double> mean = {0.3, -0.2, 1.5, 0.0, -2.0, 0.7};
  std::vector<uint8_t> mask = {1, 0, 1, 0, 0, 1};

  auto bias = compensation_bias(w64.data(), size_t(out), mask, mean);

  // Input row: retained channels random, masked channels at their means.
  std::vector<double> x(static_cast<size_t>(in));
  for (int i = 0; i < in; ++i) x[size_t(i)] = mask[size_t(i)] ? rng.normal() : mean[size_t(i)];

  std::vector<double> full(size_t(out), 0.0), masked(size_t(out), 0.0);
  for (int i = 0; i < in; ++i)
    for (int j = 0; j < out; ++j) {
      full[size_t(j)] += x[size_t(i)] * w64.data()[size_t(i * out + j)];
      if (mask[size_t(i)])
        masked[size_t(j)] += x[size_t(i)] * w64.data()[size_t(i * out + j)];
    }
  for (int j = 0; j < out; ++j)
    CHECK(masked[size_t(j)] + bias[size_t(j)] == doctest::Approx(full[size_t(j)]).epsilon(1e-9));
}

TEST_CASE("plan masks nest across the paper ratio grid and respect budgets") {
  Rng rng(6);
  auto cfg = plan_cfg();
  auto model = ElasticModelT<double>::init(cfg, rng);
  std::vector<int32_t> calib(400);
  for (size_t i = 0; i < calib.size(); ++i) calib[i] = int32_t((5 * i) % cfg.vocab_size);
  auto stats = collect_stats(model, std::span<const int32_t>(calib), 16);
  CHECK(stats.token_count() >= 256);

  std::vector<double> ratios = {1.0, 7.0 / 8, 3.0 / 4, 5.0 / 8, 1.0 / 2};
  auto plan = build_width_plan(
      cfg, stats, [&](int l, BlockKind k) { return model.last_matrix_f64(l, k); }, ratios);

  // Ratio 1 keeps everything.
  CHECK(plan.retained_channels(0) == plan.total_channels());
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (uint8_t h : plan.attention[size_t(l)].masks[0]) CHECK(h == 1);
    for (uint8_t c : plan.ffn[size_t(l)].masks[0]) CHECK(c == 1);
    for (double b : plan.attention[size_t(l)].biases[0]) CHECK(b == 0.0);
    for (double b : plan.ffn[size_t(l)].biases[0]) CHECK(b == 0.0);
  }

  int64_t max_group = cfg.d_head;  // largest structural unit
  for (size_t r = 0; r < ratios.size(); ++r) {
    int64_t target = int64_t(std::ceil(ratios[r] * double(plan.total_channels())));
    int64_t got = plan.retained_channels(r);
    CHECK(got >= target);
    CHECK(got - target < max_group);
  }

  // Nesting: a channel retained at a smaller ratio is retained at every
  // larger ratio.
  for (size_t r = 1; r < ratios.size(); ++r) {
    for (int l = 0; l < cfg.n_layers; ++l) {
      for (int h = 0; h < cfg.n_heads; ++h)
        if (plan.attention[size_t(l)].masks[r][size_t(h)])
          CHECK(plan.attention[size_t(l)].masks[r - 1][size_t(h)] == 1);
      for (int c = 0; c < cfg.d_ffn; ++c)
        if (plan.ffn[size_t(l)].masks[r][size_t(c)])
          CHECK(plan.ffn[size_t(l)].masks[r - 1][size_t(c)] == 1);
    }
  }
}

TEST_CASE("zero-variance channels are pruned before positive-variance ones") {
  auto cfg = plan_cfg();
  ActivationStats stats(cfg);
  Rng rng(7);
  // FFN channel 3 of layer 0 constant; everything else fluctuates.
  for (int t = 0; t < 300; ++t) {
    for (int l = 0; l < cfg.n_layers; ++l) {
      std::vector<double> attn_row(size_t(cfg.attn_width()));
      for (auto& v : attn_row) v = rng.normal();
      stats.attention[size_t(l)].update_row(attn_row);
      std::vector<double> ffn_row(size_t(cfg.d_ffn));
      for (auto& v : ffn_row) v = rng.normal() + 0.5;
      if (l == 0) ffn_row[3] = 2.25;
      stats.ffn[size_t(l)].update_row(ffn_row);
    }
  }
  Rng wrng(8);
  auto weights = [&](int, BlockKind k) {
    int64_t in = k == BlockKind::attention ? cfg.attn_width() : cfg.d_ffn;
    auto d = TensorT<double>::randn({in, cfg.d_model}, wrng).data();
    return std::vector<double>(d.begin(), d.end());
  };
  auto plan = build_width_plan(cfg, stats, weights, {1.0, 0.75, 0.5});

  // The zero-variance channel must be gone already at the first shrunk ratio.
  CHECK(plan.ffn[0].masks[1][3] == 0);
  CHECK(plan.ffn[0].masks[2][3] == 0);
}

TEST_CASE("per-layer normalization makes the ranking scale covariant") {
  auto cfg = plan_cfg();
  ActivationStats stats(cfg);
  Rng rng(9);
  for (int t = 0; t < 200; ++t) {
    for (int l = 0; l < cfg.n_layers; ++l) {
      std::vector<double> attn_row(size_t(cfg.attn_width()));
      for (auto& v : attn_row) v = rng.normal();
      stats.attention[size_t(l)].update_row(attn_row);
      std::vector<double> ffn_row(size_t(cfg.d_ffn));
      for (auto& v : ffn_row) v = rng.normal();
      stats.ffn[size_t(l)].update_row(ffn_row);
    }
  }
  Rng wrng(10);
  std::vector<std::vector<double>> base_w(size_t(cfg.n_layers) * 2);
  for (int l = 0; l < cfg.n_layers; ++l) {
    auto wa = TensorT<double>::randn({cfg.attn_width(), cfg.d_model}, wrng).data();
    base_w[size_t(l) * 2].assign(wa.begin(), wa.end());
    auto wf = TensorT<double>::randn({cfg.d_ffn, cfg.d_model}, wrng).data();
    base_w[size_t(l) * 2 + 1].assign(wf.begin(), wf.end());
  }
  auto weights = [&](int l, BlockKind k) {
    return base_w[size_t(l) * 2 + (k == BlockKind::ffn ? 1 : 0)];
  };
  auto plan1 = build_width_plan(cfg, stats, weights, {1.0, 0.5});

  // Scale layer 0's matrices by 10x: raw scores scale by 100x there, but the
  // per-layer normalization leaves the global ranking unchanged.
  auto scaled_weights = [&](int l, BlockKind k) {
    auto w = weights(l, k);
    if (l == 0)
      for (auto& v : w) v *= 10.0;
    return w;
  };
  auto plan2 = build_width_plan(cfg, stats, scaled_weights, {1.0, 0.5});

  for (size_t i = 0; i < plan1.ranking.size(); ++i) {
    CHECK(plan1.ranking[i].layer == plan2.ranking[i].layer);
    CHECK(int(plan1.ranking[i].kind) == int(plan2.ranking[i].kind));
    CHECK(plan1.ranking[i].group == plan2.ranking[i].group);
  }
  for (int l = 0; l < cfg.n_layers; ++l)
    CHECK(plan1.ffn[size_t(l)].masks[1] == plan2.ffn[size_t(l)].masks[1]);
}

TEST_CASE("ratio validation") {
  auto cfg = plan_cfg();
  ActivationStats stats(cfg);
  std::vector<double> row_a(size_t(cfg.attn_width()), 1.0);
  std::vector<double> row_f(size_t(cfg.d_ffn), 1.0);
  for (int l = 0; l < cfg.n_layers; ++l) {
    stats.attention[size_t(l)].update_row(row_a);
    stats.ffn[size_t(l)].update_row(row_f);
  }
  auto weights = [&](int, BlockKind k) {
    int64_t in = k == BlockKind::attention ? cfg.attn_width() : cfg.d_ffn;
    return std::vector<double>(size_t(in * cfg.d_model), 1.0);
  };
  CHECK_THROWS_AS(build_width_plan(cfg, stats, weights, {1.0, 1.5}), std::out_of_range);
  CHECK_THROWS_AS(build_width_plan(cfg, stats, weights, {1.0, 0.0}), std::out_of_range);
  CHECK_THROWS_AS(build_width_plan(cfg, stats, weights, {0.5, 1.0}), std::invalid_argument);
}

TEST_CASE("width plan json roundtrip") {
  Rng rng(11);
  auto cfg = plan_cfg();
  auto model = ElasticModelT<double>::init(cfg, rng);
  std::vector<int32_t> calib(300);
  for (size_t i = 0; i < calib.size(); ++i) calib[i] = int32_t((3 * i) % cfg.vocab_size);
  auto stats = collect_stats(model, std::span<const int32_t>(calib), 16);
  auto plan = build_width_plan(
      cfg, stats, [&](int l, BlockKind k) { return model.last_matrix_f64(l, k); }, {1.0, 0.5});
  plan.fingerprint = "cafe";

  auto j = width_plan_to_json(plan);
  auto back = width_plan_from_json(j);
  CHECK(back.fingerprint == "cafe");
  CHECK(back.ratios == plan.ratios);
  for (int l = 0; l < cfg.n_layers; ++l) {
    CHECK(back.attention[size_t(l)].masks == plan.attention[size_t(l)].masks);
    CHECK(back.ffn[size_t(l)].masks == plan.ffn[size_t(l)].masks);
    CHECK(back.ffn[size_t(l)].biases == plan.ffn[size_t(l)].biases);
    CHECK(back.ffn[size_t(l)].raw_scores == plan.ffn[size_t(l)].raw_scores);
  }
  CHECK(width_plan_to_json(back).dump() == j.dump());
}
