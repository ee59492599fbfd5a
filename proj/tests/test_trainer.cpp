#include <elasticlm/corpus_gen.hpp>
#include <elasticlm/trainer.hpp>

#include <doctest.h>

#include <set>

using namespace elm;

namespace {

ModelConfig trainer_cfg(int layers = 3) {
  ModelConfig cfg;
  cfg.n_layers = layers;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_head = 8;
  cfg.d_ffn = 32;
  cfg.vocab_size = CharTokenizer::kVocab;
  cfg.max_seq_len = 32;
  return cfg;
}

ShapeGrid trainer_grid() {
  ShapeGrid g;
  g.depths = {3, 2};
  g.width_ratios = {1.0, 0.5};
  return g;
}

template <typename T>
void attach_plan(ElasticModelT<T>& model, const ShapeGrid& grid) {
  std::vector<int32_t> calib(320);
  for (size_t i = 0; i < calib.size(); ++i) calib[i] = int32_t((5 * i) % size_t(model.cfg.vocab_size));
  auto stats = collect_stats(model, std::span<const int32_t>(calib), 16);
  model.plan = std::make_shared<WidthPlan>(build_width_plan(
      model.cfg, stats, [&](int l, BlockKind k) { return model.last_matrix_f64(l, k); },
      grid.width_ratios));
}

template <typename T>
OfaTrainer<T> make_trainer(ElasticModelT<T>& model, LoraBankT<T>& bank, uint64_t seed) {
  auto grid = trainer_grid();
  if (!model.plan) attach_plan(model, grid);
  // Additive synthetic evaluator: later layers more valuable.
  auto table = build_dp(
      [](const std::vector<uint8_t>& r) {
        double s = 0;
        for (size_t i = 0; i < r.size(); ++i)
          if (r[i]) s += double(i + 1);
        return s;
      },
      model.cfg.n_layers, 1);
  OfaTrainer<T> tr;
  tr.model = &model;
  tr.bank = &bank;
  tr.grid = grid;
  tr.shapes = build_grid_shapes(grid, table);
  tr.rng = Rng(seed);
  tr.k_subnets = 3;
  tr.init_params();
  return tr;
}

std::vector<int32_t> step_tokens(int batch, int seq, int vocab, int salt = 0) {
  std::vector<int32_t> t(size_t(batch) * size_t(seq + 1));
  for (size_t i = 0; i < t.size(); ++i) t[i] = int32_t((i * 11 + 3 + size_t(salt)) % size_t(vocab));
  return t;
}

template <typename T>
std::vector<double> flat_grads(LoraBankT<T>& bank) {
  std::vector<double> g;
  bank.for_each_param([&](const std::string&, TensorT<T>& t) {
    if (t.has_grad())
      for (auto v : t.grad()) g.push_back(double(v));
    else
      for (size_t i = 0; i < t.data().size(); ++i) g.push_back(0.0);
  });
  return g;
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb) + 1e-300);
}

}  // namespace

TEST_CASE("adamw first step moves a held-constant-gradient scalar by exactly -lr") {
  auto p = TensorT<double>::from({1}, {0.5});
  p.set_requires_grad(true);
  p.grad()[0] = 1.0;
  AdamW<double> opt;
  opt.lr = 0.01;
  opt.eps = 0.0;  // isolate the bias-corrected ratio
  std::vector<TensorT<double>*> params = {&p};
  opt.step(params);
  CHECK(p.data()[0] == doctest::Approx(0.5 - 0.01).epsilon(1e-12));
}

TEST_CASE("adamw: zero grads leave parameters unchanged with zero decay") {
  auto p = TensorT<double>::from({2}, {0.5, -0.25});
  p.set_requires_grad(true);
  p.grad();  // allocate zeros
  AdamW<double> opt;
  std::vector<TensorT<double>*> params = {&p};
  opt.step(params);
  CHECK(p.data() == std::vector<double>{0.5, -0.25});
}

TEST_CASE("adamw trajectories are deterministic under a fixed seed") {
  auto run = [](uint64_t seed) {
    Rng rng(seed);
    auto p = TensorT<double>::randn({8}, rng);
    p.set_requires_grad(true);
    AdamW<double> opt;
    opt.lr = 0.05;
    std::vector<TensorT<double>*> params = {&p};
    for (int i = 0; i < 25; ++i) {
      sum_all(mul(p, p)).backward();
      opt.step(params);
    }
    return p.data();
  };
  CHECK(run(3) == run(3));
  CHECK(run(3) != run(4));
}

TEST_CASE("sandwich sampling: extremes always included, no replacement, deterministic") {
  auto grid = trainer_grid();
  Rng rng(1);
  auto two = sandwich_sample(grid, 2, rng);
  CHECK(two == std::vector<std::pair<int, int>>{{0, 0}, {1, 1}});

  Rng r1(2), r2(2);
  for (int i = 0; i < 50; ++i) {
    auto a = sandwich_sample(grid, 4, r1);
    auto b = sandwich_sample(grid, 4, r2);
    CHECK(a == b);
    CHECK(a[0] == std::pair<int, int>{0, 0});
    CHECK(a[1] == std::pair<int, int>{1, 1});
    std::set<std::pair<int, int>> uniq(a.begin(), a.end());
    CHECK(uniq.size() == a.size());
  }

  CHECK_THROWS_AS(sandwich_sample(grid, 5, rng), std::invalid_argument);
}

TEST_CASE("sandwich coverage: every grid shape appears within 1000 steps") {
  ShapeGrid grid;
  grid.depths = {8, 7, 6, 5};
  grid.width_ratios = {1.0, 0.75, 0.5};
  Rng rng(7);
  std::set<std::pair<int, int>> seen;
  for (int i = 0; i < 1000; ++i)
    for (auto s : sandwich_sample(grid, 4, rng)) seen.insert(s);
  CHECK(seen.size() == grid.size());
}

TEST_CASE("balanced total: hand case and K*c identity") {
  std::vector<double> scales;
  double total = balanced_total(2.0, {8.0, 0.5}, 0.0, true, &scales);
  CHECK(total == doctest::Approx(6.0));
  CHECK(scales[0] == doctest::Approx(0.25));
  CHECK(scales[1] == doctest::Approx(4.0));

  double c = 0.731;
  CHECK(balanced_total(c, {c, c, c}, 0.0, true, nullptr) == doctest::Approx(4 * c));

  CHECK_THROWS_AS(
      balanced_total(1.0, {std::numeric_limits<double>::quiet_NaN()}, 0.0, true, nullptr),
      std::runtime_error);
}

TEST_CASE("scaled distill loss backprops exactly s_i times the raw gradient") {
  Rng rng(9);
  auto cfg = trainer_cfg();
  auto model = ElasticModelT<double>::init(cfg, rng);
  model.set_base_trainable(false);
  auto bank = LoraBankT<double>::init(cfg, trainer_grid().mask_dim(), 2, 3, 2, rng);
  for (auto& e : bank.entries)
    for (auto& b : e.b) b.data() = TensorT<double>::randn(b.shape(), rng, 0.05).data();
  bank.noise_enabled = false;
  auto model_bank = std::make_shared<LoraBankT<double>>(bank);
  model.bank = model_bank;

  auto grid = trainer_grid();
  auto shape = SubnetShape::full(grid, cfg.n_layers);
  std::vector<int32_t> toks = {1, 5, 9, 2, 7, 3};
  ForwardOptions<double> opt;
  opt.shape = &shape;

  auto teacher = softmax_rows(forward(model, std::span<const int32_t>(toks), 1, 6, opt)).detach();

  auto grads_for = [&](double s) {
    model_bank->for_each_param([](const std::string&, TensorT<double>& t) { t.zero_grad(); });
    auto logits = forward(model, std::span<const int32_t>(toks), 1, 6, opt);
    auto li = soft_cross_entropy(logits, teacher);
    scale(li, s).backward();
    return flat_grads(*model_bank);
  };
  auto g1 = grads_for(1.0);
  auto g3 = grads_for(3.0);
  REQUIRE(g1.size() == g3.size());
  for (size_t i = 0; i < g1.size(); ++i)
    CHECK(g3[i] == doctest::Approx(3.0 * g1[i]).epsilon(1e-9));
}

TEST_CASE("train step: frozen base, K*L1 identity, entropy distill on equal shapes") {
  Rng rng(10);
  auto cfg = trainer_cfg();
  auto model = ElasticModelT<double>::init(cfg, rng);
  auto bank = std::make_shared<LoraBankT<double>>(
      LoraBankT<double>::init(cfg, trainer_grid().mask_dim(), 2, 3, 2, rng));
  bank->noise_enabled = false;
  model.bank = bank;
  auto tr = make_trainer(model, *bank, 11);

  double base_norm_before = 0;
  model.for_each_param([&](const std::string&, TensorT<double>& t) {
    for (double v : t.data()) base_norm_before += v * v;
  });

  auto toks = step_tokens(2, 12, cfg.vocab_size);
  // Teacher == student shape: distill loss equals the teacher entropy.
  auto losses = tr.train_step(std::span<const int32_t>(toks), 2, 12,
                              std::vector<std::pair<int, int>>{{0, 0}, {0, 0}});
  REQUIRE(losses.distill.size() == 1);

  // Entropy of the (uniformish) untrained teacher distribution.
  CHECK(losses.distill[0] > 0.0);
  CHECK(losses.distill[0] < std::log(96.0) + 0.1);

  // With eps > 0 the identity is near-exact for positive losses.
  CHECK(losses.total ==
        doctest::Approx(2.0 * losses.ground_truth).epsilon(1e-6));

  // Base untouched by the optimizer step.
  double base_norm_after = 0;
  model.for_each_param([&](const std::string&, TensorT<double>& t) {
    CHECK_FALSE(t.has_grad());
    for (double v : t.data()) base_norm_after += v * v;
  });
  CHECK(base_norm_after == base_norm_before);
}

TEST_CASE("balancing changes the gradient direction when loss magnitudes differ") {
  auto cfg = trainer_cfg();
  // A briefly trained base model: the full-shape ground-truth loss is small
  // while shrunk-subnet distill losses stay large, so the balancing scales
  // differ materially from one.
  std::vector<int32_t> corpus(3000);
  for (size_t i = 0; i < corpus.size(); ++i) corpus[i] = int32_t((i * 17 + 5) % 89);
  PretrainParams pp;
  pp.steps = 120;
  pp.batch = 8;
  pp.seq_len = 24;
  pp.lr = 3e-3;
  Rng prng(12);
  auto model = pretrain<double>(cfg, std::span<const int32_t>(corpus), pp, prng);
  Rng rng(13);
  auto bank = std::make_shared<LoraBankT<double>>(
      LoraBankT<double>::init(cfg, trainer_grid().mask_dim(), 2, 3, 2, rng));
  for (auto& e : bank->entries)
    for (auto& b : e.b) b.data() = TensorT<double>::randn(b.shape(), rng, 0.05).data();
  bank->noise_enabled = false;
  model.bank = bank;

  std::vector<int32_t> toks(2 * 13);
  for (size_t i = 0; i < toks.size(); ++i) toks[i] = corpus[i + 40];
  auto sampled = std::vector<std::pair<int, int>>{{0, 0}, {1, 1}, {0, 1}};

  // Capture gradients directly without an optimizer step.
  auto capture = [&](bool balance) {
    bank->for_each_param([](const std::string&, TensorT<double>& t) {
      t.set_requires_grad(true);
      t.zero_grad();
    });
    auto tr = make_trainer(model, *bank, 13);
    auto& largest = tr.shape_at(0, 0);
    ForwardOptions<double> topt;
    topt.shape = &largest;
    std::vector<int32_t> inputs(2 * 12), tgt(2 * 12);
    for (int b = 0; b < 2; ++b) {
      std::copy_n(toks.data() + b * 13, 12, inputs.data() + b * 12);
      std::copy_n(toks.data() + b * 13 + 1, 12, tgt.data() + b * 12);
    }
    auto tl = forward(model, std::span<const int32_t>(inputs), 2, 12, topt);
    auto l1 = cross_entropy(tl, tgt);
    auto probs = softmax_rows(tl).detach();
    l1.backward();
    for (size_t i = 1; i < sampled.size(); ++i) {
      auto& s = tr.shape_at(sampled[i].first, sampled[i].second);
      ForwardOptions<double> sopt;
      sopt.shape = &s;
      auto sl = forward(model, std::span<const int32_t>(inputs), 2, 12, sopt);
      auto li = soft_cross_entropy(sl, probs);
      double sc = balance ? std::abs(l1.item()) / (std::abs(li.item()) + 1e-8) : 1.0;
      scale(li, sc).backward();
    }
    return flat_grads(*bank);
  };

  auto balanced = capture(true);
  auto unbalanced = capture(false);
  double cos = cosine(balanced, unbalanced);
  CHECK(cos < 0.999);
  CHECK(cos > 0.0);
}

TEST_CASE("train steps are bit-deterministic under a fixed seed") {
  auto run = [](uint64_t seed) {
    Rng rng(20);
    auto cfg = trainer_cfg();
    auto model = ElasticModelT<float>::init(cfg, rng);
    auto bank = std::make_shared<LoraBankT<float>>(
        LoraBankT<float>::init(cfg, trainer_grid().mask_dim(), 2, 3, 2, rng));
    model.bank = bank;
    auto tr = make_trainer(model, *bank, seed);
    std::vector<double> trace;
    for (int i = 0; i < 5; ++i) {
      auto toks = step_tokens(2, 12, cfg.vocab_size, i);
      auto l = tr.train_step(std::span<const int32_t>(toks), 2, 12);
      trace.push_back(l.total);
    }
    std::vector<float> gate(bank->gate_w.data().begin(), bank->gate_w.data().end());
    return std::pair{trace, gate};
  };
  auto a = run(5);
  auto b = run(5);
  CHECK(a.first == b.first);
  CHECK(a.second == b.second);
}

TEST_CASE("pretraining lowers validation perplexity below the untrained model") {
  auto gen = generate_corpus(77, {.target_chars = 12000, .n_facts = 8, .repeats = 8});
  auto dir = std::filesystem::temp_directory_path() / "elm_trainer_corpus";
  std::filesystem::create_directories(dir);
  atomic_write_file(dir / "corpus.txt", gen.text);
  atomic_write_file(dir / "facts.tsv", gen.facts.to_tsv());
  auto corpus = Corpus::load(dir / "corpus.txt", dir / "facts.tsv");
  std::filesystem::remove_all(dir);

  auto cfg = trainer_cfg(2);
  Rng init_rng(30);
  auto untrained = ElasticModelT<float>::init(cfg, init_rng);
  std::vector<int32_t> valid_sub(corpus.valid.begin(),
                                 corpus.valid.begin() + std::min<size_t>(800, corpus.valid.size()));
  double ppl_untrained =
      perplexity(untrained, nullptr, std::span<const int32_t>(valid_sub), 32);
  // Untrained PPL is near vocab size.
  CHECK(ppl_untrained == doctest::Approx(96.0).epsilon(0.05));

  PretrainParams params;
  params.steps = 60;
  params.batch = 8;
  params.seq_len = 32;
  params.lr = 2e-3;
  Rng train_rng(30);
  auto model = pretrain<float>(cfg, std::span<const int32_t>(corpus.train), params, train_rng);
  double ppl_trained = perplexity(model, nullptr, std::span<const int32_t>(valid_sub), 32);
  CHECK(ppl_trained < ppl_untrained);
  CHECK(ppl_trained < 25.0);

  // Corpus-too-small guard.
  std::vector<int32_t> tiny(10, 1);
  Rng r2(1);
  CHECK_THROWS_AS(sample_batch(std::span<const int32_t>(tiny), 1, 32, r2),
                  std::invalid_argument);
}
