#pragma once

// Efficiency model (closed-form parameter and per-token FLOP counts, local
// wall-clock latency of extracted subnets) and the hierarchical final-subnet
// search: a coarse grid stage followed by a fine stage in the +-1 grid
// neighborhood of the coarse winner.

#include <elasticlm/data.hpp>
#include <elasticlm/model.hpp>

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <string>
#include <vector>

namespace elm {

struct ShapeCost {
  int64_t params = 0;
  int64_t flops_per_token = 0;  // context length = max_seq_len, head included
  int64_t layer_flops = 0;      // per-token sum over retained layers only
};

// Closed-form counts. Per-layer widths come from the width plan's masks, so
// non-uniform shrinking is priced exactly. The extracted model always carries
// one bias vector per block, which is included in the parameter count.
inline ShapeCost analytic_cost(const ModelConfig& cfg, const WidthPlan* plan,
                               const SubnetShape& shape) {
  size_t widx = size_t(shape.width_index);
  if (widx > 0 && plan == nullptr)
    throw std::invalid_argument("analytic_cost: width-shrunk shape needs a width plan");
  int64_t d = cfg.d_model, L = cfg.max_seq_len;
  ShapeCost c;
  c.params = int64_t(cfg.vocab_size) * d          // token embeddings
             + int64_t(cfg.max_seq_len) * d       // position embeddings
             + d                                   // final norm
             + d * cfg.vocab_size;                 // output head
  for (int l = 0; l < cfg.n_layers; ++l) {
    if (!shape.retained_layers[size_t(l)]) continue;
    int64_t heads = cfg.n_heads;
    int64_t ffn = cfg.d_ffn;
    if (widx > 0) {
      heads = 0;
      for (uint8_t h : plan->attention[size_t(l)].masks[widx]) heads += h ? 1 : 0;
      ffn = 0;
      for (uint8_t ch : plan->ffn[size_t(l)].masks[widx]) ffn += ch ? 1 : 0;
    }
    int64_t a = heads * cfg.d_head;
    c.params += 3 * d * a      // q, k, v
                + a * d + d    // o projection and its bias
                + 2 * d * ffn  // gate, up
                + ffn * d + d  // down projection and its bias
                + 2 * d;       // the two norms
    c.layer_flops += 2 * d * a * 3   // q, k, v products
                     + 2 * a * L     // attention scores
                     + 2 * a * L     // attention context
                     + 2 * a * d     // o projection
                     + 3 * 2 * d * ffn;  // gate, up, down
  }
  c.flops_per_token = c.layer_flops + 2 * d * cfg.vocab_size;
  return c;
}

// Median wall-clock of single-sequence forwards after warmup; single-threaded.
template <typename T>
double measure_latency_ms(const ExtractedModelT<T>& model, int64_t seq, int warmups = 3,
                          int runs = 20) {
  std::vector<int32_t> toks(static_cast<size_t>(seq));
  for (int64_t i = 0; i < seq; ++i)
    toks[size_t(i)] = int32_t((i * 31 + 7) % model.base_cfg.vocab_size);
  for (int i = 0; i < warmups; ++i) forward(model, std::span<const int32_t>(toks), 1, seq);
  std::vector<double> times;
  times.reserve(size_t(runs));
  for (int i = 0; i < runs; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    forward(model, std::span<const int32_t>(toks), 1, seq);
    auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  size_t mid = times.size() / 2;
  return times.size() % 2 ? times[mid] : 0.5 * (times[mid - 1] + times[mid]);
}

struct ProfileRow {
  std::string shape_id;
  int depth = 0;
  double width_ratio = 1.0;
  int64_t params = 0;
  int64_t flops_per_token = 0;
  double latency_ms_p50 = 0.0;
};

// One row per shape, measured on the extracted (merged) model. Rows are
// ordered by (params, flops, shape_id) so the CSV is monotone by cost.
template <typename T>
std::vector<ProfileRow> profile(ElasticModelT<T>& model, const ShapeGrid& grid,
                                const std::vector<SubnetShape>& shapes, int latency_runs = 20) {
  std::vector<ProfileRow> rows;
  for (const auto& shape : shapes) {
    ProfileRow row;
    row.shape_id = shape.id(grid);
    row.depth = grid.depths[size_t(shape.depth_index)];
    row.width_ratio = grid.width_ratios[size_t(shape.width_index)];
    auto cost = analytic_cost(model.cfg, model.plan.get(), shape);
    row.params = cost.params;
    row.flops_per_token = cost.flops_per_token;
    auto extracted = extract(model, shape);
    if (extracted.param_count() != cost.params)
      throw std::logic_error("profile: extracted parameter count " +
                             std::to_string(extracted.param_count()) +
                             " disagrees with the analytic model " + std::to_string(cost.params));
    row.latency_ms_p50 =
        measure_latency_ms(extracted, std::min<int64_t>(model.cfg.max_seq_len, 128), 3,
                           latency_runs);
    rows.push_back(std::move(row));
  }
  std::sort(rows.begin(), rows.end(), [](const ProfileRow& a, const ProfileRow& b) {
    if (a.params != b.params) return a.params < b.params;
    if (a.flops_per_token != b.flops_per_token) return a.flops_per_token < b.flops_per_token;
    return a.shape_id < b.shape_id;
  });
  return rows;
}

inline std::string profile_csv(const std::vector<ProfileRow>& rows) {
  std::string out = "shape_id,depth,width_ratio,params,flops_per_token,latency_ms_p50\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%s,%d,%.4f,%lld,%lld,%.4f\n", r.shape_id.c_str(), r.depth,
                  r.width_ratio, static_cast<long long>(r.params),
                  static_cast<long long>(r.flops_per_token), r.latency_ms_p50);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Hierarchical search
// ---------------------------------------------------------------------------

enum class ConstraintKind { max_params, max_flops, max_latency_ms };

inline const char* constraint_kind_name(ConstraintKind k) {
  switch (k) {
    case ConstraintKind::max_params: return "max-params";
    case ConstraintKind::max_flops: return "max-flops";
    case ConstraintKind::max_latency_ms: return "max-latency-ms";
  }
  return "?";
}

inline ConstraintKind constraint_kind_from_name(const std::string& s) {
  if (s == "max-params" || s == "params") return ConstraintKind::max_params;
  if (s == "max-flops" || s == "flops") return ConstraintKind::max_flops;
  if (s == "max-latency-ms" || s == "latency") return ConstraintKind::max_latency_ms;
  throw std::invalid_argument("unknown constraint kind: " + s);
}

struct SearchSpec {
  ConstraintKind kind = ConstraintKind::max_params;
  double budget = 0.0;
  int coarse_depth_stride = 2;
  int coarse_ratio_stride = 2;
  int fine_radius = 1;
  int latency_runs = 20;

  void validate() const {
    if (budget <= 0.0) throw std::invalid_argument("SearchSpec: budget must be > 0");
    if (coarse_depth_stride < 1 || coarse_ratio_stride < 1 || fine_radius < 0)
      throw std::invalid_argument("SearchSpec: bad strides");
  }
};

struct SearchCandidate {
  int depth_index = 0;
  int width_index = 0;
  std::string shape_id;
  double cost = 0.0;
  double score = 0.0;  // oriented calibration score; NaN when infeasible
  bool feasible = false;
};

struct SearchResult {
  bool feasible = false;
  SearchCandidate chosen;
  SearchCandidate tightest;  // cheapest shape seen (reported on infeasibility)
  double slack = 0.0;        // budget - chosen cost
  std::vector<SearchCandidate> stage1, stage2;
  bool used_full_coarse_grid = false;
};

template <typename T>
double shape_constraint_cost(const SearchSpec& spec, ElasticModelT<T>& model,
                             const SubnetShape& shape) {
  if (spec.kind == ConstraintKind::max_latency_ms) {
    auto extracted = extract(model, shape);
    return measure_latency_ms(extracted, std::min<int64_t>(model.cfg.max_seq_len, 128), 3,
                              spec.latency_runs);
  }
  auto cost = analytic_cost(model.cfg, model.plan.get(), shape);
  return spec.kind == ConstraintKind::max_params ? double(cost.params)
                                                 : double(cost.flops_per_token);
}

// Stage 1 evaluates coarse-stride shapes (falling back to the whole grid when
// no coarse candidate fits the budget); stage 2 evaluates the grid inside the
// fine radius around the stage-1 winner. Score ties go to the cheaper shape.
template <typename T>
SearchResult search(const SearchSpec& spec, ElasticModelT<T>& model, const ShapeGrid& grid,
                    const std::vector<SubnetShape>& shapes, const Evaluator<T>& evaluator,
                    EvalCache& cache) {
  spec.validate();
  auto shape_at = [&](int di, int wi) -> const SubnetShape& {
    return shapes[size_t(di) * grid.width_ratios.size() + size_t(wi)];
  };

  auto evaluate_candidate = [&](int di, int wi) {
    const SubnetShape& s = shape_at(di, wi);
    SearchCandidate c;
    c.depth_index = di;
    c.width_index = wi;
    c.shape_id = s.id(grid);
    c.cost = shape_constraint_cost(spec, model, s);
    c.feasible = c.cost <= spec.budget;
    c.score = c.feasible ? cached_evaluate(cache, evaluator, model, s)
                         : std::numeric_limits<double>::quiet_NaN();
    return c;
  };

  auto better = [](const SearchCandidate& a, const SearchCandidate& b) {
    // Both feasible: higher score wins, ties to the cheaper shape.
    if (a.score != b.score) return a.score > b.score;
    if (a.cost != b.cost) return a.cost < b.cost;
    if (a.depth_index != b.depth_index) return a.depth_index < b.depth_index;
    return a.width_index < b.width_index;
  };

  SearchResult res;

  // Track the cheapest shape for infeasibility reporting.
  bool have_tightest = false;
  auto consider_tightest = [&](const SearchCandidate& c) {
    if (!have_tightest || c.cost < res.tightest.cost) {
      res.tightest = c;
      have_tightest = true;
    }
  };

  auto run_stage1 = [&](int dstride, int rstride) {
    std::vector<SearchCandidate> out;
    for (int di = 0; di < int(grid.depths.size()); di += dstride)
      for (int wi = 0; wi < int(grid.width_ratios.size()); wi += rstride)
        out.push_back(evaluate_candidate(di, wi));
    return out;
  };

  res.stage1 = run_stage1(spec.coarse_depth_stride, spec.coarse_ratio_stride);
  bool any_feasible = std::any_of(res.stage1.begin(), res.stage1.end(),
                                  [](const auto& c) { return c.feasible; });
  if (!any_feasible && (spec.coarse_depth_stride > 1 || spec.coarse_ratio_stride > 1)) {
    // The coarse strides can step over the only feasible shapes.
    res.stage1 = run_stage1(1, 1);
    res.used_full_coarse_grid = true;
  }

  const SearchCandidate* stage1_best = nullptr;
  for (const auto& c : res.stage1) {
    consider_tightest(c);
    if (!c.feasible) continue;
    if (stage1_best == nullptr || better(c, *stage1_best)) stage1_best = &c;
  }
  if (stage1_best == nullptr) {
    res.feasible = false;
    return res;
  }

  for (int di = std::max(0, stage1_best->depth_index - spec.fine_radius);
       di <= std::min(int(grid.depths.size()) - 1, stage1_best->depth_index + spec.fine_radius);
       ++di) {
    for (int wi = std::max(0, stage1_best->width_index - spec.fine_radius);
         wi <=
         std::min(int(grid.width_ratios.size()) - 1, stage1_best->width_index + spec.fine_radius);
         ++wi) {
      res.stage2.push_back(evaluate_candidate(di, wi));
    }
  }

  const SearchCandidate* best = nullptr;
  for (const auto& c : res.stage2) {
    consider_tightest(c);
    if (!c.feasible) continue;
    if (best == nullptr || better(c, *best)) best = &c;
  }
  res.feasible = true;
  res.chosen = *best;
  res.slack = spec.budget - best->cost;

  if (spec.kind == ConstraintKind::max_latency_ms) {
    // Re-verify the winner by a fresh measurement with 10% tolerance.
    const SubnetShape& s = shape_at(best->depth_index, best->width_index);
    auto extracted = extract(model, s);
    double measured = measure_latency_ms(
        extracted, std::min<int64_t>(model.cfg.max_seq_len, 128), 3, spec.latency_runs);
    if (measured > spec.budget * 1.10)
      throw std::runtime_error("search: latency re-verification failed: measured " +
                               std::to_string(measured) + " ms vs budget " +
                               std::to_string(spec.budget) + " ms");
  }
  return res;
}

inline nlohmann::json candidate_to_json(const SearchCandidate& c) {
  nlohmann::json j;
  j["shape_id"] = c.shape_id;
  j["depth_index"] = c.depth_index;
  j["width_index"] = c.width_index;
  j["cost"] = c.cost;
  j["feasible"] = c.feasible;
  if (std::isfinite(c.score)) j["score"] = c.score;
  return j;
}

inline nlohmann::json search_result_to_json(const SearchResult& r, const SearchSpec& spec) {
  nlohmann::json j;
  j["constraint"] = {{"kind", constraint_kind_name(spec.kind)}, {"budget", spec.budget}};
  j["feasible"] = r.feasible;
  j["used_full_coarse_grid"] = r.used_full_coarse_grid;
  if (r.feasible) {
    j["chosen"] = candidate_to_json(r.chosen);
    j["slack"] = r.slack;
  } else {
    j["tightest"] = candidate_to_json(r.tightest);
  }
  j["stage1"] = nlohmann::json::array();
  for (const auto& c : r.stage1) j["stage1"].push_back(candidate_to_json(c));
  j["stage2"] = nlohmann::json::array();
  for (const auto& c : r.stage2) j["stage2"].push_back(candidate_to_json(c));
  return j;
}

}  // namespace elm
