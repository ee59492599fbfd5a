#pragma once

// Dynamic-programming layer selection. D[n][m] holds the best oriented score
// achievable by removing exactly m of the first n layers; S[n][m] holds the
// corresponding retention bitmask. Cells obey
//   D[n][m] = max(D[n-1][m], P(n,m)),
//   P(n,m)  = evaluate(remove(S[n-1][m-1], n), C),
// with base cases D[i][0] = +inf (sentinel), S[i][0] = all-ones, and
// infeasible cells (m > n) pinned at -inf. Ties keep the skip branch, so on
// an exact tie layer n is not removed.

#include <elasticlm/width_select.hpp>  // mask_to_string / mask_from_string

#include <json.hpp>

#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace elm {

// Oriented score (larger is better) of a layer-retention bitmask.
using LayerEvaluator = std::function<double(const std::vector<uint8_t>& retained)>;

// remove(s, n): clears the n-th (1-based) layer; removing a removed layer is
// a logic error.
inline std::vector<uint8_t> remove_layer(std::vector<uint8_t> s, int n) {
  if (n < 1 || size_t(n) > s.size())
    throw std::out_of_range("remove_layer: layer " + std::to_string(n) + " of " +
                            std::to_string(s.size()));
  if (!s[size_t(n - 1)])
    throw std::logic_error("remove_layer: layer " + std::to_string(n) + " already removed");
  s[size_t(n - 1)] = 0;
  return s;
}

struct DPTable {
  int n = 0;
  int m_max = 0;
  std::string metric;
  std::string fingerprint;
  double full_score = 0.0;  // reference evaluation of the all-ones mask
  std::vector<std::vector<double>> d;               // (n+1) x (m_max+1)
  std::vector<std::vector<std::vector<uint8_t>>> s; // (n+1) x (m_max+1); empty = infeasible

  static constexpr double kInf = std::numeric_limits<double>::infinity();

  const std::vector<uint8_t>& select(int m) const {
    if (m < 0 || m > m_max)
      throw std::out_of_range("select_depth: m " + std::to_string(m) + " outside [0, " +
                              std::to_string(m_max) + "]");
    return s[size_t(n)][size_t(m)];
  }

  // Structural invariants; the recurrence itself is checked against a naive
  // reference in the tests.
  void validate() const {
    for (int i = 0; i <= n; ++i) {
      if (d[size_t(i)][0] != kInf) throw std::logic_error("DPTable: D[i][0] must be +inf");
      for (uint8_t b : s[size_t(i)][0])
        if (!b) throw std::logic_error("DPTable: S[i][0] must be all-ones");
    }
    for (int i = 0; i <= n; ++i) {
      for (int m = 1; m <= m_max; ++m) {
        if (m > i) {
          if (d[size_t(i)][size_t(m)] != -kInf)
            throw std::logic_error("DPTable: infeasible cell not -inf");
          continue;
        }
        const auto& mask = s[size_t(i)][size_t(m)];
        int zeros_first = 0;
        for (int p = 0; p < i; ++p) zeros_first += mask[size_t(p)] ? 0 : 1;
        for (int p = i; p < n; ++p)
          if (!mask[size_t(p)]) throw std::logic_error("DPTable: zero beyond first n positions");
        if (zeros_first != m)
          throw std::logic_error("DPTable: S[n][m] must have exactly m zeros among first n");
        if (i > m && d[size_t(i)][size_t(m)] < d[size_t(i - 1)][size_t(m)])
          throw std::logic_error("DPTable: column monotonicity violated");
      }
    }
  }
};

// P(n, m): score and candidate mask of removing layer n on top of S[n-1][m-1].
inline std::pair<double, std::vector<uint8_t>> compute_p(const DPTable& table,
                                                         const LayerEvaluator& evaluate, int n,
                                                         int m) {
  const auto& prev = table.s[size_t(n - 1)][size_t(m - 1)];
  if (prev.empty())
    throw std::logic_error("compute_p: dependency cell S[" + std::to_string(n - 1) + "][" +
                           std::to_string(m - 1) + "] unfilled");
  auto candidate = remove_layer(prev, n);
  double score;
  try {
    score = evaluate(candidate);
  } catch (const std::exception& e) {
    throw std::runtime_error("build_dp: evaluator failed at cell (" + std::to_string(n) + "," +
                             std::to_string(m) + "): " + e.what());
  }
  return {score, std::move(candidate)};
}

// Fills the whole table with at most m_max * n + 1 evaluator calls (one per
// P(n,m) plus the full-model reference).
inline DPTable build_dp(const LayerEvaluator& evaluate, int n, int m_max,
                        std::string metric = "", std::string fingerprint = "") {
  if (m_max < 1 || m_max >= n)
    throw std::invalid_argument("build_dp: need 1 <= M < N, got M=" + std::to_string(m_max) +
                                " N=" + std::to_string(n));
  DPTable t;
  t.n = n;
  t.m_max = m_max;
  t.metric = std::move(metric);
  t.fingerprint = std::move(fingerprint);
  t.d.assign(size_t(n + 1), std::vector<double>(size_t(m_max + 1), -DPTable::kInf));
  t.s.assign(size_t(n + 1), std::vector<std::vector<uint8_t>>(size_t(m_max + 1)));

  std::vector<uint8_t> ones(size_t(n), 1);
  for (int i = 0; i <= n; ++i) {
    t.d[size_t(i)][0] = DPTable::kInf;
    t.s[size_t(i)][0] = ones;
  }
  t.full_score = evaluate(ones);

  for (int row = 1; row <= n; ++row) {
    for (int m = 1; m <= std::min(row, m_max); ++m) {
      auto [p_score, p_mask] = compute_p(t, evaluate, row, m);
      double skip_score = t.d[size_t(row - 1)][size_t(m)];
      if (p_score > skip_score) {
        t.d[size_t(row)][size_t(m)] = p_score;
        t.s[size_t(row)][size_t(m)] = std::move(p_mask);
      } else {
        // Tie or worse: keep layer `row`.
        t.d[size_t(row)][size_t(m)] = skip_score;
        t.s[size_t(row)][size_t(m)] = t.s[size_t(row - 1)][size_t(m)];
      }
    }
  }
  return t;
}

inline const std::vector<uint8_t>& select_depth(const DPTable& table, int m) {
  return table.select(m);
}

// --- JSON persistence -------------------------------------------------------

inline nlohmann::json dp_table_to_json(const DPTable& t) {
  nlohmann::json j;
  j["version"] = 1;
  j["n"] = t.n;
  j["m_max"] = t.m_max;
  j["metric"] = t.metric;
  j["fingerprint"] = t.fingerprint;
  j["full_score"] = t.full_score;
  auto encode_score = [](double v) -> nlohmann::json {
    if (v == DPTable::kInf) return "inf";
    if (v == -DPTable::kInf) return "-inf";
    return v;
  };
  j["d"] = nlohmann::json::array();
  j["s"] = nlohmann::json::array();
  for (int i = 0; i <= t.n; ++i) {
    nlohmann::json drow = nlohmann::json::array(), srow = nlohmann::json::array();
    for (int m = 0; m <= t.m_max; ++m) {
      drow.push_back(encode_score(t.d[size_t(i)][size_t(m)]));
      srow.push_back(mask_to_string(t.s[size_t(i)][size_t(m)]));
    }
    j["d"].push_back(std::move(drow));
    j["s"].push_back(std::move(srow));
  }
  return j;
}

inline DPTable dp_table_from_json(const nlohmann::json& j) {
  DPTable t;
  t.n = j.at("n").get<int>();
  t.m_max = j.at("m_max").get<int>();
  t.metric = j.at("metric").get<std::string>();
  t.fingerprint = j.at("fingerprint").get<std::string>();
  t.full_score = j.at("full_score").get<double>();
  auto decode_score = [](const nlohmann::json& v) -> double {
    if (v.is_string()) {
      if (v == "inf") return DPTable::kInf;
      if (v == "-inf") return -DPTable::kInf;
      throw std::runtime_error("DPTable: bad score string");
    }
    return v.get<double>();
  };
  for (const auto& row : j.at("d")) {
    std::vector<double> r;
    for (const auto& v : row) r.push_back(decode_score(v));
    t.d.push_back(std::move(r));
  }
  for (const auto& row : j.at("s")) {
    std::vector<std::vector<uint8_t>> r;
    for (const auto& v : row) r.push_back(mask_from_string(v.get<std::string>()));
    t.s.push_back(std::move(r));
  }
  return t;
}

}  // namespace elm
