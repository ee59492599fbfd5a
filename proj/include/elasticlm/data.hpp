#pragma once

// Corpus ingestion, char-level tokenizer, fact-recall probes, calibration
// evaluators (PPL and fact accuracy, both oriented larger-is-better), and an
// evaluation cache keyed by (layer bitmask, width index, metric).

#include <elasticlm/io_util.hpp>
#include <elasticlm/model.hpp>

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace elm {

// Printable ASCII 0x20..0x7E plus newline: 96 symbols.
struct CharTokenizer {
  static constexpr int kVocab = 96;
  static constexpr int kNewline = 95;

  static int32_t encode_char(char c) {
    if (c == '\n') return kNewline;
    unsigned char u = static_cast<unsigned char>(c);
    if (u >= 0x20 && u <= 0x7E) return int32_t(u - 0x20);
    return int32_t('?' - 0x20);
  }

  static char decode(int32_t id) {
    if (id == kNewline) return '\n';
    if (id >= 0 && id < 95) return char(id + 0x20);
    return '?';
  }

  static std::vector<int32_t> encode(std::string_view text) {
    std::vector<int32_t> out;
    out.reserve(text.size());
    for (char c : text) out.push_back(encode_char(c));
    return out;
  }
};

// Fixed sentence frame the fact probes share with the injected fact text.
inline std::string fact_sentence(const std::string& subject, char object) {
  return "The symbol of " + subject + " is " + object + ".";
}
inline std::string fact_prompt(const std::string& subject) {
  return "The symbol of " + subject + " is ";
}

struct Fact {
  std::string subject;
  char object = '?';
};

struct FactSet {
  std::vector<Fact> facts;

  static FactSet load_tsv(const std::filesystem::path& path) {
    FactSet fs;
    std::istringstream in(read_file(path));
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      auto tab = line.find('\t');
      if (tab == std::string::npos || tab + 1 >= line.size() || line.size() != tab + 2)
        throw std::runtime_error("facts tsv: line " + std::to_string(lineno) +
                                 " must be 'subject<TAB><single char>'");
      fs.facts.push_back({line.substr(0, tab), line[tab + 1]});
    }
    return fs;
  }

  std::string to_tsv() const {
    std::string out;
    for (const auto& f : facts) {
      out += f.subject;
      out += '\t';
      out += f.object;
      out += '\n';
    }
    return out;
  }
};

struct Corpus {
  std::vector<int32_t> train;
  std::vector<int32_t> valid;
  FactSet facts;

  // Splits at the last newline at or before `1 - valid_fraction`, and checks
  // that no fact probe leaks into the validation text.
  static Corpus load(const std::filesystem::path& corpus_path,
                     const std::filesystem::path& facts_path, double valid_fraction = 0.15) {
    std::string text = read_file(corpus_path);
    if (text.empty()) throw std::runtime_error("corpus file is empty: " + corpus_path.string());
    Corpus c;
    c.facts = FactSet::load_tsv(facts_path);

    size_t cut = size_t(double(text.size()) * (1.0 - valid_fraction));
    cut = std::min(cut, text.size() - 1);
    size_t nl = text.rfind('\n', cut);
    if (nl == std::string::npos || nl == 0)
      throw std::runtime_error("corpus too small to split");
    std::string train_text = text.substr(0, nl + 1);
    std::string valid_text = text.substr(nl + 1);

    for (const auto& f : c.facts.facts) {
      if (valid_text.find(fact_prompt(f.subject)) != std::string::npos)
        throw std::runtime_error("fact probe for '" + f.subject +
                                 "' leaks into the validation split");
    }
    c.train = CharTokenizer::encode(train_text);
    c.valid = CharTokenizer::encode(valid_text);
    return c;
  }
};

struct FactProbe {
  std::vector<int32_t> prompt;
  int32_t object = 0;
};

inline std::vector<FactProbe> make_probes(const FactSet& fs) {
  std::vector<FactProbe> probes;
  probes.reserve(fs.facts.size());
  for (const auto& f : fs.facts)
    probes.push_back({CharTokenizer::encode(fact_prompt(f.subject)),
                      CharTokenizer::encode_char(f.object)});
  return probes;
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

// exp(mean token-level negative log-likelihood) over non-overlapping windows.
template <typename T>
double perplexity(ElasticModelT<T>& model, const SubnetShape* shape,
                  std::span<const int32_t> tokens, int64_t seq_len, int64_t batch = 8) {
  if (tokens.empty()) throw std::invalid_argument("perplexity: empty calibration set");
  int64_t window = seq_len + 1;
  int64_t n_windows = int64_t(tokens.size()) / window;
  if (n_windows == 0) {
    // Shorter than one window: one truncated window.
    window = int64_t(tokens.size());
    seq_len = window - 1;
    n_windows = 1;
    if (seq_len < 1) throw std::invalid_argument("perplexity: calibration set too short");
  }
  double nll_sum = 0.0;
  int64_t count = 0;
  ForwardOptions<T> opt;
  opt.shape = shape;
  for (int64_t w = 0; w < n_windows; w += batch) {
    int64_t b = std::min(batch, n_windows - w);
    std::vector<int32_t> inputs(size_t(b * seq_len));
    std::vector<int32_t> targets(size_t(b * seq_len));
    for (int64_t i = 0; i < b; ++i) {
      const int32_t* base = tokens.data() + (w + i) * window;
      std::copy_n(base, seq_len, inputs.data() + i * seq_len);
      std::copy_n(base + 1, seq_len, targets.data() + i * seq_len);
    }
    auto logits = forward(model, std::span<const int32_t>(inputs), b, seq_len, opt);
    nll_sum += double(cross_entropy(logits, targets).item()) * double(b * seq_len);
    count += b * seq_len;
  }
  return std::exp(nll_sum / double(count));
}

// Fraction of probes whose argmax next token at the object position matches.
template <typename T>
double fact_accuracy(ElasticModelT<T>& model, const SubnetShape* shape,
                     const std::vector<FactProbe>& probes) {
  if (probes.empty()) throw std::invalid_argument("fact_accuracy: empty probe set");
  ForwardOptions<T> opt;
  opt.shape = shape;
  int hits = 0;
  for (const auto& p : probes) {
    int64_t len = int64_t(p.prompt.size());
    auto logits = forward(model, std::span<const int32_t>(p.prompt), 1, len, opt);
    const T* last = logits.data().data() + (len - 1) * model.cfg.vocab_size;
    int32_t best = 0;
    for (int32_t v = 1; v < model.cfg.vocab_size; ++v)
      if (last[v] > last[best]) best = v;
    hits += best == p.object ? 1 : 0;
  }
  return double(hits) / double(probes.size());
}

enum class MetricKind { ppl, fact_accuracy };

inline const char* metric_kind_name(MetricKind k) {
  return k == MetricKind::ppl ? "ppl" : "facts";
}

inline MetricKind metric_kind_from_name(const std::string& s) {
  if (s == "ppl") return MetricKind::ppl;
  if (s == "facts") return MetricKind::fact_accuracy;
  throw std::invalid_argument("unknown metric kind: " + s);
}

// A pure function of (model, shape); PPL is negated so that a larger oriented
// score is always better, matching the DP's max.
template <typename T>
class Evaluator {
 public:
  static Evaluator ppl(std::vector<int32_t> calib_tokens, int64_t seq_len) {
    Evaluator e;
    e.kind_ = MetricKind::ppl;
    e.tokens_ = std::move(calib_tokens);
    e.seq_len_ = seq_len;
    return e;
  }

  static Evaluator facts(std::vector<FactProbe> probes) {
    Evaluator e;
    e.kind_ = MetricKind::fact_accuracy;
    e.probes_ = std::move(probes);
    return e;
  }

  MetricKind kind() const { return kind_; }
  int64_t calls() const { return calls_; }

  // Raw metric in its natural orientation (PPL: lower better).
  double raw(ElasticModelT<T>& model, const SubnetShape* shape) const {
    ++calls_;
    if (kind_ == MetricKind::ppl)
      return perplexity(model, shape, std::span<const int32_t>(tokens_), seq_len_);
    return fact_accuracy(model, shape, probes_);
  }

  double oriented(ElasticModelT<T>& model, const SubnetShape* shape) const {
    double v = raw(model, shape);
    return kind_ == MetricKind::ppl ? -v : v;
  }

  static double orient(MetricKind kind, double raw_value) {
    return kind == MetricKind::ppl ? -raw_value : raw_value;
  }

  // Stable identity of (metric, calibration data, model weights).
  std::string fingerprint(uint64_t model_hash) const {
    uint64_t h = fnv1a64(&model_hash, sizeof(model_hash));
    int k = int(kind_);
    h = fnv1a64(&k, sizeof(k), h);
    h = fnv1a64(&seq_len_, sizeof(seq_len_), h);
    if (!tokens_.empty()) h = fnv1a64(tokens_.data(), tokens_.size() * sizeof(int32_t), h);
    for (const auto& p : probes_) {
      h = fnv1a64(p.prompt.data(), p.prompt.size() * sizeof(int32_t), h);
      h = fnv1a64(&p.object, sizeof(p.object), h);
    }
    return hex64(h);
  }

 private:
  MetricKind kind_ = MetricKind::ppl;
  std::vector<int32_t> tokens_;
  std::vector<FactProbe> probes_;
  int64_t seq_len_ = 64;
  mutable int64_t calls_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation cache
// ---------------------------------------------------------------------------

class EvalCache {
 public:
  struct Key {
    std::string retained;  // 0/1 string
    int width_index = 0;
    MetricKind kind = MetricKind::ppl;
    auto operator<=>(const Key&) const = default;
  };

  std::optional<double> lookup(const Key& k) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = map_.find(k);
    if (it == map_.end()) return std::nullopt;
    return it->second;
  }

  void store(const Key& k, double v) {
    std::lock_guard<std::mutex> lock(mu_);
    map_.emplace(k, v);
  }

  size_t size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return map_.size();
  }

 private:
  mutable std::mutex mu_;
  std::map<Key, double> map_;
};

// Oriented score with read-after-write-consistent caching.
template <typename T>
double cached_evaluate(EvalCache& cache, const Evaluator<T>& evaluator,
                       ElasticModelT<T>& model, const SubnetShape& shape) {
  EvalCache::Key key{mask_to_string(shape.retained_layers), shape.width_index,
                     evaluator.kind()};
  if (auto hit = cache.lookup(key)) return *hit;
  double v = evaluator.oriented(model, &shape);
  cache.store(key, v);
  return v;
}

}  // namespace elm
