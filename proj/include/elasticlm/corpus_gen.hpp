#pragma once

// Deterministic toy-corpus builder: English-like filler text with a set of
// templated fact sentences injected into the training region only. Stands in
// for a real fine-tuning corpus plus a factual-knowledge probe set.

#include <elasticlm/data.hpp>

#include <cstdint>
#include <string>

namespace elm {

struct GeneratedCorpus {
  std::string text;       // training region followed by fact-free tail
  FactSet facts;          // each fact injected `repeats` times into the text
  size_t fact_free_tail;  // byte length of the trailing fact-free region
};

struct CorpusGenOptions {
  size_t target_chars = 50000;
  int n_facts = 64;
  int repeats = 8;
  double fact_free_fraction = 0.18;  // tail reserved for the validation split
};

GeneratedCorpus generate_corpus(uint64_t seed, const CorpusGenOptions& opt = {});

}  // namespace elm
