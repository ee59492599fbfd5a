#include <elasticlm/corpus_gen.hpp>
#include <elasticlm/tensor.hpp>

#include <algorithm>
#include <cctype>
#include <set>
#include <vector>

namespace elm {

namespace {

const char* kSubjects[] = {
    "the river",   "a traveler",  "the old man",    "the garden", "a small bird",
    "the city",    "the teacher", "a quiet child",  "the ship",   "the mountain",
    "a merchant",  "the forest",  "the fisherman",  "the moon",   "a stranger",
    "the village", "the painter", "an old clock",   "the sea",    "a young fox",
    "the library", "the baker",   "a gray wolf",    "the tower",  "the winter wind",
};

const char* kVerbs[] = {
    "watches",  "follows",  "remembers", "carries", "crosses",  "finds",
    "holds",    "leaves",   "reaches",   "keeps",   "passes",   "greets",
    "answers",  "forgets",  "gathers",   "guards",  "measures", "returns to",
    "waits for", "wanders through",
};

const char* kObjects[] = {
    "the narrow road",  "a distant light", "the morning rain", "an open door",
    "the silent field", "a wooden bridge", "the long night",   "a handful of seeds",
    "the last letter",  "a warm fire",     "the hidden path",  "an empty market",
    "the first snow",   "a broken wheel",  "the deep water",   "a patient horse",
    "the far shore",    "a heavy book",    "the low hill",     "a fading song",
};

const char* kTails[] = {
    "before dawn",    "without a sound", "in the pale light", "after the storm",
    "near the gate",  "every spring",    "for many years",    "under the stars",
    "against the wind", "at the edge of town",
};

const char* kNameSyllables[] = {
    "bar", "bel", "dor", "fen", "gal", "hem", "jor", "kel", "lum", "mir",
    "nor", "pol", "quin", "ras", "sel", "tor", "ulm", "var", "wex", "yor",
    "zan", "bru", "cor", "dal", "eth", "fro", "gim", "hul",
};

std::string filler_sentence(Rng& rng) {
  auto pick = [&rng](auto& arr) {
    return arr[size_t(rng.uniform_int(int64_t(std::size(arr))))];
  };
  std::string s = pick(kSubjects);
  s[0] = char(std::toupper(s[0]));
  s += " ";
  s += pick(kVerbs);
  s += " ";
  s += pick(kObjects);
  if (rng.uniform() < 0.5) {
    s += " ";
    s += pick(kTails);
  }
  s += ".";
  return s;
}

std::string make_name(Rng& rng, std::set<std::string>& used) {
  for (;;) {
    int n = 2 + int(rng.uniform_int(2));
    std::string name;
    for (int i = 0; i < n; ++i)
      name += kNameSyllables[size_t(rng.uniform_int(int64_t(std::size(kNameSyllables))))];
    name[0] = char(std::toupper(name[0]));
    if (used.insert(name).second) return name;
  }
}

}  // namespace

GeneratedCorpus generate_corpus(uint64_t seed, const CorpusGenOptions& opt) {
  Rng rng(seed);
  GeneratedCorpus out;

  static const char kObjectAlphabet[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
  std::set<std::string> used_names;
  for (int i = 0; i < opt.n_facts; ++i) {
    Fact f;
    f.subject = make_name(rng, used_names);
    f.object = kObjectAlphabet[size_t(rng.uniform_int(int64_t(sizeof(kObjectAlphabet) - 1)))];
    out.facts.facts.push_back(std::move(f));
  }

  size_t head_target = size_t(double(opt.target_chars) * (1.0 - opt.fact_free_fraction));

  // Schedule each fact sentence `repeats` times, spread across the head.
  std::vector<int> schedule;
  for (int i = 0; i < opt.n_facts; ++i)
    for (int r = 0; r < opt.repeats; ++r) schedule.push_back(i);
  for (size_t i = schedule.size(); i > 1; --i)
    std::swap(schedule[i - 1], schedule[size_t(rng.uniform_int(int64_t(i)))]);

  std::string head;
  size_t next_fact = 0;
  // Interleave facts roughly uniformly with filler until both budgets are met.
  while (head.size() < head_target || next_fact < schedule.size()) {
    size_t remaining = head_target > head.size() ? head_target - head.size() : 0;
    size_t facts_left = schedule.size() - next_fact;
    bool emit_fact = next_fact < schedule.size() &&
                     (remaining == 0 || rng.uniform() < double(facts_left) * 40.0 /
                                            std::max<double>(double(remaining), 1.0));
    if (emit_fact) {
      const Fact& f = out.facts.facts[size_t(schedule[next_fact++])];
      head += fact_sentence(f.subject, f.object);
    } else {
      head += filler_sentence(rng);
    }
    head += rng.uniform() < 0.12 ? "\n" : " ";
  }

  std::string tail;
  size_t tail_target = opt.target_chars > head.size() ? opt.target_chars - head.size() : 0;
  tail_target = std::max(tail_target, size_t(double(opt.target_chars) * opt.fact_free_fraction));
  while (tail.size() < tail_target) {
    tail += filler_sentence(rng);
    tail += rng.uniform() < 0.12 ? "\n" : " ";
  }

  out.text = head + tail;
  out.fact_free_tail = tail.size();
  return out;
}

}  // namespace elm
