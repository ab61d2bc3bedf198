#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "icft/rng.hpp"
#include "icft/tasks/dataset.hpp"

namespace icft::tasks {

// ---------------------------------------------------------------------------
// Parity: x = "b1 b2 ... bn", y = running parity word after each bit.

/// "1 1 0" -> "Odd Even Even".
inline std::string parity_oracle(std::string_view x) {
  std::string out;
  bool odd = false;
  for (char c : x) {
    if (c == ' ') continue;
    if (c != '0' && c != '1') throw TaskError("parity input must contain only 0/1 digits: '" + std::string(x) + "'");
    odd ^= (c == '1');
    if (!out.empty()) out.push_back(' ');
    out += odd ? "Odd" : "Even";
  }
  return out;
}

inline std::string random_bits(int n_bits, Rng& rng) {
  std::string x;
  std::bernoulli_distribution coin(0.5);
  for (int b = 0; b < n_bits; ++b) {
    if (b) x.push_back(' ');
    x.push_back(coin(rng) ? '1' : '0');
  }
  return x;
}

/// Distinct random bit strings with their running-parity targets.
inline Dataset gen_parity(int n_bits, std::size_t n_examples, std::uint64_t seed) {
  if (n_bits < 1 || n_bits > 24) throw TaskError("gen_parity: n_bits must be in [1, 24]");
  if (n_examples > (std::size_t{1} << n_bits)) {
    throw TaskError("gen_parity: " + std::to_string(n_examples) + " distinct examples requested but only " +
                    std::to_string(std::size_t{1} << n_bits) + " strings of " + std::to_string(n_bits) + " bits exist");
  }
  Rng rng = make_rng(seed, {0x706172});  // "par"
  Dataset d;
  d.name = "parity" + std::to_string(n_bits);
  std::unordered_set<std::string> seen;
  while (d.examples.size() < n_examples) {
    auto x = random_bits(n_bits, rng);
    if (!seen.insert(x).second) continue;
    d.examples.push_back({x, parity_oracle(x)});
  }
  return d;
}

// ---------------------------------------------------------------------------
// Keyed classification: x embeds an uppercase key in lowercase filler; the key
// alone determines the label.
//
// Keys are split into two disjoint pools. Meta-pretraining draws only from the
// `pretrain` pool and evaluation tasks from the `reserved` pool, so no
// evaluation key (and hence no evaluation key->label map) is ever seen during
// pretraining. Independently of the pool, every key has a canonical class
// fixed by its first letter; `prior_fraction` controls how many of a task's
// keys follow it. Pretraining on such tasks gives the model a prior that
// transfers to reserved keys, the analogue of pretrained knowledge that a
// flipped-label task contradicts.

enum class KeyPool { any, pretrain, reserved };

inline constexpr int kKeyLength = 2;

inline bool is_reserved_key(std::string_view key) {
  int h = 0;
  for (std::size_t i = 0; i < key.size(); ++i) h += static_cast<int>(i + 1) * (key[i] - 'A');
  return h % 4 == 0;
}

inline bool in_pool(std::string_view key, KeyPool pool) {
  switch (pool) {
    case KeyPool::pretrain: return !is_reserved_key(key);
    case KeyPool::reserved: return is_reserved_key(key);
    default: return true;
  }
}

/// Canonical class of a key: the first letter partitions A..Z into n_classes blocks.
inline int canonical_class(std::string_view key, int n_classes) {
  return static_cast<int>((key.at(0) - 'A') * n_classes / 26);
}

inline std::vector<std::string> default_labels(int n_classes) {
  if (n_classes == 2) return {"Yes", "No"};
  std::vector<std::string> out;
  for (int c = 0; c < n_classes; ++c) out.emplace_back(1, static_cast<char>('A' + c));
  return out;
}

struct KeyedSpec {
  int n_keys = 8;
  int n_classes = 2;
  int noise_len = 0;
  KeyPool pool = KeyPool::any;
  double prior_fraction = 0.0;     // share of keys whose class is canonical_class(key)
  std::vector<std::string> labels;  // defaults to default_labels(n_classes)
};

/// One sampled keyed-classification task: its keys and key -> class map.
struct KeyedTask {
  KeyedSpec spec;
  std::vector<std::string> keys;
  std::map<std::string, int> key_class;
  std::vector<std::string> labels;

  /// Finds the uppercase key inside x and returns its label.
  std::string oracle(std::string_view x) const {
    std::string key;
    for (char c : x)
      if (std::isupper(static_cast<unsigned char>(c))) key.push_back(c);
    auto it = key_class.find(key);
    if (it == key_class.end()) throw TaskError("keyed oracle: no known key in '" + std::string(x) + "'");
    return labels.at(static_cast<std::size_t>(it->second));
  }

  std::map<std::string, std::string> label_map() const {
    std::map<std::string, std::string> out;
    for (const auto& [k, c] : key_class) out.emplace(k, labels.at(static_cast<std::size_t>(c)));
    return out;
  }

  /// Class uniform, then key uniform within the class, then filler split around the key.
  Example sample(Rng& rng) const {
    std::uniform_int_distribution<int> pick_class(0, spec.n_classes - 1);
    return sample_class(pick_class(rng), rng);
  }

  Example sample_class(int c, Rng& rng) const {
    std::vector<const std::string*> members;
    for (const auto& k : keys)
      if (key_class.at(k) == c) members.push_back(&k);
    std::uniform_int_distribution<std::size_t> pick_key(0, members.size() - 1);
    const std::string& key = *members[pick_key(rng)];
    std::uniform_int_distribution<int> letter(0, 25);
    std::uniform_int_distribution<int> cut(0, spec.noise_len);
    const int before = cut(rng);
    std::string x;
    for (int i = 0; i < before; ++i) x.push_back(static_cast<char>('a' + letter(rng)));
    x += key;
    for (int i = before; i < spec.noise_len; ++i) x.push_back(static_cast<char>('a' + letter(rng)));
    return {x, labels[static_cast<std::size_t>(c)]};
  }
};

inline KeyedTask make_keyed_task(const KeyedSpec& spec, Rng& rng) {
  if (spec.n_classes < 2) throw TaskError("keyed task: need at least 2 classes");
  if (spec.n_classes > 26) throw TaskError("keyed task: at most 26 classes");
  if (spec.n_keys < spec.n_classes) throw TaskError("keyed task: need at least one key per class");
  if (spec.noise_len < 0) throw TaskError("keyed task: negative noise length");
  if (spec.prior_fraction < 0.0 || spec.prior_fraction > 1.0) throw TaskError("keyed task: prior_fraction outside [0,1]");
  KeyedTask t;
  t.spec = spec;
  t.labels = spec.labels.empty() ? default_labels(spec.n_classes) : spec.labels;
  if (static_cast<int>(t.labels.size()) != spec.n_classes) throw TaskError("keyed task: label count != n_classes");

  std::vector<std::vector<std::string>> by_class(static_cast<std::size_t>(spec.n_classes));
  std::vector<std::string> all;
  std::string key(kKeyLength, 'A');
  for (int a = 0; a < 26; ++a)
    for (int b = 0; b < 26; ++b) {
      key[0] = static_cast<char>('A' + a);
      key[1] = static_cast<char>('A' + b);
      if (!in_pool(key, spec.pool)) continue;
      all.push_back(key);
      by_class[static_cast<std::size_t>(canonical_class(key, spec.n_classes))].push_back(key);
    }
  if (static_cast<std::size_t>(spec.n_keys) > all.size()) throw TaskError("keyed task: key pool too small");

  const int n_prior = static_cast<int>(std::lround(spec.prior_fraction * spec.n_keys));
  std::set<std::string> used;
  auto draw = [&](const std::vector<std::string>& from) {
    if (std::none_of(from.begin(), from.end(), [&](const auto& k) { return !used.count(k); })) {
      throw TaskError("keyed task: key pool exhausted");
    }
    std::uniform_int_distribution<std::size_t> pick(0, from.size() - 1);
    for (;;) {
      const auto& k = from[pick(rng)];
      if (used.insert(k).second) return k;
    }
  };
  // Balanced class assignment: key i gets class i mod n_classes.
  for (int i = 0; i < spec.n_keys; ++i) {
    const int c = i % spec.n_classes;
    const auto k = i < n_prior ? draw(by_class[static_cast<std::size_t>(c)]) : draw(all);
    t.keys.push_back(k);
    t.key_class.emplace(k, c);
  }
  return t;
}

inline Dataset keyed_dataset(const KeyedTask& task, std::size_t n_examples, Rng& rng, std::string name = "keyed") {
  Dataset d;
  d.name = std::move(name);
  d.labels = task.labels;
  d.examples.reserve(n_examples);
  // Classes come from shuffled decks holding each class once, so counts differ by at most one.
  std::vector<int> deck(static_cast<std::size_t>(task.spec.n_classes));
  for (std::size_t i = 0; i < n_examples; ++i) {
    const std::size_t slot = i % deck.size();
    if (slot == 0) {
      std::iota(deck.begin(), deck.end(), 0);
      std::shuffle(deck.begin(), deck.end(), rng);
    }
    d.examples.push_back(task.sample_class(deck[slot], rng));
  }
  return d;
}

inline Dataset gen_keyed_classification(const KeyedSpec& spec, std::size_t n_examples, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x6b6579});  // "key"
  const auto task = make_keyed_task(spec, rng);
  return keyed_dataset(task, n_examples, rng,
                       "keyed-k" + std::to_string(spec.n_keys) + "-c" + std::to_string(spec.n_classes));
}

inline Dataset gen_keyed_classification(int n_keys, int n_classes, int noise_len, std::size_t n_examples,
                                        std::uint64_t seed) {
  KeyedSpec spec;
  spec.n_keys = n_keys;
  spec.n_classes = n_classes;
  spec.noise_len = noise_len;
  return gen_keyed_classification(spec, n_examples, seed);
}

/// Task instance that gen_keyed_classification(spec, n, seed) draws its examples from.
inline KeyedTask keyed_task_for_seed(const KeyedSpec& spec, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0x6b6579});
  return make_keyed_task(spec, rng);
}

// ---------------------------------------------------------------------------
// Label variants.

inline Dataset relabel(const Dataset& d, const std::map<std::string, std::string>& mapping, const std::string& suffix) {
  Dataset out = d;
  out.name = d.name + suffix;
  for (auto& ex : out.examples) {
    auto it = mapping.find(ex.y);
    if (it == mapping.end()) throw TaskError(d.name + ": response '" + ex.y + "' is not a label");
    ex.y = it->second;
  }
  return out;
}

/// Swaps the two labels of a binary task in every response; label order is kept.
inline Dataset flip_labels(const Dataset& d) {
  if (!d.labels || d.labels->size() != 2) throw TaskError("flip_labels: '" + d.name + "' is not a binary task");
  const auto& l = *d.labels;
  return relabel(d, {{l[0], l[1]}, {l[1], l[0]}}, "/flipped");
}

/// Applies a uniformly drawn non-identity permutation of the label set.
inline Dataset permute_labels(const Dataset& d, std::uint64_t seed) {
  if (!d.labels || d.labels->size() < 2) throw TaskError("permute_labels: '" + d.name + "' needs at least 2 labels");
  if (d.labels->size() == 2) return flip_labels(d);
  const auto& l = *d.labels;
  std::vector<std::size_t> perm(l.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng = make_rng(seed, {0x7065726d});  // "perm"
  const auto identity = perm;
  while (perm == identity) std::shuffle(perm.begin(), perm.end(), rng);
  std::map<std::string, std::string> mapping;
  for (std::size_t i = 0; i < l.size(); ++i) mapping.emplace(l[i], l[perm[i]]);
  return relabel(d, mapping, "/permuted");
}

}  // namespace icft::tasks
