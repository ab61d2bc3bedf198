#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "icft/prompt/prompt.hpp"
#include "icft/rng.hpp"

namespace icft::tasks {

using prompt::Example;

class TaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Ordered examples plus, for classification tasks, the closed label set.
struct Dataset {
  std::string name;
  std::vector<Example> examples;
  std::optional<std::vector<std::string>> labels;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
  bool is_classification() const { return labels.has_value(); }

  /// Throws unless every response is one of the labels.
  void validate() const {
    if (!labels) return;
    for (std::size_t i = 0; i < examples.size(); ++i) {
      if (std::find(labels->begin(), labels->end(), examples[i].y) == labels->end()) {
        throw TaskError(name + ": example " + std::to_string(i) + " has response '" + examples[i].y +
                        "' outside the label set");
      }
    }
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct SplitSpec {
  std::uint64_t seed = 0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
};

struct Split {
  Dataset train;
  Dataset test;
};

/// Seeded permutation of 0..n-1 that depends on nothing but (seed, n).
inline std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng = make_rng(seed, {0x73706c6974});  // "split"
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(idx[i - 1], idx[pick(rng)]);
  }
  return idx;
}

/// Train = first n_train entries of the seeded permutation, test = last n_test.
/// For a fixed seed, a smaller train set is always a prefix of a larger one.
inline Split split(const Dataset& d, const SplitSpec& spec) {
  if (spec.n_train + spec.n_test > d.size()) {
    throw TaskError("split of " + std::to_string(spec.n_train) + " train + " + std::to_string(spec.n_test) +
                    " test exceeds dataset '" + d.name + "' of " + std::to_string(d.size()));
  }
  const auto perm = seeded_permutation(d.size(), spec.seed);
  Split s;
  s.train.name = d.name + "/train";
  s.test.name = d.name + "/test";
  s.train.labels = s.test.labels = d.labels;
  for (std::size_t i = 0; i < spec.n_train; ++i) s.train.examples.push_back(d.examples[perm[i]]);
  for (std::size_t i = d.size() - spec.n_test; i < d.size(); ++i) s.test.examples.push_back(d.examples[perm[i]]);
  return s;
}

/// Dataset reordered by a seeded permutation.
inline Dataset permuted(const Dataset& d, std::uint64_t seed) {
  Dataset out = d;
  const auto perm = seeded_permutation(d.size(), seed);
  for (std::size_t i = 0; i < d.size(); ++i) out.examples[i] = d.examples[perm[i]];
  return out;
}

/// Uniform sample of min(k, n) distinct indices from 0..n-1, in random order.
inline std::vector<std::size_t> sample_indices(std::size_t n, std::size_t k, Rng& rng) {
  k = std::min(k, n);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(k);
  return idx;
}

inline std::vector<Example> sample_context(std::span<const Example> pool, std::size_t k, Rng& rng) {
  std::vector<Example> out;
  for (auto i : sample_indices(pool.size(), k, rng)) out.push_back(pool[i]);
  return out;
}

}  // namespace icft::tasks
