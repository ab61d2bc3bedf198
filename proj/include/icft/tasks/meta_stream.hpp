#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "icft/prompt/prompt.hpp"
#include "icft/rng.hpp"
#include "icft/tasks/generators.hpp"

namespace icft::tasks {

/// Distribution of synthetic tasks used to give a scratch model in-context ability.
struct MetaFamily {
  double keyed_weight = 0.9;
  double parity_weight = 0.1;

  int min_keys = 2, max_keys = 16;
  int min_classes = 2, max_classes = 3;
  int min_noise = 0, max_noise = 3;
  /// Per-task prior_fraction is drawn uniformly from this list.
  std::vector<double> prior_fractions = {0.0, 0.5, 1.0};
  /// Label vocabularies; a task with c classes uses the first c words of one entry.
  std::vector<std::vector<std::string>> label_sets = {
      {"Yes", "No", "Maybe"}, {"True", "False", "Unsure"}, {"A", "B", "C"},
      {"Pos", "Neg", "Neu"},  {"On", "Off", "Idle"},       {"Up", "Down", "Side"},
  };

  int min_bits = 2, max_bits = 4;

  int min_k = 0, max_k = 12;
  prompt::Template tpl{"\n", "=", std::nullopt};
  std::size_t max_seq_len = 160;
};

struct MetaItem {
  prompt::PromptSequence sequence;
  std::string kind;                              // "keyed" or "parity"
  std::map<std::string, std::string> label_map;  // keyed tasks only
  std::size_t k = 0;
};

/// Endless deterministic stream: item i depends only on (seed, i), so a stream
/// can be resumed at any index.
class MetaStream {
 public:
  MetaStream(MetaFamily family, std::uint64_t seed) : family_(std::move(family)), seed_(seed) {}

  MetaItem next() { return at(index_++); }
  std::uint64_t index() const { return index_; }
  void seek(std::uint64_t index) { index_ = index; }
  const MetaFamily& family() const { return family_; }

  MetaItem at(std::uint64_t i) const {
    Rng rng = make_rng(seed_, {0x6d657461, i});  // "meta"
    std::uniform_int_distribution<int> pick_k(family_.min_k, family_.max_k);
    const auto k = static_cast<std::size_t>(pick_k(rng));
    std::bernoulli_distribution pick_keyed(family_.keyed_weight / (family_.keyed_weight + family_.parity_weight));

    MetaItem item;
    std::vector<Example> examples;
    if (pick_keyed(rng)) {
      item.kind = "keyed";
      KeyedSpec spec;
      spec.pool = KeyPool::pretrain;
      spec.n_classes = std::uniform_int_distribution<int>(family_.min_classes, family_.max_classes)(rng);
      spec.n_keys = std::max(spec.n_classes, std::uniform_int_distribution<int>(family_.min_keys, family_.max_keys)(rng));
      spec.noise_len = std::uniform_int_distribution<int>(family_.min_noise, family_.max_noise)(rng);
      spec.prior_fraction =
          family_.prior_fractions[std::uniform_int_distribution<std::size_t>(0, family_.prior_fractions.size() - 1)(rng)];
      const auto& words =
          family_.label_sets[std::uniform_int_distribution<std::size_t>(0, family_.label_sets.size() - 1)(rng)];
      spec.labels.assign(words.begin(), words.begin() + spec.n_classes);
      const auto task = make_keyed_task(spec, rng);
      item.label_map = task.label_map();
      for (std::size_t j = 0; j <= k; ++j) examples.push_back(task.sample(rng));
    } else {
      item.kind = "parity";
      const int bits = std::uniform_int_distribution<int>(family_.min_bits, family_.max_bits)(rng);
      for (std::size_t j = 0; j <= k; ++j) {
        auto x = random_bits(bits, rng);
        examples.push_back({x, parity_oracle(x)});
      }
    }
    // Drop context examples from the front until the sequence fits.
    const Example target = examples.back();
    examples.pop_back();
    for (;;) {
      try {
        item.sequence = prompt::build_training_sequence(examples, target, family_.tpl, family_.max_seq_len);
        break;
      } catch (const prompt::SequenceTooLongError&) {
        if (examples.empty()) throw;
        examples.erase(examples.begin());
      }
    }
    item.k = examples.size();
    return item;
  }

 private:
  MetaFamily family_;
  std::uint64_t seed_;
  std::uint64_t index_ = 0;
};

}  // namespace icft::tasks
