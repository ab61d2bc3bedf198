#pragma once

#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>

#include "icft/optim/optimizers.hpp"

namespace icft::prequential {

/// One point of the hyperparameter grid.
struct HPConfig {
  double lr = 3e-4;
  int epochs = 1;
  int k = 0;  // context examples per training and prediction sequence
  optim::OptimizerKind optimizer = optim::OptimizerKind::adafactor;
  std::optional<int> lora_rank;  // adapter kind: none, or LoRA with this rank

  void validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("hp: lr must be > 0");
    if (epochs < 0) throw std::invalid_argument("hp: epochs must be >= 0");
    if (k < 0) throw std::invalid_argument("hp: k must be >= 0");
    if (lora_rank && *lora_rank < 1) throw std::invalid_argument("hp: lora rank must be >= 1");
  }

  /// Compact form used in result tables, e.g. "lr=0.001;E=2;K=4;opt=adafactor;adapter=none".
  std::string describe() const {
    std::ostringstream os;
    os << "lr=" << lr << ";E=" << epochs << ";K=" << k << ";opt=" << optim::to_string(optimizer)
       << ";adapter=" << (lora_rank ? "lora" + std::to_string(*lora_rank) : std::string("none"));
    return os.str();
  }

  friend bool operator==(const HPConfig&, const HPConfig&) = default;
};

}  // namespace icft::prequential
