#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "icft/model/checkpoint.hpp"
#include "icft/model/transformer.hpp"
#include "icft/optim/optimizers.hpp"
#include "icft/tasks/meta_stream.hpp"

namespace icft::runner {

namespace fs = std::filesystem;

class PretrainDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PretrainConfig {
  model::ModelConfig model;
  tasks::MetaFamily family;
  optim::OptimizerKind optimizer = optim::OptimizerKind::adam;
  double lr = 1e-3;
  std::int64_t warmup_steps = 0;  // linear ramp from lr/warmup to lr
  std::int64_t steps = 1000;
  int batch_size = 1;  // stream items whose gradients are averaged per step
  std::int64_t checkpoint_every = 1000;
  std::int64_t log_every = 100;
  std::uint64_t seed = 0;
  fs::path out_dir;  // empty: keep everything in memory
};

struct LossPoint {
  std::int64_t step = 0;  // last step of the window
  double mean_loss = 0.0;
};

struct PretrainResult {
  model::Parameters params;
  std::vector<double> step_losses;  // losses of the steps run by this call
  std::vector<LossPoint> curve;     // windowed means, including resumed history
};

inline fs::path checkpoint_path(const fs::path& dir) { return dir / "base.ckpt"; }
inline fs::path optimizer_path(const fs::path& dir) { return dir / "base.optim"; }
inline fs::path progress_path(const fs::path& dir) { return dir / "base.progress"; }
inline fs::path curve_path(const fs::path& dir) { return dir / "pretrain_loss.csv"; }

namespace detail {

inline void write_curve(const fs::path& path, const std::vector<LossPoint>& curve) {
  std::ofstream os(path, std::ios::trunc);
  os << "step,mean_loss\n";
  os.precision(17);
  for (const auto& p : curve) os << p.step << ',' << p.mean_loss << '\n';
}

inline std::vector<LossPoint> read_curve(const fs::path& path) {
  std::vector<LossPoint> out;
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    out.push_back({std::stoll(line.substr(0, comma)), std::stod(line.substr(comma + 1))});
  }
  return out;
}

}  // namespace detail

/// Trains a fresh model on the meta-task stream. When `cfg.out_dir` holds a
/// previous run's checkpoint, training resumes from it; item i of the stream and
/// the optimizer state are restored exactly, so a resumed run reproduces the
/// losses of an uninterrupted one.
inline PretrainResult meta_pretrain(const PretrainConfig& cfg,
                                    const std::function<void(std::int64_t, double)>& on_log = {}) {
  if (cfg.steps < 1) throw std::invalid_argument("meta_pretrain: steps must be >= 1");
  if (cfg.batch_size < 1) throw std::invalid_argument("meta_pretrain: batch_size must be >= 1");
  PretrainResult res;
  optim::Optimizer opt(cfg.optimizer);
  std::int64_t start = 0;
  const bool persist = !cfg.out_dir.empty();
  if (persist) fs::create_directories(cfg.out_dir);
  if (persist && fs::exists(progress_path(cfg.out_dir))) {
    res.params = model::load_checkpoint(checkpoint_path(cfg.out_dir));
    if (!(res.params.config == cfg.model)) throw std::invalid_argument("meta_pretrain: checkpoint config differs");
    opt = optim::Optimizer::load(optimizer_path(cfg.out_dir));
    std::ifstream(progress_path(cfg.out_dir)) >> start;
    res.curve = detail::read_curve(curve_path(cfg.out_dir));
    while (!res.curve.empty() && res.curve.back().step > start) res.curve.pop_back();
  } else {
    res.params = model::init_params(cfg.model, cfg.seed);
  }
  tasks::MetaFamily family = cfg.family;
  family.max_seq_len = static_cast<std::size_t>(cfg.model.max_seq_len);
  tasks::MetaStream stream(family, cfg.seed);
  const auto batch = static_cast<std::uint64_t>(cfg.batch_size);
  stream.seek(static_cast<std::uint64_t>(start) * batch);

  auto save = [&](std::int64_t step) {
    model::save_checkpoint(checkpoint_path(cfg.out_dir), res.params);
    opt.save(optimizer_path(cfg.out_dir));
    detail::write_curve(curve_path(cfg.out_dir), res.curve);
    std::ofstream(progress_path(cfg.out_dir), std::ios::trunc) << step << '\n';
  };

  double window = 0.0;
  std::int64_t in_window = 0;
  for (std::int64_t step = start + 1; step <= cfg.steps; ++step) {
    model::Gradients grads;
    double loss = 0.0;
    for (std::uint64_t b = 0; b < batch; ++b) {
      const auto item = stream.next();
      auto lg = model::sequence_nll_and_grad(res.params, {item.sequence.tokens, item.sequence.loss_mask});
      if (!std::isfinite(lg.loss)) {
        throw PretrainDivergedError("meta_pretrain: non-finite loss at step " + std::to_string(step) +
                                    (persist ? "; last good checkpoint kept in " + cfg.out_dir.string() : ""));
      }
      loss += lg.loss / static_cast<double>(batch);
      for (auto& [name, g] : lg.grads) {
        auto [it, fresh] = grads.try_emplace(name, std::move(g));
        if (!fresh)
          for (std::size_t i = 0; i < it->second.size(); ++i) it->second[i] += g[i];
      }
    }
    if (batch > 1)
      for (auto& [name, g] : grads)
        for (auto& v : g.data()) v /= static_cast<double>(batch);
    double lr = cfg.lr;
    if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps) lr *= static_cast<double>(step) / cfg.warmup_steps;
    try {
      opt.step(res.params, grads, lr);
    } catch (const optim::OptimizerError& e) {
      throw PretrainDivergedError(std::string("meta_pretrain: ") + e.what());
    }
    res.step_losses.push_back(loss);
    window += loss;
    ++in_window;
    if (step % cfg.log_every == 0 || step == cfg.steps) {
      res.curve.push_back({step, window / static_cast<double>(in_window)});
      if (on_log) on_log(step, res.curve.back().mean_loss);
      window = 0.0;
      in_window = 0;
    }
    if (persist && (step % cfg.checkpoint_every == 0 || step == cfg.steps)) save(step);
  }
  return res;
}

}  // namespace icft::runner
