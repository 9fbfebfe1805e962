#pragma once

#include <chrono>
#include <cmath>
#include <fstream>
#include <thread>

#include "mematch/log.hpp"
#include "mematch/model.hpp"

namespace mematch {

struct AdamConfig {
  double lr0 = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double decay = 0.5;
  int decay_every = 20000;
};

// Halving schedule on the base rate.
inline double lr_at(const AdamConfig& cfg, long step) {
  return cfg.lr0 * std::pow(cfg.decay, static_cast<double>(step / cfg.decay_every));
}

template <class S>
struct OptimState {
  std::vector<Tensor<S>> m;
  std::vector<Tensor<S>> v;
  long step = 0;

  static OptimState init(const std::vector<std::pair<std::string, Tensor<S>>>& params) {
    OptimState st;
    st.m.reserve(params.size());
    st.v.reserve(params.size());
    for (const auto& [name, t] : params) {
      st.m.push_back(Tensor<S>::zeros(t.shape()));
      st.v.push_back(Tensor<S>::zeros(t.shape()));
    }
    return st;
  }
};

// One optimization step over a batch of episodes: gradients of the mean
// episode loss, then an Adam update under the step-decay schedule. Returns
// the batch loss. Aborts with NumericError on a non-finite loss.
template <class S>
S train_step(ModelParams<S>& params, OptimState<S>& opt, const AdamConfig& cfg,
             const std::vector<Episode>& batch, bool average_matches = false) {
  if (batch.empty()) throw ValueError("train_step: empty episode batch");
  auto named = params.named_params();
  if (opt.m.size() != named.size()) {
    throw ShapeError(concat("train_step: optimizer tracks ", opt.m.size(), " tensors, model has ",
                            named.size()));
  }
  for (auto& [name, t] : named) t.zero_grad();

  S total = S(0);
  const S inv_b = S(1) / static_cast<S>(batch.size());
  for (const Episode& ep : batch) {
    Tape<S> tape;
    Tensor<S> logits = episode_logits(&tape, params, ep, ops::BnMode::train, true);
    Tensor<S> loss = ops::matching_loss(&tape, logits, ep.support_labels, ep.query_labels,
                                        average_matches);
    Tensor<S> scaled = ops::scale(&tape, loss, inv_b);
    tape.backward(scaled);
    total += scaled.item();
  }
  if (!std::isfinite(static_cast<double>(total))) {
    throw NumericError(concat("train_step: non-finite loss ", total, " at step ", opt.step));
  }

  const double lr = lr_at(cfg, opt.step);
  const long t = opt.step + 1;
  const S bc1 = S(1) / static_cast<S>(1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
  const S bc2 = S(1) / static_cast<S>(1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
  const S b1 = static_cast<S>(cfg.beta1), b2 = static_cast<S>(cfg.beta2);
  const S eps = static_cast<S>(cfg.eps), step_size = static_cast<S>(lr);
  for (std::size_t p = 0; p < named.size(); ++p) {
    Tensor<S>& w = named[p].second;
    S* mp = opt.m[p].data();
    S* vp = opt.v[p].data();
    const S* g = w.grad();
    S* x = w.data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      mp[i] = b1 * mp[i] + (S(1) - b1) * g[i];
      vp[i] = b2 * vp[i] + (S(1) - b2) * g[i] * g[i];
      const S mhat = mp[i] * bc1;
      const S vhat = vp[i] * bc2;
      x[i] -= step_size * mhat / (std::sqrt(vhat) + eps);
    }
  }
  ++opt.step;
  return total;
}

struct EvalReport {
  int ways = 0;
  int shots = 0;
  int episodes = 0;
  double mean_accuracy = 0.0;
  double ci95 = 0.0;
  double wall_seconds = 0.0;
};

inline double fraction_correct(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.size() != truth.size() || pred.empty()) {
    throw ShapeError(concat("fraction_correct: ", pred.size(), " predictions vs ", truth.size(),
                            " labels"));
  }
  int hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

// Episodic evaluation protocol: n_episodes independent tasks, `queries`
// query images per class, accuracy averaged per episode, 95% interval from
// the sample standard deviation. Episode i derives its RNG statelessly from
// the base RNG, so the result is invariant to the worker count.
template <class ModelFn>
EvalReport evaluate(const ModelFn& model, const Dataset& ds, int ways, int shots, int n_episodes,
                    int queries, Rng base_rng, int threads = 1) {
  if (n_episodes < 1) throw ValueError(concat("evaluate: n_episodes must be >= 1, got ", n_episodes));
  const auto started = std::chrono::steady_clock::now();
  std::vector<double> acc(n_episodes, 0.0);
  auto run_range = [&](int first, int stride) {
    for (int i = first; i < n_episodes; i += stride) {
      Rng episode_rng = base_rng.derive(static_cast<std::uint64_t>(i));
      const Episode ep = sample_episode(ds, ways, shots, queries, episode_rng);
      acc[i] = fraction_correct(model(ep), ep.query_labels);
    }
  };
  threads = std::max(1, std::min(threads, n_episodes));
  if (threads == 1) {
    run_range(0, 1);
  } else {
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t) pool.emplace_back(run_range, t, threads);
    for (std::thread& th : pool) th.join();
  }
  double mean = 0.0;
  for (double a : acc) mean += a;
  mean /= n_episodes;
  double var = 0.0;
  for (double a : acc) var += (a - mean) * (a - mean);
  const double sd = n_episodes > 1 ? std::sqrt(var / (n_episodes - 1)) : 0.0;
  EvalReport rep;
  rep.ways = ways;
  rep.shots = shots;
  rep.episodes = n_episodes;
  rep.mean_accuracy = mean;
  rep.ci95 = 1.96 * sd / std::sqrt(static_cast<double>(n_episodes));
  rep.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return rep;
}

// Read-only prediction callable over shared model parameters.
template <class S>
auto model_predictor(ModelParams<S>& params, bool per_class_sum = false) {
  return [&params, per_class_sum](const Episode& ep) {
    return predict_episode(params, ep, per_class_sum);
  };
}

// Append-only training metrics: `step,loss,lr,val_acc` rows.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path) : out_(path, std::ios::app) {
    if (!out_) throw IoError(concat("cannot open metrics file: ", path));
    if (out_.tellp() == 0) out_ << "step,loss,lr,val_acc\n";
  }

  void row(long step, double loss, double lr, double val_acc = -1.0) {
    out_ << step << ',' << loss << ',' << lr << ',';
    if (val_acc >= 0.0) out_ << val_acc;
    out_ << '\n';
    out_.flush();
  }

  // Evaluation result at a checkpointed step; loss and lr stay blank.
  void eval_row(long step, double val_acc) {
    out_ << step << ",,," << val_acc << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

}  // namespace mematch
