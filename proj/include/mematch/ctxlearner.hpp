#pragma once

#include "mematch/memory.hpp"
#include "mematch/ops.hpp"
#include "mematch/rng.hpp"

namespace mematch {

// Bidirectional LSTM over memory slots plus the projection that turns the
// summed final hidden states into the predicted parameter vector.
template <class S>
struct LearnerParams {
  ops::LstmCellWeights<S> fwd;
  ops::LstmCellWeights<S> bwd;
  Tensor<S> t_p;  // [D_w, D_r]

  int hidden() const { return fwd.hidden(); }

  static LearnerParams init(int d_m, int d_r, int d_w, Rng& rng) {
    LearnerParams lp;
    const S limit = S(1) / std::sqrt(static_cast<S>(d_r));
    for (ops::LstmCellWeights<S>* dir : {&lp.fwd, &lp.bwd}) {
      for (int g = 0; g < 4; ++g) {
        dir->w_x[g] = Tensor<S>::uniform({d_r, d_m}, rng, -limit, limit);
        dir->w_h[g] = Tensor<S>::uniform({d_r, d_r}, rng, -limit, limit);
        // Forget gate (index 1) biased open; the rest start neutral.
        dir->bias[g] = Tensor<S>::full({d_r}, g == 1 ? S(1) : S(0));
        dir->w_x[g].set_requires_grad(true);
        dir->w_h[g].set_requires_grad(true);
        dir->bias[g].set_requires_grad(true);
      }
    }
    // Zero projection: the first predicted vectors are zero, so the query
    // network starts bias-only and early training is carried by the support
    // embedding path.
    lp.t_p = Tensor<S>::zeros({d_w, d_r});
    lp.t_p.set_requires_grad(true);
    return lp;
  }
};

namespace detail_learner {

template <class S>
Tensor<S> run_direction(Tape<S>* tape, const Memory<S>& mem, const ops::LstmCellWeights<S>& wts,
                        bool reverse) {
  const int d_r = wts.hidden();
  Tensor<S> h = Tensor<S>::zeros({d_r});
  Tensor<S> c = Tensor<S>::zeros({d_r});
  const int n = mem.size();
  for (int step = 0; step < n; ++step) {
    const int i = reverse ? n - 1 - step : step;
    auto [h2, c2] = ops::lstm_cell(tape, mem.slot(i).key, h, c, wts);
    h = h2;
    c = c2;
  }
  return h;
}

}  // namespace detail_learner

// Sum of the two directions' final hidden states; slots are consumed in
// allocation order and its reverse.
template <class S>
Tensor<S> encode_memory(Tape<S>* tape, const Memory<S>& mem, const LearnerParams<S>& lp) {
  if (mem.empty()) throw ValueError("encode_memory: memory is empty");
  if (mem.key_dim() != lp.fwd.input()) {
    throw ShapeError(concat("encode_memory: key_dim ", mem.key_dim(), " vs LSTM input ",
                            lp.fwd.input()));
  }
  Tensor<S> hf = detail_learner::run_direction(tape, mem, lp.fwd, false);
  Tensor<S> hb = detail_learner::run_direction(tape, mem, lp.bwd, true);
  return ops::add(tape, hf, hb);
}

// Predicted parameter vector for the query network's factorized layer.
template <class S>
Tensor<S> predict_params(Tape<S>* tape, const Memory<S>& mem, const LearnerParams<S>& lp) {
  return ops::linear(tape, lp.t_p, encode_memory(tape, mem, lp));
}

}  // namespace mematch
