#pragma once

#include <array>

#include "mematch/ops.hpp"
#include "mematch/rng.hpp"

namespace mematch {

// One backbone block: 3x3 conv -> batchnorm -> relu -> 2x2 maxpool, the pool
// being skipped once the spatial extent drops below 2.
template <class S>
struct ConvBlock {
  Tensor<S> w;      // [F, Cin, 3, 3]
  Tensor<S> b;      // [F]
  Tensor<S> gamma;  // [F]
  Tensor<S> beta;   // [F]
};

template <class S>
struct BackboneParams {
  std::array<ConvBlock<S>, 4> blocks;
  std::array<ops::BnState<S>, 4> bn;  // running stats, shared by both embed paths
  int in_channels = 1;
  int filters = 64;

  static BackboneParams init(int in_channels, int filters, Rng& rng) {
    BackboneParams p;
    p.in_channels = in_channels;
    p.filters = filters;
    for (int i = 0; i < 4; ++i) {
      const int cin = i == 0 ? in_channels : filters;
      const S limit = std::sqrt(S(6) / static_cast<S>(cin * 9));
      p.blocks[i].w = Tensor<S>::uniform({filters, cin, 3, 3}, rng, -limit, limit);
      p.blocks[i].b = Tensor<S>::zeros({filters});
      p.blocks[i].gamma = Tensor<S>::full({filters}, S(1));
      p.blocks[i].beta = Tensor<S>::zeros({filters});
      p.blocks[i].w.set_requires_grad(true);
      p.blocks[i].b.set_requires_grad(true);
      p.blocks[i].gamma.set_requires_grad(true);
      p.blocks[i].beta.set_requires_grad(true);
      p.bn[i] = ops::BnState<S>::make(filters);
      // A fresh model is evaluable: running stats start at the (0, 1) prior.
      p.bn[i].initialized = true;
    }
    return p;
  }
};

// Final conv of the query network, factorized as M_out * diag(W) * M_in with
// only the diagonal predicted per episode.
template <class S>
struct FactorizedConvSpec {
  Tensor<S> m_in;   // [D_w, F], bias-less
  Tensor<S> m_out;  // [F, D_w]
  Tensor<S> bias;   // [F]

  int dw() const { return m_in.dim(0); }

  static FactorizedConvSpec init(int filters, int d_w, Rng& rng) {
    FactorizedConvSpec f;
    const S lim_in = std::sqrt(S(6) / static_cast<S>(filters));
    const S lim_out = std::sqrt(S(6) / static_cast<S>(d_w));
    f.m_in = Tensor<S>::uniform({d_w, filters}, rng, -lim_in, lim_in);
    f.m_out = Tensor<S>::uniform({filters, d_w}, rng, -lim_out, lim_out);
    f.bias = Tensor<S>::zeros({filters});
    f.m_in.set_requires_grad(true);
    f.m_out.set_requires_grad(true);
    f.bias.set_requires_grad(true);
    return f;
  }
};

// Spatial size after the four blocks (conv preserves size; pool halves while
// at least 2 pixels remain).
inline int backbone_out_spatial(int s) {
  for (int i = 0; i < 4; ++i) {
    if (s >= 2) s /= 2;
  }
  return s;
}

// Flattened feature dimension for a given input geometry.
inline int backbone_out_dim(int filters, int h, int w) {
  return filters * backbone_out_spatial(h) * backbone_out_spatial(w);
}

namespace detail_backbone {

template <class S>
Tensor<S> finish_block(Tape<S>* tape, Tensor<S> pre_bn, BackboneParams<S>& params, int block,
                       ops::BnMode mode, bool update_stats) {
  ops::BnState<S>* state = (mode == ops::BnMode::eval || update_stats) ? &params.bn[block] : nullptr;
  Tensor<S> h = ops::batchnorm(tape, pre_bn, params.blocks[block].gamma,
                               params.blocks[block].beta, state, mode);
  h = ops::relu(tape, h);
  if (h.dim(2) >= 2 && h.dim(3) >= 2) h = ops::maxpool2_batched(tape, h);
  return h;
}

template <class S>
Tensor<S> run_blocks(Tape<S>* tape, const Tensor<S>& images, BackboneParams<S>& params, int first,
                     int last, ops::BnMode mode, bool update_stats) {
  Tensor<S> h = images;
  for (int i = first; i <= last; ++i) {
    Tensor<S> pre = ops::conv2d_batched(tape, h, params.blocks[i].w, params.blocks[i].b);
    h = finish_block(tape, std::move(pre), params, i, mode, update_stats);
  }
  return h;
}

template <class S>
void check_images(const char* op, const Tensor<S>& images, const BackboneParams<S>& params) {
  if (images.ndim() != 4 || images.dim(1) != params.in_channels) {
    throw ShapeError(concat(op, ": expected [B,", params.in_channels, ",H,W] batch, got ",
                            shape_str(images.shape())));
  }
}

}  // namespace detail_backbone

// Raw features of a batch: [B,Cin,H,W] -> [B, D_z]. The whole batch shares
// one batchnorm statistic, so callers group support and query images into
// separate batches. `update_stats` folds train-mode batch statistics into the
// running averages; disable for pure-function probes.
template <class S>
Tensor<S> embed_raw_batch(Tape<S>* tape, const Tensor<S>& images, BackboneParams<S>& params,
                          ops::BnMode mode, bool update_stats = true) {
  detail_backbone::check_images("embed_raw_batch", images, params);
  Tensor<S> h = detail_backbone::run_blocks(tape, images, params, 0, 3, mode, update_stats);
  return ops::reshape(tape, h, {h.dim(0), h.dim(1) * h.dim(2) * h.dim(3)});
}

// Query-network features: identical to embed_raw_batch except block 4's
// convolution becomes M_out * diag(w_pred) * M_in with the per-episode
// predicted diagonal. Blocks 1-3 and all batchnorm parameters are shared.
template <class S>
Tensor<S> embed_query_batch(Tape<S>* tape, const Tensor<S>& images, BackboneParams<S>& params,
                            const FactorizedConvSpec<S>& fspec, const Tensor<S>& w_pred,
                            ops::BnMode mode, bool update_stats = true) {
  detail_backbone::check_images("embed_query_batch", images, params);
  if (w_pred.ndim() != 1 || w_pred.dim(0) != fspec.dw()) {
    throw ShapeError(concat("embed_query_batch: predicted vector ", shape_str(w_pred.shape()),
                            " vs D_w ", fspec.dw()));
  }
  Tensor<S> h = detail_backbone::run_blocks(tape, images, params, 0, 2, mode, update_stats);
  Tensor<S> pre = ops::conv1x1_batched(tape, h, fspec.m_in);
  pre = ops::channel_scale_batched(tape, pre, w_pred);
  pre = ops::conv1x1_batched(tape, pre, fspec.m_out, std::optional<Tensor<S>>(fspec.bias));
  h = detail_backbone::finish_block(tape, std::move(pre), params, 3, mode, update_stats);
  return ops::reshape(tape, h, {h.dim(0), h.dim(1) * h.dim(2) * h.dim(3)});
}

}  // namespace mematch
