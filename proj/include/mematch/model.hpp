#pragma once

#include <string>
#include <utility>
#include <vector>

#include "mematch/backbone.hpp"
#include "mematch/ctxlearner.hpp"
#include "mematch/episodes.hpp"
#include "mematch/memory.hpp"

namespace mematch {

// The full trainable set plus the geometry it was built for.
template <class S>
struct ModelParams {
  BackboneParams<S> backbone;
  FactorizedConvSpec<S> fconv;
  Tensor<S> t_z;  // [D_m, D_z]
  Tensor<S> t_c;  // [D_z, D_m]
  LearnerParams<S> learner;
  ImageSpec input;
  int d_z = 0;
  int d_m = 0;
  int d_r = 0;
  int d_w = 0;
  int memory_capacity = 0;  // 0 = one slot per support sample

  // Stable name -> tensor view of every trainable parameter (shared handles).
  std::vector<std::pair<std::string, Tensor<S>>> named_params() {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    for (int i = 0; i < 4; ++i) {
      const std::string p = concat("backbone.block", i, ".");
      out.emplace_back(p + "w", backbone.blocks[i].w);
      out.emplace_back(p + "b", backbone.blocks[i].b);
      out.emplace_back(p + "gamma", backbone.blocks[i].gamma);
      out.emplace_back(p + "beta", backbone.blocks[i].beta);
    }
    out.emplace_back("fconv.m_in", fconv.m_in);
    out.emplace_back("fconv.m_out", fconv.m_out);
    out.emplace_back("fconv.bias", fconv.bias);
    out.emplace_back("proj.t_z", t_z);
    out.emplace_back("proj.t_c", t_c);
    const char* dir_name[2] = {"fwd", "bwd"};
    ops::LstmCellWeights<S>* dirs[2] = {&learner.fwd, &learner.bwd};
    for (int d = 0; d < 2; ++d) {
      for (int g = 0; g < 4; ++g) {
        const std::string p = concat("learner.", dir_name[d], ".gate", g, ".");
        out.emplace_back(p + "w_x", dirs[d]->w_x[g]);
        out.emplace_back(p + "w_h", dirs[d]->w_h[g]);
        out.emplace_back(p + "bias", dirs[d]->bias[g]);
      }
    }
    out.emplace_back("learner.t_p", learner.t_p);
    return out;
  }

  // Non-trainable batchnorm running statistics, for checkpointing.
  std::vector<std::pair<std::string, Tensor<S>>> named_stats() {
    std::vector<std::pair<std::string, Tensor<S>>> out;
    for (int i = 0; i < 4; ++i) {
      out.emplace_back(concat("bn", i, ".running_mean"), backbone.bn[i].running_mean);
      out.emplace_back(concat("bn", i, ".running_var"), backbone.bn[i].running_var);
    }
    return out;
  }
};

template <class S>
ModelParams<S> init_model(const ImageSpec& input, int filters, int d_m, int d_r, int d_w,
                          int memory_capacity, Rng& rng) {
  ModelParams<S> p;
  p.input = input;
  p.backbone = BackboneParams<S>::init(input.channels, filters, rng);
  p.fconv = FactorizedConvSpec<S>::init(filters, d_w, rng);
  p.d_z = backbone_out_dim(filters, input.height, input.width);
  p.d_m = d_m;
  p.d_r = d_r;
  p.d_w = d_w;
  p.memory_capacity = memory_capacity;
  const S lim_z = std::sqrt(S(6) / static_cast<S>(p.d_z + d_m));
  const S lim_c = std::sqrt(S(6) / static_cast<S>(p.d_z + d_m));
  p.t_z = Tensor<S>::uniform({d_m, p.d_z}, rng, -lim_z, lim_z);
  p.t_c = Tensor<S>::uniform({p.d_z, d_m}, rng, -lim_c, lim_c);
  p.t_z.set_requires_grad(true);
  p.t_c.set_requires_grad(true);
  p.learner = LearnerParams<S>::init(d_m, d_r, d_w, rng);
  return p;
}

// Image list -> one [B,C,H,W] batch tensor of the model's scalar type.
template <class S>
Tensor<S> to_batch(const std::vector<Tensor<float>>& images, const ImageSpec& spec) {
  if (images.empty()) throw ShapeError("to_batch: empty image list");
  const Shape want{spec.channels, spec.height, spec.width};
  const std::size_t block = shape_numel(want);
  Tensor<S> out = Tensor<S>::zeros({static_cast<int>(images.size()), spec.channels, spec.height,
                                    spec.width});
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i].shape() != want) {
      throw ShapeError(concat("to_batch: image ", i, " is ", shape_str(images[i].shape()),
                              ", expected ", shape_str(want)));
    }
    const float* src = images[i].data();
    S* dst = out.data() + i * block;
    for (std::size_t j = 0; j < block; ++j) dst[j] = static_cast<S>(src[j]);
  }
  return out;
}

// Intermediate products of one episode forward pass, kept for analysis
// exports (similarity matrices, embedding dumps).
template <class S>
struct EpisodeForward {
  Tensor<S> g_mat;    // [N, D_z] context-refined support embeddings
  Tensor<S> f_mat;    // [Q, D_z] query embeddings under the predicted W
  Tensor<S> logits;   // [Q, N], entry (j, n) = f(query_j) . g(support_n)
};

// Full episode forward pass: encode the support set into memory, refine
// support embeddings with memory context, predict the query network's
// parameter vector, embed queries, and score every query against every
// support sample by dot product.
template <class S>
EpisodeForward<S> episode_forward(Tape<S>* tape, ModelParams<S>& params, const Episode& ep,
                                  ops::BnMode mode, bool update_stats = true) {
  if (ep.support_size() < 1 || ep.query_size() < 1) {
    throw ValueError(concat("episode_forward: degenerate episode (", ep.support_size(),
                            " support, ", ep.query_size(), " queries)"));
  }
  const int n = ep.support_size();
  std::vector<int> order = ep.write_order;
  if (order.empty()) {
    order.resize(n);
    for (int i = 0; i < n; ++i) order[i] = i;
  }

  Tensor<S> support_batch = to_batch<S>(ep.support_images, params.input);
  Tensor<S> query_batch = to_batch<S>(ep.query_images, params.input);
  Tensor<S> z_support = embed_raw_batch(tape, support_batch, params.backbone, mode, update_stats);

  const int capacity = params.memory_capacity > 0 ? params.memory_capacity : n;
  Memory<S> mem = encode_support(tape, z_support, ep.support_labels, params.t_z, capacity, order);

  std::vector<Tensor<S>> g_rows;
  g_rows.reserve(n);
  for (int i = 0; i < n; ++i) {
    Tensor<S> z = ops::index0(tape, z_support, i);
    g_rows.push_back(contextual_embed_support(tape, z, mem, params.t_z, params.t_c));
  }

  EpisodeForward<S> fwd;
  fwd.g_mat = ops::stack(tape, g_rows);  // [N, D_z]
  Tensor<S> w_pred = predict_params(tape, mem, params.learner);
  fwd.f_mat = embed_query_batch(tape, query_batch, params.backbone, params.fconv, w_pred,
                                mode, update_stats);  // [Q, D_z]
  fwd.logits = ops::matmul_nt(tape, fwd.f_mat, fwd.g_mat);
  return fwd;
}

template <class S>
Tensor<S> episode_logits(Tape<S>* tape, ModelParams<S>& params, const Episode& ep,
                         ops::BnMode mode, bool update_stats = true) {
  return episode_forward(tape, params, ep, mode, update_stats).logits;
}

// Prediction for every query of an episode. Inference normalizes each
// episode's support and query batches with their own statistics (frozen
// running stats are kept only as a diagnostic path): the matcher is trained
// on per-episode batch statistics and is badly miscalibrated under marginal
// running averages.
template <class S>
std::vector<int> predict_episode(ModelParams<S>& params, const Episode& ep,
                                 bool per_class_sum = false) {
  Tensor<S> logits = episode_logits<S>(nullptr, params, ep, ops::BnMode::train, false);
  std::vector<int> out(ep.query_size());
  for (int j = 0; j < ep.query_size(); ++j) {
    out[j] = ops::predict_label(logits.data() + static_cast<std::size_t>(j) * ep.support_size(),
                                ep.support_size(), ep.support_labels, per_class_sum);
  }
  return out;
}

}  // namespace mematch
