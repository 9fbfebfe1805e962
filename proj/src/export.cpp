#include "mematch/export.hpp"

#include <fstream>

namespace mematch {

Tensor<float> similarity_matrix(ModelParams<float>& params, const Episode& ep) {
  EpisodeForward<float> fwd =
      episode_forward<float>(nullptr, params, ep, ops::BnMode::train, false);
  const int q = fwd.logits.dim(0);
  const int n = fwd.logits.dim(1);
  Tensor<float> out = Tensor<float>::zeros({n, q});
  for (int j = 0; j < q; ++j)
    for (int i = 0; i < n; ++i)
      out[static_cast<std::size_t>(i) * q + j] = fwd.logits[static_cast<std::size_t>(j) * n + i];
  return out;
}

Tensor<float> query_embeddings(ModelParams<float>& params, const Episode& ep) {
  return episode_forward<float>(nullptr, params, ep, ops::BnMode::train, false).f_mat;
}

namespace {

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError(concat("cannot open output file: ", path));
  out.precision(8);
  return out;
}

}  // namespace

void write_matrix_csv(const std::string& path, const Tensor<float>& m) {
  if (m.ndim() != 2) throw ShapeError(concat("write_matrix_csv: need a matrix, got ",
                                             shape_str(m.shape())));
  std::ofstream out = open_out(path);
  for (int r = 0; r < m.dim(0); ++r) {
    for (int c = 0; c < m.dim(1); ++c) {
      if (c) out << ',';
      out << m[static_cast<std::size_t>(r) * m.dim(1) + c];
    }
    out << '\n';
  }
  if (!out) throw IoError(concat("failed writing: ", path));
}

void write_embeddings_csv(const std::string& path, const Tensor<float>& rows,
                          const std::vector<int>& labels) {
  if (rows.ndim() != 2) throw ShapeError(concat("write_embeddings_csv: need [rows, dim], got ",
                                                shape_str(rows.shape())));
  if (static_cast<int>(labels.size()) != rows.dim(0)) {
    throw ShapeError(concat("write_embeddings_csv: ", rows.dim(0), " rows vs ", labels.size(),
                            " labels"));
  }
  std::ofstream out = open_out(path);
  for (int r = 0; r < rows.dim(0); ++r) {
    for (int c = 0; c < rows.dim(1); ++c) {
      out << rows[static_cast<std::size_t>(r) * rows.dim(1) + c] << ',';
    }
    out << labels[r] << '\n';
  }
  if (!out) throw IoError(concat("failed writing: ", path));
}

}  // namespace mematch
