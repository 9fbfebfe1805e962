#pragma once

#include <string>
#include <vector>

#include "mematch/model.hpp"

namespace mematch {

// Dot-product similarity for one episode: rows are support samples and
// columns are queries, both in class-major episode order.
Tensor<float> similarity_matrix(ModelParams<float>& params, const Episode& ep);

// Query embeddings under the episode's predicted parameter vector: [Q, D_z].
Tensor<float> query_embeddings(ModelParams<float>& params, const Episode& ep);

// Plain numeric CSV, one matrix row per line.
void write_matrix_csv(const std::string& path, const Tensor<float>& m);

// One embedding per line with its integer label appended as the last column.
void write_embeddings_csv(const std::string& path, const Tensor<float>& rows,
                          const std::vector<int>& labels);

}  // namespace mematch
