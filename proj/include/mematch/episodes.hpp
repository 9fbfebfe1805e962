#pragma once

#include <string>
#include <vector>

#include "mematch/config.hpp"
#include "mematch/rng.hpp"
#include "mematch/tensor.hpp"

namespace mematch {

struct ImageSpec {
  int channels = 1;
  int height = 28;
  int width = 28;

  bool operator==(const ImageSpec&) const = default;
};

// Immutable class-indexed image collection for one split. Images are stored
// as [C,H,W] tensors in [0,1].
struct Dataset {
  ImageSpec spec;
  std::string split;
  std::vector<std::string> class_names;
  std::vector<std::vector<Tensor<float>>> classes;

  int num_classes() const { return static_cast<int>(classes.size()); }
  int min_images_per_class() const;
};

// One self-contained task: support and query samples over the same classes,
// labels local to the episode (0..ways-1), support class-major. `write_order`
// is the seeded shuffle in which support samples enter the memory.
struct Episode {
  int ways = 0;
  int shots = 0;
  int queries = 0;
  std::vector<Tensor<float>> support_images;
  std::vector<int> support_labels;
  std::vector<Tensor<float>> query_images;
  std::vector<int> query_labels;
  std::vector<int> write_order;

  int support_size() const { return static_cast<int>(support_images.size()); }
  int query_size() const { return static_cast<int>(query_images.size()); }
};

// Reads `root/dataset.toml` for the image spec, then decodes every image in
// `root/<split>/<class_dir>/`, resizing to the declared geometry.
Dataset load_dataset(const std::string& root, const std::string& split);

// The manifest alone, exposed for tooling.
ImageSpec load_dataset_spec(const std::string& root);

// Every base class yields four classes (0/90/180/270 degree rotations);
// requires square images.
Dataset augment_rotations(const Dataset& ds);

// C classes without replacement, k+q distinct images per class; first k
// become support, the rest queries. Also draws the memory write order.
Episode sample_episode(const Dataset& ds, int ways, int shots, int queries, Rng& rng);

// Uniform keeps (ways, shots) fixed; mixed_k redraws shots per episode;
// mixed_ck redraws ways and shots independently from their ranges.
Episode sample_by_strategy(const Dataset& ds, const StrategyConfig& strategy, int queries,
                           Rng& rng);

// Procedural glyph classes: a fixed Bernoulli(0.5) mask per class plus
// per-instance Gaussian pixel noise. The mask is drawn on a (size/block)^2
// grid and upsampled, so block > 1 gives low-frequency blob patterns that
// survive pooling. Classes are identified by (seed, class_offset + index),
// so disjoint offsets give disjoint splits.
Dataset make_synthetic_dataset(std::uint64_t seed, int class_offset, int n_classes, int per_class,
                               double noise_sigma = 0.15, int size = 8, int block = 1,
                               const std::string& split = "train");

}  // namespace mematch
