#include "mematch/episodes.hpp"

#include <algorithm>
#include <filesystem>

#include "mematch/image_io.hpp"
#include "mematch/log.hpp"

namespace fs = std::filesystem;

namespace mematch {

namespace {

Tensor<float> image_to_tensor(const RawImage& img) {
  return Tensor<float>::from_data({img.channels, img.height, img.width},
                                  std::vector<float>(img.pixels.begin(), img.pixels.end()));
}

RawImage tensor_to_image(const Tensor<float>& t) {
  RawImage img;
  img.channels = t.dim(0);
  img.height = t.dim(1);
  img.width = t.dim(2);
  img.pixels.assign(t.data(), t.data() + t.size());
  return img;
}

}  // namespace

int Dataset::min_images_per_class() const {
  int m = classes.empty() ? 0 : static_cast<int>(classes[0].size());
  for (const auto& c : classes) m = std::min(m, static_cast<int>(c.size()));
  return m;
}

ImageSpec load_dataset_spec(const std::string& root) {
  const fs::path manifest = fs::path(root) / "dataset.toml";
  if (!fs::exists(manifest)) {
    throw IoError(concat("dataset manifest not found: ", manifest.string()));
  }
  const TomlDoc doc = read_toml_file(manifest.string());
  ImageSpec spec;
  auto sec = doc.find("images");
  if (sec == doc.end()) {
    throw ConfigError(concat(manifest.string(), ": missing [images] section"));
  }
  for (const auto& [key, val] : sec->second) {
    if (key == "channels") spec.channels = static_cast<int>(val.as_int("images.channels"));
    else if (key == "height") spec.height = static_cast<int>(val.as_int("images.height"));
    else if (key == "width") spec.width = static_cast<int>(val.as_int("images.width"));
    else throw ConfigError(concat(manifest.string(), ": unknown key images.", key));
  }
  if (spec.channels != 1 && spec.channels != 3) {
    throw ConfigError(concat(manifest.string(), ": images.channels must be 1 or 3, got ",
                             spec.channels));
  }
  if (spec.height < 1 || spec.width < 1) {
    throw ConfigError(concat(manifest.string(), ": non-positive image geometry"));
  }
  return spec;
}

Dataset load_dataset(const std::string& root, const std::string& split) {
  const ImageSpec spec = load_dataset_spec(root);
  const fs::path split_dir = fs::path(root) / split;
  if (!fs::is_directory(split_dir)) {
    throw IoError(concat("split directory not found: ", split_dir.string()));
  }
  Dataset ds;
  ds.spec = spec;
  ds.split = split;
  std::vector<fs::path> class_dirs;
  for (const auto& entry : fs::directory_iterator(split_dir)) {
    if (entry.is_directory()) class_dirs.push_back(entry.path());
  }
  std::sort(class_dirs.begin(), class_dirs.end());
  for (const fs::path& dir : class_dirs) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && is_supported_image(entry.path().filename().string())) {
        files.push_back(entry.path());
      }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) {
      throw IoError(concat("class folder has no images: ", dir.string()));
    }
    std::vector<Tensor<float>> images;
    images.reserve(files.size());
    for (const fs::path& f : files) {
      RawImage img = load_image(f.string());
      if (spec.channels == 1 && img.channels == 3) img = to_grayscale(img);
      if (img.channels != spec.channels) {
        throw IoError(concat(f.string(), ": has ", img.channels, " channels, manifest declares ",
                             spec.channels));
      }
      img = resize_bilinear(img, spec.height, spec.width);
      images.push_back(image_to_tensor(img));
    }
    ds.class_names.push_back(dir.filename().string());
    ds.classes.push_back(std::move(images));
  }
  if (ds.classes.empty()) {
    throw IoError(concat("no class folders under ", split_dir.string()));
  }
  log::info(concat("loaded ", ds.num_classes(), " classes (min ", ds.min_images_per_class(),
                   " images/class) from ", split_dir.string()));
  return ds;
}

Dataset augment_rotations(const Dataset& ds) {
  if (ds.spec.height != ds.spec.width) {
    throw ValueError(concat("augment_rotations: requires square images, got ", ds.spec.height,
                            "x", ds.spec.width));
  }
  Dataset out;
  out.spec = ds.spec;
  out.split = ds.split;
  static const char* suffix[4] = {"", "_rot090", "_rot180", "_rot270"};
  for (int c = 0; c < ds.num_classes(); ++c) {
    for (int k = 0; k < 4; ++k) {
      std::vector<Tensor<float>> images;
      images.reserve(ds.classes[c].size());
      for (const Tensor<float>& t : ds.classes[c]) {
        images.push_back(k == 0 ? t : image_to_tensor(rotate90(tensor_to_image(t), k)));
      }
      out.class_names.push_back(ds.class_names[c] + suffix[k]);
      out.classes.push_back(std::move(images));
    }
  }
  return out;
}

Episode sample_episode(const Dataset& ds, int ways, int shots, int queries, Rng& rng) {
  if (ways < 2) throw ValueError(concat("sample_episode: ways must be >= 2, got ", ways));
  if (shots < 1 || queries < 1) {
    throw ValueError(concat("sample_episode: shots ", shots, " and queries ", queries,
                            " must be >= 1"));
  }
  if (ds.num_classes() < ways) {
    throw ValueError(concat("sample_episode: dataset has ", ds.num_classes(), " classes, need ",
                            ways));
  }
  std::vector<int> class_idx(ds.num_classes());
  for (std::size_t i = 0; i < class_idx.size(); ++i) class_idx[i] = static_cast<int>(i);
  rng.shuffle(class_idx);
  class_idx.resize(ways);

  Episode ep;
  ep.ways = ways;
  ep.shots = shots;
  ep.queries = queries;
  for (int local = 0; local < ways; ++local) {
    const auto& pool = ds.classes[class_idx[local]];
    if (static_cast<int>(pool.size()) < shots + queries) {
      throw ValueError(concat("sample_episode: class '", ds.class_names[class_idx[local]],
                              "' has ", pool.size(), " images, need ", shots + queries));
    }
    std::vector<int> inst(pool.size());
    for (std::size_t i = 0; i < inst.size(); ++i) inst[i] = static_cast<int>(i);
    rng.shuffle(inst);
    for (int s = 0; s < shots; ++s) {
      ep.support_images.push_back(pool[inst[s]]);
      ep.support_labels.push_back(local);
    }
    for (int q = 0; q < queries; ++q) {
      ep.query_images.push_back(pool[inst[shots + q]]);
      ep.query_labels.push_back(local);
    }
  }
  ep.write_order.resize(ep.support_images.size());
  for (std::size_t i = 0; i < ep.write_order.size(); ++i) {
    ep.write_order[i] = static_cast<int>(i);
  }
  rng.shuffle(ep.write_order);
  return ep;
}

Episode sample_by_strategy(const Dataset& ds, const StrategyConfig& strategy, int queries,
                           Rng& rng) {
  int ways = strategy.ways;
  int shots = strategy.shots;
  switch (strategy.kind) {
    case StrategyKind::uniform:
      break;
    case StrategyKind::mixed_k:
      shots = rng.range(strategy.shots_min, strategy.shots_max);
      break;
    case StrategyKind::mixed_ck:
      ways = rng.range(strategy.ways_min, strategy.ways_max);
      shots = rng.range(strategy.shots_min, strategy.shots_max);
      break;
  }
  return sample_episode(ds, ways, shots, queries, rng);
}

Dataset make_synthetic_dataset(std::uint64_t seed, int class_offset, int n_classes, int per_class,
                               double noise_sigma, int size, int block, const std::string& split) {
  if (n_classes < 1 || per_class < 1 || size < 1) {
    throw ValueError(concat("make_synthetic_dataset: bad geometry ", n_classes, " classes x ",
                            per_class, " images, size ", size));
  }
  if (block < 1 || size % block != 0) {
    throw ValueError(concat("make_synthetic_dataset: block ", block,
                            " must be positive and divide size ", size));
  }
  Dataset ds;
  ds.spec = {1, size, size};
  ds.split = split;
  Rng root(seed);
  const std::size_t pixels = static_cast<std::size_t>(size) * size;
  const int coarse = size / block;
  for (int c = 0; c < n_classes; ++c) {
    Rng class_rng = root.derive("glyph-class").derive(static_cast<std::uint64_t>(class_offset + c));
    std::vector<float> cells(static_cast<std::size_t>(coarse) * coarse);
    for (float& m : cells) m = class_rng.next_double() < 0.5 ? 0.0f : 1.0f;
    std::vector<float> mask(pixels);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        mask[static_cast<std::size_t>(y) * size + x] =
            cells[static_cast<std::size_t>(y / block) * coarse + x / block];
    std::vector<Tensor<float>> images;
    images.reserve(per_class);
    for (int i = 0; i < per_class; ++i) {
      Rng inst_rng = class_rng.derive("instance").derive(static_cast<std::uint64_t>(i));
      std::vector<float> px(pixels);
      for (std::size_t p = 0; p < pixels; ++p) {
        const double v = 0.15 + 0.7 * mask[p] + noise_sigma * inst_rng.normal();
        px[p] = static_cast<float>(std::min(1.0, std::max(0.0, v)));
      }
      images.push_back(Tensor<float>::from_data({1, size, size}, std::move(px)));
    }
    ds.class_names.push_back(concat("glyph", class_offset + c));
    ds.classes.push_back(std::move(images));
  }
  return ds;
}

}  // namespace mematch
