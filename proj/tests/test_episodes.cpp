#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <vector>

#include "mematch/episodes.hpp"
#include "mematch/image_io.hpp"
#include "mematch/rng.hpp"

using namespace mematch;
namespace fs = std::filesystem;

namespace {

// Temporary dataset tree builder: root/dataset.toml + split/class/*.pgm.
struct TreeFixture {
  fs::path root;

  TreeFixture() {
    root = fs::temp_directory_path() / ("mematch_eps_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(counter()++));
    fs::create_directories(root);
  }
  ~TreeFixture() { fs::remove_all(root); }

  static int& counter() {
    static int c = 0;
    return c;
  }

  void manifest(int channels, int h, int w) const {
    std::ofstream out(root / "dataset.toml");
    out << "[images]\nchannels = " << channels << "\nheight = " << h << "\nwidth = " << w << "\n";
  }

  void add_image(const std::string& split, const std::string& cls, const std::string& name,
                 int h, int w, float base) const {
    fs::create_directories(root / split / cls);
    RawImage img;
    img.channels = 1;
    img.height = h;
    img.width = w;
    img.pixels.resize(static_cast<std::size_t>(h) * w);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        img.at(0, y, x) = std::min(1.0f, base + 0.005f * static_cast<float>(y * w + x));
    write_pgm(img, (root / split / cls / name).string());
  }
};

}  // namespace

TEST_CASE("load_dataset: small tree decodes with sorted classes") {
  TreeFixture tree;
  tree.manifest(1, 8, 8);
  for (const char* cls : {"beta", "alpha", "gamma"})
    for (int i = 0; i < 4; ++i)
      tree.add_image("train", cls, "img" + std::to_string(i) + ".pgm", 8, 8, 0.1f * (i + 1));

  Dataset ds = load_dataset(tree.root.string(), "train");
  REQUIRE(ds.num_classes() == 3);
  CHECK(ds.class_names == std::vector<std::string>{"alpha", "beta", "gamma"});
  CHECK(ds.min_images_per_class() == 4);
  CHECK(ds.spec.height == 8);
  CHECK(ds.classes[0][0].shape() == Shape{1, 8, 8});
}

TEST_CASE("load_dataset: images resize to the declared geometry") {
  TreeFixture tree;
  tree.manifest(1, 8, 8);
  tree.add_image("train", "a", "big.pgm", 16, 16, 0.2f);
  tree.add_image("train", "b", "small.pgm", 8, 8, 0.2f);
  Dataset ds = load_dataset(tree.root.string(), "train");
  for (int c = 0; c < 2; ++c) CHECK(ds.classes[c][0].shape() == Shape{1, 8, 8});
}

TEST_CASE("load_dataset: empty class folder names the folder") {
  TreeFixture tree;
  tree.manifest(1, 8, 8);
  tree.add_image("train", "full", "x.pgm", 8, 8, 0.3f);
  fs::create_directories(tree.root / "train" / "hollow");
  CHECK_THROWS_WITH_AS(load_dataset(tree.root.string(), "train"), doctest::Contains("hollow"),
                       IoError);
}

TEST_CASE("load_dataset: missing manifest is a config error") {
  TreeFixture tree;
  tree.add_image("train", "a", "x.pgm", 8, 8, 0.3f);
  CHECK_THROWS_AS(load_dataset(tree.root.string(), "train"), Error);
}

TEST_CASE("augment_rotations: quadruples classes, keeps counts, names rotations") {
  TreeFixture tree;
  tree.manifest(1, 8, 8);
  for (const char* cls : {"a", "b", "c"})
    for (int i = 0; i < 3; ++i)
      tree.add_image("train", cls, "i" + std::to_string(i) + ".pgm", 8, 8, 0.15f * (i + 1));
  Dataset ds = load_dataset(tree.root.string(), "train");
  Dataset rot = augment_rotations(ds);
  REQUIRE(rot.num_classes() == 12);
  for (int c = 0; c < 12; ++c) CHECK(rot.classes[c].size() == 3);
  CHECK(rot.class_names[1] == "a_rot090");
  CHECK(rot.class_names[6] == "b_rot180");

  // 180-degree class rotated by 180 again equals the base images bit-exactly.
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 3; ++i) {
      const Tensor<float>& base = rot.classes[4 * c][i];
      const Tensor<float>& r180 = rot.classes[4 * c + 2][i];
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
          CHECK(base[y * 8 + x] == r180[(7 - y) * 8 + (7 - x)]);
    }
}

TEST_CASE("augment_rotations: rejects non-square images") {
  Dataset ds;
  ds.spec = {1, 4, 6};
  ds.class_names = {"a"};
  ds.classes = {{Tensor<float>::zeros({1, 4, 6})}};
  CHECK_THROWS_AS(augment_rotations(ds), ValueError);
}

TEST_CASE("rotate90: two half turns are the identity") {
  RawImage img;
  img.channels = 1;
  img.height = 6;
  img.width = 6;
  img.pixels.resize(36);
  Rng rng(81);
  for (auto& p : img.pixels) p = static_cast<float>(rng.uniform(0.0, 1.0));
  RawImage twice = rotate90(rotate90(img, 2), 2);
  CHECK(twice.pixels == img.pixels);
}

TEST_CASE("sample_episode: evaluation shape is 5 support and 75 queries") {
  Dataset ds = make_synthetic_dataset(82, 0, 8, 20, 0.1, 8, 1, "train");
  Rng rng(83);
  Episode ep = sample_episode(ds, 5, 1, 15, rng);
  CHECK(ep.support_size() == 5);
  CHECK(ep.query_size() == 75);
  CHECK(ep.write_order.size() == 5);
  for (int i = 0; i < 5; ++i) CHECK(ep.support_labels[i] == i);  // class-major local labels
  for (int j = 0; j < 75; ++j) CHECK(ep.query_labels[j] == j / 15);
}

TEST_CASE("sample_episode: support and query instances are disjoint") {
  Dataset ds = make_synthetic_dataset(84, 0, 6, 6, 0.1, 8, 1, "train");
  Rng rng(85);
  for (int rep = 0; rep < 200; ++rep) {
    Episode ep = sample_episode(ds, 3, 2, 3, rng);
    std::set<const float*> support;
    for (const auto& t : ep.support_images) support.insert(t.data());
    for (const auto& t : ep.query_images) CHECK(support.count(t.data()) == 0);
  }
}

TEST_CASE("sample_episode: class selection is uniform over 10k draws") {
  Dataset ds = make_synthetic_dataset(86, 0, 6, 4, 0.1, 8, 1, "train");
  Rng rng(87);
  std::vector<int> hits(6, 0);
  const int n = 10000;
  for (int rep = 0; rep < n; ++rep) {
    Episode ep = sample_episode(ds, 2, 1, 1, rng);
    // recover global classes by matching support image pointers
    for (const auto& img : ep.support_images)
      for (int c = 0; c < 6; ++c)
        for (const auto& cand : ds.classes[c])
          if (cand.data() == img.data()) ++hits[c];
  }
  const double expect = n * 2.0 / 6.0;
  const double sigma = std::sqrt(n * (2.0 / 6.0) * (1.0 - 2.0 / 6.0));
  for (int c = 0; c < 6; ++c) CHECK(std::abs(hits[c] - expect) <= 3.0 * sigma);
}

TEST_CASE("sample_episode: insufficient classes or images raise") {
  Dataset ds = make_synthetic_dataset(88, 0, 3, 3, 0.1, 8, 1, "train");
  Rng rng(89);
  CHECK_THROWS_AS(sample_episode(ds, 4, 1, 1, rng), ValueError);
  CHECK_THROWS_AS(sample_episode(ds, 2, 2, 2, rng), ValueError);  // needs 4 per class, has 3
}

TEST_CASE("sample_by_strategy: uniform keeps the setting, mixed_k redraws shots") {
  Dataset ds = make_synthetic_dataset(90, 0, 8, 10, 0.1, 8, 1, "train");
  Rng rng(91);
  StrategyConfig uni;  // uniform 5-way 1-shot
  for (int rep = 0; rep < 20; ++rep) {
    Episode ep = sample_by_strategy(ds, uni, 2, rng);
    CHECK(ep.ways == 5);
    CHECK(ep.shots == 1);
  }
  StrategyConfig mk;
  mk.kind = StrategyKind::mixed_k;
  mk.shots_min = 1;
  mk.shots_max = 5;
  std::set<int> shots_seen;
  for (int rep = 0; rep < 100; ++rep) {
    Episode ep = sample_by_strategy(ds, mk, 2, rng);
    CHECK(ep.ways == 5);
    shots_seen.insert(ep.shots);
  }
  CHECK(shots_seen.size() == 5);
}

TEST_CASE("sample_by_strategy: mixed_ck covers the grid uniformly over 10k draws") {
  Dataset ds = make_synthetic_dataset(92, 0, 8, 12, 0.1, 8, 1, "train");
  Rng rng(93);
  StrategyConfig ck;
  ck.kind = StrategyKind::mixed_ck;  // C in 2..5, k in 1..5
  std::map<std::pair<int, int>, int> grid;
  const int n = 10000;
  for (int rep = 0; rep < n; ++rep) {
    Episode ep = sample_by_strategy(ds, ck, 3, rng);
    ++grid[{ep.ways, ep.shots}];
    CHECK(ep.ways >= 2);
    CHECK(ep.ways <= 5);
    CHECK(ep.shots >= 1);
    CHECK(ep.shots <= 5);
  }
  REQUIRE(grid.size() == 20);
  const double expect = n / 20.0;
  const double sigma = std::sqrt(n * (1.0 / 20.0) * (19.0 / 20.0));
  for (const auto& [cell, count] : grid) CHECK(std::abs(count - expect) <= 3.0 * sigma);
}

TEST_CASE("episode invariants hold under strategy fuzz") {
  Dataset ds = make_synthetic_dataset(94, 0, 8, 12, 0.1, 8, 1, "train");
  Rng rng(95);
  StrategyConfig ck;
  ck.kind = StrategyKind::mixed_ck;
  for (int rep = 0; rep < 10000; ++rep) {
    Episode ep = sample_by_strategy(ds, ck, 2, rng);
    REQUIRE(ep.support_size() == ep.ways * ep.shots);
    REQUIRE(ep.query_size() == ep.ways * 2);
    std::vector<int> support_counts(ep.ways, 0), query_counts(ep.ways, 0);
    for (int y : ep.support_labels) {
      REQUIRE(y >= 0);
      REQUIRE(y < ep.ways);
      ++support_counts[y];
    }
    for (int y : ep.query_labels) {
      REQUIRE(y >= 0);
      REQUIRE(y < ep.ways);
      ++query_counts[y];
    }
    for (int c = 0; c < ep.ways; ++c) {
      REQUIRE(support_counts[c] == ep.shots);
      REQUIRE(query_counts[c] == 2);
    }
    std::vector<bool> seen(ep.support_size(), false);
    for (int idx : ep.write_order) {
      REQUIRE(idx >= 0);
      REQUIRE(idx < ep.support_size());
      REQUIRE(!seen[idx]);
      seen[idx] = true;
    }
  }
}

TEST_CASE("sampling is deterministic under a fixed seed") {
  Dataset ds = make_synthetic_dataset(96, 0, 6, 6, 0.1, 8, 1, "train");
  auto draw = [&] {
    Rng rng(97);
    std::vector<const float*> ptrs;
    std::vector<int> order;
    for (int rep = 0; rep < 50; ++rep) {
      Episode ep = sample_episode(ds, 3, 1, 2, rng);
      for (const auto& t : ep.support_images) ptrs.push_back(t.data());
      for (const auto& t : ep.query_images) ptrs.push_back(t.data());
      order.insert(order.end(), ep.write_order.begin(), ep.write_order.end());
    }
    return std::pair(ptrs, order);
  };
  CHECK(draw() == draw());
}

TEST_CASE("synthetic data: classes are deterministic functions of (seed, offset, index)") {
  Dataset a = make_synthetic_dataset(98, 0, 4, 3, 0.1, 8, 1, "train");
  Dataset b = make_synthetic_dataset(98, 0, 4, 3, 0.1, 8, 1, "train");
  for (int c = 0; c < 4; ++c)
    for (int i = 0; i < 3; ++i)
      for (int p = 0; p < 64; ++p) CHECK(a.classes[c][i][p] == b.classes[c][i][p]);

  Dataset shifted = make_synthetic_dataset(98, 1000, 4, 3, 0.1, 8, 1, "test");
  std::set<std::string> names(a.class_names.begin(), a.class_names.end());
  for (const std::string& n : shifted.class_names) CHECK(names.count(n) == 0);
}

TEST_CASE("synthetic data: coarse blocks give cell-constant noiseless masks") {
  Dataset ds = make_synthetic_dataset(99, 0, 3, 2, 0.0, 8, 4, "train");
  for (int c = 0; c < 3; ++c) {
    const Tensor<float>& img = ds.classes[c][0];
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x)
        CHECK(img[y * 8 + x] == img[(y / 4 * 4) * 8 + (x / 4 * 4)]);
  }
}

TEST_CASE("synthetic data: block must divide the image size") {
  CHECK_THROWS_AS(make_synthetic_dataset(1, 0, 2, 2, 0.1, 8, 3, "train"), ValueError);
  CHECK_THROWS_AS(make_synthetic_dataset(1, 0, 2, 2, 0.1, 8, 0, "train"), ValueError);
}
