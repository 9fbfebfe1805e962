#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <vector>

#include "mematch/checkpoint.hpp"
#include "mematch/export.hpp"
#include "mematch/trainer.hpp"

using namespace mematch;
namespace fs = std::filesystem;

namespace {

Dataset small_data(std::uint64_t seed, int offset = 0, int n_classes = 6, int per_class = 8) {
  return make_synthetic_dataset(seed, offset, n_classes, per_class, 0.03, 32, 8, "train");
}

template <class S>
ModelParams<S> small_model(std::uint64_t seed, const ImageSpec& spec, bool jitter = false) {
  Rng rng = Rng(seed).derive("init");
  ModelParams<S> p = init_model<S>(spec, 4, 8, 8, 4, 0, rng);
  if (jitter) {
    // Kick every parameter off its symmetric start; t_p = 0 would otherwise
    // keep the predicted-parameter path identically zero.
    Rng j(seed ^ 0x1717);
    for (auto& [name, t] : p.named_params())
      for (std::size_t i = 0; i < t.size(); ++i) t[i] += static_cast<S>(j.uniform(-0.05, 0.05));
  }
  return p;
}

// One-class episode built by hand; the sampler refuses ways < 2.
Episode one_class_episode(const Dataset& ds) {
  Episode ep;
  ep.ways = 1;
  ep.shots = 1;
  ep.queries = 2;
  ep.support_images = {ds.classes[0][0]};
  ep.support_labels = {0};
  ep.query_images = {ds.classes[0][1], ds.classes[0][2]};
  ep.query_labels = {0, 0};
  ep.write_order = {0};
  return ep;
}

template <class S>
std::vector<Tensor<S>> snapshot(ModelParams<S>& p) {
  std::vector<Tensor<S>> out;
  for (auto& [name, t] : p.named_params()) {
    Tensor<S> copy = Tensor<S>::zeros(t.shape());
    std::memcpy(copy.data(), t.data(), t.size() * sizeof(S));
    out.push_back(copy);
  }
  return out;
}

template <class S>
bool bitwise_equal(ModelParams<S>& p, const std::vector<Tensor<S>>& snap) {
  auto named = p.named_params();
  REQUIRE(named.size() == snap.size());
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (std::memcmp(named[i].second.data(), snap[i].data(),
                    snap[i].size() * sizeof(S)) != 0)
      return false;
  }
  return true;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

struct TmpDir {
  fs::path path;
  TmpDir() {
    static int n = 0;
    path = fs::temp_directory_path() / ("mematch_tr_" + std::to_string(::getpid()) + "_" +
                                        std::to_string(n++));
    fs::create_directories(path);
  }
  ~TmpDir() { fs::remove_all(path); }
};

}  // namespace

// ---------------------------------------------------------------- loss

TEST_CASE("matching_loss: single-class episodes carry no signal") {
  Tensor<double> logits = Tensor<double>::zeros({3, 1});
  logits[0] = 1.7;
  logits[1] = -4.0;
  logits[2] = 0.0;
  Tensor<double> loss = ops::matching_loss<double>(nullptr, logits, {0}, {0, 0, 0});
  CHECK(loss.item() == 0.0);  // lse over one column equals the column
}

TEST_CASE("matching_loss: uniform logits cost log(ways) per query") {
  Tensor<double> logits = Tensor<double>::full({4, 2}, 0.37);
  Tensor<double> loss = ops::matching_loss<double>(nullptr, logits, {0, 1}, {0, 1, 0, 1});
  CHECK(loss.item() == doctest::Approx(4.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("matching_loss: matches a plain-loop reimplementation") {
  Rng rng(401);
  Tensor<double> logits = Tensor<double>::zeros({3, 4});
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = rng.uniform(-2.0, 2.0);
  const std::vector<int> sup{0, 1, 0, 1};
  const std::vector<int> qry{1, 0, 1};
  for (bool avg : {false, true}) {
    double want = 0.0;
    for (int j = 0; j < 3; ++j) {
      double lse = 0.0;
      for (int t = 0; t < 4; ++t) lse += std::exp(logits[j * 4 + t]);
      lse = std::log(lse);
      double qloss = 0.0;
      int matches = 0;
      for (int t = 0; t < 4; ++t) {
        if (sup[t] == qry[j]) {
          qloss += lse - logits[j * 4 + t];
          ++matches;
        }
      }
      want += avg ? qloss / matches : qloss;
    }
    Tensor<double> loss = ops::matching_loss<double>(nullptr, logits, sup, qry, avg);
    CHECK(loss.item() == doctest::Approx(want).epsilon(1e-9));
  }
}

TEST_CASE("matching_loss: averaging divides by the per-query match count") {
  Rng rng(402);
  Tensor<double> logits = Tensor<double>::zeros({2, 4});
  for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = rng.uniform(-1.0, 1.0);
  const std::vector<int> sup{0, 0, 1, 1};  // two matches per query, any label
  const std::vector<int> qry{0, 1};
  double summed = ops::matching_loss<double>(nullptr, logits, sup, qry, false).item();
  double averaged = ops::matching_loss<double>(nullptr, logits, sup, qry, true).item();
  CHECK(averaged == doctest::Approx(summed / 2.0).epsilon(1e-12));
}

TEST_CASE("matching_loss: query label absent from support raises") {
  Tensor<double> logits = Tensor<double>::zeros({1, 2});
  CHECK_THROWS_AS(ops::matching_loss<double>(nullptr, logits, {0, 1}, {2}), ValueError);
}

TEST_CASE("matching_loss: gradient w.r.t. logits passes finite differences") {
  Rng rng(403);
  for (bool avg : {false, true}) {
    Tensor<double> logits = Tensor<double>::zeros({3, 4});
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = rng.uniform(-1.5, 1.5);
    logits.set_requires_grad(true);
    const std::vector<int> sup{0, 1, 1, 0};
    const std::vector<int> qry{0, 1, 1};
    Tape<double> tape;
    Tensor<double> loss = ops::matching_loss(&tape, logits, sup, qry, avg);
    tape.backward(loss);
    const double h = 1e-6;
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const double keep = logits[i];
      logits[i] = keep + h;
      const double up = ops::matching_loss<double>(nullptr, logits, sup, qry, avg).item();
      logits[i] = keep - h;
      const double dn = ops::matching_loss<double>(nullptr, logits, sup, qry, avg).item();
      logits[i] = keep;
      const double fd = (up - dn) / (2.0 * h);
      CHECK(logits.grad()[i] == doctest::Approx(fd).epsilon(1e-5));
    }
  }
}

// ---------------------------------------------------------------- predict

TEST_CASE("predict_label: picks the best column's label") {
  const std::vector<double> row{0.1, 0.9, 0.2};
  CHECK(ops::predict_label(row.data(), 3, {0, 1, 0}) == 1);
}

TEST_CASE("predict_label: ties resolve to the earliest support sample") {
  const std::vector<double> row{0.5, 0.5, 0.5};
  CHECK(ops::predict_label(row.data(), 3, {2, 1, 0}) == 2);
}

TEST_CASE("predict_label: per-class sum can overrule the single best column") {
  const std::vector<double> row{0.5, 0.3, 0.3};
  const std::vector<int> labels{0, 1, 1};
  CHECK(ops::predict_label(row.data(), 3, labels, false) == 0);
  CHECK(ops::predict_label(row.data(), 3, labels, true) == 1);  // 0.6 beats 0.5
}

TEST_CASE("predict_label: fuzz against a manual max scan") {
  Rng rng(404);
  for (int rep = 0; rep < 500; ++rep) {
    const int n = 2 + static_cast<int>(rng.range(0, 8));
    std::vector<double> row(n);
    std::vector<int> labels(n);
    for (int t = 0; t < n; ++t) {
      row[t] = rng.uniform(-3.0, 3.0);
      labels[t] = static_cast<int>(rng.range(0, 4));
    }
    int best = 0;
    for (int t = 1; t < n; ++t)
      if (row[t] > row[best]) best = t;
    CHECK(ops::predict_label(row.data(), n, labels) == labels[best]);
  }
}

// ---------------------------------------------------------------- schedule

TEST_CASE("lr_at: halves the base rate on a fixed step period") {
  AdamConfig cfg;  // lr0 1e-3, halving every 20000
  CHECK(lr_at(cfg, 0) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(lr_at(cfg, 19999) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(lr_at(cfg, 20000) == doctest::Approx(5e-4).epsilon(1e-12));
  CHECK(lr_at(cfg, 40000) == doctest::Approx(2.5e-4).epsilon(1e-12));
  CHECK(lr_at(cfg, 60000) == doctest::Approx(1.25e-4).epsilon(1e-12));
}

// ---------------------------------------------------------------- train_step

TEST_CASE("train_step: a zero-loss episode leaves every parameter untouched") {
  Dataset ds = small_data(405);
  ModelParams<float> p = small_model<float>(406, ds.spec);
  OptimState<float> opt = OptimState<float>::init(p.named_params());
  auto before = snapshot(p);
  // One class only: the matched column is the whole softmax mass, the loss is
  // exactly zero, and Adam moves nothing on zero moments. Only the batchnorm
  // running statistics advance.
  const float loss = train_step(p, opt, AdamConfig{}, {one_class_episode(ds)});
  CHECK(loss == 0.0f);
  CHECK(opt.step == 1);
  CHECK(bitwise_equal(p, before));
}

TEST_CASE("train_step: empty batch and optimizer mismatch raise") {
  Dataset ds = small_data(407);
  ModelParams<float> p = small_model<float>(408, ds.spec);
  OptimState<float> opt = OptimState<float>::init(p.named_params());
  CHECK_THROWS_AS(train_step(p, opt, AdamConfig{}, {}), ValueError);
  opt.m.pop_back();
  CHECK_THROWS_AS(train_step(p, opt, AdamConfig{}, {one_class_episode(ds)}), ShapeError);
}

TEST_CASE("train_step: poisoned parameters abort with a numerical error") {
  Dataset ds = small_data(409);
  ModelParams<float> p = small_model<float>(410, ds.spec);
  OptimState<float> opt = OptimState<float>::init(p.named_params());
  // Poison a tensor with no downstream relu (relu flushes NaN to zero).
  p.t_c[0] = std::numeric_limits<float>::quiet_NaN();
  Rng rng(411);
  Episode ep = sample_episode(ds, 2, 1, 2, rng);
  CHECK_THROWS_AS(train_step(p, opt, AdamConfig{}, {ep}), NumericError);
}

TEST_CASE("train_step: fifty steps overfit a single episode") {
  Dataset ds = small_data(412);
  Rng erng(413);
  Episode ep = sample_episode(ds, 2, 1, 2, erng);
  ModelParams<float> p = small_model<float>(414, ds.spec);
  OptimState<float> opt = OptimState<float>::init(p.named_params());
  AdamConfig cfg;
  cfg.lr0 = 3e-3;
  float first = 0.0f, prev = 0.0f, last = 0.0f;
  int decreases = 0;
  for (int s = 0; s < 50; ++s) {
    last = train_step(p, opt, cfg, {ep});
    if (s == 0)
      first = last;
    else if (last < prev)
      ++decreases;
    prev = last;
  }
  CHECK(first == doctest::Approx(4.0 * std::log(2.0)).epsilon(1e-4));  // zero-logit start
  CHECK(last < 0.01f * first);
  CHECK(decreases >= 45);
}

// ---------------------------------------------------------------- evaluate

TEST_CASE("evaluate: runs the declared protocol shape") {
  Dataset ds = small_data(415, 0, 6, 20);  // 1 support + 15 queries per class
  int calls = 0;
  auto stub = [&](const Episode& ep) {
    ++calls;
    CHECK(ep.ways == 5);
    CHECK(ep.shots == 1);
    CHECK(ep.queries == 15);
    CHECK(ep.support_size() == 5);
    CHECK(ep.query_size() == 75);
    return ep.query_labels;  // oracle predictions
  };
  EvalReport rep = evaluate(stub, ds, 5, 1, 20, 15, Rng(416));
  CHECK(calls == 20);
  CHECK(rep.ways == 5);
  CHECK(rep.shots == 1);
  CHECK(rep.episodes == 20);
  CHECK(rep.mean_accuracy == 1.0);
  CHECK(rep.ci95 == 0.0);
}

TEST_CASE("evaluate: interval follows the sample-deviation formula") {
  Dataset ds = small_data(417);
  int episode_no = 0;
  auto stub = [&](const Episode& ep) {  // alternate perfect / useless episodes
    const bool hit = episode_no++ % 2 == 0;
    std::vector<int> pred(ep.query_labels);
    if (!hit)
      for (int& y : pred) y = (y + 1) % ep.ways;
    return pred;
  };
  const int n = 100;
  EvalReport rep = evaluate(stub, ds, 3, 1, n, 4, Rng(418));
  CHECK(rep.mean_accuracy == doctest::Approx(0.5).epsilon(1e-12));
  const double sd = std::sqrt(n * 0.25 / (n - 1));
  CHECK(rep.ci95 == doctest::Approx(1.96 * sd / std::sqrt(double(n))).epsilon(1e-12));
}

TEST_CASE("evaluate: interval shrinks like the square root of the episode count") {
  Dataset ds = small_data(419);
  auto noisy = [](const Episode& ep) {
    // Pure function of episode content so the thread count cannot matter:
    // flip correctness with the first pixel of the first query image.
    const bool hit = static_cast<int>(ep.query_images[0][0] * 255.0f) % 2 == 0;
    std::vector<int> pred(ep.query_labels);
    if (!hit)
      for (int& y : pred) y = (y + 1) % ep.ways;
    return pred;
  };
  EvalReport r100 = evaluate(noisy, ds, 3, 1, 100, 4, Rng(420));
  EvalReport r400 = evaluate(noisy, ds, 3, 1, 400, 4, Rng(420));
  REQUIRE(r100.ci95 > 0.0);
  CHECK(std::abs(r400.ci95 / r100.ci95 - 0.5) < 0.08);
}

TEST_CASE("evaluate: result is invariant to the worker count") {
  Dataset ds = small_data(421);
  auto noisy = [](const Episode& ep) {
    const bool hit = static_cast<int>(ep.query_images[0][0] * 255.0f) % 2 == 0;
    std::vector<int> pred(ep.query_labels);
    if (!hit)
      for (int& y : pred) y = (y + 1) % ep.ways;
    return pred;
  };
  EvalReport serial = evaluate(noisy, ds, 4, 1, 60, 3, Rng(422), 1);
  EvalReport parallel = evaluate(noisy, ds, 4, 1, 60, 3, Rng(422), 4);
  CHECK(serial.mean_accuracy == parallel.mean_accuracy);
  CHECK(serial.ci95 == parallel.ci95);
}

TEST_CASE("evaluate: a fresh model scores exact chance by construction") {
  // The parameter projection starts at zero, so the predicted vector, the
  // factorized conv output, and every logit are exactly zero; the argmax tie
  // falls on the first support sample of each episode (class 0).
  Dataset ds = small_data(423);
  ModelParams<float> p = small_model<float>(424, ds.spec);
  EvalReport rep = evaluate(model_predictor(p), ds, 5, 1, 50, 5, Rng(425), 4);
  CHECK(rep.mean_accuracy == doctest::Approx(0.2).epsilon(1e-12));  // every episode exactly 1/5
  CHECK(rep.ci95 < 1e-12);
}

// ---------------------------------------------------------------- checkpoint

TEST_CASE("checkpoint: restore reproduces the file byte for byte") {
  TmpDir tmp;
  Dataset ds = small_data(426);
  ModelParams<float> a = small_model<float>(427, ds.spec);
  OptimState<float> opt_a = OptimState<float>::init(a.named_params());
  Rng erng(428);
  for (int s = 0; s < 3; ++s) {
    Episode ep = sample_episode(ds, 2, 1, 2, erng);
    train_step(a, opt_a, AdamConfig{}, {ep});
  }
  const fs::path ck1 = tmp.path / "a.ckpt";
  save_checkpoint(a, opt_a, 0xFEEDu, ck1.string());

  ModelParams<float> b = small_model<float>(999, ds.spec);  // different init
  OptimState<float> opt_b = OptimState<float>::init(b.named_params());
  std::uint64_t seed = 0;
  load_checkpoint(b, opt_b, seed, ck1.string());
  CHECK(seed == 0xFEEDu);
  CHECK(opt_b.step == 3);

  const fs::path ck2 = tmp.path / "b.ckpt";
  save_checkpoint(b, opt_b, seed, ck2.string());
  CHECK(file_bytes(ck1) == file_bytes(ck2));
}

TEST_CASE("checkpoint: a truncated file fails without touching the model") {
  TmpDir tmp;
  Dataset ds = small_data(429);
  ModelParams<float> a = small_model<float>(430, ds.spec);
  OptimState<float> opt_a = OptimState<float>::init(a.named_params());
  const fs::path ck = tmp.path / "a.ckpt";
  save_checkpoint(a, opt_a, 7, ck.string());

  std::string bytes = file_bytes(ck);
  bytes.resize(bytes.size() - 9);
  const fs::path bad = tmp.path / "bad.ckpt";
  std::ofstream(bad, std::ios::binary).write(bytes.data(), bytes.size());

  ModelParams<float> b = small_model<float>(431, ds.spec);
  OptimState<float> opt_b = OptimState<float>::init(b.named_params());
  auto before = snapshot(b);
  std::uint64_t seed = 12345;
  CHECK_THROWS_AS(load_checkpoint(b, opt_b, seed, bad.string()), IoError);
  CHECK(bitwise_equal(b, before));
  CHECK(seed == 12345);
  CHECK_THROWS_AS(load_checkpoint(b, opt_b, seed, (tmp.path / "absent.ckpt").string()), IoError);
}

TEST_CASE("checkpoint: resuming mid-run matches an uninterrupted trajectory") {
  TmpDir tmp;
  Dataset ds = small_data(432);
  Rng erng(433);
  std::vector<Episode> eps;
  for (int i = 0; i < 6; ++i) eps.push_back(sample_episode(ds, 2, 1, 2, erng));

  ModelParams<float> straight = small_model<float>(434, ds.spec);
  OptimState<float> opt_s = OptimState<float>::init(straight.named_params());
  for (int i = 0; i < 6; ++i) train_step(straight, opt_s, AdamConfig{}, {eps[i]});

  ModelParams<float> part = small_model<float>(434, ds.spec);
  OptimState<float> opt_p = OptimState<float>::init(part.named_params());
  for (int i = 0; i < 3; ++i) train_step(part, opt_p, AdamConfig{}, {eps[i]});
  const fs::path ck = tmp.path / "mid.ckpt";
  save_checkpoint(part, opt_p, 1, ck.string());

  ModelParams<float> resumed = small_model<float>(777, ds.spec);
  OptimState<float> opt_r = OptimState<float>::init(resumed.named_params());
  std::uint64_t seed = 0;
  load_checkpoint(resumed, opt_r, seed, ck.string());
  for (int i = 3; i < 6; ++i) train_step(resumed, opt_r, AdamConfig{}, {eps[i]});

  CHECK(opt_r.step == opt_s.step);
  CHECK(bitwise_equal(resumed, snapshot(straight)));
  auto stats_s = straight.named_stats();
  auto stats_r = resumed.named_stats();
  for (std::size_t i = 0; i < stats_s.size(); ++i)
    CHECK(std::memcmp(stats_s[i].second.data(), stats_r[i].second.data(),
                      stats_s[i].second.size() * sizeof(float)) == 0);
}

// ------------------------------------------------------- full episode pass

TEST_CASE("episode_logits: one score per query-support pair") {
  Dataset ds = make_synthetic_dataset(435, 0, 8, 20, 0.03, 32, 8, "train");
  Rng erng(436);
  Episode ep = sample_episode(ds, 5, 1, 15, erng);
  ModelParams<float> p = small_model<float>(437, ds.spec, true);
  EpisodeForward<float> fwd = episode_forward<float>(nullptr, p, ep, ops::BnMode::train, false);
  CHECK(fwd.logits.shape() == Shape{75, 5});
  CHECK(fwd.g_mat.shape() == Shape{5, p.d_z});
  CHECK(fwd.f_mat.shape() == Shape{75, p.d_z});
}

TEST_CASE("export: similarity matrix is the transposed score table") {
  Dataset ds = small_data(438);
  Rng erng(439);
  Episode ep = sample_episode(ds, 3, 2, 2, erng);
  ModelParams<float> p = small_model<float>(440, ds.spec, true);
  Tensor<float> sim = similarity_matrix(p, ep);
  Tensor<float> logits = episode_logits<float>(nullptr, p, ep, ops::BnMode::train, false);
  REQUIRE(sim.shape() == Shape{6, 6});
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) CHECK(sim[i * 6 + j] == logits[j * 6 + i]);

  TmpDir tmp;
  const fs::path f = tmp.path / "emb.csv";
  Tensor<float> emb = query_embeddings(p, ep);
  REQUIRE(emb.shape() == Shape{6, p.d_z});
  write_embeddings_csv(f.string(), emb, ep.query_labels);
  std::ifstream in(f);
  std::string line;
  int rows = 0;
  while (std::getline(in, line)) {
    CHECK(std::count(line.begin(), line.end(), ',') == p.d_z);
    ++rows;
  }
  CHECK(rows == 6);
}

// The whole forward pass, reimplemented below as straight-line loops over
// plain buffers (no tensors, no shared kernels), then compared against the
// production graph. Geometry: 32x32 inputs, four blocks, 2x2 final maps.

namespace straight {

struct Vol {
  int c = 0, h = 0, w = 0;
  std::vector<double> v;
  Vol(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(static_cast<std::size_t>(c_) * h_ * w_) {}
  double& at(int ch, int y, int x) { return v[(static_cast<std::size_t>(ch) * h + y) * w + x]; }
  double at(int ch, int y, int x) const {
    return v[(static_cast<std::size_t>(ch) * h + y) * w + x];
  }
};

Vol conv3x3(const Vol& x, const double* w, const double* b, int f_out) {
  Vol y(f_out, x.h, x.w);
  for (int f = 0; f < f_out; ++f)
    for (int i = 0; i < x.h; ++i)
      for (int j = 0; j < x.w; ++j) {
        double acc = b[f];
        for (int c = 0; c < x.c; ++c)
          for (int di = -1; di <= 1; ++di)
            for (int dj = -1; dj <= 1; ++dj) {
              const int yy = i + di, xx = j + dj;
              if (yy < 0 || yy >= x.h || xx < 0 || xx >= x.w) continue;
              acc += w[((static_cast<std::size_t>(f) * x.c + c) * 3 + di + 1) * 3 + dj + 1] *
                     x.at(c, yy, xx);
            }
        y.at(f, i, j) = acc;
      }
  return y;
}

void bn_relu_pool(std::vector<Vol>& batch, const double* gamma, const double* beta) {
  const int c = batch[0].c, h = batch[0].h, w = batch[0].w;
  const double n = static_cast<double>(batch.size()) * h * w;
  for (int ch = 0; ch < c; ++ch) {
    double mean = 0.0;
    for (const Vol& x : batch)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) mean += x.at(ch, i, j);
    mean /= n;
    double var = 0.0;
    for (const Vol& x : batch)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          const double d = x.at(ch, i, j) - mean;
          var += d * d;
        }
    var /= n;
    const double invstd = 1.0 / std::sqrt(var + 1e-5);
    for (Vol& x : batch)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          double y = gamma[ch] * (x.at(ch, i, j) - mean) * invstd + beta[ch];
          x.at(ch, i, j) = y > 0.0 ? y : 0.0;
        }
  }
  if (h < 2 || w < 2) return;
  for (Vol& x : batch) {
    Vol pooled(c, h / 2, w / 2);
    for (int ch = 0; ch < c; ++ch)
      for (int i = 0; i < h / 2; ++i)
        for (int j = 0; j < w / 2; ++j) {
          double m = x.at(ch, 2 * i, 2 * j);
          m = std::max(m, x.at(ch, 2 * i, 2 * j + 1));
          m = std::max(m, x.at(ch, 2 * i + 1, 2 * j));
          m = std::max(m, x.at(ch, 2 * i + 1, 2 * j + 1));
          pooled.at(ch, i, j) = m;
        }
    x = pooled;
  }
}

std::vector<double> matvec(const Tensor<double>& m, const std::vector<double>& x) {
  std::vector<double> y(m.dim(0), 0.0);
  for (int r = 0; r < m.dim(0); ++r)
    for (int c = 0; c < m.dim(1); ++c) y[r] += m[static_cast<std::size_t>(r) * m.dim(1) + c] * x[c];
  return y;
}

std::vector<double> unit(const std::vector<double>& x) {
  double n2 = 0.0;
  for (double v : x) n2 += v * v;
  const double inv = 1.0 / std::sqrt(n2);
  std::vector<double> y(x);
  for (double& v : y) v *= inv;
  return y;
}

double dotv(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

struct Slot {
  std::vector<double> key;
  int value = 0;
};

std::vector<double> lstm_summary(const std::vector<Slot>& slots,
                                 const ops::LstmCellWeights<double>& wts, bool reverse) {
  const int d_r = wts.hidden();
  std::vector<double> h(d_r, 0.0), c(d_r, 0.0);
  const int n = static_cast<int>(slots.size());
  for (int step = 0; step < n; ++step) {
    const std::vector<double>& x = slots[reverse ? n - 1 - step : step].key;
    std::vector<std::vector<double>> pre(4);
    for (int g = 0; g < 4; ++g) {
      pre[g] = matvec(wts.w_x[g], x);
      std::vector<double> hh = matvec(wts.w_h[g], h);
      for (int r = 0; r < d_r; ++r) pre[g][r] += hh[r] + wts.bias[g][r];
    }
    for (int r = 0; r < d_r; ++r) {
      const double gi = 1.0 / (1.0 + std::exp(-pre[0][r]));
      const double gf = 1.0 / (1.0 + std::exp(-pre[1][r]));
      const double cand = std::tanh(pre[2][r]);
      const double go = 1.0 / (1.0 + std::exp(-pre[3][r]));
      c[r] = gf * c[r] + gi * cand;
      h[r] = go * std::tanh(c[r]);
    }
  }
  return h;
}

}  // namespace straight

TEST_CASE("episode_logits: agrees with a straight-line reimplementation") {
  using straight::Vol;
  Dataset ds = make_synthetic_dataset(441, 0, 5, 6, 0.03, 32, 8, "train");
  Rng erng(442);
  Episode ep = sample_episode(ds, 3, 1, 2, erng);
  ModelParams<double> p = small_model<double>(443, ds.spec, true);

  Tensor<double> logits = episode_logits<double>(nullptr, p, ep, ops::BnMode::train, false);
  REQUIRE(logits.shape() == Shape{6, 3});

  auto to_vol = [&](const Tensor<float>& img) {
    Vol v(1, 32, 32);
    for (std::size_t i = 0; i < v.v.size(); ++i) v.v[i] = static_cast<double>(img[i]);
    return v;
  };
  auto w_of = [&](int blk) { return p.backbone.blocks[blk].w.data(); };
  auto run_shared = [&](std::vector<Vol>& batch, int first, int last) {
    for (int blk = first; blk <= last; ++blk) {
      for (Vol& x : batch) x = straight::conv3x3(x, w_of(blk), p.backbone.blocks[blk].b.data(),
                                                 p.backbone.filters);
      straight::bn_relu_pool(batch, p.backbone.blocks[blk].gamma.data(),
                             p.backbone.blocks[blk].beta.data());
    }
  };

  // Support path: all four stock blocks, then flatten.
  std::vector<Vol> sup;
  for (const auto& img : ep.support_images) sup.push_back(to_vol(img));
  run_shared(sup, 0, 3);
  std::vector<std::vector<double>> z_rows;
  for (const Vol& x : sup) z_rows.push_back(x.v);

  // Write-controller fold in episode write order.
  std::vector<straight::Slot> slots;
  const int capacity = static_cast<int>(z_rows.size());
  for (int idx : ep.write_order) {
    std::vector<double> key = straight::unit(straight::matvec(p.t_z, z_rows[idx]));
    const int value = ep.support_labels[idx];
    if (slots.empty()) {
      slots.push_back({key, value});
      continue;
    }
    int nearest = 0;
    double best = straight::dotv(key, slots[0].key);
    for (std::size_t s = 1; s < slots.size(); ++s) {
      const double score = straight::dotv(key, slots[s].key);
      if (score > best) {
        best = score;
        nearest = static_cast<int>(s);
      }
    }
    if (slots[nearest].value == value || static_cast<int>(slots.size()) >= capacity) {
      std::vector<double> merged(key);
      for (std::size_t r = 0; r < merged.size(); ++r) merged[r] += slots[nearest].key[r];
      slots[nearest].key = straight::unit(merged);
    } else {
      slots.push_back({key, value});
    }
  }

  // Context-refined support rows: attention over stored keys, shortcut add.
  std::vector<std::vector<double>> g_rows;
  for (const auto& z : z_rows) {
    std::vector<double> zk = straight::matvec(p.t_z, z);
    std::vector<double> scores;
    for (const auto& s : slots) scores.push_back(straight::dotv(zk, s.key));
    const double m = *std::max_element(scores.begin(), scores.end());
    double total = 0.0;
    for (double& s : scores) {
      s = std::exp(s - m);
      total += s;
    }
    std::vector<double> ctx(slots[0].key.size(), 0.0);
    for (std::size_t s = 0; s < slots.size(); ++s)
      for (std::size_t r = 0; r < ctx.size(); ++r) ctx[r] += scores[s] / total * slots[s].key[r];
    std::vector<double> g = straight::matvec(p.t_c, ctx);
    for (std::size_t r = 0; r < g.size(); ++r) g[r] += z[r];
    g_rows.push_back(g);
  }

  // Predicted diagonal from the two-direction summary.
  std::vector<double> hf = straight::lstm_summary(slots, p.learner.fwd, false);
  std::vector<double> hb = straight::lstm_summary(slots, p.learner.bwd, true);
  for (std::size_t r = 0; r < hf.size(); ++r) hf[r] += hb[r];
  std::vector<double> w_pred = straight::matvec(p.learner.t_p, hf);

  // Query path: three stock blocks, factorized final conv, stock finish.
  std::vector<Vol> qry;
  for (const auto& img : ep.query_images) qry.push_back(to_vol(img));
  run_shared(qry, 0, 2);
  const int f_cnt = p.backbone.filters, dw = p.d_w;
  for (Vol& x : qry) {
    Vol y(f_cnt, x.h, x.w);
    for (int i = 0; i < x.h; ++i)
      for (int j = 0; j < x.w; ++j) {
        std::vector<double> u(dw, 0.0);
        for (int r = 0; r < dw; ++r) {
          for (int c = 0; c < f_cnt; ++c)
            u[r] += p.fconv.m_in[static_cast<std::size_t>(r) * f_cnt + c] * x.at(c, i, j);
          u[r] *= w_pred[r];
        }
        for (int c = 0; c < f_cnt; ++c) {
          double acc = p.fconv.bias[c];
          for (int r = 0; r < dw; ++r)
            acc += p.fconv.m_out[static_cast<std::size_t>(c) * dw + r] * u[r];
          y.at(c, i, j) = acc;
        }
      }
    x = y;
  }
  straight::bn_relu_pool(qry, p.backbone.blocks[3].gamma.data(), p.backbone.blocks[3].beta.data());
  std::vector<std::vector<double>> f_rows;
  for (const Vol& x : qry) f_rows.push_back(x.v);

  double worst = 0.0;
  for (int j = 0; j < 6; ++j)
    for (int n = 0; n < 3; ++n) {
      const double want = straight::dotv(f_rows[j], g_rows[n]);
      worst = std::max(worst, std::abs(want - logits[j * 3 + n]));
    }
  CHECK(worst < 1e-8);
}
