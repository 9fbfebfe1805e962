// Command-line entry point: train / eval / verify / export over one shared
// config. Exit codes: 0 ok, 1 usage or config error, 2 numerical abort,
// 3 verification failure.

#include <cstdlib>
#include <cstring>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mematch/checkpoint.hpp"
#include "mematch/config.hpp"
#include "mematch/episodes.hpp"
#include "mematch/export.hpp"
#include "mematch/log.hpp"
#include "mematch/model.hpp"
#include "mematch/trainer.hpp"
#include "mematch/verify.hpp"

using namespace mematch;

namespace {

// The built-in glyph data is addressed like a fixed on-disk dataset: one
// constant generator identity, train and eval splits on disjoint class-id
// ranges. Run seeds never change what the "dataset" contains.
constexpr std::uint64_t kSyntheticSeed = 42;
constexpr int kSyntheticEvalOffset = 1000;

Dataset build_split(const RunConfig& cfg, bool train) {
  Dataset ds;
  if (cfg.dataset_root.empty()) {
    ds = train ? make_synthetic_dataset(kSyntheticSeed, 0, cfg.synthetic_train_classes,
                                        cfg.synthetic_per_class, cfg.synthetic_noise,
                                        cfg.synthetic_size, cfg.synthetic_block, cfg.train_split)
               : make_synthetic_dataset(kSyntheticSeed, kSyntheticEvalOffset,
                                        cfg.synthetic_eval_classes, cfg.synthetic_per_class,
                                        cfg.synthetic_noise, cfg.synthetic_size,
                                        cfg.synthetic_block, cfg.eval_split);
  } else {
    ds = load_dataset(cfg.dataset_root, train ? cfg.train_split : cfg.eval_split);
  }
  if (train ? cfg.rotations : cfg.eval_rotations) ds = augment_rotations(ds);
  log::info(concat("split '", ds.split, "': ", ds.num_classes(), " classes, ",
                   ds.min_images_per_class(), "+ images/class, ", ds.spec.height, "x",
                   ds.spec.width));
  return ds;
}

struct LoadedModel {
  ModelParams<float> params;
  OptimState<float> opt;
  std::uint64_t stored_seed = 0;
};

LoadedModel fresh_model(const RunConfig& cfg, const ImageSpec& spec) {
  LoadedModel m;
  Rng init_rng = Rng(cfg.seed).derive("init");
  m.params = init_model<float>(spec, cfg.filters, cfg.d_m, cfg.d_r, cfg.d_w, cfg.memory_capacity,
                               init_rng);
  m.opt = OptimState<float>::init(m.params.named_params());
  m.stored_seed = cfg.seed;
  return m;
}

LoadedModel restored_model(const RunConfig& cfg, const ImageSpec& spec) {
  LoadedModel m = fresh_model(cfg, spec);
  load_checkpoint(m.params, m.opt, m.stored_seed, cfg.checkpoint_path);
  log::info(concat("restored ", cfg.checkpoint_path, " at step ", m.opt.step));
  return m;
}

int run_train(const RunConfig& cfg, bool resume) {
  Dataset ds = build_split(cfg, true);
  LoadedModel m = resume ? restored_model(cfg, ds.spec) : fresh_model(cfg, ds.spec);
  AdamConfig adam{cfg.lr, 0.9, 0.999, 1e-8, cfg.decay, cfg.decay_every};

  // The episode stream keys off the seed stored in the checkpoint so a
  // resumed run replays the exact schedule of the uninterrupted one.
  Rng episodes_root = Rng(m.stored_seed).derive("episodes");
  MetricsWriter metrics(cfg.metrics_path);
  if (m.opt.step >= cfg.steps) {
    log::warn(concat("checkpoint already at step ", m.opt.step, " >= steps ", cfg.steps));
    return 0;
  }
  for (long step = m.opt.step; step < cfg.steps; ++step) {
    Rng step_rng = episodes_root.derive(static_cast<std::uint64_t>(step));
    std::vector<Episode> batch;
    batch.reserve(static_cast<std::size_t>(cfg.batch_episodes));
    for (int b = 0; b < cfg.batch_episodes; ++b) {
      batch.push_back(sample_by_strategy(ds, cfg.strategy, cfg.train_queries, step_rng));
    }
    const float loss = train_step(m.params, m.opt, adam, batch, cfg.average_matches);
    metrics.row(m.opt.step, loss, lr_at(adam, m.opt.step - 1));
    if (m.opt.step % 100 == 0 || m.opt.step == cfg.steps) {
      log::info(concat("step ", m.opt.step, "/", cfg.steps, " loss ", loss));
    }
    if (cfg.checkpoint_every > 0 && m.opt.step % cfg.checkpoint_every == 0) {
      save_checkpoint(m.params, m.opt, m.stored_seed, cfg.checkpoint_path);
    }
  }
  save_checkpoint(m.params, m.opt, m.stored_seed, cfg.checkpoint_path);
  log::info(concat("wrote ", cfg.checkpoint_path, " and ", cfg.metrics_path));
  return 0;
}

int run_eval(const RunConfig& cfg) {
  Dataset ds = build_split(cfg, false);
  LoadedModel m = restored_model(cfg, ds.spec);
  auto predictor = model_predictor(m.params, cfg.per_class_sum);
  Rng eval_rng = Rng(cfg.seed).derive("eval");
  EvalReport rep = evaluate(predictor, ds, cfg.eval_ways, cfg.eval_shots, cfg.eval_episodes,
                            cfg.eval_queries, eval_rng, cfg.threads);
  std::ostringstream line;
  line << std::fixed << std::setprecision(2) << rep.mean_accuracy * 100.0 << " ± "
       << rep.ci95 * 100.0;
  std::cout << line.str() << '\n';
  log::info(concat(rep.ways, "-way ", rep.shots, "-shot over ", rep.episodes, " episodes in ",
                   rep.wall_seconds, "s"));
  MetricsWriter metrics(cfg.metrics_path);
  metrics.eval_row(m.opt.step, rep.mean_accuracy);
  return 0;
}

int run_verify() {
  VerifyReport rep = run_verification();
  std::cout << format_report(rep);
  return rep.ok() ? 0 : 3;
}

int run_export(const RunConfig& cfg, const std::string& mode, const std::string& out) {
  Dataset ds = build_split(cfg, false);
  LoadedModel m = restored_model(cfg, ds.spec);
  Rng export_rng = Rng(cfg.seed).derive("export");
  Episode ep = sample_episode(ds, cfg.eval_ways, cfg.eval_shots, cfg.eval_queries, export_rng);
  if (mode == "similarity") {
    write_matrix_csv(out, similarity_matrix(m.params, ep));
  } else {
    write_embeddings_csv(out, query_embeddings(m.params, ep), ep.query_labels);
  }
  log::info(concat("wrote ", out, " (", mode, ", ", ep.ways, "-way ", ep.shots, "-shot, ",
                   ep.query_size(), " queries)"));
  return 0;
}

struct Flags {
  std::string config_path;
  std::string checkpoint;
  std::string out;
  std::string mode = "similarity";
  std::uint64_t seed = 0;
  int ways = 0;
  int shots = 0;
  int episodes = 0;
  int threads = 0;
  bool resume = false;
};

void add_shared(CLI::App* sub, Flags& f, bool with_episodes) {
  sub->add_option("--config", f.config_path, "run config file (TOML subset)")
      ->check(CLI::ExistingFile);
  sub->add_option("--seed", f.seed, "root RNG seed override");
  sub->add_option("--checkpoint", f.checkpoint, "checkpoint path override");
  sub->add_option("--ways", f.ways, "classes per episode override");
  sub->add_option("--shots", f.shots, "support samples per class override");
  if (with_episodes) sub->add_option("--episodes", f.episodes, "episode count override");
  sub->add_option("--threads", f.threads, "evaluation worker threads");
}

// Config file first, then explicit flags on top.
RunConfig resolve(const CLI::App* sub, const Flags& f) {
  RunConfig cfg;
  if (!f.config_path.empty()) cfg = load_config_file(f.config_path);
  if (sub->count("--seed") > 0) cfg.seed = f.seed;
  if (sub->count("--checkpoint") > 0) cfg.checkpoint_path = f.checkpoint;
  if (sub->count("--threads") > 0) cfg.threads = f.threads;
  if (sub->count("--ways") > 0) {
    cfg.eval_ways = f.ways;
    cfg.strategy.ways = f.ways;
  }
  if (sub->count("--shots") > 0) {
    cfg.eval_shots = f.shots;
    cfg.strategy.shots = f.shots;
  }
  validate(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* fault = std::getenv("MEMATCH_FAULT")) {
    if (std::strcmp(fault, "conv-backward-sign") == 0) {
      mematch::testing::conv_backward_sign_flip = true;
      log::warn("fault injection active: conv-backward-sign");
    } else if (fault[0] != '\0') {
      std::cerr << "unknown MEMATCH_FAULT value: " << fault << '\n';
      return 1;
    }
  }

  CLI::App app{"episodic few-shot matcher with key-value memory"};
  app.require_subcommand(1);

  Flags train_f, eval_f, export_f;

  CLI::App* train_cmd = app.add_subcommand("train", "run the episodic training loop");
  add_shared(train_cmd, train_f, true);
  train_cmd->add_option("--out", train_f.out, "metrics CSV path override");
  train_cmd->add_flag("--resume", train_f.resume, "continue from the checkpoint's stored step");

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on held-out episodes");
  add_shared(eval_cmd, eval_f, true);
  eval_cmd->add_option("--out", eval_f.out, "metrics CSV path override");

  CLI::App* verify_cmd = app.add_subcommand("verify", "run the embedded correctness battery");

  CLI::App* export_cmd = app.add_subcommand("export", "write per-episode analysis CSVs");
  add_shared(export_cmd, export_f, false);
  export_cmd->add_option("--mode", export_f.mode, "similarity|embeddings")
      ->check(CLI::IsMember({"similarity", "embeddings"}));
  export_cmd->add_option("--out", export_f.out, "output CSV path")->required();

  try {
    app.parse(argc, argv);
    if (*train_cmd) {
      RunConfig cfg;
      if (!train_f.config_path.empty()) cfg = load_config_file(train_f.config_path);
      if (train_cmd->count("--episodes") > 0) cfg.steps = train_f.episodes;
      if (train_cmd->count("--out") > 0) cfg.metrics_path = train_f.out;
      if (train_cmd->count("--seed") > 0) cfg.seed = train_f.seed;
      if (train_cmd->count("--checkpoint") > 0) cfg.checkpoint_path = train_f.checkpoint;
      if (train_cmd->count("--threads") > 0) cfg.threads = train_f.threads;
      if (train_cmd->count("--ways") > 0) {
        cfg.eval_ways = train_f.ways;
        cfg.strategy.ways = train_f.ways;
      }
      if (train_cmd->count("--shots") > 0) {
        cfg.eval_shots = train_f.shots;
        cfg.strategy.shots = train_f.shots;
      }
      validate(cfg);
      return run_train(cfg, train_f.resume);
    }
    if (*eval_cmd) {
      RunConfig cfg;
      if (!eval_f.config_path.empty()) cfg = load_config_file(eval_f.config_path);
      if (eval_cmd->count("--episodes") > 0) cfg.eval_episodes = eval_f.episodes;
      if (eval_cmd->count("--out") > 0) cfg.metrics_path = eval_f.out;
      if (eval_cmd->count("--seed") > 0) cfg.seed = eval_f.seed;
      if (eval_cmd->count("--checkpoint") > 0) cfg.checkpoint_path = eval_f.checkpoint;
      if (eval_cmd->count("--threads") > 0) cfg.threads = eval_f.threads;
      if (eval_cmd->count("--ways") > 0) cfg.eval_ways = eval_f.ways;
      if (eval_cmd->count("--shots") > 0) cfg.eval_shots = eval_f.shots;
      validate(cfg);
      return run_eval(cfg);
    }
    if (*verify_cmd) return run_verify();
    if (*export_cmd) {
      RunConfig cfg = resolve(export_cmd, export_f);
      return run_export(cfg, export_f.mode, export_f.out);
    }
    return 1;
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
