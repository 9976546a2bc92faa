// Command-line front end for the slate generation experiments.
//
//   slategen <subcommand> [--config file] [--seed n] [--out dir] [--workers n]
//
// Exit codes: 0 success, 2 configuration error, 3 stage failure.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "slategen/pipeline.hpp"

namespace fs = std::filesystem;
using namespace slategen;
using pipeline::ConfigError;
using pipeline::StageError;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitStage = 3;

struct Globals {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::size_t workers = 1;
  bool quiet = false;
};

struct Loaded {
  pipeline::Settings settings;
  std::string snapshot;
};

Loaded load_settings(const Globals& g) {
  pipeline::Config cfg;
  if (!g.config_path.empty()) cfg = pipeline::Config::load(g.config_path);
  Loaded l{pipeline::resolve_settings(cfg, g.seed), cfg.to_string()};
  return l;
}

pipeline::Logger make_logger(const Globals& g) {
  if (g.quiet) return {};
  return [](const std::string& msg) { std::cerr << "[slategen] " << msg << "\n"; };
}

// Runs one stage, turning any failure into a StageError that names it.
template <typename F>
auto stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

class Manifest {
 public:
  Manifest(const std::string& command, const Globals& g, const Loaded& l)
      : out_(g.out), t0_(std::chrono::steady_clock::now()) {
    m_.command = command;
    m_.config_snapshot = l.snapshot;
    m_.seed = l.settings.seed;
    m_.version = pipeline::version_string();
  }
  void output(const std::string& label, const std::string& path) {
    m_.outputs.emplace_back(label, path);
  }
  void note(const std::string& key, const std::string& value) { m_.notes.emplace_back(key, value); }
  void write(const std::string& failed_stage = {}) {
    m_.failed_stage = failed_stage;
    m_.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0_).count();
    m_.write((fs::path(out_) / "manifest.txt").string());
  }

 private:
  pipeline::RunManifest m_;
  std::string out_;
  std::chrono::steady_clock::time_point t0_;
};

std::string out_path(const Globals& g, const std::string& name) {
  fs::create_directories(g.out);
  return (fs::path(g.out) / name).string();
}

// A trained model: loaded from a checkpoint when one is given, trained otherwise.
pipeline::TrainedModel obtain_model(const pipeline::Settings& s, const pipeline::Context& ctx,
                                    const std::string& model_path, const pipeline::Logger& log) {
  if (model_path.empty())
    return stage("train", [&] { return pipeline::train_model(s.model, s.train, ctx,
                                                             mix_seed(s.seed, 5), log); });
  return stage("load-model", [&] {
    std::ifstream cfg(model_path + ".cfg");
    std::string first;
    std::getline(cfg, first);
    if (first.rfind("arch=", 0) == 0) {
      auto model = std::make_shared<models::SlateCvae>(models::SlateCvae::load(model_path, ctx.bank));
      return pipeline::wrap_cvae(std::move(model), s.model);
    }
    pipeline::TrainedModel t;
    t.ranker = std::make_shared<models::PointwiseRanker>(models::PointwiseRanker::load(model_path));
    const std::size_t k = ctx.split.train.slate_size;
    std::shared_ptr<const models::SlatePolicy> policy;
    if (s.model.kind == pipeline::ModelKind::MfMmr)
      policy = std::make_shared<models::MmrPolicy>(
          t.ranker, ctx.bank, k, models::MmrOptions{s.model.mmr_lambda, s.model.mmr_classic});
    else
      policy = std::make_shared<models::TopKPolicy>(t.ranker, k);
    if (s.model.nongreedy)
      policy = std::make_shared<models::NonGreedyPolicy>(policy, ctx.bank, 0, s.model.temperature);
    t.policy = std::move(policy);
    return t;
  });
}

const dataio::Dataset& pick_split(const pipeline::Context& ctx, const std::string& name,
                                  dataio::Dataset& storage) {
  if (name == "train") return ctx.split.train;
  if (name == "val") return ctx.split.val;
  if (name == "test") return ctx.split.test;
  if (name == "all") {
    storage = ctx.raw;
    return storage;
  }
  throw ConfigError("--split must be train, val, test or all");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Slate generation experiments: simulators, generative and ranking recommenders, "
               "and their evaluation."};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config_path, "Config file (key=value with [sections])");
  app.add_option("--seed", g.seed, "Master seed");
  app.add_option("--out", g.out, "Output directory");
  app.add_option("--workers", g.workers, "Concurrent sweep cells")->check(CLI::PositiveNumber);
  app.add_flag("--quiet", g.quiet, "Suppress progress messages");

  auto* sim_build = app.add_subcommand("sim-build", "Build a simulator and save it");
  auto* dataset = app.add_subcommand("dataset", "Generate a slate dataset from a simulator");
  auto* ingest = app.add_subcommand("ingest", "Convert an interaction log into slates");
  std::string log_path;
  ingest->add_option("--log", log_path, "TAB-separated user,item,rating,timestamp log")
      ->required();
  auto* train = app.add_subcommand("train", "Train the configured model and save a checkpoint");
  auto* run = app.add_subcommand("run", "Train and evaluate the configured model end to end");
  auto* eval = app.add_subcommand("eval", "Evaluate the configured model");
  std::string model_path;
  for (auto* sub : {eval}) sub->add_option("--model", model_path, "Checkpoint to evaluate");
  auto* sweep = app.add_subcommand("sweep", "Train and evaluate across a grid of beta values");
  auto* perturb = app.add_subcommand("perturb-study", "Perturbation study of logged slates");
  std::vector<std::size_t> a_values;
  std::size_t trials = 0;
  double bin_width = 0.25;
  perturb->add_option("--a", a_values, "Numbers of perturbed items")->delimiter(',');
  perturb->add_option("--trials", trials, "Draws per click group (0: every record once)");
  perturb->add_option("--bin-width", bin_width, "Histogram bin width");
  auto* recon = app.add_subcommand("recon-scan", "Reconstruction scan of a trained CVAE");
  auto* dump_z = app.add_subcommand("dump-z", "Dump posterior means of a trained CVAE");
  std::string split_name = "test";
  for (auto* sub : {recon, dump_z}) {
    sub->add_option("--model", model_path, "CVAE checkpoint (trained when omitted)");
    sub->add_option("--split", split_name, "train, val, test or all");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitConfig;
  }

  Loaded loaded;
  try {
    loaded = load_settings(g);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  }
  const auto& s = loaded.settings;
  const auto log = make_logger(g);
  const std::string command = app.get_subcommands().front()->get_name();
  Manifest man(command, g, loaded);

  try {
    if (sim_build->parsed()) {
      const auto env = stage("simulate", [&] { return simenv::build_environment(s.sim); });
      const auto path = out_path(g, "env.bin");
      stage("write", [&] { env.save(path); return 0; });
      man.output("environment", path);
    } else if (dataset->parsed()) {
      const auto env = stage("simulate", [&] {
        return s.env_path.empty() ? simenv::build_environment(s.sim)
                                  : simenv::Environment::load(s.env_path);
      });
      dataio::BalanceReport report;
      const auto d = stage("generate", [&] {
        Rng rng(mix_seed(s.seed, 2));
        simenv::GenerateOptions go;
        go.allow_repeats = s.data.allow_repeats;
        go.balance = s.data.balance;
        return simenv::generate_dataset(env, s.data.n_slates, rng, go, &report);
      });
      for (const auto& w : report.warnings) if (log) log("balance: " + w);
      const auto path = out_path(g, "dataset.tsv");
      stage("write", [&] { dataio::save_dataset(path, d); return 0; });
      man.output("dataset", path);
    } else if (ingest->parsed()) {
      const auto d = stage("ingest", [&] {
        std::ifstream is(log_path);
        if (!is) throw std::runtime_error("cannot open " + log_path);
        return dataio::sessions_to_slates(dataio::parse_interaction_log(is), s.data.slate_size,
                                          s.data.positive_threshold);
      });
      if (log) log("ingested " + std::to_string(d.size()) + " slates");
      const auto path = out_path(g, "dataset.tsv");
      stage("write", [&] { dataio::save_dataset(path, d); return 0; });
      man.output("dataset", path);
    } else if (run->parsed()) {
      pipeline::RunOptions ro;
      ro.out_dir = g.out;
      ro.command = command;
      ro.workers = g.workers;
      ro.log = log;
      pipeline::run_pipeline(s, loaded.snapshot, ro);
      return 0;  // run_pipeline writes its own manifest
    } else if (train->parsed()) {
      const auto ctx = stage("prepare", [&] { return pipeline::prepare_context(s, log); });
      const auto model = stage("train", [&] {
        return pipeline::train_model(s.model, s.train, ctx, mix_seed(s.seed, 5), log);
      });
      const auto path = out_path(g, "model.bin");
      stage("write", [&] {
        if (model.cvae) model.cvae->save(path);
        else if (model.ranker) model.ranker->save(path);
        else throw std::runtime_error("model kind has no trainable parameters");
        ctx.bank->save(out_path(g, "bank.bin"));
        return 0;
      });
      man.output("model", path);
      man.output("embeddings", out_path(g, "bank.bin"));
    } else if (eval->parsed()) {
      const auto ctx = stage("prepare", [&] { return pipeline::prepare_context(s, log); });
      const auto model = obtain_model(s, ctx, model_path, log);
      const auto report = stage("evaluate", [&] {
        return pipeline::evaluate_model(model, s.model, s.eval, ctx, mix_seed(s.seed, 6),
                                        simenv::to_string(ctx.env->kind()));
      });
      const auto path = out_path(g, "metrics.csv");
      pipeline::write_text(path, evalkit::metrics_csv_header() + "\n" +
                                     evalkit::metrics_csv_row(report) + "\n");
      man.output("metrics", path);
    } else if (sweep->parsed()) {
      const auto ctx = stage("prepare", [&] { return pipeline::prepare_context(s, log); });
      const auto z_dir = out_path(g, "z");
      const auto rep = stage("sweep", [&] {
        return pipeline::run_beta_sweep(s, ctx, g.workers, z_dir, log);
      });
      const auto path = out_path(g, "sweep.csv");
      pipeline::write_text(path, rep.to_csv());
      man.output("sweep", path);
      man.output("latent_dumps", z_dir);
      std::ostringstream failures;
      for (const auto& f : rep.failures)
        failures << f.model << ',' << evalkit::format_double(f.beta) << ',' << f.replicate << ','
                 << f.error << '\n';
      if (!rep.failures.empty()) {
        const auto fpath = out_path(g, "sweep_failures.csv");
        pipeline::write_text(fpath, "model,beta,replicate,error\n" + failures.str());
        man.output("failures", fpath);
      }
      man.note("cells_failed", std::to_string(rep.failures.size()));
    } else if (perturb->parsed()) {
      const auto ctx = stage("prepare", [&] { return pipeline::prepare_context(s, log); });
      if (a_values.empty())
        for (std::size_t a = 0; a <= ctx.raw.slate_size; ++a) a_values.push_back(a);
      const auto table = stage("perturb", [&] {
        Rng rng(mix_seed(s.seed, 9));
        evalkit::PerturbationOptions po;
        po.bin_width = bin_width;
        po.trials_per_group = trials;
        po.temperature = s.model.temperature;
        return evalkit::perturbation_study(ctx.raw, *ctx.env, *ctx.bank, a_values, rng, po);
      });
      const auto path = out_path(g, "perturbation.csv");
      pipeline::write_text(path, table.to_csv());
      const auto spath = out_path(g, "perturbation_summary.csv");
      pipeline::write_text(spath, table.summary_csv());
      man.output("histogram", path);
      man.output("summary", spath);
    } else if (recon->parsed() || dump_z->parsed()) {
      if (!s.model.is_cvae() && model_path.empty())
        throw ConfigError("[model] kind must be list or pivot for " + command);
      const auto ctx = stage("prepare", [&] { return pipeline::prepare_context(s, log); });
      const auto model = obtain_model(s, ctx, model_path, log);
      if (!model.cvae) throw ConfigError(command + " needs a CVAE checkpoint");
      dataio::Dataset storage;
      const auto& d = pick_split(ctx, split_name, storage);
      if (recon->parsed()) {
        const auto text = stage("recon-scan", [&] {
          return pipeline::emit_reconstruction_scan(*model.cvae, d, *ctx.env);
        });
        const auto path = out_path(g, "recon_scan.csv");
        pipeline::write_text(path, text);
        man.output("recon_scan", path);
      } else {
        const auto text = stage("dump-z", [&] { return pipeline::dump_latents(*model.cvae, d); });
        const auto path = out_path(g, "z.tsv");
        pipeline::write_text(path, text);
        man.output("latents", path);
      }
    }
    man.write();
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const StageError& e) {
    std::cerr << "stage failure: " << e.what() << "\n";
    if (!run->parsed()) {
      try {
        man.note("error", e.what());
        man.write(e.stage());
      } catch (...) {
      }
    }
    return kExitStage;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return kExitStage;
  }
  return 0;
}
