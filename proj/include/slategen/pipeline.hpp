#pragma once

// Batch experiment plumbing behind the command-line tool: key=value config
// files, the simulate -> dataset -> split -> embeddings -> train -> evaluate
// pipeline, the beta sweep, and the report emitters.

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "slategen/cvae.hpp"
#include "slategen/dataio.hpp"
#include "slategen/evalkit.hpp"
#include "slategen/models.hpp"
#include "slategen/simenv.hpp"

namespace slategen::pipeline {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

// Flat key=value text with [section] headers and '#' comments.
class Config {
 public:
  static Config parse(std::istream& is);
  static Config parse_string(const std::string& text);
  static Config load(const std::string& path);

  bool has(const std::string& section, const std::string& key) const;
  std::optional<std::string> get(const std::string& section, const std::string& key) const;
  void set(const std::string& section, const std::string& key, const std::string& value);

  // Canonical form: sections and keys sorted.
  std::string to_string() const;
  const std::map<std::string, std::map<std::string, std::string>>& sections() const {
    return sections_;
  }

 private:
  std::map<std::string, std::map<std::string, std::string>> sections_;
};

enum class ModelKind { ListCvae, PivotCvae, MF, NeuMF, MfMmr, Random };

std::string to_string(ModelKind k);
ModelKind model_kind_from_string(const std::string& s);

struct ModelSettings {
  ModelKind kind = ModelKind::ListCvae;
  models::PivotVariant variant = models::PivotVariant::GT_PI;
  std::size_t latent_dim = 16;
  std::size_t hidden = 256;
  double beta = 1.0;
  bool personalized = true;
  bool nongreedy = false;  // perturb the first slot after generation
  double temperature = 1.0;
  bool distinct_items = false;
  double mmr_lambda = 0.5;
  bool mmr_classic = false;

  bool is_cvae() const { return kind == ModelKind::ListCvae || kind == ModelKind::PivotCvae; }
  // Short name used in reports and sweep specs, e.g. "list", "pivot:GT-SPI".
  std::string spec_name() const;
};

// Parses "list", "pivot:SGT-SPI", "mf", "neumf", "mmr", "random", with an
// optional "nongreedy-" prefix.
ModelSettings parse_model_spec(const std::string& spec, const ModelSettings& base);

struct TrainSettings {
  std::size_t epochs = 30;
  std::size_t batch = 64;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  std::size_t negatives = 100;
  bool convergence = false;           // stop on validation-ENC plateau
  std::size_t convergence_samples = 10;  // slates per user for the check
  std::size_t ranker_epochs = 30;
  double ranker_lr = 3e-4;
  std::size_t response_epochs = 20;   // learned environment for logged data
};

enum class DataSource { Simulate, File, Log };

struct DataSettings {
  DataSource source = DataSource::Simulate;
  std::string path;
  std::size_t n_slates = 10000;
  std::array<double, 3> split{0.8, 0.1, 0.1};
  bool balance = true;  // applied to the training split only
  bool allow_repeats = false;
  int positive_threshold = 4;
  std::size_t slate_size = kDefaultSlateSize;
  bool pretrained_embeddings = false;  // false: take the simulator's vectors
};

struct EvalSettings {
  std::size_t n_samples = evalkit::kDefaultSamples;
  std::size_t ranking_samples = 20;
  bool ild_normalized = true;
  std::size_t max_users = 0;  // 0: every user
};

struct SweepSettings {
  std::vector<double> betas;  // empty: default grid
  bool fine_grid = true;      // add the fine grid to the default grid
  std::size_t replicates = 3;
  std::vector<std::string> models{"list"};
};

struct Settings {
  simenv::SimConfig sim;
  bool sim_seed_given = false;
  std::string env_path;  // load a saved environment instead of building one
  DataSettings data;
  ModelSettings model;
  TrainSettings train;
  EvalSettings eval;
  SweepSettings sweep;
  std::uint64_t seed = 0;
};

// Validates every key; unknown keys and malformed values raise ConfigError.
Settings resolve_settings(const Config& cfg, std::optional<std::uint64_t> seed_override = {});

// 13 log-uniform points over [1e-5, 30], plus 5 over [1e-3, 1e-2] when asked;
// ascending, duplicates removed.
std::vector<double> default_beta_grid(bool fine_grid = true);

using Logger = std::function<void(const std::string&)>;

// Everything the models are trained and judged on.
struct Context {
  std::shared_ptr<const simenv::Environment> env;
  dataio::Dataset raw;
  dataio::Split split;        // split.train is balanced when requested
  dataio::BalanceReport balance;
  std::shared_ptr<const models::EmbeddingBank> bank;
  std::vector<std::optional<UserId>> eval_users;
};

Context prepare_context(const Settings& s, const Logger& log = {});

struct TrainedModel {
  std::shared_ptr<const models::SlatePolicy> policy;
  std::shared_ptr<models::SlateCvae> cvae;  // set for CVAE kinds
  std::shared_ptr<models::PointwiseRanker> ranker;
  std::vector<models::EpochStats> history;
};

TrainedModel train_model(const ModelSettings& m, const TrainSettings& t, const Context& ctx,
                         std::uint64_t seed, const Logger& log = {});

// Wraps an already-trained CVAE (e.g. a loaded checkpoint) as a policy.
TrainedModel wrap_cvae(std::shared_ptr<models::SlateCvae> model, const ModelSettings& m);

evalkit::MetricsReport evaluate_model(const TrainedModel& model, const ModelSettings& m,
                                      const EvalSettings& e, const Context& ctx,
                                      std::uint64_t seed, const std::string& dataset_label);

struct RunManifest {
  std::string command;
  std::string config_snapshot;
  std::uint64_t seed = 0;
  std::string version;
  std::vector<std::pair<std::string, std::string>> outputs;  // label, path
  std::vector<std::pair<std::string, std::string>> notes;    // key, value
  std::string failed_stage;
  double wall_seconds = 0.0;

  std::string to_string() const;
  void write(const std::string& path) const;
};

std::string version_string();

struct RunOptions {
  std::string out_dir = "out";
  std::string command = "run";
  std::size_t workers = 1;
  Logger log;
};

// Full pipeline for one model; writes metrics.csv, the checkpoint, the
// splits, and manifest.txt under out_dir. Throws StageError on failure after
// writing a manifest naming the failed stage.
RunManifest run_pipeline(const Settings& s, const std::string& config_snapshot,
                         const RunOptions& opts);

struct SweepRow {
  std::string model;
  double beta = 0.0;
  std::size_t replicate = 0;
  std::uint64_t seed = 0;
  std::size_t n_samples = 0;
  std::string metric;
  double value = 0.0;
};

struct SweepFailure {
  std::string model;
  double beta = 0.0;
  std::size_t replicate = 0;
  std::string error;
};

struct SweepReport {
  std::vector<double> betas;  // ascending
  std::vector<evalkit::MetricsReport> reports;
  std::vector<SweepRow> rows;
  std::vector<SweepFailure> failures;

  std::string to_csv() const;
  // Mean of a metric over replicates for one (model, beta).
  std::optional<double> mean(const std::string& model, double beta, const std::string& metric) const;
};

// Trains one model per (model spec, beta, replicate) over the shared context.
// Cell seeds derive from (master seed, beta index, replicate index). When
// z_dump_dir is non-empty, replicate 0 of every cell writes its posterior
// means over the test split there.
SweepReport run_beta_sweep(const Settings& s, const Context& ctx, std::size_t workers,
                           const std::string& z_dump_dir = {}, const Logger& log = {});

// One row per record: observed clicks, ENC of the record's slate, ENC of the
// slate decoded from the posterior mean under the record's own condition.
std::string emit_reconstruction_scan(const models::SlateCvae& model, const dataio::Dataset& d,
                                     const simenv::Environment& env);

// Posterior means, one line per record in the dataset line format followed by
// a tab and the comma-separated latent vector.
std::string dump_latents(const models::SlateCvae& model, const dataio::Dataset& d);

void write_text(const std::string& path, const std::string& text);

}  // namespace slategen::pipeline
