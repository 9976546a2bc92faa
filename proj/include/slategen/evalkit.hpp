#pragma once

// Evaluation of slate policies: expected number of clicks against an
// environment, item-variance decomposition, coverage, intra-list diversity,
// hit rate / recall on held-out slates, and the perturbation study.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "slategen/dataio.hpp"
#include "slategen/models.hpp"
#include "slategen/simenv.hpp"

namespace slategen::evalkit {

using dataio::Dataset;
using dataio::Slate;
using models::EmbeddingBank;
using models::SlatePolicy;
using numkit::Tensor2;

constexpr std::size_t kDefaultSamples = 500;

// N generated slates for each evaluated user (nullopt = the universal user).
struct SampleSet {
  std::size_t n_per_user = 0;
  std::vector<std::optional<UserId>> users;
  std::vector<std::vector<Slate>> slates;  // parallel to users

  std::size_t total_slates() const { return users.size() * n_per_user; }
};

// Each user draws from its own stream seeded by (seed, user id), so a user's
// samples do not depend on which other users are evaluated. A deterministic policy is
// queried once per user and its slate repeated.
SampleSet draw_samples(const SlatePolicy& policy, const std::vector<std::optional<UserId>>& users,
                       std::size_t n, std::uint64_t seed);

// Every user of the environment, or the universal user when it has none.
std::vector<std::optional<UserId>> all_users(const simenv::Environment& env);

double enc(const SampleSet& samples, const simenv::Environment& env);
double enc(const SlatePolicy& policy, const simenv::Environment& env,
           const std::vector<std::optional<UserId>>& users, std::size_t n, std::uint64_t seed);

struct VarianceParts {
  double total = 0.0;
  double slate_mean = 0.0;
  double intra_slate = 0.0;
};

// Empirical decomposition over a set of slates, each item represented by its
// row of `item_table`; 1/(NK) normalization for total and intra-slate.
VarianceParts variance_decomposition(std::span<const Slate> slates, const Tensor2& item_table);
// Per-user decomposition averaged over users.
VarianceParts variance_decomposition(const SampleSet& samples, const Tensor2& item_table);

double coverage(std::span<const Slate> slates, std::size_t n_items);
// User-wise coverage averaged over users.
double coverage(const SampleSet& samples, std::size_t n_items);

// 1 - mean pairwise sigmoid(v_i . v_l) over ordered pairs i != l. With
// normalized=false the pairwise sum is not divided by K(K-1).
double ild(const Slate& slate, const EmbeddingBank& bank, bool normalized = true);

struct Summary {
  double mean = 0.0, std = 0.0, min = 0.0, q25 = 0.0, median = 0.0, q75 = 0.0, max = 0.0;
};
Summary summarize(std::vector<double> values);

struct HitRecall {
  double hit_rate = 0.0;
  double recall = 0.0;
  std::size_t evaluated = 0;  // test slates with at least one positive
};

HitRecall hit_and_recall(const SlatePolicy& policy, const Dataset& test, std::size_t n,
                         std::uint64_t seed);
// Tally for explicit generations: generated[i] holds the slates for test record i.
HitRecall hit_and_recall(const Dataset& test, const std::vector<std::vector<Slate>>& generated);

struct MetricsReport {
  std::string model;
  std::string dataset;
  double beta = 0.0;
  std::uint64_t seed = 0;
  std::size_t n_samples = 0;

  double enc = 0.0;
  double total_var = 0.0;
  double slate_mean_var = 0.0;
  double intra_slate_var = 0.0;
  double coverage = 0.0;
  Summary ild;
  std::optional<HitRecall> ranking;
};

struct EvalOptions {
  std::size_t n_samples = kDefaultSamples;
  std::size_t ranking_samples = 0;  // generations per test slate; 0 uses n_samples
  std::uint64_t seed = 0;
  bool ild_normalized = true;
};

MetricsReport evaluate(const SlatePolicy& policy, const simenv::Environment& env,
                       const EmbeddingBank& bank, const std::vector<std::optional<UserId>>& users,
                       const Dataset* test, const EvalOptions& opts);

std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsReport& r);
// Metric name/value pairs in header order (without the identifying columns).
std::vector<std::pair<std::string, double>> metric_values(const MetricsReport& r);

// Shortest round-trip decimal form.
std::string format_double(double v);

// ---------------------------------------------------------------------------
// Perturbation study

struct PerturbationOptions {
  double bin_width = 0.25;
  // Records drawn per click group (with replacement); 0 uses every record once.
  std::size_t trials_per_group = 0;
  double temperature = 1.0;
};

struct HistogramRow {
  std::size_t group = 0;  // observed clicks
  std::size_t a = 0;      // perturbed items
  double bin_low = 0.0;
  double bin_high = 0.0;
  std::size_t count = 0;
};

struct ShiftSummary {
  std::size_t group = 0;
  std::size_t a = 0;
  std::size_t trials = 0;
  double mean_enc = 0.0;
  double mean_abs_shift = 0.0;
};

struct PerturbationTable {
  std::vector<HistogramRow> rows;
  std::vector<ShiftSummary> summary;

  std::string to_csv() const;
  std::string summary_csv() const;
};

PerturbationTable perturbation_study(const Dataset& d, const simenv::Environment& env,
                                     const EmbeddingBank& bank,
                                     const std::vector<std::size_t>& a_values, Rng& rng,
                                     const PerturbationOptions& opts = {});

}  // namespace slategen::evalkit
