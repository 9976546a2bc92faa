#pragma once

// Conditional VAE slate generators.
//
// List: the decoder maps (z, c) to K latent item embeddings at once.
// Pivot: a pivot network maps (z, c) to the first latent embedding, an item is
// selected for it, and a completion network maps (pivot embedding, z, c) to the
// remaining K-1 latent embeddings. Every latent embedding is decoded to the
// item with the largest dot product.

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "slategen/dataio.hpp"
#include "slategen/models.hpp"
#include "slategen/numkit.hpp"

namespace slategen::models {

using dataio::ConstraintVector;
using dataio::Record;
using numkit::GaussianParams;

enum class CvaeArch { List, Pivot };

// Which pivot gets perturbed: S on the left means the ground-truth pivot fed
// to the completion network is perturbed during training; S on the right
// means the selected pivot is sampled instead of argmax'ed at inference.
enum class PivotVariant { GT_PI, SGT_PI, GT_SPI, SGT_SPI };

std::string to_string(PivotVariant v);
PivotVariant pivot_variant_from_string(const std::string& s);
bool perturbs_training_pivot(PivotVariant v);
bool perturbs_inference_pivot(PivotVariant v);

struct CvaeConfig {
  CvaeArch arch = CvaeArch::List;
  PivotVariant variant = PivotVariant::GT_PI;
  std::size_t latent_dim = 16;
  std::size_t hidden = 256;
  std::size_t slate_size = 5;
  double beta = 1.0;
  bool personalized = false;   // condition includes the user embedding
  double temperature = 1.0;    // perturbation sharpness
  bool distinct_items = false; // post-filter repeats at generation time

  std::string label() const;  // "List-CVAE", "Pivot-CVAE (SGT-SPI)", ...
};

// Everything random in one loss evaluation, drawn up front so the loss is a
// deterministic function of parameters.
struct LossNoise {
  std::vector<double> eps;                 // latent_dim standard normals
  std::vector<std::vector<ItemId>> negatives;  // one list per slot
  std::optional<ItemId> completion_pivot;  // pivot item fed to completion; default slate[0]
};

struct LossParts {
  double loss = 0.0;
  double recon = 0.0;
  double kl = 0.0;
};

enum class LatentSource { Prior, Posterior };

struct GenerationTrace {
  LatentSource source = LatentSource::Prior;
  GaussianParams params;
  std::vector<double> z;
  std::optional<ItemId> pivot;
  std::vector<std::vector<double>> latent_items;
};

class SlateCvae {
 public:
  SlateCvae(const CvaeConfig& cfg, std::shared_ptr<const EmbeddingBank> bank, Rng& rng);

  const CvaeConfig& config() const { return cfg_; }
  const EmbeddingBank& bank() const { return *bank_; }
  std::shared_ptr<const EmbeddingBank> bank_ptr() const { return bank_; }
  void set_beta(double beta) { cfg_.beta = beta; }
  std::size_t condition_dim() const;

  ConstraintVector condition(const dataio::ResponseVector& r, std::optional<UserId> user) const;
  ConstraintVector ideal_condition(std::optional<UserId> user) const;

  GaussianParams posterior(const Slate& s, const ConstraintVector& c) const;
  GaussianParams prior(const ConstraintVector& c) const;

  // Latent item embeddings for every slot. For Pivot models the completion
  // network is fed `pivot`, or the argmax pivot when none is given.
  std::vector<std::vector<double>> decode(std::span<const double> z, const ConstraintVector& c,
                                          std::optional<ItemId> pivot = std::nullopt) const;
  std::vector<double> decode_pivot(std::span<const double> z, const ConstraintVector& c) const;

  // Argmax dot product over all items, ties to the lowest id.
  ItemId nearest_item(std::span<const double> latent) const;
  ItemId pivot_select(std::span<const double> z, const ConstraintVector& c, bool perturb,
                      Rng& rng) const;

  Slate generate(const ConstraintVector& c_star, Rng& rng, GenerationTrace* trace = nullptr) const;
  Slate generate_for_user(std::optional<UserId> user, Rng& rng) const;
  // Posterior mean of the record, decoded with the record's own condition.
  Slate reconstruct(const Record& rec) const;

  LossNoise draw_noise(const Record& rec, std::size_t n_negatives, Rng& rng) const;
  LossParts loss(const Slate& s, const ConstraintVector& c, const LossNoise& noise,
                 bool accumulate);
  LossParts loss(const Record& rec, const LossNoise& noise, bool accumulate);

  std::vector<numkit::ParamRef> params();
  std::size_t parameter_count();
  void zero_grad();

  // Parameters in the numkit container plus "<path>.cfg".
  void save(const std::string& path) const;
  static SlateCvae load(const std::string& path, std::shared_ptr<const EmbeddingBank> bank);

 private:
  std::vector<double> encoder_input(const Slate& s, const ConstraintVector& c) const;

  CvaeConfig cfg_;
  std::shared_ptr<const EmbeddingBank> bank_;
  numkit::Mlp encoder_;
  numkit::Mlp prior_net_;
  numkit::Mlp decoder_;     // List: (z,c) -> K*e; Pivot: (z,c) -> e
  numkit::Mlp completion_;  // Pivot only: (pivot, z, c) -> (K-1)*e
};

struct CvaeTrainConfig {
  std::size_t epochs = 30;
  std::size_t batch = 64;
  std::size_t negatives = 100;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double recon = 0.0;
  double kl = 0.0;
};

// Called after each epoch; returning true stops training.
using EpochCallback = std::function<bool(const EpochStats&)>;

std::vector<EpochStats> train_cvae(SlateCvae& model, const dataio::Dataset& train,
                                   const CvaeTrainConfig& cfg, const EpochCallback& on_epoch = {});

// Stops once the moving average of a validation metric (higher is better)
// improves by less than `min_rel_gain` for `patience` consecutive checks.
class ConvergenceMonitor {
 public:
  ConvergenceMonitor(std::size_t window = 5, double min_rel_gain = 0.005,
                     std::size_t patience = 3)
      : window_(window), min_rel_gain_(min_rel_gain), patience_(patience) {}
  bool update(double value);
  bool converged() const { return stalls_ >= patience_; }

 private:
  std::size_t window_;
  double min_rel_gain_;
  std::size_t patience_;
  std::vector<double> values_;
  std::optional<double> last_avg_;
  std::size_t stalls_ = 0;
};

class CvaePolicy : public SlatePolicy {
 public:
  explicit CvaePolicy(std::shared_ptr<const SlateCvae> model) : model_(std::move(model)) {}
  Slate generate(std::optional<UserId> user, Rng& rng) const override {
    return model_->generate_for_user(user, rng);
  }
  std::string name() const override { return model_->config().label(); }

 private:
  std::shared_ptr<const SlateCvae> model_;
};

}  // namespace slategen::models
