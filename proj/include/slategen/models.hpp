#pragma once

// Frozen embedding tables, the pointwise rankers (biased MF and NeuMF), MMR
// re-ranking, similarity-weighted perturbation, and the SlatePolicy interface
// every recommender is evaluated through.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "slategen/dataio.hpp"
#include "slategen/numkit.hpp"
#include "slategen/simenv.hpp"

namespace slategen::models {

using dataio::Dataset;
using dataio::Slate;
using numkit::Tensor2;

constexpr std::size_t kEmbeddingDim = 8;

struct EmbeddingBank {
  Tensor2 item_table;
  std::optional<Tensor2> user_table;

  std::size_t dim() const { return item_table.cols; }
  std::size_t n_items() const { return item_table.rows; }
  bool has_users() const { return user_table.has_value(); }
  std::span<const double> item(ItemId i) const { return item_table.row(i); }
  // Empty span when the bank has no user table or no user is given.
  std::span<const double> user(std::optional<UserId> u) const;

  void save(const std::string& path) const;
  static EmbeddingBank load(const std::string& path);
};

// The simulator's own vectors, for environments whose embeddings are public.
EmbeddingBank bank_from_environment(const simenv::Environment& env);

// ---------------------------------------------------------------------------
// Pointwise rankers

enum class RankerKind { MF, NeuMF };

std::string to_string(RankerKind kind);

struct RankerConfig {
  std::size_t dim = kEmbeddingDim;
  std::size_t hidden = 256;
  std::size_t max_epochs = 30;
  std::size_t patience = 3;  // epochs without validation AUC gain
  std::size_t batch = 64;
  std::size_t negatives = 2;  // random negatives per positive
  double lr = 3e-4;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
};

class PointwiseRanker {
 public:
  PointwiseRanker() = default;
  // Datasets without users train against one universal user (n_users = 0).
  PointwiseRanker(RankerKind kind, std::size_t n_items, std::size_t n_users,
                  const RankerConfig& cfg, Rng& rng);

  RankerKind kind() const { return kind_; }
  std::size_t n_items() const { return item_emb_.rows; }
  std::size_t n_users() const { return has_users_ ? user_emb_.rows : 0; }

  double logit(std::optional<UserId> user, ItemId item) const;
  // Predicted click probability; the ranking score.
  double score(std::optional<UserId> user, ItemId item) const;
  std::vector<double> scores(std::optional<UserId> user) const;

  double loss(std::optional<UserId> user, ItemId item, double label, bool accumulate);

  const Tensor2& item_embeddings() const { return item_emb_; }
  const Tensor2& user_embeddings() const { return user_emb_; }

  std::vector<numkit::ParamRef> params();
  void save(const std::string& path) const;
  static PointwiseRanker load(const std::string& path);

 private:
  std::size_t user_row(std::optional<UserId> user) const;

  RankerKind kind_ = RankerKind::MF;
  bool has_users_ = false;
  Tensor2 user_emb_, item_emb_, user_bias_, item_bias_, global_bias_;
  Tensor2 g_user_emb_, g_item_emb_, g_user_bias_, g_item_bias_, g_global_bias_;
  numkit::Mlp tower_;  // NeuMF only
  std::size_t hidden_ = 0;
};

struct RankerHistory {
  std::vector<double> train_loss;
  std::vector<double> val_auc;
  std::size_t best_epoch = 0;
};

// Pointwise BCE over observed responses plus cfg.negatives random items per
// positive. With a validation set, keeps the parameters of the best
// validation-AUC epoch and stops after `patience` epochs without improvement.
PointwiseRanker train_pointwise_ranker(RankerKind kind, const Dataset& train,
                                       const Dataset* val, const RankerConfig& cfg,
                                       RankerHistory* history = nullptr);

// Biased-MF pretraining; exports the learned item (and user) tables.
EmbeddingBank pretrain_embeddings(const Dataset& train, const RankerConfig& cfg);

// Top-K items by score; ties go to the lower item id.
Slate rank_topk(const PointwiseRanker& ranker, std::optional<UserId> user, std::size_t k);

struct MmrOptions {
  double lambda = 0.5;
  // false: score = lambda*rel + (1-lambda)*max sim (as published);
  // true:  score = lambda*rel - (1-lambda)*max sim (classic MMR).
  bool classic = false;
};

// Greedy re-ranking from an empty slate. Similarity between items is the
// sigmoid of their embedding dot product; the max-similarity term over an
// empty slate is 0.
Slate mmr_rerank(const PointwiseRanker& ranker, const EmbeddingBank& bank,
                 std::optional<UserId> user, std::size_t k, const MmrOptions& opts = {});

// ---------------------------------------------------------------------------
// Perturbation

// Multinomial draw over all items with weights sigmoid(dot(anchor, v_i) / T).
ItemId sample_similar_item(std::span<const double> anchor, const EmbeddingBank& bank, Rng& rng,
                           double temperature = 1.0);

// Replaces the item at 0-based `position` with a draw weighted by similarity to
// the item currently there.
Slate nongreedy_perturb(const Slate& slate, std::size_t position, const EmbeddingBank& bank,
                        Rng& rng, double temperature = 1.0);

// ---------------------------------------------------------------------------
// Policies: anything that emits a slate for a user.

class SlatePolicy {
 public:
  virtual ~SlatePolicy() = default;
  virtual Slate generate(std::optional<UserId> user, Rng& rng) const = 0;
  virtual bool deterministic() const { return false; }
  virtual std::string name() const = 0;
};

class FixedSlatePolicy : public SlatePolicy {
 public:
  explicit FixedSlatePolicy(Slate s, std::string name = "fixed")
      : slate_(std::move(s)), name_(std::move(name)) {}
  Slate generate(std::optional<UserId>, Rng&) const override { return slate_; }
  bool deterministic() const override { return true; }
  std::string name() const override { return name_; }

 private:
  Slate slate_;
  std::string name_;
};

// Uniform random items (distinct within the slate unless allow_repeats).
class UniformRandomPolicy : public SlatePolicy {
 public:
  UniformRandomPolicy(std::size_t n_items, std::size_t k, bool allow_repeats = false)
      : n_items_(n_items), k_(k), allow_repeats_(allow_repeats) {}
  Slate generate(std::optional<UserId> user, Rng& rng) const override;
  std::string name() const override { return "random"; }

 private:
  std::size_t n_items_, k_;
  bool allow_repeats_;
};

class TopKPolicy : public SlatePolicy {
 public:
  TopKPolicy(std::shared_ptr<const PointwiseRanker> ranker, std::size_t k)
      : ranker_(std::move(ranker)), k_(k) {}
  Slate generate(std::optional<UserId> user, Rng& rng) const override;
  bool deterministic() const override { return true; }
  std::string name() const override;

 private:
  std::shared_ptr<const PointwiseRanker> ranker_;
  std::size_t k_;
};

class MmrPolicy : public SlatePolicy {
 public:
  MmrPolicy(std::shared_ptr<const PointwiseRanker> ranker,
            std::shared_ptr<const EmbeddingBank> bank, std::size_t k, MmrOptions opts)
      : ranker_(std::move(ranker)), bank_(std::move(bank)), k_(k), opts_(opts) {}
  Slate generate(std::optional<UserId> user, Rng& rng) const override;
  bool deterministic() const override { return true; }
  std::string name() const override { return "MF-MMR"; }

 private:
  std::shared_ptr<const PointwiseRanker> ranker_;
  std::shared_ptr<const EmbeddingBank> bank_;
  std::size_t k_;
  MmrOptions opts_;
};

// Post-generation perturbation of one slot of a base policy's output.
class NonGreedyPolicy : public SlatePolicy {
 public:
  NonGreedyPolicy(std::shared_ptr<const SlatePolicy> base,
                  std::shared_ptr<const EmbeddingBank> bank, std::size_t position = 0,
                  double temperature = 1.0)
      : base_(std::move(base)), bank_(std::move(bank)), position_(position),
        temperature_(temperature) {}
  Slate generate(std::optional<UserId> user, Rng& rng) const override;
  std::string name() const override { return "Non-Greedy " + base_->name(); }

 private:
  std::shared_ptr<const SlatePolicy> base_;
  std::shared_ptr<const EmbeddingBank> bank_;
  std::size_t position_;
  double temperature_;
};

}  // namespace slategen::models
