#pragma once

// Ground-truth user response environments.
//
// Three parameterized simulators built on a biased matrix factorization
// interest model, plus a learned response network for logged datasets. All of
// them answer the same questions: per-position click probability, the
// expected number of clicks of a slate, and a Bernoulli response draw.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "slategen/dataio.hpp"
#include "slategen/numkit.hpp"

namespace slategen::simenv {

using dataio::Dataset;
using dataio::ResponseVector;
using dataio::Slate;
using numkit::Tensor2;

enum class EnvKind { URM, URM_P, URM_P_MR, Learned };

std::string to_string(EnvKind kind);
EnvKind env_kind_from_string(const std::string& s);

struct SimConfig {
  EnvKind kind = EnvKind::URM_P_MR;
  std::size_t n_items = 3000;
  std::size_t n_users = 1000;
  std::size_t emb_dim = 8;
  std::vector<double> pos_offsets{0.2, 0.1, 0.0, -0.1, -0.2};
  double pos_noise_std = 0.4472135954999579;  // variance 0.2
  double pos_weight = 1.0;
  double relation_weight = 0.5;
  std::uint64_t seed = 0;

  // Sampling moments for the simulator's tables.
  double vector_mean = 0.0;
  double vector_std = 1.0;
  double bias_mean = 0.0;
  double bias_std = 0.1;
  double global_bias = 0.0;

  std::size_t slate_size() const { return pos_offsets.size(); }
  void validate() const;
};

// Key=value sidecar form of SimConfig.
std::string format_sim_config(const SimConfig& c);
SimConfig parse_sim_config(const std::string& text);

struct ResponseModelConfig {
  std::size_t emb_dim = 8;
  std::size_t hidden = 256;
  std::size_t epochs = 20;
  std::size_t batch = 64;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
};

// Slate-aware click model: embeddings of the K slate items (and the user when
// present) feed a two-layer network with K sigmoid outputs, one per position.
class ResponseNet {
 public:
  ResponseNet() = default;
  ResponseNet(std::size_t n_items, std::size_t n_users, std::size_t slate_size,
              const ResponseModelConfig& cfg, Rng& rng);

  std::size_t slate_size() const { return slate_size_; }
  std::size_t n_items() const { return item_emb_.rows; }
  std::size_t n_users() const { return user_emb_.rows; }
  bool has_users() const { return user_emb_.rows > 0; }
  std::size_t emb_dim() const { return item_emb_.cols; }
  std::size_t hidden_dim() const { return mlp_.hidden_dim(); }

  std::vector<double> logits(const Slate& s, std::optional<UserId> user,
                             numkit::MlpCache* cache = nullptr) const;
  // BCE summed over positions; accumulates gradients when requested.
  double loss(const dataio::Record& rec, bool accumulate);

  std::vector<numkit::ParamRef> params();
  std::vector<numkit::NamedTensor> named_tensors() const;
  void zero_grad();

 private:
  std::vector<double> input(const Slate& s, std::optional<UserId> user) const;

  std::size_t slate_size_ = 0;
  Tensor2 item_emb_, user_emb_;
  Tensor2 g_item_emb_, g_user_emb_;
  numkit::Mlp mlp_;
};

class Environment {
 public:
  Environment() = default;

  EnvKind kind() const { return kind_; }
  const SimConfig& config() const { return config_; }
  std::size_t n_items() const;
  std::size_t n_users() const;
  std::size_t slate_size() const;
  bool has_users() const { return n_users() > 0; }

  // Click probability of every position of the slate.
  std::vector<double> slate_interests(const Slate& slate, std::optional<UserId> user) const;
  // Click probability of `item` placed at 0-based `position` with `slate` as context.
  double interest(ItemId item, std::optional<UserId> user, const Slate& slate,
                  std::size_t position) const;
  double expected_clicks(const Slate& slate, std::optional<UserId> user) const;
  ResponseVector sample_response(const Slate& slate, std::optional<UserId> user, Rng& rng) const;

  const Tensor2& item_vecs() const { return item_vecs_; }
  const Tensor2& user_vecs() const { return user_vecs_; }
  const std::vector<double>& item_bias() const { return item_bias_.data; }
  const std::vector<double>& user_bias() const { return user_bias_.data; }
  double global_bias() const { return config_.global_bias; }
  std::span<const double> user_pos_bias(UserId user) const { return pos_bias_.row(user); }
  const ResponseNet* learned_net() const { return learned_.get(); }

  // Parameter container + "<path>.cfg" SimConfig sidecar.
  void save(const std::string& path) const;
  static Environment load(const std::string& path);

  friend Environment build_environment(const SimConfig& config);
  friend Environment make_learned_environment(std::shared_ptr<const ResponseNet> net,
                                              const SimConfig& shape);

 private:
  void check_ids(const Slate& slate, std::optional<UserId> user) const;
  double base_interest(ItemId item, UserId user) const;
  std::vector<double> attention(const Slate& slate, UserId user) const;
  double simulated_interest(ItemId item, UserId user, std::size_t position,
                            std::span<const double> atn) const;

  EnvKind kind_ = EnvKind::URM;
  SimConfig config_;
  Tensor2 item_vecs_, user_vecs_;
  Tensor2 item_bias_, user_bias_;  // 1 x n
  Tensor2 pos_bias_;               // n_users x K
  std::shared_ptr<const ResponseNet> learned_;
};

Environment build_environment(const SimConfig& config);
Environment make_learned_environment(std::shared_ptr<const ResponseNet> net,
                                     const SimConfig& shape);

// Free-function forms.
double interest(const Environment& env, ItemId item, std::optional<UserId> user,
                const Slate& slate, std::size_t position);
double expected_clicks(const Environment& env, const Slate& slate, std::optional<UserId> user);
ResponseVector sample_response(const Environment& env, const Slate& slate,
                               std::optional<UserId> user, Rng& rng);

struct GenerateOptions {
  bool allow_repeats = false;  // items may repeat within a slate
  bool balance = true;         // apply balance_responses afterwards
};

// Uniform random users and uniform random slates, responses sampled from env.
Dataset generate_dataset(const Environment& env, std::size_t n_slates, Rng& rng,
                         const GenerateOptions& opts = {},
                         dataio::BalanceReport* report = nullptr);

struct FitReport {
  std::vector<double> epoch_loss;  // mean BCE per record-position
};

// Trains a ResponseNet with pointwise BCE and wraps it as a Learned environment.
Environment fit_response_model(const Dataset& train, const ResponseModelConfig& cfg,
                               FitReport* report = nullptr);

}  // namespace slategen::simenv
