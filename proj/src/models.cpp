#include "slategen/models.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

namespace slategen::models {

using numkit::NamedTensor;
using numkit::ParamRef;

std::span<const double> EmbeddingBank::user(std::optional<UserId> u) const {
  if (!user_table || !u) return {};
  if (*u >= user_table->rows) throw std::out_of_range("user id outside the embedding table");
  return user_table->row(*u);
}

void EmbeddingBank::save(const std::string& path) const {
  std::vector<NamedTensor> tensors{{"item_table", &item_table}};
  if (user_table) tensors.push_back({"user_table", &*user_table});
  numkit::save_params(path, tensors);
}

EmbeddingBank EmbeddingBank::load(const std::string& path) {
  EmbeddingBank bank;
  for (auto& [name, t] : numkit::load_params(path)) {
    if (name == "item_table") bank.item_table = std::move(t);
    else if (name == "user_table") bank.user_table = std::move(t);
    else throw std::runtime_error("unexpected tensor '" + name + "' in " + path);
  }
  if (bank.item_table.rows == 0) throw std::runtime_error("no item table in " + path);
  return bank;
}

EmbeddingBank bank_from_environment(const simenv::Environment& env) {
  if (env.kind() == simenv::EnvKind::Learned)
    throw ContractError("a learned environment has no public item vectors");
  EmbeddingBank bank;
  bank.item_table = env.item_vecs();
  if (env.has_users()) bank.user_table = env.user_vecs();
  return bank;
}

// ---------------------------------------------------------------------------

std::string to_string(RankerKind kind) { return kind == RankerKind::MF ? "MF" : "NeuMF"; }

PointwiseRanker::PointwiseRanker(RankerKind kind, std::size_t n_items, std::size_t n_users,
                                 const RankerConfig& cfg, Rng& rng)
    : kind_(kind), has_users_(n_users > 0), hidden_(cfg.hidden) {
  if (n_items == 0 || cfg.dim == 0) throw ContractError("ranker needs items and a positive dim");
  const std::size_t u_rows = has_users_ ? n_users : 1;
  user_emb_ = Tensor2::gaussian(u_rows, cfg.dim, 0.0, 0.1, rng);
  item_emb_ = Tensor2::gaussian(n_items, cfg.dim, 0.0, 0.1, rng);
  user_bias_ = Tensor2(1, u_rows);
  item_bias_ = Tensor2(1, n_items);
  global_bias_ = Tensor2(1, 1);
  g_user_emb_ = Tensor2(u_rows, cfg.dim);
  g_item_emb_ = Tensor2(n_items, cfg.dim);
  g_user_bias_ = Tensor2(1, u_rows);
  g_item_bias_ = Tensor2(1, n_items);
  g_global_bias_ = Tensor2(1, 1);
  if (kind_ == RankerKind::NeuMF) tower_ = numkit::Mlp(2 * cfg.dim, cfg.hidden, 1, rng);
}

std::size_t PointwiseRanker::user_row(std::optional<UserId> user) const {
  if (!has_users_ || !user) return 0;
  if (*user >= user_emb_.rows) throw std::out_of_range("user id outside the ranker");
  return *user;
}

double PointwiseRanker::logit(std::optional<UserId> user, ItemId item) const {
  if (item >= item_emb_.rows) throw std::out_of_range("item id outside the ranker");
  const std::size_t u = user_row(user);
  if (kind_ == RankerKind::MF) {
    return numkit::dot(user_emb_.row(u), item_emb_.row(item)) + user_bias_.data[u] +
           item_bias_.data[item] + global_bias_.data[0];
  }
  std::vector<double> x(user_emb_.row(u).begin(), user_emb_.row(u).end());
  x.insert(x.end(), item_emb_.row(item).begin(), item_emb_.row(item).end());
  return tower_.forward(x)[0];
}

double PointwiseRanker::score(std::optional<UserId> user, ItemId item) const {
  return numkit::sigmoid(logit(user, item));
}

std::vector<double> PointwiseRanker::scores(std::optional<UserId> user) const {
  std::vector<double> out(n_items());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = score(user, static_cast<ItemId>(i));
  return out;
}

double PointwiseRanker::loss(std::optional<UserId> user, ItemId item, double label,
                             bool accumulate) {
  if (item >= item_emb_.rows) throw std::out_of_range("item id outside the ranker");
  const std::size_t u = user_row(user);
  const std::size_t d = item_emb_.cols;
  if (kind_ == RankerKind::MF) {
    double g = 0.0;
    const double l = numkit::bce_with_logit(logit(user, item), label, accumulate ? &g : nullptr);
    if (accumulate) {
      auto uv = user_emb_.row(u);
      auto iv = item_emb_.row(item);
      auto gu = g_user_emb_.row(u);
      auto gi = g_item_emb_.row(item);
      for (std::size_t k = 0; k < d; ++k) {
        gu[k] += g * iv[k];
        gi[k] += g * uv[k];
      }
      g_user_bias_.data[u] += g;
      g_item_bias_.data[item] += g;
      g_global_bias_.data[0] += g;
    }
    return l;
  }
  std::vector<double> x(user_emb_.row(u).begin(), user_emb_.row(u).end());
  x.insert(x.end(), item_emb_.row(item).begin(), item_emb_.row(item).end());
  numkit::MlpCache cache;
  const double z = tower_.forward(x, accumulate ? &cache : nullptr)[0];
  double g = 0.0;
  const double l = numkit::bce_with_logit(z, label, accumulate ? &g : nullptr);
  if (accumulate) {
    std::vector<double> dx(2 * d);
    const double dy[1] = {g};
    tower_.backward(cache, dy, dx);
    auto gu = g_user_emb_.row(u);
    auto gi = g_item_emb_.row(item);
    for (std::size_t k = 0; k < d; ++k) {
      gu[k] += dx[k];
      gi[k] += dx[d + k];
    }
  }
  return l;
}

std::vector<ParamRef> PointwiseRanker::params() {
  std::vector<ParamRef> out{{"user_emb", &user_emb_, &g_user_emb_},
                            {"item_emb", &item_emb_, &g_item_emb_}};
  if (kind_ == RankerKind::MF) {
    out.push_back({"user_bias", &user_bias_, &g_user_bias_});
    out.push_back({"item_bias", &item_bias_, &g_item_bias_});
    out.push_back({"global_bias", &global_bias_, &g_global_bias_});
  } else {
    tower_.collect("tower", out);
  }
  return out;
}

void PointwiseRanker::save(const std::string& path) const {
  std::vector<NamedTensor> tensors;
  for (const auto& p : const_cast<PointwiseRanker*>(this)->params())
    tensors.push_back({p.name, p.value});
  numkit::save_params(path, tensors);
  std::ofstream os(path + ".cfg");
  if (!os) throw std::runtime_error("cannot write " + path + ".cfg");
  os << "kind=" << to_string(kind_) << "\n"
     << "items=" << n_items() << "\n"
     << "users=" << n_users() << "\n"
     << "dim=" << item_emb_.cols << "\n"
     << "hidden=" << hidden_ << "\n";
}

PointwiseRanker PointwiseRanker::load(const std::string& path) {
  std::ifstream is(path + ".cfg");
  if (!is) throw std::runtime_error("cannot open " + path + ".cfg");
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  RankerConfig cfg;
  cfg.dim = std::stoul(kv.at("dim"));
  cfg.hidden = std::stoul(kv.at("hidden"));
  const RankerKind kind = kv.at("kind") == "MF" ? RankerKind::MF : RankerKind::NeuMF;
  Rng rng(0);
  PointwiseRanker r(kind, std::stoul(kv.at("items")), std::stoul(kv.at("users")), cfg, rng);
  numkit::assign_params(numkit::load_params(path), r.params());
  return r;
}

// ---------------------------------------------------------------------------

namespace {

struct PointSample {
  std::optional<UserId> user;
  ItemId item;
  double label;
};

double pairwise_auc(const PointwiseRanker& r, const std::vector<PointSample>& pos,
                    const std::vector<ItemId>& neg) {
  if (pos.empty()) return 0.5;
  double wins = 0.0;
  for (std::size_t i = 0; i < pos.size(); ++i) {
    const double sp = r.logit(pos[i].user, pos[i].item);
    const double sn = r.logit(pos[i].user, neg[i]);
    wins += sp > sn ? 1.0 : (sp == sn ? 0.5 : 0.0);
  }
  return wins / static_cast<double>(pos.size());
}

}  // namespace

PointwiseRanker train_pointwise_ranker(RankerKind kind, const Dataset& train, const Dataset* val,
                                       const RankerConfig& cfg, RankerHistory* history) {
  if (train.empty()) throw ContractError("cannot train a ranker on an empty dataset");
  Rng rng(mix_seed(cfg.seed, 0x52414e4bULL));
  const std::size_t n_users = train.has_users() || (val && val->has_users())
                                  ? std::max(train.user_count(), val ? val->user_count() : 0)
                                  : 0;
  PointwiseRanker ranker(kind, train.item_universe, n_users, cfg, rng);
  auto params = ranker.params();
  numkit::AdamState adam(numkit::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});

  std::vector<PointSample> observed;
  std::vector<PointSample> positives;
  for (const auto& rec : train.records) {
    for (std::size_t k = 0; k < rec.slate.size(); ++k) {
      observed.push_back({rec.user, rec.slate[k], static_cast<double>(rec.response.r[k])});
      if (rec.response.r[k]) positives.push_back(observed.back());
    }
  }

  std::vector<PointSample> val_pos;
  std::vector<ItemId> val_neg;
  if (val) {
    Rng vr(mix_seed(cfg.seed, 0x56414cULL));
    std::uniform_int_distribution<ItemId> pick(0, static_cast<ItemId>(train.item_universe - 1));
    for (const auto& rec : val->records)
      for (std::size_t k = 0; k < rec.slate.size(); ++k)
        if (rec.response.r[k]) {
          val_pos.push_back({rec.user, rec.slate[k], 1.0});
          val_neg.push_back(pick(vr));
        }
  }
  const bool early_stop = !val_pos.empty();

  RankerHistory hist;
  double best_auc = -1.0;
  PointwiseRanker best = ranker;
  std::size_t since_best = 0;
  std::uniform_int_distribution<ItemId> pick_item(0, static_cast<ItemId>(train.item_universe - 1));

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    std::vector<PointSample> samples = observed;
    for (const auto& p : positives)
      for (std::size_t n = 0; n < cfg.negatives; ++n) samples.push_back({p.user, pick_item(rng), 0.0});
    std::shuffle(samples.begin(), samples.end(), rng);

    double total = 0.0;
    for (std::size_t start = 0; start < samples.size(); start += cfg.batch) {
      const std::size_t end = std::min(samples.size(), start + cfg.batch);
      numkit::zero_grads(params);
      for (std::size_t i = start; i < end; ++i)
        total += ranker.loss(samples[i].user, samples[i].item, samples[i].label, true);
      numkit::scale_grads(params, 1.0 / static_cast<double>(end - start));
      numkit::adam_step(adam, params);
    }
    const double mean_loss = total / static_cast<double>(samples.size());
    if (!std::isfinite(mean_loss)) throw TrainingError("ranker loss became non-finite");
    hist.train_loss.push_back(mean_loss);

    if (early_stop) {
      const double auc = pairwise_auc(ranker, val_pos, val_neg);
      hist.val_auc.push_back(auc);
      if (auc > best_auc) {
        best_auc = auc;
        best = ranker;
        hist.best_epoch = epoch;
        since_best = 0;
      } else if (++since_best >= cfg.patience) {
        break;
      }
    } else {
      hist.best_epoch = epoch;
    }
  }
  if (history) *history = std::move(hist);
  return early_stop ? best : ranker;
}

EmbeddingBank pretrain_embeddings(const Dataset& train, const RankerConfig& cfg) {
  const PointwiseRanker mf = train_pointwise_ranker(RankerKind::MF, train, nullptr, cfg);
  EmbeddingBank bank;
  bank.item_table = mf.item_embeddings();
  if (mf.n_users() > 0) bank.user_table = mf.user_embeddings();
  return bank;
}

Slate rank_topk(const PointwiseRanker& ranker, std::optional<UserId> user, std::size_t k) {
  if (k > ranker.n_items()) throw ContractError("slate size exceeds the item universe");
  const auto s = ranker.scores(user);
  std::vector<ItemId> ids(s.size());
  std::iota(ids.begin(), ids.end(), ItemId{0});
  std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(),
                    [&](ItemId a, ItemId b) { return s[a] != s[b] ? s[a] > s[b] : a < b; });
  ids.resize(k);
  return Slate{std::move(ids)};
}

Slate mmr_rerank(const PointwiseRanker& ranker, const EmbeddingBank& bank,
                 std::optional<UserId> user, std::size_t k, const MmrOptions& opts) {
  const std::size_t n = ranker.n_items();
  if (k > n) throw ContractError("slate size exceeds the item universe");
  if (bank.n_items() != n) throw ContractError("embedding bank and ranker disagree on items");
  const auto rel = ranker.scores(user);
  const double sign = opts.classic ? -1.0 : 1.0;
  std::vector<double> max_sim(n, 0.0);
  std::vector<bool> taken(n, false);
  Slate out;
  for (std::size_t step = 0; step < k; ++step) {
    std::size_t best = n;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t d = 0; d < n; ++d) {
      if (taken[d]) continue;
      const double s = opts.lambda * rel[d] + sign * (1.0 - opts.lambda) * max_sim[d];
      if (s > best_score) {
        best_score = s;
        best = d;
      }
    }
    taken[best] = true;
    out.items.push_back(static_cast<ItemId>(best));
    const auto vb = bank.item(static_cast<ItemId>(best));
    for (std::size_t d = 0; d < n; ++d)
      if (!taken[d])
        max_sim[d] = std::max(max_sim[d],
                              numkit::sigmoid(numkit::dot(bank.item(static_cast<ItemId>(d)), vb)));
  }
  return out;
}

// ---------------------------------------------------------------------------

ItemId sample_similar_item(std::span<const double> anchor, const EmbeddingBank& bank, Rng& rng,
                           double temperature) {
  if (temperature <= 0.0) throw ContractError("temperature must be positive");
  if (anchor.size() != bank.dim()) throw ContractError("anchor dimension mismatch");
  std::vector<double> w(bank.n_items());
  for (std::size_t i = 0; i < w.size(); ++i)
    w[i] = numkit::sigmoid(numkit::dot(anchor, bank.item(static_cast<ItemId>(i))) / temperature);
  std::discrete_distribution<std::size_t> dist(w.begin(), w.end());
  return static_cast<ItemId>(dist(rng));
}

Slate nongreedy_perturb(const Slate& slate, std::size_t position, const EmbeddingBank& bank,
                        Rng& rng, double temperature) {
  if (position >= slate.size()) throw ContractError("perturbation position outside the slate");
  Slate out = slate;
  out.items[position] = sample_similar_item(bank.item(slate[position]), bank, rng, temperature);
  return out;
}

// ---------------------------------------------------------------------------

Slate UniformRandomPolicy::generate(std::optional<UserId>, Rng& rng) const {
  if (!allow_repeats_ && k_ > n_items_) throw ContractError("slate size exceeds the item universe");
  std::uniform_int_distribution<ItemId> pick(0, static_cast<ItemId>(n_items_ - 1));
  Slate s;
  while (s.size() < k_) {
    const ItemId i = pick(rng);
    if (!allow_repeats_ && std::find(s.items.begin(), s.items.end(), i) != s.items.end()) continue;
    s.items.push_back(i);
  }
  return s;
}

Slate TopKPolicy::generate(std::optional<UserId> user, Rng&) const {
  return rank_topk(*ranker_, user, k_);
}

std::string TopKPolicy::name() const { return to_string(ranker_->kind()); }

Slate MmrPolicy::generate(std::optional<UserId> user, Rng&) const {
  return mmr_rerank(*ranker_, *bank_, user, k_, opts_);
}

Slate NonGreedyPolicy::generate(std::optional<UserId> user, Rng& rng) const {
  return nongreedy_perturb(base_->generate(user, rng), position_, *bank_, rng, temperature_);
}

}  // namespace slategen::models
