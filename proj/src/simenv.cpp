#include "slategen/simenv.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace slategen::simenv {

using numkit::sigmoid;

std::string to_string(EnvKind kind) {
  switch (kind) {
    case EnvKind::URM: return "URM";
    case EnvKind::URM_P: return "URM_P";
    case EnvKind::URM_P_MR: return "URM_P_MR";
    case EnvKind::Learned: return "Learned";
  }
  return "?";
}

EnvKind env_kind_from_string(const std::string& s) {
  if (s == "URM") return EnvKind::URM;
  if (s == "URM_P") return EnvKind::URM_P;
  if (s == "URM_P_MR") return EnvKind::URM_P_MR;
  if (s == "Learned") return EnvKind::Learned;
  throw ContractError("unknown environment kind: " + s);
}

void SimConfig::validate() const {
  if (n_items == 0 || n_users == 0 || emb_dim == 0)
    throw ContractError("SimConfig: n_items, n_users and emb_dim must be positive");
  if (pos_offsets.empty()) throw ContractError("SimConfig: pos_offsets must have K entries");
  if (pos_noise_std < 0.0) throw ContractError("SimConfig: pos_noise_std must be >= 0");
  if (relation_weight < 0.0) throw ContractError("SimConfig: relation_weight must be >= 0");
  if (vector_std < 0.0 || bias_std < 0.0) throw ContractError("SimConfig: negative std");
}

std::string format_sim_config(const SimConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "kind=" << to_string(c.kind) << "\n"
     << "n_items=" << c.n_items << "\n"
     << "n_users=" << c.n_users << "\n"
     << "emb_dim=" << c.emb_dim << "\n"
     << "pos_offsets=";
  for (std::size_t i = 0; i < c.pos_offsets.size(); ++i)
    os << (i ? "," : "") << c.pos_offsets[i];
  os << "\n"
     << "pos_noise_std=" << c.pos_noise_std << "\n"
     << "pos_weight=" << c.pos_weight << "\n"
     << "relation_weight=" << c.relation_weight << "\n"
     << "seed=" << c.seed << "\n"
     << "vector_mean=" << c.vector_mean << "\n"
     << "vector_std=" << c.vector_std << "\n"
     << "bias_mean=" << c.bias_mean << "\n"
     << "bias_std=" << c.bias_std << "\n"
     << "global_bias=" << c.global_bias << "\n";
  return os.str();
}

SimConfig parse_sim_config(const std::string& text) {
  SimConfig c;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "kind") c.kind = env_kind_from_string(val);
    else if (key == "n_items") c.n_items = std::stoull(val);
    else if (key == "n_users") c.n_users = std::stoull(val);
    else if (key == "emb_dim") c.emb_dim = std::stoull(val);
    else if (key == "pos_offsets") {
      c.pos_offsets.clear();
      std::istringstream vs(val);
      std::string tok;
      while (std::getline(vs, tok, ',')) c.pos_offsets.push_back(std::stod(tok));
    } else if (key == "pos_noise_std") c.pos_noise_std = std::stod(val);
    else if (key == "pos_weight") c.pos_weight = std::stod(val);
    else if (key == "relation_weight") c.relation_weight = std::stod(val);
    else if (key == "seed") c.seed = std::stoull(val);
    else if (key == "vector_mean") c.vector_mean = std::stod(val);
    else if (key == "vector_std") c.vector_std = std::stod(val);
    else if (key == "bias_mean") c.bias_mean = std::stod(val);
    else if (key == "bias_std") c.bias_std = std::stod(val);
    else if (key == "global_bias") c.global_bias = std::stod(val);
  }
  return c;
}

// ---------------------------------------------------------------------------
// ResponseNet

ResponseNet::ResponseNet(std::size_t n_items, std::size_t n_users, std::size_t slate_size,
                         const ResponseModelConfig& cfg, Rng& rng)
    : slate_size_(slate_size),
      item_emb_(Tensor2::gaussian(n_items, cfg.emb_dim, 0.0, 0.1, rng)),
      user_emb_(Tensor2::gaussian(n_users, cfg.emb_dim, 0.0, 0.1, rng)),
      g_item_emb_(n_items, cfg.emb_dim),
      g_user_emb_(n_users, cfg.emb_dim),
      mlp_((slate_size + (n_users ? 1 : 0)) * cfg.emb_dim, cfg.hidden, slate_size, rng) {}

std::vector<double> ResponseNet::input(const Slate& s, std::optional<UserId> user) const {
  std::vector<double> x;
  x.reserve(mlp_.in_dim());
  for (ItemId i : s.items) {
    auto r = item_emb_.row(i);
    x.insert(x.end(), r.begin(), r.end());
  }
  if (has_users()) {
    if (user) {
      auto r = user_emb_.row(*user);
      x.insert(x.end(), r.begin(), r.end());
    } else {
      x.insert(x.end(), item_emb_.cols, 0.0);
    }
  }
  return x;
}

std::vector<double> ResponseNet::logits(const Slate& s, std::optional<UserId> user,
                                        numkit::MlpCache* cache) const {
  return mlp_.forward(input(s, user), cache);
}

double ResponseNet::loss(const dataio::Record& rec, bool accumulate) {
  numkit::MlpCache cache;
  const auto out = logits(rec.slate, rec.user, accumulate ? &cache : nullptr);
  double total = 0.0;
  std::vector<double> dy(out.size());
  for (std::size_t k = 0; k < out.size(); ++k)
    total += numkit::bce_with_logit(out[k], rec.response.r[k], &dy[k]);
  if (accumulate) {
    std::vector<double> dx(mlp_.in_dim());
    mlp_.backward(cache, dy, dx);
    const std::size_t e = item_emb_.cols;
    for (std::size_t k = 0; k < rec.slate.size(); ++k) {
      auto g = g_item_emb_.row(rec.slate[k]);
      for (std::size_t j = 0; j < e; ++j) g[j] += dx[k * e + j];
    }
    if (has_users() && rec.user) {
      auto g = g_user_emb_.row(*rec.user);
      for (std::size_t j = 0; j < e; ++j) g[j] += dx[slate_size_ * e + j];
    }
  }
  return total;
}

std::vector<numkit::ParamRef> ResponseNet::params() {
  std::vector<numkit::ParamRef> p{{"resp.item_emb", &item_emb_, &g_item_emb_}};
  if (has_users()) p.push_back({"resp.user_emb", &user_emb_, &g_user_emb_});
  mlp_.collect("resp.mlp", p);
  return p;
}

std::vector<numkit::NamedTensor> ResponseNet::named_tensors() const {
  auto refs = const_cast<ResponseNet*>(this)->params();
  std::vector<numkit::NamedTensor> out;
  for (const auto& p : refs) out.push_back({p.name, p.value});
  return out;
}

void ResponseNet::zero_grad() { numkit::zero_grads(params()); }

// ---------------------------------------------------------------------------
// Environment

std::size_t Environment::n_items() const {
  return kind_ == EnvKind::Learned ? learned_->n_items() : item_vecs_.rows;
}

std::size_t Environment::n_users() const {
  return kind_ == EnvKind::Learned ? learned_->n_users() : user_vecs_.rows;
}

std::size_t Environment::slate_size() const {
  return kind_ == EnvKind::Learned ? learned_->slate_size() : config_.slate_size();
}

void Environment::check_ids(const Slate& slate, std::optional<UserId> user) const {
  if (slate.size() != slate_size()) throw ContractError("slate length differs from K");
  for (ItemId i : slate.items)
    if (i >= n_items()) throw std::out_of_range("unknown item id " + std::to_string(i));
  if (kind_ != EnvKind::Learned) {
    if (!user) throw std::out_of_range("simulated environments require a user id");
  }
  if (kind_ == EnvKind::Learned && !has_users()) return;
  if (user && *user >= n_users()) throw std::out_of_range("unknown user id " + std::to_string(*user));
}

double Environment::base_interest(ItemId item, UserId user) const {
  const double score = numkit::dot(user_vecs_.row(user), item_vecs_.row(item)) +
                       user_bias_.data[user] + item_bias_.data[item] + config_.global_bias;
  return sigmoid(score);
}

std::vector<double> Environment::attention(const Slate& slate, UserId user) const {
  const std::size_t m = item_vecs_.cols;
  std::vector<double> mean(m, 0.0);
  for (ItemId i : slate.items) {
    auto v = item_vecs_.row(i);
    for (std::size_t d = 0; d < m; ++d) mean[d] += v[d];
  }
  auto u = user_vecs_.row(user);
  for (std::size_t d = 0; d < m; ++d)
    mean[d] = sigmoid(mean[d] / static_cast<double>(slate.size()) * u[d]);
  return mean;
}

double Environment::simulated_interest(ItemId item, UserId user, std::size_t position,
                                       std::span<const double> atn) const {
  const double base = base_interest(item, user);
  if (kind_ == EnvKind::URM) return base;
  double p = base + config_.pos_weight * pos_bias_(user, position);
  if (kind_ == EnvKind::URM_P_MR)
    p += config_.relation_weight * numkit::dot(atn, item_vecs_.row(item));
  return std::clamp(p, 0.0, 1.0);
}

std::vector<double> Environment::slate_interests(const Slate& slate,
                                                 std::optional<UserId> user) const {
  check_ids(slate, user);
  std::vector<double> out(slate.size());
  if (kind_ == EnvKind::Learned) {
    const auto z = learned_->logits(slate, user);
    for (std::size_t k = 0; k < z.size(); ++k) out[k] = sigmoid(z[k]);
    return out;
  }
  std::vector<double> atn;
  if (kind_ == EnvKind::URM_P_MR) atn = attention(slate, *user);
  for (std::size_t k = 0; k < slate.size(); ++k)
    out[k] = simulated_interest(slate[k], *user, k, atn);
  return out;
}

double Environment::interest(ItemId item, std::optional<UserId> user, const Slate& slate,
                             std::size_t position) const {
  check_ids(slate, user);
  if (position >= slate.size()) throw ContractError("position outside the slate");
  if (item >= n_items()) throw std::out_of_range("unknown item id " + std::to_string(item));
  if (kind_ == EnvKind::Learned) {
    Slate s = slate;
    s.items[position] = item;
    return sigmoid(learned_->logits(s, user)[position]);
  }
  std::vector<double> atn;
  if (kind_ == EnvKind::URM_P_MR) atn = attention(slate, *user);
  return simulated_interest(item, *user, position, atn);
}

double Environment::expected_clicks(const Slate& slate, std::optional<UserId> user) const {
  const auto p = slate_interests(slate, user);
  return std::accumulate(p.begin(), p.end(), 0.0);
}

ResponseVector Environment::sample_response(const Slate& slate, std::optional<UserId> user,
                                            Rng& rng) const {
  const auto p = slate_interests(slate, user);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ResponseVector r;
  r.r.resize(p.size());
  for (std::size_t k = 0; k < p.size(); ++k) r.r[k] = u(rng) < p[k] ? 1 : 0;
  return r;
}

Environment build_environment(const SimConfig& config) {
  config.validate();
  if (config.kind == EnvKind::Learned)
    throw ContractError("build_environment: Learned environments come from fit_response_model");
  Environment env;
  env.kind_ = config.kind;
  env.config_ = config;
  Rng rng(config.seed);
  env.item_vecs_ =
      Tensor2::gaussian(config.n_items, config.emb_dim, config.vector_mean, config.vector_std, rng);
  env.user_vecs_ =
      Tensor2::gaussian(config.n_users, config.emb_dim, config.vector_mean, config.vector_std, rng);
  env.item_bias_ = Tensor2::gaussian(1, config.n_items, config.bias_mean, config.bias_std, rng);
  env.user_bias_ = Tensor2::gaussian(1, config.n_users, config.bias_mean, config.bias_std, rng);
  const std::size_t k = config.slate_size();
  env.pos_bias_ = Tensor2(config.n_users, k);
  std::normal_distribution<double> noise(0.0, 1.0);
  for (std::size_t u = 0; u < config.n_users; ++u)
    for (std::size_t p = 0; p < k; ++p) {
      const double eps = config.pos_noise_std == 0.0 ? 0.0 : noise(rng);
      env.pos_bias_(u, p) = config.pos_offsets[p] + config.pos_noise_std * eps;
    }
  return env;
}

Environment make_learned_environment(std::shared_ptr<const ResponseNet> net,
                                     const SimConfig& shape) {
  Environment env;
  env.kind_ = EnvKind::Learned;
  env.config_ = shape;
  env.config_.kind = EnvKind::Learned;
  env.learned_ = std::move(net);
  return env;
}

void Environment::save(const std::string& path) const {
  std::vector<numkit::NamedTensor> tensors;
  std::ostringstream extra;
  if (kind_ == EnvKind::Learned) {
    tensors = learned_->named_tensors();
    numkit::save_params(path, tensors);
    extra << "resp_hidden=" << learned_->hidden_dim() << "\n"
          << "resp_emb_dim=" << learned_->emb_dim() << "\n"
          << "resp_users=" << learned_->n_users() << "\n"
          << "resp_items=" << learned_->n_items() << "\n"
          << "resp_slate_size=" << learned_->slate_size() << "\n";
  } else {
    tensors = {{"item_vecs", &item_vecs_}, {"user_vecs", &user_vecs_},
               {"item_bias", &item_bias_}, {"user_bias", &user_bias_},
               {"pos_bias", &pos_bias_}};
    numkit::save_params(path, tensors);
  }
  std::ofstream os(path + ".cfg");
  if (!os) throw std::runtime_error("cannot write " + path + ".cfg");
  os << format_sim_config(config_) << extra.str();
}

Environment Environment::load(const std::string& path) {
  std::ifstream is(path + ".cfg");
  if (!is) throw std::runtime_error("cannot open " + path + ".cfg");
  std::stringstream buf;
  buf << is.rdbuf();
  const std::string text = buf.str();
  SimConfig cfg = parse_sim_config(text);
  const auto loaded = numkit::load_params(path);
  if (cfg.kind == EnvKind::Learned) {
    std::map<std::string, std::size_t> kv;
    std::istringstream ts(text);
    std::string line;
    while (std::getline(ts, line)) {
      const auto eq = line.find('=');
      if (eq != std::string::npos && line.rfind("resp_", 0) == 0)
        kv[line.substr(0, eq)] = std::stoull(line.substr(eq + 1));
    }
    ResponseModelConfig rc;
    rc.hidden = kv.at("resp_hidden");
    rc.emb_dim = kv.at("resp_emb_dim");
    Rng rng(0);
    auto net = std::make_shared<ResponseNet>(kv.at("resp_items"), kv.at("resp_users"),
                                             kv.at("resp_slate_size"), rc, rng);
    numkit::assign_params(loaded, net->params());
    return make_learned_environment(std::move(net), cfg);
  }
  Environment env;
  env.kind_ = cfg.kind;
  env.config_ = cfg;
  env.item_vecs_ = Tensor2(cfg.n_items, cfg.emb_dim);
  env.user_vecs_ = Tensor2(cfg.n_users, cfg.emb_dim);
  env.item_bias_ = Tensor2(1, cfg.n_items);
  env.user_bias_ = Tensor2(1, cfg.n_users);
  env.pos_bias_ = Tensor2(cfg.n_users, cfg.slate_size());
  Tensor2 scratch;
  std::vector<numkit::ParamRef> dest{{"item_vecs", &env.item_vecs_, &scratch},
                                     {"user_vecs", &env.user_vecs_, &scratch},
                                     {"item_bias", &env.item_bias_, &scratch},
                                     {"user_bias", &env.user_bias_, &scratch},
                                     {"pos_bias", &env.pos_bias_, &scratch}};
  numkit::assign_params(loaded, dest);
  return env;
}

// ---------------------------------------------------------------------------

double interest(const Environment& env, ItemId item, std::optional<UserId> user,
                const Slate& slate, std::size_t position) {
  return env.interest(item, user, slate, position);
}

double expected_clicks(const Environment& env, const Slate& slate, std::optional<UserId> user) {
  return env.expected_clicks(slate, user);
}

ResponseVector sample_response(const Environment& env, const Slate& slate,
                               std::optional<UserId> user, Rng& rng) {
  return env.sample_response(slate, user, rng);
}

Dataset generate_dataset(const Environment& env, std::size_t n_slates, Rng& rng,
                         const GenerateOptions& opts, dataio::BalanceReport* report) {
  const std::size_t k = env.slate_size();
  const std::size_t n_items = env.n_items();
  if (!opts.allow_repeats && n_items < k)
    throw ContractError("generate_dataset: fewer items than slate positions");
  Dataset d;
  d.item_universe = n_items;
  d.slate_size = k;
  d.records.reserve(n_slates);
  std::uniform_int_distribution<std::size_t> pick_item(0, n_items - 1);
  std::uniform_int_distribution<std::size_t> pick_user(0, env.has_users() ? env.n_users() - 1 : 0);
  for (std::size_t n = 0; n < n_slates; ++n) {
    dataio::Record rec;
    if (env.has_users()) rec.user = static_cast<UserId>(pick_user(rng));
    while (rec.slate.size() < k) {
      const auto item = static_cast<ItemId>(pick_item(rng));
      if (!opts.allow_repeats &&
          std::find(rec.slate.items.begin(), rec.slate.items.end(), item) != rec.slate.items.end())
        continue;
      rec.slate.items.push_back(item);
    }
    rec.response = env.sample_response(rec.slate, rec.user, rng);
    d.records.push_back(std::move(rec));
  }
  if (opts.balance) return dataio::balance_responses(d, rng, report);
  return d;
}

Environment fit_response_model(const Dataset& train, const ResponseModelConfig& cfg,
                               FitReport* report) {
  if (train.empty()) throw ContractError("fit_response_model: empty dataset");
  train.validate();
  Rng rng(cfg.seed);
  auto net = std::make_shared<ResponseNet>(train.item_universe, train.user_count(),
                                           train.slate_size, cfg, rng);
  auto params = net->params();
  numkit::AdamState adam({cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  FitReport rep;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      numkit::zero_grads(params);
      for (std::size_t i = start; i < end; ++i) total += net->loss(train.records[order[i]], true);
      numkit::scale_grads(params, 1.0 / static_cast<double>(end - start));
      numkit::adam_step(adam, params);
    }
    const double mean = total / static_cast<double>(train.size() * train.slate_size);
    if (!std::isfinite(mean)) throw TrainingError("response model loss diverged");
    rep.epoch_loss.push_back(mean);
  }
  if (report) *report = std::move(rep);
  SimConfig shape;
  shape.kind = EnvKind::Learned;
  shape.n_items = train.item_universe;
  shape.n_users = train.user_count();
  shape.emb_dim = cfg.emb_dim;
  shape.pos_offsets.assign(train.slate_size, 0.0);
  return make_learned_environment(std::move(net), shape);
}

}  // namespace slategen::simenv
