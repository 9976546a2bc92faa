#include "slategen/cvae.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

namespace slategen::models {

using numkit::MlpCache;
using numkit::ParamRef;

std::string to_string(PivotVariant v) {
  switch (v) {
    case PivotVariant::GT_PI: return "GT-PI";
    case PivotVariant::SGT_PI: return "SGT-PI";
    case PivotVariant::GT_SPI: return "GT-SPI";
    case PivotVariant::SGT_SPI: return "SGT-SPI";
  }
  return "?";
}

PivotVariant pivot_variant_from_string(const std::string& s) {
  for (auto v : {PivotVariant::GT_PI, PivotVariant::SGT_PI, PivotVariant::GT_SPI,
                 PivotVariant::SGT_SPI})
    if (to_string(v) == s) return v;
  throw ContractError("unknown pivot variant '" + s + "'");
}

bool perturbs_training_pivot(PivotVariant v) {
  return v == PivotVariant::SGT_PI || v == PivotVariant::SGT_SPI;
}

bool perturbs_inference_pivot(PivotVariant v) {
  return v == PivotVariant::GT_SPI || v == PivotVariant::SGT_SPI;
}

std::string CvaeConfig::label() const {
  if (arch == CvaeArch::List) return "List-CVAE";
  return "Pivot-CVAE (" + to_string(variant) + ")";
}

namespace {

std::vector<double> concat(std::initializer_list<std::span<const double>> parts) {
  std::vector<double> out;
  for (auto p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

SlateCvae::SlateCvae(const CvaeConfig& cfg, std::shared_ptr<const EmbeddingBank> bank, Rng& rng)
    : cfg_(cfg), bank_(std::move(bank)) {
  if (!bank_) throw ContractError("CVAE needs an embedding bank");
  if (cfg_.slate_size < 1 || cfg_.latent_dim < 1 || cfg_.hidden < 1)
    throw ContractError("CVAE sizes must be positive");
  if (cfg_.arch == CvaeArch::Pivot && cfg_.slate_size < 2)
    throw ContractError("a pivot model needs slates of at least 2 items");
  if (cfg_.personalized && !bank_->has_users())
    throw ContractError("personalized CVAE needs user embeddings");
  const std::size_t e = bank_->dim();
  const std::size_t k = cfg_.slate_size;
  const std::size_t m = cfg_.latent_dim;
  const std::size_t cd = condition_dim();
  encoder_ = numkit::Mlp(k * e + cd, cfg_.hidden, 2 * m, rng);
  prior_net_ = numkit::Mlp(cd, cfg_.hidden, 2 * m, rng);
  if (cfg_.arch == CvaeArch::List) {
    decoder_ = numkit::Mlp(m + cd, cfg_.hidden, k * e, rng);
  } else {
    decoder_ = numkit::Mlp(m + cd, cfg_.hidden, e, rng);
    completion_ = numkit::Mlp(e + m + cd, cfg_.hidden, (k - 1) * e, rng);
  }
}

std::size_t SlateCvae::condition_dim() const {
  return cfg_.slate_size + 1 + (cfg_.personalized ? bank_->dim() : 0);
}

ConstraintVector SlateCvae::condition(const dataio::ResponseVector& r,
                                      std::optional<UserId> user) const {
  if (r.size() != cfg_.slate_size) throw ContractError("response length differs from slate size");
  if (!cfg_.personalized) return dataio::make_constraint(r);
  if (!user) throw ContractError("personalized CVAE needs a user id");
  return dataio::make_constraint(r, bank_->user(user));
}

ConstraintVector SlateCvae::ideal_condition(std::optional<UserId> user) const {
  return condition(dataio::ideal_response(cfg_.slate_size), user);
}

std::vector<double> SlateCvae::encoder_input(const Slate& s, const ConstraintVector& c) const {
  if (s.size() != cfg_.slate_size) throw ContractError("slate length differs from slate size");
  if (c.size() != condition_dim()) throw ContractError("condition length mismatch");
  std::vector<double> x;
  x.reserve(encoder_.in_dim());
  for (ItemId i : s.items) {
    if (i >= bank_->n_items()) throw std::out_of_range("item id outside the embedding bank");
    const auto v = bank_->item(i);
    x.insert(x.end(), v.begin(), v.end());
  }
  x.insert(x.end(), c.response_onehot.begin(), c.response_onehot.end());
  x.insert(x.end(), c.user_part.begin(), c.user_part.end());
  return x;
}

GaussianParams SlateCvae::posterior(const Slate& s, const ConstraintVector& c) const {
  return numkit::split_gaussian(encoder_.forward(encoder_input(s, c)));
}

GaussianParams SlateCvae::prior(const ConstraintVector& c) const {
  if (c.size() != condition_dim()) throw ContractError("condition length mismatch");
  return numkit::split_gaussian(prior_net_.forward(c.flatten()));
}

std::vector<double> SlateCvae::decode_pivot(std::span<const double> z,
                                            const ConstraintVector& c) const {
  if (cfg_.arch != CvaeArch::Pivot) throw ContractError("decode_pivot needs a pivot model");
  const auto cf = c.flatten();
  return decoder_.forward(concat({z, cf}));
}

std::vector<std::vector<double>> SlateCvae::decode(std::span<const double> z,
                                                   const ConstraintVector& c,
                                                   std::optional<ItemId> pivot) const {
  if (z.size() != cfg_.latent_dim) throw ContractError("latent length mismatch");
  if (c.size() != condition_dim()) throw ContractError("condition length mismatch");
  const std::size_t e = bank_->dim();
  const auto cf = c.flatten();
  std::vector<std::vector<double>> out;
  auto split_into = [&](const std::vector<double>& flat) {
    for (std::size_t off = 0; off < flat.size(); off += e)
      out.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(off),
                       flat.begin() + static_cast<std::ptrdiff_t>(off + e));
  };
  if (cfg_.arch == CvaeArch::List) {
    split_into(decoder_.forward(concat({z, cf})));
    return out;
  }
  auto x1 = decoder_.forward(concat({z, cf}));
  const ItemId p = pivot.value_or(nearest_item(x1));
  out.push_back(std::move(x1));
  split_into(completion_.forward(concat({bank_->item(p), z, cf})));
  return out;
}

ItemId SlateCvae::nearest_item(std::span<const double> latent) const {
  ItemId best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < bank_->n_items(); ++i) {
    const double s = numkit::dot(latent, bank_->item(static_cast<ItemId>(i)));
    if (s > best_score) {
      best_score = s;
      best = static_cast<ItemId>(i);
    }
  }
  return best;
}

ItemId SlateCvae::pivot_select(std::span<const double> z, const ConstraintVector& c, bool perturb,
                               Rng& rng) const {
  const auto x1 = decode_pivot(z, c);
  return perturb ? sample_similar_item(x1, *bank_, rng, cfg_.temperature) : nearest_item(x1);
}

Slate SlateCvae::generate(const ConstraintVector& c_star, Rng& rng, GenerationTrace* trace) const {
  const auto p = prior(c_star);
  std::vector<double> eps(cfg_.latent_dim);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : eps) v = normal(rng);
  const auto z = numkit::reparameterize(p, eps);

  std::vector<std::vector<double>> latents;
  std::optional<ItemId> pivot;
  if (cfg_.arch == CvaeArch::List) {
    latents = decode(z, c_star);
  } else {
    const auto x1 = decode_pivot(z, c_star);
    pivot = perturbs_inference_pivot(cfg_.variant)
                ? sample_similar_item(x1, *bank_, rng, cfg_.temperature)
                : nearest_item(x1);
    latents = decode(z, c_star, pivot);
  }

  Slate s;
  for (std::size_t k = 0; k < latents.size(); ++k) {
    if (k == 0 && pivot) {
      s.items.push_back(*pivot);
      continue;
    }
    if (!cfg_.distinct_items) {
      s.items.push_back(nearest_item(latents[k]));
      continue;
    }
    ItemId best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < bank_->n_items(); ++i) {
      const auto id = static_cast<ItemId>(i);
      if (std::find(s.items.begin(), s.items.end(), id) != s.items.end()) continue;
      const double v = numkit::dot(latents[k], bank_->item(id));
      if (v > best_score) {
        best_score = v;
        best = id;
      }
    }
    s.items.push_back(best);
  }

  if (trace) {
    trace->source = LatentSource::Prior;
    trace->params = p;
    trace->z = z;
    trace->pivot = pivot;
    trace->latent_items = std::move(latents);
  }
  return s;
}

Slate SlateCvae::generate_for_user(std::optional<UserId> user, Rng& rng) const {
  return generate(ideal_condition(user), rng);
}

Slate SlateCvae::reconstruct(const Record& rec) const {
  const auto c = condition(rec.response, rec.user);
  const auto q = posterior(rec.slate, c);
  const auto latents = decode(q.mean, c);
  Slate s;
  for (const auto& x : latents) s.items.push_back(nearest_item(x));
  return s;
}

// ---------------------------------------------------------------------------

LossNoise SlateCvae::draw_noise(const Record& rec, std::size_t n_negatives, Rng& rng) const {
  if (n_negatives == 0) throw ContractError("need at least one negative per slot");
  LossNoise n;
  n.eps.resize(cfg_.latent_dim);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : n.eps) v = normal(rng);
  const std::size_t n_items = bank_->n_items();
  std::uniform_int_distribution<ItemId> pick(0, static_cast<ItemId>(n_items - 1));
  n.negatives.resize(cfg_.slate_size);
  for (std::size_t k = 0; k < cfg_.slate_size; ++k) {
    auto& neg = n.negatives[k];
    neg.reserve(n_negatives);
    while (neg.size() < n_negatives) {
      const ItemId i = pick(rng);
      if (n_items > 1 && i == rec.slate[k]) continue;
      neg.push_back(i);
    }
  }
  if (cfg_.arch == CvaeArch::Pivot && perturbs_training_pivot(cfg_.variant))
    n.completion_pivot = sample_similar_item(bank_->item(rec.slate[0]), *bank_, rng,
                                             cfg_.temperature);
  return n;
}

LossParts SlateCvae::loss(const Record& rec, const LossNoise& noise, bool accumulate) {
  return loss(rec.slate, condition(rec.response, rec.user), noise, accumulate);
}

LossParts SlateCvae::loss(const Slate& s, const ConstraintVector& c, const LossNoise& noise,
                          bool accumulate) {
  const std::size_t e = bank_->dim();
  const std::size_t k_slots = cfg_.slate_size;
  const std::size_t m = cfg_.latent_dim;
  if (noise.eps.size() != m || noise.negatives.size() != k_slots)
    throw ContractError("loss noise does not match the model");

  MlpCache enc_cache, prior_cache, dec_cache, comp_cache;
  MlpCache* ec = accumulate ? &enc_cache : nullptr;
  MlpCache* pc = accumulate ? &prior_cache : nullptr;
  MlpCache* dc = accumulate ? &dec_cache : nullptr;
  MlpCache* cc = accumulate ? &comp_cache : nullptr;

  const auto enc_out = encoder_.forward(encoder_input(s, c), ec);
  const auto cf = c.flatten();
  const auto prior_out = prior_net_.forward(cf, pc);
  const auto q = numkit::split_gaussian(enc_out);
  const auto p = numkit::split_gaussian(prior_out);
  const auto z = numkit::reparameterize(q, noise.eps);
  const auto dec_in = concat({z, cf});

  // Latent item embeddings for every slot, laid out as K*e.
  std::vector<double> latent;
  std::vector<double> comp_in;
  if (cfg_.arch == CvaeArch::List) {
    latent = decoder_.forward(dec_in, dc);
  } else {
    latent = decoder_.forward(dec_in, dc);
    const ItemId pivot = noise.completion_pivot.value_or(s[0]);
    comp_in = concat({bank_->item(pivot), z, cf});
    const auto rest = completion_.forward(comp_in, cc);
    latent.insert(latent.end(), rest.begin(), rest.end());
  }

  LossParts parts;
  std::vector<double> d_latent(accumulate ? latent.size() : 0, 0.0);
  std::vector<double> neg_logits, d_neg;
  for (std::size_t k = 0; k < k_slots; ++k) {
    const std::span<const double> xk(latent.data() + k * e, e);
    const auto& negs = noise.negatives[k];
    neg_logits.resize(negs.size());
    for (std::size_t j = 0; j < negs.size(); ++j) neg_logits[j] = numkit::dot(xk, bank_->item(negs[j]));
    const double t = numkit::dot(xk, bank_->item(s[k]));
    if (!accumulate) {
      parts.recon += numkit::sampled_softmax_ce(t, neg_logits);
      continue;
    }
    d_neg.assign(negs.size(), 0.0);
    double d_t = 0.0;
    parts.recon += numkit::sampled_softmax_ce(t, neg_logits, d_t, d_neg);
    double* dx = d_latent.data() + k * e;
    const auto vt = bank_->item(s[k]);
    for (std::size_t a = 0; a < e; ++a) dx[a] += d_t * vt[a];
    for (std::size_t j = 0; j < negs.size(); ++j) {
      if (d_neg[j] == 0.0) continue;
      const auto vn = bank_->item(negs[j]);
      for (std::size_t a = 0; a < e; ++a) dx[a] += d_neg[j] * vn[a];
    }
  }
  parts.kl = numkit::gaussian_kl(q, p);
  parts.loss = parts.recon + cfg_.beta * parts.kl;
  if (!std::isfinite(parts.loss)) throw TrainingError("CVAE loss is not finite");
  if (!accumulate) return parts;

  // Backward, in reverse order of the forward pass.
  std::vector<double> dz(m, 0.0);
  std::vector<double> d_dec_in(dec_in.size());
  if (cfg_.arch == CvaeArch::List) {
    decoder_.backward(dec_cache, d_latent, d_dec_in);
    for (std::size_t i = 0; i < m; ++i) dz[i] += d_dec_in[i];
  } else {
    decoder_.backward(dec_cache, std::span<const double>(d_latent.data(), e), d_dec_in);
    for (std::size_t i = 0; i < m; ++i) dz[i] += d_dec_in[i];
    std::vector<double> d_comp_in(comp_in.size());
    completion_.backward(comp_cache,
                         std::span<const double>(d_latent.data() + e, (k_slots - 1) * e),
                         d_comp_in);
    for (std::size_t i = 0; i < m; ++i) dz[i] += d_comp_in[e + i];
  }

  GaussianParams dq{std::vector<double>(m, 0.0), std::vector<double>(m, 0.0)};
  GaussianParams dp{std::vector<double>(m, 0.0), std::vector<double>(m, 0.0)};
  numkit::reparameterize_backward(q, noise.eps, dz, dq);
  numkit::gaussian_kl_backward(q, p, cfg_.beta, dq, dp);

  std::vector<double> d_enc_out(2 * m), d_prior_out(2 * m);
  numkit::split_gaussian_backward(enc_out, dq, d_enc_out);
  numkit::split_gaussian_backward(prior_out, dp, d_prior_out);
  encoder_.backward(enc_cache, d_enc_out, {});
  prior_net_.backward(prior_cache, d_prior_out, {});
  return parts;
}

std::vector<ParamRef> SlateCvae::params() {
  std::vector<ParamRef> out;
  encoder_.collect("encoder", out);
  prior_net_.collect("prior", out);
  if (cfg_.arch == CvaeArch::List) {
    decoder_.collect("decoder", out);
  } else {
    decoder_.collect("pivot", out);
    completion_.collect("completion", out);
  }
  return out;
}

std::size_t SlateCvae::parameter_count() {
  std::size_t n = 0;
  for (const auto& p : params()) n += p.value->size();
  return n;
}

void SlateCvae::zero_grad() { numkit::zero_grads(params()); }

void SlateCvae::save(const std::string& path) const {
  std::vector<numkit::NamedTensor> tensors;
  for (const auto& p : const_cast<SlateCvae*>(this)->params()) tensors.push_back({p.name, p.value});
  numkit::save_params(path, tensors);
  std::ofstream os(path + ".cfg");
  if (!os) throw std::runtime_error("cannot write " + path + ".cfg");
  os << "arch=" << (cfg_.arch == CvaeArch::List ? "list" : "pivot") << "\n"
     << "variant=" << to_string(cfg_.variant) << "\n"
     << "latent_dim=" << cfg_.latent_dim << "\n"
     << "hidden=" << cfg_.hidden << "\n"
     << "slate_size=" << cfg_.slate_size << "\n";
  std::ostringstream beta;
  beta.precision(17);
  beta << cfg_.beta;
  os << "beta=" << beta.str() << "\n"
     << "personalized=" << (cfg_.personalized ? 1 : 0) << "\n"
     << "temperature=" << cfg_.temperature << "\n"
     << "distinct_items=" << (cfg_.distinct_items ? 1 : 0) << "\n";
}

SlateCvae SlateCvae::load(const std::string& path, std::shared_ptr<const EmbeddingBank> bank) {
  std::ifstream is(path + ".cfg");
  if (!is) throw std::runtime_error("cannot open " + path + ".cfg");
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  CvaeConfig cfg;
  cfg.arch = kv.at("arch") == "list" ? CvaeArch::List : CvaeArch::Pivot;
  cfg.variant = pivot_variant_from_string(kv.at("variant"));
  cfg.latent_dim = std::stoul(kv.at("latent_dim"));
  cfg.hidden = std::stoul(kv.at("hidden"));
  cfg.slate_size = std::stoul(kv.at("slate_size"));
  cfg.beta = std::stod(kv.at("beta"));
  cfg.personalized = kv.at("personalized") == "1";
  cfg.temperature = std::stod(kv.at("temperature"));
  cfg.distinct_items = kv.at("distinct_items") == "1";
  Rng rng(0);
  SlateCvae model(cfg, std::move(bank), rng);
  numkit::assign_params(numkit::load_params(path), model.params());
  return model;
}

// ---------------------------------------------------------------------------

std::vector<EpochStats> train_cvae(SlateCvae& model, const dataio::Dataset& train,
                                   const CvaeTrainConfig& cfg, const EpochCallback& on_epoch) {
  if (train.empty()) throw ContractError("cannot train on an empty dataset");
  if (cfg.batch == 0) throw ContractError("batch size must be positive");
  train.validate();
  Rng rng(mix_seed(cfg.seed, 0x43564145ULL));
  auto params = model.params();
  numkit::AdamState adam(numkit::AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay});

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<EpochStats> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    EpochStats st;
    st.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      numkit::zero_grads(params);
      for (std::size_t i = start; i < end; ++i) {
        const auto& rec = train.records[order[i]];
        const auto noise = model.draw_noise(rec, cfg.negatives, rng);
        const auto parts = model.loss(rec, noise, true);
        st.loss += parts.loss;
        st.recon += parts.recon;
        st.kl += parts.kl;
      }
      numkit::scale_grads(params, 1.0 / static_cast<double>(end - start));
      numkit::adam_step(adam, params);
    }
    const double n = static_cast<double>(order.size());
    st.loss /= n;
    st.recon /= n;
    st.kl /= n;
    history.push_back(st);
    if (on_epoch && on_epoch(st)) break;
  }
  return history;
}

bool ConvergenceMonitor::update(double value) {
  values_.push_back(value);
  if (values_.size() < window_) return false;
  const double avg =
      std::accumulate(values_.end() - static_cast<std::ptrdiff_t>(window_), values_.end(), 0.0) /
      static_cast<double>(window_);
  if (last_avg_) {
    const double base = std::max(std::abs(*last_avg_), 1e-12);
    if ((avg - *last_avg_) / base < min_rel_gain_) ++stalls_;
    else stalls_ = 0;
  }
  last_avg_ = avg;
  return converged();
}

}  // namespace slategen::models
