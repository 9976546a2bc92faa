#include "slategen/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace slategen::pipeline {

namespace fs = std::filesystem;
using evalkit::format_double;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void note(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

Config Config::parse(std::istream& is) {
  Config c;
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("line " + std::to_string(lineno) + ": unterminated section header");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty section");
      c.sections_[section];
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    if (section.empty())
      throw ConfigError("line " + std::to_string(lineno) + ": key outside of a section");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    c.sections_[section][key] = trim(line.substr(eq + 1));
  }
  return c;
}

Config Config::parse_string(const std::string& text) {
  std::istringstream is(text);
  return parse(is);
}

Config Config::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path);
  return parse(is);
}

bool Config::has(const std::string& section, const std::string& key) const {
  return get(section, key).has_value();
}

std::optional<std::string> Config::get(const std::string& section, const std::string& key) const {
  const auto s = sections_.find(section);
  if (s == sections_.end()) return std::nullopt;
  const auto k = s->second.find(key);
  if (k == s->second.end()) return std::nullopt;
  return k->second;
}

void Config::set(const std::string& section, const std::string& key, const std::string& value) {
  sections_[section][key] = value;
}

std::string Config::to_string() const {
  std::ostringstream os;
  for (const auto& [section, kv] : sections_) {
    os << '[' << section << "]\n";
    for (const auto& [k, v] : kv) os << k << " = " << v << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Settings

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::ListCvae: return "list";
    case ModelKind::PivotCvae: return "pivot";
    case ModelKind::MF: return "mf";
    case ModelKind::NeuMF: return "neumf";
    case ModelKind::MfMmr: return "mmr";
    case ModelKind::Random: return "random";
  }
  return "?";
}

ModelKind model_kind_from_string(const std::string& s) {
  for (auto k : {ModelKind::ListCvae, ModelKind::PivotCvae, ModelKind::MF, ModelKind::NeuMF,
                 ModelKind::MfMmr, ModelKind::Random})
    if (to_string(k) == s) return k;
  throw ConfigError("unknown model kind '" + s + "'");
}

std::string ModelSettings::spec_name() const {
  std::string name = nongreedy ? "nongreedy-" : "";
  name += to_string(kind);
  if (kind == ModelKind::PivotCvae) name += ":" + models::to_string(variant);
  return name;
}

ModelSettings parse_model_spec(const std::string& spec, const ModelSettings& base) {
  ModelSettings m = base;
  std::string rest = spec;
  m.nongreedy = false;
  if (rest.rfind("nongreedy-", 0) == 0) {
    m.nongreedy = true;
    rest = rest.substr(10);
  }
  const auto colon = rest.find(':');
  m.kind = model_kind_from_string(rest.substr(0, colon));
  if (colon != std::string::npos) {
    if (m.kind != ModelKind::PivotCvae) throw ConfigError("only pivot models take a variant");
    try {
      m.variant = models::pivot_variant_from_string(rest.substr(colon + 1));
    } catch (const ContractError& e) {
      throw ConfigError(e.what());
    }
  }
  return m;
}

namespace {

class SectionReader {
 public:
  SectionReader(const Config& c, std::string section) : c_(c), section_(std::move(section)) {}

  std::optional<std::string> raw(const std::string& key) {
    used_.insert(key);
    return c_.get(section_, key);
  }

  void str(const std::string& key, std::string& out) {
    if (auto v = raw(key)) out = *v;
  }

  template <typename T>
  void integer(const std::string& key, T& out) {
    auto v = raw(key);
    if (!v) return;
    T parsed{};
    auto [ptr, ec] = std::from_chars(v->data(), v->data() + v->size(), parsed);
    if (ec != std::errc() || ptr != v->data() + v->size()) fail(key, *v, "an integer");
    out = parsed;
  }

  void real(const std::string& key, double& out) {
    auto v = raw(key);
    if (!v) return;
    out = parse_real(key, *v);
  }

  void boolean(const std::string& key, bool& out) {
    auto v = raw(key);
    if (!v) return;
    if (*v == "1" || *v == "true" || *v == "yes" || *v == "on") out = true;
    else if (*v == "0" || *v == "false" || *v == "no" || *v == "off") out = false;
    else fail(key, *v, "a boolean");
  }

  void reals(const std::string& key, std::vector<double>& out) {
    auto v = raw(key);
    if (!v) return;
    out.clear();
    for (const auto& item : split_list(*v)) out.push_back(parse_real(key, item));
  }

  void strings(const std::string& key, std::vector<std::string>& out) {
    if (auto v = raw(key)) out = split_list(*v);
  }

  void check_unknown() const {
    const auto s = c_.sections().find(section_);
    if (s == c_.sections().end()) return;
    for (const auto& [k, v] : s->second)
      if (!used_.count(k)) throw ConfigError("unknown key [" + section_ + "] " + k);
  }

 private:
  double parse_real(const std::string& key, const std::string& v) {
    double parsed = 0.0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), parsed);
    if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(parsed))
      fail(key, v, "a finite number");
    return parsed;
  }

  [[noreturn]] void fail(const std::string& key, const std::string& v, const char* what) {
    throw ConfigError("[" + section_ + "] " + key + " = '" + v + "' is not " + what);
  }

  const Config& c_;
  std::string section_;
  std::set<std::string> used_;
};

}  // namespace

Settings resolve_settings(const Config& cfg, std::optional<std::uint64_t> seed_override) {
  static const std::set<std::string> kSections{"sim", "data", "model", "train", "eval", "sweep"};
  for (const auto& [name, kv] : cfg.sections())
    if (!kSections.count(name)) throw ConfigError("unknown section [" + name + "]");

  Settings s;
  {
    SectionReader r(cfg, "sim");
    std::string kind = simenv::to_string(s.sim.kind);
    r.str("kind", kind);
    try {
      s.sim.kind = simenv::env_kind_from_string(kind);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("[sim] kind: ") + e.what());
    }
    if (s.sim.kind == simenv::EnvKind::Learned)
      throw ConfigError("[sim] kind must name a simulator; learned environments come from data");
    r.integer("n_items", s.sim.n_items);
    r.integer("n_users", s.sim.n_users);
    r.integer("emb_dim", s.sim.emb_dim);
    r.reals("pos_offsets", s.sim.pos_offsets);
    r.real("pos_noise_std", s.sim.pos_noise_std);
    r.real("pos_weight", s.sim.pos_weight);
    r.real("relation_weight", s.sim.relation_weight);
    r.real("vector_std", s.sim.vector_std);
    r.real("bias_std", s.sim.bias_std);
    r.real("global_bias", s.sim.global_bias);
    s.sim_seed_given = cfg.has("sim", "seed");
    r.integer("seed", s.sim.seed);
    r.str("env_path", s.env_path);
    r.check_unknown();
    try {
      s.sim.validate();
    } catch (const std::exception& e) {
      throw ConfigError(std::string("[sim] ") + e.what());
    }
  }
  {
    SectionReader r(cfg, "data");
    std::string source = "simulate";
    r.str("source", source);
    if (source == "simulate") s.data.source = DataSource::Simulate;
    else if (source == "file") s.data.source = DataSource::File;
    else if (source == "log") s.data.source = DataSource::Log;
    else throw ConfigError("[data] source must be simulate, file or log");
    r.str("path", s.data.path);
    r.integer("n_slates", s.data.n_slates);
    std::vector<double> split(s.data.split.begin(), s.data.split.end());
    r.reals("split", split);
    if (split.size() != 3) throw ConfigError("[data] split needs three fractions");
    std::copy(split.begin(), split.end(), s.data.split.begin());
    const double total = split[0] + split[1] + split[2];
    if (std::abs(total - 1.0) > 1e-9 || *std::min_element(split.begin(), split.end()) < 0.0)
      throw ConfigError("[data] split fractions must be non-negative and sum to 1");
    r.boolean("balance", s.data.balance);
    r.boolean("allow_repeats", s.data.allow_repeats);
    r.integer("positive_threshold", s.data.positive_threshold);
    r.integer("slate_size", s.data.slate_size);
    std::string emb = "explicit";
    r.str("embeddings", emb);
    if (emb == "explicit") s.data.pretrained_embeddings = false;
    else if (emb == "pretrained") s.data.pretrained_embeddings = true;
    else throw ConfigError("[data] embeddings must be explicit or pretrained");
    r.check_unknown();
    if (s.data.source != DataSource::Simulate && s.data.path.empty())
      throw ConfigError("[data] path is required for file and log sources");
    if (s.data.source == DataSource::Simulate && s.data.n_slates == 0)
      throw ConfigError("[data] n_slates must be positive");
  }
  {
    SectionReader r(cfg, "model");
    std::string kind = to_string(s.model.kind);
    r.str("kind", kind);
    s.model.kind = model_kind_from_string(kind);
    if (auto v = r.raw("variant")) {
      try {
        s.model.variant = models::pivot_variant_from_string(*v);
      } catch (const ContractError& e) {
        throw ConfigError(std::string("[model] ") + e.what());
      }
    }
    r.integer("latent_dim", s.model.latent_dim);
    r.integer("hidden", s.model.hidden);
    r.real("beta", s.model.beta);
    r.boolean("personalized", s.model.personalized);
    r.boolean("nongreedy", s.model.nongreedy);
    r.real("temperature", s.model.temperature);
    r.boolean("distinct_items", s.model.distinct_items);
    r.real("mmr_lambda", s.model.mmr_lambda);
    r.boolean("mmr_classic", s.model.mmr_classic);
    r.check_unknown();
    if (s.model.beta < 0.0) throw ConfigError("[model] beta must be non-negative");
    if (s.model.mmr_lambda < 0.0 || s.model.mmr_lambda > 1.0)
      throw ConfigError("[model] mmr_lambda must lie in [0, 1]");
    if (s.model.temperature <= 0.0) throw ConfigError("[model] temperature must be positive");
  }
  {
    SectionReader r(cfg, "train");
    r.integer("epochs", s.train.epochs);
    r.integer("batch", s.train.batch);
    r.real("lr", s.train.lr);
    r.real("weight_decay", s.train.weight_decay);
    r.integer("negatives", s.train.negatives);
    r.boolean("convergence", s.train.convergence);
    r.integer("convergence_samples", s.train.convergence_samples);
    r.integer("ranker_epochs", s.train.ranker_epochs);
    r.real("ranker_lr", s.train.ranker_lr);
    r.integer("response_epochs", s.train.response_epochs);
    r.check_unknown();
    if (s.train.batch == 0 || s.train.negatives == 0)
      throw ConfigError("[train] batch and negatives must be positive");
    if (s.train.lr <= 0.0 || s.train.ranker_lr <= 0.0)
      throw ConfigError("[train] learning rates must be positive");
  }
  {
    SectionReader r(cfg, "eval");
    r.integer("n_samples", s.eval.n_samples);
    r.integer("ranking_samples", s.eval.ranking_samples);
    r.boolean("ild_normalized", s.eval.ild_normalized);
    r.integer("max_users", s.eval.max_users);
    r.check_unknown();
    if (s.eval.n_samples == 0) throw ConfigError("[eval] n_samples must be positive");
  }
  {
    SectionReader r(cfg, "sweep");
    r.reals("betas", s.sweep.betas);
    r.boolean("fine_grid", s.sweep.fine_grid);
    r.integer("replicates", s.sweep.replicates);
    r.strings("models", s.sweep.models);
    r.check_unknown();
    for (double b : s.sweep.betas)
      if (b <= 0.0) throw ConfigError("[sweep] betas must be positive");
    if (s.sweep.replicates == 0) throw ConfigError("[sweep] replicates must be positive");
    for (const auto& m : s.sweep.models) parse_model_spec(m, s.model);
  }
  if (seed_override) s.seed = *seed_override;
  if (!s.sim_seed_given) s.sim.seed = mix_seed(s.seed, 1);
  return s;
}

std::vector<double> default_beta_grid(bool fine_grid) {
  std::vector<double> grid;
  const double lo = std::log(1e-5), hi = std::log(30.0);
  for (int i = 0; i < 13; ++i) grid.push_back(std::exp(lo + (hi - lo) * i / 12.0));
  if (fine_grid) {
    const double flo = std::log(1e-3), fhi = std::log(1e-2);
    for (int i = 0; i < 5; ++i) grid.push_back(std::exp(flo + (fhi - flo) * i / 4.0));
  }
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  return grid;
}

// ---------------------------------------------------------------------------
// Context

Context prepare_context(const Settings& s, const Logger& log) {
  Context ctx;
  std::shared_ptr<simenv::Environment> env;
  if (!s.env_path.empty()) {
    env = std::make_shared<simenv::Environment>(simenv::Environment::load(s.env_path));
    note(log, "loaded environment " + s.env_path + " (" + simenv::to_string(env->kind()) + ")");
  } else if (s.data.source == DataSource::Simulate) {
    env = std::make_shared<simenv::Environment>(simenv::build_environment(s.sim));
    note(log, "built " + simenv::to_string(s.sim.kind) + " environment: " +
                  std::to_string(s.sim.n_items) + " items, " + std::to_string(s.sim.n_users) +
                  " users");
  }

  switch (s.data.source) {
    case DataSource::Simulate: {
      Rng rng(mix_seed(s.seed, 2));
      simenv::GenerateOptions go;
      go.allow_repeats = s.data.allow_repeats;
      go.balance = false;
      ctx.raw = simenv::generate_dataset(*env, s.data.n_slates, rng, go);
      break;
    }
    case DataSource::File:
      ctx.raw = dataio::load_dataset(s.data.path);
      break;
    case DataSource::Log: {
      std::ifstream is(s.data.path);
      if (!is) throw std::runtime_error("cannot open " + s.data.path);
      const auto interactions = dataio::parse_interaction_log(is);
      ctx.raw = dataio::sessions_to_slates(interactions, s.data.slate_size,
                                           s.data.positive_threshold);
      break;
    }
  }
  ctx.raw.validate();
  if (ctx.raw.empty()) throw std::runtime_error("dataset is empty");
  note(log, "dataset: " + std::to_string(ctx.raw.size()) + " slates");

  ctx.split = dataio::split_dataset(ctx.raw, s.data.split, mix_seed(s.seed, 3));
  note(log, "split sizes " + std::to_string(ctx.split.train.size()) + "/" +
                std::to_string(ctx.split.val.size()) + "/" + std::to_string(ctx.split.test.size()));

  if (!env) {
    simenv::ResponseModelConfig rc;
    rc.epochs = s.train.response_epochs;
    rc.seed = mix_seed(s.seed, 7);
    env = std::make_shared<simenv::Environment>(
        simenv::fit_response_model(ctx.split.train, rc));
    note(log, "fitted response model on the training split");
  }
  ctx.env = env;

  if (s.data.balance) {
    Rng rng(mix_seed(s.seed, 4));
    ctx.split.train = dataio::balance_responses(ctx.split.train, rng, &ctx.balance);
    for (const auto& w : ctx.balance.warnings) note(log, "balance: " + w);
    note(log, "balanced training split to " + std::to_string(ctx.split.train.size()) + " slates");
  }

  if (!s.data.pretrained_embeddings && env->kind() != simenv::EnvKind::Learned) {
    ctx.bank = std::make_shared<models::EmbeddingBank>(models::bank_from_environment(*env));
  } else {
    models::RankerConfig rc;
    rc.max_epochs = s.train.ranker_epochs;
    rc.lr = s.train.ranker_lr;
    rc.weight_decay = s.train.weight_decay;
    rc.seed = mix_seed(s.seed, 8);
    ctx.bank = std::make_shared<models::EmbeddingBank>(
        models::pretrain_embeddings(ctx.split.train, rc));
    note(log, "pretrained embeddings with biased MF");
  }

  std::size_t n_users = env->has_users() ? env->n_users() : 0;
  if (ctx.bank->has_users()) n_users = std::min(n_users, ctx.bank->user_table->rows);
  if (s.eval.max_users) n_users = std::min(n_users, s.eval.max_users);
  if (n_users == 0) ctx.eval_users.emplace_back(std::nullopt);
  for (std::size_t u = 0; u < n_users; ++u) ctx.eval_users.emplace_back(static_cast<UserId>(u));
  return ctx;
}

// ---------------------------------------------------------------------------
// Models

TrainedModel wrap_cvae(std::shared_ptr<models::SlateCvae> model, const ModelSettings& m) {
  TrainedModel out;
  out.cvae = std::move(model);
  std::shared_ptr<const models::SlatePolicy> policy =
      std::make_shared<models::CvaePolicy>(out.cvae);
  if (m.nongreedy)
    policy = std::make_shared<models::NonGreedyPolicy>(policy, out.cvae->bank_ptr(), 0,
                                                       m.temperature);
  out.policy = std::move(policy);
  return out;
}

TrainedModel train_model(const ModelSettings& m, const TrainSettings& t, const Context& ctx,
                         std::uint64_t seed, const Logger& log) {
  const auto& train = ctx.split.train;
  const std::size_t k = train.slate_size;
  TrainedModel out;
  std::shared_ptr<const models::SlatePolicy> policy;

  if (m.is_cvae()) {
    models::CvaeConfig cc;
    cc.arch = m.kind == ModelKind::ListCvae ? models::CvaeArch::List : models::CvaeArch::Pivot;
    cc.variant = m.variant;
    cc.latent_dim = m.latent_dim;
    cc.hidden = m.hidden;
    cc.slate_size = k;
    cc.beta = m.beta;
    cc.personalized = m.personalized && ctx.bank->has_users() && train.has_users();
    cc.temperature = m.temperature;
    cc.distinct_items = m.distinct_items;
    Rng init(mix_seed(seed, 1));
    auto model = std::make_shared<models::SlateCvae>(cc, ctx.bank, init);

    models::CvaeTrainConfig tc;
    tc.epochs = t.epochs;
    tc.batch = t.batch;
    tc.negatives = t.negatives;
    tc.lr = t.lr;
    tc.weight_decay = t.weight_decay;
    tc.seed = mix_seed(seed, 2);

    models::ConvergenceMonitor monitor;
    const models::CvaePolicy probe(model);
    auto on_epoch = [&](const models::EpochStats& st) {
      std::ostringstream msg;
      msg << cc.label() << " beta=" << format_double(cc.beta) << " epoch " << st.epoch
          << " loss " << st.loss << " recon " << st.recon << " kl " << st.kl;
      if (!t.convergence) {
        note(log, msg.str());
        return false;
      }
      const double v = evalkit::enc(probe, *ctx.env, ctx.eval_users, t.convergence_samples,
                                    mix_seed(seed, 3));
      msg << " val_enc " << v;
      note(log, msg.str());
      return monitor.update(v);
    };
    auto history = models::train_cvae(*model, train, tc, on_epoch);
    out = wrap_cvae(std::move(model), m);
    out.history = std::move(history);
    return out;
  }

  models::RankerConfig rc;
  rc.max_epochs = t.ranker_epochs;
  rc.lr = t.ranker_lr;
  rc.weight_decay = t.weight_decay;
  rc.batch = t.batch;
  rc.hidden = m.hidden;
  rc.seed = mix_seed(seed, 4);
  switch (m.kind) {
    case ModelKind::MF:
    case ModelKind::NeuMF:
    case ModelKind::MfMmr: {
      const auto kind = m.kind == ModelKind::NeuMF ? models::RankerKind::NeuMF
                                                   : models::RankerKind::MF;
      models::RankerHistory hist;
      out.ranker = std::make_shared<models::PointwiseRanker>(
          models::train_pointwise_ranker(kind, train, &ctx.split.val, rc, &hist));
      note(log, models::to_string(kind) + " trained for " + std::to_string(hist.train_loss.size()) +
                    " epochs, best epoch " + std::to_string(hist.best_epoch));
      if (m.kind == ModelKind::MfMmr)
        policy = std::make_shared<models::MmrPolicy>(
            out.ranker, ctx.bank, k, models::MmrOptions{m.mmr_lambda, m.mmr_classic});
      else
        policy = std::make_shared<models::TopKPolicy>(out.ranker, k);
      break;
    }
    case ModelKind::Random:
      policy = std::make_shared<models::UniformRandomPolicy>(ctx.bank->n_items(), k);
      break;
    default:
      break;
  }
  if (m.nongreedy)
    policy = std::make_shared<models::NonGreedyPolicy>(policy, ctx.bank, 0, m.temperature);
  out.policy = std::move(policy);
  return out;
}

evalkit::MetricsReport evaluate_model(const TrainedModel& model, const ModelSettings& m,
                                      const EvalSettings& e, const Context& ctx,
                                      std::uint64_t seed, const std::string& dataset_label) {
  evalkit::EvalOptions eo;
  eo.n_samples = e.n_samples;
  eo.ranking_samples = e.ranking_samples;
  eo.seed = seed;
  eo.ild_normalized = e.ild_normalized;

  // Test slates whose user the embedding bank does not know cannot be
  // conditioned on; they are left out of the ranking metrics.
  const dataio::Dataset* test = &ctx.split.test;
  dataio::Dataset known;
  if (ctx.bank->has_users()) {
    known.slate_size = test->slate_size;
    known.item_universe = test->item_universe;
    for (const auto& rec : test->records)
      if (!rec.user || *rec.user < ctx.bank->user_table->rows) known.records.push_back(rec);
    test = &known;
  }
  auto r = evalkit::evaluate(*model.policy, *ctx.env, *ctx.bank, ctx.eval_users, test, eo);
  r.model = m.spec_name();
  r.dataset = dataset_label;
  r.beta = m.is_cvae() ? m.beta : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Manifest

std::string version_string() { return "slategen 0.1.0"; }

std::string RunManifest::to_string() const {
  std::ostringstream os;
  os << "command: " << command << "\n"
     << "version: " << version << "\n"
     << "seed: " << seed << "\n"
     << "status: " << (failed_stage.empty() ? "ok" : "failed at " + failed_stage) << "\n";
  os.setf(std::ios::fixed);
  os.precision(3);
  os << "wall_seconds: " << wall_seconds << "\n";
  for (const auto& [k, v] : notes) os << "note." << k << ": " << v << "\n";
  for (const auto& [label, path] : outputs) os << "output." << label << ": " << path << "\n";
  os << "config:\n" << config_snapshot;
  return os.str();
}

void RunManifest::write(const std::string& path) const { write_text(path, to_string()); }

void write_text(const std::string& path, const std::string& text) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << text;
  if (!os) throw std::runtime_error("error writing " + path);
}

RunManifest run_pipeline(const Settings& s, const std::string& config_snapshot,
                         const RunOptions& opts) {
  const auto t0 = std::chrono::steady_clock::now();
  RunManifest man;
  man.command = opts.command;
  man.config_snapshot = config_snapshot;
  man.seed = s.seed;
  man.version = version_string();
  const fs::path out(opts.out_dir);
  fs::create_directories(out);
  auto finish = [&] {
    man.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    man.write((out / "manifest.txt").string());
  };

  std::string stage;
  try {
    stage = "prepare";
    const Context ctx = prepare_context(s, opts.log);
    man.notes.emplace_back("split_sizes", std::to_string(ctx.split.train.size()) + "/" +
                                              std::to_string(ctx.split.val.size()) + "/" +
                                              std::to_string(ctx.split.test.size()));
    man.notes.emplace_back("environment", simenv::to_string(ctx.env->kind()));

    stage = "write-data";
    for (const auto& [name, part] :
         {std::pair<std::string, const dataio::Dataset*>{"train", &ctx.split.train},
          {"val", &ctx.split.val},
          {"test", &ctx.split.test}}) {
      const auto path = (out / (name + ".tsv")).string();
      dataio::save_dataset(path, *part);
      man.outputs.emplace_back(name, path);
    }
    const auto env_path = (out / "env.bin").string();
    ctx.env->save(env_path);
    man.outputs.emplace_back("environment", env_path);
    const auto bank_path = (out / "bank.bin").string();
    ctx.bank->save(bank_path);
    man.outputs.emplace_back("embeddings", bank_path);

    stage = "train";
    const auto model = train_model(s.model, s.train, ctx, mix_seed(s.seed, 5), opts.log);
    if (model.cvae || model.ranker) {
      const auto model_path = (out / "model.bin").string();
      if (model.cvae) model.cvae->save(model_path);
      else model.ranker->save(model_path);
      man.outputs.emplace_back("model", model_path);
    }

    stage = "evaluate";
    const auto report = evaluate_model(model, s.model, s.eval, ctx, mix_seed(s.seed, 6),
                                       simenv::to_string(ctx.env->kind()));

    stage = "report";
    const auto metrics_path = (out / "metrics.csv").string();
    write_text(metrics_path,
               evalkit::metrics_csv_header() + "\n" + evalkit::metrics_csv_row(report) + "\n");
    man.outputs.emplace_back("metrics", metrics_path);
  } catch (const std::exception& e) {
    man.failed_stage = stage;
    man.notes.emplace_back("error", e.what());
    finish();
    throw StageError(stage, e.what());
  }
  finish();
  return man;
}

// ---------------------------------------------------------------------------
// Sweep

std::string SweepReport::to_csv() const {
  std::ostringstream os;
  os << "model,beta,replicate,seed,n_samples,metric,value\n";
  for (const auto& r : rows)
    os << r.model << ',' << format_double(r.beta) << ',' << r.replicate << ',' << r.seed << ','
       << r.n_samples << ',' << r.metric << ',' << format_double(r.value) << '\n';
  return os.str();
}

std::optional<double> SweepReport::mean(const std::string& model, double beta,
                                        const std::string& metric) const {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& r : rows)
    if (r.model == model && r.beta == beta && r.metric == metric) {
      sum += r.value;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / static_cast<double>(n);
}

SweepReport run_beta_sweep(const Settings& s, const Context& ctx, std::size_t workers,
                           const std::string& z_dump_dir, const Logger& log) {
  SweepReport rep;
  rep.betas = s.sweep.betas.empty() ? default_beta_grid(s.sweep.fine_grid) : s.sweep.betas;
  std::sort(rep.betas.begin(), rep.betas.end());
  rep.betas.erase(std::unique(rep.betas.begin(), rep.betas.end()), rep.betas.end());

  struct Cell {
    ModelSettings model;
    std::size_t beta_index;
    std::size_t replicate;
    std::uint64_t seed;
  };
  std::vector<Cell> cells;
  for (std::size_t b = 0; b < rep.betas.size(); ++b)
    for (const auto& spec : s.sweep.models) {
      ModelSettings m = parse_model_spec(spec, s.model);
      m.beta = rep.betas[b];
      for (std::size_t r = 0; r < s.sweep.replicates; ++r)
        cells.push_back({m, b, r, mix_seed(mix_seed(mix_seed(s.seed, 0x53574545ULL), b), r)});
    }

  std::mutex log_mu;
  Logger safe_log;
  if (log)
    safe_log = [&](const std::string& msg) {
      std::lock_guard<std::mutex> lock(log_mu);
      log(msg);
    };

  std::vector<std::optional<evalkit::MetricsReport>> results(cells.size());
  std::vector<std::string> errors(cells.size());
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const auto& c = cells[i];
      try {
        const auto model = train_model(c.model, s.train, ctx, c.seed, safe_log);
        results[i] = evaluate_model(model, c.model, s.eval, ctx, mix_seed(c.seed, 6),
                                    simenv::to_string(ctx.env->kind()));
        results[i]->seed = c.seed;
        if (!z_dump_dir.empty() && c.replicate == 0 && model.cvae) {
          std::string name = c.model.spec_name();
          std::replace(name.begin(), name.end(), ':', '_');
          write_text((fs::path(z_dump_dir) /
                      ("z_" + name + "_beta" + std::to_string(c.beta_index) + ".tsv"))
                         .string(),
                     dump_latents(*model.cvae, ctx.split.test));
        }
        if (safe_log)
          safe_log("cell " + c.model.spec_name() + " beta=" + format_double(c.model.beta) +
                   " rep=" + std::to_string(c.replicate) + " enc=" +
                   format_double(results[i]->enc) +
                   " coverage=" + format_double(results[i]->coverage));
      } catch (const std::exception& e) {
        errors[i] = e.what();
        if (safe_log) safe_log("cell failed: " + errors[i]);
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(workers, cells.size()));
  if (n_threads == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }

  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& c = cells[i];
    if (!results[i]) {
      rep.failures.push_back({c.model.spec_name(), c.model.beta, c.replicate, errors[i]});
      continue;
    }
    const auto& r = *results[i];
    for (const auto& [metric, value] : evalkit::metric_values(r))
      rep.rows.push_back({r.model, r.beta, c.replicate, c.seed, r.n_samples, metric, value});
    rep.reports.push_back(r);
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Dumps

std::string emit_reconstruction_scan(const models::SlateCvae& model, const dataio::Dataset& d,
                                     const simenv::Environment& env) {
  std::ostringstream os;
  os << "observed_clicks,enc_original,enc_reconstructed\n";
  for (const auto& rec : d.records) {
    const auto recon = model.reconstruct(rec);
    os << rec.response.clicks() << ',' << format_double(env.expected_clicks(rec.slate, rec.user))
       << ',' << format_double(env.expected_clicks(recon, rec.user)) << '\n';
  }
  return os.str();
}

std::string dump_latents(const models::SlateCvae& model, const dataio::Dataset& d) {
  std::ostringstream os;
  for (const auto& rec : d.records) {
    const auto q = model.posterior(rec.slate, model.condition(rec.response, rec.user));
    if (rec.user) os << *rec.user;
    else os << '-';
    os << '\t';
    for (std::size_t k = 0; k < rec.slate.size(); ++k) os << (k ? "," : "") << rec.slate[k];
    os << '\t';
    for (auto v : rec.response.r) os << static_cast<char>('0' + v);
    os << '\t';
    for (std::size_t i = 0; i < q.mean.size(); ++i) os << (i ? "," : "") << format_double(q.mean[i]);
    os << '\n';
  }
  return os.str();
}

}  // namespace slategen::pipeline
