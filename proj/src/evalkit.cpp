#include "slategen/evalkit.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

namespace slategen::evalkit {

namespace {
constexpr std::uint64_t kUniversalStream = ~std::uint64_t{0};
}  // namespace

SampleSet draw_samples(const SlatePolicy& policy, const std::vector<std::optional<UserId>>& users,
                       std::size_t n, std::uint64_t seed) {
  if (n == 0) throw ContractError("need at least one sample per user");
  SampleSet out;
  out.n_per_user = n;
  out.users = users;
  out.slates.resize(users.size());
  for (std::size_t u = 0; u < users.size(); ++u) {
    Rng rng(mix_seed(seed, users[u] ? *users[u] : kUniversalStream));
    auto& dst = out.slates[u];
    if (policy.deterministic()) {
      dst.assign(n, policy.generate(users[u], rng));
      continue;
    }
    dst.reserve(n);
    for (std::size_t i = 0; i < n; ++i) dst.push_back(policy.generate(users[u], rng));
  }
  return out;
}

std::vector<std::optional<UserId>> all_users(const simenv::Environment& env) {
  std::vector<std::optional<UserId>> out;
  if (!env.has_users()) {
    out.emplace_back(std::nullopt);
    return out;
  }
  for (std::size_t u = 0; u < env.n_users(); ++u) out.emplace_back(static_cast<UserId>(u));
  return out;
}

double enc(const SampleSet& samples, const simenv::Environment& env) {
  if (samples.users.empty()) throw ContractError("no users to evaluate");
  double total = 0.0;
  for (std::size_t u = 0; u < samples.users.size(); ++u) {
    const auto& slates = samples.slates[u];
    double per_user = 0.0;
    // Repeated slates (deterministic policies) are evaluated once.
    if (std::all_of(slates.begin(), slates.end(), [&](const Slate& s) { return s == slates[0]; })) {
      per_user = env.expected_clicks(slates[0], samples.users[u]);
    } else {
      for (const auto& s : slates) per_user += env.expected_clicks(s, samples.users[u]);
      per_user /= static_cast<double>(slates.size());
    }
    total += per_user;
  }
  return total / static_cast<double>(samples.users.size());
}

double enc(const SlatePolicy& policy, const simenv::Environment& env,
           const std::vector<std::optional<UserId>>& users, std::size_t n, std::uint64_t seed) {
  return enc(draw_samples(policy, users, n, seed), env);
}

// ---------------------------------------------------------------------------

VarianceParts variance_decomposition(std::span<const Slate> slates, const Tensor2& item_table) {
  if (slates.empty()) throw ContractError("variance of an empty sample set");
  const std::size_t d = item_table.cols;
  std::vector<double> grand(d, 0.0);
  std::vector<std::vector<double>> centroids(slates.size(), std::vector<double>(d, 0.0));
  std::size_t n_items = 0;
  for (std::size_t j = 0; j < slates.size(); ++j) {
    if (slates[j].size() == 0) throw ContractError("empty slate in sample set");
    for (ItemId i : slates[j].items) {
      if (i >= item_table.rows) throw std::out_of_range("item id outside the embedding table");
      const auto v = item_table.row(i);
      for (std::size_t a = 0; a < d; ++a) {
        grand[a] += v[a];
        centroids[j][a] += v[a];
      }
    }
    for (auto& c : centroids[j]) c /= static_cast<double>(slates[j].size());
    n_items += slates[j].size();
  }
  for (auto& g : grand) g /= static_cast<double>(n_items);

  VarianceParts out;
  for (std::size_t j = 0; j < slates.size(); ++j) {
    for (std::size_t a = 0; a < d; ++a) {
      const double diff = centroids[j][a] - grand[a];
      out.slate_mean += diff * diff;
    }
    for (ItemId i : slates[j].items) {
      const auto v = item_table.row(i);
      for (std::size_t a = 0; a < d; ++a) {
        const double dt = v[a] - grand[a];
        const double di = v[a] - centroids[j][a];
        out.total += dt * dt;
        out.intra_slate += di * di;
      }
    }
  }
  out.total /= static_cast<double>(n_items);
  out.intra_slate /= static_cast<double>(n_items);
  out.slate_mean /= static_cast<double>(slates.size());
  return out;
}

VarianceParts variance_decomposition(const SampleSet& samples, const Tensor2& item_table) {
  if (samples.users.empty()) throw ContractError("variance of an empty sample set");
  VarianceParts out;
  for (const auto& slates : samples.slates) {
    const auto v = variance_decomposition(slates, item_table);
    out.total += v.total;
    out.slate_mean += v.slate_mean;
    out.intra_slate += v.intra_slate;
  }
  const double n = static_cast<double>(samples.slates.size());
  out.total /= n;
  out.slate_mean /= n;
  out.intra_slate /= n;
  return out;
}

namespace {

std::size_t distinct_items(std::span<const Slate> slates, std::size_t n_items) {
  if (n_items == 0) throw ContractError("empty item universe");
  std::vector<bool> seen(n_items, false);
  std::size_t distinct = 0;
  for (const auto& s : slates)
    for (ItemId i : s.items) {
      if (i >= n_items) throw std::out_of_range("item id outside the universe");
      if (!seen[i]) {
        seen[i] = true;
        ++distinct;
      }
    }
  return distinct;
}

}  // namespace

double coverage(std::span<const Slate> slates, std::size_t n_items) {
  return static_cast<double>(distinct_items(slates, n_items)) / static_cast<double>(n_items);
}

// Counts are summed exactly and divided once, so equal per-user counts give the
// correctly rounded ratio.
double coverage(const SampleSet& samples, std::size_t n_items) {
  if (samples.users.empty()) return 0.0;
  std::size_t total = 0;
  for (const auto& slates : samples.slates) total += distinct_items(slates, n_items);
  return static_cast<double>(total) /
         (static_cast<double>(samples.slates.size()) * static_cast<double>(n_items));
}

double ild(const Slate& slate, const EmbeddingBank& bank, bool normalized) {
  const std::size_t k = slate.size();
  if (k < 2) throw ContractError("ILD needs at least two items");
  double sum = 0.0;
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t l = 0; l < k; ++l)
      if (i != l) sum += numkit::sigmoid(numkit::dot(bank.item(slate[i]), bank.item(slate[l])));
  if (normalized) sum /= static_cast<double>(k * (k - 1));
  return 1.0 - sum;
}

Summary summarize(std::vector<double> values) {
  Summary s;
  if (values.empty()) return s;
  std::sort(values.begin(), values.end());
  const double n = static_cast<double>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  double ss = 0.0;
  for (double v : values) ss += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(ss / n);
  auto quantile = [&](double q) {
    const double pos = q * (n - 1.0);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
  };
  s.min = values.front();
  s.q25 = quantile(0.25);
  s.median = quantile(0.5);
  s.q75 = quantile(0.75);
  s.max = values.back();
  return s;
}

// ---------------------------------------------------------------------------

HitRecall hit_and_recall(const Dataset& test, const std::vector<std::vector<Slate>>& generated) {
  if (generated.size() != test.size()) throw ContractError("one generation list per test record");
  HitRecall out;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& rec = test.records[i];
    std::set<ItemId> positives;
    for (std::size_t k = 0; k < rec.slate.size(); ++k)
      if (rec.response.r[k]) positives.insert(rec.slate[k]);
    if (positives.empty() || generated[i].empty()) continue;
    double hit = 0.0, recall = 0.0;
    for (const auto& g : generated[i]) {
      std::size_t matched = 0;
      for (ItemId p : positives)
        if (std::find(g.items.begin(), g.items.end(), p) != g.items.end()) ++matched;
      hit += matched > 0 ? 1.0 : 0.0;
      recall += static_cast<double>(matched) / static_cast<double>(positives.size());
    }
    const double n = static_cast<double>(generated[i].size());
    out.hit_rate += hit / n;
    out.recall += recall / n;
    ++out.evaluated;
  }
  if (out.evaluated) {
    out.hit_rate /= static_cast<double>(out.evaluated);
    out.recall /= static_cast<double>(out.evaluated);
  }
  return out;
}

HitRecall hit_and_recall(const SlatePolicy& policy, const Dataset& test, std::size_t n,
                         std::uint64_t seed) {
  if (n == 0) throw ContractError("need at least one generation per test slate");
  std::vector<std::vector<Slate>> generated(test.size());
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& rec = test.records[i];
    if (rec.response.clicks() == 0) continue;
    Rng rng(mix_seed(seed, i));
    const std::size_t reps = policy.deterministic() ? 1 : n;
    for (std::size_t r = 0; r < reps; ++r) generated[i].push_back(policy.generate(rec.user, rng));
  }
  return hit_and_recall(test, generated);
}

MetricsReport evaluate(const SlatePolicy& policy, const simenv::Environment& env,
                       const EmbeddingBank& bank, const std::vector<std::optional<UserId>>& users,
                       const Dataset* test, const EvalOptions& opts) {
  const auto samples = draw_samples(policy, users, opts.n_samples, opts.seed);
  MetricsReport r;
  r.model = policy.name();
  r.n_samples = opts.n_samples;
  r.seed = opts.seed;
  r.enc = enc(samples, env);
  const auto v = variance_decomposition(samples, bank.item_table);
  r.total_var = v.total;
  r.slate_mean_var = v.slate_mean;
  r.intra_slate_var = v.intra_slate;
  r.coverage = coverage(samples, bank.n_items());
  std::vector<double> ilds;
  ilds.reserve(samples.total_slates());
  for (const auto& slates : samples.slates)
    for (const auto& s : slates) ilds.push_back(ild(s, bank, opts.ild_normalized));
  r.ild = summarize(std::move(ilds));
  if (test && !test->empty())
    r.ranking = hit_and_recall(policy, *test, opts.ranking_samples ? opts.ranking_samples
                                                                   : opts.n_samples,
                               mix_seed(opts.seed, 0x484954ULL));
  return r;
}

std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

std::string metrics_csv_header() {
  return "model,dataset,beta,seed,n_samples,enc,total_var,slate_mean_var,intra_slate_var,"
         "coverage,ild_mean,ild_std,ild_min,ild_q25,ild_median,ild_q75,ild_max,hit_rate,recall";
}

std::vector<std::pair<std::string, double>> metric_values(const MetricsReport& r) {
  const double nan = std::nan("");
  return {{"enc", r.enc},
          {"total_var", r.total_var},
          {"slate_mean_var", r.slate_mean_var},
          {"intra_slate_var", r.intra_slate_var},
          {"coverage", r.coverage},
          {"ild_mean", r.ild.mean},
          {"ild_std", r.ild.std},
          {"ild_min", r.ild.min},
          {"ild_q25", r.ild.q25},
          {"ild_median", r.ild.median},
          {"ild_q75", r.ild.q75},
          {"ild_max", r.ild.max},
          {"hit_rate", r.ranking ? r.ranking->hit_rate : nan},
          {"recall", r.ranking ? r.ranking->recall : nan}};
}

std::string metrics_csv_row(const MetricsReport& r) {
  std::ostringstream os;
  os << r.model << ',' << r.dataset << ',' << format_double(r.beta) << ',' << r.seed << ','
     << r.n_samples;
  for (const auto& [name, value] : metric_values(r)) os << ',' << format_double(value);
  return os.str();
}

// ---------------------------------------------------------------------------

std::string PerturbationTable::to_csv() const {
  std::ostringstream os;
  os << "group,a,bin_low,bin_high,count\n";
  for (const auto& r : rows)
    os << r.group << ',' << r.a << ',' << format_double(r.bin_low) << ','
       << format_double(r.bin_high) << ',' << r.count << '\n';
  return os.str();
}

std::string PerturbationTable::summary_csv() const {
  std::ostringstream os;
  os << "group,a,trials,mean_enc,mean_abs_shift\n";
  for (const auto& s : summary)
    os << s.group << ',' << s.a << ',' << s.trials << ',' << format_double(s.mean_enc) << ','
       << format_double(s.mean_abs_shift) << '\n';
  return os.str();
}

PerturbationTable perturbation_study(const Dataset& d, const simenv::Environment& env,
                                     const EmbeddingBank& bank,
                                     const std::vector<std::size_t>& a_values, Rng& rng,
                                     const PerturbationOptions& opts) {
  const std::size_t k = d.slate_size;
  if (opts.bin_width <= 0.0) throw ContractError("bin width must be positive");
  for (auto a : a_values)
    if (a > k) throw ContractError("cannot perturb more items than the slate holds");

  std::vector<std::vector<std::size_t>> groups(k + 1);
  for (std::size_t i = 0; i < d.size(); ++i) groups[d.records[i].response.clicks()].push_back(i);
  const auto n_bins =
      static_cast<std::size_t>(std::ceil(static_cast<double>(k) / opts.bin_width - 1e-9));

  PerturbationTable table;
  std::vector<std::size_t> positions(k);
  for (std::size_t g = 0; g <= k; ++g) {
    const auto& members = groups[g];
    if (members.empty()) continue;
    for (std::size_t a : a_values) {
      std::vector<std::size_t> counts(n_bins, 0);
      ShiftSummary sum{g, a, 0, 0.0, 0.0};
      const std::size_t trials = opts.trials_per_group ? opts.trials_per_group : members.size();
      std::uniform_int_distribution<std::size_t> pick(0, members.size() - 1);
      for (std::size_t t = 0; t < trials; ++t) {
        const auto& rec = d.records[opts.trials_per_group ? members[pick(rng)] : members[t]];
        std::iota(positions.begin(), positions.end(), std::size_t{0});
        std::shuffle(positions.begin(), positions.end(), rng);
        Slate s = rec.slate;
        for (std::size_t j = 0; j < a; ++j)
          s = models::nongreedy_perturb(s, positions[j], bank, rng, opts.temperature);
        const double e0 = env.expected_clicks(rec.slate, rec.user);
        const double e1 = a == 0 ? e0 : env.expected_clicks(s, rec.user);
        const auto bin = std::min(n_bins - 1, static_cast<std::size_t>(e1 / opts.bin_width));
        ++counts[bin];
        sum.mean_enc += e1;
        sum.mean_abs_shift += std::abs(e1 - e0);
        ++sum.trials;
      }
      sum.mean_enc /= static_cast<double>(sum.trials);
      sum.mean_abs_shift /= static_cast<double>(sum.trials);
      table.summary.push_back(sum);
      for (std::size_t b = 0; b < n_bins; ++b)
        table.rows.push_back({g, a, static_cast<double>(b) * opts.bin_width,
                              std::min(static_cast<double>(k),
                                       static_cast<double>(b + 1) * opts.bin_width),
                              counts[b]});
    }
  }
  return table;
}

}  // namespace slategen::evalkit
