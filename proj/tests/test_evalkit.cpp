#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "slategen/evalkit.hpp"

using namespace slategen;
using namespace slategen::evalkit;

namespace {

simenv::SimConfig tiny_sim(std::size_t n_items, simenv::EnvKind kind, std::uint64_t seed = 3) {
  simenv::SimConfig c;
  c.kind = kind;
  c.n_items = n_items;
  c.n_users = 1;
  c.emb_dim = 3;
  c.seed = seed;
  return c;
}

EmbeddingBank bank_of(std::vector<std::vector<double>> rows) {
  EmbeddingBank b;
  b.item_table = Tensor2::from_rows(rows);
  return b;
}

// Straight from the definitions: grand mean, per-slate means, three averages.
VarianceParts variance_oracle(const std::vector<Slate>& slates, const Tensor2& t) {
  const std::size_t e = t.cols;
  const double n = static_cast<double>(slates.size());
  const double k = static_cast<double>(slates[0].size());
  std::vector<double> mu(e, 0.0);
  for (const auto& s : slates)
    for (ItemId i : s.items)
      for (std::size_t d = 0; d < e; ++d) mu[d] += t(i, d) / (n * k);
  VarianceParts v;
  for (const auto& s : slates) {
    std::vector<double> ms(e, 0.0);
    for (ItemId i : s.items)
      for (std::size_t d = 0; d < e; ++d) ms[d] += t(i, d) / k;
    for (std::size_t d = 0; d < e; ++d) v.slate_mean += (ms[d] - mu[d]) * (ms[d] - mu[d]) / n;
    for (ItemId i : s.items)
      for (std::size_t d = 0; d < e; ++d) {
        v.total += (t(i, d) - mu[d]) * (t(i, d) - mu[d]) / (n * k);
        v.intra_slate += (t(i, d) - ms[d]) * (t(i, d) - ms[d]) / (n * k);
      }
  }
  return v;
}

class CyclePolicy : public SlatePolicy {
 public:
  explicit CyclePolicy(std::vector<Slate> s) : slates_(std::move(s)) {}
  Slate generate(std::optional<UserId>, Rng& rng) const override {
    return slates_[rng() % slates_.size()];
  }
  std::string name() const override { return "cycle"; }

 private:
  std::vector<Slate> slates_;
};

}  // namespace

TEST_CASE("ENC of a certain slate is K") {
  auto cfg = tiny_sim(6, simenv::EnvKind::URM_P);
  cfg.pos_offsets = {1, 1, 1, 1, 1};
  const auto env = simenv::build_environment(cfg);
  const models::FixedSlatePolicy p(Slate{{0, 1, 2, 3, 4}});
  CHECK(enc(p, env, {0}, 10, 1) == 5.0);
}

TEST_CASE("ENC of a fixed slate does not depend on N") {
  const auto env = simenv::build_environment(tiny_sim(10, simenv::EnvKind::URM_P_MR));
  const Slate s{{3, 1, 4, 0, 9}};
  const models::FixedSlatePolicy p(s);
  const double e = env.expected_clicks(s, 0);
  for (std::size_t n : {1, 7, 500}) CHECK(enc(p, env, {0}, n, 2) == e);
}

TEST_CASE("ENC of uniform random slates matches exhaustive enumeration") {
  const auto env = simenv::build_environment(tiny_sim(6, simenv::EnvKind::URM_P_MR));
  double sum = 0.0, sq = 0.0;
  std::size_t count = 0;
  Slate s{{0, 0, 0, 0, 0}};
  for (std::size_t code = 0; code < 7776; ++code) {
    std::size_t c = code;
    for (auto& it : s.items) {
      it = static_cast<ItemId>(c % 6);
      c /= 6;
    }
    const double e = env.expected_clicks(s, 0);
    sum += e;
    sq += e * e;
    ++count;
  }
  const double mean = sum / count;
  const double sd = std::sqrt(sq / count - mean * mean);
  const models::UniformRandomPolicy policy(6, 5, true);
  const std::size_t n = 10000;
  CHECK(std::abs(enc(policy, env, {0}, n, 5) - mean) <= 3.0 * sd / std::sqrt(double(n)));
}

TEST_CASE("ENC is linear over a mixture of fixed slates") {
  const auto env = simenv::build_environment(tiny_sim(10, simenv::EnvKind::URM_P_MR));
  const Slate a{{0, 1, 2, 3, 4}}, b{{5, 6, 7, 8, 9}};
  SampleSet set;
  set.n_per_user = 10;
  set.users = {0};
  set.slates = {{a, a, a, b, b, b, b, b, b, b}};
  const double expected = 0.3 * env.expected_clicks(a, 0) + 0.7 * env.expected_clicks(b, 0);
  CHECK(enc(set, env) == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("ENC averages over users") {
  auto cfg = tiny_sim(10, simenv::EnvKind::URM);
  cfg.n_users = 3;
  const auto env = simenv::build_environment(cfg);
  const Slate s{{0, 1, 2, 3, 4}};
  const models::FixedSlatePolicy p(s);
  const double expected =
      (env.expected_clicks(s, 0) + env.expected_clicks(s, 1) + env.expected_clicks(s, 2)) / 3.0;
  CHECK(enc(p, env, all_users(env), 4, 0) == doctest::Approx(expected));
  CHECK(all_users(env).size() == 3);
}

TEST_CASE("variance decomposition hand example") {
  const auto table = Tensor2::from_rows({{0}, {2}, {4}, {6}});
  const std::vector<Slate> slates{Slate{{0, 1}}, Slate{{2, 3}}};
  const auto v = variance_decomposition(slates, table);
  CHECK(v.slate_mean == doctest::Approx(4.0));
  CHECK(v.intra_slate == doctest::Approx(1.0));
  CHECK(v.total == doctest::Approx(5.0));
  const auto o = variance_oracle(slates, table);
  CHECK(o.total == doctest::Approx(5.0));
}

TEST_CASE("variance decomposition of identical slates is zero") {
  const auto table = Tensor2::from_rows({{1.5, -2}, {3, 3}});
  const std::vector<Slate> slates(4, Slate{{1, 1, 1}});
  const auto v = variance_decomposition(slates, table);
  CHECK(v.total == 0.0);
  CHECK(v.slate_mean == 0.0);
  CHECK(v.intra_slate == 0.0);
  CHECK_THROWS_AS(variance_decomposition(std::vector<Slate>{}, table), ContractError);
}

TEST_CASE("variance decomposition identity over random sample sets") {
  Rng rng(31);
  std::uniform_int_distribution<std::size_t> nn(1, 30);
  for (int trial = 0; trial < 200; ++trial) {
    const auto table = Tensor2::gaussian(25, 4, 0.0, 1.0 + trial % 3, rng);
    std::vector<Slate> slates(nn(rng));
    for (auto& s : slates)
      for (int k = 0; k < 5; ++k) s.items.push_back(static_cast<ItemId>(rng() % 25));
    const auto v = variance_decomposition(slates, table);
    const auto o = variance_oracle(slates, table);
    CHECK(std::abs(v.total - (v.slate_mean + v.intra_slate)) <= 1e-9 * std::max(1.0, v.total));
    CHECK(v.slate_mean <= v.total * (1 + 1e-12) + 1e-15);
    CHECK(v.intra_slate <= v.total * (1 + 1e-12) + 1e-15);
    CHECK(v.total == doctest::Approx(o.total).epsilon(1e-10));
    CHECK(v.slate_mean == doctest::Approx(o.slate_mean).epsilon(1e-10));
    CHECK(v.intra_slate == doctest::Approx(o.intra_slate).epsilon(1e-10));
  }
}

TEST_CASE("coverage examples") {
  const std::vector<Slate> two{Slate{{1, 2, 3, 4, 5}}, Slate{{4, 5, 6, 7, 8}}};
  CHECK(coverage(two, 100) == doctest::Approx(0.08));
  const std::vector<Slate> same(50, Slate{{9, 8, 7, 6, 5}});
  CHECK(coverage(same, 40) == doctest::Approx(5.0 / 40));

  const models::UniformRandomPolicy uni(20, 5);
  const auto samples = draw_samples(uni, {std::nullopt}, 200, 1);
  CHECK(coverage(samples, 20) == 1.0);
}

TEST_CASE("coverage is user-wise and monotone in N") {
  SampleSet set;
  set.n_per_user = 1;
  set.users = {0, 1};
  set.slates = {{Slate{{0, 1}}}, {Slate{{0, 2}}}};
  // Each user sees 2 of 10 items; pooled coverage would be 0.3.
  CHECK(coverage(set, 10) == doctest::Approx(0.2));

  const models::UniformRandomPolicy uni(300, 5);
  double prev = 0.0;
  for (std::size_t n : {1, 5, 20, 80}) {
    const auto s = draw_samples(uni, {std::nullopt}, n, 7);
    const double c = coverage(s, 300);
    CHECK(c >= prev);
    prev = c;
  }
}

TEST_CASE("coverage of equal per-user counts is exact") {
  for (std::size_t users : {3, 7, 100}) {
    SampleSet set;
    set.n_per_user = 2;
    for (std::size_t u = 0; u < users; ++u) {
      set.users.push_back(static_cast<UserId>(u));
      const auto base = static_cast<ItemId>(u % 50);
      set.slates.push_back({Slate{{base, base, static_cast<ItemId>(base + 1), base, base}},
                            Slate{{static_cast<ItemId>(base + 2), base, base, base, base}}});
    }
    CAPTURE(users);
    CHECK(coverage(set, 300) == 3.0 / 300.0);
  }
}

TEST_CASE("draw_samples is stable per user") {
  const models::UniformRandomPolicy uni(50, 5);
  const auto a = draw_samples(uni, {0, 1, 2}, 4, 9);
  const auto b = draw_samples(uni, {2}, 4, 9);
  CHECK(a.total_slates() == 12);
  CHECK(b.slates[0] == a.slates[2]);
  CHECK(draw_samples(uni, {0, 1, 2}, 4, 9).slates == a.slates);
  CHECK(draw_samples(uni, {0, 1, 2}, 4, 10).slates != a.slates);

  const models::FixedSlatePolicy fixed(Slate{{1, 2, 3}});
  const auto f = draw_samples(fixed, {std::nullopt}, 6, 0);
  CHECK(f.slates[0] == std::vector<Slate>(6, Slate{{1, 2, 3}}));
}

TEST_CASE("ILD examples") {
  const auto zero = bank_of({{0, 0}, {0, 0}});
  CHECK(ild(Slate{{0, 0, 0, 0, 0}}, zero) == 0.5);
  const auto ortho = bank_of({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
  CHECK(ild(Slate{{0, 1, 2}}, ortho) == 0.5);
  // Pairwise dot -10 on both slots.
  const auto anti = bank_of({{std::sqrt(10.0)}, {-std::sqrt(10.0)}});
  CHECK(ild(Slate{{0, 1}}, anti) == doctest::Approx(1.0 - 1.0 / (1.0 + std::exp(10.0))));
  CHECK(ild(Slate{{0, 1}}, anti) == doctest::Approx(0.99995).epsilon(1e-5));
  CHECK_THROWS_AS(ild(Slate{{0}}, anti), ContractError);
}

TEST_CASE("ILD unnormalized form sums the pairs") {
  const auto zero = bank_of({{0}, {0}, {0}});
  // K = 3: six ordered pairs of sigmoid(0).
  CHECK(ild(Slate{{0, 1, 2}}, zero, false) == doctest::Approx(1.0 - 3.0));
}

TEST_CASE("ILD is permutation invariant") {
  Rng rng(4);
  EmbeddingBank bank;
  bank.item_table = Tensor2::gaussian(30, 8, 0.0, 1.0, rng);
  for (int trial = 0; trial < 100; ++trial) {
    Slate s;
    for (int k = 0; k < 5; ++k) s.items.push_back(static_cast<ItemId>(rng() % 30));
    const double base = ild(s, bank);
    std::shuffle(s.items.begin(), s.items.end(), rng);
    CHECK(ild(s, bank) == doctest::Approx(base).epsilon(1e-14));
    CHECK(base > 0.0);
    CHECK(base < 1.0);
  }
}

TEST_CASE("hit and recall tallies") {
  dataio::Dataset test;
  test.item_universe = 20;
  test.slate_size = 3;
  auto rec = [](std::vector<ItemId> s, std::vector<std::uint8_t> r) {
    return dataio::Record{std::nullopt, Slate{std::move(s)}, dataio::ResponseVector{std::move(r)}};
  };
  test.records = {rec({1, 2, 3}, {1, 1, 0}), rec({4, 5, 6}, {0, 0, 0}), rec({7, 8, 9}, {1, 1, 1})};
  // Record 0: one generation hitting item 2 only -> hit 1, recall 1/2.
  // Record 1: no positives, excluded.
  // Record 2: two generations: {7,8,0} (recall 2/3) and {0,0,0} (miss).
  const std::vector<std::vector<Slate>> gen{
      {Slate{{2, 3, 10}}}, {Slate{{4, 5, 6}}}, {Slate{{7, 8, 0}}, Slate{{0, 0, 0}}}};
  const auto hr = hit_and_recall(test, gen);
  CHECK(hr.evaluated == 2);
  CHECK(hr.hit_rate == doctest::Approx((1.0 + 0.5) / 2));
  CHECK(hr.recall == doctest::Approx((0.5 + (2.0 / 3 + 0) / 2) / 2));

  dataio::Dataset exact;
  exact.item_universe = 20;
  exact.slate_size = 3;
  exact.records = {rec({1, 2, 3}, {1, 1, 1})};
  const models::FixedSlatePolicy same(Slate{{1, 2, 3}});
  const auto perfect = hit_and_recall(same, exact, 5, 1);
  CHECK(perfect.hit_rate == 1.0);
  CHECK(perfect.recall == 1.0);
}

TEST_CASE("summary statistics") {
  const auto s = summarize({4, 1, 3, 2, 5});
  CHECK(s.mean == 3.0);
  CHECK(s.min == 1.0);
  CHECK(s.max == 5.0);
  CHECK(s.median == 3.0);
  CHECK(s.q25 == 2.0);
  CHECK(s.q75 == 4.0);
  CHECK(s.std == doctest::Approx(std::sqrt(2.0)));
}

TEST_CASE("evaluate fills a report and the CSV row lines up with the header") {
  auto cfg = tiny_sim(30, simenv::EnvKind::URM_P_MR);
  cfg.n_users = 4;
  const auto env = simenv::build_environment(cfg);
  const auto bank = models::bank_from_environment(env);
  const CyclePolicy p({Slate{{0, 1, 2, 3, 4}}, Slate{{5, 6, 7, 8, 9}}});
  EvalOptions opts;
  opts.n_samples = 40;
  opts.seed = 3;
  const auto r = evaluate(p, env, bank, all_users(env), nullptr, opts);
  CHECK(r.model == "cycle");
  CHECK(r.n_samples == 40);
  CHECK(r.coverage == doctest::Approx(10.0 / 30));
  CHECK(std::abs(r.total_var - r.slate_mean_var - r.intra_slate_var) < 1e-9);
  CHECK_FALSE(r.ranking.has_value());
  const auto header = metrics_csv_header();
  const auto row = metrics_csv_row(r);
  CHECK(std::count(header.begin(), header.end(), ',') == std::count(row.begin(), row.end(), ','));
  CHECK(row.find("nan") != std::string::npos);
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(std::nan("")) == "nan");
}

TEST_CASE("perturbation study basics") {
  auto cfg = tiny_sim(40, simenv::EnvKind::URM_P_MR);
  cfg.n_users = 5;
  const auto env = simenv::build_environment(cfg);
  const auto bank = models::bank_from_environment(env);
  Rng drng(2);
  simenv::GenerateOptions g;
  g.balance = false;
  const auto d = simenv::generate_dataset(env, 400, drng, g);
  Rng rng(5);
  const auto table = perturbation_study(d, env, bank, {0, 1, 3, 5}, rng);
  for (const auto& s : table.summary)
    if (s.a == 0) CHECK(s.mean_abs_shift == 0.0);
  // Every record lands in exactly one bin per (group, a).
  for (std::size_t a : {0u, 1u, 3u, 5u}) {
    std::size_t total = 0;
    for (const auto& row : table.rows)
      if (row.a == a) total += row.count;
    CHECK(total == d.size());
  }
  CHECK(table.to_csv().rfind("group,a,bin_low,bin_high,count\n", 0) == 0);
  CHECK_THROWS_AS(perturbation_study(d, env, bank, {6}, rng), ContractError);
}

TEST_CASE("full replacement on a uniform-interest environment matches random slates") {
  auto cfg = tiny_sim(12, simenv::EnvKind::URM_P);
  cfg.vector_std = 0.0;
  cfg.bias_std = 0.0;
  cfg.pos_noise_std = 0.0;
  cfg.pos_offsets = {0, 0, 0, 0, 0};
  const auto env = simenv::build_environment(cfg);
  const auto bank = models::bank_from_environment(env);
  Rng drng(1);
  simenv::GenerateOptions g;
  g.balance = false;
  const auto d = simenv::generate_dataset(env, 200, drng, g);
  Rng rng(2);
  const auto table = perturbation_study(d, env, bank, {5}, rng);
  for (const auto& s : table.summary) {
    CHECK(s.mean_enc == doctest::Approx(2.5));
    CHECK(s.mean_abs_shift == doctest::Approx(0.0));
  }
}

TEST_CASE("perturbation shift grows with the number of replaced items") {
  simenv::SimConfig cfg;
  cfg.n_items = 300;
  cfg.n_users = 100;
  cfg.seed = 11;
  const auto env = simenv::build_environment(cfg);
  const auto bank = models::bank_from_environment(env);
  Rng drng(3);
  simenv::GenerateOptions g;
  g.balance = false;
  const auto d = simenv::generate_dataset(env, 3000, drng, g);
  Rng rng(4);
  PerturbationOptions opts;
  opts.trials_per_group = 2000;
  const auto table = perturbation_study(d, env, bank, {0, 1, 3}, rng, opts);
  for (std::size_t group = 0; group <= 5; ++group) {
    std::vector<double> shift;
    for (const auto& s : table.summary)
      if (s.group == group) shift.push_back(s.mean_abs_shift);
    if (shift.size() != 3) continue;
    CHECK(shift[0] <= shift[1]);
    CHECK(shift[1] <= shift[2]);
  }
}
