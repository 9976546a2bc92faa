#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <set>

#include "slategen/simenv.hpp"

using namespace slategen;
using namespace slategen::simenv;

namespace {

SimConfig small_config(EnvKind kind, std::uint64_t seed = 7) {
  SimConfig c;
  c.kind = kind;
  c.n_items = 40;
  c.n_users = 12;
  c.emb_dim = 4;
  c.seed = seed;
  return c;
}

SimConfig zero_config(EnvKind kind) {
  auto c = small_config(kind);
  c.vector_std = 0.0;
  c.bias_std = 0.0;
  c.pos_noise_std = 0.0;
  return c;
}

Slate random_slate(std::size_t n_items, std::size_t k, Rng& rng) {
  std::vector<ItemId> all(n_items);
  std::iota(all.begin(), all.end(), 0);
  std::shuffle(all.begin(), all.end(), rng);
  return Slate{{all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k)}};
}

// Independent re-statement of the simulator formulas from the raw tables.
double interest_oracle(const Environment& env, const Slate& s, UserId u, std::size_t pos) {
  const auto& c = env.config();
  const ItemId item = s[pos];
  const auto uv = env.user_vecs().row(u);
  const auto iv = env.item_vecs().row(item);
  double logit = env.user_bias()[u] + env.item_bias()[item] + env.global_bias();
  for (std::size_t d = 0; d < uv.size(); ++d) logit += uv[d] * iv[d];
  const double urm = 1.0 / (1.0 + std::exp(-logit));
  if (env.kind() == EnvKind::URM) return urm;
  double p = urm + c.pos_weight * env.user_pos_bias(u)[pos];
  if (env.kind() == EnvKind::URM_P_MR) {
    double rel = 0.0;
    for (std::size_t d = 0; d < uv.size(); ++d) {
      double mean = 0.0;
      for (ItemId j : s.items) mean += env.item_vecs()(j, d);
      mean /= static_cast<double>(s.size());
      rel += iv[d] / (1.0 + std::exp(-mean * uv[d]));
    }
    p += c.relation_weight * rel;
  }
  return std::min(1.0, std::max(0.0, p));
}

}  // namespace

TEST_CASE("zero tables give one half under URM") {
  const auto env = build_environment(zero_config(EnvKind::URM));
  const Slate s{{0, 1, 2, 3, 4}};
  for (std::size_t k = 0; k < 5; ++k) CHECK(env.interest(s[k], 0, s, k) == 0.5);
  CHECK(env.expected_clicks(s, 0) == 2.5);
}

TEST_CASE("positional offset example") {
  const auto env = build_environment(zero_config(EnvKind::URM_P));
  const Slate s{{0, 1, 2, 3, 4}};
  CHECK(env.interest(0, 3, s, 0) == doctest::Approx(0.7).epsilon(1e-15));
  const auto p = env.slate_interests(s, 3);
  CHECK(p[4] == doctest::Approx(0.3).epsilon(1e-15));
  // Zero noise leaves every user's offsets at the base values.
  for (UserId u = 0; u < 12; ++u) {
    const auto row = env.user_pos_bias(u);
    CHECK(std::vector<double>(row.begin(), row.end()) == env.config().pos_offsets);
  }
}

TEST_CASE("interest matches an independent restatement for every kind") {
  Rng rng(99);
  for (EnvKind kind : {EnvKind::URM, EnvKind::URM_P, EnvKind::URM_P_MR}) {
    auto cfg = small_config(kind);
    cfg.relation_weight = 0.8;
    const auto env = build_environment(cfg);
    for (int trial = 0; trial < 100; ++trial) {
      const auto s = random_slate(cfg.n_items, 5, rng);
      const UserId u = static_cast<UserId>(rng() % cfg.n_users);
      double sum = 0.0;
      for (std::size_t k = 0; k < 5; ++k) {
        const double got = env.interest(s[k], u, s, k);
        CHECK(got == doctest::Approx(interest_oracle(env, s, u, k)).epsilon(1e-12));
        CHECK(got >= 0.0);
        CHECK(got <= 1.0);
        sum += got;
      }
      CHECK(env.expected_clicks(s, u) == sum);
    }
  }
}

TEST_CASE("reductions between simulator kinds are bit-exact") {
  Rng rng(5);
  auto p_cfg = small_config(EnvKind::URM_P);
  auto mr_cfg = small_config(EnvKind::URM_P_MR);
  mr_cfg.relation_weight = 0.0;
  auto urm_cfg = small_config(EnvKind::URM);
  auto p0_cfg = small_config(EnvKind::URM_P);
  p0_cfg.pos_weight = 0.0;
  const auto p_env = build_environment(p_cfg);
  const auto mr_env = build_environment(mr_cfg);
  const auto urm_env = build_environment(urm_cfg);
  const auto p0_env = build_environment(p0_cfg);
  for (int trial = 0; trial < 200; ++trial) {
    const auto s = random_slate(40, 5, rng);
    const UserId u = static_cast<UserId>(rng() % 12);
    CHECK(mr_env.slate_interests(s, u) == p_env.slate_interests(s, u));
    CHECK(p0_env.slate_interests(s, u) == urm_env.slate_interests(s, u));
  }
}

TEST_CASE("context dependence by simulator kind") {
  Rng rng(8);
  const auto urm = build_environment(small_config(EnvKind::URM));
  const auto urm_p = build_environment(small_config(EnvKind::URM_P));
  auto mr_cfg = small_config(EnvKind::URM_P_MR);
  mr_cfg.relation_weight = 0.5;
  const auto mr = build_environment(mr_cfg);
  bool mr_changed_under_swap = false;
  for (int trial = 0; trial < 100; ++trial) {
    const auto s = random_slate(40, 6, rng);
    const Slate a{{s[0], s[1], s[2], s[3], s[4]}};
    Slate reordered = a;
    std::swap(reordered.items[1], reordered.items[3]);
    Slate replaced = a;
    replaced.items[2] = s[5];
    const UserId u = static_cast<UserId>(rng() % 12);
    // URM: position and context free.
    CHECK(urm.interest(a[0], u, a, 0) == urm.interest(a[0], u, replaced, 4));
    // URM_P: context free at a fixed position.
    CHECK(urm_p.interest(a[0], u, a, 0) == urm_p.interest(a[0], u, replaced, 0));
    // URM_P_MR: co-item order does not matter, membership may.
    CHECK(mr.interest(a[0], u, a, 0) == doctest::Approx(mr.interest(a[0], u, reordered, 0)));
    if (std::abs(mr.interest(a[0], u, a, 0) - mr.interest(a[0], u, replaced, 0)) > 1e-9)
      mr_changed_under_swap = true;
  }
  CHECK(mr_changed_under_swap);
}

TEST_CASE("clip bounds hold under extreme configurations") {
  Rng rng(2);
  auto cfg = small_config(EnvKind::URM_P_MR);
  cfg.vector_std = 3.0;
  cfg.pos_weight = 4.0;
  cfg.relation_weight = 3.0;
  const auto env = build_environment(cfg);
  for (int trial = 0; trial < 300; ++trial) {
    const auto s = random_slate(40, 5, rng);
    const UserId u = static_cast<UserId>(rng() % 12);
    const double e = env.expected_clicks(s, u);
    CHECK(e >= 0.0);
    CHECK(e <= 5.0);
  }
}

TEST_CASE("sample_response at certain interests") {
  auto one = zero_config(EnvKind::URM_P);
  one.pos_offsets = {0.6, 0.6, 0.6, 0.6, 0.6};
  auto zero = one;
  zero.pos_offsets = {-0.6, -0.6, -0.6, -0.6, -0.6};
  const auto env1 = build_environment(one);
  const auto env0 = build_environment(zero);
  Rng rng(4);
  const Slate s{{0, 1, 2, 3, 4}};
  for (int i = 0; i < 1000; ++i) {
    CHECK(env1.sample_response(s, 1, rng).r == std::vector<std::uint8_t>(5, 1));
    CHECK(env0.sample_response(s, 1, rng).r == std::vector<std::uint8_t>(5, 0));
  }
}

TEST_CASE("sample_response click rate within a binomial band") {
  auto cfg = zero_config(EnvKind::URM_P);
  cfg.pos_offsets = {-0.2, -0.2, -0.2, -0.2, -0.2};
  const auto env = build_environment(cfg);
  const Slate s{{0, 1, 2, 3, 4}};
  REQUIRE(env.interest(0, 0, s, 0) == doctest::Approx(0.3));
  Rng rng(12);
  const int n = 100000;
  std::size_t clicks = 0;
  for (int i = 0; i < n; ++i) clicks += env.sample_response(s, 0, rng).r[0];
  const double rate = static_cast<double>(clicks) / n;
  CHECK(std::abs(rate - 0.3) <= 3.0 * std::sqrt(0.3 * 0.7 / n));
}

TEST_CASE("expected clicks agrees with Monte Carlo on a three-item universe") {
  SimConfig cfg;
  cfg.kind = EnvKind::URM_P_MR;
  cfg.n_items = 3;
  cfg.n_users = 2;
  cfg.emb_dim = 3;
  cfg.pos_offsets = {0.1, 0.0, -0.1};
  cfg.seed = 31;
  const auto env = build_environment(cfg);
  std::vector<ItemId> perm{0, 1, 2};
  Rng rng(77);
  const int n = 100000;
  do {
    const Slate s{perm};
    const auto p = env.slate_interests(s, 1);
    double var = 0.0;
    for (double q : p) var += q * (1 - q);
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += static_cast<double>(env.sample_response(s, 1, rng).clicks());
    const double mc = total / n;
    CHECK(std::abs(mc - env.expected_clicks(s, 1)) <= 3.0 * std::sqrt(var / n) + 1e-12);
  } while (std::next_permutation(perm.begin(), perm.end()));
}

TEST_CASE("environment construction is deterministic") {
  const auto a = build_environment(small_config(EnvKind::URM_P_MR, 3));
  const auto b = build_environment(small_config(EnvKind::URM_P_MR, 3));
  const auto c = build_environment(small_config(EnvKind::URM_P_MR, 4));
  CHECK(a.item_vecs().data == b.item_vecs().data);
  CHECK(a.user_vecs().data == b.user_vecs().data);
  CHECK(a.item_bias() == b.item_bias());
  CHECK(a.user_pos_bias(5)[2] == b.user_pos_bias(5)[2]);
  CHECK(a.item_vecs().data != c.item_vecs().data);

  Rng r1(10), r2(10);
  const auto d1 = generate_dataset(a, 500, r1);
  const auto d2 = generate_dataset(b, 500, r2);
  CHECK(d1.records == d2.records);
}

TEST_CASE("unknown ids are rejected") {
  const auto env = build_environment(small_config(EnvKind::URM));
  CHECK_THROWS(env.expected_clicks(Slate{{0, 1, 2, 3, 40}}, 0));
  CHECK_THROWS(env.expected_clicks(Slate{{0, 1, 2, 3, 4}}, 12));
  auto bad = small_config(EnvKind::URM);
  bad.n_items = 0;
  CHECK_THROWS_AS(build_environment(bad), ContractError);
}

TEST_CASE("generate_dataset shape and balancing") {
  const auto env = build_environment(small_config(EnvKind::URM_P_MR));
  Rng rng(1);
  CHECK(generate_dataset(env, 0, rng).empty());

  dataio::BalanceReport rep;
  const auto d = generate_dataset(env, 2000, rng, {}, &rep);
  CHECK(d.size() >= 2000);
  CHECK(d.item_universe == 40);
  d.validate();
  for (const auto& r : d.records) {
    CHECK(std::set<ItemId>(r.slate.items.begin(), r.slate.items.end()).size() == 5);
    REQUIRE(r.user.has_value());
    CHECK(*r.user < 12);
  }
  const auto h = dataio::click_histogram(d);
  const auto largest = *std::max_element(h.begin(), h.end());
  for (std::size_t c = 0; c < h.size(); ++c)
    if (rep.before[c] > 0) CHECK(h[c] >= (largest + 1) / 2);

  GenerateOptions raw;
  raw.balance = false;
  raw.allow_repeats = true;
  CHECK(generate_dataset(env, 300, rng, raw).size() == 300);
}

TEST_CASE("learned response model separates an always-clicked item") {
  Rng rng(21);
  dataio::Dataset d;
  d.item_universe = 15;
  for (int i = 0; i < 3000; ++i) {
    dataio::Record rec;
    rec.slate = random_slate(15, 5, rng);
    for (ItemId it : rec.slate.items) rec.response.r.push_back(it == 7 ? 1 : 0);
    d.records.push_back(rec);
  }
  ResponseModelConfig cfg;
  cfg.epochs = 15;
  cfg.hidden = 32;
  cfg.seed = 3;
  FitReport report;
  const auto env = fit_response_model(d, cfg, &report);
  CHECK(env.kind() == EnvKind::Learned);
  CHECK(report.epoch_loss.size() == 15);
  for (int trial = 0; trial < 100; ++trial) {
    auto s = random_slate(15, 5, rng);
    const auto p = env.slate_interests(s, std::nullopt);
    for (std::size_t k = 0; k < 5; ++k) {
      if (s[k] == 7)
        CHECK(p[k] > 0.9);
      else
        CHECK(p[k] < 0.1);
    }
  }
  CHECK_THROWS(fit_response_model(dataio::Dataset{}, cfg));
}

TEST_CASE("learned response training loss falls over the first epochs") {
  auto sim = small_config(EnvKind::URM);
  const auto env = build_environment(sim);
  Rng rng(6);
  GenerateOptions opts;
  opts.balance = false;
  const auto d = generate_dataset(env, 3000, rng, opts);
  ResponseModelConfig cfg;
  cfg.epochs = 5;
  cfg.hidden = 32;
  cfg.seed = 1;
  FitReport report;
  fit_response_model(d, cfg, &report);
  REQUIRE(report.epoch_loss.size() == 5);
  for (std::size_t e = 1; e < 5; ++e) CHECK(report.epoch_loss[e] < report.epoch_loss[e - 1]);
}

TEST_CASE("environment save and load round trip") {
  const auto env = build_environment(small_config(EnvKind::URM_P_MR, 13));
  const std::string path = "test_simenv_env.bin";
  env.save(path);
  const auto back = Environment::load(path);
  CHECK(back.kind() == EnvKind::URM_P_MR);
  CHECK(back.item_vecs().data == env.item_vecs().data);
  const Slate s{{3, 9, 1, 22, 17}};
  CHECK(back.slate_interests(s, 4) == env.slate_interests(s, 4));
  CHECK(format_sim_config(back.config()) == format_sim_config(env.config()));
  std::remove(path.c_str());
  std::remove((path + ".cfg").c_str());
}

TEST_CASE("sim config text round trip") {
  auto c = small_config(EnvKind::URM_P);
  c.pos_offsets = {0.3, -0.1, 0.0};
  c.relation_weight = 0.25;
  const auto back = parse_sim_config(format_sim_config(c));
  CHECK(back.kind == EnvKind::URM_P);
  CHECK(back.pos_offsets == c.pos_offsets);
  CHECK(back.relation_weight == 0.25);
  CHECK(back.n_items == 40);
  CHECK_THROWS(parse_sim_config("kind=bogus\n"));
}
