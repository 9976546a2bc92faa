#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "slategen/dataio.hpp"

using namespace slategen;
using namespace slategen::dataio;

namespace {

Record make_record(std::vector<ItemId> items, std::vector<std::uint8_t> r,
                   std::optional<UserId> user = {}) {
  return Record{user, Slate{std::move(items)}, ResponseVector{std::move(r)}};
}

ResponseVector with_clicks(std::size_t clicks, std::size_t k) {
  ResponseVector r{std::vector<std::uint8_t>(k, 0)};
  for (std::size_t i = 0; i < clicks; ++i) r.r[i] = 1;
  return r;
}

Dataset grouped(const std::map<std::size_t, std::size_t>& sizes) {
  Dataset d;
  d.item_universe = 100000;
  ItemId next = 0;
  for (auto [clicks, n] : sizes)
    for (std::size_t i = 0; i < n; ++i) {
      Record rec;
      for (int k = 0; k < 5; ++k) rec.slate.items.push_back(next++ % 100000);
      rec.response = with_clicks(clicks, 5);
      d.records.push_back(rec);
    }
  return d;
}

}  // namespace

TEST_CASE("make_constraint onehot examples") {
  const auto empty = make_constraint(ResponseVector{{0, 0, 0, 0, 0}}).flatten();
  CHECK(empty == std::vector<double>{1, 0, 0, 0, 0, 0});
  const auto three = make_constraint(ResponseVector{{1, 0, 1, 0, 1}}).flatten();
  CHECK(three == std::vector<double>{0, 0, 0, 1, 0, 0});
  const auto ideal = make_constraint(ideal_response(5)).flatten();
  CHECK(ideal == std::vector<double>{0, 0, 0, 0, 0, 1});
}

TEST_CASE("make_constraint appends the user part") {
  const std::vector<double> u{0.5, -1.0};
  const auto c = make_constraint(ResponseVector{{1, 1, 0}}, u);
  CHECK(c.size() == 6);
  CHECK(c.flatten() == std::vector<double>{0, 0, 1, 0, 0.5, -1.0});
}

TEST_CASE("constraint onehot index equals the click count") {
  Rng rng(17);
  std::bernoulli_distribution coin(0.4);
  std::uniform_int_distribution<std::size_t> len(1, 9);
  for (int trial = 0; trial < 500; ++trial) {
    ResponseVector r;
    r.r.resize(len(rng));
    for (auto& v : r.r) v = coin(rng);
    const auto c = make_constraint(r);
    REQUIRE(c.response_onehot.size() == r.size() + 1);
    CHECK(std::count(c.response_onehot.begin(), c.response_onehot.end(), 1.0) == 1);
    const auto hot = std::find(c.response_onehot.begin(), c.response_onehot.end(), 1.0) -
                     c.response_onehot.begin();
    CHECK(static_cast<std::size_t>(hot) == r.clicks());
  }
}

TEST_CASE("sessions_to_slates chunks and labels") {
  std::vector<Interaction> log;
  for (int t = 0; t < 12; ++t)
    log.push_back({3, static_cast<std::uint32_t>(100 + t), t % 5 + 1, 1000 - t});
  const auto d = sessions_to_slates(log, 5, 4);
  REQUIRE(d.size() == 2);
  // Sorted by timestamp ascending, so the latest entries (largest t) come first.
  CHECK(d.records[0].slate.items == std::vector<ItemId>{111, 110, 109, 108, 107});
  CHECK(d.records[1].slate.items == std::vector<ItemId>{106, 105, 104, 103, 102});
  CHECK(d.records[0].user == std::optional<UserId>(3));
  CHECK(d.item_universe == 112);
}

TEST_CASE("sessions_to_slates threshold labelling") {
  std::vector<Interaction> log{{0, 1, 5, 1}, {0, 2, 4, 2}, {0, 3, 3, 3}, {0, 4, 2, 4}, {0, 5, 1, 5}};
  const auto d = sessions_to_slates(log, 5, 4);
  REQUIRE(d.size() == 1);
  CHECK(d.records[0].response.r == std::vector<std::uint8_t>{1, 1, 0, 0, 0});
  CHECK(sessions_to_slates({}, 5, 4).empty());
}

TEST_CASE("sessions_to_slates keeps users separate and order stable") {
  std::vector<Interaction> log;
  for (int t = 0; t < 5; ++t) log.push_back({1, static_cast<std::uint32_t>(t), 5, 7});
  for (int t = 0; t < 4; ++t) log.push_back({2, static_cast<std::uint32_t>(10 + t), 5, t});
  const auto d = sessions_to_slates(log, 5, 4, 50);
  REQUIRE(d.size() == 1);
  CHECK(d.records[0].slate.items == std::vector<ItemId>{0, 1, 2, 3, 4});
  CHECK(d.item_universe == 50);
}

TEST_CASE("parse_interaction_log reports the failing line") {
  std::istringstream good("# header\n1\t2\t5\t100\n\n3\t4\t1\t200\n");
  const auto log = parse_interaction_log(good);
  REQUIRE(log.size() == 2);
  CHECK(log[1].user == 3);
  CHECK(log[1].rating == 1);
  CHECK(log[1].timestamp == 200);

  std::istringstream bad("1\t2\t5\t100\n1\t2\tfive\t100\n");
  try {
    parse_interaction_log(bad);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  std::istringstream short_line("1\t2\t5\n");
  CHECK_THROWS_AS(parse_interaction_log(short_line), ParseError);
}

TEST_CASE("balance_responses grows small groups to half the largest") {
  const auto d = grouped({{0, 1000}, {3, 800}, {1, 200}});
  Rng rng(1);
  BalanceReport rep;
  const auto out = balance_responses(d, rng, &rep);
  const auto h = click_histogram(out);
  CHECK(h[0] == 1000);
  CHECK(h[3] == 800);
  CHECK(h[1] >= 500);
  CHECK(rep.before[1] == 200);
  CHECK(rep.after[1] == h[1]);
  // Groups 2, 4, 5 are empty and cannot grow.
  CHECK(rep.empty_groups == std::vector<std::size_t>{2, 4, 5});
  CHECK(rep.warnings.size() == 3);
}

TEST_CASE("balance_responses on equal groups is a no-op") {
  const auto d = grouped({{0, 10}, {1, 10}, {2, 10}, {3, 10}, {4, 10}, {5, 10}});
  Rng rng(2);
  const auto out = balance_responses(d, rng);
  CHECK(out.records == d.records);
}

TEST_CASE("balance_responses repeats a singleton group") {
  auto d = grouped({{0, 10}});
  d.records.push_back(make_record({7, 8, 9, 10, 11}, {1, 1, 1, 1, 1}));
  Rng rng(3);
  const auto out = balance_responses(d, rng);
  std::size_t copies = 0;
  for (const auto& rec : out.records)
    if (rec.response.clicks() == 5) {
      CHECK(rec == d.records.back());
      ++copies;
    }
  CHECK(copies == 5);
}

TEST_CASE("balance_responses only grows multiplicities") {
  Rng gen(23);
  std::uniform_int_distribution<std::size_t> size(0, 40);
  for (int trial = 0; trial < 30; ++trial) {
    std::map<std::size_t, std::size_t> sizes;
    for (std::size_t c = 0; c <= 5; ++c) sizes[c] = size(gen);
    const auto d = grouped(sizes);
    Rng rng(trial);
    const auto out = balance_responses(d, rng);
    std::map<Record, int> before, after;
    for (const auto& r : d.records) ++before[r];
    for (const auto& r : out.records) ++after[r];
    CHECK(before.size() == after.size());
    for (const auto& [rec, n] : before) CHECK(after[rec] >= n);
    // Prefix untouched.
    CHECK(std::equal(d.records.begin(), d.records.end(), out.records.begin()));
    const auto h = click_histogram(out);
    const std::size_t largest = *std::max_element(h.begin(), h.end());
    for (std::size_t c = 0; c <= 5; ++c)
      if (sizes[c] > 0) CHECK(h[c] >= (largest + 1) / 2);
  }
}

TEST_CASE("split_dataset sizes and determinism") {
  const auto d = grouped({{2, 1000}});
  const auto s = split_dataset(d, {0.8, 0.1, 0.1}, 5);
  CHECK(s.train.size() == 800);
  CHECK(s.val.size() == 100);
  CHECK(s.test.size() == 100);
  const auto again = split_dataset(d, {0.8, 0.1, 0.1}, 5);
  CHECK(again.train.records == s.train.records);
  CHECK(again.test.records == s.test.records);

  std::set<Record> all;
  for (const auto* part : {&s.train, &s.val, &s.test})
    for (const auto& r : part->records) all.insert(r);
  CHECK(all.size() == 1000);

  const auto whole = split_dataset(d, {1.0, 0.0, 0.0}, 5);
  CHECK(whole.train.size() == 1000);
  CHECK(whole.val.empty());
  CHECK(whole.test.empty());
  CHECK_THROWS_AS(split_dataset(d, {0.5, 0.1, 0.1}, 5), ContractError);
}

TEST_CASE("dataset file round trip") {
  Dataset d;
  d.item_universe = 20;
  d.slate_size = 3;
  d.records.push_back(make_record({1, 2, 3}, {1, 0, 1}, 4));
  d.records.push_back(make_record({19, 0, 5}, {0, 0, 0}));
  std::stringstream ss;
  write_dataset(ss, d);
  const auto back = read_dataset(ss);
  CHECK(back.item_universe == 20);
  CHECK(back.slate_size == 3);
  CHECK(back.records == d.records);
  CHECK(back.has_users());
  CHECK(back.user_count() == 5);
}

TEST_CASE("dataset validation and malformed files") {
  Dataset d;
  d.item_universe = 3;
  d.slate_size = 2;
  d.records.push_back(make_record({1, 5}, {1, 0}));
  CHECK_THROWS_AS(d.validate(), ContractError);
  d.records[0] = make_record({1, 2}, {1, 0, 0});
  CHECK_THROWS_AS(d.validate(), ContractError);

  std::stringstream bad("#slate_size=2 items=3\n-\t1,2\t1x\n");
  CHECK_THROWS(read_dataset(bad));
}
