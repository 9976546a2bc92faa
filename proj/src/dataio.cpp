#include "slategen/dataio.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>

namespace slategen::dataio {

std::size_t ResponseVector::clicks() const {
  return static_cast<std::size_t>(std::count(r.begin(), r.end(), std::uint8_t{1}));
}

bool Dataset::has_users() const {
  return std::any_of(records.begin(), records.end(),
                     [](const Record& rec) { return rec.user.has_value(); });
}

std::size_t Dataset::user_count() const {
  std::size_t n = 0;
  for (const auto& rec : records)
    if (rec.user) n = std::max<std::size_t>(n, *rec.user + 1);
  return n;
}

void Dataset::validate() const {
  for (const auto& rec : records) {
    if (rec.slate.size() != slate_size || rec.response.size() != slate_size)
      throw ContractError("record length differs from slate size");
    for (ItemId i : rec.slate.items)
      if (i >= item_universe) throw ContractError("item id outside the item universe");
    for (auto v : rec.response.r)
      if (v > 1) throw ContractError("response value is not binary");
  }
}

std::vector<double> ConstraintVector::flatten() const {
  std::vector<double> out(response_onehot);
  out.insert(out.end(), user_part.begin(), user_part.end());
  return out;
}

ConstraintVector make_constraint(const ResponseVector& r, std::span<const double> user_embedding) {
  ConstraintVector c;
  c.response_onehot.assign(r.size() + 1, 0.0);
  c.response_onehot[r.clicks()] = 1.0;
  c.user_part.assign(user_embedding.begin(), user_embedding.end());
  return c;
}

ResponseVector ideal_response(std::size_t slate_size) {
  return ResponseVector{std::vector<std::uint8_t>(slate_size, 1)};
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::string_view> split_fields(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

template <typename T>
bool parse_int(std::string_view s, T& out) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
  if (s.empty()) return false;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

}  // namespace

std::vector<Interaction> parse_interaction_log(std::istream& is) {
  std::vector<Interaction> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto f = split_fields(line, '\t');
    if (f.size() != 4) throw ParseError(lineno, "expected 4 tab-separated fields");
    Interaction it;
    if (!parse_int(f[0], it.user)) throw ParseError(lineno, "bad user id");
    if (!parse_int(f[1], it.item)) throw ParseError(lineno, "bad item id");
    if (!parse_int(f[2], it.rating) || it.rating < 1 || it.rating > 5)
      throw ParseError(lineno, "rating must be an integer in 1..5");
    if (!parse_int(f[3], it.timestamp)) throw ParseError(lineno, "bad timestamp");
    out.push_back(it);
  }
  return out;
}

Dataset sessions_to_slates(std::span<const Interaction> log, std::size_t slate_size,
                           int positive_threshold, std::size_t item_universe) {
  if (slate_size == 0) throw ContractError("slate size must be positive");
  std::map<std::uint32_t, std::vector<Interaction>> by_user;
  std::size_t max_item = 0;
  for (const auto& it : log) {
    by_user[it.user].push_back(it);
    max_item = std::max<std::size_t>(max_item, it.item + 1);
  }
  Dataset d;
  d.slate_size = slate_size;
  d.item_universe = item_universe ? item_universe : max_item;
  for (auto& [user, hist] : by_user) {
    std::stable_sort(hist.begin(), hist.end(), [](const Interaction& a, const Interaction& b) {
      return a.timestamp < b.timestamp;
    });
    const std::size_t n_slates = hist.size() / slate_size;
    for (std::size_t s = 0; s < n_slates; ++s) {
      Record rec;
      rec.user = user;
      for (std::size_t k = 0; k < slate_size; ++k) {
        const auto& it = hist[s * slate_size + k];
        rec.slate.items.push_back(it.item);
        rec.response.r.push_back(it.rating >= positive_threshold ? 1 : 0);
      }
      d.records.push_back(std::move(rec));
    }
  }
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> click_histogram(const Dataset& d) {
  std::vector<std::size_t> h(d.slate_size + 1, 0);
  for (const auto& rec : d.records) ++h[rec.response.clicks()];
  return h;
}

Dataset balance_responses(const Dataset& d, Rng& rng, BalanceReport* report) {
  std::vector<std::vector<std::size_t>> groups(d.slate_size + 1);
  for (std::size_t i = 0; i < d.records.size(); ++i)
    groups[d.records[i].response.clicks()].push_back(i);

  std::size_t largest = 0;
  for (const auto& g : groups) largest = std::max(largest, g.size());
  const std::size_t target = (largest + 1) / 2;

  Dataset out = d;
  BalanceReport rep;
  for (const auto& g : groups) rep.before.push_back(g.size());
  for (std::size_t c = 0; c < groups.size(); ++c) {
    const auto& g = groups[c];
    if (g.size() >= target) continue;
    if (g.empty()) {
      rep.empty_groups.push_back(c);
      rep.warnings.push_back("no records with " + std::to_string(c) +
                             " clicks; group left empty");
      continue;
    }
    std::uniform_int_distribution<std::size_t> pick(0, g.size() - 1);
    for (std::size_t n = g.size(); n < target; ++n)
      out.records.push_back(d.records[g[pick(rng)]]);
  }
  rep.after = click_histogram(out);
  if (report) *report = std::move(rep);
  return out;
}

Split split_dataset(const Dataset& d, std::array<double, 3> fractions, std::uint64_t seed) {
  const double total = fractions[0] + fractions[1] + fractions[2];
  if (std::abs(total - 1.0) > 1e-9 ||
      std::any_of(fractions.begin(), fractions.end(), [](double f) { return f < 0.0; }))
    throw ContractError("split fractions must be non-negative and sum to 1");

  std::vector<std::size_t> order(d.records.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  const std::size_t n = order.size();
  const std::size_t n_train =
      std::min(n, static_cast<std::size_t>(std::llround(fractions[0] * static_cast<double>(n))));
  const std::size_t n_val = std::min(
      n - n_train, static_cast<std::size_t>(std::llround(fractions[1] * static_cast<double>(n))));

  Split s;
  for (Dataset* part : {&s.train, &s.val, &s.test}) {
    part->item_universe = d.item_universe;
    part->slate_size = d.slate_size;
  }
  for (std::size_t i = 0; i < n; ++i) {
    Dataset& part = i < n_train ? s.train : (i < n_train + n_val ? s.val : s.test);
    part.records.push_back(d.records[order[i]]);
  }
  return s;
}

// ---------------------------------------------------------------------------

void write_dataset(std::ostream& os, const Dataset& d) {
  os << "#slate_size=" << d.slate_size << " items=" << d.item_universe << "\n";
  for (const auto& rec : d.records) {
    if (rec.user) os << *rec.user;
    else os << '-';
    os << '\t';
    for (std::size_t k = 0; k < rec.slate.size(); ++k) {
      if (k) os << ',';
      os << rec.slate[k];
    }
    os << '\t';
    for (auto v : rec.response.r) os << static_cast<char>('0' + v);
    os << '\n';
  }
}

void save_dataset(const std::string& path, const Dataset& d) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_dataset(os, d);
}

Dataset read_dataset(std::istream& is) {
  Dataset d;
  std::string line;
  std::size_t lineno = 0;
  bool have_header = false;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream hs(line.substr(1));
      std::string tok;
      while (hs >> tok) {
        const auto eq = tok.find('=');
        if (eq == std::string::npos) continue;
        const std::string key = tok.substr(0, eq);
        std::size_t value = 0;
        if (!parse_int(std::string_view(tok).substr(eq + 1), value))
          throw ParseError(lineno, "bad header value for " + key);
        if (key == "slate_size") d.slate_size = value;
        else if (key == "items") d.item_universe = value;
      }
      have_header = true;
      continue;
    }
    if (!have_header) throw ParseError(lineno, "missing #slate_size header");
    const auto f = split_fields(line, '\t');
    if (f.size() != 3) throw ParseError(lineno, "expected 3 tab-separated fields");
    Record rec;
    if (f[0] != "-") {
      UserId u = 0;
      if (!parse_int(f[0], u)) throw ParseError(lineno, "bad user id");
      rec.user = u;
    }
    for (auto item : split_fields(f[1], ',')) {
      ItemId id = 0;
      if (!parse_int(item, id)) throw ParseError(lineno, "bad item id");
      if (id >= d.item_universe) throw ParseError(lineno, "item id outside universe");
      rec.slate.items.push_back(id);
    }
    for (char ch : f[2]) {
      if (ch != '0' && ch != '1') throw ParseError(lineno, "response must be 0/1 digits");
      rec.response.r.push_back(static_cast<std::uint8_t>(ch - '0'));
    }
    if (rec.slate.size() != d.slate_size || rec.response.size() != d.slate_size)
      throw ParseError(lineno, "record length differs from slate_size");
    d.records.push_back(std::move(rec));
  }
  return d;
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  return read_dataset(is);
}

}  // namespace slategen::dataio
