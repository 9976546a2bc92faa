#pragma once

// Slates, responses, datasets, and the log ingestion / balancing / splitting
// steps that turn raw interactions into slate-response records.

#include <array>
#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "slategen/numkit.hpp"

namespace slategen {

using ItemId = std::uint32_t;
using UserId = std::uint32_t;

constexpr std::size_t kDefaultSlateSize = 5;

namespace dataio {

class ParseError : public std::runtime_error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

// Ordered list of K item ids.
struct Slate {
  std::vector<ItemId> items;

  std::size_t size() const { return items.size(); }
  ItemId operator[](std::size_t i) const { return items[i]; }
  bool operator==(const Slate&) const = default;
  auto operator<=>(const Slate&) const = default;
};

// K binary feedbacks.
struct ResponseVector {
  std::vector<std::uint8_t> r;

  std::size_t size() const { return r.size(); }
  std::size_t clicks() const;
  bool operator==(const ResponseVector&) const = default;
  auto operator<=>(const ResponseVector&) const = default;
};

struct Record {
  std::optional<UserId> user;
  Slate slate;
  ResponseVector response;

  bool operator==(const Record&) const = default;
  auto operator<=>(const Record&) const = default;
};

struct Dataset {
  std::vector<Record> records;
  std::size_t item_universe = 0;
  std::size_t slate_size = kDefaultSlateSize;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
  bool has_users() const;
  // 1 + largest user id, or 0 when no record carries a user.
  std::size_t user_count() const;
  // Throws ContractError when any record breaks the id / length invariants.
  void validate() const;
};

// onehot(sum r) of length K+1, optionally followed by a user embedding.
struct ConstraintVector {
  std::vector<double> response_onehot;
  std::vector<double> user_part;

  std::size_t size() const { return response_onehot.size() + user_part.size(); }
  std::vector<double> flatten() const;
};

ConstraintVector make_constraint(const ResponseVector& r,
                                 std::span<const double> user_embedding = {});
// The all-clicked ideal response of length K.
ResponseVector ideal_response(std::size_t slate_size);

// ---------------------------------------------------------------------------
// Ingestion

struct Interaction {
  std::uint32_t user = 0;
  std::uint32_t item = 0;
  int rating = 0;
  std::int64_t timestamp = 0;
};

// Tab-separated user, item, rating, timestamp; '#' lines and blank lines skipped.
std::vector<Interaction> parse_interaction_log(std::istream& is);

// Per user: sort by timestamp (stable), chunk into consecutive groups of K,
// drop the trailing remainder, label r_k = rating >= positive_threshold.
// item_universe = 0 means "1 + largest item id seen".
Dataset sessions_to_slates(std::span<const Interaction> log, std::size_t slate_size,
                           int positive_threshold, std::size_t item_universe = 0);

// ---------------------------------------------------------------------------
// Balancing and splitting

struct BalanceReport {
  std::vector<std::size_t> before;  // group sizes indexed by click count
  std::vector<std::size_t> after;
  std::vector<std::size_t> empty_groups;  // click counts that could not be grown
  std::vector<std::string> warnings;
};

// Grows every click-count group to at least ceil(largest / 2) records by
// appending copies drawn uniformly with replacement from that group.
Dataset balance_responses(const Dataset& d, Rng& rng, BalanceReport* report = nullptr);

std::vector<std::size_t> click_histogram(const Dataset& d);

struct Split {
  Dataset train;
  Dataset val;
  Dataset test;
};

// Seeded permutation then contiguous slices of round(f * n) records.
Split split_dataset(const Dataset& d, std::array<double, 3> fractions, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Dataset file format:
//   #slate_size=<K> items=<n>
//   <user or -><TAB><i1,i2,...,iK><TAB><r1r2...rK>

void write_dataset(std::ostream& os, const Dataset& d);
void save_dataset(const std::string& path, const Dataset& d);
Dataset read_dataset(std::istream& is);
Dataset load_dataset(const std::string& path);

}  // namespace dataio
}  // namespace slategen
