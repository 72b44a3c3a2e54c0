#pragma once

// Crash-point enumeration for a single table operation. The base pool holds
// a cleanly shut down table whose contents equal `before`; the operation
// takes it to `after`. For every persistence op the operation issues, the
// sweep crashes right before it, restarts, recovers every segment and
// requires the contents to equal one of the two models exactly, with no
// allocator leak.

#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "dash/persist.hpp"
#include "dash/table.hpp"

namespace dash::crash_check {

using Model = std::map<std::uint64_t, std::uint64_t>;

struct SweepResult {
  std::uint64_t points = 0;
  std::uint64_t total_ops = 0;  // persistence ops issued by the operation
  std::uint64_t matched_before = 0;
  std::uint64_t matched_after = 0;
  // Crash images holding a duplicated key before recovery ran.
  std::uint64_t duplicates_before_recovery = 0;
  std::vector<std::string> errors;

  [[nodiscard]] bool ok() const { return errors.empty(); }
};

// Contents as a multimap so duplicates are visible.
template <class Table>
std::multimap<std::uint64_t, std::uint64_t> contents(const Table& t) {
  std::multimap<std::uint64_t, std::uint64_t> out;
  t.for_each([&](std::uint64_t k, std::uint64_t v) { out.emplace(k, v); });
  return out;
}

inline bool same(const std::multimap<std::uint64_t, std::uint64_t>& got, const Model& want) {
  if (got.size() != want.size()) return false;
  auto it = got.begin();
  for (const auto& [k, v] : want) {
    if (it->first != k || it->second != v) return false;
    ++it;
  }
  return true;
}

inline bool has_duplicate(const std::multimap<std::uint64_t, std::uint64_t>& got) {
  for (auto it = got.begin(); it != got.end(); ++it) {
    auto nx = std::next(it);
    if (nx != got.end() && nx->first == it->first) return true;
  }
  return false;
}

template <class Table>
std::uint64_t op_length(const PersistentPool& base, const std::function<void(Table&)>& op) {
  auto work = base.clone();
  auto t = Table::open(work);
  const auto start = work.persist_op_index();
  op(t);
  return work.persist_op_index() - start;
}

/// `extra_check` may add table-specific invariants; it returns an error
/// string or empty. `limit` caps the number of crash points visited.
template <class Table>
SweepResult sweep_crash_points(const PersistentPool& base, const Model& before, const Model& after,
                               const std::function<void(Table&)>& op,
                               const std::function<std::string(Table&)>& extra_check = {},
                               std::optional<std::uint64_t> limit = std::nullopt) {
  SweepResult res;
  const auto total = op_length<Table>(base, op);
  res.total_ops = total;
  std::uint64_t points = total + 1;
  if (limit && *limit < points) points = *limit;
  for (std::uint64_t k = 0; k < points; ++k) {
    auto work = base.clone();
    auto live = Table::open(work);
    work.arm_crash(work.persist_op_index() + k);
    op(live);
    auto img = work.crash();
    auto t = Table::open(img);
    if (has_duplicate(contents(t))) ++res.duplicates_before_recovery;
    t.recover_all();
    ++res.points;

    std::ostringstream err;
    const auto got = contents(t);
    const bool is_before = same(got, before);
    const bool is_after = same(got, after);
    if (is_before) ++res.matched_before;
    if (is_after) ++res.matched_after;
    if (!is_before && !is_after) err << "contents match neither model (" << got.size() << " records); ";
    const Model& want = is_after ? after : before;
    for (const auto& [key, value] : want) {
      const auto v = t.search(key);
      if (!v || *v != value) {
        err << "search mismatch for key " << key << "; ";
        break;
      }
    }
    const auto audit = img.audit(t.owned_blocks());
    if (!audit.ok()) {
      err << "allocator audit failed (leaked " << audit.leaked.size() << ", double "
          << audit.double_owned.size() << ", unknown " << audit.unknown_owned.size() << "); ";
    }
    if (extra_check) err << extra_check(t);
    // The recovered table must keep working.
    const std::uint64_t probe_key = 0xFFFF'FFFF'0000'0000ull + k;
    if (t.search(probe_key) || t.insert(probe_key, 1) != InsertStatus::inserted ||
        t.search(probe_key) != std::optional<std::uint64_t>(1) || !t.remove(probe_key)) {
      err << "post-recovery insert/search/remove failed; ";
    }
    if (!err.str().empty()) res.errors.push_back("crash point " + std::to_string(k) + ": " + err.str());
  }
  return res;
}

}  // namespace dash::crash_check
