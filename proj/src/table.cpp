#include "dash/table.hpp"

#include <stdexcept>

namespace dash::detail {

std::uint64_t key_word_for(PersistentPool& pool, KeyMode mode, const KeyView& key) {
  return mode == KeyMode::inline8 ? key.word() : write_key_record(pool, key.bytes());
}

void check_key(KeyMode mode, const KeyView& key) {
  if (key.is_variable() != (mode == KeyMode::variable)) {
    throw std::invalid_argument("key kind does not match the table's key mode");
  }
}

std::uint8_t restart_pool(PersistentPool& pool, const std::function<void()>& stamp_all) {
  if (pool.clean()) {
    pool.set_clean(false);
    return pool.global_version();
  }
  // Version 0 is reserved once the counter has wrapped: segments stamped 0
  // never match, so each one is recovered on first access.
  const auto v = pool.global_version();
  const std::uint8_t next = v == 255 ? 1 : static_cast<std::uint8_t>(v + 1);
  if (v == 255) stamp_all();
  pool.set_global_version(next);
  return next;
}

}  // namespace dash::detail
