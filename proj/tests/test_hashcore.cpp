#include "dash/hashcore.hpp"

#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "support/temp_path.hpp"

using namespace dash;
using dash::testing::TempPath;

namespace {

struct Fixture {
  TempPath path{"hashcore"};
  PersistentPool pool = PersistentPool::create(path, 4u << 20, PoolMode::crash_sim);
  PoolOffset base = pool.alloc_detached(8 * bucket_layout::kBucketSize, {});

  [[nodiscard]] Bucket bucket(int i) {
    return Bucket(pool, base + static_cast<PoolOffset>(i) * bucket_layout::kBucketSize);
  }
  [[nodiscard]] KeyMatcher matcher(std::uint64_t k) const {
    return KeyMatcher(pool, KeyMode::inline8, k);
  }
};

std::uint8_t fp_of(std::uint64_t k) { return fingerprint(hash_word(k)); }

// Smallest key > `from` whose fingerprint equals `want`.
std::uint64_t key_with_fp(std::uint8_t want, std::uint64_t from) {
  for (std::uint64_t k = from + 1;; ++k) {
    if (fp_of(k) == want) return k;
  }
}

// Smallest key > `from` whose fingerprint differs from `avoid`.
std::uint64_t key_without_fp(std::uint8_t avoid, std::uint64_t from) {
  for (std::uint64_t k = from + 1;; ++k) {
    if (fp_of(k) != avoid) return k;
  }
}

ProbeStats probe_delta(const auto& fn) {
  const auto before = probe_stats();
  fn();
  const auto after = probe_stats();
  return {after.key_compares - before.key_compares, after.key_loads - before.key_loads,
          after.bucket_probes - before.bucket_probes, after.stash_probes - before.stash_probes,
          after.chain_probes - before.chain_probes, after.retries - before.retries};
}

// Overflow fields of `w` with the two low fingerprint bytes masked off.
std::uint64_t fields(const OverflowWord& w) { return w.fields(); }

}  // namespace

TEST_CASE("fingerprint is the low byte of the hash") {
  CHECK(fingerprint(0x0000000000000000ull) == 0x00);
  CHECK(fingerprint(0x123456789ABCDEF0ull) == 0xF0);
  CHECK(fingerprint(0xFFFFFFFFFFFFFF01ull) == 0x01);
}

TEST_CASE("hashes are deterministic and spread") {
  CHECK(hash_word(42) == hash_word(42));
  CHECK(hash_bytes("abc") == hash_bytes(std::string_view("abc")));
  CHECK(hash_key(KeyView(std::uint64_t{7})) == hash_word(7));
  CHECK(hash_key(KeyView(std::string_view("xyz"))) == hash_bytes("xyz"));
  // Low bytes of consecutive keys should cover most of the 256 values.
  std::set<std::uint8_t> fps;
  for (std::uint64_t k = 0; k < 4096; ++k) fps.insert(fp_of(k));
  CHECK(fps.size() > 250);
}

TEST_CASE("bucket layout is 256 bytes with 14 slots") {
  CHECK(bucket_layout::kSlotOff + bucket_layout::kSlots * bucket_layout::kSlotSize ==
        bucket_layout::kBucketSize);
  CHECK(bucket_layout::kOverflowFpOff + bucket_layout::kOverflowSlots == 26);
}

TEST_CASE("empty bucket search finds nothing without comparing keys") {
  Fixture f;
  const auto B = f.bucket(0);
  const auto d = probe_delta([&] { CHECK(B.find(f.matcher(5), fp_of(5), Membership::any) == -1); });
  CHECK(d.key_compares == 0);
}

TEST_CASE("insert into an empty bucket") {
  Fixture f;
  const auto B = f.bucket(0);
  CHECK(B.insert(11, 111, fp_of(11), false) == 0);
  CHECK(B.count() == 1);
  CHECK(B.packed().alloc() == 0b1);
  CHECK(B.packed().membership() == 0);
  CHECK(B.fp(0) == fp_of(11));
  const auto d = probe_delta([&] { CHECK(B.find(f.matcher(11), fp_of(11), Membership::any) == 0); });
  CHECK(d.key_compares >= 1);
  CHECK(B.value(0) == 111);
}

TEST_CASE("fingerprint mismatch costs no key comparison") {
  Fixture f;
  const auto B = f.bucket(0);
  const std::uint64_t a = 1000;
  const std::uint64_t b = key_without_fp(fp_of(a), a);
  B.insert(a, 1, fp_of(a), false);
  const auto d = probe_delta([&] { CHECK(B.find(f.matcher(b), fp_of(b), Membership::any) == -1); });
  CHECK(d.key_compares == 0);
}

TEST_CASE("fingerprint collisions keep both keys reachable") {
  Fixture f;
  const auto B = f.bucket(0);
  const std::uint64_t a = 77;
  const std::uint64_t b = key_with_fp(fp_of(a), a);
  REQUIRE(hash_word(a) != hash_word(b));
  REQUIRE(fp_of(a) == fp_of(b));
  B.insert(a, 10, fp_of(a), false);
  B.insert(b, 20, fp_of(b), false);
  const int sa = B.find(f.matcher(a), fp_of(a), Membership::any);
  const int sb = B.find(f.matcher(b), fp_of(b), Membership::any);
  REQUIRE(sa >= 0);
  REQUIRE(sb >= 0);
  CHECK(B.value(sa) == 10);
  CHECK(B.value(sb) == 20);
  // The second key is only found after comparing against the first.
  const auto d = probe_delta([&] { (void)B.find(f.matcher(b), fp_of(b), Membership::any); });
  CHECK(d.key_compares == 2);
}

TEST_CASE("bucket search has no false negatives") {
  Fixture f;
  std::mt19937_64 rng(3);
  for (int round = 0; round < 200; ++round) {
    const auto B = f.bucket(round % 8);
    while (B.count() > 0) B.erase(std::countr_zero(B.packed().alloc()));
    std::map<std::uint64_t, std::uint64_t> ref;
    const int n = static_cast<int>(rng() % 15);
    // Keys from a tiny range force fingerprint collisions.
    while (static_cast<int>(ref.size()) < n) {
      const std::uint64_t k = rng() % 600;
      if (ref.count(k) != 0) continue;
      ref[k] = rng();
      B.insert(k, ref[k], fp_of(k), false);
    }
    for (std::uint64_t q = 0; q < 600; ++q) {
      const int s = B.find(f.matcher(q), fp_of(q), Membership::any);
      const auto it = ref.find(q);
      REQUIRE((s >= 0) == (it != ref.end()));
      if (s >= 0) CHECK(B.value(s) == it->second);
    }
  }
}

TEST_CASE("delete and reuse of the lowest free slot") {
  Fixture f;
  const auto B = f.bucket(0);
  for (std::uint64_t k = 1; k <= 3; ++k) B.insert(k, k, fp_of(k), false);
  const int s2 = B.find(f.matcher(2), fp_of(2), Membership::any);
  REQUIRE(s2 == 1);
  B.erase(s2);
  CHECK(B.count() == 2);
  CHECK(B.find(f.matcher(2), fp_of(2), Membership::any) == -1);
  CHECK(B.find(f.matcher(99), fp_of(99), Membership::any) == -1);
  CHECK(B.count() == 2);
  CHECK(B.insert(50, 5, fp_of(50), false) == 1);
  CHECK(B.count() == 3);
}

TEST_CASE("probing residents carry the membership bit") {
  Fixture f;
  const auto B = f.bucket(0);
  B.insert(1, 1, fp_of(1), false);
  const int s = B.insert(2, 2, fp_of(2), true);
  CHECK(s == 1);
  CHECK(B.packed().membership() == 0b10);
  CHECK(B.find(f.matcher(2), fp_of(2), Membership::home) == -1);
  CHECK(B.find(f.matcher(2), fp_of(2), Membership::probing) == 1);
  CHECK(B.lowest_with_membership(true) == 1);
  CHECK(B.lowest_with_membership(false) == 0);
  B.erase(1);
  CHECK(B.packed().membership() == 0);
}

TEST_CASE("counter equals popcount and a full bucket rejects inserts") {
  Fixture f;
  const auto B = f.bucket(0);
  std::mt19937_64 rng(9);
  for (int i = 0; i < 14; ++i) {
    B.insert(100 + i, i, fp_of(100 + i), (rng() & 1) != 0);
    const auto pw = B.packed();
    CHECK(pw.counter() == std::popcount(pw.alloc()));
    CHECK((pw.membership() & ~pw.alloc()) == 0);
  }
  CHECK(B.full());
  CHECK_THROWS_AS(B.insert(999, 0, 0, false), BucketFull);
}

TEST_CASE("the packed word only changes through 4-byte stores") {
  Fixture f;
  const auto B = f.bucket(1);
  f.pool.set_store_trace(true);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 500; ++i) {
    if (!B.full() && (B.count() == 0 || (rng() & 1) != 0)) {
      B.insert(rng(), i, static_cast<std::uint8_t>(rng()), (rng() & 1) != 0);
    } else {
      B.erase(std::countr_zero(B.packed().alloc()));
    }
  }
  const auto trace = f.pool.store_trace();
  f.pool.set_store_trace(false);
  const auto lo = B.offset() + bucket_layout::kPackedOff;
  int packed_stores = 0;
  for (const auto& e : trace) {
    if (e.off + e.len <= lo || e.off >= lo + 4) continue;
    CHECK(e.off == lo);
    CHECK(e.len == 4);
    ++packed_stores;
  }
  CHECK(packed_stores == 500);
}

TEST_CASE("version lock") {
  Fixture f;
  const auto B = f.bucket(0);
  const auto v0 = B.read_version();
  B.lock();
  const auto locked = B.read_version();
  CHECK(vlock::is_locked(locked));
  CHECK_FALSE(B.try_lock());
  B.unlock();
  const auto v1 = B.read_version();
  CHECK(v1 == v0 + 1);
  CHECK_FALSE(vlock::is_locked(v1));

  SUBCASE("snapshot taken while locked never verifies") {
    B.lock();
    const auto snap = B.read_version();
    CHECK_FALSE(B.verify(snap));
    B.unlock();
    CHECK_FALSE(B.verify(snap));
  }
  SUBCASE("an intervening write cycle fails verification") {
    const auto snap = B.read_version();
    CHECK(B.verify(snap));
    B.lock();
    B.unlock();
    CHECK_FALSE(B.verify(snap));
  }
}

TEST_CASE("first overflow uses a fingerprint slot") {
  Fixture f;
  const auto home = f.bucket(0);
  const auto probe = f.bucket(1);
  set_overflow_meta(home, probe, 0xAB, 1);
  const auto w = home.overflow();
  CHECK(w.overflow_bit());
  CHECK(w.fp_bitmap() == 0b1);
  CHECK(w.stash_index(0) == 1);
  CHECK(w.count() == 0);
  CHECK(home.overflow_fp(0) == 0xAB);
  CHECK(probe.overflow().fields() == 0);
}

TEST_CASE("overflow spills to the probing bucket, then to the counter") {
  Fixture f;
  const auto home = f.bucket(2);
  const auto probe = f.bucket(3);
  const auto next = f.bucket(4);
  for (int i = 0; i < 4; ++i) set_overflow_meta(home, probe, static_cast<std::uint8_t>(i), 0);
  CHECK(home.overflow().fp_bitmap() == 0xF);
  // Fifth overflow lands in the neighbour's slots, flagged by membership.
  set_overflow_meta(home, probe, 0x55, 1);
  CHECK(probe.overflow().fp_bitmap() == 0b1);
  CHECK(probe.overflow().membership() == 0b1);
  CHECK(probe.overflow_fp(0) == 0x55);
  CHECK(home.overflow().count() == 0);

  // With the neighbour full too, the next overflow is only counted.
  for (int i = 0; i < 3; ++i) set_overflow_meta(probe, next, static_cast<std::uint8_t>(0x60 + i), 0);
  CHECK(probe.overflow().fp_bitmap() == 0xF);
  set_overflow_meta(home, probe, 0x77, 0);
  CHECK(home.overflow().count() == 1);
  CHECK(home.overflow().overflow_bit());
}

TEST_CASE("chain overflows are counted") {
  Fixture f;
  const auto home = f.bucket(0);
  set_overflow_meta(home, f.bucket(1), 0x12, -1);
  CHECK(home.overflow().fp_bitmap() == 0);
  CHECK(home.overflow().count() == 1);
  clear_overflow_meta(home, f.bucket(1), 0x12, -1);
  CHECK(home.overflow().fields() == 0);
}

TEST_CASE("clear reverses set") {
  Fixture f;
  std::mt19937_64 rng(17);
  for (int round = 0; round < 300; ++round) {
    const auto home = f.bucket(0);
    const auto probe = f.bucket(1);
    home.store_overflow({});
    probe.store_overflow({});
    // Background state from the neighbour's own overflows.
    const int own = static_cast<int>(rng() % 3);
    for (int i = 0; i < own; ++i) set_overflow_meta(probe, f.bucket(2), static_cast<std::uint8_t>(rng()), 0);
    const auto h0 = fields(home.overflow());
    const auto p0 = fields(probe.overflow());

    struct Op {
      std::uint8_t fp;
      int stash;
    };
    std::vector<Op> ops;
    const int n = 1 + static_cast<int>(rng() % 12);
    for (int i = 0; i < n; ++i) {
      ops.push_back({static_cast<std::uint8_t>(rng() % 4), static_cast<int>(rng() % 3) - 1});
      set_overflow_meta(home, probe, ops.back().fp, ops.back().stash);
    }
    std::shuffle(ops.begin(), ops.end(), rng);
    for (const auto& op : ops) clear_overflow_meta(home, probe, op.fp, op.stash);
    CHECK(fields(home.overflow()) == h0);
    CHECK(fields(probe.overflow()) == p0);
  }
}

TEST_CASE("overflow counter saturates at 255") {
  Fixture f;
  const auto home = f.bucket(0);
  for (int i = 0; i < 300; ++i) set_overflow_meta(home, f.bucket(1), 0, -1);
  CHECK(home.overflow().count() == 255);
  clear_overflow_meta(home, f.bucket(1), 0, -1);
  CHECK(home.overflow().count() == 255);
}

TEST_CASE("overflow stores keep overflow fingerprints 16 and 17") {
  Fixture f;
  const auto home = f.bucket(0);
  const auto probe = f.bucket(1);
  for (int i = 0; i < 4; ++i) set_overflow_meta(home, probe, static_cast<std::uint8_t>(0xA0 + i), 0);
  for (int i = 0; i < 4; ++i) CHECK(home.overflow_fp(i) == 0xA0 + i);
}

TEST_CASE("variable-length key records") {
  Fixture f;
  const auto rec = write_key_record(f.pool, "hello world");
  CHECK(read_key_record(f.pool, rec) == "hello world");
  const KeyMatcher yes(f.pool, KeyMode::variable, KeyView(std::string_view("hello world")));
  const KeyMatcher shorter(f.pool, KeyMode::variable, KeyView(std::string_view("hello")));
  const auto d = probe_delta([&] {
    CHECK(yes.matches(rec));
    CHECK_FALSE(shorter.matches(rec));
  });
  CHECK(d.key_compares == 2);
  CHECK(d.key_loads == 2);
  CHECK(hash_key_word(f.pool, KeyMode::variable, rec) == hash_bytes("hello world"));
  // Offsets outside the data area are rejected rather than read.
  CHECK_FALSE(yes.matches(8));
}

TEST_CASE("negative probes rarely compare keys") {
  Fixture f;
  for (int b = 0; b < 8; ++b) {
    for (int i = 0; i < 14; ++i) {
      const std::uint64_t k = static_cast<std::uint64_t>(b) * 1000 + i;
      f.bucket(b).insert(k, k, fp_of(k), false);
    }
  }
  std::mt19937_64 rng(21);
  constexpr int kProbes = 100000;
  const auto d = probe_delta([&] {
    for (int i = 0; i < kProbes; ++i) {
      const std::uint64_t q = (rng() | (1ull << 62));
      (void)f.bucket(i % 8).find(f.matcher(q), fp_of(q), Membership::any);
    }
  });
  CHECK(static_cast<double>(d.key_compares) / kProbes < 0.1);
}

TEST_CASE("insert crash sweep: a record is either absent or complete") {
  Fixture f;
  const auto B = f.bucket(0);
  B.insert(1, 10, fp_of(1), false);
  f.pool.fence();
  const auto start = f.pool.persist_op_index();
  std::uint64_t total = 0;
  {
    auto probe = f.pool.clone();
    const auto s0 = probe.persist_op_index();
    Bucket(probe, B.offset()).insert(2, 20, fp_of(2), true);
    total = probe.persist_op_index() - s0;
  }
  REQUIRE(total > 0);
  REQUIRE(f.pool.persist_op_index() == start);
  int absent = 0, present = 0;
  for (std::uint64_t k = 0; k <= total; ++k) {
    auto work = f.pool.clone();
    work.arm_crash(work.persist_op_index() + k);
    Bucket(work, B.offset()).insert(2, 20, fp_of(2), true);
    auto after = work.crash();
    const Bucket A(after, B.offset());
    const auto pw = A.packed();
    CHECK(pw.counter() == std::popcount(pw.alloc()));
    REQUIRE(A.find(KeyMatcher(after, KeyMode::inline8, 1), fp_of(1), Membership::any) == 0);
    const int s = A.find(KeyMatcher(after, KeyMode::inline8, 2), fp_of(2), Membership::any);
    if (s < 0) {
      ++absent;
      CHECK(pw.alloc() == 0b1);
    } else {
      ++present;
      CHECK(A.value(s) == 20);
      CHECK(pw.membership() == (1u << s));
    }
  }
  CHECK(absent > 0);
  CHECK(present > 0);
  // Until the packed word is durable, the record stays invisible.
  auto early = f.pool.clone();
  early.arm_crash(early.persist_op_index() + total - 2);
  Bucket(early, B.offset()).insert(2, 20, fp_of(2), true);
  auto img = early.crash();
  CHECK(Bucket(img, B.offset()).count() == 1);
}

TEST_CASE("displacement crash leaves the record in one or both buckets") {
  Fixture f;
  const auto from = f.bucket(0);
  const auto to = f.bucket(1);
  from.insert(5, 50, fp_of(5), false);
  std::uint64_t total = 0;
  {
    auto probe = f.pool.clone();
    const auto s0 = probe.persist_op_index();
    move_record(Bucket(probe, from.offset()), 0, Bucket(probe, to.offset()), true);
    total = probe.persist_op_index() - s0;
  }
  int both = 0;
  for (std::uint64_t k = 0; k <= total; ++k) {
    auto work = f.pool.clone();
    work.arm_crash(work.persist_op_index() + k);
    move_record(Bucket(work, from.offset()), 0, Bucket(work, to.offset()), true);
    auto after = work.crash();
    const KeyMatcher m(after, KeyMode::inline8, 5);
    const bool in_src = Bucket(after, from.offset()).find(m, fp_of(5), Membership::any) >= 0;
    const bool in_dst = Bucket(after, to.offset()).find(m, fp_of(5), Membership::any) >= 0;
    CHECK((in_src || in_dst));
    both += static_cast<int>(in_src && in_dst);
  }
  CHECK(both > 0);
}
