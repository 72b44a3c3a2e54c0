#pragma once

// Benchmark and crash-test harness: workload generation, exact metric
// counters, the single-segment load-factor sweep, crash-point sweeps over
// the structural operations and the restart-work probe. Every entry point
// returns a report with verdicts; CSV writers have fixed column sets that
// are listed next to each writer.

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dash/hashcore.hpp"
#include "dash/persist.hpp"
#include "dash/table.hpp"

namespace dash::bench {

enum class TableKind { eh, lh };
enum class Distribution { uniform, zipfian };
enum class OpClass { insert, pos_search, neg_search, remove };
inline constexpr std::size_t kOpClasses = 4;

const char* to_string(TableKind k);
const char* to_string(OpClass c);
TableKind parse_table(const std::string& s);

/// Operation ratios, indexed by OpClass.
struct Mix {
  std::array<double, kOpClasses> ratio{1.0, 0.0, 0.0, 0.0};

  /// Accepts a single class name (`insert`, `pos_search`, `neg_search`,
  /// `delete`), `mixed` (20% insert, 80% positive search), `mixed:R`
  /// (R insert, 1-R positive search) or a list like
  /// `insert=0.5,pos_search=0.3,delete=0.2`.
  static Mix parse(const std::string& text);
  [[nodiscard]] std::string describe() const;
};

struct WorkloadSpec {
  TableKind table = TableKind::eh;
  std::uint64_t preload = 100000;
  std::uint64_t ops = 1000000;
  Mix mix{};
  KeyMode key_mode = KeyMode::inline8;
  std::size_t key_len = 16;  // variable mode only
  int threads = 1;
  std::uint64_t seed = 1;
  Distribution distribution = Distribution::uniform;
  std::filesystem::path pool_path;  // empty: a temporary file
  std::size_t pool_bytes = 0;       // 0: sized from preload + ops
  int buckets_per_segment = 64;
  int stash_buckets = 2;
  std::uint64_t sample_every = 0;  // load-factor samples; 0: ops / 64

  /// Throws std::invalid_argument on an inconsistent spec.
  void validate() const;
};

/// Deterministic key stream: positive keys are index -> key bijections of
/// even inputs, negative keys of odd inputs, so the two never collide.
class KeyStream {
 public:
  explicit KeyStream(std::uint64_t seed) : seed_(seed) {}
  [[nodiscard]] std::uint64_t positive(std::uint64_t i) const;
  [[nodiscard]] std::uint64_t negative(std::uint64_t i) const;
  /// Fixed-length printable key for variable mode.
  [[nodiscard]] static std::string text(std::uint64_t key, std::size_t len);

 private:
  std::uint64_t seed_;
};

struct ClassMetrics {
  std::uint64_t ops = 0;
  std::uint64_t hits = 0;  // inserted / found / removed
  PersistCounters persist;
  ProbeStats probes;
};

struct PhaseMetrics {
  std::string name;
  std::uint64_t ops = 0;
  double seconds = 0;
  [[nodiscard]] double ops_per_sec() const { return seconds > 0 ? static_cast<double>(ops) / seconds : 0; }
  std::array<ClassMetrics, kOpClasses> classes{};
};

struct LoadSample {
  std::uint64_t ops_done;  // across all phases
  double load_factor;
  std::uint64_t segments;
};

struct MetricsReport {
  WorkloadSpec spec;
  std::vector<PhaseMetrics> phases;
  double peak_load_factor = 0;
  std::vector<LoadSample> timeline;
  // Capacity changes (segments) observed in single-threaded runs.
  std::vector<LoadSample> growth;
  TableStats stats;
  std::vector<std::string> failures;

  [[nodiscard]] bool ok() const { return failures.empty(); }
};

MetricsReport run(const WorkloadSpec& spec);

// ---- load factor ----------------------------------------------------------------

/// Insert techniques compared by the sweep, in increasing order.
enum class Features { bucketized, probing, balanced, stash };
inline constexpr std::array<Features, 4> kAllFeatures{Features::bucketized, Features::probing,
                                                      Features::balanced, Features::stash};
const char* to_string(Features f);
/// Policy and stash count for a feature level.
InsertPolicy policy_for(Features f);

struct SegmentFill {
  Features features;
  std::size_t segment_bytes;  // normal buckets only
  int K, S;
  double mean_peak;  // over trials
  double min_peak, max_peak;
  int trials;
};

struct TableFill {
  TableKind table;
  int S;
  std::uint64_t inserted;
  double peak;  // highest load factor sampled before any growth step
};

struct SweepReport {
  std::vector<SegmentFill> segments;
  std::vector<TableFill> tables;
  std::vector<std::string> failures;
  [[nodiscard]] bool ok() const { return failures.empty(); }
};

/// Fills one standalone segment per (size, features) until an insert
/// fails and records the peak load factor.
std::vector<SegmentFill> fill_segments(const std::vector<std::size_t>& segment_bytes,
                                       const std::vector<Features>& features, int trials,
                                       std::uint64_t seed, int stash_buckets = 2);
/// Inserts `n` keys into a full table and returns the peak load factor.
TableFill fill_table(TableKind kind, int stash_buckets, std::uint64_t n, std::uint64_t seed);

/// Segment sweep plus full-table peaks, with the ordering and threshold
/// verdicts applied.
SweepReport load_factor_sweep(const std::vector<std::size_t>& segment_bytes,
                              const std::vector<Features>& features, int trials, std::uint64_t seed,
                              std::uint64_t table_records);

// ---- crash sweeps ---------------------------------------------------------------

enum class Scenario { bucket_insert, displacement, segment_split, directory_doubling, lh_split };
inline constexpr std::array<Scenario, 5> kAllScenarios{
    Scenario::bucket_insert, Scenario::displacement, Scenario::segment_split,
    Scenario::directory_doubling, Scenario::lh_split};
const char* to_string(Scenario s);

struct ScenarioResult {
  Scenario scenario;
  TableKind table;
  std::uint64_t total_ops = 0;
  std::uint64_t points = 0;
  std::uint64_t matched_before = 0;
  std::uint64_t matched_after = 0;
  std::uint64_t duplicates_before_recovery = 0;
  std::vector<std::string> errors;
  [[nodiscard]] bool ok() const { return errors.empty(); }
};

struct CrashReport {
  std::vector<ScenarioResult> scenarios;
  [[nodiscard]] bool ok() const;
};

/// Runs each scenario's operation once per crash point; `max_points` caps
/// the points per scenario (nullopt: every persistence op).
CrashReport crash_sweep(const std::vector<Scenario>& scenarios, std::optional<std::uint64_t> max_points,
                        std::uint64_t seed);

// ---- restart work ----------------------------------------------------------------

struct RecoveryRow {
  TableKind table;
  std::uint64_t records;
  bool clean;
  PersistCounters pre_serve;  // pool work from open() until the first request
  double open_ms;
};

struct WarmupWindow {
  TableKind table;
  std::uint64_t window;  // index of `window_ops` searches after restart
  double ops_per_sec;
  std::uint64_t segments_recovered;  // cumulative
};

struct RecoveryReport {
  std::vector<RecoveryRow> rows;
  std::vector<WarmupWindow> warmup;
  std::vector<std::string> failures;
  [[nodiscard]] bool ok() const { return failures.empty(); }
};

/// Builds tables of each size, crashes (and separately shuts down
/// cleanly), restarts and records the pre-serve work. Verdicts: crash rows
/// are identical across sizes and clean restarts store exactly one byte.
RecoveryReport recovery_probe(const std::vector<TableKind>& tables, const std::vector<std::uint64_t>& sizes,
                              std::uint64_t seed, std::uint64_t warmup_windows = 20,
                              std::uint64_t window_ops = 2000);

// ---- output -----------------------------------------------------------------------

void print(std::ostream& os, const MetricsReport& r);
void print(std::ostream& os, const SweepReport& r);
void print(std::ostream& os, const CrashReport& r);
void print(std::ostream& os, const RecoveryReport& r);

// run: row,phase,op_class,ops,hits,seconds,ops_per_sec,stores,bytes_stored,
//      flushes,fences,key_compares,key_loads,stash_probes,chain_probes,
//      load_factor,segments
void write_csv(std::ostream& os, const MetricsReport& r);
// sweep: row,config,segment_bytes,K,S,trials_or_records,peak,min_peak,max_peak
void write_csv(std::ostream& os, const SweepReport& r);
// crash: scenario,table,total_ops,points,matched_before,matched_after,
//        duplicates_before_recovery,errors,verdict
void write_csv(std::ostream& os, const CrashReport& r);
// recovery: row,table,records,clean,stores,bytes_stored,flushes,fences,
//           open_ms,window,ops_per_sec,segments_recovered
void write_csv(std::ostream& os, const RecoveryReport& r);

}  // namespace dash::bench
