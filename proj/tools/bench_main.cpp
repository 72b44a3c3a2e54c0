// bench: workload runner, load-factor sweep, crash-point sweeps and the
// restart-work probe. Exit status: 0 all verdicts pass, 1 any verdict
// failed, 2 bad arguments.

#include <fmt/format.h>

#include <CLI11.hpp>
#include <fstream>
#include <iostream>

#include "dash/bench.hpp"

namespace db = dash::bench;

namespace {

template <class Report>
int finish(const Report& rep, const std::string& csv) {
  db::print(std::cout, rep);
  if (!csv.empty()) {
    std::ofstream out(csv);
    if (!out) {
      std::cerr << "cannot write " << csv << '\n';
      return 2;
    }
    db::write_csv(out, rep);
  }
  return rep.ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dash hash table benchmark and crash-test harness"};
  app.require_subcommand(1);

  std::string table = "eh";
  std::string mix = "insert";
  std::string key_mode = "inline8";
  std::string csv;
  std::string pool;
  db::WorkloadSpec spec;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--table", table, "eh or lh")->check(CLI::IsMember({"eh", "lh", "both"}));
    sub->add_option("--seed", spec.seed, "seed for the key stream");
    sub->add_option("--csv", csv, "write results as CSV to this path");
  };

  auto* run = app.add_subcommand("run", "preload, then run an operation mix");
  common(run);
  run->add_option("--preload", spec.preload, "records inserted before the measured phase");
  run->add_option("--ops", spec.ops, "operations in the measured phase");
  run->add_option("--mix", mix,
                  "insert | pos_search | neg_search | delete | mixed[:R] | class=ratio,...");
  run->add_option("--threads", spec.threads, "worker threads")->check(CLI::Range(1, 64));
  run->add_option("--pool", pool, "pool file (default: a temporary file)");
  run->add_option("--key-mode", key_mode, "inline8 or variable")->check(CLI::IsMember({"inline8", "variable"}));
  run->add_option("--key-len", spec.key_len, "key length in variable mode");
  run->add_option("--buckets", spec.buckets_per_segment, "normal buckets per segment");
  run->add_option("--stash", spec.stash_buckets, "stash buckets per segment");
  run->add_option("--sample-every", spec.sample_every, "load-factor sample interval in ops");

  auto* sweep = app.add_subcommand("sweep", "single-segment and full-table load factor");
  common(sweep);
  std::vector<std::size_t> seg_kb{1, 2, 4, 8, 16, 32, 64, 128};
  int trials = 5;
  std::uint64_t records = 1000000;
  sweep->add_option("--segment-kb", seg_kb, "segment sizes in KB");
  sweep->add_option("--trials", trials, "fills per configuration")->check(CLI::PositiveNumber);
  sweep->add_option("--records", records, "inserts for the full-table peak (0 skips it)");

  auto* crash = app.add_subcommand("crash", "crash-point sweeps over structural operations");
  common(crash);
  std::optional<std::uint64_t> points;
  std::vector<std::string> scenarios;
  crash->add_option("--points", points, "crash points per scenario (default: all)");
  crash->add_option("--scenario", scenarios, "bucket_insert displacement segment_split directory_doubling lh_split");

  auto* recovery = app.add_subcommand("recovery", "pre-serve restart work across table sizes");
  common(recovery);
  std::vector<std::uint64_t> sizes{10000, 100000, 1000000};
  std::uint64_t windows = 20;
  recovery->add_option("--sizes", sizes, "record counts");
  recovery->add_option("--windows", windows, "post-restart search windows");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  std::vector<db::TableKind> kinds;
  if (table == "both") {
    kinds = {db::TableKind::eh, db::TableKind::lh};
  } else {
    kinds = {db::parse_table(table)};
  }

  try {
    if (*run) {
      if (table == "both") throw std::invalid_argument("run takes --table eh or lh");
      spec.table = kinds.front();
      spec.mix = db::Mix::parse(mix);
      spec.key_mode = key_mode == "variable" ? dash::KeyMode::variable : dash::KeyMode::inline8;
      spec.pool_path = pool;
      return finish(db::run(spec), csv);
    }
    if (*sweep) {
      std::vector<std::size_t> bytes;
      for (auto kb : seg_kb) bytes.push_back(kb * 1024);
      return finish(db::load_factor_sweep(bytes, {db::kAllFeatures.begin(), db::kAllFeatures.end()}, trials,
                                          spec.seed, records),
                    csv);
    }
    if (*crash) {
      std::vector<db::Scenario> chosen;
      for (auto s : db::kAllScenarios) {
        const bool named = scenarios.empty() ||
                           std::find(scenarios.begin(), scenarios.end(), db::to_string(s)) != scenarios.end();
        const auto kind = s == db::Scenario::lh_split ? db::TableKind::lh : db::TableKind::eh;
        const bool table_ok = crash->count("--table") == 0 ||
                              std::find(kinds.begin(), kinds.end(), kind) != kinds.end();
        if (named && table_ok) chosen.push_back(s);
      }
      for (const auto& name : scenarios) {
        if (std::none_of(db::kAllScenarios.begin(), db::kAllScenarios.end(),
                         [&](auto s) { return name == db::to_string(s); })) {
          throw std::invalid_argument("unknown scenario '" + name + "'");
        }
      }
      return finish(db::crash_sweep(chosen, points, spec.seed), csv);
    }
    if (*recovery) {
      if (recovery->count("--table") == 0) kinds = {db::TableKind::eh, db::TableKind::lh};
      return finish(db::recovery_probe(kinds, sizes, spec.seed, windows), csv);
    }
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
