// capsule: run scenarios, compile EDL, scan binaries, filter traces.
//
// Exit codes: 0 ok, 1 mismatch / hit, 2 usage error, 3 internal error.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "capsule/edl.hpp"
#include "capsule/scan.hpp"
#include "capsule/scenario.hpp"

using namespace capsule;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw UsageError("cannot write " + path);
  out << text;
}

int cmd_run(const std::string& file, std::optional<uint64_t> seed, const std::string& trace_file, bool sweep) {
  json j;
  try {
    j = json::parse(slurp(file));
  } catch (const json::parse_error& e) {
    throw UsageError(std::string("bad JSON: ") + e.what());
  }
  auto s = scenario::from_json(j);
  scenario::RunOptions opt;
  opt.seed = seed;
  opt.sweep_every_step = sweep;
  auto out = scenario::run(s, opt);
  if (!trace_file.empty()) spit(trace_file, out.trace);
  std::cout << scenario::report_json(out.report).dump(2) << "\n";
  return out.report.matches ? 0 : 1;
}

int cmd_corpus(const std::string& dump_dir, bool sweep, bool twice) {
  auto corpus = scenario::builtin_corpus();
  if (!dump_dir.empty()) {
    std::filesystem::create_directories(dump_dir);
    for (const auto& s : corpus) spit(dump_dir + "/" + s.name + ".json", scenario::to_json(s).dump(2) + "\n");
  }
  json all = json::array();
  bool ok = true;
  for (const auto& s : corpus) {
    scenario::RunOptions opt;
    opt.sweep_every_step = sweep;
    opt.check_determinism = twice;
    auto r = scenario::run(s, opt).report;
    ok &= r.matches;
    json row{{"scenario", r.scenario}, {"verdict", r.verdict}, {"reason", r.reason}, {"matches", r.matches}};
    if (!r.mismatches.empty()) row["mismatches"] = r.mismatches;
    all.push_back(row);
  }
  std::cout << all.dump(2) << "\n";
  return ok ? 0 : 1;
}

int cmd_edlc(const std::string& file, const std::string& out_file, uint64_t capacity) {
  std::string text = slurp(file);
  try {
    auto spec = edl::parse(text);
    auto edges = edl::gen_edge(spec, capacity);
    std::string doc = edl::to_json(spec, edges).dump(2) + "\n";
    if (out_file.empty())
      std::cout << doc;
    else
      spit(out_file, doc);
    return 0;
  } catch (const edl::EdlError& e) {
    json err{{"error", std::string(edl::to_string(e.kind()))}, {"line", e.line()}, {"col", e.col()},
             {"message", e.what()}};
    std::cout << err.dump(2) << "\n";
    return 1;
  }
}

int cmd_scan(const std::string& file, bool parallel) {
  std::string data = slurp(file);
  std::span<const uint8_t> bytes(reinterpret_cast<const uint8_t*>(data.data()), data.size());
  auto hits = parallel ? inspector::scan_region_parallel(bytes) : inspector::scan_region_serial(bytes);
  for (auto h : hits) std::cout << "offset=" << h << " bytes=0f01ef\n";
  if (hits.empty()) std::cout << "clean\n";
  return hits.empty() ? 0 : 1;
}

// Trace lines look like `step=<n> thread=<t> ev=<kind> ...`.
std::optional<std::string> field(const std::string& line, const std::string& key) {
  std::string needle = key + "=";
  size_t pos = line.rfind(needle, 0) == 0 ? 0 : line.find(" " + needle);
  if (pos == std::string::npos) return std::nullopt;
  if (pos) ++pos;
  pos += needle.size();
  return line.substr(pos, line.find(' ', pos) - pos);
}

int cmd_trace(const std::string& file, const std::vector<std::string>& evs, std::optional<int> thread,
              std::optional<uint64_t> from, std::optional<uint64_t> to) {
  std::istringstream in(slurp(file));
  std::string line;
  size_t shown = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto step = field(line, "step");
    if (!step) throw UsageError("not a trace line: " + line);
    uint64_t st = std::stoull(*step);
    if (from && st < *from) continue;
    if (to && st > *to) continue;
    if (thread && field(line, "thread") != std::to_string(*thread)) continue;
    if (!evs.empty() && std::find(evs.begin(), evs.end(), field(line, "ev").value_or("")) == evs.end()) continue;
    std::cout << line << "\n";
    ++shown;
  }
  std::cerr << shown << " event(s)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Simulated SGX enclave isolation with protection keys"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "Run one scenario document");
  std::string run_file, trace_file;
  std::optional<uint64_t> seed;
  bool run_sweep = false;
  run->add_option("scenario", run_file, "Scenario JSON")->required();
  run->add_option("--seed", seed, "Override the scenario seed");
  run->add_option("--trace", trace_file, "Write the full trace here");
  run->add_flag("--sweep", run_sweep, "Audit W^X and WRPKRU absence after every step");

  auto* corpus = app.add_subcommand("corpus", "Run the built-in scenarios");
  std::string dump_dir;
  bool corpus_sweep = false, twice = false;
  corpus->add_option("--dump", dump_dir, "Also write each scenario as JSON into this directory");
  corpus->add_flag("--sweep", corpus_sweep, "Audit W^X and WRPKRU absence after every step");
  corpus->add_flag("--determinism", twice, "Run each scenario twice and compare traces");

  auto* edlc = app.add_subcommand("edlc", "Compile an EDL file to a layout description");
  std::string edl_file, edl_out;
  uint64_t capacity = 16 * 4096;
  edlc->add_option("edl", edl_file, "EDL source")->required();
  edlc->add_option("-o,--output", edl_out, "Output JSON (default stdout)");
  edlc->add_option("--capacity", capacity, "Parameter buffer size in bytes");

  auto* scan = app.add_subcommand("scan", "Report every 0F 01 EF in a binary file");
  std::string scan_file;
  bool parallel = false;
  scan->add_option("file", scan_file, "Binary file")->required();
  scan->add_flag("--parallel", parallel, "Use the OpenMP kernel");

  auto* trace = app.add_subcommand("trace", "Filter a saved trace");
  std::string tr_file;
  std::vector<std::string> evs;
  std::optional<int> thread;
  std::optional<uint64_t> from, to;
  trace->add_option("file", tr_file, "Trace text file")->required();
  trace->add_option("--ev", evs, "Event kinds to keep");
  trace->add_option("--thread", thread, "Thread id to keep (-1 for host-wide events)");
  trace->add_option("--from", from, "First step");
  trace->add_option("--to", to, "Last step");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (*run) return cmd_run(run_file, seed, trace_file, run_sweep);
    if (*corpus) return cmd_corpus(dump_dir, corpus_sweep, twice);
    if (*edlc) return cmd_edlc(edl_file, edl_out, capacity);
    if (*scan) return cmd_scan(scan_file, parallel);
    if (*trace) return cmd_trace(tr_file, evs, thread, from, to);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const scenario::SchemaError& e) {
    std::cerr << "schema error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
  return 2;
}
