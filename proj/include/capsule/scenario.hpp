#pragma once

// Scenario documents (JSON), the seeded scheduler that drives them, and the
// per-run report.

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "capsule/image.hpp"
#include "capsule/runtime.hpp"

namespace capsule::scenario {

class SchemaError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NondeterminismError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EnclaveManifest {
  EnclaveSource source;  // source.ecalls is filled from the EDL
  std::string edl;
};

struct Call {
  std::string enclave;
  std::string fn;
  nlohmann::json args = nlohmann::json::object();  // name -> number | hex string
  std::optional<uint64_t> expect_ret;
  std::map<std::string, std::string> expect_out;  // param -> hex
  bool must_complete() const { return expect_ret.has_value() || !expect_out.empty(); }
};

struct HostScript {
  uint64_t delay = 0;           // idle steps before the first call
  std::string start_after;      // trace event kind that must have occurred first
  std::vector<Call> calls;
};

// Runs `thread` at `step`, or for `count` consecutive steps right after the
// first event of kind `after` recorded by another thread.
struct Pin {
  int thread = 0;
  std::optional<uint64_t> step;
  std::string after;
  uint64_t count = 1;
};

// Interrupt (AEX) for `thread` at the first step >= `step` where it is in
// enclave mode (`when` = "any") or inside an inspection entry ("inspection").
// The thread is then not scheduled for `hold` steps.
struct AexInjection {
  int thread = 0;
  uint64_t step = 0;
  std::string when = "any";
  uint64_t hold = 0;
};

// Isolation audit: while `thread` first runs an ordinary ECALL, probe
// `target` (a symbol such as "b.pb0") with its enclave-mode context.
struct Audit {
  int thread = 0;
  std::string target;
  bool expect_fault = true;
};

struct Expectation {
  std::string verdict = "passed";  // passed | blocked | aborted
  std::string reason;
};

struct Scenario {
  std::string name;
  std::string description;
  uint64_t seed = 0;
  bool patched_kernel = true;
  std::vector<EnclaveManifest> enclaves;
  std::vector<HostScript> threads;
  std::vector<Pin> pins;
  std::vector<AexInjection> aex;
  std::vector<Audit> audits;
  std::string host_data;  // hex, written to the start of host.data
  Expectation expect;
  std::vector<std::string> expect_host_log;
  std::map<std::string, uint64_t> expect_counters;
};

Scenario from_json(const nlohmann::json& j);  // throws SchemaError
nlohmann::json to_json(const Scenario& s);

struct CallRecord {
  int thread = 0;
  std::string enclave;
  std::string fn;
  CallResult result;
};

struct Report {
  std::string scenario;
  uint64_t seed = 0;
  std::string verdict;
  std::string reason;
  std::optional<uint64_t> step;
  Expectation expected;
  bool matches = false;
  std::vector<std::string> mismatches;
  Counters counters;
  uint64_t steps = 0;
  uint64_t trace_digest = 0;
  std::vector<CallRecord> calls;
  std::vector<std::string> host_log;
  std::vector<Violation> violations;
  // audits
  std::vector<std::string> pkru_audit;
  uint64_t step_sweeps = 0;
  uint64_t step_sweep_failures = 0;
  uint64_t illegal_transitions = 0;
  bool secret_confined = true;
  std::vector<std::pair<std::string, bool>> isolation_probes;  // target, faulted
};

nlohmann::json report_json(const Report& r);

struct RunOptions {
  std::optional<uint64_t> seed;  // overrides the scenario seed
  uint64_t max_steps = 2'000'000;
  bool sweep_every_step = false;
  bool check_determinism = false;  // run twice and compare
};

struct RunOutput {
  Report report;
  std::string trace;  // full text trace
};

RunOutput run(const Scenario& s, const RunOptions& opt = {});

std::vector<Scenario> builtin_corpus();

// Helpers shared with the CLI and tests.
std::string to_hex(const std::vector<uint8_t>& bytes);
std::vector<uint8_t> from_hex(const std::string& hex);

}  // namespace capsule::scenario
