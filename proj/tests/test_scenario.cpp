#include <doctest.h>

#include <set>

#include "capsule/scenario.hpp"

using namespace capsule;
using namespace capsule::scenario;
using nlohmann::json;

namespace {

const Scenario& find(const std::vector<Scenario>& c, const std::string& name) {
  for (const auto& s : c)
    if (s.name == name) return s;
  throw std::runtime_error("no scenario " + name);
}

}  // namespace

TEST_CASE("hex helpers") {
  CHECK(to_hex({0x00, 0xab, 0x10}) == "00ab10");
  CHECK(from_hex("00AB10") == std::vector<uint8_t>{0x00, 0xab, 0x10});
  CHECK(from_hex("").empty());
  CHECK_THROWS_AS(from_hex("abc"), SchemaError);
  CHECK_THROWS_AS(from_hex("zz"), SchemaError);
}

TEST_CASE("corpus contents") {
  auto c = builtin_corpus();
  std::set<std::string> names;
  for (const auto& s : c) names.insert(s.name);
  CHECK(names.size() == c.size());
  for (const char* n : {"A1", "A2", "A3", "A4", "A5", "A6", "A7", "A7b", "A8", "A8b", "A9", "A10", "A11", "B1", "B2",
                        "B3", "B4", "B5"})
    CHECK(names.count(n) == 1);
  for (const auto& s : c) {
    if (s.name[0] == 'A') CHECK(s.expect.verdict == "blocked");
    if (s.name[0] == 'B' && s.name != "B5") CHECK(s.expect.verdict == "passed");
  }
  CHECK(find(c, "B5").expect.verdict == "aborted");
  CHECK_FALSE(find(c, "B5").patched_kernel);
}

TEST_CASE("scenario json round trip") {
  for (const auto& s : builtin_corpus()) {
    auto j = to_json(s);
    auto back = from_json(j);
    CHECK(to_json(back) == j);
    CHECK(back.name == s.name);
  }
}

TEST_CASE("schema errors") {
  CHECK_THROWS_AS(from_json(json::array()), SchemaError);
  CHECK_THROWS_AS(from_json(json{{"seed", 1}}), SchemaError);
  CHECK_THROWS_AS(from_json(json{{"name", "x"}, {"kernel", "weird"}}), SchemaError);
  CHECK_THROWS_AS(from_json(json{{"name", "x"}, {"expect", {{"verdict", "maybe"}}}}), SchemaError);
  CHECK_THROWS_AS(from_json(json{{"name", "x"}, {"threads", 3}}), SchemaError);
  CHECK_THROWS_AS(from_json(json{{"name", "x"}, {"pins", {{{"thread", 4}, {"step", 1}}}}}), SchemaError);
  CHECK_THROWS_AS(from_json(json{{"name", "x"}, {"pins", {{{"thread", 0}}}}}), SchemaError);
  CHECK_THROWS_AS(from_json(json{{"name", "x"}, {"enclaves", {{{"name", "e"}, {"placement", "far"}}}}}),
                  SchemaError);
  CHECK_THROWS_AS(from_json(json{{"name", "x"}, {"host_data", "0"}}), SchemaError);
}

TEST_CASE("bad arguments are schema errors at run time") {
  auto s = find(builtin_corpus(), "B1");
  s.threads[0].calls[0].args["nonsense"] = 1;
  CHECK_THROWS_AS(run(s), SchemaError);
  s = find(builtin_corpus(), "B1");
  s.threads[0].calls[0].fn = "missing";
  CHECK_THROWS_AS(run(s), SchemaError);
}

TEST_CASE("benign echo report") {
  auto out = run(find(builtin_corpus(), "B1"));
  const auto& r = out.report;
  CHECK(r.verdict == "passed");
  CHECK(r.matches);
  CHECK_FALSE(r.step.has_value());
  REQUIRE(r.calls.size() == 1);
  CHECK(r.calls[0].result.ret == 14u);
  CHECK(r.pkru_audit.empty());
  CHECK(r.secret_confined);
  CHECK(r.illegal_transitions == 0);
  auto j = report_json(r);
  for (const char* k : {"scenario", "seed", "verdict", "matches", "counters", "trace_digest", "calls", "audit"})
    CHECK(j.contains(k));
  CHECK(out.trace.find("ev=done") != std::string::npos);
}

TEST_CASE("blocked verdict carries the first violation step") {
  auto r = run(find(builtin_corpus(), "A1")).report;
  CHECK(r.verdict == "blocked");
  CHECK(r.reason == reason::kAccessError);
  REQUIRE(r.step.has_value());
  CHECK(*r.step > 0);
  CHECK(r.matches);
}

TEST_CASE("a wrong expectation is reported as a mismatch") {
  auto s = find(builtin_corpus(), "B1");
  s.threads[0].calls[0].expect_ret = 13;
  auto r = run(s).report;
  CHECK(r.verdict == "passed");
  CHECK_FALSE(r.matches);
  CHECK_FALSE(r.mismatches.empty());

  s = find(builtin_corpus(), "A2");
  s.expect.reason = reason::kControlFlow;
  CHECK_FALSE(run(s).report.matches);

  s = find(builtin_corpus(), "B2");
  s.expect_counters["traps"] = 16;
  CHECK_FALSE(run(s).report.matches);
}

TEST_CASE("seed override changes the seal key but not the verdict") {
  auto s = find(builtin_corpus(), "B4");
  RunOptions a, b;
  a.seed = 1;
  b.seed = 2;
  auto ra = run(s, a);
  auto rb = run(s, b);
  CHECK(ra.report.seed == 1);
  CHECK(ra.report.matches);
  CHECK(rb.report.matches);
  RunOptions twice;
  twice.check_determinism = true;
  CHECK_NOTHROW(run(s, twice));
}

TEST_CASE("edl errors become blocked verdicts") {
  auto s = find(builtin_corpus(), "B1");
  s.enclaves[0].edl = "trusted { public void f( };";
  s.threads.clear();
  auto r = run(s).report;
  CHECK(r.verdict == "blocked");
  CHECK(r.reason == "syntax-error");
}

TEST_CASE("step limit is a mismatch") {
  auto s = find(builtin_corpus(), "B2");
  RunOptions o;
  o.max_steps = 50;
  auto r = run(s, o).report;
  CHECK_FALSE(r.matches);
  CHECK(r.steps == 50);
}
