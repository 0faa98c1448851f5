#include "capsule/scenario.hpp"

#include <algorithm>
#include <deque>
#include <set>

#include "capsule/edl.hpp"

namespace capsule::scenario {

using nlohmann::json;

std::string to_hex(const std::vector<uint8_t>& bytes) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  s.reserve(bytes.size() * 2);
  for (uint8_t b : bytes) {
    s += digits[b >> 4];
    s += digits[b & 15];
  }
  return s;
}

std::vector<uint8_t> from_hex(const std::string& hex) {
  auto nib = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  if (hex.size() % 2) throw SchemaError("odd-length hex string");
  std::vector<uint8_t> out;
  for (size_t i = 0; i < hex.size(); i += 2) {
    int hi = nib(hex[i]), lo = nib(hex[i + 1]);
    if (hi < 0 || lo < 0) throw SchemaError("bad hex digit in '" + hex + "'");
    out.push_back(static_cast<uint8_t>(hi * 16 + lo));
  }
  return out;
}

// --- schema ------------------------------------------------------------------

namespace {

const char* placement_name(RoutinePlacement p) {
  switch (p) {
    case RoutinePlacement::AfterDispatcher: return "after-dispatcher";
    case RoutinePlacement::AtEntry: return "at-entry";
    case RoutinePlacement::IndirectOnly: return "indirect-only";
    case RoutinePlacement::Omitted: return "omitted";
  }
  return "?";
}

RoutinePlacement placement_of(const std::string& s) {
  for (auto p : {RoutinePlacement::AfterDispatcher, RoutinePlacement::AtEntry, RoutinePlacement::IndirectOnly,
                 RoutinePlacement::Omitted})
    if (s == placement_name(p)) return p;
  throw SchemaError("unknown placement '" + s + "'");
}

template <class T>
T get_or(const json& j, const char* key, T dflt) {
  if (!j.contains(key) || j[key].is_null()) return dflt;
  return j[key].get<T>();
}

void require_object(const json& j, const std::string& what) {
  if (!j.is_object()) throw SchemaError(what + " must be an object");
}

}  // namespace

Scenario from_json(const json& j) {
  try {
    require_object(j, "scenario");
    Scenario s;
    if (!j.contains("name")) throw SchemaError("scenario needs a name");
    s.name = j["name"].get<std::string>();
    s.description = get_or<std::string>(j, "description", "");
    s.seed = get_or<uint64_t>(j, "seed", 0);
    std::string kernel = get_or<std::string>(j, "kernel", "patched");
    if (kernel != "patched" && kernel != "unpatched") throw SchemaError("kernel must be patched|unpatched");
    s.patched_kernel = kernel == "patched";
    for (const auto& e : j.value("enclaves", json::array())) {
      require_object(e, "enclave");
      EnclaveManifest m;
      m.source.name = e.at("name").get<std::string>();
      m.edl = get_or<std::string>(e, "edl", "");
      m.source.code = get_or<std::string>(e, "code", "");
      m.source.pcl_code = get_or<std::string>(e, "pcl_code", "");
      if (e.contains("pcl_mask") && !e["pcl_mask"].is_null())
        m.source.pcl_mask = static_cast<uint8_t>(e["pcl_mask"].get<unsigned>());
      m.source.tcs = get_or<int>(e, "tcs", 2);
      m.source.data_pages = get_or<int>(e, "data_pages", 1);
      m.source.rwx_pages = get_or<int>(e, "rwx_pages", 0);
      m.source.xfrm = get_or<uint64_t>(e, "xfrm", 0x3);
      m.source.placement = placement_of(get_or<std::string>(e, "placement", "after-dispatcher"));
      s.enclaves.push_back(std::move(m));
    }
    for (const auto& t : j.value("threads", json::array())) {
      require_object(t, "thread");
      HostScript h;
      h.delay = get_or<uint64_t>(t, "delay", 0);
      h.start_after = get_or<std::string>(t, "start_after", "");
      for (const auto& c : t.value("calls", json::array())) {
        require_object(c, "call");
        Call call;
        call.enclave = c.at("enclave").get<std::string>();
        call.fn = c.at("fn").get<std::string>();
        call.args = c.value("args", json::object());
        require_object(call.args, "args");
        if (c.contains("expect_ret") && !c["expect_ret"].is_null()) call.expect_ret = c["expect_ret"].get<uint64_t>();
        const json outs = c.value("expect_out", json::object());
        for (const auto& [k, v] : outs.items())
          call.expect_out[k] = v.get<std::string>();
        h.calls.push_back(std::move(call));
      }
      s.threads.push_back(std::move(h));
    }
    for (const auto& p : j.value("pins", json::array())) {
      Pin pin;
      pin.thread = p.at("thread").get<int>();
      if (p.contains("step")) pin.step = p["step"].get<uint64_t>();
      pin.after = get_or<std::string>(p, "after", "");
      pin.count = get_or<uint64_t>(p, "count", 1);
      if (!pin.step && pin.after.empty()) throw SchemaError("pin needs step or after");
      s.pins.push_back(pin);
    }
    for (const auto& a : j.value("aex", json::array())) {
      AexInjection inj;
      inj.thread = a.at("thread").get<int>();
      inj.step = get_or<uint64_t>(a, "step", 0);
      inj.when = get_or<std::string>(a, "when", "any");
      if (inj.when != "any" && inj.when != "inspection") throw SchemaError("aex.when must be any|inspection");
      inj.hold = get_or<uint64_t>(a, "hold", 0);
      s.aex.push_back(inj);
    }
    for (const auto& a : j.value("audits", json::array())) {
      Audit au;
      au.thread = a.at("thread").get<int>();
      au.target = a.at("target").get<std::string>();
      au.expect_fault = get_or<bool>(a, "expect_fault", true);
      s.audits.push_back(au);
    }
    s.host_data = get_or<std::string>(j, "host_data", "");
    from_hex(s.host_data);
    if (j.contains("expect")) {
      s.expect.verdict = get_or<std::string>(j["expect"], "verdict", "passed");
      s.expect.reason = get_or<std::string>(j["expect"], "reason", "");
    }
    if (s.expect.verdict != "passed" && s.expect.verdict != "blocked" && s.expect.verdict != "aborted")
      throw SchemaError("expect.verdict must be passed|blocked|aborted");
    for (const auto& l : j.value("expect_host_log", json::array())) s.expect_host_log.push_back(l.get<std::string>());
    const json counters = j.value("expect_counters", json::object());
    for (const auto& [k, v] : counters.items())
      s.expect_counters[k] = v.get<uint64_t>();
    size_t nthreads = std::max<size_t>(1, s.threads.size());
    for (const auto& p : s.pins)
      if (p.thread < 0 || static_cast<size_t>(p.thread) >= nthreads) throw SchemaError("pin thread out of range");
    for (const auto& a : s.aex)
      if (a.thread < 0 || static_cast<size_t>(a.thread) >= nthreads) throw SchemaError("aex thread out of range");
    for (const auto& a : s.audits)
      if (a.thread < 0 || static_cast<size_t>(a.thread) >= nthreads) throw SchemaError("audit thread out of range");
    return s;
  } catch (const json::exception& ex) {
    throw SchemaError(ex.what());
  }
}

json to_json(const Scenario& s) {
  json j;
  j["name"] = s.name;
  if (!s.description.empty()) j["description"] = s.description;
  j["seed"] = s.seed;
  j["kernel"] = s.patched_kernel ? "patched" : "unpatched";
  j["enclaves"] = json::array();
  for (const auto& m : s.enclaves) {
    json e;
    e["name"] = m.source.name;
    e["edl"] = m.edl;
    e["code"] = m.source.code;
    if (!m.source.pcl_code.empty()) e["pcl_code"] = m.source.pcl_code;
    if (m.source.pcl_mask) e["pcl_mask"] = *m.source.pcl_mask;
    e["tcs"] = m.source.tcs;
    e["data_pages"] = m.source.data_pages;
    e["rwx_pages"] = m.source.rwx_pages;
    e["xfrm"] = m.source.xfrm;
    e["placement"] = placement_name(m.source.placement);
    j["enclaves"].push_back(e);
  }
  j["threads"] = json::array();
  for (const auto& h : s.threads) {
    json t;
    if (h.delay) t["delay"] = h.delay;
    if (!h.start_after.empty()) t["start_after"] = h.start_after;
    t["calls"] = json::array();
    for (const auto& c : h.calls) {
      json cj;
      cj["enclave"] = c.enclave;
      cj["fn"] = c.fn;
      cj["args"] = c.args;
      if (c.expect_ret) cj["expect_ret"] = *c.expect_ret;
      if (!c.expect_out.empty()) cj["expect_out"] = c.expect_out;
      t["calls"].push_back(cj);
    }
    j["threads"].push_back(t);
  }
  if (!s.pins.empty()) {
    j["pins"] = json::array();
    for (const auto& p : s.pins) {
      json pj;
      pj["thread"] = p.thread;
      if (p.step) pj["step"] = *p.step;
      if (!p.after.empty()) pj["after"] = p.after;
      if (p.count != 1) pj["count"] = p.count;
      j["pins"].push_back(pj);
    }
  }
  if (!s.aex.empty()) {
    j["aex"] = json::array();
    for (const auto& a : s.aex)
      j["aex"].push_back({{"thread", a.thread}, {"step", a.step}, {"when", a.when}, {"hold", a.hold}});
  }
  if (!s.audits.empty()) {
    j["audits"] = json::array();
    for (const auto& a : s.audits)
      j["audits"].push_back({{"thread", a.thread}, {"target", a.target}, {"expect_fault", a.expect_fault}});
  }
  if (!s.host_data.empty()) j["host_data"] = s.host_data;
  j["expect"] = {{"verdict", s.expect.verdict}};
  if (!s.expect.reason.empty()) j["expect"]["reason"] = s.expect.reason;
  if (!s.expect_host_log.empty()) j["expect_host_log"] = s.expect_host_log;
  if (!s.expect_counters.empty()) j["expect_counters"] = s.expect_counters;
  return j;
}

json report_json(const Report& r) {
  json j;
  j["scenario"] = r.scenario;
  j["seed"] = r.seed;
  j["verdict"] = r.verdict;
  if (!r.reason.empty()) j["reason"] = r.reason;
  if (r.step) j["step"] = *r.step;
  j["expected"] = {{"verdict", r.expected.verdict}, {"reason", r.expected.reason}};
  j["matches"] = r.matches;
  j["mismatches"] = r.mismatches;
  const auto& c = r.counters;
  j["counters"] = {{"pkru_writes", c.pkru_writes}, {"traps", c.traps},       {"tf_sets", c.tf_sets},
                   {"seals", c.seals},             {"verifies", c.verifies}, {"aex", c.aex},
                   {"inspections", c.inspections}, {"ecalls", c.ecalls},     {"ocalls", c.ocalls},
                   {"probes_denied", c.probes_denied}, {"signals", c.signals}};
  j["steps"] = r.steps;
  char buf[24];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(r.trace_digest));
  j["trace_digest"] = buf;
  j["calls"] = json::array();
  for (const auto& c : r.calls) {
    json cj{{"thread", c.thread}, {"enclave", c.enclave}, {"fn", c.fn}, {"ok", c.result.ok}};
    if (!c.result.error.empty()) cj["error"] = c.result.error;
    if (c.result.ret) cj["ret"] = *c.result.ret;
    json out = json::object();
    for (size_t i = 0; i < c.result.buffers.size(); ++i)
      if (!c.result.buffers[i].empty()) out[std::to_string(i)] = to_hex(c.result.buffers[i]);
    if (!out.empty()) cj["out"] = out;
    j["calls"].push_back(cj);
  }
  j["host_log"] = r.host_log;
  j["violations"] = json::array();
  for (const auto& v : r.violations)
    j["violations"].push_back({{"reason", v.reason}, {"step", v.step}, {"thread", v.thread}, {"detail", v.detail}});
  j["audit"] = {{"pkru_violations", r.pkru_audit.size()},
                {"sweeps", c.sweeps + r.step_sweeps},
                {"sweep_failures", c.sweep_failures + r.step_sweep_failures},
                {"illegal_transitions", r.illegal_transitions},
                {"secret_confined", r.secret_confined}};
  if (!r.isolation_probes.empty()) {
    j["isolation_probes"] = json::array();
    for (const auto& [t, f] : r.isolation_probes) j["isolation_probes"].push_back({{"target", t}, {"faulted", f}});
  }
  return j;
}

// --- runner -------------------------------------------------------------------

namespace {

std::vector<ArgValue> convert_args(const edl::FunctionDecl& decl, const json& args) {
  std::vector<ArgValue> out(decl.params.size());
  for (const auto& [k, v] : args.items())
    if (!decl.param_index(k)) throw SchemaError("unknown argument '" + k + "' for " + decl.name);
  for (size_t i = 0; i < decl.params.size(); ++i) {
    const auto& p = decl.params[i];
    if (!args.contains(p.name)) continue;
    const auto& v = args[p.name];
    if (p.kind == edl::ParamKind::Scalar) {
      if (!v.is_number_unsigned() && !v.is_number_integer())
        throw SchemaError("argument '" + p.name + "' must be a number");
      out[i].scalar = v.get<uint64_t>();
    } else {
      if (!v.is_string()) throw SchemaError("argument '" + p.name + "' must be a hex string");
      out[i].bytes = from_hex(v.get<std::string>());
    }
  }
  return out;
}

struct ThreadState {
  size_t next_call = 0;
  uint64_t hold_until = 0;
  std::deque<size_t> started;  // call indices awaiting results
  bool audited = false;
};

Report run_once(const Scenario& s, uint64_t seed, const RunOptions& opt, std::string* trace_out) {
  Machine m(MachineConfig{s.patched_kernel});
  CapsuleConfig cc;
  cc.seed = seed;
  Capsule cap(m, cc);
  Report r;
  r.scenario = s.name;
  r.seed = seed;
  r.expected = s.expect;

  size_t n = std::max<size_t>(1, s.threads.size());
  for (size_t i = 0; i < n; ++i) cap.add_host_thread();
  if (!s.host_data.empty()) {
    auto bytes = from_hex(s.host_data);
    if (bytes.size() > kPageSize) throw SchemaError("host_data larger than a page");
    m.raw_write(page_addr(layout::kHostDataPage), bytes);
  }

  std::optional<Violation> setup_failure;
  std::map<std::string, int> handles;
  for (const auto& man : s.enclaves) {
    edl::InterfaceSpec spec;
    try {
      spec = edl::parse(man.edl);
    } catch (const edl::EdlError& ex) {
      std::string why = ex.kind() == edl::EdlError::Kind::UserCheckRejected ? reason::kUserCheck
                                                                             : std::string(edl::to_string(ex.kind()));
      setup_failure = Violation{why, m.step(), -1, ex.what(), true};
      break;
    }
    EnclaveSource src = man.source;
    src.ecalls.clear();
    for (const auto& f : spec.ecalls) src.ecalls.push_back(f.name);
    try {
      int h = cap.create_enclave(src, spec);
      handles[src.name] = h;
      if (!cap.pcl_inspect(h, 0)) {
        setup_failure = Violation{reason::kWrpkruFound, m.step(), 0, "pcl section of " + src.name, true};
        break;
      }
    } catch (const CapsuleError& ex) {
      setup_failure = Violation{ex.reason(), m.step(), -1, ex.what(), true};
      break;
    }
  }

  std::vector<ThreadState> ts(n);
  std::map<size_t, std::vector<std::pair<size_t, CallRecord>>> done;  // thread -> (call idx, record)
  std::deque<int> forced;
  std::vector<bool> pin_armed(s.pins.size(), false);
  std::vector<bool> aex_fired(s.aex.size(), false);
  std::map<std::string, std::set<int>> seen;  // event kind -> threads that produced it
  size_t scanned = 0;
  size_t rr = static_cast<size_t>(seed % n);

  auto has_work = [&](size_t t) {
    if (cap.dead(static_cast<int>(t))) return false;
    return cap.runnable(static_cast<int>(t)) || ts[t].next_call < s.threads[t].calls.size();
  };
  auto started_by_others = [&](const std::string& kind, size_t t) {
    auto it = seen.find(kind);
    if (it == seen.end()) return false;
    for (int who : it->second)
      if (who != static_cast<int>(t)) return true;
    return false;
  };
  auto eligible = [&](size_t t, uint64_t now) {
    if (t >= s.threads.size() || cap.dead(static_cast<int>(t)) || now < ts[t].hold_until) return false;
    if (cap.runnable(static_cast<int>(t))) return true;
    if (ts[t].next_call >= s.threads[t].calls.size()) return false;
    if (now <= s.threads[t].delay) return false;
    if (!s.threads[t].start_after.empty() && !started_by_others(s.threads[t].start_after, t)) return false;
    return true;
  };

  if (!setup_failure) {
    while (!cap.halted()) {
      if (m.step() >= opt.max_steps) {
        r.mismatches.push_back("step limit reached");
        break;
      }
      uint64_t now = m.step() + 1;
      const auto& evs = m.trace().events();
      for (; scanned < evs.size(); ++scanned) seen[std::string(ev_name(evs[scanned].kind))].insert(evs[scanned].thread);
      for (size_t i = 0; i < s.pins.size(); ++i) {
        const auto& p = s.pins[i];
        if (pin_armed[i] || p.after.empty() || !started_by_others(p.after, static_cast<size_t>(p.thread))) continue;
        pin_armed[i] = true;
        for (uint64_t k = 0; k < p.count; ++k) forced.push_back(p.thread);
      }
      for (size_t i = 0; i < s.aex.size(); ++i) {
        const auto& a = s.aex[i];
        if (aex_fired[i] || now < a.step || cap.dead(a.thread)) continue;
        if (m.thread(a.thread).mode != Mode::Enclave) continue;
        if (a.when == "inspection" && !cap.in_inspection(a.thread)) continue;
        cap.inject_interrupt(a.thread);
        aex_fired[i] = true;
        ts[static_cast<size_t>(a.thread)].hold_until = now + a.hold;
      }

      std::optional<size_t> pick;
      for (const auto& p : s.pins)
        if (p.step && *p.step == now && eligible(static_cast<size_t>(p.thread), now)) {
          pick = static_cast<size_t>(p.thread);
          break;
        }
      while (!pick && !forced.empty()) {
        size_t t = static_cast<size_t>(forced.front());
        forced.pop_front();
        if (eligible(t, now)) pick = t;
      }
      if (!pick)
        for (size_t k = 0; k < n; ++k) {
          size_t t = (rr + k) % n;
          if (eligible(t, now)) {
            pick = t;
            rr = (t + 1) % n;
            break;
          }
        }
      if (!pick) {
        bool any = false;
        for (size_t t = 0; t < s.threads.size(); ++t) any |= has_work(t);
        if (!any) break;
        m.begin_step(-1);  // everybody is waiting
        continue;
      }
      size_t t = *pick;
      int ti = static_cast<int>(t);
      m.begin_step(ti);
      if (cap.idle(ti) && !m.thread(ti).pending) {
        const auto& call = s.threads[t].calls[ts[t].next_call];
        auto hit = handles.find(call.enclave);
        if (hit == handles.end()) throw SchemaError("call into unknown enclave '" + call.enclave + "'");
        const auto& info = cap.info(hit->second);
        auto idx = info.spec.ecall_index(call.fn);
        if (!idx) throw SchemaError("unknown ECALL '" + call.fn + "'");
        cap.start_ecall(ti, hit->second, call.fn, convert_args(info.spec.ecalls[*idx], call.args));
        ts[t].started.push_back(ts[t].next_call++);
      }
      cap.step(ti);
      for (auto& res : cap.take_results(ti)) {
        size_t ci = ts[t].started.front();
        ts[t].started.pop_front();
        const auto& call = s.threads[t].calls[ci];
        done[t].push_back({ci, CallRecord{ti, call.enclave, call.fn, std::move(res)}});
      }
      if (!ts[t].audited && m.thread(ti).mode == Mode::Enclave && m.thread(ti).entry_tag == kTagEcall) {
        bool any = false;
        for (const auto& a : s.audits) {
          if (a.thread != ti) continue;
          any = true;
          EnclaveSource none;
          none.name = "__audit";
          none.tcs = 0;
          auto syms = cap.symbols_for(none);
          auto it = syms.find(a.target);
          if (it == syms.end()) throw SchemaError("unknown audit target '" + a.target + "'");
          uint64_t addr = it->second;
          bool f = cap.isolation_probe(ti, addr);
          r.isolation_probes.push_back({a.target, f});
          if (f != a.expect_fault)
            r.mismatches.push_back("isolation probe of " + a.target + (f ? " faulted" : " succeeded"));
        }
        ts[t].audited = any || ts[t].audited;
      }
      if (opt.sweep_every_step) {
        ++r.step_sweeps;
        if (!cap.sweep().ok()) ++r.step_sweep_failures;
      }
    }
  }

  // Verdict.
  std::optional<Violation> first = setup_failure ? setup_failure : cap.first_violation();
  if (!first) {
    r.verdict = "passed";
  } else {
    r.reason = first->reason;
    r.step = first->step;
    r.verdict = first->reason == reason::kSignalDelivery ? "aborted" : "blocked";
  }
  r.violations = cap.violations();
  if (setup_failure) r.violations.insert(r.violations.begin(), *setup_failure);
  r.counters = cap.counters();
  r.host_log = cap.host_log();
  r.steps = m.step();
  for (size_t t = 0; t < n; ++t)
    for (auto& [ci, rec] : done[t]) r.calls.push_back(rec);
  r.pkru_audit = cap.pkru_audit();
  r.secret_confined = cap.secret_confined();
  for (const auto& e : m.trace().events())
    if (e.kind == Ev::Lifecycle && e.detail.find("ILLEGAL") != std::string::npos) ++r.illegal_transitions;

  // Expectations.
  for (size_t t = 0; t < s.threads.size(); ++t) {
    for (size_t ci = 0; ci < s.threads[t].calls.size(); ++ci) {
      const auto& call = s.threads[t].calls[ci];
      if (!call.must_complete()) continue;
      const CallRecord* rec = nullptr;
      for (const auto& [i, cr] : done[t])
        if (i == ci) rec = &cr;
      std::string tag = "thread " + std::to_string(t) + " " + call.fn;
      if (!rec) {
        r.mismatches.push_back(tag + ": did not complete");
        continue;
      }
      if (!rec->result.ok) {
        r.mismatches.push_back(tag + ": failed with " + rec->result.error);
        continue;
      }
      if (call.expect_ret && rec->result.ret != call.expect_ret)
        r.mismatches.push_back(tag + ": ret " + std::to_string(rec->result.ret.value_or(0)) + " != " +
                               std::to_string(*call.expect_ret));
      const auto& info = cap.info(handles.at(call.enclave));
      const auto& decl = info.spec.ecalls[*info.spec.ecall_index(call.fn)];
      for (const auto& [name, hex] : call.expect_out) {
        auto pi = decl.param_index(name);
        if (!pi) throw SchemaError("expect_out names unknown parameter '" + name + "'");
        std::string got = *pi < rec->result.buffers.size() ? to_hex(rec->result.buffers[*pi]) : "";
        if (got != hex) r.mismatches.push_back(tag + ": out " + name + " = " + got);
      }
    }
  }
  if (!s.expect_host_log.empty() && s.expect_host_log != r.host_log) r.mismatches.push_back("host log differs");
  const auto& c = r.counters;
  std::map<std::string, uint64_t> have{{"pkru_writes", c.pkru_writes}, {"traps", c.traps},
                                       {"tf_sets", c.tf_sets},         {"seals", c.seals},
                                       {"verifies", c.verifies},       {"aex", c.aex},
                                       {"inspections", c.inspections}, {"ecalls", c.ecalls},
                                       {"ocalls", c.ocalls},           {"probes_denied", c.probes_denied}};
  for (const auto& [k, v] : s.expect_counters) {
    auto it = have.find(k);
    if (it == have.end()) throw SchemaError("unknown counter '" + k + "'");
    if (it->second != v)
      r.mismatches.push_back("counter " + k + " = " + std::to_string(it->second) + " expected " + std::to_string(v));
  }
  bool verdict_ok = r.verdict == s.expect.verdict && (s.expect.reason.empty() || r.reason == s.expect.reason);
  r.matches = verdict_ok && r.mismatches.empty();

  {
    Event e;
    e.step = m.step();
    e.kind = Ev::Done;
    e.detail = r.verdict + (r.reason.empty() ? "" : " " + r.reason);
    m.trace().record(std::move(e));
  }
  r.trace_digest = m.trace().digest();
  if (trace_out) *trace_out = m.trace().text();
  return r;
}

}  // namespace

RunOutput run(const Scenario& s, const RunOptions& opt) {
  uint64_t seed = opt.seed.value_or(s.seed);
  RunOutput out;
  out.report = run_once(s, seed, opt, &out.trace);
  if (opt.check_determinism) {
    std::string again;
    Report r2 = run_once(s, seed, opt, &again);
    if (again != out.trace || report_json(r2) != report_json(out.report))
      throw NondeterminismError("two runs of '" + s.name + "' with seed " + std::to_string(seed) + " diverged");
  }
  return out;
}

}  // namespace capsule::scenario
