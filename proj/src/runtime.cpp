#include "capsule/runtime.hpp"

#include <algorithm>
#include <cstdio>
#include <random>

#include "runtime_internal.hpp"

namespace capsule {

std::string hex64(uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(v));
  return buf;
}

// --- keys and seals ----------------------------------------------------------

int KeyAssignment::allocate(int enclave) {
  if (auto k = key_of(enclave)) return *k;
  for (int key = 1; key < kNumKeys; ++key) {
    bool used = false;
    for (const auto& [e, k] : keys_) used |= k == key;
    if (!used) {
      keys_[enclave] = key;
      return key;
    }
  }
  throw CapsuleError(reason::kPkeyExhausted, "all 15 enclave protection keys are in use");
}

void KeyAssignment::release(int enclave) { keys_.erase(enclave); }

std::optional<int> KeyAssignment::key_of(int enclave) const {
  auto it = keys_.find(enclave);
  if (it == keys_.end()) return std::nullopt;
  return it->second;
}

uint64_t seal_sp(uint64_t sp, uint64_t key) { return sp ^ key; }

bool verify_sp(const Machine& m, uint64_t rsp, uint64_t rbp, uint64_t key) {
  ThreadContext host;  // handler view: host mode, key 0 reachable
  host.pkru = Pkru::allow_all();
  uint64_t s0 = 0, s1 = 0;
  if (m.read_u64(host, rsp, s0) || m.read_u64(host, rsp + 8, s1)) return false;
  return seal_sp(s0, key) == rsp && seal_sp(s1, key) == rbp;
}

// --- construction ------------------------------------------------------------

namespace {

void builtin_host_fns(std::map<std::string, HostFn>& fns, Capsule& cap) {
  fns["ocall_log"] = [&cap](HostCall& c) {
    std::string line = "ocall_log:";
    for (const auto& b : c.buffers) {
      if (b.empty()) continue;
      static const char* digits = "0123456789abcdef";
      for (uint8_t v : b) {
        line += digits[v >> 4];
        line += digits[v & 15];
      }
      break;
    }
    cap.log_host(line);
    uint64_t n = 0;
    for (const auto& b : c.buffers) n += b.size();
    c.ret = n;
  };
  fns["ocall_checksum"] = [](HostCall& c) {
    uint64_t sum = 0;
    for (const auto& b : c.buffers)
      for (uint8_t v : b) sum += v;
    c.ret = sum;
  };
  // First buffer copied into the second.
  fns["ocall_echo"] = [](HostCall& c) {
    std::vector<size_t> bufs;
    for (size_t i = 0; i < c.buffers.size(); ++i)
      if (!c.buffers[i].empty()) bufs.push_back(i);
    if (bufs.size() >= 2) {
      auto& src = c.buffers[bufs[0]];
      auto& dst = c.buffers[bufs[1]];
      std::copy_n(src.begin(), std::min(src.size(), dst.size()), dst.begin());
    }
    c.ret = bufs.empty() ? 0 : c.buffers[bufs[0]].size();
  };
  // ocall_nest(depth): nested ecall_nest(depth - 1), returns its result + 1.
  fns["ocall_nest"] = [](HostCall& c) {
    uint64_t depth = c.scalars.empty() ? 0 : c.scalars[0];
    if (c.phase == 0) {
      if (depth == 0) {
        c.ret = 0;
        return;
      }
      ArgValue a;
      a.scalar = depth - 1;
      c.nested = HostCall::Nested{"ecall_nest", {a}};
      return;
    }
    const auto& r = *c.nested_result;
    c.ret = r.ok ? r.ret.value_or(0) + 1 : ~uint64_t{0};
  };
}

}  // namespace

Capsule::Capsule(Machine& m, CapsuleConfig cfg) : m_(m), cfg_(cfg) {
  m_.set_observer(this);
  auto& stub = m_.map_page(layout::kStubPage, perm::RX, 0, kHostOwner);
  std::vector<uint8_t> code;
  isa::encode({isa::Op::Popfq, 2, isa::kRax, isa::kRax, 0}, code);
  code.insert(code.end(), isa::kWrpkruBytes.begin(), isa::kWrpkruBytes.end());
  code.push_back(static_cast<uint8_t>(isa::Op::Eenter));
  std::copy(code.begin(), code.end(), stub.bytes.begin());
  for (size_t i = 0; i < 16; ++i) stub.bytes[layout::kStubGadget + i] = static_cast<uint8_t>(isa::Op::Nop);

  m_.map_page(layout::kHostDataPage, perm::RW, 0, kHostOwner);
  m_.map_page(layout::kSecretPage, perm::RW, 0, kHostOwner);
  std::mt19937_64 rng(cfg_.seed);
  uint64_t key = rng();
  m_.raw_set_u64(page_addr(layout::kSecretPage), key);

  builtin_host_fns(host_fns_, *this);
}

Capsule::~Capsule() { m_.set_observer(nullptr); }

uint64_t Capsule::sp_key() const { return m_.raw_u64(page_addr(layout::kSecretPage)); }

int Capsule::add_host_thread() {
  int t = static_cast<int>(m_.thread_count());
  uint64_t base = layout::kHostStackBase + static_cast<uint64_t>(t) * layout::kHostStackStride;
  for (uint64_t i = 0; i < layout::kHostStackPages; ++i) m_.map_page(base + i, perm::RW, 0, kHostOwner);
  uint64_t sig = base + layout::kSignalStackOffset;
  m_.map_page(sig, perm::RW, 0, kHostOwner);
  int id = m_.add_thread(page_addr(sig + 1));
  auto& ctx = m_.thread(id);
  uint64_t top = page_addr(base + layout::kHostStackPages) - 64;
  ctx.reg(isa::kRsp) = top;
  ctx.reg(isa::kRbp) = top;
  ctx.rip = layout::return_location();
  ctx.pkru = Pkru::allow_all();
  auto ht = std::make_unique<HostThread>();
  ht->id = id;
  ht->stack_top = top;
  threads_[id] = std::move(ht);
  return id;
}

uint64_t Capsule::stack_top(int thread) const { return threads_.at(thread)->stack_top; }

void Capsule::register_host_fn(const std::string& name, HostFn fn) { host_fns_[name] = std::move(fn); }

// --- enclaves ----------------------------------------------------------------

static int next_enclave_id(const Machine& m) {
  int id = 0;
  while (m.has_enclave(id)) ++id;
  return id;
}

static uint64_t pb_page(int slot, int tcs, uint64_t pages) {
  return layout::kParamBufferBase + static_cast<uint64_t>(slot) * layout::kSlotStride +
         static_cast<uint64_t>(tcs) * pages;
}

static uint64_t private_page(int slot, int tcs, uint64_t pages) {
  return layout::kPrivateBase + static_cast<uint64_t>(slot) * layout::kSlotStride +
         static_cast<uint64_t>(tcs) * pages;
}

std::map<std::string, uint64_t> Capsule::symbols_for(const EnclaveSource& src) const {
  std::map<std::string, uint64_t> s;
  s["host.stub"] = layout::stub_addr(0);
  s["host.ret"] = layout::return_location();
  s["host.gadget"] = layout::stub_addr(layout::kStubGadget);
  s["host.data"] = page_addr(layout::kHostDataPage);
  s["host.secret"] = page_addr(layout::kSecretPage);
  uint64_t pages = cfg_.param_buffer_pages;
  for (const auto& [id, e] : enclaves_) {
    for (size_t i = 0; i < e.tcs.size(); ++i) {
      s[e.name + ".pb" + std::to_string(i)] = e.tcs[i].pb.base;
      for (const auto& [k, v] : e.symbols)
        if (k.rfind(e.name + ".", 0) == 0) s[k] = v;
    }
  }
  int slot = next_enclave_id(m_);
  for (int i = 0; i < src.tcs; ++i) {
    uint64_t a = page_addr(pb_page(slot, i, pages));
    s["self.pb" + std::to_string(i)] = a;
    s[src.name + ".pb" + std::to_string(i)] = a;
  }
  return s;
}

int Capsule::create_enclave(const EnclaveSource& src, const edl::InterfaceSpec& spec) {
  auto fail = [&](const char* why, const std::string& msg, std::vector<uint64_t> offs = {}) {
    Event e;
    e.step = m_.step();
    e.kind = Ev::Create;
    e.detail = src.name + " rejected: " + why;
    m_.trace().record(std::move(e));
    throw CapsuleError(why, msg, std::move(offs));
  };
  if (src.xfrm & kXfrmPkruBit) fail(reason::kXfrm, "XFRM bit 9 set: PKRU would be XRSTOR-restorable");
  if (keys_.in_use() >= kNumKeys - 1) fail(reason::kPkeyExhausted, "all 15 enclave protection keys are in use");
  if (src.tcs < 1 || src.tcs * static_cast<int>(cfg_.param_buffer_pages) > static_cast<int>(layout::kSlotStride))
    fail(reason::kMalformedImage, "bad TCS count");
  if (enclaves_.size() > 0 && find_enclave(src.name)) fail(reason::kMalformedImage, "duplicate enclave name");

  int slot = next_enclave_id(m_);
  uint64_t base_page = layout::kEnclaveBase + static_cast<uint64_t>(slot) * layout::kSlotStride;
  BuiltImage built;
  try {
    built = build_image(src, base_page, symbols_for(src));
  } catch (const std::exception& ex) {
    fail(reason::kMalformedImage, ex.what());
  }
  const auto& img = built.image;
  if (img.pages.size() > layout::kSlotStride) fail(reason::kMalformedImage, "image too large");

  auto st = inspector::static_inspect(img);
  if (st.status == inspector::StaticResult::Status::WrpkruFound) {
    std::vector<uint64_t> offs;
    for (uint64_t a : st.hits) offs.push_back(a - page_addr(base_page));
    std::string msg = "WRPKRU in plain code at offset";
    for (uint64_t o : offs) msg += " " + std::to_string(o);
    fail(reason::kInspectionFailure, msg, offs);
  }
  if (st.status == inspector::StaticResult::Status::MissingRoutine)
    fail(reason::kMissingRoutine, "embedded inspection routine not found");
  if (inspector::reachability_check(img, st.routine_addr) != inspector::Reachability::Ok)
    fail(reason::kUnreachable, "inspection routine unreachable from the entry");

  std::vector<edl::EdgeDescriptor> edges;
  try {
    edges = edl::gen_edge(spec, cfg_.param_buffer_pages * kPageSize);
  } catch (const edl::EdlError& ex) {
    fail(reason::kMarshalOverflow, ex.what());
  }

  int key = 0;
  std::vector<uint64_t> page_list;
  for (size_t i = 0; i < img.pages.size(); ++i) page_list.push_back(img.page_index(i));
  std::vector<Tcs> tcs;
  {
    size_t i = 0;
    for (size_t p = 0; p < img.pages.size(); ++p) {
      if (img.pages[p].role != PageRole::Tls) continue;
      Tcs t;
      t.index = static_cast<int>(i++);
      t.tls_page = img.page_index(p);
      t.ssa_page = img.page_index(p + 1);
      tcs.push_back(t);
    }
  }
  int id = m_.add_enclave(img.xfrm, img.entry, page_list, tcs);
  key = keys_.allocate(id);
  key_history_[id] = key;

  EnclaveInfo info;
  info.id = id;
  info.name = src.name;
  info.pkey = key;
  info.slot = slot;
  info.spec = spec;
  for (auto& e : edges) (e.side == edl::Side::Trusted ? info.ecall_edges : info.ocall_edges).push_back(e);
  info.symbols = built.symbols;
  info.routine_addr = st.routine_addr;
  info.pcl_mask = img.pcl_mask;

  for (size_t i = 0; i < img.pages.size(); ++i) {
    const auto& ip = img.pages[i];
    uint64_t idx = img.page_index(i);
    // W^X: nothing starts executable; RWX declarations become RW.
    uint8_t p = ip.perm & perm::X ? static_cast<uint8_t>((ip.perm & ~perm::X) | perm::W) : ip.perm;
    auto& page = m_.map_page(idx, p, static_cast<uint8_t>(key), id);
    std::copy_n(ip.bytes.begin(), std::min(ip.bytes.size(), static_cast<size_t>(kPageSize)), page.bytes.begin());
    info.pages.emplace_back(idx, ip.role);
    if (ip.role == PageRole::Code || ip.role == PageRole::PclCode || ip.role == PageRole::RwxCode)
      info.lifecycle[idx] = inspector::Lifecycle::UninspectedRw;
    if (ip.role == PageRole::RwxCode) info.rwx_origin.insert(idx);
  }
  uint64_t pages = cfg_.param_buffer_pages;
  for (int t = 0; t < img.tcs_count; ++t) {
    TcsSlot s;
    s.pb.tcs = t;
    s.pb.base = page_addr(pb_page(slot, t, pages));
    s.pb.capacity = pages * kPageSize;
    s.private_base = page_addr(private_page(slot, t, pages));
    for (uint64_t i = 0; i < pages; ++i) {
      m_.map_page(pb_page(slot, t, pages) + i, perm::RW, static_cast<uint8_t>(key), kHostOwner);
      m_.map_page(private_page(slot, t, pages) + i, perm::RW, 0, kHostOwner);
    }
    info.tcs.push_back(s);
  }
  enclaves_[id] = std::move(info);

  {
    Event e;
    e.step = m_.step();
    e.kind = Ev::Create;
    e.enclave = id;
    e.addr = page_addr(base_page);
    e.detail = src.name + " key=" + std::to_string(key) + " pages=" + std::to_string(img.pages.size()) +
               " xfrm=" + hex64(img.xfrm);
    m_.trace().record(std::move(e));
  }
  // Static inspection passed: plain code pages go RW -> RO -> RX.
  for (const auto& [idx, role] : enclaves_[id].pages) {
    if (role != PageRole::Code) continue;
    set_lifecycle(id, idx, inspector::Lifecycle::UnderInspectionRo);
    m_.set_page_attrs(-1, idx, perm::R, std::nullopt);
    set_lifecycle(id, idx, inspector::Lifecycle::ExecutableRx);
    m_.set_page_attrs(-1, idx, perm::RX, std::nullopt);
  }
  if (!img.pcl_mask) {
    // Unmasked PCL section: nothing to reveal, but it still has to pass the
    // dynamic scan before it may execute.
    enclaves_[id].pcl_done = !std::any_of(img.pages.begin(), img.pages.end(),
                                          [](const ImagePage& p) { return p.role == PageRole::PclCode; });
  }
  return id;
}

void Capsule::destroy_enclave(int handle) {
  auto it = enclaves_.find(handle);
  if (it == enclaves_.end()) throw CapsuleError(reason::kMalformedImage, "no such enclave");
  for (const auto& s : it->second.tcs)
    if (s.owner >= 0) throw MachineError(MachineError::Code::TcsBusy, "enclave has an active TCS");
  m_.remove_enclave(handle);
  uint64_t pages = cfg_.param_buffer_pages;
  for (size_t t = 0; t < it->second.tcs.size(); ++t)
    for (uint64_t i = 0; i < pages; ++i) {
      m_.unmap_page(pb_page(it->second.slot, static_cast<int>(t), pages) + i);
      m_.unmap_page(private_page(it->second.slot, static_cast<int>(t), pages) + i);
    }
  keys_.release(handle);
  Event e;
  e.step = m_.step();
  e.kind = Ev::Destroy;
  e.enclave = handle;
  e.detail = it->second.name;
  m_.trace().record(std::move(e));
  enclaves_.erase(it);
}

const Capsule::EnclaveInfo& Capsule::info(int handle) const {
  auto it = enclaves_.find(handle);
  if (it == enclaves_.end()) throw CapsuleError(reason::kMalformedImage, "no such enclave");
  return it->second;
}

std::optional<int> Capsule::find_enclave(const std::string& name) const {
  for (const auto& [id, e] : enclaves_)
    if (e.name == name) return id;
  return std::nullopt;
}

const ParamBuffer& Capsule::param_buffer(int handle, int tcs) const {
  return info(handle).tcs.at(static_cast<size_t>(tcs)).pb;
}

void Capsule::set_lifecycle(int handle, uint64_t page, inspector::Lifecycle to) {
  auto& e = enclaves_.at(handle);
  auto from = e.lifecycle.at(page);
  Event ev;
  ev.step = m_.step();
  ev.kind = Ev::Lifecycle;
  ev.enclave = handle;
  ev.addr = page_addr(page);
  ev.detail = std::string(inspector::to_string(from)) + "->" + std::string(inspector::to_string(to)) +
              (inspector::legal_transition(from, to) ? "" : " ILLEGAL");
  m_.trace().record(std::move(ev));
  e.lifecycle[page] = to;
}

// --- audits -------------------------------------------------------------------

bool Capsule::executable_enclave_page(uint64_t page) const {
  const Page* p = m_.find_page(page);
  return p && p->owner != kHostOwner && (p->perm & perm::X);
}

SweepResult Capsule::sweep() const {
  SweepResult r;
  std::vector<uint8_t> run;
  uint64_t run_start = 0;
  std::optional<uint64_t> prev;
  auto flush = [&] {
    if (run.empty()) return;
    for (uint64_t off : inspector::scan_region_serial(run)) r.wrpkru_hits.push_back(run_start + off);
    run.clear();
  };
  for (const auto& [idx, page] : m_.pages()) {
    if (page.owner == kHostOwner) continue;
    if ((page.perm & perm::W) && (page.perm & perm::X)) r.wx_pages.push_back(idx);
    if (!(page.perm & perm::X)) continue;
    // Adjacent executable pages of one enclave form a single byte region.
    if (!prev || *prev + 1 != idx || m_.find_page(*prev)->owner != page.owner) {
      flush();
      run_start = page_addr(idx);
    }
    run.insert(run.end(), page.bytes.begin(), page.bytes.end());
    prev = idx;
  }
  flush();
  return r;
}

void Capsule::on_attrs_changed(uint64_t) {
  if (!cfg_.sweep_on_change) return;
  ++sweeps_;
  if (!sweep().ok()) ++sweep_failures_;
}

void Capsule::on_probe(int thread, uint64_t addr, bool faulted) {
  if (audit_probe_ || !faulted) return;
  ++probes_denied_;
  bool seen = false;
  for (const auto& v : violations_) seen |= v.reason == reason::kProbeDenied && v.thread == thread;
  if (!seen) violation(thread, reason::kProbeDenied, "suppressed fault at " + hex64(addr), false);
}

bool Capsule::isolation_probe(int thread, uint64_t addr) {
  audit_probe_ = true;
  bool f = m_.probe(thread, addr);
  audit_probe_ = false;
  return f;
}

std::vector<std::string> Capsule::pkru_audit() const {
  std::vector<std::string> out;
  for (const auto& e : m_.trace().events()) {
    if (e.kind != Ev::Insn) continue;
    auto k = key_history_.find(e.enclave);
    if (k == key_history_.end()) {
      out.push_back("step " + std::to_string(e.step) + ": unknown enclave");
      continue;
    }
    if (e.tag == kTagInspect) {
      if (e.ssa_pkey != 0)
        out.push_back("step " + std::to_string(e.step) + ": inspection with SSA on key " +
                      std::to_string(e.ssa_pkey));
    } else if (e.pkru != Pkru::only(k->second).value()) {
      out.push_back("step " + std::to_string(e.step) + ": pkru " + hex64(e.pkru) + " in enclave " +
                    std::to_string(e.enclave));
    }
  }
  return out;
}

bool Capsule::secret_confined() const {
  uint64_t key = sp_key();
  std::vector<uint64_t> needles{key};
  for (const auto& [t, ht] : threads_)
    for (const auto& a : ht->stack)
      if (a.sealed) {
        needles.push_back(m_.raw_u64(a.sealed_rsp));
        needles.push_back(m_.raw_u64(a.sealed_rsp + 8));
      }
  for (const auto& [idx, page] : m_.pages()) {
    if (page.pkey == 0) continue;
    for (size_t off = 0; off + 8 <= kPageSize; ++off) {
      uint64_t v = 0;
      for (size_t i = 0; i < 8; ++i) v |= uint64_t{page.bytes[off + i]} << (8 * i);
      if (v != 0 && std::find(needles.begin(), needles.end(), v) != needles.end()) return false;
    }
  }
  return true;
}

Counters Capsule::counters() const {
  const auto& tr = m_.trace();
  Counters c;
  c.pkru_writes = tr.count(Ev::Wrpkru) + tr.count(Ev::PkruRestore);
  c.traps = tr.count(Ev::Trap);
  c.tf_sets = tr.count(Ev::TfSet);
  c.seals = tr.count(Ev::Seal);
  c.verifies = tr.count(Ev::Verify);
  c.aex = tr.count(Ev::Aex);
  c.inspections = inspections_;
  c.ecalls = tr.count(Ev::Marshal);
  c.ocalls = tr.count(Ev::Ocall);
  c.probes_denied = probes_denied_;
  c.signals = tr.count(Ev::Signal);
  c.sweeps = sweeps_;
  c.sweep_failures = sweep_failures_;
  return c;
}

std::optional<Violation> Capsule::first_violation() const {
  if (violations_.empty()) return std::nullopt;
  return violations_.front();
}

void Capsule::violation(int thread, std::string why, std::string detail, bool hard) {
  Event e;
  e.step = m_.step();
  e.thread = thread;
  e.kind = Ev::Violation;
  e.detail = why + (detail.empty() ? "" : " " + detail);
  m_.trace().record(std::move(e));
  violations_.push_back({std::move(why), m_.step(), thread, std::move(detail), hard});
  if (hard) halted_ = true;
}

}  // namespace capsule
