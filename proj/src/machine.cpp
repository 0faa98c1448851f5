#include "capsule/machine.hpp"

#include <cstdio>
#include <cstring>

namespace capsule {

namespace {

std::string hex(uint64_t v) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "0x%llx", static_cast<unsigned long long>(v));
  return buf;
}

uint64_t load_le(std::span<const uint8_t> b) {
  uint64_t v = 0;
  for (size_t i = 0; i < b.size() && i < 8; ++i) v |= uint64_t{b[i]} << (8 * i);
  return v;
}

std::array<uint8_t, 8> store_le(uint64_t v) {
  std::array<uint8_t, 8> b{};
  for (size_t i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>(v >> (8 * i));
  return b;
}

}  // namespace

std::string perm::to_string(uint8_t p) {
  std::string s;
  s += (p & R) ? 'R' : '-';
  s += (p & W) ? 'W' : '-';
  s += (p & X) ? 'X' : '-';
  return s;
}

std::string to_string(const PageFault& f) {
  std::string s = f.code == FaultCode::AccessError ? "access-error" : "wx-violation";
  s += " addr=" + hex(f.addr);
  return s;
}

Machine::Machine(MachineConfig config) : config_(config) {}

void Machine::emit(Ev kind, int thread, uint64_t addr, std::string detail) {
  Event e;
  e.step = step_;
  e.thread = thread;
  e.kind = kind;
  e.addr = addr;
  e.detail = std::move(detail);
  if (thread >= 0 && static_cast<size_t>(thread) < threads_.size()) {
    const auto& ctx = threads_[thread];
    e.pkru = ctx.pkru.value();
    e.enclave = ctx.mode == Mode::Enclave ? ctx.enclave : -1;
    e.tcs = ctx.mode == Mode::Enclave ? ctx.tcs : -1;
    e.tag = ctx.entry_tag;
  }
  trace_.record(std::move(e));
}

// --- memory -----------------------------------------------------------------

Page& Machine::map_page(uint64_t index, uint8_t p, uint8_t pkey, int owner) {
  auto& page = pages_[index];
  page.index = index;
  page.perm = p;
  page.pkey = pkey;
  page.owner = owner;
  page.bytes.fill(0);
  return page;
}

void Machine::unmap_page(uint64_t index) { pages_.erase(index); }

Page* Machine::find_page(uint64_t index) {
  auto it = pages_.find(index);
  return it == pages_.end() ? nullptr : &it->second;
}

const Page* Machine::find_page(uint64_t index) const {
  auto it = pages_.find(index);
  return it == pages_.end() ? nullptr : &it->second;
}

std::optional<PageFault> Machine::check(const ThreadContext& ctx, uint64_t addr,
                                        AccessKind kind) const {
  PageFault fault{FaultCode::AccessError, addr, kind};
  const Page* p = find_page(page_of(addr));
  if (!p) return fault;
  if (p->owner != kHostOwner) {
    // EPC isolation: only the owning enclave, and only from enclave mode.
    if (ctx.mode == Mode::Host || p->owner != ctx.enclave) return fault;
  }
  switch (kind) {
    case AccessKind::Fetch:
      if (!(p->perm & perm::X)) return PageFault{FaultCode::WxViolation, addr, kind};
      return std::nullopt;
    case AccessKind::Read:
      if (!(p->perm & perm::R) || !ctx.pkru.allows_read(p->pkey)) return fault;
      return std::nullopt;
    case AccessKind::Write:
      if (!(p->perm & perm::W) || !ctx.pkru.allows_write(p->pkey)) return fault;
      return std::nullopt;
  }
  return fault;
}

std::optional<PageFault> Machine::read(const ThreadContext& ctx, uint64_t addr,
                                       std::span<uint8_t> out) const {
  for (size_t i = 0; i < out.size(); ++i)
    if (auto f = check(ctx, addr + i, AccessKind::Read)) return f;
  raw_read(addr, out);
  return std::nullopt;
}

std::optional<PageFault> Machine::write(const ThreadContext& ctx, uint64_t addr,
                                        std::span<const uint8_t> in) {
  for (size_t i = 0; i < in.size(); ++i)
    if (auto f = check(ctx, addr + i, AccessKind::Write)) return f;
  raw_write(addr, in);
  return std::nullopt;
}

std::optional<PageFault> Machine::fetch(const ThreadContext& ctx, uint64_t addr,
                                        std::span<uint8_t> out) const {
  for (size_t i = 0; i < out.size(); ++i)
    if (auto f = check(ctx, addr + i, AccessKind::Fetch)) return f;
  raw_read(addr, out);
  return std::nullopt;
}

std::optional<PageFault> Machine::read_u64(const ThreadContext& ctx, uint64_t addr,
                                           uint64_t& out) const {
  std::array<uint8_t, 8> b{};
  if (auto f = read(ctx, addr, b)) return f;
  out = load_le(b);
  return std::nullopt;
}

std::optional<PageFault> Machine::write_u64(const ThreadContext& ctx, uint64_t addr, uint64_t v) {
  auto b = store_le(v);
  return write(ctx, addr, b);
}

void Machine::raw_read(uint64_t addr, std::span<uint8_t> out) const {
  size_t done = 0;
  while (done < out.size()) {
    uint64_t a = addr + done;
    const Page* p = find_page(page_of(a));
    if (!p) throw MachineError(MachineError::Code::NoPage, "unmapped address " + hex(a));
    size_t off = a % kPageSize;
    size_t n = std::min(out.size() - done, static_cast<size_t>(kPageSize - off));
    std::memcpy(out.data() + done, p->bytes.data() + off, n);
    done += n;
  }
}

void Machine::raw_write(uint64_t addr, std::span<const uint8_t> in) {
  size_t done = 0;
  while (done < in.size()) {
    uint64_t a = addr + done;
    Page* p = find_page(page_of(a));
    if (!p) throw MachineError(MachineError::Code::NoPage, "unmapped address " + hex(a));
    size_t off = a % kPageSize;
    size_t n = std::min(in.size() - done, static_cast<size_t>(kPageSize - off));
    std::memcpy(p->bytes.data() + off, in.data() + done, n);
    done += n;
  }
}

uint64_t Machine::raw_u64(uint64_t addr) const {
  std::array<uint8_t, 8> b{};
  raw_read(addr, b);
  return load_le(b);
}

void Machine::raw_set_u64(uint64_t addr, uint64_t v) {
  auto b = store_le(v);
  raw_write(addr, b);
}

bool Machine::probe(int t, uint64_t addr) {
  const auto& ctx = thread(t);
  bool faulted = check(ctx, addr, AccessKind::Read).has_value();
  emit(Ev::Probe, t, addr, faulted ? "fault" : "ok");
  if (observer_) observer_->on_probe(t, addr, faulted);
  return faulted;
}

// --- threads and enclaves ---------------------------------------------------

int Machine::add_thread(uint64_t signal_stack_top) {
  ThreadContext ctx;
  ctx.signal_stack_top = signal_stack_top;
  ctx.signal_sp = signal_stack_top;
  threads_.push_back(ctx);
  return static_cast<int>(threads_.size() - 1);
}

ThreadContext& Machine::thread(int t) { return threads_.at(static_cast<size_t>(t)); }
const ThreadContext& Machine::thread(int t) const { return threads_.at(static_cast<size_t>(t)); }

int Machine::add_enclave(uint64_t xfrm, uint64_t entry, std::vector<uint64_t> pages,
                         std::vector<Tcs> tcs) {
  int id = 0;
  while (enclaves_.count(id)) ++id;
  Enclave e;
  e.id = id;
  e.xfrm = xfrm;
  e.entry = entry;
  e.pages = std::move(pages);
  e.tcs = std::move(tcs);
  for (size_t i = 0; i < e.tcs.size(); ++i) e.tcs[i].index = static_cast<int>(i);
  enclaves_.emplace(id, std::move(e));
  return id;
}

void Machine::remove_enclave(int id) {
  auto& e = enclave(id);
  for (const auto& t : e.tcs)
    if (t.busy || t.cssa > 0)
      throw MachineError(MachineError::Code::TcsBusy, "enclave has an active TCS");
  for (uint64_t p : e.pages) pages_.erase(p);
  enclaves_.erase(id);
}

Enclave& Machine::enclave(int id) {
  auto it = enclaves_.find(id);
  if (it == enclaves_.end())
    throw MachineError(MachineError::Code::NoSuchEnclave, "no enclave " + std::to_string(id));
  return it->second;
}

const Enclave& Machine::enclave(int id) const {
  auto it = enclaves_.find(id);
  if (it == enclaves_.end())
    throw MachineError(MachineError::Code::NoSuchEnclave, "no enclave " + std::to_string(id));
  return it->second;
}

Tcs& Machine::tcs_of(int enclave_id, int tcs_index) {
  auto& e = enclave(enclave_id);
  if (tcs_index < 0 || static_cast<size_t>(tcs_index) >= e.tcs.size())
    throw MachineError(MachineError::Code::NoSuchTcs, "no TCS " + std::to_string(tcs_index));
  return e.tcs[static_cast<size_t>(tcs_index)];
}

// --- instructions -----------------------------------------------------------

void Machine::exec_wrpkru(int t, uint32_t value) {
  auto& ctx = thread(t);
  ctx.pkru = Pkru(value);
  emit(Ev::Wrpkru, t, ctx.rip, "pkru=" + hex(value));
}

uint32_t Machine::exec_rdpkru(int t) { return thread(t).pkru.value(); }

std::optional<PageFault> Machine::exec_xrstor(int t, uint64_t region) {
  auto& ctx = thread(t);
  std::array<uint8_t, kXStateSize> buf{};
  if (auto f = read(ctx, region, buf)) return f;
  XState xs;
  xs.pkru = static_cast<uint32_t>(load_le(std::span(buf).subspan(0, 8)));
  xs.v0 = load_le(std::span(buf).subspan(8, 8));
  xs.v1 = load_le(std::span(buf).subspan(16, 8));
  bool apply_pkru = ctx.mode == Mode::Host ||
                    (enclave(ctx.enclave).xfrm & kXfrmPkruBit) != 0;
  ctx.xstate.v0 = xs.v0;
  ctx.xstate.v1 = xs.v1;
  if (apply_pkru) {
    ctx.xstate.pkru = xs.pkru;
    ctx.pkru = Pkru(xs.pkru);
  }
  emit(Ev::Xrstor, t, region, apply_pkru ? "pkru=" + hex(xs.pkru) : "pkru-ignored");
  return std::nullopt;
}

std::optional<PageFault> Machine::exec_xsave(int t, uint64_t region) {
  auto& ctx = thread(t);
  bool with_pkru = ctx.mode == Mode::Host || (enclave(ctx.enclave).xfrm & kXfrmPkruBit) != 0;
  std::array<uint8_t, kXStateSize> buf{};
  auto put = [&](size_t off, uint64_t v) {
    auto b = store_le(v);
    std::memcpy(buf.data() + off, b.data(), 8);
  };
  put(0, with_pkru ? ctx.pkru.value() : 0);
  put(8, ctx.xstate.v0);
  put(16, ctx.xstate.v1);
  return write(ctx, region, buf);
}

void Machine::exec_popfq(int t, uint64_t value) {
  auto& ctx = thread(t);
  uint64_t keep_tf = ctx.rflags & kFlagTf;
  ctx.rflags = (value & ~kFlagTf) | 0x2;
  if (ctx.mode == Mode::Enclave) {
    // Enclave code cannot touch TF; it always reads 0 inside.
    ctx.rflags |= keep_tf;
    return;
  }
  if (value & kFlagTf) {
    ctx.rflags |= kFlagTf;
    emit(Ev::TfSet, t, ctx.rip, "tf=1");
  }
}

void Machine::eenter(int t, int enclave_id, int tcs_index) {
  auto& ctx = thread(t);
  if (ctx.mode != Mode::Host) throw MachineError(MachineError::Code::WrongMode, "EENTER from enclave mode");
  if (ctx.pending) throw MachineError(MachineError::Code::TrapPending, "EENTER with a pending event");
  auto& e = enclave(enclave_id);
  auto& tcs = tcs_of(enclave_id, tcs_index);
  if (tcs.busy || tcs.cssa > 0)
    throw MachineError(MachineError::Code::TcsBusy, "TCS " + std::to_string(tcs_index) + " busy");
  std::array<uint8_t, 1> opcode{};
  if (fetch(ctx, ctx.rip, opcode) || opcode[0] != static_cast<uint8_t>(isa::Op::Eenter))
    throw MachineError(MachineError::Code::Privilege, "RIP does not address an EENTER");

  ctx.tf_shadow_ = ctx.tf();
  ctx.rflags &= ~kFlagTf;
  tcs.busy = true;
  tcs.bound_thread = t;
  ctx.return_location = ctx.rip + 1;
  // Hardware keeps the untrusted RSP/RBP in the SSA frame for a later AEX.
  raw_set_u64(page_addr(tcs.ssa_page) + ssa::kUrsp, ctx.reg(isa::kRsp));
  raw_set_u64(page_addr(tcs.ssa_page) + ssa::kUrbp, ctx.reg(isa::kRbp));
  ctx.reg(isa::kRcx) = ctx.return_location;
  ctx.mode = Mode::Enclave;
  ctx.enclave = enclave_id;
  ctx.tcs = tcs_index;
  ctx.rip = e.entry;
  emit(Ev::Eenter, t, e.entry,
       "enclave=" + std::to_string(enclave_id) + " tcs=" + std::to_string(tcs_index) +
           " tf_saved=" + std::to_string(ctx.tf_shadow_ ? 1 : 0));
}

void Machine::eexit(int t) {
  auto& ctx = thread(t);
  if (ctx.mode != Mode::Enclave) throw MachineError(MachineError::Code::WrongMode, "EEXIT from host mode");
  auto& tcs = tcs_of(ctx.enclave, ctx.tcs);
  tcs.busy = false;
  tcs.bound_thread = -1;
  int eid = ctx.enclave;
  ctx.rip = ctx.reg(isa::kRbx);
  ctx.mode = Mode::Host;
  ctx.enclave = -1;
  ctx.tcs = -1;
  if (ctx.tf_shadow_) ctx.rflags |= kFlagTf;
  emit(Ev::Eexit, t, ctx.rip, "enclave=" + std::to_string(eid));
  if (ctx.tf()) {
    ctx.pending = PendingEvent{PendingKind::SingleStepTrap, {}, "single-step"};
    emit(Ev::Trap, t, ctx.rip, "single-step pending");
  }
}

void Machine::aex(int t, PendingEvent reason) {
  auto& ctx = thread(t);
  if (ctx.mode != Mode::Enclave) throw MachineError(MachineError::Code::WrongMode, "AEX from host mode");
  auto& tcs = tcs_of(ctx.enclave, ctx.tcs);
  uint64_t base = page_addr(tcs.ssa_page);
  // Hardware save: not subject to PKRU.
  for (size_t i = 0; i < isa::kNumGprs; ++i) raw_set_u64(base + ssa::kGprs + 8 * i, ctx.gpr[i]);
  raw_set_u64(base + ssa::kRip, ctx.rip);
  raw_set_u64(base + ssa::kRflags, ctx.rflags);
  raw_set_u64(base + ssa::kPkru, ctx.pkru.value());
  raw_set_u64(base + ssa::kV0, ctx.xstate.v0);
  raw_set_u64(base + ssa::kV1, ctx.xstate.v1);
  tcs.cssa += 1;
  tcs.busy = false;
  tcs.bound_thread = -1;
  int eid = ctx.enclave;
  int tcs_index = ctx.tcs;

  // Synthetic exit state.
  ctx.gpr.fill(0);
  ctx.reg(isa::kRsp) = raw_u64(base + ssa::kUrsp);
  ctx.reg(isa::kRbp) = raw_u64(base + ssa::kUrbp);
  ctx.reg(isa::kRbx) = static_cast<uint64_t>(tcs_index);
  ctx.rip = ctx.return_location;
  ctx.rflags = 0x2;
  if (ctx.tf_shadow_) ctx.rflags |= kFlagTf;
  ctx.mode = Mode::Host;
  ctx.enclave = -1;
  ctx.tcs = -1;
  std::string why = reason.kind == PendingKind::PageFault   ? to_string(reason.fault)
                    : reason.kind == PendingKind::Interrupt ? std::string("interrupt")
                                                            : reason.reason;
  ctx.pending = std::move(reason);
  emit(Ev::Aex, t, ctx.rip,
       "enclave=" + std::to_string(eid) + " tcs=" + std::to_string(tcs_index) + " " + why);
}

void Machine::eresume(int t, int enclave_id, int tcs_index) {
  auto& ctx = thread(t);
  if (ctx.mode != Mode::Host) throw MachineError(MachineError::Code::WrongMode, "ERESUME from enclave mode");
  if (ctx.pending) throw MachineError(MachineError::Code::TrapPending, "ERESUME with a pending event");
  auto& e = enclave(enclave_id);
  auto& tcs = tcs_of(enclave_id, tcs_index);
  if (tcs.cssa == 0)
    throw MachineError(MachineError::Code::NoSavedContext, "no saved context on TCS " + std::to_string(tcs_index));
  if (tcs.busy) throw MachineError(MachineError::Code::TcsBusy, "TCS busy");
  uint64_t base = page_addr(tcs.ssa_page);
  ctx.tf_shadow_ = ctx.tf();
  for (size_t i = 0; i < isa::kNumGprs; ++i) ctx.gpr[i] = raw_u64(base + ssa::kGprs + 8 * i);
  ctx.rip = raw_u64(base + ssa::kRip);
  ctx.rflags = (raw_u64(base + ssa::kRflags) & ~kFlagTf) | 0x2;
  ctx.xstate.v0 = raw_u64(base + ssa::kV0);
  ctx.xstate.v1 = raw_u64(base + ssa::kV1);
  if (e.xfrm & kXfrmPkruBit) ctx.pkru = Pkru(static_cast<uint32_t>(raw_u64(base + ssa::kPkru)));
  tcs.cssa -= 1;
  tcs.busy = true;
  tcs.bound_thread = t;
  ctx.mode = Mode::Enclave;
  ctx.enclave = enclave_id;
  ctx.tcs = tcs_index;
  emit(Ev::Eresume, t, ctx.rip,
       "enclave=" + std::to_string(enclave_id) + " tcs=" + std::to_string(tcs_index));
}

void Machine::set_page_attrs(int caller, uint64_t page, std::optional<uint8_t> p,
                             std::optional<uint8_t> pkey) {
  if (caller >= 0 && thread(caller).mode != Mode::Host)
    throw MachineError(MachineError::Code::Privilege, "pkey_mprotect from enclave mode");
  Page* pg = find_page(page);
  if (!pg) throw MachineError(MachineError::Code::NoPage, "no page " + hex(page));
  if (pkey && *pkey >= kNumKeys) throw MachineError(MachineError::Code::Privilege, "bad pkey");
  if (p) pg->perm = *p;
  if (pkey) pg->pkey = *pkey;
  emit(Ev::Perm, caller, page_addr(page),
       "perm=" + perm::to_string(pg->perm) + " pkey=" + std::to_string(pg->pkey));
  if (observer_) observer_->on_attrs_changed(page);
}

SignalDelivery Machine::deliver_signal(int t) {
  auto& ctx = thread(t);
  if (!ctx.pending) throw MachineError(MachineError::Code::NoPending, "no pending event");
  SignalDelivery out;
  out.event = *ctx.pending;
  uint64_t frame = ctx.signal_sp - sigframe::kSize;

  ThreadContext kernel_view = ctx;
  if (config_.patched_kernel) kernel_view.pkru = ctx.pkru.granting(0);

  std::array<uint8_t, sigframe::kSize> buf{};
  auto put = [&](uint64_t off, uint64_t v) {
    auto b = store_le(v);
    std::memcpy(buf.data() + off, b.data(), 8);
  };
  put(sigframe::kRip, ctx.rip);
  put(sigframe::kRsp, ctx.reg(isa::kRsp));
  put(sigframe::kRbp, ctx.reg(isa::kRbp));
  put(sigframe::kRflags, ctx.rflags);
  // The patched kernel writes the real PKRU into the copy, not the grant.
  put(sigframe::kPkru, ctx.pkru.value());
  put(sigframe::kKind, static_cast<uint64_t>(out.event.kind));
  put(sigframe::kAddr, out.event.fault.addr);

  if (auto f = write(kernel_view, frame, buf)) {
    out.fault = *f;
    emit(Ev::SignalAbort, t, frame, "handler stack inaccessible: " + to_string(*f));
    return out;
  }
  ctx.signal_sp = frame;
  ctx.pending.reset();
  ctx.pkru = Pkru::signal_default();
  ctx.rflags &= ~kFlagTf;  // handlers run without single-stepping
  out.delivered = true;
  out.frame = frame;
  emit(Ev::Signal, t, frame,
       std::string(out.event.kind == PendingKind::SingleStepTrap ? "SIGTRAP"
                   : out.event.kind == PendingKind::PageFault    ? "SIGSEGV"
                   : out.event.kind == PendingKind::Interrupt    ? "SIGALRM"
                                                                 : "SIGILL"));
  return out;
}

bool Machine::sigreturn(int t, uint64_t frame) {
  auto& ctx = thread(t);
  ThreadContext kernel_view = ctx;
  if (config_.patched_kernel) kernel_view.pkru = ctx.pkru.granting(0);
  std::array<uint8_t, sigframe::kSize> buf{};
  if (auto f = read(kernel_view, frame, buf)) {
    emit(Ev::SignalAbort, t, frame, "sigreturn frame inaccessible: " + to_string(*f));
    return false;
  }
  auto get = [&](uint64_t off) { return load_le(std::span<const uint8_t>(buf).subspan(off, 8)); };
  ctx.rip = get(sigframe::kRip);
  ctx.reg(isa::kRsp) = get(sigframe::kRsp);
  ctx.reg(isa::kRbp) = get(sigframe::kRbp);
  ctx.rflags = get(sigframe::kRflags) | 0x2;
  ctx.pkru = Pkru(static_cast<uint32_t>(get(sigframe::kPkru)));
  // restore_altstack touches the handler stack after the context (and its
  // PKRU) is back in place.
  ThreadContext alt = ctx;
  if (config_.patched_kernel) alt.pkru = ctx.pkru.granting(0);
  std::array<uint8_t, 8> probe{};
  if (auto f = read(alt, frame, probe)) {
    emit(Ev::SignalAbort, t, frame, "restore_altstack inaccessible: " + to_string(*f));
    return false;
  }
  ctx.signal_sp = frame + sigframe::kSize;
  emit(Ev::Sigreturn, t, ctx.rip, "pkru=" + hex(ctx.pkru.value()));
  return true;
}

void Machine::fault_to_aex(int t, const PageFault& f) {
  emit(Ev::Fault, t, f.addr, to_string(f));
  aex(t, PendingEvent{PendingKind::PageFault, f, ""});
}

void Machine::pend_abort(int t, const std::string& reason) {
  emit(Ev::Fault, t, thread(t).rip, reason);
  aex(t, PendingEvent{PendingKind::Abort, {}, reason});
}

StepOutcome Machine::step_enclave(int t) {
  using isa::Op;
  auto& ctx = thread(t);
  if (ctx.mode != Mode::Enclave) throw MachineError(MachineError::Code::WrongMode, "not in enclave mode");

  std::array<uint8_t, 10> raw{};
  if (auto f = fetch(ctx, ctx.rip, std::span(raw).subspan(0, 1))) {
    fault_to_aex(t, *f);
    return StepOutcome::Faulted;
  }
  auto len = isa::length_of(raw[0]);
  if (!len) {
    pend_abort(t, "invalid-opcode");
    return StepOutcome::Faulted;
  }
  if (*len > 1) {
    if (auto f = fetch(ctx, ctx.rip + 1, std::span(raw).subspan(1, *len - 1))) {
      fault_to_aex(t, *f);
      return StepOutcome::Faulted;
    }
  }
  auto insn = isa::decode(std::span<const uint8_t>(raw.data(), *len));
  if (!insn || insn->op == Op::Eenter) {
    pend_abort(t, "invalid-opcode");
    return StepOutcome::Faulted;
  }

  {
    Event e;
    e.step = step_;
    e.thread = t;
    e.kind = Ev::Insn;
    e.addr = ctx.rip;
    e.pkru = ctx.pkru.value();
    e.enclave = ctx.enclave;
    e.tcs = ctx.tcs;
    e.tag = ctx.entry_tag;
    const auto& tcs = enclave(ctx.enclave).tcs[static_cast<size_t>(ctx.tcs)];
    if (const Page* sp = find_page(tcs.ssa_page)) e.ssa_pkey = sp->pkey;
    e.detail = isa::disassemble(*insn) + " pkru=" + hex(ctx.pkru.value());
    trace_.record(std::move(e));
  }

  uint64_t next = ctx.rip + insn->length;
  auto set_flags = [&](uint64_t a, uint64_t b) {
    ctx.rflags &= ~(kFlagZf | kFlagCf);
    if (a == b) ctx.rflags |= kFlagZf;
    if (a < b) ctx.rflags |= kFlagCf;
  };
  auto fail = [&](const PageFault& f) {
    fault_to_aex(t, f);
    return StepOutcome::Faulted;
  };
  uint64_t& r1 = ctx.gpr[insn->r1];
  uint64_t r2 = ctx.gpr[insn->r2];
  switch (insn->op) {
    case Op::Nop:
      break;
    case Op::Movi:
      r1 = static_cast<uint64_t>(insn->imm);
      break;
    case Op::Mov:
      r1 = r2;
      break;
    case Op::Load: {
      uint64_t v = 0;
      if (auto f = read_u64(ctx, r2 + static_cast<uint64_t>(insn->imm), v)) return fail(*f);
      r1 = v;
      break;
    }
    case Op::Loadb: {
      std::array<uint8_t, 1> b{};
      if (auto f = read(ctx, r2 + static_cast<uint64_t>(insn->imm), b)) return fail(*f);
      r1 = b[0];
      break;
    }
    case Op::Store:
      if (auto f = write_u64(ctx, r1 + static_cast<uint64_t>(insn->imm), r2)) return fail(*f);
      break;
    case Op::Storeb: {
      std::array<uint8_t, 1> b{static_cast<uint8_t>(r2)};
      if (auto f = write(ctx, r1 + static_cast<uint64_t>(insn->imm), b)) return fail(*f);
      break;
    }
    case Op::Add:
      r1 += r2;
      break;
    case Op::Sub:
      r1 -= r2;
      break;
    case Op::Xor:
      r1 ^= r2;
      break;
    case Op::Addi:
      r1 += static_cast<uint64_t>(insn->imm);
      break;
    case Op::Cmp:
      set_flags(r1, r2);
      break;
    case Op::Cmpi:
      set_flags(r1, static_cast<uint64_t>(insn->imm));
      break;
    case Op::Jmp:
      next += static_cast<uint64_t>(insn->imm);
      break;
    case Op::Jz:
      if (ctx.rflags & kFlagZf) next += static_cast<uint64_t>(insn->imm);
      break;
    case Op::Jnz:
      if (!(ctx.rflags & kFlagZf)) next += static_cast<uint64_t>(insn->imm);
      break;
    case Op::Jb:
      if (ctx.rflags & kFlagCf) next += static_cast<uint64_t>(insn->imm);
      break;
    case Op::Jmpr:
      next = r1;
      break;
    case Op::Probe: {
      ctx.rip = next;  // the probe itself never faults
      r1 = probe(t, r2 + static_cast<uint64_t>(insn->imm)) ? 1 : 0;
      return StepOutcome::Retired;
    }
    case Op::Xrstor:
      if (auto f = exec_xrstor(t, r1)) return fail(*f);
      break;
    case Op::Xsave:
      if (auto f = exec_xsave(t, r1)) return fail(*f);
      break;
    case Op::Popfq:
      exec_popfq(t, r1);
      break;
    case Op::Wrpkru:
      exec_wrpkru(t, static_cast<uint32_t>(ctx.reg(isa::kRax)));
      break;
    case Op::Rdpkru:
      ctx.reg(isa::kRax) = exec_rdpkru(t);
      break;
    case Op::Eexit:
      ctx.rip = next;
      eexit(t);
      return StepOutcome::Exited;
    case Op::Ocall: {
      // tRTS ocall path: push the continuation on the TCS's TLS stack, then
      // leave through the usual EEXIT to RBX with RAX = 1.
      const auto& tcs = enclave(ctx.enclave).tcs[static_cast<size_t>(ctx.tcs)];
      uint64_t tls_base = page_addr(tcs.tls_page);
      uint64_t depth = 0;
      if (auto f = read_u64(ctx, tls_base + tls::kDepth, depth)) return fail(*f);
      if (depth >= tls::kMaxDepth) {
        pend_abort(t, "ocall-depth");
        return StepOutcome::Faulted;
      }
      uint64_t slot = tls_base + tls::kFrames + depth * tls::kFrameSize;
      for (size_t i = 0; i < isa::kNumGprs; ++i)
        if (auto f = write_u64(ctx, slot + 8 * i, ctx.gpr[i])) return fail(*f);
      if (auto f = write_u64(ctx, slot + 80, next)) return fail(*f);
      if (auto f = write_u64(ctx, tls_base + tls::kDepth, depth + 1)) return fail(*f);
      ctx.reg(isa::kRax) = 1;
      ctx.rip = next;
      eexit(t);
      return StepOutcome::Exited;
    }
    case Op::Oresume: {
      const auto& tcs = enclave(ctx.enclave).tcs[static_cast<size_t>(ctx.tcs)];
      uint64_t tls_base = page_addr(tcs.tls_page);
      uint64_t depth = 0;
      if (auto f = read_u64(ctx, tls_base + tls::kDepth, depth)) return fail(*f);
      if (depth == 0 || depth > tls::kMaxDepth) {
        pend_abort(t, "oresume-empty");
        return StepOutcome::Faulted;
      }
      uint64_t slot = tls_base + tls::kFrames + (depth - 1) * tls::kFrameSize;
      std::array<uint64_t, isa::kNumGprs> regs{};
      for (size_t i = 0; i < isa::kNumGprs; ++i)
        if (auto f = read_u64(ctx, slot + 8 * i, regs[i])) return fail(*f);
      uint64_t rip = 0;
      if (auto f = read_u64(ctx, slot + 80, rip)) return fail(*f);
      if (auto f = write_u64(ctx, tls_base + tls::kDepth, depth - 1)) return fail(*f);
      ctx.gpr = regs;
      next = rip;
      break;
    }
    case Op::Eenter:
      break;  // rejected above
  }
  ctx.rip = next;
  return StepOutcome::Retired;
}

}  // namespace capsule
