// Host-side state machine of the protected ECALL / OCALL / inspection paths.

#include <algorithm>

#include "capsule/runtime.hpp"
#include "runtime_internal.hpp"

namespace capsule {

using Phase = Capsule::Activation::Phase;
using Kind = Capsule::Activation::Kind;

namespace {

uint64_t resolve_size(const edl::FunctionDecl& fn, const edl::BufferRecord& b,
                      const std::vector<uint64_t>& scalars) {
  if (b.size.is_literal()) return *b.size.literal;
  auto i = fn.param_index(b.size.ref);
  return i ? scalars[*i] : 0;
}

}  // namespace

void Capsule::start_ecall(int thread, int handle, const std::string& fn, std::vector<ArgValue> args) {
  const auto& e = info(handle);
  auto idx = e.spec.ecall_index(fn);
  if (!idx) throw CapsuleError("unknown-ecall", "no ECALL named '" + fn + "' in " + e.name);
  auto& ht = *threads_.at(thread);
  Activation a;
  a.kind = Kind::Ecall;
  a.phase = Phase::Marshal;
  a.handle = handle;
  a.fn = *idx;
  a.args = std::move(args);
  a.args.resize(e.spec.ecalls[*idx].params.size());
  a.top_level = true;
  ht.stack.push_back(std::move(a));
}

bool Capsule::idle(int thread) const {
  const auto& ht = *threads_.at(thread);
  return ht.stack.empty();
}

bool Capsule::dead(int thread) const { return threads_.at(thread)->dead; }

bool Capsule::runnable(int thread) const {
  const auto& ht = *threads_.at(thread);
  if (ht.dead || halted_) return false;
  return !ht.stack.empty() || m_.thread(thread).pending.has_value();
}

bool Capsule::in_inspection(int thread) const {
  const auto& ht = *threads_.at(thread);
  return !ht.stack.empty() && ht.stack.back().kind == Kind::Inspect &&
         m_.thread(thread).mode == Mode::Enclave;
}

std::vector<CallResult> Capsule::take_results(int thread) {
  auto& ht = *threads_.at(thread);
  return std::exchange(ht.results, {});
}

bool Capsule::inject_interrupt(int thread) {
  if (m_.thread(thread).mode != Mode::Enclave) return false;
  m_.aex(thread, PendingEvent{PendingKind::Interrupt, {}, "interrupt"});
  return true;
}

CallResult Capsule::ecall_sync(int thread, int handle, const std::string& fn, std::vector<ArgValue> args,
                               uint64_t max_steps) {
  start_ecall(thread, handle, fn, std::move(args));
  for (uint64_t i = 0; i < max_steps && runnable(thread); ++i) {
    m_.begin_step(thread);
    step(thread);
  }
  auto r = take_results(thread);
  if (r.empty()) {
    CallResult c;
    c.error = halted_ ? violations_.back().reason : dead(thread) ? "thread-killed" : "step-limit";
    return c;
  }
  return r.back();
}

bool Capsule::pcl_inspect(int handle, int thread) {
  auto& e = enclaves_.at(handle);
  std::vector<uint64_t> pcl;
  for (const auto& [idx, role] : e.pages)
    if (role == PageRole::PclCode) pcl.push_back(idx);
  if (pcl.empty()) {
    e.pcl_done = true;
    return true;
  }
  // Stand-in for the in-enclave decryption: reveal the plaintext in place.
  if (e.pcl_mask) {
    for (uint64_t idx : pcl) {
      Page* p = m_.find_page(idx);
      for (auto& b : p->bytes) b ^= *e.pcl_mask;
    }
    Event ev;
    ev.step = m_.step();
    ev.kind = Ev::Lifecycle;
    ev.enclave = handle;
    ev.addr = page_addr(pcl.front());
    ev.detail = "pcl-unmasked pages=" + std::to_string(pcl.size());
    m_.trace().record(std::move(ev));
  }
  uint64_t start = page_addr(pcl.front());
  uint64_t len = pcl.size() * kPageSize;
  if (executable_enclave_page(pcl.front() - 1)) start -= 2, len += 2;
  if (executable_enclave_page(pcl.back() + 1)) len += 2;
  last_inspection_.reset();
  push_inspection(thread, handle, start, len, pcl, true, 0);
  for (int i = 0; i < 1'000'000 && runnable(thread); ++i) {
    m_.begin_step(thread);
    step(thread);
  }
  bool ok = last_inspection_.value_or(false);
  e.pcl_done = ok;
  return ok;
}

void Capsule::push_inspection(int t, int handle, uint64_t start, uint64_t len, std::vector<uint64_t> pages,
                              bool pcl, uint64_t fault_page) {
  (void)fault_page;
  Activation a;
  a.kind = Kind::Inspect;
  a.phase = Phase::Prepare;
  a.handle = handle;
  a.tag = kTagInspect;
  a.insp_start = start;
  a.insp_len = len;
  a.insp_pages = std::move(pages);
  a.pcl = pcl;
  a.top_level = pcl;
  threads_.at(t)->stack.push_back(std::move(a));
}

int Capsule::pick_tcs(int t, int handle, bool bound_ok) {
  auto& e = enclaves_.at(handle);
  const auto& me = m_.enclave(handle);
  if (bound_ok)
    for (size_t i = 0; i < e.tcs.size(); ++i)
      if (e.tcs[i].owner == t && !me.tcs[i].busy && me.tcs[i].cssa == 0) {
        e.tcs[i].refs++;
        return static_cast<int>(i);
      }
  for (size_t i = 0; i < e.tcs.size(); ++i)
    if (e.tcs[i].owner < 0 && !me.tcs[i].busy && me.tcs[i].cssa == 0) {
      e.tcs[i].owner = t;
      e.tcs[i].refs = 1;
      return static_cast<int>(i);
    }
  return -1;
}

void Capsule::release_tcs(int handle, int tcs) {
  auto it = enclaves_.find(handle);
  if (it == enclaves_.end() || tcs < 0) return;
  auto& s = it->second.tcs[static_cast<size_t>(tcs)];
  if (--s.refs <= 0) {
    s.refs = 0;
    s.owner = -1;
  }
}

void Capsule::kill(int t, std::string why, std::string detail) {
  auto& ht = *threads_.at(t);
  violation(t, why, detail, false);
  for (auto& a : ht.stack)
    if (a.top_level) {
      CallResult r;
      r.error = why;
      ht.results.push_back(r);
      break;
    }
  if (!ht.stack.empty() && ht.stack.front().kind == Kind::Inspect && ht.stack.front().pcl)
    last_inspection_ = false;
  ht.stack.clear();
  ht.dead = true;
}

void Capsule::finish_activation(int t) {
  auto& ht = *threads_.at(t);
  Activation a = std::move(ht.stack.back());
  ht.stack.pop_back();
  if (a.kind == Kind::Inspect) {
    if (a.top_level || ht.stack.empty()) {
      last_inspection_ = a.passed;
      return;
    }
    auto& parent = ht.stack.back();
    parent.inspection_passed = a.passed;
    return;
  }
  if (a.top_level || ht.stack.empty()) {
    ht.results.push_back(std::move(a.result));
    return;
  }
  auto& parent = ht.stack.back();
  parent.ocall->call.nested_result = std::move(a.result);
  parent.ocall->call.nested.reset();
  parent.ocall->call.phase += 1;
  parent.phase = Phase::HostFnResume;
}

void Capsule::step(int t) {
  if (halted_) return;
  auto& ht = *threads_.at(t);
  if (ht.dead) return;
  auto& ctx = m_.thread(t);
  try {
    if (ctx.mode == Mode::Enclave) {
      m_.step_enclave(t);
      return;
    }
    if (ctx.pending && (ht.stack.empty() || ht.stack.back().phase != Phase::Running)) {
      violation(t, reason::kUnexpectedTrap, "pending event with no protected entry", true);
      return;
    }
    if (ht.stack.empty()) return;
    host_step(t);
  } catch (const MachineError& ex) {
    kill(t, reason::kInvalidInstruction, ex.what());
  }
}

void Capsule::host_step(int t) {
  auto& ht = *threads_.at(t);
  auto& a = ht.stack.back();
  auto& ctx = m_.thread(t);
  auto emit = [&](Ev kind, uint64_t addr, std::string detail) {
    Event e;
    e.step = m_.step();
    e.thread = t;
    e.kind = kind;
    e.addr = addr;
    e.detail = std::move(detail);
    e.pkru = ctx.pkru.value();
    m_.trace().record(std::move(e));
  };
  auto fail_call = [&](const char* why, const std::string& detail) {
    violation(t, why, detail, false);
    a.result.ok = false;
    a.result.error = why;
    if (a.tcs >= 0) release_tcs(a.handle, a.tcs);
    finish_activation(t);
  };
  auto& enc = enclaves_.at(a.handle);

  switch (a.phase) {
    case Phase::Marshal: {
      a.tcs = pick_tcs(t, a.handle, true);
      if (a.tcs < 0) {
        fail_call(reason::kNoFreeTcs, enc.name);
        return;
      }
      auto& pb = enc.tcs[static_cast<size_t>(a.tcs)].pb;
      const auto& decl = enc.spec.ecalls[a.fn];
      const auto& edge = enc.ecall_edges[a.fn];
      std::vector<uint64_t> scalars(decl.params.size(), 0);
      for (size_t i = 0; i < decl.params.size(); ++i)
        if (decl.params[i].kind == edl::ParamKind::Scalar) scalars[i] = a.args[i].scalar;
      std::vector<uint64_t> sizes;
      for (const auto& b : edge.buffers) sizes.push_back(resolve_size(decl, b, scalars));
      uint64_t size = edge.frame_size(sizes);
      if (pb.top + size > pb.capacity) {
        fail_call(reason::kMarshalOverflow, "frame of " + std::to_string(size) + " bytes");
        return;
      }
      a.pb_top_before = pb.top;
      a.frame = pb.base + pb.top;
      a.frame_size = size;
      pb.frames.push_back(pb.top);
      pb.top += size;
      uint64_t ms = a.frame + edl::kFrameHeader;
      m_.raw_set_u64(a.frame + edl::header::kFnId, a.fn);
      m_.raw_set_u64(a.frame + edl::header::kFrameSize, size);
      m_.raw_set_u64(a.frame + edl::header::kRetOffset, edge.ret_offset.value_or(edl::kNoReturnSlot));
      m_.raw_set_u64(a.frame + edl::header::kRetSize, edge.ret_size);
      uint64_t body = a.frame + edge.fixed_size;
      std::vector<uint64_t> addr_of(decl.params.size(), 0);
      for (size_t k = 0; k < edge.buffers.size(); ++k) {
        const auto& b = edge.buffers[k];
        addr_of[b.param] = body;
        a.buf_addrs.push_back(body);
        a.buf_sizes.push_back(sizes[k]);
        std::vector<uint8_t> bytes(sizes[k], 0);
        if (edl::copies_in(b.dir)) {
          const auto& src = a.args[b.param].bytes;
          std::copy_n(src.begin(), std::min(src.size(), bytes.size()), bytes.begin());
        }
        if (!bytes.empty()) {
          if (auto f = m_.write(ctx, body, bytes)) {
            fail_call(reason::kMarshalOverflow, to_string(*f));
            return;
          }
        }
        body += edl::align8(sizes[k]);
      }
      for (size_t i = 0; i < decl.params.size(); ++i) {
        uint64_t v = decl.params[i].kind == edl::ParamKind::Scalar ? scalars[i] : addr_of[i];
        m_.write_u64(ctx, ms + edge.slot_offsets[i], v);
      }
      if (edge.ret_offset) m_.write_u64(ctx, ms + *edge.ret_offset, 0);
      emit(Ev::Marshal, a.frame,
           enc.name + "." + decl.name + " tcs=" + std::to_string(a.tcs) + " size=" + std::to_string(size) +
               " top=" + std::to_string(pb.top));
      a.phase = Phase::Seal;
      return;
    }

    case Phase::Prepare: {
      a.tcs = pick_tcs(t, a.handle, false);
      if (a.tcs < 0) {
        if (a.pcl) {
          violation(t, reason::kNoFreeTcs, "inspection of " + enc.name, false);
          a.passed = false;
          finish_activation(t);
        } else {
          kill(t, reason::kNoFreeTcs, "inspection of " + enc.name);
        }
        return;
      }
      ++inspections_;
      emit(Ev::Inspect, a.insp_start,
           std::string(a.pcl ? "pcl" : "runtime") + " start len=" + std::to_string(a.insp_len) +
               " tcs=" + std::to_string(a.tcs));
      uint64_t ssa = m_.enclave(a.handle).tcs[static_cast<size_t>(a.tcs)].ssa_page;
      a.ssa_pkey_saved = m_.find_page(ssa)->pkey;
      m_.set_page_attrs(t, ssa, std::nullopt, 0);
      for (uint64_t p : a.insp_pages) {
        set_lifecycle(a.handle, p, inspector::Lifecycle::UnderInspectionRo);
        m_.set_page_attrs(t, p, perm::R, std::nullopt);
      }
      a.phase = Phase::Seal;
      return;
    }

    case Phase::Seal: {
      uint64_t key = sp_key();
      uint64_t rsp = ctx.reg(isa::kRsp) - 16;
      uint64_t rbp = ctx.reg(isa::kRbp);
      auto f1 = m_.write_u64(ctx, rsp, seal_sp(rsp, key));
      auto f2 = m_.write_u64(ctx, rsp + 8, seal_sp(rbp, key));
      if (f1 || f2) {
        kill(t, reason::kStackIntegrity, "cannot seal host stack");
        return;
      }
      ctx.reg(isa::kRsp) = rsp;
      a.sealed_rsp = rsp;
      a.sealed = true;
      emit(Ev::Seal, rsp, "rsp=" + hex64(rsp) + " rbp=" + hex64(rbp));
      a.phase = Phase::SetTf;
      return;
    }

    case Phase::SetTf:
      ctx.rip = layout::stub_addr(layout::kStubPopfq);
      m_.exec_popfq(t, ctx.rflags | kFlagTf);
      ctx.rip = layout::stub_addr(layout::kStubWrpkru);
      a.phase = Phase::Restrict;
      return;

    case Phase::Restrict:
      a.pkru_before = ctx.pkru.value();
      m_.exec_wrpkru(t, Pkru::only(enc.pkey).value());
      ctx.rip = layout::stub_addr(layout::kStubEenter);
      a.phase = Phase::Enter;
      return;

    case Phase::Enter: {
      if (a.kind == Kind::Inspect) {
        ctx.reg(isa::kRax) = 2;
        ctx.reg(isa::kRsi) = a.insp_start;
        ctx.reg(isa::kRdx) = a.insp_len;
      } else if (a.reenter_from_ocall) {
        ctx.reg(isa::kRax) = 1;
      } else {
        const auto& pb = enc.tcs[static_cast<size_t>(a.tcs)].pb;
        ctx.reg(isa::kRax) = 0;
        ctx.reg(isa::kRdx) = a.fn;
        ctx.reg(isa::kRsi) = a.frame + edl::kFrameHeader;
        ctx.reg(isa::kRdi) = a.frame + a.frame_size;
        ctx.reg(isa::kR8) = pb.base + pb.capacity;
      }
      ctx.entry_tag = a.tag;
      m_.eenter(t, a.handle, a.tcs);
      a.phase = Phase::Running;
      return;
    }

    case Phase::Running: {
      if (!ctx.pending) {
        violation(t, reason::kControlFlow, "enclave exit without a pending trap", true);
        return;
      }
      auto d = m_.deliver_signal(t);
      if (!d.delivered) {
        violation(t, reason::kSignalDelivery, to_string(d.fault), true);
        return;
      }
      a.sig_frame = d.frame;
      a.event = d.event;
      a.phase = Phase::Handle;
      return;
    }

    case Phase::Handle: {
      uint64_t f = a.sig_frame;
      uint64_t rip = 0, rsp = 0, rbp = 0, rflags = 0;
      m_.read_u64(ctx, f + sigframe::kRip, rip);
      m_.read_u64(ctx, f + sigframe::kRsp, rsp);
      m_.read_u64(ctx, f + sigframe::kRbp, rbp);
      m_.read_u64(ctx, f + sigframe::kRflags, rflags);
      auto verify = [&]() {
        bool ok = verify_sp(m_, rsp, rbp, sp_key());
        emit(Ev::Verify, rsp, ok ? "ok" : "mismatch");
        if (!ok) violation(t, reason::kStackIntegrity, "rsp=" + hex64(rsp) + " rbp=" + hex64(rbp), true);
        return ok;
      };
      switch (a.event.kind) {
        case PendingKind::SingleStepTrap: {
          if (rip != ctx.return_location) {
            violation(t, reason::kControlFlow,
                      "exit target " + hex64(rip) + " expected " + hex64(ctx.return_location), true);
            return;
          }
          m_.write_u64(ctx, f + sigframe::kRflags, rflags & ~kFlagTf);
          m_.write_u64(ctx, f + sigframe::kPkru, a.pkru_before);
          emit(Ev::PkruRestore, f, "pkru=" + hex64(a.pkru_before));
          if (!verify()) return;
          a.exit_kind = Activation::ExitKind::Eexit;
          a.phase = Phase::Sigreturn;
          return;
        }
        case PendingKind::Interrupt:
          if (!verify()) return;
          a.exit_kind = Activation::ExitKind::Resume;
          a.phase = Phase::Sigreturn;
          return;
        case PendingKind::PageFault: {
          if (!verify()) return;
          const auto& pf = a.event.fault;
          uint64_t page = page_of(pf.addr);
          if (pf.code == FaultCode::AccessError) {
            kill(t, reason::kAccessError, to_string(pf));
            return;
          }
          const Page* pg = m_.find_page(page);
          bool owned = pg && pg->owner == a.handle;
          if (!owned || !enc.rwx_origin.count(page)) {
            kill(t, reason::kNotRwxOrigin, to_string(pf));
            return;
          }
          if (enc.blocked.count(page) ||
              enc.lifecycle.at(page) != inspector::Lifecycle::UninspectedRw) {
            kill(t, reason::kWrpkruFound, "page " + hex64(page_addr(page)) + " is blocked");
            return;
          }
          uint64_t start = page_addr(page);
          uint64_t len = kPageSize;
          if (executable_enclave_page(page - 1)) start -= 2, len += 2;
          if (executable_enclave_page(page + 1)) len += 2;
          a.phase = Phase::AfterInspection;
          push_inspection(t, a.handle, start, len, {page}, false, page);
          return;
        }
        case PendingKind::Abort:
          verify();
          if (halted_) return;
          kill(t, reason::kInvalidInstruction, a.event.reason);
          return;
      }
      return;
    }

    case Phase::AfterInspection:
      if (!a.inspection_passed) {
        kill(t, reason::kWrpkruFound, "runtime inspection of " + hex64(a.event.fault.addr));
        return;
      }
      a.exit_kind = Activation::ExitKind::Resume;
      a.phase = Phase::Sigreturn;
      return;

    case Phase::Sigreturn:
      if (!m_.sigreturn(t, a.sig_frame)) {
        violation(t, reason::kSignalDelivery, "sigreturn", true);
        return;
      }
      a.phase = a.exit_kind == Activation::ExitKind::Resume ? Phase::Resume : Phase::AfterExit;
      return;

    case Phase::Resume:
      ctx.entry_tag = a.tag;
      m_.eresume(t, a.handle, a.tcs);
      a.phase = Phase::Running;
      return;

    case Phase::AfterExit: {
      if (a.kind == Kind::Inspect) {
        a.passed = ctx.reg(isa::kRax) == 1;
        a.phase = Phase::InspectDone;
        return;
      }
      if (ctx.reg(isa::kRax) != 1) {
        a.phase = Phase::Unmarshal;
        return;
      }
      // OCALL: rdx = ocall id, rsi = frame in this TCS's parameter buffer.
      uint64_t id = ctx.reg(isa::kRdx);
      uint64_t frame = ctx.reg(isa::kRsi);
      if (id >= enc.ocall_edges.size() || !host_fns_.count(enc.spec.ocalls[id].name)) {
        kill(t, reason::kUnknownOcall, "id=" + std::to_string(id));
        return;
      }
      const auto& decl = enc.spec.ocalls[id];
      const auto& edge = enc.ocall_edges[id];
      auto& pb = enc.tcs[static_cast<size_t>(a.tcs)].pb;
      uint64_t lo = pb.base + pb.top;
      uint64_t hi = pb.base + pb.capacity;
      if (frame < lo || frame > hi || hi - frame < edge.fixed_size) {
        kill(t, reason::kMarshalOverflow, "ocall frame " + hex64(frame) + " outside the parameter buffer");
        return;
      }
      Activation::Ocall oc;
      oc.fn = id;
      oc.frame = frame;
      oc.pb_top_before = pb.top;
      oc.call.name = decl.name;
      oc.call.enclave = a.handle;
      oc.call.scalars.assign(decl.params.size(), 0);
      oc.call.buffers.assign(decl.params.size(), {});
      uint64_t ms = frame + edl::kFrameHeader;
      std::vector<uint64_t> slot(decl.params.size(), 0);
      for (size_t i = 0; i < decl.params.size(); ++i) m_.read_u64(ctx, ms + edge.slot_offsets[i], slot[i]);
      for (size_t i = 0; i < decl.params.size(); ++i)
        if (decl.params[i].kind == edl::ParamKind::Scalar) oc.call.scalars[i] = slot[i];
      uint64_t end = frame + edge.fixed_size;
      for (const auto& b : edge.buffers) {
        uint64_t addr = slot[b.param];
        uint64_t size = resolve_size(decl, b, oc.call.scalars);
        if (addr < frame || addr > hi || hi - addr < size) {
          kill(t, reason::kMarshalOverflow, "ocall buffer " + hex64(addr) + " outside the parameter buffer");
          return;
        }
        oc.buf_addrs.push_back(addr);
        oc.buf_sizes.push_back(size);
        end = std::max(end, addr + size);
      }
      pb.frames.push_back(frame - pb.base);
      pb.top = edl::align8(end - pb.base);
      emit(Ev::Ocall, frame, decl.name + " tcs=" + std::to_string(a.tcs) + " top=" + std::to_string(pb.top));
      a.ocall = std::move(oc);
      a.phase = Phase::CopyIn;
      return;
    }

    case Phase::CopyIn: {
      auto& oc = *a.ocall;
      const auto& edge = enc.ocall_edges[oc.fn];
      const auto& slot = enc.tcs[static_cast<size_t>(a.tcs)];
      uint64_t total = 0;
      for (size_t k = 0; k < edge.buffers.size(); ++k) {
        std::vector<uint8_t> bytes(oc.buf_sizes[k], 0);
        if (edl::copies_in(edge.buffers[k].dir) && !bytes.empty()) m_.read(ctx, oc.buf_addrs[k], bytes);
        uint64_t priv = slot.private_base + (oc.buf_addrs[k] - slot.pb.base);
        if (!bytes.empty()) m_.write(ctx, priv, bytes);
        total += bytes.size();
      }
      emit(Ev::CopyIn, slot.private_base, "bytes=" + std::to_string(total));
      a.phase = Phase::HostFn;
      return;
    }

    case Phase::HostFn:
    case Phase::HostFnResume: {
      auto& oc = *a.ocall;
      const auto& edge = enc.ocall_edges[oc.fn];
      const auto& slot = enc.tcs[static_cast<size_t>(a.tcs)];
      if (a.phase == Phase::HostFn) {
        // The host function only ever sees the private copies.
        for (size_t k = 0; k < edge.buffers.size(); ++k) {
          std::vector<uint8_t> priv(oc.buf_sizes[k], 0);
          uint64_t paddr = slot.private_base + (oc.buf_addrs[k] - slot.pb.base);
          if (!priv.empty()) m_.read(ctx, paddr, priv);
          if (edl::copies_in(edge.buffers[k].dir) && !priv.empty()) {
            std::vector<uint8_t> shared(priv.size(), 0);
            m_.read(ctx, oc.buf_addrs[k], shared);
            if (shared != priv) {
              emit(Ev::Tocttou, oc.buf_addrs[k], "parameter buffer changed after copy-in; private copy used");
              violation(t, reason::kTocttou, oc.call.name, false);
            }
          }
          oc.call.buffers[edge.buffers[k].param] = std::move(priv);
        }
      }
      emit(Ev::HostFn, 0, oc.call.name + " phase=" + std::to_string(oc.call.phase));
      host_fns_.at(oc.call.name)(oc.call);
      if (oc.call.nested) {
        auto idx = enc.spec.ecall_index(oc.call.nested->fn);
        if (!idx) {
          CallResult r;
          r.error = "unknown-ecall";
          oc.call.nested_result = r;
          oc.call.nested.reset();
          oc.call.phase += 1;
          a.phase = Phase::HostFnResume;
          return;
        }
        Activation n;
        n.kind = Kind::Ecall;
        n.phase = Phase::Marshal;
        n.handle = a.handle;
        n.fn = *idx;
        n.args = oc.call.nested->args;
        n.args.resize(enc.spec.ecalls[*idx].params.size());
        n.top_level = false;
        a.phase = Phase::HostFnWait;
        ht.stack.push_back(std::move(n));
        return;
      }
      a.phase = Phase::CopyOut;
      return;
    }

    case Phase::HostFnWait:
      return;  // finish_activation of the nested call moves us on

    case Phase::CopyOut: {
      auto& oc = *a.ocall;
      const auto& edge = enc.ocall_edges[oc.fn];
      auto& slot = enc.tcs[static_cast<size_t>(a.tcs)];
      uint64_t total = 0;
      for (size_t k = 0; k < edge.buffers.size(); ++k) {
        if (!edl::copies_out(edge.buffers[k].dir)) continue;
        auto bytes = oc.call.buffers[edge.buffers[k].param];
        bytes.resize(oc.buf_sizes[k], 0);
        if (bytes.empty()) continue;
        uint64_t paddr = slot.private_base + (oc.buf_addrs[k] - slot.pb.base);
        m_.write(ctx, paddr, bytes);
        m_.write(ctx, oc.buf_addrs[k], bytes);
        total += bytes.size();
      }
      if (edge.ret_offset)
        m_.write_u64(ctx, oc.frame + edl::kFrameHeader + *edge.ret_offset, oc.call.ret.value_or(0));
      slot.pb.top = oc.pb_top_before;
      slot.pb.frames.pop_back();
      emit(Ev::CopyOut, oc.frame, "bytes=" + std::to_string(total) + " top=" + std::to_string(slot.pb.top));
      a.ocall.reset();
      a.reenter_from_ocall = true;
      a.phase = Phase::SetTf;
      return;
    }

    case Phase::Unmarshal: {
      const auto& decl = enc.spec.ecalls[a.fn];
      const auto& edge = enc.ecall_edges[a.fn];
      auto& pb = enc.tcs[static_cast<size_t>(a.tcs)].pb;
      a.result.buffers.assign(decl.params.size(), {});
      for (size_t k = 0; k < edge.buffers.size(); ++k) {
        if (!edl::copies_out(edge.buffers[k].dir)) continue;
        std::vector<uint8_t> bytes(a.buf_sizes[k], 0);
        if (!bytes.empty()) m_.read(ctx, a.buf_addrs[k], bytes);
        a.result.buffers[edge.buffers[k].param] = std::move(bytes);
      }
      if (edge.ret_offset) {
        uint64_t v = 0;
        m_.read_u64(ctx, a.frame + edl::kFrameHeader + *edge.ret_offset, v);
        a.result.ret = v;
      }
      a.result.ok = true;
      pb.top = a.pb_top_before;
      pb.frames.pop_back();
      ctx.reg(isa::kRsp) = a.sealed_rsp + 16;
      a.sealed = false;
      emit(Ev::Unmarshal, a.frame, enc.name + "." + decl.name + " top=" + std::to_string(pb.top));
      release_tcs(a.handle, a.tcs);
      finish_activation(t);
      return;
    }

    case Phase::InspectDone: {
      uint64_t ssa = m_.enclave(a.handle).tcs[static_cast<size_t>(a.tcs)].ssa_page;
      for (uint64_t p : a.insp_pages) {
        if (a.passed) {
          set_lifecycle(a.handle, p, inspector::Lifecycle::ExecutableRx);
          m_.set_page_attrs(t, p, perm::RX, std::nullopt);
        } else {
          set_lifecycle(a.handle, p, inspector::Lifecycle::UninspectedRw);
          m_.set_page_attrs(t, p, perm::RW, std::nullopt);
          enc.blocked.insert(p);
          enc.flagged = true;
        }
      }
      m_.set_page_attrs(t, ssa, std::nullopt, a.ssa_pkey_saved);
      emit(Ev::Inspect, a.insp_start, std::string(a.pcl ? "pcl" : "runtime") + (a.passed ? " pass" : " fail"));
      ctx.reg(isa::kRsp) = a.sealed_rsp + 16;
      a.sealed = false;
      release_tcs(a.handle, a.tcs);
      finish_activation(t);
      return;
    }
  }
}

}  // namespace capsule
