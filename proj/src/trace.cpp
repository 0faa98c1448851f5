#include "capsule/trace.hpp"

#include <cstdio>

namespace capsule {

std::string_view ev_name(Ev e) {
  switch (e) {
    case Ev::Insn: return "insn";
    case Ev::Wrpkru: return "wrpkru";
    case Ev::PkruRestore: return "pkru-restore";
    case Ev::TfSet: return "tf-set";
    case Ev::Eenter: return "eenter";
    case Ev::Eexit: return "eexit";
    case Ev::Aex: return "aex";
    case Ev::Eresume: return "eresume";
    case Ev::Trap: return "trap";
    case Ev::Fault: return "fault";
    case Ev::Signal: return "signal";
    case Ev::Sigreturn: return "sigreturn";
    case Ev::SignalAbort: return "signal-abort";
    case Ev::Seal: return "seal";
    case Ev::Verify: return "verify";
    case Ev::Perm: return "perm";
    case Ev::Lifecycle: return "lifecycle";
    case Ev::Inspect: return "inspect";
    case Ev::Probe: return "probe";
    case Ev::Xrstor: return "xrstor";
    case Ev::Marshal: return "marshal";
    case Ev::Unmarshal: return "unmarshal";
    case Ev::Ocall: return "ocall";
    case Ev::CopyIn: return "copy-in";
    case Ev::CopyOut: return "copy-out";
    case Ev::HostFn: return "host-fn";
    case Ev::Tocttou: return "tocttou";
    case Ev::Create: return "create";
    case Ev::Destroy: return "destroy";
    case Ev::Violation: return "violation";
    case Ev::Done: return "done";
  }
  return "?";
}

std::string format_event(const Event& e) {
  char head[96];
  std::snprintf(head, sizeof head, "step=%llu thread=%d ev=", static_cast<unsigned long long>(e.step),
                e.thread);
  char addr[32];
  std::snprintf(addr, sizeof addr, " addr=0x%llx detail=", static_cast<unsigned long long>(e.addr));
  std::string line = head;
  line += ev_name(e.kind);
  line += addr;
  line += e.detail;
  return line;
}

uint64_t fnv1a(std::string_view data, uint64_t h) {
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void Trace::record(Event e) {
  ++counts_[e.kind];
  digest_ = fnv1a(format_event(e), digest_);
  digest_ = fnv1a("\n", digest_);
  if (e.kind == Ev::Insn && !keep_insns) return;
  events_.push_back(std::move(e));
}

size_t Trace::count(Ev kind) const {
  auto it = counts_.find(kind);
  return it == counts_.end() ? 0 : it->second;
}

std::string Trace::text() const {
  std::string out;
  for (const auto& e : events_) {
    out += format_event(e);
    out += '\n';
  }
  return out;
}

void Trace::clear() {
  events_.clear();
  counts_.clear();
  digest_ = 0xcbf29ce484222325ULL;
}

}  // namespace capsule
