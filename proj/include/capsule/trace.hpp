#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace capsule {

// Kinds of events recorded by the machine and the runtime. The textual name
// is what appears after `ev=` in a trace line.
enum class Ev : uint8_t {
  Insn,          // one enclave-mode instruction retired (or faulted)
  Wrpkru,        // PKRU written by WRPKRU (host restrict or enclave)
  PkruRestore,   // host PKRU written back into a trap/signal context
  TfSet,         // POPFQ that set TF
  Eenter,
  Eexit,
  Aex,
  Eresume,
  Trap,          // single-step debug exception delivered
  Fault,         // page fault raised (pending)
  Signal,        // signal frame built on the handler stack
  Sigreturn,
  SignalAbort,   // kernel could not touch the handler stack
  Seal,
  Verify,
  Perm,          // page permission / key change
  Lifecycle,     // code page lifecycle transition
  Inspect,       // inspection request started / finished
  Probe,         // suppressed-fault read
  Xrstor,
  Marshal,
  Unmarshal,
  Ocall,
  CopyIn,
  CopyOut,
  HostFn,
  Tocttou,
  Create,
  Destroy,
  Violation,
  Done,
};

std::string_view ev_name(Ev e);

struct Event {
  uint64_t step = 0;
  int thread = -1;
  Ev kind = Ev::Insn;
  uint64_t addr = 0;
  std::string detail;

  // Structured fields used by audits (not all kinds fill them).
  uint32_t pkru = 0;
  int enclave = -1;
  int tcs = -1;
  int tag = 0;       // entry tag of the running frame for Insn events
  int ssa_pkey = -1; // pkey of the active TCS's SSA page for Insn events
};

// `step=<n> thread=<t> ev=<kind> addr=<hex> detail=<text>`
std::string format_event(const Event& e);

class Trace {
 public:
  void record(Event e);
  const std::vector<Event>& events() const { return events_; }
  size_t count(Ev kind) const;
  std::string text() const;
  uint64_t digest() const { return digest_; }
  void clear();

  // When false, Insn events are counted but not stored.
  bool keep_insns = true;

 private:
  std::vector<Event> events_;
  std::map<Ev, size_t> counts_;
  uint64_t digest_ = 0xcbf29ce484222325ULL;
};

uint64_t fnv1a(std::string_view data, uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace capsule
