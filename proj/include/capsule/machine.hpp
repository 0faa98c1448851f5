#pragma once

// Small-step model of the x86 / SGX / MPK behaviour the confinement runtime
// relies on: paged memory tagged with protection keys, PKRU-checked data
// accesses, EENTER/EEXIT/AEX/ERESUME, the trap flag across the enclave
// boundary, and delivery of signals onto a key-0 handler stack.

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "capsule/isa.hpp"
#include "capsule/trace.hpp"

namespace capsule {

inline constexpr uint64_t kPageSize = 4096;
inline constexpr int kNumKeys = 16;
inline constexpr int kHostOwner = -1;
inline constexpr uint64_t kXfrmPkruBit = uint64_t{1} << 9;

constexpr uint64_t page_of(uint64_t addr) { return addr / kPageSize; }
constexpr uint64_t page_addr(uint64_t page) { return page * kPageSize; }

namespace perm {
inline constexpr uint8_t R = 1;
inline constexpr uint8_t W = 2;
inline constexpr uint8_t X = 4;
inline constexpr uint8_t RW = R | W;
inline constexpr uint8_t RX = R | X;
inline constexpr uint8_t RWX = R | W | X;
std::string to_string(uint8_t p);
}  // namespace perm

struct Page {
  uint64_t index = 0;
  uint8_t perm = 0;
  uint8_t pkey = 0;
  int owner = kHostOwner;
  std::array<uint8_t, kPageSize> bytes{};
};

// Bit 2i = access-disable for key i, bit 2i+1 = write-disable for key i.
class Pkru {
 public:
  constexpr Pkru() = default;
  constexpr explicit Pkru(uint32_t value) : value_(value) {}

  constexpr uint32_t value() const { return value_; }
  constexpr bool access_disabled(int key) const { return (value_ >> (2 * key)) & 1u; }
  constexpr bool write_disabled(int key) const { return (value_ >> (2 * key + 1)) & 1u; }
  constexpr bool allows_read(int key) const { return !access_disabled(key); }
  constexpr bool allows_write(int key) const {
    return !access_disabled(key) && !write_disabled(key);
  }
  // Clears both bits for `key`.
  constexpr Pkru granting(int key) const { return Pkru(value_ & ~(3u << (2 * key))); }

  static constexpr Pkru allow_all() { return Pkru(0); }
  static constexpr Pkru only(int key) { return Pkru(0xFFFFFFFFu).granting(key); }
  // Linux default for a signal handler: only key 0 accessible.
  static constexpr Pkru signal_default() { return Pkru(0x55555554u); }

  friend constexpr bool operator==(Pkru a, Pkru b) { return a.value_ == b.value_; }

 private:
  uint32_t value_ = 0;
};

enum class Mode { Host, Enclave };
enum class AccessKind { Read, Write, Fetch };
enum class FaultCode { AccessError, WxViolation };

struct PageFault {
  FaultCode code = FaultCode::AccessError;
  uint64_t addr = 0;
  AccessKind kind = AccessKind::Read;
};

std::string to_string(const PageFault& f);

enum class PendingKind { SingleStepTrap, PageFault, Interrupt, Abort };

struct PendingEvent {
  PendingKind kind = PendingKind::SingleStepTrap;
  PageFault fault{};
  std::string reason;
};

inline constexpr uint64_t kFlagCf = uint64_t{1} << 0;
inline constexpr uint64_t kFlagZf = uint64_t{1} << 6;
inline constexpr uint64_t kFlagTf = uint64_t{1} << 8;

// Extended state image: [0,8) pkru, [8,16) v0, [16,24) v1.
struct XState {
  uint32_t pkru = 0;
  uint64_t v0 = 0;
  uint64_t v1 = 0;
};
inline constexpr uint64_t kXStateSize = 24;

struct ThreadContext {
  std::array<uint64_t, isa::kNumGprs> gpr{};
  uint64_t rip = 0;
  uint64_t rflags = 0x2;
  Pkru pkru;
  Mode mode = Mode::Host;
  int enclave = -1;
  int tcs = -1;
  XState xstate{};
  std::optional<PendingEvent> pending;
  // Address following the last EENTER; set by the machine on entry.
  uint64_t return_location = 0;
  // Runtime-supplied tag describing why the thread is inside the enclave.
  int entry_tag = 0;
  uint64_t signal_stack_top = 0;
  uint64_t signal_sp = 0;

  bool tf() const { return rflags & kFlagTf; }
  uint64_t& reg(isa::Reg r) { return gpr[r]; }
  uint64_t reg(isa::Reg r) const { return gpr[r]; }

 private:
  friend class Machine;
  bool tf_shadow_ = false;
};

// SSA frame layout inside the SSA page.
namespace ssa {
inline constexpr uint64_t kGprs = 0;
inline constexpr uint64_t kRip = 80;
inline constexpr uint64_t kRflags = 88;
inline constexpr uint64_t kPkru = 96;
inline constexpr uint64_t kV0 = 104;
inline constexpr uint64_t kV1 = 112;
inline constexpr uint64_t kUrsp = 120;
inline constexpr uint64_t kUrbp = 128;
}  // namespace ssa

// TLS continuation stack used by OCALL / ORESUME: [0,8) depth, then frames.
namespace tls {
inline constexpr uint64_t kDepth = 0;
inline constexpr uint64_t kFrames = 8;
inline constexpr uint64_t kFrameSize = 88;  // 10 gprs + rip
inline constexpr uint64_t kMaxDepth = (kPageSize - kFrames) / kFrameSize;
}  // namespace tls

// Signal frame on the handler stack.
namespace sigframe {
inline constexpr uint64_t kRip = 0;
inline constexpr uint64_t kRsp = 8;
inline constexpr uint64_t kRbp = 16;
inline constexpr uint64_t kRflags = 24;
inline constexpr uint64_t kPkru = 32;
inline constexpr uint64_t kKind = 40;
inline constexpr uint64_t kAddr = 48;
inline constexpr uint64_t kSize = 64;
}  // namespace sigframe

struct Tcs {
  int index = 0;
  uint64_t ssa_page = 0;
  uint64_t tls_page = 0;
  bool busy = false;
  int cssa = 0;  // saved frames outstanding (one SSA frame per TCS)
  int bound_thread = -1;
};

struct Enclave {
  int id = 0;
  uint64_t xfrm = 0;
  uint64_t entry = 0;
  std::vector<Tcs> tcs;
  std::vector<uint64_t> pages;
  bool debug_opt_out = true;
};

struct MachineConfig {
  bool patched_kernel = true;
};

class MachineError : public std::runtime_error {
 public:
  enum class Code { NoSuchEnclave, NoSuchTcs, TcsBusy, NoSavedContext, WrongMode, Privilege,
                    TrapPending, NoPage, NoPending };
  MachineError(Code code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
  Code code() const { return code_; }

 private:
  Code code_;
};

enum class StepOutcome { Retired, Exited, Faulted };

struct SignalDelivery {
  bool delivered = false;
  uint64_t frame = 0;
  PendingEvent event;
  PageFault fault{};  // why delivery failed
};

class MachineObserver {
 public:
  virtual ~MachineObserver() = default;
  virtual void on_attrs_changed(uint64_t /*page*/) {}
  virtual void on_probe(int /*thread*/, uint64_t /*addr*/, bool /*faulted*/) {}
};

class Machine {
 public:
  explicit Machine(MachineConfig config = {});

  const MachineConfig& config() const { return config_; }
  MachineConfig& config() { return config_; }
  Trace& trace() { return trace_; }
  const Trace& trace() const { return trace_; }
  void set_observer(MachineObserver* obs) { observer_ = obs; }

  // Scheduler bookkeeping.
  uint64_t step() const { return step_; }
  void begin_step(int thread) {
    ++step_;
    current_thread_ = thread;
  }

  // --- memory --------------------------------------------------------------
  Page& map_page(uint64_t index, uint8_t perm, uint8_t pkey, int owner);
  void unmap_page(uint64_t index);
  Page* find_page(uint64_t index);
  const Page* find_page(uint64_t index) const;
  const std::map<uint64_t, Page>& pages() const { return pages_; }

  // Permission / key / owner check for one byte.
  std::optional<PageFault> check(const ThreadContext& ctx, uint64_t addr, AccessKind kind) const;
  std::optional<PageFault> read(const ThreadContext& ctx, uint64_t addr, std::span<uint8_t> out) const;
  std::optional<PageFault> write(const ThreadContext& ctx, uint64_t addr, std::span<const uint8_t> in);
  std::optional<PageFault> fetch(const ThreadContext& ctx, uint64_t addr, std::span<uint8_t> out) const;
  std::optional<PageFault> read_u64(const ThreadContext& ctx, uint64_t addr, uint64_t& out) const;
  std::optional<PageFault> write_u64(const ThreadContext& ctx, uint64_t addr, uint64_t v);

  // Hardware / loader accesses that bypass every check. Throws on unmapped.
  void raw_read(uint64_t addr, std::span<uint8_t> out) const;
  void raw_write(uint64_t addr, std::span<const uint8_t> in);
  uint64_t raw_u64(uint64_t addr) const;
  void raw_set_u64(uint64_t addr, uint64_t v);

  // Suppressed-fault read: reports whether a read would fault, raises nothing.
  bool probe(int thread, uint64_t addr);

  // --- threads and enclaves ------------------------------------------------
  int add_thread(uint64_t signal_stack_top = 0);
  ThreadContext& thread(int t);
  const ThreadContext& thread(int t) const;
  size_t thread_count() const { return threads_.size(); }

  int add_enclave(uint64_t xfrm, uint64_t entry, std::vector<uint64_t> pages, std::vector<Tcs> tcs);
  void remove_enclave(int id);
  Enclave& enclave(int id);
  const Enclave& enclave(int id) const;
  bool has_enclave(int id) const { return enclaves_.count(id) != 0; }
  const std::map<int, Enclave>& enclaves() const { return enclaves_; }

  // --- instructions --------------------------------------------------------
  void exec_wrpkru(int t, uint32_t value);
  uint32_t exec_rdpkru(int t);
  std::optional<PageFault> exec_xrstor(int t, uint64_t region);
  std::optional<PageFault> exec_xsave(int t, uint64_t region);
  void exec_popfq(int t, uint64_t value);
  // EENTER at the thread's current RIP (must address an EENTER opcode in
  // host code).
  void eenter(int t, int enclave_id, int tcs_index);
  void eexit(int t);
  void aex(int t, PendingEvent reason);
  void eresume(int t, int enclave_id, int tcs_index);
  // Models pkey_mprotect: only host-mode callers.
  void set_page_attrs(int caller, uint64_t page, std::optional<uint8_t> perm,
                      std::optional<uint8_t> pkey);

  // Builds a signal frame for the thread's pending event on its handler
  // stack. With the patched kernel key 0 is granted for the duration of the
  // frame setup and the frame records the thread's real PKRU; the handler
  // then runs with the default signal PKRU.
  SignalDelivery deliver_signal(int t);
  // Restores the context saved at `frame`; false if the kernel faulted.
  bool sigreturn(int t, uint64_t frame);

  // Executes one enclave-mode instruction.
  StepOutcome step_enclave(int t);

  // TF as seen by the hardware on enclave exit (tests only).
  bool tf_shadow(int t) const { return thread(t).tf_shadow_; }

 private:
  void emit(Ev kind, int thread, uint64_t addr, std::string detail);
  void fault_to_aex(int t, const PageFault& f);
  void pend_abort(int t, const std::string& reason);
  Tcs& tcs_of(int enclave_id, int tcs_index);

  MachineConfig config_;
  std::map<uint64_t, Page> pages_;
  std::vector<ThreadContext> threads_;
  std::map<int, Enclave> enclaves_;
  Trace trace_;
  MachineObserver* observer_ = nullptr;
  uint64_t step_ = 0;
  int current_thread_ = -1;
};

}  // namespace capsule
