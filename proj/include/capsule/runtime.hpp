#pragma once

// Confinement runtime: enclave creation policy, protection-key assignment,
// the protected ECALL/OCALL state machine (sealed host stack pointers, TF
// set before EENTER, RIP check in the single-step handler), parameter
// buffers with private OCALL copies, and the PCL / runtime inspection entries.
//
// Every host-side action is one scheduler step so that other simulated
// threads can interleave with it.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "capsule/edl.hpp"
#include "capsule/image.hpp"
#include "capsule/inspector.hpp"
#include "capsule/machine.hpp"

namespace capsule {

namespace layout {
inline constexpr uint64_t kStubPage = 0x10;
inline constexpr uint64_t kStubPopfq = 0;
inline constexpr uint64_t kStubWrpkru = 2;
inline constexpr uint64_t kStubEenter = 5;
inline constexpr uint64_t kStubGadget = 0x100;
inline constexpr uint64_t kHostDataPage = 0x20;
inline constexpr uint64_t kSecretPage = 0x30;
inline constexpr uint64_t kHostStackBase = 0x100;
inline constexpr uint64_t kHostStackStride = 0x10;
inline constexpr uint64_t kHostStackPages = 4;
inline constexpr uint64_t kSignalStackOffset = 8;
inline constexpr uint64_t kEnclaveBase = 0x1000;
inline constexpr uint64_t kParamBufferBase = 0x20000;
inline constexpr uint64_t kPrivateBase = 0x40000;
inline constexpr uint64_t kSlotStride = 0x400;

constexpr uint64_t stub_addr(uint64_t off) { return page_addr(kStubPage) + off; }
constexpr uint64_t return_location() { return stub_addr(kStubEenter + 1); }
}  // namespace layout

// Closed vocabulary of violation reasons.
namespace reason {
inline constexpr const char* kControlFlow = "control-flow-violation";
inline constexpr const char* kStackIntegrity = "stack-integrity-violation";
inline constexpr const char* kAccessError = "page-fault:access-error";
inline constexpr const char* kNotRwxOrigin = "not-rwx-origin";
inline constexpr const char* kWrpkruFound = "wrpkru-found";
inline constexpr const char* kInspectionFailure = "inspection-failure";
inline constexpr const char* kMissingRoutine = "missing-inspection-code";
inline constexpr const char* kUnreachable = "unreachable";
inline constexpr const char* kXfrm = "xfrm-violation";
inline constexpr const char* kPkeyExhausted = "pkey-exhausted";
inline constexpr const char* kUserCheck = "user-check-rejected";
inline constexpr const char* kSignalDelivery = "signal-delivery-fault";
inline constexpr const char* kProbeDenied = "probe-denied";
inline constexpr const char* kTocttou = "tocttou-neutralized";
inline constexpr const char* kNoFreeTcs = "no-free-tcs";
inline constexpr const char* kMarshalOverflow = "marshal-overflow";
inline constexpr const char* kInvalidInstruction = "invalid-instruction";
inline constexpr const char* kUnknownOcall = "unknown-ocall";
inline constexpr const char* kUnexpectedTrap = "unexpected-trap";
inline constexpr const char* kMalformedImage = "malformed-image";
}  // namespace reason

class CapsuleError : public std::runtime_error {
 public:
  CapsuleError(std::string reason, const std::string& msg, std::vector<uint64_t> offsets = {})
      : std::runtime_error(msg), reason_(std::move(reason)), offsets_(std::move(offsets)) {}
  const std::string& reason() const { return reason_; }
  const std::vector<uint64_t>& offsets() const { return offsets_; }

 private:
  std::string reason_;
  std::vector<uint64_t> offsets_;
};

// Host key 0 plus one unique key per live enclave.
class KeyAssignment {
 public:
  static constexpr int kHostKey = 0;
  int allocate(int enclave);  // throws CapsuleError(pkey-exhausted)
  void release(int enclave);
  std::optional<int> key_of(int enclave) const;
  size_t in_use() const { return keys_.size(); }

 private:
  std::map<int, int> keys_;
};

uint64_t seal_sp(uint64_t sp, uint64_t key);
// Reads the two sealed slots through `rsp` and checks them against rsp/rbp.
bool verify_sp(const Machine& m, uint64_t rsp, uint64_t rbp, uint64_t key);

struct ArgValue {
  uint64_t scalar = 0;
  std::vector<uint8_t> bytes;  // in / in-out buffers
};

struct CallResult {
  bool ok = false;
  std::string error;
  std::optional<uint64_t> ret;
  std::vector<std::vector<uint8_t>> buffers;  // per parameter; filled for out / in-out
};

// Host side of an OCALL. The function runs once with phase 0; it may ask for
// a nested ECALL into the calling enclave by filling `nested`, in which case
// it runs again with the result in `nested_result` and phase incremented.
struct HostCall {
  std::string name;
  int enclave = -1;
  std::vector<uint64_t> scalars;              // per parameter (0 for buffers)
  std::vector<std::vector<uint8_t>> buffers;  // per parameter, private copies
  std::optional<uint64_t> ret;
  int phase = 0;
  struct Nested {
    std::string fn;
    std::vector<ArgValue> args;
  };
  std::optional<Nested> nested;
  std::optional<CallResult> nested_result;
};
using HostFn = std::function<void(HostCall&)>;

struct ParamBuffer {
  int tcs = 0;
  uint64_t base = 0;
  uint64_t capacity = 0;
  uint64_t top = 0;
  std::vector<uint64_t> frames;  // start offsets, LIFO
};

struct Violation {
  std::string reason;
  uint64_t step = 0;
  int thread = -1;
  std::string detail;
  bool hard = false;  // stops the whole run
};

struct Counters {
  uint64_t pkru_writes = 0;  // restricting WRPKRUs + host PKRU restores
  uint64_t traps = 0;
  uint64_t tf_sets = 0;
  uint64_t seals = 0;
  uint64_t verifies = 0;
  uint64_t aex = 0;
  uint64_t inspections = 0;
  uint64_t ecalls = 0;
  uint64_t ocalls = 0;
  uint64_t probes_denied = 0;
  uint64_t signals = 0;
  uint64_t sweeps = 0;
  uint64_t sweep_failures = 0;
};

struct CapsuleConfig {
  uint64_t seed = 0;
  uint64_t param_buffer_pages = 16;
  // Re-check W^X and WRPKRU absence on every attribute change.
  bool sweep_on_change = true;
};

struct SweepResult {
  std::vector<uint64_t> wx_pages;     // enclave pages with W and X
  std::vector<uint64_t> wrpkru_hits;  // absolute addresses in executable enclave bytes
  bool ok() const { return wx_pages.empty() && wrpkru_hits.empty(); }
};

// Entry tags attached to enclave-mode instructions in the trace.
inline constexpr int kTagEcall = 1;
inline constexpr int kTagInspect = 2;

class Capsule : public MachineObserver {
 public:
  struct TcsSlot {
    ParamBuffer pb;
    uint64_t private_base = 0;
    int owner = -1;  // host thread whose activations use this TCS
    int refs = 0;
  };
  struct EnclaveInfo {
    int id = -1;
    std::string name;
    int pkey = 0;
    int slot = 0;
    edl::InterfaceSpec spec;
    std::vector<edl::EdgeDescriptor> ecall_edges;
    std::vector<edl::EdgeDescriptor> ocall_edges;
    std::vector<std::pair<uint64_t, PageRole>> pages;
    std::set<uint64_t> rwx_origin;
    std::set<uint64_t> blocked;
    std::map<uint64_t, inspector::Lifecycle> lifecycle;
    std::vector<TcsSlot> tcs;
    std::map<std::string, uint64_t> symbols;
    uint64_t routine_addr = 0;
    std::optional<uint8_t> pcl_mask;
    bool pcl_done = false;
    bool flagged = false;
  };

  Capsule(Machine& m, CapsuleConfig cfg = {});
  ~Capsule() override;
  Capsule(const Capsule&) = delete;
  Capsule& operator=(const Capsule&) = delete;

  Machine& machine() { return m_; }
  const CapsuleConfig& config() const { return cfg_; }

  int add_host_thread();
  uint64_t stack_top(int thread) const;

  // Throws CapsuleError with one of: xfrm-violation, inspection-failure,
  // missing-inspection-code, unreachable, pkey-exhausted, malformed-image.
  int create_enclave(const EnclaveSource& src, const edl::InterfaceSpec& spec);
  void destroy_enclave(int handle);
  const EnclaveInfo& info(int handle) const;
  std::optional<int> find_enclave(const std::string& name) const;
  // External symbols visible to enclave assembly (host.*, <enclave>.pb<i>).
  std::map<std::string, uint64_t> symbols_for(const EnclaveSource& src) const;

  // Unmasks the PCL section and inspects it through the embedded routine on
  // `thread`. Returns false (pages stay RW, enclave flagged) on failure.
  bool pcl_inspect(int handle, int thread);

  void register_host_fn(const std::string& name, HostFn fn);
  void start_ecall(int thread, int handle, const std::string& fn, std::vector<ArgValue> args);
  // Synchronous driver: steps only `thread` until its call completes.
  CallResult ecall_sync(int thread, int handle, const std::string& fn, std::vector<ArgValue> args,
                        uint64_t max_steps = 1'000'000);

  // One scheduler step for `thread`. Does nothing for idle or dead threads.
  void step(int thread);
  bool runnable(int thread) const;
  bool idle(int thread) const;
  bool dead(int thread) const;
  bool halted() const { return halted_; }
  std::vector<CallResult> take_results(int thread);

  // Asynchronous exit of a thread that is in enclave mode.
  bool inject_interrupt(int thread);
  bool in_inspection(int thread) const;
  // Suppressed-fault read issued on behalf of an isolation audit.
  bool isolation_probe(int thread, uint64_t addr);

  const std::vector<Violation>& violations() const { return violations_; }
  std::optional<Violation> first_violation() const;
  Counters counters() const;
  const std::vector<std::string>& host_log() const { return host_log_; }
  void log_host(std::string line) { host_log_.push_back(std::move(line)); }

  const ParamBuffer& param_buffer(int handle, int tcs) const;
  uint64_t sp_key() const;  // tests and audits only
  int pkey_of(int handle) const { return info(handle).pkey; }
  const KeyAssignment& keys() const { return keys_; }

  SweepResult sweep() const;
  // Every enclave-mode instruction of an ordinary entry ran with only its
  // enclave key enabled; inspection entries ran with their SSA page on key 0.
  std::vector<std::string> pkru_audit() const;
  // g_sp_key and live sealed values never appear in enclave-keyed pages.
  bool secret_confined() const;

  // MachineObserver
  void on_attrs_changed(uint64_t page) override;
  void on_probe(int thread, uint64_t addr, bool faulted) override;

  struct Activation;
  struct HostThread;

 private:
  void violation(int thread, std::string reason, std::string detail, bool hard);
  void kill(int thread, std::string reason, std::string detail);
  void host_step(int t);
  void after_enclave_step(int t, StepOutcome o);
  void finish_activation(int t);
  void push_inspection(int t, int handle, uint64_t start, uint64_t len, std::vector<uint64_t> pages,
                       bool pcl, uint64_t fault_page);
  int pick_tcs(int t, int handle, bool bound_ok);
  void release_tcs(int handle, int tcs);
  void set_lifecycle(int handle, uint64_t page, inspector::Lifecycle to);
  bool executable_enclave_page(uint64_t page) const;
  void sp_write(uint64_t addr, uint64_t v);

  Machine& m_;
  CapsuleConfig cfg_;
  KeyAssignment keys_;
  std::map<int, EnclaveInfo> enclaves_;
  std::map<int, std::unique_ptr<HostThread>> threads_;
  std::map<int, int> key_history_;  // enclave id -> key, kept after destroy
  std::optional<bool> last_inspection_;
  std::map<std::string, HostFn> host_fns_;
  std::vector<Violation> violations_;
  std::vector<std::string> host_log_;
  uint64_t sweeps_ = 0;
  uint64_t sweep_failures_ = 0;
  uint64_t probes_denied_ = 0;
  uint64_t inspections_ = 0;
  bool audit_probe_ = false;
  bool halted_ = false;
};

}  // namespace capsule
