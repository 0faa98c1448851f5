#pragma once

#include <string>
#include <vector>

#include "capsule/runtime.hpp"

namespace capsule {

struct Capsule::Activation {
  enum class Kind { Ecall, Inspect };
  enum class Phase {
    Marshal,         // ecall: write the frame into the parameter buffer
    Prepare,         // inspection: pick a TCS, key-0 SSA, pages read-only
    Seal,
    SetTf,
    Restrict,
    Enter,
    Running,         // in the enclave; next host step delivers the signal
    Handle,          // signal handler body
    AfterInspection, // handler waits for a nested runtime inspection
    Sigreturn,
    Resume,          // ERESUME after an asynchronous exit
    AfterExit,       // back in host code after EEXIT
    CopyIn,
    HostFn,
    HostFnResume,
    HostFnWait,
    CopyOut,
    Unmarshal,
    InspectDone,
  };
  enum class ExitKind { Eexit, Resume };

  Kind kind = Kind::Ecall;
  Phase phase = Phase::Marshal;
  int handle = -1;
  int tcs = -1;
  int tag = kTagEcall;
  bool top_level = true;

  // ecall
  size_t fn = 0;
  std::vector<ArgValue> args;
  uint64_t frame = 0;
  uint64_t frame_size = 0;
  uint64_t pb_top_before = 0;
  std::vector<uint64_t> buf_addrs;  // per buffer record
  std::vector<uint64_t> buf_sizes;
  bool reenter_from_ocall = false;

  // protected entry / exit
  uint32_t pkru_before = 0;
  uint64_t sealed_rsp = 0;
  bool sealed = false;
  uint64_t sig_frame = 0;
  PendingEvent event;
  ExitKind exit_kind = ExitKind::Eexit;
  bool inspection_passed = false;

  // ocall in flight
  struct Ocall {
    size_t fn = 0;
    uint64_t frame = 0;
    uint64_t pb_top_before = 0;
    std::vector<uint64_t> buf_addrs;  // per buffer record
    std::vector<uint64_t> buf_sizes;
    HostCall call;
  };
  std::optional<Ocall> ocall;

  // inspection
  uint64_t insp_start = 0;
  uint64_t insp_len = 0;
  std::vector<uint64_t> insp_pages;
  bool pcl = false;
  bool passed = false;
  uint8_t ssa_pkey_saved = 0;

  CallResult result;
};

struct Capsule::HostThread {
  int id = -1;
  std::vector<Activation> stack;
  std::vector<CallResult> results;
  bool dead = false;
  uint64_t stack_top = 0;
};

std::string hex64(uint64_t v);

}  // namespace capsule
