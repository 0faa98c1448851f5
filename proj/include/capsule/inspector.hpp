#pragma once

// Static side of the binary inspection: the embedded inspection routine and
// its signature, creation-time scanning, entry reachability and the code page
// lifecycle. The dynamic stages (PCL and runtime inspection) drive the
// routine through the runtime; see Capsule::pcl_inspect / runtime_inspect.

#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "capsule/image.hpp"
#include "capsule/scan.hpp"

namespace capsule::inspector {

enum class Lifecycle { UninspectedRw, UnderInspectionRo, ExecutableRx };

std::string_view to_string(Lifecycle s);

// RW->RO, RO->RX (pass) and RO->RW (fail) only.
bool legal_transition(Lifecycle from, Lifecycle to);

// Register-only scanner entered with rsi = start, rdx = length. Leaves
// rax = 1 when clean, 0 when 0F 01 EF was found, then exits to rcx.
std::string_view routine_asm();
// Position-independent encoding of routine_asm(); also its signature.
const std::vector<uint8_t>& routine_bytes();

std::optional<uint64_t> find_routine(std::span<const uint8_t> code);

// Forward walk over direct jumps, branches and fall-through from `entry`.
// Indirect jumps, EEXIT and ORESUME end a path; undecodable bytes end it too.
bool reachable(std::span<const uint8_t> code, uint64_t code_base, uint64_t entry, uint64_t target);

struct StaticResult {
  enum class Status { Ok, WrpkruFound, MissingRoutine };
  Status status = Status::Ok;
  std::vector<uint64_t> hits;  // absolute addresses of 0F 01 EF
  uint64_t routine_addr = 0;
};

// Scans every plain code page (with 2-byte carries across adjacent code
// pages) and looks for the embedded routine.
StaticResult static_inspect(const EnclaveImage& image);

enum class Reachability { Ok, Unreachable };
Reachability reachability_check(const EnclaveImage& image, uint64_t routine_addr);

}  // namespace capsule::inspector
