#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace smcguard {

enum class Errc {
  unaligned_region,
  layout_mismatch,
  invalid_selector,
  displacement_out_of_range,
  unsupported_operand,
  unknown_opcode,
  unbound_label,
  unit_too_large,
  iteration_out_of_range,
  encoding_error,
  permission_denied,
  out_of_memory,
  already_released,
  invalid_argument,
  unsupported,
  unavailable_timer,
  no_timer_available,
  invalid_region,
  oracle_mismatch,
  unknown_vendor,
  variant_unsupported,
  checksum_mismatch,
};

constexpr std::string_view errc_name(Errc e) noexcept {
  switch (e) {
    case Errc::unaligned_region: return "UnalignedRegion";
    case Errc::layout_mismatch: return "LayoutMismatch";
    case Errc::invalid_selector: return "InvalidSelector";
    case Errc::displacement_out_of_range: return "DisplacementOutOfRange";
    case Errc::unsupported_operand: return "UnsupportedOperand";
    case Errc::unknown_opcode: return "UnknownOpcode";
    case Errc::unbound_label: return "UnboundLabel";
    case Errc::unit_too_large: return "UnitTooLarge";
    case Errc::iteration_out_of_range: return "IterationOutOfRange";
    case Errc::encoding_error: return "EncodingError";
    case Errc::permission_denied: return "PermissionDenied";
    case Errc::out_of_memory: return "OutOfMemory";
    case Errc::already_released: return "AlreadyReleased";
    case Errc::invalid_argument: return "InvalidArgument";
    case Errc::unsupported: return "Unsupported";
    case Errc::unavailable_timer: return "UnavailableTimer";
    case Errc::no_timer_available: return "NoTimerAvailable";
    case Errc::invalid_region: return "InvalidRegion";
    case Errc::oracle_mismatch: return "OracleMismatch";
    case Errc::unknown_vendor: return "UnknownVendor";
    case Errc::variant_unsupported: return "VariantUnsupported";
    case Errc::checksum_mismatch: return "ChecksumMismatch";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace smcguard
