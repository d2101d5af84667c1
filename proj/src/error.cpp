#include "kbprobe/error.hpp"

namespace kbprobe {

const char* errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::invalid_argument: return "invalid_argument";
    case Errc::dimension_mismatch: return "dimension_mismatch";
    case Errc::no_generated_tokens: return "no_generated_tokens";
    case Errc::non_finite: return "non_finite";
    case Errc::insufficient_records: return "insufficient_records";
    case Errc::bad_magic: return "bad_magic";
    case Errc::version_mismatch: return "version_mismatch";
    case Errc::truncated: return "truncated";
    case Errc::width_mismatch: return "width_mismatch";
    case Errc::duplicate_id: return "duplicate_id";
    case Errc::label_mismatch: return "label_mismatch";
    case Errc::io: return "io";
    case Errc::no_candidates: return "no_candidates";
    case Errc::missing_key: return "missing_key";
    case Errc::missing_artifact: return "missing_artifact";
    case Errc::transport: return "transport";
    case Errc::malformed_reply: return "malformed_reply";
    case Errc::identity_violation: return "identity_violation";
  }
  return "unknown";
}

}  // namespace kbprobe
