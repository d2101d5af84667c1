#pragma once

#include <stdexcept>
#include <string>

namespace kbprobe {

enum class Errc {
  invalid_argument,
  dimension_mismatch,
  no_generated_tokens,
  non_finite,
  insufficient_records,
  bad_magic,
  version_mismatch,
  truncated,
  width_mismatch,
  duplicate_id,
  label_mismatch,
  io,
  no_candidates,
  missing_key,
  missing_artifact,
  transport,
  malformed_reply,
  identity_violation,
};

const char* errc_name(Errc code) noexcept;

// Single exception type for the toolkit; callers branch on code().
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace kbprobe
