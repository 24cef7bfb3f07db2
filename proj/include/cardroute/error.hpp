#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace cardroute {

// Values mirror cr_status in cardroute.h; keep the two in sync.
enum class ErrorCode : int {
  kOk = 0,
  kInvalidArgument = 1,
  kFileMissing = 2,
  kIo = 3,
  kMalformedRecord = 4,
  kDuplicateId = 5,
  kReservedModality = 6,
  kInsufficientCandidates = 7,
  kEmptyModalityList = 8,
  kNoCandidates = 9,
  kInvalidThresholds = 10,
  kBackendUnreachable = 11,
  kProtocolError = 12,
  kLogprobsUnsupported = 13,
  kUnknownFirstToken = 14,
  kMalformedScript = 15,
  kFixtureMissing = 16,
  kGridTooLarge = 17,
  kRecordNotFound = 18,
  kRepoDigestMismatch = 19,
  kTemplateError = 20,
  kDuplicateRecord = 21,
  kInternal = 99,
};

const char* error_code_name(ErrorCode code) noexcept;

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

// Errors raised while reading a line-oriented file carry the 1-based line.
class LineError : public Error {
 public:
  LineError(ErrorCode code, std::size_t line, const std::string& reason)
      : Error(code, "line " + std::to_string(line) + ": " + reason),
        line_(line),
        reason_(reason) {}

  std::size_t line() const noexcept { return line_; }
  const std::string& reason() const noexcept { return reason_; }

 private:
  std::size_t line_;
  std::string reason_;
};

}  // namespace cardroute
