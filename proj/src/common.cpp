#include "cardroute/digest.hpp"
#include "cardroute/error.hpp"
#include "cardroute/text.hpp"

#include <openssl/evp.h>

#include <cctype>
#include <cstdio>

namespace cardroute {

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kOk: return "Ok";
    case ErrorCode::kInvalidArgument: return "InvalidArgument";
    case ErrorCode::kFileMissing: return "FileMissing";
    case ErrorCode::kIo: return "IoError";
    case ErrorCode::kMalformedRecord: return "MalformedRecord";
    case ErrorCode::kDuplicateId: return "DuplicateId";
    case ErrorCode::kReservedModality: return "ReservedModality";
    case ErrorCode::kInsufficientCandidates: return "InsufficientCandidates";
    case ErrorCode::kEmptyModalityList: return "EmptyModalityList";
    case ErrorCode::kNoCandidates: return "NoCandidates";
    case ErrorCode::kInvalidThresholds: return "InvalidThresholds";
    case ErrorCode::kBackendUnreachable: return "BackendUnreachable";
    case ErrorCode::kProtocolError: return "ProtocolError";
    case ErrorCode::kLogprobsUnsupported: return "LogprobsUnsupported";
    case ErrorCode::kUnknownFirstToken: return "UnknownFirstToken";
    case ErrorCode::kMalformedScript: return "MalformedScript";
    case ErrorCode::kFixtureMissing: return "FixtureMissing";
    case ErrorCode::kGridTooLarge: return "GridTooLarge";
    case ErrorCode::kRecordNotFound: return "RecordNotFound";
    case ErrorCode::kRepoDigestMismatch: return "RepoDigestMismatch";
    case ErrorCode::kTemplateError: return "TemplateError";
    case ErrorCode::kDuplicateRecord: return "DuplicateRecord";
    case ErrorCode::kInternal: return "Internal";
  }
  return "Unknown";
}

namespace {

bool is_space(char c) {
  return std::isspace(static_cast<unsigned char>(c)) != 0;
}

bool is_trailing_punct(char c) {
  return c == '.' || c == ',' || c == ';' || c == ':' || c == '!';
}

}  // namespace

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && is_space(s[b])) ++b;
  while (e > b && is_space(s[e - 1])) --e;
  return std::string(s.substr(b, e - b));
}

std::string to_lower_ascii(std::string_view s) {
  std::string out(s);
  for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string fold_key(std::string_view s) { return to_lower_ascii(trim(s)); }

bool iequals_trimmed(std::string_view a, std::string_view b) {
  return fold_key(a) == fold_key(b);
}

std::string normalize_answer(std::string_view raw) {
  std::string collapsed;
  collapsed.reserve(raw.size());
  bool pending_space = false;
  for (char c : raw) {
    if (is_space(c)) {
      pending_space = !collapsed.empty();
      continue;
    }
    if (pending_space) collapsed.push_back(' ');
    pending_space = false;
    collapsed.push_back(c);
  }
  // "Normal. " and "None .": punctuation and spaces may interleave at the tail.
  while (!collapsed.empty() &&
         (is_trailing_punct(collapsed.back()) || collapsed.back() == ' ')) {
    collapsed.pop_back();
  }
  return collapsed;
}

bool starts_with(std::string_view s, std::string_view prefix) {
  return s.substr(0, prefix.size()) == prefix;
}

// --- SHA-256 ---------------------------------------------------------------

namespace {

std::string to_hex(const unsigned char* data, unsigned int len) {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[data[i] >> 4]);
    out.push_back(kHex[data[i] & 0x0f]);
  }
  return out;
}

}  // namespace

Sha256::Sha256() : ctx_(EVP_MD_CTX_new()) {
  if (ctx_ == nullptr ||
      EVP_DigestInit_ex(static_cast<EVP_MD_CTX*>(ctx_), EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorCode::kInternal, "sha256 init failed");
  }
}

Sha256::~Sha256() { EVP_MD_CTX_free(static_cast<EVP_MD_CTX*>(ctx_)); }

Sha256& Sha256::update(std::string_view bytes) {
  EVP_DigestUpdate(static_cast<EVP_MD_CTX*>(ctx_), bytes.data(), bytes.size());
  return *this;
}

Sha256& Sha256::field(std::string_view bytes) {
  char len[32];
  int n = std::snprintf(len, sizeof(len), "%zu:", bytes.size());
  update(std::string_view(len, static_cast<std::size_t>(n)));
  return update(bytes);
}

std::string Sha256::hex() {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(static_cast<EVP_MD_CTX*>(ctx_), md, &len);
  return to_hex(md, len);
}

std::string sha256_hex(std::string_view bytes) { return Sha256().update(bytes).hex(); }

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  return sha256_hex(
      std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

}  // namespace cardroute
