#include "cardroute/audit_store.hpp"

#include "cardroute/error.hpp"
#include "cardroute/io.hpp"
#include "cardroute/text.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

namespace cardroute {

using nlohmann::json;

std::vector<DecisionRecord> read_audit_file(const std::filesystem::path& path) {
  std::vector<DecisionRecord> records;
  std::error_code ec;
  if (!std::filesystem::exists(path, ec)) return records;
  const std::string text = read_file(path);
  std::size_t line_no = 0;
  for (std::string_view line : split_lines(text)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      records.push_back(DecisionRecord::from_json(json::parse(line)));
    } catch (const json::parse_error& e) {
      throw LineError(ErrorCode::kMalformedRecord, line_no, std::string("invalid JSON: ") + e.what());
    } catch (const Error& e) {
      throw LineError(ErrorCode::kMalformedRecord, line_no, e.what());
    }
  }
  return records;
}

AuditStore::AuditStore(std::filesystem::path path) : path_(std::move(path)) {
  for (const auto& r : read_audit_file(path_)) {
    if (!ids_.insert(r.request_id).second) {
      throw Error(ErrorCode::kDuplicateRecord, "audit store " + path_.string() + " repeats request_id " + r.request_id);
    }
  }
  if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
  fd_ = ::open(path_.c_str(), O_WRONLY | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) {
    throw Error(ErrorCode::kIo, "cannot open audit store " + path_.string() + ": " + std::strerror(errno));
  }
}

AuditStore::~AuditStore() {
  if (fd_ >= 0) ::close(fd_);
}

void AuditStore::append(const DecisionRecord& record) {
  if (record.request_id.empty()) throw Error(ErrorCode::kInvalidArgument, "record has no request_id");
  std::string line = record.to_json().dump();
  line += '\n';

  std::lock_guard lock(mu_);
  if (ids_.count(record.request_id) > 0) {
    throw Error(ErrorCode::kDuplicateRecord, "request_id " + record.request_id + " already in the audit store");
  }
  std::size_t written = 0;
  while (written < line.size()) {
    const ssize_t n = ::write(fd_, line.data() + written, line.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(ErrorCode::kIo, std::string("audit append failed: ") + std::strerror(errno));
    }
    written += static_cast<std::size_t>(n);
  }
  if (::fsync(fd_) != 0) throw Error(ErrorCode::kIo, std::string("audit fsync failed: ") + std::strerror(errno));
  ids_.insert(record.request_id);
}

std::vector<DecisionRecord> AuditStore::read_all() const {
  std::lock_guard lock(mu_);
  return read_audit_file(path_);
}

std::optional<DecisionRecord> AuditStore::find(std::string_view request_id) const {
  for (auto& r : read_all()) {
    if (r.request_id == request_id) return std::move(r);
  }
  return std::nullopt;
}

std::vector<DecisionRecord> AuditStore::recent(std::size_t limit) const {
  std::vector<DecisionRecord> all = read_all();
  std::vector<DecisionRecord> out;
  for (auto it = all.rbegin(); it != all.rend() && out.size() < limit; ++it) out.push_back(std::move(*it));
  return out;
}

std::size_t AuditStore::size() const {
  std::lock_guard lock(mu_);
  return ids_.size();
}

}  // namespace cardroute
