#pragma once

#include "cardroute/decision_record.hpp"

#include <cstddef>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace cardroute {

// Append-only JSONL file of DecisionRecords, one per line. Appends are
// serialized and fsync'ed before append() returns, so a caller that answers
// after append() never reports a record that is not on disk.
class AuditStore {
 public:
  // Creates the file if needed. Existing lines must each parse as a record
  // (Error kMalformedRecord with the line number otherwise).
  explicit AuditStore(std::filesystem::path path);
  ~AuditStore();
  AuditStore(const AuditStore&) = delete;
  AuditStore& operator=(const AuditStore&) = delete;

  // Throws Error(kDuplicateRecord) for a request_id already in the store.
  void append(const DecisionRecord& record);

  std::optional<DecisionRecord> find(std::string_view request_id) const;
  // Newest first.
  std::vector<DecisionRecord> recent(std::size_t limit) const;
  std::vector<DecisionRecord> read_all() const;
  std::size_t size() const;

  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
  mutable std::mutex mu_;
  std::unordered_set<std::string> ids_;
};

// Reads a store file without opening it for writing.
std::vector<DecisionRecord> read_audit_file(const std::filesystem::path& path);

}  // namespace cardroute
