#pragma once

// Shared fixtures and independent oracles for the test suites. The oracles
// are written from the algorithm statements, not from the library code.

#include "cardroute/answer_selector.hpp"
#include "cardroute/card_repository.hpp"
#include "cardroute/io.hpp"
#include "cardroute/vlm_backend.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <unistd.h>
#include <vector>

namespace testsupport {

inline const std::filesystem::path kDataDir = CARDROUTE_DATA_DIR;
inline const std::filesystem::path kTestDataDir = CARDROUTE_TEST_DATA_DIR;
inline const std::filesystem::path kTemplateDir = CARDROUTE_TEMPLATE_DIR;

inline std::filesystem::path data(const char* name) { return kDataDir / name; }
inline std::filesystem::path test_data(const char* name) { return kTestDataDir / name; }

// Removes itself on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("cardroute-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

// --- oracles ---------------------------------------------------------------

inline std::string oracle_key(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  std::string out;
  for (std::size_t i = b; i < e; ++i) out += static_cast<char>(std::tolower(static_cast<unsigned char>(s[i])));
  return out;
}

// The arbitration rule, line by line:
//   y <- a1
//   if p2 >= tau and a2 != a1 then y <- a2
//   if y in A then return (y, TERMINATE) else return (y, PROCEED)
struct OracleResult {
  std::string y;
  double p;
  bool terminate;
  bool promoted;
};

inline OracleResult algorithm1(const std::string& a1, double p1, const std::string& a2, double p2, double tau,
                               const std::vector<std::string>& abstain) {
  std::string y = a1;
  double py = p1;
  bool promoted = false;
  if (p2 >= tau && oracle_key(a2) != oracle_key(a1)) {
    y = a2;
    py = p2;
    promoted = true;
  }
  bool in_a = false;
  for (const auto& t : abstain) {
    if (oracle_key(t) == oracle_key(y)) in_a = true;
  }
  return {y, py, in_a, promoted};
}

// Deduplicate by building the set of keys seen so far.
inline std::vector<std::string> brute_force_unique(const std::vector<std::string>& labels) {
  std::vector<std::string> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    bool earlier = false;
    for (std::size_t j = 0; j < i; ++j) {
      if (oracle_key(labels[j]) == oracle_key(labels[i])) earlier = true;
    }
    if (!earlier) out.push_back(labels[i]);
  }
  return out;
}

// Thrown-on-construction helper for scripted fixtures written inline.
inline std::unique_ptr<cardroute::ScriptedBackend> script(std::string_view jsonl) {
  return cardroute::ScriptedBackend::parse(jsonl);
}

}  // namespace testsupport
