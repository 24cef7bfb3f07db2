#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cardroute {

struct ModelCard {
  std::string id;            // MODEL_ followed by two or more digits
  std::string task_caption;  // one sentence, at most 300 characters
  std::string modality;      // scan-type label

  bool operator==(const ModelCard&) const = default;
};

struct CardCandidate {
  std::string id;
  std::string task_caption;

  bool operator==(const CardCandidate&) const = default;
};

inline constexpr std::size_t kMaxCaptionLength = 300;

bool is_valid_card_id(std::string_view id);

// True for "None", "Normal" and "Other" in any casing, surrounding space ignored.
bool is_reserved_token(std::string_view text);

// A validated, immutable snapshot of the card file. Iteration order is file
// order; prompts are built from it and must be reproducible.
class CardRepository {
 public:
  CardRepository() = default;

  // Validates every card (see validate_card) and rejects duplicate ids.
  static CardRepository from_cards(std::vector<ModelCard> cards, std::string source_digest = {});
  // Parses JSONL text. The digest is computed over the exact bytes given.
  static CardRepository parse(std::string_view jsonl);
  static CardRepository load(const std::filesystem::path& path);

  const std::vector<ModelCard>& cards() const noexcept { return cards_; }
  const std::string& source_digest() const noexcept { return source_digest_; }
  std::size_t size() const noexcept { return cards_.size(); }
  bool empty() const noexcept { return cards_.empty(); }

  const ModelCard* find(std::string_view id) const;

  // Canonical JSONL: one {"id","task_caption","modality"} object per line.
  std::string serialize() const;

  // Case-insensitive dedup; first occurrence (and its casing) wins.
  std::vector<std::string> unique_modalities() const;

  // Cards whose trimmed, case-folded modality equals the query's, in file order.
  std::vector<CardCandidate> candidates_for_modality(std::string_view modality) const;

 private:
  std::vector<ModelCard> cards_;
  std::string source_digest_;
};

// Throws LineError (kMalformedRecord / kReservedModality) describing the first
// problem with the card. `line` is only used for the message.
void validate_card(const ModelCard& card, std::size_t line);

struct CardDiagnostic {
  std::size_t line = 0;
  std::string code;  // error_code_name of the failure
  std::string message;
};

// Reports every problem in a card file rather than stopping at the first.
std::vector<CardDiagnostic> validate_card_file(const std::filesystem::path& path);

}  // namespace cardroute
