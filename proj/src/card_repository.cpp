#include "cardroute/card_repository.hpp"

#include "cardroute/digest.hpp"
#include "cardroute/error.hpp"
#include "cardroute/io.hpp"
#include "cardroute/text.hpp"

#include <json.hpp>

#include <cctype>
#include <unordered_map>
#include <unordered_set>

namespace cardroute {

using nlohmann::json;

bool is_valid_card_id(std::string_view id) {
  constexpr std::string_view kPrefix = "MODEL_";
  if (!starts_with(id, kPrefix) || id.size() < kPrefix.size() + 2) return false;
  for (char c : id.substr(kPrefix.size())) {
    if (!std::isdigit(static_cast<unsigned char>(c))) return false;
  }
  return true;
}

bool is_reserved_token(std::string_view text) {
  const std::string key = fold_key(text);
  return key == "none" || key == "normal" || key == "other";
}

void validate_card(const ModelCard& card, std::size_t line) {
  if (!is_valid_card_id(card.id)) {
    throw LineError(ErrorCode::kMalformedRecord, line,
                    "id '" + card.id + "' does not match MODEL_[0-9]{2,}");
  }
  if (trim(card.task_caption).empty()) {
    throw LineError(ErrorCode::kMalformedRecord, line, "task_caption is empty");
  }
  if (card.task_caption.size() > kMaxCaptionLength) {
    throw LineError(ErrorCode::kMalformedRecord, line,
                    "task_caption exceeds " + std::to_string(kMaxCaptionLength) + " characters");
  }
  if (trim(card.modality).empty()) {
    throw LineError(ErrorCode::kMalformedRecord, line, "modality is empty");
  }
  if (is_reserved_token(card.modality)) {
    throw LineError(ErrorCode::kReservedModality, line,
                    "card " + card.id + " uses reserved modality '" + card.modality + "'");
  }
}

namespace {

std::string field_string(const json& obj, const char* key, std::size_t line) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw LineError(ErrorCode::kMalformedRecord, line, std::string("missing key '") + key + "'");
  }
  if (!it->is_string()) {
    throw LineError(ErrorCode::kMalformedRecord, line, std::string("'") + key + "' must be a string");
  }
  return it->get<std::string>();
}

ModelCard parse_card_line(std::string_view text, std::size_t line) {
  json obj;
  try {
    obj = json::parse(text);
  } catch (const json::parse_error& e) {
    throw LineError(ErrorCode::kMalformedRecord, line, std::string("invalid JSON: ") + e.what());
  }
  if (!obj.is_object()) {
    throw LineError(ErrorCode::kMalformedRecord, line, "record is not a JSON object");
  }
  for (const auto& [key, _] : obj.items()) {
    if (key != "id" && key != "task_caption" && key != "modality") {
      throw LineError(ErrorCode::kMalformedRecord, line, "unknown key '" + key + "'");
    }
  }
  ModelCard card{field_string(obj, "id", line), field_string(obj, "task_caption", line),
                 field_string(obj, "modality", line)};
  validate_card(card, line);
  return card;
}

template <typename OnCard, typename OnError>
void scan_lines(std::string_view jsonl, OnCard on_card, OnError on_error) {
  std::unordered_map<std::string, std::size_t> seen;
  std::size_t line_no = 0;
  for (std::string_view line : split_lines(jsonl)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      ModelCard card = parse_card_line(line, line_no);
      auto [it, inserted] = seen.emplace(card.id, line_no);
      if (!inserted) {
        throw LineError(ErrorCode::kDuplicateId, line_no,
                        "duplicate id " + card.id + " (first defined on line " +
                            std::to_string(it->second) + ")");
      }
      on_card(std::move(card));
    } catch (const LineError& e) {
      on_error(e);
    }
  }
}

}  // namespace

CardRepository CardRepository::from_cards(std::vector<ModelCard> cards, std::string source_digest) {
  std::unordered_set<std::string> ids;
  for (std::size_t i = 0; i < cards.size(); ++i) {
    validate_card(cards[i], i + 1);
    if (!ids.insert(cards[i].id).second) {
      throw LineError(ErrorCode::kDuplicateId, i + 1, "duplicate id " + cards[i].id);
    }
  }
  CardRepository repo;
  repo.cards_ = std::move(cards);
  repo.source_digest_ = source_digest.empty() ? sha256_hex(repo.serialize()) : std::move(source_digest);
  return repo;
}

CardRepository CardRepository::parse(std::string_view jsonl) {
  CardRepository repo;
  scan_lines(
      jsonl, [&](ModelCard card) { repo.cards_.push_back(std::move(card)); },
      [](const LineError& e) { throw e; });
  repo.source_digest_ = sha256_hex(jsonl);
  return repo;
}

CardRepository CardRepository::load(const std::filesystem::path& path) {
  return parse(read_file(path));
}

const ModelCard* CardRepository::find(std::string_view id) const {
  for (const auto& card : cards_) {
    if (card.id == id) return &card;
  }
  return nullptr;
}

std::string CardRepository::serialize() const {
  std::string out;
  for (const auto& card : cards_) {
    json obj = {{"id", card.id}, {"task_caption", card.task_caption}, {"modality", card.modality}};
    out += obj.dump();
    out += '\n';
  }
  return out;
}

std::vector<std::string> CardRepository::unique_modalities() const {
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (const auto& card : cards_) {
    if (seen.insert(fold_key(card.modality)).second) out.push_back(card.modality);
  }
  return out;
}

std::vector<CardCandidate> CardRepository::candidates_for_modality(std::string_view modality) const {
  const std::string key = fold_key(modality);
  std::vector<CardCandidate> out;
  for (const auto& card : cards_) {
    if (fold_key(card.modality) == key) out.push_back({card.id, card.task_caption});
  }
  return out;
}

std::vector<CardDiagnostic> validate_card_file(const std::filesystem::path& path) {
  std::vector<CardDiagnostic> diags;
  scan_lines(
      read_file(path), [](ModelCard) {},
      [&](const LineError& e) {
        diags.push_back({e.line(), error_code_name(e.code()), e.reason()});
      });
  return diags;
}

}  // namespace cardroute
