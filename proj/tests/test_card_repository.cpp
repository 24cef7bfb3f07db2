#include "support.hpp"

#include "cardroute/card_repository.hpp"
#include "cardroute/digest.hpp"
#include "cardroute/error.hpp"

#include <doctest.h>

using namespace cardroute;
using namespace testsupport;

namespace {

ModelCard card(std::string id, std::string caption, std::string modality) {
  return {std::move(id), std::move(caption), std::move(modality)};
}

template <typename Fn>
ErrorCode code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kOk;
}

}  // namespace

TEST_CASE("load: two-card example file") {
  const auto repo = CardRepository::load(test_data("two_cards.jsonl"));
  REQUIRE(repo.size() == 2);
  CHECK(repo.cards()[0].id == "MODEL_01");
  CHECK(repo.cards()[1].id == "MODEL_04");
  CHECK(repo.cards()[1].modality == "fundus photograph");
  CHECK(repo.source_digest() == sha256_hex(read_file(test_data("two_cards.jsonl"))));
}

TEST_CASE("load: empty file is an empty repository") {
  TempDir dir;
  write_file(dir / "empty.jsonl", "");
  const auto repo = CardRepository::load(dir / "empty.jsonl");
  CHECK(repo.empty());
  CHECK(repo.unique_modalities().empty());
}

TEST_CASE("load: blank lines are skipped but still counted") {
  const auto repo = CardRepository::parse(
      "\n{\"id\":\"MODEL_01\",\"task_caption\":\"c.\",\"modality\":\"m\"}\n\n"
      "{\"id\":\"MODEL_02\",\"task_caption\":\"c.\",\"modality\":\"m\"}\n");
  CHECK(repo.size() == 2);
  try {
    CardRepository::parse("\n\n{\"id\":\"bad\",\"task_caption\":\"c.\",\"modality\":\"m\"}\n");
    FAIL("expected an error");
  } catch (const LineError& e) {
    CHECK(e.line() == 3);
  }
}

TEST_CASE("load: missing file") {
  CHECK(code_of([] { CardRepository::load("/nonexistent/cards.jsonl"); }) == ErrorCode::kFileMissing);
}

TEST_CASE("load: duplicate id names the id and both lines") {
  try {
    CardRepository::load(test_data("duplicate_id.jsonl"));
    FAIL("expected DuplicateId");
  } catch (const LineError& e) {
    CHECK(e.code() == ErrorCode::kDuplicateId);
    CHECK(e.line() == 3);
    CHECK(std::string(e.what()).find("MODEL_01") != std::string::npos);
    CHECK(std::string(e.what()).find("line 1") != std::string::npos);
  }
}

TEST_CASE("load: reserved modality is rejected case-insensitively") {
  try {
    CardRepository::load(test_data("reserved_modality.jsonl"));
    FAIL("expected ReservedModality");
  } catch (const LineError& e) {
    CHECK(e.code() == ErrorCode::kReservedModality);
    CHECK(e.line() == 2);
    CHECK(std::string(e.what()).find("MODEL_02") != std::string::npos);
  }
  for (const char* m : {"None", "NONE", "other", " Other "}) {
    CHECK(code_of([&] { CardRepository::from_cards({card("MODEL_01", "c.", m)}); }) ==
          ErrorCode::kReservedModality);
  }
}

TEST_CASE("load: malformed records carry the line") {
  struct Row {
    const char* text;
    const char* needle;
  };
  const Row rows[] = {
      {"not json", "invalid JSON"},
      {"[1,2]", "not a JSON object"},
      {R"({"id":"MODEL_01","task_caption":"c."})", "missing key 'modality'"},
      {R"({"id":"MODEL_01","task_caption":"c.","modality":"m","extra":1})", "unknown key 'extra'"},
      {R"({"id":"MODEL_1","task_caption":"c.","modality":"m"})", "MODEL_1"},
      {R"({"id":"model_01","task_caption":"c.","modality":"m"})", "model_01"},
      {R"({"id":"MODEL_01","task_caption":"   ","modality":"m"})", "task_caption is empty"},
      {R"({"id":"MODEL_01","task_caption":"c.","modality":""})", "modality is empty"},
      {R"({"id":"MODEL_01","task_caption":7,"modality":"m"})", "must be a string"},
  };
  for (const auto& row : rows) {
    CAPTURE(row.text);
    const std::string text = std::string(R"({"id":"MODEL_09","task_caption":"ok.","modality":"m"})") + "\n" + row.text;
    try {
      CardRepository::parse(text);
      FAIL("expected MalformedRecord");
    } catch (const LineError& e) {
      CHECK(e.code() == ErrorCode::kMalformedRecord);
      CHECK(e.line() == 2);
      CHECK(std::string(e.what()).rfind("line 2: ", 0) == 0);
      CHECK(std::string(e.what()).find(row.needle) != std::string::npos);
    }
  }
}

TEST_CASE("load: caption length limit") {
  const std::string at_limit(kMaxCaptionLength, 'a');
  CHECK_NOTHROW(CardRepository::from_cards({card("MODEL_01", at_limit, "m")}));
  CHECK(code_of([&] { CardRepository::from_cards({card("MODEL_01", at_limit + "a", "m")}); }) ==
        ErrorCode::kMalformedRecord);
}

TEST_CASE("card id pattern") {
  CHECK(is_valid_card_id("MODEL_04"));
  CHECK(is_valid_card_id("MODEL_123"));
  CHECK_FALSE(is_valid_card_id("MODEL_4"));
  CHECK_FALSE(is_valid_card_id("MODEL_04a"));
  CHECK_FALSE(is_valid_card_id(" MODEL_04"));
  CHECK_FALSE(is_valid_card_id("MODEL_"));
}

TEST_CASE("validate_card_file reports every problem") {
  TempDir dir;
  write_file(dir / "cards.jsonl",
             R"({"id":"MODEL_01","task_caption":"c.","modality":"m"})"
             "\n"
             R"({"id":"MODEL_01","task_caption":"c.","modality":"m"})"
             "\n"
             R"({"id":"MODEL_02","task_caption":"c.","modality":"Normal"})"
             "\n"
             "garbage\n");
  const auto diags = validate_card_file(dir / "cards.jsonl");
  REQUIRE(diags.size() == 3);
  CHECK(diags[0].line == 2);
  CHECK(diags[0].code == "DuplicateId");
  CHECK(diags[1].line == 3);
  CHECK(diags[1].code == "ReservedModality");
  CHECK(diags[2].line == 4);
  CHECK(diags[2].code == "MalformedRecord");
  CHECK(validate_card_file(test_data("two_cards.jsonl")).empty());
}

TEST_CASE("unique_modalities: case-insensitive dedup keeps first spelling") {
  const auto repo = CardRepository::from_cards({card("MODEL_01", "c.", "Colonoscopy"),
                                                card("MODEL_02", "c.", "colonoscopy"),
                                                card("MODEL_03", "c.", "fundus photograph")});
  CHECK(repo.unique_modalities() == std::vector<std::string>{"Colonoscopy", "fundus photograph"});
}

TEST_CASE("unique_modalities matches a brute-force set construction") {
  std::mt19937 rng(7);
  const std::vector<std::string> pool = {"Colonoscopy", "colonoscopy", " COLONOSCOPY", "fundus photograph",
                                         "Fundus Photograph", "chest X-ray", "chest x-ray ", "blood smear"};
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<ModelCard> cards;
    std::vector<std::string> labels;
    const int n = std::uniform_int_distribution<int>(0, 8)(rng);
    for (int i = 0; i < n; ++i) {
      const std::string& m = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      cards.push_back(card("MODEL_" + std::to_string(10 + i), "c.", m));
      labels.push_back(m);
    }
    const auto repo = CardRepository::from_cards(cards);
    const auto got = repo.unique_modalities();
    const auto want = brute_force_unique(labels);
    REQUIRE(got.size() == want.size());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(oracle_key(got[i]) == oracle_key(want[i]));
    // Every card's modality appears exactly once.
    for (const auto& c : cards) {
      CHECK(std::count_if(got.begin(), got.end(), [&](const std::string& m) {
              return oracle_key(m) == oracle_key(c.modality);
            }) == 1);
    }
  }
}

TEST_CASE("unique_modalities: three distinct labels in file order") {
  const auto repo = CardRepository::load(data("cards.jsonl"));
  std::vector<std::string> labels;
  for (const auto& c : repo.cards()) labels.push_back(c.modality);
  CHECK(repo.unique_modalities() == brute_force_unique(labels));
}

TEST_CASE("candidates_for_modality: two-card example") {
  const auto repo = CardRepository::load(test_data("two_cards.jsonl"));
  const auto got = repo.candidates_for_modality("breast histopathology scan");
  REQUIRE(got.size() == 1);
  CHECK(got[0] == CardCandidate{"MODEL_01", "Classifies benign vs. malignant findings in breast histopathology slides."});
  CHECK(repo.candidates_for_modality("MRI").empty());
}

TEST_CASE("candidates_for_modality agrees with a normalization oracle") {
  const auto repo = CardRepository::load(data("cards.jsonl"));
  const std::vector<std::string> queries = {"chest X-ray", "CHEST X-RAY", "  chest x-ray  ", "Colonoscopy",
                                            "colonoscopy\t", "Breast Histopathology Scan", "MRI", "chest"};
  for (const auto& q : queries) {
    CAPTURE(q);
    std::vector<CardCandidate> want;
    for (const auto& c : repo.cards()) {
      if (oracle_key(c.modality) == oracle_key(q)) want.push_back({c.id, c.task_caption});
    }
    CHECK(repo.candidates_for_modality(q) == want);
  }
  CHECK(repo.candidates_for_modality("chest X-ray ") == repo.candidates_for_modality("chest X-ray"));
  CHECK(repo.candidates_for_modality("Chest x-Ray").size() == 2);
}

TEST_CASE("serialize round-trips to the same digest") {
  const auto first = CardRepository::load(data("cards.jsonl"));
  const auto second = CardRepository::parse(first.serialize());
  CHECK(second.cards() == first.cards());
  CHECK(second.source_digest() == sha256_hex(first.serialize()));
  const auto third = CardRepository::parse(second.serialize());
  CHECK(third.source_digest() == second.source_digest());
  // The shipped file is already canonical.
  CHECK(first.source_digest() == second.source_digest());
}

TEST_CASE("load is idempotent for identical bytes") {
  const auto a = CardRepository::load(data("cards.jsonl"));
  const auto b = CardRepository::load(data("cards.jsonl"));
  CHECK(a.cards() == b.cards());
  CHECK(a.source_digest() == b.source_digest());
}

TEST_CASE("find") {
  const auto repo = CardRepository::load(data("cards.jsonl"));
  REQUIRE(repo.find("MODEL_13") != nullptr);
  CHECK(repo.find("MODEL_13")->modality == "chest X-ray");
  CHECK(repo.find("MODEL_99") == nullptr);
}
