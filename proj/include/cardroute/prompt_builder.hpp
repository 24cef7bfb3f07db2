#pragma once

#include "cardroute/card_repository.hpp"

#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cardroute {

// Template texts with {{placeholder}} slots. Each stage template must contain
// its placeholders and its control phrases; load/validate reject otherwise.
struct PromptTemplates {
  std::string declared_version;  // contents of VERSION
  std::string system;
  std::string stage1;  // {{modalities}}
  std::string stage2;  // {{modality}}
  std::string stage3;  // {{modality}} {{abnormality}} {{candidates}}

  // The templates compiled into the library (identical to templates/).
  static const PromptTemplates& builtin();
  // Reads VERSION, system.txt, stage1.txt, stage2.txt, stage3.txt.
  static PromptTemplates load_dir(const std::filesystem::path& dir);

  void validate() const;

  // "<declared>+<first 12 hex of the content digest>"; any edit changes it.
  std::string version() const;
};

struct StagePrompt {
  int stage = 1;
  std::string system_prompt;
  std::string user_prompt;
  bool includes_image = true;

  std::string digest() const;

  bool operator==(const StagePrompt&) const = default;
};

class PromptBuilder {
 public:
  PromptBuilder() : PromptBuilder(PromptTemplates::builtin()) {}
  explicit PromptBuilder(PromptTemplates templates);

  const PromptTemplates& templates() const noexcept { return templates_; }
  const std::string& template_version() const noexcept { return version_; }

  // Throws Error(kEmptyModalityList) for an empty list.
  StagePrompt build_stage1(std::span<const std::string> modalities) const;
  StagePrompt build_stage2(std::string_view modality) const;
  // Throws Error(kNoCandidates) for an empty candidate list and
  // Error(kInvalidArgument) when the abnormality is empty or "Normal".
  StagePrompt build_stage3(std::string_view modality, std::string_view abnormality,
                           std::span<const CardCandidate> candidates) const;

 private:
  PromptTemplates templates_;
  std::string version_;
};

}  // namespace cardroute
