#include "cardroute/prompt_builder.hpp"

#include "builtin_templates.hpp"
#include "cardroute/digest.hpp"
#include "cardroute/error.hpp"
#include "cardroute/io.hpp"
#include "cardroute/text.hpp"

#include <initializer_list>
#include <map>

namespace cardroute {

namespace {

struct TemplateRule {
  std::initializer_list<std::string_view> placeholders;
  std::initializer_list<std::string_view> control_phrases;
};

void check_template(std::string_view name, std::string_view text, const TemplateRule& rule) {
  for (auto ph : rule.placeholders) {
    if (text.find("{{" + std::string(ph) + "}}") == std::string_view::npos) {
      throw Error(ErrorCode::kTemplateError,
                  std::string(name) + " template is missing placeholder {{" + std::string(ph) + "}}");
    }
  }
  for (auto phrase : rule.control_phrases) {
    if (text.find(phrase) == std::string_view::npos) {
      throw Error(ErrorCode::kTemplateError,
                  std::string(name) + " template is missing control phrase '" + std::string(phrase) + "'");
    }
  }
  // Every {{...}} slot must be one this template is allowed to use.
  std::size_t pos = 0;
  while ((pos = text.find("{{", pos)) != std::string_view::npos) {
    std::size_t end = text.find("}}", pos);
    if (end == std::string_view::npos) {
      throw Error(ErrorCode::kTemplateError, std::string(name) + " template has an unterminated {{");
    }
    std::string_view key = text.substr(pos + 2, end - pos - 2);
    bool known = false;
    for (auto ph : rule.placeholders) known = known || ph == key;
    if (!known) {
      throw Error(ErrorCode::kTemplateError,
                  std::string(name) + " template uses unknown placeholder {{" + std::string(key) + "}}");
    }
    pos = end + 2;
  }
}

std::string render(std::string_view tmpl, const std::map<std::string, std::string>& values) {
  std::string out;
  out.reserve(tmpl.size() + 256);
  std::size_t pos = 0;
  while (pos < tmpl.size()) {
    std::size_t open = tmpl.find("{{", pos);
    if (open == std::string_view::npos) {
      out.append(tmpl.substr(pos));
      break;
    }
    std::size_t close = tmpl.find("}}", open);
    out.append(tmpl.substr(pos, open - pos));
    out.append(values.at(std::string(tmpl.substr(open + 2, close - open - 2))));
    pos = close + 2;
  }
  return out;
}

// Template files end with a newline; prompts do not.
std::string strip_final_newline(std::string s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
  return s;
}

}  // namespace

const PromptTemplates& PromptTemplates::builtin() {
  static const PromptTemplates kBuiltin = [] {
    PromptTemplates t{trim(detail::kBuiltinVersion), strip_final_newline(detail::kBuiltinSystem),
                      strip_final_newline(detail::kBuiltinStage1),
                      strip_final_newline(detail::kBuiltinStage2),
                      strip_final_newline(detail::kBuiltinStage3)};
    t.validate();
    return t;
  }();
  return kBuiltin;
}

PromptTemplates PromptTemplates::load_dir(const std::filesystem::path& dir) {
  PromptTemplates t{trim(read_file(dir / "VERSION")), strip_final_newline(read_file(dir / "system.txt")),
                    strip_final_newline(read_file(dir / "stage1.txt")),
                    strip_final_newline(read_file(dir / "stage2.txt")),
                    strip_final_newline(read_file(dir / "stage3.txt"))};
  t.validate();
  return t;
}

void PromptTemplates::validate() const {
  if (declared_version.empty()) throw Error(ErrorCode::kTemplateError, "template VERSION is empty");
  check_template("system", system, {{}, {}});
  check_template("stage1", stage1, {{"modalities"}, {"None", "Other", "only"}});
  check_template("stage2", stage2, {{"modality"}, {"Normal", "only"}});
  check_template("stage3", stage3, {{"modality", "abnormality", "candidates"}, {"None", "only"}});
}

std::string PromptTemplates::version() const {
  const std::string content =
      Sha256().field(system).field(stage1).field(stage2).field(stage3).hex();
  return declared_version + "+" + content.substr(0, 12);
}

std::string StagePrompt::digest() const {
  return Sha256()
      .field(std::to_string(stage))
      .field(system_prompt)
      .field(user_prompt)
      .field(includes_image ? "image" : "text")
      .hex();
}

PromptBuilder::PromptBuilder(PromptTemplates templates) : templates_(std::move(templates)) {
  templates_.validate();
  version_ = templates_.version();
}

StagePrompt PromptBuilder::build_stage1(std::span<const std::string> modalities) const {
  if (modalities.empty()) {
    throw Error(ErrorCode::kEmptyModalityList, "stage 1 needs at least one admissible modality");
  }
  std::string list;
  for (const auto& m : modalities) {
    if (!list.empty()) list += '\n';
    list += "- " + m;
  }
  return {1, templates_.system, render(templates_.stage1, {{"modalities", list}}), true};
}

StagePrompt PromptBuilder::build_stage2(std::string_view modality) const {
  if (trim(modality).empty()) throw Error(ErrorCode::kInvalidArgument, "stage 2 modality is empty");
  return {2, templates_.system, render(templates_.stage2, {{"modality", trim(modality)}}), true};
}

StagePrompt PromptBuilder::build_stage3(std::string_view modality, std::string_view abnormality,
                                        std::span<const CardCandidate> candidates) const {
  if (candidates.empty()) {
    throw Error(ErrorCode::kNoCandidates, "no model cards match modality '" + std::string(modality) + "'");
  }
  if (trim(abnormality).empty() || iequals_trimmed(abnormality, "Normal")) {
    throw Error(ErrorCode::kInvalidArgument, "stage 3 requires a non-Normal abnormality");
  }
  std::string list;
  for (const auto& c : candidates) {
    if (!list.empty()) list += '\n';
    list += "- " + c.id + ": " + c.task_caption;
  }
  return {3, templates_.system,
          render(templates_.stage3,
                 {{"modality", trim(modality)}, {"abnormality", trim(abnormality)}, {"candidates", list}}),
          false};
}

}  // namespace cardroute
