#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "crest/core.hpp"
#include "crest/util.hpp"

namespace crest {

enum class PromptKind { rationale_generation, answer_prediction, followup_verdict, direct_answer };

constexpr std::array<PromptKind, 4> kAllPromptKinds = {
    PromptKind::rationale_generation, PromptKind::answer_prediction,
    PromptKind::followup_verdict, PromptKind::direct_answer};

inline const char* prompt_kind_name(PromptKind kind) {
  switch (kind) {
    case PromptKind::rationale_generation: return "rationale_generation";
    case PromptKind::answer_prediction: return "answer_prediction";
    case PromptKind::followup_verdict: return "followup_verdict";
    case PromptKind::direct_answer: return "direct_answer";
  }
  return "?";
}

// What the caller is expected to run over the completion.
enum class ParseTag { rationale_with_label, answer_label, verdict, direct_label };

struct RenderedPrompt {
  PromptKind kind = PromptKind::rationale_generation;
  std::string text;
  std::vector<std::string> stop_sequences;
  ParseTag expected_parse = ParseTag::rationale_with_label;
};

struct PromptExtras {
  std::optional<std::string> rationale;
  std::optional<int> target_option;
  std::optional<std::string> instruction;       // overrides the preset default
  std::vector<std::string> few_shot_examples;   // pre-rendered blocks
};

// Cues and scaffolding shared by rendering, parsing, and dataset emission.
constexpr const char* kAnswerCue = "the answer is";
constexpr const char* kDirectAnswerCue = "the correct answer is";
constexpr const char* kAnswerMarker = "[Answer]";
constexpr const char* kAnswerScaffold = "\n\n[Answer]\nTherefore, the answer is";

inline std::string answer_scaffold(int answer_index) {
  return std::string(kAnswerScaffold) + " " + std::string(1, option_letter(answer_index)) + ".";
}

namespace detail {

// Substitutes {slot} markers. A line containing a slot whose value is absent
// is dropped entirely (this is how the passage line disappears for datasets
// without passages). Unknown slot names are an error.
inline std::string substitute_slots(
    const std::string& tmpl,
    const std::map<std::string, std::optional<std::string>>& slots,
    const std::string& where) {
  std::string out;
  std::size_t pos = 0;
  while (pos <= tmpl.size()) {
    std::size_t eol = tmpl.find('\n', pos);
    const bool last = eol == std::string::npos;
    std::string line = tmpl.substr(pos, last ? std::string::npos : eol - pos);

    bool drop = false;
    std::string rendered;
    std::size_t i = 0;
    while (i < line.size()) {
      if (line[i] == '{') {
        std::size_t close = line.find('}', i);
        if (close == std::string::npos)
          throw std::runtime_error(where + ": unterminated slot marker in template line: " + line);
        const std::string name = line.substr(i + 1, close - i - 1);
        auto it = slots.find(name);
        if (it == slots.end())
          throw std::runtime_error(where + ": unknown slot '{" + name + "}' in template");
        if (!it->second.has_value()) {
          drop = true;
          break;
        }
        rendered += *it->second;
        i = close + 1;
      } else {
        rendered += line[i];
        ++i;
      }
    }

    if (!drop) {
      out += rendered;
      if (!last) out += '\n';
    }
    if (last) break;
    pos = eol + 1;
  }
  return out;
}

inline std::size_t kind_index(PromptKind kind) { return static_cast<std::size_t>(kind); }

}  // namespace detail

// The four prompt templates plus their default instruction strings. The
// built-in preset reproduces the continuation-style layout the rest of the
// pipeline is pinned to; alternative presets load from a directory of
// <kind>.txt files (and optional <kind>.instruction.txt overrides).
class TemplateSet {
 public:
  static TemplateSet builtin() {
    TemplateSet t;
    t.templates_[0] =
        "[Instruction]\n"
        "{instruction}\n"
        "\n"
        "{few_shot}\n"
        "[Question]\n"
        "<Passage> {passage}\n"
        "<Question> {question}\n"
        "Answer Choices:\n"
        "{options}\n"
        "\n"
        "[Rationale]\n"
        "Let's think step by step.";
    t.templates_[1] =
        "[Instruction]\n"
        "{instruction}\n"
        "\n"
        "{few_shot}\n"
        "[Question]\n"
        "<Passage> {passage}\n"
        "<Question> {question}\n"
        "Answer Choices:\n"
        "{options}\n"
        "\n"
        "[Rationale]\n"
        "Let's think step by step.\n"
        "{rationale}\n"
        "\n"
        "[Answer]\n"
        "Therefore, the answer is";
    t.templates_[2] =
        "[Instruction]\n"
        "{instruction}\n"
        "\n"
        "{few_shot}\n"
        "[Question]\n"
        "<Passage> {passage}\n"
        "<Question> {question}\n"
        "Answer Choices:\n"
        "{options}\n"
        "\n"
        "Is a given choice {target_option} the correct answer?\n"
        "\n"
        "[Rationale]\n"
        "Let's think step by step.\n"
        "{rationale}\n"
        "\n"
        "[Answer]\n"
        "Therefore, {target_letter} is";
    t.templates_[3] =
        "[Instruction]\n"
        "{instruction}\n"
        "\n"
        "{few_shot}\n"
        "[Question]\n"
        "<Passage> {passage}\n"
        "<Question> {question}\n"
        "Answer Choices:\n"
        "{options}\n"
        "\n"
        "[Answer]\n"
        "The correct answer is";
    t.instructions_[0] =
        "Solve the given question by thinking through it step by step, then state the final answer.";
    t.instructions_[1] = "Read the question and the rationale, then state the final answer.";
    t.instructions_[2] =
        "Using the given rationale, judge whether the given choice is the correct answer to the question.";
    t.instructions_[3] = "Choose the correct answer to the given question.";
    return t;
  }

  static TemplateSet load_directory(const std::filesystem::path& dir) {
    TemplateSet t = builtin();
    for (PromptKind kind : kAllPromptKinds) {
      const std::size_t k = detail::kind_index(kind);
      const auto tmpl_path = dir / (std::string(prompt_kind_name(kind)) + ".txt");
      if (!std::filesystem::exists(tmpl_path))
        throw std::runtime_error("template preset is missing " + tmpl_path.string());
      t.templates_[k] = rtrim(read_file(tmpl_path));
      const auto instr_path = dir / (std::string(prompt_kind_name(kind)) + ".instruction.txt");
      if (std::filesystem::exists(instr_path)) t.instructions_[k] = rtrim(read_file(instr_path));
    }
    return t;
  }

  // "default" or a preset directory path.
  static TemplateSet from_preset(const std::string& preset) {
    if (preset.empty() || preset == "default") return builtin();
    return load_directory(preset);
  }

  void save_directory(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    for (PromptKind kind : kAllPromptKinds) {
      const std::size_t k = detail::kind_index(kind);
      atomic_write_file(dir / (std::string(prompt_kind_name(kind)) + ".txt"), templates_[k]);
      atomic_write_file(dir / (std::string(prompt_kind_name(kind)) + ".instruction.txt"),
                        instructions_[k]);
    }
  }

  const std::string& template_text(PromptKind kind) const {
    return templates_[detail::kind_index(kind)];
  }

  const std::string& default_instruction(PromptKind kind) const {
    return instructions_[detail::kind_index(kind)];
  }

  void set_instruction(PromptKind kind, std::string instruction) {
    instructions_[detail::kind_index(kind)] = std::move(instruction);
  }

  std::uint64_t digest() const {
    std::string all;
    for (std::size_t k = 0; k < 4; ++k) {
      all += templates_[k];
      all += '\x1f';
      all += instructions_[k];
      all += '\x1e';
    }
    return fnv1a64(all);
  }

  RenderedPrompt render(PromptKind kind, const MultipleChoiceQuestion& q,
                        const PromptExtras& extras = {}) const {
    validate(q);
    const std::string where = std::string("render(") + prompt_kind_name(kind) + ", '" + q.id + "')";

    const bool needs_rationale =
        kind == PromptKind::answer_prediction || kind == PromptKind::followup_verdict;
    if (needs_rationale && !extras.rationale.has_value())
      throw std::runtime_error(where + ": a rationale is required for this prompt kind");
    if (kind == PromptKind::followup_verdict) {
      if (!extras.target_option.has_value())
        throw std::runtime_error(where + ": a target option is required for follow-up prompts");
      if (*extras.target_option < 0 || *extras.target_option >= q.option_count())
        throw std::runtime_error(where + ": target option " + std::to_string(*extras.target_option) +
                                 " out of range");
    }

    std::string options;
    for (int i = 0; i < q.option_count(); ++i) {
      if (i > 0) options += '\n';
      options += option_letter(i);
      options += ". ";
      options += q.options[static_cast<std::size_t>(i)];
    }

    std::map<std::string, std::optional<std::string>> slots;
    slots["instruction"] = extras.instruction.value_or(default_instruction(kind));
    slots["passage"] = q.passage;
    slots["question"] = q.question;
    slots["options"] = options;
    slots["rationale"] = extras.rationale;
    if (extras.target_option) {
      const int t = *extras.target_option;
      slots["target_option"] =
          std::string(1, option_letter(t)) + ". " + q.options[static_cast<std::size_t>(t)];
      slots["target_letter"] = std::string(1, option_letter(t));
    } else {
      slots["target_option"] = std::nullopt;
      slots["target_letter"] = std::nullopt;
    }
    if (extras.few_shot_examples.empty()) {
      slots["few_shot"] = std::nullopt;
    } else {
      std::string block;
      for (std::size_t i = 0; i < extras.few_shot_examples.size(); ++i) {
        if (i > 0) block += "\n\n";
        block += extras.few_shot_examples[i];
      }
      block += '\n';
      slots["few_shot"] = block;
    }

    RenderedPrompt out;
    out.kind = kind;
    out.text = detail::substitute_slots(template_text(kind), slots, where);
    switch (kind) {
      case PromptKind::rationale_generation:
        out.stop_sequences = {"\n[Question]"};
        out.expected_parse = ParseTag::rationale_with_label;
        break;
      case PromptKind::answer_prediction:
        out.stop_sequences = {"\n"};
        out.expected_parse = ParseTag::answer_label;
        break;
      case PromptKind::followup_verdict:
        out.stop_sequences = {"\n"};
        out.expected_parse = ParseTag::verdict;
        break;
      case PromptKind::direct_answer:
        out.stop_sequences = {"\n"};
        out.expected_parse = ParseTag::direct_label;
        break;
    }
    return out;
  }

 private:
  std::array<std::string, 4> templates_;
  std::array<std::string, 4> instructions_;
};

namespace detail {

inline std::size_t find_last_cue(std::string_view haystack, std::string_view cue) {
  const std::string lower = to_lower(haystack);
  const std::string lcue = to_lower(cue);
  return lower.rfind(lcue);
}

}  // namespace detail

// Finds the first answer-letter token after the final occurrence of `cue`.
// Accepted token forms: "B", "B.", "(B)" and similar punctuation-wrapped
// single uppercase letters. Letters at or beyond `option_count` and
// completions without the cue yield nullopt (UNPARSED).
inline std::optional<int> parse_answer_label(std::string_view completion, int option_count,
                                             std::string_view cue = kAnswerCue) {
  const std::size_t cue_pos = detail::find_last_cue(completion, cue);
  if (cue_pos == std::string::npos) return std::nullopt;
  std::size_t i = cue_pos + cue.size();
  while (i < completion.size()) {
    while (i < completion.size() && std::isspace(static_cast<unsigned char>(completion[i]))) ++i;
    std::size_t j = i;
    while (j < completion.size() && !std::isspace(static_cast<unsigned char>(completion[j]))) ++j;
    if (j == i) break;
    std::string_view token = completion.substr(i, j - i);
    while (!token.empty() && (token.front() == '(' || token.front() == '"' || token.front() == '\'' ||
                              token.front() == '*'))
      token.remove_prefix(1);
    while (!token.empty()) {
      const char c = token.back();
      if (c == ')' || c == '.' || c == ',' || c == ':' || c == ';' || c == '!' || c == '?' ||
          c == '"' || c == '\'' || c == '*')
        token.remove_suffix(1);
      else
        break;
    }
    if (token.size() == 1 && token[0] >= 'A' && token[0] <= 'Z') {
      const int idx = token[0] - 'A';
      if (idx < option_count) return idx;
      return std::nullopt;  // an explicit out-of-range label is unparsable, not a later retry
    }
    i = j;
  }
  return std::nullopt;
}

// Verdict parse over the first sentence of the completion, case-insensitive:
// "not the correct answer" -> false, "the correct answer" -> true.
inline std::optional<bool> parse_verdict(std::string_view completion) {
  std::size_t end = completion.find_first_of(".!?");
  std::string sentence = to_lower(completion.substr(0, end == std::string::npos
                                                           ? completion.size()
                                                           : end + 1));
  if (sentence.find("not the correct answer") != std::string::npos) return false;
  if (sentence.find("the correct answer") != std::string::npos) return true;
  return std::nullopt;
}

// Text preceding the first "[Answer]" marker, trailing whitespace removed.
// Leading whitespace is preserved so the model's own layout survives into the
// emitted training targets. Without a marker the whole text is trimmed.
inline std::string strip_to_rationale(std::string_view generated) {
  const std::size_t pos = generated.find(kAnswerMarker);
  if (pos == std::string::npos) return trim(generated);
  return rtrim(generated.substr(0, pos));
}

}  // namespace crest
