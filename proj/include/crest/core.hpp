#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "crest/jsonl.hpp"
#include "crest/util.hpp"

namespace crest {

constexpr int kMaxOptions = 26;  // one letter per option, A..Z

inline char option_letter(int index) { return static_cast<char>('A' + index); }

// A multiple-choice question with an ordered option list and a 0-based gold
// answer. The option count varies per question; datasets mix 2..26 options.
struct MultipleChoiceQuestion {
  std::string id;
  std::optional<std::string> passage;
  std::string question;
  std::vector<std::string> options;
  int answer_index = -1;

  int option_count() const { return static_cast<int>(options.size()); }
};

// Derived yes/no question: "is option `option_index` the correct answer?"
struct FollowUpQuestion {
  std::string parent_id;
  int option_index = -1;
  bool gold_verdict = false;
};

// Sampling parameters for rationale generation. temperature == 0 means greedy
// decoding; greedy requests must ask for a single choice.
struct GenerationConfig {
  double temperature = 0.8;
  double top_p = 0.95;
  int num_samples = 16;
  int max_new_tokens = 512;
  std::uint64_t seed = 0;

  bool greedy() const { return temperature == 0.0; }

  static GenerationConfig greedy_config(int max_new_tokens, std::uint64_t seed = 0) {
    GenerationConfig cfg;
    cfg.temperature = 0.0;
    cfg.top_p = 1.0;
    cfg.num_samples = 1;
    cfg.max_new_tokens = max_new_tokens;
    cfg.seed = seed;
    return cfg;
  }
};

inline void validate(const GenerationConfig& cfg, const std::string& where = "generation config") {
  if (cfg.temperature < 0) throw std::runtime_error(where + ": temperature must be >= 0");
  if (!(cfg.top_p > 0.0 && cfg.top_p <= 1.0)) throw std::runtime_error(where + ": top_p must be in (0,1]");
  if (cfg.num_samples <= 0) throw std::runtime_error(where + ": num_samples must be positive");
  if (cfg.max_new_tokens <= 0) throw std::runtime_error(where + ": max_new_tokens must be positive");
}

// One sampled rationale and everything computed from it. `prediction` and the
// per-option verdicts are nullopt when the model output could not be parsed;
// `z_tilde` is nullopt when follow-up evaluation has not run for this record.
struct RationaleRecord {
  std::string question_id;
  int sample_index = 0;
  std::string rationale_text;
  bool empty_rationale = false;

  bool has_prediction = false;
  std::optional<int> prediction;
  int z = 0;
  bool used_fallback = false;

  std::vector<std::optional<bool>> followup_verdicts;  // size F once evaluated
  std::vector<bool> verdict_present;                   // size F once any exist
  std::optional<int> z_tilde;

  // Raw completions kept for recompute audits.
  std::string raw_generation;
  std::string raw_prediction;
  std::optional<std::string> raw_fallback;
  std::vector<std::string> raw_verdicts;
};

// Binary reward: 1 iff the parsed prediction equals the gold answer.
// Unparsable predictions never earn reward.
inline int reward_z(const std::optional<int>& prediction, int answer_index) {
  return prediction.has_value() && *prediction == answer_index ? 1 : 0;
}

// Count of follow-up verdicts matching the gold verdicts; an unparsable
// verdict counts as a mismatch.
inline int reward_z_tilde(const std::vector<std::optional<bool>>& verdicts,
                          const std::vector<FollowUpQuestion>& followups) {
  int count = 0;
  for (std::size_t f = 0; f < followups.size(); ++f) {
    if (f < verdicts.size() && verdicts[f].has_value() &&
        *verdicts[f] == followups[f].gold_verdict)
      ++count;
  }
  return count;
}

inline void validate(const MultipleChoiceQuestion& q, const std::string& where = "") {
  const std::string ctx = where.empty() ? ("question '" + q.id + "'") : where;
  if (q.id.empty()) throw std::runtime_error(ctx + ": empty id");
  if (q.question.empty()) throw std::runtime_error(ctx + ": empty question text");
  const int f = q.option_count();
  if (f < 2 || f > kMaxOptions)
    throw std::runtime_error(ctx + ": option count " + std::to_string(f) + " outside [2," +
                             std::to_string(kMaxOptions) + "]");
  for (int i = 0; i < f; ++i) {
    if (q.options[static_cast<std::size_t>(i)].empty())
      throw std::runtime_error(ctx + ": option " + std::string(1, option_letter(i)) + " is empty");
  }
  if (q.answer_index < 0 || q.answer_index >= f)
    throw std::runtime_error(ctx + ": answer_index " + std::to_string(q.answer_index) +
                             " out of range for " + std::to_string(f) + " options");
}

enum class DatasetFormat { jsonl };

inline DatasetFormat dataset_format_from_string(const std::string& s) {
  if (s == "jsonl") return DatasetFormat::jsonl;
  throw std::runtime_error("unknown dataset format '" + s + "' (supported: jsonl)");
}

namespace detail {

inline int parse_answer_field(const json& answer, int option_count, const std::string& where) {
  if (answer.is_number_integer()) {
    int idx = answer.get<int>();
    if (idx < 0 || idx >= option_count)
      throw std::runtime_error(where + ": field 'answer' index " + std::to_string(idx) +
                               " out of range for " + std::to_string(option_count) + " options");
    return idx;
  }
  if (answer.is_string()) {
    const std::string s = answer.get<std::string>();
    if (s.size() == 1 && s[0] >= 'A' && s[0] <= 'Z') {
      int idx = s[0] - 'A';
      if (idx >= option_count)
        throw std::runtime_error(where + ": field 'answer' letter '" + s + "' beyond option count " +
                                 std::to_string(option_count));
      return idx;
    }
    throw std::runtime_error(where + ": field 'answer' must be a letter A-Z or a 0-based index");
  }
  throw std::runtime_error(where + ": field 'answer' must be a letter or an integer");
}

}  // namespace detail

inline MultipleChoiceQuestion question_from_json(const json& obj, const std::string& where) {
  MultipleChoiceQuestion q;
  q.id = require_string(obj, "id", where);
  q.question = require_string(obj, "question", where);
  if (obj.contains("passage") && !obj["passage"].is_null())
    q.passage = require_string(obj, "passage", where);
  const json opts = require_field(obj, "options", where);
  if (!opts.is_array())
    throw std::runtime_error(where + ": field 'options' must be an array");
  for (const auto& o : opts) {
    if (!o.is_string()) throw std::runtime_error(where + ": field 'options' must contain strings");
    q.options.push_back(o.get<std::string>());
  }
  q.answer_index = detail::parse_answer_field(require_field(obj, "answer", where),
                                              q.option_count(), where);
  validate(q, where);
  return q;
}

inline json question_to_json(const MultipleChoiceQuestion& q) {
  json obj;
  obj["id"] = q.id;
  if (q.passage) obj["passage"] = *q.passage;
  obj["question"] = q.question;
  obj["options"] = q.options;
  obj["answer"] = std::string(1, option_letter(q.answer_index));
  return obj;
}

// Loads a line-delimited dataset; letter answers are normalized to 0-based
// indices and every record is validated against the type invariants.
inline std::vector<MultipleChoiceQuestion> load_dataset(const std::filesystem::path& path,
                                                        DatasetFormat format = DatasetFormat::jsonl) {
  (void)format;  // single format today; the tag keeps the call sites stable
  std::vector<MultipleChoiceQuestion> out;
  std::set<std::string> seen;
  for_each_jsonl(path, [&](std::size_t lineno, const json& obj) {
    const std::string where = path.string() + ":" + std::to_string(lineno);
    MultipleChoiceQuestion q = question_from_json(obj, where);
    if (!seen.insert(q.id).second)
      throw std::runtime_error(where + ": duplicate question id '" + q.id + "'");
    out.push_back(std::move(q));
  });
  return out;
}

inline void save_dataset(const std::filesystem::path& path,
                         const std::vector<MultipleChoiceQuestion>& questions) {
  std::vector<json> lines;
  lines.reserve(questions.size());
  for (const auto& q : questions) lines.push_back(question_to_json(q));
  write_jsonl(path, lines);
}

// One follow-up per option, in option order; the gold verdict is true exactly
// at the parent's answer index.
inline std::vector<FollowUpQuestion> synthesize_followups(const MultipleChoiceQuestion& q) {
  validate(q);
  std::vector<FollowUpQuestion> out;
  out.reserve(q.options.size());
  for (int f = 0; f < q.option_count(); ++f)
    out.push_back(FollowUpQuestion{q.id, f, f == q.answer_index});
  return out;
}

inline void write_followups(const std::filesystem::path& path,
                            const std::vector<FollowUpQuestion>& followups) {
  std::vector<json> lines;
  lines.reserve(followups.size());
  for (const auto& fu : followups) {
    json obj;
    obj["parent_id"] = fu.parent_id;
    obj["option_index"] = fu.option_index;
    obj["gold_verdict"] = fu.gold_verdict;
    lines.push_back(std::move(obj));
  }
  write_jsonl(path, lines);
}

inline std::vector<FollowUpQuestion> read_followups(const std::filesystem::path& path) {
  std::vector<FollowUpQuestion> out;
  for_each_jsonl(path, [&](std::size_t lineno, const json& obj) {
    const std::string where = path.string() + ":" + std::to_string(lineno);
    FollowUpQuestion fu;
    fu.parent_id = require_string(obj, "parent_id", where);
    fu.option_index = require_field(obj, "option_index", where).get<int>();
    fu.gold_verdict = require_field(obj, "gold_verdict", where).get<bool>();
    out.push_back(std::move(fu));
  });
  return out;
}

}  // namespace crest
