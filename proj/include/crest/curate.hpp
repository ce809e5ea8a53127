#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "crest/core.hpp"
#include "crest/jsonl.hpp"
#include "crest/prompt.hpp"

namespace crest {

// One supervised fine-tuning example. The completion reproduces the model's
// own output layout (rationale, then the answer scaffold with the gold
// letter); the loss-mask boundary for trainers is the end of `prompt`.
struct SftExample {
  std::string prompt;
  std::string completion;
  std::string question_id;
  int sample_index = 0;
  int z_tilde = 0;
};

// Tolerance t: a record passes when z == 1 and z_tilde >= F - t, with t
// clamped to each question's own option count.
struct ToleranceSpec {
  int t = 0;
};

inline void validate(const ToleranceSpec& spec) {
  if (spec.t < 0) throw std::runtime_error("tolerance must be >= 0");
}

namespace detail {

inline const MultipleChoiceQuestion& question_by_id(
    const std::vector<MultipleChoiceQuestion>& questions, const std::string& id) {
  for (const auto& q : questions)
    if (q.id == id) return q;
  throw std::runtime_error("record references unknown question id '" + id + "'");
}

// Index once; stage code calls this in loops.
inline std::map<std::string, const MultipleChoiceQuestion*> question_index(
    const std::vector<MultipleChoiceQuestion>& questions) {
  std::map<std::string, const MultipleChoiceQuestion*> index;
  for (const auto& q : questions) index[q.id] = &q;
  return index;
}

}  // namespace detail

inline bool passes_tolerance_filter(const RationaleRecord& rec, int option_count, int t) {
  if (rec.z != 1) return false;
  const int threshold = std::max(0, option_count - t);
  if (threshold == 0) return true;  // t >= F needs no follow-up reward
  if (!rec.z_tilde.has_value())
    throw std::runtime_error("record " + rec.question_id + "#" + std::to_string(rec.sample_index) +
                             " has no follow-up reward; run the evaluate-followups stage or use "
                             "tolerance >= the question's option count");
  return *rec.z_tilde >= threshold;
}

inline SftExample render_sft_example(const RationaleRecord& rec, const MultipleChoiceQuestion& q,
                                     const TemplateSet& templates) {
  SftExample ex;
  ex.prompt = templates.render(PromptKind::rationale_generation, q).text;
  ex.completion = rec.rationale_text + answer_scaffold(q.answer_index);
  ex.question_id = rec.question_id;
  ex.sample_index = rec.sample_index;
  ex.z_tilde = rec.z_tilde.value_or(0);
  return ex;
}

// Keeps exactly the records with z == 1 and z_tilde >= F - t and renders them
// as training examples, in record order.
inline std::vector<SftExample> filter_sft(const std::vector<RationaleRecord>& records,
                                          const std::vector<MultipleChoiceQuestion>& questions,
                                          int t, const TemplateSet& templates) {
  validate(ToleranceSpec{t});
  const auto index = detail::question_index(questions);
  std::vector<SftExample> out;
  for (const auto& rec : records) {
    auto it = index.find(rec.question_id);
    if (it == index.end())
      throw std::runtime_error("record references unknown question id '" + rec.question_id + "'");
    if (!rec.has_prediction)
      throw std::runtime_error("record " + rec.question_id + "#" + std::to_string(rec.sample_index) +
                               " has no prediction; run the predict stage first");
    if (passes_tolerance_filter(rec, it->second->option_count(), t))
      out.push_back(render_sft_example(rec, *it->second, templates));
  }
  return out;
}

struct ToleranceSweepRow {
  int t = 0;
  long long kept_count = 0;
  double kept_fraction = 0.0;  // of all records passed in, correct or not
};

inline std::vector<ToleranceSweepRow> tolerance_sweep(
    const std::vector<RationaleRecord>& records,
    const std::vector<MultipleChoiceQuestion>& questions, const std::vector<int>& t_values) {
  const auto index = detail::question_index(questions);
  std::vector<ToleranceSweepRow> out;
  for (int t : t_values) {
    ToleranceSweepRow row;
    row.t = t;
    for (const auto& rec : records) {
      auto it = index.find(rec.question_id);
      if (it == index.end())
        throw std::runtime_error("record references unknown question id '" + rec.question_id + "'");
      if (passes_tolerance_filter(rec, it->second->option_count(), t)) ++row.kept_count;
    }
    row.kept_fraction = records.empty() ? 0.0
                                        : static_cast<double>(row.kept_count) /
                                              static_cast<double>(records.size());
    out.push_back(row);
  }
  return out;
}

inline void write_sft(const std::filesystem::path& path, const std::vector<SftExample>& examples) {
  std::vector<json> lines;
  lines.reserve(examples.size());
  for (const auto& ex : examples) {
    json obj;
    obj["prompt"] = ex.prompt;
    obj["completion"] = ex.completion;
    obj["meta"] = {{"question_id", ex.question_id},
                   {"n", ex.sample_index},
                   {"z_tilde", ex.z_tilde}};
    lines.push_back(std::move(obj));
  }
  write_jsonl(path, lines);
}

inline std::vector<SftExample> read_sft(const std::filesystem::path& path) {
  std::vector<SftExample> out;
  for_each_jsonl(path, [&](std::size_t lineno, const json& obj) {
    const std::string where = path.string() + ":" + std::to_string(lineno);
    SftExample ex;
    ex.prompt = require_string(obj, "prompt", where);
    ex.completion = require_string(obj, "completion", where);
    const json meta = require_field(obj, "meta", where);
    ex.question_id = require_string(meta, "question_id", where);
    ex.sample_index = meta.value("n", 0);
    ex.z_tilde = meta.value("z_tilde", 0);
    out.push_back(std::move(ex));
  });
  return out;
}

}  // namespace crest
