#pragma once

#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crest/backend.hpp"
#include "crest/core.hpp"
#include "crest/curate.hpp"
#include "crest/pipeline.hpp"
#include "crest/prompt.hpp"

namespace crest {

// Counts of records per (z, z_tilde) cell plus proportions conditioned on z.
// A z_tilde column is unreachable when no question has that many options.
struct DistributionReport {
  int max_f = 0;
  std::vector<long long> counts_z0;  // indexed by z_tilde, size max_f + 1
  std::vector<long long> counts_z1;
  long long absent_z0 = 0;  // records without a follow-up reward
  long long absent_z1 = 0;
  long long total = 0;
  std::vector<bool> reachable;  // per z_tilde value

  long long z_total(int z) const {
    const auto& counts = z == 0 ? counts_z0 : counts_z1;
    long long sum = z == 0 ? absent_z0 : absent_z1;
    for (long long c : counts) sum += c;
    return sum;
  }
};

// `table_max_f` pins the column range (for tables comparable across runs);
// columns beyond what the questions can reach render as "-".
inline DistributionReport reward_stats(const std::vector<RationaleRecord>& records,
                                       const std::vector<MultipleChoiceQuestion>& questions,
                                       std::optional<int> table_max_f = std::nullopt) {
  DistributionReport report;
  for (const auto& q : questions) report.max_f = std::max(report.max_f, q.option_count());
  if (table_max_f) report.max_f = std::max(report.max_f, *table_max_f);
  report.counts_z0.assign(static_cast<std::size_t>(report.max_f) + 1, 0);
  report.counts_z1.assign(static_cast<std::size_t>(report.max_f) + 1, 0);
  report.reachable.assign(static_cast<std::size_t>(report.max_f) + 1, false);
  const auto index = detail::question_index(questions);
  for (const auto& q : questions)
    for (int v = 0; v <= q.option_count(); ++v) report.reachable[static_cast<std::size_t>(v)] = true;

  for (const auto& rec : records) {
    if (!rec.has_prediction)
      throw std::runtime_error("record " + rec.question_id + "#" + std::to_string(rec.sample_index) +
                               " has no prediction; run the predict stage first");
    ++report.total;
    auto& counts = rec.z == 0 ? report.counts_z0 : report.counts_z1;
    auto& absent = rec.z == 0 ? report.absent_z0 : report.absent_z1;
    if (rec.z_tilde.has_value()) {
      auto it = index.find(rec.question_id);
      if (it == index.end())
        throw std::runtime_error("record references unknown question id '" + rec.question_id + "'");
      if (*rec.z_tilde < 0 || *rec.z_tilde > it->second->option_count())
        throw std::runtime_error("record " + rec.question_id + "#" +
                                 std::to_string(rec.sample_index) + " has z_tilde out of bounds");
      ++counts[static_cast<std::size_t>(*rec.z_tilde)];
    } else {
      ++absent;
    }
  }
  return report;
}

inline std::string format_stats_table(const DistributionReport& report) {
  char buf[64];
  std::string out = "reward distribution (rows: z, columns: z_tilde)\n";
  out += "  z\\zt ";
  for (int v = 0; v <= report.max_f; ++v) {
    std::snprintf(buf, sizeof(buf), "%9d", v);
    out += buf;
  }
  out += "    absent     total\n";
  for (int z = 0; z <= 1; ++z) {
    const auto& counts = z == 0 ? report.counts_z0 : report.counts_z1;
    std::snprintf(buf, sizeof(buf), "  z=%d  ", z);
    out += buf;
    for (int v = 0; v <= report.max_f; ++v) {
      if (!report.reachable[static_cast<std::size_t>(v)]) {
        std::snprintf(buf, sizeof(buf), "%9s", "-");
      } else {
        std::snprintf(buf, sizeof(buf), "%9lld", counts[static_cast<std::size_t>(v)]);
      }
      out += buf;
    }
    std::snprintf(buf, sizeof(buf), "%10lld%10lld\n", z == 0 ? report.absent_z0 : report.absent_z1,
                  report.z_total(z));
    out += buf;
  }

  out += "proportions conditioned on z\n";
  for (int z = 0; z <= 1; ++z) {
    const auto& counts = z == 0 ? report.counts_z0 : report.counts_z1;
    const long long total = report.z_total(z);
    std::snprintf(buf, sizeof(buf), "  z=%d  ", z);
    out += buf;
    for (int v = 0; v <= report.max_f; ++v) {
      if (!report.reachable[static_cast<std::size_t>(v)] || total == 0) {
        std::snprintf(buf, sizeof(buf), "%9s", "-");
      } else {
        std::snprintf(buf, sizeof(buf), "%9.4f",
                      static_cast<double>(counts[static_cast<std::size_t>(v)]) /
                          static_cast<double>(total));
      }
      out += buf;
    }
    out += '\n';
  }
  std::snprintf(buf, sizeof(buf), "total records: %lld\n", report.total);
  out += buf;
  return out;
}

inline void write_stats_jsonl(const std::filesystem::path& path, const DistributionReport& report) {
  std::vector<json> lines;
  for (int z = 0; z <= 1; ++z) {
    const auto& counts = z == 0 ? report.counts_z0 : report.counts_z1;
    const long long total = report.z_total(z);
    for (int v = 0; v <= report.max_f; ++v) {
      if (!report.reachable[static_cast<std::size_t>(v)]) continue;
      json obj;
      obj["z"] = z;
      obj["z_tilde"] = v;
      obj["count"] = counts[static_cast<std::size_t>(v)];
      obj["proportion_within_z"] =
          total == 0 ? 0.0
                     : static_cast<double>(counts[static_cast<std::size_t>(v)]) /
                           static_cast<double>(total);
      lines.push_back(std::move(obj));
    }
    json absent;
    absent["z"] = z;
    absent["z_tilde"] = nullptr;
    absent["count"] = z == 0 ? report.absent_z0 : report.absent_z1;
    absent["proportion_within_z"] =
        total == 0 ? 0.0
                   : static_cast<double>(z == 0 ? report.absent_z0 : report.absent_z1) /
                         static_cast<double>(total);
    lines.push_back(std::move(absent));
  }
  write_jsonl(path, lines);
}

enum class EvalMode { direct, cot, followup };

inline const char* eval_mode_name(EvalMode mode) {
  switch (mode) {
    case EvalMode::direct: return "direct";
    case EvalMode::cot: return "cot";
    case EvalMode::followup: return "followup";
  }
  return "?";
}

inline EvalMode eval_mode_from_string(const std::string& s) {
  if (s == "direct") return EvalMode::direct;
  if (s == "cot") return EvalMode::cot;
  if (s == "followup") return EvalMode::followup;
  throw std::runtime_error("unknown eval mode '" + s + "' (direct|cot|followup)");
}

struct EvalOutcome {
  std::string item_id;      // question id, or question#n#f for follow-up items
  bool correct = false;
  bool parse_failure = false;
  bool backend_error = false;
  std::string detail;       // parsed label / verdict / error text
};

struct EvalReport {
  EvalMode mode = EvalMode::direct;
  long long correct = 0;
  long long total = 0;  // denominator after the strictness rule
  long long parse_failures = 0;
  long long backend_errors = 0;
  long long fallback_queries = 0;
  std::vector<EvalOutcome> outcomes;

  double accuracy() const {
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
  }
};

// Accuracy over the dataset in direct-answer or chain-of-thought mode.
// Backend failures count as incorrect by default (strict); with strict off
// they are excluded from the denominator.
inline EvalReport evaluate_accuracy(Backend& backend,
                                    const std::vector<MultipleChoiceQuestion>& questions,
                                    EvalMode mode, const TemplateSet& templates,
                                    const GenerationConfig& generation,
                                    const std::vector<std::string>& exemplars = {},
                                    bool strict = true) {
  if (mode == EvalMode::followup)
    throw std::runtime_error("followup mode evaluates stored rationales; use "
                             "evaluate_followup_robustness");
  if (questions.empty()) throw std::runtime_error("nothing to evaluate: no questions");

  EvalReport report;
  report.mode = mode;
  report.outcomes.resize(questions.size());
  const GenerationConfig greedy = GenerationConfig::greedy_config(
      mode == EvalMode::cot ? generation.max_new_tokens : kLabelMaxTokens, generation.seed);

  struct ItemWork {
    std::string prompt;
    std::optional<int> parsed;
    bool parse_failure = false;
    bool fallback_used = false;
    bool backend_error = false;
    std::string error_text;
  };
  std::vector<ItemWork> work(questions.size());
  const PromptKind kind =
      mode == EvalMode::direct ? PromptKind::direct_answer : PromptKind::rationale_generation;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    PromptExtras extras;
    extras.few_shot_examples = exemplars;
    work[i].prompt = templates.render(kind, questions[i], extras).text;
  }

  parallel_for(questions.size(), static_cast<std::size_t>(backend.max_in_flight()),
               [&](std::size_t i) {
    const auto& q = questions[i];
    ItemWork& w = work[i];
    CompletionRequest req;
    req.prompt = w.prompt;
    req.sampling = greedy;
    req.num_choices = 1;
    req.stop_sequences =
        mode == EvalMode::direct ? std::vector<std::string>{"\n"}
                                 : std::vector<std::string>{"\n[Question]"};
    try {
      const auto resp = backend.complete(req);
      const std::string& text = resp.choices.at(0).text;
      if (mode == EvalMode::direct) {
        w.parsed = parse_answer_label(std::string(kDirectAnswerCue) + text, q.option_count(),
                                      kDirectAnswerCue);
      } else {
        w.parsed = parse_answer_label(text, q.option_count());
        if (!w.parsed.has_value()) {
          // Clarifying re-query with the answer scaffold appended.
          CompletionRequest fb;
          fb.prompt = w.prompt + text + kAnswerScaffold;
          fb.sampling = GenerationConfig::greedy_config(kLabelMaxTokens, generation.seed);
          fb.num_choices = 1;
          fb.stop_sequences = {"\n"};
          const auto fb_resp = backend.complete(fb);
          w.fallback_used = true;
          w.parsed = parse_answer_label(std::string(kAnswerCue) + fb_resp.choices.at(0).text,
                                        q.option_count());
        }
      }
      if (!w.parsed.has_value()) w.parse_failure = true;
    } catch (const std::exception& e) {
      w.backend_error = true;
      w.error_text = e.what();
    }
  });

  for (std::size_t i = 0; i < questions.size(); ++i) {
    const auto& q = questions[i];
    const ItemWork& w = work[i];
    EvalOutcome& outcome = report.outcomes[i];
    outcome.item_id = q.id;
    if (w.backend_error) {
      outcome.backend_error = true;
      outcome.detail = w.error_text;
      ++report.backend_errors;
      if (strict) ++report.total;  // counted incorrect
      continue;
    }
    if (w.fallback_used) ++report.fallback_queries;
    if (w.parse_failure) {
      outcome.parse_failure = true;
      ++report.parse_failures;
    }
    outcome.correct = w.parsed.has_value() && *w.parsed == q.answer_index;
    outcome.detail = w.parsed ? std::string(1, option_letter(*w.parsed)) : "UNPARSED";
    ++report.total;
    if (outcome.correct) ++report.correct;
  }
  return report;
}

// Accuracy of stored rationales on their follow-up questions, one item per
// (rationale, option) pair, judged by the given backend.
inline EvalReport evaluate_followup_robustness(Backend& backend,
                                               const std::vector<RationaleRecord>& records,
                                               const std::vector<MultipleChoiceQuestion>& questions,
                                               const TemplateSet& templates, std::uint64_t seed = 0,
                                               bool strict = true) {
  if (records.empty()) throw std::runtime_error("nothing to evaluate: no records");
  const auto index = detail::question_index(questions);

  struct Item {
    const RationaleRecord* rec;
    const MultipleChoiceQuestion* q;
    int f;
    bool gold;
    std::string prompt;
  };
  std::vector<Item> items;
  for (const auto& rec : records) {
    auto it = index.find(rec.question_id);
    if (it == index.end())
      throw std::runtime_error("record references unknown question id '" + rec.question_id + "'");
    const auto& q = *it->second;
    const auto followups = synthesize_followups(q);
    for (int f = 0; f < q.option_count(); ++f) {
      PromptExtras extras;
      extras.rationale = rec.rationale_text;
      extras.target_option = f;
      items.push_back(Item{&rec, &q, f, followups[static_cast<std::size_t>(f)].gold_verdict,
                           templates.render(PromptKind::followup_verdict, q, extras).text});
    }
  }

  EvalReport report;
  report.mode = EvalMode::followup;
  report.outcomes.resize(items.size());
  const GenerationConfig greedy = GenerationConfig::greedy_config(kLabelMaxTokens, seed);

  struct ItemResult {
    std::optional<bool> verdict;
    bool backend_error = false;
    std::string error_text;
  };
  std::vector<ItemResult> results(items.size());
  parallel_for(items.size(), static_cast<std::size_t>(backend.max_in_flight()),
               [&](std::size_t i) {
    CompletionRequest req;
    req.prompt = items[i].prompt;
    req.sampling = greedy;
    req.num_choices = 1;
    req.stop_sequences = {"\n"};
    try {
      const auto resp = backend.complete(req);
      results[i].verdict = parse_verdict(resp.choices.at(0).text);
    } catch (const std::exception& e) {
      results[i].backend_error = true;
      results[i].error_text = e.what();
    }
  });

  for (std::size_t i = 0; i < items.size(); ++i) {
    const Item& item = items[i];
    const ItemResult& r = results[i];
    EvalOutcome& outcome = report.outcomes[i];
    outcome.item_id = detail::work_key(item.rec->question_id, item.rec->sample_index, item.f);
    if (r.backend_error) {
      outcome.backend_error = true;
      outcome.detail = r.error_text;
      ++report.backend_errors;
      if (strict) ++report.total;
      continue;
    }
    if (!r.verdict.has_value()) {
      outcome.parse_failure = true;
      ++report.parse_failures;
    }
    outcome.correct = r.verdict.has_value() && *r.verdict == item.gold;
    outcome.detail = r.verdict ? (*r.verdict ? "true" : "false") : "UNPARSED";
    ++report.total;
    if (outcome.correct) ++report.correct;
  }
  return report;
}

inline std::string format_eval_report(const EvalReport& report) {
  char buf[160];
  std::string out;
  std::snprintf(buf, sizeof(buf), "mode            : %s\n", eval_mode_name(report.mode));
  out += buf;
  std::snprintf(buf, sizeof(buf), "accuracy        : %.4f (%lld/%lld)\n", report.accuracy(),
                report.correct, report.total);
  out += buf;
  std::snprintf(buf, sizeof(buf), "parse failures  : %lld\n", report.parse_failures);
  out += buf;
  std::snprintf(buf, sizeof(buf), "backend errors  : %lld\n", report.backend_errors);
  out += buf;
  std::snprintf(buf, sizeof(buf), "fallback queries: %lld\n", report.fallback_queries);
  out += buf;
  return out;
}

inline void write_eval_detail(const std::filesystem::path& path, const EvalReport& report) {
  std::vector<json> lines;
  lines.reserve(report.outcomes.size());
  for (const auto& o : report.outcomes) {
    json obj;
    obj["item_id"] = o.item_id;
    obj["correct"] = o.correct;
    obj["parse_failure"] = o.parse_failure;
    obj["backend_error"] = o.backend_error;
    obj["detail"] = o.detail;
    lines.push_back(std::move(obj));
  }
  write_jsonl(path, lines);
}

}  // namespace crest
