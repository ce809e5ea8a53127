#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "crest/backend.hpp"
#include "crest/core.hpp"
#include "crest/curate.hpp"
#include "crest/jsonl.hpp"
#include "crest/prompt.hpp"

namespace crest {

enum class FollowupPolicy { all, correct_only, skip };

inline const char* followup_policy_name(FollowupPolicy p) {
  switch (p) {
    case FollowupPolicy::all: return "all";
    case FollowupPolicy::correct_only: return "correct_only";
    case FollowupPolicy::skip: return "skip";
  }
  return "?";
}

inline FollowupPolicy followup_policy_from_string(const std::string& s) {
  if (s == "all") return FollowupPolicy::all;
  if (s == "correct_only") return FollowupPolicy::correct_only;
  if (s == "skip") return FollowupPolicy::skip;
  throw std::runtime_error("unknown followup policy '" + s + "' (all|correct_only|skip)");
}

// Token budget for greedy label/verdict continuations.
constexpr int kLabelMaxTokens = 64;

// Pins what a run was started with; a resumed run must match these digests.
struct RunManifest {
  std::string run_id;
  std::string dataset_path;
  std::string dataset_digest;
  std::string backend_digest;
  std::string templates_digest;
  GenerationConfig generation;
  FollowupPolicy followup_policy = FollowupPolicy::all;
  std::string created_utc;

  json to_json() const {
    json obj;
    obj["run_id"] = run_id;
    obj["dataset_path"] = dataset_path;
    obj["dataset_digest"] = dataset_digest;
    obj["backend_digest"] = backend_digest;
    obj["templates_digest"] = templates_digest;
    obj["generation"] = {{"temperature", generation.temperature},
                         {"top_p", generation.top_p},
                         {"num_samples", generation.num_samples},
                         {"max_new_tokens", generation.max_new_tokens},
                         {"seed", generation.seed}};
    obj["followup_policy"] = followup_policy_name(followup_policy);
    obj["created_utc"] = created_utc;
    return obj;
  }

  static RunManifest from_json(const json& obj, const std::string& where) {
    RunManifest m;
    m.run_id = require_string(obj, "run_id", where);
    m.dataset_path = require_string(obj, "dataset_path", where);
    m.dataset_digest = require_string(obj, "dataset_digest", where);
    m.backend_digest = require_string(obj, "backend_digest", where);
    m.templates_digest = require_string(obj, "templates_digest", where);
    const json gen = require_field(obj, "generation", where);
    m.generation.temperature = gen.value("temperature", 0.8);
    m.generation.top_p = gen.value("top_p", 0.95);
    m.generation.num_samples = gen.value("num_samples", 16);
    m.generation.max_new_tokens = gen.value("max_new_tokens", 512);
    m.generation.seed = gen.value("seed", std::uint64_t{0});
    m.followup_policy = followup_policy_from_string(require_string(obj, "followup_policy", where));
    m.created_utc = obj.value("created_utc", std::string());
    return m;
  }

  // Everything that must match for a resume to be valid.
  std::string config_digest() const {
    json obj = to_json();
    obj.erase("created_utc");
    obj.erase("run_id");
    return to_hex64(fnv1a64(obj.dump()));
  }
};

struct RationaleLine {
  std::string question_id;
  int n = 0;
  std::string raw;
  std::string rationale;
  bool empty_rationale = false;
  std::string finish_reason = "stop";
};

struct PredictionLine {
  std::string question_id;
  int n = 0;
  std::string raw;
  std::optional<std::string> fallback_raw;
  std::optional<int> prediction;
  int z = 0;
};

struct VerdictLine {
  std::string question_id;
  int n = 0;
  int option_index = 0;
  std::string raw;
  std::optional<bool> verdict;
};

// Append-only run directory: manifest plus one line-delimited file per stage
// output. Lines are flushed individually so an interrupted run loses at most
// the in-flight work.
class RunStore {
 public:
  explicit RunStore(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
  }

  const std::filesystem::path& dir() const { return dir_; }
  std::filesystem::path manifest_path() const { return dir_ / "manifest.json"; }
  std::filesystem::path rationales_path() const { return dir_ / "rationales.jsonl"; }
  std::filesystem::path predictions_path() const { return dir_ / "predictions.jsonl"; }
  std::filesystem::path verdicts_path() const { return dir_ / "verdicts.jsonl"; }
  std::filesystem::path errors_path() const { return dir_ / "errors.jsonl"; }

  void write_manifest(const RunManifest& m) {
    atomic_write_file(manifest_path(), m.to_json().dump(2) + "\n");
  }

  std::optional<RunManifest> read_manifest() const {
    if (!std::filesystem::exists(manifest_path())) return std::nullopt;
    const json obj = json::parse(read_file(manifest_path()));
    return RunManifest::from_json(obj, manifest_path().string());
  }

  void append_rationale(const RationaleLine& line) {
    json obj;
    obj["question_id"] = line.question_id;
    obj["n"] = line.n;
    obj["raw"] = line.raw;
    obj["rationale"] = line.rationale;
    obj["empty_rationale"] = line.empty_rationale;
    obj["finish_reason"] = line.finish_reason;
    appender(rationales_path(), rationales_appender_).append(obj);
  }

  void append_prediction(const PredictionLine& line) {
    json obj;
    obj["question_id"] = line.question_id;
    obj["n"] = line.n;
    obj["raw"] = line.raw;
    if (line.fallback_raw) obj["fallback_raw"] = *line.fallback_raw;
    obj["prediction"] = line.prediction
                            ? json(std::string(1, option_letter(*line.prediction)))
                            : json(nullptr);
    obj["z"] = line.z;
    appender(predictions_path(), predictions_appender_).append(obj);
  }

  void append_verdict(const VerdictLine& line) {
    json obj;
    obj["question_id"] = line.question_id;
    obj["n"] = line.n;
    obj["option_index"] = line.option_index;
    obj["raw"] = line.raw;
    obj["verdict"] = line.verdict ? json(*line.verdict) : json(nullptr);
    appender(verdicts_path(), verdicts_appender_).append(obj);
  }

  void append_z_tilde(const std::string& question_id, int n, int z_tilde) {
    json obj;
    obj["question_id"] = question_id;
    obj["n"] = n;
    obj["z_tilde"] = z_tilde;
    appender(verdicts_path(), verdicts_appender_).append(obj);
  }

  void append_error(const std::string& stage, const std::string& key, const std::string& message) {
    json obj;
    obj["stage"] = stage;
    obj["key"] = key;
    obj["error"] = message;
    appender(errors_path(), errors_appender_).append(obj);
  }

  std::map<std::pair<std::string, int>, RationaleLine> read_rationales() const {
    std::map<std::pair<std::string, int>, RationaleLine> out;
    if (!std::filesystem::exists(rationales_path())) return out;
    for_each_jsonl(rationales_path(), [&](std::size_t lineno, const json& obj) {
      const std::string where = rationales_path().string() + ":" + std::to_string(lineno);
      RationaleLine line;
      line.question_id = require_string(obj, "question_id", where);
      line.n = require_field(obj, "n", where).get<int>();
      line.raw = obj.value("raw", std::string());
      line.rationale = obj.value("rationale", std::string());
      line.empty_rationale = obj.value("empty_rationale", false);
      line.finish_reason = obj.value("finish_reason", std::string("stop"));
      out[{line.question_id, line.n}] = std::move(line);
    });
    return out;
  }

  std::map<std::pair<std::string, int>, PredictionLine> read_predictions() const {
    std::map<std::pair<std::string, int>, PredictionLine> out;
    if (!std::filesystem::exists(predictions_path())) return out;
    for_each_jsonl(predictions_path(), [&](std::size_t lineno, const json& obj) {
      const std::string where = predictions_path().string() + ":" + std::to_string(lineno);
      PredictionLine line;
      line.question_id = require_string(obj, "question_id", where);
      line.n = require_field(obj, "n", where).get<int>();
      line.raw = obj.value("raw", std::string());
      if (obj.contains("fallback_raw") && !obj["fallback_raw"].is_null())
        line.fallback_raw = obj["fallback_raw"].get<std::string>();
      const json pred = require_field(obj, "prediction", where);
      if (!pred.is_null()) {
        const std::string letter = pred.get<std::string>();
        if (letter.size() != 1 || letter[0] < 'A' || letter[0] > 'Z')
          throw std::runtime_error(where + ": prediction must be a letter A-Z or null");
        line.prediction = letter[0] - 'A';
      }
      line.z = require_field(obj, "z", where).get<int>();
      out[{line.question_id, line.n}] = std::move(line);
    });
    return out;
  }

  struct VerdictData {
    std::map<std::tuple<std::string, int, int>, VerdictLine> verdicts;
    std::map<std::pair<std::string, int>, int> z_tilde;
  };

  VerdictData read_verdicts() const {
    VerdictData out;
    if (!std::filesystem::exists(verdicts_path())) return out;
    for_each_jsonl(verdicts_path(), [&](std::size_t lineno, const json& obj) {
      const std::string where = verdicts_path().string() + ":" + std::to_string(lineno);
      const std::string qid = require_string(obj, "question_id", where);
      const int n = require_field(obj, "n", where).get<int>();
      if (obj.contains("option_index")) {
        VerdictLine line;
        line.question_id = qid;
        line.n = n;
        line.option_index = obj["option_index"].get<int>();
        line.raw = obj.value("raw", std::string());
        const json v = require_field(obj, "verdict", where);
        if (!v.is_null()) line.verdict = v.get<bool>();
        out.verdicts[{qid, n, line.option_index}] = std::move(line);
      } else {
        out.z_tilde[{qid, n}] = require_field(obj, "z_tilde", where).get<int>();
      }
    });
    return out;
  }

 private:
  JsonlAppender& appender(const std::filesystem::path& path,
                          std::unique_ptr<JsonlAppender>& slot) {
    if (!slot) slot = std::make_unique<JsonlAppender>(path);
    return *slot;
  }

  std::filesystem::path dir_;
  std::unique_ptr<JsonlAppender> rationales_appender_;
  std::unique_ptr<JsonlAppender> predictions_appender_;
  std::unique_ptr<JsonlAppender> verdicts_appender_;
  std::unique_ptr<JsonlAppender> errors_appender_;
};

struct StageStats {
  std::size_t planned = 0;            // pending work items at stage entry
  std::size_t skipped_existing = 0;   // completed in a previous invocation
  std::size_t completed = 0;
  std::size_t backend_calls = 0;
  std::size_t errors = 0;
  std::size_t parse_failures = 0;
  std::size_t fallback_queries = 0;
  std::size_t empty_rationales = 0;
  std::size_t duplicate_rationales = 0;
};

namespace detail {

inline std::string work_key(const std::string& qid, int n) {
  return qid + "#" + std::to_string(n);
}

inline std::string work_key(const std::string& qid, int n, int f) {
  return qid + "#" + std::to_string(n) + "#" + std::to_string(f);
}

inline std::size_t chunk_size_for(const Backend& backend) {
  return std::max<std::size_t>(8, static_cast<std::size_t>(backend.max_in_flight()) * 4);
}

// Lines grouped by question id, ordered by sample index within a group.
inline std::map<std::string, std::vector<const RationaleLine*>> group_rationales(
    const std::map<std::pair<std::string, int>, RationaleLine>& rationales) {
  std::map<std::string, std::vector<const RationaleLine*>> grouped;
  for (const auto& [key, line] : rationales) grouped[key.first].push_back(&line);
  return grouped;
}

}  // namespace detail

// Samples the missing (question, sample) rationales, one single-choice
// request per sample so interrupted runs resume with exactly the missing
// calls. Completions are stripped to their rationale section on the way in.
inline StageStats generate_rationales(RunStore& store, Backend& backend,
                                      const std::vector<MultipleChoiceQuestion>& questions,
                                      const GenerationConfig& config, const TemplateSet& templates,
                                      std::size_t limit = SIZE_MAX) {
  validate(config, "generation config");
  StageStats stats;
  const auto existing = store.read_rationales();
  std::set<std::string> seen_texts;
  for (const auto& [key, line] : existing)
    seen_texts.insert(line.question_id + "\x1f" + line.rationale);

  struct Item {
    const MultipleChoiceQuestion* q;
    int n;
    std::string prompt;
    std::vector<std::string> stop;
  };
  std::vector<Item> pending;
  for (const auto& q : questions) {
    std::optional<RenderedPrompt> rendered;
    for (int n = 0; n < config.num_samples; ++n) {
      if (existing.count({q.id, n})) {
        ++stats.skipped_existing;
        continue;
      }
      if (!rendered) rendered = templates.render(PromptKind::rationale_generation, q);
      pending.push_back(Item{&q, n, rendered->text, rendered->stop_sequences});
    }
  }
  stats.planned = pending.size();
  if (pending.size() > limit) pending.resize(limit);

  const std::size_t chunk = detail::chunk_size_for(backend);
  for (std::size_t base = 0; base < pending.size(); base += chunk) {
    const std::size_t count = std::min(chunk, pending.size() - base);
    std::vector<CompletionRequest> reqs(count);
    for (std::size_t i = 0; i < count; ++i) {
      const Item& item = pending[base + i];
      reqs[i].prompt = item.prompt;
      reqs[i].sampling = config;
      reqs[i].sampling.num_samples = 1;
      reqs[i].num_choices = 1;
      reqs[i].stop_sequences = item.stop;
      reqs[i].choice_offset = item.n;
    }
    const auto outcomes = backend.complete_batch(reqs);
    stats.backend_calls += count;
    for (std::size_t i = 0; i < count; ++i) {
      const Item& item = pending[base + i];
      if (!outcomes[i].ok()) {
        ++stats.errors;
        store.append_error("generate", detail::work_key(item.q->id, item.n),
                           outcomes[i].error->what());
        continue;
      }
      const auto& choice = outcomes[i].response->choices.at(0);
      RationaleLine line;
      line.question_id = item.q->id;
      line.n = item.n;
      line.raw = choice.text;
      line.rationale = strip_to_rationale(choice.text);
      line.empty_rationale = line.rationale.empty();
      line.finish_reason = choice.finish_reason;
      if (line.empty_rationale) ++stats.empty_rationales;
      if (!seen_texts.insert(line.question_id + "\x1f" + line.rationale).second)
        ++stats.duplicate_rationales;
      store.append_rationale(line);
      ++stats.completed;
    }
  }
  return stats;
}

namespace detail {

// The prediction prompt ends at the answer cue, so the parser sees the cue
// plus the model's continuation.
inline std::optional<int> parse_label_continuation(const std::string& completion, int option_count) {
  return parse_answer_label(std::string(kAnswerCue) + completion, option_count);
}

}  // namespace detail

// One greedy answer-prediction call per stored rationale; completions that do
// not parse get one clarifying re-query with the answer scaffold appended to
// the original output.
inline StageStats predict_answers(RunStore& store, Backend& backend,
                                  const std::vector<MultipleChoiceQuestion>& questions,
                                  const TemplateSet& templates, std::uint64_t seed,
                                  std::size_t limit = SIZE_MAX) {
  StageStats stats;
  const auto rationales = store.read_rationales();
  const auto existing = store.read_predictions();

  struct Item {
    const MultipleChoiceQuestion* q;
    const RationaleLine* line;
    std::string prompt;
  };
  std::vector<Item> pending;
  const auto grouped = detail::group_rationales(rationales);
  for (const auto& q : questions) {
    auto git = grouped.find(q.id);
    if (git == grouped.end()) continue;
    for (const RationaleLine* line : git->second) {
      if (existing.count({q.id, line->n})) {
        ++stats.skipped_existing;
        continue;
      }
      const auto rendered = templates.render(PromptKind::answer_prediction, q,
                                             PromptExtras{line->rationale, std::nullopt, {}, {}});
      pending.push_back(Item{&q, line, rendered.text});
    }
  }
  stats.planned = pending.size();
  if (pending.size() > limit) pending.resize(limit);

  const GenerationConfig greedy = GenerationConfig::greedy_config(kLabelMaxTokens, seed);
  const std::size_t chunk = detail::chunk_size_for(backend);
  for (std::size_t base = 0; base < pending.size(); base += chunk) {
    const std::size_t count = std::min(chunk, pending.size() - base);
    std::vector<CompletionRequest> reqs(count);
    for (std::size_t i = 0; i < count; ++i) {
      reqs[i].prompt = pending[base + i].prompt;
      reqs[i].sampling = greedy;
      reqs[i].num_choices = 1;
      reqs[i].stop_sequences = {"\n"};
    }
    auto outcomes = backend.complete_batch(reqs);
    stats.backend_calls += count;

    // Second round: clarifying re-queries for unparsable first completions.
    std::vector<std::size_t> fallback_slots;
    std::vector<CompletionRequest> fallback_reqs;
    std::vector<std::optional<int>> first_parse(count);
    for (std::size_t i = 0; i < count; ++i) {
      if (!outcomes[i].ok()) continue;
      const Item& item = pending[base + i];
      first_parse[i] = detail::parse_label_continuation(outcomes[i].response->choices.at(0).text,
                                                        item.q->option_count());
      if (!first_parse[i].has_value()) {
        CompletionRequest req;
        req.prompt = item.prompt + outcomes[i].response->choices.at(0).text + kAnswerScaffold;
        req.sampling = greedy;
        req.num_choices = 1;
        req.stop_sequences = {"\n"};
        fallback_slots.push_back(i);
        fallback_reqs.push_back(std::move(req));
      }
    }
    std::vector<CompletionOutcome> fallback_outcomes;
    if (!fallback_reqs.empty()) {
      fallback_outcomes = backend.complete_batch(fallback_reqs);
      stats.backend_calls += fallback_reqs.size();
      stats.fallback_queries += fallback_reqs.size();
    }
    std::map<std::size_t, const CompletionOutcome*> fallback_by_slot;
    for (std::size_t j = 0; j < fallback_slots.size(); ++j)
      fallback_by_slot[fallback_slots[j]] = &fallback_outcomes[j];

    for (std::size_t i = 0; i < count; ++i) {
      const Item& item = pending[base + i];
      if (!outcomes[i].ok()) {
        ++stats.errors;
        store.append_error("predict", detail::work_key(item.q->id, item.line->n),
                           outcomes[i].error->what());
        continue;
      }
      PredictionLine line;
      line.question_id = item.q->id;
      line.n = item.line->n;
      line.raw = outcomes[i].response->choices.at(0).text;
      line.prediction = first_parse[i];
      auto fb = fallback_by_slot.find(i);
      if (fb != fallback_by_slot.end()) {
        if (!fb->second->ok()) {
          ++stats.errors;
          store.append_error("predict", detail::work_key(item.q->id, item.line->n),
                             fb->second->error->what());
          continue;
        }
        line.fallback_raw = fb->second->response->choices.at(0).text;
        line.prediction =
            detail::parse_label_continuation(*line.fallback_raw, item.q->option_count());
      }
      if (!line.prediction.has_value()) ++stats.parse_failures;
      line.z = reward_z(line.prediction, item.q->answer_index);
      store.append_prediction(line);
      ++stats.completed;
    }
  }
  return stats;
}

// Greedy follow-up verdicts for every in-scope rationale; the per-record
// follow-up reward is appended once all of that record's verdicts exist.
inline StageStats evaluate_followups(RunStore& store, Backend& backend,
                                     const std::vector<MultipleChoiceQuestion>& questions,
                                     FollowupPolicy policy, const TemplateSet& templates,
                                     std::uint64_t seed, std::size_t limit = SIZE_MAX) {
  if (policy == FollowupPolicy::skip)
    throw std::runtime_error("followup policy is 'skip'; nothing to evaluate");
  StageStats stats;
  const auto rationales = store.read_rationales();
  const auto predictions = store.read_predictions();
  auto verdict_data = store.read_verdicts();

  struct RecordScope {
    const MultipleChoiceQuestion* q;
    const RationaleLine* line;
    std::vector<FollowUpQuestion> followups;
  };
  std::vector<RecordScope> scope;
  const auto grouped = detail::group_rationales(rationales);
  for (const auto& q : questions) {
    auto git = grouped.find(q.id);
    if (git == grouped.end()) continue;
    for (const RationaleLine* line : git->second) {
      if (policy == FollowupPolicy::correct_only) {
        auto pred = predictions.find({q.id, line->n});
        if (pred == predictions.end())
          throw std::runtime_error("followup policy 'correct_only' needs predictions; run the "
                                   "predict stage first (missing " +
                                   detail::work_key(q.id, line->n) + ")");
        if (pred->second.z != 1) continue;
      }
      scope.push_back(RecordScope{&q, line, synthesize_followups(q)});
    }
  }

  struct Item {
    const RecordScope* rec;
    int f;
    std::string prompt;
  };
  std::vector<Item> pending;
  for (const auto& rec : scope) {
    for (int f = 0; f < rec.q->option_count(); ++f) {
      if (verdict_data.verdicts.count({rec.q->id, rec.line->n, f})) {
        ++stats.skipped_existing;
        continue;
      }
      PromptExtras extras;
      extras.rationale = rec.line->rationale;
      extras.target_option = f;
      const auto rendered = templates.render(PromptKind::followup_verdict, *rec.q, extras);
      pending.push_back(Item{&rec, f, rendered.text});
    }
  }
  stats.planned = pending.size();
  if (pending.size() > limit) pending.resize(limit);

  auto record_complete = [&](const RecordScope& rec) {
    for (int f = 0; f < rec.q->option_count(); ++f)
      if (!verdict_data.verdicts.count({rec.q->id, rec.line->n, f})) return false;
    return true;
  };
  auto maybe_write_z_tilde = [&](const RecordScope& rec) {
    const std::pair<std::string, int> key{rec.q->id, rec.line->n};
    if (verdict_data.z_tilde.count(key) || !record_complete(rec)) return;
    std::vector<std::optional<bool>> verdicts;
    for (int f = 0; f < rec.q->option_count(); ++f)
      verdicts.push_back(verdict_data.verdicts[{rec.q->id, rec.line->n, f}].verdict);
    const int zt = reward_z_tilde(verdicts, rec.followups);
    store.append_z_tilde(rec.q->id, rec.line->n, zt);
    verdict_data.z_tilde[key] = zt;
  };

  const GenerationConfig greedy = GenerationConfig::greedy_config(kLabelMaxTokens, seed);
  const std::size_t chunk = detail::chunk_size_for(backend);
  for (std::size_t base = 0; base < pending.size(); base += chunk) {
    const std::size_t count = std::min(chunk, pending.size() - base);
    std::vector<CompletionRequest> reqs(count);
    for (std::size_t i = 0; i < count; ++i) {
      reqs[i].prompt = pending[base + i].prompt;
      reqs[i].sampling = greedy;
      reqs[i].num_choices = 1;
      reqs[i].stop_sequences = {"\n"};
    }
    const auto outcomes = backend.complete_batch(reqs);
    stats.backend_calls += count;
    for (std::size_t i = 0; i < count; ++i) {
      const Item& item = pending[base + i];
      if (!outcomes[i].ok()) {
        ++stats.errors;
        store.append_error("evaluate-followups",
                           detail::work_key(item.rec->q->id, item.rec->line->n, item.f),
                           outcomes[i].error->what());
        continue;
      }
      VerdictLine line;
      line.question_id = item.rec->q->id;
      line.n = item.rec->line->n;
      line.option_index = item.f;
      line.raw = outcomes[i].response->choices.at(0).text;
      line.verdict = parse_verdict(line.raw);
      if (!line.verdict.has_value()) ++stats.parse_failures;
      store.append_verdict(line);
      verdict_data.verdicts[{line.question_id, line.n, line.option_index}] = line;
      ++stats.completed;
      maybe_write_z_tilde(*item.rec);
    }
  }

  // Records whose verdicts were already complete but whose reward line was
  // lost to an interruption.
  for (const auto& rec : scope) maybe_write_z_tilde(rec);
  return stats;
}

// Joins the store back into full records, ordered by question then sample.
inline std::vector<RationaleRecord> load_records(const RunStore& store,
                                                 const std::vector<MultipleChoiceQuestion>& questions) {
  const auto rationales = store.read_rationales();
  const auto predictions = store.read_predictions();
  const auto verdict_data = store.read_verdicts();

  std::vector<RationaleRecord> out;
  const auto grouped = detail::group_rationales(rationales);
  for (const auto& q : questions) {
    auto git = grouped.find(q.id);
    if (git == grouped.end()) continue;
    for (const RationaleLine* line_ptr : git->second) {
      const RationaleLine& line = *line_ptr;
      RationaleRecord rec;
      rec.question_id = line.question_id;
      rec.sample_index = line.n;
      rec.rationale_text = line.rationale;
      rec.empty_rationale = line.empty_rationale;
      rec.raw_generation = line.raw;
      auto pred = predictions.find({q.id, line.n});
      if (pred != predictions.end()) {
        rec.has_prediction = true;
        rec.prediction = pred->second.prediction;
        rec.z = pred->second.z;
        rec.raw_prediction = pred->second.raw;
        rec.raw_fallback = pred->second.fallback_raw;
        rec.used_fallback = pred->second.fallback_raw.has_value();
      }
      const int f_count = q.option_count();
      rec.followup_verdicts.assign(static_cast<std::size_t>(f_count), std::nullopt);
      rec.verdict_present.assign(static_cast<std::size_t>(f_count), false);
      rec.raw_verdicts.assign(static_cast<std::size_t>(f_count), std::string());
      for (int f = 0; f < f_count; ++f) {
        auto it = verdict_data.verdicts.find({q.id, line.n, f});
        if (it == verdict_data.verdicts.end()) continue;
        rec.verdict_present[static_cast<std::size_t>(f)] = true;
        rec.followup_verdicts[static_cast<std::size_t>(f)] = it->second.verdict;
        rec.raw_verdicts[static_cast<std::size_t>(f)] = it->second.raw;
      }
      auto zt = verdict_data.z_tilde.find({q.id, line.n});
      if (zt != verdict_data.z_tilde.end()) rec.z_tilde = zt->second;
      out.push_back(std::move(rec));
    }
  }
  return out;
}

// Recomputes both rewards from the stored raw completions and reports any
// disagreement with the stored values.
inline std::vector<std::string> audit_store(const RunStore& store,
                                            const std::vector<MultipleChoiceQuestion>& questions) {
  std::vector<std::string> problems;
  const auto index = detail::question_index(questions);
  const auto records = load_records(store, questions);
  for (const auto& rec : records) {
    auto it = index.find(rec.question_id);
    if (it == index.end()) {
      problems.push_back("record " + rec.question_id + " has no matching question");
      continue;
    }
    const auto& q = *it->second;
    const std::string key = detail::work_key(rec.question_id, rec.sample_index);
    if (rec.has_prediction) {
      const std::string& source = rec.used_fallback ? *rec.raw_fallback : rec.raw_prediction;
      const auto reparsed = detail::parse_label_continuation(source, q.option_count());
      if (reparsed != rec.prediction)
        problems.push_back("prediction mismatch at " + key);
      if (reward_z(reparsed, q.answer_index) != rec.z)
        problems.push_back("z mismatch at " + key);
    }
    if (rec.z_tilde.has_value()) {
      const auto followups = synthesize_followups(q);
      std::vector<std::optional<bool>> verdicts;
      bool complete = true;
      for (int f = 0; f < q.option_count(); ++f) {
        if (!rec.verdict_present[static_cast<std::size_t>(f)]) complete = false;
        verdicts.push_back(parse_verdict(rec.raw_verdicts[static_cast<std::size_t>(f)]));
      }
      if (!complete) {
        problems.push_back("z_tilde present but verdicts incomplete at " + key);
        continue;
      }
      const int zt = reward_z_tilde(verdicts, followups);
      if (zt != *rec.z_tilde) problems.push_back("z_tilde mismatch at " + key);
      if (*rec.z_tilde < 0 || *rec.z_tilde > q.option_count())
        problems.push_back("z_tilde out of bounds at " + key);
    }
  }
  return problems;
}

}  // namespace crest
