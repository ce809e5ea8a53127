#pragma once

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "crest/backend.hpp"
#include "crest/config.hpp"
#include "crest/core.hpp"
#include "crest/curate.hpp"
#include "crest/dpomath.hpp"
#include "crest/pairs.hpp"
#include "crest/pipeline.hpp"
#include "crest/prompt.hpp"
#include "crest/report.hpp"

namespace crest {

enum class Stage {
  followups,
  generate,
  predict,
  evaluate_followups,
  curate,
  pairs,
  stats,
  eval,
  dpo_check,
};

inline const char* stage_name(Stage stage) {
  switch (stage) {
    case Stage::followups: return "followups";
    case Stage::generate: return "generate";
    case Stage::predict: return "predict";
    case Stage::evaluate_followups: return "evaluate-followups";
    case Stage::curate: return "curate";
    case Stage::pairs: return "pairs";
    case Stage::stats: return "stats";
    case Stage::eval: return "eval";
    case Stage::dpo_check: return "dpo-check";
  }
  return "?";
}

struct StageOptions {
  bool dry_run = false;
  std::size_t limit = SIZE_MAX;
  std::optional<std::string> resume_run_id;
  // dpo-check only
  std::string policy_spec;
  std::string ref_spec;
  std::string data_path;
  std::optional<double> beta;
  std::string report_path;
};

// One writer per run directory; held for the duration of a stage.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& run_dir) : path_(run_dir / ".lock") {
    std::filesystem::create_directories(run_dir);
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0)
      throw std::runtime_error("run directory is locked by another stage (remove " + path_.string() +
                               " if that process is gone)");
  }

  ~RunLock() {
    if (fd_ >= 0) {
      ::close(fd_);
      std::error_code ec;
      std::filesystem::remove(path_, ec);
    }
  }

  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
  int fd_ = -1;
};

inline std::string utc_timestamp() {
  const std::time_t now = std::time(nullptr);
  std::tm tm_utc{};
  gmtime_r(&now, &tm_utc);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
  return buf;
}

inline std::string make_default_run_id() {
  const auto ticks = std::chrono::steady_clock::now().time_since_epoch().count();
  const auto wall = std::chrono::system_clock::now().time_since_epoch().count();
  return "run-" + to_hex64(mix64(static_cast<std::uint64_t>(ticks) ^
                                 mix64(static_cast<std::uint64_t>(wall)))).substr(0, 8);
}

namespace detail {

struct StageContext {
  PipelineConfig config;
  std::filesystem::path run_dir;
  std::vector<MultipleChoiceQuestion> questions;
  TemplateSet templates;
  BackendSpec backend_spec;
};

inline RunManifest build_manifest(const StageContext& ctx) {
  RunManifest m;
  m.run_id = ctx.config.run_id;
  m.dataset_path = ctx.config.dataset_path;
  m.dataset_digest = file_digest(ctx.config.dataset_path);
  m.backend_digest = ctx.backend_spec.digest();
  m.templates_digest = to_hex64(ctx.templates.digest());
  m.generation = ctx.config.generation_config();
  m.followup_policy = ctx.config.followup_policy;
  m.created_utc = utc_timestamp();
  return m;
}

// Any stage touching a run directory with a manifest must match it; this is
// what makes --resume safe and config drift loud.
inline void check_manifest(const StageContext& ctx, RunStore& store, bool require_existing) {
  const auto existing = store.read_manifest();
  if (!existing) {
    if (require_existing)
      throw std::runtime_error("--resume given but no manifest found under " +
                               store.dir().string());
    return;
  }
  RunManifest expected = build_manifest(ctx);
  expected.run_id = existing->run_id;
  if (expected.config_digest() != existing->config_digest())
    throw std::runtime_error(
        "config digest mismatch: this run was created with a different dataset, backend, "
        "template, or generation configuration; refusing to resume (run dir " +
        store.dir().string() + ")");
}

inline void require_artifact(const std::filesystem::path& path, const std::string& producer) {
  if (!std::filesystem::exists(path))
    throw std::runtime_error("missing " + path.filename().string() + "; run the " + producer +
                             " stage first");
}

inline std::vector<std::string> load_exemplars(const std::string& path) {
  if (path.empty()) return {};
  const std::string content = read_file(path);
  std::vector<std::string> out;
  std::string current;
  std::size_t pos = 0;
  while (pos <= content.size()) {
    const std::size_t eol = content.find('\n', pos);
    const std::string line =
        content.substr(pos, eol == std::string::npos ? std::string::npos : eol - pos);
    if (trim(line) == "---") {
      if (!trim(current).empty()) out.push_back(rtrim(current));
      current.clear();
    } else {
      current += line;
      current += '\n';
    }
    if (eol == std::string::npos) break;
    pos = eol + 1;
  }
  if (!trim(current).empty()) out.push_back(rtrim(current));
  return out;
}

inline void print_stage_stats(std::ostream& out, const StageStats& stats) {
  out << "planned " << stats.planned << ", already done " << stats.skipped_existing
      << ", completed " << stats.completed << ", backend calls " << stats.backend_calls
      << ", errors " << stats.errors;
  if (stats.parse_failures) out << ", parse failures " << stats.parse_failures;
  if (stats.fallback_queries) out << ", fallback queries " << stats.fallback_queries;
  if (stats.empty_rationales) out << ", empty rationales " << stats.empty_rationales;
  if (stats.duplicate_rationales) out << ", duplicate rationales " << stats.duplicate_rationales;
  out << "\n";
}

inline std::size_t count_pending_generation(const StageContext& ctx, RunStore& store) {
  const auto existing = store.read_rationales();
  std::size_t pending = 0;
  for (const auto& q : ctx.questions)
    for (int n = 0; n < ctx.config.generation.num_samples; ++n)
      if (!existing.count({q.id, n})) ++pending;
  return pending;
}

inline std::size_t count_pending_predictions(RunStore& store) {
  const auto rationales = store.read_rationales();
  const auto predictions = store.read_predictions();
  std::size_t pending = 0;
  for (const auto& [key, line] : rationales)
    if (!predictions.count(key)) ++pending;
  return pending;
}

inline std::size_t count_pending_verdicts(const StageContext& ctx, RunStore& store) {
  const auto rationales = store.read_rationales();
  const auto predictions = store.read_predictions();
  const auto verdicts = store.read_verdicts();
  const auto index = question_index(ctx.questions);
  std::size_t pending = 0;
  for (const auto& [key, line] : rationales) {
    auto qit = index.find(key.first);
    if (qit == index.end()) continue;
    if (ctx.config.followup_policy == FollowupPolicy::correct_only) {
      auto pit = predictions.find(key);
      if (pit == predictions.end() || pit->second.z != 1) continue;
    }
    for (int f = 0; f < qit->second->option_count(); ++f)
      if (!verdicts.verdicts.count({key.first, key.second, f})) ++pending;
  }
  return pending;
}

inline int run_followups(const StageContext& ctx, std::ostream& out, const StageOptions& opts) {
  std::vector<FollowUpQuestion> all;
  for (const auto& q : ctx.questions) {
    const auto fus = synthesize_followups(q);
    all.insert(all.end(), fus.begin(), fus.end());
  }
  if (opts.dry_run) {
    out << "dry run: would write " << all.size() << " follow-up question(s) to followups.jsonl\n";
    return 0;
  }
  write_followups(ctx.run_dir / "followups.jsonl", all);
  out << "wrote " << all.size() << " follow-up question(s) for " << ctx.questions.size()
      << " question(s)\n";
  return 0;
}

inline int run_generate(const StageContext& ctx, RunStore& store, std::ostream& out,
                        const StageOptions& opts) {
  if (opts.dry_run) {
    out << "dry run: would issue " << count_pending_generation(ctx, store)
        << " sampling request(s) (" << ctx.questions.size() << " question(s) x "
        << ctx.config.generation.num_samples << " sample(s), minus completed)\n";
    return 0;
  }
  if (!store.read_manifest()) store.write_manifest(build_manifest(ctx));
  auto backend = make_backend(ctx.backend_spec);
  const auto stats = generate_rationales(store, *backend, ctx.questions,
                                         ctx.config.generation_config(), ctx.templates, opts.limit);
  print_stage_stats(out, stats);
  return stats.errors == 0 ? 0 : 1;
}

inline int run_predict(const StageContext& ctx, RunStore& store, std::ostream& out,
                       const StageOptions& opts) {
  require_artifact(store.rationales_path(), "generate");
  if (opts.dry_run) {
    out << "dry run: would issue " << count_pending_predictions(store)
        << " greedy prediction request(s) (plus one re-query per unparsable completion)\n";
    return 0;
  }
  auto backend = make_backend(ctx.backend_spec);
  const auto stats =
      predict_answers(store, *backend, ctx.questions, ctx.templates,
                      substream_seed(ctx.config.root_seed, "predict"), opts.limit);
  print_stage_stats(out, stats);
  return stats.errors == 0 ? 0 : 1;
}

inline int run_evaluate_followups(const StageContext& ctx, RunStore& store, std::ostream& out,
                                  const StageOptions& opts) {
  require_artifact(store.rationales_path(), "generate");
  if (ctx.config.followup_policy == FollowupPolicy::skip)
    throw std::runtime_error("followups.policy is 'skip'; nothing to evaluate");
  if (ctx.config.followup_policy == FollowupPolicy::correct_only)
    require_artifact(store.predictions_path(), "predict");
  if (opts.dry_run) {
    out << "dry run: would issue " << count_pending_verdicts(ctx, store)
        << " greedy follow-up verdict request(s)\n";
    return 0;
  }
  auto backend = make_backend(ctx.backend_spec);
  const auto stats = evaluate_followups(store, *backend, ctx.questions,
                                        ctx.config.followup_policy, ctx.templates,
                                        substream_seed(ctx.config.root_seed, "followups"),
                                        opts.limit);
  print_stage_stats(out, stats);
  return stats.errors == 0 ? 0 : 1;
}

inline int run_curate(const StageContext& ctx, RunStore& store, std::ostream& out,
                      const StageOptions& opts) {
  if (!ctx.config.tolerance)
    throw std::runtime_error("curate needs a tolerance (flag --tolerance or key curate.tolerance)");
  const int t = *ctx.config.tolerance;
  validate(ToleranceSpec{t});
  require_artifact(store.rationales_path(), "generate");
  require_artifact(store.predictions_path(), "predict");
  int max_f = 0;
  for (const auto& q : ctx.questions) max_f = std::max(max_f, q.option_count());
  if (t < max_f) require_artifact(store.verdicts_path(), "evaluate-followups");

  const auto records = load_records(store, ctx.questions);
  const auto examples = filter_sft(records, ctx.questions, t, ctx.templates);
  const auto path = ctx.run_dir / ("sft_t" + std::to_string(t) + ".jsonl");
  if (opts.dry_run) {
    out << "dry run: tolerance " << t << " keeps " << examples.size() << " of " << records.size()
        << " record(s)\n";
    return 0;
  }
  write_sft(path, examples);
  out << "tolerance " << t << ": kept " << examples.size() << " of " << records.size()
      << " record(s) -> " << path.filename().string() << "\n";
  return 0;
}

inline int run_pairs(const StageContext& ctx, RunStore& store, std::ostream& out,
                     const StageOptions& opts) {
  const MixSpec spec = ctx.config.mix_spec();
  require_artifact(store.rationales_path(), "generate");
  require_artifact(store.predictions_path(), "predict");
  require_artifact(store.verdicts_path(), "evaluate-followups");
  const auto records = load_records(store, ctx.questions);
  const auto pools = build_pools(records, ctx.questions, spec.per_question_cap, spec.seed);
  if (opts.dry_run) {
    out << "dry run: pools hold " << pools.p_z.size() << " z pair(s) and "
        << pools.p_z_tilde.size() << " z_tilde pair(s); would mix " << spec.total_count
        << " pair(s) at lambda " << spec.lambda << "\n";
    return 0;
  }
  const auto mixed = mix_pools(pools, spec);
  write_pool(ctx.run_dir / "pools_z.jsonl", pools.p_z);
  write_pool(ctx.run_dir / "pools_z_tilde.jsonl", pools.p_z_tilde);
  emit_dpo(ctx.run_dir / "dpo.jsonl", mixed.pairs, ctx.questions, ctx.templates);
  out << "pools: " << pools.p_z.size() << " z pair(s), " << pools.p_z_tilde.size()
      << " z_tilde pair(s)\n";
  out << "mixed " << mixed.pairs.size() << " pair(s): " << mixed.target_z_tilde
      << " from z_tilde, " << mixed.target_z << " from z (lambda " << spec.lambda << ", seed "
      << spec.seed << ")\n";
  for (const auto& w : mixed.warnings) out << "warning: " << w << "\n";
  return 0;
}

inline int run_stats(const StageContext& ctx, RunStore& store, std::ostream& out,
                     const StageOptions& opts) {
  require_artifact(store.rationales_path(), "generate");
  require_artifact(store.predictions_path(), "predict");
  const auto records = load_records(store, ctx.questions);
  const auto report = reward_stats(records, ctx.questions);

  int max_f = 0;
  for (const auto& q : ctx.questions) max_f = std::max(max_f, q.option_count());
  bool sweep_possible = true;
  for (const auto& rec : records)
    if (rec.z == 1 && !rec.z_tilde.has_value()) sweep_possible = false;

  std::string text = format_stats_table(report);
  std::map<std::string, std::set<std::string>> texts_by_question;
  std::size_t duplicates = 0;
  for (const auto& rec : records)
    if (!texts_by_question[rec.question_id].insert(rec.rationale_text).second) ++duplicates;
  char buf[128];
  std::snprintf(buf, sizeof(buf), "duplicate rationales: %zu of %zu (%.4f)\n", duplicates,
                records.size(),
                records.empty() ? 0.0
                                : static_cast<double>(duplicates) /
                                      static_cast<double>(records.size()));
  text += buf;

  std::vector<ToleranceSweepRow> sweep;
  if (sweep_possible) {
    std::vector<int> t_values;
    for (int t = 0; t <= max_f; ++t) t_values.push_back(t);
    sweep = tolerance_sweep(records, ctx.questions, t_values);
    text += "tolerance sweep (kept records and fraction of all records)\n";
    for (const auto& row : sweep) {
      std::snprintf(buf, sizeof(buf), "  t=%d  kept=%lld  fraction=%.4f\n", row.t, row.kept_count,
                    row.kept_fraction);
      text += buf;
    }
  } else {
    text += "tolerance sweep skipped: some correct records have no follow-up reward (run the "
            "evaluate-followups stage)\n";
  }

  if (opts.dry_run) {
    out << text;
    return 0;
  }
  atomic_write_file(ctx.run_dir / "stats.txt", text);
  write_stats_jsonl(ctx.run_dir / "stats.jsonl", report);
  if (sweep_possible) {
    std::vector<json> lines;
    for (const auto& row : sweep) {
      json obj;
      obj["t"] = row.t;
      obj["kept_count"] = row.kept_count;
      obj["kept_fraction"] = row.kept_fraction;
      lines.push_back(std::move(obj));
    }
    write_jsonl(ctx.run_dir / "sweep.jsonl", lines);
  }
  out << text;
  return 0;
}

inline int run_eval(const StageContext& ctx, RunStore& store, std::ostream& out,
                    const StageOptions& opts) {
  if (!ctx.config.eval_mode)
    throw std::runtime_error("eval needs a mode (flag --mode direct|cot|followup)");
  const EvalMode mode = *ctx.config.eval_mode;
  if (opts.dry_run) {
    if (mode == EvalMode::followup) {
      const auto records = load_records(store, ctx.questions);
      std::size_t items = 0;
      const auto index = question_index(ctx.questions);
      for (const auto& rec : records) {
        auto it = index.find(rec.question_id);
        if (it != index.end()) items += static_cast<std::size_t>(it->second->option_count());
      }
      out << "dry run: would issue " << items << " follow-up verdict request(s)\n";
    } else {
      out << "dry run: would issue " << ctx.questions.size() << " " << eval_mode_name(mode)
          << " request(s)" << (mode == EvalMode::cot ? " (plus re-queries)" : "") << "\n";
    }
    return 0;
  }
  auto backend = make_backend(ctx.backend_spec);
  EvalReport report;
  if (mode == EvalMode::followup) {
    require_artifact(store.rationales_path(), "generate");
    const auto records = load_records(store, ctx.questions);
    report = evaluate_followup_robustness(*backend, records, ctx.questions, ctx.templates,
                                          substream_seed(ctx.config.root_seed, "eval"),
                                          ctx.config.eval_strict);
  } else {
    report = evaluate_accuracy(*backend, ctx.questions, mode, ctx.templates,
                               ctx.config.generation_config(),
                               load_exemplars(ctx.config.exemplars_path), ctx.config.eval_strict);
  }
  const std::string text = format_eval_report(report);
  const std::string base = std::string("eval_") + eval_mode_name(mode);
  atomic_write_file(ctx.run_dir / (base + ".txt"), text);
  write_eval_detail(ctx.run_dir / (base + "_detail.jsonl"), report);
  out << text;
  return 0;
}

}  // namespace detail

inline Stage stage_from_string(const std::string& s) {
  for (Stage stage : {Stage::followups, Stage::generate, Stage::predict, Stage::evaluate_followups,
                      Stage::curate, Stage::pairs, Stage::stats, Stage::eval, Stage::dpo_check})
    if (s == stage_name(stage)) return stage;
  throw std::runtime_error("unknown stage '" + s + "'");
}

// dpo-check is run-directory independent: it verifies an emitted dataset
// against a pair of scoring backends.
inline int run_dpo_check(const StageOptions& opts, double default_beta, std::ostream& out) {
  if (opts.policy_spec.empty() || opts.ref_spec.empty() || opts.data_path.empty())
    throw std::runtime_error("dpo-check needs --policy, --ref, and --data");
  const double beta = opts.beta.value_or(default_beta);
  if (beta <= 0) throw std::runtime_error("beta must be > 0");
  auto policy = make_backend(BackendSpec::parse(opts.policy_spec));
  auto reference = make_backend(BackendSpec::parse(opts.ref_spec));
  if (opts.dry_run) {
    const auto lines = read_jsonl(opts.data_path);
    out << "dry run: would score " << lines.size() << " pair(s) x 4 log-probability sums\n";
    return 0;
  }
  const auto summary = score_dataset(*policy, *reference, opts.data_path, beta);
  const std::string text = format_dpo_summary(summary);
  const std::string report_path =
      opts.report_path.empty() ? opts.data_path + ".dpo_check.json" : opts.report_path;
  atomic_write_file(report_path, dpo_summary_to_json(summary).dump(2) + "\n");
  out << text;
  out << "report written to " << report_path << "\n";
  return 0;
}

// Entry point shared by the CLI and the end-to-end tests. Validates the
// configuration, acquires the run-directory lock, checks manifest digests,
// and dispatches.
inline int run_stage(PipelineConfig config, Stage stage, const StageOptions& opts,
                     std::ostream& out) {
  if (stage == Stage::dpo_check) return run_dpo_check(opts, config.dpo_beta, out);

  if (opts.resume_run_id) config.run_id = *opts.resume_run_id;
  if (config.run_id.empty()) config.run_id = make_default_run_id();
  if (config.dataset_path.empty())
    throw std::runtime_error("dataset.path is required (flag --dataset)");

  detail::StageContext ctx{config,
                           config.run_directory(),
                           load_dataset(config.dataset_path, config.dataset_format),
                           TemplateSet::from_preset(config.template_preset),
                           config.backend_spec()};

  RunLock lock(ctx.run_dir);
  RunStore store(ctx.run_dir);
  detail::check_manifest(ctx, store, opts.resume_run_id.has_value());

  switch (stage) {
    case Stage::followups: return detail::run_followups(ctx, out, opts);
    case Stage::generate: return detail::run_generate(ctx, store, out, opts);
    case Stage::predict: return detail::run_predict(ctx, store, out, opts);
    case Stage::evaluate_followups: return detail::run_evaluate_followups(ctx, store, out, opts);
    case Stage::curate: return detail::run_curate(ctx, store, out, opts);
    case Stage::pairs: return detail::run_pairs(ctx, store, out, opts);
    case Stage::stats: return detail::run_stats(ctx, store, out, opts);
    case Stage::eval: return detail::run_eval(ctx, store, out, opts);
    case Stage::dpo_check: break;
  }
  return 1;
}

}  // namespace crest
