// crest: generate rationales for multiple-choice questions, evaluate their
// consistency with follow-up questions, and emit filtered SFT and preference
// datasets. Run `crest --help` for the stage list.

#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "crest/stages.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value
  std::string dataset;
  std::string backend;
  std::string run_dir;
  std::string run_id;
  std::string resume;
  std::optional<std::uint64_t> seed;
  bool dry_run = false;
  std::size_t limit = SIZE_MAX;
};

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void add_common_flags(CLI::App* cmd, CommonArgs& args, bool with_root_seed = true) {
  cmd->add_option("--config", args.config_path, "Config file with flat dotted keys (key = value)");
  cmd->add_option("--set", args.overrides, "Override any config key (repeatable, key=value)");
  cmd->add_option("--dataset", args.dataset, "Dataset path (line-delimited questions)");
  cmd->add_option("--backend", args.backend,
                  "Backend spec: mock:<script>[,seed=N] or http:<base_url>[,model=..,...]");
  cmd->add_option("--run-dir", args.run_dir, "Directory holding run directories (default: runs)");
  cmd->add_option("--run-id", args.run_id, "Run id (default: generated)");
  cmd->add_option("--resume", args.resume, "Resume an existing run id; manifest must match");
  if (with_root_seed) cmd->add_option("--seed", args.seed, "Root seed (run.seed)");
  cmd->add_flag("--dry-run", args.dry_run, "Print planned work without calling the backend");
  cmd->add_option("--limit", args.limit, "Process at most this many work items, then stop");
}

crest::PipelineConfig build_config(const CommonArgs& args) {
  crest::PipelineConfig config;
  if (!args.config_path.empty()) config.apply_file(args.config_path);
  for (const auto& kv : args.overrides) {
    const std::size_t eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("--set expects key=value, got '" + kv + "'");
    config.apply(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!args.dataset.empty()) config.dataset_path = args.dataset;
  if (!args.run_dir.empty()) config.run_dir = args.run_dir;
  if (!args.run_id.empty()) config.run_id = args.run_id;
  if (args.seed) config.root_seed = *args.seed;
  if (!args.backend.empty()) {
    const auto spec = crest::BackendSpec::parse(args.backend);
    if (spec.is_http()) {
      const auto& h = spec.http();
      config.backend_kind = "http";
      config.backend_base_url = h.base_url;
      config.backend_model = h.model_name;
      config.backend_auth_env = h.auth_env_var;
      config.backend_timeout_ms = h.timeout_ms;
      config.backend_max_in_flight = h.max_in_flight;
      config.backend_max_retries = h.max_retries;
      config.backend_backoff_ms = h.retry_backoff_ms;
    } else {
      config.backend_kind = "mock";
      config.backend_script = spec.mock().script_path;
      config.backend_seed = spec.mock().seed;
    }
  }
  return config;
}

crest::StageOptions build_options(const CommonArgs& args) {
  crest::StageOptions opts;
  opts.dry_run = args.dry_run;
  opts.limit = args.limit;
  if (!args.resume.empty()) opts.resume_run_id = args.resume;
  return opts;
}

int dispatch(crest::Stage stage, const CommonArgs& args, const crest::StageOptions& opts) {
  try {
    return crest::run_stage(build_config(args), stage, opts, std::cout);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Self-training data pipeline: rationale generation, follow-up consistency "
               "evaluation, SFT filtering, and preference-pair construction"};
  app.require_subcommand(1);

  struct SubCmd {
    CLI::App* cmd;
    CommonArgs args;
    crest::Stage stage;
  };
  std::vector<std::unique_ptr<SubCmd>> subs;

  auto add_stage = [&](crest::Stage stage, const char* help, bool with_root_seed = true) {
    auto sub = std::make_unique<SubCmd>();
    sub->stage = stage;
    sub->cmd = app.add_subcommand(crest::stage_name(stage), help);
    add_common_flags(sub->cmd, sub->args, with_root_seed);
    subs.push_back(std::move(sub));
    return subs.back().get();
  };

  add_stage(crest::Stage::followups, "Synthesize per-option follow-up questions");
  add_stage(crest::Stage::generate, "Sample N rationales per question");
  add_stage(crest::Stage::predict, "Derive greedy answer predictions and the z reward");
  add_stage(crest::Stage::evaluate_followups,
            "Judge each rationale on its follow-up questions (z_tilde reward)");

  auto* curate = add_stage(crest::Stage::curate, "Filter records and emit the SFT dataset");
  std::optional<int> tolerance;
  curate->cmd->add_option("--tolerance", tolerance,
                          "Tolerance t: keep z=1 records with z_tilde >= F - t");

  auto* pairs = add_stage(crest::Stage::pairs,
                          "Build preference pools and the mixed pair dataset",
                          /*with_root_seed=*/false);
  std::optional<double> lambda;
  std::optional<long long> count;
  std::optional<std::uint64_t> mix_seed;
  std::optional<int> cap;
  pairs->cmd->add_option("--lambda", lambda, "Share of pairs drawn from the z_tilde pool [0,1]");
  pairs->cmd->add_option("--count", count, "Total number of pairs to emit");
  pairs->cmd->add_option("--seed", mix_seed, "Seed for pair selection and shuffling");
  pairs->cmd->add_option("--per-question-cap", cap,
                         "Reservoir-cap candidate pairs per question before pooling");

  add_stage(crest::Stage::stats, "Reward distribution, duplicate rate, and tolerance sweep");

  auto* eval = add_stage(crest::Stage::eval, "Accuracy evaluation (direct, cot, or followup)");
  std::string eval_mode;
  bool strict = true;
  eval->cmd->add_option("--mode", eval_mode, "direct | cot | followup");
  eval->cmd->add_flag("--strict,!--no-strict", strict,
                      "Count backend failures as incorrect (default) or drop them");

  auto* dpo = add_stage(crest::Stage::dpo_check,
                        "Verify an emitted preference dataset under two scoring backends");
  std::string policy_spec, ref_spec, data_path, report_path;
  std::optional<double> beta;
  dpo->cmd->add_option("--policy", policy_spec, "Policy backend spec")->required();
  dpo->cmd->add_option("--ref", ref_spec, "Reference backend spec")->required();
  dpo->cmd->add_option("--data", data_path, "Preference dataset (prompt/chosen/rejected lines)")
      ->required();
  dpo->cmd->add_option("--beta", beta, "Deviation scale (default: dpo.beta, 0.1)");
  dpo->cmd->add_option("--report", report_path, "Report path (default: <data>.dpo_check.json)");

  CLI11_PARSE(app, argc, argv);

  for (const auto& sub : subs) {
    if (!sub->cmd->parsed()) continue;
    auto opts = build_options(sub->args);
    if (sub->stage == crest::Stage::curate && tolerance)
      sub->args.overrides.push_back("curate.tolerance=" + std::to_string(*tolerance));
    if (sub->stage == crest::Stage::pairs) {
      if (lambda) sub->args.overrides.push_back("pairs.lambda=" + format_double(*lambda));
      if (count) sub->args.overrides.push_back("pairs.count=" + std::to_string(*count));
      if (mix_seed) sub->args.overrides.push_back("pairs.seed=" + std::to_string(*mix_seed));
      if (cap) sub->args.overrides.push_back("pairs.per_question_cap=" + std::to_string(*cap));
    }
    if (sub->stage == crest::Stage::eval) {
      if (!eval_mode.empty()) sub->args.overrides.push_back("eval.mode=" + eval_mode);
      sub->args.overrides.push_back(std::string("eval.strict=") + (strict ? "true" : "false"));
    }
    if (sub->stage == crest::Stage::dpo_check) {
      opts.policy_spec = policy_spec;
      opts.ref_spec = ref_spec;
      opts.data_path = data_path;
      opts.beta = beta;
      opts.report_path = report_path;
    }
    return dispatch(sub->stage, sub->args, opts);
  }
  return 1;
}
