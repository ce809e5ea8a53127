#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "crest/backend.hpp"
#include "crest/core.hpp"
#include "crest/pairs.hpp"
#include "crest/pipeline.hpp"
#include "crest/report.hpp"
#include "crest/util.hpp"

namespace crest {

// The full knob surface, loaded from a flat dotted-key config file and
// overridable key-by-key from the command line (flags win). One root seed is
// split into named substreams so every stage is independently reproducible.
struct PipelineConfig {
  std::string dataset_path;
  DatasetFormat dataset_format = DatasetFormat::jsonl;
  std::string template_preset = "default";

  std::string backend_kind = "mock";  // mock | http
  std::string backend_base_url;
  std::string backend_model;
  std::string backend_auth_env;
  int backend_timeout_ms = 60000;
  int backend_max_in_flight = 8;
  int backend_max_retries = 2;
  int backend_backoff_ms = 250;
  std::string backend_script;
  std::optional<std::uint64_t> backend_seed;

  GenerationConfig generation;  // seed is derived from run.seed at use time
  FollowupPolicy followup_policy = FollowupPolicy::all;

  std::optional<int> tolerance;

  std::optional<double> pairs_lambda;
  std::optional<long long> pairs_count;
  std::optional<std::uint64_t> pairs_seed;
  std::optional<int> per_question_cap;

  double dpo_beta = 0.1;

  std::string run_dir = "runs";
  std::string run_id;
  std::uint64_t root_seed = 0;

  std::optional<EvalMode> eval_mode;
  bool eval_strict = true;
  std::string exemplars_path;

  void apply(const std::string& key, const std::string& value) {
    auto as_int = [&](const char* what) {
      try {
        return std::stoi(value);
      } catch (...) {
        throw std::runtime_error(std::string("config key ") + what + ": '" + value +
                                 "' is not an integer");
      }
    };
    auto as_ll = [&](const char* what) {
      try {
        return std::stoll(value);
      } catch (...) {
        throw std::runtime_error(std::string("config key ") + what + ": '" + value +
                                 "' is not an integer");
      }
    };
    auto as_u64 = [&](const char* what) {
      try {
        return std::stoull(value);
      } catch (...) {
        throw std::runtime_error(std::string("config key ") + what + ": '" + value +
                                 "' is not an unsigned integer");
      }
    };
    auto as_double = [&](const char* what) {
      try {
        return std::stod(value);
      } catch (...) {
        throw std::runtime_error(std::string("config key ") + what + ": '" + value +
                                 "' is not a number");
      }
    };
    auto as_bool = [&](const char* what) {
      if (value == "true" || value == "1" || value == "yes") return true;
      if (value == "false" || value == "0" || value == "no") return false;
      throw std::runtime_error(std::string("config key ") + what + ": '" + value +
                               "' is not a boolean");
    };

    if (key == "dataset.path") dataset_path = value;
    else if (key == "dataset.format") dataset_format = dataset_format_from_string(value);
    else if (key == "templates.preset") template_preset = value;
    else if (key == "backend.kind") backend_kind = value;
    else if (key == "backend.base_url") backend_base_url = value;
    else if (key == "backend.model") backend_model = value;
    else if (key == "backend.auth_env") backend_auth_env = value;
    else if (key == "backend.timeout_ms") backend_timeout_ms = as_int("backend.timeout_ms");
    else if (key == "backend.max_in_flight") backend_max_in_flight = as_int("backend.max_in_flight");
    else if (key == "backend.max_retries") backend_max_retries = as_int("backend.max_retries");
    else if (key == "backend.backoff_ms") backend_backoff_ms = as_int("backend.backoff_ms");
    else if (key == "backend.script") backend_script = value;
    else if (key == "backend.seed") backend_seed = as_u64("backend.seed");
    else if (key == "generation.temperature") generation.temperature = as_double("generation.temperature");
    else if (key == "generation.top_p") generation.top_p = as_double("generation.top_p");
    else if (key == "generation.num_samples") generation.num_samples = as_int("generation.num_samples");
    else if (key == "generation.max_new_tokens") generation.max_new_tokens = as_int("generation.max_new_tokens");
    else if (key == "followups.policy") followup_policy = followup_policy_from_string(value);
    else if (key == "curate.tolerance") tolerance = as_int("curate.tolerance");
    else if (key == "pairs.lambda") pairs_lambda = as_double("pairs.lambda");
    else if (key == "pairs.count") pairs_count = as_ll("pairs.count");
    else if (key == "pairs.seed") pairs_seed = as_u64("pairs.seed");
    else if (key == "pairs.per_question_cap") per_question_cap = as_int("pairs.per_question_cap");
    else if (key == "dpo.beta") dpo_beta = as_double("dpo.beta");
    else if (key == "run.dir") run_dir = value;
    else if (key == "run.id") run_id = value;
    else if (key == "run.seed") root_seed = as_u64("run.seed");
    else if (key == "eval.mode") eval_mode = eval_mode_from_string(value);
    else if (key == "eval.strict") eval_strict = as_bool("eval.strict");
    else if (key == "eval.exemplars_path") exemplars_path = value;
    else throw std::runtime_error("unknown config key '" + key + "'");
  }

  // Lines of "key = value"; '#' starts a comment.
  static PipelineConfig from_file(const std::filesystem::path& path) {
    PipelineConfig config;
    config.apply_file(path);
    return config;
  }

  void apply_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path.string());
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const std::size_t hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      const std::string stripped = trim(line);
      if (stripped.empty()) continue;
      const std::size_t eq = stripped.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error(path.string() + ":" + std::to_string(lineno) +
                                 ": expected 'key = value'");
      try {
        apply(trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
      } catch (const std::exception& e) {
        throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  BackendSpec backend_spec() const {
    BackendSpec spec;
    if (backend_kind == "mock") {
      MockBackendSpec m;
      m.script_path = backend_script;
      m.seed = backend_seed.value_or(substream_seed(root_seed, "mock-backend"));
      spec.value = m;
    } else if (backend_kind == "http") {
      if (backend_base_url.empty())
        throw std::runtime_error("backend.kind is http but backend.base_url is not set");
      HttpBackendSpec h;
      h.base_url = backend_base_url;
      h.model_name = backend_model;
      h.auth_env_var = backend_auth_env;
      h.timeout_ms = backend_timeout_ms;
      h.max_in_flight = backend_max_in_flight;
      h.max_retries = backend_max_retries;
      h.retry_backoff_ms = backend_backoff_ms;
      spec.value = h;
    } else {
      throw std::runtime_error("unknown backend.kind '" + backend_kind + "' (mock|http)");
    }
    return spec;
  }

  GenerationConfig generation_config() const {
    GenerationConfig cfg = generation;
    cfg.seed = substream_seed(root_seed, "generation");
    validate(cfg);
    return cfg;
  }

  MixSpec mix_spec() const {
    if (!pairs_lambda) throw std::runtime_error("pairs.lambda is required (flag --lambda)");
    if (!pairs_count) throw std::runtime_error("pairs.count is required (flag --count)");
    MixSpec spec;
    spec.lambda = *pairs_lambda;
    spec.total_count = *pairs_count;
    spec.seed = pairs_seed.value_or(substream_seed(root_seed, "mixing"));
    spec.per_question_cap = per_question_cap;
    validate(spec);
    return spec;
  }

  std::filesystem::path run_directory() const {
    if (run_id.empty()) throw std::runtime_error("run id not set");
    return std::filesystem::path(run_dir) / run_id;
  }
};

}  // namespace crest
