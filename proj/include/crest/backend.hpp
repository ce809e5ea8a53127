#pragma once

#include <chrono>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "crest/core.hpp"
#include "crest/util.hpp"

namespace crest {

enum class BackendErrorKind {
  backend_unavailable,  // transport failure or 5xx after all retries
  protocol_error,       // malformed or non-retryable response
  timeout,              // per-request timeout exhausted the retry budget
  unsupported,          // backend lacks a required capability (logprob scoring)
  invalid_request,
};

inline const char* backend_error_kind_name(BackendErrorKind k) {
  switch (k) {
    case BackendErrorKind::backend_unavailable: return "backend_unavailable";
    case BackendErrorKind::protocol_error: return "protocol_error";
    case BackendErrorKind::timeout: return "timeout";
    case BackendErrorKind::unsupported: return "unsupported";
    case BackendErrorKind::invalid_request: return "invalid_request";
  }
  return "?";
}

class BackendError : public std::runtime_error {
 public:
  BackendError(BackendErrorKind kind, const std::string& message,
               std::vector<std::string> attempts = {})
      : std::runtime_error(std::string(backend_error_kind_name(kind)) + ": " + message),
        kind_(kind),
        attempts_(std::move(attempts)) {}

  BackendErrorKind kind() const { return kind_; }
  const std::vector<std::string>& attempts() const { return attempts_; }

 private:
  BackendErrorKind kind_;
  std::vector<std::string> attempts_;
};

struct CompletionChoice {
  std::string text;
  std::string finish_reason = "stop";  // "stop" or "length"
  std::optional<double> token_logprob_sum;
};

struct TokenUsage {
  long long prompt_tokens = 0;
  long long completion_tokens = 0;
};

struct CompletionResponse {
  std::vector<CompletionChoice> choices;
  TokenUsage usage;
};

struct CompletionRequest {
  std::string prompt;
  GenerationConfig sampling;  // temperature 0 == greedy
  int num_choices = 1;
  std::vector<std::string> stop_sequences;
  bool want_logprobs = false;
  // Tags a single-choice sampled request with its sample index so repeated
  // draws of the same prompt stay distinguishable (mock script key; folded
  // into the wire seed for HTTP backends).
  int choice_offset = 0;
};

inline void validate(const CompletionRequest& req) {
  validate(req.sampling, "completion request");
  if (req.num_choices < 1)
    throw BackendError(BackendErrorKind::invalid_request, "num_choices must be >= 1");
  if (req.sampling.greedy() && req.num_choices != 1)
    throw BackendError(BackendErrorKind::invalid_request,
                       "greedy requests must ask for exactly one choice");
  if (req.prompt.empty())
    throw BackendError(BackendErrorKind::invalid_request, "empty prompt");
}

struct HttpBackendSpec {
  std::string base_url;            // e.g. http://localhost:8000/v1
  std::string model_name;
  std::string auth_env_var;        // empty: no Authorization header
  int timeout_ms = 60000;
  int max_in_flight = 8;
  int max_retries = 2;
  int retry_backoff_ms = 250;      // doubles per attempt
};

struct MockBackendSpec {
  std::string script_path;  // empty: fallback generator only
  std::uint64_t seed = 0;
};

struct BackendSpec {
  std::variant<HttpBackendSpec, MockBackendSpec> value = MockBackendSpec{};

  bool is_http() const { return std::holds_alternative<HttpBackendSpec>(value); }
  const HttpBackendSpec& http() const { return std::get<HttpBackendSpec>(value); }
  const MockBackendSpec& mock() const { return std::get<MockBackendSpec>(value); }

  // Canonical one-line form, also accepted by parse(). Used for manifest
  // digests, so field order is fixed.
  std::string canonical() const {
    if (is_http()) {
      const auto& h = http();
      return "http:" + h.base_url + ",model=" + h.model_name + ",auth_env=" + h.auth_env_var +
             ",timeout_ms=" + std::to_string(h.timeout_ms) +
             ",max_in_flight=" + std::to_string(h.max_in_flight) +
             ",max_retries=" + std::to_string(h.max_retries) +
             ",backoff_ms=" + std::to_string(h.retry_backoff_ms);
    }
    const auto& m = mock();
    return "mock:" + m.script_path + ",seed=" + std::to_string(m.seed);
  }

  std::string digest() const { return to_hex64(fnv1a64(canonical())); }

  // "mock:<script_path>[,seed=N]" or
  // "http:<base_url>[,model=..][,auth_env=..][,timeout_ms=..][,max_in_flight=..]
  //  [,max_retries=..][,backoff_ms=..]"
  static BackendSpec parse(const std::string& text) {
    const std::size_t colon = text.find(':');
    if (colon == std::string::npos)
      throw std::runtime_error("backend spec '" + text + "' must start with mock: or http:");
    const std::string kind = text.substr(0, colon);
    std::string rest = text.substr(colon + 1);

    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
      std::size_t comma = rest.find(',', start);
      parts.push_back(rest.substr(start, comma == std::string::npos ? std::string::npos
                                                                    : comma - start));
      if (comma == std::string::npos) break;
      start = comma + 1;
    }

    auto kv = [&](const std::string& part) {
      std::size_t eq = part.find('=');
      if (eq == std::string::npos)
        throw std::runtime_error("backend spec option '" + part + "' must be key=value");
      return std::pair<std::string, std::string>(part.substr(0, eq), part.substr(eq + 1));
    };

    BackendSpec spec;
    if (kind == "mock") {
      MockBackendSpec m;
      m.script_path = parts[0];
      for (std::size_t i = 1; i < parts.size(); ++i) {
        auto [k, v] = kv(parts[i]);
        if (k == "seed") m.seed = std::stoull(v);
        else throw std::runtime_error("unknown mock backend option '" + k + "'");
      }
      spec.value = m;
    } else if (kind == "http") {
      HttpBackendSpec h;
      h.base_url = parts[0];
      if (h.base_url.empty()) throw std::runtime_error("http backend spec needs a base URL");
      for (std::size_t i = 1; i < parts.size(); ++i) {
        auto [k, v] = kv(parts[i]);
        if (k == "model") h.model_name = v;
        else if (k == "auth_env") h.auth_env_var = v;
        else if (k == "timeout_ms") h.timeout_ms = std::stoi(v);
        else if (k == "max_in_flight") h.max_in_flight = std::stoi(v);
        else if (k == "max_retries") h.max_retries = std::stoi(v);
        else if (k == "backoff_ms") h.retry_backoff_ms = std::stoi(v);
        else throw std::runtime_error("unknown http backend option '" + k + "'");
      }
      if (h.max_in_flight < 1) throw std::runtime_error("max_in_flight must be >= 1");
      spec.value = h;
    } else {
      throw std::runtime_error("unknown backend kind '" + kind + "' (expected mock or http)");
    }
    return spec;
  }
};

inline std::uint64_t prompt_fingerprint(std::string_view prompt) { return fnv1a64(prompt); }

inline std::string prompt_fingerprint_hex(std::string_view prompt) {
  return to_hex64(prompt_fingerprint(prompt));
}

struct CompletionOutcome {
  std::optional<CompletionResponse> response;
  std::optional<BackendError> error;

  bool ok() const { return response.has_value(); }
  const CompletionResponse& value() const {
    if (!response) throw *error;
    return *response;
  }
};

// Uniform inference surface. Implementations are safe for concurrent
// complete()/score_completion() calls; complete_batch() keeps at most
// max_in_flight requests outstanding and returns results in request order.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual CompletionResponse complete(const CompletionRequest& req) = 0;

  // Sum of token log-probabilities (natural log) of `completion` given
  // `prompt`. Throws BackendErrorKind::unsupported when the backend cannot
  // score fixed text.
  virtual double score_completion(const std::string& prompt, const std::string& completion) = 0;

  virtual int max_in_flight() const = 0;

  std::vector<CompletionOutcome> complete_batch(std::span<const CompletionRequest> reqs) {
    if (reqs.empty())
      throw BackendError(BackendErrorKind::invalid_request, "complete_batch needs at least one request");
    std::vector<CompletionOutcome> results(reqs.size());
    parallel_for(reqs.size(), static_cast<std::size_t>(max_in_flight()), [&](std::size_t i) {
      try {
        results[i].response = complete(reqs[i]);
      } catch (const BackendError& e) {
        results[i].error = e;
      } catch (const std::exception& e) {
        results[i].error = BackendError(BackendErrorKind::protocol_error, e.what());
      }
    });
    return results;
  }
};

// Client for de-facto completions endpoints (text-completion form). Scoring
// uses the echo channel: the full text is sent with max_tokens=0 and token
// logprobs on, and the completion region is summed by text offset.
class HttpBackend : public Backend {
 public:
  explicit HttpBackend(HttpBackendSpec spec) : spec_(std::move(spec)) {
    parse_base_url();
    if (!spec_.auth_env_var.empty()) {
      const char* token = std::getenv(spec_.auth_env_var.c_str());
      if (token == nullptr || *token == '\0')
        throw BackendError(BackendErrorKind::invalid_request,
                           "auth environment variable " + spec_.auth_env_var + " is not set");
      auth_token_ = token;
    }
  }

  CompletionResponse complete(const CompletionRequest& req) override {
    validate(req);
    json body;
    body["model"] = spec_.model_name;
    body["prompt"] = req.prompt;
    body["max_tokens"] = req.sampling.max_new_tokens;
    body["n"] = req.num_choices;
    body["temperature"] = req.sampling.temperature;
    body["top_p"] = req.sampling.top_p;
    body["seed"] = static_cast<std::int64_t>(req.sampling.seed) + req.choice_offset;
    if (!req.stop_sequences.empty()) body["stop"] = req.stop_sequences;
    if (req.want_logprobs) body["logprobs"] = 0;

    const json resp = post_with_retries(body);
    return parse_completion_response(resp, req);
  }

  double score_completion(const std::string& prompt, const std::string& completion) override {
    json body;
    body["model"] = spec_.model_name;
    body["prompt"] = prompt + completion;
    body["max_tokens"] = 0;
    body["n"] = 1;
    body["temperature"] = 0.0;
    body["echo"] = true;
    body["logprobs"] = 0;

    const json resp = post_with_retries(body);
    if (!resp.contains("choices") || !resp["choices"].is_array() || resp["choices"].empty())
      throw BackendError(BackendErrorKind::protocol_error, "scoring response has no choices");
    const json& choice = resp["choices"][0];
    if (!choice.contains("logprobs") || choice["logprobs"].is_null())
      throw BackendError(BackendErrorKind::unsupported,
                         "backend did not return token logprobs; cannot score completions");
    const json& lp = choice["logprobs"];
    if (!lp.contains("token_logprobs") || !lp.contains("text_offset"))
      throw BackendError(BackendErrorKind::protocol_error,
                         "scoring response lacks token_logprobs/text_offset");
    const json& probs = lp["token_logprobs"];
    const json& offsets = lp["text_offset"];
    if (probs.size() != offsets.size())
      throw BackendError(BackendErrorKind::protocol_error,
                         "token_logprobs and text_offset lengths differ");
    double sum = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (offsets[i].get<long long>() < static_cast<long long>(prompt.size())) continue;
      if (probs[i].is_null()) continue;  // servers report null for the first token
      sum += probs[i].get<double>();
    }
    return sum;
  }

  int max_in_flight() const override { return spec_.max_in_flight; }

 private:
  void parse_base_url() {
    std::string url = spec_.base_url;
    std::size_t scheme_end = url.find("://");
    if (scheme_end == std::string::npos)
      throw BackendError(BackendErrorKind::invalid_request,
                         "base URL must include a scheme: " + url);
    std::size_t path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) {
      host_ = url;
      path_prefix_ = "/v1";
    } else {
      host_ = url.substr(0, path_start);
      path_prefix_ = rtrim(url.substr(path_start));
      while (!path_prefix_.empty() && path_prefix_.back() == '/') path_prefix_.pop_back();
      if (path_prefix_.empty()) path_prefix_ = "/v1";
    }
  }

  httplib::Client make_client() const {
    httplib::Client cli(host_);
    cli.set_connection_timeout(0, spec_.timeout_ms * 1000LL);
    cli.set_read_timeout(spec_.timeout_ms / 1000, (spec_.timeout_ms % 1000) * 1000);
    cli.set_write_timeout(spec_.timeout_ms / 1000, (spec_.timeout_ms % 1000) * 1000);
    return cli;
  }

  json post_with_retries(const json& body) {
    const std::string path = path_prefix_ + "/completions";
    const std::string payload = body.dump();
    std::vector<std::string> attempts;
    bool last_was_timeout = false;

    for (int attempt = 0; attempt <= spec_.max_retries; ++attempt) {
      if (attempt > 0) {
        const auto delay = std::chrono::milliseconds(
            static_cast<long long>(spec_.retry_backoff_ms) << (attempt - 1));
        std::this_thread::sleep_for(delay);
      }
      httplib::Client cli = make_client();
      httplib::Headers headers;
      if (!auth_token_.empty()) headers.emplace("Authorization", "Bearer " + auth_token_);
      auto result = cli.Post(path, headers, payload, "application/json");

      if (!result) {
        const auto err = result.error();
        last_was_timeout = err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read ||
                           err == httplib::Error::Write;
        attempts.push_back("attempt " + std::to_string(attempt + 1) + ": transport error " +
                           httplib::to_string(err));
        continue;
      }
      if (result->status >= 500 || result->status == 429) {
        last_was_timeout = false;
        attempts.push_back("attempt " + std::to_string(attempt + 1) + ": HTTP " +
                           std::to_string(result->status));
        continue;
      }
      if (result->status < 200 || result->status >= 300) {
        throw BackendError(BackendErrorKind::protocol_error,
                           "HTTP " + std::to_string(result->status) + " from " + path + ": " +
                               result->body.substr(0, 200),
                           attempts);
      }
      try {
        return json::parse(result->body);
      } catch (const json::parse_error& e) {
        throw BackendError(BackendErrorKind::protocol_error,
                           std::string("response is not valid JSON: ") + e.what(), attempts);
      }
    }
    const auto kind =
        last_was_timeout ? BackendErrorKind::timeout : BackendErrorKind::backend_unavailable;
    throw BackendError(kind,
                       "request failed after " + std::to_string(spec_.max_retries + 1) +
                           " attempt(s) to " + host_ + path,
                       attempts);
  }

  CompletionResponse parse_completion_response(const json& resp, const CompletionRequest& req) const {
    if (!resp.contains("choices") || !resp["choices"].is_array())
      throw BackendError(BackendErrorKind::protocol_error, "response has no choices array");
    CompletionResponse out;
    for (const auto& c : resp["choices"]) {
      CompletionChoice choice;
      if (!c.contains("text") || !c["text"].is_string())
        throw BackendError(BackendErrorKind::protocol_error, "choice has no text field");
      choice.text = c["text"].get<std::string>();
      if (c.contains("finish_reason") && c["finish_reason"].is_string())
        choice.finish_reason = c["finish_reason"].get<std::string>();
      if (req.want_logprobs && c.contains("logprobs") && !c["logprobs"].is_null() &&
          c["logprobs"].contains("token_logprobs")) {
        double sum = 0.0;
        for (const auto& p : c["logprobs"]["token_logprobs"])
          if (!p.is_null()) sum += p.get<double>();
        choice.token_logprob_sum = sum;
      }
      out.choices.push_back(std::move(choice));
    }
    if (static_cast<int>(out.choices.size()) != req.num_choices)
      throw BackendError(BackendErrorKind::protocol_error,
                         "expected " + std::to_string(req.num_choices) + " choices, got " +
                             std::to_string(out.choices.size()));
    if (resp.contains("usage")) {
      const auto& u = resp["usage"];
      if (u.contains("prompt_tokens")) out.usage.prompt_tokens = u["prompt_tokens"].get<long long>();
      if (u.contains("completion_tokens"))
        out.usage.completion_tokens = u["completion_tokens"].get<long long>();
    }
    return out;
  }

  HttpBackendSpec spec_;
  std::string host_;
  std::string path_prefix_;
  std::string auth_token_;
};

// Deterministic scripted substitute. Script lines pin exact completions per
// (prompt fingerprint, choice index); anything unscripted falls back to a
// seeded generator keyed by the same pair, so identical runs are
// byte-identical. Scoring looks up fingerprint(prompt + completion).
class MockBackend : public Backend {
 public:
  explicit MockBackend(MockBackendSpec spec) : spec_(std::move(spec)) {
    if (!spec_.script_path.empty()) load_script();
  }

  CompletionResponse complete(const CompletionRequest& req) override {
    validate(req);
    const std::uint64_t fp = prompt_fingerprint(req.prompt);
    CompletionResponse out;
    for (int i = 0; i < req.num_choices; ++i) {
      const int key = req.choice_offset + i;
      auto it = script_.find({fp, key});
      CompletionChoice choice;
      if (it != script_.end()) {
        choice.text = it->second.text;
        choice.finish_reason = it->second.finish_reason;
        if (req.want_logprobs) choice.token_logprob_sum = it->second.logprob_sum;
      } else {
        choice.text = fallback_text(req, fp, key);
        if (req.want_logprobs) choice.token_logprob_sum = fallback_logprob(fp, key);
      }
      out.choices.push_back(std::move(choice));
    }
    out.usage.prompt_tokens = static_cast<long long>(req.prompt.size() / 4 + 1);
    for (const auto& c : out.choices)
      out.usage.completion_tokens += static_cast<long long>(c.text.size() / 4 + 1);
    return out;
  }

  double score_completion(const std::string& prompt, const std::string& completion) override {
    const std::uint64_t fp = prompt_fingerprint(prompt + completion);
    auto it = script_.find({fp, 0});
    if (it != script_.end() && it->second.logprob_sum.has_value()) return *it->second.logprob_sum;
    return fallback_logprob(fp, 0).value();
  }

  int max_in_flight() const override { return 1; }

 private:
  struct ScriptEntry {
    std::string text;
    std::string finish_reason = "stop";
    std::optional<double> logprob_sum;
  };

  void load_script() {
    for_each_jsonl(spec_.script_path, [&](std::size_t lineno, const json& obj) {
      const std::string where = spec_.script_path + ":" + std::to_string(lineno);
      const std::string fp_hex = require_string(obj, "fingerprint", where);
      const std::uint64_t fp = std::stoull(fp_hex, nullptr, 16);
      const int choice = obj.value("choice_index", 0);
      ScriptEntry entry;
      entry.text = obj.value("text", std::string());
      entry.finish_reason = obj.value("finish_reason", std::string("stop"));
      if (obj.contains("logprob_sum") && !obj["logprob_sum"].is_null())
        entry.logprob_sum = obj["logprob_sum"].get<double>();
      script_[{fp, choice}] = std::move(entry);
    });
  }

  std::uint64_t key_hash(std::uint64_t fp, int key) const {
    return mix64(fp ^ mix64(spec_.seed + 0x632be59bd9b4e019ull) ^
                 (static_cast<std::uint64_t>(key) * 0x9e3779b97f4a7c15ull));
  }

  // Shaped by the prompt's trailing cue so unscripted end-to-end runs still
  // produce parseable labels and verdicts.
  std::string fallback_text(const CompletionRequest& req, std::uint64_t fp, int key) const {
    const std::uint64_t h = key_hash(fp, key);
    const std::string lower = to_lower(req.prompt);
    if (ends_with(lower, "answer is")) {
      return std::string(" ") + option_letter(static_cast<int>(h % 4)) + ".";
    }
    if (ends_with(lower, " is")) {
      return (h & 1) ? " the correct answer." : " not the correct answer.";
    }
    const char letter = option_letter(static_cast<int>(h % 4));
    return "\nConsidering each option in turn (trace " + to_hex64(h).substr(0, 8) +
           "), the evidence points one way.\n\n[Answer]\nTherefore, the answer is " +
           std::string(1, letter) + ".";
  }

  std::optional<double> fallback_logprob(std::uint64_t fp, int key) const {
    const std::uint64_t h = key_hash(fp, key ^ 0x5bf0);
    return -(1.0 + static_cast<double>(h % 4000) / 100.0);
  }

  MockBackendSpec spec_;
  std::map<std::pair<std::uint64_t, int>, ScriptEntry> script_;
};

inline std::unique_ptr<Backend> make_backend(const BackendSpec& spec) {
  if (spec.is_http()) return std::make_unique<HttpBackend>(spec.http());
  return std::make_unique<MockBackend>(spec.mock());
}

}  // namespace crest
