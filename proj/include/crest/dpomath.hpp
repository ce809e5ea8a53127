#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "crest/backend.hpp"
#include "crest/jsonl.hpp"

namespace crest {

// log(1 + exp(x)) without overflow; exact to double precision over the full
// range the loss sees (|margin| up to 1e4 and far beyond).
inline double stable_softplus(double x) {
  if (x > 0) return x + std::log1p(std::exp(-x));
  return std::log1p(std::exp(x));
}

inline double stable_sigmoid(double x) {
  if (x >= 0) {
    const double t = std::exp(-x);
    return 1.0 / (1.0 + t);
  }
  const double t = std::exp(x);
  return t / (1.0 + t);
}

// Sequence log-probability sums of (rationale, prediction) given the prompt,
// under the trained policy and the frozen reference.
struct DpoPairInput {
  double lp_policy_w = 0.0;
  double lp_ref_w = 0.0;
  double lp_policy_l = 0.0;
  double lp_ref_l = 0.0;
};

struct DpoBatchInput {
  std::vector<DpoPairInput> pairs;
  double beta = 0.1;
};

struct DpoPairResult {
  double reward_w = 0.0;  // beta * (lp_policy - lp_ref), winner side
  double reward_l = 0.0;
  double margin = 0.0;    // reward_w - reward_l
  double loss = 0.0;      // softplus(-margin) == -log sigmoid(margin)
};

struct DpoResult {
  std::vector<DpoPairResult> pairs;
  double mean_loss = 0.0;
  // d(mean loss)/d lp_policy_{w,l}[i]; the reference inputs are constants.
  std::vector<double> grad_lp_policy_w;
  std::vector<double> grad_lp_policy_l;
  std::vector<std::string> warnings;
};

inline DpoResult dpo_eval(const DpoBatchInput& batch) {
  if (batch.beta <= 0.0) throw std::runtime_error("dpo_eval: beta must be > 0");
  if (batch.pairs.empty()) throw std::runtime_error("dpo_eval: empty batch");

  DpoResult out;
  out.pairs.reserve(batch.pairs.size());
  out.grad_lp_policy_w.resize(batch.pairs.size());
  out.grad_lp_policy_l.resize(batch.pairs.size());

  std::size_t positive_lp = 0;
  const double inv_n = 1.0 / static_cast<double>(batch.pairs.size());
  double loss_sum = 0.0;

  for (std::size_t i = 0; i < batch.pairs.size(); ++i) {
    const auto& p = batch.pairs[i];
    for (double v : {p.lp_policy_w, p.lp_ref_w, p.lp_policy_l, p.lp_ref_l}) {
      if (!std::isfinite(v))
        throw std::runtime_error("dpo_eval: non-finite log-probability at pair " + std::to_string(i));
      if (v > 0.0) ++positive_lp;
    }
    DpoPairResult r;
    r.reward_w = batch.beta * (p.lp_policy_w - p.lp_ref_w);
    r.reward_l = batch.beta * (p.lp_policy_l - p.lp_ref_l);
    r.margin = r.reward_w - r.reward_l;
    r.loss = stable_softplus(-r.margin);
    loss_sum += r.loss;

    const double s = stable_sigmoid(-r.margin);  // d loss / d margin = -s
    out.grad_lp_policy_w[i] = -batch.beta * s * inv_n;
    out.grad_lp_policy_l[i] = batch.beta * s * inv_n;
    out.pairs.push_back(r);
  }
  out.mean_loss = loss_sum * inv_n;
  if (positive_lp > 0)
    out.warnings.push_back(std::to_string(positive_lp) +
                           " log-probability input(s) > 0; expected <= 0 for proper "
                           "distributions (length-normalized or scaled inputs can exceed 0)");
  return out;
}

struct MarginHistogramBin {
  double lo = 0.0;
  double hi = 0.0;
  long long count = 0;
};

struct DpoScoreSummary {
  std::size_t pair_count = 0;
  double beta = 0.1;
  double mean_loss = 0.0;
  double mean_margin = 0.0;
  double min_margin = 0.0;
  double max_margin = 0.0;
  std::vector<MarginHistogramBin> histogram;
  std::vector<std::string> warnings;
};

inline std::vector<MarginHistogramBin> margin_histogram(const std::vector<DpoPairResult>& pairs,
                                                        int bins = 12) {
  std::vector<MarginHistogramBin> out;
  if (pairs.empty()) return out;
  double lo = pairs[0].margin, hi = pairs[0].margin;
  for (const auto& p : pairs) {
    lo = std::min(lo, p.margin);
    hi = std::max(hi, p.margin);
  }
  if (hi == lo) hi = lo + 1.0;
  const double width = (hi - lo) / bins;
  out.resize(static_cast<std::size_t>(bins));
  for (int b = 0; b < bins; ++b) {
    out[static_cast<std::size_t>(b)].lo = lo + b * width;
    out[static_cast<std::size_t>(b)].hi = lo + (b + 1) * width;
  }
  for (const auto& p : pairs) {
    int b = static_cast<int>((p.margin - lo) / width);
    if (b >= bins) b = bins - 1;
    if (b < 0) b = 0;
    ++out[static_cast<std::size_t>(b)].count;
  }
  return out;
}

// Scores every line of an emitted preference dataset under two backends and
// evaluates the preference objective on the resulting log-probability sums.
// Both backends are capability-probed before any dataset text is scored.
inline DpoScoreSummary score_dataset(Backend& policy, Backend& reference,
                                     const std::filesystem::path& dpo_file, double beta) {
  struct Line {
    std::string prompt, chosen, rejected;
  };
  std::vector<Line> lines;
  for_each_jsonl(dpo_file, [&](std::size_t lineno, const json& obj) {
    const std::string where = dpo_file.string() + ":" + std::to_string(lineno);
    lines.push_back(Line{require_string(obj, "prompt", where),
                         require_string(obj, "chosen", where),
                         require_string(obj, "rejected", where)});
  });
  if (lines.empty()) throw std::runtime_error("dpo dataset is empty: " + dpo_file.string());

  policy.score_completion("capability probe", " ok");
  reference.score_completion("capability probe", " ok");

  DpoBatchInput batch;
  batch.beta = beta;
  batch.pairs.resize(lines.size());
  const std::size_t workers =
      static_cast<std::size_t>(std::min(policy.max_in_flight(), reference.max_in_flight()));
  std::vector<std::string> failures(lines.size());
  parallel_for(lines.size(), workers, [&](std::size_t i) {
    try {
      const auto& ln = lines[i];
      batch.pairs[i].lp_policy_w = policy.score_completion(ln.prompt, ln.chosen);
      batch.pairs[i].lp_ref_w = reference.score_completion(ln.prompt, ln.chosen);
      batch.pairs[i].lp_policy_l = policy.score_completion(ln.prompt, ln.rejected);
      batch.pairs[i].lp_ref_l = reference.score_completion(ln.prompt, ln.rejected);
    } catch (const std::exception& e) {
      failures[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < failures.size(); ++i)
    if (!failures[i].empty())
      throw std::runtime_error("scoring failed at line " + std::to_string(i + 1) + ": " + failures[i]);

  const DpoResult result = dpo_eval(batch);
  DpoScoreSummary summary;
  summary.pair_count = lines.size();
  summary.beta = beta;
  summary.mean_loss = result.mean_loss;
  summary.warnings = result.warnings;
  double margin_sum = 0.0;
  summary.min_margin = result.pairs[0].margin;
  summary.max_margin = result.pairs[0].margin;
  for (const auto& p : result.pairs) {
    margin_sum += p.margin;
    summary.min_margin = std::min(summary.min_margin, p.margin);
    summary.max_margin = std::max(summary.max_margin, p.margin);
  }
  summary.mean_margin = margin_sum / static_cast<double>(result.pairs.size());
  summary.histogram = margin_histogram(result.pairs);
  return summary;
}

inline json dpo_summary_to_json(const DpoScoreSummary& s) {
  json obj;
  obj["pair_count"] = s.pair_count;
  obj["beta"] = s.beta;
  obj["mean_loss"] = s.mean_loss;
  obj["mean_margin"] = s.mean_margin;
  obj["min_margin"] = s.min_margin;
  obj["max_margin"] = s.max_margin;
  json hist = json::array();
  for (const auto& b : s.histogram) {
    json bin;
    bin["lo"] = b.lo;
    bin["hi"] = b.hi;
    bin["count"] = b.count;
    hist.push_back(std::move(bin));
  }
  obj["margin_histogram"] = std::move(hist);
  obj["warnings"] = s.warnings;
  return obj;
}

inline std::string format_dpo_summary(const DpoScoreSummary& s) {
  char buf[256];
  std::string out;
  std::snprintf(buf, sizeof(buf), "pairs scored : %zu\n", s.pair_count);
  out += buf;
  std::snprintf(buf, sizeof(buf), "beta         : %.6g\n", s.beta);
  out += buf;
  std::snprintf(buf, sizeof(buf), "mean loss    : %.9f\n", s.mean_loss);
  out += buf;
  std::snprintf(buf, sizeof(buf), "mean margin  : %.9f\n", s.mean_margin);
  out += buf;
  std::snprintf(buf, sizeof(buf), "margin range : [%.6f, %.6f]\n", s.min_margin, s.max_margin);
  out += buf;
  out += "margin histogram:\n";
  for (const auto& b : s.histogram) {
    std::snprintf(buf, sizeof(buf), "  [%+10.4f, %+10.4f) %lld\n", b.lo, b.hi,
                  static_cast<long long>(b.count));
    out += buf;
  }
  for (const auto& w : s.warnings) out += "warning: " + w + "\n";
  return out;
}

}  // namespace crest
