#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "crest/core.hpp"
#include "crest/curate.hpp"
#include "crest/jsonl.hpp"
#include "crest/prompt.hpp"
#include "crest/util.hpp"

namespace crest {

enum class PairPool { z, z_tilde };

inline const char* pair_pool_name(PairPool pool) {
  return pool == PairPool::z ? "z" : "z_tilde";
}

struct PairSide {
  int sample_index = 0;
  std::string rationale_text;
  std::optional<int> prediction;
  std::string raw_prediction;  // used for the scaffold when unparsable
  int z = 0;
  std::optional<int> z_tilde;
};

// Ordered preference between two rationales of the same question.
struct PreferencePair {
  std::string question_id;
  PairSide winner;
  PairSide loser;
  PairPool pool = PairPool::z;
};

struct MixSpec {
  double lambda = 0.5;       // share of the mixture drawn from the z_tilde pool
  long long total_count = 0;
  std::uint64_t seed = 0;
  std::optional<int> per_question_cap;
};

inline void validate(const MixSpec& spec) {
  if (!(spec.lambda >= 0.0 && spec.lambda <= 1.0))
    throw std::runtime_error("lambda must be in [0,1]");
  if (spec.total_count <= 0) throw std::runtime_error("pair count must be positive");
  if (spec.per_question_cap && *spec.per_question_cap <= 0)
    throw std::runtime_error("per-question cap must be positive");
}

inline long long round_half_up(double x) {
  return static_cast<long long>(std::floor(x + 0.5));
}

struct PreferencePools {
  std::vector<PreferencePair> p_z;
  std::vector<PreferencePair> p_z_tilde;
};

namespace detail {

inline PairSide side_from_record(const RationaleRecord& rec) {
  PairSide s;
  s.sample_index = rec.sample_index;
  s.rationale_text = rec.rationale_text;
  s.prediction = rec.prediction;
  s.raw_prediction = rec.raw_fallback.value_or(rec.raw_prediction);
  s.z = rec.z;
  s.z_tilde = rec.z_tilde;
  return s;
}

// Reservoir sampling (Algorithm R); survivors keep their stream order.
inline void cap_pool(std::vector<PreferencePair>& pool, std::size_t offset, int cap, Rng& rng) {
  const std::size_t n = pool.size() - offset;
  if (n <= static_cast<std::size_t>(cap)) return;
  std::vector<std::size_t> keep(static_cast<std::size_t>(cap));
  for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = i;
  for (std::size_t i = keep.size(); i < n; ++i) {
    const std::uint64_t j = rng.below(i + 1);
    if (j < keep.size()) keep[static_cast<std::size_t>(j)] = i;
  }
  std::sort(keep.begin(), keep.end());
  std::vector<PreferencePair> kept;
  kept.reserve(keep.size());
  for (std::size_t idx : keep) kept.push_back(std::move(pool[offset + idx]));
  pool.resize(offset);
  for (auto& p : kept) pool.push_back(std::move(p));
}

}  // namespace detail

// Builds both preference pools by comparing every ordered pair of rationales
// within a question: winner z=1 vs loser z=0 goes to the z pool; two correct
// rationales with strictly ordered follow-up rewards go to the z_tilde pool.
// Output order is deterministic: question order, then winner index, then
// loser index.
inline PreferencePools build_pools(const std::vector<RationaleRecord>& records,
                                   const std::vector<MultipleChoiceQuestion>& questions,
                                   std::optional<int> per_question_cap = std::nullopt,
                                   std::uint64_t cap_seed = 0) {
  PreferencePools pools;
  std::map<std::string, std::vector<const RationaleRecord*>> grouped;
  for (const auto& rec : records) grouped[rec.question_id].push_back(&rec);
  for (std::size_t qi = 0; qi < questions.size(); ++qi) {
    const auto& q = questions[qi];
    auto git = grouped.find(q.id);
    std::vector<const RationaleRecord*> recs =
        git == grouped.end() ? std::vector<const RationaleRecord*>{} : git->second;
    std::sort(recs.begin(), recs.end(), [](const RationaleRecord* a, const RationaleRecord* b) {
      return a->sample_index < b->sample_index;
    });

    const std::size_t z_offset = pools.p_z.size();
    const std::size_t zt_offset = pools.p_z_tilde.size();
    for (const RationaleRecord* w : recs) {
      if (!w->has_prediction)
        throw std::runtime_error("record " + w->question_id + "#" +
                                 std::to_string(w->sample_index) +
                                 " has no prediction; run the predict stage first");
      for (const RationaleRecord* l : recs) {
        if (w->z == 1 && l->z == 0) {
          PreferencePair p;
          p.question_id = q.id;
          p.winner = detail::side_from_record(*w);
          p.loser = detail::side_from_record(*l);
          p.pool = PairPool::z;
          pools.p_z.push_back(std::move(p));
        }
        if (w->z == 1 && l->z == 1) {
          if (!w->z_tilde || !l->z_tilde)
            throw std::runtime_error("record " + q.id + "#" +
                                     std::to_string((!w->z_tilde ? w : l)->sample_index) +
                                     " has no follow-up reward; run the evaluate-followups stage");
          if (*w->z_tilde > *l->z_tilde) {
            PreferencePair p;
            p.question_id = q.id;
            p.winner = detail::side_from_record(*w);
            p.loser = detail::side_from_record(*l);
            p.pool = PairPool::z_tilde;
            pools.p_z_tilde.push_back(std::move(p));
          }
        }
      }
    }
    if (per_question_cap) {
      Rng rng_z(substream_seed(cap_seed, "pairs.cap.z") ^ mix64(qi));
      Rng rng_zt(substream_seed(cap_seed, "pairs.cap.z_tilde") ^ mix64(qi));
      detail::cap_pool(pools.p_z, z_offset, *per_question_cap, rng_z);
      detail::cap_pool(pools.p_z_tilde, zt_offset, *per_question_cap, rng_zt);
    }
  }
  return pools;
}

struct MixResult {
  std::vector<PreferencePair> pairs;
  long long target_z_tilde = 0;
  long long target_z = 0;
  std::vector<std::string> warnings;
};

namespace detail {

// Uniform draw without replacement; when the target exceeds the pool the
// whole pool is consumed, reshuffled, and drawn again (duplicates only occur
// across cycles).
inline std::vector<std::size_t> draw_indices(std::size_t pool_size, long long target, Rng& rng,
                                             const char* pool_name,
                                             std::vector<std::string>& warnings) {
  std::vector<std::size_t> selected;
  if (target <= 0) return selected;
  if (pool_size == 0)
    throw std::runtime_error(std::string("the ") + pool_name + " pool is empty but " +
                             std::to_string(target) + " pair(s) were requested from it");
  if (static_cast<long long>(pool_size) < target) {
    warnings.push_back(std::string(pool_name) + " pool has " + std::to_string(pool_size) +
                       " pair(s) but the target is " + std::to_string(target) +
                       "; cycling with reshuffle (pairs will repeat)");
  }
  std::vector<std::size_t> perm(pool_size);
  for (std::size_t i = 0; i < pool_size; ++i) perm[i] = i;
  while (static_cast<long long>(selected.size()) < target) {
    rng.shuffle(perm);
    const long long take = std::min<long long>(target - static_cast<long long>(selected.size()),
                                               static_cast<long long>(pool_size));
    selected.insert(selected.end(), perm.begin(), perm.begin() + take);
  }
  return selected;
}

}  // namespace detail

// Draws round(lambda*K) pairs from the z_tilde pool and the remainder from
// the z pool, then emits a seeded shuffle of the union. Fully deterministic
// under the seed.
inline MixResult mix_pools(const PreferencePools& pools, const MixSpec& spec) {
  validate(spec);
  MixResult out;
  out.target_z_tilde = round_half_up(spec.lambda * static_cast<double>(spec.total_count));
  out.target_z = spec.total_count - out.target_z_tilde;

  Rng rng_zt(substream_seed(spec.seed, "pairs.select.z_tilde"));
  Rng rng_z(substream_seed(spec.seed, "pairs.select.z"));
  const auto pick_zt = detail::draw_indices(pools.p_z_tilde.size(), out.target_z_tilde, rng_zt,
                                            "z_tilde", out.warnings);
  const auto pick_z =
      detail::draw_indices(pools.p_z.size(), out.target_z, rng_z, "z", out.warnings);

  out.pairs.reserve(static_cast<std::size_t>(spec.total_count));
  for (std::size_t idx : pick_zt) out.pairs.push_back(pools.p_z_tilde[idx]);
  for (std::size_t idx : pick_z) out.pairs.push_back(pools.p_z[idx]);

  Rng rng_shuffle(substream_seed(spec.seed, "pairs.shuffle"));
  rng_shuffle.shuffle(out.pairs);
  return out;
}

// Completion text for one side of a pair: the rationale plus the answer
// scaffold carrying that side's own prediction. An unparsable prediction
// keeps its raw completion so the emitted text stays unparsable too.
inline std::string pair_completion_text(const PairSide& side) {
  if (side.prediction.has_value()) {
    return side.rationale_text + answer_scaffold(*side.prediction);
  }
  return side.rationale_text + std::string(kAnswerScaffold) + rtrim(side.raw_prediction);
}

inline json pair_to_json(const PreferencePair& pair,
                         const std::map<std::string, const MultipleChoiceQuestion*>& index,
                         const TemplateSet& templates) {
  auto it = index.find(pair.question_id);
  if (it == index.end())
    throw std::runtime_error("pair references unknown question id '" + pair.question_id + "'");
  json side_meta_w = {{"n", pair.winner.sample_index}, {"z", pair.winner.z}};
  json side_meta_l = {{"n", pair.loser.sample_index}, {"z", pair.loser.z}};
  if (pair.winner.z_tilde) side_meta_w["z_tilde"] = *pair.winner.z_tilde;
  if (pair.loser.z_tilde) side_meta_l["z_tilde"] = *pair.loser.z_tilde;
  json obj;
  obj["prompt"] = templates.render(PromptKind::rationale_generation, *it->second).text;
  obj["chosen"] = pair_completion_text(pair.winner);
  obj["rejected"] = pair_completion_text(pair.loser);
  obj["meta"] = {{"question_id", pair.question_id},
                 {"pool", pair_pool_name(pair.pool)},
                 {"winner", side_meta_w},
                 {"loser", side_meta_l}};
  return obj;
}

inline void emit_dpo(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs,
                     const std::vector<MultipleChoiceQuestion>& questions,
                     const TemplateSet& templates) {
  const auto index = detail::question_index(questions);
  std::vector<json> lines;
  lines.reserve(pairs.size());
  for (const auto& pair : pairs) lines.push_back(pair_to_json(pair, index, templates));
  write_jsonl(path, lines);
}

// Compact listing used for the pool artifacts; full texts live in the
// emitted preference dataset.
inline void write_pool(const std::filesystem::path& path,
                       const std::vector<PreferencePair>& pool) {
  std::vector<json> lines;
  lines.reserve(pool.size());
  for (const auto& pair : pool) {
    json obj;
    obj["question_id"] = pair.question_id;
    obj["pool"] = pair_pool_name(pair.pool);
    obj["winner_n"] = pair.winner.sample_index;
    obj["loser_n"] = pair.loser.sample_index;
    obj["winner_z"] = pair.winner.z;
    obj["loser_z"] = pair.loser.z;
    if (pair.winner.z_tilde) obj["winner_z_tilde"] = *pair.winner.z_tilde;
    if (pair.loser.z_tilde) obj["loser_z_tilde"] = *pair.loser.z_tilde;
    lines.push_back(std::move(obj));
  }
  write_jsonl(path, lines);
}

}  // namespace crest
