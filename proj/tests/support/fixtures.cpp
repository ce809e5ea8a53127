#include "fixtures.hpp"

#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstdlib>

#include "crest/pipeline.hpp"

namespace crest::testing {

namespace {

std::filesystem::path env_dir(const char* var, const char* fallback) {
  const char* value = std::getenv(var);
  if (value != nullptr && *value != '\0') return value;
  return fallback;
}

}  // namespace

std::filesystem::path test_data_dir() { return env_dir("CREST_TEST_DATA", "tests/data"); }
std::filesystem::path golden_dir() { return env_dir("CREST_TEST_GOLDEN", "tests/golden"); }

TempDir::TempDir() {
  static std::atomic<unsigned> counter{0};
  const auto base = std::filesystem::temp_directory_path();
  path_ = base / ("crest-test-" + to_hex64(mix64(static_cast<std::uint64_t>(::getpid()) ^
                                                 (static_cast<std::uint64_t>(counter.fetch_add(1))
                                                  << 32) ^
                                                 static_cast<std::uint64_t>(
                                                     std::chrono::steady_clock::now()
                                                         .time_since_epoch()
                                                         .count())))
                      .substr(0, 12));
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

MultipleChoiceQuestion make_question(const std::string& id, int option_count, int answer_index,
                                     bool with_passage) {
  MultipleChoiceQuestion q;
  q.id = id;
  if (with_passage) q.passage = "Background passage for " + id + ".";
  q.question = "Which option is associated with " + id + "?";
  for (int i = 0; i < option_count; ++i)
    q.options.push_back("candidate " + std::string(1, static_cast<char>('a' + i)) + " for " + id);
  q.answer_index = answer_index;
  validate(q);
  return q;
}

SyntheticInstance make_instance(Rng& rng, const std::string& id) {
  const int f = 2 + static_cast<int>(rng.below(4));  // 2..5 options
  const int gold = static_cast<int>(rng.below(static_cast<std::uint64_t>(f)));
  const int n_samples = 1 + static_cast<int>(rng.below(8));  // 1..8 rationales

  SyntheticInstance inst;
  inst.question = make_question(id, f, gold, rng.below(2) == 0);

  for (int n = 0; n < n_samples; ++n) {
    RationaleRecord rec;
    rec.question_id = id;
    rec.sample_index = n;
    rec.rationale_text = "Reasoning trace " + to_hex64(rng.next_u64()).substr(0, 8) + " for " + id +
                         " sample " + std::to_string(n) + ".";
    rec.raw_generation = rec.rationale_text + answer_scaffold(gold);

    // Prediction completion: mostly gold, sometimes wrong, sometimes an
    // out-of-range letter or free text (both unparsable).
    const std::uint64_t roll = rng.below(10);
    int intended_z = 0;
    if (roll < 5) {
      rec.raw_prediction = std::string(" ") + option_letter(gold) + ".";
      intended_z = 1;
    } else if (roll < 8) {
      int wrong = static_cast<int>(rng.below(static_cast<std::uint64_t>(f)));
      if (wrong == gold) wrong = (wrong + 1) % f;
      rec.raw_prediction = std::string(" ") + option_letter(wrong) + ".";
    } else if (roll < 9 && f < kMaxOptions) {
      rec.raw_prediction = std::string(" ") + option_letter(f) + ".";  // beyond the option range
    } else {
      rec.raw_prediction = " none of them convinces me.";
    }
    rec.has_prediction = true;
    rec.prediction = parse_answer_label(std::string(kAnswerCue) + rec.raw_prediction, f);
    rec.z = reward_z(rec.prediction, gold);
    inst.expected_z.push_back(intended_z);

    // Verdict completions: match gold, flipped, or unparsable.
    const auto followups = synthesize_followups(inst.question);
    int intended_matches = 0;
    rec.followup_verdicts.clear();
    rec.verdict_present.assign(static_cast<std::size_t>(f), true);
    for (int opt = 0; opt < f; ++opt) {
      const bool gold_verdict = followups[static_cast<std::size_t>(opt)].gold_verdict;
      const std::uint64_t vroll = rng.below(10);
      std::string text;
      if (vroll < 6) {
        text = gold_verdict ? " the correct answer." : " not the correct answer.";
        ++intended_matches;
      } else if (vroll < 8) {
        text = gold_verdict ? " not the correct answer." : " the correct answer.";
      } else {
        text = " hard to tell from the rationale.";
      }
      rec.raw_verdicts.push_back(text);
      rec.followup_verdicts.push_back(parse_verdict(text));
    }
    rec.z_tilde = reward_z_tilde(rec.followup_verdicts, followups);
    inst.expected_z_tilde.push_back(intended_matches);
    inst.records.push_back(std::move(rec));
  }
  return inst;
}

std::vector<SyntheticInstance> random_instances(std::uint64_t seed, std::size_t count) {
  Rng rng(substream_seed(seed, "synthetic-instances"));
  std::vector<SyntheticInstance> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i)
    out.push_back(make_instance(rng, "syn" + std::to_string(i)));
  return out;
}

std::vector<MultipleChoiceQuestion> questions_of(const std::vector<SyntheticInstance>& instances) {
  std::vector<MultipleChoiceQuestion> out;
  out.reserve(instances.size());
  for (const auto& inst : instances) out.push_back(inst.question);
  return out;
}

std::vector<RationaleRecord> records_of(const std::vector<SyntheticInstance>& instances) {
  std::vector<RationaleRecord> out;
  for (const auto& inst : instances)
    for (const auto& rec : inst.records) out.push_back(rec);
  return out;
}

std::vector<MultipleChoiceQuestion> bundled_questions() {
  std::vector<MultipleChoiceQuestion> out;
  struct Spec {
    int f;
    int answer;
    bool passage;
  };
  const Spec specs[20] = {
      {4, 2, false}, {4, 0, false}, {4, 1, false}, {4, 3, false}, {4, 2, false},
      {4, 1, false}, {4, 0, false}, {4, 3, false}, {5, 4, true},  {5, 0, true},
      {5, 2, true},  {5, 1, true},  {5, 3, false}, {5, 2, false}, {3, 0, false},
      {3, 2, false}, {4, 1, true},  {4, 2, true},  {4, 0, true},  {4, 3, true},
  };
  for (int i = 0; i < 20; ++i) {
    char id[8];
    std::snprintf(id, sizeof(id), "q%02d", i + 1);
    auto q = make_question(id, specs[i].f, specs[i].answer, specs[i].passage);
    out.push_back(std::move(q));
  }
  // Non-ASCII text must survive the round trip byte-for-byte.
  out[14].question = "Which caf\xc3\xa9 item pairs with q15?";
  return out;
}

namespace {

json script_line(const std::string& prompt, int choice_index, const std::string& text,
                 const std::string& finish_reason = "stop") {
  json obj;
  obj["fingerprint"] = prompt_fingerprint_hex(prompt);
  obj["choice_index"] = choice_index;
  obj["text"] = text;
  if (finish_reason != "stop") obj["finish_reason"] = finish_reason;
  return obj;
}

}  // namespace

std::vector<json> build_bundled_script(const std::vector<MultipleChoiceQuestion>& questions,
                                       const TemplateSet& templates) {
  std::vector<json> script;

  for (std::size_t qi = 0; qi < questions.size(); ++qi) {
    const auto& q = questions[qi];
    const int f = q.option_count();
    const auto gen_prompt = templates.render(PromptKind::rationale_generation, q).text;
    const auto followups = synthesize_followups(q);

    for (int n = 0; n < bundled_num_samples; ++n) {
      const bool truncated = qi == 2 && n == 2;           // fallback re-query case
      const bool empty_rationale = qi == 4 && n == 1;     // degenerate generation
      const bool unparsable_pred = qi == 6 && n == 3;     // UNPARSED after fallback

      // Reward plan: z=1 unless (qi + n) % 3 == 0; z_tilde spreads over [0, f].
      const bool correct = (qi + n) % 3 != 0 && !unparsable_pred;
      const int matches = static_cast<int>((qi + 2 * static_cast<std::size_t>(n)) % (f + 1));

      std::string rationale;
      std::string gen_text;
      if (empty_rationale) {
        gen_text = std::string("\n[Answer]\nTherefore, the answer is ") +
                   option_letter(q.answer_index) + ".";
        rationale = "";
      } else if (truncated) {
        rationale = "\nThe options differ in scope and the passage narrows them down, but the";
        gen_text = rationale;  // ran out of tokens before the answer section
      } else {
        const int claimed = correct ? q.answer_index : (q.answer_index + 1 + n) % f;
        rationale = "\nLooking at " + q.id + " sample " + std::to_string(n) +
                    ", the key property holds for option " + option_letter(claimed) +
                    " and fails elsewhere.";
        gen_text = rationale + answer_scaffold(claimed);
      }
      script.push_back(script_line(gen_prompt, n, gen_text, truncated ? "length" : "stop"));

      const std::string stripped = strip_to_rationale(gen_text);
      PromptExtras pred_extras;
      pred_extras.rationale = stripped;
      const auto pred_prompt = templates.render(PromptKind::answer_prediction, q, pred_extras).text;

      if (truncated) {
        const std::string first = " incomplete thought that never names a letter";
        script.push_back(script_line(pred_prompt, 0, first));
        const std::string fb_prompt = pred_prompt + first + kAnswerScaffold;
        script.push_back(script_line(fb_prompt, 0,
                                     std::string(" ") + option_letter(q.answer_index) + "."));
      } else if (unparsable_pred) {
        const std::string first = " none of the options is convincing";
        script.push_back(script_line(pred_prompt, 0, first));
        const std::string fb_prompt = pred_prompt + first + kAnswerScaffold;
        script.push_back(script_line(fb_prompt, 0, " still no clear choice"));
      } else {
        const int claimed = correct ? q.answer_index : (q.answer_index + 1 + n) % f;
        script.push_back(
            script_line(pred_prompt, 0, std::string(" ") + option_letter(claimed) + "."));
      }

      // Verdicts: the first `matches` options agree with gold; the next one is
      // unparsable; the rest are flipped.
      for (int opt = 0; opt < f; ++opt) {
        PromptExtras extras;
        extras.rationale = stripped;
        extras.target_option = opt;
        const auto fv_prompt = templates.render(PromptKind::followup_verdict, q, extras).text;
        const bool gold_verdict = followups[static_cast<std::size_t>(opt)].gold_verdict;
        std::string text;
        if (opt < matches) {
          text = gold_verdict ? " the correct answer." : " not the correct answer.";
        } else if (opt == matches) {
          text = " difficult to decide.";
        } else {
          text = gold_verdict ? " not the correct answer." : " the correct answer.";
        }
        script.push_back(script_line(fv_prompt, 0, text));
      }
    }
  }
  return script;
}

}  // namespace crest::testing
