#include <catch2/catch_amalgamated.hpp>

#include "crest/prompt.hpp"
#include "support/fixtures.hpp"

using namespace crest;

namespace {

MultipleChoiceQuestion reference_question(bool with_passage) {
  MultipleChoiceQuestion q;
  q.id = "ref";
  if (with_passage) q.passage = "Files move between machines over shared infrastructure.";
  q.question = "You can share files with someone if you have a connection to a what?";
  q.options = {"freeway", "radio", "wires", "computer network"};
  q.answer_index = 3;
  return q;
}

}  // namespace

TEST_CASE("rendered prompts match the committed golden files byte for byte") {
  const auto templates = TemplateSet::builtin();
  const auto q = reference_question(true);
  const auto golden = testing::golden_dir() / "prompts";

  PromptExtras with_rationale;
  with_rationale.rationale = "\nA network connects computers, so files can move between them.";
  PromptExtras verdict_extras = with_rationale;
  verdict_extras.target_option = 1;

  struct Case {
    const char* file;
    RenderedPrompt rendered;
  };
  const Case cases[] = {
      {"rationale_generation.txt", templates.render(PromptKind::rationale_generation, q)},
      {"answer_prediction.txt", templates.render(PromptKind::answer_prediction, q, with_rationale)},
      {"followup_verdict.txt", templates.render(PromptKind::followup_verdict, q, verdict_extras)},
      {"direct_answer.txt", templates.render(PromptKind::direct_answer, q)},
      {"rationale_generation_no_passage.txt",
       templates.render(PromptKind::rationale_generation, reference_question(false))},
  };
  for (const auto& c : cases) {
    INFO(c.file);
    CHECK(c.rendered.text == read_file(golden / c.file));
  }
}

TEST_CASE("prompt endings pin the continuation cues") {
  const auto templates = TemplateSet::builtin();
  const auto q = reference_question(true);
  PromptExtras extras;
  extras.rationale = "\nBecause reasons.";

  CHECK(ends_with(templates.render(PromptKind::rationale_generation, q).text,
                  "Let's think step by step."));
  CHECK(ends_with(templates.render(PromptKind::answer_prediction, q, extras).text,
                  "Therefore, the answer is"));
  extras.target_option = 1;
  const auto verdict = templates.render(PromptKind::followup_verdict, q, extras).text;
  CHECK(ends_with(verdict, "Therefore, B is"));
  CHECK(verdict.find("Is a given choice B. radio the correct answer?") != std::string::npos);
  CHECK(ends_with(templates.render(PromptKind::direct_answer, q).text, "The correct answer is"));

  for (PromptKind kind : kAllPromptKinds) {
    PromptExtras full = extras;
    const auto text = templates.render(kind, q, full).text;
    CHECK(text.find("[Question]") != std::string::npos);
  }
}

TEST_CASE("passage line is omitted when the question has none") {
  const auto templates = TemplateSet::builtin();
  const auto text = templates.render(PromptKind::rationale_generation, reference_question(false)).text;
  CHECK(text.find("<Passage>") == std::string::npos);
  CHECK(text.find("<Question>") != std::string::npos);
}

TEST_CASE("render is pure: identical inputs give byte-identical prompts") {
  const auto templates = TemplateSet::builtin();
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const int f = 2 + static_cast<int>(rng.below(7));
    auto q = testing::make_question("pure" + std::to_string(trial), f,
                                    static_cast<int>(rng.below(static_cast<std::uint64_t>(f))),
                                    rng.below(2) == 0);
    PromptExtras extras;
    extras.rationale = "\ntrace " + to_hex64(rng.next_u64());
    extras.target_option = static_cast<int>(rng.below(static_cast<std::uint64_t>(f)));
    for (PromptKind kind : kAllPromptKinds) {
      CHECK(templates.render(kind, q, extras).text == templates.render(kind, q, extras).text);
    }
  }
}

TEST_CASE("render validates required extras") {
  const auto templates = TemplateSet::builtin();
  const auto q = reference_question(true);
  CHECK_THROWS_WITH(templates.render(PromptKind::answer_prediction, q),
                    Catch::Matchers::ContainsSubstring("rationale"));
  PromptExtras extras;
  extras.rationale = "r";
  CHECK_THROWS_WITH(templates.render(PromptKind::followup_verdict, q, extras),
                    Catch::Matchers::ContainsSubstring("target option"));
  extras.target_option = 9;
  CHECK_THROWS(templates.render(PromptKind::followup_verdict, q, extras));
}

TEST_CASE("few-shot exemplars are spliced between instruction and question") {
  const auto templates = TemplateSet::builtin();
  const auto q = reference_question(false);
  PromptExtras extras;
  extras.few_shot_examples = {"[Question]\nexample one?\n\n[Answer]\nA.",
                              "[Question]\nexample two?\n\n[Answer]\nB."};
  const auto text = templates.render(PromptKind::direct_answer, q, extras).text;
  const auto first = text.find("example one?");
  const auto second = text.find("example two?");
  const auto real = text.find(q.question);
  REQUIRE(first != std::string::npos);
  REQUIRE(second != std::string::npos);
  REQUIRE(real != std::string::npos);
  CHECK(first < second);
  CHECK(second < real);
}

TEST_CASE("parse_answer_label handles the accepted label forms") {
  CHECK(parse_answer_label("... [Answer] Therefore, the answer is B.", 4) == 1);
  CHECK(parse_answer_label("... the answer is (D)", 4) == 3);
  CHECK(parse_answer_label("... the answer is F.", 4) == std::nullopt);
  CHECK(parse_answer_label("no cue at all: C.", 4) == std::nullopt);
  CHECK(parse_answer_label("the answer is\n  A", 4) == 0);
  CHECK(parse_answer_label("the answer is option C, clearly.", 4) == 2);
  // Lowercase single letters are articles more often than labels.
  CHECK(parse_answer_label("the answer is a tricky one", 4) == std::nullopt);
  // The last cue occurrence wins when the model restates it.
  CHECK(parse_answer_label("the answer is A... wait, the answer is B.", 4) == 1);
  // Beyond-F letters are rejected even when later text would parse.
  CHECK(parse_answer_label("the answer is E. or maybe A.", 4) == std::nullopt);
}

TEST_CASE("parse_verdict reads the first sentence only") {
  CHECK(parse_verdict(" the correct answer.") == true);
  CHECK(parse_verdict(" not the correct answer.") == false);
  CHECK(parse_verdict("I am not sure.") == std::nullopt);
  CHECK(parse_verdict(" The Correct Answer.") == true);
  CHECK(parse_verdict(" definitely not the correct answer, sadly.") == false);
  // Cue in the second sentence does not count.
  CHECK(parse_verdict("Unclear. It might be the correct answer.") == std::nullopt);
}

TEST_CASE("strip_to_rationale splits at the answer marker") {
  CHECK(strip_to_rationale("steps...\n\n[Answer]\nTherefore, the answer is A.") == "steps...");
  CHECK(strip_to_rationale("steps with no marker") == "steps with no marker");
  CHECK(strip_to_rationale("[Answer] Therefore...") == "");
  // Leading whitespace survives; trailing whitespace does not.
  CHECK(strip_to_rationale("\nkept lead\n\n[Answer]\nx") == "\nkept lead");
}

TEST_CASE("label round-trip over every option letter and form") {
  for (int f = 2; f <= kMaxOptions; ++f) {
    for (int k = 0; k < f; ++k) {
      const std::string letter(1, option_letter(k));
      CHECK(parse_answer_label("Therefore, the answer is " + letter + ".", f) == k);
      CHECK(parse_answer_label("Therefore, the answer is " + letter, f) == k);
      CHECK(parse_answer_label("Therefore, the answer is (" + letter + ")", f) == k);
    }
  }
}

TEST_CASE("verdict round-trip over both template output variants") {
  CHECK(parse_verdict(" the correct answer.") == true);
  CHECK(parse_verdict(" not the correct answer.") == false);
}

TEST_CASE("template presets load from a directory and render identically") {
  testing::TempDir dir;
  const auto builtin = TemplateSet::builtin();
  builtin.save_directory(dir.path() / "preset");
  const auto loaded = TemplateSet::from_preset((dir.path() / "preset").string());
  CHECK(loaded.digest() == builtin.digest());

  const auto q = reference_question(true);
  CHECK(loaded.render(PromptKind::rationale_generation, q).text ==
        builtin.render(PromptKind::rationale_generation, q).text);

  CHECK_THROWS_WITH(TemplateSet::from_preset((dir.path() / "nope").string()),
                    Catch::Matchers::ContainsSubstring("missing"));
}

TEST_CASE("unknown template slots are rejected") {
  testing::TempDir dir;
  const auto preset = dir.path() / "preset";
  TemplateSet::builtin().save_directory(preset);
  atomic_write_file(preset / "direct_answer.txt", "[Question]\n{question}\n{bogus_slot}\nend");
  const auto templates = TemplateSet::from_preset(preset.string());
  CHECK_THROWS_WITH(templates.render(PromptKind::direct_answer, reference_question(false)),
                    Catch::Matchers::ContainsSubstring("bogus_slot"));
}
