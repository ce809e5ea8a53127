#include <catch2/catch_amalgamated.hpp>

#include "crest/core.hpp"
#include "support/fixtures.hpp"

using namespace crest;

namespace {

std::filesystem::path write_lines(const testing::TempDir& dir, const std::string& name,
                                  const std::vector<std::string>& lines) {
  const auto path = dir.path() / name;
  std::string content;
  for (const auto& line : lines) content += line + "\n";
  atomic_write_file(path, content);
  return path;
}

}  // namespace

TEST_CASE("load_dataset maps letter answers to indices") {
  testing::TempDir dir;
  const auto path = write_lines(
      dir, "data.jsonl",
      {R"({"id":"q1","question":"pick one","options":["w","x","y","z"],"answer":"D"})",
       R"({"id":"q2","question":"five options","options":["a","b","c","d","e"],"answer":"E"})",
       R"({"id":"q3","question":"integer answer","options":["a","b","c"],"answer":1})"});
  const auto questions = load_dataset(path);
  REQUIRE(questions.size() == 3);
  CHECK(questions[0].answer_index == 3);
  CHECK(questions[1].answer_index == 4);
  CHECK(questions[1].option_count() == 5);
  CHECK(questions[2].answer_index == 1);
  CHECK_FALSE(questions[0].passage.has_value());
}

TEST_CASE("load_dataset rejects malformed records with line numbers") {
  testing::TempDir dir;

  SECTION("answer letter beyond the option list") {
    const auto path = write_lines(
        dir, "bad.jsonl",
        {R"({"id":"q1","question":"?","options":["a","b","c","d"],"answer":"E"})"});
    CHECK_THROWS_WITH(load_dataset(path), Catch::Matchers::ContainsSubstring("bad.jsonl:1") &&
                                              Catch::Matchers::ContainsSubstring("answer"));
  }
  SECTION("duplicate ids") {
    const auto path = write_lines(
        dir, "dup.jsonl",
        {R"({"id":"q1","question":"?","options":["a","b"],"answer":"A"})",
         R"({"id":"q1","question":"again","options":["a","b"],"answer":"B"})"});
    CHECK_THROWS_WITH(load_dataset(path), Catch::Matchers::ContainsSubstring("duplicate"));
  }
  SECTION("missing field names the field and line") {
    const auto path = write_lines(dir, "missing.jsonl",
                                  {R"({"id":"q1","options":["a","b"],"answer":"A"})"});
    CHECK_THROWS_WITH(load_dataset(path), Catch::Matchers::ContainsSubstring("question"));
  }
  SECTION("malformed json line") {
    const auto path = write_lines(dir, "broken.jsonl", {"{not json"});
    CHECK_THROWS_WITH(load_dataset(path), Catch::Matchers::ContainsSubstring("broken.jsonl:1"));
  }
  SECTION("empty option text") {
    const auto path = write_lines(dir, "empty_opt.jsonl",
                                  {R"({"id":"q1","question":"?","options":["a",""],"answer":"A"})"});
    CHECK_THROWS(load_dataset(path));
  }
  SECTION("too few options") {
    const auto path = write_lines(dir, "one_opt.jsonl",
                                  {R"({"id":"q1","question":"?","options":["a"],"answer":"A"})"});
    CHECK_THROWS(load_dataset(path));
  }
}

TEST_CASE("dataset round-trips through save and load") {
  testing::TempDir dir;
  Rng rng(41);
  std::vector<MultipleChoiceQuestion> questions;
  for (int i = 0; i < 12; ++i) {
    auto q = testing::make_question("rt" + std::to_string(i), 2 + static_cast<int>(rng.below(5)),
                                    0, rng.below(2) == 0);
    q.answer_index = static_cast<int>(rng.below(static_cast<std::uint64_t>(q.option_count())));
    questions.push_back(q);
  }
  questions[3].question = "caf\xc3\xa9 and r\xc3\xa9sum\xc3\xa9 stay byte-identical";

  const auto path = dir.path() / "roundtrip.jsonl";
  save_dataset(path, questions);
  const auto reloaded = load_dataset(path);
  REQUIRE(reloaded.size() == questions.size());
  for (std::size_t i = 0; i < questions.size(); ++i) {
    CHECK(reloaded[i].id == questions[i].id);
    CHECK(reloaded[i].passage == questions[i].passage);
    CHECK(reloaded[i].question == questions[i].question);
    CHECK(reloaded[i].options == questions[i].options);
    CHECK(reloaded[i].answer_index == questions[i].answer_index);
  }

  // A second save must be byte-identical.
  const auto path2 = dir.path() / "roundtrip2.jsonl";
  save_dataset(path2, reloaded);
  CHECK(read_file(path) == read_file(path2));
}

TEST_CASE("synthesize_followups marks exactly one gold verdict, in option order") {
  auto q = testing::make_question("fu", 4, 1);
  const auto followups = synthesize_followups(q);
  REQUIRE(followups.size() == 4);
  std::vector<bool> verdicts;
  for (const auto& fu : followups) {
    CHECK(fu.parent_id == "fu");
    verdicts.push_back(fu.gold_verdict);
  }
  CHECK(verdicts == std::vector<bool>{false, true, false, false});
  for (std::size_t f = 0; f < followups.size(); ++f)
    CHECK(followups[f].option_index == static_cast<int>(f));
}

TEST_CASE("follow-up counts track the per-question option count") {
  // Five options admit a maximum follow-up reward of 5; four options cap at 4.
  auto q5 = testing::make_question("five", 5, 2);
  auto q4 = testing::make_question("four", 4, 0, true);
  CHECK(synthesize_followups(q5).size() == 5);
  CHECK(synthesize_followups(q4).size() == 4);

  std::vector<std::optional<bool>> all_match;
  const auto fus = synthesize_followups(q5);
  for (const auto& fu : fus) all_match.push_back(fu.gold_verdict);
  CHECK(reward_z_tilde(all_match, fus) == 5);
}

TEST_CASE("followup property: exactly one gold verdict for random questions") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    const int f = 2 + static_cast<int>(rng.below(25));
    const int gold = static_cast<int>(rng.below(static_cast<std::uint64_t>(f)));
    const auto q = testing::make_question("p" + std::to_string(trial), f, gold);
    const auto followups = synthesize_followups(q);
    REQUIRE(static_cast<int>(followups.size()) == f);
    int gold_count = 0;
    for (const auto& fu : followups)
      if (fu.gold_verdict) ++gold_count;
    CHECK(gold_count == 1);
    CHECK(followups[static_cast<std::size_t>(gold)].gold_verdict);

    // Determinism: same input, same output.
    const auto again = synthesize_followups(q);
    for (std::size_t i = 0; i < followups.size(); ++i) {
      CHECK(again[i].option_index == followups[i].option_index);
      CHECK(again[i].gold_verdict == followups[i].gold_verdict);
    }
  }
}

TEST_CASE("followup file round-trips") {
  testing::TempDir dir;
  const auto q = testing::make_question("rt", 5, 3);
  const auto followups = synthesize_followups(q);
  const auto path = dir.path() / "followups.jsonl";
  write_followups(path, followups);
  const auto reloaded = read_followups(path);
  REQUIRE(reloaded.size() == followups.size());
  for (std::size_t i = 0; i < followups.size(); ++i) {
    CHECK(reloaded[i].parent_id == followups[i].parent_id);
    CHECK(reloaded[i].option_index == followups[i].option_index);
    CHECK(reloaded[i].gold_verdict == followups[i].gold_verdict);
  }
}

TEST_CASE("rewards follow their defining equations") {
  CHECK(reward_z(2, 2) == 1);
  CHECK(reward_z(1, 2) == 0);
  CHECK(reward_z(std::nullopt, 2) == 0);

  const auto q = testing::make_question("rz", 4, 1);
  const auto fus = synthesize_followups(q);
  // Verdicts [true,true,false,false] against gold [false,true,false,false]: 3 match.
  std::vector<std::optional<bool>> verdicts{true, true, false, false};
  CHECK(reward_z_tilde(verdicts, fus) == 3);
  // Unparsable verdicts count as mismatches.
  std::vector<std::optional<bool>> unparsed{std::nullopt, std::nullopt, std::nullopt, std::nullopt};
  CHECK(reward_z_tilde(unparsed, fus) == 0);
}
