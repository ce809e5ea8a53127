#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "crest/backend.hpp"
#include "crest/core.hpp"
#include "crest/prompt.hpp"
#include "crest/util.hpp"

namespace crest::testing {

std::filesystem::path test_data_dir();
std::filesystem::path golden_dir();

// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

MultipleChoiceQuestion make_question(const std::string& id, int option_count, int answer_index,
                                     bool with_passage = false);

// A question plus fully populated records, with the reward values every
// record *should* have tallied independently at construction time.
struct SyntheticInstance {
  MultipleChoiceQuestion question;
  std::vector<RationaleRecord> records;
  std::vector<int> expected_z;
  std::vector<int> expected_z_tilde;
};

SyntheticInstance make_instance(Rng& rng, const std::string& id);
std::vector<SyntheticInstance> random_instances(std::uint64_t seed, std::size_t count);

std::vector<MultipleChoiceQuestion> questions_of(const std::vector<SyntheticInstance>& instances);
std::vector<RationaleRecord> records_of(const std::vector<SyntheticInstance>& instances);

// The bundled 20-question dataset and its fully scripted mock backend.
// `bundled_num_samples` rationales per question with a spread of rewards,
// one truncation-then-fallback case, one empty rationale, and one
// unparsable-after-fallback prediction.
constexpr int bundled_num_samples = 4;
std::vector<MultipleChoiceQuestion> bundled_questions();
std::vector<json> build_bundled_script(const std::vector<MultipleChoiceQuestion>& questions,
                                       const TemplateSet& templates);

}  // namespace crest::testing
