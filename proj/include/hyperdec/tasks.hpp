// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "hyperdec/tensor.hpp"

namespace hyperdec {

enum class TaskKind { classification, transduction };
enum class PrefixPolicy { named, unnamed };
enum class Split { train, dev, test, ood };

std::string to_string(Split split);
std::string to_string(PrefixPolicy policy);
PrefixPolicy parse_prefix_policy(std::string_view text);

// Vocabulary: pad, start, end, the shared unnamed prefix, one prefix per
// task, the label digits, then letters. Letters past kTrainLetters only
// occur in out-of-domain examples.
inline constexpr TokenId kUnnamedPrefix = 3;
inline constexpr TokenId kFirstTaskPrefix = 4;
inline constexpr std::size_t kTaskCount = 6;
inline constexpr TokenId kFirstDigit = kFirstTaskPrefix + static_cast<TokenId>(kTaskCount);
inline constexpr std::size_t kLabelCount = 3;
inline constexpr TokenId kFirstLetter = kFirstDigit + static_cast<TokenId>(kLabelCount);
inline constexpr std::size_t kLetterCount = 26;
inline constexpr std::size_t kTrainLetters = 20;
inline constexpr std::size_t kSuiteVocab = static_cast<std::size_t>(kFirstLetter) + kLetterCount;

inline constexpr std::size_t kMinLength = 3;
inline constexpr std::size_t kMaxLength = 8;
inline constexpr std::size_t kOodMinLength = 5;
inline constexpr std::size_t kOodMaxLength = 12;

struct Example {
  std::vector<TokenId> input;
  /// Ends with the end token.
  std::vector<TokenId> target;
  std::size_t task = 0;
  /// Class index for classification tasks, -1 otherwise.
  int label = -1;
};

struct TaskSpec {
  std::string name;
  TaskKind kind;
  std::size_t train_size, dev_size, test_size, ood_size;
};

struct TaskData {
  std::vector<Example> train, dev, test, ood;
  const std::vector<Example>& split(Split s) const;
};

struct SuiteOptions {
  PrefixPolicy prefix = PrefixPolicy::named;
  /// Multiplies every split size; 1 gives the desk-scale defaults.
  double size_scale = 1.0;
};

struct TaskSuite {
  std::vector<TaskSpec> specs;
  std::vector<TaskData> data;
  PrefixPolicy prefix = PrefixPolicy::named;

  std::size_t size() const { return specs.size(); }
  std::size_t vocab_size() const { return kSuiteVocab; }
  /// Longest input or target (with end token) the suite can produce.
  std::size_t max_sequence() const { return kOodMaxLength + 1; }
  std::size_t task_index(std::string_view name) const;
};

/// copy, reverse, sort (transduction); parity, max_class, mod_sum
/// (classification with labels "0".."2"). Regeneration under the same seed
/// is bit-identical; dev, test and ood never repeat a training input.
TaskSuite build_suite(std::uint64_t seed, const SuiteOptions& options = {});

/// Letter values used by the classification tasks: letter index mod 3.
int letter_value(TokenId letter);
bool is_letter(TokenId t);
/// The letters of an input, without its prefix token.
std::vector<TokenId> letters_of(const std::vector<TokenId>& input);

/// Accuracy for classification (first predicted token against the label),
/// exact-sequence match for transduction. Predictions exclude the end token.
float metric(TaskKind kind, const std::vector<std::vector<TokenId>>& predictions,
             const std::vector<std::vector<TokenId>>& targets);

std::string token_string(TokenId t);
TokenId parse_token(std::string_view text);
std::string tokens_string(const std::vector<TokenId>& tokens);
std::vector<TokenId> parse_tokens(std::string_view text);

/// One line per example: "task<TAB>input tokens<TAB>target tokens".
void dump_examples(std::ostream& out, const TaskSuite& suite, Split split);
std::vector<Example> load_examples(std::istream& in, const TaskSuite& suite);

}  // namespace hyperdec
