// SPDX-License-Identifier: Apache-2.0
#include "hyperdec/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "hyperdec/random.hpp"
#include "hyperdec/transformer.hpp"

namespace hyperdec {

std::string to_string(Split split) {
  switch (split) {
    case Split::train:
      return "train";
    case Split::dev:
      return "dev";
    case Split::test:
      return "test";
    case Split::ood:
      return "ood";
  }
  return "?";
}

std::string to_string(PrefixPolicy policy) { return policy == PrefixPolicy::named ? "named" : "unnamed"; }

PrefixPolicy parse_prefix_policy(std::string_view text) {
  if (text == "named") return PrefixPolicy::named;
  if (text == "unnamed") return PrefixPolicy::unnamed;
  throw ConfigError("prefix", "expected named or unnamed, got '" + std::string(text) + "'");
}

const std::vector<Example>& TaskData::split(Split s) const {
  switch (s) {
    case Split::train:
      return train;
    case Split::dev:
      return dev;
    case Split::test:
      return test;
    case Split::ood:
      return ood;
  }
  return train;
}

std::size_t TaskSuite::task_index(std::string_view name) const {
  for (std::size_t i = 0; i < specs.size(); ++i) {
    if (specs[i].name == name) return i;
  }
  throw std::invalid_argument("unknown task '" + std::string(name) + "'");
}

bool is_letter(TokenId t) { return t >= kFirstLetter && t < kFirstLetter + static_cast<TokenId>(kLetterCount); }

int letter_value(TokenId letter) {
  if (!is_letter(letter)) throw std::invalid_argument("token " + std::to_string(letter) + " is not a letter");
  return (letter - kFirstLetter) % 3;
}

std::vector<TokenId> letters_of(const std::vector<TokenId>& input) {
  std::vector<TokenId> out;
  for (auto t : input) {
    if (is_letter(t)) out.push_back(t);
  }
  return out;
}

namespace {

enum TaskId : std::size_t { kCopy, kReverse, kSort, kParity, kMaxClass, kModSum };

std::vector<TaskSpec> default_specs(double scale) {
  auto n = [scale](std::size_t v) { return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(v * scale))); };
  return {
      {"copy", TaskKind::transduction, n(1200), n(100), n(200), n(200)},
      {"reverse", TaskKind::transduction, n(1200), n(100), n(200), n(200)},
      {"sort", TaskKind::transduction, n(1200), n(100), n(200), n(200)},
      {"parity", TaskKind::classification, n(2400), n(100), n(200), n(200)},
      {"max_class", TaskKind::classification, n(1200), n(100), n(200), n(200)},
      {"mod_sum", TaskKind::classification, n(2400), n(100), n(200), n(200)},
  };
}

std::vector<TokenId> sample_letters(Rng& rng, bool ood) {
  if (!ood) {
    std::vector<TokenId> s(rng.between(kMinLength, kMaxLength));
    for (auto& t : s) t = kFirstLetter + static_cast<TokenId>(rng.index(kTrainLetters));
    return s;
  }
  std::vector<TokenId> s(rng.between(kOodMinLength, kOodMaxLength));
  for (auto& t : s) t = kFirstLetter + static_cast<TokenId>(rng.index(kLetterCount));
  // at least one letter from the unseen subrange
  s[rng.index(s.size())] = kFirstLetter + static_cast<TokenId>(kTrainLetters + rng.index(kLetterCount - kTrainLetters));
  return s;
}

int classify(std::size_t task, const std::vector<TokenId>& letters) {
  switch (task) {
    case kParity: {
      const auto marked = std::count_if(letters.begin(), letters.end(), [](TokenId t) { return letter_value(t) == 0; });
      return static_cast<int>(marked % 2);
    }
    case kMaxClass:
      return letter_value(*std::max_element(letters.begin(), letters.end()));
    case kModSum: {
      int total = 0;
      for (auto t : letters) total += letter_value(t);
      return total % 3;
    }
    default:
      return -1;
  }
}

Example make_example(std::size_t task, std::vector<TokenId> letters, PrefixPolicy prefix) {
  Example ex;
  ex.task = task;
  ex.input.push_back(prefix == PrefixPolicy::named ? kFirstTaskPrefix + static_cast<TokenId>(task) : kUnnamedPrefix);
  ex.input.insert(ex.input.end(), letters.begin(), letters.end());
  switch (task) {
    case kCopy:
      ex.target = letters;
      break;
    case kReverse:
      ex.target.assign(letters.rbegin(), letters.rend());
      break;
    case kSort:
      ex.target = letters;
      std::sort(ex.target.begin(), ex.target.end());
      break;
    default:
      ex.label = classify(task, letters);
      ex.target = {kFirstDigit + static_cast<TokenId>(ex.label)};
  }
  ex.target.push_back(kEndToken);
  return ex;
}

}  // namespace

TaskSuite build_suite(std::uint64_t seed, const SuiteOptions& options) {
  TaskSuite suite;
  suite.specs = default_specs(options.size_scale);
  suite.prefix = options.prefix;
  for (std::size_t task = 0; task < suite.specs.size(); ++task) {
    const auto& spec = suite.specs[task];
    TaskData data;
    std::set<std::vector<TokenId>> seen;
    auto fill = [&](std::vector<Example>& out, std::size_t count, Split split) {
      Rng rng = Rng::stream(seed, "task." + spec.name + "." + to_string(split));
      while (out.size() < count) {
        auto letters = sample_letters(rng, split == Split::ood);
        if (!seen.insert(letters).second) continue;
        out.push_back(make_example(task, std::move(letters), options.prefix));
      }
    };
    fill(data.train, spec.train_size, Split::train);
    fill(data.dev, spec.dev_size, Split::dev);
    fill(data.test, spec.test_size, Split::test);
    fill(data.ood, spec.ood_size, Split::ood);
    suite.data.push_back(std::move(data));
  }
  return suite;
}

float metric(TaskKind kind, const std::vector<std::vector<TokenId>>& predictions,
             const std::vector<std::vector<TokenId>>& targets) {
  if (predictions.size() != targets.size()) {
    throw std::invalid_argument("metric: " + std::to_string(predictions.size()) + " predictions for " +
                                std::to_string(targets.size()) + " targets");
  }
  if (targets.empty()) return 0.0f;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    std::vector<TokenId> gold = targets[i];
    if (!gold.empty() && gold.back() == kEndToken) gold.pop_back();
    if (kind == TaskKind::classification) {
      correct += !predictions[i].empty() && !gold.empty() && predictions[i][0] == gold[0];
    } else {
      correct += predictions[i] == gold;
    }
  }
  return static_cast<float>(correct) / static_cast<float>(targets.size());
}

namespace {

const char* const kTaskNames[kTaskCount] = {"copy", "reverse", "sort", "parity", "max_class", "mod_sum"};

}  // namespace

std::string token_string(TokenId t) {
  if (t == kPadToken) return "<pad>";
  if (t == kStartToken) return "<s>";
  if (t == kEndToken) return "</s>";
  if (t == kUnnamedPrefix) return "input:";
  if (t >= kFirstTaskPrefix && t < kFirstDigit) return std::string(kTaskNames[t - kFirstTaskPrefix]) + ":";
  if (t >= kFirstDigit && t < kFirstLetter) return std::to_string(t - kFirstDigit);
  if (is_letter(t)) return std::string(1, static_cast<char>('a' + (t - kFirstLetter)));
  throw std::invalid_argument("token " + std::to_string(t) + " outside the suite vocabulary");
}

TokenId parse_token(std::string_view text) {
  for (TokenId t = 0; t < static_cast<TokenId>(kSuiteVocab); ++t) {
    if (token_string(t) == text) return t;
  }
  throw std::invalid_argument("unknown token '" + std::string(text) + "'");
}

std::string tokens_string(const std::vector<TokenId>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out += ' ';
    out += token_string(tokens[i]);
  }
  return out;
}

std::vector<TokenId> parse_tokens(std::string_view text) {
  std::vector<TokenId> out;
  std::istringstream in{std::string(text)};
  std::string word;
  while (in >> word) out.push_back(parse_token(word));
  return out;
}

void dump_examples(std::ostream& out, const TaskSuite& suite, Split split) {
  for (std::size_t task = 0; task < suite.size(); ++task) {
    for (const auto& ex : suite.data[task].split(split)) {
      out << suite.specs[task].name << '\t' << tokens_string(ex.input) << '\t' << tokens_string(ex.target) << '\n';
    }
  }
}

std::vector<Example> load_examples(std::istream& in, const TaskSuite& suite) {
  std::vector<Example> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) {
      throw std::invalid_argument("dataset line " + std::to_string(line_no) + ": expected three tab-separated fields");
    }
    Example ex;
    ex.task = suite.task_index(std::string_view(line).substr(0, t1));
    ex.input = parse_tokens(std::string_view(line).substr(t1 + 1, t2 - t1 - 1));
    ex.target = parse_tokens(std::string_view(line).substr(t2 + 1));
    if (suite.specs[ex.task].kind == TaskKind::classification && !ex.target.empty()) {
      ex.label = ex.target[0] - kFirstDigit;
    }
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace hyperdec
