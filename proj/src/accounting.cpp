// SPDX-License-Identifier: Apache-2.0
#include "hyperdec/accounting.hpp"

#include <algorithm>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace hyperdec {
namespace {

Count adapter_block(Count a, Count d) { return 2 * a * d + a + d; }

bool ends_with(const std::string& s, std::string_view tail) {
  return s.size() >= tail.size() && s.compare(s.size() - tail.size(), tail.size(), tail) == 0;
}

bool is_hyper_bias(const std::string& name) {
  const auto dot = name.rfind('.');
  const std::string leaf = name.substr(dot + 1);
  return leaf.size() == 2 && leaf[0] == 'b' && leaf[1] >= '0' && leaf[1] <= '9';
}

}  // namespace

Count count_adapters(Count l, Count a, Count d) { return l * adapter_block(a, d); }

Count count_task_hypernet(const CountInputs& in) {
  return 2 * (in.t * in.e_t + in.l * in.e_l + (in.e_t + in.e_l) * in.b + in.b * adapter_block(in.a, in.d));
}

Count count_hyperdecoder(const CountInputs& in) {
  return count_adapters(in.l, in.a, in.d) + 2 * in.d * in.d + (in.d + in.e_l) * in.b +
         in.b * adapter_block(in.a, in.d);
}

bool counted_by_formula(const NamedParam& p) {
  switch (p.role) {
    case ParamRole::base:
      return false;
    case ParamRole::enc_adapter:
    case ParamRole::dec_adapter:
      return true;
    case ParamRole::enc_hyper:
    case ParamRole::dec_hyper:
      return !is_hyper_bias(p.name) && !ends_with(p.name, ".layer_embeds");
    case ParamRole::enc_task:
    case ParamRole::dec_task:
      return !is_hyper_bias(p.name);
  }
  return false;
}

Count count_instantiated(const Seq2SeqModel& model) {
  Count n = 0;
  for (const auto& p : model.params()) {
    if (counted_by_formula(p)) n += p.tensor.numel();
  }
  return n;
}

Count count_base(const Seq2SeqModel& model) {
  Count n = 0;
  for (const auto& p : model.params()) {
    if (p.role == ParamRole::base) n += p.tensor.numel();
  }
  return n;
}

Count count_trainable(const Seq2SeqModel& model) {
  return model.config().full_finetune ? count_base(model) + count_instantiated(model) : count_instantiated(model);
}

double trainable_fraction(Count trainable, Count base) {
  if (base == 0) throw std::invalid_argument("trainable_fraction: base parameter count is zero");
  return 100.0 * static_cast<double>(trainable) / static_cast<double>(base);
}

std::vector<AccountRow> account_table(const CountInputs& in, Count base) {
  std::vector<AccountRow> rows = {
      {"full_finetune", base, 0.0},
      {"adapters", count_adapters(2 * in.l, in.a, in.d), 0.0},
      {"task_hypernet", count_task_hypernet(in), 0.0},
      {"hyperdecoder", count_hyperdecoder(in), 0.0},
  };
  for (auto& r : rows) r.percent = trainable_fraction(r.trainable, base);
  return rows;
}

std::string format_text(const std::vector<AccountRow>& rows) {
  std::size_t width = 4;
  for (const auto& r : rows) width = std::max(width, r.mode.size());
  std::ostringstream out;
  out << std::left << std::setw(static_cast<int>(width)) << "mode" << "  " << std::right << std::setw(14)
      << "trainable" << "  " << std::setw(9) << "percent" << "\n";
  for (const auto& r : rows) {
    out << std::left << std::setw(static_cast<int>(width)) << r.mode << "  " << std::right << std::setw(14)
        << r.trainable << "  " << std::setw(8) << std::fixed << std::setprecision(3) << r.percent << "%\n";
  }
  return out.str();
}

std::string format_csv(const std::vector<AccountRow>& rows) {
  std::ostringstream out;
  out << "mode,trainable,percent\n";
  out << std::setprecision(10);
  for (const auto& r : rows) out << r.mode << "," << r.trainable << "," << r.percent << "\n";
  return out.str();
}

}  // namespace hyperdec
