// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hyperdec/model.hpp"

namespace hyperdec {

using Count = std::uint64_t;

/// Dimensions the closed-form counts use. l is layers per side.
struct CountInputs {
  Count l = 1;
  Count d = 1;
  Count a = 1;
  Count t = 1;
  Count b = 1;
  Count e_t = 1;
  Count e_l = 1;
};

Count count_adapters(Count l, Count a, Count d);
Count count_task_hypernet(const CountInputs& in);
/// Encoder adapters plus the decoder hypernetwork.
Count count_hyperdecoder(const CountInputs& in);

/// Whether a parameter enters the closed-form counts. Adapter weights and
/// biases, embedding tables and hypernetwork weight matrices count; biases
/// inside a hypernetwork or its MLP do not, and neither do the layer
/// embeddings of a generated side.
bool counted_by_formula(const NamedParam& p);
/// Sum of counted_by_formula sizes over the non-base parameters of a model.
Count count_instantiated(const Seq2SeqModel& model);
Count count_base(const Seq2SeqModel& model);
/// The trainable count the comparison table reports: every parameter for
/// full finetuning, count_instantiated otherwise.
Count count_trainable(const Seq2SeqModel& model);

/// Percentage of trainable to base parameters.
double trainable_fraction(Count trainable, Count base);

struct AccountRow {
  std::string mode;
  Count trainable = 0;
  double percent = 0.0;
};

/// Full-finetune, adapters, task hypernetwork and hyperdecoder at the given dims.
std::vector<AccountRow> account_table(const CountInputs& in, Count base);
std::string format_text(const std::vector<AccountRow>& rows);
std::string format_csv(const std::vector<AccountRow>& rows);

}  // namespace hyperdec
