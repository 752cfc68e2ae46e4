// SPDX-License-Identifier: Apache-2.0
#include "gradient_check.hpp"

#include <cmath>

#include "hyperdec/ops.hpp"
#include "hyperdec/random.hpp"

namespace hyperdec::testing {

std::vector<double> numeric_gradient(const Objective& objective, Tensor& x, float h) {
  std::vector<double> out(x.numel());
  auto values = x.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const float original = values[i];
    const float up = original + h;
    const float down = original - h;
    values[i] = up;
    Tape t1 = Tape::no_grad();
    const double f_up = objective(t1).item();
    values[i] = down;
    Tape t2 = Tape::no_grad();
    const double f_down = objective(t2).item();
    values[i] = original;
    // divide by the step actually taken after f32 rounding
    out[i] = (f_up - f_down) / (static_cast<double>(up) - static_cast<double>(down));
  }
  return out;
}

double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  const double denom = std::sqrt(std::max(na, nn));
  return denom == 0.0 ? 0.0 : std::sqrt(diff) / denom;
}

std::vector<GradientReport> check_gradients(const Objective& objective,
                                            std::vector<std::pair<std::string, Tensor>> wrt, float h) {
  for (auto& [name, t] : wrt) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape tape;
    Tensor loss = objective(tape);
    tape.backward(loss);
  }
  std::vector<GradientReport> reports;
  for (auto& [name, t] : wrt) {
    std::vector<double> analytic(t.grad().begin(), t.grad().end());
    std::vector<double> numeric = numeric_gradient(objective, t, h);
    GradientReport r;
    r.name = name;
    r.rel_error = relative_error(analytic, numeric);
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      r.analytic_norm += analytic[i] * analytic[i];
      r.numeric_norm += numeric[i] * numeric[i];
    }
    r.analytic_norm = std::sqrt(r.analytic_norm);
    r.numeric_norm = std::sqrt(r.numeric_norm);
    reports.push_back(r);
  }
  return reports;
}

namespace {

using Leaves = std::vector<std::pair<std::string, Tensor>>;
using Built = std::pair<Objective, Leaves>;

Tensor input(Shape shape, Rng& rng) { return uniform_tensor(std::move(shape), 2.0f, rng, true); }

// Weighted sum with fixed random weights so no output entry is privileged.
Tensor weighted(Tape& tape, const Tensor& y, const Tensor& w) { return sum(tape, mul(tape, y, w)); }

// Entries in {+-0.5, +-1} so the product with the output rounds nothing.
Tensor weights_like(const Shape& shape, Rng& rng) {
  Tensor w = Tensor::zeros(shape);
  for (auto& x : w.data()) x = (rng.index(2) ? 1.0f : -1.0f) * (rng.index(2) ? 1.0f : 0.5f);
  return w;
}

std::size_t extent(Rng& rng, std::size_t lo = 2, std::size_t hi = 8) { return rng.between(lo, hi); }

}  // namespace

std::vector<PrimitiveCase> primitive_cases() {
  std::vector<PrimitiveCase> cases;

  cases.push_back({"matmul", [](unsigned seed) -> Built {
                     Rng rng(seed);
                     const auto m = extent(rng), k = extent(rng), n = extent(rng);
                     Tensor a = input({m, k}, rng), b = input({k, n}, rng), w = weights_like({m, n}, rng);
                     return {[=](Tape& t) { return weighted(t, matmul(t, a, b), w); }, {{"a", a}, {"b", b}}};
                   }});

  cases.push_back({"matmul_transposed", [](unsigned seed) -> Built {
                     Rng rng(seed);
                     const auto m = extent(rng), k = extent(rng), n = extent(rng);
                     Tensor a = input({m, k}, rng), b = input({n, k}, rng), w = weights_like({m, n}, rng);
                     return {[=](Tape& t) { return weighted(t, matmul_transposed(t, a, b), w); },
                             {{"a", a}, {"b", b}}};
                   }});

  cases.push_back({"grouped_matmul", [](unsigned seed) -> Built {
                     Rng rng(seed);
                     const auto g = extent(rng, 1, 2), r = extent(rng, 1, 4), k = extent(rng, 2, 4),
                                m = extent(rng, 2, 4);
                     Tensor x = input({g * r, k}, rng), w = input({g, k, m}, rng);
                     Tensor wt = weights_like({g * r, m}, rng);
                     return {[=](Tape& t) { return weighted(t, grouped_matmul(t, x, w), wt); }, {{"x", x}, {"w", w}}};
                   }});

  cases.push_back({"add", [](unsigned seed) -> Built {
                     Rng rng(seed);
                     const Shape s{extent(rng), extent(rng)};
                     Tensor a = input(s, rng), b = input(s, rng), w = weights_like(s, rng);
                     return {[=](Tape& t) { return weighted(t, add(t, a, b), w); }, {{"a", a}, {"b", b}}};
                   }});

  cases.push_back({"mul", [](unsigned seed) -> Built {
                     Rng rng(seed);
                     const Shape s{extent(rng), extent(rng)};
                     Tensor a = input(s, rng), b = input(s, rng), w = weights_like(s, rng);
                     return {[=](Tape& t) { return weighted(t, mul(t, a, b), w); }, {{"a", a}, {"b", b}}};
                   }});

  cases.push_back({"scale", [](unsigned seed) -> Built {
                     Rng rng(seed);
                     const Shape s{extent(rng), extent(rng)};
                     const float factor = rng.uniform(-2.0f, 2.0f);
                     Tensor x = input(s, rng), w = weights_like(s, rng);
                     return {[=](Tape& t) { return weighted(t, scale(t, x, factor), w); }, {{"x", x}}};
                   }});

  cases.push_back({"add_bias", [](unsigned seed) -> Built {
                     Rng rng(seed);
                     const auto r = extent(rng), c = extent(rng);
                     Tensor x = input({r, c}, rng), b = input({c}, rng), w = weights_like({r, c}, rng);
                     return {[=](Tape& t) { return weighted(t, add_bias(t, x, b), w); }, {{"x", x}, {"bias", b}}};
                   }});

  cases.push_back({"add_grouped_bias", [](unsigned seed) -> Built {
                     Rng rng(seed);
                     const auto g = extent(rng, 1, 4), r = extent(rng, 1, 2), c = extent(rng);
                     Tensor x = input({g * r, c}, rng), b = input({g, c}, rng), w = weights_like({g * r, c}, rng);
                     return {[=](Tape& t) { return weighted(t, add_grouped_bias(t, x, b), w); },
                             {{"x", x}, {"bias", b}}};
                   }});

  cases.push_back({"relu", [](unsigned seed) -> Built {
                     Rng rng(seed);
                     const Shape s{extent(rng), extent(rng)};
                     Tensor x = input(s, rng), w = weights_like(s, rng);
                     // keep clear of the kink at 0
                     for (auto& v : x.data()) {
                       while (std::fabs(v) < 1e-2f) v = rng.uniform(-2.0f, 2.0f);
                     }
                     return {[=](Tape& t) { return weighted(t, relu(t, x), w); }, {{"x", x}}};
                   }});

  cases.push_back({"softmax", [](unsigned seed) -> Built {
                     Rng rng(seed);
                     const Shape s{extent(rng), extent(rng)};
                     Tensor x = input(s, rng), w = weights_like(s, rng);
                     return {[=](Tape& t) { return weighted(t, softmax(t, x), w); }, {{"x", x}}};
                   }});

  cases.push_back({"layer_norm", [](unsigned seed) -> Built {
                     Rng rng(seed);
                     const auto r = extent(rng), d = extent(rng, 4, 8);
                     Tensor x = input({r, d}, rng), g = input({d}, rng), b = input({d}, rng);
                     Tensor w = weights_like({r, d}, rng);
                     return {[=](Tape& t) { return weighted(t, layer_norm(t, x, g, b), w); },
                             {{"x", x}, {"gain", g}, {"bias", b}}};
                   }});

  cases.push_back({"softmax_cross_entropy", [](unsigned seed) -> Built {
                     Rng rng(seed);
                     // mean reduction: more rows shrink the gradient but not the loss
                     const auto n = extent(rng, 2, 4), vocab = extent(rng);
                     Tensor logits = input({n, vocab}, rng);
                     std::vector<TokenId> targets(n);
                     for (auto& tg : targets) tg = static_cast<TokenId>(rng.index(vocab));
                     targets[rng.index(n)] = -1;  // one ignored position
                     return {[=](Tape& t) { return softmax_cross_entropy(t, logits, targets, -1); },
                             {{"logits", logits}}};
                   }});

  cases.push_back({"mean_pool", [](unsigned seed) -> Built {
                     Rng rng(seed);
                     const auto g = extent(rng, 1, 2), n = extent(rng, 2, 4), d = extent(rng);
                     Tensor x = input({g * n, d}, rng), w = weights_like({g, d}, rng);
                     std::vector<std::uint8_t> mask(g * n, 1);
                     for (std::size_t i = 0; i < g; ++i) mask[i * n + n - 1] = rng.index(2);
                     return {[=](Tape& t) { return weighted(t, mean_pool(t, x, mask, g), w); }, {{"x", x}}};
                   }});

  cases.push_back({"gather_rows", [](unsigned seed) -> Built {
                     Rng rng(seed);
                     const auto vocab = extent(rng), d = extent(rng), n = extent(rng);
                     Tensor table = input({vocab, d}, rng), w = weights_like({n, d}, rng);
                     std::vector<TokenId> ids(n);
                     for (auto& id : ids) id = static_cast<TokenId>(rng.index(vocab));
                     return {[=](Tape& t) { return weighted(t, gather_rows(t, table, ids), w); }, {{"table", table}}};
                   }});

  cases.push_back({"concat_cols", [](unsigned seed) -> Built {
                     Rng rng(seed);
                     const auto r = extent(rng), p = extent(rng, 1, 4), q = extent(rng, 1, 4);
                     Tensor a = input({r, p}, rng), b = input({r, q}, rng), w = weights_like({r, p + q}, rng);
                     return {[=](Tape& t) { return weighted(t, concat_cols(t, a, b), w); }, {{"a", a}, {"b", b}}};
                   }});

  cases.push_back({"broadcast_rows", [](unsigned seed) -> Built {
                     Rng rng(seed);
                     const auto r = extent(rng), c = extent(rng);
                     Tensor v = input({c}, rng), w = weights_like({r, c}, rng);
                     return {[=](Tape& t) { return weighted(t, broadcast_rows(t, v, r), w); }, {{"v", v}}};
                   }});

  cases.push_back({"reshape", [](unsigned seed) -> Built {
                     Rng rng(seed);
                     const auto r = extent(rng, 2, 4), c = extent(rng, 2, 4);
                     Tensor x = input({r, c}, rng), w = weights_like({c, r}, rng);
                     return {[=](Tape& t) { return weighted(t, reshape(t, x, {c, r}), w); }, {{"x", x}}};
                   }});

  cases.push_back({"sum", [](unsigned seed) -> Built {
                     Rng rng(seed);
                     Tensor x = input({extent(rng), extent(rng)}, rng);
                     return {[=](Tape& t) { return sum(t, x); }, {{"x", x}}};
                   }});

  cases.push_back({"attention_core", [](unsigned seed) -> Built {
                     Rng rng(seed);
                     const std::size_t batch = 2, heads = 2, dim = 4;
                     // at n = 2 a causal first query sees one key; longer rows sit nearer the f32 noise floor
                     const std::size_t n = 3;
                     const bool causal = rng.index(2) == 1;
                     Tensor q = input({batch * n, dim}, rng), k = input({batch * n, dim}, rng),
                            v = input({batch * n, dim}, rng), w = weights_like({batch * n, dim}, rng);
                     AttentionMask mask;
                     mask.causal = causal;
                     if (!causal) {
                       mask.key_valid.assign(batch * n, 1);
                       mask.key_valid[n - 1] = 0;  // pad the last key of the first element
                     }
                     return {[=](Tape& t) { return weighted(t, attention_core(t, q, k, v, batch, heads, mask), w); },
                             {{"q", q}, {"k", k}, {"v", v}}};
                   }});

  return cases;
}

}  // namespace hyperdec::testing
