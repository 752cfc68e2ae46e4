// SPDX-License-Identifier: Apache-2.0
#include "hyperdec/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace hyperdec {

namespace {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapC = Eigen::Map<const Mat>;
using MapM = Eigen::Map<Mat>;
using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapCD = Eigen::Map<const MatD>;
using Strided = Eigen::OuterStride<>;
using StridedC = Eigen::Map<const Mat, 0, Strided>;
using StridedM = Eigen::Map<Mat, 0, Strided>;

MapC as_mat(std::span<const float> s, std::size_t r, std::size_t c) {
  return MapC(s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MapM as_mat(std::span<float> s, std::size_t r, std::size_t c) {
  return MapM(s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

bool needs(const Tensor& t) { return t.requires_grad(); }

Shape with_last(const Shape& shape, std::size_t last) {
  Shape out = shape;
  out.back() = last;
  return out;
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
  if (b.rank() != 2 || a.cols() != b.shape()[0]) {
    throw ShapeError("matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.shape()[1];
  Tensor out = Tensor::zeros(with_last(a.shape(), n));
  as_mat(out.data(), m, n).noalias() = as_mat(a.data(), m, k) * as_mat(b.data(), k, n);
  if (tape.should_record({&a, &b})) {
    tape.record(out, [a, b, m, k, n](std::span<const float> g) {
      auto dc = as_mat(g, m, n);
      if (needs(a)) as_mat(accumulate_target(a), m, k).noalias() += dc * as_mat(b.data(), k, n).transpose();
      if (needs(b)) as_mat(accumulate_target(b), k, n).noalias() += as_mat(a.data(), m, k).transpose() * dc;
    });
  }
  return out;
}

Tensor matmul_transposed(Tape& tape, const Tensor& a, const Tensor& b) {
  if (b.rank() != 2 || a.cols() != b.shape()[1]) {
    throw ShapeError("matmul_transposed: inner extents differ " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()) + "^T");
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.shape()[0];
  Tensor out = Tensor::zeros(with_last(a.shape(), n));
  as_mat(out.data(), m, n).noalias() = as_mat(a.data(), m, k) * as_mat(b.data(), n, k).transpose();
  if (tape.should_record({&a, &b})) {
    tape.record(out, [a, b, m, k, n](std::span<const float> g) {
      auto dc = as_mat(g, m, n);
      if (needs(a)) as_mat(accumulate_target(a), m, k).noalias() += dc * as_mat(b.data(), n, k);
      if (needs(b)) as_mat(accumulate_target(b), n, k).noalias() += dc.transpose() * as_mat(a.data(), m, k);
    });
  }
  return out;
}

Tensor grouped_matmul(Tape& tape, const Tensor& x, const Tensor& w) {
  if (w.rank() != 3 || x.cols() != w.shape()[1] || x.rows() % w.shape()[0] != 0) {
    throw ShapeError("grouped_matmul: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(w.shape()));
  }
  const std::size_t groups = w.shape()[0], k = w.shape()[1], m = w.shape()[2];
  const std::size_t r = x.rows() / groups;
  Tensor out = Tensor::zeros(with_last(x.shape(), m));
  for (std::size_t g = 0; g < groups; ++g) {
    as_mat(out.data().subspan(g * r * m, r * m), r, m).noalias() =
        as_mat(x.data().subspan(g * r * k, r * k), r, k) * as_mat(w.data().subspan(g * k * m, k * m), k, m);
  }
  if (tape.should_record({&x, &w})) {
    tape.record(out, [x, w, groups, r, k, m](std::span<const float> gout) {
      for (std::size_t g = 0; g < groups; ++g) {
        auto dc = as_mat(gout.subspan(g * r * m, r * m), r, m);
        if (needs(x)) {
          as_mat(accumulate_target(x).subspan(g * r * k, r * k), r, k).noalias() +=
              dc * as_mat(w.data().subspan(g * k * m, k * m), k, m).transpose();
        }
        if (needs(w)) {
          as_mat(accumulate_target(w).subspan(g * k * m, k * m), k, m).noalias() +=
              as_mat(x.data().subspan(g * r * k, r * k), r, k).transpose() * dc;
        }
      }
    });
  }
  return out;
}

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data();
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] + bv[i];
  if (tape.should_record({&a, &b})) {
    tape.record(out, [a, b](std::span<const float> g) {
      for (const Tensor* t : {&a, &b}) {
        if (!needs(*t)) continue;
        auto acc = accumulate_target(*t);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
      }
    });
  }
  return out;
}

Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data();
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = av[i] * bv[i];
  if (tape.should_record({&a, &b})) {
    tape.record(out, [a, b](std::span<const float> g) {
      if (needs(a)) {
        auto acc = accumulate_target(a);
        auto bv = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * bv[i];
      }
      if (needs(b)) {
        auto acc = accumulate_target(b);
        auto av = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& x, float factor) {
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] * factor;
  if (tape.should_record({&x})) {
    tape.record(out, [x, factor](std::span<const float> g) {
      auto acc = accumulate_target(x);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * factor;
    });
  }
  return out;
}

Tensor add_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  const std::size_t c = x.cols();
  if (bias.numel() != c) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match columns of " + shape_str(x.shape()));
  }
  const std::size_t r = x.rows();
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.data();
  auto xv = x.data(), bv = bias.data();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) o[i * c + j] = xv[i * c + j] + bv[j];
  }
  if (tape.should_record({&x, &bias})) {
    tape.record(out, [x, bias, r, c](std::span<const float> g) {
      if (needs(x)) {
        auto acc = accumulate_target(x);
        for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
      }
      if (needs(bias)) {
        auto acc = accumulate_target(bias);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) acc[j] += g[i * c + j];
        }
      }
    });
  }
  return out;
}

Tensor add_grouped_bias(Tape& tape, const Tensor& x, const Tensor& bias) {
  const std::size_t c = x.cols();
  if (bias.cols() != c || x.rows() % bias.rows() != 0) {
    throw ShapeError("add_grouped_bias: bias " + shape_str(bias.shape()) + " incompatible with " +
                     shape_str(x.shape()));
  }
  const std::size_t groups = bias.rows(), r = x.rows() / groups;
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.data();
  auto xv = x.data(), bv = bias.data();
  for (std::size_t g = 0; g < groups; ++g) {
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t row = (g * r + i) * c;
      for (std::size_t j = 0; j < c; ++j) o[row + j] = xv[row + j] + bv[g * c + j];
    }
  }
  if (tape.should_record({&x, &bias})) {
    tape.record(out, [x, bias, groups, r, c](std::span<const float> gr) {
      if (needs(x)) {
        auto acc = accumulate_target(x);
        for (std::size_t i = 0; i < gr.size(); ++i) acc[i] += gr[i];
      }
      if (needs(bias)) {
        auto acc = accumulate_target(bias);
        for (std::size_t g = 0; g < groups; ++g) {
          for (std::size_t i = 0; i < r; ++i) {
            const std::size_t row = (g * r + i) * c;
            for (std::size_t j = 0; j < c; ++j) acc[g * c + j] += gr[row + j];
          }
        }
      }
    });
  }
  return out;
}

Tensor relu(Tape& tape, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xv[i] > 0.0f ? xv[i] : 0.0f;
  if (tape.should_record({&x})) {
    tape.record(out, [x](std::span<const float> g) {
      auto acc = accumulate_target(x);
      auto xv = x.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xv[i] > 0.0f) acc[i] += g[i];
      }
    });
  }
  return out;
}

Tensor softmax(Tape& tape, const Tensor& x) {
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.data();
  auto xv = x.data();
  for (std::size_t i = 0; i < r; ++i) {
    const float* row = xv.data() + i * c;
    float* dst = o.data() + i * c;
    const float mx = *std::max_element(row, row + c);
    double total = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      dst[j] = std::exp(row[j] - mx);
      total += dst[j];
    }
    const float inv = static_cast<float>(1.0 / total);
    for (std::size_t j = 0; j < c; ++j) dst[j] *= inv;
  }
  if (tape.should_record({&x})) {
    tape.record(out, [x, out, r, c](std::span<const float> g) {
      auto acc = accumulate_target(x);
      auto p = out.data();
      for (std::size_t i = 0; i < r; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * p[i * c + j];
        for (std::size_t j = 0; j < c; ++j) {
          acc[i * c + j] += p[i * c + j] * (g[i * c + j] - static_cast<float>(dot));
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, float eps) {
  const std::size_t d = x.cols();
  if (gain.numel() != d || bias.numel() != d) {
    throw ShapeError("layer_norm: gain " + shape_str(gain.shape()) + " / bias " + shape_str(bias.shape()) +
                     " do not match last extent of " + shape_str(x.shape()));
  }
  if (!(eps > 0.0f)) throw std::invalid_argument("layer_norm: eps must be positive");
  const std::size_t r = x.rows();
  Tensor out = Tensor::zeros(x.shape());
  std::vector<float> xhat(x.numel());
  std::vector<float> inv_std(r);
  auto xv = x.data(), gv = gain.data(), bv = bias.data();
  auto o = out.data();
  for (std::size_t i = 0; i < r; ++i) {
    const float* row = xv.data() + i * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[i] = static_cast<float>(inv);
    for (std::size_t j = 0; j < d; ++j) {
      const float h = static_cast<float>((row[j] - mean) * inv);
      xhat[i * d + j] = h;
      o[i * d + j] = h * gv[j] + bv[j];
    }
  }
  if (tape.should_record({&x, &gain, &bias})) {
    tape.record(out, [x, gain, bias, r, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                         std::span<const float> g) {
      if (needs(gain)) {
        auto acc = accumulate_target(gain);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < d; ++j) acc[j] += g[i * d + j] * xhat[i * d + j];
        }
      }
      if (needs(bias)) {
        auto acc = accumulate_target(bias);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < d; ++j) acc[j] += g[i * d + j];
        }
      }
      if (needs(x)) {
        auto acc = accumulate_target(x);
        auto gv = gain.data();
        std::vector<double> dxhat(d);
        for (std::size_t i = 0; i < r; ++i) {
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            dxhat[j] = static_cast<double>(g[i * d + j]) * gv[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[i * d + j];
          }
          mean_dxhat /= static_cast<double>(d);
          mean_dxhat_xhat /= static_cast<double>(d);
          for (std::size_t j = 0; j < d; ++j) {
            acc[i * d + j] += static_cast<float>(inv_std[i] * (dxhat[j] - mean_dxhat - xhat[i * d + j] * mean_dxhat_xhat));
          }
        }
      }
    });
  }
  return out;
}

Tensor softmax_cross_entropy(Tape& tape, const Tensor& logits, std::span<const TokenId> targets, TokenId ignore_id) {
  const std::size_t n = logits.rows(), vocab = logits.cols();
  if (targets.size() != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  std::size_t count = 0;
  for (auto t : targets) {
    if (t == ignore_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("softmax_cross_entropy: target " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    ++count;
  }
  auto lv = logits.data();
  std::vector<float> probs(count == 0 ? 0 : logits.numel());
  double total = 0.0;
  if (count > 0) {
    for (std::size_t i = 0; i < n; ++i) {
      if (targets[i] == ignore_id) continue;
      const float* row = lv.data() + i * vocab;
      const float mx = *std::max_element(row, row + vocab);
      double z = 0.0;
      for (std::size_t j = 0; j < vocab; ++j) z += std::exp(static_cast<double>(row[j] - mx));
      const double log_z = std::log(z);
      for (std::size_t j = 0; j < vocab; ++j) {
        probs[i * vocab + j] = static_cast<float>(std::exp(row[j] - mx - log_z));
      }
      total += log_z - (row[targets[i]] - mx);
    }
  }
  const float loss = count == 0 ? 0.0f : static_cast<float>(total / static_cast<double>(count));
  Tensor out = Tensor::scalar(loss);
  if (tape.should_record({&logits})) {
    std::vector<TokenId> tgt(targets.begin(), targets.end());
    tape.record(out, [logits, tgt = std::move(tgt), probs = std::move(probs), count, ignore_id, vocab](
                         std::span<const float> g) {
      auto acc = accumulate_target(logits);
      if (count == 0) return;
      const float factor = g[0] / static_cast<float>(count);
      for (std::size_t i = 0; i < tgt.size(); ++i) {
        if (tgt[i] == ignore_id) continue;
        for (std::size_t j = 0; j < vocab; ++j) acc[i * vocab + j] += factor * probs[i * vocab + j];
        acc[i * vocab + static_cast<std::size_t>(tgt[i])] -= factor;
      }
    });
  }
  return out;
}

Tensor mean_pool(Tape& tape, const Tensor& x, std::span<const std::uint8_t> mask, std::size_t groups) {
  const std::size_t rows = x.rows(), d = x.cols();
  if (groups == 0 || rows % groups != 0 || mask.size() != rows) {
    throw ShapeError("mean_pool: " + shape_str(x.shape()) + " with mask of " + std::to_string(mask.size()) +
                     " flags does not split into " + std::to_string(groups) + " groups");
  }
  const std::size_t n = rows / groups;
  std::vector<float> inv_count(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    std::size_t kept = 0;
    for (std::size_t i = 0; i < n; ++i) kept += mask[g * n + i] ? 1 : 0;
    if (kept == 0) throw DegenerateInputError("mean_pool: group " + std::to_string(g) + " has every row masked");
    inv_count[g] = 1.0f / static_cast<float>(kept);
  }
  Tensor out = Tensor::zeros({groups, d});
  auto o = out.data();
  auto xv = x.data();
  std::vector<double> acc(d);
  for (std::size_t g = 0; g < groups; ++g) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      if (!mask[g * n + i]) continue;
      const float* row = xv.data() + (g * n + i) * d;
      for (std::size_t j = 0; j < d; ++j) acc[j] += row[j];
    }
    for (std::size_t j = 0; j < d; ++j) o[g * d + j] = static_cast<float>(acc[j] * inv_count[g]);
  }
  if (tape.should_record({&x})) {
    std::vector<std::uint8_t> keep(mask.begin(), mask.end());
    tape.record(out, [x, keep = std::move(keep), inv_count = std::move(inv_count), groups, n, d](
                         std::span<const float> g) {
      auto accx = accumulate_target(x);
      for (std::size_t grp = 0; grp < groups; ++grp) {
        for (std::size_t i = 0; i < n; ++i) {
          if (!keep[grp * n + i]) continue;
          float* dst = accx.data() + (grp * n + i) * d;
          for (std::size_t j = 0; j < d; ++j) dst[j] += g[grp * d + j] * inv_count[grp];
        }
      }
    });
  }
  return out;
}

Tensor mean_pool(Tape& tape, const Tensor& x, std::span<const std::uint8_t> mask) {
  Tensor pooled = mean_pool(tape, x, mask, 1);
  return reshape(tape, pooled, {x.cols()});
}

Tensor gather_rows(Tape& tape, const Tensor& table, std::span<const TokenId> ids) {
  const std::size_t vocab = table.rows(), d = table.cols();
  for (auto id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("gather_rows: id " + std::to_string(id) + " outside table " + shape_str(table.shape()));
    }
  }
  if (ids.empty()) throw ShapeError("gather_rows: no ids");
  Tensor out = Tensor::zeros({ids.size(), d});
  auto o = out.data();
  auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * d, d, o.data() + i * d);
  }
  if (tape.should_record({&table})) {
    std::vector<TokenId> idx(ids.begin(), ids.end());
    tape.record(out, [table, idx = std::move(idx), d](std::span<const float> g) {
      auto acc = accumulate_target(table);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        float* dst = acc.data() + static_cast<std::size_t>(idx[i]) * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] += g[i * d + j];
      }
    });
  }
  return out;
}

Tensor concat_cols(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rows() != b.rows()) {
    throw ShapeError("concat_cols: row counts differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const std::size_t r = a.rows(), p = a.cols(), q = b.cols();
  Tensor out = Tensor::zeros({r, p + q});
  auto o = out.data();
  auto av = a.data(), bv = b.data();
  for (std::size_t i = 0; i < r; ++i) {
    std::copy_n(av.data() + i * p, p, o.data() + i * (p + q));
    std::copy_n(bv.data() + i * q, q, o.data() + i * (p + q) + p);
  }
  if (tape.should_record({&a, &b})) {
    tape.record(out, [a, b, r, p, q](std::span<const float> g) {
      if (needs(a)) {
        auto acc = accumulate_target(a);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < p; ++j) acc[i * p + j] += g[i * (p + q) + j];
        }
      }
      if (needs(b)) {
        auto acc = accumulate_target(b);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < q; ++j) acc[i * q + j] += g[i * (p + q) + p + j];
        }
      }
    });
  }
  return out;
}

Tensor broadcast_rows(Tape& tape, const Tensor& v, std::size_t rows) {
  if (rows == 0) throw ShapeError("broadcast_rows: zero rows");
  const std::size_t c = v.numel();
  Tensor out = Tensor::zeros({rows, c});
  auto o = out.data();
  auto vv = v.data();
  for (std::size_t i = 0; i < rows; ++i) std::copy_n(vv.data(), c, o.data() + i * c);
  if (tape.should_record({&v})) {
    tape.record(out, [v, rows, c](std::span<const float> g) {
      auto acc = accumulate_target(v);
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < c; ++j) acc[j] += g[i * c + j];
      }
    });
  }
  return out;
}

Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  Tensor out = Tensor::from(std::move(shape), std::vector<float>(x.data().begin(), x.data().end()));
  if (tape.should_record({&x})) {
    tape.record(out, [x](std::span<const float> g) {
      auto acc = accumulate_target(x);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
    });
  }
  return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
  double total = 0.0;
  for (float v : x.data()) total += v;
  Tensor out = Tensor::scalar(static_cast<float>(total));
  if (tape.should_record({&x})) {
    tape.record(out, [x](std::span<const float> g) {
      auto acc = accumulate_target(x);
      for (auto& a : acc) a += g[0];
    });
  }
  return out;
}

namespace {

struct AttentionDims {
  std::size_t batch, heads, nq, nk, model, head;
};

AttentionDims attention_dims(const Tensor& q, const Tensor& k, std::size_t batch, std::size_t heads,
                             const AttentionMask& mask) {
  if (batch == 0 || heads == 0 || q.cols() % heads != 0 || k.cols() != q.cols() || q.rows() % batch != 0 ||
      k.rows() % batch != 0) {
    throw ShapeError("attention: incompatible q " + shape_str(q.shape()) + " / k " + shape_str(k.shape()) +
                     " for batch " + std::to_string(batch) + ", heads " + std::to_string(heads));
  }
  AttentionDims dims{batch, heads, q.rows() / batch, k.rows() / batch, q.cols(), q.cols() / heads};
  if (!mask.key_valid.empty() && mask.key_valid.size() != batch * dims.nk) {
    throw ShapeError("attention: key mask holds " + std::to_string(mask.key_valid.size()) + " flags, expected " +
                     std::to_string(batch * dims.nk));
  }
  if (mask.causal && dims.nq != dims.nk) {
    throw ShapeError("attention: causal mask needs square scores, got " + std::to_string(dims.nq) + "x" +
                     std::to_string(dims.nk));
  }
  return dims;
}

// Softmax weights for every (batch, head); `probs` receives [B][H][nq][nk].
void compute_weights(const Tensor& q, const Tensor& k, const AttentionDims& dims, const AttentionMask& mask,
                     std::vector<double>& probs) {
  const auto [batch, heads, nq, nk, model, head] = dims;
  probs.assign(batch * heads * nq * nk, 0.0);
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head));
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  MatD scores(static_cast<Eigen::Index>(nq), static_cast<Eigen::Index>(nk));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      StridedC qh(q.data().data() + b * nq * model + h * head, nq, head, Strided(model));
      StridedC kh(k.data().data() + b * nk * model + h * head, nk, head, Strided(model));
      scores.noalias() = qh.cast<double>() * kh.cast<double>().transpose();
      double* p = probs.data() + ((b * heads + h) * nq) * nk;
      for (std::size_t i = 0; i < nq; ++i) {
        double mx = kNegInf;
        bool any_visible = false;
        for (std::size_t j = 0; j < nk; ++j) {
          const bool visible = (mask.key_valid.empty() || mask.key_valid[b * nk + j]) && (!mask.causal || j <= i);
          const double s = visible ? scores(i, j) * inv_sqrt : kNegInf;
          p[i * nk + j] = s;
          any_visible = any_visible || visible;
          mx = std::max(mx, s);
        }
        if (!any_visible) {
          throw DegenerateInputError("attention: query " + std::to_string(i) + " of batch element " +
                                     std::to_string(b) + " sees no key");
        }
        double total = 0.0;
        for (std::size_t j = 0; j < nk; ++j) {
          p[i * nk + j] = p[i * nk + j] == kNegInf ? 0.0 : std::exp(p[i * nk + j] - mx);
          total += p[i * nk + j];
        }
        for (std::size_t j = 0; j < nk; ++j) p[i * nk + j] /= total;
      }
    }
  }
}

}  // namespace

std::vector<float> attention_weights(const Tensor& q, const Tensor& k, std::size_t batch, std::size_t heads,
                                     const AttentionMask& mask) {
  const auto dims = attention_dims(q, k, batch, heads, mask);
  std::vector<double> probs;
  compute_weights(q, k, dims, mask, probs);
  return {probs.begin(), probs.end()};
}

Tensor attention_core(Tape& tape, const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                      std::size_t heads, const AttentionMask& mask) {
  const auto dims = attention_dims(q, k, batch, heads, mask);
  if (v.shape() != k.shape()) {
    throw ShapeError("attention: value " + shape_str(v.shape()) + " does not match key " + shape_str(k.shape()));
  }
  std::vector<double> exact;
  compute_weights(q, k, dims, mask, exact);
  const auto [B, H, nq, nk, model, head] = dims;
  Tensor out = Tensor::zeros(q.shape());
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < H; ++h) {
      MapCD p(exact.data() + ((b * H + h) * nq) * nk, nq, nk);
      StridedC vh(v.data().data() + b * nk * model + h * head, nk, head, Strided(model));
      StridedM oh(out.data().data() + b * nq * model + h * head, nq, head, Strided(model));
      oh = (p * vh.cast<double>()).cast<float>();
    }
  }
  std::vector<float> probs(exact.begin(), exact.end());
  if (tape.should_record({&q, &k, &v})) {
    tape.record(out, [q, k, v, dims, probs = std::move(probs)](std::span<const float> g) {
      const auto [B, H, nq, nk, model, head] = dims;
      const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(head));
      Mat dp(static_cast<Eigen::Index>(nq), static_cast<Eigen::Index>(nk));
      float* dq = needs(q) ? accumulate_target(q).data() : nullptr;
      float* dk = needs(k) ? accumulate_target(k).data() : nullptr;
      float* dv = needs(v) ? accumulate_target(v).data() : nullptr;
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
          MapC p(probs.data() + ((b * H + h) * nq) * nk, nq, nk);
          StridedC go(g.data() + b * nq * model + h * head, nq, head, Strided(model));
          StridedC vh(v.data().data() + b * nk * model + h * head, nk, head, Strided(model));
          if (dv != nullptr) {
            StridedM dvh(dv + b * nk * model + h * head, nk, head, Strided(model));
            dvh.noalias() += p.transpose() * go;
          }
          if (dq == nullptr && dk == nullptr) continue;
          dp.noalias() = go * vh.transpose();
          // softmax backward, then the 1/sqrt(head) scale of the scores
          for (std::size_t i = 0; i < nq; ++i) {
            float dot = 0.0f;
            for (std::size_t j = 0; j < nk; ++j) dot += dp(i, j) * p(i, j);
            for (std::size_t j = 0; j < nk; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot) * inv_sqrt;
          }
          if (dq != nullptr) {
            StridedC kh(k.data().data() + b * nk * model + h * head, nk, head, Strided(model));
            StridedM dqh(dq + b * nq * model + h * head, nq, head, Strided(model));
            dqh.noalias() += dp * kh;
          }
          if (dk != nullptr) {
            StridedC qh(q.data().data() + b * nq * model + h * head, nq, head, Strided(model));
            StridedM dkh(dk + b * nk * model + h * head, nk, head, Strided(model));
            dkh.noalias() += dp.transpose() * qh;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace hyperdec
