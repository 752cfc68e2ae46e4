// SPDX-License-Identifier: Apache-2.0
#include "support/reference_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace hyperdec::testing {
namespace {

struct Mat {
  std::size_t r = 0, c = 0;
  std::vector<double> v;
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols) : r(rows), c(cols), v(rows * cols, 0.0) {}
  double& operator()(std::size_t i, std::size_t j) { return v[i * c + j]; }
  double operator()(std::size_t i, std::size_t j) const { return v[i * c + j]; }
};

Mat product(const Mat& a, const std::vector<double>& w, std::size_t cols) {
  Mat out(a.r, cols);
  for (std::size_t i = 0; i < a.r; ++i) {
    for (std::size_t k = 0; k < a.c; ++k) {
      for (std::size_t j = 0; j < cols; ++j) out(i, j) += a(i, k) * w[k * cols + j];
    }
  }
  return out;
}

void add_row(Mat& a, const std::vector<double>& b) {
  for (std::size_t i = 0; i < a.r; ++i) {
    for (std::size_t j = 0; j < a.c; ++j) a(i, j) += b[j];
  }
}

void add_into(Mat& a, const Mat& b) {
  for (std::size_t i = 0; i < a.v.size(); ++i) a.v[i] += b.v[i];
}

// Records which units are active so callers can tell when a perturbation
// moved across a kink.
void relu_inplace(Mat& a, std::vector<bool>* pattern) {
  for (auto& x : a.v) {
    if (pattern) pattern->push_back(x > 0.0);
    x = std::max(0.0, x);
  }
}

struct Adapter {
  std::vector<double> wd, bd, wu, bu;
};

}  // namespace

struct Evaluator {
  const ModelConfig& cfg;
  const std::map<std::string, std::vector<double>>& p;
  std::vector<bool>* pattern = nullptr;

  const std::vector<double>& w(const std::string& name) const { return p.at(name); }

  Mat layer_norm(const Mat& x, const std::string& n) const {
    const auto& g = w(n + ".gain");
    const auto& b = w(n + ".bias");
    Mat out(x.r, x.c);
    for (std::size_t i = 0; i < x.r; ++i) {
      double mean = 0.0, var = 0.0;
      for (std::size_t j = 0; j < x.c; ++j) mean += x(i, j);
      mean /= static_cast<double>(x.c);
      for (std::size_t j = 0; j < x.c; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
      var /= static_cast<double>(x.c);
      const double inv = 1.0 / std::sqrt(var + 1e-6);
      for (std::size_t j = 0; j < x.c; ++j) out(i, j) = (x(i, j) - mean) * inv * g[j] + b[j];
    }
    return out;
  }

  Mat attention(const Mat& xq, const Mat& xkv, const std::string& n, const std::vector<std::uint8_t>& key_valid,
                bool causal) const {
    const std::size_t d = cfg.d_model, heads = cfg.n_heads, hd = d / heads;
    const Mat q = product(xq, w(n + ".wq"), d), k = product(xkv, w(n + ".wk"), d), v = product(xkv, w(n + ".wv"), d);
    Mat o(xq.r, d);
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < xq.r; ++i) {
        std::vector<double> s(xkv.r, -std::numeric_limits<double>::infinity());
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < xkv.r; ++j) {
          if ((!key_valid.empty() && !key_valid[j]) || (causal && j > i)) continue;
          double dot = 0.0;
          for (std::size_t c = 0; c < hd; ++c) dot += q(i, h * hd + c) * k(j, h * hd + c);
          s[j] = dot / std::sqrt(static_cast<double>(hd));
          mx = std::max(mx, s[j]);
        }
        double z = 0.0;
        for (auto& x : s) z += (x = std::exp(x - mx));
        for (std::size_t j = 0; j < xkv.r; ++j) {
          for (std::size_t c = 0; c < hd; ++c) o(i, h * hd + c) += s[j] / z * v(j, h * hd + c);
        }
      }
    }
    return product(o, w(n + ".wo"), d);
  }

  Mat feed_forward(const Mat& x, const std::string& n, const Adapter* ad, std::size_t a) const {
    const std::size_t d = cfg.d_model;
    const Mat h = layer_norm(x, n + ".ln_ff");
    Mat f = product(h, w(n + ".ff.w1"), cfg.d_ff);
    add_row(f, w(n + ".ff.b1"));
    relu_inplace(f, pattern);
    Mat y = product(f, w(n + ".ff.w2"), d);
    add_row(y, w(n + ".ff.b2"));
    add_into(y, x);
    if (ad == nullptr) return y;
    Mat u = product(cfg.adapter_input_post_layernorm ? h : x, ad->wd, a);
    add_row(u, ad->bd);
    relu_inplace(u, pattern);
    Mat out = product(u, ad->wu, d);
    add_row(out, ad->bu);
    add_into(y, out);
    return y;
  }

  Mat embed(const std::vector<TokenId>& ids, const std::string& pos) const {
    const std::size_t d = cfg.d_model;
    Mat x(ids.size(), d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      for (std::size_t j = 0; j < d; ++j) x(i, j) = w("base.tok_emb")[ids[i] * d + j] + w(pos)[i * d + j];
    }
    return x;
  }

  Mat encode(const std::vector<TokenId>& ids, const std::vector<std::uint8_t>& mask,
             const std::vector<Adapter>* ads) const {
    Mat x = embed(ids, "base.enc_pos");
    for (std::size_t l = 0; l < cfg.n_enc_layers; ++l) {
      const std::string n = "base.enc." + std::to_string(l);
      add_into(x, attention(layer_norm(x, n + ".ln_attn"), layer_norm(x, n + ".ln_attn"), n + ".self_attn", mask, false));
      x = feed_forward(x, n, ads ? &(*ads)[l] : nullptr, cfg.enc_adapter_dim);
    }
    return layer_norm(x, "base.enc_final");
  }

  std::vector<double> pooled(const Mat& h, const std::vector<std::uint8_t>& mask, const std::string& n) const {
    const std::size_t d = cfg.d_model;
    Mat e(1, d);
    double count = 0.0;
    for (std::size_t i = 0; i < h.r; ++i) {
      if (!mask[i]) continue;
      count += 1.0;
      for (std::size_t j = 0; j < d; ++j) e(0, j) += h(i, j);
    }
    for (auto& x : e.v) x /= count;
    if (!cfg.use_mlp) return e.v;
    Mat u = product(e, w(n + ".mlp.w1"), d);
    add_row(u, w(n + ".mlp.b1"));
    relu_inplace(u, pattern);
    Mat out = product(u, w(n + ".mlp.w2"), d);
    add_row(out, w(n + ".mlp.b2"));
    return out.v;
  }

  std::vector<Adapter> generate(const std::vector<double>& e, const std::string& n, std::size_t layers,
                                std::size_t a) const {
    const std::size_t d = cfg.d_model;
    const auto& table = w(n + ".layer_embeds");
    const std::size_t el = table.size() / layers, b = w(n + ".b0").size();
    std::vector<Adapter> out;
    for (std::size_t l = 0; l < layers; ++l) {
      Mat in(1, e.size() + el);
      std::copy(e.begin(), e.end(), in.v.begin());
      std::copy(table.begin() + l * el, table.begin() + (l + 1) * el, in.v.begin() + e.size());
      Mat h = product(in, w(n + ".w0"), b);
      add_row(h, w(n + ".b0"));
      relu_inplace(h, pattern);
      auto head = [&](const char* k, std::size_t cols) {
        Mat m = product(h, w(n + ".w" + k), cols);
        add_row(m, w(n + ".b" + k));
        return m.v;
      };
      out.push_back({head("2", d * a), head("4", a), head("1", a * d), head("3", d)});
    }
    return out;
  }

  std::vector<double> task_embedding(const std::string& n, std::size_t task, bool mean) const {
    const auto& table = w(n + ".task_embeds");
    const std::size_t et = cfg.task_embed_dim, t = table.size() / et;
    std::vector<double> e(et, 0.0);
    if (!mean) return {table.begin() + task * et, table.begin() + (task + 1) * et};
    for (std::size_t i = 0; i < t; ++i) {
      for (std::size_t j = 0; j < et; ++j) e[j] += table[i * et + j] / static_cast<double>(t);
    }
    return e;
  }

  std::vector<Adapter> manual(const std::string& n, std::size_t layers) const {
    std::vector<Adapter> out;
    for (std::size_t l = 0; l < layers; ++l) {
      const std::string k = n + "." + std::to_string(l);
      out.push_back({w(k + ".w_down"), w(k + ".b_down"), w(k + ".w_up"), w(k + ".b_up")});
    }
    return out;
  }

  // Adapters for one example on one side; empty when the side has none.
  std::vector<Adapter> side(AdaptationMode mode, const std::string& prefix, std::size_t layers, std::size_t a,
                            const Mat* h, const std::vector<std::uint8_t>& mask, std::size_t task,
                            bool mean_task) const {
    switch (mode) {
      case AdaptationMode::none:
        return {};
      case AdaptationMode::manual:
        return manual(prefix + ".adapter", layers);
      case AdaptationMode::task:
        return generate(task_embedding(prefix + ".task", task, mean_task), prefix + ".task", layers, a);
      case AdaptationMode::generated:
        return generate(pooled(*h, mask, prefix + ".hyper"), prefix + ".hyper", layers, a);
    }
    return {};
  }

  // Logits [m x V] for one example.
  Mat example_logits(const std::vector<TokenId>& src, const std::vector<std::uint8_t>& mask,
                     const std::vector<TokenId>& prefix, std::size_t task, bool mean_task) const {
    const std::size_t d = cfg.d_model;
    Mat plain;
    if (cfg.enc_mode == AdaptationMode::generated) plain = encode(src, mask, nullptr);
    const auto enc_ads = side(cfg.enc_mode, "enc", cfg.n_enc_layers, cfg.enc_adapter_dim, &plain, mask, task, mean_task);
    const Mat enc_h = encode(src, mask, enc_ads.empty() ? nullptr : &enc_ads);
    const auto dec_ads = side(cfg.dec_mode, "dec", cfg.n_dec_layers, cfg.dec_adapter_dim, &enc_h, mask, task, mean_task);
    Mat x = embed(prefix, "base.dec_pos");
    for (std::size_t l = 0; l < cfg.n_dec_layers; ++l) {
      const std::string n = "base.dec." + std::to_string(l);
      Mat h = layer_norm(x, n + ".ln_self");
      add_into(x, attention(h, h, n + ".self_attn", {}, true));
      add_into(x, attention(layer_norm(x, n + ".ln_cross"), enc_h, n + ".cross_attn", mask, false));
      x = feed_forward(x, n, dec_ads.empty() ? nullptr : &dec_ads[l], cfg.dec_adapter_dim);
    }
    const Mat h = layer_norm(x, "base.dec_final");
    const auto& emb = w("base.tok_emb");
    Mat out(h.r, cfg.vocab_size);
    for (std::size_t i = 0; i < h.r; ++i) {
      for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += h(i, j) * emb[v * d + j];
        out(i, v) = s / std::sqrt(static_cast<double>(d));
      }
    }
    return out;
  }
};

ReferenceModel::ReferenceModel(const ModelConfig& cfg, const NamedTensors& state) : cfg_(cfg) {
  for (const auto& [name, t] : state) params_[name] = std::vector<double>(t.data().begin(), t.data().end());
}

namespace {

std::vector<TokenId> row_of(const TokenBatch& b, std::size_t i, std::vector<std::uint8_t>* mask) {
  std::vector<TokenId> ids(b.ids.begin() + i * b.len, b.ids.begin() + (i + 1) * b.len);
  if (mask) mask->assign(b.mask.begin() + i * b.len, b.mask.begin() + (i + 1) * b.len);
  return ids;
}

}  // namespace

std::vector<double> ReferenceModel::logits(const Seq2SeqBatch& batch, std::vector<bool>* relu_pattern) const {
  Evaluator ev{cfg_, params_, relu_pattern};
  std::vector<double> out;
  for (std::size_t i = 0; i < batch.src.batch; ++i) {
    std::vector<std::uint8_t> mask;
    const auto src = row_of(batch.src, i, &mask);
    const auto prefix = row_of(batch.tgt_in, i, nullptr);
    const Mat l = ev.example_logits(src, mask, prefix, batch.task_ids[i], false);
    out.insert(out.end(), l.v.begin(), l.v.end());
  }
  return out;
}

double ReferenceModel::loss(const Seq2SeqBatch& batch, std::vector<bool>* relu_pattern) const {
  const auto z = logits(batch, relu_pattern);
  const std::size_t vocab = cfg_.vocab_size;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < batch.tgt_out.size(); ++r) {
    if (batch.tgt_out[r] == kIgnoreTarget) continue;
    const double* row = z.data() + r * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double s = 0.0;
    for (std::size_t v = 0; v < vocab; ++v) s += std::exp(row[v] - mx);
    total += mx + std::log(s) - row[batch.tgt_out[r]];
    ++count;
  }
  return total / static_cast<double>(count);
}

std::vector<double> ReferenceModel::numeric_gradient(const Seq2SeqBatch& batch, const std::string& name, double h,
                                                     bool* crosses_kink) {
  auto& x = params_.at(name);
  std::vector<double> g(x.size());
  std::vector<bool> centre, up_pattern, down_pattern;
  if (crosses_kink) {
    loss(batch, &centre);
    *crosses_kink = false;
  }
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    up_pattern.clear();
    down_pattern.clear();
    x[i] = keep + h;
    const double up = loss(batch, crosses_kink ? &up_pattern : nullptr);
    x[i] = keep - h;
    const double down = loss(batch, crosses_kink ? &down_pattern : nullptr);
    x[i] = keep;
    if (crosses_kink && (up_pattern != centre || down_pattern != centre)) *crosses_kink = true;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

}  // namespace hyperdec::testing
