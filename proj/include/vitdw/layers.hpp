#pragma once

#include <optional>

#include "vitdw/rng.hpp"
#include "vitdw/tensor.hpp"

namespace vitdw {

// Batch of patch tokens [batch, L(+1), dim]. When the class token is present
// it occupies index 0 and L = grid_h * grid_w patch tokens follow.
template <typename T>
struct TokenSequence {
  Tensor<T> tokens;
  bool has_class_token = false;
  int64_t grid_h = 0;
  int64_t grid_w = 0;

  int64_t batch() const { return tokens.dim(0); }
  int64_t seq_len() const { return tokens.dim(1); }
  int64_t dim() const { return tokens.dim(2); }
  int64_t num_patches() const { return grid_h * grid_w; }

  void validate() const {
    check_shape(tokens.rank() == 3,
                "TokenSequence: tokens must be [batch, seq, dim], got " + shape_str(tokens.shape()));
    const int64_t expect = grid_h * grid_w + (has_class_token ? 1 : 0);
    check_shape(seq_len() == expect,
                "TokenSequence: " + std::to_string(seq_len()) + " tokens but grid " +
                    std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                    (has_class_token ? " + class token" : "") + " implies " + std::to_string(expect));
  }

  // Patch tokens only (drops the class token when present).
  Tensor<T> patch_tokens() const {
    if (!has_class_token) return tokens;
    return slice(tokens, 1, 1, num_patches());
  }
};

// ---------------------------------------------------------------------------
// Parameter records
// ---------------------------------------------------------------------------

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma, beta;
  double eps = 1e-6;
};

template <typename T>
struct BatchNorm2dParams {
  Tensor<T> gamma, beta;
  Tensor<T> running_mean, running_var;  // buffers, updated in training mode only
  double momentum = 0.1;
  double eps = 1e-5;
};

template <typename T>
struct LinearParams {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]
};

template <typename T>
struct MhsaParams {
  LayerNormParams<T> ln;
  LinearParams<T> query, key, value, out;
  int heads = 1;
};

template <typename T>
struct FfnParams {
  LayerNormParams<T> ln;
  LinearParams<T> expand;   // dim -> mlp_dim
  LinearParams<T> project;  // mlp_dim -> dim
};

template <typename T>
struct BlockParams {
  MhsaParams<T> attn;
  FfnParams<T> ffn;
};

template <typename T>
struct PatchEmbedParams {
  int64_t patch_size = 0;
  Tensor<T> weight;  // [dim, in_channels * p * p]
  Tensor<T> bias;    // [dim]
};

// Everything Eq-1 style input assembly needs: projection, then the optional
// class token, then the optional positional embedding.
template <typename T>
struct InputEmbedParams {
  PatchEmbedParams<T> patch;
  std::optional<Tensor<T>> class_token;  // [dim]
  std::optional<Tensor<T>> pos_embed;    // [L(+1), dim]
};

// ---------------------------------------------------------------------------
// Normalization ops
// ---------------------------------------------------------------------------

// LayerNorm over the last axis. eps sits inside the square root.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const LayerNormParams<T>& params) {
  const int64_t dim = x.dim(x.rank() - 1);
  check_shape(params.gamma.numel() == dim && params.beta.numel() == dim,
              "layernorm: parameter size does not match feature dim " + std::to_string(dim));
  const int64_t rows = x.numel() / dim;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> inv_std(static_cast<size_t>(rows)), mean(static_cast<size_t>(rows));
  const T* px = x.data().data();
  const T* pg = params.gamma.data().data();
  const T* pb = params.beta.data().data();
  T* po = out.data_mut().data();
  const double eps = params.eps;
  parallel_for(rows, [&](int64_t begin, int64_t end) {
    for (int64_t r = begin; r < end; ++r) {
      const T* row = px + r * dim;
      double sum = 0.0;
      for (int64_t i = 0; i < dim; ++i) sum += row[i];
      const double mu = sum / static_cast<double>(dim);
      double var = 0.0;
      for (int64_t i = 0; i < dim; ++i) {
        const double d = row[i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(dim);
      const double is = 1.0 / std::sqrt(var + eps);
      mean[static_cast<size_t>(r)] = static_cast<T>(mu);
      inv_std[static_cast<size_t>(r)] = static_cast<T>(is);
      T* orow = po + r * dim;
      for (int64_t i = 0; i < dim; ++i)
        orow[i] = static_cast<T>((row[i] - mu) * is) * pg[i] + pb[i];
    }
  });
  if (auto* tape = Tape<T>::recording({&x, &params.gamma, &params.beta})) {
    const int64_t ix = tape->id_of(x);
    const int64_t ig = tape->id_of(params.gamma);
    const int64_t ib = tape->id_of(params.beta);
    Tensor<T> ot = out;
    const int64_t io = tape->id_of_output(ot);
    Tensor<T> xv = x, gv = params.gamma;
    auto mu = std::make_shared<std::vector<T>>(std::move(mean));
    auto is = std::make_shared<std::vector<T>>(std::move(inv_std));
    tape->push({ix, ig, ib}, io, [=](Tape<T>& t) {
      const auto& g = t.grad_of(io);
      auto& dx = t.grad_accum(ix, xv.numel());
      auto& dg = t.grad_accum(ig, dim);
      auto& db = t.grad_accum(ib, dim);
      const T* xp = xv.data().data();
      const T* gp = gv.data().data();
      for (int64_t r = 0; r < rows; ++r) {
        const T* xrow = xp + r * dim;
        const T* grow = g.data() + r * dim;
        T* dxrow = dx.data() + r * dim;
        const T m = (*mu)[static_cast<size_t>(r)];
        const T s = (*is)[static_cast<size_t>(r)];
        // dxhat = g * gamma; dx = s * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        T sum_dxhat = T(0), sum_dxhat_xhat = T(0);
        for (int64_t i = 0; i < dim; ++i) {
          const T xhat = (xrow[i] - m) * s;
          const T dxhat = grow[i] * gp[i];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
          dg[static_cast<size_t>(i)] += grow[i] * xhat;
          db[static_cast<size_t>(i)] += grow[i];
        }
        const T inv_dim = T(1) / static_cast<T>(dim);
        for (int64_t i = 0; i < dim; ++i) {
          const T xhat = (xrow[i] - m) * s;
          const T dxhat = grow[i] * gp[i];
          dxrow[i] += s * (dxhat - sum_dxhat * inv_dim - xhat * sum_dxhat_xhat * inv_dim);
        }
      }
    });
  }
  return out;
}

// BatchNorm over [batch, C, H, W]. Training mode normalizes with batch
// statistics (biased variance) and updates the running buffers in place:
// running <- (1 - momentum) * running + momentum * batch_stat, with the
// unbiased variance entering the running estimate. Eval mode is a fixed
// per-channel affine map using the running buffers.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, BatchNorm2dParams<T>& params, bool training) {
  check_shape(x.rank() == 4, "batchnorm2d: expected [batch, C, H, W], got " + shape_str(x.shape()));
  const int64_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  check_shape(params.gamma.numel() == ch,
              "batchnorm2d: channel count " + std::to_string(ch) + " does not match parameters of size " +
                  std::to_string(params.gamma.numel()));
  const int64_t spatial = h * w;
  const int64_t reduce_n = batch * spatial;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data().data();
  T* po = out.data_mut().data();
  const T* pg = params.gamma.data().data();
  const T* pb = params.beta.data().data();
  const double eps = params.eps;

  std::vector<T> mean(static_cast<size_t>(ch)), inv_std(static_cast<size_t>(ch));
  if (training) {
    check_contract(reduce_n > 1,
                   "batchnorm2d: training mode needs batch*H*W > 1 per channel, got " +
                       std::to_string(reduce_n));
    T* rm = params.running_mean.data_mut().data();
    T* rv = params.running_var.data_mut().data();
    const double mom = params.momentum;
    for (int64_t c = 0; c < ch; ++c) {
      double sum = 0.0;
      for (int64_t b = 0; b < batch; ++b) {
        const T* slab = px + (b * ch + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) sum += slab[i];
      }
      const double mu = sum / static_cast<double>(reduce_n);
      double var = 0.0;
      for (int64_t b = 0; b < batch; ++b) {
        const T* slab = px + (b * ch + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) {
          const double d = slab[i] - mu;
          var += d * d;
        }
      }
      var /= static_cast<double>(reduce_n);
      const double unbiased = var * static_cast<double>(reduce_n) / static_cast<double>(reduce_n - 1);
      rm[c] = static_cast<T>((1.0 - mom) * rm[c] + mom * mu);
      rv[c] = static_cast<T>((1.0 - mom) * rv[c] + mom * unbiased);
      mean[static_cast<size_t>(c)] = static_cast<T>(mu);
      inv_std[static_cast<size_t>(c)] = static_cast<T>(1.0 / std::sqrt(var + eps));
    }
  } else {
    const T* rm = params.running_mean.data().data();
    const T* rv = params.running_var.data().data();
    for (int64_t c = 0; c < ch; ++c) {
      mean[static_cast<size_t>(c)] = rm[c];
      inv_std[static_cast<size_t>(c)] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[c]) + eps));
    }
  }

  parallel_for(batch * ch, [&](int64_t begin, int64_t end) {
    for (int64_t bc = begin; bc < end; ++bc) {
      const int64_t c = bc % ch;
      const T m = mean[static_cast<size_t>(c)];
      const T s = inv_std[static_cast<size_t>(c)];
      const T gamma = pg[c], beta = pb[c];
      const T* slab = px + bc * spatial;
      T* oslab = po + bc * spatial;
      for (int64_t i = 0; i < spatial; ++i) oslab[i] = (slab[i] - m) * s * gamma + beta;
    }
  });

  if (auto* tape = Tape<T>::recording({&x, &params.gamma, &params.beta})) {
    const int64_t ix = tape->id_of(x);
    const int64_t ig = tape->id_of(params.gamma);
    const int64_t ib = tape->id_of(params.beta);
    Tensor<T> ot = out;
    const int64_t io = tape->id_of_output(ot);
    Tensor<T> xv = x, gv = params.gamma;
    auto mu = std::make_shared<std::vector<T>>(std::move(mean));
    auto is = std::make_shared<std::vector<T>>(std::move(inv_std));
    tape->push({ix, ig, ib}, io, [=](Tape<T>& t) {
      const auto& g = t.grad_of(io);
      auto& dx = t.grad_accum(ix, xv.numel());
      auto& dg = t.grad_accum(ig, ch);
      auto& db = t.grad_accum(ib, ch);
      const T* xp = xv.data().data();
      const T* gp = gv.data().data();
      parallel_for(ch, [&](int64_t c_begin, int64_t c_end) {
        for (int64_t c = c_begin; c < c_end; ++c) {
          const T m = (*mu)[static_cast<size_t>(c)];
          const T s = (*is)[static_cast<size_t>(c)];
          T sum_g = T(0), sum_g_xhat = T(0);
          for (int64_t b = 0; b < batch; ++b) {
            const T* xs = xp + (b * ch + c) * spatial;
            const T* gs = g.data() + (b * ch + c) * spatial;
            for (int64_t i = 0; i < spatial; ++i) {
              sum_g += gs[i];
              sum_g_xhat += gs[i] * (xs[i] - m) * s;
            }
          }
          dg[static_cast<size_t>(c)] += sum_g_xhat;
          db[static_cast<size_t>(c)] += sum_g;
          const T gamma = gp[c];
          if (training) {
            const T inv_n = T(1) / static_cast<T>(reduce_n);
            for (int64_t b = 0; b < batch; ++b) {
              const T* xs = xp + (b * ch + c) * spatial;
              const T* gs = g.data() + (b * ch + c) * spatial;
              T* ds = dx.data() + (b * ch + c) * spatial;
              for (int64_t i = 0; i < spatial; ++i) {
                const T xhat = (xs[i] - m) * s;
                ds[i] += gamma * s * (gs[i] - sum_g * inv_n - xhat * sum_g_xhat * inv_n);
              }
            }
          } else {
            for (int64_t b = 0; b < batch; ++b) {
              const T* gs = g.data() + (b * ch + c) * spatial;
              T* ds = dx.data() + (b * ch + c) * spatial;
              for (int64_t i = 0; i < spatial; ++i) ds[i] += gamma * s * gs[i];
            }
          }
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear / patch extraction
// ---------------------------------------------------------------------------

// y = x * W + b, fused: the output starts as broadcast bias rows and the
// product accumulates into it.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const LinearParams<T>& params) {
  check_shape(x.rank() == 2, "linear: expected [rows, in], got " + shape_str(x.shape()));
  const int64_t rows = x.dim(0), in = x.dim(1);
  check_shape(params.weight.rank() == 2 && params.weight.dim(0) == in,
              "linear: input width " + std::to_string(in) + " does not match weight " +
                  shape_str(params.weight.shape()));
  const int64_t out_dim = params.weight.dim(1);
  check_shape(params.bias.numel() == out_dim, "linear: bias size does not match weight");
  Tensor<T> out = Tensor<T>::zeros({rows, out_dim});
  T* po = out.data_mut().data();
  const T* pb = params.bias.data().data();
  for (int64_t r = 0; r < rows; ++r)
    std::memcpy(po + r * out_dim, pb, static_cast<size_t>(out_dim) * sizeof(T));
  detail::gemm_packed(x.data().data(), params.weight.data().data(), po, rows, in, out_dim,
                      /*accumulate=*/true);
  if (auto* tape = Tape<T>::recording({&x, &params.weight, &params.bias})) {
    const int64_t ix = tape->id_of(x);
    const int64_t iw = tape->id_of(params.weight);
    const int64_t ib = tape->id_of(params.bias);
    Tensor<T> ot = out;
    const int64_t io = tape->id_of_output(ot);
    Tensor<T> xv = x, wv = params.weight;
    tape->push({ix, iw, ib}, io, [=](Tape<T>& t) {
      const auto& g = t.grad_of(io);
      auto& dx = t.grad_accum(ix, xv.numel());
      auto& dw = t.grad_accum(iw, wv.numel());
      auto& db = t.grad_accum(ib, out_dim);
      detail::gemm(g.data(), wv.data().data(), dx.data(), rows, out_dim, in, false, true, true);
      detail::gemm(xv.data().data(), g.data(), dw.data(), in, rows, out_dim, true, false, true);
      for (int64_t r = 0; r < rows; ++r) {
        const T* gr = g.data() + r * out_dim;
        for (int64_t j = 0; j < out_dim; ++j) db[static_cast<size_t>(j)] += gr[j];
      }
    });
  }
  return out;
}

// Cuts [batch, C, H, W] into non-overlapping p x p patches, row-major over the
// grid, each flattened channel-major: index c*p*p + y*p + x.
template <typename T>
Tensor<T> extract_patches(const Tensor<T>& images, int64_t patch) {
  check_shape(images.rank() == 4,
              "extract_patches: expected [batch, C, H, W], got " + shape_str(images.shape()));
  const int64_t batch = images.dim(0), ch = images.dim(1), h = images.dim(2), w = images.dim(3);
  check_config(patch > 0 && h % patch == 0 && w % patch == 0,
               "extract_patches: image " + std::to_string(h) + "x" + std::to_string(w) +
                   " not divisible by patch_size " + std::to_string(patch));
  const int64_t gh = h / patch, gw = w / patch;
  const int64_t tokens = gh * gw;
  const int64_t flat = ch * patch * patch;
  Tensor<T> out = Tensor<T>::zeros({batch, tokens, flat});
  const T* pi = images.data().data();
  T* po = out.data_mut().data();
  parallel_for(batch * tokens, [&](int64_t begin, int64_t end) {
    for (int64_t bt = begin; bt < end; ++bt) {
      const int64_t b = bt / tokens, t = bt % tokens;
      const int64_t py = t / gw, px = t % gw;
      T* dst = po + bt * flat;
      for (int64_t c = 0; c < ch; ++c)
        for (int64_t y = 0; y < patch; ++y)
          for (int64_t x = 0; x < patch; ++x)
            dst[c * patch * patch + y * patch + x] =
                pi[((b * ch + c) * h + py * patch + y) * w + px * patch + x];
    }
  });
  if (auto* tape = Tape<T>::recording({&images})) {
    const int64_t ii = tape->id_of(images);
    Tensor<T> ot = out;
    const int64_t io = tape->id_of_output(ot);
    const int64_t n = images.numel();
    tape->push({ii}, io, [=](Tape<T>& t_) {
      const auto& g = t_.grad_of(io);
      auto& di = t_.grad_accum(ii, n);
      for (int64_t bt = 0; bt < batch * tokens; ++bt) {
        const int64_t b = bt / tokens, t = bt % tokens;
        const int64_t py = t / gw, px = t % gw;
        const T* src = g.data() + bt * flat;
        for (int64_t c = 0; c < ch; ++c)
          for (int64_t y = 0; y < patch; ++y)
            for (int64_t x = 0; x < patch; ++x)
              di[static_cast<size_t>(((b * ch + c) * h + py * patch + y) * w + px * patch + x)] +=
                  src[c * patch * patch + y * patch + x];
      }
    });
  }
  return out;
}

// Eq-1 style input assembly: project patches, prepend the class token when
// configured, then add the positional embedding.
template <typename T>
TokenSequence<T> patch_embed(const Tensor<T>& images, const InputEmbedParams<T>& params) {
  const int64_t p = params.patch.patch_size;
  const int64_t batch = images.dim(0);
  Tensor<T> patches = extract_patches(images, p);  // [batch, L, C*p*p]
  const int64_t tokens = patches.dim(1);
  const int64_t dim = params.patch.weight.dim(0);
  check_shape(params.patch.weight.dim(1) == patches.dim(2),
              "patch_embed: projection expects " + std::to_string(params.patch.weight.dim(1)) +
                  " inputs, patches have " + std::to_string(patches.dim(2)));
  Tensor<T> flat = reshape(patches, {batch * tokens, patches.dim(2)});
  Tensor<T> projected = add(matmul(flat, transpose(params.patch.weight, 0, 1)), params.patch.bias);
  Tensor<T> seq = reshape(projected, {batch, tokens, dim});

  TokenSequence<T> out;
  out.grid_h = images.dim(2) / p;
  out.grid_w = images.dim(3) / p;
  out.has_class_token = params.class_token.has_value();
  if (params.class_token) {
    Tensor<T> cls = repeat_leading(reshape(*params.class_token, {1, dim}), batch);  // [batch,1,dim]
    seq = concat<T>({cls, seq}, 1);
  }
  if (params.pos_embed) {
    check_shape(params.pos_embed->dim(0) == seq.dim(1),
                "patch_embed: positional embedding covers " + std::to_string(params.pos_embed->dim(0)) +
                    " positions, sequence has " + std::to_string(seq.dim(1)));
    seq = add(seq, *params.pos_embed);
  }
  out.tokens = seq;
  out.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Transformer blocks (pre-LayerNorm residual form)
// ---------------------------------------------------------------------------

// x + MHSA(LayerNorm(x)); full attention over all tokens, class token
// included; per-head scaled dot product with scale 1/sqrt(dim/heads).
template <typename T>
TokenSequence<T> mhsa_block(const TokenSequence<T>& x, const MhsaParams<T>& params) {
  const int64_t batch = x.batch(), seq = x.seq_len(), dim = x.dim();
  check_shape(params.query.weight.dim(0) == dim,
              "mhsa_block: token dim " + std::to_string(dim) + " does not match parameters");
  const int64_t heads = params.heads;
  check_config(dim % heads == 0, "mhsa_block: dim " + std::to_string(dim) +
                                     " not divisible by heads " + std::to_string(heads));
  const int64_t head_dim = dim / heads;

  Tensor<T> normed = layernorm(x.tokens, params.ln);
  Tensor<T> flat = reshape(normed, {batch * seq, dim});
  auto split_heads = [&](const Tensor<T>& proj) {
    return transpose(reshape(proj, {batch, seq, heads, head_dim}), 1, 2);  // [B,H,S,hd]
  };
  Tensor<T> q = split_heads(linear(flat, params.query));
  Tensor<T> k = split_heads(linear(flat, params.key));
  Tensor<T> v = split_heads(linear(flat, params.value));

  Tensor<T> scores = scale(matmul(q, transpose(k, 2, 3)), 1.0 / std::sqrt(static_cast<double>(head_dim)));
  Tensor<T> weights = softmax(scores, 3);
  Tensor<T> mixed = matmul(weights, v);                               // [B,H,S,hd]
  Tensor<T> merged = reshape(transpose(mixed, 1, 2), {batch * seq, dim});
  Tensor<T> projected = reshape(linear(merged, params.out), {batch, seq, dim});

  TokenSequence<T> out = x;
  out.tokens = add(x.tokens, projected);
  return out;
}

// x + FF(LayerNorm(x)); FF = Linear(dim -> mlp_dim), GELU, Linear(mlp_dim -> dim).
template <typename T>
TokenSequence<T> ffn_block(const TokenSequence<T>& x, const FfnParams<T>& params) {
  const int64_t batch = x.batch(), seq = x.seq_len(), dim = x.dim();
  check_shape(params.expand.weight.dim(0) == dim,
              "ffn_block: token dim " + std::to_string(dim) + " does not match parameters");
  Tensor<T> normed = reshape(layernorm(x.tokens, params.ln), {batch * seq, dim});
  Tensor<T> hidden = gelu(linear(normed, params.expand));
  Tensor<T> projected = reshape(linear(hidden, params.project), {batch, seq, dim});
  TokenSequence<T> out = x;
  out.tokens = add(x.tokens, projected);
  return out;
}

template <typename T>
TokenSequence<T> transformer_block(const TokenSequence<T>& x, const BlockParams<T>& params) {
  return ffn_block(mhsa_block(x, params.attn), params.ffn);
}

// ---------------------------------------------------------------------------
// Initialization helpers
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> init_truncated_normal(Rng& rng, Shape shape, double stddev = 0.02) {
  Tensor<T> t = Tensor<T>::zeros(std::move(shape));
  for (auto& v : t.data_mut()) v = static_cast<T>(rng.truncated_normal(0.0, stddev));
  return t;
}

template <typename T>
LayerNormParams<T> make_layernorm(int64_t dim, double eps = 1e-6) {
  return {Tensor<T>::full({dim}, T(1)), Tensor<T>::zeros({dim}), eps};
}

template <typename T>
BatchNorm2dParams<T> make_batchnorm2d(int64_t channels, double momentum = 0.1, double eps = 1e-5) {
  return {Tensor<T>::full({channels}, T(1)), Tensor<T>::zeros({channels}),
          Tensor<T>::zeros({channels}), Tensor<T>::full({channels}, T(1)), momentum, eps};
}

template <typename T>
LinearParams<T> make_linear(Rng& rng, int64_t in, int64_t out) {
  return {init_truncated_normal<T>(rng, {in, out}), Tensor<T>::zeros({out})};
}

}  // namespace vitdw
