#pragma once

#include <span>

#include "vitdw/layers.hpp"

namespace vitdw {

// 2D reconstruction of patch tokens, [batch, dim, grid_h, grid_w]. The class
// token never enters a feature map; callers carry it alongside.
template <typename T>
struct FeatureMap2D {
  Tensor<T> data;
  int64_t grid_h = 0;
  int64_t grid_w = 0;
};

enum class BypassKind { none, identity, dwconv };

struct BypassSpec {
  BypassKind kind = BypassKind::none;
  std::vector<int> kernel_sizes;  // one parallel branch per entry (dwconv only)
  int group_size = 1;             // Transformer blocks spanned per bypass

  void validate() const {
    check_config(group_size >= 1, "bypass.group_size must be >= 1, got " + std::to_string(group_size));
    if (kind == BypassKind::dwconv) {
      check_config(!kernel_sizes.empty(), "bypass.kernel_sizes must be non-empty for dwconv");
      for (int k : kernel_sizes)
        check_config(k >= 1 && k % 2 == 1,
                     "bypass.kernel_sizes entries must be odd and positive, got " + std::to_string(k));
    }
  }
};

inline const char* bypass_kind_name(BypassKind kind) {
  switch (kind) {
    case BypassKind::none: return "none";
    case BypassKind::identity: return "identity";
    case BypassKind::dwconv: return "dwconv";
  }
  return "?";
}

// One depth-wise branch: a k x k filter per channel plus bias, preceded by
// GELU and BatchNorm on the reconstructed feature map.
template <typename T>
struct DWBranchParams {
  int kernel_size = 3;
  Tensor<T> weight;  // [dim, k, k]
  Tensor<T> bias;    // [dim]
  BatchNorm2dParams<T> bn;
};

template <typename T>
struct BypassGroupParams {
  std::vector<DWBranchParams<T>> branches;  // one per kernel size
};

// Groups covering `depth` blocks: depth / group_size full groups plus one
// trailing smaller group when the division has a remainder.
inline int64_t bypass_group_count(int64_t depth, int64_t group_size) {
  return (depth + group_size - 1) / group_size;
}

// ---------------------------------------------------------------------------
// Reshape between token and feature-map layouts
// ---------------------------------------------------------------------------

// Patch token i of the row-major grid lands at (i / grid_w, i mod grid_w).
// The class token is excluded.
template <typename T>
FeatureMap2D<T> reshape_1d_to_2d(const TokenSequence<T>& x) {
  x.validate();
  Tensor<T> patches = x.patch_tokens();  // [B, L, D]
  const int64_t batch = patches.dim(0), dim = patches.dim(2);
  Tensor<T> chan_first = transpose(patches, 1, 2);  // [B, D, L]
  FeatureMap2D<T> out;
  out.grid_h = x.grid_h;
  out.grid_w = x.grid_w;
  out.data = reshape(chan_first, {batch, dim, x.grid_h, x.grid_w});
  return out;
}

// Inverse of reshape_1d_to_2d; bit-exact round trip (pure copies).
template <typename T>
Tensor<T> reshape_2d_to_1d(const FeatureMap2D<T>& map) {
  const int64_t batch = map.data.dim(0), dim = map.data.dim(1);
  const int64_t tokens = map.grid_h * map.grid_w;
  Tensor<T> flat = reshape(map.data, {batch, dim, tokens});
  return transpose(flat, 1, 2);  // [B, L, D]
}

// ---------------------------------------------------------------------------
// Depth-wise convolution
// ---------------------------------------------------------------------------

// Per-channel 2D cross-correlation, stride 1, zero padding (k-1)/2, bias per
// channel. Spatial size is preserved.
template <typename T>
Tensor<T> depthwise_conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  check_shape(x.rank() == 4, "depthwise_conv2d: expected [batch, C, H, W], got " + shape_str(x.shape()));
  check_shape(weight.rank() == 3 && weight.dim(1) == weight.dim(2),
              "depthwise_conv2d: weight must be [C, k, k], got " + shape_str(weight.shape()));
  const int64_t batch = x.dim(0), ch = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t k = weight.dim(1);
  check_config(k % 2 == 1, "depthwise_conv2d: kernel size must be odd, got " + std::to_string(k));
  check_shape(weight.dim(0) == ch && bias.numel() == ch,
              "depthwise_conv2d: channel mismatch, input has " + std::to_string(ch) +
                  ", weight " + shape_str(weight.shape()));
  const int64_t pad = (k - 1) / 2;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  const T* px = x.data().data();
  const T* pw = weight.data().data();
  const T* pb = bias.data().data();
  T* po = out.data_mut().data();
  parallel_for(batch * ch, [&](int64_t begin, int64_t end) {
    for (int64_t bc = begin; bc < end; ++bc) {
      const int64_t c = bc % ch;
      const T* xs = px + bc * h * w;
      const T* ker = pw + c * k * k;
      T* os = po + bc * h * w;
      for (int64_t y = 0; y < h; ++y) {
        for (int64_t xw = 0; xw < w; ++xw) {
          T acc = pb[c];
          for (int64_t dy = 0; dy < k; ++dy) {
            const int64_t sy = y + dy - pad;
            if (sy < 0 || sy >= h) continue;
            for (int64_t dx = 0; dx < k; ++dx) {
              const int64_t sx = xw + dx - pad;
              if (sx < 0 || sx >= w) continue;
              acc += xs[sy * w + sx] * ker[dy * k + dx];
            }
          }
          os[y * w + xw] = acc;
        }
      }
    }
  });
  if (auto* tape = Tape<T>::recording({&x, &weight, &bias})) {
    const int64_t ix = tape->id_of(x);
    const int64_t iw = tape->id_of(weight);
    const int64_t ib = tape->id_of(bias);
    Tensor<T> ot = out;
    const int64_t io = tape->id_of_output(ot);
    Tensor<T> xv = x, wv = weight;
    tape->push({ix, iw, ib}, io, [=](Tape<T>& t) {
      const auto& g = t.grad_of(io);
      auto& dx = t.grad_accum(ix, xv.numel());
      auto& dw = t.grad_accum(iw, wv.numel());
      auto& db = t.grad_accum(ib, ch);
      const T* xp = xv.data().data();
      const T* wp = wv.data().data();
      T* dxp = dx.data();
      T* dwp = dw.data();
      T* dbp = db.data();
      // parallel over channels; the per-channel kernel grad accumulates over
      // the batch sequentially
      parallel_for(ch, [&](int64_t c_begin, int64_t c_end) {
        for (int64_t c = c_begin; c < c_end; ++c) {
          const T* ker = wp + c * k * k;
          T* dker = dwp + c * k * k;
          T dbias = T(0);
          for (int64_t b = 0; b < batch; ++b) {
            const int64_t bc = b * ch + c;
            const T* xs = xp + bc * h * w;
            const T* gs = g.data() + bc * h * w;
            T* ds = dxp + bc * h * w;
            for (int64_t y = 0; y < h; ++y) {
              for (int64_t xw = 0; xw < w; ++xw) {
                const T gv = gs[y * w + xw];
                dbias += gv;
                for (int64_t dy = 0; dy < k; ++dy) {
                  const int64_t sy = y + dy - pad;
                  if (sy < 0 || sy >= h) continue;
                  for (int64_t dx_ = 0; dx_ < k; ++dx_) {
                    const int64_t sx = xw + dx_ - pad;
                    if (sx < 0 || sx >= w) continue;
                    ds[sy * w + sx] += gv * ker[dy * k + dx_];
                    dker[dy * k + dx_] += gv * xs[sy * w + sx];
                  }
                }
              }
            }
          }
          dbp[c] += dbias;
        }
      });
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// DW branch and bypass group
// ---------------------------------------------------------------------------

// Residual produced from the group-entry activation:
//   reshape_2d_to_1d(DWConv(BatchNorm(GELU(reshape_1d_to_2d(x)))))
// GELU first, then BatchNorm, then the convolution. The result is shaped like
// the token sequence with an exactly-zero class-token slot.
template <typename T>
Tensor<T> dw_branch_forward(const TokenSequence<T>& x, DWBranchParams<T>& params, bool training) {
  FeatureMap2D<T> map = reshape_1d_to_2d(x);
  Tensor<T> activated = gelu(map.data);
  Tensor<T> normed = batchnorm2d(activated, params.bn, training);
  FeatureMap2D<T> conv{depthwise_conv2d(normed, params.weight, params.bias), map.grid_h, map.grid_w};
  Tensor<T> residual = reshape_2d_to_1d(conv);  // [B, L, D]
  if (!x.has_class_token) return residual;
  Tensor<T> zero_cls = Tensor<T>::zeros({x.batch(), 1, x.dim()});
  return concat<T>({zero_cls, residual}, 1);
}

// Runs `blocks` sequentially from the group entry x, then merges the bypass:
//   dwconv:   out = blocks(x) + sum over branches of dw_branch_forward(x)
//   identity: out = blocks(x) + raw patch tokens of x (zero class slot)
//   none:     out = blocks(x)
// Every parallel branch reads the same group-entry activation and owns an
// independent GELU/BatchNorm/DWConv stack; residuals are summed unweighted.
template <typename T>
TokenSequence<T> bypass_group_forward(const TokenSequence<T>& x,
                                      std::span<const BlockParams<T>> blocks,
                                      const BypassSpec& spec, BypassGroupParams<T>& params,
                                      bool training) {
  TokenSequence<T> y = x;
  for (const BlockParams<T>& block : blocks) y = transformer_block(y, block);
  switch (spec.kind) {
    case BypassKind::none:
      return y;
    case BypassKind::identity: {
      Tensor<T> residual = x.patch_tokens();
      if (x.has_class_token) {
        Tensor<T> zero_cls = Tensor<T>::zeros({x.batch(), 1, x.dim()});
        residual = concat<T>({zero_cls, residual}, 1);
      }
      y.tokens = add(y.tokens, residual);
      return y;
    }
    case BypassKind::dwconv: {
      check_config(params.branches.size() == spec.kernel_sizes.size(),
                   "bypass group has " + std::to_string(params.branches.size()) +
                       " branches for " + std::to_string(spec.kernel_sizes.size()) + " kernels");
      for (DWBranchParams<T>& branch : params.branches)
        y.tokens = add(y.tokens, dw_branch_forward(x, branch, training));
      return y;
    }
  }
  fail(ErrorKind::config, "unknown bypass kind");
}

// ---------------------------------------------------------------------------
// Complexity accounting of the DW bypass
// ---------------------------------------------------------------------------

// Extra learnable parameters contributed by the bypass:
//   groups * sum_k dim * (k*k + 1), plus groups * sum_k 2*dim for the
//   BatchNorm affine pairs when include_batchnorm. The paper convention drops
//   BatchNorm as insignificant.
inline int64_t extra_params(const BypassSpec& spec, int64_t dim, int64_t depth,
                            bool include_batchnorm) {
  spec.validate();
  if (spec.kind != BypassKind::dwconv) return 0;
  const int64_t groups = bypass_group_count(depth, spec.group_size);
  int64_t per_group = 0;
  for (int k : spec.kernel_sizes) {
    per_group += dim * (static_cast<int64_t>(k) * k + 1);
    if (include_batchnorm) per_group += 2 * dim;
  }
  return groups * per_group;
}

// Extra multiply-accumulates of the bypass convolutions:
//   groups * sum_k dim * grid_h * grid_w * k * k.
// One MAC counts as one FLOP; BatchNorm, GELU and bias are excluded.
inline int64_t extra_flops(const BypassSpec& spec, int64_t dim, int64_t depth, int64_t grid_h,
                           int64_t grid_w) {
  spec.validate();
  if (spec.kind != BypassKind::dwconv) return 0;
  const int64_t groups = bypass_group_count(depth, spec.group_size);
  int64_t per_group = 0;
  for (int k : spec.kernel_sizes)
    per_group += dim * grid_h * grid_w * static_cast<int64_t>(k) * k;
  return groups * per_group;
}

// Fresh branch parameters; DW weights are truncated-normal by default so the
// branch contributes from the first step (zero init is a test fixture).
template <typename T>
DWBranchParams<T> make_dw_branch(Rng& rng, int64_t dim, int kernel_size) {
  check_config(kernel_size >= 1 && kernel_size % 2 == 1,
               "kernel size must be odd and positive, got " + std::to_string(kernel_size));
  DWBranchParams<T> p;
  p.kernel_size = kernel_size;
  p.weight = init_truncated_normal<T>(rng, {dim, kernel_size, kernel_size});
  p.bias = Tensor<T>::zeros({dim});
  p.bn = make_batchnorm2d<T>(dim);
  return p;
}

}  // namespace vitdw
