#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "oracles.hpp"
#include "vitdw/layers.hpp"

using namespace vitdw;

namespace {

template <typename T>
void fill_uniform(Tensor<T>& t, Rng& rng, double lo = -1.0, double hi = 1.0) {
  for (auto& v : t.data_mut()) v = static_cast<T>(rng.uniform(lo, hi));
}

template <typename T>
LinearParams<T> identity_linear(int64_t dim) {
  LinearParams<T> p{Tensor<T>::zeros({dim, dim}), Tensor<T>::zeros({dim})};
  auto w = p.weight.data_mut();
  for (int64_t i = 0; i < dim; ++i) w[static_cast<size_t>(i * dim + i)] = T(1);
  return p;
}

template <typename T>
LinearParams<T> zero_linear(int64_t in, int64_t out) {
  return {Tensor<T>::zeros({in, out}), Tensor<T>::zeros({out})};
}

}  // namespace

TEST_CASE("layernorm closed form [1,2,3]") {
  LayerNormParams<double> ln{Tensor<double>::full({3}, 1.0), Tensor<double>::zeros({3}), 0.0};
  Tensor<double> x = Tensor<double>::from_data({1, 3}, {1, 2, 3});
  Tensor<double> y = layernorm(x, ln);
  CHECK(y.data()[0] == doctest::Approx(-1.224744871).epsilon(1e-6));
  CHECK(y.data()[1] == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(y.data()[2] == doctest::Approx(1.224744871).epsilon(1e-6));
}

TEST_CASE("layernorm constant vector collapses to beta") {
  LayerNormParams<float> ln = make_layernorm<float>(4);
  auto beta = ln.beta.data_mut();
  for (int i = 0; i < 4; ++i) beta[static_cast<size_t>(i)] = 0.25f * static_cast<float>(i);
  Tensor<float> x = Tensor<float>::full({2, 4}, 7.0f);
  Tensor<float> y = layernorm(x, ln);
  for (int64_t r = 0; r < 2; ++r)
    for (int64_t i = 0; i < 4; ++i)
      CHECK(y.data()[static_cast<size_t>(r * 4 + i)] ==
            doctest::Approx(0.25f * static_cast<float>(i)).epsilon(1e-6));
}

TEST_CASE("layernorm output mean is zero and shift invariant") {
  Rng rng(3);
  LayerNormParams<float> ln = make_layernorm<float>(16);
  Tensor<float> x = Tensor<float>::zeros({5, 16});
  fill_uniform(x, rng, -3.0, 3.0);
  Tensor<float> y = layernorm(x, ln);
  for (int64_t r = 0; r < 5; ++r) {
    double mean = 0;
    for (int64_t i = 0; i < 16; ++i) mean += y.data()[static_cast<size_t>(r * 16 + i)];
    CHECK(std::abs(mean / 16.0) < 1e-6);
  }
  Tensor<float> shifted = layernorm(add_scalar(x, 3.5), ln);
  for (int64_t i = 0; i < x.numel(); ++i)
    CHECK(std::abs(shifted.data()[static_cast<size_t>(i)] - y.data()[static_cast<size_t>(i)]) <
          1e-5);
}

TEST_CASE("batchnorm2d training statistics and running update") {
  BatchNorm2dParams<float> bn = make_batchnorm2d<float>(2);
  Rng rng(9);
  Tensor<float> x = Tensor<float>::zeros({3, 2, 4, 4});
  fill_uniform(x, rng, -2.0, 2.0);

  // hand statistics for channel 0
  double mean_c0 = 0.0;
  for (int64_t b = 0; b < 3; ++b)
    for (int64_t i = 0; i < 16; ++i) mean_c0 += x.data()[static_cast<size_t>(b * 32 + i)];
  mean_c0 /= 48.0;

  Tensor<float> y = batchnorm2d(x, bn, /*training=*/true);
  for (int64_t c = 0; c < 2; ++c) {
    double m = 0.0, v = 0.0;
    for (int64_t b = 0; b < 3; ++b)
      for (int64_t i = 0; i < 16; ++i) m += y.data()[static_cast<size_t>((b * 2 + c) * 16 + i)];
    m /= 48.0;
    for (int64_t b = 0; b < 3; ++b)
      for (int64_t i = 0; i < 16; ++i) {
        const double d = y.data()[static_cast<size_t>((b * 2 + c) * 16 + i)] - m;
        v += d * d;
      }
    v /= 48.0;
    CHECK(std::abs(m) < 1e-5);
    CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
  }
  // running mean after one step from zero init: (1 - mom) * 0 + mom * batch_mean
  CHECK(bn.running_mean.data()[0] == doctest::Approx(0.1 * mean_c0).epsilon(1e-4));
}

TEST_CASE("batchnorm2d constant channel gives beta in training mode") {
  BatchNorm2dParams<float> bn = make_batchnorm2d<float>(1);
  bn.beta.data_mut()[0] = 0.75f;
  Tensor<float> x = Tensor<float>::full({2, 1, 3, 3}, 4.0f);
  Tensor<float> y = batchnorm2d(x, bn, true);
  for (auto v : y.data()) CHECK(v == doctest::Approx(0.75f).epsilon(1e-6));
}

TEST_CASE("batchnorm2d degenerate single-element statistics") {
  BatchNorm2dParams<float> bn = make_batchnorm2d<float>(3);
  Tensor<float> x = Tensor<float>::zeros({1, 3, 1, 1});
  CHECK_THROWS_AS(batchnorm2d(x, bn, true), Error);
  CHECK_NOTHROW(batchnorm2d(x, bn, false));  // eval mode has no such restriction
}

TEST_CASE("batchnorm2d eval mode is a deterministic affine map") {
  BatchNorm2dParams<float> bn = make_batchnorm2d<float>(2);
  Rng rng(13);
  fill_uniform(bn.running_mean, rng, -1.0, 1.0);
  for (auto& v : bn.running_var.data_mut()) v = static_cast<float>(rng.uniform(0.5, 2.0));
  Tensor<float> x = Tensor<float>::zeros({2, 2, 3, 3});
  fill_uniform(x, rng);
  Tensor<float> y1 = batchnorm2d(x, bn, false);
  Tensor<float> y2 = batchnorm2d(x, bn, false);
  for (int64_t i = 0; i < y1.numel(); ++i)
    CHECK(y1.data()[static_cast<size_t>(i)] == y2.data()[static_cast<size_t>(i)]);
}

TEST_CASE("patch_embed geometry") {
  Rng rng(7);
  InputEmbedParams<float> emb;
  emb.patch.patch_size = 4;
  emb.patch.weight = init_truncated_normal<float>(rng, {8, 48});
  emb.patch.bias = Tensor<float>::zeros({8});
  Tensor<float> images = Tensor<float>::zeros({2, 3, 32, 32});
  TokenSequence<float> seq = patch_embed(images, emb);
  CHECK(seq.tokens.shape() == Shape{2, 64, 8});
  CHECK(seq.grid_h == 8);
  CHECK(seq.grid_w == 8);
  CHECK_FALSE(seq.has_class_token);

  Tensor<float> bad = Tensor<float>::zeros({1, 3, 30, 32});
  CHECK_THROWS_AS(patch_embed(bad, emb), Error);
}

TEST_CASE("patch_embed zero image maps to positional embedding") {
  Rng rng(19);
  InputEmbedParams<float> emb;
  emb.patch.patch_size = 4;
  emb.patch.weight = init_truncated_normal<float>(rng, {8, 48});
  emb.patch.bias = Tensor<float>::zeros({8});
  emb.pos_embed = init_truncated_normal<float>(rng, {4, 8});
  Tensor<float> images = Tensor<float>::zeros({1, 3, 8, 8});
  TokenSequence<float> seq = patch_embed(images, emb);
  for (int64_t t = 0; t < 4; ++t)
    for (int64_t d = 0; d < 8; ++d)
      CHECK(seq.tokens.data()[static_cast<size_t>(t * 8 + d)] ==
            emb.pos_embed->data()[static_cast<size_t>(t * 8 + d)]);
}

TEST_CASE("patch_embed one-hot projection recovers a pixel") {
  // weight row 0 selects channel 1, pixel (2, 3) of each patch
  InputEmbedParams<float> emb;
  emb.patch.patch_size = 4;
  emb.patch.weight = Tensor<float>::zeros({2, 48});
  const int64_t flat_index = 1 * 16 + 2 * 4 + 3;  // c*p*p + y*p + x
  emb.patch.weight.data_mut()[static_cast<size_t>(flat_index)] = 1.0f;
  emb.patch.bias = Tensor<float>::zeros({2});
  Tensor<float> images = Tensor<float>::zeros({1, 3, 8, 8});
  // patch (1, 0) covers rows 4..7, cols 0..3; its (2, 3) pixel in channel 1
  images.data_mut()[static_cast<size_t>((1 * 8 + 6) * 8 + 3)] = 0.62f;
  TokenSequence<float> seq = patch_embed(images, emb);
  // row-major grid: patch (1, 0) is token 2 on the 2x2 grid
  CHECK(seq.tokens.data()[static_cast<size_t>(2 * 2 + 0)] == doctest::Approx(0.62f));
  CHECK(seq.tokens.data()[static_cast<size_t>(0 * 2 + 0)] == 0.0f);
}

TEST_CASE("mhsa_block zero projections pass tokens through") {
  Rng rng(21);
  const int64_t dim = 8;
  MhsaParams<float> attn;
  attn.ln = make_layernorm<float>(dim);
  attn.heads = 2;
  attn.query = zero_linear<float>(dim, dim);
  attn.key = zero_linear<float>(dim, dim);
  attn.value = zero_linear<float>(dim, dim);
  attn.out = zero_linear<float>(dim, dim);
  TokenSequence<float> seq{Tensor<float>::zeros({2, 5, dim}), true, 2, 2};
  fill_uniform(seq.tokens, rng);
  TokenSequence<float> out = mhsa_block(seq, attn);
  for (int64_t i = 0; i < seq.tokens.numel(); ++i)
    CHECK(out.tokens.data()[static_cast<size_t>(i)] == seq.tokens.data()[static_cast<size_t>(i)]);
}

TEST_CASE("mhsa_block single token identity projections") {
  const int64_t dim = 4;
  MhsaParams<float> attn;
  attn.ln = make_layernorm<float>(dim);
  attn.heads = 1;
  attn.query = identity_linear<float>(dim);
  attn.key = identity_linear<float>(dim);
  attn.value = identity_linear<float>(dim);
  attn.out = identity_linear<float>(dim);
  TokenSequence<float> seq{Tensor<float>::from_data({1, 1, dim}, {0.4f, -1.2f, 2.0f, 0.1f}), false,
                           1, 1};
  TokenSequence<float> out = mhsa_block(seq, attn);
  // a singleton softmax weighs the sole value with exactly 1, so the result
  // is x + LayerNorm(x) carried through the identity value/out path
  Tensor<float> expected = add(seq.tokens, layernorm(seq.tokens, attn.ln));
  for (int64_t i = 0; i < dim; ++i)
    CHECK(out.tokens.data()[static_cast<size_t>(i)] ==
          doctest::Approx(expected.data()[static_cast<size_t>(i)]).epsilon(1e-6));
}

TEST_CASE("mhsa_block matches dense single-head oracle") {
  Rng rng(33);
  const int64_t dim = 6, seq_len = 3;
  MhsaParams<float> attn;
  attn.ln = make_layernorm<float>(dim);
  attn.heads = 1;
  attn.query = make_linear<float>(rng, dim, dim);
  attn.key = make_linear<float>(rng, dim, dim);
  attn.value = make_linear<float>(rng, dim, dim);
  attn.out = make_linear<float>(rng, dim, dim);
  for (auto* lin : {&attn.query, &attn.key, &attn.value, &attn.out})
    fill_uniform(lin->bias, rng, -0.2, 0.2);
  TokenSequence<float> seq{Tensor<float>::zeros({1, seq_len, dim}), false, 3, 1};
  fill_uniform(seq.tokens, rng);

  oracles::AttnRefParams ref;
  auto grab = [](const Tensor<float>& t) {
    return std::vector<double>(t.data().begin(), t.data().end());
  };
  ref.wq = grab(attn.query.weight);
  ref.bq = grab(attn.query.bias);
  ref.wk = grab(attn.key.weight);
  ref.bk = grab(attn.key.bias);
  ref.wv = grab(attn.value.weight);
  ref.bv = grab(attn.value.bias);
  ref.wo = grab(attn.out.weight);
  ref.bo = grab(attn.out.bias);
  ref.gamma = grab(attn.ln.gamma);
  ref.beta = grab(attn.ln.beta);
  const std::vector<double> expected =
      oracles::mhsa_1head_ref(grab(seq.tokens), seq_len, dim, ref);

  TokenSequence<float> out = mhsa_block(seq, attn);
  for (int64_t i = 0; i < out.tokens.numel(); ++i)
    CHECK(std::abs(out.tokens.data()[static_cast<size_t>(i)] - expected[static_cast<size_t>(i)]) <
          1e-5);
}

TEST_CASE("ffn_block zero weights pass tokens through, width follows mlp ratio") {
  Rng rng(41);
  const int64_t dim = 8;
  FfnParams<float> ffn;
  ffn.ln = make_layernorm<float>(dim);
  ffn.expand = zero_linear<float>(dim, 4 * dim);
  ffn.project = zero_linear<float>(4 * dim, dim);
  CHECK(ffn.expand.weight.dim(1) == 32);
  TokenSequence<float> seq{Tensor<float>::zeros({2, 4, dim}), false, 2, 2};
  fill_uniform(seq.tokens, rng);
  TokenSequence<float> out = ffn_block(seq, ffn);
  for (int64_t i = 0; i < seq.tokens.numel(); ++i)
    CHECK(out.tokens.data()[static_cast<size_t>(i)] == seq.tokens.data()[static_cast<size_t>(i)]);
}

TEST_CASE("ffn_block matches dense oracle") {
  Rng rng(43);
  const int64_t dim = 6, hidden = 12, seq_len = 4;
  FfnParams<float> ffn;
  ffn.ln = make_layernorm<float>(dim);
  ffn.expand = make_linear<float>(rng, dim, hidden);
  ffn.project = make_linear<float>(rng, hidden, dim);
  fill_uniform(ffn.expand.bias, rng, -0.2, 0.2);
  fill_uniform(ffn.project.bias, rng, -0.2, 0.2);
  TokenSequence<float> seq{Tensor<float>::zeros({1, seq_len, dim}), false, 2, 2};
  fill_uniform(seq.tokens, rng);

  oracles::FfnRefParams ref;
  auto grab = [](const Tensor<float>& t) {
    return std::vector<double>(t.data().begin(), t.data().end());
  };
  ref.w1 = grab(ffn.expand.weight);
  ref.b1 = grab(ffn.expand.bias);
  ref.w2 = grab(ffn.project.weight);
  ref.b2 = grab(ffn.project.bias);
  ref.gamma = grab(ffn.ln.gamma);
  ref.beta = grab(ffn.ln.beta);
  const std::vector<double> expected = oracles::ffn_ref(grab(seq.tokens), seq_len, dim, hidden, ref);

  TokenSequence<float> out = ffn_block(seq, ffn);
  for (int64_t i = 0; i < out.tokens.numel(); ++i)
    CHECK(std::abs(out.tokens.data()[static_cast<size_t>(i)] - expected[static_cast<size_t>(i)]) <
          1e-5);
}

TEST_CASE("mhsa_block is permutation equivariant without positional embedding") {
  // full attention treats patch tokens as a set: permuting them permutes the
  // outputs identically and leaves the class-token row unchanged up to
  // summation-order rounding (checked in double at 1e-12)
  Rng rng(47);
  const int64_t dim = 8, patches = 6;
  MhsaParams<double> attn;
  attn.ln = make_layernorm<double>(dim);
  attn.heads = 2;
  attn.query = make_linear<double>(rng, dim, dim);
  attn.key = make_linear<double>(rng, dim, dim);
  attn.value = make_linear<double>(rng, dim, dim);
  attn.out = make_linear<double>(rng, dim, dim);
  TokenSequence<double> seq{Tensor<double>::zeros({1, patches + 1, dim}), true, 2, 3};
  fill_uniform(seq.tokens, rng);

  std::vector<int64_t> perm(static_cast<size_t>(patches));
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int64_t>(i);
  rng.shuffle(perm);

  TokenSequence<double> permuted = seq;
  permuted.tokens = seq.tokens.clone();
  for (int64_t t = 0; t < patches; ++t)
    for (int64_t d = 0; d < dim; ++d)
      permuted.tokens.data_mut()[static_cast<size_t>((1 + t) * dim + d)] =
          seq.tokens.data()[static_cast<size_t>((1 + perm[static_cast<size_t>(t)]) * dim + d)];

  TokenSequence<double> out = mhsa_block(seq, attn);
  TokenSequence<double> out_perm = mhsa_block(permuted, attn);
  for (int64_t d = 0; d < dim; ++d)
    CHECK(std::abs(out_perm.tokens.data()[static_cast<size_t>(d)] -
                   out.tokens.data()[static_cast<size_t>(d)]) < 1e-12);
  for (int64_t t = 0; t < patches; ++t)
    for (int64_t d = 0; d < dim; ++d)
      CHECK(std::abs(out_perm.tokens.data()[static_cast<size_t>((1 + t) * dim + d)] -
                     out.tokens.data()[static_cast<size_t>(
                         (1 + perm[static_cast<size_t>(t)]) * dim + d)]) < 1e-12);
}

TEST_CASE("token sequence invariants") {
  TokenSequence<float> seq{Tensor<float>::zeros({1, 5, 4}), true, 2, 2};
  CHECK_NOTHROW(seq.validate());
  seq.has_class_token = false;
  CHECK_THROWS_AS(seq.validate(), Error);
  seq.has_class_token = true;
  Tensor<float> patches = seq.patch_tokens();
  CHECK(patches.shape() == Shape{1, 4, 4});
}
