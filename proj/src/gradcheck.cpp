#include "vitdw/gradcheck.hpp"

#include <cmath>
#include <sstream>

#include "vitdw/bypass.hpp"
#include "vitdw/layers.hpp"
#include "vitdw/model.hpp"
#include "vitdw/rng.hpp"
#include "vitdw/train.hpp"

namespace vitdw {
namespace {

using D = double;
using TensorD = Tensor<D>;

TensorD random_tensor(Rng& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
  TensorD t = TensorD::zeros(std::move(shape));
  for (auto& v : t.data_mut()) v = rng.uniform(lo, hi);
  return t;
}

TensorD random_param(Rng& rng, Shape shape, double lo = -2.0, double hi = 2.0) {
  TensorD t = random_tensor(rng, std::move(shape), lo, hi);
  t.set_requires_grad(true);
  return t;
}

// Weighted sum against a fixed random tensor turns any op output into a
// scalar with dense output gradients.
TensorD weighted_sum(const TensorD& out, const TensorD& weights) {
  return sum_all(mul(out, weights));
}

}  // namespace

double max_fd_error(const std::function<TensorD()>& loss_fn, std::vector<TensorD> params,
                    double h) {
  for (auto& p : params) p.zero_grad();
  std::vector<std::vector<D>> analytic;
  {
    Tape<D> tape;
    TensorD loss = loss_fn();
    tape.backward(loss);
  }
  for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto data = params[pi].data_mut();
    for (size_t i = 0; i < data.size(); ++i) {
      const D saved = data[i];
      data[i] = saved + h;
      const D hi = loss_fn().item();
      data[i] = saved - h;
      const D lo = loss_fn().item();
      data[i] = saved;
      const D fd = (hi - lo) / (2.0 * h);
      const D a = analytic[pi][i];
      const double denom = std::max(std::abs(a), std::abs(fd));
      const double err = denom < 1e-6 ? std::abs(a - fd) : std::abs(a - fd) / denom;
      worst = std::max(worst, err);
    }
  }
  return worst;
}

std::vector<GradCheckResult> gradcheck_ops(uint64_t seed, bool include_negative_control) {
  std::vector<GradCheckResult> results;
  Rng rng(seed);
  auto run = [&](const std::string& name, const std::function<TensorD()>& loss_fn,
                 std::vector<TensorD> params) {
    const double err = max_fd_error(loss_fn, std::move(params));
    results.push_back({name, err, err <= kGradCheckTolerance});
  };

  {
    TensorD a = random_param(rng, {2, 3, 4});
    TensorD b = random_param(rng, {3, 4});
    TensorD w = random_tensor(rng, {2, 3, 4});
    run("add(broadcast)", [=] { return weighted_sum(add(a, b), w); }, {a, b});
  }
  {
    TensorD a = random_param(rng, {2, 3, 4});
    TensorD b = random_param(rng, {4});
    TensorD w = random_tensor(rng, {2, 3, 4});
    run("sub(broadcast)", [=] { return weighted_sum(sub(a, b), w); }, {a, b});
  }
  {
    TensorD a = random_param(rng, {2, 3, 4});
    TensorD b = random_param(rng, {3, 4});
    TensorD w = random_tensor(rng, {2, 3, 4});
    run("mul(broadcast)", [=] { return weighted_sum(mul(a, b), w); }, {a, b});
  }
  {
    TensorD a = random_param(rng, {3, 5});
    TensorD w = random_tensor(rng, {3, 5});
    run("scale", [=] { return weighted_sum(scale(a, -1.7), w); }, {a});
    run("add_scalar", [=] { return weighted_sum(add_scalar(a, 0.35), w); }, {a});
  }
  {
    TensorD a = random_param(rng, {3, 4});
    TensorD b = random_param(rng, {4, 5});
    TensorD w = random_tensor(rng, {3, 5});
    run("matmul(2d)", [=] { return weighted_sum(matmul(a, b), w); }, {a, b});
  }
  {
    TensorD a = random_param(rng, {2, 2, 3, 4});
    TensorD b = random_param(rng, {2, 2, 4, 5});
    TensorD w = random_tensor(rng, {2, 2, 3, 5});
    run("matmul(batched)", [=] { return weighted_sum(matmul(a, b), w); }, {a, b});
  }
  {
    TensorD a = random_param(rng, {2, 3, 4});
    TensorD b = random_param(rng, {4, 5});
    TensorD w = random_tensor(rng, {2, 3, 5});
    run("matmul(rhs broadcast)", [=] { return weighted_sum(matmul(a, b), w); }, {a, b});
  }
  {
    TensorD a = random_param(rng, {2, 3, 4});
    TensorD w = random_tensor(rng, {4, 3, 2});
    run("transpose", [=] { return weighted_sum(transpose(a, 0, 2), w); }, {a});
  }
  {
    TensorD a = random_param(rng, {2, 6});
    TensorD w = random_tensor(rng, {3, 4});
    run("reshape", [=] { return weighted_sum(reshape(a, {3, 4}), w); }, {a});
  }
  {
    TensorD a = random_param(rng, {2, 5, 3});
    TensorD w = random_tensor(rng, {2, 2, 3});
    run("slice", [=] { return weighted_sum(slice(a, 1, 1, 2), w); }, {a});
  }
  {
    TensorD a = random_param(rng, {2, 2, 3});
    TensorD b = random_param(rng, {2, 4, 3});
    TensorD w = random_tensor(rng, {2, 6, 3});
    run("concat", [=] { return weighted_sum(concat<D>({a, b}, 1), w); }, {a, b});
  }
  {
    TensorD a = random_param(rng, {3, 2});
    TensorD w = random_tensor(rng, {4, 3, 2});
    run("repeat_leading", [=] { return weighted_sum(repeat_leading(a, 4), w); }, {a});
  }
  {
    TensorD a = random_param(rng, {2, 4, 3});
    TensorD w = random_tensor(rng, {2, 3});
    run("reduce_sum", [=] { return weighted_sum(reduce_sum(a, 1), w); }, {a});
    run("reduce_mean", [=] { return weighted_sum(reduce_mean(a, 1), w); }, {a});
  }
  {
    TensorD a = random_param(rng, {3, 4});
    run("sum_all", [=] { return sum_all(a); }, {a});
    run("mean_all", [=] { return mean_all(a); }, {a});
  }
  {
    TensorD a = random_param(rng, {2, 5, 3});
    TensorD w0 = random_tensor(rng, {2, 5, 3});
    run("softmax(last)", [=] { return weighted_sum(softmax(a, -1), w0); }, {a});
    run("softmax(axis 1)", [=] { return weighted_sum(softmax(a, 1), w0); }, {a});
  }
  {
    TensorD a = random_param(rng, {4, 6});
    TensorD w = random_tensor(rng, {4, 6});
    run("gelu", [=] { return weighted_sum(gelu(a), w); }, {a});
  }
  {
    TensorD x = random_param(rng, {3, 4, 6});
    LayerNormParams<D> ln{random_param(rng, {6}, 0.5, 1.5), random_param(rng, {6}, -0.5, 0.5), 1e-6};
    TensorD w = random_tensor(rng, {3, 4, 6});
    run("layernorm", [=] { return weighted_sum(layernorm(x, ln), w); }, {x, ln.gamma, ln.beta});
  }
  {
    TensorD x = random_param(rng, {2, 3, 4, 4});
    BatchNorm2dParams<D> bn = make_batchnorm2d<D>(3);
    bn.gamma = random_param(rng, {3}, 0.5, 1.5);
    bn.beta = random_param(rng, {3}, -0.5, 0.5);
    TensorD w = random_tensor(rng, {2, 3, 4, 4});
    auto bn_state = std::make_shared<BatchNorm2dParams<D>>(bn);
    run("batchnorm2d(train)",
        [=] { return weighted_sum(batchnorm2d(x, *bn_state, true), w); },
        {x, bn.gamma, bn.beta});
    for (auto& v : bn_state->running_mean.data_mut()) v = rng.uniform(-0.5, 0.5);
    for (auto& v : bn_state->running_var.data_mut()) v = rng.uniform(0.5, 2.0);
    run("batchnorm2d(eval)",
        [=] { return weighted_sum(batchnorm2d(x, *bn_state, false), w); },
        {x, bn.gamma, bn.beta});
  }
  for (int k : {3, 5}) {
    TensorD x = random_param(rng, {2, 3, 5, 5});
    TensorD weight = random_param(rng, {3, k, k});
    TensorD bias = random_param(rng, {3});
    TensorD w = random_tensor(rng, {2, 3, 5, 5});
    run("depthwise_conv2d(k" + std::to_string(k) + ")",
        [=] { return weighted_sum(depthwise_conv2d(x, weight, bias), w); }, {x, weight, bias});
  }
  {
    TensorD img = random_param(rng, {2, 3, 8, 8});
    TensorD w = random_tensor(rng, {2, 4, 48});
    run("extract_patches", [=] { return weighted_sum(extract_patches(img, 4), w); }, {img});
  }
  {
    TensorD table = random_param(rng, {6, 4});
    const std::vector<int64_t> rows = {1, 3, 3, 0, 5};
    TensorD w = random_tensor(rng, {5, 4});
    run("embedding_lookup", [=] { return weighted_sum(embedding_lookup(table, rows), w); },
        {table});
  }
  {
    TensorD logits = random_param(rng, {4, 6});
    const std::vector<int64_t> labels = {0, 5, 2, 2};
    run("cross_entropy", [=] { return cross_entropy(logits, labels); }, {logits});
    run("cross_entropy(smoothed)", [=] { return cross_entropy(logits, labels, 0.1); }, {logits});
  }
  {
    // composite blocks over a 4-patch-token sequence with class token
    const int64_t dim = 8;
    Rng init(seed ^ 0x9e3779b9ULL);
    TokenSequence<D> seq;
    seq.tokens = random_param(rng, {2, 5, dim}, -1.0, 1.0);
    seq.has_class_token = true;
    seq.grid_h = seq.grid_w = 2;
    MhsaParams<D> attn;
    attn.ln = make_layernorm<D>(dim);
    attn.heads = 2;
    attn.query = make_linear<D>(init, dim, dim);
    attn.key = make_linear<D>(init, dim, dim);
    attn.value = make_linear<D>(init, dim, dim);
    attn.out = make_linear<D>(init, dim, dim);
    TensorD w = random_tensor(rng, {2, 5, dim});
    std::vector<TensorD> params = {seq.tokens,      attn.ln.gamma,    attn.ln.beta,
                                   attn.query.weight, attn.query.bias, attn.key.weight,
                                   attn.key.bias,   attn.value.weight, attn.value.bias,
                                   attn.out.weight, attn.out.bias};
    for (auto& p : params) p.set_requires_grad(true);
    run("mhsa_block", [=] { return weighted_sum(mhsa_block(seq, attn).tokens, w); }, params);

    FfnParams<D> ffn;
    ffn.ln = make_layernorm<D>(dim);
    ffn.expand = make_linear<D>(init, dim, 2 * dim);
    ffn.project = make_linear<D>(init, 2 * dim, dim);
    std::vector<TensorD> fparams = {seq.tokens,        ffn.ln.gamma,     ffn.ln.beta,
                                    ffn.expand.weight, ffn.expand.bias,  ffn.project.weight,
                                    ffn.project.bias};
    for (auto& p : fparams) p.set_requires_grad(true);
    run("ffn_block", [=] { return weighted_sum(ffn_block(seq, ffn).tokens, w); }, fparams);

    auto branch = std::make_shared<DWBranchParams<D>>(make_dw_branch<D>(init, dim, 3));
    std::vector<TensorD> dparams = {seq.tokens, branch->weight, branch->bias, branch->bn.gamma,
                                    branch->bn.beta};
    for (auto& p : dparams) p.set_requires_grad(true);
    run("dw_branch", [=] { return weighted_sum(dw_branch_forward(seq, *branch, true), w); },
        dparams);
  }

  if (include_negative_control) {
    TensorD a = random_param(rng, {3, 3});
    TensorD w = random_tensor(rng, {3, 3});
    // square with a wrong derivative (x instead of 2x); the checker must flag it
    run("negative_control(corrupted backward)",
        [=] {
          return weighted_sum(
              custom_unary(a, [](double v) { return v * v; }, [](double v) { return v; }), w);
        },
        {a});
  }
  return results;
}

GradCheckResult gradcheck_model(uint64_t seed) {
  ModelConfig config;
  config.image_size = 8;
  config.patch_size = 4;  // 2x2 grid -> 4 patch tokens
  config.dim = 8;
  config.depth = 2;
  config.heads = 2;
  config.mlp_ratio = 2;
  config.num_classes = 3;
  config.bypass.kind = BypassKind::dwconv;
  config.bypass.kernel_sizes = {3};
  config.bypass.group_size = 1;
  config.seed = seed;

  Model<double> model(config);
  Rng rng(seed ^ 0x5bf03635ULL);
  TensorD images = random_tensor(rng, {2, 3, 8, 8}, -1.0, 1.0);
  const std::vector<int64_t> labels = {1, 2};
  std::vector<TensorD> params;
  for (auto& e : model.entries())
    if (e.trainable) params.push_back(e.tensor);
  auto model_ptr = std::make_shared<Model<double>>(std::move(model));
  const double err = max_fd_error(
      [=] {
        return cross_entropy(model_ptr->forward(images, /*training=*/true), labels);
      },
      params);
  return {"model(dim8/depth2/4 patch tokens)", err, err <= kGradCheckTolerance};
}

std::string format_gradcheck_report(const std::vector<GradCheckResult>& results) {
  std::ostringstream os;
  size_t width = 0;
  for (const auto& r : results) width = std::max(width, r.name.size());
  for (const auto& r : results) {
    os << (r.pass ? "PASS  " : "FAIL  ") << r.name;
    os << std::string(width - r.name.size() + 2, ' ');
    char buf[40];
    std::snprintf(buf, sizeof(buf), "max_rel_err=%.3e", r.max_error);
    os << buf << "\n";
  }
  return os.str();
}

}  // namespace vitdw
