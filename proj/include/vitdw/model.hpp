#pragma once

#include <string>

#include "vitdw/bypass.hpp"

namespace vitdw {

enum class Pooling { class_token, mean };

inline const char* pooling_name(Pooling p) {
  return p == Pooling::class_token ? "class_token" : "mean";
}

// Full architectural description of a classifier.
struct ModelConfig {
  int image_size = 32;
  int patch_size = 4;
  int in_channels = 3;
  int dim = 64;
  int depth = 4;
  int heads = 2;
  int mlp_ratio = 4;
  int num_classes = 10;
  bool use_pos_embed = true;
  bool use_class_token = true;
  Pooling pooling = Pooling::class_token;
  BypassSpec bypass;
  uint64_t seed = 42;

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int seq_len() const { return num_patches() + (use_class_token ? 1 : 0); }
  int mlp_dim() const { return dim * mlp_ratio; }

  void validate() const {
    check_config(image_size > 0 && patch_size > 0 && image_size % patch_size == 0,
                 "image_size " + std::to_string(image_size) + " must be divisible by patch_size " +
                     std::to_string(patch_size));
    check_config(in_channels >= 1, "in_channels must be >= 1");
    check_config(heads >= 1 && dim % heads == 0,
                 "dim " + std::to_string(dim) + " must be divisible by heads " + std::to_string(heads));
    check_config(depth >= 1, "depth must be >= 1, got " + std::to_string(depth));
    check_config(mlp_ratio >= 1, "mlp_ratio must be >= 1");
    check_config(num_classes >= 2, "num_classes must be >= 2, got " + std::to_string(num_classes));
    check_config(use_class_token || pooling == Pooling::mean,
                 "pooling must be mean when use_class_token is false");
    bypass.validate();
  }
};

// Canonical presets. The full-size models are instantiated for counting and
// analysis; the desk preset is the configuration the test suites train.
inline ModelConfig vit_tiny_config(int num_classes = 10) {
  ModelConfig c;
  c.image_size = 224;
  c.patch_size = 16;
  c.dim = 192;
  c.depth = 12;
  c.heads = 3;
  c.mlp_ratio = 4;
  c.num_classes = num_classes;
  return c;
}

inline ModelConfig vit_small_config(int num_classes = 10) {
  ModelConfig c = vit_tiny_config(num_classes);
  c.dim = 384;
  c.heads = 6;
  return c;
}

inline ModelConfig desk_config(int num_classes = 10) {
  ModelConfig c;
  c.image_size = 32;
  c.patch_size = 4;
  c.dim = 64;
  c.depth = 4;
  c.heads = 2;
  c.mlp_ratio = 4;
  c.num_classes = num_classes;
  return c;
}

// Block index ranges [first, last) spanned by each bypass group. A depth not
// divisible by group_size leaves a smaller trailing group.
inline std::vector<std::pair<int, int>> bypass_group_ranges(int depth, int group_size) {
  std::vector<std::pair<int, int>> ranges;
  for (int start = 0; start < depth; start += group_size)
    ranges.emplace_back(start, std::min(depth, start + group_size));
  return ranges;
}

template <typename T>
struct ParamEntry {
  std::string name;
  Tensor<T> tensor;
  bool trainable = true;      // false for BatchNorm running statistics
  bool weight_decay = true;   // optimizer decay mask
};

// A built classifier: patch embedding, depth Transformer blocks under the
// configured bypass, final LayerNorm, linear head. Parameters are initialized
// deterministically from config.seed in registration order.
template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& config) : config_(config) {
    config_.validate();
    Rng rng(config_.seed);
    const int64_t dim = config_.dim;
    const int64_t patch_inputs =
        static_cast<int64_t>(config_.in_channels) * config_.patch_size * config_.patch_size;

    embed_.patch.patch_size = config_.patch_size;
    embed_.patch.weight = init_truncated_normal<T>(rng, {dim, patch_inputs});
    embed_.patch.bias = Tensor<T>::zeros({dim});
    register_param("patch_embed.weight", embed_.patch.weight, true);
    register_param("patch_embed.bias", embed_.patch.bias, false);
    if (config_.use_class_token) {
      embed_.class_token = init_truncated_normal<T>(rng, {dim});
      register_param("class_token", *embed_.class_token, false);
    }
    if (config_.use_pos_embed) {
      embed_.pos_embed = init_truncated_normal<T>(rng, {config_.seq_len(), dim});
      register_param("pos_embed", *embed_.pos_embed, false);
    }

    for (int i = 0; i < config_.depth; ++i) {
      BlockParams<T> block;
      block.attn.ln = make_layernorm<T>(dim);
      block.attn.heads = config_.heads;
      block.attn.query = make_linear<T>(rng, dim, dim);
      block.attn.key = make_linear<T>(rng, dim, dim);
      block.attn.value = make_linear<T>(rng, dim, dim);
      block.attn.out = make_linear<T>(rng, dim, dim);
      block.ffn.ln = make_layernorm<T>(dim);
      block.ffn.expand = make_linear<T>(rng, dim, config_.mlp_dim());
      block.ffn.project = make_linear<T>(rng, config_.mlp_dim(), dim);
      blocks_.push_back(block);
      const std::string p = "blocks." + std::to_string(i) + ".";
      register_norm(p + "attn.ln", blocks_.back().attn.ln);
      register_linear(p + "attn.q", blocks_.back().attn.query);
      register_linear(p + "attn.k", blocks_.back().attn.key);
      register_linear(p + "attn.v", blocks_.back().attn.value);
      register_linear(p + "attn.out", blocks_.back().attn.out);
      register_norm(p + "ffn.ln", blocks_.back().ffn.ln);
      register_linear(p + "ffn.fc1", blocks_.back().ffn.expand);
      register_linear(p + "ffn.fc2", blocks_.back().ffn.project);
    }

    group_ranges_ = bypass_group_ranges(config_.depth, config_.bypass.group_size);
    if (config_.bypass.kind == BypassKind::dwconv) {
      for (size_t g = 0; g < group_ranges_.size(); ++g) {
        BypassGroupParams<T> group;
        for (int k : config_.bypass.kernel_sizes)
          group.branches.push_back(make_dw_branch<T>(rng, dim, k));
        bypass_groups_.push_back(group);
        for (size_t bi = 0; bi < bypass_groups_.back().branches.size(); ++bi) {
          DWBranchParams<T>& br = bypass_groups_.back().branches[bi];
          const std::string p =
              "bypass." + std::to_string(g) + ".k" + std::to_string(br.kernel_size) + ".";
          register_param(p + "weight", br.weight, true);
          register_param(p + "bias", br.bias, false);
          register_param(p + "bn.gamma", br.bn.gamma, false);
          register_param(p + "bn.beta", br.bn.beta, false);
          register_buffer(p + "bn.running_mean", br.bn.running_mean);
          register_buffer(p + "bn.running_var", br.bn.running_var);
        }
      }
    }

    final_ln_ = make_layernorm<T>(dim);
    register_norm("final_ln", final_ln_);
    head_ = make_linear<T>(rng, dim, config_.num_classes);
    register_linear("head", head_);
  }

  // Logits [batch, num_classes]. Training mode uses batch statistics in the
  // bypass BatchNorms and updates their running buffers.
  Tensor<T> forward(const Tensor<T>& images, bool training = false) {
    check_shape(images.rank() == 4 && images.dim(1) == config_.in_channels &&
                    images.dim(2) == config_.image_size && images.dim(3) == config_.image_size,
                "forward: expected images [batch, " + std::to_string(config_.in_channels) + ", " +
                    std::to_string(config_.image_size) + ", " + std::to_string(config_.image_size) +
                    "], got " + shape_str(images.shape()));
    TokenSequence<T> seq = patch_embed(images, embed_);
    BypassGroupParams<T> no_branches;
    for (size_t g = 0; g < group_ranges_.size(); ++g) {
      const auto [first, last] = group_ranges_[g];
      std::span<const BlockParams<T>> span(blocks_.data() + first,
                                           static_cast<size_t>(last - first));
      BypassGroupParams<T>& group =
          config_.bypass.kind == BypassKind::dwconv ? bypass_groups_[g] : no_branches;
      seq = bypass_group_forward(seq, span, config_.bypass, group, training);
    }
    Tensor<T> normed = layernorm(seq.tokens, final_ln_);
    Tensor<T> pooled;
    if (config_.pooling == Pooling::class_token) {
      pooled = reshape(slice(normed, 1, 0, 1), {seq.batch(), seq.dim()});
    } else {
      pooled = reduce_mean(normed, 1);
    }
    return linear(pooled, head_);
  }

  const ModelConfig& config() const { return config_; }
  const std::vector<std::pair<int, int>>& group_ranges() const { return group_ranges_; }

  std::vector<ParamEntry<T>>& entries() { return entries_; }
  const std::vector<ParamEntry<T>>& entries() const { return entries_; }

  Tensor<T>* find(const std::string& name) {
    for (auto& e : entries_)
      if (e.name == name) return &e.tensor;
    return nullptr;
  }

  int64_t num_trainable_params() const {
    int64_t n = 0;
    for (const auto& e : entries_)
      if (e.trainable) n += e.tensor.numel();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_)
      if (e.trainable) e.tensor.zero_grad();
  }

 private:
  void register_param(const std::string& name, Tensor<T>& t, bool decay) {
    t.set_requires_grad(true);
    entries_.push_back({name, t, true, decay});
  }

  void register_buffer(const std::string& name, Tensor<T>& t) {
    entries_.push_back({name, t, false, false});
  }

  void register_norm(const std::string& prefix, LayerNormParams<T>& ln) {
    register_param(prefix + ".gamma", ln.gamma, false);
    register_param(prefix + ".beta", ln.beta, false);
  }

  void register_linear(const std::string& prefix, LinearParams<T>& lin) {
    register_param(prefix + ".weight", lin.weight, true);
    register_param(prefix + ".bias", lin.bias, false);
  }

  ModelConfig config_;
  InputEmbedParams<T> embed_;
  std::vector<BlockParams<T>> blocks_;
  std::vector<BypassGroupParams<T>> bypass_groups_;
  std::vector<std::pair<int, int>> group_ranges_;
  LayerNormParams<T> final_ln_;
  LinearParams<T> head_;
  std::vector<ParamEntry<T>> entries_;
};

}  // namespace vitdw
