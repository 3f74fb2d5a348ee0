#include "vitdw/complexity.hpp"

#include <iomanip>
#include <sstream>

namespace vitdw {
namespace {

void add_term(std::vector<std::pair<std::string, int64_t>>& terms, const std::string& name,
              int64_t value) {
  terms.emplace_back(name, value);
}

}  // namespace

ComplexityReport count_params(const ModelConfig& config, bool paper_convention) {
  config.validate();
  ComplexityReport r;
  r.paper_convention = paper_convention;
  const int64_t dim = config.dim;
  const int64_t patch_in =
      static_cast<int64_t>(config.in_channels) * config.patch_size * config.patch_size;
  const int64_t seq = config.seq_len();
  const int64_t mlp = config.mlp_dim();

  const int64_t patch = dim * patch_in + dim;
  add_term(r.param_terms, "patch_embed", patch);
  r.backbone_params += patch;
  if (config.use_class_token) {
    add_term(r.param_terms, "class_token", dim);
    r.backbone_params += dim;
  }
  if (config.use_pos_embed) {
    add_term(r.param_terms, "pos_embed", seq * dim);
    r.backbone_params += seq * dim;
  }
  const int64_t per_block = 2 * dim                    // ln1
                            + 4 * (dim * dim + dim)    // q, k, v, out
                            + 2 * dim                  // ln2
                            + dim * mlp + mlp          // fc1
                            + mlp * dim + dim;         // fc2
  add_term(r.param_terms, "blocks(" + std::to_string(config.depth) + " x " +
                              std::to_string(per_block) + ")",
           per_block * config.depth);
  r.backbone_params += per_block * config.depth;
  add_term(r.param_terms, "final_ln", 2 * dim);
  r.backbone_params += 2 * dim;
  const int64_t head = dim * config.num_classes + config.num_classes;
  add_term(r.param_terms, "head", head);
  r.backbone_params += head;

  r.dw_params = extra_params(config.bypass, dim, config.depth, !paper_convention);
  if (config.bypass.kind == BypassKind::dwconv) add_term(r.param_terms, "dw_bypass", r.dw_params);
  r.total_params = r.backbone_params + r.dw_params;
  return r;
}

ComplexityReport count_flops(const ModelConfig& config) {
  config.validate();
  ComplexityReport r;
  const int64_t dim = config.dim;
  const int64_t patches = config.num_patches();
  const int64_t seq = config.seq_len();  // attention runs over L' tokens, class token included
  const int64_t mlp = config.mlp_dim();
  const int64_t patch_in =
      static_cast<int64_t>(config.in_channels) * config.patch_size * config.patch_size;

  const int64_t patch = patches * dim * patch_in;
  add_term(r.flop_terms, "patch_embed", patch);
  r.backbone_flops += patch;
  const int64_t mhsa = 4 * seq * dim * dim + 2 * seq * seq * dim;
  const int64_t ffn = 2 * seq * dim * mlp;
  add_term(r.flop_terms, "block_mhsa(" + std::to_string(config.depth) + " x " +
                             std::to_string(mhsa) + ")",
           mhsa * config.depth);
  add_term(r.flop_terms, "block_ffn(" + std::to_string(config.depth) + " x " +
                             std::to_string(ffn) + ")",
           ffn * config.depth);
  r.backbone_flops += (mhsa + ffn) * config.depth;
  const int64_t head = dim * config.num_classes;
  add_term(r.flop_terms, "head", head);
  r.backbone_flops += head;

  r.dw_flops = extra_flops(config.bypass, dim, config.depth, config.grid(), config.grid());
  if (config.bypass.kind == BypassKind::dwconv) add_term(r.flop_terms, "dw_bypass", r.dw_flops);
  r.total_flops = r.backbone_flops + r.dw_flops;
  return r;
}

ComplexityReport analyze_complexity(const ModelConfig& config, bool paper_convention) {
  ComplexityReport params = count_params(config, paper_convention);
  ComplexityReport flops = count_flops(config);
  params.backbone_flops = flops.backbone_flops;
  params.dw_flops = flops.dw_flops;
  params.total_flops = flops.total_flops;
  params.flop_terms = flops.flop_terms;
  return params;
}

std::string ComplexityReport::to_text() const {
  std::ostringstream os;
  auto line = [&os](const std::string& name, int64_t value) {
    os << "  " << std::left << std::setw(34) << name << std::right << std::setw(16) << value << "\n";
  };
  os << "parameters" << (paper_convention ? " (paper convention: DW BatchNorm excluded)" : "")
     << ":\n";
  for (const auto& [name, value] : param_terms) line(name, value);
  line("backbone_params", backbone_params);
  line("dw_params", dw_params);
  line("total_params", total_params);
  os << "flops (multiply-accumulates):\n";
  for (const auto& [name, value] : flop_terms) line(name, value);
  line("backbone_flops", backbone_flops);
  line("dw_flops", dw_flops);
  line("total_flops", total_flops);
  return os.str();
}

std::string ComplexityReport::to_csv() const {
  std::ostringstream os;
  os << "key,value\n";
  os << "backbone_params," << backbone_params << "\n";
  os << "dw_params," << dw_params << "\n";
  os << "total_params," << total_params << "\n";
  os << "backbone_flops," << backbone_flops << "\n";
  os << "dw_flops," << dw_flops << "\n";
  os << "total_flops," << total_flops << "\n";
  os << "paper_convention," << (paper_convention ? 1 : 0) << "\n";
  for (const auto& [name, value] : param_terms) os << "param_term." << name << "," << value << "\n";
  for (const auto& [name, value] : flop_terms) os << "flop_term." << name << "," << value << "\n";
  return os.str();
}

}  // namespace vitdw
