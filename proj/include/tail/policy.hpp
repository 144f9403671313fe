#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "tail/checkpoint.hpp"
#include "tail/tensor.hpp"

namespace tail {

struct PolicySpec {
  Index embed_dim = 64;
  Index decoder_layers = 2;
  Index decoder_heads = 4;
  Index perception_layers = 2;
  Index perception_heads = 4;
  Index perception_tokens = 4;  // perception features arrive as tokens x embed_dim
  Index mlp_ratio = 4;
  Index max_seq_len = 8;        // timesteps; the decoder sees two tokens per step
  Index gmm_modes = 5;
  double gmm_min_std = 1e-4;
  Index action_dim = 3;
  Index state_dim = 3;
  double dropout = 0.15;
  Index film_layers = 2;
  Index fusion_hidden = 16;
  Index head_hidden = 32;
  // Adapters trained together with the base during pretraining (they then
  // belong to the frozen perception encoder).
  Index perception_lora_rank = 4;
  double perception_lora_alpha = 1.0;

  Index perception_dim() const { return perception_tokens * embed_dim; }
  Index head_out() const { return gmm_modes * (1 + 2 * action_dim); }
  // Throws ConfigError.
  void validate() const;
  bool operator==(const PolicySpec&) const = default;
};

nlohmann::json to_json(const PolicySpec& s);
// Missing keys keep their defaults; unknown keys are a ConfigError.
PolicySpec policy_spec_from_json(const nlohmann::json& j);

enum class ParamGroup { perception_encoder, instruction_encoder, state_encoder, fusion, decoder, policy_head };
inline constexpr std::array kAllGroups = {ParamGroup::perception_encoder, ParamGroup::instruction_encoder,
                                          ParamGroup::state_encoder,      ParamGroup::fusion,
                                          ParamGroup::decoder,            ParamGroup::policy_head};
std::string_view group_name(ParamGroup g);
ParamGroup group_from_name(std::string_view name);

struct Param {
  Tensor value;
  ParamGroup group;
};

struct ParamInfo {
  Shape shape;
  ParamGroup group;
};
// Every base parameter of a policy, from shapes alone.
std::map<std::string, ParamInfo> policy_layout(const PolicySpec& spec);

class PolicyWeights {
 public:
  PolicyWeights() = default;
  PolicyWeights(PolicySpec spec, std::map<std::string, Param> params);

  // GPT-2 style init for learned parts, fan-in scaled init for the frozen
  // encoders, zero final FiLM layer.
  static PolicyWeights init(const PolicySpec& spec, std::uint64_t seed);

  const PolicySpec& spec() const { return spec_; }
  const std::map<std::string, Param>& params() const { return params_; }
  const Tensor& at(const std::string& name) const;
  ParamGroup group_of(const std::string& name) const;
  void set(const std::string& name, Tensor value);  // shape must match

  bool frozen(ParamGroup g) const { return frozen_[static_cast<std::size_t>(g)]; }
  void set_frozen(ParamGroup g, bool f) { frozen_[static_cast<std::size_t>(g)] = f; }

  Index count(ParamGroup g) const;
  Index total() const;

  TensorMap tensors() const;
  TensorMap tensors(ParamGroup g) const;
  std::string digest() const;
  std::string digest(ParamGroup g) const;

 private:
  PolicySpec spec_;
  std::map<std::string, Param> params_;
  std::array<bool, kAllGroups.size()> frozen_{};
};

// Checkpoint directory: manifest.json (spec echo, per-tensor group and frozen
// flag) plus tensors.bin.
void save_checkpoint(const PolicyWeights& w, const std::filesystem::path& dir, const nlohmann::json& extra = {});
PolicyWeights load_checkpoint(const std::filesystem::path& dir);

// Name -> tensor lookup used by the forward pass. Entries may be plain
// values or tape variables.
class ParamTable {
 public:
  void set(const std::string& name, Tensor t) { map_[name] = std::move(t); }
  const Tensor& operator()(const std::string& name) const;
  const Tensor* find(const std::string& name) const;
  bool contains(const std::string& name) const { return map_.count(name) != 0; }

 private:
  std::unordered_map<std::string, Tensor> map_;
};

enum class Activation { gelu, tanh };

struct ForwardConfig {
  double lora_alpha = 8.0;
  Activation adapter_act = Activation::gelu;
  bool train = false;
  std::uint64_t dropout_seed = 0;
  std::uint64_t step = 0;
};

struct GmmParams {
  Vec logits;    // [modes]
  RowMat means;  // [modes x action_dim]
  RowMat stds;   // [modes x action_dim]
};

struct Observation {
  Vec perception;  // [perception_dim]
  Vec state;       // [state_dim]
};

// B sequences of n timesteps. Rows of `perception` and `state` are
// batch-major then time.
struct SeqBatch {
  Index batch = 0;
  Index steps = 0;
  Tensor perception;  // [B, n, perception_dim]
  Tensor state;       // [B, n, state_dim]
  Tensor task_emb;    // [B, embed_dim]
};

// Strictly upper-triangular ones: position t may not see positions > t.
Tensor causal_mask(Index n);

// y = x W + b, plus every LoRA pair attached under `name` (pretrain-time
// ".pre_lora" and adaptation-time ".lora").
Tensor linear(const Tensor& x, const ParamTable& p, const std::string& name, const ForwardConfig& cfg,
              double pre_lora_alpha);

// x: [..., n, d]; z: [..., d] task code matching x's leading batch (or a
// single [d] vector for a rank-2 x). Returns (1 + gamma) * x + beta.
Tensor film_modulate(const Tensor& x, const Tensor& z, const ParamTable& p, const PolicySpec& spec);

// Pre-norm GPT-2 block over x: [B, n, d] with `mask` [n, n] (nullptr for
// bidirectional attention).
Tensor decoder_block(const Tensor& x, const Tensor* mask, const ParamTable& p, const std::string& prefix, Index heads,
                     double dropout, std::uint64_t site, const ForwardConfig& cfg, double pre_lora_alpha);

// Raw head outputs for every timestep: [B, n, modes * (1 + 2 * action_dim)].
Tensor policy_forward(const PolicySpec& spec, const ParamTable& p, const SeqBatch& in, const ForwardConfig& cfg = {});

// Mean mixture NLL over positions with weight 1 in `weight` [B, n].
// actions: [B, n, action_dim].
Tensor gmm_nll(const PolicySpec& spec, const Tensor& raw, const Tensor& actions, const Tensor& weight);

GmmParams gmm_params(const PolicySpec& spec, const Tensor& raw, Index b, Index t);
double gmm_nll(const GmmParams& g, const Vec& action);
Vec select_action(const GmmParams& g);

// Everything in `w` as plain tensors.
ParamTable bind(const PolicyWeights& w);

// Single-history convenience: latest-step mixture for one observation window.
GmmParams policy_forward(const PolicySpec& spec, const ParamTable& p, const std::vector<Observation>& history,
                         const Vec& task_emb, const ForwardConfig& cfg = {});

}  // namespace tail
