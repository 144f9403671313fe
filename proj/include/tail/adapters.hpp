#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "tail/policy.hpp"

namespace tail {

enum class AdapterMethod { lora, bottleneck, prefix, roboadapter };

std::string_view method_name(AdapterMethod m);
AdapterMethod method_from_name(std::string_view name);

struct AdapterSpec {
  std::set<AdapterMethod> methods = {AdapterMethod::lora};
  Index lora_rank = 8;
  double lora_alpha = 8.0;
  bool lora_feedforward = false;  // also adapt mlp.fc1 / mlp.fc2
  Index bottleneck_size = 32;
  Index roboadapter_size = 64;
  std::set<Index> roboadapter_decoder_layers = {0, 1};
  std::set<Index> roboadapter_encoder_layers = {0, 1};
  Index prefix_len = 30;
  Index prefix_rank = 16;
  Index decoder_rank_multiplier = 2;
  double init_noise_std = 0.001;
  Activation activation = Activation::gelu;

  bool has(AdapterMethod m) const { return methods.count(m) != 0; }
  // Throws ConfigError when a rank or size does not fit the host.
  void validate(const PolicySpec& host) const;
  bool operator==(const AdapterSpec&) const = default;
};

nlohmann::json to_json(const AdapterSpec& s);
AdapterSpec adapter_spec_from_json(const nlohmann::json& j);

// h W + alpha * (h W_down) W_up. W: [d, k], h: [..., d], W_down: [d, r],
// W_up: [r, k].
Tensor lora_forward(const Tensor& W, const Tensor& h, const Tensor& down, const Tensor& up, double alpha);
// The same map through the merged matrix W + alpha * W_down W_up.
Tensor lora_forward_merged(const Tensor& W, const Tensor& h, const Tensor& down, const Tensor& up, double alpha);

// base + phi(base W_down) W_up. W_down: [k, r], W_up: [r, k].
Tensor bottleneck_forward(const Tensor& base_out, const Tensor& down, const Tensor& up, Activation phi);

struct InsertionPoint {
  std::string module;  // "perception" or "decoder"
  Index layer;
};
// Bottlenecks after the feedforward sublayer of each masked layer.
std::vector<InsertionPoint> roboadapter_placement(const AdapterSpec& spec, const PolicySpec& host);

// Prefix tokens P_down^T P_up ([m, d]) prepended to seq [B, n, d]. Callers
// drop the first m outputs of the decoder.
Tensor prefix_extend(const Tensor& seq, const Tensor& down, const Tensor& up, Index capacity);

enum class Strategy { tail, fft, fpf, er, ewc };
std::string_view strategy_name(Strategy s);
Strategy strategy_from_name(std::string_view name);

// Shapes of every adapter tensor the spec adds to a host, keyed by name.
std::map<std::string, Shape> adapter_layout(const AdapterSpec& spec, const PolicySpec& host);

struct AdapterBundle {
  std::string suite_id;
  AdapterSpec spec;
  std::string base_digest;
  TensorMap adapters;    // adapter weights, keyed by parameter name
  TensorMap fusion;      // copy of the fusion module
  TensorMap head;        // copy of the policy head
};

// Fresh bundle: LoRA down and prefix factors ~ N(0, 0.02^2), every up
// projection zero. With `prev`, all tensors are prev + N(0, init_noise_std^2).
AdapterBundle init_adapter(const AdapterSpec& spec, const PolicyWeights& base, const AdapterBundle* prev,
                           std::uint64_t seed, std::string suite_id = {});

// Base weights with the bundle's fusion/head copies and adapters applied.
ParamTable bind(const PolicyWeights& base, const AdapterBundle* bundle);
ForwardConfig forward_config(const AdapterBundle* bundle);

// Names that receive gradients under a strategy. For tail, adapter names
// are those in the bundle.
std::set<std::string> build_freeze_mask(const PolicyWeights& w, Strategy strategy, const AdapterBundle* bundle);

struct ParamCount {
  std::map<std::string, Index> per_group;  // group name, plus "adapters"
  Index trainable = 0;
  Index total = 0;
  double fraction() const { return total ? static_cast<double>(trainable) / static_cast<double>(total) : 0.0; }
};
ParamCount count_trainable(const PolicyWeights& w, const std::set<std::string>& mask, const AdapterBundle* bundle);
// Same accounting from shapes alone; nothing is allocated.
ParamCount count_trainable(const PolicySpec& host, const AdapterSpec& spec, Strategy strategy);

void save_bundle(const AdapterBundle& b, const std::filesystem::path& dir);
// Throws DigestMismatch when the bundle was trained against another base.
AdapterBundle load_bundle(const std::filesystem::path& dir, const std::string& base_digest);

}  // namespace tail
