#include "tail/policy.hpp"

#include <cmath>
#include <numbers>
#include <random>

#include "tail/adapters.hpp"
#include "tail/errors.hpp"
#include "tail/json_util.hpp"

namespace tail {

using nlohmann::json;

// ---- spec ------------------------------------------------------------------------

void PolicySpec::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("policy: " + what);
  };
  need(embed_dim > 0, "embed_dim must be positive");
  need(decoder_layers >= 1 && perception_layers >= 0, "layer counts out of range");
  need(decoder_heads >= 1 && embed_dim % decoder_heads == 0, "embed_dim must be divisible by decoder_heads");
  need(perception_heads >= 1 && embed_dim % perception_heads == 0, "embed_dim must be divisible by perception_heads");
  need(perception_tokens >= 1 && mlp_ratio >= 1, "perception_tokens and mlp_ratio must be positive");
  need(max_seq_len >= 1, "max_seq_len must be >= 1");
  need(gmm_modes >= 1, "gmm_modes must be >= 1");
  need(gmm_min_std > 0.0, "gmm_min_std must be > 0");
  need(action_dim >= 1 && state_dim >= 1, "action_dim and state_dim must be positive");
  need(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0, 1)");
  need(film_layers >= 1 && fusion_hidden >= 1 && head_hidden >= 1, "fusion/head sizes must be positive");
  need(perception_lora_rank >= 0 && perception_lora_rank <= embed_dim, "perception_lora_rank out of range");
}

json to_json(const PolicySpec& s) {
  return {{"embed_dim", s.embed_dim},
          {"decoder_layers", s.decoder_layers},
          {"decoder_heads", s.decoder_heads},
          {"perception_layers", s.perception_layers},
          {"perception_heads", s.perception_heads},
          {"perception_tokens", s.perception_tokens},
          {"mlp_ratio", s.mlp_ratio},
          {"max_seq_len", s.max_seq_len},
          {"gmm_modes", s.gmm_modes},
          {"gmm_min_std", s.gmm_min_std},
          {"action_dim", s.action_dim},
          {"state_dim", s.state_dim},
          {"dropout", s.dropout},
          {"film_layers", s.film_layers},
          {"fusion_hidden", s.fusion_hidden},
          {"head_hidden", s.head_hidden},
          {"perception_lora_rank", s.perception_lora_rank},
          {"perception_lora_alpha", s.perception_lora_alpha}};
}

PolicySpec policy_spec_from_json(const json& j) {
  PolicySpec s;
  StrictObject o(j, "policy");
  o.get("embed_dim", s.embed_dim);
  o.get("decoder_layers", s.decoder_layers);
  o.get("decoder_heads", s.decoder_heads);
  o.get("perception_layers", s.perception_layers);
  o.get("perception_heads", s.perception_heads);
  o.get("perception_tokens", s.perception_tokens);
  o.get("mlp_ratio", s.mlp_ratio);
  o.get("max_seq_len", s.max_seq_len);
  o.get("gmm_modes", s.gmm_modes);
  o.get("gmm_min_std", s.gmm_min_std);
  o.get("action_dim", s.action_dim);
  o.get("state_dim", s.state_dim);
  o.get("dropout", s.dropout);
  o.get("film_layers", s.film_layers);
  o.get("fusion_hidden", s.fusion_hidden);
  o.get("head_hidden", s.head_hidden);
  o.get("perception_lora_rank", s.perception_lora_rank);
  o.get("perception_lora_alpha", s.perception_lora_alpha);
  o.finish();
  s.validate();
  return s;
}

// ---- groups and layout -------------------------------------------------------------

namespace {

constexpr std::string_view kGroupNames[] = {"perception_encoder", "instruction_encoder", "state_encoder",
                                            "fusion",             "decoder",             "policy_head"};

std::string layer_name(std::string_view module, Index i) {
  return std::string(module) + ".l" + std::to_string(i);
}

void add_block(std::map<std::string, ParamInfo>& out, const std::string& p, Index d, Index hidden, ParamGroup g) {
  out[p + ".ln1.g"] = {{d}, g};
  out[p + ".ln1.b"] = {{d}, g};
  for (const char* proj : {"q", "k", "v", "o"}) {
    out[p + ".attn." + proj + ".w"] = {{d, d}, g};
    out[p + ".attn." + proj + ".b"] = {{d}, g};
  }
  out[p + ".ln2.g"] = {{d}, g};
  out[p + ".ln2.b"] = {{d}, g};
  out[p + ".mlp.fc1.w"] = {{d, hidden}, g};
  out[p + ".mlp.fc1.b"] = {{hidden}, g};
  out[p + ".mlp.fc2.w"] = {{hidden, d}, g};
  out[p + ".mlp.fc2.b"] = {{d}, g};
}

void add_fc(std::map<std::string, ParamInfo>& out, const std::string& p, Index in, Index outw, ParamGroup g) {
  out[p + ".w"] = {{in, outw}, g};
  out[p + ".b"] = {{outw}, g};
}

std::uint64_t name_hash(std::string_view s) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ULL;
  return h;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

bool starts_with(std::string_view s, std::string_view prefix) { return s.substr(0, prefix.size()) == prefix; }

}  // namespace

std::string_view group_name(ParamGroup g) { return kGroupNames[static_cast<std::size_t>(g)]; }

ParamGroup group_from_name(std::string_view name) {
  for (ParamGroup g : kAllGroups)
    if (group_name(g) == name) return g;
  throw DataError("unknown parameter group '" + std::string(name) + "'");
}

std::map<std::string, ParamInfo> policy_layout(const PolicySpec& s) {
  using G = ParamGroup;
  const Index d = s.embed_dim, hidden = s.mlp_ratio * d;
  std::map<std::string, ParamInfo> out;

  out["perception.pos"] = {{s.perception_tokens, d}, G::perception_encoder};
  for (Index i = 0; i < s.perception_layers; ++i) {
    const std::string p = layer_name("perception", i);
    add_block(out, p, d, hidden, G::perception_encoder);
    if (s.perception_lora_rank > 0)
      for (const char* proj : {"q", "v"}) {
        out[p + ".attn." + proj + ".pre_lora.down"] = {{d, s.perception_lora_rank}, G::perception_encoder};
        out[p + ".attn." + proj + ".pre_lora.up"] = {{s.perception_lora_rank, d}, G::perception_encoder};
      }
  }
  out["perception.ln_f.g"] = {{d}, G::perception_encoder};
  out["perception.ln_f.b"] = {{d}, G::perception_encoder};

  add_fc(out, "instruction", d, d, G::instruction_encoder);

  add_fc(out, "state.fc1", s.state_dim, d, G::state_encoder);
  add_fc(out, "state.fc2", d, d, G::state_encoder);

  for (Index l = 1; l <= s.film_layers; ++l) {
    const Index in = l == 1 ? d : s.fusion_hidden;
    const Index outw = l == s.film_layers ? 2 * d : s.fusion_hidden;
    add_fc(out, "fusion.fc" + std::to_string(l), in, outw, G::fusion);
  }

  out["decoder.pos"] = {{2 * s.max_seq_len, d}, G::decoder};
  for (Index i = 0; i < s.decoder_layers; ++i) add_block(out, layer_name("decoder", i), d, hidden, G::decoder);
  out["decoder.ln_f.g"] = {{d}, G::decoder};
  out["decoder.ln_f.b"] = {{d}, G::decoder};

  add_fc(out, "head.fc1", d, s.head_hidden, G::policy_head);
  add_fc(out, "head.fc2", s.head_hidden, s.head_out(), G::policy_head);
  return out;
}

// ---- weights -----------------------------------------------------------------------

PolicyWeights::PolicyWeights(PolicySpec spec, std::map<std::string, Param> params)
    : spec_(std::move(spec)), params_(std::move(params)) {
  const auto layout = policy_layout(spec_);
  for (const auto& [name, info] : layout) {
    auto it = params_.find(name);
    if (it == params_.end()) throw DataError("missing parameter '" + name + "'");
    if (it->second.value.shape() != info.shape)
      throw DataError("parameter '" + name + "' has shape " + to_string(it->second.value.shape()) + ", expected " +
                      to_string(info.shape));
  }
  if (params_.size() != layout.size())
    for (const auto& [name, p] : params_)
      if (!layout.count(name)) throw DataError("unexpected parameter '" + name + "'");
}

PolicyWeights PolicyWeights::init(const PolicySpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto layout = policy_layout(spec);
  const Index depth = spec.decoder_layers;
  std::map<std::string, Param> params;
  for (const auto& [name, info] : layout) {
    const Index n = numel(info.shape);
    Vec v = Vec::Zero(n);
    std::mt19937_64 rng(hash_combine(seed, name_hash(name)));
    auto fill = [&](double sd) {
      std::normal_distribution<double> nd(0.0, sd);
      for (Index i = 0; i < n; ++i) v[i] = nd(rng);
    };
    const bool frozen_group =
        info.group == ParamGroup::perception_encoder || info.group == ParamGroup::instruction_encoder;
    const double fan_in_sd = info.shape.size() == 2 ? 1.0 / std::sqrt(static_cast<double>(info.shape[0])) : 0.0;

    if (ends_with(name, ".g")) {
      v.setOnes();
    } else if (ends_with(name, ".b") || ends_with(name, "pre_lora.up")) {
      // zeros
    } else if (ends_with(name, "pre_lora.down")) {
      fill(0.02);
    } else if (name == "fusion.fc" + std::to_string(spec.film_layers) + ".w") {
      // zero final FiLM layer: fusion starts as the identity
    } else if (ends_with(name, ".pos")) {
      fill(frozen_group ? 1.0 : 0.02);
    } else if (frozen_group || starts_with(name, "state.") || starts_with(name, "fusion.") ||
               starts_with(name, "head.")) {
      fill(fan_in_sd);
    } else if (ends_with(name, "attn.o.w") || ends_with(name, "mlp.fc2.w")) {
      fill(0.02 / std::sqrt(2.0 * static_cast<double>(depth)));
    } else {
      fill(0.02);
    }
    params.emplace(name, Param{Tensor(info.shape, std::move(v)), info.group});
  }
  PolicyWeights w(spec, std::move(params));
  w.set_frozen(ParamGroup::perception_encoder, true);
  w.set_frozen(ParamGroup::instruction_encoder, true);
  return w;
}

const Tensor& PolicyWeights::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter '" + name + "'");
  return it->second.value;
}

ParamGroup PolicyWeights::group_of(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter '" + name + "'");
  return it->second.group;
}

void PolicyWeights::set(const std::string& name, Tensor value) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("no parameter '" + name + "'");
  if (it->second.value.shape() != value.shape())
    throw ShapeError("set '" + name + "': shape " + to_string(value.shape()) + " != " +
                     to_string(it->second.value.shape()));
  it->second.value = value.detach();
}

Index PolicyWeights::count(ParamGroup g) const {
  Index n = 0;
  for (const auto& [name, p] : params_)
    if (p.group == g) n += p.value.numel();
  return n;
}

Index PolicyWeights::total() const {
  Index n = 0;
  for (const auto& [name, p] : params_) n += p.value.numel();
  return n;
}

TensorMap PolicyWeights::tensors() const {
  TensorMap m;
  for (const auto& [name, p] : params_) m.emplace(name, p.value);
  return m;
}

TensorMap PolicyWeights::tensors(ParamGroup g) const {
  TensorMap m;
  for (const auto& [name, p] : params_)
    if (p.group == g) m.emplace(name, p.value);
  return m;
}

std::string PolicyWeights::digest() const { return tail::digest(tensors()); }
std::string PolicyWeights::digest(ParamGroup g) const { return tail::digest(tensors(g)); }

void save_checkpoint(const PolicyWeights& w, const std::filesystem::path& dir, const json& extra) {
  json meta = extra.is_object() ? extra : json::object();
  meta["kind"] = "policy_checkpoint";
  meta["spec"] = to_json(w.spec());
  std::map<std::string, json> tmeta;
  for (const auto& [name, p] : w.params())
    tmeta[name] = {{"group", group_name(p.group)}, {"frozen", w.frozen(p.group)}};
  save_tensors(dir, w.tensors(), meta, tmeta);
}

PolicyWeights load_checkpoint(const std::filesystem::path& dir) {
  LoadedTensors lt = load_tensors(dir);
  const json& m = lt.manifest;
  if (m.value("kind", "") != "policy_checkpoint") throw DataError(dir.string() + " is not a policy checkpoint");
  PolicySpec spec;
  try {
    spec = policy_spec_from_json(m.at("spec"));
  } catch (const std::exception& e) {
    throw DataError("bad spec in " + dir.string() + ": " + e.what());
  }
  std::map<std::string, Param> params;
  std::array<bool, kAllGroups.size()> frozen{};
  try {
    for (const json& e : m.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const ParamGroup g = group_from_name(e.at("group").get<std::string>());
      frozen[static_cast<std::size_t>(g)] = e.at("frozen").get<bool>();
      params.emplace(name, Param{lt.tensors.at(name), g});
    }
  } catch (const json::exception& e) {
    throw DataError("corrupt manifest in " + dir.string() + ": " + e.what());
  }
  PolicyWeights w(spec, std::move(params));
  for (ParamGroup g : kAllGroups) w.set_frozen(g, frozen[static_cast<std::size_t>(g)]);
  return w;
}

// ---- parameter table ---------------------------------------------------------------

const Tensor& ParamTable::operator()(const std::string& name) const {
  auto it = map_.find(name);
  if (it == map_.end()) throw std::out_of_range("no parameter '" + name + "' bound");
  return it->second;
}

const Tensor* ParamTable::find(const std::string& name) const {
  auto it = map_.find(name);
  return it == map_.end() ? nullptr : &it->second;
}

ParamTable bind(const PolicyWeights& w) {
  ParamTable t;
  for (const auto& [name, p] : w.params()) t.set(name, p.value);
  return t;
}

// ---- forward pieces ----------------------------------------------------------------

namespace {

Tensor apply_bottleneck(const Tensor& x, const ParamTable& p, const std::string& name, const ForwardConfig& cfg) {
  const Tensor* down = p.find(name + ".down");
  if (!down) return x;
  return bottleneck_forward(x, *down, p(name + ".up"), cfg.adapter_act);
}

Tensor mlp2(const Tensor& x, const ParamTable& p, const std::string& name, const ForwardConfig& cfg) {
  return linear(gelu(linear(x, p, name + ".fc1", cfg, 0.0)), p, name + ".fc2", cfg, 0.0);
}

// Rows of t ([B, d]) repeated n times each: [B, n, d].
Tensor repeat_rows(const Tensor& t, Index n) {
  const Index b = t.dim(0), d = t.dim(1);
  std::vector<Index> idx(static_cast<std::size_t>(b * n));
  for (Index i = 0; i < b; ++i)
    for (Index j = 0; j < n; ++j) idx[static_cast<std::size_t>(i * n + j)] = i;
  return reshape(embedding_lookup(t, idx), {b, n, d});
}

Tensor attention(const Tensor& x, const Tensor* mask, const ParamTable& p, const std::string& prefix, Index heads,
                 const ForwardConfig& cfg, double pre_alpha) {
  const Index b = x.dim(0), n = x.dim(1), d = x.dim(2), dh = d / heads;
  static constexpr std::array<Index, 4> perm{0, 2, 1, 3};
  auto split = [&](const Tensor& t) { return transpose(reshape(t, {b, n, heads, dh}), perm); };
  const Tensor q = split(linear(x, p, prefix + ".q", cfg, pre_alpha));
  const Tensor k = split(linear(x, p, prefix + ".k", cfg, pre_alpha));
  const Tensor v = split(linear(x, p, prefix + ".v", cfg, pre_alpha));
  Tensor scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (mask) scores = masked_fill(scores, *mask, -1e30);
  const Tensor ctx = matmul(softmax(scores, -1), v);
  return linear(reshape(transpose(ctx, perm), {b, n, d}), p, prefix + ".o", cfg, pre_alpha);
}

void check_finite(const Tensor& t, std::string_view where) {
  if (!t.values().allFinite()) throw NumericalError("non-finite values in " + std::string(where));
}

}  // namespace

Tensor causal_mask(Index n) {
  Vec m = Vec::Zero(n * n);
  for (Index i = 0; i < n; ++i)
    for (Index j = i + 1; j < n; ++j) m[i * n + j] = 1.0;
  return Tensor({n, n}, std::move(m));
}

Tensor linear(const Tensor& x, const ParamTable& p, const std::string& name, const ForwardConfig& cfg,
              double pre_lora_alpha) {
  const Tensor& w = p(name + ".w");
  Tensor y = matmul(x, w);
  if (const Tensor* down = p.find(name + ".pre_lora.down"))
    y = add(y, scale(matmul(matmul(x, *down), p(name + ".pre_lora.up")), pre_lora_alpha));
  if (const Tensor* down = p.find(name + ".lora.down"))
    y = add(y, scale(matmul(matmul(x, *down), p(name + ".lora.up")), cfg.lora_alpha));
  if (const Tensor* bias = p.find(name + ".b")) y = add(y, *bias);
  return y;
}

Tensor film_modulate(const Tensor& x, const Tensor& z, const ParamTable& p, const PolicySpec& spec) {
  const Index d = spec.embed_dim;
  if (z.dim(-1) != d)
    throw ShapeError("film_modulate: task code width " + std::to_string(z.dim(-1)) + " != " + std::to_string(d));
  if (x.dim(-1) != d) throw ShapeError("film_modulate: token width " + std::to_string(x.dim(-1)) + " != " + std::to_string(d));
  const ForwardConfig plain;
  Tensor h = z;
  for (Index l = 1; l <= spec.film_layers; ++l) {
    h = linear(h, p, "fusion.fc" + std::to_string(l), plain, 0.0);
    if (l < spec.film_layers) h = gelu(h);
  }
  Tensor gamma = add(slice(h, -1, 0, d), Tensor::full({d}, 1.0));
  Tensor beta = slice(h, -1, d, 2 * d);
  if (z.rank() == 2) {
    if (x.rank() != 3 || x.dim(0) != z.dim(0))
      throw ShapeError("film_modulate: batch of task codes " + to_string(z.shape()) + " does not match tokens " +
                       to_string(x.shape()));
    gamma = repeat_rows(gamma, x.dim(1));
    beta = repeat_rows(beta, x.dim(1));
  }
  return add(mul(x, gamma), beta);
}

Tensor decoder_block(const Tensor& x, const Tensor* mask, const ParamTable& p, const std::string& prefix, Index heads,
                     double dropout_p, std::uint64_t site, const ForwardConfig& cfg, double pre_lora_alpha) {
  const bool batched = x.rank() == 3;
  const Tensor in = batched ? x : reshape(x, {1, x.dim(0), x.dim(1)});
  const Index n = in.dim(1);
  if (mask && mask->shape() != Shape{n, n})
    throw ShapeError("decoder_block: mask " + to_string(mask->shape()) + " for " + std::to_string(n) + " tokens");

  Tensor h = attention(layer_norm(in, p(prefix + ".ln1.g"), p(prefix + ".ln1.b")), mask, p, prefix + ".attn", heads,
                       cfg, pre_lora_alpha);
  h = apply_bottleneck(h, p, prefix + ".attn_adapter", cfg);
  h = dropout(h, dropout_p, {cfg.dropout_seed, cfg.step, 2 * site}, cfg.train);
  Tensor out = add(in, h);

  const Tensor normed = layer_norm(out, p(prefix + ".ln2.g"), p(prefix + ".ln2.b"));
  Tensor m = linear(gelu(linear(normed, p, prefix + ".mlp.fc1", cfg, pre_lora_alpha)), p, prefix + ".mlp.fc2", cfg,
                    pre_lora_alpha);
  m = apply_bottleneck(m, p, prefix + ".mlp_adapter", cfg);
  m = apply_bottleneck(m, p, prefix + ".robo_adapter", cfg);
  m = dropout(m, dropout_p, {cfg.dropout_seed, cfg.step, 2 * site + 1}, cfg.train);
  out = add(out, m);
  return batched ? out : reshape(out, {n, x.dim(1)});
}

Tensor policy_forward(const PolicySpec& spec, const ParamTable& p, const SeqBatch& in, const ForwardConfig& cfg) {
  const Index b = in.batch, n = in.steps, d = spec.embed_dim, P = spec.perception_tokens;
  if (n < 1) throw std::invalid_argument("policy_forward: empty history");
  if (n > spec.max_seq_len)
    throw std::invalid_argument("policy_forward: history of " + std::to_string(n) + " steps exceeds max_seq_len " +
                                std::to_string(spec.max_seq_len));
  if (in.perception.shape() != Shape{b, n, spec.perception_dim()} || in.state.shape() != Shape{b, n, spec.state_dim} ||
      in.task_emb.shape() != Shape{b, d})
    throw ShapeError("policy_forward: batch tensors " + to_string(in.perception.shape()) + ", " +
                     to_string(in.state.shape()) + ", " + to_string(in.task_emb.shape()) + " do not match spec");

  // Perception: frozen bidirectional encoder over P patch tokens, mean-pooled.
  Tensor pt = add(reshape(in.perception, {b * n, P, d}), p("perception.pos"));
  for (Index i = 0; i < spec.perception_layers; ++i)
    pt = decoder_block(pt, nullptr, p, "perception.l" + std::to_string(i), spec.perception_heads, 0.0, 0, cfg,
                       spec.perception_lora_alpha);
  pt = mean(layer_norm(pt, p("perception.ln_f.g"), p("perception.ln_f.b")), 1);
  pt = reshape(pt, {b, n, 1, d});

  const ForwardConfig plain;
  Tensor st = reshape(mlp2(in.state, p, "state", plain), {b, n, 1, d});
  Tensor z = linear(in.task_emb, p, "instruction", plain, 0.0);

  // Interleave [perception_t, state_t] per timestep.
  Tensor tokens = reshape(concat({pt, st}, 2), {b, 2 * n, d});
  tokens = film_modulate(tokens, z, p, spec);
  tokens = add(tokens, slice(p("decoder.pos"), 0, 0, 2 * n));
  tokens = dropout(tokens, spec.dropout, {cfg.dropout_seed, cfg.step, 1}, cfg.train);

  Index m = 0;
  if (const Tensor* down = p.find("decoder.prefix.down")) {
    m = down->dim(1);
    tokens = prefix_extend(tokens, *down, p("decoder.prefix.up"), m + 2 * spec.max_seq_len);
  }
  const Tensor mask = causal_mask(m + 2 * n);
  for (Index i = 0; i < spec.decoder_layers; ++i)
    tokens = decoder_block(tokens, &mask, p, "decoder.l" + std::to_string(i), spec.decoder_heads, spec.dropout,
                           static_cast<std::uint64_t>(i + 1), cfg, 0.0);
  tokens = layer_norm(tokens, p("decoder.ln_f.g"), p("decoder.ln_f.b"));
  if (m > 0) tokens = slice(tokens, 1, m, m + 2 * n);

  // The head reads each timestep's state token.
  Tensor state_out = reshape(slice(reshape(tokens, {b, n, 2, d}), 2, 1, 2), {b, n, d});
  Tensor raw = mlp2(state_out, p, "head", plain);
  check_finite(raw, "policy_forward");
  return raw;
}

// ---- mixture -----------------------------------------------------------------------

Tensor gmm_nll(const PolicySpec& spec, const Tensor& raw, const Tensor& actions, const Tensor& weight) {
  const Index K = spec.gmm_modes, A = spec.action_dim;
  const Index b = raw.dim(0), n = raw.dim(1);
  if (raw.shape() != Shape{b, n, spec.head_out()} || actions.shape() != Shape{b, n, A} || weight.shape() != Shape{b, n})
    throw ShapeError("gmm_nll: shapes " + to_string(raw.shape()) + ", " + to_string(actions.shape()) + ", " +
                     to_string(weight.shape()) + " do not match spec");
  if (!actions.values().allFinite()) throw std::invalid_argument("gmm_nll: non-finite action");
  const double wsum = weight.values().sum();
  if (wsum <= 0.0) throw std::invalid_argument("gmm_nll: no weighted positions");

  const Tensor logits = slice(raw, 2, 0, K);
  const Tensor mu = reshape(slice(raw, 2, K, K + K * A), {b, n, K, A});
  const Tensor sigma = add(softplus(reshape(slice(raw, 2, K + K * A, K + 2 * K * A), {b, n, K, A})),
                           Tensor::full({A}, spec.gmm_min_std));
  const Tensor log_sigma = log(sigma);

  Vec arep(b * n * K * A);
  for (Index i = 0; i < b * n; ++i)
    for (Index k = 0; k < K; ++k) arep.segment((i * K + k) * A, A) = actions.values().segment(i * A, A);
  const Tensor a(Shape{b, n, K, A}, std::move(arep));

  const Tensor zs = mul(sub(a, mu), exp(scale(log_sigma, -1.0)));
  const Tensor per_dim = sub(scale(mul(zs, zs), -0.5), log_sigma);
  const Tensor comp = add(sum(per_dim, 3), Tensor::full({K}, -0.5 * static_cast<double>(A) *
                                                                 std::log(2.0 * std::numbers::pi)));
  const Tensor nll = sub(logsumexp(logits, 2), logsumexp(add(logits, comp), 2));
  return scale(sum(mul(nll, weight)), 1.0 / wsum);
}

GmmParams gmm_params(const PolicySpec& spec, const Tensor& raw, Index b, Index t) {
  const Index K = spec.gmm_modes, A = spec.action_dim, O = spec.head_out();
  const Index n = raw.dim(1);
  const Vec r = raw.values().segment((b * n + t) * O, O);
  GmmParams g;
  g.logits = r.head(K);
  g.means = Eigen::Map<const RowMat>(r.data() + K, K, A);
  g.stds.resize(K, A);
  for (Index k = 0; k < K; ++k)
    for (Index j = 0; j < A; ++j) {
      const double x = r[K + K * A + k * A + j];
      g.stds(k, j) = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))) + spec.gmm_min_std;
    }
  return g;
}

double gmm_nll(const GmmParams& g, const Vec& action) {
  if (!action.allFinite()) throw std::invalid_argument("gmm_nll: non-finite action");
  const Index K = g.logits.size(), A = g.means.cols();
  if (action.size() != A) throw ShapeError("gmm_nll: action width mismatch");
  const double lmax = g.logits.maxCoeff();
  const double lse_w = lmax + std::log((g.logits.array() - lmax).exp().sum());
  Vec comp(K);
  for (Index k = 0; k < K; ++k) {
    double c = g.logits[k] - lse_w;
    for (Index j = 0; j < A; ++j) {
      const double z = (action[j] - g.means(k, j)) / g.stds(k, j);
      c += -0.5 * z * z - std::log(g.stds(k, j)) - 0.5 * std::log(2.0 * std::numbers::pi);
    }
    comp[k] = c;
  }
  const double cmax = comp.maxCoeff();
  return -(cmax + std::log((comp.array() - cmax).exp().sum()));
}

Vec select_action(const GmmParams& g) {
  // log w_k - sum_j log sigma_kj: mixture weight times the component's
  // density at its own mean, up to a shared constant.
  Index best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (Index k = 0; k < g.logits.size(); ++k) {
    const double score = g.logits[k] - g.stds.row(k).array().log().sum();
    if (score > best_score) {
      best_score = score;
      best = k;
    }
  }
  return g.means.row(best).transpose();
}

GmmParams policy_forward(const PolicySpec& spec, const ParamTable& p, const std::vector<Observation>& history,
                         const Vec& task_emb, const ForwardConfig& cfg) {
  const Index n = static_cast<Index>(history.size());
  if (n == 0) throw std::invalid_argument("policy_forward: empty history");
  Vec perc(n * spec.perception_dim()), st(n * spec.state_dim);
  for (Index t = 0; t < n; ++t) {
    const Observation& o = history[static_cast<std::size_t>(t)];
    if (o.perception.size() != spec.perception_dim() || o.state.size() != spec.state_dim)
      throw ShapeError("policy_forward: observation width mismatch");
    perc.segment(t * spec.perception_dim(), spec.perception_dim()) = o.perception;
    st.segment(t * spec.state_dim, spec.state_dim) = o.state;
  }
  SeqBatch in{1, n, Tensor({1, n, spec.perception_dim()}, std::move(perc)), Tensor({1, n, spec.state_dim}, std::move(st)),
              Tensor({1, spec.embed_dim}, task_emb)};
  return gmm_params(spec, policy_forward(spec, p, in, cfg), 0, n - 1);
}

}  // namespace tail
