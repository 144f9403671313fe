#include "tail/adapters.hpp"

#include <random>

#include "tail/errors.hpp"
#include "tail/json_util.hpp"

namespace tail {

using nlohmann::json;

namespace {

constexpr std::pair<AdapterMethod, std::string_view> kMethodNames[] = {
    {AdapterMethod::lora, "lora"},
    {AdapterMethod::bottleneck, "bottleneck"},
    {AdapterMethod::prefix, "prefix"},
    {AdapterMethod::roboadapter, "roboadapter"},
};

constexpr std::pair<Strategy, std::string_view> kStrategyNames[] = {
    {Strategy::tail, "tail"}, {Strategy::fft, "fft"}, {Strategy::fpf, "fpf"}, {Strategy::er, "er"}, {Strategy::ewc, "ewc"},
};

std::string layer(std::string_view module, Index i) { return std::string(module) + ".l" + std::to_string(i); }

Tensor act(const Tensor& x, Activation a) { return a == Activation::gelu ? gelu(x) : tail::tanh(x); }

Tensor gaussian(const Shape& shape, double sd, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, sd);
  Vec v(numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = nd(rng);
  return Tensor(shape, std::move(v));
}

bool is_up(const std::string& name) { return name.size() >= 3 && name.compare(name.size() - 3, 3, ".up") == 0; }

}  // namespace

std::string_view method_name(AdapterMethod m) {
  for (const auto& [k, n] : kMethodNames)
    if (k == m) return n;
  return "unknown";
}

AdapterMethod method_from_name(std::string_view name) {
  for (const auto& [k, n] : kMethodNames)
    if (n == name) return k;
  throw ConfigError("unknown adapter method '" + std::string(name) + "'");
}

std::string_view strategy_name(Strategy s) {
  for (const auto& [k, n] : kStrategyNames)
    if (k == s) return n;
  return "unknown";
}

Strategy strategy_from_name(std::string_view name) {
  for (const auto& [k, n] : kStrategyNames)
    if (n == name) return k;
  throw ConfigError("unknown strategy '" + std::string(name) + "'");
}

// ---- spec --------------------------------------------------------------------------

void AdapterSpec::validate(const PolicySpec& host) const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("adapter: " + what);
  };
  const Index d = host.embed_dim, mult = decoder_rank_multiplier;
  need(mult >= 1, "decoder_rank_multiplier must be >= 1");
  need(init_noise_std >= 0.0, "init_noise_std must be >= 0");
  if (has(AdapterMethod::lora)) {
    need(lora_rank >= 1, "lora_rank must be >= 1");
    need(lora_rank * mult <= d, "lora rank " + std::to_string(lora_rank) + " (x" + std::to_string(mult) +
                                    " in the decoder) exceeds min(d, k) = " + std::to_string(d));
  }
  if (has(AdapterMethod::bottleneck)) {
    need(bottleneck_size >= 1, "bottleneck_size must be >= 1");
    need(bottleneck_size * mult <= d, "bottleneck size " + std::to_string(bottleneck_size) +
                                          " (decoder x" + std::to_string(mult) + ") is wider than k = " +
                                          std::to_string(d));
  }
  if (has(AdapterMethod::roboadapter)) {
    need(roboadapter_size >= 1, "roboadapter_size must be >= 1");
    need(roboadapter_size * mult <= d, "roboadapter size " + std::to_string(roboadapter_size) +
                                           " (decoder x" + std::to_string(mult) + ") is wider than k = " +
                                           std::to_string(d));
    for (Index l : roboadapter_decoder_layers)
      need(l >= 0 && l < host.decoder_layers, "roboadapter decoder layer " + std::to_string(l) + " out of range");
    for (Index l : roboadapter_encoder_layers)
      need(l >= 0 && l < host.perception_layers, "roboadapter encoder layer " + std::to_string(l) + " out of range");
  }
  if (has(AdapterMethod::prefix)) {
    need(prefix_len >= 0, "prefix_len must be >= 0");
    need(prefix_len == 0 || (prefix_rank >= 1 && prefix_rank <= d), "prefix_rank out of range");
  }
}

json to_json(const AdapterSpec& s) {
  json methods = json::array();
  for (AdapterMethod m : s.methods) methods.push_back(method_name(m));
  return {{"methods", methods},
          {"lora_rank", s.lora_rank},
          {"lora_alpha", s.lora_alpha},
          {"lora_feedforward", s.lora_feedforward},
          {"bottleneck_size", s.bottleneck_size},
          {"roboadapter_size", s.roboadapter_size},
          {"roboadapter_decoder_layers", s.roboadapter_decoder_layers},
          {"roboadapter_encoder_layers", s.roboadapter_encoder_layers},
          {"prefix_len", s.prefix_len},
          {"prefix_rank", s.prefix_rank},
          {"decoder_rank_multiplier", s.decoder_rank_multiplier},
          {"init_noise_std", s.init_noise_std},
          {"activation", s.activation == Activation::gelu ? "gelu" : "tanh"}};
}

AdapterSpec adapter_spec_from_json(const json& j) {
  AdapterSpec s;
  StrictObject o(j, "adapter");
  std::vector<std::string> methods;
  o.get("methods", methods);
  if (j.contains("methods")) {
    s.methods.clear();
    for (const auto& m : methods) s.methods.insert(method_from_name(m));
  }
  o.get("lora_rank", s.lora_rank);
  o.get("lora_alpha", s.lora_alpha);
  o.get("lora_feedforward", s.lora_feedforward);
  o.get("bottleneck_size", s.bottleneck_size);
  o.get("roboadapter_size", s.roboadapter_size);
  o.get("roboadapter_decoder_layers", s.roboadapter_decoder_layers);
  o.get("roboadapter_encoder_layers", s.roboadapter_encoder_layers);
  o.get("prefix_len", s.prefix_len);
  o.get("prefix_rank", s.prefix_rank);
  o.get("decoder_rank_multiplier", s.decoder_rank_multiplier);
  o.get("init_noise_std", s.init_noise_std);
  std::string a = "gelu";
  o.get("activation", a);
  if (a == "gelu") s.activation = Activation::gelu;
  else if (a == "tanh") s.activation = Activation::tanh;
  else throw ConfigError("adapter.activation: expected gelu or tanh, got '" + a + "'");
  o.finish();
  return s;
}

// ---- primitives --------------------------------------------------------------------

Tensor lora_forward(const Tensor& W, const Tensor& h, const Tensor& down, const Tensor& up, double alpha) {
  if (down.rank() != 2 || up.rank() != 2 || down.dim(1) != up.dim(0))
    throw ShapeError("lora: rank mismatch between W_down " + to_string(down.shape()) + " and W_up " +
                     to_string(up.shape()));
  return add(matmul(h, W), scale(matmul(matmul(h, down), up), alpha));
}

Tensor lora_forward_merged(const Tensor& W, const Tensor& h, const Tensor& down, const Tensor& up, double alpha) {
  if (down.rank() != 2 || up.rank() != 2 || down.dim(1) != up.dim(0))
    throw ShapeError("lora: rank mismatch between W_down " + to_string(down.shape()) + " and W_up " +
                     to_string(up.shape()));
  return matmul(h, add(W, scale(matmul(down, up), alpha)));
}

Tensor bottleneck_forward(const Tensor& base_out, const Tensor& down, const Tensor& up, Activation phi) {
  const Index k = base_out.dim(-1);
  if (down.rank() != 2 || up.rank() != 2 || down.dim(0) != k || up.dim(1) != k || down.dim(1) != up.dim(0))
    throw ShapeError("bottleneck: projections " + to_string(down.shape()) + ", " + to_string(up.shape()) +
                     " do not fit width " + std::to_string(k));
  if (down.dim(1) > k)
    throw ConfigError("bottleneck: size " + std::to_string(down.dim(1)) + " wider than k = " + std::to_string(k));
  return add(base_out, matmul(act(matmul(base_out, down), phi), up));
}

std::vector<InsertionPoint> roboadapter_placement(const AdapterSpec& spec, const PolicySpec& host) {
  std::vector<InsertionPoint> plan;
  for (Index l : spec.roboadapter_encoder_layers) {
    if (l < 0 || l >= host.perception_layers)
      throw ConfigError("roboadapter: encoder layer " + std::to_string(l) + " out of range for depth " +
                        std::to_string(host.perception_layers));
    plan.push_back({"perception", l});
  }
  for (Index l : spec.roboadapter_decoder_layers) {
    if (l < 0 || l >= host.decoder_layers)
      throw ConfigError("roboadapter: decoder layer " + std::to_string(l) + " out of range for depth " +
                        std::to_string(host.decoder_layers));
    plan.push_back({"decoder", l});
  }
  return plan;
}

Tensor prefix_extend(const Tensor& seq, const Tensor& down, const Tensor& up, Index capacity) {
  if (down.rank() != 2 || up.rank() != 2 || down.dim(0) != up.dim(0))
    throw ShapeError("prefix: factor shapes " + to_string(down.shape()) + ", " + to_string(up.shape()));
  const Index m = down.dim(1), d = up.dim(1);
  const Index n = seq.dim(-2);
  if (seq.dim(-1) != d) throw ShapeError("prefix: token width " + std::to_string(seq.dim(-1)) + " != " + std::to_string(d));
  if (m + n > capacity)
    throw ShapeError("prefix: " + std::to_string(m) + " prefix + " + std::to_string(n) +
                     " tokens exceed positional capacity " + std::to_string(capacity));
  const Tensor p = matmul(transpose(down), up);  // [m, d]
  if (seq.rank() == 2) return concat({p, seq}, 0);
  const Index b = seq.dim(0);
  std::vector<Index> idx(static_cast<std::size_t>(b * m));
  for (Index i = 0; i < b; ++i)
    for (Index j = 0; j < m; ++j) idx[static_cast<std::size_t>(i * m + j)] = j;
  return concat({reshape(embedding_lookup(p, idx), {b, m, d}), seq}, 1);
}

// ---- layout and bundles ------------------------------------------------------------

std::map<std::string, Shape> adapter_layout(const AdapterSpec& spec, const PolicySpec& host) {
  spec.validate(host);
  const Index d = host.embed_dim, hidden = host.mlp_ratio * d, mult = spec.decoder_rank_multiplier;
  std::map<std::string, Shape> out;
  auto pair = [&](const std::string& name, Index in, Index r, Index outw) {
    out[name + ".down"] = {in, r};
    out[name + ".up"] = {r, outw};
  };
  struct Module {
    const char* name;
    Index depth;
    Index mult;
    const std::set<Index>* robo;
  };
  const Module modules[] = {{"perception", host.perception_layers, 1, &spec.roboadapter_encoder_layers},
                            {"decoder", host.decoder_layers, mult, &spec.roboadapter_decoder_layers}};
  for (const Module& mod : modules) {
    for (Index i = 0; i < mod.depth; ++i) {
      const std::string blk = layer(mod.name, i);
      if (spec.has(AdapterMethod::lora)) {
        const Index r = spec.lora_rank * mod.mult;
        pair(blk + ".attn.q.lora", d, r, d);
        pair(blk + ".attn.v.lora", d, r, d);
        if (spec.lora_feedforward) {
          pair(blk + ".mlp.fc1.lora", d, r, hidden);
          pair(blk + ".mlp.fc2.lora", hidden, r, d);
        }
      }
      if (spec.has(AdapterMethod::bottleneck)) {
        const Index r = spec.bottleneck_size * mod.mult;
        pair(blk + ".attn_adapter", d, r, d);
        pair(blk + ".mlp_adapter", d, r, d);
      }
      if (spec.has(AdapterMethod::roboadapter) && mod.robo->count(i))
        pair(blk + ".robo_adapter", d, spec.roboadapter_size * mod.mult, d);
    }
  }
  if (spec.has(AdapterMethod::prefix) && spec.prefix_len > 0) {
    out["decoder.prefix.down"] = {spec.prefix_rank, spec.prefix_len};
    out["decoder.prefix.up"] = {spec.prefix_rank, d};
  }
  return out;
}

AdapterBundle init_adapter(const AdapterSpec& spec, const PolicyWeights& base, const AdapterBundle* prev,
                           std::uint64_t seed, std::string suite_id) {
  const auto layout = adapter_layout(spec, base.spec());
  AdapterBundle b;
  b.suite_id = std::move(suite_id);
  b.spec = spec;
  b.base_digest = base.digest();
  std::mt19937_64 rng(seed);

  if (prev) {
    if (!(prev->spec == spec)) throw ConfigError("init_adapter: previous bundle has a different adapter spec");
    if (prev->base_digest != b.base_digest)
      throw DigestMismatch("init_adapter: previous bundle was trained against base " + prev->base_digest);
    auto perturb = [&](const TensorMap& src) {
      TensorMap dst;
      for (const auto& [name, t] : src) {
        if (spec.init_noise_std == 0.0) {
          dst.emplace(name, t);
          continue;
        }
        const Tensor noise = gaussian(t.shape(), spec.init_noise_std, rng);
        dst.emplace(name, Tensor(t.shape(), t.values() + noise.values()));
      }
      return dst;
    };
    b.adapters = perturb(prev->adapters);
    b.fusion = prev->fusion;
    b.head = prev->head;
    return b;
  }

  for (const auto& [name, shape] : layout) {
    const bool prefix = name.rfind("decoder.prefix.", 0) == 0;
    if (is_up(name) && !prefix) b.adapters.emplace(name, Tensor(shape));
    else b.adapters.emplace(name, gaussian(shape, 0.02, rng));
  }
  b.fusion = base.tensors(ParamGroup::fusion);
  b.head = base.tensors(ParamGroup::policy_head);
  return b;
}

ParamTable bind(const PolicyWeights& base, const AdapterBundle* bundle) {
  ParamTable t = bind(base);
  if (!bundle) return t;
  for (const TensorMap* m : {&bundle->fusion, &bundle->head, &bundle->adapters})
    for (const auto& [name, v] : *m) t.set(name, v);
  return t;
}

ForwardConfig forward_config(const AdapterBundle* bundle) {
  ForwardConfig cfg;
  if (bundle) {
    cfg.lora_alpha = bundle->spec.lora_alpha;
    cfg.adapter_act = bundle->spec.activation;
  }
  return cfg;
}

std::set<std::string> build_freeze_mask(const PolicyWeights& w, Strategy strategy, const AdapterBundle* bundle) {
  std::set<std::string> mask;
  auto add_group = [&](ParamGroup g) {
    for (const auto& [name, p] : w.params())
      if (p.group == g) mask.insert(name);
  };
  switch (strategy) {
    case Strategy::tail:
      if (!bundle) throw std::invalid_argument("build_freeze_mask: tail strategy needs an adapter bundle");
      for (const auto& [name, t] : bundle->adapters) mask.insert(name);
      add_group(ParamGroup::fusion);
      add_group(ParamGroup::policy_head);
      break;
    case Strategy::fpf:
      add_group(ParamGroup::fusion);
      add_group(ParamGroup::policy_head);
      break;
    case Strategy::fft:
    case Strategy::er:
    case Strategy::ewc:
      for (const auto& [name, p] : w.params()) mask.insert(name);
      break;
  }
  return mask;
}

ParamCount count_trainable(const PolicyWeights& w, const std::set<std::string>& mask, const AdapterBundle* bundle) {
  ParamCount c;
  for (ParamGroup g : kAllGroups) c.per_group[std::string(group_name(g))] = w.count(g);
  c.total = w.total();
  Index adapters = 0;
  if (bundle)
    for (const auto& [name, t] : bundle->adapters) adapters += t.numel();
  c.per_group["adapters"] = adapters;
  c.total += adapters;
  for (const std::string& name : mask) {
    if (bundle) {
      if (auto it = bundle->adapters.find(name); it != bundle->adapters.end()) {
        c.trainable += it->second.numel();
        continue;
      }
    }
    c.trainable += w.at(name).numel();
  }
  return c;
}

ParamCount count_trainable(const PolicySpec& host, const AdapterSpec& spec, Strategy strategy) {
  ParamCount c;
  for (ParamGroup g : kAllGroups) c.per_group[std::string(group_name(g))] = 0;
  const auto base = policy_layout(host);
  for (const auto& [name, info] : base) {
    const Index n = numel(info.shape);
    c.per_group[std::string(group_name(info.group))] += n;
    c.total += n;
    const bool head_or_fusion = info.group == ParamGroup::fusion || info.group == ParamGroup::policy_head;
    if (strategy == Strategy::fft || strategy == Strategy::er || strategy == Strategy::ewc || head_or_fusion)
      c.trainable += n;
  }
  Index adapters = 0;
  if (strategy == Strategy::tail)
    for (const auto& [name, shape] : adapter_layout(spec, host)) adapters += numel(shape);
  c.per_group["adapters"] = adapters;
  c.total += adapters;
  c.trainable += adapters;
  return c;
}

void save_bundle(const AdapterBundle& b, const std::filesystem::path& dir) {
  TensorMap all;
  std::map<std::string, json> tmeta;
  auto put = [&](const TensorMap& m, const char* role) {
    for (const auto& [name, t] : m) {
      all.emplace(name, t);
      tmeta[name] = {{"role", role}};
    }
  };
  put(b.adapters, "adapter");
  put(b.fusion, "fusion");
  put(b.head, "head");
  const json meta = {{"kind", "adapter_bundle"},
                     {"suite_id", b.suite_id},
                     {"spec", to_json(b.spec)},
                     {"base_digest", b.base_digest}};
  save_tensors(dir, all, meta, tmeta);
}

AdapterBundle load_bundle(const std::filesystem::path& dir, const std::string& base_digest) {
  LoadedTensors lt = load_tensors(dir);
  const json& m = lt.manifest;
  if (m.value("kind", "") != "adapter_bundle") throw DataError(dir.string() + " is not an adapter bundle");
  AdapterBundle b;
  try {
    b.suite_id = m.at("suite_id").get<std::string>();
    b.base_digest = m.at("base_digest").get<std::string>();
    b.spec = adapter_spec_from_json(m.at("spec"));
    for (const json& e : m.at("tensors")) {
      const auto name = e.at("name").get<std::string>();
      const auto role = e.at("role").get<std::string>();
      TensorMap* dst = role == "adapter" ? &b.adapters : role == "fusion" ? &b.fusion : role == "head" ? &b.head : nullptr;
      if (!dst) throw DataError("unknown tensor role '" + role + "' in " + dir.string());
      dst->emplace(name, lt.tensors.at(name));
    }
  } catch (const json::exception& e) {
    throw DataError("corrupt bundle manifest in " + dir.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw DataError("bad adapter spec in " + dir.string() + ": " + e.what());
  }
  if (b.base_digest != base_digest)
    throw DigestMismatch("bundle " + dir.string() + " was trained against base " + b.base_digest +
                         ", current base is " + base_digest);
  return b;
}

}  // namespace tail
