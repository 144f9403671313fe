#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include <unistd.h>

#include "helpers.hpp"
#include "tail/errors.hpp"
#include "tail/grad_check.hpp"
#include "tail/policy.hpp"

using namespace tail;
using namespace tail::test;
namespace fs = std::filesystem;

namespace {

double gelu_ref(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / std::numbers::pi) * (x + 0.044715 * x * x * x)));
}

RowMat as_mat(const Tensor& t) { return Eigen::Map<const RowMat>(t.data(), t.dim(0), t.dim(1)); }

// Layer norm of each row, written out longhand.
RowMat ln_ref(const RowMat& x, const Vec& g, const Vec& b) {
  RowMat y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const double mu = x.row(i).mean();
    double var = 0;
    for (Index j = 0; j < x.cols(); ++j) var += (x(i, j) - mu) * (x(i, j) - mu);
    var /= static_cast<double>(x.cols());
    for (Index j = 0; j < x.cols(); ++j) y(i, j) = (x(i, j) - mu) / std::sqrt(var + 1e-5) * g[j] + b[j];
  }
  return y;
}

// Plain block parameters under `prefix` with the MLP switched off.
ParamTable block_params(const std::string& prefix, Index d, std::mt19937_64& rng) {
  ParamTable p;
  p.set(prefix + ".ln1.g", randn({d}, rng, 0.5));
  p.set(prefix + ".ln1.b", randn({d}, rng, 0.5));
  p.set(prefix + ".ln2.g", randn({d}, rng, 0.5));
  p.set(prefix + ".ln2.b", randn({d}, rng, 0.5));
  for (const char* proj : {"q", "k", "v", "o"}) {
    p.set(prefix + ".attn." + proj + ".w", randn({d, d}, rng));
    p.set(prefix + ".attn." + proj + ".b", randn({d}, rng, 0.1));
  }
  p.set(prefix + ".mlp.fc1.w", randn({d, 2 * d}, rng));
  p.set(prefix + ".mlp.fc1.b", randn({2 * d}, rng));
  p.set(prefix + ".mlp.fc2.w", Tensor({2 * d, d}));
  p.set(prefix + ".mlp.fc2.b", Tensor({d}));
  return p;
}

fs::path scratch_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("tail_test_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("spec validation") {
  PolicySpec s;
  CHECK_NOTHROW(s.validate());
  s.decoder_heads = 5;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = {};
  s.gmm_min_std = 0.0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  s = {};
  s.max_seq_len = 0;
  CHECK_THROWS_AS(s.validate(), ConfigError);
  CHECK_THROWS_AS(policy_spec_from_json({{"embed_dimm", 8}}), ConfigError);
  CHECK(policy_spec_from_json(to_json(tiny_spec())) == tiny_spec());
}

TEST_CASE("every parameter belongs to exactly one group") {
  const PolicyWeights w = PolicyWeights::init(PolicySpec{}, 1);
  Index sum = 0;
  for (ParamGroup g : kAllGroups) sum += w.count(g);
  CHECK(sum == w.total());
  CHECK(w.frozen(ParamGroup::perception_encoder));
  CHECK(w.frozen(ParamGroup::instruction_encoder));
  CHECK_FALSE(w.frozen(ParamGroup::decoder));
  CHECK(w.count(ParamGroup::fusion) > 0);
  CHECK(w.count(ParamGroup::policy_head) > 0);
}

TEST_CASE("film_modulate") {
  const PolicySpec spec = tiny_spec();
  const Index d = spec.embed_dim;
  std::mt19937_64 rng(5);
  PolicyWeights w = PolicyWeights::init(spec, 2);
  const Tensor x = randn({3, d}, rng), z = randn({d}, rng);

  SUBCASE("zero final layer is the identity") {
    CHECK(bit_equal(film_modulate(x, z, bind(w), spec), x));
  }
  SUBCASE("gamma = 1, beta = 0 doubles the tokens") {
    Vec b = Vec::Zero(2 * d);
    b.head(d).setOnes();
    w.set("fusion.fc2.b", Tensor({2 * d}, b));
    const Tensor y = film_modulate(x, z, bind(w), spec);
    CHECK(bit_equal(y, scale(x, 2.0)));
  }
  SUBCASE("random g matches (1 + gamma) * x + beta") {
    scramble(w, rng);
    const ParamTable p = bind(w);
    RowMat h1 = (z.values().transpose() * as_mat(p("fusion.fc1.w"))).array() + p("fusion.fc1.b").values().transpose().array();
    h1 = h1.unaryExpr(&gelu_ref);
    const RowMat h2 = (h1 * as_mat(p("fusion.fc2.w"))).array() + p("fusion.fc2.b").values().transpose().array();
    const Tensor y = film_modulate(x, z, p, spec);
    const RowMat X = as_mat(x);
    double err = 0;
    for (Index i = 0; i < 3; ++i)
      for (Index j = 0; j < d; ++j) {
        const double want = (1.0 + h2(0, j)) * X(i, j) + h2(0, d + j);
        err = std::max(err, std::abs(want - y[i * d + j]));
      }
    CHECK(err < 1e-12);
  }
  SUBCASE("task code width is checked") {
    CHECK_THROWS_AS(film_modulate(x, randn({d + 1}, rng), bind(w), spec), ShapeError);
  }
}

TEST_CASE("decoder_block is causal for one and two layers") {
  std::mt19937_64 rng(11);
  const Index d = 8, n = 6;
  for (int layers : {1, 2}) {
    ParamTable p;
    for (int l = 0; l < layers; ++l) {
      const ParamTable b = block_params("b" + std::to_string(l), d, rng);
      for (const char* k : {".ln1.g", ".ln1.b", ".ln2.g", ".ln2.b", ".attn.q.w", ".attn.q.b", ".attn.k.w", ".attn.k.b",
                            ".attn.v.w", ".attn.v.b", ".attn.o.w", ".attn.o.b", ".mlp.fc1.w", ".mlp.fc1.b"})
        p.set("b" + std::to_string(l) + k, b("b" + std::to_string(l) + k));
      p.set("b" + std::to_string(l) + ".mlp.fc2.w", randn({2 * d, d}, rng));
      p.set("b" + std::to_string(l) + ".mlp.fc2.b", randn({d}, rng));
    }
    const Tensor mask = causal_mask(n);
    auto run = [&](const Tensor& x) {
      Tensor h = x;
      for (int l = 0; l < layers; ++l) h = decoder_block(h, &mask, p, "b" + std::to_string(l), 2, 0.0, 0, {}, 0.0);
      return h;
    };
    const Tensor x = randn({1, n, d}, rng);
    Vec bumped = x.values();
    bumped.segment(3 * d, d).array() += 0.7;
    const Tensor y0 = run(x), y1 = run(Tensor(x.shape(), bumped));
    CHECK(y0.values().head(3 * d) == y1.values().head(3 * d));
    CHECK(y0.values().tail(3 * d) != y1.values().tail(3 * d));
  }
}

TEST_CASE("single token attention returns the value projection") {
  std::mt19937_64 rng(3);
  const Index d = 4;
  const ParamTable p = block_params("b", d, rng);
  const Tensor x = randn({1, d}, rng);
  const Tensor mask = causal_mask(1);
  const Tensor y = decoder_block(x, &mask, p, "b", 1, 0.0, 0, {}, 0.0);
  const RowMat ln = ln_ref(as_mat(x), p("b.ln1.g").values(), p("b.ln1.b").values());
  const RowMat v = (ln * as_mat(p("b.attn.v.w"))).array() + p("b.attn.v.b").values().transpose().array();
  const RowMat o = (v * as_mat(p("b.attn.o.w"))).array() + p("b.attn.o.b").values().transpose().array();
  for (Index j = 0; j < d; ++j) CHECK(y[j] - x[j] == doctest::Approx(o(0, j)).epsilon(1e-12));
}

TEST_CASE("two-token attention matches a hand computation") {
  std::mt19937_64 rng(8);
  const Index d = 2;
  const ParamTable p = block_params("b", d, rng);
  const Tensor x = Tensor::from_rows({{0.3, -1.2}, {2.0, 0.5}});
  const Tensor mask = causal_mask(2);
  const Tensor y = decoder_block(x, &mask, p, "b", 1, 0.0, 0, {}, 0.0);

  const RowMat ln = ln_ref(as_mat(x), p("b.ln1.g").values(), p("b.ln1.b").values());
  auto proj = [&](const char* name) -> RowMat {
    return (ln * as_mat(p(std::string("b.attn.") + name + ".w"))).array().rowwise() +
           p(std::string("b.attn.") + name + ".b").values().transpose().array();
  };
  const RowMat q = proj("q"), k = proj("k"), v = proj("v");
  RowMat ctx(2, d);
  ctx.row(0) = v.row(0);  // the first token only sees itself
  const double s0 = q.row(1).dot(k.row(0)) / std::sqrt(2.0), s1 = q.row(1).dot(k.row(1)) / std::sqrt(2.0);
  const double w0 = std::exp(s0) / (std::exp(s0) + std::exp(s1));
  ctx.row(1) = w0 * v.row(0) + (1 - w0) * v.row(1);
  const RowMat o = (ctx * as_mat(p("b.attn.o.w"))).array().rowwise() + p("b.attn.o.b").values().transpose().array();
  // MLP output is its zero second layer, so the block adds only attention.
  for (Index i = 0; i < 2; ++i)
    for (Index j = 0; j < d; ++j) CHECK(y[i * d + j] == doctest::Approx(x[i * d + j] + o(i, j)).epsilon(1e-12));
}

TEST_CASE("decoder_block rejects a mask of the wrong size") {
  std::mt19937_64 rng(1);
  const ParamTable p = block_params("b", 4, rng);
  const Tensor mask = causal_mask(3);
  CHECK_THROWS_AS(decoder_block(randn({1, 2, 4}, rng), &mask, p, "b", 1, 0.0, 0, {}, 0.0), ShapeError);
}

TEST_CASE("policy_forward") {
  const PolicySpec spec = tiny_spec(8, 2, 2);
  std::mt19937_64 rng(21);
  PolicyWeights w = PolicyWeights::init(spec, 4);

  SUBCASE("FiLM identity at init makes the output independent of the task") {
    const SeqBatch in = random_batch(spec, 2, 3, rng);
    SeqBatch other = in;
    other.task_emb = randn({2, spec.embed_dim}, rng);
    CHECK(bit_equal(policy_forward(spec, bind(w), in), policy_forward(spec, bind(w), other)));
  }

  scramble(w, rng);
  const ParamTable p = bind(w);

  SUBCASE("deterministic for identical inputs and dropout stream") {
    const SeqBatch in = random_batch(spec, 2, 4, rng);
    ForwardConfig cfg;
    cfg.train = true;
    cfg.dropout_seed = 9;
    cfg.step = 3;
    CHECK(bit_equal(policy_forward(spec, p, in, cfg), policy_forward(spec, p, in, cfg)));
    cfg.step = 4;
    CHECK_FALSE(bit_equal(policy_forward(spec, p, in, cfg), policy_forward(spec, p, in, {})));
  }
  SUBCASE("task embedding matters once fusion is trained") {
    const SeqBatch in = random_batch(spec, 1, 2, rng);
    SeqBatch other = in;
    other.task_emb = randn({1, spec.embed_dim}, rng);
    CHECK_FALSE(bit_equal(policy_forward(spec, p, in), policy_forward(spec, p, other)));
  }
  SUBCASE("causal over timesteps") {
    const SeqBatch in = random_batch(spec, 1, 4, rng);
    SeqBatch bumped = in;
    Vec s = in.state.values();
    s.segment(2 * spec.state_dim, spec.state_dim).array() += 0.25;
    bumped.state = Tensor(in.state.shape(), s);
    const Tensor y0 = policy_forward(spec, p, in), y1 = policy_forward(spec, p, bumped);
    const Index o = spec.head_out();
    CHECK(y0.values().head(2 * o) == y1.values().head(2 * o));
    CHECK(y0.values().tail(2 * o) != y1.values().tail(2 * o));
  }
  SUBCASE("output shape does not depend on history length") {
    std::vector<Observation> hist;
    const Vec task = randn({spec.embed_dim}, rng).values();
    for (Index t = 0; t < spec.max_seq_len; ++t) {
      hist.push_back({randn({spec.perception_dim()}, rng).values(), randn({spec.state_dim}, rng).values()});
      const GmmParams g = policy_forward(spec, p, hist, task);
      CHECK(g.logits.size() == spec.gmm_modes);
      CHECK(g.means.rows() == spec.gmm_modes);
      CHECK(g.means.cols() == spec.action_dim);
      CHECK(g.stds.rows() == spec.gmm_modes);
    }
    hist.push_back(hist.back());
    CHECK_THROWS_AS(policy_forward(spec, p, hist, task), std::invalid_argument);
    CHECK_THROWS_AS(policy_forward(spec, p, std::vector<Observation>{}, task), std::invalid_argument);
  }
  SUBCASE("NaN input is a hard error") {
    SeqBatch in = random_batch(spec, 1, 2, rng);
    Vec s = in.state.values();
    s[0] = std::nan("");
    in.state = Tensor(in.state.shape(), s);
    CHECK_THROWS_AS(policy_forward(spec, p, in), NumericalError);
  }
}

TEST_CASE("gmm_nll closed forms") {
  GmmParams g;
  g.logits = Vec::Zero(1);
  g.means = RowMat::Constant(1, 1, 0.4);
  g.stds = RowMat::Ones(1, 1);
  Vec a(1);
  a << 0.4;
  CHECK(gmm_nll(g, a) == doctest::Approx(0.5 * std::log(2 * std::numbers::pi)).epsilon(1e-14));
  CHECK(gmm_nll(g, a) == doctest::Approx(0.9189385).epsilon(1e-7));

  g.logits = Vec::Zero(2);
  g.means = RowMat::Constant(2, 1, 0.4);
  g.stds = RowMat::Ones(2, 1);
  CHECK(gmm_nll(g, a) == doctest::Approx(0.9189385332046727).epsilon(1e-14));

  a[0] = std::nan("");
  CHECK_THROWS_AS(gmm_nll(g, a), std::invalid_argument);
}

TEST_CASE("gmm_nll matches a direct mixture density") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 200; ++trial) {
    const Index K = 1 + trial % 5, A = 1 + trial % 3;
    GmmParams g;
    g.logits = randn({K}, rng).values();
    g.means = Eigen::Map<const RowMat>(randn({K, A}, rng, 0.5).data(), K, A);
    g.stds = Eigen::Map<const RowMat>(uniform({K, A}, rng, 0.3, 2.0).data(), K, A);
    const Vec a = randn({A}, rng, 0.5).values();
    double wsum = 0, density = 0;
    for (Index k = 0; k < K; ++k) wsum += std::exp(g.logits[k]);
    for (Index k = 0; k < K; ++k) {
      double prod = std::exp(g.logits[k]) / wsum;
      for (Index j = 0; j < A; ++j) {
        const double z = (a[j] - g.means(k, j)) / g.stds(k, j);
        prod *= std::exp(-0.5 * z * z) / (g.stds(k, j) * std::sqrt(2 * std::numbers::pi));
      }
      density += prod;
    }
    CHECK(gmm_nll(g, a) == doctest::Approx(-std::log(density)).epsilon(1e-12));
  }
}

TEST_CASE("batched gmm_nll agrees with the per-step form") {
  const PolicySpec spec = tiny_spec();
  std::mt19937_64 rng(13);
  const Tensor raw = randn({2, 3, spec.head_out()}, rng);
  const Tensor act = randn({2, 3, spec.action_dim}, rng, 0.5);
  Vec wv = Vec::Ones(6);
  wv[5] = 0.0;
  const Tensor weight({2, 3}, wv);
  double want = 0;
  for (Index b = 0; b < 2; ++b)
    for (Index t = 0; t < 3; ++t)
      if (wv[b * 3 + t] != 0) want += gmm_nll(gmm_params(spec, raw, b, t), act.values().segment((b * 3 + t) * 3, 3));
  want /= 5.0;
  CHECK(gmm_nll(spec, raw, act, weight).item() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("head stds never drop below the clamp") {
  const PolicySpec spec = tiny_spec();
  std::mt19937_64 rng(2);
  const Tensor raw = randn({100, 100, spec.head_out()}, rng, 30.0);
  double lo = 1e300;
  for (Index b = 0; b < 100; ++b)
    for (Index t = 0; t < 100; ++t) lo = std::min(lo, gmm_params(spec, raw, b, t).stds.minCoeff());
  CHECK(lo >= spec.gmm_min_std);
  const Tensor very_negative = Tensor::full({1, 1, spec.head_out()}, -1e4);
  CHECK(gmm_params(spec, very_negative, 0, 0).stds.minCoeff() == spec.gmm_min_std);
}

TEST_CASE("select_action") {
  GmmParams g;
  g.logits = Vec::Zero(1);
  g.means = RowMat::Constant(1, 2, 0.3);
  g.stds = RowMat::Ones(1, 2);
  CHECK(select_action(g) == Vec::Constant(2, 0.3));

  g.logits = Vec(2);
  g.logits << std::log(0.7), std::log(0.3);
  g.means = RowMat(2, 1);
  g.means << -1.0, 1.0;
  g.stds = RowMat::Ones(2, 1);
  CHECK(select_action(g)[0] == -1.0);

  // w_k / (sigma_k sqrt(2 pi)): 0.5/1.0 < 0.5/0.1
  g.logits = Vec::Zero(2);
  g.stds << 1.0, 0.1;
  CHECK(select_action(g)[0] == 1.0);

  // ties go to the lowest mode
  g.stds << 0.5, 0.5;
  CHECK(select_action(g)[0] == -1.0);
}

TEST_CASE("end-to-end gradient of gmm_nll through policy_forward") {
  const PolicySpec spec = tiny_spec(8, 1, 1);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    std::mt19937_64 rng(seed);
    PolicyWeights w = PolicyWeights::init(spec, seed);
    // sd 0.6 keeps perception attention away from uniform; at smaller scales
    // its gradients (~1e-6) sink into finite-difference rounding noise.
    scramble(w, rng, 0.6);
    const ParamTable base = bind(w);
    const SeqBatch in = random_batch(spec, 2, 3, rng);
    const Tensor act = randn({2, 3, spec.action_dim}, rng, 0.5);
    const Tensor weight = Tensor::full({2, 3}, 1.0);
    ForwardConfig cfg;
    cfg.train = true;  // dropout on, mask fixed by the key
    cfg.dropout_seed = seed;
    double worst = 0;
    for (const auto& [name, prm] : w.params()) {
      const std::string n = name;
      auto loss = [&](const Tensor& x) {
        ParamTable t = base;
        t.set(n, x);
        return gmm_nll(spec, policy_forward(spec, t, in, cfg), act, weight);
      };
      if (name.ends_with("attn.k.b")) {
        // A key bias shifts a query's scores uniformly, which softmax
        // ignores: the exact gradient is zero and a ratio test is noise.
        Tape tape;
        const Tensor x = tape.variable(prm.value);
        const Gradients g = tape.backward(loss(x));
        CHECK(g.of(x)->lpNorm<Eigen::Infinity>() < 1e-12);
        continue;
      }
      const double e = grad_check(loss, prm.value);
      if (e >= 1e-5) MESSAGE(name << " rel err " << e);
      worst = std::max(worst, e);
    }
    CHECK(worst < 1e-5);
  }
}

TEST_CASE("checkpoint round trip") {
  const PolicySpec spec = tiny_spec();
  std::mt19937_64 rng(4);
  PolicyWeights w = PolicyWeights::init(spec, 9);
  scramble(w, rng);
  const fs::path dir = scratch_dir("ckpt");
  save_checkpoint(w, dir);
  const PolicyWeights r = load_checkpoint(dir);
  CHECK(r.spec() == spec);
  CHECK(r.digest() == w.digest());
  for (const auto& [name, p] : w.params()) {
    CHECK(bit_equal(r.at(name), p.value));
    CHECK(r.group_of(name) == p.group);
  }
  CHECK(r.frozen(ParamGroup::perception_encoder));

  const fs::path again = scratch_dir("ckpt2");
  save_checkpoint(r, again);
  auto slurp = [](const fs::path& f) {
    std::ifstream in(f, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  };
  CHECK(slurp(dir / "tensors.bin") == slurp(again / "tensors.bin"));
  CHECK(slurp(dir / "manifest.json") == slurp(again / "manifest.json"));

  SUBCASE("corrupt manifest") {
    std::ofstream(dir / "manifest.json") << "{ not json";
    CHECK_THROWS_AS(load_checkpoint(dir), DataError);
  }
  SUBCASE("unsupported version") {
    auto m = nlohmann::json::parse(slurp(dir / "manifest.json"));
    m["format_version"] = 99;
    std::ofstream(dir / "manifest.json") << m.dump();
    CHECK_THROWS_WITH_AS(load_checkpoint(dir), doctest::Contains("unsupported format version"), DataError);
  }
  SUBCASE("truncated data") {
    fs::resize_file(dir / "tensors.bin", 16);
    CHECK_THROWS_AS(load_checkpoint(dir), DataError);
  }
  SUBCASE("flipped byte fails the content digest") {
    std::string bytes = slurp(dir / "tensors.bin");
    bytes[100] ^= 1;
    std::ofstream(dir / "tensors.bin", std::ios::binary) << bytes;
    CHECK_THROWS_WITH_AS(load_checkpoint(dir), doctest::Contains("digest"), DataError);
  }
  fs::remove_all(dir);
  fs::remove_all(again);
}

TEST_CASE("digest ignores insertion order and sees every byte") {
  std::mt19937_64 rng(6);
  TensorMap a{{"x", randn({3}, rng)}, {"y", randn({2, 2}, rng)}};
  TensorMap b;
  b.emplace("y", a.at("y"));
  b.emplace("x", a.at("x"));
  CHECK(digest(a) == digest(b));
  CHECK(digest(a).size() == 64);
  Vec v = a.at("x").values();
  v[1] = std::nextafter(v[1], 10.0);
  b.at("x") = Tensor({3}, v);
  CHECK(digest(a) != digest(b));
  TensorMap c{{"x", reshape(a.at("y"), {4})}, {"y", a.at("x")}};
  CHECK(digest(c) != digest(a));
}
