#include <catch2/catch_amalgamated.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>

#include "leuq/model.hpp"
#include "leuq/rng.hpp"

using namespace leuq;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config(bool latent = true, bool with_sigma = true, bool propagate = true) {
  ModelConfig cfg;
  cfg.grid = 16;
  cfg.d_z = 8;
  cfg.d_zp = 4;
  cfg.history = 3;
  cfg.bundle = 1;
  cfg.conv_blocks = 2;
  cfg.channels = 4;
  cfg.horizon = 2;
  cfg.latent = latent;
  cfg.with_sigma = with_sigma;
  cfg.propagate_zsigma = propagate;
  cfg.loss = with_sigma ? "nll" : "mse";
  return cfg;
}

Tensor random_window(const ModelConfig& cfg, Rng& rng, std::size_t batch = 1) {
  return Tensor::randn({batch, cfg.history, cfg.grid, cfg.grid}, rng, 0.5);
}

// Default initialization leaves the evolution MLPs at the identity; give them
// generic weights when the test needs nontrivial dynamics.
void randomize_evolution(SurrogateModel& m, std::uint64_t seed) {
  Rng rng(seed);
  for (Tensor& p : m.evolution_parameters()) {
    std::vector<double> v(p.numel());
    for (double& x : v) x = rng.normal(0.0, 0.2);
    p.set_data(v);
  }
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    if (a.at(i) != b.at(i)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("encoder geometry and determinism") {
  ModelConfig big = ModelConfig::defaults_for_grid(64);
  REQUIRE(big.conv_blocks == 4);
  REQUIRE(big.feature_extent() == 4);
  ModelConfig small = ModelConfig::defaults_for_grid(32);
  REQUIRE(small.conv_blocks == 3);
  REQUIRE(small.feature_extent() == 4);

  ModelConfig cfg = tiny_config();
  SurrogateModel m = SurrogateModel::init(cfg, 1);
  REQUIRE(m.encoder_feature_extent() == 4);

  // encoder input channel count equals the history length
  const auto params = m.named_parameters();
  const Tensor& stem = params[0].tensor;
  REQUIRE(params[0].name == "enc.conv0.w");
  REQUIRE(stem.dim(1) == cfg.history);

  Rng rng(2);
  Tensor u = random_window(cfg, rng);
  NoGradGuard ng;
  LatentState a = m.encode(u);
  LatentState b = m.encode(u);
  REQUIRE(a.z.shape() == Shape{1, cfg.d_z});
  REQUIRE(a.z_sigma.shape() == Shape{1, cfg.d_z});
  REQUIRE(bitwise_equal(a.z, b.z));
  REQUIRE(bitwise_equal(a.z_sigma, b.z_sigma));

  // resolution not divisible by 2^F_q
  ModelConfig bad = cfg;
  bad.conv_blocks = 5;
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("static encoder passthrough and widths") {
  ModelConfig cfg = tiny_config();
  cfg.static_dim = 1;
  cfg.static_layers = 0;
  cfg.d_zp = 1;
  SurrogateModel m = SurrogateModel::init(cfg, 3);
  NoGradGuard ng;
  Tensor p = Tensor::from_data({1, 1}, {0.3});
  Tensor zp = m.encode_static(p);
  REQUIRE(zp.numel() == 1);
  REQUIRE(zp.at(0) == 0.3);

  ModelConfig two = tiny_config();
  two.static_dim = 3;
  two.static_layers = 2;
  SurrogateModel m2 = SurrogateModel::init(two, 3);
  Tensor zp2 = m2.encode_static(Tensor::from_data({1, 3}, {0.1, -0.2, 0.5}));
  REQUIRE(zp2.shape() == Shape{1, two.d_zp});

  // no static parameter configured: z_p is absent and evolve consumes z alone
  ModelConfig none = tiny_config();
  SurrogateModel m3 = SurrogateModel::init(none, 3);
  REQUIRE_FALSE(m3.encode_static(Tensor()).defined());
  Rng rng(5);
  LatentState s = m3.encode(random_window(none, rng));
  LatentState s2 = m3.evolve(s, Tensor());
  REQUIRE(s2.z.shape() == Shape{1, none.d_z});
}

TEST_CASE("freshly initialized evolution is the exact identity") {
  ModelConfig cfg = tiny_config();
  SurrogateModel m = SurrogateModel::init(cfg, 4);
  Rng rng(6);
  NoGradGuard ng;
  LatentState s = m.encode(random_window(cfg, rng));
  LatentState cur = s;
  for (int step = 0; step < 50; ++step) cur = m.evolve(cur, Tensor());
  REQUIRE(bitwise_equal(cur.z, s.z));
  REQUIRE(bitwise_equal(cur.z_sigma, s.z_sigma));
}

TEST_CASE("z' never depends on z_sigma") {
  Rng seeds(7);
  for (int trial = 0; trial < 20; ++trial) {
    ModelConfig cfg = tiny_config();
    SurrogateModel m = SurrogateModel::init(cfg, seeds.next_u64());
    randomize_evolution(m, seeds.next_u64());
    Rng rng(seeds.next_u64());
    NoGradGuard ng;
    LatentState s = m.encode(random_window(cfg, rng));
    LatentState base = m.evolve(s, Tensor());

    LatentState perturbed = s;
    perturbed.z_sigma = add_scalar(s.z_sigma, 0.37);
    LatentState shifted = m.evolve(perturbed, Tensor());
    REQUIRE(bitwise_equal(base.z, shifted.z));
  }
}

TEST_CASE("propagated z_sigma is sensitive to its previous value") {
  ModelConfig cfg = tiny_config();
  SurrogateModel m = SurrogateModel::init(cfg, 8);
  randomize_evolution(m, 99);
  Rng rng(9);
  NoGradGuard ng;
  LatentState s = m.encode(random_window(cfg, rng));
  LatentState base = m.evolve(s, Tensor());
  LatentState perturbed = s;
  perturbed.z_sigma = add_scalar(s.z_sigma, 0.37);
  LatentState shifted = m.evolve(perturbed, Tensor());
  REQUIRE_FALSE(bitwise_equal(base.z_sigma, shifted.z_sigma));

  // without propagation the sigma track ignores the previous z_sigma
  ModelConfig nz = tiny_config(true, true, false);
  SurrogateModel m2 = SurrogateModel::init(nz, 8);
  randomize_evolution(m2, 99);
  LatentState t = m2.encode(random_window(nz, rng));
  LatentState b2 = m2.evolve(t, Tensor());
  LatentState p2 = t;
  p2.z_sigma = add_scalar(t.z_sigma, 0.37);
  LatentState s2 = m2.evolve(p2, Tensor());
  REQUIRE(bitwise_equal(b2.z_sigma, s2.z_sigma));
}

TEST_CASE("decoders: shapes, dependencies, positivity") {
  ModelConfig cfg = tiny_config();
  SurrogateModel m = SurrogateModel::init(cfg, 10);
  Rng rng(11);
  NoGradGuard ng;
  LatentState s = m.encode(random_window(cfg, rng));

  Tensor u = m.decode_state(s);
  REQUIRE(u.shape() == Shape{1, cfg.bundle, cfg.grid, cfg.grid});

  Tensor sig = m.decode_uncertainty(s);
  REQUIRE(sig.shape() == Shape{1, cfg.bundle, cfg.grid, cfg.grid});
  for (std::size_t i = 0; i < sig.numel(); ++i) {
    REQUIRE(sig.at(i) >= cfg.sigma_min);
    REQUIRE(std::isfinite(sig.at(i)));
  }

  // state decode ignores z_sigma; sigma decode ignores z
  LatentState zs = s;
  zs.z_sigma = add_scalar(s.z_sigma, 1.0);
  REQUIRE(bitwise_equal(m.decode_state(zs), u));
  LatentState zz = s;
  zz.z = add_scalar(s.z, 1.0);
  REQUIRE(bitwise_equal(m.decode_uncertainty(zz), sig));

  ModelConfig det = tiny_config(true, false);
  SurrogateModel md = SurrogateModel::init(det, 10);
  LatentState sd = md.encode(random_window(det, rng));
  REQUIRE_FALSE(sd.z_sigma.defined());
  REQUIRE_THROWS_AS(md.decode_uncertainty(sd), ContractError);
}

TEST_CASE("rollout contracts") {
  ModelConfig cfg = tiny_config();
  SurrogateModel m = SurrogateModel::init(cfg, 12);
  randomize_evolution(m, 13);
  Rng rng(14);
  NoGradGuard ng;

  const std::size_t steps = 3;
  Tensor truth = Tensor::randn({1, cfg.history + steps * cfg.bundle, cfg.grid, cfg.grid}, rng, 0.5);
  Tensor u0 = slice_channels(truth, 0, cfg.history);

  REQUIRE_THROWS_AS(rollout(m, u0, Tensor(), 0, RolloutMode::autoregressive), ContractError);
  REQUIRE_THROWS_AS(rollout(m, u0, Tensor(), 2, RolloutMode::teacher_forcing), ContractError);

  // one step: autoregressive and teacher forcing use the same true history
  auto ar1 = rollout(m, u0, Tensor(), 1, RolloutMode::autoregressive);
  auto tf1 = rollout(m, u0, Tensor(), 1, RolloutMode::teacher_forcing, truth);
  REQUIRE(bitwise_equal(ar1[0].mean, tf1[0].mean));
  REQUIRE(bitwise_equal(ar1[0].sigma, tf1[0].sigma));

  // two autoregressive steps decode the composed latent map exactly
  auto ar2 = rollout(m, u0, Tensor(), 2, RolloutMode::autoregressive);
  LatentState s = m.encode(u0);
  s = m.evolve(m.evolve(s, Tensor()), Tensor());
  REQUIRE(bitwise_equal(ar2[1].mean, m.decode_state(s)));
}

TEST_CASE("no_latent rollout feeds predictions back through the window") {
  ModelConfig cfg = tiny_config(false);
  SurrogateModel m = SurrogateModel::init(cfg, 15);
  Rng rng(16);
  NoGradGuard ng;
  Tensor u0 = random_window(cfg, rng);
  auto steps = rollout(m, u0, Tensor(), 3, RolloutMode::autoregressive);
  REQUIRE(steps.size() == 3);

  // step 2 equals stepping manually with the shifted window
  auto [p1, s1] = m.step_input_space(u0);
  Tensor w1 = concat_channels({slice_channels(u0, cfg.bundle, cfg.history), p1});
  auto [p2, s2] = m.step_input_space(w1);
  REQUIRE(bitwise_equal(steps[1].mean, p2));
}

TEST_CASE("checkpoint round trip preserves rollout outputs bit-exactly") {
  ModelConfig cfg = tiny_config();
  SurrogateModel m = SurrogateModel::init(cfg, 17);
  randomize_evolution(m, 18);
  Rng rng(19);
  Tensor u0 = random_window(cfg, rng);

  const fs::path dir = fs::temp_directory_path() / "leuq_model_test";
  fs::create_directories(dir);
  m.save(dir / "model.ckpt");
  SurrogateModel loaded = SurrogateModel::load(dir / "model.ckpt");
  REQUIRE(loaded.cfg.d_z == cfg.d_z);
  REQUIRE(loaded.cfg.variant_string() == cfg.variant_string());

  NoGradGuard ng;
  auto a = rollout(m, u0, Tensor(), 3, RolloutMode::autoregressive);
  auto b = rollout(loaded, u0, Tensor(), 3, RolloutMode::autoregressive);
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(bitwise_equal(a[i].mean, b[i].mean));
    REQUIRE(bitwise_equal(a[i].sigma, b[i].sigma));
  }
  fs::remove_all(dir);
}

TEST_CASE("latent stepping touches O(d_z) state, input stepping O(N^2)") {
  ModelConfig lat = tiny_config();
  SurrogateModel ml = SurrogateModel::init(lat, 20);
  ModelConfig nol = tiny_config(false);
  SurrogateModel mn = SurrogateModel::init(nol, 20);
  Rng rng(21);
  Tensor u0 = random_window(lat, rng);

  LatentState s = ml.encode(u0);
  LatentState s_detached{s.z.detach(), s.z_sigma.detach()};
  LatentState next = ml.evolve(s_detached, Tensor());
  const GraphStats latent_step = graph_stats(next.z);

  auto [pred, sig] = mn.step_input_space(u0);
  const GraphStats input_step = graph_stats(pred);

  REQUIRE(latent_step.activation_elems * 10 < input_step.activation_elems);
}

TEST_CASE("latent step cost is independent of the grid resolution") {
  ModelConfig a = tiny_config();
  a.grid = 32;
  a.conv_blocks = 3;
  a.d_z = 32;
  ModelConfig b = a;
  b.grid = 64;
  b.conv_blocks = 4;
  // identity-initialized evolution keeps 400 steps numerically bounded while
  // running the full MLP stack each step
  SurrogateModel ma = SurrogateModel::init(a, 22);
  SurrogateModel mb = SurrogateModel::init(b, 22);
  Rng rng(24);
  NoGradGuard ng;
  LatentState sa = ma.encode(Tensor::randn({1, a.history, a.grid, a.grid}, rng, 0.5));
  LatentState sb = mb.encode(Tensor::randn({1, b.history, b.grid, b.grid}, rng, 0.5));

  auto time_steps = [](const SurrogateModel& m, LatentState s) {
    using clock = std::chrono::steady_clock;
    double best = 1e100;
    for (int rep = 0; rep < 7; ++rep) {
      LatentState cur = s;
      const auto t0 = clock::now();
      for (int i = 0; i < 400; ++i) cur = m.evolve(cur, Tensor());
      const auto t1 = clock::now();
      best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
    }
    return best;
  };
  const double ta = time_steps(ma, sa);
  const double tb = time_steps(mb, sb);
  REQUIRE(tb / ta < 1.2);
  REQUIRE(ta / tb < 1.2);
}
