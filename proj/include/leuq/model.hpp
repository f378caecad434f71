#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "leuq/checkpoint.hpp"
#include "leuq/common.hpp"
#include "leuq/rng.hpp"
#include "leuq/tensor.hpp"

namespace leuq {

struct ModelConfig {
  std::size_t grid = 64;          // spatial extent N
  std::size_t d_z = 128;          // latent width
  std::size_t d_zp = 16;          // static latent width
  std::size_t history = 10;       // input frames (encoder channel count)
  std::size_t bundle = 1;         // S, frames advanced per latent step
  std::size_t conv_blocks = 4;    // F_q downsampling blocks
  std::size_t channels = 32;      // C, base channel count
  std::size_t horizon = 4;        // M, training rollout length
  std::size_t static_dim = 0;     // system-parameter width, 0 disables r
  std::size_t static_layers = 1;  // F_r' (0 = passthrough)
  bool latent = true;             // false: evolve in input space
  bool with_sigma = true;         // false: deterministic, no sigma anywhere
  bool propagate_zsigma = true;   // false: sigma latent recomputed from z each step
  std::string loss = "nll";       // nll | mse | l1
  double sigma_min = 1e-4;
  double gn_eps = 1e-5;

  // The paper's stride-2 stack bottoms out at a 4x4 feature map.
  static ModelConfig defaults_for_grid(std::size_t n) {
    ModelConfig c;
    c.grid = n;
    c.conv_blocks = (n >= 64) ? 4 : 3;
    return c;
  }

  std::size_t feature_extent() const { return grid >> conv_blocks; }
  std::size_t top_channels() const { return channels << (conv_blocks - 1); }
  std::size_t latent_out_width() const { return with_sigma ? 2 * d_z : d_z; }

  void validate() const {
    if (d_z < 1 || conv_blocks < 1 || history < 1 || bundle < 1 || horizon < 1) {
      throw ConfigError("model config requires d_z, F_q, history, S, M >= 1");
    }
    if (channels < 2 || channels % 2 != 0) {
      throw ConfigError("channel count must be even (group norm uses 2 groups)");
    }
    if (grid % (std::size_t{1} << conv_blocks) != 0 || feature_extent() < 1) {
      throw ConfigError("grid " + std::to_string(grid) + " is not divisible by 2^F_q = " +
                        std::to_string(std::size_t{1} << conv_blocks));
    }
    if (!propagate_zsigma && !with_sigma) {
      throw ConfigError("no_zsigma variant requires with_sigma");
    }
    if (static_dim > 0 && static_layers == 0 && static_dim != d_zp) {
      throw ConfigError("passthrough static encoder requires static_dim == d_zp");
    }
    if (loss != "nll" && loss != "mse" && loss != "l1") {
      throw ConfigError("unknown loss flavor '" + loss + "'");
    }
    if (loss == "nll" && !with_sigma) {
      throw ConfigError("nll flavor requires the sigma head; use mse or l1 for deterministic models");
    }
  }

  std::string variant_string() const {
    std::string s = latent ? "latent" : "no_latent";
    s += with_sigma ? "+sigma" : "+deterministic";
    if (with_sigma) s += propagate_zsigma ? "+zsigma" : "+no_zsigma";
    return s;
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"grid", c.grid},
                     {"d_z", c.d_z},
                     {"d_zp", c.d_zp},
                     {"history", c.history},
                     {"bundle", c.bundle},
                     {"conv_blocks", c.conv_blocks},
                     {"channels", c.channels},
                     {"horizon", c.horizon},
                     {"static_dim", c.static_dim},
                     {"static_layers", c.static_layers},
                     {"latent", c.latent},
                     {"with_sigma", c.with_sigma},
                     {"propagate_zsigma", c.propagate_zsigma},
                     {"loss", c.loss},
                     {"sigma_min", c.sigma_min},
                     {"gn_eps", c.gn_eps}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("grid").get_to(c.grid);
  j.at("d_z").get_to(c.d_z);
  j.at("d_zp").get_to(c.d_zp);
  j.at("history").get_to(c.history);
  j.at("bundle").get_to(c.bundle);
  j.at("conv_blocks").get_to(c.conv_blocks);
  j.at("channels").get_to(c.channels);
  j.at("horizon").get_to(c.horizon);
  j.at("static_dim").get_to(c.static_dim);
  j.at("static_layers").get_to(c.static_layers);
  j.at("latent").get_to(c.latent);
  j.at("with_sigma").get_to(c.with_sigma);
  j.at("propagate_zsigma").get_to(c.propagate_zsigma);
  j.at("loss").get_to(c.loss);
  j.at("sigma_min").get_to(c.sigma_min);
  j.at("gn_eps").get_to(c.gn_eps);
}

// Compressed state at one bundled time step: z carries the state, z_sigma
// the uncertainty (undefined on deterministic variants).
struct LatentState {
  Tensor z;
  Tensor z_sigma;
};

namespace detail {

struct ConvLayer {
  Tensor w, b;
};
struct NormLayer {
  Tensor gamma, beta;
};
struct LinearLayer {
  Tensor w, b;
};

inline Tensor kaiming(Shape shape, std::size_t fan_in, Rng& rng) {
  return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<double>(fan_in)), true);
}

struct Encoder {
  ConvLayer conv0;
  std::vector<ConvLayer> blocks;
  std::vector<NormLayer> norms;
  LinearLayer head;
};

struct Decoder {
  LinearLayer head;
  std::vector<ConvLayer> blocks;  // transpose weights [Cin, Cout, k, k]
  std::vector<NormLayer> norms;
  ConvLayer final_conv;
};

struct Mlp {
  std::vector<LinearLayer> layers;
  std::size_t elu_layers = 0;  // leading layers with ELU, rest linear
};

inline Tensor run_mlp(const Mlp& mlp, Tensor x) {
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    x = linear(x, mlp.layers[i].w, mlp.layers[i].b);
    if (i < mlp.elu_layers) x = elu(x);
  }
  return x;
}

}  // namespace detail

// The five-component surrogate: dynamic encoder q, static encoder r,
// decoder h_mu, uncertainty decoder h_sigma, latent evolution g=(g_mu,g_sigma).
class SurrogateModel {
 public:
  ModelConfig cfg;

  SurrogateModel() = default;

  static SurrogateModel init(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    SurrogateModel m;
    m.cfg = config;
    Rng rng(seed_for(seed, "model_init"));
    m.build(rng);
    return m;
  }

  // ---- components ----------------------------------------------------

  // q: [B, history, N, N] -> (z, z_sigma), each [B, d_z].
  LatentState encode(const Tensor& input) const {
    check_input(input);
    Tensor h = elu(conv2d(input, enc_.conv0.w, enc_.conv0.b, 1, 1));
    for (std::size_t i = 0; i < enc_.blocks.size(); ++i) {
      h = conv2d(h, enc_.blocks[i].w, enc_.blocks[i].b, 2, 1);
      h = group_norm(h, 2, enc_.norms[i].gamma, enc_.norms[i].beta, cfg.gn_eps);
      h = elu(h);
    }
    const std::size_t B = input.dim(0);
    h = reshape(h, {B, h.numel() / B});
    Tensor out = linear(h, enc_.head.w, enc_.head.b);
    LatentState s;
    if (cfg.with_sigma) {
      s.z = slice_cols(out, 0, cfg.d_z);
      s.z_sigma = slice_cols(out, cfg.d_z, 2 * cfg.d_z);
    } else {
      s.z = out;
    }
    return s;
  }

  // r: [B, static_dim] -> [B, d_zp]; undefined tensor when no parameter is
  // configured (g then consumes z alone).
  Tensor encode_static(const Tensor& p) const {
    if (cfg.static_dim == 0) {
      if (p.defined() && p.numel() > 0) {
        throw ConfigError("model has no static parameter but one was supplied");
      }
      return Tensor();
    }
    if (!p.defined() || p.rank() != 2 || p.dim(1) != cfg.static_dim) {
      throw ShapeError("static parameter must be [B, " + std::to_string(cfg.static_dim) + "]");
    }
    if (cfg.static_layers == 0) return p;
    return detail::run_mlp(static_enc_, p);
  }

  // g: one latent step. z' = MLP([z, z_p]) + z; the sigma track either
  // propagates (input [z, z_sigma, z_p], residual on z_sigma) or is
  // recomputed from the advanced z alone under no_zsigma.
  LatentState evolve(const LatentState& s, const Tensor& z_p) const {
    require_latent("evolve");
    LatentState out;
    out.z = add(detail::run_mlp(g_mu_, with_static(s.z, z_p)), s.z);
    if (!cfg.with_sigma) return out;
    if (cfg.propagate_zsigma) {
      Tensor in = with_static(concat_cols({s.z, s.z_sigma}), z_p);
      out.z_sigma = add(detail::run_mlp(g_sigma_, in), s.z_sigma);
    } else {
      out.z_sigma = detail::run_mlp(g_sigma_, with_static(out.z, z_p));
    }
    return out;
  }

  // h_mu: [B, d_z] -> [B, S, N, N].
  Tensor decode_state(const LatentState& s) const { return run_decoder(dec_mu_, s.z); }

  // h_sigma: [B, d_z] -> [B, S, N, N], strictly positive via softplus + floor.
  Tensor decode_uncertainty(const LatentState& s) const {
    if (!cfg.with_sigma) {
      throw ContractError("decode_uncertainty is unavailable on deterministic variants");
    }
    return add_scalar(softplus(run_decoder(dec_sigma_, s.z_sigma)), cfg.sigma_min);
  }

  // One input-space step for the no_latent variant: the encoder/decoder pair
  // acts as the stepper, mapping a history window to the next bundle.
  std::pair<Tensor, Tensor> step_input_space(const Tensor& window) const {
    if (cfg.latent) throw ContractError("step_input_space is for no_latent models");
    LatentState s = encode(window);
    Tensor mean = run_decoder(dec_mu_, s.z);
    Tensor sigma;
    if (cfg.with_sigma) {
      sigma = add_scalar(softplus(run_decoder(dec_sigma_, s.z_sigma)), cfg.sigma_min);
    }
    return {mean, sigma};
  }

  // ---- parameter access -------------------------------------------------

  std::vector<NamedTensor> named_parameters() const {
    std::vector<NamedTensor> out;
    auto conv = [&](const std::string& n, const detail::ConvLayer& l) {
      out.push_back({n + ".w", l.w});
      out.push_back({n + ".b", l.b});
    };
    auto norm = [&](const std::string& n, const detail::NormLayer& l) {
      out.push_back({n + ".gamma", l.gamma});
      out.push_back({n + ".beta", l.beta});
    };
    auto lin = [&](const std::string& n, const detail::LinearLayer& l) {
      out.push_back({n + ".w", l.w});
      out.push_back({n + ".b", l.b});
    };
    auto dec = [&](const std::string& n, const detail::Decoder& d) {
      lin(n + ".head", d.head);
      for (std::size_t i = 0; i < d.blocks.size(); ++i) {
        conv(n + ".block" + std::to_string(i), d.blocks[i]);
        norm(n + ".norm" + std::to_string(i), d.norms[i]);
      }
      conv(n + ".final", d.final_conv);
    };
    conv("enc.conv0", enc_.conv0);
    for (std::size_t i = 0; i < enc_.blocks.size(); ++i) {
      conv("enc.block" + std::to_string(i), enc_.blocks[i]);
      norm("enc.norm" + std::to_string(i), enc_.norms[i]);
    }
    lin("enc.head", enc_.head);
    dec("dec_mu", dec_mu_);
    if (cfg.with_sigma) dec("dec_sigma", dec_sigma_);
    if (cfg.latent) {
      for (std::size_t i = 0; i < g_mu_.layers.size(); ++i) {
        lin("g_mu.l" + std::to_string(i), g_mu_.layers[i]);
      }
      if (cfg.with_sigma) {
        for (std::size_t i = 0; i < g_sigma_.layers.size(); ++i) {
          lin("g_sigma.l" + std::to_string(i), g_sigma_.layers[i]);
        }
      }
    }
    if (cfg.static_dim > 0 && cfg.static_layers > 0) {
      for (std::size_t i = 0; i < static_enc_.layers.size(); ++i) {
        lin("r.l" + std::to_string(i), static_enc_.layers[i]);
      }
    }
    return out;
  }

  std::vector<Tensor> parameters() const {
    std::vector<Tensor> out;
    for (auto& nt : named_parameters()) out.push_back(nt.tensor);
    return out;
  }

  std::vector<Tensor> evolution_parameters() const {
    std::vector<Tensor> out;
    if (!cfg.latent) return out;
    for (const auto& l : g_mu_.layers) {
      out.push_back(l.w);
      out.push_back(l.b);
    }
    if (cfg.with_sigma) {
      for (const auto& l : g_sigma_.layers) {
        out.push_back(l.w);
        out.push_back(l.b);
      }
    }
    return out;
  }

  // Parameters feeding only the sigma outputs (detachment checks).
  std::vector<Tensor> sigma_parameters() const {
    std::vector<Tensor> out;
    if (!cfg.with_sigma) return out;
    auto add_dec = [&](const detail::Decoder& d) {
      out.push_back(d.head.w);
      out.push_back(d.head.b);
      for (const auto& l : d.blocks) {
        out.push_back(l.w);
        out.push_back(l.b);
      }
      for (const auto& l : d.norms) {
        out.push_back(l.gamma);
        out.push_back(l.beta);
      }
      out.push_back(d.final_conv.w);
      out.push_back(d.final_conv.b);
    };
    add_dec(dec_sigma_);
    if (cfg.latent) {
      for (const auto& l : g_sigma_.layers) {
        out.push_back(l.w);
        out.push_back(l.b);
      }
    }
    return out;
  }

  void save(const std::filesystem::path& path) const {
    nlohmann::json meta;
    meta["model_config"] = cfg;
    save_checkpoint(path, named_parameters(), meta);
  }

  static SurrogateModel load(const std::filesystem::path& path) {
    Checkpoint ck = load_checkpoint(path);
    if (!ck.meta.contains("model_config")) {
      throw IoError("checkpoint has no model_config block: " + path.string());
    }
    ModelConfig cfg = ck.meta["model_config"].get<ModelConfig>();
    SurrogateModel m = SurrogateModel::init(cfg, 0);
    for (auto& nt : m.named_parameters()) {
      const Tensor& src = ck.find(nt.name);
      if (src.shape() != nt.tensor.shape()) {
        throw IoError("checkpoint tensor '" + nt.name + "' has shape " +
                      shape_str(src.shape()) + ", model expects " + shape_str(nt.tensor.shape()));
      }
      // NamedTensor shares the parameter node; writing through it updates the model.
      nt.tensor.set_data(std::vector<double>(src.data().begin(), src.data().end()));
    }
    return m;
  }

  std::size_t encoder_feature_extent() const { return cfg.feature_extent(); }

 private:
  detail::Encoder enc_;
  detail::Decoder dec_mu_;
  detail::Decoder dec_sigma_;
  detail::Mlp g_mu_;
  detail::Mlp g_sigma_;
  detail::Mlp static_enc_;

  void check_input(const Tensor& input) const {
    if (input.rank() != 4 || input.dim(1) != cfg.history || input.dim(2) != cfg.grid ||
        input.dim(3) != cfg.grid) {
      throw ShapeError("encoder expects [B, " + std::to_string(cfg.history) + ", " +
                       std::to_string(cfg.grid) + ", " + std::to_string(cfg.grid) + "], got " +
                       shape_str(input.shape()));
    }
  }

  void require_latent(const char* what) const {
    if (!cfg.latent) {
      throw ContractError(std::string(what) + " is unavailable on no_latent models");
    }
  }

  Tensor with_static(const Tensor& z, const Tensor& z_p) const {
    if (!z_p.defined()) return z;
    return concat_cols({z, z_p});
  }

  Tensor run_decoder(const detail::Decoder& d, const Tensor& z) const {
    const std::size_t B = z.dim(0);
    const std::size_t n0 = cfg.feature_extent();
    Tensor h = linear(z, d.head.w, d.head.b);
    h = reshape(h, {B, cfg.top_channels(), n0, n0});
    for (std::size_t i = 0; i < d.blocks.size(); ++i) {
      h = conv_transpose2d(h, d.blocks[i].w, d.blocks[i].b, 2, 1);
      h = group_norm(h, 2, d.norms[i].gamma, d.norms[i].beta, cfg.gn_eps);
      h = elu(h);
    }
    return conv_transpose2d(h, d.final_conv.w, d.final_conv.b, 1, 1);
  }

  void build(Rng& rng) {
    const std::size_t C = cfg.channels, k = 3;
    // encoder: 3x3 stem, then stride-2 blocks with channels C, 2C, 4C, ...
    enc_.conv0 = {detail::kaiming({C, cfg.history, k, k}, cfg.history * k * k, rng),
                  Tensor::zeros({C}, true)};
    std::size_t in_ch = C;
    for (std::size_t i = 0; i < cfg.conv_blocks; ++i) {
      const std::size_t oc = C << i;  // C, 2C, 4C, ...
      enc_.blocks.push_back({detail::kaiming({oc, in_ch, 4, 4}, in_ch * 16, rng),
                             Tensor::zeros({oc}, true)});
      enc_.norms.push_back({Tensor(Shape{oc}, 1.0, true), Tensor::zeros({oc}, true)});
      in_ch = oc;
    }
    const std::size_t flat = cfg.top_channels() * cfg.feature_extent() * cfg.feature_extent();
    enc_.head = {detail::kaiming({flat, cfg.latent_out_width()}, flat, rng),
                 Tensor::zeros({cfg.latent_out_width()}, true)};

    auto build_decoder = [&](detail::Decoder& d) {
      d.head = {detail::kaiming({cfg.d_z, flat}, cfg.d_z, rng), Tensor::zeros({flat}, true)};
      std::size_t ic = cfg.top_channels();
      for (std::size_t i = 0; i < cfg.conv_blocks; ++i) {
        const std::size_t oc = std::max(C, ic / 2);
        d.blocks.push_back({detail::kaiming({ic, oc, 4, 4}, ic * 16, rng),
                            Tensor::zeros({oc}, true)});
        d.norms.push_back({Tensor(Shape{oc}, 1.0, true), Tensor::zeros({oc}, true)});
        ic = oc;
      }
      d.final_conv = {detail::kaiming({ic, cfg.bundle, k, k}, ic * k * k, rng),
                      Tensor::zeros({cfg.bundle}, true)};
    };
    build_decoder(dec_mu_);
    if (cfg.with_sigma) build_decoder(dec_sigma_);

    if (cfg.latent) {
      const std::size_t zp = cfg.static_dim > 0 ? cfg.d_zp : 0;
      build_evolution_mlp(g_mu_, cfg.d_z + zp, rng);
      if (cfg.with_sigma) {
        const std::size_t in =
            cfg.propagate_zsigma ? 2 * cfg.d_z + zp : cfg.d_z + zp;
        build_evolution_mlp(g_sigma_, in, rng);
      }
    }

    if (cfg.static_dim > 0 && cfg.static_layers > 0) {
      std::size_t in = cfg.static_dim;
      for (std::size_t i = 0; i < cfg.static_layers; ++i) {
        static_enc_.layers.push_back({detail::kaiming({in, cfg.d_zp}, in, rng),
                                      Tensor::zeros({cfg.d_zp}, true)});
        in = cfg.d_zp;
      }
      static_enc_.elu_layers = cfg.static_layers - 1;
    }
  }

  // 5 layers, width d_z, ELU on the first three, last two linear. The final
  // layer starts at zero so latent dynamics begin as the identity map.
  void build_evolution_mlp(detail::Mlp& mlp, std::size_t in_width, Rng& rng) {
    std::size_t in = in_width;
    for (std::size_t i = 0; i < 5; ++i) {
      Tensor w = (i == 4) ? Tensor::zeros({in, cfg.d_z}, true)
                          : detail::kaiming({in, cfg.d_z}, in, rng);
      mlp.layers.push_back({std::move(w), Tensor::zeros({cfg.d_z}, true)});
      in = cfg.d_z;
    }
    mlp.elu_layers = 3;
  }
};

// ---- multi-step inference protocol -----------------------------------------

enum class RolloutMode { autoregressive, teacher_forcing };

struct RolloutStep {
  Tensor mean;   // [B, S, N, N]
  Tensor sigma;  // [B, S, N, N]; undefined on deterministic variants
};

// Runs `steps` bundled steps from the history block U_init [B, history, N, N].
//   autoregressive: encode once, evolve in latent space, decode on demand
//     (no_latent models instead feed decoded predictions back into the window);
//   teacher_forcing: re-encode the ground-truth window before every step.
// `truth` is the frame block [B, history + steps*S, N, N] whose leading
// `history` frames equal U_init; required for teacher forcing.
inline std::vector<RolloutStep> rollout(const SurrogateModel& m, const Tensor& U_init,
                                        const Tensor& p, std::size_t steps, RolloutMode mode,
                                        const Tensor& truth = Tensor()) {
  const ModelConfig& cfg = m.cfg;
  if (steps < 1) throw ContractError("rollout requires at least one step");
  const std::size_t S = cfg.bundle;
  if (mode == RolloutMode::teacher_forcing) {
    if (!truth.defined() || truth.rank() != 4 || truth.dim(0) != U_init.dim(0) ||
        truth.dim(1) < cfg.history + steps * S) {
      throw ContractError("teacher forcing requires a truth block of at least history + steps*S frames");
    }
  }

  std::vector<RolloutStep> out;
  out.reserve(steps);

  if (cfg.latent) {
    Tensor z_p = m.encode_static(p);
    if (mode == RolloutMode::autoregressive) {
      LatentState s = m.encode(U_init);
      for (std::size_t step = 0; step < steps; ++step) {
        s = m.evolve(s, z_p);
        RolloutStep r;
        r.mean = m.decode_state(s);
        if (cfg.with_sigma) r.sigma = m.decode_uncertainty(s);
        out.push_back(std::move(r));
      }
    } else {
      for (std::size_t step = 0; step < steps; ++step) {
        Tensor window = slice_channels(truth, step * S, step * S + cfg.history);
        LatentState s = m.evolve(m.encode(window), z_p);
        RolloutStep r;
        r.mean = m.decode_state(s);
        if (cfg.with_sigma) r.sigma = m.decode_uncertainty(s);
        out.push_back(std::move(r));
      }
    }
    return out;
  }

  // no_latent: the encoder/decoder pair is the one-step input-space map
  if (S >= cfg.history && mode == RolloutMode::autoregressive && steps > 1) {
    throw ConfigError("no_latent autoregression needs history > S to retain context");
  }
  Tensor window = U_init;
  for (std::size_t step = 0; step < steps; ++step) {
    if (mode == RolloutMode::teacher_forcing) {
      window = slice_channels(truth, step * S, step * S + cfg.history);
    }
    auto [mean, sigma] = m.step_input_space(window);
    if (mode == RolloutMode::autoregressive && step + 1 < steps) {
      window = concat_channels({slice_channels(window, S, cfg.history), mean});
    }
    RolloutStep r;
    r.mean = std::move(mean);
    r.sigma = std::move(sigma);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace leuq
