#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "leuq/checkpoint.hpp"
#include "leuq/common.hpp"
#include "leuq/parallel.hpp"
#include "leuq/solver.hpp"

namespace leuq {

namespace detail {

inline std::uint32_t crc32(const unsigned char* data, std::size_t len) {
  static const auto table = []() {
    std::array<std::uint32_t, 256> t{};
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      t[i] = c;
    }
    return t;
  }();
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

}  // namespace detail

// A batch of simulated vorticity trajectories plus the physics that made them.
struct TrajectorySet {
  SolverConfig config;
  std::string split;            // "train" or "test"
  std::size_t n_traj = 0;
  std::size_t t_snap = 0;
  std::size_t grid = 0;
  std::vector<double> states;   // [n_traj, t_snap, grid, grid] row-major

  std::span<const double> frame(std::size_t traj, std::size_t t) const {
    const std::size_t nn = grid * grid;
    return {states.data() + (traj * t_snap + t) * nn, nn};
  }
  std::span<double> frame(std::size_t traj, std::size_t t) {
    const std::size_t nn = grid * grid;
    return {states.data() + (traj * t_snap + t) * nn, nn};
  }

  void validate() const {
    if (n_traj < 1) throw ConfigError("trajectory set is empty");
    if (states.size() != n_traj * t_snap * grid * grid) {
      throw ConfigError("trajectory set shape is inconsistent with its payload");
    }
    for (double v : states) {
      if (!std::isfinite(v)) throw NumericError("trajectory set contains non-finite values");
    }
  }
};

// Dataset file: magic "LEUQDS1\0", u64 header length, JSON header holding
// config/shape/split and the CRC32 of the payload, then little-endian f64.
inline constexpr char kDatasetMagic[8] = {'L', 'E', 'U', 'Q', 'D', 'S', '1', '\0'};

inline void save_dataset(const TrajectorySet& ts, const std::filesystem::path& path) {
  detail::check_little_endian();
  const auto* bytes = reinterpret_cast<const unsigned char*>(ts.states.data());
  const std::size_t nbytes = ts.states.size() * 8;
  nlohmann::json header;
  header["version"] = kFormatVersion;
  header["config"] = ts.config;
  header["shape"] = {ts.n_traj, ts.t_snap, ts.grid, ts.grid};
  header["split"] = ts.split;
  header["crc32"] = detail::crc32(bytes, nbytes);
  const std::string h = header.dump();

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  os.write(kDatasetMagic, 8);
  detail::write_u64_le(os, h.size());
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  os.write(reinterpret_cast<const char*>(bytes), static_cast<std::streamsize>(nbytes));
  if (!os) throw IoError("write failed: " + path.string());
}

inline TrajectorySet load_dataset(const std::filesystem::path& path) {
  detail::check_little_endian();
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kDatasetMagic, 8) != 0) {
    throw IoError("not a dataset file (bad magic): " + path.string());
  }
  const std::uint64_t hlen = detail::read_u64_le(is);
  std::string hstr(hlen, '\0');
  is.read(hstr.data(), static_cast<std::streamsize>(hlen));
  if (!is) throw IoError("truncated header: " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(hstr);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt header in " + path.string() + ": " + e.what());
  }
  if (!header.contains("version") || header["version"].get<int>() != kFormatVersion) {
    throw IoError("unsupported dataset format version in " + path.string());
  }

  TrajectorySet ts;
  ts.config = header["config"].get<SolverConfig>();
  ts.split = header["split"].get<std::string>();
  const auto shape = header["shape"].get<std::vector<std::size_t>>();
  if (shape.size() != 4 || shape[2] != shape[3]) {
    throw IoError("malformed dataset shape in " + path.string());
  }
  ts.n_traj = shape[0];
  ts.t_snap = shape[1];
  ts.grid = shape[2];
  ts.states.resize(ts.n_traj * ts.t_snap * ts.grid * ts.grid);
  is.read(reinterpret_cast<char*>(ts.states.data()),
          static_cast<std::streamsize>(ts.states.size() * 8));
  if (!is) throw IoError("truncated payload: " + path.string());
  const std::uint32_t crc = detail::crc32(
      reinterpret_cast<const unsigned char*>(ts.states.data()), ts.states.size() * 8);
  if (crc != header["crc32"].get<std::uint32_t>()) {
    throw IoError("checksum mismatch in " + path.string());
  }
  ts.validate();
  return ts;
}

// Initial conditions are seeded per trajectory index off the master seed, so
// generation is deterministic and parallel across trajectories.
inline std::pair<TrajectorySet, TrajectorySet> generate_dataset(const SolverConfig& cfg,
                                                                std::size_t n_train,
                                                                std::size_t n_test) {
  cfg.validate();
  if (n_train < 1 || n_test < 1) throw ConfigError("need at least one trajectory per split");
  const std::size_t nn = cfg.grid * cfg.grid;
  const std::size_t total = n_train + n_test;

  std::vector<std::vector<std::vector<double>>> trajectories(total);
  parallel_for(total, [&](std::size_t i) {
    Rng rng(seed_for(cfg.seed, "trajectory/" + std::to_string(i)));
    const std::vector<double> w0 = random_initial_vorticity(cfg, rng);
    try {
      trajectories[i] = solve_navier_stokes(w0, cfg);
    } catch (const StabilityError& e) {
      throw StabilityError("trajectory " + std::to_string(i) + ": " + e.what());
    } catch (const NumericError& e) {
      throw NumericError("trajectory " + std::to_string(i) + ": " + e.what());
    }
  });

  auto pack = [&](std::size_t begin, std::size_t count, const char* split) {
    TrajectorySet ts;
    ts.config = cfg;
    ts.split = split;
    ts.n_traj = count;
    ts.t_snap = cfg.snapshots;
    ts.grid = cfg.grid;
    ts.states.resize(count * cfg.snapshots * nn);
    for (std::size_t i = 0; i < count; ++i) {
      for (std::size_t t = 0; t < cfg.snapshots; ++t) {
        std::copy(trajectories[begin + i][t].begin(), trajectories[begin + i][t].end(),
                  ts.states.begin() + (i * cfg.snapshots + t) * nn);
      }
    }
    return ts;
  };
  return {pack(0, n_train, "train"), pack(n_train, n_test, "test")};
}

// One sliding training/evaluation sample: `history` input frames followed by
// horizon bundles of S future frames, all contiguous in one trajectory.
struct BundledWindow {
  const TrajectorySet* source = nullptr;
  std::size_t traj = 0;
  std::size_t start = 0;    // first input frame
  std::size_t history = 0;
  std::size_t horizon = 0;
  std::size_t bundle = 1;   // S

  std::span<const double> input_frame(std::size_t i) const {
    return source->frame(traj, start + i);
  }
  std::span<const double> target_frame(std::size_t i) const {
    return source->frame(traj, start + history + i);
  }
  // Frames of the shifted history window ending m bundles ahead (consistency
  // targets); frame index i in [0, history).
  std::span<const double> shifted_frame(std::size_t m, std::size_t i) const {
    return source->frame(traj, start + m * bundle + i);
  }
};

namespace detail {

// Window frames packed as a [B, count, N, N] tensor (grad-free leaf).
inline Tensor gather_frames(std::span<const BundledWindow> batch,
                            std::span<const double> (BundledWindow::*frame)(std::size_t) const,
                            std::size_t count) {
  const std::size_t B = batch.size();
  const TrajectorySet& src = *batch[0].source;
  const std::size_t nn = src.grid * src.grid;
  std::vector<double> data(B * count * nn);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < count; ++i) {
      auto f = (batch[b].*frame)(i);
      std::copy(f.begin(), f.end(), data.begin() + (b * count + i) * nn);
    }
  }
  return Tensor::from_data({B, count, src.grid, src.grid}, std::move(data));
}

inline Tensor gather_inputs(std::span<const BundledWindow> batch) {
  return gather_frames(batch, &BundledWindow::input_frame, batch[0].history);
}

// Last S frames of the input block: the state the latent at t must decode to.
inline Tensor gather_recon_targets(std::span<const BundledWindow> batch) {
  const std::size_t S = batch[0].bundle, h = batch[0].history;
  const std::size_t B = batch.size();
  const TrajectorySet& src = *batch[0].source;
  const std::size_t nn = src.grid * src.grid;
  std::vector<double> data(B * S * nn);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < S; ++i) {
      auto f = batch[b].input_frame(h - S + i);
      std::copy(f.begin(), f.end(), data.begin() + (b * S + i) * nn);
    }
  }
  return Tensor::from_data({B, S, src.grid, src.grid}, std::move(data));
}

// Frames [(m-1)S, mS) of the target block: the bundle m steps ahead.
inline Tensor gather_step_targets(std::span<const BundledWindow> batch, std::size_t m) {
  const std::size_t S = batch[0].bundle;
  const std::size_t B = batch.size();
  const TrajectorySet& src = *batch[0].source;
  const std::size_t nn = src.grid * src.grid;
  std::vector<double> data(B * S * nn);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < S; ++i) {
      auto f = batch[b].target_frame((m - 1) * S + i);
      std::copy(f.begin(), f.end(), data.begin() + (b * S + i) * nn);
    }
  }
  return Tensor::from_data({B, S, src.grid, src.grid}, std::move(data));
}

// History window shifted m bundles forward (consistency-loss target input).
inline Tensor gather_shifted_windows(std::span<const BundledWindow> batch, std::size_t m) {
  const std::size_t B = batch.size(), h = batch[0].history;
  const TrajectorySet& src = *batch[0].source;
  const std::size_t nn = src.grid * src.grid;
  std::vector<double> data(B * h * nn);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < h; ++i) {
      auto f = batch[b].shifted_frame(m, i);
      std::copy(f.begin(), f.end(), data.begin() + (b * h + i) * nn);
    }
  }
  return Tensor::from_data({B, h, src.grid, src.grid}, std::move(data));
}

}  // namespace detail

inline std::vector<BundledWindow> make_bundled_windows(const TrajectorySet& ts,
                                                       std::size_t history, std::size_t horizon,
                                                       std::size_t bundle) {
  if (history < 1 || horizon < 1 || bundle < 1) {
    throw ConfigError("window spec requires history, horizon, bundle >= 1");
  }
  if (history + horizon * bundle > ts.t_snap) {
    throw ConfigError("infeasible window spec: history + horizon*S = " +
                      std::to_string(history + horizon * bundle) + " > T_snap = " +
                      std::to_string(ts.t_snap));
  }
  const std::size_t per_traj = ts.t_snap - history - horizon * bundle + 1;
  std::vector<BundledWindow> windows;
  windows.reserve(ts.n_traj * per_traj);
  for (std::size_t tr = 0; tr < ts.n_traj; ++tr) {
    for (std::size_t s = 0; s < per_traj; ++s) {
      windows.push_back({&ts, tr, s, history, horizon, bundle});
    }
  }
  return windows;
}

}  // namespace leuq
