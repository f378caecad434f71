#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "leuq/common.hpp"
#include "leuq/fft.hpp"
#include "leuq/rng.hpp"

namespace leuq {

// 2D incompressible Navier-Stokes in vorticity form on the unit torus,
//   dw/dt + u.grad(w) = nu*Lap(w) + f,  div(u) = 0,
// with the steady forcing f(x,y) = amplitude*(sin(2pi(x+y)) + cos(2pi(x+y))).
struct SolverConfig {
  std::size_t grid = 64;           // N per side, power of two
  double viscosity = 1e-4;         // nu
  double forcing_amplitude = 0.1;
  double dt = 1e-3;
  double snap_dt = 0.2;            // physical time between snapshots
  std::size_t snapshots = 20;      // per trajectory, including t=0
  std::uint64_t seed = 0;
  // Initial vorticity: Gaussian random field with spectral density
  // proportional to (|k|^2 + tau^2)^(-alpha), mean removed.
  double ic_alpha = 2.5;
  double ic_tau = 7.0;
  double ic_amplitude = 3.0;

  std::size_t steps_per_snapshot() const {
    const double ratio = snap_dt / dt;
    const auto k = static_cast<long long>(std::llround(ratio));
    if (k < 1 || std::fabs(ratio - static_cast<double>(k)) > 1e-9 * ratio) {
      throw ConfigError("snapshot interval " + std::to_string(snap_dt) +
                        " is not an integer multiple of dt " + std::to_string(dt));
    }
    return static_cast<std::size_t>(k);
  }

  void validate() const {
    if (!is_pow2(grid)) throw ConfigError("grid must be a power of two, got " + std::to_string(grid));
    if (viscosity <= 0.0) throw ConfigError("viscosity must be positive");
    if (dt <= 0.0) throw ConfigError("dt must be positive");
    if (snapshots < 1) throw ConfigError("need at least one snapshot");
    steps_per_snapshot();
  }
};

inline void to_json(nlohmann::json& j, const SolverConfig& c) {
  j = nlohmann::json{{"grid", c.grid},
                     {"viscosity", c.viscosity},
                     {"forcing_amplitude", c.forcing_amplitude},
                     {"dt", c.dt},
                     {"snap_dt", c.snap_dt},
                     {"snapshots", c.snapshots},
                     {"seed", c.seed},
                     {"ic_alpha", c.ic_alpha},
                     {"ic_tau", c.ic_tau},
                     {"ic_amplitude", c.ic_amplitude}};
}

inline void from_json(const nlohmann::json& j, SolverConfig& c) {
  j.at("grid").get_to(c.grid);
  j.at("viscosity").get_to(c.viscosity);
  j.at("forcing_amplitude").get_to(c.forcing_amplitude);
  j.at("dt").get_to(c.dt);
  j.at("snap_dt").get_to(c.snap_dt);
  j.at("snapshots").get_to(c.snapshots);
  j.at("seed").get_to(c.seed);
  j.at("ic_alpha").get_to(c.ic_alpha);
  j.at("ic_tau").get_to(c.ic_tau);
  j.at("ic_amplitude").get_to(c.ic_amplitude);
}

namespace detail {

// Integer mode number for FFT bin i on an N-grid: 0..N/2, then negative.
inline double mode_of(std::size_t i, std::size_t n) {
  return i <= n / 2 ? static_cast<double>(i)
                    : static_cast<double>(i) - static_cast<double>(n);
}

struct SpectralWorkspace {
  std::size_t n;
  std::vector<double> kx, ky;      // physical wavenumbers 2*pi*m
  std::vector<double> ksq;         // |k|^2 per grid point
  std::vector<unsigned char> keep; // 2/3-rule dealias mask
  std::vector<std::complex<double>> f_hat;

  SpectralWorkspace(std::size_t n_, double forcing_amplitude) : n(n_) {
    kx.resize(n * n);
    ky.resize(n * n);
    ksq.resize(n * n);
    keep.resize(n * n);
    const double two_pi = 2.0 * 3.14159265358979323846;
    const double cut = static_cast<double>(n) / 3.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double mi = mode_of(i, n);
      for (std::size_t j = 0; j < n; ++j) {
        const double mj = mode_of(j, n);
        const std::size_t idx = i * n + j;
        // row index i = y, column j = x
        ky[idx] = two_pi * mi;
        kx[idx] = two_pi * mj;
        ksq[idx] = kx[idx] * kx[idx] + ky[idx] * ky[idx];
        keep[idx] = (std::fabs(mi) <= cut && std::fabs(mj) <= cut) ? 1 : 0;
      }
    }
    // transform of the steady forcing
    std::vector<std::complex<double>> f(n * n);
    for (std::size_t i = 0; i < n; ++i) {
      const double y = static_cast<double>(i) / static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j) {
        const double x = static_cast<double>(j) / static_cast<double>(n);
        const double phase = two_pi * (x + y);
        f[i * n + j] = forcing_amplitude * (std::sin(phase) + std::cos(phase));
      }
    }
    fft2d_inplace(f, n, false);
    for (std::size_t idx = 0; idx < n * n; ++idx) {
      if (!keep[idx]) f[idx] = 0.0;
    }
    f[0] = 0.0;
    f_hat = std::move(f);
  }
};

}  // namespace detail

// Velocity recovered from vorticity via the streamfunction: Lap(psi) = -w,
// u = (d psi/dy, -d psi/dx). Returns (u, v) on the grid.
inline std::pair<std::vector<double>, std::vector<double>> vorticity_to_velocity(
    const std::vector<double>& w, std::size_t n) {
  if (w.size() != n * n) throw ShapeError("vorticity_to_velocity: field/grid mismatch");
  detail::SpectralWorkspace ws(n, 0.0);
  std::vector<std::complex<double>> what(n * n);
  for (std::size_t i = 0; i < n * n; ++i) what[i] = w[i];
  fft2d_inplace(what, n, false);
  std::vector<std::complex<double>> uh(n * n), vh(n * n);
  const std::complex<double> im(0.0, 1.0);
  for (std::size_t i = 0; i < n * n; ++i) {
    if (ws.ksq[i] == 0.0) {
      uh[i] = vh[i] = 0.0;
      continue;
    }
    const std::complex<double> psi = what[i] / ws.ksq[i];
    uh[i] = im * ws.ky[i] * psi;
    vh[i] = -im * ws.kx[i] * psi;
  }
  fft2d_inplace(uh, n, true);
  fft2d_inplace(vh, n, true);
  std::vector<double> u(n * n), v(n * n);
  for (std::size_t i = 0; i < n * n; ++i) {
    u[i] = uh[i].real();
    v[i] = vh[i].real();
  }
  return {std::move(u), std::move(v)};
}

// max_k |k . u_hat(k)| / N^2 -- spectral divergence of the recovered velocity.
inline double max_spectral_divergence(const std::vector<double>& u, const std::vector<double>& v,
                                      std::size_t n) {
  detail::SpectralWorkspace ws(n, 0.0);
  std::vector<std::complex<double>> uh(n * n), vh(n * n);
  for (std::size_t i = 0; i < n * n; ++i) {
    uh[i] = u[i];
    vh[i] = v[i];
  }
  fft2d_inplace(uh, n, false);
  fft2d_inplace(vh, n, false);
  double mx = 0.0;
  const double norm = 1.0 / static_cast<double>(n * n);
  for (std::size_t i = 0; i < n * n; ++i) {
    const std::complex<double> d = uh[i] * ws.kx[i] + vh[i] * ws.ky[i];
    mx = std::max(mx, std::abs(d) * norm);
  }
  return mx;
}

// Mean kinetic energy (1/N^2) * sum 0.5*(u^2+v^2) of the flow w induces.
inline double kinetic_energy(const std::vector<double>& w, std::size_t n) {
  auto [u, v] = vorticity_to_velocity(w, n);
  double e = 0.0;
  for (std::size_t i = 0; i < n * n; ++i) e += 0.5 * (u[i] * u[i] + v[i] * v[i]);
  return e / static_cast<double>(n * n);
}

// Pseudo-spectral evolution: Crank-Nicolson diffusion, second-order explicit
// (Adams-Bashforth) advection + forcing, 2/3-rule dealiasing. Snapshot 0 is
// the (mean-projected, dealiased) initial state.
inline std::vector<std::vector<double>> solve_navier_stokes(const std::vector<double>& w0,
                                                            const SolverConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.grid;
  if (w0.size() != n * n) {
    throw ShapeError("initial vorticity has " + std::to_string(w0.size()) +
                     " values, expected " + std::to_string(n * n));
  }
  detail::SpectralWorkspace ws(n, cfg.forcing_amplitude);
  const std::size_t nn = n * n;
  const double dt = cfg.dt;
  const double nu = cfg.viscosity;
  const std::size_t per_snap = cfg.steps_per_snapshot();

  std::vector<std::complex<double>> what(nn);
  for (std::size_t i = 0; i < nn; ++i) what[i] = w0[i];
  fft2d_inplace(what, n, false);
  what[0] = 0.0;  // project out the mean
  for (std::size_t i = 0; i < nn; ++i) {
    if (!ws.keep[i]) what[i] = 0.0;
  }

  std::vector<std::vector<double>> snaps;
  snaps.reserve(cfg.snapshots);
  std::vector<std::complex<double>> buf(nn);

  auto store_snapshot = [&]() {
    buf = what;
    fft2d_inplace(buf, n, true);
    std::vector<double> w(nn);
    for (std::size_t i = 0; i < nn; ++i) w[i] = buf[i].real();
    snaps.push_back(std::move(w));
  };

  store_snapshot();
  if (cfg.snapshots == 1) return snaps;

  std::vector<std::complex<double>> uh(nn), vh(nn), wx(nn), wy(nn);
  std::vector<std::complex<double>> nl_prev(nn), nl(nn);
  const std::complex<double> im(0.0, 1.0);

  // u.grad(w) in spectral space, dealiased; also reports max|u| for CFL.
  auto nonlinear = [&](const std::vector<std::complex<double>>& wh,
                       std::vector<std::complex<double>>& out) -> double {
    for (std::size_t i = 0; i < nn; ++i) {
      if (ws.ksq[i] == 0.0) {
        uh[i] = vh[i] = 0.0;
      } else {
        const std::complex<double> psi = wh[i] / ws.ksq[i];
        uh[i] = im * ws.ky[i] * psi;
        vh[i] = -im * ws.kx[i] * psi;
      }
      wx[i] = im * ws.kx[i] * wh[i];
      wy[i] = im * ws.ky[i] * wh[i];
    }
    fft2d_inplace(uh, n, true);
    fft2d_inplace(vh, n, true);
    fft2d_inplace(wx, n, true);
    fft2d_inplace(wy, n, true);
    double umax = 0.0;
    for (std::size_t i = 0; i < nn; ++i) {
      const double uu = uh[i].real(), vv = vh[i].real();
      umax = std::max(umax, std::max(std::fabs(uu), std::fabs(vv)));
      out[i] = uu * wx[i].real() + vv * wy[i].real();
    }
    fft2d_inplace(out, n, false);
    for (std::size_t i = 0; i < nn; ++i) {
      if (!ws.keep[i]) out[i] = 0.0;
    }
    return umax;
  };

  const std::size_t total_steps = per_snap * (cfg.snapshots - 1);
  bool have_prev = false;
  for (std::size_t step = 0; step < total_steps; ++step) {
    const double umax = nonlinear(what, nl);
    const double cfl = umax * dt * static_cast<double>(n);
    if (cfl > 1.0) {
      throw StabilityError("CFL violation at step " + std::to_string(step) + ": max|u|*dt/dx = " +
                           std::to_string(cfl) + " > 1; reduce dt");
    }
    for (std::size_t i = 0; i < nn; ++i) {
      const std::complex<double> adv =
          have_prev ? 1.5 * nl[i] - 0.5 * nl_prev[i] : nl[i];
      const double lam = 0.5 * nu * dt * ws.ksq[i];
      what[i] = (what[i] * (1.0 - lam) + dt * (ws.f_hat[i] - adv)) / (1.0 + lam);
      if (!ws.keep[i]) what[i] = 0.0;
    }
    what[0] = 0.0;
    nl_prev = nl;
    have_prev = true;
    for (std::size_t i = 0; i < nn; ++i) {
      if (!std::isfinite(what[i].real()) || !std::isfinite(what[i].imag())) {
        throw NumericError("non-finite spectrum at step " + std::to_string(step));
      }
    }
    if ((step + 1) % per_snap == 0) store_snapshot();
  }
  return snaps;
}

// Gaussian random field with spectral density ~ (|k|^2 + tau^2)^(-alpha).
inline std::vector<double> random_initial_vorticity(const SolverConfig& cfg, Rng& rng) {
  const std::size_t n = cfg.grid;
  const std::size_t nn = n * n;
  std::vector<std::complex<double>> noise(nn);
  for (std::size_t i = 0; i < nn; ++i) noise[i] = rng.normal();
  fft2d_inplace(noise, n, false);
  const double sigma = cfg.ic_amplitude * std::pow(cfg.ic_tau, cfg.ic_alpha - 1.0);
  const double two_pi = 2.0 * 3.14159265358979323846;
  for (std::size_t i = 0; i < n; ++i) {
    const double mi = detail::mode_of(i, n);
    for (std::size_t j = 0; j < n; ++j) {
      const double mj = detail::mode_of(j, n);
      const std::size_t idx = i * n + j;
      if (i == 0 && j == 0) {
        noise[idx] = 0.0;  // mean removed
        continue;
      }
      const double k2 = two_pi * two_pi * (mi * mi + mj * mj);
      const double amp = sigma * std::pow(k2 + cfg.ic_tau * cfg.ic_tau, -cfg.ic_alpha / 2.0);
      noise[idx] *= amp * static_cast<double>(n);
    }
  }
  fft2d_inplace(noise, n, true);
  std::vector<double> w(nn);
  for (std::size_t i = 0; i < nn; ++i) w[i] = noise[i].real();
  return w;
}

}  // namespace leuq
