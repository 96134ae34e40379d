#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "bilevel/spaces.hpp"
#include "bilevel/types.hpp"

namespace bilevel {

enum class ObservationKind { full, snapshots, averages };

inline ObservationKind observation_kind_from_string(const std::string& s) {
  if (s == "full") return ObservationKind::full;
  if (s == "snapshots") return ObservationKind::snapshots;
  if (s == "averages") return ObservationKind::averages;
  throw std::invalid_argument("unknown observation kind '" + s + "'");
}

inline std::string to_string(ObservationKind k) {
  switch (k) {
    case ObservationKind::full: return "full";
    case ObservationKind::snapshots: return "snapshots";
    case ObservationKind::averages: return "averages";
  }
  return "?";
}

/// Linear observation operator L on trajectories.
/// full: identity into the mass-weighted trajectory space.
/// snapshots: full spatial fields at selected grid times (no time weight).
/// averages: spatial window means, recorded at every slice (ht time weight).
struct ObservationSpec {
  ObservationKind kind = ObservationKind::snapshots;
  std::vector<int> snap_slices;       // snapshot slice indices (sorted, unique)
  std::vector<double> snap_times;     // the times the slices came from
  std::vector<Vec> windows;           // averages: one nodal weight vector each

  int data_rows(const SpaceTimeGrid& g) const {
    switch (kind) {
      case ObservationKind::full: return g.nt + 1;
      case ObservationKind::snapshots: return static_cast<int>(snap_slices.size());
      case ObservationKind::averages: return g.nt + 1;
    }
    return 0;
  }
  int data_cols(const SpaceTimeGrid& g) const {
    return kind == ObservationKind::averages ? static_cast<int>(windows.size()) : g.nx;
  }
};

struct ObservationData {
  Array2 values;
  double delta = 0.0;   // exact noise level of this realization (0 for clean)
  std::uint64_t seed = 0;
};

inline ObservationSpec make_full_spec() {
  ObservationSpec s;
  s.kind = ObservationKind::full;
  return s;
}

inline ObservationSpec make_snapshot_spec(const SpaceTimeGrid& g, const std::vector<double>& times) {
  if (times.empty()) throw std::invalid_argument("make_snapshot_spec: no snapshot times");
  ObservationSpec s;
  s.kind = ObservationKind::snapshots;
  int prev = -1;
  for (double t : times) {
    double ratio = t / g.ht;
    int slice = static_cast<int>(std::llround(ratio));
    if (std::abs(ratio - slice) > 1e-9 * (g.nt + 1) || slice < 0 || slice > g.nt)
      throw std::invalid_argument("make_snapshot_spec: time " + std::to_string(t) +
                                  " is not a grid time in [0, T]");
    if (slice <= prev)
      throw std::invalid_argument("make_snapshot_spec: times must be strictly increasing");
    prev = slice;
    s.snap_slices.push_back(slice);
    s.snap_times.push_back(t);
  }
  return s;
}

/// Interval windows [lo, hi], normalized to unit integral.
inline ObservationSpec make_average_spec(const SpaceTimeGrid& g,
                                         const std::vector<std::pair<double, double>>& intervals) {
  if (intervals.empty()) throw std::invalid_argument("make_average_spec: no windows");
  ObservationSpec s;
  s.kind = ObservationKind::averages;
  for (auto [lo, hi] : intervals) {
    if (!(lo < hi) || lo < 0.0 || hi > g.length)
      throw std::invalid_argument("make_average_spec: bad window [" + std::to_string(lo) + ", " +
                                  std::to_string(hi) + "]");
    Vec w(g.nx, 0.0);
    double mss = 0.0;
    for (int i = 0; i < g.nx; ++i)
      if (g.node(i) >= lo && g.node(i) <= hi) {
        w[i] = 1.0;
        mss += g.hx;
      }
    if (mss == 0.0)
      throw std::invalid_argument("make_average_spec: window contains no grid node");
    for (auto& t : w) t /= mss;
    s.windows.push_back(std::move(w));
  }
  return s;
}

inline ObservationData observe(const Spaces& sp, const ObservationSpec& spec, const StateField& u) {
  const auto& g = sp.grid();
  if (u.v.rows != g.nt + 1 || u.v.cols != g.nx)
    throw std::invalid_argument("observe: state must be (nt+1) x nx");
  ObservationData y;
  y.values = Array2(spec.data_rows(g), spec.data_cols(g));
  switch (spec.kind) {
    case ObservationKind::full:
      y.values = u.v;
      break;
    case ObservationKind::snapshots:
      for (std::size_t s = 0; s < spec.snap_slices.size(); ++s) {
        auto src = u.slice(spec.snap_slices[s]);
        auto dst = y.values.row(static_cast<int>(s));
        for (int i = 0; i < g.nx; ++i) dst[i] = src[i];
      }
      break;
    case ObservationKind::averages:
      for (int n = 0; n <= g.nt; ++n) {
        auto un = u.slice(n);
        auto dst = y.values.row(n);
        for (std::size_t s = 0; s < spec.windows.size(); ++s)
          dst[s] = sp.inner_H(spec.windows[s], un);
      }
      break;
  }
  return y;
}

inline double inner_Y(const Spaces& sp, const ObservationSpec& spec, const Array2& p,
                      const Array2& q) {
  const auto& g = sp.grid();
  if (p.rows != spec.data_rows(g) || p.cols != spec.data_cols(g) || !p.same_shape(q))
    throw std::invalid_argument("inner_Y: data shape does not match the observation spec");
  double s = 0.0;
  switch (spec.kind) {
    case ObservationKind::full:
      for (int n = 0; n < p.rows; ++n) s += sp.inner_H(p.row(n), q.row(n));
      return g.ht * s;
    case ObservationKind::snapshots:
      for (int n = 0; n < p.rows; ++n) s += sp.inner_H(p.row(n), q.row(n));
      return s;
    case ObservationKind::averages:
      for (int n = 0; n < p.rows; ++n) s += dot(p.row(n), q.row(n));
      return g.ht * s;
  }
  return s;
}

inline double norm_Y(const Spaces& sp, const ObservationSpec& spec, const Array2& p) {
  return std::sqrt(inner_Y(sp, spec, p, p));
}

inline Array2 data_diff(const Array2& p, const Array2& q) {
  if (!p.same_shape(q)) throw std::invalid_argument("data_diff: shape mismatch");
  Array2 d = p;
  for (std::size_t i = 0; i < d.data.size(); ++i) d.data[i] -= q.data[i];
  return d;
}

/// Hilbert adjoint L*: residual data -> trajectory v with
/// (L* r, w)_calU = (r, L w)_Y for every trajectory w. Exact per construction
/// for each kind; snapshot atoms divide by the ht quadrature weight.
inline StateField observe_adjoint(const Spaces& sp, const ObservationSpec& spec, const Array2& r) {
  const auto& g = sp.grid();
  if (r.rows != spec.data_rows(g) || r.cols != spec.data_cols(g))
    throw std::invalid_argument("observe_adjoint: data shape does not match the observation spec");
  StateField v(g);
  switch (spec.kind) {
    case ObservationKind::full:
      for (int n = 0; n <= g.nt; ++n) {
        Vec t = sp.ops().apply_mass(r.row(n));
        t = sp.ops().riesz_DU.solve(t);
        auto dst = v.slice(n);
        for (int i = 0; i < g.nx; ++i) dst[i] = t[i];
      }
      break;
    case ObservationKind::snapshots:
      for (std::size_t s = 0; s < spec.snap_slices.size(); ++s) {
        Vec t = sp.ops().apply_mass(r.row(static_cast<int>(s)));
        t = sp.ops().riesz_DU.solve(t);
        auto dst = v.slice(spec.snap_slices[s]);
        for (int i = 0; i < g.nx; ++i) dst[i] += t[i] / g.ht;
      }
      break;
    case ObservationKind::averages:
      for (int n = 0; n <= g.nt; ++n) {
        Vec acc(g.nx, 0.0);
        auto rn = r.row(n);
        for (std::size_t s = 0; s < spec.windows.size(); ++s)
          for (int i = 0; i < g.nx; ++i) acc[i] += rn[s] * sp.ops().mass[i] * spec.windows[s][i];
        Vec t = sp.ops().riesz_DU.solve(acc);
        auto dst = v.slice(n);
        for (int i = 0; i < g.nx; ++i) dst[i] = t[i];
      }
      break;
  }
  return v;
}

/// Gaussian direction rescaled so the Y-distance to the clean data is exactly
/// delta. Deterministic per (seed, spec shape).
inline ObservationData add_noise(const Spaces& sp, const ObservationSpec& spec,
                                 const ObservationData& clean, double delta, std::uint64_t seed) {
  if (delta < 0.0) throw std::invalid_argument("add_noise: delta must be >= 0");
  ObservationData noisy = clean;
  noisy.delta = delta;
  noisy.seed = seed;
  if (delta == 0.0) return noisy;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  Array2 dir = clean.values;
  for (auto& t : dir.data) t = normal(rng);
  double n = norm_Y(sp, spec, dir);
  if (n == 0.0) throw std::runtime_error("add_noise: degenerate noise direction");
  double scale = delta / n;
  for (std::size_t i = 0; i < dir.data.size(); ++i) noisy.values.data[i] += scale * dir.data[i];
  return noisy;
}

}  // namespace bilevel
