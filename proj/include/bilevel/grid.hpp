#pragma once

#include <stdexcept>
#include <string>

namespace bilevel {

/// Uniform space-time grid on (0,length) x (0,T).
/// Space: nx interior nodes, homogeneous Dirichlet boundary, hx = length/(nx+1).
/// Time: nt steps of size ht = T/nt, slices t_n = n*ht for n = 0..nt.
struct SpaceTimeGrid {
  int nx = 0;
  int nt = 0;
  double length = 0.0;
  double T = 0.0;
  double hx = 0.0;
  double ht = 0.0;

  double node(int i) const { return (i + 1) * hx; }
  double time(int n) const { return n * ht; }
};

inline SpaceTimeGrid build_grid(int nx, int nt, double length, double T) {
  if (nx < 2)
    throw std::invalid_argument("build_grid: nx must be >= 2, got " + std::to_string(nx));
  if (nt < 1)
    throw std::invalid_argument("build_grid: nt must be >= 1, got " + std::to_string(nt));
  if (!(length > 0.0))
    throw std::invalid_argument("build_grid: length must be positive");
  if (!(T > 0.0))
    throw std::invalid_argument("build_grid: T must be positive");
  SpaceTimeGrid g;
  g.nx = nx;
  g.nt = nt;
  g.length = length;
  g.T = T;
  g.hx = length / (nx + 1);
  g.ht = T / nt;
  return g;
}

}  // namespace bilevel
