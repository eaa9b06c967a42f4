#include "fluiddiff/fluid.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "fluiddiff/rng.hpp"
#include "fluiddiff/simd.hpp"

namespace fluiddiff::fluid {
namespace {

double clampd(double x, double lo, double hi) { return std::min(std::max(x, lo), hi); }

// Bilinear lookup in index space with indices clamped to the grid.
double sample(const Grid& g, double fx, double fy) {
  fx = clampd(fx, 0.0, static_cast<double>(g.cols - 1));
  fy = clampd(fy, 0.0, static_cast<double>(g.rows - 1));
  const auto j0 = static_cast<std::size_t>(fx);
  const auto i0 = static_cast<std::size_t>(fy);
  const std::size_t j1 = std::min(j0 + 1, g.cols - 1);
  const std::size_t i1 = std::min(i0 + 1, g.rows - 1);
  const double sx = fx - static_cast<double>(j0);
  const double sy = fy - static_cast<double>(i0);
  const double bottom = (1.0 - sx) * g(i0, j0) + sx * g(i0, j1);
  const double top = (1.0 - sx) * g(i1, j0) + sx * g(i1, j1);
  return (1.0 - sy) * bottom + sy * top;
}

// Offset from physical coordinates to index coordinates for each location.
void location_offset(Location loc, double& ox, double& oy) {
  switch (loc) {
    case Location::Center: ox = 0.5; oy = 0.5; return;
    case Location::FaceX: ox = 0.0; oy = 0.5; return;
    case Location::FaceY: ox = 0.5; oy = 0.0; return;
  }
}

void zero_walls(FluidState& s) {
  const std::size_t h = s.height(), w = s.width();
  for (std::size_t i = 0; i < h; ++i) s.u(i, 0) = s.u(i, w) = 0.0;
  for (std::size_t j = 0; j < w; ++j) s.v(0, j) = s.v(h, j) = 0.0;
}

// (A p)(c) = sum over in-domain neighbours of (p(c) - p(nb)); A = -lap with
// Neumann walls, symmetric positive semi-definite with constant null space.
void apply_neg_laplacian(const std::vector<double>& p, std::vector<double>& out, std::size_t h,
                         std::size_t w) {
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t c = i * w + j;
      double acc = 0.0;
      if (j > 0) acc += p[c] - p[c - 1];
      if (j + 1 < w) acc += p[c] - p[c + 1];
      if (i > 0) acc += p[c] - p[c - w];
      if (i + 1 < h) acc += p[c] - p[c + w];
      out[c] = acc;
    }
  }
}

double max_abs(const std::vector<double>& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

void remove_mean(std::vector<double>& v) {
  const double mean = simd::kernels<double>().sum(v.size(), v.data()) / static_cast<double>(v.size());
  for (double& x : v) x -= mean;
}

}  // namespace

double Grid::min() const { return *std::min_element(values.begin(), values.end()); }
double Grid::max() const { return *std::max_element(values.begin(), values.end()); }
double Grid::max_abs() const {
  double m = 0.0;
  for (double x : values) m = std::max(m, std::abs(x));
  return m;
}

void SimParams::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("SimParams: " + msg); };
  if (!(nu >= 0.0)) fail("nu must be >= 0");
  if (!(eta >= 0.0)) fail("eta must be >= 0");
  if (!(dt > 0.0)) fail("dt must be > 0");
  if (height < 2 || width < 2) fail("grid must be at least 2x2");
  if (dx != 1.0) fail("dx is fixed to 1 grid unit");
  if (!(record_every > 0.0) || !(total_time > 0.0)) fail("record_every and total_time must be > 0");
  const double steps = record_every / dt;
  if (std::abs(steps - std::round(steps)) > 1e-9 * steps || std::round(steps) < 1) {
    fail("record_every must be an integer multiple of dt");
  }
  const double records = total_time / record_every;
  if (std::abs(records - std::round(records)) > 1e-9 * records || std::round(records) < 1) {
    fail("total_time must be an integer multiple of record_every");
  }
  if (!(cg_tol > 0.0)) fail("cg_tol must be > 0");
  if (cg_max_iter == 0) fail("cg_max_iter must be >= 1");
}

std::size_t SimParams::steps_per_record() const {
  return static_cast<std::size_t>(std::llround(record_every / dt));
}

std::size_t SimParams::snapshot_count() const {
  return static_cast<std::size_t>(std::llround(total_time / record_every));
}

FluidState FluidState::at_rest(std::size_t height, std::size_t width) {
  FluidState s;
  s.u = Grid(height, width + 1);
  s.v = Grid(height + 1, width);
  s.rho = Grid(height, width);
  s.p = Grid(height, width);
  return s;
}

FluidState init_scene(std::uint64_t seed, const SimParams& params) {
  const std::size_t h = params.height, w = params.width;
  FluidState s = FluidState::at_rest(h, w);
  Rng rng(seed);
  const auto blobs = rng.uniform_int(4, 10);
  const double ext = static_cast<double>(h);
  for (std::uint64_t b = 0; b < blobs; ++b) {
    const double cx = rng.uniform(0.0, static_cast<double>(w));
    const double cy = rng.uniform(0.0, static_cast<double>(h));
    const double radius = rng.uniform(ext / 16.0, ext / 4.0);
    const double amp = rng.uniform(0.5, 1.0);
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const double dx = static_cast<double>(j) + 0.5 - cx;
        const double dy = static_cast<double>(i) + 0.5 - cy;
        s.rho(i, j) += amp * std::exp(-(dx * dx + dy * dy) / (radius * radius));
      }
    }
  }
  for (double& r : s.rho.values) r = clampd(r, 0.0, 1.0);
  return s;
}

Grid advect(const Grid& field, Location location, const Grid& u, const Grid& v, double dt) {
  const double height = static_cast<double>(u.rows);
  const double width = static_cast<double>(v.cols);
  if (u.cols != v.cols + 1 || v.rows != u.rows + 1) {
    throw std::invalid_argument("advect: u and v are not a MAC pair");
  }
  double ox = 0, oy = 0;
  location_offset(location, ox, oy);
  Grid out(field.rows, field.cols);
  for (std::size_t i = 0; i < field.rows; ++i) {
    for (std::size_t j = 0; j < field.cols; ++j) {
      const double x = static_cast<double>(j) + ox;
      const double y = static_cast<double>(i) + oy;
      const double vel_x = sample(u, x, y - 0.5);
      const double vel_y = sample(v, x - 0.5, y);
      const double bx = clampd(x - dt * vel_x, 0.0, width);
      const double by = clampd(y - dt * vel_y, 0.0, height);
      out(i, j) = sample(field, bx - ox, by - oy);
    }
  }
  return out;
}

Grid diffuse(const Grid& field, double nu, double dt, WallBoundary boundary) {
  const double k = nu * dt;
  if (k > 0.25) {
    std::ostringstream os;
    os << "diffuse: nu*dt/dx^2 = " << k << " exceeds the explicit stability bound 0.25";
    throw std::invalid_argument(os.str());
  }
  if (k == 0.0) return field;
  Grid out(field.rows, field.cols);
  const bool mirror = boundary == WallBoundary::ZeroGradient;
  for (std::size_t i = 0; i < field.rows; ++i) {
    for (std::size_t j = 0; j < field.cols; ++j) {
      const double c = field(i, j);
      const double ghost = mirror ? c : 0.0;
      const double left = j > 0 ? field(i, j - 1) : ghost;
      const double right = j + 1 < field.cols ? field(i, j + 1) : ghost;
      const double down = i > 0 ? field(i - 1, j) : ghost;
      const double up = i + 1 < field.rows ? field(i + 1, j) : ghost;
      out(i, j) = c + k * (left + right + down + up - 4.0 * c);
    }
  }
  return out;
}

FluidState apply_buoyancy(FluidState state, double eta, double dt) {
  const std::size_t h = state.height(), w = state.width();
  for (std::size_t i = 1; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      state.v(i, j) += eta * 0.5 * (state.rho(i - 1, j) + state.rho(i, j)) * dt;
    }
  }
  return state;
}

Grid divergence(const FluidState& s) {
  Grid d(s.height(), s.width());
  for (std::size_t i = 0; i < s.height(); ++i) {
    for (std::size_t j = 0; j < s.width(); ++j) {
      d(i, j) = (s.u(i, j + 1) - s.u(i, j)) + (s.v(i + 1, j) - s.v(i, j));
    }
  }
  return d;
}

FluidState pressure_project(FluidState state, double dt, double tol, std::size_t max_iter) {
  if (!(tol > 0.0)) throw std::invalid_argument("pressure_project: tol must be > 0");
  if (!(dt > 0.0)) throw std::invalid_argument("pressure_project: dt must be > 0");
  const std::size_t h = state.height(), w = state.width(), n = h * w;
  const auto& kt = simd::kernels<double>();

  // A p = b with A = -lap, b = -div/dt; mean-centred for Neumann compatibility.
  std::vector<double> b(n);
  const Grid div = divergence(state);
  for (std::size_t c = 0; c < n; ++c) b[c] = -div.values[c] / dt;
  remove_mean(b);

  std::vector<double> p = state.p.values;
  remove_mean(p);
  std::vector<double> ap(n), r(n), dir(n);
  apply_neg_laplacian(p, ap, h, w);
  for (std::size_t c = 0; c < n; ++c) r[c] = b[c] - ap[c];
  double res = max_abs(r);
  std::size_t iter = 0;
  if (res >= tol) {
    dir = r;
    double rr = kt.dot(n, r.data(), r.data());
    for (iter = 1; iter <= max_iter; ++iter) {
      apply_neg_laplacian(dir, ap, h, w);
      const double denom = kt.dot(n, dir.data(), ap.data());
      if (!(denom > 0.0)) break;
      const double alpha = rr / denom;
      kt.axpy(n, alpha, dir.data(), p.data());
      kt.axpy(n, -alpha, ap.data(), r.data());
      res = max_abs(r);
      if (res < tol) break;
      const double rr_next = kt.dot(n, r.data(), r.data());
      const double beta = rr_next / rr;
      rr = rr_next;
      for (std::size_t c = 0; c < n; ++c) dir[c] = r[c] + beta * dir[c];
    }
    if (!(res < tol)) {
      std::ostringstream os;
      os << "pressure_project: CG did not reach tol " << tol << " in " << max_iter
         << " iterations (residual " << res << ")";
      throw SolverError(os.str(), res, max_iter);
    }
  }
  remove_mean(p);
  state.p.values = std::move(p);

  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 1; j < w; ++j) state.u(i, j) -= dt * (state.p(i, j) - state.p(i, j - 1));
  }
  for (std::size_t i = 1; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) state.v(i, j) -= dt * (state.p(i, j) - state.p(i - 1, j));
  }
  zero_walls(state);
  return state;
}

FluidState step(FluidState state, const SimParams& params) {
  const double dt = params.dt;
  Grid u = advect(state.u, Location::FaceX, state.u, state.v, dt);
  Grid v = advect(state.v, Location::FaceY, state.u, state.v, dt);
  state.rho = advect(state.rho, Location::Center, state.u, state.v, dt);
  state.u = diffuse(u, params.nu, dt, WallBoundary::ZeroValue);
  state.v = diffuse(v, params.nu, dt, WallBoundary::ZeroValue);
  zero_walls(state);
  state = apply_buoyancy(std::move(state), params.eta, dt);
  state = pressure_project(std::move(state), dt, params.cg_tol, params.cg_max_iter);
  state.tau += dt;
  return state;
}

std::pair<Grid, Grid> cell_centered_velocity(const FluidState& s) {
  Grid ux(s.height(), s.width()), uy(s.height(), s.width());
  for (std::size_t i = 0; i < s.height(); ++i) {
    for (std::size_t j = 0; j < s.width(); ++j) {
      ux(i, j) = 0.5 * (s.u(i, j) + s.u(i, j + 1));
      uy(i, j) = 0.5 * (s.v(i, j) + s.v(i + 1, j));
    }
  }
  return {std::move(ux), std::move(uy)};
}

Trajectory simulate(std::uint64_t seed, const SimParams& params) {
  params.validate();
  FluidState state = init_scene(seed, params);
  Trajectory traj;
  traj.rho0 = state.rho;
  const std::size_t per_record = params.steps_per_record();
  const std::size_t records = params.snapshot_count();
  traj.snapshots.reserve(records);
  for (std::size_t r = 0; r < records; ++r) {
    for (std::size_t s = 0; s < per_record; ++s) state = step(std::move(state), params);
    auto [ux, uy] = cell_centered_velocity(state);
    traj.snapshots.push_back(
        Snapshot{static_cast<double>(r + 1) * params.record_every, std::move(ux), std::move(uy), state.rho});
  }
  return traj;
}

}  // namespace fluiddiff::fluid
