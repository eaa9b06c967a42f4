#pragma once
// 2D incompressible smoke solver on a MAC grid, used as the data generator.
//
// Grid conventions (dx = 1, cell (i, j) spans x in [j, j+1], y in [i, i+1]):
//   rho, p : cell centers, shape (H, W)
//   u      : x-faces at (x = j, y = i + 1/2), shape (H, W + 1)
//   v      : y-faces at (x = j + 1/2, y = i), shape (H + 1, W)
// +y (increasing row index) is "up"; buoyancy acts along +y. The box is
// closed, so u(:, 0), u(:, W), v(0, :), v(H, :) are held at exactly zero.

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace fluiddiff::fluid {

struct Grid {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Grid() = default;
  Grid(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

  double& operator()(std::size_t i, std::size_t j) { return values[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return values[i * cols + j]; }

  double min() const;
  double max() const;
  double max_abs() const;

  friend bool operator==(const Grid&, const Grid&) = default;
};

struct SimParams {
  double nu = 0.03;            // kinematic viscosity
  double eta = 0.5;            // buoyancy coefficient
  double dt = 0.1;             // solver step, s
  std::size_t height = 16;     // cells
  std::size_t width = 16;      // cells
  double dx = 1.0;             // fixed; other values are rejected
  double total_time = 40.0;    // s
  double record_every = 1.0;   // s, integer multiple of dt
  double cg_tol = 1e-10;       // max-norm of the Poisson residual
  std::size_t cg_max_iter = 5000;

  /// Throws std::invalid_argument naming the first violated constraint.
  void validate() const;
  std::size_t steps_per_record() const;
  std::size_t snapshot_count() const;
};

struct FluidState {
  Grid u;
  Grid v;
  Grid rho;
  Grid p;
  double tau = 0.0;

  std::size_t height() const { return rho.rows; }
  std::size_t width() const { return rho.cols; }

  static FluidState at_rest(std::size_t height, std::size_t width);
};

enum class Location { Center, FaceX, FaceY };

enum class WallBoundary {
  ZeroGradient,  // ghost value = interior value (scalars)
  ZeroValue,     // ghost value = 0 (velocity)
};

/// Thrown when conjugate gradient misses its tolerance.
class SolverError : public std::runtime_error {
 public:
  SolverError(const std::string& what, double residual, std::size_t iterations)
      : std::runtime_error(what), residual_(residual), iterations_(iterations) {}
  double residual() const { return residual_; }
  std::size_t iterations() const { return iterations_; }

 private:
  double residual_;
  std::size_t iterations_;
};

/// Still fluid with a density field made of 4..10 random Gaussian blobs
/// (radius in [H/16, H/4], amplitude in [0.5, 1]), clamped to [0, 1].
FluidState init_scene(std::uint64_t seed, const SimParams& params);

/// Semi-Lagrangian transport of a field stored at `location`: each sample is
/// traced back by dt * velocity, clamped to the domain, and bilinearly
/// interpolated.
Grid advect(const Grid& field, Location location, const Grid& u, const Grid& v, double dt);

/// Explicit 5-point diffusion step field + nu*dt*lap(field) with dx = 1.
/// Throws std::invalid_argument if nu*dt exceeds 0.25.
Grid diffuse(const Grid& field, double nu, double dt, WallBoundary boundary);

/// Adds eta * rho_face * dt to every interior v face, rho_face being the mean
/// of the two adjacent cells.
FluidState apply_buoyancy(FluidState state, double eta, double dt);

/// Solves lap(p) = div(u)/dt with Neumann walls by conjugate gradient and
/// subtracts dt*grad(p). Throws SolverError after max_iter iterations.
FluidState pressure_project(FluidState state, double dt, double tol, std::size_t max_iter);

/// Cell-centered discrete divergence.
Grid divergence(const FluidState& state);

/// advect velocity -> advect density -> diffuse velocity -> buoyancy ->
/// projection; tau += dt.
FluidState step(FluidState state, const SimParams& params);

struct Snapshot {
  double tau = 0.0;
  Grid ux;  // cell-centered
  Grid uy;
  Grid rho;
};

struct Trajectory {
  Grid rho0;
  std::vector<Snapshot> snapshots;
};

/// Face velocities averaged to cell centers.
std::pair<Grid, Grid> cell_centered_velocity(const FluidState& state);

/// Records a snapshot every record_every seconds up to total_time
/// (the initial rest state is not recorded).
Trajectory simulate(std::uint64_t seed, const SimParams& params);

}  // namespace fluiddiff::fluid
