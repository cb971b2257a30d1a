#pragma once

#include <optional>
#include <span>
#include <vector>

#include "vbsim/propagation.hpp"
#include "vbsim/sequences.hpp"
#include "vbsim/signal.hpp"

namespace vbsim {

struct SimulateOptions {
  double rise_time_ns = 2.5;
  std::optional<double> fall_time_ns;
  double bin_width_ns = 0.5;
  double rate_scale = 1.0;
  double background_rate_mhz = 0.0;
};

// Compile, propagate from thermal equilibrium, and bin the emission.
PLTrace simulate_sequence(const LevelGraph& graph, const PulseSequence& seq,
                          const SimulateOptions& opts);

// One two-pulse trace per dark time; optional shot noise (seed advances
// per trace so realizations stay independent but reproducible).
std::vector<PLTrace> simulate_recovery_scan(
    const LevelGraph& graph, const RecoveryScan& scan,
    const SimulateOptions& opts,
    const std::optional<NoiseOptions>& noise = {});

// Bin-averaged emission rate and its exact parameter derivatives on the
// bin grid of a data window. One instance per candidate parameter vector;
// the matrix-exponential cache is shared across windows.
class ModelPredictor {
 public:
  ModelPredictor(const LevelGraph& graph,
                 std::span<const LevelGraph* const> derivative_graphs);

  // `window` must lie on the sequence's global bin grid (t_start a
  // multiple of its bin width). rate: size n; d_rate: n x n_params, both
  // in MHz per unit parameter. Amplitude/background nuisances are applied
  // by the caller.
  void predict(const CompiledSequence& seq, const PLTrace& window,
               Eigen::VectorXd& rate, Eigen::MatrixXd& d_rate);

  int n_params() const { return n_params_; }

 private:
  const LevelGraph* graph_;
  Propagator prop_;
  Eigen::VectorXd thermal_;
  std::vector<Eigen::VectorXd> d_emission_;  // emission-weight derivatives
  int n_params_;
};

}  // namespace vbsim
