#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vbsim/pipeline.hpp"
#include "vbsim/sequences.hpp"
#include "vbsim/signal.hpp"

namespace vbsim {

// --- generic bound-constrained Levenberg-Marquardt --------------------

struct LMOptions {
  int max_iterations = 300;
  // converged once the mean relative chi2 decrease per iteration, taken
  // over a short window, falls below this (a plateau, however the
  // damping oscillates)
  double ftol = 1e-8;
  double xtol = 1e-10;  // relative step size
  double gtol = 1e-12;  // gradient inf-norm
  double lambda0 = 1e-3;
  double lambda_up = 10.0;    // first reject multiplier (doubles per reject)
  double lambda_down = 0.25;  // hardest shrink a well-modeled accept earns
  double lambda_max = 1e12;
  bool acceleration = true;   // geodesic (2nd order) step correction
};

struct LMDiagnostics {
  int iterations = 0;
  int n_evaluations = 0;
  double chi2 = 0.0;
  double gradient_inf = 0.0;
  bool converged = false;
  std::string stop_reason;
};

class LeastSquaresProblem {
 public:
  virtual ~LeastSquaresProblem() = default;
  virtual int n_residuals() const = 0;
  virtual void eval(const Eigen::VectorXd& u, Eigen::VectorXd& r) = 0;
  virtual void eval_with_jacobian(const Eigen::VectorXd& u, Eigen::VectorXd& r,
                                  Eigen::MatrixXd& jac) = 0;
};

// Damped Gauss-Newton with Marquardt scaling and box projection; only
// chi2-decreasing steps are accepted. `u` holds the start and is left at
// the best point found.
LMDiagnostics lm_minimize(LeastSquaresProblem& problem, Eigen::VectorXd& u,
                          const Eigen::VectorXd& lower,
                          const Eigen::VectorXd& upper, const LMOptions& opts);

// --- model templates ---------------------------------------------------

struct FitParameter {
  std::string name;
  double initial = 0.0;
  double lower = 0.0;
  double upper = 0.0;
  bool log_scale = true;  // optimize ln(value)
  bool fixed = false;
};

// A rate model with named scalar parameters. Edge coefficients and
// emission weights are linear in each parameter, so the derivative
// graphs are parameter-independent (built from unit basis values).
class RateModelTemplate {
 public:
  virtual ~RateModelTemplate() = default;
  virtual std::string_view name() const = 0;
  virtual std::vector<FitParameter> parameters() const = 0;
  virtual LevelGraph build(std::span<const double> values) const = 0;
  virtual LevelGraph derivative_graph(int j) const = 0;
};

class SevenLevelTemplate final : public RateModelTemplate {
 public:
  explicit SevenLevelTemplate(std::optional<double> t1_us = {})
      : t1_us_(t1_us) {}
  std::string_view name() const override { return "7level"; }
  std::vector<FitParameter> parameters() const override;
  LevelGraph build(std::span<const double> values) const override;
  LevelGraph derivative_graph(int j) const override;

 private:
  std::optional<double> t1_us_;
};

class NineLevelTemplate final : public RateModelTemplate {
 public:
  explicit NineLevelTemplate(std::optional<double> t1_us = {},
                             double aux_detection_factor = 0.0)
      : t1_us_(t1_us), aux_factor_(aux_detection_factor) {}
  std::string_view name() const override { return "9level"; }
  std::vector<FitParameter> parameters() const override;
  LevelGraph build(std::span<const double> values) const override;
  LevelGraph derivative_graph(int j) const override;

 private:
  std::optional<double> t1_us_;
  double aux_factor_;
};

std::unique_ptr<RateModelTemplate> make_template(std::string_view name,
                                                 std::optional<double> t1_us = {});

// --- joint trace fitting -----------------------------------------------

enum class JacobianMode { ForwardSensitivity, ForwardDiff, CentralDiff };

std::string_view to_string(JacobianMode m);
JacobianMode jacobian_mode_from_string(std::string_view s);

struct FitDataset {
  PLTrace data;              // sigma (when present) defines the weights
  CompiledSequence sequence;
  std::string label;
};

struct FitOptions {
  JacobianMode jacobian = JacobianMode::ForwardSensitivity;
  int n_starts = 1;          // extra starts drawn log-uniform in bounds
  std::uint64_t seed = 0;
  bool fit_background = false;
  LMOptions lm;
};

struct FitResult {
  std::vector<std::string> names;  // physics params, then nuisances
  Eigen::VectorXd values;          // natural units
  Eigen::VectorXd sigma;           // 0 for fixed parameters
  Eigen::MatrixXd covariance;      // natural units, reduced-chi2 scaled
  double chi2 = 0.0;
  int dof = 0;
  double reduced_chi2 = 0.0;
  int n_physics = 0;
  Eigen::VectorXd residuals;       // weighted, at the optimum
  LMDiagnostics diagnostics;
  std::vector<double> start_chi2;  // per start (best accepted)
  int best_start = 0;

  double value_of(std::string_view name) const;
  double sigma_of(std::string_view name) const;
  int index_of(std::string_view name) const;
};

// Joint weighted fit of one rate model to several traces. Each dataset
// carries a free amplitude (log-scale) and, optionally, a constant
// background >= 0. Throws FitError when no start converges.
FitResult fit_model(const RateModelTemplate& tmpl,
                    const std::vector<FitParameter>& params,
                    const std::vector<FitDataset>& datasets,
                    const FitOptions& opts);

// Residual Jacobian of that problem at the parameter initials (with
// amplitudes estimated from the data, backgrounds zero). Columns follow
// the internal layout: free physics parameters, then nuisances. The
// point is identical across modes, so this is the cross-check between
// the exact sensitivity path and finite differences.
Eigen::MatrixXd fit_jacobian(const RateModelTemplate& tmpl,
                             const std::vector<FitParameter>& params,
                             const std::vector<FitDataset>& datasets,
                             JacobianMode mode, bool fit_background = false);

// --- recovery-curve fitting ---------------------------------------------

// R(t) = r_inf - (r_inf - r0) exp(-t / tau)
struct RecoveryFit {
  double tau_ns = 0.0;
  double r0 = 0.0;
  double r_inf = 0.0;
  double tau_sigma = 0.0;
  double r0_sigma = 0.0;
  double r_inf_sigma = 0.0;
  double chi2 = 0.0;
  int dof = 0;
  Eigen::Matrix3d covariance;  // order: r_inf, r0, tau
  LMDiagnostics diagnostics;
};

RecoveryFit fit_recovery(const RecoveryCurve& curve,
                         const LMOptions& lm = {});

// --- derived quantities --------------------------------------------------

struct LifetimeEstimate {
  double tau_ns = 0.0;
  double sigma_ns = 0.0;
};

// tau_s = 1000 / (kappa0 + 2 kappa1), first-order error propagation.
LifetimeEstimate propagate_lifetime(double kappa0_mhz, double kappa1_mhz,
                                    const Eigen::Matrix2d& covariance);
LifetimeEstimate lifetime_from_fit(const FitResult& fit);

// Wald-Wolfowitz runs test on residual signs; one-sided against too few
// runs (systematic model mismatch).
struct RunsTest {
  int n_runs = 0;
  int n_positive = 0;
  int n_negative = 0;
  double z = 0.0;
  double p_value = 1.0;
};

RunsTest runs_test(std::span<const double> residuals);

// "23(1)": uncertainty rounded to one significant digit, value to match.
std::string format_value_uncertainty(double value, double sigma);

}  // namespace vbsim
