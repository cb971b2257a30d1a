#pragma once

#include <Eigen/Dense>
#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "vbsim/errors.hpp"

namespace vbsim {

// Unit conventions used throughout: time in ns, rates in MHz, laser power
// in mW. rate[MHz] * time[ns] * rate_time_scale is dimensionless.
inline constexpr double rate_time_scale = 1e-3;

enum class Manifold {
  TripletGround,
  TripletExcited,
  Singlet,
  AuxGround,
  AuxExcited,
};

std::string_view to_string(Manifold m);
Manifold manifold_from_string(std::string_view s);

struct StateInfo {
  std::string label;
  Manifold manifold = Manifold::TripletGround;
  std::optional<int> spin;  // m_s in {0,+1,-1}, or unset (singlet / aux)
};

// One directed transition. coefficient is in MHz for power_exponent 0,
// MHz/mW for exponent 1 and MHz/mW^2 for exponent 2.
struct RateSpec {
  std::string from;
  std::string to;
  double coefficient = 0.0;
  int power_exponent = 0;
};

// A multi-level rate model: states, power-dependent rate edges, and
// per-state emission weights (detected photons per unit population per
// unit time, MHz). Immutable after construction; construction validates.
class LevelGraph {
 public:
  LevelGraph(std::vector<StateInfo> states, std::vector<RateSpec> edges,
             std::vector<double> emission_weights);

  const std::vector<StateInfo>& states() const { return states_; }
  const std::vector<RateSpec>& edges() const { return edges_; }
  const std::vector<double>& emission_weights() const { return weights_; }
  Eigen::Map<const Eigen::VectorXd> emission_vector() const {
    return {weights_.data(), static_cast<Eigen::Index>(weights_.size())};
  }

  int size() const { return static_cast<int>(states_.size()); }
  int index_of(std::string_view label) const;  // -1 when absent
  int require_index(std::string_view label) const;
  std::vector<int> indices_of(Manifold m) const;
  bool has_emitter() const;

  // Generator split by power exponent: M(P) = piece[0] + P*piece[1] +
  // P^2*piece[2], all in MHz, column convention (M[to][from]).
  const std::array<Eigen::MatrixXd, 3>& generator_pieces() const {
    return pieces_;
  }

 private:
  void validate() const;
  void build_pieces();

  std::vector<StateInfo> states_;
  std::vector<RateSpec> edges_;
  std::vector<double> weights_;
  std::array<Eigen::MatrixXd, 3> pieces_;
};

// Rates of the 7-level description: spin triplet ground/excited manifolds
// plus a metastable singlet shelf.
struct SevenLevelRates {
  double k_p0 = 0.0;    // optical pumping, MHz/mW
  double k_r = 0.0;     // radiative decay, MHz
  double gamma0 = 0.0;  // ISC from excited m_s=0, MHz
  double gamma1 = 0.0;  // ISC from each excited m_s=+-1, MHz
  double kappa0 = 0.0;  // singlet -> ground m_s=0, MHz
  double kappa1 = 0.0;  // singlet -> each ground m_s=+-1, MHz
  std::optional<double> t1_us;  // ground-sublevel mixing time, us

  void validate() const;
};

// 7-level rates plus coupling to an auxiliary 2-level manifold (candidate
// neutral charge state).
struct NineLevelRates {
  SevenLevelRates base;
  double k_di = 0.0;    // dark conversion singlet -> aux ground, MHz
  double k_dr = 0.0;    // dark recombination aux ground -> triplet ground, MHz
  double k_p2_0 = 0.0;  // aux pumping, MHz/mW
  double k_i1_0 = 0.0;  // photoconversion, MHz/mW^2
  double k_i2_0 = 0.0;  // photorecombination, MHz/mW
  double k_r2 = 0.0;    // aux radiative decay, MHz
  double k_nr = 0.0;    // aux non-radiative decay, MHz
  // Fraction of aux-excited emission falling inside the detection band.
  double aux_detection_factor = 0.0;

  void validate() const;
};

// Bundled reference values (single sub-micron flake, room temperature).
SevenLevelRates reference_seven_level_rates();
NineLevelRates reference_nine_level_rates();

LevelGraph build_preset_7level(const SevenLevelRates& rates);
LevelGraph build_preset_9level(const NineLevelRates& rates);

// Generator matrix at the given laser power: M[j][i] = sum of rates i->j,
// diagonal = -(total out-rate). Column sums are exactly zero.
Eigen::MatrixXd build_rate_matrix(const LevelGraph& graph, double power_mw);

// Metastable singlet lifetime 1000/(kappa0 + 2*kappa1), in ns.
double analytic_singlet_lifetime(double kappa0_mhz, double kappa1_mhz);

// Room-temperature thermal population: 1/3 on each ground triplet
// sublevel, zero elsewhere.
Eigen::VectorXd thermal_state(const LevelGraph& graph);

struct SteadyState {
  Eigen::VectorXd populations;
  bool degenerate = false;  // generator kernel was multi-dimensional
  double residual = 0.0;    // ||M p||_inf
};

// Normalized nonnegative kernel vector of a generator matrix. When the
// kernel is multi-dimensional the matrix-only overload relaxes a uniform
// distribution, the graph overload a thermal one (the component reachable
// from the triplet ground manifold), and flags degeneracy.
SteadyState steady_state(const Eigen::MatrixXd& generator);
SteadyState steady_state(const LevelGraph& graph, double power_mw);

// Canonical state labels used by the presets.
namespace labels {
inline constexpr std::string_view g0 = "g0";
inline constexpr std::string_view gp = "g+1";
inline constexpr std::string_view gm = "g-1";
inline constexpr std::string_view e0 = "e0";
inline constexpr std::string_view ep = "e+1";
inline constexpr std::string_view em = "e-1";
inline constexpr std::string_view singlet = "singlet";
inline constexpr std::string_view aux_g = "aux-g";
inline constexpr std::string_view aux_e = "aux-e";
}  // namespace labels

}  // namespace vbsim
