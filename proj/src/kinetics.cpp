#include "vbsim/kinetics.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include <unsupported/Eigen/MatrixFunctions>

namespace vbsim {

std::string_view to_string(Manifold m) {
  switch (m) {
    case Manifold::TripletGround: return "triplet-ground";
    case Manifold::TripletExcited: return "triplet-excited";
    case Manifold::Singlet: return "singlet";
    case Manifold::AuxGround: return "aux-ground";
    case Manifold::AuxExcited: return "aux-excited";
  }
  return "?";
}

Manifold manifold_from_string(std::string_view s) {
  if (s == "triplet-ground") return Manifold::TripletGround;
  if (s == "triplet-excited") return Manifold::TripletExcited;
  if (s == "singlet") return Manifold::Singlet;
  if (s == "aux-ground") return Manifold::AuxGround;
  if (s == "aux-excited") return Manifold::AuxExcited;
  throw ValidationError("unknown manifold: " + std::string(s));
}

LevelGraph::LevelGraph(std::vector<StateInfo> states, std::vector<RateSpec> edges,
                       std::vector<double> emission_weights)
    : states_(std::move(states)),
      edges_(std::move(edges)),
      weights_(std::move(emission_weights)) {
  validate();
  build_pieces();
}

int LevelGraph::index_of(std::string_view label) const {
  for (int i = 0; i < size(); ++i)
    if (states_[static_cast<size_t>(i)].label == label) return i;
  return -1;
}

int LevelGraph::require_index(std::string_view label) const {
  const int i = index_of(label);
  if (i < 0) throw ValidationError("no such state: " + std::string(label));
  return i;
}

std::vector<int> LevelGraph::indices_of(Manifold m) const {
  std::vector<int> out;
  for (int i = 0; i < size(); ++i)
    if (states_[static_cast<size_t>(i)].manifold == m) out.push_back(i);
  return out;
}

bool LevelGraph::has_emitter() const {
  return std::any_of(weights_.begin(), weights_.end(),
                     [](double w) { return w > 0.0; });
}

void LevelGraph::validate() const {
  if (states_.empty()) throw ValidationError("LevelGraph: no states");
  std::set<std::string> seen;
  for (const auto& s : states_) {
    if (s.label.empty()) throw ValidationError("LevelGraph: empty state label");
    if (!seen.insert(s.label).second)
      throw ValidationError("LevelGraph: duplicate state label '" + s.label + "'");
    if (s.spin && *s.spin != 0 && *s.spin != 1 && *s.spin != -1)
      throw ValidationError("LevelGraph: spin label of '" + s.label +
                            "' must be 0, +1 or -1");
  }
  for (const auto& e : edges_) {
    if (index_of(e.from) < 0 || index_of(e.to) < 0)
      throw ValidationError("LevelGraph: edge endpoint missing: " + e.from +
                            " -> " + e.to);
    if (e.from == e.to)
      throw ValidationError("LevelGraph: self-edge on '" + e.from + "'");
    if (!(e.coefficient >= 0.0) || !std::isfinite(e.coefficient))
      throw ValidationError("LevelGraph: negative or non-finite rate on " +
                            e.from + " -> " + e.to);
    if (e.power_exponent < 0 || e.power_exponent > 2)
      throw ValidationError("LevelGraph: power exponent must be 0, 1 or 2");
  }
  if (weights_.size() != states_.size())
    throw ValidationError("LevelGraph: emission weight count != state count");
  for (double w : weights_)
    if (!(w >= 0.0) || !std::isfinite(w))
      throw ValidationError("LevelGraph: emission weights must be >= 0");
}

void LevelGraph::build_pieces() {
  const int n = size();
  for (auto& p : pieces_) p = Eigen::MatrixXd::Zero(n, n);
  for (const auto& e : edges_) {
    const int i = index_of(e.from);
    const int j = index_of(e.to);
    auto& m = pieces_[static_cast<size_t>(e.power_exponent)];
    m(j, i) += e.coefficient;
    m(i, i) -= e.coefficient;
  }
}

void SevenLevelRates::validate() const {
  const double all[] = {k_p0, k_r, gamma0, gamma1, kappa0, kappa1};
  for (double r : all)
    if (!(r >= 0.0) || !std::isfinite(r))
      throw ValidationError("SevenLevelRates: rates must be >= 0 and finite");
  if (t1_us && !(*t1_us > 0.0))
    throw ValidationError("SevenLevelRates: T1 must be > 0 when present");
}

void NineLevelRates::validate() const {
  base.validate();
  const double all[] = {k_di, k_dr, k_p2_0, k_i1_0, k_i2_0, k_r2, k_nr};
  for (double r : all)
    if (!(r >= 0.0) || !std::isfinite(r))
      throw ValidationError("NineLevelRates: rates must be >= 0 and finite");
  if (!(aux_detection_factor >= 0.0) || !(aux_detection_factor <= 1.0))
    throw ValidationError("NineLevelRates: aux detection factor must be in [0,1]");
}

SevenLevelRates reference_seven_level_rates() {
  SevenLevelRates r;
  r.k_p0 = 2.98;
  r.k_r = 0.091;
  r.gamma0 = 780.0;
  r.gamma1 = 1900.0;
  r.kappa0 = 37.0;
  r.kappa1 = 3.4;
  return r;
}

NineLevelRates reference_nine_level_rates() {
  NineLevelRates r;
  r.base.k_p0 = 5.4;
  r.base.k_r = 0.091;
  r.base.gamma0 = 740.0;
  r.base.gamma1 = 1850.0;
  r.base.kappa0 = 56.0;
  r.base.kappa1 = 0.33;
  r.k_di = 0.0019;
  r.k_dr = 1.02;
  r.k_p2_0 = 48.0;
  r.k_i1_0 = 0.034;
  r.k_i2_0 = 0.0029;
  r.k_r2 = 0.0050;
  r.k_nr = 240.0;
  return r;
}

namespace {

std::vector<StateInfo> seven_level_states() {
  using namespace labels;
  return {
      {std::string(g0), Manifold::TripletGround, 0},
      {std::string(gp), Manifold::TripletGround, 1},
      {std::string(gm), Manifold::TripletGround, -1},
      {std::string(e0), Manifold::TripletExcited, 0},
      {std::string(ep), Manifold::TripletExcited, 1},
      {std::string(em), Manifold::TripletExcited, -1},
      {std::string(singlet), Manifold::Singlet, std::nullopt},
  };
}

void append_seven_level_edges(const SevenLevelRates& r, std::vector<RateSpec>& e) {
  using namespace labels;
  const std::string_view g[] = {g0, gp, gm};
  const std::string_view x[] = {e0, ep, em};
  for (int i = 0; i < 3; ++i) {
    e.push_back({std::string(g[i]), std::string(x[i]), r.k_p0, 1});
    e.push_back({std::string(x[i]), std::string(g[i]), r.k_r, 0});
  }
  e.push_back({std::string(e0), std::string(singlet), r.gamma0, 0});
  e.push_back({std::string(ep), std::string(singlet), r.gamma1, 0});
  e.push_back({std::string(em), std::string(singlet), r.gamma1, 0});
  e.push_back({std::string(singlet), std::string(g0), r.kappa0, 0});
  e.push_back({std::string(singlet), std::string(gp), r.kappa1, 0});
  e.push_back({std::string(singlet), std::string(gm), r.kappa1, 0});
  if (r.t1_us) {
    // Symmetric pairwise mixing at 1/(3 T1) so that sublevel population
    // differences decay with time constant T1. 1/us == MHz.
    const double k = 1.0 / (3.0 * *r.t1_us);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        if (i != j) e.push_back({std::string(g[i]), std::string(g[j]), k, 0});
  }
}

}  // namespace

LevelGraph build_preset_7level(const SevenLevelRates& rates) {
  rates.validate();
  auto states = seven_level_states();
  std::vector<RateSpec> edges;
  append_seven_level_edges(rates, edges);
  std::vector<double> w(states.size(), 0.0);
  w[3] = w[4] = w[5] = rates.k_r;
  return LevelGraph(std::move(states), std::move(edges), std::move(w));
}

LevelGraph build_preset_9level(const NineLevelRates& rates) {
  rates.validate();
  using namespace labels;
  auto states = seven_level_states();
  states.push_back({std::string(aux_g), Manifold::AuxGround, std::nullopt});
  states.push_back({std::string(aux_e), Manifold::AuxExcited, std::nullopt});

  std::vector<RateSpec> edges;
  append_seven_level_edges(rates.base, edges);

  edges.push_back({std::string(aux_g), std::string(aux_e), rates.k_p2_0, 1});
  edges.push_back({std::string(aux_e), std::string(aux_g), rates.k_r2, 0});
  edges.push_back({std::string(aux_e), std::string(aux_g), rates.k_nr, 0});
  const std::string_view g[] = {g0, gp, gm};
  const std::string_view x[] = {e0, ep, em};
  for (int i = 0; i < 3; ++i) {
    edges.push_back({std::string(x[i]), std::string(aux_g), rates.k_i1_0, 2});
    edges.push_back({std::string(aux_e), std::string(g[i]), rates.k_i2_0 / 3.0, 1});
    edges.push_back({std::string(aux_g), std::string(g[i]), rates.k_dr / 3.0, 0});
  }
  edges.push_back({std::string(singlet), std::string(aux_g), rates.k_di, 0});

  std::vector<double> w(states.size(), 0.0);
  w[3] = w[4] = w[5] = rates.base.k_r;
  w[8] = rates.aux_detection_factor * rates.k_r2;
  return LevelGraph(std::move(states), std::move(edges), std::move(w));
}

Eigen::MatrixXd build_rate_matrix(const LevelGraph& graph, double power_mw) {
  if (!(power_mw >= 0.0) || !std::isfinite(power_mw))
    throw ValidationError("build_rate_matrix: power must be >= 0");
  const auto& p = graph.generator_pieces();
  return p[0] + power_mw * p[1] + power_mw * power_mw * p[2];
}

double analytic_singlet_lifetime(double kappa0_mhz, double kappa1_mhz) {
  if (kappa0_mhz < 0.0 || kappa1_mhz < 0.0)
    throw ValidationError("analytic_singlet_lifetime: rates must be >= 0");
  const double total = kappa0_mhz + 2.0 * kappa1_mhz;
  if (!(total > 0.0))
    throw ValidationError(
        "analytic_singlet_lifetime: kappa0 + 2*kappa1 must be > 0");
  return 1000.0 / total;
}

Eigen::VectorXd thermal_state(const LevelGraph& graph) {
  const auto ground = graph.indices_of(Manifold::TripletGround);
  if (ground.empty())
    throw ValidationError("thermal_state: graph has no triplet-ground states");
  Eigen::VectorXd p = Eigen::VectorXd::Zero(graph.size());
  for (int i : ground) p(i) = 1.0 / static_cast<double>(ground.size());
  return p;
}

namespace {

// Long-time limit of exp(M t) p0 by repeated squaring of the propagator.
Eigen::VectorXd relax_to_limit(const Eigen::MatrixXd& m, Eigen::VectorXd p) {
  const double scale = m.cwiseAbs().maxCoeff();
  if (scale == 0.0) return p;
  Eigen::MatrixXd a = (m * (1.0 / scale)).exp();
  Eigen::VectorXd prev = a * p;
  for (int k = 0; k < 120; ++k) {
    a = a * a;
    Eigen::VectorXd next = a * p;
    if ((next - prev).cwiseAbs().maxCoeff() < 1e-14) return next;
    prev = std::move(next);
  }
  return prev;
}

SteadyState finalize_steady(const Eigen::MatrixXd& m, Eigen::VectorXd p,
                            bool degenerate) {
  const double sum = p.sum();
  if (!(std::abs(sum) > 1e-300))
    throw NumericalError("steady_state: kernel vector has zero mass");
  p /= sum;
  if (p.minCoeff() < -1e-9)
    throw NumericalError("steady_state: no nonnegative kernel vector found");
  p = p.cwiseMax(0.0);
  p /= p.sum();
  SteadyState out;
  out.populations = std::move(p);
  out.degenerate = degenerate;
  out.residual = (m * out.populations).cwiseAbs().maxCoeff();
  return out;
}

SteadyState steady_state_impl(const Eigen::MatrixXd& m,
                              const Eigen::VectorXd& seed) {
  const int n = static_cast<int>(m.rows());
  if (m.cols() != n) throw ValidationError("steady_state: matrix not square");
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  const double tol =
      std::max(sv(0), 1.0) * n * std::numeric_limits<double>::epsilon() * 100.0;
  int kernel_dim = 0;
  for (int i = 0; i < n; ++i)
    if (sv(i) <= tol) ++kernel_dim;
  if (kernel_dim <= 0)
    throw NumericalError("steady_state: generator has no kernel vector");
  if (kernel_dim == 1)
    return finalize_steady(m, svd.matrixV().col(n - 1), false);
  return finalize_steady(m, relax_to_limit(m, seed), true);
}

}  // namespace

SteadyState steady_state(const Eigen::MatrixXd& generator) {
  const int n = static_cast<int>(generator.rows());
  const Eigen::VectorXd uniform =
      Eigen::VectorXd::Constant(n, 1.0 / static_cast<double>(n));
  return steady_state_impl(generator, uniform);
}

SteadyState steady_state(const LevelGraph& graph, double power_mw) {
  const Eigen::MatrixXd m = build_rate_matrix(graph, power_mw);
  return steady_state_impl(m, thermal_state(graph));
}

}  // namespace vbsim
