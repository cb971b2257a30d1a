#include "vbsim/pipeline.hpp"

#include <cmath>

#include "vbsim/errors.hpp"

namespace vbsim {

PLTrace simulate_sequence(const LevelGraph& graph, const PulseSequence& seq,
                          const SimulateOptions& opts) {
  const CompiledSequence cs =
      compile(seq, opts.rise_time_ns, opts.fall_time_ns);
  SynthesisOptions syn;
  syn.bin_width_ns = opts.bin_width_ns;
  syn.rate_scale = opts.rate_scale;
  syn.background_rate_mhz = opts.background_rate_mhz;
  syn.id = seq.id;
  PLTrace tr = synthesize_trace(graph, cs, syn);
  tr.meta.period_ns = seq.period_ns();  // nominal period drives averaging
  return tr;
}

std::vector<PLTrace> simulate_recovery_scan(
    const LevelGraph& graph, const RecoveryScan& scan,
    const SimulateOptions& opts, const std::optional<NoiseOptions>& noise) {
  const auto seqs = build_recovery_scan(scan);
  std::vector<PLTrace> out;
  out.reserve(seqs.size());
  std::uint64_t k = 0;
  for (const auto& seq : seqs) {
    PLTrace tr = simulate_sequence(graph, seq, opts);
    if (noise) {
      NoiseOptions n = *noise;
      n.seed = noise->seed + k++;
      tr = add_shot_noise(tr, n);
    }
    out.push_back(std::move(tr));
  }
  return out;
}

ModelPredictor::ModelPredictor(
    const LevelGraph& graph,
    std::span<const LevelGraph* const> derivative_graphs)
    : graph_(&graph),
      prop_(graph, derivative_graphs),
      thermal_(thermal_state(graph)),
      n_params_(static_cast<int>(derivative_graphs.size())) {
  d_emission_.reserve(derivative_graphs.size());
  for (const LevelGraph* dg : derivative_graphs)
    d_emission_.push_back(dg->emission_vector());
}

void ModelPredictor::predict(const CompiledSequence& seq,
                             const PLTrace& window, Eigen::VectorXd& rate,
                             Eigen::MatrixXd& d_rate) {
  const double w = window.bin_width_ns;
  if (!(w > 0.0)) throw ValidationError("window bin width must be positive");
  const double first_f = window.t_start_ns / w;
  const auto first = static_cast<long long>(std::llround(first_f));
  if (std::abs(first_f - static_cast<double>(first)) > 1e-6 || first < 0)
    throw ValidationError("window is not aligned to the sequence bin grid");
  const auto count = static_cast<long long>(window.size());
  if (static_cast<double>(first + count) * w > seq.total_duration_ns + 1e-6)
    throw ValidationError("window extends past the sequence");

  const Eigen::VectorXd& em = graph_->emission_vector();
  // Edge samples first .. first+count inclusive.
  Eigen::VectorXd e_rate(count + 1);
  Eigen::MatrixXd e_sens(count + 1, n_params_);
  long long idx = 0;
  propagate_events(prop_, *graph_, seq.profile, seq.reset_times_ns, thermal_,
                   w, [&](const StepSample& s) {
                     const long long j = idx++;
                     if (j < first || j > first + count) return;
                     e_rate[j - first] = em.dot(s.population);
                     // chain rule: the emission weights themselves may
                     // depend on the parameter (radiative rate)
                     for (int p = 0; p < n_params_; ++p)
                       e_sens(j - first, p) =
                           em.dot(s.sensitivities[p]) +
                           d_emission_[p].dot(s.population);
                   });
  if (idx < first + count + 1)
    throw NumericalError("propagation produced too few samples");

  rate.resize(count);
  d_rate.resize(count, n_params_);
  for (long long k = 0; k < count; ++k) {
    rate[k] = 0.5 * (e_rate[k] + e_rate[k + 1]);
    d_rate.row(k) = 0.5 * (e_sens.row(k) + e_sens.row(k + 1));
  }
}

}  // namespace vbsim
