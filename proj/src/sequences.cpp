#include "vbsim/sequences.hpp"

#include <cmath>
#include <cstdio>

#include "vbsim/errors.hpp"

namespace vbsim {

std::string_view to_string(ElementKind k) {
  switch (k) {
    case ElementKind::Pulse: return "pulse";
    case ElementKind::Dark: return "dark";
    case ElementKind::Wait: return "wait";
    case ElementKind::ResetThermal: return "reset-thermal";
  }
  return "?";
}

ElementKind element_kind_from_string(std::string_view s) {
  if (s == "pulse") return ElementKind::Pulse;
  if (s == "dark") return ElementKind::Dark;
  if (s == "wait") return ElementKind::Wait;
  if (s == "reset-thermal") return ElementKind::ResetThermal;
  throw ValidationError("unknown sequence element kind: " + std::string(s));
}

double PulseSequence::total_duration_ns() const {
  double one = 0.0;
  for (const auto& e : elements) one += e.duration_ns;
  return one * repeat_count;
}

double PulseSequence::period_ns() const {
  if (nominal_period_ns) return *nominal_period_ns;
  return total_duration_ns() / std::max(repeat_count, 1);
}

void PulseSequence::validate() const {
  if (elements.empty()) throw ValidationError("sequence has no elements");
  if (repeat_count < 1) throw ValidationError("repeat_count must be >= 1");
  bool timed = false;
  for (const auto& e : elements) {
    if (!std::isfinite(e.duration_ns) || !std::isfinite(e.power_mw))
      throw ValidationError("non-finite sequence element");
    if (e.kind == ElementKind::ResetThermal) {
      if (e.duration_ns != 0.0)
        throw ValidationError("reset-thermal is instantaneous");
      continue;
    }
    if (e.duration_ns <= 0.0)
      throw ValidationError("element duration must be positive");
    timed = true;
    if (e.kind == ElementKind::Pulse) {
      if (e.power_mw <= 0.0)
        throw ValidationError("pulse power must be positive");
    } else if (e.power_mw != 0.0) {
      throw ValidationError("only pulse elements carry power");
    }
  }
  if (!timed) throw ValidationError("sequence has zero duration");
  if (nominal_period_ns) {
    if (!(*nominal_period_ns > 0.0) || !std::isfinite(*nominal_period_ns))
      throw ValidationError("nominal_period_ns must be positive");
    if (*nominal_period_ns < total_duration_ns() / repeat_count - 1e-9)
      throw ValidationError("nominal period shorter than simulated period");
  }
}

void RecoveryScan::validate() const {
  if (pulse_duration_ns <= 0.0) throw ValidationError("pulse duration must be positive");
  if (power_mw <= 0.0) throw ValidationError("power must be positive");
  if (inter_pair_wait_ns <= 0.0) throw ValidationError("inter-pair wait must be positive");
  // an empty grid is a valid degenerate scan (produces no sequences)
  for (double t : dark_times_ns)
    if (!(t >= 0.0) || !std::isfinite(t))
      throw ValidationError("dark times must be >= 0");
}

std::vector<double> uniform_dark_times(double t_max_ns, int count) {
  if (!(t_max_ns > 0.0)) throw ValidationError("t_max must be positive");
  if (count < 2) throw ValidationError("need at least 2 dark times");
  std::vector<double> out(count);
  for (int i = 0; i < count; ++i)
    out[i] = t_max_ns * static_cast<double>(i) / (count - 1);
  return out;
}

std::vector<PulseSequence> build_recovery_scan(const RecoveryScan& scan) {
  scan.validate();
  std::vector<PulseSequence> out;
  out.reserve(scan.dark_times_ns.size());
  for (double td : scan.dark_times_ns) {
    PulseSequence seq;
    seq.elements.push_back(pulse(scan.pulse_duration_ns, scan.power_mw));
    if (td > 0.0) seq.elements.push_back(dark(td));
    seq.elements.push_back(pulse(scan.pulse_duration_ns, scan.power_mw));
    seq.elements.push_back(wait(scan.inter_pair_wait_ns));
    char buf[64];
    std::snprintf(buf, sizeof buf, "recovery_td%.4gns", td);
    seq.id = buf;
    out.push_back(std::move(seq));
  }
  return out;
}

PulseSequence build_pump_probe(double pulse_ns, double dark_ns, double wait_ns,
                               double power_mw, bool reset,
                               double truncated_wait_ns) {
  PulseSequence seq;
  if (reset) seq.elements.push_back(reset_thermal());
  seq.elements.push_back(pulse(pulse_ns, power_mw));
  if (dark_ns > 0.0) seq.elements.push_back(dark(dark_ns));
  seq.elements.push_back(pulse(pulse_ns, power_mw));
  if (reset) {
    // The reset stands in for the long depolarization wait; simulate only
    // a short tail but keep the true repetition period for photon counting.
    seq.elements.push_back(wait(std::min(wait_ns, truncated_wait_ns)));
    seq.nominal_period_ns = 2.0 * pulse_ns + dark_ns + wait_ns;
  } else {
    seq.elements.push_back(wait(wait_ns));
  }
  seq.id = "pump_probe";
  seq.validate();
  return seq;
}

CompiledSequence compile(const PulseSequence& seq, double rise_ns,
                         std::optional<double> fall_ns) {
  seq.validate();
  if (!(rise_ns >= 0.0) || !std::isfinite(rise_ns))
    throw ValidationError("rise time must be >= 0");
  if (fall_ns && (!(*fall_ns >= 0.0) || !std::isfinite(*fall_ns)))
    throw ValidationError("fall time must be >= 0");

  CompiledSequence out;
  out.profile.rise_time_ns = rise_ns;
  out.profile.fall_time_ns = fall_ns;
  out.profile.initial_power_mw = 0.0;

  double t = 0.0;
  for (int rep = 0; rep < seq.repeat_count; ++rep) {
    for (const auto& e : seq.elements) {
      switch (e.kind) {
        case ElementKind::ResetThermal:
          out.reset_times_ns.push_back(t);
          break;
        case ElementKind::Pulse:
          out.pulse_onsets_ns.push_back(t);
          out.pulse_durations_ns.push_back(e.duration_ns);
          out.profile.segments.push_back({e.duration_ns, e.power_mw});
          t += e.duration_ns;
          break;
        case ElementKind::Dark:
        case ElementKind::Wait:
          out.profile.segments.push_back({e.duration_ns, 0.0});
          t += e.duration_ns;
          break;
      }
    }
  }
  out.total_duration_ns = t;
  out.profile.validate();
  return out;
}

}  // namespace vbsim
