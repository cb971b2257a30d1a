#include "vbsim/serialize.hpp"

#include <unistd.h>

#include <cerrno>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "vbsim/errors.hpp"

namespace vbsim {

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

const json& need(const json& j, const char* key, const char* ctx) {
  auto it = j.find(key);
  if (it == j.end())
    throw ValidationError(std::string(ctx) + ": missing key '" + key + "'");
  return *it;
}

}  // namespace

json graph_to_json(const LevelGraph& graph) {
  json states = json::array();
  for (const auto& s : graph.states()) {
    json st{{"label", s.label}, {"manifold", to_string(s.manifold)}};
    if (s.spin) st["spin"] = *s.spin;
    states.push_back(std::move(st));
  }
  json edges = json::array();
  for (const auto& e : graph.edges())
    edges.push_back({{"from", e.from},
                     {"to", e.to},
                     {"coefficient_mhz", e.coefficient},
                     {"power_exponent", e.power_exponent}});
  return json{{"states", std::move(states)},
              {"edges", std::move(edges)},
              {"emission_weights_mhz", graph.emission_weights()}};
}

LevelGraph graph_from_json(const json& j) {
  std::vector<StateInfo> states;
  for (const auto& st : need(j, "states", "graph")) {
    StateInfo s;
    s.label = need(st, "label", "graph state").get<std::string>();
    s.manifold = manifold_from_string(
        need(st, "manifold", "graph state").get<std::string>());
    if (st.contains("spin")) s.spin = st["spin"].get<int>();
    states.push_back(std::move(s));
  }
  std::vector<RateSpec> edges;
  for (const auto& ed : need(j, "edges", "graph")) {
    RateSpec e;
    e.from = need(ed, "from", "graph edge").get<std::string>();
    e.to = need(ed, "to", "graph edge").get<std::string>();
    e.coefficient = need(ed, "coefficient_mhz", "graph edge").get<double>();
    e.power_exponent = need(ed, "power_exponent", "graph edge").get<int>();
    edges.push_back(std::move(e));
  }
  const auto weights =
      need(j, "emission_weights_mhz", "graph").get<std::vector<double>>();
  return LevelGraph(std::move(states), std::move(edges), weights);
}

json sequence_to_json(const PulseSequence& seq) {
  json elements = json::array();
  for (const auto& e : seq.elements) {
    json el{{"kind", to_string(e.kind)}};
    if (e.kind != ElementKind::ResetThermal) el["duration_ns"] = e.duration_ns;
    if (e.kind == ElementKind::Pulse) el["power_mw"] = e.power_mw;
    elements.push_back(std::move(el));
  }
  json out{{"id", seq.id},
           {"repeat_count", seq.repeat_count},
           {"elements", std::move(elements)}};
  if (seq.nominal_period_ns) out["nominal_period_ns"] = *seq.nominal_period_ns;
  return out;
}

PulseSequence sequence_from_json(const json& j) {
  PulseSequence seq;
  seq.id = j.value("id", std::string{});
  seq.repeat_count = j.value("repeat_count", 1);
  if (j.contains("nominal_period_ns"))
    seq.nominal_period_ns = j["nominal_period_ns"].get<double>();
  for (const auto& el : need(j, "elements", "sequence")) {
    SequenceElement e;
    e.kind = element_kind_from_string(
        need(el, "kind", "sequence element").get<std::string>());
    if (e.kind != ElementKind::ResetThermal)
      e.duration_ns = need(el, "duration_ns", "sequence element").get<double>();
    if (e.kind == ElementKind::Pulse)
      e.power_mw = need(el, "power_mw", "sequence element").get<double>();
    seq.elements.push_back(e);
  }
  seq.validate();
  return seq;
}

json trace_meta_to_json(const TraceMeta& meta) {
  json out{{"id", meta.id},
           {"power_mw", meta.power_mw},
           {"mode", to_string(meta.mode)},
           {"pulse_onsets_ns", meta.pulse_onsets_ns},
           {"pulse_durations_ns", meta.pulse_durations_ns},
           {"period_ns", meta.period_ns},
           {"efficiency", meta.efficiency},
           {"repetitions", meta.repetitions},
           {"rate_scale", meta.rate_scale}};
  if (meta.seed) out["seed"] = *meta.seed;
  return out;
}

TraceMeta trace_meta_from_json(const json& j) {
  TraceMeta meta;
  meta.id = j.value("id", std::string{});
  meta.power_mw = j.value("power_mw", 0.0);
  meta.mode = trace_mode_from_string(j.value("mode", "rate"));
  if (j.contains("pulse_onsets_ns"))
    meta.pulse_onsets_ns = j["pulse_onsets_ns"].get<std::vector<double>>();
  if (j.contains("pulse_durations_ns"))
    meta.pulse_durations_ns =
        j["pulse_durations_ns"].get<std::vector<double>>();
  meta.period_ns = j.value("period_ns", 0.0);
  meta.efficiency = j.value("efficiency", 1.0);
  meta.repetitions = j.value("repetitions", 0LL);
  meta.rate_scale = j.value("rate_scale", 1.0);
  if (j.contains("seed")) meta.seed = j["seed"].get<std::uint64_t>();
  return meta;
}

void save_trace(const PLTrace& trace, const std::string& csv_path) {
  trace.validate();
  std::ostringstream csv;
  csv << (trace.has_sigma() ? "time_ns,value,sigma\n" : "time_ns,value\n");
  for (std::size_t i = 0; i < trace.size(); ++i) {
    csv << fmt17(trace.time_at(i)) << ',' << fmt17(trace.values[i]);
    if (trace.has_sigma()) csv << ',' << fmt17(trace.sigma[i]);
    csv << '\n';
  }
  write_text_atomic(csv_path, csv.str());

  json side = trace_meta_to_json(trace.meta);
  side["t_start_ns"] = trace.t_start_ns;
  side["bin_width_ns"] = trace.bin_width_ns;
  side["n_bins"] = trace.size();
  write_json_atomic(csv_path + ".meta.json", side);
}

PLTrace load_trace(const std::string& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw ValidationError("cannot open trace file: " + csv_path);

  PLTrace tr;
  std::vector<double> times;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header) {  // tolerate files without a header line
      header = false;
      if (line.find("time") != std::string::npos) continue;
    }
    double t = 0, v = 0, s = 0;
    const int k = std::sscanf(line.c_str(), "%lf,%lf,%lf", &t, &v, &s);
    if (k < 2)
      throw ValidationError("malformed trace line in " + csv_path + ": " + line);
    times.push_back(t);
    tr.values.push_back(v);
    if (k >= 3) tr.sigma.push_back(s);
  }
  if (tr.values.empty())
    throw ValidationError("trace file has no data: " + csv_path);
  if (!tr.sigma.empty() && tr.sigma.size() != tr.values.size())
    throw ValidationError("inconsistent sigma column in " + csv_path);

  const std::string side_path = csv_path + ".meta.json";
  if (std::filesystem::exists(side_path)) {
    const json side = read_json(side_path);
    tr.meta = trace_meta_from_json(side);
    tr.t_start_ns = need(side, "t_start_ns", "trace sidecar").get<double>();
    tr.bin_width_ns = need(side, "bin_width_ns", "trace sidecar").get<double>();
  } else if (times.size() >= 2) {
    tr.bin_width_ns = times[1] - times[0];
    tr.t_start_ns = times[0] - 0.5 * tr.bin_width_ns;
  } else {
    throw ValidationError("single-bin trace without sidecar: " + csv_path);
  }
  // cross-check the time axis against the declared binning
  for (std::size_t i = 0; i < times.size(); ++i)
    if (std::abs(times[i] - tr.time_at(i)) >
        1e-6 * std::max(1.0, std::abs(times[i])))
      throw ValidationError("non-uniform time axis in " + csv_path);
  tr.validate();
  return tr;
}

void save_recovery_curve(const RecoveryCurve& curve,
                         const std::string& csv_path) {
  curve.validate();
  std::ostringstream csv;
  csv << (curve.sigma.empty() ? "dark_time_ns,ratio\n"
                              : "dark_time_ns,ratio,sigma\n");
  for (std::size_t i = 0; i < curve.ratios.size(); ++i) {
    csv << fmt17(curve.dark_times_ns[i]) << ',' << fmt17(curve.ratios[i]);
    if (!curve.sigma.empty()) csv << ',' << fmt17(curve.sigma[i]);
    csv << '\n';
  }
  write_text_atomic(csv_path, csv.str());
  write_json_atomic(csv_path + ".meta.json",
                    json{{"power_mw", curve.power_mw}, {"id", curve.id}});
}

RecoveryCurve load_recovery_curve(const std::string& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw ValidationError("cannot open recovery file: " + csv_path);
  RecoveryCurve c;
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header) {
      header = false;
      if (line.find("dark") != std::string::npos ||
          line.find("time") != std::string::npos)
        continue;
    }
    double t = 0, r = 0, s = 0;
    const int k = std::sscanf(line.c_str(), "%lf,%lf,%lf", &t, &r, &s);
    if (k < 2)
      throw ValidationError("malformed recovery line in " + csv_path + ": " +
                            line);
    c.dark_times_ns.push_back(t);
    c.ratios.push_back(r);
    if (k >= 3) c.sigma.push_back(s);
  }
  if (!c.sigma.empty() && c.sigma.size() != c.ratios.size())
    throw ValidationError("inconsistent sigma column in " + csv_path);
  const std::string side_path = csv_path + ".meta.json";
  if (std::filesystem::exists(side_path)) {
    const json side = read_json(side_path);
    c.power_mw = side.value("power_mw", 0.0);
    c.id = side.value("id", std::string{});
  }
  c.validate();
  return c;
}

json fit_result_to_json(const FitResult& fit) {
  json params = json::array();
  for (std::size_t j = 0; j < fit.names.size(); ++j) {
    const auto i = static_cast<Eigen::Index>(j);
    params.push_back(
        {{"name", fit.names[j]},
         {"value", fit.values[i]},
         {"sigma", fit.sigma[i]},
         {"formatted", format_value_uncertainty(fit.values[i], fit.sigma[i])}});
  }
  json cov = json::array();
  for (Eigen::Index a = 0; a < fit.covariance.rows(); ++a) {
    json row = json::array();
    for (Eigen::Index b = 0; b < fit.covariance.cols(); ++b)
      row.push_back(fit.covariance(a, b));
    cov.push_back(std::move(row));
  }
  return json{{"parameters", std::move(params)},
              {"covariance", std::move(cov)},
              {"n_physics", fit.n_physics},
              {"chi2", fit.chi2},
              {"dof", fit.dof},
              {"reduced_chi2", fit.reduced_chi2},
              {"converged", fit.diagnostics.converged},
              {"stop_reason", fit.diagnostics.stop_reason},
              {"iterations", fit.diagnostics.iterations},
              {"n_evaluations", fit.diagnostics.n_evaluations},
              {"start_chi2", fit.start_chi2},
              {"best_start", fit.best_start}};
}

json recovery_fit_to_json(const RecoveryFit& fit) {
  json cov = json::array();
  for (int a = 0; a < 3; ++a) {
    json row = json::array();
    for (int b = 0; b < 3; ++b) row.push_back(fit.covariance(a, b));
    cov.push_back(std::move(row));
  }
  return json{
      {"tau_s_ns", fit.tau_ns},
      {"tau_s_sigma_ns", fit.tau_sigma},
      {"tau_s", format_value_uncertainty(fit.tau_ns, fit.tau_sigma)},
      {"r0", fit.r0},
      {"r0_sigma", fit.r0_sigma},
      {"r_inf", fit.r_inf},
      {"r_inf_sigma", fit.r_inf_sigma},
      {"chi2", fit.chi2},
      {"dof", fit.dof},
      {"covariance", std::move(cov)},  // order: r_inf, r0, tau
      {"converged", fit.diagnostics.converged},
      {"stop_reason", fit.diagnostics.stop_reason},
      {"iterations", fit.diagnostics.iterations}};
}

void write_text_atomic(const std::string& path, std::string_view content) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.parent_path() /
                       (target.filename().string() + ".tmp" +
                        std::to_string(::getpid()));
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot write file: " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw ValidationError("short write: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) {
    fs::remove(tmp);
    throw ValidationError("cannot rename into place: " + path + ": " +
                          ec.message());
  }
}

void write_json_atomic(const std::string& path, const json& j) {
  write_text_atomic(path, j.dump(2) + "\n");
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open file: " + path);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json(const std::string& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ValidationError("bad JSON in " + path + ": " + e.what());
  }
}

std::uint64_t fnv1a_hash(std::string_view data) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace vbsim
