#include "vbsim/workbench.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <mutex>
#include <ostream>
#include <thread>

#include "vbsim/errors.hpp"
#include "vbsim/inference.hpp"
#include "vbsim/pipeline.hpp"
#include "vbsim/serialize.hpp"

namespace vbsim {

namespace fs = std::filesystem;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw ValidationError(msg); }

std::string keypath(const std::string& ctx, const std::string& key) {
  return ctx.empty() ? key : ctx + "." + key;
}

void check_keys(const json& j, const std::string& ctx,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    fail((ctx.empty() ? std::string("config") : ctx) + " must be an object");
  for (const auto& item : j.items()) {
    const auto& k = item.key();
    if (std::none_of(allowed.begin(), allowed.end(),
                     [&](const char* a) { return k == a; }))
      fail("unknown config key '" + keypath(ctx, k) + "'");
  }
}

double get_num(const json& j, const char* key, const std::string& ctx) {
  auto it = j.find(key);
  if (it == j.end()) fail("missing config key '" + keypath(ctx, key) + "'");
  if (!it->is_number()) fail("'" + keypath(ctx, key) + "' must be a number");
  return it->get<double>();
}

double opt_num(const json& j, const char* key, const std::string& ctx,
               double def) {
  auto it = j.find(key);
  if (it == j.end()) return def;
  if (!it->is_number()) fail("'" + keypath(ctx, key) + "' must be a number");
  return it->get<double>();
}

long long opt_int(const json& j, const char* key, const std::string& ctx,
                  long long def) {
  auto it = j.find(key);
  if (it == j.end()) return def;
  if (!it->is_number_integer())
    fail("'" + keypath(ctx, key) + "' must be an integer");
  return it->get<long long>();
}

bool opt_bool(const json& j, const char* key, const std::string& ctx,
              bool def) {
  auto it = j.find(key);
  if (it == j.end()) return def;
  if (!it->is_boolean()) fail("'" + keypath(ctx, key) + "' must be a boolean");
  return it->get<bool>();
}

std::string get_str(const json& j, const char* key, const std::string& ctx) {
  auto it = j.find(key);
  if (it == j.end()) fail("missing config key '" + keypath(ctx, key) + "'");
  if (!it->is_string()) fail("'" + keypath(ctx, key) + "' must be a string");
  return it->get<std::string>();
}

std::string opt_str(const json& j, const char* key, const std::string& ctx,
                    const std::string& def) {
  auto it = j.find(key);
  if (it == j.end()) return def;
  if (!it->is_string()) fail("'" + keypath(ctx, key) + "' must be a string");
  return it->get<std::string>();
}

std::vector<double> num_list(const json& j, const std::string& ctx) {
  if (!j.is_array()) fail("'" + ctx + "' must be an array of numbers");
  std::vector<double> out;
  for (const auto& v : j) {
    if (!v.is_number()) fail("'" + ctx + "' must contain only numbers");
    out.push_back(v.get<double>());
  }
  return out;
}

std::string fmt_g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

// --- model specs ------------------------------------------------------

struct ModelSpec {
  std::string preset;
  std::optional<std::string> file;
  std::map<std::string, double> rates;  // per-rate natural units
  std::optional<double> t1_us;
  double aux_factor = 0.0;
};

ModelSpec parse_model(const json& j, const std::string& ctx) {
  check_keys(j, ctx, {"preset", "file", "rates", "t1_us",
                      "aux_detection_factor"});
  ModelSpec m;
  if (j.contains("file")) m.file = get_str(j, "file", ctx);
  m.preset = opt_str(j, "preset", ctx, "");
  if (m.file && !m.preset.empty())
    fail("'" + ctx + "' must not give both a preset and a file");
  if (!m.file && m.preset.empty())
    fail("'" + ctx + "' needs either a preset or a file");
  if (j.contains("t1_us")) {
    m.t1_us = get_num(j, "t1_us", ctx);
    if (!(*m.t1_us > 0.0)) fail("'" + keypath(ctx, "t1_us") + "' must be > 0");
  }
  m.aux_factor = opt_num(j, "aux_detection_factor", ctx, 0.0);
  if (j.contains("rates")) {
    const auto& r = j["rates"];
    if (!r.is_object())
      fail("'" + keypath(ctx, "rates") + "' must be an object");
    for (const auto& item : r.items()) {
      if (!item.value().is_number())
        fail("'" + keypath(ctx, "rates") + "." + item.key() +
             "' must be a number");
      m.rates[item.key()] = item.value().get<double>();
    }
  }
  if (m.file && !m.rates.empty())
    fail("'" + ctx + "': rate overrides apply to presets, not graph files");
  return m;
}

std::unique_ptr<RateModelTemplate> model_template(const ModelSpec& m) {
  if (m.file) fail("this operation needs a preset model, not a graph file");
  if (m.preset == "7level")
    return std::make_unique<SevenLevelTemplate>(m.t1_us);
  if (m.preset == "9level")
    return std::make_unique<NineLevelTemplate>(m.t1_us, m.aux_factor);
  fail("unknown preset '" + m.preset + "' (available: 7level, 9level)");
}

std::vector<double> model_values(const ModelSpec& m,
                                 const RateModelTemplate& tmpl) {
  auto params = tmpl.parameters();
  std::vector<double> values;
  values.reserve(params.size());
  for (const auto& p : params) values.push_back(p.initial);
  for (const auto& [name, value] : m.rates) {
    const auto it =
        std::find_if(params.begin(), params.end(),
                     [&](const FitParameter& p) { return p.name == name; });
    if (it == params.end())
      fail("unknown rate '" + name + "' for preset " +
           std::string(tmpl.name()));
    values[static_cast<size_t>(it - params.begin())] = value;
  }
  return values;
}

LevelGraph build_model_graph(const ModelSpec& m) {
  if (m.file) return graph_from_json(read_json(*m.file));
  const auto tmpl = model_template(m);
  const auto values = model_values(m, *tmpl);
  return tmpl->build(values);
}

// --- sequence specs ------------------------------------------------------

bool is_recovery_protocol(const json& j) {
  return j.is_object() && j.contains("protocol") &&
         j["protocol"].is_string() && j["protocol"] == "recovery";
}

RecoveryScan parse_recovery_scan(const json& j, std::optional<double> power,
                                 const std::string& ctx) {
  check_keys(j, ctx,
             {"protocol", "pulse_ns", "power_mw", "dark_max_ns", "dark_points",
              "dark_times_ns", "wait_ns"});
  RecoveryScan scan;
  scan.pulse_duration_ns = opt_num(j, "pulse_ns", ctx, 1000.0);
  scan.power_mw = power.value_or(opt_num(j, "power_mw", ctx, 13.6));
  scan.inter_pair_wait_ns = opt_num(j, "wait_ns", ctx, 100.0);
  if (j.contains("dark_times_ns")) {
    scan.dark_times_ns =
        num_list(j["dark_times_ns"], keypath(ctx, "dark_times_ns"));
  } else {
    scan.dark_times_ns = uniform_dark_times(
        opt_num(j, "dark_max_ns", ctx, 54.8),
        static_cast<int>(opt_int(j, "dark_points", ctx, 15)));
  }
  scan.validate();
  return scan;
}

PulseSequence parse_single_sequence(const json& j, std::optional<double> power,
                                    const std::string& ctx) {
  if (!j.is_object()) fail("'" + ctx + "' must be an object");
  if (j.contains("file")) {
    check_keys(j, ctx, {"file"});
    return sequence_from_json(read_json(get_str(j, "file", ctx)));
  }
  if (j.contains("elements")) {
    check_keys(j, ctx, {"elements", "id", "repeat_count", "nominal_period_ns"});
    return sequence_from_json(j);
  }
  const std::string protocol = get_str(j, "protocol", ctx);
  if (protocol == "pump-probe") {
    check_keys(j, ctx,
               {"protocol", "pulse_ns", "dark_ns", "wait_ns", "reset",
                "truncated_wait_ns", "power_mw"});
    const double p = power.value_or(opt_num(j, "power_mw", ctx, 0.0));
    if (!(p > 0.0)) fail("'" + ctx + "': pump-probe needs a positive power");
    return build_pump_probe(opt_num(j, "pulse_ns", ctx, 1000.0),
                            opt_num(j, "dark_ns", ctx, 0.0),
                            opt_num(j, "wait_ns", ctx, 100000.0), p,
                            opt_bool(j, "reset", ctx, true),
                            opt_num(j, "truncated_wait_ns", ctx, 200.0));
  }
  if (protocol == "recovery")
    fail("'" + ctx +
         "': the recovery protocol describes a scan; it is driven by the "
         "simulate and recovery commands, not a single dataset");
  fail("'" + keypath(ctx, "protocol") + "': unknown protocol '" + protocol +
       "'");
}

// --- shared sampling / noise options -------------------------------------

SimulateOptions parse_sampling(const json& cfg) {
  SimulateOptions so;
  so.rise_time_ns = opt_num(cfg, "rise_ns", "", 2.5);
  if (cfg.contains("fall_ns")) so.fall_time_ns = get_num(cfg, "fall_ns", "");
  so.bin_width_ns = opt_num(cfg, "bin_ns", "", 0.5);
  so.rate_scale = opt_num(cfg, "rate_scale", "", 1.0);
  so.background_rate_mhz = opt_num(cfg, "background_mhz", "", 0.0);
  return so;
}

std::optional<NoiseOptions> parse_noise(const json& cfg) {
  if (!cfg.contains("noise")) return {};
  const auto& j = cfg["noise"];
  check_keys(j, "noise", {"efficiency", "averaging_s", "seed"});
  NoiseOptions n;
  n.efficiency = get_num(j, "efficiency", "noise");
  n.averaging_s = get_num(j, "averaging_s", "noise");
  auto it = j.find("seed");
  if (it == j.end())
    fail("noise requires an explicit seed ('noise.seed')");
  if (!it->is_number_integer()) fail("'noise.seed' must be an integer");
  n.seed = it->get<std::uint64_t>();
  return n;
}

std::vector<double> parse_powers(const json& cfg) {
  if (!cfg.contains("powers_mw")) return {};
  auto v = num_list(cfg["powers_mw"], "powers_mw");
  if (v.empty()) fail("'powers_mw' must not be empty");
  for (double p : v)
    if (!(p > 0.0) || !std::isfinite(p)) fail("'powers_mw' must be > 0");
  return v;
}

std::string out_dir_of(const json& cfg) {
  return opt_str(cfg, "out_dir", "", "out");
}

int jobs_of(const json& cfg) {
  const auto jobs = opt_int(cfg, "jobs", "", 1);
  if (jobs < 1) fail("'jobs' must be >= 1");
  return static_cast<int>(jobs);
}

// Run fn(0..n-1) on up to `jobs` threads. Items are independent; the
// first exception wins and is rethrown after all workers drain.
void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
  if (n <= 0) return;
  jobs = std::clamp(jobs, 1, n);
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::mutex mtx;
  std::exception_ptr first;
  std::vector<std::thread> workers;
  workers.reserve(static_cast<size_t>(jobs));
  for (int t = 0; t < jobs; ++t)
    workers.emplace_back([&] {
      while (true) {
        const int i = next.fetch_add(1);
        if (i >= n) break;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mtx);
          if (!first) first = std::current_exception();
        }
      }
    });
  for (auto& w : workers) w.join();
  if (first) std::rethrow_exception(first);
}

constexpr const char* top_keys_msg =
    "model sequence powers_mw rise_ns fall_ns bin_ns rate_scale "
    "background_mhz noise out_dir recovery fit jobs";

void check_top(const json& cfg) {
  check_keys(cfg, "",
             {"model", "sequence", "powers_mw", "rise_ns", "fall_ns", "bin_ns",
              "rate_scale", "background_mhz", "noise", "out_dir", "recovery",
              "fit", "jobs", "split_pulses"});
  (void)top_keys_msg;
}

const json& need_section(const json& cfg, const char* key) {
  auto it = cfg.find(key);
  if (it == cfg.end())
    fail(std::string("this command needs a '") + key + "' config section");
  return *it;
}

}  // namespace

std::uint64_t settings_hash(const json& cfg) { return fnv1a_hash(cfg.dump()); }

// --- simulate -------------------------------------------------------------

int run_simulate(const json& cfg, std::ostream& out) {
  check_top(cfg);
  const ModelSpec mspec = parse_model(need_section(cfg, "model"), "model");
  const LevelGraph graph = build_model_graph(mspec);
  const json& seq_spec = need_section(cfg, "sequence");
  const SimulateOptions so = parse_sampling(cfg);
  const auto noise = parse_noise(cfg);
  const auto powers = parse_powers(cfg);
  const std::string dir = out_dir_of(cfg);
  const std::string hash = hash_hex(settings_hash(cfg));

  struct Item {
    PulseSequence seq;
    std::optional<double> power_tag;
  };
  std::vector<Item> items;
  // Pump-probe traces are split into per-pulse windows (that is what the
  // fitter consumes); recovery scans and explicit sequences are kept whole
  // so the two-pulse structure survives for later ingestion.
  bool split = false;
  if (is_recovery_protocol(seq_spec)) {
    std::vector<double> plist = powers;
    if (plist.empty())
      plist.push_back(parse_recovery_scan(seq_spec, {}, "sequence").power_mw);
    for (double p : plist) {
      const RecoveryScan scan = parse_recovery_scan(seq_spec, p, "sequence");
      for (auto& s : build_recovery_scan(scan))
        items.push_back({std::move(s), p});
    }
  } else if (seq_spec.contains("protocol")) {
    if (powers.empty())
      fail("'powers_mw' is required for protocol sequences");
    split = true;
    for (double p : powers)
      items.push_back({parse_single_sequence(seq_spec, p, "sequence"), p});
  } else {
    if (!powers.empty())
      fail("explicit sequences carry their own powers; drop 'powers_mw'");
    items.push_back({parse_single_sequence(seq_spec, {}, "sequence"), {}});
  }
  split = opt_bool(cfg, "split_pulses", "", split);

  struct ItemOut {
    std::vector<std::string> files;
    double max_negative = 0.0;
    double max_sum_deviation = 0.0;
    int n_samples = 0;
  };
  std::vector<ItemOut> results(items.size());

  parallel_for(static_cast<int>(items.size()), jobs_of(cfg), [&](int i) {
    const Item& item = items[static_cast<size_t>(i)];
    PLTrace trace = simulate_sequence(graph, item.seq, so);
    if (noise) {
      NoiseOptions n = *noise;
      n.seed = noise->seed + static_cast<std::uint64_t>(i);
      trace = add_shot_noise(trace, n);
    }
    ItemOut& res = results[static_cast<size_t>(i)];

    // conservation / positivity diagnostics on the same grid
    const CompiledSequence cs =
        compile(item.seq, so.rise_time_ns, so.fall_time_ns);
    const Trajectory traj = propagate_profile(graph, cs.profile,
                                              thermal_state(graph),
                                              so.bin_width_ns);
    res.max_negative = traj.max_negative;
    res.max_sum_deviation = traj.max_sum_deviation;
    res.n_samples = traj.n_samples();

    const std::string power_tag =
        item.power_tag ? "_p" + fmt_g(*item.power_tag) + "mw" : "";
    if (split) {
      for (std::size_t k = 0; k < trace.meta.pulse_onsets_ns.size(); ++k) {
        const double onset = trace.meta.pulse_onsets_ns[k];
        const double dur = trace.meta.pulse_durations_ns[k];
        PLTrace window = slice_trace(trace, onset, onset + dur);
        const std::string name = item.seq.id + power_tag + "_pulse" +
                                 std::to_string(k + 1) + ".csv";
        const std::string path = (fs::path(dir) / name).string();
        save_trace(window, path);
        res.files.push_back(path);
      }
    } else {
      const std::string path =
          (fs::path(dir) / (item.seq.id + power_tag + ".csv")).string();
      save_trace(trace, path);
      res.files.push_back(path);
    }
  });

  json summary_items = json::array();
  int n_files = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    const auto& r = results[i];
    json it{{"sequence", items[i].seq.id},
            {"files", r.files},
            {"max_negative", r.max_negative},
            {"max_sum_deviation", r.max_sum_deviation},
            {"n_samples", r.n_samples}};
    if (items[i].power_tag) it["power_mw"] = *items[i].power_tag;
    summary_items.push_back(std::move(it));
    n_files += static_cast<int>(r.files.size());
  }
  const std::string summary_path =
      (fs::path(dir) / "simulate_summary.json").string();
  write_json_atomic(summary_path,
                    json{{"settings_hash", hash},
                         {"n_trace_files", n_files},
                         {"items", std::move(summary_items)}});
  out << "wrote " << n_files << " trace files and " << summary_path << "\n";
  return 0;
}

// --- recovery ---------------------------------------------------------

namespace {

json flake_fit_json(const RecoveryFit& fit, const std::string& hash) {
  json j = recovery_fit_to_json(fit);
  j["settings_hash"] = hash;
  return j;
}

}  // namespace

int run_recovery(const json& cfg, std::ostream& out) {
  check_top(cfg);
  const std::string dir = out_dir_of(cfg);
  const std::string hash = hash_hex(settings_hash(cfg));
  json rcfg = cfg.contains("recovery") ? cfg["recovery"] : json::object();
  check_keys(rcfg, "recovery", {"power_mw", "flakes", "traces", "curve"});

  // ingest paths first: an existing curve, or measured two-pulse traces
  if (rcfg.contains("curve")) {
    const RecoveryCurve curve =
        load_recovery_curve(get_str(rcfg, "curve", "recovery"));
    const RecoveryFit fit = fit_recovery(curve);
    const std::string path = (fs::path(dir) / "recovery_fit.json").string();
    write_json_atomic(path, flake_fit_json(fit, hash));
    out << "tau_s = " << format_value_uncertainty(fit.tau_ns, fit.tau_sigma)
        << " ns -> " << path << "\n";
    return 0;
  }
  if (rcfg.contains("traces")) {
    if (!rcfg["traces"].is_array() || rcfg["traces"].empty())
      fail("'recovery.traces' must be a non-empty array of trace files");
    std::vector<PLTrace> traces;
    for (const auto& p : rcfg["traces"]) {
      if (!p.is_string()) fail("'recovery.traces' must contain file paths");
      const std::string path = p.get<std::string>();
      if (!fs::exists(path)) fail("missing trace file: " + path);
      traces.push_back(load_trace(path));
    }
    const RecoveryCurve curve = build_recovery_curve(traces);
    const RecoveryFit fit = fit_recovery(curve);
    save_recovery_curve(curve,
                        (fs::path(dir) / "recovery_curve.csv").string());
    const std::string path = (fs::path(dir) / "recovery_fit.json").string();
    write_json_atomic(path, flake_fit_json(fit, hash));
    out << "tau_s = " << format_value_uncertainty(fit.tau_ns, fit.tau_sigma)
        << " ns -> " << path << "\n";
    return 0;
  }

  // generation path: model + recovery-protocol scan (+ optional noise)
  const ModelSpec mspec = parse_model(need_section(cfg, "model"), "model");
  const LevelGraph graph = build_model_graph(mspec);
  const json& seq_spec = need_section(cfg, "sequence");
  if (!is_recovery_protocol(seq_spec))
    fail("the recovery command needs 'sequence.protocol' = \"recovery\"");
  std::optional<double> power_override;
  if (rcfg.contains("power_mw"))
    power_override = get_num(rcfg, "power_mw", "recovery");
  const RecoveryScan scan =
      parse_recovery_scan(seq_spec, power_override, "sequence");
  const SimulateOptions so = parse_sampling(cfg);
  const auto noise = parse_noise(cfg);
  const auto n_flakes = static_cast<int>(opt_int(rcfg, "flakes", "recovery", 1));
  if (n_flakes < 1) fail("'recovery.flakes' must be >= 1");
  if (n_flakes > 1 && !noise)
    fail("a multi-flake batch needs a 'noise' section (otherwise all flakes "
         "are identical)");

  std::vector<RecoveryFit> fits(static_cast<size_t>(n_flakes));
  parallel_for(n_flakes, jobs_of(cfg), [&](int f) {
    std::optional<NoiseOptions> flake_noise = noise;
    if (flake_noise)
      flake_noise->seed = noise->seed + 100003ULL * static_cast<std::uint64_t>(f);
    const auto traces = simulate_recovery_scan(graph, scan, so, flake_noise);
    const RecoveryCurve curve = build_recovery_curve(traces);
    const RecoveryFit fit = fit_recovery(curve);

    char prefix[32];
    if (n_flakes > 1)
      std::snprintf(prefix, sizeof prefix, "flake%02d_", f);
    else
      std::snprintf(prefix, sizeof prefix, "recovery_");
    save_recovery_curve(
        curve, (fs::path(dir) / (std::string(prefix) + "curve.csv")).string());
    write_json_atomic(
        (fs::path(dir) / (std::string(prefix) + "fit.json")).string(),
        flake_fit_json(fit, hash));
    fits[static_cast<size_t>(f)] = fit;
  });

  std::vector<double> taus, tau_sigmas;
  for (const auto& f : fits) {
    taus.push_back(f.tau_ns);
    tau_sigmas.push_back(f.tau_sigma);
  }
  double mean = 0.0;
  for (double t : taus) mean += t;
  mean /= static_cast<double>(taus.size());
  double var = 0.0;
  for (double t : taus) var += (t - mean) * (t - mean);
  const double stdev =
      taus.size() > 1 ? std::sqrt(var / (static_cast<double>(taus.size()) - 1.0))
                      : 0.0;

  const std::string summary_path =
      (fs::path(dir) / "recovery_summary.json").string();
  write_json_atomic(summary_path,
                    json{{"settings_hash", hash},
                         {"n_flakes", n_flakes},
                         {"tau_s_ns", taus},
                         {"tau_s_sigma_ns", tau_sigmas},
                         {"mean_tau_s_ns", mean},
                         {"std_tau_s_ns", stdev},
                         {"tau_s", format_value_uncertainty(mean, stdev)}});
  out << "tau_s mean = " << format_value_uncertainty(mean, stdev) << " ns ("
      << n_flakes << " flakes) -> " << summary_path << "\n";
  return 0;
}

// --- fit ------------------------------------------------------------------

int run_fit(const json& cfg, std::ostream& out) {
  check_top(cfg);
  const json& fcfg = need_section(cfg, "fit");
  check_keys(fcfg, "fit",
             {"model", "datasets", "jacobian", "n_starts", "seed",
              "fit_background", "fix", "initial", "bounds"});

  const json& mjson = fcfg.contains("model") ? fcfg["model"]
                                             : need_section(cfg, "model");
  const ModelSpec mspec =
      parse_model(mjson, fcfg.contains("model") ? "fit.model" : "model");
  const auto tmpl = model_template(mspec);

  auto params = tmpl->parameters();
  auto param_of = [&](const std::string& name) -> FitParameter& {
    for (auto& p : params)
      if (p.name == name) return p;
    fail("unknown fit parameter '" + name + "' for preset " +
         std::string(tmpl->name()));
  };
  // model.rates doubles as truth/initial override for the fit
  for (const auto& [name, value] : mspec.rates) param_of(name).initial = value;
  if (fcfg.contains("initial")) {
    if (!fcfg["initial"].is_object()) fail("'fit.initial' must be an object");
    for (const auto& item : fcfg["initial"].items()) {
      if (!item.value().is_number())
        fail("'fit.initial." + item.key() + "' must be a number");
      param_of(item.key()).initial = item.value().get<double>();
    }
  }
  if (fcfg.contains("bounds")) {
    if (!fcfg["bounds"].is_object()) fail("'fit.bounds' must be an object");
    for (const auto& item : fcfg["bounds"].items()) {
      const auto b = num_list(item.value(), "fit.bounds." + item.key());
      if (b.size() != 2) fail("'fit.bounds." + item.key() + "' must be [lo, hi]");
      auto& p = param_of(item.key());
      p.lower = b[0];
      p.upper = b[1];
    }
  }
  if (fcfg.contains("fix")) {
    if (!fcfg["fix"].is_array()) fail("'fit.fix' must be an array of names");
    for (const auto& n : fcfg["fix"]) {
      if (!n.is_string()) fail("'fit.fix' must contain parameter names");
      param_of(n.get<std::string>()).fixed = true;
    }
  }

  if (!fcfg.contains("datasets") || !fcfg["datasets"].is_array() ||
      fcfg["datasets"].empty())
    fail("'fit.datasets' must be a non-empty array");
  const SimulateOptions so = parse_sampling(cfg);
  std::vector<FitDataset> datasets;
  int d_idx = 0;
  for (const auto& dj : fcfg["datasets"]) {
    const std::string ctx = "fit.datasets[" + std::to_string(d_idx++) + "]";
    check_keys(dj, ctx, {"trace", "power_mw", "sequence", "label", "window_ns"});
    const std::string trace_path = get_str(dj, "trace", ctx);
    if (!fs::exists(trace_path)) fail("missing trace file: " + trace_path);
    PLTrace data = load_trace(trace_path);
    std::optional<double> power;
    if (dj.contains("power_mw")) power = get_num(dj, "power_mw", ctx);
    const json& sj = dj.contains("sequence") ? dj["sequence"]
                                             : need_section(cfg, "sequence");
    const PulseSequence seq = parse_single_sequence(
        sj, power, dj.contains("sequence") ? ctx + ".sequence" : "sequence");
    if (dj.contains("window_ns")) {
      const auto w = num_list(dj["window_ns"], ctx + ".window_ns");
      if (w.size() != 2) fail("'" + ctx + ".window_ns' must be [t0, t1]");
      data = slice_trace(data, w[0], w[1]);
    }
    FitDataset ds;
    ds.data = std::move(data);
    ds.sequence = compile(seq, so.rise_time_ns, so.fall_time_ns);
    ds.label = opt_str(dj, "label", ctx, fs::path(trace_path).stem().string());
    datasets.push_back(std::move(ds));
  }

  FitOptions fopts;
  fopts.jacobian = jacobian_mode_from_string(
      opt_str(fcfg, "jacobian", "fit", "forward-sensitivity"));
  fopts.n_starts = static_cast<int>(opt_int(fcfg, "n_starts", "fit", 1));
  fopts.seed = static_cast<std::uint64_t>(opt_int(fcfg, "seed", "fit", 0));
  fopts.fit_background = opt_bool(fcfg, "fit_background", "fit", false);

  const FitResult fit = fit_model(*tmpl, params, datasets, fopts);

  json report = fit_result_to_json(fit);
  report["model"] = std::string(tmpl->name());
  report["jacobian"] = std::string(to_string(fopts.jacobian));
  report["settings_hash"] = hash_hex(settings_hash(cfg));
  json labels = json::array();
  for (const auto& d : datasets) labels.push_back(d.label);
  report["datasets"] = std::move(labels);
  const LifetimeEstimate tau = lifetime_from_fit(fit);
  report["tau_s_ns"] = tau.tau_ns;
  report["tau_s_sigma_ns"] = tau.sigma_ns;
  report["tau_s"] = format_value_uncertainty(tau.tau_ns, tau.sigma_ns);

  const std::string dir = out_dir_of(cfg);
  const std::string path = (fs::path(dir) / "fit_report.json").string();
  write_json_atomic(path, report);
  out << "chi2/dof = " << fit.chi2 << "/" << fit.dof
      << ", tau_s = " << report["tau_s"].get<std::string>() << " ns -> "
      << path << "\n";
  return 0;
}

// --- presets / validate ---------------------------------------------------

int run_presets(const json& cfg, std::ostream& out) {
  check_top(cfg);
  if (!cfg.contains("model")) {
    out << "available presets:\n"
        << "  7level  triplet ground/excited sublevels + metastable singlet\n"
        << "  9level  7level + auxiliary charge-state manifold\n";
    return 0;
  }
  const ModelSpec mspec = parse_model(cfg["model"], "model");
  const LevelGraph graph = build_model_graph(mspec);
  const json j = graph_to_json(graph);
  if (cfg.contains("out_dir")) {
    const std::string path =
        (fs::path(out_dir_of(cfg)) / (mspec.preset + "_preset.json")).string();
    write_json_atomic(path, j);
    out << "wrote " << path << "\n";
  } else {
    out << j.dump(2) << "\n";
  }
  return 0;
}

int run_validate(const json& cfg, std::ostream& out) {
  check_top(cfg);
  if (cfg.contains("model")) build_model_graph(parse_model(cfg["model"], "model"));
  const auto powers = parse_powers(cfg);
  const SimulateOptions so = parse_sampling(cfg);
  if (!(so.bin_width_ns > 0.0)) fail("'bin_ns' must be > 0");
  if (so.rise_time_ns < 0.0) fail("'rise_ns' must be >= 0");
  parse_noise(cfg);
  if (cfg.contains("sequence")) {
    const json& sj = cfg["sequence"];
    if (is_recovery_protocol(sj)) {
      parse_recovery_scan(sj, {}, "sequence");
    } else if (sj.contains("protocol")) {
      const double p = powers.empty() ? 1.0 : powers.front();
      compile(parse_single_sequence(sj, p, "sequence"), so.rise_time_ns,
              so.fall_time_ns);
    } else {
      compile(parse_single_sequence(sj, {}, "sequence"), so.rise_time_ns,
              so.fall_time_ns);
    }
  }
  if (cfg.contains("fit")) {
    const json& fcfg = cfg["fit"];
    check_keys(fcfg, "fit",
               {"model", "datasets", "jacobian", "n_starts", "seed",
                "fit_background", "fix", "initial", "bounds"});
    if (fcfg.contains("jacobian"))
      jacobian_mode_from_string(get_str(fcfg, "jacobian", "fit"));
    if (fcfg.contains("datasets"))
      for (const auto& dj : fcfg["datasets"]) {
        if (!dj.is_object() || !dj.contains("trace")) continue;
        const std::string p = dj["trace"].get<std::string>();
        if (!fs::exists(p)) fail("missing trace file: " + p);
      }
  }
  if (cfg.contains("recovery"))
    check_keys(cfg["recovery"], "recovery",
               {"power_mw", "flakes", "traces", "curve"});
  out << "ok " << hash_hex(settings_hash(cfg)) << "\n";
  return 0;
}

// --- CLI plumbing -----------------------------------------------------

namespace {

json parse_set_value(const std::string& raw) {
  json v = json::parse(raw, nullptr, false);
  if (v.is_discarded()) return json(raw);  // plain string
  return v;
}

void apply_set(json& cfg, const std::string& expr) {
  const auto eq = expr.find('=');
  if (eq == std::string::npos || eq == 0)
    fail("--set expects key.path=value, got '" + expr + "'");
  const std::string path = expr.substr(0, eq);
  const json value = parse_set_value(expr.substr(eq + 1));

  json* node = &cfg;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot - start);
    if (key.empty()) fail("--set has an empty path component: '" + expr + "'");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key)) (*node)[key] = json::object();
    node = &(*node)[key];
    if (!node->is_object())
      fail("--set path crosses a non-object at '" + key + "'");
    start = dot + 1;
  }
}

}  // namespace

json effective_config(const CliOptions& cli) {
  json cfg = json::object();
  if (cli.config_path) cfg = read_json(*cli.config_path);
  if (!cfg.is_object()) fail("config root must be a JSON object");
  if (cli.preset) cfg["model"]["preset"] = *cli.preset;
  if (!cli.powers.empty()) cfg["powers_mw"] = cli.powers;
  if (cli.seed) {
    if (cfg.contains("noise")) cfg["noise"]["seed"] = *cli.seed;
    if (cfg.contains("fit")) cfg["fit"]["seed"] = *cli.seed;
  }
  if (cli.jobs) cfg["jobs"] = *cli.jobs;
  if (cli.out_dir) cfg["out_dir"] = *cli.out_dir;
  for (const auto& s : cli.set_overrides) apply_set(cfg, s);
  return cfg;
}

int run_command(const CliOptions& cli, std::ostream& out) {
  const json cfg = effective_config(cli);
  if (cli.command == "simulate") return run_simulate(cfg, out);
  if (cli.command == "recovery") return run_recovery(cfg, out);
  if (cli.command == "fit") return run_fit(cfg, out);
  if (cli.command == "presets") return run_presets(cfg, out);
  if (cli.command == "validate") return run_validate(cfg, out);
  fail("unknown command '" + cli.command + "'");
}

int run_cli(const CliOptions& cli, std::ostream& out, std::ostream& err) {
  try {
    return run_command(cli, out);
  } catch (const ValidationError& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const FitError& e) {
    err << "fit error: " << e.what() << "\n";
    return 4;
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const json::exception& e) {
    err << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace vbsim
