#pragma once

// Named experiments. Each returns CSV tables plus threshold checks; trials
// fan out over worker threads and are seeded per index, so output does not
// depend on the worker count.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "isacfi/cancellation.hpp"
#include "isacfi/channel.hpp"
#include "isacfi/config.hpp"
#include "isacfi/estimation.hpp"
#include "isacfi/fusion.hpp"
#include "isacfi/mac.hpp"
#include "isacfi/ofdm.hpp"
#include "isacfi/signal.hpp"
#include "isacfi/traffic.hpp"

namespace isacfi {

struct CsvTable {
  std::string name;    // file stem
  std::string header;  // column names, comma separated
  std::vector<std::string> rows;
};

struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct ExperimentOutput {
  std::string experiment;
  std::vector<CsvTable> tables;
  std::vector<Check> checks;

  bool passed() const {
    return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.pass; });
  }
};

struct ExperimentContext {
  Config config;
  std::uint64_t seed = 1;
  std::size_t threads = 0;  // 0: hardware concurrency

  std::size_t trials(std::size_t fallback) const {
    const auto t = config.integer("experiment.trials");
    return t > 0 ? static_cast<std::size_t>(t) : fallback;
  }
  std::size_t workers() const {
    std::size_t t = threads;
    if (t == 0) t = static_cast<std::size_t>(config.integer("experiment.threads"));
    if (t == 0) t = std::max(1u, std::thread::hardware_concurrency());
    return t;
  }
};

/// Runs f(0..n-1) over `workers` threads. The first exception is rethrown.
template <class F>
void parallel_for(std::size_t n, std::size_t workers, F&& f) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard lock(err_mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

namespace detail {

inline std::string num(double v) {
  char buf[32];
  if (v == std::floor(v) && std::abs(v) < 1e15) std::snprintf(buf, sizeof buf, "%.0f", v);
  else std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

template <class... T>
std::string row(const T&... v) {
  std::string out;
  auto add = [&out](const auto& x) {
    if (!out.empty()) out += ',';
    if constexpr (std::is_arithmetic_v<std::decay_t<decltype(x)>>) out += num(static_cast<double>(x));
    else out += x;
  };
  (add(v), ...);
  return out;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

inline TrafficModel traffic_from(const Config& c, std::uint64_t seed) {
  const auto kind = traffic_kind_from_string(c.text("traffic.kind"));
  if (kind == TrafficKind::Regular) return TrafficModel::regular(c.real("traffic.rate_hz"));
  return kind == TrafficKind::Streaming ? TrafficModel::streaming(seed) : TrafficModel::gaming(seed);
}

inline LassoOptions lasso_from(const Config& c) {
  LassoOptions o;
  o.lambda_fraction = c.real("estimation.lambda_fraction");
  o.max_iter = static_cast<std::size_t>(c.integer("estimation.max_iter"));
  o.abs_tol = 1e-6;
  o.rel_tol = 1e-4;
  return o;
}

inline SeparatorConfig separator_from(const Config& c) {
  SeparatorConfig s;
  s.isolation_db = c.real("separator.isolation_db");
  s.digital_taps = static_cast<std::size_t>(c.integer("separator.digital_taps"));
  s.mu = c.real("separator.mu");
  s.recalibration_interval_s = c.real("separator.recalibration_interval_s");
  return s;
}

// One antenna port capture of the preamble: leakage, optional delayed reflection, noise.
inline SeparatorSignal preamble_capture(const LeakageChannel& ch, std::span<const Complex> x, double t,
                                        double noise_w, std::uint64_t seed, Complex refl = {},
                                        std::size_t delay = 2) {
  SeparatorSignal s = SeparatorSignal::zeros(x.size());
  s.leakage = fir_filter(ch.taps_at(t, Port::Antenna), x, x.size());
  for (std::size_t i = delay; i < x.size(); ++i) s.reflection[i] = refl * x[i - delay];
  NoiseSource rng(seed);
  s.noise = rng.samples(x.size(), noise_w);
  return s;
}

inline CancellatorState calibrated_state(const LeakageChannel& ch, std::span<const Complex> x,
                                         const SeparatorConfig& cfg, double noise_w, double t, std::uint64_t seed) {
  CalibrationInput in{&ch, x, noise_w, t, seed};
  return calibrate(switch_to_dummy_load(CancellatorState::fresh(cfg)), in, cfg);
}

inline Check check(std::string name, bool pass, std::string detail) {
  return {std::move(name), pass, std::move(detail)};
}

inline MacScenario mac_scenario(const Config& c, std::uint64_t seed, TrafficKind kind) {
  MacScenario sc;
  sc.radio = c.radio();
  sc.seed = seed;
  sc.duration = c.real("mac.duration_s");
  sc.timer_s = c.real("mac.timer_ms") * 1e-3;
  sc.peer_cfo_hz = c.real("mac.peer_cfo_hz");
  sc.noise_floor_dbm = c.real("separator.noise_floor_dbm");
  sc.separator = separator_from(c);
  sc.recalibration_interval_s = c.real("separator.recalibration_interval_s");
  MacDevice a, b;
  a.pose.position = Vec3(0, 0, 0);
  b.pose.position = Vec3(8, 3, 0);
  const auto model = [&](std::uint64_t s) {
    if (kind == TrafficKind::Regular) return TrafficModel::regular(c.real("traffic.rate_hz"));
    return kind == TrafficKind::Streaming ? TrafficModel::streaming(s) : TrafficModel::gaming(s);
  };
  a.traffic = model(1);
  b.traffic = model(2);
  sc.devices = {a, b};
  return sc;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Experiments

/// Monostatic vs bistatic CSI phase: analytic offset terms and drift.
inline ExperimentOutput run_phase_offsets(const ExperimentContext& ctx) {
  using namespace detail;
  ExperimentOutput out{"phase-offsets", {}, {}};
  const RadioConfig radio = ctx.config.radio();
  const std::size_t trials = ctx.trials(20), symbols = 100;
  const double n = static_cast<double>(radio.fft_size);
  std::vector<double> slope_err(trials), drift_err(trials), mono_drift(trials);
  CsvTable trace{"phase_trace", "symbol,monostatic_phase_rad,bistatic_phase_rad,bistatic_analytic_rad", {}};
  std::vector<std::string> trace_rows(symbols);

  parallel_for(trials, ctx.workers(), [&](std::size_t trial) {
    NoiseSource rng(derive_seed(ctx.seed, trial));
    ScenarioGeometry bi;
    bi.tx.position = {0, 0, 0};
    bi.rx.position = {3, 0, 0};
    bi.array.elements = 1;
    bi.include_los = false;
    CsiSynthesisOptions opts;
    opts.extra_paths.push_back({PathKind::Reflection, 2, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0});
    auto imp = ImpairmentProfile::random_bistatic(radio, rng);
    imp.pdd_samples = std::round(rng.uniform(-3.0, 3.0));

    ScenarioGeometry mono;
    mono.array.elements = 1;
    Reflector r;
    r.trajectory = static_point(Vec3(4, 1, 0));
    mono.targets = {r};
    const auto mono_imp = ImpairmentProfile::monostatic(rng.uniform(0.0, kTwoPi));
    CsiSynthesisOptions mopts;

    double se = 0.0, de = 0.0, md = 0.0;
    CsiMatrix prev, mono_first;
    for (std::size_t l = 0; l < symbols; ++l) {
      opts.symbol_index = static_cast<double>(l);
      mopts.symbol_index = static_cast<double>(l);
      const auto c = synthesize_csi(bi, imp, radio, 0.0, opts);
      const auto m = synthesize_csi(mono, mono_imp, radio, 0.0, mopts);
      if (l == 0) {
        for (std::size_t k = 1; k < c.n_sc; ++k) {
          const int dk = radio.used_subcarriers[k] - radio.used_subcarriers[k - 1];
          const double measured = std::arg(c.values[k] * std::conj(c.values[k - 1]));
          se = std::max(se, std::abs(wrap_phase(measured + kTwoPi * dk * (imp.sfo + imp.pdd_samples) / n)));
        }
        mono_first = m;
      } else {
        const double measured = std::arg(c.values[0] * std::conj(prev.values[0]));
        de = std::max(de, std::abs(wrap_phase(measured + kTwoPi * imp.cfo_hz / (radio.subcarrier_spacing() * n))));
        for (std::size_t k = 0; k < m.n_sc; ++k)
          md = std::max(md, std::abs(std::arg(m.values[k] * std::conj(mono_first.values[k]))));
      }
      if (trial == 0)
        trace_rows[l] = row(l, std::arg(m.values[0]), std::arg(c.values[0]),
                            wrap_phase(impairment_phase(imp, radio, radio.used_subcarriers[0], static_cast<double>(l))));
      prev = c;
    }
    slope_err[trial] = se;
    drift_err[trial] = de;
    mono_drift[trial] = md;
  });

  trace.rows = std::move(trace_rows);
  CsvTable summary{"phase_offsets", "trial,slope_error_rad,drift_error_rad,monostatic_drift_rad", {}};
  for (std::size_t t = 0; t < trials; ++t) summary.rows.push_back(row(t, slope_err[t], drift_err[t], mono_drift[t]));
  out.tables = {summary, trace};
  const double s = *std::max_element(slope_err.begin(), slope_err.end());
  const double d = *std::max_element(drift_err.begin(), drift_err.end());
  const double m = *std::max_element(mono_drift.begin(), mono_drift.end());
  out.checks.push_back(check("bistatic slope and drift match analytic terms", s <= 1e-6 && d <= 1e-6,
                             "max slope err " + num(s) + " rad, max drift err " + num(d) + " rad"));
  out.checks.push_back(check("monostatic phase drift below 1e-6 rad over 100 symbols", m < 1e-6, "max " + num(m) + " rad"));
  return out;
}

/// Reflection preservation with dummy-load calibration vs adapting on the live capture.
inline ExperimentOutput run_los_dominance(const ExperimentContext& ctx) {
  using namespace detail;
  ExperimentOutput out{"los-dominance", {}, {}};
  const RadioConfig radio = ctx.config.radio();
  const SeparatorConfig sep = separator_from(ctx.config);
  const double noise = dbm_to_watts(ctx.config.real("separator.noise_floor_dbm"));
  const double leak = noise * db_to_linear(ctx.config.real("separator.leakage_over_floor_db"));
  const auto x = generate_preamble(radio).buffer.samples();
  const std::size_t scenes = ctx.trials(100);
  std::vector<double> sa(scenes), ab(scenes), refl_db(scenes);
  std::vector<std::size_t> delays(scenes);

  parallel_for(scenes, ctx.workers(), [&](std::size_t i) {
    NoiseSource rng(derive_seed(ctx.seed, i));
    const auto ch = LeakageChannel::with_power(leak, derive_seed(ctx.seed, 1000 + i));
    const double t = rng.uniform(0.0, 30.0);
    const auto st = calibrated_state(ch, x, sep, noise, 0.0, derive_seed(ctx.seed, 2000 + i));
    refl_db[i] = rng.uniform(10.0, 40.0);
    const Complex g = std::polar(std::sqrt(noise * db_to_linear(refl_db[i])), rng.uniform(0.0, kTwoPi));
    delays[i] = 2 + static_cast<std::size_t>(rng.uniform(0.0, 7.0));
    const auto with = preamble_capture(ch, x, t, noise, derive_seed(ctx.seed, 3000 + i), g, delays[i]);
    const auto without = preamble_capture(ch, x, t, noise, derive_seed(ctx.seed, 3000 + i));
    const double input = mean_power(std::span<const Complex>(with.reflection));
    sa[i] = linear_to_db(preserved_power(with, without, x, x, st, st, sep) / input);
    const auto fresh = CancellatorState::fresh(sep);
    const auto a = adapt_on_capture(fresh, first_stage(with, sep.first_stage, sep.isolation_db), x, sep);
    const auto b = adapt_on_capture(fresh, first_stage(without, sep.first_stage, sep.isolation_db), x, sep);
    ab[i] = linear_to_db(std::max(preserved_power(with, without, x, x, a, b, sep), 1e-300) / input);
  });

  CsvTable t{"los_dominance", "scene,reflection_over_floor_db,delay_samples,kept_db_calibrated,kept_db_adapt_on_capture", {}};
  for (std::size_t i = 0; i < scenes; ++i) t.rows.push_back(row(i, refl_db[i], delays[i], sa[i], ab[i]));
  CsvTable ratio{"los_ratio", "los_m,range_m,rcs_m2,ratio_db", {}};
  for (double l : {1.0, 2.0, 4.0})
    for (double r : {1.0, 2.0, 4.0, 8.0}) ratio.rows.push_back(row(l, r, 1.0, power_ratio(l, {r, r, 1.0})));
  out.tables = {t, ratio};
  double worst = 0.0;
  for (double v : sa) worst = std::max(worst, std::abs(v));
  const double ab_med = median(ab);
  out.checks.push_back(check("calibrated separator keeps reflections within 1 dB", worst <= 1.0, "worst |loss| " + num(worst) + " dB"));
  out.checks.push_back(check("adapt-on-capture ablation loses at least 10 dB", ab_med <= -10.0, "median " + num(ab_med) + " dB"));
  return out;
}

/// Path-length change per displacement: monostatic radial vs bistatic field-line projection.
inline ExperimentOutput run_motion_ambiguity(const ExperimentContext& ctx) {
  using namespace detail;
  ExperimentOutput out{"motion-ambiguity", {}, {}};
  const Vec3 tx(-1, 0, 0), rx(1, 0, 0), mono(0, 0, 0);
  const double step = 0.01;
  CsvTable t{"motion_ambiguity", "x_m,y_m,direction_deg,monostatic_change_m,bistatic_change_m", {}};
  double mono_err = 0.0, tangent_max = 0.0;
  for (double x = -2.0; x <= 2.0 + 1e-9; x += 1.0)
    for (double y = 1.0; y <= 3.0 + 1e-9; y += 1.0) {
      const Vec3 p(x, y, 0);
      for (int deg = 0; deg < 360; deg += 30) {
        const Vec3 d(step * std::cos(deg2rad(deg)), step * std::sin(deg2rad(deg)), 0);
        t.rows.push_back(row(x, y, deg, bistatic_projection(mono, mono, p, d), bistatic_projection(tx, rx, p, d)));
      }
      const Vec3 radial = p.normalized() * step;
      mono_err = std::max(mono_err, std::abs(bistatic_projection(mono, mono, p, radial) - 2 * step));
      Vec3 tangent = field_line_direction(tx, rx, p).cross(Vec3::UnitZ()).normalized() * step;
      tangent_max = std::max(tangent_max, std::abs(bistatic_projection(tx, rx, p, tangent)));
    }
  out.tables = {t};
  (void)ctx;
  out.checks.push_back(check("monostatic radial motion changes the path by twice the step", mono_err < 1e-9, "max err " + num(mono_err) + " m"));
  out.checks.push_back(check("bistatic motion along the ellipse changes the path < 1% of the step", tangent_max < 1e-2 * step,
                             "max change " + num(tangent_max) + " m for a " + num(step) + " m step"));
  return out;
}

/// Reception SNR with the separator forced on during B-state receptions.
inline ExperimentOutput run_separator_harm(const ExperimentContext& ctx) {
  using namespace detail;
  ExperimentOutput out{"separator-harm", {}, {}};
  auto base = mac_scenario(ctx.config, ctx.seed, TrafficKind::Streaming);
  base.keep_log = false;
  auto forced = base;
  forced.force_separator_in_b = true;
  ScenarioResult r[2];
  parallel_for(2, ctx.workers(), [&](std::size_t i) { r[i] = run_scenario(i == 0 ? base : forced); });
  CsvTable t{"separator_harm", "scenario,mean_rx_snr_db,loss_rate", {}};
  t.rows.push_back(row("separator_off_in_b", r[0].stats.mean_rx_snr_db(), r[0].stats.loss_rate()));
  t.rows.push_back(row("separator_forced_in_b", r[1].stats.mean_rx_snr_db(), r[1].stats.loss_rate()));
  out.tables = {t};
  const double drop = r[0].stats.mean_rx_snr_db() - r[1].stats.mean_rx_snr_db();
  out.checks.push_back(check("forced separator costs at least 10 dB reception SNR", drop >= 10.0, "drop " + num(drop) + " dB"));
  return out;
}

/// Paired sensing on/off runs and a long invariant run of the state machine.
inline ExperimentOutput run_comms_impact(const ExperimentContext& ctx) {
  using namespace detail;
  ExperimentOutput out{"comms-impact", {}, {}};
  const TrafficKind kinds[] = {TrafficKind::Streaming, TrafficKind::Gaming};
  ScenarioResult r[5];
  MacScenario long_run = mac_scenario(ctx.config, derive_seed(ctx.seed, 99), TrafficKind::Streaming);
  long_run.max_events = static_cast<std::size_t>(ctx.config.integer("mac.events"));
  // arrivals are pre-generated, so size the run from the event count (several events per packet)
  long_run.duration = std::max(10.0, static_cast<double>(long_run.max_events) / 100.0);
  parallel_for(5, ctx.workers(), [&](std::size_t i) {
    if (i == 4) {
      r[i] = run_scenario(long_run);
      return;
    }
    auto sc = mac_scenario(ctx.config, ctx.seed, kinds[i / 2]);
    sc.keep_log = false;
    sc.sensing_enabled = i % 2 == 0;
    r[i] = run_scenario(sc);
  });
  CsvTable t{"comms_impact", "scenario,delay_ms_p50,delay_ms_p95,loss_rate", {}};
  bool identical = true;
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& on = r[2 * k].stats;
    const auto& off = r[2 * k + 1].stats;
    const std::string name = to_string(kinds[k]);
    t.rows.push_back(row(name + "_sensing_on", on.delay_percentile_ms(0.5), on.delay_percentile_ms(0.95), on.loss_rate()));
    t.rows.push_back(row(name + "_sensing_off", off.delay_percentile_ms(0.5), off.delay_percentile_ms(0.95), off.loss_rate()));
    identical = identical && on.delays_s == off.delays_s && on.lost == off.lost && on.delivered == off.delivered;
  }
  std::size_t mismatch = r[4].separator_mismatches;
  for (const auto& e : r[4].log) mismatch += e.separator_on != (e.after == MacState::M);
  const double bound = kMaxFrameDuration + long_run.timer_s;
  CsvTable inv{"mac_invariants", "events,violations,separator_mismatches,max_m_dwell_ms,m_dwell_bound_ms", {}};
  inv.rows.push_back(row(r[4].events, r[4].violations, mismatch, r[4].max_m_dwell * 1e3, bound * 1e3));
  out.tables = {t, inv};
  out.checks.push_back(check("sensing on/off give identical delay and loss", identical, identical ? "identical" : "differ"));
  out.checks.push_back(check("separator active exactly in M over the long run",
                             mismatch == 0 && r[4].violations == 0 && r[4].events >= long_run.max_events,
                             num(static_cast<double>(r[4].events)) + " events, " + num(static_cast<double>(mismatch)) +
                                 " mismatches, " + num(static_cast<double>(r[4].violations)) + " violations"));
  out.checks.push_back(check("M episodes end within frame duration + timer", r[4].max_m_dwell <= bound + 1e-12,
                             "max " + num(r[4].max_m_dwell * 1e3) + " ms"));
  return out;
}

/// Spectrogram energy in the 9-15 Hz band for regular and irregular packets.
inline ExperimentOutput run_stft_irregular(const ExperimentContext& ctx) {
  using namespace detail;
  ExperimentOutput out{"stft-irregular", {}, {}};
  const double duration = 8.0, snr_db = ctx.config.real("scene.snr_db");
  // Doppler sweeping 9.5-14.5 Hz: f(t) = 12 + 2.5 sin(2 pi 0.25 t)
  auto signal = [&](const std::vector<double>& times, std::uint64_t s) {
    NoiseSource rng(s);
    ComplexVector x;
    for (double t : times) {
      const double ph = kTwoPi * (12.0 * t - 2.5 / (kTwoPi * 0.25) * std::cos(kTwoPi * 0.25 * t));
      x.push_back(std::polar(1.0, ph) + rng.sample(db_to_linear(-snr_db)));
    }
    return x;
  };
  std::vector<double> freqs;
  for (double f = -60.0; f <= 60.0 + 1e-9; f += 0.5) freqs.push_back(f);
  LassoOptions lo;
  lo.max_iter = 300;
  lo.abs_tol = 1e-6;
  lo.rel_tol = 1e-4;

  struct Case {
    std::string schedule;
    TxSchedule sched;
  };
  std::vector<Case> cases{{"regular", generate_traffic(TrafficModel::regular(100.0), duration)},
                          {"streaming", generate_traffic(TrafficModel::streaming(derive_seed(ctx.seed, 1)), duration)},
                          {"gaming", generate_traffic(TrafficModel::gaming(derive_seed(ctx.seed, 2)), duration)}};
  std::vector<double> uniform(3), sparse(3);
  std::vector<std::vector<double>> ridge_u(3), ridge_s(3), ridge_t(3);
  parallel_for(3, ctx.workers(), [&](std::size_t i) {
    const auto& c = cases[i];
    const auto x = signal(c.sched.times, derive_seed(ctx.seed, 10 + i));
    const auto su = stft(SampleBuffer(x, 1.0 / c.sched.mean_interval()), 64, 16);
    const auto ss = sparse_spectrogram(c.sched.times, x, 64, 16, freqs, lo);
    uniform[i] = su.energy_fraction(9.0, 15.0);
    sparse[i] = ss.energy_fraction(9.0, 15.0);
    ridge_u[i] = su.ridge();
    ridge_s[i] = ss.ridge();
    ridge_t[i] = ss.time_axis;
  });
  CsvTable t{"stft_irregular", "schedule,method,energy_fraction_9_15hz", {}};
  CsvTable r{"stft_ridge", "schedule,frame,time_s,uniform_ridge_hz,sparse_ridge_hz", {}};
  for (std::size_t i = 0; i < 3; ++i) {
    t.rows.push_back(row(cases[i].schedule, "uniform_stft", uniform[i]));
    t.rows.push_back(row(cases[i].schedule, "sparse_nonuniform", sparse[i]));
    for (std::size_t f = 0; f < std::min(ridge_u[i].size(), ridge_s[i].size()); ++f)
      r.rows.push_back(row(cases[i].schedule, f, ridge_t[i][f], ridge_u[i][f], ridge_s[i][f]));
  }
  out.tables = {t, r};
  out.checks.push_back(check("regular packets: >= 80% energy in 9-15 Hz", uniform[0] >= 0.8, num(uniform[0])));
  const double naive = std::max(uniform[1], uniform[2]);
  out.checks.push_back(check("irregular packets, naive uniform STFT: < 50%", naive < 0.5,
                             "streaming " + num(uniform[1]) + ", gaming " + num(uniform[2])));
  const double restored = std::min(sparse[1], sparse[2]);
  out.checks.push_back(check("irregular packets, nonuniform sparse estimate: >= 80%", restored >= 0.8,
                             "streaming " + num(sparse[1]) + ", gaming " + num(sparse[2])));
  return out;
}

/// Per-stage suppression of the separator and its dependence on leakage power.
inline ExperimentOutput run_cancellation_budget(const ExperimentContext& ctx) {
  using namespace detail;
  ExperimentOutput out{"cancellation-budget", {}, {}};
  const RadioConfig radio = ctx.config.radio();
  const SeparatorConfig sep = separator_from(ctx.config);
  const double noise = dbm_to_watts(ctx.config.real("separator.noise_floor_dbm"));
  const double over = ctx.config.real("separator.leakage_over_floor_db");
  const auto x = generate_preamble(radio).buffer.samples();
  const std::size_t seeds = ctx.trials(10);
  std::vector<StageBudget> b(seeds);
  std::vector<double> kept(seeds);
  parallel_for(seeds, ctx.workers(), [&](std::size_t i) {
    const auto ch = LeakageChannel::with_power(noise * db_to_linear(over), derive_seed(ctx.seed, i));
    const auto st = calibrated_state(ch, x, sep, noise, 0.0, derive_seed(ctx.seed, 100 + i));
    b[i] = measure_budget(preamble_capture(ch, x, 1.0, noise, derive_seed(ctx.seed, 200 + i)), x, x, st, sep, noise);
    const Complex g = std::sqrt(noise * 100.0);
    const auto with = preamble_capture(ch, x, 1.0, noise, derive_seed(ctx.seed, 300 + i), g, 6);
    const auto without = preamble_capture(ch, x, 1.0, noise, derive_seed(ctx.seed, 300 + i));
    kept[i] = linear_to_db(preserved_power(with, without, x, x, st, st, sep) /
                           mean_power(std::span<const Complex>(with.reflection)));
  });
  CsvTable t{"cancellation_budget", "seed,first_stage_db,analog_db,digital_db,total_db,residual_over_floor_db,reflection_kept_db", {}};
  bool first = true, analog = true, digital = true, total = true, resid = true, keep = true;
  for (std::size_t i = 0; i < seeds; ++i) {
    t.rows.push_back(row(i, b[i].first_stage_db, b[i].analog_db, b[i].digital_db, b[i].total_db,
                         b[i].residual_over_floor_db, kept[i]));
    first &= std::abs(b[i].first_stage_db - 12.0) <= 1.0;
    analog &= b[i].analog_db >= 35.0;
    digital &= b[i].digital_db >= 20.0;
    total &= b[i].total_db >= 70.0;
    resid &= b[i].residual_over_floor_db <= 3.0;
    keep &= std::abs(kept[i]) <= 1.0;
  }
  // suppression against leakage level (what raising Tx power does)
  CsvTable sweep{"cancellation_vs_leakage", "leakage_over_floor_db,total_db,residual_over_floor_db", {}};
  std::vector<std::pair<double, double>> pairs;
  for (double lvl = over - 20.0; lvl <= over + 10.0 + 1e-9; lvl += 5.0) {
    const auto ch = LeakageChannel::with_power(noise * db_to_linear(lvl), derive_seed(ctx.seed, 500));
    const auto st = calibrated_state(ch, x, sep, noise, 0.0, derive_seed(ctx.seed, 501));
    const auto s = measure_budget(preamble_capture(ch, x, 1.0, noise, derive_seed(ctx.seed, 502)), x, x, st, sep, noise);
    sweep.rows.push_back(row(lvl, s.total_db, s.residual_over_floor_db));
    pairs.push_back({lvl, s.total_db});
  }
  const auto fit = fit_cancellation(pairs);
  sweep.rows.push_back(row("fit_slope_db_per_db", fit.slope, fit.intercept));
  out.tables = {t, sweep};
  auto mean = [&](auto field) {
    double s = 0.0;
    for (const auto& v : b) s += v.*field;
    return num(s / static_cast<double>(b.size()));
  };
  out.checks.push_back(check("first stage 12 +- 1 dB", first, "mean " + mean(&StageBudget::first_stage_db) + " dB"));
  out.checks.push_back(check("analog stage >= 35 dB", analog, "mean " + mean(&StageBudget::analog_db) + " dB"));
  out.checks.push_back(check("digital stage >= 20 dB", digital, "mean " + mean(&StageBudget::digital_db) + " dB"));
  out.checks.push_back(check("total >= 70 dB", total, "mean " + mean(&StageBudget::total_db) + " dB"));
  out.checks.push_back(check("residual within 3 dB of the noise floor", resid, "mean " + mean(&StageBudget::residual_over_floor_db) + " dB"));
  out.checks.push_back(check("reflection kept within 1 dB", keep, "median " + num(median(kept)) + " dB"));
  return out;
}

namespace detail {

struct MonoScene {
  ScenarioGeometry geometry;
  TxSchedule schedule;
  std::vector<CsiMatrix> csi;
  double noise_power = 0.0;
};

// Moving person plus static clutter seen by one monostatic device.
inline MonoScene mono_scene(const RadioConfig& radio, const Pose& pose, const Reflector& person,
                            const std::vector<Reflector>& clutter, const TxSchedule& sched, double target_range,
                            double snr_db, std::size_t antennas, NoiseSource& rng) {
  MonoScene s;
  s.geometry.tx = pose;
  s.geometry.rx = pose;
  s.geometry.array.elements = antennas;
  s.geometry.targets = {person};
  for (const auto& c : clutter) s.geometry.targets.push_back(c);
  s.schedule = sched;
  const double amp = path_gain({target_range, target_range, person.rcs}, radio, 1.0);
  s.noise_power = amp * amp / db_to_linear(snr_db);
  CsiSynthesisOptions o;
  o.noise_power = s.noise_power;
  const auto imp = ImpairmentProfile::monostatic(0.3);
  for (std::size_t l = 0; l < sched.size(); ++l)
    s.csi.push_back(synthesize_csi(s.geometry, imp, radio, sched.times[l], o, &rng, l));
  return s;
}

}  // namespace detail

/// Sparse vs MUSIC vs IFFT ranging of a moving target among static clutter.
inline ExperimentOutput run_ranging(const ExperimentContext& ctx) {
  using namespace detail;
  ExperimentOutput out{"ranging", {}, {}};
  const RadioConfig radio = ctx.config.radio();
  const std::size_t trials = ctx.trials(100);
  const auto clutter_n = static_cast<std::size_t>(ctx.config.integer("scene.clutter_count"));
  const double rcs_max = ctx.config.real("scene.clutter_rcs_max");
  const double snr = ctx.config.real("scene.snr_db"), window = ctx.config.real("estimation.window_s");
  const auto lo = lasso_from(ctx.config);
  const FeatureGrid grid{0.0, 200e-9, 5e-9, 40.0, 1.0};
  std::vector<double> music_grid;
  for (double r = 0.0; r <= 30.0 + 1e-9; r += 0.1) music_grid.push_back(r);
  // smoothing subband: 16 bins, or two thirds of the longest contiguous run on narrow layouts
  std::size_t longest = 0;
  for (const auto& run : detail::contiguous_runs(radio.used_subcarriers)) longest = std::max(longest, run.second);
  const std::size_t subband = std::max<std::size_t>(clutter_n + 2, std::min<std::size_t>(16, 2 * longest / 3));
  std::vector<std::array<double, 4>> res(trials);  // truth, sparse, music, ifft
  const std::string kind = ctx.config.text("traffic.kind");

  parallel_for(trials, ctx.workers(), [&](std::size_t trial) {
    NoiseSource rng(derive_seed(ctx.seed, trial));
    const double r = rng.uniform(1.0, 15.0), th = deg2rad(rng.uniform(-60.0, 60.0));
    const Vec3 p0(r * std::cos(th), r * std::sin(th), 0);
    const double speed = rng.uniform(0.5, 1.0), dir = rng.uniform(0.0, kTwoPi);
    Vec3 vel(speed * std::cos(dir), speed * std::sin(dir), 0);
    const Vec3 u = p0.normalized();
    if (std::abs(vel.dot(u)) < 0.3) vel += 0.3 * u * (vel.dot(u) >= 0 ? 1.0 : -1.0);  // keep a Doppler signature
    Reflector person;
    person.trajectory = linear_motion(p0, vel);
    std::vector<Reflector> clutter;
    for (std::size_t c = 0; c < clutter_n; ++c) {
      const double cr = rng.uniform(1.0, 20.0), ca = deg2rad(rng.uniform(-80.0, 80.0));
      Reflector cl;
      cl.trajectory = static_point(Vec3(cr * std::cos(ca), cr * std::sin(ca), 0));
      cl.rcs = rng.uniform(0.05, rcs_max);
      clutter.push_back(cl);
    }
    const auto sched = generate_traffic(traffic_from(ctx.config, derive_seed(ctx.seed, 10000 + trial)), window);
    const auto s = mono_scene(radio, Pose{}, person, clutter, sched, r, snr, 1, rng);
    double truth = 0.0;
    for (double t : sched.times) truth += person.trajectory(t).norm();
    truth /= static_cast<double>(sched.size());

    const auto fv = estimate_features_sparse(s.csi, sched, radio, grid, lo);
    const auto atom = fv.strongest(2.0);
    const double sparse = atom ? delay_to_range(atom->delay) : 0.0;
    const auto mu = range_music(s.csi, 1 + clutter_n, radio, music_grid, subband);
    const auto pw = path_powers(s.csi, mu.estimates, radio);
    const double music = mu.estimates[static_cast<std::size_t>(std::max_element(pw.begin(), pw.end()) - pw.begin())];
    res[trial] = {truth, sparse, music, range_ifft(s.csi, radio)};
  });

  CsvTable t{"ranging", "trial,truth_range_m,est_range_m,method,snr_db,schedule_kind", {}};
  std::vector<double> es, em, ei;
  const char* methods[] = {"sparse", "music", "ifft"};
  for (std::size_t i = 0; i < trials; ++i) {
    for (std::size_t m = 0; m < 3; ++m) t.rows.push_back(row(i, res[i][0], res[i][m + 1], methods[m], snr, kind));
    es.push_back(std::abs(res[i][1] - res[i][0]));
    em.push_back(std::abs(res[i][2] - res[i][0]));
    ei.push_back(std::abs(res[i][3] - res[i][0]));
  }
  out.tables = {t};
  const double ms = median(es), mm = median(em), mi = median(ei);
  out.checks.push_back(check("median error sparse < MUSIC < IFFT", ms < mm && mm < mi,
                             "sparse " + num(ms) + " m, MUSIC " + num(mm) + " m, IFFT " + num(mi) + " m"));
  out.checks.push_back(check("median sparse error <= 2.84 m", ms <= 2.84, num(ms) + " m"));
  return out;
}

/// Radial velocity under irregular packets: sparse vs FFT on naively gridded packets.
inline ExperimentOutput run_velocity(const ExperimentContext& ctx) {
  using namespace detail;
  ExperimentOutput out{"velocity", {}, {}};
  const RadioConfig radio = ctx.config.radio();
  const std::size_t trials = ctx.trials(40);
  const double snr = ctx.config.real("scene.snr_db"), window = ctx.config.real("estimation.velocity_window_s");
  const auto lo = lasso_from(ctx.config);
  const FeatureGrid grid{0.0, 150e-9, 10e-9, 64.0, 0.5};
  std::vector<std::array<double, 3>> res(trials);
  parallel_for(trials, ctx.workers(), [&](std::size_t trial) {
    NoiseSource rng(derive_seed(ctx.seed, trial));
    const double v = rng.uniform(0.6, 3.5), r = rng.uniform(4.0, 8.0);
    const double sign = rng.uniform(0.0, 1.0) < 0.5 ? -1.0 : 1.0;
    const Vec3 u(1, 0, 0);
    Reflector person;
    person.trajectory = linear_motion(r * u, -sign * v * u);  // positive = approaching
    const auto model = trial % 2 ? TrafficModel::streaming(derive_seed(ctx.seed, 10000 + trial))
                                 : TrafficModel::gaming(derive_seed(ctx.seed, 10000 + trial));
    const auto sched = generate_traffic(model, window);
    const auto s = mono_scene(radio, Pose{}, person, {}, sched, r, snr, 1, rng);
    res[trial] = {sign * v, velocity_sparse(s.csi, sched, radio, grid, lo),
                  velocity_fft(s.csi, sched.naive_uniform(), radio)};
  });
  CsvTable t{"velocity", "trial,schedule_kind,truth_mps,sparse_mps,fft_naive_mps", {}};
  std::vector<double> es, ef;
  for (std::size_t i = 0; i < trials; ++i) {
    t.rows.push_back(row(i, i % 2 ? "streaming" : "gaming", res[i][0], res[i][1], res[i][2]));
    es.push_back(std::abs(res[i][1] - res[i][0]));
    ef.push_back(std::abs(res[i][2] - res[i][0]));
  }
  out.tables = {t};
  const double ms = median(es), mf = median(ef);
  out.checks.push_back(check("sparse median |error| <= 0.2 m/s", ms <= 0.2, num(ms) + " m/s"));
  out.checks.push_back(check("FFT baseline median error larger", mf > ms, "FFT " + num(mf) + " m/s"));
  return out;
}

/// ToF + AoA localization by one device, and ML fusion of two devices.
inline ExperimentOutput run_localization(const ExperimentContext& ctx) {
  using namespace detail;
  ExperimentOutput out{"localization", {}, {}};
  const RadioConfig radio = ctx.config.radio();
  const std::size_t trials = ctx.trials(100);
  const double side = ctx.config.real("scene.size_m"), snr = ctx.config.real("scene.snr_db");
  const double window = ctx.config.real("estimation.window_s");
  const auto clutter_n = static_cast<std::size_t>(ctx.config.integer("scene.clutter_count"));
  const double rcs_max = ctx.config.real("scene.clutter_rcs_max");
  const auto lo = lasso_from(ctx.config);
  const FeatureGrid grid{0.0, 120e-9, 5e-9, 30.0, 1.0};
  const FusionGridSpec spec{0.0, side, 0.0, side, ctx.config.real("fusion.cell_m")};
  const ObservationNoise noise{ctx.config.real("fusion.sigma_range_m"), ctx.config.real("fusion.sigma_aoa_deg")};
  std::vector<double> aoa_grid;
  for (double a = -90.0; a <= 90.0 + 1e-9; a += 0.25) aoa_grid.push_back(a);
  Pose dev[2];
  dev[0].position = Vec3(0, 0, 0);
  dev[0].heading_deg = 45.0;
  dev[1].position = Vec3(side, 0, 0);
  dev[1].heading_deg = 135.0;

  struct Row {
    Eigen::Vector2d truth, single, fused;
  };
  std::vector<Row> res(trials);
  parallel_for(trials, ctx.workers(), [&](std::size_t trial) {
    NoiseSource rng(derive_seed(ctx.seed, trial));
    const Vec3 p0(rng.uniform(1.0, side - 1.0), rng.uniform(1.0, side - 1.0), 0);
    const double speed = rng.uniform(0.5, 1.0), dir = rng.uniform(0.0, kTwoPi);
    const Vec3 vel(speed * std::cos(dir), speed * std::sin(dir), 0);
    Reflector person;
    person.trajectory = linear_motion(p0, vel, 0.5 * window);
    std::vector<Reflector> clutter;
    for (std::size_t c = 0; c < clutter_n; ++c) {
      Reflector cl;
      cl.trajectory = static_point(Vec3(rng.uniform(0.5, side - 0.5), rng.uniform(0.5, side - 0.5), 0));
      cl.rcs = rng.uniform(0.05, 0.5 * rcs_max);
      clutter.push_back(cl);
    }
    const auto sched = generate_traffic(traffic_from(ctx.config, derive_seed(ctx.seed, 10000 + trial)), window);
    std::vector<SensingMessage> msgs;
    for (int d = 0; d < 2; ++d) {
      // the partner device is a known static reflector in each device's scene
      auto scene_clutter = clutter;
      Reflector partner;
      partner.trajectory = static_point(dev[1 - d].position);
      partner.rcs = 0.5;
      scene_clutter.push_back(partner);
      const double r = (p0 - dev[d].position).norm();
      const auto s = mono_scene(radio, dev[d], person, scene_clutter, sched, r, snr, 3, rng);
      const auto fv = estimate_features_sparse(s.csi, sched, radio, grid, lo);
      const auto atom = fv.strongest(1.0);
      if (!atom) continue;
      const auto mu = aoa_music(atom_snapshots(s.csi, sched, radio, *atom), s.geometry.array, 1, aoa_grid);
      SensingMessage m;
      m.device_id = d;
      m.pose = dev[d];
      m.timestamp = sched.times.back();
      m.estimate = SensingEstimate::from_tof_aoa(atom->delay, mu.estimates.at(0));
      msgs.push_back(m);
    }
    Row row_out;
    row_out.truth = {p0.x(), p0.y()};
    row_out.single = msgs.empty() || msgs[0].device_id != 0 ? Eigen::Vector2d(-1e3, -1e3)
                                                           : localize_single(*msgs[0].estimate, dev[0]);
    row_out.fused = msgs.empty() ? Eigen::Vector2d(-1e3, -1e3) : fuse_ml(msgs, spec, noise).position;
    res[trial] = row_out;
  });
  CsvTable t{"localization", "trial,truth_x_m,truth_y_m,single_x_m,single_y_m,fused_x_m,fused_y_m,single_err_m,fused_err_m", {}};
  std::vector<double> es, ef;
  for (std::size_t i = 0; i < trials; ++i) {
    const auto& r = res[i];
    es.push_back((r.single - r.truth).norm());
    ef.push_back((r.fused - r.truth).norm());
    t.rows.push_back(row(i, r.truth.x(), r.truth.y(), r.single.x(), r.single.y(), r.fused.x(), r.fused.y(), es.back(), ef.back()));
  }
  out.tables = {t};
  const double ms = median(es), mf = median(ef);
  out.checks.push_back(check("single-device median error <= 1.5 m", ms <= 1.5, num(ms) + " m"));
  out.checks.push_back(check("two-device fusion median <= single-device median", mf <= ms, num(mf) + " m"));
  return out;
}

// ---------------------------------------------------------------------------
// Registry and output

struct ExperimentInfo {
  const char* name;
  const char* description;
  ExperimentOutput (*run)(const ExperimentContext&);
};

inline const std::vector<ExperimentInfo>& experiments() {
  static const std::vector<ExperimentInfo> list = {
      {"phase-offsets", "monostatic vs bistatic CSI phase offsets and drift", run_phase_offsets},
      {"los-dominance", "reflection preservation: dummy-load calibration vs adapting on capture", run_los_dominance},
      {"motion-ambiguity", "path-length change under monostatic and bistatic geometry", run_motion_ambiguity},
      {"separator-harm", "reception SNR with the separator forced on while receiving", run_separator_harm},
      {"comms-impact", "paired sensing on/off communication statistics and MAC invariants", run_comms_impact},
      {"stft-irregular", "spectrogram energy under regular and irregular packets", run_stft_irregular},
      {"cancellation-budget", "per-stage self-interference suppression", run_cancellation_budget},
      {"ranging", "sparse vs MUSIC vs IFFT ranging", run_ranging},
      {"velocity", "sparse vs FFT radial velocity", run_velocity},
      {"localization", "single-device ToF+AoA and two-device ML fusion", run_localization},
  };
  return list;
}

inline const ExperimentInfo* find_experiment(const std::string& name) {
  for (const auto& e : experiments())
    if (name == e.name) return &e;
  return nullptr;
}

inline std::string output_header(const std::string& experiment, std::uint64_t seed, const std::string& config_hash) {
  return "# experiment=" + experiment + ", seed=" + std::to_string(seed) + ", config_hash=" + config_hash;
}

/// Writes `<dir>/<table>.csv` for every table; returns the paths written.
inline std::vector<std::string> write_outputs(const ExperimentOutput& out, const std::string& dir, std::uint64_t seed,
                                              const std::string& config_hash, bool plots = false) {
  std::filesystem::create_directories(dir);
  std::vector<std::string> paths;
  for (const auto& t : out.tables) {
    const auto path = (std::filesystem::path(dir) / (t.name + ".csv")).string();
    std::ofstream f(path, std::ios::binary);
    f << output_header(out.experiment, seed, config_hash) << '\n' << t.header << '\n';
    for (const auto& r : t.rows) f << r << '\n';
    if (!f) throw std::runtime_error("write_outputs: cannot write " + path);
    paths.push_back(path);
    if (plots) {
      // gnuplot script: first numeric column against the rest
      const auto gp = (std::filesystem::path(dir) / (t.name + ".gp")).string();
      std::ofstream g(gp, std::ios::binary);
      g << output_header(out.experiment, seed, config_hash) << '\n'
        << "set datafile separator ','\nset key autotitle columnhead\nset terminal pngcairo size 900,600\n"
        << "set output '" << t.name << ".png'\nplot '" << t.name << ".csv' using 1:2 with points\n";
      paths.push_back(gp);
    }
  }
  return paths;
}

}  // namespace isacfi
