#pragma once

// Tx-Rx separator: first-stage isolation, single-tap analog cancellator,
// preamble-driven NLMS digital cancellator, and the dummy-load calibration
// protocol that keeps reflections out of the fitted coefficients.

#include <cmath>
#include <cstdint>
#include <limits>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "isacfi/channel.hpp"
#include "isacfi/mac_state.hpp"
#include "isacfi/signal.hpp"

namespace isacfi {

enum class Port { Antenna, DummyLoad };
enum class FirstStageKind { Circulator, HybridCoupler };

inline const char* to_string(Port p) { return p == Port::Antenna ? "antenna" : "dummy_load"; }

/// Hardware Tx-interference response G_H as an FIR over integer sample delays.
struct LeakageChannel {
  ComplexVector taps;
  /// Energy of the port-dependent part relative to the total (what changes
  /// between antenna and dummy load).
  double antenna_contribution = 1e-8;
  /// Relative random-walk amplitude per sqrt(minute).
  double drift_per_sqrt_minute = 1e-5;
  std::uint64_t seed = 7;

  /// Default tap shape: a dominant direct tap plus weak echoes ~40 dB down,
  /// scaled so the leakage power seen by a unit-power reference is `power_w`.
  static LeakageChannel with_power(double power_w, std::uint64_t seed = 7) {
    LeakageChannel ch;
    ch.seed = seed;
    NoiseSource rng(seed);
    const double phase0 = rng.uniform(0.0, kTwoPi);
    ch.taps = {std::polar(1.0, phase0), std::polar(8e-3, rng.uniform(0.0, kTwoPi)),
               std::polar(5e-3, rng.uniform(0.0, kTwoPi)), std::polar(3e-3, rng.uniform(0.0, kTwoPi))};
    const double e = energy(ch.taps);
    for (auto& t : ch.taps) t *= std::sqrt(power_w / e);
    return ch;
  }

  double power() const { return energy(taps); }

  /// Response at simulated time t (seconds) on the given port.
  ComplexVector taps_at(double t, Port port) const {
    ComplexVector out = taps;
    if (t > 0.0 && drift_per_sqrt_minute > 0.0) {
      // Brownian increments on a one-minute lattice, linearly interpolated
      NoiseSource rng(seed ^ 0xD1B54A32D192ED03ULL);
      const double minutes = t / 60.0;
      const auto whole = static_cast<std::size_t>(std::floor(minutes));
      Complex walk{}, next{};
      for (std::size_t i = 0; i <= whole; ++i) {
        walk = next;
        next = walk + drift_per_sqrt_minute * Complex{rng.gaussian(), rng.gaussian()} / std::sqrt(2.0);
      }
      const double frac = minutes - static_cast<double>(whole);
      const Complex rel = walk + (next - walk) * frac;
      for (auto& v : out) v *= (1.0 + rel);
    }
    // the port-dependent part: a weak echo on tap 1 whose sign flips with the port
    if (antenna_contribution > 0.0 && out.size() > 1) {
      const double amp = std::sqrt(antenna_contribution * power());
      out[1] += (port == Port::Antenna ? 1.0 : -1.0) * 0.5 * amp;
    }
    return out;
  }

  /// Normalized correlation between the responses at two instants/ports.
  double correlation(double t1, Port p1, double t2, Port p2) const {
    const auto a = taps_at(t1, p1);
    const auto b = taps_at(t2, p2);
    Complex dot{};
    for (std::size_t i = 0; i < a.size(); ++i) dot += a[i] * std::conj(b[i]);
    return std::abs(dot) / std::sqrt(energy(a) * energy(b));
  }
};

/// Convolution y[n] = sum_d h[d] x[n-d], truncated to `len` samples.
inline ComplexVector fir_filter(std::span<const Complex> h, std::span<const Complex> x, std::size_t len) {
  ComplexVector y(len);
  for (std::size_t n = 0; n < len; ++n) {
    Complex acc{};
    for (std::size_t d = 0; d < h.size() && d <= n; ++d)
      if (n - d < x.size()) acc += h[d] * x[n - d];
    y[n] = acc;
  }
  return y;
}

struct SeparatorConfig {
  FirstStageKind first_stage = FirstStageKind::Circulator;
  double isolation_db = 12.0;
  std::size_t digital_taps = 16;
  double mu = 0.1;                    // NLMS step size
  std::size_t calibration_packets = 8;  // dummy-load captures per calibration
  std::size_t lms_epochs = 60;        // passes over the captured preambles
  double recalibration_interval_s = 60.0;
};

struct CancellatorState {
  Complex analog_tap{};       // G_A
  ComplexVector digital_taps;  // G_D
  double calibrated_at = -std::numeric_limits<double>::infinity();
  Port port = Port::Antenna;
  bool calibrated = false;

  static CancellatorState fresh(const SeparatorConfig& cfg) {
    CancellatorState s;
    s.digital_taps.assign(cfg.digital_taps, Complex{});
    return s;
  }
};

/// Receive signal of one antenna split by origin. The separator acts on each
/// part; cancellation signals it injects are booked against `leakage`.
struct SeparatorSignal {
  ComplexVector leakage;
  ComplexVector reflection;  // sensing reflections, or a remote packet
  ComplexVector noise;

  static SeparatorSignal zeros(std::size_t n) { return {ComplexVector(n), ComplexVector(n), ComplexVector(n)}; }
  std::size_t size() const { return noise.size(); }

  ComplexVector total() const {
    ComplexVector y(size());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = leakage[i] + reflection[i] + noise[i];
    return y;
  }
  double leakage_power(std::size_t n) const { return mean_power(std::span(leakage).first(n)); }
  double total_power(std::size_t n) const {
    const auto t = total();
    return mean_power(std::span<const Complex>(t).first(n));
  }
};

/// Builds the separator input for one antenna of a propagate() result.
inline SeparatorSignal separator_input(const RxComponents& rx, std::size_t antenna) {
  SeparatorSignal s;
  s.leakage = rx.leakage[antenna];
  s.reflection = rx.reflections[antenna];
  for (std::size_t i = 0; i < s.reflection.size(); ++i) s.reflection[i] += rx.los[antenna][i];
  s.noise = rx.noise[antenna];
  return s;
}

// ---------------------------------------------------------------------------
// Stages

/// Circulator / hybrid coupler: attenuates the Tx-port leakage only.
inline SeparatorSignal first_stage(SeparatorSignal in, FirstStageKind kind, double isolation_db = 12.0) {
  (void)kind;  // both parts measured at the same isolation; kept for the log
  const double g = std::pow(10.0, -isolation_db / 20.0);
  for (auto& v : in.leakage) v *= g;
  return in;
}

/// Single complex DQM tap on the tapped Tx reference.
inline SeparatorSignal analog_cancel(SeparatorSignal in, std::span<const Complex> tx_ref, Complex analog_tap) {
  for (std::size_t i = 0; i < in.size() && i < tx_ref.size(); ++i) in.leakage[i] += analog_tap * tx_ref[i];
  return in;
}

/// Least-squares optimum of the single analog degree of freedom:
/// argmin_g sum |d + g x|^2 = -<x, d> / <x, x>.
inline Complex fit_analog_tap(std::span<const Complex> observed, std::span<const Complex> tx_ref) {
  Complex num{};
  double den = 0.0;
  for (std::size_t i = 0; i < observed.size() && i < tx_ref.size(); ++i) {
    num += std::conj(tx_ref[i]) * observed[i];
    den += std::norm(tx_ref[i]);
  }
  return den > 0.0 ? -num / den : Complex{};
}

/// Normalized LMS: y[n] = sum_i w[i] s[n-i], w += mu e conj(u) / (eps + |u|^2).
/// Adapts only over the samples of `reference` (the preamble span).
inline void nlms_adapt(ComplexVector& w, std::span<const Complex> desired, std::span<const Complex> reference,
                       double mu, std::size_t epochs) {
  const std::size_t n_taps = w.size();
  const std::size_t len = std::min(desired.size(), reference.size());
  constexpr double eps = 1e-12;
  for (std::size_t ep = 0; ep < epochs; ++ep) {
    for (std::size_t n = 0; n < len; ++n) {
      Complex y{};
      double norm_u = 0.0;
      for (std::size_t i = 0; i < n_taps && i <= n; ++i) {
        y += w[i] * reference[n - i];
        norm_u += std::norm(reference[n - i]);
      }
      const Complex e = desired[n] - y;
      const double step = mu / (eps + norm_u);
      for (std::size_t i = 0; i < n_taps && i <= n; ++i) w[i] += step * e * std::conj(reference[n - i]);
    }
  }
}

/// Closed-form least-squares FIR fit of `desired` from delayed copies of `reference`.
inline ComplexVector least_squares_fir(std::span<const Complex> desired, std::span<const Complex> reference,
                                       std::size_t n_taps) {
  const std::size_t len = std::min(desired.size(), reference.size());
  Eigen::MatrixXcd u = Eigen::MatrixXcd::Zero(static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(n_taps));
  Eigen::VectorXcd d(static_cast<Eigen::Index>(len));
  for (std::size_t n = 0; n < len; ++n) {
    d(static_cast<Eigen::Index>(n)) = desired[n];
    for (std::size_t i = 0; i < n_taps && i <= n; ++i)
      u(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(i)) = reference[n - i];
  }
  const Eigen::VectorXcd w = u.colPivHouseholderQr().solve(d);
  return ComplexVector(w.data(), w.data() + w.size());
}

/// rx - G_D * preamble_ref over the preamble span; later samples pass unchanged.
inline SampleBuffer digital_cancel(const SampleBuffer& rx, const SampleBuffer& preamble_ref,
                                   const CancellatorState& state) {
  if (!state.calibrated) throw ProtocolViolation("digital_cancel: cancellator not calibrated");
  const auto est = fir_filter(state.digital_taps, preamble_ref.view(), std::min(rx.size(), preamble_ref.size()));
  ComplexVector out = rx.samples();
  for (std::size_t i = 0; i < est.size(); ++i) out[i] -= est[i];
  return SampleBuffer(std::move(out), rx.sample_rate(), rx.start_time());
}

inline SeparatorSignal digital_cancel(SeparatorSignal in, std::span<const Complex> preamble_ref,
                                      const CancellatorState& state) {
  if (!state.calibrated) throw ProtocolViolation("digital_cancel: cancellator not calibrated");
  const auto est = fir_filter(state.digital_taps, preamble_ref, std::min(in.size(), preamble_ref.size()));
  for (std::size_t i = 0; i < est.size(); ++i) in.leakage[i] -= est[i];
  return in;
}

// ---------------------------------------------------------------------------
// Calibration

struct CalibrationLogEntry {
  double time_s = 0.0;
  std::string stage;
  double residual_db = 0.0;  // relative to the leakage power entering the separator
  Port port = Port::DummyLoad;
};

/// CSV columns: time_s,stage,residual_dB,port
inline void write_calibration_log(std::ostream& os, std::span<const CalibrationLogEntry> log, bool header = true) {
  if (header) os << "time_s,stage,residual_dB,port\n";
  for (const auto& e : log) os << e.time_s << ',' << e.stage << ',' << e.residual_db << ',' << to_string(e.port) << '\n';
}

/// Moves the Tx port onto the dummy load ahead of calibration.
inline CancellatorState switch_to_dummy_load(CancellatorState s) {
  s.port = Port::DummyLoad;
  return s;
}

struct CalibrationInput {
  const LeakageChannel* leakage = nullptr;
  std::span<const Complex> tx_ref;  // known preamble (unit mean power)
  double noise_power_w = 0.0;
  double time_s = 0.0;
  std::uint64_t seed = 1;
};

/// Dummy-load calibration: fits G_A by least squares on the post-isolation
/// leakage, then G_D by NLMS on the post-analog residual. Reflections are absent
/// because nothing radiates. Returns the state switched back to the antenna.
inline CancellatorState calibrate(CancellatorState state, const CalibrationInput& in, const SeparatorConfig& cfg,
                                  std::vector<CalibrationLogEntry>* log = nullptr) {
  if (state.port != Port::DummyLoad)
    throw ProtocolViolation("calibrate: Tx port must be on the dummy load");
  if (in.leakage == nullptr) throw std::invalid_argument("calibrate: missing leakage channel");
  const auto taps = in.leakage->taps_at(in.time_s, Port::DummyLoad);
  const std::size_t len = in.tx_ref.size();
  NoiseSource rng(in.seed);

  std::vector<SeparatorSignal> captures;
  for (std::size_t c = 0; c < cfg.calibration_packets; ++c) {
    SeparatorSignal s = SeparatorSignal::zeros(len);
    s.leakage = fir_filter(taps, in.tx_ref, len);
    s.noise = rng.samples(len, in.noise_power_w);
    captures.push_back(first_stage(std::move(s), cfg.first_stage, cfg.isolation_db));
  }

  Complex num{};
  double den = 0.0;
  for (const auto& c : captures) {
    const auto d = c.total();
    for (std::size_t i = 0; i < len; ++i) {
      num += std::conj(in.tx_ref[i]) * d[i];
      den += std::norm(in.tx_ref[i]);
    }
  }
  state.analog_tap = den > 0.0 ? -num / den : Complex{};

  ComplexVector w(cfg.digital_taps);
  const std::size_t passes = std::max<std::size_t>(1, cfg.lms_epochs / std::max<std::size_t>(1, captures.size()));
  for (std::size_t p = 0; p < passes; ++p) {
    for (const auto& c : captures) {
      const auto residual = analog_cancel(c, in.tx_ref, state.analog_tap).total();
      nlms_adapt(w, residual, in.tx_ref, cfg.mu, 1);
    }
  }
  state.digital_taps = std::move(w);
  state.calibrated = true;
  state.calibrated_at = in.time_s;

  if (log) {
    const double p_in = std::max(mean_power(fir_filter(taps, in.tx_ref, len)), 1e-300);
    const auto& c0 = captures.front();
    const auto after_analog = analog_cancel(c0, in.tx_ref, state.analog_tap);
    const auto after_digital = digital_cancel(after_analog, in.tx_ref, state);
    log->push_back({in.time_s, "first_stage", linear_to_db(c0.leakage_power(len) / p_in), Port::DummyLoad});
    log->push_back({in.time_s, "analog", linear_to_db(after_analog.leakage_power(len) / p_in), Port::DummyLoad});
    log->push_back({in.time_s, "digital", linear_to_db(after_digital.leakage_power(len) / p_in), Port::DummyLoad});
  }
  state.port = Port::Antenna;
  return state;
}

/// The preliminary (non-self-adapted) cancellator: fits G_A and G_D on the
/// antenna-port capture itself, reflections included.
inline CancellatorState adapt_on_capture(CancellatorState state, const SeparatorSignal& capture,
                                         std::span<const Complex> tx_ref, const SeparatorConfig& cfg) {
  const auto d = capture.total();
  state.analog_tap = fit_analog_tap(d, tx_ref);
  auto residual = analog_cancel(capture, tx_ref, state.analog_tap).total();
  ComplexVector w(cfg.digital_taps);
  nlms_adapt(w, residual, tx_ref, cfg.mu, cfg.lms_epochs);
  state.digital_taps = std::move(w);
  state.calibrated = true;
  return state;
}

/// Full chain with a fixed state: isolation, analog tap, digital FIR.
inline SeparatorSignal apply_separator(const SeparatorSignal& in, std::span<const Complex> tx_ref,
                                       std::span<const Complex> preamble_ref, const CancellatorState& state,
                                       const SeparatorConfig& cfg) {
  auto s = first_stage(in, cfg.first_stage, cfg.isolation_db);
  s = analog_cancel(std::move(s), tx_ref, state.analog_tap);
  return digital_cancel(std::move(s), preamble_ref, state);
}

/// Separator gated by MAC state: only M cancels; C and B pass through.
/// Requesting cancellation outside M is a protocol violation.
inline std::vector<SeparatorSignal> separator_pipeline(const std::vector<SeparatorSignal>& rx,
                                                       std::span<const Complex> tx_ref,
                                                       std::span<const Complex> preamble_ref,
                                                       const CancellatorState& state, MacState mode,
                                                       const SeparatorConfig& cfg, bool force_cancel = false) {
  if (mode != MacState::M) {
    if (force_cancel) throw ProtocolViolation("separator_pipeline: cancellation requested outside M-state");
    return rx;
  }
  if (!state.calibrated || state.port != Port::Antenna)
    throw ProtocolViolation("separator_pipeline: M-state requires a calibrated state on the antenna port");
  std::vector<SeparatorSignal> out;
  out.reserve(rx.size());
  for (const auto& s : rx) out.push_back(apply_separator(s, tx_ref, preamble_ref, state, cfg));
  return out;
}

/// Per-stage suppression of the separator on a leakage-plus-noise input,
/// measured on total power after each stage (what a spectrum analyser sees).
struct StageBudget {
  double first_stage_db = 0.0;
  double analog_db = 0.0;
  double digital_db = 0.0;
  double total_db = 0.0;
  double residual_over_floor_db = 0.0;
};

inline StageBudget measure_budget(const SeparatorSignal& in, std::span<const Complex> tx_ref,
                                  std::span<const Complex> preamble_ref, const CancellatorState& state,
                                  const SeparatorConfig& cfg, double noise_power_w) {
  const std::size_t n = std::min(in.size(), preamble_ref.size());
  const auto s1 = first_stage(in, cfg.first_stage, cfg.isolation_db);
  const auto s2 = analog_cancel(s1, tx_ref, state.analog_tap);
  const auto s3 = digital_cancel(s2, preamble_ref, state);
  const double p0 = in.total_power(n), p1 = s1.total_power(n), p2 = s2.total_power(n), p3 = s3.total_power(n);
  return {linear_to_db(p0 / p1), linear_to_db(p1 / p2), linear_to_db(p2 / p3), linear_to_db(p0 / p3),
          linear_to_db(p3 / noise_power_w)};
}

/// Reflection power that survives the separator: output with the reflection
/// minus output without it, each run through its own state.
inline double preserved_power(const SeparatorSignal& with, const SeparatorSignal& without,
                              std::span<const Complex> tx_ref, std::span<const Complex> preamble_ref,
                              const CancellatorState& state_with, const CancellatorState& state_without,
                              const SeparatorConfig& cfg) {
  const auto a = apply_separator(with, tx_ref, preamble_ref, state_with, cfg).total();
  const auto b = apply_separator(without, tx_ref, preamble_ref, state_without, cfg).total();
  const std::size_t n = std::min({a.size(), b.size(), preamble_ref.size()});
  ComplexVector d(n);
  for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
  return mean_power(d);
}

/// SNR lost by a remote packet when the separator is left running during a
/// reception and adapts on the remote preamble as if it were leakage. The
/// remote packet carries the same preamble at `remote_snr_db` over the floor,
/// rotated by the peer's carrier offset (`cfo_cycles_per_sample` = CFO / f_s).
inline double forced_reception_loss_db(const SeparatorConfig& cfg, std::span<const Complex> preamble,
                                       double noise_power_w, double remote_snr_db, std::uint64_t seed,
                                       double cfo_cycles_per_sample = 0.0, std::size_t delay = 3) {
  const std::size_t n = preamble.size();
  const Complex g = std::sqrt(noise_power_w * db_to_linear(remote_snr_db));
  SeparatorSignal with = SeparatorSignal::zeros(n);
  NoiseSource rng(seed);
  with.noise = rng.samples(n, noise_power_w);
  SeparatorSignal without = with;
  for (std::size_t i = delay; i < n; ++i)
    with.reflection[i] = g * preamble[i - delay] * std::polar(1.0, kTwoPi * cfo_cycles_per_sample * static_cast<double>(i));
  const auto forced = adapt_on_capture(CancellatorState::fresh(cfg), with, preamble, cfg);
  const auto clean = adapt_on_capture(CancellatorState::fresh(cfg), without, preamble, cfg);
  const double kept = preserved_power(with, without, preamble, preamble, forced, clean, cfg);
  const double before = mean_power(std::span<const Complex>(with.reflection));
  return linear_to_db(before / std::max(kept, 1e-300));
}

// ---------------------------------------------------------------------------
// Tx power regression

struct CancellationFit {
  double slope = 0.0;      // dB per dBm
  double intercept = 0.0;  // dB
  double at(double tx_power_dbm) const { return slope * tx_power_dbm + intercept; }
};

/// Ordinary least squares of cancellation (dB) against Tx power (dBm).
inline CancellationFit fit_cancellation(std::span<const std::pair<double, double>> pairs) {
  if (pairs.size() < 2) throw std::invalid_argument("fit_cancellation: need at least two calibration pairs");
  double mx = 0.0, my = 0.0;
  for (const auto& [x, y] : pairs) {
    mx += x;
    my += y;
  }
  mx /= static_cast<double>(pairs.size());
  my /= static_cast<double>(pairs.size());
  double sxx = 0.0, sxy = 0.0;
  for (const auto& [x, y] : pairs) {
    sxx += (x - mx) * (x - mx);
    sxy += (x - mx) * (y - my);
  }
  if (sxx <= 0.0) throw std::invalid_argument("fit_cancellation: Tx powers must not all be equal");
  const double slope = sxy / sxx;
  return {slope, my - slope * mx};
}

struct CancellationSetting {
  double tx_power_dbm = 0.0;
  double cancellation_db = 0.0;  // total suppression needed to reach the noise floor
};

inline CancellationSetting params_for_power(double tx_power_dbm, std::span<const std::pair<double, double>> pairs) {
  const auto fit = fit_cancellation(pairs);
  return {tx_power_dbm, fit.at(tx_power_dbm)};
}

}  // namespace isacfi
