#pragma once

// Multipath air channel with radar-equation amplitudes, target trajectories,
// clock impairments (CFO, CPO, SFO, PDD), antenna-array steering, and the
// bistatic range-projection geometry.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include <Eigen/Dense>

#include "isacfi/ofdm.hpp"
#include "isacfi/signal.hpp"

namespace isacfi {

using Vec3 = Eigen::Vector3d;

inline constexpr double kPi = std::numbers::pi;

inline double deg2rad(double d) { return d * kPi / 180.0; }
inline double rad2deg(double r) { return r * 180.0 / kPi; }

// ---------------------------------------------------------------------------
// Radar equation

struct PathGeometry {
  double tx_range = 1.0;  // m
  double rx_range = 1.0;  // m
  double rcs = 1.0;       // m^2
};

/// alpha_p = sqrt(P G_tx G_rx lambda^2 sigma / ((4 pi)^3 (R_tx R_rx)^2))
inline double path_gain(const PathGeometry& g, const RadioConfig& radio, double tx_power_w,
                        double gain_tx = 1.0, double gain_rx = 1.0) {
  if (!(g.tx_range > 0.0) || !(g.rx_range > 0.0)) throw std::invalid_argument("path_gain: ranges must be positive");
  if (g.rcs < 0.0) throw std::invalid_argument("path_gain: negative rcs");
  const double lambda = radio.wavelength();
  const double rr = g.tx_range * g.rx_range;
  const double p = tx_power_w * gain_tx * gain_rx * lambda * lambda * g.rcs /
                   (std::pow(4.0 * kPi, 3) * rr * rr);
  return std::sqrt(p);
}

/// Direct-path amplitude consistent with power_ratio: P_los = P G G lambda^2 / ((4 pi)^2 L),
/// with L in meters against a 1 m reference.
inline double los_gain(double los_distance, const RadioConfig& radio, double tx_power_w, double gain_tx = 1.0,
                       double gain_rx = 1.0) {
  if (!(los_distance > 0.0)) throw std::invalid_argument("los_gain: LoS distance must be positive");
  const double lambda = radio.wavelength();
  return std::sqrt(tx_power_w * gain_tx * gain_rx * lambda * lambda / (std::pow(4.0 * kPi, 2) * los_distance));
}

/// eta_p = L sigma / (4 pi (R_tx R_rx)^2), in dB.
inline double power_ratio(double los_distance, const PathGeometry& g) {
  if (!(los_distance > 0.0)) throw std::invalid_argument("power_ratio: monostatic geometry has no LoS path");
  if (!(g.tx_range > 0.0) || !(g.rx_range > 0.0)) throw std::invalid_argument("power_ratio: ranges must be positive");
  const double rr = g.tx_range * g.rx_range;
  return linear_to_db(los_distance * g.rcs / (4.0 * kPi * rr * rr));
}

// ---------------------------------------------------------------------------
// Bistatic geometry

/// Change in Tx-target-Rx path length for a displacement of the target.
inline double bistatic_projection(const Vec3& tx, const Vec3& rx, const Vec3& target, const Vec3& displacement) {
  constexpr double eps = 1e-12;
  if ((target - tx).norm() < eps || (target - rx).norm() < eps)
    throw std::invalid_argument("bistatic_projection: target coincides with a device");
  const Vec3 moved = target + displacement;
  if ((moved - tx).norm() < eps || (moved - rx).norm() < eps)
    throw std::invalid_argument("bistatic_projection: displaced target coincides with a device");
  const double before = (target - tx).norm() + (target - rx).norm();
  const double after = (moved - tx).norm() + (moved - rx).norm();
  return after - before;
}

/// Unit normal of the equal-path-length ellipsoid through `target` (the field-line direction).
inline Vec3 field_line_direction(const Vec3& tx, const Vec3& rx, const Vec3& target) {
  const Vec3 g = (target - tx).normalized() + (target - rx).normalized();
  if (g.norm() < 1e-12) throw std::invalid_argument("field_line_direction: target on the Tx-Rx segment");
  return g.normalized();
}

// ---------------------------------------------------------------------------
// Impairments

/// Optional slow random walk of the offsets, per sqrt(second).
struct DriftModel {
  double cfo_hz = 0.0;
  double sfo = 0.0;
  double cpo_rad = 0.0;
};

struct ImpairmentProfile {
  double cfo_hz = 0.0;     // gamma_c = f_c - f_c'
  double cpo_rad = 0.0;    // phi_c in [0, 2 pi)
  double sfo = 0.0;        // beta = (T_s - T_s') / T_s'
  double pdd_samples = 0.0;  // extra detection delay epsilon applied by the CSI model
  DriftModel drift;

  void validate() const {
    if (!(std::abs(sfo) < 1e-3)) throw std::invalid_argument("ImpairmentProfile: |sfo| must be < 1e-3");
    if (!(cpo_rad >= 0.0 && cpo_rad < kTwoPi)) throw std::invalid_argument("ImpairmentProfile: cpo outside [0, 2pi)");
    if (!std::isfinite(cfo_hz) || !std::isfinite(pdd_samples))
      throw std::invalid_argument("ImpairmentProfile: non-finite offset");
  }

  /// Co-located Tx/Rx on one clock: only a fixed carrier phase remains.
  static ImpairmentProfile monostatic(double cpo = 0.0) { return {0.0, cpo, 0.0, 0.0, {}}; }

  /// Independent clocks: CFO and SFO uniform within +-ppm, CPO uniform, redrawn per boot.
  static ImpairmentProfile random_bistatic(const RadioConfig& radio, NoiseSource& rng, double ppm = 20.0) {
    ImpairmentProfile p;
    p.cfo_hz = rng.uniform(-ppm, ppm) * 1e-6 * radio.carrier_freq;
    p.sfo = rng.uniform(-ppm, ppm) * 1e-6;
    p.cpo_rad = rng.uniform(0.0, kTwoPi);
    return p;
  }

  /// Profile after `elapsed` seconds of drift (deterministic for a given seed).
  ImpairmentProfile drifted(double elapsed, std::uint64_t seed) const {
    if (elapsed <= 0.0) return *this;
    NoiseSource rng(seed);
    const double s = std::sqrt(elapsed);
    ImpairmentProfile p = *this;
    p.cfo_hz += drift.cfo_hz * s * rng.gaussian();
    p.sfo += drift.sfo * s * rng.gaussian();
    p.cpo_rad = std::fmod(p.cpo_rad + drift.cpo_rad * s * rng.gaussian() + 10.0 * kTwoPi, kTwoPi);
    return p;
  }
};

/// Phase (radians) the offsets impose on subcarrier k of symbol l:
/// -2 pi l gamma_c / (df N) - phi_c - 2 pi k beta / N - 2 pi k eps / N (phi_c in radians).
inline double impairment_phase(const ImpairmentProfile& imp, const RadioConfig& radio, int k, double symbol_index) {
  const double n = static_cast<double>(radio.fft_size);
  const double df = radio.subcarrier_spacing();
  return -kTwoPi * symbol_index * imp.cfo_hz / (df * n) - imp.cpo_rad - kTwoPi * k * imp.sfo / n -
         kTwoPi * k * imp.pdd_samples / n;
}

// ---------------------------------------------------------------------------
// Scene description

using Trajectory = std::function<Vec3(double)>;

inline Trajectory static_point(Vec3 p) {
  return [p](double) { return p; };
}

inline Trajectory linear_motion(Vec3 p0, Vec3 velocity, double t_ref = 0.0) {
  return [p0, velocity, t_ref](double t) -> Vec3 { return p0 + velocity * (t - t_ref); };
}

/// Chest displacement along `direction`: amplitude 5 mm, 0.25 Hz by default.
inline Trajectory breathing(Vec3 p0, Vec3 direction, double amplitude = 5e-3, double rate_hz = 0.25) {
  const Vec3 u = direction.normalized();
  return [p0, u, amplitude, rate_hz](double t) -> Vec3 { return p0 + u * amplitude * std::sin(kTwoPi * rate_hz * t); };
}

struct Pose {
  Vec3 position = Vec3::Zero();
  double heading_deg = 0.0;  // boresight direction in the x-y plane

  Vec3 boresight() const {
    const double h = deg2rad(heading_deg);
    return {std::cos(h), std::sin(h), 0.0};
  }
};

/// Uniform linear array along the device's left axis (heading + 90 deg).
struct AntennaArray {
  std::size_t elements = 3;
  double spacing_wavelengths = 0.5;

  /// a_m(theta) = exp(j 2 pi m d sin(theta)), theta from boresight, positive counterclockwise.
  ComplexVector steering(double aoa_deg) const {
    ComplexVector a(elements);
    const double s = std::sin(deg2rad(aoa_deg));
    for (std::size_t m = 0; m < elements; ++m)
      a[m] = std::polar(1.0, kTwoPi * static_cast<double>(m) * spacing_wavelengths * s);
    return a;
  }
};

/// Angle of `point` seen from `pose`, degrees from boresight in (-180, 180].
inline double bearing_deg(const Pose& pose, const Vec3& point) {
  const Vec3 d = point - pose.position;
  return rad2deg(wrap_phase(std::atan2(d.y(), d.x()) - deg2rad(pose.heading_deg)));
}

struct Reflector {
  Trajectory trajectory = static_point(Vec3::Zero());
  double rcs = 1.0;
  std::optional<double> amplitude;  // overrides the radar equation when set
};

enum class PathKind { Leakage = 0, LineOfSight = 1, Reflection = 2 };

/// One resolvable path at an instant.
struct PropagationPath {
  PathKind kind = PathKind::Reflection;
  std::size_t index = 0;  // 0 leakage, 1 LoS, >1 reflections
  double delay = 0.0;     // s, includes motion-induced delay
  double amplitude = 0.0;
  double aoa_deg = 0.0;   // at the receive array
  double aod_deg = 0.0;   // at the transmit array
  double tx_range = 0.0;
  double rx_range = 0.0;
};

struct ScenarioGeometry {
  Pose tx;
  Pose rx;
  AntennaArray array;
  std::vector<Reflector> targets;
  double tx_power_w = 1.0;
  double gain_tx = 1.0;
  double gain_rx = 1.0;
  bool include_los = true;             // ignored for monostatic scenes
  std::vector<Complex> leakage_taps;   // p = 0, integer sample delays 0..3 (monostatic only)

  double los_distance() const { return (tx.position - rx.position).norm(); }
  bool monostatic() const { return los_distance() == 0.0; }

  void validate() const {
    if (leakage_taps.size() > 4) throw std::invalid_argument("ScenarioGeometry: leakage spans at most 4 taps");
    if (!leakage_taps.empty() && !monostatic())
      throw std::invalid_argument("ScenarioGeometry: leakage path only exists in monostatic scenes");
    for (const auto& t : targets)
      if (t.rcs < 0.0) throw std::invalid_argument("ScenarioGeometry: negative rcs");
  }

  /// Air paths (LoS and reflections) evaluated at time t. Leakage is handled separately.
  std::vector<PropagationPath> paths_at(double t, const RadioConfig& radio) const {
    std::vector<PropagationPath> out;
    std::size_t index = 2;
    if (!monostatic() && include_los) {
      PropagationPath p;
      p.kind = PathKind::LineOfSight;
      p.index = 1;
      p.tx_range = p.rx_range = los_distance();
      p.delay = los_distance() / kSpeedOfLight;
      p.amplitude = los_gain(los_distance(), radio, tx_power_w, gain_tx, gain_rx);
      p.aoa_deg = bearing_deg(rx, tx.position);
      p.aod_deg = bearing_deg(tx, rx.position);
      out.push_back(p);
    }
    for (const auto& target : targets) {
      const Vec3 pos = target.trajectory(t);
      PropagationPath p;
      p.kind = PathKind::Reflection;
      p.index = index++;
      p.tx_range = (pos - tx.position).norm();
      p.rx_range = (pos - rx.position).norm();
      if (!(p.tx_range > 0.0) || !(p.rx_range > 0.0))
        throw std::invalid_argument("ScenarioGeometry: target coincides with a device");
      p.delay = (p.tx_range + p.rx_range) / kSpeedOfLight;
      p.amplitude = target.amplitude ? *target.amplitude
                                     : path_gain({p.tx_range, p.rx_range, target.rcs}, radio, tx_power_w,
                                                 gain_tx, gain_rx);
      p.aoa_deg = bearing_deg(rx, pos);
      p.aod_deg = bearing_deg(tx, pos);
      out.push_back(p);
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Frequency-domain CSI model

struct CsiSynthesisOptions {
  bool mimo_tx = false;          // steer the transmit array too (n_tx = array elements)
  double noise_power = 0.0;      // per-entry complex Gaussian variance
  double symbol_index = 0.0;     // l in the impairment phase
  std::vector<PropagationPath> extra_paths;  // e.g. residual leakage after cancellation
};

/// H[r][t][k] = sum_p alpha_p a_r(aoa) a_t(aod) exp(-j 2 pi (f_c + k df) tau_p(t)),
/// times the impairment phase for subcarrier k and symbol l, plus noise.
inline CsiMatrix synthesize_csi(const ScenarioGeometry& geom, const ImpairmentProfile& imp, const RadioConfig& radio,
                                double t, const CsiSynthesisOptions& opts = {}, NoiseSource* noise = nullptr,
                                std::uint64_t packet_id = 0) {
  const std::size_t n_rx = geom.array.elements;
  const std::size_t n_tx = opts.mimo_tx ? geom.array.elements : 1;
  const std::size_t n_sc = radio.num_subcarriers();
  CsiMatrix csi(n_rx, n_tx, n_sc, t, packet_id);
  auto paths = geom.paths_at(t, radio);
  paths.insert(paths.end(), opts.extra_paths.begin(), opts.extra_paths.end());
  const double df = radio.subcarrier_spacing();

  std::vector<Complex> imp_phase(n_sc);
  for (std::size_t k = 0; k < n_sc; ++k)
    imp_phase[k] = std::polar(1.0, impairment_phase(imp, radio, radio.used_subcarriers[k], opts.symbol_index));

  for (const auto& p : paths) {
    const auto a_rx = geom.array.steering(p.aoa_deg);
    const auto a_tx = opts.mimo_tx ? geom.array.steering(p.aod_deg) : ComplexVector{Complex{1.0, 0.0}};
    // exp(-j 2 pi f_c tau) computed once, subcarrier term by rotation
    const Complex carrier = std::polar(p.amplitude, -kTwoPi * std::fmod(radio.carrier_freq * p.delay, 1.0));
    std::vector<Complex> sc(n_sc);
    for (std::size_t k = 0; k < n_sc; ++k)
      sc[k] = carrier * std::polar(1.0, -kTwoPi * radio.used_subcarriers[k] * df * p.delay);
    for (std::size_t r = 0; r < n_rx; ++r)
      for (std::size_t tt = 0; tt < n_tx; ++tt) {
        const Complex w = a_rx[r] * a_tx[tt];
        for (std::size_t k = 0; k < n_sc; ++k) csi.at(r, tt, k) += w * sc[k];
      }
  }
  for (std::size_t r = 0; r < n_rx; ++r)
    for (std::size_t tt = 0; tt < n_tx; ++tt)
      for (std::size_t k = 0; k < n_sc; ++k) {
        csi.at(r, tt, k) *= imp_phase[k];
        if (noise && opts.noise_power > 0.0) csi.at(r, tt, k) += noise->sample(opts.noise_power);
      }
  return csi;
}

// ---------------------------------------------------------------------------
// Time-domain propagation

/// Delays x by `delay` samples (fractional allowed) with a frequency-domain
/// phase ramp on a zero-padded copy; output has `out_len` samples.
inline ComplexVector fractional_delay(std::span<const Complex> x, double delay, std::size_t out_len) {
  std::size_t m = 1;
  while (m < out_len + x.size() + 64) m <<= 1;
  ComplexVector padded(m);
  std::copy(x.begin(), x.end(), padded.begin());
  auto spec = fft(padded, m);
  for (std::size_t i = 0; i < m; ++i) {
    const double f = (i < m / 2 ? static_cast<double>(i) : static_cast<double>(i) - static_cast<double>(m)) /
                     static_cast<double>(m);
    spec[i] *= std::polar(1.0, -kTwoPi * f * delay);
  }
  auto y = ifft(spec);
  y.resize(out_len);
  return y;
}

/// Windowed-sinc resampling: y[n] = x(n (1 + beta)), i.e. the receiver samples
/// with period T_s = T_s' (1 + beta) against the transmitter's T_s'.
inline ComplexVector resample_sfo(std::span<const Complex> x, double beta) {
  if (beta == 0.0) return {x.begin(), x.end()};
  constexpr int half = 16;
  ComplexVector y(x.size());
  for (std::size_t n = 0; n < y.size(); ++n) {
    const double pos = static_cast<double>(n) * (1.0 + beta);
    const auto centre = static_cast<long>(std::floor(pos));
    Complex acc{};
    for (long i = centre - half + 1; i <= centre + half; ++i) {
      if (i < 0 || i >= static_cast<long>(x.size())) continue;
      const double u = pos - static_cast<double>(i);
      const double sinc = std::abs(u) < 1e-12 ? 1.0 : std::sin(kPi * u) / (kPi * u);
      const double w = 0.42 + 0.5 * std::cos(kPi * u / half) + 0.08 * std::cos(2.0 * kPi * u / half);
      acc += x[static_cast<std::size_t>(i)] * sinc * w;
    }
    y[n] = acc;
  }
  return y;
}

/// Received signal split by origin; every stage downstream can be applied to
/// each part separately, which makes per-component power exactly measurable.
struct RxComponents {
  std::vector<ComplexVector> leakage;      // p = 0, per antenna
  std::vector<ComplexVector> los;          // p = 1
  std::vector<ComplexVector> reflections;  // p > 1
  std::vector<ComplexVector> noise;
  double sample_rate = 20e6;
  double start_time = 0.0;

  std::size_t antennas() const { return noise.size(); }

  SampleBuffer total(std::size_t antenna) const {
    const auto& n = noise[antenna];
    ComplexVector y(n.size());
    for (std::size_t i = 0; i < y.size(); ++i)
      y[i] = leakage[antenna][i] + los[antenna][i] + reflections[antenna][i] + n[i];
    return SampleBuffer(std::move(y), sample_rate, start_time);
  }

  std::vector<SampleBuffer> totals() const {
    std::vector<SampleBuffer> out;
    for (std::size_t a = 0; a < antennas(); ++a) out.push_back(total(a));
    return out;
  }
};

struct PropagateOptions {
  double noise_floor_dbm = -90.0;
  bool add_noise = true;
  std::size_t tail = 0;  // extra output samples beyond the input length
};

/// Time-domain convolution over the scene's paths, then the receiver's
/// down-conversion offsets, SFO resampling and additive noise.
inline RxComponents propagate(const SampleBuffer& tx, const ScenarioGeometry& geom, const ImpairmentProfile& imp,
                              const RadioConfig& radio, double t0, std::uint64_t seed,
                              const PropagateOptions& opts = {}) {
  geom.validate();
  imp.validate();
  const double fs = tx.sample_rate();
  const auto paths = geom.paths_at(t0, radio);
  double max_delay = 0.0;
  for (const auto& p : paths) max_delay = std::max(max_delay, p.delay * fs);
  const std::size_t len = tx.size() + opts.tail;
  const std::size_t n_ant = geom.array.elements;

  RxComponents out;
  out.sample_rate = fs;
  out.start_time = t0;
  out.leakage.assign(n_ant, ComplexVector(len));
  out.los.assign(n_ant, ComplexVector(len));
  out.reflections.assign(n_ant, ComplexVector(len));
  out.noise.assign(n_ant, ComplexVector(len));

  const auto& x = tx.samples();
  if (!geom.leakage_taps.empty()) {
    for (std::size_t i = 0; i < len; ++i) {
      Complex acc{};
      for (std::size_t d = 0; d < geom.leakage_taps.size(); ++d)
        if (i >= d && i - d < x.size()) acc += geom.leakage_taps[d] * x[i - d];
      for (std::size_t a = 0; a < n_ant; ++a) out.leakage[a][i] = acc;
    }
  }

  std::size_t target_idx = 0;
  for (const auto& p : paths) {
    const auto envelope = fractional_delay(x, p.delay * fs, len);
    const auto steer = geom.array.steering(p.aoa_deg);
    const bool moving = p.kind == PathKind::Reflection;
    const Reflector* target = moving ? &geom.targets[target_idx++] : nullptr;
    for (std::size_t i = 0; i < len; ++i) {
      double delay = p.delay;
      if (target) {
        const Vec3 pos = target->trajectory(tx.time_of(i));
        delay = ((pos - geom.tx.position).norm() + (pos - geom.rx.position).norm()) / kSpeedOfLight;
      }
      const Complex v = envelope[i] * std::polar(p.amplitude, -kTwoPi * std::fmod(radio.carrier_freq * delay, 1.0));
      auto& dst = moving ? out.reflections : out.los;
      for (std::size_t a = 0; a < n_ant; ++a) dst[a][i] += v * steer[a];
    }
  }

  // receiver down-conversion: exp(-j 2 pi (gamma_c t + phi_c))
  if (imp.cfo_hz != 0.0 || imp.cpo_rad != 0.0) {
    for (std::size_t i = 0; i < len; ++i) {
      const Complex rot = std::polar(1.0, -kTwoPi * (imp.cfo_hz * tx.time_of(i)) - imp.cpo_rad);
      for (std::size_t a = 0; a < n_ant; ++a) {
        out.leakage[a][i] *= rot;
        out.los[a][i] *= rot;
        out.reflections[a][i] *= rot;
      }
    }
  }
  if (imp.sfo != 0.0) {
    for (std::size_t a = 0; a < n_ant; ++a) {
      out.leakage[a] = resample_sfo(out.leakage[a], imp.sfo);
      out.los[a] = resample_sfo(out.los[a], imp.sfo);
      out.reflections[a] = resample_sfo(out.reflections[a], imp.sfo);
    }
  }
  if (opts.add_noise) {
    NoiseSource rng(seed);
    for (std::size_t a = 0; a < n_ant; ++a) out.noise[a] = rng.floor_dbm(len, opts.noise_floor_dbm);
  }
  return out;
}

}  // namespace isacfi
