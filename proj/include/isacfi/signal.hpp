#pragma once

// Signal primitives: complex sample buffers, FFT, nonuniform DFT, STFT,
// phase unwrapping, windows and seeded complex Gaussian noise.

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <unsupported/Eigen/FFT>

namespace isacfi {

using Complex = std::complex<double>;
using ComplexVector = std::vector<Complex>;

inline constexpr double kSpeedOfLight = 299792458.0;
inline constexpr double kTwoPi = 2.0 * std::numbers::pi;

inline double db_to_linear(double db) { return std::pow(10.0, db / 10.0); }
inline double linear_to_db(double lin) { return 10.0 * std::log10(lin); }
inline double dbm_to_watts(double dbm) { return std::pow(10.0, (dbm - 30.0) / 10.0); }
inline double watts_to_dbm(double w) { return 10.0 * std::log10(w) + 30.0; }

/// Mean of |x|^2; zero for an empty span.
inline double mean_power(std::span<const Complex> x) {
  if (x.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& v : x) acc += std::norm(v);
  return acc / static_cast<double>(x.size());
}

inline double energy(std::span<const Complex> x) {
  double acc = 0.0;
  for (const auto& v : x) acc += std::norm(v);
  return acc;
}

/// Uniformly sampled complex baseband sequence.
class SampleBuffer {
 public:
  SampleBuffer() = default;
  SampleBuffer(ComplexVector samples, double sample_rate, double start_time = 0.0)
      : samples_(std::move(samples)), sample_rate_(sample_rate), start_time_(start_time) {
    if (!(sample_rate_ > 0.0) || !std::isfinite(sample_rate_))
      throw std::invalid_argument("SampleBuffer: sample_rate must be positive");
    for (const auto& v : samples_) {
      if (!std::isfinite(v.real()) || !std::isfinite(v.imag()))
        throw std::invalid_argument("SampleBuffer: non-finite sample");
    }
  }

  const ComplexVector& samples() const { return samples_; }
  std::span<const Complex> view() const { return samples_; }
  double sample_rate() const { return sample_rate_; }
  double sample_period() const { return 1.0 / sample_rate_; }
  double start_time() const { return start_time_; }
  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }
  double power() const { return mean_power(samples_); }
  double time_of(std::size_t n) const { return start_time_ + static_cast<double>(n) / sample_rate_; }
  const Complex& operator[](std::size_t n) const { return samples_[n]; }

 private:
  ComplexVector samples_;
  double sample_rate_ = 1.0;
  double start_time_ = 0.0;
};

// ---------------------------------------------------------------------------
// Uniform transforms

/// size-point forward DFT of the first `size` samples of x.
inline ComplexVector fft(std::span<const Complex> x, std::size_t size) {
  if (size == 0) throw std::invalid_argument("fft: size must be >= 1");
  if (x.size() < size) throw std::invalid_argument("fft: buffer shorter than transform size");
  std::vector<Complex> in(x.begin(), x.begin() + static_cast<std::ptrdiff_t>(size));
  std::vector<Complex> out;
  Eigen::FFT<double> engine;
  engine.fwd(out, in);
  return out;
}

inline ComplexVector fft(std::span<const Complex> x) { return fft(x, x.size()); }

inline ComplexVector fft(const SampleBuffer& buf, std::size_t size) { return fft(buf.view(), size); }

/// Inverse DFT with 1/N scaling, so ifft(fft(x)) == x.
inline ComplexVector ifft(std::span<const Complex> spectrum) {
  if (spectrum.empty()) throw std::invalid_argument("ifft: empty spectrum");
  std::vector<Complex> in(spectrum.begin(), spectrum.end());
  std::vector<Complex> out;
  Eigen::FFT<double> engine;
  engine.inv(out, in);
  return out;
}

/// Maps a signed bin index (negative = below DC) to its position in an N-point DFT.
inline std::size_t bin_position(int k, std::size_t n) {
  const auto nn = static_cast<int>(n);
  return static_cast<std::size_t>(((k % nn) + nn) % nn);
}

// ---------------------------------------------------------------------------
// Nonuniform DFT

/// c(f) = sum_m values[m] * exp(-j 2 pi f times[m]), evaluated directly.
inline ComplexVector nonuniform_dft(std::span<const double> times, std::span<const Complex> values,
                                    std::span<const double> freqs) {
  if (times.empty() || values.empty())
    throw std::invalid_argument("nonuniform_dft: empty input");
  if (times.size() != values.size())
    throw std::invalid_argument("nonuniform_dft: times and values differ in length");
  for (std::size_t m = 1; m < times.size(); ++m) {
    if (!(times[m] > times[m - 1]))
      throw std::invalid_argument("nonuniform_dft: times must be strictly increasing");
  }
  ComplexVector out(freqs.size());
  for (std::size_t i = 0; i < freqs.size(); ++i) {
    Complex acc{0.0, 0.0};
    for (std::size_t m = 0; m < times.size(); ++m)
      acc += values[m] * std::polar(1.0, -kTwoPi * freqs[i] * times[m]);
    out[i] = acc;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Windows and STFT

enum class Window { Hann, Rectangular };

/// Periodic Hann or rectangular window of length n.
inline std::vector<double> window_coefficients(std::size_t n, Window kind) {
  std::vector<double> w(n, 1.0);
  if (kind == Window::Hann) {
    for (std::size_t i = 0; i < n; ++i)
      w[i] = 0.5 - 0.5 * std::cos(kTwoPi * static_cast<double>(i) / static_cast<double>(n));
  }
  return w;
}

/// Power spectrogram; bins[t][f] with t indexing time_axis and f indexing freq_axis.
struct Spectrogram {
  std::vector<std::vector<double>> bins;
  std::vector<double> freq_axis;
  std::vector<double> time_axis;

  double total_energy() const {
    double acc = 0.0;
    for (const auto& row : bins)
      for (double v : row) acc += v;
    return acc;
  }

  /// Fraction of total energy whose frequency lies in [lo, hi]. Zero when silent.
  double energy_fraction(double lo, double hi) const {
    double in_band = 0.0, total = 0.0;
    for (const auto& row : bins) {
      for (std::size_t f = 0; f < row.size(); ++f) {
        total += row[f];
        if (freq_axis[f] >= lo && freq_axis[f] <= hi) in_band += row[f];
      }
    }
    return total > 0.0 ? in_band / total : 0.0;
  }

  /// Frequency of the strongest bin in each time frame.
  std::vector<double> ridge() const {
    std::vector<double> out;
    out.reserve(bins.size());
    for (const auto& row : bins) {
      auto it = std::max_element(row.begin(), row.end());
      out.push_back(freq_axis[static_cast<std::size_t>(it - row.begin())]);
    }
    return out;
  }
};

struct StftOptions {
  Window window = Window::Hann;
  std::size_t fft_size = 0;  // 0: use window_len
};

/// STFT of a uniformly sampled buffer. Frequencies span [-fs/2, fs/2) in ascending order.
inline Spectrogram stft(const SampleBuffer& buf, std::size_t window_len, std::size_t hop,
                        StftOptions opts = {}) {
  if (window_len < 2) throw std::invalid_argument("stft: window_len must be >= 2");
  if (hop < 1) throw std::invalid_argument("stft: hop must be >= 1");
  if (buf.size() < window_len) throw std::invalid_argument("stft: fewer samples than one window");
  const std::size_t nfft = opts.fft_size == 0 ? window_len : opts.fft_size;
  if (nfft < window_len) throw std::invalid_argument("stft: fft_size shorter than window");

  const auto w = window_coefficients(window_len, opts.window);
  Spectrogram sg;
  const double fs = buf.sample_rate();
  const auto half = static_cast<long>(nfft / 2);
  for (std::size_t i = 0; i < nfft; ++i)
    sg.freq_axis.push_back(static_cast<double>(static_cast<long>(i) - half) * fs / static_cast<double>(nfft));

  Eigen::FFT<double> engine;
  std::vector<Complex> frame(nfft), spec;
  for (std::size_t start = 0; start + window_len <= buf.size(); start += hop) {
    std::fill(frame.begin(), frame.end(), Complex{});
    for (std::size_t i = 0; i < window_len; ++i) frame[i] = buf[start + i] * w[i];
    engine.fwd(spec, frame);
    std::vector<double> row(nfft);
    for (std::size_t i = 0; i < nfft; ++i) {
      const std::size_t src = (i + nfft - static_cast<std::size_t>(half)) % nfft;
      row[i] = std::norm(spec[src]);
    }
    sg.bins.push_back(std::move(row));
    sg.time_axis.push_back(buf.time_of(start) + 0.5 * static_cast<double>(window_len - 1) / fs);
  }
  return sg;
}

/// STFT over irregularly timed samples: each window of window_len consecutive
/// samples is transformed with nonuniform_dft on `freqs`. The window taper is
/// evaluated on sample time within the frame, not on sample index.
inline Spectrogram stft(std::span<const double> times, std::span<const Complex> values,
                        std::size_t window_len, std::size_t hop, std::span<const double> freqs,
                        Window window = Window::Hann) {
  if (window_len < 2) throw std::invalid_argument("stft: window_len must be >= 2");
  if (hop < 1) throw std::invalid_argument("stft: hop must be >= 1");
  if (times.size() != values.size()) throw std::invalid_argument("stft: times/values length mismatch");
  if (values.size() < window_len) throw std::invalid_argument("stft: fewer samples than one window");
  if (freqs.empty()) throw std::invalid_argument("stft: empty frequency grid");

  Spectrogram sg;
  sg.freq_axis.assign(freqs.begin(), freqs.end());
  std::vector<Complex> frame(window_len);
  for (std::size_t start = 0; start + window_len <= values.size(); start += hop) {
    const double t0 = times[start];
    const double span_t = times[start + window_len - 1] - t0;
    // half a mean sample spacing of padding keeps the end samples from a zero weight
    const double pad = span_t / (2.0 * static_cast<double>(window_len - 1));
    for (std::size_t i = 0; i < window_len; ++i) {
      double w = 1.0;
      if (window == Window::Hann) {
        const double u = (times[start + i] - t0 + pad) / (span_t + 2.0 * pad);
        w = 0.5 - 0.5 * std::cos(kTwoPi * u);
      }
      frame[i] = values[start + i] * w;
    }
    const auto coeffs = nonuniform_dft(times.subspan(start, window_len), frame, freqs);
    std::vector<double> row(coeffs.size());
    for (std::size_t i = 0; i < coeffs.size(); ++i) row[i] = std::norm(coeffs[i]);
    sg.bins.push_back(std::move(row));
    sg.time_axis.push_back(0.5 * (t0 + times[start + window_len - 1]));
  }
  return sg;
}

// ---------------------------------------------------------------------------
// Phase

/// Removes 2*pi jumps so successive differences lie in (-pi, pi].
inline std::vector<double> unwrap_phase(std::span<const double> phases) {
  std::vector<double> out(phases.begin(), phases.end());
  double offset = 0.0;
  for (std::size_t i = 1; i < out.size(); ++i) {
    double d = phases[i] - phases[i - 1];
    // wrap d into (-pi, pi]
    double wrapped = d - kTwoPi * std::floor((d + std::numbers::pi) / kTwoPi);
    if (wrapped == -std::numbers::pi) wrapped = std::numbers::pi;
    offset += wrapped - d;
    out[i] = phases[i] + offset;
  }
  return out;
}

/// Wraps an angle into (-pi, pi].
inline double wrap_phase(double x) {
  double w = x - kTwoPi * std::floor((x + std::numbers::pi) / kTwoPi);
  if (w == -std::numbers::pi) w = std::numbers::pi;
  return w;
}

// ---------------------------------------------------------------------------
// Noise

/// Seeded complex circular Gaussian source.
class NoiseSource {
 public:
  explicit NoiseSource(std::uint64_t seed) : rng_(seed) {}

  /// One sample with E|n|^2 = power.
  Complex sample(double power) {
    const double sigma = std::sqrt(power / 2.0);
    return {sigma * normal_(rng_), sigma * normal_(rng_)};
  }

  ComplexVector samples(std::size_t n, double power) {
    ComplexVector out(n);
    for (auto& v : out) v = sample(power);
    return out;
  }

  /// Noise whose power matches a floor given in dBm (sample power read as watts).
  ComplexVector floor_dbm(std::size_t n, double noise_floor_dbm) {
    return samples(n, dbm_to_watts(noise_floor_dbm));
  }

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  double gaussian() { return normal_(rng_); }
  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Deterministic child seed, so parallel trials do not share RNG state.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

}  // namespace isacfi
