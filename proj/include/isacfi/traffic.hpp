#pragma once

// Parametric packet-arrival models: regular, video-streaming bursts, and
// gaming-style sparse bursts with heavy-tailed gaps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

#include "isacfi/schedule.hpp"

namespace isacfi {

enum class TrafficKind { Regular, Streaming, Gaming };

inline const char* to_string(TrafficKind k) {
  switch (k) {
    case TrafficKind::Regular: return "regular";
    case TrafficKind::Streaming: return "streaming";
    case TrafficKind::Gaming: return "gaming";
  }
  return "?";
}

inline TrafficKind traffic_kind_from_string(const std::string& s) {
  if (s == "regular") return TrafficKind::Regular;
  if (s == "streaming") return TrafficKind::Streaming;
  if (s == "gaming") return TrafficKind::Gaming;
  throw std::invalid_argument("unknown traffic kind: " + s);
}

struct TrafficModel {
  TrafficKind kind = TrafficKind::Regular;
  double rate_hz = 40.0;            // Regular

  double burst_rate_hz = 30.0;      // Streaming: frame bursts per second
  std::size_t burst_min = 1;        // packets per burst, uniform
  std::size_t burst_max = 8;
  double burst_jitter_s = 3e-3;     // uniform +- jitter on each burst start
  double intra_gap_s = 0.3e-3;      // spacing inside a burst

  double gaming_min_gap_s = 5e-3;   // Gaming: Pareto scale of burst gaps
  double gaming_shape = 1.5;        // Pareto shape (< 2: infinite variance)
  std::size_t gaming_burst_max = 3;

  std::uint64_t seed = 1;

  static TrafficModel regular(double rate_hz) {
    TrafficModel m;
    m.kind = TrafficKind::Regular;
    m.rate_hz = rate_hz;
    return m;
  }
  static TrafficModel streaming(std::uint64_t seed) {
    TrafficModel m;
    m.kind = TrafficKind::Streaming;
    m.seed = seed;
    return m;
  }
  static TrafficModel gaming(std::uint64_t seed) {
    TrafficModel m;
    m.kind = TrafficKind::Gaming;
    m.seed = seed;
    return m;
  }
};

/// Transmit times over [0, duration). Reproducible for a given model seed.
inline TxSchedule generate_traffic(const TrafficModel& model, double duration) {
  if (!(duration > 0.0)) throw std::invalid_argument("generate_traffic: duration must be positive");
  std::vector<double> t;
  std::mt19937_64 rng(model.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  switch (model.kind) {
    case TrafficKind::Regular: {
      if (!(model.rate_hz > 0.0)) throw std::invalid_argument("generate_traffic: rate must be positive");
      const auto n = static_cast<std::size_t>(std::ceil(duration * model.rate_hz - 1e-9));
      for (std::size_t i = 0; i < n; ++i) t.push_back(static_cast<double>(i) / model.rate_hz);
      break;
    }
    case TrafficKind::Streaming: {
      if (model.burst_min == 0 || model.burst_max < model.burst_min)
        throw std::invalid_argument("generate_traffic: bad burst size range");
      std::uniform_int_distribution<std::size_t> size(model.burst_min, model.burst_max);
      const double period = 1.0 / model.burst_rate_hz;
      for (double base = 0.0; base < duration; base += period) {
        const double start = std::max(0.0, base + model.burst_jitter_s * (2.0 * u01(rng) - 1.0));
        const std::size_t n = size(rng);
        for (std::size_t i = 0; i < n; ++i) t.push_back(start + static_cast<double>(i) * model.intra_gap_s);
      }
      break;
    }
    case TrafficKind::Gaming: {
      std::uniform_int_distribution<std::size_t> size(1, std::max<std::size_t>(1, model.gaming_burst_max));
      double now = 0.0;
      while (now < duration) {
        const std::size_t n = size(rng);
        for (std::size_t i = 0; i < n; ++i) t.push_back(now + static_cast<double>(i) * model.intra_gap_s);
        // Pareto by inversion
        now += model.gaming_min_gap_s / std::pow(1.0 - u01(rng), 1.0 / model.gaming_shape);
      }
      break;
    }
  }
  std::sort(t.begin(), t.end());
  std::vector<double> clean;
  for (double x : t)
    if (x < duration && (clean.empty() || x > clean.back() + 1e-9)) clean.push_back(x);
  return TxSchedule::from_times(std::move(clean));
}

}  // namespace isacfi
