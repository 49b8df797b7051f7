#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace isacfi {

/// Packet transmit times, strictly increasing; gaps may be irregular.
struct TxSchedule {
  std::vector<double> times;
  std::vector<std::uint64_t> packet_ids;

  static TxSchedule from_times(std::vector<double> t) {
    TxSchedule s;
    s.times = std::move(t);
    s.packet_ids.resize(s.times.size());
    std::iota(s.packet_ids.begin(), s.packet_ids.end(), std::uint64_t{0});
    s.validate();
    return s;
  }

  /// `count` packets at exactly `rate_hz`, starting at t0.
  static TxSchedule regular(double rate_hz, std::size_t count, double t0 = 0.0) {
    if (!(rate_hz > 0.0)) throw std::invalid_argument("TxSchedule: rate must be positive");
    std::vector<double> t(count);
    for (std::size_t i = 0; i < count; ++i) t[i] = t0 + static_cast<double>(i) / rate_hz;
    return from_times(std::move(t));
  }

  std::size_t size() const { return times.size(); }
  bool empty() const { return times.empty(); }
  double duration() const { return times.empty() ? 0.0 : times.back() - times.front(); }

  double mean_interval() const {
    return times.size() < 2 ? 0.0 : duration() / static_cast<double>(times.size() - 1);
  }

  void validate() const {
    if (packet_ids.size() != times.size()) throw std::invalid_argument("TxSchedule: ids and times differ in length");
    for (std::size_t i = 1; i < times.size(); ++i)
      if (!(times[i] > times[i - 1])) throw std::invalid_argument("TxSchedule: times must be strictly increasing");
  }

  /// Every gap equals the mean gap within `rel_tol`.
  bool is_uniform(double rel_tol = 1e-9) const {
    if (times.size() < 3) return true;
    const double m = mean_interval();
    for (std::size_t i = 1; i < times.size(); ++i)
      if (std::abs(times[i] - times[i - 1] - m) > rel_tol * m) return false;
    return true;
  }

  /// Coefficient of variation of the gaps.
  double gap_cv() const {
    if (times.size() < 3) return 0.0;
    const double m = mean_interval();
    double v = 0.0;
    for (std::size_t i = 1; i < times.size(); ++i) v += std::pow(times[i] - times[i - 1] - m, 2);
    v /= static_cast<double>(times.size() - 1);
    return std::sqrt(v) / m;
  }

  /// The same packets pretended to be evenly spaced at the mean rate.
  TxSchedule naive_uniform() const {
    TxSchedule s = *this;
    const double m = mean_interval();
    for (std::size_t i = 0; i < s.times.size(); ++i) s.times[i] = times.front() + static_cast<double>(i) * m;
    return s;
  }
};

}  // namespace isacfi
