#pragma once

// Estimate sharing between devices and grid maximum-likelihood fusion.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <queue>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "isacfi/channel.hpp"
#include "isacfi/estimation.hpp"

namespace isacfi {

struct SensingMessage {
  int device_id = 0;
  Pose pose;
  double timestamp = 0.0;
  std::optional<SensingEstimate> estimate;
  ComplexVector csi_summary;  // carried, not fused
};

/// device_id,t_s,x_m,y_m,heading_deg,range_m,aoa_deg,confidence
inline std::string to_line(const SensingMessage& m) {
  if (!m.estimate || !m.estimate->range || !m.estimate->aoa)
    throw std::invalid_argument("to_line: message has no range/AoA estimate");
  std::ostringstream os;
  os.precision(17);
  os << m.device_id << ',' << m.timestamp << ',' << m.pose.position.x() << ',' << m.pose.position.y() << ','
     << m.pose.heading_deg << ',' << *m.estimate->range << ',' << *m.estimate->aoa << ',' << m.estimate->confidence;
  return os.str();
}

inline SensingMessage message_from_line(const std::string& line) {
  std::vector<double> v;
  std::size_t start = 0;
  while (start <= line.size()) {
    const auto end = std::min(line.find(',', start), line.size());
    double x = 0.0;
    const auto* b = line.data() + start;
    const auto* e = line.data() + end;
    while (b < e && *b == ' ') ++b;
    const auto [ptr, ec] = std::from_chars(b, e, x);
    if (ec != std::errc{} || ptr != e) throw std::invalid_argument("message_from_line: bad field in '" + line + "'");
    v.push_back(x);
    start = end + 1;
  }
  if (v.size() != 8) throw std::invalid_argument("message_from_line: expected 8 fields");
  SensingMessage m;
  m.device_id = static_cast<int>(v[0]);
  m.timestamp = v[1];
  m.pose.position = Vec3(v[2], v[3], 0.0);
  m.pose.heading_deg = v[4];
  SensingEstimate est;
  est.range = v[5];
  est.tof = range_to_delay(v[5]);
  est.aoa = v[6];
  est.confidence = v[7];
  m.estimate = est;
  return m;
}

// ---------------------------------------------------------------------------
// Bus

struct Delivery {
  double time = 0.0;
  std::string topic;
  int subscriber = 0;
  SensingMessage message;
};

/// In-process publish/subscribe. Deliveries happen in timestamp order at
/// publish time + latency; a subscriber never receives its own messages.
class MessageBus {
 public:
  explicit MessageBus(double latency_s = 0.0) : latency_(latency_s) {
    if (!(latency_s >= 0.0)) throw std::invalid_argument("MessageBus: latency must be non-negative");
  }

  void subscribe(const std::string& topic, int subscriber) {
    auto& subs = topics_[topic];
    if (std::find(subs.begin(), subs.end(), subscriber) == subs.end()) subs.push_back(subscriber);
  }

  /// Unknown topic: dropped, with a warning recorded.
  void publish(const std::string& topic, const SensingMessage& m) {
    const auto it = topics_.find(topic);
    if (it == topics_.end()) {
      warnings_.push_back("publish: no subscribers on topic '" + topic + "'");
      return;
    }
    for (int s : it->second)
      if (s != m.device_id) pending_.push({m.timestamp + latency_, seq_++, topic, s, m});
  }

  /// Pops every delivery due at or before `t`, in time order.
  std::vector<Delivery> deliver_until(double t) {
    std::vector<Delivery> out;
    while (!pending_.empty() && pending_.top().time <= t) {
      const auto& p = pending_.top();
      out.push_back({p.time, p.topic, p.subscriber, p.message});
      pending_.pop();
    }
    return out;
  }

  std::vector<Delivery> deliver_all() { return deliver_until(std::numeric_limits<double>::infinity()); }

  std::size_t pending() const { return pending_.size(); }
  const std::vector<std::string>& warnings() const { return warnings_; }

 private:
  struct Pending {
    double time;
    std::uint64_t seq;
    std::string topic;
    int subscriber;
    SensingMessage message;
    bool operator>(const Pending& o) const { return time != o.time ? time > o.time : seq > o.seq; }
  };
  double latency_;
  std::uint64_t seq_ = 0;
  std::map<std::string, std::vector<int>> topics_;
  std::priority_queue<Pending, std::vector<Pending>, std::greater<>> pending_;
  std::vector<std::string> warnings_;
};

// ---------------------------------------------------------------------------
// Fusion

struct FusionGridSpec {
  double x_min = 0.0, x_max = 10.0;
  double y_min = 0.0, y_max = 10.0;
  double cell = 0.25;

  std::size_t nx() const { return static_cast<std::size_t>(std::floor((x_max - x_min) / cell + 1e-9)) + 1; }
  std::size_t ny() const { return static_cast<std::size_t>(std::floor((y_max - y_min) / cell + 1e-9)) + 1; }
  double x(std::size_t i) const { return x_min + static_cast<double>(i) * cell; }
  double y(std::size_t j) const { return y_min + static_cast<double>(j) * cell; }

  void validate() const {
    if (!(cell > 0.0) || !(x_max >= x_min) || !(y_max >= y_min))
      throw std::invalid_argument("FusionGridSpec: bad extent or cell size");
  }
};

struct ObservationNoise {
  double sigma_range_m = 0.5;
  double sigma_aoa_deg = 5.0;
};

struct LikelihoodGrid {
  FusionGridSpec spec;
  std::vector<double> loglik;  // row-major: j * nx + i
  double at(std::size_t i, std::size_t j) const { return loglik[j * spec.nx() + i]; }
};

struct FusionResult {
  Eigen::Vector2d position;
  double score = 0.0;  // log-likelihood at the argmax cell
  std::size_t cell_i = 0, cell_j = 0;
  std::size_t used = 0;  // messages that carried a usable estimate
  LikelihoodGrid grid;
};

/// Gaussian range/AoA log-likelihood of one observation for a world point.
inline double observation_loglik(const SensingMessage& m, const Vec3& p, const ObservationNoise& noise) {
  const double d = (p - m.pose.position).norm();
  const double r = m.estimate->range ? *m.estimate->range : delay_to_range(*m.estimate->tof);
  const double dr = (r - d) / noise.sigma_range_m;
  const double da = rad2deg(wrap_phase(deg2rad(*m.estimate->aoa - bearing_deg(m.pose, p)))) / noise.sigma_aoa_deg;
  return -0.5 * (dr * dr + da * da);
}

/// Argmax over the grid of the summed log-likelihoods, refined by a 1-D
/// parabola through each axis' neighbours.
inline FusionResult fuse_ml(const std::vector<SensingMessage>& messages, const FusionGridSpec& spec = {},
                            const ObservationNoise& noise = {}) {
  spec.validate();
  if (!(noise.sigma_range_m > 0.0) || !(noise.sigma_aoa_deg > 0.0))
    throw std::invalid_argument("fuse_ml: noise sigmas must be positive");
  std::vector<const SensingMessage*> usable;
  for (const auto& m : messages)
    if (m.estimate && m.estimate->aoa && (m.estimate->range || m.estimate->tof)) usable.push_back(&m);
  if (usable.empty()) throw std::invalid_argument("fuse_ml: no message with a usable estimate");

  FusionResult res;
  res.used = usable.size();
  res.grid.spec = spec;
  const std::size_t nx = spec.nx(), ny = spec.ny();
  res.grid.loglik.assign(nx * ny, 0.0);
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < ny; ++j)
    for (std::size_t i = 0; i < nx; ++i) {
      const Vec3 p(spec.x(i), spec.y(j), 0.0);
      double ll = 0.0;
      for (const auto* m : usable) ll += observation_loglik(*m, p, noise);
      res.grid.loglik[j * nx + i] = ll;
      if (ll > best) {
        best = ll;
        res.cell_i = i;
        res.cell_j = j;
      }
    }
  res.score = best;

  auto offset = [](double l, double c, double r) {
    const double den = l - 2.0 * c + r;
    return den < 0.0 ? std::clamp(0.5 * (l - r) / den, -0.5, 0.5) : 0.0;
  };
  const std::size_t i = res.cell_i, j = res.cell_j;
  double dx = 0.0, dy = 0.0;
  if (i > 0 && i + 1 < nx) dx = offset(res.grid.at(i - 1, j), best, res.grid.at(i + 1, j));
  if (j > 0 && j + 1 < ny) dy = offset(res.grid.at(i, j - 1), best, res.grid.at(i, j + 1));
  res.position = {spec.x(i) + dx * spec.cell, spec.y(j) + dy * spec.cell};
  return res;
}

}  // namespace isacfi
