#pragma once

// C/M/B state machine and a discrete-event CSMA simulator that drives it.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <queue>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "isacfi/cancellation.hpp"
#include "isacfi/channel.hpp"
#include "isacfi/mac_state.hpp"
#include "isacfi/ofdm.hpp"
#include "isacfi/signal.hpp"
#include "isacfi/traffic.hpp"

namespace isacfi {

// ---------------------------------------------------------------------------
// Transition table

enum class FrameKind { Data, Ndp, Ack };
enum class MacEventKind { TxStart, TxComplete, RxStart, RxComplete, TimerExpiry, CalibrationDue };

inline const char* to_string(FrameKind f) {
  switch (f) {
    case FrameKind::Data: return "DATA";
    case FrameKind::Ndp: return "NDP";
    case FrameKind::Ack: return "ACK";
  }
  return "?";
}

inline const char* to_string(MacEventKind e) {
  switch (e) {
    case MacEventKind::TxStart: return "TxStart";
    case MacEventKind::TxComplete: return "TxComplete";
    case MacEventKind::RxStart: return "RxStart";
    case MacEventKind::RxComplete: return "RxComplete";
    case MacEventKind::TimerExpiry: return "TimerExpiry";
    case MacEventKind::CalibrationDue: return "CalibrationDue";
  }
  return "?";
}

struct MacEvent {
  MacEventKind kind = MacEventKind::TxStart;
  FrameKind frame = FrameKind::Data;
  int peer = -1;  // RxStart / RxComplete: transmitting device
};

/// Bit flags; a transition may carry several.
enum MacAction : std::uint16_t {
  kActNone = 0,
  kActEnableSeparator = 1 << 0,
  kActDisableSeparator = 1 << 1,
  kActMonostaticCapture = 1 << 2,
  kActArmTimer = 1 << 3,
  kActRestartEpisode = 1 << 4,  // back-to-back transmission inside M; pending timer dropped
  kActBistaticCapture = 1 << 5,
  kActEndCapture = 1 << 6,
  kActCalibrate = 1 << 7,
  kActViolation = 1 << 8,
};

inline std::string actions_to_string(std::uint16_t a) {
  static constexpr std::pair<std::uint16_t, const char*> names[] = {
      {kActEnableSeparator, "enable_separator"}, {kActDisableSeparator, "disable_separator"},
      {kActMonostaticCapture, "monostatic_capture"}, {kActArmTimer, "arm_timer"},
      {kActRestartEpisode, "restart_episode"}, {kActBistaticCapture, "bistatic_capture"},
      {kActEndCapture, "end_capture"}, {kActCalibrate, "calibrate"}, {kActViolation, "protocol_violation"}};
  std::string out;
  for (const auto& [bit, name] : names)
    if (a & bit) {
      if (!out.empty()) out += '+';
      out += name;
    }
  return out.empty() ? "none" : out;
}

struct StepResult {
  MacState state = MacState::C;
  std::uint16_t actions = kActNone;
  bool violation() const { return (actions & kActViolation) != 0; }
};

/// Deterministic transition table. Undefined pairs leave the state unchanged
/// and report a protocol violation.
inline StepResult step(MacState s, const MacEvent& e) {
  using K = MacEventKind;
  switch (s) {
    case MacState::C:
      if (e.kind == K::TxStart) return {MacState::M, kActEnableSeparator | kActMonostaticCapture};
      if (e.kind == K::RxStart) return {MacState::B, kActBistaticCapture};
      if (e.kind == K::CalibrationDue) return {MacState::C, kActCalibrate};
      break;
    case MacState::M:
      if (e.kind == K::TxStart) return {MacState::M, kActRestartEpisode | kActMonostaticCapture};
      if (e.kind == K::TxComplete) return {MacState::M, kActArmTimer};
      if (e.kind == K::TimerExpiry) return {MacState::C, kActDisableSeparator};
      // a peer answers inside the timer window (SIFS-spaced ACK)
      if (e.kind == K::RxStart) return {MacState::B, kActDisableSeparator | kActBistaticCapture};
      break;
    case MacState::B:
      if (e.kind == K::RxComplete) return {MacState::C, kActEndCapture};
      break;
  }
  return {s, kActViolation};
}

// ---------------------------------------------------------------------------
// Event log

struct EventLogEntry {
  double time = 0.0;
  int device = 0;
  MacEvent event;
  MacState before = MacState::C;
  MacState after = MacState::C;
  std::uint16_t actions = kActNone;
  bool separator_on = false;  // after the transition
};

using EventLog = std::vector<EventLogEntry>;

/// One line per entry: time_s device state_before event state_after action
inline void write_event_log(std::ostream& os, const EventLog& log) {
  char buf[32];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%.9f", e.time);
    os << buf << ' ' << e.device << ' ' << to_string(e.before) << ' ' << to_string(e.event.kind);
    if (e.event.kind == MacEventKind::TxStart || e.event.kind == MacEventKind::RxStart) os << '(' << to_string(e.event.frame) << ')';
    os << ' ' << to_string(e.after) << ' ' << actions_to_string(e.actions) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Link model

/// Logistic packet success against SNR with a per-MCS midpoint (dB).
inline double mcs_snr_midpoint_db(const Mcs& m) {
  static constexpr double table[4][4] = {
      // 1/2   2/3   3/4   5/6
      {2.0, 3.5, 4.5, 5.5},     // BPSK
      {5.0, 6.5, 8.0, 9.0},     // QPSK
      {11.0, 13.0, 15.0, 16.5}, // 16-QAM
      {17.0, 19.0, 21.0, 23.0}, // 64-QAM
  };
  return table[static_cast<int>(m.modulation)][static_cast<int>(m.rate)];
}

inline double packet_success_probability(double snr_db, const Mcs& m, double slope_db = 1.0) {
  return 1.0 / (1.0 + std::exp(-(snr_db - mcs_snr_midpoint_db(m)) / slope_db));
}

/// Free-space path loss in dB at `distance` (floored at 1 m).
inline double free_space_loss_db(double distance, const RadioConfig& cfg) {
  const double d = std::max(distance, 1.0);
  return 20.0 * std::log10(4.0 * kPi * d / cfg.wavelength());
}

// ---------------------------------------------------------------------------
// Scenario

struct MacDevice {
  Pose pose;
  TrafficModel traffic;
};

struct MacScenario {
  RadioConfig radio;
  std::vector<MacDevice> devices;
  double duration = 10.0;
  std::uint64_t seed = 1;

  bool sensing_enabled = true;
  bool force_separator_in_b = false;  // ablation: separator left running during receptions

  double timer_s = 1e-3;  // M -> C after TxComplete
  double sifs_s = 16e-6;
  double difs_s = 34e-6;
  double slot_s = 9e-6;
  unsigned contention_window = 15;
  std::size_t data_symbols = 20;
  std::size_t ack_symbols = 2;
  Mcs mcs{Modulation::QAM16, CodeRate::R3_4};

  double tx_power_dbm = 20.0;
  double noise_floor_dbm = -90.0;
  double extra_loss_db = 30.0;  // walls and body loss on top of free space
  double peer_cfo_hz = 5e3;     // residual carrier offset of a remote packet
  double recalibration_interval_s = 60.0;
  SeparatorConfig separator;

  std::size_t max_events = 0;  // 0: run to `duration`
  bool keep_log = true;

  bool capture_csi = false;
  std::vector<Reflector> targets;
  double csi_noise_power = 0.0;

  void validate() const {
    if (devices.empty()) throw std::invalid_argument("MacScenario: no devices");
    if (!(duration > 0.0)) throw std::invalid_argument("MacScenario: duration must be positive");
    if (!(timer_s >= 0.0) || !(sifs_s >= 0.0) || !(difs_s >= 0.0) || !(slot_s >= 0.0))
      throw std::invalid_argument("MacScenario: timings must be non-negative");
    if (data_symbols == 0 || ack_symbols == 0) throw std::invalid_argument("MacScenario: frames need symbols");
    if (packet_duration(data_symbols, radio) > kMaxFrameDuration)
      throw std::invalid_argument("MacScenario: data frame exceeds the maximum frame duration");
    for (std::size_t i = 0; i < devices.size(); ++i)
      for (std::size_t j = i + 1; j < devices.size(); ++j)
        if ((devices[i].pose.position - devices[j].pose.position).norm() == 0.0)
          throw std::invalid_argument("MacScenario: devices share a position");
    radio.validate();
  }
};

struct Transmission {
  int device = 0;
  FrameKind frame = FrameKind::Data;
  double start = 0.0;
  double end = 0.0;
};

struct CsiRecord {
  int device = 0;
  int peer = -1;  // -1: monostatic
  MacState state = MacState::C;
  bool separator_on = false;
  std::uint64_t packet_id = 0;
  CsiMatrix csi;
};

struct CommsStats {
  std::size_t offered = 0;
  std::size_t delivered = 0;
  std::size_t lost = 0;
  std::vector<double> delays_s;  // delivered packets, arrival to end of DATA
  std::vector<double> rx_snr_db;  // intended receiver, per DATA frame

  double loss_rate() const { return offered == 0 ? 0.0 : static_cast<double>(lost) / static_cast<double>(lost + delivered); }
  double delay_percentile_ms(double q) const {
    if (delays_s.empty()) return 0.0;
    std::vector<double> d = delays_s;
    std::sort(d.begin(), d.end());
    const auto i = static_cast<std::size_t>(std::clamp(q, 0.0, 1.0) * static_cast<double>(d.size() - 1) + 0.5);
    return d[i] * 1e3;
  }
  double mean_rx_snr_db() const {
    if (rx_snr_db.empty()) return 0.0;
    double s = 0.0;
    for (double v : rx_snr_db) s += v;
    return s / static_cast<double>(rx_snr_db.size());
  }
};

/// CSV columns: scenario,delay_ms_p50,delay_ms_p95,loss_rate
inline void write_comms_csv(std::ostream& os, const std::vector<std::pair<std::string, CommsStats>>& rows,
                            bool header = true) {
  if (header) os << "scenario,delay_ms_p50,delay_ms_p95,loss_rate\n";
  for (const auto& [name, s] : rows)
    os << name << ',' << s.delay_percentile_ms(0.5) << ',' << s.delay_percentile_ms(0.95) << ',' << s.loss_rate()
       << '\n';
}

struct ScenarioResult {
  EventLog log;
  std::size_t events = 0;
  std::vector<Transmission> transmissions;
  std::vector<CsiRecord> csi;
  CommsStats stats;
  std::size_t violations = 0;
  std::size_t separator_mismatches = 0;  // separator on while not in M, or off in M
  double max_m_dwell = 0.0;              // longest stretch from an M entry or restart to leaving M
  double forced_loss_db = 0.0;
};

namespace detail {

enum class SimKind { Arrival, Attempt, DataEnd, AckStart, AckEnd, Timer, Calibration };

struct SimEvent {
  double time;
  std::uint64_t seq;
  SimKind kind;
  int device;
  std::uint64_t tag;  // packet id or timer episode

  bool operator>(const SimEvent& o) const { return time != o.time ? time > o.time : seq > o.seq; }
};

struct DeviceState {
  MacState state = MacState::C;
  bool separator = false;
  std::uint64_t episode = 0;
  double m_since = 0.0;
  std::queue<std::pair<std::uint64_t, double>> backlog;  // packet id, arrival time
  bool attempt_pending = false;
  bool transmitting = false;
  std::mt19937_64 backoff;
  std::size_t calibrations = 0;
};

}  // namespace detail

/// Event-driven run. Channel access, link draws and traffic use their own RNG
/// streams, so toggling sensing never changes communication outcomes.
inline ScenarioResult run_scenario(const MacScenario& sc) {
  sc.validate();
  using detail::SimEvent;
  using detail::SimKind;
  const int n = static_cast<int>(sc.devices.size());
  ScenarioResult res;

  std::priority_queue<SimEvent, std::vector<SimEvent>, std::greater<>> q;
  std::uint64_t seq = 0;
  auto push = [&](double t, SimKind k, int d, std::uint64_t tag = 0) { q.push({t, seq++, k, d, tag}); };

  std::vector<detail::DeviceState> dev(static_cast<std::size_t>(n));
  std::vector<std::uint64_t> first_id(static_cast<std::size_t>(n) + 1, 0);
  std::vector<std::vector<double>> arrivals(static_cast<std::size_t>(n));
  for (int d = 0; d < n; ++d) {
    auto& ds = dev[static_cast<std::size_t>(d)];
    ds.backoff.seed(derive_seed(sc.seed, 1000 + static_cast<std::uint64_t>(d)));
    TrafficModel tm = sc.devices[static_cast<std::size_t>(d)].traffic;
    tm.seed = derive_seed(sc.seed ^ tm.seed, 2000 + static_cast<std::uint64_t>(d));
    arrivals[static_cast<std::size_t>(d)] = generate_traffic(tm, sc.duration).times;
    first_id[static_cast<std::size_t>(d) + 1] = first_id[static_cast<std::size_t>(d)] + arrivals[static_cast<std::size_t>(d)].size();
    for (std::size_t i = 0; i < arrivals[static_cast<std::size_t>(d)].size(); ++i)
      push(arrivals[static_cast<std::size_t>(d)][i], SimKind::Arrival, d, first_id[static_cast<std::size_t>(d)] + i);
    if (sc.sensing_enabled) push(0.0, SimKind::Calibration, d);
  }
  res.stats.offered = first_id.back();

  const double data_air = packet_duration(sc.data_symbols, sc.radio);
  const double ack_air = packet_duration(sc.ack_symbols, sc.radio);
  const double noise_w = dbm_to_watts(sc.noise_floor_dbm);
  if (sc.force_separator_in_b) {
    const auto pre = generate_preamble(sc.radio).buffer.samples();
    res.forced_loss_db = forced_reception_loss_db(sc.separator, pre, noise_w, 20.0, derive_seed(sc.seed, 7),
                                                  sc.peer_cfo_hz / sc.radio.sample_rate);
  }
  auto mean_snr_db = [&](int a, int b) {
    const double dist = (sc.devices[static_cast<std::size_t>(a)].pose.position -
                         sc.devices[static_cast<std::size_t>(b)].pose.position).norm();
    return sc.tx_power_dbm - free_space_loss_db(dist, sc.radio) - sc.extra_loss_db - sc.noise_floor_dbm;
  };

  // CSI synthesis state
  NoiseSource csi_rng(derive_seed(sc.seed, 3));
  std::vector<ImpairmentProfile> pair_imp;
  if (sc.capture_csi)
    for (int i = 0; i < n * n; ++i) pair_imp.push_back(ImpairmentProfile::random_bistatic(sc.radio, csi_rng));
  auto capture = [&](int d, int peer, double t, std::uint64_t id) {
    if (!sc.capture_csi) return;
    ScenarioGeometry g;
    g.rx = sc.devices[static_cast<std::size_t>(d)].pose;
    g.tx = peer < 0 ? g.rx : sc.devices[static_cast<std::size_t>(peer)].pose;
    g.targets = sc.targets;
    CsiSynthesisOptions o;
    o.noise_power = sc.csi_noise_power;
    const auto imp = peer < 0 ? ImpairmentProfile::monostatic(0.3) : pair_imp[static_cast<std::size_t>(peer * n + d)];
    const auto& ds = dev[static_cast<std::size_t>(d)];
    res.csi.push_back({d, peer, ds.state, ds.separator, id, synthesize_csi(g, imp, sc.radio, t, o, &csi_rng, id)});
  };

  auto apply = [&](double t, int d, const MacEvent& ev, std::uint64_t id) {
    auto& ds = dev[static_cast<std::size_t>(d)];
    ++res.events;
    const MacState before = ds.state;
    std::uint16_t actions = kActNone;
    if (sc.sensing_enabled) {
      const auto r = step(ds.state, ev);
      actions = r.actions;
      if (r.violation()) ++res.violations;
      if (before == MacState::M && (r.state != MacState::M || (actions & kActRestartEpisode)))
        res.max_m_dwell = std::max(res.max_m_dwell, t - ds.m_since);
      if ((before != MacState::M && r.state == MacState::M) || (actions & kActRestartEpisode)) ds.m_since = t;
      if (r.state != MacState::M || (actions & kActRestartEpisode)) ++ds.episode;  // drops a pending timer
      ds.state = r.state;
      if (actions & kActEnableSeparator) ds.separator = true;
      if (actions & kActDisableSeparator) ds.separator = false;
      if (actions & kActArmTimer) push(t + sc.timer_s, SimKind::Timer, d, ds.episode);
      if (actions & kActCalibrate) ++ds.calibrations;
      if (actions & kActMonostaticCapture) capture(d, -1, t, id);
      if (actions & kActBistaticCapture) capture(d, ev.peer, t, id);
      if (ds.separator != (ds.state == MacState::M)) ++res.separator_mismatches;
    }
    if (sc.keep_log) res.log.push_back({t, d, ev, before, ds.state, actions, ds.separator});
  };

  double busy_until = -1.0;
  auto schedule_attempt = [&](int d, double t) {
    auto& ds = dev[static_cast<std::size_t>(d)];
    if (ds.attempt_pending || ds.transmitting || ds.backlog.empty()) return;
    ds.attempt_pending = true;
    push(t, SimKind::Attempt, d);
  };
  auto dest_of = [n](int d) { return (d + 1) % n; };
  std::vector<std::uint64_t> in_flight(static_cast<std::size_t>(n), 0);
  std::vector<double> in_flight_arrival(static_cast<std::size_t>(n), 0.0);

  while (!q.empty()) {
    if (sc.max_events > 0 && res.events >= sc.max_events) break;
    const SimEvent e = q.top();
    q.pop();
    const double t = e.time;
    auto& ds = dev[static_cast<std::size_t>(e.device)];
    switch (e.kind) {
      case SimKind::Arrival:
        ds.backlog.push({e.tag, t});
        schedule_attempt(e.device, t);
        break;
      case SimKind::Attempt: {
        ds.attempt_pending = false;
        if (ds.backlog.empty() || ds.transmitting) break;
        if (t < busy_until + sc.difs_s) {  // medium must stay idle for DIFS
          std::uniform_int_distribution<unsigned> cw(0, sc.contention_window);
          ds.attempt_pending = true;
          push(busy_until + sc.difs_s + sc.slot_s * cw(ds.backoff), SimKind::Attempt, e.device);
          break;
        }
        const auto [id, arrival] = ds.backlog.front();
        ds.backlog.pop();
        ds.transmitting = true;
        in_flight[static_cast<std::size_t>(e.device)] = id;
        in_flight_arrival[static_cast<std::size_t>(e.device)] = arrival;
        busy_until = t + data_air + (n > 1 ? sc.sifs_s + ack_air : 0.0);  // NAV covers the ACK
        res.transmissions.push_back({e.device, FrameKind::Data, t, t + data_air});
        apply(t, e.device, {MacEventKind::TxStart, FrameKind::Data, -1}, id);
        for (int r = 0; r < n; ++r)
          if (r != e.device) apply(t, r, {MacEventKind::RxStart, FrameKind::Data, e.device}, id);
        push(t + data_air, SimKind::DataEnd, e.device, id);
        break;
      }
      case SimKind::DataEnd: {
        apply(t, e.device, {MacEventKind::TxComplete, FrameKind::Data, -1}, e.tag);
        for (int r = 0; r < n; ++r)
          if (r != e.device) apply(t, r, {MacEventKind::RxComplete, FrameKind::Data, e.device}, e.tag);
        ds.transmitting = false;
        if (n > 1) {
          const int dst = dest_of(e.device);
          std::mt19937_64 link(derive_seed(sc.seed ^ 0x5eedULL, e.tag));
          std::exponential_distribution<double> fading(1.0);
          std::uniform_real_distribution<double> u01(0.0, 1.0);
          double snr = mean_snr_db(e.device, dst) + 10.0 * std::log10(std::max(fading(link), 1e-12));
          if (sc.sensing_enabled && sc.force_separator_in_b) snr -= res.forced_loss_db;
          res.stats.rx_snr_db.push_back(snr);
          if (u01(link) < packet_success_probability(snr, sc.mcs)) {
            ++res.stats.delivered;
            res.stats.delays_s.push_back(t - in_flight_arrival[static_cast<std::size_t>(e.device)]);
            push(t + sc.sifs_s, SimKind::AckStart, dst, e.tag);
          } else {
            ++res.stats.lost;
          }
        } else {
          ++res.stats.delivered;
          res.stats.delays_s.push_back(t - in_flight_arrival[static_cast<std::size_t>(e.device)]);
        }
        schedule_attempt(e.device, t);
        break;
      }
      case SimKind::AckStart:
        res.transmissions.push_back({e.device, FrameKind::Ack, t, t + ack_air});
        apply(t, e.device, {MacEventKind::TxStart, FrameKind::Ack, -1}, e.tag);
        for (int r = 0; r < n; ++r)
          if (r != e.device) apply(t, r, {MacEventKind::RxStart, FrameKind::Ack, e.device}, e.tag);
        push(t + ack_air, SimKind::AckEnd, e.device, e.tag);
        break;
      case SimKind::AckEnd:
        apply(t, e.device, {MacEventKind::TxComplete, FrameKind::Ack, -1}, e.tag);
        for (int r = 0; r < n; ++r)
          if (r != e.device) apply(t, r, {MacEventKind::RxComplete, FrameKind::Ack, e.device}, e.tag);
        break;
      case SimKind::Timer:
        if (e.tag == ds.episode && ds.state == MacState::M)
          apply(t, e.device, {MacEventKind::TimerExpiry, FrameKind::Data, -1}, 0);
        break;
      case SimKind::Calibration:
        if (ds.state != MacState::C || ds.transmitting || t < busy_until) {
          push(std::max(t + 1e-3, busy_until), SimKind::Calibration, e.device);  // retry when idle
          break;
        }
        apply(t, e.device, {MacEventKind::CalibrationDue, FrameKind::Data, -1}, 0);
        if (t + sc.recalibration_interval_s < sc.duration)
          push(t + sc.recalibration_interval_s, SimKind::Calibration, e.device);
        break;
    }
  }
  return res;
}

/// True when no two transmissions share any instant.
inline bool transmissions_disjoint(std::vector<Transmission> tx) {
  std::sort(tx.begin(), tx.end(), [](const auto& a, const auto& b) { return a.start < b.start; });
  for (std::size_t i = 1; i < tx.size(); ++i)
    if (tx[i].start < tx[i - 1].end - 1e-12) return false;
  return true;
}

}  // namespace isacfi
