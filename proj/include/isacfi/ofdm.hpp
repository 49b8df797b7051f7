#pragma once

// 20 MHz / 64-bin OFDM PHY: radio configuration, training preamble,
// packet construction, preamble detection and CSI extraction.

#include <array>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

#include "isacfi/signal.hpp"

namespace isacfi {

inline constexpr double kMaxFrameDuration = 5.484e-3;

/// Default used bins: +-1 .. +-(26 N / 64), DC excluded.
inline std::vector<int> default_subcarriers(std::size_t fft_size) {
  const int edge = static_cast<int>(26 * fft_size / 64);
  std::vector<int> out;
  for (int k = -edge; k <= edge; ++k)
    if (k != 0) out.push_back(k);
  return out;
}

struct RadioConfig {
  double carrier_freq = 2.4e9;
  double sample_rate = 20e6;
  std::size_t fft_size = 64;
  std::size_t cyclic_prefix_len = 16;
  std::vector<int> used_subcarriers = default_subcarriers(64);

  double subcarrier_spacing() const { return sample_rate / static_cast<double>(fft_size); }
  double wavelength() const { return kSpeedOfLight / carrier_freq; }
  double sample_period() const { return 1.0 / sample_rate; }
  std::size_t symbol_len() const { return fft_size + cyclic_prefix_len; }
  std::size_t num_subcarriers() const { return used_subcarriers.size(); }

  /// Changes the FFT size and resets the used bins to the matching default set.
  RadioConfig& set_fft_size(std::size_t n) {
    fft_size = n;
    used_subcarriers = default_subcarriers(n);
    if (cyclic_prefix_len >= n) cyclic_prefix_len = n / 4;
    return *this;
  }

  void validate() const {
    if (!(carrier_freq > 0.0) || !(sample_rate > 0.0))
      throw std::invalid_argument("RadioConfig: frequencies must be positive");
    if (fft_size < 8 || fft_size % 4 != 0)
      throw std::invalid_argument("RadioConfig: fft_size must be a multiple of 4 and >= 8");
    if (cyclic_prefix_len >= fft_size)
      throw std::invalid_argument("RadioConfig: cyclic prefix must be shorter than the FFT");
    if (used_subcarriers.empty()) throw std::invalid_argument("RadioConfig: no used subcarriers");
    const int half = static_cast<int>(fft_size / 2);
    for (int k : used_subcarriers) {
      if (k == 0) throw std::invalid_argument("RadioConfig: DC bin cannot be used");
      if (k < -half || k >= half) throw std::invalid_argument("RadioConfig: subcarrier outside FFT");
    }
  }
};

// ---------------------------------------------------------------------------
// Preamble
//
// Layout (N = fft_size):
//   short section : 10 repetitions of an N/4-sample period      (2.5 N samples)
//   long section  : N/2-sample cyclic prefix + two long symbols (2.5 N samples)
// Both sections are scaled to unit mean power, so the whole preamble is too.
// Short values follow the 802.11 L-STF pattern (every 4th bin); long values the
// 802.11 L-LTF +-1 pattern, extended with an LFSR sign sequence beyond +-26.

namespace detail {

inline constexpr std::array<int, 53> kLtfSigns = {
    1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1, 1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1, 0,
    1, -1, -1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, -1, 1, 1, -1, -1, 1, -1, 1, -1, 1, 1, 1, 1};

// sign of the (1+j) entry at bins -24, -20, ..., 24 (k = 0 is unused)
inline constexpr std::array<int, 13> kStfSigns = {1, -1, 1, -1, -1, 1, 0, -1, -1, 1, 1, 1, 1};

inline int lfsr_sign(int k) {
  std::uint32_t state = 0x5Du ^ static_cast<std::uint32_t>(k * 2654435761u);
  for (int i = 0; i < 7; ++i) state = (state >> 1) ^ (-(state & 1u) & 0xB8u);
  return (state & 1u) ? 1 : -1;
}

inline Complex ltf_value(int k) {
  if (k >= -26 && k <= 26) return {static_cast<double>(kLtfSigns[static_cast<std::size_t>(k + 26)]), 0.0};
  return {static_cast<double>(lfsr_sign(k)), 0.0};
}

inline Complex stf_value(int k) {
  if (k == 0 || k % 4 != 0 || k < -24 || k > 24) return {};
  const double s = kStfSigns[static_cast<std::size_t>((k + 24) / 4)];
  return s * Complex{1.0, 1.0};
}

inline void normalize_power(std::span<Complex> x) {
  const double p = mean_power(x);
  if (p <= 0.0) return;
  const double g = 1.0 / std::sqrt(p);
  for (auto& v : x) v *= g;
}

}  // namespace detail

struct Preamble {
  SampleBuffer buffer;
  std::size_t short_len = 0;     // length of the short section
  std::size_t long_cp_len = 0;   // cyclic prefix ahead of the long symbols
  ComplexVector long_symbol;     // one long symbol, time domain (N samples)
  ComplexVector long_spectrum;   // FFT of long_symbol, natural bin order

  /// Offset of the first long symbol from packet start.
  std::size_t long_offset() const { return short_len + long_cp_len; }
  std::size_t size() const { return buffer.size(); }
};

inline Preamble generate_preamble(const RadioConfig& cfg) {
  cfg.validate();
  const std::size_t n = cfg.fft_size;
  std::vector<char> used(n, 0);
  for (int k : cfg.used_subcarriers) used[bin_position(k, n)] = 1;

  ComplexVector stf_freq(n), ltf_freq(n);
  for (int k : cfg.used_subcarriers) {
    stf_freq[bin_position(k, n)] = detail::stf_value(k);
    ltf_freq[bin_position(k, n)] = detail::ltf_value(k);
  }
  const auto stf_sym = ifft(stf_freq);
  auto ltf_sym = ifft(ltf_freq);

  Preamble pre;
  pre.short_len = 10 * (n / 4);
  pre.long_cp_len = n / 2;

  ComplexVector short_part(pre.short_len);
  for (std::size_t i = 0; i < pre.short_len; ++i) short_part[i] = stf_sym[i % (n / 4)];
  detail::normalize_power(short_part);

  {
    // scale so the whole long section (cyclic prefix included) has unit power
    const double cp_pow = mean_power(std::span<const Complex>(ltf_sym).last(pre.long_cp_len));
    const double sym_pow = mean_power(ltf_sym);
    const double p = (cp_pow * static_cast<double>(pre.long_cp_len) + 2.0 * sym_pow * static_cast<double>(n)) /
                     static_cast<double>(pre.long_cp_len + 2 * n);
    for (auto& v : ltf_sym) v /= std::sqrt(p);
  }
  ComplexVector long_part;
  long_part.reserve(pre.long_cp_len + 2 * n);
  long_part.insert(long_part.end(), ltf_sym.end() - static_cast<std::ptrdiff_t>(pre.long_cp_len), ltf_sym.end());
  long_part.insert(long_part.end(), ltf_sym.begin(), ltf_sym.end());
  long_part.insert(long_part.end(), ltf_sym.begin(), ltf_sym.end());

  ComplexVector all = short_part;
  all.insert(all.end(), long_part.begin(), long_part.end());
  pre.buffer = SampleBuffer(std::move(all), cfg.sample_rate);
  pre.long_symbol = ltf_sym;
  pre.long_spectrum = fft(ltf_sym);
  return pre;
}

// ---------------------------------------------------------------------------
// Packets

enum class Modulation { BPSK, QPSK, QAM16, QAM64 };
enum class CodeRate { R1_2, R2_3, R3_4, R5_6 };

inline std::size_t bits_per_symbol(Modulation m) {
  switch (m) {
    case Modulation::BPSK: return 1;
    case Modulation::QPSK: return 2;
    case Modulation::QAM16: return 4;
    case Modulation::QAM64: return 6;
  }
  return 1;
}

inline double code_rate_value(CodeRate r) {
  switch (r) {
    case CodeRate::R1_2: return 1.0 / 2.0;
    case CodeRate::R2_3: return 2.0 / 3.0;
    case CodeRate::R3_4: return 3.0 / 4.0;
    case CodeRate::R5_6: return 5.0 / 6.0;
  }
  return 0.5;
}

struct Mcs {
  Modulation modulation = Modulation::BPSK;
  CodeRate rate = CodeRate::R1_2;
};

/// Pilot bins: +-7 and +-21 scaled to the FFT size.
inline std::vector<int> pilot_subcarriers(const RadioConfig& cfg) {
  const int a = static_cast<int>(7 * cfg.fft_size / 64);
  const int b = static_cast<int>(21 * cfg.fft_size / 64);
  return {-b, -a, a, b};
}

inline std::vector<int> data_subcarriers(const RadioConfig& cfg) {
  const auto pilots = pilot_subcarriers(cfg);
  std::vector<int> out;
  for (int k : cfg.used_subcarriers)
    if (std::find(pilots.begin(), pilots.end(), k) == pilots.end()) out.push_back(k);
  return out;
}

inline std::size_t packet_length(std::size_t n_symbols, const RadioConfig& cfg) {
  return 5 * cfg.fft_size + n_symbols * cfg.symbol_len();
}

inline double packet_duration(std::size_t n_symbols, const RadioConfig& cfg) {
  return static_cast<double>(packet_length(n_symbols, cfg)) / cfg.sample_rate;
}

struct PacketMeta {
  double tx_time = 0.0;
  Mcs mcs;
  std::size_t n_symbols = 0;
  double duration = 0.0;

  static PacketMeta make(double tx_time, Mcs mcs, std::size_t n_symbols, const RadioConfig& cfg) {
    PacketMeta m{tx_time, mcs, n_symbols, packet_duration(n_symbols, cfg)};
    m.validate(cfg);
    return m;
  }

  std::size_t capacity_bits(const RadioConfig& cfg) const {
    return n_symbols * data_subcarriers(cfg).size() * bits_per_symbol(mcs.modulation);
  }

  void validate(const RadioConfig& cfg) const {
    if (duration > kMaxFrameDuration + 1e-12)
      throw std::invalid_argument("PacketMeta: duration exceeds maximum frame duration");
    if (std::abs(duration - packet_duration(n_symbols, cfg)) > 1e-12)
      throw std::invalid_argument("PacketMeta: duration inconsistent with symbol count");
  }
};

namespace detail {

// Gray-coded PAM level for `bits` bits (MSB first), 802.11 style.
inline double pam_level(std::span<const std::uint8_t> bits) {
  const int m = static_cast<int>(bits.size());
  int gray = 0;
  for (int i = 0; i < m; ++i) gray = (gray << 1) | bits[static_cast<std::size_t>(i)];
  int bin = gray;
  for (int s = 1; s < m; s <<= 1) bin ^= bin >> s;
  const int levels = 1 << m;
  return static_cast<double>(2 * bin - (levels - 1));
}

inline void pam_bits(double value, int m, std::uint8_t* out) {
  const int levels = 1 << m;
  int bin = static_cast<int>(std::lround((value + (levels - 1)) / 2.0));
  bin = std::clamp(bin, 0, levels - 1);
  const int gray = bin ^ (bin >> 1);
  for (int i = 0; i < m; ++i) out[i] = static_cast<std::uint8_t>((gray >> (m - 1 - i)) & 1);
}

inline double modulation_scale(Modulation m) {
  switch (m) {
    case Modulation::BPSK: return 1.0;
    case Modulation::QPSK: return 1.0 / std::sqrt(2.0);
    case Modulation::QAM16: return 1.0 / std::sqrt(10.0);
    case Modulation::QAM64: return 1.0 / std::sqrt(42.0);
  }
  return 1.0;
}

}  // namespace detail

inline Complex map_symbol(std::span<const std::uint8_t> bits, Modulation m) {
  const double k = detail::modulation_scale(m);
  if (m == Modulation::BPSK) return {bits[0] ? 1.0 : -1.0, 0.0};
  const std::size_t half = bits.size() / 2;
  return k * Complex{detail::pam_level(bits.subspan(0, half)), detail::pam_level(bits.subspan(half))};
}

inline void demap_symbol(Complex x, Modulation m, std::uint8_t* out) {
  if (m == Modulation::BPSK) {
    out[0] = x.real() > 0.0 ? 1 : 0;
    return;
  }
  const double k = detail::modulation_scale(m);
  const int half = static_cast<int>(bits_per_symbol(m) / 2);
  detail::pam_bits(x.real() / k, half, out);
  detail::pam_bits(x.imag() / k, half, out + half);
}

/// Preamble followed by cyclic-prefixed data symbols. Data bins carry the
/// payload (zero padded), pilot bins carry +1. Data symbols are scaled to unit
/// mean power given unit-power constellation points.
inline SampleBuffer build_packet(std::span<const std::uint8_t> payload_bits, const PacketMeta& meta,
                                 const RadioConfig& cfg) {
  meta.validate(cfg);
  if (payload_bits.size() > meta.capacity_bits(cfg))
    throw std::invalid_argument("build_packet: payload does not fit in n_symbols");
  const auto pre = generate_preamble(cfg);
  const std::size_t n = cfg.fft_size;
  const auto data_bins = data_subcarriers(cfg);
  const auto pilots = pilot_subcarriers(cfg);
  const std::size_t bps = bits_per_symbol(meta.mcs.modulation);
  const double scale = static_cast<double>(n) / std::sqrt(static_cast<double>(cfg.num_subcarriers()));

  ComplexVector out = pre.buffer.samples();
  out.reserve(packet_length(meta.n_symbols, cfg));
  std::size_t cursor = 0;
  std::vector<std::uint8_t> chunk(bps);
  for (std::size_t s = 0; s < meta.n_symbols; ++s) {
    ComplexVector freq(n);
    for (int k : pilots) freq[bin_position(k, n)] = {1.0, 0.0};
    for (int k : data_bins) {
      for (std::size_t b = 0; b < bps; ++b, ++cursor)
        chunk[b] = cursor < payload_bits.size() ? payload_bits[cursor] : 0;
      freq[bin_position(k, n)] = map_symbol(chunk, meta.mcs.modulation);
    }
    auto sym = ifft(freq);
    for (auto& v : sym) v *= scale;
    out.insert(out.end(), sym.end() - static_cast<std::ptrdiff_t>(cfg.cyclic_prefix_len), sym.end());
    out.insert(out.end(), sym.begin(), sym.end());
  }
  return SampleBuffer(std::move(out), cfg.sample_rate, meta.tx_time);
}

/// Hard-decision demodulation of the data symbols of a packet starting at
/// `start`, without equalization. Returns capacity_bits bits.
inline std::vector<std::uint8_t> demodulate_packet(const SampleBuffer& rx, std::size_t start,
                                                   const PacketMeta& meta, const RadioConfig& cfg) {
  const std::size_t n = cfg.fft_size;
  const std::size_t bps = bits_per_symbol(meta.mcs.modulation);
  const auto data_bins = data_subcarriers(cfg);
  const double scale = static_cast<double>(n) / std::sqrt(static_cast<double>(cfg.num_subcarriers()));
  if (start + packet_length(meta.n_symbols, cfg) > rx.size())
    throw std::invalid_argument("demodulate_packet: buffer too short");
  std::vector<std::uint8_t> bits(meta.capacity_bits(cfg));
  std::size_t cursor = 0;
  for (std::size_t s = 0; s < meta.n_symbols; ++s) {
    const std::size_t off = start + 5 * n + s * cfg.symbol_len() + cfg.cyclic_prefix_len;
    const auto spec = fft(rx.view().subspan(off, n), n);
    for (int k : data_bins) {
      demap_symbol(spec[bin_position(k, n)] / scale, meta.mcs.modulation, bits.data() + cursor);
      cursor += bps;
    }
  }
  return bits;
}

// ---------------------------------------------------------------------------
// Detection

struct Detection {
  std::size_t index = 0;  // estimated packet start
  double metric = 0.0;    // normalized delayed-autocorrelation peak, in [0, 1]
};

/// Normalized delayed autocorrelation over the short-section period:
/// |sum r[d+i] r*[d+i+L]| / sqrt(sum |r[d+i]|^2 sum |r[d+i+L]|^2), window N.
inline std::vector<double> autocorrelation_metric(std::span<const Complex> r, const RadioConfig& cfg) {
  const std::size_t lag = cfg.fft_size / 4;
  const std::size_t win = cfg.fft_size;
  std::vector<double> m;
  if (r.size() < win + lag) return m;
  const std::size_t count = r.size() - win - lag + 1;
  m.resize(count);
  Complex p{};
  double e1 = 0.0, e2 = 0.0;
  for (std::size_t i = 0; i < win; ++i) {
    p += r[i] * std::conj(r[i + lag]);
    e1 += std::norm(r[i]);
    e2 += std::norm(r[i + lag]);
  }
  for (std::size_t d = 0; d < count; ++d) {
    const double den = std::sqrt(e1 * e2);
    m[d] = den > 0.0 ? std::abs(p) / den : 0.0;
    if (d + 1 < count) {
      p += r[d + win] * std::conj(r[d + win + lag]) - r[d] * std::conj(r[d + lag]);
      e1 += std::norm(r[d + win]) - std::norm(r[d]);
      e2 += std::norm(r[d + win + lag]) - std::norm(r[d + lag]);
      e1 = std::max(e1, 0.0);
      e2 = std::max(e2, 0.0);
    }
  }
  return m;
}

/// Coarse detection on the short section (the metric must stay above threshold
/// for one short period), then fine timing by cross-correlating both long
/// symbols against the known long symbol.
inline std::optional<Detection> detect_preamble(const SampleBuffer& rx, const RadioConfig& cfg,
                                                double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0))
    throw std::invalid_argument("detect_preamble: threshold must be in (0, 1]");
  const auto pre = generate_preamble(cfg);
  const std::size_t n = cfg.fft_size;
  const std::size_t lag = n / 4;
  const auto metric = autocorrelation_metric(rx.view(), cfg);

  std::size_t coarse = metric.size();
  double peak = 0.0;
  for (std::size_t d = 0; d + lag <= metric.size(); ++d) {
    bool plateau = true;
    for (std::size_t i = 0; i < lag && plateau; ++i) plateau = metric[d + i] >= threshold;
    if (plateau) {
      coarse = d;
      break;
    }
  }
  if (coarse == metric.size()) return std::nullopt;
  for (std::size_t d = coarse; d < std::min(metric.size(), coarse + pre.short_len); ++d)
    peak = std::max(peak, metric[d]);

  const auto r = rx.view();
  const std::size_t lo = coarse;
  const std::size_t hi = coarse + pre.long_offset() + 2 * n;
  double best = -1.0;
  std::size_t best_m = 0;
  for (std::size_t m = lo; m <= hi && m + 2 * n <= r.size(); ++m) {
    Complex c1{}, c2{};
    for (std::size_t i = 0; i < n; ++i) {
      c1 += r[m + i] * std::conj(pre.long_symbol[i]);
      c2 += r[m + n + i] * std::conj(pre.long_symbol[i]);
    }
    const double c = std::abs(c1) + std::abs(c2);
    if (c > best) {
      best = c;
      best_m = m;
    }
  }
  if (best < 0.0 || best_m < pre.long_offset()) return std::nullopt;
  return Detection{best_m - pre.long_offset(), peak};
}

// ---------------------------------------------------------------------------
// CSI

/// Complex channel samples indexed [rx][tx][subcarrier].
struct CsiMatrix {
  std::size_t n_rx = 0, n_tx = 0, n_sc = 0;
  ComplexVector values;
  double timestamp = 0.0;
  std::uint64_t packet_id = 0;

  CsiMatrix() = default;
  CsiMatrix(std::size_t rx, std::size_t tx, std::size_t sc, double ts = 0.0, std::uint64_t id = 0)
      : n_rx(rx), n_tx(tx), n_sc(sc), values(rx * tx * sc), timestamp(ts), packet_id(id) {}

  Complex& at(std::size_t r, std::size_t t, std::size_t k) { return values[(r * n_tx + t) * n_sc + k]; }
  const Complex& at(std::size_t r, std::size_t t, std::size_t k) const {
    return values[(r * n_tx + t) * n_sc + k];
  }
  std::span<const Complex> row(std::size_t r, std::size_t t) const {
    return std::span<const Complex>(values).subspan((r * n_tx + t) * n_sc, n_sc);
  }

  void check(const RadioConfig& cfg) const {
    if (n_sc != cfg.num_subcarriers())
      throw std::invalid_argument("CsiMatrix: subcarrier dimension does not match config");
    for (const auto& v : values)
      if (!std::isfinite(v.real()) || !std::isfinite(v.imag()))
        throw std::invalid_argument("CsiMatrix: non-finite entry");
  }
};

/// Per-subcarrier ratio of the received long symbols (averaged) to the known
/// long symbol, for a packet whose start is `index`.
inline ComplexVector extract_csi_row(const SampleBuffer& rx, std::size_t index, const RadioConfig& cfg,
                                     const Preamble& pre) {
  const std::size_t n = cfg.fft_size;
  const std::size_t off = index + pre.long_offset();
  if (off + 2 * n > rx.size()) throw std::invalid_argument("extract_csi: index out of bounds");
  const auto s1 = fft(rx.view().subspan(off, n), n);
  const auto s2 = fft(rx.view().subspan(off + n, n), n);
  ComplexVector row;
  row.reserve(cfg.num_subcarriers());
  for (int k : cfg.used_subcarriers) {
    const std::size_t b = bin_position(k, n);
    row.push_back(0.5 * (s1[b] + s2[b]) / pre.long_spectrum[b]);
  }
  return row;
}

inline CsiMatrix extract_csi(const SampleBuffer& rx, std::size_t index, const RadioConfig& cfg,
                             std::uint64_t packet_id = 0) {
  const auto pre = generate_preamble(cfg);
  CsiMatrix csi(1, 1, cfg.num_subcarriers(), rx.time_of(index), packet_id);
  const auto row = extract_csi_row(rx, index, cfg, pre);
  std::copy(row.begin(), row.end(), csi.values.begin());
  return csi;
}

/// One rx buffer per antenna, single transmit stream.
inline CsiMatrix extract_csi(std::span<const SampleBuffer> rx, std::size_t index, const RadioConfig& cfg,
                             std::uint64_t packet_id = 0) {
  if (rx.empty()) throw std::invalid_argument("extract_csi: no antennas");
  const auto pre = generate_preamble(cfg);
  CsiMatrix csi(rx.size(), 1, cfg.num_subcarriers(), rx[0].time_of(index), packet_id);
  for (std::size_t a = 0; a < rx.size(); ++a) {
    const auto row = extract_csi_row(rx[a], index, cfg, pre);
    std::copy(row.begin(), row.end(), csi.values.begin() + static_cast<std::ptrdiff_t>(a * csi.n_sc));
  }
  return csi;
}

/// CSV columns: packet_id,timestamp_s,rx_ant,tx_ant,subcarrier,real,imag
inline void write_csi_csv(std::ostream& os, std::span<const CsiMatrix> series, const RadioConfig& cfg,
                          bool header = true) {
  if (header) os << "packet_id,timestamp_s,rx_ant,tx_ant,subcarrier,real,imag\n";
  const auto old_prec = os.precision(17);
  for (const auto& c : series) {
    c.check(cfg);
    for (std::size_t r = 0; r < c.n_rx; ++r)
      for (std::size_t t = 0; t < c.n_tx; ++t)
        for (std::size_t k = 0; k < c.n_sc; ++k) {
          const auto v = c.at(r, t, k);
          os << c.packet_id << ',' << c.timestamp << ',' << r << ',' << t << ',' << cfg.used_subcarriers[k]
             << ',' << v.real() << ',' << v.imag() << '\n';
        }
  }
  os.precision(old_prec);
}

}  // namespace isacfi
