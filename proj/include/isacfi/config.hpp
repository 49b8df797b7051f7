#pragma once

// Flat `dotted.key = value` configuration with a fixed schema. Lines starting
// with '#' are comments. Unknown keys and malformed values are rejected with
// the offending line number.

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "isacfi/ofdm.hpp"

namespace isacfi {

struct ConfigError : std::runtime_error {
  std::string source;
  std::size_t line = 0;  // 0: not tied to a line
  ConfigError(std::string src, std::size_t ln, const std::string& msg)
      : std::runtime_error(src + (ln ? ":" + std::to_string(ln) : std::string()) + ": " + msg),
        source(std::move(src)),
        line(ln) {}
};

enum class ConfigType { Real, Integer, Boolean, Text };

struct ConfigKey {
  const char* name;
  ConfigType type;
  const char* default_value;
  const char* help;
};

inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> keys = {
      {"radio.carrier_freq_hz", ConfigType::Real, "2.4e9", "carrier frequency"},
      {"radio.sample_rate_hz", ConfigType::Real, "20e6", "sample rate (= bandwidth)"},
      {"radio.fft_size", ConfigType::Integer, "64", "FFT size N; subcarrier spacing is recomputed"},
      {"radio.cp_len", ConfigType::Integer, "0", "cyclic prefix length; 0 uses fft_size / 4"},
      {"scene.size_m", ConfigType::Real, "10", "side of the square localization scene"},
      {"scene.snr_db", ConfigType::Real, "15", "SNR of the target path in the CSI"},
      {"scene.clutter_count", ConfigType::Integer, "3", "static reflectors per ranging trial"},
      {"scene.clutter_rcs_max", ConfigType::Real, "1.0", "upper bound of clutter RCS"},
      {"separator.isolation_db", ConfigType::Real, "12", "circulator isolation"},
      {"separator.digital_taps", ConfigType::Integer, "16", "digital cancellator length"},
      {"separator.mu", ConfigType::Real, "0.1", "NLMS step size"},
      {"separator.leakage_over_floor_db", ConfigType::Real, "77", "leakage power above the noise floor"},
      {"separator.noise_floor_dbm", ConfigType::Real, "-90", "receiver noise floor"},
      {"separator.recalibration_interval_s", ConfigType::Real, "60", "dummy-load recalibration period"},
      {"estimation.lambda_fraction", ConfigType::Real, "0.1", "lasso weight as a fraction of ||A^H y||_inf"},
      {"estimation.max_iter", ConfigType::Integer, "300", "ADMM iteration cap"},
      {"estimation.window_s", ConfigType::Real, "0.5", "CSI window per ranging/localization estimate"},
      {"estimation.velocity_window_s", ConfigType::Real, "1.0", "CSI window per velocity estimate"},
      {"traffic.kind", ConfigType::Text, "streaming", "regular | streaming | gaming"},
      {"traffic.rate_hz", ConfigType::Real, "40", "rate of the regular model"},
      {"mac.timer_ms", ConfigType::Real, "1", "M -> C timer after TxComplete"},
      {"mac.duration_s", ConfigType::Real, "10", "paired comms-impact run length"},
      {"mac.events", ConfigType::Integer, "1000000", "event count of the long invariant run"},
      {"mac.peer_cfo_hz", ConfigType::Real, "5000", "residual CFO of remote packets"},
      {"fusion.cell_m", ConfigType::Real, "0.25", "likelihood grid cell"},
      {"fusion.sigma_range_m", ConfigType::Real, "0.5", "range observation sigma"},
      {"fusion.sigma_aoa_deg", ConfigType::Real, "5", "AoA observation sigma"},
      {"experiment.trials", ConfigType::Integer, "0", "trial count; 0 uses the experiment default"},
      {"experiment.threads", ConfigType::Integer, "0", "worker threads; 0 uses the hardware count"},
  };
  return keys;
}

class Config {
 public:
  /// All schema keys at their defaults.
  Config() {
    for (const auto& k : config_schema()) values_[k.name] = k.default_value;
  }

  static Config parse(std::istream& in, const std::string& source = "<config>") {
    Config c;
    std::string raw;
    std::size_t ln = 0;
    std::map<std::string, std::size_t> seen;
    while (std::getline(in, raw)) {
      ++ln;
      const auto line = trim(raw.substr(0, raw.find('#')));
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ConfigError(source, ln, "expected 'key = value'");
      const auto key = trim(line.substr(0, eq));
      const auto value = trim(line.substr(eq + 1));
      if (key.empty()) throw ConfigError(source, ln, "missing key");
      if (seen.count(key)) throw ConfigError(source, ln, "duplicate key '" + key + "' (first on line " + std::to_string(seen[key]) + ")");
      seen[key] = ln;
      c.set(key, value, source, ln);
    }
    return c;
  }

  static Config parse_string(const std::string& text, const std::string& source = "<string>") {
    std::istringstream is(text);
    return parse(is, source);
  }

  static Config load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError(path, 0, "cannot open file");
    return parse(f, path);
  }

  /// Validates against the schema; `line` only feeds diagnostics.
  void set(const std::string& key, const std::string& value, const std::string& source = "<override>",
           std::size_t line = 0) {
    const auto* k = find(key);
    if (!k) throw ConfigError(source, line, "unknown key '" + key + "'");
    check_type(*k, value, source, line);
    values_[key] = value;
  }

  double real(const std::string& key) const { return std::stod(get(key)); }
  std::int64_t integer(const std::string& key) const { return std::stoll(get(key)); }
  bool boolean(const std::string& key) const { return get(key) == "true"; }
  const std::string& text(const std::string& key) const { return get(key); }

  /// Every key, sorted, one `key = value` per line.
  std::string normalized() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

  /// 64-bit FNV-1a of the normalized text, as 16 hex digits.
  std::string hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : normalized()) {
      h ^= ch;
      h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
  }

  RadioConfig radio() const {
    RadioConfig r;
    try {
      r.carrier_freq = real("radio.carrier_freq_hz");
      r.sample_rate = real("radio.sample_rate_hz");
      r.set_fft_size(static_cast<std::size_t>(integer("radio.fft_size")));
      const auto cp = static_cast<std::size_t>(integer("radio.cp_len"));
      r.cyclic_prefix_len = cp == 0 ? r.fft_size / 4 : cp;
      r.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError("<config>", 0, e.what());
    }
    return r;
  }

 private:
  const std::string& get(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw std::out_of_range("Config: no key '" + key + "'");
    return it->second;
  }

  static const ConfigKey* find(const std::string& key) {
    for (const auto& k : config_schema())
      if (key == k.name) return &k;
    return nullptr;
  }

  static std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
  }

  static void check_type(const ConfigKey& k, const std::string& v, const std::string& source, std::size_t line) {
    auto bad = [&](const char* what) {
      throw ConfigError(source, line, "key '" + std::string(k.name) + "' expects " + what + ", got '" + v + "'");
    };
    switch (k.type) {
      case ConfigType::Real: {
        double x = 0.0;
        const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
        if (v.empty() || ec != std::errc{} || p != v.data() + v.size() || !std::isfinite(x)) bad("a number");
        break;
      }
      case ConfigType::Integer: {
        long long x = 0;
        const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
        if (v.empty() || ec != std::errc{} || p != v.data() + v.size() || x < 0) bad("a non-negative integer");
        break;
      }
      case ConfigType::Boolean:
        if (v != "true" && v != "false") bad("true or false");
        break;
      case ConfigType::Text:
        if (v.empty()) bad("a value");
        break;
    }
  }

  std::map<std::string, std::string> values_;
};

}  // namespace isacfi
