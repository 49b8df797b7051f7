#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "isacfi/cancellation.hpp"

using namespace isacfi;

namespace {

const ComplexVector& preamble() {
  static const ComplexVector p = generate_preamble(RadioConfig{}).buffer.samples();
  return p;
}

LeakageChannel static_leakage(ComplexVector taps) {
  LeakageChannel ch;
  ch.taps = std::move(taps);
  ch.antenna_contribution = 0.0;
  ch.drift_per_sqrt_minute = 0.0;
  return ch;
}

CancellatorState calibrated(const LeakageChannel& ch, const SeparatorConfig& cfg, double noise_w, double t = 0.0) {
  CalibrationInput in;
  in.leakage = &ch;
  in.tx_ref = preamble();
  in.noise_power_w = noise_w;
  in.time_s = t;
  return calibrate(switch_to_dummy_load(CancellatorState::fresh(cfg)), in, cfg);
}

SeparatorSignal antenna_capture(const LeakageChannel& ch, double t, double noise_w, std::uint64_t seed,
                                Complex refl_gain = {}, std::size_t refl_delay = 2) {
  const auto& x = preamble();
  SeparatorSignal s = SeparatorSignal::zeros(x.size());
  s.leakage = fir_filter(ch.taps_at(t, Port::Antenna), x, x.size());
  for (std::size_t i = refl_delay; i < x.size(); ++i) s.reflection[i] = refl_gain * x[i - refl_delay];
  NoiseSource rng(seed);
  s.noise = rng.samples(x.size(), noise_w);
  return s;
}

}  // namespace

TEST(FirstStage, AttenuatesLeakageOnly) {
  NoiseSource rng(1);
  SeparatorSignal s = SeparatorSignal::zeros(500);
  s.leakage = rng.samples(500, 1.0);
  s.reflection = rng.samples(500, 1e-3);
  const auto out = first_stage(s, FirstStageKind::Circulator);
  EXPECT_NEAR(linear_to_db(mean_power(s.leakage) / mean_power(out.leakage)), 12.0, 0.1);
  EXPECT_EQ(out.reflection, s.reflection);
  const auto hybrid = first_stage(s, FirstStageKind::HybridCoupler);
  EXPECT_NEAR(linear_to_db(mean_power(s.leakage) / mean_power(hybrid.leakage)), 12.0, 0.1);
}

TEST(Calibrate, SingleTapClosedForm) {
  SeparatorConfig cfg;
  cfg.isolation_db = 0.0;
  const Complex g = std::polar(0.1, std::numbers::pi / 4);
  const auto ch = static_leakage({g});
  std::vector<CalibrationLogEntry> log;
  CalibrationInput in{&ch, preamble(), 0.0, 0.0, 1};
  const auto st = calibrate(switch_to_dummy_load(CancellatorState::fresh(cfg)), in, cfg, &log);
  EXPECT_LT(std::abs(st.analog_tap + g), 1e-9);
  EXPECT_EQ(st.port, Port::Antenna);
  ASSERT_EQ(log.size(), 3u);
  EXPECT_LE(log[1].residual_db, -60.0);
  EXPECT_LE(log[2].residual_db, -60.0);
}

TEST(Calibrate, ZeroLeakageGivesZeroTaps) {
  SeparatorConfig cfg;
  const auto ch = static_leakage({Complex{}});
  const auto st = calibrated(ch, cfg, 0.0);
  EXPECT_EQ(std::abs(st.analog_tap), 0.0);
  for (const auto& w : st.digital_taps) EXPECT_EQ(std::abs(w), 0.0);
}

TEST(Calibrate, RequiresDummyLoad) {
  SeparatorConfig cfg;
  const auto ch = static_leakage({Complex{0.1, 0.0}});
  CalibrationInput in{&ch, preamble(), 0.0, 0.0, 1};
  EXPECT_THROW(calibrate(CancellatorState::fresh(cfg), in, cfg), ProtocolViolation);
}

TEST(Calibrate, ThreeTapDigitalGainAgainstWiener) {
  SeparatorConfig cfg;
  const auto ch = static_leakage({{0.3, 0.1}, {0.02, -0.01}, {-0.005, 0.008}});
  const auto st = calibrated(ch, cfg, 0.0);
  const auto cap = antenna_capture(ch, 0.0, 0.0, 1);
  const auto s1 = first_stage(cap, cfg.first_stage, cfg.isolation_db);
  const auto s2 = analog_cancel(s1, preamble(), st.analog_tap);
  const auto s3 = digital_cancel(s2, preamble(), st);
  const double gain = linear_to_db(mean_power(s2.leakage) / mean_power(s3.leakage));
  EXPECT_GE(gain, 25.0);

  // closed-form least-squares FIR on the same post-analog residual
  const auto w = least_squares_fir(s2.leakage, preamble(), cfg.digital_taps);
  const auto ideal = fir_filter(w, preamble(), preamble().size());
  ComplexVector e(ideal.size());
  for (std::size_t i = 0; i < e.size(); ++i) e[i] = s2.leakage[i] - ideal[i];
  EXPECT_LT(mean_power(e), 1e-20);
}

TEST(Nlms, ConvergesToLeastSquaresTaps) {
  NoiseSource rng(3);
  const auto ref = rng.samples(2000, 1.0);
  const ComplexVector h{{0.5, 0.2}, {-0.1, 0.3}, {0.05, 0.0}, {0.0, -0.02}};
  const auto d = fir_filter(h, ref, ref.size());
  ComplexVector w(8);
  nlms_adapt(w, d, ref, 0.1, 20);
  const auto ls = least_squares_fir(d, ref, 8);
  double err = 0.0, norm = 0.0;
  for (std::size_t i = 0; i < 8; ++i) {
    err += std::norm(w[i] - ls[i]);
    norm += std::norm(ls[i]);
  }
  EXPECT_LT(std::sqrt(err / norm), 1e-3);
}

TEST(Nlms, PreambleOnlyAdaptationMatchesLeastSquares) {
  SeparatorConfig cfg;
  const ComplexVector h{{0.02, 0.01}, {-0.004, 0.003}, {0.001, 0.0}};
  const auto d = fir_filter(h, preamble(), preamble().size());
  ComplexVector w(cfg.digital_taps);
  nlms_adapt(w, d, preamble(), cfg.mu, 400);
  const auto ls = least_squares_fir(d, preamble(), cfg.digital_taps);
  double err = 0.0, norm = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    err += std::norm(w[i] - ls[i]);
    norm += std::norm(ls[i]);
  }
  EXPECT_LT(std::sqrt(err / norm), 1e-3);
}

TEST(DigitalCancel, PerfectModelMatch) {
  SeparatorConfig cfg;
  auto st = CancellatorState::fresh(cfg);
  st.digital_taps[0] = {0.2, 0.1};
  st.digital_taps[3] = {-0.05, 0.02};
  st.calibrated = true;
  const SampleBuffer ref(preamble(), 20e6);
  const SampleBuffer rx(fir_filter(st.digital_taps, preamble(), preamble().size()), 20e6);
  const auto out = digital_cancel(rx, ref, st);
  EXPECT_LE(linear_to_db(out.power() / rx.power()), -80.0);

  const auto zero = digital_cancel(SampleBuffer(ComplexVector(10), 20e6), SampleBuffer(ComplexVector(10), 20e6), st);
  for (const auto& v : zero.samples()) EXPECT_EQ(v, Complex{});
}

TEST(DigitalCancel, UncalibratedIsViolation) {
  SeparatorConfig cfg;
  const SampleBuffer b(ComplexVector(8), 20e6);
  EXPECT_THROW(digital_cancel(b, b, CancellatorState::fresh(cfg)), ProtocolViolation);
}

TEST(Separator, DefaultBudgetAndPreservation) {
  SeparatorConfig cfg;
  const double noise = dbm_to_watts(-90.0);
  const auto ch = LeakageChannel::with_power(noise * db_to_linear(77.0), 11);
  const auto st = calibrated(ch, cfg, noise);
  const auto cap = antenna_capture(ch, 1.0, noise, 5);
  const auto b = measure_budget(cap, preamble(), preamble(), st, cfg, noise);
  EXPECT_NEAR(b.first_stage_db, 12.0, 1.0);
  EXPECT_GE(b.analog_db, 35.0);
  EXPECT_GE(b.digital_db, 20.0);
  EXPECT_GE(b.total_db, 70.0);
  EXPECT_LE(std::abs(b.residual_over_floor_db), 3.0);

  // reflection delayed beyond the leakage span, 20 dB above the floor
  const Complex refl = std::sqrt(noise * 100.0);
  const auto with = antenna_capture(ch, 1.0, noise, 5, refl, 6);
  const double kept = preserved_power(with, cap, preamble(), preamble(), st, st, cfg);
  EXPECT_NEAR(linear_to_db(kept / (noise * 100.0 * 314.0 / 320.0)), 0.0, 1.0);
}

TEST(Separator, NonSelfAdaptedAblationLosesReflection) {
  SeparatorConfig cfg;
  const double noise = dbm_to_watts(-90.0);
  const auto ch = LeakageChannel::with_power(noise * db_to_linear(77.0), 11);
  const Complex refl = std::sqrt(noise * 100.0);
  const auto with = antenna_capture(ch, 1.0, noise, 5, refl, 6);
  const auto without = antenna_capture(ch, 1.0, noise, 5);
  const auto fresh = CancellatorState::fresh(cfg);
  const auto a = adapt_on_capture(fresh, first_stage(with, cfg.first_stage, cfg.isolation_db), preamble(), cfg);
  const auto b = adapt_on_capture(fresh, first_stage(without, cfg.first_stage, cfg.isolation_db), preamble(), cfg);
  const double kept = preserved_power(with, without, preamble(), preamble(), a, b, cfg);
  EXPECT_LE(linear_to_db(kept / (noise * 100.0)), -10.0);
}

TEST(Separator, PipelineGatedByState) {
  SeparatorConfig cfg;
  const double noise = dbm_to_watts(-90.0);
  const auto ch = LeakageChannel::with_power(noise * 1e7, 2);
  const auto st = calibrated(ch, cfg, noise);
  const std::vector<SeparatorSignal> rx{antenna_capture(ch, 0.0, noise, 1)};
  for (auto mode : {MacState::C, MacState::B}) {
    const auto out = separator_pipeline(rx, preamble(), preamble(), st, mode, cfg);
    EXPECT_EQ(out[0].total(), rx[0].total());
    EXPECT_THROW(separator_pipeline(rx, preamble(), preamble(), st, mode, cfg, true), ProtocolViolation);
  }
  const auto m = separator_pipeline(rx, preamble(), preamble(), st, MacState::M, cfg);
  EXPECT_LT(m[0].leakage_power(320), 1e-6 * rx[0].leakage_power(320));
  EXPECT_THROW(separator_pipeline(rx, preamble(), preamble(), CancellatorState::fresh(cfg), MacState::M, cfg),
               ProtocolViolation);
}

TEST(Separator, RemotePreambleIsSuppressed) {
  // a remote packet carrying the same preamble, received with the digital
  // stage forced to adapt on it
  SeparatorConfig cfg;
  const double noise = dbm_to_watts(-90.0);
  const Complex remote = std::sqrt(noise * db_to_linear(25.0));
  const auto ch = static_leakage({Complex{}});
  const auto with = antenna_capture(ch, 0.0, noise, 9, remote, 3);
  const auto without = antenna_capture(ch, 0.0, noise, 9);
  const auto forced = adapt_on_capture(CancellatorState::fresh(cfg), with, preamble(), cfg);
  const auto clean = adapt_on_capture(CancellatorState::fresh(cfg), without, preamble(), cfg);
  const double kept = preserved_power(with, without, preamble(), preamble(), forced, clean, cfg);
  const double snr_before = linear_to_db(std::norm(remote) / noise);
  const double snr_after = linear_to_db(kept / noise);
  EXPECT_GE(snr_before - snr_after, 10.0);
}

TEST(Leakage, StableOverTenMinutesAndCalibrationHolds) {
  SeparatorConfig cfg;
  const double noise = dbm_to_watts(-90.0);
  const auto ch = LeakageChannel::with_power(noise * db_to_linear(77.0), 4);
  EXPECT_GE(ch.correlation(0.0, Port::DummyLoad, 600.0, Port::Antenna), 0.9);
  const auto st = calibrated(ch, cfg, noise, 0.0);
  for (double t : {0.0, 60.0, 300.0, 600.0}) {
    const auto b = measure_budget(antenna_capture(ch, t, noise, 3), preamble(), preamble(), st, cfg, noise);
    EXPECT_LE(b.residual_over_floor_db, 3.0) << "t=" << t;
  }
}

TEST(Leakage, WithPowerScalesEnergy) {
  const auto ch = LeakageChannel::with_power(2.5, 1);
  EXPECT_NEAR(ch.power(), 2.5, 1e-12);
  EXPECT_EQ(ch.taps.size(), 4u);
  EXPECT_NEAR(linear_to_db((ch.power() - std::norm(ch.taps[0])) / ch.power()), -40.0, 0.5);
}

TEST(CalibrationLog, CsvColumns) {
  std::vector<CalibrationLogEntry> log{{1.5, "analog", -40.25, Port::DummyLoad}};
  std::ostringstream os;
  write_calibration_log(os, log);
  EXPECT_EQ(os.str(), "time_s,stage,residual_dB,port\n1.5,analog,-40.25,dummy_load\n");
}

TEST(PowerRegression, Examples) {
  const std::vector<std::pair<double, double>> two{{0.0, 70.0}, {10.0, 80.0}};
  EXPECT_NEAR(params_for_power(5.0, two).cancellation_db, 75.0, 1e-12);
  const std::vector<std::pair<double, double>> one{{0.0, 70.0}};
  EXPECT_THROW(params_for_power(5.0, one), std::invalid_argument);

  NoiseSource rng(12);
  std::vector<std::pair<double, double>> noisy;
  for (int i = 0; i < 30; ++i) {
    const double p = -10.0 + i;
    noisy.emplace_back(p, 0.8 * p + 65.0 + 0.3 * rng.gaussian());
  }
  EXPECT_NEAR(fit_cancellation(noisy).slope, 0.8, 0.04);
}
