#include <gtest/gtest.h>

#include <random>
#include <sstream>

#include "isacfi/estimation.hpp"
#include "isacfi/traffic.hpp"

using namespace isacfi;

namespace {

struct TestPath {
  double tau;
  double doppler;
  Complex amp{1.0, 0.0};
};

// CSI written out from the path model with plain loops.
std::vector<CsiMatrix> make_series(const RadioConfig& cfg, const TxSchedule& sched, const std::vector<TestPath>& paths,
                                   double noise_power = 0.0, std::uint64_t seed = 1) {
  NoiseSource rng(seed);
  std::vector<CsiMatrix> out;
  const double df = cfg.subcarrier_spacing();
  for (std::size_t l = 0; l < sched.size(); ++l) {
    CsiMatrix c(1, 1, cfg.num_subcarriers(), sched.times[l], l);
    const double t = sched.times[l] - sched.times.front();
    for (std::size_t k = 0; k < c.n_sc; ++k) {
      const double f = cfg.carrier_freq + cfg.used_subcarriers[k] * df;
      Complex h{};
      for (const auto& p : paths) h += p.amp * std::polar(1.0, -kTwoPi * f * p.tau + kTwoPi * p.doppler * t);
      if (noise_power > 0.0) h += rng.sample(noise_power);
      c.at(0, 0, k) = h;
    }
    out.push_back(std::move(c));
  }
  return out;
}

// Exhaustive single-atom correlation over (delay, Doppler).
std::pair<double, double> matched_filter(const RadioConfig& cfg, const TxSchedule& sched,
                                         const std::vector<CsiMatrix>& s, const std::vector<double>& delays,
                                         const std::vector<double>& dopplers) {
  double best = -1.0, bt = 0.0, bf = 0.0;
  const double df = cfg.subcarrier_spacing();
  for (double tau : delays) {
    std::vector<Complex> per_packet(s.size());
    for (std::size_t l = 0; l < s.size(); ++l)
      for (std::size_t k = 0; k < s[l].n_sc; ++k)
        per_packet[l] += s[l].at(0, 0, k) *
                         std::polar(1.0, kTwoPi * (cfg.carrier_freq + cfg.used_subcarriers[k] * df) * tau);
    for (double fd : dopplers) {
      Complex acc{};
      for (std::size_t l = 0; l < s.size(); ++l)
        acc += per_packet[l] * std::polar(1.0, -kTwoPi * fd * (sched.times[l] - sched.times.front()));
      if (std::abs(acc) > best) {
        best = std::abs(acc);
        bt = tau;
        bf = fd;
      }
    }
  }
  return {bt, bf};
}

Eigen::MatrixXcd gaussian_matrix(int m, int n, std::uint64_t seed) {
  NoiseSource rng(seed);
  Eigen::MatrixXcd a(m, n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) a(i, j) = rng.sample(1.0 / m);
  return a;
}

// Proximal gradient run to convergence.
Eigen::VectorXcd ista(const Eigen::MatrixXcd& a, const Eigen::VectorXcd& y, double lambda) {
  const double lip = Eigen::JacobiSVD<Eigen::MatrixXcd>(a).singularValues()(0);
  const double step = 1.0 / (lip * lip);
  Eigen::VectorXcd x = Eigen::VectorXcd::Zero(a.cols());
  for (int it = 0; it < 200000; ++it) {
    Eigen::VectorXcd g = x - step * (a.adjoint() * (a * x - y));
    for (Eigen::Index i = 0; i < g.size(); ++i) {
      const double m = std::abs(g(i));
      g(i) = m <= step * lambda ? Complex{} : g(i) * (1.0 - step * lambda / m);
    }
    const double d = (g - x).norm();
    x = g;
    if (d < 1e-14) break;
  }
  return x;
}

double objective(const Eigen::MatrixXcd& a, const Eigen::VectorXcd& y, const Eigen::VectorXcd& x, double lambda) {
  return 0.5 * (y - a * x).squaredNorm() + lambda * x.cwiseAbs().sum();
}

TxSchedule streaming_schedule(double duration, std::uint64_t seed) {
  return generate_traffic(TrafficModel::streaming(seed), duration);
}

std::vector<double> axis(double lo, double hi, double step) { return FeatureGrid::axis(lo, hi, step); }

}  // namespace

// ---------------------------------------------------------------------------
// Lasso

TEST(AdmmLasso, IdentityOperatorSoftThresholds) {
  const Eigen::MatrixXcd a = Eigen::MatrixXcd::Identity(8, 8);
  ComplexVector y(8);
  y[2] = 3.0;
  LassoOptions o;
  o.lambda = 1.0;
  const auto r = admm_lasso(a, y, o);
  EXPECT_TRUE(r.converged);
  for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(std::abs(r.x[i] - (i == 2 ? Complex{2.0} : Complex{})), 0.0, 1e-6);
}

TEST(AdmmLasso, ZeroInputGivesZero) {
  const Eigen::MatrixXcd a = gaussian_matrix(16, 64, 3);
  const ComplexVector y(16);
  const auto r = admm_lasso(a, y);
  for (const auto& v : r.x) EXPECT_EQ(v, Complex{});
}

TEST(AdmmLasso, RecoversTwoSparseSupportAndMatchesIsta) {
  const Eigen::MatrixXcd a = gaussian_matrix(16, 64, 7);
  Eigen::VectorXcd truth = Eigen::VectorXcd::Zero(64);
  truth(5) = {1.0, 0.5};
  truth(40) = {-0.8, 0.3};
  const Eigen::VectorXcd y = a * truth;
  const ComplexVector yv(y.data(), y.data() + y.size());
  const double amax = (a.adjoint() * y).cwiseAbs().maxCoeff();
  for (double frac : {0.02, 0.05, 0.1, 0.2}) {
    LassoOptions o;
    o.lambda = frac * amax;
    o.max_iter = 20000;
    o.abs_tol = 1e-12;
    o.rel_tol = 1e-12;
    const auto r = admm_lasso(a, yv, o);
    const Eigen::Map<const Eigen::VectorXcd> x(r.x.data(), 64);
    for (Eigen::Index i = 0; i < 64; ++i) EXPECT_EQ(std::abs(x(i)) > 1e-6, i == 5 || i == 40) << "frac " << frac;
    const auto ref = ista(a, y, o.lambda);
    EXPECT_LE(objective(a, y, x, o.lambda), objective(a, y, ref, o.lambda) + 1e-6);
    EXPECT_NEAR(r.objective, objective(a, y, x, o.lambda), 1e-9);
  }
}

TEST(AdmmLasso, GenericOperatorMatchesDense) {
  const Eigen::MatrixXcd a = gaussian_matrix(20, 50, 11);
  Eigen::VectorXcd truth = Eigen::VectorXcd::Zero(50);
  truth(3) = 1.0;
  truth(17) = {0.0, -0.7};
  const Eigen::VectorXcd y = a * truth;
  const ComplexVector yv(y.data(), y.data() + y.size());
  LassoOptions o;
  o.max_iter = 5000;
  const auto dense = admm_lasso(a, yv, o);
  LinearOperator fa = [&a](std::span<const Complex> v) {
    const Eigen::VectorXcd r = a * Eigen::Map<const Eigen::VectorXcd>(v.data(), static_cast<Eigen::Index>(v.size()));
    return ComplexVector(r.data(), r.data() + r.size());
  };
  LinearOperator fah = [&a](std::span<const Complex> v) {
    const Eigen::VectorXcd r =
        a.adjoint() * Eigen::Map<const Eigen::VectorXcd>(v.data(), static_cast<Eigen::Index>(v.size()));
    return ComplexVector(r.data(), r.data() + r.size());
  };
  const auto gen = admm_lasso(fa, fah, 50, yv, o);
  EXPECT_NEAR(gen.objective, dense.objective, 1e-6 * dense.objective);
  for (std::size_t i = 0; i < 50; ++i) EXPECT_NEAR(std::abs(gen.x[i] - dense.x[i]), 0.0, 1e-4);
}

TEST(AdmmLasso, DimensionMismatchThrows) {
  const Eigen::MatrixXcd a = gaussian_matrix(16, 64, 1);
  EXPECT_THROW(admm_lasso(a, ComplexVector(15)), std::invalid_argument);
  LinearOperator fa = [](std::span<const Complex>) { return ComplexVector(4); };
  LinearOperator fah = [](std::span<const Complex>) { return ComplexVector(7); };
  EXPECT_THROW(admm_lasso(fa, fah, 8, ComplexVector(4)), std::invalid_argument);
}

TEST(AdmmLasso, ObjectiveMonotoneAfterWarmup) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const Eigen::MatrixXcd a = gaussian_matrix(24, 80, seed);
    NoiseSource rng(seed + 100);
    Eigen::VectorXcd truth = Eigen::VectorXcd::Zero(80);
    truth(10) = 1.0;
    truth(55) = {0.4, 0.4};
    Eigen::VectorXcd y = a * truth;
    for (Eigen::Index i = 0; i < y.size(); ++i) y(i) += rng.sample(1e-3);
    const ComplexVector yv(y.data(), y.data() + y.size());
    const double col = a.squaredNorm() / static_cast<double>(a.cols());
    LassoOptions o;
    o.record_objective = true;
    o.max_iter = 400;
    // default penalty: small transient bumps only
    auto r = admm_lasso(a, yv, o);
    for (std::size_t i = 6; i < r.history.size(); ++i) EXPECT_LE(r.history[i], r.history[i - 1] * 1.01);
    const auto ref = ista(a, y, r.lambda);
    EXPECT_LE(r.objective, objective(a, y, ref, r.lambda) + 1e-6);
    // damped penalty: monotone
    o.rho = 5.0 * col;
    r = admm_lasso(a, yv, o);
    ASSERT_GT(r.history.size(), 6u);
    for (std::size_t i = 6; i < r.history.size(); ++i)
      EXPECT_LE(r.history[i], r.history[i - 1] + 1e-9 * r.history.front()) << "seed " << seed << " iteration " << i;
    EXPECT_LE(r.objective, objective(a, y, ref, r.lambda) + 1e-6);
  }
}

TEST(AdmmLasso, HittingMaxIterIsFlagged) {
  const Eigen::MatrixXcd a = gaussian_matrix(16, 64, 2);
  Eigen::VectorXcd truth = Eigen::VectorXcd::Zero(64);
  truth(1) = 1.0;
  const Eigen::VectorXcd y = a * truth;
  LassoOptions o;
  o.max_iter = 2;
  const auto r = admm_lasso(a, ComplexVector(y.data(), y.data() + y.size()), o);
  EXPECT_FALSE(r.converged);
  EXPECT_EQ(r.iterations, 2u);
}

TEST(SeparableOperator, AdjointIsConsistent) {
  RadioConfig cfg;
  const auto sched = streaming_schedule(0.2, 4);
  const auto d = axis(0, 200e-9, 10e-9);
  const auto f = axis(-10, 10, 1);
  const SeparableOperator op(delay_atoms(cfg, d), doppler_atoms(sched.times, f));
  NoiseSource rng(1);
  const auto x = rng.samples(static_cast<std::size_t>(op.cols()), 1.0);
  const auto y = rng.samples(cfg.num_subcarriers() * sched.size(), 1.0);
  const auto ax = op.apply(x);
  const auto ahy = op.adjoint(y);
  Complex lhs{}, rhs{};
  for (std::size_t i = 0; i < y.size(); ++i) lhs += std::conj(y[i]) * ax[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += std::conj(ahy[i]) * x[i];
  EXPECT_NEAR(std::abs(lhs - rhs), 0.0, 1e-8 * std::abs(lhs));
}

// ---------------------------------------------------------------------------
// Sparse delay-Doppler features

TEST(SparseFeatures, SinglePathRegularMatchesMatchedFilter) {
  RadioConfig cfg;
  const auto sched = TxSchedule::regular(50.0, 40);
  const auto s = make_series(cfg, sched, {{100e-9, 0.0}}, db_to_linear(-15.0), 3);
  const FeatureGrid grid{0, 300e-9, 5e-9, 20, 1};
  const auto fv = estimate_features_sparse(s, sched, cfg, grid);
  const auto atom = fv.strongest();
  ASSERT_TRUE(atom);
  const auto [mt, mf] = matched_filter(cfg, sched, s, grid.delays(), grid.dopplers());
  EXPECT_LE(std::abs(atom->delay - mt), grid.delay_step + 1e-12);
  EXPECT_LE(std::abs(atom->delay - 100e-9), grid.delay_step + 1e-12);
  EXPECT_LE(std::abs(atom->doppler - mf), grid.doppler_step + 1e-12);
  EXPECT_LT(fv.nonzeros(), static_cast<std::size_t>(fv.coefficients.size()) / 20);
}

TEST(SparseFeatures, SinglePathIrregularMatchesWhileNaiveFftSmears) {
  RadioConfig cfg;
  const auto sched = streaming_schedule(0.5, 8);
  ASSERT_FALSE(sched.is_uniform(1e-3));
  const auto s = make_series(cfg, sched, {{100e-9, 10.0}}, db_to_linear(-15.0), 4);
  const FeatureGrid grid{0, 300e-9, 5e-9, 30, 1};
  const auto fv = estimate_features_sparse(s, sched, cfg, grid);
  const auto atom = fv.strongest();
  ASSERT_TRUE(atom);
  const auto [mt, mf] = matched_filter(cfg, sched, s, grid.delays(), grid.dopplers());
  EXPECT_LE(std::abs(atom->delay - mt), grid.delay_step + 1e-12);
  EXPECT_LE(std::abs(atom->delay - 100e-9), grid.delay_step + 1e-12);
  EXPECT_LE(std::abs(atom->doppler - 10.0), grid.doppler_step + 1e-12);

  // the uniform-time spectrum of the same packets puts little energy near 10 Hz
  const auto naive = sched.naive_uniform();
  ComplexVector x;
  for (const auto& c : s) x.push_back(c.at(0, 0, 10));
  const auto sg = stft(SampleBuffer(x, 1.0 / naive.mean_interval()), 32, 8);
  EXPECT_LT(sg.energy_fraction(8.0, 12.0), 0.5);
}

TEST(SparseFeatures, TwoPathsRecovered) {
  RadioConfig cfg;
  const auto sched = streaming_schedule(0.3, 12);
  const auto s = make_series(cfg, sched, {{100e-9, 5.0}, {300e-9, -3.0, {0.7, 0.0}}}, db_to_linear(-20.0), 5);
  const FeatureGrid grid{0, 400e-9, 5e-9, 10, 1};
  const auto fv = estimate_features_sparse(s, sched, cfg, grid);
  const auto peaks = fv.peaks(2);
  ASSERT_EQ(peaks.size(), 2u);
  bool near100 = false, near300 = false;
  for (const auto& p : peaks) {
    near100 |= std::abs(p.delay - 100e-9) <= 5e-9 + 1e-12;
    near300 |= std::abs(p.delay - 300e-9) <= 5e-9 + 1e-12;
  }
  EXPECT_TRUE(near100);
  EXPECT_TRUE(near300);
}

TEST(SparseFeatures, EmptySeriesThrows) {
  RadioConfig cfg;
  const std::vector<CsiMatrix> none;
  EXPECT_THROW(estimate_features_sparse(none, TxSchedule{}, cfg), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// IFFT ranging

TEST(RangeIfft, PathAt15mWithinHalfBin) {
  RadioConfig cfg;
  const auto s = make_series(cfg, TxSchedule::regular(10, 1), {{range_to_delay(15.0), 0.0}});
  EXPECT_NEAR(range_ifft(s.front(), cfg), 15.0, 3.75);
}

TEST(RangeIfft, FlatCsiIsZero) {
  RadioConfig cfg;
  CsiMatrix c(1, 1, cfg.num_subcarriers());
  for (auto& v : c.values) v = 1.0;
  EXPECT_DOUBLE_EQ(range_ifft(c, cfg), 0.0);
}

TEST(RangeIfft, TwoPathsAtMatchingBins) {
  RadioConfig cfg;
  const auto s = make_series(cfg, TxSchedule::regular(10, 1), {{range_to_delay(15.0), 0.0}, {range_to_delay(45.0), 0.0, 0.6}});
  auto peaks = range_ifft_peaks(s, cfg, 2);
  ASSERT_EQ(peaks.size(), 2u);
  std::sort(peaks.begin(), peaks.end());
  const double bin = kSpeedOfLight / (2.0 * cfg.sample_rate);
  EXPECT_NEAR(peaks[0], 2 * bin, 1e-9);
  EXPECT_NEAR(peaks[1], 6 * bin, 1e-9);
}

// ---------------------------------------------------------------------------
// MUSIC

TEST(RangeMusic, SinglePathAt15m) {
  RadioConfig cfg;
  const auto s = make_series(cfg, TxSchedule::regular(50, 10), {{range_to_delay(15.0), 0.0}}, db_to_linear(-20.0), 6);
  const auto grid = axis(0, 40, 0.05);
  const auto r = range_music(s, 1, cfg, grid);
  ASSERT_EQ(r.estimates.size(), 1u);
  EXPECT_NEAR(r.estimates[0], 15.0, 1.5);
  // the reported peak is the grid maximum of the returned pseudospectrum
  const auto it = std::max_element(r.spectrum.begin(), r.spectrum.end());
  EXPECT_DOUBLE_EQ(r.estimates[0], grid[static_cast<std::size_t>(it - r.spectrum.begin())]);
}

TEST(RangeMusic, ZeroPathsThrows) {
  RadioConfig cfg;
  const auto s = make_series(cfg, TxSchedule::regular(10, 1), {{50e-9, 0.0}});
  EXPECT_THROW(range_music(s, 0, cfg, axis(0, 10, 1)), std::invalid_argument);
}

TEST(RangeMusic, TwoPathsWithinOneGridStep) {
  RadioConfig cfg;
  const auto s = make_series(cfg, TxSchedule::regular(50, 5),
                             {{range_to_delay(15.0), 0.0}, {range_to_delay(45.0), 0.0, {0.0, 0.8}}}, 1e-8, 7);
  const double step = 0.25;
  auto r = range_music(s, 2, cfg, axis(0, 60, step));
  ASSERT_EQ(r.estimates.size(), 2u);
  std::sort(r.estimates.begin(), r.estimates.end());
  EXPECT_NEAR(r.estimates[0], 15.0, step);
  EXPECT_NEAR(r.estimates[1], 45.0, step);
}

TEST(AoaMusic, BroadsideSource) {
  AntennaArray arr;
  NoiseSource rng(1);
  std::vector<ComplexVector> snaps;
  for (int i = 0; i < 200; ++i) {
    const Complex s = rng.sample(1.0);
    ComplexVector v = arr.steering(0.0);
    for (auto& e : v) e = e * s + rng.sample(0.01);
    snaps.push_back(v);
  }
  const auto r = aoa_music(snaps, arr, 1, axis(-90, 90, 0.1));
  EXPECT_NEAR(r.estimates.at(0), 0.0, 1.0);
}

TEST(AoaMusic, SourceAt30MatchesSteeringSearch) {
  AntennaArray arr;
  NoiseSource rng(2);
  std::vector<ComplexVector> snaps;
  for (int i = 0; i < 200; ++i) {
    const Complex s = rng.sample(1.0);
    ComplexVector v = arr.steering(30.0);
    for (auto& e : v) e = e * s + rng.sample(0.01);
    snaps.push_back(v);
  }
  const auto grid = axis(-90, 90, 0.1);
  const auto r = aoa_music(snaps, arr, 1, grid);
  EXPECT_NEAR(r.estimates.at(0), 30.0, 2.0);
  // beamformer oracle
  double best = -1.0, ang = 0.0;
  for (double g : grid) {
    double p = 0.0;
    for (const auto& v : snaps) {
      Complex acc{};
      for (std::size_t m = 0; m < 3; ++m) acc += std::conj(std::polar(1.0, kPi * m * std::sin(deg2rad(g)))) * v[m];
      p += std::norm(acc);
    }
    if (p > best) best = p, ang = g;
  }
  EXPECT_NEAR(r.estimates.at(0), ang, 2.0);
}

TEST(AoaMusic, TwoSourcesAtPlusMinus40) {
  AntennaArray arr;
  NoiseSource rng(3);
  std::vector<ComplexVector> snaps;
  const auto a1 = arr.steering(40.0), a2 = arr.steering(-40.0);
  for (int i = 0; i < 400; ++i) {
    const Complex s1 = rng.sample(1.0), s2 = rng.sample(1.0);
    ComplexVector v(3);
    for (std::size_t m = 0; m < 3; ++m) v[m] = a1[m] * s1 + a2[m] * s2 + rng.sample(0.01);
    snaps.push_back(v);
  }
  auto r = aoa_music(snaps, arr, 2, axis(-90, 90, 0.1));
  ASSERT_EQ(r.estimates.size(), 2u);
  std::sort(r.estimates.begin(), r.estimates.end());
  EXPECT_NEAR(r.estimates[0], -40.0, 3.0);
  EXPECT_NEAR(r.estimates[1], 40.0, 3.0);
}

TEST(AoaMusic, TooManySourcesThrows) {
  AntennaArray arr;
  std::vector<ComplexVector> snaps{arr.steering(0.0)};
  EXPECT_THROW(aoa_music(snaps, arr, 3, axis(-90, 90, 1)), std::invalid_argument);
  EXPECT_THROW(aoa_music(snaps, arr, 0, axis(-90, 90, 1)), std::invalid_argument);
}

TEST(MdlOrder, CountsDominantEigenvalues) {
  const std::vector<double> eig{10.0, 5.0, 0.011, 0.010, 0.009, 0.010};
  EXPECT_EQ(mdl_order(eig, 200), 2u);
}

// ---------------------------------------------------------------------------
// Velocity

TEST(VelocityFft, OneMeterPerSecondAt40Hz) {
  RadioConfig cfg;
  const double fd = 2.0 * 1.0 / cfg.wavelength();
  EXPECT_NEAR(fd, 16.0, 0.05);
  const auto sched = TxSchedule::regular(40.0, 80);
  const auto s = make_series(cfg, sched, {{30e-9, fd}}, db_to_linear(-15.0), 8);
  EXPECT_NEAR(velocity_fft(s, sched, cfg), 1.0, 0.05);
}

TEST(VelocityFft, StaticSceneIsZero) {
  RadioConfig cfg;
  const auto sched = TxSchedule::regular(40.0, 40);
  const auto s = make_series(cfg, sched, {{50e-9, 0.0}});
  EXPECT_NEAR(velocity_fft(s, sched, cfg), 0.0, 1e-6);
}

TEST(VelocityFft, NonUniformScheduleThrows) {
  RadioConfig cfg;
  const auto sched = streaming_schedule(0.2, 2);
  const auto s = make_series(cfg, sched, {{50e-9, 0.0}});
  EXPECT_THROW(velocity_fft(s, sched, cfg), std::invalid_argument);
}

TEST(VelocityFft, FastTargetAliasesBelowNyquist) {
  RadioConfig cfg;
  const double fd = 2.0 * 3.5 / cfg.wavelength();
  EXPECT_NEAR(fd, 56.0, 0.1);
  const auto slow = TxSchedule::regular(40.0, 80);
  const auto fast = TxSchedule::regular(150.0, 300);
  const double aliased = doppler_to_velocity(fd - 40.0, cfg);
  EXPECT_NEAR(velocity_fft(make_series(cfg, slow, {{30e-9, fd}}), slow, cfg), aliased, 0.05);
  EXPECT_NEAR(velocity_fft(make_series(cfg, fast, {{30e-9, fd}}), fast, cfg), 3.5, 0.05);
}

TEST(VelocitySparse, GamingScheduleBeatsNaiveFft) {
  RadioConfig cfg;
  const double fd = 2.0 / cfg.wavelength();
  const FeatureGrid grid{0, 150e-9, 10e-9, 30, 0.5};
  std::vector<double> naive_err;
  for (std::uint64_t seed = 21; seed < 26; ++seed) {
    const auto sched = generate_traffic(TrafficModel::gaming(seed), 1.0);
    const auto s = make_series(cfg, sched, {{40e-9, fd}}, db_to_linear(-15.0), seed);
    const double v = velocity_sparse(s, sched, cfg, grid);
    EXPECT_NEAR(v, 1.0, 0.1);

    // nonuniform DFT peak oracle over the same Doppler grid
    double best = -1.0, fo = 0.0;
    for (double f : grid.dopplers()) {
      double p = 0.0;
      for (std::size_t k = 0; k < cfg.num_subcarriers(); ++k) {
        Complex acc{};
        for (std::size_t l = 0; l < s.size(); ++l)
          acc += s[l].at(0, 0, k) * std::polar(1.0, -kTwoPi * f * (sched.times[l] - sched.times.front()));
        p += std::norm(acc);
      }
      if (p > best) best = p, fo = f;
    }
    EXPECT_NEAR(v, doppler_to_velocity(fo, cfg), 0.1);
    naive_err.push_back(std::abs(velocity_fft(s, sched.naive_uniform(), cfg) - 1.0));
  }
  std::sort(naive_err.begin(), naive_err.end());
  EXPECT_GT(naive_err[naive_err.size() / 2], 0.3);
}

TEST(VelocitySparse, StaticIsZero) {
  RadioConfig cfg;
  const auto sched = generate_traffic(TrafficModel::gaming(22), 0.5);
  const auto s = make_series(cfg, sched, {{40e-9, 0.0}}, db_to_linear(-15.0), 10);
  EXPECT_NEAR(velocity_sparse(s, sched, cfg, FeatureGrid{0, 150e-9, 10e-9, 30, 0.5}), 0.0, 0.05);
}

TEST(VelocitySparse, TooFewPacketsThrows) {
  RadioConfig cfg;
  const auto sched = TxSchedule::regular(40, 5);
  EXPECT_THROW(velocity_sparse(make_series(cfg, sched, {{40e-9, 0.0}}), sched, cfg), std::invalid_argument);
}

TEST(VelocitySparse, SweepMedianError) {
  RadioConfig cfg;
  NoiseSource rng(77);
  std::vector<double> err;
  const FeatureGrid grid{0, 100e-9, 10e-9, 64, 0.5};
  for (int trial = 0; trial < 12; ++trial) {
    const double v = rng.uniform(0.6, 3.5) * (trial % 2 ? -1.0 : 1.0);
    const auto sched = generate_traffic(TrafficModel::gaming(100 + trial), 1.0);
    const auto s = make_series(cfg, sched, {{rng.uniform(20e-9, 80e-9), 2.0 * v / cfg.wavelength()}},
                               db_to_linear(-15.0), 200 + trial);
    err.push_back(std::abs(velocity_sparse(s, sched, cfg, grid) - v));
  }
  std::sort(err.begin(), err.end());
  EXPECT_LE(err[err.size() / 2], 0.2);
}

TEST(Velocity, InvariantToGlobalPhase) {
  RadioConfig cfg;
  const auto reg = TxSchedule::regular(40.0, 40);
  const auto irr = generate_traffic(TrafficModel::gaming(5), 0.5);
  // below half the regular rate so the grid holds no alias of the target
  const FeatureGrid grid{0, 100e-9, 10e-9, 19, 0.5};
  for (const auto* sched : {&reg, &irr}) {
    auto s = make_series(cfg, *sched, {{30e-9, 12.0}}, db_to_linear(-15.0), 11);
    const double a = velocity_sparse(s, *sched, cfg, grid);
    const double b = sched == &reg ? velocity_fft(s, *sched, cfg) : 0.0;
    for (auto& c : s)
      for (auto& v : c.values) v *= std::polar(1.0, 1.234);
    EXPECT_NEAR(velocity_sparse(s, *sched, cfg, grid), a, 1e-9);
    if (sched == &reg) EXPECT_NEAR(velocity_fft(s, *sched, cfg), b, 1e-9);
  }
}

// ---------------------------------------------------------------------------
// Sparse spectrogram

TEST(SparseSpectrogram, ConcentratesIrregularSamplesInBand) {
  const auto sched = streaming_schedule(3.0, 6);
  NoiseSource rng(12);
  ComplexVector x;
  for (double t : sched.times) x.push_back(std::polar(1.0, kTwoPi * 12.0 * t) + rng.sample(0.03));
  const auto f = axis(-60, 60, 0.5);
  LassoOptions o;
  o.max_iter = 300;
  o.abs_tol = 1e-6;
  o.rel_tol = 1e-4;
  const auto sp = sparse_spectrogram(sched.times, x, 64, 32, f, o);
  EXPECT_GE(sp.energy_fraction(9, 15), 0.8);
  const auto naive = stft(SampleBuffer(x, 1.0 / sched.mean_interval()), 64, 32);
  EXPECT_LT(naive.energy_fraction(9, 15), 0.5);
  EXPECT_THROW(sparse_spectrogram(sched.times, x, 1, 1, f), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Localization and export

TEST(Localize, PolarToCartesian) {
  Pose origin;
  auto p = localize_single(SensingEstimate::from_tof_aoa(range_to_delay(5.0), 0.0), origin);
  EXPECT_NEAR(p.x(), 5.0, 1e-9);
  EXPECT_NEAR(p.y(), 0.0, 1e-9);
  p = localize_single(SensingEstimate::from_tof_aoa(range_to_delay(5.0), 30.0), origin);
  EXPECT_NEAR(p.x(), 4.330, 1e-3);
  EXPECT_NEAR(p.y(), 2.5, 1e-9);
}

TEST(Localize, DevicePoseMapsToWorld) {
  Pose pose;
  pose.position = Vec3(1.0, 2.0, 0.0);
  pose.heading_deg = 90.0;
  const auto p = localize_single(SensingEstimate::from_tof_aoa(range_to_delay(3.0), 0.0), pose);
  EXPECT_NEAR(p.x(), 1.0, 1e-9);
  EXPECT_NEAR(p.y(), 5.0, 1e-9);
}

TEST(Localize, MissingInputsThrow) {
  SensingEstimate e;
  e.aoa = 10.0;
  EXPECT_THROW(localize_single(e, Pose{}), std::invalid_argument);
  SensingEstimate f;
  f.range = 3.0;
  EXPECT_THROW(localize_single(f, Pose{}), std::invalid_argument);
  auto g = SensingEstimate::from_tof_aoa(1e-8, 95.0);
  EXPECT_THROW(localize_single(g, Pose{}), std::invalid_argument);
}

TEST(Localize, MonteCarloMatchesFirstOrderPropagation) {
  const double r = 6.0, th = 20.0, sr = 0.3, sth = 3.0;
  std::mt19937_64 eng(5);
  std::normal_distribution<double> n01;
  double acc = 0.0;
  const int trials = 20000;
  const auto truth = localize_single(SensingEstimate::from_tof_aoa(range_to_delay(r), th), Pose{});
  for (int i = 0; i < trials; ++i) {
    SensingEstimate e;
    e.range = r + sr * n01(eng);
    e.aoa = th + sth * n01(eng);
    acc += (localize_single(e, Pose{}) - truth).squaredNorm();
  }
  const double mc = std::sqrt(acc / trials);
  const double lin = std::sqrt(sr * sr + std::pow(r * deg2rad(sth), 2));
  EXPECT_NEAR(mc, lin, 0.2 * lin);
}

TEST(EstimateCsv, HeaderAndRows) {
  std::vector<EstimateRecord> rows{{0, 5.0, 5.2, "sparse", 15.0, "streaming"}, {1, 7.5, 9.0, "ifft", 15.0, "regular"}};
  std::ostringstream os;
  write_estimates_csv(os, rows);
  EXPECT_EQ(os.str(),
            "trial,truth_range_m,est_range_m,method,snr_db,schedule_kind\n"
            "0,5,5.2,sparse,15,streaming\n1,7.5,9,ifft,15,regular\n");
}
