#pragma once

// Channel-feature estimation: ADMM lasso, sparse delay-Doppler recovery over
// irregular packet times, IFFT and MUSIC ranging, MUSIC AoA, FFT and sparse
// velocity, and single-device localization.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "isacfi/channel.hpp"
#include "isacfi/ofdm.hpp"
#include "isacfi/schedule.hpp"
#include "isacfi/signal.hpp"

namespace isacfi {

// ---------------------------------------------------------------------------
// Lasso by ADMM

using LinearOperator = std::function<ComplexVector(std::span<const Complex>)>;

struct LassoOptions {
  double lambda = 0.0;           // <= 0: lambda_fraction * ||A^H y||_inf
  double lambda_fraction = 0.1;
  double rho = 0.0;              // <= 0: mean column energy of A
  std::size_t max_iter = 2000;
  double abs_tol = 1e-9;         // relative to ||A^H y||_inf / rho
  double rel_tol = 1e-7;
  bool record_objective = false;
};

struct LassoResult {
  ComplexVector x;
  double lambda = 0.0;
  double rho = 0.0;
  double objective = 0.0;
  std::size_t iterations = 0;
  bool converged = false;  // false means max_iter was hit
  std::vector<double> history;
};

inline Complex soft_threshold(Complex v, double k) {
  const double a = std::abs(v);
  return a <= k ? Complex{} : v * (1.0 - k / a);
}

/// 0.5 ||y - Ax||^2 + lambda ||x||_1, with Ax supplied.
inline double lasso_objective(std::span<const Complex> y, std::span<const Complex> ax, std::span<const Complex> x,
                              double lambda) {
  double r = 0.0, l1 = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) r += std::norm(y[i] - ax[i]);
  for (const auto& v : x) l1 += std::abs(v);
  return 0.5 * r + lambda * l1;
}

namespace detail {

inline double norm2(std::span<const Complex> v) { return std::sqrt(energy(v)); }

inline double inf_norm(std::span<const Complex> v) {
  double m = 0.0;
  for (const auto& x : v) m = std::max(m, std::abs(x));
  return m;
}

// `solve(b, x)` overwrites x with (A^H A + rho I)^{-1} b.
template <class Solve>
LassoResult admm_loop(Solve&& solve, const LinearOperator& apply_a, std::span<const Complex> y,
                      const ComplexVector& aty, double lambda, double rho, const LassoOptions& opts) {
  const std::size_t n = aty.size();
  LassoResult res;
  res.lambda = lambda;
  res.rho = rho;
  ComplexVector x(n), z(n), u(n), b(n), z_old(n);
  const double kappa = lambda / rho;
  // absolute tolerance in units of a typical coefficient, ||A^H y||_inf / rho
  const double sqrt_n = std::sqrt(static_cast<double>(n)) * inf_norm(aty) / rho;
  for (std::size_t it = 1; it <= opts.max_iter; ++it) {
    for (std::size_t i = 0; i < n; ++i) b[i] = aty[i] + rho * (z[i] - u[i]);
    solve(b, x);
    z_old = z;
    double r2 = 0.0, s2 = 0.0, xn = 0.0, zn = 0.0, un = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      z[i] = soft_threshold(x[i] + u[i], kappa);
      u[i] += x[i] - z[i];
      r2 += std::norm(x[i] - z[i]);
      s2 += std::norm(z[i] - z_old[i]);
      xn += std::norm(x[i]);
      zn += std::norm(z[i]);
      un += std::norm(u[i]);
    }
    res.iterations = it;
    if (opts.record_objective) res.history.push_back(lasso_objective(y, apply_a(z), z, lambda));
    const double eps_pri = sqrt_n * opts.abs_tol + opts.rel_tol * std::sqrt(std::max(xn, zn));
    const double eps_dual = sqrt_n * opts.abs_tol + opts.rel_tol * rho * std::sqrt(un);
    if (std::sqrt(r2) <= eps_pri && rho * std::sqrt(s2) <= eps_dual) {
      res.converged = true;
      break;
    }
  }
  res.x = std::move(z);
  res.objective = lasso_objective(y, apply_a(res.x), res.x, lambda);
  return res;
}

inline bool resolve_lambda(const ComplexVector& aty, const LassoOptions& opts, double column_energy, double& lambda,
                           double& rho) {
  lambda = opts.lambda > 0.0 ? opts.lambda : opts.lambda_fraction * inf_norm(aty);
  if (!(lambda > 0.0)) return false;
  rho = opts.rho > 0.0 ? opts.rho : std::max(column_energy, 1e-300);
  return true;
}

inline LassoResult zero_result(std::size_t n, std::span<const Complex> y) {
  LassoResult r;
  r.x.assign(n, Complex{});
  r.converged = true;
  r.objective = 0.5 * energy(y);
  return r;
}

inline Eigen::Map<const Eigen::VectorXcd> as_eigen(std::span<const Complex> v) {
  return {v.data(), static_cast<Eigen::Index>(v.size())};
}

}  // namespace detail

/// Penalized lasso 0.5 ||y - A x||^2 + lambda ||x||_1 for a matrix-free
/// operator; the x-update is solved by conjugate gradients.
inline LassoResult admm_lasso(const LinearOperator& apply_a, const LinearOperator& apply_ah, std::size_t n,
                              std::span<const Complex> y, const LassoOptions& opts = {}) {
  if (n == 0 || y.empty()) throw std::invalid_argument("admm_lasso: empty problem");
  const ComplexVector aty = apply_ah(y);
  if (aty.size() != n) throw std::invalid_argument("admm_lasso: adjoint output does not match n");
  if (apply_a(aty).size() != y.size()) throw std::invalid_argument("admm_lasso: operator output does not match y");
  // column energy estimated from the Rayleigh quotient at A^H y
  double scale = 1.0;
  if (const double e = energy(aty); e > 0.0) scale = energy(apply_a(aty)) / e;
  double lambda = 0.0, rho = 0.0;
  if (!detail::resolve_lambda(aty, opts, scale, lambda, rho)) return detail::zero_result(n, y);

  auto normal = [&](std::span<const Complex> v) {
    ComplexVector out = apply_ah(apply_a(v));
    for (std::size_t i = 0; i < n; ++i) out[i] += rho * v[i];
    return out;
  };
  auto solve = [&](const ComplexVector& b, ComplexVector& x) {
    // CG on the Hermitian positive-definite system, warm-started at x
    ComplexVector r = normal(x);
    for (std::size_t i = 0; i < n; ++i) r[i] = b[i] - r[i];
    ComplexVector p = r;
    double rs = energy(r);
    const double stop = 1e-24 * std::max(energy(b), 1e-300);
    for (std::size_t k = 0; k < 4 * n && rs > stop; ++k) {
      const ComplexVector ap = normal(p);
      Complex pap{};
      for (std::size_t i = 0; i < n; ++i) pap += std::conj(p[i]) * ap[i];
      const double alpha = rs / pap.real();
      for (std::size_t i = 0; i < n; ++i) {
        x[i] += alpha * p[i];
        r[i] -= alpha * ap[i];
      }
      const double rs_new = energy(r);
      for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + (rs_new / rs) * p[i];
      rs = rs_new;
    }
  };
  return detail::admm_loop(solve, apply_a, y, aty, lambda, rho, opts);
}

/// Dense operator; the x-update uses a cached Cholesky factor (Woodbury form
/// in measurement space when A is wide).
inline LassoResult admm_lasso(const Eigen::MatrixXcd& a, std::span<const Complex> y, const LassoOptions& opts = {}) {
  if (a.rows() != static_cast<Eigen::Index>(y.size()))
    throw std::invalid_argument("admm_lasso: operator rows do not match y");
  if (a.cols() == 0 || y.empty()) throw std::invalid_argument("admm_lasso: empty problem");
  const auto n = static_cast<std::size_t>(a.cols());
  const Eigen::VectorXcd aty_e = a.adjoint() * detail::as_eigen(y);
  const ComplexVector aty(aty_e.data(), aty_e.data() + aty_e.size());
  double lambda = 0.0, rho = 0.0;
  if (!detail::resolve_lambda(aty, opts, a.squaredNorm() / static_cast<double>(n), lambda, rho))
    return detail::zero_result(n, y);

  LinearOperator apply_a = [&a](std::span<const Complex> v) {
    const Eigen::VectorXcd r = a * detail::as_eigen(v);
    return ComplexVector(r.data(), r.data() + r.size());
  };
  const bool wide = a.rows() < a.cols();
  Eigen::LLT<Eigen::MatrixXcd> llt;
  if (wide) {
    Eigen::MatrixXcd m = a * a.adjoint();
    m.diagonal().array() += rho;
    llt.compute(m);
  } else {
    Eigen::MatrixXcd m = a.adjoint() * a;
    m.diagonal().array() += rho;
    llt.compute(m);
  }
  auto solve = [&](const ComplexVector& b, ComplexVector& x) {
    const auto be = detail::as_eigen(b);
    Eigen::VectorXcd xe;
    if (wide) xe = (be - a.adjoint() * llt.solve(a * be)) / rho;
    else xe = llt.solve(be);
    std::copy(xe.data(), xe.data() + xe.size(), x.begin());
  };
  return detail::admm_loop(solve, apply_a, y, aty, lambda, rho, opts);
}

// ---------------------------------------------------------------------------
// Sparse delay-Doppler features

/// Candidate delays and Doppler frequencies.
struct FeatureGrid {
  double delay_min = 0.0;
  double delay_max = 500e-9;
  double delay_step = 5e-9;
  double doppler_max = 60.0;
  double doppler_step = 0.25;

  std::vector<double> delays() const { return axis(delay_min, delay_max, delay_step); }
  std::vector<double> dopplers() const { return axis(-doppler_max, doppler_max, doppler_step); }

  static std::vector<double> axis(double lo, double hi, double step) {
    if (!(step > 0.0) || hi < lo) throw std::invalid_argument("FeatureGrid: bad axis");
    std::vector<double> v;
    const auto count = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
    for (std::size_t i = 0; i < count; ++i) v.push_back(lo + static_cast<double>(i) * step);
    return v;
  }
};

struct Atom {
  double delay = 0.0;    // s, sub-grid refined
  double doppler = 0.0;  // Hz, sub-grid refined
  Complex coefficient{};
  std::size_t delay_index = 0;
  std::size_t doppler_index = 0;
};

/// Sparse coefficients Gamma over the delay x Doppler grid.
struct FeatureVector {
  std::vector<double> delays;
  std::vector<double> dopplers;
  Eigen::MatrixXcd coefficients;  // delays x dopplers
  LassoResult solver;

  std::size_t nonzeros() const {
    std::size_t c = 0;
    for (Eigen::Index i = 0; i < coefficients.size(); ++i) c += coefficients.data()[i] != Complex{} ? 1 : 0;
    return c;
  }

  /// Strongest atom; with `min_doppler` > 0 only atoms with |f_D| >= min_doppler
  /// qualify (static clutter rejection). Empty if nothing qualifies.
  std::optional<Atom> strongest(double min_doppler = 0.0) const {
    double best = 0.0;
    Eigen::Index bi = -1, bj = -1;
    for (Eigen::Index j = 0; j < coefficients.cols(); ++j) {
      if (std::abs(dopplers[static_cast<std::size_t>(j)]) < min_doppler - 1e-12) continue;
      for (Eigen::Index i = 0; i < coefficients.rows(); ++i) {
        const double m = std::abs(coefficients(i, j));
        if (m > best) {
          best = m;
          bi = i;
          bj = j;
        }
      }
    }
    if (bi < 0) return std::nullopt;
    return refine(bi, bj);
  }

  /// Up to `count` local maxima (3x3 neighbourhood), strongest first.
  std::vector<Atom> peaks(std::size_t count) const {
    std::vector<std::pair<double, std::pair<Eigen::Index, Eigen::Index>>> cand;
    const Eigen::Index r = coefficients.rows(), c = coefficients.cols();
    for (Eigen::Index i = 0; i < r; ++i)
      for (Eigen::Index j = 0; j < c; ++j) {
        const double m = std::abs(coefficients(i, j));
        if (m == 0.0) continue;
        bool is_max = true;
        for (Eigen::Index di = -1; di <= 1 && is_max; ++di)
          for (Eigen::Index dj = -1; dj <= 1 && is_max; ++dj) {
            const Eigen::Index a = i + di, b = j + dj;
            if ((di || dj) && a >= 0 && a < r && b >= 0 && b < c && std::abs(coefficients(a, b)) > m) is_max = false;
          }
        if (is_max) cand.push_back({m, {i, j}});
      }
    std::sort(cand.begin(), cand.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
    std::vector<Atom> out;
    for (std::size_t k = 0; k < std::min(count, cand.size()); ++k)
      out.push_back(refine(cand[k].second.first, cand[k].second.second));
    return out;
  }

 private:
  // magnitude-weighted centroid over the immediate neighbours
  Atom refine(Eigen::Index i, Eigen::Index j) const {
    Atom a;
    a.delay_index = static_cast<std::size_t>(i);
    a.doppler_index = static_cast<std::size_t>(j);
    a.coefficient = coefficients(i, j);
    double w = 0.0, sd = 0.0, sf = 0.0;
    for (Eigen::Index di = -1; di <= 1; ++di)
      for (Eigen::Index dj = -1; dj <= 1; ++dj) {
        const Eigen::Index p = i + di, q = j + dj;
        if (p < 0 || q < 0 || p >= coefficients.rows() || q >= coefficients.cols()) continue;
        const double m = std::abs(coefficients(p, q));
        w += m;
        sd += m * delays[static_cast<std::size_t>(p)];
        sf += m * dopplers[static_cast<std::size_t>(q)];
      }
    a.delay = sd / w;
    a.doppler = sf / w;
    return a;
  }
};

/// Y = D Gamma E^T with D[k, i] = exp(-j 2 pi (f_c + k df) tau_i) and
/// E[l, j] = exp(j 2 pi f_j (T_l - T_0)). The x-update of ADMM is solved in
/// closed form from the eigenpairs of D^H D and E^H E.
class SeparableOperator {
 public:
  SeparableOperator(Eigen::MatrixXcd d, Eigen::MatrixXcd e) : d_(std::move(d)), e_(std::move(e)) {
    thin_gram(d_, ud_, ld_);
    thin_gram(e_, ue_, le_);
  }

  Eigen::Index rows() const { return d_.rows() * e_.rows(); }
  double column_energy() const {
    return d_.squaredNorm() / static_cast<double>(d_.cols()) * e_.squaredNorm() / static_cast<double>(e_.cols());
  }
  Eigen::Index cols() const { return d_.cols() * e_.cols(); }

  ComplexVector apply(std::span<const Complex> g) const {
    const Eigen::Map<const Eigen::MatrixXcd> gm(g.data(), d_.cols(), e_.cols());
    const Eigen::MatrixXcd y = d_ * gm * e_.transpose();
    return ComplexVector(y.data(), y.data() + y.size());
  }

  ComplexVector adjoint(std::span<const Complex> y) const {
    const Eigen::Map<const Eigen::MatrixXcd> ym(y.data(), d_.rows(), e_.rows());
    const Eigen::MatrixXcd g = d_.adjoint() * ym * e_.conjugate();
    return ComplexVector(g.data(), g.data() + g.size());
  }

  /// x = (A^H A + rho I)^{-1} b
  void solve(const ComplexVector& b, ComplexVector& x, double rho) const {
    const Eigen::Map<const Eigen::MatrixXcd> bm(b.data(), d_.cols(), e_.cols());
    Eigen::MatrixXcd p = ud_.adjoint() * bm * ue_.conjugate();
    for (Eigen::Index i = 0; i < p.rows(); ++i)
      for (Eigen::Index j = 0; j < p.cols(); ++j) p(i, j) *= 1.0 / (ld_(i) * le_(j) + rho) - 1.0 / rho;
    const Eigen::MatrixXcd out = bm / rho + ud_ * p * ue_.transpose();
    std::copy(out.data(), out.data() + out.size(), x.begin());
  }

 private:
  // Non-negligible eigenpairs of M^H M, via the smaller Gram matrix.
  static void thin_gram(const Eigen::MatrixXcd& m, Eigen::MatrixXcd& u, Eigen::VectorXd& lam) {
    const bool wide = m.rows() < m.cols();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(wide ? Eigen::MatrixXcd(m * m.adjoint())
                                                            : Eigen::MatrixXcd(m.adjoint() * m));
    const Eigen::VectorXd ev = es.eigenvalues();
    const double cut = 1e-12 * std::max(ev.maxCoeff(), 1e-300);
    std::vector<Eigen::Index> keep;
    for (Eigen::Index i = 0; i < ev.size(); ++i)
      if (ev(i) > cut) keep.push_back(i);
    u.resize(m.cols(), static_cast<Eigen::Index>(keep.size()));
    lam.resize(static_cast<Eigen::Index>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) {
      const auto i = keep[k];
      const auto kk = static_cast<Eigen::Index>(k);
      lam(kk) = ev(i);
      if (wide) u.col(kk) = m.adjoint() * es.eigenvectors().col(i) / std::sqrt(ev(i));
      else u.col(kk) = es.eigenvectors().col(i);
    }
  }

  Eigen::MatrixXcd d_, e_, ud_, ue_;
  Eigen::VectorXd ld_, le_;
};

inline Eigen::MatrixXcd delay_atoms(const RadioConfig& cfg, std::span<const double> delays) {
  Eigen::MatrixXcd d(static_cast<Eigen::Index>(cfg.num_subcarriers()), static_cast<Eigen::Index>(delays.size()));
  const double df = cfg.subcarrier_spacing();
  for (std::size_t i = 0; i < delays.size(); ++i) {
    const double carrier = std::fmod(cfg.carrier_freq * delays[i], 1.0);
    for (std::size_t k = 0; k < cfg.num_subcarriers(); ++k)
      d(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(i)) =
          std::polar(1.0, -kTwoPi * (carrier + cfg.used_subcarriers[k] * df * delays[i]));
  }
  return d;
}

inline Eigen::MatrixXcd doppler_atoms(std::span<const double> times, std::span<const double> dopplers) {
  Eigen::MatrixXcd e(static_cast<Eigen::Index>(times.size()), static_cast<Eigen::Index>(dopplers.size()));
  for (std::size_t l = 0; l < times.size(); ++l)
    for (std::size_t j = 0; j < dopplers.size(); ++j)
      e(static_cast<Eigen::Index>(l), static_cast<Eigen::Index>(j)) =
          std::polar(1.0, kTwoPi * dopplers[j] * (times[l] - times.front()));
  return e;
}

namespace detail {

inline void check_series(std::span<const CsiMatrix> series, const TxSchedule& sched, const RadioConfig& cfg) {
  if (series.empty()) throw std::invalid_argument("estimation: empty CSI series");
  if (series.size() != sched.size()) throw std::invalid_argument("estimation: schedule and CSI series differ in length");
  sched.validate();
  for (const auto& c : series)
    if (c.n_sc != cfg.num_subcarriers()) throw std::invalid_argument("estimation: CSI subcarrier count mismatch");
}

}  // namespace detail

/// Solves the lasso over the delay x Doppler grid for one rx/tx pair of a
/// CSI series taken at the schedule's (irregular) transmit times.
inline FeatureVector estimate_features_sparse(std::span<const CsiMatrix> series, const TxSchedule& sched,
                                              const RadioConfig& cfg, const FeatureGrid& grid = {},
                                              const LassoOptions& opts = {}, std::size_t rx = 0, std::size_t tx = 0) {
  detail::check_series(series, sched, cfg);
  FeatureVector fv;
  fv.delays = grid.delays();
  fv.dopplers = grid.dopplers();
  const SeparableOperator op(delay_atoms(cfg, fv.delays), doppler_atoms(sched.times, fv.dopplers));

  const std::size_t k_sc = cfg.num_subcarriers();
  ComplexVector y(k_sc * series.size());
  for (std::size_t l = 0; l < series.size(); ++l) {
    const auto row = series[l].row(rx, tx);
    std::copy(row.begin(), row.end(), y.begin() + static_cast<std::ptrdiff_t>(l * k_sc));
  }
  const ComplexVector aty = op.adjoint(y);
  double lambda = 0.0, rho = 0.0;
  const auto n = static_cast<std::size_t>(op.cols());
  if (!detail::resolve_lambda(aty, opts, op.column_energy(), lambda, rho)) {
    fv.solver = detail::zero_result(n, y);
  } else {
    LinearOperator apply_a = [&op](std::span<const Complex> v) { return op.apply(v); };
    auto solve = [&op, rho](const ComplexVector& b, ComplexVector& x) { op.solve(b, x, rho); };
    fv.solver = detail::admm_loop(solve, apply_a, y, aty, lambda, rho, opts);
  }
  fv.coefficients = Eigen::Map<const Eigen::MatrixXcd>(fv.solver.x.data(), static_cast<Eigen::Index>(fv.delays.size()),
                                                       static_cast<Eigen::Index>(fv.dopplers.size()));
  return fv;
}

/// Monostatic range for a round-trip delay.
inline double delay_to_range(double tau) { return kSpeedOfLight * tau / 2.0; }
inline double range_to_delay(double r) { return 2.0 * r / kSpeedOfLight; }

/// Radial velocity (positive approaching) for a Doppler shift of a monostatic echo.
inline double doppler_to_velocity(double f_d, const RadioConfig& cfg) { return f_d * cfg.wavelength() / 2.0; }

// ---------------------------------------------------------------------------
// IFFT ranging

/// Delay profile |h[n]|^2 of the CSI (averaged over the series), n = 0..N-1.
inline std::vector<double> delay_profile(std::span<const CsiMatrix> series, const RadioConfig& cfg, std::size_t rx = 0,
                                         std::size_t tx = 0) {
  const std::size_t n = cfg.fft_size;
  std::vector<double> p(n, 0.0);
  for (const auto& c : series) {
    ComplexVector spec(n);
    const auto row = c.row(rx, tx);
    for (std::size_t k = 0; k < row.size(); ++k) spec[bin_position(cfg.used_subcarriers[k], n)] = row[k];
    const auto h = ifft(spec);
    for (std::size_t i = 0; i < n; ++i) p[i] += std::norm(h[i]);
  }
  return p;
}

/// Ranges of the `count` strongest local maxima of the IFFT delay profile
/// (causal half only), strongest first. Resolution c / (2 f_s).
inline std::vector<double> range_ifft_peaks(std::span<const CsiMatrix> series, const RadioConfig& cfg,
                                            std::size_t count, std::size_t rx = 0) {
  if (cfg.num_subcarriers() < 2) throw std::invalid_argument("range_ifft: need at least two subcarriers");
  if (series.empty()) throw std::invalid_argument("range_ifft: empty CSI series");
  const auto p = delay_profile(series, cfg, rx);
  const std::size_t half = cfg.fft_size / 2;
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t i = 0; i < half; ++i) {
    const double left = p[(i + p.size() - 1) % p.size()], right = p[i + 1];
    if (p[i] >= left && p[i] >= right && p[i] > 0.0) cand.push_back({p[i], i});
  }
  std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<double> out;
  for (std::size_t i = 0; i < std::min(count, cand.size()); ++i)
    out.push_back(delay_to_range(static_cast<double>(cand[i].second) / cfg.sample_rate));
  if (out.empty()) out.push_back(0.0);
  return out;
}

inline double range_ifft(std::span<const CsiMatrix> series, const RadioConfig& cfg, std::size_t rx = 0) {
  return range_ifft_peaks(series, cfg, 1, rx).front();
}

inline double range_ifft(const CsiMatrix& csi, const RadioConfig& cfg) {
  return range_ifft(std::span<const CsiMatrix>(&csi, 1), cfg);
}

// ---------------------------------------------------------------------------
// MUSIC

struct MusicResult {
  std::vector<double> estimates;  // peak positions on the grid, strongest first
  std::vector<double> grid;
  std::vector<double> spectrum;   // pseudospectrum over the grid
  std::vector<double> eigenvalues;  // covariance eigenvalues, descending
  bool degraded = false;          // signal subspace rank below the model order
};

/// Minimum description length model order from descending covariance
/// eigenvalues estimated with `snapshots` snapshots.
inline std::size_t mdl_order(std::span<const double> eig_desc, std::size_t snapshots) {
  const std::size_t m = eig_desc.size();
  double best = std::numeric_limits<double>::infinity();
  std::size_t order = 0;
  for (std::size_t k = 0; k < m; ++k) {
    double log_geo = 0.0, arith = 0.0;
    for (std::size_t i = k; i < m; ++i) {
      const double v = std::max(eig_desc[i], 1e-300);
      log_geo += std::log(v);
      arith += v;
    }
    const double q = static_cast<double>(m - k);
    log_geo /= q;
    arith /= q;
    const double ll = -static_cast<double>(snapshots) * q * (log_geo - std::log(arith));
    const double pen = 0.5 * static_cast<double>(k) * (2.0 * static_cast<double>(m) - static_cast<double>(k)) *
                       std::log(static_cast<double>(snapshots));
    if (ll + pen < best) {
      best = ll + pen;
      order = k;
    }
  }
  return order;
}

namespace detail {

inline MusicResult music_from_covariance(const Eigen::MatrixXcd& r, std::size_t n_src,
                                         const std::vector<double>& grid,
                                         const std::function<Eigen::VectorXcd(double)>& steering) {
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXcd> es(r);
  const Eigen::Index m = r.rows();
  MusicResult res;
  res.grid = grid;
  const Eigen::VectorXd ev = es.eigenvalues();  // ascending
  for (Eigen::Index i = m - 1; i >= 0; --i) res.eigenvalues.push_back(ev(i));
  const double top = std::max(ev(m - 1), 1e-300);
  std::size_t rank = 0;
  for (Eigen::Index i = 0; i < m; ++i) rank += ev(i) > 1e-10 * top ? 1 : 0;
  res.degraded = rank < n_src;
  const Eigen::MatrixXcd noise = es.eigenvectors().leftCols(m - static_cast<Eigen::Index>(n_src));
  res.spectrum.resize(grid.size());
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const Eigen::VectorXcd a = steering(grid[g]);
    const double d = (noise.adjoint() * a).squaredNorm();
    res.spectrum[g] = 1.0 / std::max(d, 1e-300);
  }
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const bool left = g == 0 || res.spectrum[g] >= res.spectrum[g - 1];
    const bool right = g + 1 == grid.size() || res.spectrum[g] > res.spectrum[g + 1];
    if (left && right) cand.push_back({res.spectrum[g], g});
  }
  std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; i < std::min(n_src, cand.size()); ++i) res.estimates.push_back(grid[cand[i].second]);
  return res;
}

// Runs of consecutive subcarrier indices (the DC hole splits the band).
inline std::vector<std::pair<std::size_t, std::size_t>> contiguous_runs(const std::vector<int>& sc) {
  std::vector<std::pair<std::size_t, std::size_t>> runs;
  std::size_t start = 0;
  for (std::size_t i = 1; i <= sc.size(); ++i)
    if (i == sc.size() || sc[i] != sc[i - 1] + 1) {
      runs.push_back({start, i - start});
      start = i;
    }
  return runs;
}

}  // namespace detail

/// MUSIC over delay with frequency smoothing (sliding subbands of `subband`
/// consecutive subcarriers, forward-backward averaged) across the series.
/// `range_grid` is in meters (monostatic round trip).
inline MusicResult range_music(std::span<const CsiMatrix> series, std::size_t n_paths, const RadioConfig& cfg,
                               const std::vector<double>& range_grid, std::size_t subband = 16, std::size_t rx = 0) {
  if (n_paths == 0) throw std::invalid_argument("range_music: n_paths must be positive");
  if (n_paths >= subband) throw std::invalid_argument("range_music: n_paths must be below the subband length");
  if (series.empty()) throw std::invalid_argument("range_music: empty CSI series");
  const auto m = static_cast<Eigen::Index>(subband);
  Eigen::MatrixXcd r = Eigen::MatrixXcd::Zero(m, m);
  std::size_t snaps = 0;
  const auto runs = detail::contiguous_runs(cfg.used_subcarriers);
  for (const auto& c : series) {
    const auto row = c.row(rx, 0);
    for (const auto& [start, len] : runs)
      for (std::size_t off = 0; off + subband <= len; ++off) {
        Eigen::VectorXcd s(m);
        for (Eigen::Index i = 0; i < m; ++i) s(i) = row[start + off + static_cast<std::size_t>(i)];
        r += s * s.adjoint();
        const Eigen::VectorXcd fb = s.reverse().conjugate();
        r += fb * fb.adjoint();
        snaps += 2;
      }
  }
  if (snaps == 0) throw std::invalid_argument("range_music: no subband fits the subcarrier layout");
  r /= static_cast<double>(snaps);
  const double df = cfg.subcarrier_spacing();
  auto steer = [m, df](double range) {
    Eigen::VectorXcd a(m);
    const double tau = range_to_delay(range);
    for (Eigen::Index i = 0; i < m; ++i) a(i) = std::polar(1.0, -kTwoPi * static_cast<double>(i) * df * tau);
    return a;
  };
  if (snaps < n_paths + 1) {
    auto res = detail::music_from_covariance(r, n_paths, range_grid, steer);
    res.degraded = true;
    return res;
  }
  return detail::music_from_covariance(r, n_paths, range_grid, steer);
}

inline MusicResult range_music(const CsiMatrix& csi, std::size_t n_paths, const RadioConfig& cfg,
                               const std::vector<double>& range_grid, std::size_t subband = 16) {
  return range_music(std::span<const CsiMatrix>(&csi, 1), n_paths, cfg, range_grid, subband);
}

/// Least-squares path powers for given ranges, averaged over the series.
inline std::vector<double> path_powers(std::span<const CsiMatrix> series, const std::vector<double>& ranges,
                                       const RadioConfig& cfg, std::size_t rx = 0) {
  std::vector<double> delays;
  for (double r : ranges) delays.push_back(range_to_delay(r));
  const Eigen::MatrixXcd d = delay_atoms(cfg, delays);
  const auto qr = d.colPivHouseholderQr();
  std::vector<double> p(ranges.size(), 0.0);
  for (const auto& c : series) {
    const auto row = c.row(rx, 0);
    const Eigen::VectorXcd g = qr.solve(detail::as_eigen(row));
    for (std::size_t i = 0; i < p.size(); ++i) p[i] += std::norm(g(static_cast<Eigen::Index>(i)));
  }
  return p;
}

/// MUSIC over the antenna dimension from explicit snapshot vectors.
inline MusicResult aoa_music(const std::vector<ComplexVector>& snapshots, const AntennaArray& array,
                             std::size_t n_sources, const std::vector<double>& grid_deg) {
  if (n_sources == 0 || n_sources >= array.elements)
    throw std::invalid_argument("aoa_music: need 0 < n_sources < antenna count");
  if (snapshots.empty()) throw std::invalid_argument("aoa_music: no snapshots");
  const auto m = static_cast<Eigen::Index>(array.elements);
  Eigen::MatrixXcd r = Eigen::MatrixXcd::Zero(m, m);
  for (const auto& s : snapshots) {
    if (s.size() != array.elements) throw std::invalid_argument("aoa_music: snapshot length differs from array size");
    const auto v = detail::as_eigen(s);
    r += v * v.adjoint();
  }
  r /= static_cast<double>(snapshots.size());
  auto steer = [&array](double deg) {
    const auto a = array.steering(deg);
    return Eigen::VectorXcd(detail::as_eigen(a));
  };
  auto res = detail::music_from_covariance(r, n_sources, grid_deg, steer);
  if (snapshots.size() < n_sources) res.degraded = true;
  return res;
}

/// Snapshots are the antenna vectors of every subcarrier of every packet.
inline MusicResult aoa_music(std::span<const CsiMatrix> series, const AntennaArray& array, std::size_t n_sources,
                             const std::vector<double>& grid_deg, std::size_t tx = 0) {
  std::vector<ComplexVector> snaps;
  for (const auto& c : series) {
    if (c.n_rx != array.elements) throw std::invalid_argument("aoa_music: CSI antenna count differs from array");
    for (std::size_t k = 0; k < c.n_sc; ++k) {
      ComplexVector s(c.n_rx);
      for (std::size_t r = 0; r < c.n_rx; ++r) s[r] = c.at(r, tx, k);
      snaps.push_back(std::move(s));
    }
  }
  return aoa_music(snaps, array, n_sources, grid_deg);
}

/// Antenna snapshots of one delay-Doppler atom: each packet's CSI is
/// projected onto the atom's Doppler, then each subcarrier is de-rotated by
/// the atom's delay. Clutter at other Dopplers is suppressed.
inline std::vector<ComplexVector> atom_snapshots(std::span<const CsiMatrix> series, const TxSchedule& sched,
                                                 const RadioConfig& cfg, const Atom& atom) {
  detail::check_series(series, sched, cfg);
  const std::size_t n_rx = series.front().n_rx;
  const std::size_t n_sc = cfg.num_subcarriers();
  std::vector<ComplexVector> snaps(n_sc, ComplexVector(n_rx));
  for (std::size_t l = 0; l < series.size(); ++l) {
    const Complex w = std::polar(1.0 / static_cast<double>(series.size()),
                                 -kTwoPi * atom.doppler * (sched.times[l] - sched.times.front()));
    for (std::size_t r = 0; r < n_rx; ++r)
      for (std::size_t k = 0; k < n_sc; ++k) snaps[k][r] += w * series[l].at(r, 0, k);
  }
  return snaps;
}

// ---------------------------------------------------------------------------
// Velocity

struct VelocityOptions {
  std::size_t fft_size = 1024;
  std::size_t rx = 0;
};

/// Doppler peak of per-subcarrier FFTs across packets. Requires a uniform
/// schedule; aliases above half the packet rate.
inline double velocity_fft(std::span<const CsiMatrix> series, const TxSchedule& sched, const RadioConfig& cfg,
                           const VelocityOptions& opts = {}) {
  detail::check_series(series, sched, cfg);
  if (!sched.is_uniform(1e-6)) throw std::invalid_argument("velocity_fft: schedule is not uniform");
  if (series.size() < 2) throw std::invalid_argument("velocity_fft: need at least two packets");
  const std::size_t nf = std::max(opts.fft_size, series.size());
  const double rate = 1.0 / sched.mean_interval();
  std::vector<double> power(nf, 0.0);
  for (std::size_t k = 0; k < cfg.num_subcarriers(); ++k) {
    ComplexVector x(nf);  // zero padded
    for (std::size_t l = 0; l < series.size(); ++l) x[l] = series[l].at(opts.rx, 0, k);
    const auto spec = fft(x, nf);
    for (std::size_t i = 0; i < nf; ++i) power[i] += std::norm(spec[i]);
  }
  const auto best = static_cast<std::size_t>(std::max_element(power.begin(), power.end()) - power.begin());
  // parabolic interpolation on the log power
  const double l = std::log(std::max(power[(best + nf - 1) % nf], 1e-300));
  const double c = std::log(std::max(power[best], 1e-300));
  const double r = std::log(std::max(power[(best + 1) % nf], 1e-300));
  const double den = l - 2.0 * c + r;
  const double shift = std::abs(den) > 1e-300 ? std::clamp(0.5 * (l - r) / den, -0.5, 0.5) : 0.0;
  double bin = static_cast<double>(best) + shift;
  if (bin >= static_cast<double>(nf) / 2.0) bin -= static_cast<double>(nf);
  return doppler_to_velocity(bin * rate / static_cast<double>(nf), cfg);
}

/// Doppler of the strongest sparse atom, as radial velocity.
inline double velocity_sparse(std::span<const CsiMatrix> series, const TxSchedule& sched, const RadioConfig& cfg,
                              const FeatureGrid& grid = {}, const LassoOptions& opts = {}) {
  if (series.size() < 8) throw std::invalid_argument("velocity_sparse: need at least 8 packets");
  const auto fv = estimate_features_sparse(series, sched, cfg, grid, opts);
  const auto atom = fv.strongest();
  return atom ? doppler_to_velocity(atom->doppler, cfg) : 0.0;
}

/// Windowed sparse spectrum over irregular samples. Each frame of window_len
/// consecutive samples is fit as a sparse sum of tones on `freqs`; bins hold
/// the squared coefficient magnitudes.
inline Spectrogram sparse_spectrogram(std::span<const double> times, std::span<const Complex> values,
                                      std::size_t window_len, std::size_t hop, std::span<const double> freqs,
                                      const LassoOptions& opts = {}) {
  if (window_len < 2) throw std::invalid_argument("sparse_spectrogram: window_len must be >= 2");
  if (hop < 1) throw std::invalid_argument("sparse_spectrogram: hop must be >= 1");
  if (times.size() != values.size()) throw std::invalid_argument("sparse_spectrogram: times/values length mismatch");
  if (values.size() < window_len) throw std::invalid_argument("sparse_spectrogram: fewer samples than one window");
  if (freqs.empty()) throw std::invalid_argument("sparse_spectrogram: empty frequency grid");
  Spectrogram sg;
  sg.freq_axis.assign(freqs.begin(), freqs.end());
  Eigen::MatrixXcd a(static_cast<Eigen::Index>(window_len), static_cast<Eigen::Index>(freqs.size()));
  for (std::size_t start = 0; start + window_len <= values.size(); start += hop) {
    const double t0 = times[start];
    for (std::size_t i = 0; i < window_len; ++i)
      for (std::size_t f = 0; f < freqs.size(); ++f)
        a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(f)) =
            std::polar(1.0, kTwoPi * freqs[f] * (times[start + i] - t0));
    const auto res = admm_lasso(a, values.subspan(start, window_len), opts);
    std::vector<double> row(freqs.size());
    for (std::size_t f = 0; f < freqs.size(); ++f) row[f] = std::norm(res.x[f]);
    sg.bins.push_back(std::move(row));
    sg.time_axis.push_back(0.5 * (t0 + times[start + window_len - 1]));
  }
  return sg;
}

// ---------------------------------------------------------------------------
// Localization

struct SensingEstimate {
  std::optional<double> tof;    // s, round trip
  std::optional<double> range;  // m
  std::optional<double> aoa;    // deg from boresight
  std::optional<double> velocity;
  double confidence = 1.0;

  static SensingEstimate from_tof_aoa(double tof_s, double aoa_deg, double confidence = 1.0) {
    SensingEstimate e;
    e.tof = tof_s;
    e.range = delay_to_range(tof_s);
    e.aoa = aoa_deg;
    e.confidence = confidence;
    return e;
  }
};

/// World-frame 2D position from a monostatic range and AoA.
inline Eigen::Vector2d localize_single(const SensingEstimate& est, const Pose& pose) {
  if (!est.aoa || !(est.tof || est.range)) throw std::invalid_argument("localize_single: need ToF and AoA");
  if (*est.aoa < -90.0 || *est.aoa > 90.0) throw std::invalid_argument("localize_single: AoA outside [-90, 90]");
  const double range = est.range ? *est.range : delay_to_range(*est.tof);
  const double a = deg2rad(pose.heading_deg + *est.aoa);
  return {pose.position.x() + range * std::cos(a), pose.position.y() + range * std::sin(a)};
}

// ---------------------------------------------------------------------------
// Export

struct EstimateRecord {
  std::size_t trial = 0;
  double truth_range_m = 0.0;
  double est_range_m = 0.0;
  std::string method;
  double snr_db = 0.0;
  std::string schedule_kind;
};

/// CSV columns: trial,truth_range_m,est_range_m,method,snr_db,schedule_kind
inline void write_estimates_csv(std::ostream& os, std::span<const EstimateRecord> rows, bool header = true) {
  if (header) os << "trial,truth_range_m,est_range_m,method,snr_db,schedule_kind\n";
  for (const auto& r : rows)
    os << r.trial << ',' << r.truth_range_m << ',' << r.est_range_m << ',' << r.method << ',' << r.snr_db << ','
       << r.schedule_kind << '\n';
}

}  // namespace isacfi
