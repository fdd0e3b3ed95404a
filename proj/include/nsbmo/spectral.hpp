#pragma once
// Periodic spectral fields on T^2 = [0, 2pi)^2 backed by FFTW.
//
// Coefficients are stored in DFT order per axis, row-major with the first
// index along x1, so f(x) = sum_xi c_xi exp(i xi.x).

#include <fftw3.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstdint>
#include <cstring>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

namespace nsbmo {

using cplx = std::complex<double>;
inline constexpr double kPi = 3.14159265358979323846;

class SpectralError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class T>
struct FftwAllocator {
  using value_type = T;
  FftwAllocator() = default;
  template <class U>
  FftwAllocator(const FftwAllocator<U>&) {}
  T* allocate(std::size_t k) {
    void* p = fftw_malloc(k * sizeof(T));
    if (!p) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) { fftw_free(p); }
  template <class U>
  bool operator==(const FftwAllocator<U>&) const { return true; }
};

using CVec = std::vector<cplx, FftwAllocator<cplx>>;
using RVec = std::vector<double, FftwAllocator<double>>;

namespace fft {

// Plans are made with FFTW_ESTIMATE so that the same input always takes the
// same code path; measured plans can differ between runs in the last bits.
class PlanCache {
 public:
  static PlanCache& get() {
    static PlanCache cache;
    return cache;
  }
  ~PlanCache() {
    for (auto& [k, p] : plans_) fftw_destroy_plan(p);
  }

  fftw_plan c2c(int m, int sign) {
    auto key = std::make_tuple(m, sign, 0);
    auto it = plans_.find(key);
    if (it != plans_.end()) return it->second;
    auto* buf = fftw_alloc_complex(std::size_t(m) * m);
    fftw_plan p = fftw_plan_dft_2d(m, m, buf, buf, sign, FFTW_ESTIMATE);
    fftw_free(buf);
    plans_[key] = p;
    return p;
  }
  fftw_plan r2c(int m) {
    auto key = std::make_tuple(m, 0, 1);
    auto it = plans_.find(key);
    if (it != plans_.end()) return it->second;
    auto* in = fftw_alloc_real(std::size_t(m) * m);
    auto* out = fftw_alloc_complex(std::size_t(m) * (m / 2 + 1));
    fftw_plan p = fftw_plan_dft_r2c_2d(m, m, in, out, FFTW_ESTIMATE);
    fftw_free(in);
    fftw_free(out);
    plans_[key] = p;
    return p;
  }
  fftw_plan c2r(int m) {
    auto key = std::make_tuple(m, 0, 2);
    auto it = plans_.find(key);
    if (it != plans_.end()) return it->second;
    auto* in = fftw_alloc_complex(std::size_t(m) * (m / 2 + 1));
    auto* out = fftw_alloc_real(std::size_t(m) * m);
    fftw_plan p = fftw_plan_dft_c2r_2d(m, m, in, out, FFTW_ESTIMATE);
    fftw_free(in);
    fftw_free(out);
    plans_[key] = p;
    return p;
  }

 private:
  std::map<std::tuple<int, int, int>, fftw_plan> plans_;
};

inline fftw_complex* raw(cplx* p) { return reinterpret_cast<fftw_complex*>(p); }

// Unnormalized in-place transforms of an m x m array.
inline void forward(CVec& a, int m) {
  fftw_execute_dft(PlanCache::get().c2c(m, FFTW_FORWARD), raw(a.data()), raw(a.data()));
}
inline void backward(CVec& a, int m) {
  fftw_execute_dft(PlanCache::get().c2c(m, FFTW_BACKWARD), raw(a.data()), raw(a.data()));
}
// half has m*(m/2+1) entries; c2r overwrites its input, out-of-place r2c
// leaves it intact.
inline void r2c(const RVec& in, CVec& half, int m) {
  fftw_execute_dft_r2c(PlanCache::get().r2c(m), const_cast<double*>(in.data()), raw(half.data()));
}
inline void c2r(CVec& half, RVec& out, int m) {
  fftw_execute_dft_c2r(PlanCache::get().c2r(m), raw(half.data()), out.data());
}

}  // namespace fft

class Grid {
 public:
  Grid() = default;
  explicit Grid(int n) : n_(n) {
    if (n < 16 || (n & (n - 1)) != 0)
      throw SpectralError("grid size must be a power of two >= 16, got " + std::to_string(n));
  }
  int n() const { return n_; }
  std::size_t size() const { return std::size_t(n_) * n_; }
  double h() const { return 2.0 * kPi / n_; }
  // Signed wavenumber of DFT index i; the Nyquist index maps to +n/2.
  int wavenumber(int i) const { return i <= n_ / 2 ? i : i - n_; }
  int index(int k) const { return ((k % n_) + n_) % n_; }
  bool is_nyquist(int i) const { return i == n_ / 2; }
  bool operator==(const Grid& o) const { return n_ == o.n_; }
  bool operator!=(const Grid& o) const { return n_ != o.n_; }

 private:
  int n_ = 0;
};

inline void require_same_grid(const Grid& a, const Grid& b, const char* what) {
  if (a != b)
    throw SpectralError(std::string(what) + ": grid mismatch (" + std::to_string(a.n()) +
                        " vs " + std::to_string(b.n()) + ")");
}

class ScalarField {
 public:
  ScalarField() = default;
  explicit ScalarField(Grid g, bool real = true) : grid_(g), real_(real), c_(g.size(), cplx(0.0)) {}

  static ScalarField from_physical(Grid g, const RVec& v);
  static ScalarField from_physical_complex(Grid g, const CVec& v);

  const Grid& grid() const { return grid_; }
  int n() const { return grid_.n(); }
  bool is_real() const { return real_; }
  void set_real(bool r) { real_ = r; }

  cplx* data() { return c_.data(); }
  const cplx* data() const { return c_.data(); }
  CVec& coeffs() { return c_; }
  const CVec& coeffs() const { return c_; }
  cplx& operator[](std::size_t i) { return c_[i]; }
  const cplx& operator[](std::size_t i) const { return c_[i]; }

  // Access by signed wavenumber.
  cplx& mode(int k1, int k2) { return c_[std::size_t(grid_.index(k1)) * n() + grid_.index(k2)]; }
  cplx mode(int k1, int k2) const { return c_[std::size_t(grid_.index(k1)) * n() + grid_.index(k2)]; }
  cplx mean() const { return c_[0]; }

  RVec to_physical() const;           // real part on the n x n grid
  CVec to_physical_complex() const;   // complex samples on the n x n grid

  double max_abs_coeff() const {
    double m = 0.0;
    for (const auto& z : c_) m = std::max(m, std::abs(z));
    return m;
  }
  // Largest |xi|_inf carrying a coefficient above rel * max.
  int band(double rel = 0.0) const;

  ScalarField& operator+=(const ScalarField& o) {
    require_same_grid(grid_, o.grid_, "operator+=");
    for (std::size_t i = 0; i < c_.size(); ++i) c_[i] += o.c_[i];
    real_ = real_ && o.real_;
    return *this;
  }
  ScalarField& operator-=(const ScalarField& o) {
    require_same_grid(grid_, o.grid_, "operator-=");
    for (std::size_t i = 0; i < c_.size(); ++i) c_[i] -= o.c_[i];
    real_ = real_ && o.real_;
    return *this;
  }
  ScalarField& operator*=(double s) {
    for (auto& z : c_) z *= s;
    return *this;
  }
  ScalarField& operator*=(cplx s) {
    for (auto& z : c_) z *= s;
    if (s.imag() != 0.0) real_ = false;
    return *this;
  }
  // this += s * o
  void axpy(cplx s, const ScalarField& o) {
    require_same_grid(grid_, o.grid_, "axpy");
    for (std::size_t i = 0; i < c_.size(); ++i) c_[i] += s * o.c_[i];
    real_ = real_ && o.real_ && s.imag() == 0.0;
  }

 private:
  Grid grid_;
  bool real_ = true;
  CVec c_;
};

inline ScalarField operator+(ScalarField a, const ScalarField& b) { return a += b; }
inline ScalarField operator-(ScalarField a, const ScalarField& b) { return a -= b; }
inline ScalarField operator*(double s, ScalarField a) { return a *= s; }
inline ScalarField operator*(cplx s, ScalarField a) { return a *= s; }

struct VectorField {
  std::array<ScalarField, 2> c;
  VectorField() = default;
  explicit VectorField(Grid g, bool real = true) : c{ScalarField(g, real), ScalarField(g, real)} {}
  VectorField(ScalarField a, ScalarField b) : c{std::move(a), std::move(b)} {}
  ScalarField& operator[](int i) { return c[i]; }
  const ScalarField& operator[](int i) const { return c[i]; }
  const Grid& grid() const { return c[0].grid(); }
  bool is_real() const { return c[0].is_real() && c[1].is_real(); }
  VectorField& operator+=(const VectorField& o) {
    c[0] += o.c[0];
    c[1] += o.c[1];
    return *this;
  }
  VectorField& operator-=(const VectorField& o) {
    c[0] -= o.c[0];
    c[1] -= o.c[1];
    return *this;
  }
  VectorField& operator*=(double s) {
    c[0] *= s;
    c[1] *= s;
    return *this;
  }
  void axpy(cplx s, const VectorField& o) {
    c[0].axpy(s, o.c[0]);
    c[1].axpy(s, o.c[1]);
  }
};
inline VectorField operator+(VectorField a, const VectorField& b) { return a += b; }
inline VectorField operator-(VectorField a, const VectorField& b) { return a -= b; }
inline VectorField operator*(double s, VectorField a) { return a *= s; }

// 2x2 matrix field, entry (i,j) at c[2*i+j].
struct MatrixField {
  std::array<ScalarField, 4> c;
  MatrixField() = default;
  explicit MatrixField(Grid g, bool real = true)
      : c{ScalarField(g, real), ScalarField(g, real), ScalarField(g, real), ScalarField(g, real)} {}
  ScalarField& operator()(int i, int j) { return c[2 * i + j]; }
  const ScalarField& operator()(int i, int j) const { return c[2 * i + j]; }
  const Grid& grid() const { return c[0].grid(); }
  MatrixField& operator+=(const MatrixField& o) {
    for (int k = 0; k < 4; ++k) c[k] += o.c[k];
    return *this;
  }
  MatrixField& operator-=(const MatrixField& o) {
    for (int k = 0; k < 4; ++k) c[k] -= o.c[k];
    return *this;
  }
  MatrixField& operator*=(double s) {
    for (auto& f : c) f *= s;
    return *this;
  }
};
inline MatrixField operator+(MatrixField a, const MatrixField& b) { return a += b; }
inline MatrixField operator-(MatrixField a, const MatrixField& b) { return a -= b; }

// ---------------------------------------------------------------------------
// Transforms

inline ScalarField ScalarField::from_physical(Grid g, const RVec& v) {
  const int n = g.n();
  if (v.size() != g.size()) throw SpectralError("from_physical: sample count mismatch");
  RVec in(v);
  CVec half(std::size_t(n) * (n / 2 + 1));
  fft::r2c(in, half, n);
  ScalarField f(g, true);
  const double s = 1.0 / double(g.size());
  const int nh = n / 2 + 1;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < nh; ++j) {
      cplx z = half[std::size_t(i) * nh + j] * s;
      f.c_[std::size_t(i) * n + j] = z;
      int ci = (n - i) % n, cj = (n - j) % n;
      f.c_[std::size_t(ci) * n + cj] = std::conj(z);
    }
  return f;
}

inline ScalarField ScalarField::from_physical_complex(Grid g, const CVec& v) {
  if (v.size() != g.size()) throw SpectralError("from_physical_complex: sample count mismatch");
  ScalarField f(g, false);
  f.c_ = v;
  fft::forward(f.c_, g.n());
  const double s = 1.0 / double(g.size());
  for (auto& z : f.c_) z *= s;
  return f;
}

namespace detail {

// Hermitian half spectrum of the real part of a full coefficient array.
inline void to_half(const CVec& full, CVec& half, int n) {
  const int nh = n / 2 + 1;
  for (int i = 0; i < n; ++i) {
    int ci = (n - i) % n;
    for (int j = 0; j < nh; ++j) {
      int cj = (n - j) % n;
      half[std::size_t(i) * nh + j] =
          0.5 * (full[std::size_t(i) * n + j] + std::conj(full[std::size_t(ci) * n + cj]));
    }
  }
}

}  // namespace detail

inline RVec ScalarField::to_physical() const {
  const int n = this->n();
  CVec half(std::size_t(n) * (n / 2 + 1));
  detail::to_half(c_, half, n);
  RVec out(grid_.size());
  fft::c2r(half, out, n);
  return out;
}

inline CVec ScalarField::to_physical_complex() const {
  CVec out(c_);
  fft::backward(out, n());
  return out;
}

inline int ScalarField::band(double rel) const {
  const int n = this->n();
  const double thr = rel * max_abs_coeff();
  int b = 0;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (std::abs(c_[std::size_t(i) * n + j]) > thr) {
        int k = std::max(std::abs(grid_.wavenumber(i)), std::abs(grid_.wavenumber(j)));
        b = std::max(b, k);
      }
  return b;
}

inline int band(const VectorField& v, double rel = 0.0) { return std::max(v[0].band(rel), v[1].band(rel)); }

// ---------------------------------------------------------------------------
// Zero-padded physical representation on the 3n/2 grid.

class Padded {
 public:
  Padded() = default;
  // Interpolate f onto the m x m grid, m = 3n/2.
  explicit Padded(const ScalarField& f) : n_(f.n()), m_(3 * f.n() / 2), real_(f.is_real()) {
    const int n = n_, m = m_;
    if (real_) {
      // Fill the half spectrum q2 >= 0 directly.
      const int mh = m / 2 + 1;
      CVec half(std::size_t(m) * mh, cplx(0.0));
      for (int i = 0; i < n; ++i) {
        int k1 = f.grid().wavenumber(i);
        for (int j = 0; j <= n / 2; ++j) {
          cplx z = f[std::size_t(i) * n + j];
          if (z == cplx(0.0)) continue;
          int ni = (k1 == n / 2) ? 2 : 1, nj = (j == n / 2) ? 2 : 1;
          cplx w = z / double(ni * nj);
          for (int a = 0; a < ni; ++a) {
            int q1 = a ? -k1 : k1;
            half[std::size_t((q1 + m) % m) * mh + j] += w;
          }
        }
      }
      re_.resize(std::size_t(m) * m);
      fft::c2r(half, re_, m);
      return;
    }
    CVec full(std::size_t(m) * m, cplx(0.0));
    for (int i = 0; i < n; ++i) {
      int k1 = f.grid().wavenumber(i);
      for (int j = 0; j < n; ++j) {
        int k2 = f.grid().wavenumber(j);
        cplx z = f[std::size_t(i) * n + j];
        if (z == cplx(0.0)) continue;
        // Nyquist content is split evenly between +-n/2 so real data stays real.
        int ni = (k1 == n / 2) ? 2 : 1, nj = (k2 == n / 2) ? 2 : 1;
        cplx w = z / double(ni * nj);
        for (int a = 0; a < ni; ++a)
          for (int b = 0; b < nj; ++b) {
            int q1 = a ? -k1 : k1, q2 = b ? -k2 : k2;
            full[std::size_t((q1 + m) % m) * m + (q2 + m) % m] += w;
          }
      }
    }
    fft::backward(full, m);
    cx_ = std::move(full);
  }
  static Padded real_zeros(int n) {
    Padded p;
    p.n_ = n;
    p.m_ = 3 * n / 2;
    p.real_ = true;
    p.re_.assign(std::size_t(p.m_) * p.m_, 0.0);
    return p;
  }
  static Padded complex_zeros(int n) {
    Padded p;
    p.n_ = n;
    p.m_ = 3 * n / 2;
    p.real_ = false;
    p.cx_.assign(std::size_t(p.m_) * p.m_, cplx(0.0));
    return p;
  }

  bool is_real() const { return real_; }
  int n() const { return n_; }
  int m() const { return m_; }
  std::size_t size() const { return std::size_t(m_) * m_; }
  RVec& re() { return re_; }
  const RVec& re() const { return re_; }
  CVec& cx() { return cx_; }
  const CVec& cx() const { return cx_; }
  cplx value(std::size_t i) const { return real_ ? cplx(re_[i]) : cx_[i]; }

  Padded& make_complex() {
    if (real_) {
      cx_.resize(re_.size());
      for (std::size_t i = 0; i < re_.size(); ++i) cx_[i] = re_[i];
      RVec().swap(re_);
      real_ = false;
    }
    return *this;
  }

  // Back to coefficients on the n grid, keeping |xi|_inf <= n/2 - 1.
  ScalarField truncate() const {
    const int n = n_, m = m_;
    Grid g(n);
    ScalarField f(g, real_);
    const double s = 1.0 / double(size());
    if (real_) {
      const int mh = m / 2 + 1;
      CVec half(std::size_t(m) * mh);
      fft::r2c(re_, half, m);
      for (int i = 0; i < n; ++i) {
        int k1 = g.wavenumber(i);
        if (k1 == n / 2) continue;
        for (int j = 0; j < n; ++j) {
          int k2 = g.wavenumber(j);
          if (k2 == n / 2) continue;
          int pi = (k1 + m) % m, pj = (k2 + m) % m;
          cplx z;
          if (pj < mh)
            z = half[std::size_t(pi) * mh + pj];
          else
            z = std::conj(half[std::size_t((m - pi) % m) * mh + (m - pj) % m]);
          f[std::size_t(i) * n + j] = z * s;
        }
      }
    } else {
      CVec a(cx_);
      fft::forward(a, m);
      for (int i = 0; i < n; ++i) {
        int k1 = g.wavenumber(i);
        if (k1 == n / 2) continue;
        for (int j = 0; j < n; ++j) {
          int k2 = g.wavenumber(j);
          if (k2 == n / 2) continue;
          f[std::size_t(i) * n + j] = a[std::size_t((k1 + m) % m) * m + (k2 + m) % m] * s;
        }
      }
    }
    return f;
  }

 private:
  int n_ = 0, m_ = 0;
  bool real_ = true;
  RVec re_;
  CVec cx_;
};

// out += s * a * b pointwise
inline void accumulate_product(Padded& out, double s, const Padded& a, const Padded& b) {
  if (a.is_real() && b.is_real() && out.is_real()) {
    auto& o = out.re();
    const auto& x = a.re();
    const auto& y = b.re();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] += s * x[i] * y[i];
    return;
  }
  out.make_complex();
  auto& o = out.cx();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] += s * a.value(i) * b.value(i);
}

// Dealiased pointwise product: both factors are padded to 3n/2, multiplied
// and truncated back. Exact for the retained modes |xi|_inf < n/2.
inline ScalarField spectral_product(const ScalarField& f, const ScalarField& g) {
  require_same_grid(f.grid(), g.grid(), "spectral_product");
  Padded a(f), b(g);
  Padded out = (a.is_real() && b.is_real()) ? Padded::real_zeros(f.n()) : Padded::complex_zeros(f.n());
  accumulate_product(out, 1.0, a, b);
  return out.truncate();
}

// ---------------------------------------------------------------------------
// Differential operators. Odd-order symbols vanish on the Nyquist line.

namespace detail {

template <class Fn>
inline ScalarField apply_symbol(const ScalarField& f, Fn symbol, bool keeps_real = true) {
  const Grid& g = f.grid();
  const int n = g.n();
  ScalarField out(g, f.is_real() && keeps_real);
  for (int i = 0; i < n; ++i) {
    int k1 = g.wavenumber(i);
    for (int j = 0; j < n; ++j) {
      int k2 = g.wavenumber(j);
      std::size_t idx = std::size_t(i) * n + j;
      out[idx] = symbol(k1, k2, g.is_nyquist(i), g.is_nyquist(j)) * f[idx];
    }
  }
  return out;
}

inline cplx dsym(int k, bool nyq) { return nyq ? cplx(0.0) : cplx(0.0, double(k)); }

}  // namespace detail

inline ScalarField partial(const ScalarField& f, int axis) {
  return detail::apply_symbol(f, [axis](int k1, int k2, bool n1, bool n2) {
    return axis == 0 ? detail::dsym(k1, n1) : detail::dsym(k2, n2);
  });
}

inline VectorField gradient(const ScalarField& f) { return VectorField(partial(f, 0), partial(f, 1)); }

// (d2 f, -d1 f)
inline VectorField perp_gradient(const ScalarField& f) {
  ScalarField a = partial(f, 1);
  ScalarField b = partial(f, 0);
  b *= -1.0;
  return VectorField(std::move(a), std::move(b));
}

inline ScalarField divergence(const VectorField& v) {
  require_same_grid(v[0].grid(), v[1].grid(), "divergence");
  ScalarField d = partial(v[0], 0);
  d += partial(v[1], 1);
  return d;
}

inline ScalarField curl2d(const VectorField& v) {
  ScalarField d = partial(v[1], 0);
  d -= partial(v[0], 1);
  return d;
}

inline ScalarField laplacian(const ScalarField& f) {
  return detail::apply_symbol(f, [](int k1, int k2, bool, bool) { return cplx(-double(k1 * k1 + k2 * k2)); });
}
inline VectorField laplacian(const VectorField& v) { return VectorField(laplacian(v[0]), laplacian(v[1])); }

inline double mean_tolerance(const ScalarField& f) { return 1e-12 * std::max(1.0, f.max_abs_coeff()); }

// (-Delta)^{-1}, symbol 1/|xi|^2. Input must have zero mean.
inline ScalarField inverse_laplacian(const ScalarField& f) {
  if (std::abs(f.mean()) > mean_tolerance(f))
    throw SpectralError("inverse_laplacian: input has nonzero mean " + std::to_string(std::abs(f.mean())));
  return detail::apply_symbol(f, [](int k1, int k2, bool, bool) {
    int q = k1 * k1 + k2 * k2;
    return q == 0 ? cplx(0.0) : cplx(1.0 / double(q));
  });
}
inline VectorField inverse_laplacian(const VectorField& v) {
  return VectorField(inverse_laplacian(v[0]), inverse_laplacian(v[1]));
}

// exp(t Delta)
inline ScalarField heat_semigroup(const ScalarField& f, double t) {
  if (t < 0.0) throw SpectralError("heat_semigroup: negative time");
  return detail::apply_symbol(f, [t](int k1, int k2, bool, bool) { return cplx(std::exp(-double(k1 * k1 + k2 * k2) * t)); });
}
inline VectorField heat_semigroup(const VectorField& v, double t) {
  return VectorField(heat_semigroup(v[0], t), heat_semigroup(v[1], t));
}

// Multiply by exp(i K.x): coefficient at xi moves to xi + K. Content pushed
// past the Nyquist line is an error rather than silently wrapped, except for
// roundoff-level coefficients (<= 1e-14 of the largest), which are dropped.
inline ScalarField shift_modes(const ScalarField& f, int K1, int K2) {
  const Grid& g = f.grid();
  const int n = g.n();
  const double noise = 1e-14 * f.max_abs_coeff();
  ScalarField out(g, false);
  for (int i = 0; i < n; ++i) {
    int k1 = g.wavenumber(i);
    for (int j = 0; j < n; ++j) {
      cplx z = f[std::size_t(i) * n + j];
      if (z == cplx(0.0)) continue;
      int q1 = k1 + K1, q2 = g.wavenumber(j) + K2;
      if (std::abs(q1) >= n / 2 || std::abs(q2) >= n / 2) {
        if (std::abs(z) <= noise) continue;
        throw SpectralError("shift_modes: shifted content leaves the resolved band");
      }
      out.mode(q1, q2) += z;
    }
  }
  return out;
}

// out += s * f * exp(i K.x), same wrap policy as shift_modes.
inline void add_shifted(ScalarField& out, cplx s, const ScalarField& f, int K1, int K2) {
  const Grid& g = f.grid();
  require_same_grid(out.grid(), g, "add_shifted");
  const int n = g.n();
  const double noise = 1e-14 * f.max_abs_coeff();
  if (out.is_real() && !(K1 == 0 && K2 == 0 && f.is_real() && s.imag() == 0.0)) out.set_real(false);
  for (int i = 0; i < n; ++i) {
    int k1 = g.wavenumber(i);
    for (int j = 0; j < n; ++j) {
      cplx z = f[std::size_t(i) * n + j];
      if (z == cplx(0.0)) continue;
      int q1 = k1 + K1, q2 = g.wavenumber(j) + K2;
      if (std::abs(q1) >= n / 2 || std::abs(q2) >= n / 2) {
        if (std::abs(z) <= noise) continue;
        throw SpectralError("add_shifted: shifted content leaves the resolved band");
      }
      out.mode(q1, q2) += s * z;
    }
  }
}

// Replace f by its Hermitian part and mark it real. Throws if the
// anti-Hermitian part exceeds rel * max|c|.
inline ScalarField& enforce_real(ScalarField& f, double rel = 1e-12) {
  const Grid& g = f.grid();
  const int n = g.n();
  const double tol = rel * f.max_abs_coeff();
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) {
      std::size_t a = std::size_t(i) * n + j, b = std::size_t((n - i) % n) * n + (n - j) % n;
      if (b < a) continue;
      cplx za = f[a], zb = std::conj(f[b]);
      if (std::abs(za - zb) > 2 * tol) throw SpectralError("enforce_real: field is not real valued");
      cplx m = 0.5 * (za + zb);
      f[a] = m;
      f[b] = std::conj(m);
    }
  f.set_real(true);
  return f;
}
inline VectorField& enforce_real(VectorField& v, double rel = 1e-12) {
  enforce_real(v[0], rel);
  enforce_real(v[1], rel);
  return v;
}

// P = Id - grad Delta^{-1} div
inline VectorField leray_project(const VectorField& v) {
  const Grid& g = v.grid();
  const int n = g.n();
  VectorField out(g, v.is_real());
  for (int i = 0; i < n; ++i) {
    int k1 = g.is_nyquist(i) ? 0 : g.wavenumber(i);
    for (int j = 0; j < n; ++j) {
      int k2 = g.is_nyquist(j) ? 0 : g.wavenumber(j);
      std::size_t idx = std::size_t(i) * n + j;
      cplx a = v[0][idx], b = v[1][idx];
      int q = k1 * k1 + k2 * k2;
      if (q == 0) {
        out[0][idx] = a;
        out[1][idx] = b;
        continue;
      }
      cplx p = (double(k1) * a + double(k2) * b) / double(q);
      out[0][idx] = a - double(k1) * p;
      out[1][idx] = b - double(k2) * p;
    }
  }
  return out;
}

// Row divergence (div A)_j = d_i A_ij.
inline VectorField divergence(const MatrixField& A) {
  ScalarField a = partial(A(0, 0), 0);
  a += partial(A(1, 0), 1);
  ScalarField b = partial(A(0, 1), 0);
  b += partial(A(1, 1), 1);
  return VectorField(std::move(a), std::move(b));
}

// R w = -(grad + grad^T)(-Delta)^{-1} w, so that div R w = w for
// mean-zero divergence-free w.
inline MatrixField calderon_lift(const VectorField& w) {
  const Grid& g = w.grid();
  for (int c = 0; c < 2; ++c)
    if (std::abs(w[c].mean()) > mean_tolerance(w[c]))
      throw SpectralError("calderon_lift: input has nonzero mean");
  {
    ScalarField d = divergence(w);
    double scale = std::max(w[0].max_abs_coeff(), w[1].max_abs_coeff()) * g.n();
    if (d.max_abs_coeff() > 1e-10 * std::max(scale, 1e-300))
      throw SpectralError("calderon_lift: input is not divergence free");
  }
  const int n = g.n();
  MatrixField R(g, w.is_real());
  for (int i = 0; i < n; ++i) {
    int k1 = g.is_nyquist(i) ? 0 : g.wavenumber(i);
    for (int j = 0; j < n; ++j) {
      int k2 = g.is_nyquist(j) ? 0 : g.wavenumber(j);
      int q = k1 * k1 + k2 * k2;
      if (q == 0) continue;
      std::size_t idx = std::size_t(i) * n + j;
      const double k[2] = {double(k1), double(k2)};
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
          R(a, b)[idx] = -cplx(0.0, 1.0) * (k[a] * w[b][idx] + k[b] * w[a][idx]) / double(q);
    }
  }
  return R;
}

// Max |f(x) - F^{-1} F f(x)| over the grid.
inline double transform_roundtrip_error(const ScalarField& f) {
  if (f.is_real()) {
    RVec p = f.to_physical();
    ScalarField back = ScalarField::from_physical(f.grid(), p);
    double e = 0.0;
    for (std::size_t i = 0; i < f.coeffs().size(); ++i) e = std::max(e, std::abs(back[i] - f[i]));
    return e;
  }
  CVec p = f.to_physical_complex();
  ScalarField back = ScalarField::from_physical_complex(f.grid(), p);
  double e = 0.0;
  for (std::size_t i = 0; i < f.coeffs().size(); ++i) e = std::max(e, std::abs(back[i] - f[i]));
  return e;
}

// Sup of |f| sampled on the 3n/2 grid.
inline double sup_norm(const ScalarField& f) {
  Padded p(f);
  double m = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) m = std::max(m, std::abs(p.value(i)));
  return m;
}
// Sup of the pointwise Euclidean norm.
inline double sup_norm(const VectorField& v) {
  Padded a(v[0]), b(v[1]);
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::hypot(std::abs(a.value(i)), std::abs(b.value(i))));
  return m;
}
inline double sup_norm(const MatrixField& A) {
  std::array<Padded, 4> p{Padded(A.c[0]), Padded(A.c[1]), Padded(A.c[2]), Padded(A.c[3])};
  double m = 0.0;
  for (std::size_t i = 0; i < p[0].size(); ++i) {
    double s = 0.0;
    for (auto& q : p) s += std::norm(q.value(i));
    m = std::max(m, std::sqrt(s));
  }
  return m;
}

// Cheap coefficient-space bound sum |c|, used for scale estimates.
inline double coeff_l1(const ScalarField& f) {
  double s = 0.0;
  for (const auto& z : f.coeffs()) s += std::abs(z);
  return s;
}

// Evaluate f at an arbitrary point by direct summation.
inline cplx evaluate_at(const ScalarField& f, double x1, double x2) {
  const Grid& g = f.grid();
  const int n = g.n();
  cplx s = 0.0;
  for (int i = 0; i < n; ++i) {
    int k1 = g.wavenumber(i);
    for (int j = 0; j < n; ++j) {
      cplx z = f[std::size_t(i) * n + j];
      if (z == cplx(0.0)) continue;
      s += z * std::polar(1.0, k1 * x1 + g.wavenumber(j) * x2);
    }
  }
  return s;
}

}  // namespace nsbmo
