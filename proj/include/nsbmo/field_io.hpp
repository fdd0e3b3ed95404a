#pragma once
// NSF2 binary snapshots and atomic file writes.
//
// Layout (little endian): "NSF2", u32 version = 1, u32 n, u8 components,
// f64 time, then per component n*n (re, im) f64 pairs in DFT order.

#include <bit>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "nsbmo/spectral.hpp"

namespace nsbmo {

class FieldIOError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

static_assert(std::endian::native == std::endian::little, "NSF2 io assumes a little-endian host");

struct Snapshot {
  double time = 0.0;
  std::vector<ScalarField> components;
};

// Write to a sibling temp file, then rename over the target.
inline void atomic_write(const std::filesystem::path& path, const std::string& bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FieldIOError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    out.flush();
    if (!out) throw FieldIOError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

namespace detail {
template <class T>
void put(std::string& s, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  s.append(buf, sizeof(T));
}
template <class T>
T take(const std::string& s, std::size_t& pos, const char* what) {
  if (pos + sizeof(T) > s.size()) throw FieldIOError(std::string("truncated NSF2 file while reading ") + what);
  T v;
  std::memcpy(&v, s.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}
}  // namespace detail

inline std::string encode_nsf2(const Snapshot& snap) {
  if (snap.components.empty() || snap.components.size() > 255) throw FieldIOError("NSF2 needs 1..255 components");
  const int n = snap.components[0].n();
  for (auto& c : snap.components) require_same_grid(c.grid(), snap.components[0].grid(), "encode_nsf2");
  std::string s = "NSF2";
  detail::put<std::uint32_t>(s, 1);
  detail::put<std::uint32_t>(s, std::uint32_t(n));
  detail::put<std::uint8_t>(s, std::uint8_t(snap.components.size()));
  detail::put<double>(s, snap.time);
  s.reserve(s.size() + snap.components.size() * std::size_t(n) * n * 16);
  for (auto& c : snap.components)
    for (const auto& z : c.coeffs()) {
      detail::put<double>(s, z.real());
      detail::put<double>(s, z.imag());
    }
  return s;
}

// A loaded component is flagged real when its coefficients are exactly
// Hermitian.
inline Snapshot decode_nsf2(const std::string& s) {
  std::size_t pos = 0;
  if (s.size() < 4) throw FieldIOError("truncated NSF2 file (no magic)");
  if (s.compare(0, 4, "NSF2") != 0) throw FieldIOError("bad NSF2 magic");
  pos = 4;
  auto version = detail::take<std::uint32_t>(s, pos, "version");
  if (version != 1) throw FieldIOError("unsupported NSF2 version " + std::to_string(version));
  auto n = detail::take<std::uint32_t>(s, pos, "grid size");
  auto comps = detail::take<std::uint8_t>(s, pos, "component count");
  Snapshot snap;
  snap.time = detail::take<double>(s, pos, "time");
  Grid g;
  try {
    g = Grid(int(n));
  } catch (const SpectralError& e) {
    throw FieldIOError(std::string("NSF2 header: ") + e.what());
  }
  const std::size_t need = std::size_t(comps) * g.size() * 16;
  if (s.size() - pos < need) throw FieldIOError("truncated NSF2 file: payload shorter than header declares");
  for (int c = 0; c < comps; ++c) {
    ScalarField f(g, false);
    for (std::size_t i = 0; i < g.size(); ++i) {
      double re = detail::take<double>(s, pos, "payload");
      double im = detail::take<double>(s, pos, "payload");
      f[i] = cplx(re, im);
    }
    bool herm = true;
    const int nn = g.n();
    for (int i = 0; i < nn && herm; ++i)
      for (int j = 0; j < nn; ++j)
        if (f[std::size_t(i) * nn + j] != std::conj(f[std::size_t((nn - i) % nn) * nn + (nn - j) % nn])) {
          herm = false;
          break;
        }
    f.set_real(herm);
    snap.components.push_back(std::move(f));
  }
  return snap;
}

inline void write_nsf2(const std::filesystem::path& path, const Snapshot& snap) { atomic_write(path, encode_nsf2(snap)); }

inline Snapshot read_nsf2(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FieldIOError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_nsf2(ss.str());
}

inline Snapshot snapshot_of(const VectorField& v, double t) { return Snapshot{t, {v[0], v[1]}}; }

}  // namespace nsbmo
