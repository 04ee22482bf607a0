#pragma once

// Synthetic brain-like volumes with lesion masks, vendor and center domain
// shifts, motion corruption, split protocols and prompt encodings.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "calsam/volume.hpp"

namespace calsam::synth {

/// splitmix64 finaliser; derives independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

struct SynthParams {
  double vendor_gain = 1.15;
  double vendor_bias = 0.1;    // linear ramp along x, 0 at x=0 up to this value
  double vendor_noise = 0.03;  // Gaussian sigma
  double acquisition_noise = 0.02;
  double texture_amplitude = 0.12;
  double lesion_contrast = 0.3;
  double prompt_sigma = 2.0;  // mm
  Spacing spacing{1.0, 1.0, 1.0};
};

struct Sample {
  Volume3D volume;
  SegMask mask;
  Prompt prompt;
  DomainTag domain;
  std::uint64_t seed = 0;
};

namespace detail {

// Trilinearly interpolated lattice noise in [-1, 1].
class ValueNoise {
 public:
  ValueNoise(const Extents& dims, double cell, std::mt19937_64& rng) : cell_(cell) {
    for (int a = 0; a < 3; ++a) {
      const std::size_t n = a == 0 ? dims.nx : a == 1 ? dims.ny : dims.nz;
      lattice_[a] = static_cast<std::size_t>(std::ceil(static_cast<double>(n) / cell)) + 2;
    }
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    values_.resize(lattice_[0] * lattice_[1] * lattice_[2]);
    for (auto& v : values_) v = u(rng);
  }

  double operator()(double x, double y, double z) const {
    const double p[3] = {x / cell_, y / cell_, z / cell_};
    std::size_t i[3];
    double t[3];
    for (int a = 0; a < 3; ++a) {
      i[a] = static_cast<std::size_t>(std::floor(p[a]));
      t[a] = p[a] - static_cast<double>(i[a]);
      t[a] = t[a] * t[a] * (3.0 - 2.0 * t[a]);  // smoothstep
    }
    double acc = 0.0;
    for (int c = 0; c < 8; ++c) {
      const std::size_t ix = i[0] + (c & 1), iy = i[1] + ((c >> 1) & 1), iz = i[2] + ((c >> 2) & 1);
      const double w = ((c & 1) ? t[0] : 1.0 - t[0]) * (((c >> 1) & 1) ? t[1] : 1.0 - t[1]) *
                       (((c >> 2) & 1) ? t[2] : 1.0 - t[2]);
      acc += w * values_[ix + lattice_[0] * (iy + lattice_[1] * iz)];
    }
    return acc;
  }

 private:
  double cell_;
  std::array<std::size_t, 3> lattice_{};
  std::vector<double> values_;
};

inline double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

struct Ellipsoid {
  std::array<double, 3> centre;
  std::array<double, 3> radii;
  double contrast;

  double rho(double x, double y, double z) const {
    const double dx = (x - centre[0]) / radii[0], dy = (y - centre[1]) / radii[1],
                 dz = (z - centre[2]) / radii[2];
    return std::sqrt(dx * dx + dy * dy + dz * dz);
  }
};

inline double distance_mm(const Voxel& a, const std::array<double, 3>& b, const Spacing& s) {
  const double dx = (static_cast<double>(a.x) - b[0]) * s[0];
  const double dy = (static_cast<double>(a.y) - b[1]) * s[1];
  const double dz = (static_cast<double>(a.z) - b[2]) * s[2];
  return std::sqrt(dx * dx + dy * dy + dz * dz);
}

}  // namespace detail

inline std::array<double, 3> mask_centroid(const SegMask& m) {
  std::array<double, 3> c{0, 0, 0};
  std::size_t n = 0;
  const auto& d = m.dims;
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x)
        if (m.at(x, y, z)) {
          c[0] += static_cast<double>(x);
          c[1] += static_cast<double>(y);
          c[2] += static_cast<double>(z);
          ++n;
        }
  if (n == 0) throw std::invalid_argument("centroid of an empty mask");
  for (auto& v : c) v /= static_cast<double>(n);
  return c;
}

/// Foreground click at the mask centroid (snapped to the nearest mask voxel
/// when the centroid falls outside) and a background click outside the
/// mask at least a quarter of the volume diagonal away from the centroid.
inline Prompt derive_prompt(const SegMask& mask, const Spacing& spacing, double sigma,
                            std::uint64_t seed) {
  const auto& d = mask.dims;
  const auto c = mask_centroid(mask);
  Prompt p;
  p.gaussian_sigma = sigma;

  const Voxel rounded{static_cast<std::size_t>(std::lround(c[0])),
                      static_cast<std::size_t>(std::lround(c[1])),
                      static_cast<std::size_t>(std::lround(c[2]))};
  if (mask.at(rounded.x, rounded.y, rounded.z)) {
    p.foreground = rounded;
  } else {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t z = 0; z < d.nz; ++z)
      for (std::size_t y = 0; y < d.ny; ++y)
        for (std::size_t x = 0; x < d.nx; ++x) {
          if (!mask.at(x, y, z)) continue;
          const double dist = detail::distance_mm({x, y, z}, c, spacing);
          if (dist < best) {
            best = dist;
            p.foreground = {x, y, z};
          }
        }
  }

  p.box.lo = {d.nx, d.ny, d.nz};
  p.box.hi = {0, 0, 0};
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x)
        if (mask.at(x, y, z)) {
          p.box.lo = {std::min(p.box.lo.x, x), std::min(p.box.lo.y, y), std::min(p.box.lo.z, z)};
          p.box.hi = {std::max(p.box.hi.x, x), std::max(p.box.hi.y, y), std::max(p.box.hi.z, z)};
        }

  const double diag = std::sqrt(std::pow(static_cast<double>(d.nx) * spacing[0], 2) +
                                std::pow(static_cast<double>(d.ny) * spacing[1], 2) +
                                std::pow(static_cast<double>(d.nz) * spacing[2], 2));
  const double min_dist = 0.25 * diag;
  std::mt19937_64 rng(mix_seed(seed, 0xb6));
  std::uniform_int_distribution<std::size_t> ux(0, d.nx - 1), uy(0, d.ny - 1), uz(0, d.nz - 1);
  for (int attempt = 0; attempt < 4096; ++attempt) {
    const Voxel v{ux(rng), uy(rng), uz(rng)};
    if (!mask.at(v.x, v.y, v.z) && detail::distance_mm(v, c, spacing) >= min_dist) {
      p.background = v;
      return p;
    }
  }
  double best = -1.0;
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x) {
        if (mask.at(x, y, z)) continue;
        const double dist = detail::distance_mm({x, y, z}, c, spacing);
        if (dist > best) {
          best = dist;
          p.background = {x, y, z};
        }
      }
  if (best < min_dist) throw std::runtime_error("no background voxel far enough from the mask");
  return p;
}

/// Motion artefact: periodic box blur along z, plus ghost echoes along y.
/// Severity 1: 3-voxel blur. 2: 5-voxel blur and one 10% ghost shifted by 2
/// voxels. 3: 7-voxel blur and two ghosts (shifts 2 and 4). Ghosts are mixed
/// in convexly and the blur is periodic, so variance never increases. The
/// seed picks the ghost direction.
inline Volume3D apply_motion(const Volume3D& v, int severity, std::uint64_t seed) {
  if (severity < 1 || severity > 3) {
    throw std::invalid_argument("motion severity must be 1..3, got " + std::to_string(severity));
  }
  const auto& d = v.dims;
  const int half = severity;  // window 2*half+1
  Volume3D blurred(d, v.spacing);
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x) {
        double acc = 0.0;
        for (int k = -half; k <= half; ++k) {
          const auto zz = static_cast<std::size_t>(
              (static_cast<long long>(z) + k + static_cast<long long>(d.nz) * 4) %
              static_cast<long long>(d.nz));
          acc += v.at(x, y, zz);
        }
        blurred.at(x, y, z) = static_cast<float>(acc / (2 * half + 1));
      }
  if (severity == 1) return blurred;

  constexpr double kGhost = 0.1;
  std::mt19937_64 rng(mix_seed(seed, 0x6057));
  const long long dir = (rng() & 1) ? 1 : -1;
  std::vector<long long> shifts{2 * dir};
  if (severity == 3) shifts.push_back(4 * dir);
  const double keep = 1.0 - kGhost * static_cast<double>(shifts.size());
  Volume3D out(d, v.spacing);
  const auto ny = static_cast<long long>(d.ny);
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x) {
        double acc = keep * blurred.at(x, y, z);
        for (long long s : shifts) {
          const auto yy = static_cast<std::size_t>(((static_cast<long long>(y) - s) % ny + ny) % ny);
          acc += kGhost * blurred.at(x, yy, z);
        }
        out.at(x, y, z) = static_cast<float>(acc);
      }
  return out;
}

/// Vendor-B acquisition: gain, linear bias field along x, additive noise.
inline Volume3D apply_vendor_shift(const Volume3D& v, const SynthParams& p, std::uint64_t seed) {
  Volume3D out(v.dims, v.spacing);
  std::mt19937_64 rng(mix_seed(seed, 0xb));
  std::normal_distribution<double> noise(0.0, p.vendor_noise);
  const auto& d = v.dims;
  const double denom = d.nx > 1 ? static_cast<double>(d.nx - 1) : 1.0;
  for (std::size_t z = 0; z < d.nz; ++z)
    for (std::size_t y = 0; y < d.ny; ++y)
      for (std::size_t x = 0; x < d.nx; ++x) {
        const double bias = p.vendor_bias * static_cast<double>(x) / denom;
        out.at(x, y, z) =
            static_cast<float>(p.vendor_gain * v.at(x, y, z) + bias + noise(rng));
      }
  return out;
}

/// Deterministic in (seed, dims, domain, params). Anatomy depends only on
/// the seed and the center, so vendors and corruptions share masks.
inline Sample generate_sample(std::uint64_t seed, const Extents& dims, const DomainTag& domain,
                              const SynthParams& params = {}) {
  if (dims.nx < 8 || dims.ny < 8 || dims.nz < 8) {
    throw std::invalid_argument("volume shape " + to_string(dims) + " too small (minimum 8^3)");
  }
  if (domain.center < 0) throw std::invalid_argument("center-id must be >= 0");
  const auto center = static_cast<std::uint64_t>(domain.center);
  std::mt19937_64 rng(mix_seed(seed, center));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double n[3] = {static_cast<double>(dims.nx), static_cast<double>(dims.ny),
                       static_cast<double>(dims.nz)};

  // center-specific texture frequency and lesion scale
  const double freq = 1.0 + 0.35 * static_cast<double>(center % 4);
  const double lesion_scale = 1.0 + 0.2 * (static_cast<double>(center % 3) - 1.0);
  const double cell = std::max(2.0, 8.0 / freq);
  detail::ValueNoise coarse(dims, cell, rng);
  detail::ValueNoise fine(dims, std::max(1.5, cell / 2.0), rng);

  detail::Ellipsoid brain{{(n[0] - 1) / 2, (n[1] - 1) / 2, (n[2] - 1) / 2},
                          {0.42 * n[0] * (0.95 + 0.1 * u01(rng)),
                           0.40 * n[1] * (0.95 + 0.1 * u01(rng)),
                           0.38 * n[2] * (0.95 + 0.1 * u01(rng))},
                          0.0};

  std::vector<detail::Ellipsoid> lesions;
  const int count = 1 + static_cast<int>(rng() % 3);
  for (int k = 0; k < count; ++k) {
    detail::Ellipsoid e{};
    for (int a = 0; a < 3; ++a) {
      // inside the inner part of the brain
      e.centre[a] = brain.centre[a] + (u01(rng) - 0.5) * 1.1 * brain.radii[a];
      e.radii[a] = std::max(1.5, (0.09 + 0.08 * u01(rng)) * n[a] * lesion_scale);
    }
    e.contrast = params.lesion_contrast * (0.85 + 0.3 * u01(rng));
    lesions.push_back(e);
  }

  Sample s;
  s.seed = seed;
  s.domain = domain;
  s.mask = SegMask(dims);
  Volume3D vol(dims, params.spacing);
  std::normal_distribution<double> acq(0.0, params.acquisition_noise);
  for (std::size_t z = 0; z < dims.nz; ++z)
    for (std::size_t y = 0; y < dims.ny; ++y)
      for (std::size_t x = 0; x < dims.nx; ++x) {
        const double px = static_cast<double>(x), py = static_cast<double>(y),
                     pz = static_cast<double>(z);
        const double tex = coarse(px, py, pz) + 0.5 * fine(px, py, pz);
        const double inside = detail::logistic((1.0 - brain.rho(px, py, pz)) / 0.03);
        double value = 0.05 + inside * (0.40 + params.texture_amplitude * tex);
        double lesion = 0.0;
        bool label = false;
        for (const auto& e : lesions) {
          const double r = e.rho(px, py, pz);
          lesion = std::max(lesion, e.contrast * detail::logistic((1.0 - r) / 0.15));
          label = label || r <= 1.0;
        }
        value += lesion + acq(rng);
        vol.at(x, y, z) = static_cast<float>(std::clamp(value, 0.0, 1.0));
        s.mask.labels[dims.index(x, y, z)] = label ? 1 : 0;
      }

  if (domain.vendor == Vendor::B) vol = apply_vendor_shift(vol, params, seed);
  if (domain.corruption == Corruption::motion) {
    vol = apply_motion(vol, domain.severity == 0 ? 2 : domain.severity, seed);
  }
  s.volume = std::move(vol);
  s.prompt = derive_prompt(s.mask, params.spacing, params.prompt_sigma, seed);
  return s;
}

/// Two channels of unit-peak Gaussian bumps at the foreground and background
/// clicks, flattened channel-major with x fastest.
inline std::vector<double> encode_prompt_channels(const Prompt& p, const Extents& dims,
                                                  const Spacing& spacing = {1.0, 1.0, 1.0}) {
  if (!(p.gaussian_sigma > 0.0)) {
    throw std::invalid_argument("prompt gaussian sigma must be > 0");
  }
  for (const Voxel* v : {&p.foreground, &p.background}) {
    if (v->x >= dims.nx || v->y >= dims.ny || v->z >= dims.nz) {
      throw std::invalid_argument("prompt point outside volume " + to_string(dims));
    }
  }
  std::vector<double> out(2 * dims.voxels());
  const double inv = 1.0 / (2.0 * p.gaussian_sigma * p.gaussian_sigma);
  for (int ch = 0; ch < 2; ++ch) {
    const Voxel& c = ch == 0 ? p.foreground : p.background;
    const std::array<double, 3> centre{static_cast<double>(c.x), static_cast<double>(c.y),
                                       static_cast<double>(c.z)};
    double* dst = out.data() + ch * dims.voxels();
    for (std::size_t z = 0; z < dims.nz; ++z)
      for (std::size_t y = 0; y < dims.ny; ++y)
        for (std::size_t x = 0; x < dims.nx; ++x) {
          const double dist = detail::distance_mm({x, y, z}, centre, spacing);
          dst[dims.index(x, y, z)] = std::exp(-dist * dist * inv);
        }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splits

enum class Protocol { scanner_split, leave_one_center_out };

inline std::string to_string(Protocol p) {
  return p == Protocol::scanner_split ? "scanner-split" : "leave-one-center-out";
}

inline Protocol parse_protocol(const std::string& s) {
  if (s == "scanner-split") return Protocol::scanner_split;
  if (s == "leave-one-center-out" || s == "loco") return Protocol::leave_one_center_out;
  throw std::invalid_argument("unknown split protocol '" + s + "'");
}

enum class Role { train, source, target, motion };

inline std::string to_string(Role r) {
  switch (r) {
    case Role::train: return "train";
    case Role::source: return "source";
    case Role::target: return "target";
    case Role::motion: return "motion";
  }
  return "?";
}

inline Role parse_role(const std::string& s) {
  if (s == "train") return Role::train;
  if (s == "source") return Role::source;
  if (s == "target") return Role::target;
  if (s == "motion") return Role::motion;
  throw std::invalid_argument("unknown sample role '" + s + "'");
}

struct SampleSpec {
  std::string id;
  std::uint64_t seed = 0;
  DomainTag domain;
  Role role = Role::train;
};

struct Fold {
  std::string name;
  std::vector<SampleSpec> samples;

  std::vector<SampleSpec> with_role(Role r) const {
    std::vector<SampleSpec> out;
    for (const auto& s : samples)
      if (s.role == r) out.push_back(s);
    return out;
  }
};

struct SplitManifest {
  Protocol protocol = Protocol::scanner_split;
  std::vector<Fold> folds;
};

struct SplitOptions {
  double target_fraction = 1.0 / 3.0;  // scanner-split: share of each center rendered as vendor B
  std::size_t holdout_per_center = 3;  // leave-one-center-out: source holdout per training center
  bool include_motion = true;          // scanner-split: motion-corrupted copies of the target seeds
  int motion_severity = 2;
};

/// Scanner-split: train on vendor A, test on vendor B. The source holdout
/// renders the target seeds as vendor A, so source/target differ only in
/// acquisition. Leave-one-center-out: one fold per center, holding that
/// center out of training entirely.
inline SplitManifest build_splits(std::size_t n_per_center, int centers, Protocol protocol,
                                  std::uint64_t seed, const SplitOptions& opt = {}) {
  if (centers < 2) throw std::invalid_argument("build_splits needs >= 2 centers");
  if (n_per_center < 1) throw std::invalid_argument("build_splits needs >= 1 sample per center");
  auto sample_seed = [&](int center, std::size_t i) {
    return mix_seed(seed, static_cast<std::uint64_t>(center) * 1000003ULL + i);
  };
  auto id = [](int center, std::size_t i, const std::string& suffix) {
    return "c" + std::to_string(center) + "_" + std::to_string(i) + suffix;
  };

  SplitManifest m;
  m.protocol = protocol;
  if (protocol == Protocol::scanner_split) {
    Fold f{"scanner", {}};
    const auto n_target = static_cast<std::size_t>(
        std::lround(opt.target_fraction * static_cast<double>(n_per_center)));
    if (n_target == 0 || n_target >= n_per_center) {
      throw std::invalid_argument("target fraction leaves an empty train or target set");
    }
    for (int c = 0; c < centers; ++c) {
      std::vector<std::size_t> order(n_per_center);
      for (std::size_t i = 0; i < n_per_center; ++i) order[i] = i;
      std::mt19937_64 rng(mix_seed(seed, 0x5c + static_cast<std::uint64_t>(c)));
      std::shuffle(order.begin(), order.end(), rng);
      for (std::size_t k = 0; k < n_per_center; ++k) {
        const std::size_t i = order[k];
        const auto s = sample_seed(c, i);
        if (k >= n_target) {
          f.samples.push_back({id(c, i, "_A"), s, {Vendor::A, c, Corruption::none, 0}, Role::train});
          continue;
        }
        f.samples.push_back({id(c, i, "_B"), s, {Vendor::B, c, Corruption::none, 0}, Role::target});
        f.samples.push_back({id(c, i, "_A"), s, {Vendor::A, c, Corruption::none, 0}, Role::source});
        if (opt.include_motion) {
          f.samples.push_back({id(c, i, "_A_motion"), s,
                               {Vendor::A, c, Corruption::motion, opt.motion_severity},
                               Role::motion});
        }
      }
    }
    m.folds.push_back(std::move(f));
    return m;
  }

  for (int held = 0; held < centers; ++held) {
    Fold f{"center" + std::to_string(held), {}};
    for (int c = 0; c < centers; ++c) {
      for (std::size_t i = 0; i < n_per_center; ++i) {
        f.samples.push_back({id(c, i, "_A"), sample_seed(c, i),
                             {Vendor::A, c, Corruption::none, 0},
                             c == held ? Role::target : Role::train});
      }
      if (c == held) continue;
      for (std::size_t i = 0; i < opt.holdout_per_center; ++i) {
        const std::size_t j = n_per_center + i;
        f.samples.push_back(
            {id(c, j, "_A"), sample_seed(c, j), {Vendor::A, c, Corruption::none, 0}, Role::source});
      }
    }
    m.folds.push_back(std::move(f));
  }
  return m;
}

}  // namespace calsam::synth
