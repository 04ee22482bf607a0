#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace calsam {

/// Grid extents, x fastest in memory.
struct Extents {
  std::size_t nx = 0;
  std::size_t ny = 0;
  std::size_t nz = 0;

  std::size_t voxels() const { return nx * ny * nz; }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return x + nx * (y + ny * z);
  }
  bool operator==(const Extents&) const = default;
};

inline std::string to_string(const Extents& e) {
  return std::to_string(e.nx) + "x" + std::to_string(e.ny) + "x" + std::to_string(e.nz);
}

using Spacing = std::array<double, 3>;

/// Voxel coordinate.
struct Voxel {
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t z = 0;
  bool operator==(const Voxel&) const = default;
};

/// Scalar intensity volume.
struct Volume3D {
  Extents dims;
  Spacing spacing{1.0, 1.0, 1.0};
  std::vector<float> data;

  Volume3D() = default;
  Volume3D(Extents e, Spacing s = {1.0, 1.0, 1.0})
      : dims(e), spacing(s), data(e.voxels(), 0.0f) {}

  float& at(std::size_t x, std::size_t y, std::size_t z) { return data[dims.index(x, y, z)]; }
  float at(std::size_t x, std::size_t y, std::size_t z) const { return data[dims.index(x, y, z)]; }
};

/// Binary label grid.
struct SegMask {
  Extents dims;
  std::vector<std::uint8_t> labels;

  SegMask() = default;
  explicit SegMask(Extents e) : dims(e), labels(e.voxels(), 0) {}

  std::uint8_t at(std::size_t x, std::size_t y, std::size_t z) const {
    return labels[dims.index(x, y, z)];
  }
  std::size_t foreground() const {
    std::size_t n = 0;
    for (auto v : labels) n += v != 0;
    return n;
  }
  bool operator==(const SegMask&) const = default;
};

enum class Vendor { A, B };
enum class Corruption { none, motion };

inline std::string to_string(Vendor v) { return v == Vendor::A ? "A" : "B"; }
inline std::string to_string(Corruption c) { return c == Corruption::none ? "none" : "motion"; }

inline Vendor parse_vendor(const std::string& s) {
  if (s == "A") return Vendor::A;
  if (s == "B") return Vendor::B;
  throw std::invalid_argument("unknown vendor '" + s + "'");
}

inline Corruption parse_corruption(const std::string& s) {
  if (s == "none") return Corruption::none;
  if (s == "motion") return Corruption::motion;
  throw std::invalid_argument("unknown corruption '" + s + "'");
}

/// Acquisition domain of a sample. Fixed at generation time.
struct DomainTag {
  Vendor vendor = Vendor::A;
  int center = 0;
  Corruption corruption = Corruption::none;
  int severity = 0;  // motion severity, 0 when uncorrupted

  bool operator==(const DomainTag&) const = default;
};

struct Box {
  Voxel lo;
  Voxel hi;  // inclusive
  bool operator==(const Box&) const = default;
};

/// Point prompts plus the mask's bounding box.
struct Prompt {
  Voxel foreground;
  Voxel background;
  Box box;
  double gaussian_sigma = 2.0;  // mm
};

}  // namespace calsam
