#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

namespace gsh {

/// Regular 2D or 3D voxel lattice with circulant (wrap-around) topology.
///
/// Voxels are indexed x-fastest: i = x + nx * (y + ny * z). For 2D lattices
/// the third extent is fixed to 1 and never touched by any operator.
struct Lattice {
  int ndim = 2;
  std::array<int, 3> dims{1, 1, 1};
  std::array<double, 3> voxel_size{1.0, 1.0, 1.0};

  Lattice() = default;
  Lattice(std::vector<int> extents, std::vector<double> spacing = {});

  std::size_t size() const {
    return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
           static_cast<std::size_t>(dims[2]);
  }

  std::size_t index(int x, int y, int z = 0) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(dims[1]) * z);
  }

  std::array<int, 3> coords(std::size_t i) const {
    const auto nx = static_cast<std::size_t>(dims[0]);
    const auto ny = static_cast<std::size_t>(dims[1]);
    return {static_cast<int>(i % nx), static_cast<int>((i / nx) % ny),
            static_cast<int>(i / (nx * ny))};
  }

  /// Throws DataError unless dims and spacing satisfy the lattice invariants.
  void validate() const;

  std::vector<int> extents() const { return {dims.begin(), dims.begin() + ndim}; }
  std::vector<double> spacing() const {
    return {voxel_size.begin(), voxel_size.begin() + ndim};
  }

  std::string describe() const;

  friend bool operator==(const Lattice& a, const Lattice& b) {
    return a.ndim == b.ndim && a.dims == b.dims && a.voxel_size == b.voxel_size;
  }
};

/// Positive modulus for circulant indexing.
inline int wrap_index(int i, int n) {
  const int r = i % n;
  return r < 0 ? r + n : r;
}

}  // namespace gsh
