#include "gsh/lattice.hpp"

#include <cmath>
#include <sstream>

#include "gsh/error.hpp"

namespace gsh {

Lattice::Lattice(std::vector<int> extents, std::vector<double> spacing) {
  if (extents.size() != 2 && extents.size() != 3) {
    throw DataError("lattice must be 2D or 3D, got " + std::to_string(extents.size()) + " extents");
  }
  if (!spacing.empty() && spacing.size() != extents.size()) {
    throw DataError("voxel_size length does not match lattice dimensionality");
  }
  ndim = static_cast<int>(extents.size());
  for (int k = 0; k < ndim; ++k) {
    dims[k] = extents[k];
    voxel_size[k] = spacing.empty() ? 1.0 : spacing[k];
  }
  validate();
}

void Lattice::validate() const {
  if (ndim != 2 && ndim != 3) throw DataError("lattice ndim must be 2 or 3");
  for (int k = 0; k < ndim; ++k) {
    if (dims[k] < 4) {
      throw DataError("lattice extent " + std::to_string(dims[k]) + " on axis " +
                      std::to_string(k) + " is below the minimum of 4");
    }
    if (!(voxel_size[k] > 0.0) || !std::isfinite(voxel_size[k])) {
      throw DataError("voxel size must be positive and finite");
    }
  }
  for (int k = ndim; k < 3; ++k) {
    if (dims[k] != 1) throw DataError("unused lattice axes must have extent 1");
  }
}

std::string Lattice::describe() const {
  std::ostringstream os;
  for (int k = 0; k < ndim; ++k) os << (k ? "x" : "") << dims[k];
  return os.str();
}

}  // namespace gsh
