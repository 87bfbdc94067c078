#pragma once

#include <complex>
#include <vector>

#include "gsh/lattice.hpp"

namespace gsh::detail {

using cplx = std::complex<double>;

/// In-place multi-dimensional DFT of `howmany` interleaved channels
/// (voxel-major, channels innermost). Unnormalised in both directions.
/// Plans are created once per shape under a lock and shared; execution is
/// thread-safe.
void fft_forward(std::vector<cplx>& data, const Lattice& lattice, int howmany);
void fft_backward(std::vector<cplx>& data, const Lattice& lattice, int howmany);

}  // namespace gsh::detail
