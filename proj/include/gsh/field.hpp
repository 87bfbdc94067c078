#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "gsh/lattice.hpp"

namespace gsh {

/// Dense field on a lattice. Voxel-major storage with channels innermost:
/// element (voxel i, channel c) lives at data[i * channels + c].
///
/// The same type carries scalar fields (1 channel), vector fields (ndim
/// channels), categorical images and log-templates (K channels) and
/// per-voxel tensors (flattened blocks).
class Field {
 public:
  Field() = default;
  Field(Lattice lattice, int channels, double fill = 0.0);
  Field(Lattice lattice, int channels, std::vector<double> data);

  const Lattice& lattice() const { return lattice_; }
  int channels() const { return channels_; }
  std::size_t voxels() const { return lattice_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() & { return data_; }
  std::span<const double> values() const& { return data_; }
  // A span into a temporary would dangle (e.g. in a range-for).
  std::span<const double> values() && = delete;
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator()(std::size_t voxel, int channel) {
    return data_[voxel * channels_ + channel];
  }
  double operator()(std::size_t voxel, int channel) const {
    return data_[voxel * channels_ + channel];
  }
  std::span<double> voxel(std::size_t i) { return {data_.data() + i * channels_, static_cast<std::size_t>(channels_)}; }
  std::span<const double> voxel(std::size_t i) const {
    return {data_.data() + i * channels_, static_cast<std::size_t>(channels_)};
  }

  bool same_shape(const Field& other) const {
    return channels_ == other.channels_ && lattice_ == other.lattice_;
  }

  bool all_finite() const;
  void fill(double value);

  Field& operator+=(const Field& other);
  Field& operator-=(const Field& other);
  Field& operator*=(double s);

  friend bool operator==(const Field& a, const Field& b) {
    return a.same_shape(b) && a.data_ == b.data_;
  }

 private:
  Lattice lattice_;
  int channels_ = 0;
  std::vector<double> data_;
};

Field operator+(Field a, const Field& b);
Field operator-(Field a, const Field& b);
Field operator*(double s, Field a);

/// Euclidean inner product over every voxel and channel.
double dot(const Field& a, const Field& b);
double norm(const Field& a);
/// y += alpha * x
void axpy(double alpha, const Field& x, Field& y);

/// Throws DataError when shapes differ.
void require_same_shape(const Field& a, const Field& b, const char* what);

}  // namespace gsh
