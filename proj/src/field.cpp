#include "gsh/field.hpp"

#include <cmath>
#include <string>

#include "gsh/error.hpp"

namespace gsh {

Field::Field(Lattice lattice, int channels, double fill)
    : lattice_(lattice), channels_(channels), data_(lattice.size() * channels, fill) {
  if (channels <= 0) throw DataError("field must have at least one channel");
}

Field::Field(Lattice lattice, int channels, std::vector<double> data)
    : lattice_(lattice), channels_(channels), data_(std::move(data)) {
  if (channels <= 0) throw DataError("field must have at least one channel");
  if (data_.size() != lattice_.size() * static_cast<std::size_t>(channels)) {
    throw DataError("field data length " + std::to_string(data_.size()) +
                    " does not match lattice " + lattice_.describe() + " x " +
                    std::to_string(channels));
  }
}

bool Field::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Field::fill(double value) {
  for (double& v : data_) v = value;
}

Field& Field::operator+=(const Field& other) {
  require_same_shape(*this, other, "field addition");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Field& Field::operator-=(const Field& other) {
  require_same_shape(*this, other, "field subtraction");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Field& Field::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Field operator+(Field a, const Field& b) { return a += b; }
Field operator-(Field a, const Field& b) { return a -= b; }
Field operator*(double s, Field a) { return a *= s; }

double dot(const Field& a, const Field& b) {
  require_same_shape(a, b, "dot product");
  const double* x = a.data();
  const double* y = b.data();
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += x[i] * y[i];
  return acc;
}

double norm(const Field& a) { return std::sqrt(dot(a, a)); }

void axpy(double alpha, const Field& x, Field& y) {
  require_same_shape(x, y, "axpy");
  const double* px = x.data();
  double* py = y.data();
  for (std::size_t i = 0; i < x.size(); ++i) py[i] += alpha * px[i];
}

void require_same_shape(const Field& a, const Field& b, const char* what) {
  if (!a.same_shape(b)) {
    throw DataError(std::string(what) + ": field shape mismatch (" + a.lattice().describe() +
                    "x" + std::to_string(a.channels()) + " vs " + b.lattice().describe() + "x" +
                    std::to_string(b.channels()) + ")");
  }
}

}  // namespace gsh
