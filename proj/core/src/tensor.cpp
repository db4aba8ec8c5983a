#include "scenforge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>

namespace scenforge::nn {

namespace {

// Buffers bucketed by exact element count. Tape-driven workloads request the
// same sizes over and over, so exact matching recycles nearly everything.
struct Pool {
  std::unordered_map<std::size_t, std::vector<double*>> buckets;
  std::size_t held = 0;                               // doubles currently parked
  static constexpr std::size_t kMaxHeld = 1u << 26;   // cap at 512 MB

  ~Pool() {
    for (auto& [n, list] : buckets)
      for (double* p : list) ::operator delete[](p, std::align_val_t{64});
  }
};

Pool& pool() {
  thread_local Pool p;
  return p;
}

}  // namespace

double* pool_take(std::size_t n) {
  auto& p = pool();
  auto it = p.buckets.find(n);
  if (it != p.buckets.end() && !it->second.empty()) {
    double* buf = it->second.back();
    it->second.pop_back();
    p.held -= n;
    return buf;
  }
  return static_cast<double*>(::operator new[](n * sizeof(double), std::align_val_t{64}));
}

void pool_give(double* ptr, std::size_t n) noexcept {
  auto& p = pool();
  if (p.held + n > Pool::kMaxHeld) {
    ::operator delete[](ptr, std::align_val_t{64});
    return;
  }
  p.buckets[n].push_back(ptr);
  p.held += n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

Tensor::Tensor(Shape shape, Uninit) : shape_(std::move(shape)), data_(shape_numel(shape_)) {
  for (std::size_t d : shape_) {
    if (d == 0) throw std::invalid_argument("Tensor: zero extent in shape " + shape_str(shape_));
  }
}

Tensor::Tensor(Shape shape) : Tensor(std::move(shape), Uninit{}) {
  std::fill(data_.begin(), data_.end(), 0.0);
}

Tensor Tensor::uninit(Shape shape) { return Tensor(std::move(shape), Uninit{}); }

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)) {
  if (shape_numel(shape_) != values.size()) {
    throw std::invalid_argument("Tensor: shape " + shape_str(shape_) + " does not match " +
                                std::to_string(values.size()) + " values");
  }
  data_.assign(values.begin(), values.end());
}

Tensor::Tensor(Shape shape, ValueBuffer values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (shape_numel(shape_) != data_.size()) {
    throw std::invalid_argument("Tensor: shape " + shape_str(shape_) + " does not match " +
                                std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

Tensor Tensor::full(Shape shape, double v) {
  Tensor t = uninit(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), v);
  return t;
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw std::logic_error("Tensor::rows: rank-" + std::to_string(rank()) + " tensor");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw std::logic_error("Tensor::cols: rank-" + std::to_string(rank()) + " tensor");
  return shape_[1];
}

double& Tensor::at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
double Tensor::at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    throw std::invalid_argument("Tensor::reshaped: " + shape_str(shape_) + " -> " + shape_str(shape) +
                                " changes element count");
  }
  return Tensor(std::move(shape), data_);
}

}  // namespace scenforge::nn
