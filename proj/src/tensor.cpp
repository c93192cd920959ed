#include "cpdnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace cpdnet {

std::string Shape::str() const {
  std::ostringstream os;
  os << n << "x" << c << "x" << h << "x" << w;
  return os.str();
}

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
  return full(s, 0.0f, requires_grad);
}

Tensor Tensor::full(const Shape& s, float value, bool requires_grad) {
  if (s.n <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0) {
    throw std::invalid_argument("Tensor: all shape dimensions must be positive, got " + s.str());
  }
  std::vector<float> values(static_cast<std::size_t>(s.numel()), value);
  return from_data(s, std::move(values), requires_grad);
}

Tensor Tensor::from_data(const Shape& s, std::vector<float> values, bool requires_grad) {
  if (s.n <= 0 || s.c <= 0 || s.h <= 0 || s.w <= 0) {
    throw std::invalid_argument("Tensor: all shape dimensions must be positive, got " + s.str());
  }
  if (static_cast<std::int64_t>(values.size()) != s.numel()) {
    throw std::invalid_argument("Tensor: data length " + std::to_string(values.size()) +
                                " does not match shape " + s.str());
  }
  Tensor t;
  t.impl_ = std::make_shared<detail::TensorImpl>();
  t.impl_->shape = s;
  t.impl_->data = std::move(values);
  t.impl_->requires_grad = requires_grad;
  return t;
}

void Tensor::zero_grad() const {
  if (impl_ && !impl_->grad.empty()) {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
  }
}

float& Tensor::at(int n, int c, int h, int w) const {
  const Shape& s = impl_->shape;
  return impl_->data[((static_cast<std::size_t>(n) * s.c + c) * s.h + h) * s.w + w];
}

float Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("Tensor::item: expected a scalar tensor, got shape " + shape().str());
  }
  return impl_->data[0];
}

Tensor Tensor::clone() const {
  return from_data(shape(), data(), false);
}

bool Tensor::all_finite() const {
  for (float v : impl_->data) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

namespace {
thread_local Tape* g_active_tape = nullptr;
}

Tape* Tape::active() { return g_active_tape; }

Tape::Scope::Scope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
Tape::Scope::~Scope() { g_active_tape = prev_; }

void Tape::backward(Tensor loss) {
  if (loss.numel() != 1) {
    throw std::invalid_argument("Tape::backward: loss must be scalar, got shape " + loss.shape().str());
  }
  loss.grad()[0] += 1.0f;
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) {
    (*it)();
  }
}

Parameter& ParamRegistry::add_parameter(const std::string& name, Tensor value) {
  if (find(name) != nullptr) {
    throw std::invalid_argument("ParamRegistry: duplicate parameter name '" + name + "'");
  }
  value.set_requires_grad(true);
  params_.push_back(Parameter{std::move(value), name});
  return params_.back();
}

Tensor& ParamRegistry::add_buffer(const std::string& name, Tensor value) {
  for (auto& b : buffers_) {
    if (b.name == name) {
      throw std::invalid_argument("ParamRegistry: duplicate buffer name '" + name + "'");
    }
  }
  value.set_requires_grad(false);
  buffers_.push_back(Parameter{std::move(value), name});
  return buffers_.back().value;
}

Parameter* ParamRegistry::find(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return &p;
  }
  for (auto& b : buffers_) {
    if (b.name == name) return &b;
  }
  return nullptr;
}

std::int64_t ParamRegistry::parameter_count() const {
  std::int64_t total = 0;
  for (const auto& p : params_) total += p.value.numel();
  return total;
}

void ParamRegistry::zero_grads() {
  for (auto& p : params_) p.value.zero_grad();
}

}  // namespace cpdnet
