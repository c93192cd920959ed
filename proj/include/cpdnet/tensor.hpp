#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace cpdnet {

// All feature maps are dense NCHW float32 arrays, row-major.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::int64_t numel() const {
    return static_cast<std::int64_t>(n) * c * h * w;
  }
  bool operator==(const Shape& o) const = default;
  std::string str() const;
};

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  std::vector<float> grad;  // allocated lazily, same length as data
  bool requires_grad = false;
  // Double-precision shadow of a scalar value, maintained only while the
  // 64-bit accumulation mode is active (used by oracle comparisons).
  double scalar64 = 0.0;
  bool has_scalar64 = false;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0f);
  }
};

}  // namespace detail

// 64-bit accumulation mode: while active, scalar-producing operations carry
// an exact double shadow alongside their fp32 storage. Storage stays fp32.
bool accum64_enabled();
class Accum64Scope {
 public:
  Accum64Scope();
  ~Accum64Scope();
  Accum64Scope(const Accum64Scope&) = delete;
  Accum64Scope& operator=(const Accum64Scope&) = delete;

 private:
  bool prev_;
};

// Value-semantic handle over shared storage. Copies alias the same buffer,
// which is what lets a Parameter and the layer holding it see one another's
// updates and accumulated gradients.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor full(const Shape& s, float value, bool requires_grad = false);
  static Tensor from_data(const Shape& s, std::vector<float> values,
                          bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::int64_t numel() const { return impl_->shape.numel(); }

  // Handle semantics: a const Tensor still refers to shared mutable storage,
  // so the accessors are const and return mutable references.
  std::vector<float>& data() const { return impl_->data; }

  bool requires_grad() const { return impl_ && impl_->requires_grad; }
  void set_requires_grad(bool v) const { impl_->requires_grad = v; }

  // Gradient buffer; allocated (zero-filled) on first access.
  std::vector<float>& grad() const {
    impl_->ensure_grad();
    return impl_->grad;
  }
  bool has_grad() const { return impl_ && !impl_->grad.empty(); }
  void zero_grad() const;

  // NCHW indexing.
  float& at(int n, int c, int h, int w) const;

  // Value of a 1x1x1x1 tensor.
  float item() const;

  // Deep copy of values (no grad, no graph history).
  Tensor clone() const;

  bool all_finite() const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  bool same_storage(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

struct Parameter {
  Tensor value;
  std::string name;
};

// Explicit tape of recorded operations. Forward ops push a backward closure
// while a tape is active on the current thread; backward() replays them in
// reverse. One tape per thread of execution, no higher-order gradients.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_fn) {
    ops_.push_back(std::move(backward_fn));
  }
  // Seeds d(loss)/d(loss) = 1 and runs all recorded backward rules in
  // reverse order. The loss must be a scalar (1x1x1x1) tensor.
  void backward(Tensor loss);

  void clear() { ops_.clear(); }
  std::size_t size() const { return ops_.size(); }

  static Tape* active();

  // RAII activation of a tape on the current thread.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

 private:
  std::vector<std::function<void()>> ops_;
};

// True when a tape is active and the tensor participates in the graph.
inline bool grad_enabled_for(const Tensor& t) {
  return Tape::active() != nullptr && t.requires_grad();
}

// Flat, ordered registry of named tensors backing a model: trainable
// parameters plus non-trainable state (batch-norm running statistics).
// Order is construction order, which keeps optimizers and checkpoints
// deterministic.
class ParamRegistry {
 public:
  Parameter& add_parameter(const std::string& name, Tensor value);
  Tensor& add_buffer(const std::string& name, Tensor value);

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<Parameter>& buffers() { return buffers_; }
  const std::vector<Parameter>& buffers() const { return buffers_; }

  Parameter* find(const std::string& name);

  std::int64_t parameter_count() const;
  void zero_grads();

 private:
  std::vector<Parameter> params_;
  std::vector<Parameter> buffers_;
};

}  // namespace cpdnet
