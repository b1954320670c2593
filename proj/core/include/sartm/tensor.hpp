#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "sartm/config.hpp"
#include "sartm/error.hpp"
#include "sartm/rng.hpp"

SARTM_NS_BEGIN

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<Scalar> data;
  std::vector<Scalar> grad;  // empty until the first accumulation
  bool requires_grad = false;
  int32_t tape_node = -1;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  bool has_grad() const { return !grad.empty(); }
  std::vector<Scalar>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), Scalar(0));
    return grad;
  }
};

// Dense row-major tensor with shared storage. Copies are shallow; operators
// never mutate their inputs' data buffers, so tensors behave as values.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, Scalar value);
  static Tensor from_data(Shape shape, std::vector<Scalar> values);
  static Tensor scalar(Scalar value);
  // Uniform in [lo, hi) drawn component-wise from rng.
  static Tensor uniform(Shape shape, Rng& rng, double lo, double hi);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int64_t numel() const { return impl_->numel(); }

  const std::vector<Scalar>& data() const { return impl_->data; }
  // Mutable access is reserved for initialization and optimizer updates;
  // ops always allocate fresh outputs.
  std::vector<Scalar>& data_mut() { return impl_->data; }

  Scalar at(std::initializer_list<int64_t> index) const;
  Scalar value() const;  // single-element tensors

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    impl_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return impl_->has_grad(); }
  const std::vector<Scalar>& grad() const;
  std::vector<Scalar>& grad_mut() { return impl_->ensure_grad(); }
  void zero_grad() {
    if (impl_ && impl_->has_grad()) impl_->grad.assign(impl_->data.size(), 0);
  }

  int32_t tape_node() const { return impl_->tape_node; }

  // Reverse-mode sweep from this scalar over the active tape.
  void backward();

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Records one node per differentiable op. Nodes are replayed in reverse
// creation order; the tape is cleared after each backward pass.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  int32_t record(std::shared_ptr<TensorImpl> out, std::function<void()> backward);
  void run_backward(const Tensor& loss);
  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    std::shared_ptr<TensorImpl> out;
    std::function<void()> backward;
  };
  std::vector<Node> nodes_;
  Tape* prev_ = nullptr;
};

// Disables gradient recording within a scope (evaluation paths).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// True when a tape is active, recording is enabled, and any input requires
// gradient. Ops call this before registering a backward rule.
bool autograd_recording(std::initializer_list<const Tensor*> inputs);
// Marks `out` as requiring gradient and records its backward rule.
void autograd_record(Tensor& out, std::function<void()> backward);

SARTM_NS_END
