#include "sartm/tensor.hpp"

#include <sstream>

SARTM_NS_BEGIN

namespace {
thread_local Tape* g_active_tape = nullptr;
thread_local bool g_grad_enabled = true;
}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

Tensor Tensor::zeros(Shape shape) {
  auto impl = std::make_shared<TensorImpl>();
  int64_t n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<size_t>(n), Scalar(0));
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, Scalar value) {
  Tensor t = zeros(std::move(shape));
  for (auto& v : t.data_mut()) v = value;
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<Scalar> values) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("from_data: shape " + shape_str(shape) + " expects " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(Scalar value) { return from_data({1}, {value}); }

Tensor Tensor::uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor t = zeros(std::move(shape));
  for (auto& v : t.data_mut()) v = static_cast<Scalar>(rng.uniform(lo, hi));
  return t;
}

Scalar Tensor::at(std::initializer_list<int64_t> index) const {
  const Shape& s = impl_->shape;
  if (index.size() != s.size()) {
    throw ShapeError("at: index rank " + std::to_string(index.size()) +
                     " vs tensor rank " + std::to_string(s.size()));
  }
  int64_t flat = 0;
  size_t axis = 0;
  for (int64_t i : index) {
    flat = flat * s[axis] + i;
    ++axis;
  }
  return impl_->data[static_cast<size_t>(flat)];
}

Scalar Tensor::value() const {
  if (numel() != 1) {
    throw ContractError("value: tensor has " + std::to_string(numel()) +
                        " elements, expected 1");
  }
  return impl_->data[0];
}

const std::vector<Scalar>& Tensor::grad() const {
  if (!impl_->has_grad()) {
    throw ContractError("grad: no gradient has been accumulated");
  }
  return impl_->grad;
}

void Tensor::backward() {
  Tape* tape = Tape::active();
  if (!tape) throw ContractError("backward: no active tape");
  tape->run_backward(*this);
}

Tape::Tape() {
  prev_ = g_active_tape;
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

int32_t Tape::record(std::shared_ptr<TensorImpl> out,
                     std::function<void()> backward) {
  nodes_.push_back(Node{std::move(out), std::move(backward)});
  return static_cast<int32_t>(nodes_.size() - 1);
}

void Tape::run_backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_str(loss.shape()));
  }
  if (loss.tape_node() < 0) {
    throw ContractError("backward: loss is not on the active tape");
  }
  loss.impl()->ensure_grad()[0] = Scalar(1);
  for (size_t i = nodes_.size(); i-- > 0;) {
    // Nodes whose output never received gradient are unreachable from the
    // loss and are skipped.
    if (!nodes_[i].out->has_grad()) continue;
    nodes_[i].backward();
  }
  nodes_.clear();
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

bool grad_enabled() { return g_grad_enabled; }

bool autograd_recording(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active() || !g_grad_enabled) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void autograd_record(Tensor& out, std::function<void()> backward) {
  out.set_requires_grad(true);
  out.impl()->tape_node = Tape::active()->record(out.impl(), std::move(backward));
}

SARTM_NS_END
