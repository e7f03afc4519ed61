#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "emrx/error.hpp"

namespace emrx {

inline std::string shape_to_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename S>
struct TensorImpl {
  std::vector<int> shape;
  std::vector<S> data;
  std::vector<S> grad;  // empty until a backward pass touches it
  bool requires_grad = false;
  std::uint32_t version = 0;
};

// Dense row-major n-dimensional array with value semantics over a shared
// buffer. Copies are cheap handles; the data itself is treated as immutable
// once an operation has been recorded on a tape.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  explicit Tensor(std::vector<int> shape) {
    impl_ = std::make_shared<TensorImpl<S>>();
    impl_->shape = std::move(shape);
    impl_->data.assign(checked_numel(impl_->shape), S(0));
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int> shape, S value) {
    Tensor t(std::move(shape));
    std::fill(t.impl_->data.begin(), t.impl_->data.end(), value);
    return t;
  }

  static Tensor from_data(std::vector<int> shape, std::vector<S> values) {
    Tensor t;
    t.impl_ = std::make_shared<TensorImpl<S>>();
    t.impl_->shape = std::move(shape);
    if (static_cast<std::int64_t>(values.size()) != checked_numel(t.impl_->shape)) {
      throw std::invalid_argument("tensor data length " + std::to_string(values.size()) +
                                  " does not match shape " + shape_to_string(t.impl_->shape));
    }
    t.impl_->data = std::move(values);
    return t;
  }

  static Tensor scalar(S value) { return from_data({}, {value}); }

  bool defined() const { return impl_ != nullptr; }

  const std::vector<int>& shape() const { return impl_->shape; }

  int dim(int i) const { return impl_->shape.at(static_cast<std::size_t>(i)); }

  int rank() const { return static_cast<int>(impl_->shape.size()); }

  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->data.size()); }

  const S* data() const { return impl_->data.data(); }

  // Mutable access bumps the version so a tape can detect tensors that were
  // modified between recording and backward.
  S* mutable_data() {
    ++impl_->version;
    return impl_->data.data();
  }

  std::uint32_t version() const { return impl_->version; }

  bool requires_grad() const { return impl_->requires_grad; }

  Tensor& set_requires_grad(bool value) {
    impl_->requires_grad = value;
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }

  const S* grad_data() const { return impl_->grad.data(); }

  S grad_at(std::int64_t i) const { return impl_->grad.at(static_cast<std::size_t>(i)); }

  // Allocates a zero gradient buffer on first use.
  std::vector<S>& ensure_grad() {
    if (impl_->grad.empty()) {
      impl_->grad.assign(impl_->data.size(), S(0));
    }
    return impl_->grad;
  }

  void zero_grad() { impl_->grad.clear(); }

  S item() const {
    if (numel() != 1) {
      throw std::invalid_argument("item() on tensor of " + std::to_string(numel()) + " elements");
    }
    return impl_->data[0];
  }

  S at(std::initializer_list<int> idx) const {
    return impl_->data[static_cast<std::size_t>(flat_index(idx))];
  }

  std::int64_t flat_index(std::initializer_list<int> idx) const {
    if (static_cast<int>(idx.size()) != rank()) {
      throw std::invalid_argument("index rank mismatch");
    }
    std::int64_t flat = 0;
    int d = 0;
    for (int i : idx) {
      const int extent = impl_->shape[static_cast<std::size_t>(d)];
      if (i < 0 || i >= extent) throw std::invalid_argument("index out of bounds");
      flat = flat * extent + i;
      ++d;
    }
    return flat;
  }

  Tensor clone() const {
    Tensor t = from_data(impl_->shape, impl_->data);
    t.impl_->requires_grad = impl_->requires_grad;
    return t;
  }

  bool all_finite() const {
    for (S v : impl_->data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  const std::shared_ptr<TensorImpl<S>>& impl() const { return impl_; }

 private:
  static std::int64_t checked_numel(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int e : shape) {
      if (e <= 0) throw std::invalid_argument("non-positive extent in shape " + shape_to_string(shape));
      n *= e;
    }
    return n;
  }

  std::shared_ptr<TensorImpl<S>> impl_;
};

template <typename S>
void throw_if_not_finite(const Tensor<S>& t, const std::string& context) {
  if (!t.all_finite()) {
    throw NumericError("non-finite value in " + context);
  }
}

// Reverse-mode tape. Operations append nodes in execution order; backward
// replays them in reverse, accumulating gradients additively into every
// tensor that requires them. Gradient buffers of intermediate results are
// released as soon as their node has run, so only leaves keep gradients.
template <typename S>
class Tape {
 public:
  void record(const Tensor<S>& output, std::vector<Tensor<S>> inputs, std::function<void()> backward) {
    Node node;
    node.output = output.impl();
    node.output_version = output.version();
    node.inputs.reserve(inputs.size());
    for (const Tensor<S>& in : inputs) {
      node.inputs.emplace_back(in.impl(), in.version());
    }
    node.fn = std::move(backward);
    nodes_.push_back(std::move(node));
  }

  std::size_t size() const { return nodes_.size(); }

  void backward(const Tensor<S>& loss) {
    if (!loss.defined() || loss.numel() != 1) {
      throw std::invalid_argument("backward requires a scalar loss");
    }
    bool recorded = false;
    for (const Node& node : nodes_) {
      if (node.output == loss.impl()) {
        recorded = true;
        break;
      }
    }
    if (!recorded) {
      throw std::invalid_argument("loss tensor was not produced while this tape was recording");
    }
    loss.impl()->grad.assign(1, S(1));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      check_version(it->output, it->output_version);
      for (const auto& [impl, version] : it->inputs) {
        check_version(impl, version);
      }
      if (!it->output->grad.empty()) {
        it->fn();
        // Every consumer of this output was recorded later and has already
        // run, so its gradient is no longer needed.
        it->output->grad.clear();
        it->output->grad.shrink_to_fit();
      }
    }
  }

 private:
  struct Node {
    std::shared_ptr<TensorImpl<S>> output;
    std::uint32_t output_version;
    std::vector<std::pair<std::shared_ptr<TensorImpl<S>>, std::uint32_t>> inputs;
    std::function<void()> fn;
  };

  static void check_version(const std::shared_ptr<TensorImpl<S>>& impl, std::uint32_t version) {
    if (impl->version != version) {
      throw std::runtime_error("tensor was mutated after being recorded on the tape");
    }
  }

  std::vector<Node> nodes_;
};

}  // namespace emrx
