#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sscd/errors.hpp"

namespace sscd {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

template <class T>
class Tape;

namespace detail {

template <class T>
struct TensorData {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // empty until a backward pass touches this tensor
  Tape<T>* tape = nullptr;
  int node = -1;
  std::string name;
};

}  // namespace detail

// Dense row-major tensor; image-like data uses (N, C, H, W) order. Copies
// share storage, so a Tensor behaves as a handle. Gradients live next to the
// values and are managed by the tape that recorded the tensor.
template <class T>
class Tensor {
 public:
  Tensor() : d_(std::make_shared<detail::TensorData<T>>()) {}

  explicit Tensor(Shape shape, T fill = T(0))
      : d_(std::make_shared<detail::TensorData<T>>()) {
    d_->shape = std::move(shape);
    d_->values.assign(static_cast<size_t>(shape_numel(d_->shape)), fill);
  }

  Tensor(Shape shape, std::vector<T> values)
      : d_(std::make_shared<detail::TensorData<T>>()) {
    if (shape_numel(shape) != static_cast<int64_t>(values.size()))
      throw ShapeError("tensor: " + std::to_string(values.size()) +
                       " values do not fill shape " + shape_str(shape));
    d_->shape = std::move(shape);
    d_->values = std::move(values);
  }

  static Tensor scalar(T v) { return Tensor({1}, std::vector<T>{v}); }

  const Shape& shape() const { return d_->shape; }
  int rank() const { return static_cast<int>(d_->shape.size()); }
  int extent(int axis) const { return d_->shape[axis]; }
  int64_t numel() const { return static_cast<int64_t>(d_->values.size()); }

  T* data() { return d_->values.data(); }
  const T* data() const { return d_->values.data(); }
  std::vector<T>& values() { return d_->values; }
  const std::vector<T>& values() const { return d_->values; }

  T& operator[](int64_t i) { return d_->values[i]; }
  T operator[](int64_t i) const { return d_->values[i]; }

  // Rank-4 accessor.
  T& at(int n, int c, int y, int x) {
    const Shape& s = d_->shape;
    return d_->values[((static_cast<int64_t>(n) * s[1] + c) * s[2] + y) * s[3] + x];
  }
  T at(int n, int c, int y, int x) const {
    const Shape& s = d_->shape;
    return d_->values[((static_cast<int64_t>(n) * s[1] + c) * s[2] + y) * s[3] + x];
  }
  // Rank-3 accessor (planar images).
  T& at(int c, int y, int x) {
    const Shape& s = d_->shape;
    return d_->values[(static_cast<int64_t>(c) * s[1] + y) * s[2] + x];
  }
  T at(int c, int y, int x) const {
    const Shape& s = d_->shape;
    return d_->values[(static_cast<int64_t>(c) * s[1] + y) * s[2] + x];
  }

  T item() const {
    if (numel() != 1)
      throw ShapeError("item: tensor has shape " + shape_str(d_->shape));
    return d_->values[0];
  }

  Tensor clone() const {
    Tensor c(d_->shape, d_->values);
    c.d_->name = d_->name;
    return c;
  }

  // --- autodiff plumbing ---
  Tape<T>* tape() const { return d_->tape; }
  int node() const { return d_->node; }
  bool on_tape() const { return d_->tape != nullptr && d_->node >= 0; }

  bool has_grad() const { return !d_->grad.empty(); }
  std::vector<T>& grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->values.size(), T(0));
    return d_->grad;
  }
  const std::vector<T>& grad() const {
    if (d_->grad.empty())
      throw ShapeError("grad: no gradient recorded for '" + d_->name + "'");
    return d_->grad;
  }
  void zero_grad() { d_->grad.assign(d_->values.size(), T(0)); }

  const std::string& name() const { return d_->name; }
  void set_name(std::string n) { d_->name = std::move(n); }

  const std::shared_ptr<detail::TensorData<T>>& handle() const { return d_; }

 private:
  std::shared_ptr<detail::TensorData<T>> d_;
};

// Reverse-mode tape. One tape owns one forward graph; backward replays the
// recorded ops in reverse creation order, which is a topological order by
// construction. A tape is single-threaded; independent tapes on independent
// threads are fine. Destroying the tape detaches every tensor it touched.
template <class T>
class Tape {
 public:
  Tape() = default;
  ~Tape() { detach_all(); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a leaf (parameter or checked input). Idempotent on this tape.
  int watch(Tensor<T>& t) {
    auto& d = *t.handle();
    if (d.tape == this && d.node >= 0) return d.node;
    if (d.tape != nullptr && d.tape != this)
      throw ShapeError("watch: tensor '" + d.name + "' is attached to another tape");
    d.tape = this;
    d.node = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{{}, t.handle(), nullptr});
    return d.node;
  }

  // Records an op that produced `out`. `bwd` must add into the inputs' grads;
  // grad buffers are pre-sized before any rule runs.
  int record(std::vector<int> inputs, Tensor<T>& out, std::function<void()> bwd) {
    auto& d = *out.handle();
    d.tape = this;
    d.node = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{std::move(inputs), out.handle(), std::move(bwd)});
    return d.node;
  }

  // Reverse pass from a scalar loss. All tape tensors get zeroed grads first,
  // so leaves not reachable from the loss end with exact zeros and repeated
  // backward passes are bit-identical.
  void backward(const Tensor<T>& loss) {
    const auto& ld = *loss.handle();
    if (ld.tape != this || ld.node < 0)
      throw ShapeError("backward: loss is not on this tape");
    if (loss.numel() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " +
                       shape_str(loss.shape()));
    for (auto& n : nodes_) n.out->grad.assign(n.out->values.size(), T(0));

    std::vector<char> live(nodes_.size(), 0);
    std::vector<int> stack{ld.node};
    live[ld.node] = 1;
    while (!stack.empty()) {
      int i = stack.back();
      stack.pop_back();
      for (int j : nodes_[i].inputs)
        if (!live[j]) {
          live[j] = 1;
          stack.push_back(j);
        }
    }
    nodes_[ld.node].out->grad[0] = T(1);
    for (int i = ld.node; i >= 0; --i)
      if (live[i] && nodes_[i].bwd) nodes_[i].bwd();
  }

  void detach_all() {
    for (auto& n : nodes_) {
      if (n.out && n.out->tape == this) {
        n.out->tape = nullptr;
        n.out->node = -1;
      }
    }
    nodes_.clear();
  }

  int size() const { return static_cast<int>(nodes_.size()); }

 private:
  struct Node {
    std::vector<int> inputs;
    std::shared_ptr<detail::TensorData<T>> out;
    std::function<void()> bwd;
  };
  std::vector<Node> nodes_;
};

// The unique tape among op inputs, or nullptr when all inputs are plain
// values. Mixing tensors from two live tapes is an error.
template <class T>
Tape<T>* common_tape(std::initializer_list<const Tensor<T>*> ts) {
  Tape<T>* tape = nullptr;
  for (const Tensor<T>* t : ts) {
    if (!t->on_tape()) continue;
    if (tape == nullptr) tape = t->tape();
    else if (tape != t->tape())
      throw ShapeError("op inputs belong to two different tapes");
  }
  return tape;
}

template <class T>
std::vector<int> nodes_of(std::initializer_list<const Tensor<T>*> ts) {
  std::vector<int> r;
  for (const Tensor<T>* t : ts)
    if (t->on_tape()) r.push_back(t->node());
  return r;
}

template <class T>
void backward(const Tensor<T>& loss) {
  if (!loss.on_tape()) throw ShapeError("backward: loss is not on a tape");
  loss.tape()->backward(loss);
}

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace sscd
