#pragma once

// Reverse-mode differentiation over a tape of recorded primitives.
//
// Every primitive stores its output and a backward rule that reads the
// output gradient and adds vector-Jacobian products into its inputs'
// gradients. backward() replays the tape once, newest entry first, so
// fan-out gradients accumulate before a node's own rule runs. A tape is
// confined to one thread.

#include "mone/tensor.hpp"

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

namespace mone {

class Tape;

/// Handle to one tape entry. Cheap to copy; valid while its tape lives.
class Var {
public:
    Var() = default;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    const Tensor& value() const;
    Tape& tape() const { return *tape_; }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Tape {
public:
    /// Receives the gradient of this entry's output; accumulates into input grads.
    using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Non-differentiable input.
    Var constant(Tensor value);
    /// Parameter leaf referencing `value` (which must outlive the tape). When
    /// `grad_sink` is set, backward() adds this leaf's gradient into it.
    Var leaf(const Tensor& value, Tensor* grad_sink);
    /// Owned leaf whose gradient is readable through grad() after backward().
    Var variable(Tensor value);

    /// Records a primitive. The backward rule is dropped when no input needs a gradient.
    Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

    const Tensor& value(std::size_t id) const;
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    bool requires_grad(Var v) const { return requires_grad(v.id()); }

    /// Gradient buffer of an entry, zero-allocated on first access.
    Tensor& grad(std::size_t id);
    Tensor& grad(Var v) { return grad(v.id()); }
    bool has_grad(std::size_t id) const { return nodes_[id].has_grad; }

    /// Seeds d(root) with ones (or `seed`) and replays the tape.
    void backward(Var root);
    void backward(Var root, const Tensor& seed);

    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor owned;
        const Tensor* ref = nullptr;
        Tensor grad;
        bool has_grad = false;
        bool requires_grad = false;
        Tensor* sink = nullptr;
        BackwardFn backward;
    };

    std::deque<Node> nodes_;
};

// Differentiable primitives. All inputs must live on the same tape.

Var matmul(Var a, Var b);
/// a·bᵀ
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
/// m×n plus a length-n (or 1×n) bias broadcast over rows.
Var add_row_bias(Var a, Var bias);
Var scale(Var a, double s);
/// Row i of `a` (m×n) multiplied by gain[i] (gain is m×1 or length m).
Var scale_rows(Var a, Var gain);
/// alpha·r + 1, elementwise; alpha is a single-element tensor.
Var affine_gain(Var r, Var alpha);
Var row_softmax(Var x);
Var layer_norm_rows(Var x, Var gamma, Var beta, double eps);
Var gelu(Var x);
Var slice_cols(Var a, std::size_t begin, std::size_t end);
Var concat_cols(std::span<const Var> parts);
/// out[i] = a[i, index[i]] as an m×1 column.
Var gather_cols(Var a, std::span<const std::size_t> index);
/// Mean over rows: m×n -> 1×n.
Var mean_rows(Var a);
/// Sum of all elements as a scalar.
Var sum(Var a);
/// Mean softmax cross-entropy of a 1×K logits row against a class label.
Var softmax_cross_entropy(Var logits, std::size_t label);

} // namespace mone
