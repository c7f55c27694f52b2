#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "facet/errors.hpp"

namespace facet::ad {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

class Tape;

// Handle to a node on a tape. Cheap to copy; valid until the tape is cleared.
class Tensor {
public:
    Tensor() = default;

    const Shape& shape() const;
    std::size_t size() const;
    const std::vector<double>& values() const;
    const std::vector<double>& grad() const;
    bool requires_grad() const;
    bool valid() const { return tape_ != nullptr; }

    // Value of a single-element tensor.
    double scalar() const;

    int id() const { return id_; }
    Tape* tape() const { return tape_; }

private:
    friend class Tape;
    Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}
    Tape* tape_ = nullptr;
    int id_ = -1;
};

// One recorded operation (or leaf). `forward` recomputes values from the
// inputs, `backward` scatters the output gradient into the input gradients.
struct Node {
    Shape shape;
    std::shared_ptr<std::vector<double>> values;
    std::vector<double> grad; // allocated iff requires_grad
    bool requires_grad = false;
    std::vector<int> inputs;
    std::function<void(Tape&, int)> forward;
    std::function<void(Tape&, int)> backward;
    const char* op = "leaf";
};

// Reverse-mode tape. Construction order is the topological order: every
// node's inputs precede it. Single-threaded by design; one tape per fit
// iteration.
class Tape {
public:
    Tensor leaf(const Shape& shape, std::span<const double> values, bool requires_grad);
    Tensor leaf(const Shape& shape, std::vector<double>&& values, bool requires_grad);

    // Shares the storage; no copy. The buffer must stay immutable while any
    // tape referencing it is alive.
    Tensor constant(const Shape& shape, std::shared_ptr<std::vector<double>> values);
    Tensor constant(const Shape& shape, std::vector<double>&& values);
    Tensor scalar_const(double v);

    // Overwrites a leaf's values (finite-difference probing). The node must
    // be a leaf.
    void set_leaf_values(const Tensor& t, std::span<const double> values);

    // Seeds grad(root) += 1 and runs every recorded backward in reverse
    // order. Gradients accumulate across calls; zero_grad() resets them.
    void backward(const Tensor& root);
    void zero_grad();

    // Recomputes every non-leaf node's values in recording order. Writes
    // fresh buffers, so shared constant storage is never mutated.
    void replay();

    std::size_t num_nodes() const { return nodes_.size(); }
    Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

    void clear() { nodes_.clear(); }

    // Internal: used by op constructors.
    Tensor emplace(Node&& n);
    Tensor wrap(int id) { return Tensor(this, id); }

private:
    // deque: node references stay valid while the tape grows
    std::deque<Node> nodes_;
};

} // namespace facet::ad
