#include "facet/tensor.hpp"

#include <numeric>
#include <sstream>

namespace facet::ad {

std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

const Shape& Tensor::shape() const { return tape_->node(id_).shape; }
std::size_t Tensor::size() const { return tape_->node(id_).values->size(); }
const std::vector<double>& Tensor::values() const { return *tape_->node(id_).values; }
const std::vector<double>& Tensor::grad() const { return tape_->node(id_).grad; }
bool Tensor::requires_grad() const { return tape_->node(id_).requires_grad; }

double Tensor::scalar() const {
    check(size() == 1, "Tensor::scalar: tensor has " + std::to_string(size()) + " elements");
    return (*tape_->node(id_).values)[0];
}

Tensor Tape::emplace(Node&& n) {
    if (n.requires_grad && n.grad.empty()) n.grad.assign(shape_size(n.shape), 0.0);
    nodes_.push_back(std::move(n));
    const int id = static_cast<int>(nodes_.size()) - 1;
    Node& self = nodes_.back();
    if (self.forward) self.forward(*this, id);
    return Tensor(this, id);
}

Tensor Tape::leaf(const Shape& shape, std::span<const double> values, bool requires_grad) {
    check(values.size() == shape_size(shape), "leaf: value count does not match shape " + shape_str(shape));
    Node n;
    n.shape = shape;
    n.values = std::make_shared<std::vector<double>>(values.begin(), values.end());
    n.requires_grad = requires_grad;
    return emplace(std::move(n));
}

Tensor Tape::leaf(const Shape& shape, std::vector<double>&& values, bool requires_grad) {
    check(values.size() == shape_size(shape), "leaf: value count does not match shape " + shape_str(shape));
    Node n;
    n.shape = shape;
    n.values = std::make_shared<std::vector<double>>(std::move(values));
    n.requires_grad = requires_grad;
    return emplace(std::move(n));
}

Tensor Tape::constant(const Shape& shape, std::shared_ptr<std::vector<double>> values) {
    check(values && values->size() == shape_size(shape),
          "constant: value count does not match shape " + shape_str(shape));
    Node n;
    n.shape = shape;
    n.values = std::move(values);
    n.requires_grad = false;
    return emplace(std::move(n));
}

Tensor Tape::constant(const Shape& shape, std::vector<double>&& values) {
    return constant(shape, std::make_shared<std::vector<double>>(std::move(values)));
}

Tensor Tape::scalar_const(double v) { return constant({1}, std::vector<double>{v}); }

void Tape::set_leaf_values(const Tensor& t, std::span<const double> values) {
    Node& n = node(t.id());
    check(!n.forward, "set_leaf_values: node is not a leaf");
    check(values.size() == n.values->size(), "set_leaf_values: size mismatch");
    n.values = std::make_shared<std::vector<double>>(values.begin(), values.end());
}

void Tape::backward(const Tensor& root) {
    check(root.tape() == this, "backward: root from a different tape");
    Node& r = node(root.id());
    check(shape_size(r.shape) == 1, "backward: root is not a scalar");
    if (!r.requires_grad) return; // constant-only graph: nothing to do

    // Each pass must propagate from a clean seed — re-running the closures on
    // already-accumulated grads would double-count interior nodes. Stash the
    // current grads, run the pass, then add the stash back so repeated calls
    // accumulate exactly additively.
    std::vector<std::vector<double>> stash(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        if (!n.grad.empty()) {
            stash[i] = std::move(n.grad);
            n.grad.assign(stash[i].size(), 0.0);
        }
    }
    r.grad[0] = 1.0;
    for (int id = root.id(); id >= 0; --id) {
        Node& n = nodes_[static_cast<std::size_t>(id)];
        if (n.requires_grad && n.backward) n.backward(*this, id);
    }
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        for (std::size_t j = 0; j < stash[i].size(); ++j) n.grad[j] += stash[i][j];
    }
}

void Tape::zero_grad() {
    for (Node& n : nodes_)
        if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

void Tape::replay() {
    for (std::size_t id = 0; id < nodes_.size(); ++id)
        if (nodes_[id].forward) nodes_[id].forward(*this, static_cast<int>(id));
}

} // namespace facet::ad
