#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mutr/errors.hpp"
#include "mutr/tensor.hpp"

namespace mutr {

// Recorded forward pass. Each node keeps the operation kind, the identities of
// its input/output storages and a closure holding whatever activations its
// backward needs. A tape serves exactly one forward/backward pair and is
// confined to a single thread.
template <typename T>
class TapeT {
public:
    struct Node {
        const char* kind;
        std::vector<std::shared_ptr<TensorImplT<T>>> inputs;
        std::shared_ptr<TensorImplT<T>> output;
        std::function<void()> backward;
    };

    void record(const char* kind, std::vector<TensorT<T>> inputs, const TensorT<T>& output,
                std::function<void()> backward) {
        Node node;
        node.kind = kind;
        node.inputs.reserve(inputs.size());
        for (const auto& t : inputs) node.inputs.push_back(t.impl_ptr());
        node.output = output.impl_ptr();
        node.backward = std::move(backward);
        nodes_.push_back(std::move(node));
    }

    std::size_t size() const { return nodes_.size(); }
    const Node& node(std::size_t i) const { return nodes_[i]; }

    void clear() { nodes_.clear(); }

    // Seeds d(loss)/d(loss) = 1 and replays the recorded nodes in reverse.
    // Afterwards every requires_grad tensor that appears on the tape has a
    // populated gradient buffer; tensors the loss does not reach keep zeros.
    void backward(const TensorT<T>& loss) {
        if (loss.numel() != 1) {
            throw ArgumentError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
        }
        for (auto& node : nodes_) {
            for (auto& in : node.inputs) {
                if (in->requires_grad && in->grad.empty()) in->grad.assign(in->data.size(), T(0));
            }
            if (node.output->requires_grad && node.output->grad.empty()) {
                node.output->grad.assign(node.output->data.size(), T(0));
            }
        }
        auto* seed = loss.impl();
        if (seed->grad.empty()) seed->grad.assign(seed->data.size(), T(0));
        seed->grad[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            it->backward();
        }
    }

private:
    std::vector<Node> nodes_;
};

using Tape = TapeT<float>;

// Free-function spelling used throughout: backward(loss, tape).
template <typename T>
void backward(const TensorT<T>& loss, TapeT<T>& tape) {
    tape.backward(loss);
}

}  // namespace mutr
