#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include <Eigen/Core>

#include "sagin/random.hpp"

namespace sagin::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation : std::uint8_t { Identity = 0, Tanh = 1, Relu = 2 };

class DenseNet;

/// Forward intermediates of one batched pass. Only valid for the network
/// (and parameter version) that recorded it.
struct GradientTape {
    const DenseNet* net = nullptr;
    std::uint64_t version = 0;
    std::vector<Matrix> inputs;  // input of every layer
    std::vector<Matrix> outputs; // post-activation output of every layer
};

struct Gradients {
    Vector params;  // same layout as DenseNet::params(), summed over the batch
    Matrix input;   // d loss / d input, one column per sample
};

/// Fully connected network. Inputs and outputs are column-per-sample
/// matrices; all parameters live in one flat vector (per layer: W column-major,
/// then b).
class DenseNet {
public:
    DenseNet() = default;
    DenseNet(std::vector<int> widths, Activation hidden, Activation output = Activation::Identity);

    /// Uniform Glorot init; the last layer is further scaled by `output_scale`.
    void init(Rng& rng, double output_scale = 1.0);

    int input_width() const { return widths_.front(); }
    int output_width() const { return widths_.back(); }
    int layer_count() const { return static_cast<int>(widths_.size()) - 1; }
    const std::vector<int>& widths() const { return widths_; }
    Activation hidden_activation() const { return hidden_; }
    Activation output_activation() const { return output_; }
    Eigen::Index param_count() const { return params_.size(); }

    const Vector& params() const { return params_; }
    /// Mutable access invalidates outstanding tapes.
    Vector& mutable_params() {
        ++version_;
        return params_;
    }
    void set_params(const Vector& p);
    std::uint64_t version() const { return version_; }

    Matrix forward(const Matrix& input) const;
    Matrix forward(const Matrix& input, GradientTape& tape) const;

    /// Reverse pass for a tape recorded by this network. `grad_output` is
    /// d loss / d output with the same shape as the forward output.
    Gradients backward(const GradientTape& tape, const Matrix& grad_output) const;

    Eigen::Map<const Matrix> weight(int layer) const;
    Eigen::Map<const Vector> bias(int layer) const;

    /// Continues a forward pass from the first layer's pre-activation
    /// (W0 x + b0). Lets callers reuse W0 x across inputs that differ in a few
    /// coordinates.
    Matrix forward_from_preactivation(const Matrix& z0) const;

private:
    void check_input(const Matrix& input) const;

    std::vector<int> widths_;
    std::vector<Eigen::Index> offsets_;
    Activation hidden_ = Activation::Tanh;
    Activation output_ = Activation::Identity;
    Vector params_;
    std::uint64_t version_ = 0;
};

struct AdamConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    Vector m;
    Vector v;
    std::int64_t step = 0;
};

AdamState make_adam_state(Eigen::Index size);

/// Bias-corrected Adam step, in place.
void adam_update(Vector& params, const Vector& grads, AdamState& state, const AdamConfig& cfg);

/// Rescales `grads` so its L2 norm is at most max_norm; returns the norm before clipping.
double clip_global_norm(Vector& grads, double max_norm);

void write_net(std::ostream& out, const DenseNet& net);
void write_adam(std::ostream& out, const AdamState& state);
AdamState read_adam(std::istream& in);
DenseNet read_net(std::istream& in);

}  // namespace sagin::nn
