#include "sagin/nn.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "sagin/binary_io.hpp"

namespace sagin::nn {

namespace {

Matrix activate(const Matrix& z, Activation act) {
    switch (act) {
        case Activation::Identity:
            return z;
        case Activation::Tanh:
            return z.array().tanh().matrix();
        case Activation::Relu:
            return z.cwiseMax(0.0);
    }
    return z;
}

// d out / d z expressed through the activation output.
void scale_by_derivative(Matrix& grad, const Matrix& out, Activation act) {
    switch (act) {
        case Activation::Identity:
            return;
        case Activation::Tanh:
            grad.array() *= 1.0 - out.array().square();
            return;
        case Activation::Relu:
            grad.array() *= (out.array() > 0.0).cast<double>();
            return;
    }
}

}  // namespace

DenseNet::DenseNet(std::vector<int> widths, Activation hidden, Activation output)
    : widths_(std::move(widths)), hidden_(hidden), output_(output) {
    if (widths_.size() < 2) {
        throw std::invalid_argument("DenseNet needs at least input and output widths");
    }
    Eigen::Index offset = 0;
    for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
        if (widths_[l] <= 0 || widths_[l + 1] <= 0) {
            throw std::invalid_argument("DenseNet widths must be positive");
        }
        offsets_.push_back(offset);
        offset += static_cast<Eigen::Index>(widths_[l + 1]) * (widths_[l] + 1);
    }
    offsets_.push_back(offset);
    params_ = Vector::Zero(offset);
}

void DenseNet::init(Rng& rng, double output_scale) {
    ++version_;
    for (int l = 0; l < layer_count(); ++l) {
        const int in = widths_[l];
        const int out = widths_[l + 1];
        const double limit = std::sqrt(6.0 / (in + out)) * (l + 1 == layer_count() ? output_scale : 1.0);
        std::uniform_real_distribution<double> dist(-limit, limit);
        const Eigen::Index start = offsets_[l];
        for (Eigen::Index i = 0; i < static_cast<Eigen::Index>(in) * out; ++i) {
            params_[start + i] = dist(rng);
        }
        params_.segment(start + static_cast<Eigen::Index>(in) * out, out).setZero();
    }
}

void DenseNet::set_params(const Vector& p) {
    if (p.size() != params_.size()) {
        throw std::invalid_argument("DenseNet::set_params: size mismatch");
    }
    ++version_;
    params_ = p;
}

Eigen::Map<const Matrix> DenseNet::weight(int layer) const {
    return {params_.data() + offsets_[layer], widths_[layer + 1], widths_[layer]};
}

Eigen::Map<const Vector> DenseNet::bias(int layer) const {
    const Eigen::Index w = static_cast<Eigen::Index>(widths_[layer + 1]) * widths_[layer];
    return {params_.data() + offsets_[layer] + w, widths_[layer + 1]};
}

void DenseNet::check_input(const Matrix& input) const {
    if (widths_.empty()) {
        throw std::logic_error("DenseNet used before construction");
    }
    if (input.rows() != widths_.front()) {
        throw std::invalid_argument("DenseNet input width " + std::to_string(input.rows()) +
                                    " does not match " + std::to_string(widths_.front()));
    }
}

Matrix DenseNet::forward(const Matrix& input) const {
    check_input(input);
    Matrix a = input;
    for (int l = 0; l < layer_count(); ++l) {
        Matrix z = weight(l) * a;
        z.colwise() += bias(l);
        a = activate(z, l + 1 == layer_count() ? output_ : hidden_);
    }
    return a;
}

Matrix DenseNet::forward_from_preactivation(const Matrix& z0) const {
    if (widths_.empty() || z0.rows() != widths_[1]) {
        throw std::invalid_argument("DenseNet::forward_from_preactivation: width mismatch");
    }
    Matrix a = activate(z0, layer_count() == 1 ? output_ : hidden_);
    for (int l = 1; l < layer_count(); ++l) {
        Matrix z = weight(l) * a;
        z.colwise() += bias(l);
        a = activate(z, l + 1 == layer_count() ? output_ : hidden_);
    }
    return a;
}

Matrix DenseNet::forward(const Matrix& input, GradientTape& tape) const {
    check_input(input);
    tape.net = this;
    tape.version = version_;
    tape.inputs.clear();
    tape.outputs.clear();
    Matrix a = input;
    for (int l = 0; l < layer_count(); ++l) {
        tape.inputs.push_back(a);
        Matrix z = weight(l) * a;
        z.colwise() += bias(l);
        a = activate(z, l + 1 == layer_count() ? output_ : hidden_);
        tape.outputs.push_back(a);
    }
    return a;
}

Gradients DenseNet::backward(const GradientTape& tape, const Matrix& grad_output) const {
    if (tape.net != this || tape.version != version_ ||
        static_cast<int>(tape.inputs.size()) != layer_count()) {
        throw std::logic_error("DenseNet::backward: stale or foreign tape");
    }
    const Matrix& out = tape.outputs.back();
    if (grad_output.rows() != out.rows() || grad_output.cols() != out.cols()) {
        throw std::invalid_argument("DenseNet::backward: gradient shape mismatch");
    }
    Gradients g;
    g.params = Vector::Zero(params_.size());
    Matrix delta = grad_output;
    for (int l = layer_count() - 1; l >= 0; --l) {
        scale_by_derivative(delta, tape.outputs[l], l + 1 == layer_count() ? output_ : hidden_);
        const int in = widths_[l];
        const int outw = widths_[l + 1];
        Eigen::Map<Matrix> gw(g.params.data() + offsets_[l], outw, in);
        gw.noalias() = delta * tape.inputs[l].transpose();
        g.params.segment(offsets_[l] + static_cast<Eigen::Index>(in) * outw, outw) =
            delta.rowwise().sum();
        delta = weight(l).transpose() * delta;
    }
    g.input = std::move(delta);
    return g;
}

AdamState make_adam_state(Eigen::Index size) {
    return {Vector::Zero(size), Vector::Zero(size), 0};
}

void adam_update(Vector& params, const Vector& grads, AdamState& state, const AdamConfig& cfg) {
    if (params.size() != grads.size() || state.m.size() != params.size() ||
        state.v.size() != params.size()) {
        throw std::invalid_argument("adam_update: shape mismatch");
    }
    ++state.step;
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grads;
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grads.cwiseProduct(grads);
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    params.array() -= cfg.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + cfg.eps);
}

double clip_global_norm(Vector& grads, double max_norm) {
    const double norm = grads.norm();
    if (norm > max_norm && norm > 0.0) {
        grads *= max_norm / norm;
    }
    return norm;
}

void write_net(std::ostream& out, const DenseNet& net) {
    io::write_magic(out, "SGNN");
    io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(net.widths().size()));
    for (int w : net.widths()) {
        io::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(w));
    }
    io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(net.hidden_activation()));
    io::write_le<std::uint8_t>(out, static_cast<std::uint8_t>(net.output_activation()));
    for (Eigen::Index i = 0; i < net.param_count(); ++i) {
        io::write_le<double>(out, net.params()[i]);
    }
}

void write_adam(std::ostream& out, const AdamState& s) {
    io::write_le<std::int64_t>(out, s.step);
    io::write_le<std::uint64_t>(out, static_cast<std::uint64_t>(s.m.size()));
    for (Eigen::Index i = 0; i < s.m.size(); ++i) io::write_le<double>(out, s.m[i]);
    for (Eigen::Index i = 0; i < s.v.size(); ++i) io::write_le<double>(out, s.v[i]);
}

AdamState read_adam(std::istream& in) {
    AdamState s;
    s.step = io::read_le<std::int64_t>(in);
    const auto n = io::read_le<std::uint64_t>(in);
    if (n > (1ULL << 32)) throw std::runtime_error("read_adam: bad optimizer size");
    s.m.resize(static_cast<Eigen::Index>(n));
    s.v.resize(static_cast<Eigen::Index>(n));
    for (Eigen::Index i = 0; i < s.m.size(); ++i) s.m[i] = io::read_le<double>(in);
    for (Eigen::Index i = 0; i < s.v.size(); ++i) s.v[i] = io::read_le<double>(in);
    return s;
}

DenseNet read_net(std::istream& in) {
    io::expect_magic(in, "SGNN");
    const auto count = io::read_le<std::uint32_t>(in);
    if (count < 2 || count > 64) {
        throw std::runtime_error("read_net: implausible layer count");
    }
    std::vector<int> widths;
    for (std::uint32_t i = 0; i < count; ++i) {
        widths.push_back(static_cast<int>(io::read_le<std::uint32_t>(in)));
    }
    const auto hidden = static_cast<Activation>(io::read_le<std::uint8_t>(in));
    const auto output = static_cast<Activation>(io::read_le<std::uint8_t>(in));
    DenseNet net(widths, hidden, output);
    Vector p(net.param_count());
    for (Eigen::Index i = 0; i < p.size(); ++i) {
        p[i] = io::read_le<double>(in);
    }
    net.set_params(p);
    return net;
}

}  // namespace sagin::nn
