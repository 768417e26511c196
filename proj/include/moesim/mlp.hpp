#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "moesim/random.hpp"

namespace moesim {

// Fully connected multi-label classifier:
//   [Linear -> BatchNorm -> ReLU -> Dropout] x hidden, then Linear -> logits.
// Activations are column-major batches: features x batch.
//
// Parameters live in one flat list of dense tensors so optimizers, gradient
// checks and serializers can walk them uniformly. For hidden layer h the tensors
// at 4h..4h+3 are weight, bias, bn_gamma, bn_beta; the output layer's weight and
// bias come last.
template <class Scalar>
class BasicExpertMlp {
public:
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

    static constexpr Scalar kBatchNormEps = Scalar(1e-5);
    static constexpr Scalar kBatchNormMomentum = Scalar(0.1);

    enum class Mode { Train, Eval };

    struct ForwardOptions {
        bool batch_statistics = false;  // normalize with the batch's own mean/var
        bool update_running = false;    // fold batch statistics into running estimates
        bool dropout = false;
        Rng* rng = nullptr;             // required when dropout is on
    };

    // Intermediate values needed by backward().
    struct Tape {
        Matrix input;
        std::vector<Matrix> layer_input;  // input to each hidden Linear
        std::vector<Matrix> xhat;         // normalized pre-activations
        std::vector<Vector> inv_std;
        std::vector<Matrix> pre_relu;     // BN output
        std::vector<Matrix> dropout_mask; // already scaled by 1/(1-p); empty when off
        Matrix last_hidden;
    };

    BasicExpertMlp() = default;

    BasicExpertMlp(int input_dim, std::vector<int> hidden, int output_dim, Scalar dropout_rate, std::uint64_t seed)
        : input_dim_(input_dim), output_dim_(output_dim), hidden_(std::move(hidden)), dropout_rate_(dropout_rate) {
        if (input_dim <= 0 || output_dim <= 0) throw std::invalid_argument("mlp dimensions must be positive");
        if (!(dropout_rate >= 0 && dropout_rate < 1)) throw std::invalid_argument("dropout rate must lie in [0, 1)");
        Rng rng(seed);
        int fan_in = input_dim;
        auto dense = [&](int out, int in) {
            // Same bound the common framework default uses for Linear layers: U(-1/sqrt(in), 1/sqrt(in)).
            const Scalar bound = Scalar(1) / std::sqrt(Scalar(in));
            Matrix w(out, in);
            for (Eigen::Index j = 0; j < w.cols(); ++j)
                for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = Scalar(rng.uniform(-bound, bound));
            Matrix b(out, 1);
            for (Eigen::Index i = 0; i < b.rows(); ++i) b(i, 0) = Scalar(rng.uniform(-bound, bound));
            params_.push_back(std::move(w));
            params_.push_back(std::move(b));
        };
        for (int width : hidden_) {
            if (width <= 0) throw std::invalid_argument("hidden widths must be positive");
            dense(width, fan_in);
            params_.push_back(Matrix::Ones(width, 1));
            params_.push_back(Matrix::Zero(width, 1));
            running_mean_.push_back(Vector::Zero(width));
            running_var_.push_back(Vector::Ones(width));
            fan_in = width;
        }
        dense(output_dim, fan_in);
    }

    int input_dim() const { return input_dim_; }
    int output_dim() const { return output_dim_; }
    const std::vector<int>& hidden_widths() const { return hidden_; }
    int num_hidden() const { return static_cast<int>(hidden_.size()); }
    Scalar dropout_rate() const { return dropout_rate_; }

    Mode mode() const { return mode_; }
    void train() { mode_ = Mode::Train; }
    void eval() { mode_ = Mode::Eval; }

    std::vector<Matrix>& parameters() { return params_; }
    const std::vector<Matrix>& parameters() const { return params_; }
    std::vector<Vector>& running_mean() { return running_mean_; }
    const std::vector<Vector>& running_mean() const { return running_mean_; }
    std::vector<Vector>& running_var() { return running_var_; }
    const std::vector<Vector>& running_var() const { return running_var_; }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += static_cast<std::size_t>(p.size());
        return n;
    }

    Matrix& weight(int layer) { return params_[index(layer)]; }
    Matrix& bias(int layer) { return params_[index(layer) + 1]; }
    const Matrix& weight(int layer) const { return params_[index(layer)]; }
    const Matrix& bias(int layer) const { return params_[index(layer) + 1]; }
    Matrix& bn_gamma(int h) { return params_[4 * static_cast<std::size_t>(h) + 2]; }
    Matrix& bn_beta(int h) { return params_[4 * static_cast<std::size_t>(h) + 3]; }
    const Matrix& bn_gamma(int h) const { return params_[4 * static_cast<std::size_t>(h) + 2]; }
    const Matrix& bn_beta(int h) const { return params_[4 * static_cast<std::size_t>(h) + 3]; }

    // Mode-driven forward: Train uses batch statistics, updates running stats and
    // applies dropout; Eval is deterministic.
    Matrix logits(const Matrix& x, Rng* rng = nullptr, Tape* tape = nullptr) {
        ForwardOptions opt;
        if (mode_ == Mode::Train) opt = {true, true, dropout_rate_ > 0, rng};
        return forward(x, opt, tape);
    }

    Matrix logits(const Matrix& x) const {
        if (mode_ == Mode::Train) throw std::logic_error("const forward requires eval mode");
        return forward_eval(x);
    }

    Matrix predict_proba(const Matrix& x) const { return sigmoid(logits(x)); }

    Matrix forward(const Matrix& x, const ForwardOptions& opt, Tape* tape = nullptr) {
        check_input(x);
        if (opt.batch_statistics && x.cols() < 2) throw std::invalid_argument("batch statistics need a batch of >= 2");
        if (opt.dropout && opt.rng == nullptr) throw std::invalid_argument("dropout requires an rng");
        if (tape) {
            *tape = Tape{};
            tape->input = x;
        }
        Matrix a = x;
        const auto batch = static_cast<Scalar>(x.cols());
        for (int h = 0; h < num_hidden(); ++h) {
            if (tape) tape->layer_input.push_back(a);
            Matrix z = weight(h) * a;
            z.colwise() += bias(h).col(0);
            Vector mean, var;
            if (opt.batch_statistics) {
                mean = z.rowwise().mean();
                var = (z.colwise() - mean).array().square().rowwise().mean();
                if (opt.update_running) {
                    auto& rm = running_mean_[static_cast<std::size_t>(h)];
                    auto& rv = running_var_[static_cast<std::size_t>(h)];
                    rm = (Scalar(1) - kBatchNormMomentum) * rm + kBatchNormMomentum * mean;
                    rv = (Scalar(1) - kBatchNormMomentum) * rv + kBatchNormMomentum * var * (batch / (batch - 1));
                }
            } else {
                mean = running_mean_[static_cast<std::size_t>(h)];
                var = running_var_[static_cast<std::size_t>(h)];
            }
            Vector inv_std = (var.array() + kBatchNormEps).rsqrt();
            Matrix xhat = (z.colwise() - mean).array().colwise() * inv_std.array();
            Matrix y = (xhat.array().colwise() * bn_gamma(h).col(0).array()).colwise() + bn_beta(h).col(0).array();
            a = y.cwiseMax(Scalar(0));
            Matrix mask;
            if (opt.dropout && dropout_rate_ > 0) {
                mask.resize(a.rows(), a.cols());
                const Scalar keep_scale = Scalar(1) / (Scalar(1) - dropout_rate_);
                for (Eigen::Index j = 0; j < mask.cols(); ++j)
                    for (Eigen::Index i = 0; i < mask.rows(); ++i)
                        mask(i, j) = opt.rng->uniform() < static_cast<double>(dropout_rate_) ? Scalar(0) : keep_scale;
                a.array() *= mask.array();
            }
            if (tape) {
                tape->xhat.push_back(std::move(xhat));
                tape->inv_std.push_back(std::move(inv_std));
                tape->pre_relu.push_back(std::move(y));
                tape->dropout_mask.push_back(std::move(mask));
            }
        }
        if (tape) tape->last_hidden = a;
        Matrix out = weight(num_hidden()) * a;
        out.colwise() += bias(num_hidden()).col(0);
        return out;
    }

    // Gradients for every parameter tensor given dLoss/dlogits. Assumes the tape came
    // from a batch-statistics forward (the training configuration).
    std::vector<Matrix> backward(const Tape& tape, const Matrix& dlogits) const {
        std::vector<Matrix> grads(params_.size());
        const int H = num_hidden();
        const auto out = static_cast<std::size_t>(4 * H);
        grads[out] = dlogits * tape.last_hidden.transpose();
        grads[out + 1] = dlogits.rowwise().sum();
        Matrix da = weight(H).transpose() * dlogits;
        const auto batch = static_cast<Scalar>(dlogits.cols());
        for (int h = H - 1; h >= 0; --h) {
            const auto hs = static_cast<std::size_t>(h);
            if (tape.dropout_mask[hs].size() > 0) da.array() *= tape.dropout_mask[hs].array();
            Matrix dy = (tape.pre_relu[hs].array() > Scalar(0)).select(da, Scalar(0));
            const Matrix& xhat = tape.xhat[hs];
            grads[4 * hs + 2] = (dy.array() * xhat.array()).rowwise().sum();
            grads[4 * hs + 3] = dy.rowwise().sum();
            Matrix dxhat = dy.array().colwise() * bn_gamma(h).col(0).array();
            Vector sum_dxhat = dxhat.rowwise().sum();
            Vector sum_dxhat_xhat = (dxhat.array() * xhat.array()).rowwise().sum();
            Matrix dz = ((batch * dxhat).colwise() - sum_dxhat).array() -
                        xhat.array().colwise() * sum_dxhat_xhat.array();
            dz.array().colwise() *= tape.inv_std[hs].array() / batch;
            grads[4 * hs] = dz * tape.layer_input[hs].transpose();
            grads[4 * hs + 1] = dz.rowwise().sum();
            if (h > 0) da = weight(h).transpose() * dz;
        }
        return grads;
    }

    static Matrix sigmoid(const Matrix& z) {
        return z.unaryExpr([](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); });
    }

private:
    std::size_t index(int layer) const { return 4 * static_cast<std::size_t>(layer); }

    void check_input(const Matrix& x) const {
        if (x.rows() != input_dim_)
            throw std::invalid_argument("input length " + std::to_string(x.rows()) + " does not match network input " +
                                        std::to_string(input_dim_));
    }

    Matrix forward_eval(const Matrix& x) const {
        check_input(x);
        Matrix a = x;
        for (int h = 0; h < num_hidden(); ++h) {
            const auto hs = static_cast<std::size_t>(h);
            Matrix z = weight(h) * a;
            z.colwise() += bias(h).col(0);
            const Vector scale = bn_gamma(h).col(0).array() * (running_var_[hs].array() + kBatchNormEps).rsqrt();
            const Vector shift = bn_beta(h).col(0).array() - running_mean_[hs].array() * scale.array();
            a = ((z.array().colwise() * scale.array()).colwise() + shift.array()).cwiseMax(Scalar(0));
        }
        Matrix out = weight(num_hidden()) * a;
        out.colwise() += bias(num_hidden()).col(0);
        return out;
    }

    int input_dim_ = 0;
    int output_dim_ = 0;
    std::vector<int> hidden_;
    Scalar dropout_rate_ = 0;
    Mode mode_ = Mode::Train;
    std::vector<Matrix> params_;
    std::vector<Vector> running_mean_;
    std::vector<Vector> running_var_;
};

// Adaptive moment estimation over a flat list of parameter tensors.
template <class Scalar>
class BasicAdam {
public:
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

    explicit BasicAdam(Scalar lr = Scalar(1e-3), Scalar beta1 = Scalar(0.9), Scalar beta2 = Scalar(0.999),
                       Scalar eps = Scalar(1e-8))
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(std::vector<Matrix>& params, const std::vector<Matrix>& grads) {
        if (m_.empty()) {
            for (const auto& p : params) {
                m_.push_back(Matrix::Zero(p.rows(), p.cols()));
                v_.push_back(Matrix::Zero(p.rows(), p.cols()));
            }
        }
        ++t_;
        const Scalar c1 = Scalar(1) - std::pow(beta1_, Scalar(t_));
        const Scalar c2 = Scalar(1) - std::pow(beta2_, Scalar(t_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            m_[i] = beta1_ * m_[i] + (Scalar(1) - beta1_) * grads[i];
            v_[i] = beta2_ * v_[i] + (Scalar(1) - beta2_) * grads[i].cwiseAbs2();
            params[i].array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
        }
    }

    long steps() const { return t_; }

private:
    Scalar lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<Matrix> m_, v_;
};

using ExpertMlp = BasicExpertMlp<double>;
using Adam = BasicAdam<double>;

}  // namespace moesim
