#include "flowssc/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "flowssc/error.hpp"

namespace flowssc::optim {

double WarmupCosine::at(std::size_t step) const {
    if (warmup_steps > 0 && step < warmup_steps) {
        return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    }
    const std::size_t span = total_steps > warmup_steps ? total_steps - warmup_steps : 1;
    const double progress =
        std::min(1.0, static_cast<double>(step - std::min(step, warmup_steps)) / static_cast<double>(span));
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

AdamW::AdamW(nn::ParamList params, AdamWConfig config) : params_(std::move(params)), config_(config) {
    for (const auto& p : params_) {
        m_.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
        v_.push_back(Tensor::zeros(p.tensor.shape(), p.tensor.dtype()));
    }
}

void AdamW::step(double lr) {
    ++steps_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor p = params_[i].tensor;
        if (!p.has_grad()) {
            continue;
        }
        detail::dispatch(p.dtype(), [&]<class T>() {
            auto w = p.mutable_data<T>();
            auto g = p.mutable_grad<T>();
            auto m = m_[i].mutable_data<T>();
            auto v = v_[i].mutable_data<T>();
            const T b1 = static_cast<T>(config_.beta1), b2 = static_cast<T>(config_.beta2);
            const T step_size = static_cast<T>(lr / bc1);
            const T inv_bc2 = static_cast<T>(1.0 / bc2);
            const T decay = static_cast<T>(1.0 - lr * config_.weight_decay);
            const T eps = static_cast<T>(config_.eps);
            for (std::size_t j = 0; j < w.size(); ++j) {
                m[j] = b1 * m[j] + (T(1) - b1) * g[j];
                v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
                w[j] = w[j] * decay - step_size * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
            }
            for (T x : w) {
                if (!std::isfinite(x)) {
                    throw NumericalError("AdamW update produced a non-finite parameter in " + params_[i].name);
                }
            }
        });
    }
}

void AdamW::zero_grad() { nn::zero_grad(params_); }

nn::ParamList AdamW::state() const {
    nn::ParamList out;
    for (std::size_t i = 0; i < params_.size(); ++i) {
        out.push_back({"adam_m." + params_[i].name, m_[i]});
        out.push_back({"adam_v." + params_[i].name, v_[i]});
    }
    return out;
}

double clip_grad_norm(const nn::ParamList& params, double max_norm) {
    double total = 0.0;
    for (const auto& p : params) {
        if (!p.tensor.has_grad()) {
            continue;
        }
        for (double g : p.tensor.grad().values()) {
            total += g * g;
        }
    }
    const double norm = std::sqrt(total);
    if (!std::isfinite(norm)) {
        throw NumericalError("non-finite gradient norm");
    }
    if (norm > max_norm && norm > 0.0) {
        const double scale = max_norm / norm;
        for (const auto& p : params) {
            Tensor t = p.tensor;
            if (!t.has_grad()) {
                continue;
            }
            detail::dispatch(t.dtype(), [&]<class T>() {
                for (T& g : t.mutable_grad<T>()) {
                    g *= static_cast<T>(scale);
                }
            });
        }
    }
    return norm;
}

}  // namespace flowssc::optim
