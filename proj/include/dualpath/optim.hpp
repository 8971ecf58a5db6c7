#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "dualpath/error.hpp"
#include "dualpath/tensor.hpp"

namespace dualpath {

struct AdamWConfig {
    double lr = 3e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
};

// AdamW with decoupled decay: p <- p - lr*wd*p first, then the bias-corrected
// moment step. One state per parameter tensor; update order is the caller's
// parameter order, fixed for the life of the optimizer.
class AdamW {
  public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    void step(std::vector<Tensor*> params, const std::vector<Tensor>& grads) {
        if (params.size() != grads.size()) throw contract_error("adamw: param/grad count mismatch");
        if (state_.empty()) {
            state_.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) {
                state_[i].m = Tensor(params[i]->shape);
                state_[i].v = Tensor(params[i]->shape);
            }
        }
        if (state_.size() != params.size()) throw contract_error("adamw: parameter set changed mid-run");
        ++step_count_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
        for (std::size_t i = 0; i < params.size(); ++i) {
            Tensor& p = *params[i];
            const Tensor& g = grads[i];
            require_same_shape(p, g, "adamw");
            Moments& st = state_[i];
            for (std::size_t j = 0; j < p.numel(); ++j) {
                p[j] -= cfg_.lr * cfg_.weight_decay * p[j];
                st.m[j] = cfg_.beta1 * st.m[j] + (1.0 - cfg_.beta1) * g[j];
                st.v[j] = cfg_.beta2 * st.v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
                const double m_hat = st.m[j] / bc1;
                const double v_hat = st.v[j] / bc2;
                p[j] -= cfg_.lr * m_hat / (std::sqrt(v_hat) + cfg_.eps);
            }
            require_finite(p, "adamw");
        }
    }

    std::size_t step_count() const { return step_count_; }

  private:
    struct Moments {
        Tensor m;
        Tensor v;
    };
    AdamWConfig cfg_;
    std::vector<Moments> state_;
    std::size_t step_count_ = 0;
};

}  // namespace dualpath
