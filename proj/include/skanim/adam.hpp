// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <map>
#include <string>

namespace skanim {

struct AdamConfig {
    double lr    = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps   = 1e-8;
};

// Adam with bias correction. Moment buffers are keyed by slot name and
// allocated on first use; call begin_step() once per iteration.
class AdamOptimizer {
public:
    explicit AdamOptimizer(AdamConfig cfg) : cfg_(cfg) {}

    void begin_step() { step_++; }

    void update(Eigen::Ref<Eigen::MatrixXd> param, const Eigen::MatrixXd& grad,
                const std::string& slot) {
        Moments& mom = slots_[slot];
        if (mom.m.size() == 0) {
            mom.m = Eigen::MatrixXd::Zero(grad.rows(), grad.cols());
            mom.v = Eigen::MatrixXd::Zero(grad.rows(), grad.cols());
        }
        mom.m = cfg_.beta1 * mom.m + (1.0 - cfg_.beta1) * grad;
        mom.v = cfg_.beta2 * mom.v + (1.0 - cfg_.beta2) * grad.cwiseProduct(grad);
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        Eigen::MatrixXd m_hat = mom.m / bc1;
        Eigen::MatrixXd v_hat = mom.v / bc2;
        param -= cfg_.lr * (m_hat.array() / (v_hat.array().sqrt() + cfg_.eps)).matrix();
    }

    long step() const { return step_; }

private:
    struct Moments {
        Eigen::MatrixXd m, v;
    };
    AdamConfig cfg_;
    long step_ = 0;
    std::map<std::string, Moments> slots_;
};

}  // namespace skanim
