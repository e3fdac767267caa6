#include "focc/optim.hpp"

#include <cmath>

namespace focc {

AdamW::AdamW(std::vector<ParamGroup> groups, double beta1, double beta2, double eps)
    : groups_(std::move(groups)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.resize(groups_.size());
    v_.resize(groups_.size());
    shapes_.resize(groups_.size());
    for (size_t g = 0; g < groups_.size(); ++g) {
        for (const auto &p : groups_[g].params) {
            m_[g].emplace_back(p.numel(), 0.0);
            v_[g].emplace_back(p.numel(), 0.0);
            shapes_[g].push_back(p.shape());
        }
    }
}

void AdamW::step() {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t g = 0; g < groups_.size(); ++g) {
        ParamGroup &grp = groups_[g];
        for (size_t i = 0; i < grp.params.size(); ++i) {
            Tensor &p = grp.params[i];
            if (p.shape() != shapes_[g][i]) {
                std::string nm = i < grp.names.size() ? grp.names[i] : "<unnamed>";
                throw ContractError("adamw: parameter '" + nm + "' changed shape from " +
                                    shape_str(shapes_[g][i]) + " to " + shape_str(p.shape()) +
                                    " between steps");
            }
            auto &data = p.mutable_data();
            auto &m = m_[g][i];
            auto &v = v_[g][i];
            const bool has_g = p.has_grad();
            const std::vector<double> *gr = has_g ? &p.grad() : nullptr;
            for (size_t j = 0; j < data.size(); ++j) {
                double gj = has_g ? (*gr)[j] : 0.0;
                m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
                v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
                double mhat = m[j] / bc1;
                double vhat = v[j] / bc2;
                data[j] -= grp.lr * (mhat / (std::sqrt(vhat) + eps_) + grp.weight_decay * data[j]);
            }
        }
    }
}

void AdamW::zero_grad() {
    for (auto &grp : groups_)
        for (auto &p : grp.params) p.zero_grad();
}

void AdamW::set_lr(size_t group, double lr) {
    if (group >= groups_.size()) throw ContractError("adamw: bad group index");
    groups_[group].lr = lr;
}

double AdamW::lr(size_t group) const {
    if (group >= groups_.size()) throw ContractError("adamw: bad group index");
    return groups_[group].lr;
}

}  // namespace focc
