#include "focc/fsa.hpp"

namespace focc {

namespace {

// keeps sqrt away from 0 where its derivative blows up; gradients below the
// floor are cut by clamp_min, which is exactly right for an exact-zero norm
constexpr double kNormFloor = 1e-24;
constexpr double kCosineEps = 1e-8;

void check_pairs(const std::vector<Tensor> &predicted,
                 const std::vector<Tensor> &observed, const char *op) {
    if (predicted.empty() || predicted.size() != observed.size())
        throw ContractError(std::string(op) + ": need matching nonempty horizon lists, got " +
                            std::to_string(predicted.size()) + " vs " +
                            std::to_string(observed.size()));
    for (size_t k = 0; k < predicted.size(); ++k) {
        if (predicted[k].shape() != observed[k].shape())
            throw ContractError(std::string(op) + ": horizon " + std::to_string(k) +
                                " shapes differ: " + shape_str(predicted[k].shape()) +
                                " vs " + shape_str(observed[k].shape()));
        if (predicted[k].ndim() != 4)
            throw ContractError(std::string(op) + ": expected [M,C,h,w] pairs, got " +
                                shape_str(predicted[k].shape()));
    }
}

// [M,C,h,w] -> per-location squared norm of the C-vector, [M,h,w]
Tensor channel_sqnorm(const Tensor &x) { return sum(mul(x, x), {1}, false); }

Tensor channel_dot(const Tensor &a, const Tensor &b) {
    return sum(mul(a, b), {1}, false);
}

// mask[i] = 1 where values[i] < threshold
Tensor less_than_mask(const Tensor &values, double threshold) {
    std::vector<double> m(values.numel());
    for (int i = 0; i < values.numel(); ++i)
        m[i] = values.data()[i] < threshold ? 1.0 : 0.0;
    return Tensor(values.shape(), m);
}

Tensor huber_of_sqnorm(const Tensor &sqnorm, double delta) {
    Tensor dist = sqrt(clamp_min(sqnorm, kNormFloor));
    Tensor quadratic = mul_scalar(sqnorm, 0.5);
    Tensor linear = mul_scalar(add_scalar(dist, -delta / 2), delta);
    return where_mask(less_than_mask(dist, delta), quadratic, linear);
}

Tensor mean_over_horizons(std::vector<Tensor> per_horizon) {
    Tensor total = per_horizon[0];
    for (size_t k = 1; k < per_horizon.size(); ++k) total = add(total, per_horizon[k]);
    return mul_scalar(total, 1.0 / per_horizon.size());
}

Tensor cosine_term(const Tensor &f, const Tensor &g_const) {
    Tensor nf = sqrt(clamp_min(channel_sqnorm(f), kNormFloor));
    Tensor ng = sqrt(clamp_min(channel_sqnorm(g_const), kNormFloor));
    Tensor cos = divide(channel_dot(f, g_const), clamp_min(mul(nf, ng), kCosineEps));
    return mean(sub(Tensor::full(cos.shape(), 1.0), cos));
}

}  // namespace

Tensor huber_alignment(const std::vector<Tensor> &predicted,
                       const std::vector<Tensor> &observed, double delta) {
    if (delta <= 0)
        throw ConfigError("huber_alignment: delta must be positive, got " +
                          std::to_string(delta));
    check_pairs(predicted, observed, "huber_alignment");
    std::vector<Tensor> terms;
    for (size_t k = 0; k < predicted.size(); ++k) {
        Tensor diff = sub(predicted[k], observed[k].detach());
        terms.push_back(mean(huber_of_sqnorm(channel_sqnorm(diff), delta)));
    }
    return mean_over_horizons(std::move(terms));
}

Tensor cosine_alignment(const std::vector<Tensor> &predicted,
                        const std::vector<Tensor> &observed) {
    check_pairs(predicted, observed, "cosine_alignment");
    std::vector<Tensor> terms;
    for (size_t k = 0; k < predicted.size(); ++k)
        terms.push_back(cosine_term(predicted[k], observed[k].detach()));
    return mean_over_horizons(std::move(terms));
}

Tensor fsa_loss(const std::vector<Tensor> &predicted,
                const std::vector<Tensor> &observed, double delta,
                bool whole_tensor_norm) {
    if (!whole_tensor_norm)
        return add(huber_alignment(predicted, observed, delta),
                   cosine_alignment(predicted, observed));

    // literal variant: one distance / one cosine per horizon over the whole
    // flattened tensor (grows with element count; for comparison only)
    if (delta <= 0)
        throw ConfigError("fsa_loss: delta must be positive, got " + std::to_string(delta));
    check_pairs(predicted, observed, "fsa_loss");
    std::vector<Tensor> terms;
    for (size_t k = 0; k < predicted.size(); ++k) {
        int n = predicted[k].numel();
        Tensor f = reshape(predicted[k], {1, n, 1, 1});
        Tensor g = reshape(observed[k].detach(), {1, n, 1, 1});
        Tensor diff = sub(f, g);
        Tensor huber = mean(huber_of_sqnorm(channel_sqnorm(diff), delta));
        terms.push_back(add(huber, cosine_term(f, g)));
    }
    return mean_over_horizons(std::move(terms));
}

}  // namespace focc
