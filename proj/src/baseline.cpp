#include "focc/baseline.hpp"

#include <algorithm>

#include "focc/common.hpp"

namespace focc {

NaiveForecaster::NaiveForecaster(ParamRegistry &reg, const std::string &prefix,
                                 const ForecastConfig &config, Rng &rng)
    : config_(config) {
    config.validate();
    int c = config.channels, n = config.n_frames;
    // Each slot is squeezed to ~C/N channels so the concatenated fusion
    // input stays near width C; this is what keeps the baseline small.
    int slot = std::max(1, c / n);
    proj_.reserve(n);
    for (int i = 0; i < n; ++i)
        proj_.emplace_back(reg, prefix + "proj" + std::to_string(i), c, slot, 1, 1, 0, rng);
    fuse1_ = Conv2dLayer(reg, prefix + "fuse1", n * slot, c, 3, 1, 1, rng);
    bn1_ = BatchNormLayer(reg, prefix + "bn1", c, 1);
    fuse2_ = Conv2dLayer(reg, prefix + "fuse2", c, c, 3, 1, 1, rng);
    bn2_ = BatchNormLayer(reg, prefix + "bn2", c, 1);
    deproj_ = Conv2dLayer(reg, prefix + "deproj", 2 * c, c, 1, 1, 0, rng);
}

Tensor NaiveForecaster::predict_next(const std::vector<Tensor> &window) {
    if (static_cast<int>(window.size()) != config_.n_frames)
        throw ContractError("naive_forecast: window holds " + std::to_string(window.size()) +
                            " frames, configured for " + std::to_string(config_.n_frames));
    for (const auto &f : window)
        if (f.shape() != window.front().shape())
            throw ContractError("naive_forecast: window frames disagree in shape");
    std::vector<Tensor> projected;
    projected.reserve(window.size());
    for (size_t i = 0; i < window.size(); ++i)
        projected.push_back(proj_[i].forward(window[i]));
    Tensor fused = relu(bn1_.forward(fuse1_.forward(concat(projected, 1)), training_));
    fused = relu(bn2_.forward(fuse2_.forward(fused), training_));
    return deproj_.forward(concat({fused, window.back()}, 1));
}

std::vector<Tensor> NaiveForecaster::forecast(const std::vector<Tensor> &frames) {
    std::vector<Tensor> window = frames;
    std::vector<Tensor> out;
    out.reserve(config_.num_horizons);
    for (int k = 0; k < config_.num_horizons; ++k) {
        Tensor next = predict_next(window);
        out.push_back(next);
        window.erase(window.begin());
        window.push_back(next);
    }
    return out;
}

}  // namespace focc
