#pragma once

#include <vector>

#include "focc/forecast.hpp"

namespace focc {

// Convolutional drop-in replacement for the cross-attention forecaster:
// per-slot 1x1 projections squeeze each frame to ~C/N channels, the channel
// concat is fused by two 3x3 Conv-BN-ReLU blocks at width C, and a 1x1
// deprojection combines the fusion with the window's newest frame. Later
// horizons slide the window over their own predictions.
class NaiveForecaster : public Forecaster {
  public:
    NaiveForecaster(ParamRegistry &reg, const std::string &prefix, const ForecastConfig &config,
                    Rng &rng);

    std::vector<Tensor> forecast(const std::vector<Tensor> &frames) override;

    // one sliding-window application: N maps [M,C,h,w] -> the next map
    Tensor predict_next(const std::vector<Tensor> &window);

    void set_training(bool training) { training_ = training; }
    const ForecastConfig &config() const { return config_; }

  private:
    ForecastConfig config_;
    std::vector<Conv2dLayer> proj_;
    Conv2dLayer fuse1_, fuse2_, deproj_;
    BatchNormLayer bn1_, bn2_;
    bool training_ = true;
};

}  // namespace focc
