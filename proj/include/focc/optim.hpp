#pragma once

#include <string>
#include <vector>

#include "focc/tensor.hpp"

namespace focc {

struct ParamGroup {
    std::vector<Tensor> params;
    std::vector<std::string> names;  // parallel to params; diagnostics only
    double lr = 1e-3;
    double weight_decay = 0.0;
};

// AdamW with decoupled weight decay and per-group learning rates.
class AdamW {
  public:
    explicit AdamW(std::vector<ParamGroup> groups, double beta1 = 0.9, double beta2 = 0.999,
                   double eps = 1e-8);

    void step();       // consumes accumulated grads; missing grad = zero
    void zero_grad();  // clears grads on all registered params
    void set_lr(size_t group, double lr);
    double lr(size_t group) const;
    size_t group_count() const { return groups_.size(); }
    int64_t steps_taken() const { return t_; }

  private:
    std::vector<ParamGroup> groups_;
    std::vector<std::vector<std::vector<double>>> m_, v_;  // [group][param][coord]
    std::vector<std::vector<Shape>> shapes_;               // init shapes; drift check
    double beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

}  // namespace focc
