#include "focc/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace focc {

double finite_diff_check(const std::function<Tensor(const Tensor &)> &f, Tensor x, double h,
                         double denom_floor) {
    bool prev_req = x.requires_grad();
    x.set_requires_grad(true);
    x.zero_grad();
    Tensor loss = f(x);
    loss.backward();
    std::vector<double> analytic = x.has_grad() ? x.grad() : std::vector<double>(x.numel(), 0.0);

    double max_rel = 0.0;
    auto &data = x.mutable_data();
    for (size_t i = 0; i < data.size(); ++i) {
        double orig = data[i];
        double fp, fm;
        {
            NoGradGuard ng;
            data[i] = orig + h;
            fp = f(x).item();
            data[i] = orig - h;
            fm = f(x).item();
            data[i] = orig;
        }
        double numeric = (fp - fm) / (2.0 * h);
        double denom = std::max({std::fabs(analytic[i]), std::fabs(numeric), denom_floor});
        max_rel = std::max(max_rel, std::fabs(analytic[i] - numeric) / denom);
    }
    x.set_requires_grad(prev_req);
    return max_rel;
}

}  // namespace focc
