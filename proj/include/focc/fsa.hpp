#pragma once

#include <vector>

#include "focc/tensor.hpp"

namespace focc {

// Feature-alignment losses between synthesized future maps and the frozen
// encoder's maps of the actual future frames.  Each element of the vectors
// is one horizon's [M,C,h,w] pair; the observed side is detached, so no
// gradient ever reaches it.

// Per spatial location and camera: distance = L2 norm of the C-dim feature
// difference, Huber-penalized (quadratic below delta, linear above), then
// averaged over locations, cameras, and horizons.
Tensor huber_alignment(const std::vector<Tensor> &predicted,
                       const std::vector<Tensor> &observed, double delta);

// Per location/camera: 1 - cosine similarity of the C-dim vectors, with a
// 1e-8 floor in the denominator (zero-vector pairs count as fully
// misaligned, contributing 1), averaged the same way.
Tensor cosine_alignment(const std::vector<Tensor> &predicted,
                        const std::vector<Tensor> &observed);

// Sum of the two.  whole_tensor_norm switches to the literal one-norm-per-
// horizon reading (distance/cosine over the flattened [M,C,h,w] tensor); it
// exists for comparison and is off by default.
Tensor fsa_loss(const std::vector<Tensor> &predicted,
                const std::vector<Tensor> &observed, double delta,
                bool whole_tensor_norm = false);

}  // namespace focc
