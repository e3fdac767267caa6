#include <algorithm>
#include <cmath>

#include "focc/tensor.hpp"

namespace focc {

namespace {

// Valid iteration range [lo, hi] for j in [0, count) such that
// 0 <= j*stride + off < extent. hi < lo means empty.
inline void tap_range(int off, int stride, int extent, int count, int &lo, int &hi) {
    lo = off < 0 ? (-off + stride - 1) / stride : 0;
    int max_src = extent - 1 - off;
    hi = max_src < 0 ? -1 : std::min(count - 1, max_src / stride);
}

inline int conv_out_extent(int in, int k, int s, int p, const char *op) {
    int numer = in + 2 * p - k;
    if (numer < 0)
        throw ShapeError(std::string(op) + ": kernel " + std::to_string(k) +
                         " exceeds padded extent " + std::to_string(in + 2 * p));
    return numer / s + 1;
}

inline int deconv_out_extent(int in, int k, int s, int p, const char *op) {
    int out = (in - 1) * s + k - 2 * p;
    if (out <= 0) throw ShapeError(std::string(op) + ": output extent would be non-positive");
    return out;
}

void check_stride_padding(int stride, int padding, const char *op) {
    if (stride < 1) throw ShapeError(std::string(op) + ": stride must be >= 1");
    if (padding < 0) throw ShapeError(std::string(op) + ": padding must be >= 0");
}

}  // namespace

Tensor conv2d(const Tensor &x, const Tensor &w, const Tensor &bias, int stride, int padding) {
    check_stride_padding(stride, padding, "conv2d");
    NodePtr px = x.impl(), pw = w.impl();
    NodePtr pbias = bias.defined() ? bias.impl() : nullptr;
    if (px->shape.size() != 4)
        throw ShapeError("conv2d: input must be [N, C, H, W], got " + shape_str(px->shape));
    if (pw->shape.size() != 4)
        throw ShapeError("conv2d: weight must be [Co, Ci, kh, kw], got " + shape_str(pw->shape));
    int N = px->shape[0], Ci = px->shape[1], H = px->shape[2], W = px->shape[3];
    int Co = pw->shape[0], kh = pw->shape[2], kw = pw->shape[3];
    if (pw->shape[1] != Ci)
        throw ShapeError("conv2d: weight expects " + std::to_string(pw->shape[1]) +
                         " input channels, input has " + std::to_string(Ci));
    if (pbias && pbias->shape != Shape{Co})
        throw ShapeError("conv2d: bias must be [" + std::to_string(Co) + "], got " +
                         shape_str(pbias->shape));
    int Ho = conv_out_extent(H, kh, stride, padding, "conv2d");
    int Wo = conv_out_extent(W, kw, stride, padding, "conv2d");
    int s = stride, p = padding;

    std::vector<double> out(static_cast<size_t>(N) * Co * Ho * Wo);
    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < Co; ++co) {
            double *oc = out.data() + (static_cast<int64_t>(n) * Co + co) * Ho * Wo;
            double bv = pbias ? pbias->data[co] : 0.0;
            std::fill(oc, oc + static_cast<int64_t>(Ho) * Wo, bv);
            for (int ci = 0; ci < Ci; ++ci) {
                const double *xc =
                    px->data.data() + (static_cast<int64_t>(n) * Ci + ci) * H * W;
                const double *wc = pw->data.data() +
                                   (static_cast<int64_t>(co) * Ci + ci) * kh * kw;
                for (int ky = 0; ky < kh; ++ky) {
                    int ylo, yhi;
                    tap_range(ky - p, s, H, Ho, ylo, yhi);
                    for (int kx = 0; kx < kw; ++kx) {
                        double wv = wc[ky * kw + kx];
                        int xlo, xhi;
                        tap_range(kx - p, s, W, Wo, xlo, xhi);
                        for (int oy = ylo; oy <= yhi; ++oy) {
                            const double *xrow = xc + static_cast<int64_t>(oy * s + ky - p) * W +
                                                 (kx - p);
                            double *orow = oc + static_cast<int64_t>(oy) * Wo;
                            for (int ox = xlo; ox <= xhi; ++ox)
                                orow[ox] += xrow[ox * s] * wv;
                        }
                    }
                }
            }
        }
    }

    std::vector<NodePtr> parents{px, pw};
    if (pbias) parents.push_back(pbias);
    return make_node(
        {N, Co, Ho, Wo}, std::move(out), std::move(parents),
        [px, pw, pbias, N, Ci, H, W, Co, kh, kw, Ho, Wo, s, p](TensorImpl &self) {
            bool rx = px->requires_grad, rw = pw->requires_grad;
            bool rb = pbias && pbias->requires_grad;
            if (rx) px->ensure_grad();
            if (rw) pw->ensure_grad();
            if (rb) pbias->ensure_grad();
            const double *g = self.grad.data();
            if (rb) {
                for (int n = 0; n < N; ++n)
                    for (int co = 0; co < Co; ++co) {
                        const double *gc = g + (static_cast<int64_t>(n) * Co + co) * Ho * Wo;
                        double acc = 0.0;
                        for (int64_t i = 0; i < static_cast<int64_t>(Ho) * Wo; ++i) acc += gc[i];
                        pbias->grad[co] += acc;
                    }
            }
            if (rx) {
                for (int n = 0; n < N; ++n)
                    for (int co = 0; co < Co; ++co) {
                        const double *gc = g + (static_cast<int64_t>(n) * Co + co) * Ho * Wo;
                        for (int ci = 0; ci < Ci; ++ci) {
                            double *gxc = px->grad.data() +
                                          (static_cast<int64_t>(n) * Ci + ci) * H * W;
                            const double *wc = pw->data.data() +
                                               (static_cast<int64_t>(co) * Ci + ci) * kh * kw;
                            for (int ky = 0; ky < kh; ++ky) {
                                int ylo, yhi;
                                tap_range(ky - p, s, H, Ho, ylo, yhi);
                                for (int kx = 0; kx < kw; ++kx) {
                                    double wv = wc[ky * kw + kx];
                                    int xlo, xhi;
                                    tap_range(kx - p, s, W, Wo, xlo, xhi);
                                    for (int oy = ylo; oy <= yhi; ++oy) {
                                        double *gxrow = gxc +
                                                        static_cast<int64_t>(oy * s + ky - p) * W +
                                                        (kx - p);
                                        const double *grow = gc + static_cast<int64_t>(oy) * Wo;
                                        for (int ox = xlo; ox <= xhi; ++ox)
                                            gxrow[ox * s] += grow[ox] * wv;
                                    }
                                }
                            }
                        }
                    }
            }
            if (rw) {
                for (int n = 0; n < N; ++n)
                    for (int co = 0; co < Co; ++co) {
                        const double *gc = g + (static_cast<int64_t>(n) * Co + co) * Ho * Wo;
                        for (int ci = 0; ci < Ci; ++ci) {
                            const double *xc = px->data.data() +
                                               (static_cast<int64_t>(n) * Ci + ci) * H * W;
                            double *gwc = pw->grad.data() +
                                          (static_cast<int64_t>(co) * Ci + ci) * kh * kw;
                            for (int ky = 0; ky < kh; ++ky) {
                                int ylo, yhi;
                                tap_range(ky - p, s, H, Ho, ylo, yhi);
                                for (int kx = 0; kx < kw; ++kx) {
                                    int xlo, xhi;
                                    tap_range(kx - p, s, W, Wo, xlo, xhi);
                                    double acc = 0.0;
                                    for (int oy = ylo; oy <= yhi; ++oy) {
                                        const double *xrow =
                                            xc + static_cast<int64_t>(oy * s + ky - p) * W +
                                            (kx - p);
                                        const double *grow = gc + static_cast<int64_t>(oy) * Wo;
                                        for (int ox = xlo; ox <= xhi; ++ox)
                                            acc += grow[ox] * xrow[ox * s];
                                    }
                                    gwc[ky * kw + kx] += acc;
                                }
                            }
                        }
                    }
            }
        });
}

Tensor deconv2d(const Tensor &x, const Tensor &w, const Tensor &bias, int stride, int padding) {
    check_stride_padding(stride, padding, "deconv2d");
    NodePtr px = x.impl(), pw = w.impl();
    NodePtr pbias = bias.defined() ? bias.impl() : nullptr;
    if (px->shape.size() != 4)
        throw ShapeError("deconv2d: input must be [N, C, H, W], got " + shape_str(px->shape));
    if (pw->shape.size() != 4)
        throw ShapeError("deconv2d: weight must be [Ci, Co, kh, kw], got " + shape_str(pw->shape));
    int N = px->shape[0], Ci = px->shape[1], H = px->shape[2], W = px->shape[3];
    int Co = pw->shape[1], kh = pw->shape[2], kw = pw->shape[3];
    if (pw->shape[0] != Ci)
        throw ShapeError("deconv2d: weight expects " + std::to_string(pw->shape[0]) +
                         " input channels, input has " + std::to_string(Ci));
    if (pbias && pbias->shape != Shape{Co})
        throw ShapeError("deconv2d: bias must be [" + std::to_string(Co) + "], got " +
                         shape_str(pbias->shape));
    int Ho = deconv_out_extent(H, kh, stride, padding, "deconv2d");
    int Wo = deconv_out_extent(W, kw, stride, padding, "deconv2d");
    int s = stride, p = padding;

    std::vector<double> out(static_cast<size_t>(N) * Co * Ho * Wo);
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co) {
            double *oc = out.data() + (static_cast<int64_t>(n) * Co + co) * Ho * Wo;
            double bv = pbias ? pbias->data[co] : 0.0;
            std::fill(oc, oc + static_cast<int64_t>(Ho) * Wo, bv);
        }
    for (int n = 0; n < N; ++n)
        for (int ci = 0; ci < Ci; ++ci) {
            const double *xc = px->data.data() + (static_cast<int64_t>(n) * Ci + ci) * H * W;
            for (int co = 0; co < Co; ++co) {
                double *oc = out.data() + (static_cast<int64_t>(n) * Co + co) * Ho * Wo;
                const double *wc =
                    pw->data.data() + (static_cast<int64_t>(ci) * Co + co) * kh * kw;
                for (int ky = 0; ky < kh; ++ky) {
                    int ylo, yhi;
                    tap_range(ky - p, s, Ho, H, ylo, yhi);
                    for (int kx = 0; kx < kw; ++kx) {
                        double wv = wc[ky * kw + kx];
                        int xlo, xhi;
                        tap_range(kx - p, s, Wo, W, xlo, xhi);
                        for (int iy = ylo; iy <= yhi; ++iy) {
                            const double *xrow = xc + static_cast<int64_t>(iy) * W;
                            double *orow = oc + static_cast<int64_t>(iy * s + ky - p) * Wo +
                                           (kx - p);
                            for (int ix = xlo; ix <= xhi; ++ix)
                                orow[ix * s] += xrow[ix] * wv;
                        }
                    }
                }
            }
        }

    std::vector<NodePtr> parents{px, pw};
    if (pbias) parents.push_back(pbias);
    return make_node(
        {N, Co, Ho, Wo}, std::move(out), std::move(parents),
        [px, pw, pbias, N, Ci, H, W, Co, kh, kw, Ho, Wo, s, p](TensorImpl &self) {
            bool rx = px->requires_grad, rw = pw->requires_grad;
            bool rb = pbias && pbias->requires_grad;
            if (rx) px->ensure_grad();
            if (rw) pw->ensure_grad();
            if (rb) pbias->ensure_grad();
            const double *g = self.grad.data();
            if (rb) {
                for (int n = 0; n < N; ++n)
                    for (int co = 0; co < Co; ++co) {
                        const double *gc = g + (static_cast<int64_t>(n) * Co + co) * Ho * Wo;
                        double acc = 0.0;
                        for (int64_t i = 0; i < static_cast<int64_t>(Ho) * Wo; ++i) acc += gc[i];
                        pbias->grad[co] += acc;
                    }
            }
            for (int n = 0; n < N; ++n)
                for (int ci = 0; ci < Ci; ++ci) {
                    const double *xc =
                        px->data.data() + (static_cast<int64_t>(n) * Ci + ci) * H * W;
                    double *gxc = rx ? px->grad.data() +
                                           (static_cast<int64_t>(n) * Ci + ci) * H * W
                                     : nullptr;
                    for (int co = 0; co < Co; ++co) {
                        const double *gc = g + (static_cast<int64_t>(n) * Co + co) * Ho * Wo;
                        const double *wc =
                            pw->data.data() + (static_cast<int64_t>(ci) * Co + co) * kh * kw;
                        double *gwc = rw ? pw->grad.data() +
                                               (static_cast<int64_t>(ci) * Co + co) * kh * kw
                                         : nullptr;
                        for (int ky = 0; ky < kh; ++ky) {
                            int ylo, yhi;
                            tap_range(ky - p, s, Ho, H, ylo, yhi);
                            for (int kx = 0; kx < kw; ++kx) {
                                double wv = wc[ky * kw + kx];
                                int xlo, xhi;
                                tap_range(kx - p, s, Wo, W, xlo, xhi);
                                double wacc = 0.0;
                                for (int iy = ylo; iy <= yhi; ++iy) {
                                    const double *grow =
                                        gc + static_cast<int64_t>(iy * s + ky - p) * Wo +
                                        (kx - p);
                                    const double *xrow = xc + static_cast<int64_t>(iy) * W;
                                    double *gxrow =
                                        rx ? gxc + static_cast<int64_t>(iy) * W : nullptr;
                                    for (int ix = xlo; ix <= xhi; ++ix) {
                                        double gv = grow[ix * s];
                                        if (rx) gxrow[ix] += gv * wv;
                                        if (rw) wacc += gv * xrow[ix];
                                    }
                                }
                                if (rw) gwc[ky * kw + kx] += wacc;
                            }
                        }
                    }
                }
        });
}

namespace {

// out[row] += a * b[row], the vectorizable core of all three products
inline void axpy(double *__restrict o, const double *__restrict b, double a, int64_t n) {
    for (int64_t j = 0; j < n; ++j) o[j] += a * b[j];
}

// out[M x N] += A[M x K] * B[K x N]. Blocked so the B panel stays in cache;
// four output rows share each B row load.
void gemm_acc(double *__restrict out, const double *__restrict A, const double *__restrict B,
              int64_t M, int64_t K, int64_t N) {
    constexpr int64_t kKB = 32, kNB = 512;
    for (int64_t n0 = 0; n0 < N; n0 += kNB) {
        int64_t n1 = std::min(N, n0 + kNB);
        for (int64_t k0 = 0; k0 < K; k0 += kKB) {
            int64_t k1 = std::min(K, k0 + kKB);
            int64_t i = 0;
            for (; i + 4 <= M; i += 4) {
                double *__restrict o0 = out + i * N;
                double *__restrict o1 = out + (i + 1) * N;
                double *__restrict o2 = out + (i + 2) * N;
                double *__restrict o3 = out + (i + 3) * N;
                for (int64_t k = k0; k < k1; ++k) {
                    double a0 = A[i * K + k], a1 = A[(i + 1) * K + k];
                    double a2 = A[(i + 2) * K + k], a3 = A[(i + 3) * K + k];
                    const double *__restrict b = B + k * N;
                    for (int64_t j = n0; j < n1; ++j) {
                        double bv = b[j];
                        o0[j] += a0 * bv;
                        o1[j] += a1 * bv;
                        o2[j] += a2 * bv;
                        o3[j] += a3 * bv;
                    }
                }
            }
            for (; i < M; ++i)
                for (int64_t k = k0; k < k1; ++k)
                    axpy(out + i * N + n0, B + k * N + n0, A[i * K + k], n1 - n0);
        }
    }
}

// out[M x N] += A[M x K] * B^T where B is [N x K]: rows of A dot rows of B.
// Eight dot products share one A row; four lanes per row so the reductions
// vectorize without reassociation.
void gemm_acc_bt(double *__restrict out, const double *__restrict A, const double *__restrict B,
                 int64_t M, int64_t K, int64_t N) {
    constexpr int64_t NR = 8, VL = 4;
    for (int64_t i = 0; i < M; ++i) {
        const double *__restrict arow = A + i * K;
        double *orow = out + i * N;
        int64_t j = 0;
        for (; j + NR <= N; j += NR) {
            double acc[NR][VL] = {};
            int64_t k = 0;
            for (; k + VL <= K; k += VL) {
                const double *__restrict av = arow + k;
                for (int64_t r = 0; r < NR; ++r) {
                    const double *__restrict bv = B + (j + r) * K + k;
                    for (int64_t l = 0; l < VL; ++l) acc[r][l] += av[l] * bv[l];
                }
            }
            for (int64_t r = 0; r < NR; ++r) {
                double s = (acc[r][0] + acc[r][1]) + (acc[r][2] + acc[r][3]);
                for (int64_t kk = k; kk < K; ++kk) s += arow[kk] * B[(j + r) * K + kk];
                orow[j + r] += s;
            }
        }
        for (; j < N; ++j) {
            const double *__restrict brow = B + j * K;
            double a0 = 0, a1 = 0, a2 = 0, a3 = 0;
            int64_t k = 0;
            for (; k + 4 <= K; k += 4) {
                a0 += arow[k] * brow[k];
                a1 += arow[k + 1] * brow[k + 1];
                a2 += arow[k + 2] * brow[k + 2];
                a3 += arow[k + 3] * brow[k + 3];
            }
            double acc = (a0 + a1) + (a2 + a3);
            for (; k < K; ++k) acc += arow[k] * brow[k];
            orow[j] += acc;
        }
    }
}

// Patch matrix for one output z-slice: rows ((ci*kz+dz)*ky+dy)*kx+dx, columns
// oy*Xo+ox, zero where the tap falls outside the grid.
struct Im2col3d {
    int Z, Y, X, kz, ky, kx, Zo, Yo, Xo, s, p;
    int64_t plane, vol, oplane;
    // The patch matrix covers output rows [oy0, oy1) of one z-slice, so big
    // grids with many input channels never materialize a full-plane patch.
    int oy0 = 0, oy1 = 0;
    int64_t cols = 0;

    void set_chunk(int lo, int hi) {
        oy0 = lo;
        oy1 = hi;
        cols = static_cast<int64_t>(hi - lo) * Xo;
    }

    void fill(const std::vector<NodePtr> &pxs, int oz, std::vector<double> &patch) const {
        std::fill(patch.begin(), patch.begin() + row_count(pxs) * cols, 0.0);
        int64_t r = 0;
        for (const auto &px : pxs) {
            int C_part = static_cast<int>(px->shape[0]);
            for (int cl = 0; cl < C_part; ++cl) {
                const double *xc = px->data.data() + cl * vol;
                fill_channel(xc, oz, patch.data() + r * cols);
                r += static_cast<int64_t>(kz) * ky * kx;
            }
        }
    }

    int64_t row_count(const std::vector<NodePtr> &pxs) const {
        int64_t c = 0;
        for (const auto &px : pxs) c += px->shape[0];
        return c * kz * ky * kx;
    }

    void fill_channel(const double *xc, int oz, double *rows) const {
        for (int dz = 0; dz < kz; ++dz) {
            int zin = oz * s + dz - p;
            for (int dy = 0; dy < ky; ++dy)
                for (int dx = 0; dx < kx; ++dx) {
                    double *row = rows + (static_cast<int64_t>(dz) * ky * kx + dy * kx + dx) *
                                             cols;
                    if (zin < 0 || zin >= Z) continue;
                    copy_taps(xc + zin * plane, dy, dx, row);
                }
        }
    }

    // one (dy, dx) tap: gather the input row segment feeding each output row
    void copy_taps(const double *xz, int dy, int dx, double *row) const {
        int ylo, yhi, xlo, xhi;
        tap_range(dy - p, s, Y, Yo, ylo, yhi);
        tap_range(dx - p, s, X, Xo, xlo, xhi);
        for (int oy = std::max(ylo, oy0); oy <= std::min(yhi, oy1 - 1); ++oy) {
            const double *xrow = xz + static_cast<int64_t>(oy * s + dy - p) * X + (dx - p);
            double *orow = row + static_cast<int64_t>(oy - oy0) * Xo;
            if (s == 1) {
                std::copy(xrow + xlo, xrow + xhi + 1, orow + xlo);
            } else {
                for (int ox = xlo; ox <= xhi; ++ox) orow[ox] = xrow[ox * s];
            }
        }
    }

    // transpose of fill: scatter-add patch-gradient rows back onto the grid
    void scatter_channel(const double *rows, int oz, double *gxc) const {
        for (int dz = 0; dz < kz; ++dz) {
            int zin = oz * s + dz - p;
            if (zin < 0 || zin >= Z) continue;
            double *gz = gxc + zin * plane;
            for (int dy = 0; dy < ky; ++dy)
                for (int dx = 0; dx < kx; ++dx) {
                    const double *row = rows + (static_cast<int64_t>(dz) * ky * kx + dy * kx +
                                                dx) *
                                                   cols;
                    int ylo, yhi, xlo, xhi;
                    tap_range(dy - p, s, Y, Yo, ylo, yhi);
                    tap_range(dx - p, s, X, Xo, xlo, xhi);
                    for (int oy = std::max(ylo, oy0); oy <= std::min(yhi, oy1 - 1); ++oy) {
                        double *gxrow = gz + static_cast<int64_t>(oy * s + dy - p) * X + (dx - p);
                        const double *grow = row + static_cast<int64_t>(oy - oy0) * Xo;
                        for (int ox = xlo; ox <= xhi; ++ox) gxrow[ox * s] += grow[ox];
                    }
                }
        }
    }
};

}  // namespace

// Patch-buffer budget: chunk the output plane so the im2col matrix stays
// near 256 MB however wide the virtual input concat gets. Mutable so tests
// can force the multi-chunk path on small grids.
namespace detail {
int64_t conv3d_patch_budget = int64_t{1} << 25;
}  // namespace detail

namespace {

int chunk_rows(int64_t patch_rows, int Xo, int Yo) {
    int64_t per_row = std::max<int64_t>(patch_rows * Xo, 1);
    int h = static_cast<int>(std::max<int64_t>(1, detail::conv3d_patch_budget / per_row));
    return std::min(h, Yo);
}

}  // namespace

Tensor conv3d_multi(const std::vector<Tensor> &xs, const Tensor &w, const Tensor &bias,
                    int stride, int padding) {
    check_stride_padding(stride, padding, "conv3d");
    if (xs.empty()) throw ShapeError("conv3d: no inputs");
    NodePtr pw = w.impl();
    NodePtr pbias = bias.defined() ? bias.impl() : nullptr;
    if (pw->shape.size() != 5)
        throw ShapeError("conv3d: weight must be [Co, Ci, kz, ky, kx], got " +
                         shape_str(pw->shape));
    std::vector<NodePtr> pxs;
    int Ci = 0;
    for (const auto &t : xs) {
        NodePtr px = t.impl();
        if (px->shape.size() != 4)
            throw ShapeError("conv3d: input must be [C, Z, Y, X], got " + shape_str(px->shape));
        if (px->shape[1] != xs[0].impl()->shape[1] || px->shape[2] != xs[0].impl()->shape[2] ||
            px->shape[3] != xs[0].impl()->shape[3])
            throw ShapeError("conv3d: input grids disagree, " + shape_str(px->shape) + " vs " +
                             shape_str(xs[0].impl()->shape));
        Ci += px->shape[0];
        pxs.push_back(px);
    }
    int Z = pxs[0]->shape[1], Y = pxs[0]->shape[2], X = pxs[0]->shape[3];
    int Co = pw->shape[0], kz = pw->shape[2], ky_n = pw->shape[3], kx_n = pw->shape[4];
    if (pw->shape[1] != Ci)
        throw ShapeError("conv3d: weight expects " + std::to_string(pw->shape[1]) +
                         " input channels, inputs provide " + std::to_string(Ci));
    if (pbias && pbias->shape != Shape{Co})
        throw ShapeError("conv3d: bias must be [" + std::to_string(Co) + "], got " +
                         shape_str(pbias->shape));
    int Zo = conv_out_extent(Z, kz, stride, padding, "conv3d");
    int Yo = conv_out_extent(Y, ky_n, stride, padding, "conv3d");
    int Xo = conv_out_extent(X, kx_n, stride, padding, "conv3d");
    Im2col3d geom{Z,
                  Y,
                  X,
                  kz,
                  ky_n,
                  kx_n,
                  Zo,
                  Yo,
                  Xo,
                  stride,
                  padding,
                  static_cast<int64_t>(Y) * X,
                  static_cast<int64_t>(Z) * Y * X,
                  static_cast<int64_t>(Yo) * Xo};
    int64_t ovol = static_cast<int64_t>(Zo) * geom.oplane;
    int64_t patch_rows = static_cast<int64_t>(Ci) * kz * ky_n * kx_n;

    std::vector<double> out(static_cast<size_t>(Co) * ovol, 0.0);
    if (pbias)
        for (int co = 0; co < Co; ++co)
            std::fill(out.begin() + co * ovol, out.begin() + (co + 1) * ovol, pbias->data[co]);
    int chunk_h = chunk_rows(patch_rows, Xo, Yo);
    {
        std::vector<double> patch(static_cast<size_t>(patch_rows) * chunk_h * Xo);
        std::vector<double> slab(static_cast<size_t>(Co) * chunk_h * Xo);
        for (int oz = 0; oz < Zo; ++oz) {
            for (int lo = 0; lo < Yo; lo += chunk_h) {
                geom.set_chunk(lo, std::min(lo + chunk_h, Yo));
                geom.fill(pxs, oz, patch);
                std::fill(slab.begin(), slab.begin() + Co * geom.cols, 0.0);
                gemm_acc(slab.data(), pw->data.data(), patch.data(), Co, patch_rows, geom.cols);
                for (int co = 0; co < Co; ++co) {
                    double *oc = out.data() + co * ovol + oz * geom.oplane + lo * Xo;
                    const double *sc = slab.data() + co * geom.cols;
                    for (int64_t i = 0; i < geom.cols; ++i) oc[i] += sc[i];
                }
            }
        }
    }

    std::vector<NodePtr> parents = pxs;
    parents.push_back(pw);
    if (pbias) parents.push_back(pbias);
    return make_node(
        {Co, Zo, Yo, Xo}, std::move(out), std::move(parents),
        [pxs, pw, pbias, Co, Zo, geom, ovol, patch_rows, chunk_h](TensorImpl &self) {
            bool rw = pw->requires_grad;
            bool rb = pbias && pbias->requires_grad;
            bool any_rx = false;
            for (const auto &px : pxs) any_rx = any_rx || px->requires_grad;
            if (rw) pw->ensure_grad();
            if (rb) pbias->ensure_grad();
            for (const auto &px : pxs)
                if (px->requires_grad) px->ensure_grad();
            const double *g = self.grad.data();
            if (rb) {
                for (int co = 0; co < Co; ++co) {
                    const double *gc = g + co * ovol;
                    double acc = 0.0;
                    for (int64_t i = 0; i < ovol; ++i) acc += gc[i];
                    pbias->grad[co] += acc;
                }
            }
            if (!any_rx && !rw) return;
            Im2col3d gm = geom;
            std::vector<double> patch(static_cast<size_t>(patch_rows) * chunk_h * gm.Xo);
            std::vector<double> gslab(static_cast<size_t>(Co) * chunk_h * gm.Xo);
            std::vector<double> gpatch;
            if (any_rx) gpatch.resize(static_cast<size_t>(patch_rows) * chunk_h * gm.Xo);
            for (int oz = 0; oz < Zo; ++oz) {
                for (int lo = 0; lo < gm.Yo; lo += chunk_h) {
                    gm.set_chunk(lo, std::min(lo + chunk_h, gm.Yo));
                    for (int co = 0; co < Co; ++co) {
                        const double *gc = g + co * ovol + oz * gm.oplane + lo * gm.Xo;
                        std::copy(gc, gc + gm.cols, gslab.begin() + co * gm.cols);
                    }
                    if (rw) {
                        gm.fill(pxs, oz, patch);
                        gemm_acc_bt(pw->grad.data(), gslab.data(), patch.data(), Co, gm.cols,
                                    patch_rows);
                    }
                    if (any_rx) {
                        // gpatch = W^T * gslab, one L1-resident row at a time
                        const double *wd = pw->data.data();
                        for (int64_t r = 0; r < patch_rows; ++r) {
                            double *prow = gpatch.data() + r * gm.cols;
                            std::fill(prow, prow + gm.cols, 0.0);
                            for (int co = 0; co < Co; ++co) {
                                double wv = wd[co * patch_rows + r];
                                if (wv == 0.0) continue;
                                axpy(prow, gslab.data() + co * gm.cols, wv, gm.cols);
                            }
                        }
                        int64_t r = 0;
                        for (const auto &px : pxs) {
                            int C_part = static_cast<int>(px->shape[0]);
                            int64_t taps = static_cast<int64_t>(gm.kz) * gm.ky * gm.kx;
                            if (px->requires_grad) {
                                for (int cl = 0; cl < C_part; ++cl)
                                    gm.scatter_channel(gpatch.data() + (r + cl * taps) * gm.cols,
                                                       oz, px->grad.data() + cl * gm.vol);
                            }
                            r += C_part * taps;
                        }
                    }
                }
            }
        });
}

Tensor conv3d(const Tensor &x, const Tensor &w, const Tensor &bias, int stride, int padding) {
    return conv3d_multi({x}, w, bias, stride, padding);
}

Tensor deconv3d(const Tensor &x, const Tensor &w, const Tensor &bias, int stride, int padding) {
    check_stride_padding(stride, padding, "deconv3d");
    NodePtr px = x.impl(), pw = w.impl();
    NodePtr pbias = bias.defined() ? bias.impl() : nullptr;
    if (px->shape.size() != 4)
        throw ShapeError("deconv3d: input must be [C, Z, Y, X], got " + shape_str(px->shape));
    if (pw->shape.size() != 5)
        throw ShapeError("deconv3d: weight must be [Ci, Co, kz, ky, kx], got " +
                         shape_str(pw->shape));
    int Ci = px->shape[0], Z = px->shape[1], Y = px->shape[2], X = px->shape[3];
    int Co = pw->shape[1], kz = pw->shape[2], ky_n = pw->shape[3], kx_n = pw->shape[4];
    if (pw->shape[0] != Ci)
        throw ShapeError("deconv3d: weight expects " + std::to_string(pw->shape[0]) +
                         " input channels, input has " + std::to_string(Ci));
    if (pbias && pbias->shape != Shape{Co})
        throw ShapeError("deconv3d: bias must be [" + std::to_string(Co) + "], got " +
                         shape_str(pbias->shape));
    int Zo = deconv_out_extent(Z, kz, stride, padding, "deconv3d");
    int Yo = deconv_out_extent(Y, ky_n, stride, padding, "deconv3d");
    int Xo = deconv_out_extent(X, kx_n, stride, padding, "deconv3d");
    int s = stride, p = padding;
    int64_t plane = static_cast<int64_t>(Y) * X, oplane = static_cast<int64_t>(Yo) * Xo;
    int64_t vol = static_cast<int64_t>(Z) * plane, ovol = static_cast<int64_t>(Zo) * oplane;

    std::vector<double> out(static_cast<size_t>(Co) * ovol);
    for (int co = 0; co < Co; ++co) {
        double *oc = out.data() + co * ovol;
        std::fill(oc, oc + ovol, pbias ? pbias->data[co] : 0.0);
    }
    for (int ci = 0; ci < Ci; ++ci) {
        const double *xc = px->data.data() + ci * vol;
        for (int co = 0; co < Co; ++co) {
            double *oc = out.data() + co * ovol;
            const double *wc = pw->data.data() +
                               (static_cast<int64_t>(ci) * Co + co) * kz * ky_n * kx_n;
            for (int dz = 0; dz < kz; ++dz) {
                int zlo, zhi;
                tap_range(dz - p, s, Zo, Z, zlo, zhi);
                for (int dy = 0; dy < ky_n; ++dy) {
                    int ylo, yhi;
                    tap_range(dy - p, s, Yo, Y, ylo, yhi);
                    for (int dx = 0; dx < kx_n; ++dx) {
                        double wv = wc[(dz * ky_n + dy) * kx_n + dx];
                        int xlo, xhi;
                        tap_range(dx - p, s, Xo, X, xlo, xhi);
                        for (int iz = zlo; iz <= zhi; ++iz) {
                            const double *xz = xc + iz * plane;
                            double *oz_ptr = oc + (iz * s + dz - p) * oplane;
                            for (int iy = ylo; iy <= yhi; ++iy) {
                                const double *xrow = xz + static_cast<int64_t>(iy) * X;
                                double *orow = oz_ptr +
                                               static_cast<int64_t>(iy * s + dy - p) * Xo +
                                               (dx - p);
                                for (int ix = xlo; ix <= xhi; ++ix)
                                    orow[ix * s] += xrow[ix] * wv;
                            }
                        }
                    }
                }
            }
        }
    }

    std::vector<NodePtr> parents{px, pw};
    if (pbias) parents.push_back(pbias);
    return make_node(
        {Co, Zo, Yo, Xo}, std::move(out), std::move(parents),
        [px, pw, pbias, Ci, Z, Y, X, Co, kz, ky_n, kx_n, Zo, Yo, Xo, s, p, plane, oplane, vol,
         ovol](TensorImpl &self) {
            bool rx = px->requires_grad, rw = pw->requires_grad;
            bool rb = pbias && pbias->requires_grad;
            if (rx) px->ensure_grad();
            if (rw) pw->ensure_grad();
            if (rb) pbias->ensure_grad();
            const double *g = self.grad.data();
            if (rb) {
                for (int co = 0; co < Co; ++co) {
                    const double *gc = g + co * ovol;
                    double acc = 0.0;
                    for (int64_t i = 0; i < ovol; ++i) acc += gc[i];
                    pbias->grad[co] += acc;
                }
            }
            for (int ci = 0; ci < Ci; ++ci) {
                const double *xc = px->data.data() + ci * vol;
                double *gxc = rx ? px->grad.data() + ci * vol : nullptr;
                for (int co = 0; co < Co; ++co) {
                    const double *gc = g + co * ovol;
                    const double *wc = pw->data.data() +
                                       (static_cast<int64_t>(ci) * Co + co) * kz * ky_n * kx_n;
                    double *gwc = rw ? pw->grad.data() +
                                           (static_cast<int64_t>(ci) * Co + co) * kz * ky_n *
                                               kx_n
                                     : nullptr;
                    for (int dz = 0; dz < kz; ++dz) {
                        int zlo, zhi;
                        tap_range(dz - p, s, Zo, Z, zlo, zhi);
                        for (int dy = 0; dy < ky_n; ++dy) {
                            int ylo, yhi;
                            tap_range(dy - p, s, Yo, Y, ylo, yhi);
                            for (int dx = 0; dx < kx_n; ++dx) {
                                double wv = wc[(dz * ky_n + dy) * kx_n + dx];
                                int xlo, xhi;
                                tap_range(dx - p, s, Xo, X, xlo, xhi);
                                double wacc = 0.0;
                                for (int iz = zlo; iz <= zhi; ++iz) {
                                    const double *xz = xc + iz * plane;
                                    double *gxz = rx ? gxc + iz * plane : nullptr;
                                    const double *gz = gc + (iz * s + dz - p) * oplane;
                                    for (int iy = ylo; iy <= yhi; ++iy) {
                                        const double *xrow = xz + static_cast<int64_t>(iy) * X;
                                        double *gxrow =
                                            rx ? gxz + static_cast<int64_t>(iy) * X : nullptr;
                                        const double *grow =
                                            gz + static_cast<int64_t>(iy * s + dy - p) * Xo +
                                            (dx - p);
                                        for (int ix = xlo; ix <= xhi; ++ix) {
                                            double gv = grow[ix * s];
                                            if (rx) gxrow[ix] += gv * wv;
                                            if (rw) wacc += gv * xrow[ix];
                                        }
                                    }
                                }
                                if (rw) gwc[(dz * ky_n + dy) * kx_n + dx] += wacc;
                            }
                        }
                    }
                }
            }
        });
}

Tensor upsample3d_trilinear(const Tensor &x, int factor) {
    if (factor < 1) throw ShapeError("upsample3d: factor must be >= 1");
    NodePtr px = x.impl();
    if (px->shape.size() != 4)
        throw ShapeError("upsample3d: input must be [C, Z, Y, X], got " + shape_str(px->shape));
    int C = px->shape[0], Z = px->shape[1], Y = px->shape[2], X = px->shape[3];
    int Zo = Z * factor, Yo = Y * factor, Xo = X * factor;

    // Half-pixel-center source coordinates, clamped at the boundary.
    auto axis_taps = [factor](int in, int out) {
        std::vector<int> i0(out), i1(out);
        std::vector<double> w1(out);
        for (int o = 0; o < out; ++o) {
            double src = (o + 0.5) / factor - 0.5;
            src = std::min(std::max(src, 0.0), static_cast<double>(in - 1));
            int lo = static_cast<int>(std::floor(src));
            i0[o] = lo;
            i1[o] = std::min(lo + 1, in - 1);
            w1[o] = src - lo;
        }
        return std::tuple{i0, i1, w1};
    };
    auto [zi0, zi1, zw] = axis_taps(Z, Zo);
    auto [yi0, yi1, yw] = axis_taps(Y, Yo);
    auto [xi0, xi1, xw] = axis_taps(X, Xo);

    int64_t plane = static_cast<int64_t>(Y) * X, vol = static_cast<int64_t>(Z) * plane;
    int64_t oplane = static_cast<int64_t>(Yo) * Xo, ovol = static_cast<int64_t>(Zo) * oplane;
    std::vector<double> out(static_cast<size_t>(C) * ovol);
    for (int c = 0; c < C; ++c) {
        const double *xc = px->data.data() + c * vol;
        double *oc = out.data() + c * ovol;
        for (int oz = 0; oz < Zo; ++oz) {
            double wz1 = zw[oz], wz0 = 1.0 - wz1;
            const double *z0 = xc + zi0[oz] * plane, *z1 = xc + zi1[oz] * plane;
            for (int oy = 0; oy < Yo; ++oy) {
                double wy1 = yw[oy], wy0 = 1.0 - wy1;
                const double *r00 = z0 + static_cast<int64_t>(yi0[oy]) * X;
                const double *r01 = z0 + static_cast<int64_t>(yi1[oy]) * X;
                const double *r10 = z1 + static_cast<int64_t>(yi0[oy]) * X;
                const double *r11 = z1 + static_cast<int64_t>(yi1[oy]) * X;
                double *orow = oc + oz * oplane + static_cast<int64_t>(oy) * Xo;
                for (int ox = 0; ox < Xo; ++ox) {
                    double wx1 = xw[ox], wx0 = 1.0 - wx1;
                    int a = xi0[ox], b = xi1[ox];
                    double vy0 = wy0 * (wx0 * r00[a] + wx1 * r00[b]) +
                                 wy1 * (wx0 * r01[a] + wx1 * r01[b]);
                    double vy1 = wy0 * (wx0 * r10[a] + wx1 * r10[b]) +
                                 wy1 * (wx0 * r11[a] + wx1 * r11[b]);
                    orow[ox] = wz0 * vy0 + wz1 * vy1;
                }
            }
        }
    }
    return make_node(
        {C, Zo, Yo, Xo}, std::move(out), {px},
        [px, C, X, Zo, Yo, Xo, plane, vol, oplane, ovol, zi0 = zi0, zi1 = zi1, zw = zw,
         yi0 = yi0, yi1 = yi1, yw = yw, xi0 = xi0, xi1 = xi1, xw = xw](TensorImpl &self) {
            if (!px->requires_grad) return;
            px->ensure_grad();
            const double *g = self.grad.data();
            for (int c = 0; c < C; ++c) {
                double *gxc = px->grad.data() + c * vol;
                const double *gc = g + c * ovol;
                for (int oz = 0; oz < Zo; ++oz) {
                    double wz1 = zw[oz], wz0 = 1.0 - wz1;
                    double *gz0 = gxc + zi0[oz] * plane, *gz1 = gxc + zi1[oz] * plane;
                    for (int oy = 0; oy < Yo; ++oy) {
                        double wy1 = yw[oy], wy0 = 1.0 - wy1;
                        double *g00 = gz0 + static_cast<int64_t>(yi0[oy]) * X;
                        double *g01 = gz0 + static_cast<int64_t>(yi1[oy]) * X;
                        double *g10 = gz1 + static_cast<int64_t>(yi0[oy]) * X;
                        double *g11 = gz1 + static_cast<int64_t>(yi1[oy]) * X;
                        const double *grow = gc + oz * oplane + static_cast<int64_t>(oy) * Xo;
                        for (int ox = 0; ox < Xo; ++ox) {
                            double wx1 = xw[ox], wx0 = 1.0 - wx1;
                            int a = xi0[ox], b = xi1[ox];
                            double gv = grow[ox];
                            g00[a] += gv * wz0 * wy0 * wx0;
                            g00[b] += gv * wz0 * wy0 * wx1;
                            g01[a] += gv * wz0 * wy1 * wx0;
                            g01[b] += gv * wz0 * wy1 * wx1;
                            g10[a] += gv * wz1 * wy0 * wx0;
                            g10[b] += gv * wz1 * wy0 * wx1;
                            g11[a] += gv * wz1 * wy1 * wx0;
                            g11[b] += gv * wz1 * wy1 * wx1;
                        }
                    }
                }
            }
        });
}

}  // namespace focc
