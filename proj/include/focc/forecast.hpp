#pragma once

#include <array>
#include <memory>
#include <vector>

#include "focc/nn.hpp"

namespace focc {

enum class QueryMode { CurrentFrame, Learned };

struct ForecastConfig {
    int channels = 64;   // fused feature width C
    int heads = 4;
    int ffn_hidden = 256; // 4C at toy scale, 1024 at full scale
    int layers = 3;
    int n_frames = 4;     // observed context length N
    int num_horizons = 3;
    int num_cameras = 2;
    int spatial_h = 4, spatial_w = 4; // feature grid (input extents / 16)
    // channel slice widths of the fused map, for per-scale embedding rows
    std::array<int, 4> scale_slice_widths = {4, 6, 16, 38};
    bool use_scale_emb = true, use_cam_emb = true, use_time_emb = true;
    QueryMode query_mode = QueryMode::CurrentFrame;

    void validate() const; // ConfigError on violation
};

// Common interface: N chronological per-camera feature maps [M,C,h,w]
// (oldest first, last = current frame) -> one synthesized map per horizon.
class Forecaster {
  public:
    virtual ~Forecaster() = default;
    virtual std::vector<Tensor> forecast(const std::vector<Tensor> &frames) = 0;
};

// Three fully connected layers, hidden width C, ReLU between.  A single
// instance is shared by every interaction layer and every timestep.
struct FutureStateSynthesizer {
    FutureStateSynthesizer() = default;
    FutureStateSynthesizer(ParamRegistry &reg, const std::string &name, int dim, Rng &rng);
    Tensor forward(const Tensor &x) const; // [L,C] -> [L,C]
    LinearLayer fc1, fc2, fc3;
};

// One pre-norm residual block: cross-attention onto a frame's tokens, then
// self-attention over the queries, a feed-forward, and the shared synthesizer.
struct FutureInteractionLayer {
    LayerNormLayer ln_cross, ln_self, ln_ffn, ln_synth;
    MultiHeadAttention cross_attn, self_attn;
    LinearLayer ffn1, ffn2;
};

// Cross-attention future feature synthesis: enriches observed features with
// contextual embeddings, then evolves per-horizon state queries through the
// observed frames in chronological order.
class CrossAttentionForecaster : public Forecaster {
  public:
    CrossAttentionForecaster(ParamRegistry &reg, const std::string &prefix,
                             const ForecastConfig &config, Rng &rng);

    // F [M,C,h,w] + scale/camera/time embedding rows, broadcast spatially.
    // time_idx indexes the observed window 0..N-1 (oldest..current).
    Tensor add_contextual_embeddings(const Tensor &f, int time_idx) const;

    // queries [(h*w), M, C] for one horizon; CurrentFrame mode flattens the
    // (embedded) current frame and adds the horizon row, Learned mode is an
    // input-independent parameter.
    Tensor init_queries(const Tensor &fe_current, int horizon_idx) const;

    // one observed frame's worth of interaction: all L layers in sequence
    Tensor interaction_step(const Tensor &queries, const Tensor &fe_t) const;

    // raw encoder features, oldest first -> {F_{T+k}} as [M,C,h,w] per horizon
    std::vector<Tensor> forecast(const std::vector<Tensor> &frames) override;

    const ForecastConfig &config() const { return config_; }
    FutureStateSynthesizer &synthesizer() { return synth_; }
    std::vector<FutureInteractionLayer> &layers() { return layers_; }
    Tensor scale_embedding, camera_embedding, time_embedding, horizon_embedding;

  private:
    Tensor flatten_to_queries(const Tensor &f) const;   // [M,C,h,w] -> [(hw),M,C]
    Tensor unflatten_queries(const Tensor &q) const;    // inverse

    ForecastConfig config_;
    std::vector<FutureInteractionLayer> layers_;
    FutureStateSynthesizer synth_;
    Tensor learned_queries_; // only registered in Learned mode
};

}  // namespace focc
