#include "focc/forecast.hpp"

#include <numeric>

namespace focc {

void ForecastConfig::validate() const {
    if (channels <= 0 || heads <= 0)
        throw ConfigError("forecast config: channels and heads must be positive");
    if (channels % heads != 0)
        throw ConfigError("forecast config: channels " + std::to_string(channels) +
                          " not divisible by heads " + std::to_string(heads));
    if (layers < 1) throw ConfigError("forecast config: need at least one layer");
    if (n_frames < 1) throw ConfigError("forecast config: need at least one frame");
    if (num_horizons < 1) throw ConfigError("forecast config: need at least one horizon");
    if (num_cameras < 1) throw ConfigError("forecast config: need at least one camera");
    if (spatial_h < 1 || spatial_w < 1)
        throw ConfigError("forecast config: spatial extents must be positive");
    if (ffn_hidden < 1) throw ConfigError("forecast config: ffn_hidden must be positive");
    int slice_sum = scale_slice_widths[0] + scale_slice_widths[1] +
                    scale_slice_widths[2] + scale_slice_widths[3];
    if (slice_sum != channels)
        throw ConfigError("forecast config: scale slice widths sum to " +
                          std::to_string(slice_sum) + ", expected channels " +
                          std::to_string(channels));
}

FutureStateSynthesizer::FutureStateSynthesizer(ParamRegistry &reg,
                                               const std::string &name, int dim,
                                               Rng &rng)
    : fc1(reg, name + ".fc1", dim, dim, rng),
      fc2(reg, name + ".fc2", dim, dim, rng),
      fc3(reg, name + ".fc3", dim, dim, rng) {}

Tensor FutureStateSynthesizer::forward(const Tensor &x) const {
    return fc3.forward(relu(fc2.forward(relu(fc1.forward(x)))));
}

CrossAttentionForecaster::CrossAttentionForecaster(ParamRegistry &reg,
                                                   const std::string &prefix,
                                                   const ForecastConfig &config,
                                                   Rng &rng)
    : config_(config) {
    config.validate();
    int c = config.channels;
    // contextual embedding tables start at zero: adding them is the identity
    // until training moves them
    scale_embedding = reg.add(prefix + "emb.scale", Tensor::zeros({4, c}));
    camera_embedding = reg.add(prefix + "emb.camera", Tensor::zeros({config.num_cameras, c}));
    time_embedding = reg.add(prefix + "emb.time", Tensor::zeros({config.n_frames, c}));
    horizon_embedding = reg.add(prefix + "emb.horizon", Tensor::zeros({config.num_horizons, c}));

    for (int l = 0; l < config.layers; ++l) {
        std::string base = prefix + "layer" + std::to_string(l);
        FutureInteractionLayer layer;
        layer.ln_cross = LayerNormLayer(reg, base + ".ln_cross", c);
        layer.ln_self = LayerNormLayer(reg, base + ".ln_self", c);
        layer.ln_ffn = LayerNormLayer(reg, base + ".ln_ffn", c);
        layer.ln_synth = LayerNormLayer(reg, base + ".ln_synth", c);
        layer.cross_attn = MultiHeadAttention(reg, base + ".cross", c, config.heads, rng);
        layer.self_attn = MultiHeadAttention(reg, base + ".self", c, config.heads, rng);
        layer.ffn1 = LinearLayer(reg, base + ".ffn1", c, config.ffn_hidden, rng);
        layer.ffn2 = LinearLayer(reg, base + ".ffn2", config.ffn_hidden, c, rng);
        layers_.push_back(layer);
    }
    // single parameter set, aliased by every layer and every frame step
    synth_ = FutureStateSynthesizer(reg, prefix + "synth", c, rng);

    if (config.query_mode == QueryMode::Learned)
        learned_queries_ = reg.add(
            prefix + "queries.learned",
            Tensor::normal({config.spatial_h * config.spatial_w, config.num_cameras, c},
                           0.0, 0.02, rng));
}

Tensor CrossAttentionForecaster::flatten_to_queries(const Tensor &f) const {
    int m = f.dim(0), c = f.dim(1), h = f.dim(2), w = f.dim(3);
    return reshape(permute(f, {2, 3, 0, 1}), {h * w, m, c});
}

Tensor CrossAttentionForecaster::unflatten_queries(const Tensor &q) const {
    int m = config_.num_cameras, c = config_.channels;
    int h = config_.spatial_h, w = config_.spatial_w;
    return permute(reshape(q, {h, w, m, c}), {2, 3, 0, 1});
}

Tensor CrossAttentionForecaster::add_contextual_embeddings(const Tensor &f,
                                                           int time_idx) const {
    if (f.ndim() != 4 || f.dim(0) != config_.num_cameras || f.dim(1) != config_.channels)
        throw ShapeError("add_contextual_embeddings: expected [" +
                         std::to_string(config_.num_cameras) + "," +
                         std::to_string(config_.channels) + ",h,w], got " +
                         shape_str(f.shape()));
    if (time_idx < 0 || time_idx >= config_.n_frames)
        throw ContractError("add_contextual_embeddings: time index " +
                            std::to_string(time_idx) + " outside the " +
                            std::to_string(config_.n_frames) + "-frame window");
    Tensor out = f;
    if (config_.use_scale_emb) {
        // each fused channel slice keeps the embedding row of the scale that
        // produced it: row r contributes its channels within slice r
        std::vector<Tensor> chunks;
        int offset = 0;
        for (int r = 0; r < 4; ++r) {
            int width = config_.scale_slice_widths[r];
            chunks.push_back(slice(slice(scale_embedding, 0, r, 1), 1, offset, width));
            offset += width;
        }
        Tensor per_channel = reshape(concat(chunks, 1), {1, config_.channels, 1, 1});
        out = add(out, per_channel);
    }
    if (config_.use_cam_emb)
        out = add(out, reshape(camera_embedding, {config_.num_cameras, config_.channels, 1, 1}));
    if (config_.use_time_emb)
        out = add(out, reshape(slice(time_embedding, 0, time_idx, 1),
                               {1, config_.channels, 1, 1}));
    return out;
}

Tensor CrossAttentionForecaster::init_queries(const Tensor &fe_current,
                                              int horizon_idx) const {
    if (horizon_idx < 0 || horizon_idx >= config_.num_horizons)
        throw ContractError("init_queries: horizon index " + std::to_string(horizon_idx) +
                            " outside the configured " +
                            std::to_string(config_.num_horizons) + " horizons");
    Tensor horizon_row = reshape(slice(horizon_embedding, 0, horizon_idx, 1),
                                 {1, 1, config_.channels});
    if (config_.query_mode == QueryMode::Learned)
        return add(learned_queries_, horizon_row);
    return add(flatten_to_queries(fe_current), horizon_row);
}

Tensor CrossAttentionForecaster::interaction_step(const Tensor &queries,
                                                  const Tensor &fe_t) const {
    int lq = queries.dim(0) * queries.dim(1);
    Tensor q = reshape(queries, {lq, config_.channels});
    Tensor tokens = reshape(flatten_to_queries(fe_t),
                            {fe_t.dim(2) * fe_t.dim(3) * fe_t.dim(0), config_.channels});
    for (const auto &layer : layers_) {
        q = add(q, layer.cross_attn.forward(layer.ln_cross.forward(q), tokens));
        Tensor normed = layer.ln_self.forward(q);
        q = add(q, layer.self_attn.forward(normed, normed));
        q = add(q, layer.ffn2.forward(relu(layer.ffn1.forward(layer.ln_ffn.forward(q)))));
        q = add(q, synth_.forward(layer.ln_synth.forward(q)));
    }
    return reshape(q, queries.shape());
}

std::vector<Tensor> CrossAttentionForecaster::forecast(const std::vector<Tensor> &frames) {
    if (static_cast<int>(frames.size()) != config_.n_frames)
        throw ContractError("forecast: expected " + std::to_string(config_.n_frames) +
                            " chronological frames, got " + std::to_string(frames.size()));
    std::vector<Tensor> embedded;
    for (int t = 0; t < config_.n_frames; ++t)
        embedded.push_back(add_contextual_embeddings(frames[t], t));

    std::vector<Tensor> futures;
    for (int k = 0; k < config_.num_horizons; ++k) {
        Tensor q = init_queries(embedded.back(), k);
        for (const Tensor &fe : embedded) // oldest first through the current frame
            q = interaction_step(q, fe);
        futures.push_back(unflatten_queries(q));
    }
    return futures;
}

}  // namespace focc
