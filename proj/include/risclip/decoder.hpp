#pragma once

#include <array>
#include <functional>

#include "risclip/model.hpp"

namespace risclip {

struct DecoderConfig {
    std::vector<int> channels;          // D4..D1 output widths; empty = derived
    std::string upsample = "bilinear";  // or "nearest"

    // default plan: image_width/2 halving per layer, floored at 16
    std::vector<int> resolved_channels(int image_width) const;
    Resize upsample_mode() const;
    void validate() const;
};

// invoked per batch-norm layer in training mode with fresh batch statistics
using BnStatsSink =
    std::function<void(const std::string& layer, const Tensor<float>& mean,
                       const Tensor<float>& var_unbiased)>;

template <typename T>
struct DecoderOutput {
    Var<T> probs;  // (2, H, W) sigmoided scores: channel 0 background, 1 foreground
};

// d4 = D4([v4; map_patch]); d_i = D_i([d_{i+1}; u(v_i)]); 1x1 head + sigmoid,
// then a final resize when 16*g != image_size.
template <typename T>
DecoderOutput<T> decoder_forward(const VarMap<T>& params, const ModelConfig& mcfg,
                                 const DecoderConfig& dcfg,
                                 const std::array<Var<T>, 4>& early, const Var<T>& patch_probs,
                                 bool train_mode, const BnStatsSink& bn_sink = nullptr);

// per-pixel argmax over the two channels; tie goes to background
Tensor<std::uint8_t> binarize_prediction(const Tensor<float>& probs);

void add_decoder_params(ParamStore& store, const ModelConfig& mcfg, const DecoderConfig& dcfg,
                        std::uint64_t seed);

// momentum-0.1 running statistics update, applied by the training loop
void update_bn_buffers(ParamStore& store, const std::string& layer, const Tensor<float>& mean,
                       const Tensor<float>& var_unbiased, float momentum = 0.1f);

}  // namespace risclip
