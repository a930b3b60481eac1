#pragma once

#include <array>

#include "risclip/adaptation.hpp"
#include "risclip/backbone.hpp"

namespace risclip {

struct ModelConfig {
    BackboneConfig backbone;
    int n_adapter_layers = 4;
    int n_cfe = 2;
    int n_ske = 2;
    float logit_scale_init = 10.0f;
    bool adapters = true;
    bool cfe = true;
    bool ske = true;

    int effective_adapter_layers() const { return adapters ? n_adapter_layers : 0; }
    int effective_n_cfe() const { return cfe ? n_cfe : 0; }
    int effective_n_ske() const { return ske ? n_ske : 0; }
    void validate() const;
};

struct GroundingMap {
    Tensor<float> patch_logits;  // (g, g)
    Tensor<float> patch_probs;   // (g, g), sigmoided
};

// logits[i] = logit_scale * cos(V_patch[i], t_eos), reshaped row-major
GroundingMap grounding_map(const Tensor<float>& v_patch, const Tensor<float>& t_eos,
                           float logit_scale, int grid);

struct ForwardDiagnostics {
    int eos_index = 0;
    int grid = 0;
    float logit_min = 0, logit_max = 0;
};

template <typename T>
struct ModelOutput {
    Var<T> patch_logits;            // (N)
    Var<T> patch_probs;             // (N)
    std::array<Var<T>, 4> early;    // image layers 1..4 outputs, each (1+N, width)
    Var<T> v_patch;                 // (N, d), post-SKE
    Var<T> t_eos;                   // (1, d), post-SKE
    ForwardDiagnostics diag;
};

// Full pipeline: dual encoder walked layer by layer with adapter deltas after
// MHSA/MLP, CFE deltas applied to the paired layers' inputs, value-path
// V_patch, SKE refinement in the shared space, then the grounding map.
// `need_early` controls the decoder tap; configs with fewer than four image
// layers fail there.
template <typename T>
ModelOutput<T> model_forward(const VarMap<T>& params, const ModelConfig& cfg,
                             const TokenSequence& tokens, const Tensor<T>& image,
                             bool need_early = true);

// registers backbone + adaptation + logit_scale (decoder is registered separately)
void add_model_params(ParamStore& store, const ModelConfig& cfg, std::uint64_t seed);

}  // namespace risclip
