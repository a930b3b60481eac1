#pragma once

#include <utility>
#include <vector>

#include "risclip/backbone.hpp"
#include "risclip/params.hpp"

namespace risclip {

// Bottleneck width for the residual adapters. Table-derived presets for the
// two published backbone sizes; 70% of the encoder width otherwise.
int adapter_bottleneck(int width, bool image_encoder);

enum class Activation { relu, gelu, identity };
Activation activation_from_string(const std::string& tag);

template <typename T>
struct AdapterVars {
    Var<T> down_w, down_b, up_w, up_b, scale;
    Activation act = Activation::relu;
};

// delta = scale ⊙ (up(act(down(x)))); the caller adds it residually
template <typename T>
Var<T> adapter_forward(const Var<T>& x, const AdapterVars<T>& p);

template <typename T>
struct CfeVars {
    Var<T> t2s_w, t2s_b, v2s_w, v2s_b;      // modality -> shared
    AttnVars<T> mhca_t, mhca_v;             // text-query / image-query cross attention
    Var<T> s2t_w, s2t_b, s2v_w, s2v_b;      // shared -> modality (zero at init)
    Var<T> scale_t, scale_v;
};

// Bidirectional cross-modal deltas for the paired transformer layers.
// Text padding positions are masked as keys and receive zero deltas.
template <typename T>
std::pair<Var<T>, Var<T>> cfe_forward(const Var<T>& t, const Var<T>& v, const CfeVars<T>& p,
                                      const std::vector<std::uint8_t>& text_valid);

template <typename T>
struct SkeSideVars {
    Var<T> ln_cross_g, ln_cross_b;
    AttnVars<T> mhca;
    Var<T> ln_self_g, ln_self_b;
    AttnVars<T> mhsa;
    Var<T> ln_mlp_g, ln_mlp_b;
    Var<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    Var<T> scale_cross, scale_self, scale_mlp;
};

template <typename T>
struct SkeVars {
    SkeSideVars<T> img, txt;
};

// Inter- then intra-modal conditioning in the shared space. Cross keys are
// the pre-update other stream, so the two modalities update symmetrically.
template <typename T>
std::pair<Var<T>, Var<T>> ske_forward(const Var<T>& v, const Var<T>& t, const SkeVars<T>& p,
                                      const std::vector<std::uint8_t>& text_valid);

struct LayerPairing {
    std::vector<std::pair<int, int>> pairs;  // (text layer, image layer), deepest last
};

LayerPairing build_layer_pairing(int text_layers, int image_layers, int n_cfe);

// largest head count <= the paper's setting that divides the shared dim
int cfe_head_count(int shared_dim);
int ske_head_count(int shared_dim);

// --- registry ----------------------------------------------------------------

struct AdaptationDims {
    int text_width, image_width, shared_dim;
    int text_layers, image_layers;
    int n_adapter_layers, n_cfe, n_ske;
    int cfe_heads = 0, ske_heads = 0;  // 0 = derived defaults
};

void add_adaptation_params(ParamStore& store, const AdaptationDims& dims, std::uint64_t seed);

template <typename T>
AdapterVars<T> adapter_vars(const VarMap<T>& p, const std::string& prefix);
template <typename T>
CfeVars<T> cfe_vars(const VarMap<T>& p, int module, int heads);
template <typename T>
SkeVars<T> ske_vars(const VarMap<T>& p, int module, int heads);

}  // namespace risclip
