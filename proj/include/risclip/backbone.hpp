#pragma once

#include <array>
#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "risclip/params.hpp"

namespace risclip {

// CLIP-style frozen dual encoder at configurable (desk) scale.
struct BackboneConfig {
    int image_size = 64;
    int patch_size = 16;
    int image_layers = 4;
    int text_layers = 4;
    int image_width = 64;
    int text_width = 48;
    int shared_dim = 32;
    int image_heads = 4;
    int text_heads = 4;
    int context_length = 16;
    int vocab_size = 64;

    int grid() const { return image_size / patch_size; }
    int n_visual() const { return grid() * grid(); }
    void validate() const;
};

// --- tokenizer ---------------------------------------------------------------

struct Vocabulary {
    static constexpr int pad_id = 0;
    static constexpr int sos_id = 1;
    static constexpr int eos_id = 2;
    static constexpr int unk_id = 3;

    std::vector<std::string> words;  // word i has id 4 + i
    std::unordered_map<std::string, int> index;

    static Vocabulary from_words(std::vector<std::string> words);
    int lookup(const std::string& word) const;
    int size() const { return 4 + static_cast<int>(words.size()); }
};

struct TokenSequence {
    std::vector<int> ids;
    int eos_index = 1;
    std::vector<std::uint8_t> valid;  // true up to and including eos_index

    void validate(const BackboneConfig& cfg) const;
};

// Pluggable text splitter. The default lowercases, strips punctuation and
// splits on whitespace; a BPE implementation can slot in behind the same
// interface.
class Tokenizer {
public:
    virtual ~Tokenizer() = default;
    virtual std::vector<std::string> split(const std::string& text) const = 0;
};

class WhitespaceTokenizer : public Tokenizer {
public:
    std::vector<std::string> split(const std::string& text) const override;
};

TokenSequence tokenize(const std::string& text, const Vocabulary& vocab,
                       const BackboneConfig& cfg);
TokenSequence tokenize(const std::string& text, const Vocabulary& vocab,
                       const BackboneConfig& cfg, const Tokenizer& splitter);

// --- transformer building blocks ----------------------------------------------

template <typename T>
struct AttnVars {
    Var<T> wq, bq, wk, bk, wv, bv, wo, bo;
    int heads = 1;
};

// Multi-head attention. `keep` masks keys per query row (shape nq x nk);
// pass an empty tensor for no masking.
template <typename T>
Var<T> mha(const AttnVars<T>& p, const Var<T>& q_in, const Var<T>& k_in, const Var<T>& v_in,
           const Tensor<std::uint8_t>& keep);

template <typename T>
struct TransformerLayerVars {
    Var<T> ln1_g, ln1_b;
    AttnVars<T> attn;
    Var<T> ln2_g, ln2_b;
    Var<T> mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

template <typename T>
using DeltaHook = std::function<Var<T>(const Var<T>&)>;  // stream -> residual delta

// Pre-LN layer: x += MHSA(LN1(x)); x += MLP(LN2(x)); optional residual hooks
// applied after each submodule.
template <typename T>
Var<T> transformer_layer(const TransformerLayerVars<T>& lv, Var<T> x,
                         const Tensor<std::uint8_t>& attn_keep,
                         const DeltaHook<T>& post_attn = nullptr,
                         const DeltaHook<T>& post_mlp = nullptr);

// MaskCLIP-style variant of the final image layer: each token is replaced by
// its own value projection (no attention mixing) before the output projection.
template <typename T>
Var<T> transformer_layer_value_path(const TransformerLayerVars<T>& lv, Var<T> x,
                                    const DeltaHook<T>& post_attn = nullptr,
                                    const DeltaHook<T>& post_mlp = nullptr);

// --- parameter registry ---------------------------------------------------------

void add_backbone_params(ParamStore& store, const BackboneConfig& cfg, std::uint64_t seed);

// registry helpers shared with the adaptation blocks
void add_linear_params(ParamStore& s, const std::string& name, int in, int out,
                       std::uint64_t seed);
void add_zero_linear_params(ParamStore& s, const std::string& name, int in, int out);
void add_layer_norm_params(ParamStore& s, const std::string& name, int n);
void add_attention_params(ParamStore& s, const std::string& name, int width, std::uint64_t seed,
                          bool zero_value_proj = false);

template <typename T>
TransformerLayerVars<T> text_layer_vars(const VarMap<T>& p, int layer, const BackboneConfig& cfg);
template <typename T>
TransformerLayerVars<T> image_layer_vars(const VarMap<T>& p, int layer, const BackboneConfig& cfg);

// --- encoder pieces (shared between the frozen ops and the full model) -----------

template <typename T>
Var<T> text_embed(const TokenSequence& tokens, const VarMap<T>& p, const BackboneConfig& cfg);

Tensor<std::uint8_t> text_attn_keep(const TokenSequence& tokens, const BackboneConfig& cfg);

// final LN + projection into the shared space, all token rows
template <typename T>
Var<T> text_head(const Var<T>& x, const VarMap<T>& p);

template <typename T>
Var<T> image_embed(const Tensor<T>& image, const VarMap<T>& p, const BackboneConfig& cfg);

// post LN + projection into the shared space ([CLS] row retained)
template <typename T>
Var<T> image_head(const Var<T>& x, const VarMap<T>& p);

void check_finite_activation(const Tensor<float>& t, const std::string& where);
void check_finite_activation(const Tensor<double>& t, const std::string& where);

// --- frozen encoder ops -----------------------------------------------------------

template <typename T>
struct TextFeatures {
    std::vector<Var<T>> per_layer;  // text_layers entries, each (context, text_width)
    Var<T> t_eos;                   // (1, d)
    Var<T> token_shared;            // (context, d)
};

template <typename T>
struct ImageFeatures {
    std::vector<Var<T>> per_layer;  // image_layers entries, each (1+N, image_width)
};

template <typename T>
TextFeatures<T> encode_text(const TokenSequence& tokens, const VarMap<T>& p,
                            const BackboneConfig& cfg);

template <typename T>
ImageFeatures<T> encode_image(const Tensor<T>& image, const VarMap<T>& p,
                              const BackboneConfig& cfg);

// value-token path; returns V_patch (N, d), [CLS] dropped
template <typename T>
Var<T> encode_image_value_path(const Tensor<T>& image, const VarMap<T>& p,
                               const BackboneConfig& cfg);

}  // namespace risclip
