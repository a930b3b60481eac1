#include "risclip/model.hpp"

#include <algorithm>
#include <cmath>

namespace risclip {

void ModelConfig::validate() const {
    backbone.validate();
    if (n_adapter_layers < 0) throw ValidationError("model: n_adapter_layers must be >= 0");
    if (adapters && n_adapter_layers > std::max(backbone.text_layers, backbone.image_layers))
        throw ValidationError("model: n_adapter_layers exceeds encoder depth");
    if (n_cfe < 0 || n_ske < 0) throw ValidationError("model: module counts must be >= 0");
    if (cfe && n_cfe > std::min(backbone.text_layers, backbone.image_layers))
        throw ValidationError("model: n_cfe=" + std::to_string(n_cfe) +
                              " exceeds min encoder depth");
    if (!(logit_scale_init > 0))
        throw ValidationError("model: logit_scale_init must be positive");
}

void add_model_params(ParamStore& store, const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    add_backbone_params(store, cfg.backbone, seed);
    AdaptationDims dims;
    dims.text_width = cfg.backbone.text_width;
    dims.image_width = cfg.backbone.image_width;
    dims.shared_dim = cfg.backbone.shared_dim;
    dims.text_layers = cfg.backbone.text_layers;
    dims.image_layers = cfg.backbone.image_layers;
    dims.n_adapter_layers = cfg.effective_adapter_layers();
    dims.n_cfe = cfg.effective_n_cfe();
    dims.n_ske = cfg.effective_n_ske();
    add_adaptation_params(store, dims, seed);
    store.add("model.logit_scale", Tensor<float>::full({1}, cfg.logit_scale_init));
}

GroundingMap grounding_map(const Tensor<float>& v_patch, const Tensor<float>& t_eos,
                           float logit_scale, int grid) {
    if (v_patch.rank() != 2 || v_patch.dim(0) != grid * grid)
        throw ValidationError("grounding_map: V_patch rows != grid^2");
    Tensor<float> t2 = t_eos;
    if (t2.rank() == 1) t2.shape = {1, t2.dim(0)};
    Var<float> cos = cosine_rows(constant(v_patch), constant(std::move(t2)));
    GroundingMap gm;
    gm.patch_logits = Tensor<float>({grid, grid});
    gm.patch_probs = Tensor<float>({grid, grid});
    for (int i = 0; i < grid * grid; ++i) {
        const float logit = logit_scale * cos->value[i];
        gm.patch_logits[i] = logit;
        gm.patch_probs[i] = 1.0f / (1.0f + std::exp(-logit));
    }
    return gm;
}

template <typename T>
ModelOutput<T> model_forward(const VarMap<T>& params, const ModelConfig& cfg,
                             const TokenSequence& tokens, const Tensor<T>& image,
                             bool need_early) {
    cfg.validate();
    tokens.validate(cfg.backbone);
    const BackboneConfig& bb = cfg.backbone;
    if (need_early && bb.image_layers < 4)
        throw ValidationError("decoder wiring needs >= 4 image layers, config has " +
                              std::to_string(bb.image_layers));

    const int adapt_text = std::min(cfg.effective_adapter_layers(), bb.text_layers);
    const int adapt_image = std::min(cfg.effective_adapter_layers(), bb.image_layers);
    const LayerPairing pairing =
        build_layer_pairing(bb.text_layers, bb.image_layers, cfg.effective_n_cfe());
    const int cfe_heads = cfe_head_count(bb.shared_dim);
    const int ske_heads = ske_head_count(bb.shared_dim);

    auto adapter_hook = [&](const std::string& encoder, int layer, int first_adapted,
                            const char* which) -> DeltaHook<T> {
        if (layer < first_adapted) return nullptr;
        const std::string prefix =
            "adapt." + encoder + ".layers." + std::to_string(layer) + "." + which;
        AdapterVars<T> av = adapter_vars(params, prefix);
        return [av](const Var<T>& x) { return adapter_forward(x, av); };
    };
    const int first_text = bb.text_layers - adapt_text;
    const int first_image = bb.image_layers - adapt_image;

    Var<T> t = text_embed(tokens, params, bb);
    Var<T> v = image_embed(image, params, bb);
    const Tensor<std::uint8_t> text_keep = text_attn_keep(tokens, bb);
    const Tensor<std::uint8_t> no_mask;

    std::vector<Var<T>> image_per_layer;
    auto run_text_layer = [&](int i) {
        t = transformer_layer(text_layer_vars(params, i, bb), t, text_keep,
                              adapter_hook("text", i, first_text, "attn_adapter"),
                              adapter_hook("text", i, first_text, "mlp_adapter"));
        check_finite_activation(t->value, "text layer " + std::to_string(i));
    };
    Var<T> last_image_input;  // captured for the value path
    auto run_image_layer = [&](int i) {
        if (i == bb.image_layers - 1) last_image_input = v;
        v = transformer_layer(image_layer_vars(params, i, bb), v, no_mask,
                              adapter_hook("image", i, first_image, "attn_adapter"),
                              adapter_hook("image", i, first_image, "mlp_adapter"));
        check_finite_activation(v->value, "image layer " + std::to_string(i));
        image_per_layer.push_back(v);
    };

    int next_text = 0, next_image = 0;
    for (size_t j = 0; j < pairing.pairs.size(); ++j) {
        const auto [k, l] = pairing.pairs[j];
        while (next_text < k) run_text_layer(next_text++);
        while (next_image < l) run_image_layer(next_image++);
        auto [t_delta, v_delta] =
            cfe_forward(t, v, cfe_vars<T>(params, static_cast<int>(j), cfe_heads), tokens.valid);
        t = add(t, t_delta);
        v = add(v, v_delta);
        run_text_layer(next_text++);
        run_image_layer(next_image++);
    }
    while (next_text < bb.text_layers) run_text_layer(next_text++);
    while (next_image < bb.image_layers) run_image_layer(next_image++);

    // value-token path through the final image layer
    Var<T> value_tokens = transformer_layer_value_path(
        image_layer_vars(params, bb.image_layers - 1, bb), last_image_input,
        adapter_hook("image", bb.image_layers - 1, first_image, "attn_adapter"),
        adapter_hook("image", bb.image_layers - 1, first_image, "mlp_adapter"));
    check_finite_activation(value_tokens->value, "image value-path layer");
    Var<T> v_patch = slice_rows(image_head(value_tokens, params), 1, 1 + bb.n_visual());

    Var<T> token_shared = text_head(t, params);
    check_finite_activation(token_shared->value, "text projection head");

    for (int j = 0; j < cfg.effective_n_ske(); ++j) {
        auto [v2, t2] = ske_forward(v_patch, token_shared, ske_vars(params, j, ske_heads),
                                    tokens.valid);
        v_patch = v2;
        token_shared = t2;
        check_finite_activation(v_patch->value, "ske module " + std::to_string(j));
    }

    ModelOutput<T> out;
    out.v_patch = v_patch;
    out.t_eos = slice_rows(token_shared, tokens.eos_index, tokens.eos_index + 1);
    out.patch_logits = scalar_mul(cosine_rows(v_patch, out.t_eos), params.at("model.logit_scale"));
    out.patch_probs = sigmoid(out.patch_logits);
    if (need_early)
        for (int i = 0; i < 4; ++i) out.early[static_cast<size_t>(i)] = image_per_layer[static_cast<size_t>(i)];
    out.diag.eos_index = tokens.eos_index;
    out.diag.grid = bb.grid();
    auto [mn, mx] = std::minmax_element(out.patch_logits->value.data.begin(),
                                        out.patch_logits->value.data.end());
    out.diag.logit_min = static_cast<float>(*mn);
    out.diag.logit_max = static_cast<float>(*mx);
    return out;
}

template ModelOutput<float> model_forward<float>(const VarMap<float>&, const ModelConfig&,
                                                 const TokenSequence&, const Tensor<float>&, bool);
template ModelOutput<double> model_forward<double>(const VarMap<double>&, const ModelConfig&,
                                                   const TokenSequence&, const Tensor<double>&,
                                                   bool);

}  // namespace risclip
