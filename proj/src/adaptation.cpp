#include "risclip/adaptation.hpp"

#include <algorithm>
#include <cmath>

namespace risclip {

int adapter_bottleneck(int width, bool image_encoder) {
    if (image_encoder) {
        if (width == 896) return 449;
        if (width == 1024) return 512;
    } else {
        if (width == 640) return 320;
        if (width == 768) return 384;
    }
    return std::max(1, static_cast<int>(std::lround(0.7 * width)));
}

Activation activation_from_string(const std::string& tag) {
    if (tag == "relu") return Activation::relu;
    if (tag == "gelu") return Activation::gelu;
    if (tag == "identity") return Activation::identity;
    throw ValidationError("unknown adapter activation '" + tag + "'");
}

template <typename T>
Var<T> adapter_forward(const Var<T>& x, const AdapterVars<T>& p) {
    Var<T> h = linear(x, p.down_w, p.down_b);
    switch (p.act) {
        case Activation::relu: h = relu(h); break;
        case Activation::gelu: h = gelu(h); break;
        case Activation::identity: break;
    }
    return mul_rowvec(linear(h, p.up_w, p.up_b), p.scale);
}

// row keep mask: zero out deltas at text padding positions
static Tensor<std::uint8_t> valid_row_mask(const std::vector<std::uint8_t>& text_valid, int cols) {
    Tensor<std::uint8_t> keep({static_cast<int>(text_valid.size()), cols});
    for (size_t i = 0; i < text_valid.size(); ++i)
        for (int j = 0; j < cols; ++j)
            keep.at(static_cast<int>(i), j) = text_valid[i] ? 1 : 0;
    return keep;
}

static Tensor<std::uint8_t> text_key_mask(int n_queries, const std::vector<std::uint8_t>& text_valid) {
    bool any = false;
    for (auto v : text_valid) any = any || v;
    if (!any) throw ValidationError("cross attention: no attendable text keys (mask all false)");
    Tensor<std::uint8_t> keep({n_queries, static_cast<int>(text_valid.size())});
    for (int q = 0; q < n_queries; ++q)
        for (size_t k = 0; k < text_valid.size(); ++k)
            keep.at(q, static_cast<int>(k)) = text_valid[k] ? 1 : 0;
    return keep;
}

template <typename T>
std::pair<Var<T>, Var<T>> cfe_forward(const Var<T>& t, const Var<T>& v, const CfeVars<T>& p,
                                      const std::vector<std::uint8_t>& text_valid) {
    if (t->value.dim(0) != static_cast<int>(text_valid.size()))
        throw ValidationError("cfe_forward: text rows != valid mask length");
    const Tensor<std::uint8_t> none;

    Var<T> t_s = linear(t, p.t2s_w, p.t2s_b);  // (context, ds)
    Var<T> v_s = linear(v, p.v2s_w, p.v2s_b);  // (1+N, ds)

    Var<T> t_m = mha(p.mhca_t, t_s, v_s, v_s, none);
    Var<T> v_m = mha(p.mhca_v, v_s, t_s, t_s, text_key_mask(v->value.dim(0), text_valid));

    Var<T> t_delta = mul_rowvec(linear(t_m, p.s2t_w, p.s2t_b), p.scale_t);
    Var<T> v_delta = mul_rowvec(linear(v_m, p.s2v_w, p.s2v_b), p.scale_v);
    t_delta = masked_fill(t_delta, valid_row_mask(text_valid, t_delta->value.dim(1)), T(0));
    return {t_delta, v_delta};
}

template <typename T>
static Var<T> ske_mlp(const SkeSideVars<T>& s, const Var<T>& x) {
    return linear(gelu(linear(x, s.mlp_w1, s.mlp_b1)), s.mlp_w2, s.mlp_b2);
}

template <typename T>
std::pair<Var<T>, Var<T>> ske_forward(const Var<T>& v, const Var<T>& t, const SkeVars<T>& p,
                                      const std::vector<std::uint8_t>& text_valid) {
    const Tensor<std::uint8_t> none;
    const int d = v->value.dim(1);
    const Tensor<std::uint8_t> txt_rows = valid_row_mask(text_valid, d);

    // inter-modal, Jacobi: both queries read the pre-update other stream
    Var<T> v_cross = mha(p.img.mhca, layer_norm(v, p.img.ln_cross_g, p.img.ln_cross_b), t, t,
                         text_key_mask(v->value.dim(0), text_valid));
    Var<T> t_cross = mha(p.txt.mhca, layer_norm(t, p.txt.ln_cross_g, p.txt.ln_cross_b), v, v, none);
    Var<T> v1 = add(v, mul_rowvec(v_cross, p.img.scale_cross));
    Var<T> t1 = add(t, masked_fill(mul_rowvec(t_cross, p.txt.scale_cross), txt_rows, T(0)));

    // intra-modal
    Var<T> vn = layer_norm(v1, p.img.ln_self_g, p.img.ln_self_b);
    Var<T> v_self = mha(p.img.mhsa, vn, vn, vn, none);
    Var<T> tn = layer_norm(t1, p.txt.ln_self_g, p.txt.ln_self_b);
    Var<T> t_self = mha(p.txt.mhsa, tn, tn, tn, text_key_mask(t->value.dim(0), text_valid));
    Var<T> v2 = add(v1, mul_rowvec(v_self, p.img.scale_self));
    Var<T> t2 = add(t1, masked_fill(mul_rowvec(t_self, p.txt.scale_self), txt_rows, T(0)));

    // feedforward
    Var<T> v3 = add(v2, mul_rowvec(ske_mlp(p.img, layer_norm(v2, p.img.ln_mlp_g, p.img.ln_mlp_b)),
                                   p.img.scale_mlp));
    Var<T> t_ff = masked_fill(
        mul_rowvec(ske_mlp(p.txt, layer_norm(t2, p.txt.ln_mlp_g, p.txt.ln_mlp_b)), p.txt.scale_mlp),
        txt_rows, T(0));
    Var<T> t3 = add(t2, t_ff);
    return {v3, t3};
}

LayerPairing build_layer_pairing(int text_layers, int image_layers, int n_cfe) {
    if (n_cfe < 0) throw ValidationError("layer pairing: n_cfe must be >= 0");
    if (n_cfe > std::min(text_layers, image_layers))
        throw ValidationError("layer pairing: n_cfe=" + std::to_string(n_cfe) +
                              " exceeds min encoder depth " +
                              std::to_string(std::min(text_layers, image_layers)));
    LayerPairing lp;
    for (int j = 0; j < n_cfe; ++j)
        lp.pairs.emplace_back(text_layers - n_cfe + j, image_layers - n_cfe + j);
    return lp;
}

// --- registry -------------------------------------------------------------------

static int derive_heads(int dim, int preferred) {
    for (int h = std::min(dim, preferred); h > 1; --h)
        if (dim % h == 0) return h;
    return 1;
}

void add_adaptation_params(ParamStore& s, const AdaptationDims& dims, std::uint64_t seed) {
    auto add_adapter_pair = [&](const std::string& layer_prefix, int width, bool image_side) {
        const int bn = adapter_bottleneck(width, image_side);
        for (const char* which : {"attn_adapter", "mlp_adapter"}) {
            const std::string name = layer_prefix + "." + which;
            s.add(name + ".down.w", kaiming_normal<float>({width, bn}, width,
                                                          mix_name(seed, name + ".down.w")));
            s.add(name + ".down.b", Tensor<float>::zeros({bn}));
            s.add(name + ".up.w", Tensor<float>::zeros({bn, width}));
            s.add(name + ".up.b", Tensor<float>::zeros({width}));
            s.add(name + ".scale", Tensor<float>::full({width}, 0.6f));
        }
    };

    const int adapt_text = std::min(dims.n_adapter_layers, dims.text_layers);
    const int adapt_image = std::min(dims.n_adapter_layers, dims.image_layers);
    for (int i = dims.text_layers - adapt_text; i < dims.text_layers; ++i)
        add_adapter_pair("adapt.text.layers." + std::to_string(i), dims.text_width, false);
    for (int i = dims.image_layers - adapt_image; i < dims.image_layers; ++i)
        add_adapter_pair("adapt.image.layers." + std::to_string(i), dims.image_width, true);

    const int ds = dims.shared_dim;
    for (int j = 0; j < dims.n_cfe; ++j) {
        const std::string name = "adapt.cfe." + std::to_string(j);
        add_linear_params(s, name + ".t2s", dims.text_width, ds, seed);
        add_linear_params(s, name + ".v2s", dims.image_width, ds, seed);
        add_attention_params(s, name + ".mhca_t", ds, seed);
        add_attention_params(s, name + ".mhca_v", ds, seed);
        add_zero_linear_params(s, name + ".s2t", ds, dims.text_width);
        add_zero_linear_params(s, name + ".s2v", ds, dims.image_width);
        s.add(name + ".scale_t", Tensor<float>::full({dims.text_width}, 0.5f));
        s.add(name + ".scale_v", Tensor<float>::full({dims.image_width}, 0.5f));
    }

    for (int j = 0; j < dims.n_ske; ++j) {
        for (const char* side : {"img", "txt"}) {
            const std::string name = "adapt.ske." + std::to_string(j) + "." + side;
            add_layer_norm_params(s, name + ".ln_cross", ds);
            add_attention_params(s, name + ".mhca", ds, seed, /*zero_value_proj=*/true);
            add_layer_norm_params(s, name + ".ln_self", ds);
            add_attention_params(s, name + ".mhsa", ds, seed, /*zero_value_proj=*/true);
            add_layer_norm_params(s, name + ".ln_mlp", ds);
            add_linear_params(s, name + ".mlp.fc1", ds, 4 * ds, seed);
            add_zero_linear_params(s, name + ".mlp.fc2", 4 * ds, ds);
            s.add(name + ".scale_cross", Tensor<float>::full({ds}, 0.5f));
            s.add(name + ".scale_self", Tensor<float>::full({ds}, 0.5f));
            s.add(name + ".scale_mlp", Tensor<float>::full({ds}, 0.5f));
        }
    }
}

template <typename T>
AdapterVars<T> adapter_vars(const VarMap<T>& p, const std::string& prefix) {
    AdapterVars<T> a;
    a.down_w = p.at(prefix + ".down.w");
    a.down_b = p.at(prefix + ".down.b");
    a.up_w = p.at(prefix + ".up.w");
    a.up_b = p.at(prefix + ".up.b");
    a.scale = p.at(prefix + ".scale");
    a.act = Activation::relu;
    return a;
}

template <typename T>
static AttnVars<T> attn_vars_at(const VarMap<T>& p, const std::string& name, int heads) {
    AttnVars<T> a;
    a.wq = p.at(name + ".wq.w");
    a.bq = p.at(name + ".wq.b");
    a.wk = p.at(name + ".wk.w");
    a.bk = p.at(name + ".wk.b");
    a.wv = p.at(name + ".wv.w");
    a.bv = p.at(name + ".wv.b");
    a.wo = p.at(name + ".wo.w");
    a.bo = p.at(name + ".wo.b");
    a.heads = heads;
    return a;
}

template <typename T>
CfeVars<T> cfe_vars(const VarMap<T>& p, int module, int heads) {
    const std::string name = "adapt.cfe." + std::to_string(module);
    CfeVars<T> c;
    c.t2s_w = p.at(name + ".t2s.w");
    c.t2s_b = p.at(name + ".t2s.b");
    c.v2s_w = p.at(name + ".v2s.w");
    c.v2s_b = p.at(name + ".v2s.b");
    c.mhca_t = attn_vars_at(p, name + ".mhca_t", heads);
    c.mhca_v = attn_vars_at(p, name + ".mhca_v", heads);
    c.s2t_w = p.at(name + ".s2t.w");
    c.s2t_b = p.at(name + ".s2t.b");
    c.s2v_w = p.at(name + ".s2v.w");
    c.s2v_b = p.at(name + ".s2v.b");
    c.scale_t = p.at(name + ".scale_t");
    c.scale_v = p.at(name + ".scale_v");
    return c;
}

template <typename T>
static SkeSideVars<T> ske_side_vars(const VarMap<T>& p, const std::string& name, int heads) {
    SkeSideVars<T> s;
    s.ln_cross_g = p.at(name + ".ln_cross.gain");
    s.ln_cross_b = p.at(name + ".ln_cross.bias");
    s.mhca = attn_vars_at(p, name + ".mhca", heads);
    s.ln_self_g = p.at(name + ".ln_self.gain");
    s.ln_self_b = p.at(name + ".ln_self.bias");
    s.mhsa = attn_vars_at(p, name + ".mhsa", heads);
    s.ln_mlp_g = p.at(name + ".ln_mlp.gain");
    s.ln_mlp_b = p.at(name + ".ln_mlp.bias");
    s.mlp_w1 = p.at(name + ".mlp.fc1.w");
    s.mlp_b1 = p.at(name + ".mlp.fc1.b");
    s.mlp_w2 = p.at(name + ".mlp.fc2.w");
    s.mlp_b2 = p.at(name + ".mlp.fc2.b");
    s.scale_cross = p.at(name + ".scale_cross");
    s.scale_self = p.at(name + ".scale_self");
    s.scale_mlp = p.at(name + ".scale_mlp");
    return s;
}

template <typename T>
SkeVars<T> ske_vars(const VarMap<T>& p, int module, int heads) {
    const std::string name = "adapt.ske." + std::to_string(module);
    SkeVars<T> s;
    s.img = ske_side_vars(p, name + ".img", heads);
    s.txt = ske_side_vars(p, name + ".txt", heads);
    return s;
}

int cfe_head_count(int shared_dim) { return derive_heads(shared_dim, 10); }
int ske_head_count(int shared_dim) { return derive_heads(shared_dim, 8); }

#define RISCLIP_ADAPT_INSTANTIATE(T)                                                             \
    template Var<T> adapter_forward<T>(const Var<T>&, const AdapterVars<T>&);                    \
    template std::pair<Var<T>, Var<T>> cfe_forward<T>(const Var<T>&, const Var<T>&,              \
                                                      const CfeVars<T>&,                         \
                                                      const std::vector<std::uint8_t>&);         \
    template std::pair<Var<T>, Var<T>> ske_forward<T>(const Var<T>&, const Var<T>&,              \
                                                      const SkeVars<T>&,                         \
                                                      const std::vector<std::uint8_t>&);         \
    template AdapterVars<T> adapter_vars<T>(const VarMap<T>&, const std::string&);               \
    template CfeVars<T> cfe_vars<T>(const VarMap<T>&, int, int);                                 \
    template SkeVars<T> ske_vars<T>(const VarMap<T>&, int, int);

RISCLIP_ADAPT_INSTANTIATE(float)
RISCLIP_ADAPT_INSTANTIATE(double)

}  // namespace risclip
