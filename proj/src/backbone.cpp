#include "risclip/backbone.hpp"

#include <cctype>
#include <cmath>
#include <sstream>

namespace risclip {

void BackboneConfig::validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
        throw ValidationError("backbone: image_size must be a positive multiple of patch_size, got " +
                              std::to_string(image_size) + "/" + std::to_string(patch_size));
    if (image_layers < 1 || text_layers < 1)
        throw ValidationError("backbone: layer counts must be >= 1");
    if (image_width < 1 || image_width % image_heads != 0)
        throw ValidationError("backbone: image_width must be divisible by image_heads");
    if (text_width < 1 || text_width % text_heads != 0)
        throw ValidationError("backbone: text_width must be divisible by text_heads");
    if (shared_dim < 1) throw ValidationError("backbone: shared_dim must be >= 1");
    if (context_length < 2)
        throw ValidationError("backbone: context_length must be >= 2 for [SOS]/[EOS]");
    if (vocab_size < 4) throw ValidationError("backbone: vocab_size must cover the special tokens");
}

// --- tokenizer ---------------------------------------------------------------

Vocabulary Vocabulary::from_words(std::vector<std::string> words) {
    Vocabulary v;
    v.words = std::move(words);
    for (size_t i = 0; i < v.words.size(); ++i) {
        if (v.index.count(v.words[i]))
            throw ValidationError("vocabulary: duplicate word '" + v.words[i] + "'");
        v.index[v.words[i]] = 4 + static_cast<int>(i);
    }
    return v;
}

int Vocabulary::lookup(const std::string& word) const {
    auto it = index.find(word);
    return it == index.end() ? unk_id : it->second;
}

void TokenSequence::validate(const BackboneConfig& cfg) const {
    if (static_cast<int>(ids.size()) != cfg.context_length ||
        static_cast<int>(valid.size()) != cfg.context_length)
        throw ValidationError("token sequence length != context_length");
    if (eos_index < 1 || eos_index >= cfg.context_length)
        throw ValidationError("token sequence: eos_index out of range");
    if (ids[0] != Vocabulary::sos_id || ids[static_cast<size_t>(eos_index)] != Vocabulary::eos_id)
        throw ValidationError("token sequence: [SOS]/[EOS] misplaced");
    for (int i = 0; i < cfg.context_length; ++i) {
        if ((valid[static_cast<size_t>(i)] != 0) != (i <= eos_index))
            throw ValidationError("token sequence: valid mask inconsistent with eos_index");
        if (i > eos_index && ids[static_cast<size_t>(i)] != Vocabulary::pad_id)
            throw ValidationError("token sequence: non-pad id after [EOS]");
        if (ids[static_cast<size_t>(i)] < 0 || ids[static_cast<size_t>(i)] >= cfg.vocab_size)
            throw ValidationError("token sequence: id out of vocab range");
    }
}

std::vector<std::string> WhitespaceTokenizer::split(const std::string& text) const {
    std::vector<std::string> words;
    std::string cur;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) words.push_back(std::move(cur)), cur.clear();
        } else if (std::isalnum(static_cast<unsigned char>(c))) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
        // punctuation dropped
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

TokenSequence tokenize(const std::string& text, const Vocabulary& vocab,
                       const BackboneConfig& cfg) {
    static const WhitespaceTokenizer default_splitter;
    return tokenize(text, vocab, cfg, default_splitter);
}

TokenSequence tokenize(const std::string& text, const Vocabulary& vocab,
                       const BackboneConfig& cfg, const Tokenizer& splitter) {
    cfg.validate();
    if (vocab.size() > cfg.vocab_size)
        throw ValidationError("vocabulary size " + std::to_string(vocab.size()) +
                              " exceeds configured vocab_size " + std::to_string(cfg.vocab_size));
    std::vector<std::string> words = splitter.split(text);
    const size_t max_words = static_cast<size_t>(cfg.context_length) - 2;
    if (words.size() > max_words) words.resize(max_words);

    TokenSequence seq;
    seq.ids.assign(static_cast<size_t>(cfg.context_length), Vocabulary::pad_id);
    seq.ids[0] = Vocabulary::sos_id;
    for (size_t i = 0; i < words.size(); ++i) seq.ids[i + 1] = vocab.lookup(words[i]);
    seq.eos_index = static_cast<int>(words.size()) + 1;
    seq.ids[static_cast<size_t>(seq.eos_index)] = Vocabulary::eos_id;
    seq.valid.assign(static_cast<size_t>(cfg.context_length), 0);
    for (int i = 0; i <= seq.eos_index; ++i) seq.valid[static_cast<size_t>(i)] = 1;
    return seq;
}

// --- attention ---------------------------------------------------------------

template <typename T>
Var<T> mha(const AttnVars<T>& p, const Var<T>& q_in, const Var<T>& k_in, const Var<T>& v_in,
           const Tensor<std::uint8_t>& keep) {
    const int width = q_in->value.dim(1);
    if (width % p.heads != 0) throw ValidationError("mha: width not divisible by head count");
    const int hd = width / p.heads;
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));

    Var<T> q = linear(q_in, p.wq, p.bq);
    Var<T> k = linear(k_in, p.wk, p.bk);
    Var<T> v = linear(v_in, p.wv, p.bv);

    Var<T> ctx;
    for (int h = 0; h < p.heads; ++h) {
        Var<T> qh = slice_cols(q, h * hd, (h + 1) * hd);
        Var<T> kh = slice_cols(k, h * hd, (h + 1) * hd);
        Var<T> vh = slice_cols(v, h * hd, (h + 1) * hd);
        Var<T> scores = mul_const(matmul(qh, transpose(kh)), scale);
        if (keep.numel() > 0) scores = masked_fill(scores, keep, T(-1e30));
        Var<T> ctx_h = matmul(softmax_rows(scores), vh);
        ctx = h == 0 ? ctx_h : concat_cols(ctx, ctx_h);
    }
    return linear(ctx, p.wo, p.bo);
}

template <typename T>
static Var<T> mlp_forward(const TransformerLayerVars<T>& lv, const Var<T>& x) {
    return linear(gelu(linear(x, lv.mlp_w1, lv.mlp_b1)), lv.mlp_w2, lv.mlp_b2);
}

template <typename T>
Var<T> transformer_layer(const TransformerLayerVars<T>& lv, Var<T> x,
                         const Tensor<std::uint8_t>& attn_keep,
                         const DeltaHook<T>& post_attn, const DeltaHook<T>& post_mlp) {
    Var<T> normed = layer_norm(x, lv.ln1_g, lv.ln1_b);
    x = add(x, mha(lv.attn, normed, normed, normed, attn_keep));
    if (post_attn) x = add(x, post_attn(x));
    x = add(x, mlp_forward(lv, layer_norm(x, lv.ln2_g, lv.ln2_b)));
    if (post_mlp) x = add(x, post_mlp(x));
    return x;
}

template <typename T>
Var<T> transformer_layer_value_path(const TransformerLayerVars<T>& lv, Var<T> x,
                                    const DeltaHook<T>& post_attn, const DeltaHook<T>& post_mlp) {
    // value tokens stand in for the attention output: no mixing across tokens
    Var<T> normed = layer_norm(x, lv.ln1_g, lv.ln1_b);
    Var<T> values = linear(normed, lv.attn.wv, lv.attn.bv);
    x = add(x, linear(values, lv.attn.wo, lv.attn.bo));
    if (post_attn) x = add(x, post_attn(x));
    x = add(x, mlp_forward(lv, layer_norm(x, lv.ln2_g, lv.ln2_b)));
    if (post_mlp) x = add(x, post_mlp(x));
    return x;
}

// --- parameters -----------------------------------------------------------------

void add_linear_params(ParamStore& s, const std::string& name, int in, int out,
                       std::uint64_t seed) {
    s.add(name + ".w", randn<float>({in, out}, 1.0 / std::sqrt(in), mix_name(seed, name + ".w")));
    s.add(name + ".b", Tensor<float>::zeros({out}));
}

void add_zero_linear_params(ParamStore& s, const std::string& name, int in, int out) {
    s.add(name + ".w", Tensor<float>::zeros({in, out}));
    s.add(name + ".b", Tensor<float>::zeros({out}));
}

void add_layer_norm_params(ParamStore& s, const std::string& name, int n) {
    s.add(name + ".gain", Tensor<float>::full({n}, 1.0f));
    s.add(name + ".bias", Tensor<float>::zeros({n}));
}

void add_attention_params(ParamStore& s, const std::string& name, int width, std::uint64_t seed,
                          bool zero_value_proj) {
    add_linear_params(s, name + ".wq", width, width, seed);
    add_linear_params(s, name + ".wk", width, width, seed);
    if (zero_value_proj)
        add_zero_linear_params(s, name + ".wv", width, width);
    else
        add_linear_params(s, name + ".wv", width, width, seed);
    add_linear_params(s, name + ".wo", width, width, seed);
}

static void add_transformer_layer(ParamStore& s, const std::string& name, int width,
                                  std::uint64_t seed) {
    add_layer_norm_params(s, name + ".ln1", width);
    add_attention_params(s, name + ".attn", width, seed);
    add_layer_norm_params(s, name + ".ln2", width);
    add_linear_params(s, name + ".mlp.fc1", width, 4 * width, seed);
    add_linear_params(s, name + ".mlp.fc2", 4 * width, width, seed);
}

void add_backbone_params(ParamStore& s, const BackboneConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    s.add("backbone.text.tok_emb",
          randn<float>({cfg.vocab_size, cfg.text_width}, 0.02, mix_name(seed, "backbone.text.tok_emb")));
    s.add("backbone.text.pos_emb",
          randn<float>({cfg.context_length, cfg.text_width}, 0.02,
                       mix_name(seed, "backbone.text.pos_emb")));
    for (int i = 0; i < cfg.text_layers; ++i)
        add_transformer_layer(s, "backbone.text.layers." + std::to_string(i), cfg.text_width, seed);
    add_layer_norm_params(s, "backbone.text.ln_final", cfg.text_width);
    s.add("backbone.text.proj",
          randn<float>({cfg.text_width, cfg.shared_dim}, 1.0 / std::sqrt(cfg.text_width),
                       mix_name(seed, "backbone.text.proj")));

    const int patch_dim = 3 * cfg.patch_size * cfg.patch_size;
    add_linear_params(s, "backbone.image.patch_proj", patch_dim, cfg.image_width, seed);
    s.add("backbone.image.cls",
          randn<float>({1, cfg.image_width}, 0.02, mix_name(seed, "backbone.image.cls")));
    s.add("backbone.image.pos_emb",
          randn<float>({1 + cfg.n_visual(), cfg.image_width}, 0.02,
                       mix_name(seed, "backbone.image.pos_emb")));
    for (int i = 0; i < cfg.image_layers; ++i)
        add_transformer_layer(s, "backbone.image.layers." + std::to_string(i), cfg.image_width, seed);
    add_layer_norm_params(s, "backbone.image.ln_post", cfg.image_width);
    s.add("backbone.image.proj",
          randn<float>({cfg.image_width, cfg.shared_dim}, 1.0 / std::sqrt(cfg.image_width),
                       mix_name(seed, "backbone.image.proj")));
}

template <typename T>
static AttnVars<T> attn_vars(const VarMap<T>& p, const std::string& name, int heads) {
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
static TransformerLayerVars<T> layer_vars(const VarMap<T>& p, const std::string& name, int heads) {
    TransformerLayerVars<T> lv;
    lv.ln1_g = p.at(name + ".ln1.gain");
    lv.ln1_b = p.at(name + ".ln1.bias");
    lv.attn = attn_vars(p, name + ".attn", heads);
    lv.ln2_g = p.at(name + ".ln2.gain");
    lv.ln2_b = p.at(name + ".ln2.bias");
    lv.mlp_w1 = p.at(name + ".mlp.fc1.w");
    lv.mlp_b1 = p.at(name + ".mlp.fc1.b");
    lv.mlp_w2 = p.at(name + ".mlp.fc2.w");
    lv.mlp_b2 = p.at(name + ".mlp.fc2.b");
    return lv;
}

template <typename T>
TransformerLayerVars<T> text_layer_vars(const VarMap<T>& p, int layer, const BackboneConfig& cfg) {
    return layer_vars<T>(p, "backbone.text.layers." + std::to_string(layer), cfg.text_heads);
}

template <typename T>
TransformerLayerVars<T> image_layer_vars(const VarMap<T>& p, int layer, const BackboneConfig& cfg) {
    return layer_vars<T>(p, "backbone.image.layers." + std::to_string(layer), cfg.image_heads);
}

// --- encoders -----------------------------------------------------------------

void check_finite_activation(const Tensor<float>& t, const std::string& where) {
    if (!t.all_finite())
        throw std::runtime_error("non-finite activation in " + where);
}

void check_finite_activation(const Tensor<double>& t, const std::string& where) {
    if (!t.all_finite())
        throw std::runtime_error("non-finite activation in " + where);
}

template <typename T>
Var<T> text_embed(const TokenSequence& tokens, const VarMap<T>& p, const BackboneConfig& cfg) {
    tokens.validate(cfg);
    Var<T> emb = gather_rows(p.at("backbone.text.tok_emb"), tokens.ids);
    return add(emb, p.at("backbone.text.pos_emb"));
}

Tensor<std::uint8_t> text_attn_keep(const TokenSequence& tokens, const BackboneConfig& cfg) {
    // causal plus padding: query i may attend to key j iff j <= i and j valid
    const int n = cfg.context_length;
    Tensor<std::uint8_t> keep({n, n});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
            keep.at(i, j) = (j <= i && tokens.valid[static_cast<size_t>(j)]) ? 1 : 0;
    return keep;
}

template <typename T>
Var<T> text_head(const Var<T>& x, const VarMap<T>& p) {
    Var<T> normed = layer_norm(x, p.at("backbone.text.ln_final.gain"),
                               p.at("backbone.text.ln_final.bias"));
    return linear_nobias(normed, p.at("backbone.text.proj"));
}

template <typename T>
Var<T> image_embed(const Tensor<T>& image, const VarMap<T>& p, const BackboneConfig& cfg) {
    if (image.rank() != 3 || image.dim(2) != 3 || image.dim(0) != cfg.image_size ||
        image.dim(1) != cfg.image_size)
        throw ValidationError("image must be " + std::to_string(cfg.image_size) + "x" +
                              std::to_string(cfg.image_size) + "x3, got " + shape_str(image.shape));
    const int g = cfg.grid(), ps = cfg.patch_size;
    Tensor<T> patches({cfg.n_visual(), 3 * ps * ps});
    for (int gy = 0; gy < g; ++gy)
        for (int gx = 0; gx < g; ++gx) {
            const int row = gy * g + gx;
            int col = 0;
            for (int y = 0; y < ps; ++y)
                for (int x = 0; x < ps; ++x)
                    for (int c = 0; c < 3; ++c)
                        patches.at(row, col++) = image.at(gy * ps + y, gx * ps + x, c);
        }
    Var<T> tok = linear(constant(std::move(patches)), p.at("backbone.image.patch_proj.w"),
                        p.at("backbone.image.patch_proj.b"));
    Var<T> with_cls = concat_rows(p.at("backbone.image.cls"), tok);
    return add(with_cls, p.at("backbone.image.pos_emb"));
}

template <typename T>
Var<T> image_head(const Var<T>& x, const VarMap<T>& p) {
    Var<T> normed = layer_norm(x, p.at("backbone.image.ln_post.gain"),
                               p.at("backbone.image.ln_post.bias"));
    return linear_nobias(normed, p.at("backbone.image.proj"));
}

template <typename T>
TextFeatures<T> encode_text(const TokenSequence& tokens, const VarMap<T>& p,
                            const BackboneConfig& cfg) {
    TextFeatures<T> out;
    Var<T> x = text_embed(tokens, p, cfg);
    const Tensor<std::uint8_t> keep = text_attn_keep(tokens, cfg);
    for (int i = 0; i < cfg.text_layers; ++i) {
        x = transformer_layer(layer_vars<T>(p, "backbone.text.layers." + std::to_string(i),
                                            cfg.text_heads),
                              x, keep);
        check_finite_activation(x->value, "text layer " + std::to_string(i));
        out.per_layer.push_back(x);
    }
    out.token_shared = text_head(x, p);
    check_finite_activation(out.token_shared->value, "text projection head");
    out.t_eos = slice_rows(out.token_shared, tokens.eos_index, tokens.eos_index + 1);
    return out;
}

template <typename T>
ImageFeatures<T> encode_image(const Tensor<T>& image, const VarMap<T>& p,
                              const BackboneConfig& cfg) {
    ImageFeatures<T> out;
    Var<T> x = image_embed(image, p, cfg);
    const Tensor<std::uint8_t> no_mask;
    for (int i = 0; i < cfg.image_layers; ++i) {
        x = transformer_layer(layer_vars<T>(p, "backbone.image.layers." + std::to_string(i),
                                            cfg.image_heads),
                              x, no_mask);
        check_finite_activation(x->value, "image layer " + std::to_string(i));
        out.per_layer.push_back(x);
    }
    return out;
}

template <typename T>
Var<T> encode_image_value_path(const Tensor<T>& image, const VarMap<T>& p,
                               const BackboneConfig& cfg) {
    Var<T> x = image_embed(image, p, cfg);
    const Tensor<std::uint8_t> no_mask;
    for (int i = 0; i + 1 < cfg.image_layers; ++i) {
        x = transformer_layer(layer_vars<T>(p, "backbone.image.layers." + std::to_string(i),
                                            cfg.image_heads),
                              x, no_mask);
        check_finite_activation(x->value, "image layer " + std::to_string(i));
    }
    const int last = cfg.image_layers - 1;
    x = transformer_layer_value_path(
        layer_vars<T>(p, "backbone.image.layers." + std::to_string(last), cfg.image_heads), x);
    check_finite_activation(x->value, "image value-path layer " + std::to_string(last));
    Var<T> shared = image_head(x, p);
    check_finite_activation(shared->value, "image projection head");
    return slice_rows(shared, 1, 1 + cfg.n_visual());  // drop [CLS]
}

#define RISCLIP_BACKBONE_INSTANTIATE(T)                                                          \
    template Var<T> mha<T>(const AttnVars<T>&, const Var<T>&, const Var<T>&, const Var<T>&,      \
                           const Tensor<std::uint8_t>&);                                         \
    template Var<T> transformer_layer<T>(const TransformerLayerVars<T>&, Var<T>,                 \
                                         const Tensor<std::uint8_t>&, const DeltaHook<T>&,       \
                                         const DeltaHook<T>&);                                   \
    template Var<T> transformer_layer_value_path<T>(const TransformerLayerVars<T>&, Var<T>,      \
                                                    const DeltaHook<T>&, const DeltaHook<T>&);   \
    template TransformerLayerVars<T> text_layer_vars<T>(const VarMap<T>&, int,                   \
                                                        const BackboneConfig&);                  \
    template TransformerLayerVars<T> image_layer_vars<T>(const VarMap<T>&, int,                  \
                                                         const BackboneConfig&);                 \
    template Var<T> text_embed<T>(const TokenSequence&, const VarMap<T>&, const BackboneConfig&);\
    template Var<T> text_head<T>(const Var<T>&, const VarMap<T>&);                               \
    template Var<T> image_embed<T>(const Tensor<T>&, const VarMap<T>&, const BackboneConfig&);   \
    template Var<T> image_head<T>(const Var<T>&, const VarMap<T>&);                              \
    template TextFeatures<T> encode_text<T>(const TokenSequence&, const VarMap<T>&,              \
                                            const BackboneConfig&);                              \
    template ImageFeatures<T> encode_image<T>(const Tensor<T>&, const VarMap<T>&,                \
                                              const BackboneConfig&);                            \
    template Var<T> encode_image_value_path<T>(const Tensor<T>&, const VarMap<T>&,               \
                                               const BackboneConfig&);

RISCLIP_BACKBONE_INSTANTIATE(float)
RISCLIP_BACKBONE_INSTANTIATE(double)

}  // namespace risclip
