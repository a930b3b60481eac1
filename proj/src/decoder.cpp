#include "risclip/decoder.hpp"

#include <algorithm>
#include <cmath>

namespace risclip {

std::vector<int> DecoderConfig::resolved_channels(int image_width) const {
    if (!channels.empty()) {
        if (channels.size() != 4) throw ValidationError("decoder: channel plan must list 4 widths");
        for (int c : channels)
            if (c < 1) throw ValidationError("decoder: channel widths must be positive");
        return channels;
    }
    std::vector<int> out(4);
    int c = std::max(16, image_width / 2);
    for (int i = 0; i < 4; ++i) {
        out[static_cast<size_t>(i)] = c;
        c = std::max(16, c / 2);
    }
    return out;
}

Resize DecoderConfig::upsample_mode() const {
    if (upsample == "bilinear") return Resize::bilinear;
    if (upsample == "nearest") return Resize::nearest;
    throw ValidationError("decoder: unknown upsample mode '" + upsample + "'");
}

void DecoderConfig::validate() const {
    (void)upsample_mode();
    if (!channels.empty() && channels.size() != 4)
        throw ValidationError("decoder: channel plan must list 4 widths");
}

void add_decoder_params(ParamStore& s, const ModelConfig& mcfg, const DecoderConfig& dcfg,
                        std::uint64_t seed) {
    dcfg.validate();
    const std::vector<int> ch = dcfg.resolved_channels(mcfg.backbone.image_width);
    int in = mcfg.backbone.image_width + 1;  // v4 + grounding channel
    for (int i = 0; i < 4; ++i) {
        const std::string name = "decoder.d" + std::to_string(4 - i);
        const int out = ch[static_cast<size_t>(i)];
        s.add(name + ".conv1.w", kaiming_normal<float>({out, in, 3, 3}, in * 9,
                                                       mix_name(seed, name + ".conv1.w")));
        s.add(name + ".conv1.b", Tensor<float>::zeros({out}));
        s.add(name + ".bn1.gain", Tensor<float>::full({out}, 1.0f));
        s.add(name + ".bn1.bias", Tensor<float>::zeros({out}));
        s.add(name + ".bn1.running_mean", Tensor<float>::zeros({out}), /*buffer=*/true);
        s.add(name + ".bn1.running_var", Tensor<float>::full({out}, 1.0f), /*buffer=*/true);
        s.add(name + ".conv2.w", kaiming_normal<float>({out, out, 3, 3}, out * 9,
                                                       mix_name(seed, name + ".conv2.w")));
        s.add(name + ".conv2.b", Tensor<float>::zeros({out}));
        s.add(name + ".bn2.gain", Tensor<float>::full({out}, 1.0f));
        s.add(name + ".bn2.bias", Tensor<float>::zeros({out}));
        s.add(name + ".bn2.running_mean", Tensor<float>::zeros({out}), /*buffer=*/true);
        s.add(name + ".bn2.running_var", Tensor<float>::full({out}, 1.0f), /*buffer=*/true);
        in = out + mcfg.backbone.image_width;  // next layer concats u(V_i)
    }
    // zero-initialized head: fresh decoder predicts 0.5 everywhere
    s.add("decoder.head.w", Tensor<float>::zeros({2, ch[3], 1, 1}));
    s.add("decoder.head.b", Tensor<float>::zeros({2}));
}

void update_bn_buffers(ParamStore& store, const std::string& layer, const Tensor<float>& mean,
                       const Tensor<float>& var_unbiased, float momentum) {
    Tensor<float>& rm = store.at(layer + ".running_mean");
    Tensor<float>& rv = store.at(layer + ".running_var");
    for (std::int64_t i = 0; i < rm.numel(); ++i) {
        rm[i] = (1.0f - momentum) * rm[i] + momentum * mean[i];
        rv[i] = (1.0f - momentum) * rv[i] + momentum * var_unbiased[i];
    }
}

// drop [CLS] and lay tokens out as a channels-first grid
template <typename T>
static Var<T> tokens_to_grid(const Var<T>& tokens, int grid, int width) {
    Var<T> patches = slice_rows(tokens, 1, 1 + grid * grid);
    return reshape(transpose(patches), {width, grid, grid});
}

template <typename T>
static Var<T> conv_block(const VarMap<T>& p, const std::string& name, Var<T> x, bool train_mode,
                         const BnStatsSink& bn_sink, Resize mode) {
    for (int rep = 1; rep <= 2; ++rep) {
        const std::string conv = name + ".conv" + std::to_string(rep);
        const std::string bn = name + ".bn" + std::to_string(rep);
        x = relu(conv2d(x, p.at(conv + ".w"), p.at(conv + ".b"), /*pad=*/1));
        if (train_mode) {
            Tensor<T> mean, var_unbiased;
            x = batch_norm_train(x, p.at(bn + ".gain"), p.at(bn + ".bias"), &mean, &var_unbiased);
            if (bn_sink) {
                if constexpr (std::is_same_v<T, float>) {
                    bn_sink(bn, mean, var_unbiased);
                } else {
                    bn_sink(bn, mean.template cast<float>(), var_unbiased.template cast<float>());
                }
            }
        } else {
            x = batch_norm_eval(x, p.at(bn + ".gain"), p.at(bn + ".bias"),
                                p.at(bn + ".running_mean")->value,
                                p.at(bn + ".running_var")->value);
        }
    }
    return resize2d(x, x->value.dim(1) * 2, x->value.dim(2) * 2, mode);
}

template <typename T>
DecoderOutput<T> decoder_forward(const VarMap<T>& params, const ModelConfig& mcfg,
                                 const DecoderConfig& dcfg,
                                 const std::array<Var<T>, 4>& early, const Var<T>& patch_probs,
                                 bool train_mode, const BnStatsSink& bn_sink) {
    const int g = mcfg.backbone.grid();
    const int width = mcfg.backbone.image_width;
    const Resize mode = dcfg.upsample_mode();
    for (const auto& e : early)
        if (!e) throw ValidationError("decoder_forward: missing early image features");
    if (patch_probs->value.numel() != g * g)
        throw ValidationError("decoder_forward: grounding map size != grid^2");

    Var<T> map = reshape(patch_probs, {1, g, g});
    Var<T> d = conv_block(params, "decoder.d4",
                          concat_channels(tokens_to_grid(early[3], g, width), map), train_mode,
                          bn_sink, mode);
    for (int i = 3; i >= 1; --i) {
        Var<T> vi = tokens_to_grid(early[static_cast<size_t>(i - 1)], g, width);
        Var<T> up = resize2d(vi, d->value.dim(1), d->value.dim(2), mode);
        d = conv_block(params, "decoder.d" + std::to_string(i), concat_channels(d, up),
                       train_mode, bn_sink, mode);
    }
    Var<T> logits = conv2d(d, params.at("decoder.head.w"), params.at("decoder.head.b"), 0);
    Var<T> probs = sigmoid(logits);
    const int target = mcfg.backbone.image_size;
    if (probs->value.dim(1) != target || probs->value.dim(2) != target)
        probs = resize2d(probs, target, target, mode);
    check_finite_activation(probs->value, "decoder head");
    return {probs};
}

Tensor<std::uint8_t> binarize_prediction(const Tensor<float>& probs) {
    if (probs.rank() != 3 || probs.dim(0) != 2)
        throw ValidationError("binarize_prediction: want (2,H,W) probabilities");
    const int h = probs.dim(1), w = probs.dim(2);
    Tensor<std::uint8_t> mask({h, w});
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            mask.at(y, x) = probs.at(1, y, x) > probs.at(0, y, x) ? 1 : 0;
    return mask;
}

#define RISCLIP_DECODER_INSTANTIATE(T)                                                           \
    template DecoderOutput<T> decoder_forward<T>(const VarMap<T>&, const ModelConfig&,           \
                                                 const DecoderConfig&,                           \
                                                 const std::array<Var<T>, 4>&, const Var<T>&,    \
                                                 bool, const BnStatsSink&);

RISCLIP_DECODER_INSTANTIATE(float)
RISCLIP_DECODER_INSTANTIATE(double)

}  // namespace risclip
