#include "risclip/training.hpp"

#include <zlib.h>

#include <cmath>

namespace risclip {

void TrainConfig::validate() const {
    if (lr_init < 0 || weight_decay < 0) throw ValidationError("train: lr/decay must be >= 0");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1))
        throw ValidationError("train: betas must lie in [0,1)");
    if (poly_power < 0) throw ValidationError("train: poly_power must be >= 0");
    if (batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
    if (stage1_epochs < 0 || stage2_epochs < 0)
        throw ValidationError("train: epoch counts must be >= 0");
    if (clip_grad_norm < 0) throw ValidationError("train: clip_grad_norm must be >= 0");
}

double lr_schedule(std::int64_t step, std::int64_t total, double lr_init, double power) {
    if (total <= 0) throw ValidationError("lr_schedule: total steps must be positive");
    if (step < 0 || step > total) throw ValidationError("lr_schedule: step out of range");
    return lr_init * std::pow(1.0 - static_cast<double>(step) / static_cast<double>(total), power);
}

std::set<std::string> stage1_trainable(const ParamStore& store) {
    std::set<std::string> out;
    for (const auto& [name, _] : store.tensors)
        if (name.rfind("adapt.", 0) == 0 || name == "model.logit_scale") out.insert(name);
    return out;
}

std::set<std::string> stage2_trainable(const ParamStore& store) {
    std::set<std::string> out;
    for (const auto& [name, _] : store.tensors)
        if (name.rfind("decoder.", 0) == 0 && !store.buffers.count(name)) out.insert(name);
    return out;
}

std::set<std::string> no_decay_names(const ParamStore& store) {
    std::set<std::string> out;
    for (const auto& [name, _] : store.tensors) {
        const bool norm_param = name.find(".ln") != std::string::npos ||
                                name.find(".bn") != std::string::npos;
        const bool scaler = name.size() >= 6 && name.rfind(".scale") != std::string::npos;
        if (norm_param || scaler || name == "model.logit_scale") out.insert(name);
    }
    return out;
}

std::uint32_t params_checksum(const ParamStore& store, const std::string& prefix) {
    uLong crc = crc32(0L, Z_NULL, 0);
    for (const auto& [name, tensor] : store.tensors) {
        if (name.rfind(prefix, 0) != 0) continue;
        crc = crc32(crc, reinterpret_cast<const Bytef*>(name.data()),
                    static_cast<uInt>(name.size()));
        crc = crc32(crc, reinterpret_cast<const Bytef*>(tensor.data.data()),
                    static_cast<uInt>(tensor.data.size() * sizeof(float)));
    }
    return static_cast<std::uint32_t>(crc);
}

std::vector<int> epoch_order(int n, std::uint64_t seed, int stage, std::int64_t epoch) {
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
    const std::uint64_t s = mix_name(seed, "epoch." + std::to_string(stage) + "." +
                                               std::to_string(epoch));
    for (int i = n - 1; i > 0; --i) {
        const int j = static_cast<int>(unit_uniform(s, i) * (i + 1));
        std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(std::min(j, i))]);
    }
    return order;
}

// --- optimizer -------------------------------------------------------------------

namespace {

void adamw_step(ParamStore& store, const std::map<std::string, Tensor<float>>& grads,
                const TrainConfig& cfg, double lr, const std::set<std::string>& no_decay,
                AdamWState& st) {
    constexpr double eps = 1e-8;
    st.t += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
    for (const auto& [name, g] : grads) {
        Tensor<float>& p = store.at(name);
        Tensor<float>& m = st.m.try_emplace(name, Tensor<float>::zeros(p.shape)).first->second;
        Tensor<float>& v = st.v.try_emplace(name, Tensor<float>::zeros(p.shape)).first->second;
        const bool decay = cfg.weight_decay > 0 && !no_decay.count(name);
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            const double gi = g[i];
            m[i] = static_cast<float>(cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi);
            v[i] = static_cast<float>(cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi);
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            double update = lr * mhat / (std::sqrt(vhat) + eps);
            if (decay) update += lr * cfg.weight_decay * p[i];
            p[i] = static_cast<float>(p[i] - update);
        }
    }
}

std::map<std::string, Tensor<float>> collect_grads(const VarMap<float>& bound,
                                                   const std::set<std::string>& trainable) {
    std::map<std::string, Tensor<float>> grads;
    for (const auto& name : trainable) {
        const Var<float>& leaf = bound.at(name);
        grads.emplace(name, leaf->grad_ready ? leaf->grad
                                             : Tensor<float>::zeros(leaf->value.shape));
    }
    return grads;
}

void clip_gradients(std::map<std::string, Tensor<float>>& grads, double max_norm) {
    if (max_norm <= 0) return;
    double sq = 0;
    for (const auto& [_, g] : grads)
        for (float x : g.data) sq += static_cast<double>(x) * x;
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const float scale = static_cast<float>(max_norm / norm);
    for (auto& [_, g] : grads)
        for (float& x : g.data) x *= scale;
}

std::int64_t steps_per_epoch(std::int64_t n, int batch) {
    return (n + batch - 1) / batch;
}

}  // namespace

// --- stage loops ------------------------------------------------------------------

void train_stage1(ParamStore& params, const ModelConfig& mcfg, const LossConfig& lcfg,
                  const std::vector<LoadedSample>& data, const TrainConfig& tcfg,
                  TrainState& state, const HistorySink& history) {
    mcfg.validate();
    lcfg.validate();
    tcfg.validate();
    if (data.empty()) throw ValidationError("train_stage1: empty dataset");
    const int n = static_cast<int>(data.size());
    const std::int64_t spe = steps_per_epoch(n, tcfg.batch_size);
    const std::int64_t total = spe * tcfg.stage1_epochs;
    state.stage = 1;
    state.total_steps = total;
    const std::set<std::string> trainable = stage1_trainable(params);
    const std::set<std::string> no_decay = no_decay_names(params);
    const int grid = mcfg.backbone.grid();

    while (state.step < total) {
        const std::int64_t epoch = state.step / spe;
        const std::int64_t pos = state.step % spe;
        const std::vector<int> order = epoch_order(n, tcfg.seed, 1, epoch);
        const std::int64_t lo = pos * tcfg.batch_size;
        const std::int64_t hi = std::min<std::int64_t>(n, lo + tcfg.batch_size);

        VarMap<float> bound = bind_params<float>(params, trainable);
        Var<float> loss;
        std::string batch_ids;
        for (std::int64_t b = lo; b < hi; ++b) {
            const LoadedSample& s = data[static_cast<size_t>(order[static_cast<size_t>(b)])];
            batch_ids += (batch_ids.empty() ? "" : ",") + s.sample_id;
            Tensor<float> image = s.image;
            Tensor<std::uint8_t> mask = s.mask;
            augment(image, mask, tcfg.augment,
                    mix_name(tcfg.seed, "aug.1." + std::to_string(state.step) + "." + s.sample_id));
            ModelOutput<float> out =
                model_forward(bound, mcfg, s.tokens, image, /*need_early=*/false);
            Tensor<float> target = downsample_gt(mask, grid).cast<float>();
            target.shape = {grid * grid};
            Var<float> sample_loss = combined_loss(out.patch_probs, target, lcfg);
            loss = loss ? add(loss, sample_loss) : sample_loss;
        }
        loss = mul_const(loss, 1.0f / static_cast<float>(hi - lo));
        if (!loss->value.all_finite())
            throw std::runtime_error("stage 1: non-finite loss at step " +
                                     std::to_string(state.step) + " (samples " + batch_ids + ")");
        backward(loss);

        std::map<std::string, Tensor<float>> grads = collect_grads(bound, trainable);
        clip_gradients(grads, tcfg.clip_grad_norm);
        const double lr = lr_schedule(state.step, total, tcfg.lr_init, tcfg.poly_power);
        adamw_step(params, grads, tcfg, lr, no_decay, state.opt);

        const double loss_value = loss->value[0];
        if (!state.has_best || loss_value < state.best_loss) {
            state.best_loss = loss_value;
            state.best_step = state.step;
            state.has_best = true;
        }
        if (history) history({state.step, 1, loss_value, lr});
        state.step += 1;
    }
}

void train_stage2(ParamStore& params, const ModelConfig& mcfg, const DecoderConfig& dcfg,
                  const LossConfig& lcfg, const std::vector<LoadedSample>& data,
                  const TrainConfig& tcfg, TrainState& state, const HistorySink& history) {
    mcfg.validate();
    dcfg.validate();
    lcfg.validate();
    tcfg.validate();
    if (data.empty()) throw ValidationError("train_stage2: empty dataset");
    const int n = static_cast<int>(data.size());
    const std::int64_t spe = steps_per_epoch(n, tcfg.batch_size);
    const std::int64_t total = spe * tcfg.stage2_epochs;
    if (state.stage != 2) {
        state.stage = 2;
        state.step = 0;
        state.opt = AdamWState{};
        state.has_best = false;
        state.best_step = -1;
    }
    state.total_steps = total;
    const std::set<std::string> trainable = stage2_trainable(params);
    const std::set<std::string> no_decay = no_decay_names(params);
    const int size = mcfg.backbone.image_size;

    while (state.step < total) {
        const std::int64_t epoch = state.step / spe;
        const std::int64_t pos = state.step % spe;
        const std::vector<int> order = epoch_order(n, tcfg.seed, 2, epoch);
        const std::int64_t lo = pos * tcfg.batch_size;
        const std::int64_t hi = std::min<std::int64_t>(n, lo + tcfg.batch_size);

        VarMap<float> bound = bind_params<float>(params, trainable);
        BnStatsSink bn_sink = [&](const std::string& layer, const Tensor<float>& mean,
                                  const Tensor<float>& var) {
            update_bn_buffers(params, layer, mean, var);
        };
        Var<float> loss;
        std::string batch_ids;
        for (std::int64_t b = lo; b < hi; ++b) {
            const LoadedSample& s = data[static_cast<size_t>(order[static_cast<size_t>(b)])];
            batch_ids += (batch_ids.empty() ? "" : ",") + s.sample_id;
            Tensor<float> image = s.image;
            Tensor<std::uint8_t> mask = s.mask;
            augment(image, mask, tcfg.augment,
                    mix_name(tcfg.seed, "aug.2." + std::to_string(state.step) + "." + s.sample_id));
            ModelOutput<float> out = model_forward(bound, mcfg, s.tokens, image);
            DecoderOutput<float> dec =
                decoder_forward(bound, mcfg, dcfg, out.early, out.patch_probs,
                                /*train_mode=*/true, bn_sink);
            Var<float> flat = reshape(dec.probs, {2, size * size});
            Var<float> fg = slice_rows(flat, 1, 2);
            Var<float> bg = slice_rows(flat, 0, 1);
            Tensor<float> fg_target({1, size * size});
            Tensor<float> bg_target({1, size * size});
            for (std::int64_t i = 0; i < mask.numel(); ++i) {
                fg_target[i] = mask[i] ? 1.0f : 0.0f;
                bg_target[i] = mask[i] ? 0.0f : 1.0f;
            }
            Var<float> sample_loss = mul_const(
                add(combined_loss(fg, fg_target, lcfg), combined_loss(bg, bg_target, lcfg)), 0.5f);
            loss = loss ? add(loss, sample_loss) : sample_loss;
        }
        loss = mul_const(loss, 1.0f / static_cast<float>(hi - lo));
        if (!loss->value.all_finite())
            throw std::runtime_error("stage 2: non-finite loss at step " +
                                     std::to_string(state.step) + " (samples " + batch_ids + ")");
        backward(loss);

        std::map<std::string, Tensor<float>> grads = collect_grads(bound, trainable);
        clip_gradients(grads, tcfg.clip_grad_norm);
        const double lr = lr_schedule(state.step, total, tcfg.lr_init, tcfg.poly_power);
        adamw_step(params, grads, tcfg, lr, no_decay, state.opt);

        const double loss_value = loss->value[0];
        if (!state.has_best || loss_value < state.best_loss) {
            state.best_loss = loss_value;
            state.best_step = state.step;
            state.has_best = true;
        }
        if (history) history({state.step, 2, loss_value, lr});
        state.step += 1;
    }
}

// --- evaluation -------------------------------------------------------------------

GroundingMap predict_grounding(const ParamStore& params, const ModelConfig& mcfg,
                               const TokenSequence& tokens, const Tensor<float>& image) {
    VarMap<float> bound = bind_params<float>(params);
    ModelOutput<float> out = model_forward(bound, mcfg, tokens, image, /*need_early=*/false);
    const int g = mcfg.backbone.grid();
    GroundingMap gm;
    gm.patch_logits = out.patch_logits->value;
    gm.patch_logits.shape = {g, g};
    gm.patch_probs = out.patch_probs->value;
    gm.patch_probs.shape = {g, g};
    return gm;
}

Tensor<std::uint8_t> predict_mask(const ParamStore& params, const ModelConfig& mcfg,
                                  const DecoderConfig& dcfg, const TokenSequence& tokens,
                                  const Tensor<float>& image) {
    VarMap<float> bound = bind_params<float>(params);
    ModelOutput<float> out = model_forward(bound, mcfg, tokens, image);
    DecoderOutput<float> dec = decoder_forward(bound, mcfg, dcfg, out.early, out.patch_probs,
                                               /*train_mode=*/false);
    return binarize_prediction(dec.probs->value);
}

MetricsReport evaluate_patch_level(const ParamStore& params, const ModelConfig& mcfg,
                                   const std::vector<LoadedSample>& data,
                                   const std::vector<double>& thresholds) {
    const int g = mcfg.backbone.grid();
    MetricAccumulator acc;
    for (const auto& s : data) {
        const GroundingMap gm = predict_grounding(params, mcfg, s.tokens, s.image);
        Tensor<std::uint8_t> pred({g, g});
        for (std::int64_t i = 0; i < pred.numel(); ++i)
            pred[i] = gm.patch_probs[i] >= 0.5f ? 1 : 0;
        acc.add(pred, downsample_gt(s.mask, g));
    }
    return aggregate_metrics(acc, thresholds);
}

MetricsReport evaluate_pixel_level(const ParamStore& params, const ModelConfig& mcfg,
                                   const DecoderConfig& dcfg,
                                   const std::vector<LoadedSample>& data,
                                   const std::vector<double>& thresholds) {
    MetricAccumulator acc;
    for (const auto& s : data)
        acc.add(predict_mask(params, mcfg, dcfg, s.tokens, s.image), s.mask);
    return aggregate_metrics(acc, thresholds);
}

}  // namespace risclip
