#include "risclip/objectives.hpp"

#include <json.hpp>

#include <cmath>
#include <sstream>

namespace risclip {

void LossConfig::validate() const {
    if (lambda_dice < 0 || lambda_focal < 0)
        throw ValidationError("loss: lambda weights must be nonnegative");
    if (!(alpha_focal > 0 && alpha_focal < 1))
        throw ValidationError("loss: alpha_focal must lie in (0,1)");
    if (gamma_focal < 0 || dice_epsilon < 0)
        throw ValidationError("loss: gamma_focal and dice_epsilon must be nonnegative");
    if (focal_reduction != "mean" && focal_reduction != "sum")
        throw ValidationError("loss: focal_reduction must be 'mean' or 'sum'");
}

template <typename T>
static void check_loss_shapes(const Var<T>& p, const Tensor<T>& target) {
    if (!p->value.same_shape(target))
        throw ValidationError("loss: prediction/target shape mismatch " +
                              shape_str(p->value.shape) + " vs " + shape_str(target.shape));
}

template <typename T>
Var<T> dice_loss(const Var<T>& p, const Tensor<T>& target, T eps) {
    check_loss_shapes(p, target);
    Var<T> overlap = sum_all(mul_tensor(p, target));
    Var<T> p_sum = sum_all(p);
    T g_sum = 0;
    for (const T& g : target.data) g_sum += g;
    Var<T> numer = add_const(mul_const(overlap, T(2)), eps);
    Var<T> denom = add_const(p_sum, g_sum + eps);
    return add_const(neg(divide(numer, denom)), T(1));
}

template <typename T>
Var<T> focal_loss(const Var<T>& p, const Tensor<T>& target, T alpha, T gamma, bool mean_reduce) {
    check_loss_shapes(p, target);
    Tensor<T> fg = target;
    Tensor<T> bg = target;
    for (std::int64_t i = 0; i < target.numel(); ++i) {
        if (target[i] != T(0) && target[i] != T(1))
            throw ValidationError("focal_loss: target must be binary");
        bg[i] = T(1) - target[i];
    }
    const T eps = T(1e-7);
    Var<T> pc = clamp(p, eps, T(1) - eps);
    Var<T> one_minus = add_const(neg(pc), T(1));
    Var<T> pos = mul_tensor(mul(pow_const(one_minus, gamma), vlog(pc)), fg);
    Var<T> negt = mul_tensor(mul(pow_const(pc, gamma), vlog(one_minus)), bg);
    Var<T> total = neg(add(mul_const(pos, alpha), mul_const(negt, T(1) - alpha)));
    return mean_reduce ? mean_all(total) : sum_all(total);
}

template <typename T>
Var<T> combined_loss(const Var<T>& p, const Tensor<T>& target, const LossConfig& cfg) {
    cfg.validate();
    Var<T> dice = dice_loss(p, target, static_cast<T>(cfg.dice_epsilon));
    Var<T> focal = focal_loss(p, target, static_cast<T>(cfg.alpha_focal),
                              static_cast<T>(cfg.gamma_focal), cfg.focal_reduction == "mean");
    return add(mul_const(dice, static_cast<T>(cfg.lambda_dice)),
               mul_const(focal, static_cast<T>(cfg.lambda_focal)));
}

Tensor<std::uint8_t> downsample_gt(const Tensor<std::uint8_t>& mask, int grid) {
    if (mask.rank() != 2) throw ValidationError("downsample_gt: want (H,W) mask");
    const int h = mask.dim(0), w = mask.dim(1);
    if (grid < 1 || h % grid != 0 || w % grid != 0)
        throw ValidationError("downsample_gt: mask " + shape_str(mask.shape) +
                              " not divisible by grid " + std::to_string(grid));
    const int bh = h / grid, bw = w / grid;
    Tensor<std::uint8_t> out({grid, grid});
    for (int gy = 0; gy < grid; ++gy)
        for (int gx = 0; gx < grid; ++gx) {
            std::int64_t count = 0;
            for (int y = 0; y < bh; ++y)
                for (int x = 0; x < bw; ++x) count += mask.at(gy * bh + y, gx * bw + x) ? 1 : 0;
            out.at(gy, gx) = (2 * count >= static_cast<std::int64_t>(bh) * bw) ? 1 : 0;
        }
    return out;
}

static void check_binary(const Tensor<std::uint8_t>& m, const char* who) {
    for (auto v : m.data)
        if (v != 0 && v != 1) throw ValidationError(std::string(who) + ": mask must be binary");
}

IoUResult iou(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt) {
    if (!pred.same_shape(gt)) throw ValidationError("iou: shape mismatch");
    check_binary(pred, "iou");
    check_binary(gt, "iou");
    IoUResult r;
    for (std::int64_t i = 0; i < pred.numel(); ++i) {
        const bool p = pred[i] != 0, g = gt[i] != 0;
        r.intersection += (p && g) ? 1 : 0;
        r.union_ += (p || g) ? 1 : 0;
    }
    r.ratio = r.union_ == 0 ? 1.0
                            : static_cast<double>(r.intersection) / static_cast<double>(r.union_);
    return r;
}

void MetricAccumulator::add(const IoUResult& r) {
    samples.push_back(r);
    total_intersection += r.intersection;
    total_union += r.union_;
}

void MetricAccumulator::add(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt) {
    add(iou(pred, gt));
}

void MetricAccumulator::merge(const MetricAccumulator& other) {
    samples.insert(samples.end(), other.samples.begin(), other.samples.end());
    total_intersection += other.total_intersection;
    total_union += other.total_union;
}

static std::string threshold_key(double t) {
    std::ostringstream os;
    os << t;
    return os.str();
}

MetricsReport aggregate_metrics(const MetricAccumulator& acc,
                                const std::vector<double>& thresholds) {
    if (acc.samples.empty()) throw ValidationError("aggregate_metrics: no samples accumulated");
    MetricsReport rep;
    rep.n = static_cast<int>(acc.samples.size());
    double sum = 0;
    for (const auto& s : acc.samples) sum += s.ratio;
    rep.miou = sum / rep.n;
    rep.oiou = acc.total_union == 0
                   ? 1.0
                   : static_cast<double>(acc.total_intersection) /
                         static_cast<double>(acc.total_union);
    for (double t : thresholds) {
        int hits = 0;
        for (const auto& s : acc.samples) hits += s.ratio >= t ? 1 : 0;
        rep.prec[threshold_key(t)] = static_cast<double>(hits) / rep.n;
    }
    return rep;
}

std::string MetricsReport::to_json() const {
    nlohmann::ordered_json j;
    j["miou"] = miou;
    j["oiou"] = oiou;
    nlohmann::ordered_json p;
    for (const auto& [k, v] : prec) p[k] = v;
    j["prec"] = p;
    j["n"] = n;
    return j.dump(2) + "\n";
}

#define RISCLIP_OBJ_INSTANTIATE(T)                                                               \
    template Var<T> dice_loss<T>(const Var<T>&, const Tensor<T>&, T);                            \
    template Var<T> focal_loss<T>(const Var<T>&, const Tensor<T>&, T, T, bool);                  \
    template Var<T> combined_loss<T>(const Var<T>&, const Tensor<T>&, const LossConfig&);

RISCLIP_OBJ_INSTANTIATE(float)
RISCLIP_OBJ_INSTANTIATE(double)

}  // namespace risclip
