#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "risclip/autodiff.hpp"
#include "risclip/errors.hpp"

namespace risclip {

struct LossConfig {
    double lambda_dice = 1.0;
    double lambda_focal = 1.75;
    double alpha_focal = 0.65;
    double gamma_focal = 2.0;
    double dice_epsilon = 1.0;
    std::string focal_reduction = "mean";  // or "sum"
    void validate() const;
};

// 1 - (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps)
template <typename T>
Var<T> dice_loss(const Var<T>& p, const Tensor<T>& target, T eps);

// -alpha*g*(1-p)^gamma*ln p - (1-alpha)*(1-g)*p^gamma*ln(1-p);
// p clamped to [1e-7, 1-1e-7]
template <typename T>
Var<T> focal_loss(const Var<T>& p, const Tensor<T>& target, T alpha, T gamma, bool mean_reduce);

template <typename T>
Var<T> combined_loss(const Var<T>& p, const Tensor<T>& target, const LossConfig& cfg);

// area-average pool over (H/g)^2 blocks, thresholded at 0.5 with ties -> 1
Tensor<std::uint8_t> downsample_gt(const Tensor<std::uint8_t>& mask, int grid);

struct IoUResult {
    std::int64_t intersection = 0;
    std::int64_t union_ = 0;
    double ratio = 1.0;  // both-empty convention
};

IoUResult iou(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt);

struct MetricAccumulator {
    std::vector<IoUResult> samples;
    std::int64_t total_intersection = 0;
    std::int64_t total_union = 0;

    void add(const IoUResult& r);
    void add(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt);
    void merge(const MetricAccumulator& other);
};

struct MetricsReport {
    double miou = 0;
    double oiou = 0;
    std::map<std::string, double> prec;  // threshold (as written) -> fraction
    int n = 0;
    std::string to_json() const;
};

MetricsReport aggregate_metrics(const MetricAccumulator& acc,
                                const std::vector<double>& thresholds = {0.5, 0.7, 0.9});

}  // namespace risclip
