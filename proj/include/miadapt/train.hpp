#pragma once

#include <cstdint>
#include <functional>

#include <json.hpp>

#include "miadapt/detector.hpp"

namespace miadapt {

/// Supervised training of the reference detector on a labeled dataset.
struct TrainConfig {
    double learning_rate = 0.02;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int steps = 2000;
    int warmup_steps = 100;
    double lr_drop_at = 0.75;  // fraction of steps after which lr is divided by 10
    double grad_clip = 10.0;   // global norm; <= 0 disables
    bool hflip = true;
    std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct StepRecord {
    int step = 0;
    LossBreakdown loss;
    double learning_rate = 0.0;
};

using StepCallback = std::function<void(const StepRecord&)>;

/// In-place SGD: v = mu*v + g + wd*theta; theta -= lr*v. A null velocity
/// means plain SGD without momentum.
void sgd_update(ModelParams& p, const Tensors& grads, double lr, double weight_decay = 0.0,
                Tensors* velocity = nullptr, double momentum = 0.0);

/// Scales gradients so their global norm is at most max_norm; returns the
/// norm before scaling.
double clip_grad_norm(Tensors& grads, double max_norm);

Image hflip(const Image& img);
std::vector<Annotation> hflip(const std::vector<Annotation>& anns, int width);

ModelParams train_detector(ModelParams init, const Dataset& data, const TrainConfig& cfg,
                           const StepCallback& on_step = {});

}  // namespace miadapt
