#include "miadapt/train.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace miadapt {

void to_json(nlohmann::json& j, const TrainConfig& c) {
    j = {{"learning_rate", c.learning_rate}, {"momentum", c.momentum},   {"weight_decay", c.weight_decay},
         {"steps", c.steps},                 {"warmup_steps", c.warmup_steps}, {"lr_drop_at", c.lr_drop_at},
         {"grad_clip", c.grad_clip},         {"hflip", c.hflip},         {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    auto get = [&](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    get("learning_rate", c.learning_rate);
    get("momentum", c.momentum);
    get("weight_decay", c.weight_decay);
    get("steps", c.steps);
    get("warmup_steps", c.warmup_steps);
    get("lr_drop_at", c.lr_drop_at);
    get("grad_clip", c.grad_clip);
    get("hflip", c.hflip);
    get("seed", c.seed);
}

void sgd_update(ModelParams& p, const Tensors& grads, double lr, double weight_decay, Tensors* velocity,
                double momentum) {
    for (auto& [name, theta] : p.tensors) {
        Eigen::MatrixXd step = grads.at(name);
        if (weight_decay != 0.0) step += weight_decay * theta;
        if (velocity) {
            auto& v = (*velocity)[name];
            if (v.size() == 0) v = Eigen::MatrixXd::Zero(theta.rows(), theta.cols());
            v = momentum * v + step;
            theta -= lr * v;
        } else {
            theta -= lr * step;
        }
    }
}

double clip_grad_norm(Tensors& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, g] : grads) sq += g.squaredNorm();
    const double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        const double s = max_norm / norm;
        for (auto& [name, g] : grads) g *= s;
    }
    return norm;
}

Image hflip(const Image& img) {
    Image out = img;
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(img.width - 1 - x, y, c);
    return out;
}

std::vector<Annotation> hflip(const std::vector<Annotation>& anns, int width) {
    std::vector<Annotation> out = anns;
    for (auto& a : out) a.box = {width - a.box.x_max, a.box.y_min, width - a.box.x_min, a.box.y_max};
    return out;
}

ModelParams train_detector(ModelParams params, const Dataset& data, const TrainConfig& cfg,
                           const StepCallback& on_step) {
    if (data.empty()) throw std::invalid_argument("train_detector: empty dataset");
    if (cfg.steps < 0) throw std::invalid_argument("train_detector: steps must be >= 0");
    Rng order_rng(derive_seed(cfg.seed, "train-order"));
    Rng sample_rng(derive_seed(cfg.seed, "train-sample"));
    Rng flip_rng(derive_seed(cfg.seed, "train-flip"));
    std::vector<std::size_t> order(data.images.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    Tensors velocity;

    for (int step = 0; step < cfg.steps; ++step) {
        if (cursor == order.size()) {
            order_rng.shuffle(order.begin(), order.end());
            cursor = 0;
        }
        const auto& li = data.images[order[cursor++]];
        const bool flip = cfg.hflip && flip_rng.bernoulli(0.5);
        const Image img = flip ? hflip(li.image) : li.image;
        const auto gt = flip ? hflip(li.annotations, li.image.width) : li.annotations;

        double lr = cfg.learning_rate;
        if (step < cfg.warmup_steps) lr *= static_cast<double>(step + 1) / cfg.warmup_steps;
        if (step >= static_cast<int>(cfg.lr_drop_at * cfg.steps)) lr *= 0.1;

        Tensors grads = zero_like(params);
        const auto loss = detection_loss(params, img, gt, sample_rng, &grads);
        clip_grad_norm(grads, cfg.grad_clip);
        sgd_update(params, grads, lr, cfg.weight_decay, &velocity, cfg.momentum);
        if (on_step) on_step({step, loss, lr});
    }
    return params;
}

}  // namespace miadapt
