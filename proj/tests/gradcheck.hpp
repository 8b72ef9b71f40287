#pragma once

#include "fdn/model.hpp"

#include <torch/torch.h>

#include <algorithm>
#include <map>
#include <random>
#include <string>

namespace oracle {

// Tiny float64 model used for finite-difference checks.
inline fdn::model::ModelConfig tiny_config(const fdn::model::AblationFlags& flags = {})
{
    fdn::model::ModelConfig cfg;
    cfg.dof = 2;
    cfg.history = 16;
    cfg.horizon = 16;
    cfg.latent = 8;
    cfg.patch = 8;
    cfg.stride = 8;
    cfg.experts = 2;
    cfg.encoder = {1, 2, 2};
    cfg.ablation = flags;
    return cfg;
}

// Moves the model away from its symmetric initialization (identity filters,
// zero gate) so that every parameter group has a non-trivial gradient.
inline void perturb(fdn::model::FDN& model, uint64_t seed)
{
    torch::NoGradGuard guard;
    auto gen = at::detail::createCPUGenerator(seed);
    for (auto& item : model->named_parameters()) {
        auto& p = item.value();
        const double scale = item.key().find("fef.") == 0 ? 0.5 : 0.1;
        p.add_(torch::randn(p.sizes(), gen, p.options()) * scale);
    }
}

struct GroupError {
    double relative = 0.0;
    double analytic_norm = 0.0;
    int64_t checked = 0;
};

// Relative error ||g_fd - g|| / max(||g_fd||, ||g||) per named parameter, with
// central differences of step h on up to `per_group` coordinates per tensor.
template <class Objective>
std::map<std::string, GroupError> gradient_errors(torch::nn::Module& module, Objective objective, double h = 1e-4,
                                                  int64_t per_group = 48, uint64_t seed = 0)
{
    module.zero_grad();
    objective().backward();

    std::map<std::string, GroupError> out;
    std::mt19937_64 rng(seed);
    torch::NoGradGuard guard;
    for (auto& item : module.named_parameters()) {
        auto& p = item.value();
        if (!p.requires_grad())
            continue;
        auto flat = p.view(-1);
        auto grad = p.grad().defined() ? p.grad().view(-1) : torch::zeros_like(flat);
        std::vector<int64_t> ids(static_cast<size_t>(flat.numel()));
        for (size_t i = 0; i < ids.size(); ++i)
            ids[i] = static_cast<int64_t>(i);
        std::shuffle(ids.begin(), ids.end(), rng);
        ids.resize(static_cast<size_t>(std::min<int64_t>(per_group, flat.numel())));

        double diff2 = 0.0, fd2 = 0.0, an2 = 0.0;
        for (auto i : ids) {
            const double orig = flat[i].item<double>();
            flat[i] = orig + h;
            const double up = objective().template item<double>();
            flat[i] = orig - h;
            const double down = objective().template item<double>();
            flat[i] = orig;
            const double fd = (up - down) / (2.0 * h);
            const double an = grad[i].item<double>();
            diff2 += (fd - an) * (fd - an);
            fd2 += fd * fd;
            an2 += an * an;
        }
        GroupError e;
        e.analytic_norm = std::sqrt(an2);
        e.relative = std::sqrt(diff2) / std::max({std::sqrt(fd2), std::sqrt(an2), 1e-8});
        e.checked = static_cast<int64_t>(ids.size());
        out[item.key()] = e;
    }
    return out;
}

}  // namespace oracle
