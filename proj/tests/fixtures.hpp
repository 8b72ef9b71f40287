#pragma once

#include "fdn/dataset.hpp"
#include "fdn/model.hpp"

#include <vector>

namespace fixture {

struct Data {
    std::vector<fdn::dataset::Episode> episodes;  // preprocessed
    fdn::dataset::WindowSet windows{100, 100, {}};
    fdn::dataset::NormStats stats;
};

// Short preprocessed synthetic episodes windowed for L = T = 100.
inline Data synthetic(int count, double duration_s, int stride, uint64_t seed = 1, int history = 100,
                      int horizon = 100)
{
    fdn::dataset::SynthConfig cfg;
    cfg.duration_s = duration_s;
    Data d;
    d.windows = fdn::dataset::WindowSet(history, horizon, cfg.filter);
    for (int i = 0; i < count; ++i) {
        auto e = fdn::dataset::preprocess_episode(fdn::dataset::synth_episode(cfg, seed + static_cast<uint64_t>(i)),
                                                  cfg.filter);
        e.name = "episode_" + std::to_string(i);
        d.windows.add_episode(e, stride);
        d.episodes.push_back(std::move(e));
    }
    d.stats = fdn::dataset::fit_norm(d.windows);
    return d;
}

inline fdn::model::ModelConfig small_model(int dof = 6)
{
    fdn::model::ModelConfig cfg;
    cfg.dof = dof;
    cfg.latent = 16;
    cfg.experts = 4;
    cfg.encoder = {1, 2, 2};
    return cfg;
}

}  // namespace fixture
