#pragma once

#include <cstdint>
#include <string>

#include "dfssm/common.hpp"

namespace dfssm {

enum class ConvBlockKind { kMgcb, kConvLayer };

// Architectural hyperparameters. Presets: DFSSM (C=48, [1,3]) and DFSSM-S
// (C=32, [1,2]).
struct ModelConfig {
    int c = 48;
    int n_s = 1;
    int n_f = 3;
    double gamma = 2.0;
    int state_dim = 16;
    int expand = 2;
    int levels = 4;
    ConvBlockKind conv_block = ConvBlockKind::kMgcb;
    bool use_freq_loss = true;
    double lambda_f = 0.01;

    void validate() const;

    static ModelConfig preset_dfssm() { return ModelConfig{}; }
    static ModelConfig preset_dfssm_s() {
        ModelConfig c;
        c.c = 32;
        c.n_s = 1;
        c.n_f = 2;
        return c;
    }
};

struct TrainConfig {
    std::int64_t iterations = -1;  // required for training runs
    int batch_size = 4;
    int patch_size = 128;
    double lr_init = 3e-4;
    double lr_final = 1e-6;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double weight_decay = 1e-4;
    double adam_eps = 1e-8;
    double grad_clip = 0.0;  // 0 disables
    std::uint64_t seed = 0;
    std::int64_t checkpoint_every = 500;
    std::int64_t log_every = 50;

    void validate() const;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
};

// UTF-8 `key = value` lines, '#' comments. A `variant` key (dfssm | dfssm-s)
// applies its preset before any other key regardless of line order; unknown
// keys are an error.
RunConfig parse_config_text(const std::string& text);
RunConfig load_config(const std::string& path);
std::string render_config(const RunConfig& cfg);

}  // namespace dfssm
