// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "moedge/edgenet.hpp"
#include "moedge/model.hpp"

namespace moedge {

// Roofline-style proxy costs. Full precision is 2 bytes per parameter, so an
// expert has expert_param_bytes / 2 parameters. The effective rate folds a
// utilization factor into the advertised per-GPU FLOP rate; both knobs are
// scenario-level calibration constants.
struct CostModel {
    double flops_per_param = 2.0;  // one multiply-accumulate
    double utilization = 0.4;
    bool activation_quant = true;       // scale activation bytes by bits/16
    bool quant_compute_speedup = false;  // off: quantization affects memory/transfer only

    double expert_compute_time(const MoEModelSpec& spec, const ServerSpec& server,
                               int bits) const {
        const double params = static_cast<double>(spec.expert_param_bytes) / 2.0;
        double t = params * flops_per_param / (server.compute_rate_flops * utilization);
        if (quant_compute_speedup) t *= static_cast<double>(bits) / 16.0;
        return t;
    }

    // Bytes shipped per token activation toward an expert held at dest_bits.
    double activation_bytes(const MoEModelSpec& spec, int dest_bits) const {
        double b = static_cast<double>(spec.hidden_dim) * spec.activation_bytes_per_element;
        if (activation_quant) b *= static_cast<double>(dest_bits) / 16.0;
        return b;
    }

    void validate() const {
        if (flops_per_param <= 0.0) throw ConfigError("cost_model: flops_per_param must be > 0");
        if (utilization <= 0.0 || utilization > 1.0)
            throw ConfigError("cost_model: utilization must be in (0, 1]");
    }
};

}  // namespace moedge
