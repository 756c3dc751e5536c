// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "skanim/diffusion.hpp"

namespace skanim {

// Low-rank additive update dW = alpha * B * A for one named projection.
struct LoraAdapter {
    std::string target;      // attachment key, e.g. "spatial.q"
    Eigen::MatrixXd lora_b;  // d x r, zero at creation
    Eigen::MatrixXd lora_a;  // r x k, Gaussian at creation
    int rank     = 0;
    double alpha = 1.0;      // train-time scale

    Eigen::MatrixXd delta() const { return alpha * lora_b * lora_a; }
};

enum class LoraRole {
    kSketchAppearance,  // A-LoRAs: spatial keys, sketch
    kVideoAppearance,   // A'-LoRAs: spatial keys, reference-video appearance (archived)
    kMotion,            // M-LoRAs: temporal keys
};

const char* lora_role_name(LoraRole role);
LoraRole lora_role_from_name(const std::string& name);

struct TaggedAdapter {
    LoraRole role;
    LoraAdapter adapter;
};

// Role-tagged collection. Appearance roles may target only spatial keys,
// motion only temporal keys; add() enforces this.
struct AdapterSet {
    std::vector<TaggedAdapter> items;
    // New-prompt embeddings trained alongside the adapters in a stage;
    // carried in the same file so a stage's output is self-contained.
    std::map<std::string, Eigen::VectorXd> trained_prompts;

    void add(LoraRole role, LoraAdapter adapter);
    std::vector<const LoraAdapter*> with_role(LoraRole role) const;
};

// B = 0 (so the initial delta is exactly zero), A ~ N(0, 1/sqrt(k)).
// Enforces 1 <= r <= min(d, k)/4.
LoraAdapter new_adapter(const std::string& target, int d, int k, int rank, double alpha, Rng& rng);

struct MergeContribution {
    const LoraAdapter* adapter;
    double lambda;
};

// W0 + sum_j lambda_j * alpha_j * B_j * A_j.
Eigen::MatrixXd merge(const Eigen::MatrixXd& w0, const std::vector<MergeContribution>& contributions);

// File container: "SKADSET1 <n>" then per adapter a ROLE line and the
// adapter block (magic SKAD1, target, dims line, raw little-endian f32
// payload B then A), then an optional PROMPTS section.
void save_adapters(const AdapterSet& set, const std::string& path);
AdapterSet load_adapters(const std::string& path);

// Rounds every coefficient to the nearest f32. Trained tensors are kept on
// the f32 grid so that save/load round-trips reproduce in-memory state
// exactly.
void quantize_to_f32(Eigen::MatrixXd& m);
void quantize_to_f32(Eigen::VectorXd& v);

}  // namespace skanim
