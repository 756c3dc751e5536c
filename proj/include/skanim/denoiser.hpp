// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "skanim/diffusion.hpp"
#include "skanim/lora.hpp"

namespace skanim {

// Small prompt vocabulary; each distinct string maps to one trainable row.
struct PromptVocab {
    std::vector<std::string> names;
    std::vector<Eigen::VectorXd> rows;

    int find(const std::string& name) const;  // -1 if absent
    int id(const std::string& name) const;    // throws if absent
    int register_prompt(const std::string& name, int dim, Rng& rng);
    // Composite prompt whose embedding is the mean of two existing rows.
    int register_composite(const std::string& name, int id_a, int id_b);
};

// One attention block: single-head self-attention plus a 2-layer
// feed-forward, both with residual connections.
struct AttentionBlock {
    Eigen::MatrixXd wq, wk, wv, wo;  // d x d
    Eigen::MatrixXd ff1;             // dff x d
    Eigen::MatrixXd ff2;             // d x dff
};

// Base parameters W0 of the toy denoiser. The unembed head is
// zero-initialized, so a freshly initialized model predicts eps_hat = 0.
struct DenoiserWeights {
    int d_model    = 0;
    int patch      = 0;
    int tokens_h   = 0;  // latent_h / patch
    int tokens_w   = 0;
    int max_frames = 0;

    Eigen::MatrixXd embed;        // d x patch^2
    Eigen::MatrixXd unembed;      // patch^2 x d, zero at init
    Eigen::MatrixXd pos_spatial;  // d x (tokens_h * tokens_w)
    Eigen::MatrixXd pos_frame;    // d x max_frames, learned frame positions
    Eigen::MatrixXd time_proj;    // d x d over sinusoidal timestep features
    AttentionBlock spatial;
    AttentionBlock temporal;
    PromptVocab prompts;

    int tokens_per_frame() const { return tokens_h * tokens_w; }
};

// Stable attachment keys for adapters: spatial.q .. temporal.o.
const std::vector<std::string>& attachment_keys();
Eigen::MatrixXd& weight_for_key(DenoiserWeights& w, const std::string& key);
const Eigen::MatrixXd& weight_for_key(const DenoiserWeights& w, const std::string& key);

// An adapter applied at merge scale lambda (on top of its own alpha).
struct Attachment {
    const LoraAdapter* adapter;
    double scale = 1.0;
};

std::vector<Attachment> attach(const std::vector<const LoraAdapter*>& adapters, double scale);

struct ConditioningContext {
    Eigen::VectorXd prompt_embedding;
    int t         = 0;
    int prompt_id = -1;  // set when the embedding is a single vocab row
};

ConditioningContext make_context(const DenoiserWeights& w, int prompt_id, int t);
ConditioningContext make_merged_context(const DenoiserWeights& w, int id_a, int id_b, int t);

DenoiserWeights init_weights(Rng& rng, int d_model, int patch, int max_frames, int latent_h,
                             int latent_w);

// eps_hat = denoiser(z_t, ctx) with adapters applied on the fly as
// W0 + scale * alpha * B * A. Clips with a single frame bypass the
// temporal block entirely (and use frame position 0).
LatentVideo predict_noise(const LatentVideo& z_t, const ConditioningContext& ctx,
                          const DenoiserWeights& w, const std::vector<Attachment>& adapters);

struct FrameFilter {
    enum Kind { kAllFrames, kSingleFrame } kind = kAllFrames;
    int index = 0;

    static FrameFilter all() { return {kAllFrames, 0}; }
    static FrameFilter single(int i) { return {kSingleFrame, i}; }
};

struct BlockGradients {
    Eigen::MatrixXd wq, wk, wv, wo, ff1, ff2;
};

struct BaseGradients {
    Eigen::MatrixXd embed, unembed, pos_spatial, pos_frame, time_proj;
    BlockGradients spatial, temporal;
};

struct AdapterGradient {
    Eigen::MatrixXd b;
    Eigen::MatrixXd a;
};

struct GradientRequest {
    bool base = false;
    std::vector<const LoraAdapter*> adapters;  // subset of the attached adapters
    std::vector<int> prompt_ids;               // rows of the vocab to train
};

struct LossAndGrads {
    double loss = 0.0;
    std::optional<BaseGradients> base;
    std::map<const LoraAdapter*, AdapterGradient> adapters;
    std::map<int, Eigen::VectorXd> prompt_rows;
};

// MSE between eps and the prediction on add_noise(z0, t, eps), averaged per
// element over the included frames; reverse-mode gradients restricted to the
// requested parameters (base W0 stays frozen unless request.base is set).
// A single-frame filter treats the chosen frame as an F=1 clip.
LossAndGrads loss_and_grads(const LatentVideo& z0, const LatentVideo& eps, int t,
                            const ConditioningContext& ctx, const NoiseSchedule& sched,
                            FrameFilter filter, const DenoiserWeights& w,
                            const std::vector<Attachment>& adapters, const GradientRequest& request);

// Backward-pass call counter; lets tests confirm the distillation stage
// never backpropagates through the denoiser.
long backward_call_count();
void reset_backward_call_count();

void save_weights(const DenoiserWeights& w, const std::string& path);
DenoiserWeights load_weights(const std::string& path);

}  // namespace skanim
