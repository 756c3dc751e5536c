// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <set>
#include <string>
#include <vector>

#include "skanim/errors.hpp"
#include "skanim/metrics.hpp"
#include "skanim/sds.hpp"
#include "skanim/trainer.hpp"

namespace skanim {

// Flat key=value configuration; command-line overrides are applied after the
// file (later wins). Unknown keys are errors.
struct RunConfig {
    unsigned long long seed = 0;
    std::string out         = "out";
    std::string sketch;     // path to the input sketch SVG
    std::string video_dir;  // directory of reference PGM frames
    std::string prompt_a;   // stage-1 subject prompt
    std::string prompt_m;   // stage-2 motion prompt
    std::string prompt;     // stage-3 inference prompt (default: composed)
    std::string track;      // reference centroid-track CSV for eval
    int steps           = 500;
    int sds_iterations  = 1000;
    double lr           = 1e-3;
    double sds_lr       = 2e-3;
    double lambda_a     = 0.5;
    double lambda_m     = 1.0;
    int frames          = 16;
    int resolution      = 64;
    int pool            = 2;
    int patch           = 4;
    int d_model         = 32;
    int rank            = 4;
    double lora_alpha   = 1.0;
    double tau          = 0.006;
    int samples_per_curve = 32;
    int schedule_steps  = 1000;
    int pretrain_steps  = 2000;
    double pretrain_lr  = 1e-3;
    int snapshot_every  = 0;
    int heldout_draws   = 256;
    int fps             = 8;
    std::string w_mode  = "constant";  // or "sigma2"
    std::string motion  = "translate";  // synth subcommand
    std::string shape   = "square";
    double synth_size      = 0.22;
    double synth_amplitude = 0.5;
    double synth_jitter    = 0.0;
    bool ablation       = false;

    std::set<std::string> explicit_keys;  // keys set by file or flags
    bool is_explicit(const std::string& key) const { return explicit_keys.count(key) > 0; }
};

// Throws ConfigError on unknown keys or malformed values.
void apply_config_override(RunConfig& cfg, const std::string& key, const std::string& value);
RunConfig load_config_file(const std::string& path);
void apply_config_file(RunConfig& cfg, const std::string& path);

// Subject-swap composition of the stage-3 inference prompt: the motion
// prompt with its leading two-token subject replaced by the sketch subject
// ("a wedge" + "a box is sliding" -> "a wedge is sliding").
std::string compose_inference_prompt(const std::string& prompt_a, const std::string& prompt_m);

struct PretrainResult {
    double final_loss;
    double heldout_loss;
    double untrained_heldout_loss;
};

// Trains W0 (full parameters plus the prompt table) on a built-in mixture of
// synthetic stroke and filled-shape clips, then saves the weights.
PretrainResult cmd_pretrain(const RunConfig& cfg);

void cmd_stage1(const RunConfig& cfg);
void cmd_stage2(const RunConfig& cfg);
void cmd_stage3(const RunConfig& cfg);

struct EvalRow {
    std::string variant;
    double appearance;
    double motion;
    double temporal;
};

std::vector<EvalRow> cmd_eval(const RunConfig& cfg);
void cmd_synth(const RunConfig& cfg);
void cmd_render(const RunConfig& cfg);

void write_eval_csv(const std::vector<EvalRow>& rows, const std::string& path);
std::vector<EvalRow> read_eval_csv(const std::string& path);

// Exclusive advisory lock on an output directory; held for the duration of
// one command.
class DirLock {
public:
    explicit DirLock(const std::string& dir);
    ~DirLock();
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    std::string path_;
};

}  // namespace skanim
