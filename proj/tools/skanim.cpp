// SPDX-License-Identifier: Apache-2.0
//
// skanim: animate a vector sketch with motion learned from a reference clip.
//
//   skanim pretrain --out out
//   skanim synth    --out out/ref --motion translate
//   skanim stage1   --out out --sketch wedge.svg --prompt "a wedge"
//   skanim stage2   --out out --video-dir out/ref --prompt "a box is sliding"
//   skanim stage3   --out out --sketch wedge.svg
//   skanim eval     --out out --sketch wedge.svg --track out/ref/track.csv
//   skanim render   --out out --sketch wedge.svg

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "skanim/pipeline.hpp"

namespace {

struct FlagValues {
    std::vector<std::pair<std::string, std::string>> overrides;
};

void add_common_flags(CLI::App* cmd, std::string& config_path, FlagValues& flags) {
    cmd->add_option("--config", config_path, "flat key=value config file");
    auto add = [cmd, &flags](const std::string& flag, const std::string& key, const std::string& help) {
        auto cb = [&flags, key](const std::string& v) { flags.overrides.emplace_back(key, v); };
        cmd->add_option_function<std::string>(flag, cb, help);
    };
    add("--seed", "seed", "global seed");
    add("--out", "out", "output directory");
    add("--sketch", "sketch", "input sketch SVG");
    add("--video-dir", "video_dir", "reference video PGM directory");
    add("--prompt", "prompt", "prompt for this stage");
    add("--prompt-a", "prompt_a", "stage-1 subject prompt");
    add("--prompt-m", "prompt_m", "stage-2 motion prompt");
    add("--steps", "steps", "stage-1/2 optimization steps");
    add("--sds-iterations", "sds_iterations", "stage-3 iterations");
    add("--rank", "rank", "adapter rank");
    add("--lambda-a", "lambda_a", "appearance merge scale");
    add("--lambda-m", "lambda_m", "motion merge scale");
    add("--frames", "frames", "frame count F");
    add("--resolution", "resolution", "raster resolution");
    add("--snapshot-every", "snapshot_every", "snapshot period (stage 3)");
    add("--track", "track", "reference centroid-track CSV");
    add("--motion", "motion", "synth motion kind");
    add("--shape", "shape", "synth shape (square|disk)");
    add("--pretrain-steps", "pretrain_steps", "pretraining steps");
    add("--d-model", "d_model", "denoiser width");
    add("--ablation", "ablation", "eval ablation mode (0/1)");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale sketch animation pipeline"};
    app.require_subcommand(1);

    const char* names[] = {"pretrain", "stage1", "stage2", "stage3", "eval", "synth", "render"};
    const char* help[] = {
        "train the base denoiser on built-in synthetic clips",
        "learn sketch appearance adapters (A-LoRAs)",
        "learn reference-video appearance and motion adapters (A'/M-LoRAs)",
        "distill the merged video prior into an animated sketch",
        "score stage-3 output (optionally with adapter ablations)",
        "generate a synthetic reference clip and its centroid track",
        "rasterize a sketch SVG to PGM",
    };

    std::string config_path;
    FlagValues flags;
    for (int i = 0; i < 7; i++) add_common_flags(app.add_subcommand(names[i], help[i]), config_path, flags);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        skanim::RunConfig cfg;
        if (!config_path.empty()) skanim::apply_config_file(cfg, config_path);
        for (const auto& [key, value] : flags.overrides)
            skanim::apply_config_override(cfg, key, value);

        std::string cmd = app.get_subcommands().front()->get_name();
        if (cmd == "pretrain") {
            skanim::PretrainResult r = skanim::cmd_pretrain(cfg);
            std::printf("pretrain done: heldout %.4f vs untrained %.4f\n", r.heldout_loss,
                        r.untrained_heldout_loss);
        } else if (cmd == "stage1") {
            skanim::cmd_stage1(cfg);
            std::printf("stage1 done: adapters_appearance.skad written\n");
        } else if (cmd == "stage2") {
            skanim::cmd_stage2(cfg);
            std::printf("stage2 done: adapters_motion.skad written\n");
        } else if (cmd == "stage3") {
            skanim::cmd_stage3(cfg);
            std::printf("stage3 done: animation.svg written\n");
        } else if (cmd == "eval") {
            for (const skanim::EvalRow& r : skanim::cmd_eval(cfg))
                std::printf("%-12s appearance %.4f  motion %.4f  temporal %.4f\n", r.variant.c_str(),
                            r.appearance, r.motion, r.temporal);
        } else if (cmd == "synth") {
            skanim::cmd_synth(cfg);
            std::printf("synth done: frames and track.csv written\n");
        } else if (cmd == "render") {
            skanim::cmd_render(cfg);
            std::printf("render done: render.pgm written\n");
        }
    } catch (const skanim::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const skanim::MissingArtifactError& e) {
        std::fprintf(stderr, "missing artifact: %s\n", e.what());
        return 3;
    } catch (const skanim::NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
