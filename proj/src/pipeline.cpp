// SPDX-License-Identifier: Apache-2.0

#include "skanim/pipeline.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "skanim/adam.hpp"

namespace fs = std::filesystem;

namespace skanim {

namespace {

// ---------------------------------------------------------------- config --

long long to_int(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        long long v = std::stoll(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected integer, got '" + value + "'");
    }
}

double to_double(const std::string& key, const std::string& value) {
    try {
        size_t pos = 0;
        double v = std::stod(value, &pos);
        if (pos != value.size()) throw std::invalid_argument("");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected number, got '" + value + "'");
    }
}

bool to_bool(const std::string& key, const std::string& value) {
    if (value == "1" || value == "true" || value == "yes") return true;
    if (value == "0" || value == "false" || value == "no") return false;
    throw ConfigError("config key '" + key + "': expected boolean, got '" + value + "'");
}

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    size_t b = s.find_last_not_of(" \t\r\n");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
}

// Plain key=value reader without key validation (meta files).
std::map<std::string, std::string> read_kv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("missing file: " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(in, line)) {
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos) continue;
        kv[trim(t.substr(0, eq))] = trim(t.substr(eq + 1));
    }
    return kv;
}

void write_kv_file(const std::map<std::string, std::string>& kv, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    for (const auto& [k, v] : kv) out << k << " = " << v << "\n";
}

std::string fmt_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

// ------------------------------------------------------------- artifacts --

fs::path out_path(const RunConfig& cfg, const std::string& name) {
    return fs::path(cfg.out) / name;
}

void require_artifact(const fs::path& p, const std::string& hint) {
    if (!fs::exists(p))
        throw MissingArtifactError("missing artifact: " + p.string() + " (" + hint + ")");
}

SketchFrame load_sketch(const RunConfig& cfg) {
    if (cfg.sketch.empty()) throw ConfigError("no sketch path configured (set 'sketch' or --sketch)");
    require_artifact(cfg.sketch, "input sketch SVG");
    std::ifstream in(cfg.sketch);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_svg(ss.str());
}

StageConfig stage_config_from(const RunConfig& cfg, const std::string& prompt) {
    StageConfig sc;
    sc.steps = cfg.steps;
    sc.lr = cfg.lr;
    sc.seed = cfg.seed;
    sc.prompt = prompt;
    sc.resolution = cfg.resolution;
    sc.pool = cfg.pool;
    sc.softness.tau = cfg.tau;
    sc.softness.samples_per_curve = cfg.samples_per_curve;
    sc.rank = cfg.rank;
    sc.lora_alpha = cfg.lora_alpha;
    sc.schedule_steps = cfg.schedule_steps;
    sc.heldout_draws = cfg.heldout_draws;
    return sc;
}

SdsConfig sds_config_from(const RunConfig& cfg) {
    SdsConfig sds;
    sds.iterations = cfg.sds_iterations;
    sds.lr = cfg.sds_lr;
    sds.lambda_a = cfg.lambda_a;
    sds.lambda_m = cfg.lambda_m;
    sds.seed = cfg.seed;
    sds.height = cfg.resolution;
    sds.width = cfg.resolution;
    sds.pool = cfg.pool;
    sds.softness.tau = cfg.tau;
    sds.softness.samples_per_curve = cfg.samples_per_curve;
    sds.snapshot_every = cfg.snapshot_every;
    sds.snapshot_fps = cfg.fps;
    if (cfg.w_mode == "constant") {
        sds.weighting = SdsConfig::Weighting::kConstantOne;
    } else if (cfg.w_mode == "sigma2") {
        sds.weighting = SdsConfig::Weighting::kSigmaSquared;
    } else {
        throw ConfigError("config key 'w_mode': expected constant|sigma2, got '" + cfg.w_mode + "'");
    }
    return sds;
}

// ------------------------------------------------------------- pretrain --

struct PretrainSample {
    LatentVideo z0;
    int prompt_id;
};

// `base` must be positioned with its center at path.track[0]; frame f is the
// base translated to track[f] and scaled about that center.
AnimatedSketch animate_fixture(const SketchFrame& base, const MotionPath& path, double base_size) {
    AnimatedSketch anim = replicate_frames(base, static_cast<int>(path.track.size()));
    for (size_t f = 0; f < path.track.size(); f++) {
        double scale = path.sizes[f] / base_size;
        for (CubicStroke& s : anim.frames[f].strokes)
            for (ControlPoint& p : s.points) {
                p.x = path.track[f][0] + scale * (p.x - path.track[0][0]);
                p.y = path.track[f][1] + scale * (p.y - path.track[0][1]);
            }
    }
    return anim;
}

// The built-in pretraining corpus: stroke outlines and filled shapes under
// each motion kind. Slide clips exist in both directions under one shared
// prompt, so direction is deliberately ambiguous in the base prior.
std::vector<PretrainSample> build_pretrain_mixture(const RunConfig& cfg, DenoiserWeights& w,
                                                   Rng& rng) {
    const int f_count = cfg.frames;
    const int res = cfg.resolution;
    SoftnessConfig soft{cfg.tau, cfg.samples_per_curve};

    struct Subject {
        std::string word;
        bool stroke;
        SketchFrame sketch;          // stroke subjects
        SyntheticParams::Shape fill; // filled subjects
    };
    std::vector<Subject> subjects;
    subjects.push_back({"a box", true, make_box_sketch(0.0, 0.0, 0.24, 0.02), {}});
    subjects.push_back({"a ring", true, make_ring_sketch(0.0, 0.0, 0.26, 0.02), {}});
    subjects.push_back({"a square", false, {}, SyntheticParams::kSquare});
    subjects.push_back({"a disk", false, {}, SyntheticParams::kDisk});

    struct Variant {
        MotionKind kind;
        std::string phrase;  // empty = static clip, bare subject prompt
        double start_x, start_y, amplitude;
    };
    std::vector<Variant> variants = {
        {MotionKind::kTranslate, "", 0.5, 0.5, 0.0},  // static (amplitude 0)
        {MotionKind::kTranslate, "is sliding", 0.25, 0.5, 0.5},
        {MotionKind::kTranslate, "is sliding", 0.75, 0.5, -0.5},
        {MotionKind::kBounce, "is bouncing", 0.5, 0.68, 0.4},
        {MotionKind::kJump, "is jumping", 0.5, 0.68, 0.4},
        {MotionKind::kScalePulse, "is pulsing", 0.5, 0.5, 0.0},
    };

    std::vector<PretrainSample> samples;
    for (const Subject& subj : subjects) {
        for (const Variant& var : variants) {
            SyntheticParams p;
            p.shape = subj.fill;
            p.size = 0.24;
            p.start_x = var.start_x;
            p.start_y = var.start_y;
            p.amplitude = var.amplitude;

            RasterVideo video;
            if (subj.stroke) {
                MotionPath path = make_motion_path(var.kind, f_count, p);
                SketchFrame placed = subj.sketch;
                for (CubicStroke& s : placed.strokes)
                    for (ControlPoint& pt : s.points) {
                        pt.x += var.start_x;
                        pt.y += var.start_y;
                    }
                AnimatedSketch anim = animate_fixture(placed, path, p.size);
                video = render_video(anim, res, res, soft);
            } else {
                video = make_synthetic_video(var.kind, f_count, res, res, p, rng).video;
            }

            std::string prompt = var.phrase.empty() ? subj.word : subj.word + " " + var.phrase;
            int pid = w.prompts.register_prompt(prompt, w.d_model, rng);
            samples.push_back({encode(video, cfg.pool), pid});
        }
    }
    return samples;
}

void adam_update_base(DenoiserWeights& w, const BaseGradients& g, AdamOptimizer& adam) {
    auto upd = [&](const char* name, Eigen::MatrixXd& param, const Eigen::MatrixXd& grad) {
        adam.update(param, grad, name);
    };
    upd("embed", w.embed, g.embed);
    upd("unembed", w.unembed, g.unembed);
    upd("pos_spatial", w.pos_spatial, g.pos_spatial);
    upd("pos_frame", w.pos_frame, g.pos_frame);
    upd("time_proj", w.time_proj, g.time_proj);
    auto upd_block = [&](const char* prefix, AttentionBlock& blk, const BlockGradients& bg) {
        adam.update(blk.wq, bg.wq, std::string(prefix) + ".wq");
        adam.update(blk.wk, bg.wk, std::string(prefix) + ".wk");
        adam.update(blk.wv, bg.wv, std::string(prefix) + ".wv");
        adam.update(blk.wo, bg.wo, std::string(prefix) + ".wo");
        adam.update(blk.ff1, bg.ff1, std::string(prefix) + ".ff1");
        adam.update(blk.ff2, bg.ff2, std::string(prefix) + ".ff2");
    };
    upd_block("spatial", w.spatial, g.spatial);
    upd_block("temporal", w.temporal, g.temporal);
}

double mixture_heldout_loss(const std::vector<PretrainSample>& samples, const DenoiserWeights& w,
                            const NoiseSchedule& sched, int draws_per_clip,
                            unsigned long long seed) {
    double total = 0.0;
    for (const PretrainSample& s : samples) {
        ConditioningContext ctx = make_context(w, s.prompt_id, 0);
        total += heldout_eps_loss(s.z0, ctx, w, {}, sched, draws_per_clip, seed);
    }
    return total / samples.size();
}

// ---------------------------------------------------------------- stage3 --

struct Stage3Setup {
    DenoiserWeights weights;
    AdapterSet a_set;
    AdapterSet m_set;
    Eigen::VectorXd prompt_embedding;
    std::string inference_prompt;
    int frames;
    int schedule_steps;
    SketchFrame sketch;
    SdsConfig sds;
};

Stage3Setup prepare_stage3(const RunConfig& cfg) {
    Stage3Setup s3;
    fs::path weights_path = out_path(cfg, "weights.skwt");
    fs::path a_path = out_path(cfg, "adapters_appearance.skad");
    fs::path m_path = out_path(cfg, "adapters_motion.skad");
    require_artifact(weights_path, "run pretrain first");
    require_artifact(a_path, "run stage1 first");
    require_artifact(m_path, "run stage2 first");

    s3.weights = load_weights(weights_path.string());
    s3.a_set = load_adapters(a_path.string());
    s3.m_set = load_adapters(m_path.string());

    // Stage-trained prompt rows override or extend the base vocabulary.
    for (const AdapterSet* set : {&s3.a_set, &s3.m_set}) {
        for (const auto& [name, row] : set->trained_prompts) {
            int id = s3.weights.prompts.find(name);
            if (id >= 0) {
                s3.weights.prompts.rows[id] = row;
            } else {
                s3.weights.prompts.names.push_back(name);
                s3.weights.prompts.rows.push_back(row);
            }
        }
    }

    std::string prompt_a = cfg.prompt_a, prompt_m = cfg.prompt_m;
    int frames = cfg.frames;
    fs::path meta1 = out_path(cfg, "stage1.meta"), meta2 = out_path(cfg, "stage2.meta");
    if (fs::exists(meta1)) {
        auto kv = read_kv_file(meta1.string());
        if (prompt_a.empty() && kv.count("prompt_a")) prompt_a = kv.at("prompt_a");
    }
    if (fs::exists(meta2)) {
        auto kv = read_kv_file(meta2.string());
        if (prompt_m.empty() && kv.count("prompt_m")) prompt_m = kv.at("prompt_m");
        if (!cfg.is_explicit("frames") && kv.count("frames"))
            frames = static_cast<int>(to_int("frames", kv.at("frames")));
    }
    if (prompt_a.empty() || prompt_m.empty())
        throw ConfigError("stage3 needs the stage prompts (metas missing; set prompt_a/prompt_m)");

    std::string prompt = cfg.prompt;
    if (prompt.empty()) prompt = compose_inference_prompt(prompt_a, prompt_m);

    int id_a = s3.weights.prompts.find(prompt_a);
    int id_m = s3.weights.prompts.find(prompt_m);
    if (id_a < 0) throw ConfigError("stage-1 prompt \"" + prompt_a + "\" is not in the vocabulary");
    if (id_m < 0) throw ConfigError("stage-2 prompt \"" + prompt_m + "\" is not in the vocabulary");
    int id = s3.weights.prompts.find(prompt);
    if (id < 0) id = s3.weights.prompts.register_composite(prompt, id_a, id_m);

    s3.prompt_embedding = s3.weights.prompts.rows[id];
    s3.inference_prompt = prompt;
    s3.frames = frames;
    s3.schedule_steps = cfg.schedule_steps;
    s3.sketch = load_sketch(cfg);
    s3.sds = sds_config_from(cfg);
    return s3;
}

DistillResult run_distill(const Stage3Setup& s3, double lambda_a, double lambda_m) {
    SdsConfig sds = s3.sds;
    sds.lambda_a = lambda_a;
    sds.lambda_m = lambda_m;
    NoisePredictor predictor = make_denoiser_predictor(
        s3.weights, s3.a_set.with_role(LoraRole::kSketchAppearance),
        s3.m_set.with_role(LoraRole::kMotion), s3.prompt_embedding, lambda_a, lambda_m);
    NoiseSchedule sched = build_schedule(s3.schedule_steps);
    return distill(s3.sketch, s3.frames, predictor, sched, sds);
}

}  // namespace

// ------------------------------------------------------------ public API --

void apply_config_override(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "seed") cfg.seed = static_cast<unsigned long long>(to_int(key, value));
    else if (key == "out") cfg.out = value;
    else if (key == "sketch") cfg.sketch = value;
    else if (key == "video_dir") cfg.video_dir = value;
    else if (key == "prompt_a") cfg.prompt_a = value;
    else if (key == "prompt_m") cfg.prompt_m = value;
    else if (key == "prompt") cfg.prompt = value;
    else if (key == "track") cfg.track = value;
    else if (key == "steps") cfg.steps = static_cast<int>(to_int(key, value));
    else if (key == "sds_iterations") cfg.sds_iterations = static_cast<int>(to_int(key, value));
    else if (key == "lr") cfg.lr = to_double(key, value);
    else if (key == "sds_lr") cfg.sds_lr = to_double(key, value);
    else if (key == "lambda_a") cfg.lambda_a = to_double(key, value);
    else if (key == "lambda_m") cfg.lambda_m = to_double(key, value);
    else if (key == "frames") cfg.frames = static_cast<int>(to_int(key, value));
    else if (key == "resolution") cfg.resolution = static_cast<int>(to_int(key, value));
    else if (key == "pool") cfg.pool = static_cast<int>(to_int(key, value));
    else if (key == "patch") cfg.patch = static_cast<int>(to_int(key, value));
    else if (key == "d_model") cfg.d_model = static_cast<int>(to_int(key, value));
    else if (key == "rank") cfg.rank = static_cast<int>(to_int(key, value));
    else if (key == "lora_alpha") cfg.lora_alpha = to_double(key, value);
    else if (key == "tau") cfg.tau = to_double(key, value);
    else if (key == "samples_per_curve") cfg.samples_per_curve = static_cast<int>(to_int(key, value));
    else if (key == "schedule_steps") cfg.schedule_steps = static_cast<int>(to_int(key, value));
    else if (key == "pretrain_steps") cfg.pretrain_steps = static_cast<int>(to_int(key, value));
    else if (key == "pretrain_lr") cfg.pretrain_lr = to_double(key, value);
    else if (key == "snapshot_every") cfg.snapshot_every = static_cast<int>(to_int(key, value));
    else if (key == "heldout_draws") cfg.heldout_draws = static_cast<int>(to_int(key, value));
    else if (key == "fps") cfg.fps = static_cast<int>(to_int(key, value));
    else if (key == "w_mode") cfg.w_mode = value;
    else if (key == "motion") cfg.motion = value;
    else if (key == "shape") cfg.shape = value;
    else if (key == "synth_size") cfg.synth_size = to_double(key, value);
    else if (key == "synth_amplitude") cfg.synth_amplitude = to_double(key, value);
    else if (key == "synth_jitter") cfg.synth_jitter = to_double(key, value);
    else if (key == "ablation") cfg.ablation = to_bool(key, value);
    else throw ConfigError("unknown config key: '" + key + "'");
    cfg.explicit_keys.insert(key);
}

void apply_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file: " + path);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        line_no++;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        size_t eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
        apply_config_override(cfg, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    }
}

RunConfig load_config_file(const std::string& path) {
    RunConfig cfg;
    apply_config_file(cfg, path);
    return cfg;
}

std::string compose_inference_prompt(const std::string& prompt_a, const std::string& prompt_m) {
    std::istringstream in(prompt_m);
    std::vector<std::string> tokens;
    std::string tok;
    while (in >> tok) tokens.push_back(tok);
    if (tokens.size() < 3) return prompt_a;
    std::string tail;
    for (size_t i = 2; i < tokens.size(); i++) {
        tail += " ";
        tail += tokens[i];
    }
    return prompt_a + tail;
}

DirLock::DirLock(const std::string& dir) {
    fs::create_directories(dir);
    path_ = (fs::path(dir) / ".skanim.lock").string();
    int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
        throw std::runtime_error("output directory is locked by another command (remove " + path_ +
                                 " if stale)");
    ::close(fd);
}

DirLock::~DirLock() { ::unlink(path_.c_str()); }

PretrainResult cmd_pretrain(const RunConfig& cfg) {
    DirLock lock(cfg.out);
    Rng rng(cfg.seed);
    const int latent = cfg.resolution / cfg.pool;
    if (cfg.resolution % cfg.pool != 0 || latent % cfg.patch != 0)
        throw ConfigError("resolution must be divisible by pool * patch");

    DenoiserWeights w = init_weights(rng, cfg.d_model, cfg.patch, cfg.frames, latent, latent);
    std::vector<PretrainSample> samples = build_pretrain_mixture(cfg, w, rng);
    NoiseSchedule sched = build_schedule(cfg.schedule_steps);

    Rng baseline_rng(cfg.seed + 1);
    DenoiserWeights untrained = init_weights(baseline_rng, cfg.d_model, cfg.patch, cfg.frames, latent, latent);
    // register the same vocabulary so contexts resolve
    untrained.prompts = w.prompts;
    int draws_per_clip = std::max(4, cfg.heldout_draws / static_cast<int>(samples.size()));
    double untrained_heldout = mixture_heldout_loss(samples, untrained, sched, draws_per_clip, 0x48454c44ULL);

    AdamOptimizer adam({cfg.pretrain_lr});
    std::uniform_int_distribution<size_t> pick(0, samples.size() - 1);
    GradientRequest request;
    request.base = true;

    std::vector<TraceRow> trace;
    double last_loss = 0.0;
    for (int step = 0; step < cfg.pretrain_steps; step++) {
        const PretrainSample& s = samples[pick(rng)];
        int t = sample_timestep(rng, sched);
        LatentVideo eps = sample_noise(rng, s.z0.frames, s.z0.height, s.z0.width);
        ConditioningContext ctx = make_context(w, s.prompt_id, t);
        GradientRequest req = request;
        req.prompt_ids = {s.prompt_id};
        LossAndGrads lg = loss_and_grads(s.z0, eps, t, ctx, sched, FrameFilter::all(), w, {}, req);
        adam.begin_step();
        adam_update_base(w, *lg.base, adam);
        if (auto it = lg.prompt_rows.find(s.prompt_id); it != lg.prompt_rows.end()) {
            Eigen::MatrixXd row = w.prompts.rows[s.prompt_id];
            adam.update(row, it->second, "prompt." + std::to_string(s.prompt_id));
            w.prompts.rows[s.prompt_id] = row.col(0);
        }
        last_loss = lg.loss;
        trace.push_back({step, lg.loss, 0.0, lg.loss});
    }

    double heldout = mixture_heldout_loss(samples, w, sched, draws_per_clip, 0x48454c44ULL);
    save_weights(w, out_path(cfg, "weights.skwt").string());
    write_trace_csv(trace, out_path(cfg, "trace_pretrain.csv").string());
    write_kv_file({{"pretrain_steps", std::to_string(cfg.pretrain_steps)},
                   {"heldout_loss", fmt_g(heldout)},
                   {"untrained_heldout_loss", fmt_g(untrained_heldout)}},
                  out_path(cfg, "pretrain.meta").string());
    return {last_loss, heldout, untrained_heldout};
}

void cmd_stage1(const RunConfig& cfg) {
    DirLock lock(cfg.out);
    fs::path weights_path = out_path(cfg, "weights.skwt");
    require_artifact(weights_path, "run pretrain first");
    DenoiserWeights w = load_weights(weights_path.string());

    std::string prompt = !cfg.prompt_a.empty() ? cfg.prompt_a : cfg.prompt;
    if (prompt.empty()) throw ConfigError("stage1 needs a subject prompt (prompt_a or --prompt)");

    SketchFrame sketch = load_sketch(cfg);
    AppearanceResult result = train_appearance(sketch, stage_config_from(cfg, prompt), w);

    save_adapters(result.adapters, out_path(cfg, "adapters_appearance.skad").string());
    write_trace_csv(result.trace, out_path(cfg, "trace_stage1.csv").string());
    write_kv_file({{"prompt_a", prompt},
                   {"resolution", std::to_string(cfg.resolution)},
                   {"heldout_loss", fmt_g(result.heldout_loss)},
                   {"untrained_heldout_loss", fmt_g(result.untrained_heldout_loss)}},
                  out_path(cfg, "stage1.meta").string());
}

void cmd_stage2(const RunConfig& cfg) {
    DirLock lock(cfg.out);
    fs::path weights_path = out_path(cfg, "weights.skwt");
    require_artifact(weights_path, "run pretrain first");
    DenoiserWeights w = load_weights(weights_path.string());

    std::string prompt = !cfg.prompt_m.empty() ? cfg.prompt_m : cfg.prompt;
    if (prompt.empty()) throw ConfigError("stage2 needs a motion prompt (prompt_m or --prompt)");
    if (cfg.video_dir.empty())
        throw ConfigError("stage2 needs a reference video directory (video_dir or --video-dir)");
    require_artifact(cfg.video_dir, "reference video frames");

    RasterVideo video = read_video_pgm(cfg.video_dir);
    MotionResult result = train_motion(video, stage_config_from(cfg, prompt), w);

    save_adapters(result.video_appearance, out_path(cfg, "adapters_video_appearance.skad").string());
    save_adapters(result.motion, out_path(cfg, "adapters_motion.skad").string());
    write_trace_csv(result.trace, out_path(cfg, "trace_stage2.csv").string());
    write_kv_file({{"prompt_m", prompt},
                   {"frames", std::to_string(video.frame_count())},
                   {"resolution", std::to_string(cfg.resolution)},
                   {"heldout_temporal_loss", fmt_g(result.heldout_temporal_loss)},
                   {"untrained_heldout_loss", fmt_g(result.untrained_heldout_loss)}},
                  out_path(cfg, "stage2.meta").string());
}

void cmd_stage3(const RunConfig& cfg) {
    DirLock lock(cfg.out);
    Stage3Setup s3 = prepare_stage3(cfg);
    if (cfg.snapshot_every > 0) s3.sds.snapshot_dir = out_path(cfg, "snapshots").string();

    DistillResult result = run_distill(s3, cfg.lambda_a, cfg.lambda_m);

    std::ofstream svg(out_path(cfg, "animation.svg"));
    svg << write_animated_svg(result.animation, cfg.fps);
    RasterVideo video = render_video(result.animation, cfg.resolution, cfg.resolution,
                                     s3.sds.softness);
    write_video_pgm(video, out_path(cfg, "frames").string(), "frame_");
    write_diagnostics_csv(result.diagnostics, out_path(cfg, "diagnostics.csv").string());
    write_track_csv(ink_centroid_track(video), out_path(cfg, "track_stage3.csv").string());
    write_kv_file({{"prompt", s3.inference_prompt}, {"frames", std::to_string(s3.frames)}},
                  out_path(cfg, "stage3.meta").string());
}

std::vector<EvalRow> cmd_eval(const RunConfig& cfg) {
    DirLock lock(cfg.out);
    fs::path frames_dir = out_path(cfg, "frames");
    require_artifact(frames_dir, "run stage3 first");
    if (cfg.track.empty()) throw ConfigError("eval needs a reference track CSV (track or --track)");
    require_artifact(cfg.track, "reference centroid track");

    RasterVideo full_video = read_video_pgm(frames_dir.string());
    std::vector<std::array<double, 2>> ref_track = read_track_csv(cfg.track);
    SketchFrame sketch = load_sketch(cfg);
    SoftnessConfig soft{cfg.tau, cfg.samples_per_curve};
    RasterFrame sketch_render = render(sketch, cfg.resolution, cfg.resolution, soft);

    auto evaluate = [&](const RasterVideo& video, const std::string& name) {
        EvalRow row;
        row.variant = name;
        row.appearance = appearance_alignment(video, sketch_render);
        row.motion = motion_alignment(video, ref_track);
        row.temporal = temporal_consistency(video);
        return row;
    };

    std::vector<EvalRow> rows;
    rows.push_back(evaluate(full_video, "full"));

    if (cfg.ablation) {
        Stage3Setup s3 = prepare_stage3(cfg);
        DistillResult wo_a = run_distill(s3, 0.0, cfg.lambda_m);
        DistillResult wo_m = run_distill(s3, cfg.lambda_a, 0.0);
        rows.push_back(evaluate(
            render_video(wo_a.animation, cfg.resolution, cfg.resolution, soft), "wo_a_loras"));
        rows.push_back(evaluate(
            render_video(wo_m.animation, cfg.resolution, cfg.resolution, soft), "wo_m_loras"));
    }

    write_eval_csv(rows, out_path(cfg, "eval_report.csv").string());
    std::ofstream txt(out_path(cfg, "eval_report.txt"));
    txt << "variant             appearance   motion   temporal\n";
    char buf[160];
    for (const EvalRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%-18s %10.4f %8.4f %10.4f\n", r.variant.c_str(),
                      r.appearance, r.motion, r.temporal);
        txt << buf;
    }
    write_track_csv(ink_centroid_track(full_video), out_path(cfg, "eval_track.csv").string());
    return rows;
}

void cmd_synth(const RunConfig& cfg) {
    DirLock lock(cfg.out);
    SyntheticParams params;
    params.size = cfg.synth_size;
    params.amplitude = cfg.synth_amplitude;
    params.jitter = cfg.synth_jitter;
    if (cfg.shape == "square") params.shape = SyntheticParams::kSquare;
    else if (cfg.shape == "disk") params.shape = SyntheticParams::kDisk;
    else throw ConfigError("config key 'shape': expected square|disk, got '" + cfg.shape + "'");

    Rng rng(cfg.seed);
    SyntheticVideo sv = make_synthetic_video(motion_kind_from_name(cfg.motion), cfg.frames,
                                             cfg.resolution, cfg.resolution, params, rng);
    write_video_pgm(sv.video, cfg.out, "frame_");
    write_track_csv(sv.track, out_path(cfg, "track.csv").string());
}

void cmd_render(const RunConfig& cfg) {
    DirLock lock(cfg.out);
    SketchFrame sketch = load_sketch(cfg);
    SoftnessConfig soft{cfg.tau, cfg.samples_per_curve};
    RasterFrame frame = render(sketch, cfg.resolution, cfg.resolution, soft);
    write_pgm(frame, out_path(cfg, "render.pgm").string());
}

void write_eval_csv(const std::vector<EvalRow>& rows, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "variant,appearance_alignment,motion_alignment,temporal_consistency\n";
    char buf[200];
    for (const EvalRow& r : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%.9g,%.9g,%.9g\n", r.variant.c_str(), r.appearance,
                      r.motion, r.temporal);
        out << buf;
    }
}

std::vector<EvalRow> read_eval_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifactError("missing eval report: " + path);
    std::string line;
    if (!std::getline(in, line) || line.rfind("variant,", 0) != 0)
        throw std::runtime_error("bad eval CSV header in " + path);
    std::vector<EvalRow> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream row(line);
        EvalRow r;
        std::string cell;
        std::getline(row, r.variant, ',');
        std::getline(row, cell, ',');
        r.appearance = std::stod(cell);
        std::getline(row, cell, ',');
        r.motion = std::stod(cell);
        std::getline(row, cell, ',');
        r.temporal = std::stod(cell);
        rows.push_back(r);
    }
    return rows;
}

}  // namespace skanim
