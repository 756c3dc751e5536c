// SPDX-License-Identifier: Apache-2.0

#include "skanim/denoiser.hpp"

#include "skanim/errors.hpp"

#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace skanim {

namespace {

std::atomic<long> g_backward_calls{0};

Eigen::MatrixXd gaussian_matrix(Rng& rng, int rows, int cols, double stddev) {
    std::normal_distribution<double> normal(0.0, stddev);
    Eigen::MatrixXd m(rows, cols);
    for (int r = 0; r < rows; r++)
        for (int c = 0; c < cols; c++) m(r, c) = normal(rng);
    return m;
}

Eigen::VectorXd time_features(int t, int d) {
    Eigen::VectorXd f = Eigen::VectorXd::Zero(d);
    int half = d / 2;
    for (int i = 0; i < half; i++) {
        double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        f(2 * i) = std::sin(t * freq);
        f(2 * i + 1) = std::cos(t * freq);
    }
    return f;
}

struct ProjAds {
    const std::vector<Attachment>* q;
    const std::vector<Attachment>* k;
    const std::vector<Attachment>* v;
    const std::vector<Attachment>* o;
};

struct AttachmentsByKey {
    std::map<std::string, std::vector<Attachment>> by_key;

    const std::vector<Attachment>& at(const std::string& key) const {
        static const std::vector<Attachment> kEmpty;
        auto it = by_key.find(key);
        return it == by_key.end() ? kEmpty : it->second;
    }
    ProjAds spatial() const { return {&at("spatial.q"), &at("spatial.k"), &at("spatial.v"), &at("spatial.o")}; }
    ProjAds temporal() const {
        return {&at("temporal.q"), &at("temporal.k"), &at("temporal.v"), &at("temporal.o")};
    }
};

AttachmentsByKey group_attachments(const std::vector<Attachment>& adapters, int d_model) {
    const auto& keys = attachment_keys();
    AttachmentsByKey out;
    for (const Attachment& a : adapters) {
        if (a.adapter == nullptr) throw std::invalid_argument("null adapter attachment");
        const std::string& target = a.adapter->target;
        if (std::find(keys.begin(), keys.end(), target) == keys.end())
            throw std::invalid_argument("unknown attachment key: " + target);
        if (a.adapter->lora_b.rows() != d_model || a.adapter->lora_a.cols() != d_model)
            throw std::invalid_argument("adapter " + target + " dimension mismatch");
        out.by_key[target].push_back(a);
    }
    return out;
}

struct AttnCache {
    Eigen::MatrixXd x, q, k, v, attn, pre_o;
    std::vector<Eigen::MatrixXd> ax_q, ax_k, ax_v, ax_o;
};

struct FfnCache {
    Eigen::MatrixXd x, h_pre, h_post;
};

struct ForwardCache {
    int f_count = 0, n = 0;
    Eigen::MatrixXd patches, x0, x2, x4;
    std::vector<AttnCache> sp, tp;
    FfnCache ffn_s, ffn_t;
    bool temporal_active = false;
    Eigen::VectorXd time_feat;
};

Eigen::MatrixXd apply_proj(const Eigen::MatrixXd& w0, const std::vector<Attachment>& ads,
                           const Eigen::MatrixXd& x, std::vector<Eigen::MatrixXd>* ax_cache) {
    Eigen::MatrixXd y = w0 * x;
    for (const Attachment& a : ads) {
        Eigen::MatrixXd ax = a.adapter->lora_a * x;
        y.noalias() += (a.scale * a.adapter->alpha) * (a.adapter->lora_b * ax);
        if (ax_cache) ax_cache->push_back(std::move(ax));
    }
    return y;
}

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& scores) {
    Eigen::MatrixXd out(scores.rows(), scores.cols());
    for (Eigen::Index i = 0; i < scores.rows(); i++) {
        double mx = scores.row(i).maxCoeff();
        Eigen::ArrayXd e = (scores.row(i).array() - mx).exp();
        out.row(i) = (e / e.sum()).matrix();
    }
    return out;
}

// y = x + Wo * (V * attn^T) with adapted q/k/v/o projections.
Eigen::MatrixXd attention_forward(const AttentionBlock& blk, const ProjAds& ads,
                                  const Eigen::MatrixXd& x, int d_model, AttnCache* c) {
    Eigen::MatrixXd q = apply_proj(blk.wq, *ads.q, x, c ? &c->ax_q : nullptr);
    Eigen::MatrixXd k = apply_proj(blk.wk, *ads.k, x, c ? &c->ax_k : nullptr);
    Eigen::MatrixXd v = apply_proj(blk.wv, *ads.v, x, c ? &c->ax_v : nullptr);
    Eigen::MatrixXd attn = softmax_rows(q.transpose() * k / std::sqrt(static_cast<double>(d_model)));
    Eigen::MatrixXd pre_o = v * attn.transpose();
    Eigen::MatrixXd out = x + apply_proj(blk.wo, *ads.o, pre_o, c ? &c->ax_o : nullptr);
    if (c) {
        c->x = x;
        c->q = std::move(q);
        c->k = std::move(k);
        c->v = std::move(v);
        c->attn = std::move(attn);
        c->pre_o = std::move(pre_o);
    }
    return out;
}

// GELU keeps the loss smooth, which the finite-difference harnesses rely on.
inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865476)); }

inline double gelu_grad(double x) {
    constexpr double kInvSqrt2Pi = 0.3989422804014327;
    double phi = 0.5 * (1.0 + std::erf(x * 0.7071067811865476));
    return phi + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
}

Eigen::MatrixXd ffn_forward(const AttentionBlock& blk, const Eigen::MatrixXd& x, FfnCache* c) {
    Eigen::MatrixXd h_pre = blk.ff1 * x;
    Eigen::MatrixXd h_post = h_pre.unaryExpr([](double v) { return gelu(v); });
    Eigen::MatrixXd out = x + blk.ff2 * h_post;
    if (c) {
        c->x = x;
        c->h_pre = std::move(h_pre);
        c->h_post = std::move(h_post);
    }
    return out;
}

struct GradSinks {
    BlockGradients* spatial = nullptr;
    BlockGradients* temporal = nullptr;
    std::map<const LoraAdapter*, AdapterGradient>* adapter_grads = nullptr;
    std::set<const LoraAdapter*> wanted;
};

Eigen::MatrixXd backward_proj(const Eigen::MatrixXd& w0, const std::vector<Attachment>& ads,
                              const Eigen::MatrixXd& x, const std::vector<Eigen::MatrixXd>& ax,
                              const Eigen::MatrixXd& dy, Eigen::MatrixXd* dw0, GradSinks& sinks) {
    Eigen::MatrixXd dx = w0.transpose() * dy;
    if (dw0) dw0->noalias() += dy * x.transpose();
    for (size_t j = 0; j < ads.size(); j++) {
        const LoraAdapter* ad = ads[j].adapter;
        double scale = ads[j].scale * ad->alpha;
        dx.noalias() += scale * (ad->lora_a.transpose() * (ad->lora_b.transpose() * dy));
        if (sinks.adapter_grads && sinks.wanted.count(ad)) {
            AdapterGradient& g = (*sinks.adapter_grads)[ad];
            g.b.noalias() += scale * (dy * ax[j].transpose());
            g.a.noalias() += scale * ((ad->lora_b.transpose() * dy) * x.transpose());
        }
    }
    return dx;
}

Eigen::MatrixXd attention_backward(const AttentionBlock& blk, const ProjAds& ads, const AttnCache& c,
                                   const Eigen::MatrixXd& d_out, int d_model, BlockGradients* bg,
                                   GradSinks& sinks) {
    // d_out is the gradient at the block output (residual included).
    Eigen::MatrixXd d_pre_o =
        backward_proj(blk.wo, *ads.o, c.pre_o, c.ax_o, d_out, bg ? &bg->wo : nullptr, sinks);
    Eigen::MatrixXd dv = d_pre_o * c.attn;
    Eigen::MatrixXd d_attn = d_pre_o.transpose() * c.v;
    Eigen::MatrixXd ds(d_attn.rows(), d_attn.cols());
    for (Eigen::Index i = 0; i < d_attn.rows(); i++) {
        double dot = d_attn.row(i).dot(c.attn.row(i));
        ds.row(i) = (d_attn.row(i).array() - dot) * c.attn.row(i).array();
    }
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_model));
    Eigen::MatrixXd dq = c.k * ds.transpose() * inv_sqrt;
    Eigen::MatrixXd dk = c.q * ds * inv_sqrt;

    Eigen::MatrixXd dx = d_out;  // residual path
    dx += backward_proj(blk.wq, *ads.q, c.x, c.ax_q, dq, bg ? &bg->wq : nullptr, sinks);
    dx += backward_proj(blk.wk, *ads.k, c.x, c.ax_k, dk, bg ? &bg->wk : nullptr, sinks);
    dx += backward_proj(blk.wv, *ads.v, c.x, c.ax_v, dv, bg ? &bg->wv : nullptr, sinks);
    return dx;
}

Eigen::MatrixXd ffn_backward(const AttentionBlock& blk, const FfnCache& c, const Eigen::MatrixXd& d_out,
                             BlockGradients* bg) {
    Eigen::MatrixXd dh_post = blk.ff2.transpose() * d_out;
    Eigen::MatrixXd dh_pre =
        dh_post.cwiseProduct(c.h_pre.unaryExpr([](double v) { return gelu_grad(v); }));
    if (bg) {
        bg->ff2.noalias() += d_out * c.h_post.transpose();
        bg->ff1.noalias() += dh_pre * c.x.transpose();
    }
    return d_out + blk.ff1.transpose() * dh_pre;
}

void check_latent_shape(const LatentVideo& z, const DenoiserWeights& w, bool single_frame) {
    if (z.height != w.tokens_h * w.patch || z.width != w.tokens_w * w.patch)
        throw std::invalid_argument("latent shape does not match denoiser token grid");
    if (single_frame && z.frames != 1)
        throw std::invalid_argument("single-frame path expects exactly one frame");
    if (z.frames < 1 || z.frames > w.max_frames)
        throw std::invalid_argument("frame count outside the denoiser's frame-position table");
}

Eigen::MatrixXd patchify(const LatentVideo& z, const DenoiserWeights& w) {
    const int p = w.patch, n = w.tokens_per_frame();
    Eigen::MatrixXd patches(p * p, static_cast<Eigen::Index>(z.frames) * n);
    for (int f = 0; f < z.frames; f++)
        for (int ty = 0; ty < w.tokens_h; ty++)
            for (int tx = 0; tx < w.tokens_w; tx++) {
                Eigen::Index col = static_cast<Eigen::Index>(f) * n + ty * w.tokens_w + tx;
                for (int py = 0; py < p; py++)
                    for (int px = 0; px < p; px++)
                        patches(py * p + px, col) = z.at(f, ty * p + py, tx * p + px);
            }
    return patches;
}

LatentVideo unpatchify(const Eigen::MatrixXd& tokens, int f_count, const DenoiserWeights& w) {
    const int p = w.patch, n = w.tokens_per_frame();
    LatentVideo z(f_count, w.tokens_h * p, w.tokens_w * p);
    for (int f = 0; f < f_count; f++)
        for (int ty = 0; ty < w.tokens_h; ty++)
            for (int tx = 0; tx < w.tokens_w; tx++) {
                Eigen::Index col = static_cast<Eigen::Index>(f) * n + ty * w.tokens_w + tx;
                for (int py = 0; py < p; py++)
                    for (int px = 0; px < p; px++)
                        z.at(f, ty * p + py, tx * p + px) = tokens(py * p + px, col);
            }
    return z;
}

LatentVideo forward_impl(const LatentVideo& z_t, const ConditioningContext& ctx,
                         const DenoiserWeights& w, const AttachmentsByKey& byKey, bool single_frame,
                         ForwardCache* c) {
    check_latent_shape(z_t, w, single_frame);
    if (ctx.prompt_embedding.size() != w.d_model)
        throw std::invalid_argument("conditioning embedding dimension mismatch");

    const int f_count = z_t.frames;
    const int n = w.tokens_per_frame();
    Eigen::MatrixXd patches = patchify(z_t, w);

    Eigen::VectorXd time_feat = time_features(ctx.t, w.d_model);
    Eigen::VectorXd cond = w.time_proj * time_feat + ctx.prompt_embedding;

    Eigen::MatrixXd x0 = w.embed * patches;
    for (int f = 0; f < f_count; f++) {
        const Eigen::VectorXd pos_f = w.pos_frame.col(single_frame ? 0 : f);
        x0.middleCols(static_cast<Eigen::Index>(f) * n, n) += w.pos_spatial;
        x0.middleCols(static_cast<Eigen::Index>(f) * n, n).colwise() += pos_f + cond;
    }

    // Spatial attention within each frame.
    Eigen::MatrixXd x1(x0.rows(), x0.cols());
    std::vector<AttnCache> sp(c ? f_count : 0);
    ProjAds s_ads = byKey.spatial();
    for (int f = 0; f < f_count; f++) {
        Eigen::MatrixXd block = x0.middleCols(static_cast<Eigen::Index>(f) * n, n);
        x1.middleCols(static_cast<Eigen::Index>(f) * n, n) =
            attention_forward(w.spatial, s_ads, block, w.d_model, c ? &sp[f] : nullptr);
    }
    Eigen::MatrixXd x2 = ffn_forward(w.spatial, x1, c ? &c->ffn_s : nullptr);

    // Temporal attention across frames at each spatial token index;
    // single-frame clips bypass the whole temporal block.
    bool temporal_active = !single_frame && f_count >= 2;
    Eigen::MatrixXd x4;
    std::vector<AttnCache> tp(c && temporal_active ? n : 0);
    if (temporal_active) {
        Eigen::MatrixXd x3(x2.rows(), x2.cols());
        ProjAds t_ads = byKey.temporal();
        Eigen::MatrixXd seq(w.d_model, f_count);
        for (int i = 0; i < n; i++) {
            for (int f = 0; f < f_count; f++) seq.col(f) = x2.col(static_cast<Eigen::Index>(f) * n + i);
            Eigen::MatrixXd out =
                attention_forward(w.temporal, t_ads, seq, w.d_model, c ? &tp[i] : nullptr);
            for (int f = 0; f < f_count; f++) x3.col(static_cast<Eigen::Index>(f) * n + i) = out.col(f);
        }
        x4 = ffn_forward(w.temporal, x3, c ? &c->ffn_t : nullptr);
    } else {
        x4 = x2;
    }

    Eigen::MatrixXd tokens_out = w.unembed * x4;
    if (c) {
        c->f_count = f_count;
        c->n = n;
        c->patches = std::move(patches);
        c->x0 = std::move(x0);
        c->sp = std::move(sp);
        c->x2 = std::move(x2);
        c->temporal_active = temporal_active;
        c->tp = std::move(tp);
        c->x4 = std::move(x4);
        c->time_feat = std::move(time_feat);
    }
    return unpatchify(tokens_out, f_count, w);
}

BlockGradients zero_block_grads(const AttentionBlock& blk) {
    BlockGradients g;
    g.wq = Eigen::MatrixXd::Zero(blk.wq.rows(), blk.wq.cols());
    g.wk = Eigen::MatrixXd::Zero(blk.wk.rows(), blk.wk.cols());
    g.wv = Eigen::MatrixXd::Zero(blk.wv.rows(), blk.wv.cols());
    g.wo = Eigen::MatrixXd::Zero(blk.wo.rows(), blk.wo.cols());
    g.ff1 = Eigen::MatrixXd::Zero(blk.ff1.rows(), blk.ff1.cols());
    g.ff2 = Eigen::MatrixXd::Zero(blk.ff2.rows(), blk.ff2.cols());
    return g;
}

void write_tensor(std::ostream& out, const std::string& name, const Eigen::MatrixXd& m) {
    out << "TENSOR " << name << " " << m.rows() << " " << m.cols() << "\n";
    std::vector<double> buf(static_cast<size_t>(m.rows()) * m.cols());
    size_t i = 0;
    for (Eigen::Index r = 0; r < m.rows(); r++)
        for (Eigen::Index cc = 0; cc < m.cols(); cc++) buf[i++] = m(r, cc);
    out.write(reinterpret_cast<const char*>(buf.data()), buf.size() * sizeof(double));
    out << "\n";
}

Eigen::MatrixXd read_tensor(std::istream& in, const std::string& expected_name) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("weights file: missing tensor " + expected_name);
    std::istringstream hs(line);
    std::string tag, name;
    Eigen::Index rows = 0, cols = 0;
    hs >> tag >> name >> rows >> cols;
    if (tag != "TENSOR" || name != expected_name)
        throw std::runtime_error("weights file: expected tensor " + expected_name + ", got '" + line + "'");
    std::vector<double> buf(static_cast<size_t>(rows) * cols);
    in.read(reinterpret_cast<char*>(buf.data()), buf.size() * sizeof(double));
    if (in.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(double)))
        throw std::runtime_error("weights file: truncated tensor " + expected_name);
    in.get();  // trailing newline
    Eigen::MatrixXd m(rows, cols);
    size_t i = 0;
    for (Eigen::Index r = 0; r < rows; r++)
        for (Eigen::Index cc = 0; cc < cols; cc++) m(r, cc) = buf[i++];
    return m;
}

}  // namespace

int PromptVocab::find(const std::string& name) const {
    for (size_t i = 0; i < names.size(); i++)
        if (names[i] == name) return static_cast<int>(i);
    return -1;
}

int PromptVocab::id(const std::string& name) const {
    int i = find(name);
    if (i < 0) throw std::invalid_argument("unknown prompt: \"" + name + "\"");
    return i;
}

int PromptVocab::register_prompt(const std::string& name, int dim, Rng& rng) {
    int existing = find(name);
    if (existing >= 0) return existing;
    std::normal_distribution<double> normal(0.0, 0.1);
    Eigen::VectorXd row(dim);
    for (int i = 0; i < dim; i++) row(i) = normal(rng);
    quantize_to_f32(row);
    names.push_back(name);
    rows.push_back(std::move(row));
    return static_cast<int>(names.size()) - 1;
}

int PromptVocab::register_composite(const std::string& name, int id_a, int id_b) {
    int existing = find(name);
    if (existing >= 0) return existing;
    if (id_a < 0 || id_b < 0 || id_a >= static_cast<int>(rows.size()) ||
        id_b >= static_cast<int>(rows.size()))
        throw std::invalid_argument("register_composite: parent prompt id out of range");
    Eigen::VectorXd row = 0.5 * (rows[id_a] + rows[id_b]);
    quantize_to_f32(row);
    names.push_back(name);
    rows.push_back(std::move(row));
    return static_cast<int>(names.size()) - 1;
}

const std::vector<std::string>& attachment_keys() {
    static const std::vector<std::string> kKeys = {"spatial.q",  "spatial.k",  "spatial.v",
                                                   "spatial.o",  "temporal.q", "temporal.k",
                                                   "temporal.v", "temporal.o"};
    return kKeys;
}

Eigen::MatrixXd& weight_for_key(DenoiserWeights& w, const std::string& key) {
    return const_cast<Eigen::MatrixXd&>(weight_for_key(static_cast<const DenoiserWeights&>(w), key));
}

const Eigen::MatrixXd& weight_for_key(const DenoiserWeights& w, const std::string& key) {
    if (key == "spatial.q") return w.spatial.wq;
    if (key == "spatial.k") return w.spatial.wk;
    if (key == "spatial.v") return w.spatial.wv;
    if (key == "spatial.o") return w.spatial.wo;
    if (key == "temporal.q") return w.temporal.wq;
    if (key == "temporal.k") return w.temporal.wk;
    if (key == "temporal.v") return w.temporal.wv;
    if (key == "temporal.o") return w.temporal.wo;
    throw std::invalid_argument("unknown attachment key: " + key);
}

std::vector<Attachment> attach(const std::vector<const LoraAdapter*>& adapters, double scale) {
    std::vector<Attachment> out;
    out.reserve(adapters.size());
    for (const LoraAdapter* a : adapters) out.push_back({a, scale});
    return out;
}

ConditioningContext make_context(const DenoiserWeights& w, int prompt_id, int t) {
    if (prompt_id < 0 || prompt_id >= static_cast<int>(w.prompts.rows.size()))
        throw std::invalid_argument("prompt id out of range");
    return {w.prompts.rows[prompt_id], t, prompt_id};
}

ConditioningContext make_merged_context(const DenoiserWeights& w, int id_a, int id_b, int t) {
    if (id_a < 0 || id_b < 0 || id_a >= static_cast<int>(w.prompts.rows.size()) ||
        id_b >= static_cast<int>(w.prompts.rows.size()))
        throw std::invalid_argument("prompt id out of range");
    return {0.5 * (w.prompts.rows[id_a] + w.prompts.rows[id_b]), t, -1};
}

DenoiserWeights init_weights(Rng& rng, int d_model, int patch, int max_frames, int latent_h,
                             int latent_w) {
    if (d_model < 16) throw std::invalid_argument("init_weights: d_model must be >= 16");
    if (patch < 1 || latent_h % patch != 0 || latent_w % patch != 0)
        throw std::invalid_argument("init_weights: patch must divide the latent shape");
    if (max_frames < 1) throw std::invalid_argument("init_weights: max_frames must be >= 1");

    DenoiserWeights w;
    w.d_model = d_model;
    w.patch = patch;
    w.tokens_h = latent_h / patch;
    w.tokens_w = latent_w / patch;
    w.max_frames = max_frames;

    const int p2 = patch * patch;
    const int dff = 4 * d_model;
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d_model));

    w.embed = gaussian_matrix(rng, d_model, p2, 1.0 / std::sqrt(static_cast<double>(p2)));
    w.unembed = Eigen::MatrixXd::Zero(p2, d_model);
    w.pos_spatial = gaussian_matrix(rng, d_model, w.tokens_per_frame(), 0.1);
    w.pos_frame = gaussian_matrix(rng, d_model, max_frames, 0.1);
    w.time_proj = gaussian_matrix(rng, d_model, d_model, inv_sqrt_d);

    auto init_block = [&](AttentionBlock& blk) {
        blk.wq = gaussian_matrix(rng, d_model, d_model, inv_sqrt_d);
        blk.wk = gaussian_matrix(rng, d_model, d_model, inv_sqrt_d);
        blk.wv = gaussian_matrix(rng, d_model, d_model, inv_sqrt_d);
        blk.wo = gaussian_matrix(rng, d_model, d_model, inv_sqrt_d);
        blk.ff1 = gaussian_matrix(rng, dff, d_model, inv_sqrt_d);
        blk.ff2 = gaussian_matrix(rng, d_model, dff, 1.0 / std::sqrt(static_cast<double>(dff)));
    };
    init_block(w.spatial);
    init_block(w.temporal);
    return w;
}

LatentVideo predict_noise(const LatentVideo& z_t, const ConditioningContext& ctx,
                          const DenoiserWeights& w, const std::vector<Attachment>& adapters) {
    AttachmentsByKey grouped = group_attachments(adapters, w.d_model);
    return forward_impl(z_t, ctx, w, grouped, z_t.frames == 1, nullptr);
}

LossAndGrads loss_and_grads(const LatentVideo& z0_full, const LatentVideo& eps_full, int t,
                            const ConditioningContext& ctx, const NoiseSchedule& sched,
                            FrameFilter filter, const DenoiserWeights& w,
                            const std::vector<Attachment>& adapters, const GradientRequest& request) {
    if (!request.base && request.adapters.empty() && request.prompt_ids.empty())
        throw std::invalid_argument("loss_and_grads: empty trainable set");
    for (const LoraAdapter* ad : request.adapters) {
        bool attached = false;
        for (const Attachment& a : adapters) attached |= a.adapter == ad;
        if (!attached) throw std::invalid_argument("requested adapter is not attached: " + ad->target);
    }
    g_backward_calls.fetch_add(1, std::memory_order_relaxed);

    bool single = filter.kind == FrameFilter::kSingleFrame;
    if (single && (filter.index < 0 || filter.index >= z0_full.frames))
        throw std::invalid_argument("frame filter index out of range");

    LatentVideo z0 = single ? z0_full.frame_slice(filter.index) : z0_full;
    LatentVideo eps = single ? eps_full.frame_slice(filter.index) : eps_full;
    LatentVideo z_t = add_noise(z0, t, eps, sched);

    AttachmentsByKey grouped = group_attachments(adapters, w.d_model);
    ForwardCache cache;
    LatentVideo eps_hat = forward_impl(z_t, ctx, w, grouped, single, &cache);

    LossAndGrads result;
    const size_t count = eps.size();
    double loss = 0.0;
    LatentVideo residual(eps.frames, eps.height, eps.width);
    for (size_t i = 0; i < count; i++) {
        double r = eps_hat.values[i] - eps.values[i];
        loss += r * r;
        residual.values[i] = 2.0 * r / static_cast<double>(count);
    }
    result.loss = loss / static_cast<double>(count);

    // ---- reverse pass ----
    GradSinks sinks;
    if (request.base) {
        result.base.emplace();
        BaseGradients& bg = *result.base;
        bg.embed = Eigen::MatrixXd::Zero(w.embed.rows(), w.embed.cols());
        bg.unembed = Eigen::MatrixXd::Zero(w.unembed.rows(), w.unembed.cols());
        bg.pos_spatial = Eigen::MatrixXd::Zero(w.pos_spatial.rows(), w.pos_spatial.cols());
        bg.pos_frame = Eigen::MatrixXd::Zero(w.pos_frame.rows(), w.pos_frame.cols());
        bg.time_proj = Eigen::MatrixXd::Zero(w.time_proj.rows(), w.time_proj.cols());
        bg.spatial = zero_block_grads(w.spatial);
        bg.temporal = zero_block_grads(w.temporal);
        sinks.spatial = &bg.spatial;
        sinks.temporal = &bg.temporal;
    }
    if (!request.adapters.empty()) {
        sinks.adapter_grads = &result.adapters;
        for (const LoraAdapter* ad : request.adapters) {
            sinks.wanted.insert(ad);
            AdapterGradient& g = result.adapters[ad];
            g.b = Eigen::MatrixXd::Zero(ad->lora_b.rows(), ad->lora_b.cols());
            g.a = Eigen::MatrixXd::Zero(ad->lora_a.rows(), ad->lora_a.cols());
        }
    }

    const int f_count = cache.f_count, n = cache.n;
    Eigen::MatrixXd d_tokens = patchify(residual, w);

    if (request.base) result.base->unembed.noalias() += d_tokens * cache.x4.transpose();
    Eigen::MatrixXd dx4 = w.unembed.transpose() * d_tokens;

    Eigen::MatrixXd dx2;
    if (cache.temporal_active) {
        Eigen::MatrixXd dx3 =
            ffn_backward(w.temporal, cache.ffn_t, dx4, request.base ? &result.base->temporal : nullptr);
        dx2.resize(dx3.rows(), dx3.cols());
        ProjAds t_ads = grouped.temporal();
        Eigen::MatrixXd d_seq(w.d_model, f_count);
        for (int i = 0; i < n; i++) {
            for (int f = 0; f < f_count; f++) d_seq.col(f) = dx3.col(static_cast<Eigen::Index>(f) * n + i);
            // attention_backward includes the residual path, so the result is
            // the complete gradient at the gathered x2 columns.
            Eigen::MatrixXd d_in =
                attention_backward(w.temporal, t_ads, cache.tp[i], d_seq, w.d_model,
                                   request.base ? &result.base->temporal : nullptr, sinks);
            for (int f = 0; f < f_count; f++)
                dx2.col(static_cast<Eigen::Index>(f) * n + i) = d_in.col(f);
        }
    } else {
        dx2 = dx4;
    }

    Eigen::MatrixXd dx1 =
        ffn_backward(w.spatial, cache.ffn_s, dx2, request.base ? &result.base->spatial : nullptr);

    Eigen::MatrixXd dx0(dx1.rows(), dx1.cols());
    ProjAds s_ads = grouped.spatial();
    for (int f = 0; f < f_count; f++) {
        Eigen::MatrixXd d_block = dx1.middleCols(static_cast<Eigen::Index>(f) * n, n);
        dx0.middleCols(static_cast<Eigen::Index>(f) * n, n) =
            attention_backward(w.spatial, s_ads, cache.sp[f], d_block, w.d_model,
                               request.base ? &result.base->spatial : nullptr, sinks);
    }

    // Conditioning and embedding gradients.
    Eigen::VectorXd col_sum = dx0.rowwise().sum();
    if (request.base) {
        BaseGradients& bg = *result.base;
        bg.embed.noalias() += dx0 * cache.patches.transpose();
        for (int f = 0; f < f_count; f++) {
            bg.pos_spatial += dx0.middleCols(static_cast<Eigen::Index>(f) * n, n);
            bg.pos_frame.col(single ? 0 : f) +=
                dx0.middleCols(static_cast<Eigen::Index>(f) * n, n).rowwise().sum();
        }
        bg.time_proj.noalias() += col_sum * cache.time_feat.transpose();
    }
    for (int pid : request.prompt_ids) {
        if (pid == ctx.prompt_id) result.prompt_rows[pid] = col_sum;
    }

    if (!std::isfinite(result.loss)) throw NumericError("loss_and_grads: non-finite loss");
    return result;
}

long backward_call_count() { return g_backward_calls.load(std::memory_order_relaxed); }
void reset_backward_call_count() { g_backward_calls.store(0, std::memory_order_relaxed); }

void save_weights(const DenoiserWeights& w, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "SKWT1\n";
    out << w.d_model << " " << w.patch << " " << w.tokens_h << " " << w.tokens_w << " " << w.max_frames
        << "\n";
    write_tensor(out, "embed", w.embed);
    write_tensor(out, "unembed", w.unembed);
    write_tensor(out, "pos_spatial", w.pos_spatial);
    write_tensor(out, "pos_frame", w.pos_frame);
    write_tensor(out, "time_proj", w.time_proj);
    auto write_block = [&](const std::string& prefix, const AttentionBlock& blk) {
        write_tensor(out, prefix + ".wq", blk.wq);
        write_tensor(out, prefix + ".wk", blk.wk);
        write_tensor(out, prefix + ".wv", blk.wv);
        write_tensor(out, prefix + ".wo", blk.wo);
        write_tensor(out, prefix + ".ff1", blk.ff1);
        write_tensor(out, prefix + ".ff2", blk.ff2);
    };
    write_block("spatial", w.spatial);
    write_block("temporal", w.temporal);
    out << "PROMPTS " << w.prompts.names.size() << "\n";
    for (size_t i = 0; i < w.prompts.names.size(); i++) {
        out << "PROMPT " << w.prompts.rows[i].size() << " " << w.prompts.names[i] << "\n";
        const Eigen::VectorXd& row = w.prompts.rows[i];
        out.write(reinterpret_cast<const char*>(row.data()),
                  static_cast<std::streamsize>(row.size() * sizeof(double)));
        out << "\n";
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

DenoiserWeights load_weights(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);
    std::string magic;
    std::getline(in, magic);
    if (magic != "SKWT1") throw std::runtime_error("weights file: bad magic/version: " + path);
    DenoiserWeights w;
    std::string dims;
    std::getline(in, dims);
    std::istringstream ds(dims);
    ds >> w.d_model >> w.patch >> w.tokens_h >> w.tokens_w >> w.max_frames;
    if (w.d_model < 1 || w.patch < 1) throw std::runtime_error("weights file: bad dims line");
    w.embed = read_tensor(in, "embed");
    w.unembed = read_tensor(in, "unembed");
    w.pos_spatial = read_tensor(in, "pos_spatial");
    w.pos_frame = read_tensor(in, "pos_frame");
    w.time_proj = read_tensor(in, "time_proj");
    auto read_block = [&](const std::string& prefix, AttentionBlock& blk) {
        blk.wq = read_tensor(in, prefix + ".wq");
        blk.wk = read_tensor(in, prefix + ".wk");
        blk.wv = read_tensor(in, prefix + ".wv");
        blk.wo = read_tensor(in, prefix + ".wo");
        blk.ff1 = read_tensor(in, prefix + ".ff1");
        blk.ff2 = read_tensor(in, prefix + ".ff2");
    };
    read_block("spatial", w.spatial);
    read_block("temporal", w.temporal);
    std::string prompts_line;
    std::getline(in, prompts_line);
    std::istringstream ps(prompts_line);
    std::string tag;
    size_t n_prompts = 0;
    ps >> tag >> n_prompts;
    if (tag != "PROMPTS") throw std::runtime_error("weights file: expected PROMPTS section");
    for (size_t i = 0; i < n_prompts; i++) {
        std::string line;
        if (!std::getline(in, line)) throw std::runtime_error("weights file: truncated PROMPT header");
        std::istringstream row_hs(line);
        std::string row_tag, name;
        int dim = 0;
        row_hs >> row_tag >> dim;
        std::getline(row_hs, name);
        if (!name.empty() && name.front() == ' ') name.erase(0, 1);
        if (row_tag != "PROMPT" || dim < 1) throw std::runtime_error("weights file: bad PROMPT line");
        Eigen::VectorXd row(dim);
        in.read(reinterpret_cast<char*>(row.data()), static_cast<std::streamsize>(dim * sizeof(double)));
        if (in.gcount() != static_cast<std::streamsize>(dim * sizeof(double)))
            throw std::runtime_error("weights file: truncated prompt row");
        in.get();
        w.prompts.names.push_back(name);
        w.prompts.rows.push_back(std::move(row));
    }
    return w;
}

}  // namespace skanim
