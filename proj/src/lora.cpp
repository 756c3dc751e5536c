// SPDX-License-Identifier: Apache-2.0

#include "skanim/lora.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace skanim {

namespace {

bool is_spatial_key(const std::string& key) { return key.rfind("spatial.", 0) == 0; }
bool is_temporal_key(const std::string& key) { return key.rfind("temporal.", 0) == 0; }

void write_f32_block(std::ostream& out, const Eigen::MatrixXd& m) {
    // Row-major little-endian f32.
    std::vector<float> buf(static_cast<size_t>(m.rows()) * m.cols());
    size_t i = 0;
    for (Eigen::Index r = 0; r < m.rows(); r++)
        for (Eigen::Index c = 0; c < m.cols(); c++) buf[i++] = static_cast<float>(m(r, c));
    out.write(reinterpret_cast<const char*>(buf.data()), buf.size() * sizeof(float));
}

Eigen::MatrixXd read_f32_block(std::istream& in, int rows, int cols, const std::string& what) {
    std::vector<float> buf(static_cast<size_t>(rows) * cols);
    in.read(reinterpret_cast<char*>(buf.data()), buf.size() * sizeof(float));
    if (in.gcount() != static_cast<std::streamsize>(buf.size() * sizeof(float)))
        throw std::runtime_error("adapter file: truncated payload in " + what);
    Eigen::MatrixXd m(rows, cols);
    size_t i = 0;
    for (int r = 0; r < rows; r++)
        for (int c = 0; c < cols; c++) m(r, c) = buf[i++];
    return m;
}

std::string read_line(std::istream& in, const std::string& what) {
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("adapter file: unexpected end before " + what);
    return line;
}

}  // namespace

const char* lora_role_name(LoraRole role) {
    switch (role) {
        case LoraRole::kSketchAppearance: return "appearance";
        case LoraRole::kVideoAppearance: return "video_appearance";
        case LoraRole::kMotion: return "motion";
    }
    throw std::logic_error("unknown adapter role");
}

LoraRole lora_role_from_name(const std::string& name) {
    if (name == "appearance") return LoraRole::kSketchAppearance;
    if (name == "video_appearance") return LoraRole::kVideoAppearance;
    if (name == "motion") return LoraRole::kMotion;
    throw std::runtime_error("unknown adapter role: " + name);
}

void AdapterSet::add(LoraRole role, LoraAdapter adapter) {
    bool spatial_role = role != LoraRole::kMotion;
    if (spatial_role && !is_spatial_key(adapter.target))
        throw std::invalid_argument("appearance adapter must target a spatial key, got " + adapter.target);
    if (!spatial_role && !is_temporal_key(adapter.target))
        throw std::invalid_argument("motion adapter must target a temporal key, got " + adapter.target);
    items.push_back({role, std::move(adapter)});
}

std::vector<const LoraAdapter*> AdapterSet::with_role(LoraRole role) const {
    std::vector<const LoraAdapter*> out;
    for (const TaggedAdapter& item : items)
        if (item.role == role) out.push_back(&item.adapter);
    return out;
}

LoraAdapter new_adapter(const std::string& target, int d, int k, int rank, double alpha, Rng& rng) {
    if (d < 1 || k < 1) throw std::invalid_argument("new_adapter: bad dimensions");
    if (rank < 1 || 4 * rank > std::min(d, k))
        throw std::invalid_argument("new_adapter: rank must satisfy 1 <= r <= min(d,k)/4");
    LoraAdapter ad;
    ad.target = target;
    ad.rank = rank;
    ad.alpha = alpha;
    ad.lora_b = Eigen::MatrixXd::Zero(d, rank);
    ad.lora_a.resize(rank, k);
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(k)));
    for (int r = 0; r < rank; r++)
        for (int c = 0; c < k; c++) ad.lora_a(r, c) = normal(rng);
    quantize_to_f32(ad.lora_a);
    return ad;
}

Eigen::MatrixXd merge(const Eigen::MatrixXd& w0, const std::vector<MergeContribution>& contributions) {
    Eigen::MatrixXd w = w0;
    for (const MergeContribution& c : contributions) {
        const LoraAdapter& ad = *c.adapter;
        if (ad.lora_b.rows() != w0.rows() || ad.lora_a.cols() != w0.cols())
            throw std::invalid_argument("merge: adapter " + ad.target + " shape mismatch");
        w.noalias() += (c.lambda * ad.alpha) * (ad.lora_b * ad.lora_a);
    }
    return w;
}

void save_adapters(const AdapterSet& set, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << "SKADSET1 " << set.items.size() << "\n";
    for (const TaggedAdapter& item : set.items) {
        const LoraAdapter& ad = item.adapter;
        out << "ROLE " << lora_role_name(item.role) << "\n";
        out << "SKAD1\n" << ad.target << "\n";
        out << ad.lora_b.rows() << " " << ad.lora_a.cols() << " " << ad.rank << " ";
        char alpha_buf[32];
        std::snprintf(alpha_buf, sizeof(alpha_buf), "%.9g", ad.alpha);
        out << alpha_buf << "\n";
        write_f32_block(out, ad.lora_b);
        write_f32_block(out, ad.lora_a);
        out << "\n";
    }
    out << "PROMPTS " << set.trained_prompts.size() << "\n";
    for (const auto& [id, vec] : set.trained_prompts) {
        out << "PROMPT " << vec.size() << " " << id << "\n";
        write_f32_block(out, vec);
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

AdapterSet load_adapters(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open: " + path);

    std::string header = read_line(in, "set header");
    std::istringstream hs(header);
    std::string magic;
    size_t count = 0;
    hs >> magic >> count;
    if (magic != "SKADSET1")
        throw std::runtime_error("adapter file: bad magic/version (expected SKADSET1): " + path);

    AdapterSet set;
    for (size_t i = 0; i < count; i++) {
        std::string role_line = read_line(in, "ROLE line");
        if (role_line.rfind("ROLE ", 0) != 0)
            throw std::runtime_error("adapter file: expected ROLE line, got '" + role_line + "'");
        LoraRole role = lora_role_from_name(role_line.substr(5));

        std::string ad_magic = read_line(in, "adapter magic");
        if (ad_magic != "SKAD1")
            throw std::runtime_error("adapter file: bad magic/version (expected SKAD1): " + path);

        LoraAdapter ad;
        ad.target = read_line(in, "target key");
        std::istringstream dims(read_line(in, "dims line"));
        int d = 0, k = 0;
        dims >> d >> k >> ad.rank >> ad.alpha;
        if (d < 1 || k < 1 || ad.rank < 1)
            throw std::runtime_error("adapter file: bad dims line");
        ad.lora_b = read_f32_block(in, d, ad.rank, "B of " + ad.target);
        ad.lora_a = read_f32_block(in, ad.rank, k, "A of " + ad.target);
        read_line(in, "payload terminator");
        set.add(role, std::move(ad));
    }

    std::string prompts_line = read_line(in, "PROMPTS line");
    std::istringstream ps(prompts_line);
    std::string tag;
    size_t n_prompts = 0;
    ps >> tag >> n_prompts;
    if (tag != "PROMPTS") throw std::runtime_error("adapter file: expected PROMPTS section");
    for (size_t i = 0; i < n_prompts; i++) {
        std::string line = read_line(in, "PROMPT line");
        std::istringstream row(line);
        std::string row_tag;
        int dim = 0;
        row >> row_tag >> dim;
        if (row_tag != "PROMPT" || dim < 1) throw std::runtime_error("adapter file: bad PROMPT line");
        std::string id;
        std::getline(row, id);
        if (!id.empty() && id.front() == ' ') id.erase(0, 1);
        Eigen::MatrixXd m = read_f32_block(in, dim, 1, "prompt " + id);
        set.trained_prompts[id] = m.col(0);
    }
    return set;
}

void quantize_to_f32(Eigen::MatrixXd& m) {
    for (Eigen::Index i = 0; i < m.size(); i++)
        m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
}

void quantize_to_f32(Eigen::VectorXd& v) {
    for (Eigen::Index i = 0; i < v.size(); i++)
        v.data()[i] = static_cast<double>(static_cast<float>(v.data()[i]));
}

}  // namespace skanim
