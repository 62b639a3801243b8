#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "kfcl/errors.hpp"
#include "kfcl/model.hpp"
#include "kfcl/snapshot.hpp"
#include "kfcl/tensor.hpp"

namespace kfcl {

// Binary tensor file: 4-byte magic "KFT1", rank as little-endian u32, then
// the extents as little-endian u32, followed by the row-major payload as
// little-endian IEEE-754 doubles.

namespace detail {

inline void put_u32_le(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32_le(std::ifstream& in, const std::string& path) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw ParseError(path + ": truncated header");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f64_le(std::ofstream& out, double v) {
    const std::uint64_t u = std::bit_cast<std::uint64_t>(v);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64_le(std::ifstream& in, const std::string& path) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) throw ParseError(path + ": truncated payload");
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return std::bit_cast<double>(u);
}

} // namespace detail

inline void write_tensor_file(const Tensor& t, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write("KFT1", 4);
    detail::put_u32_le(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.dims()) detail::put_u32_le(out, static_cast<std::uint32_t>(d));
    for (double v : t.values()) detail::put_f64_le(out, v);
    if (!out) throw IoError("write failed for '" + path + "'");
}

inline Tensor read_tensor_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    char magic[4];
    if (!in.read(magic, 4) || std::string(magic, 4) != "KFT1")
        throw ParseError(path + ": bad magic");
    const std::uint32_t rank = detail::get_u32_le(in, path);
    if (rank > 8) throw ParseError(path + ": implausible rank");
    std::vector<std::size_t> dims(rank);
    std::size_t n = rank == 0 ? 0 : 1;
    for (auto& d : dims) {
        d = detail::get_u32_le(in, path);
        if (d == 0) throw ParseError(path + ": zero extent");
        n *= d;
    }
    std::vector<double> data(n);
    for (auto& v : data) v = detail::get_f64_le(in, path);
    char extra;
    if (in.read(&extra, 1)) throw ParseError(path + ": trailing bytes");
    return Tensor(std::move(dims), std::move(data));
}

// ---------------------------------------------------------------------------
// Manifest: UTF-8 "key=value" lines.

using Manifest = std::map<std::string, std::string>;

inline void write_manifest(const Manifest& kv, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    for (const auto& [k, v] : kv) out << k << "=" << v << "\n";
    if (!out) throw IoError("write failed for '" + path + "'");
}

inline Manifest read_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "'");
    Manifest kv;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError(path + ":" + std::to_string(line_no) + ": expected key=value");
        kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    return kv;
}

namespace detail {

inline std::string manifest_get(const Manifest& kv, const std::string& key,
                                const std::string& path) {
    const auto it = kv.find(key);
    if (it == kv.end()) throw ParseError(path + ": missing manifest key '" + key + "'");
    return it->second;
}

inline std::string layer_census_entry(const LayerSpec& s) {
    std::ostringstream os;
    os << to_string(s.kind) << ',' << s.input_dim << ',' << s.output_dim << ',' << s.kernel_width
       << ',' << (s.has_bias ? 1 : 0) << ',' << to_string(s.activation_kind) << ','
       << s.shared_group;
    return os.str();
}

inline LayerSpec parse_census_entry(const std::string& text, const std::string& path) {
    std::vector<std::string> f;
    std::size_t start = 0;
    while (true) {
        const auto pos = text.find(',', start);
        if (pos == std::string::npos) {
            f.push_back(text.substr(start));
            break;
        }
        f.push_back(text.substr(start, pos - start));
        start = pos + 1;
    }
    if (f.size() != 7) throw ParseError(path + ": malformed layer census entry '" + text + "'");
    LayerSpec s;
    if (f[0] == "linear") s.kind = LayerKind::Linear;
    else if (f[0] == "conv1d") s.kind = LayerKind::Conv1d;
    else if (f[0] == "embedding") s.kind = LayerKind::Embedding;
    else if (f[0] == "layernorm") s.kind = LayerKind::LayerNorm;
    else if (f[0] == "activation") s.kind = LayerKind::Activation;
    else throw ParseError(path + ": unknown layer kind '" + f[0] + "'");
    s.input_dim = std::stoul(f[1]);
    s.output_dim = std::stoul(f[2]);
    s.kernel_width = std::stoul(f[3]);
    s.has_bias = f[4] == "1";
    if (f[5] == "relu") s.activation_kind = ActivationKind::ReLU;
    else if (f[5] == "tanh") s.activation_kind = ActivationKind::Tanh;
    else s.activation_kind = ActivationKind::Identity;
    s.shared_group = std::stoi(f[6]);
    return s;
}

inline void write_model_census(Manifest& kv, const Model& m) {
    kv["layerCount"] = std::to_string(m.layers.size());
    for (std::size_t l = 0; l < m.layers.size(); ++l)
        kv["layer." + std::to_string(l)] = layer_census_entry(m.layers[l]);
    std::ostringstream blocks;
    for (std::size_t b = 0; b < m.context_blocks.size(); ++b) {
        if (b) blocks << ';';
        blocks << (m.context_blocks[b].kind == Block::Kind::Plain ? "plain:" : "attn:")
               << m.context_blocks[b].first_layer;
    }
    kv["contextBlocks"] = blocks.str();
    kv["scoringStart"] = std::to_string(m.scoring_start);
    kv["candidateCount"] = std::to_string(m.candidate_count);
    kv["candidateDim"] = std::to_string(m.candidate_dim);
}

inline Model read_model_census(const Manifest& kv, const std::string& path) {
    Model m;
    const std::size_t n = std::stoul(manifest_get(kv, "layerCount", path));
    for (std::size_t l = 0; l < n; ++l)
        m.layers.push_back(
            parse_census_entry(manifest_get(kv, "layer." + std::to_string(l), path), path));
    const std::string blocks = manifest_get(kv, "contextBlocks", path);
    std::size_t start = 0;
    while (start < blocks.size()) {
        auto end = blocks.find(';', start);
        if (end == std::string::npos) end = blocks.size();
        const std::string item = blocks.substr(start, end - start);
        start = end + 1;
        if (item.empty()) continue;
        Block b;
        if (item.rfind("plain:", 0) == 0) {
            b.kind = Block::Kind::Plain;
            b.first_layer = std::stoul(item.substr(6));
        } else if (item.rfind("attn:", 0) == 0) {
            b.kind = Block::Kind::SelfAttention;
            b.first_layer = std::stoul(item.substr(5));
        } else {
            throw ParseError(path + ": bad context block '" + item + "'");
        }
        m.context_blocks.push_back(b);
    }
    m.scoring_start = std::stoul(manifest_get(kv, "scoringStart", path));
    m.candidate_count = std::stoul(manifest_get(kv, "candidateCount", path));
    m.candidate_dim = std::stoul(manifest_get(kv, "candidateDim", path));
    assign_slots(m);
    return m;
}

inline std::string slot_file(const std::string& dir, const char* prefix, std::size_t slot) {
    return dir + "/" + prefix + "_" + std::to_string(slot) + ".kft";
}

} // namespace detail

// ---------------------------------------------------------------------------
// Model checkpoints: a directory holding the manifest (layer census) and one
// tensor file per parameter slot.

inline void save_checkpoint(const Model& m, const std::string& dir) {
    std::filesystem::create_directories(dir);
    Manifest kv;
    kv["formatVersion"] = "1";
    kv["kind"] = "checkpoint";
    detail::write_model_census(kv, m);
    write_manifest(kv, dir + "/manifest");
    for (std::size_t s = 0; s < m.params.size(); ++s)
        write_tensor_file(m.params[s], detail::slot_file(dir, "param", s));
}

inline Model load_checkpoint(const std::string& dir) {
    const std::string mf = dir + "/manifest";
    const Manifest kv = read_manifest(mf);
    if (detail::manifest_get(kv, "formatVersion", mf) != "1")
        throw ParseError(mf + ": unsupported format version");
    Model m = detail::read_model_census(kv, mf);
    for (std::size_t s = 0; s < m.params.size(); ++s) {
        Tensor t = read_tensor_file(detail::slot_file(dir, "param", s));
        if (!t.same_shape(m.params[s]))
            throw ParseError(dir + ": parameter tensor " + std::to_string(s) +
                             " does not match the layer census");
        m.params[s] = std::move(t);
    }
    m.validate();
    return m;
}

// ---------------------------------------------------------------------------
// Task snapshots: the checkpoint layout plus the Fisher representation and
// penalty metadata. The stored checksum is verified on load.

inline void save_snapshot(const TaskSnapshot& snap, const Model& census_model,
                          const std::string& dir) {
    std::filesystem::create_directories(dir);
    Manifest kv;
    kv["formatVersion"] = "1";
    kv["kind"] = "snapshot";
    kv["taskId"] = snap.task_id;
    kv["method"] = to_string(snap.method);
    {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.17g", snap.lambda);
        kv["lambda"] = buf;
    }
    detail::write_model_census(kv, census_model);
    {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%016llx",
                      static_cast<unsigned long long>(snap.checksum));
        kv["checksum"] = buf;
    }

    for (std::size_t s = 0; s < snap.mean.size(); ++s)
        write_tensor_file(snap.mean[s], detail::slot_file(dir, "mean", s));

    if (const auto* d = std::get_if<DiagFisher>(&snap.fisher)) {
        kv["fisher"] = "diag";
        for (std::size_t s = 0; s < d->diag.size(); ++s)
            write_tensor_file(d->diag[s], detail::slot_file(dir, "diag", s));
    } else if (const auto* k = std::get_if<KfcFisher>(&snap.fisher)) {
        kv["fisher"] = "kfc";
        for (const auto& pair : k->pairs) {
            write_tensor_file(pair.a, detail::slot_file(dir, "kfc_a", pair.slot));
            write_tensor_file(pair.g, detail::slot_file(dir, "kfc_g", pair.slot));
        }
        for (const auto& [slot, diag] : k->embed_diag)
            write_tensor_file(diag, detail::slot_file(dir, "kfc_ediag", slot));
        std::ostringstream pairs, ediag;
        for (std::size_t i = 0; i < k->pairs.size(); ++i) {
            if (i) pairs << ',';
            pairs << k->pairs[i].slot;
        }
        for (std::size_t i = 0; i < k->embed_diag.size(); ++i) {
            if (i) ediag << ',';
            ediag << k->embed_diag[i].first;
        }
        kv["kfcPairs"] = pairs.str();
        kv["kfcEmbedDiag"] = ediag.str();
    } else if (const auto* f = std::get_if<FullFisher>(&snap.fisher)) {
        kv["fisher"] = "full";
        write_tensor_file(f->matrix, dir + "/full.kft");
    } else {
        kv["fisher"] = "none";
    }
    write_manifest(kv, dir + "/manifest");
}

inline TaskSnapshot load_snapshot(const std::string& dir) {
    const std::string mf = dir + "/manifest";
    const Manifest kv = read_manifest(mf);
    if (detail::manifest_get(kv, "formatVersion", mf) != "1")
        throw ParseError(mf + ": unsupported format version");
    Model census = detail::read_model_census(kv, mf);

    TaskSnapshot snap;
    snap.task_id = detail::manifest_get(kv, "taskId", mf);
    snap.method = method_from_string(detail::manifest_get(kv, "method", mf));
    snap.lambda = std::stod(detail::manifest_get(kv, "lambda", mf));
    for (std::size_t s = 0; s < census.params.size(); ++s)
        snap.mean.push_back(read_tensor_file(detail::slot_file(dir, "mean", s)));

    const std::string fisher = detail::manifest_get(kv, "fisher", mf);
    if (fisher == "diag") {
        DiagFisher d;
        for (std::size_t s = 0; s < census.params.size(); ++s)
            d.diag.push_back(read_tensor_file(detail::slot_file(dir, "diag", s)));
        snap.fisher = std::move(d);
    } else if (fisher == "kfc") {
        KfcFisher k;
        auto parse_list = [&](const std::string& key) {
            std::vector<std::size_t> out;
            const auto it = kv.find(key);
            if (it == kv.end() || it->second.empty()) return out;
            std::istringstream is(it->second);
            std::string item;
            while (std::getline(is, item, ',')) out.push_back(std::stoul(item));
            return out;
        };
        for (std::size_t slot : parse_list("kfcPairs")) {
            KroneckerFactorPair pair;
            pair.slot = slot;
            pair.a = read_tensor_file(detail::slot_file(dir, "kfc_a", slot));
            pair.g = read_tensor_file(detail::slot_file(dir, "kfc_g", slot));
            k.pairs.push_back(std::move(pair));
        }
        for (std::size_t slot : parse_list("kfcEmbedDiag"))
            k.embed_diag.emplace_back(slot, read_tensor_file(detail::slot_file(dir, "kfc_ediag", slot)));
        snap.fisher = std::move(k);
    } else if (fisher == "full") {
        FullFisher f;
        f.matrix = read_tensor_file(dir + "/full.kft");
        snap.fisher = std::move(f);
    } else if (fisher != "none") {
        throw ParseError(mf + ": unknown fisher representation '" + fisher + "'");
    }

    snap.checksum = std::stoull(detail::manifest_get(kv, "checksum", mf), nullptr, 16);
    verify_snapshot(snap);
    return snap;
}

} // namespace kfcl
