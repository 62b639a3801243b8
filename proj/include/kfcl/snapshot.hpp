#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kfcl/fisher.hpp"
#include "kfcl/model.hpp"
#include "kfcl/tensor.hpp"

namespace kfcl {

enum class Method { None, L2, EwcDiag, EwcKfc, Replay, LrControl };

inline const char* to_string(Method m) {
    switch (m) {
        case Method::None: return "none";
        case Method::L2: return "l2";
        case Method::EwcDiag: return "ewc-diag";
        case Method::EwcKfc: return "ewc-kfc";
        case Method::Replay: return "replay";
        case Method::LrControl: return "lr-control";
    }
    return "?";
}

inline Method method_from_string(const std::string& s) {
    if (s == "none") return Method::None;
    if (s == "l2") return Method::L2;
    if (s == "ewc-diag") return Method::EwcDiag;
    if (s == "ewc-kfc") return Method::EwcKfc;
    if (s == "replay") return Method::Replay;
    if (s == "lr-control") return Method::LrControl;
    throw ConfigError("unknown method '" + s + "'");
}

// Everything kept from a finished task: the post-training parameters (the
// penalty anchor) and a Fisher representation matching the training method.
// Snapshots replace access to the task's data in later tiers.
struct TaskSnapshot {
    std::string task_id;
    Method method = Method::None;
    std::vector<Tensor> mean;  // per slot, congruent with the model
    FisherRepr fisher;
    double lambda = 0.0;
    std::uint64_t checksum = 0;
};

namespace detail {

inline void fnv1a_accumulate(std::uint64_t& h, const void* bytes, std::size_t len) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
}

inline void hash_tensor(std::uint64_t& h, const Tensor& t) {
    for (std::size_t d : t.dims()) {
        const std::uint64_t v = d;
        fnv1a_accumulate(h, &v, sizeof(v));
    }
    fnv1a_accumulate(h, t.data(), t.size() * sizeof(double));
}

} // namespace detail

// Content hash over the mean and Fisher tensors; captured once and verified
// before every later use.
inline std::uint64_t snapshot_checksum(const TaskSnapshot& snap) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    detail::fnv1a_accumulate(h, snap.task_id.data(), snap.task_id.size());
    const int method = static_cast<int>(snap.method);
    detail::fnv1a_accumulate(h, &method, sizeof(method));
    for (const auto& t : snap.mean) detail::hash_tensor(h, t);
    if (const auto* d = std::get_if<DiagFisher>(&snap.fisher)) {
        for (const auto& t : d->diag) detail::hash_tensor(h, t);
    } else if (const auto* kfc = std::get_if<KfcFisher>(&snap.fisher)) {
        for (const auto& p : kfc->pairs) {
            detail::hash_tensor(h, p.a);
            detail::hash_tensor(h, p.g);
        }
        for (const auto& [slot, t] : kfc->embed_diag) {
            const std::uint64_t v = slot;
            detail::fnv1a_accumulate(h, &v, sizeof(v));
            detail::hash_tensor(h, t);
        }
    } else if (const auto* f = std::get_if<FullFisher>(&snap.fisher)) {
        detail::hash_tensor(h, f->matrix);
    }
    return h;
}

inline void seal_snapshot(TaskSnapshot& snap) { snap.checksum = snapshot_checksum(snap); }

inline void verify_snapshot(const TaskSnapshot& snap) {
    if (snap.checksum != snapshot_checksum(snap))
        throw SnapshotMismatchError("snapshot '" + snap.task_id + "' failed its checksum");
}

} // namespace kfcl
