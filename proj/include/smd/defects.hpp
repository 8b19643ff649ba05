// Copyright 2026 The SMD Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "smd/binary_io.hpp"
#include "smd/errors.hpp"
#include "smd/lattice.hpp"
#include "smd/noise.hpp"

namespace smd {

inline constexpr int kNumFeatures = 13;

/// Feature slots of a defect token, in wire order.
enum Feature : int {
    kFeatX = 0,
    kFeatY = 1,
    kFeatTime = 2,
    kFeatType = 3,
    kFeatNE = 4,
    kFeatNW = 5,
    kFeatSE = 6,
    kFeatSW = 7,
    kFeatPrevRound = 8,
    kFeatNextRound = 9,
    kFeatBoundaryZ = 10,
    kFeatBoundaryX = 11,
    kFeatMeasurement = 12,
};

using FeatureVector = std::array<float, kNumFeatures>;

struct DefectToken {
    int stabilizer = 0;
    int round = 0;  // 1-based record index
    FeatureVector features{};
};

/// Active detection events of one shot, sorted by (round, stabilizer id).
struct DefectSequence {
    std::vector<DefectToken> tokens;
    bool truncated = false;
    uint8_t obs_z = 0;
    uint8_t obs_x = 0;

    size_t k() const { return tokens.size(); }
};

/// m_t = d_1 xor ... xor d_t.
inline std::vector<uint8_t> cumulative_xor(std::span<const uint8_t> events) {
    std::vector<uint8_t> out(events.size());
    uint8_t acc = 0;
    for (size_t t = 0; t < events.size(); ++t) {
        if (events[t] > 1) {
            throw DomainError("cumulative_xor: non-binary event value " + std::to_string(events[t]) + " at position " +
                              std::to_string(t));
        }
        acc ^= events[t];
        out[t] = acc;
    }
    return out;
}

inline void check_shot_shape(const Shot &shot, const Lattice &lattice) {
    if (shot.distance != lattice.distance() || static_cast<size_t>(shot.num_stabilizers) != lattice.num_stabilizers()) {
        throw DimensionError("shot of distance " + std::to_string(shot.distance) + " does not fit a distance-" +
                             std::to_string(lattice.distance()) + " lattice");
    }
    const size_t expected = static_cast<size_t>(shot.num_records) * lattice.num_stabilizers();
    if (shot.events.size() != expected || shot.measurements.size() != expected) {
        throw DimensionError("shot arrays hold " + std::to_string(shot.events.size()) + " entries, expected " +
                             std::to_string(expected));
    }
}

/// One token per active detection event, with its 13 features:
///   x, y           stabilizer coordinates mapped to [0,1] by (c + 1) / (2d)
///   t              record index over number of records, in (0, 1]
///   type           0 for X checks, 1 for Z checks
///   NE NW SE SW    same-type neighbor fired in the same record
///   prev, next     same stabilizer fired in the previous / next record (0 if absent)
///   b_Z, b_X       boundary hops over d - 1
///   m              cumulative XOR of this stabilizer's events up to t
inline DefectSequence extract_defects(const Shot &shot, const Lattice &lattice) {
    check_shot_shape(shot, lattice);
    const int nstab = shot.num_stabilizers;
    const int records = shot.num_records;
    const float span = static_cast<float>(lattice.coordinate_span());
    const float hop_scale = 1.0f / static_cast<float>(lattice.distance() - 1);

    DefectSequence seq;
    seq.obs_z = shot.obs_z;
    seq.obs_x = shot.obs_x;
    std::vector<uint8_t> running(static_cast<size_t>(nstab), 0);
    for (int t = 1; t <= records; ++t) {
        for (int i = 0; i < nstab; ++i) {
            const uint8_t e = shot.event(i, t);
            running[static_cast<size_t>(i)] ^= e;
            if (!e) {
                continue;
            }
            const auto &stab = lattice.stabilizer(i);
            DefectToken tok;
            tok.stabilizer = i;
            tok.round = t;
            auto &f = tok.features;
            f[kFeatX] = static_cast<float>(stab.coord.x + 1) / span;
            f[kFeatY] = static_cast<float>(stab.coord.y + 1) / span;
            f[kFeatTime] = static_cast<float>(t) / static_cast<float>(records);
            f[kFeatType] = static_cast<float>(stab.type);
            for (int dir = 0; dir < 4; ++dir) {
                const int nb = stab.neighbors[dir];
                f[kFeatNE + dir] = (nb != kNoNeighbor && shot.event(nb, t)) ? 1.0f : 0.0f;
            }
            f[kFeatPrevRound] = (t > 1 && shot.event(i, t - 1)) ? 1.0f : 0.0f;
            f[kFeatNextRound] = (t < records && shot.event(i, t + 1)) ? 1.0f : 0.0f;
            f[kFeatBoundaryZ] = static_cast<float>(stab.hops_to_z_boundary) * hop_scale;
            f[kFeatBoundaryX] = static_cast<float>(stab.hops_to_x_boundary) * hop_scale;
            f[kFeatMeasurement] = static_cast<float>(running[static_cast<size_t>(i)]);
            seq.tokens.push_back(tok);
        }
    }
    return seq;
}

/// Fixed-size batch: features (B x k_max x 13), mask (B x k_max), labels
/// (B x 2, columns lambda_Z then lambda_X). A single-head model reads column 0.
struct Batch {
    size_t batch_size = 0;
    size_t k_max = 0;
    std::vector<float> features;
    std::vector<uint8_t> mask;
    std::vector<float> labels;
    std::vector<uint32_t> k;  // real tokens per row after truncation
    std::vector<uint32_t> k_original;
    std::vector<uint8_t> truncated;

    static constexpr size_t kLabelColumns = 2;

    float *row_features(size_t b) { return features.data() + b * k_max * kNumFeatures; }
    const float *row_features(size_t b) const { return features.data() + b * k_max * kNumFeatures; }
    float label(size_t b, size_t head) const { return labels[b * kLabelColumns + head]; }

    /// Throws unless every mask row is a prefix of ones of length k[b].
    void validate() const {
        if (features.size() != batch_size * k_max * kNumFeatures || mask.size() != batch_size * k_max ||
            labels.size() != batch_size * kLabelColumns || k.size() != batch_size) {
            throw DimensionError("batch arrays do not match B=" + std::to_string(batch_size) +
                                 ", k_max=" + std::to_string(k_max));
        }
        for (size_t b = 0; b < batch_size; ++b) {
            if (k[b] > k_max) {
                throw DimensionError("row " + std::to_string(b) + " claims more tokens than k_max");
            }
            for (size_t j = 0; j < k_max; ++j) {
                if (mask[b * k_max + j] != (j < k[b] ? 1 : 0)) {
                    throw DimensionError("mask row " + std::to_string(b) + " is not a prefix of " + std::to_string(k[b]) +
                                         " ones");
                }
            }
        }
    }

    size_t truncated_count() const {
        size_t n = 0;
        for (uint8_t t : truncated) {
            n += t;
        }
        return n;
    }
};

/// Pads (and if needed truncates) sequences into a batch. Rows longer than
/// k_max keep their first k_max tokens in sort order and are flagged.
inline Batch pad_and_mask(std::span<const DefectSequence> sequences, size_t k_max) {
    if (k_max < 1) {
        throw DomainError("k_max must be >= 1");
    }
    Batch batch;
    batch.batch_size = sequences.size();
    batch.k_max = k_max;
    batch.features.assign(batch.batch_size * k_max * kNumFeatures, 0.0f);
    batch.mask.assign(batch.batch_size * k_max, 0);
    batch.labels.assign(batch.batch_size * Batch::kLabelColumns, 0.0f);
    batch.k.resize(batch.batch_size);
    batch.k_original.resize(batch.batch_size);
    batch.truncated.resize(batch.batch_size);
    for (size_t b = 0; b < sequences.size(); ++b) {
        const auto &seq = sequences[b];
        const size_t keep = std::min(seq.k(), k_max);
        float *dst = batch.row_features(b);
        for (size_t j = 0; j < keep; ++j) {
            std::copy(seq.tokens[j].features.begin(), seq.tokens[j].features.end(), dst + j * kNumFeatures);
            batch.mask[b * k_max + j] = 1;
        }
        batch.k[b] = static_cast<uint32_t>(keep);
        batch.k_original[b] = static_cast<uint32_t>(seq.k());
        batch.truncated[b] = static_cast<uint8_t>(seq.truncated || seq.k() > k_max);
        batch.labels[b * Batch::kLabelColumns + 0] = static_cast<float>(seq.obs_z);
        batch.labels[b * Batch::kLabelColumns + 1] = static_cast<float>(seq.obs_x);
    }
    return batch;
}

inline Batch make_batch(std::span<const Shot> shots, const Lattice &lattice, size_t k_max) {
    std::vector<DefectSequence> seqs;
    seqs.reserve(shots.size());
    for (const auto &s : shots) {
        seqs.push_back(extract_defects(s, lattice));
    }
    return pad_and_mask(seqs, k_max);
}

struct SparsityStats {
    int distance = 0;
    int rounds = 0;
    size_t shots = 0;
    size_t dense_size = 0;  // (d^2 - 1) * R
    double mean_k = 0.0;
    size_t p99_k = 0;
    size_t max_k = 0;
    double ratio = 0.0;  // mean_k / dense_size
};

/// Nearest-rank percentile of an unsorted sample, q in (0, 1].
inline size_t percentile_nearest_rank(std::vector<size_t> values, double q) {
    if (values.empty()) {
        throw DomainError("percentile of an empty sample");
    }
    std::sort(values.begin(), values.end());
    const auto rank = static_cast<size_t>(std::ceil(q * static_cast<double>(values.size())));
    return values[std::clamp<size_t>(rank, 1, values.size()) - 1];
}

inline SparsityStats sparsity_from_counts(std::span<const size_t> counts, int distance, int rounds) {
    if (counts.empty()) {
        throw DomainError("sparsity_stats needs at least one shot");
    }
    SparsityStats st;
    st.distance = distance;
    st.rounds = rounds;
    st.shots = counts.size();
    st.dense_size = static_cast<size_t>(distance * distance - 1) * static_cast<size_t>(rounds);
    double total = 0.0;
    for (size_t k : counts) {
        total += static_cast<double>(k);
        st.max_k = std::max(st.max_k, k);
    }
    st.mean_k = total / static_cast<double>(counts.size());
    st.p99_k = percentile_nearest_rank(std::vector<size_t>(counts.begin(), counts.end()), 0.99);
    st.ratio = st.mean_k / static_cast<double>(st.dense_size);
    return st;
}

inline SparsityStats sparsity_stats(std::span<const Shot> shots, const Lattice &lattice, int rounds) {
    std::vector<size_t> counts;
    counts.reserve(shots.size());
    for (const auto &s : shots) {
        check_shot_shape(s, lattice);
        counts.push_back(s.event_count());
    }
    return sparsity_from_counts(counts, lattice.distance(), rounds);
}

/// k_max sized from the 99th-percentile defect count: ceil(1.5 * p99), >= 1.
inline size_t default_k_max(size_t p99_k) {
    return std::max<size_t>(1, static_cast<size_t>(std::ceil(1.5 * static_cast<double>(p99_k))));
}

// Batch tensor file
//
//   offset 0   "SMDB"
//          4   version:u8, 3 zero bytes
//          8   B:u32  k_max:u32  features:u32  label_columns:u32
//         24   mask_offset:u64  labels_offset:u64  counts_offset:u64
//         48   features: f32[B][k_max][features]   (row-major)
//   mask_offset    mask:   f32[B][k_max]           (1 = real token)
//   labels_offset  labels: f32[B][label_columns]   (lambda_Z, lambda_X)
//   counts_offset  k:      u32[B]
//
// Little-endian throughout.
inline constexpr char kBatchMagic[5] = "SMDB";
inline constexpr uint8_t kBatchVersion = 1;

inline void write_batch(const std::string &path, const Batch &batch) {
    batch.validate();
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open '" + path + "' for writing");
    }
    const uint64_t header = 48;
    const uint64_t mask_offset = header + batch.features.size() * 4;
    const uint64_t labels_offset = mask_offset + batch.mask.size() * 4;
    const uint64_t counts_offset = labels_offset + batch.labels.size() * 4;
    binio::write_magic(out, kBatchMagic);
    binio::write_le<uint8_t>(out, kBatchVersion);
    for (int i = 0; i < 3; ++i) {
        binio::write_le<uint8_t>(out, 0);
    }
    binio::write_le<uint32_t>(out, static_cast<uint32_t>(batch.batch_size));
    binio::write_le<uint32_t>(out, static_cast<uint32_t>(batch.k_max));
    binio::write_le<uint32_t>(out, kNumFeatures);
    binio::write_le<uint32_t>(out, Batch::kLabelColumns);
    binio::write_le<uint64_t>(out, mask_offset);
    binio::write_le<uint64_t>(out, labels_offset);
    binio::write_le<uint64_t>(out, counts_offset);
    binio::write_le_array<float>(out, batch.features);
    std::vector<float> mask(batch.mask.begin(), batch.mask.end());
    binio::write_le_array<float>(out, mask);
    binio::write_le_array<float>(out, batch.labels);
    binio::write_le_array<uint32_t>(out, batch.k);
    if (!out) {
        throw std::runtime_error("write to batch file failed");
    }
}

inline Batch read_batch(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open '" + path + "'");
    }
    binio::expect_magic(in, kBatchMagic, "batch tensor");
    const auto version = binio::read_le<uint8_t>(in, "version");
    if (version != kBatchVersion) {
        throw FormatError("unsupported batch file version " + std::to_string(version));
    }
    in.ignore(3);
    Batch b;
    b.batch_size = binio::read_le<uint32_t>(in, "B");
    b.k_max = binio::read_le<uint32_t>(in, "k_max");
    const auto nfeat = binio::read_le<uint32_t>(in, "feature count");
    const auto ncols = binio::read_le<uint32_t>(in, "label columns");
    if (nfeat != kNumFeatures || ncols != Batch::kLabelColumns) {
        throw DimensionError("batch file has " + std::to_string(nfeat) + " features and " + std::to_string(ncols) +
                             " label columns");
    }
    const auto mask_offset = binio::read_le<uint64_t>(in, "mask offset");
    const auto labels_offset = binio::read_le<uint64_t>(in, "labels offset");
    const auto counts_offset = binio::read_le<uint64_t>(in, "counts offset");

    auto read_f32 = [&](uint64_t offset, size_t n, const char *what) {
        in.seekg(static_cast<std::streamoff>(offset));
        std::vector<float> v(n);
        for (auto &x : v) {
            x = binio::read_le<float>(in, what);
        }
        return v;
    };
    b.features = read_f32(48, b.batch_size * b.k_max * kNumFeatures, "features");
    const auto mask = read_f32(mask_offset, b.batch_size * b.k_max, "mask");
    b.labels = read_f32(labels_offset, b.batch_size * Batch::kLabelColumns, "labels");
    in.seekg(static_cast<std::streamoff>(counts_offset));
    b.k.resize(b.batch_size);
    for (auto &k : b.k) {
        k = binio::read_le<uint32_t>(in, "counts");
    }
    b.mask.resize(mask.size());
    for (size_t i = 0; i < mask.size(); ++i) {
        b.mask[i] = mask[i] != 0.0f ? 1 : 0;
    }
    b.k_original = b.k;
    b.truncated.assign(b.batch_size, 0);
    b.validate();
    return b;
}

}  // namespace smd
