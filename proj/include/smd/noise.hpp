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

#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "smd/binary_io.hpp"
#include "smd/errors.hpp"
#include "smd/lattice.hpp"
#include "smd/rng.hpp"

namespace smd {

enum class NoiseKind : uint8_t { CodeCapacity = 0, Phenomenological = 1 };

inline const char *to_string(NoiseKind k) {
    return k == NoiseKind::CodeCapacity ? "code_capacity" : "phenomenological";
}

inline NoiseKind parse_noise_kind(const std::string &s) {
    if (s == "code_capacity") {
        return NoiseKind::CodeCapacity;
    }
    if (s == "phenomenological") {
        return NoiseKind::Phenomenological;
    }
    throw DomainError("unknown noise kind '" + s + "' (expected code_capacity or phenomenological)");
}

struct NoiseConfig {
    NoiseKind kind = NoiseKind::CodeCapacity;
    double p = 0.0;
    /// Measurement flip probability; defaults to 2p/3 when unset.
    std::optional<double> p_meas;
    int rounds = 1;

    double measurement_error() const { return p_meas.value_or(2.0 * p / 3.0); }
    int effective_rounds() const { return kind == NoiseKind::CodeCapacity ? 1 : rounds; }
    /// Number of measurement records, including the closing noiseless readout.
    int num_records() const { return kind == NoiseKind::CodeCapacity ? 1 : rounds + 1; }

    void validate() const {
        if (!(p >= 0.0 && p < 1.0)) {
            throw DomainError("noise p must lie in [0, 1), got " + std::to_string(p));
        }
        const double pm = measurement_error();
        if (!(pm >= 0.0 && pm < 1.0)) {
            throw DomainError("noise p_meas must lie in [0, 1), got " + std::to_string(pm));
        }
        if (rounds < 1) {
            throw DomainError("rounds must be >= 1, got " + std::to_string(rounds));
        }
    }
};

/// Accumulated Pauli error on the data qubits: bit q of `x` is the X component
/// of qubit q's error, `z` the Z component (Y sets both).
struct PauliFrame {
    std::vector<uint8_t> x;
    std::vector<uint8_t> z;

    explicit PauliFrame(size_t num_qubits = 0) : x(num_qubits, 0), z(num_qubits, 0) {}
    size_t size() const { return x.size(); }
};

/// One memory-experiment sample.
///
/// Records are stored round-major: entry (i, t) for stabilizer i and 1-based
/// record t lives at index (t-1) * num_stabilizers + i. Code-capacity shots hold
/// one record; phenomenological shots hold `rounds` noisy records followed by a
/// noiseless readout record.
struct Shot {
    int distance = 0;
    NoiseKind kind = NoiseKind::CodeCapacity;
    int rounds = 1;
    int num_records = 1;
    int num_stabilizers = 0;
    uint64_t seed = 0;
    std::vector<uint8_t> measurements;
    std::vector<uint8_t> events;
    uint8_t obs_z = 0;
    uint8_t obs_x = 0;

    uint8_t measurement(int stab, int t) const { return measurements[index(stab, t)]; }
    uint8_t event(int stab, int t) const { return events[index(stab, t)]; }
    size_t index(int stab, int t) const {
        return static_cast<size_t>(t - 1) * static_cast<size_t>(num_stabilizers) + static_cast<size_t>(stab);
    }
    size_t event_count() const {
        size_t k = 0;
        for (uint8_t e : events) {
            k += e;
        }
        return k;
    }

    friend bool operator==(const Shot &, const Shot &) = default;
};

/// d_{i,t} = s_{i,t} xor s_{i,t-1}, with s_{i,0} = reference_i. `raw` holds
/// num_records * num_stabilizers bits, round-major.
inline std::vector<uint8_t> detection_events(std::span<const uint8_t> raw, size_t num_stabilizers,
                                             std::span<const uint8_t> reference) {
    if (num_stabilizers == 0 || raw.size() % num_stabilizers != 0) {
        throw DimensionError("measurement array of size " + std::to_string(raw.size()) +
                             " is not a whole number of records of " + std::to_string(num_stabilizers) + " stabilizers");
    }
    if (reference.size() != num_stabilizers) {
        throw DimensionError("reference frame has " + std::to_string(reference.size()) + " entries, expected " +
                             std::to_string(num_stabilizers));
    }
    std::vector<uint8_t> events(raw.size());
    const size_t records = raw.size() / num_stabilizers;
    for (size_t i = 0; i < num_stabilizers; ++i) {
        uint8_t prev = reference[i] & 1u;
        for (size_t t = 0; t < records; ++t) {
            const uint8_t cur = raw[t * num_stabilizers + i] & 1u;
            events[t * num_stabilizers + i] = cur ^ prev;
            prev = cur;
        }
    }
    return events;
}

/// Noiseless syndrome of a frame: Z checks see X components, X checks see Z.
inline std::vector<uint8_t> syndrome_of(const Lattice &lattice, const PauliFrame &frame) {
    std::vector<uint8_t> s(lattice.num_stabilizers(), 0);
    for (const auto &stab : lattice.stabilizers()) {
        const auto &bits = stab.type == CheckType::Z ? frame.x : frame.z;
        uint8_t parity = 0;
        for (int q : stab.support) {
            parity ^= bits[static_cast<size_t>(q)];
        }
        s[static_cast<size_t>(stab.id)] = parity;
    }
    return s;
}

/// (lambda_Z, lambda_X): X/Y parity on the logical-Z support, Z/Y parity on the
/// logical-X support.
inline std::pair<uint8_t, uint8_t> true_observables(const PauliFrame &frame, const Lattice &lattice) {
    if (frame.size() != lattice.num_data_qubits()) {
        throw DimensionError("frame covers " + std::to_string(frame.size()) + " qubits, lattice has " +
                             std::to_string(lattice.num_data_qubits()));
    }
    uint8_t lz = 0;
    uint8_t lx = 0;
    for (int q : lattice.logical_z_support()) {
        lz ^= frame.x[static_cast<size_t>(q)];
    }
    for (int q : lattice.logical_x_support()) {
        lx ^= frame.z[static_cast<size_t>(q)];
    }
    return {lz, lx};
}

/// Applies single-qubit depolarizing noise: X, Y, Z each with probability p/3.
inline void apply_depolarizing(PauliFrame &frame, double p, Rng &rng) {
    if (p <= 0.0) {
        return;
    }
    const double third = p / 3.0;
    for (size_t q = 0; q < frame.size(); ++q) {
        const double r = uniform01(rng);
        if (r >= p) {
            continue;
        }
        const int pauli = r < third ? 0 : (r < 2.0 * third ? 1 : 2);  // X, Y, Z
        frame.x[q] ^= static_cast<uint8_t>(pauli != 2);
        frame.z[q] ^= static_cast<uint8_t>(pauli != 0);
    }
}

/// Builds a code-capacity shot from a given frame (perfect single-round readout).
inline Shot shot_from_frame(const Lattice &lattice, const PauliFrame &frame, uint64_t seed = 0) {
    Shot shot;
    shot.distance = lattice.distance();
    shot.kind = NoiseKind::CodeCapacity;
    shot.rounds = 1;
    shot.num_records = 1;
    shot.num_stabilizers = static_cast<int>(lattice.num_stabilizers());
    shot.seed = seed;
    shot.measurements = syndrome_of(lattice, frame);
    shot.events = shot.measurements;
    std::tie(shot.obs_z, shot.obs_x) = true_observables(frame, lattice);
    return shot;
}

/// Code-capacity frame for one shot, drawn from the per-shot stream `seed`.
inline PauliFrame sample_code_capacity_frame(const Lattice &lattice, double p, uint64_t seed) {
    Rng rng(seed);
    PauliFrame frame(lattice.num_data_qubits());
    apply_depolarizing(frame, p, rng);
    return frame;
}

inline Shot sample_code_capacity(const Lattice &lattice, double p, uint64_t seed) {
    if (!(p >= 0.0 && p < 1.0)) {
        throw DomainError("noise p must lie in [0, 1), got " + std::to_string(p));
    }
    return shot_from_frame(lattice, sample_code_capacity_frame(lattice, p, seed), seed);
}

/// Explicit error history for a phenomenological experiment: the Pauli error
/// applied in each round (not cumulative) and the measurement flips per round.
struct ErrorHistory {
    std::vector<PauliFrame> data_errors;           // one per round
    std::vector<std::vector<uint8_t>> meas_flips;  // one per round, per stabilizer
};

/// Deterministic phenomenological simulation given an error history. Data
/// errors of round t act before that round's measurement; record R+1 is a
/// noiseless readout that closes every open defect chain.
inline Shot simulate_phenomenological(const Lattice &lattice, const ErrorHistory &history, uint64_t seed = 0) {
    const int rounds = static_cast<int>(history.data_errors.size());
    if (rounds < 1 || history.meas_flips.size() != history.data_errors.size()) {
        throw DimensionError("error history needs matching, nonempty data and measurement rounds");
    }
    const size_t nstab = lattice.num_stabilizers();
    Shot shot;
    shot.distance = lattice.distance();
    shot.kind = NoiseKind::Phenomenological;
    shot.rounds = rounds;
    shot.num_records = rounds + 1;
    shot.num_stabilizers = static_cast<int>(nstab);
    shot.seed = seed;
    shot.measurements.reserve(nstab * static_cast<size_t>(rounds + 1));

    PauliFrame frame(lattice.num_data_qubits());
    for (int t = 0; t < rounds; ++t) {
        const auto &err = history.data_errors[static_cast<size_t>(t)];
        const auto &flips = history.meas_flips[static_cast<size_t>(t)];
        if (err.size() != frame.size() || flips.size() != nstab) {
            throw DimensionError("error history round " + std::to_string(t + 1) + " has the wrong width");
        }
        for (size_t q = 0; q < frame.size(); ++q) {
            frame.x[q] ^= err.x[q];
            frame.z[q] ^= err.z[q];
        }
        auto s = syndrome_of(lattice, frame);
        for (size_t i = 0; i < nstab; ++i) {
            s[i] ^= flips[i] & 1u;
        }
        shot.measurements.insert(shot.measurements.end(), s.begin(), s.end());
    }
    const auto final_readout = syndrome_of(lattice, frame);
    shot.measurements.insert(shot.measurements.end(), final_readout.begin(), final_readout.end());

    const std::vector<uint8_t> reference(nstab, 0);
    shot.events = detection_events(shot.measurements, nstab, reference);
    std::tie(shot.obs_z, shot.obs_x) = true_observables(frame, lattice);
    return shot;
}

inline ErrorHistory sample_error_history(const Lattice &lattice, const NoiseConfig &config, uint64_t seed) {
    Rng rng(seed);
    ErrorHistory h;
    const double pm = config.measurement_error();
    const size_t nstab = lattice.num_stabilizers();
    for (int t = 0; t < config.rounds; ++t) {
        PauliFrame err(lattice.num_data_qubits());
        apply_depolarizing(err, config.p, rng);
        h.data_errors.push_back(std::move(err));
        std::vector<uint8_t> flips(nstab, 0);
        if (pm > 0.0) {
            for (size_t i = 0; i < nstab; ++i) {
                flips[i] = static_cast<uint8_t>(uniform01(rng) < pm);
            }
        }
        h.meas_flips.push_back(std::move(flips));
    }
    return h;
}

inline Shot sample_phenomenological(const Lattice &lattice, const NoiseConfig &config, uint64_t seed) {
    if (config.kind != NoiseKind::Phenomenological) {
        throw DomainError("sample_phenomenological needs a phenomenological noise config");
    }
    config.validate();
    return simulate_phenomenological(lattice, sample_error_history(lattice, config, seed), seed);
}

/// Dispatches on the noise kind.
inline Shot sample_shot(const Lattice &lattice, const NoiseConfig &config, uint64_t seed) {
    config.validate();
    if (config.kind == NoiseKind::CodeCapacity) {
        return sample_code_capacity(lattice, config.p, seed);
    }
    return sample_phenomenological(lattice, config, seed);
}

/// Shot `index` of the experiment with master seed `master_seed`.
inline Shot sample_indexed(const Lattice &lattice, const NoiseConfig &config, uint64_t master_seed, uint64_t index) {
    return sample_shot(lattice, config, stream_seed(master_seed, index));
}

// Shot archive
//
//   file    := "SMDS" version:u8 record*
//   record  := d:u8 kind:u8 rounds:u32 seed:u64 observables:u8
//              measurements:bits events:bits
//
// observables packs lambda_Z in bit 0 and lambda_X in bit 1. The measurement
// and event arrays each hold (d^2-1) * records bits (records = 1 for code
// capacity, rounds + 1 otherwise), round-major, packed LSB-first and padded to
// a whole byte. All integers little-endian.
inline constexpr char kShotMagic[5] = "SMDS";
inline constexpr uint8_t kShotVersion = 1;

class ShotWriter {
  public:
    explicit ShotWriter(const std::string &path) : out_(path, std::ios::binary) {
        if (!out_) {
            throw std::runtime_error("cannot open '" + path + "' for writing");
        }
        binio::write_magic(out_, kShotMagic);
        binio::write_le<uint8_t>(out_, kShotVersion);
    }

    void write(const Shot &shot) {
        binio::write_le<uint8_t>(out_, static_cast<uint8_t>(shot.distance));
        binio::write_le<uint8_t>(out_, static_cast<uint8_t>(shot.kind));
        binio::write_le<uint32_t>(out_, static_cast<uint32_t>(shot.rounds));
        binio::write_le<uint64_t>(out_, shot.seed);
        binio::write_le<uint8_t>(out_, static_cast<uint8_t>((shot.obs_z & 1u) | ((shot.obs_x & 1u) << 1)));
        const auto m = binio::pack_bits(shot.measurements);
        const auto e = binio::pack_bits(shot.events);
        out_.write(reinterpret_cast<const char *>(m.data()), static_cast<std::streamsize>(m.size()));
        out_.write(reinterpret_cast<const char *>(e.data()), static_cast<std::streamsize>(e.size()));
        if (!out_) {
            throw std::runtime_error("write to shot archive failed");
        }
    }

  private:
    std::ofstream out_;
};

inline std::vector<Shot> read_shots(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open '" + path + "'");
    }
    binio::expect_magic(in, kShotMagic, "shot archive");
    const auto version = binio::read_le<uint8_t>(in, "version");
    if (version != kShotVersion) {
        throw FormatError("unsupported shot archive version " + std::to_string(version));
    }
    std::vector<Shot> shots;
    while (in.peek() != std::char_traits<char>::eof()) {
        Shot s;
        s.distance = binio::read_le<uint8_t>(in, "distance");
        const auto kind = binio::read_le<uint8_t>(in, "noise kind");
        if (kind > 1) {
            throw FormatError("unknown noise kind " + std::to_string(kind));
        }
        s.kind = static_cast<NoiseKind>(kind);
        s.rounds = static_cast<int>(binio::read_le<uint32_t>(in, "rounds"));
        s.seed = binio::read_le<uint64_t>(in, "seed");
        const auto obs = binio::read_le<uint8_t>(in, "observables");
        s.obs_z = obs & 1u;
        s.obs_x = (obs >> 1) & 1u;
        if (s.distance < 3 || s.distance % 2 == 0 || s.rounds < 1) {
            throw FormatError("corrupt shot record header");
        }
        s.num_stabilizers = s.distance * s.distance - 1;
        s.num_records = s.kind == NoiseKind::CodeCapacity ? 1 : s.rounds + 1;
        const size_t bits = static_cast<size_t>(s.num_stabilizers) * static_cast<size_t>(s.num_records);
        std::vector<uint8_t> buf((bits + 7) / 8);
        for (auto *target : {&s.measurements, &s.events}) {
            in.read(reinterpret_cast<char *>(buf.data()), static_cast<std::streamsize>(buf.size()));
            if (in.gcount() != static_cast<std::streamsize>(buf.size())) {
                throw FormatError("truncated shot record");
            }
            *target = binio::unpack_bits(buf, bits);
        }
        shots.push_back(std::move(s));
    }
    return shots;
}

inline void write_shots(const std::string &path, std::span<const Shot> shots) {
    ShotWriter writer(path);
    for (const auto &s : shots) {
        writer.write(s);
    }
}

}  // namespace smd
