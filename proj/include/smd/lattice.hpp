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
#include <cstdint>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "smd/errors.hpp"

namespace smd {

/// Stabilizer type. The numeric value is the type feature fed to the network.
enum class CheckType : uint8_t { X = 0, Z = 1 };

inline const char *to_string(CheckType t) {
    return t == CheckType::X ? "X" : "Z";
}

inline CheckType other(CheckType t) {
    return t == CheckType::X ? CheckType::Z : CheckType::X;
}

/// Point on the doubled-coordinate grid. Data qubits sit at even-even points
/// (0..2(d-1)), stabilizers at odd-odd points (-1..2d-1). y grows southward.
struct GridCoord {
    int x = 0;
    int y = 0;
    friend auto operator<=>(const GridCoord &, const GridCoord &) = default;
};

inline constexpr int kNoNeighbor = -1;

/// Fixed neighbor slot order; feature positions n1..n4 follow it.
enum Direction : int { NE = 0, NW = 1, SE = 2, SW = 3 };
inline constexpr std::array<GridCoord, 4> kDiagonalOffsets{{{+2, -2}, {-2, -2}, {+2, +2}, {-2, +2}}};

inline constexpr Direction opposite(Direction dir) {
    switch (dir) {
        case NE: return SW;
        case NW: return SE;
        case SE: return NW;
        default: return NE;
    }
}

struct Stabilizer {
    int id = 0;
    CheckType type = CheckType::X;
    GridCoord coord;
    std::vector<int> support;
    std::array<int, 4> neighbors{kNoNeighbor, kNoNeighbor, kNoNeighbor, kNoNeighbor};
    /// Hops to the top/bottom edges (where chains seen by Z-type checks end).
    int hops_to_z_boundary = 0;
    /// Hops to the left/right edges (where chains seen by X-type checks end).
    int hops_to_x_boundary = 0;
};

/// Rotated surface code of odd distance d >= 3.
///
/// Layout: plaquette (i, j) sits at grid point (2i+1, 2j+1) and touches the
/// data qubits (2i..2i+2, 2j..2j+2) that exist. Bulk plaquettes (0 <= i,j <= d-2)
/// alternate X ((i+j) even) and Z ((i+j) odd). Weight-2 X checks line the top
/// and bottom edges, weight-2 Z checks the left and right edges. A bit flip on a
/// top-row qubit therefore trips a single Z check, so Z-check defect chains end
/// on the top/bottom edges and X-check chains on the left/right edges.
///
/// Logical Z is the top row of data qubits, logical X the left column; they
/// share qubit 0.
class Lattice {
  public:
    explicit Lattice(int distance);

    int distance() const { return d_; }
    size_t num_data_qubits() const { return data_.size(); }
    size_t num_stabilizers() const { return stabs_.size(); }

    const std::vector<GridCoord> &data_qubits() const { return data_; }
    const std::vector<Stabilizer> &stabilizers() const { return stabs_; }
    const Stabilizer &stabilizer(int id) const {
        check_id(id);
        return stabs_[static_cast<size_t>(id)];
    }

    const std::vector<int> &logical_z_support() const { return logical_z_; }
    const std::vector<int> &logical_x_support() const { return logical_x_; }

    /// Stabilizers of the given type that contain data qubit q (1 or 2 of them).
    const std::vector<int> &checks_on_qubit(int q, CheckType type) const {
        return qubit_checks_[static_cast<size_t>(q)][static_cast<size_t>(type)];
    }

    std::vector<int> stabilizers_of_type(CheckType type) const {
        std::vector<int> out;
        for (const auto &s : stabs_) {
            if (s.type == type) {
                out.push_back(s.id);
            }
        }
        return out;
    }

    /// Scale used to map stabilizer coordinates onto [0, 1]: (c + 1) / (2d).
    int coordinate_span() const { return 2 * d_; }

    int data_index(int x, int y) const { return (y / 2) * d_ + x / 2; }

    /// Human-readable geometry dump.
    std::string dump() const;

  private:
    void check_id(int id) const {
        if (id < 0 || static_cast<size_t>(id) >= stabs_.size()) {
            throw DomainError("invalid stabilizer id " + std::to_string(id) + " (lattice has " +
                              std::to_string(stabs_.size()) + " stabilizers)");
        }
    }

    int d_;
    std::vector<GridCoord> data_;
    std::vector<Stabilizer> stabs_;
    std::vector<int> logical_z_;
    std::vector<int> logical_x_;
    std::vector<std::array<std::vector<int>, 2>> qubit_checks_;
};

inline Lattice::Lattice(int distance) : d_(distance) {
    if (distance < 3 || distance % 2 == 0) {
        throw DomainError("invalid distance " + std::to_string(distance) + ": must be odd and >= 3");
    }
    const int d = distance;
    for (int r = 0; r < d; ++r) {
        for (int c = 0; c < d; ++c) {
            data_.push_back({2 * c, 2 * r});
        }
    }

    // Row-major (y, then x) over plaquette positions fixes the stabilizer ids.
    for (int j = -1; j <= d - 1; ++j) {
        for (int i = -1; i <= d - 1; ++i) {
            const bool bulk = i >= 0 && i <= d - 2 && j >= 0 && j <= d - 2;
            const CheckType type = ((i + j) % 2 == 0) ? CheckType::X : CheckType::Z;
            const bool top_bottom = (j == -1 || j == d - 1) && i >= 0 && i <= d - 2;
            const bool left_right = (i == -1 || i == d - 1) && j >= 0 && j <= d - 2;
            const bool keep = bulk || (top_bottom && type == CheckType::X) || (left_right && type == CheckType::Z);
            if (!keep) {
                continue;
            }
            Stabilizer s;
            s.id = static_cast<int>(stabs_.size());
            s.type = type;
            s.coord = {2 * i + 1, 2 * j + 1};
            for (int dy : {-1, 1}) {
                for (int dx : {-1, 1}) {
                    const int x = s.coord.x + dx;
                    const int y = s.coord.y + dy;
                    if (x >= 0 && x <= 2 * (d - 1) && y >= 0 && y <= 2 * (d - 1)) {
                        s.support.push_back(data_index(x, y));
                    }
                }
            }
            std::sort(s.support.begin(), s.support.end());
            s.hops_to_z_boundary = std::min(j + 1, d - 1 - j);
            s.hops_to_x_boundary = std::min(i + 1, d - 1 - i);
            stabs_.push_back(std::move(s));
        }
    }

    std::map<GridCoord, int> by_coord;
    for (const auto &s : stabs_) {
        by_coord[s.coord] = s.id;
    }
    for (auto &s : stabs_) {
        for (int dir = 0; dir < 4; ++dir) {
            const GridCoord nb{s.coord.x + kDiagonalOffsets[dir].x, s.coord.y + kDiagonalOffsets[dir].y};
            auto it = by_coord.find(nb);
            if (it != by_coord.end()) {
                s.neighbors[dir] = it->second;
            }
        }
    }

    qubit_checks_.resize(data_.size());
    for (const auto &s : stabs_) {
        for (int q : s.support) {
            qubit_checks_[static_cast<size_t>(q)][static_cast<size_t>(s.type)].push_back(s.id);
        }
    }

    for (int c = 0; c < d; ++c) {
        logical_z_.push_back(c);
    }
    for (int r = 0; r < d; ++r) {
        logical_x_.push_back(r * d);
    }
}

inline std::string Lattice::dump() const {
    std::ostringstream out;
    out << "rotated surface code d=" << d_ << "\n";
    out << "data qubits: " << data_.size() << "  stabilizers: " << stabs_.size() << "\n";

    // Character map: data qubits 'o', X checks 'X', Z checks 'Z'.
    const int span = 2 * d_ + 1;
    std::vector<std::string> grid(static_cast<size_t>(span), std::string(static_cast<size_t>(span), ' '));
    for (const auto &q : data_) {
        grid[static_cast<size_t>(q.y + 1)][static_cast<size_t>(q.x + 1)] = 'o';
    }
    for (const auto &s : stabs_) {
        grid[static_cast<size_t>(s.coord.y + 1)][static_cast<size_t>(s.coord.x + 1)] = s.type == CheckType::X ? 'X' : 'Z';
    }
    for (const auto &row : grid) {
        out << "  " << row << "\n";
    }

    out << "id type   x   y  b_z b_x  support          neighbors(NE,NW,SE,SW)\n";
    for (const auto &s : stabs_) {
        std::ostringstream sup;
        for (size_t k = 0; k < s.support.size(); ++k) {
            sup << (k ? "," : "") << s.support[k];
        }
        std::ostringstream nb;
        for (int k = 0; k < 4; ++k) {
            nb << (k ? "," : "") << (s.neighbors[k] == kNoNeighbor ? std::string("-") : std::to_string(s.neighbors[k]));
        }
        char line[160];
        std::snprintf(line, sizeof(line), "%2d  %s   %3d %3d  %3d %3d  %-16s %s\n", s.id, to_string(s.type), s.coord.x,
                      s.coord.y, s.hops_to_z_boundary, s.hops_to_x_boundary, sup.str().c_str(), nb.str().c_str());
        out << line;
    }
    out << "logical Z support:";
    for (int q : logical_z_) {
        out << " " << q;
    }
    out << "\nlogical X support:";
    for (int q : logical_x_) {
        out << " " << q;
    }
    out << "\n";
    return out.str();
}

inline Lattice build_lattice(int distance) {
    return Lattice(distance);
}

/// Same-type diagonal neighbors in NE, NW, SE, SW order; kNoNeighbor where absent.
inline std::array<int, 4> same_type_neighbors(const Lattice &lattice, int stab_id) {
    return lattice.stabilizer(stab_id).neighbors;
}

/// (hops to the Z boundary, hops to the X boundary), see Stabilizer.
inline std::pair<int, int> boundary_hops(const Lattice &lattice, int stab_id) {
    const auto &s = lattice.stabilizer(stab_id);
    return {s.hops_to_z_boundary, s.hops_to_x_boundary};
}

}  // namespace smd
