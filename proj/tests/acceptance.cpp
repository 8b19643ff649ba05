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

// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <sstream>
#include <string>
#include <vector>

#include "matching_oracle.hpp"
#include "model_oracle.hpp"
#include "smd/harness.hpp"

using namespace smd;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

// Appends to the detail line and records failure when `ok` is false.
void check(Outcome &o, bool ok, const std::string &what) {
    if (!o.detail.empty()) {
        o.detail += "; ";
    }
    o.detail += what;
    if (!ok) {
        o.pass = false;
        o.detail += " [fail]";
    }
}

std::string fmt(const char *f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

constexpr uint64_t kEvalSeed = 0xE7A10001ULL;

// -- 1 ---------------------------------------------------------------------

Outcome mwpm_reference_rates() {
    struct Point {
        int d;
        double p;
        double ref;
    };
    const std::vector<Point> points{{3, 0.01, 1.5e-3}, {3, 0.03, 1.3e-2}, {3, 0.05, 3.4e-2},
                                    {3, 0.10, 1.1e-1}, {5, 0.05, 1.6e-2}};
    Outcome o;
    for (const auto &pt : points) {
        const Lattice lat(pt.d);
        const NoiseConfig n{NoiseKind::CodeCapacity, pt.p, std::nullopt, 1};
        const auto e = estimate_ler(MwpmDecoder(lat, n), lat, n, 1000000, kEvalSeed);
        const bool ok = std::abs(e.ler() - pt.ref) <= 0.10 * pt.ref || e.ci().contains(pt.ref);
        check(o, ok,
              "d=" + std::to_string(pt.d) + " p=" + fmt("%.2f", pt.p) + " ler=" + fmt("%.4g", e.ler()) + " ref=" +
                  fmt("%.3g", pt.ref));
    }
    return o;
}

// -- 2 ---------------------------------------------------------------------

// Probability that an odd number of n independent flips of probability r occur.
double odd_flip_probability(int n, double r) { return 0.5 * (1.0 - std::pow(1.0 - 2.0 * r, n)); }

// Expected detection events per shot of the phenomenological model: a
// stabilizer of weight w sees w data-qubit flips (each anticommuting with
// probability 2p/3) plus the measurement flips of its own and the previous
// round; the final readout is perfect.
double expected_events(const Lattice &lat, double p, int rounds) {
    const double q = 2.0 * p / 3.0;
    double total = 0.0;
    for (const auto &s : lat.stabilizers()) {
        const int w = static_cast<int>(s.support.size());
        total += odd_flip_probability(w + 1, q) + (rounds - 1) * odd_flip_probability(w + 2, q) +
                 odd_flip_probability(1, q);
    }
    return total;
}

Outcome sparsity_accounting() {
    Outcome o;
    const std::vector<int> ds{3, 5, 7};
    const std::vector<size_t> stabs{8, 24, 48};
    const std::vector<size_t> dense{960, 2880, 5760};
    for (size_t i = 0; i < ds.size(); ++i) {
        const Lattice lat(ds[i]);
        const NoiseConfig n{NoiseKind::Phenomenological, 1e-3, std::nullopt, 120};
        const size_t shots = ds[i] == 5 ? 100000 : 10000;
        const auto st = measure_sparsity(lat, n, shots, kEvalSeed);
        const bool ratio_exact = st.ratio == st.mean_k / static_cast<double>(st.dense_size);
        const double expect = expected_events(lat, 1e-3, 120);
        // Every flip toggles at most two events, so Var(k) <= 4 E[k].
        const double se = std::sqrt(4.0 * expect / static_cast<double>(shots));
        const bool mc_ok = std::abs(st.mean_k - expect) <= 4.0 * se;
        check(o, lat.num_stabilizers() == stabs[i] && st.dense_size == dense[i] && ratio_exact && mc_ok,
              "d=" + std::to_string(ds[i]) + " stabilizers=" + std::to_string(lat.num_stabilizers()) +
                  " dense=" + std::to_string(st.dense_size) + " mean_k=" + fmt("%.3f", st.mean_k) + " (expected " +
                  fmt("%.3f", expect) + ") p99_k=" + std::to_string(st.p99_k) + " ratio=" + fmt("%.5f", st.ratio));
    }
    return o;
}

// -- 3 ---------------------------------------------------------------------

Batch random_batch(size_t B, size_t k_max, Rng &rng, bool allow_empty) {
    Batch b;
    b.batch_size = B;
    b.k_max = k_max;
    b.features.assign(B * k_max * kNumFeatures, 0.0f);
    b.mask.assign(B * k_max, 0);
    b.labels.assign(B * 2, 0.0f);
    b.k.resize(B);
    b.k_original.resize(B);
    b.truncated.assign(B, 0);
    for (size_t r = 0; r < B; ++r) {
        const size_t k = allow_empty ? uniform_index(rng, k_max + 1) : 1 + uniform_index(rng, k_max);
        b.k[r] = b.k_original[r] = static_cast<uint32_t>(k);
        for (size_t j = 0; j < k; ++j) {
            b.mask[r * k_max + j] = 1;
            for (int f = 0; f < kNumFeatures; ++f) {
                b.features[(r * k_max + j) * kNumFeatures + static_cast<size_t>(f)] =
                    static_cast<float>(uniform01(rng));
            }
        }
        b.labels[r * 2] = static_cast<float>(rng() & 1u);
        b.labels[r * 2 + 1] = static_cast<float>(rng() & 1u);
    }
    return b;
}

Outcome gradient_correctness() {
    struct Case {
        int d_model, layers, heads;
        ReadoutKind readout;
    };
    Outcome o;
    const std::vector<Case> cases{{8, 1, 2, ReadoutKind::Mlp},
                                  {8, 2, 1, ReadoutKind::Mlp},
                                  {8, 2, 1, ReadoutKind::ResBlock},
                                  {6, 2, 2, ReadoutKind::ResBlock}};
    for (size_t i = 0; i < cases.size(); ++i) {
        const auto &cs = cases[i];
        auto p = init_params<double>(smd::testing::tiny_config(cs.d_model, cs.layers, cs.heads, cs.readout), 100 + i);
        jitter_params(p, 0.5, 200 + i);
        Rng rng(300 + i);
        const Batch b = random_batch(3, 5, rng, false);
        const auto r = gradcheck(p, b);
        check(o, r.max_rel_error <= 1e-4,
              std::string(to_string(cs.readout)) + "/" + std::to_string(cs.heads) + "h/L" +
                  std::to_string(cs.layers) + " max_rel=" + fmt("%.2e", r.max_rel_error) + " over " +
                  std::to_string(r.checked));
    }
    return o;
}

// -- 4 ---------------------------------------------------------------------

Outcome scan_oracle() {
    Outcome o;
    double worst = 0.0;
    Rng rng(4004);
    for (int i = 0; i < 100; ++i) {
        auto c = smd::testing::tiny_config(8, 1, 1, ReadoutKind::Mlp);
        c.d_state = 2 + static_cast<int>(uniform_index(rng, 7));
        c.d_conv = 1 + static_cast<int>(uniform_index(rng, 4));
        auto p = init_params<double>(c, 5000 + static_cast<uint64_t>(i));
        jitter_params(p, 0.3, 6000 + static_cast<uint64_t>(i));
        const Eigen::Index len = 1 + static_cast<Eigen::Index>(uniform_index(rng, 32));
        Mat<double> x(len, c.d_model);
        for (Eigen::Index j = 0; j < x.size(); ++j) {
            x.data()[j] = 2.0 * uniform01(rng) - 1.0;
        }
        const Mat<double> got = mamba_scan(x, p.layers[0], c, std::vector<uint8_t>(static_cast<size_t>(len), 1));
        worst = std::max(worst, smd::testing::relative_error(got, smd::testing::mamba_reference(x, p.layers[0], c)));
    }
    check(o, worst <= 1e-6, "100 cases, max relative error " + fmt("%.2e", worst));
    return o;
}

// -- 5 ---------------------------------------------------------------------

Outcome matching_exactness() {
    Outcome o;
    Rng rng(5005);
    for (int d : {3, 5}) {
        const Lattice lat(d);
        int agree = 0;
        for (int inst = 0; inst < 200; ++inst) {
            const CheckType type = inst % 2 ? CheckType::X : CheckType::Z;
            const NoiseConfig noise{NoiseKind::Phenomenological, 0.01, inst % 3 ? 0.02 : 0.0067, 4};
            auto g = build_matching_graph(lat, noise, type);
            if (inst % 4 == 3) {
                g = g.perturbed(0.3, rng);
            }
            const auto paths = smd::testing::dijkstra_paths(g);
            const auto defects = smd::testing::random_defects(g, uniform_index(rng, 9), 4, rng);
            const auto dp = decode_mwpm(defects, g);
            const auto bf = smd::testing::brute_force_matching(defects, g, paths);
            agree += dp.exact && std::abs(dp.total_weight - bf.weight) <= 1e-9 * (1.0 + bf.weight) &&
                     dp.prediction == bf.prediction;
        }
        check(o, agree == 200, "d=" + std::to_string(d) + " " + std::to_string(agree) + "/200 agree");
    }
    return o;
}

// -- 6 ---------------------------------------------------------------------

ModelConfig toy_model() {
    ModelConfig mc;
    mc.d_model = 64;
    mc.L = 2;
    mc.heads = 2;
    mc.readout = ReadoutKind::Mlp;
    mc.k_max = 32;
    return mc;
}

Outcome toy_training_gate() {
    TrainConfig tc;
    tc.lr = 1e-3;
    tc.lr_floor = 1e-5;
    tc.weight_decay = 0.0;
    tc.epochs = 4;
    tc.samples_per_epoch = 50000;
    tc.batch_size = 256;
    tc.train_p = {0.03, 0.05, 0.08, 0.10};
    tc.seed = 1;
    tc.val_shots = 20000;
    tc.val_p = 0.05;
    tc.val_seed = 0x5eed0001;
    tc.workers = 1;
    const Lattice lat(3);
    const auto t0 = std::chrono::steady_clock::now();
    const auto res = train(toy_model(), tc, lat, NoiseKind::CodeCapacity);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const NoiseConfig n{NoiseKind::CodeCapacity, 0.05, std::nullopt, 1};
    const NeuralDecoder smd_dec({res.best_params}, lat);
    const auto e_smd = estimate_ler(smd_dec, lat, n, 100000, kEvalSeed);
    const auto e_mwpm = estimate_ler(MwpmDecoder(lat, n), lat, n, 100000, kEvalSeed);
    Outcome o;
    const long samples = tc.samples_per_epoch * tc.epochs;
    check(o, samples <= 200000, std::to_string(samples) + " samples in " + fmt("%.0f", secs) + " s");
    check(o, e_smd.ler() <= 1.15 * e_mwpm.ler(),
          "smd ler=" + fmt("%.4g", e_smd.ler()) + " mwpm ler=" + fmt("%.4g", e_mwpm.ler()) + " ratio=" +
              fmt("%.3f", e_smd.ler() / e_mwpm.ler()));
    return o;
}

// -- 7 ---------------------------------------------------------------------

Outcome linear_cost_in_k() {
    ModelConfig mc = toy_model();
    mc.k_max = 256;
    const auto params = init_params<float>(mc, 7007);
    Outcome o;
    const size_t k_max = static_cast<size_t>(mc.k_max);
    // Workloads 0..2: k = 16, 64, 256 at d = 5. Workloads 3..5: k = 64 at d = 3, 5, 7.
    std::vector<Batch> work;
    for (size_t k : {16, 64, 256}) {
        work.push_back(synthetic_batch(Lattice(5), k, 8, k_max, 77));
    }
    for (int d : {3, 5, 7}) {
        work.push_back(synthetic_batch(Lattice(d), 64, 8, k_max, 78));
    }
    const auto t = time_forward(params, work, 15);
    const std::vector<double> ks{16, 64, 256};
    const std::vector<double> times{t[0], t[1], t[2]};
    const auto fit = fit_line(ks, times);
    check(o, fit.r2 >= 0.95,
          "d=5 forward us at k=16/64/256: " + fmt("%.0f", times[0]) + "/" + fmt("%.0f", times[1]) + "/" +
              fmt("%.0f", times[2]) + " R2=" + fmt("%.4f", fit.r2));
    const double lo = std::min({t[3], t[4], t[5]});
    const double hi = std::max({t[3], t[4], t[5]});
    check(o, hi <= 1.25 * lo,
          "k=64 us at d=3/5/7: " + fmt("%.0f", t[3]) + "/" + fmt("%.0f", t[4]) + "/" + fmt("%.0f", t[5]) +
              " spread=" + fmt("%.3f", hi / lo));
    return o;
}

// -- 8 ---------------------------------------------------------------------

std::vector<unsigned char> file_bytes(const std::filesystem::path &p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome contract_suite() {
    Outcome o;

    // Padding invariance: arbitrary padding values leave logits unchanged.
    {
        const auto p = init_params<float>(smd::testing::tiny_config(16, 2, 2, ReadoutKind::ResBlock), 8001);
        bool same = true;
        for (uint64_t t = 0; t < 50; ++t) {
            Rng a(t), junk(1000 + t);
            const Batch clean = random_batch(8, 16, a, true);
            Batch dirty = clean;
            for (size_t r = 0; r < dirty.batch_size; ++r) {
                for (size_t j = dirty.k[r] * kNumFeatures; j < dirty.k_max * kNumFeatures; ++j) {
                    dirty.features[r * dirty.k_max * kNumFeatures + j] = static_cast<float>(1e3 * uniform01(junk));
                }
            }
            same &= forward(p, clean).logits == forward(p, dirty).logits;
        }
        check(o, same, "padding invariance (exact, 50 batches)");
    }

    // Detection events and their cumulative XOR invert each other.
    {
        bool ok = true;
        for (int d : {3, 5}) {
            const Lattice lat(d);
            const NoiseConfig n{NoiseKind::Phenomenological, 0.05, std::nullopt, 6};
            for (uint64_t i = 0; i < 500; ++i) {
                const Shot s = sample_indexed(lat, n, 8002, i);
                const std::vector<uint8_t> ref(lat.num_stabilizers(), 0);
                ok &= detection_events(s.measurements, lat.num_stabilizers(), ref) == s.events;
                for (int st = 0; st < s.num_stabilizers; ++st) {
                    std::vector<uint8_t> ev, meas;
                    for (int t = 1; t <= s.num_records; ++t) {
                        ev.push_back(s.event(st, t));
                        meas.push_back(s.measurement(st, t));
                    }
                    ok &= cumulative_xor(ev) == meas;
                }
            }
        }
        check(o, ok, "detection/cumulative-XOR round trip (exact, 1000 shots)");
    }

    // Shots and training history are reproducible from seeds.
    {
        const Lattice lat(5);
        const NoiseConfig n{NoiseKind::Phenomenological, 0.02, std::nullopt, 5};
        const auto a = sample_range(lat, n, 8003, 0, 2000, 1);
        const auto b = sample_range(lat, n, 8003, 0, 2000, 1);
        const auto c = sample_range(lat, n, 8003, 0, 2000, 4);
        check(o, a == b && a == c, "shot reproducibility (2000 shots, 1 and 4 workers)");

        TrainConfig tc;
        tc.lr = 1e-3;
        tc.epochs = 2;
        tc.samples_per_epoch = 256;
        tc.batch_size = 64;
        tc.val_shots = 256;
        tc.mask_prob = 0.5;
        tc.workers = 1;
        auto mc = smd::testing::tiny_config(16, 2, 2, ReadoutKind::Mlp);
        mc.dropout = 0.1;
        const auto r1 = train(mc, tc, Lattice(3), NoiseKind::CodeCapacity);
        const auto r2 = train(mc, tc, Lattice(3), NoiseKind::CodeCapacity);
        bool same = r1.history.size() == r2.history.size() && !r1.history.empty();
        for (size_t i = 0; same && i < r1.history.size(); ++i) {
            const auto &x = r1.history[i];
            const auto &y = r2.history[i];
            same = x.step == y.step && x.epoch == y.epoch && x.lr == y.lr && x.loss == y.loss &&
                   (x.val_ler == y.val_ler || (std::isnan(x.val_ler) && std::isnan(y.val_ler)));
        }
        zip_tensors(const_cast<Parameters<float> &>(r1.params), r2.params,
                    [&](const std::string &, Mat<float> &x, const Mat<float> &y) { same &= x == y; });
        check(o, same, "training history and weights bit-exact (single worker)");
    }

    // Weights file round trip.
    {
        const auto dir = std::filesystem::temp_directory_path();
        bool ok = true;
        for (auto kind : {ReadoutKind::Mlp, ReadoutKind::ResBlock}) {
            const auto p = init_params<float>(smd::testing::tiny_config(16, 2, 2, kind), 8004);
            save_params(p, (dir / "smd_accept_a.smdw").string());
            save_params(load_params((dir / "smd_accept_a.smdw").string()), (dir / "smd_accept_b.smdw").string());
            ok &= file_bytes(dir / "smd_accept_a.smdw") == file_bytes(dir / "smd_accept_b.smdw");
        }
        std::filesystem::remove(dir / "smd_accept_a.smdw");
        std::filesystem::remove(dir / "smd_accept_b.smdw");
        check(o, ok, "weights round trip (bytewise)");
    }
    return o;
}

}  // namespace

// Optional arguments select criteria by number; default is all.
int main(int argc, char **argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"MWPM reference rates", mwpm_reference_rates},
        {"sparsity accounting", sparsity_accounting},
        {"gradient correctness", gradient_correctness},
        {"scan oracle equivalence", scan_oracle},
        {"matching exactness", matching_exactness},
        {"toy training gate", toy_training_gate},
        {"O(k) forward cost", linear_cost_in_k},
        {"contract suite", contract_suite},
    };
    std::vector<bool> selected(criteria.size(), argc <= 1);
    for (int a = 1; a < argc; ++a) {
        const long n = std::strtol(argv[a], nullptr, 10);
        if (n < 1 || n > static_cast<long>(criteria.size())) {
            std::fprintf(stderr, "unknown criterion '%s'\n", argv[a]);
            return 2;
        }
        selected[static_cast<size_t>(n - 1)] = true;
    }
    int failures = 0;
    for (size_t i = 0; i < criteria.size(); ++i) {
        if (!selected[i]) {
            continue;
        }
        Outcome o;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            o = criteria[i].second();
        } catch (const std::exception &e) {
            o.pass = false;
            o.detail = std::string("exception: ") + e.what();
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        failures += !o.pass;
        std::printf("%s %zu %s (%.1f s): %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), secs,
                    o.detail.c_str());
        std::fflush(stdout);
    }
    return failures == 0 ? 0 : 1;
}
