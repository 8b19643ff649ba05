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

// Command-line front end: sampling, extraction, training, evaluation and
// benchmarks.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "smd/harness.hpp"

using namespace smd;

namespace {

nlohmann::json read_json(const std::string &path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open config '" + path + "'");
    }
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception &e) {
        throw FormatError("config '" + path + "': " + e.what());
    }
}

struct SampleArgs {
    int d = 3;
    std::string noise = "code_capacity";
    double p = 0.01;
    double p_meas = -1.0;
    int rounds = 1;
    long n = 1000;
    uint64_t seed = 1;
    std::string out;

    NoiseConfig config() const {
        NoiseConfig c{parse_noise_kind(noise), p, std::nullopt, rounds};
        if (p_meas >= 0.0) {
            c.p_meas = p_meas;
        }
        if (c.kind == NoiseKind::CodeCapacity) {
            c.rounds = 1;
        }
        c.validate();
        return c;
    }
};

void add_noise_options(CLI::App *cmd, SampleArgs &a) {
    cmd->add_option("--d", a.d, "code distance (odd, >= 3)")->required();
    cmd->add_option("--noise", a.noise, "code_capacity or phenomenological");
    cmd->add_option("--p", a.p, "physical error rate");
    cmd->add_option("--p-meas", a.p_meas, "measurement flip rate (default 2p/3)");
    cmd->add_option("--rounds", a.rounds, "noisy measurement rounds (phenomenological)");
    cmd->add_option("--n", a.n, "number of shots");
    cmd->add_option("--seed", a.seed, "master seed");
}

int run_sample(const SampleArgs &a) {
    const Lattice lat(a.d);
    const NoiseConfig noise = a.config();
    ShotWriter writer(a.out);
    const size_t block = 4096;
    for (size_t start = 0; start < static_cast<size_t>(a.n); start += block) {
        const size_t m = std::min(static_cast<size_t>(a.n) - start, block);
        for (const auto &s : sample_range(lat, noise, a.seed, start, m, default_workers())) {
            writer.write(s);
        }
    }
    std::cout << "wrote " << a.n << " shots to " << a.out << "\n";
    return 0;
}

int run_extract(const std::string &in, long k_max, const std::string &out) {
    const auto shots = read_shots(in);
    if (shots.empty()) {
        throw DomainError("'" + in + "' holds no shots");
    }
    const Lattice lat(shots[0].distance);
    size_t km = 0;
    if (k_max > 0) {
        km = static_cast<size_t>(k_max);
    } else {
        const auto st = sparsity_stats(shots, lat, shots[0].rounds);
        km = default_k_max(st.p99_k);
    }
    const Batch b = make_batch(shots, lat, km);
    write_batch(out, b);
    std::cout << "wrote batch of " << b.batch_size << " rows, k_max " << km << ", " << b.truncated_count()
              << " truncated, to " << out << "\n";
    return 0;
}

// Training job file: {"model": ModelConfig, "train": TrainConfig, "distance",
// "noise", "weights_out", "history_out"}.
int run_train(const std::string &config_path) {
    const auto j = read_json(config_path);
    const ModelConfig mc = j.value("model", nlohmann::json::object()).get<ModelConfig>();
    const TrainConfig tc = j.value("train", nlohmann::json::object()).get<TrainConfig>();
    const int d = j.value("distance", 3);
    const NoiseKind kind = parse_noise_kind(j.value("noise", std::string("code_capacity")));
    const std::string weights_out = j.value("weights_out", std::string("model.smdw"));
    const std::string history_out = j.value("history_out", std::string());
    mc.validate();
    std::cout << "training " << parameter_count(mc) << " parameters on d=" << d << " " << to_string(kind) << ", "
              << tc.total_steps() << " steps\n";
    const auto res = train(mc, tc, Lattice(d), kind, &std::cout);
    save_params(res.best_params, weights_out, nlohmann::json(tc));
    if (!history_out.empty()) {
        write_history_csv(history_out, res.history);
    }
    std::cout << "saved " << weights_out;
    if (!std::isnan(res.best_val_ler)) {
        std::cout << " (validation LER " << res.best_val_ler << ")";
    }
    std::cout << "\n";
    return 0;
}

int run_eval(const std::string &config_path) {
    const auto spec = read_json(config_path).get<ExperimentSpec>();
    const auto rows = run_experiment(spec);
    std::cout << kReportHeader << "\n";
    for (const auto &r : rows) {
        std::cout << format_row(r) << "\n";
    }
    if (!spec.csv_out.empty()) {
        write_report(rows, spec.csv_out, spec.json_out, spec);
    }
    return 0;
}

int run_bench_latency(const std::string &config_path) {
    const auto spec = read_json(config_path).get<ExperimentSpec>();
    LoadedCheckpoints ckpt;
    if (spec.neural()) {
        ckpt = load_checkpoints(spec);
    }
    std::ostringstream csv;
    csv << "decoder,d,R,p,batch_size,workers,mean_k,samples,mean_us,p50_us,p99_us\n";
    for (int d : spec.distances) {
        const Lattice lat(d);
        for (double p : spec.p) {
            const NoiseConfig noise = spec.noise_config(p);
            const auto decoder = make_decoder(spec, lat, noise, &ckpt);
            const auto shots = sample_range(lat, noise, spec.seed, 0, static_cast<size_t>(spec.latency_shots), 1);
            for (const auto &r : measure_latency(*decoder, shots, spec.latency_batch_sizes, spec.latency_warmup,
                                                 spec.latency_repeats)) {
                char buf[256];
                std::snprintf(buf, sizeof buf, "%s,%d,%d,%.9g,%zu,%d,%.6g,%zu,%.6g,%.6g,%.6g\n", r.decoder.c_str(),
                              r.d, noise.effective_rounds(), p, r.batch_size, r.workers, r.mean_k, r.samples,
                              r.mean_us, r.p50_us, r.p99_us);
                csv << buf;
            }
        }
    }
    std::cout << csv.str();
    if (!spec.csv_out.empty()) {
        std::ofstream out(spec.csv_out);
        if (!out) {
            throw std::runtime_error("cannot open '" + spec.csv_out + "' for writing");
        }
        out << csv.str();
    }
    return 0;
}

// Gradient check file: {"model": ModelConfig, "batch_size", "k_max", "seed",
// "jitter", "tolerance"}.
int run_gradcheck(const std::string &config_path) {
    const auto j = read_json(config_path);
    const ModelConfig mc = j.value("model", nlohmann::json::object()).get<ModelConfig>();
    const size_t batch = j.value("batch_size", 3u);
    const size_t k_max = j.value("k_max", 5u);
    const uint64_t seed = j.value("seed", uint64_t{1});
    const double jitter = j.value("jitter", 0.5);
    const double tolerance = j.value("tolerance", 1e-4);
    mc.validate();
    if (k_max > static_cast<size_t>(mc.k_max)) {
        throw DomainError("gradcheck k_max exceeds the model's k_max");
    }
    auto params = init_params<double>(mc, seed);
    jitter_params(params, jitter, splitmix64(seed));
    // Random batch of features in [0, 1) and random labels.
    Rng rng(splitmix64(seed + 1));
    Batch b;
    b.batch_size = batch;
    b.k_max = k_max;
    b.features.assign(batch * k_max * kNumFeatures, 0.0f);
    b.mask.assign(batch * k_max, 0);
    b.labels.assign(batch * 2, 0.0f);
    b.truncated.assign(batch, 0);
    for (size_t r = 0; r < batch; ++r) {
        const size_t k = 1 + uniform_index(rng, k_max);
        b.k.push_back(static_cast<uint32_t>(k));
        b.k_original.push_back(static_cast<uint32_t>(k));
        for (size_t t = 0; t < k; ++t) {
            b.mask[r * k_max + t] = 1;
            for (size_t f = 0; f < static_cast<size_t>(kNumFeatures); ++f) {
                b.features[(r * k_max + t) * kNumFeatures + f] = static_cast<float>(uniform01(rng));
            }
        }
        b.labels[2 * r] = static_cast<float>(rng() & 1u);
        b.labels[2 * r + 1] = static_cast<float>(rng() & 1u);
    }
    const auto res = gradcheck(params, b);
    const bool ok = res.max_rel_error <= tolerance;
    std::cout << (ok ? "ok" : "FAILED") << ": max relative error " << res.max_rel_error << " (tensor "
              << res.worst_tensor << ") over " << res.checked << " entries\n";
    return ok ? 0 : 1;
}

int run_sparsity(const SampleArgs &a) {
    const Lattice lat(a.d);
    const NoiseConfig noise = a.config();
    const auto st = measure_sparsity(lat, noise, static_cast<size_t>(a.n), a.seed);
    std::cout << "d,R,shots,stabilizers,dense_size,mean_k,p99_k,max_k,ratio\n"
              << st.distance << "," << st.rounds << "," << st.shots << "," << lat.num_stabilizers() << ","
              << st.dense_size << "," << st.mean_k << "," << st.p99_k << "," << st.max_k << "," << st.ratio << "\n";
    return 0;
}

}  // namespace

int main(int argc, char **argv) {
    CLI::App app{"Surface-code syndrome sampling, matching and sparse state-space decoding"};
    app.require_subcommand(1);

    int dump_d = 3;
    auto *dump = app.add_subcommand("lattice-dump", "print the lattice layout and stabilizer table");
    dump->add_option("--d", dump_d, "code distance")->required();

    SampleArgs sample_args;
    auto *sample = app.add_subcommand("sample", "sample shots to a binary shot file");
    add_noise_options(sample, sample_args);
    sample->add_option("--out", sample_args.out, "output shot file")->required();

    std::string extract_in, extract_out;
    long extract_kmax = 0;
    auto *extract = app.add_subcommand("extract", "turn a shot file into a padded batch file");
    extract->add_option("--in", extract_in, "input shot file")->required();
    extract->add_option("--kmax", extract_kmax, "sequence length (default 1.5 x p99 defect count)");
    extract->add_option("--out", extract_out, "output batch file")->required();

    std::string config;
    auto *train_cmd = app.add_subcommand("train", "train a decoder from a job file");
    train_cmd->add_option("--config", config, "training job JSON")->required();
    auto *eval = app.add_subcommand("eval", "estimate logical error rates for an experiment");
    eval->add_option("--config", config, "experiment JSON")->required();
    auto *bench = app.add_subcommand("bench-latency", "per-shot decoding latency");
    bench->add_option("--config", config, "experiment JSON")->required();
    auto *grad = app.add_subcommand("gradcheck", "compare gradients with finite differences");
    grad->add_option("--config", config, "gradient check JSON")->required();

    SampleArgs sparsity_args;
    sparsity_args.n = 10000;
    auto *sparsity = app.add_subcommand("sparsity", "defect-count statistics");
    add_noise_options(sparsity, sparsity_args);

    CLI11_PARSE(app, argc, argv);

    try {
        if (*dump) {
            std::cout << Lattice(dump_d).dump();
            return 0;
        }
        if (*sample) {
            return run_sample(sample_args);
        }
        if (*extract) {
            return run_extract(extract_in, extract_kmax, extract_out);
        }
        if (*train_cmd) {
            return run_train(config);
        }
        if (*eval) {
            return run_eval(config);
        }
        if (*bench) {
            return run_bench_latency(config);
        }
        if (*grad) {
            return run_gradcheck(config);
        }
        if (*sparsity) {
            return run_sparsity(sparsity_args);
        }
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
