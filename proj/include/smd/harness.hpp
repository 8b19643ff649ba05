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
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "smd/defects.hpp"
#include "smd/errors.hpp"
#include "smd/lattice.hpp"
#include "smd/matching.hpp"
#include "smd/model.hpp"
#include "smd/noise.hpp"
#include "smd/parallel.hpp"
#include "smd/rng.hpp"
#include "smd/training.hpp"

#ifndef SMD_VERSION
#define SMD_VERSION "0.0.0"
#endif
#ifndef SMD_GIT_REVISION
#define SMD_GIT_REVISION "unknown"
#endif

namespace smd {

// ---------------------------------------------------------------------------
// Binomial confidence intervals

struct Interval {
    double lo = 0.0;
    double hi = 1.0;
    bool contains(double x) const { return lo <= x && x <= hi; }
    bool overlaps(const Interval &o) const { return lo <= o.hi && o.lo <= hi; }
};

inline constexpr double kZ95 = 1.959963984540054;

/// Wilson score interval for `failures` successes out of `shots` trials.
inline Interval wilson_interval(size_t failures, size_t shots, double z = kZ95) {
    if (shots == 0 || failures > shots) {
        throw DomainError("wilson_interval needs 0 <= failures <= shots and shots >= 1");
    }
    const double n = static_cast<double>(shots);
    const double phat = static_cast<double>(failures) / n;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / n;
    const double center = (phat + z2 / (2.0 * n)) / denom;
    const double half = z / denom * std::sqrt(phat * (1.0 - phat) / n + z2 / (4.0 * n * n));
    Interval ci{std::max(0.0, center - half), std::min(1.0, center + half)};
    // Clamp away rounding at the edges so the point estimate is always inside.
    ci.lo = std::min(ci.lo, phat);
    ci.hi = std::max(ci.hi, phat);
    return ci;
}

// ---------------------------------------------------------------------------
// Decoders

/// A decoder maps a block of shots to predicted observables. heads() == 1
/// means only lambda_Z is predicted and scored.
class Decoder {
  public:
    virtual ~Decoder() = default;
    virtual std::string name() const = 0;
    virtual int heads() const { return 2; }
    /// Fills out[i] for shots[i]; returns how many shots were truncated.
    virtual size_t decode(std::span<const Shot> shots, std::span<ShotPrediction> out) const = 0;
};

class MwpmDecoder : public Decoder {
  public:
    MwpmDecoder(const Lattice &lattice, const NoiseConfig &noise) : graphs_(build_matching_graphs(lattice, noise)) {}
    std::string name() const override { return "mwpm"; }
    size_t decode(std::span<const Shot> shots, std::span<ShotPrediction> out) const override {
        for (size_t i = 0; i < shots.size(); ++i) {
            out[i] = decode_shot_mwpm(shots[i], graphs_);
        }
        return 0;
    }

  private:
    MatchingGraphs graphs_;
};

/// Perturbed-weight majority vote, seeded per shot so results do not depend on
/// how shots are split across workers.
class LibraDecoder : public Decoder {
  public:
    LibraDecoder(const Lattice &lattice, const NoiseConfig &noise, int members, double scale)
        : graphs_(build_matching_graphs(lattice, noise)), members_(members), scale_(scale) {}
    std::string name() const override { return "libra"; }
    size_t decode(std::span<const Shot> shots, std::span<ShotPrediction> out) const override {
        for (size_t i = 0; i < shots.size(); ++i) {
            out[i] = decode_shot_libra(shots[i], graphs_, members_, scale_, shots[i].seed);
        }
        return 0;
    }

  private:
    MatchingGraphs graphs_;
    int members_;
    double scale_;
};

/// Mean of per-model logits, then the usual sigmoid and threshold. Models may
/// differ in width or depth but must agree on the number of heads; `names`
/// (optional) label the models in error messages.
inline Predictions ensemble_predict(std::span<const Parameters<float>> models, const Batch &batch,
                                    std::span<const std::string> names = {}) {
    if (models.empty()) {
        throw DomainError("ensemble_predict needs at least one model");
    }
    const auto label = [&](size_t i) { return i < names.size() ? names[i] : "#" + std::to_string(i); };
    const int heads = models[0].config.heads;
    Mat<double> sum = Mat<double>::Zero(static_cast<Eigen::Index>(batch.batch_size), heads);
    for (size_t m = 0; m < models.size(); ++m) {
        if (models[m].config.heads != heads) {
            throw DimensionError("checkpoint '" + label(m) + "' has " + std::to_string(models[m].config.heads) +
                                 " head(s), expected " + std::to_string(heads));
        }
        if (batch.k_max > static_cast<size_t>(models[m].config.k_max)) {
            throw DimensionError("checkpoint '" + label(m) + "' accepts at most " +
                                 std::to_string(models[m].config.k_max) + " tokens, batch has " +
                                 std::to_string(batch.k_max));
        }
        sum += forward_logits(pack_tokens<float>(batch), models[m]).template cast<double>();
    }
    if (models.size() == 1) {
        return predictions_from_logits(sum);
    }
    return predictions_from_logits(Mat<double>(sum / static_cast<double>(models.size())));
}

/// One model or a logit-averaging ensemble. Feature extraction happens inside
/// decode(), so timing it covers the full shot-to-prediction path.
class NeuralDecoder : public Decoder {
  public:
    NeuralDecoder(std::vector<Parameters<float>> models, const Lattice &lattice, std::vector<std::string> names = {})
        : models_(std::move(models)), names_(std::move(names)), lattice_(lattice) {
        if (models_.empty()) {
            throw DomainError("a neural decoder needs at least one model");
        }
        k_max_ = static_cast<size_t>(models_[0].config.k_max);
        for (const auto &m : models_) {
            k_max_ = std::min(k_max_, static_cast<size_t>(m.config.k_max));
        }
    }
    std::string name() const override { return models_.size() == 1 ? "smd" : "smd_ensemble"; }
    int heads() const override { return models_[0].config.heads; }
    size_t k_max() const { return k_max_; }
    size_t decode(std::span<const Shot> shots, std::span<ShotPrediction> out) const override {
        const Batch batch = make_batch(shots, lattice_, k_max_);
        const Predictions pred = ensemble_predict(models_, batch, names_);
        size_t truncated = 0;
        for (size_t i = 0; i < shots.size(); ++i) {
            out[i].obs_z = pred.predicted(i, 0);
            out[i].obs_x = pred.heads > 1 ? pred.predicted(i, 1) : 0;
            out[i].exact = true;
            truncated += batch.truncated[i];
        }
        return truncated;
    }

  private:
    std::vector<Parameters<float>> models_;
    std::vector<std::string> names_;
    Lattice lattice_;
    size_t k_max_ = 0;
};

/// Reads the true observables; a reference point for the failure accounting.
class OracleDecoder : public Decoder {
  public:
    std::string name() const override { return "oracle"; }
    size_t decode(std::span<const Shot> shots, std::span<ShotPrediction> out) const override {
        for (size_t i = 0; i < shots.size(); ++i) {
            out[i] = {shots[i].obs_z, shots[i].obs_x, true};
        }
        return 0;
    }
};

/// Fair coin per head, seeded from the shot's seed.
class CoinFlipDecoder : public Decoder {
  public:
    explicit CoinFlipDecoder(int heads = 2) : heads_(heads) {}
    std::string name() const override { return "coin_flip"; }
    int heads() const override { return heads_; }
    size_t decode(std::span<const Shot> shots, std::span<ShotPrediction> out) const override {
        for (size_t i = 0; i < shots.size(); ++i) {
            const uint64_t r = splitmix64(shots[i].seed ^ 0xC0FFEEULL);
            out[i] = {static_cast<uint8_t>(r & 1u), static_cast<uint8_t>((r >> 1) & 1u), true};
        }
        return 0;
    }

  private:
    int heads_;
};

// ---------------------------------------------------------------------------
// Experiment configuration

/// One evaluation sweep: every (distance, p) pair is a separate point. Field
/// names double as JSON keys.
struct ExperimentSpec {
    std::string id = "experiment";
    std::vector<int> distances{3};
    std::string noise = "code_capacity";
    std::vector<double> p{0.05};
    std::optional<double> p_meas;
    int rounds = 1;
    std::string decoder = "mwpm";  // mwpm | libra | smd | smd_ensemble | oracle | coin_flip
    std::vector<std::string> checkpoints;
    long shots = 100000;
    uint64_t seed = 0xE7A10001ULL;
    int libra_members = 5;
    double libra_scale = 0.1;
    int batch_size = 1024;
    int workers = 0;  // 0 = default_workers()
    std::string csv_out;
    std::string json_out;
    // Latency benchmark settings.
    std::vector<int> latency_batch_sizes{1, 64, 1024};
    long latency_shots = 4096;
    int latency_warmup = 2;
    int latency_repeats = 3;

    NoiseKind noise_kind() const { return parse_noise_kind(noise); }
    bool neural() const { return decoder == "smd" || decoder == "smd_ensemble"; }

    void validate() const {
        static const std::vector<std::string> known{"mwpm", "libra", "smd", "smd_ensemble", "oracle", "coin_flip"};
        if (std::find(known.begin(), known.end(), decoder) == known.end()) {
            throw DomainError("unknown decoder '" + decoder + "'");
        }
        noise_kind();
        if (shots < 1) {
            throw DomainError("an experiment needs at least one shot");
        }
        if (distances.empty() || p.empty()) {
            throw DomainError("an experiment needs at least one distance and one error rate");
        }
        for (int d : distances) {
            if (d < 3 || d % 2 == 0) {
                throw DomainError("distances must be odd and >= 3");
            }
        }
        for (double q : p) {
            if (!(q >= 0.0 && q < 1.0)) {
                throw DomainError("error rates must lie in [0, 1)");
            }
        }
        if (rounds < 1 || batch_size < 1 || libra_members < 1 || libra_scale < 0.0) {
            throw DomainError("rounds, batch_size and libra_members must be >= 1, libra_scale >= 0");
        }
        if (neural() && checkpoints.empty()) {
            throw DomainError("decoder '" + decoder + "' needs a nonempty checkpoint list");
        }
        if (decoder == "smd" && checkpoints.size() != 1) {
            throw DomainError("decoder 'smd' takes exactly one checkpoint; use smd_ensemble for several");
        }
        if (latency_shots < 1 || latency_warmup < 0 || latency_repeats < 1 || latency_batch_sizes.empty()) {
            throw DomainError("invalid latency settings");
        }
        for (int b : latency_batch_sizes) {
            if (b < 1) {
                throw DomainError("latency batch sizes must be >= 1");
            }
        }
    }

    NoiseConfig noise_config(double p_value) const {
        const NoiseKind k = noise_kind();
        return NoiseConfig{k, p_value, p_meas, k == NoiseKind::CodeCapacity ? 1 : rounds};
    }
};

inline void to_json(nlohmann::json &j, const ExperimentSpec &s) {
    j = nlohmann::json{{"id", s.id},
                       {"distances", s.distances},
                       {"noise", s.noise},
                       {"p", s.p},
                       {"rounds", s.rounds},
                       {"decoder", s.decoder},
                       {"checkpoints", s.checkpoints},
                       {"shots", s.shots},
                       {"seed", s.seed},
                       {"libra_members", s.libra_members},
                       {"libra_scale", s.libra_scale},
                       {"batch_size", s.batch_size},
                       {"workers", s.workers},
                       {"csv_out", s.csv_out},
                       {"json_out", s.json_out},
                       {"latency_batch_sizes", s.latency_batch_sizes},
                       {"latency_shots", s.latency_shots},
                       {"latency_warmup", s.latency_warmup},
                       {"latency_repeats", s.latency_repeats}};
    if (s.p_meas) {
        j["p_meas"] = *s.p_meas;
    }
}

inline void from_json(const nlohmann::json &j, ExperimentSpec &s) {
    const ExperimentSpec d;
    s.id = j.value("id", d.id);
    s.distances = j.value("distances", d.distances);
    s.noise = j.value("noise", d.noise);
    s.p = j.value("p", d.p);
    s.p_meas = j.contains("p_meas") && !j.at("p_meas").is_null() ? std::optional<double>(j.at("p_meas").get<double>())
                                                                  : std::nullopt;
    s.rounds = j.value("rounds", d.rounds);
    s.decoder = j.value("decoder", d.decoder);
    s.checkpoints = j.value("checkpoints", d.checkpoints);
    s.shots = j.value("shots", d.shots);
    s.seed = j.value("seed", d.seed);
    s.libra_members = j.value("libra_members", d.libra_members);
    s.libra_scale = j.value("libra_scale", d.libra_scale);
    s.batch_size = j.value("batch_size", d.batch_size);
    s.workers = j.value("workers", d.workers);
    s.csv_out = j.value("csv_out", d.csv_out);
    s.json_out = j.value("json_out", d.json_out);
    s.latency_batch_sizes = j.value("latency_batch_sizes", d.latency_batch_sizes);
    s.latency_shots = j.value("latency_shots", d.latency_shots);
    s.latency_warmup = j.value("latency_warmup", d.latency_warmup);
    s.latency_repeats = j.value("latency_repeats", d.latency_repeats);
    s.validate();
}

/// Evaluation shots come from the stream seeded by `eval_seed`; a checkpoint
/// whose training or validation stream used the same master seed would be
/// scored on data it has seen.
inline void check_seed_disjoint(uint64_t eval_seed, const nlohmann::json &train_config, const std::string &checkpoint) {
    if (train_config.is_null() || train_config.empty()) {
        return;
    }
    const TrainConfig tc = train_config.get<TrainConfig>();
    if (eval_seed == tc.seed || (tc.val_shots > 0 && eval_seed == tc.val_seed)) {
        throw DomainError("evaluation seed " + std::to_string(eval_seed) + " overlaps the training streams of '" +
                          checkpoint + "'");
    }
}

struct LoadedCheckpoints {
    std::vector<Parameters<float>> models;
    std::vector<std::string> names;
};

/// Loads every checkpoint of a spec, enforcing seed disjointness and a shared
/// head count; errors name the offending file.
inline LoadedCheckpoints load_checkpoints(const ExperimentSpec &spec) {
    LoadedCheckpoints out;
    for (const auto &path : spec.checkpoints) {
        LoadedWeights w;
        try {
            w = load_weights(path);
        } catch (const ShapeMismatchError &) {
            throw;
        } catch (const std::exception &e) {
            throw FormatError("cannot load checkpoint '" + path + "': " + e.what());
        }
        check_seed_disjoint(spec.seed, w.train_config, path);
        if (!out.models.empty() && w.params.config.heads != out.models[0].config.heads) {
            throw DimensionError("checkpoint '" + path + "' has " + std::to_string(w.params.config.heads) +
                                 " head(s), expected " + std::to_string(out.models[0].config.heads));
        }
        out.models.push_back(std::move(w.params));
        out.names.push_back(path);
    }
    return out;
}

inline std::unique_ptr<Decoder> make_decoder(const ExperimentSpec &spec, const Lattice &lattice,
                                             const NoiseConfig &noise, const LoadedCheckpoints *checkpoints = nullptr) {
    if (spec.decoder == "mwpm") {
        return std::make_unique<MwpmDecoder>(lattice, noise);
    }
    if (spec.decoder == "libra") {
        return std::make_unique<LibraDecoder>(lattice, noise, spec.libra_members, spec.libra_scale);
    }
    if (spec.decoder == "oracle") {
        return std::make_unique<OracleDecoder>();
    }
    if (spec.decoder == "coin_flip") {
        return std::make_unique<CoinFlipDecoder>();
    }
    if (!checkpoints || checkpoints->models.empty()) {
        throw DomainError("decoder '" + spec.decoder + "' needs loaded checkpoints");
    }
    return std::make_unique<NeuralDecoder>(checkpoints->models, lattice, checkpoints->names);
}

// ---------------------------------------------------------------------------
// Logical error rate estimation

struct LerEstimate {
    size_t shots = 0;
    size_t failures = 0;  // either scored head wrong
    int heads = 2;
    size_t head_failures[2] = {0, 0};
    size_t truncated = 0;
    double mean_k = 0.0;
    double decode_seconds = 0.0;  // summed over workers, sampling excluded

    double ler() const { return static_cast<double>(failures) / static_cast<double>(shots); }
    Interval ci() const { return wilson_interval(failures, shots); }
    double head_ler(int h) const { return static_cast<double>(head_failures[h]) / static_cast<double>(shots); }
    double truncated_fraction() const { return static_cast<double>(truncated) / static_cast<double>(shots); }
    double us_per_shot() const { return 1e6 * decode_seconds / static_cast<double>(shots); }
};

/// Samples shots (seed, first) .. (seed, first + n - 1), decodes them in blocks
/// of batch_size and counts failures. Shots are split across workers in
/// contiguous chunks and the integer counts summed, so the result does not
/// depend on the worker count.
inline LerEstimate estimate_ler(const Decoder &decoder, const Lattice &lattice, const NoiseConfig &noise, size_t n,
                                uint64_t seed, int workers = 0, size_t batch_size = 1024, uint64_t first = 0) {
    if (n == 0 || batch_size == 0) {
        throw DomainError("estimate_ler needs n >= 1 and batch_size >= 1");
    }
    noise.validate();
    const int w = workers > 0 ? workers : default_workers();
    const size_t chunks = chunk_count(n, w);
    std::vector<LerEstimate> partial(chunks);
    std::vector<double> k_sum(chunks, 0.0);
    parallel_chunks(n, w, [&](size_t c, size_t begin, size_t end) {
        LerEstimate &acc = partial[c];
        std::vector<Shot> shots;
        std::vector<ShotPrediction> pred;
        for (size_t start = begin; start < end; start += batch_size) {
            const size_t m = std::min(end, start + batch_size) - start;
            shots.resize(m);
            for (size_t i = 0; i < m; ++i) {
                shots[i] = sample_indexed(lattice, noise, seed, first + start + i);
                k_sum[c] += static_cast<double>(shots[i].event_count());
            }
            pred.assign(m, ShotPrediction{});
            const auto t0 = std::chrono::steady_clock::now();
            acc.truncated += decoder.decode(shots, pred);
            acc.decode_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            for (size_t i = 0; i < m; ++i) {
                const bool wz = pred[i].obs_z != shots[i].obs_z;
                const bool wx = decoder.heads() > 1 && pred[i].obs_x != shots[i].obs_x;
                acc.head_failures[0] += wz;
                acc.head_failures[1] += wx;
                acc.failures += wz || wx;
            }
            acc.shots += m;
        }
    });
    LerEstimate total;
    total.heads = decoder.heads();
    double ks = 0.0;
    for (size_t c = 0; c < chunks; ++c) {
        total.shots += partial[c].shots;
        total.failures += partial[c].failures;
        total.head_failures[0] += partial[c].head_failures[0];
        total.head_failures[1] += partial[c].head_failures[1];
        total.truncated += partial[c].truncated;
        total.decode_seconds += partial[c].decode_seconds;
        ks += k_sum[c];
    }
    total.mean_k = ks / static_cast<double>(total.shots);
    return total;
}

/// One CSV row of an experiment.
struct ResultRow {
    std::string experiment_id;
    int d = 0;
    int rounds = 1;
    double p = 0.0;
    std::string decoder;
    LerEstimate estimate;
};

/// Runs every (distance, p) point of a spec.
inline std::vector<ResultRow> run_experiment(const ExperimentSpec &spec) {
    spec.validate();
    LoadedCheckpoints ckpt;
    if (spec.neural()) {
        ckpt = load_checkpoints(spec);
    }
    std::vector<ResultRow> rows;
    for (int d : spec.distances) {
        const Lattice lattice(d);
        for (double p : spec.p) {
            const NoiseConfig noise = spec.noise_config(p);
            const auto decoder = make_decoder(spec, lattice, noise, &ckpt);
            ResultRow row{spec.id, d, noise.effective_rounds(), p, spec.decoder, {}};
            row.estimate = estimate_ler(*decoder, lattice, noise, static_cast<size_t>(spec.shots), spec.seed,
                                        spec.workers, static_cast<size_t>(spec.batch_size));
            rows.push_back(row);
        }
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Reports

inline constexpr const char *kReportHeader =
    "experiment_id,d,R,p,decoder,N,failures,ler,ci_lo,ci_hi,mean_k,time_us_per_shot,truncated_frac";

inline std::string format_row(const ResultRow &r) {
    const auto &e = r.estimate;
    const Interval ci = e.ci();
    char buf[512];
    std::snprintf(buf, sizeof buf, "%s,%d,%d,%.9g,%s,%zu,%zu,%.9g,%.9g,%.9g,%.9g,%.6g,%.9g", r.experiment_id.c_str(),
                  r.d, r.rounds, r.p, r.decoder.c_str(), e.shots, e.failures, e.ler(), ci.lo, ci.hi, e.mean_k,
                  e.us_per_shot(), e.truncated_fraction());
    return buf;
}

inline std::string utc_timestamp() {
    const std::time_t now = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&now, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Writes the CSV and, when json_path is nonempty, a sidecar holding the spec,
/// version stamp, timestamp and per-head failure counts.
inline void write_report(const std::vector<ResultRow> &rows, const std::string &csv_path,
                         const std::string &json_path = "", const nlohmann::json &spec = nullptr) {
    if (rows.empty()) {
        throw DomainError("cannot write a report without results");
    }
    std::ofstream out(csv_path);
    if (!out) {
        throw std::runtime_error("cannot open '" + csv_path + "' for writing");
    }
    out << kReportHeader << "\n";
    for (const auto &r : rows) {
        out << format_row(r) << "\n";
    }
    if (!out) {
        throw std::runtime_error("failed writing '" + csv_path + "'");
    }
    if (json_path.empty()) {
        return;
    }
    nlohmann::json side;
    side["spec"] = spec;
    side["version"] = SMD_VERSION;
    side["git_revision"] = SMD_GIT_REVISION;
    side["timestamp"] = utc_timestamp();
    side["csv"] = csv_path;
    nlohmann::json points = nlohmann::json::array();
    for (const auto &r : rows) {
        const auto &e = r.estimate;
        nlohmann::json pt{{"d", r.d},
                          {"R", r.rounds},
                          {"p", r.p},
                          {"decoder", r.decoder},
                          {"shots", e.shots},
                          {"failures", e.failures},
                          {"heads", e.heads},
                          {"head_failures", {e.head_failures[0], e.head_failures[1]}},
                          {"truncated", e.truncated}};
        points.push_back(pt);
    }
    side["points"] = points;
    std::ofstream js(json_path);
    if (!js) {
        throw std::runtime_error("cannot open '" + json_path + "' for writing");
    }
    js << side.dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// Latency and scaling

struct LatencyReport {
    std::string decoder;
    size_t batch_size = 0;
    int workers = 1;
    int d = 0;
    int rounds = 1;
    double mean_k = 0.0;
    size_t samples = 0;  // timed calls
    double mean_us = 0.0;
    double p50_us = 0.0;
    double p99_us = 0.0;
};

/// Per-shot decode time at each batch size on a fixed list of shots, single
/// threaded. Each timed call decodes one batch (the last may be short) and
/// contributes call_time / batch_shots to the distribution; `warmup` untimed
/// passes over the first batch precede timing.
inline std::vector<LatencyReport> measure_latency(const Decoder &decoder, std::span<const Shot> shots,
                                                  std::span<const int> batch_sizes, int warmup = 2, int repeats = 3) {
    if (shots.empty() || batch_sizes.empty() || repeats < 1) {
        throw DomainError("measure_latency needs shots, batch sizes and repeats >= 1");
    }
    double ks = 0.0;
    for (const auto &s : shots) {
        ks += static_cast<double>(s.event_count());
    }
    std::vector<LatencyReport> reports;
    std::vector<ShotPrediction> pred;
    for (int bs : batch_sizes) {
        if (bs < 1) {
            throw DomainError("batch sizes must be >= 1");
        }
        const size_t b = std::min(static_cast<size_t>(bs), shots.size());
        pred.assign(b, ShotPrediction{});
        for (int w = 0; w < warmup; ++w) {
            decoder.decode(shots.subspan(0, b), pred);
        }
        std::vector<double> per_shot;
        for (int r = 0; r < repeats; ++r) {
            for (size_t start = 0; start < shots.size(); start += b) {
                const size_t m = std::min(shots.size(), start + b) - start;
                const auto t0 = std::chrono::steady_clock::now();
                decoder.decode(shots.subspan(start, m), std::span<ShotPrediction>(pred).subspan(0, m));
                const double us = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
                per_shot.push_back(us / static_cast<double>(m));
            }
        }
        LatencyReport rep;
        rep.decoder = decoder.name();
        rep.batch_size = static_cast<size_t>(bs);
        rep.d = shots[0].distance;
        rep.rounds = shots[0].rounds;
        rep.mean_k = ks / static_cast<double>(shots.size());
        rep.samples = per_shot.size();
        rep.mean_us = std::accumulate(per_shot.begin(), per_shot.end(), 0.0) / static_cast<double>(per_shot.size());
        std::sort(per_shot.begin(), per_shot.end());
        const auto pct = [&](double q) {
            const auto rank = static_cast<size_t>(std::ceil(q * static_cast<double>(per_shot.size())));
            return per_shot[std::clamp<size_t>(rank, 1, per_shot.size()) - 1];
        };
        rep.p50_us = pct(0.5);
        rep.p99_us = pct(0.99);
        reports.push_back(rep);
    }
    return reports;
}

/// A shot with exactly k detection events at distinct random (stabilizer,
/// record) positions of a distance-d lattice. Measurements are the running
/// XOR of the events, so the shot is internally consistent. The record count
/// is the smallest that keeps the event density at or below one half.
inline Shot synthetic_shot(const Lattice &lattice, size_t k, uint64_t seed) {
    const size_t nstab = lattice.num_stabilizers();
    const size_t records = std::max<size_t>(1, (2 * k + nstab - 1) / nstab);
    Shot shot;
    shot.distance = lattice.distance();
    shot.kind = records == 1 ? NoiseKind::CodeCapacity : NoiseKind::Phenomenological;
    shot.rounds = records == 1 ? 1 : static_cast<int>(records - 1);
    shot.num_records = static_cast<int>(records);
    shot.num_stabilizers = static_cast<int>(nstab);
    shot.seed = seed;
    const size_t cells = nstab * records;
    if (k > cells) {
        throw DomainError("cannot place " + std::to_string(k) + " events in " + std::to_string(cells) + " cells");
    }
    std::vector<size_t> idx(cells);
    std::iota(idx.begin(), idx.end(), size_t{0});
    Rng rng(seed);
    shot.events.assign(cells, 0);
    for (size_t i = 0; i < k; ++i) {
        std::swap(idx[i], idx[i + uniform_index(rng, cells - i)]);
        shot.events[idx[i]] = 1;
    }
    shot.measurements.assign(cells, 0);
    for (size_t s = 0; s < nstab; ++s) {
        uint8_t acc = 0;
        for (size_t t = 0; t < records; ++t) {
            acc ^= shot.events[t * nstab + s];
            shot.measurements[t * nstab + s] = acc;
        }
    }
    return shot;
}

/// `batch` synthetic shots with k events each, extracted and padded.
inline Batch synthetic_batch(const Lattice &lattice, size_t k, size_t batch, size_t k_max, uint64_t seed) {
    std::vector<Shot> shots;
    for (size_t i = 0; i < batch; ++i) {
        shots.push_back(synthetic_shot(lattice, k, stream_seed(seed, i)));
    }
    return make_batch(shots, lattice, k_max);
}

/// Forward-pass wall time in microseconds for each batch (extraction
/// excluded). Every round times each batch once, so slow drift in machine
/// load hits all batches alike; the reported figure is the per-batch minimum
/// over `rounds`, the usual estimator of uncontended cost.
inline std::vector<double> time_forward(const Parameters<float> &params, std::span<const Batch> batches,
                                        int rounds) {
    if (rounds < 1) {
        throw DomainError("time_forward needs rounds >= 1");
    }
    std::vector<double> best(batches.size(), std::numeric_limits<double>::infinity());
    for (const auto &b : batches) {
        forward(params, b);  // warmup
    }
    for (int r = 0; r < rounds; ++r) {
        for (size_t i = 0; i < batches.size(); ++i) {
            const auto t0 = std::chrono::steady_clock::now();
            const auto pred = forward(params, batches[i]);
            const double us = std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count();
            if (pred.logits.empty()) {
                throw std::logic_error("empty forward output");
            }
            best[i] = std::min(best[i], us);
        }
    }
    return best;
}

struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    double r2 = 0.0;
};

/// Ordinary least squares y = slope x + intercept with the coefficient of
/// determination.
inline LinearFit fit_line(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size() || x.size() < 2) {
        throw DimensionError("fit_line needs two equal-length samples of size >= 2");
    }
    const double n = static_cast<double>(x.size());
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxx = 0.0, sxy = 0.0, syy = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        sxx += (x[i] - mx) * (x[i] - mx);
        sxy += (x[i] - mx) * (y[i] - my);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0) {
        throw DomainError("fit_line needs at least two distinct x values");
    }
    LinearFit f;
    f.slope = sxy / sxx;
    f.intercept = my - f.slope * mx;
    f.r2 = syy == 0.0 ? 1.0 : (sxy * sxy) / (sxx * syy);
    return f;
}

// ---------------------------------------------------------------------------
// Sparsity

/// Defect-count statistics of n shots drawn from stream `seed`.
inline SparsityStats measure_sparsity(const Lattice &lattice, const NoiseConfig &noise, size_t n, uint64_t seed,
                                      int workers = 0) {
    if (n == 0) {
        throw DomainError("measure_sparsity needs at least one shot");
    }
    const int w = workers > 0 ? workers : default_workers();
    std::vector<size_t> counts(n);
    parallel_chunks(n, w, [&](size_t, size_t begin, size_t end) {
        for (size_t i = begin; i < end; ++i) {
            counts[i] = sample_indexed(lattice, noise, seed, i).event_count();
        }
    });
    return sparsity_from_counts(counts, lattice.distance(), noise.effective_rounds());
}

}  // namespace smd
