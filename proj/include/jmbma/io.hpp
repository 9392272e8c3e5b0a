#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "jmbma/bma.hpp"
#include "jmbma/data.hpp"
#include "jmbma/errors.hpp"
#include "jmbma/mcmc.hpp"
#include "jmbma/prediction.hpp"
#include "jmbma/text.hpp"
#include "vendor/json.hpp"

namespace jmbma {

inline constexpr const char* version_string = "0.1.0";

// ---------------------------------------------------------------------------
// Posterior draw artifacts
// ---------------------------------------------------------------------------

// One row per retained draw: the named parameter columns on the natural
// scale, then the per-subject random effects as b:<subject>:<effect>.
// All values are 17-significant-digit decimals, so a rerun with the same
// seed reproduces the file byte for byte.
inline void write_draws_csv(const std::string& path, const PosteriorDraws& draws) {
    std::ofstream out(path);
    if (!out) throw IngestError("cannot write '" + path + "'");
    for (size_t j = 0; j < draws.names.size(); ++j)
        out << (j ? "," : "") << draws.names[j];
    for (int i = 0; i < draws.n_subjects; ++i)
        for (int k = 0; k < draws.n_re; ++k) out << ",b:" << i << ":" << k;
    out << "\n";
    for (int l = 0; l < draws.n_draws(); ++l) {
        for (Eigen::Index j = 0; j < draws.theta.cols(); ++j)
            out << (j ? "," : "") << to_g17(draws.theta(l, j));
        for (Eigen::Index j = 0; j < draws.b.cols(); ++j) out << "," << to_g17(draws.b(l, j));
        out << "\n";
    }
}

inline nlohmann::json draws_meta_json(const PosteriorDraws& draws, std::uint64_t fingerprint) {
    nlohmann::json j;
    j["names"] = draws.names;
    j["n_draws"] = draws.n_draws();
    j["n_subjects"] = draws.n_subjects;
    j["n_re"] = draws.n_re;
    j["n_chains"] = draws.n_chains;
    j["seed"] = draws.seed;
    j["data_fingerprint"] = fingerprint;
    j["accept_rates"] = draws.accept_rates;
    return j;
}

// Reads a draws.csv + draws.json pair back into a PosteriorDraws (the
// log-posterior trace is not part of the artifact).
inline PosteriorDraws read_draws(const std::string& csv_path, const std::string& meta_path,
                                 std::uint64_t* fingerprint = nullptr) {
    std::ifstream mi(meta_path);
    if (!mi) throw IngestError("cannot open '" + meta_path + "'");
    nlohmann::json j;
    try {
        mi >> j;
    } catch (const std::exception& e) {
        throw IngestError("invalid JSON in '" + meta_path + "': " + e.what());
    }
    PosteriorDraws draws;
    try {
        draws.names = j.at("names").get<std::vector<std::string>>();
        draws.n_subjects = j.at("n_subjects").get<int>();
        draws.n_re = j.at("n_re").get<int>();
        draws.n_chains = j.at("n_chains").get<int>();
        draws.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("accept_rates"))
            draws.accept_rates = j.at("accept_rates").get<std::map<std::string, double>>();
        if (fingerprint) *fingerprint = j.at("data_fingerprint").get<std::uint64_t>();
    } catch (const nlohmann::json::exception& e) {
        throw IngestError(meta_path + ": " + e.what());
    }

    const auto lines = detail::read_lines(csv_path);
    if (lines.empty()) throw IngestError(csv_path + ": empty file");
    const auto header = split_csv_line(lines[0]);
    const size_t d = draws.names.size();
    const size_t width = d + static_cast<size_t>(draws.n_subjects) * draws.n_re;
    if (header.size() != width)
        throw IngestError(csv_path + ": header has " + std::to_string(header.size()) +
                          " columns, metadata promises " + std::to_string(width));
    for (size_t c = 0; c < d; ++c)
        if (header[c] != draws.names[c])
            throw IngestError(csv_path + ": column '" + header[c] + "' does not match name '" +
                              draws.names[c] + "'");
    std::vector<std::vector<double>> rows;
    for (size_t r = 1; r < lines.size(); ++r) {
        if (lines[r].empty() || lines[r] == "\r") continue;
        const auto cells = split_csv_line(lines[r]);
        if (cells.size() != width)
            throw IngestError(csv_path + ": row " + std::to_string(r + 1) + ": expected " +
                              std::to_string(width) + " fields, got " +
                              std::to_string(cells.size()));
        std::vector<double> vals(width);
        for (size_t c = 0; c < width; ++c)
            vals[c] = detail::numeric_cell(cells[c], "draw value", r + 1, csv_path);
        rows.push_back(std::move(vals));
    }
    if (rows.empty()) throw IngestError(csv_path + ": no draw rows");
    draws.theta.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
    draws.b.resize(static_cast<Eigen::Index>(rows.size()),
                   static_cast<Eigen::Index>(width - d));
    for (size_t r = 0; r < rows.size(); ++r) {
        for (size_t c = 0; c < d; ++c) draws.theta(r, c) = rows[r][c];
        for (size_t c = d; c < width; ++c) draws.b(r, c - d) = rows[r][c];
    }
    return draws;
}

// Human-facing posterior summary, rounded to 3 decimals.
inline void write_summary_csv(const std::string& path, const PosteriorDraws& draws) {
    std::ofstream out(path);
    if (!out) throw IngestError("cannot write '" + path + "'");
    out << "name,mean,sd,q025,q500,q975\n";
    char buf[64];
    for (size_t c = 0; c < draws.names.size(); ++c) {
        std::vector<double> v(draws.theta.col(c).data(),
                              draws.theta.col(c).data() + draws.n_draws());
        const double mean = draws.theta.col(c).mean();
        const double sd = draws.n_draws() > 1
                              ? std::sqrt((draws.theta.col(c).array() - mean).square().sum() /
                                          (draws.n_draws() - 1))
                              : 0.0;
        std::sort(v.begin(), v.end());
        out << draws.names[c];
        std::snprintf(buf, sizeof buf, ",%.3f,%.3f,%.3f,%.3f,%.3f", mean, sd,
                      quantile_type7(v, 0.025), quantile_type7(v, 0.5),
                      quantile_type7(v, 0.975));
        out << buf << "\n";
    }
}

// ---------------------------------------------------------------------------
// Prediction artifacts
// ---------------------------------------------------------------------------

inline void write_prediction_csv(const std::string& path, const DynamicPrediction& pred) {
    std::ofstream out(path);
    if (!out) throw IngestError("cannot write '" + path + "'");
    out << "horizon,point,lower,upper\n";
    for (size_t h = 0; h < pred.horizons.size(); ++h)
        out << to_g17(pred.horizons[h]) << "," << to_g17(pred.point[h]) << ","
            << to_g17(pred.lower[h]) << "," << to_g17(pred.upper[h]) << "\n";
}

inline nlohmann::json prediction_meta_json(const DynamicPrediction& pred) {
    nlohmann::json j;
    j["origin"] = pred.origin;
    j["kind"] = pred.kind == PredictionKind::survival ? "survival" : "longitudinal";
    j["n_mc"] = pred.n_mc;
    return j;
}

// ---------------------------------------------------------------------------
// Target subject ingestion
// ---------------------------------------------------------------------------

// The target CSV mirrors the longitudinal file: id,time,value plus the raw
// covariate columns the model was trained with (constant across rows).
// Covariates are encoded against the training dataset's factor levels and
// the longitudinal values pass through the model's transform.
inline TargetSubject load_target_csv(const std::string& path, const Dataset& train,
                                     const JointModelSpec& spec) {
    const auto lines = detail::read_lines(path);
    if (lines.empty()) throw IngestError(path + ": empty file");
    const auto header = split_csv_line(lines[0]);
    const int c_id = detail::required_column(header, "id", path);
    const int c_time = detail::required_column(header, "time", path);
    const int c_value = detail::required_column(header, "value", path);

    std::vector<std::vector<std::string>> rows;
    for (size_t r = 1; r < lines.size(); ++r) {
        if (lines[r].empty() || lines[r] == "\r") continue;
        const auto cells = split_csv_line(lines[r]);
        if (cells.size() != header.size())
            throw IngestError(path + ": row " + std::to_string(r + 1) + ": expected " +
                              std::to_string(header.size()) + " fields, got " +
                              std::to_string(cells.size()));
        rows.push_back(cells);
    }
    if (rows.empty()) throw IngestError(path + ": no measurement rows");
    for (size_t r = 1; r < rows.size(); ++r)
        for (size_t c = 0; c < header.size(); ++c)
            if (static_cast<int>(c) != c_time && static_cast<int>(c) != c_value &&
                rows[r][c] != rows[0][c])
                throw IngestError(path + ": column '" + header[c] +
                                  "' must be constant across the target's rows");

    TargetSubject target;
    target.id = rows[0][c_id];
    if (target.id.empty()) throw IngestError(path + ": empty id");

    struct Meas {
        double t, y;
    };
    std::vector<Meas> ms;
    for (size_t r = 0; r < rows.size(); ++r) {
        Meas m;
        m.t = detail::numeric_cell(rows[r][c_time], "time", r + 2, path);
        m.y = detail::numeric_cell(rows[r][c_value], "value", r + 2, path);
        if (spec.transform == "sqrt") {
            if (m.y < 0.0)
                throw IngestError(path + ": row " + std::to_string(r + 2) +
                                  ": negative value under square-root transform");
            m.y = std::sqrt(m.y);
        }
        ms.push_back(m);
    }
    std::sort(ms.begin(), ms.end(), [](const Meas& a, const Meas& b) { return a.t < b.t; });
    for (const Meas& m : ms) {
        target.times.push_back(m.t);
        target.y.push_back(m.y);
    }
    target.t = target.times.back();

    // encode covariates: factor columns by trained level, the rest numeric
    target.w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(train.covariate_names.size()));
    std::vector<bool> is_dummy(train.covariate_names.size(), false);
    for (const FactorEncoding& fe : train.factors) {
        for (int col : fe.dummy_cols) is_dummy[col] = true;
        const int c = detail::required_column(header, fe.column, path);
        const std::string& level = rows[0][c];
        int dummy = 0;
        bool found = false;
        for (size_t l = 0; l < fe.levels.size(); ++l) {
            if (static_cast<int>(l) == fe.reference) {
                found = found || fe.levels[l] == level;
                continue;
            }
            if (fe.levels[l] == level) {
                target.w[fe.dummy_cols[dummy]] = 1.0;
                found = true;
            }
            ++dummy;
        }
        if (!found)
            throw IngestError(path + ": column '" + fe.column + "': level '" + level +
                              "' was not seen in the training data");
    }
    for (size_t k = 0; k < train.covariate_names.size(); ++k) {
        if (is_dummy[k]) continue;
        const int c = detail::required_column(header, train.covariate_names[k], path);
        target.w[static_cast<Eigen::Index>(k)] =
            detail::numeric_cell(rows[0][c], "covariate " + train.covariate_names[k], 2, path);
    }
    target.validate();
    return target;
}

// ---------------------------------------------------------------------------
// Chain configuration
// ---------------------------------------------------------------------------

inline ChainConfig parse_chain_config(const nlohmann::json& j) {
    detail::check_keys(j,
                       {"n_iter", "n_burnin", "thin", "seed", "adapt_until", "n_chains",
                        "n_threads", "noncentered", "longitudinal_weight"},
                       "chain");
    ChainConfig cfg;
    cfg.n_iter = j.value("n_iter", cfg.n_iter);
    cfg.n_burnin = j.value("n_burnin", cfg.n_burnin);
    cfg.thin = j.value("thin", cfg.thin);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.adapt_until = j.value("adapt_until", cfg.adapt_until);
    cfg.n_chains = j.value("n_chains", cfg.n_chains);
    cfg.n_threads = j.value("n_threads", cfg.n_threads);
    cfg.noncentered = j.value("noncentered", cfg.noncentered);
    cfg.longitudinal_weight = j.value("longitudinal_weight", cfg.longitudinal_weight);
    cfg.validate();
    return cfg;
}

inline ChainConfig load_chain_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open chain config '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError("invalid JSON in '" + path + "': " + e.what());
    }
    return parse_chain_config(j);
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

// FNV-1a over the canonicalized (sorted-key, no-whitespace) config bytes.
inline std::uint64_t config_digest(const nlohmann::json& config) {
    const std::string bytes = config.dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

struct RunManifest {
    std::string command;
    nlohmann::json config;  // the effective run configuration
    std::uint64_t seed = 0;
    std::string started;
    std::string finished;
    std::vector<std::string> outputs;
};

namespace detail {

inline std::string iso_utc_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

}  // namespace detail

inline void write_manifest(const std::string& path, const RunManifest& m) {
    nlohmann::json j;
    j["command"] = m.command;
    j["config"] = m.config;
    j["config_digest"] = config_digest(m.config);
    j["seed"] = m.seed;
    j["versions"] = {{"jmbma", version_string},
                     {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                                   std::to_string(EIGEN_MAJOR_VERSION) + "." +
                                   std::to_string(EIGEN_MINOR_VERSION)},
                     {"compiler", __VERSION__}};
    j["started"] = m.started;
    j["finished"] = m.finished;
    j["outputs"] = m.outputs;
    std::ofstream out(path);
    if (!out) throw IngestError("cannot write '" + path + "'");
    out << j.dump(2) << "\n";
}

}  // namespace jmbma
