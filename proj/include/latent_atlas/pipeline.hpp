#ifndef LATENT_ATLAS_PIPELINE_HPP
#define LATENT_ATLAS_PIPELINE_HPP

#include "core.hpp"
#include "dataio.hpp"
#include "dls.hpp"
#include "embedder.hpp"
#include "predictor.hpp"
#include "profiler.hpp"
#include "render.hpp"
#include "statmap.hpp"

#include <json.hpp>

#include <chrono>
#include <cmath>
#include <ctime>
#include <functional>
#include <initializer_list>
#include <map>
#include <optional>

/**
 * @file pipeline.hpp
 *
 * @brief Config-driven orchestration. Each stage reads the artifacts of
 * earlier stages from the output directory and writes its own, so running
 * the stages one by one produces the same files as a monolithic run.
 *
 * Output layout (relative to the output directory):
 *
 *     ingest/split.json, ingest/scaling.json
 *     embed/model.json, embed/embed.csv, embed/statistics.csv, embed/predict.csv
 *     dls/dls.json, dls/occupancy.pgm, dls/occupied.csv
 *     maps/<target>.{csv,pgm,clusters.json,svg}
 *     profiles/<target>.csv, profiles/<target>_c<id>.{pgm,f32,json}
 *     models/<target>.model.json
 *     predictions/<target>.csv, predictions/<target>.metrics.json
 *     plots/embedding.svg
 *     stages/<stage>.json, timings/<stage>.json
 *     report.json
 */

namespace latent_atlas::pipeline {

inline constexpr const char* version = "0.1.0";

enum class TargetType { categorical, binary, continuous };

inline std::string to_string(TargetType t) {
    switch (t) {
    case TargetType::categorical: return "categorical";
    case TargetType::binary: return "binary";
    default: return "continuous";
    }
}

struct DatasetSpec {
    std::string path;
    std::string format = "csv";
    std::string id_column = "id";
    std::string sidecar;
    std::vector<std::size_t> tensor_shape;
    std::vector<std::string> exclude_features;
};

struct TargetSpec {
    std::string column;
    TargetType type = TargetType::continuous;
    /// Separate CSV holding the column; empty means the dataset's own CSV.
    std::string path;
    std::string id_column = "id";
};

struct SplitSpec {
    double test_fraction = 0.2;
    std::vector<std::string> test_roles{"statistics", "predict"};
};

struct StatmapSpec {
    std::optional<double> sigma;
    double r_min = 0.2;
    Connectivity connectivity = Connectivity::full;
    std::size_t min_pixels = 5;
    /// auto, pearson or point_biserial.
    std::string method = "auto";
};

struct ProfilerSpec {
    std::size_t min_members = 5;
    double effect_threshold = 0.2;
};

struct PredictorSpec {
    std::size_t n_perms = 100;
    std::size_t k = 5;
    ForestParams forest;
};

struct PipelineConfig {
    std::filesystem::path base_dir;
    std::uint64_t seed = 0;
    std::string output_dir = "out";
    int threads = 1;
    std::map<std::string, DatasetSpec> datasets;
    std::optional<SplitSpec> split;
    std::vector<TargetSpec> targets;
    std::string scaling = "minmax";
    NonFinitePolicy non_finite = NonFinitePolicy::reject_file;
    std::optional<EmbedderParams> embedder;
    std::string precomputed;
    DlsParams dls;
    StatmapSpec statmap;
    ProfilerSpec profiler;
    PredictorSpec predictor;

    std::filesystem::path resolve(const std::string& p) const {
        std::filesystem::path q(p);
        return q.is_absolute() ? q : base_dir / q;
    }
};

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
    if (!j.is_object()) {
        throw ConfigError(where + " must be a JSON object");
    }
    for (const auto& [key, _] : j.items()) {
        if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
            throw ConfigError("unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
        }
    }
}

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback, const std::string& where) {
    if (!j.contains(key) || j.at(key).is_null()) {
        return fallback;
    }
    try {
        return j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config key '" + where + "." + key + "' has the wrong type");
    }
}

inline DatasetSpec parse_dataset(const nlohmann::json& j, const std::string& where) {
    check_keys(j, {"path", "format", "id_column", "sidecar", "tensor_shape", "exclude_features"}, where);
    DatasetSpec d;
    d.path = get_or<std::string>(j, "path", "", where);
    if (d.path.empty()) {
        throw ConfigError(where + ".path is required");
    }
    d.format = get_or<std::string>(j, "format", "csv", where);
    if (d.format != "csv" && d.format != "tensor") {
        throw ConfigError(where + ".format must be 'csv' or 'tensor'");
    }
    d.id_column = get_or<std::string>(j, "id_column", "id", where);
    d.sidecar = get_or<std::string>(j, "sidecar", "", where);
    if (d.format == "tensor" && d.sidecar.empty()) {
        throw ConfigError(where + ".sidecar is required for tensor datasets");
    }
    d.tensor_shape = get_or<std::vector<std::size_t>>(j, "tensor_shape", {}, where);
    d.exclude_features = get_or<std::vector<std::string>>(j, "exclude_features", {}, where);
    return d;
}

inline Connectivity parse_connectivity(const nlohmann::json& v) {
    if (v.is_number_integer()) {
        const int n = v.get<int>();
        if (n == 8) return Connectivity::full;
        if (n == 4) return Connectivity::face;
    } else if (v.is_string()) {
        const auto s = v.get<std::string>();
        if (s == "full") return Connectivity::full;
        if (s == "face") return Connectivity::face;
    }
    throw ConfigError("statmap.connectivity must be 'full', 'face', 4 or 8");
}

} // namespace detail

/**
 * Parses and validates a config document; relative paths resolve against
 * `base_dir`. Unknown keys are errors.
 */
inline PipelineConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir) {
    using detail::get_or;
    detail::check_keys(j, {"seed", "output_dir", "threads", "datasets", "split", "targets", "scaling", "embedder", "precomputed", "dls", "statmap", "profiler", "predictor"}, "");
    PipelineConfig c;
    c.base_dir = base_dir;
    if (!j.contains("seed") || !j.at("seed").is_number_integer()) {
        throw ConfigError("config needs an integer 'seed'");
    }
    c.seed = j.at("seed").get<std::uint64_t>();
    c.output_dir = get_or<std::string>(j, "output_dir", "out", "");
    c.threads = get_or<int>(j, "threads", 1, "");

    if (!j.contains("datasets")) {
        throw ConfigError("config needs 'datasets'");
    }
    const auto& ds = j.at("datasets");
    detail::check_keys(ds, {"embed", "statistics", "predict"}, "datasets");
    if (!ds.contains("embed")) {
        throw ConfigError("datasets.embed is required");
    }
    for (const auto& [role, spec] : ds.items()) {
        c.datasets[role] = detail::parse_dataset(spec, "datasets." + role);
    }

    if (j.contains("split")) {
        const auto& s = j.at("split");
        detail::check_keys(s, {"test_fraction", "test_roles"}, "split");
        SplitSpec sp;
        sp.test_fraction = get_or<double>(s, "test_fraction", 0.2, "split");
        sp.test_roles = get_or<std::vector<std::string>>(s, "test_roles", sp.test_roles, "split");
        if (!(sp.test_fraction > 0 && sp.test_fraction < 1)) {
            throw ConfigError("split.test_fraction must be in (0, 1)");
        }
        for (const auto& r : sp.test_roles) {
            if (r != "statistics" && r != "predict") {
                throw ConfigError("split.test_roles entries must be 'statistics' or 'predict'");
            }
            if (c.datasets.count(r)) {
                throw ConfigError("split assigns role '" + r + "' but datasets." + r + " is also given");
            }
        }
        c.split = sp;
    }

    if (j.contains("targets")) {
        for (const auto& t : j.at("targets")) {
            detail::check_keys(t, {"column", "type", "path", "id_column"}, "targets[]");
            TargetSpec ts;
            ts.column = get_or<std::string>(t, "column", "", "targets[]");
            if (ts.column.empty()) {
                throw ConfigError("targets[].column is required");
            }
            const auto type = get_or<std::string>(t, "type", "continuous", "targets[]");
            if (type == "categorical") {
                ts.type = TargetType::categorical;
            } else if (type == "binary") {
                ts.type = TargetType::binary;
            } else if (type == "continuous") {
                ts.type = TargetType::continuous;
            } else {
                throw ConfigError("targets[].type must be categorical, binary or continuous");
            }
            ts.path = get_or<std::string>(t, "path", "", "targets[]");
            ts.id_column = get_or<std::string>(t, "id_column", "id", "targets[]");
            c.targets.push_back(ts);
        }
    }

    if (j.contains("scaling")) {
        const auto& s = j.at("scaling");
        detail::check_keys(s, {"method", "non_finite"}, "scaling");
        c.scaling = get_or<std::string>(s, "method", "minmax", "scaling");
        if (c.scaling != "minmax" && c.scaling != "none") {
            throw ConfigError("scaling.method must be 'minmax' or 'none'");
        }
        const auto nf = get_or<std::string>(s, "non_finite", "reject-file", "scaling");
        if (nf == "reject-file") {
            c.non_finite = NonFinitePolicy::reject_file;
        } else if (nf == "drop-row") {
            c.non_finite = NonFinitePolicy::drop_row;
        } else {
            throw ConfigError("scaling.non_finite must be 'reject-file' or 'drop-row'");
        }
    }

    if (j.contains("embedder") == j.contains("precomputed")) {
        throw ConfigError("config needs exactly one of 'embedder' and 'precomputed'");
    }
    if (j.contains("embedder")) {
        const auto& e = j.at("embedder");
        detail::check_keys(e, {"k", "min_dist", "spread", "n_components", "epochs", "learning_rate", "negative_sample_rate", "transform_epochs"}, "embedder");
        EmbedderParams p;
        p.k = get_or<std::size_t>(e, "k", p.k, "embedder");
        p.min_dist = get_or<double>(e, "min_dist", p.min_dist, "embedder");
        p.spread = get_or<double>(e, "spread", p.spread, "embedder");
        p.n_components = get_or<std::size_t>(e, "n_components", p.n_components, "embedder");
        p.epochs = get_or<int>(e, "epochs", p.epochs, "embedder");
        p.learning_rate = get_or<double>(e, "learning_rate", p.learning_rate, "embedder");
        p.negative_sample_rate = get_or<double>(e, "negative_sample_rate", p.negative_sample_rate, "embedder");
        p.transform_epochs = get_or<int>(e, "transform_epochs", p.transform_epochs, "embedder");
        p.seed = c.seed;
        p.validate();
        if (!(p.min_dist > 0 && p.min_dist < 10 * p.spread)) {
            throw ConfigError("embedder requires 0 < min_dist < 10 * spread");
        }
        c.embedder = p;
    } else {
        const auto& pre = j.at("precomputed");
        detail::check_keys(pre, {"path"}, "precomputed");
        c.precomputed = get_or<std::string>(pre, "path", "", "precomputed");
        if (c.precomputed.empty()) {
            throw ConfigError("precomputed.path is required");
        }
    }

    if (j.contains("dls")) {
        const auto& d = j.at("dls");
        detail::check_keys(d, {"overlap_target", "r_max", "binning", "resolution"}, "dls");
        c.dls.overlap_target = get_or<double>(d, "overlap_target", c.dls.overlap_target, "dls");
        c.dls.R_max = get_or<std::size_t>(d, "r_max", c.dls.R_max, "dls");
        c.dls.resolution = get_or<std::size_t>(d, "resolution", 0, "dls");
        const auto b = get_or<std::string>(d, "binning", "floor", "dls");
        if (b != "floor" && b != "nearest") {
            throw ConfigError("dls.binning must be 'floor' or 'nearest'");
        }
        c.dls.binning = b == "floor" ? Binning::floor : Binning::nearest;
        if (!(c.dls.overlap_target >= 0 && c.dls.overlap_target < 1) || c.dls.R_max < 2 || c.dls.resolution == 1) {
            throw ConfigError("dls: overlap_target must be in [0, 1), r_max >= 2 and resolution 0 or >= 2");
        }
    }

    if (j.contains("statmap")) {
        const auto& s = j.at("statmap");
        detail::check_keys(s, {"sigma", "r_min", "connectivity", "min_pixels", "method"}, "statmap");
        if (s.contains("sigma") && !s.at("sigma").is_null()) {
            c.statmap.sigma = get_or<double>(s, "sigma", 1.0, "statmap");
            if (!(*c.statmap.sigma > 0)) {
                throw ConfigError("statmap.sigma must be positive");
            }
        }
        c.statmap.r_min = get_or<double>(s, "r_min", c.statmap.r_min, "statmap");
        if (s.contains("connectivity")) {
            c.statmap.connectivity = detail::parse_connectivity(s.at("connectivity"));
        }
        c.statmap.min_pixels = get_or<std::size_t>(s, "min_pixels", c.statmap.min_pixels, "statmap");
        c.statmap.method = get_or<std::string>(s, "method", "auto", "statmap");
        if (c.statmap.method != "auto" && c.statmap.method != "pearson" && c.statmap.method != "point_biserial") {
            throw ConfigError("statmap.method must be auto, pearson or point_biserial");
        }
        if (!(c.statmap.r_min > 0)) {
            throw ConfigError("statmap.r_min must be positive");
        }
    }

    if (j.contains("profiler")) {
        const auto& p = j.at("profiler");
        detail::check_keys(p, {"min_members", "effect_threshold"}, "profiler");
        c.profiler.min_members = get_or<std::size_t>(p, "min_members", c.profiler.min_members, "profiler");
        c.profiler.effect_threshold = get_or<double>(p, "effect_threshold", c.profiler.effect_threshold, "profiler");
    }

    if (j.contains("predictor")) {
        const auto& p = j.at("predictor");
        detail::check_keys(p, {"n_perms", "k", "n_trees", "max_depth", "min_samples_leaf", "mtry"}, "predictor");
        c.predictor.n_perms = get_or<std::size_t>(p, "n_perms", c.predictor.n_perms, "predictor");
        c.predictor.k = get_or<std::size_t>(p, "k", c.predictor.k, "predictor");
        c.predictor.forest.n_trees = get_or<std::size_t>(p, "n_trees", c.predictor.forest.n_trees, "predictor");
        c.predictor.forest.max_depth = get_or<std::size_t>(p, "max_depth", 0, "predictor");
        c.predictor.forest.min_samples_leaf = get_or<std::size_t>(p, "min_samples_leaf", 0, "predictor");
        c.predictor.forest.mtry = get_or<std::size_t>(p, "mtry", 0, "predictor");
        if (c.predictor.n_perms < 1 || c.predictor.k < 2 || c.predictor.forest.n_trees < 1) {
            throw ConfigError("predictor: n_perms >= 1, k >= 2 and n_trees >= 1 required");
        }
    }

    // Referenced inputs must exist now rather than halfway through a run.
    for (const auto& [role, d] : c.datasets) {
        if (!std::filesystem::exists(c.resolve(d.path))) {
            throw ConfigError("datasets." + role + ".path does not exist: " + c.resolve(d.path).string());
        }
        if (!d.sidecar.empty() && !std::filesystem::exists(c.resolve(d.sidecar))) {
            throw ConfigError("datasets." + role + ".sidecar does not exist: " + c.resolve(d.sidecar).string());
        }
    }
    for (const auto& t : c.targets) {
        if (!t.path.empty() && !std::filesystem::exists(c.resolve(t.path))) {
            throw ConfigError("target path does not exist: " + c.resolve(t.path).string());
        }
    }
    if (!c.precomputed.empty() && !std::filesystem::exists(c.resolve(c.precomputed))) {
        throw ConfigError("precomputed.path does not exist: " + c.resolve(c.precomputed).string());
    }
    return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw ConfigError("config file not found: " + path.string());
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config is not valid JSON: " + std::string(e.what()));
    }
    return parse_config(j, std::filesystem::absolute(path).parent_path());
}

/// Resolved configuration with every default filled in. Output location and thread count are runtime settings, reported separately.
inline nlohmann::json echo_config(const PipelineConfig& c) {
    nlohmann::json j;
    j["seed"] = c.seed;
    for (const auto& [role, d] : c.datasets) {
        j["datasets"][role] = {{"path", d.path}, {"format", d.format}, {"id_column", d.id_column}, {"sidecar", d.sidecar}, {"tensor_shape", d.tensor_shape}, {"exclude_features", d.exclude_features}};
    }
    if (c.split) {
        j["split"] = {{"test_fraction", c.split->test_fraction}, {"test_roles", c.split->test_roles}};
    }
    j["targets"] = nlohmann::json::array();
    for (const auto& t : c.targets) {
        j["targets"].push_back({{"column", t.column}, {"type", to_string(t.type)}, {"path", t.path}, {"id_column", t.id_column}});
    }
    j["scaling"] = {{"method", c.scaling}, {"non_finite", c.non_finite == NonFinitePolicy::reject_file ? "reject-file" : "drop-row"}};
    if (c.embedder) {
        j["embedder"] = to_json(*c.embedder);
    } else {
        j["precomputed"] = {{"path", c.precomputed}};
    }
    j["dls"] = {{"overlap_target", c.dls.overlap_target}, {"r_max", c.dls.R_max}, {"binning", to_string(c.dls.binning)}, {"resolution", c.dls.resolution}};
    j["statmap"] = {{"sigma", c.statmap.sigma ? nlohmann::json(*c.statmap.sigma) : nlohmann::json("auto")},
                    {"r_min", c.statmap.r_min},
                    {"connectivity", c.statmap.connectivity == Connectivity::full ? "full" : "face"},
                    {"min_pixels", c.statmap.min_pixels},
                    {"method", c.statmap.method}};
    j["profiler"] = {{"min_members", c.profiler.min_members}, {"effect_threshold", c.profiler.effect_threshold}};
    j["predictor"] = {{"n_perms", c.predictor.n_perms},
                      {"k", c.predictor.k},
                      {"n_trees", c.predictor.forest.n_trees},
                      {"max_depth", c.predictor.forest.max_depth},
                      {"min_samples_leaf", c.predictor.forest.min_samples_leaf},
                      {"mtry", c.predictor.forest.mtry}};
    return j;
}

// ---------------------------------------------------------------------------
// Stage context and artifact access

struct Context {
    PipelineConfig cfg;
    std::filesystem::path out;
    int threads = 1;

    std::filesystem::path file(const std::string& rel) const { return out / rel; }

    bool has(const std::string& rel) const { return std::filesystem::exists(file(rel)); }

    /// Reads an artifact; a missing file names the command that produces it.
    std::string read(const std::string& rel, const std::string& producer) const {
        if (!has(rel)) {
            throw StageError(producer, "missing artifact '" + rel + "'; run " + producer + " first (latent-atlas " + producer + " --config <config>)");
        }
        return read_file(file(rel));
    }

    nlohmann::json read_json(const std::string& rel, const std::string& producer) const {
        try {
            return nlohmann::json::parse(read(rel, producer));
        } catch (const nlohmann::json::exception& e) {
            throw DataError("artifact '" + rel + "' is not valid JSON: " + e.what());
        }
    }

    void write(const std::string& rel, std::string_view contents) const { write_file_atomic(file(rel), contents); }

    void write_json(const std::string& rel, const nlohmann::json& j) const { write(rel, j.dump(2) + "\n"); }
};

/// Output directory: LATENT_ATLAS_OUT overrides the config; `out_override` overrides both.
inline Context make_context(PipelineConfig cfg, const std::optional<std::string>& out_override = std::nullopt, std::optional<int> threads_override = std::nullopt) {
    Context ctx;
    std::string out = cfg.output_dir;
    if (const char* env = std::getenv("LATENT_ATLAS_OUT"); env && *env) {
        out = env;
    }
    if (out_override) {
        out = *out_override;
    }
    std::filesystem::path p(out);
    ctx.out = p.is_absolute() || out_override || std::getenv("LATENT_ATLAS_OUT") ? p : cfg.base_dir / p;
    ctx.threads = cfg.threads;
    if (const char* env = std::getenv("LATENT_ATLAS_THREADS"); env && *env) {
        ctx.threads = std::atoi(env);
    }
    if (threads_override) {
        ctx.threads = *threads_override;
    }
    ctx.threads = std::max(1, ctx.threads);
    ctx.cfg = std::move(cfg);
    return ctx;
}

inline std::string slug(const std::string& name) {
    std::string s;
    for (char c : name) {
        s.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.' ? c : '_');
    }
    return s.empty() ? "_" : s;
}

// ---------------------------------------------------------------------------
// Dataset roles

struct RoleData {
    FeatureMatrix raw;
    /// Target column -> per-observation cells; present only when every observation has a value.
    std::map<std::string, std::vector<std::string>> targets;
};

namespace detail {

inline RoleData load_dataset(const Context& ctx, const DatasetSpec& spec, std::vector<std::string>* dropped) {
    const auto& cfg = ctx.cfg;
    RoleData rd;
    const auto path = cfg.resolve(spec.path);
    std::vector<std::string> own_targets;
    if (spec.format == "csv") {
        const auto header = read_csv(path).header;
        CsvOptions opts;
        opts.non_finite = cfg.non_finite;
        opts.exclude_columns = spec.exclude_features;
        for (const auto& t : cfg.targets) {
            if (t.path.empty() && std::find(header.begin(), header.end(), t.column) != header.end()) {
                opts.exclude_columns.push_back(t.column);
                own_targets.push_back(t.column);
            }
        }
        rd.raw = load_feature_csv(path, spec.id_column, opts, dropped);
        if (!spec.tensor_shape.empty()) {
            rd.raw.tensor_shape = spec.tensor_shape;
        }
    } else {
        rd.raw = load_tensor_dataset(path, cfg.resolve(spec.sidecar), cfg.non_finite, dropped);
        if (!spec.exclude_features.empty()) {
            throw ConfigError("exclude_features is only supported for CSV datasets");
        }
    }
    rd.raw.validate();

    for (const auto& t : cfg.targets) {
        std::unordered_map<std::string, std::vector<std::string>> cells;
        if (!t.path.empty()) {
            std::vector<std::string> cols{t.column};
            cells = read_columns_by_id(cfg.resolve(t.path), t.id_column, cols);
        } else if (std::find(own_targets.begin(), own_targets.end(), t.column) != own_targets.end()) {
            std::vector<std::string> cols{t.column};
            cells = read_columns_by_id(path, spec.id_column, cols);
        } else {
            continue;
        }
        std::vector<std::string> values;
        std::size_t found = 0;
        for (const auto& id : rd.raw.obs_ids) {
            auto it = cells.find(id);
            if (it != cells.end() && !it->second[0].empty()) {
                values.push_back(it->second[0]);
                ++found;
            }
        }
        if (found == 0) {
            continue;
        }
        if (found != rd.raw.n_obs()) {
            throw DataError("target '" + t.column + "' has values for " + std::to_string(found) + " of " + std::to_string(rd.raw.n_obs()) +
                            " observations of " + spec.path + "; provide it for all or none");
        }
        rd.targets[t.column] = std::move(values);
    }
    return rd;
}

inline RoleData select_ids(const RoleData& src, const std::vector<std::string>& ids, const std::string& role) {
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < src.raw.obs_ids.size(); ++i) {
        index[src.raw.obs_ids[i]] = i;
    }
    std::vector<std::size_t> rows;
    rows.reserve(ids.size());
    for (const auto& id : ids) {
        auto it = index.find(id);
        if (it == index.end()) {
            throw DataError("observation '" + id + "' of role '" + role + "' is missing from its dataset");
        }
        rows.push_back(it->second);
    }
    RoleData out;
    out.raw = src.raw.select(rows);
    for (const auto& [name, cells] : src.targets) {
        auto& v = out.targets[name];
        for (auto r : rows) {
            v.push_back(cells[r]);
        }
    }
    return out;
}

} // namespace detail

/// The three dataset roles, materialised from the ids recorded by `ingest`.
struct Roles {
    RoleData embed;
    std::optional<RoleData> statistics;
    std::optional<RoleData> predict;
    /// "statistics", or "none" when no statistics set is configured.
    std::string statistics_role = "none";
};

inline Roles load_roles(const Context& ctx) {
    const auto split = ctx.read_json("ingest/split.json", "ingest");
    const auto& ids = split.at("roles");
    Roles roles;
    auto pick = [&](const RoleData& src, const std::string& role) { return detail::select_ids(src, ids.at(role).get<std::vector<std::string>>(), role); };
    if (ctx.cfg.split) {
        const auto all = detail::load_dataset(ctx, ctx.cfg.datasets.at("embed"), nullptr);
        roles.embed = pick(all, "embed");
        if (ids.contains("statistics")) {
            roles.statistics = pick(all, "statistics");
        }
        if (ids.contains("predict")) {
            roles.predict = pick(all, "predict");
        }
    } else {
        roles.embed = pick(detail::load_dataset(ctx, ctx.cfg.datasets.at("embed"), nullptr), "embed");
        for (const char* role : {"statistics", "predict"}) {
            if (ctx.cfg.datasets.count(role)) {
                auto rd = pick(detail::load_dataset(ctx, ctx.cfg.datasets.at(role), nullptr), role);
                (std::string(role) == "statistics" ? roles.statistics : roles.predict) = std::move(rd);
            }
        }
    }
    roles.statistics_role = split.at("statistics_role").get<std::string>();
    return roles;
}

inline const TargetSpec* find_target(const PipelineConfig& cfg, const std::string& column) {
    for (const auto& t : cfg.targets) {
        if (t.column == column) {
            return &t;
        }
    }
    return nullptr;
}

// ---------------------------------------------------------------------------
// Stage bookkeeping

struct StageRecord {
    std::string name;
    nlohmann::json summary = nlohmann::json::object();
    std::vector<std::string> warnings;
};

inline void finish_stage(const Context& ctx, StageRecord& rec, double seconds) {
    rec.summary["warnings"] = rec.warnings;
    ctx.write_json("stages/" + rec.name + ".json", rec.summary);
    ctx.write_json("timings/" + rec.name + ".json", {{"seconds", seconds}});
}

template <typename Fn>
void timed_stage(const Context& ctx, const std::string& name, Fn&& body) {
    StageRecord rec;
    rec.name = name;
    const auto t0 = std::chrono::steady_clock::now();
    try {
        body(rec);
    } catch (const StageError&) {
        throw;
    } catch (const ConfigError&) {
        throw;
    } catch (const DataError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(name, e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    finish_stage(ctx, rec, secs);
}

// ---------------------------------------------------------------------------
// ingest

inline void stage_ingest(const Context& ctx) {
    timed_stage(ctx, "ingest", [&](StageRecord& rec) {
        const auto& cfg = ctx.cfg;
        nlohmann::json roles;
        nlohmann::json counts;
        std::vector<std::string> dropped;
        const auto embed_all = detail::load_dataset(ctx, cfg.datasets.at("embed"), &dropped);
        RoleData embed;
        std::map<std::string, RoleData> extra;
        std::string statistics_role = "none";

        if (cfg.split) {
            const std::size_t n = embed_all.raw.n_obs();
            const auto n_test = static_cast<std::size_t>(std::ceil(cfg.split->test_fraction * static_cast<double>(n)));
            if (n_test == 0 || n_test >= n) {
                throw DataError("split leaves an empty embedding or test set");
            }
            std::vector<std::size_t> order(n);
            std::iota(order.begin(), order.end(), std::size_t{0});
            Rng rng(derive_seed(cfg.seed, 500));
            rng.shuffle(order);
            std::vector<std::size_t> test(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
            std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_test), order.end());
            std::sort(test.begin(), test.end());
            std::sort(train.begin(), train.end());
            auto ids_of = [&](const std::vector<std::size_t>& rows) {
                std::vector<std::string> v;
                for (auto r : rows) {
                    v.push_back(embed_all.raw.obs_ids[r]);
                }
                return v;
            };
            embed = detail::select_ids(embed_all, ids_of(train), "embed");
            for (const auto& r : cfg.split->test_roles) {
                extra[r] = detail::select_ids(embed_all, ids_of(test), r);
            }
        } else {
            embed = embed_all;
            for (const char* role : {"statistics", "predict"}) {
                if (cfg.datasets.count(role)) {
                    extra[role] = detail::load_dataset(ctx, cfg.datasets.at(role), &dropped);
                    if (extra[role].raw.n_features() != embed.raw.n_features()) {
                        throw DataError(std::string("datasets.") + role + " has " + std::to_string(extra[role].raw.n_features()) + " features; the embedding set has " +
                                        std::to_string(embed.raw.n_features()));
                    }
                }
            }
        }
        if (extra.count("statistics")) {
            statistics_role = "statistics";
        }

        auto describe = [&](const std::string& role, const RoleData& rd) {
            roles[role] = rd.raw.obs_ids;
            nlohmann::json avail = nlohmann::json::array();
            for (const auto& [name, _] : rd.targets) {
                avail.push_back(name);
            }
            counts[role] = {{"n_obs", rd.raw.n_obs()}, {"n_features", rd.raw.n_features()}, {"targets", avail}};
        };
        describe("embed", embed);
        for (const auto& [role, rd] : extra) {
            describe(role, rd);
        }

        // Categorical and binary targets must be usable wherever they appear.
        for (const auto& t : cfg.targets) {
            std::size_t present = 0;
            for (const RoleData* rd : {&embed, extra.count("statistics") ? &extra.at("statistics") : nullptr, extra.count("predict") ? &extra.at("predict") : nullptr}) {
                if (!rd || !rd->targets.count(t.column)) {
                    continue;
                }
                ++present;
                const auto& cells = rd->targets.at(t.column);
                if (t.type != TargetType::categorical) {
                    numeric_target(t.column, t.type == TargetType::binary ? TargetKind::binary : TargetKind::continuous, rd->raw.obs_ids, cells);
                }
            }
            if (present == 0) {
                rec.warnings.push_back("target '" + t.column + "' has no values in any dataset role");
            }
        }

        ScalingParams scaling;
        if (cfg.scaling == "minmax") {
            scaling = scale_fit(embed.raw);
        } else {
            scaling.min.assign(embed.raw.n_features(), 0.0);
            scaling.max.assign(embed.raw.n_features(), 1.0);
            scaling.constant.assign(embed.raw.n_features(), false);
        }
        const auto n_constant = static_cast<std::size_t>(std::count(scaling.constant.begin(), scaling.constant.end(), true));

        ctx.write_json("ingest/split.json", {{"roles", roles}, {"statistics_role", statistics_role}});
        ctx.write_json("ingest/scaling.json", {{"method", cfg.scaling}, {"params", to_json(scaling)}});
        if (!dropped.empty()) {
            rec.warnings.push_back(std::to_string(dropped.size()) + " rows with non-finite values were dropped");
        }
        rec.summary = {{"roles", counts}, {"statistics_role", statistics_role}, {"dropped_rows", dropped}, {"constant_features", n_constant}};
    });
}

inline ScalingParams load_scaling(const Context& ctx) {
    return scaling_from_json(ctx.read_json("ingest/scaling.json", "ingest").at("params"));
}

// ---------------------------------------------------------------------------
// embed / transform

inline Embedding pick_precomputed(const Context& ctx, const std::vector<std::string>& ids, const std::string& role) {
    const auto all = load_precomputed(ctx.cfg.resolve(ctx.cfg.precomputed));
    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < all.obs_ids.size(); ++i) {
        index[all.obs_ids[i]] = i;
    }
    std::vector<std::size_t> rows;
    for (const auto& id : ids) {
        auto it = index.find(id);
        if (it == index.end()) {
            throw DataError("precomputed embedding has no coordinates for '" + id + "' (" + role + " role)");
        }
        rows.push_back(it->second);
    }
    Embedding e;
    e.coords = all.coords.select_rows(rows);
    e.obs_ids = ids;
    return e;
}

inline void stage_embed(const Context& ctx) {
    timed_stage(ctx, "embed", [&](StageRecord& rec) {
        const auto roles = load_roles(ctx);
        Embedding emb;
        if (ctx.cfg.embedder) {
            const auto scaling = load_scaling(ctx);
            const auto X = scale_apply(scaling, roles.embed.raw);
            auto model = fit(X, *ctx.cfg.embedder, ctx.threads);
            model.scaling = scaling;
            ctx.write("embed/model.json", save_embedding_model(model));
            emb = model.embedding;
            rec.summary = {{"source", "fitted"},
                           {"k", model.params.k},
                           {"a", model.a},
                           {"b", model.b},
                           {"epochs", model.params.resolved_epochs(X.n_obs())},
                           {"fuzzy_edges", model.graph.neighbors.size() / 2}};
        } else {
            emb = pick_precomputed(ctx, roles.embed.raw.obs_ids, "embed");
            rec.summary = {{"source", "precomputed"}};
        }
        rec.summary["n_obs"] = emb.n_obs();
        rec.summary["n_components"] = emb.n_components();
        ctx.write("embed/embed.csv", embedding_to_csv(emb));
    });
}

inline void stage_transform(const Context& ctx) {
    timed_stage(ctx, "transform", [&](StageRecord& rec) {
        const auto roles = load_roles(ctx);
        std::optional<EmbeddingModel> model;
        ScalingParams scaling;
        if (ctx.cfg.embedder) {
            model = load_embedding_model(ctx.read("embed/model.json", "embed"));
            scaling = load_scaling(ctx);
        }
        rec.summary["projected"] = nlohmann::json::object();
        for (const auto& [role, rd] : {std::pair{std::string("statistics"), &roles.statistics}, std::pair{std::string("predict"), &roles.predict}}) {
            if (!rd->has_value()) {
                continue;
            }
            const auto& data = **rd;
            Embedding e = model ? transform(*model, scale_apply(scaling, data.raw), ctx.threads) : pick_precomputed(ctx, data.raw.obs_ids, role);
            for (double v : e.coords.data()) {
                if (!std::isfinite(v)) {
                    throw StageError("transform", "projected coordinates are not finite");
                }
            }
            ctx.write("embed/" + role + ".csv", embedding_to_csv(e));
            rec.summary["projected"][role] = e.n_obs();
        }
    });
}

inline Embedding read_embedding(const Context& ctx, const std::string& role) {
    const std::string rel = "embed/" + role + ".csv";
    ctx.read(rel, role == "embed" ? "embed" : "transform");
    return load_precomputed(ctx.file(rel));
}

// ---------------------------------------------------------------------------
// dls

inline nlohmann::json dls_to_json(const DlsBuild& b) {
    auto j = dls_summary_json(b);
    j["obs_ids"] = b.dls.obs_ids;
    j["point_pixels"] = b.dls.point_pixels;
    j["resolution_fallback"] = b.resolution.used_fallback;
    return j;
}

inline DiscreteLatentSpace dls_from_json(const nlohmann::json& j) {
    DiscreteLatentSpace d;
    d.R = j.at("R").get<std::size_t>();
    d.D = j.at("D").get<std::size_t>();
    d.binning = j.at("binning").get<std::string>() == "floor" ? Binning::floor : Binning::nearest;
    d.norm.min = j.at("norm_min").get<std::vector<double>>();
    d.norm.max = j.at("norm_max").get<std::vector<double>>();
    d.obs_ids = j.at("obs_ids").get<std::vector<std::string>>();
    d.point_pixels = j.at("point_pixels").get<std::vector<std::vector<std::size_t>>>();
    d.clamped_points = j.at("clamped_points").get<std::size_t>();
    d.occupancy.assign(static_cast<std::size_t>(grid_cells(d.R, d.D)), 0);
    for (std::size_t i = 0; i < d.n_obs(); ++i) {
        d.occupancy[static_cast<std::size_t>(d.point_cell(i))] = 1;
    }
    return d;
}

inline void stage_dls(const Context& ctx) {
    timed_stage(ctx, "dls", [&](StageRecord& rec) {
        const auto split = ctx.read_json("ingest/split.json", "ingest");
        const auto stats_role = split.at("statistics_role").get<std::string>();
        const auto reference = read_embedding(ctx, "embed");
        const auto housed = stats_role == "none" ? reference : read_embedding(ctx, stats_role);
        const auto build = build_dls(reference, housed, ctx.cfg.dls);
        ctx.write_json("dls/dls.json", dls_to_json(build));
        if (build.dls.D == 2) {
            ctx.write("dls/occupancy.pgm", occupancy_to_pgm(build.dls));
        }
        ctx.write("dls/occupied.csv", occupancy_to_csv(build.dls));
        if (build.resolution.unsatisfiable) {
            rec.warnings.push_back("overlap target " + format_double(ctx.cfg.dls.overlap_target) + " unreachable up to R_max; using R=" + std::to_string(build.dls.R) +
                                   " with overlap " + format_double(build.realized_overlap));
        }
        if (build.dls.clamped_points > 0) {
            rec.warnings.push_back(std::to_string(build.dls.clamped_points) + " projected points fell outside the reference range and were clamped to edge pixels");
        }
        if (build.dls.D != 2) {
            rec.warnings.push_back("latent space is " + std::to_string(build.dls.D) + "-D; raster renders are skipped (CSV only)");
        }
        rec.summary = dls_summary_json(build);
        rec.summary["housed_role"] = stats_role;
    });
}

// ---------------------------------------------------------------------------
// map

/// A variable mapped over the latent space: one per binary/continuous target, one per class of a categorical target.
struct MapTarget {
    std::string name;
    std::string column;
    TargetVariable variable;
    CorrelationMethod method = CorrelationMethod::pearson;
};

inline std::vector<MapTarget> map_targets(const Context& ctx, const RoleData& stats) {
    std::vector<MapTarget> out;
    const auto& override_method = ctx.cfg.statmap.method;
    for (const auto& t : ctx.cfg.targets) {
        if (!stats.targets.count(t.column)) {
            continue;
        }
        const auto& cells = stats.targets.at(t.column);
        std::vector<TargetVariable> vars;
        if (t.type == TargetType::categorical) {
            CategoricalTarget cat{t.column, cells, stats.raw.obs_ids};
            for (auto& v : binarize_target(cat)) {
                v.name = t.column + "=" + v.name;
                vars.push_back(std::move(v));
            }
        } else {
            vars.push_back(numeric_target(t.column, t.type == TargetType::binary ? TargetKind::binary : TargetKind::continuous, stats.raw.obs_ids, cells));
        }
        for (auto& v : vars) {
            MapTarget m;
            m.name = v.name;
            m.column = t.column;
            if (override_method == "pearson") {
                m.method = CorrelationMethod::pearson;
            } else if (override_method == "point_biserial") {
                m.method = CorrelationMethod::point_biserial;
            } else {
                m.method = v.kind == TargetKind::binary ? CorrelationMethod::point_biserial : CorrelationMethod::pearson;
            }
            m.variable = std::move(v);
            out.push_back(std::move(m));
        }
    }
    return out;
}

/// Matches a map target by full name ("label=9") or by the class label alone ("9") when unambiguous.
inline std::vector<MapTarget> filter_targets(std::vector<MapTarget> all, const std::string& wanted) {
    std::vector<MapTarget> exact, by_label;
    for (auto& m : all) {
        if (m.name == wanted) {
            exact.push_back(m);
        } else if (auto pos = m.name.find('='); pos != std::string::npos && m.name.substr(pos + 1) == wanted) {
            by_label.push_back(m);
        }
    }
    if (!exact.empty()) {
        return exact;
    }
    if (by_label.size() == 1) {
        return by_label;
    }
    if (by_label.size() > 1) {
        throw ConfigError("target '" + wanted + "' is ambiguous; use column=label");
    }
    throw ConfigError("unknown map target '" + wanted + "'");
}

struct MapOptions {
    std::optional<std::string> target;
    std::optional<std::string> method;
};

inline double resolved_sigma(const Context& ctx, std::size_t R) {
    return ctx.cfg.statmap.sigma.value_or(default_sigma(R));
}

inline void stage_map(const Context& ctx, const MapOptions& opt = {}) {
    timed_stage(ctx, "map", [&](StageRecord& rec) {
        Context local = ctx;
        if (opt.method) {
            const auto m = *opt.method == "point-biserial" ? std::string("point_biserial") : *opt.method;
            if (m != "pearson" && m != "point_biserial" && m != "auto") {
                throw ConfigError("--method must be pearson, point-biserial or auto");
            }
            local.cfg.statmap.method = m;
        }
        const auto roles = load_roles(local);
        const auto dls = dls_from_json(ctx.read_json("dls/dls.json", "dls"));
        if (!roles.statistics) {
            rec.summary = {{"skipped", "no statistics set"}};
            return;
        }
        const auto& stats = *roles.statistics;
        if (dls.obs_ids != stats.raw.obs_ids) {
            throw StageError("map", "latent space observations do not match the statistics set; rerun dls");
        }
        auto targets = map_targets(local, stats);
        if (opt.target) {
            targets = filter_targets(std::move(targets), *opt.target);
        }
        const double sigma = resolved_sigma(ctx, dls.R);
        const auto housed = read_embedding(ctx, roles.statistics_role);

        // Filtered runs update their entries in an existing summary.
        nlohmann::json maps = nlohmann::json::object();
        if (opt.target && ctx.has("stages/map.json")) {
            maps = ctx.read_json("stages/map.json", "map").value("maps", nlohmann::json::object());
        }
        for (const auto& t : targets) {
            const auto map = correlation_map(dls, sigma, t.variable.values, t.method, t.name, ctx.threads);
            const auto clusters = extract_clusters(map, ctx.cfg.statmap.r_min, ctx.cfg.statmap.connectivity, ctx.cfg.statmap.min_pixels);
            const auto s = slug(t.name);
            ctx.write("maps/" + s + ".csv", correlation_map_to_csv(map));
            ctx.write_json("maps/" + s + ".clusters.json", to_json(clusters, map));
            if (dls.D == 2) {
                ctx.write("maps/" + s + ".pgm", correlation_map_to_pgm(map));
                ScatterColors colors;
                for (double v : t.variable.values) {
                    colors.categories.push_back(t.variable.kind == TargetKind::binary ? (v != 0 ? "1" : "0") : std::string());
                }
                if (t.variable.kind != TargetKind::binary) {
                    colors.categories.clear();
                    colors.values = t.variable.values;
                }
                ClusterOverlay overlay{&dls.norm, dls.R, dls.binning, &clusters};
                ctx.write("maps/" + s + ".svg", render_scatter_svg(housed, colors, t.name, overlay));
            }
            nlohmann::json table = nlohmann::json::array();
            for (const auto& c : clusters.clusters) {
                table.push_back({{"id", c.id}, {"sign", c.sign > 0 ? "+" : "-"}, {"size", c.size()}, {"peak_r", c.peak_r}, {"peak_p_uncorrected", c.peak_p}});
            }
            maps[t.name] = {{"file", s},
                            {"method", to_string(t.method)},
                            {"sigma", sigma},
                            {"defined_pixels", map.defined_count()},
                            {"positive_clusters", clusters.count(1)},
                            {"negative_clusters", clusters.count(-1)},
                            {"clusters", table}};
        }
        if (!targets.empty()) {
            rec.warnings.push_back("cluster p-values are per-pixel and uncorrected for multiple comparisons");
        }
        rec.summary = {{"sigma", sigma}, {"maps", maps}};
    });
}

// ---------------------------------------------------------------------------
// profile

inline void stage_profile(const Context& ctx, const std::optional<std::string>& only_target = std::nullopt) {
    timed_stage(ctx, "profile", [&](StageRecord& rec) {
        const auto roles = load_roles(ctx);
        const auto dls = dls_from_json(ctx.read_json("dls/dls.json", "dls"));
        if (!roles.statistics) {
            rec.summary = {{"skipped", "no statistics set"}};
            return;
        }
        const auto& stats = *roles.statistics;
        auto targets = map_targets(ctx, stats);
        if (only_target) {
            targets = filter_targets(std::move(targets), *only_target);
        }
        nlohmann::json profiles = nlohmann::json::object();
        for (const auto& t : targets) {
            const auto s = slug(t.name);
            const auto cj = ctx.read_json("maps/" + s + ".clusters.json", "map");
            std::string csv = profile_csv_header();
            nlohmann::json entries = nlohmann::json::array();
            for (const auto& c : cj.at("clusters")) {
                Cluster cl;
                cl.id = c.at("id").get<std::size_t>();
                cl.sign = c.at("sign").get<std::string>() == "+" ? 1 : -1;
                cl.pixels = c.at("pixels").get<std::vector<std::uint64_t>>();
                try {
                    const auto prof = cluster_profile(cl, stats.raw, dls, ctx.cfg.profiler.min_members, ctx.cfg.profiler.effect_threshold, ctx.threads);
                    csv += profile_to_csv_rows(prof);
                    auto summary = profile_summary_json(prof);
                    if (prof.insufficient_effect) {
                        rec.warnings.push_back("cluster " + std::to_string(cl.id) + " of '" + t.name + "' has no feature with effect size >= " +
                                               format_double(ctx.cfg.profiler.effect_threshold));
                    } else if (!prof.tensor_shape.empty()) {
                        const std::string base = "profiles/" + s + "_c" + std::to_string(cl.id);
                        Matrix m(1, prof.features.size(), prof.signed_map());
                        const std::vector<std::string> ids{t.name + "#" + std::to_string(cl.id)};
                        auto [bytes, side] = encode_tensor_dataset(m, prof.tensor_shape, ids);
                        ctx.write(base + ".f32", bytes);
                        ctx.write(base + ".json", side);
                        if (prof.tensor_shape.size() == 2) {
                            ctx.write(base + ".pgm", profile_to_pgm(prof));
                        }
                        summary["effect_map"] = base;
                    }
                    entries.push_back(summary);
                } catch (const DataError& e) {
                    entries.push_back({{"cluster_id", cl.id}, {"profilable", false}, {"reason", e.what()}});
                    rec.warnings.push_back("cluster " + std::to_string(cl.id) + " of '" + t.name + "' not profiled: " + e.what());
                }
            }
            ctx.write("profiles/" + s + ".csv", csv);
            profiles[t.name] = entries;
        }
        rec.summary = {{"profiles", profiles},
                       {"test", "Mann-Whitney U, midranks, tie-corrected variance, no continuity correction, two-sided normal p (uncorrected across features)"}};
    });
}

// ---------------------------------------------------------------------------
// train / predict

struct PredictionTarget {
    const TargetSpec* spec = nullptr;
    Task task = Task::classification;
    std::vector<std::string> class_labels;
};

namespace detail {

inline std::vector<double> encode_target(const PredictionTarget& pt, const std::vector<std::string>& cells, const std::vector<std::string>& ids) {
    std::vector<double> y;
    if (pt.task == Task::classification) {
        for (const auto& c : cells) {
            std::string key = c;
            if (pt.spec->type == TargetType::binary) {
                double v = 0;
                if (!parse_double(c, v) || (v != 0 && v != 1)) {
                    throw DataError("binary target '" + pt.spec->column + "' has value '" + c + "'");
                }
                key = v != 0 ? "1" : "0";
            }
            auto it = std::find(pt.class_labels.begin(), pt.class_labels.end(), key);
            y.push_back(it == pt.class_labels.end() ? -1.0 : static_cast<double>(it - pt.class_labels.begin()));
        }
        return y;
    }
    return numeric_target(pt.spec->column, TargetKind::continuous, ids, cells).values;
}

} // namespace detail

inline void stage_train(const Context& ctx) {
    timed_stage(ctx, "train", [&](StageRecord& rec) {
        const auto roles = load_roles(ctx);
        if (!roles.predict) {
            rec.summary = {{"skipped", "no prediction set"}};
            return;
        }
        nlohmann::json models = nlohmann::json::object();
        for (const auto& t : ctx.cfg.targets) {
            std::string role;
            if (roles.embed.targets.count(t.column)) {
                role = "embed";
            } else if (roles.statistics && roles.statistics->targets.count(t.column)) {
                role = "statistics";
            } else {
                rec.warnings.push_back("target '" + t.column + "' has no training values; no model trained");
                continue;
            }
            const RoleData& rd = role == "embed" ? roles.embed : *roles.statistics;
            PredictionTarget pt{&t, t.type == TargetType::continuous ? Task::regression : Task::classification, {}};
            if (t.type == TargetType::categorical) {
                pt.class_labels = CategoricalTarget{t.column, rd.targets.at(t.column), rd.raw.obs_ids}.classes();
            } else if (t.type == TargetType::binary) {
                pt.class_labels = {"0", "1"};
            }
            const auto y = detail::encode_target(pt, rd.targets.at(t.column), rd.raw.obs_ids);
            const auto coords = read_embedding(ctx, role);
            CvOptions opt;
            opt.n_perms = ctx.cfg.predictor.n_perms;
            opt.k = ctx.cfg.predictor.k;
            opt.forest = ctx.cfg.predictor.forest;
            opt.master_seed = derive_seed(ctx.cfg.seed, 3);
            opt.threads = ctx.threads;
            auto ens = train_cv(coords.coords, y, pt.task, opt, pt.class_labels.size());
            ens.class_labels = pt.class_labels;
            if (pt.task == Task::regression && ens.fold_models.front().constant_target) {
                rec.warnings.push_back("target '" + t.column + "' is constant; the model predicts that constant");
            }
            save_model(ens, ctx.file("models/" + slug(t.column) + ".model.json"));
            const auto& win = ens.scores[ens.winner];
            double mean = 0;
            for (const auto& s : ens.scores) {
                mean += s.global;
            }
            mean /= static_cast<double>(ens.scores.size());
            models[t.column] = {{"task", to_string(pt.task)},
                                {"trained_on", role},
                                {"winner_permutation", ens.winner},
                                {"winner_global_score", win.global},
                                {"winner_fold_scores", win.fold_scores},
                                {"mean_global_score", mean}};
        }
        rec.summary = {{"models", models}};
    });
}

inline void stage_predict(const Context& ctx) {
    timed_stage(ctx, "predict", [&](StageRecord& rec) {
        const auto roles = load_roles(ctx);
        if (!roles.predict) {
            rec.summary = {{"skipped", "no prediction set"}};
            return;
        }
        const auto coords = read_embedding(ctx, "predict");
        nlohmann::json results = nlohmann::json::object();
        for (const auto& t : ctx.cfg.targets) {
            const std::string rel = "models/" + slug(t.column) + ".model.json";
            if (!ctx.has(rel)) {
                if (roles.embed.targets.count(t.column) || (roles.statistics && roles.statistics->targets.count(t.column))) {
                    throw StageError("predict", "no model for target '" + t.column + "'; run train first (latent-atlas train --config <config>)");
                }
                continue;
            }
            const auto ens = load_model(ctx.file(rel));
            const auto pred = predict(ens, coords.coords);
            std::string csv = "obs_id,prediction";
            if (ens.task == Task::classification) {
                for (const auto& l : ens.class_labels) {
                    csv += ",p_" + latent_atlas::detail::csv_escape(l);
                }
            }
            csv += "\n";
            for (std::size_t i = 0; i < coords.n_obs(); ++i) {
                csv += latent_atlas::detail::csv_escape(coords.obs_ids[i]) + ",";
                if (ens.task == Task::classification) {
                    csv += latent_atlas::detail::csv_escape(ens.class_labels[static_cast<std::size_t>(pred.value[i])]);
                    for (double p : pred.proba[i]) {
                        csv += "," + format_double(p);
                    }
                } else {
                    csv += format_double(pred.value[i]);
                }
                csv += "\n";
            }
            ctx.write("predictions/" + slug(t.column) + ".csv", csv);
            nlohmann::json entry = {{"task", to_string(ens.task)}, {"n_predicted", coords.n_obs()}};
            if (roles.predict->targets.count(t.column)) {
                PredictionTarget pt{&t, ens.task, ens.class_labels};
                const auto truth = detail::encode_target(pt, roles.predict->targets.at(t.column), roles.predict->raw.obs_ids);
                std::vector<double> p_eval, t_eval;
                std::size_t unseen = 0;
                for (std::size_t i = 0; i < truth.size(); ++i) {
                    if (truth[i] < 0) {
                        ++unseen;
                        continue;
                    }
                    p_eval.push_back(pred.value[i]);
                    t_eval.push_back(truth[i]);
                }
                if (unseen) {
                    rec.warnings.push_back(std::to_string(unseen) + " prediction-set labels of '" + t.column + "' were never seen in training; excluded from metrics");
                }
                const auto m = evaluate(p_eval, t_eval, ens.task, ens.n_classes);
                auto mj = to_json(m);
                if (ens.task == Task::classification) {
                    mj["class_labels"] = ens.class_labels;
                }
                ctx.write_json("predictions/" + slug(t.column) + ".metrics.json", mj);
                entry["metrics"] = mj;
            }
            results[t.column] = entry;
        }
        rec.summary = {{"predictions", results}};
    });
}

// ---------------------------------------------------------------------------
// report

inline const std::vector<std::string>& stage_order() {
    static const std::vector<std::string> order{"ingest", "embed", "transform", "dls", "map", "profile", "train", "predict"};
    return order;
}

inline std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/**
 * Assembles report.json from the stage summaries present. Everything except
 * the "runtime" block (timestamps, timings, output location, threads) is a
 * pure function of the config and inputs.
 */
inline nlohmann::json build_report(const Context& ctx, const std::optional<std::string>& failed_stage = std::nullopt, const std::string& error = {}) {
    nlohmann::json report;
    report["tool"] = {{"name", "latent-atlas"}, {"version", version}, {"model_file_version", model_file_version}, {"embedding_model_version", embedding_model_version}};
    report["config"] = echo_config(ctx.cfg);
    nlohmann::json stages = nlohmann::json::object();
    nlohmann::json warnings = nlohmann::json::array();
    nlohmann::json timings = nlohmann::json::object();
    for (const auto& s : stage_order()) {
        const std::string rel = "stages/" + s + ".json";
        if (!ctx.has(rel)) {
            continue;
        }
        auto j = nlohmann::json::parse(read_file(ctx.file(rel)));
        for (const auto& w : j.value("warnings", nlohmann::json::array())) {
            warnings.push_back(s + ": " + w.get<std::string>());
        }
        stages[s] = std::move(j);
        if (ctx.has("timings/" + s + ".json")) {
            timings[s] = nlohmann::json::parse(read_file(ctx.file("timings/" + s + ".json"))).at("seconds");
        }
    }
    report["stages"] = stages;
    report["warnings"] = warnings;
    if (stages.contains("dls")) {
        report["dls"] = {{"R", stages["dls"]["R"]}, {"realized_overlap", stages["dls"]["realized_overlap"]}};
    }
    if (stages.contains("map") && stages["map"].contains("maps")) {
        report["clusters"] = stages["map"]["maps"];
    }
    if (stages.contains("profile") && stages["profile"].contains("profiles")) {
        report["profiles"] = stages["profile"]["profiles"];
        report["profile_test"] = stages["profile"]["test"];
    }
    if (stages.contains("predict") && stages["predict"].contains("predictions")) {
        for (const auto& [name, entry] : stages["predict"]["predictions"].items()) {
            if (entry.contains("metrics")) {
                report["metrics"][name] = entry["metrics"];
            }
        }
    }
    report["status"] = failed_stage ? "failed" : "ok";
    if (failed_stage) {
        report["failed_stage"] = *failed_stage;
        report["error"] = error;
    }
    report["runtime"] = {{"generated_at", utc_now()}, {"timings_seconds", timings}, {"output_dir", ctx.out.string()}, {"threads", ctx.threads}};
    return report;
}

inline void stage_report(const Context& ctx) {
    const auto split = ctx.read_json("ingest/split.json", "ingest");
    if (ctx.has("embed/embed.csv")) {
        const auto emb = read_embedding(ctx, "embed");
        if (emb.n_components() == 2) {
            ScatterColors colors;
            std::string title = "embedding";
            const auto roles = load_roles(ctx);
            for (const auto& t : ctx.cfg.targets) {
                if (!roles.embed.targets.count(t.column)) {
                    continue;
                }
                const auto& cells = roles.embed.targets.at(t.column);
                if (t.type == TargetType::continuous) {
                    colors.values = numeric_target(t.column, TargetKind::continuous, roles.embed.raw.obs_ids, cells).values;
                } else {
                    colors.categories = cells;
                }
                title += " coloured by " + t.column;
                break;
            }
            ctx.write("plots/embedding.svg", render_scatter_svg(emb, colors, title));
        }
    }
    ctx.write_json("report.json", build_report(ctx));
}

/// Runs every stage in order; on failure writes a partial report naming the stage and rethrows.
inline void run_pipeline(const Context& ctx) {
    std::filesystem::create_directories(ctx.out);
    const std::vector<std::pair<std::string, std::function<void()>>> stages{
        {"ingest", [&] { stage_ingest(ctx); }},       {"embed", [&] { stage_embed(ctx); }}, {"transform", [&] { stage_transform(ctx); }},
        {"dls", [&] { stage_dls(ctx); }},             {"map", [&] { stage_map(ctx); }},     {"profile", [&] { stage_profile(ctx); }},
        {"train", [&] { stage_train(ctx); }},         {"predict", [&] { stage_predict(ctx); }},
    };
    for (const auto& [name, fn] : stages) {
        try {
            fn();
        } catch (const Error& e) {
            try {
                ctx.write_json("report.json", build_report(ctx, name, e.what()));
            } catch (...) {
            }
            throw;
        }
    }
    stage_report(ctx);
}

} // namespace latent_atlas::pipeline

#endif
