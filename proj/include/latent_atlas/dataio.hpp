#ifndef LATENT_ATLAS_DATAIO_HPP
#define LATENT_ATLAS_DATAIO_HPP

#include "core.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

/**
 * @file dataio.hpp
 *
 * @brief Loading, validation, flattening and min-max scaling of datasets,
 * plus target (variable of interest) handling.
 */

namespace latent_atlas {

/**
 * Observations x features. `tensor_shape`, when present, records how each
 * row unflattens (row-major) back into its original tensor.
 */
struct FeatureMatrix {
    Matrix values;
    std::vector<std::string> feature_names;
    std::vector<std::size_t> tensor_shape;
    std::vector<std::string> obs_ids;

    std::size_t n_obs() const { return values.rows(); }
    std::size_t n_features() const { return values.cols(); }

    /// Throws DataError when an invariant is broken.
    void validate() const {
        if (obs_ids.size() != values.rows()) {
            throw DataError("obs_ids length " + std::to_string(obs_ids.size()) + " does not match " + std::to_string(values.rows()) + " rows");
        }
        if (!feature_names.empty() && feature_names.size() != values.cols()) {
            throw DataError("feature_names length does not match feature count");
        }
        if (!tensor_shape.empty()) {
            std::size_t prod = 1;
            for (auto s : tensor_shape) {
                if (s == 0) {
                    throw DataError("tensor_shape entries must be positive");
                }
                prod *= s;
            }
            if (prod != values.cols()) {
                throw DataError("tensor_shape product " + std::to_string(prod) + " does not match " + std::to_string(values.cols()) + " features");
            }
        }
        std::unordered_set<std::string> seen;
        for (const auto& id : obs_ids) {
            if (!seen.insert(id).second) {
                throw DataError("duplicate observation id '" + id + "'");
            }
        }
        for (double v : values.data()) {
            if (!std::isfinite(v)) {
                throw DataError("non-finite value in feature matrix");
            }
        }
    }

    FeatureMatrix select(std::span<const std::size_t> idx) const {
        FeatureMatrix out;
        out.values = values.select_rows(idx);
        out.feature_names = feature_names;
        out.tensor_shape = tensor_shape;
        out.obs_ids.reserve(idx.size());
        for (auto i : idx) {
            out.obs_ids.push_back(obs_ids[i]);
        }
        return out;
    }
};

enum class NonFinitePolicy { reject_file, drop_row };

struct CsvOptions {
    NonFinitePolicy non_finite = NonFinitePolicy::reject_file;
    /// Columns removed from the feature set (e.g. known-bad features, target columns).
    std::vector<std::string> exclude_columns;
};

/// Raw CSV: header plus string cells. Minimal RFC-4180 quoting is honoured.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column_index(const std::string& name, const std::string& source) const {
        auto it = std::find(header.begin(), header.end(), name);
        if (it == header.end()) {
            throw DataError("column '" + name + "' not found in " + source);
        }
        return static_cast<std::size_t>(it - header.begin());
    }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur.push_back(c);
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(std::move(cur));
    return out;
}

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') {
            out += "\"\"";
        } else {
            out.push_back(c);
        }
    }
    return out + "\"";
}

} // namespace detail

inline CsvTable read_csv(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) {
        throw DataError("file not found: '" + path.string() + "'");
    }
    std::istringstream in(read_file(path));
    CsvTable table;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (lineno == 1 && line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) {
            line.erase(0, 3);
        }
        if (line.empty() || line == "\r") {
            continue;
        }
        auto cells = detail::split_csv_line(line);
        if (table.header.empty()) {
            table.header = std::move(cells);
            continue;
        }
        if (cells.size() != table.header.size()) {
            throw DataError(path.string() + ": ragged row at line " + std::to_string(lineno) + " (" + std::to_string(cells.size()) + " cells, header has " +
                            std::to_string(table.header.size()) + ")");
        }
        table.rows.push_back(std::move(cells));
    }
    if (table.header.empty()) {
        throw DataError(path.string() + ": missing header row");
    }
    return table;
}

/**
 * Loads a numeric CSV with one id column. Every other non-excluded column is
 * a feature, in file order. Rows with non-finite values either reject the
 * file or are dropped (their ids appended to `dropped_ids`), per `opts`.
 */
inline FeatureMatrix load_feature_csv(const std::filesystem::path& path, const std::string& id_column, const CsvOptions& opts = {},
                                      std::vector<std::string>* dropped_ids = nullptr) {
    const CsvTable table = read_csv(path);
    const std::size_t id_col = table.column_index(id_column, path.string());
    for (const auto& ex : opts.exclude_columns) {
        if (std::find(table.header.begin(), table.header.end(), ex) == table.header.end()) {
            throw DataError("excluded column '" + ex + "' not found in " + path.string());
        }
    }

    std::vector<std::size_t> feature_cols;
    FeatureMatrix fm;
    for (std::size_t c = 0; c < table.header.size(); ++c) {
        if (c == id_col || std::find(opts.exclude_columns.begin(), opts.exclude_columns.end(), table.header[c]) != opts.exclude_columns.end()) {
            continue;
        }
        feature_cols.push_back(c);
        fm.feature_names.push_back(table.header[c]);
    }

    std::vector<double> data;
    data.reserve(table.rows.size() * feature_cols.size());
    std::unordered_set<std::string> seen;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        const auto& row = table.rows[r];
        std::vector<double> parsed(feature_cols.size());
        bool finite = true;
        for (std::size_t j = 0; j < feature_cols.size(); ++j) {
            const auto& cell = row[feature_cols[j]];
            if (!parse_double(cell, parsed[j])) {
                throw DataError(path.string() + ": cannot parse '" + cell + "' as a number at row " + std::to_string(r + 1) + ", column '" +
                                table.header[feature_cols[j]] + "'");
            }
            finite = finite && std::isfinite(parsed[j]);
        }
        const auto& id = row[id_col];
        if (!finite) {
            if (opts.non_finite == NonFinitePolicy::reject_file) {
                throw DataError(path.string() + ": non-finite value in row " + std::to_string(r + 1) + " (id '" + id + "')");
            }
            if (dropped_ids) {
                dropped_ids->push_back(id);
            }
            continue;
        }
        if (!seen.insert(id).second) {
            throw DataError(path.string() + ": duplicate observation id '" + id + "'");
        }
        fm.obs_ids.push_back(id);
        data.insert(data.end(), parsed.begin(), parsed.end());
    }
    fm.values = Matrix(fm.obs_ids.size(), feature_cols.size(), std::move(data));
    return fm;
}

inline std::size_t shape_product(std::span<const std::size_t> shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/**
 * Reads raw little-endian float32 tensors (row-major, one per observation)
 * with a JSON sidecar `{"n_obs", "shape", "obs_ids"}`.
 */
inline FeatureMatrix load_tensor_dataset(const std::filesystem::path& data_path, const std::filesystem::path& sidecar_path,
                                         NonFinitePolicy policy = NonFinitePolicy::reject_file, std::vector<std::string>* dropped_ids = nullptr) {
    nlohmann::json side;
    try {
        side = nlohmann::json::parse(read_file(sidecar_path));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(sidecar_path.string() + ": invalid sidecar JSON: " + e.what());
    }
    std::size_t n_obs = 0;
    std::vector<std::size_t> shape;
    std::vector<std::string> ids;
    try {
        n_obs = side.at("n_obs").get<std::size_t>();
        shape = side.at("shape").get<std::vector<std::size_t>>();
        ids = side.at("obs_ids").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception& e) {
        throw DataError(sidecar_path.string() + ": sidecar must declare n_obs, shape and obs_ids: " + e.what());
    }
    if (shape.empty() || std::find(shape.begin(), shape.end(), std::size_t{0}) != shape.end()) {
        throw DataError(sidecar_path.string() + ": shape entries must be positive");
    }
    if (ids.size() != n_obs) {
        throw DataError(sidecar_path.string() + ": obs_ids has " + std::to_string(ids.size()) + " entries but n_obs is " + std::to_string(n_obs));
    }
    const std::size_t n_features = shape_product(shape);
    const std::string bytes = read_file(data_path);
    const std::size_t expected = n_obs * n_features * 4;
    if (bytes.size() != expected) {
        throw DataError(data_path.string() + ": size mismatch, expected " + std::to_string(expected) + " bytes, found " + std::to_string(bytes.size()));
    }

    FeatureMatrix fm;
    fm.tensor_shape = shape;
    fm.feature_names.reserve(n_features);
    for (std::size_t f = 0; f < n_features; ++f) {
        fm.feature_names.push_back("f" + std::to_string(f));
    }
    std::vector<double> data;
    data.reserve(n_obs * n_features);
    std::unordered_set<std::string> seen;
    for (std::size_t i = 0; i < n_obs; ++i) {
        std::vector<double> row(n_features);
        bool finite = true;
        for (std::size_t f = 0; f < n_features; ++f) {
            std::uint32_t word = 0;
            std::memcpy(&word, bytes.data() + (i * n_features + f) * 4, 4);
            if constexpr (std::endian::native == std::endian::big) {
                word = __builtin_bswap32(word);
            }
            row[f] = static_cast<double>(std::bit_cast<float>(word));
            finite = finite && std::isfinite(row[f]);
        }
        if (!finite) {
            if (policy == NonFinitePolicy::reject_file) {
                throw DataError(data_path.string() + ": non-finite value in observation '" + ids[i] + "'");
            }
            if (dropped_ids) {
                dropped_ids->push_back(ids[i]);
            }
            continue;
        }
        if (!seen.insert(ids[i]).second) {
            throw DataError(sidecar_path.string() + ": duplicate observation id '" + ids[i] + "'");
        }
        fm.obs_ids.push_back(ids[i]);
        data.insert(data.end(), row.begin(), row.end());
    }
    fm.values = Matrix(fm.obs_ids.size(), n_features, std::move(data));
    return fm;
}

/// Writes values as little-endian float32 plus sidecar; the inverse of load_tensor_dataset.
inline std::pair<std::string, std::string> encode_tensor_dataset(const Matrix& values, std::span<const std::size_t> shape, std::span<const std::string> obs_ids) {
    if (shape_product(shape) != values.cols() || obs_ids.size() != values.rows()) {
        throw DataError("tensor encode: shape or ids do not match the matrix");
    }
    std::string bytes(values.rows() * values.cols() * 4, '\0');
    for (std::size_t i = 0; i < values.data().size(); ++i) {
        auto word = std::bit_cast<std::uint32_t>(static_cast<float>(values.data()[i]));
        if constexpr (std::endian::native == std::endian::big) {
            word = __builtin_bswap32(word);
        }
        std::memcpy(bytes.data() + i * 4, &word, 4);
    }
    nlohmann::json side;
    side["n_obs"] = values.rows();
    side["shape"] = std::vector<std::size_t>(shape.begin(), shape.end());
    side["obs_ids"] = std::vector<std::string>(obs_ids.begin(), obs_ids.end());
    return {std::move(bytes), side.dump(2) + "\n"};
}

/**
 * Unflattens feature index `flat` into a row-major multi-index for `shape`.
 */
inline std::vector<std::size_t> unflatten_index(std::size_t flat, std::span<const std::size_t> shape) {
    std::vector<std::size_t> idx(shape.size());
    for (std::size_t d = shape.size(); d-- > 0;) {
        idx[d] = flat % shape[d];
        flat /= shape[d];
    }
    return idx;
}

inline std::size_t flatten_index(std::span<const std::size_t> idx, std::span<const std::size_t> shape) {
    std::size_t flat = 0;
    for (std::size_t d = 0; d < shape.size(); ++d) {
        flat = flat * shape[d] + idx[d];
    }
    return flat;
}

struct ScalingParams {
    std::vector<double> min;
    std::vector<double> max;
    std::vector<bool> constant;

    std::size_t n_features() const { return min.size(); }
};

inline ScalingParams scale_fit(const FeatureMatrix& train) {
    if (train.n_obs() == 0) {
        throw DataError("cannot fit scaling on an empty matrix");
    }
    const auto nf = train.n_features();
    ScalingParams p;
    p.min.assign(nf, std::numeric_limits<double>::infinity());
    p.max.assign(nf, -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < train.n_obs(); ++i) {
        auto row = train.values.row(i);
        for (std::size_t f = 0; f < nf; ++f) {
            p.min[f] = std::min(p.min[f], row[f]);
            p.max[f] = std::max(p.max[f], row[f]);
        }
    }
    p.constant.resize(nf);
    for (std::size_t f = 0; f < nf; ++f) {
        p.constant[f] = p.min[f] == p.max[f];
    }
    return p;
}

/// x -> (x - min) / (max - min); constant features map to 0. Out-of-range values are kept.
inline FeatureMatrix scale_apply(const ScalingParams& params, const FeatureMatrix& m) {
    if (m.n_features() != params.n_features()) {
        throw DataError("scaling expects " + std::to_string(params.n_features()) + " features, got " + std::to_string(m.n_features()));
    }
    FeatureMatrix out = m;
    for (std::size_t i = 0; i < out.n_obs(); ++i) {
        auto row = out.values.row(i);
        for (std::size_t f = 0; f < row.size(); ++f) {
            row[f] = params.constant[f] ? 0.0 : (row[f] - params.min[f]) / (params.max[f] - params.min[f]);
        }
    }
    return out;
}

inline nlohmann::json to_json(const ScalingParams& p) {
    return {{"min", p.min}, {"max", p.max}, {"constant", p.constant}};
}

inline ScalingParams scaling_from_json(const nlohmann::json& j) {
    ScalingParams p;
    p.min = j.at("min").get<std::vector<double>>();
    p.max = j.at("max").get<std::vector<double>>();
    p.constant = j.at("constant").get<std::vector<bool>>();
    if (p.max.size() != p.min.size() || p.constant.size() != p.min.size()) {
        throw DataError("scaling parameters have inconsistent lengths");
    }
    return p;
}

enum class TargetKind { continuous, binary };

struct TargetVariable {
    std::string name;
    TargetKind kind = TargetKind::continuous;
    std::vector<double> values;
    std::vector<std::string> obs_ids;

    void validate() const {
        if (values.size() != obs_ids.size()) {
            throw DataError("target '" + name + "' has " + std::to_string(values.size()) + " values for " + std::to_string(obs_ids.size()) + " observations");
        }
        for (double v : values) {
            if (kind == TargetKind::binary ? (v != 0.0 && v != 1.0) : !std::isfinite(v)) {
                throw DataError("target '" + name + "' has invalid value " + format_double(v));
            }
        }
    }
};

/// Per-observation string labels, the source of one-vs-rest binary targets.
struct CategoricalTarget {
    std::string name;
    std::vector<std::string> labels;
    std::vector<std::string> obs_ids;

    /// Distinct labels, sorted; class index order for classification.
    std::vector<std::string> classes() const {
        std::set<std::string> s(labels.begin(), labels.end());
        return {s.begin(), s.end()};
    }
};

/**
 * One-vs-rest expansion: one binary target per distinct label (sorted by
 * label), named after the label.
 */
inline std::vector<TargetVariable> binarize_target(const CategoricalTarget& cat) {
    const auto classes = cat.classes();
    if (classes.size() < 2) {
        throw DataError("categorical target '" + cat.name + "' needs at least 2 distinct labels");
    }
    std::vector<TargetVariable> out;
    out.reserve(classes.size());
    for (const auto& c : classes) {
        TargetVariable t;
        t.name = c;
        t.kind = TargetKind::binary;
        t.obs_ids = cat.obs_ids;
        t.values.reserve(cat.labels.size());
        for (const auto& l : cat.labels) {
            t.values.push_back(l == c ? 1.0 : 0.0);
        }
        out.push_back(std::move(t));
    }
    return out;
}

/**
 * Reads the named columns of a CSV keyed by `id_column`, returned as
 * id -> cell strings (one per requested column).
 */
inline std::unordered_map<std::string, std::vector<std::string>> read_columns_by_id(const std::filesystem::path& path, const std::string& id_column,
                                                                                   std::span<const std::string> columns) {
    const auto table = read_csv(path);
    const auto id_col = table.column_index(id_column, path.string());
    std::vector<std::size_t> cols;
    for (const auto& c : columns) {
        cols.push_back(table.column_index(c, path.string()));
    }
    std::unordered_map<std::string, std::vector<std::string>> out;
    for (const auto& row : table.rows) {
        std::vector<std::string> cells;
        for (auto c : cols) {
            cells.push_back(row[c]);
        }
        if (!out.emplace(row[id_col], std::move(cells)).second) {
            throw DataError(path.string() + ": duplicate id '" + row[id_col] + "'");
        }
    }
    return out;
}

/// Builds a numeric target aligned with `obs_ids` from label strings.
inline TargetVariable numeric_target(const std::string& name, TargetKind kind, std::span<const std::string> obs_ids, std::span<const std::string> cells) {
    TargetVariable t;
    t.name = name;
    t.kind = kind;
    t.obs_ids.assign(obs_ids.begin(), obs_ids.end());
    for (std::size_t i = 0; i < cells.size(); ++i) {
        double v = 0;
        if (!parse_double(cells[i], v)) {
            throw DataError("target '" + name + "': cannot parse '" + cells[i] + "' for observation '" + obs_ids[i] + "'");
        }
        t.values.push_back(v);
    }
    t.validate();
    return t;
}

} // namespace latent_atlas

#endif
