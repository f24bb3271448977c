#ifndef LATENT_ATLAS_DLS_HPP
#define LATENT_ATLAS_DLS_HPP

#include "core.hpp"
#include "embedder.hpp"

#include <json.hpp>

/**
 * @file dls.hpp
 *
 * @brief Discrete latent space: unit-cube normalisation of an embedding and
 * binning into an R-per-axis pixel grid whose resolution is chosen from a
 * target overlap fraction.
 */

namespace latent_atlas {

enum class Binning { floor, nearest };

/// Grids larger than this many cells are refused.
inline constexpr std::uint64_t max_grid_cells = std::uint64_t{1} << 26;

/// Per-dimension affine map into the unit cube, fixed by a reference embedding.
struct Normalization {
    std::vector<double> min;
    std::vector<double> max;

    std::size_t dims() const { return min.size(); }

    /// Coordinates of `coords` under this map; projected points may leave [0, 1].
    Matrix apply(const Matrix& coords) const {
        if (coords.cols() != dims()) {
            throw DataError("normalisation expects " + std::to_string(dims()) + " dimensions, got " + std::to_string(coords.cols()));
        }
        Matrix out = coords;
        for (std::size_t i = 0; i < out.rows(); ++i) {
            auto r = out.row(i);
            for (std::size_t d = 0; d < r.size(); ++d) {
                r[d] = (r[d] - min[d]) / (max[d] - min[d]);
            }
        }
        return out;
    }
};

/// Fits the per-dimension (min, max) of `e`. A constant dimension is an error.
inline Normalization fit_normalization(const Embedding& e) {
    if (e.n_obs() < 2) {
        throw DataError("normalisation needs at least 2 points");
    }
    Normalization n;
    n.min.assign(e.n_components(), std::numeric_limits<double>::infinity());
    n.max.assign(e.n_components(), -std::numeric_limits<double>::infinity());
    for (std::size_t i = 0; i < e.n_obs(); ++i) {
        auto r = e.coords.row(i);
        for (std::size_t d = 0; d < r.size(); ++d) {
            n.min[d] = std::min(n.min[d], r[d]);
            n.max[d] = std::max(n.max[d], r[d]);
        }
    }
    for (std::size_t d = 0; d < n.dims(); ++d) {
        if (!(n.min[d] < n.max[d])) {
            throw DataError("embedding dimension " + std::to_string(d) + " is constant; cannot normalise");
        }
    }
    return n;
}

/// Unit-cube coordinates of `e` together with the map that produced them.
inline std::pair<Matrix, Normalization> normalize_embedding(const Embedding& e) {
    auto n = fit_normalization(e);
    return {n.apply(e.coords), std::move(n)};
}

/**
 * Pixel index of a unit coordinate. floor: floor(u R); nearest:
 * round(u (R - 1)). Both clamp into [0, R); `clamped` is set when u had to
 * be pulled back into range (u outside [0, 1]).
 */
inline std::size_t pixel_index(double u, std::size_t R, Binning mode, bool* clamped = nullptr) {
    const double scaled = mode == Binning::floor ? std::floor(u * static_cast<double>(R)) : std::round(u * static_cast<double>(R - 1));
    const bool out_of_range = u < 0.0 || u > 1.0;
    if (clamped) {
        *clamped = out_of_range;
    }
    if (!(scaled >= 0.0)) {
        return 0;
    }
    if (scaled >= static_cast<double>(R - 1)) {
        return R - 1;
    }
    return static_cast<std::size_t>(scaled);
}

inline std::uint64_t grid_cells(std::size_t R, std::size_t D) {
    std::uint64_t cells = 1;
    for (std::size_t d = 0; d < D; ++d) {
        if (cells > max_grid_cells) {
            return cells;
        }
        cells *= R;
    }
    return cells;
}

/// Row-major cell index with dimension 0 varying slowest.
inline std::uint64_t cell_index(std::span<const std::size_t> pixel, std::size_t R) {
    std::uint64_t idx = 0;
    for (auto p : pixel) {
        idx = idx * R + p;
    }
    return idx;
}

inline std::vector<std::size_t> cell_coords(std::uint64_t idx, std::size_t R, std::size_t D) {
    std::vector<std::size_t> out(D);
    for (std::size_t d = D; d-- > 0;) {
        out[d] = static_cast<std::size_t>(idx % R);
        idx /= R;
    }
    return out;
}

/// 1 - distinct occupied pixels / n_obs at resolution R.
inline double overlap_at(const Matrix& points01, std::size_t R, Binning mode = Binning::floor) {
    const std::size_t n = points01.rows();
    if (n == 0) {
        return 0.0;
    }
    std::vector<std::uint64_t> cells(n);
    std::vector<std::size_t> px(points01.cols());
    for (std::size_t i = 0; i < n; ++i) {
        auto r = points01.row(i);
        for (std::size_t d = 0; d < r.size(); ++d) {
            px[d] = pixel_index(r[d], R, mode);
        }
        // Collision-free for any R^D that fits in 64 bits; larger grids are refused upstream.
        cells[i] = cell_index(px, R);
    }
    std::sort(cells.begin(), cells.end());
    const auto distinct = static_cast<std::size_t>(std::unique(cells.begin(), cells.end()) - cells.begin());
    return 1.0 - static_cast<double>(distinct) / static_cast<double>(n);
}

struct ResolutionResult {
    std::size_t R = 2;
    double overlap = 0.0;
    /// Set when no R <= R_max met the target; R is then R_max.
    bool unsatisfiable = false;
    /// Set when the linear fallback had to repair a non-monotone binary search.
    bool used_fallback = false;
};

/**
 * Smallest R in [2, R_max] with overlap(R) <= target. Binary search assumes
 * overlap is non-increasing in R; the result is then checked directly
 * against overlap(R - 1) and, if that check fails, a downward linear scan
 * restores local minimality. R_max is lowered to respect the grid-size guard.
 */
inline ResolutionResult find_resolution(const Matrix& points01, double overlap_target, std::size_t R_max, Binning mode = Binning::floor) {
    if (points01.rows() < 2) {
        throw DataError("resolution search needs at least 2 points");
    }
    if (!(overlap_target >= 0.0 && overlap_target < 1.0)) {
        throw ConfigError("overlap_target must be in [0, 1)");
    }
    const std::size_t D = points01.cols();
    while (R_max > 2 && grid_cells(R_max, D) > max_grid_cells) {
        --R_max;
    }
    R_max = std::max<std::size_t>(R_max, 2);
    auto ov = [&](std::size_t R) { return overlap_at(points01, R, mode); };

    ResolutionResult res;
    const double top = ov(R_max);
    if (top > overlap_target) {
        res.R = R_max;
        res.overlap = top;
        res.unsatisfiable = true;
        return res;
    }
    const double bottom = ov(2);
    if (bottom <= overlap_target) {
        res.R = 2;
        res.overlap = bottom;
        return res;
    }
    // Invariant: ov(lo) > target, ov(hi) <= target.
    std::size_t lo = 2, hi = R_max;
    double hi_overlap = top;
    while (hi - lo > 1) {
        const std::size_t mid = lo + (hi - lo) / 2;
        const double o = ov(mid);
        if (o <= overlap_target) {
            hi = mid;
            hi_overlap = o;
        } else {
            lo = mid;
        }
    }
    std::size_t R = hi;
    double overlap = hi_overlap;
    while (R > 2) {
        const double below = ov(R - 1);
        if (below > overlap_target) {
            break;
        }
        res.used_fallback = true;
        --R;
        overlap = below;
    }
    res.R = R;
    res.overlap = overlap;
    return res;
}

/**
 * Discretised latent space: each housed observation owns one pixel;
 * `occupancy` is the 0/1 image of `point_pixels` over [0, R)^D.
 */
struct DiscreteLatentSpace {
    std::size_t R = 0;
    std::size_t D = 0;
    Binning binning = Binning::floor;
    Normalization norm;
    std::vector<std::vector<std::size_t>> point_pixels;
    std::vector<std::uint8_t> occupancy;
    std::vector<std::string> obs_ids;
    /// Points whose normalised coordinate fell outside [0, 1] and were clamped.
    std::size_t clamped_points = 0;

    std::uint64_t n_cells() const { return occupancy.size(); }
    std::size_t n_obs() const { return point_pixels.size(); }

    std::uint64_t point_cell(std::size_t i) const { return cell_index(point_pixels[i], R); }

    std::size_t occupied_count() const { return static_cast<std::size_t>(std::count(occupancy.begin(), occupancy.end(), std::uint8_t{1})); }
};

/// Bins `points01` at resolution R and builds the occupancy grid.
inline DiscreteLatentSpace discretize(const Matrix& points01, std::size_t R, Binning mode = Binning::floor) {
    if (R < 2) {
        throw ConfigError("resolution must be >= 2");
    }
    const std::size_t D = points01.cols();
    const auto cells = grid_cells(R, D);
    if (cells > max_grid_cells) {
        throw ConfigError("grid of " + std::to_string(R) + "^" + std::to_string(D) + " cells exceeds the 2^26 cell limit");
    }
    DiscreteLatentSpace dls;
    dls.R = R;
    dls.D = D;
    dls.binning = mode;
    dls.occupancy.assign(static_cast<std::size_t>(cells), 0);
    dls.point_pixels.resize(points01.rows());
    for (std::size_t i = 0; i < points01.rows(); ++i) {
        auto r = points01.row(i);
        auto& px = dls.point_pixels[i];
        px.resize(D);
        bool any_clamped = false;
        for (std::size_t d = 0; d < D; ++d) {
            bool c = false;
            px[d] = pixel_index(r[d], R, mode, &c);
            any_clamped = any_clamped || c;
        }
        dls.clamped_points += any_clamped ? 1 : 0;
        dls.occupancy[static_cast<std::size_t>(cell_index(px, R))] = 1;
    }
    return dls;
}

struct DlsParams {
    double overlap_target = 0.05;
    std::size_t R_max = 1024;
    Binning binning = Binning::floor;
    /// Fixed resolution; 0 searches for one.
    std::size_t resolution = 0;
};

struct DlsBuild {
    DiscreteLatentSpace dls;
    ResolutionResult resolution;
    double realized_overlap = 0;
};

/**
 * Normalises `housed` with the map fitted on `reference`, picks R from the
 * housed points and discretises them.
 */
inline DlsBuild build_dls(const Embedding& reference, const Embedding& housed, const DlsParams& params) {
    DlsBuild out;
    const auto norm = fit_normalization(reference);
    const Matrix pts = norm.apply(housed.coords);
    if (params.resolution > 0) {
        out.resolution.R = params.resolution;
        out.resolution.overlap = overlap_at(pts, params.resolution, params.binning);
    } else {
        out.resolution = find_resolution(pts, params.overlap_target, params.R_max, params.binning);
    }
    out.dls = discretize(pts, out.resolution.R, params.binning);
    out.dls.norm = norm;
    out.dls.obs_ids = housed.obs_ids;
    out.realized_overlap = 1.0 - static_cast<double>(out.dls.occupied_count()) / static_cast<double>(std::max<std::size_t>(1, housed.n_obs()));
    return out;
}

// ---------------------------------------------------------------------------
// Export

/// P5 PGM, 8-bit. Image column = dim 0, image row = R - 1 - dim 1 (dim 1 points up).
inline std::string grid_to_pgm(std::span<const std::uint8_t> levels, std::size_t R) {
    std::string out = "P5\n" + std::to_string(R) + " " + std::to_string(R) + "\n255\n";
    const std::size_t header = out.size();
    out.resize(header + R * R);
    for (std::size_t x = 0; x < R; ++x) {
        for (std::size_t y = 0; y < R; ++y) {
            out[header + (R - 1 - y) * R + x] = static_cast<char>(levels[x * R + y]);
        }
    }
    return out;
}

inline std::string occupancy_to_pgm(const DiscreteLatentSpace& dls) {
    if (dls.D != 2) {
        throw DataError("PGM export requires a 2-D latent space");
    }
    std::vector<std::uint8_t> levels(dls.occupancy.size());
    for (std::size_t i = 0; i < levels.size(); ++i) {
        levels[i] = dls.occupancy[i] ? 255 : 0;
    }
    return grid_to_pgm(levels, dls.R);
}

inline std::string axis_name(std::size_t d) {
    static const char* names[] = {"pixel_x", "pixel_y", "pixel_z"};
    return d < 3 ? names[d] : "pixel_d" + std::to_string(d);
}

/// Occupied cells, one per line, in cell-index order.
inline std::string occupancy_to_csv(const DiscreteLatentSpace& dls) {
    std::string out;
    for (std::size_t d = 0; d < dls.D; ++d) {
        out += (d ? "," : "") + axis_name(d);
    }
    out += "\n";
    for (std::uint64_t c = 0; c < dls.n_cells(); ++c) {
        if (!dls.occupancy[static_cast<std::size_t>(c)]) {
            continue;
        }
        auto px = cell_coords(c, dls.R, dls.D);
        for (std::size_t d = 0; d < dls.D; ++d) {
            out += (d ? "," : "") + std::to_string(px[d]);
        }
        out += "\n";
    }
    return out;
}

inline std::string to_string(Binning b) {
    return b == Binning::floor ? "floor" : "nearest";
}

inline nlohmann::json dls_summary_json(const DlsBuild& b) {
    return {{"R", b.dls.R},
            {"D", b.dls.D},
            {"binning", to_string(b.dls.binning)},
            {"norm_min", b.dls.norm.min},
            {"norm_max", b.dls.norm.max},
            {"n_obs", b.dls.n_obs()},
            {"occupied_pixels", b.dls.occupied_count()},
            {"realized_overlap", b.realized_overlap},
            {"unsatisfiable_overlap", b.resolution.unsatisfiable},
            {"clamped_points", b.dls.clamped_points}};
}

} // namespace latent_atlas

#endif
