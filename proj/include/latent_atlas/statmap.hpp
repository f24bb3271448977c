#ifndef LATENT_ATLAS_STATMAP_HPP
#define LATENT_ATLAS_STATMAP_HPP

#include "core.hpp"
#include "dls.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <json.hpp>

#include <deque>
#include <optional>

/**
 * @file statmap.hpp
 *
 * @brief Gaussian proximity over a discrete latent space, per-pixel
 * correlation with a variable of interest, and signed cluster extraction.
 */

namespace latent_atlas {

enum class CorrelationMethod { pearson, point_biserial };

inline std::string to_string(CorrelationMethod m) {
    return m == CorrelationMethod::pearson ? "pearson" : "point_biserial";
}

/// Truncation radius of a proximity bump, in multiples of sigma.
inline constexpr double proximity_extent = 4.0;

/// max(1, R / 32) pixels.
inline double default_sigma(std::size_t R) {
    return std::max(1.0, static_cast<double>(R) / 32.0);
}

/// One integer offset of the truncated Gaussian stencil and its value.
struct StencilEntry {
    std::vector<long long> offset;
    double value;
};

/**
 * All integer offsets within Euclidean distance 4 sigma and their values
 * exp(-|o|^2 / (2 sigma^2)). The centre offset has value exactly 1.
 */
inline std::vector<StencilEntry> gaussian_stencil(double sigma, std::size_t D) {
    if (!(sigma > 0)) {
        throw ConfigError("sigma must be positive");
    }
    const double radius = proximity_extent * sigma;
    const double r2max = radius * radius;
    const auto reach = static_cast<long long>(std::floor(radius));
    std::vector<StencilEntry> out;
    std::vector<long long> o(D, -reach);
    while (true) {
        double r2 = 0;
        for (auto v : o) {
            r2 += static_cast<double>(v * v);
        }
        if (r2 <= r2max) {
            out.push_back({o, std::exp(-r2 / (2.0 * sigma * sigma))});
        }
        std::size_t d = D;
        while (d-- > 0) {
            if (++o[d] <= reach) {
                break;
            }
            o[d] = -reach;
        }
        if (d == static_cast<std::size_t>(-1)) {
            break;
        }
    }
    return out;
}

/// Proximity of every cell in [0, R)^D to `center`: 0 beyond 4 sigma.
inline std::vector<double> gaussian_slice(std::span<const std::size_t> center, double sigma, std::size_t R) {
    const std::size_t D = center.size();
    const auto cells = grid_cells(R, D);
    if (cells > max_grid_cells) {
        throw ConfigError("grid too large for a proximity slice");
    }
    std::vector<double> grid(static_cast<std::size_t>(cells), 0.0);
    std::vector<std::size_t> px(D);
    for (const auto& s : gaussian_stencil(sigma, D)) {
        bool inside = true;
        for (std::size_t d = 0; d < D && inside; ++d) {
            const long long p = static_cast<long long>(center[d]) + s.offset[d];
            inside = p >= 0 && p < static_cast<long long>(R);
            px[d] = static_cast<std::size_t>(std::max(0LL, p));
        }
        if (inside) {
            grid[static_cast<std::size_t>(cell_index(px, R))] = s.value;
        }
    }
    return grid;
}

/**
 * Pearson product-moment correlation (two-pass, centred). Point-biserial is
 * the same formula with y coded 0/1. Returns nullopt when either vector is
 * constant.
 */
inline std::optional<double> correlate(std::span<const double> x, std::span<const double> y, CorrelationMethod method = CorrelationMethod::pearson) {
    if (x.size() != y.size()) {
        throw DataError("correlate: length mismatch (" + std::to_string(x.size()) + " vs " + std::to_string(y.size()) + ")");
    }
    if (x.size() < 3) {
        throw DataError("correlate: need at least 3 observations");
    }
    if (method == CorrelationMethod::point_biserial) {
        for (double v : y) {
            if (v != 0.0 && v != 1.0) {
                throw DataError("point-biserial correlation needs a 0/1 variable");
            }
        }
    }
    const double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double dx = x[i] - mx, dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    const bool x_const = std::all_of(x.begin(), x.end(), [&](double v) { return v == x[0]; });
    const bool y_const = std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; });
    if (x_const || y_const || !(sxx > 0) || !(syy > 0)) {
        return std::nullopt;
    }
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// Two-sided p-value of r under H0 (t test with n - 2 degrees of freedom).
inline double correlation_p_value(double r, std::size_t n) {
    if (n < 3) {
        return 1.0;
    }
    if (std::abs(r) >= 1.0) {
        return 0.0;
    }
    const double df = static_cast<double>(n - 2);
    const double t = r * std::sqrt(df / (1.0 - r * r));
    boost::math::students_t dist(df);
    return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

/// Per-cell correlation with the target; `defined[c] == 0` where proximity is constant.
struct CorrelationMap {
    std::size_t R = 0;
    std::size_t D = 0;
    std::vector<double> r;
    std::vector<double> p;
    std::vector<std::uint8_t> defined;
    CorrelationMethod method = CorrelationMethod::pearson;
    std::string target;
    double sigma = 1.0;
    std::size_t n_obs = 0;

    std::size_t n_cells() const { return r.size(); }
    std::size_t defined_count() const { return static_cast<std::size_t>(std::count(defined.begin(), defined.end(), std::uint8_t{1})); }
};

/**
 * Correlates, at every cell, the vector of proximities to each housed
 * observation with the target. Proximity vectors are sparse (zero beyond
 * 4 sigma), so each observation stamps its stencil into running sums and
 * r is finished per cell from those sums. Cells with no observation within
 * reach, or with identical proximity to every observation, are undefined.
 */
inline CorrelationMap correlation_map(const DiscreteLatentSpace& dls, double sigma, std::span<const double> target, CorrelationMethod method,
                                      const std::string& target_name = {}, int threads = 1) {
    const std::size_t n = dls.n_obs();
    if (target.size() != n) {
        throw DataError("target has " + std::to_string(target.size()) + " values but the latent space houses " + std::to_string(n) + " observations");
    }
    if (method == CorrelationMethod::point_biserial) {
        for (double v : target) {
            if (v != 0.0 && v != 1.0) {
                throw DataError("point-biserial map needs a 0/1 target");
            }
        }
    }
    CorrelationMap map;
    map.R = dls.R;
    map.D = dls.D;
    map.method = method;
    map.target = target_name;
    map.sigma = sigma;
    map.n_obs = n;
    const std::size_t cells = static_cast<std::size_t>(dls.n_cells());
    map.r.assign(cells, 0.0);
    map.p.assign(cells, 1.0);
    map.defined.assign(cells, 0);
    if (n == 0) {
        return map;
    }

    double mean_y = 0;
    for (double v : target) {
        mean_y += v;
    }
    mean_y /= static_cast<double>(n);
    double syy = 0;
    for (double v : target) {
        syy += (v - mean_y) * (v - mean_y);
    }

    const auto stencil = gaussian_stencil(sigma, dls.D);
    std::vector<double> sx(cells, 0.0), sxx(cells, 0.0), sxy(cells, 0.0);
    std::vector<std::uint32_t> count(cells, 0);
    std::vector<double> vmin(cells, std::numeric_limits<double>::infinity()), vmax(cells, 0.0);
    std::vector<std::size_t> px(dls.D);
    const auto R = static_cast<long long>(dls.R);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& center = dls.point_pixels[i];
        const double yc = target[i] - mean_y;
        for (const auto& s : stencil) {
            bool inside = true;
            for (std::size_t d = 0; d < dls.D && inside; ++d) {
                const long long q = static_cast<long long>(center[d]) + s.offset[d];
                inside = q >= 0 && q < R;
                px[d] = static_cast<std::size_t>(std::max(0LL, q));
            }
            if (!inside) {
                continue;
            }
            const auto c = static_cast<std::size_t>(cell_index(px, dls.R));
            sx[c] += s.value;
            sxx[c] += s.value * s.value;
            sxy[c] += s.value * yc;
            ++count[c];
            vmin[c] = std::min(vmin[c], s.value);
            vmax[c] = std::max(vmax[c], s.value);
        }
    }

    const double nd = static_cast<double>(n);
    parallel_for(cells, threads, [&](std::size_t c) {
        if (count[c] == 0 || !(syy > 0)) {
            return;
        }
        if (count[c] == n && vmin[c] == vmax[c]) {
            return;
        }
        const double cxx = sxx[c] - sx[c] * sx[c] / nd;
        if (!(cxx > 0)) {
            return;
        }
        const double r = std::clamp(sxy[c] / std::sqrt(cxx * syy), -1.0, 1.0);
        map.r[c] = r;
        map.p[c] = correlation_p_value(r, n);
        map.defined[c] = 1;
    });
    return map;
}

enum class Connectivity { full, face };

struct Cluster {
    std::size_t id = 0;
    int sign = 1;
    /// Member cells, ascending cell index.
    std::vector<std::uint64_t> pixels;
    double peak_r = 0;
    std::uint64_t peak_pixel = 0;
    double peak_p = 1;

    std::size_t size() const { return pixels.size(); }
};

struct ClusterSet {
    std::vector<Cluster> clusters;
    /// Suprathreshold components dropped for being smaller than min_pixels.
    std::vector<Cluster> dropped;
    double r_min = 0.2;
    std::size_t min_pixels = 1;
    Connectivity connectivity = Connectivity::full;

    std::size_t count(int sign) const {
        return static_cast<std::size_t>(std::count_if(clusters.begin(), clusters.end(), [&](const Cluster& c) { return c.sign == sign; }));
    }
};

namespace detail {

/// Neighbour offsets: every non-zero offset in {-1,0,1}^D (full) or the 2D axis steps (face).
inline std::vector<std::vector<int>> neighborhood(std::size_t D, Connectivity conn) {
    std::vector<std::vector<int>> out;
    if (conn == Connectivity::face) {
        for (std::size_t d = 0; d < D; ++d) {
            for (int s : {-1, 1}) {
                std::vector<int> o(D, 0);
                o[d] = s;
                out.push_back(o);
            }
        }
        return out;
    }
    std::vector<int> o(D, -1);
    while (true) {
        if (std::any_of(o.begin(), o.end(), [](int v) { return v != 0; })) {
            out.push_back(o);
        }
        std::size_t d = D;
        while (d-- > 0) {
            if (++o[d] <= 1) {
                break;
            }
            o[d] = -1;
        }
        if (d == static_cast<std::size_t>(-1)) {
            break;
        }
    }
    return out;
}

} // namespace detail

/**
 * Connected components of {r >= r_min} (positive) and {r <= -r_min}
 * (negative) over defined cells. Components smaller than `min_pixels` are
 * moved to `dropped`. Clusters are ordered by peak |r| descending (ties:
 * positive first, then lowest cell) and numbered in that order.
 */
inline ClusterSet extract_clusters(const CorrelationMap& map, double r_min = 0.2, Connectivity conn = Connectivity::full, std::size_t min_pixels = 5) {
    if (!(r_min > 0)) {
        throw ConfigError("r_min must be positive");
    }
    ClusterSet set;
    set.r_min = r_min;
    set.min_pixels = min_pixels;
    set.connectivity = conn;
    const auto nbh = detail::neighborhood(map.D, conn);
    const std::size_t cells = map.n_cells();
    std::vector<std::uint8_t> visited(cells, 0);
    std::vector<Cluster> found;

    for (int sign : {1, -1}) {
        auto supra = [&](std::size_t c) { return map.defined[c] && (sign > 0 ? map.r[c] >= r_min : map.r[c] <= -r_min); };
        for (std::size_t start = 0; start < cells; ++start) {
            if (visited[start] || !supra(start)) {
                continue;
            }
            Cluster cl;
            cl.sign = sign;
            std::deque<std::size_t> queue{start};
            visited[start] = 1;
            while (!queue.empty()) {
                const std::size_t c = queue.front();
                queue.pop_front();
                cl.pixels.push_back(c);
                const auto px = cell_coords(c, map.R, map.D);
                std::vector<std::size_t> q(map.D);
                for (const auto& o : nbh) {
                    bool inside = true;
                    for (std::size_t d = 0; d < map.D && inside; ++d) {
                        const long long v = static_cast<long long>(px[d]) + o[d];
                        inside = v >= 0 && v < static_cast<long long>(map.R);
                        q[d] = static_cast<std::size_t>(std::max(0LL, v));
                    }
                    if (!inside) {
                        continue;
                    }
                    const auto nc = static_cast<std::size_t>(cell_index(q, map.R));
                    if (!visited[nc] && supra(nc)) {
                        visited[nc] = 1;
                        queue.push_back(nc);
                    }
                }
            }
            std::sort(cl.pixels.begin(), cl.pixels.end());
            cl.peak_pixel = cl.pixels.front();
            cl.peak_r = map.r[cl.pixels.front()];
            for (auto c : cl.pixels) {
                if (std::abs(map.r[c]) > std::abs(cl.peak_r)) {
                    cl.peak_r = map.r[c];
                    cl.peak_pixel = c;
                }
            }
            cl.peak_p = map.p[cl.peak_pixel];
            (cl.size() >= min_pixels ? found : set.dropped).push_back(std::move(cl));
        }
    }
    std::stable_sort(found.begin(), found.end(), [](const Cluster& a, const Cluster& b) {
        if (std::abs(a.peak_r) != std::abs(b.peak_r)) {
            return std::abs(a.peak_r) > std::abs(b.peak_r);
        }
        if (a.sign != b.sign) {
            return a.sign > b.sign;
        }
        return a.pixels.front() < b.pixels.front();
    });
    for (std::size_t i = 0; i < found.size(); ++i) {
        found[i].id = i;
    }
    set.clusters = std::move(found);
    return set;
}

// ---------------------------------------------------------------------------
// Export

/// One line per cell: pixel coordinates, r, p and the defined flag.
inline std::string correlation_map_to_csv(const CorrelationMap& map) {
    std::string out;
    for (std::size_t d = 0; d < map.D; ++d) {
        out += axis_name(d) + ",";
    }
    out += "r,p,defined\n";
    for (std::size_t c = 0; c < map.n_cells(); ++c) {
        const auto px = cell_coords(c, map.R, map.D);
        for (auto v : px) {
            out += std::to_string(v) + ",";
        }
        if (map.defined[c]) {
            out += format_double(map.r[c]) + "," + format_double(map.p[c]) + ",1\n";
        } else {
            out += ",,0\n";
        }
    }
    return out;
}

/// r in [-1, 1] mapped linearly to [0, 255]; undefined cells are 0.
inline std::uint8_t signed_level(double r) {
    return static_cast<std::uint8_t>(std::lround((std::clamp(r, -1.0, 1.0) + 1.0) * 0.5 * 255.0));
}

inline std::string correlation_map_to_pgm(const CorrelationMap& map) {
    if (map.D != 2) {
        throw DataError("PGM export requires a 2-D map");
    }
    std::vector<std::uint8_t> levels(map.n_cells(), 0);
    for (std::size_t c = 0; c < levels.size(); ++c) {
        levels[c] = map.defined[c] ? signed_level(map.r[c]) : 0;
    }
    return grid_to_pgm(levels, map.R);
}

inline nlohmann::json to_json(const Cluster& c, std::size_t R, std::size_t D) {
    return {{"id", c.id},
            {"sign", c.sign > 0 ? "+" : "-"},
            {"size", c.size()},
            {"peak_r", c.peak_r},
            {"peak_p_uncorrected", c.peak_p},
            {"peak_pixel", cell_coords(c.peak_pixel, R, D)},
            {"pixels", c.pixels}};
}

inline nlohmann::json to_json(const ClusterSet& s, const CorrelationMap& map) {
    nlohmann::json clusters = nlohmann::json::array();
    for (const auto& c : s.clusters) {
        clusters.push_back(to_json(c, map.R, map.D));
    }
    return {{"target", map.target},
            {"method", to_string(map.method)},
            {"sigma", map.sigma},
            {"r_min", s.r_min},
            {"min_pixels", s.min_pixels},
            {"connectivity", s.connectivity == Connectivity::full ? "full" : "face"},
            {"defined_pixels", map.defined_count()},
            {"positive_clusters", s.count(1)},
            {"negative_clusters", s.count(-1)},
            {"dropped_components", s.dropped.size()},
            {"clusters", clusters}};
}

} // namespace latent_atlas

#endif
