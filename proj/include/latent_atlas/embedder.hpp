#ifndef LATENT_ATLAS_EMBEDDER_HPP
#define LATENT_ATLAS_EMBEDDER_HPP

#include "core.hpp"
#include "dataio.hpp"

#include <json.hpp>

#include <optional>

/**
 * @file embedder.hpp
 *
 * @brief UMAP-style nonlinear embedding: exact k-NN graph, smooth-kNN
 * calibration, fuzzy union, curve fit and SGD layout with negative sampling.
 * Also out-of-sample transform and precomputed-embedding input.
 */

namespace latent_atlas {

/// Low-dimensional coordinates, one row per observation.
struct Embedding {
    Matrix coords;
    std::vector<std::string> obs_ids;

    std::size_t n_obs() const { return coords.rows(); }
    std::size_t n_components() const { return coords.cols(); }

    bool operator==(const Embedding&) const = default;
};

/// Exact k nearest neighbours per observation, ascending by (distance, index).
struct NeighborGraph {
    std::size_t k = 0;
    std::vector<std::vector<std::size_t>> indices;
    std::vector<std::vector<double>> distances;

    std::size_t size() const { return indices.size(); }
    bool operator==(const NeighborGraph&) const = default;
};

/**
 * Symmetric sparse weight matrix in CSR form (neighbour lists sorted by
 * index, no diagonal) plus the per-point calibration used to build it.
 */
struct FuzzyGraph {
    std::vector<std::size_t> offsets{0};
    std::vector<std::size_t> neighbors;
    std::vector<double> weights;
    std::vector<double> rho;
    std::vector<double> sigma;

    std::size_t size() const { return offsets.size() - 1; }

    std::span<const std::size_t> neighbors_of(std::size_t i) const { return {neighbors.data() + offsets[i], offsets[i + 1] - offsets[i]}; }
    std::span<const double> weights_of(std::size_t i) const { return {weights.data() + offsets[i], offsets[i + 1] - offsets[i]}; }

    double weight(std::size_t i, std::size_t j) const {
        auto nb = neighbors_of(i);
        auto it = std::lower_bound(nb.begin(), nb.end(), j);
        if (it == nb.end() || *it != j) {
            return 0.0;
        }
        return weights[offsets[i] + static_cast<std::size_t>(it - nb.begin())];
    }

    bool operator==(const FuzzyGraph&) const = default;
};

/**
 * Exact Euclidean k-NN by brute force. Ties are broken by lower index.
 * Rows are processed independently so the result does not depend on `threads`.
 */
inline NeighborGraph knn_graph(const Matrix& X, std::size_t k, int threads = 1) {
    const std::size_t n = X.rows();
    if (n < 2) {
        throw DataError("k-NN graph needs at least 2 observations");
    }
    if (k == 0 || k >= n) {
        throw DataError("k must be in [1, n_obs); got k=" + std::to_string(k) + " with n_obs=" + std::to_string(n));
    }
    NeighborGraph g;
    g.k = k;
    g.indices.resize(n);
    g.distances.resize(n);
    parallel_for(n, threads, [&](std::size_t i) {
        std::vector<std::pair<double, std::size_t>> cand;
        cand.reserve(n - 1);
        auto xi = X.row(i);
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i) {
                cand.emplace_back(squared_distance(xi, X.row(j)), j);
            }
        }
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
        g.indices[i].resize(k);
        g.distances[i].resize(k);
        for (std::size_t m = 0; m < k; ++m) {
            g.indices[i][m] = cand[m].second;
            g.distances[i][m] = std::sqrt(cand[m].first);
        }
    });
    return g;
}

struct Calibration {
    double rho = 0;
    double sigma = 0;
};

inline constexpr double sigma_min = 1e-8;
inline constexpr double sigma_max = 1e8;

namespace detail {

inline double membership_sum(std::span<const double> d, double rho, double sigma) {
    double s = 0;
    for (double x : d) {
        s += std::exp(-std::max(0.0, x - rho) / sigma);
    }
    return s;
}

} // namespace detail

/**
 * Finds rho = nearest distance and the bandwidth sigma with
 * sum_j exp(-max(0, d_j - rho) / sigma) = log2(k). The sum is increasing in
 * sigma, so a geometric bisection over [sigma_min, sigma_max] brackets it;
 * targets outside the reachable range clamp to the interval ends.
 */
inline Calibration smooth_knn_calibrate(std::span<const double> distances, std::size_t k, double tol = 1e-5, int max_iter = 64) {
    Calibration c;
    if (distances.empty()) {
        c.sigma = sigma_max;
        return c;
    }
    c.rho = distances.front();
    const double target = std::log2(static_cast<double>(k));

    double lo = sigma_min;
    double hi = sigma_max;
    const double f_lo = detail::membership_sum(distances, c.rho, lo);
    if (f_lo >= target - tol) {
        c.sigma = lo;
        return c;
    }
    if (detail::membership_sum(distances, c.rho, hi) <= target + tol) {
        c.sigma = hi;
        return c;
    }
    double mid = std::sqrt(lo * hi);
    for (int it = 0; it < max_iter; ++it) {
        mid = std::sqrt(lo * hi);
        const double f = detail::membership_sum(distances, c.rho, mid);
        if (std::abs(f - target) <= tol) {
            break;
        }
        (f > target ? hi : lo) = mid;
    }
    c.sigma = std::clamp(mid, sigma_min, sigma_max);
    return c;
}

/// Directed weight list: per source point, (target, weight) with weight in (0, 1].
using DirectedWeights = std::vector<std::vector<std::pair<std::size_t, double>>>;

/// Probabilistic t-conorm symmetrisation: w = w_ij + w_ji - w_ij * w_ji.
inline FuzzyGraph fuzzy_union(const DirectedWeights& directed) {
    const std::size_t n = directed.size();
    std::vector<std::map<std::size_t, double>> rows(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (auto [j, w] : directed[i]) {
            if (j >= n) {
                throw DataError("fuzzy_union: neighbour index out of range");
            }
            if (j == i || !(w > 0.0)) {
                continue;
            }
            rows[i][j] = std::max(rows[i][j], w);
        }
    }
    std::vector<std::map<std::size_t, double>> reverse(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (auto [j, w] : rows[i]) {
            reverse[j][i] = w;
        }
    }
    FuzzyGraph g;
    for (std::size_t i = 0; i < n; ++i) {
        std::map<std::size_t, std::pair<double, double>> both;
        for (auto [j, w] : rows[i]) {
            both[j].first = w;
        }
        for (auto [j, w] : reverse[i]) {
            both[j].second = w;
        }
        for (auto [j, ww] : both) {
            const double w = ww.first + ww.second - ww.first * ww.second;
            g.neighbors.push_back(j);
            g.weights.push_back(w);
        }
        g.offsets.push_back(g.neighbors.size());
    }
    return g;
}

/// Calibrates every point and symmetrises the resulting memberships.
inline FuzzyGraph build_fuzzy_graph(const NeighborGraph& nn, double tol = 1e-5, int max_iter = 64) {
    const std::size_t n = nn.size();
    DirectedWeights directed(n);
    std::vector<double> rho(n), sigma(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto cal = smooth_knn_calibrate(nn.distances[i], nn.k, tol, max_iter);
        rho[i] = cal.rho;
        sigma[i] = cal.sigma;
        for (std::size_t m = 0; m < nn.k; ++m) {
            const double w = std::exp(-std::max(0.0, nn.distances[i][m] - cal.rho) / cal.sigma);
            if (w > 0.0) {
                directed[i].emplace_back(nn.indices[i][m], w);
            }
        }
    }
    auto g = fuzzy_union(directed);
    g.rho = std::move(rho);
    g.sigma = std::move(sigma);
    return g;
}

struct CurveFit {
    double a = 1.0;
    double b = 1.0;
    /// Sum of squared residuals over the fitting grid.
    double residual = 0.0;
};

/// phi(x) = 1 / (1 + a x^(2b)), the low-dimensional similarity curve.
inline double curve_phi(double x, double a, double b) {
    return 1.0 / (1.0 + a * std::pow(x, 2.0 * b));
}

namespace detail {

inline std::pair<std::vector<double>, std::vector<double>> curve_target_grid(double min_dist, double spread) {
    constexpr std::size_t n = 300;
    std::vector<double> xs(n), ys(n);
    const double hi = 3.0 * spread;
    for (std::size_t i = 0; i < n; ++i) {
        xs[i] = hi * static_cast<double>(i) / static_cast<double>(n - 1);
        ys[i] = xs[i] < min_dist ? 1.0 : std::exp(-(xs[i] - min_dist) / spread);
    }
    return {xs, ys};
}

inline double curve_sse(std::span<const double> xs, std::span<const double> ys, double a, double b) {
    double s = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const double r = curve_phi(xs[i], a, b) - ys[i];
        s += r * r;
    }
    return s;
}

} // namespace detail

/**
 * Least-squares fit of phi to the piecewise target (1 up to min_dist, then
 * exponential decay with scale `spread`) on 300 points over [0, 3 spread].
 * Levenberg-Marquardt with a fixed iteration budget; the best fit seen is
 * returned even when the budget runs out.
 */
inline CurveFit fit_curve_ab(double min_dist, double spread) {
    if (!(min_dist > 0) || !(spread > 0) || !(min_dist < spread * 10)) {
        throw ConfigError("fit_curve_ab requires 0 < min_dist < 10 * spread");
    }
    const auto [xs, ys] = detail::curve_target_grid(min_dist, spread);
    CurveFit best;
    best.residual = detail::curve_sse(xs, ys, best.a, best.b);
    double lambda = 1e-3;
    for (int it = 0; it < 200; ++it) {
        // Normal equations J^T J and J^T r for the two parameters.
        double jaa = 0, jab = 0, jbb = 0, ga = 0, gb = 0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const double x = xs[i];
            if (x <= 0) {
                continue;
            }
            const double p = std::pow(x, 2.0 * best.b);
            const double den = 1.0 + best.a * p;
            const double phi = 1.0 / den;
            const double r = phi - ys[i];
            const double da = -p / (den * den);
            const double db = -best.a * p * 2.0 * std::log(x) / (den * den);
            jaa += da * da;
            jab += da * db;
            jbb += db * db;
            ga += da * r;
            gb += db * r;
        }
        bool improved = false;
        for (int tries = 0; tries < 20 && !improved; ++tries) {
            const double m00 = jaa * (1 + lambda), m11 = jbb * (1 + lambda), m01 = jab;
            const double det = m00 * m11 - m01 * m01;
            if (!(std::abs(det) > 0)) {
                lambda *= 10;
                continue;
            }
            const double step_a = -(m11 * ga - m01 * gb) / det;
            const double step_b = -(m00 * gb - m01 * ga) / det;
            const double na = best.a + step_a;
            const double nb = best.b + step_b;
            if (na > 0 && nb > 0) {
                const double sse = detail::curve_sse(xs, ys, na, nb);
                if (sse < best.residual) {
                    best = {na, nb, sse};
                    lambda = std::max(lambda / 10, 1e-12);
                    improved = true;
                    break;
                }
            }
            lambda *= 10;
        }
        if (!improved) {
            break;
        }
    }
    return best;
}

/// Hyperparameters of the embedder. `epochs < 0` selects the size-based default.
struct EmbedderParams {
    std::size_t k = 15;
    double min_dist = 0.1;
    double spread = 1.0;
    std::size_t n_components = 2;
    int epochs = -1;
    double learning_rate = 1.0;
    double negative_sample_rate = 5.0;
    int transform_epochs = 0;
    std::uint64_t seed = 0;

    int resolved_epochs(std::size_t n_obs) const {
        if (epochs >= 0) {
            return epochs;
        }
        return n_obs <= 10000 ? 500 : 200;
    }

    void validate() const {
        if (k < 1) {
            throw ConfigError("embedder.k must be >= 1");
        }
        if (n_components < 2) {
            throw ConfigError("embedder.n_components must be >= 2");
        }
        if (!(learning_rate > 0) || !(negative_sample_rate >= 0)) {
            throw ConfigError("embedder.learning_rate must be > 0 and negative_sample_rate >= 0");
        }
        if (transform_epochs < 0) {
            throw ConfigError("embedder.transform_epochs must be >= 0");
        }
    }
};

struct LayoutOptions {
    double a = 1.577;
    double b = 0.895;
    int epochs = 500;
    double learning_rate = 1.0;
    double negative_sample_rate = 5.0;
    std::uint64_t seed = 0;
};

namespace detail {

inline double clip4(double v) {
    return std::clamp(v, -4.0, 4.0);
}

struct EdgeSchedule {
    std::vector<std::size_t> head, tail;
    std::vector<double> weight;
    std::vector<double> epochs_per_sample;
};

/// Directed edge list (both directions of every undirected edge), pruned below max/epochs.
inline EdgeSchedule make_schedule(const FuzzyGraph& g, int epochs) {
    EdgeSchedule s;
    double wmax = 0;
    for (double w : g.weights) {
        wmax = std::max(wmax, w);
    }
    if (wmax <= 0) {
        return s;
    }
    const double cutoff = epochs > 0 ? wmax / static_cast<double>(epochs) : 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
        auto nb = g.neighbors_of(i);
        auto ws = g.weights_of(i);
        for (std::size_t m = 0; m < nb.size(); ++m) {
            if (ws[m] < cutoff) {
                continue;
            }
            s.head.push_back(i);
            s.tail.push_back(nb[m]);
            s.weight.push_back(ws[m]);
            s.epochs_per_sample.push_back(wmax / ws[m]);
        }
    }
    return s;
}

} // namespace detail

/**
 * SGD layout of a fuzzy graph. Each directed edge is sampled once every
 * `max_w / w` epochs; a sample pulls both endpoints together along the
 * gradient of log phi and pushes the head away from `negative_sample_rate`
 * uniformly drawn non-neighbours. The step size decays linearly to zero and
 * every gradient component is clipped to [-4, 4].
 */
inline Matrix layout_sgd(const FuzzyGraph& graph, Matrix init, const LayoutOptions& opt) {
    if (init.rows() != graph.size()) {
        throw DataError("layout init has " + std::to_string(init.rows()) + " rows but graph has " + std::to_string(graph.size()) + " vertices");
    }
    const std::size_t n = init.rows();
    if (opt.epochs <= 0 || n < 2) {
        return init;
    }
    const std::size_t dim = init.cols();
    const auto sched = detail::make_schedule(graph, opt.epochs);
    const std::size_t n_edges = sched.head.size();
    if (n_edges == 0) {
        return init;
    }
    std::vector<double> next_sample = sched.epochs_per_sample;
    std::vector<double> per_negative(n_edges), next_negative(n_edges);
    for (std::size_t e = 0; e < n_edges; ++e) {
        per_negative[e] = opt.negative_sample_rate > 0 ? sched.epochs_per_sample[e] / opt.negative_sample_rate : std::numeric_limits<double>::infinity();
        next_negative[e] = per_negative[e];
    }

    Rng rng(opt.seed);
    const double a = opt.a, b = opt.b;
    std::vector<double> delta(dim);
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
        const double alpha = opt.learning_rate * (1.0 - static_cast<double>(epoch) / static_cast<double>(opt.epochs));
        const double ep = static_cast<double>(epoch);
        for (std::size_t e = 0; e < n_edges; ++e) {
            if (next_sample[e] > ep) {
                continue;
            }
            const std::size_t i = sched.head[e];
            const std::size_t j = sched.tail[e];
            auto cur = init.row(i);
            auto other = init.row(j);

            double d2 = 0;
            for (std::size_t d = 0; d < dim; ++d) {
                delta[d] = cur[d] - other[d];
                d2 += delta[d] * delta[d];
            }
            if (d2 > 0) {
                const double pb = std::pow(d2, b);
                const double coef = -2.0 * a * b * pb / d2 / (a * pb + 1.0);
                for (std::size_t d = 0; d < dim; ++d) {
                    const double g = detail::clip4(coef * delta[d]) * alpha;
                    cur[d] += g;
                    other[d] -= g;
                }
            }
            next_sample[e] += sched.epochs_per_sample[e];

            const auto n_neg = static_cast<long long>(std::floor((ep - next_negative[e]) / per_negative[e]));
            auto nb = graph.neighbors_of(i);
            for (long long s = 0; s < n_neg; ++s) {
                const auto kidx = static_cast<std::size_t>(rng.below(n));
                if (kidx == i || std::binary_search(nb.begin(), nb.end(), kidx)) {
                    continue;
                }
                auto neg = init.row(kidx);
                double r2 = 0;
                for (std::size_t d = 0; d < dim; ++d) {
                    delta[d] = cur[d] - neg[d];
                    r2 += delta[d] * delta[d];
                }
                if (r2 > 0) {
                    const double coef = 2.0 * b / ((0.001 + r2) * (a * std::pow(r2, b) + 1.0));
                    for (std::size_t d = 0; d < dim; ++d) {
                        cur[d] += detail::clip4(coef * delta[d]) * alpha;
                    }
                } else {
                    for (std::size_t d = 0; d < dim; ++d) {
                        cur[d] += 4.0 * alpha;
                    }
                }
            }
            if (n_neg > 0) {
                next_negative[e] += static_cast<double>(n_neg) * per_negative[e];
            }
        }
    }
    return init;
}

/// Uniform random coordinates in [-10, 10]^dim.
inline Matrix random_init(std::size_t n, std::size_t dim, std::uint64_t seed) {
    Rng rng(seed);
    Matrix m(n, dim);
    for (double& v : m.data()) {
        v = rng.uniform(-10.0, 10.0);
    }
    return m;
}

/// Everything needed to reproduce a fitted layout and to transform new points.
struct EmbeddingModel {
    EmbedderParams params;
    double a = 0;
    double b = 0;
    FeatureMatrix training;
    NeighborGraph knn;
    FuzzyGraph graph;
    Embedding embedding;
    std::optional<ScalingParams> scaling;
};

/**
 * Fits the embedding: k-NN graph, calibration and fuzzy union, curve fit,
 * seeded random initialisation and SGD layout. `k` is reduced to n_obs - 1
 * for tiny inputs.
 */
inline EmbeddingModel fit(const FeatureMatrix& X, const EmbedderParams& params, int threads = 1) {
    params.validate();
    if (X.n_obs() < 2) {
        throw DataError("embedding needs at least 2 observations");
    }
    EmbeddingModel model;
    model.params = params;
    model.params.k = std::min(params.k, X.n_obs() - 1);
    model.training = X;
    model.knn = knn_graph(X.values, model.params.k, threads);
    model.graph = build_fuzzy_graph(model.knn);
    const auto ab = fit_curve_ab(params.min_dist, params.spread);
    model.a = ab.a;
    model.b = ab.b;

    LayoutOptions opt;
    opt.a = model.a;
    opt.b = model.b;
    opt.epochs = params.resolved_epochs(X.n_obs());
    opt.learning_rate = params.learning_rate;
    opt.negative_sample_rate = params.negative_sample_rate;
    opt.seed = derive_seed(params.seed, 1);
    auto init = random_init(X.n_obs(), params.n_components, derive_seed(params.seed, 0));
    model.embedding.coords = layout_sgd(model.graph, std::move(init), opt);
    model.embedding.obs_ids = X.obs_ids;
    for (double v : model.embedding.coords.data()) {
        if (!std::isfinite(v)) {
            throw StageError("embed", "layout produced non-finite coordinates");
        }
    }
    return model;
}

/**
 * Places each new point at the membership-weighted mean of its k nearest
 * training points' coordinates. Weights apply each neighbour's fitted
 * (rho, sigma) to the new point's distance. An exact duplicate of a training
 * row lands on that row's coordinates. Optional refinement runs
 * `params.transform_epochs` SGD epochs with the training layout held fixed.
 */
inline Embedding transform(const EmbeddingModel& model, const FeatureMatrix& X_new, int threads = 1) {
    const auto& train = model.training.values;
    if (X_new.n_features() != train.cols()) {
        throw DataError("transform expects " + std::to_string(train.cols()) + " features, got " + std::to_string(X_new.n_features()));
    }
    const std::size_t k = model.params.k;
    const std::size_t n_train = train.rows();
    const std::size_t dim = model.embedding.n_components();
    const std::size_t n_new = X_new.n_obs();

    Embedding out;
    out.obs_ids = X_new.obs_ids;
    out.coords = Matrix(n_new, dim);
    std::vector<std::vector<std::pair<std::size_t, double>>> links(n_new);

    parallel_for(n_new, threads, [&](std::size_t i) {
        auto xi = X_new.values.row(i);
        std::vector<std::pair<double, std::size_t>> cand(n_train);
        for (std::size_t j = 0; j < n_train; ++j) {
            cand[j] = {squared_distance(xi, train.row(j)), j};
        }
        std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
        auto dst = out.coords.row(i);
        if (cand[0].first == 0.0) {
            auto src = model.embedding.coords.row(cand[0].second);
            std::copy(src.begin(), src.end(), dst.begin());
            links[i].emplace_back(cand[0].second, 1.0);
            return;
        }
        double wsum = 0;
        for (std::size_t m = 0; m < k; ++m) {
            const std::size_t j = cand[m].second;
            const double d = std::sqrt(cand[m].first);
            const double w = std::exp(-std::max(0.0, d - model.graph.rho[j]) / model.graph.sigma[j]);
            links[i].emplace_back(j, w);
            wsum += w;
        }
        if (!(wsum > 0)) {
            for (auto& l : links[i]) {
                l.second = 1.0;
            }
            wsum = static_cast<double>(k);
        }
        for (const auto& [j, w] : links[i]) {
            auto src = model.embedding.coords.row(j);
            for (std::size_t d = 0; d < dim; ++d) {
                dst[d] += w / wsum * src[d];
            }
        }
    });

    const int refine = model.params.transform_epochs;
    if (refine > 0 && n_new > 0) {
        const auto& fixed = model.embedding.coords;
        struct Edge {
            std::size_t point, anchor;
            double per_sample;
        };
        std::vector<Edge> edges;
        double wmax = 0;
        for (const auto& l : links) {
            for (const auto& [j, w] : l) {
                wmax = std::max(wmax, w);
            }
        }
        for (std::size_t i = 0; i < n_new; ++i) {
            for (const auto& [j, w] : links[i]) {
                if (w > 0 && w >= wmax / refine) {
                    edges.push_back({i, j, wmax / w});
                }
            }
        }
        std::vector<double> next(edges.size());
        for (std::size_t e = 0; e < edges.size(); ++e) {
            next[e] = edges[e].per_sample;
        }
        Rng rng(derive_seed(model.params.seed, 2));
        const double a = model.a, b = model.b;
        const auto n_neg = static_cast<std::size_t>(model.params.negative_sample_rate);
        std::vector<double> delta(dim);
        for (int epoch = 0; epoch < refine; ++epoch) {
            const double alpha = model.params.learning_rate * (1.0 - static_cast<double>(epoch) / refine);
            for (std::size_t e = 0; e < edges.size(); ++e) {
                if (next[e] > epoch) {
                    continue;
                }
                next[e] += edges[e].per_sample;
                auto cur = out.coords.row(edges[e].point);
                auto anchor = fixed.row(edges[e].anchor);
                double d2 = 0;
                for (std::size_t d = 0; d < dim; ++d) {
                    delta[d] = cur[d] - anchor[d];
                    d2 += delta[d] * delta[d];
                }
                if (d2 > 0) {
                    const double pb = std::pow(d2, b);
                    const double coef = -2.0 * a * b * pb / d2 / (a * pb + 1.0);
                    for (std::size_t d = 0; d < dim; ++d) {
                        cur[d] += detail::clip4(coef * delta[d]) * alpha;
                    }
                }
                for (std::size_t s = 0; s < n_neg; ++s) {
                    auto neg = fixed.row(static_cast<std::size_t>(rng.below(n_train)));
                    double r2 = 0;
                    for (std::size_t d = 0; d < dim; ++d) {
                        delta[d] = cur[d] - neg[d];
                        r2 += delta[d] * delta[d];
                    }
                    if (r2 > 0) {
                        const double coef = 2.0 * b / ((0.001 + r2) * (a * std::pow(r2, b) + 1.0));
                        for (std::size_t d = 0; d < dim; ++d) {
                            cur[d] += detail::clip4(coef * delta[d]) * alpha;
                        }
                    }
                }
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedding CSV: id,dim0,dim1,...

inline std::string embedding_to_csv(const Embedding& e) {
    std::string s = "id";
    for (std::size_t d = 0; d < e.n_components(); ++d) {
        s += ",dim" + std::to_string(d);
    }
    s += "\n";
    for (std::size_t i = 0; i < e.n_obs(); ++i) {
        s += detail::csv_escape(e.obs_ids[i]);
        for (double v : e.coords.row(i)) {
            s += "," + format_double(v);
        }
        s += "\n";
    }
    return s;
}

/// Reads `id,dim0,...`; every coordinate must be finite.
inline Embedding load_precomputed(const std::filesystem::path& path, const std::string& id_column = "id") {
    auto fm = load_feature_csv(path, id_column);
    if (fm.n_features() < 1) {
        throw DataError(path.string() + ": embedding CSV has no coordinate columns");
    }
    Embedding e;
    e.coords = std::move(fm.values);
    e.obs_ids = std::move(fm.obs_ids);
    return e;
}

// ---------------------------------------------------------------------------
// Model persistence

inline constexpr int embedding_model_version = 1;

namespace detail {

inline nlohmann::json matrix_json(const Matrix& m) {
    return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
    return Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(), j.at("data").get<std::vector<double>>());
}

} // namespace detail

inline nlohmann::json to_json(const EmbedderParams& p) {
    return {{"k", p.k},
            {"min_dist", p.min_dist},
            {"spread", p.spread},
            {"n_components", p.n_components},
            {"epochs", p.epochs},
            {"learning_rate", p.learning_rate},
            {"negative_sample_rate", p.negative_sample_rate},
            {"transform_epochs", p.transform_epochs},
            {"seed", p.seed}};
}

inline EmbedderParams embedder_params_from_json(const nlohmann::json& j) {
    EmbedderParams p;
    p.k = j.at("k").get<std::size_t>();
    p.min_dist = j.at("min_dist").get<double>();
    p.spread = j.at("spread").get<double>();
    p.n_components = j.at("n_components").get<std::size_t>();
    p.epochs = j.at("epochs").get<int>();
    p.learning_rate = j.at("learning_rate").get<double>();
    p.negative_sample_rate = j.at("negative_sample_rate").get<double>();
    p.transform_epochs = j.at("transform_epochs").get<int>();
    p.seed = j.at("seed").get<std::uint64_t>();
    return p;
}

inline std::string save_embedding_model(const EmbeddingModel& m) {
    nlohmann::json j;
    j["format"] = "latent-atlas-embedding-model";
    j["version"] = embedding_model_version;
    j["params"] = to_json(m.params);
    j["a"] = m.a;
    j["b"] = m.b;
    j["training"] = {{"features", detail::matrix_json(m.training.values)},
                     {"feature_names", m.training.feature_names},
                     {"tensor_shape", m.training.tensor_shape},
                     {"obs_ids", m.training.obs_ids}};
    j["knn"] = {{"k", m.knn.k}, {"indices", m.knn.indices}, {"distances", m.knn.distances}};
    j["graph"] = {{"offsets", m.graph.offsets}, {"neighbors", m.graph.neighbors}, {"weights", m.graph.weights}, {"rho", m.graph.rho}, {"sigma", m.graph.sigma}};
    j["embedding"] = detail::matrix_json(m.embedding.coords);
    j["scaling"] = m.scaling ? to_json(*m.scaling) : nlohmann::json(nullptr);
    return j.dump() + "\n";
}

inline EmbeddingModel load_embedding_model(const std::string& text) {
    EmbeddingModel m;
    try {
        const auto j = nlohmann::json::parse(text);
        if (j.at("format").get<std::string>() != "latent-atlas-embedding-model") {
            throw DataError("not an embedding model file");
        }
        if (j.at("version").get<int>() != embedding_model_version) {
            throw DataError("unsupported embedding model version " + j.at("version").dump());
        }
        m.params = embedder_params_from_json(j.at("params"));
        m.a = j.at("a").get<double>();
        m.b = j.at("b").get<double>();
        const auto& t = j.at("training");
        m.training.values = detail::matrix_from_json(t.at("features"));
        m.training.feature_names = t.at("feature_names").get<std::vector<std::string>>();
        m.training.tensor_shape = t.at("tensor_shape").get<std::vector<std::size_t>>();
        m.training.obs_ids = t.at("obs_ids").get<std::vector<std::string>>();
        m.knn.k = j.at("knn").at("k").get<std::size_t>();
        m.knn.indices = j.at("knn").at("indices").get<std::vector<std::vector<std::size_t>>>();
        m.knn.distances = j.at("knn").at("distances").get<std::vector<std::vector<double>>>();
        const auto& g = j.at("graph");
        m.graph.offsets = g.at("offsets").get<std::vector<std::size_t>>();
        m.graph.neighbors = g.at("neighbors").get<std::vector<std::size_t>>();
        m.graph.weights = g.at("weights").get<std::vector<double>>();
        m.graph.rho = g.at("rho").get<std::vector<double>>();
        m.graph.sigma = g.at("sigma").get<std::vector<double>>();
        m.embedding.coords = detail::matrix_from_json(j.at("embedding"));
        m.embedding.obs_ids = m.training.obs_ids;
        if (!j.at("scaling").is_null()) {
            m.scaling = scaling_from_json(j.at("scaling"));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("corrupt embedding model: ") + e.what());
    }
    return m;
}

} // namespace latent_atlas

#endif
