#ifndef LATENT_ATLAS_PROFILER_HPP
#define LATENT_ATLAS_PROFILER_HPP

#include "core.hpp"
#include "dataio.hpp"
#include "dls.hpp"
#include "statmap.hpp"

#include <json.hpp>

#include <cstdio>

/**
 * @file profiler.hpp
 *
 * @brief Feature profiles of clusters: Mann-Whitney U between observations
 * inside and outside a cluster, per feature, with effect size r = |z| / sqrt(N).
 */

namespace latent_atlas {

struct ClusterMembership {
    std::vector<std::size_t> inside;
    std::vector<std::size_t> outside;

    bool profilable() const { return !inside.empty(); }
};

/// Observations whose pixel lies in the cluster; everything else is outside.
inline ClusterMembership cluster_members(const Cluster& cluster, const DiscreteLatentSpace& dls) {
    ClusterMembership m;
    for (std::size_t i = 0; i < dls.n_obs(); ++i) {
        const auto c = dls.point_cell(i);
        if (c >= dls.n_cells()) {
            throw DataError("cluster pixel outside the latent-space grid");
        }
        (std::binary_search(cluster.pixels.begin(), cluster.pixels.end(), c) ? m.inside : m.outside).push_back(i);
    }
    return m;
}

struct MannWhitney {
    /// U for the first sample: pairs (a, b) with a > b, ties counted 0.5.
    double U = 0;
    double z = 0;
    /// Two-sided, normal approximation.
    double p = 1;
};

/**
 * Midrank U with tie-corrected variance and no continuity correction:
 * z = (U - n_a n_b / 2) / sigma_U,
 * sigma_U^2 = n_a n_b / 12 * ((N + 1) - sum(t^3 - t) / (N (N - 1))).
 */
inline MannWhitney mann_whitney(std::span<const double> a, std::span<const double> b) {
    if (a.empty() || b.empty()) {
        throw DataError("Mann-Whitney test needs two non-empty groups");
    }
    const std::size_t na = a.size(), nb = b.size(), N = na + nb;
    std::vector<std::pair<double, bool>> all;
    all.reserve(N);
    for (double v : a) {
        all.emplace_back(v, true);
    }
    for (double v : b) {
        all.emplace_back(v, false);
    }
    std::sort(all.begin(), all.end(), [](const auto& x, const auto& y) { return x.first < y.first; });

    double rank_sum_a = 0;
    double tie_term = 0;
    for (std::size_t i = 0; i < N;) {
        std::size_t j = i;
        while (j < N && all[j].first == all[i].first) {
            ++j;
        }
        // Ranks i+1 .. j share the midrank.
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t m = i; m < j; ++m) {
            if (all[m].second) {
                rank_sum_a += midrank;
            }
        }
        const double t = static_cast<double>(j - i);
        tie_term += t * t * t - t;
        i = j;
    }
    MannWhitney res;
    const double dna = static_cast<double>(na), dnb = static_cast<double>(nb), dN = static_cast<double>(N);
    res.U = rank_sum_a - dna * (dna + 1) / 2;
    const double mu = dna * dnb / 2;
    double var = dna * dnb / 12.0 * (dN + 1.0);
    if (N > 1) {
        var -= dna * dnb / 12.0 * tie_term / (dN * (dN - 1.0));
    }
    if (var > 0) {
        res.z = (res.U - mu) / std::sqrt(var);
        res.p = std::clamp(std::erfc(std::abs(res.z) / std::sqrt(2.0)), std::numeric_limits<double>::min(), 1.0);
    }
    return res;
}

/// r = |z| / sqrt(N).
inline double effect_size_r(double z, std::size_t N) {
    if (N < 2) {
        throw DataError("effect size needs N >= 2");
    }
    return std::abs(z) / std::sqrt(static_cast<double>(N));
}

struct FeatureEffect {
    std::string feature;
    double U = 0;
    double z = 0;
    double p = 1;
    double r = 0;
    /// +1 when inside values sit higher, -1 lower, 0 indistinguishable.
    int direction = 0;
};

struct EffectSizeProfile {
    std::size_t cluster_id = 0;
    int cluster_sign = 1;
    std::size_t n_in = 0;
    std::size_t n_out = 0;
    std::vector<FeatureEffect> features;
    std::vector<std::size_t> tensor_shape;
    /// True when no feature reaches the effect threshold.
    bool insufficient_effect = false;
    double effect_threshold = 0.2;

    /// r * direction per feature, laid out row-major by tensor_shape when present.
    std::vector<double> signed_map() const {
        std::vector<double> out(features.size());
        for (std::size_t f = 0; f < features.size(); ++f) {
            out[f] = features[f].r * features[f].direction;
        }
        return out;
    }

    /// Feature indices by r descending (ties: lower index first).
    std::vector<std::size_t> ranked() const {
        std::vector<std::size_t> idx(features.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return features[x].r > features[y].r; });
        return idx;
    }
};

namespace detail {

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

} // namespace detail

/**
 * Per-feature Mann-Whitney contrast of observations inside vs outside the
 * cluster. `X` rows must align with the observations housed by `dls`.
 * Direction comes from the medians, falling back to the sign of z when the
 * medians tie.
 */
inline EffectSizeProfile cluster_profile(const Cluster& cluster, const FeatureMatrix& X, const DiscreteLatentSpace& dls, std::size_t min_members = 5,
                                         double effect_threshold = 0.2, int threads = 1) {
    if (X.n_obs() != dls.n_obs()) {
        throw DataError("feature matrix has " + std::to_string(X.n_obs()) + " rows but the latent space houses " + std::to_string(dls.n_obs()));
    }
    const auto members = cluster_members(cluster, dls);
    if (!members.profilable()) {
        throw DataError("cluster " + std::to_string(cluster.id) + " covers no observation");
    }
    if (members.inside.size() < min_members || members.outside.size() < min_members) {
        throw DataError("cluster " + std::to_string(cluster.id) + " has too few members (" + std::to_string(members.inside.size()) + " inside, " +
                        std::to_string(members.outside.size()) + " outside; need " + std::to_string(min_members) + " each)");
    }
    EffectSizeProfile prof;
    prof.cluster_id = cluster.id;
    prof.cluster_sign = cluster.sign;
    prof.n_in = members.inside.size();
    prof.n_out = members.outside.size();
    prof.tensor_shape = X.tensor_shape;
    prof.effect_threshold = effect_threshold;
    prof.features.resize(X.n_features());
    const std::size_t N = prof.n_in + prof.n_out;

    parallel_for(X.n_features(), threads, [&](std::size_t f) {
        std::vector<double> in, out;
        in.reserve(prof.n_in);
        out.reserve(prof.n_out);
        for (auto i : members.inside) {
            in.push_back(X.values(i, f));
        }
        for (auto i : members.outside) {
            out.push_back(X.values(i, f));
        }
        const auto mw = mann_whitney(in, out);
        auto& fe = prof.features[f];
        fe.feature = f < X.feature_names.size() ? X.feature_names[f] : "f" + std::to_string(f);
        fe.U = mw.U;
        fe.z = mw.z;
        fe.p = mw.p;
        fe.r = effect_size_r(mw.z, N);
        const double mi = detail::median(in), mo = detail::median(out);
        fe.direction = mi > mo ? 1 : mi < mo ? -1 : (mw.z > 0 ? 1 : mw.z < 0 ? -1 : 0);
    });
    prof.insufficient_effect = std::none_of(prof.features.begin(), prof.features.end(), [&](const FeatureEffect& fe) { return fe.r >= effect_threshold; });
    return prof;
}

// ---------------------------------------------------------------------------
// Export

inline std::string profile_csv_header() {
    return "cluster_id,feature_name,U,z,p,r,direction,n_in,n_out\n";
}

inline std::string profile_to_csv_rows(const EffectSizeProfile& prof) {
    std::string out;
    for (const auto& fe : prof.features) {
        out += std::to_string(prof.cluster_id) + "," + detail::csv_escape(fe.feature) + "," + format_double(fe.U) + "," + format_double(fe.z) + "," +
               format_double(fe.p) + "," + format_double(fe.r) + "," + (fe.direction > 0 ? "+" : fe.direction < 0 ? "-" : "0") + "," +
               std::to_string(prof.n_in) + "," + std::to_string(prof.n_out) + "\n";
    }
    return out;
}

/// "feature: z-scored U = 7.23, P < 0.001, effect size = 0.31"
inline std::string describe_effect(const FeatureEffect& fe) {
    char buf[160];
    const char* p_op = fe.p < 0.001 ? "<" : "=";
    const double p_shown = fe.p < 0.001 ? 0.001 : fe.p;
    std::snprintf(buf, sizeof buf, "z-scored U = %.2f, P %s %.3f, effect size = %.2f", fe.z, p_op, p_shown, fe.r);
    return fe.feature + ": " + buf;
}

/// Signed r-map as an 8-bit PGM; requires a 2-D tensor shape (rows x cols).
inline std::string profile_to_pgm(const EffectSizeProfile& prof) {
    if (prof.tensor_shape.size() != 2) {
        throw DataError("profile PGM requires a 2-D tensor shape");
    }
    const auto rows = prof.tensor_shape[0], cols = prof.tensor_shape[1];
    std::string out = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
    for (double v : prof.signed_map()) {
        out.push_back(static_cast<char>(signed_level(v)));
    }
    return out;
}

inline nlohmann::json profile_summary_json(const EffectSizeProfile& prof, std::size_t top = 5) {
    nlohmann::json feats = nlohmann::json::array();
    const auto order = prof.ranked();
    for (std::size_t m = 0; m < std::min(top, order.size()); ++m) {
        const auto& fe = prof.features[order[m]];
        feats.push_back({{"feature", fe.feature}, {"z", fe.z}, {"p_uncorrected", fe.p}, {"r", fe.r}, {"direction", fe.direction}, {"summary", describe_effect(fe)}});
    }
    return {{"cluster_id", prof.cluster_id},
            {"cluster_sign", prof.cluster_sign > 0 ? "+" : "-"},
            {"n_in", prof.n_in},
            {"n_out", prof.n_out},
            {"insufficient_effect", prof.insufficient_effect},
            {"top_features", feats}};
}

} // namespace latent_atlas

#endif
