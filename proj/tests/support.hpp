#ifndef LATENT_ATLAS_TEST_SUPPORT_HPP
#define LATENT_ATLAS_TEST_SUPPORT_HPP

#include <latent_atlas/core.hpp>
#include <latent_atlas/dataio.hpp>

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

namespace test_support {

/// Standard normal draw (Box-Muller) on the library's deterministic stream.
inline double normal(latent_atlas::Rng& rng) {
    double u1 = rng.uniform();
    while (u1 <= 0.0) {
        u1 = rng.uniform();
    }
    const double u2 = rng.uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

inline std::vector<std::string> ids(std::size_t n, const std::string& prefix = "o") {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) {
        out.push_back(prefix + std::to_string(i));
    }
    return out;
}

inline latent_atlas::FeatureMatrix features(const latent_atlas::Matrix& m) {
    latent_atlas::FeatureMatrix fm;
    fm.values = m;
    fm.obs_ids = ids(m.rows());
    for (std::size_t f = 0; f < m.cols(); ++f) {
        fm.feature_names.push_back("f" + std::to_string(f));
    }
    return fm;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
    auto p = std::filesystem::temp_directory_path() / ("latent_atlas_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

/// Two Gaussian blobs of n points each in d dimensions, offset by `shift` along `axes`. Label 1 marks the shifted blob.
inline latent_atlas::Matrix two_blobs(std::size_t n, std::size_t d, std::vector<std::size_t> axes, double shift, std::uint64_t seed,
                                      std::vector<double>* labels = nullptr) {
    latent_atlas::Rng rng(seed);
    latent_atlas::Matrix m(2 * n, d);
    for (std::size_t i = 0; i < 2 * n; ++i) {
        for (std::size_t f = 0; f < d; ++f) {
            m(i, f) = normal(rng);
        }
        if (i >= n) {
            for (auto a : axes) {
                m(i, a) += shift;
            }
        }
        if (labels) {
            labels->push_back(i >= n ? 1.0 : 0.0);
        }
    }
    return m;
}

} // namespace test_support

#endif
