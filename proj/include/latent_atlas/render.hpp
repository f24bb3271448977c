#ifndef LATENT_ATLAS_RENDER_HPP
#define LATENT_ATLAS_RENDER_HPP

#include "dls.hpp"
#include "embedder.hpp"
#include "statmap.hpp"

#include <cstdio>

/**
 * @file render.hpp
 *
 * @brief Deterministic SVG scatter plots of 2-D embeddings, coloured by a
 * categorical or continuous variable, with optional cluster outlines.
 */

namespace latent_atlas {

/// Colouring of the points: categories take precedence over values when both are set.
struct ScatterColors {
    std::vector<std::string> categories;
    std::vector<double> values;
};

struct ClusterOverlay {
    const Normalization* norm = nullptr;
    std::size_t R = 0;
    Binning binning = Binning::floor;
    const ClusterSet* clusters = nullptr;
};

namespace detail {

inline constexpr const char* palette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

inline std::string hex_color(double t) {
    // Dark blue -> teal -> yellow ramp.
    static constexpr double stops[3][3] = {{68, 1, 84}, {33, 145, 140}, {253, 231, 37}};
    t = std::clamp(t, 0.0, 1.0);
    const double s = t * 2.0;
    const int k = std::min(1, static_cast<int>(s));
    const double f = s - k;
    char buf[8];
    int c[3];
    for (int i = 0; i < 3; ++i) {
        c[i] = static_cast<int>(std::lround(stops[k][i] + (stops[k + 1][i] - stops[k][i]) * f));
    }
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c[0], c[1], c[2]);
    return buf;
}

inline std::string fmt2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

inline std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out.push_back(c);
        }
    }
    return out;
}

/// Extent of pixel p along one axis, in unit-cube coordinates.
inline std::pair<double, double> pixel_span(std::size_t p, std::size_t R, Binning mode) {
    if (mode == Binning::floor) {
        return {static_cast<double>(p) / R, static_cast<double>(p + 1) / R};
    }
    const double h = 0.5 / static_cast<double>(R - 1);
    const double c = static_cast<double>(p) / static_cast<double>(R - 1);
    return {c - h, c + h};
}

} // namespace detail

/**
 * SVG scatter of the first two embedding dimensions. Categorical colours
 * get a legend in sorted category order. Cluster outlines trace the outer
 * edges of each cluster's pixels (red positive, blue negative).
 */
inline std::string render_scatter_svg(const Embedding& e, const ScatterColors& colors, const std::string& title = {}, const ClusterOverlay& overlay = {}) {
    if (e.n_components() < 2) {
        throw DataError("scatter rendering needs at least 2 dimensions");
    }
    constexpr double size = 600, margin = 40, legend_w = 120;
    double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
    for (std::size_t i = 0; i < e.n_obs(); ++i) {
        xmin = std::min(xmin, e.coords(i, 0));
        xmax = std::max(xmax, e.coords(i, 0));
        ymin = std::min(ymin, e.coords(i, 1));
        ymax = std::max(ymax, e.coords(i, 1));
    }
    if (overlay.norm) {
        xmin = std::min(xmin, overlay.norm->min[0]);
        xmax = std::max(xmax, overlay.norm->max[0]);
        ymin = std::min(ymin, overlay.norm->min[1]);
        ymax = std::max(ymax, overlay.norm->max[1]);
    }
    if (!(xmax > xmin)) {
        xmax = xmin + 1;
    }
    if (!(ymax > ymin)) {
        ymax = ymin + 1;
    }
    const double inner = size - 2 * margin;
    auto sx = [&](double x) { return margin + (x - xmin) / (xmax - xmin) * inner; };
    auto sy = [&](double y) { return size - margin - (y - ymin) / (ymax - ymin) * inner; };

    std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::fmt2(size + legend_w) + "\" height=\"" + detail::fmt2(size) + "\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    if (!title.empty()) {
        svg += "<text x=\"" + detail::fmt2(margin) + "\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">" + detail::xml_escape(title) + "</text>\n";
    }

    std::vector<std::string> cats;
    if (!colors.categories.empty()) {
        std::set<std::string> s(colors.categories.begin(), colors.categories.end());
        cats.assign(s.begin(), s.end());
    }
    double vmin = 0, vmax = 1;
    if (cats.empty() && !colors.values.empty()) {
        vmin = *std::min_element(colors.values.begin(), colors.values.end());
        vmax = *std::max_element(colors.values.begin(), colors.values.end());
    }
    svg += "<g class=\"points\">\n";
    for (std::size_t i = 0; i < e.n_obs(); ++i) {
        std::string fill = "#444444";
        if (!cats.empty()) {
            const auto k = static_cast<std::size_t>(std::lower_bound(cats.begin(), cats.end(), colors.categories[i]) - cats.begin());
            fill = detail::palette[k % std::size(detail::palette)];
        } else if (!colors.values.empty()) {
            fill = detail::hex_color(vmax > vmin ? (colors.values[i] - vmin) / (vmax - vmin) : 0.5);
        }
        svg += "<circle cx=\"" + detail::fmt2(sx(e.coords(i, 0))) + "\" cy=\"" + detail::fmt2(sy(e.coords(i, 1))) + "\" r=\"2.5\" fill=\"" + fill + "\"/>\n";
    }
    svg += "</g>\n";

    if (overlay.norm && overlay.clusters && overlay.R >= 2) {
        const auto& n = *overlay.norm;
        auto ux = [&](double u) { return sx(n.min[0] + u * (n.max[0] - n.min[0])); };
        auto uy = [&](double u) { return sy(n.min[1] + u * (n.max[1] - n.min[1])); };
        svg += "<g class=\"clusters\" fill=\"none\" stroke-width=\"1.5\">\n";
        for (const auto& c : overlay.clusters->clusters) {
            const char* stroke = c.sign > 0 ? "#d62728" : "#1f77b4";
            std::string path;
            auto has = [&](long long x, long long y) {
                if (x < 0 || y < 0 || x >= static_cast<long long>(overlay.R) || y >= static_cast<long long>(overlay.R)) {
                    return false;
                }
                return std::binary_search(c.pixels.begin(), c.pixels.end(), static_cast<std::uint64_t>(x) * overlay.R + static_cast<std::uint64_t>(y));
            };
            for (auto cell : c.pixels) {
                const auto x = static_cast<long long>(cell / overlay.R), y = static_cast<long long>(cell % overlay.R);
                const auto [x0, x1] = detail::pixel_span(static_cast<std::size_t>(x), overlay.R, overlay.binning);
                const auto [y0, y1] = detail::pixel_span(static_cast<std::size_t>(y), overlay.R, overlay.binning);
                auto seg = [&](double ax, double ay, double bx, double by) {
                    path += "M" + detail::fmt2(ux(ax)) + " " + detail::fmt2(uy(ay)) + "L" + detail::fmt2(ux(bx)) + " " + detail::fmt2(uy(by));
                };
                if (!has(x - 1, y)) seg(x0, y0, x0, y1);
                if (!has(x + 1, y)) seg(x1, y0, x1, y1);
                if (!has(x, y - 1)) seg(x0, y0, x1, y0);
                if (!has(x, y + 1)) seg(x0, y1, x1, y1);
            }
            svg += "<path data-cluster=\"" + std::to_string(c.id) + "\" stroke=\"" + stroke + "\" d=\"" + path + "\"/>\n";
        }
        svg += "</g>\n";
    }

    if (!cats.empty()) {
        svg += "<g class=\"legend\" font-family=\"sans-serif\" font-size=\"12\">\n";
        for (std::size_t k = 0; k < cats.size(); ++k) {
            const double y = margin + 18.0 * static_cast<double>(k);
            svg += "<rect x=\"" + detail::fmt2(size + 10) + "\" y=\"" + detail::fmt2(y - 9) + "\" width=\"10\" height=\"10\" fill=\"" +
                   detail::palette[k % std::size(detail::palette)] + "\"/>";
            svg += "<text x=\"" + detail::fmt2(size + 26) + "\" y=\"" + detail::fmt2(y) + "\">" + detail::xml_escape(cats[k]) + "</text>\n";
        }
        svg += "</g>\n";
    }
    svg += "</svg>\n";
    return svg;
}

} // namespace latent_atlas

#endif
