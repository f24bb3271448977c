#include "support.hpp"

#include <latent_atlas/pipeline.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>
#include <regex>
#include <set>
#include <sstream>

#include <sys/wait.h>

using namespace latent_atlas;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = true;
    std::string detail;
};

struct Check {
    bool ok = true;
    std::vector<std::string> failures;

    void expect(bool cond, const std::string& what) {
        if (!cond) {
            ok = false;
            failures.push_back(what);
        }
    }

    Outcome outcome(const std::string& detail) const {
        if (ok) {
            return {true, detail};
        }
        std::string msg = detail;
        for (const auto& f : failures) {
            msg += (msg.empty() ? "" : "; ") + f;
        }
        return {false, msg};
    }
};

std::string fmt(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string self_path;
fs::path work;

int run_cli(const std::string& args, double* seconds = nullptr) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::string cmd = std::string(LATENT_ATLAS_CLI) + " " + args + " > /dev/null 2>> " + (work / "cli_errors.log").string();
    const int rc = std::system(cmd.c_str());
    if (seconds) {
        *seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

nlohmann::json read_json(const fs::path& p) {
    return nlohmann::json::parse(read_file(p));
}

/// Every artifact except timings and the report (compared separately without its runtime block).
std::map<std::string, std::string> snapshot(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        const auto rel = fs::relative(e.path(), root).string();
        if (rel.rfind("timings/", 0) == 0 || rel == "report.json") continue;
        out[rel] = read_file(e.path());
    }
    return out;
}

std::string compare_dirs(const fs::path& a, const fs::path& b) {
    const auto sa = snapshot(a), sb = snapshot(b);
    if (sa.size() != sb.size()) {
        return "file count differs (" + std::to_string(sa.size()) + " vs " + std::to_string(sb.size()) + ")";
    }
    for (const auto& [rel, bytes] : sa) {
        auto it = sb.find(rel);
        if (it == sb.end()) return "missing " + rel;
        if (it->second != bytes) return "differs: " + rel;
    }
    auto ra = read_json(a / "report.json"), rb = read_json(b / "report.json");
    ra.erase("runtime");
    rb.erase("runtime");
    if (ra != rb) return "report.json differs outside the runtime block";
    return {};
}

// ---------------------------------------------------------------------------
// Criterion 1 and 2: digits

struct DigitsRun {
    bool ok = false;
    double seconds = 0;
    fs::path out;
};

DigitsRun digits_run;

DigitsRun run_digits(const fs::path& out) {
    DigitsRun r;
    r.out = out;
    fs::remove_all(out);
    const auto cfg = fs::path(LATENT_ATLAS_CONFIG_DIR) / "digits.json";
    r.ok = run_cli("run --config " + cfg.string() + " --out " + out.string(), &r.seconds) == 0;
    return r;
}

Outcome digits_accuracy() {
    digits_run = run_digits(work / "digits_a");
    Check c;
    c.expect(digits_run.ok, "pipeline run failed (see cli_errors.log)");
    if (!digits_run.ok) return c.outcome("");
    const auto split = read_json(digits_run.out / "ingest" / "split.json");
    const auto n_embed = split["roles"]["embed"].size(), n_test = split["roles"]["predict"].size();
    c.expect(n_embed == 1437 && n_test == 360 && split["roles"]["statistics"].size() == 360, "split is not 1437/360");
    const auto m = read_json(digits_run.out / "predictions" / "label.metrics.json");
    const double acc = m["accuracy"].get<double>();
    std::size_t hits = 0, total = 0;
    const auto& conf = m["confusion"];
    for (std::size_t i = 0; i < conf.size(); ++i) {
        for (std::size_t j = 0; j < conf[i].size(); ++j) {
            total += conf[i][j].get<std::size_t>();
            hits += i == j ? conf[i][j].get<std::size_t>() : 0;
        }
    }
    c.expect(acc >= 0.85, "accuracy below 0.85");
    c.expect(total == 360, "confusion matrix does not cover 360 test digits");
    c.expect(digits_run.seconds <= 300, "runtime above 5 minutes");
    return c.outcome("accuracy=" + fmt(acc) + " (" + std::to_string(hits) + "/" + std::to_string(total) + "), split " + std::to_string(n_embed) + "/" +
                     std::to_string(n_test) + ", runtime " + fmt(digits_run.seconds, 1) + "s");
}

Outcome digit_nine() {
    Check c;
    c.expect(digits_run.ok, "digits run unavailable");
    if (!digits_run.ok) return c.outcome("");
    const auto clusters = read_json(digits_run.out / "maps" / "label_9.clusters.json");
    c.expect(clusters["method"] == "point_biserial", "map is not point-biserial");
    c.expect(clusters["r_min"].get<double>() == 0.2, "r_min is not 0.2");
    const auto report = read_json(digits_run.out / "report.json");
    const auto& profiles = report["profiles"]["label=9"];
    std::size_t positive = 0, passing = 0;
    std::vector<std::size_t> passing_ids;
    for (const auto& cl : clusters["clusters"]) {
        if (cl["sign"] != "+") continue;
        ++positive;
        for (const auto& p : profiles) {
            if (p["cluster_id"] == cl["id"] && p.value("profilable", true) && !p.value("insufficient_effect", true)) {
                ++passing;
                passing_ids.push_back(cl["id"].get<std::size_t>());
            }
        }
    }
    c.expect(passing >= 1, "no positive cluster passes the effect-size filter");
    if (passing >= 2) {
        for (auto id : passing_ids) {
            const auto base = digits_run.out / "profiles" / ("label_9_c" + std::to_string(id));
            c.expect(fs::exists(base.string() + ".pgm") && fs::exists(base.string() + ".f32"), "missing effect map for cluster " + std::to_string(id));
        }
    }
    std::string ids;
    for (auto id : passing_ids) ids += (ids.empty() ? "" : ",") + std::to_string(id);
    return c.outcome(std::to_string(positive) + " positive clusters, " + std::to_string(passing) + " pass the effect filter (ids " + ids + ")");
}

// ---------------------------------------------------------------------------
// Criterion 3: synthetic blobs

Outcome synthetic_blobs() {
    Check c;
    const auto dir = work / "blobs";
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::vector<double> truth;
    const auto X = test_support::two_blobs(200, 10, {3, 7}, 3.0, 20240601, &truth);
    std::string csv = "id";
    for (int f = 0; f < 10; ++f) csv += ",f" + std::to_string(f);
    csv += ",blob\n";
    for (std::size_t i = 0; i < X.rows(); ++i) {
        csv += "b" + std::to_string(i);
        for (std::size_t f = 0; f < 10; ++f) csv += "," + format_double(X(i, f));
        csv += truth[i] > 0 ? ",1\n" : ",0\n";
    }
    write_file_atomic(dir / "blobs.csv", csv);
    const nlohmann::json cfg = {{"seed", 11},
                                {"datasets", {{"embed", {{"path", "blobs.csv"}}}, {"statistics", {{"path", "blobs.csv"}}}}},
                                {"targets", {{{"column", "blob"}, {"type", "binary"}}}},
                                {"embedder", nlohmann::json::object()},
                                {"statmap", {{"sigma", 8.0}}}};
    write_file_atomic(dir / "config.json", cfg.dump(2));
    double secs = 0;
    const bool ran = run_cli("run --config " + (dir / "config.json").string() + " --out " + (dir / "out").string(), &secs) == 0;
    c.expect(ran, "pipeline run failed");
    if (!ran) return c.outcome("");
    c.expect(secs <= 30, "runtime above 30 s");

    const auto out = dir / "out";
    const auto clusters = read_json(out / "maps" / "blob.clusters.json");
    const auto n_pos = clusters["positive_clusters"].get<std::size_t>(), n_neg = clusters["negative_clusters"].get<std::size_t>();
    c.expect(n_pos == 1 && n_neg == 1, "expected exactly one positive and one negative cluster, got " + std::to_string(n_pos) + "/" + std::to_string(n_neg));

    const auto dls = pipeline::dls_from_json(read_json(out / "dls" / "dls.json"));
    std::unordered_map<std::string, double> label;
    for (std::size_t i = 0; i < truth.size(); ++i) label["b" + std::to_string(i)] = truth[i];
    const auto profiles = read_file(out / "profiles" / "blob.csv");
    std::string detail;
    for (const auto& cl : clusters["clusters"]) {
        Cluster k;
        k.id = cl["id"].get<std::size_t>();
        k.sign = cl["sign"] == "+" ? 1 : -1;
        k.pixels = cl["pixels"].get<std::vector<std::uint64_t>>();
        const auto members = cluster_members(k, dls);
        std::size_t agree = 0;
        for (auto i : members.inside) agree += (label.at(dls.obs_ids[i]) > 0) == (k.sign > 0) ? 1 : 0;
        const double purity = members.inside.empty() ? 0.0 : double(agree) / double(members.inside.size());
        c.expect(purity >= 0.95, "cluster " + std::to_string(k.id) + " purity " + fmt(purity));

        // Top-2 features by r from the exported profile table.
        std::vector<std::pair<double, std::string>> rs;
        std::istringstream lines(profiles);
        std::string line;
        std::getline(lines, line);
        while (std::getline(lines, line)) {
            const auto cells = detail::split_csv_line(line);
            if (std::stoul(cells[0]) == k.id) rs.emplace_back(std::stod(cells[5]), cells[1]);
        }
        std::stable_sort(rs.begin(), rs.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
        c.expect(rs.size() == 10, "cluster " + std::to_string(k.id) + " profile missing");
        if (rs.size() >= 2) {
            const std::set<std::string> top{rs[0].second, rs[1].second};
            c.expect(top == std::set<std::string>{"f3", "f7"}, "cluster " + std::to_string(k.id) + " top features are " + rs[0].second + "," + rs[1].second);
            c.expect(rs[1].first >= 0.3, "cluster " + std::to_string(k.id) + " second effect r=" + fmt(rs[1].first));
            detail += std::string(detail.empty() ? "" : "; ") + (k.sign > 0 ? "+" : "-") + " cluster: n_in=" + std::to_string(members.inside.size()) +
                      ", purity=" + fmt(purity, 3) + ", top {" + rs[0].second + " r=" + fmt(rs[0].first, 3) + ", " + rs[1].second + " r=" + fmt(rs[1].first, 3) + "}";
        }
    }
    return c.outcome("sigma=8; " + detail + ", runtime " + fmt(secs, 1) + "s");
}

// ---------------------------------------------------------------------------
// Criterion 4: statistical kernels

Outcome kernel_oracles() {
    Check c;
    Rng rng(404);
    double worst_z = 0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t na = 1 + rng.below(8), nb = 1 + rng.below(8);
        std::vector<double> a(na), b(nb);
        for (auto& v : a) v = static_cast<double>(rng.below(5));
        for (auto& v : b) v = static_cast<double>(rng.below(5));
        double U = 0;
        for (double x : a) {
            for (double y : b) U += x > y ? 1.0 : x == y ? 0.5 : 0.0;
        }
        const auto mw = mann_whitney(a, b);
        c.expect(mw.U == U, "U mismatch in trial " + std::to_string(t));
        std::map<double, double> ties;
        for (double v : a) ties[v] += 1;
        for (double v : b) ties[v] += 1;
        double tie = 0;
        for (const auto& [_, k] : ties) tie += k * k * k - k;
        const double N = double(na + nb);
        const double var = double(na) * double(nb) / 12.0 * ((N + 1) - tie / (N * (N - 1)));
        const double z = var > 1e-12 ? (U - double(na) * double(nb) / 2) / std::sqrt(var) : 0.0;
        worst_z = std::max(worst_z, std::abs(mw.z - z));
        c.expect(std::abs(mw.z - z) <= 1e-12, "z mismatch in trial " + std::to_string(t));
        c.expect(effect_size_r(mw.z, na + nb) == std::abs(mw.z) / std::sqrt(N), "r is not |z|/sqrt(N)");
    }
    double worst_r = 0;
    for (int t = 0; t < 1000; ++t) {
        const std::size_t n = 3 + rng.below(50);
        std::vector<double> x(n), y(n), g(n);
        for (std::size_t i = 0; i < n; ++i) {
            x[i] = rng.uniform(-2, 2);
            y[i] = x[i] * 0.3 + rng.uniform(-1, 1);
            g[i] = i < 2 ? static_cast<double>(i) : static_cast<double>(rng.below(2));
        }
        long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
        for (std::size_t i = 0; i < n; ++i) {
            sx += x[i];
            sy += y[i];
            sxx += (long double)x[i] * x[i];
            syy += (long double)y[i] * y[i];
            sxy += (long double)x[i] * y[i];
        }
        const long double nn = n;
        const double r_def = double((nn * sxy - sx * sy) / std::sqrt((nn * sxx - sx * sx) * (nn * syy - sy * sy)));
        const double r = *correlate(x, y);
        worst_r = std::max(worst_r, std::abs(r - r_def));
        c.expect(std::abs(r - r_def) <= 1e-12, "Pearson mismatch");
        long double m1 = 0, m0 = 0, n1 = 0, n0 = 0, mean = 0, var = 0;
        for (std::size_t i = 0; i < n; ++i) {
            (g[i] > 0 ? m1 : m0) += x[i];
            (g[i] > 0 ? n1 : n0) += 1;
            mean += x[i];
        }
        mean /= nn;
        for (double v : x) var += (v - mean) * (v - mean);
        const double pb_def = double((m1 / n1 - m0 / n0) / std::sqrt(var / nn) * std::sqrt(n1 / nn * n0 / nn));
        const double pb = *correlate(x, g, CorrelationMethod::point_biserial);
        worst_r = std::max(worst_r, std::abs(pb - pb_def));
        c.expect(std::abs(pb - pb_def) <= 1e-12, "point-biserial mismatch");
    }
    return c.outcome("1000 U/z pairs exact (max |dz|=" + fmt(worst_z * 1e15, 2) + "e-15), 2000 correlations (max |dr|=" + fmt(worst_r * 1e15, 2) + "e-15)");
}

// ---------------------------------------------------------------------------
// Criterion 5: resolution search

Outcome resolution_search() {
    Check c;
    Rng rng(55);
    std::size_t unsat = 0, fallback = 0;
    for (int t = 0; t < 200; ++t) {
        const std::size_t n = 3 + rng.below(120);
        Matrix pts(n, 2);
        const bool clustered = t % 3 == 0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t d = 0; d < 2; ++d) {
                pts(i, d) = clustered ? std::clamp(0.5 + 0.05 * test_support::normal(rng), 0.0, 1.0) : rng.uniform();
            }
        }
        if (t % 7 == 0) {
            pts(1, 0) = pts(0, 0);
            pts(1, 1) = pts(0, 1);
        }
        const double target = t % 5 == 0 ? 0.0 : rng.uniform(0, 0.25);
        const std::size_t R_max = 256;
        const auto res = find_resolution(pts, target, R_max);
        auto ov = [&](std::size_t R) {
            std::set<std::pair<long, long>> cells;
            for (std::size_t i = 0; i < n; ++i) {
                auto cell = [&](double u) { return std::clamp(static_cast<long>(std::floor(u * double(R))), 0L, long(R) - 1); };
                cells.insert({cell(pts(i, 0)), cell(pts(i, 1))});
            }
            return 1.0 - double(cells.size()) / double(n);
        };
        std::vector<double> scan(R_max + 1, 1.0);
        for (std::size_t R = 2; R <= R_max; ++R) scan[R] = ov(R);
        fallback += res.used_fallback ? 1 : 0;
        if (res.unsatisfiable) {
            ++unsat;
            c.expect(res.R == R_max && scan[R_max] > target, "unsatisfiable flag without R_max/overlap justification");
            continue;
        }
        c.expect(scan[res.R] <= target, "overlap(R) above target in trial " + std::to_string(t));
        c.expect(res.R == 2 || scan[res.R - 1] > target, "overlap(R-1) not above target in trial " + std::to_string(t));
        c.expect(res.overlap == scan[res.R], "reported overlap differs from scan");
    }
    return c.outcome("200 point sets; " + std::to_string(unsat) + " unsatisfiable (R=R_max, flagged), " + std::to_string(fallback) + " repaired by linear fallback");
}

// ---------------------------------------------------------------------------
// Criterion 6: Gaussian slice

Outcome gaussian_slice_check() {
    Check c;
    for (double sigma : {1.0, 1.5, 2.0, 3.0, 4.0}) {
        const std::size_t R = 64;
        const std::vector<std::size_t> centre{32, 32};
        const auto s = gaussian_slice(centre, sigma, R);
        c.expect(s[32 * R + 32] == 1.0, "centre is not 1");
        if (sigma == std::floor(sigma)) {
            const auto k = static_cast<std::size_t>(sigma);
            c.expect(std::abs(s[(32 + k) * R + 32] - std::exp(-0.5)) <= 1e-12, "value at sigma differs from exp(-1/2)");
            c.expect(std::abs(s[32 * R + 32 - k] - std::exp(-0.5)) <= 1e-12, "value at sigma differs from exp(-1/2)");
        }
        for (std::size_t x = 0; x < R; ++x) {
            for (std::size_t y = 0; y < R; ++y) {
                const double d = std::hypot(double(x) - 32, double(y) - 32);
                if (d > 4 * sigma) c.expect(s[x * R + y] == 0.0, "non-zero beyond 4 sigma");
                if (d <= 4 * sigma) c.expect(std::abs(s[x * R + y] - std::exp(-d * d / (2 * sigma * sigma))) <= 1e-12, "value mismatch inside support");
            }
        }
    }
    return c.outcome("sigma in {1, 1.5, 2, 3, 4}: centre 1, exp(-1/2) at sigma, 0 beyond 4 sigma");
}

// ---------------------------------------------------------------------------
// Criterion 7: embedder

std::pair<double, double> oracle_ab(double min_dist, double spread) {
    std::vector<double> xs, ys;
    for (int i = 0; i < 300; ++i) {
        const double x = 3.0 * spread * i / 299.0;
        xs.push_back(x);
        ys.push_back(x < min_dist ? 1.0 : std::exp(-(x - min_dist) / spread));
    }
    auto sse = [&](double a, double b) {
        double s = 0;
        for (std::size_t i = 0; i < xs.size(); ++i) {
            const double r = 1.0 / (1.0 + a * std::pow(xs[i], 2 * b)) - ys[i];
            s += r * r;
        }
        return s;
    };
    double ca = 2.5, cb = 1.5, wa = 2.4, wb = 1.4;
    for (int round = 0; round < 12; ++round) {
        double best = std::numeric_limits<double>::infinity(), ba = ca, bb = cb;
        for (int i = -20; i <= 20; ++i) {
            for (int j = -20; j <= 20; ++j) {
                const double a = ca + wa * i / 20.0, b = cb + wb * j / 20.0;
                if (a <= 0 || b <= 0) continue;
                if (const double s = sse(a, b); s < best) {
                    best = s;
                    ba = a;
                    bb = b;
                }
            }
        }
        ca = ba;
        cb = bb;
        wa *= 0.3;
        wb *= 0.3;
    }
    return {ca, cb};
}

Outcome embedder_properties() {
    Check c;
    // Duplicate transform.
    Rng rng(7);
    Matrix Xm(200, 8);
    for (double& v : Xm.data()) v = rng.uniform();
    for (std::size_t f = 0; f < 8; ++f) Xm(150, f) = Xm(20, f);
    EmbedderParams p;
    p.seed = 21;
    const auto model = fit(test_support::features(Xm), p);
    const std::vector<std::size_t> dup_rows{20, 150, 77};
    const auto proj = transform(model, test_support::features(Xm.select_rows(dup_rows)));
    bool exact = true;
    for (std::size_t d = 0; d < 2; ++d) {
        exact = exact && proj.coords(0, d) == model.embedding.coords(20, d) && proj.coords(1, d) == model.embedding.coords(20, d) &&
                proj.coords(2, d) == model.embedding.coords(77, d);
    }
    c.expect(exact, "duplicate did not land on its twin exactly");

    // Two cliques.
    const auto cliques = test_support::two_blobs(50, 12, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11}, 25.0, 99);
    const auto cm = fit(test_support::features(cliques), p);
    double intra = 0, inter = 0;
    std::size_t ni = 0, nx = 0;
    for (std::size_t i = 0; i < 100; ++i) {
        for (std::size_t j = i + 1; j < 100; ++j) {
            const double d = std::sqrt(squared_distance(cm.embedding.coords.row(i), cm.embedding.coords.row(j)));
            if ((i < 50) == (j < 50)) {
                intra += d;
                ++ni;
            } else {
                inter += d;
                ++nx;
            }
        }
    }
    intra /= double(ni);
    inter /= double(nx);
    c.expect(inter > 2 * intra, "clique separation ratio " + fmt(inter / intra, 2));

    // Curve fit.
    const auto ab = fit_curve_ab(0.1, 1.0);
    const auto [oa, ob] = oracle_ab(0.1, 1.0);
    c.expect(std::abs(ab.a - oa) <= 0.02 && std::abs(ab.b - ob) <= 0.02, "curve fit outside +-0.02 of oracle");

    // Determinism.
    const auto again = fit(test_support::features(Xm), p, 4);
    c.expect(embedding_to_csv(again.embedding) == embedding_to_csv(model.embedding), "embedding bytes differ between runs");

    return c.outcome("twin exact; inter/intra=" + fmt(inter / intra, 2) + "; a=" + fmt(ab.a) + " b=" + fmt(ab.b) + " (oracle " + fmt(oa) + ", " + fmt(ob) +
                     "); repeat fit byte-identical");
}

// ---------------------------------------------------------------------------
// Criterion 8: predictor

int predict_child(const std::string& model_path, const std::string& coords_path, const std::string& out_path) {
    try {
        const auto ens = load_model(model_path);
        const auto coords = load_precomputed(coords_path);
        const auto pred = predict(ens, coords.coords);
        std::string out;
        for (std::size_t i = 0; i < pred.value.size(); ++i) {
            out += format_double(pred.value[i]);
            if (!pred.proba.empty()) {
                for (double q : pred.proba[i]) out += "," + format_double(q);
            }
            out += "\n";
        }
        write_file_atomic(out_path, out);
        return 0;
    } catch (const std::exception& e) {
        std::cerr << e.what() << "\n";
        return 1;
    }
}

std::string prediction_text(const Prediction& pred) {
    std::string out;
    for (std::size_t i = 0; i < pred.value.size(); ++i) {
        out += format_double(pred.value[i]);
        if (!pred.proba.empty()) {
            for (double q : pred.proba[i]) out += "," + format_double(q);
        }
        out += "\n";
    }
    return out;
}

Outcome predictor_protocol() {
    Check c;
    const auto dir = work / "predictor";
    fs::remove_all(dir);
    fs::create_directories(dir);
    CvOptions opt;
    opt.master_seed = 12;
    opt.threads = 2;

    std::vector<double> y, y_test;
    const auto X = test_support::two_blobs(60, 2, {0, 1}, 10.0, 3, &y);
    const auto X_test = test_support::two_blobs(40, 2, {0, 1}, 10.0, 4, &y_test);
    const auto ens = train_cv(X, y, Task::classification, opt, 2);

    std::vector<int> seen(X.rows(), 0);
    for (const auto& f : ens.winner_folds) {
        for (auto i : f) ++seen[i];
    }
    c.expect(std::all_of(seen.begin(), seen.end(), [](int s) { return s == 1; }) && ens.winner_folds.size() == opt.k, "winner folds do not partition the indices");

    const auto pred = predict(ens, X_test);
    const auto acc = *evaluate(pred.value, y_test, Task::classification, 2).accuracy;
    c.expect(acc == 1.0, "held-out accuracy " + fmt(acc));

    save_model(ens, dir / "model.json");
    write_file_atomic(dir / "coords.csv", embedding_to_csv({X_test, test_support::ids(X_test.rows())}));
    const std::string cmd = self_path + " --predict-child " + (dir / "model.json").string() + " " + (dir / "coords.csv").string() + " " + (dir / "child.txt").string();
    const int rc = std::system(cmd.c_str());
    c.expect(rc == 0, "child process failed");
    if (rc == 0) {
        c.expect(read_file(dir / "child.txt") == prediction_text(pred), "child-process predictions differ");
    }

    Rng rng(1);
    Matrix Xr(60, 2);
    for (double& v : Xr.data()) v = rng.uniform(-3, 3);
    const std::vector<double> constant(60, 2.75);
    opt.n_perms = 20;
    const auto reg = train_cv(Xr, constant, Task::regression, opt);
    Matrix probe(25, 2);
    for (double& v : probe.data()) v = rng.uniform(-10, 10);
    const auto rp = predict(reg, probe);
    c.expect(std::all_of(rp.value.begin(), rp.value.end(), [](double v) { return v == 2.75; }), "constant-target regression is not constant");
    return c.outcome("folds partition 120 indices; held-out accuracy " + fmt(acc, 3) + "; cross-process predictions bit-exact; constant target -> 2.75 everywhere");
}

// ---------------------------------------------------------------------------
// Criterion 9: determinism and composition

Outcome determinism_and_composition() {
    Check c;
    c.expect(digits_run.ok, "digits run unavailable");
    if (!digits_run.ok) return c.outcome("");
    const auto rerun = run_digits(work / "digits_b");
    c.expect(rerun.ok, "rerun failed");
    if (rerun.ok) {
        const auto diff = compare_dirs(digits_run.out, rerun.out);
        c.expect(diff.empty(), "rerun: " + diff);
    }
    const auto staged = work / "digits_staged";
    fs::remove_all(staged);
    const auto cfg = (fs::path(LATENT_ATLAS_CONFIG_DIR) / "digits.json").string();
    bool stages_ok = true;
    for (const char* s : {"ingest", "embed", "transform", "dls", "map", "profile", "train", "predict", "report"}) {
        stages_ok = stages_ok && run_cli(std::string(s) + " --config " + cfg + " --out " + staged.string() + " --threads 1") == 0;
    }
    c.expect(stages_ok, "a stage command failed");
    if (stages_ok) {
        const auto diff = compare_dirs(digits_run.out, staged);
        c.expect(diff.empty(), "staged: " + diff);
        fs::remove(staged / "maps" / "label_9.csv");
        const bool ok = run_cli("map --config " + cfg + " --out " + staged.string() + " --target 9 --method point-biserial") == 0;
        c.expect(ok && read_file(staged / "maps" / "label_9.csv") == read_file(digits_run.out / "maps" / "label_9.csv"), "map --target 9 differs from the full run");
    }
    return c.outcome("rerun, 9-stage sequence (1 thread vs 4) and map --target 9 all byte-identical to the monolithic run");
}

// ---------------------------------------------------------------------------
// Criterion 10: reporting shape

Outcome reporting_format() {
    Check c;
    c.expect(digits_run.ok, "digits run unavailable");
    if (!digits_run.ok) return c.outcome("");
    const auto report = read_json(digits_run.out / "report.json");
    const std::regex line(R"(^[^:]+: z-scored U = -?\d+\.\d\d, P (<|=) \d\.\d{3}, effect size = \d\.\d\d$)");
    std::size_t lines = 0;
    std::string example;
    for (const auto& [target, entries] : report["profiles"].items()) {
        for (const auto& e : entries) {
            for (const auto& f : e.value("top_features", nlohmann::json::array())) {
                const auto s = f["summary"].get<std::string>();
                c.expect(std::regex_match(s, line), "bad summary line: " + s);
                c.expect(f.contains("z") && f.contains("p_uncorrected") && f.contains("r"), "feature entry lacks z/p/r");
                if (example.empty()) example = s;
                ++lines;
            }
        }
    }
    c.expect(lines > 0, "no feature summaries in the report");
    bool uncorrected_flag = false;
    for (const auto& w : report["warnings"]) {
        uncorrected_flag = uncorrected_flag || w.get<std::string>().find("uncorrected") != std::string::npos;
    }
    c.expect(uncorrected_flag, "uncorrected p-value warning missing");
    c.expect(report.contains("config") && report.contains("tool") && report.contains("dls") && report.contains("clusters") && report.contains("metrics"),
             "report lacks a required section");
    const auto header = read_file(digits_run.out / "profiles" / "label_9.csv").substr(0, 44);
    c.expect(header == "cluster_id,feature_name,U,z,p,r,direction,n_", "profile CSV header");
    return c.outcome(std::to_string(lines) + " feature lines, e.g. \"" + example + "\"");
}

} // namespace

int main(int argc, char** argv) {
    self_path = fs::absolute(argv[0]).string();
    if (argc == 5 && std::string(argv[1]) == "--predict-child") {
        return predict_child(argv[2], argv[3], argv[4]);
    }
    work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "latent_atlas_acceptance";
    fs::create_directories(work);
    fs::remove(work / "cli_errors.log");

    const std::vector<std::pair<std::string, Outcome (*)()>> criteria{
        {"digits end-to-end accuracy >= 0.85 within 5 min", digits_accuracy},
        {"digit-9 positive territory passes the effect filter", digit_nine},
        {"synthetic two-blob oracle", synthetic_blobs},
        {"statistical kernel oracles", kernel_oracles},
        {"resolution search minimality", resolution_search},
        {"Gaussian slice values and truncation", gaussian_slice_check},
        {"embedder properties", embedder_properties},
        {"predictor protocol", predictor_protocol},
        {"pipeline determinism and stage composition", determinism_and_composition},
        {"reporting shape (z-scored U, P, effect size)", reporting_format},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i) {
        Outcome o;
        try {
            o = criteria[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += o.pass ? 0 : 1;
        std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << (i + 1) << " " << criteria[i].first << ": " << o.detail << std::endl;
    }
    std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size() << " criteria passed" << std::endl;
    return failed ? 1 : 0;
}
