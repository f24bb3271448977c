#ifndef LATENT_ATLAS_PREDICTOR_HPP
#define LATENT_ATLAS_PREDICTOR_HPP

#include "core.hpp"
#include "statmap.hpp"

#include <json.hpp>

#include <numeric>
#include <optional>

/**
 * @file predictor.hpp
 *
 * @brief Random forests over embedding coordinates, model selection by
 * repeated shuffled k-fold cross-validation, fold-model ensembling and
 * checksummed model files.
 */

namespace latent_atlas {

enum class Task { classification, regression };

inline std::string to_string(Task t) {
    return t == Task::classification ? "classification" : "regression";
}

struct ForestParams {
    std::size_t n_trees = 100;
    /// 0 means unlimited.
    std::size_t max_depth = 0;
    /// 0 picks the task default: 1 for classification, 5 for regression.
    std::size_t min_samples_leaf = 0;
    /// 0 picks the task default: floor(sqrt(d)) for classification, floor(d / 3) for regression (at least 1).
    std::size_t mtry = 0;

    std::size_t leaf_size(Task t) const { return min_samples_leaf ? min_samples_leaf : (t == Task::classification ? 1 : 5); }

    std::size_t features_per_split(Task t, std::size_t d) const {
        if (mtry) {
            return std::min(mtry, d);
        }
        const auto m = t == Task::classification ? static_cast<std::size_t>(std::floor(std::sqrt(static_cast<double>(d)))) : d / 3;
        return std::max<std::size_t>(1, m);
    }
};

/**
 * Flat CART tree. Node i is a leaf when feature[i] < 0; otherwise samples
 * with x[feature] <= threshold go to left[i], the rest to right[i].
 * Leaf value: majority class index (classification) or mean (regression).
 */
struct DecisionTree {
    std::vector<int> feature;
    std::vector<double> threshold;
    std::vector<std::int32_t> left;
    std::vector<std::int32_t> right;
    std::vector<double> value;

    std::size_t n_nodes() const { return feature.size(); }

    double predict(std::span<const double> x) const {
        std::size_t node = 0;
        while (feature[node] >= 0) {
            node = static_cast<std::size_t>(x[static_cast<std::size_t>(feature[node])] <= threshold[node] ? left[node] : right[node]);
        }
        return value[node];
    }

    std::size_t depth() const {
        std::size_t best = 0;
        std::vector<std::pair<std::size_t, std::size_t>> stack{{0, 0}};
        while (!stack.empty()) {
            auto [n, d] = stack.back();
            stack.pop_back();
            best = std::max(best, d);
            if (feature[n] >= 0) {
                stack.emplace_back(static_cast<std::size_t>(left[n]), d + 1);
                stack.emplace_back(static_cast<std::size_t>(right[n]), d + 1);
            }
        }
        return best;
    }

    bool operator==(const DecisionTree&) const = default;
};

namespace detail {

/// Mean as first + average deviation, exact when all values are equal.
template <typename Get>
double anchored_mean(std::size_t n, Get&& get) {
    const double first = get(0);
    double dev = 0;
    for (std::size_t i = 1; i < n; ++i) {
        dev += get(i) - first;
    }
    return first + dev / static_cast<double>(n);
}

/**
 * Grows one tree on `samples` (row indices into X, duplicates allowed)
 * with per-feature presorted orderings that are stably partitioned at every
 * split.
 */
class TreeBuilder {
public:
    TreeBuilder(const Matrix& X, std::span<const double> y, Task task, std::size_t n_classes, const ForestParams& params, Rng& rng)
        : X_(X), y_(y), task_(task), n_classes_(n_classes), rng_(rng) {
        leaf_ = params.leaf_size(task);
        mtry_ = params.features_per_split(task, X.cols());
        max_depth_ = params.max_depth;
    }

    DecisionTree grow(const std::vector<std::size_t>& samples) {
        const std::size_t n = samples.size();
        const std::size_t d = X_.cols();
        rows_ = samples;
        order_.assign(d, std::vector<std::size_t>(n));
        for (std::size_t f = 0; f < d; ++f) {
            auto& o = order_[f];
            std::iota(o.begin(), o.end(), std::size_t{0});
            std::stable_sort(o.begin(), o.end(), [&](std::size_t a, std::size_t b) { return X_(rows_[a], f) < X_(rows_[b], f); });
        }
        goes_left_.assign(n, 0);
        buffer_.resize(n);
        tree_ = DecisionTree{};
        build(0, n, 0);
        return std::move(tree_);
    }

private:
    struct Split {
        int feature = -1;
        double threshold = 0;
        std::size_t n_left = 0;
        double score = -std::numeric_limits<double>::infinity();
    };

    std::size_t add_node() {
        tree_.feature.push_back(-1);
        tree_.threshold.push_back(0.0);
        tree_.left.push_back(-1);
        tree_.right.push_back(-1);
        tree_.value.push_back(0.0);
        return tree_.feature.size() - 1;
    }

    double target(std::size_t slot) const { return y_[rows_[slot]]; }

    double leaf_value(std::size_t begin, std::size_t end) const {
        const auto& o = order_[0];
        if (task_ == Task::classification) {
            std::vector<std::size_t> counts(n_classes_, 0);
            for (std::size_t i = begin; i < end; ++i) {
                ++counts[static_cast<std::size_t>(target(o[i]))];
            }
            return static_cast<double>(std::max_element(counts.begin(), counts.end()) - counts.begin());
        }
        return anchored_mean(end - begin, [&](std::size_t i) { return target(o[begin + i]); });
    }

    bool pure(std::size_t begin, std::size_t end) const {
        const auto& o = order_[0];
        const double first = target(o[begin]);
        for (std::size_t i = begin + 1; i < end; ++i) {
            if (target(o[i]) != first) {
                return false;
            }
        }
        return true;
    }

    /// Best split on feature f within [begin, end) by Gini (classification) or variance reduction.
    Split best_on_feature(std::size_t f, std::size_t begin, std::size_t end) const {
        Split best;
        const auto& o = order_[f];
        const std::size_t n = end - begin;
        if (task_ == Task::classification) {
            std::vector<double> left(n_classes_, 0.0), right(n_classes_, 0.0);
            for (std::size_t i = begin; i < end; ++i) {
                right[static_cast<std::size_t>(target(o[i]))] += 1;
            }
            double sl = 0, sr = 0;
            for (double c : right) {
                sr += c * c;
            }
            for (std::size_t i = begin; i + 1 < end; ++i) {
                const auto c = static_cast<std::size_t>(target(o[i]));
                sl += 2 * left[c] + 1;
                sr -= 2 * right[c] - 1;
                left[c] += 1;
                right[c] -= 1;
                const std::size_t nl = i + 1 - begin;
                const double xv = X_(rows_[o[i]], f), xn = X_(rows_[o[i + 1]], f);
                if (xv == xn || nl < leaf_ || n - nl < leaf_) {
                    continue;
                }
                const double score = sl / static_cast<double>(nl) + sr / static_cast<double>(n - nl);
                if (score > best.score) {
                    best = {static_cast<int>(f), midpoint(xv, xn), nl, score};
                }
            }
        } else {
            double total = 0;
            for (std::size_t i = begin; i < end; ++i) {
                total += target(o[i]);
            }
            double sum_left = 0;
            for (std::size_t i = begin; i + 1 < end; ++i) {
                sum_left += target(o[i]);
                const std::size_t nl = i + 1 - begin;
                const double xv = X_(rows_[o[i]], f), xn = X_(rows_[o[i + 1]], f);
                if (xv == xn || nl < leaf_ || n - nl < leaf_) {
                    continue;
                }
                const double sr = total - sum_left;
                const double score = sum_left * sum_left / static_cast<double>(nl) + sr * sr / static_cast<double>(n - nl);
                if (score > best.score) {
                    best = {static_cast<int>(f), midpoint(xv, xn), nl, score};
                }
            }
        }
        return best;
    }

    static double midpoint(double lo, double hi) {
        const double m = lo + (hi - lo) / 2;
        return m < hi ? m : lo;
    }

    double parent_score(std::size_t begin, std::size_t end) const {
        const auto& o = order_[0];
        const double n = static_cast<double>(end - begin);
        if (task_ == Task::classification) {
            std::vector<double> counts(n_classes_, 0.0);
            for (std::size_t i = begin; i < end; ++i) {
                counts[static_cast<std::size_t>(target(o[i]))] += 1;
            }
            double s = 0;
            for (double c : counts) {
                s += c * c;
            }
            return s / n;
        }
        double s = 0;
        for (std::size_t i = begin; i < end; ++i) {
            s += target(o[i]);
        }
        return s * s / n;
    }

    std::size_t build(std::size_t begin, std::size_t end, std::size_t depth) {
        const std::size_t node = add_node();
        const std::size_t n = end - begin;
        const bool stop = n < 2 * leaf_ || (max_depth_ && depth >= max_depth_) || pure(begin, end);
        Split best;
        if (!stop) {
            // Draw features in random order; keep looking past mtry only while nothing splits.
            std::vector<std::size_t> feats(X_.cols());
            std::iota(feats.begin(), feats.end(), std::size_t{0});
            const double base = parent_score(begin, end);
            for (std::size_t t = 0; t < feats.size(); ++t) {
                const auto j = t + static_cast<std::size_t>(rng_.below(feats.size() - t));
                std::swap(feats[t], feats[j]);
                const auto s = best_on_feature(feats[t], begin, end);
                if (s.feature >= 0 && s.score > base * (1 + 1e-12) && s.score > best.score) {
                    best = s;
                }
                if (t + 1 >= mtry_ && best.feature >= 0) {
                    break;
                }
            }
        }
        if (best.feature < 0) {
            tree_.value[node] = leaf_value(begin, end);
            return node;
        }

        const auto f = static_cast<std::size_t>(best.feature);
        for (std::size_t i = begin; i < end; ++i) {
            const std::size_t slot = order_[f][i];
            goes_left_[slot] = X_(rows_[slot], f) <= best.threshold ? 1 : 0;
        }
        std::size_t n_left = 0;
        for (auto& o : order_) {
            std::size_t l = begin, r = 0;
            for (std::size_t i = begin; i < end; ++i) {
                if (goes_left_[o[i]]) {
                    o[l++] = o[i];
                } else {
                    buffer_[r++] = o[i];
                }
            }
            std::copy_n(buffer_.begin(), r, o.begin() + static_cast<std::ptrdiff_t>(l));
            n_left = l - begin;
        }
        tree_.feature[node] = best.feature;
        tree_.threshold[node] = best.threshold;
        const auto l = build(begin, begin + n_left, depth + 1);
        const auto r = build(begin + n_left, end, depth + 1);
        tree_.left[node] = static_cast<std::int32_t>(l);
        tree_.right[node] = static_cast<std::int32_t>(r);
        return node;
    }

    const Matrix& X_;
    std::span<const double> y_;
    Task task_;
    std::size_t n_classes_;
    Rng& rng_;
    std::size_t leaf_ = 1, mtry_ = 1, max_depth_ = 0;
    std::vector<std::size_t> rows_;
    std::vector<std::vector<std::size_t>> order_;
    std::vector<std::uint8_t> goes_left_;
    std::vector<std::size_t> buffer_;
    DecisionTree tree_;
};

} // namespace detail

struct ForestModel {
    Task task = Task::classification;
    std::size_t n_classes = 0;
    std::size_t n_features = 0;
    std::uint64_t seed = 0;
    ForestParams params;
    std::vector<DecisionTree> trees;
    /// Regression on a constant target: every tree is a single leaf.
    bool constant_target = false;

    /// Class vote proportions over trees.
    std::vector<double> predict_proba(std::span<const double> x) const {
        std::vector<double> p(n_classes, 0.0);
        for (const auto& t : trees) {
            p[static_cast<std::size_t>(t.predict(x))] += 1.0;
        }
        for (double& v : p) {
            v /= static_cast<double>(trees.size());
        }
        return p;
    }

    /// Class index (argmax, ties to lower index) or mean of tree outputs.
    double predict(std::span<const double> x) const {
        if (task == Task::classification) {
            const auto p = predict_proba(x);
            return static_cast<double>(std::max_element(p.begin(), p.end()) - p.begin());
        }
        return detail::anchored_mean(trees.size(), [&](std::size_t t) { return trees[t].predict(x); });
    }

    bool operator==(const ForestModel& o) const {
        return task == o.task && n_classes == o.n_classes && n_features == o.n_features && seed == o.seed && trees == o.trees;
    }
};

/**
 * Trains `n_trees` CART trees on bootstrap resamples (same size, with
 * replacement). Classification targets are class indices in [0, n_classes).
 */
inline ForestModel fit_forest(const Matrix& X, std::span<const double> y, Task task, const ForestParams& params, std::uint64_t seed, std::size_t n_classes = 0) {
    if (X.rows() != y.size()) {
        throw DataError("forest: " + std::to_string(X.rows()) + " rows but " + std::to_string(y.size()) + " targets");
    }
    if (X.rows() < 2 || X.cols() == 0) {
        throw DataError("forest: need at least 2 observations and 1 feature");
    }
    if (params.n_trees < 1) {
        throw ConfigError("forest: n_trees must be >= 1");
    }
    ForestModel m;
    m.task = task;
    m.n_features = X.cols();
    m.seed = seed;
    m.params = params;
    if (task == Task::classification) {
        std::size_t max_label = 0;
        for (double v : y) {
            if (v < 0 || v != std::floor(v)) {
                throw DataError("classification labels must be non-negative integers");
            }
            max_label = std::max(max_label, static_cast<std::size_t>(v));
        }
        m.n_classes = std::max(n_classes, max_label + 1);
        std::vector<double> distinct(y.begin(), y.end());
        std::sort(distinct.begin(), distinct.end());
        if (std::unique(distinct.begin(), distinct.end()) - distinct.begin() < 2) {
            throw DataError("classification needs at least 2 classes in the training data");
        }
    } else {
        m.constant_target = std::all_of(y.begin(), y.end(), [&](double v) { return v == y[0]; });
    }
    m.trees.reserve(params.n_trees);
    for (std::size_t t = 0; t < params.n_trees; ++t) {
        Rng rng(derive_seed(seed, t));
        std::vector<std::size_t> sample(X.rows());
        for (auto& s : sample) {
            s = static_cast<std::size_t>(rng.below(X.rows()));
        }
        detail::TreeBuilder builder(X, y, task, m.n_classes, params, rng);
        m.trees.push_back(builder.grow(sample));
    }
    return m;
}

struct Metrics {
    Task task = Task::classification;
    std::optional<double> accuracy;
    std::vector<std::vector<std::size_t>> confusion;
    std::optional<double> pearson_r;
    std::optional<double> rmse;
};

/**
 * Classification: accuracy and confusion matrix (rows truth, columns
 * predicted). Regression: Pearson r (absent when undefined) and RMSE.
 */
inline Metrics evaluate(std::span<const double> predictions, std::span<const double> truth, Task task, std::size_t n_classes = 0) {
    if (predictions.size() != truth.size()) {
        throw DataError("evaluate: " + std::to_string(predictions.size()) + " predictions for " + std::to_string(truth.size()) + " truths");
    }
    Metrics m;
    m.task = task;
    const std::size_t n = truth.size();
    if (task == Task::classification) {
        for (std::size_t i = 0; i < n; ++i) {
            n_classes = std::max({n_classes, static_cast<std::size_t>(truth[i]) + 1, static_cast<std::size_t>(predictions[i]) + 1});
        }
        m.confusion.assign(n_classes, std::vector<std::size_t>(n_classes, 0));
        std::size_t hit = 0;
        for (std::size_t i = 0; i < n; ++i) {
            ++m.confusion[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(predictions[i])];
            hit += predictions[i] == truth[i] ? 1 : 0;
        }
        m.accuracy = n ? static_cast<double>(hit) / static_cast<double>(n) : 0.0;
    } else {
        if (n >= 3) {
            m.pearson_r = correlate(predictions, truth);
        }
        double s = 0;
        for (std::size_t i = 0; i < n; ++i) {
            s += (predictions[i] - truth[i]) * (predictions[i] - truth[i]);
        }
        m.rmse = n ? std::sqrt(s / static_cast<double>(n)) : 0.0;
    }
    return m;
}

inline nlohmann::json to_json(const Metrics& m) {
    nlohmann::json j{{"task", to_string(m.task)}};
    if (m.accuracy) {
        j["accuracy"] = *m.accuracy;
        j["confusion"] = m.confusion;
    }
    if (m.task == Task::regression) {
        j["pearson_r"] = m.pearson_r ? nlohmann::json(*m.pearson_r) : nlohmann::json(nullptr);
        j["rmse"] = *m.rmse;
    }
    return j;
}

struct CvOptions {
    std::size_t n_perms = 100;
    std::size_t k = 5;
    ForestParams forest;
    std::uint64_t master_seed = 0;
    int threads = 1;
};

struct PermutationScore {
    std::vector<double> fold_scores;
    double global = 0;
    /// Some training fold lacked a class; the score is recorded as worst possible.
    bool degenerate = false;
};

/// The k fold models of the winning permutation plus every permutation's scores.
struct CvEnsemble {
    Task task = Task::classification;
    std::size_t n_classes = 0;
    std::size_t n_features = 0;
    std::uint64_t master_seed = 0;
    std::size_t k = 5;
    std::size_t winner = 0;
    std::vector<ForestModel> fold_models;
    /// Held-out indices per fold of the winning permutation.
    std::vector<std::vector<std::size_t>> winner_folds;
    std::vector<PermutationScore> scores;
    std::vector<std::string> class_labels;
};

namespace detail {

inline std::vector<std::size_t> permutation_order(std::size_t n, std::uint64_t master, std::size_t p) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(derive_seed(master, 1000, p));
    rng.shuffle(idx);
    return idx;
}

/// Contiguous folds over a shuffled order.
inline std::vector<std::vector<std::size_t>> make_folds(const std::vector<std::size_t>& order, std::size_t k) {
    std::vector<std::vector<std::size_t>> folds(k);
    const std::size_t n = order.size();
    for (std::size_t f = 0; f < k; ++f) {
        folds[f].assign(order.begin() + static_cast<std::ptrdiff_t>(f * n / k), order.begin() + static_cast<std::ptrdiff_t>((f + 1) * n / k));
    }
    return folds;
}

inline std::vector<std::size_t> complement(std::size_t n, const std::vector<std::size_t>& held) {
    std::vector<std::uint8_t> mark(n, 0);
    for (auto i : held) {
        mark[i] = 1;
    }
    std::vector<std::size_t> out;
    out.reserve(n - held.size());
    for (std::size_t i = 0; i < n; ++i) {
        if (!mark[i]) {
            out.push_back(i);
        }
    }
    return out;
}

inline std::vector<double> gather(std::span<const double> y, std::span<const std::size_t> idx) {
    std::vector<double> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        out[i] = y[idx[i]];
    }
    return out;
}

inline double worst_score(Task t) {
    return t == Task::classification ? 0.0 : -1.0;
}

} // namespace detail

/**
 * Repeated k-fold cross-validation. Permutation p shuffles the training
 * indices with a seed derived from (master_seed, p) and splits them into k
 * contiguous folds; a forest is trained on each fold's complement and scored
 * on the fold (accuracy, or Pearson r for regression). The global score is
 * the unweighted mean over folds. The permutation with the best global score
 * wins (ties to the lower id) and its k fold models are kept.
 */
inline CvEnsemble train_cv(const Matrix& X, std::span<const double> y, Task task, const CvOptions& opt, std::size_t n_classes = 0) {
    const std::size_t n = X.rows();
    if (opt.k < 2 || opt.n_perms < 1) {
        throw ConfigError("cross-validation needs k >= 2 and at least one permutation");
    }
    if (n < 5 * opt.k) {
        throw DataError("cross-validation needs at least " + std::to_string(5 * opt.k) + " observations, got " + std::to_string(n));
    }
    if (y.size() != n) {
        throw DataError("train_cv: target length does not match coordinates");
    }
    if (task == Task::classification) {
        for (double v : y) {
            n_classes = std::max(n_classes, static_cast<std::size_t>(v) + 1);
        }
    }

    auto fold_seed = [&](std::size_t p, std::size_t f) { return derive_seed(opt.master_seed, 2000 + p, f); };
    auto train_fold = [&](std::size_t p, std::size_t f, const std::vector<std::size_t>& train_idx) {
        const Matrix Xt = X.select_rows(train_idx);
        const auto yt = detail::gather(y, train_idx);
        return fit_forest(Xt, yt, task, opt.forest, fold_seed(p, f), n_classes);
    };
    auto classes_present = [&](const std::vector<std::size_t>& idx) {
        std::vector<std::uint8_t> seen(n_classes, 0);
        for (auto i : idx) {
            seen[static_cast<std::size_t>(y[i])] = 1;
        }
        return seen;
    };
    std::vector<std::size_t> everyone(n);
    std::iota(everyone.begin(), everyone.end(), std::size_t{0});
    const auto all_classes = task == Task::classification ? classes_present(everyone) : std::vector<std::uint8_t>{};

    CvEnsemble ens;
    ens.task = task;
    ens.n_classes = n_classes;
    ens.n_features = X.cols();
    ens.master_seed = opt.master_seed;
    ens.k = opt.k;
    ens.scores.resize(opt.n_perms);

    parallel_for(opt.n_perms, opt.threads, [&](std::size_t p) {
        const auto folds = detail::make_folds(detail::permutation_order(n, opt.master_seed, p), opt.k);
        auto& score = ens.scores[p];
        score.fold_scores.assign(opt.k, detail::worst_score(task));
        for (std::size_t f = 0; f < opt.k && !score.degenerate; ++f) {
            const auto train_idx = detail::complement(n, folds[f]);
            if (task == Task::classification && classes_present(train_idx) != all_classes) {
                score.degenerate = true;
                break;
            }
            const auto model = train_fold(p, f, train_idx);
            std::vector<double> pred(folds[f].size());
            for (std::size_t i = 0; i < folds[f].size(); ++i) {
                pred[i] = model.predict(X.row(folds[f][i]));
            }
            const auto truth = detail::gather(y, folds[f]);
            const auto m = evaluate(pred, truth, task, n_classes);
            score.fold_scores[f] = task == Task::classification ? *m.accuracy : m.pearson_r.value_or(detail::worst_score(task));
        }
        if (score.degenerate) {
            score.fold_scores.assign(opt.k, detail::worst_score(task));
        }
        score.global = std::accumulate(score.fold_scores.begin(), score.fold_scores.end(), 0.0) / static_cast<double>(opt.k);
    });

    std::size_t winner = 0;
    bool have = false;
    for (std::size_t p = 0; p < opt.n_perms; ++p) {
        if (ens.scores[p].degenerate) {
            continue;
        }
        if (!have || ens.scores[p].global > ens.scores[winner].global) {
            winner = p;
            have = true;
        }
    }
    if (!have) {
        throw DataError("every cross-validation permutation left a class out of a training fold");
    }
    ens.winner = winner;
    ens.winner_folds = detail::make_folds(detail::permutation_order(n, opt.master_seed, winner), opt.k);
    ens.fold_models.resize(opt.k);
    parallel_for(opt.k, opt.threads, [&](std::size_t f) { ens.fold_models[f] = train_fold(winner, f, detail::complement(n, ens.winner_folds[f])); });
    return ens;
}

struct Prediction {
    std::vector<double> value;
    /// Averaged class probabilities per observation (classification only).
    std::vector<std::vector<double>> proba;
};

/**
 * Ensemble output: regression averages the fold models; classification
 * averages their vote-proportion vectors and takes the argmax (ties to the
 * lower class index).
 */
inline Prediction predict(const CvEnsemble& ens, const Matrix& X_new) {
    if (X_new.cols() != ens.n_features) {
        throw DataError("prediction expects " + std::to_string(ens.n_features) + " coordinates per point, got " + std::to_string(X_new.cols()));
    }
    Prediction out;
    out.value.resize(X_new.rows());
    const double nm = static_cast<double>(ens.fold_models.size());
    for (std::size_t i = 0; i < X_new.rows(); ++i) {
        auto x = X_new.row(i);
        if (ens.task == Task::classification) {
            std::vector<double> p(ens.n_classes, 0.0);
            for (const auto& m : ens.fold_models) {
                const auto q = m.predict_proba(x);
                for (std::size_t c = 0; c < p.size(); ++c) {
                    p[c] += q[c];
                }
            }
            for (double& v : p) {
                v /= nm;
            }
            out.value[i] = static_cast<double>(std::max_element(p.begin(), p.end()) - p.begin());
            out.proba.push_back(std::move(p));
        } else {
            out.value[i] = detail::anchored_mean(ens.fold_models.size(), [&](std::size_t f) { return ens.fold_models[f].predict(x); });
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Persistence: versioned JSON with an FNV-1a checksum over the payload.

inline constexpr int model_file_version = 1;

namespace detail {

inline nlohmann::json tree_json(const DecisionTree& t) {
    return {{"feature", t.feature}, {"threshold", t.threshold}, {"left", t.left}, {"right", t.right}, {"value", t.value}};
}

inline DecisionTree tree_from_json(const nlohmann::json& j) {
    DecisionTree t;
    t.feature = j.at("feature").get<std::vector<int>>();
    t.threshold = j.at("threshold").get<std::vector<double>>();
    t.left = j.at("left").get<std::vector<std::int32_t>>();
    t.right = j.at("right").get<std::vector<std::int32_t>>();
    t.value = j.at("value").get<std::vector<double>>();
    const auto n = t.feature.size();
    if (t.threshold.size() != n || t.left.size() != n || t.right.size() != n || t.value.size() != n || n == 0) {
        throw DataError("corrupt tree in model file");
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (t.feature[i] >= 0 && (t.left[i] <= 0 || t.right[i] <= 0 || static_cast<std::size_t>(t.left[i]) >= n || static_cast<std::size_t>(t.right[i]) >= n)) {
            throw DataError("corrupt tree links in model file");
        }
    }
    return t;
}

inline nlohmann::json forest_json(const ForestModel& m) {
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : m.trees) {
        trees.push_back(tree_json(t));
    }
    return {{"task", to_string(m.task)},
            {"n_classes", m.n_classes},
            {"n_features", m.n_features},
            {"seed", m.seed},
            {"n_trees", m.params.n_trees},
            {"max_depth", m.params.max_depth},
            {"min_samples_leaf", m.params.min_samples_leaf},
            {"mtry", m.params.mtry},
            {"constant_target", m.constant_target},
            {"trees", trees}};
}

inline Task task_from_string(const std::string& s) {
    if (s == "classification") {
        return Task::classification;
    }
    if (s == "regression") {
        return Task::regression;
    }
    throw DataError("unknown task '" + s + "'");
}

inline ForestModel forest_from_json(const nlohmann::json& j) {
    ForestModel m;
    m.task = task_from_string(j.at("task").get<std::string>());
    m.n_classes = j.at("n_classes").get<std::size_t>();
    m.n_features = j.at("n_features").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.params.n_trees = j.at("n_trees").get<std::size_t>();
    m.params.max_depth = j.at("max_depth").get<std::size_t>();
    m.params.min_samples_leaf = j.at("min_samples_leaf").get<std::size_t>();
    m.params.mtry = j.at("mtry").get<std::size_t>();
    m.constant_target = j.at("constant_target").get<bool>();
    for (const auto& t : j.at("trees")) {
        m.trees.push_back(tree_from_json(t));
    }
    return m;
}

} // namespace detail

inline std::string save_model(const CvEnsemble& ens) {
    nlohmann::json payload;
    payload["task"] = to_string(ens.task);
    payload["n_classes"] = ens.n_classes;
    payload["n_features"] = ens.n_features;
    payload["master_seed"] = ens.master_seed;
    payload["k"] = ens.k;
    payload["winner"] = ens.winner;
    payload["winner_folds"] = ens.winner_folds;
    payload["class_labels"] = ens.class_labels;
    nlohmann::json scores = nlohmann::json::array();
    for (const auto& s : ens.scores) {
        scores.push_back({{"fold_scores", s.fold_scores}, {"global", s.global}, {"degenerate", s.degenerate}});
    }
    payload["permutation_scores"] = scores;
    nlohmann::json models = nlohmann::json::array();
    for (const auto& m : ens.fold_models) {
        models.push_back(detail::forest_json(m));
    }
    payload["fold_models"] = models;
    const std::string body = payload.dump();
    nlohmann::json file;
    file["format"] = "latent-atlas-cv-ensemble";
    file["version"] = model_file_version;
    file["checksum"] = fnv1a_hex(body);
    file["payload"] = std::move(payload);
    return file.dump() + "\n";
}

inline void save_model(const CvEnsemble& ens, const std::filesystem::path& path) {
    write_file_atomic(path, save_model(ens));
}

inline CvEnsemble load_model_text(const std::string& text) {
    nlohmann::json file;
    try {
        file = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("corrupt model file: ") + e.what());
    }
    CvEnsemble ens;
    try {
        if (file.at("format").get<std::string>() != "latent-atlas-cv-ensemble") {
            throw DataError("not a cross-validated ensemble model file");
        }
        const int version = file.at("version").get<int>();
        if (version != model_file_version) {
            throw DataError("model file version " + std::to_string(version) + " is not supported (expected " + std::to_string(model_file_version) + ")");
        }
        const auto& payload = file.at("payload");
        if (fnv1a_hex(payload.dump()) != file.at("checksum").get<std::string>()) {
            throw DataError("corrupt model file: checksum mismatch");
        }
        ens.task = detail::task_from_string(payload.at("task").get<std::string>());
        ens.n_classes = payload.at("n_classes").get<std::size_t>();
        ens.n_features = payload.at("n_features").get<std::size_t>();
        ens.master_seed = payload.at("master_seed").get<std::uint64_t>();
        ens.k = payload.at("k").get<std::size_t>();
        ens.winner = payload.at("winner").get<std::size_t>();
        ens.winner_folds = payload.at("winner_folds").get<std::vector<std::vector<std::size_t>>>();
        ens.class_labels = payload.at("class_labels").get<std::vector<std::string>>();
        for (const auto& s : payload.at("permutation_scores")) {
            ens.scores.push_back({s.at("fold_scores").get<std::vector<double>>(), s.at("global").get<double>(), s.at("degenerate").get<bool>()});
        }
        for (const auto& m : payload.at("fold_models")) {
            ens.fold_models.push_back(detail::forest_from_json(m));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("corrupt model file: ") + e.what());
    }
    if (ens.fold_models.size() != ens.k) {
        throw DataError("corrupt model file: expected " + std::to_string(ens.k) + " fold models");
    }
    return ens;
}

inline CvEnsemble load_model(const std::filesystem::path& path) {
    return load_model_text(read_file(path));
}

} // namespace latent_atlas

#endif
