#include "c2v/kmeans.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

namespace c2v {

void TargetAssignment::validate() const {
    if (streams.size() != vocab_sizes.size()) throw ShapeError("target streams and vocab sizes differ in count");
    for (std::size_t s = 0; s < streams.size(); ++s) {
        if (streams[s].size() != frames)
            throw ShapeError("target stream " + std::to_string(s) + " has " + std::to_string(streams[s].size()) +
                             " labels for " + std::to_string(frames) + " frames");
        for (std::size_t t = 0; t < frames; ++t)
            if (streams[s][t] >= vocab_sizes[s])
                throw RangeError("label " + std::to_string(streams[s][t]) + " out of range at (stream=" +
                                 std::to_string(s) + ", t=" + std::to_string(t) + ")");
    }
}

TargetAssignment TargetAssignment::slice(std::size_t begin, std::size_t end) const {
    if (begin >= end || end > frames) throw ShapeError("bad target slice bounds");
    TargetAssignment out;
    out.frames = end - begin;
    out.vocab_sizes = vocab_sizes;
    for (const auto& s : streams)
        out.streams.emplace_back(s.begin() + static_cast<std::ptrdiff_t>(begin),
                                 s.begin() + static_cast<std::ptrdiff_t>(end));
    return out;
}

namespace {

double sq_dist(const MatD& a, Eigen::Index i, const MatD& b, Eigen::Index j) {
    double s = 0.0;
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
        const double d = a(i, c) - b(j, c);
        s += d * d;
    }
    return s;
}

// Returns total inertia; writes labels and per-point distances.
double assign(const MatD& centroids, const MatD& points, std::vector<std::uint32_t>& labels,
              std::vector<double>& dists) {
    const auto n = points.rows();
    labels.resize(static_cast<std::size_t>(n));
    dists.resize(static_cast<std::size_t>(n));
    double inertia = 0.0;
    for (Eigen::Index p = 0; p < n; ++p) {
        double best = std::numeric_limits<double>::infinity();
        std::uint32_t arg = 0;
        for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
            const double d = sq_dist(points, p, centroids, c);
            if (d < best) {
                best = d;
                arg = static_cast<std::uint32_t>(c);
            }
        }
        labels[static_cast<std::size_t>(p)] = arg;
        dists[static_cast<std::size_t>(p)] = best;
        inertia += best;
    }
    return inertia;
}

MatD plus_plus_seed(const MatD& points, std::size_t k, Rng& rng) {
    const auto n = static_cast<std::size_t>(points.rows());
    MatD centroids(static_cast<Eigen::Index>(k), points.cols());
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::size_t first = pick(rng);
    centroids.row(0) = points.row(static_cast<Eigen::Index>(first));
    std::vector<double> d2(n);
    for (std::size_t p = 0; p < n; ++p) d2[p] = sq_dist(points, static_cast<Eigen::Index>(p), centroids, 0);
    for (std::size_t c = 1; c < k; ++c) {
        const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
        std::size_t chosen = 0;
        if (total <= 0.0) {
            chosen = pick(rng);
        } else {
            const double target = unif(rng) * total;
            double run = 0.0;
            chosen = n - 1;
            for (std::size_t p = 0; p < n; ++p) {
                run += d2[p];
                if (run > target && d2[p] > 0.0) {
                    chosen = p;
                    break;
                }
            }
        }
        const auto ci = static_cast<Eigen::Index>(c);
        centroids.row(ci) = points.row(static_cast<Eigen::Index>(chosen));
        for (std::size_t p = 0; p < n; ++p)
            d2[p] = std::min(d2[p], sq_dist(points, static_cast<Eigen::Index>(p), centroids, ci));
    }
    return centroids;
}

}  // namespace

KMeansModel kmeans_fit(const MatD& points, std::size_t k, int max_iters, std::uint64_t seed) {
    const auto n = static_cast<std::size_t>(points.rows());
    if (k == 0) throw ConfigError("k-means needs k >= 1");
    if (n < k)
        throw ConfigError("k-means needs at least k points (have " + std::to_string(n) + ", k=" + std::to_string(k) + ")");
    if (!points.allFinite()) throw ConfigError("k-means input contains non-finite values");

    Rng rng = derive_rng(seed, 0x6b6d);
    KMeansModel model;
    model.centroids = plus_plus_seed(points, k, rng);

    std::vector<std::uint32_t> labels, next;
    std::vector<double> dists;
    model.inertia = assign(model.centroids, points, labels, dists);
    model.inertia_history.push_back(model.inertia);

    const auto d = points.cols();
    for (int it = 0; it < max_iters; ++it) {
        MatD sums = MatD::Zero(static_cast<Eigen::Index>(k), d);
        std::vector<std::size_t> counts(k, 0);
        for (std::size_t p = 0; p < n; ++p) {
            sums.row(labels[p]) += points.row(static_cast<Eigen::Index>(p));
            ++counts[labels[p]];
        }
        std::vector<bool> taken(n, false);
        for (std::size_t c = 0; c < k; ++c) {
            const auto ci = static_cast<Eigen::Index>(c);
            if (counts[c] > 0) {
                model.centroids.row(ci) = sums.row(ci) / static_cast<double>(counts[c]);
                continue;
            }
            // Empty cluster: move it onto the worst-served point not yet used
            // for another reseed.
            std::size_t far = 0;
            double worst = -1.0;
            for (std::size_t p = 0; p < n; ++p)
                if (!taken[p] && dists[p] > worst) {
                    worst = dists[p];
                    far = p;
                }
            taken[far] = true;
            dists[far] = 0.0;
            model.centroids.row(ci) = points.row(static_cast<Eigen::Index>(far));
        }
        model.inertia = assign(model.centroids, points, next, dists);
        model.inertia_history.push_back(model.inertia);
        model.iterations = it + 1;
        if (next == labels) break;
        labels.swap(next);
    }
    return model;
}

std::vector<std::uint32_t> nearest_rows(const MatD& centroids, const MatD& points) {
    if (centroids.cols() != points.cols())
        throw ShapeError("dimension mismatch: centroids have " + std::to_string(centroids.cols()) +
                         " columns, points have " + std::to_string(points.cols()));
    std::vector<std::uint32_t> labels;
    std::vector<double> dists;
    assign(centroids, points, labels, dists);
    return labels;
}

TargetAssignment assign_clusters(const KMeansModel& model, const MatD& latents) {
    TargetAssignment out;
    out.frames = static_cast<std::size_t>(latents.rows());
    out.vocab_sizes = {static_cast<std::uint32_t>(model.k())};
    out.streams.push_back(nearest_rows(model.centroids, latents));
    return out;
}

}  // namespace c2v
