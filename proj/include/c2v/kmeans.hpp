#pragma once

#include "c2v/common.hpp"

#include <cstdint>
#include <vector>

namespace c2v {

/// Frame-level label streams for one utterance: one stream per prediction
/// head, each with its own vocabulary size.
struct TargetAssignment {
    std::size_t frames = 0;
    std::vector<std::uint32_t> vocab_sizes;
    std::vector<std::vector<std::uint32_t>> streams;

    std::size_t num_streams() const { return streams.size(); }
    /// Throws RangeError if any label is outside its vocabulary and
    /// ShapeError if a stream has the wrong length.
    void validate() const;
    TargetAssignment slice(std::size_t begin, std::size_t end) const;

    friend bool operator==(const TargetAssignment&, const TargetAssignment&) = default;
};

struct KMeansModel {
    MatD centroids;  ///< k x d
    int iterations = 0;
    double inertia = 0.0;
    /// Inertia after every assignment pass, first entry is the k-means++ seed.
    std::vector<double> inertia_history;

    std::size_t k() const { return static_cast<std::size_t>(centroids.rows()); }
    std::size_t dim() const { return static_cast<std::size_t>(centroids.cols()); }
};

/// Exact Lloyd k-means with k-means++ seeding.
///
/// Iterates until the assignment reaches a fixpoint or max_iters updates have
/// run. A cluster that loses all its points is reseeded at the point farthest
/// from its assigned centroid. Deterministic for a fixed seed.
KMeansModel kmeans_fit(const MatD& points, std::size_t k, int max_iters = 100, std::uint64_t seed = 0);

/// Nearest centroid by squared Euclidean distance; ties go to the lowest index.
std::vector<std::uint32_t> nearest_rows(const MatD& centroids, const MatD& points);

TargetAssignment assign_clusters(const KMeansModel& model, const MatD& latents);

}  // namespace c2v
