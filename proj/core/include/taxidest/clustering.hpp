#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "taxidest/geo.hpp"

namespace taxidest::clustering {

/// Fitted destination clusters. Centroid order is the class order used by
/// every downstream consumer (softmax heads, zone vocabularies), so it is
/// part of the model identity and preserved exactly by save/load.
class ClusterModel {
 public:
  ClusterModel() = default;
  explicit ClusterModel(std::vector<geo::Coordinate> centroids, std::uint64_t seed = 0,
                        double inertia = 0.0);

  int k() const { return static_cast<int>(centroids_.size()); }
  const std::vector<geo::Coordinate>& centroids() const { return centroids_; }
  std::uint64_t seed() const { return seed_; }
  /// Sum of squared haversine km over the fitted points; 0 for
  /// hand-constructed models.
  double inertia() const { return inertia_; }

  /// Index of the nearest centroid by haversine distance; ties resolve to
  /// the lowest index. Throws std::logic_error on an empty model.
  int assign(const geo::Coordinate& point) const;

  /// Cluster id for every point of a trace, in order.
  std::vector<int> map_trace(std::span<const geo::SpatioTemporalPoint> trace) const;

  /// Versioned text format, shortest round-trip floats; load rejects
  /// unknown versions and truncated files.
  void save(const std::string& path) const;
  static ClusterModel load(const std::string& path);

 private:
  std::vector<geo::Coordinate> centroids_;
  std::uint64_t seed_ = 0;
  double inertia_ = 0.0;
};

struct KmeansOptions {
  int max_iters = 100;
  /// Convergence threshold: a Lloyd run stops once no centroid moved more
  /// than this between iterations.
  double tol_km = 1e-4;
  /// Independent seeded restarts inside one fit; the lowest-inertia run
  /// wins (first such run on ties).
  int n_init = 10;
};

struct KmeansResult {
  ClusterModel model;
  double inertia = 0.0;          // sum of squared haversine km to assigned centroid
  std::vector<int> assignments;  // per input point
  /// Inertia after each assignment pass of the winning restart;
  /// non-increasing by construction.
  std::vector<double> inertia_trace;
  int n_iter = 0;
};

/// K-means on the sphere: haversine assignment, centroid update by the
/// normalized 3-D mean of member unit vectors. The update is safeguarded
/// (a cluster keeps its old centroid when the spherical mean would not
/// lower that cluster's cost) so inertia never increases. Seeding is
/// k-means++; empty clusters are re-seeded at the point currently farthest
/// from its centroid. Deterministic for a fixed seed.
///
/// Throws std::invalid_argument when points is empty, k < 1, or k exceeds
/// the number of distinct points.
KmeansResult fit_kmeans(std::span<const geo::Coordinate> points, int k, std::uint64_t seed,
                        const KmeansOptions& options = {});

}  // namespace taxidest::clustering
