#include "taxidest/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "taxidest/rng.hpp"
#include "taxidest/util.hpp"

namespace taxidest::clustering {

namespace {

double sq_haversine(const geo::Coordinate& a, const geo::Coordinate& b) {
  const double d = geo::haversine_km(a, b);
  return d * d;
}

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

Vec3 to_unit(const geo::Coordinate& c) {
  const double lat = geo::deg2rad(c.lat());
  const double lon = geo::deg2rad(c.lon());
  return {std::cos(lat) * std::cos(lon), std::cos(lat) * std::sin(lon), std::sin(lat)};
}

geo::Coordinate from_vec(const Vec3& v) {
  const double lat = std::atan2(v.z, std::hypot(v.x, v.y));
  const double lon = std::atan2(v.y, v.x);
  return geo::Coordinate(lat * 180.0 / std::numbers::pi, lon * 180.0 / std::numbers::pi);
}

int nearest(const geo::Coordinate& p, const std::vector<geo::Coordinate>& centroids) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int c = 0; c < static_cast<int>(centroids.size()); ++c) {
    const double d = sq_haversine(p, centroids[c]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

std::vector<geo::Coordinate> seed_plus_plus(std::span<const geo::Coordinate> points, int k,
                                            Rng& rng) {
  const std::size_t n = points.size();
  std::vector<geo::Coordinate> centroids;
  centroids.reserve(static_cast<std::size_t>(k));
  centroids.push_back(points[rng.uniform_int(n)]);

  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = sq_haversine(points[i], centroids[0]);

  while (static_cast<int>(centroids.size()) < k) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t pick;
    if (total <= 0.0) {
      // Everything coincides with a chosen centroid; fall back to the
      // first point not yet selected (caller guarantees enough distinct).
      pick = 0;
      while (pick < n && d2[pick] <= 0.0 &&
             std::any_of(centroids.begin(), centroids.end(),
                         [&](const geo::Coordinate& c) { return c == points[pick]; })) {
        ++pick;
      }
      if (pick == n) pick = 0;
    } else {
      const double target = rng.uniform() * total;
      double acc = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (acc >= target && d2[i] > 0.0) {
          pick = i;
          break;
        }
      }
    }
    centroids.push_back(points[pick]);
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], sq_haversine(points[i], centroids.back()));
    }
  }
  return centroids;
}

struct SingleRun {
  std::vector<geo::Coordinate> centroids;
  std::vector<int> assignments;
  std::vector<double> inertia_trace;
  double inertia = 0.0;
  int n_iter = 0;
};

SingleRun run_lloyd(std::span<const geo::Coordinate> points, int k, Rng& rng,
                    const KmeansOptions& options) {
  const std::size_t n = points.size();
  SingleRun run;
  run.centroids = seed_plus_plus(points, k, rng);
  run.assignments.assign(n, -1);

  bool movement_converged = false;
  for (int iter = 0; iter < options.max_iters; ++iter) {
    // Assignment pass.
    bool changed = false;
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const int c = nearest(points[i], run.centroids);
      if (c != run.assignments[i]) {
        run.assignments[i] = c;
        changed = true;
      }
      inertia += sq_haversine(points[i], run.centroids[static_cast<std::size_t>(c)]);
    }
    run.inertia = inertia;
    run.inertia_trace.push_back(inertia);
    run.n_iter = iter + 1;
    if (movement_converged || (!changed && iter > 0)) break;

    // Update pass: spherical mean per cluster, kept only when it lowers
    // that cluster's cost.
    std::vector<Vec3> sums(static_cast<std::size_t>(k));
    std::vector<std::size_t> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const Vec3 v = to_unit(points[i]);
      auto& s = sums[static_cast<std::size_t>(run.assignments[i])];
      s.x += v.x;
      s.y += v.y;
      s.z += v.z;
      ++counts[static_cast<std::size_t>(run.assignments[i])];
    }
    double max_move_km = 0.0;
    std::vector<int> empty_clusters;
    for (int c = 0; c < k; ++c) {
      const std::size_t cnt = counts[static_cast<std::size_t>(c)];
      if (cnt == 0) {
        empty_clusters.push_back(c);
        continue;
      }
      const Vec3& s = sums[static_cast<std::size_t>(c)];
      const double norm = std::sqrt(s.x * s.x + s.y * s.y + s.z * s.z);
      if (norm < 1e-12) continue;  // antipodal cancellation, keep old centroid
      const geo::Coordinate candidate = from_vec({s.x / norm, s.y / norm, s.z / norm});
      double cost_old = 0.0, cost_new = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (run.assignments[i] != c) continue;
        cost_old += sq_haversine(points[i], run.centroids[static_cast<std::size_t>(c)]);
        cost_new += sq_haversine(points[i], candidate);
      }
      if (cost_new < cost_old) {
        max_move_km = std::max(
            max_move_km, geo::haversine_km(run.centroids[static_cast<std::size_t>(c)], candidate));
        run.centroids[static_cast<std::size_t>(c)] = candidate;
      }
    }

    if (!empty_clusters.empty()) {
      // Re-seed each empty cluster at the point farthest from its current
      // centroid (ties to the lowest index). Moving an empty centroid does
      // not change the current cost, so monotonicity is preserved.
      std::vector<std::size_t> order(n);
      std::iota(order.begin(), order.end(), 0);
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double da =
            sq_haversine(points[a], run.centroids[static_cast<std::size_t>(run.assignments[a])]);
        const double db =
            sq_haversine(points[b], run.centroids[static_cast<std::size_t>(run.assignments[b])]);
        if (da != db) return da > db;
        return a < b;
      });
      std::size_t next = 0;
      for (const int c : empty_clusters) {
        if (next >= order.size()) break;
        max_move_km = std::max(max_move_km, geo::haversine_km(
                                                run.centroids[static_cast<std::size_t>(c)],
                                                points[order[next]]));
        run.centroids[static_cast<std::size_t>(c)] = points[order[next]];
        ++next;
      }
    }

    // Movement convergence: finish with one more assignment pass so the
    // recorded assignments and inertia match the final centroids.
    if (max_move_km <= options.tol_km) movement_converged = true;
  }
  return run;
}

}  // namespace

ClusterModel::ClusterModel(std::vector<geo::Coordinate> centroids, std::uint64_t seed,
                           double inertia)
    : centroids_(std::move(centroids)), seed_(seed), inertia_(inertia) {
  if (centroids_.empty()) throw std::invalid_argument("ClusterModel: no centroids");
}

int ClusterModel::assign(const geo::Coordinate& point) const {
  if (centroids_.empty()) throw std::logic_error("ClusterModel::assign on empty model");
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int c = 0; c < k(); ++c) {
    const double d = geo::haversine_km(point, centroids_[static_cast<std::size_t>(c)]);
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

std::vector<int> ClusterModel::map_trace(std::span<const geo::SpatioTemporalPoint> trace) const {
  std::vector<int> ids;
  ids.reserve(trace.size());
  for (const auto& p : trace) ids.push_back(assign(p.loc));
  return ids;
}

void ClusterModel::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write cluster model " + path);
  out << "taxidest-clusters v1\n";
  out << "k " << k() << " seed " << seed_ << " m " << k() << "\n";
  for (const geo::Coordinate& c : centroids_) {
    out << format_double(c.lat()) << ' ' << format_double(c.lon()) << '\n';
  }
  if (!out) throw std::runtime_error("short write to " + path);
}

ClusterModel ClusterModel::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open cluster model " + path);
  std::string line;
  if (!std::getline(in, line) || trim(line) != "taxidest-clusters v1") {
    throw std::runtime_error(path + ": not a cluster model file (bad magic)");
  }
  if (!std::getline(in, line)) throw std::runtime_error(path + ": truncated header");
  const std::vector<std::string> kv = split(trim(line), ' ');
  if (kv.size() != 6 || kv[0] != "k" || kv[2] != "seed" || kv[4] != "m") {
    throw std::runtime_error(path + ": expected 'k <k> seed <seed> m <m>'");
  }
  const std::int64_t k = parse_i64(kv[1]);
  const std::uint64_t seed = parse_u64(kv[3]);
  const std::int64_t m = parse_i64(kv[5]);
  if (k < 1 || m < 1 || k != m) throw std::runtime_error(path + ": bad centroid counts");
  std::vector<geo::Coordinate> centroids;
  centroids.reserve(static_cast<std::size_t>(m));
  for (std::int64_t i = 0; i < m; ++i) {
    if (!std::getline(in, line)) throw std::runtime_error(path + ": truncated centroid list");
    const std::vector<std::string> f = split(trim(line), ' ');
    if (f.size() != 2) throw std::runtime_error(path + ": bad centroid line");
    centroids.emplace_back(parse_double(f[0]), parse_double(f[1]));
  }
  return ClusterModel(std::move(centroids), seed);
}

KmeansResult fit_kmeans(std::span<const geo::Coordinate> points, int k, std::uint64_t seed,
                        const KmeansOptions& options) {
  if (points.empty()) throw std::invalid_argument("fit_kmeans: no points");
  if (k < 1) throw std::invalid_argument("fit_kmeans: k must be >= 1");
  if (options.max_iters < 1 || options.n_init < 1) {
    throw std::invalid_argument("fit_kmeans: max_iters and n_init must be >= 1");
  }
  std::set<std::pair<double, double>> distinct;
  for (const geo::Coordinate& p : points) {
    distinct.emplace(p.lat(), p.lon());
    if (static_cast<int>(distinct.size()) >= k) break;
  }
  if (static_cast<int>(distinct.size()) < k) {
    throw std::invalid_argument("fit_kmeans: k exceeds the number of distinct points");
  }

  SingleRun best;
  bool have_best = false;
  for (int r = 0; r < options.n_init; ++r) {
    Rng rng(sub_seed(seed, static_cast<std::uint64_t>(r)));
    SingleRun run = run_lloyd(points, k, rng, options);
    if (!have_best || run.inertia < best.inertia) {
      best = std::move(run);
      have_best = true;
    }
  }

  KmeansResult result;
  result.model = ClusterModel(std::move(best.centroids), seed, best.inertia);
  result.inertia = best.inertia;
  result.assignments = std::move(best.assignments);
  result.inertia_trace = std::move(best.inertia_trace);
  result.n_iter = best.n_iter;
  return result;
}

}  // namespace taxidest::clustering
