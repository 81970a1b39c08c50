#pragma once

#include <cstdint>
#include <span>
#include <utility>
#include <vector>

namespace taxidest::geo {

/// Mean Earth radius in kilometers; shared by every distance in the project.
inline constexpr double kEarthRadiusKm = 6371.0;

inline constexpr double deg2rad(double deg) { return deg * 0.017453292519943295; }

/// A WGS84 position in degrees. Latitude must lie in [-90, 90]; longitude is
/// normalized to [-180, 180) at construction. At the poles the longitude is
/// canonicalized to 0 so that equal points compare equal.
class Coordinate {
 public:
  Coordinate() = default;
  Coordinate(double lat_deg, double lon_deg);

  double lat() const { return lat_; }
  double lon() const { return lon_; }

  bool operator==(const Coordinate&) const = default;

 private:
  double lat_ = 0.0;
  double lon_ = 0.0;
};

/// Timestamp (UTC seconds) plus position; the atom of every trajectory.
struct SpatioTemporalPoint {
  std::int64_t t = 0;
  Coordinate loc;

  bool operator==(const SpatioTemporalPoint&) const = default;
};

/// Great-circle distance in km, 2R*atan2(sqrt(a), sqrt(1-a)).
double haversine_km(const Coordinate& a, const Coordinate& b);

/// Error Distance Score between a predicted and an actual drop-off.
/// Identical to haversine_km by definition.
double eds_km(const Coordinate& predicted, const Coordinate& actual);

/// Mean EDS over (predicted, actual) pairs. Throws on an empty input:
/// an empty evaluation set is a caller bug, not a zero score.
double mean_eds_km(std::span<const std::pair<Coordinate, Coordinate>> pairs);

/// Median of per-pair EDS; reported alongside the mean for diagnostics.
double median_eds_km(std::span<const std::pair<Coordinate, Coordinate>> pairs);

/// Median of an unsorted value list (average of the middle two when even).
double median(std::vector<double> values);

}  // namespace taxidest::geo
