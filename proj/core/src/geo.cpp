#include "taxidest/geo.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace taxidest::geo {

namespace {

double normalize_lon(double lon) {
  double l = std::fmod(lon + 180.0, 360.0);
  if (l < 0.0) l += 360.0;
  return l - 180.0;
}

}  // namespace

Coordinate::Coordinate(double lat_deg, double lon_deg) {
  if (!std::isfinite(lat_deg) || !std::isfinite(lon_deg)) {
    throw std::invalid_argument("Coordinate: non-finite lat/lon");
  }
  if (lat_deg < -90.0 || lat_deg > 90.0) {
    throw std::invalid_argument("Coordinate: latitude " + std::to_string(lat_deg) +
                                " outside [-90, 90]");
  }
  lat_ = lat_deg;
  // All longitudes at a pole name the same point.
  lon_ = (lat_deg == 90.0 || lat_deg == -90.0) ? 0.0 : normalize_lon(lon_deg);
}

double haversine_km(const Coordinate& a, const Coordinate& b) {
  const double phi1 = deg2rad(a.lat());
  const double phi2 = deg2rad(b.lat());
  const double half_dphi = 0.5 * (phi2 - phi1);
  const double half_dlambda = 0.5 * deg2rad(b.lon() - a.lon());
  const double s1 = std::sin(half_dphi);
  const double s2 = std::sin(half_dlambda);
  const double h = s1 * s1 + std::cos(phi1) * std::cos(phi2) * s2 * s2;
  // h may exceed 1 by a rounding ulp near antipodes.
  return 2.0 * kEarthRadiusKm * std::atan2(std::sqrt(h), std::sqrt(std::max(0.0, 1.0 - h)));
}

double eds_km(const Coordinate& predicted, const Coordinate& actual) {
  return haversine_km(predicted, actual);
}

double mean_eds_km(std::span<const std::pair<Coordinate, Coordinate>> pairs) {
  if (pairs.empty()) {
    throw std::invalid_argument("mean_eds_km: empty pair list");
  }
  double sum = 0.0;
  for (const auto& [predicted, actual] : pairs) {
    sum += eds_km(predicted, actual);
  }
  return sum / static_cast<double>(pairs.size());
}

double median_eds_km(std::span<const std::pair<Coordinate, Coordinate>> pairs) {
  if (pairs.empty()) {
    throw std::invalid_argument("median_eds_km: empty pair list");
  }
  std::vector<double> d;
  d.reserve(pairs.size());
  for (const auto& [predicted, actual] : pairs) {
    d.push_back(eds_km(predicted, actual));
  }
  return median(std::move(d));
}

double median(std::vector<double> values) {
  if (values.empty()) {
    throw std::invalid_argument("median: empty value list");
  }
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  if (n % 2 == 1) return values[n / 2];
  return 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace taxidest::geo
