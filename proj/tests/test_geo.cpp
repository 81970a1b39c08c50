#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "taxidest/geo.hpp"
#include "taxidest/rng.hpp"

using namespace taxidest;
using geo::Coordinate;

namespace {

// Independent oracle: spherical law of cosines. Less stable near zero
// distance but plenty accurate beyond a few hundred meters.
double law_of_cosines_km(const Coordinate& a, const Coordinate& b) {
  const double p1 = geo::deg2rad(a.lat()), p2 = geo::deg2rad(b.lat());
  const double dl = geo::deg2rad(b.lon() - a.lon());
  double c = std::sin(p1) * std::sin(p2) + std::cos(p1) * std::cos(p2) * std::cos(dl);
  if (c > 1.0) c = 1.0;
  if (c < -1.0) c = -1.0;
  return geo::kEarthRadiusKm * std::acos(c);
}

// Independent small-angle oracle: equirectangular approximation.
double equirectangular_km(const Coordinate& a, const Coordinate& b) {
  const double x = geo::deg2rad(b.lon() - a.lon()) *
                   std::cos(0.5 * (geo::deg2rad(a.lat()) + geo::deg2rad(b.lat())));
  const double y = geo::deg2rad(b.lat() - a.lat());
  return geo::kEarthRadiusKm * std::sqrt(x * x + y * y);
}

Coordinate random_point(Rng& rng) {
  return Coordinate(rng.uniform(-90.0, 90.0), rng.uniform(-180.0, 180.0));
}

}  // namespace

TEST_CASE("coordinate normalization") {
  CHECK(Coordinate(10.0, 190.0).lon() == doctest::Approx(-170.0));
  CHECK(Coordinate(10.0, -190.0).lon() == doctest::Approx(170.0));
  CHECK(Coordinate(10.0, 180.0).lon() == doctest::Approx(-180.0));
  CHECK(Coordinate(10.0, 540.0).lon() == doctest::Approx(-180.0));
  CHECK(Coordinate(10.0, -540.0).lon() == doctest::Approx(-180.0));
  CHECK(Coordinate(45.0, 45.0).lon() == 45.0);
  // Poles collapse longitude so equality is well defined.
  CHECK(Coordinate(90.0, 77.0) == Coordinate(90.0, -12.0));
  CHECK(Coordinate(-90.0, 1.0).lon() == 0.0);
  CHECK_THROWS_AS(Coordinate(91.0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(Coordinate(-90.0001, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(Coordinate(std::nan(""), 0.0), std::invalid_argument);
}

TEST_CASE("haversine fixed oracle values") {
  const Coordinate porto(41.1579, -8.6291);
  const Coordinate lisbon(38.7223, -9.1393);
  // Frozen value computed independently with the same radius constant.
  CHECK(geo::haversine_km(porto, lisbon) == doctest::Approx(274.29550573319968).epsilon(1e-12));
  // Antipodal pair spans half the great circle.
  const double half_circumference = 6371.0 * 3.14159265358979323846;
  CHECK(geo::haversine_km(Coordinate(0.0, 0.0), Coordinate(0.0, 180.0)) ==
        doctest::Approx(half_circumference).epsilon(1e-12));
  CHECK(geo::haversine_km(Coordinate(90.0, 0.0), Coordinate(-90.0, 0.0)) ==
        doctest::Approx(half_circumference).epsilon(1e-12));
}

TEST_CASE("haversine identity and symmetry") {
  Rng rng(7);
  for (int i = 0; i < 2000; ++i) {
    const Coordinate a = random_point(rng), b = random_point(rng);
    CHECK(geo::haversine_km(a, a) == 0.0);
    CHECK(geo::haversine_km(a, b) == geo::haversine_km(b, a));
  }
}

TEST_CASE("haversine range and law-of-cosines agreement") {
  Rng rng(11);
  const double max_d = 6371.0 * 3.14159265358979323846;
  for (int i = 0; i < 5000; ++i) {
    const Coordinate a = random_point(rng), b = random_point(rng);
    const double d = geo::haversine_km(a, b);
    CHECK(d >= 0.0);
    CHECK(d <= max_d * (1.0 + 1e-12));
    CHECK(d == doctest::Approx(law_of_cosines_km(a, b)).epsilon(1e-6).scale(1.0));
  }
}

TEST_CASE("haversine triangle inequality on random triples") {
  Rng rng(13);
  for (int i = 0; i < 10000; ++i) {
    const Coordinate a = random_point(rng), b = random_point(rng), c = random_point(rng);
    const double ab = geo::haversine_km(a, b);
    const double bc = geo::haversine_km(b, c);
    const double ac = geo::haversine_km(a, c);
    CHECK(ac <= ab + bc + 1e-9);
  }
}

TEST_CASE("haversine small-angle agreement under 1 km") {
  Rng rng(17);
  int checked = 0;
  while (checked < 3000) {
    const Coordinate a(rng.uniform(-60.0, 60.0), rng.uniform(-180.0, 180.0));
    const Coordinate b(a.lat() + rng.uniform(-0.008, 0.008),
                       a.lon() + rng.uniform(-0.008, 0.008));
    const double d = geo::haversine_km(a, b);
    if (d > 1.0 || d < 1e-4) continue;
    // Within 0.1% of the flat-earth approximation at sub-km scales.
    CHECK(d == doctest::Approx(equirectangular_km(a, b)).epsilon(1e-3));
    ++checked;
  }
}

TEST_CASE("eds equals haversine and aggregates correctly") {
  const Coordinate p1(41.15, -8.61), a1(41.16, -8.60);
  const Coordinate p2(41.20, -8.70), a2(41.10, -8.50);
  CHECK(geo::eds_km(p1, a1) == geo::haversine_km(p1, a1));

  std::vector<std::pair<Coordinate, Coordinate>> pairs = {{p1, a1}, {p2, a2}};
  const double d1 = geo::eds_km(p1, a1), d2 = geo::eds_km(p2, a2);
  CHECK(geo::mean_eds_km(pairs) == doctest::Approx(0.5 * (d1 + d2)).epsilon(1e-15));
  CHECK(geo::median_eds_km(pairs) == doctest::Approx(0.5 * (d1 + d2)).epsilon(1e-15));

  pairs.push_back({p1, p1});
  CHECK(geo::median_eds_km(pairs) == doctest::Approx(std::min(d1, d2)).epsilon(1e-15));

  CHECK_THROWS_AS(geo::mean_eds_km({}), std::invalid_argument);
  CHECK_THROWS_AS(geo::median_eds_km({}), std::invalid_argument);
}

TEST_CASE("median of plain values") {
  CHECK(geo::median({3.0, 1.0, 2.0}) == 2.0);
  CHECK(geo::median({4.0, 1.0, 3.0, 2.0}) == doctest::Approx(2.5));
  CHECK(geo::median({5.0}) == 5.0);
  CHECK_THROWS_AS(geo::median({}), std::invalid_argument);
}
