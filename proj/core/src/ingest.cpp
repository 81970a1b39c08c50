#include "taxidest/ingest.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "taxidest/util.hpp"

namespace taxidest::ingest {

namespace {

// ---------------------------------------------------------------------------
// CSV plumbing
// ---------------------------------------------------------------------------

// RFC-4180 style fields: quoted fields may contain commas, "" escapes a
// quote. Embedded newlines inside quotes are not supported (none of the
// source formats produce them).
std::vector<std::string> parse_csv_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  bool in_quotes = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"') {
      in_quotes = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

std::string strip_cr(std::string line) {
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

struct ColumnIndex {
  int driver = -1;
  int time = -1;
  int polyline = -1;
  int pickup_lat = -1, pickup_lon = -1, dropoff_lat = -1, dropoff_lon = -1;
  int day_type = -1;
  int call_type = -1;
  int missing = -1;
};

// Header names are matched case-insensitively; the aliases cover the
// public Porto release (TAXI_ID/TIMESTAMP/POLYLINE/...).
ColumnIndex resolve_header(const std::vector<std::string>& header, TripFormat format,
                           const std::string& path) {
  ColumnIndex ix;
  for (int i = 0; i < static_cast<int>(header.size()); ++i) {
    const std::string name = to_lower(trim(header[i]));
    if (name == "driver_id" || name == "taxi_id") ix.driver = i;
    else if (name == "start_time" || name == "timestamp") ix.time = i;
    else if (name == "polyline") ix.polyline = i;
    else if (name == "pickup_lat") ix.pickup_lat = i;
    else if (name == "pickup_lon") ix.pickup_lon = i;
    else if (name == "dropoff_lat") ix.dropoff_lat = i;
    else if (name == "dropoff_lon") ix.dropoff_lon = i;
    else if (name == "day_type") ix.day_type = i;
    else if (name == "call_type") ix.call_type = i;
    else if (name == "missing_data") ix.missing = i;
  }
  const auto require = [&](int col, const char* what) {
    if (col < 0) {
      throw std::runtime_error(path + ": header is missing required column '" +
                               std::string(what) + "'");
    }
  };
  require(ix.driver, "driver_id");
  require(ix.time, "start_time");
  if (format == TripFormat::kPolylineCsv) {
    require(ix.polyline, "polyline");
  } else {
    require(ix.pickup_lat, "pickup_lat");
    require(ix.pickup_lon, "pickup_lon");
    require(ix.dropoff_lat, "dropoff_lat");
    require(ix.dropoff_lon, "dropoff_lon");
  }
  return ix;
}

std::vector<geo::Coordinate> decode_polyline(const std::string& text) {
  const nlohmann::json j = nlohmann::json::parse(text);
  if (!j.is_array()) throw std::invalid_argument("polyline is not an array");
  std::vector<geo::Coordinate> pts;
  pts.reserve(j.size());
  for (const auto& p : j) {
    if (!p.is_array() || p.size() != 2) {
      throw std::invalid_argument("polyline entry is not a [lon, lat] pair");
    }
    // Source order is [lon, lat].
    pts.emplace_back(p[1].get<double>(), p[0].get<double>());
  }
  return pts;
}

std::optional<int> parse_day_type_label(const std::string& raw) {
  const std::string v = to_lower(trim(raw));
  if (v == "0" || v == "a") return 0;  // workday
  if (v == "1" || v == "c") return 1;  // pre-holiday
  if (v == "2" || v == "b") return 2;  // holiday / special day
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Civil date math (Hinnant's algorithms, proleptic Gregorian)
// ---------------------------------------------------------------------------

void civil_from_days(std::int64_t z, int& y, int& m, int& d) {
  z += 719468;
  const std::int64_t era = (z >= 0 ? z : z - 146096) / 146097;
  const unsigned doe = static_cast<unsigned>(z - era * 146097);
  const unsigned yoe = (doe - doe / 1460 + doe / 36524 - doe / 146096) / 365;
  const std::int64_t yy = static_cast<std::int64_t>(yoe) + era * 400;
  const unsigned doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
  const unsigned mp = (5 * doy + 2) / 153;
  d = static_cast<int>(doy - (153 * mp + 2) / 5 + 1);
  m = static_cast<int>(mp < 10 ? mp + 3 : mp - 9);
  y = static_cast<int>(m <= 2 ? yy + 1 : yy);
}

}  // namespace

// ---------------------------------------------------------------------------
// Trip parsing
// ---------------------------------------------------------------------------

void parse_trips_stream(const std::string& path, TripFormat format,
                        const std::function<void(TripRecord&&)>& on_record,
                        const std::function<void(const RowReject&)>& on_reject) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open trip file " + path);

  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file, expected header");
  const ColumnIndex ix = resolve_header(parse_csv_fields(strip_cr(line)), format, path);

  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (trim(line).empty()) continue;
    const std::vector<std::string> f = parse_csv_fields(line);
    try {
      const int needed = std::max({ix.driver, ix.time, ix.polyline, ix.pickup_lat,
                                   ix.pickup_lon, ix.dropoff_lat, ix.dropoff_lon});
      if (static_cast<int>(f.size()) <= needed) {
        throw std::invalid_argument("row has too few columns");
      }
      if (ix.missing >= 0 && to_lower(trim(f[ix.missing])) == "true") {
        throw std::invalid_argument("row flagged missing_data");
      }
      TripRecord rec;
      rec.driver_id = trim(f[ix.driver]);
      if (rec.driver_id.empty()) throw std::invalid_argument("empty driver_id");
      rec.start_time = parse_i64(f[ix.time]);
      if (format == TripFormat::kPolylineCsv) {
        rec.raw_polyline = decode_polyline(f[ix.polyline]);
        if (rec.raw_polyline.size() < 2) {
          throw std::invalid_argument("polyline has fewer than 2 points");
        }
        rec.pickup = rec.raw_polyline.front();
        rec.dropoff = rec.raw_polyline.back();
      } else {
        rec.pickup = geo::Coordinate(parse_double(f[ix.pickup_lat]), parse_double(f[ix.pickup_lon]));
        rec.dropoff =
            geo::Coordinate(parse_double(f[ix.dropoff_lat]), parse_double(f[ix.dropoff_lon]));
      }
      if (ix.day_type >= 0 && !trim(f[ix.day_type]).empty()) {
        rec.metadata["day_type"] = trim(f[ix.day_type]);
      }
      if (ix.call_type >= 0 && !trim(f[ix.call_type]).empty()) {
        rec.metadata["call_type"] = trim(f[ix.call_type]);
      }
      on_record(std::move(rec));
    } catch (const std::exception& e) {
      on_reject(RowReject{line_no, e.what()});
    }
  }
}

TripParseResult parse_trips(const std::string& path, TripFormat format) {
  TripParseResult out;
  parse_trips_stream(
      path, format, [&](TripRecord&& r) { out.records.push_back(std::move(r)); },
      [&](const RowReject& r) { out.rejects.push_back(r); });
  return out;
}

std::vector<TripRecord> filter_top_drivers(std::vector<TripRecord> trips, std::size_t n) {
  std::map<std::string, std::size_t> counts;
  for (const TripRecord& t : trips) ++counts[t.driver_id];
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (ranked.size() > n) ranked.resize(n);
  std::set<std::string> keep;
  for (const auto& [id, count] : ranked) keep.insert(id);
  std::erase_if(trips, [&](const TripRecord& t) { return !keep.contains(t.driver_id); });
  return trips;
}

// ---------------------------------------------------------------------------
// POIs
// ---------------------------------------------------------------------------

namespace {

constexpr std::array<const char*, kPoiCategoryCount> kCategoryNames = {
    "Arts and Entertainment", "College and University",
    "Event",                  "Food",
    "Nightlife Spot",         "Outdoors and Recreation",
    "Professional and Other Places", "Residence",
    "Shop and Service",       "Travel and Transport"};

std::string canonical_category(const std::string& label) {
  std::string s = to_lower(trim(label));
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '&') {
      out += "and";
    } else if (std::isspace(static_cast<unsigned char>(s[i]))) {
      if (!out.empty() && out.back() != ' ') out.push_back(' ');
    } else {
      out.push_back(s[i]);
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

// Splits "Food → Asian Restaurant → Chinese Restaurant" on the arrow
// (U+2192, bytes E2 86 92), tolerating missing surrounding spaces.
std::vector<std::string> split_category_path(const std::string& path) {
  static const std::string kArrow = "\xE2\x86\x92";
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = path.find(kArrow, start);
    if (pos == std::string::npos) {
      parts.push_back(trim(path.substr(start)));
      break;
    }
    parts.push_back(trim(path.substr(start, pos - start)));
    start = pos + kArrow.size();
  }
  std::erase_if(parts, [](const std::string& p) { return p.empty(); });
  return parts;
}

}  // namespace

const char* poi_category_name(int index) {
  if (index < 0 || index >= kPoiCategoryCount) {
    throw std::out_of_range("poi_category_name: index " + std::to_string(index));
  }
  return kCategoryNames[static_cast<std::size_t>(index)];
}

std::optional<int> parse_poi_category(const std::string& label) {
  const std::string canon = canonical_category(label);
  for (int i = 0; i < kPoiCategoryCount; ++i) {
    if (canon == canonical_category(kCategoryNames[static_cast<std::size_t>(i)])) return i;
  }
  return std::nullopt;
}

PoiParseResult parse_pois(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open POI file " + path);
  PoiParseResult out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (trim(line).empty()) continue;
    try {
      const std::vector<std::string> f = split(line, '\t');
      if (f.size() != 4) {
        throw std::invalid_argument("expected 4 tab-separated fields, got " +
                                    std::to_string(f.size()));
      }
      Poi poi;
      poi.loc = geo::Coordinate(parse_double(f[0]), parse_double(f[1]));
      poi.name = trim(f[2]);
      poi.category_path = split_category_path(f[3]);
      if (poi.category_path.empty()) throw std::invalid_argument("empty category path");
      const auto cat = parse_poi_category(poi.category_path.front());
      if (!cat) {
        throw std::invalid_argument("unknown macro-category '" + poi.category_path.front() + "'");
      }
      poi.macro_category = *cat;
      out.pois.push_back(std::move(poi));
    } catch (const std::exception& e) {
      out.rejects.push_back(RowReject{line_no, e.what()});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Temporal metadata
// ---------------------------------------------------------------------------

HolidayCalendar HolidayCalendar::load(const std::string& path) {
  HolidayCalendar cal;
  std::istringstream in(read_text_file(path));
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::vector<std::string> f = split(line, '-');
    if (f.size() != 3) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) +
                               ": expected YYYY-MM-DD, got '" + line + "'");
    }
    cal.add(static_cast<int>(parse_i64(f[0])), static_cast<int>(parse_i64(f[1])),
            static_cast<int>(parse_i64(f[2])));
  }
  return cal;
}

void HolidayCalendar::add(int year, int month, int day) {
  if (month < 1 || month > 12 || day < 1 || day > 31) {
    throw std::invalid_argument("HolidayCalendar: bad date");
  }
  days_.insert(year * 10000 + month * 100 + day);
}

bool HolidayCalendar::contains(int year, int month, int day) const {
  return days_.contains(year * 10000 + month * 100 + day);
}

CivilDateTime civil_from_epoch(std::int64_t utc_seconds, int utc_offset_min) {
  const std::int64_t local = utc_seconds + static_cast<std::int64_t>(utc_offset_min) * 60;
  std::int64_t days = local / 86400;
  std::int64_t secs = local % 86400;
  if (secs < 0) {
    secs += 86400;
    days -= 1;
  }
  CivilDateTime c{};
  civil_from_days(days, c.year, c.month, c.day);
  c.hour = static_cast<int>(secs / 3600);
  c.minute = static_cast<int>((secs / 60) % 60);
  c.second = static_cast<int>(secs % 60);
  // 1970-01-01 was a Thursday; Monday = 0.
  c.weekday = static_cast<int>(((days % 7) + 10) % 7);
  return c;
}

namespace {

bool is_holiday_or_weekend(const CivilDateTime& c, const HolidayCalendar& holidays) {
  if (c.weekday >= 5) return true;  // Saturday, Sunday
  return holidays.contains(c.year, c.month, c.day);
}

}  // namespace

TemporalMeta derive_temporal_meta(std::int64_t utc_seconds, const HolidayCalendar& holidays,
                                  int utc_offset_min) {
  const CivilDateTime today = civil_from_epoch(utc_seconds, utc_offset_min);
  TemporalMeta meta;
  meta.hour = today.hour;
  meta.weekday = today.weekday;
  if (is_holiday_or_weekend(today, holidays)) {
    meta.day_type = 2;
  } else {
    const CivilDateTime tomorrow = civil_from_epoch(utc_seconds + 86400, utc_offset_min);
    meta.day_type = is_holiday_or_weekend(tomorrow, holidays) ? 1 : 0;
  }
  return meta;
}

// ---------------------------------------------------------------------------
// Sequence construction
// ---------------------------------------------------------------------------

namespace {

std::vector<geo::Coordinate> head_tail_window(const std::vector<geo::Coordinate>& poly) {
  if (poly.size() <= 10) return poly;
  std::vector<geo::Coordinate> out(poly.begin(), poly.begin() + 5);
  out.insert(out.end(), poly.end() - 5, poly.end());
  return out;
}

}  // namespace

std::vector<DriverSequence> build_sequences(std::span<const TripRecord> trips,
                                            const SequenceOptions& options) {
  if (options.k < 2 || options.k % 2 != 0) {
    throw std::invalid_argument("build_sequences: k must be even and >= 2");
  }
  const std::int64_t max_gap_s =
      static_cast<std::int64_t>(std::llround(options.max_gap_hours * 3600.0));
  const int max_hist_trips = options.k / 2;

  // Group by driver; map order makes output order deterministic.
  std::map<std::string, std::vector<std::size_t>> by_driver;
  for (std::size_t i = 0; i < trips.size(); ++i) {
    by_driver[trips[i].driver_id].push_back(i);
  }

  std::vector<DriverSequence> samples;
  for (auto& [driver_id, idx] : by_driver) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      return trips[a].start_time < trips[b].start_time;
    });

    const std::size_t n = idx.size();
    std::vector<std::int64_t> pickup_t(n), dropoff_t(n);
    for (std::size_t j = 0; j < n; ++j) {
      const TripRecord& t = trips[idx[j]];
      pickup_t[j] = t.start_time;
      dropoff_t[j] =
          t.raw_polyline.empty()
              ? t.start_time + 1
              : t.start_time + static_cast<std::int64_t>(options.polyline_sample_period_s) *
                                   static_cast<std::int64_t>(t.raw_polyline.size() - 1);
    }
    // Trip j chains to trip j+1 when the idle gap keeps strict time order
    // and stays within the shift limit.
    const auto link_ok = [&](std::size_t j) {
      const std::int64_t gap = pickup_t[j + 1] - dropoff_t[j];
      return gap >= 1 && gap <= max_gap_s;
    };
    // A trip longer than the gap limit can never sit inside a history
    // without breaking the consecutive-points rule.
    const auto history_eligible = [&](std::size_t j) {
      return dropoff_t[j] - pickup_t[j] <= max_gap_s;
    };

    for (std::size_t i = 1; i < n; ++i) {
      std::size_t first = i;
      while (first > 0 && static_cast<int>(i - first) < max_hist_trips && link_ok(first - 1) &&
             history_eligible(first - 1)) {
        --first;
      }
      if (first == i) continue;  // no usable prior trip in this shift

      const TripRecord& cur = trips[idx[i]];
      DriverSequence s;
      s.driver_id = driver_id;
      s.history.reserve(2 * (i - first));
      for (std::size_t j = first; j < i; ++j) {
        const TripRecord& t = trips[idx[j]];
        s.history.push_back({pickup_t[j], t.pickup});
        s.history.push_back({dropoff_t[j], t.dropoff});
      }
      s.current_pickup = {pickup_t[i], cur.pickup};
      s.target = cur.dropoff;

      s.temporal_meta =
          derive_temporal_meta(pickup_t[i], options.holidays, options.utc_offset_min);
      if (const auto it = cur.metadata.find("day_type"); it != cur.metadata.end()) {
        if (const auto dt = parse_day_type_label(it->second)) s.temporal_meta.day_type = *dt;
      }
      if (!cur.raw_polyline.empty()) {
        s.trip_head_tail = head_tail_window(cur.raw_polyline);
        s.trip_point_count = static_cast<int>(cur.raw_polyline.size());
      }
      samples.push_back(std::move(s));
    }
  }
  return samples;
}

// ---------------------------------------------------------------------------
// Sequence files
// ---------------------------------------------------------------------------

namespace {

nlohmann::json point_json(const geo::SpatioTemporalPoint& p) {
  return nlohmann::json::array({p.t, p.loc.lat(), p.loc.lon()});
}

geo::SpatioTemporalPoint point_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw std::invalid_argument("bad point triple");
  return {j[0].get<std::int64_t>(), geo::Coordinate(j[1].get<double>(), j[2].get<double>())};
}

}  // namespace

void write_sequences_jsonl(const std::string& path, std::span<const DriverSequence> samples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  for (const DriverSequence& s : samples) {
    nlohmann::json j;
    j["driver"] = s.driver_id;
    nlohmann::json hist = nlohmann::json::array();
    for (const auto& p : s.history) hist.push_back(point_json(p));
    j["hist"] = hist;
    j["pickup"] = point_json(s.current_pickup);
    if (s.target) j["target"] = nlohmann::json::array({s.target->lat(), s.target->lon()});
    j["hour"] = s.temporal_meta.hour;
    j["weekday"] = s.temporal_meta.weekday;
    j["day_type"] = s.temporal_meta.day_type;
    if (s.trip_point_count > 0) {
      nlohmann::json poly = nlohmann::json::array();
      for (const auto& c : s.trip_head_tail) poly.push_back({c.lat(), c.lon()});
      j["poly"] = poly;
      j["poly_n"] = s.trip_point_count;
    }
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("short write to " + path);
}

std::vector<DriverSequence> read_sequences_jsonl(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open sequence file " + path);
  std::vector<DriverSequence> samples;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = strip_cr(line);
    if (trim(line).empty()) continue;
    try {
      const nlohmann::json j = nlohmann::json::parse(line);
      DriverSequence s;
      s.driver_id = j.at("driver").get<std::string>();
      for (const auto& p : j.at("hist")) s.history.push_back(point_from_json(p));
      s.current_pickup = point_from_json(j.at("pickup"));
      if (j.contains("target")) {
        const auto& t = j["target"];
        s.target = geo::Coordinate(t.at(0).get<double>(), t.at(1).get<double>());
      }
      s.temporal_meta.hour = j.at("hour").get<int>();
      s.temporal_meta.weekday = j.at("weekday").get<int>();
      s.temporal_meta.day_type = j.at("day_type").get<int>();
      if (j.contains("poly")) {
        for (const auto& c : j["poly"]) {
          s.trip_head_tail.emplace_back(c.at(0).get<double>(), c.at(1).get<double>());
        }
        s.trip_point_count = j.at("poly_n").get<int>();
      }
      samples.push_back(std::move(s));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return samples;
}

}  // namespace taxidest::ingest
