#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "taxidest/geo.hpp"

namespace taxidest::ingest {

// ---------------------------------------------------------------------------
// Trip records
// ---------------------------------------------------------------------------

enum class TripFormat {
  kPolylineCsv,  // driver_id,start_time,polyline[,day_type][,call_type]
  kOdCsv,        // driver_id,start_time,pickup_lat,pickup_lon,dropoff_lat,dropoff_lon
};

/// One taxi ride. For polyline datasets the pickup/dropoff are the first and
/// last trace points; origin-destination datasets carry the endpoints only.
struct TripRecord {
  std::string driver_id;
  std::int64_t start_time = 0;  // UTC epoch seconds
  geo::Coordinate pickup;
  geo::Coordinate dropoff;
  std::vector<geo::Coordinate> raw_polyline;         // empty when absent
  std::map<std::string, std::string> metadata;       // day_type, call_type, ...
};

struct RowReject {
  std::size_t line_no = 0;  // 1-based, header included in the count
  std::string reason;
};

struct TripParseResult {
  std::vector<TripRecord> records;
  std::vector<RowReject> rejects;
};

/// Parses a trip file, all rows in memory. Malformed rows land in
/// `rejects` with their line number; a bad row never silently vanishes.
/// Throws only for file-level problems (unreadable, bad header).
TripParseResult parse_trips(const std::string& path, TripFormat format);

/// Streaming variant for files too large to hold as TripRecords.
void parse_trips_stream(const std::string& path, TripFormat format,
                        const std::function<void(TripRecord&&)>& on_record,
                        const std::function<void(const RowReject&)>& on_reject);

/// Keeps only the n most active drivers (by trip count; ties broken by
/// driver id). The documented approximation for subsampling huge fleets.
std::vector<TripRecord> filter_top_drivers(std::vector<TripRecord> trips, std::size_t n);

// ---------------------------------------------------------------------------
// POIs
// ---------------------------------------------------------------------------

/// The ten venue macro-categories, in fixed order. Every bag-of-concepts
/// vector is indexed by this order.
inline constexpr int kPoiCategoryCount = 10;
const char* poi_category_name(int index);

/// Resolves a raw category label ("Arts & Entertainment", "food", ...) to its
/// fixed index, or nullopt for an unknown category.
std::optional<int> parse_poi_category(const std::string& label);

struct Poi {
  geo::Coordinate loc;
  int macro_category = 0;  // index into the fixed ten
  std::string name;
  std::vector<std::string> category_path;  // root first
};

struct PoiParseResult {
  std::vector<Poi> pois;
  std::vector<RowReject> rejects;
};

/// POI file: one record per line, tab-separated
///   lat <TAB> lon <TAB> name <TAB> category path
/// with the category path segments joined by " → ". Only the path root
/// (the macro-category) is kept for featurization.
PoiParseResult parse_pois(const std::string& path);

// ---------------------------------------------------------------------------
// Temporal metadata
// ---------------------------------------------------------------------------

struct TemporalMeta {
  int hour = 0;      // [0, 23]
  int weekday = 0;   // [0, 6], Monday = 0
  int day_type = 0;  // 0 workday, 1 pre-holiday, 2 holiday/weekend

  bool operator==(const TemporalMeta&) const = default;
};

/// Set of holiday dates. Weekends are always day-type 2 regardless of the
/// calendar; an empty calendar means weekends-only.
class HolidayCalendar {
 public:
  HolidayCalendar() = default;

  /// One ISO-8601 date (YYYY-MM-DD) per line; '#' comments allowed.
  static HolidayCalendar load(const std::string& path);

  void add(int year, int month, int day);
  bool contains(int year, int month, int day) const;
  std::size_t size() const { return days_.size(); }

 private:
  std::set<std::int32_t> days_;  // packed y*10000 + m*100 + d
};

/// Civil date/time helpers (proleptic Gregorian, no DST).
struct CivilDateTime {
  int year, month, day;
  int hour, minute, second;
  int weekday;  // Monday = 0
};
CivilDateTime civil_from_epoch(std::int64_t utc_seconds, int utc_offset_min);

/// Hour, weekday, and day-type of a timestamp in the dataset's local time
/// (expressed as a fixed UTC offset). Day-type: 2 when the date is a weekend
/// or calendar holiday, 1 when the next day is, 0 otherwise.
TemporalMeta derive_temporal_meta(std::int64_t utc_seconds, const HolidayCalendar& holidays,
                                  int utc_offset_min = 0);

// ---------------------------------------------------------------------------
// Driver sequences
// ---------------------------------------------------------------------------

/// One training/evaluation sample: a driver's recent pick-up/drop-off
/// history, the pick-up of the ride being predicted, and (when known)
/// the true drop-off.
struct DriverSequence {
  std::string driver_id;
  /// Alternating pickup, dropoff, pickup, dropoff, ...; even length <= k.
  std::vector<geo::SpatioTemporalPoint> history;
  geo::SpatioTemporalPoint current_pickup;
  std::optional<geo::Coordinate> target;  // absent at inference time
  TemporalMeta temporal_meta;             // of the current pickup

  /// First-5/last-5 trace points of the predicted ride (all points when the
  /// trace has <= 10), kept for the perceptron baseline; empty when the
  /// source data has no traces. `trip_point_count` is the original length.
  std::vector<geo::Coordinate> trip_head_tail;
  int trip_point_count = 0;
};

struct SequenceOptions {
  int k = 8;                         // max history points (k/2 rides)
  double max_gap_hours = 3.0;        // shift boundary
  int polyline_sample_period_s = 15; // trace sampling period, for drop-off times
  int utc_offset_min = 0;
  HolidayCalendar holidays;
};

/// Builds one sample per trip that has at least one preceding trip in the
/// same shift. Trips are grouped by driver and sorted by start time (ties
/// keep input order); a gap longer than max_gap_hours between a drop-off
/// and the next pick-up starts a new shift, and history never crosses it.
///
/// Drop-off timestamps are derived: start + sample_period * (trace_len - 1)
/// when a trace is present, start + 1 s otherwise (endpoint-only data has
/// no duration). A trip whose points cannot keep the history strictly
/// time-ordered, or whose own duration exceeds the gap limit, acts as a
/// shift boundary as well.
std::vector<DriverSequence> build_sequences(std::span<const TripRecord> trips,
                                            const SequenceOptions& options = {});

// ---------------------------------------------------------------------------
// Sequence files
// ---------------------------------------------------------------------------

/// JSON-lines serialization of samples (one object per line, sorted keys,
/// shortest round-trip floats). Byte-identical across runs for equal input.
void write_sequences_jsonl(const std::string& path, std::span<const DriverSequence> samples);
std::vector<DriverSequence> read_sequences_jsonl(const std::string& path);

}  // namespace taxidest::ingest
