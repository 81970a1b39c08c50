#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "taxidest/clustering.hpp"
#include "taxidest/features.hpp"
#include "taxidest/ingest.hpp"
#include "taxidest/model.hpp"

namespace taxidest::experiment {

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

struct SplitFractions {
  double train = 0.65;
  double val = 0.15;
  double test = 0.20;

  /// All fractions positive and summing to 1 (within 1e-9).
  void validate() const;
};

struct SplitResult {
  std::vector<ingest::DriverSequence> train, val, test;
};

/// Seeded uniform permutation, then contiguous slices. Each split gets
/// floor(fraction * n) samples; the samples lost to flooring go one each
/// to the splits with the largest fractional remainders, ties favoring
/// train, then val, then test. Throws when any split would be empty.
SplitResult split(std::span<const ingest::DriverSequence> samples,
                  const SplitFractions& fractions, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Train-split artifacts
// ---------------------------------------------------------------------------

struct PipelineOptions {
  int k_clusters = 100;
  clustering::KmeansOptions kmeans;
  features::CbowOptions cbow;
  std::uint64_t seed = 0;
};

/// Everything fitted from data. By construction a function of the train
/// split (plus the static POI list) alone; artifacts_digest() exists so
/// tests can assert that perturbing other splits changes nothing.
struct PipelineArtifacts {
  clustering::ClusterModel clusters;
  std::vector<features::BocVector> boc;  // all-zero when no POIs were given
  features::CbowResult zone_cbow;        // k_clusters x cbow.dim
  model::Standardization standardization;
  features::DriverVocab drivers;
};

PipelineArtifacts fit_pipeline(std::span<const ingest::DriverSequence> train,
                               std::span<const ingest::Poi> pois,
                               const PipelineOptions& options);

std::uint64_t artifacts_digest(const PipelineArtifacts& artifacts);

// ---------------------------------------------------------------------------
// Model menu
// ---------------------------------------------------------------------------

enum class ModelKind {
  kNn,          // nearest centroid to the pick-up, no training
  kMmlp,        // perceptron over first-5/last-5 trace points
  kMmlpSeq,     // perceptron over the history/pickup points
  kLstm,        // recurrent model, no venue counts, trainable zone embedding
  kLstmBoc,     // adds venue counts
  kLstmBocW2v,  // adds the frozen CBOW zone embedding
};

const char* model_kind_name(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

struct ModelRequest {
  ModelKind kind = ModelKind::kNn;
  model::Mode mode = model::Mode::kRegression;  // meaningful for lstm tiers only
};

/// CSV identity: the kind name, with "_class" appended for
/// classification-mode lstm tiers.
std::string model_request_name(const ModelRequest& request);

/// Comma-separated list, each entry "kind" or "kind:mode".
std::vector<ModelRequest> parse_model_requests(const std::string& list);

// ---------------------------------------------------------------------------
// Experiment specification
// ---------------------------------------------------------------------------

struct ExperimentSpec {
  std::string dataset_path;
  ingest::TripFormat format = ingest::TripFormat::kPolylineCsv;
  std::string poi_path;      // empty: venue counts stay all-zero
  std::string holiday_path;  // empty: no holidays
  std::string city = "city";
  SplitFractions fractions;
  std::uint64_t seed = 0;
  int k_clusters = 100;
  std::size_t top_drivers = 0;  // 0: keep every driver
  ingest::SequenceOptions sequence;
  std::vector<ModelRequest> models;
  std::string output_dir = "out";

  model::PredictorConfig predictor;  // per-model seed/mode applied in run()
  model::MmlpConfig mmlp;
  features::CbowOptions cbow;
  clustering::KmeansOptions kmeans;

  void validate() const;
};

/// Builds a spec from `key = value` entries (config file semantics; CLI
/// flags override by rewriting the map before this call). Unknown keys
/// throw std::invalid_argument.
ExperimentSpec spec_from_config(const std::map<std::string, std::string>& config);

const char* trip_format_name(ingest::TripFormat format);
ingest::TripFormat parse_trip_format(const std::string& name);

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

struct ResultRow {
  std::string model;
  std::string city;
  double mean_eds_km = 0.0;
  double median_eds_km = 0.0;
  int n_test = 0;
  std::uint64_t seed = 0;
  double wall_s = 0.0;
};

std::string results_csv(std::span<const ResultRow> rows);
std::vector<ResultRow> parse_results_csv(const std::string& text);

/// Rows from every input CSV merged and sorted by city, then model.
std::string merge_reports(std::span<const std::string> csv_paths);

/// "bin_lo_km,bin_hi_km,count" rows over fixed-width bins starting at 0;
/// the last bin ends at the smallest multiple of bin_km above the maximum.
std::string eds_histogram_csv(std::span<const double> eds_km, double bin_km);

/// Per-sample dump reader ("sample_id,pred_lat,...,eds_km"); returns the
/// eds_km column.
std::vector<double> read_sample_eds(const std::string& path);

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

/// Wall-clock source in seconds. Injectable so reproducibility tests can
/// pin wall_s; default is the steady clock.
using Clock = std::function<double()>;

struct RunOutcome {
  std::vector<ResultRow> rows;         // successful models, in request order
  std::vector<std::string> failures;   // "model: reason", mirrored in failures.txt
  std::uint64_t artifacts_digest = 0;
};

/// Runs every requested model on identical splits fitted once from the
/// train split. Writes to spec.output_dir: results.csv, failures.txt,
/// clusters.txt, boc.csv, zone_embeddings.txt, and per model
/// <name>.ckpt (when it has weights) plus <name>_samples.csv. One
/// model's failure is recorded and does not abort the others.
RunOutcome run(const ExperimentSpec& spec, const Clock& clock = {});

}  // namespace taxidest::experiment
