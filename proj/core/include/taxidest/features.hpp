#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "taxidest/clustering.hpp"
#include "taxidest/ingest.hpp"
#include "taxidest/tensor.hpp"

namespace taxidest::features {

// ---------------------------------------------------------------------------
// Bag of concepts
// ---------------------------------------------------------------------------

/// Venue counts of one zone, indexed by the fixed macro-category order.
using BocVector = std::array<double, ingest::kPoiCategoryCount>;

/// Raw POI counts per cluster (zone). Rows follow centroid order.
std::vector<BocVector> build_boc(std::span<const ingest::Poi> pois,
                                 const clustering::ClusterModel& clusters);

/// All-zero table for models that ignore venue context.
std::vector<BocVector> zero_boc(int n_zones);

void write_boc_csv(const std::string& path, std::span<const BocVector> boc);
std::vector<BocVector> read_boc_csv(const std::string& path);

// ---------------------------------------------------------------------------
// Zone co-occurrence embeddings (CBOW with negative sampling)
// ---------------------------------------------------------------------------

struct CbowOptions {
  int dim = 20;
  int window = 5;     // half-width drawn uniformly from [1, window] per center
  int negatives = 5;  // negative samples per positive
  int epochs = 5;
  double lr = 0.025;  // linearly decayed, floored at lr * 1e-4
};

struct CbowResult {
  /// Input-side vectors, vocab_size x dim; rows of tokens never seen in
  /// the corpus stay zero.
  std::vector<std::vector<double>> embeddings;
  /// Mean negative-sampling loss per epoch (training diagnostics).
  std::vector<double> epoch_loss;
};

/// Trains CBOW over token sentences (tokens are ints in [0, vocab_size)).
/// Negative sampling draws from the unigram distribution raised to 0.75.
/// Throws std::invalid_argument when the corpus holds fewer than two
/// distinct tokens; co-occurrence is meaningless there and silent zero
/// vectors would poison downstream cosine comparisons.
CbowResult train_cbow(std::span<const std::vector<int>> sentences, int vocab_size,
                      const CbowOptions& options, std::uint64_t seed);

/// Zone-id trace of one sample in ride order: history points, current
/// pick-up, and the true drop-off when known. These traces are the CBOW
/// sentences.
std::vector<int> zone_sentence(const ingest::DriverSequence& sample,
                               const clustering::ClusterModel& clusters);

double cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Text round-trip for an n_zones x dim embedding matrix.
void write_embeddings(const std::string& path,
                      std::span<const std::vector<double>> embeddings);
std::vector<std::vector<double>> read_embeddings(const std::string& path);

// ---------------------------------------------------------------------------
// Categorical vocabularies and embedding tables
// ---------------------------------------------------------------------------

/// Driver-id vocabulary frozen from the training split. Index 0 is the
/// unknown driver, so unseen ids at evaluation time share one row instead
/// of crashing or aliasing a real driver.
class DriverVocab {
 public:
  DriverVocab() = default;

  static DriverVocab build(std::span<const ingest::DriverSequence> train_samples);

  /// 0 for unknown ids.
  int index_of(const std::string& driver_id) const;
  /// Table height: 1 + number of known drivers.
  int size() const { return static_cast<int>(ids_.size()) + 1; }
  /// Known ids, sorted; index_of(ids()[i]) == i + 1.
  const std::vector<std::string>& ids() const { return ids_; }

  static DriverVocab from_ids(std::vector<std::string> sorted_ids);

 private:
  std::vector<std::string> ids_;
};

struct EmbeddingTable {
  nn::Tensor weights;  // vocab x dim leaf

  int vocab() const { return weights.shape()[0]; }
  int dim() const { return weights.shape()[1]; }
  /// Row as a graph node; gradients reach the table iff it is trainable.
  nn::Tensor lookup(int id) const { return nn::row(weights, id); }
};

EmbeddingTable make_embedding(int vocab, int dim, Rng& rng, bool trainable = true);
EmbeddingTable embedding_from_values(int vocab, int dim, std::vector<double> values,
                                     bool trainable);

// ---------------------------------------------------------------------------
// Step-feature assembly
// ---------------------------------------------------------------------------

struct FeatureConfig {
  int max_steps = 9;   // history points (k = 8) plus the current pick-up
  int zone_dim = 20;
  int boc_dim = ingest::kPoiCategoryCount;
  int time_dim = 10;   // hour, weekday, and day-type tables all use this
  int driver_dim = 10;

  int step_width() const { return zone_dim + boc_dim + 3 * time_dim + driver_dim; }
};

/// The five lookup tables behind step features. The zone table is either
/// random-initialized and trainable or frozen to CBOW vectors; the
/// categorical tables are always trainable.
struct FeatureTables {
  EmbeddingTable zone, hour, weekday, day_type, driver;

  /// Trainable tensors only, in fixed order.
  std::vector<nn::Tensor> parameters() const;
};

FeatureTables make_feature_tables(int n_zones, int n_driver_rows, const FeatureConfig& config,
                                  Rng& rng, bool zone_trainable);

/// One assembled sample: a left-padded (max_steps x step_width) value
/// snapshot plus the index structure needed to rebuild each row in-graph.
/// Row layout: zone embedding, log1p venue counts, hour, weekday,
/// day type, driver. Temporal and driver blocks repeat on every valid row.
struct FeatureTensor {
  int n_steps = 0;      // max_steps
  int width = 0;        // step_width
  int valid_begin = 0;  // first real row; rows before it are padding
  std::vector<double> values;       // n_steps * width, padding rows all zero
  std::vector<bool> mask;           // true on real rows
  std::vector<int> step_cluster;    // zone id per row, -1 on padding
  int hour = 0, weekday = 0, day_type = 0, driver_index = 0;

  int valid_steps() const { return n_steps - valid_begin; }
};

/// Builds the snapshot and indices for one sample. Throws when the
/// history is malformed (odd length, too long) or an index is out of its
/// table's range.
FeatureTensor assemble(const ingest::DriverSequence& sample,
                       const clustering::ClusterModel& clusters,
                       std::span<const BocVector> boc, const FeatureTables& tables,
                       const DriverVocab& drivers, const FeatureConfig& config = {});

}  // namespace taxidest::features
