#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "taxidest/clustering.hpp"
#include "taxidest/features.hpp"
#include "taxidest/geo.hpp"
#include "taxidest/ingest.hpp"
#include "taxidest/nn.hpp"

namespace taxidest::model {

enum class Mode { kRegression, kClassification };

const char* mode_name(Mode mode);
Mode parse_mode(const std::string& name);

struct PredictorConfig {
  int lstm_hidden = 128;
  double learning_rate = 1e-3;
  int batch_size = 64;
  double dropout_p = 0.5;
  int max_epochs = 100;
  int patience = 10;
  std::uint64_t seed = 0;
  Mode mode = Mode::kRegression;
  nn::Activation lstm_activation = nn::Activation::kRelu;
  /// Gradients are rescaled when their global norm exceeds this; guards
  /// the relu cell against blow-ups.
  double grad_clip_norm = 5.0;
  features::FeatureConfig features;

  void validate() const;
};

/// Per-city coordinate scaling fitted on training targets. Keeps the MSE
/// scale (and with it the learning rate) city-independent; the constants
/// travel with the checkpoint so inference inverts them exactly.
struct Standardization {
  double mean_lat = 0.0, mean_lon = 0.0;
  double std_lat = 1.0, std_lon = 1.0;

  /// Degenerate spreads (all targets identical) fall back to scale 1.
  static Standardization fit(std::span<const ingest::DriverSequence> train_samples);

  std::pair<double, double> apply(double lat, double lon) const;
  std::pair<double, double> invert(double lat, double lon) const;
};

struct EpochStats {
  double train_loss = 0.0;  // mean batch loss (standardized MSE / cross-entropy)
  double val_loss = 0.0;
};

struct TrainLog {
  std::vector<EpochStats> epochs;
  int best_epoch = -1;  // 0-based index into epochs
  double best_val = 0.0;
  bool diverged = false;
  std::string divergence_reason;
};

struct TrainHooks {
  /// Maps (epoch, measured validation loss) to the value early stopping
  /// sees. Tests inject synthetic curves here; snapshotting still stores
  /// the real weights of the chosen epoch. Default: identity.
  std::function<double(int, double)> val_metric;
};

/// The full destination predictor: per-step feature embedding, attention
/// reweighting over the valid steps, an LSTM, dropout, a softmax layer of
/// width m, and in regression mode a 2-unit output layer initialized from
/// the (standardized) cluster centroids. Padding never enters the graph:
/// only valid steps are built, so masked positions cannot receive or emit
/// gradients.
class Predictor {
 public:
  /// Fresh model. The feature tables are adopted as-is (a frozen zone
  /// table realizes the CBOW variant); remaining weights initialize from
  /// config.seed.
  Predictor(PredictorConfig config, clustering::ClusterModel clusters,
            features::FeatureTables tables, features::DriverVocab drivers,
            std::vector<features::BocVector> boc, Standardization standardization);

  const PredictorConfig& config() const { return config_; }
  const clustering::ClusterModel& clusters() const { return clusters_; }
  const TrainLog& log() const { return log_; }

  /// Minibatch training with per-epoch validation, best-epoch snapshots,
  /// and early stopping at best_epoch + patience. On return the model
  /// holds the best-epoch weights. A non-finite loss mid-training stops
  /// the run and restores the last snapshot (log().diverged is set).
  const TrainLog& train(std::span<const ingest::DriverSequence> train_samples,
                        std::span<const ingest::DriverSequence> val_samples,
                        const TrainHooks& hooks = {});

  /// Drop-off estimate for one sample (eval mode, no dropout).
  geo::Coordinate predict(const ingest::DriverSequence& sample) const;

  /// Softmax distribution over clusters for one sample (eval mode).
  std::vector<double> class_probs(const ingest::DriverSequence& sample) const;

  /// Mean loss (standardized MSE or cross-entropy) over labeled samples.
  double evaluate_loss(std::span<const ingest::DriverSequence> samples) const;

  /// Prediction head only: softmax the given logits, then map through the
  /// output layer (regression) or the frozen centroid average
  /// (classification). Exposes the centroid-weighting contract for
  /// direct verification.
  geo::Coordinate coordinates_from_logits(std::span<const double> logits) const;

  /// All trainable tensors in fixed order.
  std::vector<nn::Tensor> parameters() const;

  void save_checkpoint(const std::string& path) const;
  static Predictor load_checkpoint(const std::string& path);
  /// FNV-1a over the serialized checkpoint bytes.
  std::uint64_t digest() const;

 private:
  struct Forward;
  Forward forward(const features::FeatureTensor& f, bool training, Rng* dropout_rng) const;
  features::FeatureTensor assemble(const ingest::DriverSequence& sample) const;
  nn::Tensor sample_loss(const features::FeatureTensor& f, const geo::Coordinate& target,
                         bool training, Rng* dropout_rng) const;
  std::string serialize() const;

  PredictorConfig config_;
  clustering::ClusterModel clusters_;
  features::FeatureTables tables_;
  features::DriverVocab drivers_;
  std::vector<features::BocVector> boc_;
  Standardization std_;

  nn::Tensor att_w_;            // step_width
  nn::LstmParams lstm_;
  nn::Tensor w_softmax_, b_softmax_;  // m x hidden, m
  nn::Tensor w_out_, b_out_;          // m x 2, 2 (regression mode only)
  TrainLog log_;
};

/// Nearest-centroid-to-pickup baseline; no training.
geo::Coordinate predict_nn_baseline(const clustering::ClusterModel& clusters,
                                    const geo::Coordinate& pickup);

// ---------------------------------------------------------------------------
// Perceptron baselines
// ---------------------------------------------------------------------------

enum class MmlpVariant {
  kPolylineWindow,  // first-5 and last-5 trace points of the predicted ride
  kSequencePoints,  // the <= 9 history/pickup points, zero-padded
};

const char* mmlp_variant_name(MmlpVariant v);

struct MmlpConfig {
  int hidden = 500;
  double learning_rate = 1e-3;
  int batch_size = 200;
  double momentum = 0.9;
  int max_epochs = 100;
  int patience = 10;
  std::uint64_t seed = 0;
  features::FeatureConfig features;  // categorical embedding sizes only

  void validate() const;
};

/// Single-hidden-layer perceptron over flattened coordinates plus the
/// same categorical embeddings as the recurrent model. Multi-class
/// cross-entropy against the centroid nearest to the true drop-off;
/// prediction is the probability-weighted centroid average with the
/// centroids held fixed.
class MmlpModel {
 public:
  MmlpModel(MmlpConfig config, MmlpVariant variant, clustering::ClusterModel clusters,
            features::DriverVocab drivers, Standardization standardization);

  const MmlpConfig& config() const { return config_; }
  MmlpVariant variant() const { return variant_; }
  const TrainLog& log() const { return log_; }

  /// Throws std::invalid_argument naming the sequence-points variant when
  /// the polyline-window variant meets a sample with no trace.
  const TrainLog& train(std::span<const ingest::DriverSequence> train_samples,
                        std::span<const ingest::DriverSequence> val_samples,
                        const TrainHooks& hooks = {});

  geo::Coordinate predict(const ingest::DriverSequence& sample) const;
  double evaluate_loss(std::span<const ingest::DriverSequence> samples) const;

  std::vector<nn::Tensor> parameters() const;

  void save_checkpoint(const std::string& path) const;
  static MmlpModel load_checkpoint(const std::string& path);
  std::uint64_t digest() const;

 private:
  std::vector<double> input_coords(const ingest::DriverSequence& sample) const;
  nn::Tensor forward_logits(const ingest::DriverSequence& sample) const;
  std::string serialize() const;

  MmlpConfig config_;
  MmlpVariant variant_;
  clustering::ClusterModel clusters_;
  features::DriverVocab drivers_;
  Standardization std_;

  features::EmbeddingTable hour_, weekday_, day_type_, driver_;
  nn::Tensor w1_, b1_;  // hidden x input, hidden
  nn::Tensor w2_, b2_;  // m x hidden, m
  TrainLog log_;
};

/// Model type stored in a checkpoint file ("predictor" or "mmlp");
/// lets callers dispatch without parsing the whole file.
std::string checkpoint_model_type(const std::string& path);

}  // namespace taxidest::model
