#include "taxidest/model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include "taxidest/util.hpp"

namespace taxidest::model {

namespace {

// ---------------------------------------------------------------------------
// Checkpoint container: a magic line followed by named sections, each
// "section <name> <byte_count>\n" plus that many raw bytes and a newline.
// Doubles are stored as raw little-endian words, which is what makes
// save/load round trips bit-exact.
// ---------------------------------------------------------------------------

constexpr const char* kCkptMagic = "taxidest-ckpt v1";

void append_section(std::string& out, const std::string& name, const std::string& payload) {
  out += "section " + name + ' ' + std::to_string(payload.size()) + '\n';
  out += payload;
  out += '\n';
}

class SectionReader {
 public:
  explicit SectionReader(std::string content) : content_(std::move(content)) {
    if (content_.compare(0, std::strlen(kCkptMagic), kCkptMagic) != 0) {
      throw std::runtime_error("not a checkpoint (bad magic)");
    }
    pos_ = content_.find('\n');
    if (pos_ == std::string::npos) throw std::runtime_error("truncated checkpoint");
    ++pos_;
  }

  bool next(std::string& name, std::string& payload) {
    if (pos_ >= content_.size()) return false;
    const std::size_t eol = content_.find('\n', pos_);
    if (eol == std::string::npos) throw std::runtime_error("truncated section header");
    const std::vector<std::string> head = split(content_.substr(pos_, eol - pos_), ' ');
    if (head.size() != 3 || head[0] != "section") {
      throw std::runtime_error("bad section header");
    }
    const std::size_t len = static_cast<std::size_t>(parse_i64(head[2]));
    if (eol + 1 + len + 1 > content_.size() + 1) {
      throw std::runtime_error("section '" + head[1] + "' exceeds file size");
    }
    name = head[1];
    payload = content_.substr(eol + 1, len);
    pos_ = eol + 1 + len + 1;  // skip payload and trailing newline
    return true;
  }

 private:
  std::string content_;
  std::size_t pos_ = 0;
};

std::string doubles_to_bytes(std::span<const double> values) {
  std::string out(values.size() * sizeof(double), '\0');
  std::memcpy(out.data(), values.data(), out.size());
  return out;
}

std::vector<double> bytes_to_doubles(const std::string& payload) {
  if (payload.size() % sizeof(double) != 0) {
    throw std::runtime_error("binary payload is not a whole number of doubles");
  }
  std::vector<double> out(payload.size() / sizeof(double));
  std::memcpy(out.data(), payload.data(), payload.size());
  return out;
}

std::string tensor_payload(const nn::Tensor& t) {
  std::string payload = "shape";
  for (const int d : t.shape()) payload += ' ' + std::to_string(d);
  payload += '\n';
  payload += doubles_to_bytes(t.values());
  return payload;
}

std::pair<std::vector<int>, std::vector<double>> parse_tensor_payload(
    const std::string& payload) {
  const std::size_t eol = payload.find('\n');
  if (eol == std::string::npos) throw std::runtime_error("tensor payload missing shape line");
  const std::vector<std::string> head = split(payload.substr(0, eol), ' ');
  if (head.empty() || head[0] != "shape") throw std::runtime_error("bad tensor shape line");
  std::vector<int> shape;
  for (std::size_t i = 1; i < head.size(); ++i) {
    shape.push_back(static_cast<int>(parse_i64(head[i])));
  }
  return {shape, bytes_to_doubles(payload.substr(eol + 1))};
}

std::string log_payload(const TrainLog& log) {
  std::string out;
  out += "best " + std::to_string(log.best_epoch) + '\n';
  out += "best_val " + format_double(log.best_val) + '\n';
  out += "diverged " + std::string(log.diverged ? "1" : "0") + '\n';
  if (log.diverged) out += "reason " + log.divergence_reason + '\n';
  for (const EpochStats& e : log.epochs) {
    out += "epoch " + format_double(e.train_loss) + ' ' + format_double(e.val_loss) + '\n';
  }
  return out;
}

TrainLog parse_log_payload(const std::string& payload) {
  TrainLog log;
  std::istringstream in(payload);
  std::string line;
  while (std::getline(in, line)) {
    if (line.starts_with("best_val ")) {
      log.best_val = parse_double(line.substr(9));
    } else if (line.starts_with("best ")) {
      log.best_epoch = static_cast<int>(parse_i64(line.substr(5)));
    } else if (line.starts_with("diverged ")) {
      log.diverged = line.substr(9) == "1";
    } else if (line.starts_with("reason ")) {
      log.divergence_reason = line.substr(7);
    } else if (line.starts_with("epoch ")) {
      const std::vector<std::string> f = split(line.substr(6), ' ');
      if (f.size() != 2) throw std::runtime_error("bad epoch line in training log");
      log.epochs.push_back({parse_double(f[0]), parse_double(f[1])});
    }
  }
  return log;
}

std::string centroids_payload(const clustering::ClusterModel& clusters) {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(clusters.k()) * 2);
  for (const geo::Coordinate& c : clusters.centroids()) {
    flat.push_back(c.lat());
    flat.push_back(c.lon());
  }
  return doubles_to_bytes(flat);
}

clustering::ClusterModel parse_centroids_payload(const std::string& payload,
                                                 std::uint64_t seed) {
  const std::vector<double> flat = bytes_to_doubles(payload);
  if (flat.empty() || flat.size() % 2 != 0) {
    throw std::runtime_error("bad centroid payload");
  }
  std::vector<geo::Coordinate> centroids;
  centroids.reserve(flat.size() / 2);
  for (std::size_t i = 0; i < flat.size(); i += 2) {
    centroids.emplace_back(flat[i], flat[i + 1]);
  }
  return clustering::ClusterModel(std::move(centroids), seed);
}

std::string kv(const std::string& key, const std::string& value) {
  return key + " = " + value + '\n';
}

const std::string& require_key(const std::map<std::string, std::string>& cfg,
                               const std::string& key) {
  const auto it = cfg.find(key);
  if (it == cfg.end()) throw std::runtime_error("checkpoint config missing key '" + key + "'");
  return it->second;
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::uint64_t string_digest(const std::string& s) {
  return fnv1a64(std::as_bytes(std::span<const char>(s.data(), s.size())));
}

// Fisher-Yates with our deterministic generator.
void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = rng.uniform_int(i);
    std::swap(idx[i - 1], idx[j]);
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Enums and small types
// ---------------------------------------------------------------------------

const char* mode_name(Mode mode) {
  return mode == Mode::kRegression ? "regression" : "classification";
}

Mode parse_mode(const std::string& name) {
  if (name == "regression") return Mode::kRegression;
  if (name == "classification") return Mode::kClassification;
  throw std::invalid_argument("unknown mode '" + name + "'");
}

const char* mmlp_variant_name(MmlpVariant v) {
  return v == MmlpVariant::kPolylineWindow ? "mmlp" : "mmlp_seq";
}

void PredictorConfig::validate() const {
  if (lstm_hidden < 1) throw std::invalid_argument("config: lstm_hidden must be >= 1");
  if (learning_rate <= 0.0) throw std::invalid_argument("config: learning_rate must be > 0");
  if (batch_size < 1) throw std::invalid_argument("config: batch_size must be >= 1");
  if (dropout_p < 0.0 || dropout_p >= 1.0) {
    throw std::invalid_argument("config: dropout_p must be in [0, 1)");
  }
  if (max_epochs < 1) throw std::invalid_argument("config: max_epochs must be >= 1");
  if (patience < 1) throw std::invalid_argument("config: patience must be >= 1");
  if (grad_clip_norm <= 0.0) throw std::invalid_argument("config: grad_clip_norm must be > 0");
}

void MmlpConfig::validate() const {
  if (hidden < 1) throw std::invalid_argument("mmlp config: hidden must be >= 1");
  if (learning_rate <= 0.0) throw std::invalid_argument("mmlp config: learning_rate must be > 0");
  if (batch_size < 1) throw std::invalid_argument("mmlp config: batch_size must be >= 1");
  if (momentum < 0.0 || momentum >= 1.0) {
    throw std::invalid_argument("mmlp config: momentum must be in [0, 1)");
  }
  if (max_epochs < 1 || patience < 1) {
    throw std::invalid_argument("mmlp config: max_epochs and patience must be >= 1");
  }
}

Standardization Standardization::fit(std::span<const ingest::DriverSequence> train_samples) {
  double sum_lat = 0.0, sum_lon = 0.0;
  std::size_t n = 0;
  for (const auto& s : train_samples) {
    if (!s.target) continue;
    sum_lat += s.target->lat();
    sum_lon += s.target->lon();
    ++n;
  }
  if (n == 0) throw std::invalid_argument("Standardization: no labeled samples");
  Standardization st;
  st.mean_lat = sum_lat / static_cast<double>(n);
  st.mean_lon = sum_lon / static_cast<double>(n);
  double var_lat = 0.0, var_lon = 0.0;
  for (const auto& s : train_samples) {
    if (!s.target) continue;
    var_lat += (s.target->lat() - st.mean_lat) * (s.target->lat() - st.mean_lat);
    var_lon += (s.target->lon() - st.mean_lon) * (s.target->lon() - st.mean_lon);
  }
  st.std_lat = std::sqrt(var_lat / static_cast<double>(n));
  st.std_lon = std::sqrt(var_lon / static_cast<double>(n));
  if (st.std_lat < 1e-12) st.std_lat = 1.0;
  if (st.std_lon < 1e-12) st.std_lon = 1.0;
  return st;
}

std::pair<double, double> Standardization::apply(double lat, double lon) const {
  return {(lat - mean_lat) / std_lat, (lon - mean_lon) / std_lon};
}

std::pair<double, double> Standardization::invert(double lat, double lon) const {
  return {lat * std_lat + mean_lat, lon * std_lon + mean_lon};
}

// ---------------------------------------------------------------------------
// Predictor
// ---------------------------------------------------------------------------

struct Predictor::Forward {
  nn::Tensor logits;
  nn::Tensor probs;
  nn::Tensor coords;  // standardized, regression mode only
};

Predictor::Predictor(PredictorConfig config, clustering::ClusterModel clusters,
                     features::FeatureTables tables, features::DriverVocab drivers,
                     std::vector<features::BocVector> boc, Standardization standardization)
    : config_(std::move(config)),
      clusters_(std::move(clusters)),
      tables_(std::move(tables)),
      drivers_(std::move(drivers)),
      boc_(std::move(boc)),
      std_(standardization) {
  config_.validate();
  const int m = clusters_.k();
  if (tables_.zone.vocab() != m) {
    throw std::invalid_argument("Predictor: zone table height != cluster count");
  }
  if (static_cast<int>(boc_.size()) != m) {
    throw std::invalid_argument("Predictor: venue table height != cluster count");
  }
  if (drivers_.size() != tables_.driver.vocab()) {
    throw std::invalid_argument("Predictor: driver table height != vocabulary size");
  }

  const int width = config_.features.step_width();
  const int hidden = config_.lstm_hidden;
  Rng rng(sub_seed(config_.seed, 0xA77));
  att_w_ = nn::uniform_init({width}, std::sqrt(6.0 / (width + 1)), rng);
  lstm_ = nn::make_lstm(width, hidden, rng);
  w_softmax_ = nn::glorot_uniform(m, hidden, rng);
  b_softmax_ = nn::Tensor::zeros({m}, true);
  if (config_.mode == Mode::kRegression) {
    // Output layer starts as the standardized centroid matrix, making the
    // initial prediction exactly the probability-weighted centroid mean.
    std::vector<double> w(static_cast<std::size_t>(m) * 2);
    for (int i = 0; i < m; ++i) {
      const geo::Coordinate& c = clusters_.centroids()[static_cast<std::size_t>(i)];
      const auto [slat, slon] = std_.apply(c.lat(), c.lon());
      w[static_cast<std::size_t>(i) * 2] = slat;
      w[static_cast<std::size_t>(i) * 2 + 1] = slon;
    }
    w_out_ = nn::Tensor::from_values({m, 2}, std::move(w), true);
    b_out_ = nn::Tensor::zeros({2}, true);
  }
}

features::FeatureTensor Predictor::assemble(const ingest::DriverSequence& sample) const {
  return features::assemble(sample, clusters_, boc_, tables_, drivers_, config_.features);
}

Predictor::Forward Predictor::forward(const features::FeatureTensor& f, bool training,
                                      Rng* dropout_rng) const {
  const features::FeatureConfig& fc = config_.features;
  std::vector<nn::Tensor> steps;
  steps.reserve(static_cast<std::size_t>(f.valid_steps()));
  for (int r = f.valid_begin; r < f.n_steps; ++r) {
    const int zone = f.step_cluster[static_cast<std::size_t>(r)];
    std::vector<double> boc_logs(static_cast<std::size_t>(fc.boc_dim));
    for (int c = 0; c < fc.boc_dim; ++c) {
      boc_logs[static_cast<std::size_t>(c)] =
          std::log1p(boc_[static_cast<std::size_t>(zone)][static_cast<std::size_t>(c)]);
    }
    const std::array<nn::Tensor, 6> parts = {
        tables_.zone.lookup(zone),
        nn::Tensor::from_values({fc.boc_dim}, std::move(boc_logs)),
        tables_.hour.lookup(f.hour),
        tables_.weekday.lookup(f.weekday),
        tables_.day_type.lookup(f.day_type),
        tables_.driver.lookup(f.driver_index)};
    steps.push_back(nn::concat(parts));
  }

  const std::vector<nn::Tensor> reweighted = nn::attention_reweight(att_w_, steps);
  nn::LstmState state = nn::lstm_initial_state(config_.lstm_hidden);
  for (const nn::Tensor& step : reweighted) {
    state = nn::lstm_step(lstm_, step, state, config_.lstm_activation);
  }

  Rng unused(0);
  nn::Tensor h = nn::dropout(state.h, config_.dropout_p,
                             dropout_rng != nullptr ? *dropout_rng : unused, training);
  Forward out;
  out.logits = nn::add(nn::matvec(w_softmax_, h), b_softmax_);
  out.probs = nn::softmax(out.logits);
  if (config_.mode == Mode::kRegression) {
    out.coords = nn::add(nn::vecmat(out.probs, w_out_), b_out_);
  }
  return out;
}

nn::Tensor Predictor::sample_loss(const features::FeatureTensor& f,
                                  const geo::Coordinate& target, bool training,
                                  Rng* dropout_rng) const {
  const Forward fw = forward(f, training, dropout_rng);
  if (config_.mode == Mode::kRegression) {
    const auto [slat, slon] = std_.apply(target.lat(), target.lon());
    return nn::mse_loss(fw.coords, std::array{slat, slon});
  }
  return nn::cross_entropy_with_logits(fw.logits, clusters_.assign(target));
}

std::vector<nn::Tensor> Predictor::parameters() const {
  std::vector<nn::Tensor> out = tables_.parameters();
  out.push_back(att_w_);
  for (const nn::Tensor& t : lstm_.parameters()) out.push_back(t);
  out.push_back(w_softmax_);
  out.push_back(b_softmax_);
  if (config_.mode == Mode::kRegression) {
    out.push_back(w_out_);
    out.push_back(b_out_);
  }
  return out;
}

namespace {

std::vector<std::vector<double>> snapshot_params(std::span<nn::Tensor> params) {
  std::vector<std::vector<double>> out;
  out.reserve(params.size());
  for (nn::Tensor& p : params) out.push_back(p.leaf_values());
  return out;
}

void restore_params(std::span<nn::Tensor> params,
                    const std::vector<std::vector<double>>& snapshot) {
  for (std::size_t i = 0; i < params.size(); ++i) params[i].leaf_values() = snapshot[i];
}

}  // namespace

const TrainLog& Predictor::train(std::span<const ingest::DriverSequence> train_samples,
                                 std::span<const ingest::DriverSequence> val_samples,
                                 const TrainHooks& hooks) {
  if (train_samples.empty() || val_samples.empty()) {
    throw std::invalid_argument("train: empty split");
  }
  std::vector<features::FeatureTensor> train_feats, val_feats;
  std::vector<geo::Coordinate> train_targets, val_targets;
  for (const auto& s : train_samples) {
    if (!s.target) throw std::invalid_argument("train: unlabeled training sample");
    train_feats.push_back(assemble(s));
    train_targets.push_back(*s.target);
  }
  for (const auto& s : val_samples) {
    if (!s.target) throw std::invalid_argument("train: unlabeled validation sample");
    val_feats.push_back(assemble(s));
    val_targets.push_back(*s.target);
  }

  std::vector<nn::Tensor> params = parameters();
  nn::Adam adam(params, config_.learning_rate);
  Rng dropout_rng(sub_seed(config_.seed, 0xD120));

  log_ = TrainLog{};
  std::vector<std::vector<double>> best_snapshot = snapshot_params(params);
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;

  std::vector<std::size_t> order(train_feats.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < config_.max_epochs; ++epoch) {
    try {
      Rng shuffle_rng(sub_seed(config_.seed, 0x5407 + static_cast<std::uint64_t>(epoch)));
      shuffle_indices(order, shuffle_rng);

      double loss_sum = 0.0;
      int n_batches = 0;
      for (std::size_t start = 0; start < order.size();
           start += static_cast<std::size_t>(config_.batch_size)) {
        const std::size_t end =
            std::min(order.size(), start + static_cast<std::size_t>(config_.batch_size));
        const double inv = 1.0 / static_cast<double>(end - start);
        adam.zero_grad();
        double batch_loss = 0.0;
        for (std::size_t i = start; i < end; ++i) {
          const std::size_t s = order[i];
          nn::Tensor loss = sample_loss(train_feats[s], train_targets[s], true, &dropout_rng);
          batch_loss += loss.item();
          nn::scale(loss, inv).backward();
        }
        nn::clip_global_norm(params, config_.grad_clip_norm);
        adam.step();
        loss_sum += batch_loss * inv;
        ++n_batches;
      }

      double val_loss = 0.0;
      for (std::size_t i = 0; i < val_feats.size(); ++i) {
        val_loss += sample_loss(val_feats[i], val_targets[i], false, nullptr).item();
      }
      val_loss /= static_cast<double>(val_feats.size());
      log_.epochs.push_back({loss_sum / n_batches, val_loss});

      const double metric =
          hooks.val_metric ? hooks.val_metric(epoch, val_loss) : val_loss;
      if (metric < best_val) {
        best_val = metric;
        best_epoch = epoch;
        best_snapshot = snapshot_params(params);
      }
      if (epoch - best_epoch >= config_.patience) break;
    } catch (const std::runtime_error& e) {
      // Numerical blow-up inside an op; keep the last good weights.
      log_.diverged = true;
      log_.divergence_reason = e.what();
      break;
    }
  }

  restore_params(params, best_snapshot);
  log_.best_epoch = best_epoch;
  log_.best_val = best_val;
  return log_;
}

geo::Coordinate Predictor::predict(const ingest::DriverSequence& sample) const {
  const Forward fw = forward(assemble(sample), false, nullptr);
  if (config_.mode == Mode::kRegression) {
    const auto [lat, lon] = std_.invert(fw.coords.values()[0], fw.coords.values()[1]);
    return geo::Coordinate(lat, lon);
  }
  const std::vector<double>& p = fw.probs.values();
  double lat = 0.0, lon = 0.0;
  for (int i = 0; i < clusters_.k(); ++i) {
    const geo::Coordinate& c = clusters_.centroids()[static_cast<std::size_t>(i)];
    lat += p[static_cast<std::size_t>(i)] * c.lat();
    lon += p[static_cast<std::size_t>(i)] * c.lon();
  }
  return geo::Coordinate(lat, lon);
}

std::vector<double> Predictor::class_probs(const ingest::DriverSequence& sample) const {
  return forward(assemble(sample), false, nullptr).probs.values();
}

double Predictor::evaluate_loss(std::span<const ingest::DriverSequence> samples) const {
  if (samples.empty()) throw std::invalid_argument("evaluate_loss: no samples");
  double total = 0.0;
  for (const auto& s : samples) {
    if (!s.target) throw std::invalid_argument("evaluate_loss: unlabeled sample");
    total += sample_loss(assemble(s), *s.target, false, nullptr).item();
  }
  return total / static_cast<double>(samples.size());
}

geo::Coordinate Predictor::coordinates_from_logits(std::span<const double> logits) const {
  if (static_cast<int>(logits.size()) != clusters_.k()) {
    throw std::invalid_argument("coordinates_from_logits: logit width != cluster count");
  }
  const nn::Tensor l = nn::Tensor::from_values({clusters_.k()},
                                               std::vector<double>(logits.begin(), logits.end()));
  const nn::Tensor probs = nn::softmax(l);
  if (config_.mode == Mode::kRegression) {
    const nn::Tensor coords = nn::add(nn::vecmat(probs, w_out_), b_out_);
    const auto [lat, lon] = std_.invert(coords.values()[0], coords.values()[1]);
    return geo::Coordinate(lat, lon);
  }
  const std::vector<double>& p = probs.values();
  double lat = 0.0, lon = 0.0;
  for (int i = 0; i < clusters_.k(); ++i) {
    const geo::Coordinate& c = clusters_.centroids()[static_cast<std::size_t>(i)];
    lat += p[static_cast<std::size_t>(i)] * c.lat();
    lon += p[static_cast<std::size_t>(i)] * c.lon();
  }
  return geo::Coordinate(lat, lon);
}

// --- checkpointing ----------------------------------------------------------

std::string Predictor::serialize() const {
  std::string out = std::string(kCkptMagic) + '\n';

  std::string cfg;
  cfg += kv("model_type", "predictor");
  cfg += kv("mode", mode_name(config_.mode));
  cfg += kv("lstm_hidden", std::to_string(config_.lstm_hidden));
  cfg += kv("learning_rate", format_double(config_.learning_rate));
  cfg += kv("batch_size", std::to_string(config_.batch_size));
  cfg += kv("dropout_p", format_double(config_.dropout_p));
  cfg += kv("max_epochs", std::to_string(config_.max_epochs));
  cfg += kv("patience", std::to_string(config_.patience));
  cfg += kv("seed", std::to_string(config_.seed));
  cfg += kv("lstm_activation",
            config_.lstm_activation == nn::Activation::kRelu ? "relu" : "tanh");
  cfg += kv("grad_clip_norm", format_double(config_.grad_clip_norm));
  cfg += kv("feat_max_steps", std::to_string(config_.features.max_steps));
  cfg += kv("feat_zone_dim", std::to_string(config_.features.zone_dim));
  cfg += kv("feat_boc_dim", std::to_string(config_.features.boc_dim));
  cfg += kv("feat_time_dim", std::to_string(config_.features.time_dim));
  cfg += kv("feat_driver_dim", std::to_string(config_.features.driver_dim));
  cfg += kv("zone_trainable", tables_.zone.weights.requires_grad() ? "1" : "0");
  cfg += kv("cluster_seed", std::to_string(clusters_.seed()));
  cfg += kv("std_mean_lat", format_double(std_.mean_lat));
  cfg += kv("std_mean_lon", format_double(std_.mean_lon));
  cfg += kv("std_std_lat", format_double(std_.std_lat));
  cfg += kv("std_std_lon", format_double(std_.std_lon));
  append_section(out, "config", cfg);

  std::string vocab;
  for (const std::string& id : drivers_.ids()) vocab += id + '\n';
  append_section(out, "vocab", vocab);

  append_section(out, "centroids", centroids_payload(clusters_));

  std::vector<double> boc_flat;
  boc_flat.reserve(boc_.size() * ingest::kPoiCategoryCount);
  for (const auto& row : boc_) {
    for (const double v : row) boc_flat.push_back(v);
  }
  append_section(out, "boc", doubles_to_bytes(boc_flat));

  append_section(out, "log", log_payload(log_));

  const std::vector<std::pair<std::string, const nn::Tensor*>> tensors = {
      {"zone_emb", &tables_.zone.weights},       {"hour_emb", &tables_.hour.weights},
      {"weekday_emb", &tables_.weekday.weights}, {"day_type_emb", &tables_.day_type.weights},
      {"driver_emb", &tables_.driver.weights},   {"att_w", &att_w_},
      {"lstm_w_i", &lstm_.w_i},                  {"lstm_w_f", &lstm_.w_f},
      {"lstm_w_o", &lstm_.w_o},                  {"lstm_w_c", &lstm_.w_c},
      {"lstm_b_i", &lstm_.b_i},                  {"lstm_b_f", &lstm_.b_f},
      {"lstm_b_o", &lstm_.b_o},                  {"lstm_b_c", &lstm_.b_c},
      {"w_softmax", &w_softmax_},                {"b_softmax", &b_softmax_}};
  for (const auto& [name, t] : tensors) append_section(out, "tensor:" + name, tensor_payload(*t));
  if (config_.mode == Mode::kRegression) {
    append_section(out, "tensor:w_out", tensor_payload(w_out_));
    append_section(out, "tensor:b_out", tensor_payload(b_out_));
  }
  return out;
}

void Predictor::save_checkpoint(const std::string& path) const {
  write_file(path, serialize());
}

std::uint64_t Predictor::digest() const { return string_digest(serialize()); }

Predictor Predictor::load_checkpoint(const std::string& path) {
  SectionReader reader(read_file(path));
  std::map<std::string, std::string> cfg_map;
  std::vector<std::string> vocab_ids;
  std::string centroids_raw, boc_raw;
  TrainLog log;
  std::map<std::string, std::pair<std::vector<int>, std::vector<double>>> tensors;

  std::string name, payload;
  while (reader.next(name, payload)) {
    if (name == "config") {
      cfg_map = parse_config_text(payload);
    } else if (name == "vocab") {
      for (const std::string& line : split(payload, '\n')) {
        if (!line.empty()) vocab_ids.push_back(line);
      }
    } else if (name == "centroids") {
      centroids_raw = payload;
    } else if (name == "boc") {
      boc_raw = payload;
    } else if (name == "log") {
      log = parse_log_payload(payload);
    } else if (name.starts_with("tensor:")) {
      tensors[name.substr(7)] = parse_tensor_payload(payload);
    }
  }

  if (require_key(cfg_map, "model_type") != "predictor") {
    throw std::runtime_error(path + ": checkpoint is not a predictor model");
  }
  PredictorConfig config;
  config.mode = parse_mode(require_key(cfg_map, "mode"));
  config.lstm_hidden = static_cast<int>(parse_i64(require_key(cfg_map, "lstm_hidden")));
  config.learning_rate = parse_double(require_key(cfg_map, "learning_rate"));
  config.batch_size = static_cast<int>(parse_i64(require_key(cfg_map, "batch_size")));
  config.dropout_p = parse_double(require_key(cfg_map, "dropout_p"));
  config.max_epochs = static_cast<int>(parse_i64(require_key(cfg_map, "max_epochs")));
  config.patience = static_cast<int>(parse_i64(require_key(cfg_map, "patience")));
  config.seed = parse_u64(require_key(cfg_map, "seed"));
  config.lstm_activation = require_key(cfg_map, "lstm_activation") == "relu"
                               ? nn::Activation::kRelu
                               : nn::Activation::kTanh;
  config.grad_clip_norm = parse_double(require_key(cfg_map, "grad_clip_norm"));
  config.features.max_steps = static_cast<int>(parse_i64(require_key(cfg_map, "feat_max_steps")));
  config.features.zone_dim = static_cast<int>(parse_i64(require_key(cfg_map, "feat_zone_dim")));
  config.features.boc_dim = static_cast<int>(parse_i64(require_key(cfg_map, "feat_boc_dim")));
  config.features.time_dim = static_cast<int>(parse_i64(require_key(cfg_map, "feat_time_dim")));
  config.features.driver_dim =
      static_cast<int>(parse_i64(require_key(cfg_map, "feat_driver_dim")));
  const bool zone_trainable = require_key(cfg_map, "zone_trainable") == "1";

  Standardization st;
  st.mean_lat = parse_double(require_key(cfg_map, "std_mean_lat"));
  st.mean_lon = parse_double(require_key(cfg_map, "std_mean_lon"));
  st.std_lat = parse_double(require_key(cfg_map, "std_std_lat"));
  st.std_lon = parse_double(require_key(cfg_map, "std_std_lon"));

  clustering::ClusterModel clusters =
      parse_centroids_payload(centroids_raw, parse_u64(require_key(cfg_map, "cluster_seed")));

  const std::vector<double> boc_flat = bytes_to_doubles(boc_raw);
  if (boc_flat.size() !=
      static_cast<std::size_t>(clusters.k()) * ingest::kPoiCategoryCount) {
    throw std::runtime_error(path + ": venue table size mismatch");
  }
  std::vector<features::BocVector> boc(static_cast<std::size_t>(clusters.k()));
  for (std::size_t z = 0; z < boc.size(); ++z) {
    for (int c = 0; c < ingest::kPoiCategoryCount; ++c) {
      boc[z][static_cast<std::size_t>(c)] =
          boc_flat[z * ingest::kPoiCategoryCount + static_cast<std::size_t>(c)];
    }
  }

  const auto take = [&](const std::string& tname) {
    const auto it = tensors.find(tname);
    if (it == tensors.end()) {
      throw std::runtime_error(path + ": checkpoint missing tensor '" + tname + "'");
    }
    return it->second;
  };
  const auto make_table = [&](const std::string& tname, bool trainable) {
    auto [shape, values] = take(tname);
    if (shape.size() != 2) throw std::runtime_error(path + ": table '" + tname + "' not 2-D");
    return features::embedding_from_values(shape[0], shape[1], std::move(values), trainable);
  };

  features::FeatureTables tables;
  tables.zone = make_table("zone_emb", zone_trainable);
  tables.hour = make_table("hour_emb", true);
  tables.weekday = make_table("weekday_emb", true);
  tables.day_type = make_table("day_type_emb", true);
  tables.driver = make_table("driver_emb", true);

  Predictor model(config, std::move(clusters), std::move(tables),
                  features::DriverVocab::from_ids(std::move(vocab_ids)), std::move(boc), st);

  const auto load_into = [&](nn::Tensor& dst, const std::string& tname) {
    auto [shape, values] = take(tname);
    if (shape != dst.shape()) {
      throw std::runtime_error(path + ": tensor '" + tname + "' has unexpected shape");
    }
    dst.leaf_values() = std::move(values);
  };
  load_into(model.att_w_, "att_w");
  load_into(model.lstm_.w_i, "lstm_w_i");
  load_into(model.lstm_.w_f, "lstm_w_f");
  load_into(model.lstm_.w_o, "lstm_w_o");
  load_into(model.lstm_.w_c, "lstm_w_c");
  load_into(model.lstm_.b_i, "lstm_b_i");
  load_into(model.lstm_.b_f, "lstm_b_f");
  load_into(model.lstm_.b_o, "lstm_b_o");
  load_into(model.lstm_.b_c, "lstm_b_c");
  load_into(model.w_softmax_, "w_softmax");
  load_into(model.b_softmax_, "b_softmax");
  if (config.mode == Mode::kRegression) {
    load_into(model.w_out_, "w_out");
    load_into(model.b_out_, "b_out");
  }
  model.log_ = std::move(log);
  return model;
}

// ---------------------------------------------------------------------------
// NN baseline
// ---------------------------------------------------------------------------

geo::Coordinate predict_nn_baseline(const clustering::ClusterModel& clusters,
                                    const geo::Coordinate& pickup) {
  return clusters.centroids()[static_cast<std::size_t>(clusters.assign(pickup))];
}

// ---------------------------------------------------------------------------
// MMLP baselines
// ---------------------------------------------------------------------------

MmlpModel::MmlpModel(MmlpConfig config, MmlpVariant variant, clustering::ClusterModel clusters,
                     features::DriverVocab drivers, Standardization standardization)
    : config_(std::move(config)),
      variant_(variant),
      clusters_(std::move(clusters)),
      drivers_(std::move(drivers)),
      std_(standardization) {
  config_.validate();
  const features::FeatureConfig& fc = config_.features;
  const int n_points = variant_ == MmlpVariant::kPolylineWindow ? 10 : fc.max_steps;
  const int input = n_points * 2 + 3 * fc.time_dim + fc.driver_dim;
  const int m = clusters_.k();

  Rng rng(sub_seed(config_.seed, 0xB17));
  hour_ = features::make_embedding(24, fc.time_dim, rng);
  weekday_ = features::make_embedding(7, fc.time_dim, rng);
  day_type_ = features::make_embedding(3, fc.time_dim, rng);
  driver_ = features::make_embedding(drivers_.size(), fc.driver_dim, rng);
  w1_ = nn::glorot_uniform(config_.hidden, input, rng);
  b1_ = nn::Tensor::zeros({config_.hidden}, true);
  w2_ = nn::glorot_uniform(m, config_.hidden, rng);
  b2_ = nn::Tensor::zeros({m}, true);
}

std::vector<double> MmlpModel::input_coords(const ingest::DriverSequence& sample) const {
  std::vector<double> coords;
  if (variant_ == MmlpVariant::kPolylineWindow) {
    if (sample.trip_point_count < 2 || sample.trip_head_tail.empty()) {
      throw std::invalid_argument(
          "mmlp needs GPS traces on every sample; this data has endpoints only, use the "
          "sequence-points variant (mmlp_seq)");
    }
    const std::vector<geo::Coordinate>& ht = sample.trip_head_tail;
    const int n = sample.trip_point_count;
    coords.reserve(20);
    // First-5 and last-5 window; short traces repeat edge points to fill.
    for (int i = 0; i < 5; ++i) {
      const geo::Coordinate& p =
          n >= 10 ? ht[static_cast<std::size_t>(i)]
                  : ht[static_cast<std::size_t>(std::min(i, n - 1))];
      const auto [lat, lon] = std_.apply(p.lat(), p.lon());
      coords.push_back(lat);
      coords.push_back(lon);
    }
    for (int i = 0; i < 5; ++i) {
      const geo::Coordinate& p =
          n >= 10 ? ht[static_cast<std::size_t>(5 + i)]
                  : ht[static_cast<std::size_t>(std::max(0, n - 5 + i))];
      const auto [lat, lon] = std_.apply(p.lat(), p.lon());
      coords.push_back(lat);
      coords.push_back(lon);
    }
  } else {
    const int max_pts = config_.features.max_steps;
    const int n_valid = static_cast<int>(sample.history.size()) + 1;
    if (n_valid > max_pts) throw std::invalid_argument("mmlp_seq: history too long");
    coords.assign(static_cast<std::size_t>(max_pts) * 2, 0.0);  // left zero-padding
    std::size_t o = static_cast<std::size_t>(max_pts - n_valid) * 2;
    for (const auto& p : sample.history) {
      const auto [lat, lon] = std_.apply(p.loc.lat(), p.loc.lon());
      coords[o++] = lat;
      coords[o++] = lon;
    }
    const auto [lat, lon] =
        std_.apply(sample.current_pickup.loc.lat(), sample.current_pickup.loc.lon());
    coords[o++] = lat;
    coords[o++] = lon;
  }
  return coords;
}

nn::Tensor MmlpModel::forward_logits(const ingest::DriverSequence& sample) const {
  const ingest::TemporalMeta& meta = sample.temporal_meta;
  if (meta.hour < 0 || meta.hour > 23 || meta.weekday < 0 || meta.weekday > 6 ||
      meta.day_type < 0 || meta.day_type > 2) {
    throw std::invalid_argument("mmlp: temporal metadata out of range");
  }
  std::vector<double> coords = input_coords(sample);
  const int n_coords = static_cast<int>(coords.size());
  const std::array<nn::Tensor, 5> parts = {
      nn::Tensor::from_values({n_coords}, std::move(coords)),
      hour_.lookup(meta.hour), weekday_.lookup(meta.weekday), day_type_.lookup(meta.day_type),
      driver_.lookup(drivers_.index_of(sample.driver_id))};
  const nn::Tensor x = nn::concat(parts);
  const nn::Tensor h = nn::relu(nn::add(nn::matvec(w1_, x), b1_));
  return nn::add(nn::matvec(w2_, h), b2_);
}

std::vector<nn::Tensor> MmlpModel::parameters() const {
  return {hour_.weights, weekday_.weights, day_type_.weights, driver_.weights,
          w1_,           b1_,              w2_,               b2_};
}

const TrainLog& MmlpModel::train(std::span<const ingest::DriverSequence> train_samples,
                                 std::span<const ingest::DriverSequence> val_samples,
                                 const TrainHooks& hooks) {
  if (train_samples.empty() || val_samples.empty()) {
    throw std::invalid_argument("mmlp train: empty split");
  }
  std::vector<int> train_classes, val_classes;
  for (const auto& s : train_samples) {
    if (!s.target) throw std::invalid_argument("mmlp train: unlabeled training sample");
    train_classes.push_back(clusters_.assign(*s.target));
  }
  for (const auto& s : val_samples) {
    if (!s.target) throw std::invalid_argument("mmlp train: unlabeled validation sample");
    val_classes.push_back(clusters_.assign(*s.target));
  }
  // Fail fast on a trace-less corpus before any epoch runs.
  for (const auto& s : train_samples) input_coords(s);

  std::vector<nn::Tensor> params = parameters();
  nn::SgdMomentum sgd(params, config_.learning_rate, config_.momentum);

  log_ = TrainLog{};
  std::vector<std::vector<double>> best_snapshot = snapshot_params(params);
  double best_val = std::numeric_limits<double>::infinity();
  int best_epoch = -1;

  std::vector<std::size_t> order(train_samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < config_.max_epochs; ++epoch) {
    try {
      Rng shuffle_rng(sub_seed(config_.seed, 0x6a11 + static_cast<std::uint64_t>(epoch)));
      shuffle_indices(order, shuffle_rng);

      double loss_sum = 0.0;
      int n_batches = 0;
      for (std::size_t start = 0; start < order.size();
           start += static_cast<std::size_t>(config_.batch_size)) {
        const std::size_t end =
            std::min(order.size(), start + static_cast<std::size_t>(config_.batch_size));
        const double inv = 1.0 / static_cast<double>(end - start);
        sgd.zero_grad();
        double batch_loss = 0.0;
        for (std::size_t i = start; i < end; ++i) {
          const std::size_t s = order[i];
          nn::Tensor loss = nn::cross_entropy_with_logits(forward_logits(train_samples[s]),
                                                          train_classes[s]);
          batch_loss += loss.item();
          nn::scale(loss, inv).backward();
        }
        sgd.step();
        loss_sum += batch_loss * inv;
        ++n_batches;
      }

      double val_loss = 0.0;
      for (std::size_t i = 0; i < val_samples.size(); ++i) {
        val_loss +=
            nn::cross_entropy_with_logits(forward_logits(val_samples[i]), val_classes[i])
                .item();
      }
      val_loss /= static_cast<double>(val_samples.size());
      log_.epochs.push_back({loss_sum / n_batches, val_loss});

      const double metric =
          hooks.val_metric ? hooks.val_metric(epoch, val_loss) : val_loss;
      if (metric < best_val) {
        best_val = metric;
        best_epoch = epoch;
        best_snapshot = snapshot_params(params);
      }
      if (epoch - best_epoch >= config_.patience) break;
    } catch (const std::runtime_error& e) {
      log_.diverged = true;
      log_.divergence_reason = e.what();
      break;
    }
  }

  restore_params(params, best_snapshot);
  log_.best_epoch = best_epoch;
  log_.best_val = best_val;
  return log_;
}

geo::Coordinate MmlpModel::predict(const ingest::DriverSequence& sample) const {
  const std::vector<double> p = nn::softmax(forward_logits(sample)).values();
  double lat = 0.0, lon = 0.0;
  for (int i = 0; i < clusters_.k(); ++i) {
    const geo::Coordinate& c = clusters_.centroids()[static_cast<std::size_t>(i)];
    lat += p[static_cast<std::size_t>(i)] * c.lat();
    lon += p[static_cast<std::size_t>(i)] * c.lon();
  }
  return geo::Coordinate(lat, lon);
}

double MmlpModel::evaluate_loss(std::span<const ingest::DriverSequence> samples) const {
  if (samples.empty()) throw std::invalid_argument("evaluate_loss: no samples");
  double total = 0.0;
  for (const auto& s : samples) {
    if (!s.target) throw std::invalid_argument("evaluate_loss: unlabeled sample");
    total +=
        nn::cross_entropy_with_logits(forward_logits(s), clusters_.assign(*s.target)).item();
  }
  return total / static_cast<double>(samples.size());
}

std::string MmlpModel::serialize() const {
  std::string out = std::string(kCkptMagic) + '\n';

  std::string cfg;
  cfg += kv("model_type", "mmlp");
  cfg += kv("variant", mmlp_variant_name(variant_));
  cfg += kv("hidden", std::to_string(config_.hidden));
  cfg += kv("learning_rate", format_double(config_.learning_rate));
  cfg += kv("batch_size", std::to_string(config_.batch_size));
  cfg += kv("momentum", format_double(config_.momentum));
  cfg += kv("max_epochs", std::to_string(config_.max_epochs));
  cfg += kv("patience", std::to_string(config_.patience));
  cfg += kv("seed", std::to_string(config_.seed));
  cfg += kv("feat_max_steps", std::to_string(config_.features.max_steps));
  cfg += kv("feat_time_dim", std::to_string(config_.features.time_dim));
  cfg += kv("feat_driver_dim", std::to_string(config_.features.driver_dim));
  cfg += kv("cluster_seed", std::to_string(clusters_.seed()));
  cfg += kv("std_mean_lat", format_double(std_.mean_lat));
  cfg += kv("std_mean_lon", format_double(std_.mean_lon));
  cfg += kv("std_std_lat", format_double(std_.std_lat));
  cfg += kv("std_std_lon", format_double(std_.std_lon));
  append_section(out, "config", cfg);

  std::string vocab;
  for (const std::string& id : drivers_.ids()) vocab += id + '\n';
  append_section(out, "vocab", vocab);
  append_section(out, "centroids", centroids_payload(clusters_));
  append_section(out, "log", log_payload(log_));

  const std::vector<std::pair<std::string, const nn::Tensor*>> tensors = {
      {"hour_emb", &hour_.weights}, {"weekday_emb", &weekday_.weights},
      {"day_type_emb", &day_type_.weights}, {"driver_emb", &driver_.weights},
      {"w1", &w1_}, {"b1", &b1_}, {"w2", &w2_}, {"b2", &b2_}};
  for (const auto& [name, t] : tensors) append_section(out, "tensor:" + name, tensor_payload(*t));
  return out;
}

void MmlpModel::save_checkpoint(const std::string& path) const {
  write_file(path, serialize());
}

std::uint64_t MmlpModel::digest() const { return string_digest(serialize()); }

MmlpModel MmlpModel::load_checkpoint(const std::string& path) {
  SectionReader reader(read_file(path));
  std::map<std::string, std::string> cfg_map;
  std::vector<std::string> vocab_ids;
  std::string centroids_raw;
  TrainLog log;
  std::map<std::string, std::pair<std::vector<int>, std::vector<double>>> tensors;

  std::string name, payload;
  while (reader.next(name, payload)) {
    if (name == "config") {
      cfg_map = parse_config_text(payload);
    } else if (name == "vocab") {
      for (const std::string& line : split(payload, '\n')) {
        if (!line.empty()) vocab_ids.push_back(line);
      }
    } else if (name == "centroids") {
      centroids_raw = payload;
    } else if (name == "log") {
      log = parse_log_payload(payload);
    } else if (name.starts_with("tensor:")) {
      tensors[name.substr(7)] = parse_tensor_payload(payload);
    }
  }

  if (require_key(cfg_map, "model_type") != "mmlp") {
    throw std::runtime_error(path + ": checkpoint is not an mmlp model");
  }
  MmlpConfig config;
  config.hidden = static_cast<int>(parse_i64(require_key(cfg_map, "hidden")));
  config.learning_rate = parse_double(require_key(cfg_map, "learning_rate"));
  config.batch_size = static_cast<int>(parse_i64(require_key(cfg_map, "batch_size")));
  config.momentum = parse_double(require_key(cfg_map, "momentum"));
  config.max_epochs = static_cast<int>(parse_i64(require_key(cfg_map, "max_epochs")));
  config.patience = static_cast<int>(parse_i64(require_key(cfg_map, "patience")));
  config.seed = parse_u64(require_key(cfg_map, "seed"));
  config.features.max_steps = static_cast<int>(parse_i64(require_key(cfg_map, "feat_max_steps")));
  config.features.time_dim = static_cast<int>(parse_i64(require_key(cfg_map, "feat_time_dim")));
  config.features.driver_dim =
      static_cast<int>(parse_i64(require_key(cfg_map, "feat_driver_dim")));
  const MmlpVariant variant = require_key(cfg_map, "variant") == std::string("mmlp")
                                  ? MmlpVariant::kPolylineWindow
                                  : MmlpVariant::kSequencePoints;

  Standardization st;
  st.mean_lat = parse_double(require_key(cfg_map, "std_mean_lat"));
  st.mean_lon = parse_double(require_key(cfg_map, "std_mean_lon"));
  st.std_lat = parse_double(require_key(cfg_map, "std_std_lat"));
  st.std_lon = parse_double(require_key(cfg_map, "std_std_lon"));

  MmlpModel model(config, variant,
                  parse_centroids_payload(centroids_raw,
                                          parse_u64(require_key(cfg_map, "cluster_seed"))),
                  features::DriverVocab::from_ids(std::move(vocab_ids)), st);

  const auto load_into = [&](nn::Tensor& dst, const std::string& tname) {
    const auto it = tensors.find(tname);
    if (it == tensors.end()) {
      throw std::runtime_error(path + ": checkpoint missing tensor '" + tname + "'");
    }
    if (it->second.first != dst.shape()) {
      throw std::runtime_error(path + ": tensor '" + tname + "' has unexpected shape");
    }
    dst.leaf_values() = it->second.second;
  };
  load_into(model.hour_.weights, "hour_emb");
  load_into(model.weekday_.weights, "weekday_emb");
  load_into(model.day_type_.weights, "day_type_emb");
  load_into(model.driver_.weights, "driver_emb");
  load_into(model.w1_, "w1");
  load_into(model.b1_, "b1");
  load_into(model.w2_, "w2");
  load_into(model.b2_, "b2");
  model.log_ = std::move(log);
  return model;
}

std::string checkpoint_model_type(const std::string& path) {
  SectionReader reader(read_file(path));
  std::string name, payload;
  while (reader.next(name, payload)) {
    if (name == "config") {
      return require_key(parse_config_text(payload), "model_type");
    }
  }
  throw std::runtime_error(path + ": checkpoint has no config section");
}

}  // namespace taxidest::model
