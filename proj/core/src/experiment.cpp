#include "taxidest/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "taxidest/geo.hpp"
#include "taxidest/rng.hpp"
#include "taxidest/util.hpp"

namespace taxidest::experiment {

namespace {

std::uint64_t name_digest(const std::string& s) {
  return fnv1a64(std::as_bytes(std::span<const char>(s.data(), s.size())));
}

double mean_of(std::span<const double> v) {
  double sum = 0.0;
  for (const double x : v) sum += x;
  return sum / static_cast<double>(v.size());
}

double median_of(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

void SplitFractions::validate() const {
  if (train <= 0.0 || val <= 0.0 || test <= 0.0) {
    throw std::invalid_argument("split fractions must be positive");
  }
  if (std::abs(train + val + test - 1.0) > 1e-9) {
    throw std::invalid_argument("split fractions must sum to 1");
  }
}

SplitResult split(std::span<const ingest::DriverSequence> samples,
                  const SplitFractions& fractions, std::uint64_t seed) {
  fractions.validate();
  const std::size_t n = samples.size();

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = rng.uniform_int(i);
    std::swap(order[i - 1], order[j]);
  }

  const double fracs[3] = {fractions.train, fractions.val, fractions.test};
  std::size_t counts[3];
  double remainders[3];
  std::size_t assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double exact = fracs[s] * static_cast<double>(n);
    counts[s] = static_cast<std::size_t>(std::floor(exact));
    remainders[s] = exact - std::floor(exact);
    assigned += counts[s];
  }
  // Flooring leaves at most two samples over; they go to the largest
  // fractional remainders, ties in train, val, test order.
  int by_remainder[3] = {0, 1, 2};
  std::stable_sort(std::begin(by_remainder), std::end(by_remainder),
                   [&](int a, int b) { return remainders[a] > remainders[b]; });
  for (std::size_t extra = 0; extra < n - assigned; ++extra) {
    ++counts[by_remainder[extra % 3]];
  }

  if (counts[0] == 0 || counts[1] == 0 || counts[2] == 0) {
    throw std::invalid_argument("split: a split would be empty (n = " + std::to_string(n) + ")");
  }

  SplitResult result;
  std::size_t pos = 0;
  for (int s = 0; s < 3; ++s) {
    std::vector<ingest::DriverSequence>& dst =
        s == 0 ? result.train : (s == 1 ? result.val : result.test);
    dst.reserve(counts[s]);
    for (std::size_t i = 0; i < counts[s]; ++i) dst.push_back(samples[order[pos++]]);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Train-split artifacts
// ---------------------------------------------------------------------------

PipelineArtifacts fit_pipeline(std::span<const ingest::DriverSequence> train,
                               std::span<const ingest::Poi> pois,
                               const PipelineOptions& options) {
  if (train.empty()) throw std::invalid_argument("fit_pipeline: empty train split");
  std::vector<geo::Coordinate> targets;
  targets.reserve(train.size());
  for (const auto& s : train) {
    if (!s.target) throw std::invalid_argument("fit_pipeline: unlabeled train sample");
    targets.push_back(*s.target);
  }

  clustering::KmeansResult km = clustering::fit_kmeans(
      targets, options.k_clusters, sub_seed(options.seed, 0xC1u), options.kmeans);

  PipelineArtifacts art{std::move(km.model)};
  art.boc = pois.empty() ? features::zero_boc(options.k_clusters)
                         : features::build_boc(pois, art.clusters);
  art.standardization = model::Standardization::fit(train);
  art.drivers = features::DriverVocab::build(train);

  std::vector<std::vector<int>> sentences;
  sentences.reserve(train.size());
  for (const auto& s : train) sentences.push_back(features::zone_sentence(s, art.clusters));
  art.zone_cbow =
      features::train_cbow(sentences, options.k_clusters, options.cbow,
                           sub_seed(options.seed, 0xCB0u));
  return art;
}

std::uint64_t artifacts_digest(const PipelineArtifacts& artifacts) {
  std::string text = "clusters " + std::to_string(artifacts.clusters.k()) + '\n';
  for (const geo::Coordinate& c : artifacts.clusters.centroids()) {
    text += format_double(c.lat()) + ' ' + format_double(c.lon()) + '\n';
  }
  text += "standardization " + format_double(artifacts.standardization.mean_lat) + ' ' +
          format_double(artifacts.standardization.mean_lon) + ' ' +
          format_double(artifacts.standardization.std_lat) + ' ' +
          format_double(artifacts.standardization.std_lon) + '\n';
  text += "drivers\n";
  for (const std::string& id : artifacts.drivers.ids()) text += id + '\n';
  text += "boc\n";
  for (const features::BocVector& row : artifacts.boc) {
    for (const double v : row) text += format_double(v) + ' ';
    text += '\n';
  }
  text += "cbow\n";
  for (const std::vector<double>& row : artifacts.zone_cbow.embeddings) {
    for (const double v : row) text += format_double(v) + ' ';
    text += '\n';
  }
  for (const double l : artifacts.zone_cbow.epoch_loss) text += format_double(l) + '\n';
  return name_digest(text);
}

// ---------------------------------------------------------------------------
// Model menu
// ---------------------------------------------------------------------------

const char* model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::kNn: return "nn";
    case ModelKind::kMmlp: return "mmlp";
    case ModelKind::kMmlpSeq: return "mmlp_seq";
    case ModelKind::kLstm: return "lstm";
    case ModelKind::kLstmBoc: return "lstm_boc";
    case ModelKind::kLstmBocW2v: return "lstm_boc_w2v";
  }
  throw std::logic_error("unreachable model kind");
}

ModelKind parse_model_kind(const std::string& name) {
  if (name == "nn") return ModelKind::kNn;
  if (name == "mmlp") return ModelKind::kMmlp;
  if (name == "mmlp_seq") return ModelKind::kMmlpSeq;
  if (name == "lstm") return ModelKind::kLstm;
  if (name == "lstm_boc") return ModelKind::kLstmBoc;
  if (name == "lstm_boc_w2v") return ModelKind::kLstmBocW2v;
  throw std::invalid_argument("unknown model '" + name +
                              "' (expected nn, mmlp, mmlp_seq, lstm, lstm_boc, lstm_boc_w2v)");
}

std::string model_request_name(const ModelRequest& request) {
  std::string name = model_kind_name(request.kind);
  const bool is_lstm = request.kind == ModelKind::kLstm || request.kind == ModelKind::kLstmBoc ||
                       request.kind == ModelKind::kLstmBocW2v;
  if (is_lstm && request.mode == model::Mode::kClassification) name += "_class";
  return name;
}

std::vector<ModelRequest> parse_model_requests(const std::string& list) {
  std::vector<ModelRequest> out;
  for (const std::string& raw : taxidest::split(list, ',')) {
    const std::string entry = trim(raw);
    if (entry.empty()) continue;
    ModelRequest req;
    const std::size_t colon = entry.find(':');
    if (colon == std::string::npos) {
      req.kind = parse_model_kind(entry);
    } else {
      req.kind = parse_model_kind(entry.substr(0, colon));
      req.mode = model::parse_mode(entry.substr(colon + 1));
    }
    out.push_back(req);
  }
  if (out.empty()) throw std::invalid_argument("empty model list");
  return out;
}

// ---------------------------------------------------------------------------
// Spec parsing
// ---------------------------------------------------------------------------

const char* trip_format_name(ingest::TripFormat format) {
  return format == ingest::TripFormat::kPolylineCsv ? "polyline_csv" : "od_csv";
}

ingest::TripFormat parse_trip_format(const std::string& name) {
  if (name == "polyline_csv") return ingest::TripFormat::kPolylineCsv;
  if (name == "od_csv") return ingest::TripFormat::kOdCsv;
  throw std::invalid_argument("unknown trip format '" + name +
                              "' (expected polyline_csv or od_csv)");
}

void ExperimentSpec::validate() const {
  fractions.validate();
  if (k_clusters < 1) throw std::invalid_argument("spec: clusters must be >= 1");
  predictor.validate();
  mmlp.validate();
}

ExperimentSpec spec_from_config(const std::map<std::string, std::string>& config) {
  ExperimentSpec spec;
  const auto to_int = [](const std::string& v) { return static_cast<int>(parse_i64(v)); };
  for (const auto& [key, value] : config) {
    if (key == "dataset") spec.dataset_path = value;
    else if (key == "format") spec.format = parse_trip_format(value);
    else if (key == "pois") spec.poi_path = value;
    else if (key == "holidays") spec.holiday_path = value;
    else if (key == "city") spec.city = value;
    else if (key == "utc_offset_min") spec.sequence.utc_offset_min = to_int(value);
    else if (key == "history_k") spec.sequence.k = to_int(value);
    else if (key == "max_gap_hours") spec.sequence.max_gap_hours = parse_double(value);
    else if (key == "sample_period_s") spec.sequence.polyline_sample_period_s = to_int(value);
    else if (key == "train_frac") spec.fractions.train = parse_double(value);
    else if (key == "val_frac") spec.fractions.val = parse_double(value);
    else if (key == "test_frac") spec.fractions.test = parse_double(value);
    else if (key == "seed") spec.seed = parse_u64(value);
    else if (key == "clusters") spec.k_clusters = to_int(value);
    else if (key == "top_drivers") spec.top_drivers = static_cast<std::size_t>(parse_i64(value));
    else if (key == "models") spec.models = parse_model_requests(value);
    else if (key == "output_dir") spec.output_dir = value;
    else if (key == "lstm_hidden") spec.predictor.lstm_hidden = to_int(value);
    else if (key == "lstm_lr") spec.predictor.learning_rate = parse_double(value);
    else if (key == "lstm_batch") spec.predictor.batch_size = to_int(value);
    else if (key == "lstm_epochs") spec.predictor.max_epochs = to_int(value);
    else if (key == "lstm_patience") spec.predictor.patience = to_int(value);
    else if (key == "dropout") spec.predictor.dropout_p = parse_double(value);
    else if (key == "grad_clip") spec.predictor.grad_clip_norm = parse_double(value);
    else if (key == "lstm_activation") {
      if (value == "relu") spec.predictor.lstm_activation = nn::Activation::kRelu;
      else if (value == "tanh") spec.predictor.lstm_activation = nn::Activation::kTanh;
      else throw std::invalid_argument("lstm_activation must be relu or tanh");
    }
    else if (key == "mmlp_hidden") spec.mmlp.hidden = to_int(value);
    else if (key == "mmlp_lr") spec.mmlp.learning_rate = parse_double(value);
    else if (key == "mmlp_batch") spec.mmlp.batch_size = to_int(value);
    else if (key == "mmlp_momentum") spec.mmlp.momentum = parse_double(value);
    else if (key == "mmlp_epochs") spec.mmlp.max_epochs = to_int(value);
    else if (key == "mmlp_patience") spec.mmlp.patience = to_int(value);
    else if (key == "embed_dim") {
      spec.cbow.dim = to_int(value);
      spec.predictor.features.zone_dim = to_int(value);
    }
    else if (key == "time_dim") spec.predictor.features.time_dim = to_int(value);
    else if (key == "driver_dim") spec.predictor.features.driver_dim = to_int(value);
    else if (key == "cbow_window") spec.cbow.window = to_int(value);
    else if (key == "cbow_negatives") spec.cbow.negatives = to_int(value);
    else if (key == "cbow_epochs") spec.cbow.epochs = to_int(value);
    else if (key == "cbow_lr") spec.cbow.lr = parse_double(value);
    else if (key == "kmeans_restarts") spec.kmeans.n_init = to_int(value);
    else if (key == "kmeans_iters") spec.kmeans.max_iters = to_int(value);
    else if (key == "kmeans_tol_km") spec.kmeans.tol_km = parse_double(value);
    else throw std::invalid_argument("unknown config key '" + key + "'");
  }
  // One history point per past pick-up/drop-off plus the current pick-up.
  spec.predictor.features.max_steps = spec.sequence.k + 1;
  spec.mmlp.features = spec.predictor.features;
  return spec;
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

namespace {
constexpr const char* kResultsHeader = "model,city,mean_eds_km,median_eds_km,n_test,seed,wall_s";
constexpr const char* kSamplesHeader = "sample_id,pred_lat,pred_lon,true_lat,true_lon,eds_km";
}  // namespace

std::string results_csv(std::span<const ResultRow> rows) {
  std::string out = std::string(kResultsHeader) + '\n';
  for (const ResultRow& r : rows) {
    out += r.model + ',' + r.city + ',' + format_double(r.mean_eds_km) + ',' +
           format_double(r.median_eds_km) + ',' + std::to_string(r.n_test) + ',' +
           std::to_string(r.seed) + ',' + format_double(r.wall_s) + '\n';
  }
  return out;
}

std::vector<ResultRow> parse_results_csv(const std::string& text) {
  const std::vector<std::string> lines = taxidest::split(text, '\n');
  if (lines.empty() || trim(lines[0]) != kResultsHeader) {
    throw std::runtime_error("results CSV: bad or missing header");
  }
  std::vector<ResultRow> rows;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string line = trim(lines[i]);
    if (line.empty()) continue;
    const std::vector<std::string> f = taxidest::split(line, ',');
    if (f.size() != 7) {
      throw std::runtime_error("results CSV: row " + std::to_string(i + 1) +
                               " has " + std::to_string(f.size()) + " fields, expected 7");
    }
    ResultRow r;
    r.model = f[0];
    r.city = f[1];
    r.mean_eds_km = parse_double(f[2]);
    r.median_eds_km = parse_double(f[3]);
    r.n_test = static_cast<int>(parse_i64(f[4]));
    r.seed = parse_u64(f[5]);
    r.wall_s = parse_double(f[6]);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string merge_reports(std::span<const std::string> csv_paths) {
  std::vector<ResultRow> rows;
  for (const std::string& path : csv_paths) {
    for (ResultRow& r : parse_results_csv(read_text_file(path))) rows.push_back(std::move(r));
  }
  std::stable_sort(rows.begin(), rows.end(), [](const ResultRow& a, const ResultRow& b) {
    if (a.city != b.city) return a.city < b.city;
    return a.model < b.model;
  });
  return results_csv(rows);
}

std::string eds_histogram_csv(std::span<const double> eds_km, double bin_km) {
  if (bin_km <= 0.0) throw std::invalid_argument("histogram bin width must be positive");
  if (eds_km.empty()) throw std::invalid_argument("histogram over no samples");
  double max_v = 0.0;
  for (const double v : eds_km) {
    if (v < 0.0) throw std::invalid_argument("negative error distance");
    max_v = std::max(max_v, v);
  }
  const std::size_t n_bins =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(max_v / bin_km)));
  std::vector<std::size_t> counts(n_bins, 0);
  for (const double v : eds_km) {
    std::size_t idx = static_cast<std::size_t>(std::floor(v / bin_km));
    if (idx >= n_bins) idx = n_bins - 1;  // v == upper edge lands in the last bin
    ++counts[idx];
  }
  std::string out = "bin_lo_km,bin_hi_km,count\n";
  for (std::size_t i = 0; i < n_bins; ++i) {
    out += format_double(static_cast<double>(i) * bin_km) + ',' +
           format_double(static_cast<double>(i + 1) * bin_km) + ',' +
           std::to_string(counts[i]) + '\n';
  }
  return out;
}

std::vector<double> read_sample_eds(const std::string& path) {
  const std::vector<std::string> lines = taxidest::split(read_text_file(path), '\n');
  if (lines.empty() || trim(lines[0]) != kSamplesHeader) {
    throw std::runtime_error(path + ": bad or missing per-sample header");
  }
  std::vector<double> eds;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string line = trim(lines[i]);
    if (line.empty()) continue;
    const std::vector<std::string> f = taxidest::split(line, ',');
    if (f.size() != 6) throw std::runtime_error(path + ": malformed per-sample row");
    eds.push_back(parse_double(f[5]));
  }
  return eds;
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

namespace {

std::vector<geo::Coordinate> train_and_predict(const ExperimentSpec& spec,
                                               const ModelRequest& req,
                                               const PipelineArtifacts& art,
                                               const SplitResult& splits,
                                               const std::string& checkpoint_path) {
  const std::string name = model_request_name(req);
  const std::uint64_t model_seed = sub_seed(spec.seed, name_digest(name));
  std::vector<geo::Coordinate> preds;
  preds.reserve(splits.test.size());

  switch (req.kind) {
    case ModelKind::kNn: {
      for (const auto& s : splits.test) {
        preds.push_back(model::predict_nn_baseline(art.clusters, s.current_pickup.loc));
      }
      return preds;
    }
    case ModelKind::kMmlp:
    case ModelKind::kMmlpSeq: {
      model::MmlpConfig cfg = spec.mmlp;
      cfg.seed = model_seed;
      const model::MmlpVariant variant = req.kind == ModelKind::kMmlp
                                             ? model::MmlpVariant::kPolylineWindow
                                             : model::MmlpVariant::kSequencePoints;
      model::MmlpModel m(cfg, variant, art.clusters, art.drivers, art.standardization);
      m.train(splits.train, splits.val);
      m.save_checkpoint(checkpoint_path);
      for (const auto& s : splits.test) preds.push_back(m.predict(s));
      return preds;
    }
    case ModelKind::kLstm:
    case ModelKind::kLstmBoc:
    case ModelKind::kLstmBocW2v: {
      model::PredictorConfig cfg = spec.predictor;
      cfg.seed = model_seed;
      cfg.mode = req.mode;
      const bool use_boc = req.kind != ModelKind::kLstm;
      const bool use_w2v = req.kind == ModelKind::kLstmBocW2v;
      if (use_boc && spec.poi_path.empty()) {
        throw std::invalid_argument("venue counts requested but no POI file configured (pois)");
      }
      std::vector<features::BocVector> boc =
          use_boc ? art.boc : features::zero_boc(art.clusters.k());

      Rng table_rng(sub_seed(model_seed, 0x7AB1u));
      features::FeatureTables tables = features::make_feature_tables(
          art.clusters.k(), art.drivers.size(), cfg.features, table_rng, !use_w2v);
      if (use_w2v) {
        const auto& emb = art.zone_cbow.embeddings;
        if (emb.empty() || static_cast<int>(emb[0].size()) != cfg.features.zone_dim) {
          throw std::invalid_argument(
              "zone embedding width does not match the configured embed_dim");
        }
        std::vector<double> flat;
        flat.reserve(emb.size() * emb[0].size());
        for (const auto& row : emb) flat.insert(flat.end(), row.begin(), row.end());
        tables.zone.weights.leaf_values() = std::move(flat);
      }

      model::Predictor m(cfg, art.clusters, std::move(tables), art.drivers, std::move(boc),
                         art.standardization);
      m.train(splits.train, splits.val);
      m.save_checkpoint(checkpoint_path);
      for (const auto& s : splits.test) preds.push_back(m.predict(s));
      return preds;
    }
  }
  throw std::logic_error("unreachable model kind");
}

}  // namespace

RunOutcome run(const ExperimentSpec& spec, const Clock& clock_in) {
  spec.validate();
  if (spec.dataset_path.empty()) throw std::invalid_argument("run: no dataset configured");
  const Clock clock = clock_in ? clock_in : Clock([] {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
  });

  ingest::TripParseResult parsed = ingest::parse_trips(spec.dataset_path, spec.format);
  std::vector<ingest::TripRecord> trips = std::move(parsed.records);
  if (spec.top_drivers > 0) trips = ingest::filter_top_drivers(std::move(trips), spec.top_drivers);

  ingest::SequenceOptions seq = spec.sequence;
  if (!spec.holiday_path.empty()) {
    seq.holidays = ingest::HolidayCalendar::load(spec.holiday_path);
  }
  const std::vector<ingest::DriverSequence> sequences = ingest::build_sequences(trips, seq);
  const SplitResult splits = split(sequences, spec.fractions, spec.seed);

  std::vector<ingest::Poi> pois;
  if (!spec.poi_path.empty()) pois = ingest::parse_pois(spec.poi_path).pois;

  PipelineOptions popt;
  popt.k_clusters = spec.k_clusters;
  popt.kmeans = spec.kmeans;
  popt.cbow = spec.cbow;
  popt.seed = spec.seed;
  const PipelineArtifacts art = fit_pipeline(splits.train, pois, popt);

  namespace fs = std::filesystem;
  fs::create_directories(spec.output_dir);
  const std::string dir = spec.output_dir + "/";
  art.clusters.save(dir + "clusters.txt");
  features::write_boc_csv(dir + "boc.csv", art.boc);
  features::write_embeddings(dir + "zone_embeddings.txt", art.zone_cbow.embeddings);

  RunOutcome out;
  out.artifacts_digest = artifacts_digest(art);

  for (const ModelRequest& req : spec.models) {
    const std::string name = model_request_name(req);
    try {
      const double t0 = clock();
      const std::vector<geo::Coordinate> preds =
          train_and_predict(spec, req, art, splits, dir + name + ".ckpt");
      const double wall = clock() - t0;

      std::vector<double> eds;
      eds.reserve(splits.test.size());
      std::string samples = std::string(kSamplesHeader) + '\n';
      for (std::size_t i = 0; i < splits.test.size(); ++i) {
        const geo::Coordinate truth = *splits.test[i].target;
        const double d = geo::eds_km(preds[i], truth);
        eds.push_back(d);
        samples += std::to_string(i) + ',' + format_double(preds[i].lat()) + ',' +
                   format_double(preds[i].lon()) + ',' + format_double(truth.lat()) + ',' +
                   format_double(truth.lon()) + ',' + format_double(d) + '\n';
      }
      write_text_file(dir + name + "_samples.csv", samples);

      ResultRow row;
      row.model = name;
      row.city = spec.city;
      row.mean_eds_km = mean_of(eds);
      row.median_eds_km = median_of(eds);
      row.n_test = static_cast<int>(splits.test.size());
      row.seed = spec.seed;
      row.wall_s = wall;
      out.rows.push_back(std::move(row));
    } catch (const std::exception& e) {
      out.failures.push_back(name + ": " + e.what());
    }
  }

  write_text_file(dir + "results.csv", results_csv(out.rows));
  std::string failures;
  for (const std::string& f : out.failures) failures += f + '\n';
  write_text_file(dir + "failures.txt", failures);
  return out;
}

}  // namespace taxidest::experiment
