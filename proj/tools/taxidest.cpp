// Command-line front end: prepare raw trips into sequence files, fit
// clusters and zone embeddings, train and evaluate destination models,
// and merge result reports.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "taxidest/clustering.hpp"
#include "taxidest/experiment.hpp"
#include "taxidest/features.hpp"
#include "taxidest/geo.hpp"
#include "taxidest/ingest.hpp"
#include "taxidest/model.hpp"
#include "taxidest/util.hpp"

namespace {

using namespace taxidest;

constexpr int kExitMissingInput = 2;

/// Missing-input failures carry the stage whose output should have
/// produced the file, so the user knows which command to run first.
struct MissingInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require_file(const std::string& path, const std::string& what, const std::string& stage) {
  if (path.empty()) {
    throw MissingInput("missing " + what + " (produce one with `taxidest " + stage + "`)");
  }
  if (!std::filesystem::exists(path)) {
    throw MissingInput("missing " + what + " '" + path + "' (produce one with `taxidest " +
                       stage + "`)");
  }
}

// --- shared spec plumbing ---------------------------------------------------

struct SpecCli {
  std::string config_path;
  std::vector<std::string> overrides;  // key=value pairs

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "experiment config file (key = value lines)");
    cmd->add_option("--set", overrides, "override a config key, e.g. --set seed=7")
        ->type_name("KEY=VALUE");
  }

  std::map<std::string, std::string> merged() const {
    std::map<std::string, std::string> map;
    if (!config_path.empty()) {
      require_file(config_path, "config file", "evaluate --help");
      map = read_config_file(config_path);
    }
    for (const std::string& kv : overrides) {
      const std::size_t eq = kv.find('=');
      if (eq == std::string::npos) {
        throw std::invalid_argument("--set expects KEY=VALUE, got '" + kv + "'");
      }
      map[trim(kv.substr(0, eq))] = trim(kv.substr(eq + 1));
    }
    return map;
  }
};

void check_spec_inputs(const experiment::ExperimentSpec& spec) {
  require_file(spec.dataset_path, "trip dataset", "prepare --help");
  if (!spec.poi_path.empty()) require_file(spec.poi_path, "POI file", "prepare --help");
  if (!spec.holiday_path.empty()) {
    require_file(spec.holiday_path, "holiday file", "prepare --help");
  }
}

void print_run_outcome(const experiment::RunOutcome& outcome) {
  std::cout << experiment::results_csv(outcome.rows);
  for (const std::string& f : outcome.failures) std::cerr << "failed: " << f << '\n';
}

// --- subcommand bodies ------------------------------------------------------

int cmd_prepare(const std::string& dataset, const std::string& format_name,
                const std::string& holidays, const ingest::SequenceOptions& base_options,
                const std::string& out_path) {
  require_file(dataset, "trip dataset", "prepare --help");
  ingest::SequenceOptions options = base_options;
  if (!holidays.empty()) {
    require_file(holidays, "holiday file", "prepare --help");
    options.holidays = ingest::HolidayCalendar::load(holidays);
  }
  const ingest::TripParseResult parsed =
      ingest::parse_trips(dataset, experiment::parse_trip_format(format_name));
  for (const ingest::RowReject& r : parsed.rejects) {
    std::cerr << "rejected line " << r.line_no << ": " << r.reason << '\n';
  }
  const std::vector<ingest::DriverSequence> sequences =
      ingest::build_sequences(parsed.records, options);
  ingest::write_sequences_jsonl(out_path, sequences);
  std::cout << "wrote " << sequences.size() << " sequences from " << parsed.records.size()
            << " trips (" << parsed.rejects.size() << " rows rejected) to " << out_path << '\n';
  return 0;
}

int cmd_cluster(const std::string& in_path, int k, std::uint64_t seed,
                const clustering::KmeansOptions& options, const std::string& out_path) {
  require_file(in_path, "sequences file", "prepare");
  const std::vector<ingest::DriverSequence> sequences = ingest::read_sequences_jsonl(in_path);
  std::vector<geo::Coordinate> targets;
  for (const auto& s : sequences) {
    if (s.target) targets.push_back(*s.target);
  }
  if (targets.empty()) throw std::runtime_error(in_path + ": no labeled samples to cluster");
  const clustering::KmeansResult result = clustering::fit_kmeans(targets, k, seed, options);
  result.model.save(out_path);
  std::cout << "fitted " << k << " destination clusters on " << targets.size()
            << " drop-offs (inertia " << format_double(result.inertia) << ") to " << out_path
            << '\n';
  return 0;
}

int cmd_embed(const std::string& in_path, const std::string& clusters_path,
              const features::CbowOptions& options, std::uint64_t seed,
              const std::string& out_path) {
  require_file(in_path, "sequences file", "prepare");
  require_file(clusters_path, "cluster file", "cluster");
  const clustering::ClusterModel clusters = clustering::ClusterModel::load(clusters_path);
  const std::vector<ingest::DriverSequence> sequences = ingest::read_sequences_jsonl(in_path);
  std::vector<std::vector<int>> sentences;
  sentences.reserve(sequences.size());
  for (const auto& s : sequences) sentences.push_back(features::zone_sentence(s, clusters));
  const features::CbowResult cbow =
      features::train_cbow(sentences, clusters.k(), options, seed);
  features::write_embeddings(out_path, cbow.embeddings);
  std::cout << "trained zone embeddings on " << sentences.size() << " traces; final loss "
            << format_double(cbow.epoch_loss.empty() ? 0.0 : cbow.epoch_loss.back()) << "; "
            << out_path << '\n';
  return 0;
}

int cmd_train(const SpecCli& spec_cli, const std::string& model_entry) {
  std::map<std::string, std::string> config = spec_cli.merged();
  config["models"] = model_entry;
  experiment::ExperimentSpec spec = experiment::spec_from_config(config);
  check_spec_inputs(spec);
  const experiment::RunOutcome outcome = experiment::run(spec);
  print_run_outcome(outcome);
  return outcome.failures.empty() ? 0 : 1;
}

int cmd_evaluate_spec(const SpecCli& spec_cli) {
  experiment::ExperimentSpec spec = experiment::spec_from_config(spec_cli.merged());
  if (spec.models.empty()) throw std::invalid_argument("evaluate: no models configured");
  check_spec_inputs(spec);
  const experiment::RunOutcome outcome = experiment::run(spec);
  print_run_outcome(outcome);
  return outcome.failures.empty() ? 0 : 1;
}

int cmd_evaluate_checkpoint(const std::string& checkpoint, const std::string& data_path,
                            const std::string& city, const std::string& samples_out) {
  require_file(checkpoint, "model checkpoint", "train");
  require_file(data_path, "sequences file", "prepare");
  const std::vector<ingest::DriverSequence> all = ingest::read_sequences_jsonl(data_path);
  std::vector<ingest::DriverSequence> labeled;
  for (const auto& s : all) {
    if (s.target) labeled.push_back(s);
  }
  if (labeled.empty()) throw std::runtime_error(data_path + ": no labeled samples");

  const std::string type = model::checkpoint_model_type(checkpoint);
  std::vector<geo::Coordinate> preds;
  std::uint64_t seed = 0;
  std::string name = type;
  if (type == "predictor") {
    const model::Predictor m = model::Predictor::load_checkpoint(checkpoint);
    seed = m.config().seed;
    for (const auto& s : labeled) preds.push_back(m.predict(s));
  } else {
    const model::MmlpModel m = model::MmlpModel::load_checkpoint(checkpoint);
    seed = m.config().seed;
    name = model::mmlp_variant_name(m.variant());
    for (const auto& s : labeled) preds.push_back(m.predict(s));
  }

  std::vector<double> eds;
  std::string samples = "sample_id,pred_lat,pred_lon,true_lat,true_lon,eds_km\n";
  double sum = 0.0;
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    const geo::Coordinate truth = *labeled[i].target;
    const double d = geo::eds_km(preds[i], truth);
    eds.push_back(d);
    sum += d;
    samples += std::to_string(i) + ',' + format_double(preds[i].lat()) + ',' +
               format_double(preds[i].lon()) + ',' + format_double(truth.lat()) + ',' +
               format_double(truth.lon()) + ',' + format_double(d) + '\n';
  }
  if (!samples_out.empty()) write_text_file(samples_out, samples);

  std::sort(eds.begin(), eds.end());
  const double median = eds.size() % 2 == 1
                            ? eds[eds.size() / 2]
                            : 0.5 * (eds[eds.size() / 2 - 1] + eds[eds.size() / 2]);
  experiment::ResultRow row;
  row.model = name;
  row.city = city;
  row.mean_eds_km = sum / static_cast<double>(eds.size());
  row.median_eds_km = median;
  row.n_test = static_cast<int>(eds.size());
  row.seed = seed;
  row.wall_s = 0.0;
  std::cout << experiment::results_csv(std::span<const experiment::ResultRow>(&row, 1));
  return 0;
}

int cmd_report(const std::vector<std::string>& results_paths,
               const std::vector<std::string>& samples_paths, const std::string& out_path,
               const std::string& hist_dir, double bin_km) {
  for (const std::string& p : results_paths) require_file(p, "results CSV", "evaluate");
  const std::string merged = experiment::merge_reports(results_paths);
  if (out_path.empty()) {
    std::cout << merged;
  } else {
    write_text_file(out_path, merged);
    std::cout << "wrote " << out_path << '\n';
  }
  for (const std::string& p : samples_paths) {
    require_file(p, "per-sample CSV", "evaluate");
    const std::vector<double> eds = experiment::read_sample_eds(p);
    const std::filesystem::path src(p);
    std::filesystem::path dst =
        hist_dir.empty() ? src.parent_path() : std::filesystem::path(hist_dir);
    if (!hist_dir.empty()) std::filesystem::create_directories(dst);
    dst /= src.stem().string() + "_hist.csv";
    write_text_file(dst.string(), experiment::eds_histogram_csv(eds, bin_km));
    std::cout << "wrote " << dst.string() << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Taxi destination prediction pipeline"};
  app.require_subcommand(1);

  // prepare ------------------------------------------------------------------
  auto* prepare = app.add_subcommand("prepare", "build driver sequences from raw trips");
  std::string p_dataset, p_format = "polyline_csv", p_holidays, p_out = "sequences.jsonl";
  ingest::SequenceOptions p_options;
  prepare->add_option("--dataset", p_dataset, "trip CSV file")->required();
  prepare->add_option("--format", p_format, "polyline_csv or od_csv");
  prepare->add_option("--holidays", p_holidays, "holiday dates file (YYYY-MM-DD lines)");
  prepare->add_option("--utc-offset-min", p_options.utc_offset_min,
                      "local time offset in minutes");
  prepare->add_option("--history-k", p_options.k, "max history points per sample (even)");
  prepare->add_option("--max-gap-hours", p_options.max_gap_hours, "shift boundary gap");
  prepare->add_option("--sample-period-s", p_options.polyline_sample_period_s,
                      "trace sampling period");
  prepare->add_option("--out", p_out, "output sequences JSONL");

  // cluster ------------------------------------------------------------------
  auto* cluster = app.add_subcommand("cluster", "fit destination clusters on drop-offs");
  std::string c_in, c_out = "clusters.txt";
  int c_k = 100;
  std::uint64_t c_seed = 0;
  clustering::KmeansOptions c_options;
  cluster->add_option("--in", c_in, "sequences JSONL")->required();
  cluster->add_option("--k", c_k, "number of clusters");
  cluster->add_option("--seed", c_seed, "random seed");
  cluster->add_option("--restarts", c_options.n_init, "independent restarts");
  cluster->add_option("--iters", c_options.max_iters, "max iterations per restart");
  cluster->add_option("--out", c_out, "output cluster file");

  // embed --------------------------------------------------------------------
  auto* embed = app.add_subcommand("embed", "train zone embeddings on cluster traces");
  std::string e_in, e_clusters, e_out = "zone_embeddings.txt";
  std::uint64_t e_seed = 0;
  features::CbowOptions e_options;
  embed->add_option("--in", e_in, "sequences JSONL")->required();
  embed->add_option("--clusters", e_clusters, "cluster file")->required();
  embed->add_option("--dim", e_options.dim, "embedding width");
  embed->add_option("--window", e_options.window, "max context half-width");
  embed->add_option("--negatives", e_options.negatives, "negative samples per center");
  embed->add_option("--epochs", e_options.epochs, "training epochs");
  embed->add_option("--lr", e_options.lr, "initial learning rate");
  embed->add_option("--seed", e_seed, "random seed");
  embed->add_option("--out", e_out, "output embedding file");

  // train --------------------------------------------------------------------
  auto* train = app.add_subcommand("train", "train one model end to end");
  SpecCli t_spec;
  std::string t_model;
  t_spec.attach(train);
  train->add_option("--model", t_model,
                    "model to train: nn, mmlp, mmlp_seq, lstm, lstm_boc, lstm_boc_w2v, "
                    "optionally :regression or :classification")
      ->required();

  // evaluate -----------------------------------------------------------------
  auto* evaluate = app.add_subcommand("evaluate", "run the configured models, or score "
                                                  "one checkpoint on a sequences file");
  SpecCli v_spec;
  std::string v_checkpoint, v_data, v_city = "city", v_samples_out;
  v_spec.attach(evaluate);
  evaluate->add_option("--checkpoint", v_checkpoint, "trained model checkpoint");
  evaluate->add_option("--data", v_data, "sequences JSONL to score");
  evaluate->add_option("--city", v_city, "city label for the result row");
  evaluate->add_option("--out-samples", v_samples_out, "write the per-sample CSV here");

  // report -------------------------------------------------------------------
  auto* report = app.add_subcommand("report", "merge result CSVs; optional EDS histograms");
  std::vector<std::string> r_results, r_samples;
  std::string r_out, r_hist_dir;
  double r_bin_km = 1.0;
  report->add_option("results", r_results, "result CSV files to merge")->required();
  report->add_option("--samples", r_samples, "per-sample CSVs to histogram");
  report->add_option("--out", r_out, "write the merged table here (default stdout)");
  report->add_option("--hist-dir", r_hist_dir, "directory for histogram CSVs");
  report->add_option("--bin-km", r_bin_km, "histogram bin width in km");

  CLI11_PARSE(app, argc, argv);

  try {
    if (prepare->parsed()) {
      return cmd_prepare(p_dataset, p_format, p_holidays, p_options, p_out);
    }
    if (cluster->parsed()) return cmd_cluster(c_in, c_k, c_seed, c_options, c_out);
    if (embed->parsed()) return cmd_embed(e_in, e_clusters, e_options, e_seed, e_out);
    if (train->parsed()) return cmd_train(t_spec, t_model);
    if (evaluate->parsed()) {
      if (!v_checkpoint.empty() || !v_data.empty()) {
        return cmd_evaluate_checkpoint(v_checkpoint, v_data, v_city, v_samples_out);
      }
      if (v_spec.config_path.empty() && v_spec.overrides.empty()) {
        throw MissingInput(
            "missing model checkpoint (produce one with `taxidest train`, or pass --config)");
      }
      return cmd_evaluate_spec(v_spec);
    }
    if (report->parsed()) {
      return cmd_report(r_results, r_samples, r_out, r_hist_dir, r_bin_km);
    }
  } catch (const MissingInput& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitMissingInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
