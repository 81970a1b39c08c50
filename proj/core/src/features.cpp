#include "taxidest/features.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "taxidest/nn.hpp"
#include "taxidest/util.hpp"

namespace taxidest::features {

// ---------------------------------------------------------------------------
// Bag of concepts
// ---------------------------------------------------------------------------

std::vector<BocVector> build_boc(std::span<const ingest::Poi> pois,
                                 const clustering::ClusterModel& clusters) {
  std::vector<BocVector> boc(static_cast<std::size_t>(clusters.k()), BocVector{});
  for (const ingest::Poi& poi : pois) {
    const int zone = clusters.assign(poi.loc);
    boc[static_cast<std::size_t>(zone)][static_cast<std::size_t>(poi.macro_category)] += 1.0;
  }
  return boc;
}

std::vector<BocVector> zero_boc(int n_zones) {
  if (n_zones < 1) throw std::invalid_argument("zero_boc: n_zones must be >= 1");
  return std::vector<BocVector>(static_cast<std::size_t>(n_zones), BocVector{});
}

namespace {

std::string category_column(int index) {
  std::string name = to_lower(ingest::poi_category_name(index));
  std::replace(name.begin(), name.end(), ' ', '_');
  return name;
}

}  // namespace

void write_boc_csv(const std::string& path, std::span<const BocVector> boc) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "zone";
  for (int c = 0; c < ingest::kPoiCategoryCount; ++c) out << ',' << category_column(c);
  out << '\n';
  for (std::size_t z = 0; z < boc.size(); ++z) {
    out << z;
    for (const double v : boc[z]) out << ',' << format_double(v);
    out << '\n';
  }
  if (!out) throw std::runtime_error("short write to " + path);
}

std::vector<BocVector> read_boc_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error(path + ": empty file");
  std::vector<BocVector> boc;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const std::vector<std::string> f = split(line, ',');
    if (static_cast<int>(f.size()) != 1 + ingest::kPoiCategoryCount) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": bad column count");
    }
    if (parse_i64(f[0]) != static_cast<std::int64_t>(boc.size())) {
      throw std::runtime_error(path + ":" + std::to_string(line_no) + ": zones out of order");
    }
    BocVector row{};
    for (int c = 0; c < ingest::kPoiCategoryCount; ++c) {
      row[static_cast<std::size_t>(c)] = parse_double(f[static_cast<std::size_t>(c) + 1]);
    }
    boc.push_back(row);
  }
  return boc;
}

// ---------------------------------------------------------------------------
// CBOW
// ---------------------------------------------------------------------------

namespace {

double sigmoid_scalar(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

CbowResult train_cbow(std::span<const std::vector<int>> sentences, int vocab_size,
                      const CbowOptions& options, std::uint64_t seed) {
  if (vocab_size < 1) throw std::invalid_argument("train_cbow: vocab_size must be >= 1");
  if (options.dim < 1 || options.window < 1 || options.negatives < 0 || options.epochs < 1 ||
      options.lr <= 0.0) {
    throw std::invalid_argument("train_cbow: bad options");
  }

  std::vector<std::int64_t> counts(static_cast<std::size_t>(vocab_size), 0);
  std::int64_t total_tokens = 0;
  for (const auto& sentence : sentences) {
    for (const int tok : sentence) {
      if (tok < 0 || tok >= vocab_size) {
        throw std::invalid_argument("train_cbow: token out of vocabulary range");
      }
      ++counts[static_cast<std::size_t>(tok)];
      ++total_tokens;
    }
  }
  const int distinct = static_cast<int>(std::count_if(
      counts.begin(), counts.end(), [](std::int64_t c) { return c > 0; }));
  if (distinct < 2) {
    throw std::invalid_argument(
        "train_cbow: corpus has fewer than two distinct tokens, co-occurrence is undefined");
  }

  // Negative-sampling distribution: unigram ^ 0.75, via a cumulative
  // table and binary search.
  std::vector<double> cum;
  std::vector<int> cum_token;
  double running = 0.0;
  for (int t = 0; t < vocab_size; ++t) {
    if (counts[static_cast<std::size_t>(t)] == 0) continue;
    running += std::pow(static_cast<double>(counts[static_cast<std::size_t>(t)]), 0.75);
    cum.push_back(running);
    cum_token.push_back(t);
  }

  Rng rng(seed);
  const std::size_t dim = static_cast<std::size_t>(options.dim);
  std::vector<std::vector<double>> input(static_cast<std::size_t>(vocab_size));
  std::vector<std::vector<double>> output(static_cast<std::size_t>(vocab_size),
                                          std::vector<double>(dim, 0.0));
  for (int t = 0; t < vocab_size; ++t) {
    auto& row = input[static_cast<std::size_t>(t)];
    row.assign(dim, 0.0);
    // Unseen tokens keep zero vectors so they are visibly untrained.
    if (counts[static_cast<std::size_t>(t)] == 0) continue;
    for (double& v : row) v = rng.uniform(-0.5 / static_cast<double>(dim),
                                          0.5 / static_cast<double>(dim));
  }

  const auto sample_negative = [&]() {
    const double r = rng.uniform() * running;
    const auto it = std::lower_bound(cum.begin(), cum.end(), r);
    const std::size_t i = std::min(static_cast<std::size_t>(it - cum.begin()), cum.size() - 1);
    return cum_token[i];
  };

  CbowResult result;
  const double total_work =
      static_cast<double>(total_tokens) * static_cast<double>(options.epochs);
  std::int64_t processed = 0;
  std::vector<double> hvec(dim), accum(dim);

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    double loss_sum = 0.0;
    std::int64_t centers = 0;
    for (const auto& sentence : sentences) {
      const int len = static_cast<int>(sentence.size());
      for (int i = 0; i < len; ++i) {
        const double alpha =
            std::max(options.lr * (1.0 - static_cast<double>(processed) / total_work),
                     options.lr * 1e-4);
        ++processed;

        const int half = 1 + static_cast<int>(rng.uniform_int(
                                 static_cast<std::uint64_t>(options.window)));
        std::vector<int> context;
        for (int j = std::max(0, i - half); j <= std::min(len - 1, i + half); ++j) {
          if (j != i) context.push_back(sentence[static_cast<std::size_t>(j)]);
        }
        if (context.empty()) continue;

        std::fill(hvec.begin(), hvec.end(), 0.0);
        for (const int tok : context) {
          const auto& v = input[static_cast<std::size_t>(tok)];
          for (std::size_t d = 0; d < dim; ++d) hvec[d] += v[d];
        }
        for (std::size_t d = 0; d < dim; ++d) hvec[d] /= static_cast<double>(context.size());

        const int center = sentence[static_cast<std::size_t>(i)];
        std::fill(accum.begin(), accum.end(), 0.0);
        double loss = 0.0;
        for (int s = 0; s <= options.negatives; ++s) {
          int target;
          double label;
          if (s == 0) {
            target = center;
            label = 1.0;
          } else {
            target = sample_negative();
            if (target == center) continue;  // a positive cannot serve as its own negative
            label = 0.0;
          }
          auto& u = output[static_cast<std::size_t>(target)];
          double f = 0.0;
          for (std::size_t d = 0; d < dim; ++d) f += u[d] * hvec[d];
          const double sf = sigmoid_scalar(f);
          loss -= label == 1.0 ? std::log(std::max(sf, 1e-12))
                               : std::log(std::max(1.0 - sf, 1e-12));
          const double g = (label - sf) * alpha;
          for (std::size_t d = 0; d < dim; ++d) {
            accum[d] += g * u[d];
            u[d] += g * hvec[d];
          }
        }
        // The mean-context gradient splits evenly across context words.
        const double inv = 1.0 / static_cast<double>(context.size());
        for (const int tok : context) {
          auto& v = input[static_cast<std::size_t>(tok)];
          for (std::size_t d = 0; d < dim; ++d) v[d] += accum[d] * inv;
        }
        loss_sum += loss;
        ++centers;
      }
    }
    result.epoch_loss.push_back(centers > 0 ? loss_sum / static_cast<double>(centers) : 0.0);
  }

  result.embeddings = std::move(input);
  return result;
}

std::vector<int> zone_sentence(const ingest::DriverSequence& sample,
                               const clustering::ClusterModel& clusters) {
  std::vector<int> tokens;
  tokens.reserve(sample.history.size() + 2);
  for (const auto& p : sample.history) tokens.push_back(clusters.assign(p.loc));
  tokens.push_back(clusters.assign(sample.current_pickup.loc));
  if (sample.target) tokens.push_back(clusters.assign(*sample.target));
  return tokens;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("cosine_similarity: size mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

void write_embeddings(const std::string& path,
                      std::span<const std::vector<double>> embeddings) {
  if (embeddings.empty()) throw std::invalid_argument("write_embeddings: empty matrix");
  const std::size_t dim = embeddings.front().size();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << "taxidest-zone-emb v1\n";
  out << "n " << embeddings.size() << " dim " << dim << '\n';
  for (const auto& row : embeddings) {
    if (row.size() != dim) throw std::invalid_argument("write_embeddings: ragged matrix");
    for (std::size_t d = 0; d < dim; ++d) {
      if (d) out << ' ';
      out << format_double(row[d]);
    }
    out << '\n';
  }
  if (!out) throw std::runtime_error("short write to " + path);
}

std::vector<std::vector<double>> read_embeddings(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || trim(line) != "taxidest-zone-emb v1") {
    throw std::runtime_error(path + ": not a zone embedding file (bad magic)");
  }
  if (!std::getline(in, line)) throw std::runtime_error(path + ": truncated header");
  const std::vector<std::string> kv = split(trim(line), ' ');
  if (kv.size() != 4 || kv[0] != "n" || kv[2] != "dim") {
    throw std::runtime_error(path + ": expected 'n <rows> dim <cols>'");
  }
  const std::int64_t n = parse_i64(kv[1]);
  const std::int64_t dim = parse_i64(kv[3]);
  if (n < 1 || dim < 1) throw std::runtime_error(path + ": bad embedding dimensions");
  std::vector<std::vector<double>> rows;
  rows.reserve(static_cast<std::size_t>(n));
  for (std::int64_t r = 0; r < n; ++r) {
    if (!std::getline(in, line)) throw std::runtime_error(path + ": truncated matrix");
    const std::vector<std::string> f = split(trim(line), ' ');
    if (static_cast<std::int64_t>(f.size()) != dim) {
      throw std::runtime_error(path + ": bad row width");
    }
    std::vector<double> row(static_cast<std::size_t>(dim));
    for (std::size_t d = 0; d < row.size(); ++d) row[d] = parse_double(f[d]);
    rows.push_back(std::move(row));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Vocabularies and tables
// ---------------------------------------------------------------------------

DriverVocab DriverVocab::build(std::span<const ingest::DriverSequence> train_samples) {
  std::vector<std::string> ids;
  for (const auto& s : train_samples) ids.push_back(s.driver_id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  DriverVocab v;
  v.ids_ = std::move(ids);
  return v;
}

DriverVocab DriverVocab::from_ids(std::vector<std::string> sorted_ids) {
  if (!std::is_sorted(sorted_ids.begin(), sorted_ids.end()) ||
      std::adjacent_find(sorted_ids.begin(), sorted_ids.end()) != sorted_ids.end()) {
    throw std::invalid_argument("DriverVocab: ids must be sorted and unique");
  }
  DriverVocab v;
  v.ids_ = std::move(sorted_ids);
  return v;
}

int DriverVocab::index_of(const std::string& driver_id) const {
  const auto it = std::lower_bound(ids_.begin(), ids_.end(), driver_id);
  if (it == ids_.end() || *it != driver_id) return 0;
  return static_cast<int>(it - ids_.begin()) + 1;
}

EmbeddingTable make_embedding(int vocab, int dim, Rng& rng, bool trainable) {
  if (vocab < 1 || dim < 1) throw std::invalid_argument("make_embedding: bad dimensions");
  // word2vec-style init keeps early lookups small relative to the
  // unit-scale recurrent activations.
  const double limit = 0.5 / static_cast<double>(dim);
  return EmbeddingTable{nn::uniform_init({vocab, dim}, limit, rng, trainable)};
}

EmbeddingTable embedding_from_values(int vocab, int dim, std::vector<double> values,
                                     bool trainable) {
  return EmbeddingTable{nn::Tensor::from_values({vocab, dim}, std::move(values), trainable)};
}

std::vector<nn::Tensor> FeatureTables::parameters() const {
  std::vector<nn::Tensor> out;
  for (const EmbeddingTable* t : {&zone, &hour, &weekday, &day_type, &driver}) {
    if (t->weights.requires_grad()) out.push_back(t->weights);
  }
  return out;
}

FeatureTables make_feature_tables(int n_zones, int n_driver_rows, const FeatureConfig& config,
                                  Rng& rng, bool zone_trainable) {
  if (n_driver_rows < 1) throw std::invalid_argument("make_feature_tables: no driver rows");
  FeatureTables t;
  t.zone = make_embedding(n_zones, config.zone_dim, rng, zone_trainable);
  t.hour = make_embedding(24, config.time_dim, rng);
  t.weekday = make_embedding(7, config.time_dim, rng);
  t.day_type = make_embedding(3, config.time_dim, rng);
  t.driver = make_embedding(n_driver_rows, config.driver_dim, rng);
  return t;
}

// ---------------------------------------------------------------------------
// Assembly
// ---------------------------------------------------------------------------

FeatureTensor assemble(const ingest::DriverSequence& sample,
                       const clustering::ClusterModel& clusters,
                       std::span<const BocVector> boc, const FeatureTables& tables,
                       const DriverVocab& drivers, const FeatureConfig& config) {
  if (sample.history.size() % 2 != 0) {
    throw std::invalid_argument("assemble: history must alternate pickup/dropoff pairs");
  }
  const int n_valid = static_cast<int>(sample.history.size()) + 1;
  if (n_valid > config.max_steps) {
    throw std::invalid_argument("assemble: history longer than max_steps allows");
  }
  if (static_cast<int>(boc.size()) != clusters.k()) {
    throw std::invalid_argument("assemble: venue table does not match the cluster count");
  }
  if (tables.zone.vocab() != clusters.k() || tables.zone.dim() != config.zone_dim ||
      tables.hour.vocab() != 24 || tables.hour.dim() != config.time_dim ||
      tables.weekday.vocab() != 7 || tables.day_type.vocab() != 3 ||
      tables.driver.dim() != config.driver_dim) {
    throw std::invalid_argument("assemble: embedding tables do not match the config");
  }
  const ingest::TemporalMeta& meta = sample.temporal_meta;
  if (meta.hour < 0 || meta.hour > 23 || meta.weekday < 0 || meta.weekday > 6 ||
      meta.day_type < 0 || meta.day_type > 2) {
    throw std::invalid_argument("assemble: temporal metadata out of range");
  }
  const int driver_index = drivers.index_of(sample.driver_id);
  if (driver_index >= tables.driver.vocab()) {
    throw std::invalid_argument("assemble: driver index outside the driver table");
  }

  FeatureTensor out;
  out.n_steps = config.max_steps;
  out.width = config.step_width();
  out.valid_begin = config.max_steps - n_valid;
  out.values.assign(static_cast<std::size_t>(out.n_steps) * out.width, 0.0);
  out.mask.assign(static_cast<std::size_t>(out.n_steps), false);
  out.step_cluster.assign(static_cast<std::size_t>(out.n_steps), -1);
  out.hour = meta.hour;
  out.weekday = meta.weekday;
  out.day_type = meta.day_type;
  out.driver_index = driver_index;

  const std::vector<double>& zone_w = tables.zone.weights.values();
  const std::vector<double>& hour_w = tables.hour.weights.values();
  const std::vector<double>& wday_w = tables.weekday.weights.values();
  const std::vector<double>& dtype_w = tables.day_type.weights.values();
  const std::vector<double>& drv_w = tables.driver.weights.values();

  for (int step = 0; step < n_valid; ++step) {
    geo::Coordinate loc = step < static_cast<int>(sample.history.size())
                              ? sample.history[static_cast<std::size_t>(step)].loc
                              : sample.current_pickup.loc;
    const int zone = clusters.assign(loc);
    const int r = out.valid_begin + step;
    out.mask[static_cast<std::size_t>(r)] = true;
    out.step_cluster[static_cast<std::size_t>(r)] = zone;

    double* row = out.values.data() + static_cast<std::size_t>(r) * out.width;
    std::size_t o = 0;
    for (int d = 0; d < config.zone_dim; ++d) {
      row[o++] = zone_w[static_cast<std::size_t>(zone) * config.zone_dim + d];
    }
    for (int c = 0; c < config.boc_dim; ++c) {
      row[o++] = std::log1p(boc[static_cast<std::size_t>(zone)][static_cast<std::size_t>(c)]);
    }
    for (int d = 0; d < config.time_dim; ++d) {
      row[o++] = hour_w[static_cast<std::size_t>(meta.hour) * config.time_dim + d];
    }
    for (int d = 0; d < config.time_dim; ++d) {
      row[o++] = wday_w[static_cast<std::size_t>(meta.weekday) * config.time_dim + d];
    }
    for (int d = 0; d < config.time_dim; ++d) {
      row[o++] = dtype_w[static_cast<std::size_t>(meta.day_type) * config.time_dim + d];
    }
    for (int d = 0; d < config.driver_dim; ++d) {
      row[o++] = drv_w[static_cast<std::size_t>(driver_index) * config.driver_dim + d];
    }
  }
  return out;
}

}  // namespace taxidest::features
