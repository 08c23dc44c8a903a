#include "mtml/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "mtml/error.hpp"
#include "mtml/rng.hpp"

namespace mtml {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

bool parse_double(const std::string& s, double& out) {
  const char* begin = s.data();
  const char* end = s.data() + s.size();
  if (begin != end && *begin == '+') ++begin;
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end;
}

bool parse_int(const std::string& s, std::int64_t& out) {
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::string to_string(TaskKind kind) {
  switch (kind) {
    case TaskKind::automated: return "automated";
    case TaskKind::expert: return "expert";
    case TaskKind::gradient_forward: return "gradient_forward";
    case TaskKind::gradient_backward: return "gradient_backward";
  }
  return "unknown";
}

TaskKind task_kind_from_string(const std::string& name) {
  if (name == "automated") return TaskKind::automated;
  if (name == "expert") return TaskKind::expert;
  if (name == "gradient_forward") return TaskKind::gradient_forward;
  if (name == "gradient_backward") return TaskKind::gradient_backward;
  throw ConfigError("unknown task kind '" + name + "'");
}

Schema default_schema() {
  Schema s;
  for (int i = 0; i < 3; ++i) {
    s.push_back({"auto_" + std::to_string(i), TaskKind::automated, 0.1, std::nullopt, true});
  }
  // Expert scores are quantized to 0.25; half a step makes equal grades match.
  s.push_back({"expert_0", TaskKind::expert, 0.125, std::nullopt, true});
  s.push_back({"expert_1", TaskKind::expert, 0.125, std::nullopt, true});
  for (std::size_t e : {std::size_t{3}, std::size_t{4}}) {
    const std::string base = s[e].name;
    s.push_back({base + "_fwd", TaskKind::gradient_forward, 0.005, e, true});
    s.push_back({base + "_bwd", TaskKind::gradient_backward, 0.005, e, true});
  }
  return s;
}

void validate_schema(const Schema& schema) {
  if (schema.empty()) throw ConfigError("schema has no tasks");
  std::set<std::string> names;
  for (std::size_t t = 0; t < schema.size(); ++t) {
    const auto& task = schema[t];
    const std::string where = "task " + std::to_string(t) + " ('" + task.name + "')";
    if (task.name.empty()) throw ConfigError(where + ": empty name");
    if (!names.insert(task.name).second) throw ConfigError(where + ": duplicate name");
    if (!(task.resolution >= 0.0) || !std::isfinite(task.resolution)) {
      throw ConfigError(where + ": resolution must be a finite non-negative number");
    }
    if (is_gradient(task.kind)) {
      if (!task.source_task) throw ConfigError(where + ": gradient task needs source_task");
      if (*task.source_task >= schema.size() ||
          schema[*task.source_task].kind != TaskKind::expert) {
        throw ConfigError(where + ": source_task must reference an expert task");
      }
    } else if (task.source_task) {
      throw ConfigError(where + ": only gradient tasks may have source_task");
    }
  }
}

nlohmann::json schema_to_json(const Schema& schema) {
  auto arr = nlohmann::json::array();
  for (const auto& t : schema) {
    nlohmann::json j;
    j["name"] = t.name;
    j["kind"] = to_string(t.kind);
    j["resolution"] = t.resolution;
    j["source_task"] = t.source_task ? nlohmann::json(*t.source_task) : nlohmann::json(nullptr);
    j["include_in_match"] = t.include_in_match;
    arr.push_back(std::move(j));
  }
  return arr;
}

Schema schema_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw LoadError("schema JSON must be an array of tasks");
  Schema schema;
  try {
    for (const auto& item : j) {
      TaskSchema t;
      t.name = item.at("name").get<std::string>();
      t.kind = task_kind_from_string(item.at("kind").get<std::string>());
      t.resolution = item.at("resolution").get<double>();
      if (item.contains("source_task") && !item["source_task"].is_null()) {
        t.source_task = item["source_task"].get<std::size_t>();
      }
      t.include_in_match = item.value("include_in_match", true);
      schema.push_back(std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("schema JSON: ") + e.what());
  }
  validate_schema(schema);
  return schema;
}

Schema load_schema(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open schema file " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
  return schema_from_json(j);
}

void save_schema(const Schema& schema, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write schema file " + path.string());
  out << schema_to_json(schema).dump(2) << '\n';
}

std::string schema_hash(const Schema& schema) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(schema_to_json(schema).dump())));
  return buf;
}

Dataset::Dataset(Schema schema, std::vector<ObservationRecord> records)
    : schema_(std::move(schema)), records_(std::move(records)) {
  std::stable_sort(records_.begin(), records_.end(), [](const auto& a, const auto& b) {
    if (a.individual_id != b.individual_id) return a.individual_id < b.individual_id;
    return a.timestamp < b.timestamp;
  });
  if (!records_.empty()) dim_ = static_cast<std::size_t>(records_.front().features.size());
  for (std::size_t i = 0; i < records_.size(); ++i) {
    const auto& r = records_[i];
    if (static_cast<std::size_t>(r.features.size()) != dim_) {
      throw LoadError("record of '" + r.individual_id + "' at day " +
                      std::to_string(r.timestamp) + " has feature dimension " +
                      std::to_string(r.features.size()) + ", expected " + std::to_string(dim_));
    }
    if (!r.features.allFinite()) {
      throw LoadError("record of '" + r.individual_id + "' at day " +
                      std::to_string(r.timestamp) + " has a non-finite feature");
    }
    if (r.labels.size() != schema_.size() || r.labels.present.size() != schema_.size() ||
        r.labels.observed.size() != schema_.size()) {
      throw LoadError("record of '" + r.individual_id + "' has " +
                      std::to_string(r.labels.size()) + " label slots, schema has " +
                      std::to_string(schema_.size()));
    }
    if (i > 0 && records_[i - 1].individual_id == r.individual_id &&
        records_[i - 1].timestamp == r.timestamp) {
      throw LoadError("duplicate timestamp " + std::to_string(r.timestamp) +
                      " for individual '" + r.individual_id + "'");
    }
  }
  std::size_t begin = 0;
  for (std::size_t i = 1; i <= records_.size(); ++i) {
    if (i == records_.size() || records_[i].individual_id != records_[begin].individual_id) {
      groups_.emplace_back(begin, i);
      begin = i;
    }
  }
}

Eigen::MatrixXd Dataset::feature_matrix() const {
  Eigen::MatrixXd X(static_cast<Eigen::Index>(records_.size()), static_cast<Eigen::Index>(dim_));
  for (std::size_t i = 0; i < records_.size(); ++i) {
    X.row(static_cast<Eigen::Index>(i)) = records_[i].features.transpose();
  }
  return X;
}

Dataset Dataset::select_individuals(std::span<const std::string> ids) const {
  const std::set<std::string> wanted(ids.begin(), ids.end());
  std::vector<ObservationRecord> out;
  for (const auto& r : records_) {
    if (wanted.count(r.individual_id)) out.push_back(r);
  }
  return Dataset(schema_, std::move(out));
}

Dataset load_dataset(const std::filesystem::path& csv_path, const Schema& schema) {
  validate_schema(schema);
  std::ifstream in(csv_path);
  if (!in) throw LoadError("cannot open dataset " + csv_path.string());

  std::string line;
  if (!std::getline(in, line)) throw LoadError(csv_path.string() + ": empty file");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  auto header = split_csv_line(line);
  for (auto& h : header) h = trim(h);

  if (header.size() < 2 || header[0] != "individual_id" || header[1] != "timestamp") {
    throw LoadError(csv_path.string() +
                    ": header must start with 'individual_id,timestamp' (row 1)");
  }
  std::size_t d = 0;
  while (2 + d < header.size() && header[2 + d] == "f_" + std::to_string(d)) ++d;
  if (d == 0) throw LoadError(csv_path.string() + ": no feature columns f_0.. in header (row 1)");

  std::map<std::string, std::size_t> task_index;
  for (std::size_t t = 0; t < schema.size(); ++t) task_index[schema[t].name] = t;
  std::vector<std::size_t> column_task;  // header column (after features) -> task
  std::set<std::size_t> seen;
  for (std::size_t c = 2 + d; c < header.size(); ++c) {
    auto it = task_index.find(header[c]);
    if (it == task_index.end()) {
      throw LoadError(csv_path.string() + ": unknown column '" + header[c] + "' (row 1, column " +
                      std::to_string(c + 1) + ")");
    }
    if (!seen.insert(it->second).second) {
      throw LoadError(csv_path.string() + ": duplicate column '" + header[c] + "' (row 1)");
    }
    column_task.push_back(it->second);
  }
  if (seen.size() != schema.size()) {
    for (const auto& t : schema) {
      if (!seen.count(task_index[t.name])) {
        throw LoadError(csv_path.string() + ": missing label column '" + t.name + "' (row 1)");
      }
    }
  }

  std::vector<ObservationRecord> records;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    auto cells = split_csv_line(line);
    const std::string where = csv_path.string() + ": row " + std::to_string(row);
    if (cells.size() != header.size()) {
      throw LoadError(where + ": expected " + std::to_string(header.size()) + " cells, got " +
                      std::to_string(cells.size()));
    }
    ObservationRecord r;
    r.individual_id = trim(cells[0]);
    if (r.individual_id.empty()) throw LoadError(where + ", column individual_id: empty");
    if (!parse_int(trim(cells[1]), r.timestamp)) {
      throw LoadError(where + ", column timestamp: not an integer '" + cells[1] + "'");
    }
    r.features.resize(static_cast<Eigen::Index>(d));
    for (std::size_t k = 0; k < d; ++k) {
      double v = 0.0;
      const std::string cell = trim(cells[2 + k]);
      if (!parse_double(cell, v) || !std::isfinite(v)) {
        throw LoadError(where + ", column " + header[2 + k] + ": invalid feature '" + cell + "'");
      }
      r.features[static_cast<Eigen::Index>(k)] = v;
    }
    r.labels = LabelMatrix(schema.size());
    for (std::size_t c = 0; c < column_task.size(); ++c) {
      const std::string cell = trim(cells[2 + d + c]);
      if (cell.empty()) continue;
      double v = 0.0;
      if (!parse_double(cell, v) || !std::isfinite(v)) {
        throw LoadError(where + ", column " + header[2 + d + c] + ": invalid label '" + cell + "'");
      }
      r.labels.set(column_task[c], v);
    }
    records.push_back(std::move(r));
  }

  // Report duplicates with file rows before the constructor sorts them away.
  std::map<std::pair<std::string, std::int64_t>, std::size_t> first_row;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto key = std::make_pair(records[i].individual_id, records[i].timestamp);
    auto [it, inserted] = first_row.emplace(key, i);
    if (!inserted) {
      throw LoadError(csv_path.string() + ": duplicate (individual_id, timestamp) = ('" +
                      key.first + "', " + std::to_string(key.second) + ") at data rows " +
                      std::to_string(it->second + 1) + " and " + std::to_string(i + 1));
    }
  }
  return Dataset(schema, std::move(records));
}

void save_dataset(const Dataset& dataset, const std::filesystem::path& csv_path) {
  std::ofstream out(csv_path);
  if (!out) throw LoadError("cannot write dataset " + csv_path.string());
  out << "individual_id,timestamp";
  for (std::size_t k = 0; k < dataset.dim(); ++k) out << ",f_" << k;
  for (const auto& t : dataset.schema()) out << ',' << t.name;
  out << '\n';
  for (const auto& r : dataset.records()) {
    out << r.individual_id << ',' << r.timestamp;
    for (Eigen::Index k = 0; k < r.features.size(); ++k) out << ',' << format_double(r.features[k]);
    for (std::size_t t = 0; t < r.labels.size(); ++t) {
      out << ',';
      if (r.labels.observed[t]) out << format_double(r.labels.values[t]);
    }
    out << '\n';
  }
  if (!out) throw LoadError("write failed for " + csv_path.string());
}

Dataset impute_nearest(const Dataset& dataset) {
  std::vector<ObservationRecord> records(dataset.records().begin(), dataset.records().end());
  const auto& schema = dataset.schema();
  for (const auto& [begin, end] : dataset.individuals()) {
    for (std::size_t t = 0; t < schema.size(); ++t) {
      if (schema[t].kind != TaskKind::expert) continue;
      std::vector<std::size_t> donors;
      for (std::size_t i = begin; i < end; ++i) {
        if (dataset[i].labels.present[t]) donors.push_back(i);
      }
      if (donors.empty()) continue;
      for (std::size_t i = begin; i < end; ++i) {
        if (dataset[i].labels.present[t]) continue;
        const std::int64_t ti = dataset[i].timestamp;
        // Donors are in increasing time, so a strict comparison keeps the
        // earlier one on ties.
        std::size_t best = donors.front();
        std::int64_t best_gap = std::abs(dataset[best].timestamp - ti);
        for (std::size_t j : donors) {
          const std::int64_t gap = std::abs(dataset[j].timestamp - ti);
          if (gap < best_gap) {
            best = j;
            best_gap = gap;
          }
        }
        records[i].labels.values[t] = dataset[best].labels.values[t];
        records[i].labels.present[t] = true;
      }
    }
  }
  return Dataset(schema, std::move(records));
}

Dataset compute_gradient_labels(const Dataset& dataset) {
  std::vector<ObservationRecord> records(dataset.records().begin(), dataset.records().end());
  const auto& schema = dataset.schema();
  for (std::size_t g = 0; g < schema.size(); ++g) {
    if (!is_gradient(schema[g].kind)) continue;
    const std::size_t src = *schema[g].source_task;
    const bool forward = schema[g].kind == TaskKind::gradient_forward;
    for (const auto& [begin, end] : dataset.individuals()) {
      for (std::size_t i = begin; i < end; ++i) {
        auto& slot = records[i].labels;
        if (!dataset[i].labels.present[src]) {
          slot.present[g] = slot.observed[g];
          continue;
        }
        const bool boundary = forward ? (i + 1 == end) : (i == begin);
        double rate = 0.0;
        if (!boundary) {
          const std::size_t j = forward ? i + 1 : i - 1;
          if (!dataset[j].labels.present[src]) {
            slot.present[g] = slot.observed[g];
            continue;
          }
          const auto& later = forward ? dataset[j] : dataset[i];
          const auto& earlier = forward ? dataset[i] : dataset[j];
          rate = (later.labels.values[src] - earlier.labels.values[src]) /
                 static_cast<double>(later.timestamp - earlier.timestamp);
        }
        slot.values[g] = rate;
        slot.present[g] = true;
      }
    }
  }
  return Dataset(schema, std::move(records));
}

Standardizer Standardizer::fit(const Eigen::MatrixXd& features) {
  Standardizer s;
  const auto n = features.rows();
  s.mean = features.colwise().mean().transpose();
  s.scale = Eigen::VectorXd::Ones(features.cols());
  if (n > 1) {
    const Eigen::MatrixXd centered = features.rowwise() - s.mean.transpose();
    for (Eigen::Index c = 0; c < features.cols(); ++c) {
      const double sd = std::sqrt(centered.col(c).squaredNorm() / static_cast<double>(n));
      if (sd > 1e-12) s.scale[c] = sd;
    }
  }
  return s;
}

Standardizer Standardizer::identity(std::size_t d) {
  return {Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d)),
          Eigen::VectorXd::Ones(static_cast<Eigen::Index>(d))};
}

Eigen::MatrixXd Standardizer::apply(const Eigen::MatrixXd& features) const {
  return (features.rowwise() - mean.transpose()).array().rowwise() / scale.transpose().array();
}

Eigen::VectorXd Standardizer::apply(const Eigen::VectorXd& x) const {
  return ((x - mean).array() / scale.array()).matrix();
}

Split split_by_individual(const Dataset& dataset, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction <= 1.0)) {
    throw ConfigError("train fraction must be in (0, 1]");
  }
  std::vector<std::string> ids;
  for (const auto& [begin, end] : dataset.individuals()) ids.push_back(dataset[begin].individual_id);
  Rng rng(mix_seed(seed, 0x5b17));
  rng.shuffle(ids);
  std::size_t n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(ids.size())));
  if (ids.size() >= 2) n_train = std::clamp<std::size_t>(n_train, 1, ids.size() - (train_fraction < 1.0 ? 1 : 0));
  Split s;
  s.train_individuals.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.test_individuals.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  std::sort(s.train_individuals.begin(), s.train_individuals.end());
  std::sort(s.test_individuals.begin(), s.test_individuals.end());
  s.train = dataset.select_individuals(s.train_individuals);
  s.test = dataset.select_individuals(s.test_individuals);
  return s;
}

}  // namespace mtml
