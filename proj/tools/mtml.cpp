// mtml: generate synthetic data, train, evaluate, embed and sweep.
//
// Exit codes: 0 success, 1 usage or I/O error, 2 inadmissible mining
// configuration (n too strict), 3 numerical divergence.

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <string>

#include "mtml/dataset.hpp"
#include "mtml/error.hpp"
#include "mtml/evaluation.hpp"
#include "mtml/synthgen.hpp"
#include "mtml/trainer.hpp"

namespace fs = std::filesystem;
using namespace mtml;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitTooStrict = 2;
constexpr int kExitDiverged = 3;

struct Options {
  std::string config;
  std::string data;
  std::string schema;
  std::string out;
  std::string checkpoint;
  std::string truth;
  std::string resume;
  std::string split = "test";
  std::optional<std::uint64_t> seed;
  unsigned jobs = 1;
  bool verbose = false;
};

nlohmann::json read_json(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open config " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw LoadError(path + ": parse error at byte " + std::to_string(e.byte));
  }
}

fs::path schema_path(const Options& o) {
  if (!o.schema.empty()) return o.schema;
  return fs::path(o.data).parent_path() / "schema.json";
}

// Load -> nearest-observation imputation -> gradient labels.
Dataset prepared_dataset(const Options& o) {
  if (o.data.empty()) throw ConfigError("--data is required");
  const Schema schema = load_schema(schema_path(o));
  return compute_gradient_labels(impute_nearest(load_dataset(o.data, schema)));
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw LoadError("cannot create output directory " + dir.string());
}

int run_gen(const Options& o) {
  SynthConfig config = synth_config_from_json(read_json(o.config));
  if (o.seed) config.seed = *o.seed;
  const fs::path out = o.out.empty() ? fs::path(".") : fs::path(o.out);
  ensure_dir(out);
  const SynthOutput result = generate(config);
  save_dataset(result.dataset, out / "dataset.csv");
  save_schema(result.dataset.schema(), out / "schema.json");
  result.truth.save(out / "ground_truth.json");

  std::cout << "records " << result.dataset.size() << " individuals " << result.dataset.individuals().size()
            << " d " << result.dataset.dim() << '\n';
  const auto& schema = result.dataset.schema();
  for (std::size_t t = 0; t < schema.size(); ++t) {
    std::size_t missing = 0;
    for (const auto& r : result.dataset.records()) missing += r.labels.observed[t] ? 0 : 1;
    std::cout << "  " << schema[t].name << " missing " << missing << '/' << result.dataset.size() << '\n';
  }
  return kExitOk;
}

int run_train(const Options& o) {
  TrainConfig config = train_config_from_json(read_json(o.config));
  if (o.seed) config.seed = *o.seed;
  const fs::path out = o.out.empty() ? fs::path(".") : fs::path(o.out);
  ensure_dir(out);
  const Dataset data = prepared_dataset(o);

  TrainState state;
  Dataset train_set;
  if (!o.resume.empty()) {
    state = load_checkpoint(o.resume);
    const int target_epochs = config.epochs;
    std::vector<std::string> train_ids;
    for (const auto& [b, e] : data.individuals()) {
      const auto& id = data[b].individual_id;
      if (std::find(state.test_individuals.begin(), state.test_individuals.end(), id) == state.test_individuals.end()) {
        train_ids.push_back(id);
      }
    }
    train_set = data.select_individuals(train_ids);
    state.config.epochs = std::max(target_epochs, state.epochs_done);
  } else {
    const Split split = split_by_individual(data, config.train_fraction, config.seed);
    train_set = split.train;
    state = initialize_training(train_set, config);
    state.test_individuals = split.test_individuals;
  }
  if (o.verbose) {
    std::cerr << "training on " << train_set.size() << " records, " << state.test_individuals.size()
              << " held-out individuals, l=" << state.model.params.embed_dim() << '\n';
  }

  TrainOptions options;
  options.checkpoint_dir = out;
  bool warned = false;
  options.on_epoch = [&warned](const EpochStats& e) {
    std::cout << to_json(e).dump() << std::endl;
    if (e.triplets == 0 && !warned) {
      std::cerr << "warning: epoch " << e.epoch
                << " mined no triplets (no in-batch negatives at this n); raise n or exclude tasks from matching\n";
      warned = true;
    }
  };
  continue_training(state, train_set, options);

  save_checkpoint(state, out / "checkpoint.json");
  nlohmann::json history = nlohmann::json::array();
  for (const auto& e : state.history.epochs) history.push_back(to_json(e));
  std::ofstream(out / "history.json") << history.dump(2) << '\n';
  return kExitOk;
}

TrainState checkpoint_for(const Options& o, const Dataset& data) {
  if (o.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  TrainState state = load_checkpoint(o.checkpoint);
  const std::string data_hash = schema_hash(data.schema());
  if (data_hash != state.model.schema_hash) {
    throw ConfigError("schema hash mismatch: checkpoint " + state.model.schema_hash + ", dataset " + data_hash);
  }
  return state;
}

int run_eval(const Options& o) {
  const Dataset data = prepared_dataset(o);
  const TrainState state = checkpoint_for(o, data);
  Dataset test = data;
  if (o.split == "test" && !state.test_individuals.empty()) {
    test = data.select_individuals(state.test_individuals);
  } else if (o.split != "test" && o.split != "all") {
    throw ConfigError("--split must be 'test' or 'all'");
  }
  std::optional<GroundTruth> truth;
  if (!o.truth.empty()) truth = GroundTruth::load(o.truth);
  EvalOptions options;
  options.truth = truth ? &*truth : nullptr;
  if (o.seed) options.seed = *o.seed;
  const std::string text = evaluate(state, test, options).to_json().dump(2);
  if (o.out.empty()) {
    std::cout << text << '\n';
  } else {
    std::ofstream out(o.out);
    if (!out) throw LoadError("cannot write " + o.out);
    out << text << '\n';
  }
  return kExitOk;
}

int run_embed(const Options& o) {
  const Dataset data = prepared_dataset(o);
  const TrainState state = checkpoint_for(o, data);
  const Eigen::MatrixXd emb = state.model.embed_dataset(data);
  std::ofstream file;
  if (!o.out.empty()) {
    file.open(o.out);
    if (!file) throw LoadError("cannot write " + o.out);
  }
  std::ostream& out = o.out.empty() ? std::cout : file;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto row = emb.row(static_cast<Eigen::Index>(i));
    std::vector<double> values(static_cast<std::size_t>(row.size()));
    for (Eigen::Index k = 0; k < row.size(); ++k) values[static_cast<std::size_t>(k)] = row[k];
    const nlohmann::json j{{"individual_id", data[i].individual_id},
                           {"timestamp", data[i].timestamp},
                           {"embedding", values}};
    out << j.dump() << '\n';
  }
  return kExitOk;
}

int run_sweep(const Options& o) {
  const nlohmann::json raw = read_json(o.config);
  nlohmann::json train_part = raw;
  train_part.erase("grid");
  TrainConfig config = train_config_from_json(train_part);
  if (o.seed) config.seed = *o.seed;
  const SweepGrid grid = raw.contains("grid") ? sweep_grid_from_json(raw["grid"]) : SweepGrid{};
  const fs::path out = o.out.empty() ? fs::path(".") : fs::path(o.out);
  ensure_dir(out);
  const Dataset data = prepared_dataset(o);
  SweepOptions options;
  options.jobs = o.jobs;
  const SweepResult result = sweep(data, config, grid, options);
  write_sweep(result, out);
  std::cout << result.n_table << '\n' << result.alpha_table;
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task metric learning on the Stiefel manifold"};
  app.require_subcommand(1);
  Options o;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON configuration file")->check(CLI::ExistingFile);
    sub->add_option("--out", o.out, "Output path");
    sub->add_option("--seed", o.seed, "Seed override");
    sub->add_flag("--verbose", o.verbose, "Extra diagnostics on stderr");
  };
  auto add_data = [&](CLI::App* sub) {
    sub->add_option("--data", o.data, "Dataset CSV")->required()->check(CLI::ExistingFile);
    sub->add_option("--schema", o.schema, "Schema JSON (default: schema.json next to the data)");
  };

  auto* gen = app.add_subcommand("gen", "Generate a synthetic dataset, schema and ground truth");
  add_common(gen);

  auto* train = app.add_subcommand("train", "Train a metric and write checkpoints");
  add_common(train);
  add_data(train);
  train->add_option("--resume", o.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint (report JSON)");
  add_common(eval);
  add_data(eval);
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint JSON")->required()->check(CLI::ExistingFile);
  eval->add_option("--truth", o.truth, "Ground-truth JSON from gen")->check(CLI::ExistingFile);
  eval->add_option("--split", o.split, "'test' (held-out individuals) or 'all'");

  auto* embed = app.add_subcommand("embed", "Write one embedding per record as JSON lines");
  add_common(embed);
  add_data(embed);
  embed->add_option("--checkpoint", o.checkpoint, "Checkpoint JSON")->required()->check(CLI::ExistingFile);

  auto* sweep = app.add_subcommand("sweep", "Train over an n x alpha grid and tabulate");
  add_common(sweep);
  add_data(sweep);
  sweep->add_option("--jobs", o.jobs, "Parallel grid cells")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return run_gen(o);
    if (*train) return run_train(o);
    if (*eval) return run_eval(o);
    if (*embed) return run_embed(o);
    if (*sweep) return run_sweep(o);
  } catch (const NTooStrictError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitTooStrict;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << " (periodic checkpoints in the output directory are kept)\n";
    return kExitDiverged;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}
