#include <doctest.h>

#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>

#include "mtml/trainer.hpp"
#include "test_util.hpp"

using namespace mtml;
using namespace mtml::testing;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run run(const TempDir& dir, const std::string& args) {
  const fs::path out = dir / "stdout.txt";
  const fs::path err = dir / "stderr.txt";
  const std::string cmd = std::string("cd '") + dir.path().string() + "' && '" MTML_CLI_PATH "' " + args + " > '" +
                          out.string() + "' 2> '" + err.string() + "'";
  const int status = std::system(cmd.c_str());
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, read_file(out), read_file(err)};
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

const std::string kSmallGen = R"({"individuals": 10, "steps": 12})";
const std::string kTrain = R"({"epochs": 3, "embedding_dim": 4, "loss": {"lambda_mse": 1.0}, "miner": {"n": 7}})";

}  // namespace

TEST_CASE("gen writes the dataset, schema and ground truth") {
  TempDir dir("cli_gen");
  const Run r = run(dir, "gen --out data");
  REQUIRE(r.code == 0);
  CHECK(line_count(read_file(dir / "data/dataset.csv")) == 40 * 20 + 1);
  CHECK(fs::exists(dir / "data/schema.json"));
  CHECK(fs::exists(dir / "data/ground_truth.json"));
  CHECK(r.out.find("records 800") != std::string::npos);
  CHECK(r.out.find("missing") != std::string::npos);

  REQUIRE(run(dir, "gen --out again").code == 0);
  CHECK(read_file(dir / "data/dataset.csv") == read_file(dir / "again/dataset.csv"));
  CHECK(read_file(dir / "data/ground_truth.json") == read_file(dir / "again/ground_truth.json"));

  REQUIRE(run(dir, "gen --out other --seed 99").code == 0);
  CHECK(read_file(dir / "data/dataset.csv") != read_file(dir / "other/dataset.csv"));

  write_file(dir / "g.json", kSmallGen);
  REQUIRE(run(dir, "gen --config g.json --out small").code == 0);
  CHECK(line_count(read_file(dir / "small/dataset.csv")) == 10 * 12 + 1);
}

TEST_CASE("usage errors exit with 1") {
  TempDir dir("cli_usage");
  CHECK(run(dir, "").code == 1);
  CHECK(run(dir, "frobnicate").code == 1);
  CHECK(run(dir, "train").code == 1);                      // --data missing
  CHECK(run(dir, "train --data nope.csv").code == 1);      // file missing
  write_file(dir / "bad.json", "{\"individuals\": 0}");
  CHECK(run(dir, "gen --config bad.json --out x").code == 1);
  write_file(dir / "broken.json", "{\"epochs\": ");
  CHECK(run(dir, "gen --config broken.json --out x").code == 1);
  CHECK(run(dir, "--help").code == 0);
}

TEST_CASE("train, eval and embed end to end") {
  TempDir dir("cli_train");
  write_file(dir / "g.json", kSmallGen);
  write_file(dir / "t.json", kTrain);
  REQUIRE(run(dir, "gen --config g.json --out data").code == 0);

  const Run t = run(dir, "train --config t.json --data data/dataset.csv --out run");
  REQUIRE(t.code == 0);
  CHECK(line_count(t.out) == 3);
  CHECK(nlohmann::json::parse(t.out.substr(0, t.out.find('\n')))["epoch"] == 1);
  const TrainState state = load_checkpoint(dir / "run/checkpoint.json");
  CHECK(state.epochs_done == 3);
  CHECK(state.model.params.embed_dim() == 4);
  CHECK(nlohmann::json::parse(read_file(dir / "run/history.json")).size() == 3);

  SUBCASE("rerun is identical") {
    REQUIRE(run(dir, "train --config t.json --data data/dataset.csv --out run2").code == 0);
    CHECK(read_file(dir / "run/checkpoint.json").size() > 0);
    const TrainState again = load_checkpoint(dir / "run2/checkpoint.json");
    CHECK(again.model.params.L == state.model.params.L);
    CHECK(again.history.same_trajectory(state.history));
  }
  SUBCASE("resume continues to the configured epoch count") {
    write_file(dir / "t6.json", R"({"epochs": 6, "embedding_dim": 4, "loss": {"lambda_mse": 1.0}, "miner": {"n": 7}})");
    REQUIRE(run(dir, "train --config t6.json --data data/dataset.csv --out full").code == 0);
    REQUIRE(run(dir, "train --config t6.json --data data/dataset.csv --resume run/checkpoint.json --out resumed").code == 0);
    const TrainState full = load_checkpoint(dir / "full/checkpoint.json");
    const TrainState resumed = load_checkpoint(dir / "resumed/checkpoint.json");
    CHECK(resumed.epochs_done == 6);
    CHECK(resumed.model.params.L == full.model.params.L);
    CHECK(resumed.history.same_trajectory(full.history));
  }
  SUBCASE("eval prints a populated report") {
    const Run e = run(dir, "eval --data data/dataset.csv --checkpoint run/checkpoint.json --truth data/ground_truth.json");
    REQUIRE(e.code == 0);
    const auto j = nlohmann::json::parse(e.out);
    CHECK(j["precision_at_k"].contains("1"));
    CHECK(j["heads"].size() == 3);
    CHECK_FALSE(j["change"].is_null());
    CHECK_FALSE(j["mean_test_loss"].is_null());
    CHECK_FALSE(j["triplet_satisfaction"].is_null());
    REQUIRE(run(dir, "eval --data data/dataset.csv --checkpoint run/checkpoint.json --out report.json").code == 0);
    CHECK(nlohmann::json::parse(read_file(dir / "report.json"))["test_records"] == 24);
    CHECK(run(dir, "eval --data data/dataset.csv --checkpoint run/checkpoint.json --split all --out all.json").code == 0);
    CHECK(nlohmann::json::parse(read_file(dir / "all.json"))["test_records"] == 120);
    CHECK(run(dir, "eval --data data/dataset.csv --checkpoint run/checkpoint.json --split nope").code == 1);
  }
  SUBCASE("embed writes one line per record") {
    REQUIRE(run(dir, "embed --data data/dataset.csv --checkpoint run/checkpoint.json --out emb.jsonl").code == 0);
    const std::string text = read_file(dir / "emb.jsonl");
    CHECK(line_count(text) == 120);
    const auto first = nlohmann::json::parse(text.substr(0, text.find('\n')));
    CHECK(first["embedding"].size() == 4);
    CHECK(first["individual_id"] == "ind_000");
  }
  SUBCASE("schema mismatch is refused with both hashes") {
    std::string text = read_file(dir / "data/schema.json");
    const auto pos = text.find("auto_0");
    REQUIRE(pos != std::string::npos);
    text.replace(pos, 6, "auto_9");
    fs::create_directories(dir / "other");
    write_file(dir / "other/schema.json", text);
    std::string csv = read_file(dir / "data/dataset.csv");
    csv.replace(csv.find("auto_0"), 6, "auto_9");
    write_file(dir / "other/dataset.csv", csv);
    const Run e = run(dir, "eval --data other/dataset.csv --checkpoint run/checkpoint.json");
    CHECK(e.code == 1);
    CHECK(e.err.find("schema hash mismatch") != std::string::npos);
    CHECK(e.err.find(state.model.schema_hash) != std::string::npos);
    CHECK(run(dir, "embed --data other/dataset.csv --checkpoint run/checkpoint.json").code == 1);
  }
}

TEST_CASE("impossible n exits with 2") {
  TempDir dir("cli_strict");
  write_file(dir / "g.json", kSmallGen);
  write_file(dir / "t.json", R"({"epochs": 2, "embedding_dim": 4, "miner": {"n": 10}})");
  REQUIRE(run(dir, "gen --config g.json --out data").code == 0);
  const Run r = run(dir, "train --config t.json --data data/dataset.csv --out run");
  CHECK(r.code == 2);
  CHECK(r.err.find("n too strict") != std::string::npos);
  CHECK(r.err.find("admissible") != std::string::npos);
}

TEST_CASE("divergence exits with 3 and keeps earlier checkpoints") {
  TempDir dir("cli_diverge");
  write_file(dir / "g.json", kSmallGen);
  write_file(dir / "t.json",
             R"({"epochs": 20, "embedding_dim": 4, "lr": 1e6, "constrain_r": false, "checkpoint_every": 1,
                 "miner": {"n": 7}})");
  REQUIRE(run(dir, "gen --config g.json --out data").code == 0);
  const Run r = run(dir, "train --config t.json --data data/dataset.csv --out run");
  CHECK(r.code == 3);
  CHECK(r.err.find("diverged at epoch") != std::string::npos);
  CHECK(fs::exists(dir / "run/checkpoint_epoch_0001.json"));
  CHECK(load_checkpoint(dir / "run/checkpoint_epoch_0001.json").epochs_done == 1);
  CHECK_FALSE(fs::exists(dir / "run/checkpoint.json"));
}

TEST_CASE("a training run that mines nothing warns") {
  TempDir dir("cli_warn");
  write_file(dir / "g.json", kSmallGen);
  write_file(dir / "t.json", R"({"epochs": 1, "embedding_dim": 4, "miner": {"n": 0}})");
  REQUIRE(run(dir, "gen --config g.json --out data").code == 0);
  const Run r = run(dir, "train --config t.json --data data/dataset.csv --out run");
  CHECK(r.code == 0);
  CHECK(r.err.find("mined no triplets") != std::string::npos);
}

TEST_CASE("sweep writes both tables with an inadmissible cell marked") {
  TempDir dir("cli_sweep");
  write_file(dir / "g.json", kSmallGen);
  write_file(dir / "s.json",
             R"({"epochs": 2, "embedding_dim": 4, "grid": {"n": [5, 9, 10], "alpha": [40, 45]}})");
  REQUIRE(run(dir, "gen --config g.json --out data").code == 0);
  const Run r = run(dir, "sweep --config s.json --data data/dataset.csv --out sw --jobs 2");
  REQUIRE(r.code == 0);
  const std::string n_table = read_file(dir / "sw/n_sweep.csv");
  CHECK(n_table.rfind("Network \\ n,5,9,10\nOPML,", 0) == 0);
  CHECK(n_table.find("n too strict") != std::string::npos);
  CHECK(read_file(dir / "sw/alpha_sweep.csv").rfind("loss \\ \xCE\xB1,40\xC2\xB0,45\xC2\xB0\n", 0) == 0);
  CHECK(fs::exists(dir / "sw/n_sweep_precision.csv"));
  CHECK(fs::exists(dir / "sw/alpha_sweep_precision.csv"));
  CHECK(fs::exists(dir / "sw/cells/n_5.json"));

  REQUIRE(run(dir, "sweep --config s.json --data data/dataset.csv --out sw2").code == 0);
  CHECK(read_file(dir / "sw2/n_sweep.csv") == n_table);
  CHECK(read_file(dir / "sw2/alpha_sweep_precision.csv") == read_file(dir / "sw/alpha_sweep_precision.csv"));
}
