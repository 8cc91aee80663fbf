#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>

#include <unistd.h>

#include "harness/config.hpp"
#include "harness/files.hpp"
#include "harness/pipeline.hpp"

using namespace dar;
using namespace dar::harness;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

const char* kTinyConfig = R"(# tiny pipeline
[data]
image_height = 16
image_width = 8
train = 160
target = 32
val = 32
test = 64
noise_core = 0.3
core_jitter = 1
seed = 7

[erm]
epochs = 2
batch_size = 32

[retrain]
epochs = 3
batch_size = 16

[metrics]
cep_examples = 24
heatmaps = 16
)";

ExperimentConfig tiny_config(const std::string& extra = "") {
  return parse_config(std::string(kTinyConfig) + extra, "tiny.toml");
}

std::string config_error(const std::string& text) {
  try {
    parse_config(text, "bad.toml");
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("dar_harness_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

struct GridRow {
  std::size_t cell;
  double minority, average;
};

std::vector<GridRow> read_grid_csv(const fs::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  std::getline(in, line);
  std::vector<GridRow> rows;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream s(line);
    for (std::string c; std::getline(s, c, ',');) cells.push_back(c);
    REQUIRE(cells.size() == 9);
    const auto num = [](const std::string& v) {
      return v == "-inf" ? -std::numeric_limits<double>::infinity() : std::stod(v);
    };
    rows.push_back({std::stoul(cells[0]), num(cells[6]), num(cells[7])});
  }
  return rows;
}

}  // namespace

TEST_CASE("key-value parser: sections, comments, quotes and lists") {
  const auto kv = parse_key_values("top = 1\n[a]\n x = \"hi # there\"  # trailing\n\ny = [1, 2, 3]\n", "f");
  CHECK(kv.entries.at("top").value == "1");
  CHECK(kv.entries.at("a.x").value == "hi # there");
  CHECK(kv.entries.at("a.x").line == 3);
  CHECK(kv.entries.at("a.y").value == "[1, 2, 3]");
  CHECK(kv.entries.at("a.y").line == 5);
}

TEST_CASE("key-value parser: syntax errors carry the line") {
  auto message = [](const std::string& text) {
    try {
      parse_key_values(text, "f.toml");
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message("[data]\nclasses 4\n").find("f.toml:2") != std::string::npos);
  CHECK(message("[data\n").find("f.toml:1") != std::string::npos);
  const auto dup = message("[data]\nclasses = 4\nclasses = 3\n");
  CHECK(dup.find("f.toml:3") != std::string::npos);
  CHECK(dup.find("line 2") != std::string::npos);
}

TEST_CASE("config errors name the field and line") {
  const auto range = config_error("[model]\nmethod = \"ERM\"\n[data]\nspurious_strength = 1.5\n");
  CHECK(range.find("bad.toml:4") != std::string::npos);
  CHECK(range.find("data.spurious_strength") != std::string::npos);

  const auto unknown = config_error("[data]\nclases = 4\n");
  CHECK(unknown.find("bad.toml:2") != std::string::npos);
  CHECK(unknown.find("data.clases") != std::string::npos);

  const auto method = config_error("[model]\nmethod = GAP\n");
  CHECK(method.find("model.method") != std::string::npos);
  CHECK(method.find("bad.toml:2") != std::string::npos);

  CHECK(config_error("[erm]\nbatch_size = -3\n").find("erm.batch_size") != std::string::npos);
  CHECK(config_error("[erm]\nlr = fast\n").find("erm.lr") != std::string::npos);
  CHECK(config_error("[dar]\nheads = 3\n[model]\nmethod = DAR\n").find("dar.heads") != std::string::npos);
  CHECK(config_error("[retrain]\nwarm_start = true\n[model]\nmethod = DAR\n").find("retrain.warm_start") !=
        std::string::npos);
  CHECK(config_error("[run]\nseeds = []\n").find("run.seeds") != std::string::npos);
  CHECK(config_error("[run]\ncheckpoint = \"x.ckpt\"\n").find("run.checkpoint") != std::string::npos);
}

TEST_CASE("config echo materializes every default and round-trips") {
  const ExperimentConfig defaults = parse_config("", "empty");
  const auto echo = defaults.echo();
  for (const char* key : {"noise_core", "spurious_strength", "preset", "queries", "positional", "reg_type",
                          "warm_start", "seeds", "cep_donors", "heatmaps"})
    CHECK(echo.find(key) != std::string::npos);
  CHECK(parse_config(echo, "echo").echo() == echo);

  const auto custom = tiny_config("[model]\nmethod = DAR\n[dar]\nqueries = 3\nlayers = 1\n[grid]\nlr = [0.1, 0.01]\n");
  CHECK(parse_config(custom.echo(), "echo").echo() == custom.echo());
}

TEST_CASE("ERM_Core removes the label information of the spurious panel") {
  auto cfg = tiny_config("[model]\nmethod = ERM_Core\n");
  CHECK(cfg.effective_data().spurious_strength == doctest::Approx(0.25));
  const auto data = make_dataset(cfg);
  std::vector<std::size_t> counts(16, 0);
  for (const auto& ex : data.train.examples) ++counts[ex.label * 4 + ex.attribute];
  for (auto c : counts) CHECK(c == 10);
  cfg.method = Method::erm;
  CHECK(cfg.effective_data().spurious_strength == doctest::Approx(0.95));
}

TEST_CASE("run is bitwise reproducible apart from timing") {
  TempDir tmp("determinism");
  const auto cfg = tiny_config("[model]\nmethod = DFR\n[run]\nseeds = [0, 1]\n");
  const auto a = run_experiment(cfg, tmp.path / "a");
  const auto b = run_experiment(cfg, tmp.path / "b");
  CHECK(without_timing(a).dump() == without_timing(b).dump());
  CHECK(a.contains("timing"));
  CHECK(a.at("config") == cfg.echo());
  CHECK(a.at("aggregate").contains("test.minority"));
  const auto files = a.at("files").get<std::vector<std::string>>();
  for (const char* f : {"config.toml", "seed_0/model.ckpt", "seed_0/base.ckpt", "seed_0/history.csv",
                        "seed_1/cep_prediction.csv", "seed_1/cap.csv", "seed_1/heatmaps/sample_15.pgm"})
    CHECK(std::find(files.begin(), files.end(), f) != files.end());
  CHECK(read_text_file(tmp.path / "a" / "seed_0" / "model.ckpt") ==
        read_text_file(tmp.path / "b" / "seed_0" / "model.ckpt"));
  // The echoed config alone reconstructs the run.
  CHECK(parse_config(read_text_file(tmp.path / "a" / "config.toml"), "echo").echo() == cfg.echo());
}

TEST_CASE("retraining from a saved base equals retraining in one go") {
  TempDir tmp("checkpoint");
  const auto cfg = tiny_config("[model]\nmethod = DAR\n");
  const auto full = run_experiment(cfg, tmp.path / "full");
  TrainOptions opt;
  opt.checkpoint = (tmp.path / "full" / "seed_0" / "base.ckpt").string();
  const auto resumed = run_experiment(cfg, tmp.path / "resumed", opt);
  CHECK(full.at("seeds").dump() == resumed.at("seeds").dump());

  opt.checkpoint = (tmp.path / "nope.ckpt").string();
  CHECK_THROWS_AS(run_experiment(cfg, tmp.path / "missing", opt), MissingFileError);

  auto other = cfg;
  other.data_seed = 8;
  opt.checkpoint = (tmp.path / "full" / "seed_0" / "base.ckpt").string();
  CHECK_THROWS_AS(run_experiment(other, tmp.path / "mismatch", opt), ConfigError);
}

TEST_CASE("single-cell sweep matches the plain run") {
  TempDir tmp("single");
  const auto cfg = tiny_config("[model]\nmethod = DFR\n");
  const auto sweep = run_sweep(cfg, tmp.path / "sweep", 1);
  const auto run = run_experiment(cfg, tmp.path / "run");
  REQUIRE(sweep.at("cells").size() == 1);
  CHECK(read_grid_csv(tmp.path / "sweep" / "grid.csv").size() == 1);
  const auto& cell = sweep.at("best");
  const auto& seed = run.at("seeds").at(0);
  CHECK(cell.at("minority_val").get<double>() == seed.at("metrics").at("val.score").get<double>());
  CHECK(cell.at("best_epoch") == seed.at("best_epoch"));
  for (const auto& [key, value] : cell.at("metrics").items()) CHECK(value == seed.at("metrics").at(key));
}

TEST_CASE("sweep best row is the argmax of its table and resumes from finished cells") {
  TempDir tmp("grid");
  const auto cfg = tiny_config(
      "[model]\nmethod = DFR\n[grid]\nlr = [0.001, 0.01]\nweight_decay = [0.0, 0.001]\nreg_strength = [0.0, 0.01]\n");
  const auto dir = tmp.path / "sweep";
  const auto first = run_sweep(cfg, dir, 2);
  const auto rows = read_grid_csv(dir / "grid.csv");
  REQUIRE(rows.size() == 8);
  std::size_t argmax = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const auto& b = rows[argmax];
    if (r.minority > b.minority || (r.minority == b.minority && r.average > b.average)) argmax = i;
  }
  CHECK(first.at("best_index").get<std::size_t>() == rows[argmax].cell);

  // Simulate a sweep killed after its second cell: keep two cell records,
  // mark them so reuse is observable, and drop the rest.
  std::vector<fs::path> kept;
  for (std::size_t i = 0; i < 8; ++i) {
    const auto cell_dir = dir / "cells" / first.at("cells").at(i).at("hash").get<std::string>();
    if (i < 2) {
      auto cell = json::parse(read_text_file(cell_dir / "cell.json"));
      cell["resumed_marker"] = true;
      write_text_file(cell_dir / "cell.json", cell.dump(2));
      kept.push_back(cell_dir);
    } else {
      fs::remove_all(cell_dir);
    }
  }
  fs::remove(dir / "grid.csv");
  const auto second = run_sweep(cfg, dir, 1);
  for (std::size_t i = 0; i < 8; ++i) {
    auto a = first.at("cells").at(i);
    auto b = second.at("cells").at(i);
    CHECK(b.contains("resumed_marker") == (i < 2));
    b.erase("resumed_marker");
    CHECK(a.dump() == b.dump());
  }
  CHECK(second.at("best_index") == first.at("best_index"));
}

TEST_CASE("diverging sweep cells lose instead of aborting") {
  TempDir tmp("diverge");
  const auto cfg = tiny_config("[grid]\nlr = [1e30, 0.001]\n");
  const auto result = run_sweep(cfg, tmp.path, 1);
  CHECK(result.at("cells").at(0).at("diverged").get<bool>());
  CHECK(result.at("best_index").get<std::size_t>() == 1);
}

TEST_CASE("figures: one ablation row per run, 16 heatmaps per method") {
  TempDir tmp("figures");
  const auto erm = tiny_config("[model]\nmethod = ERM\n");
  const auto dar = tiny_config("[model]\nmethod = DAR\n[run]\nseeds = [0, 1]\n");
  run_experiment(erm, tmp.path / "erm");
  run_experiment(dar, tmp.path / "dar");
  const auto out = tmp.path / "fig";
  const auto manifest = make_figures({tmp.path / "erm", tmp.path / "dar"}, out, 10);

  std::ifstream ablation(out / "ablation.csv");
  std::size_t lines = 0;
  for (std::string line; std::getline(ablation, line);) ++lines;
  CHECK(lines == 1 + 2);
  for (const char* label : {"erm", "dar"}) {
    std::size_t maps = 0;
    for (const auto& e : fs::directory_iterator(out / "heatmaps" / label)) maps += e.path().extension() == ".pgm";
    CHECK(maps == 16);
    for (const char* probe : {"feature", "feature_map", "pixel"})
      CHECK(fs::exists(out / "histograms" / (std::string(label) + "_" + probe + ".csv")));
  }
  CHECK(manifest.at("files").size() == 2 * (3 + 16) + 1);

  fs::remove(tmp.path / "erm" / "seed_0" / "cep_pixel.csv");
  try {
    make_figures({tmp.path / "erm"}, out, 10);
    FAIL("expected a missing-file error");
  } catch (const MissingFileError& e) {
    CHECK(std::string(e.what()).find("cep_pixel.csv") != std::string::npos);
  }
}

TEST_CASE("metrics on a saved checkpoint reproduce the run's numbers") {
  TempDir tmp("metrics");
  const auto cfg = tiny_config();
  const auto run = run_experiment(cfg, tmp.path / "run");
  const auto m = evaluate_checkpoint(cfg, tmp.path / "run" / "seed_0" / "model.ckpt", tmp.path / "eval");
  const auto& expected = run.at("seeds").at(0).at("metrics");
  for (const char* key : {"test.minority", "test.average", "cep.prediction", "cep.pixel", "cap.mean", "cgp"})
    CHECK(m.at("metrics").at(key) == expected.at(key));
}

TEST_CASE("output root override") {
  ::setenv("DAR_OUTPUT_ROOT", "/tmp/dar_root_override", 1);
  CHECK(resolve_output("runs/x") == fs::path("/tmp/dar_root_override/runs/x"));
  CHECK(resolve_output("/abs/dir") == fs::path("/abs/dir"));
  ::unsetenv("DAR_OUTPUT_ROOT");
  CHECK(resolve_output("runs/x") == fs::current_path() / "runs/x");
}

TEST_CASE("shipped example configs parse and validate") {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(DAR_CONFIG_DIR)) {
    if (e.path().extension() != ".toml") continue;
    INFO(e.path().string());
    CHECK_NOTHROW(load_config(e.path()));
    ++n;
  }
  CHECK(n >= 5);
}
