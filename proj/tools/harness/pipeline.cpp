#include "harness/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

#include "dar/error.hpp"
#include "dar/metrics.hpp"
#include "harness/files.hpp"

#ifndef DAR_SOURCE_HASH
#define DAR_SOURCE_HASH "unknown"
#endif

namespace dar::harness {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string seed_dir_name(std::uint64_t seed) { return "seed_" + std::to_string(seed); }

json hp_json(const HyperParams& hp) {
  return {{"lr", hp.lr},
          {"weight_decay", hp.weight_decay},
          {"batch_size", hp.batch_size},
          {"epochs", hp.epochs},
          {"reg_type", to_string(hp.reg_type)},
          {"reg_strength", hp.reg_strength},
          {"sd_lambda", hp.sd_lambda}};
}

HyperParams hp_from_json(const json& j) {
  HyperParams hp;
  hp.lr = j.at("lr").get<double>();
  hp.weight_decay = j.at("weight_decay").get<double>();
  hp.batch_size = j.at("batch_size").get<std::size_t>();
  hp.epochs = j.at("epochs").get<std::size_t>();
  hp.reg_type = parse_reg_type(j.at("reg_type").get<std::string>());
  hp.reg_strength = j.at("reg_strength").get<double>();
  hp.sd_lambda = j.at("sd_lambda").get<double>();
  return hp;
}

HyperParams stage_hp(const ExperimentConfig& config, const TrainOptions& options) {
  if (options.stage_hp) return *options.stage_hp;
  return is_posthoc(config.method) ? config.retrain : config.erm;
}

json summary_json(const ExperimentConfig& config) {
  const auto d = config.effective_data();
  return {{"method", to_string(config.method)},
          {"mode", to_string(d.mode)},
          {"preset", to_string(config.preset)},
          {"spurious_strength", d.spurious_strength},
          {"dar",
           {{"queries", config.dar.queries},
            {"heads", config.dar.heads},
            {"layers", config.dar.layers},
            {"positional", config.dar.positional}}},
          {"erm_sd_lambda", config.erm.sd_lambda}};
}

std::vector<std::string> list_files(const fs::path& root) {
  std::vector<std::string> out;
  if (!fs::exists(root)) return out;
  for (const auto& entry : fs::recursive_directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    const auto rel = fs::relative(entry.path(), root).generic_string();
    if (rel == "report.json") continue;
    out.push_back(rel);
  }
  std::sort(out.begin(), out.end());
  return out;
}

void write_group_csv(const GroupAccuracy& acc, const fs::path& path) {
  std::ostringstream s;
  s.precision(10);
  s << "y,a,count,accuracy\n";
  for (std::size_t y = 0; y < acc.classes; ++y)
    for (std::size_t a = 0; a < acc.classes; ++a) {
      const auto g = y * acc.classes + a;
      s << y << ',' << a << ',' << acc.counts[g] << ',';
      if (acc.counts[g]) s << acc.per_group[g];
      s << '\n';
    }
  write_text_file(path, s.str());
}

void put_accuracy(SeedMetrics& m, const std::string& prefix, const GroupAccuracy& acc) {
  m[prefix + ".minority"] = acc.minority;
  m[prefix + ".majority"] = acc.majority;
  m[prefix + ".average"] = acc.average;
}

json stats_json(const std::map<std::string, SeedStat>& stats) {
  json out = json::object();
  for (const auto& [key, st] : stats) out[key] = {{"mean", st.mean}, {"std", st.std}, {"values", st.values}};
  return out;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream s(line);
  std::string cell;
  while (std::getline(s, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

/// CEP column of a per-element CSV (undefined elements skipped).
std::vector<double> read_cep_column(const fs::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  std::getline(in, line);
  if (line != "element_id,E_core,E_spu,cep") throw FormatError(path.string() + ": unexpected header");
  std::vector<double> values;
  while (std::getline(in, line)) {
    const auto cells = split_csv_line(line);
    if (cells.size() != 4) throw FormatError(path.string() + ": malformed row '" + line + "'");
    if (!cells[3].empty()) values.push_back(std::stod(cells[3]));
  }
  return values;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string source_hash() { return DAR_SOURCE_HASH; }

fs::path output_root() {
  if (const char* env = std::getenv("DAR_OUTPUT_ROOT"); env && *env) return fs::path(env);
  return fs::current_path();
}

fs::path resolve_output(const std::string& dir) {
  const fs::path p(dir);
  return p.is_absolute() ? p : output_root() / p;
}

DatasetSplits make_dataset(const ExperimentConfig& config) {
  return generate(config.effective_data(), config.data_seed);
}

ConfigEcho provenance_echo(const ExperimentConfig& config, std::uint64_t seed) {
  return {{"data.hash", fnv1a_hex(dataset_echo(config.effective_data(), config.data_seed))},
          {"run.seed", std::to_string(seed)},
          {"run.method", to_string(config.method)}};
}

TrainedBundle load_base(const ExperimentConfig& config, const fs::path& path, std::uint64_t seed) {
  require_file(path);
  const auto expected = ConfigEcho{{"data.hash", provenance_echo(config, seed).at("data.hash")}};
  auto loaded = load_checkpoint(path, expected);
  TrainedBundle bundle;
  bundle.model = std::move(loaded.model);
  bundle.seed = seed;
  bundle.method = loaded.echo.count("run.method") ? loaded.echo.at("run.method") : "ERM";
  return bundle;
}

TrainedBundle train_base(const ExperimentConfig& config, const DatasetSplits& data, std::uint64_t seed, bool verbose) {
  ErmOptions opt;
  opt.preset = config.preset;
  opt.merge_target = false;
  opt.method = "ERM_base";
  opt.verbose = verbose;
  return train_erm(data, config.erm, opt, seed);
}

SeedModels train_seed(const ExperimentConfig& config, const DatasetSplits& data, std::uint64_t seed,
                      const TrainOptions& options) {
  const HyperParams hp = stage_hp(config, options);
  SeedModels out;
  if (!is_posthoc(config.method)) {
    ErmOptions opt;
    opt.preset = config.preset;
    opt.merge_target = true;
    opt.method = to_string(config.method);
    opt.verbose = options.verbose;
    if (config.method == Method::sub) opt.sampler = Sampler::subsample;
    if (config.method == Method::rw) opt.sampler = Sampler::reweight;
    out.final = train_erm(data, hp, opt, seed);
    return out;
  }
  const std::string ckpt = options.checkpoint.empty() ? config.checkpoint : options.checkpoint;
  out.base = ckpt.empty() ? train_base(config, data, seed, options.verbose) : load_base(config, ckpt, seed);
  RetrainOptions ropt;
  ropt.dar = config.dar;
  ropt.warm_start = config.warm_start;
  ropt.verbose = options.verbose;
  out.final = retrain_posthoc(*out.base, retrain_variant(config.method), data, hp, seed, ropt);
  return out;
}

void write_history_csv(const TrainedBundle& bundle, const fs::path& path) {
  std::ostringstream s;
  s.precision(10);
  s << "epoch,train_loss,val_minority,val_majority,val_average,score,best\n";
  for (const auto& r : bundle.history)
    s << r.epoch << ',' << r.train_loss << ',' << r.val.minority << ',' << r.val.majority << ',' << r.val.average
      << ',' << r.score << ',' << (r.epoch == bundle.best_epoch ? 1 : 0) << '\n';
  write_text_file(path, s.str());
}

SeedMetrics evaluate_seed(const ExperimentConfig& config, const SeedModels& models, const DatasetSplits& data,
                          const fs::path& dir, const EvalOptions& options) {
  const auto& cfg = data.config;
  const auto& bundle = models.final;
  const auto& model = bundle.model;
  SeedMetrics m;

  const auto acc = group_accuracy(model, data.test, cfg);
  put_accuracy(m, "test", acc);
  if (bundle.predicts_attribute) put_accuracy(m, "attr", group_accuracy(model, data.test, cfg, true));
  if (bundle.best_epoch > 0) {
    m["best_epoch"] = static_cast<double>(bundle.best_epoch);
    m["val.score"] = bundle.history.at(bundle.best_epoch - 1).score;
  }
  if (models.base) put_accuracy(m, "base.test", group_accuracy(models.base->model, data.test, cfg));
  if (options.write_files) write_group_csv(acc, dir / "group_accuracy.csv");

  CepConfig cc;
  cc.donors = config.cep_donors;
  cc.max_examples = config.cep_examples;
  cc.seed = config.cep_seed;
  std::vector<ProbeKind> probes{ProbeKind::prediction};
  if (options.cep_all_probes) probes.insert(probes.end(), {ProbeKind::feature, ProbeKind::feature_map, ProbeKind::pixel});
  for (auto kind : probes) {
    const auto result = cep(make_probe(model, kind, config.cep_logits), data.test, cfg, cc);
    const auto name = to_string(kind);
    m["cep." + name] = result.aggregate;
    m["cep." + name + ".excluded"] = static_cast<double>(result.excluded);
    if (options.write_files) write_cep_csv(result, dir / ("cep_" + name + ".csv"));
  }

  if (cfg.mode == DataMode::stacked) {
    const auto cap_result = cap(model, data.test, cfg);
    double sum = 0.0, excluded = 0.0;
    std::size_t n = 0;
    std::ostringstream csv;
    csv.precision(10);
    csv << "channel,cap,excluded\n";
    for (std::size_t j = 0; j < cap_result.per_channel.size(); ++j) {
      const double v = cap_result.per_channel[j];
      csv << j << ',';
      if (std::isfinite(v)) {
        csv << v;
        sum += v;
        ++n;
      }
      csv << ',' << cap_result.excluded[j] << '\n';
      excluded += static_cast<double>(cap_result.excluded[j]);
    }
    if (n) m["cap.mean"] = sum / static_cast<double>(n);
    m["cap.excluded"] = excluded;
    if (options.write_files) write_text_file(dir / "cap.csv", csv.str());
    const auto g = cgp(model, data.test, cfg);
    m["cgp"] = g.value;
    m["cgp.excluded"] = static_cast<double>(g.excluded);
  }

  if (options.write_files && config.heatmaps > 0) {
    const std::size_t n = std::min(config.heatmaps, data.test.size());
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    const auto maps = gradcam(model, batch_images(data.test, idx, cfg));
    for (std::size_t i = 0; i < n; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "sample_%02zu.pgm", i);
      write_pgm(upsample_nearest(maps[i], cfg.image_height, cfg.image_width), cfg.image_height, cfg.image_width,
                dir / "heatmaps" / name);
    }
  }
  return m;
}

json run_experiment(const ExperimentConfig& config, const fs::path& out_dir, const TrainOptions& options) {
  const auto start = Clock::now();
  fs::create_directories(out_dir);
  write_text_file(out_dir / "config.toml", config.echo());
  const auto data = make_dataset(config);

  json seeds = json::array();
  json timing = json::object();
  std::vector<SeedMetrics> all;
  for (auto seed : config.seeds) {
    const auto t0 = Clock::now();
    const fs::path dir = out_dir / seed_dir_name(seed);
    fs::create_directories(dir);
    const auto models = train_seed(config, data, seed, options);
    const double train_s = seconds_since(t0);
    if (models.base) save_checkpoint(models.base->model, provenance_echo(config, seed), dir / "base.ckpt");
    save_checkpoint(models.final.model, provenance_echo(config, seed), dir / "model.ckpt");
    write_history_csv(models.final, dir / "history.csv");
    const auto t1 = Clock::now();
    const auto metrics = evaluate_seed(config, models, data, dir);
    timing[seed_dir_name(seed)] = {{"train_seconds", train_s}, {"eval_seconds", seconds_since(t1)}};
    seeds.push_back({{"seed", seed},
                     {"hp", hp_json(models.final.hp)},
                     {"best_epoch", models.final.best_epoch},
                     {"metrics", metrics}});
    all.push_back(metrics);
  }

  json report;
  report["config"] = config.echo();
  report["config_hash"] = fnv1a_hex(config.echo());
  report["source"] = source_hash();
  report["summary"] = summary_json(config);
  report["seeds"] = seeds;
  if (all.size() >= 2) report["aggregate"] = stats_json(aggregate_seeds(all));
  report["files"] = list_files(out_dir);
  timing["total_seconds"] = seconds_since(start);
  report["timing"] = timing;
  write_text_file(out_dir / "report.json", report.dump(2) + "\n");
  return report;
}

json without_timing(json report) {
  report.erase("timing");
  return report;
}

// ---------------------------------------------------------------------------

json run_sweep(const ExperimentConfig& config, const fs::path& out_dir, std::size_t jobs, bool verbose) {
  if (jobs == 0) throw ConfigError("jobs", "must be at least 1");
  fs::create_directories(out_dir);
  write_text_file(out_dir / "config.toml", config.echo());
  const auto data = make_dataset(config);
  const std::uint64_t seed = config.seeds.front();
  const bool posthoc = is_posthoc(config.method);

  std::optional<TrainedBundle> base;
  if (posthoc) {
    const fs::path base_path = config.checkpoint.empty() ? out_dir / "base.ckpt" : fs::path(config.checkpoint);
    if (fs::exists(base_path) || !config.checkpoint.empty()) {
      base = load_base(config, base_path, seed);
    } else {
      base = train_base(config, data, seed, verbose);
      save_checkpoint(base->model, provenance_echo(config, seed), base_path);
    }
  }

  const HyperParams stage = posthoc ? config.retrain : config.erm;
  const auto grid = expand_grid(stage, config.grid.lr, config.grid.weight_decay, config.grid.batch_size,
                                config.grid.reg_strength);
  std::vector<json> cells(grid.size());
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr failure;

  auto worker = [&] {
    for (std::size_t i = next++; i < grid.size(); i = next++) {
      try {
        const auto& hp = grid[i];
        const std::string hash = fnv1a_hex(hp.key());
        const fs::path cell_file = out_dir / "cells" / hash / "cell.json";
        if (fs::exists(cell_file)) {
          cells[i] = json::parse(read_text_file(cell_file));
          continue;
        }
        json cell{{"hash", hash}, {"hp", hp_json(hp)}};
        try {
          SeedModels models;
          if (posthoc) {
            models.base = *base;
            RetrainOptions ropt;
            ropt.dar = config.dar;
            ropt.warm_start = config.warm_start;
            ropt.verbose = verbose;
            models.final = retrain_posthoc(*base, retrain_variant(config.method), data, hp, seed, ropt);
          } else {
            TrainOptions topt;
            topt.verbose = verbose;
            topt.stage_hp = hp;
            models = train_seed(config, data, seed, topt);
          }
          const auto& rec = models.final.history.at(models.final.best_epoch - 1);
          cell["minority_val"] = rec.score;
          cell["average_val"] = rec.val.average;
          cell["best_epoch"] = models.final.best_epoch;
          cell["diverged"] = false;
          EvalOptions eopt;
          eopt.cep_all_probes = false;
          eopt.write_files = false;
          cell["metrics"] = evaluate_seed(config, models, data, {}, eopt);
        } catch (const NonFiniteError& e) {
          cell["diverged"] = true;
          cell["error"] = e.what();
          cell["minority_val"] = nullptr;
          cell["average_val"] = nullptr;
        }
        write_text_file(cell_file, cell.dump(2) + "\n");
        cells[i] = std::move(cell);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < std::min(jobs, grid.size()); ++t) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  std::vector<GridCell> scored;
  for (const auto& c : cells) {
    GridCell g;
    g.hp = hp_from_json(c.at("hp"));
    g.diverged = c.at("diverged").get<bool>();
    const double ninf = -std::numeric_limits<double>::infinity();
    g.minority_val = g.diverged ? ninf : c.at("minority_val").get<double>();
    g.average_val = g.diverged ? ninf : c.at("average_val").get<double>();
    scored.push_back(g);
  }
  const auto best = select_best(scored);

  std::ostringstream csv;
  csv.precision(17);
  csv << "cell,hash,lr,weight_decay,batch_size,reg_strength,minority_val,average_val,diverged\n";
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& g = scored[i];
    csv << i << ',' << cells[i].at("hash").get<std::string>() << ',' << g.hp.lr << ',' << g.hp.weight_decay << ','
        << g.hp.batch_size << ',' << g.hp.reg_strength << ',';
    if (g.diverged)
      csv << "-inf,-inf,1\n";
    else
      csv << g.minority_val << ',' << g.average_val << ",0\n";
  }
  write_text_file(out_dir / "grid.csv", csv.str());

  json result{{"config_hash", fnv1a_hex(config.echo())},
              {"source", source_hash()},
              {"seed", seed},
              {"best_index", best},
              {"best", cells[best]},
              {"cells", cells}};
  write_text_file(out_dir / "best.json", json{{"best_index", best}, {"best", cells[best]}}.dump(2) + "\n");
  write_text_file(out_dir / "sweep.json", result.dump(2) + "\n");
  return result;
}

json evaluate_checkpoint(const ExperimentConfig& config, const fs::path& checkpoint, const fs::path& out_dir) {
  require_file(checkpoint);
  const auto data = make_dataset(config);
  const auto expected = ConfigEcho{{"data.hash", provenance_echo(config, 0).at("data.hash")}};
  auto loaded = load_checkpoint(checkpoint, expected);
  SeedModels models;
  models.final.model = std::move(loaded.model);
  models.final.method = loaded.echo.count("run.method") ? loaded.echo.at("run.method") : "unknown";
  models.final.predicts_attribute = models.final.method == "DAR_Spu";
  fs::create_directories(out_dir);
  const auto metrics = evaluate_seed(config, models, data, out_dir);
  json report{{"checkpoint", checkpoint.string()},
              {"method", models.final.method},
              {"source", source_hash()},
              {"metrics", metrics},
              {"files", list_files(out_dir)}};
  write_text_file(out_dir / "metrics.json", report.dump(2) + "\n");
  return report;
}

// ---------------------------------------------------------------------------

json make_figures(const std::vector<fs::path>& run_dirs, const fs::path& out_dir, std::size_t bins) {
  if (run_dirs.empty()) throw ConfigError("runs", "no run directories given");
  fs::create_directories(out_dir);
  std::ostringstream ablation;
  ablation.precision(10);
  ablation << "run,method,mode,preset,queries,heads,layers,positional,sd_lambda,seeds,"
              "minority_mean,minority_std,average_mean,cep_prediction_mean,cep_prediction_std,cgp_mean\n";
  json manifest = json::array();
  std::map<std::string, int> used_labels;

  for (const auto& run : run_dirs) {
    const auto report = json::parse(read_text_file(run / "report.json"));
    std::string label = run.filename().string();
    if (label.empty()) label = run.parent_path().filename().string();
    if (used_labels[label]++) label += "_" + std::to_string(used_labels[label] - 1);

    const auto& summary = report.at("summary");
    const auto& seeds = report.at("seeds");
    if (seeds.empty()) throw FormatError((run / "report.json").string() + ": no seeds recorded");
    const fs::path seed_dir = run / seed_dir_name(seeds.front().at("seed").get<std::uint64_t>());

    auto stat = [&](const std::string& key) -> std::pair<double, double> {
      if (report.contains("aggregate") && report["aggregate"].contains(key))
        return {report["aggregate"][key]["mean"].get<double>(), report["aggregate"][key]["std"].get<double>()};
      const auto& m = seeds.front().at("metrics");
      if (m.contains(key) && m[key].is_number()) return {m[key].get<double>(), 0.0};
      return {std::nan(""), std::nan("")};
    };
    auto cell = [](double v) { return std::isfinite(v) ? std::to_string(v) : std::string(); };

    for (const std::string probe : {"feature", "feature_map", "pixel"}) {
      const auto values = read_cep_column(seed_dir / ("cep_" + probe + ".csv"));
      const auto hist = histogram(values, bins);
      const auto path = out_dir / "histograms" / (label + "_" + probe + ".csv");
      write_histogram_csv(hist, path);
      manifest.push_back(fs::relative(path, out_dir).generic_string());
    }

    const auto [min_m, min_s] = stat("test.minority");
    const auto [avg_m, avg_s] = stat("test.average");
    const auto [cep_m, cep_s] = stat("cep.prediction");
    const auto [cgp_m, cgp_s] = stat("cgp");
    const auto& dar = summary.at("dar");
    ablation << label << ',' << summary.at("method").get<std::string>() << ',' << summary.at("mode").get<std::string>()
             << ',' << summary.at("preset").get<std::string>() << ',' << dar.at("queries").get<std::size_t>() << ','
             << dar.at("heads").get<std::size_t>() << ',' << dar.at("layers").get<std::size_t>() << ','
             << (dar.at("positional").get<bool>() ? "true" : "false") << ','
             << summary.at("erm_sd_lambda").get<double>() << ',' << seeds.size() << ',' << cell(min_m) << ','
             << cell(min_s) << ',' << cell(avg_m) << ',' << cell(cep_m) << ',' << cell(cep_s) << ',' << cell(cgp_m)
             << '\n';
    (void)avg_s;
    (void)cgp_s;

    const fs::path heat_dir = seed_dir / "heatmaps";
    if (!fs::is_directory(heat_dir)) throw MissingFileError(heat_dir);
    std::vector<fs::path> maps;
    for (const auto& e : fs::directory_iterator(heat_dir))
      if (e.path().extension() == ".pgm") maps.push_back(e.path());
    std::sort(maps.begin(), maps.end());
    for (const auto& src : maps) {
      const auto dst = out_dir / "heatmaps" / label / src.filename();
      fs::create_directories(dst.parent_path());
      fs::copy_file(src, dst, fs::copy_options::overwrite_existing);
      manifest.push_back(fs::relative(dst, out_dir).generic_string());
    }
  }
  write_text_file(out_dir / "ablation.csv", ablation.str());
  manifest.push_back("ablation.csv");
  return json{{"files", manifest}};
}

}  // namespace dar::harness
