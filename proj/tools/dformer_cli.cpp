// Command-line front end: complexity analysis, synthetic data generation,
// training, evaluation, the attention scaling bench, and a quick self test.
#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>

#include "dformer/analyzer.hpp"
#include "dformer/checkpoint.hpp"
#include "dformer/data.hpp"
#include "dformer/gradcheck.hpp"
#include "dformer/rng.hpp"
#include "dformer/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dformer;

namespace {

// "DxHxW" -> three extents
std::array<std::size_t, 3> parse_dims(const std::string& text) {
  std::array<std::size_t, 3> out{};
  char sep1 = 0, sep2 = 0;
  unsigned long long d = 0, h = 0, w = 0;
  std::istringstream in(text);
  if (!(in >> d >> sep1 >> h >> sep2 >> w) || sep1 != 'x' || sep2 != 'x' || !in.eof() || !d ||
      !h || !w) {
    throw ConfigurationError("expected DxHxW, got '" + text + "'");
  }
  out = {static_cast<std::size_t>(d), static_cast<std::size_t>(h), static_cast<std::size_t>(w)};
  return out;
}

std::vector<GridDims> parse_grids(const std::string& text) {
  std::vector<GridDims> grids;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    auto dims = parse_dims(item);
    grids.push_back(GridDims{dims[0], dims[1], dims[2]});
  }
  if (grids.empty()) throw ConfigurationError("no grids in '" + text + "'");
  return grids;
}

std::vector<VolumeSample> load_dir(const std::string& dir) {
  std::vector<fs::path> paths;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".dfvol") paths.push_back(entry.path());
  }
  std::sort(paths.begin(), paths.end());
  if (paths.empty()) throw FormatError("no .dfvol files in '" + dir + "'");
  std::vector<VolumeSample> out;
  out.reserve(paths.size());
  for (const auto& p : paths) out.push_back(read_volume(p.string()));
  return out;
}

int cmd_analyze(const std::string& config_path, const std::string& input) {
  RunConfig run = load_run_config(config_path);
  std::size_t d = run.model.input_d, h = run.model.input_h, w = run.model.input_w;
  if (!input.empty()) {
    auto dims = parse_dims(input);
    d = dims[0];
    h = dims[1];
    w = dims[2];
  }
  ComplexityReport report = analyze_model(run.model, d, h, w);
  std::cout << report.to_text();
  for (const ComponentCount& c : report.components) {
    json rec{{"component", c.name}, {"params", c.params}, {"multiplies", c.multiplies}};
    std::cout << rec.dump() << '\n';
  }
  json total{{"component", "total"},
             {"params", report.total_params},
             {"multiplies", report.total_multiplies}};
  std::cout << total.dump() << '\n';
  return 0;
}

int cmd_gen(std::uint64_t seed, std::size_t count, const std::string& dims_text,
            const std::string& kind_text, std::size_t classes, double noise,
            const std::string& out_dir) {
  auto dims = parse_dims(dims_text);
  auto samples =
      synth_dataset(seed, count, dims[0], dims[1], dims[2], classes, shape_kind_from(kind_text),
                    noise);
  fs::create_directories(out_dir);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "sample_%04zu.dfvol", i);
    write_volume((fs::path(out_dir) / name).string(), samples[i]);
  }
  std::cout << "wrote " << samples.size() << " volumes to " << out_dir << '\n';
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir) {
  RunConfig run = load_run_config(config_path);
  std::vector<VolumeSample> train_data, val_data;
  if (!data_dir.empty()) {
    auto all = load_dir(data_dir);
    if (all.size() <= run.val_count) {
      throw ConfigurationError("dataset of " + std::to_string(all.size()) +
                               " too small for val_count=" + std::to_string(run.val_count));
    }
    val_data.assign(all.end() - run.val_count, all.end());
    train_data.assign(all.begin(), all.end() - run.val_count);
  } else {
    const ModelConfig& mc = run.model;
    train_data = synth_dataset(substream_seed(run.seed, 1), run.data_count, mc.input_d,
                               mc.input_h, mc.input_w, mc.num_classes, run.data_kind,
                               run.noise_level);
    val_data = synth_dataset(substream_seed(run.seed, 2), run.val_count, mc.input_d, mc.input_h,
                             mc.input_w, mc.num_classes, run.data_kind, run.noise_level);
  }
  TrainResult result = train(run, train_data, val_data, out_dir, &std::cout);
  std::cout << "steps " << result.steps_run << ", best holdout DSC " << result.best_dsc
            << " at step " << result.best_step << '\n';
  std::cout << "checkpoints and metrics.log in " << out_dir << '\n';
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data_dir) {
  Model m = load_checkpoint(checkpoint_path);
  auto data = load_dir(data_dir);
  EvalReport report = evaluate(m, data);
  std::cout << report.to_text();
  return 0;
}

int cmd_bench(const std::string& grids_text, const std::string& unit_text, std::size_t channels,
              int repeats, bool dense) {
  auto unit_dims = parse_dims(unit_text);
  UnitDims unit{unit_dims[0], unit_dims[1], unit_dims[2]};
  auto rows = bench_attention(parse_grids(grids_text), unit, channels, repeats, dense);
  std::cout << bench_table(rows);
  for (const BenchRow& r : rows) {
    json rec{{"grid", {r.grid.d, r.grid.h, r.grid.w}},
             {"patches", r.grid.count()},
             {"analytic_msa", r.analytic_msa},
             {"analytic_ls", r.analytic_ls},
             {"measured_ls", r.measured_ls},
             {"measured_msa", r.measured_msa},
             {"ls_millis", r.ls_millis},
             {"msa_millis", r.msa_millis}};
    std::cout << rec.dump() << '\n';
  }
  return 0;
}

// Quick oracle/invariant sweep; exits nonzero on the first failure.
int cmd_selftest() {
  int failures = 0;
  auto check = [&](bool ok, const std::string& name) {
    std::cout << (ok ? "ok " : "FAIL ") << name << '\n';
    if (!ok) ++failures;
  };
  Rng rng(99);
  auto rand_t = [&](Shape s) {
    std::vector<double> v(shape_numel(s));
    for (double& x : v) x = rng.next_range(-1.0, 1.0);
    return Tensor(std::move(s), std::move(v));
  };
  auto diff = [](const Tensor& a, const Tensor& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
      worst = std::max(worst, std::fabs(a.value_at(i) - b.value_at(i)));
    }
    return worst;
  };

  {
    Tensor a = rand_t({3, 4}), b = rand_t({4, 2});
    Tensor c = matmul(a, b);
    double worst = 0.0;
    for (std::size_t i = 0; i < 3; ++i) {
      for (std::size_t j = 0; j < 2; ++j) {
        double acc = 0.0;
        for (std::size_t l = 0; l < 4; ++l) acc += a.value_at(i * 4 + l) * b.value_at(l * 2 + j);
        worst = std::max(worst, std::fabs(acc - c.value_at(i * 2 + j)));
      }
    }
    check(worst < 1e-12, "matmul matches triple-loop oracle");
  }
  {
    Tensor y = softmax_lastdim(rand_t({6, 5}));
    double worst = 0.0;
    for (std::size_t r = 0; r < 6; ++r) {
      double sum = 0.0;
      for (std::size_t c = 0; c < 5; ++c) sum += y.value_at(r * 5 + c);
      worst = std::max(worst, std::fabs(sum - 1.0));
    }
    check(worst < 1e-12, "softmax rows sum to 1");
  }
  {
    GridDims grid{4, 4, 2};
    UnitDims unit{2, 2, 2};
    for (auto mode : {PartitionMode::kLocal, PartitionMode::kGlobal}) {
      UnitPartition p = mode == PartitionMode::kLocal ? partition_local(grid, unit)
                                                      : partition_global(grid, unit);
      bool ok = true;
      for (std::size_t i = 0; i < grid.count(); ++i) {
        ok = ok && p.inverse_index[p.forward_index[i]] == i;
      }
      check(ok, mode == PartitionMode::kLocal ? "local partition is a bijection"
                                              : "global partition is a bijection");
    }
  }
  {
    GridDims grid{4, 4, 4};
    UnitDims unit{2, 2, 2};
    std::size_t c = 8;
    AttentionParams p;
    p.heads = 2;
    p.wq = rand_t({c, c});
    p.wk = rand_t({c, c});
    p.wv = rand_t({c, c});
    p.wo = rand_t({c, c});
    p.bq = rand_t({c});
    p.bk = rand_t({c});
    p.bv = rand_t({c});
    p.bo = rand_t({c});
    Tensor x = rand_t({grid.count(), c});

    FlopCounter& fc = FlopCounter::global();
    fc.enable(true);
    fc.reset();
    Tensor local = ls_msa(x, grid, unit, p);
    check(fc.multiplies() == attention_complexity(grid, c, unit),
          "instrumented ls_msa equals the analytic count");
    fc.enable(false);

    // dilation permutation P: local slot layout <- global slot layout
    UnitPartition loc = partition_local(grid, unit);
    UnitPartition glob = partition_global(grid, unit);
    std::vector<std::size_t> fwd(grid.count()), inv(grid.count());
    for (std::size_t i = 0; i < grid.count(); ++i) {
      fwd[i] = glob.inverse_index[loc.forward_index[i]];
      inv[i] = loc.inverse_index[glob.forward_index[i]];
    }
    Tensor via_perm = gather_rows(ls_msa(gather_rows(x, fwd), grid, unit, p), inv);
    check(diff(gs_msa(x, grid, unit, p), via_perm) < 1e-12,
          "gs_msa equals permute(ls_msa) composition");
  }
  {
    Tensor x(Shape{3}, {0.2, -0.4, 0.9});
    Tape tape;
    Tensor w(Shape{3}, {0.5, 0.25, -0.75});
    tape.watch(w);
    Tensor loss = sum_all(mul(gelu(mul(w, x)), w));
    auto grads = tape.backward(loss);
    Tensor fd = finite_diff_oracle(
        [&](const Tensor& probe) {
          return sum_all(mul(gelu(mul(probe, x)), probe)).scalar_value();
        },
        Tensor(Shape{3}, {0.5, 0.25, -0.75}));
    check(max_rel_error(grads.at(w.node()), fd) < 1e-4, "tape gradient matches central differences");
  }
  {
    RunConfig run;
    run.max_steps = 100;
    check(std::fabs(poly_lr(0, run) - 0.01) < 1e-15 && poly_lr(100, run) == 0.0,
          "poly schedule endpoints");
  }
  std::cout << (failures ? "selftest FAILED\n" : "selftest passed\n");
  return failures ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale dilated-transformer 3D segmentation toolkit"};
  app.require_subcommand(1);

  std::string config_path, input, data_dir, out_dir, checkpoint_path;
  std::string dims_text = "16x32x32", kind_text = "spheres", grids_text, unit_text = "4x4x4";
  std::uint64_t seed = 1;
  std::size_t count = 8, classes = 2, channels = 32;
  double noise = 0.05;
  int repeats = 5;
  bool dense = true;

  CLI::App* analyze = app.add_subcommand("analyze", "print the parameter/multiply report");
  analyze->add_option("--config", config_path, "config file")->required();
  analyze->add_option("--input", input, "override input dims as DxHxW");

  CLI::App* gen = app.add_subcommand("gen", "generate synthetic volumes");
  gen->add_option("--seed", seed, "dataset seed")->required();
  gen->add_option("--count", count, "number of volumes")->required();
  gen->add_option("--dims", dims_text, "volume dims DxHxW")->required();
  gen->add_option("--kind", kind_text, "spheres|boxes|nested")->required();
  gen->add_option("--out", out_dir, "output directory")->required();
  gen->add_option("--classes", classes, "number of classes including background");
  gen->add_option("--noise", noise, "gaussian noise level");

  CLI::App* train_cmd = app.add_subcommand("train", "train on synthetic or on-disk volumes");
  train_cmd->add_option("--config", config_path, "config file")->required();
  train_cmd->add_option("--data", data_dir, "directory of .dfvol files (synthesized when absent)");
  train_cmd->add_option("--out", out_dir, "output directory")->required();

  CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint_path, "checkpoint file")->required();
  eval_cmd->add_option("--data", data_dir, "directory of .dfvol files")->required();

  CLI::App* bench = app.add_subcommand("bench", "attention scaling table");
  bench->add_option("--grids", grids_text, "comma list of DxHxW grids")->required();
  bench->add_option("--unit", unit_text, "unit dims DxHxW");
  bench->add_option("--channels", channels, "channel width");
  bench->add_option("--repeats", repeats, "timing repeats");
  bench->add_flag("--dense,!--no-dense", dense, "also measure dense attention");

  app.add_subcommand("selftest", "run the built-in oracle/invariant sweep");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand("analyze")) return cmd_analyze(config_path, input);
    if (app.got_subcommand("gen")) {
      return cmd_gen(seed, count, dims_text, kind_text, classes, noise, out_dir);
    }
    if (app.got_subcommand("train")) return cmd_train(config_path, data_dir, out_dir);
    if (app.got_subcommand("eval")) return cmd_eval(checkpoint_path, data_dir);
    if (app.got_subcommand("bench")) {
      return cmd_bench(grids_text, unit_text, channels, repeats, dense);
    }
    if (app.got_subcommand("selftest")) return cmd_selftest();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
