// Command-line driver: synth, pretrain, train, eval, ablate, viz-attn.
//
// Exit codes: 0 success, 2 configuration error, 3 missing or unreadable
// input, 4 numerical failure, 1 anything else. Failures print one line
// "error: <kind>: <message>" to stderr.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "synmesh/body_model.hpp"
#include "synmesh/config.hpp"
#include "synmesh/errors.hpp"
#include "synmesh/scene_synth.hpp"
#include "synmesh/training.hpp"

namespace fs = std::filesystem;
using namespace synmesh;
using config::Json;

namespace {

// Top-level config file: {"scene": {...}, "model": {...}, "train": {...},
// "pretrain": {...}}. The model section may also sit inside "train".
struct FileConfig {
  scene::SceneConfig scene;
  gen::PretrainOptions pretrain;
  train::TrainConfig train;
};

FileConfig read_config(const std::string& path) {
  FileConfig fc;
  if (path.empty()) return fc;
  const auto j = config::load_file(path);
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (it.key() != "scene" && it.key() != "model" && it.key() != "train" && it.key() != "pretrain")
      throw ConfigError("unknown key '" + it.key() + "'");
  if (j.contains("scene")) fc.scene = config::scene_from_json(j["scene"]);
  if (j.contains("pretrain")) fc.pretrain = config::pretrain_from_json(j["pretrain"]);
  if (j.contains("model")) fc.train.model = config::model_from_json(j["model"]);
  if (j.contains("train")) fc.train = config::train_from_json(j["train"], fc.train);
  return fc;
}

body::BodyTemplate make_template(const train::ModelConfig& m) {
  return body::make_toy_template(m.body, m.template_seed);
}

std::vector<scene::SceneSample> load_data(const std::string& path) {
  if (!fs::exists(path)) throw MissingInputError("no such file: " + path);
  return scene::read_dataset(path);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path, 0);
  os << text;
}

void write_pgm(const std::string& path, const torch::Tensor& img01) {
  const auto h = img01.size(0), w = img01.size(1);
  const auto px = (img01.clamp(0.0, 1.0) * 255.0).round().to(torch::kUInt8).contiguous();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path, 0);
  os << "P5\n" << w << ' ' << h << "\n255\n";
  os.write(static_cast<const char*>(px.data_ptr()), h * w);
}

void write_raw(const std::string& path, const torch::Tensor& t) {
  const auto c = t.to(torch::kFloat32).contiguous();
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path, 0);
  os.write(static_cast<const char*>(c.data_ptr()), c.numel() * sizeof(float));
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw ConfigError("--seeds: '" + item + "' is not a number");
    }
  }
  if (out.empty()) throw ConfigError("--seeds: empty list");
  return out;
}

std::vector<train::AblationCell> parse_grid(const std::string& spec) {
  if (spec.empty() || spec == "default") return train::default_grid();
  const auto j = fs::exists(spec) ? config::load_file(spec) : config::parse(spec, "--grid");
  if (!j.is_array()) throw ConfigError("--grid: expected a list of cells");
  std::vector<train::AblationCell> cells;
  for (const auto& c : j) {
    if (!c.is_object()) throw ConfigError("--grid: each cell must be an object");
    train::AblationCell cell;
    for (auto it = c.begin(); it != c.end(); ++it) {
      const auto& k = it.key();
      if (k == "use_Me") cell.use_explicit_maps = it->get<bool>();
      else if (k == "use_Mi") cell.use_implicit_maps = it->get<bool>();
      else if (k == "fusion_mode") cell.fusion = camf::fusion_mode_from_string(it->get<std::string>());
      else if (k == "use_gen_pathway") cell.use_gen_pathway = it->get<bool>();
      else if (k == "lambda_align") cell.lambda_align = it->get<double>();
      else throw ConfigError("--grid: unknown key '" + k + "'");
    }
    cells.push_back(cell);
  }
  return cells;
}

int run(int argc, char** argv) {
  torch::set_num_threads(1);
  CLI::App app{"synmesh: synthetic multi-person mesh recovery toolkit"};
  app.require_subcommand(1);

  std::string cfg_path, out, data, ckpt, denoiser, report, test_data, grid, seeds = "0,1,2", log_path, resume,
      predictions;
  std::uint64_t seed = 0;
  std::int64_t n = 8, steps = -1, ae_steps = -1, den_steps = -1, scenes_limit = 4;
  double occ = -1.0, lambda = -1.0, threshold = 8.0;
  bool seed_set = false;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--config", cfg_path, "JSON config");
  synth->add_option("--out", out, "Output dataset")->required();
  synth->add_option("--seed", seed, "Dataset seed")->each([&](const std::string&) { seed_set = true; });
  synth->add_option("--n", n, "Number of scenes");
  synth->add_option("--occlusion-prob", occ, "Override scene.occlusion_prob");

  auto* pre = app.add_subcommand("pretrain", "Pretrain the autoencoder and denoiser");
  pre->add_option("--config", cfg_path, "JSON config");
  pre->add_option("--data", data, "Training dataset")->required();
  pre->add_option("--out", out, "Output pathway checkpoint")->required();
  pre->add_option("--ae-steps", ae_steps, "Override pretrain.autoencoder_steps");
  pre->add_option("--denoiser-steps", den_steps, "Override pretrain.denoiser_steps");
  pre->add_option("--seed", seed, "Override pretrain.seed")->each([&](const std::string&) { seed_set = true; });
  pre->add_option("--log", log_path, "Loss log (one JSON line per step)");

  auto* tr = app.add_subcommand("train", "Train the full model");
  tr->add_option("--config", cfg_path, "JSON config");
  tr->add_option("--data", data, "Training dataset")->required();
  tr->add_option("--denoiser", denoiser, "Pretrained pathway checkpoint");
  tr->add_option("--out", out, "Output checkpoint")->required();
  tr->add_option("--log", log_path, "Metrics log (JSON lines)");
  tr->add_option("--val", test_data, "Validation dataset");
  tr->add_option("--resume", resume, "Resume from checkpoint");
  tr->add_option("--steps", steps, "Override train.steps");
  tr->add_option("--lambda", lambda, "Override train.lambda_align");
  tr->add_option("--seed", seed, "Override train.seed")->each([&](const std::string&) { seed_set = true; });

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  ev->add_option("--data", data, "Dataset")->required();
  ev->add_option("--ckpt", ckpt, "Checkpoint")->required();
  ev->add_option("--report", report, "Report path prefix (.json and .csv)")->required();
  ev->add_option("--predictions", predictions, "Also write predictions");
  ev->add_option("--threshold", threshold, "F1 root distance threshold in pixels");

  auto* ab = app.add_subcommand("ablate", "Train and evaluate an ablation grid");
  ab->add_option("--config", cfg_path, "JSON config");
  ab->add_option("--data", data, "Training dataset")->required();
  ab->add_option("--test", test_data, "Held-out dataset")->required();
  ab->add_option("--denoiser", denoiser, "Pretrained pathway checkpoint")->required();
  ab->add_option("--grid", grid, "Grid JSON (file or inline) or 'default'");
  ab->add_option("--seeds", seeds, "Comma-separated seeds");
  ab->add_option("--report", report, "Report path prefix")->required();
  ab->add_option("--steps", steps, "Override train.steps");

  auto* viz = app.add_subcommand("viz-attn", "Dump head cross-attention maps");
  viz->add_option("--data", data, "Dataset")->required();
  viz->add_option("--ckpt", ckpt, "Checkpoint")->required();
  viz->add_option("--out", out, "Output directory")->required();
  viz->add_option("--scenes", scenes_limit, "Number of scenes");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: config: " << e.what() << '\n';
    return 2;
  }

  if (*synth) {
    auto fc = read_config(cfg_path);
    if (occ >= 0.0) fc.scene.occlusion_prob = occ;
    fc.scene.validate();
    if (n < 0) throw ConfigError("--n must be >= 0");
    const auto tpl = make_template(fc.train.model);
    const auto samples = scene::generate_dataset(seed, n, fc.scene, tpl);
    Json meta{{"scene", config::to_json(fc.scene)}, {"model", config::to_json(fc.train.model)}, {"seed", seed},
              {"n", n}};
    scene::write_dataset(samples, out, meta.dump());
    std::cout << "wrote " << samples.size() << " scenes to " << out << '\n';
    return 0;
  }

  if (*pre) {
    auto fc = read_config(cfg_path);
    if (ae_steps >= 0) fc.pretrain.autoencoder_steps = ae_steps;
    if (den_steps >= 0) fc.pretrain.denoiser_steps = den_steps;
    if (seed_set) fc.pretrain.seed = seed;
    const auto scenes = load_data(data);
    std::ofstream log;
    if (!log_path.empty()) log.open(log_path);
    auto g = train::pretrain_pathway(scenes, fc.train.model, fc.pretrain, [&](std::int64_t s, double l) {
      if (log) log << Json{{"step", s}, {"loss", l}}.dump() << '\n';
    });
    Json meta{{"pretrain", config::to_json(fc.pretrain)}, {"model", config::to_json(fc.train.model)}};
    train::save_pathway(g, fc.train.model, out, meta.dump());
    std::cout << "wrote pretrained pathway to " << out << '\n';
    return 0;
  }

  if (*tr) {
    auto fc = read_config(cfg_path);
    auto& tc = fc.train;
    if (!resume.empty()) tc = train::checkpoint_config(resume);
    if (steps >= 0) tc.steps = steps;
    if (tr->count("--lambda")) tc.lambda_align = lambda;
    if (seed_set) tc.seed = seed;
    tc.validate();
    const auto tpl = make_template(tc.model);
    const auto scenes = load_data(data);
    const auto prepared = train::prepare(scenes, tc.model);
    std::vector<scene::SceneSample> val_scenes;
    train::PreparedData val;
    if (!test_data.empty()) {
      val_scenes = load_data(test_data);
      val = train::prepare(val_scenes, tc.model);
    }
    train::Trainer t(tc, tpl);
    if (tc.ablation.use_gen_pathway) {
      if (denoiser.empty() && resume.empty()) throw ConfigError("--denoiser is required when use_gen_pathway is set");
      if (!denoiser.empty()) {
        if (!fs::exists(denoiser)) throw MissingInputError("no such file: " + denoiser);
        t.load_denoiser(denoiser);
      }
    }
    if (!resume.empty()) t.resume(resume);
    std::ofstream log;
    if (!log_path.empty()) log.open(log_path, resume.empty() ? std::ios::trunc : std::ios::app);
    t.train(prepared, test_data.empty() ? nullptr : &val, log_path.empty() ? nullptr : &log, out);
    std::cout << "trained to step " << t.step() << ", checkpoint " << out << '\n';
    return 0;
  }

  if (*ev) {
    if (!fs::exists(ckpt)) throw MissingInputError("no such file: " + ckpt);
    const auto tc = train::checkpoint_config(ckpt);
    const auto tpl = make_template(tc.model);
    const auto scenes = load_data(data);
    const auto prepared = train::prepare(scenes, tc.model);
    train::Trainer t(tc, tpl);
    t.resume(ckpt);
    const auto preds = t.predict(prepared);
    const auto rep = metrics::evaluate(preds, scenes, tpl, threshold);
    rep.write(report + ".json", report + ".csv", config::to_json(tc).dump());
    if (!predictions.empty()) metrics::write_predictions(preds, predictions, config::to_json(tc).dump());
    std::cout << "MPJPE " << rep.mpjpe << " mm, PA-MPJPE " << rep.pa_mpjpe << " mm, F1 " << rep.f1 << '\n';
    return 0;
  }

  if (*ab) {
    auto fc = read_config(cfg_path);
    if (steps >= 0) fc.train.steps = steps;
    const auto cells = parse_grid(grid);
    const auto seed_list = parse_seeds(seeds);
    const auto tpl = make_template(fc.train.model);
    const auto tr_scenes = load_data(data);
    const auto te_scenes = load_data(test_data);
    const auto trp = train::prepare(tr_scenes, fc.train.model);
    const auto tep = train::prepare(te_scenes, fc.train.model);
    if (!fs::exists(denoiser)) throw MissingInputError("no such file: " + denoiser);
    auto g = train::load_pathway(denoiser);
    const auto res = train::ablate(fc.train, cells, seed_list, trp, tep, g, tpl, [](const train::AblationRow& r) {
      std::cout << r.cell.label() << " seed " << r.seed << ": MPJPE " << r.mpjpe << " mm\n" << std::flush;
    });
    write_text(report + ".csv", res.to_csv());
    write_text(report + "_summary.csv", res.summary_csv());
    Json j{{"config", config::to_json(fc.train)}, {"cells", Json::array()}};
    for (const auto& s : res.summary)
      j["cells"].push_back({{"cell", s.cell.label()}, {"mean_mpjpe_mm", s.mean}, {"std_mpjpe_mm", s.stddev},
                            {"per_seed", s.per_seed}});
    write_text(report + ".json", j.dump(2) + "\n");
    return 0;
  }

  if (*viz) {
    if (!fs::exists(ckpt)) throw MissingInputError("no such file: " + ckpt);
    const auto tc = train::checkpoint_config(ckpt);
    const auto tpl = make_template(tc.model);
    const auto scenes = load_data(data);
    const auto prepared = train::prepare(scenes, tc.model);
    train::Trainer t(tc, tpl);
    t.resume(ckpt);
    fs::create_directories(out);
    t.model()->eval();
    torch::NoGradGuard ng;
    const auto count = std::min<std::int64_t>(scenes_limit, prepared.size());
    const auto g = tc.model.image_size / tc.model.patch;
    Json index = Json::array();
    for (std::int64_t s = 0; s < count; ++s) {
      const auto o = t.infer(prepared, s, s + 1);
      for (std::size_t l = 0; l < o.decode.cross_attn.size(); ++l) {
        const auto w = o.decode.cross_attn[l][0].mean(0);  // [K,T]
        for (std::int64_t k = 0; k < w.size(0); ++k) {
          const auto m = w[k].view({g, g});
          const auto mx = m.max().item<double>();
          const auto img = mx > 0 ? m / mx : m;
          const auto up = img.repeat_interleave(tc.model.patch, 0).repeat_interleave(tc.model.patch, 1);
          const auto stem = "scene" + std::to_string(s) + "_layer" + std::to_string(l) + "_query" + std::to_string(k);
          write_pgm((fs::path(out) / (stem + ".pgm")).string(), up);
          write_raw((fs::path(out) / (stem + ".f32")).string(), m);
          index.push_back({{"scene", s}, {"layer", l}, {"query", k}, {"grid", {g, g}}, {"row_sum", m.sum().item<double>()},
                           {"image", stem + ".pgm"}, {"raw", stem + ".f32"}});
        }
      }
    }
    write_text((fs::path(out) / "index.json").string(), index.dump(2) + "\n");
    std::cout << "wrote " << index.size() << " attention maps to " << out << '\n';
    return 0;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << '\n';
    return 2;
  } catch (const CapacityError& e) {
    std::cerr << "error: config: " << e.what() << '\n';
    return 2;
  } catch (const MissingInputError& e) {
    std::cerr << "error: missing-input: " << e.what() << '\n';
    return 3;
  } catch (const IoError& e) {
    std::cerr << "error: input: " << e.what() << '\n';
    return 3;
  } catch (const TrainingError& e) {
    std::cerr << "error: numerical: " << e.what() << '\n';
    return 4;
  } catch (const DomainError& e) {
    std::cerr << "error: numerical: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return 1;
  }
}
