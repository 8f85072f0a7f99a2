#include "msdpn/cli.hpp"

#include "msdpn/dataset.hpp"
#include "msdpn/errors.hpp"
#include "msdpn/evaluate.hpp"
#include "msdpn/png_export.hpp"
#include "msdpn/tensor_io.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <ostream>
#include <sstream>

namespace msdpn::cli {

namespace fs = std::filesystem;
using nlohmann::json;

void RunConfig::validate() const {
  if (data.synth_train < 0 || data.synth_test < 0) throw ConfigError("data.synth_* must be >= 0");
  if (data.beams < 2) throw ConfigError("data.beams must be >= 2");
  if (data.train.empty() && data.synth_train == 0) {
    throw ConfigError("data.train is empty and data.synth_train is 0: no training samples");
  }
  model.validate();
  train.validate();
  if (train.input_mode != model.input_mode) throw ConfigError("train and model input modes differ");
  if (eval.report.empty()) throw ConfigError("eval.report must not be empty");
}

namespace {

using Setter = std::function<void(const json&)>;

template <typename T>
T get_as(const json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(key + ": expected a boolean");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(key + ": expected a string");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(key + ": expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
          throw ConfigError(key + ": expected a non-negative integer");
        }
      }
    } else {
      if (!v.is_number()) throw ConfigError(key + ": expected a number");
    }
    return v.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

void apply_section(const json& j, const std::string& section, const std::map<std::string, Setter>& setters) {
  if (!j.is_object()) throw ConfigError(section + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown key " + section + "." + key);
    it->second(value);
  }
}

template <typename T>
Setter field_setter(T& field, std::string key) {
  return [&field, key = std::move(key)](const json& v) { field = get_as<T>(v, key); };
}

}  // namespace

RunConfig parse_run_config(const json& j) {
  RunConfig c;
  if (!j.is_object()) throw ConfigError("run config must be a JSON object");
  std::string csfa = std::string(nn::to_string(c.model.csfa));
  std::string mode = std::string(to_string(c.model.input_mode));
  std::map<std::string, Setter> top;
  top["data"] = [&](const json& v) {
    apply_section(v, "data",
                  {{"train", field_setter(c.data.train, "data.train")},
                   {"test", field_setter(c.data.test, "data.test")},
                   {"synth_train", field_setter(c.data.synth_train, "data.synth_train")},
                   {"synth_test", field_setter(c.data.synth_test, "data.synth_test")},
                   {"synth_seed", field_setter(c.data.synth_seed, "data.synth_seed")},
                   {"beams", field_setter(c.data.beams, "data.beams")},
                   {"test_seed_offset", field_setter(c.data.test_seed_offset, "data.test_seed_offset")}});
  };
  top["model"] = [&](const json& v) {
    apply_section(v, "model",
                  {{"stages", field_setter(c.model.stages, "model.stages")},
                   {"width_mult", field_setter(c.model.width_mult, "model.width_mult")},
                   {"csfa", field_setter(csfa, "model.csfa")},
                   {"input_mode", field_setter(mode, "model.input_mode")},
                   {"height", field_setter(c.model.height, "model.height")},
                   {"width", field_setter(c.model.width, "model.width")},
                   {"stage_losses", field_setter(c.model.stage_losses, "model.stage_losses")},
                   {"init_seed", field_setter(c.init_seed, "model.init_seed")}});
  };
  top["train"] = [&](const json& v) {
    apply_section(v, "train",
                  {{"lr", field_setter(c.train.lr, "train.lr")},
                   {"beta1", field_setter(c.train.beta1, "train.beta1")},
                   {"beta2", field_setter(c.train.beta2, "train.beta2")},
                   {"eps_adam", field_setter(c.train.eps, "train.eps_adam")},
                   {"weight_decay", field_setter(c.train.weight_decay, "train.weight_decay")},
                   {"lr_decay_per_epoch", field_setter(c.train.lr_decay, "train.lr_decay_per_epoch")},
                   {"epochs", field_setter(c.train.epochs, "train.epochs")},
                   {"batch_size", field_setter(c.train.batch_size, "train.batch_size")},
                   {"seed", field_setter(c.train.seed, "train.seed")},
                   {"checkpoint_every", field_setter(c.train.checkpoint_every, "train.checkpoint_every")}});
  };
  top["eval"] = [&](const json& v) {
    apply_section(v, "eval",
                  {{"enabled", field_setter(c.eval.enabled, "eval.enabled")},
                   {"report", field_setter(c.eval.report, "eval.report")}});
  };
  apply_section(j, "config", top);
  try {
    c.model.csfa = nn::parse_csfa_mode(csfa);
    c.model.input_mode = parse_input_mode(mode);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  c.model.input_channels = input_channels(c.model.input_mode);
  c.train.input_mode = c.model.input_mode;
  c.validate();
  return c;
}

json to_json(const RunConfig& c) {
  return {
      {"data",
       {{"train", c.data.train},
        {"test", c.data.test},
        {"synth_train", c.data.synth_train},
        {"synth_test", c.data.synth_test},
        {"synth_seed", c.data.synth_seed},
        {"beams", c.data.beams},
        {"test_seed_offset", c.data.test_seed_offset}}},
      {"model",
       {{"stages", c.model.stages},
        {"width_mult", c.model.width_mult},
        {"csfa", std::string(nn::to_string(c.model.csfa))},
        {"input_mode", std::string(to_string(c.model.input_mode))},
        {"height", c.model.height},
        {"width", c.model.width},
        {"stage_losses", c.model.stage_losses},
        {"init_seed", c.init_seed}}},
      {"train",
       {{"lr", c.train.lr},
        {"beta1", c.train.beta1},
        {"beta2", c.train.beta2},
        {"eps_adam", c.train.eps},
        {"weight_decay", c.train.weight_decay},
        {"lr_decay_per_epoch", c.train.lr_decay},
        {"epochs", c.train.epochs},
        {"batch_size", c.train.batch_size},
        {"seed", c.train.seed},
        {"checkpoint_every", c.train.checkpoint_every}}},
      {"eval", {{"enabled", c.eval.enabled}, {"report", c.eval.report}}},
  };
}

std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t i) {
  // splitmix64 of the pair
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + i + 0x632BE59BD9B4E019ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::string sample_id(std::uint64_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "s%05llu", static_cast<unsigned long long>(i));
  return buf;
}

std::vector<SceneSample> synthesize(int n, std::uint64_t seed, int height, int width, int beams,
                                    bool fronto_parallel) {
  SceneConfig sc;
  sc.fronto_parallel = fronto_parallel;
  ScanConfig scan;
  scan.n_beams = beams;
  std::vector<SceneSample> out;
  for (int i = 0; i < n; ++i) {
    SceneSample s = make_sample(sample_seed(seed, static_cast<std::uint64_t>(i)), height, width, sc, scan);
    s.id = sample_id(static_cast<std::uint64_t>(i));
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

json load_json_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw MissingFileError(p.string());
  try {
    return json::parse(is);
  } catch (const json::parse_error& e) {
    throw ConfigError(p.string() + ": " + e.what());
  }
}

void write_text(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream os(p, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + p.string());
  os << s;
  if (!os) throw std::runtime_error("write failed for " + p.string());
}

std::vector<TrainingSample> prepare_all(const std::vector<SceneSample>& samples, InputMode mode,
                                        double keep = 1.0, std::uint64_t dropout_seed = 0) {
  std::vector<TrainingSample> out;
  out.reserve(samples.size());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    out.push_back(prepare_sample(samples[i], mode, keep, sample_seed(dropout_seed, i)));
  }
  return out;
}

void check_sizes(const std::vector<SceneSample>& samples, const nn::NetworkConfig& cfg, const std::string& what) {
  for (const auto& s : samples) {
    if (s.rig.K.height != cfg.height || s.rig.K.width != cfg.width) {
      throw ConfigError(what + " sample " + s.id + " is " + std::to_string(s.rig.K.height) + "x" +
                        std::to_string(s.rig.K.width) + " but the model expects " + std::to_string(cfg.height) +
                        "x" + std::to_string(cfg.width));
    }
  }
}

std::string loss_csv(const TrainState& st) {
  std::string s = "epoch,loss\n";
  char buf[64];
  for (std::size_t e = 0; e < st.loss_trace.size(); ++e) {
    std::snprintf(buf, sizeof(buf), "%zu,%.9g\n", e + 1, static_cast<double>(static_cast<float>(st.loss_trace[e])));
    s += buf;
  }
  return s;
}

fs::path epoch_checkpoint(const fs::path& out, int epoch) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "checkpoint_e%04d.msdc", epoch);
  return out / buf;
}

bool same_network(const nn::NetworkConfig& a, const nn::NetworkConfig& b) {
  return a.stages == b.stages && a.width_mult == b.width_mult && a.input_channels == b.input_channels &&
         a.csfa == b.csfa && a.input_mode == b.input_mode && a.height == b.height && a.width == b.width &&
         a.stage_losses == b.stage_losses;
}

void write_predictions(const fs::path& dir, const std::vector<TrainingSample>& data, const EvalOutput& ev) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < data.size(); ++i) write_depth_png16(dir / (data[i].id + ".png"), ev.predictions[i]);
}

std::string summary_line(const EvalReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "rmse_mm=%.3f rel=%.5f delta1=%.3f delta2=%.3f delta3=%.3f", r.rmse_m * 1000.0,
                r.rel, r.delta1, r.delta2, r.delta3);
  return buf;
}

// ---- commands ----

struct SynthArgs {
  int scenes = 16;
  std::string out;
  std::uint64_t seed = 0;
  int height = 64, width = 64, beams = 1081;
  bool fronto = false;
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  if (a.scenes < 0) throw ConfigError("--scenes must be >= 0");
  if (a.height < 2 || a.width < 2) throw ConfigError("--height/--width must be >= 2");
  if (a.beams < 2) throw ConfigError("--beams must be >= 2");
  write_dataset(a.out, synthesize(a.scenes, a.seed, a.height, a.width, a.beams, a.fronto));
  out << "synth: " << a.scenes << " samples -> " << a.out << "\n";
  return kOk;
}

int cmd_encode(const std::string& dataset, const std::string& mode_s, const std::string& out_dir,
               std::ostream& out) {
  const InputMode mode = parse_input_mode(mode_s);
  if (mode == InputMode::RgbOnly) throw ConfigError("--mode must be proj-d or ref-d");
  const auto ids = read_manifest(dataset);
  fs::create_directories(out_dir);
  for (const auto& id : ids) {
    const SceneSample s = read_sample(dataset, id);
    const auto hits = project_scan(s.scan, s.rig.lidar_to_camera, s.rig.K);
    DepthImage d = make_proj_d(hits, s.rig.K.height, s.rig.K.width);
    if (mode == InputMode::RefD) d = make_ref_d(d);
    write_tensor(fs::path(out_dir) / (id + ".msdt"), d);
    write_depth_png16(fs::path(out_dir) / (id + ".png"), d);
  }
  out << "encode: " << ids.size() << " samples (" << mode_s << ") -> " << out_dir << "\n";
  return kOk;
}

int cmd_train(const std::string& config_path, const std::string& out_dir, const std::string& resume,
              std::ostream& out) {
  const RunConfig cfg = parse_run_config(load_json_file(config_path));
  const fs::path outp(out_dir);
  fs::create_directories(outp);
  write_text(outp / "config.resolved.json", to_json(cfg).dump(2) + "\n");

  std::vector<SceneSample> train_raw =
      cfg.data.train.empty()
          ? synthesize(cfg.data.synth_train, cfg.data.synth_seed, cfg.model.height, cfg.model.width, cfg.data.beams)
          : read_dataset(cfg.data.train);
  check_sizes(train_raw, cfg.model, "training");
  const auto train_data = prepare_all(train_raw, cfg.model.input_mode);

  std::unique_ptr<nn::Model> model;
  TrainState state;
  if (!resume.empty()) {
    LoadedCheckpoint ck = load_checkpoint(resume);
    if (!same_network(ck.model->config(), cfg.model)) {
      throw ConfigError("checkpoint " + resume + " was trained with a different model config");
    }
    model = std::move(ck.model);
    state = std::move(ck.state);
  } else {
    model = nn::Model::build(cfg.model, cfg.init_seed);
  }

  TrainCallbacks cb;
  cb.on_epoch_end = [&](const TrainState& st) {
    write_text(outp / "loss.csv", loss_csv(st));
    if (cfg.train.checkpoint_every > 0 && st.epoch % cfg.train.checkpoint_every == 0) {
      save_checkpoint(epoch_checkpoint(outp, st.epoch), *model, st);
    }
    out << "epoch " << st.epoch << " loss " << st.loss_trace.back() << "\n" << std::flush;
  };
  train(*model, train_data, cfg.train, state, cb);
  write_text(outp / "loss.csv", loss_csv(state));
  save_checkpoint(outp / "final.msdc", *model, state);
  out << "train: " << state.epoch << " epochs, " << state.optim.step << " steps -> " << (outp / "final.msdc").string()
      << "\n";

  if (cfg.eval.enabled && (!cfg.data.test.empty() || cfg.data.synth_test > 0)) {
    std::vector<SceneSample> test_raw =
        cfg.data.test.empty() ? synthesize(cfg.data.synth_test, cfg.data.synth_seed + cfg.data.test_seed_offset,
                                           cfg.model.height, cfg.model.width, cfg.data.beams)
                              : read_dataset(cfg.data.test);
    check_sizes(test_raw, cfg.model, "test");
    const auto test_data = prepare_all(test_raw, cfg.model.input_mode);
    const EvalOutput ev = evaluate(*model, test_data);
    write_eval_csv(outp / cfg.eval.report, ev.rows, ev.summary);
    out << "eval: " << test_data.size() << " images " << summary_line(ev.summary) << "\n";
  }
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset, const std::string& report,
             std::string pred_dir, bool gt_as_prediction, std::ostream& out) {
  LoadedCheckpoint ck = load_checkpoint(checkpoint);
  const auto raw = read_dataset(dataset);
  if (raw.empty()) throw ConfigError("dataset " + dataset + " has no samples");
  check_sizes(raw, ck.model->config(), "evaluation");
  const auto data = prepare_all(raw, ck.model->config().input_mode);
  EvalOutput ev;
  if (gt_as_prediction) {
    std::vector<DepthImage> preds;
    for (const auto& s : data) preds.push_back(s.gt);
    ev = evaluate_predictions(preds, data);
  } else {
    ev = evaluate(*ck.model, data);
  }
  const fs::path rp(report);
  if (rp.has_parent_path()) fs::create_directories(rp.parent_path());
  write_eval_csv(rp, ev.rows, ev.summary);
  if (pred_dir.empty()) pred_dir = (rp.parent_path() / (rp.stem().string() + "_pred")).string();
  write_predictions(pred_dir, data, ev);
  out << "eval: " << data.size() << " images " << summary_line(ev.summary) << "\n";
  return kOk;
}

std::vector<double> parse_fractions(const std::string& s) {
  std::vector<double> f;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      throw ConfigError("bad fraction '" + item + "'");
    }
    if (used != item.size() || !(v > 0.0 && v <= 1.0)) throw ConfigError("fraction '" + item + "' not in (0, 1]");
    f.push_back(v);
  }
  if (f.empty()) throw ConfigError("--fractions is empty");
  std::sort(f.begin(), f.end());
  f.erase(std::unique(f.begin(), f.end()), f.end());
  return f;
}

int cmd_sweep(const std::vector<std::string>& checkpoints, const std::string& dataset, const std::string& fractions_s,
              std::uint64_t seed, const std::string& report, std::ostream& out) {
  if (checkpoints.empty()) throw ConfigError("at least one --checkpoint is required");
  const auto fractions = parse_fractions(fractions_s);
  const auto raw = read_dataset(dataset);
  if (raw.empty()) throw ConfigError("dataset " + dataset + " has no samples");

  std::vector<LoadedCheckpoint> models;
  std::map<std::string, int> mode_uses;
  for (const auto& c : checkpoints) {
    models.push_back(load_checkpoint(c));
    check_sizes(raw, models.back().model->config(), "sweep");
    ++mode_uses[std::string(to_string(models.back().model->config().input_mode))];
  }
  std::string csv = "model,fraction,rmse_mm,rel,delta1\n";
  char buf[256];
  for (std::size_t m = 0; m < models.size(); ++m) {
    nn::Model& model = *models[m].model;
    std::string label(to_string(model.config().input_mode));
    if (mode_uses[label] > 1) label += "@" + fs::path(checkpoints[m]).stem().string();
    for (double f : fractions) {
      const auto data = prepare_all(raw, model.config().input_mode, f, seed);
      const EvalOutput ev = evaluate(model, data);
      std::snprintf(buf, sizeof(buf), "%s,%.4f,%.6f,%.8f,%.6f\n", label.c_str(), f, ev.summary.rmse_m * 1000.0,
                    ev.summary.rel, ev.summary.delta1);
      csv += buf;
      out << label << " fraction " << f << " " << summary_line(ev.summary) << "\n";
    }
  }
  write_text(report, csv);
  return kOk;
}

int cmd_stats(const std::string& dataset, std::ostream& out) {
  const auto ids = read_manifest(dataset);
  std::vector<DepthImage> proj;
  for (const auto& id : ids) {
    const SceneSample s = read_sample(dataset, id);
    proj.push_back(make_proj_d(project_scan(s.scan, s.rig.lidar_to_camera, s.rig.K), s.rig.K.height, s.rig.K.width));
  }
  const RowStats st = scan_row_stats(proj);
  char buf[160];
  std::snprintf(buf, sizeof(buf), "min_v: mean=%.3f std=%.3f p5=%d p95=%d\n", st.mean_min_v, st.std_min_v, st.p5,
                st.p95);
  out << buf << "images: " << st.n_images << " excluded: " << st.n_excluded << "\n";
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-stage depth prediction from RGB and a 2D LiDAR scan"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
  synth->add_option("--scenes", sa.scenes, "number of samples")->required();
  synth->add_option("--out", sa.out, "output dataset directory")->required();
  synth->add_option("--seed", sa.seed, "generator seed");
  synth->add_option("--height", sa.height, "image height");
  synth->add_option("--width", sa.width, "image width");
  synth->add_option("--beams", sa.beams, "beams per scan");
  synth->add_flag("--fronto-parallel", sa.fronto, "bare-wall scenes facing the camera");

  std::string dataset, out_dir, mode = "ref-d";
  auto* encode = app.add_subcommand("encode", "write proj-d or ref-d channels");
  encode->add_option("--dataset", dataset)->required();
  encode->add_option("--mode", mode)->required();
  encode->add_option("--out", out_dir)->required();

  std::string config, resume;
  auto* trn = app.add_subcommand("train", "train a model from a JSON run config");
  trn->add_option("--config", config)->required();
  trn->add_option("--out", out_dir)->required();
  trn->add_option("--resume", resume, "continue from this checkpoint");

  std::string checkpoint, report, pred_dir;
  bool gt_pred = false;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--dataset", dataset)->required();
  ev->add_option("--report", report)->required();
  ev->add_option("--pred-dir", pred_dir, "PNG output dir (default <report>_pred)");
  ev->add_flag("--gt-as-prediction", gt_pred, "score the ground truth itself");

  std::vector<std::string> checkpoints;
  std::string fractions = "0.1,0.25,0.5,0.75,1.0";
  std::uint64_t seed = 0;
  auto* sweep = app.add_subcommand("sweep-dropout", "evaluate under scan dropout");
  sweep->add_option("--checkpoint", checkpoints)->required();
  sweep->add_option("--dataset", dataset)->required();
  sweep->add_option("--fractions", fractions);
  sweep->add_option("--seed", seed);
  sweep->add_option("--report", report)->required();

  auto* stats = app.add_subcommand("stats", "topmost scan row statistics");
  stats->add_option("--dataset", dataset)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kBadArgs;
  }

  try {
    if (*synth) return cmd_synth(sa, out);
    if (*encode) return cmd_encode(dataset, mode, out_dir, out);
    if (*trn) return cmd_train(config, out_dir, resume, out);
    if (*ev) return cmd_eval(checkpoint, dataset, report, pred_dir, gt_pred, out);
    if (*sweep) return cmd_sweep(checkpoints, dataset, fractions, seed, report, out);
    if (*stats) return cmd_stats(dataset, out);
  } catch (const MissingFileError& e) {
    err << "error: " << e.what() << "\n";
    return kBadInput;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << "\n";
    return kBadInput;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kBadArgs;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return kInternal;
  }
  return kInternal;
}

}  // namespace msdpn::cli
