#include "msdpn/cli.hpp"
#include "msdpn/dataset.hpp"
#include "msdpn/encoding.hpp"
#include "msdpn/tensor_io.hpp"

#include <doctest.h>

#include <chrono>
#include <cstdlib>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <sstream>

#include <sys/wait.h>

using namespace msdpn;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "msdpn");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("msdpn_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& s) {
  std::ofstream os(p, std::ios::binary);
  os << s;
}

// relative path -> contents, for whole-directory comparisons
std::map<std::string, std::string> snapshot(const fs::path& dir) {
  std::map<std::string, std::string> m;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) m[fs::relative(e.path(), dir).string()] = slurp(e.path());
  }
  return m;
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

std::vector<std::string> split(const std::string& s, char sep = ',') {
  std::vector<std::string> out;
  std::stringstream ss(s);
  for (std::string f; std::getline(ss, f, sep);) out.push_back(f);
  return out;
}

const char* kTinyModel = R"("model": {"stages": 2, "width_mult": 0.125, "height": 32, "width": 32, "csfa": "full")";

std::string config(const std::string& train_dir, const std::string& train_extra, const std::string& mode = "ref-d") {
  return std::string("{\"data\": {\"train\": \"") + train_dir + "\"}, " + kTinyModel + ", \"input_mode\": \"" + mode +
         "\"}, \"train\": {\"batch_size\": 2, \"lr\": 1e-3" + train_extra + "}, \"eval\": {\"enabled\": false}}";
}

// Small shared dataset for the train/eval/sweep cases.
const fs::path& tiny_dataset() {
  static const fs::path dir = [] {
    const fs::path d = scratch("tiny") / "ds";
    REQUIRE(run({"synth", "--scenes", "4", "--out", d.string(), "--seed", "5", "--height", "32", "--width", "32"}).code ==
            0);
    return d;
  }();
  return dir;
}

fs::path train_model(const std::string& name, const std::string& mode) {
  const fs::path dir = scratch(name);
  spit(dir / "cfg.json", config(tiny_dataset().string(), ", \"epochs\": 1", mode));
  const auto r = run({"train", "--config", (dir / "cfg.json").string(), "--out", (dir / "out").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  return dir / "out" / "final.msdc";
}

}  // namespace

TEST_CASE("synth") {
  const fs::path dir = scratch("synth");
  auto r = run({"synth", "--scenes", "0", "--out", (dir / "empty").string()});
  CHECK(r.code == 0);
  CHECK(read_manifest(dir / "empty").empty());
  CHECK(read_dataset(dir / "empty").empty());

  const auto t0 = std::chrono::steady_clock::now();
  r = run({"synth", "--scenes", "16", "--out", (dir / "a").string(), "--seed", "9"});
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(r.code == 0);
  CHECK(r.out == "synth: 16 samples -> " + (dir / "a").string() + "\n");
  CHECK(secs < 10.0);
  REQUIRE(run({"synth", "--scenes", "16", "--out", (dir / "b").string(), "--seed", "9"}).code == 0);
  CHECK(snapshot(dir / "a") == snapshot(dir / "b"));
  REQUIRE(run({"synth", "--scenes", "16", "--out", (dir / "c").string(), "--seed", "10"}).code == 0);
  CHECK(snapshot(dir / "a") != snapshot(dir / "c"));

  CHECK(run({"synth", "--scenes", "-1", "--out", (dir / "d").string()}).code == 1);
  CHECK(run({"synth", "--out", (dir / "d").string()}).code == 1);
}

TEST_CASE("encode") {
  const fs::path dir = scratch("encode");
  REQUIRE(run({"synth", "--scenes", "5", "--out", (dir / "ds").string(), "--height", "48", "--width", "64"}).code == 0);
  const auto before = snapshot(dir / "ds");
  REQUIRE(run({"encode", "--dataset", (dir / "ds").string(), "--mode", "ref-d", "--out", (dir / "r1").string()}).code ==
          0);
  REQUIRE(run({"encode", "--dataset", (dir / "ds").string(), "--mode", "ref-d", "--out", (dir / "r2").string()}).code ==
          0);
  REQUIRE(run({"encode", "--dataset", (dir / "ds").string(), "--mode", "proj-d", "--out", (dir / "p").string()}).code ==
          0);
  CHECK(snapshot(dir / "r1") == snapshot(dir / "r2"));
  CHECK(snapshot(dir / "ds") == before);

  for (const auto& id : read_manifest(dir / "ds")) {
    CHECK(fs::exists(dir / "r1" / (id + ".png")));
    const Tensor proj = read_tensor(dir / "p" / (id + ".msdt"));
    const Tensor ref = read_tensor(dir / "r1" / (id + ".msdt"));
    const auto H = proj.shape()[0], W = proj.shape()[1];
    for (std::int64_t u = 0; u < W; ++u) {
      bool any = false;
      for (std::int64_t v = 0; v < H; ++v) any = any || proj[v * W + u] > 0;
      for (std::int64_t v = 0; v < H; ++v) {
        const float p = proj[v * W + u], q = ref[v * W + u];
        if (p > 0) CHECK(q == p);
        CHECK((q > 0) == any);
      }
    }
  }

  // a scan with no valid beams encodes to zeros
  SceneSample s = read_sample(dir / "ds", read_manifest(dir / "ds").front());
  s.id = "blank";
  std::fill(s.scan.valid.begin(), s.scan.valid.end(), false);
  write_dataset(dir / "blank", {s});
  REQUIRE(run({"encode", "--dataset", (dir / "blank").string(), "--mode", "proj-d", "--out", (dir / "bp").string()})
              .code == 0);
  const Tensor blank = read_tensor(dir / "bp" / "blank.msdt");
  for (float v : blank.values()) CHECK(v == 0.0f);

  CHECK(run({"encode", "--dataset", (dir / "ds").string(), "--mode", "rgb", "--out", (dir / "x").string()}).code == 1);
  CHECK(run({"encode", "--dataset", (dir / "nope").string(), "--mode", "ref-d", "--out", (dir / "x").string()}).code ==
        2);
}

TEST_CASE("train config errors") {
  const fs::path dir = scratch("cfgerr");
  spit(dir / "unknown.json", R"({"train": {"lr": 1e-3, "learning_rate": 1}})");
  auto r = run({"train", "--config", (dir / "unknown.json").string(), "--out", (dir / "o").string()});
  CHECK(r.code == 1);
  CHECK(r.err.find("learning_rate") != std::string::npos);
  spit(dir / "type.json", R"({"train": {"epochs": "ten"}})");
  CHECK(run({"train", "--config", (dir / "type.json").string(), "--out", (dir / "o").string()}).code == 1);
  spit(dir / "bad.json", R"({"train": {"lr": -1}})");
  CHECK(run({"train", "--config", (dir / "bad.json").string(), "--out", (dir / "o").string()}).code == 1);
  spit(dir / "syntax.json", "{");
  CHECK(run({"train", "--config", (dir / "syntax.json").string(), "--out", (dir / "o").string()}).code == 1);
  CHECK(run({"train", "--config", (dir / "none.json").string(), "--out", (dir / "o").string()}).code == 2);
  // 48x48 data into a 32x32 model
  REQUIRE(run({"synth", "--scenes", "2", "--out", (dir / "ds48").string(), "--height", "48", "--width", "48"}).code ==
          0);
  spit(dir / "size.json", config((dir / "ds48").string(), ""));
  CHECK(run({"train", "--config", (dir / "size.json").string(), "--out", (dir / "o").string()}).code == 1);
}

TEST_CASE("train with lr 0 gives a flat loss curve") {
  const fs::path dir = scratch("flat");
  spit(dir / "cfg.json", std::string("{\"data\": {\"train\": \"") + tiny_dataset().string() + "\"}, " + kTinyModel +
                             "}, \"train\": {\"batch_size\": 4, \"lr\": 0, \"epochs\": 3}, \"eval\": {\"enabled\": false}}");
  const auto r = run({"train", "--config", (dir / "cfg.json").string(), "--out", (dir / "o").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto l = lines(slurp(dir / "o" / "loss.csv"));
  REQUIRE(l.size() == 4);
  CHECK(l[0] == "epoch,loss");
  CHECK(split(l[1])[1] == split(l[2])[1]);
  CHECK(split(l[1])[1] == split(l[3])[1]);
  CHECK(fs::exists(dir / "o" / "config.resolved.json"));
  CHECK(fs::exists(dir / "o" / "final.msdc"));
}

TEST_CASE("resumed training reproduces the uninterrupted run") {
  const fs::path dir = scratch("resume");
  spit(dir / "cfg.json", config(tiny_dataset().string(), ", \"epochs\": 4, \"checkpoint_every\": 2"));
  REQUIRE(run({"train", "--config", (dir / "cfg.json").string(), "--out", (dir / "full").string()}).code == 0);
  CHECK(fs::exists(dir / "full" / "checkpoint_e0002.msdc"));
  CHECK(fs::exists(dir / "full" / "checkpoint_e0004.msdc"));
  const auto r = run({"train", "--config", (dir / "cfg.json").string(), "--out", (dir / "resumed").string(),
                      "--resume", (dir / "full" / "checkpoint_e0002.msdc").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  CHECK(slurp(dir / "full" / "final.msdc") == slurp(dir / "resumed" / "final.msdc"));
  CHECK(slurp(dir / "full" / "loss.csv") == slurp(dir / "resumed" / "loss.csv"));

  // resuming under a different architecture is a config error
  spit(dir / "other.json", config(tiny_dataset().string(), ", \"epochs\": 4", "proj-d"));
  CHECK(run({"train", "--config", (dir / "other.json").string(), "--out", (dir / "x").string(), "--resume",
             (dir / "full" / "checkpoint_e0002.msdc").string()})
            .code == 1);
}

TEST_CASE("eval") {
  const fs::path ck = train_model("eval_model", "ref-d");
  const fs::path dir = scratch("eval");
  const auto before = snapshot(tiny_dataset());

  auto r = run({"eval", "--checkpoint", (dir / "missing.msdc").string(), "--dataset", tiny_dataset().string(),
                "--report", (dir / "x.csv").string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("missing.msdc") != std::string::npos);

  spit(dir / "corrupt.msdc", "MSDC garbage");
  CHECK(run({"eval", "--checkpoint", (dir / "corrupt.msdc").string(), "--dataset", tiny_dataset().string(), "--report",
             (dir / "x.csv").string()})
            .code == 2);

  r = run({"eval", "--checkpoint", ck.string(), "--dataset", tiny_dataset().string(), "--report",
           (dir / "gt.csv").string(), "--gt-as-prediction"});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  auto l = lines(slurp(dir / "gt.csv"));
  REQUIRE(l.size() == 1 + 4 + 1);
  CHECK(split(l.back())[0] == "ALL");
  CHECK(std::stod(split(l.back())[3]) == 100.0);
  CHECK(std::stod(split(l.back())[1]) == 0.0);

  r = run({"eval", "--checkpoint", ck.string(), "--dataset", tiny_dataset().string(), "--report",
           (dir / "model.csv").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  l = lines(slurp(dir / "model.csv"));
  CHECK(l.size() == 6);
  for (const auto& id : read_manifest(tiny_dataset())) CHECK(fs::exists(dir / "model_pred" / (id + ".png")));
  CHECK(snapshot(tiny_dataset()) == before);

  // same inputs, same report
  REQUIRE(run({"eval", "--checkpoint", ck.string(), "--dataset", tiny_dataset().string(), "--report",
               (dir / "model2.csv").string()})
              .code == 0);
  CHECK(slurp(dir / "model.csv") == slurp(dir / "model2.csv"));
}

TEST_CASE("sweep-dropout") {
  const fs::path ref = train_model("sweep_ref", "ref-d");
  const fs::path proj = train_model("sweep_proj", "proj-d");
  const fs::path dir = scratch("sweep");
  auto r = run({"sweep-dropout", "--checkpoint", proj.string(), "--checkpoint", ref.string(), "--dataset",
                tiny_dataset().string(), "--fractions", "1.0,0.25,0.5", "--seed", "3", "--report",
                (dir / "sweep.csv").string()});
  REQUIRE_MESSAGE(r.code == 0, r.err);
  const auto l = lines(slurp(dir / "sweep.csv"));
  REQUIRE(l.size() == 7);
  CHECK(l[0] == "model,fraction,rmse_mm,rel,delta1");
  const char* want[] = {"proj-d", "proj-d", "proj-d", "ref-d", "ref-d", "ref-d"};
  const double fr[] = {0.25, 0.5, 1.0, 0.25, 0.5, 1.0};
  for (int i = 0; i < 6; ++i) {
    const auto f = split(l[static_cast<std::size_t>(i + 1)]);
    REQUIRE(f.size() == 5);
    CHECK(f[0] == want[i]);
    CHECK(std::stod(f[1]) == fr[i]);
  }

  // the full-scan row matches plain eval
  REQUIRE(run({"eval", "--checkpoint", ref.string(), "--dataset", tiny_dataset().string(), "--report",
               (dir / "eval.csv").string()})
              .code == 0);
  const auto all = split(lines(slurp(dir / "eval.csv")).back());
  const auto full = split(l[6]);
  CHECK(std::stod(full[2]) == doctest::Approx(std::stod(all[1])).epsilon(1e-5));
  CHECK(std::stod(full[4]) == doctest::Approx(std::stod(all[3])).epsilon(1e-5));

  // same seed, same report
  REQUIRE(run({"sweep-dropout", "--checkpoint", proj.string(), "--checkpoint", ref.string(), "--dataset",
               tiny_dataset().string(), "--fractions", "0.5,1.0,0.25", "--seed", "3", "--report",
               (dir / "sweep2.csv").string()})
              .code == 0);
  CHECK(slurp(dir / "sweep.csv") == slurp(dir / "sweep2.csv"));

  CHECK(run({"sweep-dropout", "--checkpoint", ref.string(), "--dataset", tiny_dataset().string(), "--fractions",
             "0,1", "--report", (dir / "x.csv").string()})
            .code == 1);
}

TEST_CASE("stats") {
  const fs::path dir = scratch("stats");
  REQUIRE(run({"synth", "--scenes", "1", "--out", (dir / "one").string()}).code == 0);
  auto r = run({"stats", "--dataset", (dir / "one").string()});
  REQUIRE(r.code == 0);
  const std::regex fmt(R"(min_v: mean=[0-9.]+ std=0\.000 p5=\d+ p95=\d+\nimages: 1 excluded: 0\n)");
  CHECK(std::regex_match(r.out, fmt));

  // LiDAR at the optical centre: the scan plane images onto the row through cy
  SceneConfig sc;
  sc.lidar_to_camera.t = Vec3::Zero();
  std::vector<SceneSample> samples;
  for (int i = 0; i < 5; ++i) {
    samples.push_back(make_sample(static_cast<std::uint64_t>(i), 64, 64, sc));
    samples.back().id = "p" + std::to_string(i);
  }
  write_dataset(dir / "planar", samples);
  r = run({"stats", "--dataset", (dir / "planar").string()});
  REQUIRE(r.code == 0);
  std::smatch m;
  REQUIRE(std::regex_search(r.out, m, std::regex(R"(mean=([0-9.]+))")));
  CHECK(std::fabs(std::stod(m[1]) - samples[0].rig.K.cy) <= 0.5);

  CHECK(run({"stats", "--dataset", (dir / "nope").string()}).code == 2);
}

TEST_CASE("argument handling") {
  CHECK(run({}).code == 1);
  CHECK(run({"frobnicate"}).code == 1);
  CHECK(run({"synth", "--scenes", "x", "--out", "y"}).code == 1);
  CHECK(run({"--help"}).code == 0);
}

TEST_CASE("standalone binary") {
  const char* bin = std::getenv("MSDPN_BIN");
  if (!bin) return;
  const fs::path dir = scratch("bin");
  const std::string cmd = std::string(bin) + " synth --scenes 2 --out " + (dir / "ds").string() + " > " +
                          (dir / "log").string() + " 2>&1";
  CHECK(std::system(cmd.c_str()) == 0);
  CHECK(read_manifest(dir / "ds").size() == 2);
  const std::string bad = std::string(bin) + " stats --dataset " + (dir / "nope").string() + " > /dev/null 2>&1";
  const int status = std::system(bad.c_str());
  CHECK(WEXITSTATUS(status) == 2);
}
