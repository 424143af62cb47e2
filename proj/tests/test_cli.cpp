#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

struct RunResult {
  int exit_code;
  std::string output;
};

RunResult run_cli(const std::string& args) {
  static int counter = 0;
  const fs::path log = fs::temp_directory_path() /
                       ("cafe_cli_out_" + std::to_string(counter++) + ".log");
  const std::string cmd = std::string(CAFE_CLI_PATH) + " " + args + " > " +
                          log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  std::ifstream f(log);
  std::ostringstream os;
  os << f.rdbuf();
  return {WEXITSTATUS(status), os.str()};
}

fs::path temp_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("cafe_cli_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  REQUIRE(f.good());
  std::ostringstream os;
  os << f.rdbuf();
  return os.str();
}

void write_tiny_config(const fs::path& path) {
  std::ofstream f(path);
  f << "[run]\n"
       "seed = 3\n"
       "[vit]\n"
       "image_size = 12\n"
       "patch_size = 4\n"
       "depth = 2\n"
       "heads = 4\n"
       "model_dim = 64\n"
       "mlp_dim = 32\n"
       "[sae]\n"
       "layer = 2\n"
       "[synthetic]\n"
       "n_images = 3\n"
       "n_local = 1\n"
       "n_nonlocal = 1\n"
       "sources_per_feature = 2\n"
       "[attribution]\n"
       "shap_samples = 64\n"
       "ig_steps = 16\n";
}

}  // namespace

TEST_CASE("cli: no arguments prints help and exits 1") {
  RunResult r = run_cli("");
  CHECK(r.exit_code == 1);
  CHECK(r.output.find("gen-synthetic") != std::string::npos);
  CHECK(r.output.find("insertion-eval") != std::string::npos);
}

TEST_CASE("cli: unknown subcommand exits 1") {
  RunResult r = run_cli("frobnicate");
  CHECK(r.exit_code == 1);
}

TEST_CASE("cli: usage errors exit 1, data errors exit 2") {
  const fs::path dir = temp_dir("errors");
  RunResult r = run_cli("gen-synthetic --config " + (dir / "absent.ini").string() +
                        " --out " + (dir / "o").string());
  CHECK(r.exit_code == 2);  // missing config file is a data problem

  std::ofstream(dir / "bad.ini") << "[vit]\nbogus = 1\n";
  r = run_cli("gen-synthetic --config " + (dir / "bad.ini").string() + " --out " +
              (dir / "o").string());
  CHECK(r.exit_code == 1);  // unknown key is usage
}

TEST_CASE("cli: full synthetic pipeline produces the documented artifacts") {
  const fs::path dir = temp_dir("pipeline");
  write_tiny_config(dir / "run.ini");
  const std::string cfg = " --config " + (dir / "run.ini").string();

  RunResult gen = run_cli("gen-synthetic" + cfg + " --out " + (dir / "data").string());
  INFO(gen.output);
  REQUIRE(gen.exit_code == 0);
  CHECK(fs::exists(dir / "data" / "manifest.json"));
  CHECK(fs::exists(dir / "data" / "vit.ckpt"));
  CHECK(fs::exists(dir / "data" / "sae.ckpt"));
  CHECK(fs::exists(dir / "data" / "images" / "img_000.ppm"));
  CHECK(fs::exists(dir / "data" / "effective_config.ini"));

  {
    std::ifstream mf(dir / "data" / "manifest.json");
    nlohmann::json manifest = nlohmann::json::parse(mf);
    CHECK(manifest["format_version"] == 1);
    const int grid = manifest["grid"].get<int>();
    for (const auto& f : manifest["features"])
      for (int s : f["sources"].get<std::vector<int>>()) {
        CHECK(s >= 0);
        CHECK(s < grid * grid);
      }
  }

  const std::string manifest_arg =
      " --manifest " + (dir / "data" / "manifest.json").string();

  RunResult erf = run_cli("erf" + cfg + manifest_arg + " --image " +
                          (dir / "data" / "images" / "img_000.ppm").string() +
                          " --feature 0 --method attnlrp --out " +
                          (dir / "erf_out").string());
  INFO(erf.output);
  REQUIRE(erf.exit_code == 0);
  CHECK(fs::exists(dir / "erf_out" / "erf.csv"));
  CHECK(fs::exists(dir / "erf_out" / "erf.ppm"));
  CHECK(fs::exists(dir / "erf_out" / "erf.ppm.norm.txt"));
  CHECK(fs::exists(dir / "erf_out" / "activation.pgm"));

  RunResult ins = run_cli("insertion-eval" + cfg + manifest_arg +
                          " --methods attnlrp,gradient --out " +
                          (dir / "ins_out").string());
  INFO(ins.output);
  REQUIRE(ins.exit_code == 0);
  const std::string curves = slurp(dir / "ins_out" / "curves.csv");
  CHECK(curves.rfind("target_id,method,step,r\n", 0) == 0);
  CHECK(curves.find("attnlrp") != std::string::npos);
  CHECK(curves.find("activation") != std::string::npos);

  RunResult cmp = run_cli("compare" + cfg + manifest_arg + " --out " +
                          (dir / "cmp_out").string());
  INFO(cmp.output);
  REQUIRE(cmp.exit_code == 0);
  const std::string table = slurp(dir / "cmp_out" / "comparison.csv");
  CHECK(table.rfind("method,layer,mean_auc,sd,win_rate,n_targets\n", 0) == 0);

  RunResult scan = run_cli("nonlocal-scan" + cfg + manifest_arg +
                           " --set eval.features_per_layer=2 --out " +
                           (dir / "scan_out").string());
  INFO(scan.output);
  REQUIRE(scan.exit_code == 0);
  const std::string nl = slurp(dir / "scan_out" / "nonlocality.csv");
  CHECK(nl.rfind("layer,feature,sigma,flagged,n_firing_images\n", 0) == 0);
}

TEST_CASE("cli: identical seeds give byte-identical synthetic datasets") {
  const fs::path dir = temp_dir("determinism");
  write_tiny_config(dir / "run.ini");
  const std::string cfg = " --config " + (dir / "run.ini").string();
  REQUIRE(run_cli("gen-synthetic" + cfg + " --out " + (dir / "a").string()).exit_code == 0);
  REQUIRE(run_cli("gen-synthetic" + cfg + " --out " + (dir / "b").string()).exit_code == 0);
  CHECK(slurp(dir / "a" / "vit.ckpt") == slurp(dir / "b" / "vit.ckpt"));
  CHECK(slurp(dir / "a" / "sae.ckpt") == slurp(dir / "b" / "sae.ckpt"));
  CHECK(slurp(dir / "a" / "images" / "img_002.ppm") ==
        slurp(dir / "b" / "images" / "img_002.ppm"));
  CHECK(slurp(dir / "a" / "manifest.json") == slurp(dir / "b" / "manifest.json"));
}

TEST_CASE("cli: CAFE_OUT_DIR is the fallback for --out") {
  const fs::path dir = temp_dir("envout");
  write_tiny_config(dir / "run.ini");
  const fs::path envout = dir / "env_out";
  const std::string cmd = "CAFE_OUT_DIR=" + envout.string() + " " +
                          std::string(CAFE_CLI_PATH) + " gen-synthetic --config " +
                          (dir / "run.ini").string() + " > /dev/null 2>&1";
  REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
  CHECK(fs::exists(envout / "manifest.json"));
}
