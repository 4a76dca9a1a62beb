#include <doctest.h>

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "run_config.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code = -1;
  std::string output;
};

Result cli(const std::string& args, const std::string& env = {}) {
  const std::string cmd = env + (env.empty() ? "" : " ") + std::string(SIMVAE_CLI) + " " + args + " 2>&1";
  Result r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  while (std::fgets(buf.data(), buf.size(), pipe)) r.output += buf.data();
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("simvae_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Small model and corpus so each invocation takes well under a second.
const char* kConfig = R"({
  "model": {"input": [12, 12, 12],
            "encoder": [{"kernel": 3, "channels": 4, "stride": 2}, {"kernel": 3, "channels": 6, "stride": 2}],
            "hidden": 12, "latent": 3, "decoder_channels": 6,
            "decoder": [{"kernel": 3, "channels": 4, "stride": 2}, {"kernel": 3, "channels": 1, "stride": 2}]},
  "training": {"epochs": 4, "batch_size": 8, "learning_rate": 0.001},
  "sweep": {"rows": [0, 1], "cols": [0, 10]},
  "analysis": {"samples": 3, "levels": 4, "traversal_steps": 3, "resamples": 3}
})";

const char* kSpec = R"({"subjects": 48, "dims": [12, 12, 12]})";

struct Fixture {
  fs::path dir, config, spec, data;
  Fixture(const std::string& name) : dir(scratch(name)) {
    config = dir / "config.json";
    spec = dir / "spec.json";
    data = dir / "data";
    write(config, kConfig);
    write(spec, kSpec);
    const Result r = cli("gen-data --spec " + spec.string() + " --seed 7 --out " + data.string());
    REQUIRE_MESSAGE(r.code == 0, r.output);
  }
  std::string cfg() const { return " --config " + config.string(); }
};

}  // namespace

TEST_SUITE("cli usage") {
  TEST_CASE("help documents every config section and exits 0") {
    for (const char* sub : {"gen-data", "train", "sweep", "analyze"}) {
      const Result r = cli(std::string(sub) + " --help");
      CHECK(r.code == 0);
      for (const char* key : {"learning_rate", "tau_high_percentile", "traversal_steps", "split_seed", "decoder_channels",
                              "mci_threshold", "SIMVAE_OUTPUT_ROOT", "SIMVAE_THREADS"}) {
        CHECK_MESSAGE(r.output.find(key) != std::string::npos, sub << " help lacks " << key);
      }
    }
  }

  TEST_CASE("usage errors exit 2") {
    CHECK(cli("").code == 2);
    CHECK(cli("frobnicate").code == 2);
    CHECK(cli("train").code == 2);
    CHECK(cli("sweep --grid diagonal --data x").code == 2);
  }

  TEST_CASE("unknown config keys are named") {
    const fs::path dir = scratch("badkeys");
    write(dir / "spec.json", R"({"subjects": 4, "dimz": [8, 8, 8]})");
    Result r = cli("gen-data --spec " + (dir / "spec.json").string() + " --out " + (dir / "out").string());
    CHECK(r.code == 2);
    CHECK(r.output.find("dimz") != std::string::npos);
    write(dir / "cfg.json", R"({"training": {"learnig_rate": 1}})");
    r = cli("gen-data --config " + (dir / "cfg.json").string() + " --out " + (dir / "out2").string());
    CHECK(r.code == 2);
    CHECK(r.output.find("training.learnig_rate") != std::string::npos);
  }

  TEST_CASE("run config parsing") {
    using simvae::cli::RunConfig;
    const RunConfig d = RunConfig::from_json(simvae::Json::object());
    CHECK(d.analysis.levels == 11);
    CHECK(d.analysis.samples == 32);
    CHECK(d.analysis.resamples == 10);
    CHECK_FALSE(d.alpha_explicit);
    const RunConfig s = RunConfig::from_json(simvae::Json::parse(R"({"seed": 5, "training": {"alpha": 0}})"));
    CHECK(s.training.seed == 5);
    CHECK(s.model.seed == 5);
    CHECK(s.corpus.seed == 5);
    CHECK(s.data.split_seed == 5);
    CHECK(s.alpha_explicit);
    const RunConfig back = RunConfig::from_json(s.to_json());
    CHECK(back.to_json() == s.to_json());
    CHECK_THROWS_AS(RunConfig::from_json(simvae::Json::parse(R"({"analysis": {"levels": 2}})")), simvae::ConfigError);
    CHECK_THROWS_AS(RunConfig::from_json(simvae::Json::parse(R"({"extra": 1})")), simvae::ConfigError);
  }
}

TEST_SUITE("cli gen-data") {
  TEST_CASE("deterministic corpus with the requested subject count") {
    const fs::path dir = scratch("gen");
    write(dir / "spec.json", kSpec);
    const std::string spec = " --spec " + (dir / "spec.json").string();
    const Result a = cli("gen-data" + spec + " --seed 7 --subjects 20 --out " + (dir / "a").string());
    const Result b = cli("gen-data" + spec + " --seed 7 --subjects 20 --threads 3 --out " + (dir / "b").string());
    REQUIRE(a.code == 0);
    REQUIRE(b.code == 0);
    CHECK(a.output.find("subjects 20") != std::string::npos);
    const std::string manifest = slurp(dir / "a" / "manifest.csv");
    CHECK(std::count(manifest.begin(), manifest.end(), '\n') == 21);
    CHECK(slurp(dir / "a" / "files.json") == slurp(dir / "b" / "files.json"));
    CHECK(slurp(dir / "a" / "volumes" / "sub-0003.vol") == slurp(dir / "b" / "volumes" / "sub-0003.vol"));
  }

  TEST_CASE("output root from the environment gets a stamped run directory") {
    const fs::path dir = scratch("envroot");
    write(dir / "spec.json", R"({"subjects": 3, "dims": [8, 8, 8]})");
    const Result r =
        cli("gen-data --spec " + (dir / "spec.json").string(), "SIMVAE_OUTPUT_ROOT=" + (dir / "runs").string());
    REQUIRE(r.code == 0);
    std::size_t runs = 0;
    for (const auto& e : fs::directory_iterator(dir / "runs")) {
      ++runs;
      CHECK(e.path().filename().string().rfind("gen-data-", 0) == 0);
      CHECK(fs::exists(e.path() / "files.json"));
      CHECK(fs::exists(e.path() / "run.log"));
    }
    CHECK(runs == 1);
    CHECK(cli("gen-data --spec " + (dir / "spec.json").string() + " --out " + (dir / "o").string(),
                 "SIMVAE_THREADS=zero")
              .code == 2);
  }
}

TEST_SUITE("cli pipeline") {
  TEST_CASE("train, resume and analyze") {
    Fixture f("pipeline");
    const std::string data = " --data " + f.data.string();
    const Result full = cli("train" + data + f.cfg() + " --out " + (f.dir / "full").string());
    REQUIRE_MESSAGE(full.code == 0, full.output);
    CHECK(full.output.find("final epoch 4") != std::string::npos);
    CHECK(fs::exists(f.dir / "full" / "checkpoint.bin"));
    CHECK(fs::exists(f.dir / "full" / "history.csv"));

    SUBCASE("resume reproduces the uninterrupted run bitwise") {
      REQUIRE(cli("train" + data + f.cfg() + " --epochs 2 --out " + (f.dir / "half").string()).code == 0);
      const Result resumed = cli("train" + data + f.cfg() + " --resume " + (f.dir / "half" / "checkpoint.bin").string() +
                                    " --epochs 4 --out " + (f.dir / "resumed").string());
      REQUIRE_MESSAGE(resumed.code == 0, resumed.output);
      CHECK(slurp(f.dir / "full" / "checkpoint.bin") == slurp(f.dir / "resumed" / "checkpoint.bin"));
      CHECK(slurp(f.dir / "full" / "history.csv") == slurp(f.dir / "resumed" / "history.csv"));
    }

    SUBCASE("all tasks produce the complete artifact set") {
      const fs::path out = f.dir / "an";
      const Result r = cli("analyze --checkpoint " + (f.dir / "full" / "checkpoint.bin").string() + data + f.cfg() +
                              " --out " + out.string());
      REQUIRE_MESSAGE(r.code == 0, r.output);
      for (const char* p : {"codes.csv", "correlations.csv", "classification.csv", "glm/slope.vol", "glm/intercept.vol",
                            "glm/t.vol", "glm/roi_summary.csv", "traversal/latent_0.pgm", "traversal/latent_2.pgm",
                            "traversal/traversal.csv", "files.json"}) {
        CHECK_MESSAGE(fs::exists(out / p), p);
      }
      const std::string cls = slurp(out / "classification.csv");
      for (const char* set : {"supervised", "remaining", "covariate", "latent_0", "latent_1", "latent_2"}) {
        CHECK(cls.find(std::string("\n") + set + ",") != std::string::npos);
      }
      const std::string cor = slurp(out / "correlations.csv");
      for (const char* cov : {",score,", ",roi_hippocampus_left,", ",roi_motor_strip,", ",tx,", ",gain,"}) {
        CHECK_MESSAGE(cor.find(cov) != std::string::npos, cov);
      }
    }

    SUBCASE("a single task produces only its outputs") {
      const fs::path out = f.dir / "glm_only";
      const Result r = cli("analyze --tasks glm --checkpoint " + (f.dir / "full" / "checkpoint.bin").string() + data +
                              f.cfg() + " --out " + out.string());
      REQUIRE_MESSAGE(r.code == 0, r.output);
      CHECK(fs::exists(out / "glm" / "slope.vol"));
      CHECK_FALSE(fs::exists(out / "classification.csv"));
      CHECK_FALSE(fs::exists(out / "correlations.csv"));
      CHECK_FALSE(fs::exists(out / "codes.csv"));
      CHECK_FALSE(fs::exists(out / "traversal"));
    }

    SUBCASE("bad analyze inputs exit 2") {
      const std::string ckpt = " --checkpoint " + (f.dir / "full" / "checkpoint.bin").string();
      Result r = cli("analyze" + ckpt + data + f.cfg() + " --masks /nonexistent/mask.vol --out " +
                        (f.dir / "m").string());
      CHECK(r.code == 2);
      CHECK(r.output.find("mask") != std::string::npos);
      write(f.dir / "other.json", R"({"model": {"input": [12, 12, 12], "encoder": [{"kernel": 3, "channels": 5, "stride": 2},
        {"kernel": 3, "channels": 6, "stride": 2}], "hidden": 12, "latent": 3, "decoder_channels": 6,
        "decoder": [{"kernel": 3, "channels": 4, "stride": 2}, {"kernel": 3, "channels": 1, "stride": 2}]}})");
      r = cli("analyze" + ckpt + data + " --config " + (f.dir / "other.json").string() + " --out " +
                 (f.dir / "x").string());
      CHECK(r.code == 2);
      CHECK(r.output.find("incompatible checkpoint") != std::string::npos);
      write(f.dir / "garbage.bin", "not a checkpoint");
      r = cli("analyze --checkpoint " + (f.dir / "garbage.bin").string() + data + " --out " + (f.dir / "y").string());
      CHECK(r.code == 2);
      CHECK(cli("analyze --tasks glm,dance" + ckpt + data + " --out " + (f.dir / "z").string()).code == 2);
    }
  }

  TEST_CASE("train rejects a model that does not fit the corpus and fails on a diverging run") {
    Fixture f("train_errors");
    const std::string data = " --data " + f.data.string();
    Result r = cli("train" + data + " --out " + (f.dir / "desk").string());  // desk preset expects 32^3
    CHECK(r.code == 2);
    CHECK(r.output.find("does not match") != std::string::npos);
    std::string cfg = kConfig;
    cfg.replace(cfg.find("0.001"), 5, "1e300");
    write(f.dir / "diverge.json", cfg);
    r = cli("train" + data + " --config " + (f.dir / "diverge.json").string() + " --out " + (f.dir / "d").string());
    CHECK(r.code == 1);
    CHECK(r.output.find("non-finite loss at epoch") != std::string::npos);
  }

  TEST_CASE("sweep writes one row per cell and enforces alpha = 0 for dim-beta") {
    Fixture f("sweep");
    const std::string data = " --data " + f.data.string();
    Result r = cli("sweep" + data + f.cfg() + " --threads 2 --out " + (f.dir / "ba").string());
    REQUIRE_MESSAGE(r.code == 0, r.output);
    const std::string csv = slurp(f.dir / "ba" / "grid.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 5);
    CHECK(slurp(f.dir / "ba" / "grid.pgm").rfind("P5\n32 32\n255\n", 0) == 0);

    write(f.dir / "dim.json", R"({"model": )" + simvae::Json::parse(kConfig)["model"].dump() +
                                  R"(, "training": {"epochs": 2, "alpha": 0.5}, "sweep": {"rows": [1, 2], "cols": [0, 1]}})");
    r = cli("sweep --grid dim-beta" + data + " --config " + (f.dir / "dim.json").string() + " --out " +
               (f.dir / "dim").string());
    CHECK(r.code == 2);
    CHECK(r.output.find("alpha") != std::string::npos);
  }

  TEST_CASE("identical invocations produce byte-identical outputs") {
    Fixture f("determinism");
    const std::string data = " --data " + f.data.string();
    for (const char* run : {"r1", "r2"}) {
      const fs::path out = f.dir / run;
      REQUIRE(cli("gen-data --spec " + f.spec.string() + " --seed 3 --out " + (out / "data").string()).code == 0);
      REQUIRE(cli("train --data " + (out / "data").string() + f.cfg() + " --seed 3 --out " + (out / "train").string())
                  .code == 0);
      REQUIRE(cli("analyze --checkpoint " + (out / "train" / "checkpoint.bin").string() + " --data " +
                     (out / "data").string() + f.cfg() + " --seed 3 --out " + (out / "an").string())
                  .code == 0);
    }
    for (const char* stage : {"data", "train", "an"}) {
      const std::string a = slurp(f.dir / "r1" / stage / "files.json");
      CHECK(!a.empty());
      CHECK_MESSAGE(a == slurp(f.dir / "r2" / stage / "files.json"), stage);
    }
  }
}
