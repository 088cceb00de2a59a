#include <doctest.h>

#include <array>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "panodeform/gradsuite.hpp"
#include "panodeform/ops.hpp"
#include "panodeform/pdt_io.hpp"
#include "panodeform/pipeline.hpp"

using namespace panodeform;
using namespace panodeform::pipeline;

namespace {

// Small enough for a full synth -> eval run in a few seconds.
const std::vector<std::string> kTiny{
    "data.n_source=2",         "data.n_target=2",           "data.n_test=1",
    "data.pinhole_size=32",    "data.pano_height=32",       "model.channels=[4,4,8,8]",
    "model.heads=[1,1,1,1]",   "model.embed_dim=8",         "trainer.max_iters=4",
    "trainer.batch_size=1",    "trainer.augment.crop_height=32", "trainer.augment.crop_width=32",
    "adapt.max_iters=3",       "adapt.batch_size=1",        "adapt.augment.crop_height=32",
    "adapt.augment.crop_width=32", "adapt.target_augment.crop_height=32", "adapt.target_augment.crop_width=64"};

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("panodeform_test_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

struct Run {
  int code;
  std::string output;
};

// Runs the CLI binary, capturing stdout and stderr.
Run cli(const std::string& args) {
  const std::string cmd = std::string(PANODEFORM_CLI) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  std::array<char, 4096> buf{};
  while (fgets(buf.data(), static_cast<int>(buf.size()), pipe)) out += buf.data();
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string tiny_sets() {
  std::string s;
  for (const auto& o : kTiny) s += " --set '" + o + "'";
  return s;
}

}  // namespace

TEST_SUITE("pipeline") {
  TEST_CASE("non-empty output directory needs force") {
    const auto dir = scratch("prepare");
    prepare_dir(dir, false);
    prepare_dir(dir, false);  // empty: fine
    std::ofstream(dir / "x") << "1";
    CHECK_THROWS_AS(prepare_dir(dir, false), config::ConfigError);
    CHECK_NOTHROW(prepare_dir(dir, true));
    fs::remove_all(dir);
  }

  TEST_CASE("exit codes by error kind") {
    CHECK(exit_code(config::ConfigError("x")) == 2);
    CHECK(exit_code(std::invalid_argument("x")) == 2);
    CHECK(exit_code(panogeo::DataError("x")) == 3);
    CHECK(exit_code(FormatError("x")) == 3);
    CHECK(exit_code(NumericalError("x")) == 4);
    CHECK(exit_code(std::runtime_error("x")) == 1);
  }

  TEST_CASE("stage errors keep their type and gain the stage name") {
    try {
      run_stage("init-bank", [] { throw panogeo::DataError("no bank"); });
      FAIL("expected a throw");
    } catch (const panogeo::DataError& e) {
      CHECK(std::string(e.what()) == "stage init-bank: no bank");
    }
    CHECK_THROWS_AS(run_stage("adapt-mpa", [] { throw NumericalError("nan"); }), NumericalError);
    CHECK_THROWS_AS(run_stage("eval-none", [] { throw config::ConfigError("bad"); }), config::ConfigError);
    CHECK(run_stage("ok", [] { return 3; }) == 3);
  }

  TEST_CASE("four modes give four reports, and a rerun reproduces them") {
    const auto cfg = config::load({}, kTiny);
    const auto a = scratch("ladder_a"), b = scratch("ladder_b");
    const auto ra = run_pipeline(cfg, a, false);
    REQUIRE(ra.reports.size() == 4);
    for (const auto& mode : cfg.modes) {
      CHECK(fs::exists(a / ("eval-" + mode) / "eval.json"));
      CHECK(fs::exists(a / ("eval-" + mode) / "sectors.csv"));
      if (mode != "none") CHECK(fs::exists(a / ("adapt-" + mode) / "train_log.jsonl"));
    }
    CHECK(fs::exists(a / "config.json"));
    CHECK(fs::exists(a / "summary.json"));
    CHECK(fs::exists(a / "bank" / "bank.json"));
    CHECK(fs::exists(a / "source" / "checkpoint" / "params.json"));

    run_pipeline(cfg, b, false);
    for (const auto& mode : cfg.modes) {
      const auto rel = fs::path("eval-" + mode) / "eval.json";
      CHECK(slurp(a / rel) == slurp(b / rel));
    }
    CHECK(slurp(a / "source/train_log.jsonl") == slurp(b / "source/train_log.jsonl"));
    CHECK(slurp(a / "adapt-mpa+ssl/bank/prototypes.pdt") == slurp(b / "adapt-mpa+ssl/bank/prototypes.pdt"));

    SUBCASE("mpa without a bank is a clear config error") {
      const auto out = scratch("nobank");
      fs::create_directories(out);
      const auto data = open_manifest(a / "data");
      try {
        adapt(cfg, data, a / "source/checkpoint", {}, "mpa", out);
        FAIL("expected a throw");
      } catch (const config::ConfigError& e) {
        CHECK(std::string(e.what()).find("init-bank") != std::string::npos);
      }
      fs::remove_all(out);
    }
    fs::remove_all(a);
    fs::remove_all(b);
  }

  TEST_CASE("only the modes asked for are run") {
    auto overrides = kTiny;
    overrides.push_back("pipeline.modes=[\"none\",\"ssl\"]");
    const auto dir = scratch("ssl_only");
    const auto r = run_pipeline(config::load({}, overrides), dir, false);
    CHECK(r.reports.size() == 2);
    CHECK_FALSE(fs::exists(dir / "bank"));
    fs::remove_all(dir);
  }
}

TEST_SUITE("gradsuite") {
  TEST_CASE("every op passes on a fresh build") {
    const auto cases = gradsuite::run(gradsuite::Scope::kAll);
    CHECK(gradsuite::all_passed(cases));
    std::map<std::string, int> shapes;
    for (const auto& c : cases) ++shapes[c.op];
    for (const auto& [op, n] : shapes) {
      INFO(op);
      CHECK(n >= 5);
    }
  }

  TEST_CASE("a sign bug in the bilinear coordinate backward is caught and named") {
    fault::inject(fault::Kind::kBilinearCoordSign);
    const auto cases = gradsuite::run(gradsuite::Scope::kOp);
    fault::inject(fault::Kind::kNone);
    bool bilinear_failed = false;
    for (const auto& c : cases) {
      if (c.op.rfind("bilinear_sample", 0) == 0 && !c.result.passed) bilinear_failed = true;
      if (c.op == "matmul") CHECK(c.result.passed);
    }
    CHECK(bilinear_failed);
    CHECK(gradsuite::table(cases).find("bilinear_sample") != std::string::npos);
  }

  TEST_CASE("unknown scope is rejected") { CHECK_THROWS_AS(gradsuite::parse_scope("layer"), std::invalid_argument); }
}

TEST_SUITE("cli") {
  TEST_CASE("synth: class count, determinism and the force guard") {
    const auto a = scratch("cli_synth_a"), b = scratch("cli_synth_b");
    const auto r = cli("synth --out " + a.string() + " --classes 2 --seed 9");
    CHECK(r.code == 0);
    CHECK(slurp(a / "manifest.json").find("\"classes\": 2") != std::string::npos);
    CHECK(fs::exists(a / "config.json"));
    CHECK(cli("synth --out " + b.string() + " --classes 2 --seed 9").code == 0);
    for (const auto& e : fs::directory_iterator(a / "scenes")) {
      CHECK(slurp(e.path()) == slurp(b / "scenes" / e.path().filename()));
    }
    CHECK(slurp(a / "manifest.json") == slurp(b / "manifest.json"));
    const auto again = cli("synth --out " + a.string());
    CHECK(again.code == 2);
    CHECK(again.output.find("--force") != std::string::npos);
    CHECK(cli("synth --force --out " + a.string()).code == 0);
    fs::remove_all(a);
    fs::remove_all(b);
  }

  TEST_CASE("unknown flags and keys exit with 2") {
    CHECK(cli("describe --frobnicate").code == 2);
    CHECK(cli("describe --set trainer.nope=1").code == 2);
    CHECK(cli("pipeline --out /tmp/x --set pipeline.modes='[\"bogus\"]'").code == 2);
    CHECK(cli("").code == 2);
  }

  TEST_CASE("missing data exits with 3") {
    const auto out = scratch("cli_missing");
    const auto r = cli("eval --data /nonexistent/manifest.json --checkpoint /nonexistent --out " + out.string());
    CHECK(r.code == 3);
    fs::remove_all(out);
  }

  TEST_CASE("stage commands chain, and mpa without a bank is refused") {
    const auto root = scratch("cli_chain");
    const std::string sets = tiny_sets();
    const auto data = root / "data", src = root / "src", bank = root / "bank", ad = root / "ad", ev = root / "ev";
    REQUIRE(cli("synth --out " + data.string() + sets).code == 0);
    REQUIRE(cli("train-source --data " + data.string() + " --out " + src.string() + sets).code == 0);
    CHECK(fs::exists(src / "train_log.jsonl"));
    CHECK(fs::exists(src / "config.json"));
    const auto ckpt = (src / "checkpoint").string();
    const auto nobank = cli("adapt --mode mpa --data " + data.string() + " --checkpoint " + ckpt + " --out " +
                            (root / "nb").string() + sets);
    CHECK(nobank.code == 2);
    CHECK(nobank.output.find("bank") != std::string::npos);
    REQUIRE(cli("init-bank --data " + data.string() + " --checkpoint " + ckpt + " --out " + bank.string() + sets)
                .code == 0);
    REQUIRE(cli("adapt --mode mpa+ssl --data " + data.string() + " --checkpoint " + ckpt + " --bank " +
                bank.string() + " --out " + ad.string() + sets)
                .code == 0);
    const auto r = cli("eval --data " + data.string() + " --checkpoint " + (ad / "checkpoint").string() + " --out " +
                       ev.string() + sets);
    CHECK(r.code == 0);
    CHECK(fs::exists(ev / "eval.json"));
    CHECK(r.output.find("mIoU") != std::string::npos);
    fs::remove_all(root);
  }

  TEST_CASE("diverging training exits with 4") {
    const auto out = scratch("cli_nan");
    const auto r = cli("pipeline --out " + out.string() + tiny_sets() + " --set trainer.lr0=1e300");
    CHECK(r.code == 4);
    CHECK(r.output.find("stage train-source") != std::string::npos);
    fs::remove_all(out);
  }

  TEST_CASE("gradcheck: op scope under 30 s, injected fault exits 4 naming the op") {
    const auto start = std::chrono::steady_clock::now();
    const auto ok = cli("gradcheck --scope op");
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    CHECK(ok.code == 0);
    CHECK(secs < 30.0);
    const auto bad = cli("gradcheck --scope op --inject-fault bilinear-coord-sign");
    CHECK(bad.code == 4);
    CHECK(bad.output.find("bilinear_sample") != std::string::npos);
    CHECK(bad.output.find("FAIL") != std::string::npos);
  }

  TEST_CASE("describe prints the stage table") {
    const auto r = cli("describe --height 64 --width 128");
    CHECK(r.code == 0);
    CHECK(r.output.find("total parameters") != std::string::npos);
  }
}
