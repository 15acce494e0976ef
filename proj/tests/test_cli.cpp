#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sarg/cli.hpp"

using namespace sarg;

namespace {

struct RunResult {
  int code = 0;
  std::string out;
  std::string err;
};

RunResult run(std::vector<std::string> args) {
  std::ostringstream out, err;
  RunResult r;
  r.code = run_cli(std::move(args), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::filesystem::path work_dir() {
  auto p = std::filesystem::temp_directory_path() / "sarg_cli_suite";
  std::filesystem::create_directories(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(line);
  return out;
}

}  // namespace

TEST_SUITE("cli basics") {
  TEST_CASE("version embeds the checkpoint format") {
    RunResult r = run({"--version"});
    CHECK(r.code == 0);
    CHECK(r.out.find("checkpoint format 1") != std::string::npos);
  }

  TEST_CASE("help lists every subcommand") {
    RunResult r = run({"--help"});
    CHECK(r.code == 0);
    for (const char* sub : {"gen-synth", "make-labels", "train", "predict", "evaluate"})
      CHECK(r.out.find(sub) != std::string::npos);
  }

  TEST_CASE("flag misuse exits 1") {
    CHECK(run({"frobnicate"}).code == 1);
    CHECK(run({}).code == 1);
    CHECK(run({"gen-synth"}).code == 1);  // missing required --out
    auto both = run({"train", "--corpus", "x", "--out-dir", "y", "--gen-only", "--copy-only"});
    CHECK(both.code == 1);
  }

  TEST_CASE("missing input files exit 2") {
    auto dir = work_dir();
    RunResult lab = run({"make-labels", "--in", (dir / "absent.jsonl").string(), "--out",
                         (dir / "nope.jsonl").string()});
    CHECK(lab.code == 2);
    CHECK(lab.err.find("absent.jsonl") != std::string::npos);
    CHECK(run({"predict", "--checkpoint", (dir / "absent.ckpt").string(), "--in", "x", "--out",
               "y"})
              .code == 2);
  }

  TEST_CASE("unparseable corpus lines exit 2 and name the location") {
    auto dir = work_dir();
    auto bad = dir / "bad.jsonl";
    std::ofstream(bad) << "{\"history\": [\"b\"], \"utterance\": \"a\", \"restored\": \"a\"}\n"
                       << "this is not json\n";
    RunResult r = run({"make-labels", "--in", bad.string(), "--out", (dir / "o.jsonl").string()});
    CHECK(r.code == 2);
    CHECK(r.err.find("bad.jsonl") != std::string::npos);
    CHECK(r.err.find("2") != std::string::npos);
  }
}

TEST_SUITE("cli pipeline") {
  TEST_CASE("gen-synth is deterministic per seed") {
    auto dir = work_dir();
    auto a = dir / "gen_a.jsonl";
    auto b = dir / "gen_b.jsonl";
    auto c = dir / "gen_c.jsonl";
    CHECK(run({"gen-synth", "--out", a.string(), "--n", "20", "--seed", "5"}).code == 0);
    CHECK(run({"gen-synth", "--out", b.string(), "--n", "20", "--seed", "5"}).code == 0);
    CHECK(run({"gen-synth", "--out", c.string(), "--n", "20", "--seed", "6"}).code == 0);
    CHECK(slurp(a) == slurp(b));
    CHECK(slurp(a) != slurp(c));
  }

  TEST_CASE("zero rates yield identity examples and pure keep-delete labels") {
    auto dir = work_dir();
    auto corpus = dir / "identity.jsonl";
    auto labels = dir / "identity_labels.jsonl";
    CHECK(run({"gen-synth", "--out", corpus.string(), "--n", "10", "--seed", "2", "--rates", "0",
               "0"})
              .code == 0);
    RunResult lab = run({"make-labels", "--in", corpus.string(), "--out", labels.string()});
    CHECK(lab.code == 0);
    for (const std::string& line : lines_of(slurp(labels))) {
      nlohmann::json j = nlohmann::json::parse(line);
      for (const auto& op : j["ops"]) CHECK(op.is_string());
    }
  }

  TEST_CASE("labeling then scoring the references gives a perfect table") {
    auto dir = work_dir();
    auto corpus = dir / "pipe.jsonl";
    auto labels = dir / "pipe_labels.jsonl";
    auto preds = dir / "pipe_preds.jsonl";
    auto report = dir / "pipe_report.json";
    CHECK(run({"gen-synth", "--out", corpus.string(), "--n", "25", "--seed", "9"}).code == 0);
    CHECK(run({"make-labels", "--in", corpus.string(), "--out", labels.string()}).code == 0);

    Corpus loaded = load_corpus(corpus.string());
    {
      std::ofstream p(preds);
      for (const auto& ex : loaded.examples)
        p << nlohmann::json{{"restored", join(*ex.reference)}}.dump() << "\n";
    }
    RunResult ev = run({"evaluate", "--pred", preds.string(), "--ref-corpus", corpus.string(),
                        "--out", report.string()});
    CHECK(ev.code == 0);

    auto rows = lines_of(ev.out);
    REQUIRE(rows.size() == 14);
    const std::vector<std::string> want_names = {"p1",    "r1",    "f1",     "p2",     "r2",
                                                 "f2",    "p3",    "r3",     "f3",     "bleu1",
                                                 "bleu2", "rouge1", "rouge2", "exact_match"};
    for (size_t i = 0; i < rows.size(); ++i) {
      std::istringstream row(rows[i]);
      std::string name, value;
      row >> name >> value;
      CHECK(name == want_names[i]);
      CHECK(value == "100.0");
    }

    nlohmann::json rep = nlohmann::json::parse(slurp(report));
    CHECK(rep["f1"] == 1.0);
    CHECK(rep["exact_match"] == 1.0);
  }

  TEST_CASE("train, predict and evaluate run end to end") {
    auto dir = work_dir();
    auto corpus = dir / "train.jsonl";
    auto out_dir = dir / "run1";
    std::filesystem::remove_all(out_dir);
    CHECK(run({"gen-synth", "--out", corpus.string(), "--n", "30", "--seed", "4", "--vocab-size",
               "10"})
              .code == 0);

    RunResult tr = run({"train",       "--corpus",     corpus.string(), "--out-dir",
                        out_dir.string(), "--hidden-size", "8",          "--layers",
                        "1",           "--heads",      "2",          "--max-steps",
                        "6",           "--eval-every", "3",          "--batch-size",
                        "8",           "--seed",       "3",          "--patience",
                        "0"});
    REQUIRE(tr.code == 0);
    CHECK(tr.err.find("config:") != std::string::npos);
    nlohmann::json summary = nlohmann::json::parse(tr.out);
    CHECK(summary["steps"] == 6);
    CHECK(summary["stop_reason"] == "max_steps");
    CHECK(std::filesystem::exists(out_dir / "metrics.jsonl"));
    CHECK(std::filesystem::exists(out_dir / "last.ckpt"));

    auto preds = dir / "train_preds.jsonl";
    RunResult pr = run({"predict", "--checkpoint", (out_dir / "last.ckpt").string(), "--in",
                        corpus.string(), "--out", preds.string(), "--beam", "3"});
    REQUIRE(pr.code == 0);
    auto pred_lines = lines_of(slurp(preds));
    REQUIRE(pred_lines.size() == 30);
    nlohmann::json first = nlohmann::json::parse(pred_lines[0]);
    CHECK(first.contains("restored"));
    CHECK(first.contains("tags"));
    CHECK(first.contains("slots"));
    CHECK(first.contains("decode_steps"));

    // byte-identical on a second run
    auto preds2 = dir / "train_preds2.jsonl";
    REQUIRE(run({"predict", "--checkpoint", (out_dir / "last.ckpt").string(), "--in",
                 corpus.string(), "--out", preds2.string(), "--beam", "3"})
                .code == 0);
    CHECK(slurp(preds) == slurp(preds2));

    RunResult ev = run({"evaluate", "--pred", preds.string(), "--ref-corpus", corpus.string()});
    CHECK(ev.code == 0);
    CHECK(lines_of(ev.out).size() == 14);
  }

  TEST_CASE("config file values apply and flags override them") {
    auto dir = work_dir();
    auto corpus = dir / "cfg_corpus.jsonl";
    auto cfg = dir / "train.cfg";
    auto out_dir = dir / "run_cfg";
    std::filesystem::remove_all(out_dir);
    CHECK(run({"gen-synth", "--out", corpus.string(), "--n", "12", "--seed", "8"}).code == 0);
    std::ofstream(cfg) << "batch-size=4\nlr=0.002\nhidden-size=8\nlayers=1\nheads=2\n"
                       << "max-steps=2\neval-every=10\npatience=0\n";

    RunResult defaults = run({"train", "--config", cfg.string(), "--corpus", corpus.string(),
                              "--out-dir", out_dir.string()});
    REQUIRE(defaults.code == 0);
    auto cfg_line = defaults.err.substr(0, defaults.err.find('\n'));
    nlohmann::json resolved = nlohmann::json::parse(cfg_line.substr(cfg_line.find('{')));
    CHECK(resolved["train"]["batch_size"] == 4);
    CHECK(resolved["train"]["lr"] == 0.002);
    CHECK(resolved["model"]["hidden_size"] == 8);

    std::filesystem::remove_all(out_dir);
    RunResult overridden = run({"train", "--config", cfg.string(), "--corpus", corpus.string(),
                                "--out-dir", out_dir.string(), "--batch-size", "6"});
    REQUIRE(overridden.code == 0);
    auto line2 = overridden.err.substr(0, overridden.err.find('\n'));
    nlohmann::json resolved2 = nlohmann::json::parse(line2.substr(line2.find('{')));
    CHECK(resolved2["train"]["batch_size"] == 6);

    auto bad_cfg = dir / "bad.cfg";
    std::ofstream(bad_cfg) << "not-a-key=3\n";
    CHECK(run({"train", "--config", bad_cfg.string(), "--corpus", corpus.string(), "--out-dir",
               (dir / "run_badcfg").string()})
              .code == 1);
    CHECK(run({"train", "--config", (dir / "absent.cfg").string(), "--corpus", corpus.string(),
               "--out-dir", (dir / "run_nocfg").string()})
              .code == 2);
  }

  TEST_CASE("invalid model geometry is a validation failure") {
    auto dir = work_dir();
    auto corpus = dir / "geom.jsonl";
    CHECK(run({"gen-synth", "--out", corpus.string(), "--n", "8", "--seed", "1"}).code == 0);
    RunResult r = run({"train", "--corpus", corpus.string(), "--out-dir",
                       (dir / "geom_run").string(), "--hidden-size", "8", "--heads", "3"});
    CHECK(r.code == 1);
    CHECK(r.err.find("error:") != std::string::npos);
  }

  TEST_CASE("a checkpoint without model metadata cannot be used to predict") {
    auto dir = work_dir();
    auto ckpt = dir / "bare.ckpt";
    ParamRegistry reg;
    reg.create("w", {2});
    save_checkpoint(ckpt.string(), nlohmann::json::object(), reg);
    auto corpus = dir / "bare_corpus.jsonl";
    CHECK(run({"gen-synth", "--out", corpus.string(), "--n", "3", "--seed", "1"}).code == 0);
    RunResult r = run({"predict", "--checkpoint", ckpt.string(), "--in", corpus.string(), "--out",
                       (dir / "bare_preds.jsonl").string()});
    CHECK(r.code == 2);
  }
}
