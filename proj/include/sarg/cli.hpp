#pragma once

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <ostream>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "sarg/checkpoint.hpp"
#include "sarg/errors.hpp"
#include "sarg/inference.hpp"
#include "sarg/labeler.hpp"
#include "sarg/metrics.hpp"
#include "sarg/model.hpp"
#include "sarg/synthetic.hpp"
#include "sarg/text.hpp"
#include "sarg/trainer.hpp"

namespace sarg {

inline std::string cli_version() {
  return "sarg 1.0.0 (checkpoint format " + std::to_string(kCheckpointVersion) + ")";
}

namespace climpl {

inline std::string tag_letter(EditKind k) {
  switch (k) {
    case EditKind::Keep: return "K";
    case EditKind::Delete: return "D";
    default: return "C";
  }
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write: " + path);
  return f;
}

struct DataFlags {
  std::string mode = "whitespace";
  bool pretokenized = false;
  TokenizeMode tokenize_mode() const { return tokenize_mode_from_string(mode); }
};

inline void add_data_flags(CLI::App* sub, DataFlags& d) {
  sub->add_option("--mode", d.mode, "tokenizer: whitespace or char")
      ->check(CLI::IsMember({"whitespace", "char"}));
  sub->add_flag("--pretokenized", d.pretokenized, "text fields are token arrays, not strings");
}

inline int cmd_gen_synth(const std::string& out_path, const SynthConfig& cfg, std::uint64_t seed,
                         bool pretokenized, std::ostream&, std::ostream& err) {
  nlohmann::json resolved = {{"command", "gen-synth"}, {"out", out_path},    {"seed", seed},
                             {"n", cfg.n_examples},    {"vocab_size", cfg.vocab_size},
                             {"omission_rate", cfg.omission_rate}, {"coref_rate", cfg.coref_rate},
                             {"max_turns", cfg.max_turns}, {"pretokenized", pretokenized}};
  err << "config: " << resolved.dump() << "\n";
  Corpus corpus = gen_synthetic(cfg, seed);
  save_corpus(corpus, out_path, pretokenized);
  err << "wrote " << corpus.examples.size() << " examples to " << out_path << "\n";
  return 0;
}

inline int cmd_make_labels(const std::string& in_path, const std::string& out_path,
                           const DataFlags& data, std::ostream&, std::ostream& err) {
  nlohmann::json resolved = {{"command", "make-labels"},
                             {"in", in_path},
                             {"out", out_path},
                             {"mode", data.mode},
                             {"pretokenized", data.pretokenized}};
  err << "config: " << resolved.dump() << "\n";
  Corpus corpus = load_corpus(in_path, data.tokenize_mode(), data.pretokenized);
  std::ofstream out = open_out(out_path);
  long failures = 0;
  for (size_t i = 0; i < corpus.examples.size(); ++i) {
    const Dialogue& d = corpus.examples[i];
    if (!d.reference)
      throw InvalidConfig("example " + std::to_string(i) + " in " + in_path +
                          " has no restored field; labeling needs references");
    LabeledExample lab = label_example(d);
    if (realize(lab.augmented, lab.labels) != *d.reference) {
      ++failures;
      err << "round-trip mismatch on example " << i << "\n";
    }
    nlohmann::ordered_json rec;
    rec["augmented"] = lab.augmented.tokens;
    nlohmann::ordered_json ops = nlohmann::ordered_json::array();
    for (const EditOp& op : lab.labels) {
      if (op.kind == EditKind::Change)
        ops.push_back(nlohmann::ordered_json{{"C", op.phrase}});
      else
        ops.push_back(tag_letter(op.kind));
    }
    rec["ops"] = std::move(ops);
    out << rec.dump() << "\n";
  }
  if (!out) throw IoError("failed writing: " + out_path);
  if (failures > 0) {
    err << failures << " round-trip failures\n";
    return 1;
  }
  err << "labeled " << corpus.examples.size() << " examples\n";
  return 0;
}

struct TrainFlags {
  std::string corpus_path;
  std::string out_dir;
  std::string config_path;
  DataFlags data;
  int min_count = 1;
  std::uint64_t seed = 1;
  bool gen_only = false;
  bool copy_only = false;
  ModelConfig model;
  TrainConfig train;
};

inline std::string strip(const std::string& s) {
  const size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

template <typename T>
T parse_config_value(const std::string& key, const std::string& v) {
  std::istringstream in(v);
  T out;
  if constexpr (std::is_same_v<T, bool>) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw InvalidConfig("config key " + key + " expects true/false, got: " + v);
  } else {
    in >> out;
    if (in.fail() || !(in >> std::ws).eof())
      throw InvalidConfig("config key " + key + " has a bad value: " + v);
    return out;
  }
}

// Simple key=value config for the train command. Keys carry the same names as
// the flags; a flag given on the command line wins over the file.
inline void apply_train_config_file(const std::string& path, CLI::App* tr, TrainFlags& f) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path);

  std::vector<std::pair<std::string, std::function<void(const std::string&)>>> keys;
  auto reg = [&](const char* name, auto& dst) {
    keys.emplace_back(name, [name, &dst](const std::string& v) {
      dst = parse_config_value<std::decay_t<decltype(dst)>>(name, v);
    });
  };
  reg("mode", f.data.mode);
  reg("pretokenized", f.data.pretokenized);
  reg("min-count", f.min_count);
  reg("seed", f.seed);
  reg("batch-size", f.train.batch_size);
  reg("lr", f.train.lr);
  reg("max-steps", f.train.max_steps);
  reg("no-coverage-steps", f.train.no_coverage_steps);
  reg("eval-every", f.train.eval_every);
  reg("patience", f.train.patience);
  reg("grad-clip", f.train.grad_clip);
  reg("stop-train-em", f.train.stop_train_em);
  reg("threads", f.train.threads);
  reg("resume", f.train.resume_from);
  reg("hidden-size", f.model.hidden_size);
  reg("layers", f.model.n_layers);
  reg("heads", f.model.n_heads);
  reg("max-positions", f.model.max_positions);
  reg("max-turns", f.model.max_turns);
  reg("max-phrase-len", f.model.max_phrase_len);
  reg("alpha", f.model.alpha);
  reg("lambda", f.model.lambda);
  reg("gen-only", f.gen_only);
  reg("copy-only", f.copy_only);

  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = strip(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw InvalidConfig(path + ":" + std::to_string(line_no) + ": expected key=value, got: " + t);
    const std::string key = strip(t.substr(0, eq));
    const std::string value = strip(t.substr(eq + 1));
    auto it = std::find_if(keys.begin(), keys.end(),
                           [&](const auto& k) { return k.first == key; });
    if (it == keys.end())
      throw InvalidConfig(path + ":" + std::to_string(line_no) + ": unknown config key: " + key);
    if (tr->count("--" + key) > 0) continue;  // explicit flag wins
    it->second(value);
  }
}

inline int cmd_train(TrainFlags& f, std::ostream& out, std::ostream& err) {
  f.train.seed = f.seed;
  f.train.checkpoint_dir = f.out_dir;
  if (f.gen_only) f.model.use_copy = false;
  if (f.copy_only) f.model.use_gen = false;

  Corpus corpus = load_corpus(f.corpus_path, f.data.tokenize_mode(), f.data.pretokenized);
  Vocabulary vocab = build_vocab(corpus, f.min_count);
  f.model.vocab_size = static_cast<int>(vocab.size());
  f.model.validate();
  f.train.validate();

  nlohmann::json resolved = {{"command", "train"},
                             {"corpus", f.corpus_path},
                             {"out_dir", f.out_dir},
                             {"mode", f.data.mode},
                             {"pretokenized", f.data.pretokenized},
                             {"min_count", f.min_count},
                             {"seed", f.seed},
                             {"model", f.model.to_json()},
                             {"train", f.train.to_json()}};
  err << "config: " << resolved.dump() << "\n";

  std::filesystem::create_directories(f.out_dir);
  std::ofstream metrics = open_out(f.out_dir + "/metrics.jsonl");

  SargModel model(f.model, f.seed);
  TrainResult res = train(corpus, model, vocab, f.train, &metrics);

  nlohmann::json summary = {{"steps", res.steps},
                            {"stop_reason", res.stop_reason},
                            {"best_dev_exact_match", res.best_dev_em},
                            {"final_dev_exact_match", res.final_dev_em},
                            {"final_dev_f1", res.final_dev_f1},
                            {"skipped_too_long", res.skipped_too_long},
                            {"best_checkpoint", res.best_checkpoint},
                            {"last_checkpoint", res.last_checkpoint}};
  if (res.final_train_em >= 0) summary["final_train_exact_match"] = res.final_train_em;
  out << summary.dump() << "\n";
  return 0;
}

inline int cmd_predict(const std::string& ckpt_path, const std::string& in_path,
                       const std::string& out_path, int beam, int max_phrase_len,
                       const DataFlags& data, std::ostream&, std::ostream& err) {
  nlohmann::json resolved = {{"command", "predict"}, {"checkpoint", ckpt_path},
                             {"in", in_path},        {"out", out_path},
                             {"beam", beam},         {"max_phrase_len", max_phrase_len},
                             {"mode", data.mode},    {"pretokenized", data.pretokenized}};
  err << "config: " << resolved.dump() << "\n";

  Checkpoint ckp = load_checkpoint(ckpt_path);
  if (!ckp.header.contains("config") || !ckp.header.contains("vocab"))
    throw IoError("checkpoint header lacks config/vocab: " + ckpt_path);
  ModelConfig mcfg = ModelConfig::from_json(ckp.header["config"]);
  Vocabulary vocab = Vocabulary::from_json(ckp.header["vocab"]);
  SargModel model(mcfg, 1);
  restore_params(ckp, model.params());

  DecodeConfig dc;
  dc.strategy = beam > 1 ? DecodeConfig::Strategy::Beam : DecodeConfig::Strategy::Greedy;
  dc.beam_width = std::max(beam, 1);
  dc.max_phrase_len = max_phrase_len;
  dc.validate();

  Corpus corpus = load_corpus(in_path, data.tokenize_mode(), data.pretokenized);
  std::ofstream out_file = open_out(out_path);
  for (const Dialogue& d : corpus.examples) {
    Restoration r = predict(model, d, vocab, dc);
    nlohmann::ordered_json rec;
    if (data.pretokenized)
      rec["restored"] = r.tokens;
    else
      rec["restored"] = join(r.tokens);
    nlohmann::ordered_json tags = nlohmann::ordered_json::array();
    for (const EditOp& op : r.tags) tags.push_back(tag_letter(op.kind));
    rec["tags"] = std::move(tags);
    nlohmann::ordered_json slots = nlohmann::ordered_json::array();
    for (const SlotResult& s : r.slots)
      slots.push_back(nlohmann::ordered_json{
          {"pos", s.pos}, {"phrase", vocab.decode(s.phrase_ids)}, {"logprob", s.logprob}});
    rec["slots"] = std::move(slots);
    rec["decode_steps"] = r.decode_steps;
    out_file << rec.dump() << "\n";
  }
  if (!out_file) throw IoError("failed writing: " + out_path);
  return 0;
}

// Reads the "restored" field of every line of a predictions file.
inline std::vector<Tokens> load_predictions(const std::string& path, TokenizeMode mode,
                                            bool pretokenized) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open: " + path);
  std::vector<Tokens> preds;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(path, line_no, e.what());
    }
    if (!j.contains("restored")) throw MissingField(path, line_no, "restored");
    const auto& field = j["restored"];
    if (pretokenized || field.is_array()) {
      preds.push_back(field.get<Tokens>());
    } else {
      const std::string text = field.get<std::string>();
      preds.push_back(text.find_first_not_of(" \t") == std::string::npos ? Tokens{}
                                                                         : tokenize(text, mode));
    }
  }
  return preds;
}

inline int cmd_evaluate(const std::string& pred_path, const std::string& ref_path,
                        const std::string& report_path, const DataFlags& data, std::ostream& out,
                        std::ostream& err) {
  nlohmann::json resolved = {{"command", "evaluate"},
                             {"pred", pred_path},
                             {"ref_corpus", ref_path},
                             {"mode", data.mode},
                             {"pretokenized", data.pretokenized}};
  err << "config: " << resolved.dump() << "\n";

  std::vector<Tokens> preds = load_predictions(pred_path, data.tokenize_mode(), data.pretokenized);
  Corpus refs = load_corpus(ref_path, data.tokenize_mode(), data.pretokenized);
  if (preds.size() != refs.examples.size())
    throw LengthMismatch("predictions vs references", preds.size(), refs.examples.size());

  CorpusEvaluation ev = evaluate_corpus(preds, refs);
  const RestorationReport& r = ev.corpus;

  auto print_row = [&](const std::string& name, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%-12s %6.1f", name.c_str(), v * 100.0);
    out << buf << "\n";
  };
  for (int n = 0; n < 3; ++n) {
    const std::string suf = std::to_string(n + 1);
    print_row("p" + suf, r.restoration[n].p);
    print_row("r" + suf, r.restoration[n].r);
    print_row("f" + suf, r.restoration[n].f);
  }
  print_row("bleu1", r.bleu1);
  print_row("bleu2", r.bleu2);
  print_row("rouge1", r.rouge1);
  print_row("rouge2", r.rouge2);
  print_row("exact_match", r.exact_match);

  if (!report_path.empty()) {
    std::ofstream rep = open_out(report_path);
    rep << r.to_json().dump(2) << "\n";
    if (!rep) throw IoError("failed writing: " + report_path);
  }
  return 0;
}

}  // namespace climpl

// Parses and runs one command line (program name excluded). Exit codes:
// 0 success, 1 validation failure, 2 I/O or parse error.
inline int run_cli(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"semi-autoregressive restoration of incomplete dialogue utterances"};
  app.set_version_flag("--version", cli_version());
  app.require_subcommand(1);

  std::string gen_out;
  SynthConfig gen_cfg;
  std::uint64_t gen_seed = 1;
  bool gen_pretok = false;
  std::vector<double> gen_rates;
  CLI::App* gen = app.add_subcommand("gen-synth", "generate a synthetic dialogue corpus");
  gen->add_option("--out", gen_out, "output corpus path (jsonl)")->required();
  gen->add_option("--n", gen_cfg.n_examples, "number of examples");
  gen->add_option("--seed", gen_seed, "random seed");
  gen->add_option("--vocab-size", gen_cfg.vocab_size, "content token inventory size");
  gen->add_option("--rates", gen_rates, "omission and coreference rates")->expected(2);
  gen->add_option("--max-turns", gen_cfg.max_turns, "max history turns");
  gen->add_option("--max-phrase-len", gen_cfg.max_phrase_len, "max inserted phrase length");
  gen->add_flag("--pretokenized", gen_pretok, "write token arrays instead of joined strings");

  std::string lab_in, lab_out;
  climpl::DataFlags lab_data;
  CLI::App* lab = app.add_subcommand("make-labels", "derive edit labels and check round trips");
  lab->add_option("--in", lab_in, "input corpus (jsonl with restored field)")->required();
  lab->add_option("--out", lab_out, "output label file (jsonl)")->required();
  climpl::add_data_flags(lab, lab_data);

  climpl::TrainFlags tf;
  CLI::App* tr = app.add_subcommand("train", "train a model on a labeled corpus");
  tr->add_option("--config", tf.config_path, "key=value config file; flags override");
  tr->add_option("--corpus", tf.corpus_path, "training corpus (jsonl with restored field)")
      ->required();
  tr->add_option("--out-dir", tf.out_dir, "directory for checkpoints and metrics log")
      ->required();
  climpl::add_data_flags(tr, tf.data);
  tr->add_option("--min-count", tf.min_count, "vocabulary frequency cutoff");
  tr->add_option("--seed", tf.seed, "random seed for init and shuffling");
  tr->add_option("--batch-size", tf.train.batch_size, "examples per step");
  tr->add_option("--lr", tf.train.lr, "learning rate");
  tr->add_option("--max-steps", tf.train.max_steps, "optimizer step budget");
  tr->add_option("--no-coverage-steps", tf.train.no_coverage_steps,
                 "steps before the coverage term switches on");
  tr->add_option("--eval-every", tf.train.eval_every, "steps between dev evaluations");
  tr->add_option("--patience", tf.train.patience,
                 "dev evaluations without improvement before stopping; 0 disables");
  tr->add_option("--grad-clip", tf.train.grad_clip, "max global gradient norm; 0 disables");
  tr->add_option("--stop-train-em", tf.train.stop_train_em,
                 "stop once train exact match reaches this; 0 disables");
  tr->add_option("--threads", tf.train.threads, "worker threads per batch");
  tr->add_option("--resume", tf.train.resume_from, "checkpoint to resume from");
  tr->add_option("--hidden-size", tf.model.hidden_size, "model width");
  tr->add_option("--layers", tf.model.n_layers, "encoder blocks");
  tr->add_option("--heads", tf.model.n_heads, "attention heads");
  tr->add_option("--max-positions", tf.model.max_positions, "max encoder positions");
  tr->add_option("--max-turns", tf.model.max_turns, "turn embedding cap");
  tr->add_option("--max-phrase-len", tf.model.max_phrase_len, "decoder phrase cap");
  tr->add_option("--alpha", tf.model.alpha, "tagger loss weight");
  tr->add_option("--lambda", tf.model.lambda, "coverage loss weight");
  CLI::Option* gen_only = tr->add_flag("--gen-only", tf.gen_only, "disable the copy path");
  CLI::Option* copy_only = tr->add_flag("--copy-only", tf.copy_only, "disable vocabulary softmax");
  gen_only->excludes(copy_only);

  std::string pr_ckpt, pr_in, pr_out;
  int pr_beam = 1, pr_maxlen = 0;
  climpl::DataFlags pr_data;
  CLI::App* pr = app.add_subcommand("predict", "restore utterances with a trained model");
  pr->add_option("--checkpoint", pr_ckpt, "model checkpoint")->required();
  pr->add_option("--in", pr_in, "input corpus (jsonl)")->required();
  pr->add_option("--out", pr_out, "predictions file (jsonl)")->required();
  pr->add_option("--beam", pr_beam, "beam width; 1 is greedy");
  pr->add_option("--max-phrase-len", pr_maxlen, "phrase length cap; 0 uses the model's");
  climpl::add_data_flags(pr, pr_data);

  std::string ev_pred, ev_ref, ev_report;
  climpl::DataFlags ev_data;
  CLI::App* ev = app.add_subcommand("evaluate", "score predictions against references");
  ev->add_option("--pred", ev_pred, "predictions file (jsonl with restored field)")->required();
  ev->add_option("--ref-corpus", ev_ref, "reference corpus (jsonl with restored field)")
      ->required();
  ev->add_option("--out", ev_report, "optional full-precision json report path");
  climpl::add_data_flags(ev, ev_data);

  try {
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    // flag misuse is a validation failure; help/version exit clean
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      if (gen_rates.size() == 2) {
        gen_cfg.omission_rate = gen_rates[0];
        gen_cfg.coref_rate = gen_rates[1];
      }
      return climpl::cmd_gen_synth(gen_out, gen_cfg, gen_seed, gen_pretok, out, err);
    }
    if (lab->parsed()) return climpl::cmd_make_labels(lab_in, lab_out, lab_data, out, err);
    if (tr->parsed()) {
      if (!tf.config_path.empty()) climpl::apply_train_config_file(tf.config_path, tr, tf);
      return climpl::cmd_train(tf, out, err);
    }
    if (pr->parsed())
      return climpl::cmd_predict(pr_ckpt, pr_in, pr_out, pr_beam, pr_maxlen, pr_data, out, err);
    if (ev->parsed())
      return climpl::cmd_evaluate(ev_pred, ev_ref, ev_report, ev_data, out, err);
  } catch (const IoError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

inline int run_cli(int argc, char** argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run_cli(std::move(args), std::cout, std::cerr);
}

}  // namespace sarg
