#pragma once

// Pipeline stages behind the CLI commands. Every stage reads its inputs from
// a fixed workdir layout, writes its artifacts plus a manifest, and derives
// all randomness from the top-level seed through named streams, so a rerun
// with the same config and seed reproduces every output byte for byte.
//
//   task/     lexicon, cipher, tokenizer, decode corpus, translator pairs
//   decode/   trained translator checkpoint and N-best lists
//   data/     train/dev/test record splits, synthetic pretrain records, stats
//   model/    pretrained frozen base, finetuned fusion model, loss curves
//   gen/      fusion outputs for the eval split
//   eval/     metric report
//   ablate/   n_use sweep artifacts and curve
//   compare/  adapter vs lora side-by-side
//   ngrams/   coverage tables and 2-d n-gram projections

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "hypofuse/beam.hpp"
#include "hypofuse/checkpoint.hpp"
#include "hypofuse/common.hpp"
#include "hypofuse/config.hpp"
#include "hypofuse/hypo.hpp"
#include "hypofuse/io.hpp"
#include "hypofuse/lm.hpp"
#include "hypofuse/metrics.hpp"
#include "hypofuse/rng.hpp"
#include "hypofuse/task.hpp"
#include "hypofuse/tokenizer.hpp"
#include "hypofuse/trainer.hpp"
#include "hypofuse/translator.hpp"

namespace hypofuse {

namespace fs = std::filesystem;

// --- workdir layout ---

struct Paths {
  fs::path root;
  explicit Paths(const std::string& workdir) : root(workdir) {}

  std::string task_json() const { return (root / "task" / "task.json").string(); }
  std::string tokenizer_json() const {
    return (root / "task" / "tokenizer.json").string();
  }
  std::string corpus() const { return (root / "task" / "corpus.jsonl").string(); }
  std::string translator_pairs() const {
    return (root / "task" / "translator_train.jsonl").string();
  }
  std::string translator_ckpt() const {
    return (root / "decode" / "translator.ckpt.json").string();
  }
  std::string translator_curve() const {
    return (root / "decode" / "translator_curve.csv").string();
  }
  std::string nbest() const { return (root / "decode" / "nbest.jsonl").string(); }
  std::string split(const std::string& name) const {
    return (root / "data" / (name + ".jsonl")).string();
  }
  std::string stats() const { return (root / "data" / "stats.json").string(); }
  std::string base_ckpt() const {
    return (root / "model" / "base.ckpt.json").string();
  }
  std::string pretrain_curve() const {
    return (root / "model" / "pretrain_curve.csv").string();
  }
  std::string fusion_ckpt() const {
    return (root / "model" / "fusion.ckpt.json").string();
  }
  std::string train_curve() const {
    return (root / "model" / "train_curve.csv").string();
  }
  std::string train_report() const {
    return (root / "model" / "train_report.json").string();
  }
  std::string generations() const {
    return (root / "gen" / "generations.jsonl").string();
  }
  std::string metrics_report() const {
    return (root / "eval" / "metrics_report.json").string();
  }
  std::string rel(const std::string& abs) const {
    return fs::relative(abs, root).string();
  }
};

// --- manifests ---

inline void write_manifest(const Paths& p, const std::string& stage_dir,
                           const std::string& command, const RunConfig& cfg,
                           std::vector<std::string> inputs,
                           std::vector<std::string> outputs,
                           nlohmann::json extra = nlohmann::json::object()) {
  for (std::string& s : inputs) s = p.rel(s);
  for (std::string& s : outputs) s = p.rel(s);
  std::sort(inputs.begin(), inputs.end());
  std::sort(outputs.begin(), outputs.end());
  nlohmann::json m{{"command", command},
                   {"config_hash", to_hex(config_hash(cfg))},
                   {"seed", cfg.seed},
                   {"inputs", inputs},
                   {"outputs", outputs},
                   {"versions",
                    {{"hypofuse", std::string(kVersion)},
                     {"checkpoint_format", kCheckpointFormat}}}};
  if (!extra.empty()) m["notes"] = std::move(extra);
  save_json((p.root / stage_dir / "manifest.json").string(), m);
}

inline void require_artifact(const std::string& path, const std::string& stage,
                             const std::string& producer) {
  if (!file_exists(path))
    throw StageError(stage + ": missing input '" + path + "' (run " +
                     producer + " first)");
}

// --- shared loading ---

inline Task load_task(const Paths& p, const std::string& stage) {
  require_artifact(p.task_json(), stage, "make-task");
  return Task::from_json(load_json(p.task_json()));
}

inline Tokenizer load_tokenizer(const Paths& p, const std::string& stage) {
  require_artifact(p.tokenizer_json(), stage, "make-task");
  return Tokenizer(load_json(p.tokenizer_json()).at("charset").get<std::string>());
}

inline void write_curve_csv(const std::string& path,
                            const std::vector<LossCurveRow>& rows) {
  std::string out = "step,lr,loss\n";
  char buf[96];
  for (const LossCurveRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%lld,%.10g,%.10g\n", r.step, r.lr, r.loss);
    out += buf;
  }
  write_text_file(path, out);
}

// Token budget every fusion render must satisfy. The adapter's prompt rows
// occupy attention width, so the budget is block - prompt_len in every mode;
// this keeps the rendered datasets identical across adapter and lora runs.
inline int fusion_token_budget(const RunConfig& cfg) {
  return cfg.model.block - cfg.model.prompt_len;
}

struct RenderedSet {
  std::vector<EncodedExample> examples;
  int skipped = 0;
};

inline RenderedSet render_records(const std::vector<HypoRecord>& records,
                                  const Tokenizer& tok, const RunConfig& cfg,
                                  int n_use) {
  RenderedSet out;
  out.examples.reserve(records.size());
  for (const HypoRecord& rec : records) {
    const int n = std::min<int>(n_use, static_cast<int>(rec.hypotheses.size()));
    try {
      out.examples.push_back(render_fusion_example(
          tok, rec, n, cfg.train.instruction, cfg.train.response_marker,
          fusion_token_budget(cfg)));
    } catch (const LengthError& e) {
      ++out.skipped;
      std::cerr << "warning: skipping record: " << e.what() << "\n";
    }
  }
  return out;
}

// --- stage: make-task ---

inline void run_make_task(const std::string& workdir, const RunConfig& cfg) {
  cfg.validate();
  Paths p(workdir);
  fs::create_directories(p.root / "task");

  Rng task_rng(derive_seed(cfg.seed, "task"));
  Task task = Task::make(cfg.task, task_rng);

  Rng corpus_rng(derive_seed(cfg.seed, "corpus"));
  std::vector<SentencePair> corpus =
      task.sample_pairs(cfg.task.corpus_size, "c", corpus_rng);

  Rng tr_rng(derive_seed(cfg.seed, "translator-data"));
  std::vector<SentencePair> tr_pairs =
      task.sample_pairs(cfg.task.translator_train_size, "t", tr_rng);
  // the translator learns from noise-corrupted targets, so its hypotheses
  // carry exactly the error distribution the fusion model must undo
  for (SentencePair& pair : tr_pairs)
    pair.reference = Task::corrupt(pair.reference, cfg.task.noise, tr_rng);

  // vocabulary covers everything any prompt can mention
  std::string charset = Task::source_charset() + Task::target_charset() +
                        cfg.train.instruction + cfg.train.response_marker +
                        "0123456789. \n";
  save_json(p.tokenizer_json(), nlohmann::json{{"charset",
                                                Tokenizer(charset).charset()}});
  save_json(p.task_json(), task.to_json());

  auto pair_to_json = [](const SentencePair& s) {
    return nlohmann::json{
        {"id", s.id}, {"source", s.source}, {"reference", s.reference}};
  };
  write_jsonl(p.corpus(), corpus, pair_to_json);
  write_jsonl(p.translator_pairs(), tr_pairs, pair_to_json);

  write_manifest(p, "task", "make-task", cfg, {},
                 {p.task_json(), p.tokenizer_json(), p.corpus(),
                  p.translator_pairs()});
}

inline std::vector<SentencePair> read_pairs(const std::string& path) {
  return read_jsonl<SentencePair>(path, [&path](const nlohmann::json& j) {
    require_exact_keys(j, {"id", "source", "reference"}, path);
    return SentencePair{j.at("id").get<std::string>(),
                        j.at("source").get<std::string>(),
                        j.at("reference").get<std::string>()};
  });
}

// --- stage: decode ---

inline void run_decode(const std::string& workdir, const RunConfig& cfg) {
  cfg.validate();
  Paths p(workdir);
  const std::string stage = "decode";
  Task task = load_task(p, stage);
  Tokenizer tok = load_tokenizer(p, stage);
  require_artifact(p.corpus(), stage, "make-task");
  require_artifact(p.translator_pairs(), stage, "make-task");
  fs::create_directories(p.root / "decode");

  LmConfig tcfg;
  tcfg.layers = cfg.translator.layers;
  tcfg.dim = cfg.translator.dim;
  tcfg.heads = cfg.translator.heads;
  tcfg.block = cfg.translator.block;
  tcfg.vocab = tok.vocab_size();
  tcfg.mode = TuneMode::full;

  bool trained_here = false;
  Rng init_rng(derive_seed(cfg.seed, "translator-init"));
  Lm translator(tcfg, init_rng);
  if (file_exists(p.translator_ckpt())) {
    translator = load_checkpoint(p.translator_ckpt(), tcfg, init_rng);
  } else {
    trained_here = true;
    std::vector<SentencePair> pairs = read_pairs(p.translator_pairs());
    std::vector<EncodedExample> examples;
    examples.reserve(pairs.size());
    for (const SentencePair& pr : pairs)
      examples.push_back(encode_translation_pair(tok, pr.source, pr.reference));
    TrainConfig trc;
    trc.epochs = cfg.translator.epochs;
    trc.batch = cfg.translator.batch;
    trc.accum = cfg.translator.accum;
    trc.lr_start = cfg.translator.lr_start;
    trc.lr_end = cfg.translator.lr_end;
    trc.weight_decay = cfg.translator.weight_decay;
    trc.grad_clip = cfg.translator.grad_clip;
    trc.seed = derive_seed(cfg.seed, "translator-train");
    TrainerState state;
    TrainReport rep = train_lm(translator, examples, trc, state);
    write_curve_csv(p.translator_curve(), rep.curve);
    save_checkpoint(p.translator_ckpt(), translator);
  }

  std::vector<SentencePair> corpus = read_pairs(p.corpus());
  std::vector<NBestEntry> entries;
  entries.reserve(corpus.size());
  int unfinished = 0;
  for (const SentencePair& pr : corpus) {
    NBestEntry e;
    e.id = pr.id;
    e.source = pr.source;
    e.reference = pr.reference;
    e.hypotheses =
        decode_nbest(translator, tok, pr.source, cfg.decode.beam,
                     cfg.decode.max_extra, cfg.decode.length_penalty);
    for (const DecodedHypothesis& h : e.hypotheses)
      if (!h.finished) ++unfinished;
    entries.push_back(std::move(e));
  }
  write_jsonl(p.nbest(), entries, nbest_to_json);
  if (unfinished > 0)
    std::cerr << "warning: " << unfinished
              << " hypotheses hit the length limit before eos\n";

  std::vector<std::string> outputs{p.nbest(), p.translator_ckpt()};
  if (trained_here) outputs.push_back(p.translator_curve());
  write_manifest(p, "decode", "decode", cfg,
                 {p.task_json(), p.tokenizer_json(), p.corpus(),
                  p.translator_pairs()},
                 outputs,
                 nlohmann::json{{"unfinished_hypotheses", unfinished},
                                {"translator_trained", trained_here}});
}

// --- stage: build-dataset ---

inline void run_build_dataset(const std::string& workdir,
                              const RunConfig& cfg) {
  cfg.validate();
  Paths p(workdir);
  const std::string stage = "build-dataset";
  Task task = load_task(p, stage);
  require_artifact(p.nbest(), stage, "decode");
  fs::create_directories(p.root / "data");

  std::vector<NBestEntry> entries =
      read_jsonl<NBestEntry>(p.nbest(), nbest_from_json);
  std::vector<HypoRecord> records;
  records.reserve(entries.size());
  for (const NBestEntry& e : entries) {
    HypoRecord r;
    r.id = e.id;
    r.lang_pair = task.lang_pair();
    r.reference = e.reference;
    for (const DecodedHypothesis& h : e.hypotheses) r.hypotheses.push_back(h.text);
    records.push_back(std::move(r));
  }

  Rng split_rng(derive_seed(cfg.seed, "split"));
  Splits splits = split_records(
      records, {cfg.data.split_train, cfg.data.split_dev, cfg.data.split_test},
      split_rng);

  // Synthetic monolingual pretraining records: fresh task sentences with
  // noise-corrupted variants standing in for beam hypotheses, ordered best
  // first like a beam would be. Any hypotheses/reference pair in the target
  // language is a valid record, whatever produced it.
  std::vector<HypoRecord> pretrain;
  pretrain.reserve(static_cast<size_t>(cfg.data.pretrain_records));
  Rng pre_rng(derive_seed(cfg.seed, "pretrain-data"));
  for (int i = 0; i < cfg.data.pretrain_records; ++i) {
    HypoRecord r;
    char buf[16];
    std::snprintf(buf, sizeof buf, "p%06d", i);
    r.id = buf;
    r.lang_pair = "mono-toy-tgt";
    r.reference = task.reference(task.sample_sentence(pre_rng));
    // seed with the reference so no variant is an exact copy of the target:
    // a clean first hypothesis rewards copying it, not reconciling the list
    std::set<std::string> seen{r.reference};
    int attempts = 0;
    while (static_cast<int>(r.hypotheses.size()) < cfg.data.pretrain_variants) {
      std::string v = Task::corrupt(r.reference, cfg.task.noise, pre_rng);
      if (seen.insert(v).second || ++attempts > 20) r.hypotheses.push_back(v);
    }
    // beam lists put likelier hypotheses first; mirror that by corruption count
    std::stable_sort(r.hypotheses.begin(), r.hypotheses.end(),
                     [&r](const std::string& a, const std::string& b) {
                       auto dist = [&r](const std::string& s) {
                         int d = 0;
                         for (size_t k = 0; k < s.size(); ++k)
                           d += (s[k] != r.reference[k]);
                         return d;
                       };
                       return dist(a) < dist(b);
                     });
    pretrain.push_back(std::move(r));
  }

  write_records(p.split("train"), splits.train);
  write_records(p.split("dev"), splits.dev);
  write_records(p.split("test"), splits.test);
  write_records(p.split("pretrain"), pretrain);

  Tokenizer tok = load_tokenizer(p, stage);
  auto split_stats = [&tok](const std::vector<HypoRecord>& rs) {
    double len_sum = 0.0;
    for (const HypoRecord& r : rs)
      len_sum += static_cast<double>(tok.encode(r.reference).size());
    return nlohmann::json{
        {"pairs", rs.size()},
        {"avg_len_tokens",
         rs.empty() ? 0.0 : len_sum / static_cast<double>(rs.size())}};
  };
  save_json(p.stats(), nlohmann::json{{"train", split_stats(splits.train)},
                                      {"dev", split_stats(splits.dev)},
                                      {"test", split_stats(splits.test)},
                                      {"pretrain", split_stats(pretrain)}});

  write_manifest(p, "data", "build-dataset", cfg,
                 {p.task_json(), p.tokenizer_json(), p.nbest()},
                 {p.split("train"), p.split("dev"), p.split("test"),
                  p.split("pretrain"), p.stats()});
}

// --- stage: train (base pretrain + fusion finetune) ---

// Dev scorer: corpus BLEU of top-1 generations against dev references.
inline DevScorer make_dev_bleu_scorer(const std::vector<HypoRecord>& dev,
                                      const Tokenizer& tok,
                                      const RunConfig& cfg, int n_use) {
  const int budget = fusion_token_budget(cfg);
  return [dev, &tok, cfg, n_use, budget](const Lm& model) {
    std::vector<std::string> hyps, refs;
    for (const HypoRecord& rec : dev) {
      refs.push_back(rec.reference);
      const int n = std::min<int>(n_use, static_cast<int>(rec.hypotheses.size()));
      std::string out;
      try {
        std::vector<int> prompt = tok.encode(render_fusion_prompt(
            rec, n, cfg.train.instruction, cfg.train.response_marker));
        const int room = budget - static_cast<int>(prompt.size());
        if (room > 0) {
          auto gen = model.generate(prompt,
                                    std::min(cfg.eval.max_new_tokens, room),
                                    cfg.eval.temperature, false,
                                    Tokenizer::kEos, nullptr);
          out = tok.decode(gen.ids);
        }
      } catch (const LengthError&) {
        // overlong prompt: scored as an empty output
      }
      hyps.push_back(std::move(out));
    }
    return corpus_bleu(hyps, refs).score;
  };
}

// Pretrains the frozen base on the synthetic records if it is not already on
// disk. Records are rendered cycling through the n_sweep values so the base
// sees every prompt arity the ablation will use.
inline void ensure_base(const Paths& p, const RunConfig& cfg,
                        const Tokenizer& tok) {
  if (file_exists(p.base_ckpt())) return;
  require_artifact(p.split("pretrain"), "train", "build-dataset");
  std::vector<HypoRecord> pretrain = read_records(p.split("pretrain"));
  if (pretrain.empty())
    throw DataError("train: pretrain split is empty; cannot build a base");
  fs::create_directories(p.root / "model");

  std::vector<EncodedExample> examples;
  examples.reserve(pretrain.size());
  int skipped = 0;
  const std::vector<int>& sweep = cfg.train.n_sweep;
  for (size_t i = 0; i < pretrain.size(); ++i) {
    const HypoRecord& rec = pretrain[i];
    int n = sweep.empty() ? cfg.train.n_use
                          : sweep[i % sweep.size()];
    n = std::min<int>(n, static_cast<int>(rec.hypotheses.size()));
    try {
      examples.push_back(render_fusion_example(
          tok, rec, n, cfg.train.instruction, cfg.train.response_marker,
          fusion_token_budget(cfg)));
    } catch (const LengthError& e) {
      ++skipped;
      std::cerr << "warning: skipping record: " << e.what() << "\n";
    }
  }

  Rng init_rng(derive_seed(cfg.seed, "base-init"));
  Lm base(cfg.model.lm_config(tok.vocab_size(), TuneMode::full), init_rng);
  TrainConfig trc;
  trc.epochs = cfg.pretrain.epochs;
  trc.batch = cfg.pretrain.batch;
  trc.accum = cfg.pretrain.accum;
  trc.lr_start = cfg.pretrain.lr_start;
  trc.lr_end = cfg.pretrain.lr_end;
  trc.weight_decay = cfg.pretrain.weight_decay;
  trc.grad_clip = cfg.pretrain.grad_clip;
  trc.seed = derive_seed(cfg.seed, "pretrain");
  TrainerState state;
  DevScorer scorer = nullptr;
  if (cfg.pretrain.dev_select) {
    std::vector<HypoRecord> dev = read_records(p.split("dev"));
    scorer = make_dev_bleu_scorer(dev, tok, cfg, cfg.train.n_use);
  }
  TrainReport rep = train_lm(base, examples, trc, state, scorer);
  write_curve_csv(p.pretrain_curve(), rep.curve);
  save_checkpoint(p.base_ckpt(), base);
  if (skipped > 0)
    std::cerr << "warning: pretrain skipped " << skipped
              << " overlong records\n";
}

struct FinetuneResult {
  TrainReport report;
  int skipped_train = 0;
};

// Finetunes `mode` tunable state on top of the frozen base and writes the
// checkpoint, curve, and report into out_dir.
inline FinetuneResult run_finetune(const Paths& p, const RunConfig& cfg,
                                   const Tokenizer& tok,
                                   const std::string& mode, int n_use,
                                   const fs::path& out_dir,
                                   const std::string& seed_stream) {
  require_artifact(p.split("train"), "train", "build-dataset");
  require_artifact(p.split("dev"), "train", "build-dataset");
  std::vector<HypoRecord> train_recs = read_records(p.split("train"));
  std::vector<HypoRecord> dev_recs = read_records(p.split("dev"));
  fs::create_directories(out_dir);

  RenderedSet rendered = render_records(train_recs, tok, cfg, n_use);
  if (rendered.examples.empty())
    throw DataError("train: no trainable records after rendering");

  Rng init_rng(derive_seed(cfg.seed, seed_stream + "-init"));
  Lm model = checkpoint_from_json(
      load_json(p.base_ckpt()),
      cfg.model.lm_config(tok.vocab_size(), tune_mode_from(mode)), init_rng);

  TrainConfig trc;
  trc.epochs = cfg.train.epochs;
  trc.batch = cfg.train.batch;
  trc.accum = cfg.train.accum;
  trc.lr_start = cfg.train.lr_start;
  trc.lr_end = cfg.train.lr_end;
  trc.weight_decay = cfg.train.weight_decay;
  trc.grad_clip = cfg.train.grad_clip;
  trc.seed = derive_seed(cfg.seed, seed_stream);
  TrainerState state;
  DevScorer scorer =
      cfg.train.dev_select ? make_dev_bleu_scorer(dev_recs, tok, cfg, n_use)
                           : DevScorer(nullptr);
  TrainReport rep = train_lm(model, rendered.examples, trc, state, scorer);

  save_checkpoint((out_dir / "fusion.ckpt.json").string(), model);
  write_curve_csv((out_dir / "train_curve.csv").string(), rep.curve);
  nlohmann::json report{{"mode", mode},
                        {"n_use", n_use},
                        {"trainable_params", model.trainable_count()},
                        {"examples", rendered.examples.size()},
                        {"skipped_overlong", rendered.skipped},
                        {"steps", rep.curve.size()},
                        {"dev_scores", rep.dev_scores},
                        {"best_epoch", rep.best_epoch},
                        {"config_hash", to_hex(config_hash(cfg))}};
  save_json((out_dir / "train_report.json").string(), report);
  return {rep, rendered.skipped};
}

inline void run_train(const std::string& workdir, const RunConfig& cfg) {
  cfg.validate();
  Paths p(workdir);
  Tokenizer tok = load_tokenizer(p, "train");
  ensure_base(p, cfg, tok);
  run_finetune(p, cfg, tok, cfg.train.mode, cfg.train.n_use, p.root / "model",
               "finetune");
  write_manifest(p, "model", "train", cfg,
                 {p.split("train"), p.split("dev"), p.split("pretrain"),
                  p.tokenizer_json()},
                 {p.base_ckpt(), p.fusion_ckpt(), p.train_curve(),
                  p.train_report()});
}

// --- stage: generate ---

struct GenerationRow {
  std::string id;
  std::string output;
  std::string reference;
};

inline std::vector<GenerationRow> generate_for_records(
    const Lm& model, const Tokenizer& tok, const RunConfig& cfg,
    const std::vector<HypoRecord>& records, int n_use, Rng* sample_rng) {
  const int budget = fusion_token_budget(cfg);
  std::vector<GenerationRow> rows;
  rows.reserve(records.size());
  int skipped = 0;
  for (const HypoRecord& rec : records) {
    GenerationRow row;
    row.id = rec.id;
    row.reference = rec.reference;
    const int n = std::min<int>(n_use, static_cast<int>(rec.hypotheses.size()));
    try {
      std::vector<int> prompt = tok.encode(render_fusion_prompt(
          rec, n, cfg.train.instruction, cfg.train.response_marker));
      const int room = budget - static_cast<int>(prompt.size());
      if (room <= 0)
        throw LengthError("generate: record '" + rec.id +
                          "' leaves no room for output tokens");
      auto gen = model.generate(prompt, std::min(cfg.eval.max_new_tokens, room),
                                cfg.eval.temperature,
                                cfg.eval.sampling == "sample", Tokenizer::kEos,
                                sample_rng);
      row.output = tok.decode(gen.ids);
    } catch (const LengthError& e) {
      ++skipped;
      std::cerr << "warning: empty output for overlong record: " << e.what()
                << "\n";
    }
    rows.push_back(std::move(row));
  }
  if (skipped > 0)
    std::cerr << "warning: " << skipped << " records rendered overlong\n";
  return rows;
}

inline std::vector<HypoRecord> load_eval_split(const Paths& p,
                                               const RunConfig& cfg,
                                               const std::string& stage) {
  require_artifact(p.split(cfg.eval.split), stage, "build-dataset");
  return read_records(p.split(cfg.eval.split));
}

inline void run_generate(const std::string& workdir, const RunConfig& cfg) {
  cfg.validate();
  Paths p(workdir);
  const std::string stage = "generate";
  Tokenizer tok = load_tokenizer(p, stage);
  require_artifact(p.fusion_ckpt(), stage, "train");
  std::vector<HypoRecord> records = load_eval_split(p, cfg, stage);
  fs::create_directories(p.root / "gen");

  Rng load_rng(derive_seed(cfg.seed, "generate-load"));
  Lm model = load_checkpoint(p.fusion_ckpt(), load_rng);
  Rng sample_rng(derive_seed(cfg.seed, "generate-sample"));
  std::vector<GenerationRow> rows = generate_for_records(
      model, tok, cfg, records, cfg.train.n_use, &sample_rng);

  write_jsonl(p.generations(), rows, [](const GenerationRow& r) {
    return nlohmann::json{
        {"id", r.id}, {"output", r.output}, {"reference", r.reference}};
  });
  write_manifest(p, "gen", "generate", cfg,
                 {p.fusion_ckpt(), p.split(cfg.eval.split), p.tokenizer_json()},
                 {p.generations()});
}

// --- stage: evaluate ---

struct SystemScores {
  BleuResult bleu;
  ChrfResult chrf;
  std::vector<double> segment_bleu;
};

inline SystemScores score_system(const std::vector<std::string>& hyps,
                                 const std::vector<std::string>& refs) {
  SystemScores s;
  s.bleu = corpus_bleu(hyps, refs);
  s.chrf = corpus_chrf(hyps, refs);
  s.segment_bleu.reserve(hyps.size());
  for (size_t i = 0; i < hyps.size(); ++i)
    s.segment_bleu.push_back(sentence_bleu(hyps[i], refs[i]));
  return s;
}

inline nlohmann::json system_to_json(const SystemScores& s) {
  return nlohmann::json{{"bleu", bleu_to_json(s.bleu)},
                        {"chrf", s.chrf.score},
                        {"segment_bleu", s.segment_bleu}};
}

// Per-record best-of-n by sentence BLEU: the selection ceiling of the list.
inline std::vector<std::string> oracle_selection(
    const std::vector<HypoRecord>& records, int n_use) {
  std::vector<std::string> picks;
  picks.reserve(records.size());
  for (const HypoRecord& rec : records) {
    const int n = std::min<int>(n_use, static_cast<int>(rec.hypotheses.size()));
    int best = 0;
    double best_score = -1.0;
    for (int i = 0; i < n; ++i) {
      const double s = sentence_bleu(rec.hypotheses[static_cast<size_t>(i)],
                                     rec.reference);
      if (s > best_score) {
        best_score = s;
        best = i;
      }
    }
    picks.push_back(rec.hypotheses[static_cast<size_t>(best)]);
  }
  return picks;
}

inline nlohmann::json evaluate_records(const std::vector<HypoRecord>& records,
                                       const std::vector<GenerationRow>& gens,
                                       int n_use, const RunConfig& cfg,
                                       const std::string& split) {
  if (records.size() != gens.size())
    throw DataError("evaluate: " + std::to_string(records.size()) +
                    " records vs " + std::to_string(gens.size()) +
                    " generations");
  std::vector<std::string> refs, fusion, one_best;
  for (size_t i = 0; i < records.size(); ++i) {
    if (records[i].id != gens[i].id)
      throw DataError("evaluate: record '" + records[i].id +
                      "' does not line up with generation '" + gens[i].id +
                      "'");
    refs.push_back(records[i].reference);
    fusion.push_back(gens[i].output);
    one_best.push_back(records[i].hypotheses.front());
  }
  SystemScores fusion_s = score_system(fusion, refs);
  SystemScores one_best_s = score_system(one_best, refs);
  SystemScores oracle_s = score_system(oracle_selection(records, n_use), refs);

  const double gap = oracle_s.bleu.score - one_best_s.bleu.score;
  const double gain = fusion_s.bleu.score - one_best_s.bleu.score;
  nlohmann::json deltas{{"fusion_minus_one_best", gain},
                        {"oracle_minus_one_best", gap}};
  deltas["gap_fraction"] =
      gap > 0.0 ? nlohmann::json(gain / gap) : nlohmann::json();

  return nlohmann::json{{"config_hash", to_hex(config_hash(cfg))},
                        {"split", split},
                        {"n_use", n_use},
                        {"segments", records.size()},
                        {"systems",
                         {{"fusion", system_to_json(fusion_s)},
                          {"one_best", system_to_json(one_best_s)},
                          {"oracle_best", system_to_json(oracle_s)}}},
                        {"deltas", std::move(deltas)}};
}

inline std::vector<GenerationRow> read_generations(const std::string& path) {
  return read_jsonl<GenerationRow>(path, [&path](const nlohmann::json& j) {
    require_exact_keys(j, {"id", "output", "reference"}, path);
    return GenerationRow{j.at("id").get<std::string>(),
                         j.at("output").get<std::string>(),
                         j.at("reference").get<std::string>()};
  });
}

inline void run_evaluate(const std::string& workdir, const RunConfig& cfg) {
  cfg.validate();
  Paths p(workdir);
  const std::string stage = "evaluate";
  std::vector<HypoRecord> records = load_eval_split(p, cfg, stage);
  require_artifact(p.generations(), stage, "generate");
  std::vector<GenerationRow> gens = read_generations(p.generations());
  fs::create_directories(p.root / "eval");

  nlohmann::json report =
      evaluate_records(records, gens, cfg.train.n_use, cfg, cfg.eval.split);
  save_json(p.metrics_report(), report);
  write_manifest(p, "eval", "evaluate", cfg,
                 {p.split(cfg.eval.split), p.generations()},
                 {p.metrics_report()});

  const auto& sys = report.at("systems");
  std::cout << "split " << cfg.eval.split << ": fusion BLEU "
            << sys.at("fusion").at("bleu").at("score").get<double>()
            << ", 1-best "
            << sys.at("one_best").at("bleu").at("score").get<double>()
            << ", oracle-best-of-" << cfg.train.n_use << " "
            << sys.at("oracle_best").at("bleu").at("score").get<double>()
            << "\n";
}

// --- stage: ablate-n ---

inline void run_ablate(const std::string& workdir, const RunConfig& cfg) {
  cfg.validate();
  Paths p(workdir);
  const std::string stage = "ablate-n";
  Tokenizer tok = load_tokenizer(p, stage);
  ensure_base(p, cfg, tok);
  std::vector<HypoRecord> records = load_eval_split(p, cfg, stage);
  fs::create_directories(p.root / "ablate");

  std::string csv = "n_use,bleu,chrf\n";
  nlohmann::json detail = nlohmann::json::array();
  for (int n : cfg.train.n_sweep) {
    const fs::path dir = p.root / "ablate" / ("n" + std::to_string(n));
    run_finetune(p, cfg, tok, cfg.train.mode, n, dir,
                 "finetune-n" + std::to_string(n));
    Rng load_rng(derive_seed(cfg.seed, "ablate-load"));
    Lm model = load_checkpoint((dir / "fusion.ckpt.json").string(), load_rng);
    Rng sample_rng(derive_seed(cfg.seed, "ablate-sample"));
    std::vector<GenerationRow> rows =
        generate_for_records(model, tok, cfg, records, n, &sample_rng);
    nlohmann::json report =
        evaluate_records(records, rows, n, cfg, cfg.eval.split);
    const double bleu =
        report.at("systems").at("fusion").at("bleu").at("score").get<double>();
    const double chrf =
        report.at("systems").at("fusion").at("chrf").get<double>();
    char buf[96];
    std::snprintf(buf, sizeof buf, "%d,%.10g,%.10g\n", n, bleu, chrf);
    csv += buf;
    detail.push_back(nlohmann::json{{"n_use", n}, {"report", report}});
    std::cout << "n_use " << n << ": fusion BLEU " << bleu << ", chrF++ "
              << chrf << "\n";
  }
  write_text_file((p.root / "ablate" / "ablate.csv").string(), csv);
  save_json((p.root / "ablate" / "ablate.json").string(), detail);
  write_manifest(p, "ablate", "ablate-n", cfg,
                 {p.split("train"), p.split("dev"), p.split(cfg.eval.split),
                  p.base_ckpt()},
                 {(p.root / "ablate" / "ablate.csv").string(),
                  (p.root / "ablate" / "ablate.json").string()});
}

// --- stage: compare-tuning ---

inline void run_compare(const std::string& workdir, const RunConfig& cfg) {
  cfg.validate();
  Paths p(workdir);
  const std::string stage = "compare-tuning";
  Tokenizer tok = load_tokenizer(p, stage);
  ensure_base(p, cfg, tok);
  std::vector<HypoRecord> records = load_eval_split(p, cfg, stage);
  fs::create_directories(p.root / "compare");

  nlohmann::json out = nlohmann::json::object();
  std::map<std::string, double> bleu_by_mode;
  for (const std::string mode : {"adapter", "lora"}) {
    const fs::path dir = p.root / "compare" / mode;
    // identical data, base, and ordering seed; only the tunable family differs
    FinetuneResult ft = run_finetune(p, cfg, tok, mode, cfg.train.n_use, dir,
                                     "compare-" + mode);
    Rng load_rng(derive_seed(cfg.seed, "compare-load"));
    Lm model = load_checkpoint((dir / "fusion.ckpt.json").string(), load_rng);
    Rng sample_rng(derive_seed(cfg.seed, "compare-sample"));
    std::vector<GenerationRow> rows = generate_for_records(
        model, tok, cfg, records, cfg.train.n_use, &sample_rng);
    nlohmann::json report =
        evaluate_records(records, rows, cfg.train.n_use, cfg, cfg.eval.split);
    bleu_by_mode[mode] =
        report.at("systems").at("fusion").at("bleu").at("score").get<double>();
    out[mode] = {{"report", report},
                 {"trainable_params", model.trainable_count()},
                 {"dev_scores", ft.report.dev_scores}};
  }
  out["abs_delta_bleu"] =
      std::abs(bleu_by_mode.at("adapter") - bleu_by_mode.at("lora"));
  save_json((p.root / "compare" / "compare.json").string(), out);
  write_manifest(p, "compare", "compare-tuning", cfg,
                 {p.split("train"), p.split("dev"), p.split(cfg.eval.split),
                  p.base_ckpt()},
                 {(p.root / "compare" / "compare.json").string()});
  std::cout << "adapter BLEU " << bleu_by_mode.at("adapter") << ", lora BLEU "
            << bleu_by_mode.at("lora") << ", |delta| "
            << out.at("abs_delta_bleu").get<double>() << "\n";
}

// --- stage: export-ngrams ---

namespace detail {

// n-gram string -> bag of character n-grams (1..3) feature-hashed into a
// fixed-width vector.
inline std::vector<double> ngram_features(const std::string& gram, size_t dims) {
  std::vector<double> v(dims, 0.0);
  for (int n = 1; n <= 3; ++n) {
    if (static_cast<int>(gram.size()) < n) break;
    for (size_t i = 0; i + static_cast<size_t>(n) <= gram.size(); ++i) {
      const std::uint64_t h =
          fnv1a64(std::string_view(gram).substr(i, static_cast<size_t>(n)));
      v[h % dims] += 1.0;
    }
  }
  return v;
}

// Top-2 principal directions by power iteration with deflation.
inline std::pair<std::vector<double>, std::vector<double>> top2_components(
    const std::vector<std::vector<double>>& centered, size_t dims) {
  std::vector<double> cov(dims * dims, 0.0);
  for (const auto& row : centered)
    for (size_t i = 0; i < dims; ++i) {
      if (row[i] == 0.0) continue;
      for (size_t j = 0; j < dims; ++j) cov[i * dims + j] += row[i] * row[j];
    }
  auto power = [&cov, dims](std::vector<double> v) {
    for (int it = 0; it < 200; ++it) {
      std::vector<double> w(dims, 0.0);
      for (size_t i = 0; i < dims; ++i) {
        double s = 0.0;
        for (size_t j = 0; j < dims; ++j) s += cov[i * dims + j] * v[j];
        w[i] = s;
      }
      double norm = 0.0;
      for (double x : w) norm += x * x;
      norm = std::sqrt(norm);
      if (norm < 1e-30) return v;
      for (size_t i = 0; i < dims; ++i) w[i] /= norm;
      v = std::move(w);
    }
    return v;
  };
  Rng rng(derive_seed(7, "pca-start"));
  std::vector<double> v0(dims);
  for (double& x : v0) x = rng.normal();
  std::vector<double> pc1 = power(v0);
  // deflate: cov -= lambda1 * pc1 pc1^T
  double lambda1 = 0.0;
  for (size_t i = 0; i < dims; ++i) {
    double s = 0.0;
    for (size_t j = 0; j < dims; ++j) s += cov[i * dims + j] * pc1[j];
    lambda1 += pc1[i] * s;
  }
  for (size_t i = 0; i < dims; ++i)
    for (size_t j = 0; j < dims; ++j)
      cov[i * dims + j] -= lambda1 * pc1[i] * pc1[j];
  std::vector<double> v1(dims);
  for (double& x : v1) x = rng.normal();
  std::vector<double> pc2 = power(v1);
  return {pc1, pc2};
}

}  // namespace detail

inline void run_export_ngrams(const std::string& workdir,
                              const RunConfig& cfg) {
  cfg.validate();
  Paths p(workdir);
  const std::string stage = "export-ngrams";
  std::vector<HypoRecord> records = load_eval_split(p, cfg, stage);
  require_artifact(p.generations(), stage, "generate");
  std::vector<GenerationRow> gens = read_generations(p.generations());
  if (records.size() != gens.size())
    throw DataError("export-ngrams: record/generation count mismatch");
  fs::create_directories(p.root / "ngrams");

  // coverage: 1-best vs union of the rest vs fusion, per order
  std::string csv = "id,n,one_best,union_rest,fusion\n";
  std::map<int, std::array<double, 3>> sums;
  std::map<int, int> counts;
  const int n_use = cfg.train.n_use;
  for (size_t i = 0; i < records.size(); ++i) {
    const HypoRecord& rec = records[i];
    const int n_avail = std::min<int>(n_use, static_cast<int>(rec.hypotheses.size()));
    std::vector<std::string> rest(rec.hypotheses.begin() + 1,
                                  rec.hypotheses.begin() + n_avail);
    for (int n = 1; n <= 3; ++n) {
      const std::set<std::string> ref = word_ngram_set(rec.reference, n);
      if (ref.empty()) continue;
      const double c1 = ngram_coverage(word_ngram_set(rec.hypotheses[0], n), ref);
      const double cu = ngram_coverage(union_ngram_set(rest, n), ref);
      const double cf = ngram_coverage(word_ngram_set(gens[i].output, n), ref);
      char buf[128];
      std::snprintf(buf, sizeof buf, "%s,%d,%.10g,%.10g,%.10g\n",
                    rec.id.c_str(), n, c1, cu, cf);
      csv += buf;
      sums[n][0] += c1;
      sums[n][1] += cu;
      sums[n][2] += cf;
      counts[n] += 1;
    }
  }
  write_text_file((p.root / "ngrams" / "coverage.csv").string(), csv);

  nlohmann::json summary = nlohmann::json::object();
  for (const auto& [n, s] : sums) {
    const double c = static_cast<double>(counts.at(n));
    summary["order_" + std::to_string(n)] = {{"segments", counts.at(n)},
                                             {"one_best", s[0] / c},
                                             {"union_rest", s[1] / c},
                                             {"fusion", s[2] / c}};
  }
  save_json((p.root / "ngrams" / "summary.json").string(), summary);

  // 2-d projection of the n-gram inventories per system
  constexpr size_t dims = 256;
  std::vector<std::pair<std::string, std::string>> labeled;  // (system, gram)
  auto add_system = [&labeled](const std::string& label,
                               const std::set<std::string>& grams) {
    for (const std::string& g : grams) labeled.emplace_back(label, g);
  };
  std::set<std::string> ref_g, one_g, union_g, fusion_g;
  for (size_t i = 0; i < records.size(); ++i) {
    const HypoRecord& rec = records[i];
    const int n_avail = std::min<int>(n_use, static_cast<int>(rec.hypotheses.size()));
    std::vector<std::string> rest(rec.hypotheses.begin() + 1,
                                  rec.hypotheses.begin() + n_avail);
    for (int n = 1; n <= 3; ++n) {
      for (const auto& g : word_ngram_set(rec.reference, n)) ref_g.insert(g);
      for (const auto& g : word_ngram_set(rec.hypotheses[0], n)) one_g.insert(g);
      for (const auto& g : union_ngram_set(rest, n)) union_g.insert(g);
      for (const auto& g : word_ngram_set(gens[i].output, n)) fusion_g.insert(g);
    }
  }
  add_system("reference", ref_g);
  add_system("one_best", one_g);
  add_system("union_rest", union_g);
  add_system("fusion", fusion_g);

  std::vector<std::vector<double>> feats;
  feats.reserve(labeled.size());
  std::vector<double> mean(dims, 0.0);
  for (const auto& [label, gram] : labeled) {
    feats.push_back(detail::ngram_features(gram, dims));
    for (size_t d = 0; d < dims; ++d) mean[d] += feats.back()[d];
  }
  if (!feats.empty())
    for (size_t d = 0; d < dims; ++d)
      mean[d] /= static_cast<double>(feats.size());
  for (auto& f : feats)
    for (size_t d = 0; d < dims; ++d) f[d] -= mean[d];
  std::string points = "system,ngram,x,y\n";
  if (!feats.empty()) {
    auto [pc1, pc2] = detail::top2_components(feats, dims);
    for (size_t i = 0; i < feats.size(); ++i) {
      double x = 0.0, y = 0.0;
      for (size_t d = 0; d < dims; ++d) {
        x += feats[i][d] * pc1[d];
        y += feats[i][d] * pc2[d];
      }
      // n-gram keys use the unit separator; print with spaces
      std::string shown = labeled[i].second;
      for (char& ch : shown)
        if (ch == '\x1f') ch = ' ';
      char buf[160];
      std::snprintf(buf, sizeof buf, "%s,%s,%.10g,%.10g\n",
                    labeled[i].first.c_str(), shown.c_str(), x, y);
      points += buf;
    }
  }
  write_text_file((p.root / "ngrams" / "points.csv").string(), points);

  write_manifest(p, "ngrams", "export-ngrams", cfg,
                 {p.split(cfg.eval.split), p.generations()},
                 {(p.root / "ngrams" / "coverage.csv").string(),
                  (p.root / "ngrams" / "summary.json").string(),
                  (p.root / "ngrams" / "points.csv").string()});
}

// --- convenience: full pipeline ---

inline void run_pipeline(const std::string& workdir, const RunConfig& cfg) {
  run_make_task(workdir, cfg);
  run_decode(workdir, cfg);
  run_build_dataset(workdir, cfg);
  run_train(workdir, cfg);
  run_generate(workdir, cfg);
  run_evaluate(workdir, cfg);
}

}  // namespace hypofuse
