// Command line front end. Each subcommand runs one pipeline stage against a
// workdir; `pipeline` chains the six core stages. Configuration is the
// built-in default, optionally replaced by --config and patched by repeated
// --set section.key=value overrides.

#include <cstdio>
#include <exception>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"

#include "hypofuse/common.hpp"
#include "hypofuse/config.hpp"
#include "hypofuse/pipeline.hpp"

namespace {

struct CommonOpts {
  std::string workdir = "run";
  std::string config_path;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("-w,--workdir", opts.workdir, "artifact directory")
      ->capture_default_str();
  cmd->add_option("-c,--config", opts.config_path,
                  "JSON config file (defaults built in)");
  cmd->add_option("-s,--set", opts.sets,
                  "override, e.g. --set train.mode=lora (repeatable)");
}

hypofuse::RunConfig resolve_config(const CommonOpts& opts) {
  std::vector<std::pair<std::string, std::string>> overrides;
  for (const std::string& s : opts.sets) {
    const size_t eq = s.find('=');
    if (eq == std::string::npos || eq == 0)
      throw hypofuse::ConfigError("override must look like section.key=value, got '" +
                                  s + "'");
    overrides.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  return hypofuse::load_run_config(opts.config_path, overrides);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"N-best translation fusion pipeline"};
  app.require_subcommand(1);

  struct Stage {
    const char* name;
    const char* help;
    void (*fn)(const std::string&, const hypofuse::RunConfig&);
  };
  const Stage stages[] = {
      {"make-task", "build the toy translation task, corpus, and tokenizer",
       hypofuse::run_make_task},
      {"decode", "train the translator if needed and decode N-best lists",
       hypofuse::run_decode},
      {"build-dataset", "split N-best records and synthesize pretrain data",
       hypofuse::run_build_dataset},
      {"train", "pretrain the frozen base and finetune the fusion model",
       hypofuse::run_train},
      {"generate", "run the fusion model over the eval split",
       hypofuse::run_generate},
      {"evaluate", "score fusion vs 1-best and oracle baselines",
       hypofuse::run_evaluate},
      {"ablate-n", "sweep the number of hypotheses fed to the fusion model",
       hypofuse::run_ablate},
      {"compare-tuning", "finetune adapter and lora on identical data",
       hypofuse::run_compare},
      {"export-ngrams", "emit coverage tables and 2-d n-gram projections",
       hypofuse::run_export_ngrams},
      {"pipeline", "make-task through evaluate in one run",
       hypofuse::run_pipeline},
  };

  std::vector<std::pair<const Stage*, CommonOpts>> bound;
  bound.reserve(std::size(stages));
  for (const Stage& st : stages) bound.emplace_back(&st, CommonOpts{});
  for (auto& [st, opts] : bound)
    add_common(app.add_subcommand(st->name, st->help), opts);

  CLI11_PARSE(app, argc, argv);

  for (auto& [st, opts] : bound) {
    if (!app.get_subcommand(st->name)->parsed()) continue;
    try {
      hypofuse::RunConfig cfg = resolve_config(opts);
      st->fn(opts.workdir, cfg);
      return 0;
    } catch (const hypofuse::ConfigError& e) {
      std::cerr << "config error: " << e.what() << "\n";
      return 2;
    } catch (const hypofuse::StageError& e) {
      std::cerr << "stage error: " << e.what() << "\n";
      return 3;
    } catch (const hypofuse::DataError& e) {
      std::cerr << "data error: " << e.what() << "\n";
      return 4;
    } catch (const hypofuse::TrainingError& e) {
      std::cerr << "training error: " << e.what() << "\n";
      return 5;
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 1;
    }
  }
  return 1;
}
