// edje: synth | precompute | train | evaluate | bench, driven by one config file.

#include <iostream>

#include "CLI11.hpp"
#include "edje/pipeline.hpp"

namespace {

struct Args {
  std::string config;
  std::optional<std::uint64_t> seed;
  bool force = false;
  std::string distill;
  std::optional<std::size_t> pool_size;
  std::string scorer;
};

void add_common(CLI::App* cmd, Args& args) {
  cmd->add_option("--config", args.config, "config file (section.key = value lines)")->required();
  cmd->add_option("--seed", args.seed, "overrides run.seed");
  cmd->add_flag("--force", args.force, "overwrite existing outputs");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EDJE reranking pipeline"};
  app.require_subcommand(1);
  Args args;

  auto* synth = app.add_subcommand("synth", "generate a planted-structure synthetic corpus");
  auto* precompute = app.add_subcommand("precompute", "adapt raw vision tokens into the fp16 feature store");
  auto* train = app.add_subcommand("train", "train adapter and joint encoder");
  auto* evaluate = app.add_subcommand("evaluate", "first-stage retrieval then reranking, Recall@{1,5,10}");
  auto* bench = app.add_subcommand("bench", "time adapter, encoder and heads at a fixed batch");
  for (auto* cmd : {synth, precompute, train, evaluate, bench}) add_common(cmd, args);
  train->add_option("--distill", args.distill, "teacher checkpoint; its config.resolved and vocab.txt must sit beside it");
  evaluate->add_option("--pool-size", args.pool_size, "overrides eval.pool_size");
  evaluate->add_option("--scorer", args.scorer, "model | first-stage | oracle");

  CLI11_PARSE(app, argc, argv);

  try {
    edje::PipelineConfig config = edje::load_config(args.config);
    if (args.seed) {
      config.run.seed = *args.seed;
      config.train.seed = *args.seed;
    }
    edje::CommandOptions options;
    options.force = args.force;
    if (!args.distill.empty()) options.teacher = args.distill;
    options.pool_size = args.pool_size;
    if (!args.scorer.empty()) options.scorer = edje::parse_scorer_kind(args.scorer);

    if (synth->parsed()) edje::cmd_synth(config, options, std::cout);
    if (train->parsed()) edje::cmd_train(config, options, std::cout);
    if (precompute->parsed()) edje::cmd_precompute(config, options, std::cout);
    if (evaluate->parsed()) edje::cmd_evaluate(config, options, std::cout);
    if (bench->parsed()) edje::cmd_bench(config, options, std::cout);
  } catch (const edje::Error& e) {
    std::cerr << "edje: " << edje::to_string(e.kind()) << " error: " << e.what() << "\n";
    return edje::exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "edje: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
