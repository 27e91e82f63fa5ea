#include <iostream>

#include <CLI11.hpp>

#include "conec_cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Domain-incremental LoRA experiments on synthetic streams"};
  conec::cli::RunSpec spec;
  std::string config, out = spec.out_dir.string(), checkpoint, order;
  std::uint64_t seed = 0;
  app.add_option("--config", config, "flat key = value config file (defaults when omitted)");
  app.add_option("--mode", spec.mode, "train | eval | sweep | ablation | dump-embeddings")
      ->check(CLI::IsMember({"train", "eval", "sweep", "ablation", "dump-embeddings"}));
  auto* seed_opt = app.add_option("--seed", seed, "override the engine seed");
  auto* order_opt = app.add_option("--order", order, "domain order, e.g. \"3,1,2\"");
  app.add_option("--out", out, "output directory");
  app.add_option("--checkpoint", checkpoint, "checkpoint to write (train) or read (eval, dump-embeddings)");
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : conec::cli::kConfigError;
  }
  spec.config_path = config;
  spec.out_dir = out;
  spec.checkpoint = checkpoint;
  if (*seed_opt) spec.seed = seed;
  if (*order_opt) {
    try {
      spec.order = conec::cli::parse_order(order);
    } catch (const std::exception& e) {
      std::cerr << "config error: " << e.what() << '\n';
      return conec::cli::kConfigError;
    }
  }
  return conec::cli::run(spec, std::cerr);
}
