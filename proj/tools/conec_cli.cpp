#include "conec_cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <future>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "conec/errors.hpp"
#include "conec/stream.hpp"

namespace conec::cli {

namespace {

class RunLog {
 public:
  explicit RunLog(const std::filesystem::path& path) : out_(path, std::ios::app) {}

  void line(const std::string& msg) {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    out_ << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ") << ' ' << msg << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

struct InvariantViolation : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string order_text(const std::vector<std::size_t>& order) {
  std::string s;
  for (std::size_t i = 0; i < order.size(); ++i) s += (i ? "," : "") + std::to_string(order[i]);
  return s;
}

RunConfig load_run_config(const RunSpec& spec) {
  RunConfig config;
  if (!spec.config_path.empty()) {
    config = load_config(spec.config_path);
  } else {
    config.finalize();
  }
  if (spec.seed) config.engine.seed = *spec.seed;
  if (spec.order) {
    const auto& o = *spec.order;
    std::vector<bool> hit(config.stream.num_domains + 1, false);
    for (std::size_t id : o) {
      if (id < 1 || id > config.stream.num_domains || hit[id])
        throw ConfigError("--order must be a permutation of a subset of 1.." +
                          std::to_string(config.stream.num_domains));
      hit[id] = true;
    }
    if (o.empty()) throw ConfigError("--order is empty");
  }
  return config;
}

std::vector<std::size_t> identity_order(std::size_t n) {
  std::vector<std::size_t> o(n);
  for (std::size_t i = 0; i < n; ++i) o[i] = i + 1;
  return o;
}

LabeledRun run_one(const RunConfig& config, const std::vector<DomainData>& stream,
                   const std::vector<std::size_t>& order, std::size_t order_id, const std::string& label,
                   RunLog& log, std::optional<RunResult>* keep = nullptr) {
  auto logger = [&log, &label](const std::string& m) { log.line(label + ": " + m); };
  RunResult result = run_order(config.engine, stream, order, order_id, logger);
  const auto violations = check_invariants(result.engine, result.metrics);
  for (const auto& v : violations) log.line(label + ": invariant violated: " + v);
  if (!violations.empty()) throw InvariantViolation(label + ": " + violations.front());
  LabeledRun out{label, order_id, order, result.metrics};
  if (keep) keep->emplace(std::move(result));
  return out;
}

void write_checkpoint(const std::filesystem::path& path, const RunConfig& config, const RunResult& result,
                      std::size_t order_id, const std::vector<std::size_t>& order) {
  save_checkpoint(path, Checkpoint{format_config(config), order_id, order, result.metrics,
                                   result.engine.config(), result.engine.state()});
}

void write_outputs(const std::filesystem::path& dir, const std::vector<LabeledRun>& runs) {
  write_metrics_csv(dir / "metrics.csv", runs);
  write_metrics_json(dir / "metrics.json", runs);
}

int mode_train(const RunSpec& spec, const RunConfig& config, RunLog& log, std::ostream& err) {
  const auto stream = generate(config.stream);
  const auto order = spec.order ? *spec.order : identity_order(config.stream.num_domains);
  std::optional<RunResult> result;
  auto run = run_one(config, stream, order, 0, "train", log, &result);
  write_outputs(spec.out_dir, {run});
  const auto ck = spec.checkpoint.empty() ? spec.out_dir / "checkpoint.bin" : spec.checkpoint;
  write_checkpoint(ck, config, *result, 0, order);
  log.line("checkpoint written to " + ck.string());
  err << "avg " << run.metrics.avg_accuracy() << " last " << run.metrics.last_accuracy() << " oracle last "
      << run.metrics.last_oracle_accuracy() << " dc " << run.metrics.last_dc_accuracy() << '\n';
  return kOk;
}

int mode_sweep(const RunSpec& spec, const RunConfig& config, RunLog& log, std::ostream& err) {
  const auto stream = generate(config.stream);
  const auto orders = spec.order ? std::vector<std::vector<std::size_t>>{*spec.order}
                                 : domain_orders(config.stream.num_domains, config.num_orders, config.order_seed);
  std::vector<LabeledRun> runs(orders.size());
  if (config.engine.threads > 1 && orders.size() > 1) {
    RunConfig per_run = config;
    per_run.engine.threads = 1;
    std::vector<std::future<LabeledRun>> pending;
    for (std::size_t k = 0; k < orders.size(); ++k)
      pending.push_back(std::async(std::launch::async, [&, k] {
        return run_one(per_run, stream, orders[k], k, "order " + std::to_string(k), log);
      }));
    for (std::size_t k = 0; k < orders.size(); ++k) runs[k] = pending[k].get();
  } else {
    for (std::size_t k = 0; k < orders.size(); ++k)
      runs[k] = run_one(config, stream, orders[k], k, "order " + std::to_string(k), log);
  }
  write_outputs(spec.out_dir, runs);
  write_summary_csv(spec.out_dir / "summary.csv", runs);
  double mean = 0.0;
  for (const auto& r : runs) mean += r.metrics.last_accuracy();
  err << orders.size() << " orders, mean last accuracy " << mean / static_cast<double>(runs.size()) << '\n';
  return kOk;
}

int mode_ablation(const RunSpec& spec, const RunConfig& config, RunLog& log, std::ostream& err) {
  const auto stream = generate(config.stream);
  const auto order = spec.order ? *spec.order : identity_order(config.stream.num_domains);
  struct Variant {
    std::string label;
    RunConfig config;
  };
  std::vector<Variant> variants;
  auto add = [&](const std::string& label, auto&& edit) {
    RunConfig c = config;
    edit(c.engine);
    c.engine.validate();
    variants.push_back({label, c});
  };
  add("full", [](EngineConfig&) {});
  add("cosine_head", [](EngineConfig& e) { e.head = HeadKind::Cosine; });
  add("linear_head", [](EngineConfig& e) { e.head = HeadKind::Linear; });
  add("specific_only", [](EngineConfig& e) { e.adapter_mode = AdapterMode::SpecificOnly; });
  add("no_ball_loss", [](EngineConfig& e) { e.use_ball_loss = false; });
  add("last_layer_router", [](EngineConfig& e) { e.router_layers = {e.backbone.num_layers}; });
  add("finetune", [](EngineConfig& e) { e.adapter_mode = AdapterMode::Finetune; });

  std::vector<LabeledRun> runs;
  for (std::size_t k = 0; k < variants.size(); ++k)
    runs.push_back(run_one(variants[k].config, stream, order, k, variants[k].label, log));
  write_outputs(spec.out_dir, runs);

  std::ofstream table(spec.out_dir / "ablation.csv");
  table << "variant,order_id,avg_accuracy,last_accuracy,avg_oracle_accuracy,last_oracle_accuracy,last_dc_accuracy\n";
  for (const auto& r : runs) {
    table << r.label << ',' << r.order_id << ',' << num(r.metrics.avg_accuracy()) << ','
          << num(r.metrics.last_accuracy()) << ',' << num(r.metrics.avg_oracle_accuracy()) << ','
          << num(r.metrics.last_oracle_accuracy()) << ',' << num(r.metrics.last_dc_accuracy()) << '\n';
    err << std::left << std::setw(18) << r.label << " last " << r.metrics.last_accuracy() << " dc "
        << r.metrics.last_dc_accuracy() << '\n';
  }
  return kOk;
}

int mode_eval(const RunSpec& spec, RunLog& log, std::ostream& err) {
  if (spec.checkpoint.empty()) throw ConfigError("eval mode needs --checkpoint");
  Checkpoint ck = load_checkpoint(spec.checkpoint);
  RunConfig config = parse_config(ck.config_text);
  const auto stream = generate(config.stream);
  const Engine engine(ck.config, std::move(ck.state));

  std::vector<const DomainData*> seen;
  for (std::size_t id : engine.state().domain_ids) {
    const auto it = std::find_if(stream.begin(), stream.end(), [id](const DomainData& d) { return d.id == id; });
    if (it == stream.end()) throw ConfigError("checkpoint refers to unknown domain " + std::to_string(id));
    seen.push_back(&*it);
  }
  const auto fresh = engine.evaluate(seen, ck.order_id);
  std::vector<EvalRow> stored;
  for (const auto& r : ck.metrics.rows)
    if (r.after_domain == engine.state().trained()) stored.push_back(r);
  if (fresh != stored) {
    log.line("eval: recomputed metrics differ from the checkpoint");
    err << "recomputed metrics differ from the checkpoint\n";
    return kInvariantViolation;
  }
  log.line("eval: " + std::to_string(fresh.size()) + " rows reproduced exactly");
  write_outputs(spec.out_dir, {LabeledRun{"eval", ck.order_id, ck.order, ck.metrics}});
  err << "metrics reproduced exactly (" << fresh.size() << " rows)\n";
  return kOk;
}

int mode_dump(const RunSpec& spec, const RunConfig& config, RunLog& log, std::ostream& err) {
  const auto stream = generate(config.stream);
  std::optional<Engine> engine;
  if (!spec.checkpoint.empty()) {
    Checkpoint ck = load_checkpoint(spec.checkpoint);
    engine.emplace(ck.config, std::move(ck.state));
  } else {
    const auto order = spec.order ? *spec.order : identity_order(config.stream.num_domains);
    std::optional<RunResult> result;
    auto run = run_one(config, stream, order, 0, "dump", log, &result);
    write_outputs(spec.out_dir, {run});
    engine.emplace(std::move(result->engine));
  }
  std::ofstream out(spec.out_dir / "embeddings.csv");
  const std::size_t d = engine->config().backbone.embed_dim, L = engine->config().backbone.num_layers;
  out << "domain,class,layer";
  for (std::size_t j = 0; j < d; ++j) out << ",e_" << j;
  out << '\n' << std::setprecision(17);
  for (std::size_t id : engine->state().domain_ids) {
    const auto& data = *std::find_if(stream.begin(), stream.end(), [id](const DomainData& s) { return s.id == id; });
    const std::size_t p = engine->position_of(id);
    for (std::size_t i = 0; i < data.test_x.rows(); ++i) {
      const LayerTrace trace = engine->embed(data.test_x.row(i), p);
      for (std::size_t layer = 1; layer <= L; ++layer) {
        out << id << ',' << data.test_y[i] << ',' << layer;
        for (double v : trace.cls_at(layer)) out << ',' << v;
        out << '\n';
      }
    }
  }
  engine->state().gmms.export_csv(spec.out_dir / "gmms.csv");
  export_csv(spec.out_dir / "stream_train.csv", stream, Split::Train);
  export_csv(spec.out_dir / "stream_test.csv", stream, Split::Test);
  log.line("embeddings written");
  err << "embeddings written to " << (spec.out_dir / "embeddings.csv").string() << '\n';
  return kOk;
}

}  // namespace

std::vector<std::size_t> parse_order(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw ConfigError("--order: '" + item + "' is not a domain id");
    out.push_back(v);
  }
  if (out.empty()) throw ConfigError("--order is empty");
  return out;
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<LabeledRun>& runs) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "order_id,after_domain,eval_domain,accuracy,dc_accuracy,oracle_accuracy,exit_layer_mean\n";
  for (const auto& run : runs)
    for (const auto& r : run.metrics.rows)
      out << r.order_id << ',' << r.after_domain << ',' << r.eval_domain << ',' << num(r.accuracy) << ','
          << num(r.dc_accuracy) << ',' << num(r.oracle_accuracy) << ',' << num(r.exit_layer_mean) << '\n';
}

void write_metrics_json(const std::filesystem::path& path, const std::vector<LabeledRun>& runs) {
  nlohmann::json doc;
  doc["runs"] = nlohmann::json::array();
  for (const auto& run : runs) {
    nlohmann::json j;
    j["label"] = run.label;
    j["order_id"] = run.order_id;
    j["order"] = run.order;
    j["avg_accuracy"] = run.metrics.avg_accuracy();
    j["last_accuracy"] = run.metrics.last_accuracy();
    j["avg_oracle_accuracy"] = run.metrics.avg_oracle_accuracy();
    j["last_oracle_accuracy"] = run.metrics.last_oracle_accuracy();
    j["last_dc_accuracy"] = run.metrics.last_dc_accuracy();
    j["rows"] = nlohmann::json::array();
    for (const auto& r : run.metrics.rows)
      j["rows"].push_back({{"order_id", r.order_id},
                           {"after_domain", r.after_domain},
                           {"eval_domain", r.eval_domain},
                           {"accuracy", r.accuracy},
                           {"dc_accuracy", r.dc_accuracy},
                           {"oracle_accuracy", r.oracle_accuracy},
                           {"exit_layer_mean", r.exit_layer_mean}});
    j["layer_dc"] = nlohmann::json::array();
    for (const auto& r : run.metrics.layer_dc)
      j["layer_dc"].push_back({{"after_domain", r.after_domain}, {"layer", r.layer}, {"accuracy", r.accuracy}});
    doc["runs"].push_back(std::move(j));
  }
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

void write_summary_csv(const std::filesystem::path& path, const std::vector<LabeledRun>& runs) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << "row,order,avg_accuracy,last_accuracy,avg_oracle_accuracy,last_oracle_accuracy,last_dc_accuracy\n";
  const std::size_t k = 5;
  std::vector<std::vector<double>> cols(k);
  for (const auto& r : runs) {
    const double v[k] = {r.metrics.avg_accuracy(), r.metrics.last_accuracy(), r.metrics.avg_oracle_accuracy(),
                         r.metrics.last_oracle_accuracy(), r.metrics.last_dc_accuracy()};
    out << r.order_id << ',' << '"' << order_text(r.order) << '"';
    for (std::size_t c = 0; c < k; ++c) {
      out << ',' << num(v[c]);
      cols[c].push_back(v[c]);
    }
    out << '\n';
  }
  const double n = static_cast<double>(runs.size());
  std::vector<double> mean(k, 0.0), sd(k, 0.0);
  for (std::size_t c = 0; c < k; ++c) {
    for (double v : cols[c]) mean[c] += v / n;
    for (double v : cols[c]) sd[c] += (v - mean[c]) * (v - mean[c]);
    sd[c] = runs.size() > 1 ? std::sqrt(sd[c] / (n - 1.0)) : 0.0;
  }
  out << "mean,";
  for (double v : mean) out << ',' << num(v);
  out << "\nstd,";
  for (double v : sd) out << ',' << num(v);
  out << '\n';
}

std::vector<std::string> check_invariants(const Engine& engine, const MetricsRecord& metrics) {
  std::vector<std::string> bad;
  const auto& cfg = engine.config();
  const std::size_t L = cfg.backbone.num_layers;
  for (const auto& r : metrics.rows) {
    for (double v : {r.accuracy, r.dc_accuracy, r.oracle_accuracy})
      if (!(v >= 0.0 && v <= 1.0)) bad.push_back("accuracy outside [0, 1]");
    if (cfg.adapter_mode != AdapterMode::Finetune && !(r.exit_layer_mean >= 1.0 && r.exit_layer_mean <= double(L)))
      bad.push_back("mean exit layer outside [1, L]");
  }
  for (const auto& block : engine.state().bank.shared())
    for (const auto& lora : block.loras) {
      const Matrix g = matmul_nt(lora.b, lora.b);
      if (max_abs_diff(g, Matrix::identity(g.rows())) >= 1e-8) bad.push_back("shared adapter B lost orthonormal rows");
    }
  const auto& st = engine.state();
  const std::size_t expected_heads = cfg.adapter_mode == AdapterMode::Finetune ? 1 : st.trained();
  if (st.heads.size() != expected_heads) bad.push_back("head count does not match trained domains");
  if (cfg.adapter_mode != AdapterMode::Finetune) {
    if (st.bank.num_domains() != st.trained()) bad.push_back("specific adapter count does not match trained domains");
    if (st.gmms.size() != st.trained() * L) bad.push_back("GMM store does not hold L models per domain");
    if (st.router.active_domains != st.trained()) bad.push_back("router does not cover every trained domain");
  }
  return bad;
}

int run(const RunSpec& spec, std::ostream& err) {
  try {
    static const char* modes[] = {"train", "eval", "sweep", "ablation", "dump-embeddings"};
    if (std::find(std::begin(modes), std::end(modes), spec.mode) == std::end(modes))
      throw ConfigError("unknown mode '" + spec.mode + "'");
    std::error_code ec;
    std::filesystem::create_directories(spec.out_dir, ec);
    if (ec || !std::filesystem::is_directory(spec.out_dir))
      throw ConfigError("output directory " + spec.out_dir.string() + " is not writable");
    RunLog log(spec.out_dir / "run.log");
    log.line("mode " + spec.mode);
    if (spec.mode == "eval") return mode_eval(spec, log, err);
    const RunConfig config = load_run_config(spec);
    log.line("config:\n" + format_config(config));
    if (spec.mode == "train") return mode_train(spec, config, log, err);
    if (spec.mode == "sweep") return mode_sweep(spec, config, log, err);
    if (spec.mode == "ablation") return mode_ablation(spec, config, log, err);
    return mode_dump(spec, config, log, err);
  } catch (const InvariantViolation& e) {
    err << "invariant violation: " << e.what() << '\n';
    return kInvariantViolation;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const FormatError& e) {
    err << "input error: " << e.what() << '\n';
    return kConfigError;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return kNumericError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kFailure;
  }
}

}  // namespace conec::cli
