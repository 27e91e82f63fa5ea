#include "conec/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <vector>

#include "conec/errors.hpp"

namespace conec {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::uint64_t to_u64(const std::string& s) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size())
    throw ConfigError("expected a non-negative integer, got '" + s + "'");
  return v;
}

double to_f64(const std::string& s) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::logic_error&) {
    used = 0;
  }
  if (used == 0 || used != s.size() || !std::isfinite(v))
    throw ConfigError("expected a finite number, got '" + s + "'");
  return v;
}

bool to_bool(const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw ConfigError("expected true or false, got '" + s + "'");
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

std::string fmt(std::uint64_t v) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

template <typename T, typename F>
std::string join(const std::vector<T>& items, F&& f) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ',';
    out += f(items[i]);
  }
  return out;
}

struct Entry {
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;  // empty string: omitted from the canonical text
};

struct Pending {
  std::vector<double> rotations, scales, drifts, noises;
  bool any_shift = false;
  std::string router_layers;
};

std::vector<std::pair<std::string, Entry>> entries(RunConfig& c, Pending& p) {
  auto& s = c.stream;
  auto& e = c.engine;
  auto& bb = e.backbone;
  std::vector<std::pair<std::string, Entry>> t;
  auto size_key = [&](const std::string& k, std::size_t& ref) {
    t.push_back({k, {[&ref](const std::string& v) { ref = to_u64(v); }, [&ref] { return fmt(std::uint64_t{ref}); }}});
  };
  auto u64_key = [&](const std::string& k, std::uint64_t& ref) {
    t.push_back({k, {[&ref](const std::string& v) { ref = to_u64(v); }, [&ref] { return fmt(ref); }}});
  };
  auto f64_key = [&](const std::string& k, double& ref) {
    t.push_back({k, {[&ref](const std::string& v) { ref = to_f64(v); }, [&ref] { return fmt(ref); }}});
  };
  auto bool_key = [&](const std::string& k, bool& ref) {
    t.push_back({k, {[&ref](const std::string& v) { ref = to_bool(v); }, [&ref] { return fmt(ref); }}});
  };
  auto shift_key = [&](const std::string& k, std::vector<double>& pending, double DomainShift::*field) {
    t.push_back({k,
                 {[&pending, &p](const std::string& v) {
                    pending.clear();
                    for (const auto& item : split_list(v)) pending.push_back(to_f64(item));
                    p.any_shift = true;
                  },
                  [&s, field] {
                    if (s.shifts.empty()) return std::string();
                    return join(s.shifts, [field](const DomainShift& d) { return fmt(d.*field); });
                  }}});
  };

  // stream
  size_key("num_domains", s.num_domains);
  size_key("num_classes", s.num_classes);
  size_key("raw_dim", s.raw_dim);
  size_key("train_per_class", s.train_per_class);
  size_key("test_per_class", s.test_per_class);
  f64_key("class_scale", s.class_scale);
  f64_key("class_noise", s.class_noise);
  shift_key("rotations", p.rotations, &DomainShift::rotation_deg);
  shift_key("scales", p.scales, &DomainShift::scale);
  shift_key("drifts", p.drifts, &DomainShift::drift);
  shift_key("noises", p.noises, &DomainShift::noise);
  bool_key("unseen_test_domains", s.unseen_test_domains);
  f64_key("unseen_rotation_deg", s.unseen_rotation_deg);
  f64_key("unseen_drift_factor", s.unseen_drift_factor);
  u64_key("stream_seed", s.seed);

  // backbone
  size_key("num_layers", bb.num_layers);
  size_key("embed_dim", bb.embed_dim);
  size_key("num_tokens", bb.num_tokens);
  size_key("num_heads", bb.num_heads);
  size_key("mlp_hidden", bb.mlp_hidden);
  f64_key("weight_std", bb.weight_std);
  u64_key("backbone_seed", bb.seed);

  // adapters and heads
  t.push_back({"adapter_mode",
               {[&e](const std::string& v) { e.adapter_mode = parse_adapter_mode(v); },
                [&e] { return to_string(e.adapter_mode); }}});
  size_key("shared_blocks", e.shared_blocks);
  size_key("rank", e.rank);
  t.push_back({"targets",
               {[&e](const std::string& v) {
                  e.targets.clear();
                  for (const auto& item : split_list(v)) e.targets.push_back(parse_projection(item));
                },
                [&e] { return join(e.targets, [](Projection pr) { return to_string(pr); }); }}});
  bool_key("trainable_specific_b", e.trainable_specific_b);
  t.push_back({"head",
               {[&e](const std::string& v) { e.head = parse_head_kind(v); },
                [&e] { return to_string(e.head); }}});
  f64_key("eta", e.eta);
  f64_key("sigma_init", e.sigma_init);
  bool_key("clamp_sigma", e.clamp_sigma);
  bool_key("inference_noise", e.inference_noise);

  // classifier training
  f64_key("lambda_kd", e.lambda_kd);
  f64_key("tau", e.tau);
  bool_key("use_kd", e.use_kd);
  bool_key("redistribution", e.redistribution);
  f64_key("lr_lora", e.lr_lora);
  f64_key("lr_head", e.lr_head);
  f64_key("momentum", e.momentum);
  size_key("batch_size", e.batch_size);
  size_key("epochs", e.epochs);

  // router
  f64_key("threshold", e.threshold);
  f64_key("lambda_ball", e.lambda_ball);
  f64_key("margin", e.margin);
  bool_key("use_ball_loss", e.use_ball_loss);
  f64_key("lr_dc", e.lr_dc);
  f64_key("lr_tm", e.lr_tm);
  size_key("router_epochs", e.router_epochs);
  size_key("router_batch_size", e.router_batch_size);
  size_key("router_hidden", e.router_hidden);
  t.push_back({"router_layers",
               {[&p](const std::string& v) { p.router_layers = v; },
                [&e] {
                  return e.router_layers.empty()
                             ? std::string("all")
                             : join(e.router_layers, [](std::size_t l) { return std::to_string(l); });
                }}});
  size_key("gmm_components", e.gmm_components);
  size_key("gmm_max_iter", e.gmm_max_iter);
  size_key("synthetic_cap", e.synthetic_cap);
  size_key("max_domains", e.max_domains);

  // run
  u64_key("seed", e.seed);
  size_key("threads", e.threads);
  size_key("num_orders", c.num_orders);
  u64_key("order_seed", c.order_seed);
  return t;
}

void resolve_pending(RunConfig& c, const Pending& p) {
  if (p.any_shift) {
    auto shifts = default_shifts(c.stream.num_domains);
    auto apply = [&](const std::vector<double>& values, double DomainShift::*field, const char* key) {
      if (values.empty()) return;
      if (values.size() != shifts.size())
        throw ConfigError(std::string(key) + ": expected " + std::to_string(shifts.size()) +
                          " values (one per domain), got " + std::to_string(values.size()));
      for (std::size_t i = 0; i < values.size(); ++i) shifts[i].*field = values[i];
    };
    apply(p.rotations, &DomainShift::rotation_deg, "rotations");
    apply(p.scales, &DomainShift::scale, "scales");
    apply(p.drifts, &DomainShift::drift, "drifts");
    apply(p.noises, &DomainShift::noise, "noises");
    c.stream.shifts = std::move(shifts);
  }
  if (!p.router_layers.empty()) {
    c.engine.router_layers.clear();
    if (p.router_layers == "last") {
      c.engine.router_layers.push_back(c.engine.backbone.num_layers);
    } else if (p.router_layers != "all") {
      for (const auto& item : split_list(p.router_layers))
        c.engine.router_layers.push_back(to_u64(item));
    }
  }
}

}  // namespace

void RunConfig::finalize() {
  stream.validate();
  engine.num_classes = stream.num_classes;
  engine.backbone.input_dim = stream.raw_dim;
  if (engine.max_domains < stream.num_domains) engine.max_domains = stream.num_domains;
  if (num_orders == 0) throw ConfigError("num_orders must be >= 1");
  engine.validate();
}

RunConfig parse_config(const std::string& text) {
  RunConfig config;
  Pending pending;
  auto table = entries(config, pending);
  std::map<std::string, const Entry*> by_key;
  for (const auto& [k, e] : table) by_key[k] = &e;

  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    const auto it = by_key.find(key);
    if (it == by_key.end())
      throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    try {
      it->second->set(value);
    } catch (const ConfigError& err) {
      throw ConfigError("config line " + std::to_string(line_no) + " (" + key + "): " + err.what());
    }
  }
  resolve_pending(config, pending);
  config.finalize();
  return config;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const RunConfig& config) {
  RunConfig copy = config;
  Pending unused;
  std::ostringstream out;
  for (const auto& [key, entry] : entries(copy, unused)) {
    const std::string v = entry.get();
    if (v.empty()) continue;
    out << key << " = " << v << '\n';
  }
  return out.str();
}

}  // namespace conec
