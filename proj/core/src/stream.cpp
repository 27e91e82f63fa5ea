#include "conec/stream.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>

#include "conec/errors.hpp"

namespace conec {

namespace {

std::size_t rotated_dims(const StreamConfig& c) {
  std::size_t n = c.num_classes + (c.num_classes % 2);
  return std::min(n, c.raw_dim - (c.raw_dim % 2));
}

std::size_t drift_axis(const StreamConfig& c, std::size_t index) {
  const std::size_t free = c.raw_dim - c.num_classes;
  return c.num_classes + index % free;
}

DomainShift unseen_variant(const StreamConfig& c, DomainShift s) {
  s.rotation_deg += c.unseen_rotation_deg;
  s.drift *= c.unseen_drift_factor;
  return s;
}

void draw_split(const StreamConfig& c, std::size_t index, const DomainShift& shift,
                std::size_t per_class, Rng& rng, Matrix& xs, std::vector<std::size_t>& ys) {
  const std::size_t n = per_class * c.num_classes;
  xs = Matrix(n, c.raw_dim);
  ys.resize(n);
  Vector clean(c.raw_dim);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % c.num_classes;
    for (std::size_t j = 0; j < c.raw_dim; ++j) clean[j] = c.class_noise * rng.normal();
    clean[label] += c.class_scale;
    const Vector x = apply_shift(c, index, shift, clean);
    std::copy(x.begin(), x.end(), xs.row(i).begin());
    ys[i] = label;
  }
  if (shift.noise > 0.0)
    for (double& v : xs.values()) v += shift.noise * rng.normal();
}

std::uint64_t factorial_capped(std::size_t n, std::uint64_t cap) {
  std::uint64_t f = 1;
  for (std::size_t i = 2; i <= n; ++i) {
    if (f > cap / i) return cap + 1;
    f *= i;
  }
  return f;
}

}  // namespace

std::vector<DomainShift> default_shifts(std::size_t num_domains) {
  static const double angles[] = {0.0, 30.0, -30.0, 60.0, -60.0};
  std::vector<DomainShift> out(num_domains);
  for (std::size_t b = 0; b < num_domains; ++b) {
    out[b].rotation_deg = angles[b % 5];
    out[b].drift = 5.0;
  }
  return out;
}

void StreamConfig::validate() const {
  if (num_domains == 0) throw ConfigError("stream: num_domains must be >= 1");
  if (num_classes < 2) throw ConfigError("stream: num_classes must be >= 2");
  if (raw_dim <= num_classes) throw ConfigError("stream: raw_dim must exceed num_classes");
  if (train_per_class == 0 || test_per_class == 0)
    throw ConfigError("stream: samples per class must be >= 1");
  if (!(class_scale > 0.0) || !std::isfinite(class_scale))
    throw ConfigError("stream: class_scale must be positive");
  if (!(class_noise >= 0.0) || !std::isfinite(class_noise))
    throw ConfigError("stream: class_noise must be >= 0");
  if (!shifts.empty() && shifts.size() != num_domains)
    throw ConfigError("stream: expected " + std::to_string(num_domains) + " shifts, got " +
                      std::to_string(shifts.size()));
  for (const auto& s : shifts) {
    if (!std::isfinite(s.rotation_deg) || !std::isfinite(s.drift))
      throw ConfigError("stream: non-finite shift");
    if (!(s.scale > 0.0) || !std::isfinite(s.scale)) throw ConfigError("stream: shift scale must be positive");
    if (!(s.noise >= 0.0) || !std::isfinite(s.noise)) throw ConfigError("stream: shift noise must be >= 0");
  }
}

std::vector<DomainShift> StreamConfig::resolved_shifts() const {
  return shifts.empty() ? default_shifts(num_domains) : shifts;
}

Vector apply_shift(const StreamConfig& c, std::size_t index, const DomainShift& shift,
                   std::span<const double> x) {
  if (x.size() != c.raw_dim) throw InvalidShape("apply_shift: sample has wrong dimension");
  Vector out(x.begin(), x.end());
  const double theta = shift.rotation_deg * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  for (std::size_t i = 0; i + 1 < rotated_dims(c); i += 2) {
    const double a = out[i], b = out[i + 1];
    out[i] = cs * a - sn * b;
    out[i + 1] = sn * a + cs * b;
  }
  for (double& v : out) v *= shift.scale;
  out[drift_axis(c, index)] += shift.drift;
  return out;
}

std::vector<DomainData> generate(const StreamConfig& config) {
  config.validate();
  const auto shifts = config.resolved_shifts();
  const Rng root(config.seed);
  std::vector<DomainData> out(config.num_domains);
  for (std::size_t b = 0; b < config.num_domains; ++b) {
    DomainData& d = out[b];
    d.id = b + 1;
    Rng train_rng = root.fork(2 * b);
    Rng test_rng = root.fork(2 * b + 1);
    draw_split(config, b, shifts[b], config.train_per_class, train_rng, d.train_x, d.train_y);
    const DomainShift test_shift =
        config.unseen_test_domains ? unseen_variant(config, shifts[b]) : shifts[b];
    draw_split(config, b, test_shift, config.test_per_class, test_rng, d.test_x, d.test_y);
  }
  return out;
}

std::vector<std::vector<std::size_t>> domain_orders(std::size_t num_domains, std::size_t num_orders,
                                                    std::uint64_t seed) {
  if (num_domains == 0) throw InvalidInput("domain_orders: need at least one domain");
  if (num_orders == 0) throw InvalidInput("domain_orders: num_orders must be >= 1");
  if (factorial_capped(num_domains, num_orders) < num_orders)
    throw InvalidInput("domain_orders: " + std::to_string(num_orders) + " orders requested but only " +
                       std::to_string(factorial_capped(num_domains, num_orders)) +
                       " permutations exist");
  std::vector<std::size_t> base(num_domains);
  for (std::size_t i = 0; i < num_domains; ++i) base[i] = i + 1;
  std::vector<std::vector<std::size_t>> orders{base};
  std::set<std::vector<std::size_t>> seen{base};
  Rng rng(seed);
  while (orders.size() < num_orders) {
    auto p = base;
    rng.shuffle(p);
    if (seen.insert(p).second) orders.push_back(std::move(p));
  }
  return orders;
}

void export_csv(const std::filesystem::path& path, const std::vector<DomainData>& domains,
                Split split) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  const std::size_t dim = domains.empty() ? 0 : domains.front().train_x.cols();
  for (std::size_t j = 0; j < dim; ++j) out << "x_" << j << ',';
  out << "label,domain\n" << std::setprecision(17);
  for (const auto& d : domains) {
    const Matrix& xs = split == Split::Train ? d.train_x : d.test_x;
    const auto& ys = split == Split::Train ? d.train_y : d.test_y;
    for (std::size_t i = 0; i < xs.rows(); ++i) {
      for (double v : xs.row(i)) out << v << ',';
      out << ys[i] << ',' << d.id << '\n';
    }
  }
  if (!out) throw FormatError("write failed for " + path.string());
}

std::vector<DomainData> import_csv(const std::filesystem::path& path, Split split) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path.string() + ": missing header");
  const std::size_t columns = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  if (columns < 3) throw FormatError(path.string() + ": header needs features, label and domain");
  const std::size_t dim = columns - 2;

  std::vector<std::size_t> order;
  std::map<std::size_t, std::pair<std::vector<double>, std::vector<std::size_t>>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != columns)
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": expected " +
                        std::to_string(columns) + " fields");
    try {
      const std::size_t id = std::stoul(cells[dim + 1]);
      auto [it, inserted] = rows.try_emplace(id);
      if (inserted) order.push_back(id);
      for (std::size_t j = 0; j < dim; ++j) it->second.first.push_back(std::stod(cells[j]));
      it->second.second.push_back(std::stoul(cells[dim]));
    } catch (const std::logic_error&) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) + ": malformed number");
    }
  }
  std::vector<DomainData> out;
  for (std::size_t id : order) {
    auto& [values, labels] = rows[id];
    DomainData d;
    d.id = id;
    Matrix xs(labels.size(), dim, std::move(values));
    if (split == Split::Train) {
      d.train_x = std::move(xs);
      d.train_y = std::move(labels);
    } else {
      d.test_x = std::move(xs);
      d.test_y = std::move(labels);
    }
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace conec
