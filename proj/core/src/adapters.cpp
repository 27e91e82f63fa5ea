#include "conec/adapters.hpp"

#include <cmath>

#include "conec/errors.hpp"
#include "conec/serialize.hpp"

namespace conec {

std::string to_string(Projection p) {
  switch (p) {
    case Projection::Query: return "q";
    case Projection::Key: return "k";
    case Projection::Value: return "v";
  }
  return "?";
}

Projection parse_projection(const std::string& name) {
  if (name == "q" || name == "query") return Projection::Query;
  if (name == "k" || name == "key") return Projection::Key;
  if (name == "v" || name == "value") return Projection::Value;
  throw ConfigError("unknown projection '" + name + "' (expected q, k or v)");
}

const LoraAdapter* BlockAdapters::find(Projection p) const noexcept {
  for (const auto& l : loras)
    if (l.target == p) return &l;
  return nullptr;
}

BlockAdapterGrads BlockAdapterGrads::zeros_like(const BlockAdapters& adapters) {
  BlockAdapterGrads g;
  g.loras.reserve(adapters.loras.size());
  for (const auto& l : adapters.loras) {
    LoraGrad lg;
    lg.a = Matrix(l.a.rows(), l.a.cols());
    if (l.b_trainable) lg.b = Matrix(l.b.rows(), l.b.cols());
    g.loras.push_back(std::move(lg));
  }
  return g;
}

void BlockAdapterGrads::scale(double s) {
  for (auto& l : loras) {
    for (double& v : l.a.values()) v *= s;
    for (double& v : l.b.values()) v *= s;
  }
}

namespace {

LoraAdapter make_adapter(std::size_t rank, std::size_t in_dim, std::size_t out_dim,
                         Projection target, bool b_trainable, Rng& rng) {
  if (rank == 0 || rank > std::min(in_dim, out_dim)) {
    throw InvalidShape("LoRA rank " + std::to_string(rank) + " exceeds min(d, k) = " +
                       std::to_string(std::min(in_dim, out_dim)));
  }
  LoraAdapter adapter;
  adapter.a = Matrix(out_dim, rank);
  adapter.b = random_orthogonal_rows(rank, in_dim, rng);
  adapter.target = target;
  adapter.b_trainable = b_trainable;
  return adapter;
}

}  // namespace

LoraAdapter new_shared(std::size_t rank, std::size_t in_dim, std::size_t out_dim,
                       Projection target, Rng& rng) {
  return make_adapter(rank, in_dim, out_dim, target, false, rng);
}

LoraAdapter new_specific(std::size_t rank, std::size_t in_dim, std::size_t out_dim,
                         Projection target, bool b_trainable, Rng& rng) {
  return make_adapter(rank, in_dim, out_dim, target, b_trainable, rng);
}

Matrix delta(const LoraAdapter& adapter, const Matrix& z) {
  if (z.cols() != adapter.in_dim() || adapter.a.cols() != adapter.rank()) {
    throw InvalidShape("delta: token width " + std::to_string(z.cols()) +
                       " does not match adapter input " + std::to_string(adapter.in_dim()));
  }
  return matmul_nt(matmul_nt(z, adapter.b), adapter.a);
}

Vector row_norms(const Matrix& a) {
  Vector n(a.rows());
  for (std::size_t j = 0; j < a.rows(); ++j) n[j] = norm2(a.row(j));
  return n;
}

Vector redistribution_mask(const Vector& prev_norms) {
  const double d = static_cast<double>(prev_norms.size());
  double sum = 0.0;
  for (double w : prev_norms) {
    if (!(w >= 0.0)) throw InvalidInput("redistribution_mask: norms must be >= 0");
    sum += w;
  }
  if (sum == 0.0) return Vector(prev_norms.size(), 1.0);
  Vector mask(prev_norms.size());
  for (std::size_t j = 0; j < prev_norms.size(); ++j) mask[j] = d * prev_norms[j] / sum;
  return mask;
}

Matrix apply_redistribution(const Matrix& grad_a, const Vector& mask) {
  if (grad_a.rows() != mask.size()) {
    throw InvalidShape("apply_redistribution: gradient has " + std::to_string(grad_a.rows()) +
                       " rows, mask has " + std::to_string(mask.size()));
  }
  Matrix out = grad_a;
  for (std::size_t j = 0; j < out.rows(); ++j)
    for (double& v : out.row(j)) v *= mask[j];
  return out;
}

void AdapterBankConfig::validate() const {
  if (num_layers < 1) throw ConfigError("adapter bank: num_layers must be >= 1");
  if (shared_blocks >= num_layers)
    throw ConfigError("adapter bank: shared block count l must be < L");
  if (targets.empty()) throw ConfigError("adapter bank: no LoRA target projections");
  if (rank == 0 || rank > dim) throw ConfigError("adapter bank: rank must be in [1, d]");
}

AdapterBank::AdapterBank(AdapterBankConfig config, Rng& rng) : config_(std::move(config)) {
  config_.validate();
  shared_.resize(config_.shared_blocks);
  for (auto& block : shared_)
    for (Projection p : config_.targets)
      block.loras.push_back(new_shared(config_.rank, config_.dim, config_.dim, p, rng));
}

void AdapterBank::add_domain(std::size_t domain, Rng& rng) {
  if (has_domain(domain))
    throw ConfigError("adapter bank: domain " + std::to_string(domain) + " already has adapters");
  std::vector<BlockAdapters> blocks(config_.num_layers - config_.shared_blocks);
  for (auto& block : blocks)
    for (Projection p : config_.targets)
      block.loras.push_back(new_specific(config_.rank, config_.dim, config_.dim, p,
                                         config_.trainable_specific_b, rng));
  specific_.emplace(domain, std::move(blocks));
}

std::vector<BlockAdapters>& AdapterBank::specific(std::size_t domain) {
  auto it = specific_.find(domain);
  if (it == specific_.end())
    throw ConfigError("adapter bank: no adapters for domain " + std::to_string(domain));
  return it->second;
}

const std::vector<BlockAdapters>& AdapterBank::specific(std::size_t domain) const {
  auto it = specific_.find(domain);
  if (it == specific_.end())
    throw ConfigError("adapter bank: no adapters for domain " + std::to_string(domain));
  return it->second;
}

AdapterStack stack_of(const std::vector<BlockAdapters>& shared,
                      const std::vector<BlockAdapters>& specific) {
  AdapterStack stack;
  stack.reserve(shared.size() + specific.size());
  for (const auto& b : shared) stack.push_back(&b);
  for (const auto& b : specific) stack.push_back(&b);
  return stack;
}

AdapterStack AdapterBank::stack_for(std::size_t domain) const {
  return stack_of(shared_, specific(domain));
}

AdapterStack AdapterBank::shared_stack() const {
  AdapterStack stack(config_.num_layers, nullptr);
  for (std::size_t i = 0; i < shared_.size(); ++i) stack[i] = &shared_[i];
  return stack;
}

SharedSnapshot AdapterBank::snapshot() const {
  SharedSnapshot snap;
  snap.adapters = shared_;
  snap.norms.resize(shared_.size());
  for (std::size_t i = 0; i < shared_.size(); ++i)
    for (const auto& l : shared_[i].loras) snap.norms[i].push_back(row_norms(l.a));
  return snap;
}

namespace {

void write_block(BinaryWriter& out, const BlockAdapters& block) {
  out.u64(block.loras.size());
  for (const auto& l : block.loras) {
    out.u64(static_cast<std::uint64_t>(l.target));
    out.boolean(l.b_trainable);
    out.matrix(l.a);
    out.matrix(l.b);
  }
}

BlockAdapters read_block(BinaryReader& in) {
  BlockAdapters block;
  const std::uint64_t n = in.u64();
  for (std::uint64_t i = 0; i < n; ++i) {
    LoraAdapter l;
    const std::uint64_t t = in.u64();
    if (t > 2) throw FormatError("adapter: bad projection id");
    l.target = static_cast<Projection>(t);
    l.b_trainable = in.boolean();
    l.a = in.matrix();
    l.b = in.matrix();
    block.loras.push_back(std::move(l));
  }
  return block;
}

}  // namespace

void AdapterBank::write(BinaryWriter& out) const {
  out.u64(config_.num_layers);
  out.u64(config_.shared_blocks);
  out.u64(config_.rank);
  out.u64(config_.dim);
  out.boolean(config_.trainable_specific_b);
  out.u64(config_.targets.size());
  for (Projection p : config_.targets) out.u64(static_cast<std::uint64_t>(p));
  out.u64(shared_.size());
  for (const auto& b : shared_) write_block(out, b);
  out.u64(specific_.size());
  for (const auto& [domain, blocks] : specific_) {
    out.u64(domain);
    out.u64(blocks.size());
    for (const auto& b : blocks) write_block(out, b);
  }
}

AdapterBank AdapterBank::read(BinaryReader& in) {
  AdapterBank bank;
  bank.config_.num_layers = in.u64();
  bank.config_.shared_blocks = in.u64();
  bank.config_.rank = in.u64();
  bank.config_.dim = in.u64();
  bank.config_.trainable_specific_b = in.boolean();
  bank.config_.targets.clear();
  const std::uint64_t nt = in.u64();
  for (std::uint64_t i = 0; i < nt; ++i) {
    const std::uint64_t t = in.u64();
    if (t > 2) throw FormatError("adapter bank: bad projection id");
    bank.config_.targets.push_back(static_cast<Projection>(t));
  }
  const std::uint64_t ns = in.u64();
  for (std::uint64_t i = 0; i < ns; ++i) bank.shared_.push_back(read_block(in));
  const std::uint64_t nd = in.u64();
  for (std::uint64_t i = 0; i < nd; ++i) {
    const std::uint64_t domain = in.u64();
    const std::uint64_t nb = in.u64();
    std::vector<BlockAdapters> blocks;
    for (std::uint64_t j = 0; j < nb; ++j) blocks.push_back(read_block(in));
    bank.specific_.emplace(domain, std::move(blocks));
  }
  return bank;
}

}  // namespace conec
