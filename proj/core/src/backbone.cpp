#include "conec/backbone.hpp"

#include <cmath>
#include <fstream>
#include <numbers>

#include "conec/errors.hpp"
#include "conec/serialize.hpp"

namespace conec {

namespace {

constexpr double kLayerNormEps = 1e-6;
constexpr char kBackboneMagic[] = "CONEC-BB1";

Matrix layer_norm(const Matrix& x, const Vector& gain, const Vector& bias, Matrix* xhat,
                  Vector* rstd) {
  const std::size_t s = x.rows(), d = x.cols();
  Matrix y(s, d);
  if (xhat) *xhat = Matrix(s, d);
  if (rstd) rstd->assign(s, 0.0);
  for (std::size_t i = 0; i < s; ++i) {
    auto row = x.row(i);
    double mean = 0.0;
    for (double v : row) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (double v : row) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + kLayerNormEps);
    if (rstd) (*rstd)[i] = r;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * r;
      if (xhat) (*xhat)(i, j) = h;
      y(i, j) = h * gain[j] + bias[j];
    }
  }
  return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& xhat, const Vector& rstd,
                           const Vector& gain) {
  const std::size_t s = dy.rows(), d = dy.cols();
  Matrix dx(s, d);
  std::vector<double> dxhat(d);
  for (std::size_t i = 0; i < s; ++i) {
    double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dxhat[j] = dy(i, j) * gain[j];
      mean_dxhat += dxhat[j];
      mean_dxhat_xhat += dxhat[j] * xhat(i, j);
    }
    mean_dxhat /= static_cast<double>(d);
    mean_dxhat_xhat /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j)
      dx(i, j) = rstd[i] * (dxhat[j] - mean_dxhat - xhat(i, j) * mean_dxhat_xhat);
  }
  return dx;
}

// y = x W^T + b
Matrix linear(const Matrix& x, const Matrix& w, const Vector& b) {
  Matrix y = matmul_nt(x, w);
  for (std::size_t i = 0; i < y.rows(); ++i) add_inplace(y.row(i), b);
  return y;
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

double init_std(const BackboneConfig& cfg, std::size_t fan_in) {
  return cfg.weight_std > 0.0 ? cfg.weight_std : 1.0 / std::sqrt(static_cast<double>(fan_in));
}

Matrix& projection_of(Matrix& q, Matrix& k, Matrix& v, Projection p) {
  switch (p) {
    case Projection::Query: return q;
    case Projection::Key: return k;
    case Projection::Value: return v;
  }
  return q;
}

void check_adapter_shape(const LoraAdapter& l, std::size_t d) {
  if (l.in_dim() != d || l.out_dim() != d || l.a.cols() != l.rank()) {
    throw InvalidShape("adapter shape " + std::to_string(l.out_dim()) + "x" +
                       std::to_string(l.rank()) + "x" + std::to_string(l.in_dim()) +
                       " does not fit embed_dim " + std::to_string(d));
  }
}

}  // namespace

void BackboneConfig::validate() const {
  if (num_layers < 2) throw ConfigError("backbone: num_layers must be >= 2");
  if (num_tokens < 2) throw ConfigError("backbone: num_tokens must be >= 2");
  if (num_heads == 0 || embed_dim % num_heads != 0)
    throw ConfigError("backbone: embed_dim must be divisible by num_heads");
  if (mlp_hidden == 0 || input_dim == 0) throw ConfigError("backbone: zero-sized layer");
}

Vector LayerTrace::cls_at(std::size_t layer) const {
  if (layer >= z.size()) throw InvalidInput("cls_at: layer out of range");
  return z[layer].row_vector(0);
}

Backbone::Backbone(BackboneConfig config) : config_(config) {
  config_.validate();
  Rng rng(config_.seed);
  const std::size_t d = config_.embed_dim, h = config_.mlp_hidden;
  for (std::size_t t = 0; t + 1 < config_.num_tokens; ++t)
    patch_maps_.push_back(random_normal(d, config_.input_dim, rng, init_std(config_, config_.input_dim)));
  cls_.resize(d);
  const double cls_std = config_.weight_std > 0.0 ? config_.weight_std : 1.0;
  for (double& c : cls_) c = cls_std * rng.normal();

  blocks_.resize(config_.num_layers);
  for (auto& b : blocks_) {
    b.ln1_gain.assign(d, 1.0);
    b.ln1_bias.assign(d, 0.0);
    b.wq = random_normal(d, d, rng, init_std(config_, d));
    b.wk = random_normal(d, d, rng, init_std(config_, d));
    b.wv = random_normal(d, d, rng, init_std(config_, d));
    b.wo = random_normal(d, d, rng, init_std(config_, d));
    b.bq.assign(d, 0.0);
    b.bk.assign(d, 0.0);
    b.bv.assign(d, 0.0);
    b.bo.assign(d, 0.0);
    b.ln2_gain.assign(d, 1.0);
    b.ln2_bias.assign(d, 0.0);
    b.w1 = random_normal(h, d, rng, init_std(config_, d));
    b.b1.assign(h, 0.0);
    b.w2 = random_normal(d, h, rng, init_std(config_, h));
    b.b2.assign(d, 0.0);
  }
}

Matrix Backbone::tokenize(std::span<const double> x) const {
  if (x.size() != config_.input_dim) {
    throw InvalidInput("tokenize: expected input of length " + std::to_string(config_.input_dim) +
                       ", got " + std::to_string(x.size()));
  }
  Matrix tokens(config_.num_tokens, config_.embed_dim);
  for (std::size_t j = 0; j < config_.embed_dim; ++j) tokens(0, j) = cls_[j];
  for (std::size_t t = 0; t < patch_maps_.size(); ++t) {
    const Vector p = matvec(patch_maps_[t], x);
    for (std::size_t j = 0; j < config_.embed_dim; ++j) tokens(t + 1, j) = p[j];
  }
  return tokens;
}

Matrix Backbone::block_forward(std::size_t index, const Matrix& z, const BlockAdapters* adapters,
                               BlockCache* cache) const {
  const BlockWeights& w = blocks_[index];
  const std::size_t s = z.rows(), d = z.cols();
  const std::size_t heads = config_.num_heads, dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Matrix xhat1;
  Vector rstd1;
  Matrix u = layer_norm(z, w.ln1_gain, w.ln1_bias, &xhat1, &rstd1);
  Matrix q = linear(u, w.wq, w.bq);
  Matrix k = linear(u, w.wk, w.bk);
  Matrix v = linear(u, w.wv, w.bv);

  std::vector<Matrix> lora_ub;
  if (adapters) {
    for (const auto& l : adapters->loras) {
      check_adapter_shape(l, d);
      Matrix ub = matmul_nt(u, l.b);
      add_inplace(projection_of(q, k, v, l.target), matmul_nt(ub, l.a));
      lora_ub.push_back(std::move(ub));
    }
  }

  Matrix attn(s, d);
  std::vector<Matrix> probs(heads, Matrix(s, s));
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    Matrix& p = probs[h];
    for (std::size_t i = 0; i < s; ++i) {
      double mx = -INFINITY;
      for (std::size_t j = 0; j < s; ++j) {
        double acc = 0.0;
        for (std::size_t c = c0; c < c0 + dh; ++c) acc += q(i, c) * k(j, c);
        p(i, j) = acc * scale;
        mx = std::max(mx, p(i, j));
      }
      double sum = 0.0;
      for (std::size_t j = 0; j < s; ++j) {
        p(i, j) = std::exp(p(i, j) - mx);
        sum += p(i, j);
      }
      for (std::size_t j = 0; j < s; ++j) p(i, j) /= sum;
      for (std::size_t j = 0; j < s; ++j) {
        const double pij = p(i, j);
        for (std::size_t c = c0; c < c0 + dh; ++c) attn(i, c) += pij * v(j, c);
      }
    }
  }

  Matrix h1 = linear(attn, w.wo, w.bo);
  add_inplace(h1, z);

  Matrix xhat2;
  Vector rstd2;
  const Matrix ln2 = layer_norm(h1, w.ln2_gain, w.ln2_bias, &xhat2, &rstd2);
  Matrix pre = linear(ln2, w.w1, w.b1);
  Matrix act = pre;
  for (double& a : act.values()) a = gelu(a);
  Matrix out = linear(act, w.w2, w.b2);
  add_inplace(out, h1);

  if (cache) {
    cache->xhat1 = std::move(xhat1);
    cache->rstd1 = std::move(rstd1);
    cache->u = std::move(u);
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->probs = std::move(probs);
    cache->attn = std::move(attn);
    cache->xhat2 = std::move(xhat2);
    cache->rstd2 = std::move(rstd2);
    cache->pre = std::move(pre);
    cache->lora_ub = std::move(lora_ub);
  }
  return out;
}

Matrix Backbone::block_backward(std::size_t index, const BlockCache& cache, const Matrix& dout,
                                const BlockAdapters* adapters, BlockAdapterGrads* grads) const {
  const BlockWeights& w = blocks_[index];
  const std::size_t s = dout.rows(), d = dout.cols();
  const std::size_t heads = config_.num_heads, dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // MLP branch.
  Matrix dpre = matmul(dout, w.w2);
  for (std::size_t i = 0; i < dpre.size(); ++i) dpre.data()[i] *= gelu_grad(cache.pre.data()[i]);
  const Matrix dln2 = matmul(dpre, w.w1);
  Matrix dh1 = dout;
  add_inplace(dh1, layer_norm_backward(dln2, cache.xhat2, cache.rstd2, w.ln2_gain));

  // Attention branch.
  const Matrix dattn = matmul(dh1, w.wo);
  Matrix dq(s, d), dk(s, d), dv(s, d);
  std::vector<double> dp(s);
  for (std::size_t h = 0; h < heads; ++h) {
    const std::size_t c0 = h * dh;
    const Matrix& p = cache.probs[h];
    for (std::size_t i = 0; i < s; ++i) {
      double row_dot = 0.0;
      for (std::size_t j = 0; j < s; ++j) {
        double acc = 0.0;
        for (std::size_t c = c0; c < c0 + dh; ++c) {
          acc += dattn(i, c) * cache.v(j, c);
          dv(j, c) += p(i, j) * dattn(i, c);
        }
        dp[j] = acc;
        row_dot += p(i, j) * acc;
      }
      for (std::size_t j = 0; j < s; ++j) {
        const double ds = p(i, j) * (dp[j] - row_dot) * scale;
        if (ds == 0.0) continue;
        for (std::size_t c = c0; c < c0 + dh; ++c) {
          dq(i, c) += ds * cache.k(j, c);
          dk(j, c) += ds * cache.q(i, c);
        }
      }
    }
  }

  Matrix du = matmul(dq, w.wq);
  add_inplace(du, matmul(dk, w.wk));
  add_inplace(du, matmul(dv, w.wv));

  if (adapters) {
    for (std::size_t n = 0; n < adapters->loras.size(); ++n) {
      const LoraAdapter& l = adapters->loras[n];
      const Matrix& dproj = projection_of(dq, dk, dv, l.target);
      const Matrix g = matmul(dproj, l.a);  // s x r
      add_inplace(du, matmul(g, l.b));
      if (grads) {
        LoraGrad& lg = grads->loras.at(n);
        add_inplace(lg.a, matmul_tn(dproj, cache.lora_ub[n]));
        if (l.b_trainable) add_inplace(lg.b, matmul_tn(g, cache.u));
      }
    }
  }

  Matrix dz = std::move(dh1);
  add_inplace(dz, layer_norm_backward(du, cache.xhat1, cache.rstd1, w.ln1_gain));
  return dz;
}

ForwardTape Backbone::forward(std::span<const double> x, const AdapterStack& stack,
                              std::size_t num_blocks, bool keep_cache) const {
  if (num_blocks == 0) num_blocks = config_.num_layers;
  if (num_blocks > config_.num_layers) throw InvalidInput("forward: too many blocks requested");
  if (stack.size() > config_.num_layers) throw InvalidShape("forward: adapter stack longer than L");
  ForwardTape tape;
  tape.trace.z.reserve(num_blocks + 1);
  tape.trace.z.push_back(tokenize(x));
  if (keep_cache) tape.caches.resize(num_blocks);
  for (std::size_t i = 0; i < num_blocks; ++i) {
    const BlockAdapters* adapters = i < stack.size() ? stack[i] : nullptr;
    tape.trace.z.push_back(
        block_forward(i, tape.trace.z.back(), adapters, keep_cache ? &tape.caches[i] : nullptr));
  }
  return tape;
}

Matrix Backbone::backward(const ForwardTape& tape, const AdapterStack& stack, std::size_t top,
                          Matrix d_top, const std::vector<BlockAdapterGrads*>& grads) const {
  if (top > tape.caches.size()) throw InvalidInput("backward: tape has no cache for that block");
  Matrix d = std::move(d_top);
  for (std::size_t i = top; i-- > 0;) {
    const BlockAdapters* adapters = i < stack.size() ? stack[i] : nullptr;
    BlockAdapterGrads* g = i < grads.size() ? grads[i] : nullptr;
    d = block_backward(i, tape.caches[i], d, adapters, g);
  }
  return d;
}

LayerTrace Backbone::forward_plain(std::span<const double> x) const {
  return forward(x, {}, 0, false).trace;
}

LayerTrace Backbone::forward_with_adapters(std::span<const double> x,
                                           std::span<const BlockAdapters> shared,
                                           std::span<const BlockAdapters> specific) const {
  if (shared.size() + specific.size() != config_.num_layers) {
    throw InvalidShape("forward_with_adapters: " + std::to_string(shared.size()) + " shared + " +
                       std::to_string(specific.size()) + " specific blocks != L = " +
                       std::to_string(config_.num_layers));
  }
  AdapterStack stack;
  for (const auto& b : shared) stack.push_back(&b);
  for (const auto& b : specific) stack.push_back(&b);
  return forward(x, stack, 0, false).trace;
}

// --- serialization ---------------------------------------------------------

void Backbone::write(BinaryWriter& out) const {
  out.magic(kBackboneMagic);
  out.u64(config_.num_layers);
  out.u64(config_.embed_dim);
  out.u64(config_.num_tokens);
  out.u64(config_.num_heads);
  out.u64(config_.mlp_hidden);
  out.u64(config_.input_dim);
  out.u64(config_.seed);
  out.f64(config_.weight_std);
  for (const auto& m : patch_maps_) out.matrix(m);
  out.vector(cls_);
  for (const auto& b : blocks_) {
    out.vector(b.ln1_gain);
    out.vector(b.ln1_bias);
    out.matrix(b.wq);
    out.matrix(b.wk);
    out.matrix(b.wv);
    out.matrix(b.wo);
    out.vector(b.bq);
    out.vector(b.bk);
    out.vector(b.bv);
    out.vector(b.bo);
    out.vector(b.ln2_gain);
    out.vector(b.ln2_bias);
    out.matrix(b.w1);
    out.vector(b.b1);
    out.matrix(b.w2);
    out.vector(b.b2);
  }
}

Backbone Backbone::read(BinaryReader& in) {
  in.expect_magic(kBackboneMagic);
  Backbone bb;
  auto& c = bb.config_;
  c.num_layers = in.u64();
  c.embed_dim = in.u64();
  c.num_tokens = in.u64();
  c.num_heads = in.u64();
  c.mlp_hidden = in.u64();
  c.input_dim = in.u64();
  c.seed = in.u64();
  c.weight_std = in.f64();
  c.validate();
  for (std::size_t t = 0; t + 1 < c.num_tokens; ++t) bb.patch_maps_.push_back(in.matrix());
  bb.cls_ = in.vector();
  bb.blocks_.resize(c.num_layers);
  for (auto& b : bb.blocks_) {
    b.ln1_gain = in.vector();
    b.ln1_bias = in.vector();
    b.wq = in.matrix();
    b.wk = in.matrix();
    b.wv = in.matrix();
    b.wo = in.matrix();
    b.bq = in.vector();
    b.bk = in.vector();
    b.bv = in.vector();
    b.bo = in.vector();
    b.ln2_gain = in.vector();
    b.ln2_bias = in.vector();
    b.w1 = in.matrix();
    b.b1 = in.vector();
    b.w2 = in.matrix();
    b.b2 = in.vector();
  }
  const std::size_t d = c.embed_dim;
  for (const auto& b : bb.blocks_) {
    if (b.wq.rows() != d || b.wq.cols() != d || b.w1.rows() != c.mlp_hidden ||
        b.w2.cols() != c.mlp_hidden || b.ln1_gain.size() != d)
      throw FormatError("backbone checkpoint: parameter shape mismatch");
  }
  return bb;
}

void Backbone::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  BinaryWriter w(out);
  write(w);
  if (!out) throw FormatError("write failed: " + path.string());
}

Backbone Backbone::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  BinaryReader r(in);
  return read(r);
}

}  // namespace conec
