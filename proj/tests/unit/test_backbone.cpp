#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "conec/backbone.hpp"
#include "conec/errors.hpp"
#include "support.hpp"

using namespace conec;
using conec::testing::grad_mismatch;

namespace {

BackboneConfig tiny() {
  BackboneConfig c;
  c.num_layers = 3;
  c.embed_dim = 8;
  c.num_tokens = 3;
  c.num_heads = 2;
  c.mlp_hidden = 12;
  c.input_dim = 5;
  c.seed = 99;
  return c;
}

AdapterBankConfig bank_config(const BackboneConfig& b, std::size_t shared, bool trainable_b) {
  AdapterBankConfig c;
  c.num_layers = b.num_layers;
  c.shared_blocks = shared;
  c.rank = 3;
  c.dim = b.embed_dim;
  c.trainable_specific_b = trainable_b;
  return c;
}

void randomize_a(std::vector<BlockAdapters>& blocks, Rng& rng, double scale) {
  for (auto& b : blocks)
    for (auto& l : b.loras) l.a = random_normal(l.a.rows(), l.a.cols(), rng, scale);
}

// Scalar probe of the top layer: sum_ij W_ij z_ij.
double probe(const Matrix& w, const Matrix& z) { return dot(w.values(), z.values()); }

}  // namespace

TEST_CASE("tokenize") {
  const Backbone bb(tiny());
  const Vector zero(5, 0.0);
  const Matrix t0 = bb.tokenize(zero);
  for (std::size_t j = 0; j < 8; ++j) CHECK(t0(0, j) == bb.cls_token()[j]);
  for (std::size_t r = 1; r < 3; ++r)
    for (std::size_t j = 0; j < 8; ++j) CHECK(t0(r, j) == 0.0);

  Rng rng(1);
  const Vector x = testing::random_vector(5, rng);
  Vector x2 = x;
  for (double& v : x2) v *= 2.0;
  const Matrix a = bb.tokenize(x), b = bb.tokenize(x), c = bb.tokenize(x2);
  CHECK(a == b);
  for (std::size_t r = 1; r < 3; ++r)
    for (std::size_t j = 0; j < 8; ++j) CHECK(c(r, j) == 2.0 * a(r, j));
  for (std::size_t j = 0; j < 8; ++j) CHECK(c(0, j) == a(0, j));

  CHECK_THROWS_AS(bb.tokenize(Vector(4, 1.0)), InvalidInput);
}

TEST_CASE("plain forward") {
  const Backbone bb(tiny());
  Rng rng(2);
  const Vector x = testing::random_vector(5, rng);
  const LayerTrace t1 = bb.forward_plain(x), t2 = bb.forward_plain(x);
  CHECK(t1 == t2);
  CHECK(t1.z.size() == 4);
  CHECK(t1.num_layers() == 3);
  CHECK(t1.z[0] == bb.tokenize(x));
  for (std::size_t l = 0; l <= 3; ++l) {
    CHECK(t1.z[l].rows() == 3);
    CHECK(t1.z[l].cols() == 8);
    CHECK(t1.cls_at(l) == t1.z[l].row_vector(0));
    CHECK(t1.z[l].all_finite());
  }

  BackboneConfig other = tiny();
  other.seed = 100;
  const Backbone bb2(other);
  CHECK(max_abs_diff(bb2.forward_plain(x).z.back(), t1.z.back()) > 1e-3);
}

TEST_CASE("backbone configuration checks") {
  BackboneConfig c = tiny();
  c.num_layers = 1;
  CHECK_THROWS_AS(Backbone{c}, ConfigError);
  c = tiny();
  c.num_heads = 3;
  CHECK_THROWS_AS(Backbone{c}, ConfigError);
  c = tiny();
  c.num_tokens = 1;
  CHECK_THROWS_AS(Backbone{c}, ConfigError);
}

TEST_CASE("zero adapters leave the trace bitwise unchanged") {
  const Backbone bb(tiny());
  Rng rng(3);
  for (Projection p : {Projection::Query, Projection::Key, Projection::Value}) {
    auto cfg = bank_config(tiny(), 1, false);
    cfg.targets = {p};
    AdapterBank bank(cfg, rng);
    bank.add_domain(0, rng);
    for (int i = 0; i < 5; ++i) {
      const Vector x = testing::random_vector(5, rng, 3.0);
      const LayerTrace plain = bb.forward_plain(x);
      CHECK(bb.forward_with_adapters(x, bank.shared(), bank.specific(0)) == plain);
      CHECK(bb.forward(x, bank.stack_for(0)).trace == plain);
    }
  }
}

TEST_CASE("nonzero adapters change the output") {
  const Backbone bb(tiny());
  Rng rng(4);
  AdapterBank bank(bank_config(tiny(), 2, false), rng);
  bank.add_domain(0, rng);
  randomize_a(bank.shared(), rng, 0.5);
  const Vector x = testing::random_vector(5, rng);
  const LayerTrace with = bb.forward_with_adapters(x, bank.shared(), bank.specific(0));
  CHECK(max_abs_diff(with.z.back(), bb.forward_plain(x).z.back()) > 1e-6);
  CHECK(with.z[0] == bb.tokenize(x));
}

TEST_CASE("truncated forward matches the full stack up to the cut") {
  const Backbone bb(tiny());
  Rng rng(5);
  AdapterBank bank(bank_config(tiny(), 2, false), rng);
  bank.add_domain(0, rng);
  randomize_a(bank.shared(), rng, 0.5);
  randomize_a(bank.specific(0), rng, 0.5);
  const Vector x = testing::random_vector(5, rng);
  const LayerTrace full = bb.forward(x, bank.stack_for(0)).trace;
  const LayerTrace cut = bb.forward(x, bank.shared_stack(), 2).trace;
  REQUIRE(cut.z.size() == 3);
  for (std::size_t l = 0; l <= 2; ++l) CHECK(cut.z[l] == full.z[l]);
  CHECK(cut.cls_at(2) == full.cls_at(2));
}

TEST_CASE("adapter shape mismatch is rejected") {
  const Backbone bb(tiny());
  Rng rng(6);
  BlockAdapters bad;
  bad.loras.push_back(new_shared(2, 6, 6, Projection::Query, rng));
  AdapterStack stack{&bad};
  CHECK_THROWS_AS(bb.forward(Vector(5, 1.0), stack), InvalidShape);
  std::vector<BlockAdapters> two(2);
  CHECK_THROWS_AS(bb.forward_with_adapters(Vector(5, 1.0), two, {}), InvalidShape);
}

TEST_CASE("backward matches finite differences for adapters and inputs") {
  Rng rng(7);
  for (int trial = 0; trial < 4; ++trial) {
    BackboneConfig cfg = tiny();
    cfg.seed = 1000 + trial;
    const Backbone bb(cfg);
    auto bcfg = bank_config(cfg, 1, /*trainable_b=*/true);
    if (trial % 2) bcfg.targets = {Projection::Query, Projection::Key, Projection::Value};
    AdapterBank bank(bcfg, rng);
    bank.add_domain(0, rng);
    randomize_a(bank.shared(), rng, 0.4);
    randomize_a(bank.specific(0), rng, 0.4);
    const Vector x = testing::random_vector(5, rng, 1.5);
    const std::size_t top = 3 - static_cast<std::size_t>(trial % 2);
    const Matrix w = random_normal(3, 8, rng);

    auto loss_at = [&](const AdapterBank& b, const Vector& input) {
      return probe(w, bb.forward(input, b.stack_for(0), top, false).trace.z[top]);
    };

    const AdapterStack stack = bank.stack_for(0);
    const ForwardTape tape = bb.forward(x, stack, top);
    std::vector<BlockAdapterGrads> grads;
    for (const auto* blk : stack) grads.push_back(BlockAdapterGrads::zeros_like(*blk));
    std::vector<BlockAdapterGrads*> gp;
    for (auto& g : grads) gp.push_back(&g);
    const Matrix dz0 = bb.backward(tape, stack, top, w, gp);

    // d loss / d x through the fixed patch maps.
    Vector dx(5, 0.0);
    for (std::size_t t = 0; t < bb.patch_maps().size(); ++t) {
      const Vector part = matvec_t(bb.patch_maps()[t], dz0.row(t + 1));
      add_inplace(dx, part);
    }
    const Vector dx_num = finite_diff_grad([&](const Vector& v) { return loss_at(bank, v); }, x);
    CHECK(grad_mismatch(dx, dx_num) <= 1.0);

    for (std::size_t blk = 0; blk < top; ++blk) {
      const bool is_shared = blk < bank.split();
      for (std::size_t li = 0; li < stack[blk]->loras.size(); ++li) {
        auto lora_of = [&](AdapterBank& b) -> LoraAdapter& {
          return is_shared ? b.shared()[blk].loras[li] : b.specific(0)[blk - b.split()].loras[li];
        };
        const LoraAdapter& orig = lora_of(bank);
        auto numeric_for = [&](bool on_a) {
          const Matrix& m0 = on_a ? orig.a : orig.b;
          return finite_diff_grad(
              [&](const Vector& v) {
                AdapterBank copy = bank;
                (on_a ? lora_of(copy).a : lora_of(copy).b) = testing::unflatten(v, m0.rows(), m0.cols());
                return loss_at(copy, x);
              },
              testing::flatten(m0));
        };
        CAPTURE(blk);
        CAPTURE(li);
        CHECK(grad_mismatch(testing::flatten(grads[blk].loras[li].a), numeric_for(true)) <= 1.0);
        if (orig.b_trainable) {
          REQUIRE_FALSE(grads[blk].loras[li].b.empty());
          CHECK(grad_mismatch(testing::flatten(grads[blk].loras[li].b), numeric_for(false)) <= 1.0);
        } else {
          CHECK(grads[blk].loras[li].b.empty());
        }
      }
    }
    // Blocks above `top` never receive gradient.
    for (std::size_t blk = top; blk < grads.size(); ++blk)
      for (const auto& g : grads[blk].loras) CHECK(max_abs(g.a) == 0.0);
  }
}

TEST_CASE("backbone checkpoint round trip") {
  const Backbone bb(tiny());
  const auto path = std::filesystem::temp_directory_path() / "conec_test_backbone.bin";
  bb.save(path);
  const Backbone loaded = Backbone::load(path);
  CHECK(loaded == bb);
  CHECK(loaded.config() == bb.config());
  const Vector x(5, 0.25);
  CHECK(loaded.forward_plain(x) == bb.forward_plain(x));

  {
    std::ofstream junk(path, std::ios::binary | std::ios::trunc);
    junk << "NOT-A-BACKBONE";
  }
  CHECK_THROWS_AS(Backbone::load(path), FormatError);
  std::filesystem::remove(path);
}
