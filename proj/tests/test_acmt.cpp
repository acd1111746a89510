#include <cmath>
#include <numeric>

#include "doctest.h"
#include "fusion3d/acmt.hpp"
#include "fusion3d/errors.hpp"
#include "helpers.hpp"

using namespace fusion3d;
using fusion3d::test::dot;
using fusion3d::test::random_tensor;

namespace {

AcmtConfig small_config() {
  AcmtConfig c;
  c.feature_dim = 8;
  c.image_dim = 3;
  c.heads = 2;
  c.levels = 2;
  c.points = 2;
  c.ffn_dim = 6;
  return c;
}

ImagePyramid random_pyramid(const AcmtConfig& c, Rng& rng) {
  ImagePyramid p;
  for (std::size_t l = 0; l < c.levels; ++l) {
    const std::size_t s = std::size_t{8} >> l;
    p.levels.push_back(random_tensor({s, s + 1, c.image_dim}, rng));
  }
  return p;
}

std::vector<RefPoint> random_refs(std::size_t M, Rng& rng, bool with_invalid) {
  std::vector<RefPoint> r(M);
  for (std::size_t i = 0; i < M; ++i) r[i] = {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), !(with_invalid && i % 3 == 2)};
  return r;
}

void set_identity(Tensor& w) {
  w.fill(0.0);
  for (std::size_t i = 0; i < std::min(w.rows(), w.cols()); ++i) w(i, i) = 1.0;
}

}  // namespace

TEST_CASE("config validation") {
  AcmtConfig c = small_config();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_THROWS_AS(AcmtLayer("x", c), ConfigError);
}

TEST_CASE("cross attention single key returns its value") {
  Rng rng(1);
  ParamStore store;
  CrossAttention ca("ca", 4, 2);
  ca.init(store, rng);
  set_identity(store.value("ca.value.weight"));
  set_identity(store.value("ca.output.weight"));
  Tensor y = random_tensor({3, 4}, rng), x = random_tensor({1, 4}, rng);
  CrossAttentionCache cache;
  Tensor out = ca.forward(store, y, x, &cache);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t c = 0; c < 4; ++c) CHECK(std::abs(out(i, c) - x(0, c)) < 1e-15);

  Tensor keys = random_tensor({7, 4}, rng);
  ca.forward(store, y, keys, &cache);
  for (std::size_t r = 0; r < 2 * 3; ++r) {
    const double s = std::accumulate(cache.attn.begin() + static_cast<std::ptrdiff_t>(r * 7),
                                     cache.attn.begin() + static_cast<std::ptrdiff_t>(r * 7 + 7), 0.0);
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
}

TEST_CASE("deformable attention degenerate cases") {
  AcmtConfig cfg = small_config();
  cfg.feature_dim = cfg.image_dim * cfg.heads;
  Rng rng(2);
  ParamStore store;
  DeformableAttention da("da", cfg);
  da.init(store, rng);
  // uniform weights, zero offsets, identity value/output per head
  store.value("da.weights.weight").fill(0.0);
  Tensor& wv = store.value("da.value.weight");
  wv.fill(0.0);
  for (std::size_t h = 0; h < cfg.heads; ++h)
    for (std::size_t c = 0; c < cfg.image_dim; ++c) wv(c, h * cfg.image_dim + c) = 1.0;
  set_identity(store.value("da.output.weight"));
  ImagePyramid pyr = random_pyramid(cfg, rng);
  Tensor y = random_tensor({4, cfg.feature_dim}, rng);
  auto refs = random_refs(4, rng, true);
  Tensor out = da.forward(store, y, refs, pyr);
  for (std::size_t i = 0; i < 4; ++i) {
    std::vector<double> mean(cfg.image_dim, 0.0);
    for (const auto& lv : pyr.levels) {
      auto s = kernels::bilinear_sample(lv, refs[i].u, refs[i].v);
      for (std::size_t c = 0; c < cfg.image_dim; ++c) mean[c] += s[c] / static_cast<double>(cfg.levels);
    }
    for (std::size_t h = 0; h < cfg.heads; ++h)
      for (std::size_t c = 0; c < cfg.image_dim; ++c) {
        const double expect = refs[i].valid ? mean[c] : 0.0;
        CHECK(std::abs(out(i, h * cfg.image_dim + c) - expect) < 1e-10);
      }
  }

  // one-hot weights select exactly one (level, point) sample
  Tensor& wb = store.value("da.weights.bias");
  wb.fill(-1e4);
  const std::size_t LP = cfg.levels * cfg.points;
  for (std::size_t h = 0; h < cfg.heads; ++h) wb[h * LP + cfg.points] = 0.0;  // level 1, point 0
  DeformableCache cache;
  out = da.forward(store, y, refs, pyr, &cache);
  for (std::size_t i = 0; i < 4; ++i) {
    if (!refs[i].valid) continue;
    auto s = kernels::bilinear_sample(pyr.levels[1], refs[i].u, refs[i].v);
    for (std::size_t c = 0; c < cfg.image_dim; ++c) CHECK(std::abs(out(i, c) - s[c]) < 1e-12);
  }
  for (std::size_t r = 0; r < 4 * cfg.heads; ++r) {
    const double s = std::accumulate(cache.weights.begin() + static_cast<std::ptrdiff_t>(r * LP),
                                     cache.weights.begin() + static_cast<std::ptrdiff_t>((r + 1) * LP), 0.0);
    CHECK(std::abs(s - 1.0) < 1e-10);
  }
}

TEST_CASE("gate weights") {
  Rng rng(3);
  ParamStore store;
  CrossModalGate g("g", 8, 2);
  g.init(store, rng);
  Tensor y = random_tensor({5, 8}, rng), yp = random_tensor({5, 8}, rng), yi = random_tensor({5, 8}, rng);
  GateCache cache;
  Tensor out = g.forward(store, y, yp, yi, false, &cache);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(std::abs(out[i] - 0.5 * (yp[i] + yi[i])) < 1e-15);

  // point logit 20 above image logit
  Tensor& b = store.value("g.mlp.l1.bias");
  for (std::size_t h = 0; h < 2; ++h) b[2 * h] = 20.0;
  g.forward(store, y, yp, yi, false, &cache);
  for (std::size_t k = 0; k < cache.lambda.size(); k += 2) CHECK(cache.lambda[k] > 0.9999);

  test::jitter(store, rng, 1.0);
  g.forward(store, y, yp, yi, false, &cache);
  for (std::size_t k = 0; k < cache.lambda.size(); k += 2)
    CHECK(std::abs(cache.lambda[k] + cache.lambda[k + 1] - 1.0) < 1e-12);
}

TEST_CASE("zero branches leave the queries unchanged") {
  AcmtConfig cfg = small_config();
  Rng rng(4);
  ParamStore store;
  AcmtLayer layer("acmt", cfg);
  layer.init(store, rng);
  store.value("acmt.cross.value.weight").fill(0.0);
  store.value("acmt.deform.value.weight").fill(0.0);
  store.value("acmt.ffn.l1.weight").fill(0.0);
  for (std::size_t M : {1, 64}) {
    QueryState st{random_tensor({M, cfg.feature_dim}, rng), random_refs(M, rng, false), Tensor({M, 3})};
    Tensor ctx = random_tensor({10, cfg.feature_dim}, rng);
    Tensor out = layer.forward(store, st, ctx, random_pyramid(cfg, rng));
    CHECK(out.shape() == std::vector<std::size_t>{M, cfg.feature_dim});
    CHECK(out.storage() == st.y.storage());
  }
}

TEST_CASE("layer properties") {
  AcmtConfig cfg = small_config();
  Rng rng(5);
  ParamStore store;
  AcmtLayer layer("acmt", cfg);
  layer.init(store, rng);
  test::jitter(store, rng, 0.3);
  const std::size_t M = 6;
  QueryState st{random_tensor({M, cfg.feature_dim}, rng), random_refs(M, rng, false), Tensor({M, 3})};
  Tensor ctx = random_tensor({9, cfg.feature_dim}, rng);
  ImagePyramid pyr = random_pyramid(cfg, rng);
  Tensor out = layer.forward(store, st, ctx, pyr);

  // key order does not matter
  Tensor rev({9, cfg.feature_dim});
  for (std::size_t j = 0; j < 9; ++j)
    for (std::size_t c = 0; c < cfg.feature_dim; ++c) rev(j, c) = ctx(8 - j, c);
  Tensor out2 = layer.forward(store, st, rev, pyr);
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(std::abs(out[i] - out2[i]) < 1e-12);

  // all-invalid references make the image stream irrelevant
  for (auto& r : st.refs) r.valid = false;
  Tensor a = layer.forward(store, st, ctx, pyr);
  Tensor b = layer.forward(store, st, ctx, random_pyramid(cfg, rng));
  CHECK(a.storage() == b.storage());
}

TEST_CASE("acmt layer gradcheck") {
  AcmtConfig cfg = small_config();
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    Rng rng(100 + seed);
    ParamStore store;
    AcmtLayer layer("acmt", cfg);
    layer.init(store, rng);
    test::jitter(store, rng, 0.3);
    const std::size_t M = 5;
    QueryState st{random_tensor({M, cfg.feature_dim}, rng), random_refs(M, rng, true), Tensor({M, 3})};
    Tensor ctx = random_tensor({7, cfg.feature_dim}, rng);
    ImagePyramid pyr = random_pyramid(cfg, rng);
    const Tensor r = random_tensor({M, cfg.feature_dim}, rng);
    for (bool fixed : {false, true}) {
      AcmtOptions opt{fixed};
      auto loss = [&] { return dot(layer.forward(store, st, ctx, pyr, opt), r); };
      Tensor dy = Tensor::zeros_like(st.y), dctx = Tensor::zeros_like(ctx);
      std::vector<Tensor> dlv;
      for (const auto& l : pyr.levels) dlv.push_back(Tensor::zeros_like(l));
      auto backward = [&] {
        AcmtLayerCache cache;
        layer.forward(store, st, ctx, pyr, opt, &cache);
        dy.fill(0);
        dctx.fill(0);
        for (auto& d : dlv) d.fill(0);
        layer.backward(store, cache, pyr, r, dy, dctx, dlv);
      };
      Rng pick(seed);
      auto rep = check_params("acmt", store, loss, backward, 10, pick);
      INFO("seed " << seed << " worst " << rep.worst_param() << " " << rep.max_rel_error);
      CHECK(rep.passed());
      std::vector<GradTarget> t{{"y", st.y.values(), dy.values(), {}}, {"context", ctx.values(), dctx.values(), {}}};
      for (std::size_t l = 0; l < dlv.size(); ++l)
        t.push_back({"level" + std::to_string(l), pyr.levels[l].values(), dlv[l].values(), {}});
      auto rep2 = finite_diff_check("acmt.inputs", loss, t);
      INFO("inputs worst " << rep2.worst_param() << " " << rep2.max_rel_error);
      CHECK(rep2.passed());
    }
  }
}
