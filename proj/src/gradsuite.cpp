#include "fusion3d/gradsuite.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <map>

#include "fusion3d/acmt.hpp"
#include "fusion3d/backbones.hpp"
#include "fusion3d/decoder.hpp"
#include "fusion3d/errors.hpp"
#include "fusion3d/grm.hpp"
#include "fusion3d/model.hpp"
#include "fusion3d/synthdata.hpp"

namespace fusion3d {

namespace {

constexpr std::size_t kMaxEntries = 6;

Tensor rand_t(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void jitter(ParamStore& store, Rng& rng, double scale) {
  for (auto& [_, p] : store)
    for (auto& v : p.value.storage()) v += rng.uniform(-scale, scale);
}

GradTarget input(const std::string& name, Tensor& value, const Tensor& grad) {
  return {name, value.values(), grad.values(), {}};
}

// Parameter check followed by an optional input check, merged into one report.
GradCheckReport check(const std::string& op, ParamStore& store, const std::function<double()>& loss,
                      const std::function<void()>& backward, Rng& rng,
                      const std::function<std::vector<GradTarget>()>& inputs = {}) {
  GradCheckReport rep;
  rep.op = op;
  if (store.size()) rep = check_params(op, store, loss, backward, kMaxEntries, rng);
  if (inputs) {
    if (!store.size()) backward();
    const auto targets = inputs();
    const GradCheckReport in = finite_diff_check(op, loss, targets);
    for (const auto& [name, e] : in.per_param) rep.per_param["input:" + name] = e;
    for (const auto& [name, n] : in.skipped) rep.skipped["input:" + name] = n;
    rep.max_rel_error = std::max(rep.max_rel_error, in.max_rel_error);
  }
  return rep;
}

// Whole-model check: for each top-level block (the name up to the first dot)
// the derivative along a random unit direction in that block's parameters.
// Single entries of a deep composition often carry gradients far below what a
// difference at h = 1e-5 can resolve; a direction sums over all of them.
GradCheckReport check_directions(const std::string& op, ParamStore& store, const std::function<double()>& loss,
                                 const std::function<void()>& backward, Rng& rng) {
  store.zero_grad();
  backward();
  std::map<std::string, std::vector<std::string>> blocks;
  for (auto& [name, _] : store) blocks[name.substr(0, name.find('.'))].push_back(name);
  GradCheckReport rep;
  rep.op = op;
  for (const auto& [block, names] : blocks) {
    std::vector<Tensor> origin, dir;
    double analytic = 0.0, norm2 = 0.0;
    for (const auto& n : names) {
      origin.push_back(store.value(n));
      dir.push_back(rand_t(origin.back().shape(), rng));
      norm2 += dot(dir.back(), dir.back());
    }
    for (std::size_t i = 0; i < names.size(); ++i) {
      dir[i] *= 1.0 / std::sqrt(norm2);
      analytic += dot(store.grad(names[i]), dir[i]);
    }
    double t = 0.0;
    auto along = [&] {
      for (std::size_t i = 0; i < names.size(); ++i) {
        Tensor& v = store.value(names[i]);
        for (std::size_t j = 0; j < v.size(); ++j) v[j] = origin[i][j] + t * dir[i][j];
      }
      return loss();
    };
    const GradTarget target{block, std::span<double>(&t, 1), std::span<const double>(&analytic, 1), {}};
    const GradCheckReport r = finite_diff_check(op, along, std::span<const GradTarget>(&target, 1));
    for (std::size_t i = 0; i < names.size(); ++i) store.value(names[i]) = origin[i];
    rep.per_param[block] = r.per_param.at(block);
    if (auto it = r.skipped.find(block); it != r.skipped.end()) rep.skipped[block] = it->second;
    rep.max_rel_error = std::max(rep.max_rel_error, r.max_rel_error);
  }
  return rep;
}

using Group = std::function<GradCheckReport(std::uint64_t seed)>;

// ---- kernels -----------------------------------------------------------------

std::vector<Group> kernel_groups() {
  std::vector<Group> g;
  g.push_back([](std::uint64_t seed) {
    Rng rng(seed);
    ParamStore store;
    kernels::Linear lin("linear", 4, 3);
    lin.init(store, rng);
    jitter(store, rng, 0.2);
    Tensor x = rand_t({5, 4}, rng), r = rand_t({5, 3}, rng), dx;
    auto loss = [&] { return dot(lin.forward(store, x), r); };
    auto bwd = [&] { dx = lin.backward(store, x, r); };
    return check("linear", store, loss, bwd, rng, [&] { return std::vector<GradTarget>{input("x", x, dx)}; });
  });
  g.push_back([](std::uint64_t seed) {
    Rng rng(seed);
    ParamStore store;
    kernels::Mlp mlp("mlp", {{4, 6, 5, 3}, true});
    mlp.init(store, rng);
    jitter(store, rng, 0.2);
    Tensor x = rand_t({5, 4}, rng), r = rand_t({5, 3}, rng), dx;
    auto loss = [&] { return dot(mlp.forward(store, x), r); };
    auto bwd = [&] {
      kernels::MlpCache c;
      mlp.forward(store, x, &c);
      dx = mlp.backward(store, c, r);
    };
    return check("mlp", store, loss, bwd, rng, [&] { return std::vector<GradTarget>{input("x", x, dx)}; });
  });
  g.push_back([](std::uint64_t seed) {
    Rng rng(seed);
    ParamStore store;
    kernels::LayerNorm ln("layer_norm", 6);
    ln.init(store);
    jitter(store, rng, 0.3);
    Tensor x = rand_t({4, 6}, rng), r = rand_t({4, 6}, rng), dx;
    auto loss = [&] { return dot(ln.forward(store, x), r); };
    auto bwd = [&] {
      kernels::LayerNormCache c;
      ln.forward(store, x, &c);
      dx = ln.backward(store, c, r);
    };
    return check("layer_norm", store, loss, bwd, rng, [&] { return std::vector<GradTarget>{input("x", x, dx)}; });
  });
  g.push_back([](std::uint64_t seed) {
    Rng rng(seed);
    ParamStore none;
    Tensor x = rand_t({3, 5}, rng, -2, 2), r = rand_t({3, 5}, rng), dx;
    auto loss = [&] { return dot(kernels::softmax(x, 1), r); };
    auto bwd = [&] { dx = kernels::softmax_backward(kernels::softmax(x, 1), r, 1); };
    return check("softmax", none, loss, bwd, rng, [&] { return std::vector<GradTarget>{input("x", x, dx)}; });
  });
  g.push_back([](std::uint64_t seed) {
    Rng rng(seed);
    ParamStore none;
    Tensor a = rand_t({7}, rng), b = rand_t({7}, rng), da({7}), db({7});
    auto loss = [&] { return 1.7 * kernels::cosine_sim(a.values(), b.values()); };
    auto bwd = [&] {
      da.fill(0);
      db.fill(0);
      kernels::cosine_sim_backward(a.values(), b.values(), 1.7, da.values(), db.values());
    };
    return check("cosine_sim", none, loss, bwd, rng,
                 [&] { return std::vector<GradTarget>{input("a", a, da), input("b", b, db)}; });
  });
  g.push_back([](std::uint64_t seed) {
    Rng rng(seed);
    ParamStore none;
    Tensor map = rand_t({5, 6, 3}, rng), uv = rand_t({4, 2}, rng, 0.05, 0.95), r = rand_t({4, 3}, rng);
    Tensor dmap = Tensor::zeros_like(map), duv = Tensor::zeros_like(uv);
    auto loss = [&] {
      double s = 0;
      for (std::size_t i = 0; i < 4; ++i) {
        const auto v = kernels::bilinear_sample(map, uv(i, 0), uv(i, 1));
        for (std::size_t c = 0; c < 3; ++c) s += v[c] * r(i, c);
      }
      return s;
    };
    auto bwd = [&] {
      dmap.fill(0);
      duv.fill(0);
      for (std::size_t i = 0; i < 4; ++i) {
        kernels::bilinear_sample_backward(map, uv(i, 0), uv(i, 1), r.row(i), &dmap, &duv(i, 0), &duv(i, 1));
      }
    };
    return check("bilinear_sample", none, loss, bwd, rng,
                 [&] { return std::vector<GradTarget>{input("map", map, dmap), input("uv", uv, duv)}; });
  });
  return g;
}

// ---- backbones ---------------------------------------------------------------

PointCloud random_cloud(std::size_t n, Rng& rng) {
  PointCloud pc;
  for (std::size_t i = 0; i < n; ++i) {
    pc.positions.push_back({rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 0.5)});
    pc.colors.push_back({rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1)});
  }
  return pc;
}

std::vector<Group> backbone_groups() {
  std::vector<Group> g;
  g.push_back([](std::uint64_t seed) {
    Rng rng(seed);
    ParamStore store;
    PointEncoder enc("point_encoder", {6, 5, 0.35, 6});
    enc.init(store, rng);
    jitter(store, rng, 0.2);
    const PointCloud pc = random_cloud(30, rng);
    const PointGrouping grouping = group_points(pc, 5, 0.35, 6);
    const Tensor r = rand_t({5, 6}, rng);
    auto loss = [&] { return dot(enc.forward(store, pc, grouping), r); };
    auto bwd = [&] {
      PointEncoderCache c;
      enc.forward(store, pc, grouping, &c);
      enc.backward(store, c, r);
    };
    return check("point_encoder", store, loss, bwd, rng);
  });
  g.push_back([](std::uint64_t seed) {
    Rng rng(seed);
    ParamStore store;
    ImageEncoder enc("image_encoder", {3, 4});
    enc.init(store, rng);
    jitter(store, rng, 0.2);
    const Tensor raster = rand_t({32, 32, kRasterChannels}, rng, 0, 1);
    const std::vector<Tensor> pooled = pool_raster(raster);
    std::vector<Tensor> rs;
    for (const auto& p : pooled) rs.push_back(rand_t({p.dim(0), p.dim(1), 3}, rng));
    auto loss = [&] {
      const ImagePyramid pyr = enc.forward_pooled(store, pooled);
      double s = 0;
      for (std::size_t l = 0; l < rs.size(); ++l) s += dot(pyr.levels[l], rs[l]);
      return s;
    };
    auto bwd = [&] {
      ImageEncoderCache c;
      enc.forward_pooled(store, pooled, &c);
      enc.backward(store, c, rs);
    };
    return check("image_encoder", store, loss, bwd, rng);
  });
  return g;
}

// ---- grm ---------------------------------------------------------------------

std::vector<Group> grm_groups() {
  return {[](std::uint64_t seed) {
    Rng rng(seed);
    GrmConfig cfg{6, 5, {2, 3, 5}, 4};
    GraphReasoning grm("grm", cfg);
    ParamStore store;
    grm.init(store, rng);
    jitter(store, rng, 0.3);
    Tensor coords = rand_t({8, 3}, rng, 0, 2), feats = rand_t({8, 6}, rng);
    Tensor pcoords = rand_t({24, 3}, rng, 0, 2), pfeats = rand_t({24, 6}, rng), r = rand_t({8, 6}, rng);
    Tensor df = Tensor::zeros_like(feats), dpf = Tensor::zeros_like(pfeats);
    auto loss = [&] { return dot(grm.forward(store, coords, feats, pcoords, pfeats), r); };
    auto bwd = [&] {
      GrmCache c;
      grm.forward(store, coords, feats, pcoords, pfeats, {}, &c);
      df.fill(0);
      dpf.fill(0);
      grm.backward(store, c, r, df, dpf);
    };
    return check("grm", store, loss, bwd, rng, [&] {
      return std::vector<GradTarget>{input("features", feats, df), input("point_features", pfeats, dpf)};
    });
  }};
}

// ---- acmt --------------------------------------------------------------------

std::vector<Group> acmt_groups() {
  std::vector<Group> g;
  for (bool fixed : {false, true}) {
    g.push_back([fixed](std::uint64_t seed) {
      Rng rng(seed);
      AcmtConfig cfg{8, 3, 2, 2, 2, 6};
      AcmtLayer layer(fixed ? "acmt_fixed_gate" : "acmt", cfg);
      ParamStore store;
      layer.init(store, rng);
      jitter(store, rng, 0.3);
      const std::size_t M = 5;
      std::vector<RefPoint> refs(M);
      for (std::size_t i = 0; i < M; ++i) refs[i] = {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), i % 3 != 2};
      QueryState st{rand_t({M, 8}, rng), refs, Tensor({M, 3})};
      Tensor ctx = rand_t({7, 8}, rng), r = rand_t({M, 8}, rng);
      ImagePyramid pyr;
      for (std::size_t l = 0; l < 2; ++l) pyr.levels.push_back(rand_t({8u >> l, (8u >> l) + 1, 3}, rng));
      const AcmtOptions opt{fixed};
      Tensor dy = Tensor::zeros_like(st.y), dctx = Tensor::zeros_like(ctx);
      std::vector<Tensor> dlv;
      for (const auto& l : pyr.levels) dlv.push_back(Tensor::zeros_like(l));
      auto loss = [&] { return dot(layer.forward(store, st, ctx, pyr, opt), r); };
      auto bwd = [&] {
        AcmtLayerCache c;
        layer.forward(store, st, ctx, pyr, opt, &c);
        dy.fill(0);
        dctx.fill(0);
        for (auto& d : dlv) d.fill(0);
        layer.backward(store, c, pyr, r, dy, dctx, dlv);
      };
      return check(fixed ? "acmt_fixed_gate" : "acmt", store, loss, bwd, rng, [&] {
        std::vector<GradTarget> t{input("queries", st.y, dy), input("context", ctx, dctx)};
        for (std::size_t l = 0; l < dlv.size(); ++l) t.push_back(input("level" + std::to_string(l), pyr.levels[l], dlv[l]));
        return t;
      });
    });
  }
  return g;
}

// ---- decoder -----------------------------------------------------------------

// Boxes with the given queries placed inside them so every stage has positives.
std::vector<LabeledBox> random_boxes(std::size_t n, Rng& rng, std::size_t classes) {
  std::vector<LabeledBox> out;
  for (std::size_t i = 0; i < n; ++i) {
    LabeledBox b;
    b.box.center = {rng.uniform(0.5, 3.5), rng.uniform(0.5, 3.5), rng.uniform(0.3, 0.8)};
    b.box.extents = {rng.uniform(0.4, 1.2), rng.uniform(0.4, 1.2), rng.uniform(0.4, 1.2)};
    b.box.yaw = rng.uniform(-3.0, 3.0);
    b.label = static_cast<int>(rng.integer(0, static_cast<std::int64_t>(classes) - 1));
    out.push_back(b);
  }
  return out;
}

Tensor coords_near(const std::vector<LabeledBox>& boxes, std::size_t M, Rng& rng) {
  Tensor c({M, 3});
  for (std::size_t i = 0; i < M; ++i) {
    const auto& b = boxes[i % boxes.size()].box;
    const Vec3 local{rng.uniform(-0.35, 0.35) * b.extents.x, rng.uniform(-0.35, 0.35) * b.extents.y,
                     rng.uniform(-0.35, 0.35) * b.extents.z};
    const Vec3 p = b.center + rotate_z(local, b.yaw);
    c(i, 0) = p.x;
    c(i, 1) = p.y;
    c(i, 2) = p.z;
  }
  return c;
}

std::vector<Group> decoder_groups() {
  std::vector<Group> g;
  g.push_back([](std::uint64_t seed) {
    Rng rng(seed);
    const std::size_t M = 10, C = 6, K = 3;
    StageHeads heads("heads", C, K);
    ParamStore store;
    heads.init(store, rng);
    jitter(store, rng, 0.3);
    const auto gts = random_boxes(3, rng, K);
    const Tensor coords = coords_near(gts, M, rng);
    Tensor y = rand_t({M, C}, rng), dy;
    const Assignment as = assign_targets(coords, gts, 0);
    auto loss = [&] {
      return combine_stage_losses({stage_loss(heads.forward(store, y), as, gts)}).total;
    };
    auto bwd = [&] {
      StageHeadsCache c;
      const StagePrediction p = heads.forward(store, y, &c);
      StageLossGrad gr;
      stage_loss(p, as, gts, &gr, 1.0);
      dy = heads.backward(store, c, gr.dlogits, gr.dregression, gr.dcenterness);
    };
    return check("heads_loss", store, loss, bwd, rng, [&] { return std::vector<GradTarget>{input("features", y, dy)}; });
  });
  g.push_back([](std::uint64_t seed) {
    Rng rng(seed);
    ModelConfig mc;
    mc.num_queries = 6;
    mc.feature_dim = 8;
    mc.image_dim = 4;
    mc.heads = 2;
    mc.acmt_layers = 1;
    mc.stages = 2;
    mc.grm_scales = {2, 4};
    mc.num_classes = 3;
    mc.context_points = 14;
    mc.edge_dim = 4;
    mc.ffn_dim = 8;
    mc.point_hidden = 6;
    mc.image_hidden = 5;
    mc.sampling_points = 2;
    mc.idw_k = 3;
    mc.max_group = 6;
    SceneSpec spec;
    spec.num_points = 160;
    spec.min_boxes = 2;
    spec.max_boxes = 3;
    spec.num_classes = 3;
    spec.image_width = 32;
    spec.image_height = 32;
    spec.min_points_per_box = 10;
    const SceneSample sample = generate_scene(mix_seed(seed, 77), spec, "gradcheck");
    const PreparedScene scene = prepare_scene(sample, mc);
    Detector det(mc);
    ParamStore store;
    det.init(store, seed);
    jitter(store, rng, 0.2);
    // Open the graph branches and spread the backbone features apart so every
    // block has a resolvable effect on the loss.
    for (auto& [name, p] : store) {
      if (name.ends_with(".gamma")) p.value.fill(1.0);
      if (name.starts_with("point_encoder") && name.ends_with(".weight")) p.value *= 4.0;
    }
    std::vector<Tensor> fixed;
    for (std::size_t t = 0; t < mc.stages; ++t) fixed.push_back(coords_near(scene.boxes, mc.num_queries, rng));
    return check_directions("detector", store, [&] { return det.loss(store, scene, false, 1.0, &fixed).total; },
                            [&] { det.loss(store, scene, true, 1.0, &fixed); }, rng);
  });
  return g;
}

std::vector<Group> groups_for(const std::string& module) {
  if (module == "kernels") return kernel_groups();
  if (module == "backbones") return backbone_groups();
  if (module == "grm") return grm_groups();
  if (module == "acmt") return acmt_groups();
  if (module == "decoder") return decoder_groups();
  throw ConfigError("unknown gradcheck module '" + module + "'");
}

}  // namespace

const std::vector<std::string>& gradsuite_modules() {
  static const std::vector<std::string> m = {"kernels", "backbones", "grm", "acmt", "decoder"};
  return m;
}

GradSuiteResult run_gradcheck_suite(const std::string& module, std::size_t seeds, std::uint64_t base_seed) {
  if (seeds == 0) throw ConfigError("gradcheck needs at least one seed");
  std::vector<std::string> modules;
  if (module == "all") {
    modules = gradsuite_modules();
  } else {
    groups_for(module);
    modules = {module};
  }
  const auto t0 = std::chrono::steady_clock::now();
  GradSuiteResult res;
  for (const auto& m : modules) {
    std::vector<std::string> order;
    std::map<std::string, GradSuiteRow> rows;
    for (const auto& group : groups_for(m)) {
      for (std::size_t s = 0; s < seeds; ++s) {
        const GradCheckReport rep = group(mix_seed(base_seed, s));
        for (const auto& [name, err] : rep.per_param) {
          const std::string key = name.rfind("input:", 0) == 0 ? rep.op + "." + name.substr(6) : name;
          auto [it, fresh] = rows.try_emplace(key, GradSuiteRow{m, key, 0.0, 0, 0});
          if (fresh) order.push_back(key);
          it->second.max_rel_error = std::max(it->second.max_rel_error, err);
          ++it->second.seeds;
          if (auto sk = rep.skipped.find(name); sk != rep.skipped.end()) it->second.skipped += sk->second;
        }
      }
    }
    for (const auto& k : order) {
      const auto& row = rows.at(k);
      if (row.max_rel_error >= res.max_rel_error) {
        res.max_rel_error = row.max_rel_error;
        res.worst = m + "/" + k;
      }
      res.rows.push_back(row);
    }
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

}  // namespace fusion3d
