// Runs every acceptance criterion at its stated tolerance and prints one
// pass/fail line per criterion. Exit 0 iff all selected criteria pass.
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include <unistd.h>

#include "CLI11.hpp"
#include "fusion3d/acmt.hpp"
#include "fusion3d/checkpoint.hpp"
#include "fusion3d/geometry.hpp"
#include "fusion3d/gradsuite.hpp"
#include "fusion3d/grm.hpp"
#include "fusion3d/logging.hpp"
#include "fusion3d/training.hpp"
#include "oracles.hpp"

using namespace fusion3d;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct Verdict {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + std::string("failed: ") + what;
    }
  }
  void note(const std::string& s) { detail += (detail.empty() ? "" : "; ") + s; }
};

std::string fmt_e(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

std::string fmt_f(double v, int digits = 3) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.storage()) v = rng.uniform(lo, hi);
  return t;
}

void jitter(ParamStore& store, Rng& rng, double scale) {
  for (auto& [_, p] : store)
    for (auto& v : p.value.storage()) v += rng.uniform(-scale, scale);
}

// ---- 1 -----------------------------------------------------------------------

Verdict gradient_suite() {
  Verdict v;
  const GradSuiteResult r = run_gradcheck_suite("all", 20, 0);
  v.require(r.max_rel_error < 1e-4, "max rel err " + fmt_e(r.max_rel_error) + " at " + r.worst);
  v.require(r.seconds < 120.0, "runtime " + fmt_f(r.seconds, 1) + " s");
  v.note(std::to_string(r.rows.size()) + " groups x 20 seeds, max rel err " + fmt_e(r.max_rel_error) + " (" +
         r.worst + "), " + fmt_f(r.seconds, 1) + " s");
  return v;
}

// ---- 2 -----------------------------------------------------------------------

Verdict iou_oracle() {
  Verdict v;
  Rng rng(2024), mc(99);
  double worst = 0.0;
  for (int i = 0; i < 200; ++i) {
    const OrientedBox3D a = oracle::random_box(rng, 0.6), b = oracle::random_box(rng, 0.6);
    worst = std::max(worst, std::abs(rotated_iou3d(a, b) - oracle::monte_carlo_iou(a, b, 100000, mc)));
  }
  v.require(worst < 0.02, "monte carlo gap " + fmt_e(worst));
  const OrientedBox3D cube{{0, 0, 0}, {1, 1, 1}, 0.0};
  OrientedBox3D far = cube, half = cube;
  far.center.x = 10;
  half.center.x = 0.5;
  const double id = rotated_iou3d(cube, cube), dj = rotated_iou3d(cube, far), off = rotated_iou3d(cube, half);
  v.require(std::abs(id - 1.0) < 1e-12, "identity " + fmt_e(id));
  v.require(dj == 0.0, "disjoint " + fmt_e(dj));
  v.require(std::abs(off - 1.0 / 3.0) < 1e-9, "offset cube " + fmt_e(off));
  v.note("200 pairs, max |exact - MC(100k)| " + fmt_e(worst) + ", offset cube err " + fmt_e(std::abs(off - 1.0 / 3.0)));
  return v;
}

// ---- 3 -----------------------------------------------------------------------

Verdict geometry_identities() {
  Verdict v;
  Rng rng(11);
  double worst = 0.0, worst_face = 0.0;
  bool centers_exact = true, aligned_faces_exact = true;
  for (int i = 0; i < 1000; ++i) {
    const OrientedBox3D box = oracle::random_box(rng, 3.0);
    const Vec3 p = box.center + Vec3{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    const Vec3 c = apply_center_update(p, encode_deltas(box, p), box.yaw);
    worst = std::max(worst, (c - box.center).norm());

    centers_exact &= centerness_target(encode_deltas(box, box.center)) == 1.0;
    for (int axis = 0; axis < 3; ++axis) {
      Vec3 off{};
      (axis == 0 ? off.x : axis == 1 ? off.y : off.z) = 0.5 * (axis == 0 ? box.extents.x : axis == 1 ? box.extents.y : box.extents.z);
      worst_face = std::max(worst_face, centerness_target(encode_deltas(box, box.center + rotate_z(off, box.yaw))));
    }
    // yaw-free boxes with dyadic sizes land exactly on the face
    const OrientedBox3D aligned{{std::floor(box.center.x), 0.5, -1.0}, {2.0, 0.5, 1.0}, 0.0};
    aligned_faces_exact &= centerness_target(encode_deltas(aligned, aligned.center + Vec3{1.0, 0, 0})) == 0.0;
  }
  v.require(worst < 1e-12, "round trip " + fmt_e(worst));
  v.require(centers_exact, "centerness at a center differs from 1");
  v.require(aligned_faces_exact, "centerness on an axis-aligned face differs from 0");
  v.require(worst_face < 1e-12, "centerness on a rotated face " + fmt_e(worst_face));
  v.note("1000 triples, max center error " + fmt_e(worst) + " m, face centerness <= " + fmt_e(worst_face));
  return v;
}

// ---- 4 -----------------------------------------------------------------------

Verdict module_identities() {
  Verdict v;
  std::size_t identity_mismatch = 0, perm_mismatch = 0;
  double lambda_gap = 0.0, deform_gap = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    GrmConfig gc;
    GraphReasoning grm("grm", gc);
    ParamStore store;
    grm.init(store, rng);
    const std::size_t M = 64, N = 256, C = gc.feature_dim;
    const Tensor coords = random_tensor({M, 3}, rng, 0.0, 6.0), feats = random_tensor({M, C}, rng);
    const Tensor pc = random_tensor({N, 3}, rng, 0.0, 6.0), pf = random_tensor({N, C}, rng);
    const Tensor out = grm.forward(store, coords, feats, pc, pf);
    for (std::size_t i = 0; i < out.size(); ++i) identity_mismatch += out[i] != feats[i];

    jitter(store, rng, 0.3);
    const Tensor moved = grm.forward(store, coords, feats, pc, pf);
    std::vector<std::size_t> perm(M);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng.engine());
    Tensor pcoords({M, 3}), pfeats({M, C});
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t a = 0; a < 3; ++a) pcoords(i, a) = coords(perm[i], a);
      for (std::size_t c = 0; c < C; ++c) pfeats(i, c) = feats(perm[i], c);
    }
    const Tensor permuted = grm.forward(store, pcoords, pfeats, pc, pf);
    for (std::size_t i = 0; i < M; ++i)
      for (std::size_t c = 0; c < C; ++c) perm_mismatch += permuted(i, c) != moved(perm[i], c);

    CrossModalGate gate("gate", C, 4);
    ParamStore gs;
    gate.init(gs, rng);
    jitter(gs, rng, 2.0);
    GateCache cache;
    gate.forward(gs, feats, random_tensor({M, C}, rng), random_tensor({M, C}, rng), false, &cache);
    for (std::size_t k = 0; k < cache.lambda.size(); k += 2)
      lambda_gap = std::max(lambda_gap, std::abs(cache.lambda[k] + cache.lambda[k + 1] - 1.0));

    AcmtConfig ac;
    ac.image_dim = 16;
    ac.feature_dim = ac.image_dim * ac.heads;
    DeformableAttention da("da", ac);
    ParamStore ds;
    da.init(ds, rng);
    for (auto& [name, p] : ds)
      if (name.ends_with(".bias")) p.value.fill(0.0);
    ds.value("da.weights.weight").fill(0.0);
    Tensor& wv = ds.value("da.value.weight");
    wv.fill(0.0);
    for (std::size_t h = 0; h < ac.heads; ++h)
      for (std::size_t c = 0; c < ac.image_dim; ++c) wv(c, h * ac.image_dim + c) = 1.0;
    Tensor& wo = ds.value("da.output.weight");
    wo.fill(0.0);
    for (std::size_t c = 0; c < ac.feature_dim; ++c) wo(c, c) = 1.0;
    ImagePyramid pyr;
    for (std::size_t l = 0, s = 32; l < ac.levels; ++l, s /= 2) pyr.levels.push_back(random_tensor({s, s, ac.image_dim}, rng));
    std::vector<RefPoint> refs(M);
    for (auto& r : refs) r = {rng.uniform(), rng.uniform(), true};
    const Tensor y = random_tensor({M, ac.feature_dim}, rng);
    const Tensor d = da.forward(ds, y, refs, pyr);
    for (std::size_t i = 0; i < M; ++i) {
      std::vector<double> mean(ac.image_dim, 0.0);
      for (const auto& lv : pyr.levels) {
        const auto s = kernels::bilinear_sample(lv, refs[i].u, refs[i].v);
        for (std::size_t c = 0; c < ac.image_dim; ++c) mean[c] += s[c] / static_cast<double>(ac.levels);
      }
      for (std::size_t h = 0; h < ac.heads; ++h)
        for (std::size_t c = 0; c < ac.image_dim; ++c)
          deform_gap = std::max(deform_gap, std::abs(d(i, h * ac.image_dim + c) - mean[c]));
    }
  }
  v.require(identity_mismatch == 0, std::to_string(identity_mismatch) + " entries changed with gamma = 0");
  v.require(lambda_gap < 1e-12, "lambda sum gap " + fmt_e(lambda_gap));
  v.require(deform_gap < 1e-10, "deformable mean gap " + fmt_e(deform_gap));
  v.require(perm_mismatch == 0, std::to_string(perm_mismatch) + " entries differ under permutation");
  v.note("10 seeds at full size: identity exact, |lp + li - 1| <= " + fmt_e(lambda_gap) + ", deformable gap " +
         fmt_e(deform_gap) + ", permutation exact");
  return v;
}

// ---- 5 -----------------------------------------------------------------------

Verdict evaluator_oracle() {
  Verdict v;
  Rng rng(77);
  std::size_t fixtures = 0, disagreements = 0;
  for (int trial = 0; trial < 2000; ++trial) {
    GroundTruthMap gts;
    const auto scenes = rng.integer(1, 2);
    for (std::int64_t s = 0; s < scenes; ++s) {
      auto& list = gts["s" + std::to_string(s)];
      const auto n = rng.integer(0, 5);
      for (std::int64_t g = 0; g < n; ++g) list.push_back({oracle::random_box(rng, 0.6), 0});
    }
    std::vector<Detection> dets;
    const auto n = rng.integer(1, 5);
    for (std::int64_t d = 0; d < n; ++d)
      dets.push_back({{oracle::random_box(rng, 0.6), 0}, rng.uniform(), "s" + std::to_string(rng.integer(0, 1))});
    sort_detections(dets);
    for (double thr : {0.1, 0.25, 0.5}) {
      ++fixtures;
      disagreements += match_detections(dets, gts, 0, thr) != oracle::exhaustive_match(dets, gts, 0, thr);
    }
  }
  v.require(disagreements == 0, std::to_string(disagreements) + " fixtures disagree with the exhaustive oracle");
  const double a1 = average_precision({true}, 1).ap, a2 = average_precision({true, false}, 1).ap,
               a3 = average_precision({false, true}, 1).ap;
  v.require(a1 == 1.0 && a2 == 1.0 && a3 == 0.5, "AP fixtures " + fmt_f(a1) + "/" + fmt_f(a2) + "/" + fmt_f(a3));
  v.note(std::to_string(fixtures) + " fixtures (<= 5 dets/GTs) agree; AP fixtures 1/1/0.5 exact");
  return v;
}

// ---- 6 -----------------------------------------------------------------------

RunConfig desk_config(std::size_t steps, std::size_t train_scenes, std::uint64_t seed) {
  RunConfig cfg;
  cfg.max_steps = steps;
  cfg.eval_every = 0;
  cfg.lr = 2e-3;
  cfg.seed = seed;
  cfg.epochs = (steps * cfg.batch_size + train_scenes - 1) / train_scenes;
  cfg.milestones = {cfg.epochs * 2 / 3, cfg.epochs * 11 / 12};
  return cfg;
}

std::vector<PreparedScene> dataset(const RunConfig& cfg, std::uint64_t data_seed, std::size_t first, std::size_t n) {
  std::vector<PreparedScene> out;
  for (std::size_t i = first; i < first + n; ++i)
    out.push_back(prepare_sample(generate_scene(scene_seed(data_seed, i), cfg.scene_spec(), scene_id(i)), cfg));
  return out;
}

Verdict toy_overfit(std::size_t seeds) {
  Verdict v;
  std::vector<double> maps, times;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    const RunConfig cfg = desk_config(500, 8, seed);
    const auto scenes = dataset(cfg, 1, 0, 8);
    const auto t0 = Clock::now();
    Trainer trainer(cfg, scenes);
    const TrainResult r = trainer.run();
    const double t = seconds_since(t0);
    const double m = evaluate(trainer.detector(), trainer.store(), scenes, {}, cfg).report.map[0];
    std::printf("  toy seed %llu: %zu steps, loss %.3f -> %.3f, train mAP25 %.3f, %.0f s\n",
                static_cast<unsigned long long>(seed), r.steps.size(), r.steps.front().loss.total,
                r.steps.back().loss.total, m, t);
    std::fflush(stdout);
    maps.push_back(m);
    times.push_back(t);
  }
  const double med = median(maps), slowest = *std::max_element(times.begin(), times.end());
  v.require(med >= 0.90, "median train mAP25 " + fmt_f(med));
  v.require(slowest < 600.0, "slowest run " + fmt_f(slowest, 0) + " s");
  v.note("median train mAP25 " + fmt_f(med) + " over " + std::to_string(seeds) + " seeds, slowest run " +
         fmt_f(slowest, 0) + " s");
  return v;
}

// ---- 7 -----------------------------------------------------------------------

Verdict ablations(std::size_t seeds) {
  Verdict v;
  const std::vector<std::string> variants{"none",           "no-grm",          "no-gating",        "point-only",
                                          "single-scale-k=5", "single-scale-k=10", "single-scale-k=20"};
  std::map<std::string, std::vector<double>> scores;
  for (std::uint64_t seed = 0; seed < seeds; ++seed) {
    const RunConfig cfg = desk_config(500, 64, seed);
    const auto train = dataset(cfg, 2, 0, 64), val = dataset(cfg, 2, 1000, 64);
    const auto t0 = Clock::now();
    Trainer trainer(cfg, train);
    trainer.run();
    std::printf("  ablation seed %llu (%.0f s):", static_cast<unsigned long long>(seed), seconds_since(t0));
    for (const auto& name : variants) {
      const double m = evaluate(trainer.detector(), trainer.store(), val, Ablation::parse(name), cfg).report.map[0];
      scores[name].push_back(m);
      std::printf(" %s %.3f", name.c_str(), m);
    }
    std::printf("\n");
    std::fflush(stdout);
  }
  std::map<std::string, double> med;
  for (const auto& [name, s] : scores) med[name] = median(s);
  const double full = med["none"];
  v.require(full >= med["no-grm"], "full < no-grm");
  for (const char* k : {"single-scale-k=5", "single-scale-k=10", "single-scale-k=20"})
    v.require(full >= med[k], std::string("full < ") + k);
  v.require(full >= med["point-only"], "full < point-only");
  std::string table = "median val mAP25:";
  for (const auto& name : variants) table += " " + name + " " + fmt_f(med[name]);
  v.note(table);
  return v;
}

// ---- 8 -----------------------------------------------------------------------

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Verdict determinism() {
  Verdict v;
  RunConfig cfg = desk_config(20, 8, 3);
  const auto scenes = dataset(cfg, 1, 0, 8);
  Trainer a(cfg, scenes), b(cfg, scenes);
  const TrainResult ra = a.run(), rb = b.run();
  std::size_t loss_diff = 0, param_diff = 0;
  for (std::size_t i = 0; i < ra.steps.size(); ++i) loss_diff += ra.steps[i].loss.total != rb.steps[i].loss.total;
  for (const auto& [name, p] : a.store()) param_diff += b.store().at(name).value.storage() != p.value.storage();
  v.require(loss_diff == 0 && param_diff == 0, "training differs between runs (" + std::to_string(loss_diff) +
                                                   " losses, " + std::to_string(param_diff) + " tensors)");

  const fs::path dir = fs::temp_directory_path() / ("fusion3d_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  const Checkpoint ck = Checkpoint::capture(a.store(), cfg.to_json(), &a.optimizer(), R"({"epoch":1})");
  ck.save(dir / "a.ckpt");
  const Checkpoint loaded = Checkpoint::load(dir / "a.ckpt");
  loaded.save(dir / "b.ckpt");
  v.require(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"), "checkpoint save-load-save bytes differ");
  ParamStore restored;
  a.detector().init(restored, 12345);
  loaded.restore(restored);
  std::size_t ck_diff = 0;
  for (const auto& [name, p] : a.store()) ck_diff += restored.at(name).value.storage() != p.value.storage();
  v.require(ck_diff == 0, std::to_string(ck_diff) + " tensors differ after checkpoint restore");

  std::size_t archive_diff = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SceneSample s = generate_scene(seed, {}, scene_id(seed));
    write_scene(s, dir / "s1");
    const SceneSample r = read_scene(dir / "s1");
    write_scene(r, dir / "s2");
    archive_diff += !(r.cloud == s.cloud && r.camera == s.camera && r.boxes == s.boxes && r.id == s.id);
    for (const char* f : {"points.txt", "camera.json", "boxes.json", "meta.json"})
      archive_diff += slurp(dir / "s1" / f) != slurp(dir / "s2" / f);
  }
  fs::remove_all(dir);
  v.require(archive_diff == 0, std::to_string(archive_diff) + " scene archive mismatches");
  v.note(std::to_string(ra.steps.size()) + "-step training bit-identical twice; checkpoint and 20 scene archives round trip bit-exact");
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  init_logging();
  CLI::App app{"Acceptance criteria runner"};
  std::vector<int> only;
  std::size_t seeds = 5;
  app.add_option("--only", only, "run only these criteria (1-8)");
  app.add_option("--seeds", seeds, "training seeds for criteria 6 and 7")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8} : std::set<int>(only.begin(), only.end());

  struct Criterion {
    int id;
    const char* name;
    std::function<Verdict()> run;
  };
  const std::vector<Criterion> all{
      {1, "gradient suite", gradient_suite},
      {2, "rotated IoU oracle", iou_oracle},
      {3, "geometry identities", geometry_identities},
      {4, "module identities", module_identities},
      {5, "evaluator oracle", evaluator_oracle},
      {6, "toy overfit", [&] { return toy_overfit(seeds); }},
      {7, "directional ablations", [&] { return ablations(seeds); }},
      {8, "determinism and persistence", determinism},
  };
  bool ok = true;
  for (const auto& c : all) {
    if (!selected.count(c.id)) continue;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail = std::string("error: ") + e.what();
    }
    std::printf("criterion %d %s: %s (%s; %.1f s)\n", c.id, v.pass ? "PASS" : "FAIL", c.name, v.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
    ok &= v.pass;
  }
  return ok ? 0 : 1;
}
