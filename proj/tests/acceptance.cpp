// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "fiberseg/baselines.hpp"
#include "fiberseg/infer.hpp"
#include "fiberseg/metrics.hpp"
#include "fiberseg/phantom.hpp"
#include "fiberseg/pipeline.hpp"
#include "fiberseg/train.hpp"
#include "grad_harness.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace fiberseg;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

// LR phantom family for the baseline ordering: heavier blur and noise than the
// module defaults, so that global thresholds degrade the way real LR scans do.
PhantomSpec lr_spec(std::uint64_t seed) {
  PhantomSpec s;
  s.dims = {72, 72, 72};
  s.voxel_size_um = 8.3;
  s.psf_sigma_um = 6.5;
  s.noise_sigma = 0.08;
  s.seed = seed;
  return s;
}

PhantomSpec mr_spec(std::int64_t n, std::uint64_t seed) {
  PhantomSpec s;
  s.dims = {n, n, n};
  s.seed = seed;
  return s;
}

// Phantoms generated along the way, for criterion 8.
struct Generated {
  std::string name;
  Volume gray;
  LabelVolume labels;
};
std::vector<Generated> g_phantoms;

RenderedPair make_phantom(const std::string& name, const PhantomSpec& spec) {
  RenderedPair p = generate(spec);
  g_phantoms.push_back({name, p.gray, p.labels});
  return p;
}

double dice_of(const LabelVolume& gt, const LabelVolume& seg) { return dice(confusion(gt, seg)); }

double train_and_score(const std::string& preset_name, const Volume& train_gray, const LabelVolume& train_labels,
                       const Volume& eval_gray, const LabelVolume& eval_labels, std::uint64_t seed = 42) {
  const Preset p = preset(preset_name);
  Model model = build_model(p.model, seed);
  TrainConfig cfg = p.train;
  cfg.seed = seed;
  train_loop(normalize(train_gray), train_labels, model, cfg);
  return dice_of(eval_labels, normalize_then_predict(model, eval_gray).seg);
}

// ---------------------------------------------------------------------------

Outcome dice_oracle() {
  const auto t0 = Clock::now();
  double worst = 0.0;
  int mismatches = 0;
  for (int i = 0; i < 100; ++i) {
    const LabelVolume gt = testutil::random_mask({16, 16, 16}, 1000 + i, 0.05 + 0.009 * i);
    const LabelVolume pred = testutil::random_mask({16, 16, 16}, 5000 + i, 0.9 - 0.008 * i);
    const ConfusionCounts a = confusion(gt, pred);
    const ConfusionCounts b = oracle::loop_tally(gt, pred);
    const double da = dice(a);
    const double db = 2.0 * b.tp / static_cast<double>(2 * b.tp + b.fp + b.fn);
    if (!(a == b) || da != db) ++mismatches;
    worst = std::max(worst, std::abs(da - db));
  }
  const double secs = seconds_since(t0);
  return {mismatches == 0 && secs < 1.0, fmt("100 pairs, %d mismatches, %.3f s", mismatches, secs)};
}

Outcome otsu_exactness() {
  int mismatches = 0;
  for (int i = 0; i < 50; ++i) {
    Volume v = testutil::random_volume({10, 11, 12}, 200 + i);
    if (i % 5 == 0) {
      // few distinct levels: many cuts tie exactly
      for (auto& x : v.data()) x = std::round(x * 2.0f) / 2.0f;
    } else if (i % 5 == 1) {
      std::mt19937_64 rng(i);
      std::normal_distribution<float> g(0.0f, 0.1f);
      for (std::size_t k = 0; k < v.size(); ++k) v[k] = (k % 9 == 0 ? 1.0f : 0.2f) + g(rng);
    }
    if (otsu_threshold(v).cut != oracle::otsu_oracle(v, kDefaultHistogramBins)) ++mismatches;
  }
  return {mismatches == 0, fmt("50 volumes, %d mismatches", mismatches)};
}

Outcome gradient_suite() {
  using namespace gradcheck;
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  auto note = [&](const std::string& what, const GradCheckResult& r) {
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = what + ":" + r.worst;
    }
  };
  std::mt19937_64 shapes(77);
  auto extent = [&](int lo, int hi) { return std::uniform_int_distribution<std::int64_t>(lo, hi)(shapes); };
  for (int trial = 0; trial < 3; ++trial) {
    const std::uint64_t s = 100 * trial;
    for (int dims : {2, 3}) {
      const std::int64_t cin = extent(1, 4), cout = extent(1, 4);
      Conv<double> conv(dims, cin, cout, 3);
      fiberseg::Rng rng(s + 1);
      conv.init(rng);
      std::vector<std::int64_t> shape{extent(1, 2), cin, extent(2, 5), extent(2, 5)};
      if (dims == 3) shape.push_back(extent(2, 4));
      Tensor<double> x = random_tensor(shape, s + 2);
      note("conv" + std::to_string(dims) + "d",
           check_layer(
               x, [&](const Tensor<double>& t) { return conv.forward(t); },
               [&](const Tensor<double>& d) { return conv.backward(d); }, {{"w", &conv.weight}, {"b", &conv.bias}},
               s + 3));
    }
    {
      const std::int64_t c = extent(1, 4);
      BatchNorm<double> bn(c);
      for (auto& g : bn.gamma.value) g = 0.5 + 0.1 * extent(0, 10);
      Tensor<double> x = random_tensor({2, c, extent(2, 4), extent(2, 4)}, s + 4);
      note("batchnorm", check_layer(
                            x, [&](const Tensor<double>& t) { return bn.forward(t, Mode::kTrain); },
                            [&](const Tensor<double>& d) { return bn.backward(d); },
                            {{"gamma", &bn.gamma}, {"beta", &bn.beta}}, s + 5));
    }
    {
      Relu<double> relu;
      Tensor<double> x = random_tensor({1, extent(1, 3), extent(2, 5), extent(2, 5)}, s + 6, 0.05);
      note("relu", check_layer(
                       x, [&](const Tensor<double>& t) { return relu.forward(t); },
                       [&](const Tensor<double>& d) { return relu.backward(d); }, {}, s + 7));
    }
    for (int dims : {2, 3}) {
      const std::int64_t win = extent(1, 3), wout = trial == 0 ? win : extent(1, 4);
      ResidualBlock<double> block(dims, win, wout);
      fiberseg::Rng rng(s + 8);
      block.init(rng);
      std::vector<std::int64_t> shape{2, win, extent(2, 4), extent(2, 4)};
      if (dims == 3) shape.push_back(extent(2, 3));
      Tensor<double> x = random_tensor(shape, s + 9);
      std::vector<std::pair<std::string, Tensor<double>*>> params{
          {"conv1.w", &block.conv1.weight}, {"conv2.w", &block.conv2.weight}, {"bn.gamma", &block.bn.gamma}};
      if (block.has_projection()) params.push_back({"proj.w", &block.projection.weight});
      note("residual" + std::to_string(dims) + "d",
           check_layer(
               x, [&](const Tensor<double>& t) { return block.forward(t, Mode::kTrain); },
               [&](const Tensor<double>& d) { return block.backward(d); }, params, s + 10));
    }
    {
      Tensor<double> logits = random_tensor({extent(1, 3), 2, extent(2, 5), extent(2, 5)}, s + 11);
      std::vector<std::uint8_t> labels(static_cast<std::size_t>(logits.size() / 2));
      for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = extent(0, 1);
      auto loss = [&] { return softmax_cross_entropy<double>(logits, labels, nullptr); };
      auto analytic = [&] {
        Tensor<double> d;
        softmax_cross_entropy<double>(logits, labels, &d);
        logits.grad = d.value;
      };
      note("cross_entropy", grad_check(loss, analytic, {{"logits", &logits}}, kStep));
    }
  }
  const double secs = seconds_since(t0);
  return {worst < kTol && secs < 60.0,
          fmt("max rel error %.2e at %s, %.1f s", worst, worst_name.c_str(), secs)};
}

Outcome eigensolver() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  double worst_inv = 0.0, worst_root = 0.0;
  for (int i = 0; i < 500; ++i) {
    const SymMat3 m{u(rng), u(rng), u(rng), u(rng), u(rng), u(rng)};
    const auto e = eig3_symmetric(m);
    const auto r = oracle::cubic_roots(m);
    const double scale = std::max({std::abs(e[0]), std::abs(e[1]), std::abs(e[2]), 1e-300});
    const double tr = trace(m), det = determinant(m);
    worst_inv = std::max(worst_inv, std::abs(e[0] + e[1] + e[2] - tr) / std::max(std::abs(tr), scale));
    worst_inv = std::max(worst_inv, std::abs(e[0] * e[1] * e[2] - det) / std::max(std::abs(det), scale * scale * scale));
    for (int k = 0; k < 3; ++k) worst_root = std::max(worst_root, std::abs(e[k] - static_cast<double>(r[k])) / scale);
  }
  return {worst_inv < 1e-6 && worst_root < 1e-8,
          fmt("trace/det rel %.1e, root rel %.1e", worst_inv, worst_root)};
}

Outcome shape_preservation() {
  std::mt19937_64 rng(5);
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<std::int64_t>(lo, hi)(rng); };
  int checked = 0, bad = 0;
  for (int dims : {2, 3}) {
    for (Variant v : {Variant::kShallow, Variant::kDeep}) {
      Model m = build_model(ModelConfig::standard(dims, v), 1);
      for (int i = 0; i < 20; ++i) {
        std::vector<std::int64_t> shape{pick(1, 2), 1};
        for (int a = 0; a < dims; ++a) shape.push_back(dims == 2 ? pick(1, 40) : pick(1, 12));
        ad::Tensor<float> x(shape);
        for (auto& val : x.value) val = static_cast<float>(pick(-100, 100)) / 50.0f;
        const auto y = m.forward(x, ad::Mode::kEval);
        ++checked;
        const bool same = y.shape.size() == shape.size() && y.shape[1] == 2 &&
                          std::equal(shape.begin() + 2, shape.end(), y.shape.begin() + 2) && y.shape[0] == shape[0];
        bad += !same;
      }
    }
  }
  return {bad == 0, fmt("%d shapes over 4 architectures, %d mismatched", checked, bad)};
}

Outcome lr_ordering() {
  const auto t0 = Clock::now();
  const RenderedPair train = make_phantom("lr-train", lr_spec(1));
  const RenderedPair eval = make_phantom("lr-eval", lr_spec(2));
  const double d_otsu = dice_of(eval.labels, segment_otsu(eval.gray).seg);
  const double d_frangi =
      dice_of(eval.labels, segment_frangi(train.gray, train.labels, eval.gray, frangi_defaults_for_pitch(8.3)).seg);
  const double d_rf = dice_of(eval.labels, segment_forest(train.gray, train.labels, eval.gray, ForestConfig{}).result.seg);
  const double d_2d = train_and_score("lr2d-shallow", train.gray, train.labels, eval.gray, eval.labels);
  const double d_3d = train_and_score("lr3d-shallow", train.gray, train.labels, eval.gray, eval.labels);
  const double secs = seconds_since(t0);
  const bool ok = d_otsu < d_frangi && d_frangi < d_rf && d_rf < d_2d && d_2d <= d_3d && d_3d >= 0.60 && secs < 45 * 60;
  return {ok, fmt("otsu %.3f, frangi %.3f, rf %.3f, 2d %.3f, 3d %.3f, %.0f s", d_otsu, d_frangi, d_rf, d_2d, d_3d, secs)};
}

Outcome mr_performance() {
  const RenderedPair train = make_phantom("mr-train", mr_spec(128, 1));
  const RenderedPair eval = make_phantom("mr-eval", mr_spec(128, 2));
  const double d_otsu = dice_of(eval.labels, segment_otsu(eval.gray).seg);
  const double d_net = train_and_score("mr2d-shallow", train.gray, train.labels, eval.gray, eval.labels);
  return {d_net >= 0.80 && d_otsu >= 0.55 && d_otsu < d_net, fmt("otsu %.3f, shallow 2d %.3f", d_otsu, d_net)};
}

Outcome best_dominates() {
  std::string worst;
  bool ok = !g_phantoms.empty();
  for (const auto& p : g_phantoms) {
    const double d_otsu = dice_of(p.labels, segment_otsu(p.gray).seg);
    const double d_best = dice_of(p.labels, segment_best_threshold(p.gray, p.labels).seg);
    ok = ok && d_best >= d_otsu;
    worst += fmt("%s %.3f>=%.3f ", p.name.c_str(), d_best, d_otsu);
  }
  return {ok, fmt("%zu phantoms: %s", g_phantoms.size(), worst.c_str())};
}

Outcome stitching() {
  Model m = build_model(ModelConfig::standard(3, Variant::kShallow), 3);
  const Prediction p = predict_3d(m, testutil::random_volume({10, 10, 10}, 4), {4, 4, 4}, Dims{2, 2, 2});
  int bad_counts = 0;
  for (std::int64_t z = 0; z < 10; ++z)
    for (std::int64_t y = 0; y < 10; ++y)
      for (std::int64_t x = 0; x < 10; ++x) {
        std::uint32_t n = 0;
        for (std::int64_t oz = 0; oz <= 6; ++oz)
          for (std::int64_t oy = 0; oy <= 6; ++oy)
            for (std::int64_t ox = 0; ox <= 6; ++ox) {
              const bool origin = (oz % 2 == 0 || oz == 6) && (oy % 2 == 0 || oy == 6) && (ox % 2 == 0 || ox == 6);
              n += origin && z >= oz && z < oz + 4 && y >= oy && y < oy + 4 && x >= ox && x < ox + 4;
            }
        bad_counts += p.coverage.at(z, y, x) != n;
      }
  Model c = build_model(ModelConfig::standard(3, Variant::kShallow), 3);
  std::fill(c.head.weight.value.begin(), c.head.weight.value.end(), 0.0f);
  c.head.bias.value = {0.3f, -0.4f};
  const Prediction q = predict_3d(c, testutil::random_volume({9, 11, 10}, 5), {4, 5, 4}, Dims{3, 2, 2});
  float lo = q.prob[0], hi = q.prob[0];
  for (float v : q.prob.data()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return {bad_counts == 0 && hi - lo < 1e-6f, fmt("%d coverage mismatches, constant-model spread %.1e", bad_counts, hi - lo)};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome determinism() {
  testutil::TempDir dir("acceptance");
  PhantomSpec spec = mr_spec(40, 17);
  std::ofstream(dir.file("spec.txt")) << format_phantom_spec(spec);
  bool ok = true;
  for (const char* stem : {"a", "b"}) ok = ok && testutil::run_cli("phantom " + dir.file("spec.txt") + " " + dir.file(stem)) == 0;
  const bool phantom_same = ok && slurp(dir.file("a_gray.vxg")) == slurp(dir.file("b_gray.vxg")) &&
                            slurp(dir.file("a_label.vxg")) == slurp(dir.file("b_label.vxg"));
  const std::string common = "train " + dir.file("a_gray.vxg") + " " + dir.file("a_label.vxg") + " ";
  const std::string flags = " --preset mr3d-shallow --iterations 5 --seed 7";
  for (const char* ck : {"m1.ckpt", "m2.ckpt"}) {
    ok = ok && testutil::run_cli(common + dir.file(ck) + flags, dir.file(std::string(ck) + ".log")) == 0;
  }
  const std::string c1 = slurp(dir.file("m1.ckpt"));
  const bool ckpt_same = ok && !c1.empty() && c1 == slurp(dir.file("m2.ckpt"));
  return {phantom_same && ckpt_same,
          fmt("phantom bytes %s, checkpoint bytes %s", phantom_same ? "identical" : "differ", ckpt_same ? "identical" : "differ")};
}

Outcome phantom_statistics() {
  const RenderedPair p = make_phantom("mr-96", mr_spec(96, 42));
  std::size_t fiber = 0;
  for (auto v : p.labels.data()) fiber += v;
  const double fraction = static_cast<double>(fiber) / p.labels.size();
  const PhantomSpec spec = mr_spec(32, 1);
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> jitter(-0.5, 0.5);
  int rows = 0, bad_rows = 0;
  double width_sum = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const double cy = (16 + jitter(rng)) * spec.voxel_size_um, cx = (16 + jitter(rng)) * spec.voxel_size_um;
    FiberScene scene;
    scene.box_max = spec.extent_um();
    scene.fibers.push_back({{-50, cy, cx}, {200, cy, cx}, spec.fiber_diameter_um / 2});
    const RenderedPair r = rasterize(scene, spec);
    const auto row = static_cast<std::int64_t>(std::floor(cy / spec.voxel_size_um));
    for (std::int64_t z = 2; z < 30; ++z) {
      int w = 0;
      for (std::int64_t x = 0; x < 32; ++x) w += r.labels.at(z, row, x);
      ++rows;
      bad_rows += w < 3 || w > 4;
      width_sum += w;
    }
  }
  const double mean_width = width_sum / rows;
  const bool ok = std::abs(fraction - kDefaultFiberVolumeFraction) <= 0.005 && bad_rows == 0 &&
                  std::abs(mean_width - 13.0 / 3.9) < 0.5;
  return {ok, fmt("label fraction %.4f (target %.3f), rows 3-4 wide %d/%d, mean width %.2f vox", fraction,
                  kDefaultFiberVolumeFraction, rows - bad_rows, rows, mean_width)};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  // Criterion 8 inspects the phantoms generated by 6, 7 and 11, so it runs last.
  const std::vector<Criterion> order{
      {1, "dice oracle equivalence", dice_oracle},
      {2, "otsu exactness", otsu_exactness},
      {3, "gradient suite", gradient_suite},
      {4, "eigensolver", eigensolver},
      {5, "shape preservation", shape_preservation},
      {9, "stitching invariants", stitching},
      {10, "determinism", determinism},
      {11, "phantom statistics", phantom_statistics},
      {6, "LR baseline ordering", lr_ordering},
      {7, "MR performance", mr_performance},
      {8, "best-threshold dominance", best_dominates},
  };
  std::vector<std::string> lines(12);
  int failures = 0;
  for (const auto& c : order) {
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    lines[c.id] = fmt("%s %2d %s: %s", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
    std::fprintf(stderr, "[%6.1f s] %s\n", seconds_since(t0), lines[c.id].c_str());
  }
  for (int id = 1; id <= 11; ++id) std::printf("%s\n", lines[id].c_str());
  return failures == 0 ? 0 : 1;
}
