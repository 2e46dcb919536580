#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <vector>

#include "selfseg/errors.hpp"
#include "selfseg/metrics.hpp"
#include "selfseg/model.hpp"
#include "selfseg/phantom.hpp"
#include "selfseg/rng.hpp"
#include "selfseg/volume_ops.hpp"

using namespace selfseg;

namespace {

std::map<Phase, ImageGrid> one_phase(const ImageGrid& g) {
  std::map<Phase, ImageGrid> m;
  m.emplace(Phase::venous, g);
  return m;
}

ImageGrid random_image(Dims dims, Rng& rng, double lo = 0.0, double hi = 100.0) {
  ImageGrid g(dims, {1.0, 1.0, 1.0});
  for (std::size_t i = 0; i < g.size(); ++i) g.flat(i) = static_cast<float>(rng.uniform(lo, hi));
  return g;
}

ProbMap softmax_probs(const std::vector<double>& logits, Dims dims, const ClassTable& t) {
  const std::size_t k = t.size();
  const std::size_t n = voxel_count(dims);
  ProbMap p;
  p.classes = t;
  for (std::size_t c = 0; c < k; ++c) p.channels.emplace_back(dims, Spacing{1, 1, 1}, 0.0f);
  for (std::size_t v = 0; v < n; ++v) {
    double mx = logits[v * k];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, logits[v * k + c]);
    double sum = 0.0;
    std::vector<double> e(k);
    for (std::size_t c = 0; c < k; ++c) sum += (e[c] = std::exp(logits[v * k + c] - mx));
    for (std::size_t c = 0; c < k; ++c)
      p.channels[c].flat(v) = static_cast<float>(e[c] / sum);
  }
  return p;
}

/// Loss evaluated directly from logits in full double precision, for the
/// finite-difference oracle (avoids float32 quantization of ProbMap).
double loss_from_logits(const std::vector<double>& logits, const LabelMap& target,
                        const LossConfig& cfg) {
  const std::size_t k = target.classes.size();
  const std::size_t n = target.grid.size();
  std::vector<double> probs(n * k);
  for (std::size_t v = 0; v < n; ++v) {
    double mx = logits[v * k];
    for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, logits[v * k + c]);
    double sum = 0.0;
    for (std::size_t c = 0; c < k; ++c) sum += (probs[v * k + c] = std::exp(logits[v * k + c] - mx));
    for (std::size_t c = 0; c < k; ++c) probs[v * k + c] /= sum;
  }
  double dice_term = 0.0;
  std::size_t n_fg = 0;
  for (std::size_t c = 1; c < k; ++c) {
    double sum_pg = 0.0, sum_p = 0.0, sum_g = 0.0;
    for (std::size_t v = 0; v < n; ++v) {
      const double g = target.grid.flat(v) == c ? 1.0 : 0.0;
      sum_pg += probs[v * k + c] * g;
      sum_p += probs[v * k + c];
      sum_g += g;
    }
    dice_term += (2.0 * sum_pg + cfg.epsilon) / (sum_p + sum_g + cfg.epsilon);
    ++n_fg;
  }
  const double ldice = 1.0 - dice_term / static_cast<double>(n_fg);
  double lce = 0.0;
  for (std::size_t v = 0; v < n; ++v) {
    const double pt = probs[v * k + target.grid.flat(v)];
    lce += -std::log(std::max(pt, cfg.ce_clamp));
  }
  lce /= static_cast<double>(n);
  return cfg.dice_weight * ldice + cfg.ce_weight * lce;
}

}  // namespace

TEST_CASE("extract_features: constant image gives constant mean and zero std") {
  ImageGrid g({4, 4, 4}, {1, 1, 1}, 12.5f);
  FeatureConfig cfg{2, {Phase::venous}};
  const FeatureMatrix fm = extract_features(one_phase(g), cfg);
  REQUIRE(fm.n_features == 4);
  for (std::size_t v = 0; v < fm.n_voxels; ++v) {
    CHECK(fm.at(v, 0) == doctest::Approx(12.5));
    CHECK(fm.at(v, 1) == doctest::Approx(12.5));
    CHECK(fm.at(v, 2) == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(fm.at(v, 3) == doctest::Approx(1.0));
  }
}

TEST_CASE("extract_features: radius 0 degenerates to the raw intensity") {
  Rng rng(3);
  const ImageGrid g = random_image({3, 3, 2}, rng);
  const FeatureMatrix fm = extract_features(one_phase(g), FeatureConfig{0, {Phase::venous}});
  for (std::size_t v = 0; v < fm.n_voxels; ++v) {
    CHECK(fm.at(v, 1) == doctest::Approx(fm.at(v, 0)));
    CHECK(fm.at(v, 2) == doctest::Approx(0.0).epsilon(1e-9));
  }
}

TEST_CASE("extract_features: center voxel matches a direct 27-voxel window") {
  Rng rng(4);
  const ImageGrid g = random_image({5, 5, 5}, rng);
  const FeatureMatrix fm = extract_features(one_phase(g), FeatureConfig{1, {Phase::venous}});
  const std::size_t center = g.index(2, 2, 2);
  double sum = 0.0, sum2 = 0.0;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const double v = g(2 + dx, 2 + dy, 2 + dz);
        sum += v;
        sum2 += v * v;
      }
  const double mean = sum / 27.0;
  const double var = std::max(0.0, sum2 / 27.0 - mean * mean);
  CHECK(fm.at(center, 1) == doctest::Approx(mean).epsilon(1e-10));
  CHECK(fm.at(center, 2) == doctest::Approx(std::sqrt(var)).epsilon(1e-8));
}

TEST_CASE("extract_features: edge windows clamp to the grid") {
  Rng rng(5);
  const ImageGrid g = random_image({4, 3, 2}, rng);
  const FeatureMatrix fm = extract_features(one_phase(g), FeatureConfig{1, {Phase::venous}});
  double sum = 0.0;
  int count = 0;  // corner (0,0,0): window spans [0,1]^3 clamped
  for (int dz = 0; dz <= 1; ++dz)
    for (int dy = 0; dy <= 1; ++dy)
      for (int dx = 0; dx <= 1; ++dx) {
        sum += g(dx, dy, dz);
        ++count;
      }
  CHECK(fm.at(0, 1) == doctest::Approx(sum / count).epsilon(1e-10));
}

TEST_CASE("extract_features: missing phase and mismatched dims fail loudly") {
  Rng rng(6);
  const ImageGrid g = random_image({3, 3, 3}, rng);
  CHECK_THROWS_AS(
      extract_features(one_phase(g), FeatureConfig{1, {Phase::venous, Phase::pancreatic}}),
      MissingPhaseError);
  std::map<Phase, ImageGrid> images;
  images.emplace(Phase::venous, g);
  images.emplace(Phase::pancreatic, random_image({4, 3, 3}, rng));
  CHECK_THROWS_AS(
      extract_features(images, FeatureConfig{1, {Phase::venous, Phase::pancreatic}}),
      DataMismatchError);
}

TEST_CASE("forward: zero weights give the uniform distribution") {
  LinearSoftmaxModel m;
  m.classes = ClassTable::seg3();
  m.features = FeatureConfig{1, {Phase::venous}};
  m.feat_mean.assign(4, 0.0);
  m.feat_std.assign(4, 1.0);
  m.weights.assign(3 * 4, 0.0);
  Rng rng(7);
  const ImageGrid g = random_image({4, 4, 2}, rng);
  const ProbMap p = forward(m, extract_features(one_phase(g), m.features), g.dims(), g.spacing());
  p.validate();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t v = 0; v < p.voxels(); ++v)
      CHECK(p.channels[c].flat(v) == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
}

TEST_CASE("forward: dominant bias weight saturates its class") {
  LinearSoftmaxModel m;
  m.classes = ClassTable::seg3();
  m.features = FeatureConfig{0, {Phase::venous}};
  m.feat_mean.assign(4, 0.0);
  m.feat_std.assign(4, 1.0);
  m.weights.assign(3 * 4, 0.0);
  m.weights[2 * 4 + 3] = 50.0;  // class 2, bias feature
  Rng rng(8);
  const ImageGrid g = random_image({3, 3, 1}, rng, 0.0, 1.0);
  const ProbMap p = forward(m, extract_features(one_phase(g), m.features), g.dims(), g.spacing());
  for (std::size_t v = 0; v < p.voxels(); ++v)
    CHECK(p.channels[2].flat(v) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("forward: output is a normalized ProbMap for random weights") {
  Rng rng(9);
  LinearSoftmaxModel m;
  m.classes = ClassTable::seg3();
  m.features = FeatureConfig{1, {Phase::venous}};
  m.feat_mean.assign(4, 50.0);
  m.feat_std.assign(4, 30.0);
  m.feat_mean[3] = 0.0;
  m.feat_std[3] = 1.0;
  m.weights.resize(3 * 4);
  for (double& w : m.weights) w = rng.normal(0.0, 0.7);
  const ImageGrid g = random_image({5, 4, 3}, rng);
  const ProbMap p = forward(m, extract_features(one_phase(g), m.features), g.dims(), g.spacing());
  p.validate();  // [0,1] and sums to 1 within tolerance
}

TEST_CASE("loss: perfect one-hot prediction has near-zero Dice loss") {
  LabelMap target;
  target.classes = ClassTable::seg3();
  target.grid = ByteGrid({4, 4, 2}, {1, 1, 1}, 0);
  for (int x = 0; x < 4; ++x) target.grid(x, 0, 0) = 1;
  target.grid(0, 1, 0) = 2;
  ProbMap p;
  p.classes = target.classes;
  for (int c = 0; c < 3; ++c) p.channels.emplace_back(Dims{4, 4, 2}, Spacing{1, 1, 1}, 0.0f);
  for (std::size_t v = 0; v < p.voxels(); ++v) p.channels[target.grid.flat(v)].flat(v) = 1.0f;
  LossConfig cfg;
  cfg.ce_weight = 0.0;
  const auto [loss, grad] = loss_and_grad(p, target, cfg);
  CHECK(loss == doctest::Approx(0.0).epsilon(1e-4));
  CHECK(loss >= 0.0);
  (void)grad;
}

TEST_CASE("loss: uniform probabilities give ln 3 cross-entropy") {
  LabelMap target;
  target.classes = ClassTable::seg3();
  target.grid = ByteGrid({3, 3, 3}, {1, 1, 1}, 0);
  target.grid(0, 0, 0) = 1;
  target.grid(1, 0, 0) = 2;
  ProbMap p;
  p.classes = target.classes;
  for (int c = 0; c < 3; ++c)
    p.channels.emplace_back(Dims{3, 3, 3}, Spacing{1, 1, 1}, 1.0f / 3.0f);
  LossConfig cfg;
  cfg.dice_weight = 0.0;
  const auto [loss, grad] = loss_and_grad(p, target, cfg);
  CHECK(loss == doctest::Approx(std::log(3.0)).epsilon(1e-5));
  (void)grad;
}

TEST_CASE("loss: analytic gradient matches central differences on 50 random 4^3 grids") {
  const Dims dims{4, 4, 4};
  const std::size_t n = voxel_count(dims);
  const ClassTable& t = ClassTable::seg3();
  const std::size_t k = t.size();
  for (int trial = 0; trial < 50; ++trial) {
    Rng rng(500 + trial);
    std::vector<double> logits(n * k);
    for (double& z : logits) z = rng.normal(0.0, 1.5);
    LabelMap target;
    target.classes = t;
    target.grid = ByteGrid(dims, {1, 1, 1}, 0);
    for (std::size_t v = 0; v < n; ++v)
      target.grid.flat(v) = static_cast<std::uint8_t>(rng.below(k));
    LossConfig cfg;
    cfg.dice_weight = rng.uniform(0.2, 2.0);
    cfg.ce_weight = rng.uniform(0.2, 2.0);

    const ProbMap probs = softmax_probs(logits, dims, t);
    const auto [loss, grad] = loss_and_grad(probs, target, cfg);
    (void)loss;

    const double h = 1e-5;
    double num2 = 0.0, den2 = 0.0;
    for (std::size_t i = 0; i < n * k; ++i) {
      std::vector<double> zp = logits, zm = logits;
      zp[i] += h;
      zm[i] -= h;
      const double fd =
          (loss_from_logits(zp, target, cfg) - loss_from_logits(zm, target, cfg)) / (2.0 * h);
      num2 += (grad[i] - fd) * (grad[i] - fd);
      den2 += fd * fd;
    }
    const double rel = std::sqrt(num2) / std::max(std::sqrt(den2), 1e-12);
    REQUIRE(rel <= 1e-4);
  }
}

TEST_CASE("loss: Dice term bounded, CE nonnegative on random inputs") {
  Rng rng(31);
  const Dims dims{4, 3, 3};
  const ClassTable& t = ClassTable::seg3();
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> logits(voxel_count(dims) * t.size());
    for (double& z : logits) z = rng.normal(0.0, 2.0);
    LabelMap target;
    target.classes = t;
    target.grid = ByteGrid(dims, {1, 1, 1}, 0);
    for (std::size_t v = 0; v < target.grid.size(); ++v)
      target.grid.flat(v) = static_cast<std::uint8_t>(rng.below(3));
    const ProbMap p = softmax_probs(logits, dims, t);
    LossConfig dice_only;
    dice_only.ce_weight = 0.0;
    LossConfig ce_only;
    ce_only.dice_weight = 0.0;
    const double ld = loss_and_grad(p, target, dice_only).first;
    const double lc = loss_and_grad(p, target, ce_only).first;
    CHECK(ld >= 0.0);
    CHECK(ld <= 1.0 + 1e-3);
    CHECK(lc >= 0.0);
  }
}

TEST_CASE("loss config: both weights zero is invalid") {
  LossConfig cfg;
  cfg.dice_weight = 0.0;
  cfg.ce_weight = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

namespace {

/// Small noiseless phantom set: deterministic, linearly separable intensities.
std::vector<TrainingExample> separable_cases(int n, std::uint64_t seed0) {
  PhantomSpec spec;
  spec.noise_sigma = {0.0, 0.0, 0.0};
  spec.calibration = {0.0, 0.0};
  std::vector<TrainingExample> cases;
  for (int i = 0; i < n; ++i) {
    PhantomCase pc = generate_case(spec, mix_seed(seed0, (std::uint64_t)i));
    TrainingExample ex;
    ex.id = "case_" + std::to_string(i);
    ex.images = std::move(pc.images);
    ex.labels = std::move(pc.truth_seg);
    cases.push_back(std::move(ex));
  }
  return cases;
}

FeatureConfig three_phase_features() {
  return FeatureConfig{1, {Phase::non_contrast, Phase::pancreatic, Phase::venous}};
}

}  // namespace

TEST_CASE("train: deterministic for a fixed seed") {
  const auto cases = separable_cases(3, 1);
  TrainConfig tc;
  tc.epochs = 4;
  tc.steps_per_epoch = 6;
  tc.batch_size = 128;
  tc.seed = 42;
  const TrainResult a = train(cases, ClassTable::seg3(), three_phase_features(), tc, LossConfig{});
  const TrainResult b = train(cases, ClassTable::seg3(), three_phase_features(), tc, LossConfig{});
  CHECK(a.model.weights == b.model.weights);
  CHECK(a.model.feat_mean == b.model.feat_mean);
  CHECK(a.log.selected_epoch == b.log.selected_epoch);
}

TEST_CASE("train: separable phantoms reach tumor Dice >= 0.90 on the training set") {
  const auto cases = separable_cases(4, 2);
  TrainConfig tc;
  tc.seed = 7;  // defaults otherwise: 30 epochs
  const TrainResult res =
      train(cases, ClassTable::seg3(), three_phase_features(), tc, LossConfig{});
  std::vector<double> dices;
  for (const auto& ex : cases) {
    const Prediction pred = predict(res.model, ex.images, true);
    dices.push_back(dice(*pred.labels, ex.labels, ClassTable::kTumor));
  }
  double mean = 0.0;
  for (double d : dices) mean += d;
  mean /= static_cast<double>(dices.size());
  CHECK(mean >= 0.90);
  // Training made progress on the separable set.
  CHECK(res.log.epochs.back().train_loss < res.log.epochs.front().train_loss);
}

TEST_CASE("train: the selected epoch maximizes the selection metric") {
  const auto cases = separable_cases(4, 3);
  TrainConfig tc;
  tc.epochs = 8;
  tc.steps_per_epoch = 8;
  tc.batch_size = 128;
  tc.seed = 11;
  const TrainResult res =
      train(cases, ClassTable::seg3(), three_phase_features(), tc, LossConfig{});
  REQUIRE(res.log.selected_epoch >= 1);
  const auto metric = [](const EpochRecord& e) { return e.val_dice[ClassTable::kTumor]; };
  for (const EpochRecord& e : res.log.epochs) {
    CHECK(metric(e) <= res.log.selected_metric);
    if (e.epoch < res.log.selected_epoch)  // ties keep the earlier epoch
      CHECK(metric(e) < res.log.selected_metric);
  }
}

TEST_CASE("train: frozen normalization makes train-split features standard") {
  const auto cases = separable_cases(3, 4);
  TrainConfig tc;
  tc.epochs = 2;
  tc.steps_per_epoch = 4;
  tc.batch_size = 64;
  tc.validation_fraction = 0.0;  // stats then cover every case
  tc.seed = 5;
  const FeatureConfig fc = three_phase_features();
  const TrainResult res = train(cases, ClassTable::seg3(), fc, tc, LossConfig{});
  const std::size_t nf = fc.feature_count();
  std::vector<double> sum(nf, 0.0), sum2(nf, 0.0);
  std::size_t n = 0;
  for (const auto& ex : cases) {
    const FeatureMatrix fm = extract_features(ex.images, fc);
    for (std::size_t v = 0; v < fm.n_voxels; ++v, ++n)
      for (std::size_t f = 0; f < nf; ++f) {
        const double z = (fm.at(v, f) - res.model.feat_mean[f]) / res.model.feat_std[f];
        sum[f] += z;
        sum2[f] += z * z;
      }
  }
  for (std::size_t f = 0; f + 1 < nf; ++f) {  // bias feature exempt
    const double mean = sum[f] / static_cast<double>(n);
    const double var = sum2[f] / static_cast<double>(n) - mean * mean;
    if (res.model.feat_std[f] == 1.0 && res.model.feat_mean[f] == 0.0) continue;  // clamped
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(std::abs(std::sqrt(std::max(var, 0.0)) - 1.0) <= 1e-6);
  }
}

TEST_CASE("train: fewer than two cases requires explicit zero validation fraction") {
  const auto cases = separable_cases(1, 6);
  TrainConfig tc;
  tc.epochs = 1;
  tc.steps_per_epoch = 2;
  tc.batch_size = 32;
  CHECK_THROWS_AS(train(cases, ClassTable::seg3(), three_phase_features(), tc, LossConfig{}),
                  ConfigError);
  tc.validation_fraction = 0.0;
  const TrainResult res =
      train(cases, ClassTable::seg3(), three_phase_features(), tc, LossConfig{});
  CHECK(res.log.selected_epoch == 1);
}

TEST_CASE("train: a class absent from every case produces a warning, not an error") {
  auto cases = separable_cases(2, 7);
  for (auto& ex : cases)
    for (std::size_t v = 0; v < ex.labels.grid.size(); ++v)
      if (ex.labels.grid.flat(v) == ClassTable::kTumor)
        ex.labels.grid.flat(v) = ClassTable::kPancreas;
  TrainConfig tc;
  tc.epochs = 2;
  tc.steps_per_epoch = 4;
  tc.batch_size = 64;
  const TrainResult res =
      train(cases, ClassTable::seg3(), three_phase_features(), tc, LossConfig{});
  bool warned = false;
  for (const auto& w : res.log.warnings)
    if (w.find("tumor") != std::string::npos) warned = true;
  CHECK(warned);
}

TEST_CASE("predict: flag semantics, single component, purity") {
  const auto cases = separable_cases(2, 8);
  TrainConfig tc;
  tc.epochs = 3;
  tc.steps_per_epoch = 6;
  tc.batch_size = 128;
  tc.seed = 13;
  const TrainResult res =
      train(cases, ClassTable::seg3(), three_phase_features(), tc, LossConfig{});

  const Prediction soft = predict(res.model, cases[0].images, false);
  CHECK(!soft.labels.has_value());
  soft.probs.validate();

  const Prediction hard = predict(res.model, cases[0].images, true);
  REQUIRE(hard.labels.has_value());
  const ComponentGrid comp = connected_components(*hard.labels, {1, 2}, 6);
  std::uint32_t max_id = 0;
  for (std::size_t i = 0; i < comp.size(); ++i) max_id = std::max(max_id, comp.flat(i));
  CHECK(max_id <= 1u);

  const Prediction again = predict(res.model, cases[0].images, true);
  CHECK(again.labels->grid.data() == hard.labels->grid.data());
  for (std::size_t c = 0; c < 3; ++c)
    CHECK(again.probs.channels[c].data() == hard.probs.channels[c].data());
}

TEST_CASE("model JSON: 100 randomized instances round-trip bit-exactly") {
  Rng rng(1234);
  for (int i = 0; i < 100; ++i) {
    LinearSoftmaxModel m;
    m.classes = (i % 2 == 0) ? ClassTable::seg3() : ClassTable::ta6();
    std::vector<Phase> phases;
    for (Phase ph : kAllPhases)
      if (rng.uniform() < 0.6) phases.push_back(ph);
    if (phases.empty()) phases.push_back(Phase::venous);
    m.features = FeatureConfig{static_cast<int>(rng.below(3)), phases};
    const std::size_t nf = m.features.feature_count();
    m.feat_mean.resize(nf);
    m.feat_std.resize(nf);
    m.weights.resize(m.classes.size() * nf);
    for (double& x : m.feat_mean) x = rng.normal(0.0, 100.0);
    for (double& x : m.feat_std) x = std::abs(rng.normal(1.0, 2.0)) + 1e-6;
    for (double& x : m.weights) x = rng.normal(0.0, 3.0);

    const LinearSoftmaxModel back = model_from_json(model_to_json(m));
    REQUIRE(back.classes == m.classes);
    REQUIRE(back.features.radius == m.features.radius);
    REQUIRE(back.features.phases == m.features.phases);
    REQUIRE(back.feat_mean == m.feat_mean);
    REQUIRE(back.feat_std == m.feat_std);
    REQUIRE(back.weights == m.weights);
    REQUIRE(weight_hash(back) == weight_hash(m));
  }
}

TEST_CASE("model JSON: file save/load round-trip") {
  namespace fs = std::filesystem;
  const auto cases = separable_cases(2, 9);
  TrainConfig tc;
  tc.epochs = 2;
  tc.steps_per_epoch = 4;
  tc.batch_size = 64;
  const TrainResult res =
      train(cases, ClassTable::seg3(), three_phase_features(), tc, LossConfig{});
  const fs::path p = fs::temp_directory_path() / "selfseg_model_rt.json";
  save_model(res.model, p);
  const LinearSoftmaxModel back = load_model(p);
  CHECK(back.weights == res.model.weights);
  CHECK(back.feat_mean == res.model.feat_mean);
  CHECK(back.feat_std == res.model.feat_std);
  fs::remove(p);
}

TEST_CASE("learning rate schedule: step decay arithmetic") {
  LearningRateSchedule s;
  s.initial = 1.0;
  s.decay_factor = 0.5;
  s.decay_every_epochs = 2;
  CHECK(s.at_epoch(0) == doctest::Approx(1.0));
  CHECK(s.at_epoch(1) == doctest::Approx(1.0));
  CHECK(s.at_epoch(2) == doctest::Approx(0.5));
  CHECK(s.at_epoch(4) == doctest::Approx(0.25));
  LearningRateSchedule constant;
  constant.initial = 0.3;
  constant.decay_factor = 1.0;
  constant.decay_every_epochs = 0;
  CHECK(constant.at_epoch(29) == doctest::Approx(0.3));
}
