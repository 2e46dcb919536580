#include "selfseg/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "selfseg/errors.hpp"
#include "selfseg/rng.hpp"
#include "selfseg/threads.hpp"
#include "selfseg/volume_ops.hpp"

namespace selfseg {

namespace {

using ordered_json = nlohmann::ordered_json;

/// Summed-area table over one scalar volume, with a one-cell zero border so
/// box sums reduce to 8 lookups. Values and squares accumulated in double.
struct Sat {
  int nx = 0, ny = 0, nz = 0;
  std::vector<double> sum;
  std::vector<double> sum2;

  explicit Sat(const ImageGrid& img) {
    nx = img.nx();
    ny = img.ny();
    nz = img.nz();
    const std::size_t n = static_cast<std::size_t>(nx + 1) * (ny + 1) * (nz + 1);
    sum.assign(n, 0.0);
    sum2.assign(n, 0.0);
    for (int z = 0; z < nz; ++z) {
      for (int y = 0; y < ny; ++y) {
        for (int x = 0; x < nx; ++x) {
          const double v = img(x, y, z);
          const std::size_t i = at(x + 1, y + 1, z + 1);
          sum[i] = v + sum[at(x, y + 1, z + 1)] + sum[at(x + 1, y, z + 1)] +
                   sum[at(x + 1, y + 1, z)] - sum[at(x, y, z + 1)] - sum[at(x, y + 1, z)] -
                   sum[at(x + 1, y, z)] + sum[at(x, y, z)];
          sum2[i] = v * v + sum2[at(x, y + 1, z + 1)] + sum2[at(x + 1, y, z + 1)] +
                    sum2[at(x + 1, y + 1, z)] - sum2[at(x, y, z + 1)] - sum2[at(x, y + 1, z)] -
                    sum2[at(x + 1, y, z)] + sum2[at(x, y, z)];
        }
      }
    }
  }

  std::size_t at(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(nx + 1) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(ny + 1) * z);
  }

  // Inclusive box [x0..x1] x [y0..y1] x [z0..z1].
  double box(const std::vector<double>& t, int x0, int y0, int z0, int x1, int y1, int z1) const {
    ++x1, ++y1, ++z1;
    return t[at(x1, y1, z1)] - t[at(x0, y1, z1)] - t[at(x1, y0, z1)] - t[at(x1, y1, z0)] +
           t[at(x0, y0, z1)] + t[at(x0, y1, z0)] + t[at(x1, y0, z0)] - t[at(x0, y0, z0)];
  }
};

/// Combined loss core shared by the public ProbMap overload and the training
/// loop. probs is voxel-major (v * n_classes + c); grad_out (same layout) gets
/// d(loss)/d(logit) assuming probs came from a softmax. Dice statistics span
/// the whole buffer, so a training batch is scored as one unit.
double loss_and_grad_flat(const double* probs, const std::uint8_t* labels, std::size_t n_voxels,
                          std::size_t n_classes, const LossConfig& cfg, double* grad_out) {
  if (n_voxels == 0) throw std::invalid_argument("loss_and_grad: empty input");
  const std::size_t k = n_classes;

  // Per-class soft-Dice statistics.
  std::vector<double> sum_pg(k, 0.0), sum_p(k, 0.0), sum_g(k, 0.0);
  for (std::size_t v = 0; v < n_voxels; ++v) {
    const double* p = probs + v * k;
    const std::uint8_t g = labels[v];
    for (std::size_t c = 0; c < k; ++c) sum_p[c] += p[c];
    sum_pg[g] += p[g];
    sum_g[g] += 1.0;
  }

  const std::size_t n_fg = k - 1;  // class 0 is background
  double dice_loss = 0.0;
  std::vector<double> numer(k, 0.0), denom(k, 1.0);
  if (n_fg > 0) {
    double mean_dice = 0.0;
    for (std::size_t c = 1; c < k; ++c) {
      numer[c] = 2.0 * sum_pg[c] + cfg.epsilon;
      denom[c] = sum_p[c] + sum_g[c] + cfg.epsilon;
      mean_dice += numer[c] / denom[c];
    }
    mean_dice /= static_cast<double>(n_fg);
    dice_loss = 1.0 - mean_dice;
  }

  double ce_loss = 0.0;
  for (std::size_t v = 0; v < n_voxels; ++v) {
    const double p_true = probs[v * k + labels[v]];
    ce_loss -= std::log(std::max(p_true, cfg.ce_clamp));
  }
  ce_loss /= static_cast<double>(n_voxels);

  if (grad_out != nullptr) {
    const double inv_v = 1.0 / static_cast<double>(n_voxels);
    const double fg_scale = n_fg > 0 ? cfg.dice_weight / static_cast<double>(n_fg) : 0.0;
    std::vector<double> q(k, 0.0);  // d(dice_loss)/d(p_c) for one voxel
    for (std::size_t v = 0; v < n_voxels; ++v) {
      const double* p = probs + v * k;
      const std::uint8_t g = labels[v];
      // d(dice_c)/d(p_vc) = (2*[g==c]*denom_c - numer_c) / denom_c^2.
      double qdotp = 0.0;
      for (std::size_t c = 1; c < k; ++c) {
        const double ind = (g == c) ? 1.0 : 0.0;
        q[c] = -fg_scale * (2.0 * ind * denom[c] - numer[c]) / (denom[c] * denom[c]);
        qdotp += q[c] * p[c];
      }
      double* out = grad_out + v * k;
      for (std::size_t c = 0; c < k; ++c) {
        // Softmax chain rule for the Dice part; CE collapses to (p - g) / V.
        const double dice_part = p[c] * (q[c] - qdotp);
        const double ce_part = cfg.ce_weight * (p[c] - ((g == c) ? 1.0 : 0.0)) * inv_v;
        out[c] = dice_part + ce_part;
      }
    }
  }

  return cfg.dice_weight * dice_loss + cfg.ce_weight * ce_loss;
}

void softmax_inplace(double* z, std::size_t k) {
  double m = z[0];
  for (std::size_t c = 1; c < k; ++c) m = std::max(m, z[c]);
  double s = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    z[c] = std::exp(z[c] - m);
    s += z[c];
  }
  for (std::size_t c = 0; c < k; ++c) z[c] /= s;
}

std::vector<std::uint8_t> resolve_selection_classes(const TrainConfig& cfg,
                                                    const ClassTable& classes) {
  if (!cfg.selection_class_ids.empty()) {
    for (std::uint8_t c : cfg.selection_class_ids) {
      if (c == 0 || c >= classes.size())
        throw ConfigError("selection class id " + std::to_string(int(c)) +
                          " is not a foreground class");
    }
    return cfg.selection_class_ids;
  }
  if (int id = classes.id_of("tumor"); id >= 0) return {static_cast<std::uint8_t>(id)};
  std::vector<std::uint8_t> all_fg;
  for (std::size_t c = 1; c < classes.size(); ++c) all_fg.push_back(static_cast<std::uint8_t>(c));
  return all_fg;
}

}  // namespace

void FeatureConfig::validate() const {
  if (radius < 0) throw ConfigError("feature radius must be >= 0");
  if (phases.empty()) throw ConfigError("feature config needs at least one phase");
  std::set<Phase> seen(phases.begin(), phases.end());
  if (seen.size() != phases.size()) throw ConfigError("duplicate phase in feature config");
}

void LossConfig::validate() const {
  if (dice_weight < 0.0 || ce_weight < 0.0) throw ConfigError("loss weights must be >= 0");
  if (dice_weight == 0.0 && ce_weight == 0.0) throw ConfigError("at least one loss weight > 0");
  if (!(epsilon > 0.0)) throw ConfigError("dice epsilon must be > 0");
  if (!(ce_clamp > 0.0) || ce_clamp >= 1.0) throw ConfigError("ce clamp must be in (0, 1)");
}

double LearningRateSchedule::at_epoch(int epoch) const {
  if (decay_every_epochs <= 0 || decay_factor == 1.0) return initial;
  return initial * std::pow(decay_factor, epoch / decay_every_epochs);
}

void TrainConfig::validate() const {
  if (epochs <= 0) throw ConfigError("epochs must be > 0");
  if (batch_size <= 0) throw ConfigError("batch_size must be > 0");
  if (steps_per_epoch <= 0) throw ConfigError("steps_per_epoch must be > 0");
  if (!(lr.initial > 0.0)) throw ConfigError("learning rate must be > 0");
  if (!(lr.decay_factor > 0.0) || lr.decay_factor > 1.0)
    throw ConfigError("lr decay factor must be in (0, 1]");
  if (lr.decay_every_epochs < 0) throw ConfigError("lr decay interval must be >= 0");
  if (validation_fraction < 0.0 || validation_fraction >= 1.0)
    throw ConfigError("validation_fraction must be in [0, 1)");
}

void LinearSoftmaxModel::validate() const {
  features.validate();
  const std::size_t nf = n_features();
  const std::size_t nk = n_classes();
  if (nk < 2) throw ConfigError("model needs at least two classes");
  if (feat_mean.size() != nf || feat_std.size() != nf)
    throw DataMismatchError("model normalization stats do not match feature count");
  if (weights.size() != nk * nf) throw DataMismatchError("model weight matrix has wrong size");
  for (double s : feat_std)
    if (!(s > 0.0)) throw DataMismatchError("model feature std must be > 0");
}

FeatureMatrix extract_features(const std::map<Phase, ImageGrid>& images,
                               const FeatureConfig& config) {
  config.validate();
  const ImageGrid* first = nullptr;
  for (Phase ph : config.phases) {
    auto it = images.find(ph);
    if (it == images.end()) throw MissingPhaseError(phase_name(ph));
    if (first == nullptr)
      first = &it->second;
    else if (!first->same_geometry(it->second))
      throw DataMismatchError("phase volumes disagree on dims/spacing");
  }

  const Dims dims = first->dims();
  const std::size_t n_vox = voxel_count(dims);
  FeatureMatrix out;
  out.n_voxels = n_vox;
  out.n_features = config.feature_count();
  out.values.assign(n_vox * out.n_features, 0.0);

  const int r = config.radius;
  const int nx = dims[0], ny = dims[1], nz = dims[2];
  for (std::size_t pi = 0; pi < config.phases.size(); ++pi) {
    const ImageGrid& img = images.at(config.phases[pi]);
    const Sat sat(img);
    const std::size_t base = 3 * pi;
    for (int z = 0; z < nz; ++z) {
      const int z0 = std::max(0, z - r), z1 = std::min(nz - 1, z + r);
      for (int y = 0; y < ny; ++y) {
        const int y0 = std::max(0, y - r), y1 = std::min(ny - 1, y + r);
        for (int x = 0; x < nx; ++x) {
          const int x0 = std::max(0, x - r), x1 = std::min(nx - 1, x + r);
          const double count = double(x1 - x0 + 1) * (y1 - y0 + 1) * (z1 - z0 + 1);
          const double s = sat.box(sat.sum, x0, y0, z0, x1, y1, z1);
          const double s2 = sat.box(sat.sum2, x0, y0, z0, x1, y1, z1);
          const double mean = s / count;
          // E[x^2]-E[x]^2 cancellation noise would otherwise leak a ~1e-6
          // std into single-voxel windows, which are exactly constant.
          const double var =
              count > 1.0 ? std::max(0.0, s2 / count - mean * mean) : 0.0;
          double* row = out.values.data() + img.index(x, y, z) * out.n_features;
          row[base + 0] = img(x, y, z);
          row[base + 1] = mean;
          row[base + 2] = std::sqrt(var);
        }
      }
    }
  }
  const std::size_t bias = out.n_features - 1;
  for (std::size_t v = 0; v < n_vox; ++v) out.values[v * out.n_features + bias] = 1.0;
  return out;
}

ProbMap forward(const LinearSoftmaxModel& model, const FeatureMatrix& features, const Dims& dims,
                const Spacing& spacing) {
  model.validate();
  if (features.n_features != model.n_features())
    throw DataMismatchError("feature matrix does not match model feature count");
  if (features.n_voxels != voxel_count(dims))
    throw DataMismatchError("feature matrix does not match volume dims");

  const std::size_t k = model.n_classes();
  const std::size_t nf = model.n_features();
  ProbMap out;
  out.classes = model.classes;
  out.channels.reserve(k);
  for (std::size_t c = 0; c < k; ++c) out.channels.emplace_back(dims, spacing);

  parallel_for(features.n_voxels, 0, [&](std::size_t v) {
    const double* row = features.row(v);
    double z[256];
    for (std::size_t c = 0; c < k; ++c) {
      const double* w = model.weights.data() + c * nf;
      double acc = 0.0;
      for (std::size_t f = 0; f < nf; ++f)
        acc += w[f] * (row[f] - model.feat_mean[f]) / model.feat_std[f];
      z[c] = acc;
    }
    softmax_inplace(z, k);
    for (std::size_t c = 0; c < k; ++c) out.channels[c].flat(v) = static_cast<float>(z[c]);
  });
  return out;
}

std::pair<double, std::vector<double>> loss_and_grad(const ProbMap& probs, const LabelMap& target,
                                                     const LossConfig& cfg) {
  cfg.validate();
  probs.validate();
  target.validate();
  if (probs.classes.size() != target.classes.size())
    throw DataMismatchError("probability map and target disagree on class count");
  if (!probs.channels.front().same_geometry(target.grid))
    throw DataMismatchError("probability map and target disagree on geometry");

  const std::size_t k = probs.classes.size();
  const std::size_t n_vox = probs.channels.front().size();
  std::vector<double> flat(n_vox * k);
  for (std::size_t v = 0; v < n_vox; ++v)
    for (std::size_t c = 0; c < k; ++c) flat[v * k + c] = probs.channels[c].flat(v);

  std::vector<double> grad(n_vox * k, 0.0);
  const double loss =
      loss_and_grad_flat(flat.data(), target.grid.data().data(), n_vox, k, cfg, grad.data());
  return {loss, std::move(grad)};
}

TrainResult train(const std::vector<TrainingExample>& cases, const ClassTable& classes,
                  const FeatureConfig& features, const TrainConfig& train_cfg,
                  const LossConfig& loss_cfg) {
  features.validate();
  train_cfg.validate();
  loss_cfg.validate();
  if (cases.empty()) throw ConfigError("training requires at least one case");
  if (cases.size() < 2 && train_cfg.validation_fraction > 0.0)
    throw ConfigError(
        "training requires >= 2 cases for a validation split; "
        "set validation_fraction to 0 to train on a single case");

  const std::size_t k = classes.size();
  const std::size_t nf = features.feature_count();

  TrainResult result;
  TrainingLog& log = result.log;

  // Case-level split: shuffle, then peel off the validation tail.
  std::vector<std::size_t> order(cases.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng(mix_seed(train_cfg.seed, "split"));
  split_rng.shuffle(order);
  std::size_t n_val = 0;
  if (train_cfg.validation_fraction > 0.0 && cases.size() >= 2) {
    n_val = static_cast<std::size_t>(
        std::llround(train_cfg.validation_fraction * static_cast<double>(cases.size())));
    n_val = std::clamp<std::size_t>(n_val, 1, cases.size() - 1);
  }
  std::vector<std::size_t> train_idx(order.begin(), order.end() - n_val);
  std::vector<std::size_t> val_idx(order.end() - n_val, order.end());
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  for (std::size_t i : train_idx) log.train_case_ids.push_back(cases[i].id);
  for (std::size_t i : val_idx) log.val_case_ids.push_back(cases[i].id);
  if (n_val == 0)
    log.warnings.push_back("no validation cases; selecting the final epoch");

  // Cache features and validate labels once per case.
  std::vector<FeatureMatrix> feats(cases.size());
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const TrainingExample& ex = cases[i];
    ex.labels.validate();
    if (ex.labels.classes.size() != k)
      throw DataMismatchError("case '" + ex.id + "' labels do not match the class table");
    if (ex.weight_mask && !ex.weight_mask->same_geometry(ex.labels.grid))
      throw DataMismatchError("case '" + ex.id + "' weight mask geometry mismatch");
    feats[i] = extract_features(ex.images, features);
    if (feats[i].n_voxels != ex.labels.grid.size())
      throw DataMismatchError("case '" + ex.id + "' images and labels disagree on geometry");
  }

  // Normalization statistics over every voxel of the training split.
  std::vector<double> mean(nf, 0.0), stdev(nf, 1.0);
  {
    std::vector<double> acc(nf, 0.0), acc2(nf, 0.0);
    double total = 0.0;
    for (std::size_t i : train_idx) {
      const FeatureMatrix& fm = feats[i];
      for (std::size_t v = 0; v < fm.n_voxels; ++v) {
        const double* row = fm.row(v);
        for (std::size_t f = 0; f < nf; ++f) {
          acc[f] += row[f];
          acc2[f] += row[f] * row[f];
        }
      }
      total += static_cast<double>(fm.n_voxels);
    }
    if (total == 0.0) throw ConfigError("training split is empty");
    for (std::size_t f = 0; f < nf; ++f) {
      mean[f] = acc[f] / total;
      const double var = std::max(0.0, acc2[f] / total - mean[f] * mean[f]);
      stdev[f] = std::sqrt(var);
      if (!(stdev[f] > 1e-12)) {
        if (f + 1 != nf)  // the bias feature is constant by design
          log.warnings.push_back("feature " + std::to_string(f) +
                                 " is constant on the training split");
        stdev[f] = 1.0;
      }
    }
    // Keep the intercept untouched by normalization.
    mean[nf - 1] = 0.0;
    stdev[nf - 1] = 1.0;
  }

  // Per-class pools of (case, voxel) pairs eligible for sampling.
  struct Sample {
    std::uint32_t case_idx;
    std::uint32_t voxel;
  };
  std::vector<std::vector<Sample>> pools(k);
  for (std::size_t i : train_idx) {
    const TrainingExample& ex = cases[i];
    const auto& labels = ex.labels.grid;
    for (std::size_t v = 0; v < labels.size(); ++v) {
      if (ex.weight_mask && ex.weight_mask->flat(v) == 0) continue;
      pools[labels.flat(v)].push_back(
          {static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(v)});
    }
  }
  std::vector<std::size_t> present;
  for (std::size_t c = 0; c < k; ++c) {
    if (!pools[c].empty())
      present.push_back(c);
    else
      log.warnings.push_back("class '" + classes.name(c) + "' absent from the training split");
  }
  if (present.empty()) throw ConfigError("no sampleable voxels in the training split");
  std::vector<Sample> flat_pool;
  if (!train_cfg.class_balanced)
    for (std::size_t c = 0; c < k; ++c)
      flat_pool.insert(flat_pool.end(), pools[c].begin(), pools[c].end());

  const std::vector<std::uint8_t> sel = resolve_selection_classes(train_cfg, classes);

  LinearSoftmaxModel model;
  model.classes = classes;
  model.features = features;
  model.feat_mean = mean;
  model.feat_std = stdev;
  model.weights.assign(k * nf, 0.0);

  const std::size_t batch = static_cast<std::size_t>(train_cfg.batch_size);
  std::vector<double> xnorm(batch * nf);
  std::vector<std::uint8_t> ybatch(batch);
  std::vector<double> probs(batch * k);
  std::vector<double> grad(batch * k);

  Rng sample_rng(mix_seed(train_cfg.seed, "sample"));
  std::vector<double> best_weights = model.weights;
  double best_metric = -std::numeric_limits<double>::infinity();
  int best_epoch = 0;

  for (int epoch = 0; epoch < train_cfg.epochs; ++epoch) {
    const double lr = train_cfg.lr.at_epoch(epoch);
    double loss_sum = 0.0;
    for (int step = 0; step < train_cfg.steps_per_epoch; ++step) {
      // Draw the batch (with replacement).
      if (train_cfg.class_balanced) {
        const std::size_t per = batch / present.size();
        std::size_t rem = batch % present.size();
        std::size_t bi = 0;
        for (std::size_t c : present) {
          std::size_t want = per + (rem > 0 ? 1 : 0);
          if (rem > 0) --rem;
          for (std::size_t j = 0; j < want; ++j) {
            const Sample s = pools[c][sample_rng.below(pools[c].size())];
            const double* row = feats[s.case_idx].row(s.voxel);
            for (std::size_t f = 0; f < nf; ++f)
              xnorm[bi * nf + f] = (row[f] - mean[f]) / stdev[f];
            ybatch[bi] = cases[s.case_idx].labels.grid.flat(s.voxel);
            ++bi;
          }
        }
      } else {
        for (std::size_t bi = 0; bi < batch; ++bi) {
          const Sample s = flat_pool[sample_rng.below(flat_pool.size())];
          const double* row = feats[s.case_idx].row(s.voxel);
          for (std::size_t f = 0; f < nf; ++f) xnorm[bi * nf + f] = (row[f] - mean[f]) / stdev[f];
          ybatch[bi] = cases[s.case_idx].labels.grid.flat(s.voxel);
        }
      }

      // Forward on the batch.
      for (std::size_t bi = 0; bi < batch; ++bi) {
        double* z = probs.data() + bi * k;
        for (std::size_t c = 0; c < k; ++c) {
          const double* w = model.weights.data() + c * nf;
          const double* x = xnorm.data() + bi * nf;
          double acc = 0.0;
          for (std::size_t f = 0; f < nf; ++f) acc += w[f] * x[f];
          z[c] = acc;
        }
        softmax_inplace(z, k);
      }

      loss_sum += loss_and_grad_flat(probs.data(), ybatch.data(), batch, k, loss_cfg, grad.data());

      // SGD step: dW[c,f] = sum_v grad[v,c] * x[v,f].
      for (std::size_t bi = 0; bi < batch; ++bi) {
        const double* g = grad.data() + bi * k;
        const double* x = xnorm.data() + bi * nf;
        for (std::size_t c = 0; c < k; ++c) {
          double* w = model.weights.data() + c * nf;
          const double gc = lr * g[c];
          if (gc == 0.0) continue;
          for (std::size_t f = 0; f < nf; ++f) w[f] -= gc * x[f];
        }
      }
    }

    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train_loss = loss_sum / train_cfg.steps_per_epoch;

    if (n_val > 0) {
      // Pooled hard Dice per class over the validation voxels, using the same
      // postprocess chain as inference so checkpoint selection is not swayed
      // by scattered false positives that the component filter would remove.
      std::vector<double> inter(k, 0.0), psum(k, 0.0), gsum(k, 0.0);
      for (std::size_t i : val_idx) {
        const TrainingExample& ex = cases[i];
        const ProbMap pm =
            forward(model, feats[i], ex.labels.grid.dims(), ex.labels.grid.spacing());
        const LabelMap pred = largest_foreground_component(argmax_labels(pm));
        for (std::size_t v = 0; v < pred.grid.size(); ++v) {
          const std::uint8_t p = pred.grid.flat(v);
          const std::uint8_t g = ex.labels.grid.flat(v);
          psum[p] += 1.0;
          gsum[g] += 1.0;
          if (p == g) inter[p] += 1.0;
        }
      }
      rec.val_dice.resize(k, 0.0);
      for (std::size_t c = 0; c < k; ++c) {
        const double den = psum[c] + gsum[c];
        rec.val_dice[c] = den > 0.0 ? 2.0 * inter[c] / den : 1.0;
      }
      double metric = 0.0;
      for (std::uint8_t c : sel) metric += rec.val_dice[c];
      metric /= static_cast<double>(sel.size());
      if (metric > best_metric) {
        best_metric = metric;
        best_epoch = rec.epoch;
        best_weights = model.weights;
      }
    } else {
      // Without validation the last epoch wins.
      best_metric = -rec.train_loss;
      best_epoch = rec.epoch;
      best_weights = model.weights;
    }
    log.epochs.push_back(std::move(rec));
  }

  model.weights = std::move(best_weights);
  log.selected_epoch = best_epoch;
  log.selected_metric = best_metric;
  result.model = std::move(model);
  return result;
}

Prediction predict(const LinearSoftmaxModel& model, const std::map<Phase, ImageGrid>& images,
                   bool postprocess) {
  const FeatureMatrix fm = extract_features(images, model.features);
  const ImageGrid& ref = images.at(model.features.phases.front());
  Prediction out{forward(model, fm, ref.dims(), ref.spacing()), std::nullopt};
  if (postprocess) out.labels = largest_foreground_component(argmax_labels(out.probs));
  return out;
}

namespace {

ordered_json model_json(const LinearSoftmaxModel& model) {
  ordered_json j;
  j["format"] = "selfseg-model";
  j["version"] = 1;
  j["classes"] = model.classes.names();
  j["features"]["radius"] = model.features.radius;
  std::vector<std::string> phs;
  for (Phase p : model.features.phases) phs.push_back(phase_name(p));
  j["features"]["phases"] = phs;
  j["feat_mean"] = model.feat_mean;
  j["feat_std"] = model.feat_std;
  j["weights"] = model.weights;
  return j;
}

LinearSoftmaxModel model_from(const ordered_json& j) {
  try {
    if (j.at("format").get<std::string>() != "selfseg-model")
      throw ConfigError("not a model file");
    if (j.at("version").get<int>() != 1) throw ConfigError("unsupported model version");
    LinearSoftmaxModel m;
    m.classes = ClassTable(j.at("classes").get<std::vector<std::string>>());
    m.features.radius = j.at("features").at("radius").get<int>();
    for (const auto& name : j.at("features").at("phases"))
      m.features.phases.push_back(parse_phase(name.get<std::string>()));
    m.feat_mean = j.at("feat_mean").get<std::vector<double>>();
    m.feat_std = j.at("feat_std").get<std::vector<double>>();
    m.weights = j.at("weights").get<std::vector<double>>();
    m.validate();
    return m;
  } catch (const ordered_json::exception& e) {
    throw ConfigError(std::string("malformed model JSON: ") + e.what());
  }
}

}  // namespace

std::string model_to_json(const LinearSoftmaxModel& model) { return model_json(model).dump(2); }

LinearSoftmaxModel model_from_json(const std::string& text) {
  ordered_json j;
  try {
    j = ordered_json::parse(text);
  } catch (const ordered_json::exception& e) {
    throw ConfigError(std::string("malformed model JSON: ") + e.what());
  }
  return model_from(j);
}

void save_model(const LinearSoftmaxModel& model, const std::filesystem::path& path) {
  model.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DatasetError("cannot open '" + path.string() + "' for writing");
  out << model_to_json(model) << '\n';
  if (!out) throw DatasetError("failed writing model '" + path.string() + "'");
}

LinearSoftmaxModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open model '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return model_from_json(ss.str());
}

std::uint64_t weight_hash(const LinearSoftmaxModel& model) {
  std::uint64_t h = 1469598103934665603ull;
  for (double w : model.weights) {
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(w));
    std::memcpy(&bits, &w, sizeof(bits));
    for (int i = 0; i < 8; ++i) {
      h ^= (bits >> (8 * i)) & 0xffu;
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace selfseg
