#include <doctest.h>

#include <cmath>
#include <queue>

#include "selfseg/errors.hpp"
#include "selfseg/fusion.hpp"
#include "selfseg/phantom.hpp"
#include "selfseg/rng.hpp"
#include "selfseg/volume_ops.hpp"

using namespace selfseg;

namespace {

ProbMap random_probs(Dims dims, Rng& rng) {
  ProbMap p;
  p.classes = ClassTable::seg3();
  for (int c = 0; c < 3; ++c) p.channels.emplace_back(dims, Spacing{1, 1, 1}, 0.0f);
  for (std::size_t v = 0; v < p.voxels(); ++v) {
    double raw[3], sum = 0.0;
    for (double& r : raw) sum += (r = rng.uniform() + 1e-4);
    for (int c = 0; c < 3; ++c) p.channels[c].flat(v) = static_cast<float>(raw[c] / sum);
  }
  return p;
}

ProbMap single_voxel(float a0, float a1, float a2) {
  ProbMap p;
  p.classes = ClassTable::seg3();
  for (int c = 0; c < 3; ++c) p.channels.emplace_back(Dims{1, 1, 1}, Spacing{1, 1, 1}, 0.0f);
  p.channels[0].flat(0) = a0;
  p.channels[1].flat(0) = a1;
  p.channels[2].flat(0) = a2;
  return p;
}

LabelMap slab_foreground(const std::vector<int>& counts_per_slice, int ny, int nz) {
  LabelMap m;
  m.classes = ClassTable::seg3();
  m.grid = ByteGrid({static_cast<int>(counts_per_slice.size()), ny, nz}, {1, 1, 1}, 0);
  for (int x = 0; x < static_cast<int>(counts_per_slice.size()); ++x) {
    int placed = 0;
    for (int z = 0; z < nz && placed < counts_per_slice[x]; ++z)
      for (int y = 0; y < ny && placed < counts_per_slice[x]; ++y) {
        m.grid(x, y, z) = 1;
        ++placed;
      }
    REQUIRE(placed == counts_per_slice[x]);
  }
  return m;
}

/// Straight-line reimplementation of the whole pseudo-label recipe, scalar
/// loops only, for the oracle comparison.
LabelMap pseudo_oracle(const ProbMap& pa, const ProbMap& pb, const FusionConfig& cfg) {
  const Dims dims = pa.dims();
  const std::size_t n = pa.voxels();
  const std::size_t k = pa.num_classes();

  // Region foreground: argmax of the equal-weight mean.
  std::vector<char> fg(n, 0);
  for (std::size_t v = 0; v < n; ++v) {
    double best = -1.0;
    std::size_t best_c = 0;
    for (std::size_t c = 0; c < k; ++c) {
      const double m = 0.5 * (double(pa.channels[c].flat(v)) + double(pb.channels[c].flat(v)));
      if (m > best) {
        best = m;
        best_c = c;
      }
    }
    fg[v] = best_c != 0;
  }
  // Head prefix along cfg.axis in cfg.direction by cumulative count.
  const int extent = dims[cfg.axis];
  std::vector<std::size_t> count(extent, 0);
  std::size_t total = 0;
  for (int z = 0; z < dims[2]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x) {
        const std::size_t v = std::size_t(x) + dims[0] * (std::size_t(y) + dims[1] * z);
        if (!fg[v]) continue;
        const int s = cfg.axis == 0 ? x : (cfg.axis == 1 ? y : z);
        ++count[s];
        ++total;
      }
  std::vector<char> in_head_slice(extent, 0);
  if (total > 0) {
    const double threshold = cfg.head_fraction * double(total) - 1e-9 * double(total);
    std::size_t cum = 0;
    for (int i = 0; i < extent; ++i) {
      const int s = cfg.direction == SliceDirection::ascending ? i : extent - 1 - i;
      cum += count[s];
      in_head_slice[s] = 1;
      if (double(cum) >= threshold) break;
    }
  }
  // Blend, argmax.
  LabelMap hard;
  hard.classes = pa.classes;
  hard.grid = ByteGrid(dims, pa.channels[0].spacing(), 0);
  for (int z = 0; z < dims[2]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x) {
        const std::size_t v = std::size_t(x) + dims[0] * (std::size_t(y) + dims[1] * z);
        const int s = cfg.axis == 0 ? x : (cfg.axis == 1 ? y : z);
        const bool head = in_head_slice[s];
        const double w = head ? cfg.omega0 : 1.0 - cfg.omega1;
        double best = -1.0;
        std::size_t best_c = 0;
        for (std::size_t c = 0; c < k; ++c) {
          const double a = pa.channels[c].flat(v), b = pb.channels[c].flat(v);
          double f;
          if (w == 1.0)
            f = a;
          else if (w == 0.0)
            f = b;
          else
            f = std::min(std::max(w * a + (1.0 - w) * b, std::min(a, b)), std::max(a, b));
          const float ff = static_cast<float>(f);
          if (ff > best) {
            best = ff;
            best_c = c;
          }
        }
        hard.grid.flat(v) = static_cast<std::uint8_t>(best_c);
      }
  // Largest 6-connected joint-foreground component via BFS.
  std::vector<int> comp(n, 0);
  int next_id = 0;
  std::vector<std::size_t> sizes{0};
  for (int z = 0; z < dims[2]; ++z)
    for (int y = 0; y < dims[1]; ++y)
      for (int x = 0; x < dims[0]; ++x) {
        const std::size_t v = std::size_t(x) + dims[0] * (std::size_t(y) + dims[1] * z);
        if (hard.grid.flat(v) == 0 || comp[v] != 0) continue;
        ++next_id;
        sizes.push_back(0);
        std::queue<std::array<int, 3>> q;
        q.push({x, y, z});
        comp[v] = next_id;
        while (!q.empty()) {
          const auto [cx, cy, cz] = q.front();
          q.pop();
          ++sizes[next_id];
          const int nbr[6][3] = {{cx - 1, cy, cz}, {cx + 1, cy, cz}, {cx, cy - 1, cz},
                                 {cx, cy + 1, cz}, {cx, cy, cz - 1}, {cx, cy, cz + 1}};
          for (const auto& nb : nbr) {
            if (nb[0] < 0 || nb[1] < 0 || nb[2] < 0 || nb[0] >= dims[0] || nb[1] >= dims[1] ||
                nb[2] >= dims[2])
              continue;
            const std::size_t w2 =
                std::size_t(nb[0]) + dims[0] * (std::size_t(nb[1]) + dims[1] * nb[2]);
            if (hard.grid.flat(w2) == 0 || comp[w2] != 0) continue;
            comp[w2] = next_id;
            q.push({nb[0], nb[1], nb[2]});
          }
        }
      }
  int keep = 0;
  std::size_t keep_size = 0;
  for (int id = 1; id <= next_id; ++id)
    if (sizes[id] > keep_size) {
      keep_size = sizes[id];
      keep = id;
    }
  for (std::size_t v = 0; v < n; ++v)
    if (hard.grid.flat(v) != 0 && comp[v] != keep) hard.grid.flat(v) = 0;
  return hard;
}

}  // namespace

TEST_CASE("fusion: exact convex-combination arithmetic at one voxel") {
  const ProbMap pa = single_voxel(0.2f, 0.3f, 0.5f);
  const ProbMap pb = single_voxel(0.6f, 0.2f, 0.2f);
  FusionConfig cfg;  // omega0=0.8, omega1=0.6

  ByteGrid head({1, 1, 1}, {1, 1, 1}, 1);
  const ProbMap inside = fuse_probabilities(pa, pb, head, cfg);
  CHECK(inside.channels[0].flat(0) == doctest::Approx(0.28).epsilon(1e-6));
  CHECK(inside.channels[1].flat(0) == doctest::Approx(0.28).epsilon(1e-6));
  CHECK(inside.channels[2].flat(0) == doctest::Approx(0.44).epsilon(1e-6));

  ByteGrid tail({1, 1, 1}, {1, 1, 1}, 0);
  const ProbMap outside = fuse_probabilities(pa, pb, tail, cfg);
  CHECK(outside.channels[0].flat(0) == doctest::Approx(0.44).epsilon(1e-6));
  CHECK(outside.channels[1].flat(0) == doctest::Approx(0.24).epsilon(1e-6));
  CHECK(outside.channels[2].flat(0) == doctest::Approx(0.32).epsilon(1e-6));
}

TEST_CASE("fusion: agreeing teachers are a fixed point") {
  Rng rng(21);
  const ProbMap pa = random_probs({4, 3, 3}, rng);
  ByteGrid head({4, 3, 3}, {1, 1, 1}, 0);
  for (int y = 0; y < 3; ++y) head(0, y, 0) = 1;
  const ProbMap out = fuse_probabilities(pa, pa, head, FusionConfig{});
  for (int c = 0; c < 3; ++c)
    for (std::size_t v = 0; v < out.voxels(); ++v)
      CHECK(out.channels[c].flat(v) == pa.channels[c].flat(v));
}

TEST_CASE("head_region_mask: cumulative-count prefix examples") {
  FusionConfig cfg;  // fraction 0.6, axis 0, ascending

  // Slice counts [5,1,1,1,1,1]: cumulative 5 then 6 >= 6 -> 2 slices.
  const LabelMap fg1 = slab_foreground({5, 1, 1, 1, 1, 1}, 3, 2);
  const ByteGrid m1 = head_region_mask(fg1, cfg);
  for (int x = 0; x < 6; ++x) {
    const bool inside = x < 2;
    for (int y = 0; y < 3; ++y)
      for (int z = 0; z < 2; ++z) CHECK((m1(x, y, z) == 1) == inside);
  }

  // Ten uniform slices -> first 6.
  const LabelMap fg2 = slab_foreground(std::vector<int>(10, 1), 2, 2);
  const ByteGrid m2 = head_region_mask(fg2, cfg);
  for (int x = 0; x < 10; ++x) CHECK((m2(x, 0, 0) == 1) == (x < 6));

  // Empty foreground -> empty mask.
  const LabelMap fg3 = slab_foreground(std::vector<int>(4, 0), 2, 2);
  const ByteGrid m3 = head_region_mask(fg3, cfg);
  for (std::size_t i = 0; i < m3.size(); ++i) CHECK(m3.flat(i) == 0);

  // Descending direction takes the suffix instead.
  FusionConfig desc = cfg;
  desc.direction = SliceDirection::descending;
  const ByteGrid m4 = head_region_mask(fg2, desc);
  for (int x = 0; x < 10; ++x) CHECK((m4(x, 0, 0) == 1) == (x >= 4));
}

TEST_CASE("fusion: componentwise bounds and normalization on random maps") {
  Rng rng(22);
  for (int trial = 0; trial < 5; ++trial) {
    const Dims dims{6, 5, 4};
    const ProbMap pa = random_probs(dims, rng);
    const ProbMap pb = random_probs(dims, rng);
    ByteGrid head(dims, {1, 1, 1}, 0);
    for (std::size_t i = 0; i < head.size(); ++i) head.flat(i) = rng.uniform() < 0.5;
    FusionConfig cfg;
    cfg.omega0 = rng.uniform(0.0, 1.0);
    cfg.omega1 = rng.uniform(0.0, 1.0);
    const ProbMap out = fuse_probabilities(pa, pb, head, cfg);
    out.validate();
    for (int c = 0; c < 3; ++c)
      for (std::size_t v = 0; v < out.voxels(); ++v) {
        const float a = pa.channels[c].flat(v), b = pb.channels[c].flat(v);
        CHECK(out.channels[c].flat(v) >= std::min(a, b));
        CHECK(out.channels[c].flat(v) <= std::max(a, b));
      }
  }
}

TEST_CASE("fusion: weight degeneracy reproduces a single teacher exactly") {
  Rng rng(23);
  const Dims dims{5, 4, 3};
  const ProbMap pa = random_probs(dims, rng);
  const ProbMap pb = random_probs(dims, rng);
  ByteGrid head(dims, {1, 1, 1}, 0);
  for (std::size_t i = 0; i < head.size(); ++i) head.flat(i) = rng.uniform() < 0.4;

  FusionConfig all_a;
  all_a.omega0 = 1.0;
  all_a.omega1 = 0.0;
  const ProbMap out_a = fuse_probabilities(pa, pb, head, all_a);
  for (int c = 0; c < 3; ++c)
    for (std::size_t v = 0; v < out_a.voxels(); ++v)
      CHECK(out_a.channels[c].flat(v) == pa.channels[c].flat(v));

  FusionConfig all_b;
  all_b.omega0 = 0.0;
  all_b.omega1 = 1.0;
  const ProbMap out_b = fuse_probabilities(pa, pb, head, all_b);
  for (int c = 0; c < 3; ++c)
    for (std::size_t v = 0; v < out_b.voxels(); ++v)
      CHECK(out_b.channels[c].flat(v) == pb.channels[c].flat(v));
}

TEST_CASE("fusion: teacher swap with complemented weights keeps the argmax") {
  Rng rng(24);
  const Dims dims{6, 4, 4};
  const ProbMap pa = random_probs(dims, rng);
  const ProbMap pb = random_probs(dims, rng);
  FusionConfig cfg;
  const PseudoLabelResult r1 = make_pseudo_labels(pa, pb, cfg);
  FusionConfig swapped = cfg;
  swapped.omega0 = 1.0 - cfg.omega0;
  swapped.omega1 = 1.0 - cfg.omega1;
  const PseudoLabelResult r2 = make_pseudo_labels(pb, pa, swapped);
  CHECK(r1.pseudo.grid.data() == r2.pseudo.grid.data());
}

TEST_CASE("make_pseudo_labels: perfect consensus reproduces phantom truth") {
  PhantomSpec spec;
  spec.noise_sigma = {0.0, 0.0, 0.0};
  spec.calibration = {0.0, 0.0};
  const PhantomCase pc = generate_case(spec, 9);
  ProbMap one_hot;
  one_hot.classes = ClassTable::seg3();
  const Dims dims = pc.truth_seg.grid.dims();
  for (int c = 0; c < 3; ++c)
    one_hot.channels.emplace_back(dims, pc.truth_seg.grid.spacing(), 0.0f);
  for (std::size_t v = 0; v < pc.truth_seg.grid.size(); ++v)
    one_hot.channels[pc.truth_seg.grid.flat(v)].flat(v) = 1.0f;

  const PseudoLabelResult res = make_pseudo_labels(one_hot, one_hot, FusionConfig{});
  CHECK(res.pseudo.grid.data() == pc.truth_seg.grid.data());
  CHECK(res.diagnostics.head_start == 0);
  CHECK(res.diagnostics.head_end >= res.diagnostics.head_start);
  CHECK(res.diagnostics.class_voxels.at(ClassTable::kTumor) > 0);
}

TEST_CASE("make_pseudo_labels: all-background teachers give an empty result") {
  ProbMap bg;
  bg.classes = ClassTable::seg3();
  for (int c = 0; c < 3; ++c) bg.channels.emplace_back(Dims{4, 4, 4}, Spacing{1, 1, 1}, 0.0f);
  for (std::size_t v = 0; v < bg.voxels(); ++v) bg.channels[0].flat(v) = 1.0f;
  const PseudoLabelResult res = make_pseudo_labels(bg, bg, FusionConfig{});
  for (std::size_t v = 0; v < res.pseudo.grid.size(); ++v) CHECK(res.pseudo.grid.flat(v) == 0);
  CHECK(res.diagnostics.head_start == -1);
  CHECK(res.diagnostics.head_end == -1);
  for (std::size_t i = 0; i < res.head.size(); ++i) CHECK(res.head.flat(i) == 0);
}

TEST_CASE("make_pseudo_labels: 20 random seeds agree with the scalar oracle") {
  for (int seed = 0; seed < 20; ++seed) {
    Rng rng(3000 + seed);
    const Dims dims{8, 6, 5};
    const ProbMap pa = random_probs(dims, rng);
    const ProbMap pb = random_probs(dims, rng);
    FusionConfig cfg;
    cfg.omega0 = rng.uniform(0.0, 1.0);
    cfg.omega1 = rng.uniform(0.0, 1.0);
    cfg.axis = static_cast<int>(rng.below(3));
    cfg.direction = rng.uniform() < 0.5 ? SliceDirection::ascending : SliceDirection::descending;
    const PseudoLabelResult got = make_pseudo_labels(pa, pb, cfg);
    const LabelMap want = pseudo_oracle(pa, pb, cfg);
    REQUIRE(got.pseudo.grid.data() == want.grid.data());
  }
}

TEST_CASE("fusion config: out-of-range weights are rejected") {
  FusionConfig cfg;
  cfg.omega0 = 1.2;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = FusionConfig{};
  cfg.head_fraction = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = FusionConfig{};
  cfg.axis = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
