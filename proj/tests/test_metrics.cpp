#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "adaslot/errors.hpp"
#include "adaslot/metrics.hpp"
#include "adaslot/rng.hpp"
#include "adaslot/scenegen.hpp"
#include "doctest.h"

using namespace adaslot;

namespace {

Segmentation make_seg(std::vector<int> labels, std::vector<std::uint8_t> fg,
                      std::int64_t h, std::int64_t w) {
  Segmentation s;
  s.h = h;
  s.w = w;
  s.labels = std::move(labels);
  s.fg = std::move(fg);
  std::map<int, int> distinct;
  for (std::size_t p = 0; p < s.labels.size(); ++p) {
    if (s.labels[p] >= 0) distinct.emplace(s.labels[p], 0);
  }
  s.count = static_cast<int>(distinct.size());
  return s;
}

Segmentation row_seg(const std::vector<int>& labels) {
  return make_seg(labels,
                  std::vector<std::uint8_t>(labels.size(), 1), 1,
                  static_cast<std::int64_t>(labels.size()));
}

// Independent oracle: count unordered pixel pairs by direct enumeration.
struct PairCounts {
  double tp = 0, fp = 0, fn = 0, tn = 0;
};

PairCounts enumerate_pairs(const std::vector<int>& pred,
                           const std::vector<int>& gt) {
  PairCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    for (std::size_t j = i + 1; j < pred.size(); ++j) {
      const bool sg = gt[i] == gt[j], sp = pred[i] == pred[j];
      if (sg && sp) c.tp += 1;
      if (!sg && sp) c.fp += 1;
      if (sg && !sp) c.fn += 1;
      if (!sg && !sp) c.tn += 1;
    }
  }
  return c;
}

// Independent oracle: classical adjusted-index form of ARI built from an
// explicitly assembled contingency table.
double ari_classical(const std::vector<int>& pred, const std::vector<int>& gt) {
  std::map<std::pair<int, int>, std::int64_t> joint;
  std::map<int, std::int64_t> ga, pb;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    ++joint[{gt[i], pred[i]}];
    ++ga[gt[i]];
    ++pb[pred[i]];
  }
  auto c2 = [](std::int64_t n) { return 0.5 * double(n) * double(n - 1); };
  double sum_ij = 0, sum_a = 0, sum_b = 0;
  for (const auto& [k, n] : joint) sum_ij += c2(n);
  for (const auto& [k, n] : ga) sum_a += c2(n);
  for (const auto& [k, n] : pb) sum_b += c2(n);
  const double total = c2(static_cast<std::int64_t>(pred.size()));
  const double expected = sum_a * sum_b / total;
  const double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 1.0;
  return (sum_ij - expected) / (max_index - expected);
}

// Independent oracle: entropies and mutual information from the joint
// distribution assembled with maps.
void info_oracle(const std::vector<int>& pred, const std::vector<int>& gt,
                 double& hu, double& hv, double& mi) {
  std::map<std::pair<int, int>, std::int64_t> joint;
  std::map<int, std::int64_t> ga, pb;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    ++joint[{gt[i], pred[i]}];
    ++ga[gt[i]];
    ++pb[pred[i]];
  }
  const double n = static_cast<double>(pred.size());
  hu = hv = mi = 0.0;
  for (const auto& [k, c] : ga) hu -= (c / n) * std::log(c / n);
  for (const auto& [k, c] : pb) hv -= (c / n) * std::log(c / n);
  for (const auto& [k, c] : joint) {
    mi += (c / n) *
          std::log(n * double(c) / (double(ga[k.first]) * double(pb[k.second])));
  }
}

std::vector<int> random_labels(std::uint64_t seed, std::uint64_t strm,
                               std::size_t n, int n_labels) {
  std::vector<int> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    v[i] = static_cast<int>(
        rng::below(seed, strm, static_cast<std::uint64_t>(i),
                   static_cast<std::uint64_t>(n_labels)));
  }
  return v;
}

}  // namespace

TEST_CASE("extract_segmentation: argmax over kept slots, ties to lowest id") {
  // k=3, h=1, w=4; slot 1 dominates pixels 0-1, slot 2 pixels 2-3.
  const std::vector<double> masks = {
      0.2, 0.2, 0.1, 0.1,   // slot 0
      0.6, 0.6, 0.2, 0.2,   // slot 1
      0.2, 0.2, 0.7, 0.7};  // slot 2
  SUBCASE("all kept") {
    const auto s = extract_segmentation(masks, 3, 1, 4, {1, 1, 1});
    CHECK(s.labels == std::vector<int>({1, 1, 2, 2}));
    CHECK(s.count == 2);  // slot 0 wins no pixel
    CHECK(std::all_of(s.fg.begin(), s.fg.end(),
                      [](std::uint8_t f) { return f == 1; }));
  }
  SUBCASE("dropping the winner reassigns its pixels") {
    const auto s = extract_segmentation(masks, 3, 1, 4, {1, 0, 1});
    CHECK(s.labels == std::vector<int>({0, 0, 2, 2}));
    CHECK(s.count == 2);
  }
  SUBCASE("ties go to the lowest slot id") {
    const std::vector<double> tied = {0.5, 0.3, 0.5, 0.3, 0.5, 0.7};
    const auto s = extract_segmentation(tied, 3, 1, 2, {1, 1, 1});
    CHECK(s.labels == std::vector<int>({0, 2}));
  }
  SUBCASE("all dropped -> empty segmentation") {
    const auto s = extract_segmentation(masks, 3, 1, 4, {0, 0, 0});
    CHECK(s.count == 0);
    CHECK(s.labels == std::vector<int>({-1, -1, -1, -1}));
    CHECK(std::all_of(s.fg.begin(), s.fg.end(),
                      [](std::uint8_t f) { return f == 0; }));
  }
  SUBCASE("shape mismatch throws") {
    CHECK_THROWS_AS(extract_segmentation(masks, 3, 1, 3, {1, 1, 1}),
                    ShapeError);
    CHECK_THROWS_AS(extract_segmentation(masks, 3, 1, 4, {1, 1}), ShapeError);
  }
}

TEST_CASE("gt_segmentation mirrors the instance map") {
  auto spec = SceneSpec::defaults();
  spec.image_size = 32;
  const SceneSample s = generate(spec, 5, 0);
  const Segmentation g = gt_segmentation(s);
  CHECK(g.h == 32);
  CHECK(g.w == 32);
  CHECK(g.count == s.n);
  for (std::size_t p = 0; p < g.labels.size(); ++p) {
    CHECK(g.labels[p] == s.instance_map[p]);
    CHECK(g.fg[p] == (s.instance_map[p] > 0 ? 1 : 0));
  }
}

TEST_CASE("pair_counting: pinned examples") {
  const auto gt = row_seg({0, 0, 1, 1});
  SUBCASE("everything merged") {
    const auto m = pair_counting(row_seg({0, 0, 0, 0}), gt, false);
    CHECK(m.ari == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(m.precision == doctest::Approx(1.0 / 3.0));
    CHECK(m.recall == doctest::Approx(1.0));
  }
  SUBCASE("over-split") {
    const auto m = pair_counting(row_seg({0, 0, 1, 2}), gt, false);
    CHECK(m.precision == doctest::Approx(1.0));
    CHECK(m.recall == doctest::Approx(0.5));
    CHECK(m.f1 == doctest::Approx(2.0 / 3.0));
  }
  SUBCASE("identical partitions") {
    const auto m = pair_counting(row_seg({7, 7, 3, 3}), gt, false);
    CHECK(m.ari == doctest::Approx(1.0));
    CHECK(m.precision == doctest::Approx(1.0));
    CHECK(m.recall == doctest::Approx(1.0));
    CHECK(m.f1 == doctest::Approx(1.0));
  }
  SUBCASE("all singletons on both sides") {
    const auto m =
        pair_counting(row_seg({0, 1, 2, 3}), row_seg({3, 2, 1, 0}), false);
    CHECK(m.ari == doctest::Approx(1.0));
    CHECK(m.precision == doctest::Approx(1.0));
    CHECK(m.recall == doctest::Approx(1.0));
    CHECK(m.f1 == doctest::Approx(1.0));
  }
}

TEST_CASE("pair_counting and info_metrics match pair-enumeration oracles") {
  // Fuzz over random partitions of 2..12 elements; the implementation uses
  // contingency tables, the oracle enumerates pixel pairs directly.
  int trials = 0;
  for (std::uint64_t t = 0; t < 500; ++t) {
    const std::size_t n = 2 + static_cast<std::size_t>(
                                  rng::below(99, rng::substream(1, t), 0, 11));
    const int lg = 1 + static_cast<int>(rng::below(99, rng::substream(2, t), 0, 5));
    const int lp = 1 + static_cast<int>(rng::below(99, rng::substream(3, t), 0, 5));
    const auto gt = random_labels(99, rng::substream(4, t), n, lg);
    const auto pred = random_labels(99, rng::substream(5, t), n, lp);

    const auto m = pair_counting(row_seg(pred), row_seg(gt), false);
    const PairCounts c = enumerate_pairs(pred, gt);
    const double p_or = (c.tp + c.fp) > 0 ? c.tp / (c.tp + c.fp)
                                          : (c.fn == 0 ? 1.0 : 0.0);
    const double r_or = (c.tp + c.fn) > 0 ? c.tp / (c.tp + c.fn)
                                          : (c.fp == 0 ? 1.0 : 0.0);
    CHECK(m.precision == doctest::Approx(p_or).epsilon(1e-12));
    CHECK(m.recall == doctest::Approx(r_or).epsilon(1e-12));
    const double f_or =
        (p_or + r_or) > 0 ? 2 * p_or * r_or / (p_or + r_or) : 0.0;
    CHECK(m.f1 == doctest::Approx(f_or).epsilon(1e-12));
    CHECK(m.ari == doctest::Approx(ari_classical(pred, gt)).epsilon(1e-9));

    double hu, hv, mi;
    info_oracle(pred, gt, hu, hv, mi);
    const auto im = info_metrics(row_seg(pred), row_seg(gt), false);
    // the realized partitions can be single-cluster even when the label
    // alphabet is larger, so branch on the actual entropies
    if (hu == 0.0 && hv == 0.0) {
      CHECK(im.nmi == doctest::Approx(1.0));
    } else {
      CHECK(im.nmi == doctest::Approx(mi / (0.5 * (hu + hv))).epsilon(1e-9));
    }
    ++trials;
  }
  CHECK(trials == 500);
}

TEST_CASE("info_metrics: AMI matches a Monte-Carlo permutation oracle") {
  // Recover the implementation's expected-MI from (mi, ami, mean entropy)
  // and compare with the mean MI over random permutations of one labeling.
  const std::size_t n = 30;
  const auto gt = random_labels(4242, 1, n, 3);
  const auto pred = random_labels(4242, 2, n, 4);
  const auto im = info_metrics(row_seg(pred), row_seg(gt), false);

  double hu, hv, mi;
  info_oracle(pred, gt, hu, hv, mi);
  const double mean_h = 0.5 * (hu + hv);
  REQUIRE(im.ami != doctest::Approx(1.0));
  const double emi_impl = (mi - im.ami * mean_h) / (1.0 - im.ami);

  std::vector<int> shuffled = pred;
  double emi_mc = 0.0;
  const int perms = 20000;
  for (int t = 0; t < perms; ++t) {
    for (std::size_t i = n - 1; i > 0; --i) {  // Fisher-Yates, counter RNG
      const auto j = static_cast<std::size_t>(rng::below(
          7777, rng::substream(9, static_cast<std::uint64_t>(t)),
          static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(i + 1)));
      std::swap(shuffled[i], shuffled[j]);
    }
    double a, b, m;
    info_oracle(shuffled, gt, a, b, m);
    emi_mc += m;
  }
  emi_mc /= perms;
  CHECK(emi_impl == doctest::Approx(emi_mc).epsilon(0.05));
  CHECK(std::abs(emi_impl - emi_mc) < 0.01);
}

TEST_CASE("info_metrics: independent labels score near zero AMI") {
  const std::size_t n = 10000;
  const auto gt = random_labels(31, 1, n, 4);
  const auto pred = random_labels(31, 2, n, 6);
  const auto im = info_metrics(row_seg(pred), row_seg(gt), false);
  CHECK(std::abs(im.ami) < 0.02);
  // NMI is not chance-corrected, so it sits above AMI here.
  CHECK(im.nmi >= im.ami);
}

TEST_CASE("info_metrics: degenerate cluster structures") {
  SUBCASE("both single-cluster -> defined as 1") {
    const auto im = info_metrics(row_seg({2, 2, 2}), row_seg({5, 5, 5}), false);
    CHECK(im.nmi == doctest::Approx(1.0));
    CHECK(im.ami == doctest::Approx(1.0));
  }
  SUBCASE("single gt cluster vs split prediction -> zero information") {
    const auto im = info_metrics(row_seg({0, 1, 0, 1}), row_seg({3, 3, 3, 3}),
                                 false);
    CHECK(im.nmi == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(im.ami == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("identical two-cluster partitions") {
    const auto im = info_metrics(row_seg({1, 1, 0, 0}), row_seg({0, 0, 1, 1}),
                                 false);
    CHECK(im.nmi == doctest::Approx(1.0));
    CHECK(im.ami == doctest::Approx(1.0));
  }
}

TEST_CASE("label permutations leave every metric unchanged") {
  for (std::uint64_t t = 0; t < 20; ++t) {
    const std::size_t n = 36;
    auto gt = random_labels(17, rng::substream(1, t), n, 4);
    const auto pred = random_labels(17, rng::substream(2, t), n, 4);
    std::vector<std::uint8_t> fg(n, 1);
    const auto base_pair =
        pair_counting(make_seg(pred, fg, 6, 6), make_seg(gt, fg, 6, 6), false);
    const auto base_info =
        info_metrics(make_seg(pred, fg, 6, 6), make_seg(gt, fg, 6, 6), false);

    const int relabel[4] = {2, 3, 1, 0};
    std::vector<int> pred2(n);
    for (std::size_t i = 0; i < n; ++i) pred2[i] = relabel[pred[i]];
    const auto perm_pair =
        pair_counting(make_seg(pred2, fg, 6, 6), make_seg(gt, fg, 6, 6), false);
    const auto perm_info =
        info_metrics(make_seg(pred2, fg, 6, 6), make_seg(gt, fg, 6, 6), false);
    CHECK(perm_pair.ari == doctest::Approx(base_pair.ari).epsilon(1e-12));
    CHECK(perm_pair.f1 == doctest::Approx(base_pair.f1).epsilon(1e-12));
    CHECK(perm_info.nmi == doctest::Approx(base_info.nmi).epsilon(1e-12));
    CHECK(perm_info.ami == doctest::Approx(base_info.ami).epsilon(1e-12));
  }
}

TEST_CASE("foreground restriction changes only background pixels' influence") {
  // gt: 2x4 grid, top row = object 1, bottom row = background.
  const std::vector<int> gt_labels = {1, 1, 1, 1, 0, 0, 0, 0};
  const std::vector<std::uint8_t> gt_fg = {1, 1, 1, 1, 0, 0, 0, 0};
  const auto gt = make_seg(gt_labels, gt_fg, 2, 4);
  // pred A and B agree on the top row, differ on the bottom row.
  const auto pa = make_seg({0, 0, 1, 1, 2, 2, 2, 2},
                           std::vector<std::uint8_t>(8, 1), 2, 4);
  const auto pb = make_seg({0, 0, 1, 1, 0, 1, 0, 1},
                           std::vector<std::uint8_t>(8, 1), 2, 4);
  const auto fa = pair_counting(pa, gt, true);
  const auto fb = pair_counting(pb, gt, true);
  CHECK(fa.ari == doctest::Approx(fb.ari).epsilon(1e-12));
  CHECK(fa.recall == doctest::Approx(fb.recall).epsilon(1e-12));
  const auto ua = pair_counting(pa, gt, false);
  const auto ub = pair_counting(pb, gt, false);
  CHECK(ua.ari != doctest::Approx(ub.ari));
}

TEST_CASE("pair and info metrics report undefined markers") {
  const auto gt = row_seg({0, 0, 1, 1});
  SUBCASE("empty prediction") {
    Segmentation none = make_seg({-1, -1, -1, -1},
                                 std::vector<std::uint8_t>(4, 0), 1, 4);
    none.count = 0;
    const auto m = pair_counting(none, gt, false);
    CHECK(std::isnan(m.ari));
    CHECK(std::isnan(m.f1));
    const auto im = info_metrics(none, gt, false);
    CHECK(std::isnan(im.nmi));
  }
  SUBCASE("foreground with fewer than two pixels") {
    const auto gt1 = make_seg({1, 0, 0, 0}, {1, 0, 0, 0}, 1, 4);
    const auto m = pair_counting(row_seg({0, 0, 1, 1}), gt1, true);
    CHECK(std::isnan(m.ari));
    CHECK(std::isnan(m.precision));
  }
}

TEST_CASE("matching_metrics: pinned geometry") {
  // 2x4 grid: gt object 1 = top row; background = bottom row.
  const auto gt = make_seg({1, 1, 1, 1, 0, 0, 0, 0},
                           {1, 1, 1, 1, 0, 0, 0, 0}, 2, 4);
  SUBCASE("perfect prediction") {
    const auto pred = make_seg({4, 4, 4, 4, 9, 9, 9, 9},
                               std::vector<std::uint8_t>(8, 1), 2, 4);
    const auto m = matching_metrics(pred, gt, 0.5);
    CHECK(m.mbo == doctest::Approx(1.0));
    CHECK(m.corloc == doctest::Approx(1.0));
    CHECK(m.purity == doctest::Approx(1.0));
  }
  SUBCASE("half overlap sits exactly at the CorLoc threshold") {
    // pred 0 covers the left half of the object plus nothing else; its IoU
    // with the object is 2/4... construct: pred0 = first two pixels of the
    // top row, pred1 = the rest of the grid.
    const auto pred = make_seg({0, 0, 1, 1, 1, 1, 1, 1},
                               std::vector<std::uint8_t>(8, 1), 2, 4);
    const auto m = matching_metrics(pred, gt, 0.5);
    // object best IoU: pred0 -> 2/4 = 0.5; background best: pred1 -> 4/6.
    CHECK(m.mbo == doctest::Approx(0.5 * (0.5 + 4.0 / 6.0)));
    CHECK(m.corloc == doctest::Approx(1.0));  // >= threshold counts
    const auto strict = matching_metrics(pred, gt, 0.51);
    CHECK(strict.corloc == doctest::Approx(0.0));
    CHECK(strict.mbo == doctest::Approx(m.mbo));  // threshold only gates CorLoc
  }
  SUBCASE("no predicted masks") {
    Segmentation none = make_seg(std::vector<int>(8, -1),
                                 std::vector<std::uint8_t>(8, 0), 2, 4);
    none.count = 0;
    const auto m = matching_metrics(none, gt, 0.5);
    CHECK(m.mbo == 0.0);
    CHECK(m.corloc == 0.0);
    CHECK(m.purity == 0.0);
  }
  SUBCASE("threshold contract") {
    const auto pred = make_seg({0, 0, 1, 1, 1, 1, 1, 1},
                               std::vector<std::uint8_t>(8, 1), 2, 4);
    CHECK_THROWS_AS(matching_metrics(pred, gt, 0.0), ContractError);
    CHECK_THROWS_AS(matching_metrics(pred, gt, 1.5), ContractError);
  }
}

TEST_CASE("matching_metrics: purity pinned example") {
  // gt groups {a,b} and {c,d}; prediction groups {a,b,c} and {d} -> 3/4.
  const auto gt = make_seg({1, 1, 2, 2}, {1, 1, 1, 1}, 1, 4);
  const auto pred = make_seg({0, 0, 0, 1}, std::vector<std::uint8_t>(4, 1), 1, 4);
  const auto m = matching_metrics(pred, gt, 0.5);
  CHECK(m.purity == doctest::Approx(0.75));
}

TEST_CASE("matching_metrics: background is a gt mask for mBO only") {
  // Prediction that nails the object but splits the background still has
  // mbo < 1 while corloc stays 1.
  const auto gt = make_seg({1, 1, 0, 0}, {1, 1, 0, 0}, 1, 4);
  const auto pred = make_seg({5, 5, 0, 1}, std::vector<std::uint8_t>(4, 1), 1, 4);
  const auto m = matching_metrics(pred, gt, 0.5);
  CHECK(m.corloc == doctest::Approx(1.0));
  CHECK(m.mbo == doctest::Approx(0.5 * (1.0 + 0.5)));
  CHECK(m.purity == doctest::Approx(1.0));
}

TEST_CASE("matching_metrics: copying the gt maximizes every score") {
  for (std::uint64_t t = 0; t < 30; ++t) {
    const std::size_t n = 36;
    auto gt_labels = random_labels(23, rng::substream(1, t), n, 3);
    std::vector<std::uint8_t> fg(n);
    for (std::size_t i = 0; i < n; ++i) fg[i] = gt_labels[i] > 0;
    const auto gt = make_seg(gt_labels, fg, 6, 6);
    const auto pred_rand = make_seg(random_labels(23, rng::substream(2, t), n, 4),
                                    std::vector<std::uint8_t>(n, 1), 6, 6);
    const auto exact = make_seg(gt_labels, std::vector<std::uint8_t>(n, 1), 6, 6);
    const auto mr = matching_metrics(pred_rand, gt, 0.5);
    const auto me = matching_metrics(exact, gt, 0.5);
    CHECK(me.mbo == doctest::Approx(1.0));
    CHECK(me.purity == doctest::Approx(1.0));
    CHECK(mr.mbo <= 1.0 + 1e-12);
    CHECK(mr.mbo >= 0.0);
    CHECK(mr.purity <= 1.0 + 1e-12);
    if (std::count(fg.begin(), fg.end(), 1) > 0) {
      CHECK(me.corloc == doctest::Approx(1.0));
    }
  }
}

namespace {

// Brute-force oracle: scan every assignment of min(n, m) pairs, keeping the
// cheapest and, among ties, the lexicographically smallest pair list.
void brute_best(const std::vector<double>& cost, int n, int m,
                double& best_cost, std::vector<std::pair<int, int>>& best) {
  const int r = std::min(n, m);
  std::vector<int> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), 0);
  std::vector<int> row_sel(static_cast<std::size_t>(r));
  std::vector<char> row_used(static_cast<std::size_t>(n), 0);
  best_cost = std::numeric_limits<double>::infinity();
  best.clear();

  std::vector<int> cols(static_cast<std::size_t>(m));
  std::iota(cols.begin(), cols.end(), 0);

  // choose r rows (ordered ascending), then any permutation of r columns
  std::vector<int> comb(static_cast<std::size_t>(r));
  std::function<void(int, int)> choose = [&](int start, int depth) {
    if (depth == r) {
      std::vector<int> colsel(static_cast<std::size_t>(r));
      std::vector<char> cused(static_cast<std::size_t>(m), 0);
      std::function<void(int, double)> perm = [&](int d, double acc) {
        if (d == r) {
          std::vector<std::pair<int, int>> pairs;
          for (int q = 0; q < r; ++q) pairs.emplace_back(comb[std::size_t(q)], colsel[std::size_t(q)]);
          if (acc < best_cost - 1e-12 ||
              (std::abs(acc - best_cost) <= 1e-12 && pairs < best)) {
            best_cost = acc;
            best = pairs;
          }
          return;
        }
        for (int j = 0; j < m; ++j) {
          if (cused[std::size_t(j)]) continue;
          cused[std::size_t(j)] = 1;
          colsel[std::size_t(d)] = j;
          perm(d + 1, acc + cost[std::size_t(comb[std::size_t(d)]) * std::size_t(m) + std::size_t(j)]);
          cused[std::size_t(j)] = 0;
        }
      };
      perm(0, 0.0);
      return;
    }
    for (int i = start; i <= n - (r - depth); ++i) {
      comb[std::size_t(depth)] = i;
      choose(i + 1, depth + 1);
    }
  };
  choose(0, 0);
}

}  // namespace

TEST_CASE("hungarian: pinned examples") {
  SUBCASE("2x2 swap") {
    const auto a = hungarian({1, 2, 2, 1}, 2, 2);
    CHECK(a == std::vector<std::pair<int, int>>({{0, 0}, {1, 1}}));
  }
  SUBCASE("2x2 anti-diagonal") {
    const auto a = hungarian({5, 1, 1, 5}, 2, 2);
    CHECK(a == std::vector<std::pair<int, int>>({{0, 1}, {1, 0}}));
  }
  SUBCASE("all ties resolve lexicographically") {
    const auto a = hungarian(std::vector<double>(16, 3.0), 4, 4);
    CHECK(a == std::vector<std::pair<int, int>>(
                   {{0, 0}, {1, 1}, {2, 2}, {3, 3}}));
  }
  SUBCASE("non-finite costs rejected") {
    CHECK_THROWS_AS(
        hungarian({1.0, std::numeric_limits<double>::infinity(), 0.0, 1.0}, 2,
                  2),
        NumericError);
  }
  SUBCASE("empty dimensions") {
    CHECK(hungarian({}, 0, 0).empty());
    CHECK(hungarian({}, 0, 3).empty());
  }
}

TEST_CASE("hungarian matches brute force on random square matrices") {
  for (std::uint64_t t = 0; t < 200; ++t) {
    std::vector<double> cost(25);
    for (std::size_t i = 0; i < 25; ++i) {
      // small integer costs make ties common, exercising the tie-break
      cost[i] = static_cast<double>(rng::below(
          555, rng::substream(1, t), static_cast<std::uint64_t>(i), 10));
    }
    double bc;
    std::vector<std::pair<int, int>> bb;
    brute_best(cost, 5, 5, bc, bb);
    const auto got = hungarian(cost, 5, 5);
    double gc = 0;
    for (const auto& [i, j] : got) gc += cost[std::size_t(i) * 5 + std::size_t(j)];
    CHECK(gc == doctest::Approx(bc).epsilon(1e-12));
    CHECK(got == bb);
  }
}

TEST_CASE("hungarian matches brute force on rectangular matrices") {
  for (std::uint64_t t = 0; t < 100; ++t) {
    for (const auto& [n, m] : {std::pair<int, int>{3, 5}, {5, 3}, {1, 4}, {4, 1}}) {
      std::vector<double> cost(static_cast<std::size_t>(n * m));
      for (std::size_t i = 0; i < cost.size(); ++i) {
        cost[i] = static_cast<double>(rng::below(
            777, rng::substream(static_cast<std::uint64_t>(n * 16 + m), t),
            static_cast<std::uint64_t>(i), 8));
      }
      double bc;
      std::vector<std::pair<int, int>> bb;
      brute_best(cost, n, m, bc, bb);
      const auto got = hungarian(cost, n, m);
      REQUIRE(got.size() == static_cast<std::size_t>(std::min(n, m)));
      double gc = 0;
      for (const auto& [i, j] : got) {
        gc += cost[std::size_t(i) * std::size_t(m) + std::size_t(j)];
      }
      CHECK(gc == doctest::Approx(bc).epsilon(1e-12));
      CHECK(got == bb);
    }
  }
}

TEST_CASE("average_ranks: tie-averaged positions") {
  const auto r = average_ranks({10, 20, 20, 30});
  CHECK(r == std::vector<double>({1.0, 2.5, 2.5, 4.0}));
  const auto all_tied = average_ranks({7, 7, 7});
  CHECK(all_tied == std::vector<double>({2.0, 2.0, 2.0}));
}

TEST_CASE("count_stats: histograms, confusion, Spearman") {
  SUBCASE("perfect counts") {
    std::vector<std::pair<int, int>> pairs = {{1, 1}, {2, 2}, {3, 3}, {2, 2}};
    const auto s = count_stats(pairs);
    CHECK(s.spearman == doctest::Approx(1.0));
    CHECK(s.pred_hist == std::vector<std::int64_t>({0, 1, 2, 1}));
    CHECK(s.gt_hist == std::vector<std::int64_t>({0, 1, 2, 1}));
    CHECK(s.confusion[2][2] == 2);
    CHECK(s.confusion_rows[2][2] == doctest::Approx(1.0));
    CHECK(s.confusion_rows[0][0] == doctest::Approx(0.0));  // empty row
  }
  SUBCASE("reversed counts") {
    std::vector<std::pair<int, int>> pairs = {{1, 3}, {2, 2}, {3, 1}};
    CHECK(count_stats(pairs).spearman == doctest::Approx(-1.0));
  }
  SUBCASE("constant predictions -> undefined correlation") {
    std::vector<std::pair<int, int>> pairs = {{4, 1}, {4, 2}, {4, 3}};
    CHECK(std::isnan(count_stats(pairs).spearman));
  }
  SUBCASE("independent counts stay near zero") {
    std::vector<std::pair<int, int>> pairs;
    for (std::uint64_t i = 0; i < 1000; ++i) {
      pairs.emplace_back(
          static_cast<int>(rng::below(88, 1, i, 6)) + 1,
          static_cast<int>(rng::below(88, 2, i, 6)) + 1);
    }
    CHECK(std::abs(count_stats(pairs).spearman) < 0.1);
  }
  SUBCASE("ties use averaged ranks (hand value)") {
    // preds [1,1,2], gts [1,2,2]: ranks p=[1.5,1.5,3], g=[1,2.5,2.5]
    // centered: p-2=[-.5,-.5,1], g-2=[-1,.5,.5]; sxy=.5-.25+.5=.75? compute:
    // (-.5)(-1)+(-.5)(.5)+(1)(.5)=.5-.25+.5=.75; sxx=1.5, syy=1.5 -> .5
    std::vector<std::pair<int, int>> pairs = {{1, 1}, {1, 2}, {2, 2}};
    CHECK(count_stats(pairs).spearman == doctest::Approx(0.5));
  }
}
