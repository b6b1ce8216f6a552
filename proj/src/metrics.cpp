#include "adaslot/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "adaslot/errors.hpp"

namespace adaslot {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

void check_same_grid(const Segmentation& pred, const Segmentation& gt) {
  if (pred.h != gt.h || pred.w != gt.w) {
    throw ShapeError("metrics: segmentations disagree on grid size");
  }
  const std::size_t n = static_cast<std::size_t>(pred.h * pred.w);
  if (pred.labels.size() != n || gt.labels.size() != n ||
      pred.fg.size() != n || gt.fg.size() != n) {
    throw ShapeError("metrics: segmentation buffers have the wrong length");
  }
}

// Contingency table over the selected pixels; labels are compacted in
// first-seen scan order so results are deterministic.
struct Contingency {
  std::vector<std::vector<std::int64_t>> n;  // rows = gt, cols = pred
  std::vector<std::int64_t> a;               // gt marginals
  std::vector<std::int64_t> b;               // pred marginals
  std::int64_t total = 0;
};

// first-seen-order label compaction; linear scan beats a map at the tiny
// label counts seen here and keeps the hot path allocation-light
int compact_id(std::vector<int>& keys, int v) {
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (keys[i] == v) return static_cast<int>(i);
  }
  keys.push_back(v);
  return static_cast<int>(keys.size()) - 1;
}

Contingency build_contingency(const Segmentation& pred, const Segmentation& gt,
                              bool fg_only) {
  check_same_grid(pred, gt);
  std::vector<int> gkeys, pkeys;
  for (std::size_t p = 0; p < pred.labels.size(); ++p) {
    if (fg_only && !gt.fg[p]) continue;
    compact_id(gkeys, gt.labels[p]);
    compact_id(pkeys, pred.labels[p]);
  }
  Contingency c;
  c.a.assign(gkeys.size(), 0);
  c.b.assign(pkeys.size(), 0);
  c.n.assign(gkeys.size(), std::vector<std::int64_t>(pkeys.size(), 0));
  for (std::size_t p = 0; p < pred.labels.size(); ++p) {
    if (fg_only && !gt.fg[p]) continue;
    const int g = compact_id(gkeys, gt.labels[p]);
    const int q = compact_id(pkeys, pred.labels[p]);
    ++c.n[std::size_t(g)][std::size_t(q)];
    ++c.a[std::size_t(g)];
    ++c.b[std::size_t(q)];
    ++c.total;
  }
  return c;
}

double choose2(std::int64_t n) { return 0.5 * static_cast<double>(n) * (n - 1); }

}  // namespace

Segmentation gt_segmentation(const SceneSample& s) {
  Segmentation out;
  const std::size_t n = s.instance_map.size();
  const auto side = static_cast<std::int64_t>(std::llround(std::sqrt(double(n))));
  if (static_cast<std::size_t>(side * side) != n) {
    throw ShapeError("gt_segmentation: instance map is not square");
  }
  out.h = side;
  out.w = side;
  out.labels = s.instance_map;
  out.fg.resize(n);
  for (std::size_t p = 0; p < n; ++p) out.fg[p] = s.instance_map[p] > 0;
  out.count = s.n;
  return out;
}

Segmentation extract_segmentation(const std::vector<double>& masks,
                                  std::int64_t k, std::int64_t h,
                                  std::int64_t w,
                                  const std::vector<double>& z) {
  if (k < 0 || h < 0 || w < 0 ||
      masks.size() != static_cast<std::size_t>(k * h * w) ||
      z.size() != static_cast<std::size_t>(k)) {
    throw ShapeError("extract_segmentation: masks must be (k, h, w) and z (k)");
  }
  const std::int64_t npix = h * w;
  Segmentation out;
  out.h = h;
  out.w = w;
  out.labels.assign(static_cast<std::size_t>(npix), -1);
  out.fg.assign(static_cast<std::size_t>(npix), 0);
  std::vector<std::int64_t> kept;
  for (std::int64_t i = 0; i < k; ++i) {
    if (z[static_cast<std::size_t>(i)] != 0.0) kept.push_back(i);
  }
  if (kept.empty()) return out;
  std::vector<std::int64_t> wins(static_cast<std::size_t>(k), 0);
  for (std::int64_t p = 0; p < npix; ++p) {
    std::int64_t best = kept[0];
    double best_v = masks[static_cast<std::size_t>(best * npix + p)];
    for (std::size_t j = 1; j < kept.size(); ++j) {
      const double v = masks[static_cast<std::size_t>(kept[j] * npix + p)];
      if (v > best_v) {  // ties keep the lowest slot id
        best_v = v;
        best = kept[j];
      }
    }
    out.labels[static_cast<std::size_t>(p)] = static_cast<int>(best);
    out.fg[static_cast<std::size_t>(p)] = 1;
    ++wins[static_cast<std::size_t>(best)];
  }
  for (std::int64_t i : kept) {
    if (wins[static_cast<std::size_t>(i)] > 0) ++out.count;
  }
  return out;
}

PairMetrics pair_counting(const Segmentation& pred, const Segmentation& gt,
                          bool fg_only) {
  const Contingency c = build_contingency(pred, gt, fg_only);
  if (pred.count == 0 || c.total < 2) {
    return {kNan, kNan, kNan, kNan};  // undefined; excluded from means
  }
  double tp = 0.0;
  for (const auto& row : c.n) {
    for (std::int64_t nij : row) tp += choose2(nij);
  }
  double gt_pairs = 0.0, pred_pairs = 0.0;
  for (std::int64_t ai : c.a) gt_pairs += choose2(ai);
  for (std::int64_t bj : c.b) pred_pairs += choose2(bj);
  const double all_pairs = choose2(c.total);
  const double fn = gt_pairs - tp;
  const double fp = pred_pairs - tp;
  const double tn = all_pairs - tp - fn - fp;

  PairMetrics m;
  m.precision = (tp + fp) > 0 ? tp / (tp + fp) : (fn == 0 ? 1.0 : 0.0);
  m.recall = (tp + fn) > 0 ? tp / (tp + fn) : (fp == 0 ? 1.0 : 0.0);
  m.f1 = (m.precision + m.recall) > 0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
  if (fn == 0 && fp == 0) {
    m.ari = 1.0;  // identical partitions, including the degenerate ones
  } else {
    m.ari = 2.0 * (tp * tn - fn * fp) /
            ((tp + fn) * (fn + tn) + (tp + fp) * (fp + tn));
  }
  return m;
}

InfoMetrics info_metrics(const Segmentation& pred, const Segmentation& gt,
                         bool fg_only) {
  const Contingency c = build_contingency(pred, gt, fg_only);
  if (pred.count == 0 || c.total < 2) return {kNan, kNan};
  const double nd = static_cast<double>(c.total);

  double hu = 0.0, hv = 0.0, mi = 0.0;
  for (std::int64_t ai : c.a) {
    if (ai > 0) hu -= (ai / nd) * std::log(ai / nd);
  }
  for (std::int64_t bj : c.b) {
    if (bj > 0) hv -= (bj / nd) * std::log(bj / nd);
  }
  for (std::size_t i = 0; i < c.a.size(); ++i) {
    for (std::size_t j = 0; j < c.b.size(); ++j) {
      const std::int64_t nij = c.n[i][j];
      if (nij > 0) {
        mi += (nij / nd) *
              std::log(nd * nij / (double(c.a[i]) * double(c.b[j])));
      }
    }
  }

  InfoMetrics out;
  if (c.a.size() == 1 && c.b.size() == 1) {
    out.nmi = 1.0;  // both single-cluster: identical partitions
    out.ami = 1.0;
    return out;
  }
  const double mean_h = 0.5 * (hu + hv);
  out.nmi = mi / mean_h;  // mean_h > 0 unless both partitions are trivial

  // Expected MI under the hypergeometric model of random labelings with the
  // observed marginals, computed with a log-factorial table.
  std::vector<double> lg(static_cast<std::size_t>(c.total) + 1);
  for (std::size_t t = 0; t < lg.size(); ++t) {
    lg[t] = std::lgamma(static_cast<double>(t) + 1.0);
  }
  double emi = 0.0;
  for (std::int64_t ai : c.a) {
    for (std::int64_t bj : c.b) {
      const std::int64_t lo = std::max<std::int64_t>(1, ai + bj - c.total);
      const std::int64_t hi = std::min(ai, bj);
      for (std::int64_t nij = lo; nij <= hi; ++nij) {
        const double term =
            (nij / nd) * std::log(nd * nij / (double(ai) * double(bj)));
        const double log_w =
            lg[std::size_t(ai)] + lg[std::size_t(bj)] +
            lg[std::size_t(c.total - ai)] + lg[std::size_t(c.total - bj)] -
            lg[std::size_t(c.total)] - lg[std::size_t(nij)] -
            lg[std::size_t(ai - nij)] - lg[std::size_t(bj - nij)] -
            lg[std::size_t(c.total - ai - bj + nij)];
        emi += term * std::exp(log_w);
      }
    }
  }
  const double denom = mean_h - emi;
  out.ami = std::abs(denom) < 1e-12 ? kNan : (mi - emi) / denom;
  return out;
}

MatchMetrics matching_metrics(const Segmentation& pred, const Segmentation& gt,
                              double iou_thresh) {
  check_same_grid(pred, gt);
  if (iou_thresh <= 0.0 || iou_thresh > 1.0) {
    throw ContractError("matching_metrics: iou threshold must be in (0, 1]");
  }
  MatchMetrics out;
  if (pred.count == 0) return out;

  // Joint pixel counts between every gt mask (background is the fg == 0
  // region) and every predicted mask.
  std::vector<int> gkeys, pkeys;
  const std::size_t npix = pred.labels.size();
  for (std::size_t p = 0; p < npix; ++p) {
    const int glabel = gt.fg[p] ? gt.labels[p] : std::numeric_limits<int>::min();
    compact_id(gkeys, glabel);
    compact_id(pkeys, pred.labels[p]);
  }
  std::vector<std::int64_t> gsize(gkeys.size(), 0), psize(pkeys.size(), 0);
  std::vector<std::vector<std::int64_t>> inter(
      gkeys.size(), std::vector<std::int64_t>(pkeys.size(), 0));
  std::vector<std::uint8_t> is_object(gkeys.size(), 0);
  for (std::size_t p = 0; p < npix; ++p) {
    const int glabel = gt.fg[p] ? gt.labels[p] : std::numeric_limits<int>::min();
    const auto g = std::size_t(compact_id(gkeys, glabel));
    const auto q = std::size_t(compact_id(pkeys, pred.labels[p]));
    ++gsize[g];
    ++psize[q];
    ++inter[g][q];
    if (gt.fg[p]) is_object[g] = 1;
  }

  double iou_sum = 0.0;
  bool localized = false;
  for (std::size_t g = 0; g < gkeys.size(); ++g) {
    double best = 0.0;
    for (std::size_t q = 0; q < pkeys.size(); ++q) {
      const double uni =
          double(gsize[g]) + double(psize[q]) - double(inter[g][q]);
      if (uni > 0) best = std::max(best, double(inter[g][q]) / uni);
    }
    iou_sum += best;
    if (is_object[g] && best >= iou_thresh) localized = true;
  }
  out.mbo = iou_sum / static_cast<double>(gkeys.size());
  out.corloc = localized ? 1.0 : 0.0;

  // Purity over foreground pixels: each predicted cluster votes for its
  // majority gt object.
  const Contingency c = build_contingency(pred, gt, /*fg_only=*/true);
  if (c.total == 0) {
    out.purity = kNan;
    return out;
  }
  double majority = 0.0;
  for (std::size_t j = 0; j < c.b.size(); ++j) {
    std::int64_t best = 0;
    for (std::size_t i = 0; i < c.a.size(); ++i) {
      best = std::max(best, c.n[i][j]);
    }
    majority += static_cast<double>(best);
  }
  out.purity = majority / static_cast<double>(c.total);
  return out;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Potential-based assignment (minimization) for an n x m matrix with
// n <= m; returns for each row its column and the optimal total cost.
double assign_rows(const std::vector<std::vector<double>>& a,
                   std::vector<int>& row_to_col) {
  const int n = static_cast<int>(a.size());
  const int m = n == 0 ? 0 : static_cast<int>(a[0].size());
  std::vector<double> u(std::size_t(n) + 1, 0.0), v(std::size_t(m) + 1, 0.0);
  std::vector<int> p(std::size_t(m) + 1, 0), way(std::size_t(m) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(std::size_t(m) + 1, kInf);
    std::vector<char> used(std::size_t(m) + 1, 0);
    do {
      used[std::size_t(j0)] = 1;
      const int i0 = p[std::size_t(j0)];
      int j1 = -1;
      double delta = kInf;
      for (int j = 1; j <= m; ++j) {
        if (used[std::size_t(j)]) continue;
        const double cur = a[std::size_t(i0) - 1][std::size_t(j) - 1] -
                           u[std::size_t(i0)] - v[std::size_t(j)];
        if (cur < minv[std::size_t(j)]) {
          minv[std::size_t(j)] = cur;
          way[std::size_t(j)] = j0;
        }
        if (minv[std::size_t(j)] < delta) {
          delta = minv[std::size_t(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[std::size_t(j)]) {
          u[std::size_t(p[std::size_t(j)])] += delta;
          v[std::size_t(j)] -= delta;
        } else {
          minv[std::size_t(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[std::size_t(j0)] != 0);
    do {
      const int j1 = way[std::size_t(j0)];
      p[std::size_t(j0)] = p[std::size_t(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  row_to_col.assign(std::size_t(n), -1);
  double total = 0.0;
  for (int j = 1; j <= m; ++j) {
    if (p[std::size_t(j)] != 0) {
      row_to_col[std::size_t(p[std::size_t(j)]) - 1] = j - 1;
      total += a[std::size_t(p[std::size_t(j)]) - 1][std::size_t(j) - 1];
    }
  }
  return total;
}

// Optimal cost of assigning min(|rows|, |cols|) pairs within the index
// subsets, transposing when rows outnumber columns.
double subset_cost(const std::vector<double>& cost, int m,
                   const std::vector<int>& rows, const std::vector<int>& cols) {
  const std::size_t nr = rows.size(), nc = cols.size();
  if (nr == 0 || nc == 0) return 0.0;
  std::vector<std::vector<double>> a;
  if (nr <= nc) {
    a.assign(nr, std::vector<double>(nc));
    for (std::size_t i = 0; i < nr; ++i) {
      for (std::size_t j = 0; j < nc; ++j) {
        a[i][j] = cost[std::size_t(rows[i]) * std::size_t(m) +
                       std::size_t(cols[j])];
      }
    }
  } else {
    a.assign(nc, std::vector<double>(nr));
    for (std::size_t j = 0; j < nc; ++j) {
      for (std::size_t i = 0; i < nr; ++i) {
        a[j][i] = cost[std::size_t(rows[i]) * std::size_t(m) +
                       std::size_t(cols[j])];
      }
    }
  }
  std::vector<int> unused;
  return assign_rows(a, unused);
}

}  // namespace

std::vector<std::pair<int, int>> hungarian(const std::vector<double>& cost,
                                           int n, int m) {
  if (n < 0 || m < 0 ||
      cost.size() != static_cast<std::size_t>(n) * static_cast<std::size_t>(m)) {
    throw ShapeError("hungarian: cost must be a row-major n x m matrix");
  }
  for (double cstar : cost) {
    if (!std::isfinite(cstar)) {
      throw NumericError("hungarian: cost entries must be finite");
    }
  }
  std::vector<int> rows(static_cast<std::size_t>(n));
  std::vector<int> cols(static_cast<std::size_t>(m));
  std::iota(rows.begin(), rows.end(), 0);
  std::iota(cols.begin(), cols.end(), 0);

  // Fix pairs in lexicographic order, keeping the remaining subproblem
  // optimal; this selects the lexicographically smallest optimal assignment.
  std::vector<std::pair<int, int>> out;
  double base = subset_cost(cost, m, rows, cols);
  int remaining = std::min(n, m);
  while (remaining > 0) {
    const int i = rows.front();
    std::vector<int> rows_rest(rows.begin() + 1, rows.end());
    bool fixed = false;
    for (std::size_t cj = 0; cj < cols.size() && !fixed; ++cj) {
      const int j = cols[cj];
      std::vector<int> cols_rest = cols;
      cols_rest.erase(cols_rest.begin() + static_cast<std::ptrdiff_t>(cj));
      const double with_ij =
          cost[std::size_t(i) * std::size_t(m) + std::size_t(j)] +
          subset_cost(cost, m, rows_rest, cols_rest);
      if (with_ij <= base + 1e-9 * (1.0 + std::abs(base))) {
        out.emplace_back(i, j);
        base = with_ij -
               cost[std::size_t(i) * std::size_t(m) + std::size_t(j)];
        rows = std::move(rows_rest);
        cols = std::move(cols_rest);
        --remaining;
        fixed = true;
      }
    }
    if (!fixed) {
      // Every optimal assignment skips row i (possible only when rows
      // outnumber the pairs still needed).
      rows = std::move(rows_rest);
      base = subset_cost(cost, m, rows, cols);
    }
  }
  return out;
}

std::vector<double> average_ranks(const std::vector<double>& v) {
  const std::size_t n = v.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&v](std::size_t x, std::size_t y) { return v[x] < v[y]; });
  std::vector<double> ranks(n, 0.0);
  std::size_t s = 0;
  while (s < n) {
    std::size_t e = s;
    while (e + 1 < n && v[order[e + 1]] == v[order[s]]) ++e;
    const double r = 0.5 * (double(s + 1) + double(e + 1));
    for (std::size_t t = s; t <= e; ++t) ranks[order[t]] = r;
    s = e + 1;
  }
  return ranks;
}

CountStats count_stats(const std::vector<std::pair<int, int>>& pred_gt) {
  CountStats out;
  int max_p = 0, max_g = 0;
  for (const auto& [p, g] : pred_gt) {
    if (p < 0 || g < 0) throw ContractError("count_stats: counts must be >= 0");
    max_p = std::max(max_p, p);
    max_g = std::max(max_g, g);
  }
  out.pred_hist.assign(std::size_t(max_p) + 1, 0);
  out.gt_hist.assign(std::size_t(max_g) + 1, 0);
  out.confusion.assign(std::size_t(max_g) + 1,
                       std::vector<std::int64_t>(std::size_t(max_p) + 1, 0));
  for (const auto& [p, g] : pred_gt) {
    ++out.pred_hist[std::size_t(p)];
    ++out.gt_hist[std::size_t(g)];
    ++out.confusion[std::size_t(g)][std::size_t(p)];
  }
  out.confusion_rows.assign(out.confusion.size(),
                            std::vector<double>(std::size_t(max_p) + 1, 0.0));
  for (std::size_t g = 0; g < out.confusion.size(); ++g) {
    std::int64_t row = 0;
    for (std::int64_t ctr : out.confusion[g]) row += ctr;
    if (row > 0) {
      for (std::size_t p = 0; p < out.confusion[g].size(); ++p) {
        out.confusion_rows[g][p] =
            static_cast<double>(out.confusion[g][p]) / static_cast<double>(row);
      }
    }
  }

  if (pred_gt.size() < 2) {
    out.spearman = kNan;
    return out;
  }
  std::vector<double> ps(pred_gt.size()), gs(pred_gt.size());
  for (std::size_t i = 0; i < pred_gt.size(); ++i) {
    ps[i] = pred_gt[i].first;
    gs[i] = pred_gt[i].second;
  }
  const std::vector<double> rp = average_ranks(ps), rg = average_ranks(gs);
  const double nd = static_cast<double>(pred_gt.size());
  double mp = 0.0, mg = 0.0;
  for (std::size_t i = 0; i < rp.size(); ++i) {
    mp += rp[i];
    mg += rg[i];
  }
  mp /= nd;
  mg /= nd;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rp.size(); ++i) {
    sxy += (rp[i] - mp) * (rg[i] - mg);
    sxx += (rp[i] - mp) * (rp[i] - mp);
    syy += (rg[i] - mg) * (rg[i] - mg);
  }
  out.spearman = (sxx > 0 && syy > 0) ? sxy / std::sqrt(sxx * syy) : kNan;
  return out;
}

}  // namespace adaslot
