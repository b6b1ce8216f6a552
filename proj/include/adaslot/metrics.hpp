#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "adaslot/scenegen.hpp"

namespace adaslot {

// A per-image labeling.  Undefined metric values are reported as quiet NaN
// markers; dataset aggregation excludes them and logs the exclusion count.
struct Segmentation {
  std::int64_t h = 0, w = 0;
  std::vector<int> labels;      // per pixel; -1 = no label (nothing kept)
  std::vector<std::uint8_t> fg;  // foreground flags
  int count = 0;                 // emitted masks (labels winning >= 1 pixel)
};

// Ground-truth view of a scene: labels = instance ids, background 0.
Segmentation gt_segmentation(const SceneSample& s);

// Per-pixel argmax of m-tilde over kept slots (z != 0), ties to the lowest
// slot id.  masks is (k, h, w) row-major.  All-dropped Z gives an empty
// segmentation with count 0.
Segmentation extract_segmentation(const std::vector<double>& masks,
                                  std::int64_t k, std::int64_t h,
                                  std::int64_t w,
                                  const std::vector<double>& z);

// Pair-counting family over unordered pixel pairs (contingency-based, never
// pair enumeration).  fg_only restricts to the gt foreground.  Fewer than
// two eligible pixels -> all NaN.
struct PairMetrics {
  double ari = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;
};
PairMetrics pair_counting(const Segmentation& pred, const Segmentation& gt,
                          bool fg_only);

// NMI with arithmetic normalization; AMI with the hypergeometric
// expected-MI correction.  Degenerate normalizers -> NaN (except the
// identical single-cluster case, which is 1 by definition).
struct InfoMetrics {
  double ami = 0.0, nmi = 0.0;
};
InfoMetrics info_metrics(const Segmentation& pred, const Segmentation& gt,
                         bool fg_only);

// mBO (mean over gt masks, background included, of best-overlap IoU),
// CorLoc indicator (any gt object mask localized at IoU >= threshold), and
// foreground purity.  No predicted masks -> all zero.
struct MatchMetrics {
  double mbo = 0.0, corloc = 0.0, purity = 0.0;
};
MatchMetrics matching_metrics(const Segmentation& pred, const Segmentation& gt,
                              double iou_thresh);

// Minimum-cost assignment of min(n, m) pairs for a row-major n x m cost
// matrix with finite entries.  Returns (row, col) pairs sorted by row; among
// optimal assignments the lexicographically smallest pair list is chosen.
std::vector<std::pair<int, int>> hungarian(const std::vector<double>& cost,
                                           int n, int m);

// Count statistics over per-image (predicted, ground-truth) object counts.
struct CountStats {
  std::vector<std::int64_t> pred_hist, gt_hist;         // index = count
  std::vector<std::vector<std::int64_t>> confusion;     // [gt][pred]
  std::vector<std::vector<double>> confusion_rows;      // row-normalized
  double spearman = 0.0;  // tie-averaged rank correlation; NaN if degenerate
};
CountStats count_stats(const std::vector<std::pair<int, int>>& pred_gt);

// Tie-averaged ranks (average of 1-based positions over each tied run).
std::vector<double> average_ranks(const std::vector<double>& v);

}  // namespace adaslot
