#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "adaslot/config.hpp"
#include "adaslot/metrics.hpp"
#include "adaslot/params.hpp"
#include "adaslot/scenegen.hpp"

namespace adaslot {

// Per-image metric row; NaN marks undefined values.
struct ImageEval {
  std::int64_t index = 0;
  int pred_count = 0, gt_count = 0;
  double kept = 0.0;  // number of kept slots
  double ari = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;
  double ami = 0.0, nmi = 0.0;
  double mbo = 0.0, corloc = 0.0, purity = 0.0;
};

// Dataset-level aggregation: plain means over images whose value is defined,
// reduced in ascending image order; exclusion counts record skipped images.
struct MetricReport {
  double ari = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;
  double ami = 0.0, nmi = 0.0;
  double mbo = 0.0, corloc = 0.0, purity = 0.0;
  double mean_kept = 0.0;
  double spearman = 0.0;   // predicted vs gt count rank correlation
  double count_acc = 0.0;  // fraction of images with exact count agreement
  std::int64_t n_images = 0;
  std::int64_t excluded_pair = 0, excluded_info = 0, excluded_purity = 0;
  CountStats counts;
  std::vector<ImageEval> images;
};

// Forward `count` held-out scenes with the MAP keep rule (all-ones when
// fixed_slots) and aggregate every metric.  Deterministic in (store, cfg).
MetricReport evaluate_model(ParamStore& store, const RunConfig& cfg,
                            const SceneSource& source, std::int64_t count,
                            bool fixed_slots);

std::string report_csv_header();
std::string report_csv_row(const std::string& run_id, const MetricReport& r);

// Writes metrics.csv, detail.json, count heatmap (PPM + CSV matrix) into dir.
void write_report(const std::string& dir, const std::string& run_id,
                  const MetricReport& r);

// Side-by-side panels (input | gt segments | predicted segments) for held-out
// scene `index`, written as one PPM.
void write_side_by_side(const std::string& path, ParamStore& store,
                        const RunConfig& cfg, const SceneSource& source,
                        std::int64_t index, bool fixed_slots);

// ---- object-property probe --------------------------------------------

// Frozen per-image features for the downstream probe.
struct PropItem {
  std::vector<std::vector<double>> slots;  // retained slots, each length D
  std::vector<ObjectAttr> objects;
  double image_size = 0.0;
};

struct PropertyReport {
  double precision = 0.0, recall = 0.0, jaccard = 0.0, r2 = 0.0;
  std::int64_t tp = 0, kept = 0, gt = 0;
};

// Train a two-layer MLP on retained slots to predict (shape-id, color-id)
// with cross-entropy and normalized centers with MSE; Hungarian-match probe
// outputs to gt objects on total loss.  A true positive is a matched pair
// with both categories correct and center error under half the gt radius.
PropertyReport property_probe(const std::vector<PropItem>& train_items,
                              const std::vector<PropItem>& eval_items,
                              int num_shapes, int num_colors,
                              std::uint64_t seed);

// Extract retained-slot features from the frozen model over held-out scenes
// [0, train_count) and [train_count, train_count + eval_count), then probe.
PropertyReport property_eval(ParamStore& store, const RunConfig& cfg,
                             const SceneSource& source,
                             std::int64_t train_count, std::int64_t eval_count,
                             bool fixed_slots);

}  // namespace adaslot
