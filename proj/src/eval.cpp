#include "adaslot/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include "adaslot/errors.hpp"
#include "adaslot/image.hpp"
#include "adaslot/model.hpp"
#include "adaslot/rng.hpp"
#include "adaslot/train.hpp"
#include "json.hpp"

namespace adaslot {

namespace {

constexpr double kNan = std::numeric_limits<double>::quiet_NaN();

std::string fmt_num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

struct EvalForward {
  SceneSample sample;
  std::vector<double> masks;               // (K, H, W)
  std::vector<double> z;                   // (K)
  std::vector<std::vector<double>> slots;  // all K slot vectors
};

EvalForward run_forward(ParamStore& store, const RunConfig& cfg,
                        const SceneSource& source, std::int64_t index,
                        bool fixed_slots) {
  EvalForward out;
  out.sample = source.held_out(index);
  StepGraph g(store);
  const auto noise =
      draw_noise(cfg, cfg.seed,
                 rng::substream(rng::stream("eval.noise"),
                                static_cast<std::uint64_t>(index)));
  auto f = forward_image(g, cfg, source.image_size(), out.sample.image, noise,
                         fixed_slots ? KeepRule::kOnes : KeepRule::kMap);
  out.masks = f.masks.values();
  out.z = f.z.values();
  const auto& sv = f.slots.values();
  const auto d = static_cast<std::size_t>(cfg.d_slot);
  out.slots.resize(static_cast<std::size_t>(cfg.k_max));
  for (std::size_t i = 0; i < out.slots.size(); ++i) {
    out.slots[i].assign(sv.begin() + static_cast<std::ptrdiff_t>(i * d),
                        sv.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
  }
  return out;
}

// mean over images with a defined (finite) value; NaN when none
struct Mean {
  double sum = 0.0;
  std::int64_t n = 0;
  void add(double v) {
    if (std::isfinite(v)) {
      sum += v;
      ++n;
    }
  }
  double get() const { return n > 0 ? sum / static_cast<double>(n) : kNan; }
};

nlohmann::json num_or_null(double v) {
  return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr);
}

}  // namespace

MetricReport evaluate_model(ParamStore& store, const RunConfig& cfg,
                            const SceneSource& source, std::int64_t count,
                            bool fixed_slots) {
  if (count < 1) throw ContractError("evaluate_model: count must be >= 1");
  MetricReport r;
  r.n_images = count;
  const std::int64_t hw = source.image_size();
  Mean ari, prec, rec, ami, nmi, mbo, corloc, purity, kept;
  std::vector<std::pair<int, int>> count_pairs;
  std::int64_t exact = 0;
  for (std::int64_t i = 0; i < count; ++i) {
    const auto ef = run_forward(store, cfg, source, i, fixed_slots);
    const auto pred = extract_segmentation(ef.masks, cfg.k_max, hw, hw, ef.z);
    const auto gt = gt_segmentation(ef.sample);
    const auto pm = pair_counting(pred, gt, /*fg_only=*/true);
    const auto im = info_metrics(pred, gt, /*fg_only=*/true);
    const auto mm = matching_metrics(pred, gt, cfg.corloc_iou);

    ImageEval row;
    row.index = i;
    row.pred_count = pred.count;
    row.gt_count = gt.count;
    for (double zi : ef.z) row.kept += zi != 0.0 ? 1.0 : 0.0;
    row.ari = pm.ari;
    row.precision = pm.precision;
    row.recall = pm.recall;
    row.f1 = pm.f1;
    row.ami = im.ami;
    row.nmi = im.nmi;
    row.mbo = mm.mbo;
    row.corloc = mm.corloc;
    row.purity = mm.purity;
    r.images.push_back(row);

    if (!std::isfinite(pm.ari)) ++r.excluded_pair;
    if (!std::isfinite(im.nmi) && !std::isfinite(im.ami)) ++r.excluded_info;
    if (!std::isfinite(mm.purity)) ++r.excluded_purity;
    ari.add(pm.ari);
    prec.add(pm.precision);
    rec.add(pm.recall);
    ami.add(im.ami);
    nmi.add(im.nmi);
    mbo.add(mm.mbo);
    corloc.add(mm.corloc);
    purity.add(mm.purity);
    kept.add(row.kept);
    count_pairs.emplace_back(pred.count, gt.count);
    if (pred.count == gt.count) ++exact;
  }
  r.ari = ari.get();
  r.precision = prec.get();
  r.recall = rec.get();
  // report-level F1 is the harmonic mean of the aggregated P/R columns
  r.f1 = (std::isfinite(r.precision) && std::isfinite(r.recall))
             ? ((r.precision + r.recall) > 0
                    ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
                    : 0.0)
             : kNan;
  r.ami = ami.get();
  r.nmi = nmi.get();
  r.mbo = mbo.get();
  r.corloc = corloc.get();
  r.purity = purity.get();
  r.mean_kept = kept.get();
  r.count_acc = static_cast<double>(exact) / static_cast<double>(count);
  r.counts = count_stats(count_pairs);
  r.spearman = r.counts.spearman;
  return r;
}

std::string report_csv_header() {
  return "run_id,ari,precision,recall,f1,ami,nmi,mbo,corloc,purity,"
         "mean_kept_slots,spearman,count_acc,n_images,excluded_pair,"
         "excluded_info,excluded_purity";
}

std::string report_csv_row(const std::string& run_id, const MetricReport& r) {
  std::string s = run_id;
  for (double v : {r.ari, r.precision, r.recall, r.f1, r.ami, r.nmi, r.mbo,
                   r.corloc, r.purity, r.mean_kept, r.spearman, r.count_acc}) {
    s += ',';
    s += fmt_num(v);
  }
  s += ',' + std::to_string(r.n_images);
  s += ',' + std::to_string(r.excluded_pair);
  s += ',' + std::to_string(r.excluded_info);
  s += ',' + std::to_string(r.excluded_purity);
  return s;
}

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("report: cannot open '" + path + "' for write");
  out << text;
  if (!out) throw FormatError("report: write failed for '" + path + "'");
}

// low-to-high occupancy ramp: dark blue to yellow
void heat_color(double v, double* rgb) {
  v = std::min(1.0, std::max(0.0, v));
  rgb[0] = 0.05 + 0.90 * v;
  rgb[1] = 0.08 + 0.82 * v;
  rgb[2] = 0.30 - 0.12 * v;
}

}  // namespace

void write_report(const std::string& dir, const std::string& run_id,
                  const MetricReport& r) {
  std::filesystem::create_directories(dir);
  write_text(dir + "/metrics.csv",
             report_csv_header() + "\n" + report_csv_row(run_id, r) + "\n");

  nlohmann::json detail;
  detail["run_id"] = run_id;
  detail["images"] = nlohmann::json::array();
  for (const auto& row : r.images) {
    nlohmann::json j;
    j["index"] = row.index;
    j["pred_count"] = row.pred_count;
    j["gt_count"] = row.gt_count;
    j["kept"] = row.kept;
    j["ari"] = num_or_null(row.ari);
    j["precision"] = num_or_null(row.precision);
    j["recall"] = num_or_null(row.recall);
    j["f1"] = num_or_null(row.f1);
    j["ami"] = num_or_null(row.ami);
    j["nmi"] = num_or_null(row.nmi);
    j["mbo"] = num_or_null(row.mbo);
    j["corloc"] = num_or_null(row.corloc);
    j["purity"] = num_or_null(row.purity);
    detail["images"].push_back(std::move(j));
  }
  write_text(dir + "/detail.json", detail.dump(2) + "\n");

  // confusion heatmap: rows = gt count, columns = predicted count,
  // row-normalized fractions
  const auto& m = r.counts.confusion_rows;
  const std::size_t rows = m.size();
  const std::size_t cols = rows == 0 ? 0 : m[0].size();
  std::string csv = "gt_count";
  for (std::size_t c = 0; c < cols; ++c) csv += ",pred_" + std::to_string(c);
  csv += '\n';
  for (std::size_t g = 0; g < rows; ++g) {
    csv += std::to_string(g);
    for (std::size_t c = 0; c < cols; ++c) csv += ',' + fmt_num(m[g][c]);
    csv += '\n';
  }
  write_text(dir + "/heatmap.csv", csv);

  constexpr int kCell = 24;
  const int hh = static_cast<int>(rows) * kCell;
  const int ww = static_cast<int>(cols) * kCell;
  if (hh > 0 && ww > 0) {
    std::vector<double> rgb(static_cast<std::size_t>(hh) * ww * 3);
    for (int y = 0; y < hh; ++y) {
      for (int x = 0; x < ww; ++x) {
        double c[3];
        heat_color(m[static_cast<std::size_t>(y / kCell)]
                    [static_cast<std::size_t>(x / kCell)],
                   c);
        const std::size_t p = (static_cast<std::size_t>(y) * ww + x) * 3;
        rgb[p] = c[0];
        rgb[p + 1] = c[1];
        rgb[p + 2] = c[2];
      }
    }
    write_ppm(dir + "/heatmap.ppm", hh, ww, rgb);
  }
}

void write_side_by_side(const std::string& path, ParamStore& store,
                        const RunConfig& cfg, const SceneSource& source,
                        std::int64_t index, bool fixed_slots) {
  const auto ef = run_forward(store, cfg, source, index, fixed_slots);
  const std::int64_t hw = source.image_size();
  const auto pred = extract_segmentation(ef.masks, cfg.k_max, hw, hw, ef.z);
  std::vector<int> pred_ids(pred.labels.size());
  for (std::size_t p = 0; p < pred.labels.size(); ++p) {
    pred_ids[p] = pred.labels[p] + 1;  // slot 0 must not render as background
  }
  const auto gt_rgb = id_map_rgb(ef.sample.instance_map);
  const auto pred_rgb = id_map_rgb(pred_ids);

  constexpr std::int64_t kGap = 2;
  const std::int64_t w_out = 3 * hw + 2 * kGap;
  std::vector<double> canvas(static_cast<std::size_t>(hw * w_out * 3), 1.0);
  auto blit = [&](const std::vector<double>& src, std::int64_t x0) {
    for (std::int64_t y = 0; y < hw; ++y) {
      for (std::int64_t x = 0; x < hw; ++x) {
        for (int c = 0; c < 3; ++c) {
          canvas[static_cast<std::size_t>((y * w_out + x0 + x) * 3 + c)] =
              src[static_cast<std::size_t>((y * hw + x) * 3 + c)];
        }
      }
    }
  };
  blit(ef.sample.image, 0);
  blit(gt_rgb, hw + kGap);
  blit(pred_rgb, 2 * (hw + kGap));
  write_ppm(path, static_cast<int>(hw), static_cast<int>(w_out), canvas);
}

// ---- object-property probe --------------------------------------------

namespace {

double lse(const double* v, int n) {
  double c = v[0];
  for (int i = 1; i < n; ++i) c = std::max(c, v[i]);
  double s = 0.0;
  for (int i = 0; i < n; ++i) s += std::exp(v[i] - c);
  return std::log(s) + c;
}

int argmax_of(const double* v, int n) {
  int best = 0;
  for (int i = 1; i < n; ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

// per-(slot,object) probe loss from raw output values
double pair_cost(const double* row, const ObjectAttr& o, int ns, int nc,
                 double image_size) {
  const double ce_s = lse(row, ns) - row[o.shape_id];
  const double ce_c = lse(row + ns, nc) - row[ns + o.color_id];
  const double dx = row[ns + nc] - o.cx / image_size;
  const double dy = row[ns + nc + 1] - o.cy / image_size;
  return ce_s + ce_c + 0.5 * (dx * dx + dy * dy);
}

Tensor probe_forward(StepGraph& g, const std::vector<std::vector<double>>& s,
                     std::int64_t d) {
  const auto n = static_cast<std::int64_t>(s.size());
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(n * d));
  for (const auto& row : s) flat.insert(flat.end(), row.begin(), row.end());
  auto x = Tensor::constant({n, d}, std::move(flat));
  auto h = relu(add(matmul(x, g.use("probe.w1")), g.use("probe.b1")));
  return add(matmul(h, g.use("probe.w2")), g.use("probe.b2"));
}

// graph-side cross-entropy of `len` logits starting at `off` in `row`
Tensor ce_graph(const Tensor& row, std::int64_t off, std::int64_t len,
                std::int64_t target) {
  auto logits = slice(row, 0, off, len);
  double c = logits.values()[0];
  for (double v : logits.values()) c = std::max(c, v);
  auto l = add_scalar(log(sum(exp(add_scalar(logits, -c)))), c);
  return sub(l, sum(slice(logits, 0, target, 1)));
}

Tensor pair_loss_graph(const Tensor& out, std::int64_t i, const ObjectAttr& o,
                       int ns, int nc, double image_size) {
  auto row = reshape(slice(out, 0, i, 1), {out.shape()[1]});
  auto ce_s = ce_graph(row, 0, ns, o.shape_id);
  auto ce_c = ce_graph(row, ns, nc, o.color_id);
  auto center = slice(row, 0, ns + nc, 2);
  auto target =
      Tensor::constant({2}, {o.cx / image_size, o.cy / image_size});
  auto mse = scale(sum(square(sub(center, target))), 0.5);
  return add(add(ce_s, ce_c), mse);
}

}  // namespace

PropertyReport property_probe(const std::vector<PropItem>& train_items,
                              const std::vector<PropItem>& eval_items,
                              int num_shapes, int num_colors,
                              std::uint64_t seed) {
  if (num_shapes < 1 || num_colors < 1) {
    throw ContractError("property_probe: class counts must be >= 1");
  }
  PropertyReport rep;
  std::int64_t d = 0;
  for (const auto& it : train_items) {
    if (!it.slots.empty()) {
      d = static_cast<std::int64_t>(it.slots.front().size());
      break;
    }
  }
  for (const auto& it : eval_items) {
    rep.kept += static_cast<std::int64_t>(it.slots.size());
    rep.gt += static_cast<std::int64_t>(it.objects.size());
  }
  if (d == 0) {  // nothing retained anywhere: all gt objects are misses
    rep.r2 = kNan;
    return rep;
  }

  const std::int64_t hidden = 64;
  const std::int64_t out_dim = num_shapes + num_colors + 2;
  ParamStore ps;
  auto uniform_init = [&](const std::string& name, std::int64_t fin,
                          std::int64_t fout, std::int64_t n) {
    const double lim = std::sqrt(6.0 / static_cast<double>(fin + fout));
    const std::uint64_t strm =
        rng::substream(rng::stream("probe.init"), rng::stream(name));
    std::vector<double> v(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
      v[static_cast<std::size_t>(i)] =
          rng::uniform(seed, strm, static_cast<std::uint64_t>(i), -lim, lim);
    }
    return v;
  };
  ps.create("probe.w1", {d, hidden}, uniform_init("probe.w1", d, hidden, d * hidden));
  ps.create("probe.b1", {hidden}, std::vector<double>(hidden, 0.0));
  ps.create("probe.w2", {hidden, out_dim},
            uniform_init("probe.w2", hidden, out_dim, hidden * out_dim));
  ps.create("probe.b2", {out_dim}, std::vector<double>(out_dim, 0.0));

  const std::int64_t steps = 3000;
  const std::int64_t batch = 16;
  const double lr = 3e-3;
  const std::uint64_t batch_strm = rng::stream("probe.batch");
  const auto n_train = static_cast<std::uint64_t>(train_items.size());
  for (std::int64_t t = 0; t < steps && n_train > 0; ++t) {
    StepGraph g(ps);
    std::vector<Tensor> roots;  // one per image, alive until backward
    std::int64_t matched = 0;
    for (std::int64_t j = 0; j < batch; ++j) {
      const auto idx = rng::below(
          seed,
          rng::substream(batch_strm, static_cast<std::uint64_t>(t),
                         static_cast<std::uint64_t>(j)),
          0, n_train);
      const auto& item = train_items[static_cast<std::size_t>(idx)];
      if (item.slots.empty() || item.objects.empty()) continue;
      auto out = probe_forward(g, item.slots, d);
      const auto nk = static_cast<int>(item.slots.size());
      const auto no = static_cast<int>(item.objects.size());
      std::vector<double> cost(static_cast<std::size_t>(nk * no));
      for (int i = 0; i < nk; ++i) {
        const double* row = out.values().data() +
                            static_cast<std::size_t>(i) * out_dim;
        for (int o = 0; o < no; ++o) {
          cost[static_cast<std::size_t>(i * no + o)] = pair_cost(
              row, item.objects[static_cast<std::size_t>(o)], num_shapes,
              num_colors, item.image_size);
        }
      }
      Tensor img_loss;
      bool first = true;
      for (const auto& [i, o] : hungarian(cost, nk, no)) {
        auto l = pair_loss_graph(out, i,
                                 item.objects[static_cast<std::size_t>(o)],
                                 num_shapes, num_colors, item.image_size);
        img_loss = first ? l : add(img_loss, l);
        first = false;
        ++matched;
      }
      if (!first) roots.push_back(img_loss);
    }
    if (matched == 0) continue;
    for (const auto& root : roots) {
      backward(scale(root, 1.0 / static_cast<double>(matched)));
    }
    for (const auto& [param, leaf] : g.used()) {
      adam_update(*param, leaf.grad(), lr, t + 1);
    }
  }

  // frozen probe, held-out items
  double ss_res = 0.0, ss_tot = 0.0;
  std::vector<double> gx_all, gy_all;
  std::vector<std::array<double, 4>> matched_centers;  // px, py, gx, gy
  for (const auto& item : eval_items) {
    if (item.slots.empty() || item.objects.empty()) continue;
    StepGraph g(ps);
    auto out = probe_forward(g, item.slots, d);
    const auto nk = static_cast<int>(item.slots.size());
    const auto no = static_cast<int>(item.objects.size());
    std::vector<double> cost(static_cast<std::size_t>(nk * no));
    for (int i = 0; i < nk; ++i) {
      const double* row =
          out.values().data() + static_cast<std::size_t>(i) * out_dim;
      for (int o = 0; o < no; ++o) {
        cost[static_cast<std::size_t>(i * no + o)] =
            pair_cost(row, item.objects[static_cast<std::size_t>(o)],
                      num_shapes, num_colors, item.image_size);
      }
    }
    for (const auto& [i, o] : hungarian(cost, nk, no)) {
      const double* row =
          out.values().data() + static_cast<std::size_t>(i) * out_dim;
      const auto& obj = item.objects[static_cast<std::size_t>(o)];
      const bool shape_ok = argmax_of(row, num_shapes) == obj.shape_id;
      const bool color_ok =
          argmax_of(row + num_shapes, num_colors) == obj.color_id;
      const double px = row[num_shapes + num_colors] * item.image_size;
      const double py = row[num_shapes + num_colors + 1] * item.image_size;
      const double err = std::hypot(px - obj.cx, py - obj.cy);
      if (shape_ok && color_ok && err < 0.5 * obj.radius) ++rep.tp;
      matched_centers.push_back({row[num_shapes + num_colors],
                                 row[num_shapes + num_colors + 1],
                                 obj.cx / item.image_size,
                                 obj.cy / item.image_size});
    }
  }
  rep.precision = rep.kept > 0
                      ? static_cast<double>(rep.tp) /
                            static_cast<double>(rep.kept)
                      : 0.0;
  rep.recall = rep.gt > 0 ? static_cast<double>(rep.tp) /
                                static_cast<double>(rep.gt)
                          : 0.0;
  const double denom = static_cast<double>(rep.kept + rep.gt - rep.tp);
  rep.jaccard = denom > 0 ? static_cast<double>(rep.tp) / denom : 0.0;

  // pooled R^2 over both coordinates of the matched centers
  double mx = 0.0, my = 0.0;
  for (const auto& c : matched_centers) {
    mx += c[2];
    my += c[3];
  }
  if (!matched_centers.empty()) {
    mx /= static_cast<double>(matched_centers.size());
    my /= static_cast<double>(matched_centers.size());
  }
  for (const auto& c : matched_centers) {
    ss_res += (c[0] - c[2]) * (c[0] - c[2]) + (c[1] - c[3]) * (c[1] - c[3]);
    ss_tot += (c[2] - mx) * (c[2] - mx) + (c[3] - my) * (c[3] - my);
  }
  rep.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : kNan;
  return rep;
}

PropertyReport property_eval(ParamStore& store, const RunConfig& cfg,
                             const SceneSource& source,
                             std::int64_t train_count, std::int64_t eval_count,
                             bool fixed_slots) {
  if (train_count < 1 || eval_count < 1) {
    throw ContractError("property_eval: split sizes must be >= 1");
  }
  auto gather = [&](std::int64_t from, std::int64_t n) {
    std::vector<PropItem> items;
    items.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = from; i < from + n; ++i) {
      const auto ef = run_forward(store, cfg, source, i, fixed_slots);
      PropItem it;
      it.image_size = static_cast<double>(source.image_size());
      it.objects = ef.sample.attrs;
      for (std::size_t k = 0; k < ef.z.size(); ++k) {
        if (ef.z[k] != 0.0) it.slots.push_back(ef.slots[k]);
      }
      items.push_back(std::move(it));
    }
    return items;
  };
  const auto train_items = gather(0, train_count);
  const auto eval_items = gather(train_count, eval_count);
  return property_probe(train_items, eval_items, source.spec().num_shapes,
                        static_cast<int>(source.spec().colors.size()),
                        cfg.seed);
}

}  // namespace adaslot
