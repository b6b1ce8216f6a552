#include "adaslot/scenegen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "adaslot/errors.hpp"
#include "adaslot/rng.hpp"
#include "json.hpp"

namespace adaslot {

namespace {

constexpr int kAttemptsPerLevel = 100;
constexpr int kMaxLevels = 8;

bool point_in(const ObjectAttr& a, double px, double py) {
  const double dx = px - a.cx, dy = py - a.cy;
  switch (a.shape_id) {
    case kCircle:
      return dx * dx + dy * dy <= a.radius * a.radius;
    case kSquare:
      return std::abs(dx) <= a.radius && std::abs(dy) <= a.radius;
    case kTriangle: {
      // Equilateral, circumradius = radius, apex pointing up (-y).
      const double s = a.radius * 0.8660254037844386;  // r * sqrt(3)/2
      const double ax = a.cx, ay = a.cy - a.radius;
      const double bx = a.cx - s, by = a.cy + 0.5 * a.radius;
      const double cx2 = a.cx + s, cy2 = a.cy + 0.5 * a.radius;
      const double c1 = (bx - ax) * (py - ay) - (by - ay) * (px - ax);
      const double c2 = (cx2 - bx) * (py - by) - (cy2 - by) * (px - bx);
      const double c3 = (ax - cx2) * (py - cy2) - (ay - cy2) * (px - cx2);
      const bool neg = c1 < 0 || c2 < 0 || c3 < 0;
      const bool pos = c1 > 0 || c2 > 0 || c3 > 0;
      return !(neg && pos);
    }
    default:
      throw ContractError("unknown shape id " + std::to_string(a.shape_id));
  }
}

// Full-frame silhouette bitmask for overlap tests.
struct Silhouette {
  std::vector<std::uint64_t> words;
  int pixels = 0;
};

Silhouette silhouette_of(const ObjectAttr& a, int size) {
  Silhouette s;
  s.words.assign((static_cast<std::size_t>(size) * size + 63) / 64, 0);
  const int x0 = std::max(0, static_cast<int>(std::floor(a.cx - a.radius - 1)));
  const int x1 = std::min(size - 1, static_cast<int>(std::ceil(a.cx + a.radius + 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(a.cy - a.radius - 1)));
  const int y1 = std::min(size - 1, static_cast<int>(std::ceil(a.cy + a.radius + 1)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (point_in(a, x + 0.5, y + 0.5)) {
        const std::size_t p = static_cast<std::size_t>(y) * size + x;
        s.words[p >> 6] |= 1ULL << (p & 63);
        ++s.pixels;
      }
  return s;
}

double mask_iou(const Silhouette& a, const Silhouette& b) {
  int inter = 0, uni = 0;
  for (std::size_t w = 0; w < a.words.size(); ++w) {
    inter += __builtin_popcountll(a.words[w] & b.words[w]);
    uni += __builtin_popcountll(a.words[w] | b.words[w]);
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

}  // namespace

SceneSpec SceneSpec::defaults() {
  SceneSpec s;
  s.colors = {{0.90, 0.10, 0.10}, {0.10, 0.80, 0.15}, {0.15, 0.20, 0.90},
              {0.95, 0.85, 0.10}, {0.85, 0.15, 0.80}, {0.10, 0.85, 0.85}};
  return s;
}

void SceneSpec::validate() const {
  if (image_size < 8) throw ConfigError("scene: image_size must be >= 8");
  if (n_min < 1 || n_min > n_max)
    throw ConfigError("scene: need 1 <= n_min <= n_max");
  if (n_max > k_gt_ceiling)
    throw ConfigError("scene: n_max " + std::to_string(n_max) +
                      " exceeds k_gt_ceiling " + std::to_string(k_gt_ceiling));
  if (num_shapes < 1 || num_shapes > 3)
    throw ConfigError("scene: num_shapes must be in [1,3]");
  if (colors.empty()) throw ConfigError("scene: empty color palette");
  for (std::size_t i = 0; i < colors.size(); ++i)
    for (std::size_t j = i + 1; j < colors.size(); ++j)
      if (colors[i] == colors[j])
        throw ConfigError("scene: palette colors must be pairwise distinct");
  if (!(r_min > 0) || r_min > r_max)
    throw ConfigError("scene: need 0 < r_min <= r_max");
  if (!(r_max < image_size / 2.0))
    throw ConfigError("scene: r_max must be < image_size/2");
  if (overlap_max < 0) throw ConfigError("scene: overlap_max must be >= 0");
}

void rasterize(const SceneSpec& spec, const std::vector<ObjectAttr>& attrs,
               std::vector<double>& image, std::vector<int>& instance_map) {
  const int size = spec.image_size;
  image.assign(static_cast<std::size_t>(size) * size * 3, 0.0);
  instance_map.assign(static_cast<std::size_t>(size) * size, 0);
  for (int p = 0; p < size * size; ++p)
    for (int c = 0; c < 3; ++c) image[p * 3 + c] = spec.background[c];
  // Back-to-front: attrs[k] paints over attrs[0..k-1].
  for (std::size_t k = 0; k < attrs.size(); ++k) {
    const ObjectAttr& a = attrs[k];
    const auto& col = spec.colors.at(a.color_id);
    const int x0 = std::max(0, static_cast<int>(std::floor(a.cx - a.radius - 1)));
    const int x1 = std::min(size - 1, static_cast<int>(std::ceil(a.cx + a.radius + 1)));
    const int y0 = std::max(0, static_cast<int>(std::floor(a.cy - a.radius - 1)));
    const int y1 = std::min(size - 1, static_cast<int>(std::ceil(a.cy + a.radius + 1)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x)
        if (point_in(a, x + 0.5, y + 0.5)) {
          const std::size_t p = static_cast<std::size_t>(y) * size + x;
          instance_map[p] = static_cast<int>(k) + 1;
          image[p * 3 + 0] = col[0];
          image[p * 3 + 1] = col[1];
          image[p * 3 + 2] = col[2];
        }
  }
}

SceneSample generate(const SceneSpec& spec, std::uint64_t seed,
                     std::uint64_t index) {
  spec.validate();
  const std::uint64_t strm = rng::substream(rng::stream("scenegen"), index);
  std::uint64_t ctr = 0;
  auto uni = [&](double lo, double hi) {
    return rng::uniform(seed, strm, ctr++, lo, hi);
  };
  auto pick = [&](std::uint64_t n) {
    return static_cast<int>(rng::below(seed, strm, ctr++, n));
  };

  const int size = spec.image_size;
  // Object count is drawn once so retries cannot bias its distribution.
  const int n = spec.n_min + pick(spec.n_max - spec.n_min + 1);
  double policy = spec.overlap_max;

  SceneSample out;
  for (int attempt = 0;; ++attempt) {
    if (attempt == kAttemptsPerLevel * kMaxLevels)
      throw GenerationError(
          "scene generation exhausted its attempt budget (index " +
          std::to_string(index) + ", " + std::to_string(n) + " objects)");
    if (attempt > 0 && attempt % kAttemptsPerLevel == 0) policy *= 2.0;

    std::vector<ObjectAttr> attrs;
    std::vector<Silhouette> sils;
    bool ok = true;
    for (int i = 0; i < n && ok; ++i) {
      ObjectAttr a;
      a.shape_id = pick(spec.num_shapes);
      a.color_id = pick(spec.colors.size());
      a.radius = uni(spec.r_min, spec.r_max);
      a.cx = uni(a.radius, size - a.radius);
      a.cy = uni(a.radius, size - a.radius);
      Silhouette s = silhouette_of(a, size);
      if (s.pixels == 0) {
        ok = false;
        break;
      }
      for (const auto& prev : sils)
        if (mask_iou(prev, s) > policy) {
          ok = false;
          break;
        }
      if (ok) {
        attrs.push_back(a);
        sils.push_back(std::move(s));
      }
    }
    if (!ok) continue;

    rasterize(spec, attrs, out.image, out.instance_map);
    // Visibility: each id must survive occlusion with >= 1 pixel.
    std::vector<int> pixels(n + 1, 0);
    for (int id : out.instance_map) ++pixels[id];
    bool visible = true;
    for (int k = 1; k <= n; ++k) visible = visible && pixels[k] > 0;
    if (!visible) continue;

    out.n = n;
    out.attrs = std::move(attrs);
    return out;
  }
}

void write_dataset(const SceneSpec& spec, std::uint64_t seed,
                   std::int64_t count, const std::string& path) {
  spec.validate();
  if (count <= 0) throw ContractError("write_dataset: count must be positive");
  const int size = spec.image_size;
  const std::int64_t hw = static_cast<std::int64_t>(size) * size;
  NamedTensor images{"images", {count, size, size, 3},
                     std::vector<double>(count * hw * 3)};
  NamedTensor maps{"instance_maps", {count, size, size},
                   std::vector<double>(count * hw)};
  NamedTensor counts{"counts", {count}, std::vector<double>(count)};
  NamedTensor attrs{"attributes", {count, spec.n_max, 5},
                    std::vector<double>(count * spec.n_max * 5, -1.0)};
  for (std::int64_t i = 0; i < count; ++i) {
    SceneSample s = generate(spec, seed, static_cast<std::uint64_t>(i));
    std::copy(s.image.begin(), s.image.end(), images.values.begin() + i * hw * 3);
    for (std::int64_t p = 0; p < hw; ++p)
      maps.values[i * hw + p] = s.instance_map[p];
    counts.values[i] = s.n;
    for (int k = 0; k < s.n; ++k) {
      double* row = &attrs.values[(i * spec.n_max + k) * 5];
      row[0] = s.attrs[k].shape_id;
      row[1] = s.attrs[k].color_id;
      row[2] = s.attrs[k].cx;
      row[3] = s.attrs[k].cy;
      row[4] = s.attrs[k].radius;
    }
  }
  write_container(path, {images, maps, counts, attrs});
  std::ofstream side(path + ".spec.json", std::ios::trunc);
  if (!side)
    throw FormatError("write_dataset: cannot write sidecar for '" + path + "'");
  side << spec_to_json(spec, seed, count) << '\n';
}

std::string spec_to_json(const SceneSpec& spec, std::uint64_t seed,
                         std::int64_t count) {
  nlohmann::json j;
  j["image_size"] = spec.image_size;
  j["n_min"] = spec.n_min;
  j["n_max"] = spec.n_max;
  j["num_shapes"] = spec.num_shapes;
  j["colors"] = spec.colors;
  j["r_min"] = spec.r_min;
  j["r_max"] = spec.r_max;
  j["background"] = spec.background;
  j["overlap_max"] = spec.overlap_max;
  j["k_gt_ceiling"] = spec.k_gt_ceiling;
  j["seed"] = seed;
  j["count"] = count;
  return j.dump(2);
}

void spec_from_json(const std::string& text, SceneSpec& spec,
                    std::uint64_t& seed, std::int64_t& count) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("scene spec json: ") + e.what());
  }
  try {
    spec.image_size = j.at("image_size").get<int>();
    spec.n_min = j.at("n_min").get<int>();
    spec.n_max = j.at("n_max").get<int>();
    spec.num_shapes = j.at("num_shapes").get<int>();
    spec.colors = j.at("colors").get<std::vector<std::array<double, 3>>>();
    spec.r_min = j.at("r_min").get<double>();
    spec.r_max = j.at("r_max").get<double>();
    spec.background = j.at("background").get<std::array<double, 3>>();
    spec.overlap_max = j.at("overlap_max").get<double>();
    spec.k_gt_ceiling = j.at("k_gt_ceiling").get<int>();
    seed = j.at("seed").get<std::uint64_t>();
    count = j.at("count").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("scene spec json fields: ") + e.what());
  }
  spec.validate();
}

SceneSource SceneSource::open(const std::string& path) {
  auto read_text = [](const std::string& p) {
    std::ifstream in(p);
    if (!in) throw FormatError("cannot open '" + p + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  SceneSource src;
  if (path.size() >= 10 && path.substr(path.size() - 10) == ".spec.json") {
    spec_from_json(read_text(path), src.spec_, src.seed_, src.count_);
    return src;
  }
  spec_from_json(read_text(path + ".spec.json"), src.spec_, src.seed_,
                 src.count_);
  auto data = std::make_shared<std::vector<NamedTensor>>(read_container(path));
  const NamedTensor* images = find_tensor(*data, "images");
  const NamedTensor* maps = find_tensor(*data, "instance_maps");
  const NamedTensor* counts = find_tensor(*data, "counts");
  const NamedTensor* attrs = find_tensor(*data, "attributes");
  if (!images || !maps || !counts || !attrs)
    throw FormatError("dataset '" + path + "' is missing required tensors");
  const int size = src.spec_.image_size;
  if (images->shape != Shape{src.count_, size, size, 3} ||
      maps->shape != Shape{src.count_, size, size} ||
      counts->shape != Shape{src.count_} ||
      attrs->shape != Shape{src.count_, src.spec_.n_max, 5})
    throw FormatError("dataset '" + path + "' tensor shapes disagree with sidecar");
  src.data_ = std::move(data);
  return src;
}

SceneSource SceneSource::from_spec(const SceneSpec& spec, std::uint64_t seed,
                                   std::int64_t count) {
  spec.validate();
  if (count <= 0) throw ContractError("SceneSource: count must be positive");
  SceneSource src;
  src.spec_ = spec;
  src.seed_ = seed;
  src.count_ = count;
  return src;
}

SceneSample SceneSource::get(std::int64_t i) const {
  if (i < 0 || i >= count_)
    throw ContractError("SceneSource: index " + std::to_string(i) +
                        " out of range [0," + std::to_string(count_) + ")");
  if (!data_) return generate(spec_, seed_, static_cast<std::uint64_t>(i));
  const int size = spec_.image_size;
  const std::int64_t hw = static_cast<std::int64_t>(size) * size;
  const auto& images = *find_tensor(*data_, "images");
  const auto& maps = *find_tensor(*data_, "instance_maps");
  const auto& counts = *find_tensor(*data_, "counts");
  const auto& attrs = *find_tensor(*data_, "attributes");
  SceneSample s;
  s.n = static_cast<int>(counts.values[i]);
  s.image.assign(images.values.begin() + i * hw * 3,
                 images.values.begin() + (i + 1) * hw * 3);
  s.instance_map.resize(hw);
  for (std::int64_t p = 0; p < hw; ++p)
    s.instance_map[p] = static_cast<int>(maps.values[i * hw + p]);
  for (int k = 0; k < s.n; ++k) {
    const double* row = &attrs.values[(i * spec_.n_max + k) * 5];
    ObjectAttr a;
    a.shape_id = static_cast<int>(row[0]);
    a.color_id = static_cast<int>(row[1]);
    a.cx = row[2];
    a.cy = row[3];
    a.radius = row[4];
    s.attrs.push_back(a);
  }
  return s;
}

SceneSample SceneSource::held_out(std::int64_t i) const {
  if (i < 0) throw ContractError("SceneSource: negative held-out index");
  return generate(spec_, seed_, static_cast<std::uint64_t>(count_ + i));
}

}  // namespace adaslot
