#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "adaslot/container.hpp"

namespace adaslot {

// Shape ids, in palette order.
enum ShapeId : int { kCircle = 0, kSquare = 1, kTriangle = 2 };

struct SceneSpec {
  int image_size = 64;
  int n_min = 1;
  int n_max = 6;
  int num_shapes = 3;  // prefix of {circle, square, triangle}
  std::vector<std::array<double, 3>> colors;
  double r_min = 6.0;
  double r_max = 12.0;
  std::array<double, 3> background{0.5, 0.5, 0.5};
  double overlap_max = 0.1;  // max pairwise silhouette IoU
  int k_gt_ceiling = 8;      // n_max may not exceed this

  static SceneSpec defaults();
  void validate() const;  // throws ConfigError on violation
};

struct ObjectAttr {
  int shape_id = 0;
  int color_id = 0;
  double cx = 0.0;  // pixel coordinates of the center
  double cy = 0.0;
  double radius = 0.0;  // circle radius / square half-side / triangle circumradius
};

struct SceneSample {
  int n = 0;
  std::vector<double> image;     // H*W*3, values in [0,1]
  std::vector<int> instance_map; // H*W, 0 = background, 1..n = objects
  std::vector<ObjectAttr> attrs; // size n, attrs[k] describes id k+1
};

// Pure function of (spec, seed, index).  Objects are painted back-to-front;
// placements are rejection-resampled under the overlap policy and the
// every-object-visible rule, relaxing the policy by doubling when stuck.
SceneSample generate(const SceneSpec& spec, std::uint64_t seed,
                     std::uint64_t index);

// Rasterize from attributes alone (used by the consistency checks).
void rasterize(const SceneSpec& spec, const std::vector<ObjectAttr>& attrs,
               std::vector<double>& image, std::vector<int>& instance_map);

// Dataset file = container ("images", "instance_maps", "counts",
// "attributes") + "<path>.spec.json" sidecar recording spec, seed, count.
void write_dataset(const SceneSpec& spec, std::uint64_t seed,
                   std::int64_t count, const std::string& path);

std::string spec_to_json(const SceneSpec& spec, std::uint64_t seed,
                         std::int64_t count);
void spec_from_json(const std::string& text, SceneSpec& spec,
                    std::uint64_t& seed, std::int64_t& count);

// Uniform view over a materialized dataset file or an on-the-fly spec.
// `open` accepts either a container path (sidecar required) or a
// "*.spec.json" path (pure generation, no container).
class SceneSource {
 public:
  static SceneSource open(const std::string& path);
  static SceneSource from_spec(const SceneSpec& spec, std::uint64_t seed,
                               std::int64_t count);

  std::int64_t count() const { return count_; }
  int image_size() const { return spec_.image_size; }
  const SceneSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }

  // i in [0, count): training sample.  Materialized files are read back;
  // spec-backed sources regenerate.
  SceneSample get(std::int64_t i) const;
  // Held-out sample i >= 0, disjoint from training indices by construction.
  SceneSample held_out(std::int64_t i) const;

 private:
  SceneSpec spec_;
  std::uint64_t seed_ = 0;
  std::int64_t count_ = 0;
  std::shared_ptr<const std::vector<NamedTensor>> data_;  // null when spec-backed
};

}  // namespace adaslot
