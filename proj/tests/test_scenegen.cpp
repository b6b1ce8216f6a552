#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <fstream>
#include <set>

#include "adaslot/errors.hpp"
#include "adaslot/image.hpp"
#include "adaslot/scenegen.hpp"
#include "doctest.h"

using namespace adaslot;

namespace {

bool samples_equal(const SceneSample& a, const SceneSample& b) {
  if (a.n != b.n || a.image != b.image || a.instance_map != b.instance_map)
    return false;
  if (a.attrs.size() != b.attrs.size()) return false;
  for (std::size_t i = 0; i < a.attrs.size(); ++i) {
    const auto &x = a.attrs[i], &y = b.attrs[i];
    if (x.shape_id != y.shape_id || x.color_id != y.color_id || x.cx != y.cx ||
        x.cy != y.cy || x.radius != y.radius)
      return false;
  }
  return true;
}

}  // namespace

TEST_CASE("spec validation") {
  auto s = SceneSpec::defaults();
  CHECK_NOTHROW(s.validate());
  auto bad = s;
  bad.n_max = 9;  // exceeds k_gt_ceiling = 8
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s;
  bad.r_max = 40.0;  // >= image_size/2
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s;
  bad.colors.push_back(bad.colors.front());  // duplicate color
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = s;
  bad.n_min = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("single forced shape yields ids {0,1} and count 1") {
  auto spec = SceneSpec::defaults();
  spec.n_min = spec.n_max = 1;
  spec.num_shapes = 1;  // circles only
  auto s = generate(spec, 123, 0);
  CHECK(s.n == 1);
  CHECK(s.attrs.size() == 1);
  CHECK(s.attrs[0].shape_id == kCircle);
  std::set<int> ids(s.instance_map.begin(), s.instance_map.end());
  CHECK(ids == std::set<int>{0, 1});
}

TEST_CASE("generation is a pure function of (spec, seed, index)") {
  auto spec = SceneSpec::defaults();
  for (std::uint64_t i = 0; i < 5; ++i) {
    auto a = generate(spec, 7, i);
    auto b = generate(spec, 7, i);
    CHECK(samples_equal(a, b));
  }
  CHECK_FALSE(samples_equal(generate(spec, 7, 0), generate(spec, 7, 1)));
  CHECK_FALSE(samples_equal(generate(spec, 7, 0), generate(spec, 8, 0)));
}

TEST_CASE("object count distribution is uniform within 2 percent per bin") {
  auto spec = SceneSpec::defaults();
  spec.n_min = 1;
  spec.n_max = 4;
  const int n = 10000;
  int bins[5] = {0};
  for (int i = 0; i < n; ++i) bins[generate(spec, 18, i).n]++;
  CHECK(bins[0] == 0);
  for (int c = 1; c <= 4; ++c) {
    const double rel = std::abs(bins[c] - n / 4.0) / (n / 4.0);
    INFO("count ", c, " bin ", bins[c]);
    CHECK(rel <= 0.02);
  }
}

TEST_CASE("sample invariants hold across a corpus") {
  auto spec = SceneSpec::defaults();
  double fg_total = 0.0;
  for (int i = 0; i < 200; ++i) {
    auto s = generate(spec, 55, i);
    REQUIRE(s.n >= spec.n_min);
    REQUIRE(s.n <= spec.n_max);
    std::vector<int> pix(s.n + 1, 0);
    int fg = 0;
    for (int id : s.instance_map) {
      REQUIRE(id >= 0);
      REQUIRE(id <= s.n);
      pix[id]++;
      fg += id > 0;
    }
    for (int k = 1; k <= s.n; ++k) CHECK(pix[k] >= 1);  // visibility
    fg_total += static_cast<double>(fg) / s.instance_map.size();
    // flat shading: pixels of id k carry exactly palette[color_id(k)]
    const int sz = spec.image_size;
    for (int p = 0; p < sz * sz; ++p) {
      const int id = s.instance_map[p];
      const auto& want =
          id == 0 ? spec.background : spec.colors[s.attrs[id - 1].color_id];
      CHECK(s.image[p * 3 + 0] == want[0]);
      CHECK(s.image[p * 3 + 1] == want[1]);
      CHECK(s.image[p * 3 + 2] == want[2]);
    }
    // objects fully inside the frame
    for (const auto& a : s.attrs) {
      CHECK(a.cx >= a.radius);
      CHECK(a.cx <= sz - a.radius);
      CHECK(a.cy >= a.radius);
      CHECK(a.cy <= sz - a.radius);
      CHECK(a.radius >= spec.r_min);
      CHECK(a.radius <= spec.r_max);
    }
  }
  const double fg_mean = fg_total / 200.0;
  CHECK(fg_mean >= 0.05);
  CHECK(fg_mean <= 0.6);
}

TEST_CASE("re-rasterizing from attributes reproduces the sample exactly") {
  auto spec = SceneSpec::defaults();
  for (int i = 0; i < 20; ++i) {
    auto s = generate(spec, 99, i);
    std::vector<double> image;
    std::vector<int> map;
    rasterize(spec, s.attrs, image, map);
    CHECK(image == s.image);
    CHECK(map == s.instance_map);
  }
}

TEST_CASE("impossible specs raise a generation error") {
  SceneSpec spec = SceneSpec::defaults();
  spec.n_min = spec.n_max = 8;
  spec.r_min = spec.r_max = 12.0;
  spec.num_shapes = 1;
  spec.overlap_max = 0.0;  // doubling 0 never relaxes
  // centers live in a 40x40 box but disjoint radius-12 circles need pairwise
  // distance >= 24, which fits at most 4 of the 8 requested objects
  CHECK_THROWS_AS(generate(spec, 1, 0), GenerationError);
}

TEST_CASE("dataset file round-trips bit-exactly and records its spec") {
  auto spec = SceneSpec::defaults();
  const std::string path = "/tmp/adaslot_test_scenes.bin";
  write_dataset(spec, 31, 16, path);
  auto src = SceneSource::open(path);
  CHECK(src.count() == 16);
  CHECK(src.seed() == 31);
  CHECK(src.spec().n_max == spec.n_max);
  for (std::int64_t i = 0; i < 16; ++i) {
    auto from_file = src.get(i);
    auto regenerated = generate(spec, 31, i);
    CHECK(samples_equal(from_file, regenerated));
  }
  // held-out indices continue past the stored range
  CHECK(samples_equal(src.held_out(3), generate(spec, 31, 19)));

  // spec-backed source yields the same stream without the file
  auto lazy = SceneSource::open(path + ".spec.json");
  CHECK(samples_equal(lazy.get(5), src.get(5)));

  // truncation is detected loudly
  {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), {});
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
  }
  CHECK_THROWS_AS(SceneSource::open(path), FormatError);
  std::remove(path.c_str());
  std::remove((path + ".spec.json").c_str());
}

TEST_CASE("ppm writer emits well-formed P6") {
  const std::string path = "/tmp/adaslot_test_img.ppm";
  write_ppm(path, 2, 3, {1, 0, 0, 0, 1, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0.5,
                         0.5, 0.5});
  std::ifstream in(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(in)), {});
  CHECK(bytes.substr(0, 11) == "P6\n3 2\n255\n");
  REQUIRE(bytes.size() == 11 + 18);
  CHECK(static_cast<unsigned char>(bytes[11]) == 255);   // red pixel r
  CHECK(static_cast<unsigned char>(bytes[12]) == 0);     // red pixel g
  CHECK(static_cast<unsigned char>(bytes[11 + 15]) == 128);  // mid gray
  std::remove(path.c_str());
  CHECK_THROWS_AS(write_ppm(path, 2, 2, {0.0}), ShapeError);
}
