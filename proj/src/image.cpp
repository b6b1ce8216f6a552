#include "adaslot/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "adaslot/errors.hpp"

namespace adaslot {

namespace {

unsigned char to_byte(double v) {
  v = std::min(1.0, std::max(0.0, v));
  return static_cast<unsigned char>(std::lround(v * 255.0));
}

void write_p6(const std::string& path, int h, int w,
              const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("ppm: cannot open '" + path + "' for write");
  out << "P6\n" << w << ' ' << h << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("ppm: write failed for '" + path + "'");
}

}  // namespace

void write_ppm(const std::string& path, int h, int w,
               const std::vector<double>& rgb) {
  if (rgb.size() != static_cast<std::size_t>(h) * w * 3)
    throw ShapeError("ppm: expected " + std::to_string(h * w * 3) +
                     " values, got " + std::to_string(rgb.size()));
  std::vector<unsigned char> bytes(rgb.size());
  for (std::size_t i = 0; i < rgb.size(); ++i) bytes[i] = to_byte(rgb[i]);
  write_p6(path, h, w, bytes);
}

std::vector<double> id_map_rgb(const std::vector<int>& ids) {
  static const unsigned char palette[][3] = {
      {230, 60, 60},  {70, 200, 80},   {70, 90, 230},  {240, 220, 60},
      {220, 70, 210}, {60, 220, 220},  {240, 150, 40}, {150, 230, 60},
      {140, 80, 240}, {240, 120, 160}, {90, 160, 120}, {180, 180, 250}};
  constexpr int kPaletteSize = sizeof(palette) / sizeof(palette[0]);
  std::vector<double> rgb(ids.size() * 3);
  for (std::size_t p = 0; p < ids.size(); ++p) {
    if (ids[p] <= 0) {
      rgb[p * 3 + 0] = rgb[p * 3 + 1] = rgb[p * 3 + 2] = 40.0 / 255.0;
    } else {
      const auto& c = palette[(ids[p] - 1) % kPaletteSize];
      rgb[p * 3 + 0] = c[0] / 255.0;
      rgb[p * 3 + 1] = c[1] / 255.0;
      rgb[p * 3 + 2] = c[2] / 255.0;
    }
  }
  return rgb;
}

void write_id_map_ppm(const std::string& path, int h, int w,
                      const std::vector<int>& ids) {
  if (ids.size() != static_cast<std::size_t>(h) * w)
    throw ShapeError("ppm: expected " + std::to_string(h * w) +
                     " ids, got " + std::to_string(ids.size()));
  write_ppm(path, h, w, id_map_rgb(ids));
}

}  // namespace adaslot
