#pragma once

#include <string>
#include <vector>

namespace adaslot {

// Binary PPM (P6).  Values clamped to [0,1] and quantized to 8 bits.
void write_ppm(const std::string& path, int h, int w,
               const std::vector<double>& rgb);

// Instance/segment ids rendered with a fixed rotating palette; id 0 (or a
// negative id) is dark gray.  Returns H*W*3 values in [0,1].
std::vector<double> id_map_rgb(const std::vector<int>& ids);

void write_id_map_ppm(const std::string& path, int h, int w,
                      const std::vector<int>& ids);

}  // namespace adaslot
