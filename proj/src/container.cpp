#include "adaslot/container.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "adaslot/errors.hpp"

namespace adaslot {

namespace {

constexpr char kMagic[8] = {'A', 'D', 'S', 'L', 'O', 'T', '0', '1'};

void check_name(const std::string& name) {
  if (name.empty()) throw ContractError("container: empty tensor name");
  for (char c : name)
    if (c == ' ' || c == '\n' || c == '\r' || c == '\t')
      throw ContractError("container: whitespace in tensor name '" + name +
                          "'");
}

}  // namespace

void write_container(const std::string& path,
                     const std::vector<NamedTensor>& tensors) {
  std::ostringstream header;
  for (const auto& t : tensors) {
    check_name(t.name);
    if (numel(t.shape) != static_cast<std::int64_t>(t.values.size()))
      throw ShapeError("container: tensor '" + t.name + "' has " +
                       std::to_string(t.values.size()) + " values for shape " +
                       shape_str(t.shape));
    header << t.name << " dtype=f64 shape=";
    for (std::size_t i = 0; i < t.shape.size(); ++i) {
      if (i) header << ',';
      header << t.shape[i];
    }
    header << '\n';
  }
  header << '\n';
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("container: cannot open '" + path + "' for write");
  out.write(kMagic, sizeof(kMagic));
  const std::string h = header.str();
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& t : tensors)
    out.write(reinterpret_cast<const char*>(t.values.data()),
              static_cast<std::streamsize>(t.values.size() * sizeof(double)));
  out.flush();
  if (!out) throw FormatError("container: write failed for '" + path + "'");
}

std::vector<NamedTensor> read_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("container: cannot open '" + path + "'");
  char magic[8];
  in.read(magic, sizeof(magic));
  if (in.gcount() != 8 || std::memcmp(magic, kMagic, 8) != 0)
    throw FormatError("container: bad magic in '" + path + "'");
  std::vector<NamedTensor> tensors;
  std::string line;
  while (true) {
    if (!std::getline(in, line))
      throw FormatError("container: truncated header in '" + path + "'");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) break;  // header terminator
    std::istringstream ls(line);
    std::string name, dtype, shape_tok;
    if (!(ls >> name >> dtype >> shape_tok))
      throw FormatError("container: malformed header line '" + line + "'");
    std::string extra;
    if (ls >> extra)
      throw FormatError("container: trailing tokens in header line '" + line +
                        "'");
    if (dtype != "dtype=f64")
      throw FormatError("container: unsupported dtype in '" + line + "'");
    if (shape_tok.rfind("shape=", 0) != 0)
      throw FormatError("container: missing shape in '" + line + "'");
    NamedTensor t;
    t.name = name;
    const std::string dims = shape_tok.substr(6);
    if (!dims.empty()) {
      std::istringstream ds(dims);
      std::string d;
      while (std::getline(ds, d, ',')) {
        if (d.empty())
          throw FormatError("container: empty dim in '" + line + "'");
        std::size_t pos = 0;
        long long v = 0;
        try {
          v = std::stoll(d, &pos);
        } catch (const std::exception&) {
          throw FormatError("container: bad dim '" + d + "' in '" + line + "'");
        }
        if (pos != d.size() || v <= 0)
          throw FormatError("container: bad dim '" + d + "' in '" + line + "'");
        t.shape.push_back(v);
      }
    }
    tensors.push_back(std::move(t));
  }
  for (auto& t : tensors) {
    const std::int64_t n = numel(t.shape);
    t.values.resize(n);
    in.read(reinterpret_cast<char*>(t.values.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (in.gcount() != static_cast<std::streamsize>(n * sizeof(double)))
      throw FormatError("container: truncated payload for '" + t.name +
                        "' in '" + path + "'");
  }
  char probe;
  if (in.read(&probe, 1).gcount() != 0)
    throw FormatError("container: trailing bytes in '" + path + "'");
  return tensors;
}

const NamedTensor* find_tensor(const std::vector<NamedTensor>& tensors,
                               const std::string& name) {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

}  // namespace adaslot
