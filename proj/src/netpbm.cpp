#include "winlin/netpbm.hpp"

#include <cctype>
#include <fstream>

#include "winlin/common.hpp"

namespace winlin {

namespace {

// Skips whitespace and '#' comment lines between header tokens.
int next_header_int(std::istream& in, const std::string& path) {
  while (true) {
    const int c = in.peek();
    if (c == EOF) throw IoError("netpbm: truncated header in " + path);
    if (std::isspace(c)) {
      in.get();
      continue;
    }
    if (c == '#') {
      std::string line;
      std::getline(in, line);
      continue;
    }
    break;
  }
  int value = 0;
  if (!(in >> value)) throw IoError("netpbm: malformed header in " + path);
  return value;
}

}  // namespace

PnmImage read_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("netpbm: cannot open " + path);
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6'))
    throw IoError("netpbm: " + path + " is not a binary PGM/PPM file");
  PnmImage img;
  img.channels = magic[1] == '5' ? 1 : 3;
  img.width = next_header_int(in, path);
  img.height = next_header_int(in, path);
  const int maxval = next_header_int(in, path);
  if (img.width <= 0 || img.height <= 0)
    throw IoError("netpbm: bad dimensions in " + path);
  if (maxval <= 0 || maxval > 255)
    throw IoError("netpbm: unsupported maxval " + std::to_string(maxval) + " in " + path);
  in.get();  // single whitespace byte after maxval
  const std::size_t count =
      static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height) *
      static_cast<std::size_t>(img.channels);
  img.pixels.resize(count);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(count));
  if (static_cast<std::size_t>(in.gcount()) != count)
    throw IoError("netpbm: truncated pixel data in " + path);
  return img;
}

void write_pnm(const std::string& path, const PnmImage& image) {
  if (image.channels != 1 && image.channels != 3)
    throw IoError("netpbm: cannot write " + std::to_string(image.channels) + "-channel image " +
                  path);
  const std::size_t count = static_cast<std::size_t>(image.width) *
                            static_cast<std::size_t>(image.height) *
                            static_cast<std::size_t>(image.channels);
  if (image.pixels.size() != count)
    throw IoError("netpbm: pixel buffer size mismatch writing " + path);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("netpbm: cannot write " + path);
  out << (image.channels == 1 ? "P5" : "P6") << "\n"
      << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(count));
  if (!out) throw IoError("netpbm: short write to " + path);
}

}  // namespace winlin
