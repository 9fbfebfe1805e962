#include "mematch/image_io.hpp"

#include <png.h>

#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>

namespace mematch {

namespace {

// Reads the next PNM header token, skipping whitespace and # comments.
std::string pnm_token(std::istream& in, const std::string& path) {
  std::string tok;
  int ch = 0;
  while ((ch = in.get()) != EOF) {
    if (ch == '#') {
      while ((ch = in.get()) != EOF && ch != '\n') {
      }
      continue;
    }
    if (std::isspace(ch)) {
      if (!tok.empty()) return tok;
      continue;
    }
    tok.push_back(static_cast<char>(ch));
  }
  if (tok.empty()) throw IoError(concat("truncated PNM header in ", path));
  return tok;
}

int pnm_int(std::istream& in, const std::string& path, const char* what) {
  const std::string tok = pnm_token(in, path);
  try {
    return std::stoi(tok);
  } catch (const std::exception&) {
    throw IoError(concat("bad PNM ", what, " '", tok, "' in ", path));
  }
}

RawImage load_pnm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(concat("cannot open image: ", path));
  const std::string magic = pnm_token(in, path);
  const bool ascii = magic == "P2" || magic == "P3";
  const bool color = magic == "P3" || magic == "P6";
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6") {
    throw IoError(concat("unsupported PNM magic '", magic, "' in ", path));
  }
  const int w = pnm_int(in, path, "width");
  const int h = pnm_int(in, path, "height");
  const int maxval = pnm_int(in, path, "maxval");
  if (w < 1 || h < 1 || maxval < 1 || maxval > 255) {
    throw IoError(concat("unsupported PNM geometry/maxval in ", path, ": ", w, "x", h, " max ",
                         maxval));
  }
  const int channels = color ? 3 : 1;
  RawImage img;
  img.channels = channels;
  img.height = h;
  img.width = w;
  img.pixels.resize(static_cast<std::size_t>(channels) * h * w);
  const std::size_t count = static_cast<std::size_t>(h) * w * channels;
  if (ascii) {
    for (std::size_t i = 0; i < count; ++i) {
      const int v = pnm_int(in, path, "sample");
      // interleaved in file, planar in memory
      const std::size_t pix = i / channels, c = i % channels;
      img.pixels[c * static_cast<std::size_t>(h) * w + pix] =
          static_cast<float>(v) / static_cast<float>(maxval);
    }
  } else {
    std::vector<unsigned char> buf(count);
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(count));
    if (static_cast<std::size_t>(in.gcount()) != count) {
      throw IoError(concat("truncated PNM payload in ", path));
    }
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t pix = i / channels, c = i % channels;
      img.pixels[c * static_cast<std::size_t>(h) * w + pix] =
          static_cast<float>(buf[i]) / static_cast<float>(maxval);
    }
  }
  return img;
}

struct PngReader {
  png_structp png = nullptr;
  png_infop info = nullptr;
  std::FILE* fp = nullptr;

  ~PngReader() {
    if (png != nullptr) png_destroy_read_struct(&png, info != nullptr ? &info : nullptr, nullptr);
    if (fp != nullptr) std::fclose(fp);
  }
};

RawImage load_png(const std::string& path) {
  PngReader r;
  r.fp = std::fopen(path.c_str(), "rb");
  if (r.fp == nullptr) throw IoError(concat("cannot open image: ", path));
  r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (r.png == nullptr) throw IoError("png_create_read_struct failed");
  r.info = png_create_info_struct(r.png);
  if (r.info == nullptr) throw IoError("png_create_info_struct failed");
  if (setjmp(png_jmpbuf(r.png))) {
    throw IoError(concat("libpng failed to decode ", path));
  }
  png_init_io(r.png, r.fp);
  png_read_info(r.png, r.info);

  png_set_expand(r.png);           // palette/1-2-4 bit/tRNS -> 8-bit
  png_set_strip_16(r.png);         // 16-bit -> 8-bit
  png_set_strip_alpha(r.png);
  png_read_update_info(r.png, r.info);

  const int w = static_cast<int>(png_get_image_width(r.png, r.info));
  const int h = static_cast<int>(png_get_image_height(r.png, r.info));
  const int channels = static_cast<int>(png_get_channels(r.png, r.info));
  if (channels != 1 && channels != 3) {
    throw IoError(concat("unsupported PNG channel count ", channels, " in ", path));
  }
  std::vector<unsigned char> data(static_cast<std::size_t>(h) * w * channels);
  std::vector<png_bytep> rows(h);
  for (int y = 0; y < h; ++y) {
    rows[y] = data.data() + static_cast<std::size_t>(y) * w * channels;
  }
  png_read_image(r.png, rows.data());
  png_read_end(r.png, nullptr);

  RawImage img;
  img.channels = channels;
  img.height = h;
  img.width = w;
  img.pixels.resize(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::size_t pix = i / channels, c = i % channels;
    img.pixels[c * static_cast<std::size_t>(h) * w + pix] = static_cast<float>(data[i]) / 255.0f;
  }
  return img;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

bool is_supported_image(const std::string& filename) {
  const std::string f = lower(filename);
  return ends_with(f, ".pgm") || ends_with(f, ".ppm") || ends_with(f, ".png");
}

RawImage load_image(const std::string& path) {
  const std::string p = lower(path);
  if (ends_with(p, ".pgm") || ends_with(p, ".ppm")) return load_pnm(path);
  if (ends_with(p, ".png")) return load_png(path);
  throw IoError(concat("unsupported image extension: ", path));
}

void write_pgm(const RawImage& img, const std::string& path) {
  if (img.channels != 1) {
    throw ValueError(concat("write_pgm: grayscale only, got ", img.channels, " channels"));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError(concat("cannot write image: ", path));
  out << "P5\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> buf(img.pixels.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    const float v = std::min(1.0f, std::max(0.0f, img.pixels[i]));
    buf[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
  }
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

RawImage resize_bilinear(const RawImage& img, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) {
    throw ValueError(concat("resize_bilinear: bad target ", out_h, "x", out_w));
  }
  if (out_h == img.height && out_w == img.width) return img;
  RawImage out;
  out.channels = img.channels;
  out.height = out_h;
  out.width = out_w;
  out.pixels.resize(static_cast<std::size_t>(img.channels) * out_h * out_w);
  const float sy = static_cast<float>(img.height) / static_cast<float>(out_h);
  const float sx = static_cast<float>(img.width) / static_cast<float>(out_w);
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < out_h; ++y) {
      float fy = (static_cast<float>(y) + 0.5f) * sy - 0.5f;
      fy = std::min(std::max(fy, 0.0f), static_cast<float>(img.height - 1));
      const int y0 = static_cast<int>(fy);
      const int y1 = std::min(y0 + 1, img.height - 1);
      const float wy = fy - static_cast<float>(y0);
      for (int x = 0; x < out_w; ++x) {
        float fx = (static_cast<float>(x) + 0.5f) * sx - 0.5f;
        fx = std::min(std::max(fx, 0.0f), static_cast<float>(img.width - 1));
        const int x0 = static_cast<int>(fx);
        const int x1 = std::min(x0 + 1, img.width - 1);
        const float wx = fx - static_cast<float>(x0);
        const float top = img.at(c, y0, x0) * (1.0f - wx) + img.at(c, y0, x1) * wx;
        const float bot = img.at(c, y1, x0) * (1.0f - wx) + img.at(c, y1, x1) * wx;
        out.at(c, y, x) = top * (1.0f - wy) + bot * wy;
      }
    }
  }
  return out;
}

RawImage rotate90(const RawImage& img, int quarter_turns) {
  const int k = ((quarter_turns % 4) + 4) % 4;
  if (k == 0) return img;
  RawImage out;
  out.channels = img.channels;
  if (k == 2) {
    out.height = img.height;
    out.width = img.width;
  } else {
    out.height = img.width;
    out.width = img.height;
  }
  out.pixels.resize(img.pixels.size());
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < out.height; ++y) {
      for (int x = 0; x < out.width; ++x) {
        float v = 0.0f;
        switch (k) {
          case 1: v = img.at(c, x, img.width - 1 - y); break;  // 90 CCW
          case 2: v = img.at(c, img.height - 1 - y, img.width - 1 - x); break;
          case 3: v = img.at(c, img.height - 1 - x, y); break;  // 270 CCW
        }
        out.at(c, y, x) = v;
      }
    }
  }
  return out;
}

RawImage to_grayscale(const RawImage& img) {
  if (img.channels == 1) return img;
  RawImage out;
  out.channels = 1;
  out.height = img.height;
  out.width = img.width;
  out.pixels.assign(static_cast<std::size_t>(img.height) * img.width, 0.0f);
  for (int c = 0; c < img.channels; ++c) {
    for (std::size_t i = 0; i < out.pixels.size(); ++i) {
      out.pixels[i] += img.pixels[c * out.pixels.size() + i];
    }
  }
  for (float& v : out.pixels) v /= static_cast<float>(img.channels);
  return out;
}

}  // namespace mematch
