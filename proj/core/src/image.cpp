#include "tsr/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#if TSR_WITH_JPEG
#include <jpeglib.h>

#include <csetjmp>
#endif

namespace tsr {

namespace {

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open: " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

Tensor from_rgb8(const unsigned char* px, int h, int w) {
  Tensor t(1, 3, h, w);
  const float inv = 1.0f / 255.0f;
  for (int c = 0; c < 3; ++c) {
    float* plane = t.plane(0, c);
    for (int i = 0; i < h * w; ++i) plane[i] = float(px[std::size_t(i) * 3 + c]) * inv;
  }
  return t;
}

#if TSR_WITH_JPEG

struct JpegErr {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
  char message[JMSG_LENGTH_MAX];
};

void jpeg_error_exit(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErr*>(cinfo->err);
  (*cinfo->err->format_message)(cinfo, err->message);
  std::longjmp(err->jump, 1);
}

Tensor decode_jpeg(const std::string& bytes, const std::string& origin) {
  jpeg_decompress_struct cinfo;
  JpegErr jerr;
  cinfo.err = jpeg_std_error(&jerr.mgr);
  jerr.mgr.error_exit = jpeg_error_exit;
  std::vector<unsigned char> rgb;
  if (setjmp(jerr.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw DataError("jpeg decode error in " + origin + ": " + jerr.message);
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, reinterpret_cast<const unsigned char*>(bytes.data()),
               static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  const int w = int(cinfo.output_width), h = int(cinfo.output_height);
  rgb.resize(std::size_t(w) * h * 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    unsigned char* row = rgb.data() + std::size_t(cinfo.output_scanline) * w * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return from_rgb8(rgb.data(), h, w);
}

#endif

}  // namespace

Tensor decode_ppm(const std::string& bytes, const std::string& origin) {
  // P6, ASCII header with '#' comments, maxval 255, binary payload.
  std::size_t pos = 0;
  auto next_token = [&]() -> std::string {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    if (start == pos) throw DataError("truncated PPM header in " + origin);
    return bytes.substr(start, pos - start);
  };
  if (next_token() != "P6") throw DataError("not a binary PPM (P6): " + origin);
  int w, h, maxval;
  try {
    w = std::stoi(next_token());
    h = std::stoi(next_token());
    maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw DataError("bad PPM header in " + origin);
  }
  if (w < 1 || h < 1 || maxval != 255)
    throw DataError("unsupported PPM geometry/maxval in " + origin);
  ++pos;  // single whitespace after maxval
  const std::size_t need = std::size_t(w) * h * 3;
  if (bytes.size() - pos < need) throw DataError("truncated PPM payload in " + origin);
  return from_rgb8(reinterpret_cast<const unsigned char*>(bytes.data() + pos), h, w);
}

Tensor load_image(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes, path);
#if TSR_WITH_JPEG
  if (bytes.size() >= 3 && static_cast<unsigned char>(bytes[0]) == 0xff &&
      static_cast<unsigned char>(bytes[1]) == 0xd8)
    return decode_jpeg(bytes, path);
#endif
  throw DataError("unsupported image format: " + path);
}

void save_ppm(const std::string& path, const Tensor& image) {
  if (image.n() != 1 || image.c() != 3) throw DataError("save_ppm expects a (1,3,H,W) tensor");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot open for writing: " + path);
  os << "P6\n" << image.w() << " " << image.h() << "\n255\n";
  std::vector<unsigned char> row(std::size_t(image.w()) * 3);
  for (int y = 0; y < image.h(); ++y) {
    for (int x = 0; x < image.w(); ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = image.at(0, c, y, x);
        row[std::size_t(x) * 3 + c] =
            static_cast<unsigned char>(std::clamp(std::lround(v * 255.0f), 0l, 255l));
      }
    os.write(reinterpret_cast<const char*>(row.data()), std::streamsize(row.size()));
  }
  if (!os) throw DataError("write failed: " + path);
}

namespace {

inline float sample_bilinear(const float* plane, int h, int w, float sy, float sx) {
  sy = std::clamp(sy, 0.0f, float(h - 1));
  sx = std::clamp(sx, 0.0f, float(w - 1));
  const int y0 = int(sy), x0 = int(sx);
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const float fy = sy - y0, fx = sx - x0;
  const float top = plane[std::size_t(y0) * w + x0] * (1 - fx) + plane[std::size_t(y0) * w + x1] * fx;
  const float bot = plane[std::size_t(y1) * w + x0] * (1 - fx) + plane[std::size_t(y1) * w + x1] * fx;
  return top * (1 - fy) + bot * fy;
}

}  // namespace

Tensor resize_bilinear(const Tensor& image, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw ShapeError("resize target must be >= 1");
  if (out_h == image.h() && out_w == image.w()) return image;
  Tensor out(image.n(), image.c(), out_h, out_w);
  const float ry = float(image.h()) / float(out_h);
  const float rx = float(image.w()) / float(out_w);
  for (int b = 0; b < image.n(); ++b)
    for (int c = 0; c < image.c(); ++c) {
      const float* src = image.plane(b, c);
      float* dst = out.plane(b, c);
      for (int y = 0; y < out_h; ++y) {
        const float sy = (y + 0.5f) * ry - 0.5f;
        for (int x = 0; x < out_w; ++x)
          dst[std::size_t(y) * out_w + x] =
              sample_bilinear(src, image.h(), image.w(), sy, (x + 0.5f) * rx - 0.5f);
      }
    }
  return out;
}

Tensor crop_resize(const Tensor& image, const BBox& box, int out_h, int out_w) {
  const BBox c = clip_box(box, image.w(), image.h());
  if (!(c.width() > 0 && c.height() > 0))
    throw DataError("crop box has zero area after clipping to the image");
  Tensor out(image.n(), image.c(), out_h, out_w);
  const float ry = float(c.height()) / float(out_h);
  const float rx = float(c.width()) / float(out_w);
  for (int b = 0; b < image.n(); ++b)
    for (int ch = 0; ch < image.c(); ++ch) {
      const float* src = image.plane(b, ch);
      float* dst = out.plane(b, ch);
      for (int y = 0; y < out_h; ++y) {
        const float sy = float(c.y_min) + (y + 0.5f) * ry - 0.5f;
        for (int x = 0; x < out_w; ++x)
          dst[std::size_t(y) * out_w + x] = sample_bilinear(
              src, image.h(), image.w(), sy, float(c.x_min) + (x + 0.5f) * rx - 0.5f);
      }
    }
  return out;
}

}  // namespace tsr
