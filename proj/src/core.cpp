#include "fgvl/core.hpp"

#include <png.h>

#include <cctype>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

namespace fgvl {

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string lower_copy(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::string trim_copy(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string normalize_token(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (char ch : s) {
    unsigned char c = static_cast<unsigned char>(ch);
    if (std::isspace(c)) {
      if (!out.empty()) pending_space = true;
    } else {
      if (pending_space) out.push_back(' ');
      pending_space = false;
      out.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  return out;
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  size_t start = 0;
  for (size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      out.emplace_back(s.substr(start, i - start));
      start = i + 1;
    }
  }
  return out;
}

std::vector<std::string> whitespace_tokens(std::string_view s) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    size_t b = i;
    while (i < s.size() && !std::isspace(static_cast<unsigned char>(s[i]))) ++i;
    if (i > b) out.emplace_back(s.substr(b, i - b));
  }
  return out;
}

std::vector<std::string> word_tokens(std::string_view s) {
  std::vector<std::string> out;
  for (auto& tok : whitespace_tokens(s)) {
    if (tok == "[MASK]") {
      out.push_back(tok);
      continue;
    }
    size_t b = 0, e = tok.size();
    auto is_word = [](unsigned char c) {
      return std::isalnum(c) || c == '-' || c == '\'';
    };
    while (b < e && !is_word(static_cast<unsigned char>(tok[b]))) ++b;
    while (e > b && !is_word(static_cast<unsigned char>(tok[e - 1]))) --e;
    if (e > b) out.push_back(lower_copy(std::string_view(tok).substr(b, e - b)));
  }
  return out;
}

bool is_function_word(const std::string& token) {
  static const std::set<std::string> kFunctionWords = {
      "a",  "an", "and",   "as",  "at",     "by",     "in",     "is",
      "it", "of", "on",    "or",  "the",    "to",     "with",   "where",
      "its", "there", "toward", "across", "within", "without", "termed"};
  return kFunctionWords.count(token) > 0;
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (size_t i = 0; i < parts.size(); ++i) {
    if (i) out.append(sep);
    out.append(parts[i]);
  }
  return out;
}

double dot(const double* u, const double* v, size_t n) {
  double s = 0.0;
  for (size_t i = 0; i < n; ++i) s += u[i] * v[i];
  return s;
}

double norm2(const double* v, size_t n) { return std::sqrt(dot(v, v, n)); }

double cosine(const std::vector<double>& u, const std::vector<double>& v) {
  FGVL_CHECK(u.size() == v.size(), "cosine: dimension mismatch");
  double nu = norm2(u.data(), u.size());
  double nv = norm2(v.data(), v.size());
  FGVL_CHECK(nu > 0.0 && nv > 0.0, "cosine: zero vector");
  return dot(u.data(), v.data(), u.size()) / (nu * nv);
}

// ---------------------------------------------------------------------------
// PNG I/O
// ---------------------------------------------------------------------------

void write_png_gray(const std::string& path, const Image& img) {
  FGVL_CHECK(img.height > 0 && img.width > 0, "write_png_gray: empty image");
  FILE* fp = std::fopen(path.c_str(), "wb");
  FGVL_CHECK(fp, "cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    fail("libpng write error: " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<unsigned char> row(img.width);
  for (uint32_t r = 0; r < img.height; ++r) {
    for (uint32_t c = 0; c < img.width; ++c) {
      double v = img.at(r, c);
      v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
      row[c] = static_cast<unsigned char>(std::lround(v * 255.0));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

Image read_png_gray(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  FGVL_CHECK(fp, "cannot open image: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    fail("libpng read error: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  if (png_get_color_type(png, info) & PNG_COLOR_MASK_COLOR) png_set_rgb_to_gray(png, 1, -1, -1);
  png_read_update_info(png, info);
  Image img;
  img.height = png_get_image_height(png, info);
  img.width = png_get_image_width(png, info);
  img.values.resize(size_t(img.height) * img.width);
  std::vector<unsigned char> row(png_get_rowbytes(png, info));
  for (uint32_t r = 0; r < img.height; ++r) {
    png_read_row(png, row.data(), nullptr);
    for (uint32_t c = 0; c < img.width; ++c) img.at(r, c) = row[c] / 255.0;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

// ---------------------------------------------------------------------------
// Raw float sidecar
// ---------------------------------------------------------------------------

namespace {
constexpr char kRawMagic[4] = {'F', 'G', 'V', 'L'};
constexpr uint16_t kRawVersion = 1;
}  // namespace

void write_raw_image(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  FGVL_CHECK(f.good(), "cannot open for writing: " + path);
  uint16_t ver = kRawVersion, pad = 0;
  f.write(kRawMagic, 4);
  f.write(reinterpret_cast<const char*>(&ver), 2);
  f.write(reinterpret_cast<const char*>(&pad), 2);
  f.write(reinterpret_cast<const char*>(&img.height), 4);
  f.write(reinterpret_cast<const char*>(&img.width), 4);
  std::vector<float> payload(img.values.begin(), img.values.end());
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(float)));
  FGVL_CHECK(f.good(), "write failed: " + path);
}

Image read_raw_image(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  FGVL_CHECK(f.good(), "cannot open image: " + path);
  char magic[4];
  uint16_t ver = 0, pad = 0;
  Image img;
  f.read(magic, 4);
  f.read(reinterpret_cast<char*>(&ver), 2);
  f.read(reinterpret_cast<char*>(&pad), 2);
  f.read(reinterpret_cast<char*>(&img.height), 4);
  f.read(reinterpret_cast<char*>(&img.width), 4);
  FGVL_CHECK(f.good() && std::memcmp(magic, kRawMagic, 4) == 0,
             "bad raw image header: " + path);
  FGVL_CHECK(ver == kRawVersion, "unsupported raw image version in " + path);
  std::vector<float> payload(size_t(img.height) * img.width);
  f.read(reinterpret_cast<char*>(payload.data()),
         static_cast<std::streamsize>(payload.size() * sizeof(float)));
  FGVL_CHECK(f.good(), "truncated raw image: " + path);
  img.values.assign(payload.begin(), payload.end());
  return img;
}

Image read_image(const std::string& path) {
  auto pos = path.rfind('.');
  std::string ext = pos == std::string::npos ? "" : lower_copy(path.substr(pos));
  if (ext == ".png") return read_png_gray(path);
  return read_raw_image(path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  FGVL_CHECK(f.good(), "cannot open file: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, std::string_view content) {
  std::ofstream f(path, std::ios::binary);
  FGVL_CHECK(f.good(), "cannot open for writing: " + path);
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  FGVL_CHECK(f.good(), "write failed: " + path);
}

void write_file_atomic(const std::string& path, std::string_view content) {
  std::string tmp = path + ".tmp";
  write_text_file(tmp, content);
  std::filesystem::rename(tmp, path);
}

}  // namespace fgvl
