#pragma once

// Shared low-level utilities: deterministic RNG, hashing, tokenization,
// a small dense matrix type, and grayscale image I/O.

#include <cstdint>
#include <cmath>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace fgvl {

[[noreturn]] inline void fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

#define FGVL_CHECK(cond, msg)                    \
  do {                                           \
    if (!(cond)) ::fgvl::fail(msg);              \
  } while (0)

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 core so streams are identical across
// platforms and standard library versions.
// ---------------------------------------------------------------------------

struct Rng {
  uint64_t state = 0x9e3779b97f4a7c15ULL;

  explicit Rng(uint64_t seed = 0) : state(seed + 0x9e3779b97f4a7c15ULL) {}

  uint64_t next_u64() {
    state += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // uniform in [0,1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, one value per call (second value discarded so streams stay
  // simple to reason about)
  double gaussian() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  uint64_t below(uint64_t n) { return n == 0 ? 0 : next_u64() % n; }

  // Independent child stream; `tag` distinguishes purposes under one seed.
  Rng split(uint64_t tag) const {
    Rng r;
    r.state = state ^ (tag * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL);
    r.next_u64();
    return r;
  }
};

// ---------------------------------------------------------------------------
// Hashing
// ---------------------------------------------------------------------------

inline uint64_t fnv1a64(std::string_view s, uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(uint64_t v);

// ---------------------------------------------------------------------------
// Text helpers
// ---------------------------------------------------------------------------

std::string lower_copy(std::string_view s);
std::string trim_copy(std::string_view s);
// lowercase + collapse internal whitespace runs to single spaces + trim
std::string normalize_token(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);
// whitespace tokenization, preserving tokens verbatim
std::vector<std::string> whitespace_tokens(std::string_view s);
// lowercased tokens with surrounding punctuation stripped ("[MASK]" kept intact)
std::vector<std::string> word_tokens(std::string_view s);
// closed-class English function words (articles, prepositions, copulas); these
// carry no category information and would otherwise dominate pooled text
// representations through sheer frequency
bool is_function_word(const std::string& token);
std::string join(const std::vector<std::string>& parts, std::string_view sep);

// ---------------------------------------------------------------------------
// Dense row-major matrix of doubles
// ---------------------------------------------------------------------------

struct Mat {
  size_t rows = 0, cols = 0;
  std::vector<double> a;

  Mat() = default;
  Mat(size_t r, size_t c, double fill = 0.0) : rows(r), cols(c), a(r * c, fill) {}

  double& at(size_t r, size_t c) { return a[r * cols + c]; }
  double at(size_t r, size_t c) const { return a[r * cols + c]; }
  double* row(size_t r) { return a.data() + r * cols; }
  const double* row(size_t r) const { return a.data() + r * cols; }
  size_t size() const { return a.size(); }

  bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
};

double dot(const double* u, const double* v, size_t n);
double norm2(const double* v, size_t n);
// cosine similarity; throws on a zero vector
double cosine(const std::vector<double>& u, const std::vector<double>& v);

// ---------------------------------------------------------------------------
// Grayscale images. values in [0,1], row-major.
// ---------------------------------------------------------------------------

struct Image {
  uint32_t height = 0, width = 0;
  std::vector<double> values;  // height*width

  double& at(uint32_t r, uint32_t c) { return values[size_t(r) * width + c]; }
  double at(uint32_t r, uint32_t c) const { return values[size_t(r) * width + c]; }
};

// 8-bit grayscale PNG
void write_png_gray(const std::string& path, const Image& img);
Image read_png_gray(const std::string& path);

// Raw float sidecar: 16-byte header {magic "FGVL", version u16, pad u16,
// height u32, width u32} then row-major float32 payload.
void write_raw_image(const std::string& path, const Image& img);
Image read_raw_image(const std::string& path);

// dispatch on extension: .png vs .fgvl/.raw
Image read_image(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, std::string_view content);
// write-temp-then-rename
void write_file_atomic(const std::string& path, std::string_view content);

}  // namespace fgvl
