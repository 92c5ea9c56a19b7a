#include "ctun/data.hpp"

#include <png.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <regex>

#include "ctun/error.hpp"

namespace ctun {

void FrameSequence::validate() const {
  if (frames.empty()) throw ValueError("frame sequence is empty");
  const Shape& s0 = frames[0].shape();
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const Shape& s = frames[i].shape();
    if (s.n != 1 || s.c != 3)
      throw DimensionError("frame " + std::to_string(i) + " is " + s.str() + ", expected [1,3,H,W]");
    if (s.h != s0.h || s.w != s0.w)
      throw DimensionError("frame " + std::to_string(i) + " is " + std::to_string(s.h) + "x" +
                           std::to_string(s.w) + ", frame 0 is " + std::to_string(s0.h) + "x" +
                           std::to_string(s0.w));
  }
}

void DegradationSpec::validate() const {
  if (scale < 2) throw ValueError("degradation scale must be >= 2");
  if (mode == DegradationMode::BD && !(sigma > 0.0)) throw ValueError("BD blur sigma must be > 0");
}

DegradationMode parse_degradation_mode(const std::string& s) {
  if (s == "BI" || s == "bi") return DegradationMode::BI;
  if (s == "BD" || s == "bd") return DegradationMode::BD;
  throw ValueError("unknown degradation '" + s + "' (expected BI or BD)");
}

const char* to_string(DegradationMode m) { return m == DegradationMode::BI ? "BI" : "BD"; }

// ---------------------------------------------------------------------------
// Resampling

namespace {

double cubic(double x) {
  constexpr double a = -0.5;
  const double t = std::abs(x);
  if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
  if (t < 2.0) return ((a * t - 5.0 * a) * t + 8.0 * a) * t - 4.0 * a;
  return 0.0;
}

// Sparse resampling matrix along one axis.
struct Contributions {
  int out_size = 0;
  std::vector<int> start;          // first tap of each output in `index`
  std::vector<int> count;
  std::vector<int> index;
  std::vector<double> weight;
};

Contributions bicubic_contributions(int in_size, double scale, bool antialias) {
  if (in_size * scale < 1.0 - 1e-9)
    throw DimensionError("bicubic_resize: " + std::to_string(in_size) + " * " + std::to_string(scale) +
                         " is below one output pixel");
  const int out_size = static_cast<int>(std::ceil(in_size * scale - 1e-9));
  const bool shrink = antialias && scale < 1.0;
  const double support = shrink ? 2.0 / scale : 2.0;
  Contributions c;
  c.out_size = out_size;
  for (int o = 0; o < out_size; ++o) {
    const double center = (o + 0.5) / scale - 0.5;
    const int lo = static_cast<int>(std::floor(center - support));
    const int hi = static_cast<int>(std::ceil(center + support));
    c.start.push_back(static_cast<int>(c.index.size()));
    double total = 0.0;
    const std::size_t first = c.weight.size();
    for (int i = lo; i <= hi; ++i) {
      const double d = center - i;
      const double w = shrink ? scale * cubic(scale * d) : cubic(d);
      if (w == 0.0) continue;
      c.index.push_back(std::clamp(i, 0, in_size - 1));
      c.weight.push_back(w);
      total += w;
    }
    for (std::size_t k = first; k < c.weight.size(); ++k) c.weight[k] /= total;
    c.count.push_back(static_cast<int>(c.weight.size() - first));
  }
  return c;
}

// Applies `cx` along W and `cy` along H to every plane.
Tensor resample(const Tensor& x, const Contributions& cy, const Contributions& cx) {
  const Shape s = x.shape();
  const std::vector<double> in = x.to_vector();
  const int ho = cy.out_size, wo = cx.out_size;
  std::vector<double> out(static_cast<std::size_t>(s.n) * s.c * ho * wo);
  std::vector<double> tmp(static_cast<std::size_t>(s.h) * wo);
  for (int plane = 0; plane < s.n * s.c; ++plane) {
    const double* src = in.data() + static_cast<std::size_t>(plane) * s.h * s.w;
    for (int y = 0; y < s.h; ++y)
      for (int o = 0; o < wo; ++o) {
        double acc = 0.0;
        for (int k = cx.start[o]; k < cx.start[o] + cx.count[o]; ++k)
          acc += cx.weight[k] * src[static_cast<std::size_t>(y) * s.w + cx.index[k]];
        tmp[static_cast<std::size_t>(y) * wo + o] = acc;
      }
    double* dst = out.data() + static_cast<std::size_t>(plane) * ho * wo;
    for (int o = 0; o < ho; ++o)
      for (int xo = 0; xo < wo; ++xo) {
        double acc = 0.0;
        for (int k = cy.start[o]; k < cy.start[o] + cy.count[o]; ++k)
          acc += cy.weight[k] * tmp[static_cast<std::size_t>(cy.index[k]) * wo + xo];
        dst[static_cast<std::size_t>(o) * wo + xo] = acc;
      }
  }
  return Tensor::from_values(Shape{s.n, s.c, ho, wo}, out, x.dtype());
}

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

Contributions gaussian_contributions(int n, const std::vector<double>& taps) {
  const int r = static_cast<int>(taps.size() / 2);
  Contributions c;
  c.out_size = n;
  for (int o = 0; o < n; ++o) {
    c.start.push_back(static_cast<int>(c.index.size()));
    for (int d = -r; d <= r; ++d) {
      c.index.push_back(reflect_index(o + d, n));
      c.weight.push_back(taps[d + r]);
    }
    c.count.push_back(2 * r + 1);
  }
  return c;
}

}  // namespace

Tensor bicubic_resize(const Tensor& x, double scale, bool antialias) {
  if (!(scale > 0.0) || !std::isfinite(scale)) throw ValueError("bicubic_resize: scale must be > 0");
  const Shape& s = x.shape();
  return resample(x, bicubic_contributions(s.h, scale, antialias),
                  bicubic_contributions(s.w, scale, antialias));
}

std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw ValueError("gaussian sigma must be > 0");
  const int r = static_cast<int>(std::floor(4.0 * sigma));
  std::vector<double> k(2 * r + 1);
  double total = 0.0;
  for (int d = -r; d <= r; ++d) total += k[d + r] = std::exp(-(d * d) / (2.0 * sigma * sigma));
  for (double& v : k) v /= total;
  return k;
}

Tensor gaussian_blur(const Tensor& x, double sigma) {
  const auto taps = gaussian_kernel(sigma);
  const Shape& s = x.shape();
  return resample(x, gaussian_contributions(s.h, taps), gaussian_contributions(s.w, taps));
}

Tensor degrade_frame(const Tensor& hr, const DegradationSpec& spec) {
  spec.validate();
  const Shape& s = hr.shape();
  if (s.h % spec.scale != 0 || s.w % spec.scale != 0)
    throw DimensionError("degrade: " + std::to_string(s.h) + "x" + std::to_string(s.w) +
                         " is not divisible by scale " + std::to_string(spec.scale));
  std::vector<double> out;
  const int ho = s.h / spec.scale, wo = s.w / spec.scale;
  if (spec.mode == DegradationMode::BI) {
    out = bicubic_resize(hr, 1.0 / spec.scale, true).to_vector();
  } else {
    const std::vector<double> blurred = gaussian_blur(hr, spec.sigma).to_vector();
    out.resize(static_cast<std::size_t>(s.n) * s.c * ho * wo);
    for (int p = 0; p < s.n * s.c; ++p)
      for (int y = 0; y < ho; ++y)
        for (int x = 0; x < wo; ++x)
          out[(static_cast<std::size_t>(p) * ho + y) * wo + x] =
              blurred[(static_cast<std::size_t>(p) * s.h + y * spec.scale) * s.w + x * spec.scale];
  }
  for (double& v : out) v = std::clamp(v, 0.0, 1.0);
  return Tensor::from_values(Shape{s.n, s.c, ho, wo}, out, hr.dtype());
}

FrameSequence degrade(const FrameSequence& seq, const DegradationSpec& spec) {
  seq.validate();
  FrameSequence out;
  out.fps = seq.fps;
  out.source = seq.source;
  for (const Tensor& f : seq.frames) out.frames.push_back(degrade_frame(f, spec));
  return out;
}

Tensor rgb_to_y(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.c != 3) throw DimensionError("rgb_to_y expects 3 channels, got " + s.str());
  const std::vector<double> in = x.to_vector();
  const std::size_t plane = s.plane();
  std::vector<double> out(static_cast<std::size_t>(s.n) * plane);
  for (int n = 0; n < s.n; ++n) {
    const double* r = in.data() + static_cast<std::size_t>(n) * 3 * plane;
    const double* g = r + plane;
    const double* b = g + plane;
    for (std::size_t i = 0; i < plane; ++i)
      out[n * plane + i] = 65.481 * r[i] + 128.553 * g[i] + 24.966 * b[i] + 16.0;
  }
  return Tensor::from_values(Shape{s.n, 1, s.h, s.w}, out, x.dtype());
}

// ---------------------------------------------------------------------------
// PNG

Tensor load_png(const std::filesystem::path& path) {
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw IoError("cannot read PNG " + path.string() + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<unsigned char> pixels(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  const int h = static_cast<int>(image.height), w = static_cast<int>(image.width);
  Tensor t = Tensor::zeros(Shape{1, 3, h, w}, DType::f32);
  auto data = t.mutable_data<float>();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c) data[c * plane + i] = pixels[i * 3 + c] / 255.0f;
  return t;
}

void save_png(const Tensor& frame, const std::filesystem::path& path) {
  const Shape& s = frame.shape();
  if (s.n != 1 || s.c != 3) throw DimensionError("save_png expects [1,3,H,W], got " + s.str());
  const std::vector<double> v = frame.to_vector();
  const std::size_t plane = s.plane();
  std::vector<unsigned char> pixels(plane * 3);
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c)
      pixels[i * 3 + c] = static_cast<unsigned char>(std::lround(std::clamp(v[c * plane + i], 0.0, 1.0) * 255.0));
  png_image image;
  std::memset(&image, 0, sizeof image);
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(s.w);
  image.height = static_cast<png_uint_32>(s.h);
  image.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, pixels.data(), 0, nullptr))
    throw IoError("cannot write PNG " + path.string() + ": " + image.message);
}

std::string frame_filename(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%06d.png", index);
  return buf;
}

FrameSequence load_sequence(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  static const std::regex pattern(R"(frame_(\d{6})\.png)");
  std::map<int, std::filesystem::path> found;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (entry.is_regular_file() && std::regex_match(name, m, pattern))
      found.emplace(std::stoi(m[1].str()), entry.path());
  }
  if (found.empty()) throw MissingFrameError("no frames (frame_%06d.png) in " + dir.string(), -1);
  FrameSequence seq;
  seq.source = dir.string();
  int expected = 0;
  for (const auto& [index, path] : found) {
    if (index != expected)
      throw MissingFrameError("missing frame " + std::to_string(expected) + " (" +
                                  frame_filename(expected) + ") in " + dir.string(),
                              expected);
    seq.frames.push_back(load_png(path));
    ++expected;
  }
  seq.validate();
  return seq;
}

void save_sequence(const FrameSequence& seq, const std::filesystem::path& dir) {
  seq.validate();
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < seq.size(); ++i)
    save_png(seq.frames[i], dir / frame_filename(static_cast<int>(i)));
}

// ---------------------------------------------------------------------------
// Weight file

namespace {

constexpr std::uint32_t kWeightVersion = 1;

void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

class Reader {
 public:
  Reader(const std::vector<unsigned char>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  const unsigned char* take(std::size_t n) {
    if (n > end_ - pos_)
      throw WeightFormatError(WeightFormatError::Kind::truncated,
                              "weight file truncated at byte " + std::to_string(pos_));
    const unsigned char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint32_t u32() {
    const unsigned char* p = take(4);
    return p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
  }
  std::uint8_t u8() { return *take(1); }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<unsigned char>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const unsigned char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::vector<unsigned char> encode_weights(const ParamStore& store) {
  std::vector<unsigned char> out{'C', 'T', 'U', 'N'};
  put_u32(out, kWeightVersion);
  put_u32(out, static_cast<std::uint32_t>(store.size()));
  for (const auto& [name, t] : store.entries()) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    const Shape& s = t.shape();
    out.push_back(4);
    for (int d : {s.n, s.c, s.h, s.w}) put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : t.to_vector()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  put_u32(out, crc_of(out.data(), out.size()));
  return out;
}

ParamStore decode_weights(const std::vector<unsigned char>& bytes) {
  using Kind = WeightFormatError::Kind;
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "CTUN", 4) != 0)
    throw WeightFormatError(Kind::bad_magic, "not a CTUN weight file (bad magic)");
  if (bytes.size() < 16)
    throw WeightFormatError(Kind::truncated, "weight file truncated (" +
                                                 std::to_string(bytes.size()) + " bytes)");
  const std::size_t body = bytes.size() - 4;
  Reader r(bytes, body);
  r.take(4);
  const std::uint32_t version = r.u32();
  if (version != kWeightVersion)
    throw WeightFormatError(Kind::bad_version,
                            "unsupported weight file version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    const unsigned char* name = r.take(len);
    const int rank = r.u8();
    if (rank < 1 || rank > 4)
      throw WeightFormatError(Kind::malformed, "tensor rank " + std::to_string(rank) + " unsupported");
    int dims[4] = {1, 1, 1, 1};
    for (int d = 0; d < rank; ++d) {
      const std::uint32_t v = r.u32();
      if (v < 1 || v > (1u << 30)) throw WeightFormatError(Kind::malformed, "bad tensor dimension");
      dims[4 - rank + d] = static_cast<int>(v);
    }
    const Shape s{dims[0], dims[1], dims[2], dims[3]};
    Tensor t = Tensor::zeros(s, DType::f32);
    auto data = t.mutable_data<float>();
    const unsigned char* p = r.take(s.numel() * 4);
    for (std::size_t k = 0; k < s.numel(); ++k, p += 4)
      data[k] = std::bit_cast<float>(static_cast<std::uint32_t>(
          p[0] | (p[1] << 8) | (p[2] << 16) | (static_cast<std::uint32_t>(p[3]) << 24)));
    tensors.emplace_back(std::string(reinterpret_cast<const char*>(name), len), std::move(t));
  }
  if (r.pos() != body)
    throw WeightFormatError(Kind::malformed, "trailing bytes after the last tensor");
  Reader tail(bytes, bytes.size());
  tail.take(body);
  const std::uint32_t stored = tail.u32();
  if (stored != crc_of(bytes.data(), body))
    throw WeightFormatError(Kind::bad_checksum, "weight file checksum mismatch");
  ParamStore store;
  for (auto& [name, t] : tensors) store.add(std::move(name), std::move(t));
  return store;
}

void save_weights(const ParamStore& store, const std::filesystem::path& path) {
  const auto bytes = encode_weights(store);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

ParamStore load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open weight file " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_weights(bytes);
}

}  // namespace ctun
