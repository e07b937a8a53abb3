#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>

#include <fmt/format.h>

#include "roomir/ir_codec.hpp"

namespace roomir {

namespace {

constexpr int kResampleZeros = 32;

std::int64_t gcd64(std::int64_t a, std::int64_t b) { return b == 0 ? a : gcd64(b, a % b); }

}  // namespace

ImpulseResponse resample(const ImpulseResponse& ir, int to_rate) {
  if (ir.rate <= 0 || to_rate <= 0) throw CodecError("resample: sample rates must be positive");
  if (ir.rate == to_rate) return ir;

  const double from = ir.rate;
  const double to = to_rate;
  const double cutoff = 0.5 * std::min(from, to);
  const double half_width = kResampleZeros / (2.0 * cutoff);  // seconds

  const auto g = gcd64(ir.rate, to_rate);
  const auto out_len = static_cast<std::size_t>(static_cast<std::int64_t>(ir.samples.size()) * (to_rate / g) /
                                                (ir.rate / g));
  ImpulseResponse out;
  out.rate = to_rate;
  out.form = IrForm::kRaw;
  out.samples.assign(out_len, 0.0);

  const auto n_in = static_cast<std::int64_t>(ir.samples.size());
  for (std::size_t n = 0; n < out_len; ++n) {
    const double t = static_cast<double>(n) / to;
    const auto k_lo = std::max<std::int64_t>(0, static_cast<std::int64_t>(std::ceil((t - half_width) * from)));
    const auto k_hi = std::min<std::int64_t>(n_in - 1, static_cast<std::int64_t>(std::floor((t + half_width) * from)));
    double acc = 0.0;
    for (auto k = k_lo; k <= k_hi; ++k) {
      const double dt = t - static_cast<double>(k) / from;
      if (std::abs(dt) >= half_width) continue;
      const double window = 0.5 * (1.0 + std::cos(std::numbers::pi * dt / half_width));
      const double arg = 2.0 * cutoff * dt;
      const double sinc = arg == 0.0 ? 1.0 : std::sin(std::numbers::pi * arg) / (std::numbers::pi * arg);
      acc += ir.samples[static_cast<std::size_t>(k)] * (2.0 * cutoff / from) * sinc * window;
    }
    out.samples[n] = acc;
  }
  return out;
}

ImpulseResponse crop_or_pad(const ImpulseResponse& ir, std::size_t length) {
  if (ir.samples.empty()) throw CodecError("crop_or_pad: empty impulse response");
  if (ir.rate != kModelRate) {
    throw CodecError(fmt::format("crop_or_pad: expected {} Hz input, got {} Hz", kModelRate, ir.rate));
  }
  ImpulseResponse out;
  out.rate = ir.rate;
  out.form = IrForm::kCropped;
  out.samples.assign(length, 0.0);
  std::copy_n(ir.samples.begin(), std::min(length, ir.samples.size()), out.samples.begin());
  return out;
}

double standard_deviation(std::span<const double> x) {
  if (x.empty()) return 0.0;
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  double acc = 0.0;
  for (double v : x) acc += (v - mean) * (v - mean);
  return std::sqrt(acc / static_cast<double>(x.size()));
}

ImpulseResponse pack(const ImpulseResponse& cropped) {
  if (cropped.samples.size() != kCroppedLength) {
    throw CodecError(fmt::format("pack: expected {} samples, got {}", kCroppedLength, cropped.samples.size()));
  }
  for (double v : cropped.samples) {
    if (!std::isfinite(v)) throw CodecError("pack: non-finite sample");
  }
  const double s = standard_deviation(cropped.samples);
  if (!(s > 0.0)) throw CodecError("pack: silent impulse response (zero standard deviation)");

  ImpulseResponse out;
  out.rate = cropped.rate;
  out.form = IrForm::kPacked;
  out.samples.resize(kPackedLength);
  const double divisor = s / kPackedBodyStd;
  for (std::size_t i = 0; i < kCroppedLength; ++i) out.samples[i] = cropped.samples[i] / divisor;
  std::fill(out.samples.begin() + kCroppedLength, out.samples.end(), s);
  return out;
}

double recover_tag(std::span<const double> packed) {
  if (packed.size() != kPackedLength) {
    throw CodecError(fmt::format("unpack: expected {} samples, got {}", kPackedLength, packed.size()));
  }
  const auto first = packed.begin() + static_cast<std::ptrdiff_t>(kCroppedLength + kTagGuard);
  const auto last = packed.end() - static_cast<std::ptrdiff_t>(kTagGuard);
  return std::accumulate(first, last, 0.0) / static_cast<double>(last - first);
}

ImpulseResponse unpack(const ImpulseResponse& packed) {
  const double s = recover_tag(packed.samples);
  if (!(s > 0.0)) throw CodecError(fmt::format("unpack: recovered standard deviation {} is not positive", s));
  ImpulseResponse out;
  out.rate = packed.rate;
  out.form = IrForm::kCropped;
  out.samples.resize(kCroppedLength);
  const double scale = s / kPackedBodyStd;
  for (std::size_t i = 0; i < kCroppedLength; ++i) out.samples[i] = packed.samples[i] * scale;
  return out;
}

namespace {

constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;
constexpr const char* kConversionHint =
    "convert to mono 32-bit float first, e.g. `sox in.wav -c 1 -e floating-point -b 32 out.wav`";

template <typename T>
void put(std::ostream& out, T v) {
  // RIFF is little-endian; so is every platform this builds on.
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(const std::vector<char>& buf, std::size_t at) {
  T v;
  std::memcpy(&v, buf.data() + at, sizeof(T));
  return v;
}

}  // namespace

void write_wav(std::span<const double> samples, int rate, const std::filesystem::path& path) {
  if (rate <= 0) throw CodecError("write_wav: sample rate must be positive");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CodecError(fmt::format("cannot write '{}'", path.string()));
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * sizeof(float));
  out.write("RIFF", 4);
  put<std::uint32_t>(out, 36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  put<std::uint32_t>(out, 16);
  put<std::uint16_t>(out, kFormatFloat);
  put<std::uint16_t>(out, 1);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(rate));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(rate) * 4);
  put<std::uint16_t>(out, 4);
  put<std::uint16_t>(out, 32);
  out.write("data", 4);
  put<std::uint32_t>(out, data_bytes);
  for (double v : samples) put<float>(out, static_cast<float>(v));
  if (!out) throw CodecError(fmt::format("failed writing '{}'", path.string()));
}

void write_wav(const ImpulseResponse& ir, const std::filesystem::path& path) {
  write_wav(ir.samples, ir.rate, path);
}

ImpulseResponse read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CodecError(fmt::format("cannot open '{}'", path.string()));
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0) {
    throw CodecError(fmt::format("'{}' is not a RIFF/WAVE file", path.string()));
  }

  bool have_fmt = false;
  std::uint16_t channels = 0, bits = 0, format = 0;
  std::uint32_t rate = 0;
  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const std::string id(buf.data() + pos, 4);
    const auto size = get<std::uint32_t>(buf, pos + 4);
    const std::size_t body = pos + 8;
    if (body + size > buf.size()) throw CodecError(fmt::format("'{}': truncated '{}' chunk", path.string(), id));
    if (id == "fmt ") {
      if (size < 16) throw CodecError(fmt::format("'{}': short fmt chunk", path.string()));
      format = get<std::uint16_t>(buf, body);
      channels = get<std::uint16_t>(buf, body + 2);
      rate = get<std::uint32_t>(buf, body + 4);
      bits = get<std::uint16_t>(buf, body + 14);
      if (format == kFormatExtensible && size >= 26) format = get<std::uint16_t>(buf, body + 24);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw CodecError(fmt::format("'{}': data chunk before fmt chunk", path.string()));
      if (channels != 1) {
        throw CodecError(fmt::format("'{}' has {} channels; only mono is supported ({})", path.string(),
                                     channels, kConversionHint));
      }
      if (format != kFormatFloat || bits != 32) {
        throw CodecError(fmt::format("'{}' is not 32-bit float PCM ({})", path.string(), kConversionHint));
      }
      ImpulseResponse ir;
      ir.rate = static_cast<int>(rate);
      ir.samples.resize(size / 4);
      for (std::size_t i = 0; i < ir.samples.size(); ++i) ir.samples[i] = get<float>(buf, body + 4 * i);
      if (ir.samples.size() == kPackedLength) {
        ir.form = IrForm::kPacked;
      } else if (ir.samples.size() == kCroppedLength) {
        ir.form = IrForm::kCropped;
      }
      return ir;
    }
    pos = body + size + (size & 1u);
  }
  throw CodecError(fmt::format("'{}': no data chunk", path.string()));
}

}  // namespace roomir
