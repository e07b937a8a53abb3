#pragma once

#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

namespace roomir {

inline constexpr int kModelRate = 16000;
inline constexpr std::size_t kCroppedLength = 3968;
inline constexpr std::size_t kTagLength = 128;
inline constexpr std::size_t kPackedLength = kCroppedLength + kTagLength;
// Samples at each end of the tag that a 41-tap kernel smears into the body.
inline constexpr std::size_t kTagGuard = 21;
inline constexpr double kPackedBodyStd = 0.1;

enum class IrForm { kRaw, kCropped, kPacked };

struct ImpulseResponse {
  std::vector<double> samples;
  int rate = kModelRate;
  IrForm form = IrForm::kRaw;
};

class CodecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Band-limited windowed-sinc resampling with the cutoff at the lower Nyquist rate.
ImpulseResponse resample(const ImpulseResponse& ir, int to_rate);

ImpulseResponse crop_or_pad(const ImpulseResponse& ir, std::size_t length = kCroppedLength);

// Population standard deviation (mean removed).
double standard_deviation(std::span<const double> x);

// body / (10 * std) followed by 128 copies of std.
ImpulseResponse pack(const ImpulseResponse& cropped);

// Recovers the std from the guarded interior of the tag and rescales the body.
double recover_tag(std::span<const double> packed);
ImpulseResponse unpack(const ImpulseResponse& packed);

// Mono IEEE-float WAV.
ImpulseResponse read_wav(const std::filesystem::path& path);
void write_wav(const ImpulseResponse& ir, const std::filesystem::path& path);
void write_wav(std::span<const double> samples, int rate, const std::filesystem::path& path);

}  // namespace roomir
