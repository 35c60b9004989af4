#pragma once

#include <string>
#include <vector>

namespace secousti {

struct Waveform {
  int sample_rate = 22050;
  std::vector<float> samples;

  double duration_seconds() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

// Reads mono (or downmixes multi-channel) RIFF/WAVE: 16-bit PCM or 32-bit IEEE float.
Waveform read_wav(const std::string& path);
// Writes 32-bit float WAV unless pcm16 is set.
void write_wav(const std::string& path, const Waveform& wav, bool pcm16 = false);

}  // namespace secousti
