#include "secousti/audio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace secousti {
namespace {

std::uint32_t rd32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint16_t rd16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

}  // namespace

Waveform read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open wav file: " + path);
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0) {
    throw std::runtime_error(path + ": not a RIFF/WAVE file");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const unsigned char* chunk = buf.data() + pos;
    const std::uint32_t len = rd32(chunk + 4);
    if (pos + 8 + len > buf.size()) throw std::runtime_error(path + ": truncated chunk");
    if (std::memcmp(chunk, "fmt ", 4) == 0) {
      if (len < 16) throw std::runtime_error(path + ": short fmt chunk");
      format = rd16(chunk + 8);
      channels = rd16(chunk + 10);
      rate = rd32(chunk + 12);
      bits = rd16(chunk + 22);
      if (format == 0xFFFE && len >= 26) format = rd16(chunk + 32);  // WAVE_FORMAT_EXTENSIBLE
    } else if (std::memcmp(chunk, "data", 4) == 0) {
      data = chunk + 8;
      data_len = len;
    }
    pos += 8 + len + (len & 1);
  }
  if (!data || channels == 0) throw std::runtime_error(path + ": missing fmt or data chunk");
  Waveform w;
  w.sample_rate = static_cast<int>(rate);
  if (format == 1 && bits == 16) {
    const std::size_t frames = data_len / (2 * channels);
    w.samples.resize(frames);
    for (std::size_t i = 0; i < frames; ++i) {
      float acc = 0;
      for (std::size_t c = 0; c < channels; ++c) {
        acc += static_cast<float>(static_cast<std::int16_t>(rd16(data + 2 * (i * channels + c)))) / 32768.0f;
      }
      w.samples[i] = acc / channels;
    }
  } else if (format == 3 && bits == 32) {
    const std::size_t frames = data_len / (4 * channels);
    w.samples.resize(frames);
    for (std::size_t i = 0; i < frames; ++i) {
      float acc = 0;
      for (std::size_t c = 0; c < channels; ++c) {
        float v;
        std::memcpy(&v, data + 4 * (i * channels + c), 4);
        acc += v;
      }
      w.samples[i] = acc / channels;
    }
  } else {
    throw std::runtime_error(path + ": unsupported wav encoding (format " + std::to_string(format) +
                             ", " + std::to_string(bits) + " bits)");
  }
  return w;
}

void write_wav(const std::string& path, const Waveform& wav, bool pcm16) {
  const std::uint16_t bits = pcm16 ? 16 : 32;
  const std::uint32_t data_len = static_cast<std::uint32_t>(wav.samples.size() * (bits / 8));
  std::string out;
  out.reserve(44 + data_len);
  out += "RIFF";
  put32(out, 36 + data_len);
  out += "WAVEfmt ";
  put32(out, 16);
  put16(out, pcm16 ? 1 : 3);
  put16(out, 1);
  put32(out, static_cast<std::uint32_t>(wav.sample_rate));
  put32(out, static_cast<std::uint32_t>(wav.sample_rate) * (bits / 8));
  put16(out, bits / 8);
  put16(out, bits);
  out += "data";
  put32(out, data_len);
  for (float s : wav.samples) {
    if (pcm16) {
      const float c = std::clamp(s, -1.0f, 1.0f);
      put16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lround(c * 32767.0f))));
    } else {
      std::uint32_t v;
      std::memcpy(&v, &s, 4);
      put32(out, v);
    }
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write wav file: " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("failed writing wav file: " + path);
}

}  // namespace secousti
