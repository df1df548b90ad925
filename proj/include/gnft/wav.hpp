#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "gnft/error.hpp"

namespace gnft::wav {

struct PcmData {
    std::vector<double> samples;  // mono, scaled to [-1, 1]
    std::uint32_t sample_rate = 0;
};

namespace detail {

inline std::uint32_t le32(const unsigned char* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
           (std::uint32_t(p[3]) << 24);
}
inline std::uint16_t le16(const unsigned char* p) {
    return std::uint16_t(p[0] | (p[1] << 8));
}
inline void put32(std::ofstream& os, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) os.put(char((v >> (8 * i)) & 0xff));
}
inline void put16(std::ofstream& os, std::uint16_t v) {
    os.put(char(v & 0xff));
    os.put(char((v >> 8) & 0xff));
}

}  // namespace detail

/// Reads a 16-bit PCM mono RIFF/WAVE file.
inline PcmData read(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw InputError("cannot open audio file: " + path.string());
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 12 || std::string(buf.begin(), buf.begin() + 4) != "RIFF" ||
        std::string(buf.begin() + 8, buf.begin() + 12) != "WAVE")
        throw FormatError("not a RIFF/WAVE file: " + path.string());

    PcmData out;
    std::uint16_t channels = 0, bits = 0, format = 0;
    bool have_fmt = false;
    std::size_t pos = 12;
    while (pos + 8 <= buf.size()) {
        const std::string id(buf.begin() + pos, buf.begin() + pos + 4);
        const std::uint32_t size = detail::le32(&buf[pos + 4]);
        const std::size_t body = pos + 8;
        if (body + size > buf.size()) throw FormatError("truncated chunk '" + id + "' in " + path.string());
        if (id == "fmt ") {
            if (size < 16) throw FormatError("short fmt chunk in " + path.string());
            format = detail::le16(&buf[body]);
            channels = detail::le16(&buf[body + 2]);
            out.sample_rate = detail::le32(&buf[body + 4]);
            bits = detail::le16(&buf[body + 14]);
            have_fmt = true;
        } else if (id == "data") {
            if (!have_fmt) throw FormatError("data chunk before fmt chunk in " + path.string());
            if (format != 1 || bits != 16) throw FormatError("only 16-bit PCM is supported: " + path.string());
            if (channels != 1)
                throw FormatError("expected mono audio, got " + std::to_string(channels) + " channels: " + path.string());
            out.samples.resize(size / 2);
            for (std::size_t i = 0; i < out.samples.size(); ++i) {
                const auto v = std::int16_t(detail::le16(&buf[body + 2 * i]));
                out.samples[i] = std::max(-1.0, double(v) / 32767.0);
            }
            if (out.samples.empty()) throw FormatError("empty data chunk in " + path.string());
            if (out.sample_rate == 0) throw FormatError("zero sample rate in " + path.string());
            return out;
        }
        pos = body + size + (size & 1u);
    }
    throw FormatError("no data chunk in " + path.string());
}

/// Writes 16-bit PCM with the given channel count; multi-channel input is interleaved.
inline void write(const std::filesystem::path& path, std::span<const double> samples, std::uint32_t sample_rate,
                  std::uint16_t channels = 1) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw InputError("cannot write audio file: " + path.string());
    const auto data_bytes = std::uint32_t(samples.size() * 2);
    os.write("RIFF", 4);
    detail::put32(os, 36 + data_bytes);
    os.write("WAVEfmt ", 8);
    detail::put32(os, 16);
    detail::put16(os, 1);
    detail::put16(os, channels);
    detail::put32(os, sample_rate);
    detail::put32(os, sample_rate * channels * 2);
    detail::put16(os, std::uint16_t(channels * 2));
    detail::put16(os, 16);
    os.write("data", 4);
    detail::put32(os, data_bytes);
    for (double s : samples) {
        const auto v = std::int16_t(std::lround(std::clamp(s, -1.0, 1.0) * 32767.0));
        detail::put16(os, std::uint16_t(v));
    }
}

}  // namespace gnft::wav
