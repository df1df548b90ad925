#pragma once

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <numbers>
#include <span>
#include <vector>

#include "gnft/error.hpp"

namespace gnft {

/// MFCC front-end parameters. Defaults: 40 coefficients, 25 ms frames and
/// 10 ms hop at 16 kHz, 32 output frames.
struct MfccConfig {
    std::size_t n_mfcc = 40;
    std::size_t frame_len = 400;
    std::size_t hop = 160;
    std::size_t n_frames = 32;
    std::size_t n_mels = 40;
    double f_min = 20.0;
    double f_max = 0.0;  // 0 means Nyquist

    void validate() const {
        detail::require(n_mfcc >= 1, "n_mfcc must be >= 1");
        detail::require(frame_len >= 1, "frame_len must be >= 1");
        detail::require(hop >= 1, "hop must be >= 1");
        detail::require(n_frames >= 1, "n_frames must be >= 1");
        detail::require(f_min >= 0.0 && f_max >= 0.0, "filterbank edges must be nonnegative");
    }
};

/// Power-spectrum -> log-mel -> DCT-II pipeline for one sample rate.
/// Holds an FFTW plan, so an instance must not be shared across threads.
class MfccExtractor {
public:
    MfccExtractor(MfccConfig cfg, double sample_rate) : cfg_(cfg), sample_rate_(sample_rate) {
        cfg_.validate();
        detail::require(sample_rate > 0.0, "sample_rate must be positive");
        n_mels_ = std::max(cfg_.n_mels, cfg_.n_mfcc);
        n_fft_ = 1;
        while (n_fft_ < cfg_.frame_len) n_fft_ <<= 1;
        n_bins_ = n_fft_ / 2 + 1;

        in_.reset(fftw_alloc_real(n_fft_));
        out_.reset(fftw_alloc_complex(n_bins_));
        plan_.reset(fftw_plan_dft_r2c_1d(int(n_fft_), in_.get(), out_.get(), FFTW_ESTIMATE));

        window_.resize(cfg_.frame_len);
        for (std::size_t i = 0; i < cfg_.frame_len; ++i)
            window_[i] = cfg_.frame_len == 1
                             ? 1.0
                             : 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * double(i) / double(cfg_.frame_len - 1));
        build_filterbank();
        build_dct();
    }

    const MfccConfig& config() const { return cfg_; }

    /// Returns a row-major [n_mfcc x n_frames] matrix. The waveform is
    /// zero-padded (or truncated) to exactly n_frames analysis windows.
    std::vector<double> compute(std::span<const double> wave) const {
        const std::size_t T = cfg_.n_frames;
        std::vector<double> out(cfg_.n_mfcc * T);
        std::vector<double> mel(n_mels_);
        for (std::size_t t = 0; t < T; ++t) {
            const std::size_t start = t * cfg_.hop;
            for (std::size_t i = 0; i < n_fft_; ++i) {
                const std::size_t k = start + i;
                in_.get()[i] = (i < cfg_.frame_len && k < wave.size()) ? wave[k] * window_[i] : 0.0;
            }
            fftw_execute(plan_.get());
            std::fill(mel.begin(), mel.end(), 0.0);
            for (std::size_t b = 0; b < n_bins_; ++b) {
                const double re = out_.get()[b][0], im = out_.get()[b][1];
                const double p = (re * re + im * im) / double(n_fft_);
                for (std::size_t m = 0; m < n_mels_; ++m) mel[m] += fbank_[m * n_bins_ + b] * p;
            }
            for (double& m : mel) m = std::log(m + 1e-10);
            for (std::size_t c = 0; c < cfg_.n_mfcc; ++c) {
                double acc = 0.0;
                for (std::size_t m = 0; m < n_mels_; ++m) acc += dct_[c * n_mels_ + m] * mel[m];
                out[c * T + t] = acc;
            }
        }
        return out;
    }

private:
    struct FftwFree {
        void operator()(void* p) const { fftw_free(p); }
    };
    struct PlanFree {
        void operator()(fftw_plan p) const { fftw_destroy_plan(p); }
    };

    static double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
    static double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

    void build_filterbank() {
        const double nyquist = sample_rate_ / 2.0;
        const double hi = cfg_.f_max > 0.0 ? std::min(cfg_.f_max, nyquist) : nyquist;
        const double lo = std::min(cfg_.f_min, hi);
        const double mlo = hz_to_mel(lo), mhi = hz_to_mel(hi);
        std::vector<double> edges(n_mels_ + 2);
        for (std::size_t i = 0; i < edges.size(); ++i)
            edges[i] = mel_to_hz(mlo + (mhi - mlo) * double(i) / double(n_mels_ + 1));
        fbank_.assign(n_mels_ * n_bins_, 0.0);
        for (std::size_t m = 0; m < n_mels_; ++m) {
            const double l = edges[m], c = edges[m + 1], r = edges[m + 2];
            for (std::size_t b = 0; b < n_bins_; ++b) {
                const double f = double(b) * sample_rate_ / double(n_fft_);
                double w = 0.0;
                if (f > l && f <= c && c > l) w = (f - l) / (c - l);
                else if (f > c && f < r && r > c) w = (r - f) / (r - c);
                fbank_[m * n_bins_ + b] = w;
            }
        }
    }

    // Orthonormal DCT-II.
    void build_dct() {
        dct_.resize(cfg_.n_mfcc * n_mels_);
        const double N = double(n_mels_);
        for (std::size_t c = 0; c < cfg_.n_mfcc; ++c) {
            const double scale = c == 0 ? std::sqrt(1.0 / N) : std::sqrt(2.0 / N);
            for (std::size_t m = 0; m < n_mels_; ++m)
                dct_[c * n_mels_ + m] = scale * std::cos(std::numbers::pi * double(c) * (double(m) + 0.5) / N);
        }
    }

    MfccConfig cfg_;
    double sample_rate_;
    std::size_t n_mels_ = 0, n_fft_ = 0, n_bins_ = 0;
    std::unique_ptr<double, FftwFree> in_;
    std::unique_ptr<fftw_complex, FftwFree> out_;
    std::unique_ptr<std::remove_pointer_t<fftw_plan>, PlanFree> plan_;
    std::vector<double> window_, fbank_, dct_;
};

}  // namespace gnft
