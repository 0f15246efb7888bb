// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <complex>
#include <cstddef>
#include <vector>

#include "amfn/rng.hpp"
#include "amfn/tape.hpp"
#include "amfn/tensor.hpp"

namespace amfn {

// 16 kHz mono audio clip, samples nominally in [-1, 1].
struct Waveform {
  std::vector<double> samples;
  int sample_rate_hz = 16000;

  double duration_s() const {
    return static_cast<double>(samples.size()) / static_cast<double>(sample_rate_hz);
  }
};

// Spectrogram geometry shared by the whole audio path.
inline constexpr int kAudioSampleRate = 16000;
inline constexpr std::size_t kStftWindow = 400;  // 25 ms at 16 kHz
inline constexpr std::size_t kStftHop = 160;     // 10 ms at 16 kHz
inline constexpr std::size_t kStftFft = 512;     // window zero-padded to the next power of two
inline constexpr std::size_t kMelBands = 128;
inline constexpr double kMelFmax = 8000.0;
inline constexpr double kLogMelFloor = 1e-10;

// In-place iterative radix-2 FFT; size must be a power of two.
void fft_radix2(std::vector<std::complex<double>>& a);

// HTK mel scale.
double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Triangular area-normalized filterbank, (kMelBands, kStftFft/2 + 1).
Tensor<double> mel_filterbank();

// Log-mel spectrogram, (frames, 128) with frames = round(samples / 160).
// Hamming-windowed 400-sample frames on a reflect-padded signal, 160-sample
// hop, power spectrum through the mel filterbank, natural log with a floor
// clamp at log(1e-10).
Tensor<double> log_mel_spectrogram(const Waveform& w);

// One time mask of width U{0..max_t} and one frequency mask of width
// U{0..max_f}; masked cells are replaced by the input's global mean. Draw
// order: time width, time start, frequency width, frequency start.
Tensor<double> spec_augment(const Tensor<double>& spec, std::size_t max_t, std::size_t max_f,
                            RngState& rng);

// Patch-grid extents for a (frames, bands) spectrogram under kernel P stride
// S: time is right-padded with zeros so every frame is covered, frequency is
// cropped to full patches.
std::size_t patch_count_time(std::size_t frames, std::size_t p, std::size_t s);
std::size_t patch_count_freq(std::size_t bands, std::size_t p, std::size_t s);

// P x P patches of the spectrogram projected to D channels: unfold to
// (T_a * N_a, P*P) then linear with weight (P*P, D) and bias (D), reshaped to
// (T_a, N_a, D). The unfold itself is data movement of a constant input; only
// the projection parameters carry gradients.
template <class Real>
Tensor<Real> patchify_audio(const Tensor<Real>& spec, std::size_t p, std::size_t s,
                            const Tensor<Real>& w, const Tensor<Real>& b,
                            std::type_identity_t<Tape<Real>*> tape);

extern template Tensor<float> patchify_audio<float>(const Tensor<float>&, std::size_t,
                                                    std::size_t, const Tensor<float>&,
                                                    const Tensor<float>&, Tape<float>*);
extern template Tensor<double> patchify_audio<double>(const Tensor<double>&, std::size_t,
                                                      std::size_t, const Tensor<double>&,
                                                      const Tensor<double>&, Tape<double>*);

}  // namespace amfn
