// SPDX-License-Identifier: Apache-2.0
#include "amfn/audio.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "amfn/ops.hpp"

namespace amfn {

namespace {

// Reflect (edge-excluding) index into a signal of length n. The pad width in
// use (kStftWindow / 2) is always below n, so one fold suffices.
std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) {
  const auto len = static_cast<std::ptrdiff_t>(n);
  if (i < 0) i = -i;
  if (i >= len) i = 2 * (len - 1) - i;
  return static_cast<std::size_t>(i);
}

}  // namespace

void fft_radix2(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0)
    throw UsageError("fft_radix2: size " + std::to_string(n) + " is not a power of two");
  // Bit-reversal permutation.
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * std::numbers::pi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

Tensor<double> mel_filterbank() {
  const std::size_t bins = kStftFft / 2 + 1;
  const double hz_per_bin = static_cast<double>(kAudioSampleRate) / static_cast<double>(kStftFft);
  // Band edges equally spaced on the mel scale over [0, fmax].
  std::vector<double> edges_hz(kMelBands + 2);
  const double mel_max = hz_to_mel(kMelFmax);
  for (std::size_t j = 0; j < edges_hz.size(); ++j)
    edges_hz[j] = mel_to_hz(mel_max * static_cast<double>(j) / static_cast<double>(kMelBands + 1));
  std::vector<double> vals(kMelBands * bins, 0.0);
  for (std::size_t j = 0; j < kMelBands; ++j) {
    const double lo = edges_hz[j], mid = edges_hz[j + 1], hi = edges_hz[j + 2];
    const double area_norm = 2.0 / (hi - lo);
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * hz_per_bin;
      double wgt = 0.0;
      if (f > lo && f < hi) wgt = f <= mid ? (f - lo) / (mid - lo) : (hi - f) / (hi - mid);
      vals[j * bins + k] = wgt * area_norm;
    }
  }
  return Tensor<double>::from({kMelBands, bins}, std::move(vals));
}

Tensor<double> log_mel_spectrogram(const Waveform& w) {
  if (w.sample_rate_hz != kAudioSampleRate)
    throw ConfigError("log_mel_spectrogram: sample rate " + std::to_string(w.sample_rate_hz) +
                      " unsupported, expected " + std::to_string(kAudioSampleRate));
  const std::size_t n = w.samples.size();
  if (n < kStftWindow)
    throw ShapeError("log_mel_spectrogram: clip of " + std::to_string(n) +
                     " samples is shorter than one " + std::to_string(kStftWindow) +
                     "-sample window");
  // Frame count = round(samples / hop) so a t-second clip yields 100t rows.
  const std::size_t frames = (n + kStftHop / 2) / kStftHop;
  std::vector<double> window(kStftWindow);
  for (std::size_t i = 0; i < kStftWindow; ++i)
    window[i] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                       static_cast<double>(kStftWindow - 1));
  const Tensor<double> fb = mel_filterbank();
  const std::size_t bins = kStftFft / 2 + 1;
  auto fbd = fb.data();
  std::vector<double> out(frames * kMelBands);
  const auto pad = static_cast<std::ptrdiff_t>(kStftWindow / 2);
  std::vector<std::complex<double>> buf(kStftFft);
  std::vector<double> power(bins);
  for (std::size_t t = 0; t < frames; ++t) {
    const auto start = static_cast<std::ptrdiff_t>(t * kStftHop) - pad;
    for (std::size_t i = 0; i < kStftFft; ++i) {
      double v = 0.0;
      if (i < kStftWindow) v = w.samples[reflect_index(start + (std::ptrdiff_t)i, n)] * window[i];
      buf[i] = {v, 0.0};
    }
    fft_radix2(buf);
    for (std::size_t k = 0; k < bins; ++k) power[k] = std::norm(buf[k]);
    for (std::size_t j = 0; j < kMelBands; ++j) {
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) e += fbd[j * bins + k] * power[k];
      out[t * kMelBands + j] = std::log(std::max(e, kLogMelFloor));
    }
  }
  return Tensor<double>::from({frames, kMelBands}, std::move(out));
}

Tensor<double> spec_augment(const Tensor<double>& spec, std::size_t max_t, std::size_t max_f,
                            RngState& rng) {
  if (spec.rank() != 2)
    throw ShapeError("spec_augment: expected a rank-2 spectrogram, got " +
                     shape_str(spec.shape()));
  const std::size_t frames = spec.dim(0), bands = spec.dim(1);
  if (max_t >= frames || max_f >= bands)
    throw ConfigError("spec_augment: mask limits (" + std::to_string(max_t) + ", " +
                      std::to_string(max_f) + ") must stay below the spectrogram extents " +
                      shape_str(spec.shape()));
  double mean = 0.0;
  for (double v : spec.data()) mean += v;
  mean /= static_cast<double>(spec.numel());
  const auto wt = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(max_t)));
  const auto t0 = static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(frames - wt)));
  const auto wf = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(max_f)));
  const auto f0 = static_cast<std::size_t>(
      rng.uniform_int(0, static_cast<std::int64_t>(bands - wf)));
  Tensor<double> out = spec;
  auto& od = out.mutable_data();
  for (std::size_t t = t0; t < t0 + wt; ++t)
    for (std::size_t f = 0; f < bands; ++f) od[t * bands + f] = mean;
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t f = f0; f < f0 + wf; ++f) od[t * bands + f] = mean;
  return out;
}

std::size_t patch_count_time(std::size_t frames, std::size_t p, std::size_t s) {
  if (frames < p)
    throw ShapeError("patchify: " + std::to_string(frames) + " frames is below patch size " +
                     std::to_string(p));
  return (frames - p + s - 1) / s + 1;
}

std::size_t patch_count_freq(std::size_t bands, std::size_t p, std::size_t s) {
  if (bands < p)
    throw ShapeError("patchify: " + std::to_string(bands) + " bands is below patch size " +
                     std::to_string(p));
  return (bands - p) / s + 1;
}

template <class Real>
Tensor<Real> patchify_audio(const Tensor<Real>& spec, std::size_t p, std::size_t s,
                            const Tensor<Real>& w, const Tensor<Real>& b,
                            std::type_identity_t<Tape<Real>*> tape) {
  if (spec.rank() != 2)
    throw ShapeError("patchify_audio: expected a rank-2 spectrogram, got " +
                     shape_str(spec.shape()));
  if (p == 0 || s == 0)
    throw ConfigError("patchify_audio: patch size and stride must be positive");
  const std::size_t frames = spec.dim(0), bands = spec.dim(1);
  const std::size_t ta = patch_count_time(frames, p, s);
  const std::size_t na = patch_count_freq(bands, p, s);
  if (w.rank() != 2 || w.dim(0) != p * p)
    throw ShapeError("patchify_audio: weight " + shape_str(w.shape()) + " does not match " +
                     std::to_string(p * p) + " patch cells");
  const std::size_t d = w.dim(1);
  auto sd = spec.data();
  std::vector<Real> patches(ta * na * p * p, Real(0));
  for (std::size_t ti = 0; ti < ta; ++ti)
    for (std::size_t ni = 0; ni < na; ++ni) {
      Real* dst = patches.data() + (ti * na + ni) * p * p;
      for (std::size_t pi = 0; pi < p; ++pi) {
        const std::size_t row = ti * s + pi;
        if (row >= frames) break;  // right zero padding on the time axis
        for (std::size_t pj = 0; pj < p; ++pj)
          dst[pi * p + pj] = sd[row * bands + ni * s + pj];
      }
    }
  Tensor<Real> unfolded = Tensor<Real>::from({ta * na, p * p}, std::move(patches));
  return linear(unfolded, w, b, tape).reshaped({ta, na, d});
}

template Tensor<float> patchify_audio<float>(const Tensor<float>&, std::size_t, std::size_t,
                                             const Tensor<float>&, const Tensor<float>&,
                                             Tape<float>*);
template Tensor<double> patchify_audio<double>(const Tensor<double>&, std::size_t, std::size_t,
                                               const Tensor<double>&, const Tensor<double>&,
                                               Tape<double>*);

}  // namespace amfn
