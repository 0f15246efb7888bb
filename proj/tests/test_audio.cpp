// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <complex>
#include <numbers>
#include <vector>

#include "amfn/audio.hpp"
#include "amfn/ops.hpp"
#include "amfn/rng.hpp"
#include "amfn/tape.hpp"
#include "doctest.h"

using namespace amfn;

namespace {

// Quadratic-time DFT used as the oracle for the radix-2 FFT.
std::vector<std::complex<double>> naive_dft(const std::vector<std::complex<double>>& x) {
  const std::size_t n = x.size();
  std::vector<std::complex<double>> out(n);
  for (std::size_t k = 0; k < n; ++k) {
    std::complex<double> acc(0.0, 0.0);
    for (std::size_t t = 0; t < n; ++t) {
      const double ang = -2.0 * std::numbers::pi * static_cast<double>(k * t) /
                         static_cast<double>(n);
      acc += x[t] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  return out;
}

Waveform tone(double freq_hz, double seconds) {
  Waveform w;
  const std::size_t n = static_cast<std::size_t>(seconds * 16000.0);
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i)
    w.samples[i] =
        std::sin(2.0 * std::numbers::pi * freq_hz * static_cast<double>(i) / 16000.0);
  return w;
}

}  // namespace

TEST_CASE("fft: matches the naive DFT oracle") {
  RngState rng(300, "fft");
  for (std::size_t n : {std::size_t(8), std::size_t(64), std::size_t(512)}) {
    std::vector<std::complex<double>> x(n);
    for (auto& v : x) v = {rng.normal(), rng.normal()};
    auto got = x;
    fft_radix2(got);
    auto want = naive_dft(x);
    double worst = 0.0;
    for (std::size_t k = 0; k < n; ++k) worst = std::max(worst, std::abs(got[k] - want[k]));
    CHECK(worst <= 1e-9 * static_cast<double>(n));
  }
  std::vector<std::complex<double>> bad(6);
  CHECK_THROWS_AS(fft_radix2(bad), UsageError);
}

TEST_CASE("log-mel: frame counts follow the 100-rows-per-second rule") {
  // 100 frames per second of audio: hop 160 at 16 kHz, count rounded.
  for (double secs : {0.5, 1.0, 2.0, 4.0}) {
    Waveform w = tone(440.0, secs);
    auto spec = log_mel_spectrogram(w);
    CHECK(spec.dim(0) == static_cast<std::size_t>(100.0 * secs));
    CHECK(spec.dim(1) == 128);
  }
}

TEST_CASE("log-mel: all-zero waveform sits exactly on the log floor") {
  Waveform w;
  w.samples.assign(16000, 0.0);
  auto spec = log_mel_spectrogram(w);
  const double floor_val = std::log(1e-10);
  for (double v : spec.data()) CHECK(v == floor_val);
}

TEST_CASE("log-mel: input validation") {
  Waveform wrong_rate = tone(440.0, 1.0);
  wrong_rate.sample_rate_hz = 44100;
  CHECK_THROWS_AS(log_mel_spectrogram(wrong_rate), ConfigError);
  Waveform tiny;
  tiny.samples.assign(399, 0.1);
  CHECK_THROWS_AS(log_mel_spectrogram(tiny), ShapeError);
}

TEST_CASE("log-mel: a pure tone peaks in the band containing its frequency") {
  const double f0 = 2000.0;
  auto spec = log_mel_spectrogram(tone(f0, 1.0));
  const std::size_t frames = spec.dim(0), bands = spec.dim(1);
  std::vector<double> band_mean(bands, 0.0);
  auto sd = spec.data();
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t j = 0; j < bands; ++j) band_mean[j] += sd[t * bands + j];
  std::size_t best = 0;
  for (std::size_t j = 1; j < bands; ++j)
    if (band_mean[j] > band_mean[best]) best = j;
  // Band centers are equally spaced on the mel scale m(f) = 2595 log10(1+f/700)
  // over [0, 8000]; the winning band's center must sit near 2 kHz.
  const double mel_max = 2595.0 * std::log10(1.0 + 8000.0 / 700.0);
  const double center_mel = mel_max * static_cast<double>(best + 1) / 129.0;
  const double center_hz = 700.0 * (std::pow(10.0, center_mel / 2595.0) - 1.0);
  CHECK(std::abs(center_hz - f0) <= 150.0);
}

TEST_CASE("mel filterbank: non-negative with interior bands populated") {
  auto fb = mel_filterbank();
  REQUIRE(fb.shape() == Shape{128, 257});
  for (double v : fb.data()) CHECK(v >= 0.0);
  // Wide high-frequency triangles must cover several FFT bins each.
  auto d = fb.data();
  for (std::size_t j = 64; j < 128; ++j) {
    std::size_t nonzero = 0;
    for (std::size_t k = 0; k < 257; ++k)
      if (d[j * 257 + k] > 0.0) ++nonzero;
    CHECK(nonzero >= 2);
  }
}

TEST_CASE("spec_augment: zero widths are the identity") {
  auto spec = log_mel_spectrogram(tone(500.0, 0.5));
  RngState rng(301, "sa0");
  auto out = spec_augment(spec, 0, 0, rng);
  for (std::size_t i = 0; i < spec.numel(); ++i) CHECK(out[i] == spec[i]);
}

TEST_CASE("spec_augment: one time band and one frequency band at the mean") {
  auto spec = log_mel_spectrogram(tone(1500.0, 1.0));
  const std::size_t frames = spec.dim(0), bands = spec.dim(1);
  double mean = 0.0;
  for (double v : spec.data()) mean += v;
  mean /= static_cast<double>(spec.numel());

  RngState rng(302, "sa");
  const std::size_t max_t = 10, max_f = 12;
  auto out = spec_augment(spec, max_t, max_f, rng);

  std::vector<bool> row_changed(frames, false), col_changed(bands, false);
  std::size_t changed = 0;
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t f = 0; f < bands; ++f)
      if (out[t * bands + f] != spec[t * bands + f]) {
        ++changed;
        row_changed[t] = true;
        col_changed[f] = true;
        CHECK(out[t * bands + f] == mean);
      }
  CHECK(changed <= max_t * bands + max_f * frames);
  // Changed rows form one contiguous run of width <= max_t unless the row was
  // only touched by the frequency mask (in which case <= max_f columns moved).
  std::size_t full_rows = 0;
  for (std::size_t t = 0; t < frames; ++t) {
    std::size_t moved = 0;
    for (std::size_t f = 0; f < bands; ++f)
      if (out[t * bands + f] != spec[t * bands + f]) ++moved;
    if (moved > max_f) ++full_rows;
  }
  CHECK(full_rows <= max_t);

  RngState rng2(302, "sa");
  auto out2 = spec_augment(spec, max_t, max_f, rng2);
  for (std::size_t i = 0; i < out.numel(); ++i) CHECK(out2[i] == out[i]);
}

TEST_CASE("patchify: grid arithmetic") {
  // ceil((frames-P)/S)+1 time patches (zero-padded), floor((bands-P)/S)+1
  // frequency patches (cropped).
  CHECK(patch_count_time(200, 16, 10) == 20);
  CHECK(patch_count_freq(128, 16, 10) == 12);
  CHECK(patch_count_time(128, 128, 1) == 1);
  CHECK(patch_count_freq(128, 128, 1) == 1);
  CHECK(patch_count_time(100, 16, 16) == 7);
  CHECK_THROWS_AS(patch_count_time(15, 16, 10), ShapeError);
}

TEST_CASE("patchify: projection matches a direct patch-loop oracle") {
  RngState rng(303, "patch");
  const std::size_t frames = 10, bands = 8, p = 3, s = 2, d = 4;
  std::vector<double> sv(frames * bands);
  for (auto& v : sv) v = rng.normal();
  auto spec = Tensor<double>::from({frames, bands}, std::move(sv));
  std::vector<double> wv(p * p * d), bv(d);
  for (auto& v : wv) v = rng.normal();
  for (auto& v : bv) v = rng.normal();
  auto w = Tensor<double>::from({p * p, d}, std::move(wv));
  auto b = Tensor<double>::from({d}, std::move(bv));

  auto out = patchify_audio(spec, p, s, w, b, nullptr);
  const std::size_t ta = patch_count_time(frames, p, s);
  const std::size_t na = patch_count_freq(bands, p, s);
  REQUIRE(out.shape() == Shape{ta, na, d});

  for (std::size_t ti = 0; ti < ta; ++ti)
    for (std::size_t ni = 0; ni < na; ++ni)
      for (std::size_t c = 0; c < d; ++c) {
        double acc = b[c];
        for (std::size_t pi = 0; pi < p; ++pi)
          for (std::size_t pj = 0; pj < p; ++pj) {
            const std::size_t row = ti * s + pi;
            const double cell = row < frames ? spec[row * bands + ni * s + pj] : 0.0;
            acc += cell * w[(pi * p + pj) * d + c];
          }
        CHECK(out[(ti * na + ni) * d + c] == doctest::Approx(acc).epsilon(1e-9));
      }
}

TEST_CASE("patchify: gradients reach the projection parameters") {
  RngState rng(304, "patch-grad");
  const std::size_t frames = 6, bands = 6, p = 2, s = 2, d = 3;
  std::vector<double> sv(frames * bands);
  for (auto& v : sv) v = rng.normal();
  auto spec = Tensor<double>::from({frames, bands}, std::move(sv));
  auto w = Tensor<double>::zeros({p * p, d});
  auto b = Tensor<double>::zeros({d});
  Tape<double> tape;
  tape.watch(w);
  tape.watch(b);
  auto out = patchify_audio(spec, p, s, w, b, &tape);
  auto loss = sum_all(out, &tape);
  tape.backward(loss);
  CHECK(tape.grad(w.node).size() == p * p * d);
  CHECK(tape.grad(b.node).size() == d);
}
