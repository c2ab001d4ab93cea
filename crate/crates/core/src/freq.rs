//! Frequency-domain view of spiking neurons.
//!
//! The LIF charge equation is a first-order IIR filter
//! `H(z) = (1-β) / (1 - β z⁻¹)`; stacking `L` spiking layers with scalar
//! spike-coding gains `k_i·W_i` gives `(∏ k_i W_i) · H(z)^L`. This module
//! evaluates those responses analytically and measures spectra of signals and
//! feature maps empirically.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use spikelab_numcore::Tensor;

use crate::error::{param_err, Error, Result};
use crate::neuron::{run_sequence, NeuronParams};

/// `(∏ gains) · (gain / (1 - pole·z⁻¹))^depth`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferFunction {
    gain: f64,
    pole: f64,
    depth: usize,
    layer_gains: Vec<f64>,
}

impl TransferFunction {
    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn pole(&self) -> f64 {
        self.pole
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn layer_gains(&self) -> &[f64] {
        &self.layer_gains
    }
}

pub fn lif_transfer(beta: f64) -> Result<TransferFunction> {
    if !(0.0..1.0).contains(&beta) {
        return param_err(format!("LIF pole must lie in [0, 1), got {beta}"));
    }
    Ok(TransferFunction {
        gain: 1.0 - beta,
        pole: beta,
        depth: 1,
        layer_gains: vec![1.0],
    })
}

/// Non-leaky integrator: pole on the unit circle at `z = 1`.
pub fn if_transfer() -> TransferFunction {
    TransferFunction {
        gain: 1.0,
        pole: 1.0,
        depth: 1,
        layer_gains: vec![1.0],
    }
}

/// Composes `depth` copies of `base`'s first-order section with per-layer scalar gains.
pub fn layered_transfer(base: &TransferFunction, depth: usize, gains: &[f64]) -> Result<TransferFunction> {
    if depth == 0 {
        return param_err("depth must be at least 1");
    }
    if gains.len() != depth {
        return param_err(format!("expected {depth} layer gains, got {}", gains.len()));
    }
    Ok(TransferFunction {
        gain: base.gain,
        pole: base.pole,
        depth,
        layer_gains: gains.to_vec(),
    })
}

/// `|H(e^{jω})|` for `ω ∈ [0, π]`.
pub fn magnitude_response(tf: &TransferFunction, omega: f64) -> Result<f64> {
    if !(0.0..=PI).contains(&omega) {
        return param_err(format!("omega must lie in [0, π], got {omega}"));
    }
    if tf.pole >= 1.0 && omega == 0.0 {
        return Err(Error::Degenerate("pole at z = 1: DC gain is unbounded".into()));
    }
    // |1 - p·e^{-jω}|² = (1-p)² + 4p·sin²(ω/2), exact at ω = 0
    let denom = (1.0 - tf.pole).hypot(2.0 * tf.pole.sqrt() * (omega / 2.0).sin());
    let section = tf.gain / denom;
    let k: f64 = tf.layer_gains.iter().product();
    Ok(k.abs() * section.powi(tf.depth as i32))
}

/// Empirical local gain `k = ∂fr/∂V` at the given operating point: the
/// central difference of the firing rate under a `±delta` shift of the input
/// baseline, on `n_samples` Gaussian-driven neurons over `steps` timesteps.
///
/// Returns 0 when both shifted rates coincide (dead or saturated regime) and
/// an error when the perturbation spans the whole transition (rate 0 on one
/// side, 1 on the other), where the slope is meaningless.
pub fn local_gain(
    params: &NeuronParams,
    input_mean: f64,
    input_std: f64,
    n_samples: usize,
    steps: usize,
    delta: f64,
    seed: u64,
) -> Result<f64> {
    if n_samples < 100 {
        return param_err(format!("need at least 100 samples, got {n_samples}"));
    }
    if !(delta > 0.0) {
        return param_err(format!("delta must be positive, got {delta}"));
    }
    if steps == 0 {
        return param_err("need at least one timestep");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..steps * n_samples)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let rate = |shift: f64| -> Result<f64> {
        let currents = Tensor::new(
            &[steps, n_samples],
            noise.iter().map(|z| input_mean + shift + input_std * z).collect(),
        )?;
        Ok(run_sequence(params, &currents)?.0.mean())
    };
    let (plus, minus) = (rate(delta)?, rate(-delta)?);
    if plus == minus {
        return Ok(0.0);
    }
    if minus == 0.0 && plus == 1.0 {
        return Err(Error::Degenerate(format!(
            "delta {delta} spans the full firing transition; shrink it"
        )));
    }
    Ok((plus - minus) / (2.0 * delta))
}

/// One-sided amplitude spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub freqs: Vec<f64>,
    pub amps: Vec<f64>,
    pub sample_rate: f64,
}

impl Spectrum {
    /// Amplitude at the bin nearest to `freq`.
    pub fn amplitude_at(&self, freq: f64) -> f64 {
        let i = self
            .freqs
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - freq).abs().total_cmp(&(b.1 - freq).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0);
        self.amps[i]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("freq,amplitude\n");
        for (f, a) in self.freqs.iter().zip(&self.amps) {
            let _ = writeln!(s, "{f},{a}");
        }
        s
    }
}

/// Amplitude spectrum calibrated so a bin-aligned sine of amplitude `A`
/// shows `A` at its bin and a constant `c` shows `c` at DC.
pub fn dft(signal: &[f64], sample_rate: f64) -> Result<Spectrum> {
    let n = signal.len();
    if n < 2 {
        return param_err(format!("spectrum needs at least 2 samples, got {n}"));
    }
    if !(sample_rate > 0.0) {
        return param_err(format!("sample rate must be positive, got {sample_rate}"));
    }
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let half = n / 2;
    let mut freqs = Vec::with_capacity(half + 1);
    let mut amps = Vec::with_capacity(half + 1);
    for (k, c) in buf.iter().take(half + 1).enumerate() {
        let edge = k == 0 || (n % 2 == 0 && k == half);
        let scale = if edge { 1.0 } else { 2.0 };
        freqs.push(k as f64 * sample_rate / n as f64);
        amps.push(scale * c.norm() / n as f64);
    }
    Ok(Spectrum {
        freqs,
        amps,
        sample_rate,
    })
}

/// Spectral energy above `cutoff` over energy at or below it (DC included).
pub fn hf_energy_ratio(s: &Spectrum, cutoff: f64) -> Result<f64> {
    let top = s.freqs.last().copied().unwrap_or(0.0);
    if !(0.0..=top).contains(&cutoff) {
        return param_err(format!("cutoff {cutoff} outside spectrum range [0, {top}]"));
    }
    let (mut hi, mut lo) = (0.0, 0.0);
    for (&f, &a) in s.freqs.iter().zip(&s.amps) {
        if f > cutoff {
            hi += a * a;
        } else {
            lo += a * a;
        }
    }
    if lo == 0.0 {
        return Err(Error::Degenerate(format!("no spectral energy at or below {cutoff}")));
    }
    Ok(hi / lo)
}

/// Channel-averaged 2-D amplitude spectrum with DC at `(height/2, width/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum2D {
    pub height: usize,
    pub width: usize,
    /// Row-major `height × width` grid.
    pub amps: Vec<f64>,
}

impl Spectrum2D {
    pub fn center(&self) -> (usize, usize) {
        (self.height / 2, self.width / 2)
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.amps[y * self.width + x]
    }

    pub fn dc(&self) -> f64 {
        let (cy, cx) = self.center();
        self.at(cy, cx)
    }

    /// Pointwise mean of equally-sized spectra.
    pub fn average(spectra: &[Spectrum2D]) -> Result<Spectrum2D> {
        let first = spectra.first().ok_or_else(|| Error::Param("no spectra to average".into()))?;
        let mut amps = vec![0.0; first.amps.len()];
        for s in spectra {
            if (s.height, s.width) != (first.height, first.width) {
                return param_err("spectra differ in size");
            }
            for (a, b) in amps.iter_mut().zip(&s.amps) {
                *a += b;
            }
        }
        for a in &mut amps {
            *a /= spectra.len() as f64;
        }
        Ok(Spectrum2D {
            height: first.height,
            width: first.width,
            amps,
        })
    }

    /// Plain-text grid: a `shape H W` header, then one whitespace-separated row per line.
    pub fn to_text(&self) -> String {
        let mut s = format!("shape {} {}\n", self.height, self.width);
        for row in self.amps.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty spectrum grid".into()))?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        let (height, width) = match parts.as_slice() {
            ["shape", h, w] => (
                h.parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?,
                w.parse::<usize>().map_err(|e| Error::Parse(e.to_string()))?,
            ),
            _ => return Err(Error::Parse(format!("bad grid header {header:?}"))),
        };
        let amps = lines
            .flat_map(str::split_whitespace)
            .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if amps.len() != height * width {
            return Err(Error::Parse(format!(
                "grid holds {} values, header says {height}x{width}",
                amps.len()
            )));
        }
        Ok(Spectrum2D { height, width, amps })
    }
}

fn fft2_amplitude(plane: &[f64], h: usize, w: usize, planner: &mut FftPlanner<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = plane.iter().map(|&x| Complex::new(x, 0.0)).collect();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    let norm = (h * w) as f64;
    buf.iter().map(|c| c.norm() / norm).collect()
}

/// Channel-averaged, DC-centred amplitude spectrum of a `[C, H, W]` feature map.
/// Amplitudes are normalised by `H·W`, so a constant map shows its value at DC.
pub fn spectrum2d(feature: &Tensor) -> Result<Spectrum2D> {
    let s = feature.shape();
    let (c, h, w) = match *s {
        [c, h, w] => (c, h, w),
        [h, w] => (1, h, w),
        _ => return param_err(format!("feature map must be [C, H, W], got {s:?}")),
    };
    if h < 2 || w < 2 || c == 0 {
        return param_err(format!("feature map too small for a 2-D spectrum: {s:?}"));
    }
    let mut planner = FftPlanner::new();
    let mut acc = vec![0.0; h * w];
    for plane in feature.data().chunks(h * w) {
        for (a, v) in acc.iter_mut().zip(fft2_amplitude(plane, h, w, &mut planner)) {
            *a += v / c as f64;
        }
    }
    // fftshift: bin (ky, kx) moves to ((ky + h/2) % h, (kx + w/2) % w)
    let mut amps = vec![0.0; h * w];
    for ky in 0..h {
        for kx in 0..w {
            amps[((ky + h / 2) % h) * w + (kx + w / 2) % w] = acc[ky * w + kx];
        }
    }
    Ok(Spectrum2D {
        height: h,
        width: w,
        amps,
    })
}

/// Bins whose amplitude exceeds `threshold_frac` times the largest non-DC
/// amplitude. The DC bin is never flagged.
pub fn high_freq_mask(s: &Spectrum2D, threshold_frac: f64) -> Result<Vec<bool>> {
    if !(threshold_frac > 0.0 && threshold_frac < 1.0) {
        return param_err(format!("threshold fraction must lie in (0, 1), got {threshold_frac}"));
    }
    let (cy, cx) = s.center();
    let dc = cy * s.width + cx;
    let peak = s
        .amps
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != dc)
        .map(|(_, &a)| a)
        .fold(0.0, f64::max);
    Ok(s
        .amps
        .iter()
        .enumerate()
        .map(|(i, &a)| i != dc && a > threshold_frac * peak)
        .collect())
}

pub const LOG_FLOOR: f64 = 1e-12;

/// Radial profile of `ln(amplitude) - ln(DC amplitude)`.
///
/// Radius is `|f| / |f_nyquist_diagonal|` in `[0, 1]`, quantised to
/// `max(H, W)/2 + 1` rings; ring 0 holds only the DC bin.
pub fn relative_log_amplitude(s: &Spectrum2D) -> Result<Vec<(f64, f64)>> {
    let dc = s.dc();
    if !(dc > 0.0) {
        return Err(Error::Degenerate("DC amplitude is zero; relative log amplitude undefined".into()));
    }
    let log_dc = dc.max(LOG_FLOOR).ln();
    let rings = s.height.max(s.width) / 2 + 1;
    let mut sum = vec![0.0; rings];
    let mut cnt = vec![0usize; rings];
    let (cy, cx) = s.center();
    let (hy, hx) = ((s.height / 2) as f64, (s.width / 2) as f64);
    for y in 0..s.height {
        for x in 0..s.width {
            let fy = (y as f64 - cy as f64) / hy;
            let fx = (x as f64 - cx as f64) / hx;
            let r = (fy.hypot(fx) / 2f64.sqrt()).min(1.0);
            let ring = (r * (rings - 1) as f64).round() as usize;
            sum[ring] += s.at(y, x).max(LOG_FLOOR).ln();
            cnt[ring] += 1;
        }
    }
    Ok((0..rings)
        .filter(|&i| cnt[i] > 0)
        .map(|i| (i as f64 / (rings - 1) as f64, sum[i] / cnt[i] as f64 - log_dc))
        .collect())
}

pub fn curve_to_csv(curve: &[(f64, f64)]) -> String {
    let mut s = String::from("radius,delta_log_amp\n");
    for (r, v) in curve {
        let _ = writeln!(s, "{r},{v}");
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    Lif(NeuronParams),
}

/// Default neuron for the three-sine experiment: β = 0.25 and a threshold
/// low enough that the neuron gates on the positive lobes of the input, the
/// spiking counterpart of ReLU's zero threshold.
pub fn three_sine_lif() -> NeuronParams {
    NeuronParams::lif(0.25, 0.1).expect("valid constants")
}

pub const FIR_TAPS: usize = 16;

#[derive(Debug, Clone)]
pub struct ThreeSineRun {
    pub time: Vec<f64>,
    pub input: Vec<f64>,
    pub activated: Vec<f64>,
    pub weighted: Vec<f64>,
    pub fir: Vec<f64>,
    pub input_spectrum: Spectrum,
    pub activated_spectrum: Spectrum,
    pub weighted_spectrum: Spectrum,
}

/// `x(t) = (sin 2π·100t + sin 2π·200t + sin 2π·300t) / 3`.
pub fn three_sine(t: f64) -> f64 {
    ((2.0 * PI * 100.0 * t).sin() + (2.0 * PI * 200.0 * t).sin() + (2.0 * PI * 300.0 * t).sin()) / 3.0
}

/// Random causal FIR weighting `w[0..16] ~ N(0, 1)`.
pub fn random_fir(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..FIR_TAPS).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// `y[n] = Σ_k w[k]·x[n-k]` with zero initial state.
pub fn causal_fir(signal: &[f64], taps: &[f64]) -> Vec<f64> {
    (0..signal.len())
        .map(|n| {
            taps.iter()
                .enumerate()
                .take(n + 1)
                .map(|(k, w)| w * signal[n - k])
                .sum()
        })
        .collect()
}

/// input → activation → random linear weighting, with spectra at every stage.
/// The neuron sees one sample per timestep with `I[n] = x(n/fs)`.
pub fn three_sine_experiment(
    activation: Activation,
    weights_seed: u64,
    sample_rate: f64,
    duration: f64,
) -> Result<ThreeSineRun> {
    let n = (duration * sample_rate).round();
    if !(n >= 1000.0) {
        return param_err(format!("need at least 1000 samples, got {n}"));
    }
    let n = n as usize;
    let time: Vec<f64> = (0..n).map(|i| i as f64 / sample_rate).collect();
    let input: Vec<f64> = time.iter().map(|&t| three_sine(t)).collect();
    let activated = match activation {
        Activation::Relu => input.iter().map(|&x| x.max(0.0)).collect(),
        Activation::Lif(p) => {
            let currents = Tensor::new(&[n], input.clone())?;
            run_sequence(&p, &currents)?.0.into_data()
        }
    };
    let fir = random_fir(weights_seed);
    let weighted = causal_fir(&activated, &fir);
    Ok(ThreeSineRun {
        input_spectrum: dft(&input, sample_rate)?,
        activated_spectrum: dft(&activated, sample_rate)?,
        weighted_spectrum: dft(&weighted, sample_rate)?,
        time,
        input,
        activated,
        weighted,
        fir,
    })
}
