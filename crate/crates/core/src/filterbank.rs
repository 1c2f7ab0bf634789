//! Chebyshev type I band-pass design and zero-phase filtering.
//!
//! Each sub-band `r` keeps the harmonics of degree `r` and above: its lower
//! cut-off is `r * base_freq - margin` and its upper cut-off is fixed. The
//! stack of filtered copies is the network's input volume.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::dataset::TrialSet;
use crate::error::{ensure, Error, Result};

pub const FILTER_ORDER: usize = 2;
pub const PASSBAND_RIPPLE_DB: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandpassSpec {
    pub low_cut_hz: f64,
    pub high_cut_hz: f64,
    pub order: usize,
    pub passband_ripple_db: f64,
}

impl BandpassSpec {
    pub fn new(low_cut_hz: f64, high_cut_hz: f64) -> Self {
        Self {
            low_cut_hz,
            high_cut_hz,
            order: FILTER_ORDER,
            passband_ripple_db: PASSBAND_RIPPLE_DB,
        }
    }

    fn validate(&self, sampling_rate_hz: f64) -> Result<()> {
        let nyquist = sampling_rate_hz / 2.0;
        if !(self.low_cut_hz > 0.0 && self.low_cut_hz < self.high_cut_hz) {
            return Err(Error::Design(format!(
                "need 0 < low cut < high cut, got {} / {} Hz",
                self.low_cut_hz, self.high_cut_hz
            )));
        }
        if self.high_cut_hz >= nyquist {
            return Err(Error::Design(format!(
                "high cut {} Hz is at or above Nyquist ({nyquist} Hz)",
                self.high_cut_hz
            )));
        }
        if self.order == 0 || !(self.passband_ripple_db > 0.0) {
            return Err(Error::Design("order and ripple must be positive".into()));
        }
        Ok(())
    }
}

/// Transfer function `b(z) / a(z)` with `a[0] == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterCoefficients {
    pub numerator: Vec<f64>,
    pub denominator: Vec<f64>,
}

impl FilterCoefficients {
    pub fn len(&self) -> usize {
        self.numerator.len().max(self.denominator.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Complex frequency response at `freq_hz`.
    pub fn response(&self, freq_hz: f64, sampling_rate_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / sampling_rate_hz;
        let eval = |c: &[f64]| {
            c.iter()
                .enumerate()
                .map(|(k, &v)| Complex64::from_polar(v, -w * k as f64))
                .sum::<Complex64>()
        };
        eval(&self.numerator) / eval(&self.denominator)
    }

    /// Single-pass magnitude response.
    pub fn magnitude(&self, freq_hz: f64, sampling_rate_hz: f64) -> f64 {
        self.response(freq_hz, sampling_rate_hz).norm()
    }

    /// Direct-form II transposed filter with initial state `zi`.
    fn lfilter(&self, input: &[f64], zi: &[f64]) -> Vec<f64> {
        let b = &self.numerator;
        let a = &self.denominator;
        let order = self.len() - 1;
        let mut state = zi.to_vec();
        let mut out = Vec::with_capacity(input.len());
        for &x in input {
            let y = b[0] * x + state.first().copied().unwrap_or(0.0);
            for k in 0..order {
                let next = if k + 1 < order { state[k + 1] } else { 0.0 };
                state[k] = next + b[k + 1] * x - a[k + 1] * y;
            }
            out.push(y);
        }
        out
    }

    /// Steady-state initial conditions for a unit step input.
    fn step_initial_state(&self) -> Vec<f64> {
        let b = &self.numerator;
        let a = &self.denominator;
        let n = self.len() - 1;
        // (I - companion(a)^T) zi = b[1..] - a[1..] * b[0]
        let mut m = vec![vec![0.0; n + 1]; n];
        for i in 0..n {
            m[i][i] += 1.0;
            m[i][0] += a[i + 1];
            if i + 1 < n {
                m[i][i + 1] -= 1.0;
            }
            m[i][n] = b[i + 1] - a[i + 1] * b[0];
        }
        solve_augmented(m)
    }
}

/// Gaussian elimination with partial pivoting on an `n x (n+1)` system.
fn solve_augmented(mut m: Vec<Vec<f64>>) -> Vec<f64> {
    let n = m.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for k in col..=n {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| m[row][k] * x[k]).sum();
        x[row] = (m[row][n] - s) / m[row][row];
    }
    x
}

fn poly_from_roots(roots: &[Complex64]) -> Vec<Complex64> {
    let mut coeffs = vec![Complex64::new(1.0, 0.0)];
    for &r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); coeffs.len() + 1];
        for (i, &c) in coeffs.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * r;
        }
        coeffs = next;
    }
    coeffs
}

/// Designs a digital Chebyshev type I band-pass filter: analog low-pass
/// prototype, low-pass to band-pass transform around pre-warped edges, then
/// the bilinear transform.
pub fn design_cheby1_bandpass(spec: &BandpassSpec, sampling_rate_hz: f64) -> Result<FilterCoefficients> {
    spec.validate(sampling_rate_hz)?;
    let n = spec.order;
    let fs = sampling_rate_hz;

    // analog prototype, cut-off 1 rad/s
    let eps = (10f64.powf(spec.passband_ripple_db / 10.0) - 1.0).sqrt();
    let mu = (1.0 / eps).asinh() / n as f64;
    let proto: Vec<Complex64> = (1..=n)
        .map(|k| {
            let theta = PI * (2 * k - 1) as f64 / (2 * n) as f64;
            Complex64::new(-mu.sinh() * theta.sin(), mu.cosh() * theta.cos())
        })
        .collect();
    let mut gain = proto.iter().map(|p| -p).product::<Complex64>().re;
    if n.is_multiple_of(2) {
        gain /= (1.0 + eps * eps).sqrt();
    }

    let warp = |f: f64| 2.0 * fs * (PI * f / fs).tan();
    let (w1, w2) = (warp(spec.low_cut_hz), warp(spec.high_cut_hz));
    let bw = w2 - w1;
    let w0 = (w1 * w2).sqrt();

    let mut poles = Vec::with_capacity(2 * n);
    for &p in &proto {
        let half = p * (bw / 2.0);
        let disc = (half * half - w0 * w0).sqrt();
        poles.push(half + disc);
        poles.push(half - disc);
    }
    gain *= bw.powi(n as i32);

    // bilinear: n zeros at s=0 map to z=1, n zeros at infinity to z=-1
    let two_fs = Complex64::new(2.0 * fs, 0.0);
    let z_poles: Vec<Complex64> = poles.iter().map(|&p| (two_fs + p) / (two_fs - p)).collect();
    let mut z_zeros = vec![Complex64::new(1.0, 0.0); n];
    z_zeros.extend(std::iter::repeat_n(Complex64::new(-1.0, 0.0), n));
    let z_gain = gain * (two_fs.powi(n as i32) / poles.iter().map(|&p| two_fs - p).product::<Complex64>()).re;

    let numerator: Vec<f64> = poly_from_roots(&z_zeros).iter().map(|c| c.re * z_gain).collect();
    let denominator: Vec<f64> = poly_from_roots(&z_poles).iter().map(|c| c.re).collect();
    if z_poles.iter().any(|p| p.norm() >= 1.0) {
        return Err(Error::Design("designed filter is unstable".into()));
    }
    Ok(FilterCoefficients {
        numerator,
        denominator,
    })
}

/// Edge padding length used by [`filtfilt`]: three times the filter order.
pub fn pad_len(coeffs: &FilterCoefficients) -> usize {
    3 * (coeffs.len() - 1)
}

/// One forward-then-backward pass with odd-reflection padding and
/// step-steady-state initial conditions (the classic `filtfilt`).
pub fn filtfilt_forward_first(coeffs: &FilterCoefficients, signal: &[f64]) -> Result<Vec<f64>> {
    let pad = pad_len(coeffs);
    ensure!(
        signal.len() > pad,
        Argument,
        "signal of length {} is too short for zero-phase filtering (need > {pad})",
        signal.len()
    );
    let n = signal.len();
    let first = signal[0];
    let last = signal[n - 1];
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - signal[i]));
    ext.extend_from_slice(signal);
    ext.extend((1..=pad).map(|i| 2.0 * last - signal[n - 1 - i]));

    let zi = coeffs.step_initial_state();
    let scaled = |x0: f64| zi.iter().map(|z| z * x0).collect::<Vec<_>>();
    let mut y = coeffs.lfilter(&ext, &scaled(ext[0]));
    y.reverse();
    let mut y = coeffs.lfilter(&y, &scaled(y[0]));
    y.reverse();
    Ok(y[pad..pad + n].to_vec())
}

/// Zero-phase filtering.
///
/// Averages the forward-first pass with the mirrored backward-first pass, so
/// `filtfilt(reverse(u)) == reverse(filtfilt(u))` holds exactly. Away from
/// the edges the result matches [`filtfilt_forward_first`].
pub fn filtfilt(coeffs: &FilterCoefficients, signal: &[f64]) -> Result<Vec<f64>> {
    let forward = filtfilt_forward_first(coeffs, signal)?;
    let reversed: Vec<f64> = signal.iter().rev().copied().collect();
    let backward = filtfilt_forward_first(coeffs, &reversed)?;
    Ok(forward
        .iter()
        .zip(backward.iter().rev())
        .map(|(f, b)| 0.5 * (f + b))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterBankSpec {
    pub n_subbands: usize,
    pub base_freq_hz: f64,
    pub margin_hz: f64,
    pub upper_cut_hz: f64,
}

impl FilterBankSpec {
    pub const DEFAULT_MARGIN_HZ: f64 = 2.0;
    pub const DEFAULT_UPPER_CUT_HZ: f64 = 90.0;

    pub fn new(n_subbands: usize, base_freq_hz: f64) -> Self {
        Self {
            n_subbands,
            base_freq_hz,
            margin_hz: Self::DEFAULT_MARGIN_HZ,
            upper_cut_hz: Self::DEFAULT_UPPER_CUT_HZ,
        }
    }

    /// Band for sub-band `r` (1-based).
    pub fn band(&self, r: usize) -> BandpassSpec {
        BandpassSpec::new(r as f64 * self.base_freq_hz - self.margin_hz, self.upper_cut_hz)
    }

    pub fn bands(&self) -> Vec<BandpassSpec> {
        (1..=self.n_subbands).map(|r| self.band(r)).collect()
    }

    pub fn design(&self, sampling_rate_hz: f64) -> Result<Vec<FilterCoefficients>> {
        ensure!(self.n_subbands >= 1, Argument, "need at least one sub-band");
        self.bands()
            .iter()
            .map(|b| design_cheby1_bandpass(b, sampling_rate_hz))
            .collect()
    }
}

/// One trial's network input: `n_subbands` filtered copies of a `C x N` epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandStack {
    n_channels: usize,
    n_samples: usize,
    n_subbands: usize,
    /// `[subband][channel][sample]`
    volume: Vec<f64>,
}

impl SubbandStack {
    pub fn from_slices(n_channels: usize, n_samples: usize, slices: Vec<Vec<f64>>) -> Result<Self> {
        ensure!(!slices.is_empty(), Argument, "stack needs at least one sub-band");
        let n_subbands = slices.len();
        ensure!(
            slices.iter().all(|s| s.len() == n_channels * n_samples),
            Shape,
            "every sub-band slice must be {n_channels}x{n_samples}"
        );
        let volume: Vec<f64> = slices.into_iter().flatten().collect();
        ensure!(
            volume.iter().all(|v| v.is_finite()),
            Data,
            "sub-band stack contains non-finite values"
        );
        Ok(Self {
            n_channels,
            n_samples,
            n_subbands,
            volume,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_subbands(&self) -> usize {
        self.n_subbands
    }

    /// Sub-band `r` (0-based) as a `C x N` row-major matrix.
    pub fn slice(&self, r: usize) -> &[f64] {
        let len = self.n_channels * self.n_samples;
        &self.volume[r * len..(r + 1) * len]
    }

    pub fn get(&self, channel: usize, sample: usize, subband: usize) -> f64 {
        self.slice(subband)[channel * self.n_samples + sample]
    }
}

/// Filters every channel of a `C x N` epoch with each pre-designed band.
pub fn make_subbands_with(
    epoch: &[f64],
    n_channels: usize,
    filters: &[FilterCoefficients],
) -> Result<SubbandStack> {
    ensure!(
        n_channels > 0 && epoch.len().is_multiple_of(n_channels),
        Shape,
        "epoch of {} values is not divisible into {n_channels} channels",
        epoch.len()
    );
    let n = epoch.len() / n_channels;
    let slices = filters
        .iter()
        .map(|f| {
            let mut slice = Vec::with_capacity(epoch.len());
            for row in epoch.chunks_exact(n) {
                slice.extend(filtfilt(f, row)?);
            }
            Ok(slice)
        })
        .collect::<Result<Vec<_>>>()?;
    SubbandStack::from_slices(n_channels, n, slices)
}

pub fn make_subbands(
    epoch: &[f64],
    n_channels: usize,
    bank: &FilterBankSpec,
    sampling_rate_hz: f64,
) -> Result<SubbandStack> {
    make_subbands_with(epoch, n_channels, &bank.design(sampling_rate_hz)?)
}

/// Sub-band stacks for every trial of a set, in trial order.
pub fn make_stacks(trials: &TrialSet, bank: &FilterBankSpec) -> Result<Vec<SubbandStack>> {
    let filters = bank.design(trials.sampling_rate_hz)?;
    let run = |t: &crate::dataset::Trial| make_subbands_with(&t.epoch, trials.n_channels, &filters);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        trials.trials.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        trials.trials.iter().map(run).collect()
    }
}
