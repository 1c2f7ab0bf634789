//! The five-layer classifier and its hand-derived gradients.
//!
//! Shapes for one trial (`C` channels, `N` samples, `S` sub-bands, `K`
//! channel combinations, `M` classes, FIR length `F`):
//!
//! ```text
//! input  C x N x S
//! z1     C x N          z1(c,n)  = sum_r input(c,n,r) w1(r)
//! z2     N x K          z2       = z1' w2
//! z3     L3 x K         z3(t,k)  = relu(sum_{tau,d} z2(2t+tau, d) w3[k](tau,d))
//! z4     L4 x K         z4(t,k)  = sum_{tau<F,d} z3(t+tau, d) w4[k](tau,d)
//! logits M              flatten(z4) w_fc + b_fc
//! ```
//!
//! with `L3 = floor((N-2)/2) + 1` and `L4 = L3 - F + 1`. All matrices are
//! row-major. Dropout masks (inverted, scaled by `1/(1-p)`) are applied to
//! z2, z3 and z4 during training.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::filterbank::SubbandStack;

pub const DEFAULT_FIR_LENGTH: usize = 10;
pub const DEFAULT_STRIDE: usize = 2;
pub const DEFAULT_TAPS: usize = 2;
pub const INIT_VARIANCE: f64 = 0.01;
const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub n_channels: usize,
    pub n_samples: usize,
    pub n_subbands: usize,
    pub n_classes: usize,
    pub n_combinations: usize,
    pub fir_length: usize,
    pub downsample_stride: usize,
    pub tap_length: usize,
}

impl NetworkConfig {
    /// The standard layout with `n_subbands * n_classes` channel combinations.
    pub fn new(n_channels: usize, n_samples: usize, n_subbands: usize, n_classes: usize) -> Result<Self> {
        Self {
            n_channels,
            n_samples,
            n_subbands,
            n_classes,
            n_combinations: n_subbands * n_classes,
            fir_length: DEFAULT_FIR_LENGTH,
            downsample_stride: DEFAULT_STRIDE,
            tap_length: DEFAULT_TAPS,
        }
        .validated()
    }

    pub fn with_combinations(mut self, n_combinations: usize) -> Result<Self> {
        self.n_combinations = n_combinations;
        self.validated()
    }

    pub fn validated(self) -> Result<Self> {
        ensure!(
            self.n_channels > 0
                && self.n_subbands > 0
                && self.n_combinations > 0
                && self.fir_length > 0
                && self.downsample_stride > 0
                && self.tap_length > 0,
            Argument,
            "network dimensions must be positive: {self:?}"
        );
        ensure!(self.n_classes >= 2, Argument, "need at least 2 classes");
        ensure!(
            self.n_samples >= self.tap_length,
            Argument,
            "{} samples is shorter than the {}-tap layer",
            self.n_samples,
            self.tap_length
        );
        ensure!(
            self.len3() >= self.fir_length,
            Argument,
            "layer-3 length {} leaves no room for a length-{} FIR (need N >= {})",
            self.len3(),
            self.fir_length,
            self.downsample_stride * (self.fir_length - 1) + self.tap_length
        );
        Ok(self)
    }

    /// Time length after the strided two-tap layer.
    pub fn len3(&self) -> usize {
        (self.n_samples - self.tap_length) / self.downsample_stride + 1
    }

    /// Time length after the valid FIR layer.
    pub fn len4(&self) -> usize {
        self.len3() + 1 - self.fir_length
    }

    pub fn fc_inputs(&self) -> usize {
        self.len4() * self.n_combinations
    }

    pub fn parameter_count(&self) -> usize {
        let k = self.n_combinations;
        self.n_subbands
            + self.n_channels * k
            + k * self.tap_length * k
            + k * self.fir_length * k
            + self.fc_inputs() * self.n_classes
            + self.n_classes
    }
}

/// Trainable weights. Serialization order is w1, w2, w3, w4, w_fc, b_fc.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    config: NetworkConfig,
    /// `S` sub-band weights.
    pub w1: Vec<f64>,
    /// `C x K` channel combinations.
    pub w2: Vec<f64>,
    /// `K` filters of `taps x K`, stored `[k][tau][d]`.
    pub w3: Vec<f64>,
    /// `K` filters of `F x K`, stored `[k][tau][d]`.
    pub w4: Vec<f64>,
    /// `(L4*K) x M`.
    pub w_fc: Vec<f64>,
    /// `M`.
    pub b_fc: Vec<f64>,
}

/// Gradients share the parameter layout.
pub type Gradients = Parameters;

pub const TENSOR_NAMES: [&str; 6] = ["w1", "w2", "w3", "w4", "w_fc", "b_fc"];

impl Parameters {
    pub fn zeros(config: NetworkConfig) -> Self {
        let k = config.n_combinations;
        Self {
            config,
            w1: vec![0.0; config.n_subbands],
            w2: vec![0.0; config.n_channels * k],
            w3: vec![0.0; k * config.tap_length * k],
            w4: vec![0.0; k * config.fir_length * k],
            w_fc: vec![0.0; config.fc_inputs() * config.n_classes],
            b_fc: vec![0.0; config.n_classes],
        }
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Shapes of the six tensors in serialization order.
    pub fn shapes(config: &NetworkConfig) -> [Vec<usize>; 6] {
        let k = config.n_combinations;
        [
            vec![config.n_subbands],
            vec![config.n_channels, k],
            vec![k, config.tap_length, k],
            vec![k, config.fir_length, k],
            vec![config.fc_inputs(), config.n_classes],
            vec![config.n_classes],
        ]
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        [&self.w1, &self.w2, &self.w3, &self.w4, &self.w_fc, &self.b_fc]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w1,
            &mut self.w2,
            &mut self.w3,
            &mut self.w4,
            &mut self.w_fc,
            &mut self.b_fc,
        ]
    }

    /// Builds parameters from six flat tensors, checking their lengths.
    pub fn from_tensors(config: NetworkConfig, tensors: [Vec<f64>; 6]) -> Result<Self> {
        let mut p = Self::zeros(config);
        for ((slot, t), name) in p.tensors_mut().into_iter().zip(tensors).zip(TENSOR_NAMES) {
            ensure!(
                slot.len() == t.len(),
                Shape,
                "tensor {name} has {} values, config expects {}",
                t.len(),
                slot.len()
            );
            *slot = t;
        }
        Ok(p)
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.tensors().into_iter().flatten()
    }

    pub fn squared_norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// `self += factor * other`
    pub fn add_scaled(&mut self, other: &Parameters, factor: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += factor * s;
            }
        }
    }
}

/// Layer-1 weights start at one; everything else is drawn from
/// `Normal(0, variance 0.01)`.
pub fn init_params(config: &NetworkConfig, rng: &mut dyn RngCore) -> Parameters {
    let mut p = Parameters::zeros(*config);
    p.w1.fill(1.0);
    let normal = Normal::new(0.0, INIT_VARIANCE.sqrt()).unwrap();
    for t in p.tensors_mut().into_iter().skip(1) {
        for v in t.iter_mut() {
            *v = normal.sample(rng);
        }
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutSpec {
    pub p_after_l2: f64,
    pub p_after_l3: f64,
    pub p_after_l4: f64,
    #[serde(default = "enabled_default")]
    pub enabled: bool,
}

fn enabled_default() -> bool {
    true
}

impl DropoutSpec {
    pub const DISABLED: DropoutSpec = DropoutSpec {
        p_after_l2: 0.0,
        p_after_l3: 0.0,
        p_after_l4: 0.0,
        enabled: false,
    };

    pub fn new(p_after_l2: f64, p_after_l3: f64, p_after_l4: f64) -> Result<Self> {
        let spec = Self {
            p_after_l2,
            p_after_l3,
            p_after_l4,
            enabled: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        for p in [self.p_after_l2, self.p_after_l3, self.p_after_l4] {
            ensure!(
                (0.0..1.0).contains(&p),
                Argument,
                "dropout probability {p} outside [0, 1)"
            );
        }
        Ok(())
    }
}

/// Intermediate values of one forward pass. `z2`, `z3` and `z4` hold the
/// values after dropout (what the next layer actually consumed).
#[derive(Debug, Clone)]
pub struct ForwardCache<'a> {
    pub config: NetworkConfig,
    pub input: &'a SubbandStack,
    pub z1: Vec<f64>,
    pub z2: Vec<f64>,
    pub pre3: Vec<f64>,
    pub z3: Vec<f64>,
    pub z4: Vec<f64>,
    pub logits: Vec<f64>,
    pub softmax: Vec<f64>,
    pub mask2: Option<Vec<f64>>,
    pub mask3: Option<Vec<f64>>,
    pub mask4: Option<Vec<f64>>,
}

/// Strided view of a row-major (or transposed) matrix for GEMM calls.
#[derive(Clone, Copy)]
struct View<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a> View<'a> {
    fn new(data: &'a [f64], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        if rows > 0 && cols > 0 {
            assert!(
                (rows - 1) * rs + (cols - 1) * cs < data.len(),
                "view out of bounds"
            );
        }
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self::new(data, rows, cols, cols, 1)
    }

    fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }
}

/// `out = a * b + beta * out`, `out` row-major `a.rows x b.cols`.
fn gemm(a: View, b: View, out: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows);
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: both views were bounds-checked on construction and `out` holds
    // exactly m*n elements addressed with strides (n, 1).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dropout_mask(len: usize, p: f64, rng: &mut dyn RngCore) -> Option<Vec<f64>> {
    if p <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    Some(
        (0..len)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect(),
    )
}

fn apply_mask(values: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        values.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_input(config: &NetworkConfig, stack: &SubbandStack) -> Result<()> {
    ensure!(
        stack.n_channels() == config.n_channels
            && stack.n_samples() == config.n_samples
            && stack.n_subbands() == config.n_subbands,
        Argument,
        "input is {}x{}x{}, network expects {}x{}x{}",
        stack.n_channels(),
        stack.n_samples(),
        stack.n_subbands(),
        config.n_channels,
        config.n_samples,
        config.n_subbands
    );
    Ok(())
}

fn forward_impl<'a>(
    params: &Parameters,
    stack: &'a SubbandStack,
    mut dropout: Option<(&DropoutSpec, &mut dyn RngCore)>,
) -> Result<ForwardCache<'a>> {
    let cfg = params.config;
    check_input(&cfg, stack)?;
    let (c, n, k, m) = (cfg.n_channels, cfg.n_samples, cfg.n_combinations, cfg.n_classes);
    let (l3, l4) = (cfg.len3(), cfg.len4());
    let taps = cfg.tap_length;
    let fir = cfg.fir_length;

    let mut z1 = vec![0.0; c * n];
    for (r, &w) in params.w1.iter().enumerate() {
        for (dst, &x) in z1.iter_mut().zip(stack.slice(r)) {
            *dst += w * x;
        }
    }

    let mut z2 = vec![0.0; n * k];
    gemm(
        View::row_major(&z1, c, n).t(),
        View::row_major(&params.w2, c, k),
        &mut z2,
        0.0,
    );
    let mask2 = match dropout.as_mut() {
        Some((spec, rng)) => dropout_mask(z2.len(), spec.p_after_l2, *rng),
        None => None,
    };
    apply_mask(&mut z2, &mask2);

    // windows of `taps` consecutive rows are contiguous in row-major z2
    let mut pre3 = vec![0.0; l3 * k];
    gemm(
        View::new(&z2, l3, taps * k, cfg.downsample_stride * k, 1),
        View::row_major(&params.w3, k, taps * k).t(),
        &mut pre3,
        0.0,
    );
    let mut z3: Vec<f64> = pre3.iter().map(|&v| v.max(0.0)).collect();
    let mask3 = match dropout.as_mut() {
        Some((spec, rng)) => dropout_mask(z3.len(), spec.p_after_l3, *rng),
        None => None,
    };
    apply_mask(&mut z3, &mask3);

    let mut z4 = vec![0.0; l4 * k];
    gemm(
        View::new(&z3, l4, fir * k, k, 1),
        View::row_major(&params.w4, k, fir * k).t(),
        &mut z4,
        0.0,
    );
    let mask4 = match dropout.as_mut() {
        Some((spec, rng)) => dropout_mask(z4.len(), spec.p_after_l4, *rng),
        None => None,
    };
    apply_mask(&mut z4, &mask4);

    let mut logits = params.b_fc.clone();
    gemm(
        View::row_major(&z4, 1, l4 * k),
        View::row_major(&params.w_fc, l4 * k, m),
        &mut logits,
        1.0,
    );
    let softmax = softmax(&logits);

    Ok(ForwardCache {
        config: cfg,
        input: stack,
        z1,
        z2,
        pre3,
        z3,
        z4,
        logits,
        softmax,
        mask2,
        mask3,
        mask4,
    })
}

/// Forward pass. When `dropout.enabled`, masks are drawn from `rng`;
/// otherwise `rng` is left untouched.
pub fn forward<'a>(
    params: &Parameters,
    stack: &'a SubbandStack,
    dropout: &DropoutSpec,
    rng: &mut dyn RngCore,
) -> Result<ForwardCache<'a>> {
    if dropout.enabled {
        dropout.validate()?;
        forward_impl(params, stack, Some((dropout, rng)))
    } else {
        forward_impl(params, stack, None)
    }
}

/// Dropout-free forward pass.
pub fn forward_eval<'a>(params: &Parameters, stack: &'a SubbandStack) -> Result<ForwardCache<'a>> {
    forward_impl(params, stack, None)
}

/// Cross-entropy of one trial, without regularization.
pub fn cross_entropy(cache: &ForwardCache, label: usize) -> f64 {
    -cache.softmax[label].max(LOG_FLOOR).ln()
}

/// `-ln s(label) + lambda * |w|^2`.
pub fn loss(cache: &ForwardCache, label: usize, params: &Parameters, l2_lambda: f64) -> Result<f64> {
    ensure!(
        label < cache.config.n_classes,
        Argument,
        "label {label} outside [0, {})",
        cache.config.n_classes
    );
    Ok(cross_entropy(cache, label) + l2_lambda * params.squared_norm())
}

/// Adds the data-term gradient of one trial into `grads`.
pub fn accumulate_gradient(
    cache: &ForwardCache,
    label: usize,
    params: &Parameters,
    grads: &mut Gradients,
) -> Result<()> {
    let cfg = params.config;
    ensure!(
        cache.config == cfg && grads.config == cfg,
        Argument,
        "forward cache or gradient buffer was built for a different network"
    );
    ensure!(
        label < cfg.n_classes,
        Argument,
        "label {label} outside [0, {})",
        cfg.n_classes
    );
    let (c, n, k, m) = (cfg.n_channels, cfg.n_samples, cfg.n_combinations, cfg.n_classes);
    let (l3, l4) = (cfg.len3(), cfg.len4());
    let taps = cfg.tap_length;
    let fir = cfg.fir_length;
    let stride = cfg.downsample_stride;

    // softmax + cross-entropy
    let mut dlogits = cache.softmax.clone();
    dlogits[label] -= 1.0;

    for (g, d) in grads.b_fc.iter_mut().zip(&dlogits) {
        *g += d;
    }
    // dW_fc += z4' dlogits
    gemm(
        View::row_major(&cache.z4, l4 * k, 1),
        View::row_major(&dlogits, 1, m),
        &mut grads.w_fc,
        1.0,
    );
    let mut dz4 = vec![0.0; l4 * k];
    gemm(
        View::row_major(&params.w_fc, l4 * k, m),
        View::row_major(&dlogits, m, 1),
        &mut dz4,
        0.0,
    );
    apply_mask(&mut dz4, &cache.mask4);

    // FIR layer: dW4 += dz4' * windows(z3); d windows = dz4 * W4
    gemm(
        View::row_major(&dz4, l4, k).t(),
        View::new(&cache.z3, l4, fir * k, k, 1),
        &mut grads.w4,
        1.0,
    );
    let mut dwin4 = vec![0.0; l4 * fir * k];
    gemm(
        View::row_major(&dz4, l4, k),
        View::row_major(&params.w4, k, fir * k),
        &mut dwin4,
        0.0,
    );
    let mut dz3 = vec![0.0; l3 * k];
    for (t, win) in dwin4.chunks_exact(fir * k).enumerate() {
        for (dst, v) in dz3[t * k..(t + fir) * k].iter_mut().zip(win) {
            *dst += v;
        }
    }
    apply_mask(&mut dz3, &cache.mask3);
    for (d, &pre) in dz3.iter_mut().zip(&cache.pre3) {
        if pre <= 0.0 {
            *d = 0.0;
        }
    }

    // strided two-tap layer
    gemm(
        View::row_major(&dz3, l3, k).t(),
        View::new(&cache.z2, l3, taps * k, stride * k, 1),
        &mut grads.w3,
        1.0,
    );
    let mut dwin3 = vec![0.0; l3 * taps * k];
    gemm(
        View::row_major(&dz3, l3, k),
        View::row_major(&params.w3, k, taps * k),
        &mut dwin3,
        0.0,
    );
    let mut dz2 = vec![0.0; n * k];
    for (t, win) in dwin3.chunks_exact(taps * k).enumerate() {
        let start = t * stride * k;
        for (dst, v) in dz2[start..start + taps * k].iter_mut().zip(win) {
            *dst += v;
        }
    }
    apply_mask(&mut dz2, &cache.mask2);

    // channel combination: dW2 += z1 dz2 ; dz1 = W2 dz2'
    gemm(
        View::row_major(&cache.z1, c, n),
        View::row_major(&dz2, n, k),
        &mut grads.w2,
        1.0,
    );
    let mut dz1 = vec![0.0; c * n];
    gemm(
        View::row_major(&params.w2, c, k),
        View::row_major(&dz2, n, k).t(),
        &mut dz1,
        0.0,
    );

    for (r, g) in grads.w1.iter_mut().enumerate() {
        *g += dz1
            .iter()
            .zip(cache.input.slice(r))
            .map(|(a, b)| a * b)
            .sum::<f64>();
    }
    Ok(())
}

/// Gradient of [`loss`] with respect to every parameter, dropout masks
/// replayed from the cache.
pub fn backward(
    cache: &ForwardCache,
    label: usize,
    params: &Parameters,
    l2_lambda: f64,
) -> Result<Gradients> {
    let mut grads = Parameters::zeros(params.config);
    accumulate_gradient(cache, label, params, &mut grads)?;
    grads.add_scaled(params, 2.0 * l2_lambda);
    Ok(grads)
}

/// Index of the largest softmax entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(params: &Parameters, stack: &SubbandStack) -> Result<usize> {
    Ok(argmax(&forward_eval(params, stack)?.softmax))
}

impl From<NetworkConfig> for Parameters {
    fn from(config: NetworkConfig) -> Self {
        Parameters::zeros(config)
    }
}

impl Error {
    pub(crate) fn shape_mismatch(what: &str, want: &NetworkConfig, got: &NetworkConfig) -> Self {
        Error::Shape(format!("{what}: expected {want:?}, found {got:?}"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro_config() -> NetworkConfig {
        NetworkConfig {
            n_channels: 1,
            n_samples: 4,
            n_subbands: 1,
            n_classes: 2,
            n_combinations: 1,
            fir_length: 2,
            downsample_stride: 2,
            tap_length: 2,
        }
        .validated()
        .unwrap()
    }

    fn ones(config: NetworkConfig) -> Parameters {
        let mut p = Parameters::zeros(config);
        for t in p.tensors_mut() {
            t.fill(1.0);
        }
        p
    }

    #[test]
    fn micro_instance_by_hand() {
        let cfg = micro_config();
        let mut p = ones(cfg);
        p.b_fc = vec![0.5, -0.25];
        let stack = SubbandStack::from_slices(1, 4, vec![vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let cache = forward_eval(&p, &stack).unwrap();
        assert_eq!(cache.z1, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(cache.z2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(cache.z3, vec![3.0, 7.0]);
        assert_eq!(cache.z4, vec![10.0]);
        assert_eq!(cache.logits, vec![10.5, 9.75]);
    }

    #[test]
    fn zero_network_is_uniform() {
        let cfg = NetworkConfig::new(2, 30, 2, 4).unwrap();
        let p = Parameters::zeros(cfg);
        let stack = SubbandStack::from_slices(2, 30, vec![vec![1.0; 60], vec![-2.0; 60]]).unwrap();
        let cache = forward_eval(&p, &stack).unwrap();
        assert!(cache.softmax.iter().all(|s| (s - 0.25).abs() < 1e-15));
        assert_eq!(predict(&p, &stack).unwrap(), 0);
        assert!((loss(&cache, 2, &p, 0.0).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn regularized_loss_at_uniform_point() {
        let cfg = NetworkConfig::new(2, 30, 3, 40).unwrap();
        let mut p = Parameters::zeros(cfg);
        p.w1.fill(1.0);
        let stack = SubbandStack::from_slices(2, 30, vec![vec![0.3; 60]; 3]).unwrap();
        let cache = forward_eval(&p, &stack).unwrap();
        let l = loss(&cache, 7, &p, 0.001).unwrap();
        assert!((l - (40f64.ln() + 0.003)).abs() < 1e-12);
        assert!((l - 3.6919).abs() < 5e-5);
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let cfg = micro_config();
        let mut p = Parameters::zeros(cfg);
        p.b_fc = vec![0.0, 1e4];
        let stack = SubbandStack::from_slices(1, 4, vec![vec![0.0; 4]]).unwrap();
        let cache = forward_eval(&p, &stack).unwrap();
        assert_eq!(loss(&cache, 1, &p, 0.0).unwrap(), 0.0);
        assert!(loss(&cache, 0, &p, 0.0).unwrap() <= -LOG_FLOOR.ln());
    }

    #[test]
    fn shape_chain() {
        for n in [20, 21, 50, 100, 101, 250] {
            let cfg = NetworkConfig::new(3, n, 2, 5).unwrap();
            assert_eq!(cfg.len3(), (n - 2) / 2 + 1);
            assert_eq!(cfg.len4(), cfg.len3() - 9);
        }
        assert_eq!(NetworkConfig::new(9, 100, 3, 40).unwrap().fc_inputs(), 4920);
        assert!(NetworkConfig::new(3, 12, 2, 3).is_err());
    }

    #[test]
    fn init_is_deterministic_with_unit_first_layer() {
        let cfg = NetworkConfig::new(64, 100, 3, 40).unwrap();
        let a = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let b = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert!(a.w1.iter().all(|&w| w == 1.0));
        let n = a.w2.len() as f64;
        let mean = a.w2.iter().sum::<f64>() / n;
        let var = a.w2.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(a.w2.len() >= 7000);
        assert!((0.008..=0.012).contains(&var), "variance {var}");
    }

    #[test]
    fn dropout_determinism() {
        let cfg = NetworkConfig::new(2, 30, 1, 3).unwrap();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1));
        let stack =
            SubbandStack::from_slices(2, 30, vec![(0..60).map(|v| v as f64 * 0.1).collect()]).unwrap();
        let spec = DropoutSpec::new(0.5, 0.5, 0.5).unwrap();
        let a = forward(&p, &stack, &spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = forward(&p, &stack, &spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let c = forward(&p, &stack, &spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.mask2, b.mask2);
        assert_eq!(a.logits, b.logits);
        assert_ne!(a.mask2, c.mask2);
        let e1 = forward(
            &p,
            &stack,
            &DropoutSpec::DISABLED,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        let e2 = forward_eval(&p, &stack).unwrap();
        assert_eq!(e1.logits, e2.logits);
        assert!(e1.mask2.is_none());
    }

    #[test]
    fn uniform_point_logit_gradient() {
        let cfg = micro_config();
        let p = Parameters::zeros(cfg);
        let stack = SubbandStack::from_slices(1, 4, vec![vec![1.0; 4]]).unwrap();
        let cache = forward_eval(&p, &stack).unwrap();
        let g = backward(&cache, 1, &p, 0.0).unwrap();
        assert_eq!(g.b_fc, vec![0.5, -0.5]);
    }

    #[test]
    fn regularizer_gradient_is_two_lambda_w() {
        let cfg = NetworkConfig::new(2, 24, 1, 2).unwrap();
        let p = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let stack = SubbandStack::from_slices(2, 24, vec![vec![0.0; 48]]).unwrap();
        let cache = forward_eval(&p, &stack).unwrap();
        let g0 = backward(&cache, 0, &p, 0.0).unwrap();
        let g1 = backward(&cache, 0, &p, 0.01).unwrap();
        for ((a, b), w) in g0.iter().zip(g1.iter()).zip(p.iter()) {
            assert!((b - a - 0.02 * w).abs() < 1e-15);
        }
    }

    #[test]
    fn mismatched_cache_rejected() {
        let p = Parameters::zeros(micro_config());
        let other = Parameters::zeros(NetworkConfig::new(1, 24, 1, 2).unwrap());
        let stack = SubbandStack::from_slices(1, 4, vec![vec![1.0; 4]]).unwrap();
        let cache = forward_eval(&p, &stack).unwrap();
        assert!(backward(&cache, 0, &other, 0.0).is_err());
        let wrong = SubbandStack::from_slices(1, 5, vec![vec![1.0; 5]]).unwrap();
        assert!(forward_eval(&p, &wrong).is_err());
    }
}
