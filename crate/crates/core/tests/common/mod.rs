#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ssvep_core::filterbank::SubbandStack;
use ssvep_core::network::{self, DropoutSpec, NetworkConfig, Parameters};

/// Largest relative error between analytic and central-difference gradients,
/// `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    config: NetworkConfig,
    seed: u64,
    dropout: DropoutSpec,
    l2_lambda: f64,
    step: f64,
    floor: f64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = network::init_params(&config, &mut rng);
    // perturb layer 1 so it is not at the all-ones point
    for w in params.w1.iter_mut() {
        *w += rng.random_range(-0.5..0.5);
    }
    let slices = (0..config.n_subbands)
        .map(|_| {
            (0..config.n_channels * config.n_samples)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect();
    let stack = SubbandStack::from_slices(config.n_channels, config.n_samples, slices).unwrap();
    let label = rng.random_range(0..config.n_classes);
    let mask_seed = rng.random::<u64>();

    let eval = |p: &Parameters| -> f64 {
        let cache = network::forward(p, &stack, &dropout, &mut ChaCha8Rng::seed_from_u64(mask_seed)).unwrap();
        network::loss(&cache, label, p, l2_lambda).unwrap()
    };
    let cache = network::forward(
        &params,
        &stack,
        &dropout,
        &mut ChaCha8Rng::seed_from_u64(mask_seed),
    )
    .unwrap();
    let analytic = network::backward(&cache, label, &params, l2_lambda).unwrap();

    let mut worst: f64 = 0.0;
    for t in 0..6 {
        let len = params.tensors()[t].len();
        for i in 0..len {
            let mut plus = params.clone();
            plus.tensors_mut()[t][i] += step;
            let mut minus = params.clone();
            minus.tensors_mut()[t][i] -= step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
            let a = analytic.tensors()[t][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
        }
    }
    worst
}

use ssvep_core::analysis::{self, SynthSpec};
use ssvep_core::dataset::SsvepArchive;

pub const SYNTH_FREQS: [f64; 8] = [8.0, 9.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0];

/// Four-channel, four-block synthetic subject. With `reversed` the targets
/// are assigned the frequencies in reverse order, so two such subjects
/// disagree about which label each frequency carries.
pub fn synthetic_subject(id: &str, reversed: bool, noise_std: f64, seed: u64) -> SsvepArchive {
    let spec = SynthSpec {
        subject_id: id.into(),
        n_channels: 4,
        sampling_rate_hz: 250.0,
        trial_duration_s: 1.5,
        cue_duration_s: 0.5,
        visual_latency_s: 0.14,
        harmonic_amplitudes: vec![1.0, 0.6, 0.3],
        harmonic_phases: vec![0.0, 0.7, 1.4],
        noise_std,
        channel_mixing: vec![
            vec![1.0, 0.5, 0.2],
            vec![0.8, 0.7, 0.3],
            vec![0.5, 0.4, 0.6],
            vec![0.2, 0.3, 0.1],
        ],
        channel_names: ["POz", "O1", "Oz", "O2"].map(String::from).to_vec(),
        n_blocks: 4,
        seed,
    };
    let mut freqs = SYNTH_FREQS.to_vec();
    if reversed {
        freqs.reverse();
    }
    analysis::generate_synthetic(&spec, &freqs, &[0.0; 8]).unwrap()
}
