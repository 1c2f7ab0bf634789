//! Browser bindings for the demo page in `www/`: filter-bank responses,
//! stimulus distance matrices and ITR curves. Matrices cross the boundary
//! flattened row-major as `Float64Array`.

use ssvep_core::analysis::{self, StimulusLayout};
use ssvep_core::evaluation;
use ssvep_core::filterbank::FilterBankSpec;
use wasm_bindgen::prelude::*;

fn js(e: ssvep_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Magnitude responses in dB, one row of `n_points` per sub-band, sampled
/// evenly on `[0, fs/2)`.
pub fn subband_responses_db(
    n_subbands: usize,
    base_freq_hz: f64,
    fs: f64,
    n_points: usize,
) -> ssvep_core::Result<Vec<f64>> {
    let filters = FilterBankSpec::new(n_subbands, base_freq_hz).design(fs)?;
    let mut out = Vec::with_capacity(n_subbands * n_points);
    for f in &filters {
        for i in 0..n_points {
            let hz = 0.5 * fs * i as f64 / n_points as f64;
            out.push(20.0 * f.magnitude(hz, fs).max(1e-12).log10());
        }
    }
    Ok(out)
}

pub fn speller_distances(duration_s: f64) -> ssvep_core::Result<Vec<f64>> {
    let layout = StimulusLayout::speller40(duration_s);
    let m = analysis::sinusoid_distance_matrix(&layout)?;
    Ok(m.into_iter().flatten().collect())
}

/// `[gap_0, mean_0, gap_1, mean_1, ...]` for the 40-target layout.
pub fn speller_distance_by_gap(duration_s: f64) -> ssvep_core::Result<Vec<f64>> {
    let layout = StimulusLayout::speller40(duration_s);
    let m = analysis::sinusoid_distance_matrix(&layout)?;
    Ok(analysis::distance_by_gap(&layout, &m, 0.2)
        .into_iter()
        .flat_map(|(g, d)| [g, d])
        .collect())
}

/// ITR at accuracy `p` for `n_points` durations spread over `[t_min, t_max]`,
/// each charged an extra `gaze_shift_s`.
pub fn itr_over_durations(
    p: f64,
    n_classes: usize,
    gaze_shift_s: f64,
    t_min: f64,
    t_max: f64,
    n_points: usize,
) -> ssvep_core::Result<Vec<f64>> {
    let step = if n_points > 1 {
        (t_max - t_min) / (n_points - 1) as f64
    } else {
        0.0
    };
    (0..n_points)
        .map(|i| evaluation::itr_bits_per_min(p, n_classes, t_min + step * i as f64 + gaze_shift_s))
        .collect()
}

#[wasm_bindgen(js_name = subbandResponses)]
pub fn subband_responses(
    n_subbands: usize,
    base_freq_hz: f64,
    fs: f64,
    n_points: usize,
) -> Result<Vec<f64>, JsError> {
    subband_responses_db(n_subbands, base_freq_hz, fs, n_points).map_err(js)
}

#[wasm_bindgen(js_name = distanceMatrix)]
pub fn distance_matrix(duration_s: f64) -> Result<Vec<f64>, JsError> {
    speller_distances(duration_s).map_err(js)
}

#[wasm_bindgen(js_name = distanceByGap)]
pub fn distance_by_gap(duration_s: f64) -> Result<Vec<f64>, JsError> {
    speller_distance_by_gap(duration_s).map_err(js)
}

#[wasm_bindgen(js_name = itrCurve)]
pub fn itr_curve(
    p: f64,
    n_classes: usize,
    gaze_shift_s: f64,
    t_min: f64,
    t_max: f64,
    n_points: usize,
) -> Result<Vec<f64>, JsError> {
    itr_over_durations(p, n_classes, gaze_shift_s, t_min, t_max, n_points).map_err(js)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn responses_have_one_row_per_subband() {
        let r = subband_responses_db(3, 8.0, 250.0, 125).unwrap();
        assert_eq!(r.len(), 3 * 125);
        // 40 Hz (index 40) sits inside every band, within the 1 dB ripple
        for row in r.chunks(125) {
            assert!(row[40] > -1.0 - 1e-9 && row[40] <= 1e-9, "{}", row[40]);
            assert!(row[0] < -100.0);
        }
        assert!(subband_responses_db(3, 8.0, 150.0, 10).is_err());
    }

    #[test]
    fn distances_are_square() {
        let d = speller_distances(0.4).unwrap();
        assert_eq!(d.len(), 1600);
        assert_eq!(d[0], 0.0);
        assert_eq!(d[1], d[40]);
        assert!(speller_distances(0.41).is_err());
        let g = speller_distance_by_gap(0.4).unwrap();
        assert!((g[0] - 0.2).abs() < 1e-12);
        assert_eq!(g.len(), 2 * 39);
    }

    #[test]
    fn itr_curve_falls_with_duration() {
        let c = itr_over_durations(0.9, 40, 0.5, 0.2, 1.0, 9).unwrap();
        assert_eq!(c.len(), 9);
        assert!(c.windows(2).all(|w| w[0] > w[1]));
        assert!(itr_over_durations(1.5, 40, 0.5, 0.2, 1.0, 3).is_err());
    }
}
