//! Normalized spatial-temporal map windows.

use rand::Rng;

use crate::error::{Error, Result};
use crate::synth::Stream;
use crate::tensor::{interp_taps, Tensor};

/// Normalized value used for rows whose raw segment is constant.
pub const FLAT_ROW_VALUE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowOrigin {
    /// Seed of the stream the window was cut from.
    pub stream: u64,
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StMapWindow {
    /// Shape `[W, H', C]`, every value in `[0, 1]`.
    pub values: Tensor,
    pub origin: WindowOrigin,
    /// Mean ground-truth heart rate over the window. Evaluation only.
    pub gt_hr: f64,
}

impl StMapWindow {
    pub fn temporal_len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn regions(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Min-max normalizes a sequence into `[0, 1]`.
pub fn normalize_row(raw: &[f64]) -> Vec<f64> {
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi <= lo {
        return vec![FLAT_ROW_VALUE; raw.len()];
    }
    let span = hi - lo;
    raw.iter()
        .map(|&v| ((v - lo) / span).clamp(0.0, 1.0))
        .collect()
}

/// Cuts frames `[start, start + len)`, min-max normalizes each
/// (region, channel) row over time, then linearly resamples the region axis
/// to `out_regions`.
pub fn build_window(
    stream: &Stream,
    start: usize,
    len: usize,
    out_regions: usize,
) -> Result<StMapWindow> {
    let data = &stream.data;
    let frames = data.frames();
    if len == 0 || out_regions == 0 || start + len > frames {
        return Err(Error::WindowOutOfRange {
            start: start as i64,
            end: (start + len) as i64,
            len: frames,
        });
    }
    let (regions, channels) = (data.regions(), data.channels());

    // normalized[h][c] is a length-`len` row.
    let mut normalized = vec![vec![Vec::new(); channels]; regions];
    let mut raw = vec![0.0; len];
    for (h, per_region) in normalized.iter_mut().enumerate() {
        for (c, row) in per_region.iter_mut().enumerate() {
            for (k, slot) in raw.iter_mut().enumerate() {
                *slot = data.at(start + k, h, c);
            }
            *row = normalize_row(&raw);
        }
    }

    let taps = interp_taps(regions, out_regions);
    let mut values = vec![0.0; len * out_regions * channels];
    for t in 0..len {
        for (j, &(lo, hi, f)) in taps.iter().enumerate() {
            for c in 0..channels {
                let v = (1.0 - f) * normalized[lo][c][t] + f * normalized[hi][c][t];
                values[(t * out_regions + j) * channels + c] = v.clamp(0.0, 1.0);
            }
        }
    }

    let hr = &stream.manifest.hr_trace[start..start + len];
    Ok(StMapWindow {
        values: Tensor::new(vec![len, out_regions, channels], values)?,
        origin: WindowOrigin {
            stream: stream.manifest.seed,
            start,
        },
        gt_hr: hr.iter().sum::<f64>() / len as f64,
    })
}

/// A window and its temporally shifted twin, used by the temporal prior.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub current: StMapWindow,
    pub shifted: StMapWindow,
    pub delta: usize,
}

/// Draws `delta` uniformly from `1..=delta_max` and builds the windows at
/// `start` and `start - delta`.
pub fn shifted_pair(
    stream: &Stream,
    start: usize,
    len: usize,
    out_regions: usize,
    delta_max: usize,
    rng: &mut impl Rng,
) -> Result<WindowPair> {
    if delta_max == 0 || start < delta_max {
        return Err(Error::WindowOutOfRange {
            start: start as i64 - delta_max as i64,
            end: (start + len) as i64,
            len: stream.data.frames(),
        });
    }
    let delta = rng.random_range(1..=delta_max);
    pair_with_delta(stream, start, len, out_regions, delta)
}

/// [`shifted_pair`] with an explicit shift; `delta = 0` yields two identical
/// windows.
pub fn pair_with_delta(
    stream: &Stream,
    start: usize,
    len: usize,
    out_regions: usize,
    delta: usize,
) -> Result<WindowPair> {
    if delta > start {
        return Err(Error::WindowOutOfRange {
            start: start as i64 - delta as i64,
            end: (start + len) as i64,
            len: stream.data.frames(),
        });
    }
    Ok(WindowPair {
        current: build_window(stream, start, len, out_regions)?,
        shifted: build_window(stream, start - delta, len, out_regions)?,
        delta,
    })
}
