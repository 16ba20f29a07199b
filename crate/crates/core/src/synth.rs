//! Synthetic rPPG recordings and parameterized domain shifts.
//!
//! A stream is a `frames x regions x channels` array of raw color
//! intensities. Every region carries the same blood-volume pulse, driven by a
//! shared heart-rate trace, with its own baseline, amplitude, and phase:
//!
//! ```text
//! trace[t, h, c] = baseline[h, c]
//!                + amplitude[h, c] * sin(2 pi * cycles(t) + phase[h])
//!                + noise
//! cycles(t)      = sum_{s < t} hr[s] / 60 / fps
//! ```
//!
//! The heart-rate trace is a Gaussian random walk reflected into the
//! physiological band [40, 250] bpm. Stored values are rounded to `f32`
//! precision so that in-memory streams and stream files agree bit for bit.

use std::f64::consts::TAU;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::framing;
use crate::tensor::Tensor;

pub const STREAM_FORMAT: &str = "bitta-stream/1";
pub const HR_MIN: f64 = 40.0;
pub const HR_MAX: f64 = 250.0;

// Independent RNG streams derived from one seed.
const RNG_HR: u64 = 1;
const RNG_REGIONS: u64 = 2;
const RNG_NOISE: u64 = 3;
const RNG_JITTER: u64 = 11;
const RNG_SPIKES: u64 = 12;
const RNG_SHIFT_NOISE: u64 = 13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamParams {
    pub fps: f64,
    pub duration_frames: usize,
    pub regions: usize,
    pub channels: usize,
    /// Heart rate at frame 0, bpm.
    pub hr_start: f64,
    /// Random-walk step standard deviation, bpm per frame. Zero gives a
    /// constant heart rate.
    pub hr_step_sigma: f64,
    /// Mean raw intensity per channel.
    pub baseline: Vec<f64>,
    /// Pulse amplitude per channel before per-region heterogeneity.
    pub amplitude: Vec<f64>,
    /// Per-region amplitudes are scaled by a factor drawn from
    /// `[1 - spread, 1 + spread]`.
    pub amplitude_spread: f64,
    /// Per-region pulse phase offsets are drawn from `[-spread, spread]` rad.
    pub phase_spread: f64,
    /// Sensor noise standard deviation in raw units.
    pub noise_sigma: f64,
}

impl Default for StreamParams {
    fn default() -> Self {
        StreamParams {
            fps: 30.0,
            duration_frames: 900,
            regions: 25,
            channels: 3,
            hr_start: 75.0,
            hr_step_sigma: 0.2,
            baseline: vec![150.0, 110.0, 90.0],
            amplitude: vec![0.4, 1.0, 0.6],
            amplitude_spread: 0.3,
            phase_spread: 0.4,
            noise_sigma: 0.0,
        }
    }
}

impl StreamParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad(format!("fps must be positive, got {}", self.fps));
        }
        if self.duration_frames == 0 || self.regions == 0 || self.channels == 0 {
            return bad("duration_frames, regions and channels must be at least 1".into());
        }
        if !(HR_MIN..=HR_MAX).contains(&self.hr_start) {
            return bad(format!(
                "hr_start {} outside [{HR_MIN}, {HR_MAX}]",
                self.hr_start
            ));
        }
        if self.baseline.len() != self.channels || self.amplitude.len() != self.channels {
            return bad(format!(
                "baseline and amplitude need {} entries, got {} and {}",
                self.channels,
                self.baseline.len(),
                self.amplitude.len()
            ));
        }
        let non_negative = [
            ("hr_step_sigma", self.hr_step_sigma),
            ("amplitude_spread", self.amplitude_spread),
            ("phase_spread", self.phase_spread),
            ("noise_sigma", self.noise_sigma),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.amplitude_spread > 1.0 {
            return bad("amplitude_spread must not exceed 1".into());
        }
        if self
            .baseline
            .iter()
            .chain(&self.amplitude)
            .any(|v| !v.is_finite())
        {
            return bad("baseline and amplitude must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IlluminationDrift {
    pub amplitude: f64,
    pub frequency_hz: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MotionArtifact {
    /// Chance that a frame carries a spike.
    pub probability: f64,
    /// Fraction of regions a spike touches.
    pub region_fraction: f64,
    pub amplitude: f64,
}

/// Parameterized corruption of a stream. Empty `gain`/`offset` vectors mean
/// "no change" for every channel.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainShift {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
    pub noise_sigma: f64,
    pub illumination_drift: IlluminationDrift,
    pub motion_artifact: MotionArtifact,
    /// Standard deviation of a per-region time offset, in frames.
    pub phase_jitter_sigma: f64,
}

impl DomainShift {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn is_identity(&self) -> bool {
        self.gain.iter().all(|&g| g == 1.0)
            && self.offset.iter().all(|&o| o == 0.0)
            && self.noise_sigma == 0.0
            && self.illumination_drift.amplitude == 0.0
            && (self.motion_artifact.probability == 0.0
                || self.motion_artifact.amplitude == 0.0
                || self.motion_artifact.region_fraction == 0.0)
            && self.phase_jitter_sigma == 0.0
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParams(msg));
        for (name, v) in [("gain", &self.gain), ("offset", &self.offset)] {
            if !v.is_empty() && v.len() != channels {
                return bad(format!("{name} needs {channels} entries, got {}", v.len()));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return bad(format!("{name} must be finite"));
            }
        }
        let non_negative = [
            ("noise_sigma", self.noise_sigma),
            (
                "illumination_drift.amplitude",
                self.illumination_drift.amplitude,
            ),
            (
                "illumination_drift.frequency_hz",
                self.illumination_drift.frequency_hz,
            ),
            (
                "motion_artifact.probability",
                self.motion_artifact.probability,
            ),
            (
                "motion_artifact.region_fraction",
                self.motion_artifact.region_fraction,
            ),
            ("motion_artifact.amplitude", self.motion_artifact.amplitude),
            ("phase_jitter_sigma", self.phase_jitter_sigma),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.motion_artifact.probability > 1.0 || self.motion_artifact.region_fraction > 1.0 {
            return bad("probabilities and fractions must not exceed 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppliedShift {
    pub shift: DomainShift,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamManifest {
    pub format: String,
    pub seed: u64,
    pub fps: f64,
    pub duration_frames: usize,
    pub regions: usize,
    pub channels: usize,
    pub params: StreamParams,
    /// Shifts applied after generation, oldest first. Empty means identity.
    pub shifts: Vec<AppliedShift>,
    pub hr_trace: Vec<f64>,
}

impl StreamManifest {
    pub fn validate(&self) -> Result<()> {
        if self.hr_trace.len() != self.duration_frames {
            return Err(Error::InvalidParams(format!(
                "hr_trace has {} entries for {} frames",
                self.hr_trace.len(),
                self.duration_frames
            )));
        }
        if let Some(bad) = self
            .hr_trace
            .iter()
            .find(|v| !(HR_MIN..=HR_MAX).contains(*v))
        {
            return Err(Error::InvalidParams(format!(
                "heart rate {bad} outside [40, 250]"
            )));
        }
        Ok(())
    }
}

/// Raw traces, shape `[frames, regions, channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamData {
    pub traces: Tensor,
}

impl StreamData {
    pub fn frames(&self) -> usize {
        self.traces.shape()[0]
    }

    pub fn regions(&self) -> usize {
        self.traces.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.traces.shape()[2]
    }

    pub fn at(&self, t: usize, h: usize, c: usize) -> f64 {
        let (r, ch) = (self.regions(), self.channels());
        self.traces.data()[(t * r + h) * ch + c]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub manifest: StreamManifest,
    pub data: StreamData,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

fn reflect(mut hr: f64) -> f64 {
    // A step never exceeds the band width in practice; loop for safety.
    while !(HR_MIN..=HR_MAX).contains(&hr) {
        hr = if hr < HR_MIN {
            2.0 * HR_MIN - hr
        } else {
            2.0 * HR_MAX - hr
        };
    }
    hr
}

/// Heart-rate random walk reflected into [40, 250] bpm.
pub fn hr_random_walk(start: f64, step_sigma: f64, frames: usize, rng: &mut impl Rng) -> Vec<f64> {
    let step = Normal::new(0.0, step_sigma).expect("validated sigma");
    let mut hr = start;
    let mut trace = Vec::with_capacity(frames);
    for _ in 0..frames {
        trace.push(hr);
        if step_sigma > 0.0 {
            hr = reflect(hr + step.sample(rng));
        }
    }
    trace
}

pub fn generate_stream(params: &StreamParams, seed: u64) -> Result<Stream> {
    params.validate()?;
    let (frames, regions, channels) = (params.duration_frames, params.regions, params.channels);
    let hr_trace = hr_random_walk(
        params.hr_start,
        params.hr_step_sigma,
        frames,
        &mut rng_for(seed, RNG_HR),
    );

    let mut region_rng = rng_for(seed, RNG_REGIONS);
    let phase: Vec<f64> = (0..regions)
        .map(|_| region_rng.random_range(-1.0..=1.0) * params.phase_spread)
        .collect();
    let amplitude: Vec<f64> = (0..regions * channels)
        .map(|i| {
            let factor = 1.0 + region_rng.random_range(-1.0..=1.0) * params.amplitude_spread;
            params.amplitude[i % channels] * factor
        })
        .collect();
    let baseline: Vec<f64> = (0..regions * channels)
        .map(|i| params.baseline[i % channels] * (1.0 + region_rng.random_range(-0.05..=0.05)))
        .collect();

    let noise = Normal::new(0.0, params.noise_sigma).expect("validated sigma");
    let mut noise_rng = rng_for(seed, RNG_NOISE);
    let mut data = Vec::with_capacity(frames * regions * channels);
    let mut cycles = 0.0;
    for &hr in &hr_trace {
        for (h, &ph) in phase.iter().enumerate().take(regions) {
            let pulse = (TAU * cycles + ph).sin();
            for c in 0..channels {
                let i = h * channels + c;
                let mut v = baseline[i] + amplitude[i] * pulse;
                if params.noise_sigma > 0.0 {
                    v += noise.sample(&mut noise_rng);
                }
                data.push(quantize(v));
            }
        }
        cycles += hr / 60.0 / params.fps;
    }

    let manifest = StreamManifest {
        format: STREAM_FORMAT.to_string(),
        seed,
        fps: params.fps,
        duration_frames: frames,
        regions,
        channels,
        params: params.clone(),
        shifts: Vec::new(),
        hr_trace,
    };
    let traces = Tensor::new(vec![frames, regions, channels], data)?;
    Ok(Stream {
        manifest,
        data: StreamData { traces },
    })
}

/// Applies `shift` in the order: per-region time jitter, gain, offset,
/// illumination drift, motion spikes, additive noise.
pub fn apply_domain_shift(
    data: &StreamData,
    shift: &DomainShift,
    fps: f64,
    seed: u64,
) -> Result<StreamData> {
    shift.validate(data.channels())?;
    if shift.is_identity() {
        return Ok(data.clone());
    }
    let (frames, regions, channels) = (data.frames(), data.regions(), data.channels());
    let idx = |t: usize, h: usize, c: usize| (t * regions + h) * channels + c;
    let mut out = data.traces.data().to_vec();

    if shift.phase_jitter_sigma > 0.0 {
        let jitter = Normal::new(0.0, shift.phase_jitter_sigma).expect("validated sigma");
        let mut rng = rng_for(seed, RNG_JITTER);
        let src = out.clone();
        for h in 0..regions {
            let delay: f64 = jitter.sample(&mut rng);
            for t in 0..frames {
                let pos = (t as f64 + delay).clamp(0.0, (frames - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(frames - 1);
                let f = pos - lo as f64;
                for c in 0..channels {
                    out[idx(t, h, c)] = (1.0 - f) * src[idx(lo, h, c)] + f * src[idx(hi, h, c)];
                }
            }
        }
    }

    for (c, &g) in shift.gain.iter().enumerate() {
        if g != 1.0 {
            for t in 0..frames {
                for h in 0..regions {
                    out[idx(t, h, c)] *= g;
                }
            }
        }
    }
    for (c, &o) in shift.offset.iter().enumerate() {
        if o != 0.0 {
            for t in 0..frames {
                for h in 0..regions {
                    out[idx(t, h, c)] += o;
                }
            }
        }
    }

    let drift = shift.illumination_drift;
    if drift.amplitude > 0.0 {
        for t in 0..frames {
            let d = drift.amplitude * (TAU * drift.frequency_hz * t as f64 / fps).sin();
            out[t * regions * channels..(t + 1) * regions * channels]
                .iter_mut()
                .for_each(|v| *v += d);
        }
    }

    let motion = shift.motion_artifact;
    if motion.probability > 0.0 && motion.amplitude > 0.0 && motion.region_fraction > 0.0 {
        let mut rng = rng_for(seed, RNG_SPIKES);
        for t in 0..frames {
            if !rng.random_bool(motion.probability) {
                continue;
            }
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            for h in 0..regions {
                if rng.random_bool(motion.region_fraction) {
                    for c in 0..channels {
                        out[idx(t, h, c)] += sign * motion.amplitude;
                    }
                }
            }
        }
    }

    if shift.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, shift.noise_sigma).expect("validated sigma");
        let mut rng = rng_for(seed, RNG_SHIFT_NOISE);
        out.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }

    out.iter_mut().for_each(|v| *v = quantize(*v));
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("shifted stream"));
    }
    Ok(StreamData {
        traces: Tensor::new(data.traces.shape().to_vec(), out)?,
    })
}

impl Stream {
    /// Shifted copy of this stream with the shift recorded in the manifest.
    pub fn shifted(&self, shift: &DomainShift, seed: u64) -> Result<Stream> {
        let data = apply_domain_shift(&self.data, shift, self.manifest.fps, seed)?;
        let mut manifest = self.manifest.clone();
        if !shift.is_identity() {
            manifest.shifts.push(AppliedShift {
                shift: shift.clone(),
                seed,
            });
        }
        Ok(Stream { manifest, data })
    }
}

pub fn write_stream(path: &Path, stream: &Stream) -> Result<()> {
    let m = &stream.manifest;
    let expected = [m.duration_frames, m.regions, m.channels];
    if stream.data.traces.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "write_stream",
            lhs: expected.to_vec(),
            rhs: stream.data.traces.shape().to_vec(),
        });
    }
    framing::write(path, m, &framing::encode_f32(stream.data.traces.data()))
}

pub fn read_stream(path: &Path) -> Result<Stream> {
    let (manifest, payload): (StreamManifest, _) = framing::read(path, STREAM_FORMAT)?;
    manifest.validate()?;
    let shape = vec![
        manifest.duration_frames,
        manifest.regions,
        manifest.channels,
    ];
    let expected = shape.iter().product::<usize>() * 4;
    if payload.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            found: payload.len(),
        });
    }
    let traces = Tensor::new(shape, framing::decode_f32(&payload))?;
    Ok(Stream {
        manifest,
        data: StreamData { traces },
    })
}
