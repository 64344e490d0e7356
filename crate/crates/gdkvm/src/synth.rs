//! Synthetic echo-like sequences: a pulsating, drifting ellipse chamber
//! under multiplicative speckle, with exact interior masks, plus the
//! stochastic augmentation pipeline.
//!
//! Intensity model per pixel: dark chambers inside the ellipses, a smooth
//! tissue gradient outside, a soft rim transition, all multiplied by
//! mean-one gamma speckle (shape 4) mixed in at the configured strength.
//!
//! The scene holds two look-alike chambers: the target (whose exact
//! interior is the mask) and a smaller distractor that pulsates in
//! counter-phase and drifts the opposite way. Only the first-frame mask
//! says which chamber is which, so single-frame appearance cannot solve
//! the task; the distractor scales with the same amplitude/drift knobs
//! and vanishes into a static blob when both are zero.

use crate::element::Element;
use crate::metrics::MaskGrid;
use crate::rng::Rng;
use crate::tensor::{Tensor, Tensor32};
use std::f64::consts::PI;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum SynthError {
    BadSpec(String),
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::BadSpec(m) => write!(f, "bad synthetic spec: {m}"),
        }
    }
}

impl std::error::Error for SynthError {}

/// Generation parameters for one synthetic sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub frames: usize,
    pub resolution: usize,
    /// ellipse base semi-axes in pixels
    pub axis_a: f64,
    pub axis_b: f64,
    /// relative pulsation of both axes, < 1
    pub pulsation_amp: f64,
    /// pulsation period in frames
    pub pulsation_period: f64,
    /// speckle mixing strength in [0, 1]
    pub speckle: f64,
    /// center drift in pixels per frame (random direction per seed)
    pub drift: f64,
    pub seed: u64,
}

/// Chamber centers sit at +-resolution/5 along the diagonal; this is the
/// per-coordinate offset fraction.
const CENTER_OFFSET_FRAC: f64 = 0.2 * std::f64::consts::FRAC_1_SQRT_2;

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            frames: 10,
            resolution: 64,
            axis_a: 15.0,
            axis_b: 11.0,
            pulsation_amp: 0.3,
            pulsation_period: 10.0,
            speckle: 0.6,
            drift: 0.4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Defaults scaled to a given resolution.
    pub fn at_resolution(resolution: usize) -> Self {
        SyntheticSpec {
            resolution,
            axis_a: resolution as f64 * 0.20,
            axis_b: resolution as f64 * 0.14,
            ..SyntheticSpec::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.frames < 2 {
            return Err(SynthError::BadSpec("need at least 2 frames".into()));
        }
        if self.pulsation_amp >= 1.0 || self.pulsation_amp < 0.0 {
            return Err(SynthError::BadSpec("pulsation amplitude must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.speckle) {
            return Err(SynthError::BadSpec("speckle strength must be in [0, 1]".into()));
        }
        let max_axis = self.axis_a.max(self.axis_b) * (1.0 + self.pulsation_amp);
        let max_drift = self.drift * (self.frames as f64 - 1.0) / 2.0;
        let edge_margin = self.resolution as f64 * (0.5 - CENTER_OFFSET_FRAC) - 1.0;
        if max_axis + max_drift > edge_margin {
            return Err(SynthError::BadSpec(format!(
                "ellipse (max axis {max_axis:.1} + drift {max_drift:.1}) exceeds the frame \
                 margin {edge_margin:.1}"
            )));
        }
        Ok(())
    }
}

/// One generated sequence: frames are `H x W x 1` in [0, 1].
#[derive(Debug, Clone)]
pub struct VideoSample {
    pub frames: Vec<Tensor32>,
    pub masks: Vec<MaskGrid>,
}

impl VideoSample {
    pub fn resolution(&self) -> usize {
        self.frames[0].shape()[0]
    }

    /// Frames packed into a single `T x H x W x 1` tensor.
    pub fn stacked(&self) -> Tensor32 {
        let t = self.frames.len();
        let (h, w) = (self.resolution(), self.frames[0].shape()[1]);
        let mut data = Vec::with_capacity(t * h * w);
        for f in &self.frames {
            data.extend_from_slice(f.data());
        }
        Tensor::new(vec![t, h, w, 1], data).expect("stack shape")
    }

    /// Masks packed into `T x H x W` bytes.
    pub fn stacked_masks(&self) -> (Vec<u32>, Vec<u8>) {
        let t = self.masks.len();
        let (w, h) = (self.masks[0].width(), self.masks[0].height());
        let mut data = Vec::with_capacity(t * h * w);
        for m in &self.masks {
            data.extend_from_slice(&m.to_u8());
        }
        (vec![t as u32, h as u32, w as u32], data)
    }
}

fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Generate a sequence; deterministic in the spec's seed.
pub fn generate(spec: &SyntheticSpec) -> Result<VideoSample, SynthError> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let res = spec.resolution;
    let center = (res as f64 - 1.0) / 2.0;
    let drift_angle = rng.uniform(0.0, 2.0 * PI);
    let drift_dir = (drift_angle.cos(), drift_angle.sin());
    // target sits toward one corner, the distractor mirrored about the
    // center; counter-phase pulsation keeps their peaks apart
    let off_c = res as f64 * CENTER_OFFSET_FRAC;
    let target_base = (center - off_c, center - off_c);
    let distract_base = (center + off_c, center + off_c);
    const DISTRACT_SCALE: f64 = 0.7;

    let mut frames = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let phase = 2.0 * PI * t as f64 / spec.pulsation_period;
        let pulse = 1.0 + spec.pulsation_amp * phase.sin();
        let a = spec.axis_a * pulse;
        let b = spec.axis_b * pulse;
        let off = spec.drift * (t as f64 - (spec.frames as f64 - 1.0) / 2.0);
        let (cx, cy) = (
            target_base.0 + off * drift_dir.0,
            target_base.1 + off * drift_dir.1,
        );
        // distractor: counter-phase pulse, mirrored drift
        let d_pulse = 1.0 - spec.pulsation_amp * 0.8 * phase.sin();
        let da = spec.axis_a * DISTRACT_SCALE * d_pulse;
        let db = spec.axis_b * DISTRACT_SCALE * d_pulse;
        let (dx_c, dy_c) = (
            distract_base.0 - off * drift_dir.0,
            distract_base.1 - off * drift_dir.1,
        );

        let mask = MaskGrid::from_fn(res, res, |x, y| {
            let u = (x as f64 - cx) / a;
            let v = (y as f64 - cy) / b;
            u * u + v * v <= 1.0
        });

        let mut frame = Tensor32::zeros(vec![res, res, 1]);
        for y in 0..res {
            for x in 0..res {
                let u = (x as f64 - cx) / a;
                let v = (y as f64 - cy) / b;
                let rho_t = u * u + v * v;
                let ud = (x as f64 - dx_c) / da;
                let vd = (y as f64 - dy_c) / db;
                let rho_d = ud * ud + vd * vd;
                let rho = rho_t.min(rho_d);
                // dark chamber, soft rim, smooth tissue gradient outside
                let tissue = 0.55 + 0.25 * (x as f64 + y as f64) / (2.0 * res as f64);
                let base = 0.15 + (tissue - 0.15) * smoothstep((rho - 1.0) / 0.25);
                let grain = rng.gamma(4.0) / 4.0;
                let value = base * (1.0 - spec.speckle + spec.speckle * grain);
                frame.set3(y, x, 0, value.clamp(0.0, 1.0) as f32);
            }
        }
        frames.push(frame);
        masks.push(mask);
    }
    Ok(VideoSample { frames, masks })
}

/// Affine resample of a whole sequence about the frame center: rotation
/// by `theta` then zoom by `scale`. Frames are sampled bilinearly with
/// edge clamping; masks use nearest-neighbor so they stay binary.
pub fn affine(sample: &VideoSample, theta: f64, scale: f64) -> VideoSample {
    let res = sample.resolution();
    let c = (res as f64 - 1.0) / 2.0;
    let (sin_t, cos_t) = theta.sin_cos();
    // inverse map: rotate by -theta and shrink by 1/scale around center
    let src_of = |x: f64, y: f64| -> (f64, f64) {
        let dx = (x - c) / scale;
        let dy = (y - c) / scale;
        (c + dx * cos_t + dy * sin_t, c - dx * sin_t + dy * cos_t)
    };
    let frames = sample
        .frames
        .iter()
        .map(|f| {
            let mut out = Tensor32::zeros(vec![res, res, 1]);
            for y in 0..res {
                for x in 0..res {
                    let (sx, sy) = src_of(x as f64, y as f64);
                    out.set3(y, x, 0, bilinear_clamped(f, sx, sy));
                }
            }
            out
        })
        .collect();
    let masks = sample
        .masks
        .iter()
        .map(|m| {
            MaskGrid::from_fn(res, res, |x, y| {
                let (sx, sy) = src_of(x as f64, y as f64);
                let (ix, iy) = (sx.round() as isize, sy.round() as isize);
                if ix < 0 || iy < 0 || ix >= res as isize || iy >= res as isize {
                    false
                } else {
                    m.get(ix as usize, iy as usize)
                }
            })
        })
        .collect();
    VideoSample { frames, masks }
}

fn bilinear_clamped(f: &Tensor32, x: f64, y: f64) -> f32 {
    let res_y = f.shape()[0] as isize;
    let res_x = f.shape()[1] as isize;
    let sample = |ix: isize, iy: isize| -> f64 {
        let ix = ix.clamp(0, res_x - 1) as usize;
        let iy = iy.clamp(0, res_y - 1) as usize;
        f.at3(iy, ix, 0) as f64
    };
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let (ix, iy) = (x0 as isize, y0 as isize);
    let v = sample(ix, iy) * (1.0 - fx) * (1.0 - fy)
        + sample(ix + 1, iy) * fx * (1.0 - fy)
        + sample(ix, iy + 1) * (1.0 - fx) * fy
        + sample(ix + 1, iy + 1) * fx * fy;
    v as f32
}

/// The four stochastic augmentations, each applied with probability 0.5:
/// gamma correction, random zoom, random rotation, random contrast.
/// Geometric transforms hit frames and masks identically; intensity
/// transforms leave masks untouched.
pub fn augment(sample: &VideoSample, rng: &mut Rng) -> VideoSample {
    let apply_gamma = rng.bernoulli(0.5);
    let gamma = rng.uniform(0.7, 1.4);
    let apply_scale = rng.bernoulli(0.5);
    let scale = rng.uniform(0.85, 1.15);
    let apply_rot = rng.bernoulli(0.5);
    let theta = rng.uniform(-15.0, 15.0) * PI / 180.0;
    let apply_contrast = rng.bernoulli(0.5);
    let contrast = rng.uniform(0.7, 1.3);

    let mut out = sample.clone();
    if apply_gamma {
        for f in &mut out.frames {
            for v in f.data_mut() {
                *v = (*v as f64).max(0.0).powf(gamma) as f32;
            }
        }
    }
    if apply_scale || apply_rot {
        out = affine(
            &out,
            if apply_rot { theta } else { 0.0 },
            if apply_scale { scale } else { 1.0 },
        );
    }
    if apply_contrast {
        for f in &mut out.frames {
            for v in f.data_mut() {
                *v = (0.5 + contrast * (*v as f64 - 0.5)).clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Mask as an `H x W x 1` float tensor.
pub fn mask_to_tensor<E: Element>(mask: &MaskGrid) -> Tensor<E> {
    let (w, h) = (mask.width(), mask.height());
    Tensor::from_fn(vec![h, w, 1], |i| {
        let (y, x) = (i / w, i % w);
        if mask.get(x, y) {
            E::ONE
        } else {
            E::ZERO
        }
    })
}
