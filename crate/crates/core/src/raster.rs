//! Grayscale rasters and the image distortions used to produce noisy rollouts.
//!
//! Intensities live in `[0, 1]`; every operation clamps its output.

use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Number of forward-diffusion steps in the Gaussian noise process.
pub const DIFFUSION_STEPS: usize = 1000;
const BETA_START: f64 = 1e-4;
const BETA_END: f64 = 0.02;

/// Degrees of rotation per unit of distortion strength (500 -> 45 deg).
pub const ROTATION_DEGREES_PER_UNIT: f64 = 0.09;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
}

impl Raster {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    /// Build a raster from row-major pixels. Values are clamped to `[0, 1]`.
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Validation(format!(
                "raster {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| p.is_nan()) {
            return Err(Error::Validation("raster contains NaN".into()));
        }
        Ok(Self {
            width,
            height,
            pixels: pixels.into_iter().map(clamp01).collect(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.pixels[y * self.width + x] = clamp01(v);
    }

    pub fn total_intensity(&self) -> f64 {
        self.pixels.iter().sum()
    }

    /// Encode as binary PGM (P5, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|p| (p * 255.0).round() as u8));
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    /// Decode a binary PGM with maxval 255.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        // Header: magic, width, height, maxval separated by whitespace, then one
        // whitespace byte before the payload.
        let mut fields = Vec::with_capacity(4);
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PGM header".into()));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_string());
        }
        pos += 1;
        if fields[0] != "P5" || fields[3] != "255" {
            return Err(Error::Format("expected P5 PGM with maxval 255".into()));
        }
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PGM dimension {s:?}")))
        };
        let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
        let payload = bytes
            .get(pos..pos + w * h)
            .ok_or_else(|| Error::Format("truncated PGM payload".into()))?;
        Raster::from_pixels(w, h, payload.iter().map(|&b| f64::from(b) / 255.0).collect())
    }
}

#[inline]
fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// Peak signal-to-noise ratio in dB with peak 1.0. Identical rasters give `+inf`.
pub fn psnr(reference: &Raster, other: &Raster) -> Result<f64> {
    if reference.width != other.width || reference.height != other.height {
        return Err(Error::Validation("psnr needs equal raster dimensions".into()));
    }
    let mse = reference
        .pixels
        .iter()
        .zip(&other.pixels)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.pixels.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistortionKind {
    #[serde(rename = "gaussian", alias = "gaussian_steps")]
    GaussianSteps,
    #[serde(rename = "rotate", alias = "rotate_expand")]
    RotateExpand,
    /// Rotation that keeps the original canvas and clips the corners.
    #[serde(alias = "rotate_crop")]
    RotateCrop,
    /// Central crop resized back to full size.
    #[serde(alias = "center_crop")]
    CenterCrop,
}

impl DistortionKind {
    /// Destructive kinds that the trainer refuses without an override.
    pub fn is_diagnostic(self) -> bool {
        matches!(self, DistortionKind::RotateCrop | DistortionKind::CenterCrop)
    }

    pub fn name(self) -> &'static str {
        match self {
            DistortionKind::GaussianSteps => "gaussian",
            DistortionKind::RotateExpand => "rotate",
            DistortionKind::RotateCrop => "rotate-crop",
            DistortionKind::CenterCrop => "center-crop",
        }
    }
}

impl std::str::FromStr for DistortionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "gaussian_steps" | "gaussiansteps" => Ok(DistortionKind::GaussianSteps),
            "rotate" | "rotate_expand" | "rotateexpand" => Ok(DistortionKind::RotateExpand),
            "rotate-crop" | "rotate_crop" | "rotatecrop" => Ok(DistortionKind::RotateCrop),
            "center-crop" | "center_crop" | "centercrop" => Ok(DistortionKind::CenterCrop),
            other => Err(Error::Config(format!("unknown distortion kind {other:?}"))),
        }
    }
}

/// Linear beta schedule, `beta_1 .. beta_1000`.
fn beta(k: usize) -> f64 {
    BETA_START + (BETA_END - BETA_START) * (k - 1) as f64 / (DIFFUSION_STEPS - 1) as f64
}

/// Cumulative signal retention `prod_{k<=steps} (1 - beta_k)`.
pub fn alpha_bar(steps: usize) -> f64 {
    (1..=steps.min(DIFFUSION_STEPS)).map(|k| 1.0 - beta(k)).product()
}

/// Forward diffusion `x_t = sqrt(abar) x_0 + sqrt(1 - abar) eps`, clamped.
pub fn gaussian_steps(input: &Raster, steps: usize, rng_seed: u64) -> Result<Raster> {
    if steps > DIFFUSION_STEPS {
        return Err(Error::Range(format!(
            "gaussian steps {steps} exceeds {DIFFUSION_STEPS}"
        )));
    }
    if steps == 0 {
        return Ok(input.clone());
    }
    let abar = alpha_bar(steps);
    let (signal, noise) = (abar.sqrt(), (1.0 - abar).sqrt());
    let mut rng = rng_from(rng_seed);
    let pixels = input
        .pixels
        .iter()
        .map(|&x| {
            let eps: f64 = StandardNormal.sample(&mut rng);
            clamp01(signal * x + noise * eps)
        })
        .collect();
    Ok(Raster {
        width: input.width,
        height: input.height,
        pixels,
    })
}

/// Zero-filled bilinear sample at continuous coordinates (pixel centers at
/// integer positions).
fn bilinear(img: &Raster, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let at = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= img.width as f64 || yi >= img.height as f64 {
            0.0
        } else {
            img.get(xi as usize, yi as usize)
        }
    };
    at(x0, y0) * (1.0 - fx) * (1.0 - fy)
        + at(x0 + 1.0, y0) * fx * (1.0 - fy)
        + at(x0, y0 + 1.0) * (1.0 - fx) * fy
        + at(x0 + 1.0, y0 + 1.0) * fx * fy
}

/// Sub-samples per output pixel side when rotating.
const ROTATE_SUPERSAMPLE: usize = 4;

/// Rotate counter-clockwise by `degrees` about the image center onto a canvas
/// of `out_w x out_h`. Each output pixel averages a 4x4 grid of bilinear
/// samples, which keeps thin strokes from aliasing away at oblique angles.
fn rotate_onto(input: &Raster, degrees: f64, out_w: usize, out_h: usize) -> Raster {
    let theta = degrees.to_radians();
    let (s, c) = theta.sin_cos();
    let (icx, icy) = (input.width as f64 / 2.0, input.height as f64 / 2.0);
    let (ocx, ocy) = (out_w as f64 / 2.0, out_h as f64 / 2.0);
    let k = ROTATE_SUPERSAMPLE;
    let offsets: Vec<f64> = (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect();
    let norm = 1.0 / (k * k) as f64;
    let mut out = Raster::zeros(out_w, out_h);
    for v in 0..out_h {
        for u in 0..out_w {
            let mut acc = 0.0;
            for &oy in &offsets {
                for &ox in &offsets {
                    let du = u as f64 + ox - ocx;
                    let dv = v as f64 + oy - ocy;
                    // Inverse of the forward map (dx, dy) -> (dx c + dy s, -dx s + dy c).
                    let sx = du * c - dv * s + icx - 0.5;
                    let sy = du * s + dv * c + icy - 0.5;
                    acc += bilinear(input, sx, sy);
                }
            }
            out.pixels[v * out_w + u] = clamp01(acc * norm);
        }
    }
    out
}

/// Resample to `width x height`, averaging a 4x4 grid of bilinear samples per
/// output pixel. Same-size input is returned unchanged.
pub fn resize(input: &Raster, width: usize, height: usize) -> Result<Raster> {
    if width == 0 || height == 0 {
        return Err(Error::Validation("resize target must be non-empty".into()));
    }
    if (width, height) == (input.width, input.height) {
        return Ok(input.clone());
    }
    let k = ROTATE_SUPERSAMPLE;
    let sx = input.width as f64 / width as f64;
    let sy = input.height as f64 / height as f64;
    let mut out = Raster::zeros(width, height);
    for v in 0..height {
        for u in 0..width {
            let mut acc = 0.0;
            for j in 0..k {
                for i in 0..k {
                    let x = (u as f64 + (i as f64 + 0.5) / k as f64) * sx - 0.5;
                    let y = (v as f64 + (j as f64 + 0.5) / k as f64) * sy - 0.5;
                    acc += bilinear(input, x, y);
                }
            }
            out.pixels[v * width + u] = clamp01(acc / (k * k) as f64);
        }
    }
    Ok(out)
}

/// Exact quarter-turn rotations, counter-clockwise.
fn rotate_quarter(input: &Raster, quarters: u32) -> Raster {
    let (w, h) = (input.width, input.height);
    match quarters % 4 {
        0 => input.clone(),
        1 => {
            let mut out = Raster::zeros(h, w);
            for y in 0..w {
                for x in 0..h {
                    out.pixels[y * h + x] = input.get(w - 1 - y, x);
                }
            }
            out
        }
        2 => {
            let mut out = Raster::zeros(w, h);
            for y in 0..h {
                for x in 0..w {
                    out.pixels[y * w + x] = input.get(w - 1 - x, h - 1 - y);
                }
            }
            out
        }
        _ => {
            let mut out = Raster::zeros(h, w);
            for y in 0..w {
                for x in 0..h {
                    out.pixels[y * h + x] = input.get(y, h - 1 - x);
                }
            }
            out
        }
    }
}

fn quarter_turns(degrees: f64) -> Option<u32> {
    let q = degrees / 90.0;
    (q == q.round()).then(|| q.round().rem_euclid(4.0) as u32)
}

/// Canvas size that holds a `w x h` rectangle rotated by `degrees`.
pub fn expanded_dims(w: usize, h: usize, degrees: f64) -> (usize, usize) {
    if let Some(q) = quarter_turns(degrees) {
        return if q % 2 == 0 { (w, h) } else { (h, w) };
    }
    let (s, c) = degrees.to_radians().sin_cos();
    let (s, c) = (s.abs(), c.abs());
    let bw = w as f64 * c + h as f64 * s;
    let bh = w as f64 * s + h as f64 * c;
    ((bw - 1e-9).ceil() as usize, (bh - 1e-9).ceil() as usize)
}

/// Rotate counter-clockwise, growing the canvas so no content is lost.
/// Background is 0.
pub fn rotate_expand(input: &Raster, degrees: f64) -> Result<Raster> {
    if !degrees.is_finite() {
        return Err(Error::Range(format!("rotation angle {degrees} not finite")));
    }
    if let Some(q) = quarter_turns(degrees) {
        return Ok(rotate_quarter(input, q));
    }
    let (ow, oh) = expanded_dims(input.width, input.height, degrees);
    Ok(rotate_onto(input, degrees, ow, oh))
}

/// Rotation on the original canvas; corners fall off.
pub fn rotate_crop(input: &Raster, degrees: f64) -> Result<Raster> {
    if !degrees.is_finite() {
        return Err(Error::Range(format!("rotation angle {degrees} not finite")));
    }
    if degrees == 0.0 {
        return Ok(input.clone());
    }
    Ok(rotate_onto(input, degrees, input.width, input.height))
}

/// Keep the central `fraction` of each side and resize it back to full size.
pub fn center_crop(input: &Raster, fraction: f64) -> Result<Raster> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Range(format!("crop fraction {fraction} not in (0, 1]")));
    }
    if fraction == 1.0 {
        return Ok(input.clone());
    }
    let (w, h) = (input.width as f64, input.height as f64);
    let (cw, ch) = (w * fraction, h * fraction);
    let (x0, y0) = ((w - cw) / 2.0, (h - ch) / 2.0);
    let mut out = Raster::zeros(input.width, input.height);
    for v in 0..input.height {
        for u in 0..input.width {
            let sx = x0 + (u as f64 + 0.5) * fraction - 0.5;
            let sy = y0 + (v as f64 + 0.5) * fraction - 0.5;
            out.pixels[v * input.width + u] = clamp01(bilinear(input, sx, sy));
        }
    }
    Ok(out)
}

/// Strength-parameterised distortion `T_alpha`.
///
/// * `GaussianSteps`: `round(strength)` diffusion steps, clamped to 1000.
/// * `RotateExpand` / `RotateCrop`: `strength * 0.09` degrees.
/// * `CenterCrop`: keeps `max(0.1, 1 - strength / 1000)` of each side.
///
/// Strength 0 is the identity for every kind.
pub fn apply_distortion(
    input: &Raster,
    kind: DistortionKind,
    strength: f64,
    rng_seed: u64,
) -> Result<Raster> {
    if !(strength >= 0.0) || !strength.is_finite() {
        return Err(Error::Range(format!(
            "distortion strength {strength} must be finite and >= 0"
        )));
    }
    if strength == 0.0 {
        return Ok(input.clone());
    }
    match kind {
        DistortionKind::GaussianSteps => {
            let steps = strength.round().min(DIFFUSION_STEPS as f64) as usize;
            gaussian_steps(input, steps, rng_seed)
        }
        DistortionKind::RotateExpand => {
            rotate_expand(input, strength * ROTATION_DEGREES_PER_UNIT)
        }
        DistortionKind::RotateCrop => rotate_crop(input, strength * ROTATION_DEGREES_PER_UNIT),
        DistortionKind::CenterCrop => center_crop(input, (1.0 - strength / 1000.0).max(0.1)),
    }
}
