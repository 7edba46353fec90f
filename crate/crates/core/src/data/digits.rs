//! Procedurally drawn digits under rotation, diagonal shift and contrast.

use std::path::PathBuf;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::rng::{standard_normal, stream, Generator, Stream};
use crate::schema::{CovariateColumn, CovariateSchema, MaskedTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DigitsVariant {
    /// Independent Gaussian covariates.
    Dataset1,
    /// Covariates driven by one shared latent draw.
    Dataset2,
    /// Covariates driven by a time stamp; `t` is a time column.
    Dataset3,
}

/// Mean and standard deviation of one covariate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normal {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RotatedDigitsConfig {
    pub variant: DigitsVariant,
    #[serde(default = "default_side")]
    pub side: usize,
    pub n_train: usize,
    pub n_validation: usize,
    pub n_test: usize,
    #[serde(default)]
    pub t_min: f64,
    #[serde(default = "default_t_max")]
    pub t_max: f64,
    #[serde(default)]
    pub seed: u64,
    /// Built-in digit to draw.
    #[serde(default = "default_digit")]
    pub digit: u8,
    /// Plain-text PGM (`P2`) image of exactly `side × side` pixels used
    /// instead of the built-in glyph.
    #[serde(default)]
    pub glyph: Option<PathBuf>,
    /// Rotation in radians (dataset 1).
    #[serde(default = "default_rotation")]
    pub rotation: Normal,
    /// Diagonal shift as a fraction of the half-width (dataset 1).
    #[serde(default = "default_shift")]
    pub shift: Normal,
    /// Multiplicative intensity (dataset 1).
    #[serde(default = "default_contrast")]
    pub contrast: Normal,
    /// Noise standard deviation of datasets 2 and 3, as a fraction of each
    /// covariate's range.
    #[serde(default = "default_noise_fraction")]
    pub noise_fraction: f64,
}

fn default_side() -> usize {
    12
}
fn default_t_max() -> f64 {
    1.0
}
fn default_digit() -> u8 {
    3
}
fn default_rotation() -> Normal {
    Normal { mean: 0.0, std: 0.5 }
}
fn default_shift() -> Normal {
    Normal { mean: 0.0, std: 0.15 }
}
fn default_contrast() -> Normal {
    Normal { mean: 1.0, std: 0.2 }
}
fn default_noise_fraction() -> f64 {
    0.15
}

/// Smallest contrast ever drawn; keeps images from inverting.
pub const MIN_CONTRAST: f64 = 0.05;

/// Half-ranges of the nonlinear maps used by datasets 2 and 3.
const ROTATION_HALF_RANGE: f64 = 0.8;
const SHIFT_HALF_RANGE: f64 = 0.2;
const CONTRAST_HALF_RANGE: f64 = 0.3;

impl RotatedDigitsConfig {
    pub fn new(variant: DigitsVariant, n_train: usize, n_validation: usize, n_test: usize) -> Self {
        Self {
            variant,
            side: default_side(),
            n_train,
            n_validation,
            n_test,
            t_min: 0.0,
            t_max: default_t_max(),
            seed: 0,
            digit: default_digit(),
            glyph: None,
            rotation: default_rotation(),
            shift: default_shift(),
            contrast: default_contrast(),
            noise_fraction: default_noise_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < 8 {
            return Err(Error::config("data.side", "must be >= 8"));
        }
        for (k, n) in [
            ("data.n_train", self.n_train),
            ("data.n_validation", self.n_validation),
            ("data.n_test", self.n_test),
        ] {
            if n == 0 {
                return Err(Error::config(k, "must be >= 1"));
            }
        }
        if self.digit > 9 {
            return Err(Error::config("data.digit", "must be 0-9"));
        }
        if !(self.t_max > self.t_min) {
            return Err(Error::config("data.t_max", "must exceed t_min"));
        }
        for (k, n) in [("data.rotation", self.rotation), ("data.shift", self.shift), ("data.contrast", self.contrast)] {
            if !(n.std >= 0.0 && n.mean.is_finite() && n.std.is_finite()) {
                return Err(Error::config(k, "needs a finite mean and non-negative std"));
            }
        }
        if !(self.noise_fraction >= 0.0) {
            return Err(Error::config("data.noise_fraction", "must be >= 0"));
        }
        Ok(())
    }

    pub fn schema(&self) -> CovariateSchema {
        let mut cols = vec![
            CovariateColumn::continuous("rotation"),
            CovariateColumn::continuous("shift"),
            CovariateColumn::continuous("contrast"),
        ];
        if self.variant == DigitsVariant::Dataset3 {
            cols.push(CovariateColumn::time("t"));
        }
        CovariateSchema { columns: cols }
    }
}

/// Stroke polylines of the built-in digits in `[-1, 1]²`, `y` up.
fn strokes(digit: u8) -> Vec<Vec<(f64, f64)>> {
    let ring = |cx: f64, cy: f64, rx: f64, ry: f64, a0: f64, a1: f64| -> Vec<(f64, f64)> {
        (0..=16)
            .map(|k| {
                let a = a0 + (a1 - a0) * k as f64 / 16.0;
                (cx + rx * a.cos(), cy + ry * a.sin())
            })
            .collect()
    };
    use std::f64::consts::PI;
    match digit {
        0 => vec![ring(0.0, 0.0, 0.45, 0.7, 0.0, 2.0 * PI)],
        1 => vec![vec![(-0.2, 0.5), (0.05, 0.7), (0.05, -0.7)], vec![(-0.25, -0.7), (0.35, -0.7)]],
        2 => vec![
            ring(0.0, 0.35, 0.4, 0.35, PI, -0.25 * PI),
            vec![(0.28, 0.1), (-0.45, -0.7), (0.45, -0.7)],
        ],
        3 => vec![ring(0.0, 0.35, 0.4, 0.35, 0.85 * PI, -0.5 * PI), ring(0.0, -0.35, 0.42, 0.35, 0.5 * PI, -0.85 * PI)],
        4 => vec![vec![(0.25, -0.7), (0.25, 0.7), (-0.45, -0.2), (0.45, -0.2)]],
        5 => vec![
            vec![(0.4, 0.7), (-0.35, 0.7), (-0.4, 0.05)],
            ring(0.0, -0.3, 0.42, 0.4, 0.75 * PI, -0.85 * PI),
        ],
        6 => vec![ring(0.0, -0.3, 0.4, 0.4, 0.0, 2.0 * PI), vec![(-0.4, -0.3), (-0.1, 0.4), (0.25, 0.7)]],
        7 => vec![vec![(-0.45, 0.7), (0.45, 0.7), (-0.1, -0.7)]],
        8 => vec![ring(0.0, 0.38, 0.33, 0.32, 0.0, 2.0 * PI), ring(0.0, -0.33, 0.42, 0.37, 0.0, 2.0 * PI)],
        _ => vec![ring(0.0, 0.3, 0.4, 0.4, 0.0, 2.0 * PI), vec![(0.4, 0.3), (0.1, -0.4), (-0.25, -0.7)]],
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Anti-aliased rendering of a built-in digit, row-major, values in `[0, 1]`.
pub fn builtin_glyph(digit: u8, side: usize) -> Tensor {
    let lines = strokes(digit);
    let half_width = 0.13;
    let pixel = 2.0 / side as f64;
    Tensor::from_fn(side, side, |r, c| {
        let p = ((c as f64 + 0.5) * pixel - 1.0, 1.0 - (r as f64 + 0.5) * pixel);
        let d = lines
            .iter()
            .flat_map(|l| l.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
            .fold(f64::INFINITY, f64::min);
        ((half_width - d) / pixel + 0.5).clamp(0.0, 1.0)
    })
}

/// Reads a plain PGM (`P2`) image scaled to `[0, 1]`.
pub fn read_pgm(path: &std::path::Path) -> Result<Tensor> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    let bad = |m: &str| Error::config("data.glyph", format!("{}: {m}", path.display()));
    if tokens.next() != Some("P2") {
        return Err(bad("not a plain PGM (P2) file"));
    }
    let mut num = || -> Result<usize> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("truncated or malformed"))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max == 0 {
        return Err(bad("maximum value is 0"));
    }
    let mut data = Vec::with_capacity(w * h);
    for _ in 0..w * h {
        data.push(num()? as f64 / max as f64);
    }
    Ok(Tensor::from_vec(h, w, data))
}

fn bilinear(img: &Tensor, row: f64, col: f64) -> f64 {
    let (r0, c0) = (row.floor(), col.floor());
    let (fr, fc) = (row - r0, col - c0);
    let at = |r: f64, c: f64| {
        if r < 0.0 || c < 0.0 || r >= img.rows() as f64 || c >= img.cols() as f64 {
            0.0
        } else {
            img.get(r as usize, c as usize)
        }
    };
    let top = if fc == 0.0 { at(r0, c0) } else { at(r0, c0) * (1.0 - fc) + at(r0, c0 + 1.0) * fc };
    if fr == 0.0 {
        return top;
    }
    let bottom = if fc == 0.0 { at(r0 + 1.0, c0) } else { at(r0 + 1.0, c0) * (1.0 - fc) + at(r0 + 1.0, c0 + 1.0) * fc };
    top * (1.0 - fr) + bottom * fr
}

/// Rotates `glyph` by `rotation` radians (counter-clockwise) about its
/// centre, shifts it by `shift` half-widths along the main diagonal (right
/// and up) and multiplies by `contrast`.
pub fn transform_glyph(glyph: &Tensor, rotation: f64, shift: f64, contrast: f64) -> Tensor {
    let side = glyph.rows();
    let half = side as f64 / 2.0;
    let sh = shift * half;
    let (s, c) = rotation.sin_cos();
    Tensor::from_fn(side, glyph.cols(), |r, col| {
        let u = col as f64 + 0.5 - half - sh;
        let v = half - (r as f64 + 0.5) - sh;
        let su = c * u + s * v;
        let sv = c * v - s * u;
        contrast * bilinear(glyph, half - 0.5 - sv, su + half - 0.5)
    })
}

fn draw_covariates(cfg: &RotatedDigitsConfig, rng: &mut Generator) -> Vec<f64> {
    let noise = |rng: &mut Generator, half_range: f64| cfg.noise_fraction * 2.0 * half_range * standard_normal(rng);
    match cfg.variant {
        DigitsVariant::Dataset1 => {
            let rot = cfg.rotation.mean + cfg.rotation.std * standard_normal(rng);
            let shift = cfg.shift.mean + cfg.shift.std * standard_normal(rng);
            let con = cfg.contrast.mean + cfg.contrast.std * standard_normal(rng);
            vec![rot, shift, con.max(MIN_CONTRAST)]
        }
        DigitsVariant::Dataset2 => {
            let u = standard_normal(rng);
            let rot = ROTATION_HALF_RANGE * (1.2 * u).tanh() + noise(rng, ROTATION_HALF_RANGE);
            let shift = SHIFT_HALF_RANGE * (1.3 * u).sin() + noise(rng, SHIFT_HALF_RANGE);
            let con = 1.0 + CONTRAST_HALF_RANGE * (2.0 * (-u * u).exp() - 1.0) + noise(rng, CONTRAST_HALF_RANGE);
            vec![rot, shift, con.max(MIN_CONTRAST)]
        }
        DigitsVariant::Dataset3 => {
            let t = rng.random_range(cfg.t_min..cfg.t_max);
            let a = (t - cfg.t_min) / (cfg.t_max - cfg.t_min);
            let tau = std::f64::consts::TAU;
            let rot = ROTATION_HALF_RANGE * (tau * a).sin() + noise(rng, ROTATION_HALF_RANGE);
            let shift = SHIFT_HALF_RANGE * (2.0 * a - 1.0).powi(3) + noise(rng, SHIFT_HALF_RANGE);
            let con = 1.0 + CONTRAST_HALF_RANGE * (std::f64::consts::PI * a).cos() + noise(rng, CONTRAST_HALF_RANGE);
            vec![rot, shift, con.max(MIN_CONTRAST), t]
        }
    }
}

fn pixel_names(side: usize) -> Vec<String> {
    (0..side * side).map(|k| format!("px_{}_{}", k / side, k % side)).collect()
}

/// Train, validation and test sets drawn from one seeded data stream.
/// Dataset 3 rows are ordered by `t` within each split.
pub fn generate_rotated_digits(cfg: &RotatedDigitsConfig) -> Result<(Dataset, Dataset, Dataset)> {
    cfg.validate()?;
    let glyph = match &cfg.glyph {
        Some(p) => {
            let g = read_pgm(p)?;
            if g.dims() != (cfg.side, cfg.side) {
                return Err(Error::config(
                    "data.glyph",
                    format!("image is {}x{}, expected {}x{}", g.cols(), g.rows(), cfg.side, cfg.side),
                ));
            }
            g
        }
        None => builtin_glyph(cfg.digit, cfg.side),
    };
    let schema = cfg.schema();
    let names = pixel_names(cfg.side);
    let mut rng = stream(cfg.seed, Stream::Data);
    let mut make = |n: usize| -> Result<Dataset> {
        let mut xs: Vec<Vec<f64>> = (0..n).map(|_| draw_covariates(cfg, &mut rng)).collect();
        if cfg.variant == DigitsVariant::Dataset3 {
            xs.sort_by(|a, b| a[3].total_cmp(&b[3]));
        }
        let d = cfg.side * cfg.side;
        let mut y = Vec::with_capacity(n * d);
        for x in &xs {
            y.extend_from_slice(transform_glyph(&glyph, x[0], x[1], x[2]).data());
        }
        let q = schema.len();
        let x = Tensor::from_vec(n, q, xs.into_iter().flatten().collect());
        Dataset::new(
            schema.clone(),
            names.clone(),
            MaskedTable::fully_observed(Tensor::from_vec(n, d, y)),
            MaskedTable::fully_observed(x),
        )
    };
    let train = make(cfg.n_train)?;
    let valid = make(cfg.n_validation)?;
    let test = make(cfg.n_test)?;
    Ok((train, valid, test))
}
