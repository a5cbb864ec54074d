//! Velocity-driven anisotropic Gaussian splatting into multi-view heatmaps.
//!
//! Every joint becomes a 2-D Gaussian per view whose major axis follows the
//! joint's velocity: `s_x = s_base·(1 + α·tanh‖v‖)`, `s_y = s_base`,
//! `Σ = R·diag(s_x², s_y²)·Rᵀ`. Heatmaps are sampled at pixel centres in
//! normalized coordinates, so covariances never depend on the resolution.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KgsError, Result};
use crate::skeleton::KinematicSequence;

/// Velocities shorter than this are treated as zero when picking θ.
pub const MIN_DIRECTION_NORM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

/// An orthogonal projection plane given by an ordered pair of axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct View(pub Axis, pub Axis);

impl View {
    pub const XY: View = View(Axis::X, Axis::Y);
    pub const YZ: View = View(Axis::Y, Axis::Z);
    pub const ZX: View = View(Axis::Z, Axis::X);
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}{:?}", self.0, self.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Max,
    ClampedSum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub height: usize,
    pub width: usize,
    /// Velocity stretching coefficient.
    pub alpha: f64,
    /// `s_base = exp(log_scale)`.
    pub log_scale: f64,
    pub truncation_sigmas: f64,
    pub aggregation: Aggregation,
    pub views: Vec<View>,
    /// Ignore velocities when building covariances (scaled-identity splats).
    pub isotropic: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            alpha: 2.0,
            log_scale: -2.0,
            truncation_sigmas: 3.0,
            aggregation: Aggregation::Max,
            views: vec![View::XY, View::YZ, View::ZX],
            isotropic: false,
        }
    }
}

impl RenderConfig {
    /// Default configuration with the view list matching `channels`.
    pub fn for_channels(channels: usize) -> Self {
        let mut config = Self::default();
        config.views = default_views(channels);
        config
    }

    pub fn base_scale(&self) -> f64 {
        self.log_scale.exp()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(KgsError::Config(format!(
                "resolution must be at least 2×2, got {}×{}",
                self.height, self.width
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(KgsError::Config(format!("alpha must be ≥ 0, got {}", self.alpha)));
        }
        if !(self.truncation_sigmas > 0.0) {
            return Err(KgsError::Config(format!(
                "truncation_sigmas must be > 0, got {}",
                self.truncation_sigmas
            )));
        }
        if !self.log_scale.is_finite() {
            return Err(KgsError::Config(format!("log_scale must be finite, got {}", self.log_scale)));
        }
        if self.views.is_empty() {
            return Err(KgsError::Config("at least one view is required".into()));
        }
        Ok(())
    }
}

pub fn default_views(channels: usize) -> Vec<View> {
    if channels == 2 {
        vec![View::XY]
    } else {
        vec![View::XY, View::YZ, View::ZX]
    }
}

/// Symmetric 2×2 matrix.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    pub fn new(xx: f64, xy: f64, yy: f64) -> Self {
        Self { xx, xy, yy }
    }

    pub fn identity() -> Self {
        Self::new(1.0, 0.0, 1.0)
    }

    pub fn scaled(self, k: f64) -> Self {
        Self::new(self.xx * k, self.xy * k, self.yy * k)
    }

    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy
    }

    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        if !(det > 0.0) || !det.is_finite() {
            return None;
        }
        Some(Self::new(self.yy / det, -self.xy / det, self.xx / det))
    }

    /// `dᵀ·M·d`.
    pub fn quad_form(&self, d: [f64; 2]) -> f64 {
        self.xx * d[0] * d[0] + 2.0 * self.xy * d[0] * d[1] + self.yy * d[1] * d[1]
    }

    pub fn is_positive_definite(&self) -> bool {
        self.xx > 0.0 && self.det() > 0.0
    }

    pub fn average(&self, other: &Self) -> Self {
        Self::new(
            0.5 * (self.xx + other.xx),
            0.5 * (self.xy + other.xy),
            0.5 * (self.yy + other.yy),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive2D {
    pub mu: [f64; 2],
    pub sigma: Sym2,
    pub theta: f64,
    /// Principal standard deviations `(s_x, s_y)`, `s_x ≥ s_y`.
    pub scales: (f64, f64),
}

/// Selects the two coordinates of `view` from every joint of positions and velocities.
pub fn project_to_view(
    positions: &[f64],
    velocities: &[f64],
    channels: usize,
    view: View,
) -> Result<(Vec<[f64; 2]>, Vec<[f64; 2]>)> {
    let (a, b) = (view.0.index(), view.1.index());
    if a == b {
        return Err(KgsError::Config(format!("view {view} repeats an axis")));
    }
    if a >= channels || b >= channels {
        return Err(KgsError::Dimension(format!(
            "view {view} needs axis index {} but the sequence has C={channels}",
            a.max(b)
        )));
    }
    if positions.len() != velocities.len() || positions.len() % channels != 0 {
        return Err(KgsError::Dimension(format!(
            "positions ({}) and velocities ({}) must be equal multiples of C={channels}",
            positions.len(),
            velocities.len()
        )));
    }
    let pick = |data: &[f64]| data.chunks(channels).map(|p| [p[a], p[b]]).collect();
    Ok((pick(positions), pick(velocities)))
}

/// Covariance for a joint moving with planar velocity `v`; `mu` is left at the origin.
pub fn build_covariance(v: [f64; 2], config: &RenderConfig) -> GaussianPrimitive2D {
    covariance_for(v, config.base_scale(), config.alpha)
}

pub(crate) fn covariance_for(v: [f64; 2], s_base: f64, alpha: f64) -> GaussianPrimitive2D {
    let speed = v[0].hypot(v[1]);
    let theta = if speed >= MIN_DIRECTION_NORM {
        v[1].atan2(v[0])
    } else {
        0.0
    };
    let s_x = s_base * (1.0 + alpha * speed.tanh());
    let s_y = s_base;
    let (sin, cos) = theta.sin_cos();
    let (sx2, sy2) = (s_x * s_x, s_y * s_y);
    let sigma = Sym2::new(
        sx2 * cos * cos + sy2 * sin * sin,
        (sx2 - sy2) * sin * cos,
        sx2 * sin * sin + sy2 * cos * cos,
    );
    GaussianPrimitive2D {
        mu: [0.0, 0.0],
        sigma,
        theta,
        scales: (s_x, s_y),
    }
}

/// Unnormalized density `exp(-½ (p-μ)ᵀ Σ⁻¹ (p-μ))`.
pub fn evaluate_gaussian(prim: &GaussianPrimitive2D, p: [f64; 2]) -> f64 {
    let inv = prim.sigma.inverse().expect("constructed covariances are positive definite");
    let d = [p[0] - prim.mu[0], p[1] - prim.mu[1]];
    (-0.5 * inv.quad_form(d)).exp()
}

/// Normalized coordinate of the centre of pixel `index` on an axis with `extent` pixels.
#[inline]
pub fn pixel_center(index: usize, extent: usize) -> f64 {
    -1.0 + 2.0 * (index as f64 + 0.5) / extent as f64
}

/// Inclusive pixel index range whose centres lie within `[lo, hi]`.
fn pixel_span(lo: f64, hi: f64, extent: usize) -> Option<(usize, usize)> {
    let n = extent as f64;
    let first = ((lo + 1.0) * n / 2.0 - 0.5).ceil().max(0.0);
    let last = ((hi + 1.0) * n / 2.0 - 0.5).floor().min(n - 1.0);
    (first <= last).then(|| (first as usize, last as usize))
}

fn clamp_mean(mu: [f64; 2]) -> [f64; 2] {
    if mu.iter().any(|m| m.abs() > 1.0) {
        log::warn!("joint mean {mu:?} outside [-1, 1]² clamped to the image boundary");
    }
    [mu[0].clamp(-1.0, 1.0), mu[1].clamp(-1.0, 1.0)]
}

/// Rasterizes one frame. When `grad` is given it receives the derivative of
/// every pixel with respect to the log base scale.
fn rasterize(
    prims: &[GaussianPrimitive2D],
    config: &RenderConfig,
    out: &mut [f64],
    mut grad: Option<&mut [f64]>,
) {
    let (h, w) = (config.height, config.width);
    debug_assert_eq!(out.len(), h * w);
    out.fill(0.0);
    if let Some(g) = grad.as_deref_mut() {
        g.fill(0.0);
    }
    let xs: Vec<f64> = (0..w).map(|c| pixel_center(c, w)).collect();
    let ys: Vec<f64> = (0..h).map(|r| pixel_center(r, h)).collect();
    for prim in prims {
        let mu = clamp_mean(prim.mu);
        let Some(inv) = prim.sigma.inverse().filter(|_| prim.sigma.is_positive_definite()) else {
            log::warn!("skipping primitive at {:?} with degenerate covariance {:?}", prim.mu, prim.sigma);
            continue;
        };
        let radius = config.truncation_sigmas * prim.scales.0.max(prim.scales.1);
        let (Some((c0, c1)), Some((r0, r1))) = (
            pixel_span(mu[0] - radius, mu[0] + radius, w),
            pixel_span(mu[1] - radius, mu[1] + radius, h),
        ) else {
            continue;
        };
        for r in r0..=r1 {
            let dy = ys[r] - mu[1];
            let row = r * w;
            for c in c0..=c1 {
                let dx = xs[c] - mu[0];
                let m = inv.quad_form([dx, dy]);
                let value = (-0.5 * m).exp();
                let idx = row + c;
                match config.aggregation {
                    Aggregation::Max => {
                        if value > out[idx] {
                            out[idx] = value;
                            if let Some(g) = grad.as_deref_mut() {
                                // Σ ∝ s_base², so m ∝ exp(-2·log_scale) and dG/dlog_scale = G·m.
                                g[idx] = value * m;
                            }
                        }
                    }
                    Aggregation::ClampedSum => {
                        out[idx] += value;
                        if let Some(g) = grad.as_deref_mut() {
                            g[idx] += value * m;
                        }
                    }
                }
            }
        }
    }
    if config.aggregation == Aggregation::ClampedSum {
        for (i, v) in out.iter_mut().enumerate() {
            if *v > 1.0 {
                *v = 1.0;
                if let Some(g) = grad.as_deref_mut() {
                    g[i] = 0.0;
                }
            }
        }
    }
}

/// Renders one `H×W` heatmap (row-major, rows along the second view axis).
pub fn render_frame(prims: &[GaussianPrimitive2D], config: &RenderConfig) -> Vec<f64> {
    let mut out = vec![0.0; config.height * config.width];
    rasterize(prims, config, &mut out, None);
    out
}

/// Like [`render_frame`], also returning `∂pixel/∂log_scale`.
pub fn render_frame_with_grad(
    prims: &[GaussianPrimitive2D],
    config: &RenderConfig,
) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; config.height * config.width];
    let mut grad = vec![0.0; out.len()];
    rasterize(prims, config, &mut out, Some(&mut grad));
    (out, grad)
}

/// Rendered heatmaps, laid out `views×T×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub views: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub config: RenderConfig,
    pub source: Option<String>,
}

impl HeatmapStack {
    pub fn frame(&self, view: usize, t: usize) -> &[f64] {
        let size = self.height * self.width;
        let start = (view * self.frames + t) * size;
        &self.values[start..start + size]
    }
}

/// `T×V` primitives for one view, indexed `t * V + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimitiveGrid {
    pub view: View,
    pub frames: usize,
    pub joints: usize,
    pub primitives: Vec<GaussianPrimitive2D>,
}

impl PrimitiveGrid {
    pub fn frame(&self, t: usize) -> &[GaussianPrimitive2D] {
        &self.primitives[t * self.joints..(t + 1) * self.joints]
    }

    pub fn get(&self, t: usize, v: usize) -> &GaussianPrimitive2D {
        &self.primitives[t * self.joints + v]
    }
}

/// Builds the per-view primitive grids for a kinematic sequence.
pub fn build_primitives(kin: &KinematicSequence, config: &RenderConfig) -> Result<Vec<PrimitiveGrid>> {
    config.validate()?;
    let s_base = config.base_scale();
    config
        .views
        .iter()
        .map(|&view| {
            let (mus, vels) =
                project_to_view(kin.positions(), kin.velocities(), kin.channels(), view)?;
            let primitives = mus
                .into_iter()
                .zip(vels)
                .map(|(mu, v)| {
                    let v = if config.isotropic { [0.0, 0.0] } else { v };
                    GaussianPrimitive2D {
                        mu,
                        ..covariance_for(v, s_base, config.alpha)
                    }
                })
                .collect::<Vec<_>>();
            if let Some(bad) = primitives.iter().find(|p: &&GaussianPrimitive2D| !p.sigma.is_positive_definite()) {
                return Err(KgsError::Data(format!(
                    "covariance {:?} is not positive definite (log_scale = {}, alpha = {})",
                    bad.sigma, config.log_scale, config.alpha
                )));
            }
            Ok(PrimitiveGrid {
                view,
                frames: kin.frames(),
                joints: kin.joints(),
                primitives,
            })
        })
        .collect()
}

fn render_grids(
    grids: &[PrimitiveGrid],
    config: &RenderConfig,
    with_grad: bool,
    parallel: bool,
) -> (Vec<f64>, Vec<f64>) {
    let frames = grids.first().map_or(0, |g| g.frames);
    let size = config.height * config.width;
    let total = grids.len() * frames * size;
    let mut values = vec![0.0; total];
    let mut grads = if with_grad { vec![0.0; total] } else { Vec::new() };
    let job = |i: usize, out: &mut [f64], grad: Option<&mut [f64]>| {
        let (view, t) = (i / frames, i % frames);
        rasterize(grids[view].frame(t), config, out, grad);
    };
    match (with_grad, parallel) {
        (false, false) => values.chunks_mut(size).enumerate().for_each(|(i, o)| job(i, o, None)),
        (false, true) => values
            .par_chunks_mut(size)
            .enumerate()
            .for_each(|(i, o)| job(i, o, None)),
        (true, false) => values
            .chunks_mut(size)
            .zip(grads.chunks_mut(size))
            .enumerate()
            .for_each(|(i, (o, g))| job(i, o, Some(g))),
        (true, true) => values
            .par_chunks_mut(size)
            .zip(grads.par_chunks_mut(size))
            .enumerate()
            .for_each(|(i, (o, g))| job(i, o, Some(g))),
    }
    (values, grads)
}

fn stack(kin: &KinematicSequence, config: &RenderConfig, values: Vec<f64>) -> HeatmapStack {
    HeatmapStack {
        views: config.views.len(),
        frames: kin.frames(),
        height: config.height,
        width: config.width,
        values,
        config: config.clone(),
        source: None,
    }
}

/// Renders every (view, frame) pair and returns the primitive grids used.
pub fn render_sequence(
    kin: &KinematicSequence,
    config: &RenderConfig,
) -> Result<(HeatmapStack, Vec<PrimitiveGrid>)> {
    let grids = build_primitives(kin, config)?;
    let (values, _) = render_grids(&grids, config, false, false);
    Ok((stack(kin, config, values), grids))
}

/// [`render_sequence`] with (view, frame) pairs rasterized on the rayon pool.
/// Output is identical to the sequential path.
pub fn render_sequence_parallel(
    kin: &KinematicSequence,
    config: &RenderConfig,
) -> Result<(HeatmapStack, Vec<PrimitiveGrid>)> {
    let grids = build_primitives(kin, config)?;
    let (values, _) = render_grids(&grids, config, false, true);
    Ok((stack(kin, config, values), grids))
}

/// Renders the sequence and the derivative of every heatmap value with
/// respect to `config.log_scale` (same layout as the values).
pub fn render_sequence_with_grad(
    kin: &KinematicSequence,
    config: &RenderConfig,
) -> Result<(HeatmapStack, Vec<f64>)> {
    let grids = build_primitives(kin, config)?;
    let (values, grads) = render_grids(&grids, config, true, false);
    Ok((stack(kin, config, values), grads))
}
