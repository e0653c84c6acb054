//! Cubic b-spline free-form deformation and gradient-based registration.
//!
//! Pixel `(x, y)` has its centre at integer coordinates. Control point `k`
//! along an axis sits at `(k - 1) * s`, so a lattice of `ceil(w / s) + 3`
//! points covers the image with one spare point on the low side and two on
//! the high side. For `x` in cell `i = floor(x / s)` with `t = x / s - i` the
//! active control points are `i..i + 4` with weights
//!
//! ```text
//! B0 = (1 - t)^3 / 6
//! B1 = (3t^3 - 6t^2 + 4) / 6
//! B2 = (-3t^3 + 3t^2 + 3t + 1) / 6
//! B3 = t^3 / 6
//! ```
//!
//! Warping pulls: `out(x) = image(x + u(x))`, clamped at the border.
//!
//! The bending energy of the lattice, per displacement component, is
//! `sum Dxx^2 + sum Dyy^2 + 2 sum Dxy^2` with `Dxx = d[i+1] - 2 d[i] + d[i-1]`
//! along rows, `Dyy` likewise along columns and
//! `Dxy = d[i+1][j+1] - d[i+1][j] - d[i][j+1] + d[i][j]`. A single interior
//! point displaced by one pixel therefore scores `6 + 6 + 2 * 4 = 20`.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::io::CsvTable;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlGrid {
    pub width: usize,
    pub height: usize,
    /// `(s_x, s_y)` in pixels.
    pub spacing: [usize; 2],
    pub nx: usize,
    pub ny: usize,
    /// Row-major `[ny][nx]` displacements `(dx, dy)` in pixels.
    pub displacements: Vec<[f64; 2]>,
}

impl ControlGrid {
    pub fn zeros(width: usize, height: usize, spacing: [usize; 2]) -> Result<Self> {
        if spacing[0] == 0 || spacing[1] == 0 || width == 0 || height == 0 {
            bail!(Config, "control spacing and image size must be positive");
        }
        let nx = width.div_ceil(spacing[0]) + 3;
        let ny = height.div_ceil(spacing[1]) + 3;
        Ok(Self { width, height, spacing, nx, ny, displacements: vec![[0.0; 2]; nx * ny] })
    }

    pub fn constant(width: usize, height: usize, spacing: [usize; 2], d: [f64; 2]) -> Result<Self> {
        let mut g = Self::zeros(width, height, spacing)?;
        g.displacements.iter_mut().for_each(|v| *v = d);
        Ok(g)
    }

    pub fn at(&self, kx: usize, ky: usize) -> [f64; 2] {
        self.displacements[ky * self.nx + kx]
    }

    /// Root mean square of the dense displacement field over the image.
    pub fn field_rms(&self) -> f64 {
        let f = dense_field(self);
        (f.iter().map(|d| d[0] * d[0] + d[1] * d[1]).sum::<f64>() / f.len() as f64).sqrt()
    }

    /// Flat `[ny, nx, 2]` values for the tensor container.
    pub fn to_flat(&self) -> Vec<f32> {
        self.displacements.iter().flat_map(|d| [d[0] as f32, d[1] as f32]).collect()
    }
}

/// The four uniform cubic basis weights at `t` in `[0, 1)`.
pub fn cubic_bspline_weights(t: f64) -> Result<[f64; 4]> {
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Domain(format!("spline parameter {t} outside [0, 1)")));
    }
    Ok(weights(t))
}

fn weights(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    let s = 1.0 - t;
    [s * s * s / 6.0, (3.0 * t3 - 6.0 * t2 + 4.0) / 6.0, (-3.0 * t3 + 3.0 * t2 + 3.0 * t + 1.0) / 6.0, t3 / 6.0]
}

/// First control index and weights along one axis for coordinate `x`.
fn axis_support(x: f64, spacing: usize) -> (usize, [f64; 4]) {
    let u = x / spacing as f64;
    let i = u.floor();
    (i as usize, weights(u - i))
}

/// Displacement at a point inside the image.
pub fn displacement_at(grid: &ControlGrid, x: f64, y: f64) -> [f64; 2] {
    let (ix, wx) = axis_support(x, grid.spacing[0]);
    let (iy, wy) = axis_support(y, grid.spacing[1]);
    let mut d = [0.0; 2];
    for (m, wym) in wy.iter().enumerate() {
        let row = (iy + m) * grid.nx + ix;
        for (l, wxl) in wx.iter().enumerate() {
            let w = wym * wxl;
            let c = grid.displacements[row + l];
            d[0] += w * c[0];
            d[1] += w * c[1];
        }
    }
    d
}

/// Centred cubic b-spline kernel.
pub fn beta3(u: f64) -> f64 {
    let a = u.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + a * a * a / 2.0
    } else if a < 2.0 {
        (2.0 - a).powi(3) / 6.0
    } else {
        0.0
    }
}

/// Reference evaluation summing every control point with the full kernel.
pub fn displacement_brute_force(grid: &ControlGrid, x: f64, y: f64) -> [f64; 2] {
    let mut d = [0.0; 2];
    for ky in 0..grid.ny {
        let by = beta3(y / grid.spacing[1] as f64 - (ky as f64 - 1.0));
        for kx in 0..grid.nx {
            let w = by * beta3(x / grid.spacing[0] as f64 - (kx as f64 - 1.0));
            let c = grid.at(kx, ky);
            d[0] += w * c[0];
            d[1] += w * c[1];
        }
    }
    d
}

/// Separable per-axis supports, shared by every row or column.
fn supports(n: usize, spacing: usize) -> Vec<(usize, [f64; 4])> {
    (0..n).map(|i| axis_support(i as f64, spacing)).collect()
}

/// Displacement at every pixel, row-major.
pub fn dense_field(grid: &ControlGrid) -> Vec<[f64; 2]> {
    let sx = supports(grid.width, grid.spacing[0]);
    let sy = supports(grid.height, grid.spacing[1]);
    let mut out = vec![[0.0; 2]; grid.width * grid.height];
    for (y, (iy, wy)) in sy.iter().enumerate() {
        for (x, (ix, wx)) in sx.iter().enumerate() {
            let mut d = [0.0; 2];
            for (m, wym) in wy.iter().enumerate() {
                let row = (iy + m) * grid.nx + ix;
                for (l, wxl) in wx.iter().enumerate() {
                    let w = wym * wxl;
                    let c = grid.displacements[row + l];
                    d[0] += w * c[0];
                    d[1] += w * c[1];
                }
            }
            out[y * grid.width + x] = d;
        }
    }
    out
}

/// Bilinear sample with edge clamp plus its partial derivatives. Derivatives
/// are zero along an axis where the sample point was clamped.
fn sample(image: &[f64], w: usize, h: usize, x: f64, y: f64) -> (f64, f64, f64) {
    let (cx, gx_on) = clamp_axis(x, w);
    let (cy, gy_on) = clamp_axis(y, h);
    let (x0, y0) = (cx.floor() as usize, cy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (cx - x0 as f64, cy - y0 as f64);
    let (a, b, c, d) = (image[y0 * w + x0], image[y0 * w + x1], image[y1 * w + x0], image[y1 * w + x1]);
    let v = (a * (1.0 - tx) + b * tx) * (1.0 - ty) + (c * (1.0 - tx) + d * tx) * ty;
    let dx = if gx_on { (b - a) * (1.0 - ty) + (d - c) * ty } else { 0.0 };
    let dy = if gy_on { (c - a) * (1.0 - tx) + (d - b) * tx } else { 0.0 };
    (v, dx, dy)
}

fn clamp_axis(x: f64, n: usize) -> (f64, bool) {
    let hi = (n - 1) as f64;
    if x < 0.0 {
        (0.0, false)
    } else if x > hi {
        (hi, false)
    } else {
        (x, true)
    }
}

fn check_image(image: &[f64], grid: &ControlGrid) -> Result<()> {
    if image.len() != grid.width * grid.height {
        bail!(Shape, "image has {} pixels, grid covers {}x{}", image.len(), grid.width, grid.height);
    }
    Ok(())
}

/// `out(x) = image(x + u(x))`, bilinear with edge clamp.
pub fn warp_image(image: &[f64], grid: &ControlGrid) -> Result<Vec<f64>> {
    check_image(image, grid)?;
    let (w, h) = (grid.width, grid.height);
    let field = dense_field(grid);
    Ok((0..w * h).map(|i| sample(image, w, h, (i % w) as f64 + field[i][0], (i / w) as f64 + field[i][1]).0).collect())
}

/// Nearest-neighbour counterpart of [`warp_image`] for binary masks.
pub fn warp_mask(mask: &[u8], grid: &ControlGrid) -> Result<Vec<u8>> {
    if mask.len() != grid.width * grid.height {
        bail!(Shape, "mask has {} pixels, grid covers {}x{}", mask.len(), grid.width, grid.height);
    }
    let (w, h) = (grid.width, grid.height);
    let field = dense_field(grid);
    Ok((0..w * h)
        .map(|i| {
            let x = ((i % w) as f64 + field[i][0] + 0.5).floor().clamp(0.0, (w - 1) as f64) as usize;
            let y = ((i / w) as f64 + field[i][1] + 0.5).floor().clamp(0.0, (h - 1) as f64) as usize;
            mask[y * w + x]
        })
        .collect())
}

pub fn bending_energy(grid: &ControlGrid) -> f64 {
    bending_energy_and_gradient(grid, false).0
}

fn bending_energy_and_gradient(grid: &ControlGrid, want_grad: bool) -> (f64, Vec<[f64; 2]>) {
    let (nx, ny) = (grid.nx, grid.ny);
    let d = &grid.displacements;
    let mut e = 0.0;
    let mut g = if want_grad { vec![[0.0; 2]; d.len()] } else { Vec::new() };
    let mut stencil = |taps: &[(usize, f64)], weight: f64, e: &mut f64| {
        for c in 0..2 {
            let v: f64 = taps.iter().map(|&(i, k)| k * d[i][c]).sum();
            *e += weight * v * v;
            if want_grad {
                for &(i, k) in taps {
                    g[i][c] += 2.0 * weight * v * k;
                }
            }
        }
    };
    for j in 0..ny {
        for i in 1..nx.saturating_sub(1) {
            let r = j * nx;
            stencil(&[(r + i - 1, 1.0), (r + i, -2.0), (r + i + 1, 1.0)], 1.0, &mut e);
        }
    }
    for j in 1..ny.saturating_sub(1) {
        for i in 0..nx {
            stencil(&[((j - 1) * nx + i, 1.0), (j * nx + i, -2.0), ((j + 1) * nx + i, 1.0)], 1.0, &mut e);
        }
    }
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let (a, b) = (j * nx + i, (j + 1) * nx + i);
            stencil(&[(b + 1, 1.0), (b, -1.0), (a + 1, -1.0), (a, 1.0)], 2.0, &mut e);
        }
    }
    (e, g)
}

/// Value of `MSE(warp(moving), fixed) + gamma * bending_energy / n_points`
/// and, if requested, its exact gradient with respect to every control displacement.
pub fn objective(fixed: &[f64], moving: &[f64], grid: &ControlGrid, gamma: f64, want_grad: bool) -> Result<(f64, f64, Vec<[f64; 2]>)> {
    check_image(fixed, grid)?;
    check_image(moving, grid)?;
    let (w, h) = (grid.width, grid.height);
    let n = (w * h) as f64;
    let sx = supports(w, grid.spacing[0]);
    let sy = supports(h, grid.spacing[1]);
    let field = dense_field(grid);
    let mut mse = 0.0;
    let mut grad = if want_grad { vec![[0.0; 2]; grid.displacements.len()] } else { Vec::new() };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let (v, dx, dy) = sample(moving, w, h, x as f64 + field[i][0], y as f64 + field[i][1]);
            let r = v - fixed[i];
            mse += r * r;
            if want_grad && (dx != 0.0 || dy != 0.0) {
                let k = 2.0 * r / n;
                let (ix, wx) = &sx[x];
                let (iy, wy) = &sy[y];
                for (m, wym) in wy.iter().enumerate() {
                    let row = (iy + m) * grid.nx + ix;
                    for (l, wxl) in wx.iter().enumerate() {
                        let c = k * wym * wxl;
                        grad[row + l][0] += c * dx;
                        grad[row + l][1] += c * dy;
                    }
                }
            }
        }
    }
    mse /= n;
    // Per control point, so gamma does not depend on lattice size.
    let k = gamma / grid.displacements.len() as f64;
    let (be, bg) = bending_energy_and_gradient(grid, want_grad);
    if want_grad {
        for (g, b) in grad.iter_mut().zip(&bg) {
            g[0] += k * b[0];
            g[1] += k * b[1];
        }
    }
    Ok((mse + k * be, mse, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationConfig {
    pub spacing: usize,
    pub levels: usize,
    pub iterations: usize,
    /// Initial largest per-point displacement change, in pixels of the level.
    pub step_size: f64,
    pub gamma: f64,
    /// Stop a level once the relative objective decrease falls below this.
    pub tolerance: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self { spacing: 8, levels: 2, iterations: 100, step_size: 1.0, gamma: 1e-3, tolerance: 1e-7 }
    }
}

impl RegistrationConfig {
    pub fn validate(&self, w: usize, h: usize) -> Result<()> {
        if self.spacing < 4 || self.iterations == 0 || self.levels == 0 {
            bail!(Config, "registration needs spacing >= 4, at least one level and one iteration");
        }
        let f = 1usize << (self.levels - 1);
        if self.spacing % f != 0 || w % f != 0 || h % f != 0 {
            bail!(Config, "spacing {} and image {w}x{h} must be divisible by the pyramid factor {f}", self.spacing);
        }
        if !(self.step_size > 0.0 && self.gamma >= 0.0 && self.tolerance >= 0.0) {
            bail!(Config, "step size must be positive, gamma and tolerance non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub level: usize,
    pub iteration: usize,
    pub objective: f64,
    pub mse: f64,
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    pub records: Vec<IterationRecord>,
    pub initial_mse: f64,
    pub final_mse: f64,
}

impl Diagnostics {
    pub fn to_csv(&self, config_hash: &str) -> CsvTable {
        let mut t = CsvTable::new(config_hash, &["level", "iteration", "objective", "mse", "step_size"]);
        for r in &self.records {
            t.row([r.level.to_string(), r.iteration.to_string(), format!("{:.10e}", r.objective), format!("{:.10e}", r.mse), format!("{:.6e}", r.step)]);
        }
        t
    }
}

fn downsample(image: &[f64], w: usize, h: usize, f: usize) -> Vec<f64> {
    if f == 1 {
        return image.to_vec();
    }
    let (ow, oh) = (w / f, h / f);
    let mut out = vec![0.0; ow * oh];
    for y in 0..h {
        for x in 0..w {
            out[(y / f) * ow + x / f] += image[y * w + x];
        }
    }
    let k = (f * f) as f64;
    out.iter_mut().for_each(|v| *v /= k);
    out
}

/// Steepest descent with backtracking on the displacements, coarse to fine.
/// The lattice keeps the same control points at every level; only its pixel
/// spacing and displacement units change.
pub fn register(fixed: &[f64], moving: &[f64], w: usize, h: usize, config: &RegistrationConfig) -> Result<(ControlGrid, Diagnostics)> {
    config.validate(w, h)?;
    if fixed.len() != w * h || moving.len() != w * h {
        bail!(Shape, "fixed and moving images must both be {w}x{h}");
    }
    let mut diag = Diagnostics::default();
    let mut carried: Option<Vec<[f64; 2]>> = None;
    for level in 0..config.levels {
        let f = 1usize << (config.levels - 1 - level);
        let (lw, lh) = (w / f, h / f);
        let fx = downsample(fixed, w, h, f);
        let mv = downsample(moving, w, h, f);
        let s = config.spacing / f;
        let mut grid = ControlGrid::zeros(lw, lh, [s, s])?;
        if let Some(prev) = carried.take() {
            if prev.len() != grid.displacements.len() {
                bail!(Registration, "lattice changed size between pyramid levels");
            }
            grid.displacements = prev.iter().map(|d| [2.0 * d[0], 2.0 * d[1]]).collect();
        }
        let (mut obj, mut mse, mut grad) = objective(&fx, &mv, &grid, config.gamma, true)?;
        if level == 0 {
            diag.initial_mse = objective(fixed, moving, &ControlGrid::zeros(w, h, [config.spacing; 2])?, 0.0, false)?.1;
        }
        let mut step = config.step_size;
        for it in 0..config.iterations {
            if !obj.is_finite() {
                bail!(Registration, "non-finite objective at level {level} iteration {it}");
            }
            diag.records.push(IterationRecord { level, iteration: it, objective: obj, mse, step });
            let gmax = grad.iter().flat_map(|g| [g[0].abs(), g[1].abs()]).fold(0.0, f64::max);
            if gmax == 0.0 {
                break;
            }
            let gnorm2: f64 = grad.iter().map(|g| g[0] * g[0] + g[1] * g[1]).sum();
            let mut accepted = None;
            while step > 1e-6 {
                let alpha = step / gmax;
                let mut trial = grid.clone();
                for (d, g) in trial.displacements.iter_mut().zip(&grad) {
                    d[0] -= alpha * g[0];
                    d[1] -= alpha * g[1];
                }
                let (o, m, gr) = objective(&fx, &mv, &trial, config.gamma, true)?;
                if o.is_finite() && o <= obj - 1e-4 * alpha * gnorm2 {
                    accepted = Some((trial, o, m, gr));
                    break;
                }
                step *= 0.5;
            }
            let Some((trial, o, m, gr)) = accepted else { break };
            let rel = (obj - o) / obj.abs().max(1e-300);
            grid = trial;
            (obj, mse, grad) = (o, m, gr);
            step *= 1.5;
            if rel < config.tolerance {
                break;
            }
        }
        diag.records.push(IterationRecord { level, iteration: config.iterations, objective: obj, mse, step });
        if level + 1 == config.levels {
            diag.final_mse = mse;
            return Ok((grid, diag));
        }
        carried = Some(grid.displacements);
    }
    unreachable!("at least one pyramid level")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn weights_examples() {
        let w = cubic_bspline_weights(0.0).unwrap();
        let expect = [1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0, 0.0];
        assert!(w.iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-15));
        let w = cubic_bspline_weights(0.5).unwrap();
        let expect = [1.0 / 48.0, 23.0 / 48.0, 23.0 / 48.0, 1.0 / 48.0];
        assert!(w.iter().zip(expect).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(cubic_bspline_weights(1.0).is_err() && cubic_bspline_weights(-0.1).is_err());
    }

    #[test]
    fn partition_of_unity() {
        for i in 0..1000 {
            let w = cubic_bspline_weights(i as f64 * 1e-3).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn constant_and_zero_fields() {
        let g = ControlGrid::constant(20, 13, [4, 5], [5.0, 0.0]).unwrap();
        for (x, y) in [(0.0, 0.0), (19.0, 12.0), (7.3, 4.4)] {
            let d = displacement_at(&g, x, y);
            assert!((d[0] - 5.0).abs() < 1e-12 && d[1].abs() < 1e-15);
        }
        let z = ControlGrid::zeros(20, 13, [4, 5]).unwrap();
        assert_eq!(displacement_at(&z, 3.3, 9.1), [0.0, 0.0]);
        assert_eq!((z.nx, z.ny), (8, 6));
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = crate::seed::rng(5, &[]);
        for _ in 0..100 {
            let (w, h) = (rng.gen_range(8..40), rng.gen_range(8..40));
            let mut g = ControlGrid::zeros(w, h, [rng.gen_range(4..9), rng.gen_range(4..9)]).unwrap();
            g.displacements.iter_mut().for_each(|d| *d = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)]);
            let (x, y) = (rng.gen_range(0.0..(w - 1) as f64), rng.gen_range(0.0..(h - 1) as f64));
            let a = displacement_at(&g, x, y);
            let b = displacement_brute_force(&g, x, y);
            assert!((a[0] - b[0]).abs() < 1e-10 && (a[1] - b[1]).abs() < 1e-10);
        }
    }

    fn pattern(w: usize, h: usize) -> Vec<f64> {
        (0..w * h).map(|i| (((i % w) as f64 * 0.7).sin() + ((i / w) as f64 * 0.4).cos()) * 0.25 + 0.5).collect()
    }

    #[test]
    fn identity_warps() {
        let img = pattern(17, 11);
        let g = ControlGrid::zeros(17, 11, [4, 4]).unwrap();
        assert_eq!(warp_image(&img, &g).unwrap(), img);
        let mask: Vec<u8> = img.iter().map(|&v| u8::from(v > 0.5)).collect();
        assert_eq!(warp_mask(&mask, &g).unwrap(), mask);
    }

    #[test]
    fn integer_shift_moves_content() {
        let (w, h) = (16, 12);
        let img = pattern(w, h);
        let mask: Vec<u8> = img.iter().map(|&v| u8::from(v > 0.55)).collect();
        let g = ControlGrid::constant(w, h, [4, 4], [3.0, -1.0]).unwrap();
        let out = warp_image(&img, &g).unwrap();
        let om = warp_mask(&mask, &g).unwrap();
        for y in 0..h {
            for x in 0..w {
                let sx = (x + 3).min(w - 1);
                let sy = (y as i64 - 1).max(0) as usize;
                assert!((out[y * w + x] - img[sy * w + sx]).abs() < 1e-9);
                assert_eq!(om[y * w + x], mask[sy * w + sx]);
            }
        }
        assert!(om.iter().all(|&m| m <= 1));
    }

    #[test]
    fn bilinear_midpoint() {
        assert_eq!(sample(&[0.0, 1.0], 2, 1, 0.5, 0.0).0, 0.5);
    }

    #[test]
    fn bending_energy_stencil() {
        let mut g = ControlGrid::zeros(32, 32, [8, 8]).unwrap();
        assert_eq!(bending_energy(&g), 0.0);
        g.displacements.iter_mut().for_each(|d| *d = [2.0, -1.0]);
        assert_eq!(bending_energy(&g), 0.0);
        let mut g = ControlGrid::zeros(32, 32, [8, 8]).unwrap();
        let idx = 3 * g.nx + 3;
        g.displacements[idx] = [1.0, 0.0];
        assert!((bending_energy(&g) - 20.0).abs() < 1e-12);
        // Affine in the lattice index: second differences vanish.
        for ky in 0..g.ny {
            for kx in 0..g.nx {
                g.displacements[ky * g.nx + kx] = [0.5 * kx as f64 - 0.25 * ky as f64, 1.0 + 0.1 * ky as f64];
            }
        }
        assert!(bending_energy(&g).abs() < 1e-20);
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let (w, h) = (20, 16);
        let fixed = pattern(w, h);
        let moving: Vec<f64> = (0..w * h).map(|i| fixed[(i + 3) % (w * h)] * 0.9 + 0.03).collect();
        let mut rng = crate::seed::rng(2, &[]);
        let mut g = ControlGrid::zeros(w, h, [4, 4]).unwrap();
        g.displacements.iter_mut().for_each(|d| *d = [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)]);
        let (_, _, grad) = objective(&fixed, &moving, &g, 1e-2, true).unwrap();
        let analytic: Vec<f64> = grad.iter().flat_map(|d| [d[0], d[1]]).collect();
        let mut x = analytic.iter().map(|_| 0.0).collect::<Vec<_>>();
        for (i, d) in g.displacements.iter().enumerate() {
            x[2 * i] = d[0];
            x[2 * i + 1] = d[1];
        }
        let coords: Vec<usize> = (0..x.len()).collect();
        let numeric = crate::gradcheck::central_difference(&mut x, &coords, 1e-6, |x| {
            let mut t = g.clone();
            for (i, d) in t.displacements.iter_mut().enumerate() {
                *d = [x[2 * i], x[2 * i + 1]];
            }
            objective(&fixed, &moving, &t, 1e-2, false).unwrap().0
        });
        let err = crate::gradcheck::max_relative_error(&analytic, &numeric, 1e-6);
        assert!(err < 1e-4, "relative error {err}");
    }

    fn blobs(w: usize, h: usize, shift: f64) -> Vec<f64> {
        (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64 - shift, (i / w) as f64);
                let a = (-((x - 24.0).powi(2) + (y - 28.0).powi(2)) / 60.0).exp();
                let b = (-((x - 42.0).powi(2) + (y - 36.0).powi(2)) / 40.0).exp();
                0.1 + 0.6 * a + 0.5 * b
            })
            .collect()
    }

    #[test]
    fn self_registration_stays_put() {
        let img = blobs(64, 64, 0.0);
        let (g, d) = register(&img, &img, 64, 64, &RegistrationConfig::default()).unwrap();
        assert!(g.field_rms() < 0.5);
        assert!(d.final_mse <= d.initial_mse);
    }

    #[test]
    fn recovers_translation() {
        let moving = blobs(64, 64, 0.0);
        let fixed = blobs(64, 64, 3.0);
        let (g, d) = register(&fixed, &moving, 64, 64, &RegistrationConfig::default()).unwrap();
        assert!(d.final_mse <= 0.2 * d.initial_mse, "{} vs {}", d.final_mse, d.initial_mse);
        let c = displacement_at(&g, 32.0, 32.0);
        assert!((c[0] + 3.0).abs() < 0.75, "centre displacement {c:?}");
        for lvl in 0..2 {
            let objs: Vec<f64> = d.records.iter().filter(|r| r.level == lvl).map(|r| r.objective).collect();
            assert!(objs.windows(2).all(|p| p[1] <= p[0]));
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let img = blobs(64, 64, 0.0);
        assert!(register(&img, &img[..100], 64, 64, &RegistrationConfig::default()).is_err());
        assert!(register(&img, &img, 64, 64, &RegistrationConfig { spacing: 2, ..Default::default() }).is_err());
    }
}
