//! Training views: random crops, geometric jitter and photometric perturbations
//! under two regimes, with recipes that replay bitwise.
//!
//! The domain-agnostic regime follows multi-crop self-distillation (two large
//! crops, several small ones, flips, jitter, blur, solarisation). The
//! domain-specific regime keeps only two global views and the mild geometric
//! and tonal changes that suit radiograph-like images.
//!
//! Coordinates are continuous with pixel `i` covering `[i, i + 1)`. A recipe
//! maps each output pixel centre back to a source point: the point is placed
//! inside the crop box, optionally mirrored, then pulled through the inverse
//! of the rotation (about the image centre) and translation.

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    DomainAgnostic,
    DomainSpecific,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::DomainAgnostic => "domain_agnostic",
            Regime::DomainSpecific => "domain_specific",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    pub global_size: usize,
    pub local_size: usize,
    pub n_local: usize,
    /// Probability of a random resized crop; otherwise the full frame is used.
    pub crop_p: f64,
    /// Crop area as a fraction of the source area.
    pub global_scale: [f64; 2],
    pub local_scale: [f64; 2],
    /// Crop width/height ratio range, sampled log-uniformly.
    pub aspect: [f64; 2],
    pub hflip_p: f64,
    pub rotation_p: f64,
    pub rotation_deg: f64,
    pub translation_p: f64,
    /// Maximum shift as a fraction of the source size.
    pub translation_frac: f64,
    pub brightness_p: f64,
    pub brightness: [f64; 2],
    pub contrast_p: f64,
    pub contrast: [f64; 2],
    pub sharpness_p: f64,
    pub sharpness: [f64; 2],
    pub blur_p: f64,
    pub blur_sigma: [f64; 2],
    pub solarize_p: f64,
    pub solarize_threshold: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self::domain_specific()
    }
}

impl AugmentParams {
    pub fn domain_agnostic() -> Self {
        Self {
            global_size: 64,
            local_size: 32,
            n_local: 4,
            crop_p: 1.0,
            global_scale: [0.4, 1.0],
            local_scale: [0.05, 0.4],
            aspect: [3.0 / 4.0, 4.0 / 3.0],
            hflip_p: 0.5,
            rotation_p: 0.0,
            rotation_deg: 0.0,
            translation_p: 0.0,
            translation_frac: 0.0,
            brightness_p: 0.8,
            brightness: [0.6, 1.4],
            contrast_p: 0.8,
            contrast: [0.6, 1.4],
            sharpness_p: 0.0,
            sharpness: [1.0, 1.0],
            blur_p: 0.5,
            blur_sigma: [0.1, 1.0],
            solarize_p: 0.2,
            solarize_threshold: 0.5,
        }
    }

    pub fn domain_specific() -> Self {
        Self {
            global_size: 64,
            local_size: 32,
            n_local: 0,
            crop_p: 1.0,
            global_scale: [0.7, 1.0],
            local_scale: [0.05, 0.4],
            aspect: [3.0 / 4.0, 4.0 / 3.0],
            hflip_p: 0.0,
            rotation_p: 0.5,
            rotation_deg: 10.0,
            translation_p: 0.5,
            translation_frac: 0.1,
            brightness_p: 0.5,
            brightness: [0.8, 1.2],
            contrast_p: 0.5,
            contrast: [0.8, 1.2],
            sharpness_p: 0.5,
            sharpness: [0.8, 1.2],
            blur_p: 0.0,
            blur_sigma: [0.1, 1.0],
            solarize_p: 0.0,
            solarize_threshold: 0.5,
        }
    }

    pub fn for_regime(regime: Regime) -> Self {
        match regime {
            Regime::DomainAgnostic => Self::domain_agnostic(),
            Regime::DomainSpecific => Self::domain_specific(),
        }
    }

    /// Every probability zero and full-frame crops.
    pub fn identity(size: usize) -> Self {
        Self {
            global_size: size,
            local_size: size / 2,
            n_local: 0,
            crop_p: 0.0,
            global_scale: [1.0, 1.0],
            local_scale: [0.25, 0.25],
            aspect: [1.0, 1.0],
            hflip_p: 0.0,
            rotation_p: 0.0,
            rotation_deg: 0.0,
            translation_p: 0.0,
            translation_frac: 0.0,
            brightness_p: 0.0,
            brightness: [1.0, 1.0],
            contrast_p: 0.0,
            contrast: [1.0, 1.0],
            sharpness_p: 0.0,
            sharpness: [1.0, 1.0],
            blur_p: 0.0,
            blur_sigma: [0.1, 1.0],
            solarize_p: 0.0,
            solarize_threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.global_size == 0 || self.local_size == 0 {
            bail!(Config, "view sizes must be positive");
        }
        if self.local_size > self.global_size {
            bail!(Config, "local view size {} exceeds global size {}", self.local_size, self.global_size);
        }
        let probs = [
            ("crop_p", self.crop_p),
            ("hflip_p", self.hflip_p),
            ("rotation_p", self.rotation_p),
            ("translation_p", self.translation_p),
            ("brightness_p", self.brightness_p),
            ("contrast_p", self.contrast_p),
            ("sharpness_p", self.sharpness_p),
            ("blur_p", self.blur_p),
            ("solarize_p", self.solarize_p),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                bail!(Config, "{name} = {p} is not a probability");
            }
        }
        let ranges = [
            ("global_scale", self.global_scale),
            ("local_scale", self.local_scale),
            ("aspect", self.aspect),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("sharpness", self.sharpness),
            ("blur_sigma", self.blur_sigma),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                bail!(Config, "{name} range [{lo}, {hi}] must be positive and ordered");
            }
        }
        if self.global_scale[1] > 1.0 || self.local_scale[1] > 1.0 {
            bail!(Config, "crop scales cannot exceed 1");
        }
        if !(0.0..=180.0).contains(&self.rotation_deg) || !(0.0..0.5).contains(&self.translation_frac) {
            bail!(Config, "rotation must lie in [0, 180] degrees and translation in [0, 0.5)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x0: f64,
    pub y0: f64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometric {
    pub crop: CropBox,
    pub hflip: bool,
    pub rotation_deg: f64,
    /// Shift as fractions of the source width and height.
    pub translation: [f64; 2],
    pub output_size: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Photometric {
    pub brightness: Option<f64>,
    pub contrast: Option<f64>,
    pub sharpness: Option<f64>,
    pub blur_sigma: Option<f64>,
    pub solarize_threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AppliedFlags {
    pub crop: bool,
    pub hflip: bool,
    pub rotation: bool,
    pub translation: bool,
    pub brightness: bool,
    pub contrast: bool,
    pub sharpness: bool,
    pub blur: bool,
    pub solarize: bool,
}

/// The per-view rng stream: its seed and how many 32-bit words were drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngRecord {
    pub seed: u64,
    pub draws: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecipe {
    pub source_width: usize,
    pub source_height: usize,
    pub geometric: Geometric,
    pub photometric: Photometric,
    pub applied: AppliedFlags,
    pub rng_record: RngRecord,
}

impl ViewRecipe {
    /// Full frame, no perturbation, resized to `output_size`.
    pub fn identity(width: usize, height: usize, output_size: usize) -> Self {
        Self {
            source_width: width,
            source_height: height,
            geometric: Geometric {
                crop: CropBox { x0: 0.0, y0: 0.0, width: width as f64, height: height as f64 },
                hflip: false,
                rotation_deg: 0.0,
                translation: [0.0, 0.0],
                output_size,
            },
            photometric: Photometric::default(),
            applied: AppliedFlags::default(),
            rng_record: RngRecord { seed: 0, draws: 0 },
        }
    }

    /// Source point sampled by output pixel `(u, v)`.
    pub fn source_point(&self, u: usize, v: usize) -> (f64, f64) {
        let g = &self.geometric;
        let s = g.output_size as f64;
        let u = if g.hflip { g.output_size - 1 - u } else { u };
        let px = g.crop.x0 + (u as f64 + 0.5) * g.crop.width / s;
        let py = g.crop.y0 + (v as f64 + 0.5) * g.crop.height / s;
        let qx = px - g.translation[0] * self.source_width as f64;
        let qy = py - g.translation[1] * self.source_height as f64;
        if g.rotation_deg == 0.0 {
            return (qx, qy);
        }
        let cx = self.source_width as f64 / 2.0;
        let cy = self.source_height as f64 / 2.0;
        let (sin, cos) = (-g.rotation_deg).to_radians().sin_cos();
        let (dx, dy) = (qx - cx, qy - cy);
        (cx + cos * dx - sin * dy, cy + sin * dx + cos * dy)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: Vec<f32>,
    pub recipe: ViewRecipe,
}

impl View {
    pub fn size(&self) -> usize {
        self.recipe.geometric.output_size
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewSet {
    pub global_views: Vec<View>,
    pub local_views: Vec<View>,
    pub regime: Regime,
}

/// Counts 32-bit words pulled from the wrapped generator.
struct CountingRng {
    inner: ChaCha8Rng,
    draws: u64,
}

impl RngCore for CountingRng {
    fn next_u32(&mut self) -> u32 {
        self.draws += 1;
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.draws += 2;
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.draws += dest.len().div_ceil(4) as u64;
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

fn uniform(rng: &mut CountingRng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

fn random_crop(rng: &mut CountingRng, w: usize, h: usize, scale: [f64; 2], aspect: [f64; 2]) -> CropBox {
    let (wf, hf) = (w as f64, h as f64);
    let area = wf * hf;
    let log_aspect = [aspect[0].ln(), aspect[1].ln()];
    for _ in 0..10 {
        let target = area * uniform(rng, scale);
        let ratio = uniform(rng, log_aspect).exp();
        let cw = (target * ratio).sqrt();
        let ch = (target / ratio).sqrt();
        if cw <= wf && ch <= hf {
            let x0 = uniform(rng, [0.0, wf - cw]);
            let y0 = uniform(rng, [0.0, hf - ch]);
            return CropBox { x0, y0, width: cw, height: ch };
        }
    }
    // Fallback: centred crop at the largest admissible scale.
    let side = (area * scale[1]).sqrt().min(wf).min(hf);
    CropBox { x0: (wf - side) / 2.0, y0: (hf - side) / 2.0, width: side, height: side }
}

fn sample_recipe(seed: u64, w: usize, h: usize, output_size: usize, scale: [f64; 2], params: &AugmentParams) -> ViewRecipe {
    let mut rng = CountingRng { inner: seed::rng(seed, &[]), draws: 0 };
    let mut recipe = ViewRecipe::identity(w, h, output_size);
    let hit = |rng: &mut CountingRng, p: f64| rng.gen::<f64>() < p;

    let flags = &mut recipe.applied;
    let g = &mut recipe.geometric;
    if hit(&mut rng, params.crop_p) {
        flags.crop = true;
        g.crop = random_crop(&mut rng, w, h, scale, params.aspect);
    }
    if hit(&mut rng, params.hflip_p) {
        flags.hflip = true;
        g.hflip = true;
    }
    if hit(&mut rng, params.rotation_p) {
        flags.rotation = true;
        g.rotation_deg = uniform(&mut rng, [-params.rotation_deg, params.rotation_deg]);
    }
    if hit(&mut rng, params.translation_p) {
        flags.translation = true;
        let t = params.translation_frac;
        g.translation = [uniform(&mut rng, [-t, t]), uniform(&mut rng, [-t, t])];
    }
    let ph = &mut recipe.photometric;
    if hit(&mut rng, params.brightness_p) {
        flags.brightness = true;
        ph.brightness = Some(uniform(&mut rng, params.brightness));
    }
    if hit(&mut rng, params.contrast_p) {
        flags.contrast = true;
        ph.contrast = Some(uniform(&mut rng, params.contrast));
    }
    if hit(&mut rng, params.sharpness_p) {
        flags.sharpness = true;
        ph.sharpness = Some(uniform(&mut rng, params.sharpness));
    }
    if hit(&mut rng, params.blur_p) {
        flags.blur = true;
        ph.blur_sigma = Some(uniform(&mut rng, params.blur_sigma));
    }
    if hit(&mut rng, params.solarize_p) {
        flags.solarize = true;
        ph.solarize_threshold = Some(params.solarize_threshold);
    }
    recipe.rng_record = RngRecord { seed, draws: rng.draws };
    recipe
}

fn bilinear(image: &[f32], w: usize, h: usize, x: f64, y: f64) -> f32 {
    let x = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    if tx == 0.0 && ty == 0.0 {
        return image[y0 * w + x0];
    }
    let top = image[y0 * w + x0] * (1.0 - tx) + image[y0 * w + x1] * tx;
    let bottom = image[y1 * w + x0] * (1.0 - tx) + image[y1 * w + x1] * tx;
    top * (1.0 - ty) + bottom * ty
}

fn gaussian_blur(image: &[f32], s: usize, sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let clamp = |i: isize| i.clamp(0, s as isize - 1) as usize;
    let mut tmp = vec![0.0f32; s * s];
    for y in 0..s {
        for x in 0..s {
            tmp[y * s + x] = kernel.iter().enumerate().map(|(k, &wk)| wk * image[y * s + clamp(x as isize + k as isize - radius)]).sum();
        }
    }
    let mut out = vec![0.0f32; s * s];
    for y in 0..s {
        for x in 0..s {
            out[y * s + x] = kernel.iter().enumerate().map(|(k, &wk)| wk * tmp[clamp(y as isize + k as isize - radius) * s + x]).sum();
        }
    }
    out
}

/// 3x3 smoothing with centre weight 5 and unit neighbours, edge pixels kept.
fn smooth3(image: &[f32], s: usize) -> Vec<f32> {
    let mut out = image.to_vec();
    for y in 1..s.saturating_sub(1) {
        for x in 1..s - 1 {
            let mut acc = 4.0 * image[y * s + x];
            for dy in 0..3 {
                for dx in 0..3 {
                    acc += image[(y + dy - 1) * s + x + dx - 1];
                }
            }
            out[y * s + x] = acc / 13.0;
        }
    }
    out
}

fn clamp01(image: &mut [f32]) {
    image.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Replays a recipe on a `[0, 1]` grayscale image.
pub fn apply_recipe(image: &[f32], recipe: &ViewRecipe) -> Result<Vec<f32>> {
    let (w, h) = (recipe.source_width, recipe.source_height);
    if image.len() != w * h {
        bail!(Shape, "image has {} pixels, recipe expects {w}x{h}", image.len());
    }
    let s = recipe.geometric.output_size;
    let mut out = Vec::with_capacity(s * s);
    for v in 0..s {
        for u in 0..s {
            let (x, y) = recipe.source_point(u, v);
            out.push(bilinear(image, w, h, x, y));
        }
    }
    let ph = &recipe.photometric;
    if let Some(f) = ph.brightness {
        out.iter_mut().for_each(|v| *v *= f as f32);
        clamp01(&mut out);
    }
    if let Some(f) = ph.contrast {
        let mean = out.iter().sum::<f32>() / out.len() as f32;
        out.iter_mut().for_each(|v| *v = mean + (*v - mean) * f as f32);
        clamp01(&mut out);
    }
    if let Some(f) = ph.sharpness {
        let smooth = smooth3(&out, s);
        out.iter_mut().zip(&smooth).for_each(|(v, &b)| *v = b + (*v - b) * f as f32);
        clamp01(&mut out);
    }
    if let Some(sigma) = ph.blur_sigma {
        out = gaussian_blur(&out, s, sigma);
    }
    if let Some(t) = ph.solarize_threshold {
        out.iter_mut().filter(|v| **v >= t as f32).for_each(|v| *v = 1.0 - *v);
    }
    Ok(out)
}

/// Carries a binary source-resolution map through the geometric part of a
/// recipe by nearest-neighbour lookup; points that leave the frame read 0.
pub fn transform_knowledge_map(map: &[u8], recipe: &ViewRecipe) -> Vec<u8> {
    let (w, h) = (recipe.source_width, recipe.source_height);
    debug_assert_eq!(map.len(), w * h);
    let s = recipe.geometric.output_size;
    let mut out = vec![0u8; s * s];
    for v in 0..s {
        for u in 0..s {
            let (x, y) = recipe.source_point(u, v);
            if x >= 0.0 && y >= 0.0 && x < w as f64 && y < h as f64 {
                out[v * s + u] = map[y as usize * w + x as usize];
            }
        }
    }
    out
}

fn make_views(image: &[f32], w: usize, h: usize, seed: u64, params: &AugmentParams, regime: Regime) -> Result<ViewSet> {
    params.validate()?;
    if image.len() != w * h {
        bail!(Shape, "image has {} pixels, expected {w}x{h}", image.len());
    }
    let n_local = match regime {
        Regime::DomainAgnostic => params.n_local,
        Regime::DomainSpecific => 0,
    };
    let build = |index: u64, size: usize, scale: [f64; 2]| -> Result<View> {
        let recipe = sample_recipe(seed::derive(seed, &[index]), w, h, size, scale, params);
        Ok(View { image: apply_recipe(image, &recipe)?, recipe })
    };
    let global_views = (0..2).map(|i| build(i, params.global_size, params.global_scale)).collect::<Result<_>>()?;
    let local_views = (0..n_local).map(|i| build(2 + i as u64, params.local_size, params.local_scale)).collect::<Result<_>>()?;
    Ok(ViewSet { global_views, local_views, regime })
}

/// Two global and `params.n_local` local views.
pub fn domain_agnostic_views(image: &[f32], w: usize, h: usize, seed: u64, params: &AugmentParams) -> Result<ViewSet> {
    make_views(image, w, h, seed, params, Regime::DomainAgnostic)
}

/// Two global views and never any local crops.
pub fn domain_specific_views(image: &[f32], w: usize, h: usize, seed: u64, params: &AugmentParams) -> Result<ViewSet> {
    make_views(image, w, h, seed, params, Regime::DomainSpecific)
}

pub fn make_view_set(image: &[f32], w: usize, h: usize, seed: u64, params: &AugmentParams, regime: Regime) -> Result<ViewSet> {
    make_views(image, w, h, seed, params, regime)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Vec<f32> {
        (0..w * h).map(|i| ((i * 37) % 251) as f32 / 250.0).collect()
    }

    #[test]
    fn identity_params_reproduce_the_source() {
        let img = ramp(64, 64);
        for regime in [Regime::DomainAgnostic, Regime::DomainSpecific] {
            let vs = make_view_set(&img, 64, 64, 9, &AugmentParams::identity(64), regime).unwrap();
            assert_eq!(vs.global_views.len(), 2);
            for v in &vs.global_views {
                assert_eq!(v.image, img);
            }
        }
    }

    #[test]
    fn same_seed_same_views() {
        let img = ramp(64, 64);
        let p = AugmentParams::domain_agnostic();
        let a = domain_agnostic_views(&img, 64, 64, 4, &p).unwrap();
        let b = domain_agnostic_views(&img, 64, 64, 4, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.local_views.len(), 4);
        assert_eq!(a.local_views[0].image.len(), 32 * 32);
        let c = domain_agnostic_views(&img, 64, 64, 5, &p).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn recipe_replay_is_bitwise_and_survives_json() {
        let img = ramp(64, 64);
        let vs = domain_agnostic_views(&img, 64, 64, 11, &AugmentParams::domain_agnostic()).unwrap();
        for v in vs.global_views.iter().chain(&vs.local_views) {
            let json = serde_json::to_string(&v.recipe).unwrap();
            let back: ViewRecipe = serde_json::from_str(&json).unwrap();
            assert_eq!(back, v.recipe);
            let replay = apply_recipe(&img, &back).unwrap();
            assert!(replay.iter().zip(&v.image).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn application_rates_match_probabilities() {
        let p = AugmentParams::domain_agnostic();
        let n = 1000;
        let mut counts = [0usize; 4];
        for i in 0..n {
            let r = sample_recipe(seed::derive(77, &[i]), 64, 64, 64, p.global_scale, &p);
            counts[0] += r.applied.brightness as usize;
            counts[1] += r.applied.blur as usize;
            counts[2] += r.applied.solarize as usize;
            counts[3] += r.applied.hflip as usize;
        }
        for (c, prob) in counts.iter().zip([p.brightness_p, p.blur_p, p.solarize_p, p.hflip_p]) {
            assert!((*c as f64 / n as f64 - prob).abs() < 0.05, "rate {} vs {prob}", *c as f64 / n as f64);
        }
    }

    #[test]
    fn domain_specific_rotations_stay_in_range() {
        let p = AugmentParams::domain_specific();
        let mut rotated = 0;
        for i in 0..1000 {
            let r = sample_recipe(seed::derive(3, &[i]), 64, 64, 64, p.global_scale, &p);
            assert!((-10.0..=10.0).contains(&r.geometric.rotation_deg));
            rotated += r.applied.rotation as usize;
            assert!(r.photometric.blur_sigma.is_none() && r.photometric.solarize_threshold.is_none());
        }
        assert!((rotated as f64 / 1000.0 - 0.5).abs() < 0.05);
    }

    #[test]
    fn domain_specific_has_no_local_views() {
        let img = ramp(64, 64);
        let mut p = AugmentParams::domain_specific();
        p.n_local = 6;
        for seed in 0..5 {
            assert!(domain_specific_views(&img, 64, 64, seed, &p).unwrap().local_views.is_empty());
        }
    }

    #[test]
    fn crops_stay_inside_the_source() {
        let p = AugmentParams::domain_agnostic();
        for i in 0..500 {
            for scale in [p.global_scale, p.local_scale] {
                let c = sample_recipe(i, 64, 64, 32, scale, &p).geometric.crop;
                assert!(c.x0 >= 0.0 && c.y0 >= 0.0 && c.x0 + c.width <= 64.0 + 1e-9 && c.y0 + c.height <= 64.0 + 1e-9);
            }
        }
    }

    #[test]
    fn local_larger_than_global_is_rejected() {
        let mut p = AugmentParams::domain_agnostic();
        p.local_size = 96;
        assert!(domain_agnostic_views(&ramp(64, 64), 64, 64, 0, &p).is_err());
    }

    #[test]
    fn identity_recipe_keeps_maps() {
        let map: Vec<u8> = (0..400).map(|i| u8::from(i % 7 == 0)).collect();
        assert_eq!(transform_knowledge_map(&map, &ViewRecipe::identity(20, 20, 20)), map);
    }

    #[test]
    fn integer_translation_shifts_map() {
        let w = 12;
        let map: Vec<u8> = (0..w * w).map(|i| u8::from((i * 5) % 3 == 0)).collect();
        for t in [-3i64, 1, 4] {
            let mut r = ViewRecipe::identity(w, w, w);
            r.geometric.translation = [t as f64 / w as f64, 0.0];
            let out = transform_knowledge_map(&map, &r);
            for y in 0..w {
                for x in 0..w {
                    let sx = x as i64 - t;
                    let expect = if (0..w as i64).contains(&sx) { map[y * w + sx as usize] } else { 0 };
                    assert_eq!(out[y * w + x], expect, "t={t} at ({x},{y})");
                }
            }
        }
    }

    #[test]
    fn transformed_maps_stay_binary() {
        let img = ramp(64, 64);
        let map: Vec<u8> = (0..64 * 64).map(|i| u8::from((i / 64 + i % 64) % 5 < 2)).collect();
        let vs = domain_agnostic_views(&img, 64, 64, 21, &AugmentParams::domain_agnostic()).unwrap();
        for v in vs.global_views.iter().chain(&vs.local_views) {
            let out = transform_knowledge_map(&map, &v.recipe);
            assert_eq!(out.len(), v.size() * v.size());
            assert!(out.iter().all(|&m| m <= 1));
        }
    }

    #[test]
    fn bilinear_midpoint_of_ramp() {
        assert_eq!(bilinear(&[0.0, 1.0], 2, 1, 1.0, 0.5), 0.5);
    }
}
