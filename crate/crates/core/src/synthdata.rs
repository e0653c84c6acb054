//! Deterministic synthetic corpus with a shared three-part layout.
//!
//! Every image shows two lateral elliptical lobes and one central-low blob on
//! a noisy background. Defective samples (label 1) carry a bright circular
//! lesion inside one of the lobes. Ground-truth masks are exact indicator maps
//! of the three ellipses since rasterisation is not anti-aliased.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::pgm::{self, GrayImage};
use crate::seed;

/// Component order used everywhere: masks, templates, head assignments.
pub const COMPONENT_NAMES: [&str; 3] = ["left_lobe", "right_lobe", "blob"];
pub const N_COMPONENTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ellipse {
    /// Centre in unit image coordinates `(x, y)`.
    pub center: [f64; 2],
    /// Semi-axes as fractions of width and height.
    pub axes: [f64; 2],
    pub rotation_deg: f64,
}

impl Ellipse {
    /// Whether the pixel centre `(x + 0.5, y + 0.5)` lies inside.
    pub fn contains_pixel(&self, x: usize, y: usize, width: usize, height: usize) -> bool {
        self.contains_unit((x as f64 + 0.5) / width as f64, (y as f64 + 0.5) / height as f64, width, height)
    }

    pub fn contains_unit(&self, u: f64, v: f64, width: usize, height: usize) -> bool {
        let dx = (u - self.center[0]) * width as f64;
        let dy = (v - self.center[1]) * height as f64;
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let xr = dx * c + dy * s;
        let yr = -dx * s + dy * c;
        let ax = self.axes[0] * width as f64;
        let ay = self.axes[1] * height as f64;
        (xr / ax).powi(2) + (yr / ay).powi(2) <= 1.0
    }

    /// Unit-coordinate point at polar position `(rho, angle)` of the ellipse frame.
    fn point_at(&self, rho: f64, angle: f64, width: usize, height: usize) -> [f64; 2] {
        let (s, c) = self.rotation_deg.to_radians().sin_cos();
        let xr = rho * angle.cos() * self.axes[0] * width as f64;
        let yr = rho * angle.sin() * self.axes[1] * height as f64;
        let dx = xr * c - yr * s;
        let dy = xr * s + yr * c;
        [self.center[0] + dx / width as f64, self.center[1] + dy / height as f64]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Component {
    pub ellipse: Ellipse,
    /// Brightness above the background level, in `[0.2, 0.9]`.
    pub intensity_offset: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lesion {
    /// Index into `SceneSpec::components` (always a lobe).
    pub component: usize,
    pub center: [f64; 2],
    /// Radius as a fraction of the image width.
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    /// Ordered `(left lobe, right lobe, blob)`.
    pub components: Vec<Component>,
    pub background_level: f64,
    pub background_noise_level: f64,
    pub lesion_boost: f64,
    pub defect: Option<Lesion>,
    /// Seeds the pixel noise, shared by the lesion-free rendering of the same spec.
    pub jitter_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LayoutConfig {
    pub base: Vec<Component>,
    pub center_jitter: f64,
    pub axis_jitter: f64,
    pub rotation_jitter_deg: f64,
    pub intensity_jitter: f64,
    pub background_level: f64,
    pub noise_level: f64,
    /// Lesion radius range as fractions of the image width.
    pub lesion_radius: [f64; 2],
    pub lesion_boost: f64,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        let lobe = |x: f64| Component {
            ellipse: Ellipse { center: [x, 0.42], axes: [0.13, 0.24], rotation_deg: 0.0 },
            intensity_offset: 0.45,
        };
        Self {
            base: vec![
                lobe(0.30),
                lobe(0.70),
                Component {
                    ellipse: Ellipse { center: [0.5, 0.78], axes: [0.13, 0.10], rotation_deg: 0.0 },
                    intensity_offset: 0.65,
                },
            ],
            center_jitter: 0.03,
            axis_jitter: 0.02,
            rotation_jitter_deg: 8.0,
            intensity_jitter: 0.08,
            background_level: 0.1,
            noise_level: 0.04,
            lesion_radius: [0.045, 0.065],
            lesion_boost: 0.3,
        }
    }
}

impl LayoutConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base.len() != N_COMPONENTS {
            bail!(Config, "layout must define {N_COMPONENTS} components, found {}", self.base.len());
        }
        for (i, c) in self.base.iter().enumerate() {
            let e = &c.ellipse;
            for k in 0..2 {
                if e.center[k] - self.center_jitter <= 0.0 || e.center[k] + self.center_jitter >= 1.0 {
                    bail!(Config, "component {i}: centre jitter leaves the unit square");
                }
                if e.axes[k] - self.axis_jitter <= 0.05 || e.axes[k] + self.axis_jitter > 0.45 {
                    bail!(Config, "component {i}: axis jitter leaves (0.05, 0.45]");
                }
            }
            if c.intensity_offset - self.intensity_jitter < 0.2 || c.intensity_offset + self.intensity_jitter > 0.9 {
                bail!(Config, "component {i}: intensity jitter leaves [0.2, 0.9]");
            }
        }
        if !(0.0..=0.3).contains(&self.noise_level) {
            bail!(Config, "noise level {} outside [0, 0.3]", self.noise_level);
        }
        if self.center_jitter < 0.0 || self.axis_jitter < 0.0 || self.rotation_jitter_deg < 0.0 || self.intensity_jitter < 0.0 {
            bail!(Config, "jitter ranges must be non-negative");
        }
        if !(self.lesion_radius[0] > 0.0 && self.lesion_radius[0] <= self.lesion_radius[1]) {
            bail!(Config, "invalid lesion radius range");
        }
        Ok(())
    }
}

fn jitter(rng: &mut ChaCha8Rng, range: f64) -> f64 {
    if range > 0.0 {
        rng.gen_range(-range..=range)
    } else {
        0.0
    }
}

/// Draws one scene: base layout plus bounded jitter, and a lesion iff `class_label == 1`.
pub fn sample_spec(rng: &mut ChaCha8Rng, class_label: u8, layout: &LayoutConfig) -> Result<SceneSpec> {
    layout.validate()?;
    if class_label > 1 {
        bail!(Config, "class label must be 0 or 1");
    }
    let components: Vec<Component> = layout
        .base
        .iter()
        .map(|b| {
            let e = &b.ellipse;
            Component {
                ellipse: Ellipse {
                    center: [e.center[0] + jitter(rng, layout.center_jitter), e.center[1] + jitter(rng, layout.center_jitter)],
                    axes: [e.axes[0] + jitter(rng, layout.axis_jitter), e.axes[1] + jitter(rng, layout.axis_jitter)],
                    rotation_deg: e.rotation_deg + jitter(rng, layout.rotation_jitter_deg),
                },
                intensity_offset: b.intensity_offset + jitter(rng, layout.intensity_jitter),
            }
        })
        .collect();
    let jitter_seed: u64 = rng.gen();
    let defect = if class_label == 1 {
        let component = rng.gen_range(0..2usize);
        let rho = 0.6 * rng.gen::<f64>().sqrt();
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        // Square reference frame: the lesion centre is defined in unit coordinates.
        let center = components[component].ellipse.point_at(rho, angle, 1, 1);
        let radius = rng.gen_range(layout.lesion_radius[0]..=layout.lesion_radius[1]);
        Some(Lesion { component, center, radius })
    } else {
        None
    };
    Ok(SceneSpec {
        components,
        background_level: layout.background_level,
        background_noise_level: layout.noise_level,
        lesion_boost: layout.lesion_boost,
        defect,
        jitter_seed,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSample {
    pub width: usize,
    pub height: usize,
    /// 8-bit grayscale; real intensity is `pixel / 255`.
    pub pixels: Vec<u8>,
    /// One binary (0/1) map per component, in [`COMPONENT_NAMES`] order.
    pub masks: Vec<Vec<u8>>,
    pub label: u8,
    pub sample_id: u64,
}

impl SynthSample {
    pub fn image_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64 / 255.0).collect()
    }

    pub fn image_f32(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }

    pub fn mask_area(&self, c: usize) -> usize {
        self.masks[c].iter().filter(|&&m| m == 1).count()
    }
}

/// Rasterises a scene without anti-aliasing. Masks are exact ellipse indicators.
pub fn render_scene(spec: &SceneSpec, size: (usize, usize)) -> Result<SynthSample> {
    let (w, h) = size;
    if w < 32 || h < 32 {
        bail!(Generation, "image size {w}x{h} below the 32x32 minimum");
    }
    let n = w * h;
    let mut masks = vec![vec![0u8; n]; spec.components.len()];
    for (c, comp) in spec.components.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                if comp.ellipse.contains_pixel(x, y, w, h) {
                    masks[c][y * w + x] = 1;
                }
            }
        }
        if masks[c].iter().all(|&m| m == 0) {
            bail!(Generation, "component {c} lies entirely outside the frame");
        }
    }
    if masks.len() != N_COMPONENTS {
        bail!(Generation, "every one of the {N_COMPONENTS} component masks needs at least 1% of the pixels; scene has {} components", masks.len());
    }
    for (c, m) in masks.iter().enumerate() {
        let area = m.iter().filter(|&&v| v == 1).count();
        if area * 100 < n {
            bail!(Generation, "component {c} covers {area} pixels, below 1% of the image");
        }
    }

    let mut noise_rng = seed::rng(spec.jitter_seed, &[w as u64, h as u64]);
    let noise = Normal::new(0.0, spec.background_noise_level.max(0.0)).map_err(|e| Error::Generation(e.to_string()))?;
    let mut pixels = vec![0u8; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut v = spec.background_level;
            for (c, comp) in spec.components.iter().enumerate() {
                if masks[c][i] == 1 {
                    v = v.max(spec.background_level + comp.intensity_offset);
                }
            }
            if let Some(lesion) = &spec.defect {
                let dx = (x as f64 + 0.5) / w as f64 - lesion.center[0];
                let dy = ((y as f64 + 0.5) / h as f64 - lesion.center[1]) * h as f64 / w as f64;
                if (dx * dx + dy * dy).sqrt() <= lesion.radius {
                    v += spec.lesion_boost;
                }
            }
            let eps: f64 = if spec.background_noise_level > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
            pixels[i] = ((v + eps).clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(SynthSample { width: w, height: h, pixels, masks, label: u8::from(spec.defect.is_some()), sample_id: 0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Pretrain,
    ProbeTrain,
    ProbeTest,
    Exemplar,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Pretrain, Split::ProbeTrain, Split::ProbeTest, Split::Exemplar];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pretrain => "pretrain",
            Split::ProbeTrain => "probe_train",
            Split::ProbeTest => "probe_test",
            Split::Exemplar => "exemplar",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL.into_iter().find(|v| v.as_str() == s).ok_or_else(|| Error::Format(format!("unknown split tag {s}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub pretrain: f64,
    pub probe_train: f64,
    pub probe_test: f64,
    pub exemplar: f64,
}

impl Default for SplitFractions {
    /// 256 / 40 / 200 / 16 of 512 samples.
    fn default() -> Self {
        Self { pretrain: 0.5, probe_train: 0.078125, probe_test: 0.390625, exemplar: 0.03125 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_samples: usize,
    pub size: usize,
    /// Fraction of label-1 samples in every split.
    pub class_balance: f64,
    pub split_fractions: SplitFractions,
    pub layout: LayoutConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { seed: 0, n_samples: 512, size: 64, class_balance: 0.5, split_fractions: SplitFractions::default(), layout: LayoutConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub samples: Vec<SynthSample>,
    pub split_tags: Vec<Split>,
    pub generation_seed: u64,
}

impl Corpus {
    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.split_tags.iter().enumerate().filter(|(_, &s)| s == split).map(|(i, _)| i).collect()
    }

    pub fn split(&self, split: Split) -> Vec<&SynthSample> {
        self.ids(split).into_iter().map(|i| &self.samples[i]).collect()
    }

    /// The registration exemplar: the first label-0 sample of the exemplar split.
    pub fn exemplar(&self) -> Result<&SynthSample> {
        self.split(Split::Exemplar)
            .into_iter()
            .find(|s| s.label == 0)
            .ok_or_else(|| Error::Missing("exemplar split has no label-0 sample".into()))
    }
}

fn split_counts(n: usize, f: &SplitFractions) -> Result<BTreeMap<Split, usize>> {
    let fr = [f.pretrain, f.probe_train, f.probe_test, f.exemplar];
    if fr.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        bail!(Config, "split fractions must lie in [0, 1] and sum to 1");
    }
    let probe_train = (f.probe_train * n as f64).round() as usize;
    let probe_test = (f.probe_test * n as f64).round() as usize;
    let exemplar = (f.exemplar * n as f64).round() as usize;
    let used = probe_train + probe_test + exemplar;
    if used > n {
        bail!(Config, "split fractions round to more than {n} samples");
    }
    Ok(BTreeMap::from([
        (Split::Pretrain, n - used),
        (Split::ProbeTrain, probe_train),
        (Split::ProbeTest, probe_test),
        (Split::Exemplar, exemplar),
    ]))
}

/// Renders one corpus sample from its id alone.
pub fn generate_sample(config: &CorpusConfig, sample_id: u64, label: u8) -> Result<SynthSample> {
    let mut rng = seed::rng(config.seed, &[0x5A4D, sample_id]);
    let spec = sample_spec(&mut rng, label, &config.layout)?;
    let mut s = render_scene(&spec, (config.size, config.size))?;
    s.sample_id = sample_id;
    Ok(s)
}

/// Assigns splits and labels, then renders every sample with an rng derived
/// from `(seed, sample_id)`.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    let n = config.n_samples;
    if n < 8 {
        bail!(Config, "corpus needs at least 8 samples, got {n}");
    }
    if !(0.0..=1.0).contains(&config.class_balance) {
        bail!(Config, "class balance must lie in [0, 1]");
    }
    config.layout.validate()?;
    let counts = split_counts(n, &config.split_fractions)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(config.seed, &[0x5B17]));
    let mut split_tags = vec![Split::Pretrain; n];
    let mut labels = vec![0u8; n];
    let mut cursor = 0;
    for (&split, &count) in &counts {
        let mut members: Vec<usize> = order[cursor..cursor + count].to_vec();
        cursor += count;
        members.sort_unstable();
        let positives = (config.class_balance * count as f64).round() as usize;
        if count > 0 && (positives == 0 || positives == count) {
            bail!(Config, "class balance {} leaves split {} ({count} samples) with a single class", config.class_balance, split.as_str());
        }
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut seed::rng(config.seed, &[0x1AB, split as u64]));
        for &i in &shuffled[..positives] {
            labels[i] = 1;
        }
        for &i in &members {
            split_tags[i] = split;
        }
    }
    let samples = (0..n).map(|i| generate_sample(config, i as u64, labels[i])).collect::<Result<Vec<_>>>()?;
    Ok(Corpus { samples, split_tags, generation_seed: config.seed })
}

const MANIFEST: &str = "manifest.tsv";

/// Writes one P5 PGM per image and per mask plus a tab-separated manifest
/// (`sample_id label split image mask_0 mask_1 mask_2`).
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = String::from("# sample_id\tlabel\tsplit\timage\tmasks\n");
    manifest.push_str(&format!("# generation_seed={}\n", corpus.generation_seed));
    for (s, tag) in corpus.samples.iter().zip(&corpus.split_tags) {
        let img_rel = format!("images/{:05}.pgm", s.sample_id);
        pgm::write(&dir.join(&img_rel), &GrayImage { width: s.width, height: s.height, pixels: s.pixels.clone() })?;
        let mut line = format!("{}\t{}\t{}\t{}", s.sample_id, s.label, tag.as_str(), img_rel);
        for (c, m) in s.masks.iter().enumerate() {
            let rel = format!("masks/{:05}_{}.pgm", s.sample_id, COMPONENT_NAMES[c]);
            let px = m.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
            pgm::write(&dir.join(&rel), &GrayImage { width: s.width, height: s.height, pixels: px })?;
            line.push('\t');
            line.push_str(&rel);
        }
        manifest.push_str(&line);
        manifest.push('\n');
    }
    crate::io::write_atomic(&dir.join(MANIFEST), manifest.as_bytes())?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(dir.join(MANIFEST)).map_err(|e| Error::Missing(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    let mut samples = Vec::new();
    let mut split_tags = Vec::new();
    let mut generation_seed = 0;
    for line in text.lines() {
        if let Some(rest) = line.strip_prefix("# generation_seed=") {
            generation_seed = rest.trim().parse().map_err(|_| Error::Format("bad generation seed".into()))?;
            continue;
        }
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 + N_COMPONENTS {
            bail!(Format, "manifest line has {} columns", cols.len());
        }
        let sample_id: u64 = cols[0].parse().map_err(|_| Error::Format(format!("bad sample id {}", cols[0])))?;
        let label: u8 = cols[1].parse().map_err(|_| Error::Format(format!("bad label {}", cols[1])))?;
        let img = pgm::read(&dir.join(cols[3]))?;
        let masks = cols[4..]
            .iter()
            .map(|rel| pgm::read(&dir.join(rel)).map(|m| m.pixels.iter().map(|&v| u8::from(v > 127)).collect()))
            .collect::<Result<Vec<_>>>()?;
        samples.push(SynthSample { width: img.width, height: img.height, pixels: img.pixels, masks, label, sample_id });
        split_tags.push(Split::parse(cols[2])?);
    }
    Ok(Corpus { samples, split_tags, generation_seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn zero_jitter() -> LayoutConfig {
        LayoutConfig { center_jitter: 0.0, axis_jitter: 0.0, rotation_jitter_deg: 0.0, intensity_jitter: 0.0, ..LayoutConfig::default() }
    }

    #[test]
    fn zero_jitter_reproduces_base_layout() {
        let layout = zero_jitter();
        let spec = sample_spec(&mut ChaCha8Rng::seed_from_u64(3), 0, &layout).unwrap();
        assert_eq!(spec.components, layout.base);
        assert!(spec.defect.is_none());
    }

    #[test]
    fn same_rng_state_gives_same_spec() {
        let layout = LayoutConfig::default();
        let a = sample_spec(&mut ChaCha8Rng::seed_from_u64(9), 1, &layout).unwrap();
        let b = sample_spec(&mut ChaCha8Rng::seed_from_u64(9), 1, &layout).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lesion_centre_lies_in_its_lobe() {
        let layout = LayoutConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let spec = sample_spec(&mut rng, 1, &layout).unwrap();
            let d = spec.defect.expect("class 1 has a lesion");
            assert!(d.component < 2);
            let e = &spec.components[d.component].ellipse;
            assert!(e.contains_unit(d.center[0], d.center[1], 1, 1));
        }
    }

    #[test]
    fn excessive_jitter_is_a_configuration_error() {
        let layout = LayoutConfig { center_jitter: 0.5, ..LayoutConfig::default() };
        assert!(matches!(sample_spec(&mut ChaCha8Rng::seed_from_u64(0), 0, &layout), Err(Error::Config(_))));
    }

    #[test]
    fn centred_disc_matches_analytic_area() {
        let r = 0.25;
        let disc = Component { ellipse: Ellipse { center: [0.5, 0.5], axes: [r, r], rotation_deg: 0.0 }, intensity_offset: 0.5 };
        let spec = SceneSpec {
            components: vec![disc; 3],
            background_level: 0.0,
            background_noise_level: 0.0,
            lesion_boost: 0.0,
            defect: None,
            jitter_seed: 0,
        };
        let s = render_scene(&spec, (64, 64)).unwrap();
        let radius_px = r * 64.0;
        let analytic = std::f64::consts::PI * radius_px * radius_px;
        let perimeter = 2.0 * std::f64::consts::PI * radius_px;
        let area = s.mask_area(0) as f64;
        assert!((area - analytic).abs() <= perimeter, "{area} vs {analytic}");
        let inside = (0.5f64 * 255.0).round() as u8;
        for i in 0..64 * 64 {
            assert_eq!(s.pixels[i], if s.masks[0][i] == 1 { inside } else { 0 });
        }
    }

    #[test]
    fn empty_scene_is_rejected() {
        let spec = SceneSpec {
            components: vec![],
            background_level: 0.1,
            background_noise_level: 0.05,
            lesion_boost: 0.0,
            defect: None,
            jitter_seed: 4,
        };
        assert!(matches!(render_scene(&spec, (32, 32)), Err(Error::Generation(_))));
    }

    #[test]
    fn component_outside_frame_is_rejected() {
        let mut spec = sample_spec(&mut ChaCha8Rng::seed_from_u64(2), 0, &LayoutConfig::default()).unwrap();
        spec.components[2].ellipse.center = [3.0, 3.0];
        assert!(matches!(render_scene(&spec, (64, 64)), Err(Error::Generation(_))));
    }

    #[test]
    fn rendering_is_deterministic() {
        let spec = sample_spec(&mut ChaCha8Rng::seed_from_u64(5), 1, &LayoutConfig::default()).unwrap();
        assert_eq!(render_scene(&spec, (64, 64)).unwrap(), render_scene(&spec, (64, 64)).unwrap());
    }

    #[test]
    fn lesion_changes_enough_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let spec = sample_spec(&mut rng, 1, &LayoutConfig::default()).unwrap();
            let with = render_scene(&spec, (64, 64)).unwrap();
            let without = render_scene(&SceneSpec { defect: None, ..spec.clone() }, (64, 64)).unwrap();
            let changed = with.pixels.iter().zip(&without.pixels).filter(|(a, b)| a != b).count();
            assert!(changed >= 9, "{changed}");
            assert_eq!(with.label, 1);
            assert_eq!(without.label, 0);
        }
    }

    fn small_config(n: usize) -> CorpusConfig {
        CorpusConfig {
            n_samples: n,
            split_fractions: SplitFractions { pretrain: 0.25, probe_train: 0.25, probe_test: 0.25, exemplar: 0.25 },
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn exact_balance_on_eight_samples() {
        let c = generate_corpus(&small_config(8)).unwrap();
        assert_eq!(c.samples.iter().filter(|s| s.label == 1).count(), 4);
        assert!(c.exemplar().is_ok());
    }

    #[test]
    fn single_class_split_is_an_error() {
        let cfg = CorpusConfig { class_balance: 0.0, ..small_config(8) };
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn same_seed_gives_identical_corpus_and_disk_roundtrip() {
        let a = generate_corpus(&small_config(12)).unwrap();
        let b = generate_corpus(&small_config(12)).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&a, dir.path()).unwrap();
        assert_eq!(load_corpus(dir.path()).unwrap(), a);
    }

    #[test]
    fn sample_is_independent_of_generation_order() {
        let cfg = small_config(16);
        let c = generate_corpus(&cfg).unwrap();
        let s = &c.samples[11];
        assert_eq!(&generate_sample(&cfg, 11, s.label).unwrap(), s);
    }

    #[test]
    fn default_split_sizes() {
        let counts = split_counts(512, &SplitFractions::default()).unwrap();
        assert_eq!(counts[&Split::Pretrain], 256);
        assert_eq!(counts[&Split::ProbeTrain], 40);
        assert_eq!(counts[&Split::ProbeTest], 200);
        assert_eq!(counts[&Split::Exemplar], 16);
    }
}
