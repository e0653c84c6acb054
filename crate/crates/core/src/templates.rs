//! Knowledge templates: triangle heuristics, averaged masks and masks carried
//! over from a single annotated exemplar by deformable registration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bspline::{self, RegistrationConfig};
use crate::error::{bail, Error, Result};
use crate::io;
use crate::pgm::{self, GrayImage};
use crate::span_reg::{KnowledgeTemplate, TemplateKind};
use crate::synthdata::{Corpus, Split, SynthSample, COMPONENT_NAMES};

/// Vertex triple in unit image coordinates.
pub type Triangle = [[f64; 2]; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeuristicLayout {
    /// Left, right, center, in component order.
    pub triangles: Vec<Triangle>,
}

impl Default for HeuristicLayout {
    /// Two upright triangles over the lobes and an inverted one over the blob.
    /// Horizontal edges fall on pixel boundaries of a 64 pixel grid.
    fn default() -> Self {
        Self {
            triangles: vec![
                [[0.296875, 0.15625], [0.15625, 0.6875], [0.4375, 0.6875]],
                [[0.703125, 0.15625], [0.5625, 0.6875], [0.84375, 0.6875]],
                [[0.34375, 0.6875], [0.65625, 0.6875], [0.5, 0.921875]],
            ],
        }
    }
}

/// Twice the signed area, in whatever units the vertices use.
fn cross(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

/// Shoelace area in unit coordinates.
pub fn triangle_area(t: &Triangle) -> f64 {
    cross(t[0], t[1], t[2]).abs() / 2.0
}

/// Pixels whose centre lies inside or on the triangle.
pub fn rasterize_triangle(t: &Triangle, width: usize, height: usize) -> Result<Vec<u8>> {
    if triangle_area(t) < 1e-12 {
        bail!(Domain, "degenerate triangle {t:?}");
    }
    let sign = cross(t[0], t[1], t[2]).signum();
    let mut out = vec![0u8; width * height];
    for y in 0..height {
        let v = (y as f64 + 0.5) / height as f64;
        for x in 0..width {
            let p = [(x as f64 + 0.5) / width as f64, v];
            let inside = (0..3).all(|i| sign * cross(t[i], t[(i + 1) % 3], p) >= -1e-12);
            out[y * width + x] = u8::from(inside);
        }
    }
    Ok(out)
}

pub fn spatial_heuristic_template(width: usize, height: usize, layout: &HeuristicLayout) -> Result<KnowledgeTemplate> {
    if layout.triangles.len() != COMPONENT_NAMES.len() {
        bail!(Config, "heuristic layout needs {} triangles, got {}", COMPONENT_NAMES.len(), layout.triangles.len());
    }
    let components = layout
        .triangles
        .iter()
        .zip(COMPONENT_NAMES)
        .map(|(t, name)| Ok((name.to_string(), rasterize_triangle(t, width, height)?)))
        .collect::<Result<Vec<_>>>()?;
    KnowledgeTemplate::new(width, height, components, TemplateKind::SpatialHeuristic, "global")
}

/// Pixelwise mean of each component over the sources, kept where it strictly
/// exceeds `threshold`.
pub fn global_average_template(sources: &[&[Vec<u8>]], width: usize, height: usize, threshold: f64) -> Result<KnowledgeTemplate> {
    if sources.len() < 2 {
        bail!(Missing, "global average needs at least two mask sets, got {}", sources.len());
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        bail!(Config, "threshold {threshold} outside (0, 1)");
    }
    let n_comp = sources[0].len();
    let mut components = Vec::with_capacity(n_comp);
    for c in 0..n_comp {
        let mut sum = vec![0u32; width * height];
        for s in sources {
            let Some(m) = s.get(c).filter(|m| m.len() == width * height) else {
                bail!(Shape, "mask set lacks a {width}x{height} component {c}");
            };
            sum.iter_mut().zip(m).for_each(|(a, &b)| *a += u32::from(b));
        }
        let n = sources.len() as f64;
        let name = COMPONENT_NAMES.get(c).map_or_else(|| format!("component_{c}"), |s| s.to_string());
        components.push((name, sum.iter().map(|&v| u8::from(v as f64 / n > threshold)).collect()));
    }
    KnowledgeTemplate::new(width, height, components, TemplateKind::GlobalAverage, "global")
}

/// Registers the exemplar image onto the target and warps its masks along.
pub fn deformable_template(exemplar: &SynthSample, target_image: &[f64], target_id: u64, config: &RegistrationConfig) -> Result<(KnowledgeTemplate, bspline::ControlGrid)> {
    let (w, h) = (exemplar.width, exemplar.height);
    if target_image.len() != w * h {
        bail!(Shape, "target has {} pixels, exemplar is {w}x{h}", target_image.len());
    }
    let (grid, _) = bspline::register(target_image, &exemplar.image_f64(), w, h, config)?;
    let components = exemplar
        .masks
        .iter()
        .zip(COMPONENT_NAMES)
        .map(|(m, name)| Ok((name.to_string(), bspline::warp_mask(m, &grid)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok((KnowledgeTemplate::new(w, h, components, TemplateKind::Deformable, target_id.to_string())?, grid))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateConfig {
    pub heuristic: HeuristicLayout,
    pub average_threshold: f64,
    pub registration: RegistrationConfig,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self { heuristic: HeuristicLayout::default(), average_threshold: 0.5, registration: RegistrationConfig::default() }
    }
}

/// Either one template shared by every sample or one per pretraining sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateSet {
    pub kind: TemplateKind,
    pub shared: Option<KnowledgeTemplate>,
    pub per_sample: BTreeMap<u64, KnowledgeTemplate>,
}

impl TemplateSet {
    pub fn for_sample(&self, sample_id: u64) -> Option<&KnowledgeTemplate> {
        self.shared.as_ref().or_else(|| self.per_sample.get(&sample_id))
    }

    pub fn len(&self) -> usize {
        if self.shared.is_some() {
            1
        } else {
            self.per_sample.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn templates(&self) -> Vec<&KnowledgeTemplate> {
        self.shared.iter().chain(self.per_sample.values()).collect()
    }

    /// One PGM per component per template plus `templates.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for t in self.templates() {
            let mut files = Vec::new();
            for (name, m) in &t.components {
                let rel = format!("{}_{name}.pgm", t.alignment_id);
                let pixels = m.iter().map(|&v| if v == 1 { 255 } else { 0 }).collect();
                pgm::write(&dir.join(&rel), &GrayImage { width: t.width, height: t.height, pixels })?;
                files.push((name.clone(), rel));
            }
            entries.push(ManifestEntry { alignment_id: t.alignment_id.clone(), width: t.width, height: t.height, components: files });
        }
        let manifest = Manifest { kind: self.kind.as_str().into(), shared: self.shared.is_some(), templates: entries };
        io::write_atomic(&dir.join("templates.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("templates.json");
        let manifest: Manifest = serde_json::from_slice(&fs::read(&path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?)?;
        let kind = TemplateKind::parse(&manifest.kind)?;
        let mut set = TemplateSet { kind, shared: None, per_sample: BTreeMap::new() };
        for e in manifest.templates {
            let components = e
                .components
                .into_iter()
                .map(|(name, rel)| Ok((name, pgm::read(&dir.join(rel))?.pixels.iter().map(|&v| u8::from(v > 127)).collect())))
                .collect::<Result<Vec<_>>>()?;
            let t = KnowledgeTemplate::new(e.width, e.height, components, kind, e.alignment_id.clone())?;
            if manifest.shared {
                set.shared = Some(t);
            } else {
                let id = e.alignment_id.parse().map_err(|_| Error::Format(format!("bad alignment id {}", e.alignment_id)))?;
                set.per_sample.insert(id, t);
            }
        }
        Ok(set)
    }
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    alignment_id: String,
    width: usize,
    height: usize,
    components: Vec<(String, String)>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    kind: String,
    shared: bool,
    templates: Vec<ManifestEntry>,
}

/// Directory under `cache_root` holding templates of `kind` for this corpus
/// and configuration.
pub fn cache_dir(cache_root: &Path, kind: TemplateKind, corpus: &Corpus, config: &TemplateConfig) -> Result<PathBuf> {
    let key = match kind {
        TemplateKind::SpatialHeuristic => io::hash_json(&(&config.heuristic, corpus.samples.first().map(|s| s.width)))?,
        TemplateKind::GlobalAverage => io::hash_json(&(corpus.generation_seed, corpus.samples.len(), config.average_threshold))?,
        TemplateKind::Deformable => io::hash_json(&(corpus.generation_seed, corpus.samples.len(), &config.registration))?,
    };
    Ok(cache_root.join(format!("{}-{key}", kind.as_str())))
}

/// Builds the templates of one kind, reading and writing `cache_root` when given.
///
/// The global average uses the ground-truth masks of the exemplar split as
/// its mask source; the deformable kind registers the exemplar to every
/// pretraining image.
pub fn build_template_set(kind: TemplateKind, corpus: &Corpus, config: &TemplateConfig, cache_root: Option<&Path>) -> Result<TemplateSet> {
    let cached = cache_root.map(|root| cache_dir(root, kind, corpus, config)).transpose()?;
    if let Some(dir) = &cached {
        if dir.join("templates.json").exists() {
            return TemplateSet::load(dir);
        }
    }
    let first = corpus.samples.first().ok_or_else(|| Error::Missing("empty corpus".into()))?;
    let (w, h) = (first.width, first.height);
    let set = match kind {
        TemplateKind::SpatialHeuristic => {
            TemplateSet { kind, shared: Some(spatial_heuristic_template(w, h, &config.heuristic)?), per_sample: BTreeMap::new() }
        }
        TemplateKind::GlobalAverage => {
            let held_out = corpus.split(Split::Exemplar);
            let sources: Vec<&[Vec<u8>]> = held_out.iter().map(|s| s.masks.as_slice()).collect();
            TemplateSet { kind, shared: Some(global_average_template(&sources, w, h, config.average_threshold)?), per_sample: BTreeMap::new() }
        }
        TemplateKind::Deformable => {
            let exemplar = corpus.exemplar()?;
            let mut per_sample = BTreeMap::new();
            for s in corpus.split(Split::Pretrain) {
                let (t, _) = deformable_template(exemplar, &s.image_f64(), s.sample_id, &config.registration)?;
                per_sample.insert(s.sample_id, t);
            }
            TemplateSet { kind, shared: None, per_sample }
        }
    };
    if let Some(dir) = &cached {
        set.save(dir)?;
    }
    Ok(set)
}

/// Intersection over union of two binary masks; 1 when both are empty.
pub fn iou(a: &[u8], b: &[u8]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x == 1 && y == 1);
        union += usize::from(x == 1 || y == 1);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean over pretraining samples and components of IoU against ground truth.
pub fn mean_iou(set: &TemplateSet, corpus: &Corpus) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for s in corpus.split(Split::Pretrain) {
        let t = set.for_sample(s.sample_id).ok_or_else(|| Error::Missing(format!("no template for sample {}", s.sample_id)))?;
        for (m, gt) in t.maps().zip(&s.masks) {
            total += iou(m, gt);
            n += 1;
        }
    }
    if n == 0 {
        bail!(Missing, "no pretraining samples");
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_corpus, CorpusConfig, Ellipse};

    #[test]
    fn full_cover_triangle() {
        let t = [[-1.0, -1.0], [3.0, -1.0], [-1.0, 3.0]];
        assert!(rasterize_triangle(&t, 16, 12).unwrap().iter().all(|&v| v == 1));
        assert!(rasterize_triangle(&[[0.1, 0.1], [0.5, 0.5], [0.9, 0.9]], 16, 16).is_err());
    }

    #[test]
    fn mirrored_triangles_mirror() {
        let left: Triangle = [[0.25, 0.125], [0.125, 0.625], [0.375, 0.625]];
        let right = left.map(|p| [1.0 - p[0], p[1]]);
        let (a, b) = (rasterize_triangle(&left, 64, 64).unwrap(), rasterize_triangle(&right, 64, 64).unwrap());
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(a[y * 64 + x], b[y * 64 + 63 - x]);
            }
        }
    }

    #[test]
    fn default_layout_area_matches_shoelace() {
        let layout = HeuristicLayout::default();
        let t = spatial_heuristic_template(64, 64, &layout).unwrap();
        for (tri, m) in layout.triangles.iter().zip(t.maps()) {
            let expect = triangle_area(tri) * 64.0 * 64.0;
            let got = m.iter().map(|&v| v as f64).sum::<f64>();
            assert!((got - expect).abs() <= 0.02 * expect, "{got} vs {expect}");
        }
    }

    #[test]
    fn average_of_identical_masks() {
        let m = vec![vec![0, 1, 1, 0], vec![1, 0, 0, 0]];
        let sources: Vec<&[Vec<u8>]> = vec![&m, &m, &m];
        for th in [0.1, 0.5, 0.99] {
            let t = global_average_template(&sources, 2, 2, th).unwrap();
            assert_eq!(t.components[0].1, m[0]);
            assert_eq!(t.components[1].1, m[1]);
        }
    }

    #[test]
    fn disjoint_average_is_rejected() {
        let (a, b) = (vec![vec![1, 1, 0, 0]], vec![vec![0, 0, 1, 1]]);
        assert!(global_average_template(&[&a, &b], 2, 2, 0.5).is_err());
        assert!(global_average_template(&[&a], 2, 2, 0.5).is_err());
    }

    #[test]
    fn average_area_within_sample_range() {
        let mut rng = crate::seed::rng(9, &[]);
        use rand::Rng;
        let sets: Vec<Vec<Vec<u8>>> = (0..64)
            .map(|_| {
                let e = Ellipse {
                    center: [0.5 + rng.gen_range(-0.05..0.05), 0.5 + rng.gen_range(-0.05..0.05)],
                    axes: [0.2 + rng.gen_range(-0.04..0.04), 0.25 + rng.gen_range(-0.04..0.04)],
                    rotation_deg: rng.gen_range(-10.0..10.0),
                };
                vec![(0..64 * 64).map(|i| u8::from(e.contains_pixel(i % 64, i / 64, 64, 64))).collect()]
            })
            .collect();
        let refs: Vec<&[Vec<u8>]> = sets.iter().map(|s| s.as_slice()).collect();
        let t = global_average_template(&refs, 64, 64, 0.5).unwrap();
        let area = |m: &[u8]| m.iter().filter(|&&v| v == 1).count();
        let areas: Vec<usize> = sets.iter().map(|s| area(&s[0])).collect();
        let a = area(&t.components[0].1);
        assert!(a >= *areas.iter().min().unwrap() && a <= *areas.iter().max().unwrap());
    }

    fn small_corpus() -> Corpus {
        generate_corpus(&CorpusConfig { n_samples: 48, ..CorpusConfig::default() }).unwrap()
    }

    #[test]
    fn self_target_reproduces_exemplar() {
        let corpus = small_corpus();
        let ex = corpus.exemplar().unwrap();
        let (t, grid) = deformable_template(ex, &ex.image_f64(), ex.sample_id, &RegistrationConfig::default()).unwrap();
        assert!(grid.field_rms() < 0.5);
        for (m, gt) in t.maps().zip(&ex.masks) {
            assert_eq!(iou(m, gt), 1.0);
        }
    }

    fn centroid(m: &[u8], w: usize) -> [f64; 2] {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (i, &v) in m.iter().enumerate() {
            if v == 1 {
                sx += (i % w) as f64;
                sy += (i / w) as f64;
                n += 1.0;
            }
        }
        [sx / n, sy / n]
    }

    #[test]
    fn translation_moves_centroids() {
        let corpus = small_corpus();
        let ex = corpus.exemplar().unwrap();
        let (w, h) = (ex.width, ex.height);
        let img = ex.image_f64();
        let target: Vec<f64> = (0..w * h).map(|i| img[(i / w) * w + (i % w).saturating_sub(3)]).collect();
        let (t, _) = deformable_template(ex, &target, 0, &RegistrationConfig::default()).unwrap();
        for (m, gt) in t.maps().zip(&ex.masks) {
            let (a, b) = (centroid(m, w), centroid(gt, w));
            assert!((a[0] - b[0] - 3.0).abs() <= 0.5 && (a[1] - b[1]).abs() <= 0.5, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn specificity_ordering_and_cache() {
        let corpus = small_corpus();
        let cfg = TemplateConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let sets: Vec<TemplateSet> = TemplateKind::ALL.iter().map(|&k| build_template_set(k, &corpus, &cfg, Some(dir.path())).unwrap()).collect();
        let n_pre = corpus.ids(Split::Pretrain).len();
        assert_eq!(sets[0].len(), 1);
        assert_eq!(sets[2].len(), n_pre);
        let ious: Vec<f64> = sets.iter().map(|s| mean_iou(s, &corpus).unwrap()).collect();
        assert!(ious[0] <= ious[1] && ious[1] <= ious[2], "{ious:?}");
        for (k, s) in TemplateKind::ALL.iter().zip(&sets) {
            assert_eq!(&build_template_set(*k, &corpus, &cfg, Some(dir.path())).unwrap(), s);
        }
    }
}
