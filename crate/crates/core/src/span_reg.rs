//! Attention regularisation toward binary knowledge maps.
//!
//! Each template component is tied to one attention head. For an assigned
//! pair the `[CLS]` attention mass inside the component is rewarded and the
//! mass outside is penalised:
//!
//! ```text
//! loss = sum over (c, h) of  lambda_excl * sum_j a_hj (1 - k_cj)  -  lambda_incl * sum_j a_hj k_cj
//! ```
//!
//! averaged over regularised views. The opposite convention,
//! `+lambda_incl * inside - lambda_excl * outside`, is available as
//! [`SignMode::Inverted`]. Heads without an assignment are left free.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::io::CsvTable;
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    SpatialHeuristic,
    GlobalAverage,
    Deformable,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 3] = [TemplateKind::SpatialHeuristic, TemplateKind::GlobalAverage, TemplateKind::Deformable];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateKind::SpatialHeuristic => "spatial_heuristic",
            TemplateKind::GlobalAverage => "global_average",
            TemplateKind::Deformable => "deformable",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| Error::Config(format!("unknown template kind {s}")))
    }
}

/// Ordered named binary component maps sharing one size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeTemplate {
    pub width: usize,
    pub height: usize,
    pub components: Vec<(String, Vec<u8>)>,
    pub source_kind: TemplateKind,
    /// Sample id the template was registered to, or `"global"`.
    pub alignment_id: String,
}

impl KnowledgeTemplate {
    pub fn new(width: usize, height: usize, components: Vec<(String, Vec<u8>)>, source_kind: TemplateKind, alignment_id: impl Into<String>) -> Result<Self> {
        let t = Self { width, height, components, source_kind, alignment_id: alignment_id.into() };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            bail!(Shape, "template has no components");
        }
        for (name, map) in &self.components {
            if map.len() != self.width * self.height {
                bail!(Shape, "component {name} has {} pixels, expected {}x{}", map.len(), self.width, self.height);
            }
            if map.iter().any(|&v| v > 1) {
                bail!(Domain, "component {name} is not binary");
            }
            if map.iter().all(|&v| v == 0) {
                bail!(Domain, "component {name} is empty");
            }
        }
        Ok(())
    }

    pub fn maps(&self) -> impl Iterator<Item = &[u8]> {
        self.components.iter().map(|(_, m)| m.as_slice())
    }
}

/// Component `c` regularises head `h` for every `(c, h)` pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadAssignment {
    pub pairs: Vec<(usize, usize)>,
    pub n_heads: usize,
}

impl HeadAssignment {
    pub fn new(pairs: Vec<(usize, usize)>, n_heads: usize) -> Result<Self> {
        if pairs.len() > n_heads {
            bail!(Config, "{} assignments for {n_heads} heads", pairs.len());
        }
        let mut seen = vec![false; n_heads];
        for &(_, h) in &pairs {
            if h >= n_heads {
                bail!(Config, "head {h} out of range for {n_heads} heads");
            }
            if std::mem::replace(&mut seen[h], true) {
                bail!(Config, "head {h} assigned twice");
            }
        }
        Ok(Self { pairs, n_heads })
    }

    /// Component `i` to head `i`.
    pub fn ascending(n_components: usize, n_heads: usize) -> Result<Self> {
        Self::new((0..n_components).map(|i| (i, i)).collect(), n_heads)
    }

    /// Component `i` to head `heads[i]`.
    pub fn from_heads(heads: &[usize], n_heads: usize) -> Result<Self> {
        Self::new(heads.iter().copied().enumerate().collect(), n_heads)
    }

    pub fn head_for(&self, component: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(c, _)| c == component).map(|&(_, h)| h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Resolution {
    PatchGrid,
    Pixel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegTarget {
    Student,
    Teacher,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignMode {
    /// Reward mass inside, penalise mass outside.
    Focus,
    /// `+lambda_incl * inside - lambda_excl * outside`.
    Inverted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    pub lambda_incl: f64,
    pub lambda_excl: f64,
    pub resolution: Resolution,
    pub target: RegTarget,
    pub sign_mode: SignMode,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self { lambda_incl: 1e-2, lambda_excl: 1e-2, resolution: Resolution::PatchGrid, target: RegTarget::Student, sign_mode: SignMode::Focus }
    }
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_incl >= 0.0 && self.lambda_excl >= 0.0 && self.lambda_incl.is_finite() && self.lambda_excl.is_finite()) {
            bail!(Config, "regularisation strengths must be finite and non-negative");
        }
        Ok(())
    }

    pub fn is_inactive(&self) -> bool {
        self.lambda_incl == 0.0 && self.lambda_excl == 0.0
    }

    /// `(weight on inside mass, weight on outside mass)` in the loss.
    fn coefficients(&self) -> (f64, f64) {
        match self.sign_mode {
            SignMode::Focus => (-self.lambda_incl, self.lambda_excl),
            SignMode::Inverted => (self.lambda_incl, -self.lambda_excl),
        }
    }
}

/// Block mean of a binary map over `p x p` patches, row-major on the patch grid.
pub fn downsample_map_to_patches(map: &[u8], width: usize, height: usize, p: usize) -> Result<Vec<f64>> {
    if p == 0 || width % p != 0 || height % p != 0 {
        bail!(Shape, "{width}x{height} map not divisible into {p}x{p} patches");
    }
    if map.len() != width * height {
        bail!(Shape, "map has {} pixels, expected {width}x{height}", map.len());
    }
    let (gw, gh) = (width / p, height / p);
    let mut out = vec![0.0; gw * gh];
    for y in 0..height {
        for x in 0..width {
            out[(y / p) * gw + x / p] += map[y * width + x] as f64;
        }
    }
    let area = (p * p) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    Ok(out)
}

fn check_len(a: usize, k: usize) -> Result<()> {
    if a != k {
        bail!(Shape, "attention has {a} entries but map has {k}");
    }
    Ok(())
}

/// `sum a * k`.
pub fn inclusion_sum(a: &[f64], k: &[f64]) -> Result<f64> {
    check_len(a.len(), k.len())?;
    Ok(a.iter().zip(k).map(|(a, k)| a * k).sum())
}

/// `sum a * (1 - k)`.
pub fn exclusion_sum(a: &[f64], k: &[f64]) -> Result<f64> {
    check_len(a.len(), k.len())?;
    Ok(a.iter().zip(k).map(|(a, k)| a * (1.0 - k)).sum())
}

/// Knowledge maps of one regularised view, already carried through the
/// view's geometric recipe. `maps[c]` is `side x side`.
#[derive(Debug, Clone)]
pub struct ViewMaps {
    pub side: usize,
    pub maps: Vec<Vec<u8>>,
}

/// Per-cell weights of one component on the patch grid: the block mean in
/// patch mode, the pixel count in pixel mode.
fn cell_weights(view: &ViewMaps, c: usize, patch: usize, resolution: Resolution) -> Result<Vec<f64>> {
    let mut w = downsample_map_to_patches(&view.maps[c], view.side, view.side, patch)?;
    if resolution == Resolution::Pixel {
        let area = (patch * patch) as f64;
        w.iter_mut().for_each(|v| *v *= area);
    }
    Ok(w)
}

pub struct SpanLoss<T> {
    pub loss: f64,
    /// d(loss)/d(cls rows), `[view, head, seq]`; zero for the `[CLS]` entry
    /// and unassigned heads.
    pub grad: Vec<T>,
}

/// Regularisation loss over `n_views` views.
///
/// `rows` holds the last-layer `[CLS]` attention rows `[view, head, seq]`
/// (entry 0 of each row is the `[CLS]`-to-`[CLS]` weight). `views[v]` carries
/// the co-transformed component maps of view `v`.
pub fn combine_span_loss<T: Scalar>(
    rows: &[T],
    n_heads: usize,
    seq: usize,
    views: &[ViewMaps],
    patch: usize,
    assignment: &HeadAssignment,
    config: &RegularizerConfig,
) -> Result<SpanLoss<T>> {
    config.validate()?;
    let n_views = views.len();
    if n_views == 0 || rows.len() != n_views * n_heads * seq {
        bail!(Shape, "attention rows do not match {n_views} views x {n_heads} heads x {seq} tokens");
    }
    if assignment.n_heads != n_heads {
        bail!(Config, "assignment built for {} heads, model has {n_heads}", assignment.n_heads);
    }
    let mut grad = vec![T::zero(); rows.len()];
    if config.is_inactive() {
        return Ok(SpanLoss { loss: 0.0, grad });
    }
    let (c_in, c_out) = config.coefficients();
    let scale = 1.0 / n_views as f64;
    let mut loss = 0.0;
    for (v, view) in views.iter().enumerate() {
        for &(c, h) in &assignment.pairs {
            if c >= view.maps.len() {
                bail!(Config, "assignment references component {c} but the template has {}", view.maps.len());
            }
            let k = cell_weights(view, c, patch, config.resolution)?;
            let full = match config.resolution {
                Resolution::PatchGrid => 1.0,
                Resolution::Pixel => (patch * patch) as f64,
            };
            if k.len() + 1 != seq {
                bail!(Shape, "map has {} patches, attention row has {}", k.len(), seq - 1);
            }
            let start = (v * n_heads + h) * seq;
            let a: Vec<f64> = rows[start + 1..start + seq].iter().map(|x| x.f64()).collect();
            let inside = inclusion_sum(&a, &k)?;
            let outside: f64 = a.iter().zip(&k).map(|(a, k)| a * (full - k)).sum();
            loss += scale * (c_out * outside + c_in * inside);
            for (j, kj) in k.iter().enumerate() {
                grad[start + 1 + j] = T::c(scale * (c_out * (full - kj) + c_in * kj));
            }
        }
    }
    Ok(SpanLoss { loss, grad })
}

/// Log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n).map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64)).collect()
}

/// Cartesian `(lambda_incl, lambda_excl)` grid.
pub fn lambda_pairs(values: &[f64]) -> Vec<(f64, f64)> {
    values.iter().flat_map(|&a| values.iter().map(move |&b| (a, b))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub lambda_incl: f64,
    pub lambda_excl: f64,
    pub per_component: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub best: (f64, f64),
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_csv(&self, config_hash: &str, component_names: &[&str]) -> CsvTable {
        let mut header = vec!["lambda_incl", "lambda_excl"];
        let cols: Vec<String> = component_names.iter().map(|n| format!("val_map_{n}")).collect();
        header.extend(cols.iter().map(String::as_str));
        header.push("mean");
        let mut t = CsvTable::new(config_hash, &header);
        for r in &self.rows {
            let mut cells = vec![format!("{:e}", r.lambda_incl), format!("{:e}", r.lambda_excl)];
            cells.extend(r.per_component.iter().map(|v| format!("{v:.6}")));
            cells.push(format!("{:.6}", r.mean));
            t.row(cells);
        }
        t
    }
}

/// Trains once per pair and keeps the pair with the highest mean score.
/// `score_fn` returns per-component validation mAP; ties keep the earlier pair.
pub fn lambda_sweep<M, F, S>(grid: &[(f64, f64)], mut train_fn: F, mut score_fn: S) -> Result<SweepResult>
where
    F: FnMut(f64, f64) -> Result<M>,
    S: FnMut(&M) -> Result<Vec<f64>>,
{
    if grid.is_empty() {
        bail!(Config, "empty lambda grid");
    }
    let mut rows = Vec::with_capacity(grid.len());
    let mut best: Option<(usize, f64)> = None;
    for (i, &(li, le)) in grid.iter().enumerate() {
        let model = train_fn(li, le)?;
        let per_component = score_fn(&model)?;
        let mean = per_component.iter().sum::<f64>() / per_component.len().max(1) as f64;
        if best.map_or(true, |(_, b)| mean > b) {
            best = Some((i, mean));
        }
        rows.push(SweepRow { lambda_incl: li, lambda_excl: le, per_component, mean });
    }
    let (i, _) = best.expect("non-empty grid");
    Ok(SweepResult { best: grid[i], rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn downsample_examples() {
        assert!(downsample_map_to_patches(&[1; 64], 8, 8, 4).unwrap().iter().all(|&v| v == 1.0));
        let mut m = vec![0u8; 64];
        for y in 4..8 {
            for x in 0..4 {
                m[y * 8 + x] = 1;
            }
        }
        assert_eq!(downsample_map_to_patches(&m, 8, 8, 4).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        let mut half = vec![0u8; 64];
        for y in 0..4 {
            for x in 0..2 {
                half[y * 8 + x] = 1;
            }
        }
        assert_eq!(downsample_map_to_patches(&half, 8, 8, 4).unwrap()[0], 0.5);
        assert!(downsample_map_to_patches(&[0; 60], 10, 6, 4).is_err());
    }

    #[test]
    fn sums_by_hand() {
        let a = [0.1, 0.4, 0.3, 0.2];
        let k = [1.0, 1.0, 0.0, 0.0];
        assert!((inclusion_sum(&a, &k).unwrap() - 0.5).abs() < 1e-15);
        assert!((exclusion_sum(&a, &k).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(inclusion_sum(&a, &[0.0; 4]).unwrap(), 0.0);
        assert_eq!(exclusion_sum(&a, &[1.0; 4]).unwrap(), 0.0);
        assert!(inclusion_sum(&a, &[1.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn inclusion_plus_exclusion_is_total(pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..=1.0), 1..80)) {
            let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let k: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let total: f64 = a.iter().sum();
            prop_assert!((inclusion_sum(&a, &k).unwrap() + exclusion_sum(&a, &k).unwrap() - total).abs() < 1e-12);
        }
    }

    fn single_view(k: &[u8], side: usize) -> Vec<ViewMaps> {
        vec![ViewMaps { side, maps: vec![k.to_vec()] }]
    }

    /// 2x2 patch grid from per-patch binary values on a 2-pixel patch.
    fn blocky(cells: [u8; 4]) -> Vec<u8> {
        let mut m = vec![0u8; 16];
        for y in 0..4 {
            for x in 0..4 {
                m[y * 4 + x] = cells[(y / 2) * 2 + x / 2];
            }
        }
        m
    }

    #[test]
    fn combined_loss_examples() {
        let rows = [0.0, 0.1, 0.4, 0.3, 0.2];
        let asg = HeadAssignment::ascending(1, 1).unwrap();
        let views = single_view(&blocky([1, 1, 0, 0]), 4);
        let cfg = RegularizerConfig { lambda_incl: 0.01, lambda_excl: 0.01, ..Default::default() };
        assert!(combine_span_loss(&rows, 1, 5, &views, 2, &asg, &cfg).unwrap().loss.abs() < 1e-15);

        let zero = RegularizerConfig { lambda_incl: 0.0, lambda_excl: 0.0, ..Default::default() };
        assert_eq!(combine_span_loss(&rows, 1, 5, &views, 2, &asg, &zero).unwrap().loss, 0.0);

        let ones = single_view(&[1; 16], 4);
        let cfg = RegularizerConfig { lambda_incl: 0.3, lambda_excl: 7.0, ..Default::default() };
        let l = combine_span_loss(&[0.2, 0.1, 0.4, 0.1, 0.2], 1, 5, &ones, 2, &asg, &cfg).unwrap().loss;
        assert!((l + 0.3 * 0.8).abs() < 1e-12);
    }

    #[test]
    fn unassigned_heads_get_no_gradient() {
        let rows = vec![0.2; 3 * 5];
        let asg = HeadAssignment::new(vec![(0, 2)], 3).unwrap();
        let views = single_view(&blocky([1, 0, 0, 1]), 4);
        let out = combine_span_loss(&rows, 3, 5, &views, 2, &asg, &RegularizerConfig::default()).unwrap();
        assert!(out.grad[..10].iter().all(|&g: &f64| g == 0.0));
        assert_eq!(out.grad[10], 0.0);
        assert!(out.grad[11] < 0.0 && out.grad[12] > 0.0);
    }

    #[test]
    fn pixel_mode_scales_by_patch_area() {
        let rows = [0.1, 0.3, 0.2, 0.25, 0.15];
        let asg = HeadAssignment::ascending(1, 1).unwrap();
        let views = single_view(&[1, 0, 0, 1, 1, 1, 0, 0, 0, 0, 1, 1, 1, 0, 1, 0], 4);
        let patch = RegularizerConfig::default();
        let pixel = RegularizerConfig { resolution: Resolution::Pixel, ..patch };
        let a = combine_span_loss(&rows, 1, 5, &views, 2, &asg, &patch).unwrap().loss;
        let b = combine_span_loss(&rows, 1, 5, &views, 2, &asg, &pixel).unwrap().loss;
        assert!((b - 4.0 * a).abs() < 1e-12);
    }

    #[test]
    fn inverted_signs_flip_the_loss() {
        let rows = [0.0, 0.1, 0.4, 0.3, 0.2];
        let asg = HeadAssignment::ascending(1, 1).unwrap();
        let views = single_view(&blocky([1, 0, 0, 0]), 4);
        let focus = RegularizerConfig { lambda_incl: 0.2, lambda_excl: 0.2, ..Default::default() };
        let inverted = RegularizerConfig { sign_mode: SignMode::Inverted, ..focus };
        let a = combine_span_loss::<f64>(&rows, 1, 5, &views, 2, &asg, &focus).unwrap().loss;
        let b = combine_span_loss::<f64>(&rows, 1, 5, &views, 2, &asg, &inverted).unwrap().loss;
        assert!((a + b).abs() < 1e-15 && a > 0.0);
    }

    #[test]
    fn missing_component_is_an_error() {
        let asg = HeadAssignment::ascending(2, 2).unwrap();
        let views = single_view(&[1; 16], 4);
        assert!(combine_span_loss(&[0.2f64; 10], 2, 5, &views, 2, &asg, &RegularizerConfig::default()).is_err());
    }

    #[test]
    fn assignment_validation() {
        assert!(HeadAssignment::new(vec![(0, 1), (1, 1)], 3).is_err());
        assert!(HeadAssignment::new(vec![(0, 3)], 3).is_err());
        assert!(HeadAssignment::ascending(4, 3).is_err());
        assert_eq!(HeadAssignment::from_heads(&[2, 0], 3).unwrap().head_for(1), Some(0));
    }

    #[test]
    fn sweep_picks_argmax() {
        let one = lambda_sweep(&[(1e-3, 1e-4)], |a, b| Ok((a, b)), |_| Ok(vec![0.1])).unwrap();
        assert_eq!(one.best, (1e-3, 1e-4));
        let two = lambda_sweep(&[(1.0, 1.0), (2.0, 2.0)], |a, _| Ok(a), |&m| Ok(vec![m * 0.1, 0.0])).unwrap();
        assert_eq!(two.best, (2.0, 2.0));
        let grid = lambda_pairs(&[1e-6, 1e-4, 1e-2]);
        let full = lambda_sweep(&grid, |a, b| Ok(a + b), |&m| Ok(vec![m])).unwrap();
        assert_eq!(full.rows.len(), 9);
        assert_eq!(full.to_csv("h", &["c"]).as_str().lines().count(), 11);
        assert!(lambda_sweep(&[], |_, _| Ok(()), |_| Ok(vec![])).is_err());
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_grid(1e-6, 1e-2, 5);
        assert!((g[0] - 1e-6).abs() < 1e-18 && (g[4] - 1e-2).abs() < 1e-15 && (g[2] - 1e-4).abs() < 1e-16);
    }

    #[test]
    fn template_invariants() {
        let ok = KnowledgeTemplate::new(2, 2, vec![("a".into(), vec![1, 0, 0, 0])], TemplateKind::Deformable, "3");
        assert!(ok.is_ok());
        assert!(KnowledgeTemplate::new(2, 2, vec![("a".into(), vec![0; 4])], TemplateKind::Deformable, "3").is_err());
        assert!(KnowledgeTemplate::new(2, 2, vec![("a".into(), vec![2, 0, 0, 0])], TemplateKind::Deformable, "3").is_err());
        assert!(KnowledgeTemplate::new(2, 2, vec![("a".into(), vec![1; 3])], TemplateKind::Deformable, "3").is_err());
    }
}
