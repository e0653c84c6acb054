//! Interpretability and downstream metrics: pixel AP over attention maps, the
//! pointing game, frozen-feature linear probes, AUC and low-data sweeps.
//!
//! Ranking ties are broken by raster order everywhere: in AP the earlier
//! pixel ranks first, in the pointing game the first maximal pixel wins.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::io::CsvTable;
use crate::pgm;
use crate::seed;
use crate::span_reg::HeadAssignment;
use crate::synthdata::SynthSample;
use crate::vit::{extract_cls_attention, AttentionMapStack, ImageBatch, ParameterSet};

/// Exact area under the stepwise precision-recall curve of the ranked pixels.
pub fn average_precision(scores: &[f64], gt: &[u8]) -> Result<f64> {
    if scores.len() != gt.len() {
        bail!(Shape, "{} scores for {} mask pixels", scores.len(), gt.len());
    }
    let positives = gt.iter().filter(|&&g| g == 1).count();
    if positives == 0 {
        return Err(Error::Undefined("average precision of an empty mask".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if gt[i] == 1 {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / positives as f64)
}

/// `hits / (hits + misses)` where a map hits if its first maximal pixel is
/// inside the mask.
pub fn pointing_game(maps: &[&[f64]], masks: &[&[u8]]) -> Result<f64> {
    if maps.is_empty() || maps.len() != masks.len() {
        bail!(Shape, "pointing game needs equally many maps and masks, got {} and {}", maps.len(), masks.len());
    }
    let mut hits = 0usize;
    for (m, g) in maps.iter().zip(masks) {
        if m.len() != g.len() || m.is_empty() {
            bail!(Shape, "map and mask sizes differ");
        }
        let mut best = 0;
        for (i, &v) in m.iter().enumerate() {
            if v > m[best] {
                best = i;
            }
        }
        hits += usize::from(g[best] == 1);
    }
    Ok(hits as f64 / maps.len() as f64)
}

/// Mann-Whitney AUC: the share of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        bail!(Shape, "{} scores for {} labels", scores.len(), labels.len());
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined("AUC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadPolicy {
    /// The head each component was regularised onto.
    Assigned,
    /// Per image and component, the best-scoring head.
    MaxOverHeads,
}

impl HeadPolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadPolicy::Assigned => "assigned",
            HeadPolicy::MaxOverHeads => "max_over_heads",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "assigned" => Ok(HeadPolicy::Assigned),
            "max_over_heads" | "max" => Ok(HeadPolicy::MaxOverHeads),
            _ => Err(Error::Config(format!("unknown head policy {s}"))),
        }
    }
}

/// Per-component AP and the chosen head for one image's stack.
pub fn score_stack(stack: &AttentionMapStack, masks: &[Vec<u8>], policy: HeadPolicy, assignment: Option<&HeadAssignment>) -> Result<Vec<(f64, usize)>> {
    masks
        .iter()
        .enumerate()
        .map(|(c, m)| match policy {
            HeadPolicy::Assigned => {
                let a = assignment.ok_or_else(|| Error::Config("assigned head policy without an assignment".into()))?;
                let h = a.head_for(c).ok_or_else(|| Error::Config(format!("component {c} has no assigned head")))?;
                Ok((average_precision(stack.head(h), m)?, h))
            }
            HeadPolicy::MaxOverHeads => {
                let mut best = (f64::NEG_INFINITY, 0);
                for h in 0..stack.n_heads {
                    let ap = average_precision(stack.head(h), m)?;
                    if ap > best.0 {
                        best = (ap, h);
                    }
                }
                Ok(best)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    pub policy: HeadPolicy,
    pub sample_ids: Vec<u64>,
    /// `[image][component]`.
    pub per_image: Vec<Vec<f64>>,
    /// `[image][component]` head the AP was read from.
    pub heads: Vec<Vec<usize>>,
    /// Pointing-game ratio per component on the same heads.
    pub pointing: Vec<f64>,
}

impl ApResult {
    /// Mean over images, per component.
    pub fn component_ap(&self) -> Vec<f64> {
        let n_comp = self.per_image.first().map_or(0, Vec::len);
        (0..n_comp).map(|c| self.per_image.iter().map(|r| r[c]).sum::<f64>() / self.per_image.len() as f64).collect()
    }

    /// Mean over components of the per-component means.
    pub fn map(&self) -> f64 {
        let c = self.component_ap();
        c.iter().sum::<f64>() / c.len().max(1) as f64
    }

    pub fn to_csv(&self, config_hash: &str, component_names: &[&str]) -> CsvTable {
        let mut t = CsvTable::new(config_hash, &["sample_id", "component", "head", "ap", "policy"]);
        for ((id, aps), heads) in self.sample_ids.iter().zip(&self.per_image).zip(&self.heads) {
            for (c, (ap, h)) in aps.iter().zip(heads).enumerate() {
                t.row([id.to_string(), component_names.get(c).unwrap_or(&"?").to_string(), h.to_string(), format!("{ap:.6}"), self.policy.as_str().into()]);
            }
        }
        t
    }
}

/// Nearest-neighbour resampling of a square binary mask.
pub fn resample_mask(mask: &[u8], side: usize, target: usize) -> Vec<u8> {
    if side == target {
        return mask.to_vec();
    }
    (0..target * target).map(|i| mask[((i / target) * side / target) * side + (i % target) * side / target]).collect()
}

const EVAL_BATCH: usize = 32;

/// Last-layer `[CLS]` attention stacks at `resolution` for every sample.
pub fn attention_stacks(model: &ParameterSet<f32>, samples: &[&SynthSample], resolution: usize) -> Result<Vec<AttentionMapStack>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<Vec<f32>> = chunk.iter().map(|s| s.image_f32()).collect();
        let batch = ImageBatch::from_images(chunk[0].width, images.iter().map(Vec::as_slice))?;
        let fwd = model.forward(&batch)?;
        for b in 0..chunk.len() {
            out.push(extract_cls_attention(&fwd, b, (resolution, resolution))?);
        }
    }
    Ok(out)
}

/// Scores a model's attention maps against ground-truth masks.
pub fn attention_map_score(model: &ParameterSet<f32>, samples: &[&SynthSample], assignment: Option<&HeadAssignment>, policy: HeadPolicy, resolution: usize) -> Result<ApResult> {
    if samples.is_empty() {
        bail!(Missing, "no samples to score");
    }
    let stacks = attention_stacks(model, samples, resolution)?;
    score_stacks(&stacks, samples, assignment, policy)
}

pub fn score_stacks(stacks: &[AttentionMapStack], samples: &[&SynthSample], assignment: Option<&HeadAssignment>, policy: HeadPolicy) -> Result<ApResult> {
    let mut res = ApResult { policy, sample_ids: Vec::new(), per_image: Vec::new(), heads: Vec::new(), pointing: Vec::new() };
    let mut maps: Vec<Vec<&[f64]>> = Vec::new();
    let mut resized: Vec<Vec<Vec<u8>>> = Vec::new();
    for (stack, s) in stacks.iter().zip(samples) {
        let masks: Vec<Vec<u8>> = s.masks.iter().map(|m| resample_mask(m, s.width, stack.width)).collect();
        let scored = score_stack(stack, &masks, policy, assignment)?;
        res.sample_ids.push(s.sample_id);
        res.per_image.push(scored.iter().map(|p| p.0).collect());
        res.heads.push(scored.iter().map(|p| p.1).collect());
        maps.push(scored.iter().map(|p| stack.head(p.1)).collect());
        resized.push(masks);
    }
    let n_comp = res.per_image[0].len();
    for c in 0..n_comp {
        let m: Vec<&[f64]> = maps.iter().map(|r| r[c]).collect();
        let g: Vec<&[u8]> = resized.iter().map(|r| r[c].as_slice()).collect();
        res.pointing.push(pointing_game(&m, &g)?);
    }
    Ok(res)
}

/// Final-norm `[CLS]` embedding per image, without augmentation.
pub fn extract_features(model: &ParameterSet<f32>, samples: &[&SynthSample]) -> Result<Vec<Vec<f64>>> {
    let d = model.config.embed_dim;
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let images: Vec<Vec<f32>> = chunk.iter().map(|s| s.image_f32()).collect();
        let batch = ImageBatch::from_images(chunk[0].width, images.iter().map(Vec::as_slice))?;
        let fwd = model.forward(&batch)?;
        out.extend(fwd.cls_embeddings.chunks(d).map(|r| r.iter().map(|&v| f64::from(v)).collect()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 100, lr: 1e-2, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    /// One-vs-rest AUC per class.
    pub per_class_auc: Vec<f64>,
    pub mean_auc: f64,
    pub n_train: usize,
    pub seed: u64,
    pub feature_source: String,
}

/// Softmax regression on frozen features trained full-batch with Adam.
/// Features are standardised with the training-set mean and deviation.
pub fn linear_probe(train_x: &[Vec<f64>], train_y: &[u8], test_x: &[Vec<f64>], test_y: &[u8], config: &ProbeConfig) -> Result<ProbeResult> {
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() || train_x.is_empty() || test_x.is_empty() {
        bail!(Shape, "feature and label counts differ or are empty");
    }
    let k = usize::from(*train_y.iter().chain(test_y).max().unwrap_or(&0)) + 1;
    let present = (0..k).filter(|&c| train_y.iter().any(|&y| usize::from(y) == c)).count();
    if k < 2 || present < k {
        bail!(Domain, "probe training set must contain every class");
    }
    let d = train_x[0].len();
    let n = train_x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train_x.iter().map(|x| x[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d).map(|j| (train_x.iter().map(|x| (x[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-8)).collect();
    let norm = |x: &Vec<f64>| -> Vec<f64> { x.iter().enumerate().map(|(j, v)| (v - mean[j]) / sd[j]).collect() };
    let xs: Vec<Vec<f64>> = train_x.iter().map(norm).collect();
    let xt: Vec<Vec<f64>> = test_x.iter().map(norm).collect();

    // Weights `[k, d]` followed by biases `[k]`.
    let mut rng = seed::rng(config.seed, &[0x9B0]);
    let normal = Normal::new(0.0, 0.01).expect("valid deviation");
    let mut w: Vec<f64> = (0..k * d).map(|_| normal.sample(&mut rng)).chain(std::iter::repeat(0.0).take(k)).collect();
    let (mut m, mut v) = (vec![0.0; w.len()], vec![0.0; w.len()]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    for t in 1..=config.epochs {
        let mut g = vec![0.0; w.len()];
        for (x, &y) in xs.iter().zip(train_y) {
            let p = softmax_scores(&w, x, k, d);
            for c in 0..k {
                let r = (p[c] - f64::from(u8::from(usize::from(y) == c))) / n;
                for j in 0..d {
                    g[c * d + j] += r * x[j];
                }
                g[k * d + c] += r;
            }
        }
        let (c1, c2) = (1.0 - b1.powi(t as i32), 1.0 - b2.powi(t as i32));
        for i in 0..w.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            w[i] -= config.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    }
    let probs: Vec<Vec<f64>> = xt.iter().map(|x| softmax_scores(&w, x, k, d)).collect();
    let per_class_auc = (0..k)
        .map(|c| {
            let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
            let l: Vec<u8> = test_y.iter().map(|&y| u8::from(usize::from(y) == c)).collect();
            auc(&s, &l)
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_auc = per_class_auc.iter().sum::<f64>() / k as f64;
    Ok(ProbeResult { per_class_auc, mean_auc, n_train: train_x.len(), seed: config.seed, feature_source: String::new() })
}

fn softmax_scores(w: &[f64], x: &[f64], k: usize, d: usize) -> Vec<f64> {
    let z: Vec<f64> = (0..k).map(|c| w[k * d + c] + w[c * d..(c + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect();
    let mx = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Indices of a class-balanced subset with `size / 2` members per binary class.
pub fn balanced_subset(labels: &[u8], size: usize, seed: u64) -> Result<Vec<usize>> {
    if size == 0 || size % 2 != 0 {
        bail!(Config, "low-data size {size} must be even and positive");
    }
    let mut rng = seed::rng(seed, &[0x10D, size as u64]);
    let mut out = Vec::with_capacity(size);
    for class in [0u8, 1] {
        let mut pool: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if pool.len() < size / 2 {
            bail!(Config, "size {size} needs {} samples of class {class}, only {} available", size / 2, pool.len());
        }
        pool.shuffle(&mut rng);
        out.extend_from_slice(&pool[..size / 2]);
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowDataRow {
    pub size: usize,
    pub seed: u64,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowDataTable {
    pub rows: Vec<LowDataRow>,
}

impl LowDataTable {
    /// `(size, mean, sample standard deviation)` per size, in input order.
    pub fn summary(&self) -> Vec<(usize, f64, f64)> {
        let mut sizes: Vec<usize> = Vec::new();
        for r in &self.rows {
            if !sizes.contains(&r.size) {
                sizes.push(r.size);
            }
        }
        sizes
            .into_iter()
            .map(|s| {
                let v: Vec<f64> = self.rows.iter().filter(|r| r.size == s).map(|r| r.auc).collect();
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let var = if v.len() > 1 { v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64 } else { 0.0 };
                (s, mean, var.sqrt())
            })
            .collect()
    }

    pub fn to_csv(&self, config_hash: &str, label: &str) -> CsvTable {
        let mut t = CsvTable::new(config_hash, &["model", "size", "seed", "auc"]);
        for r in &self.rows {
            t.row([label.to_string(), r.size.to_string(), r.seed.to_string(), format!("{:.6}", r.auc)]);
        }
        t
    }
}

/// Probes balanced subsets of the labelled pool for every `(size, seed)`.
pub fn low_data_sweep(pool_x: &[Vec<f64>], pool_y: &[u8], test_x: &[Vec<f64>], test_y: &[u8], sizes: &[usize], seeds: &[u64], config: &ProbeConfig) -> Result<LowDataTable> {
    let mut rows = Vec::new();
    for &size in sizes {
        for &s in seeds {
            let idx = balanced_subset(pool_y, size, s)?;
            let x: Vec<Vec<f64>> = idx.iter().map(|&i| pool_x[i].clone()).collect();
            let y: Vec<u8> = idx.iter().map(|&i| pool_y[i]).collect();
            let r = linear_probe(&x, &y, test_x, test_y, &ProbeConfig { seed: s, ..*config })?;
            rows.push(LowDataRow { size, seed: s, auc: r.mean_auc });
        }
    }
    Ok(LowDataTable { rows })
}

/// Writes one min-max scaled PGM per head: `<prefix>_head<h>.pgm`.
pub fn export_stack(stack: &AttentionMapStack, dir: &Path, prefix: &str) -> Result<()> {
    for h in 0..stack.n_heads {
        let m = stack.head(h);
        let lo = m.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = m.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        pgm::write(&dir.join(format!("{prefix}_head{h}.pgm")), &pgm::from_real(m, stack.width, stack.height, lo, hi))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    /// Thresholds at every distinct score, high to low.
    fn ap_brute_force(scores: &[f64], gt: &[u8]) -> f64 {
        let mut th: Vec<f64> = scores.to_vec();
        th.sort_by(|a, b| b.total_cmp(a));
        th.dedup();
        let pos = gt.iter().filter(|&&g| g == 1).count() as f64;
        let (mut ap, mut prev_r) = (0.0, 0.0);
        for t in th {
            let sel: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= t).collect();
            let tp = sel.iter().filter(|&&i| gt[i] == 1).count() as f64;
            let (p, r) = (tp / sel.len() as f64, tp / pos);
            ap += (r - prev_r) * p;
            prev_r = r;
        }
        ap
    }

    #[test]
    fn ap_hand_example() {
        let ap = average_precision(&[0.9, 0.8, 0.1, 0.05], &[1, 0, 1, 0]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn ap_perfect_and_inverted() {
        let gt: Vec<u8> = (0..64).map(|i| u8::from(i % 5 == 0)).collect();
        let s: Vec<f64> = gt.iter().map(|&g| f64::from(g)).collect();
        assert_eq!(average_precision(&s, &gt).unwrap(), 1.0);
        let inv: Vec<f64> = s.iter().map(|v| 1.0 - v).collect();
        let q = gt.iter().filter(|&&g| g == 1).count() as f64 / 64.0;
        assert!(average_precision(&inv, &gt).unwrap() < q + 0.05);
        assert!(matches!(average_precision(&s, &[0; 64]), Err(Error::Undefined(_))));
    }

    #[test]
    fn ap_matches_brute_force_and_is_monotone_invariant() {
        let mut rng = crate::seed::rng(1, &[]);
        for _ in 0..100 {
            let s: Vec<f64> = (0..64).map(|_| rng.gen()).collect();
            let mut g: Vec<u8> = (0..64).map(|_| u8::from(rng.gen_bool(0.3))).collect();
            g[rng.gen_range(0..64)] = 1;
            let a = average_precision(&s, &g).unwrap();
            assert!((a - ap_brute_force(&s, &g)).abs() < 1e-9);
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            assert!((a - average_precision(&t, &g).unwrap()).abs() < 1e-12);
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn pointing_game_rules() {
        let g = [0u8, 1, 1, 0];
        let m = [0.0, 1.0, 1.0, 0.0];
        assert_eq!(pointing_game(&[&m], &[&g]).unwrap(), 1.0);
        let miss = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(pointing_game(&[&m, &m, &m, &miss], &[&g, &g, &g, &g]).unwrap(), 0.75);
        let flat = [0.5; 4];
        assert_eq!(pointing_game(&[&flat], &[&g]).unwrap(), 0.0);
        assert_eq!(pointing_game(&[&flat], &[&[1, 0, 0, 0]]).unwrap(), 1.0);
    }

    fn auc_pairs(s: &[f64], l: &[u8]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] == 1 && l[j] == 0 {
                    den += 1.0;
                    num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples_and_oracle() {
        assert_eq!(auc(&[0.9, 0.4, 0.5, 0.1], &[1, 1, 0, 0]).unwrap(), 0.75);
        assert_eq!(auc(&[3.0, 2.0, 1.0], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[1, 1]).is_err());
        let mut rng = crate::seed::rng(4, &[]);
        for _ in 0..100 {
            let n = rng.gen_range(2..=20);
            let s: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_range(0..6u8)) / 5.0).collect();
            let mut l: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.5))).collect();
            l[0] = 1;
            l[1] = 0;
            assert!((auc(&s, &l).unwrap() - auc_pairs(&s, &l)).abs() < 1e-12);
        }
    }

    #[test]
    fn max_policy_dominates_assigned() {
        let mut rng = crate::seed::rng(8, &[]);
        let vals: Vec<f64> = (0..4 * 16).map(|_| rng.gen()).collect();
        let stack = AttentionMapStack::from_patch_values(4, vals, vec![0.1; 4], 16, 16).unwrap();
        let masks: Vec<Vec<u8>> = (0..3).map(|c| (0..256).map(|i| u8::from((i / 16 + c * 3) % 7 < 3)).collect()).collect();
        let a = HeadAssignment::ascending(3, 4).unwrap();
        let assigned = score_stack(&stack, &masks, HeadPolicy::Assigned, Some(&a)).unwrap();
        let best = score_stack(&stack, &masks, HeadPolicy::MaxOverHeads, None).unwrap();
        for (x, y) in assigned.iter().zip(&best) {
            assert!(y.0 >= x.0);
        }
        assert!(score_stack(&stack, &masks, HeadPolicy::Assigned, None).is_err());
    }

    #[test]
    fn stub_stack_equal_to_mask_scores_one() {
        let mask: Vec<u8> = (0..64).map(|i| u8::from((i % 8) < 4 && (i / 8) < 4)).collect();
        // Head 1 lights up exactly the top-left quarter of a 2x2 patch grid.
        let stack = AttentionMapStack::from_patch_values(2, vec![0.25, 0.25, 0.25, 0.25, 0.9, 0.0, 0.0, 0.0], vec![0.0, 0.1], 8, 8).unwrap();
        let a = HeadAssignment::new(vec![(0, 1)], 2).unwrap();
        let r = score_stack(&stack, &[mask], HeadPolicy::Assigned, Some(&a)).unwrap();
        assert_eq!(r[0], (1.0, 1));
    }

    fn toy(n: usize, seed: u64, sep: f64) -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut rng = crate::seed::rng(seed, &[]);
        let y: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let x = y.iter().map(|&l| vec![f64::from(l) * sep + rng.gen_range(-0.4..0.4), rng.gen_range(-1.0..1.0)]).collect();
        (x, y)
    }

    #[test]
    fn separable_probe_is_perfect_and_deterministic() {
        let (x, y) = toy(40, 1, 2.0);
        let (xt, yt) = toy(60, 2, 2.0);
        let r = linear_probe(&x, &y, &xt, &yt, &ProbeConfig::default()).unwrap();
        assert_eq!(r.mean_auc, 1.0);
        assert_eq!(r, linear_probe(&x, &y, &xt, &yt, &ProbeConfig::default()).unwrap());
        assert!(linear_probe(&x, &vec![0; 40], &xt, &yt, &ProbeConfig::default()).is_err());
    }

    #[test]
    fn shuffled_labels_sit_near_chance() {
        for seed in 0..10 {
            let (x, mut y) = toy(40, 100 + seed, 2.0);
            let (xt, mut yt) = toy(200, 200 + seed, 2.0);
            y.shuffle(&mut crate::seed::rng(seed, &[7]));
            yt.shuffle(&mut crate::seed::rng(seed, &[8]));
            let r = linear_probe(&x, &y, &xt, &yt, &ProbeConfig { seed, ..Default::default() }).unwrap();
            assert!((0.35..=0.65).contains(&r.mean_auc), "seed {seed}: {}", r.mean_auc);
        }
    }

    #[test]
    fn balanced_subsets() {
        let labels: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let idx = balanced_subset(&labels, 4, 3).unwrap();
        assert_eq!(idx.iter().filter(|&&i| labels[i] == 1).count(), 2);
        assert_eq!(idx.len(), 4);
        assert!(balanced_subset(&labels, 42, 3).is_err());
        let (x, y) = toy(40, 5, 1.0);
        let (xt, yt) = toy(50, 6, 1.0);
        let a = low_data_sweep(&x, &y, &xt, &yt, &[4, 8], &[0, 1], &ProbeConfig::default()).unwrap();
        assert_eq!(a, low_data_sweep(&x, &y, &xt, &yt, &[4, 8], &[0, 1], &ProbeConfig::default()).unwrap());
        assert_eq!(a.summary().len(), 2);
    }
}
