use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ViTConfig;
use crate::error::{bail, Result};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
pub struct BlockIndex {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub qkv_w: Range<usize>,
    pub qkv_b: Range<usize>,
    pub proj_w: Range<usize>,
    pub proj_b: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub fc1_w: Range<usize>,
    pub fc1_b: Range<usize>,
    pub fc2_w: Range<usize>,
    pub fc2_b: Range<usize>,
}

/// Offsets of every tensor inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct ParamIndex {
    pub specs: Vec<TensorSpec>,
    pub total: usize,
    pub patch_w: Range<usize>,
    pub patch_b: Range<usize>,
    pub cls: Range<usize>,
    pub pos: Range<usize>,
    pub blocks: Vec<BlockIndex>,
    pub norm_g: Range<usize>,
    pub norm_b: Range<usize>,
    pub head_fc1_w: Range<usize>,
    pub head_fc1_b: Range<usize>,
    pub head_fc2_w: Range<usize>,
    pub head_fc2_b: Range<usize>,
    pub head_last_w: Range<usize>,
}

pub(crate) fn layout(config: &ViTConfig) -> Vec<TensorSpec> {
    let d = config.embed_dim;
    let m = config.mlp_dim();
    let h = config.head_hidden_dim;
    let pp = config.patch_size * config.patch_size;
    let mut specs = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let spec = TensorSpec { name, shape, offset };
        offset += spec.len();
        specs.push(spec);
    };
    push("patch_embed.weight".into(), vec![pp, d]);
    push("patch_embed.bias".into(), vec![d]);
    push("cls_token".into(), vec![d]);
    push("pos_embed".into(), vec![config.seq_len(), d]);
    for l in 0..config.n_layers {
        let p = format!("blocks.{l}");
        push(format!("{p}.norm1.weight"), vec![d]);
        push(format!("{p}.norm1.bias"), vec![d]);
        push(format!("{p}.attn.qkv.weight"), vec![d, 3 * d]);
        push(format!("{p}.attn.qkv.bias"), vec![3 * d]);
        push(format!("{p}.attn.proj.weight"), vec![d, d]);
        push(format!("{p}.attn.proj.bias"), vec![d]);
        push(format!("{p}.norm2.weight"), vec![d]);
        push(format!("{p}.norm2.bias"), vec![d]);
        push(format!("{p}.mlp.fc1.weight"), vec![d, m]);
        push(format!("{p}.mlp.fc1.bias"), vec![m]);
        push(format!("{p}.mlp.fc2.weight"), vec![m, d]);
        push(format!("{p}.mlp.fc2.bias"), vec![d]);
    }
    push("norm.weight".into(), vec![d]);
    push("norm.bias".into(), vec![d]);
    push("head.fc1.weight".into(), vec![d, h]);
    push("head.fc1.bias".into(), vec![h]);
    push("head.fc2.weight".into(), vec![h, h]);
    push("head.fc2.bias".into(), vec![h]);
    push("head.last.weight".into(), vec![h, config.head_out_dim]);
    specs
}

impl ParamIndex {
    pub fn new(config: &ViTConfig) -> Self {
        let specs = layout(config);
        let total = specs.last().map(|s| s.offset + s.len()).unwrap_or(0);
        let mut it = specs.iter().map(TensorSpec::range);
        let mut next = || it.next().expect("layout entry");
        let patch_w = next();
        let patch_b = next();
        let cls = next();
        let pos = next();
        let blocks = (0..config.n_layers)
            .map(|_| BlockIndex {
                ln1_g: next(),
                ln1_b: next(),
                qkv_w: next(),
                qkv_b: next(),
                proj_w: next(),
                proj_b: next(),
                ln2_g: next(),
                ln2_b: next(),
                fc1_w: next(),
                fc1_b: next(),
                fc2_w: next(),
                fc2_b: next(),
            })
            .collect();
        let norm_g = next();
        let norm_b = next();
        let head_fc1_w = next();
        let head_fc1_b = next();
        let head_fc2_w = next();
        let head_fc2_b = next();
        let head_last_w = next();
        Self {
            specs,
            total,
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            norm_g,
            norm_b,
            head_fc1_w,
            head_fc1_b,
            head_fc2_w,
            head_fc2_b,
            head_last_w,
        }
    }
}

/// All trainable tensors of one network, stored contiguously.
///
/// The same type doubles as a gradient accumulator and as optimizer moment
/// storage, since all of them share the layout.
#[derive(Debug, Clone)]
pub struct ParameterSet<T> {
    pub config: ViTConfig,
    pub index: Arc<ParamIndex>,
    pub data: Vec<T>,
}

impl<T: Scalar> PartialEq for ParameterSet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

impl<T: Scalar> ParameterSet<T> {
    pub fn zeros(config: &ViTConfig) -> Result<Self> {
        config.validate()?;
        let index = Arc::new(ParamIndex::new(config));
        let data = vec![T::zero(); index.total];
        Ok(Self { config: *config, index, data })
    }

    pub fn zeros_like(&self) -> Self {
        Self { config: self.config, index: Arc::clone(&self.index), data: vec![T::zero(); self.data.len()] }
    }

    /// Truncated-normal (std 0.02) weights, zero biases, unit norm gains.
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let index = Arc::clone(&p.index);
        for spec in &index.specs {
            let name = spec.name.as_str();
            let r = spec.range();
            if name.ends_with(".bias") {
                continue;
            }
            if name.starts_with("norm") || name.contains(".norm") {
                p.data[r].iter_mut().for_each(|v| *v = T::one());
                continue;
            }
            for v in &mut p.data[r] {
                let mut x: f64 = normal.sample(&mut rng);
                while x.abs() > 0.04 {
                    x = normal.sample(&mut rng);
                }
                *v = T::c(x);
            }
        }
        // Keep the rng stream consumed in a fixed pattern regardless of T.
        let _: u64 = rng.gen();
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.index.specs.iter().find(|s| s.name == name).map(|s| &self.data[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let r = self.index.specs.iter().find(|s| s.name == name)?.range();
        Some(&mut self.data[r])
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.config != other.config || self.data.len() != other.data.len() {
            bail!(Shape, "parameter sets have different shapes");
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            config: self.config,
            index: Arc::clone(&self.index),
            data: self.data.iter().map(|&v| U::c(v.f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_respects_kinds() {
        let c = ViTConfig::default();
        let a = ParameterSet::<f32>::init(&c, 7).unwrap();
        let b = ParameterSet::<f32>::init(&c, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.tensor("blocks.0.norm1.weight").unwrap().iter().all(|&v| v == 1.0));
        assert!(a.tensor("blocks.0.attn.qkv.bias").unwrap().iter().all(|&v| v == 0.0));
        assert!(a.tensor("cls_token").unwrap().iter().all(|&v| v.abs() <= 0.04));
        let c64 = ParameterSet::<f64>::init(&c, 7).unwrap();
        assert_eq!(c64.cast::<f32>(), a);
    }

    #[test]
    fn index_covers_every_tensor_once() {
        let c = ViTConfig { n_layers: 2, ..ViTConfig::default() };
        let idx = ParamIndex::new(&c);
        let mut end = 0;
        for s in &idx.specs {
            assert_eq!(s.offset, end);
            end += s.len();
        }
        assert_eq!(end, idx.total);
        assert_eq!(idx.head_last_w.end, idx.total);
    }
}
