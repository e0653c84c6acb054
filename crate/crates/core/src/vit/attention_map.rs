use super::Forward;
use crate::error::{bail, Result};
use crate::tensor::Scalar;

/// Per-head `[CLS]`-to-patch attention of the last layer, upsampled to image
/// resolution by nearest-neighbour expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMapStack {
    pub width: usize,
    pub height: usize,
    pub n_heads: usize,
    /// Patches per side.
    pub patch_grid: usize,
    pub source_layer: usize,
    /// Head-major `[n_heads, grid, grid]` values before upsampling.
    pub patch_values: Vec<f64>,
    /// The dropped `[CLS]`-to-`[CLS]` weight per head.
    pub cls_self: Vec<f64>,
    /// Head-major `[n_heads, height, width]`.
    pub maps: Vec<f64>,
}

impl AttentionMapStack {
    pub fn head(&self, h: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.maps[h * n..(h + 1) * n]
    }

    pub fn head_patches(&self, h: usize) -> &[f64] {
        let n = self.patch_grid * self.patch_grid;
        &self.patch_values[h * n..(h + 1) * n]
    }

    /// Build a stack directly from patch-grid values (used for stubs and tests).
    pub fn from_patch_values(patch_grid: usize, patch_values: Vec<f64>, cls_self: Vec<f64>, width: usize, height: usize) -> Result<Self> {
        let cells = patch_grid * patch_grid;
        if cells == 0 || patch_values.len() % cells != 0 || patch_values.len() / cells != cls_self.len() {
            bail!(Shape, "patch values do not match a {patch_grid}x{patch_grid} grid per head");
        }
        let n_heads = cls_self.len();
        let mut maps = vec![0.0; n_heads * width * height];
        for h in 0..n_heads {
            let src = &patch_values[h * cells..(h + 1) * cells];
            let dst = &mut maps[h * width * height..(h + 1) * width * height];
            for y in 0..height {
                let gy = y * patch_grid / height;
                for x in 0..width {
                    let gx = x * patch_grid / width;
                    dst[y * width + x] = src[gy * patch_grid + gx];
                }
            }
        }
        Ok(Self { width, height, n_heads, patch_grid, source_layer: 0, patch_values, cls_self, maps })
    }
}

/// Takes the `[CLS]` row of every head in the last layer for image `b`, drops
/// the `[CLS]`-to-`[CLS]` entry, reshapes the rest to the patch grid and
/// upsamples it to `target` (`width`, `height`) by nearest neighbour.
pub fn extract_cls_attention<T: Scalar>(fwd: &Forward<T>, b: usize, target: (usize, usize)) -> Result<AttentionMapStack> {
    if fwd.attention.is_empty() {
        bail!(Shape, "model has no attention layers");
    }
    if b >= fwd.batch {
        bail!(Shape, "image index {b} outside batch of {}", fwd.batch);
    }
    let (width, height) = target;
    if width < fwd.grid || height < fwd.grid {
        bail!(Shape, "target {width}x{height} smaller than patch grid {}", fwd.grid);
    }
    let mut patch_values = Vec::with_capacity(fwd.n_heads * (fwd.seq - 1));
    let mut cls_self = Vec::with_capacity(fwd.n_heads);
    for h in 0..fwd.n_heads {
        let row = fwd.last_cls_row(b, h);
        cls_self.push(row[0].f64());
        patch_values.extend(row[1..].iter().map(|v| v.f64()));
    }
    let mut stack = AttentionMapStack::from_patch_values(fwd.grid, patch_values, cls_self, width, height)?;
    stack.source_layer = fwd.attention.len() - 1;
    Ok(stack)
}
