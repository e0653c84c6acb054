//! Hand-written forward and reverse-mode passes for [`ParameterSet`].

use super::{ParameterSet, ViTConfig};
use crate::error::{bail, Result};
use crate::tensor::{gelu_backward_in_place, gelu_slice, gemm, linear, linear_backward, softmax_in_place, Scalar, View};

const LN_EPS: f64 = 1e-6;
const L2_EPS: f64 = 1e-12;

/// A batch of square grayscale images stored row-major, image after image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<T> {
    pub side: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(side: usize, data: Vec<T>) -> Result<Self> {
        if side == 0 || data.len() % (side * side) != 0 {
            bail!(Shape, "batch buffer of {} values is not a whole number of {side}x{side} images", data.len());
        }
        Ok(Self { side, data })
    }

    pub fn from_images<'a, I>(side: usize, images: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [T]>,
    {
        let mut data = Vec::new();
        for img in images {
            if img.len() != side * side {
                bail!(Shape, "image has {} pixels, expected {}", img.len(), side * side);
            }
            data.extend_from_slice(img);
        }
        Self::new(side, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / (self.side * self.side)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn image(&self, i: usize) -> &[T] {
        let n = self.side * self.side;
        &self.data[i * n..(i + 1) * n]
    }
}

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

struct LayerTape<T> {
    ln1: LnCache<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    ctx: Vec<T>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    f1_pre: Vec<T>,
    f1_act: Vec<T>,
}

struct Tape<T> {
    patches: Vec<T>,
    pos_interp: Option<Vec<T>>,
    layers: Vec<LayerTape<T>>,
    final_ln: LnCache<T>,
    head_pre1: Vec<T>,
    head_act1: Vec<T>,
    head_norm: Vec<T>,
    head_u: Vec<T>,
}

/// Result of a forward pass.
///
/// `attention[l]` holds layer `l`'s attention probabilities laid out as
/// `[batch, head, query, key]` over the `seq` tokens (token 0 is `[CLS]`).
pub struct Forward<T> {
    pub batch: usize,
    pub side: usize,
    pub grid: usize,
    pub seq: usize,
    pub n_heads: usize,
    /// Final-norm `[CLS]` embeddings, `[batch, embed_dim]`.
    pub cls_embeddings: Vec<T>,
    /// Projection-head outputs, `[batch, head_out_dim]`.
    pub logits: Vec<T>,
    pub attention: Vec<Vec<T>>,
    tape: Option<Tape<T>>,
}

impl<T: Scalar> Forward<T> {
    pub fn has_tape(&self) -> bool {
        self.tape.is_some()
    }

    /// Attention row of `[CLS]` in the last layer for image `b`, head `h`
    /// (length `seq`, entry 0 is the `[CLS]`-to-`[CLS]` weight).
    pub fn last_cls_row(&self, b: usize, h: usize) -> &[T] {
        let a = self.attention.last().expect("at least one layer");
        let start = ((b * self.n_heads + h) * self.seq) * self.seq;
        &a[start..start + self.seq]
    }
}

/// Upstream gradients fed into [`ParameterSet::backward`].
#[derive(Default)]
pub struct OutputGrads<'a, T> {
    /// d(loss)/d(logits), `[batch, head_out_dim]`.
    pub logits: Option<&'a [T]>,
    /// d(loss)/d(last-layer `[CLS]` attention rows), `[batch, head, seq]`.
    pub cls_attention: Option<&'a [T]>,
    /// d(loss)/d(cls_embeddings), `[batch, embed_dim]`.
    pub cls_embeddings: Option<&'a [T]>,
}

/// 1-D bilinear resampling weights (half-pixel centres, edge clamp) from `src` to `dst` cells.
fn resample_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    (0..dst)
        .map(|i| {
            let x = ((i as f64 + 0.5) * src as f64 / dst as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(src - 1);
            let t = x - x0 as f64;
            if x1 == x0 {
                vec![(x0, 1.0)]
            } else {
                vec![(x0, 1.0 - t), (x1, t)]
            }
        })
        .collect()
}

/// Matrix `[dst^2, src^2]` interpolating the patch positional table.
fn pos_interp_matrix<T: Scalar>(src: usize, dst: usize) -> Vec<T> {
    let w = resample_weights(src, dst);
    let n_src = src * src;
    let mut m = vec![T::zero(); dst * dst * n_src];
    for (i, wy) in w.iter().enumerate() {
        for (j, wx) in w.iter().enumerate() {
            let row = (i * dst + j) * n_src;
            for &(k, a) in wy {
                for &(l, b) in wx {
                    m[row + k * src + l] += T::c(a * b);
                }
            }
        }
    }
    m
}

fn layer_norm<T: Scalar>(x: &[T], rows: usize, dim: usize, g: &[T], b: &[T], keep: bool) -> (Vec<T>, Option<LnCache<T>>) {
    let mut y = vec![T::zero(); rows * dim];
    let mut xhat = if keep { vec![T::zero(); rows * dim] } else { Vec::new() };
    let mut rstd = if keep { vec![T::zero(); rows] } else { Vec::new() };
    let n = T::c(dim as f64);
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + T::c(LN_EPS)).sqrt();
        for c in 0..dim {
            let xh = (row[c] - mean) * rs;
            y[r * dim + c] = xh * g[c] + b[c];
            if keep {
                xhat[r * dim + c] = xh;
            }
        }
        if keep {
            rstd[r] = rs;
        }
    }
    (y, keep.then_some(LnCache { xhat, rstd }))
}

fn layer_norm_backward<T: Scalar>(cache: &LnCache<T>, dy: &[T], rows: usize, dim: usize, g: &[T], dg: &mut [T], db: &mut [T]) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * dim];
    let n = T::c(dim as f64);
    let mut dxhat = vec![T::zero(); dim];
    for r in 0..rows {
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let d = &dy[r * dim..(r + 1) * dim];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..dim {
            dg[c] += d[c] * xh[c];
            db[c] += d[c];
            dxhat[c] = d[c] * g[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        let rs = cache.rstd[r];
        for c in 0..dim {
            dx[r * dim + c] = rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

impl<T: Scalar> ParameterSet<T> {
    /// Forward pass without a tape (inference).
    pub fn forward(&self, images: &ImageBatch<T>) -> Result<Forward<T>> {
        self.run_forward(images, false)
    }

    /// Forward pass that records everything [`ParameterSet::backward`] needs.
    pub fn forward_train(&self, images: &ImageBatch<T>) -> Result<Forward<T>> {
        self.run_forward(images, true)
    }

    fn run_forward(&self, images: &ImageBatch<T>, keep: bool) -> Result<Forward<T>> {
        let cfg: &ViTConfig = &self.config;
        let p = cfg.patch_size;
        let side = images.side;
        if side % p != 0 {
            bail!(Shape, "image side {side} not divisible by patch size {p}");
        }
        let batch = images.len();
        if batch == 0 {
            bail!(Shape, "empty image batch");
        }
        let idx = &*self.index;
        let w = &self.data;
        let d = cfg.embed_dim;
        let nh = cfg.n_heads;
        let dh = cfg.head_dim();
        let grid = side / p;
        let n = grid * grid;
        let seq = n + 1;
        let rows = batch * seq;
        let pp = p * p;

        // Patch extraction, `[batch * n, p*p]`.
        let mut patches = vec![T::zero(); batch * n * pp];
        for b in 0..batch {
            let img = images.image(b);
            for gy in 0..grid {
                for gx in 0..grid {
                    let dst = ((b * n) + gy * grid + gx) * pp;
                    for dy in 0..p {
                        let src = (gy * p + dy) * side + gx * p;
                        patches[dst + dy * p..dst + dy * p + p].copy_from_slice(&img[src..src + p]);
                    }
                }
            }
        }
        let emb = linear(&patches, batch * n, &w[idx.patch_w.clone()], Some(&w[idx.patch_b.clone()]), pp, d);

        let pos = &w[idx.pos.clone()];
        let train_grid = cfg.grid();
        let pos_interp = (grid != train_grid).then(|| pos_interp_matrix::<T>(train_grid, grid));
        let patch_pos: Vec<T> = match &pos_interp {
            None => pos[d..].to_vec(),
            Some(m) => {
                let mut out = vec![T::zero(); n * d];
                gemm(View::new(m, n, train_grid * train_grid), View::new(&pos[d..], train_grid * train_grid, d), &mut out, d, false);
                out
            }
        };

        let cls = &w[idx.cls.clone()];
        let mut x = vec![T::zero(); rows * d];
        for b in 0..batch {
            for c in 0..d {
                x[b * seq * d + c] = cls[c] + pos[c];
            }
            for i in 0..n {
                let dst = (b * seq + 1 + i) * d;
                let src = (b * n + i) * d;
                for c in 0..d {
                    x[dst + c] = emb[src + c] + patch_pos[i * d + c];
                }
            }
        }

        let scale = T::one() / T::c(dh as f64).sqrt();
        let mut attention = Vec::with_capacity(cfg.n_layers);
        let mut layers = Vec::new();
        for bi in &idx.blocks {
            let (h1, ln1) = layer_norm(&x, rows, d, &w[bi.ln1_g.clone()], &w[bi.ln1_b.clone()], keep);
            let qkv = linear(&h1, rows, &w[bi.qkv_w.clone()], Some(&w[bi.qkv_b.clone()]), d, 3 * d);
            let mut attn = vec![T::zero(); batch * nh * seq * seq];
            let mut ctx = vec![T::zero(); rows * d];
            for b in 0..batch {
                let base = b * seq * 3 * d;
                for h in 0..nh {
                    let q = View::strided(&qkv[base + h * dh..], seq, dh, 3 * d, 1);
                    let k = View::strided(&qkv[base + d + h * dh..], seq, dh, 3 * d, 1);
                    let v = View::strided(&qkv[base + 2 * d + h * dh..], seq, dh, 3 * d, 1);
                    let a = &mut attn[(b * nh + h) * seq * seq..(b * nh + h + 1) * seq * seq];
                    gemm(q, k.t(), a, seq, false);
                    a.iter_mut().for_each(|s| *s *= scale);
                    for row in a.chunks_mut(seq) {
                        softmax_in_place(row);
                    }
                    gemm(View::new(a, seq, seq), v, &mut ctx[b * seq * d + h * dh..], d, false);
                }
            }
            let y = linear(&ctx, rows, &w[bi.proj_w.clone()], Some(&w[bi.proj_b.clone()]), d, d);
            for (xv, yv) in x.iter_mut().zip(&y) {
                *xv += *yv;
            }
            let (h2, ln2) = layer_norm(&x, rows, d, &w[bi.ln2_g.clone()], &w[bi.ln2_b.clone()], keep);
            let m = cfg.mlp_dim();
            let f1_pre = linear(&h2, rows, &w[bi.fc1_w.clone()], Some(&w[bi.fc1_b.clone()]), d, m);
            let f1_act = gelu_slice(&f1_pre);
            let f2 = linear(&f1_act, rows, &w[bi.fc2_w.clone()], Some(&w[bi.fc2_b.clone()]), m, d);
            for (xv, yv) in x.iter_mut().zip(&f2) {
                *xv += *yv;
            }
            attention.push(attn);
            if keep {
                layers.push(LayerTape {
                    ln1: ln1.expect("kept"),
                    h1,
                    qkv,
                    ctx,
                    ln2: ln2.expect("kept"),
                    h2,
                    f1_pre,
                    f1_act,
                });
            }
        }

        let (xn, final_ln) = layer_norm(&x, rows, d, &w[idx.norm_g.clone()], &w[idx.norm_b.clone()], keep);
        let mut cls_embeddings = vec![T::zero(); batch * d];
        for b in 0..batch {
            cls_embeddings[b * d..(b + 1) * d].copy_from_slice(&xn[b * seq * d..b * seq * d + d]);
        }

        let hd = cfg.head_hidden_dim;
        let head_pre1 = linear(&cls_embeddings, batch, &w[idx.head_fc1_w.clone()], Some(&w[idx.head_fc1_b.clone()]), d, hd);
        let head_act1 = gelu_slice(&head_pre1);
        let head_z = linear(&head_act1, batch, &w[idx.head_fc2_w.clone()], Some(&w[idx.head_fc2_b.clone()]), hd, hd);
        let mut head_u = head_z;
        let mut head_norm = vec![T::zero(); batch];
        for b in 0..batch {
            let row = &mut head_u[b * hd..(b + 1) * hd];
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::c(L2_EPS));
            row.iter_mut().for_each(|v| *v /= nrm);
            head_norm[b] = nrm;
        }
        let logits = linear(&head_u, batch, &w[idx.head_last_w.clone()], None, hd, cfg.head_out_dim);

        let tape = keep.then(|| Tape {
            patches,
            pos_interp,
            layers,
            final_ln: final_ln.expect("kept"),
            head_pre1,
            head_act1,
            head_norm,
            head_u,
        });
        Ok(Forward { batch, side, grid, seq, n_heads: nh, cls_embeddings, logits, attention, tape })
    }

    /// Reverse pass. Accumulates d(loss)/d(params) into `grad`.
    pub fn backward(&self, fwd: &Forward<T>, upstream: &OutputGrads<'_, T>, grad: &mut ParameterSet<T>) -> Result<()> {
        let tape = match &fwd.tape {
            Some(t) => t,
            None => bail!(Shape, "backward requires a forward pass recorded with forward_train"),
        };
        self.check_same_shape(grad)?;
        let cfg = &self.config;
        let idx = &*self.index;
        let w = &self.data;
        let g = &mut grad.data;
        let d = cfg.embed_dim;
        let nh = cfg.n_heads;
        let dh = cfg.head_dim();
        let hd = cfg.head_hidden_dim;
        let out = cfg.head_out_dim;
        let (batch, seq, grid) = (fwd.batch, fwd.seq, fwd.grid);
        let n = grid * grid;
        let rows = batch * seq;
        let p = cfg.patch_size;
        let pp = p * p;

        let mut d_cls = vec![T::zero(); batch * d];
        if let Some(dl) = upstream.logits {
            if dl.len() != batch * out {
                bail!(Shape, "logit gradient has {} values, expected {}", dl.len(), batch * out);
            }
            let du = linear_backward(&tape.head_u, batch, &w[idx.head_last_w.clone()], dl, hd, out, &mut g[idx.head_last_w.clone()], None, true)
                .expect("dx requested");
            let mut dz = vec![T::zero(); batch * hd];
            for b in 0..batch {
                let u = &tape.head_u[b * hd..(b + 1) * hd];
                let dur = &du[b * hd..(b + 1) * hd];
                let dot: T = u.iter().zip(dur).map(|(&a, &c)| a * c).sum();
                let nrm = tape.head_norm[b];
                for c in 0..hd {
                    dz[b * hd + c] = (dur[c] - u[c] * dot) / nrm;
                }
            }
            let (fc2w, rest) = split_two(g, idx.head_fc2_w.clone(), idx.head_fc2_b.clone());
            let mut da1 = linear_backward(&tape.head_act1, batch, &w[idx.head_fc2_w.clone()], &dz, hd, hd, fc2w, Some(rest), true)
                .expect("dx requested");
            gelu_backward_in_place(&tape.head_pre1, &mut da1);
            let (fc1w, fc1b) = split_two(g, idx.head_fc1_w.clone(), idx.head_fc1_b.clone());
            let dc = linear_backward(&fwd.cls_embeddings, batch, &w[idx.head_fc1_w.clone()], &da1, d, hd, fc1w, Some(fc1b), true)
                .expect("dx requested");
            d_cls.iter_mut().zip(&dc).for_each(|(a, &b)| *a += b);
        }
        if let Some(de) = upstream.cls_embeddings {
            if de.len() != batch * d {
                bail!(Shape, "embedding gradient has {} values, expected {}", de.len(), batch * d);
            }
            d_cls.iter_mut().zip(de).for_each(|(a, &b)| *a += b);
        }
        if let Some(da) = upstream.cls_attention {
            if da.len() != batch * nh * seq {
                bail!(Shape, "attention gradient has {} values, expected {}", da.len(), batch * nh * seq);
            }
        }

        let mut dxn = vec![T::zero(); rows * d];
        for b in 0..batch {
            dxn[b * seq * d..b * seq * d + d].copy_from_slice(&d_cls[b * d..(b + 1) * d]);
        }
        let (ng, nb) = split_two(g, idx.norm_g.clone(), idx.norm_b.clone());
        let mut dx = layer_norm_backward(&tape.final_ln, &dxn, rows, d, &w[idx.norm_g.clone()], ng, nb);

        let scale = T::one() / T::c(dh as f64).sqrt();
        let n_layers = idx.blocks.len();
        let m = cfg.mlp_dim();
        let mut da = vec![T::zero(); seq * seq];
        let mut ds_row = vec![T::zero(); seq];
        for (l, bi) in idx.blocks.iter().enumerate().rev() {
            let lt = &tape.layers[l];
            // MLP branch.
            let (fw, fb) = split_two(g, bi.fc2_w.clone(), bi.fc2_b.clone());
            let mut dact = linear_backward(&lt.f1_act, rows, &w[bi.fc2_w.clone()], &dx, m, d, fw, Some(fb), true).expect("dx");
            gelu_backward_in_place(&lt.f1_pre, &mut dact);
            let (fw, fb) = split_two(g, bi.fc1_w.clone(), bi.fc1_b.clone());
            let dh2 = linear_backward(&lt.h2, rows, &w[bi.fc1_w.clone()], &dact, d, m, fw, Some(fb), true).expect("dx");
            let (lg, lb) = split_two(g, bi.ln2_g.clone(), bi.ln2_b.clone());
            let dmid = layer_norm_backward(&lt.ln2, &dh2, rows, d, &w[bi.ln2_g.clone()], lg, lb);
            dx.iter_mut().zip(&dmid).for_each(|(a, &b)| *a += b);

            // Attention branch.
            let (pw, pb) = split_two(g, bi.proj_w.clone(), bi.proj_b.clone());
            let dctx = linear_backward(&lt.ctx, rows, &w[bi.proj_w.clone()], &dx, d, d, pw, Some(pb), true).expect("dx");
            let attn = &fwd.attention[l];
            let mut dqkv = vec![T::zero(); rows * 3 * d];
            for b in 0..batch {
                let base = b * seq * 3 * d;
                for h in 0..nh {
                    let a = &attn[(b * nh + h) * seq * seq..(b * nh + h + 1) * seq * seq];
                    let q = View::strided(&lt.qkv[base + h * dh..], seq, dh, 3 * d, 1);
                    let k = View::strided(&lt.qkv[base + d + h * dh..], seq, dh, 3 * d, 1);
                    let v = View::strided(&lt.qkv[base + 2 * d + h * dh..], seq, dh, 3 * d, 1);
                    let dout = View::strided(&dctx[b * seq * d + h * dh..], seq, dh, d, 1);
                    // dA = dout * v^T
                    gemm(dout, v.t(), &mut da, seq, false);
                    if l == n_layers - 1 {
                        if let Some(ext) = upstream.cls_attention {
                            let off = (b * nh + h) * seq;
                            for j in 0..seq {
                                da[j] += ext[off + j];
                            }
                        }
                    }
                    // dV = A^T * dout
                    gemm(View::new(a, seq, seq).t(), dout, &mut dqkv[base + 2 * d + h * dh..], 3 * d, false);
                    // Softmax backward, folded with the 1/sqrt(dh) scale.
                    for r in 0..seq {
                        let ar = &a[r * seq..(r + 1) * seq];
                        let dar = &da[r * seq..(r + 1) * seq];
                        let dot: T = ar.iter().zip(dar).map(|(&x, &y)| x * y).sum();
                        for c in 0..seq {
                            ds_row[c] = ar[c] * (dar[c] - dot) * scale;
                        }
                        da[r * seq..(r + 1) * seq].copy_from_slice(&ds_row);
                    }
                    let ds = View::new(&da, seq, seq);
                    gemm(ds, k, &mut dqkv[base + h * dh..], 3 * d, false);
                    gemm(ds.t(), q, &mut dqkv[base + d + h * dh..], 3 * d, false);
                }
            }
            let (qw, qb) = split_two(g, bi.qkv_w.clone(), bi.qkv_b.clone());
            let dh1 = linear_backward(&lt.h1, rows, &w[bi.qkv_w.clone()], &dqkv, d, 3 * d, qw, Some(qb), true).expect("dx");
            let (lg, lb) = split_two(g, bi.ln1_g.clone(), bi.ln1_b.clone());
            let din = layer_norm_backward(&lt.ln1, &dh1, rows, d, &w[bi.ln1_g.clone()], lg, lb);
            dx.iter_mut().zip(&din).for_each(|(a, &b)| *a += b);
        }

        // Embedding layer.
        let mut demb = vec![T::zero(); batch * n * d];
        let mut dpos_patch = vec![T::zero(); n * d];
        {
            let gcls = &mut g[idx.cls.clone()];
            for b in 0..batch {
                for c in 0..d {
                    gcls[c] += dx[b * seq * d + c];
                }
            }
        }
        {
            let gpos = &mut g[idx.pos.clone()];
            for b in 0..batch {
                for c in 0..d {
                    gpos[c] += dx[b * seq * d + c];
                }
                for i in 0..n {
                    let src = (b * seq + 1 + i) * d;
                    let dst = (b * n + i) * d;
                    for c in 0..d {
                        demb[dst + c] = dx[src + c];
                        dpos_patch[i * d + c] += dx[src + c];
                    }
                }
            }
            match &tape.pos_interp {
                None => {
                    for (a, &b) in gpos[d..].iter_mut().zip(&dpos_patch) {
                        *a += b;
                    }
                }
                Some(mat) => {
                    let tn = cfg.n_patches();
                    gemm(View::new(mat, n, tn).t(), View::new(&dpos_patch, n, d), &mut gpos[d..], d, true);
                }
            }
        }
        let (pw, pb) = split_two(g, idx.patch_w.clone(), idx.patch_b.clone());
        linear_backward(&tape.patches, batch * n, &w[idx.patch_w.clone()], &demb, pp, d, pw, Some(pb), false);
        Ok(())
    }
}

/// Two disjoint mutable sub-slices; `a` must precede `b`.
fn split_two<T>(data: &mut [T], a: std::ops::Range<usize>, b: std::ops::Range<usize>) -> (&mut [T], &mut [T]) {
    assert!(a.end <= b.start, "ranges must be ordered and disjoint");
    let (left, right) = data.split_at_mut(b.start);
    (&mut left[a], &mut right[..b.end - b.start])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ViTConfig {
        ViTConfig { image_size: 16, patch_size: 8, embed_dim: 8, n_layers: 1, n_heads: 2, mlp_ratio: 2, head_hidden_dim: 6, head_out_dim: 5 }
    }

    fn random_batch(side: usize, count: usize, seed: u64) -> ImageBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBatch::new(side, (0..side * side * count).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    /// Random parameters with larger spread than `init` so that every path carries signal.
    pub(crate) fn random_params(config: &ViTConfig, seed: u64) -> ParameterSet<f64> {
        let mut p = ParameterSet::<f64>::zeros(config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
        p
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let c = ViTConfig { n_layers: 2, ..tiny() };
        let p = random_params(&c, 1);
        let f = p.forward(&random_batch(16, 3, 2)).unwrap();
        for layer in &f.attention {
            for row in layer.chunks(f.seq) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_images_give_identical_rows() {
        let p = random_params(&tiny(), 3);
        let one = random_batch(16, 1, 4);
        let two = ImageBatch::new(16, [one.data.clone(), one.data.clone()].concat()).unwrap();
        let f = p.forward(&two).unwrap();
        let o = p.cfg_out();
        assert_eq!(f.logits[..o], f.logits[o..]);
        assert_eq!(f.cls_embeddings[..8], f.cls_embeddings[8..]);
    }

    impl ParameterSet<f64> {
        fn cfg_out(&self) -> usize {
            self.config.head_out_dim
        }
    }

    #[test]
    fn rejects_indivisible_input() {
        let p = random_params(&tiny(), 3);
        assert!(p.forward(&random_batch(12, 1, 1)).is_err());
    }

    #[test]
    fn interpolated_positions_allow_larger_inputs() {
        let p = random_params(&tiny(), 5);
        let f = p.forward(&random_batch(32, 1, 6)).unwrap();
        assert_eq!(f.grid, 4);
        assert_eq!(f.seq, 17);
    }

    #[test]
    fn interpolation_is_identity_at_training_grid() {
        let m = pos_interp_matrix::<f64>(3, 3);
        for i in 0..9 {
            for j in 0..9 {
                assert_eq!(m[i * 9 + j], if i == j { 1.0 } else { 0.0 });
            }
        }
        let up = pos_interp_matrix::<f64>(2, 4);
        for row in up.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_without_tape_is_an_error() {
        let p = random_params(&tiny(), 3);
        let f = p.forward(&random_batch(16, 1, 1)).unwrap();
        let mut g = p.zeros_like();
        assert!(p.backward(&f, &OutputGrads::default(), &mut g).is_err());
    }
}

#[cfg(test)]
mod gradient_tests {
    use super::tests::random_params;
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use crate::vit::extract_cls_attention;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn images(side: usize, count: usize, seed: u64) -> ImageBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBatch::new(side, (0..side * side * count).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn check(config: ViTConfig, side: usize, objective: &dyn Fn(&ParameterSet<f64>, &ImageBatch<f64>) -> (f64, Vec<f64>)) -> f64 {
        let p = random_params(&config, 11);
        let x = images(side, 2, 12);
        let (_, analytic) = objective(&p, &x);
        let coords: Vec<usize> = (0..p.len()).collect();
        let mut flat = p.data.clone();
        let numeric = central_difference(&mut flat, &coords, 1e-4, |v| {
            let mut q = p.clone();
            q.data.copy_from_slice(v);
            objective(&q, &x).0
        });
        max_relative_error(&analytic, &numeric, 1e-6)
    }

    fn logit_sum(p: &ParameterSet<f64>, x: &ImageBatch<f64>) -> (f64, Vec<f64>) {
        let f = p.forward_train(x).unwrap();
        let ones = vec![1.0; f.logits.len()];
        let mut g = p.zeros_like();
        p.backward(&f, &OutputGrads { logits: Some(&ones), ..Default::default() }, &mut g).unwrap();
        (f.logits.iter().sum(), g.data)
    }

    fn attention_map_sum(p: &ParameterSet<f64>, x: &ImageBatch<f64>) -> (f64, Vec<f64>) {
        let f = p.forward_train(x).unwrap();
        // Weighted sum so the objective is not the trivially constant total.
        let mut value = 0.0;
        let mut upstream = vec![0.0; f.batch * f.n_heads * f.seq];
        for b in 0..f.batch {
            let stack = extract_cls_attention(&f, b, (x.side, x.side)).unwrap();
            for h in 0..f.n_heads {
                let wgt = (h + 1) as f64 * if b == 0 { 1.0 } else { -0.5 };
                value += wgt * stack.head(h).iter().enumerate().filter(|(i, _)| i % 3 == 0).map(|(_, v)| v).sum::<f64>();
                // d/d(row entry j) = weight * number of selected pixels in patch j
                for gy in 0..f.grid {
                    for gx in 0..f.grid {
                        let cell = x.side / f.grid;
                        let mut cnt = 0.0;
                        for yy in gy * cell..(gy + 1) * cell {
                            for xx in gx * cell..(gx + 1) * cell {
                                if (yy * x.side + xx) % 3 == 0 {
                                    cnt += 1.0;
                                }
                            }
                        }
                        upstream[(b * f.n_heads + h) * f.seq + 1 + gy * f.grid + gx] = wgt * cnt;
                    }
                }
            }
        }
        let mut g = p.zeros_like();
        p.backward(&f, &OutputGrads { cls_attention: Some(&upstream), ..Default::default() }, &mut g).unwrap();
        (value, g.data)
    }

    fn tiny() -> ViTConfig {
        ViTConfig { image_size: 16, patch_size: 8, embed_dim: 8, n_layers: 1, n_heads: 2, mlp_ratio: 2, head_hidden_dim: 6, head_out_dim: 5 }
    }

    #[test]
    fn logit_sum_gradient_matches_finite_differences() {
        let err = check(tiny(), 16, &logit_sum);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn two_layer_gradient_matches_finite_differences() {
        let err = check(ViTConfig { n_layers: 2, ..tiny() }, 16, &logit_sum);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn interpolated_position_gradient_matches_finite_differences() {
        let err = check(tiny(), 24, &logit_sum);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn attention_map_gradient_matches_finite_differences() {
        let err = check(ViTConfig { n_layers: 2, ..tiny() }, 16, &attention_map_sum);
        assert!(err < 1e-4, "max relative error {err}");
    }
}
