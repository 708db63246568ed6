//! Volumetric bi-level routing attention.
//!
//! A feature volume is cut into equal regions. Mean-pooled query and key
//! descriptors give a region-to-region affinity; each query region keeps its
//! top-k key regions, gathers their tokens, and runs ordinary multi-head
//! attention over only those tokens. With `k * S` gathered keys per query the
//! score cost falls from `T^2` to `T * k * S`.

use crate::error::{Error, Result};
use crate::nn::{self, ConvParams, MlpParams, NormParams};
use crate::tensor::{cast, topk_indices, Element, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaddingPolicy {
    /// Every spatial extent must be a multiple of the region extent.
    Reject,
    /// Pad up to a multiple with zero tokens that are masked out of the
    /// descriptors and the attention.
    ZeroPadMask,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VbraConfig {
    pub region_size: [usize; 3],
    pub top_k: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub channels: usize,
    pub padding_policy: PaddingPolicy,
    /// Always route each query region to itself (replacing its weakest pick
    /// when needed).
    #[serde(default)]
    pub force_self_region: bool,
}

impl VbraConfig {
    pub fn new(channels: usize, heads: usize, region_size: [usize; 3], top_k: usize) -> Self {
        VbraConfig {
            region_size,
            top_k,
            heads,
            head_dim: channels.checked_div(heads).unwrap_or(0),
            channels,
            padding_policy: PaddingPolicy::Reject,
            force_self_region: false,
        }
    }

    /// Checks the config against a `[H, W, D]` feature volume and returns the
    /// region grid.
    pub fn validate(&self, dims: [usize; 3]) -> Result<[usize; 3]> {
        if self.heads == 0 || self.head_dim == 0 || self.heads * self.head_dim != self.channels {
            return Err(Error::Config(format!(
                "heads ({}) x head_dim ({}) must equal channels ({})",
                self.heads, self.head_dim, self.channels
            )));
        }
        if self.region_size.contains(&0) || self.top_k == 0 {
            return Err(Error::Config("region extents and top_k must be positive".into()));
        }
        let mut grid = [0; 3];
        for ax in 0..3 {
            let (n, s) = (dims[ax], self.region_size[ax]);
            if n % s != 0 {
                if self.padding_policy == PaddingPolicy::Reject {
                    return Err(Error::Config(format!(
                        "axis {ax}: extent {n} is not divisible by region extent {s}"
                    )));
                }
                grid[ax] = n.div_ceil(s);
            } else {
                grid[ax] = n / s;
            }
        }
        let regions: usize = grid.iter().product();
        if self.top_k > regions {
            return Err(Error::Config(format!(
                "top_k = {} exceeds the {regions} regions of a {dims:?} volume",
                self.top_k
            )));
        }
        Ok(grid)
    }
}

/// Region layout plus the per-query-region routing table.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingIndex {
    pub dims: [usize; 3],
    pub grid: [usize; 3],
    pub region_size: [usize; 3],
    /// Slot `r * S + s` holds token `slots[..]` of the flattened volume, or
    /// `tokens()` for a padding slot.
    pub slots: Vec<usize>,
    pub valid: Vec<bool>,
    /// Selected key regions per query region, ascending. Empty until routed.
    pub selected: Vec<Vec<usize>>,
}

impl RoutingIndex {
    pub fn regions(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn region_tokens(&self) -> usize {
        self.region_size.iter().product()
    }

    pub fn tokens(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn has_padding(&self) -> bool {
        self.valid.iter().any(|v| !v)
    }

    /// Flattened token ids (and padding sentinels) of region `r`.
    pub fn region_span(&self, r: usize) -> &[usize] {
        let s = self.region_tokens();
        &self.slots[r * s..(r + 1) * s]
    }

    pub fn valid_in_region(&self, r: usize) -> usize {
        let s = self.region_tokens();
        self.valid[r * s..(r + 1) * s].iter().filter(|&&v| v).count()
    }

    /// Key tokens each query token attends to (`k * S`).
    pub fn keys_per_query(&self) -> usize {
        self.selected.first().map_or(0, |s| s.len()) * self.region_tokens()
    }

    fn skeleton(dims: [usize; 3], grid: [usize; 3], region_size: [usize; 3]) -> Self {
        let s: usize = region_size.iter().product();
        let r: usize = grid.iter().product();
        let t: usize = dims.iter().product();
        let mut slots = Vec::with_capacity(r * s);
        let mut valid = Vec::with_capacity(r * s);
        for gx in 0..grid[0] {
            for gy in 0..grid[1] {
                for gz in 0..grid[2] {
                    for i in 0..region_size[0] {
                        for j in 0..region_size[1] {
                            for k in 0..region_size[2] {
                                let (x, y, z) = (
                                    gx * region_size[0] + i,
                                    gy * region_size[1] + j,
                                    gz * region_size[2] + k,
                                );
                                let inside = x < dims[0] && y < dims[1] && z < dims[2];
                                slots.push(if inside { (x * dims[1] + y) * dims[2] + z } else { t });
                                valid.push(inside);
                            }
                        }
                    }
                }
            }
        }
        RoutingIndex {
            dims,
            grid,
            region_size,
            slots,
            valid,
            selected: Vec::new(),
        }
    }
}

fn split_volume(op: &'static str, shape: &[usize]) -> Result<([usize; 3], usize)> {
    match shape {
        &[h, w, d, c] => Ok(([h, w, d], c)),
        _ => Err(Error::invalid(op, format!("expected an [H, W, D, C] volume, got {shape:?}"))),
    }
}

/// Reorders a `[H, W, D, C]` volume into region-major `[R, S, C]`.
pub fn partition_regions<T: Element>(tape: &mut Tape<T>, x: Var, cfg: &VbraConfig) -> Result<(Var, RoutingIndex)> {
    let (dims, c) = split_volume("partition_regions", tape.shape(x))?;
    let grid = cfg.validate(dims)?;
    let index = RoutingIndex::skeleton(dims, grid, cfg.region_size);
    let t = index.tokens();
    let mut flat = tape.reshape(x, &[t, c])?;
    if index.has_padding() {
        let zero = tape.constant(Tensor::zeros([1, c])?);
        flat = tape.concat(&[flat, zero], 0)?;
    }
    let rows = tape.gather_rows(flat, &index.slots)?;
    let out = tape.reshape(rows, &[index.regions(), index.region_tokens(), c])?;
    Ok((out, index))
}

/// Inverse of [`partition_regions`]: `[R, S, C]` (or `[R * S, C]`) back to
/// `[H, W, D, C]`, dropping padding slots.
pub fn unpartition_regions<T: Element>(tape: &mut Tape<T>, x: Var, index: &RoutingIndex) -> Result<Var> {
    let c = *tape.shape(x).last().unwrap_or(&0);
    let rs = index.slots.len();
    if tape.value(x).numel() != rs * c {
        return Err(Error::shape("unpartition_regions", tape.shape(x), &[index.regions(), index.region_tokens(), c]));
    }
    let flat = tape.reshape(x, &[rs, c])?;
    let mut inverse = vec![0usize; index.tokens()];
    for (slot, (&tok, &ok)) in index.slots.iter().zip(&index.valid).enumerate() {
        if ok {
            inverse[tok] = slot;
        }
    }
    let rows = tape.gather_rows(flat, &inverse)?;
    let [h, w, d] = index.dims;
    tape.reshape(rows, &[h, w, d, c])
}

/// Per-region mean of the valid tokens of `[R, S, C]` queries and keys.
pub fn region_descriptors<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    index: &RoutingIndex,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if q.shape() != k.shape() || q.rank() != 3 {
        return Err(Error::shape("region_descriptors", q.shape(), k.shape()));
    }
    let (r, s, c) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    if r != index.regions() || s != index.region_tokens() {
        return Err(Error::shape("region_descriptors", q.shape(), &[index.regions(), index.region_tokens(), c]));
    }
    let pool = |x: &Tensor<T>| -> Result<Tensor<T>> {
        let d = x.data();
        let mut out = vec![T::zero(); r * c];
        for ri in 0..r {
            let count = index.valid_in_region(ri);
            if count == 0 {
                return Err(Error::invalid("region_descriptors", format!("region {ri} has no valid tokens")));
            }
            let acc = &mut out[ri * c..(ri + 1) * c];
            for si in 0..s {
                if index.valid[ri * s + si] {
                    let row = &d[(ri * s + si) * c..(ri * s + si + 1) * c];
                    acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
            }
            let inv = cast::<T>(1.0 / count as f64);
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        Tensor::new([r, c], out)
    };
    Ok((pool(q)?, pool(k)?))
}

/// Raw region-to-region scores `Q^p K^p^T / sqrt(d_k)`, `[R, R]`.
pub fn region_scores<T: Element>(qp: &Tensor<T>, kp: &Tensor<T>, head_dim: usize) -> Result<Tensor<T>> {
    if qp.rank() != 2 || qp.shape() != kp.shape() {
        return Err(Error::shape("coarse_route", qp.shape(), kp.shape()));
    }
    let (r, c) = (qp.shape()[0], qp.shape()[1]);
    let scale = cast::<T>(1.0 / (head_dim as f64).sqrt());
    let (a, b) = (qp.data(), kp.data());
    let mut out = vec![T::zero(); r * r];
    for i in 0..r {
        for j in 0..r {
            let dot: T = a[i * c..(i + 1) * c]
                .iter()
                .zip(&b[j * c..(j + 1) * c])
                .map(|(&x, &y)| x * y)
                .sum();
            out[i * r + j] = dot * scale;
        }
    }
    Tensor::new([r, r], out)
}

/// Row-softmaxed region affinity.
pub fn coarse_affinity<T: Element>(qp: &Tensor<T>, kp: &Tensor<T>, head_dim: usize) -> Result<Tensor<T>> {
    let scores = region_scores(qp, kp, head_dim)?;
    let r = scores.shape()[0];
    let mut out = scores.to_vec();
    for row in out.chunks_exact_mut(r) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v = *v / total);
    }
    Tensor::new([r, r], out)
}

/// Keeps the `k` highest-affinity key regions per query region. Selection
/// runs on the raw scores (softmax is monotone); ties go to the lower region
/// id. Nothing is recorded for differentiation.
pub fn coarse_route<T: Element>(
    qp: &Tensor<T>,
    kp: &Tensor<T>,
    k: usize,
    head_dim: usize,
    force_self: bool,
    index: &mut RoutingIndex,
) -> Result<()> {
    let scores = region_scores(qp, kp, head_dim)?;
    let r = scores.shape()[0];
    if r != index.regions() {
        return Err(Error::shape("coarse_route", scores.shape(), &[index.regions(), index.regions()]));
    }
    if k == 0 || k > r {
        return Err(Error::invalid("coarse_route", format!("k = {k} outside 1..={r}")));
    }
    let top = topk_indices(&scores, 1, k)?;
    index.selected = top
        .chunks_exact(k)
        .enumerate()
        .map(|(q, picks)| {
            let mut picks = picks.to_vec();
            if force_self && !picks.contains(&q) {
                *picks.last_mut().expect("k >= 1") = q;
            }
            picks.sort_unstable();
            picks
        })
        .collect();
    Ok(())
}

/// Gathers, for every query region, the tokens of its selected key regions:
/// `[R, S, C]` to `[R, k S, C]`, selected regions in ascending id order and
/// tokens in region order. Also returns the key validity mask `[R, k S]`.
pub fn gather_tokens<T: Element>(
    tape: &mut Tape<T>,
    k: Var,
    v: Var,
    index: &RoutingIndex,
) -> Result<(Var, Var, Vec<bool>)> {
    let shape = tape.shape(k).to_vec();
    if shape != tape.shape(v) || shape.len() != 3 {
        return Err(Error::shape("gather_tokens", &shape, tape.shape(v)));
    }
    let (r, s, c) = (shape[0], shape[1], shape[2]);
    if index.selected.len() != r {
        return Err(Error::invalid(
            "gather_tokens",
            format!("routing covers {} query regions, tensor has {r}", index.selected.len()),
        ));
    }
    let kk = index.selected.first().map_or(0, |p| p.len());
    let mut rows = Vec::with_capacity(r * kk * s);
    let mut valid = Vec::with_capacity(r * kk * s);
    for picks in &index.selected {
        if picks.len() != kk {
            return Err(Error::invalid("gather_tokens", "ragged routing table"));
        }
        for &p in picks {
            if p >= r {
                return Err(Error::invalid("gather_tokens", format!("region {p} out of range ({r} regions)")));
            }
            rows.extend(p * s..(p + 1) * s);
            valid.extend_from_slice(&index.valid[p * s..(p + 1) * s]);
        }
    }
    let mut gather = |x: Var| -> Result<Var> {
        let flat = tape.reshape(x, &[r * s, c])?;
        let g = tape.gather_rows(flat, &rows)?;
        tape.reshape(g, &[r, kk * s, c])
    };
    let (kg, vg) = (gather(k)?, gather(v)?);
    Ok((kg, vg, valid))
}

/// Output and projection weights of one attention layer, all `C x C`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

/// `[B, N, C]` to `[B * heads, N, d]`.
fn split_heads<T: Element>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (b, n, c) = (s[0], s[1], s[2]);
    let d = c / heads;
    let x = tape.reshape(x, &[b, n, heads, d])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * heads, n, d])
}

/// `[B * heads, N, d]` to `[B * N, C]`.
fn merge_heads<T: Element>(tape: &mut Tape<T>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let (bh, n, d) = (s[0], s[1], s[2]);
    let b = bh / heads;
    let x = tape.reshape(x, &[b, heads, n, d])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * n, heads * d])
}

/// Scaled dot-product attention over batched `[B, N, C]` queries and
/// `[B, M, C]` keys/values, heads concatenated then projected by `w_o`.
/// Returns `[B * N, C]`.
fn multi_head<T: Element>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    w_o: Var,
    heads: usize,
    key_valid: Option<&[bool]>,
) -> Result<Var> {
    let (b, n, c) = {
        let s = tape.shape(q);
        (s[0], s[1], s[2])
    };
    let m = tape.shape(k)[1];
    if c % heads != 0 {
        return Err(Error::invalid("fine_attention", format!("{c} channels over {heads} heads")));
    }
    let d = c / heads;
    let qh = split_heads(tape, q, heads)?;
    let kh = split_heads(tape, k, heads)?;
    let vh = split_heads(tape, v, heads)?;
    let kt = tape.transpose(kh)?;
    let scores = tape.matmul(qh, kt)?;
    let scores = tape.mul_scalar(scores, cast::<T>(1.0 / (d as f64).sqrt()))?;
    let attn = match key_valid {
        Some(valid) if valid.iter().any(|v| !v) => {
            // valid is [B, M]; expand to [B, heads, N, M]
            let mut keep = Vec::with_capacity(b * heads * n * m);
            for bi in 0..b {
                let row = &valid[bi * m..(bi + 1) * m];
                for _ in 0..heads * n {
                    keep.extend_from_slice(row);
                }
            }
            tape.softmax_masked(scores, 2, &keep)?
        }
        _ => tape.softmax(scores, 2)?,
    };
    let out = tape.matmul(attn, vh)?;
    let merged = merge_heads(tape, out, heads)?;
    tape.matmul(merged, w_o)
}

/// Token-to-token attention of each query region against its gathered keys
/// and values, reassembled into the `[H, W, D, C]` volume.
#[allow(clippy::too_many_arguments)]
pub fn fine_attention<T: Element>(
    tape: &mut Tape<T>,
    q: Var,
    k_gathered: Var,
    v_gathered: Var,
    w_o: Var,
    heads: usize,
    key_valid: &[bool],
    index: &RoutingIndex,
) -> Result<Var> {
    let out = multi_head(tape, q, k_gathered, v_gathered, w_o, heads, Some(key_valid))?;
    unpartition_regions(tape, out, index)
}

/// Full quadratic multi-head attention over `[T, C]` token lists, no routing.
pub fn dense_attention_reference<T: Element>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
    w_o: Var,
    heads: usize,
) -> Result<Var> {
    let s = tape.shape(q).to_vec();
    if s.len() != 2 || tape.shape(k) != s || tape.shape(v) != s {
        return Err(Error::shape("dense_attention_reference", &s, tape.shape(k)));
    }
    let (t, c) = (s[0], s[1]);
    let q3 = tape.reshape(q, &[1, t, c])?;
    let k3 = tape.reshape(k, &[1, t, c])?;
    let v3 = tape.reshape(v, &[1, t, c])?;
    multi_head(tape, q3, k3, v3, w_o, heads, None)
}

/// Projects a volume to queries/keys/values, routes, gathers and attends.
/// Returns the attended volume and the routing table that was used.
pub fn vbra<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    p: &AttentionParams,
    cfg: &VbraConfig,
) -> Result<(Var, RoutingIndex)> {
    let (dims, c) = split_volume("vbra", tape.shape(x))?;
    if c != cfg.channels {
        return Err(Error::shape("vbra", tape.shape(x), &[cfg.channels]));
    }
    for w in [p.w_q, p.w_k, p.w_v, p.w_o] {
        if tape.shape(w) != [c, c] {
            return Err(Error::shape("vbra", tape.shape(w), &[c, c]));
        }
    }
    let t: usize = dims.iter().product();
    let flat = tape.reshape(x, &[t, c])?;
    let mut project = |w: Var| -> Result<Var> {
        let y = tape.matmul(flat, w)?;
        tape.reshape(y, &[dims[0], dims[1], dims[2], c])
    };
    let (qv, kv, vv) = (project(p.w_q)?, project(p.w_k)?, project(p.w_v)?);
    let (qr, mut index) = partition_regions(tape, qv, cfg)?;
    let (kr, _) = partition_regions(tape, kv, cfg)?;
    let (vr, _) = partition_regions(tape, vv, cfg)?;
    let (qp, kp) = region_descriptors(tape.value(qr), tape.value(kr), &index)?;
    coarse_route(&qp, &kp, cfg.top_k, cfg.head_dim, cfg.force_self_region, &mut index)?;
    let (kg, vg, valid) = gather_tokens(tape, kr, vr, &index)?;
    let out = fine_attention(tape, qr, kg, vg, p.w_o, cfg.heads, &valid, &index)?;
    Ok((out, index))
}

#[derive(Debug, Clone, Copy)]
pub struct VbraBlockParams {
    pub dwconv: ConvParams,
    pub norm1: NormParams,
    pub attn: AttentionParams,
    pub norm2: NormParams,
    pub mlp: MlpParams,
}

/// `y1 = x + dwconv(x)`, `y2 = y1 + vbra(ln(y1))`, `y = y2 + mlp(ln(y2))`.
pub fn vbra_block<T: Element>(tape: &mut Tape<T>, x: Var, p: &VbraBlockParams, cfg: &VbraConfig) -> Result<Var> {
    let local = nn::dwconv3d(tape, x, &p.dwconv)?;
    let y1 = tape.add(x, local)?;
    let n1 = nn::layer_norm(tape, y1, &p.norm1)?;
    let (attn, _) = vbra(tape, n1, &p.attn, cfg)?;
    let y2 = tape.add(y1, attn)?;
    let n2 = nn::layer_norm(tape, y2, &p.norm2)?;
    let mlp = nn::mlp_block(tape, n2, &p.mlp)?;
    tape.add(y2, mlp)
}
