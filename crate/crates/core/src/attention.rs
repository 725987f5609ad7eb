//! Window partitioning, cyclic shifts, relative position bias and the
//! attention kernels: window self-attention (WSA), window multi-head
//! cross-attention (WMCA) and vector-token multi-head cross-attention (MCA).
//!
//! All kernels share one core: `softmax(Q K^T * scale + bias [+ mask]) V`
//! evaluated per head. Blocks carry precomputed gather indices so the batched
//! paths cost a handful of tape nodes regardless of batch or window count.

use std::rc::Rc;

use crate::error::{Result, TfkError};
use crate::nn::{InitSpec, Linear, ParamSet, INIT_STD};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// A 2-d token grid with spatial layout metadata. Tokens are stored as
/// `[batch, height * width, channels]`.
pub struct TokenGrid<T: Real> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub tokens: Tensor<T>,
}

impl<T: Real> TokenGrid<T> {
    pub fn new(height: usize, width: usize, channels: usize, tokens: Tensor<T>) -> Result<Self> {
        let s = tokens.shape();
        if s.len() != 3 || s[1] != height * width || s[2] != channels {
            return Err(TfkError::dim(
                "token_grid",
                format!("[batch, {}, {}]", height * width, channels),
                crate::tensor::fmt_shape(s),
            ));
        }
        Ok(TokenGrid {
            height,
            width,
            channels,
            tokens,
        })
    }

    /// Grid over a single sample given `[height * width, channels]` tokens.
    pub fn single(height: usize, width: usize, channels: usize, tokens: Tensor<T>) -> Result<Self> {
        let s = tokens.shape().to_vec();
        if s.len() != 2 {
            return Err(TfkError::dim(
                "token_grid",
                "[tokens, channels]",
                crate::tensor::fmt_shape(&s),
            ));
        }
        Self::new(height, width, channels, tokens.reshape(&[1, s[0], s[1]])?)
    }

    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn num_tokens(&self) -> usize {
        self.height * self.width
    }
}

/// Which fusion pathway an attention record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionBranch {
    CliToDer,
    DerToCli,
    Meta,
}

impl AttentionBranch {
    pub fn as_str(&self) -> &'static str {
        match self {
            AttentionBranch::CliToDer => "cli_to_der",
            AttentionBranch::DerToCli => "der_to_cli",
            AttentionBranch::Meta => "meta",
        }
    }
}

/// Raw attention weights captured from one kernel invocation,
/// `[heads, queries, keys]` in f64 regardless of compute precision.
#[derive(Debug, Clone)]
pub struct AttnWeights {
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    pub values: Vec<f64>,
}

impl AttnWeights {
    pub fn weight(&self, head: usize, query: usize, key: usize) -> f64 {
        self.values[(head * self.queries + query) * self.keys + key]
    }

    /// Max deviation of any (head, query) row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for h in 0..self.heads {
            for q in 0..self.queries {
                let base = (h * self.queries + q) * self.keys;
                let sum: f64 = self.values[base..base + self.keys].iter().sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
        worst
    }
}

/// A labeled attention capture: stage/block of origin plus the branch.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub stage: usize,
    pub block: usize,
    pub branch: AttentionBranch,
    pub weights: AttnWeights,
}

/// Collects attention records during a recording-enabled forward pass.
#[derive(Default)]
pub struct Recorder {
    pub records: Vec<AttentionRecord>,
}

impl Recorder {
    pub fn new() -> Self {
        Recorder::default()
    }

    pub fn push(&mut self, stage: usize, block: usize, branch: AttentionBranch, w: AttnWeights) {
        self.records.push(AttentionRecord {
            stage,
            block,
            branch,
            weights: w,
        });
    }
}

/// Exact WMSA cost: `4 h w C^2 + 2 M^2 h w C`.
pub fn wmsa_flops(h_tokens: usize, w_tokens: usize, channels: usize, window: usize) -> u128 {
    let (h, w, c, m) = (
        h_tokens as u128,
        w_tokens as u128,
        channels as u128,
        window as u128,
    );
    4 * h * w * c * c + 2 * m * m * h * w * c
}

/// Stable encoding of the 2-d displacement between two tokens of an M x M
/// window: values in `[0, (2M-1)^2)`; negating the displacement maps an index
/// `i` to `(2M-1)^2 - 1 - i`.
pub fn relative_position_index(window: usize) -> Vec<u32> {
    let m = window;
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(m * m * m * m);
    for yi in 0..m {
        for xi in 0..m {
            for yj in 0..m {
                for xj in 0..m {
                    let dy = yi as i64 - yj as i64 + (m as i64 - 1);
                    let dx = xi as i64 - xj as i64 + (m as i64 - 1);
                    idx.push((dy as u32) * span as u32 + dx as u32);
                }
            }
        }
    }
    idx
}

// ---------------------------------------------------------------------------
// Gather index builders. All are per-batch-slice indices for Tensor::gather.
// ---------------------------------------------------------------------------

/// `[rows, C] -> [heads, rows, head_dim]` packing (within one batch slice).
fn head_split_index(rows: usize, heads: usize, head_dim: usize) -> Vec<u32> {
    let c = heads * head_dim;
    let mut idx = Vec::with_capacity(rows * c);
    for h in 0..heads {
        for r in 0..rows {
            for d in 0..head_dim {
                idx.push((r * c + h * head_dim + d) as u32);
            }
        }
    }
    idx
}

/// `[heads, rows, head_dim] -> [rows, C]` unpacking (within one batch slice).
fn head_merge_index(rows: usize, heads: usize, head_dim: usize) -> Vec<u32> {
    let mut idx = Vec::with_capacity(rows * heads * head_dim);
    for r in 0..rows {
        for h in 0..heads {
            for d in 0..head_dim {
                idx.push(((h * rows + r) * head_dim + d) as u32);
            }
        }
    }
    idx
}

/// Grid tokens `[N, C] -> [nW, heads, M^2, head_dim]` window + head packing.
fn win_split_index(gh: usize, gw: usize, m: usize, heads: usize, head_dim: usize) -> Vec<u32> {
    let c = heads * head_dim;
    let mut idx = Vec::with_capacity(gh * gw * c);
    for wy in 0..gh / m {
        for wx in 0..gw / m {
            for h in 0..heads {
                for my in 0..m {
                    for mx in 0..m {
                        let t = (wy * m + my) * gw + wx * m + mx;
                        for d in 0..head_dim {
                            idx.push((t * c + h * head_dim + d) as u32);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Inverse of [`win_split_index`]: `[nW, heads, M^2, head_dim] -> [N, C]`.
fn win_merge_index(gh: usize, gw: usize, m: usize, heads: usize, head_dim: usize) -> Vec<u32> {
    let nww = gw / m;
    let m2 = m * m;
    let mut idx = Vec::with_capacity(gh * gw * heads * head_dim);
    for y in 0..gh {
        for x in 0..gw {
            let (wy, my) = (y / m, y % m);
            let (wx, mx) = (x / m, x % m);
            let w = wy * nww + wx;
            let t_in = my * m + mx;
            for h in 0..heads {
                for d in 0..head_dim {
                    idx.push((((w * heads + h) * m2 + t_in) * head_dim + d) as u32);
                }
            }
        }
    }
    idx
}

/// Cross-attention key/value packing over the token-axis concatenation of the
/// two modality grids: `[2N, C] -> [nW, heads, 2M^2, head_dim]`, where the
/// first `M^2` rows of each window come from the query modality and the rest
/// from the other modality's spatially corresponding window.
fn win_kv_cross_index(gh: usize, gw: usize, m: usize, heads: usize, head_dim: usize) -> Vec<u32> {
    let c = heads * head_dim;
    let n = gh * gw;
    let mut idx = Vec::with_capacity(2 * n * c);
    for wy in 0..gh / m {
        for wx in 0..gw / m {
            for h in 0..heads {
                for half in 0..2 {
                    for my in 0..m {
                        for mx in 0..m {
                            let t = (wy * m + my) * gw + wx * m + mx + half * n;
                            for d in 0..head_dim {
                                idx.push((t * c + h * head_dim + d) as u32);
                            }
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Gather index realizing a toroidal roll, shared with the backbone blocks.
pub(crate) fn cyclic_shift_index_for(
    gh: usize,
    gw: usize,
    c: usize,
    dy: i64,
    dx: i64,
) -> Rc<Vec<u32>> {
    Rc::new(shift_index(gh, gw, c, dy, dx))
}

/// Toroidal roll of a token grid: output `(y, x)` reads input
/// `((y + dy) mod gh, (x + dx) mod gw)`.
fn shift_index(gh: usize, gw: usize, c: usize, dy: i64, dx: i64) -> Vec<u32> {
    let mut idx = Vec::with_capacity(gh * gw * c);
    for y in 0..gh as i64 {
        for x in 0..gw as i64 {
            let sy = (y + dy).rem_euclid(gh as i64) as usize;
            let sx = (x + dx).rem_euclid(gw as i64) as usize;
            let t = sy * gw + sx;
            for ch in 0..c {
                idx.push((t * c + ch) as u32);
            }
        }
    }
    idx
}

// ---------------------------------------------------------------------------
// Windowing operations on token grids.
// ---------------------------------------------------------------------------

fn check_divisible(height: usize, width: usize, window: usize) -> Result<()> {
    if window == 0 || height % window != 0 || width % window != 0 {
        return Err(TfkError::Window {
            height,
            width,
            window,
        });
    }
    Ok(())
}

/// Rearranges a grid into non-overlapping `M x M` windows:
/// `[batch * num_windows, M^2, C]`, order-preserving within each window.
pub fn window_partition<T: Real>(grid: &TokenGrid<T>, window: usize) -> Result<Tensor<T>> {
    check_divisible(grid.height, grid.width, window)?;
    let b = grid.batch();
    let nw = (grid.height / window) * (grid.width / window);
    let idx = Rc::new(win_split_index(
        grid.height,
        grid.width,
        window,
        1,
        grid.channels,
    ));
    grid.tokens
        .gather(&idx, b, &[b * nw, window * window, grid.channels])
}

/// Exact inverse of [`window_partition`].
pub fn window_reverse<T: Real>(
    windows: &Tensor<T>,
    height: usize,
    width: usize,
    channels: usize,
    window: usize,
) -> Result<TokenGrid<T>> {
    check_divisible(height, width, window)?;
    let nw = (height / window) * (width / window);
    let s = windows.shape();
    if s.len() != 3 || s[0] % nw != 0 || s[1] != window * window || s[2] != channels {
        return Err(TfkError::dim(
            "window_reverse",
            format!("[b*{nw}, {}, {channels}]", window * window),
            crate::tensor::fmt_shape(s),
        ));
    }
    let b = s[0] / nw;
    let idx = Rc::new(win_merge_index(height, width, window, 1, channels));
    let flat = windows.reshape(&[b, nw * window * window * channels])?;
    let tokens = flat.gather(&idx, b, &[b, height * width, channels])?;
    TokenGrid::new(height, width, channels, tokens)
}

/// Toroidal roll of the token grid by `(dy, dx)`.
pub fn cyclic_shift<T: Real>(grid: &TokenGrid<T>, dy: i64, dx: i64) -> Result<TokenGrid<T>> {
    let b = grid.batch();
    let idx = Rc::new(shift_index(grid.height, grid.width, grid.channels, dy, dx));
    let tokens = grid
        .tokens
        .gather(&idx, b, &[b, grid.num_tokens(), grid.channels])?;
    TokenGrid::new(grid.height, grid.width, grid.channels, tokens)
}

/// Attention mask for a shifted grid: for each window of the shifted grid,
/// (query, key) pairs whose tokens originate from different windows of the
/// unshifted partition get `-inf` logits. Layout `[nW, M^2, M^2]`, flattened.
pub fn shift_window_mask(
    gh: usize,
    gw: usize,
    window: usize,
    dy: i64,
    dx: i64,
) -> Result<Vec<f64>> {
    check_divisible(gh, gw, window)?;
    let m = window;
    if dy.unsigned_abs() as usize >= m || dx.unsigned_abs() as usize >= m {
        return Err(TfkError::contract(
            "cyclic_shift",
            format!("|offset| must be < window size {m}, got ({dy}, {dx})"),
        ));
    }
    let m2 = m * m;
    let nwy = gh / m;
    let nwx = gw / m;
    // Pre-shift window id of the token each shifted position holds.
    let source_window = |y: usize, x: usize| -> usize {
        let oy = (y as i64 + dy).rem_euclid(gh as i64) as usize;
        let ox = (x as i64 + dx).rem_euclid(gw as i64) as usize;
        (oy / m) * nwx + ox / m
    };
    let mut mask = vec![0.0f64; nwy * nwx * m2 * m2];
    for wy in 0..nwy {
        for wx in 0..nwx {
            let w = wy * nwx + wx;
            for i in 0..m2 {
                let src_i = source_window(wy * m + i / m, wx * m + i % m);
                for j in 0..m2 {
                    let src_j = source_window(wy * m + j / m, wx * m + j % m);
                    if src_i != src_j {
                        mask[(w * m2 + i) * m2 + j] = f64::NEG_INFINITY;
                    }
                }
            }
        }
    }
    Ok(mask)
}

// ---------------------------------------------------------------------------
// Attention parameters and kernels.
// ---------------------------------------------------------------------------

/// Learned additive logits for the attention kernels.
pub enum BiasKind<T: Real> {
    /// No positional bias (vector-token MCA).
    None,
    /// Self-attention table indexed by in-window displacement:
    /// materializes `B` of shape `[heads, M^2, M^2]`.
    SelfTable { table: Tensor<T>, window: usize },
    /// Cross-attention tables, one per key half, each indexed by in-window
    /// displacement: materializes `B'` of shape `[heads, M^2, 2 M^2]`.
    CrossTables {
        own: Tensor<T>,
        other: Tensor<T>,
        window: usize,
    },
    /// Explicit `[heads, queries, keys]` matrix (tests, probes).
    Fixed(Tensor<T>),
}

/// Projection matrices, head count and bias tables for one attention kernel.
pub struct AttentionParams<T: Real> {
    pub heads: usize,
    pub dim: usize,
    pub w_q: Linear<T>,
    pub w_k: Linear<T>,
    pub w_v: Linear<T>,
    pub w_out: Linear<T>,
    pub bias: BiasKind<T>,
    bias_idx: Option<Rc<Vec<u32>>>,
}

/// Bias flavor requested at construction time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasInit {
    None,
    SelfBias { window: usize },
    CrossBias { window: usize },
}

impl<T: Real> AttentionParams<T> {
    pub fn new(
        params: &ParamSet<T>,
        path: &str,
        dim: usize,
        heads: usize,
        bias: BiasInit,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(TfkError::Config(format!(
                "attention dim {dim} not divisible by heads {heads}"
            )));
        }
        let table = |name: &str, window: usize| {
            let span = 2 * window - 1;
            params.register(
                &format!("{path}.{name}"),
                &[span * span, heads],
                InitSpec::TruncNormal { std: INIT_STD },
            )
        };
        let (bias, bias_idx) = match bias {
            BiasInit::None => (BiasKind::None, None),
            BiasInit::SelfBias { window } => {
                let rel = relative_position_index(window);
                let idx: Vec<u32> = (0..heads)
                    .flat_map(|h| rel.iter().map(move |r| r * heads as u32 + h as u32))
                    .collect();
                (
                    BiasKind::SelfTable {
                        table: table("bias_table", window),
                        window,
                    },
                    Some(Rc::new(idx)),
                )
            }
            BiasInit::CrossBias { window } => {
                let rel = relative_position_index(window);
                let span2 = (2 * window - 1) * (2 * window - 1);
                let m2 = window * window;
                // The gather runs over concat(own, other): each key row block
                // reads its own-modality half first, then the other half.
                let mut idx = Vec::with_capacity(heads * m2 * 2 * m2);
                for h in 0..heads {
                    for q in 0..m2 {
                        for k in 0..m2 {
                            idx.push(rel[q * m2 + k] * heads as u32 + h as u32);
                        }
                        for k in 0..m2 {
                            idx.push((span2 as u32 + rel[q * m2 + k]) * heads as u32 + h as u32);
                        }
                    }
                }
                (
                    BiasKind::CrossTables {
                        own: table("bias_own", window),
                        other: table("bias_other", window),
                        window,
                    },
                    Some(Rc::new(idx)),
                )
            }
        };
        Ok(AttentionParams {
            heads,
            dim,
            w_q: Linear::new(params, &format!("{path}.w_q"), dim, dim),
            w_k: Linear::new(params, &format!("{path}.w_k"), dim, dim),
            w_v: Linear::new(params, &format!("{path}.w_v"), dim, dim),
            w_out: Linear::new(params, &format!("{path}.w_out"), dim, dim),
            bias,
            bias_idx,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Materializes the learned bias as a flat `[heads, q, k]` tensor on the
    /// tape, or `None` when the kernel carries no positional bias.
    fn materialize_bias(&self) -> Result<Option<Tensor<T>>> {
        match &self.bias {
            BiasKind::None => Ok(None),
            BiasKind::SelfTable { table, window } => {
                let m2 = window * window;
                let idx = self.bias_idx.as_ref().expect("bias index built with table");
                Ok(Some(table.gather(idx, 1, &[self.heads * m2 * m2])?))
            }
            BiasKind::CrossTables { own, other, window } => {
                let m2 = window * window;
                let idx = self.bias_idx.as_ref().expect("bias index built with table");
                let cat = own.concat(other, 0)?;
                Ok(Some(cat.gather(idx, 1, &[self.heads * m2 * 2 * m2])?))
            }
            BiasKind::Fixed(b) => Ok(Some(b.reshape(&[b.len()])?)),
        }
    }
}

/// Shared kernel: per-head scaled dot-product attention with optional tiled
/// bias and mask. Inputs are `[groups, m, d]` queries and `[groups, n, d]`
/// keys/values; returns the context and, when requested, the weights.
pub(crate) fn attention_core<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    scale: f64,
    bias: Option<&Tensor<T>>,
    mask: Option<&Tensor<T>>,
    record: bool,
) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
    if k.shape() != v.shape() {
        return Err(TfkError::contract(
            "attention",
            format!(
                "key rows {} != value rows {}",
                crate::tensor::fmt_shape(k.shape()),
                crate::tensor::fmt_shape(v.shape())
            ),
        ));
    }
    let mut scores = q.bmm_bt(k)?.scale(scale);
    if let Some(b) = bias {
        scores = scores.add_tiled(b)?;
    }
    if let Some(msk) = mask {
        scores = scores.add_tiled(msk)?;
    }
    let attn = scores.softmax_last()?;
    let ctx = attn.bmm(v)?;
    let rec = if record { Some(attn.clone()) } else { None };
    Ok((ctx, rec))
}

fn weights_from(attn: &Tensor<impl Real>, heads: usize, queries: usize, keys: usize) -> AttnWeights {
    AttnWeights {
        heads,
        queries,
        keys,
        values: attn.with_data(|d| d.iter().map(|v| v.as_f64()).collect()),
    }
}

/// Reorders `[b * nw * heads, m2, keys]` attention into the record layout
/// `[heads, b * nw * m2, keys]`, so a query is addressed by its global token
/// position in window order.
fn weights_from_windowed(
    attn: &Tensor<impl Real>,
    b: usize,
    nw: usize,
    heads: usize,
    m2: usize,
    keys: usize,
) -> AttnWeights {
    let queries = b * nw * m2;
    let mut values = vec![0.0f64; heads * queries * keys];
    attn.with_data(|d| {
        for bi in 0..b {
            for w in 0..nw {
                for h in 0..heads {
                    for q in 0..m2 {
                        let src = ((((bi * nw + w) * heads + h) * m2) + q) * keys;
                        let dst = (h * queries + (bi * nw + w) * m2 + q) * keys;
                        for k in 0..keys {
                            values[dst + k] = d[src + k].as_f64();
                        }
                    }
                }
            }
        }
    });
    AttnWeights {
        heads,
        queries,
        keys,
        values,
    }
}

/// Window self-attention on one window's token sets:
/// `softmax(Q K^T / sqrt(d) + B [+ mask]) V` per head, heads concatenated,
/// then output-projected. `q` carries the query tokens (`M^2` when the bias
/// is table-driven), `k`/`v` equal-length key/value token sets.
pub fn wsa<T: Real>(
    p: &AttentionParams<T>,
    q_tokens: &Tensor<T>,
    k_tokens: &Tensor<T>,
    v_tokens: &Tensor<T>,
    mask: Option<&Tensor<T>>,
    record: bool,
) -> Result<(Tensor<T>, Option<AttnWeights>)> {
    if k_tokens.shape() != v_tokens.shape() {
        return Err(TfkError::contract(
            "wsa",
            format!(
                "key shape {} != value shape {}",
                crate::tensor::fmt_shape(k_tokens.shape()),
                crate::tensor::fmt_shape(v_tokens.shape())
            ),
        ));
    }
    let (mq, nk) = (q_tokens.shape()[0], k_tokens.shape()[0]);
    let (heads, hd) = (p.heads, p.head_dim());
    let q = p.w_q.forward(q_tokens)?;
    let k = p.w_k.forward(k_tokens)?;
    let v = p.w_v.forward(v_tokens)?;
    let idx_q = Rc::new(head_split_index(mq, heads, hd));
    let idx_k = Rc::new(head_split_index(nk, heads, hd));
    let qh = q.reshape(&[mq * p.dim])?.gather(&idx_q, 1, &[heads, mq, hd])?;
    let kh = k.reshape(&[nk * p.dim])?.gather(&idx_k, 1, &[heads, nk, hd])?;
    let vh = v.reshape(&[nk * p.dim])?.gather(&idx_k, 1, &[heads, nk, hd])?;
    let bias = p.materialize_bias()?;
    let mask_t = match mask {
        Some(m) => {
            if m.shape() != [mq, nk] {
                return Err(TfkError::dim(
                    "wsa",
                    format!("mask [{mq}, {nk}]"),
                    crate::tensor::fmt_shape(m.shape()),
                ));
            }
            Some(m.reshape(&[mq * nk])?)
        }
        None => None,
    };
    let scale = 1.0 / (hd as f64).sqrt();
    let (ctx, attn) = attention_core(&qh, &kh, &vh, scale, bias.as_ref(), mask_t.as_ref(), record)?;
    let idx_m = Rc::new(head_merge_index(mq, heads, hd));
    let merged = ctx
        .reshape(&[heads * mq * hd])?
        .gather(&idx_m, 1, &[mq, p.dim])?;
    let out = p.w_out.forward(&merged)?;
    Ok((out, attn.map(|a| weights_from(&a, heads, mq, nk))))
}

/// Vector-token multi-head cross-attention: the WSA kernel without
/// positional bias, on a `[1, D]` query against `[n, D]` keys/values.
pub fn mca<T: Real>(
    p: &AttentionParams<T>,
    query_vec: &Tensor<T>,
    kv_seq: &Tensor<T>,
    record: bool,
) -> Result<(Tensor<T>, Option<AttnWeights>)> {
    if query_vec.shape().len() != 2 || query_vec.shape()[1] != p.dim {
        return Err(TfkError::contract(
            "mca",
            format!(
                "query dim must be {}, got {}",
                p.dim,
                crate::tensor::fmt_shape(query_vec.shape())
            ),
        ));
    }
    if kv_seq.shape().len() != 2 || kv_seq.shape()[1] != p.dim || kv_seq.shape()[0] == 0 {
        return Err(TfkError::contract(
            "mca",
            format!(
                "kv must be [n>=1, {}], got {}",
                p.dim,
                crate::tensor::fmt_shape(kv_seq.shape())
            ),
        ));
    }
    if !matches!(p.bias, BiasKind::None) {
        return Err(TfkError::contract("mca", "mca carries no positional bias"));
    }
    wsa(p, query_vec, kv_seq, kv_seq, None, record)
}

// ---------------------------------------------------------------------------
// Batched windowed attention used by backbone and fusion blocks.
// ---------------------------------------------------------------------------

/// Precomputed plumbing for windowed attention over a fixed grid geometry.
/// Handles both the self path (queries and keys from one grid) and the cross
/// path (keys/values from the token-axis concatenation of two grids).
pub struct WindowAttention<T: Real> {
    pub params: AttentionParams<T>,
    grid_h: usize,
    grid_w: usize,
    window: usize,
    cross: bool,
    idx_split: Rc<Vec<u32>>,
    idx_kv: Rc<Vec<u32>>,
    idx_merge: Rc<Vec<u32>>,
}

impl<T: Real> WindowAttention<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &ParamSet<T>,
        path: &str,
        grid_h: usize,
        grid_w: usize,
        dim: usize,
        heads: usize,
        window: usize,
        cross: bool,
    ) -> Result<Self> {
        check_divisible(grid_h, grid_w, window)?;
        let bias = if cross {
            BiasInit::CrossBias { window }
        } else {
            BiasInit::SelfBias { window }
        };
        let p = AttentionParams::new(params, path, dim, heads, bias)?;
        let hd = dim / heads;
        let idx_split = Rc::new(win_split_index(grid_h, grid_w, window, heads, hd));
        let idx_kv = if cross {
            Rc::new(win_kv_cross_index(grid_h, grid_w, window, heads, hd))
        } else {
            Rc::clone(&idx_split)
        };
        let idx_merge = Rc::new(win_merge_index(grid_h, grid_w, window, heads, hd));
        Ok(WindowAttention {
            params: p,
            grid_h,
            grid_w,
            window,
            cross,
            idx_split,
            idx_kv,
            idx_merge,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn num_windows(&self) -> usize {
        (self.grid_h / self.window) * (self.grid_w / self.window)
    }

    /// Self path. `x` is `[B, N, C]` (already normalized by the caller);
    /// `mask` is the flat `[nW, heads, M^2, M^2]` shift mask.
    pub fn forward_self(
        &self,
        x: &Tensor<T>,
        mask: Option<&Tensor<T>>,
        record: bool,
    ) -> Result<(Tensor<T>, Option<AttnWeights>)> {
        debug_assert!(!self.cross);
        let (b, n) = (x.shape()[0], x.shape()[1]);
        let (heads, hd, c) = (self.params.heads, self.params.head_dim(), self.params.dim);
        let m2 = self.window * self.window;
        let nw = self.num_windows();
        let groups = b * nw * heads;
        let q = self.params.w_q.forward(x)?;
        let k = self.params.w_k.forward(x)?;
        let v = self.params.w_v.forward(x)?;
        let qh = q.gather(&self.idx_split, b, &[groups, m2, hd])?;
        let kh = k.gather(&self.idx_split, b, &[groups, m2, hd])?;
        let vh = v.gather(&self.idx_split, b, &[groups, m2, hd])?;
        let bias = self.params.materialize_bias()?;
        let scale = 1.0 / (hd as f64).sqrt();
        let (ctx, attn) = attention_core(&qh, &kh, &vh, scale, bias.as_ref(), mask, record)?;
        let merged = ctx
            .reshape(&[b, nw * heads * m2 * hd])?
            .gather(&self.idx_merge, b, &[b, n, c])?;
        let out = self.params.w_out.forward(&merged)?;
        Ok((
            out,
            attn.map(|a| weights_from_windowed(&a, b, nw, heads, m2, m2)),
        ))
    }

    /// Cross path: queries from `own`, keys/values from the row
    /// concatenation `[own; other]` of spatially corresponding windows, so
    /// every window's K'/V' has exactly `2 M^2` rows. Inputs are already
    /// normalized `[B, N, C]` token tensors.
    pub fn forward_cross(
        &self,
        own: &Tensor<T>,
        other: &Tensor<T>,
        mask: Option<&Tensor<T>>,
        record: bool,
    ) -> Result<(Tensor<T>, Option<AttnWeights>)> {
        debug_assert!(self.cross);
        if own.shape() != other.shape() {
            return Err(TfkError::contract(
                "wmca",
                format!(
                    "modality shapes differ: {} vs {}",
                    crate::tensor::fmt_shape(own.shape()),
                    crate::tensor::fmt_shape(other.shape())
                ),
            ));
        }
        let (b, n) = (own.shape()[0], own.shape()[1]);
        let (heads, hd, c) = (self.params.heads, self.params.head_dim(), self.params.dim);
        let m2 = self.window * self.window;
        let nw = self.num_windows();
        let groups = b * nw * heads;
        let q = self.params.w_q.forward(own)?;
        let kv_in = own.concat(other, 1)?;
        let k = self.params.w_k.forward(&kv_in)?;
        let v = self.params.w_v.forward(&kv_in)?;
        let qh = q.gather(&self.idx_split, b, &[groups, m2, hd])?;
        let kh = k.gather(&self.idx_kv, b, &[groups, 2 * m2, hd])?;
        let vh = v.gather(&self.idx_kv, b, &[groups, 2 * m2, hd])?;
        debug_assert_eq!(kh.shape()[1], 2 * m2);
        let bias = self.params.materialize_bias()?;
        let scale = 1.0 / ((c / heads) as f64).sqrt();
        let (ctx, attn) = attention_core(&qh, &kh, &vh, scale, bias.as_ref(), mask, record)?;
        let merged = ctx
            .reshape(&[b, nw * heads * m2 * hd])?
            .gather(&self.idx_merge, b, &[b, n, c])?;
        let out = self.params.w_out.forward(&merged)?;
        Ok((
            out,
            attn.map(|a| weights_from_windowed(&a, b, nw, heads, m2, 2 * m2)),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamSet;
    use crate::tensor::grad_check;

    fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn rand_vec(rng: &mut crate::rng::SplitRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect()
    }

    fn set_identity(lin: &Linear<f64>, dim: usize) {
        lin.w.with_data_mut(|d| {
            d.fill(0.0);
            for i in 0..dim {
                d[i * dim + i] = 1.0;
            }
        });
    }

    #[test]
    fn partition_single_window_preserves_order() {
        let tokens: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let grid = TokenGrid::single(4, 4, 1, t64(&[16, 1], &tokens)).unwrap();
        let windows = window_partition(&grid, 4).unwrap();
        assert_eq!(windows.shape(), &[1, 16, 1]);
        assert_eq!(windows.to_vec(), tokens);
    }

    #[test]
    fn partition_counts_windows() {
        let grid = TokenGrid::single(8, 8, 2, Tensor::<f64>::zeros(&[64, 2])).unwrap();
        let windows = window_partition(&grid, 4).unwrap();
        assert_eq!(windows.shape(), &[4, 16, 2]);
    }

    #[test]
    fn partition_rejects_indivisible_grid() {
        let grid = TokenGrid::single(6, 6, 1, Tensor::<f64>::zeros(&[36, 1])).unwrap();
        let err = window_partition(&grid, 4).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('6') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn partition_reverse_is_bitwise_inverse() {
        let mut rng = crate::rng::SplitRng::for_path(31, "part-rev");
        for &(h, w, m, c) in &[(4usize, 4usize, 2usize, 3usize), (8, 4, 4, 2), (6, 6, 3, 5)] {
            let data = rand_vec(&mut rng, h * w * c);
            let grid = TokenGrid::single(h, w, c, t64(&[h * w, c], &data)).unwrap();
            let windows = window_partition(&grid, m).unwrap();
            let back = window_reverse(&windows, h, w, c, m).unwrap();
            assert_eq!(back.tokens.to_vec(), data);
        }
    }

    #[test]
    fn shift_zero_is_identity_with_empty_mask() {
        let data: Vec<f64> = (0..32).map(|v| v as f64).collect();
        let grid = TokenGrid::single(4, 4, 2, t64(&[16, 2], &data)).unwrap();
        let shifted = cyclic_shift(&grid, 0, 0).unwrap();
        assert_eq!(shifted.tokens.to_vec(), data);
        let mask = shift_window_mask(4, 4, 2, 0, 0).unwrap();
        assert!(mask.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shift_then_unshift_is_identity() {
        let mut rng = crate::rng::SplitRng::for_path(32, "shift");
        let data = rand_vec(&mut rng, 8 * 8 * 3);
        let grid = TokenGrid::single(8, 8, 3, t64(&[64, 3], &data)).unwrap();
        let shifted = cyclic_shift(&grid, 2, 2).unwrap();
        let back = cyclic_shift(&shifted, -2, -2).unwrap();
        assert_eq!(back.tokens.to_vec(), data);
    }

    #[test]
    fn shift_mask_matches_brute_force_membership() {
        // 8x8 grid, M=4, offset (2,2): enumerate source-window membership.
        let (gh, gw, m, dy, dx) = (8usize, 8usize, 4usize, 2i64, 2i64);
        let mask = shift_window_mask(gh, gw, m, dy, dx).unwrap();
        let m2 = m * m;
        let nwx = gw / m;
        for wy in 0..gh / m {
            for wx in 0..gw / m {
                let w = wy * nwx + wx;
                for i in 0..m2 {
                    for j in 0..m2 {
                        let src = |t: usize| {
                            let y = wy * m + t / m;
                            let x = wx * m + t % m;
                            let oy = (y as i64 + dy).rem_euclid(gh as i64) as usize;
                            let ox = (x as i64 + dx).rem_euclid(gw as i64) as usize;
                            (oy / m, ox / m)
                        };
                        let expect_masked = src(i) != src(j);
                        let got = mask[(w * m2 + i) * m2 + j];
                        assert_eq!(expect_masked, got == f64::NEG_INFINITY);
                    }
                }
            }
        }
        assert!(mask.iter().any(|v| *v == f64::NEG_INFINITY));
    }

    #[test]
    fn relative_index_basics() {
        let idx1 = relative_position_index(1);
        assert_eq!(idx1, vec![0]);

        let idx2 = relative_position_index(2);
        assert_eq!(idx2.len(), 16);
        let mut distinct: Vec<u32> = idx2.clone();
        distinct.sort_unstable();
        distinct.dedup();
        assert_eq!(distinct.len(), 9);

        // Zero displacement encodes identically on the diagonal.
        let m = 3usize;
        let idx3 = relative_position_index(m);
        let m2 = m * m;
        let diag = idx3[0];
        for i in 0..m2 {
            assert_eq!(idx3[i * m2 + i], diag);
        }
        // Negating the displacement mirrors the index.
        let max = ((2 * m - 1) * (2 * m - 1) - 1) as u32;
        for i in 0..m2 {
            for j in 0..m2 {
                assert_eq!(idx3[i * m2 + j] + idx3[j * m2 + i], max);
            }
        }
    }

    #[test]
    fn wmsa_flops_pinned_values() {
        assert_eq!(wmsa_flops(56, 56, 96, 7), 145_108_992);
        assert_eq!(wmsa_flops(1, 1, 1, 1), 6);
        // Linearity in token count.
        let base = wmsa_flops(8, 8, 16, 4);
        assert_eq!(wmsa_flops(16, 8, 16, 4), 2 * base);
    }

    fn plain_params(dim: usize, heads: usize, window: Option<usize>) -> AttentionParams<f64> {
        let ps: ParamSet<f64> = ParamSet::new(77);
        let bias = match window {
            Some(m) => BiasInit::SelfBias { window: m },
            None => BiasInit::None,
        };
        AttentionParams::new(&ps, "attn", dim, heads, bias).unwrap()
    }

    #[test]
    fn wsa_single_token_identity_returns_value_row() {
        let p = plain_params(2, 1, None);
        set_identity(&p.w_q, 2);
        set_identity(&p.w_k, 2);
        set_identity(&p.w_v, 2);
        set_identity(&p.w_out, 2);
        let q = t64(&[1, 2], &[0.3, -0.8]);
        let v = t64(&[1, 2], &[5.0, 7.0]);
        let (out, _) = wsa(&p, &q, &v, &v, None, false).unwrap();
        assert_eq!(out.to_vec(), vec![5.0, 7.0]);
    }

    #[test]
    fn wsa_saturating_bias_selects_key_column() {
        let mut p = plain_params(2, 1, None);
        set_identity(&p.w_q, 2);
        set_identity(&p.w_k, 2);
        set_identity(&p.w_v, 2);
        set_identity(&p.w_out, 2);
        // +1e6 bias on key column 2 saturates the softmax there.
        let mut bias = vec![0.0; 9];
        bias[2] = 1e6;
        bias[3 + 2] = 1e6;
        bias[6 + 2] = 1e6;
        p.bias = BiasKind::Fixed(t64(&[1, 3, 3], &bias));
        let mut rng = crate::rng::SplitRng::for_path(41, "sat");
        let q = t64(&[3, 2], &rand_vec(&mut rng, 6));
        let kv = t64(&[3, 2], &rand_vec(&mut rng, 6));
        let (out, _) = wsa(&p, &q, &kv, &kv, None, false).unwrap();
        let kvv = kv.to_vec();
        for r in 0..3 {
            assert!((out.to_vec()[r * 2] - kvv[4]).abs() < 1e-4);
            assert!((out.to_vec()[r * 2 + 1] - kvv[5]).abs() < 1e-4);
        }
    }

    #[test]
    fn wsa_rejects_kv_row_mismatch() {
        let p = plain_params(2, 1, None);
        let q = t64(&[2, 2], &[0.0; 4]);
        let k = t64(&[2, 2], &[0.0; 4]);
        let v = t64(&[3, 2], &[0.0; 6]);
        assert!(matches!(
            wsa(&p, &q, &k, &v, None, false).unwrap_err(),
            TfkError::Contract { .. }
        ));
    }

    /// Straight-line scalar oracle for one-head attention with projections,
    /// bias matrix and output projection.
    #[allow(clippy::too_many_arguments)]
    fn wsa_oracle(
        q: &[f64],
        k: &[f64],
        v: &[f64],
        wq: &[f64],
        wk: &[f64],
        wv: &[f64],
        wo: &[f64],
        bq: &[f64],
        bk: &[f64],
        bv: &[f64],
        bo: &[f64],
        bias: &[f64],
        m: usize,
        n: usize,
        c: usize,
    ) -> Vec<f64> {
        let proj = |x: &[f64], w: &[f64], b: &[f64], rows: usize| -> Vec<f64> {
            let mut out = vec![0.0; rows * c];
            for r in 0..rows {
                for j in 0..c {
                    let mut acc = b[j];
                    for l in 0..c {
                        acc += x[r * c + l] * w[l * c + j];
                    }
                    out[r * c + j] = acc;
                }
            }
            out
        };
        let qp = proj(q, wq, bq, m);
        let kp = proj(k, wk, bk, n);
        let vp = proj(v, wv, bv, n);
        let scale = 1.0 / (c as f64).sqrt();
        let mut ctx = vec![0.0; m * c];
        for i in 0..m {
            let mut logits = vec![0.0; n];
            for (j, l) in logits.iter_mut().enumerate() {
                let mut acc = 0.0;
                for d in 0..c {
                    acc += qp[i * c + d] * kp[j * c + d];
                }
                *l = acc * scale + bias[i * n + j];
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..n {
                let a = exps[j] / sum;
                for d in 0..c {
                    ctx[i * c + d] += a * vp[j * c + d];
                }
            }
        }
        proj(&ctx, wo, bo, m)
    }

    #[test]
    fn wsa_matches_straight_line_oracle() {
        let mut rng = crate::rng::SplitRng::for_path(43, "wsa-oracle");
        let c = 4;
        let p = plain_params(c, 1, None);
        for trial in 0..20 {
            let fill = |t: &Tensor<f64>, rng: &mut crate::rng::SplitRng| {
                let v = rand_vec(rng, t.len());
                t.with_data_mut(|d| d.copy_from_slice(&v));
                v
            };
            let wq = fill(&p.w_q.w, &mut rng);
            let bq = fill(p.w_q.b.as_ref().unwrap(), &mut rng);
            let wk = fill(&p.w_k.w, &mut rng);
            let bk = fill(p.w_k.b.as_ref().unwrap(), &mut rng);
            let wv = fill(&p.w_v.w, &mut rng);
            let bv = fill(p.w_v.b.as_ref().unwrap(), &mut rng);
            let wo = fill(&p.w_out.w, &mut rng);
            let bo = fill(p.w_out.b.as_ref().unwrap(), &mut rng);
            let qd = rand_vec(&mut rng, 3 * c);
            let kd = rand_vec(&mut rng, 3 * c);
            let q = t64(&[3, c], &qd);
            let kv = t64(&[3, c], &kd);
            let (out, rec) = wsa(&p, &q, &kv, &kv, None, true).unwrap();
            let expect = wsa_oracle(
                &qd,
                &kd,
                &kd,
                &wq,
                &wk,
                &wv,
                &wo,
                &bq,
                &bk,
                &bv,
                &bo,
                &vec![0.0; 9],
                3,
                3,
                c,
            );
            for (g, e) in out.to_vec().iter().zip(&expect) {
                assert!((g - e).abs() < 1e-10, "trial {trial}: {g} vs {e}");
            }
            assert!(rec.unwrap().max_row_sum_error() < 1e-12);
        }
    }

    #[test]
    fn mca_identity_and_uniform_cases() {
        let p = plain_params(2, 1, None);
        set_identity(&p.w_q, 2);
        set_identity(&p.w_k, 2);
        set_identity(&p.w_v, 2);
        set_identity(&p.w_out, 2);
        // n=1: output equals the single value row.
        let q = t64(&[1, 2], &[0.1, 0.2]);
        let kv = t64(&[1, 2], &[3.0, -4.0]);
        let (out, _) = mca(&p, &q, &kv, false).unwrap();
        assert_eq!(out.to_vec(), vec![3.0, -4.0]);

        // Zero query projection: uniform attention, output = mean of rows.
        p.w_q.w.with_data_mut(|d| d.fill(0.0));
        let kv = t64(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let (out, rec) = mca(&p, &q, &kv, true).unwrap();
        assert!((out.to_vec()[0] - 3.0).abs() < 1e-12);
        assert!((out.to_vec()[1] - 4.0).abs() < 1e-12);
        let rec = rec.unwrap();
        for k in 0..3 {
            assert!((rec.weight(0, 0, k) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_nonnegative_and_sum_to_one() {
        let mut rng = crate::rng::SplitRng::for_path(44, "rowsum");
        let p = plain_params(4, 2, None);
        for _ in 0..20 {
            let q = t64(&[2, 4], &rand_vec(&mut rng, 8));
            let kv = t64(&[5, 4], &rand_vec(&mut rng, 20));
            let (_, rec) = mca(&p, &q, &kv, true).unwrap();
            let rec = rec.unwrap();
            assert!(rec.max_row_sum_error() < 1e-5);
            assert!(rec.values.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn wsa_gradients_check_out() {
        let p = plain_params(4, 2, Some(2));
        let mut rng = crate::rng::SplitRng::for_path(45, "wsa-grad");
        let q = t64(&[4, 4], &rand_vec(&mut rng, 16)).with_grad();
        let kv = t64(&[4, 4], &rand_vec(&mut rng, 16));
        let err = grad_check(
            |q| Ok(wsa(&p, q, &kv, &kv, None, false)?.0.sum_all()),
            &q,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "rel err {err}");
        // And through a parameter: the bias table.
        if let BiasKind::SelfTable { table, .. } = &p.bias {
            let err = grad_check(
                |_| Ok(wsa(&p, &q, &kv, &kv, None, false)?.0.sum_all()),
                table,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "bias table rel err {err}");
        } else {
            unreachable!()
        }
    }
}
