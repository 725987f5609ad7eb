//! Image-modality fusion blocks, pooling heads, the meta-data MLP and the
//! heterogeneous post-fusion block.
//!
//! Each HMT block runs two symmetric cross-attention branches: one takes the
//! dermoscopic tokens as queries against the concatenation of both
//! modalities' windows, the other the clinical tokens. A stack of these
//! blocks follows the backbone stages; the previous stage's fused output is
//! carried through the backbone's own patch-merging parameters and added to
//! the next stage's features. The MTP block then passes the pooled image
//! information into the meta-data feature via vector-token cross-attention.

use std::rc::Rc;

use crate::attention::{
    shift_window_mask, AttentionBranch, AttentionParams, AttnWeights, BiasInit, TokenGrid,
    WindowAttention,
};
use crate::backbone::PatchMerging;
use crate::error::{Result, TfkError};
use crate::nn::{LayerNorm, Linear, Mlp, ParamSet};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// How a stage combines the backbone feature with the carried fusion output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BridgeMode {
    /// Carry the previous fused output through the next patch merging and
    /// add it elementwise to the backbone's stage feature.
    Sum,
    /// Feed each stage from the backbone alone (ablation).
    BackboneOnly,
}

/// Which cross-attention branches an HMT block runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HmtBranchMode {
    Dual,
    CliToDer,
    DerToCli,
}

/// Stack layout and head geometry of the fusion pathway.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionConfig {
    /// HMT blocks per stage; 0 disables fusion at that stage.
    pub stage_counts: [usize; 4],
    pub bridge: BridgeMode,
    pub branch_mode: HmtBranchMode,
    /// Output dimension of the pooling heads, the meta MLP and MTP.
    pub head_dim: usize,
    pub mtp_heads: usize,
    /// Shift flag for the HMT attention windows (off by default).
    pub hmt_shift: bool,
    /// Hidden ratio of the in-block MLPs.
    pub mlp_ratio: f64,
    /// Hidden width of the MTP MLP.
    pub mtp_hidden: usize,
    /// One-hot meta-data length.
    pub meta_len: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            stage_counts: [1, 1, 1, 1],
            bridge: BridgeMode::Sum,
            branch_mode: HmtBranchMode::Dual,
            head_dim: 128,
            mtp_heads: 4,
            hmt_shift: false,
            mlp_ratio: 4.0,
            mtp_hidden: 128,
            meta_len: 20,
        }
    }
}

impl FusionConfig {
    pub fn total_blocks(&self) -> usize {
        self.stage_counts.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.mtp_heads == 0 || self.head_dim % self.mtp_heads != 0 {
            return Err(TfkError::Config(format!(
                "head_dim {} must be positive and divisible by mtp_heads {}",
                self.head_dim, self.mtp_heads
            )));
        }
        if self.meta_len == 0 {
            return Err(TfkError::Config("meta_len must be positive".to_string()));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(TfkError::Config(format!(
                "mlp_ratio must be positive, got {}",
                self.mlp_ratio
            )));
        }
        Ok(())
    }
}

/// The fused vectors produced by the heads and the MTP block.
pub struct FusedFeatures<T: Real> {
    pub f_cli: Tensor<T>,
    pub f_der: Tensor<T>,
    pub f_meta0: Tensor<T>,
    pub f_meta: Tensor<T>,
}

/// One direction of the dual-branch block: `own` tokens query the
/// concatenation of both modalities, then a pre-norm MLP refines the result.
pub struct HmtBranch<T: Real> {
    ln_own: LayerNorm<T>,
    ln_other: LayerNorm<T>,
    attn: WindowAttention<T>,
    ln2: LayerNorm<T>,
    mlp: Mlp<T>,
    shift: Option<ShiftPlumbing<T>>,
    channels: usize,
    tokens: usize,
}

struct ShiftPlumbing<T: Real> {
    fwd: Rc<Vec<u32>>,
    bwd: Rc<Vec<u32>>,
    mask: Tensor<T>,
}

impl<T: Real> HmtBranch<T> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        params: &ParamSet<T>,
        path: &str,
        grid_h: usize,
        grid_w: usize,
        channels: usize,
        heads: usize,
        window: usize,
        shifted: bool,
        mlp_ratio: f64,
    ) -> Result<Self> {
        let ln_own = LayerNorm::new(params, &format!("{path}.ln_own"), channels);
        let ln_other = LayerNorm::new(params, &format!("{path}.ln_other"), channels);
        let attn = WindowAttention::new(
            params,
            &format!("{path}.attn"),
            grid_h,
            grid_w,
            channels,
            heads,
            window,
            true,
        )?;
        let ln2 = LayerNorm::new(params, &format!("{path}.ln2"), channels);
        let hidden = crate::nn::mlp_block_hidden(channels, mlp_ratio)?;
        let mlp = Mlp::new(params, &format!("{path}.mlp"), channels, hidden);

        let s = (window / 2) as i64;
        let shift = if shifted && s > 0 && (grid_h > window || grid_w > window) {
            let fwd = crate::attention::cyclic_shift_index_for(grid_h, grid_w, channels, s, s);
            let bwd = crate::attention::cyclic_shift_index_for(grid_h, grid_w, channels, -s, -s);
            let base = shift_window_mask(grid_h, grid_w, window, s, s)?;
            // Keys are [own window; other window]; both halves share the
            // window's spatial membership, so the mask tiles twice.
            let m2 = window * window;
            let nw = (grid_h / window) * (grid_w / window);
            let mut full = Vec::with_capacity(nw * heads * m2 * 2 * m2);
            for w in 0..nw {
                let blk = &base[w * m2 * m2..(w + 1) * m2 * m2];
                for _ in 0..heads {
                    for q in 0..m2 {
                        let row = &blk[q * m2..(q + 1) * m2];
                        for _half in 0..2 {
                            full.extend(row.iter().map(|v| T::from_f64(*v)));
                        }
                    }
                }
            }
            Some(ShiftPlumbing {
                fwd,
                bwd,
                mask: Tensor::from_vec(&[nw * heads * m2 * 2 * m2], full)?,
            })
        } else {
            None
        };
        Ok(HmtBranch {
            ln_own,
            ln_other,
            attn,
            ln2,
            mlp,
            shift,
            channels,
            tokens: grid_h * grid_w,
        })
    }

    /// `own` and `other` are `[B, N, C]`; returns the fused `own` stream.
    fn forward(
        &self,
        own: &Tensor<T>,
        other: &Tensor<T>,
        record: bool,
    ) -> Result<(Tensor<T>, Option<AttnWeights>)> {
        let b = own.shape()[0];
        let normed_own = self.ln_own.forward(own)?;
        let normed_other = self.ln_other.forward(other)?;
        let (ca, rec) = match &self.shift {
            None => self
                .attn
                .forward_cross(&normed_own, &normed_other, None, record)?,
            Some(sp) => {
                let shape = [b, self.tokens, self.channels];
                let so = normed_own.gather(&sp.fwd, b, &shape)?;
                let st = normed_other.gather(&sp.fwd, b, &shape)?;
                let (out, rec) = self.attn.forward_cross(&so, &st, Some(&sp.mask), record)?;
                (out.gather(&sp.bwd, b, &shape)?, rec)
            }
        };
        let tokens_ca = ca.add(own)?;
        let out = self.mlp.forward(&self.ln2.forward(&tokens_ca)?)?.add(&tokens_ca)?;
        Ok((out, rec))
    }
}

/// Dual-branch fusion block for one stage geometry.
pub struct HmtBlock<T: Real> {
    der_branch: HmtBranch<T>,
    cli_branch: HmtBranch<T>,
    mode: HmtBranchMode,
}

impl<T: Real> HmtBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        params: &ParamSet<T>,
        path: &str,
        grid_h: usize,
        grid_w: usize,
        channels: usize,
        heads: usize,
        window: usize,
        shifted: bool,
        mlp_ratio: f64,
        mode: HmtBranchMode,
    ) -> Result<Self> {
        Ok(HmtBlock {
            der_branch: HmtBranch::new(
                params,
                &format!("{path}.der"),
                grid_h,
                grid_w,
                channels,
                heads,
                window,
                shifted,
                mlp_ratio,
            )?,
            cli_branch: HmtBranch::new(
                params,
                &format!("{path}.cli"),
                grid_h,
                grid_w,
                channels,
                heads,
                window,
                shifted,
                mlp_ratio,
            )?,
            mode,
        })
    }

    /// Runs both branches on the block inputs (symmetric, not sequential).
    /// Returns the fused grids and any captured attention weights labeled by
    /// branch direction.
    pub fn forward(
        &self,
        der: &TokenGrid<T>,
        cli: &TokenGrid<T>,
        record: bool,
    ) -> Result<(TokenGrid<T>, TokenGrid<T>, Vec<(AttentionBranch, AttnWeights)>)> {
        if (der.height, der.width, der.channels) != (cli.height, cli.width, cli.channels) {
            return Err(TfkError::contract(
                "hmt_block",
                format!(
                    "modality grids differ: {}x{}x{} vs {}x{}x{}",
                    der.height, der.width, der.channels, cli.height, cli.width, cli.channels
                ),
            ));
        }
        let mut records = Vec::new();
        let der_out = if self.mode != HmtBranchMode::DerToCli {
            let (out, rec) = self.der_branch.forward(&der.tokens, &cli.tokens, record)?;
            if let Some(r) = rec {
                records.push((AttentionBranch::CliToDer, r));
            }
            out
        } else {
            der.tokens.clone()
        };
        let cli_out = if self.mode != HmtBranchMode::CliToDer {
            let (out, rec) = self.cli_branch.forward(&cli.tokens, &der.tokens, record)?;
            if let Some(r) = rec {
                records.push((AttentionBranch::DerToCli, r));
            }
            out
        } else {
            cli.tokens.clone()
        };
        Ok((
            TokenGrid::new(der.height, der.width, der.channels, der_out)?,
            TokenGrid::new(cli.height, cli.width, cli.channels, cli_out)?,
            records,
        ))
    }
}

/// Per-stage stack of HMT blocks with inter-stage bridging.
pub struct HmtStack<T: Real> {
    pub config: FusionConfig,
    blocks: Vec<Vec<HmtBlock<T>>>,
}

impl<T: Real> HmtStack<T> {
    /// `stage_geom[i]` is `(grid_h, grid_w, channels, heads, window)` of
    /// stage `i`, matching the backbone law.
    pub fn new(
        params: &ParamSet<T>,
        path: &str,
        config: &FusionConfig,
        stage_geom: &[(usize, usize, usize, usize, usize); 4],
    ) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(4);
        for (stage, &(gh, gw, c, heads, window)) in stage_geom.iter().enumerate() {
            let mut stage_blocks = Vec::with_capacity(config.stage_counts[stage]);
            for blk in 0..config.stage_counts[stage] {
                stage_blocks.push(HmtBlock::new(
                    params,
                    &format!("{path}.stage{}.block{}", stage + 1, blk),
                    gh,
                    gw,
                    c,
                    heads,
                    window,
                    config.hmt_shift,
                    config.mlp_ratio,
                    config.branch_mode,
                )?);
            }
            blocks.push(stage_blocks);
        }
        Ok(HmtStack {
            config: config.clone(),
            blocks,
        })
    }

    pub fn blocks_at_stage(&self, stage: usize) -> usize {
        self.blocks[stage].len()
    }

    /// Runs the stack over per-stage backbone features. `der_merges` /
    /// `cli_merges` are the backbone patch-merging layers entering stages
    /// 2-4 (index 1-3); the carried fusion output reuses them as its
    /// resolution adapter before the elementwise bridge add.
    ///
    /// Returns the final stage's fused grids and any attention records.
    pub fn forward(
        &self,
        der: &[TokenGrid<T>],
        cli: &[TokenGrid<T>],
        der_merges: &[Option<&PatchMerging<T>>; 4],
        cli_merges: &[Option<&PatchMerging<T>>; 4],
        record: bool,
    ) -> Result<(TokenGrid<T>, TokenGrid<T>, Vec<crate::attention::AttentionRecord>)> {
        if der.len() != 4 || cli.len() != 4 {
            return Err(TfkError::contract(
                "hmt_stack",
                format!("expected 4 stage features, got {}/{}", der.len(), cli.len()),
            ));
        }
        let mut carry: Option<(TokenGrid<T>, TokenGrid<T>)> = None;
        let mut result: Option<(TokenGrid<T>, TokenGrid<T>)> = None;
        let mut records = Vec::new();
        for stage in 0..4 {
            // Adapt the carried fused output to this stage's resolution.
            if stage > 0 {
                if let Some((cd, cc)) = carry.take() {
                    let dm = der_merges[stage].ok_or_else(|| {
                        TfkError::contract("hmt_stack", "missing merge layer for bridge")
                    })?;
                    let cm = cli_merges[stage].ok_or_else(|| {
                        TfkError::contract("hmt_stack", "missing merge layer for bridge")
                    })?;
                    carry = Some((dm.forward(&cd)?, cm.forward(&cc)?));
                }
            }
            let mut x_der = clone_grid(&der[stage])?;
            let mut x_cli = clone_grid(&cli[stage])?;
            if self.config.bridge == BridgeMode::Sum {
                if let Some((cd, cc)) = &carry {
                    x_der = TokenGrid::new(
                        x_der.height,
                        x_der.width,
                        x_der.channels,
                        x_der.tokens.add(&cd.tokens)?,
                    )?;
                    x_cli = TokenGrid::new(
                        x_cli.height,
                        x_cli.width,
                        x_cli.channels,
                        x_cli.tokens.add(&cc.tokens)?,
                    )?;
                }
            }
            if !self.blocks[stage].is_empty() {
                for (blk_idx, block) in self.blocks[stage].iter().enumerate() {
                    let (d, c, recs) = block.forward(&x_der, &x_cli, record)?;
                    x_der = d;
                    x_cli = c;
                    for (branch, w) in recs {
                        records.push(crate::attention::AttentionRecord {
                            stage: stage + 1,
                            block: blk_idx,
                            branch,
                            weights: w,
                        });
                    }
                }
                carry = Some((clone_grid(&x_der)?, clone_grid(&x_cli)?));
            }
            if stage == 3 {
                result = Some((x_der, x_cli));
            }
        }
        let (d, c) = result.expect("stage loop always sets the final result");
        Ok((d, c, records))
    }
}

fn clone_grid<T: Real>(g: &TokenGrid<T>) -> Result<TokenGrid<T>> {
    TokenGrid::new(g.height, g.width, g.channels, g.tokens.clone())
}

/// Global average pool over tokens followed by a fully connected layer.
pub struct PoolHead<T: Real> {
    pub proj: Linear<T>,
}

impl<T: Real> PoolHead<T> {
    pub fn new(params: &ParamSet<T>, path: &str, in_channels: usize, out_dim: usize) -> Self {
        PoolHead {
            proj: Linear::new(params, path, in_channels, out_dim),
        }
    }

    pub fn forward(&self, grid: &TokenGrid<T>) -> Result<Tensor<T>> {
        if grid.num_tokens() == 0 {
            return Err(TfkError::contract("head", "empty token grid"));
        }
        self.proj.forward(&grid.tokens.mean_tokens()?)
    }
}

/// Two fully connected layers with GELU between, mapping the one-hot
/// meta-data to the fusion dimension.
pub struct MetaMlp<T: Real> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    in_len: usize,
}

impl<T: Real> MetaMlp<T> {
    pub fn new(params: &ParamSet<T>, path: &str, in_len: usize, out_dim: usize) -> Self {
        MetaMlp {
            fc1: Linear::new(params, &format!("{path}.fc1"), in_len, out_dim),
            fc2: Linear::new(params, &format!("{path}.fc2"), out_dim, out_dim),
            in_len,
        }
    }

    /// `[B, meta_len]` one-hot to `[B, out]`. Soft inputs are allowed but
    /// flagged, since encoders should be producing {0, 1} entries.
    pub fn forward(&self, onehot: &Tensor<T>) -> Result<Tensor<T>> {
        let s = onehot.shape();
        if s.last() != Some(&self.in_len) {
            return Err(TfkError::dim(
                "meta_mlp",
                format!("[.., {}]", self.in_len),
                crate::tensor::fmt_shape(s),
            ));
        }
        let binary = onehot.with_data(|d| d.iter().all(|v| *v == T::zero() || *v == T::one()));
        if !binary {
            log::warn!("meta_mlp: input is not strictly binary");
        }
        self.fc2.forward(&self.fc1.forward(onehot)?.gelu())
    }
}

/// Heterogeneous post-fusion: the meta feature queries the token sequence
/// `[f_meta0; f_cli; f_der]` via multi-head cross-attention, with residual
/// and pre-norm MLP sublayers.
pub struct MtpBlock<T: Real> {
    ln_meta: LayerNorm<T>,
    ln_img: LayerNorm<T>,
    pub attn: AttentionParams<T>,
    ln2: LayerNorm<T>,
    mlp: Mlp<T>,
    dim: usize,
    idx_q_split: Rc<Vec<u32>>,
    idx_kv_split: Rc<Vec<u32>>,
}

impl<T: Real> MtpBlock<T> {
    pub fn new(
        params: &ParamSet<T>,
        path: &str,
        dim: usize,
        heads: usize,
        mlp_hidden: usize,
    ) -> Result<Self> {
        let attn = AttentionParams::new(params, &format!("{path}.attn"), dim, heads, BiasInit::None)?;
        let hd = dim / heads;
        Ok(MtpBlock {
            ln_meta: LayerNorm::new(params, &format!("{path}.ln_meta"), dim),
            ln_img: LayerNorm::new(params, &format!("{path}.ln_img"), dim),
            attn,
            ln2: LayerNorm::new(params, &format!("{path}.ln2"), dim),
            mlp: Mlp::new(params, &format!("{path}.mlp"), dim, mlp_hidden),
            dim,
            idx_q_split: Rc::new(mtp_split_index(1, heads, hd)),
            idx_kv_split: Rc::new(mtp_split_index(3, heads, hd)),
        })
    }

    /// All inputs are `[B, dim]`; returns the fused meta feature `[B, dim]`.
    pub fn forward(
        &self,
        f_meta0: &Tensor<T>,
        f_cli: &Tensor<T>,
        f_der: &Tensor<T>,
        record: bool,
    ) -> Result<(Tensor<T>, Option<AttnWeights>)> {
        for (name, t) in [("f_meta0", f_meta0), ("f_cli", f_cli), ("f_der", f_der)] {
            let s = t.shape();
            if s.len() != 2 || s[1] != self.dim {
                return Err(TfkError::dim(
                    "mtp_block",
                    format!("{name} [batch, {}]", self.dim),
                    crate::tensor::fmt_shape(s),
                ));
            }
        }
        let b = f_meta0.shape()[0];
        let (heads, hd) = (self.attn.heads, self.attn.head_dim());

        let meta_tok = f_meta0.reshape(&[b, 1, self.dim])?;
        let meta_normed = self.ln_meta.forward(&meta_tok)?;
        let img_pair = f_cli
            .reshape(&[b, 1, self.dim])?
            .concat(&f_der.reshape(&[b, 1, self.dim])?, 1)?;
        let img_normed = self.ln_img.forward(&img_pair)?;
        let kv_in = meta_normed.concat(&img_normed, 1)?;

        let q = self.attn.w_q.forward(&meta_normed)?;
        let k = self.attn.w_k.forward(&kv_in)?;
        let v = self.attn.w_v.forward(&kv_in)?;
        let qh = q.gather(&self.idx_q_split, b, &[b * heads, 1, hd])?;
        let kh = k.gather(&self.idx_kv_split, b, &[b * heads, 3, hd])?;
        let vh = v.gather(&self.idx_kv_split, b, &[b * heads, 3, hd])?;
        let scale = 1.0 / (hd as f64).sqrt();
        let (ctx, attn) =
            crate::attention::attention_core(&qh, &kh, &vh, scale, None, None, record)?;
        // [b*heads, 1, hd] is contiguous as [b, heads*hd].
        let merged = ctx.reshape(&[b, self.dim])?;
        let ca = self.attn.w_out.forward(&merged)?;
        let f_meta_ca = ca.add(f_meta0)?;
        let f_meta = self
            .mlp
            .forward(&self.ln2.forward(&f_meta_ca)?)?
            .add(&f_meta_ca)?;
        let rec = attn.map(|a| mtp_weights(&a, b, heads));
        Ok((f_meta, rec))
    }
}

/// `[rows, C] -> [heads, rows, head_dim]` packing per batch slice (MTP).
fn mtp_split_index(rows: usize, heads: usize, hd: usize) -> Vec<u32> {
    let c = heads * hd;
    let mut idx = Vec::with_capacity(rows * c);
    for h in 0..heads {
        for r in 0..rows {
            for d in 0..hd {
                idx.push((r * c + h * hd + d) as u32);
            }
        }
    }
    idx
}

/// Reorders `[b, heads, 1, keys]` into the `[heads, b, keys]` record layout.
fn mtp_weights(attn: &Tensor<impl Real>, b: usize, heads: usize) -> AttnWeights {
    let keys = attn.shape()[2];
    let mut values = vec![0.0f64; heads * b * keys];
    attn.with_data(|d| {
        for bi in 0..b {
            for h in 0..heads {
                for k in 0..keys {
                    values[(h * b + bi) * keys + k] = d[(bi * heads + h) * keys + k].as_f64();
                }
            }
        }
    });
    AttnWeights {
        heads,
        queries: b,
        keys,
        values,
    }
}
