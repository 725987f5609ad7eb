//! Four-stage hierarchical image feature extractor.
//!
//! Stage 1 embeds non-overlapping patches and runs windowed self-attention
//! blocks; stages 2-4 halve the grid with patch merging (doubling channels)
//! before their blocks. Blocks alternate between plain and shifted windows.

use std::rc::Rc;

use crate::attention::{shift_window_mask, AttnWeights, TokenGrid, WindowAttention};
use crate::error::{Result, TfkError};
use crate::nn::{LayerNorm, Linear, Mlp, ParamSet};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Geometry and depth of the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub image_size: (usize, usize),
    pub patch_size: usize,
    pub base_channels: usize,
    pub stage_depths: [usize; 4],
    pub stage_heads: [usize; 4],
    pub window: usize,
    pub shared_weights: bool,
    pub mlp_ratio: f64,
}

impl BackboneConfig {
    /// Desk-scale defaults: all divisibility constraints hold and a forward
    /// pass runs in milliseconds.
    pub fn toy() -> Self {
        BackboneConfig {
            image_size: (64, 64),
            patch_size: 4,
            base_channels: 16,
            stage_depths: [1, 1, 2, 1],
            stage_heads: [1, 2, 4, 4],
            window: 4,
            shared_weights: false,
            mlp_ratio: 4.0,
        }
    }

    /// The standard tiny configuration for 224x224 inputs.
    pub fn swin_tiny() -> Self {
        BackboneConfig {
            image_size: (224, 224),
            patch_size: 4,
            base_channels: 96,
            stage_depths: [2, 2, 6, 2],
            stage_heads: [3, 6, 12, 24],
            window: 7,
            shared_weights: false,
            mlp_ratio: 4.0,
        }
    }

    /// Grid extents and channel count of stage `i` (0-based).
    pub fn stage_dims(&self, stage: usize) -> (usize, usize, usize) {
        let div = self.patch_size << stage;
        (
            self.image_size.0 / div,
            self.image_size.1 / div,
            self.base_channels << stage,
        )
    }

    /// Window size actually used at a stage: clamped to the grid extent.
    pub fn stage_window(&self, stage: usize) -> usize {
        let (gh, gw, _) = self.stage_dims(stage);
        self.window.min(gh).min(gw)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let full_div = self.patch_size * 8;
        if self.patch_size == 0 || h == 0 || w == 0 || h % full_div != 0 || w % full_div != 0 {
            return Err(TfkError::Config(format!(
                "image size {h}x{w} must be divisible by patch_size*8 = {full_div}"
            )));
        }
        if self.base_channels == 0 || self.window == 0 {
            return Err(TfkError::Config(
                "base_channels and window must be positive".to_string(),
            ));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(TfkError::Config(format!(
                "mlp_ratio must be positive, got {}",
                self.mlp_ratio
            )));
        }
        for stage in 0..4 {
            let (gh, gw, c) = self.stage_dims(stage);
            let m = self.stage_window(stage);
            if gh % m != 0 || gw % m != 0 {
                return Err(TfkError::Config(format!(
                    "stage {} grid {gh}x{gw} not divisible by window {m}",
                    stage + 1
                )));
            }
            let heads = self.stage_heads[stage];
            if heads == 0 || c % heads != 0 {
                return Err(TfkError::Config(format!(
                    "stage {} channels {c} not divisible by heads {heads}",
                    stage + 1
                )));
            }
        }
        Ok(())
    }
}

/// Per-stage token grids for one modality; entry `i` obeys the
/// resolution/channel law of the config.
pub struct StageFeatures<T: Real> {
    pub stages: Vec<TokenGrid<T>>,
}

/// Non-overlapping patch flattening followed by linear projection.
pub struct PatchEmbed<T: Real> {
    proj: Linear<T>,
    image_h: usize,
    image_w: usize,
    patch: usize,
    channels: usize,
    idx: Rc<Vec<u32>>,
}

impl<T: Real> PatchEmbed<T> {
    pub fn new(
        params: &ParamSet<T>,
        path: &str,
        image_h: usize,
        image_w: usize,
        patch: usize,
        out_channels: usize,
    ) -> Result<Self> {
        if patch == 0 || image_h % patch != 0 || image_w % patch != 0 {
            return Err(TfkError::Config(format!(
                "image {image_h}x{image_w} not divisible by patch size {patch}"
            )));
        }
        let patch_dim = patch * patch * 3;
        let mut idx = Vec::with_capacity(image_h * image_w * 3);
        for py in 0..image_h / patch {
            for px in 0..image_w / patch {
                for iy in 0..patch {
                    for ix in 0..patch {
                        let pixel = (py * patch + iy) * image_w + px * patch + ix;
                        for ch in 0..3 {
                            idx.push((pixel * 3 + ch) as u32);
                        }
                    }
                }
            }
        }
        Ok(PatchEmbed {
            proj: Linear::new(params, path, patch_dim, out_channels),
            image_h,
            image_w,
            patch,
            channels: out_channels,
            idx: Rc::new(idx),
        })
    }

    /// `[B, H, W, 3]` image to a `(H/p) x (W/p)` token grid.
    pub fn forward(&self, image: &Tensor<T>) -> Result<TokenGrid<T>> {
        let s = image.shape();
        if s.len() != 4 || s[1] != self.image_h || s[2] != self.image_w || s[3] != 3 {
            return Err(TfkError::dim(
                "patch_embed",
                format!("[batch, {}, {}, 3]", self.image_h, self.image_w),
                crate::tensor::fmt_shape(s),
            ));
        }
        let b = s[0];
        let (gh, gw) = (self.image_h / self.patch, self.image_w / self.patch);
        let patch_dim = self.patch * self.patch * 3;
        let patches = image.gather(&self.idx, b, &[b, gh * gw, patch_dim])?;
        let tokens = self.proj.forward(&patches)?;
        TokenGrid::new(gh, gw, self.channels, tokens)
    }
}

/// 2x2 neighborhood gather (top-left, bottom-left, top-right, bottom-right)
/// into a 4c vector, then a linear 4c -> 2c map. Halves both grid extents.
pub struct PatchMerging<T: Real> {
    pub reduce: Linear<T>,
    in_channels: usize,
}

impl<T: Real> PatchMerging<T> {
    pub fn new(params: &ParamSet<T>, path: &str, in_channels: usize) -> Self {
        PatchMerging {
            reduce: Linear::new(params, path, 4 * in_channels, 2 * in_channels),
            in_channels,
        }
    }

    /// The gather order as flat element indices; exposed for bijection tests.
    pub fn gather_index(gh: usize, gw: usize, c: usize) -> Vec<u32> {
        let mut idx = Vec::with_capacity(gh * gw * c);
        for oy in 0..gh / 2 {
            for ox in 0..gw / 2 {
                // top-left, bottom-left, top-right, bottom-right
                let corners = [
                    (2 * oy, 2 * ox),
                    (2 * oy + 1, 2 * ox),
                    (2 * oy, 2 * ox + 1),
                    (2 * oy + 1, 2 * ox + 1),
                ];
                for (y, x) in corners {
                    let t = y * gw + x;
                    for ch in 0..c {
                        idx.push((t * c + ch) as u32);
                    }
                }
            }
        }
        idx
    }

    pub fn forward(&self, grid: &TokenGrid<T>) -> Result<TokenGrid<T>> {
        if grid.channels != self.in_channels {
            return Err(TfkError::dim(
                "patch_merging",
                format!("channels {}", self.in_channels),
                format!("channels {}", grid.channels),
            ));
        }
        if grid.height % 2 != 0 || grid.width % 2 != 0 {
            return Err(TfkError::contract(
                "patch_merging",
                format!("grid extents must be even, got {}x{}", grid.height, grid.width),
            ));
        }
        let b = grid.batch();
        let (oh, ow, c) = (grid.height / 2, grid.width / 2, grid.channels);
        let idx = Rc::new(Self::gather_index(grid.height, grid.width, c));
        let gathered = grid.tokens.gather(&idx, b, &[b, oh * ow, 4 * c])?;
        let tokens = self.reduce.forward(&gathered)?;
        TokenGrid::new(oh, ow, 2 * c, tokens)
    }
}

/// One windowed self-attention block: pre-norm attention with optional
/// cyclic shift, then pre-norm MLP, both with residual connections.
pub struct WmsaBlock<T: Real> {
    pub attn: WindowAttention<T>,
    ln1: LayerNorm<T>,
    ln2: LayerNorm<T>,
    mlp: Mlp<T>,
    grid_h: usize,
    grid_w: usize,
    channels: usize,
    shifted: bool,
    shift: i64,
    shift_idx: Option<Rc<Vec<u32>>>,
    unshift_idx: Option<Rc<Vec<u32>>>,
    mask: Option<Tensor<T>>,
}

impl<T: Real> WmsaBlock<T> {
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
    ) -> Result<Self> {
        let attn = WindowAttention::new(
            params,
            &format!("{path}.attn"),
            grid_h,
            grid_w,
            channels,
            heads,
            window,
            false,
        )?;
        let ln1 = LayerNorm::new(params, &format!("{path}.ln1"), channels);
        let ln2 = LayerNorm::new(params, &format!("{path}.ln2"), channels);
        let hidden = crate::nn::mlp_block_hidden(channels, mlp_ratio)?;
        let mlp = Mlp::new(params, &format!("{path}.mlp"), channels, hidden);

        // A shift only makes sense when the grid is larger than one window.
        let shift = (window / 2) as i64;
        let effective_shift = shifted && shift > 0 && (grid_h > window || grid_w > window);
        let (shift_idx, unshift_idx, mask) = if effective_shift {
            let fwd = super::attention::cyclic_shift_index_for(grid_h, grid_w, channels, shift, shift);
            let bwd =
                super::attention::cyclic_shift_index_for(grid_h, grid_w, channels, -shift, -shift);
            let base = shift_window_mask(grid_h, grid_w, window, shift, shift)?;
            // Repeat per head to match the (window, head, q, k) score layout.
            let m2 = window * window;
            let nw = (grid_h / window) * (grid_w / window);
            let mut full = Vec::with_capacity(nw * heads * m2 * m2);
            for w in 0..nw {
                let blk = &base[w * m2 * m2..(w + 1) * m2 * m2];
                for _ in 0..heads {
                    full.extend(blk.iter().map(|v| T::from_f64(*v)));
                }
            }
            let mask = Tensor::from_vec(&[nw * heads * m2 * m2], full)?;
            (Some(fwd), Some(bwd), Some(mask))
        } else {
            (None, None, None)
        };
        Ok(WmsaBlock {
            attn,
            ln1,
            ln2,
            mlp,
            grid_h,
            grid_w,
            channels,
            shifted: effective_shift,
            shift,
            shift_idx,
            unshift_idx,
            mask,
        })
    }

    pub fn is_shifted(&self) -> bool {
        self.shifted
    }

    pub fn shift_offset(&self) -> i64 {
        if self.shifted {
            self.shift
        } else {
            0
        }
    }

    /// `x` is `[B, N, C]`; shape preserved.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let b = x.shape()[0];
        let n = self.grid_h * self.grid_w;
        let normed = self.ln1.forward(x)?;
        let attended = if self.shifted {
            let shifted = normed.gather(
                self.shift_idx.as_ref().unwrap(),
                b,
                &[b, n, self.channels],
            )?;
            let (out, _) = self.attn.forward_self(&shifted, self.mask.as_ref(), false)?;
            out.gather(self.unshift_idx.as_ref().unwrap(), b, &[b, n, self.channels])?
        } else {
            self.attn.forward_self(&normed, None, false)?.0
        };
        let y = x.add(&attended)?;
        let z = y.add(&self.mlp.forward(&self.ln2.forward(&y)?)?)?;
        Ok(z)
    }

    /// Recording variant used by attention probes; returns the raw weights.
    pub fn forward_recorded(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Option<AttnWeights>)> {
        let b = x.shape()[0];
        let n = self.grid_h * self.grid_w;
        let normed = self.ln1.forward(x)?;
        let (attended, rec) = if self.shifted {
            let shifted = normed.gather(
                self.shift_idx.as_ref().unwrap(),
                b,
                &[b, n, self.channels],
            )?;
            let (out, rec) = self.attn.forward_self(&shifted, self.mask.as_ref(), true)?;
            (
                out.gather(self.unshift_idx.as_ref().unwrap(), b, &[b, n, self.channels])?,
                rec,
            )
        } else {
            self.attn.forward_self(&normed, None, true)?
        };
        let y = x.add(&attended)?;
        let z = y.add(&self.mlp.forward(&self.ln2.forward(&y)?)?)?;
        Ok((z, rec))
    }
}

struct Stage<T: Real> {
    merge: Option<PatchMerging<T>>,
    blocks: Vec<WmsaBlock<T>>,
}

/// The full four-stage extractor for one image modality.
pub struct Backbone<T: Real> {
    pub config: BackboneConfig,
    patch_embed: PatchEmbed<T>,
    stages: Vec<Stage<T>>,
}

impl<T: Real> Backbone<T> {
    pub fn new(params: &ParamSet<T>, prefix: &str, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let (h, w) = config.image_size;
        let patch_embed = PatchEmbed::new(
            params,
            &format!("{prefix}.patch_embed"),
            h,
            w,
            config.patch_size,
            config.base_channels,
        )?;
        let mut stages = Vec::with_capacity(4);
        for stage in 0..4 {
            let (gh, gw, c) = config.stage_dims(stage);
            let merge = if stage > 0 {
                let (_, _, c_prev) = config.stage_dims(stage - 1);
                Some(PatchMerging::new(
                    params,
                    &format!("{prefix}.merge{}", stage + 1),
                    c_prev,
                ))
            } else {
                None
            };
            let window = config.stage_window(stage);
            let mut blocks = Vec::with_capacity(config.stage_depths[stage]);
            for blk in 0..config.stage_depths[stage] {
                blocks.push(WmsaBlock::new(
                    params,
                    &format!("{prefix}.stage{}.block{}", stage + 1, blk),
                    gh,
                    gw,
                    c,
                    config.stage_heads[stage],
                    window,
                    blk % 2 == 1,
                    config.mlp_ratio,
                )?);
            }
            stages.push(Stage { merge, blocks });
        }
        Ok(Backbone {
            config: config.clone(),
            patch_embed,
            stages,
        })
    }

    /// Patch-merging layer entering stage `i` (0-based, `i >= 1`); the fusion
    /// bridge reuses these parameters to carry features across stages.
    pub fn merge_into_stage(&self, stage: usize) -> Option<&PatchMerging<T>> {
        self.stages.get(stage).and_then(|s| s.merge.as_ref())
    }

    /// Runs all four stages, returning the post-block grid of each.
    pub fn forward(&self, image: &Tensor<T>) -> Result<StageFeatures<T>> {
        let mut grid = self.patch_embed.forward(image)?;
        let mut features = Vec::with_capacity(4);
        for (stage_idx, stage) in self.stages.iter().enumerate() {
            if let Some(merge) = &stage.merge {
                grid = merge.forward(&grid)?;
            }
            let mut tokens = grid.tokens.clone();
            for block in &stage.blocks {
                tokens = block.forward(&tokens)?;
            }
            grid = TokenGrid::new(grid.height, grid.width, grid.channels, tokens)?;
            let (gh, gw, c) = self.config.stage_dims(stage_idx);
            debug_assert_eq!((grid.height, grid.width, grid.channels), (gh, gw, c));
            features.push(TokenGrid::new(gh, gw, c, grid.tokens.clone())?);
        }
        Ok(StageFeatures { stages: features })
    }
}
