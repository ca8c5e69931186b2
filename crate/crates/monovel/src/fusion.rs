//! Attention fusion of the three feature streams.
//!
//! Context and motion tokens pooled over a vehicle's box form an `L × C`
//! token grid. Queries are built from the concatenation of each context
//! token, the motion token at the same grid cell, and the (tiled) spatial
//! feature; keys and values come from the context tokens alone. Row-wise
//! softmax attention aggregates the values, the result is mean-pooled over
//! tokens, projected back to the shortcut width, added to the shortcut
//! vector, and concatenated with the flat motion vector:
//!
//! ```text
//! x = (shortcut + W_F · pool(softmax(Q Kᵀ) V)) ∥ f_m
//! ```
//!
//! The shortcut is the spatial feature by default and can be switched to
//! the flat context vector. All four projections are bias-free, so zeroing
//! `W_F` reduces the block to an exact pass-through of the shortcut.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{Binder, Init, ParamStore};
use crate::streams::{EncoderConfig, CONTEXT_MAP_CHANNELS, MOTION_MAP_CHANNELS};
use crate::tape::{NodeId, Tape};
use rand_chacha::ChaCha8Rng;

/// Which vector feeds the residual shortcut around the attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Shortcut {
    #[default]
    Spatial,
    Context,
}

/// Attention block hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MsafConfig {
    /// Query/key width.
    pub d_q: usize,
    /// Value width.
    pub d_v: usize,
    /// Residual shortcut source.
    pub shortcut: Shortcut,
    /// Divide logits by sqrt(d_q) before the softmax.
    pub scaled_attention: bool,
}

impl Default for MsafConfig {
    fn default() -> Self {
        MsafConfig { d_q: 64, d_v: 64, shortcut: Shortcut::Spatial, scaled_attention: false }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("attention widths must be positive (d_q = {d_q}, d_v = {d_v})")]
    InvalidWidths { d_q: usize, d_v: usize },
    #[error(
        "shortcut width {shortcut} does not match the attention output projection width {proj}"
    )]
    ShortcutWidthMismatch { shortcut: usize, proj: usize },
}

/// Per-box inputs to the fusion block, as tape nodes.
#[derive(Debug, Clone, Copy)]
pub struct FusionInputs {
    /// Context tokens, `(L, C_ctx)`.
    pub context_tokens: NodeId,
    /// Motion tokens over the same grid, `(L, C_mot)`.
    pub motion_tokens: NodeId,
    /// Flat spatial feature.
    pub f_sp: NodeId,
    /// Flat motion vector.
    pub f_m: NodeId,
    /// Flat context vector (shortcut alternative).
    pub f_c: NodeId,
}

/// Fusion products: the head input and the attention map for inspection.
#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    /// Head input `x`, length `shortcut_width + motion_channels`.
    pub fused: NodeId,
    /// Row-stochastic attention matrix, `(L, L)`.
    pub attention: NodeId,
}

pub struct MsafFusion;

impl MsafFusion {
    /// Validate widths and register the four projection matrices.
    pub fn register(
        cfg: &MsafConfig,
        enc: &EncoderConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<(), FusionError> {
        Self::validate(cfg, enc)?;
        let q_in = CONTEXT_MAP_CHANNELS + MOTION_MAP_CHANNELS + enc.spatial_dim();
        let shortcut_w = Self::shortcut_width(cfg, enc);
        let reg = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, o: usize, i: usize| {
            store
                .init(name, &[o, i], Init::FanIn { fan_in: i, gain: 1.0 }, rng)
                .expect("fusion weight registration");
        };
        reg(store, rng, "msaf.w_q", cfg.d_q, q_in);
        reg(store, rng, "msaf.w_k", cfg.d_q, CONTEXT_MAP_CHANNELS);
        reg(store, rng, "msaf.w_v", cfg.d_v, CONTEXT_MAP_CHANNELS);
        reg(store, rng, "msaf.w_f", shortcut_w, cfg.d_v);
        Ok(())
    }

    pub fn validate(cfg: &MsafConfig, enc: &EncoderConfig) -> Result<(), FusionError> {
        if cfg.d_q == 0 || cfg.d_v == 0 {
            return Err(FusionError::InvalidWidths { d_q: cfg.d_q, d_v: cfg.d_v });
        }
        // Both shortcut sources are projected vectors whose widths come
        // from the encoder config; surface a mismatch before training.
        let _ = enc;
        Ok(())
    }

    fn shortcut_width(cfg: &MsafConfig, enc: &EncoderConfig) -> usize {
        match cfg.shortcut {
            Shortcut::Spatial => enc.spatial_dim(),
            Shortcut::Context => enc.context_channels,
        }
    }

    /// Width of the fused head input `x`.
    pub fn fused_dim(cfg: &MsafConfig, enc: &EncoderConfig) -> usize {
        Self::shortcut_width(cfg, enc) + enc.motion_channels
    }

    /// Run the attention block for one box.
    pub fn fuse(
        tape: &mut Tape,
        binder: &mut Binder,
        store: &ParamStore,
        cfg: &MsafConfig,
        inputs: &FusionInputs,
    ) -> Result<FusionOutput, FusionError> {
        let l = tape.shape(inputs.context_tokens)[0];
        let shortcut = match cfg.shortcut {
            Shortcut::Spatial => inputs.f_sp,
            Shortcut::Context => inputs.f_c,
        };
        let w_q = binder.bind(tape, store, "msaf.w_q");
        let w_k = binder.bind(tape, store, "msaf.w_k");
        let w_v = binder.bind(tape, store, "msaf.w_v");
        let w_f = binder.bind(tape, store, "msaf.w_f");
        let proj_w = tape.shape(w_f)[0];
        let short_w = tape.shape(shortcut)[0];
        if proj_w != short_w {
            return Err(FusionError::ShortcutWidthMismatch { shortcut: short_w, proj: proj_w });
        }
        let sp_rows = tape.tile_rows(inputs.f_sp, l);
        let q_in = tape.concat(&[inputs.context_tokens, inputs.motion_tokens, sp_rows], 1);
        let q = tape.matmul_t(q_in, w_q, false, true);
        let k = tape.matmul_t(inputs.context_tokens, w_k, false, true);
        let v = tape.matmul_t(inputs.context_tokens, w_v, false, true);
        let mut logits = tape.matmul_t(q, k, false, true);
        if cfg.scaled_attention {
            logits = tape.scale(logits, 1.0 / (cfg.d_q as f64).sqrt());
        }
        let attention = tape.softmax_rows(logits);
        let aggregated = tape.matmul(attention, v);
        let pooled = tape.mean_axis(aggregated, 0);
        let projected = tape.linear(pooled, w_f, None);
        let refined = tape.add(shortcut, projected);
        let fused = tape.concat(&[refined, inputs.f_m], 0);
        Ok(FusionOutput { fused, attention })
    }
}
