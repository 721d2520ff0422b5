//! The dual-branch lifting model: a global branch (spatial then temporal
//! attention over whole frames), a local branch (per-joint trajectory
//! attention, then cross-trajectory attention), a fusion head that merges the
//! two along the frame axis, and an optional pose refinement stage.

mod forward;
mod params;

pub use forward::{
    cte_forward, gim_forward, lim_forward, model_forward, pose_refine, reconstruct_trajectories,
    regression_head, ste_forward, ForwardTrace, Inference, ModelOutput, TraceVars,
};
pub use params::{BoundModel, GimParams, HeadParams, LimParams, ModelParams, RefineParams};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Receptive fields accepted under the default frame policy.
pub const DEFAULT_FRAME_CHOICES: [usize; 4] = [3, 5, 7, 9];

/// Hyperparameters. `frames` is the clip length T, `joints` the keypoint
/// count J, `model_dim` the embedding width D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub frames: usize,
    pub joints: usize,
    pub model_dim: usize,
    /// Heads for the width-D encoders (spatial, trajectory).
    pub n_heads: usize,
    /// Heads for the cross-trajectory encoder (token width T*D).
    pub cte_heads: usize,
    pub gim_spatial_layers: usize,
    pub gim_temporal_layers: usize,
    pub ste_layers: usize,
    pub cte_layers: usize,
    pub mlp_ratio: usize,
    pub refine_enabled: bool,
    /// Drops the trajectory branch entirely; the head's frame conv starts as
    /// [I | 0] so the model reduces to the global branch.
    pub gim_only: bool,
    /// Reuse the global branch's 2D embedding for trajectories instead of a
    /// separate one.
    pub share_traj_embed: bool,
    /// Accept any odd frame count instead of the default {3,5,7,9}.
    pub relax_frames: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 9,
            joints: 17,
            model_dim: 32,
            n_heads: 4,
            cte_heads: 2,
            gim_spatial_layers: 4,
            gim_temporal_layers: 4,
            ste_layers: 4,
            cte_layers: 4,
            mlp_ratio: 2,
            refine_enabled: true,
            gim_only: false,
            share_traj_embed: false,
            relax_frames: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames % 2 == 0 {
            return Err(Error::Config(format!("frames must be odd, got {}", self.frames)));
        }
        if !self.relax_frames && !DEFAULT_FRAME_CHOICES.contains(&self.frames) {
            return Err(Error::Config(format!(
                "frames {} outside default policy {DEFAULT_FRAME_CHOICES:?} (set relax_frames for other odd values)",
                self.frames
            )));
        }
        if self.joints == 0 {
            return Err(Error::Config("joints must be >= 1".into()));
        }
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.cte_heads == 0 || (self.frames * self.model_dim) % self.cte_heads != 0 {
            return Err(Error::Config(format!(
                "trajectory token width {} (frames*model_dim) not divisible by cte_heads {}",
                self.frames * self.model_dim,
                self.cte_heads
            )));
        }
        for (name, v) in [
            ("gim_spatial_layers", self.gim_spatial_layers),
            ("gim_temporal_layers", self.gim_temporal_layers),
            ("ste_layers", self.ste_layers),
            ("cte_layers", self.cte_layers),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Index of the predicted intermediate frame.
    pub fn center_frame(&self) -> usize {
        self.frames / 2
    }

    /// Trajectory-token width for the cross-trajectory encoder.
    pub fn traj_token_width(&self) -> usize {
        self.frames * self.model_dim
    }

    /// Hidden width of the refinement perceptron.
    pub fn refine_hidden(&self) -> usize {
        self.joints * 3
    }
}

/// Exact learnable scalar count for a config, by closed-form tally.
pub fn param_count(config: &ModelConfig) -> usize {
    let d = config.model_dim;
    let t = config.frames;
    let j = config.joints;
    let ratio = config.mlp_ratio;

    // One encoder block of width w: 4 projection pairs, 2 MLP layers,
    // 3 layer-norm affine pairs.
    let block = |w: usize| 4 * (w * w + w) + (w * ratio * w + ratio * w) + (ratio * w * w + w) + 6 * w;
    let embed = 2 * d + d;

    let mut n = 0;
    // Global branch.
    n += embed; // spatial embedding
    n += j * d; // spatial positions
    n += config.gim_spatial_layers * block(d);
    n += t * (j * d); // temporal positions
    n += config.gim_temporal_layers * block(j * d);
    // Local branch.
    if !config.gim_only {
        if !config.share_traj_embed {
            n += embed;
        }
        n += t * d; // trajectory positions
        n += config.ste_layers * block(d);
        n += j * (t * d); // cross-trajectory positions
        n += config.cte_layers * block(t * d);
    }
    // Fusion head.
    n += t * (2 * t) + t; // frame conv
    n += 2 * d; // head layer norm
    n += d * 3 + 3; // output projection
    // Refinement.
    if config.refine_enabled {
        let hidden = config.refine_hidden();
        let input = 2 * j * 3;
        n += input * hidden + hidden;
        n += hidden * 2 + 2;
    }
    n
}
