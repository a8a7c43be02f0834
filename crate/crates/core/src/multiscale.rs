//! Four-branch multi-scale convolution over one axis of `[T, N, C]` features.
//!
//! Output channels are laid out `[dilation 1 | dilation 2 | max-pool | residual]`,
//! each a quarter of `C_out` wide. Every branch starts with a pointwise
//! (1x1) map to `C_out / 4` channels; the three non-residual branches end
//! with a ReLU.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Axis, Tape, Tensor, Var};

pub const BRANCHES: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiScaleConfig {
    pub axis: Axis,
    pub kernel: usize,
    pub dilations: [usize; 2],
    pub pool_window: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl MultiScaleConfig {
    pub fn new(axis: Axis, in_channels: usize, out_channels: usize) -> Result<Self> {
        let cfg = Self {
            axis,
            kernel: 5,
            dilations: [1, 2],
            pool_window: 3,
            in_channels,
            out_channels,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn temporal(in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::new(Axis::Time, in_channels, out_channels)
    }

    pub fn spatial(in_channels: usize, out_channels: usize) -> Result<Self> {
        Self::new(Axis::Node, in_channels, out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 || self.out_channels % BRANCHES != 0 {
            return Err(Error::Config(format!(
                "multi-scale output channels {} not divisible by {BRANCHES}",
                self.out_channels
            )));
        }
        if self.kernel % 2 == 0 || self.pool_window % 2 == 0 {
            return Err(Error::Config("kernel and pool window must be odd".into()));
        }
        Ok(())
    }

    pub fn branch_width(&self) -> usize {
        self.out_channels / BRANCHES
    }
}

/// Per-branch pointwise maps `[C_in, C_out/4]` with biases, and the two
/// dilated kernels `[kernel, C_out/4, C_out/4]`.
#[derive(Clone, Debug)]
pub struct MultiScaleParams {
    pub pointwise: [Tensor; BRANCHES],
    pub pointwise_bias: [Tensor; BRANCHES],
    pub conv: [Tensor; 2],
}

impl MultiScaleParams {
    pub fn init<R: Rng + ?Sized>(cfg: &MultiScaleConfig, rng: &mut R) -> Self {
        let q = cfg.branch_width();
        let pw_bound = 1.0 / (cfg.in_channels as f64).sqrt();
        let conv_bound = 1.0 / ((cfg.kernel * q) as f64).sqrt();
        Self {
            pointwise: std::array::from_fn(|_| Tensor::uniform(&[cfg.in_channels, q], pw_bound, rng)),
            pointwise_bias: std::array::from_fn(|_| Tensor::zeros(&[q])),
            conv: std::array::from_fn(|_| Tensor::uniform(&[cfg.kernel, q, q], conv_bound, rng)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MultiScaleVars {
    pub pointwise: [Var; BRANCHES],
    pub pointwise_bias: [Var; BRANCHES],
    pub conv: [Var; 2],
}

impl MultiScaleVars {
    pub fn bind(tape: &mut Tape, p: &MultiScaleParams) -> Self {
        Self {
            pointwise: std::array::from_fn(|i| tape.param(p.pointwise[i].clone())),
            pointwise_bias: std::array::from_fn(|i| tape.param(p.pointwise_bias[i].clone())),
            conv: std::array::from_fn(|i| tape.param(p.conv[i].clone())),
        }
    }
}

/// Runs all four branches along `cfg.axis` and concatenates them.
pub fn multiscale_forward(tape: &mut Tape, h: Var, cfg: &MultiScaleConfig, p: &MultiScaleVars) -> Result<Var> {
    cfg.validate()?;
    let c_in = *tape.shape(h).last().unwrap();
    if c_in != cfg.in_channels {
        return Err(Error::Shape(format!(
            "multi-scale block expects {} input channels, got {c_in}",
            cfg.in_channels
        )));
    }
    let mut outs = Vec::with_capacity(BRANCHES);
    for b in 0..BRANCHES {
        let pw = tape.matmul(h, p.pointwise[b])?;
        let pw = tape.add(pw, p.pointwise_bias[b])?;
        let out = match b {
            0 | 1 => {
                let conv = tape.conv_axis(pw, p.conv[b], cfg.axis, cfg.dilations[b])?;
                tape.relu(conv)
            }
            2 => {
                let pooled = tape.maxpool_axis(pw, cfg.axis, cfg.pool_window)?;
                tape.relu(pooled)
            }
            _ => pw,
        };
        outs.push(out);
    }
    tape.concat(&outs)
}

/// Multi-scale temporal convolution (kernel 5x1, dilations 1 and 2, 3x1 pool).
pub fn ms_tc_forward(tape: &mut Tape, h: Var, cfg: &MultiScaleConfig, p: &MultiScaleVars) -> Result<Var> {
    if cfg.axis != Axis::Time {
        return Err(Error::Config("MS-TC must convolve along time".into()));
    }
    multiscale_forward(tape, h, cfg, p)
}

/// Multi-scale spatial convolution over the joint index (1x5, 1x3 pool).
pub fn ms_sc_forward(tape: &mut Tape, h: Var, cfg: &MultiScaleConfig, p: &MultiScaleVars) -> Result<Var> {
    if cfg.axis != Axis::Node {
        return Err(Error::Config("MS-SC must convolve along joints".into()));
    }
    multiscale_forward(tape, h, cfg, p)
}
