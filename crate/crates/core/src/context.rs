//! Left-image context: per-resolution structural features injected into
//! the recurrent update, and the initial hidden states.
//!
//! The context shares the matching backbone (one network, two uses); only
//! the small projection heads here are context-specific.

use candle_core::Tensor;

use crate::backbone::{BackboneConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Path};

/// Downsampling factors of the recurrent grids, finest first.
pub const GRU_SCALES: [usize; 3] = [8, 16, 32];

/// Context tensors for one recurrent resolution, all (B, D_h, h, w).
#[derive(Clone, Debug)]
pub struct ContextLevel {
    /// Update-gate context.
    pub ck: Tensor,
    /// Reset-gate context.
    pub cr: Tensor,
    /// Candidate-state context.
    pub ch: Tensor,
    /// Initial hidden state, tanh-bounded.
    pub h0: Tensor,
}

impl ContextLevel {
    pub fn zeros_like(&self) -> Result<Self> {
        Ok(Self {
            ck: self.ck.zeros_like()?,
            cr: self.cr.zeros_like()?,
            ch: self.ch.zeros_like()?,
            h0: self.h0.zeros_like()?,
        })
    }
}

/// Context levels ordered as [`GRU_SCALES`].
#[derive(Clone, Debug)]
pub struct ContextBundle {
    pub levels: [ContextLevel; 3],
}

impl ContextBundle {
    pub fn level(&self, scale: usize) -> Option<&ContextLevel> {
        GRU_SCALES.iter().position(|s| *s == scale).map(|i| &self.levels[i])
    }

    pub fn zeros_like(&self) -> Result<Self> {
        Ok(Self {
            levels: [
                self.levels[0].zeros_like()?,
                self.levels[1].zeros_like()?,
                self.levels[2].zeros_like()?,
            ],
        })
    }
}

#[derive(Clone, Debug)]
struct Heads {
    ck: Conv2d,
    cr: Conv2d,
    ch: Conv2d,
    h0: Conv2d,
}

#[derive(Clone, Debug)]
pub struct ContextEncoder {
    heads: [Heads; 3],
    hidden: usize,
}

impl ContextEncoder {
    pub fn new(path: &Path, backbone: &BackboneConfig, hidden: usize) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("context hidden width must be positive".into()));
        }
        let make = |scale: usize, in_ch: usize| -> Result<Heads> {
            let p = path.pp(format!("res{scale}"));
            Ok(Heads {
                ck: Conv2d::new(&p.pp("ck"), in_ch, hidden, 3, 1, 1)?,
                cr: Conv2d::new(&p.pp("cr"), in_ch, hidden, 3, 1, 1)?,
                ch: Conv2d::new(&p.pp("ch"), in_ch, hidden, 3, 1, 1)?,
                h0: Conv2d::new(&p.pp("h0"), in_ch, hidden, 3, 1, 1)?,
            })
        };
        // stages 2..4 sit at 1/8, 1/16, 1/32
        Ok(Self {
            heads: [
                make(8, backbone.stage_channels[1])?,
                make(16, backbone.stage_channels[2])?,
                make(32, backbone.stage_channels[3])?,
            ],
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn encode_context(&self, left: &FeaturePyramid) -> Result<ContextBundle> {
        let (_, _, h8, w8) = left.f8.dims4()?;
        let maps = [&left.f8, &left.f16, &left.f32];
        let mut levels = Vec::with_capacity(3);
        for (i, (map, heads)) in maps.iter().zip(&self.heads).enumerate() {
            let (_, c, h, w) = map.dims4()?;
            let f = 1 << i;
            if h * f != h8 || w * f != w8 {
                return Err(Error::Dimension(format!(
                    "pyramid level 1/{} is {h}x{w}, expected {}x{}",
                    GRU_SCALES[i],
                    h8 / f,
                    w8 / f
                )));
            }
            if c != heads.ck.in_channels() {
                return Err(Error::Dimension(format!(
                    "pyramid level 1/{} has {c} channels, context heads expect {}",
                    GRU_SCALES[i],
                    heads.ck.in_channels()
                )));
            }
            levels.push(ContextLevel {
                ck: heads.ck.forward(map)?,
                cr: heads.cr.forward(map)?,
                ch: heads.ch.forward(map)?,
                h0: heads.h0.forward(map)?.tanh()?,
            });
        }
        let mut it = levels.into_iter();
        Ok(ContextBundle {
            levels: [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()],
        })
    }
}
