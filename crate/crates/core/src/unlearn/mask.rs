use serde::{Deserialize, Serialize};

use crate::diffusion::{ParamLayout, SegmentGroup};
use crate::error::{Error, Result};

/// Which parameters an unlearning run may touch: cross-attention only
/// (`x`), everything but cross-attention (`u`), or all (`f`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskPreset {
    X,
    U,
    F,
}

/// Per-segment inclusion flags, in layout order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamMask {
    include: Vec<bool>,
}

impl ParamMask {
    pub fn preset(layout: &ParamLayout, p: MaskPreset) -> Self {
        let include = layout
            .segments()
            .iter()
            .map(|s| match p {
                MaskPreset::X => s.group == SegmentGroup::CrossAttention,
                MaskPreset::U => s.group != SegmentGroup::CrossAttention,
                MaskPreset::F => true,
            })
            .collect();
        ParamMask { include }
    }

    pub fn from_segments(layout: &ParamLayout, names: &[&str]) -> Result<Self> {
        for n in names {
            if !layout.segments().iter().any(|s| s.name == *n) {
                return Err(Error::config("unlearn.mask", format!("unknown segment `{n}`")));
            }
        }
        let include: Vec<bool> = layout.segments().iter().map(|s| names.contains(&s.name)).collect();
        if !include.iter().any(|b| *b) {
            return Err(Error::config("unlearn.mask", "mask must include at least one segment"));
        }
        Ok(ParamMask { include })
    }

    pub fn includes(&self, layout: &ParamLayout, name: &str) -> bool {
        layout.segments().iter().zip(&self.include).any(|(s, on)| s.name == name && *on)
    }

    /// Zeroes gradient entries of excluded segments.
    pub fn apply(&self, layout: &ParamLayout, grad: &mut [f64]) {
        for (s, on) in layout.segments().iter().zip(&self.include) {
            if !on {
                grad[s.range()].fill(0.0);
            }
        }
    }
}
