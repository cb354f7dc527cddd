use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interp::IdwParams;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpliifConfig {
    /// Sparse (station) channels: temperature, u, v.
    pub c_sp: usize,
    /// Optional dense gridded input channels (0 disables the dense path).
    pub c_d: usize,
    pub c_topo: usize,
    pub c_l: usize,
    pub c_out: usize,
    pub coarse_h: usize,
    pub coarse_w: usize,
    pub fine_h: usize,
    pub fine_w: usize,
    pub edsr_blocks: usize,
    pub edsr_width: usize,
    pub mlp_hidden: usize,
    pub mlp_depth: usize,
    pub idw_k: usize,
    pub idw_epsilon: f64,
}

impl Default for SpliifConfig {
    fn default() -> Self {
        SpliifConfig {
            c_sp: 3,
            c_d: 0,
            c_topo: 1,
            c_l: 64,
            c_out: 3,
            coarse_h: 64,
            coarse_w: 64,
            fine_h: 256,
            fine_w: 256,
            edsr_blocks: 8,
            edsr_width: 64,
            mlp_hidden: 128,
            mlp_depth: 3,
            idw_k: 16,
            idw_epsilon: 1e-6,
        }
    }
}

impl SpliifConfig {
    /// Narrower, shallower trunk that trains within minutes on one CPU core.
    pub fn desk() -> Self {
        SpliifConfig {
            c_l: 32,
            edsr_blocks: 4,
            edsr_width: 32,
            mlp_hidden: 64,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("c_sp", self.c_sp),
            ("c_topo", self.c_topo),
            ("c_l", self.c_l),
            ("c_out", self.c_out),
            ("edsr_width", self.edsr_width),
            ("mlp_hidden", self.mlp_hidden),
            ("mlp_depth", self.mlp_depth),
        ] {
            if v == 0 {
                return fail(format!("model.{name} must be positive"));
            }
        }
        if self.c_out != self.c_sp {
            return fail(format!(
                "model.c_out ({}) must equal model.c_sp ({})",
                self.c_out, self.c_sp
            ));
        }
        if self.coarse_h < 2 || self.coarse_w < 2 {
            return fail("model.coarse_h and model.coarse_w must be >= 2".into());
        }
        if !self.fine_h.is_multiple_of(self.coarse_h) || !self.fine_w.is_multiple_of(self.coarse_w) {
            return fail(format!(
                "model fine extents {}x{} must be multiples of coarse extents {}x{}",
                self.fine_h, self.fine_w, self.coarse_h, self.coarse_w
            ));
        }
        if self.fine_h / self.coarse_h != self.fine_w / self.coarse_w {
            return fail("model upsampling factor must be equal along both axes".into());
        }
        self.idw().validate().map_err(|e| Error::Config(format!("model.{e}")))
    }

    pub fn idw(&self) -> IdwParams {
        IdwParams {
            k_neighbors: self.idw_k,
            epsilon: self.idw_epsilon,
        }
    }

    /// Number of 3×3 convolutions between the fused field and the decoder,
    /// which is also the trunk's receptive-field radius in fine pixels.
    pub fn trunk_radius(&self) -> usize {
        2 * self.edsr_blocks + 1
    }

    /// Integer encoding embedded in checkpoints.
    pub(crate) fn to_words(&self) -> Vec<f32> {
        [
            self.c_sp,
            self.c_d,
            self.c_topo,
            self.c_l,
            self.c_out,
            self.coarse_h,
            self.coarse_w,
            self.fine_h,
            self.fine_w,
            self.edsr_blocks,
            self.edsr_width,
            self.mlp_hidden,
            self.mlp_depth,
            self.idw_k,
        ]
        .iter()
        .map(|&v| v as f32)
        .chain(std::iter::once(self.idw_epsilon as f32))
        .collect()
    }

    pub(crate) fn from_words(w: &[f32]) -> Option<Self> {
        if w.len() != 15 || w[..14].iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
            return None;
        }
        let u = |i: usize| w[i] as usize;
        Some(SpliifConfig {
            c_sp: u(0),
            c_d: u(1),
            c_topo: u(2),
            c_l: u(3),
            c_out: u(4),
            coarse_h: u(5),
            coarse_w: u(6),
            fine_h: u(7),
            fine_w: u(8),
            edsr_blocks: u(9),
            edsr_width: u(10),
            mlp_hidden: u(11),
            mlp_depth: u(12),
            idw_k: u(13),
            idw_epsilon: w[14] as f64,
        })
    }
}
