use rand::Rng;

use crate::error::{Error, Result};
use crate::interp::softplus_inverse;
use crate::numerics::{Graph, Real, Tensor, Var};

use super::SpliifConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Dense<L> {
    /// `[D_in, D_out]`
    pub weight: L,
    pub bias: L,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv<L> {
    /// `[C_out, C_in, 3, 3]`
    pub weight: L,
    pub bias: L,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<L> {
    pub conv1: Conv<L>,
    pub conv2: Conv<L>,
}

/// The full learnable parameter tree, generic over its leaves so the same
/// structure holds tensors ([`SpliifParams`]) or graph handles ([`ParamVars`]).
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<L> {
    /// Unconstrained; softplus gives the per-channel IDW exponent.
    pub idw_exponent: L,
    /// Unconstrained; softplus gives the per-channel IDW length scale.
    pub idw_length_scale: L,
    pub proj_mlp: Vec<Dense<L>>,
    pub fuse: Dense<L>,
    pub trunk: Vec<ResBlock<L>>,
    pub trunk_final: Conv<L>,
    pub decoder_mlp: Vec<Dense<L>>,
}

pub type SpliifParams<T = f32> = Weights<Tensor<T>>;
pub type ParamVars = Weights<Var>;

impl<L> Weights<L> {
    /// Visits every leaf with its stable name, in checkpoint order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(&str, &'a L)) {
        f("idw.exponent", &self.idw_exponent);
        f("idw.length_scale", &self.idw_length_scale);
        for (i, d) in self.proj_mlp.iter().enumerate() {
            f(&format!("proj_mlp.{i}.weight"), &d.weight);
            f(&format!("proj_mlp.{i}.bias"), &d.bias);
        }
        f("fuse.weight", &self.fuse.weight);
        f("fuse.bias", &self.fuse.bias);
        for (i, b) in self.trunk.iter().enumerate() {
            f(&format!("trunk.{i}.conv1.weight"), &b.conv1.weight);
            f(&format!("trunk.{i}.conv1.bias"), &b.conv1.bias);
            f(&format!("trunk.{i}.conv2.weight"), &b.conv2.weight);
            f(&format!("trunk.{i}.conv2.bias"), &b.conv2.bias);
        }
        f("trunk.final.weight", &self.trunk_final.weight);
        f("trunk.final.bias", &self.trunk_final.bias);
        for (i, d) in self.decoder_mlp.iter().enumerate() {
            f(&format!("decoder_mlp.{i}.weight"), &d.weight);
            f(&format!("decoder_mlp.{i}.bias"), &d.bias);
        }
    }

    pub fn leaves(&self) -> Vec<(String, &L)> {
        let mut out = Vec::new();
        self.visit(|n, l| out.push((n.to_string(), l)));
        out
    }

    /// Mutable leaves in the same order as [`Weights::visit`].
    pub fn leaves_mut(&mut self) -> Vec<&mut L> {
        let mut out = vec![&mut self.idw_exponent, &mut self.idw_length_scale];
        for d in &mut self.proj_mlp {
            out.extend([&mut d.weight, &mut d.bias]);
        }
        out.extend([&mut self.fuse.weight, &mut self.fuse.bias]);
        for b in &mut self.trunk {
            out.extend([
                &mut b.conv1.weight,
                &mut b.conv1.bias,
                &mut b.conv2.weight,
                &mut b.conv2.bias,
            ]);
        }
        out.extend([&mut self.trunk_final.weight, &mut self.trunk_final.bias]);
        for d in &mut self.decoder_mlp {
            out.extend([&mut d.weight, &mut d.bias]);
        }
        out
    }

    pub fn map<M>(&self, mut f: impl FnMut(&L) -> M) -> Weights<M> {
        let dense = |d: &Dense<L>, f: &mut dyn FnMut(&L) -> M| Dense {
            weight: f(&d.weight),
            bias: f(&d.bias),
        };
        let conv = |c: &Conv<L>, f: &mut dyn FnMut(&L) -> M| Conv {
            weight: f(&c.weight),
            bias: f(&c.bias),
        };
        Weights {
            idw_exponent: f(&self.idw_exponent),
            idw_length_scale: f(&self.idw_length_scale),
            proj_mlp: self.proj_mlp.iter().map(|d| dense(d, &mut f)).collect(),
            fuse: dense(&self.fuse, &mut f),
            trunk: self
                .trunk
                .iter()
                .map(|b| ResBlock {
                    conv1: conv(&b.conv1, &mut f),
                    conv2: conv(&b.conv2, &mut f),
                })
                .collect(),
            trunk_final: conv(&self.trunk_final, &mut f),
            decoder_mlp: self.decoder_mlp.iter().map(|d| dense(d, &mut f)).collect(),
        }
    }
}

/// Parameter names and shapes implied by a configuration, in checkpoint order.
pub fn param_layout(config: &SpliifConfig) -> Vec<(String, Vec<usize>)> {
    let shapes = Weights::<Vec<usize>>::shapes(config);
    shapes.leaves().into_iter().map(|(n, s)| (n, s.clone())).collect()
}

fn mlp_dims(d_in: usize, hidden: usize, d_out: usize, depth: usize) -> Vec<(usize, usize)> {
    (0..depth)
        .map(|i| {
            let a = if i == 0 { d_in } else { hidden };
            let b = if i + 1 == depth { d_out } else { hidden };
            (a, b)
        })
        .collect()
}

impl Weights<Vec<usize>> {
    fn shapes(c: &SpliifConfig) -> Self {
        let dense = |(a, b): (usize, usize)| Dense {
            weight: vec![a, b],
            bias: vec![b],
        };
        let conv = |cin: usize, cout: usize| Conv {
            weight: vec![cout, cin, 3, 3],
            bias: vec![cout],
        };
        let w = c.edsr_width;
        Weights {
            idw_exponent: vec![c.c_sp],
            idw_length_scale: vec![c.c_sp],
            // The projection stack keeps the latent width throughout.
            proj_mlp: mlp_dims(c.c_sp + c.c_d, c.c_l, c.c_l, c.mlp_depth)
                .into_iter()
                .map(dense)
                .collect(),
            fuse: dense((c.c_topo + c.c_l, w)),
            trunk: (0..c.edsr_blocks)
                .map(|_| ResBlock {
                    conv1: conv(w, w),
                    conv2: conv(w, w),
                })
                .collect(),
            trunk_final: conv(w, w),
            decoder_mlp: mlp_dims(w + 2, c.mlp_hidden, c.c_out, c.mlp_depth)
                .into_iter()
                .map(dense)
                .collect(),
        }
    }
}

impl<T: Real> SpliifParams<T> {
    /// Uniform `±sqrt(1/fan_in)` weights and biases; the last decoder bias is
    /// zero. The IDW front end starts at exponent 2 and unit length scale.
    pub fn init(config: &SpliifConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let shapes = Weights::<Vec<usize>>::shapes(config);
        let mut names = Vec::new();
        shapes.visit(|n, _| names.push(n.to_string()));
        let last_bias = format!("decoder_mlp.{}.bias", config.mlp_depth - 1);
        let mut index = 0;
        let params = shapes.map(|shape| {
            let name = &names[index];
            index += 1;
            let fan_in = |w: &[usize]| -> usize {
                match w {
                    [a, _] => *a,
                    [_, cin, kh, kw] => cin * kh * kw,
                    _ => 1,
                }
            };
            if name.starts_with("idw.") {
                let v = if name == "idw.exponent" { 2.0 } else { 1.0 };
                return Tensor::full(shape.clone(), T::of(softplus_inverse(v)));
            }
            if *name == last_bias {
                return Tensor::zeros(shape.clone());
            }
            let weight_name = name.replace(".bias", ".weight");
            let weight_shape = shapes_lookup(&shapes, &weight_name).unwrap_or_else(|| shape.clone());
            let bound = (1.0 / fan_in(&weight_shape) as f64).sqrt();
            Tensor::from_fn(shape.clone(), |_| T::of(rng.random_range(-bound..bound)))
        });
        Ok(params)
    }

    pub fn shapes_match(&self, config: &SpliifConfig) -> Result<()> {
        let want = param_layout(config);
        let have = self.leaves();
        if want.len() != have.len() {
            return Err(Error::Config(format!(
                "parameter set holds {} tensors, configuration needs {}",
                have.len(),
                want.len()
            )));
        }
        for ((name, shape), (_, t)) in want.iter().zip(&have) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "parameter {name} has shape {:?}, configuration needs {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    /// Rebuilds a parameter tree from tensors in checkpoint order.
    pub fn from_tensors(config: &SpliifConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = Weights::<Vec<usize>>::shapes(config);
        let mut it = tensors.into_iter();
        let mut missing = false;
        let params = shapes.map(|s| {
            it.next().unwrap_or_else(|| {
                missing = true;
                Tensor::zeros(s.clone())
            })
        });
        if missing || it.next().is_some() {
            return Err(Error::Config("tensor count does not match configuration".into()));
        }
        params.shapes_match(config)?;
        Ok(params)
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn register(&self, graph: &mut Graph<T>) -> ParamVars {
        self.map(|t| graph.param(t.clone()))
    }

    /// Registers every tensor as a constant (inference).
    pub fn register_frozen(&self, graph: &mut Graph<T>) -> ParamVars {
        self.map(|t| graph.constant(t.clone()))
    }

    pub fn cast<U: Real>(&self) -> SpliifParams<U> {
        self.map(|t| t.cast())
    }

    pub fn num_parameters(&self) -> usize {
        self.leaves().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.leaves().iter().all(|(_, t)| t.is_finite())
    }
}

fn shapes_lookup(shapes: &Weights<Vec<usize>>, name: &str) -> Option<Vec<usize>> {
    let mut found = None;
    shapes.visit(|n, s| {
        if n == name {
            found = Some(s.clone());
        }
    });
    found
}
