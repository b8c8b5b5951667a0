//! Trainable layers built on the tape ops.

use crate::graph::{Graph, Param, Var};
use crate::init::{he_normal, zeros, Rng};
use crate::ops::PadMode;

/// Anything that owns trainable parameters.
pub trait Module {
    fn params(&self) -> Vec<Param>;
}

fn enter(graph: &Graph, param: &Param, track: bool) -> Var {
    if track {
        graph.param(param)
    } else {
        graph.frozen(param)
    }
}

/// 2-d convolution layer.
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Self {
        let weight = Param::new(
            format!("{name}.weight"),
            he_normal(rng, &[cout, cin, k, k], cin * k * k),
        );
        let bias = Param::new(format!("{name}.bias"), zeros(&[cout]));
        Conv2d {
            weight,
            bias: Some(bias),
            stride,
            pad,
            mode,
        }
    }

    /// All-zero weights and bias: the layer outputs zero until trained.
    pub fn zero_init(
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Self {
        Conv2d {
            weight: Param::new(format!("{name}.weight"), zeros(&[cout, cin, k, k])),
            bias: Some(Param::new(format!("{name}.bias"), zeros(&[cout]))),
            stride,
            pad,
            mode,
        }
    }

    /// `track` controls whether gradients accumulate into this layer's
    /// parameters (frozen parameters still pass gradients through).
    pub fn forward(&self, x: &Var, track: bool) -> Var {
        let g = x.graph().clone();
        let w = enter(&g, &self.weight, track);
        let b = self.bias.as_ref().map(|b| enter(&g, b, track));
        x.conv2d(&w, b.as_ref(), self.stride, self.pad, self.mode)
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<Param> {
        let mut ps = vec![self.weight.clone()];
        if let Some(b) = &self.bias {
            ps.push(b.clone());
        }
        ps
    }
}

/// Fully connected layer: `y = x W + b` with `W: [in, out]`.
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(rng: &mut Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                he_normal(rng, &[fan_in, fan_out], fan_in),
            ),
            bias: Param::new(format!("{name}.bias"), zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, x: &Var, track: bool) -> Var {
        let g = x.graph().clone();
        let w = enter(&g, &self.weight, track);
        let b = enter(&g, &self.bias, track);
        x.matmul(&w).add_row(&b)
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<Param> {
        vec![self.weight.clone(), self.bias.clone()]
    }
}

/// Stateless average pooling (zero padding, divisor includes pad).
pub struct AvgPool2d {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl AvgPool2d {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        AvgPool2d { k, stride, pad }
    }

    pub fn forward(&self, x: &Var) -> Var {
        x.avg_pool2d(self.k, self.stride, self.pad)
    }
}
