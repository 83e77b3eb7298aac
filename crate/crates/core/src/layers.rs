//! Convolution helpers, the bottleneck residual block and the LSTM layer.

use longscape_tensor::{Conv2dGeom, Element, Result, TensorError, Var};

use crate::params::{Bound, SpecBuilder};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

/// Activation family; the decoder uses ReLU and everything else leaky ReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    Leaky,
}

impl Act {
    pub fn apply<T: Element>(self, x: &Var<T>) -> Result<Var<T>> {
        match self {
            Act::Relu => x.relu(),
            Act::Leaky => x.leaky_relu(LEAKY_SLOPE),
        }
    }
}

/// Convolution with bias; weight and bias are `{prefix}.weight` / `{prefix}.bias`.
pub fn conv<T: Element>(x: &Var<T>, p: &Bound<T>, prefix: &str, geom: Conv2dGeom) -> Result<Var<T>> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    x.conv2d(w, geom)?.add_channel_bias(b)
}

pub fn conv_transpose<T: Element>(
    x: &Var<T>,
    p: &Bound<T>,
    prefix: &str,
    stride: usize,
    padding: usize,
) -> Result<Var<T>> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let b = p.get(&format!("{prefix}.bias"))?;
    x.conv_transpose2d(w, stride, padding)?.add_channel_bias(b)
}

/// Instance norm with `{prefix}.gamma` / `{prefix}.beta`, then the activation.
pub fn norm_act<T: Element>(x: &Var<T>, p: &Bound<T>, prefix: &str, act: Act) -> Result<Var<T>> {
    let g = p.get(&format!("{prefix}.gamma"))?;
    let b = p.get(&format!("{prefix}.beta"))?;
    act.apply(&x.instance_norm(g, b, NORM_EPS)?)
}

/// Pre-activation bottleneck: `1x1 -> 3x3 (strided) -> 1x1`, each preceded by
/// instance norm and the activation. Stride or channel changes route the
/// shortcut through a strided 1x1 projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Bottleneck {
    pub prefix: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
    pub act: Act,
}

impl Bottleneck {
    pub fn new(prefix: impl Into<String>, in_ch: usize, out_ch: usize, stride: usize, act: Act) -> Self {
        Bottleneck {
            prefix: prefix.into(),
            in_ch,
            out_ch,
            stride,
            act,
        }
    }

    pub fn mid(&self) -> usize {
        (self.out_ch / 4).max(1)
    }

    pub fn has_projection(&self) -> bool {
        self.stride != 1 || self.in_ch != self.out_ch
    }

    pub fn declare(&self, b: &mut SpecBuilder) {
        let p = &self.prefix;
        let mid = self.mid();
        b.norm(&format!("{p}.n1"), self.in_ch);
        b.conv(&format!("{p}.c1"), mid, self.in_ch, (1, 1));
        b.norm(&format!("{p}.n2"), mid);
        b.conv(&format!("{p}.c2"), mid, mid, (3, 3));
        b.norm(&format!("{p}.n3"), mid);
        b.conv(&format!("{p}.c3"), self.out_ch, mid, (1, 1));
        if self.has_projection() {
            b.conv(&format!("{p}.proj"), self.out_ch, self.in_ch, (1, 1));
        }
    }

    pub fn forward<T: Element>(&self, x: &Var<T>, params: &Bound<T>) -> Result<Var<T>> {
        let c = x.shape().get(1).copied().unwrap_or(0);
        if x.shape().len() != 4 || c != self.in_ch {
            return Err(TensorError::shape(
                "bottleneck",
                format!("`{}` expects {} input channels, got {:?}", self.prefix, self.in_ch, x.shape()),
            ));
        }
        let p = &self.prefix;
        let one = Conv2dGeom::default();
        let h = norm_act(x, params, &format!("{p}.n1"), self.act)?;
        let h = conv(&h, params, &format!("{p}.c1"), one)?;
        let h = norm_act(&h, params, &format!("{p}.n2"), self.act)?;
        let h = conv(&h, params, &format!("{p}.c2"), Conv2dGeom::strided(self.stride, 1))?;
        let h = norm_act(&h, params, &format!("{p}.n3"), self.act)?;
        let h = conv(&h, params, &format!("{p}.c3"), one)?;
        let shortcut = if self.has_projection() {
            conv(x, params, &format!("{p}.proj"), Conv2dGeom::strided(self.stride, 0))?
        } else {
            x.clone()
        };
        h.add(&shortcut)
    }
}

/// Hidden and cell state of an LSTM, each `B x H`.
#[derive(Debug, Clone)]
pub struct LstmState<T: Element> {
    pub hidden: Var<T>,
    pub cell: Var<T>,
}

impl<T: Element> LstmState<T> {
    pub fn new(hidden: Var<T>, cell: Var<T>) -> Result<Self> {
        if hidden.shape() != cell.shape() || hidden.shape().len() != 2 {
            return Err(TensorError::shape(
                "lstm",
                format!("hidden {:?} and cell {:?} must be equal B x H", hidden.shape(), cell.shape()),
            ));
        }
        Ok(LstmState { hidden, cell })
    }

    pub fn zeros(tape: &longscape_tensor::Tape<T>, batch: usize, hidden: usize) -> Result<Self> {
        let z = longscape_tensor::Tensor::zeros(&[batch, hidden])?;
        Ok(LstmState {
            hidden: tape.constant(z.clone()),
            cell: tape.constant(z),
        })
    }
}

/// Single LSTM layer with gates ordered `[input, forget, candidate, output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm {
    pub prefix: String,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        Lstm {
            prefix: prefix.into(),
            input,
            hidden,
        }
    }

    pub fn declare(&self, b: &mut SpecBuilder) {
        b.lstm(&self.prefix, self.input, self.hidden);
    }

    pub fn step<T: Element>(&self, x: &Var<T>, state: &LstmState<T>, p: &Bound<T>) -> Result<LstmState<T>> {
        let batch = x.shape()[0];
        if x.shape() != [batch, self.input] || state.hidden.shape() != [batch, self.hidden] {
            return Err(TensorError::shape(
                "lstm",
                format!(
                    "`{}` expects input B x {} and state B x {}, got {:?} and {:?}",
                    self.prefix,
                    self.input,
                    self.hidden,
                    x.shape(),
                    state.hidden.shape()
                ),
            ));
        }
        let pre = &self.prefix;
        let w_ih = p.get(&format!("{pre}.w_ih"))?;
        let w_hh = p.get(&format!("{pre}.w_hh"))?;
        let bias = p.get(&format!("{pre}.bias"))?;
        let h4 = 4 * self.hidden;
        let gates = x
            .matmul(w_ih, false, false)?
            .add(&state.hidden.matmul(w_hh, false, false)?)?
            .add(&bias.reshape(&[1, h4])?.broadcast_to(&[batch, h4])?)?;
        let hs = self.hidden;
        let i = gates.slice(1, 0, hs)?.sigmoid()?;
        let f = gates.slice(1, hs, hs)?.sigmoid()?;
        let g = gates.slice(1, 2 * hs, hs)?.tanh()?;
        let o = gates.slice(1, 3 * hs, hs)?.sigmoid()?;
        let cell = f.mul(&state.cell)?.add(&i.mul(&g)?)?;
        let hidden = o.mul(&cell.tanh()?)?;
        Ok(LstmState { hidden, cell })
    }

    pub fn forward<T: Element>(
        &self,
        seq: &[Var<T>],
        init: LstmState<T>,
        p: &Bound<T>,
    ) -> Result<(Vec<Var<T>>, LstmState<T>)> {
        if seq.is_empty() {
            return Err(TensorError::shape("lstm", "empty input sequence"));
        }
        let mut state = init;
        let mut outputs = Vec::with_capacity(seq.len());
        for x in seq {
            state = self.step(x, &state, p)?;
            outputs.push(state.hidden.clone());
        }
        Ok((outputs, state))
    }
}
