//! Parameter storage and the basic layers built on the tape.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Std of the truncated-normal initialiser for projections.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Flat, ordered table of named parameters. Layers hold [`ParamId`]s into it.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics on a duplicate name: names key checkpoints.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        self.params.push(Param { name, value, trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of scalar entries in trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// Binds store parameters to one tape, each at most once, as leaves whose
/// `requires_grad` equals the parameter's `trainable` flag.
pub struct Scope<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    bound: RefCell<Vec<Option<Var<'t>>>>,
    inference: bool,
}

impl<'t, 's> Scope<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Scope { tape, store, bound: RefCell::new(vec![None; store.len()]), inference: false }
    }

    /// Binds every parameter as a constant.
    pub fn inference(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Scope { inference: true, ..Self::new(tape, store) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.borrow()[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.tape.leaf(p.value.clone(), p.trainable && !self.inference);
        self.bound.borrow_mut()[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter after a backward sweep.
    /// Parameters the sweep never reached get zeros.
    pub fn grads(&self) -> Vec<(ParamId, Tensor)> {
        self.bound
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                if !v.requires_grad() {
                    return None;
                }
                let g = v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()));
                Some((ParamId(i), g))
            })
            .collect()
    }

    /// Gradient slot of one parameter, if the sweep reached it.
    pub fn grad(&self, id: ParamId) -> Option<Tensor> {
        self.bound.borrow()[id.0].and_then(|v| v.grad())
    }
}

pub mod init {
    use super::*;

    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
        Tensor::from_fn(shape, |_| std * rng.truncated_normal())
    }

    /// Uniform on `±1/√fan_in`.
    pub fn fan_in_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
        let bound = 1.0 / math::sqrt(fan_in as f64);
        Tensor::uniform(shape, -bound, bound, rng)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Truncated-normal weight, zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        trainable: bool,
        rng: &mut Rng,
    ) -> Self {
        let w = init::trunc_normal(&[out_dim, in_dim], INIT_STD, rng);
        Self::from_tensors(store, name, w, bias.then(|| Tensor::zeros(&[out_dim])), trainable)
    }

    /// Zero weight and bias.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, trainable: bool) -> Self {
        let w = Tensor::zeros(&[out_dim, in_dim]);
        Self::from_tensors(store, name, w, Some(Tensor::zeros(&[out_dim])), trainable)
    }

    /// `weight` is `[out, in]`.
    pub fn from_tensors(
        store: &mut ParamStore,
        name: &str,
        weight: Tensor,
        bias: Option<Tensor>,
        trainable: bool,
    ) -> Self {
        let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
        let weight = store.add(alloc::format!("{name}.weight"), weight, trainable);
        let bias = bias.map(|b| store.add(alloc::format!("{name}.bias"), b, trainable));
        Linear { weight, bias, in_dim, out_dim }
    }

    /// `y = x·Wᵀ + b` over the trailing axis.
    pub fn forward<'t>(&self, s: &Scope<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.last() != Some(&self.in_dim) {
            return Err(shape_err!("linear expects trailing extent {}, got {shape:?}", self.in_dim));
        }
        let rows = shape.iter().product::<usize>() / self.in_dim;
        let mut y = x.reshape(&[rows, self.in_dim])?.matmul_t(&s.param(self.weight))?;
        if let Some(b) = self.bias {
            y = y.add(&s.param(b))?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.out_dim;
        y.reshape(&out_shape)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize, trainable: bool) -> Self {
        LayerNorm {
            gain: store.add(alloc::format!("{name}.gain"), Tensor::ones(&[dim]), trainable),
            shift: store.add(alloc::format!("{name}.shift"), Tensor::zeros(&[dim]), trainable),
            eps: Self::EPS,
        }
    }

    pub fn forward<'t>(&self, s: &Scope<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(&s.param(self.gain), &s.param(self.shift), self.eps)
    }
}

/// Two linear layers with a GELU between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        trainable: bool,
        rng: &mut Rng,
    ) -> Self {
        let (i, h, o) = dims;
        Mlp {
            fc1: Linear::new(store, &alloc::format!("{name}.fc1"), i, h, true, trainable, rng),
            fc2: Linear::new(store, &alloc::format!("{name}.fc2"), h, o, true, trainable, rng),
        }
    }

    pub fn forward<'t>(&self, s: &Scope<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(s, x)?.gelu();
        self.fc2.forward(s, h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub transposed: bool,
}

impl ConvSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec { in_channels, out_channels, kernel: (kernel, kernel), stride, padding, transposed: false }
    }

    pub fn transposed(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec { transposed: true, ..Self::conv(in_channels, out_channels, kernel, stride, padding) }
    }

    /// Output extent along one spatial axis of `size` with kernel extent `k`.
    pub fn output_extent(&self, size: usize, k: usize) -> Option<usize> {
        let (s, p) = (self.stride, self.padding);
        if self.transposed {
            ((size.checked_sub(1)?) * s + k).checked_sub(2 * p).filter(|&v| v > 0)
        } else {
            (size + 2 * p).checked_sub(k).map(|v| v / s + 1)
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        let (kh, kw) = self.kernel;
        if self.transposed {
            [self.in_channels, self.out_channels, kh, kw]
        } else {
            [self.out_channels, self.in_channels, kh, kw]
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2d {
    /// Weights uniform on `±1/√fan_in`, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, trainable: bool, rng: &mut Rng) -> Self {
        let (kh, kw) = spec.kernel;
        let fan_in = if spec.transposed { spec.out_channels } else { spec.in_channels } * kh * kw;
        let w = init::fan_in_uniform(&spec.weight_shape(), fan_in, rng);
        Self::from_tensors(store, name, spec, w, Tensor::zeros(&[spec.out_channels]), trainable)
    }

    pub fn from_tensors(
        store: &mut ParamStore,
        name: &str,
        spec: ConvSpec,
        weight: Tensor,
        bias: Tensor,
        trainable: bool,
    ) -> Self {
        assert_eq!(weight.shape(), spec.weight_shape(), "conv weight shape");
        Conv2d {
            spec,
            weight: store.add(alloc::format!("{name}.weight"), weight, trainable),
            bias: store.add(alloc::format!("{name}.bias"), bias, trainable),
        }
    }

    pub fn forward<'t>(&self, s: &Scope<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.spec.in_channels {
            return Err(shape_err!("conv expects [N, {}, H, W], got {shape:?}", self.spec.in_channels));
        }
        let (w, b) = (s.param(self.weight), s.param(self.bias));
        if self.spec.transposed {
            x.conv_transpose2d(&w, Some(&b), self.spec.stride, self.spec.padding)
        } else {
            x.conv2d(&w, Some(&b), self.spec.stride, self.spec.padding)
        }
    }
}

/// Non-overlapping patch projection plus a learned positional table.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Conv2d,
    pub pos: ParamId,
    pub patch: usize,
    pub grid: (usize, usize),
}

impl PatchEmbed {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        image: (usize, usize),
        patch: usize,
        dim: usize,
        trainable: bool,
        rng: &mut Rng,
    ) -> Self {
        assert!(patch > 0 && image.0 % patch == 0 && image.1 % patch == 0, "image not divisible by patch");
        let spec = ConvSpec::conv(channels, dim, patch, patch, 0);
        let w = init::trunc_normal(&spec.weight_shape(), INIT_STD, rng);
        let proj = Conv2d::from_tensors(store, &alloc::format!("{name}.proj"), spec, w, Tensor::zeros(&[dim]), trainable);
        let grid = (image.0 / patch, image.1 / patch);
        let pos = init::trunc_normal(&[grid.0 * grid.1, dim], INIT_STD, rng);
        let pos = store.add(alloc::format!("{name}.pos"), pos, trainable);
        PatchEmbed { proj, pos, patch, grid }
    }

    /// `[N, c, H, W]` → `[N, H/p·W/p, dim]`.
    pub fn forward<'t>(&self, s: &Scope<'t, '_>, image: Var<'t>) -> Result<Var<'t>> {
        let shape = image.shape();
        if shape.len() != 4 || shape[2] % self.patch != 0 || shape[3] % self.patch != 0 {
            return Err(shape_err!("image {shape:?} is not divisible into {}-pixel patches", self.patch));
        }
        if (shape[2] / self.patch, shape[3] / self.patch) != self.grid {
            return Err(shape_err!("image {shape:?} does not match a {:?} patch grid", self.grid));
        }
        let y = self.proj.forward(s, image)?;
        let dim = self.proj.spec.out_channels;
        let tokens = self.grid.0 * self.grid.1;
        let y = y.reshape(&[shape[0], dim, tokens])?.permute(&[0, 2, 1])?;
        y.add(&s.param(self.pos))
    }
}

/// Bilinear resize with half-pixel centres.
pub fn bilinear_resize<'t>(x: Var<'t>, out_h: usize, out_w: usize) -> Result<Var<'t>> {
    x.resize_bilinear(out_h, out_w)
}

/// `[N, C, H, W]` ↔ `[N, H·W, C]`.
pub fn to_tokens<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(shape_err!("expected [N, C, H, W], got {s:?}"));
    }
    x.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}

pub fn from_tokens<'t>(x: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 3 || s[1] != h * w {
        return Err(shape_err!("expected [N, {}, C], got {s:?}", h * w));
    }
    x.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], h, w])
}
