//! Dense network stack with hand-written backward passes.
//!
//! Three networks share one flat parameter vector:
//!
//! * the lifting branch, a residual MLP from 26 normalized keypoint
//!   coordinates to 39 pose coordinates,
//! * the point branch, a shared per-point MLP followed by a max-pool and a
//!   regression head,
//! * the fusion layer, one linear map from the 78 concatenated branch outputs
//!   to the final 39.
//!
//! Batches are row-major matrices. The point branch stacks the `B x N` points
//! of a batch into one `B*N x 3` matrix so each shared layer is one product.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng, stream};

pub const POSE_DIM: usize = 39;
pub const LIFT_IN: usize = 26;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NnError> {
        if data.len() != rows * cols {
            return Err(NnError::Shape(format!("{} values for a {rows}x{cols} tensor", data.len())));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `c = a' b' + beta c` where `a'` is `a` or its transpose (likewise `b'`).
/// `a` is stored row-major as `ar x ac`, `b` as `br x bc`.
#[allow(clippy::too_many_arguments)]
fn gemm(a: &[f64], ar: usize, ac: usize, ta: bool, b: &[f64], br: usize, bc: usize, tb: bool, beta: f64, c: &mut [f64]) {
    let (m, k, rsa, csa) = if ta { (ac, ar, 1, ac) } else { (ar, ac, ac, 1) };
    let (k2, n, rsb, csb) = if tb { (bc, br, 1, bc) } else { (br, bc, bc, 1) };
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(c.len(), m * n, "output has the wrong size");
    assert!(a.len() >= ar * ac && b.len() >= br * bc);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Layer sizes. `paper()` is the full-size model; the smaller presets keep
/// the same structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub lift_width: usize,
    pub lift_blocks: usize,
    /// Widths of the shared per-point layers; the last one is the pooled
    /// feature size.
    pub point_widths: Vec<usize>,
    /// Hidden widths of the regression head after pooling.
    pub head_widths: Vec<usize>,
    pub num_points: usize,
    pub lift_dropout: f64,
    pub head_dropout: f64,
}

impl Architecture {
    pub fn paper() -> Self {
        Architecture {
            lift_width: 512,
            lift_blocks: 4,
            point_widths: vec![64, 64, 64, 128, 1024],
            head_widths: vec![512, 256],
            num_points: 512,
            lift_dropout: 0.1,
            head_dropout: 0.4,
        }
    }

    /// Narrower layers sized for single-core training runs.
    pub fn desk() -> Self {
        Architecture {
            lift_width: 128,
            lift_blocks: 4,
            point_widths: vec![32, 32, 64],
            head_widths: vec![64, 64],
            num_points: 512,
            lift_dropout: 0.1,
            head_dropout: 0.4,
        }
    }

    /// Tiny widths for exhaustive gradient checks.
    pub fn compact() -> Self {
        Architecture {
            lift_width: 16,
            lift_blocks: 4,
            point_widths: vec![8, 8, 8, 16, 32],
            head_widths: vec![16, 16],
            num_points: 64,
            lift_dropout: 0.1,
            head_dropout: 0.4,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            "compact" => Some(Self::compact()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let ok = self.lift_width > 0
            && !self.point_widths.is_empty()
            && self.point_widths.iter().chain(&self.head_widths).all(|&w| w > 0)
            && self.num_points > 0
            && (0.0..1.0).contains(&self.lift_dropout)
            && (0.0..1.0).contains(&self.head_dropout);
        if ok {
            Ok(())
        } else {
            Err(NnError::Shape(format!("invalid architecture {self:?}")))
        }
    }
}

/// Which outputs a model produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Fusion,
    #[value(name = "lifting")]
    LiftingOnly,
    #[value(name = "point")]
    PointOnly,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Fusion => "fusion",
            Variant::LiftingOnly => "lifting-only",
            Variant::PointOnly => "point-only",
        }
    }

    fn code(self) -> u8 {
        match self {
            Variant::Fusion => 0,
            Variant::LiftingOnly => 1,
            Variant::PointOnly => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        [Variant::Fusion, Variant::LiftingOnly, Variant::PointOnly].get(c as usize).copied()
    }

    pub fn uses_lifting(self) -> bool {
        self != Variant::PointOnly
    }

    pub fn uses_point(self) -> bool {
        self != Variant::LiftingOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// A dense layer: weight `fan_in x fan_out` at `w`, bias at `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
}

impl Dense {
    fn weight<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + self.fan_in * self.fan_out]
    }

    fn bias<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.b..self.b + self.fan_out]
    }

    /// `x W + b`.
    fn forward(&self, p: &[f64], x: &Tensor2) -> Tensor2 {
        assert_eq!(x.cols, self.fan_in);
        let mut y = Tensor2::zeros(x.rows, self.fan_out);
        let b = self.bias(p);
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(b);
        }
        gemm(&x.data, x.rows, x.cols, false, self.weight(p), self.fan_in, self.fan_out, false, 1.0, &mut y.data);
        y
    }

    /// Accumulates weight and bias gradients; returns `dL/dx` if asked.
    fn backward(&self, p: &[f64], x: &Tensor2, dy: &Tensor2, grad: &mut [f64], want_dx: bool) -> Option<Tensor2> {
        let (fi, fo) = (self.fan_in, self.fan_out);
        gemm(&x.data, x.rows, x.cols, true, &dy.data, dy.rows, dy.cols, false, 1.0, &mut grad[self.w..self.w + fi * fo]);
        let gb = &mut grad[self.b..self.b + fo];
        for r in 0..dy.rows {
            for (g, d) in gb.iter_mut().zip(dy.row(r)) {
                *g += d;
            }
        }
        want_dx.then(|| {
            let mut dx = Tensor2::zeros(dy.rows, fi);
            gemm(&dy.data, dy.rows, dy.cols, false, self.weight(p), fi, fo, true, 0.0, &mut dx.data);
            dx
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Network {
    lift_in: Dense,
    lift_blocks: Vec<(Dense, Dense)>,
    lift_out: Dense,
    point_mlp: Vec<Dense>,
    point_head: Vec<Dense>,
    point_out: Dense,
    fusion: Dense,
    tensors: Vec<TensorSpec>,
    len: usize,
}

impl Network {
    fn new(arch: &Architecture) -> Self {
        let mut tensors = Vec::new();
        let mut len = 0;
        let mut dense = |name: String, fan_in: usize, fan_out: usize| {
            let w = len;
            tensors.push(TensorSpec {
                name: format!("{name}.weight"),
                rows: fan_in,
                cols: fan_out,
                offset: w,
            });
            len += fan_in * fan_out;
            let b = len;
            tensors.push(TensorSpec {
                name: format!("{name}.bias"),
                rows: 1,
                cols: fan_out,
                offset: b,
            });
            len += fan_out;
            Dense { fan_in, fan_out, w, b }
        };
        let lw = arch.lift_width;
        let lift_in = dense("lift.input".into(), LIFT_IN, lw);
        let lift_blocks = (0..arch.lift_blocks)
            .map(|k| (dense(format!("lift.block{k}.fc1"), lw, lw), dense(format!("lift.block{k}.fc2"), lw, lw)))
            .collect();
        let lift_out = dense("lift.output".into(), lw, POSE_DIM);
        let mut prev = 3;
        let point_mlp = arch
            .point_widths
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                let d = dense(format!("point.mlp{k}"), prev, w);
                prev = w;
                d
            })
            .collect();
        let point_head = arch
            .head_widths
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                let d = dense(format!("point.head{k}"), prev, w);
                prev = w;
                d
            })
            .collect();
        let point_out = dense("point.output".into(), prev, POSE_DIM);
        let fusion = dense("fusion".into(), 2 * POSE_DIM, POSE_DIM);
        Network {
            lift_in,
            lift_blocks,
            lift_out,
            point_mlp,
            point_head,
            point_out,
            fusion,
            tensors,
            len,
        }
    }

    fn lift_range(&self) -> std::ops::Range<usize> {
        self.lift_in.w..self.point_mlp[0].w
    }

    fn point_range(&self) -> std::ops::Range<usize> {
        self.point_mlp[0].w..self.fusion.w
    }
}

/// All parameters of the lifting, point and fusion networks as one flat
/// vector, with a named layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    net: Network,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: &Architecture) -> Self {
        let net = Network::new(arch);
        let values = vec![0.0; net.len];
        ModelParams {
            arch: arch.clone(),
            net,
            values,
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.net.tensors
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn unflatten(arch: &Architecture, values: Vec<f64>) -> Result<Self, NnError> {
        let net = Network::new(arch);
        if values.len() != net.len {
            return Err(NnError::Shape(format!("{} values for {} parameters", values.len(), net.len)));
        }
        Ok(ModelParams {
            arch: arch.clone(),
            net,
            values,
        })
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.net.tensors.iter().find(|t| t.name == name).map(|t| &self.values[t.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let range = self.net.tensors.iter().find(|t| t.name == name)?.range();
        Some(&mut self.values[range])
    }

    /// Name of the tensor holding flat index `i`, with the offset inside it.
    pub fn locate(&self, i: usize) -> Option<(&str, usize)> {
        self.net
            .tensors
            .iter()
            .find(|t| t.range().contains(&i))
            .map(|t| (t.name.as_str(), i - t.offset))
    }
}

/// He-normal weights for layers feeding a rectifier, `N(0, 1/fan_in)` for the
/// two branch output layers, zero biases, and a fusion layer that starts as
/// the mean of the two branches.
pub fn init_params(arch: &Architecture, seed: u64) -> ModelParams {
    let mut p = ModelParams::zeros(arch);
    let net = p.net.clone();
    let mut rng = rng::rng_for(seed, stream::INIT, 0);
    let mut fill = |d: &Dense, gain: f64, values: &mut [f64]| {
        let n = Normal::new(0.0, (gain / d.fan_in as f64).sqrt()).expect("positive std");
        for w in &mut values[d.w..d.w + d.fan_in * d.fan_out] {
            *w = n.sample(&mut rng);
        }
    };
    let relu_layers = std::iter::once(&net.lift_in)
        .chain(net.lift_blocks.iter().flat_map(|(a, b)| [a, b]))
        .chain(&net.point_mlp)
        .chain(&net.point_head);
    for d in relu_layers {
        fill(d, 2.0, &mut p.values);
    }
    fill(&net.lift_out, 1.0, &mut p.values);
    fill(&net.point_out, 1.0, &mut p.values);
    let f = net.fusion;
    for k in 0..POSE_DIM {
        p.values[f.w + k * POSE_DIM + k] = 0.5;
        p.values[f.w + (POSE_DIM + k) * POSE_DIM + k] = 0.5;
    }
    p
}

/// Per-activation dropout scales: 0 for dropped units, `1/(1-p)` for kept.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DropoutMasks {
    pub lift: Vec<Tensor2>,
    pub head: Option<Tensor2>,
}

/// How dropout behaves in a forward pass.
pub enum Dropout<'a> {
    /// Identity, as at evaluation time.
    Off,
    /// Fresh masks drawn from the generator.
    Sample(&'a mut Rng),
    /// Replays given masks, so repeated passes see the same network.
    Frozen(&'a DropoutMasks),
}

fn draw_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Tensor2 {
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    Tensor2 { rows, cols, data }
}

fn relu_in_place(t: &mut Tensor2) {
    for x in &mut t.data {
        *x = x.max(0.0);
    }
}

fn apply_mask(a: &Tensor2, m: Option<&Tensor2>) -> Tensor2 {
    match m {
        None => a.clone(),
        Some(m) => {
            assert_eq!((a.rows, a.cols), (m.rows, m.cols), "dropout mask shape");
            let data = a.data.iter().zip(&m.data).map(|(x, s)| x * s).collect();
            Tensor2 { rows: a.rows, cols: a.cols, data }
        }
    }
}

/// `d * mask * [a > 0]`: gradient through dropout then the rectifier.
fn back_relu(d: &Tensor2, a: &Tensor2, m: Option<&Tensor2>) -> Tensor2 {
    let data = match m {
        None => d.data.iter().zip(&a.data).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
        Some(m) => d
            .data
            .iter()
            .zip(&a.data)
            .zip(&m.data)
            .map(|((g, x), s)| if *x > 0.0 { g * s } else { 0.0 })
            .collect(),
    };
    Tensor2 { rows: d.rows, cols: d.cols, data }
}

fn check_finite(t: &Tensor2, what: &str) -> Result<(), NnError> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(NnError::NonFinite(what.into()))
    }
}

fn hash_pattern(h: &mut u64, t: &Tensor2) {
    for chunk in t.data.chunks(64) {
        let mut bits = 0u64;
        for (i, x) in chunk.iter().enumerate() {
            if *x > 0.0 {
                bits |= 1 << i;
            }
        }
        *h = (*h ^ bits).wrapping_mul(0x0000_0100_0000_01b3);
    }
}

#[derive(Debug, Clone)]
struct BlockTrace {
    input: Tensor2,
    a1: Tensor2,
    t: Tensor2,
    a2: Tensor2,
}

/// Cached activations of a lifting pass.
#[derive(Debug, Clone)]
pub struct LiftTrace {
    input: Tensor2,
    a0: Tensor2,
    blocks: Vec<BlockTrace>,
    last: Tensor2,
    masks: Vec<Tensor2>,
}

impl LiftTrace {
    /// Hash of every rectifier on/off state.
    pub fn pattern(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325;
        hash_pattern(&mut h, &self.a0);
        for b in &self.blocks {
            hash_pattern(&mut h, &b.a1);
            hash_pattern(&mut h, &b.a2);
        }
        h
    }
}

/// Cached activations of a point pass, including the pooling argmax.
#[derive(Debug, Clone)]
pub struct PointTrace {
    n_points: usize,
    /// Input followed by every shared-layer activation.
    mlp: Vec<Tensor2>,
    pooled: Tensor2,
    argmax: Vec<usize>,
    head: Vec<Tensor2>,
    last: Tensor2,
    mask: Option<Tensor2>,
}

impl PointTrace {
    pub fn pattern(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325;
        for a in self.mlp.iter().skip(1).chain(&self.head) {
            hash_pattern(&mut h, a);
        }
        for &i in &self.argmax {
            h = (h ^ i as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

fn lift_masks<'a>(dropout: &'a mut Dropout<'_>, rows: usize, arch: &Architecture) -> Vec<Tensor2> {
    let n = 1 + 2 * arch.lift_blocks;
    match dropout {
        Dropout::Off => Vec::new(),
        Dropout::Sample(rng) if arch.lift_dropout > 0.0 => {
            (0..n).map(|_| draw_mask(rows, arch.lift_width, arch.lift_dropout, rng)).collect()
        }
        Dropout::Sample(_) => Vec::new(),
        Dropout::Frozen(m) => m.lift.clone(),
    }
}

/// Residual MLP from `B x 26` keypoints to `B x 39` poses.
pub fn lifting_forward(p: &ModelParams, x: &Tensor2, mut dropout: Dropout<'_>) -> Result<(Tensor2, LiftTrace), NnError> {
    let net = &p.net;
    let v = &p.values;
    if x.cols != LIFT_IN {
        return Err(NnError::Shape(format!("lifting input has {} columns", x.cols)));
    }
    let masks = lift_masks(&mut dropout, x.rows, &p.arch);
    if !masks.is_empty() && masks.len() != 1 + 2 * net.lift_blocks.len() {
        return Err(NnError::Shape("frozen lifting masks do not match the architecture".into()));
    }
    let m = |k: usize| masks.get(k);
    let mut a0 = net.lift_in.forward(v, x);
    relu_in_place(&mut a0);
    let mut h = apply_mask(&a0, m(0));
    let mut blocks = Vec::with_capacity(net.lift_blocks.len());
    for (k, (f1, f2)) in net.lift_blocks.iter().enumerate() {
        let mut a1 = f1.forward(v, &h);
        relu_in_place(&mut a1);
        let t = apply_mask(&a1, m(1 + 2 * k));
        let mut a2 = f2.forward(v, &t);
        relu_in_place(&mut a2);
        let u = apply_mask(&a2, m(2 + 2 * k));
        let next = Tensor2 {
            rows: h.rows,
            cols: h.cols,
            data: h.data.iter().zip(&u.data).map(|(a, b)| a + b).collect(),
        };
        blocks.push(BlockTrace { input: h, a1, t, a2 });
        h = next;
    }
    let y = net.lift_out.forward(v, &h);
    check_finite(&y, "lifting output")?;
    Ok((
        y,
        LiftTrace {
            input: x.clone(),
            a0,
            blocks,
            last: h,
            masks,
        },
    ))
}

fn lifting_backward(p: &ModelParams, tr: &LiftTrace, dy: &Tensor2, grad: &mut [f64]) {
    let net = &p.net;
    let v = &p.values;
    let m = |k: usize| tr.masks.get(k);
    let mut dh = net.lift_out.backward(v, &tr.last, dy, grad, true).unwrap();
    for (k, ((f1, f2), b)) in net.lift_blocks.iter().zip(&tr.blocks).enumerate().rev() {
        let dz2 = back_relu(&dh, &b.a2, m(2 + 2 * k));
        let dt = f2.backward(v, &b.t, &dz2, grad, true).unwrap();
        let dz1 = back_relu(&dt, &b.a1, m(1 + 2 * k));
        let dh_in = f1.backward(v, &b.input, &dz1, grad, true).unwrap();
        for (a, b) in dh.data.iter_mut().zip(&dh_in.data) {
            *a += b;
        }
    }
    let dz0 = back_relu(&dh, &tr.a0, m(0));
    net.lift_in.backward(v, &tr.input, &dz0, grad, false);
}

/// Shared per-point MLP, max-pool, and regression head. `clouds` stacks
/// `B` clouds of `n_points` rows each.
pub fn point_forward(
    p: &ModelParams,
    clouds: &Tensor2,
    n_points: usize,
    mut dropout: Dropout<'_>,
) -> Result<(Tensor2, PointTrace), NnError> {
    let net = &p.net;
    let v = &p.values;
    if clouds.cols != 3 || n_points == 0 || clouds.rows % n_points != 0 {
        return Err(NnError::Shape(format!(
            "point input {}x{} is not a stack of {n_points}-point clouds",
            clouds.rows, clouds.cols
        )));
    }
    let b = clouds.rows / n_points;
    let mut mlp = vec![clouds.clone()];
    for d in &net.point_mlp {
        let mut a = d.forward(v, mlp.last().unwrap());
        relu_in_place(&mut a);
        mlp.push(a);
    }
    let feat = mlp.last().unwrap();
    let f = feat.cols;
    let mut pooled = Tensor2::zeros(b, f);
    let mut argmax = vec![0usize; b * f];
    for s in 0..b {
        let best = &mut pooled.data[s * f..(s + 1) * f];
        let arg = &mut argmax[s * f..(s + 1) * f];
        best.copy_from_slice(feat.row(s * n_points));
        for i in 1..n_points {
            for ((bv, ai), x) in best.iter_mut().zip(arg.iter_mut()).zip(feat.row(s * n_points + i)) {
                if *x > *bv {
                    *bv = *x;
                    *ai = i;
                }
            }
        }
    }
    let mut head = Vec::with_capacity(net.point_head.len());
    let mut g = pooled.clone();
    for d in &net.point_head {
        let mut a = d.forward(v, &g);
        relu_in_place(&mut a);
        g = a.clone();
        head.push(a);
    }
    let mask = match &mut dropout {
        Dropout::Off => None,
        Dropout::Sample(rng) if p.arch.head_dropout > 0.0 => Some(draw_mask(g.rows, g.cols, p.arch.head_dropout, rng)),
        Dropout::Sample(_) => None,
        Dropout::Frozen(m) => m.head.clone(),
    };
    let last = apply_mask(&g, mask.as_ref());
    let y = net.point_out.forward(v, &last);
    check_finite(&y, "point output")?;
    Ok((
        y,
        PointTrace {
            n_points,
            mlp,
            pooled,
            argmax,
            head,
            last,
            mask,
        },
    ))
}

fn point_backward(p: &ModelParams, tr: &PointTrace, dy: &Tensor2, grad: &mut [f64]) {
    let net = &p.net;
    let v = &p.values;
    let mut dg = net.point_out.backward(v, &tr.last, dy, grad, true).unwrap();
    let n_head = net.point_head.len();
    for (k, d) in net.point_head.iter().enumerate().rev() {
        let mask = if k + 1 == n_head { tr.mask.as_ref() } else { None };
        let dz = back_relu(&dg, &tr.head[k], mask);
        let input = if k == 0 { &tr.pooled } else { &tr.head[k - 1] };
        dg = d.backward(v, input, &dz, grad, true).unwrap();
    }
    if n_head == 0 {
        if let Some(m) = &tr.mask {
            // Dropout sat directly on the pooled feature.
            dg = apply_mask(&dg, Some(m));
        }
    }
    let feat = tr.mlp.last().unwrap();
    let f = feat.cols;
    let mut da = Tensor2::zeros(feat.rows, f);
    for s in 0..dg.rows {
        for c in 0..f {
            let row = s * tr.n_points + tr.argmax[s * f + c];
            da.data[row * f + c] = dg.get(s, c);
        }
    }
    for (k, d) in net.point_mlp.iter().enumerate().rev() {
        let dz = back_relu(&da, &tr.mlp[k + 1], None);
        match d.backward(v, &tr.mlp[k], &dz, grad, k > 0) {
            Some(dx) => da = dx,
            None => break,
        }
    }
}

/// Which branch embeddings reach the fusion layer for one sample. A missing
/// branch contributes zeros.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Availability {
    pub lifting: bool,
    pub point: bool,
}

impl Availability {
    pub const BOTH: Availability = Availability {
        lifting: true,
        point: true,
    };
}

fn fusion_input(lift: &Tensor2, point: &Tensor2, avail: &[Availability]) -> Tensor2 {
    let mut e = Tensor2::zeros(lift.rows, 2 * POSE_DIM);
    for r in 0..lift.rows {
        let a = avail.get(r).copied().unwrap_or(Availability::BOTH);
        let row = e.row_mut(r);
        if a.lifting {
            row[..POSE_DIM].copy_from_slice(lift.row(r));
        }
        if a.point {
            row[POSE_DIM..].copy_from_slice(point.row(r));
        }
    }
    e
}

/// Linear fusion of the two branch outputs, `[lift | point] W + b`.
pub fn fusion_forward(p: &ModelParams, lift: &Tensor2, point: &Tensor2, avail: &[Availability]) -> Result<Tensor2, NnError> {
    if lift.cols != POSE_DIM || point.cols != POSE_DIM || lift.rows != point.rows {
        return Err(NnError::Shape("fusion inputs must both be B x 39".into()));
    }
    Ok(p.net.fusion.forward(&p.values, &fusion_input(lift, point, avail)))
}

/// Network inputs for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInput {
    /// `B x 26` normalized keypoints.
    pub keypoints: Tensor2,
    /// `B * n_points x 3` clouds in the box frame.
    pub clouds: Tensor2,
    pub n_points: usize,
    pub avail: Vec<Availability>,
}

impl BatchInput {
    pub fn len(&self) -> usize {
        self.keypoints.rows
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.rows == 0
    }
}

/// Everything a backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub variant: Variant,
    pub lift: Option<LiftTrace>,
    pub point: Option<PointTrace>,
    fusion_in: Option<Tensor2>,
    avail: Vec<Availability>,
}

impl ForwardTrace {
    /// The dropout masks drawn in this pass, for replay with
    /// [`Dropout::Frozen`].
    pub fn masks(&self) -> DropoutMasks {
        DropoutMasks {
            lift: self.lift.as_ref().map(|t| t.masks.clone()).unwrap_or_default(),
            head: self.point.as_ref().and_then(|t| t.mask.clone()),
        }
    }
}

fn reborrow<'s>(d: &'s mut Dropout<'_>) -> Dropout<'s> {
    match d {
        Dropout::Off => Dropout::Off,
        Dropout::Sample(r) => Dropout::Sample(r),
        Dropout::Frozen(m) => Dropout::Frozen(m),
    }
}

/// Forward pass of the chosen variant; returns `B x 39` poses.
pub fn forward(
    p: &ModelParams,
    variant: Variant,
    input: &BatchInput,
    mut dropout: Dropout<'_>,
) -> Result<(Tensor2, ForwardTrace), NnError> {
    let lift = if variant.uses_lifting() {
        Some(lifting_forward(p, &input.keypoints, reborrow(&mut dropout))?)
    } else {
        None
    };
    let point = if variant.uses_point() {
        Some(point_forward(p, &input.clouds, input.n_points, reborrow(&mut dropout))?)
    } else {
        None
    };
    if let Some((y, _)) = &point {
        if y.rows != input.len() {
            return Err(NnError::Shape(format!("{} clouds for {} keypoint rows", y.rows, input.len())));
        }
    }
    let (out, fusion_in) = match (&lift, &point) {
        (Some((l, _)), Some((q, _))) => {
            let e = fusion_input(l, q, &input.avail);
            (p.net.fusion.forward(&p.values, &e), Some(e))
        }
        (Some((l, _)), None) => (l.clone(), None),
        (None, Some((q, _))) => (q.clone(), None),
        (None, None) => unreachable!("every variant uses a branch"),
    };
    check_finite(&out, "model output")?;
    Ok((
        out,
        ForwardTrace {
            variant,
            lift: lift.map(|(_, t)| t),
            point: point.map(|(_, t)| t),
            fusion_in,
            avail: input.avail.clone(),
        },
    ))
}

/// Gradient of the loss with respect to every parameter, given `dL/dy`.
/// Parameters the variant does not use get zero gradient.
pub fn backward(p: &ModelParams, trace: &ForwardTrace, dy: &Tensor2) -> Result<Vec<f64>, NnError> {
    if dy.cols != POSE_DIM {
        return Err(NnError::Shape(format!("output gradient has {} columns", dy.cols)));
    }
    let rows = trace
        .lift
        .as_ref()
        .map(|t| t.input.rows)
        .or(trace.point.as_ref().map(|t| t.pooled.rows))
        .unwrap_or(0);
    if dy.rows != rows {
        return Err(NnError::Shape(format!("output gradient has {} rows for a batch of {rows}", dy.rows)));
    }
    let mut grad = vec![0.0; p.len()];
    match trace.variant {
        Variant::LiftingOnly => lifting_backward(p, trace.lift.as_ref().unwrap(), dy, &mut grad),
        Variant::PointOnly => point_backward(p, trace.point.as_ref().unwrap(), dy, &mut grad),
        Variant::Fusion => {
            let e = trace.fusion_in.as_ref().unwrap();
            let de = p.net.fusion.backward(&p.values, e, dy, &mut grad, true).unwrap();
            let mut dl = Tensor2::zeros(dy.rows, POSE_DIM);
            let mut dp = Tensor2::zeros(dy.rows, POSE_DIM);
            for r in 0..dy.rows {
                let a = trace.avail.get(r).copied().unwrap_or(Availability::BOTH);
                if a.lifting {
                    dl.row_mut(r).copy_from_slice(&de.row(r)[..POSE_DIM]);
                }
                if a.point {
                    dp.row_mut(r).copy_from_slice(&de.row(r)[POSE_DIM..]);
                }
            }
            lifting_backward(p, trace.lift.as_ref().unwrap(), &dl, &mut grad);
            point_backward(p, trace.point.as_ref().unwrap(), &dp, &mut grad);
        }
    }
    Ok(grad)
}

/// Result of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of `|ga - gn| / max(|ga| + |gn|, 1e-8)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates skipped because every step size crossed a kink.
    pub skipped: usize,
}

/// Compares `analytic` to central differences of `eval` at `indices`.
///
/// `eval(i, x)` returns the loss with coordinate `i` set to `x`, plus a
/// fingerprint of the piecewise-linear regime (rectifier states, pooling
/// winners). When either side of a difference lands in another regime the
/// step shrinks tenfold, up to twice, before the coordinate is skipped.
pub fn grad_check_with(
    base: &[f64],
    analytic: &[f64],
    indices: &[usize],
    epsilon: f64,
    mut eval: impl FnMut(usize, f64) -> (f64, u64),
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: indices.first().copied().unwrap_or(0),
        checked: 0,
        skipped: 0,
    };
    for &i in indices {
        let x = base[i];
        let (_, regime) = eval(i, x);
        let mut numeric = None;
        let mut eps = epsilon;
        for _ in 0..3 {
            let (lp, rp) = eval(i, x + eps);
            let (lm, rm) = eval(i, x - eps);
            if rp == regime && rm == regime {
                numeric = Some((lp - lm) / (2.0 * eps));
                break;
            }
            eps /= 10.0;
        }
        let Some(gn) = numeric else {
            report.skipped += 1;
            continue;
        };
        let ga = analytic[i];
        let rel = (ga - gn).abs() / (ga.abs() + gn.abs()).max(1e-8);
        if report.checked == 0 || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
        }
        report.checked += 1;
    }
    report
}

/// Loss on model outputs: value and `dL/dy`.
pub type OutputLoss<'a> = dyn Fn(&Tensor2) -> (f64, Tensor2) + 'a;

/// Gradient check of a whole model on one batch with frozen dropout masks.
///
/// Only the branch owning a perturbed coordinate is recomputed. With
/// `indices` empty every coordinate used by the variant is checked.
/// `corrupt` doubles one analytic component first, to confirm the checker
/// notices a wrong gradient.
#[allow(clippy::too_many_arguments)]
pub fn grad_check(
    p: &ModelParams,
    variant: Variant,
    input: &BatchInput,
    masks: &DropoutMasks,
    loss: &OutputLoss<'_>,
    epsilon: f64,
    indices: &[usize],
    corrupt: Option<usize>,
) -> Result<GradCheckReport, NnError> {
    let (y, trace) = forward(p, variant, input, Dropout::Frozen(masks))?;
    let (_, dy) = loss(&y);
    let mut analytic = backward(p, &trace, &dy)?;
    if let Some(i) = corrupt {
        analytic[i] *= 2.0;
    }
    let all: Vec<usize>;
    let indices = if indices.is_empty() {
        let mut v = Vec::new();
        if variant.uses_lifting() {
            v.extend(p.net.lift_range());
        }
        if variant.uses_point() {
            v.extend(p.net.point_range());
        }
        if variant == Variant::Fusion {
            v.extend(p.net.fusion.w..p.len());
        }
        all = v;
        &all[..]
    } else {
        indices
    };

    let lift0 = trace.lift.as_ref().map(|t| (lifting_forward(p, &input.keypoints, Dropout::Frozen(masks)).unwrap().0, t.pattern()));
    let point0 = trace
        .point
        .as_ref()
        .map(|t| (point_forward(p, &input.clouds, input.n_points, Dropout::Frozen(masks)).unwrap().0, t.pattern()));
    let lift_range = p.net.lift_range();
    let point_range = p.net.point_range();
    let mut work = p.clone();
    let combine = |w: &ModelParams, l: Option<&Tensor2>, q: Option<&Tensor2>| -> Tensor2 {
        match (l, q) {
            (Some(l), Some(q)) => fusion_forward(w, l, q, &input.avail).unwrap(),
            (Some(l), None) => l.clone(),
            (None, Some(q)) => q.clone(),
            (None, None) => unreachable!(),
        }
    };
    let mut failure = None;
    let report = grad_check_with(p.values(), &analytic, indices, epsilon, |i, x| {
        let old = work.values[i];
        work.values[i] = x;
        let result = if lift_range.contains(&i) {
            lifting_forward(&work, &input.keypoints, Dropout::Frozen(masks)).map(|(l, t)| {
                let y = combine(&work, Some(&l), point0.as_ref().map(|(q, _)| q));
                (loss(&y).0, t.pattern() ^ point0.as_ref().map_or(0, |(_, h)| *h))
            })
        } else if point_range.contains(&i) {
            point_forward(&work, &input.clouds, input.n_points, Dropout::Frozen(masks)).map(|(q, t)| {
                let y = combine(&work, lift0.as_ref().map(|(l, _)| l), Some(&q));
                (loss(&y).0, t.pattern() ^ lift0.as_ref().map_or(0, |(_, h)| *h))
            })
        } else {
            let y = combine(&work, lift0.as_ref().map(|(l, _)| l), point0.as_ref().map(|(q, _)| q));
            Ok((loss(&y).0, lift0.as_ref().map_or(0, |(_, h)| *h) ^ point0.as_ref().map_or(0, |(_, h)| *h)))
        };
        work.values[i] = old;
        result.unwrap_or_else(|e| {
            failure.get_or_insert(e);
            (f64::NAN, 0)
        })
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

const MAGIC: &[u8; 8] = b"FPOSECK\0";
const CHECKPOINT_VERSION: u32 = 1;

/// A trained model on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub variant: Variant,
    pub params: ModelParams,
}

fn put_u32(out: &mut Vec<u8>, x: usize) {
    out.extend_from_slice(&(x as u32).to_le_bytes());
}

/// Little-endian layout:
///
/// ```text
/// magic "FPOSECK\0" | version u32 | seed u64 | variant u8
/// lift_width u32 | lift_blocks u32 | num_points u32
/// lift_dropout f64 | head_dropout f64
/// n u32, n x point width u32 | n u32, n x head width u32
/// n_tensors u32, per tensor: name_len u32, name bytes, rows u32, cols u32
/// values f64, tensors in manifest order
/// ```
pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let a = c.params.arch();
    let mut out = Vec::with_capacity(64 + 8 * c.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&c.seed.to_le_bytes());
    out.push(c.variant.code());
    put_u32(&mut out, a.lift_width);
    put_u32(&mut out, a.lift_blocks);
    put_u32(&mut out, a.num_points);
    out.extend_from_slice(&a.lift_dropout.to_le_bytes());
    out.extend_from_slice(&a.head_dropout.to_le_bytes());
    for widths in [&a.point_widths, &a.head_widths] {
        put_u32(&mut out, widths.len());
        for &w in widths.iter() {
            put_u32(&mut out, w);
        }
    }
    put_u32(&mut out, c.params.layout().len());
    for t in c.params.layout() {
        put_u32(&mut out, t.name.len());
        out.extend_from_slice(t.name.as_bytes());
        put_u32(&mut out, t.rows);
        put_u32(&mut out, t.cols);
    }
    for v in c.params.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| NnError::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint, NnError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(NnError::Checkpoint("not a checkpoint file".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(NnError::Checkpoint(format!("version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let seed = c.u64()?;
    let variant = Variant::from_code(c.take(1)?[0]).ok_or_else(|| NnError::Checkpoint("unknown variant".into()))?;
    let lift_width = c.u32()?;
    let lift_blocks = c.u32()?;
    let num_points = c.u32()?;
    let lift_dropout = c.f64()?;
    let head_dropout = c.f64()?;
    let mut widths = || -> Result<Vec<usize>, NnError> {
        let n = c.u32()?;
        if n > 64 {
            return Err(NnError::Checkpoint("implausible layer count".into()));
        }
        (0..n).map(|_| c.u32()).collect()
    };
    let point_widths = widths()?;
    let head_widths = widths()?;
    let arch = Architecture {
        lift_width,
        lift_blocks,
        point_widths,
        head_widths,
        num_points,
        lift_dropout,
        head_dropout,
    };
    arch.validate().map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let expected = Network::new(&arch).tensors;
    let n = c.u32()?;
    if n != expected.len() {
        return Err(NnError::Checkpoint(format!("{n} tensors, architecture has {}", expected.len())));
    }
    for t in &expected {
        let len = c.u32()?;
        let name = c.take(len)?;
        let (rows, cols) = (c.u32()?, c.u32()?);
        if name != t.name.as_bytes() || rows != t.rows || cols != t.cols {
            return Err(NnError::Checkpoint(format!("tensor manifest disagrees at {}", t.name)));
        }
    }
    let total: usize = expected.iter().map(TensorSpec::len).sum();
    let values = (0..total).map(|_| c.f64()).collect::<Result<Vec<_>, _>>()?;
    if c.pos != buf.len() {
        return Err(NnError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        seed,
        variant,
        params: ModelParams::unflatten(&arch, values)?,
    })
}

pub fn write_checkpoint(c: &Checkpoint, path: impl AsRef<Path>) -> Result<(), NnError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&encode_checkpoint(c))?;
    f.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, NnError> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_checkpoint(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand::seq::SliceRandom;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor2 {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect();
        Tensor2 { rows, cols, data }
    }

    fn batch(arch: &Architecture, b: usize, seed: u64) -> BatchInput {
        BatchInput {
            keypoints: random_tensor(b, LIFT_IN, seed),
            clouds: random_tensor(b * arch.num_points, 3, seed + 1),
            n_points: arch.num_points,
            avail: vec![Availability::BOTH; b],
        }
    }

    fn sum_loss(y: &Tensor2) -> (f64, Tensor2) {
        (y.data.iter().sum(), Tensor2::from_vec(y.rows, y.cols, vec![1.0; y.data.len()]).unwrap())
    }

    fn half_square_loss(y: &Tensor2) -> (f64, Tensor2) {
        (0.5 * y.data.iter().map(|x| x * x).sum::<f64>(), y.clone())
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let a = random_tensor(4, 3, 1);
        let b = random_tensor(4, 5, 2);
        let mut c = vec![0.0; 15];
        gemm(&a.data, 4, 3, true, &b.data, 4, 5, false, 0.0, &mut c);
        for i in 0..3 {
            for j in 0..5 {
                let want: f64 = (0..4).map(|k| a.get(k, i) * b.get(k, j)).sum();
                assert!((c[i * 5 + j] - want).abs() < 1e-12);
            }
        }
        let d = random_tensor(5, 3, 3);
        let mut e = vec![0.0; 20];
        gemm(&b.data, 4, 5, false, &d.data, 5, 3, false, 0.0, &mut e[..12]);
        gemm(&a.data, 4, 3, false, &d.data, 5, 3, true, 0.0, &mut e);
        for i in 0..4 {
            for j in 0..5 {
                let want: f64 = (0..3).map(|k| a.get(i, k) * d.get(j, k)).sum();
                assert!((e[i * 5 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flatten_round_trip_and_unique_layout() {
        let arch = Architecture::compact();
        let p = init_params(&arch, 42);
        let q = ModelParams::unflatten(&arch, p.flatten()).unwrap();
        assert_eq!(p, q);
        let mut covered = vec![0u8; p.len()];
        for t in p.layout() {
            for i in t.range() {
                covered[i] += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
        assert!(ModelParams::unflatten(&arch, vec![0.0; 3]).is_err());
    }

    #[test]
    fn paper_layout_sizes() {
        let p = ModelParams::zeros(&Architecture::paper());
        let shape = |n: &str| {
            let t = p.layout().iter().find(|t| t.name == n).unwrap();
            (t.rows, t.cols)
        };
        assert_eq!(shape("lift.input.weight"), (26, 512));
        assert_eq!(shape("lift.block3.fc2.weight"), (512, 512));
        assert_eq!(shape("lift.output.weight"), (512, 39));
        assert_eq!(shape("point.mlp0.weight"), (3, 64));
        assert_eq!(shape("point.mlp4.weight"), (128, 1024));
        assert_eq!(shape("point.head0.weight"), (1024, 512));
        assert_eq!(shape("point.head1.weight"), (512, 256));
        assert_eq!(shape("point.output.weight"), (256, 39));
        assert_eq!(shape("fusion.weight"), (78, 39));
        assert!(p.layout().iter().all(|t| !t.name.contains("block4")));
    }

    #[test]
    fn init_is_seeded_and_he_scaled() {
        let arch = Architecture::paper();
        let a = init_params(&arch, 42);
        assert_eq!(a.values(), init_params(&arch, 42).values());
        assert_ne!(a.values(), init_params(&arch, 43).values());
        let w = a.tensor("lift.block0.fc1.weight").unwrap();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let sd = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64).sqrt();
        let want = (2.0f64 / 512.0).sqrt();
        assert!((sd / want - 1.0).abs() < 0.1, "{sd} vs {want}");
        assert!(a.tensor("lift.block0.fc1.bias").unwrap().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_params_give_zero_lifting_output() {
        let arch = Architecture::compact();
        let p = ModelParams::zeros(&arch);
        let x = random_tensor(3, LIFT_IN, 5);
        let (y, _) = lifting_forward(&p, &x, Dropout::Off).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let arch = Architecture::compact();
        let p = init_params(&arch, 1);
        let b = batch(&arch, 4, 9);
        let (y1, _) = forward(&p, Variant::Fusion, &b, Dropout::Off).unwrap();
        let (y2, _) = forward(&p, Variant::Fusion, &b, Dropout::Off).unwrap();
        assert_eq!(y1, y2);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let (y3, _) = forward(&p, Variant::Fusion, &b, Dropout::Sample(&mut r)).unwrap();
        assert_ne!(y1, y3);
    }

    fn toy_arch() -> Architecture {
        Architecture {
            lift_width: 2,
            lift_blocks: 1,
            point_widths: vec![2],
            head_widths: vec![],
            num_points: 2,
            lift_dropout: 0.0,
            head_dropout: 0.0,
        }
    }

    #[test]
    fn toy_residual_block_matches_hand_arithmetic() {
        let arch = toy_arch();
        let mut p = ModelParams::zeros(&arch);
        // Input layer reads the first two keypoint coordinates only.
        let w_in = p.tensor_mut("lift.input.weight").unwrap();
        w_in[0] = 1.0; // x0 -> h0
        w_in[3] = 1.0; // x1 -> h1
        p.tensor_mut("lift.block0.fc1.weight").unwrap().copy_from_slice(&[1.0, 2.0, -1.0, 0.5]);
        p.tensor_mut("lift.block0.fc1.bias").unwrap().copy_from_slice(&[0.5, -1.0]);
        p.tensor_mut("lift.block0.fc2.weight").unwrap().copy_from_slice(&[2.0, 0.0, 1.0, 1.0]);
        let w_out = p.tensor_mut("lift.output.weight").unwrap();
        w_out[0] = 1.0; // h0 -> y0
        w_out[39 + 1] = 1.0; // h1 -> y1
        let mut x = Tensor2::zeros(1, LIFT_IN);
        x.data[0] = 1.0;
        x.data[1] = 3.0;
        // h = (1, 3)
        // z1 = h W1 + b1 = (1 - 3 + 0.5, 2 + 1.5 - 1) = (-1.5, 2.5) -> a1 = (0, 2.5)
        // z2 = a1 W2 = (0*2 + 2.5*1, 0*0 + 2.5*1) = (2.5, 2.5)
        // out = h + a2 = (3.5, 5.5)
        let (y, _) = lifting_forward(&p, &x, Dropout::Off).unwrap();
        assert_eq!(&y.data[..2], &[3.5, 5.5]);
        assert!(y.data[2..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn toy_point_branch_matches_hand_arithmetic() {
        let arch = toy_arch();
        let mut p = ModelParams::zeros(&arch);
        // Feature 0 = relu(x), feature 1 = relu(y - z).
        p.tensor_mut("point.mlp0.weight").unwrap().copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
        let w = p.tensor_mut("point.output.weight").unwrap();
        w[0] = 1.0;
        w[39 + 1] = -2.0;
        p.tensor_mut("point.output.bias").unwrap()[2] = 0.25;
        let cloud = Tensor2::from_vec(2, 3, vec![0.5, 1.0, 0.0, -1.0, 3.0, 1.0]).unwrap();
        // Per-point features: (0.5, 1.0) and (0, 2.0); max-pool (0.5, 2.0).
        let (y, tr) = point_forward(&p, &cloud, 2, Dropout::Off).unwrap();
        assert_eq!(&y.data[..3], &[0.5, -4.0, 0.25]);
        assert_eq!(tr.argmax(), &[0, 1]);
    }

    #[test]
    fn fusion_selector_average_and_oracle() {
        let arch = Architecture::compact();
        let mut p = ModelParams::zeros(&arch);
        let l = random_tensor(3, POSE_DIM, 1);
        let q = random_tensor(3, POSE_DIM, 2);
        let all = vec![Availability::BOTH; 3];
        {
            let w = p.tensor_mut("fusion.weight").unwrap();
            for k in 0..POSE_DIM {
                w[k * POSE_DIM + k] = 1.0;
            }
        }
        assert_eq!(fusion_forward(&p, &l, &q, &all).unwrap(), l);

        let p = init_params(&arch, 0);
        let y = fusion_forward(&p, &l, &q, &all).unwrap();
        for (i, v) in y.data.iter().enumerate() {
            assert!((v - 0.5 * (l.data[i] + q.data[i])).abs() < 1e-15);
        }

        let mut p = ModelParams::zeros(&arch);
        let w = random_tensor(78, 39, 3).data;
        let b = random_tensor(1, 39, 4).data;
        p.tensor_mut("fusion.weight").unwrap().copy_from_slice(&w);
        p.tensor_mut("fusion.bias").unwrap().copy_from_slice(&b);
        let y = fusion_forward(&p, &l, &q, &all).unwrap();
        for r in 0..3 {
            for c in 0..39 {
                let mut want = b[c];
                for k in 0..39 {
                    want += l.get(r, k) * w[k * 39 + c] + q.get(r, k) * w[(39 + k) * 39 + c];
                }
                assert!((y.get(r, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn missing_branch_still_gives_finite_output() {
        let arch = Architecture::compact();
        let p = init_params(&arch, 4);
        let mut b = batch(&arch, 3, 2);
        b.avail = vec![
            Availability {
                lifting: false,
                point: true,
            },
            Availability {
                lifting: true,
                point: false,
            },
            Availability::BOTH,
        ];
        let (y, _) = forward(&p, Variant::Fusion, &b, Dropout::Off).unwrap();
        assert!(y.is_finite());
        // With averaging fusion, a missing branch halves the other.
        let (l, _) = lifting_forward(&p, &b.keypoints, Dropout::Off).unwrap();
        assert!((y.get(1, 0) - 0.5 * l.get(1, 0)).abs() < 1e-15);
    }

    #[test]
    fn duplicated_points_do_not_change_the_pool() {
        let arch = Architecture::compact();
        let p = init_params(&arch, 6);
        let half = random_tensor(256, 3, 8);
        let mut doubled = half.data.clone();
        doubled.extend_from_slice(&half.data);
        let doubled = Tensor2::from_vec(512, 3, doubled).unwrap();
        let (a, _) = point_forward(&p, &half, 256, Dropout::Off).unwrap();
        let (b, _) = point_forward(&p, &doubled, 512, Dropout::Off).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn point_branch_is_permutation_invariant(seed in any::<u64>(), shuffle in any::<u64>()) {
            let arch = Architecture::compact();
            let p = init_params(&arch, seed);
            let cloud = random_tensor(arch.num_points, 3, seed ^ 0x55);
            let mut order: Vec<usize> = (0..arch.num_points).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
            let mut permuted = Tensor2::zeros(arch.num_points, 3);
            for (dst, &src) in order.iter().enumerate() {
                permuted.row_mut(dst).copy_from_slice(cloud.row(src));
            }
            let (a, _) = point_forward(&p, &cloud, arch.num_points, Dropout::Off).unwrap();
            let (b, _) = point_forward(&p, &permuted, arch.num_points, Dropout::Off).unwrap();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradient() {
        let arch = Architecture::compact();
        let p = init_params(&arch, 2);
        let b = batch(&arch, 2, 3);
        let (_, tr) = forward(&p, Variant::Fusion, &b, Dropout::Off).unwrap();
        let g = backward(&p, &tr, &Tensor2::zeros(2, POSE_DIM)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
        assert!(backward(&p, &tr, &Tensor2::zeros(3, POSE_DIM)).is_err());
    }

    #[test]
    fn linear_chain_gradient_is_the_input() {
        // Fusion layer alone is linear: d(sum y)/dW[k][c] = e[k].
        let arch = Architecture::compact();
        let p = init_params(&arch, 3);
        let b = batch(&arch, 1, 4);
        let (_, tr) = forward(&p, Variant::Fusion, &b, Dropout::Off).unwrap();
        let (_, dy) = sum_loss(&Tensor2::zeros(1, POSE_DIM));
        let g = backward(&p, &tr, &dy).unwrap();
        let e = tr.fusion_in.as_ref().unwrap();
        let f = p.net.fusion;
        for k in 0..2 * POSE_DIM {
            for c in 0..POSE_DIM {
                assert_eq!(g[f.w + k * POSE_DIM + c], e.get(0, k));
            }
        }
        assert!(g[f.b..f.b + POSE_DIM].iter().all(|&v| v == 1.0));
    }

    #[test]
    fn quadratic_on_linear_model_checks_tightly() {
        // f(w) = 0.5 |A w - t|^2 with gradient A^T (A w - t).
        let a = random_tensor(6, 4, 11);
        let t = random_tensor(6, 1, 12);
        let w = random_tensor(4, 1, 13).data;
        let f = |w: &[f64]| {
            let mut r = vec![0.0; 6];
            gemm(&a.data, 6, 4, false, w, 4, 1, false, 0.0, &mut r);
            r.iter().zip(&t.data).map(|(x, y)| 0.5 * (x - y).powi(2)).sum::<f64>()
        };
        let mut r = vec![0.0; 6];
        gemm(&a.data, 6, 4, false, &w, 4, 1, false, 0.0, &mut r);
        let res: Vec<f64> = r.iter().zip(&t.data).map(|(x, y)| x - y).collect();
        let mut g = vec![0.0; 4];
        gemm(&a.data, 6, 4, true, &res, 6, 1, false, 0.0, &mut g);
        let mut work = w.clone();
        let report = grad_check_with(&w, &g, &[0, 1, 2, 3], 1e-5, |i, x| {
            work[i] = x;
            let v = f(&work);
            work[i] = w[i];
            (v, 0)
        });
        assert_eq!(report.checked, 4);
        assert!(report.max_rel_error < 1e-8, "{}", report.max_rel_error);
    }

    fn check_model(arch: &Architecture, variant: Variant, seed: u64, corrupt: bool) -> GradCheckReport {
        let p = init_params(arch, seed);
        let b = batch(arch, 4, seed + 100);
        let mut r = rng::rng_for(seed, stream::GRADCHECK, 0);
        let (_, tr) = forward(&p, variant, &b, Dropout::Sample(&mut r)).unwrap();
        let masks = tr.masks();
        let corrupt = corrupt.then(|| {
            let (y, tr) = forward(&p, variant, &b, Dropout::Frozen(&masks)).unwrap();
            let g = backward(&p, &tr, &half_square_loss(&y).1).unwrap();
            (0..g.len()).max_by(|&i, &j| g[i].abs().total_cmp(&g[j].abs())).unwrap()
        });
        grad_check(&p, variant, &b, &masks, &half_square_loss, 1e-5, &[], corrupt).unwrap()
    }

    #[test]
    fn every_variant_passes_the_gradient_check() {
        let arch = Architecture::compact();
        for v in [Variant::Fusion, Variant::LiftingOnly, Variant::PointOnly] {
            let r = check_model(&arch, v, 7, false);
            assert!(r.max_rel_error < 1e-4, "{v}: {r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let r = check_model(&Architecture::compact(), Variant::Fusion, 7, true);
        assert!(r.max_rel_error > 0.1, "{r:?}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let arch = Architecture::compact();
        let c = Checkpoint {
            seed: 42,
            variant: Variant::PointOnly,
            params: init_params(&arch, 42),
        };
        let bytes = encode_checkpoint(&c);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_checkpoint(&back), bytes);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
    }
}
