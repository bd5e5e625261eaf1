//! Invertible coupling stack and the latent-audio estimator.
//!
//! A block maps `(visual, audio)` to
//!
//! ```text
//! visual' = visual + phi(audio)
//! audio'  = audio * exp(sigmoid(rho(visual'))) + eta(visual')
//! ```
//!
//! and is undone by re-evaluating the same subnets:
//!
//! ```text
//! audio  = (audio' - eta(visual')) * exp(-sigmoid(rho(visual')))
//! visual = visual' - phi(audio)
//! ```
//!
//! Visual latents are `[n, 48, h, w]`, audio latents `[n, 1, h, w]`.

use std::sync::Arc;

use avguard_nn::{Graph, Real, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{join, uniform_init, Module};
use crate::transforms::SUBBAND_CHANNELS;

pub const DENSE_LAYERS: usize = 5;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_GROWTH: usize = 32;
pub const DEFAULT_BLOCKS: usize = 6;

#[derive(Debug, Clone)]
pub struct ConvLayer<T: Real> {
    pub weight: Arc<Tensor<T>>,
    pub bias: Arc<Tensor<T>>,
}

impl<T: Real> ConvLayer<T> {
    fn zeros(cout: usize, cin: usize) -> Self {
        Self { weight: Arc::new(Tensor::zeros(&[cout, cin, 3, 3])), bias: Arc::new(Tensor::zeros(&[cout])) }
    }

    fn random(cout: usize, cin: usize, rng: &mut impl Rng) -> Self {
        let fan_in = cin * 9;
        Self {
            weight: Arc::new(uniform_init(&[cout, cin, 3, 3], fan_in, rng)),
            bias: Arc::new(uniform_init(&[cout], fan_in, rng)),
        }
    }
}

/// Five densely connected 3x3 convolutions: layer `k` sees the input
/// concatenated with the outputs of all earlier layers.
#[derive(Debug, Clone)]
pub struct DenseSubnet<T: Real> {
    in_channels: usize,
    out_channels: usize,
    growth: usize,
    layers: Vec<ConvLayer<T>>,
}

impl<T: Real> DenseSubnet<T> {
    /// Random hidden layers, zero final layer.
    pub fn new(in_channels: usize, out_channels: usize, growth: usize, rng: &mut impl Rng) -> Self {
        let mut layers: Vec<ConvLayer<T>> =
            (0..DENSE_LAYERS - 1).map(|k| ConvLayer::random(growth, in_channels + k * growth, rng)).collect();
        layers.push(ConvLayer::zeros(out_channels, in_channels + (DENSE_LAYERS - 1) * growth));
        Self { in_channels, out_channels, growth, layers }
    }

    pub fn zeros(in_channels: usize, out_channels: usize, growth: usize) -> Self {
        let mut layers: Vec<ConvLayer<T>> =
            (0..DENSE_LAYERS - 1).map(|k| ConvLayer::zeros(growth, in_channels + k * growth)).collect();
        layers.push(ConvLayer::zeros(out_channels, in_channels + (DENSE_LAYERS - 1) * growth));
        Self { in_channels, out_channels, growth, layers }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn growth(&self) -> usize {
        self.growth
    }

    pub fn layers(&self) -> &[ConvLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [ConvLayer<T>] {
        &mut self.layers
    }

    /// Graph evaluation on `[n, in_channels, h, w]`.
    pub fn eval(&self, g: &mut Graph<T>, x: Var) -> Var {
        let slope = T::lit(LEAKY_SLOPE);
        let mut features = vec![x];
        for (k, layer) in self.layers.iter().enumerate() {
            let input = if features.len() == 1 { x } else { g.concat_channels(&features) };
            let w = g.bind(&layer.weight);
            let b = g.bind(&layer.bias);
            let y = g.conv2d(input, w, b, (1, 1), (1, 1));
            if k + 1 == self.layers.len() {
                return y;
            }
            features.push(g.leaky_relu(y, slope));
        }
        unreachable!("subnet has at least one layer")
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut g = Graph::no_grad();
        let xv = g.constant(x.clone());
        let y = self.eval(&mut g, xv);
        Ok(g.value(y).clone())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        match x.shape() {
            [_, c, _, _] if *c == self.in_channels => Ok(()),
            s => Err(Error::Dimension(format!("subnet expects [n, {}, h, w], got {s:?}", self.in_channels))),
        }
    }
}

impl<T: Real> Module<T> for DenseSubnet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Arc<Tensor<T>>)) {
        for (k, l) in self.layers.iter().enumerate() {
            f(join(prefix, &format!("conv{k}.weight")), &l.weight);
            f(join(prefix, &format!("conv{k}.bias")), &l.bias);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Arc<Tensor<T>>)) {
        for (k, l) in self.layers.iter_mut().enumerate() {
            f(join(prefix, &format!("conv{k}.weight")), &mut l.weight);
            f(join(prefix, &format!("conv{k}.bias")), &mut l.bias);
        }
    }
}

/// `phi: 1 -> 48`, `rho, eta: 48 -> 1`.
#[derive(Debug, Clone)]
pub struct CouplingBlock<T: Real> {
    pub phi: DenseSubnet<T>,
    pub rho: DenseSubnet<T>,
    pub eta: DenseSubnet<T>,
}

impl<T: Real> CouplingBlock<T> {
    pub fn new(growth: usize, rng: &mut impl Rng) -> Self {
        Self {
            phi: DenseSubnet::new(1, SUBBAND_CHANNELS, growth, rng),
            rho: DenseSubnet::new(SUBBAND_CHANNELS, 1, growth, rng),
            eta: DenseSubnet::new(SUBBAND_CHANNELS, 1, growth, rng),
        }
    }

    pub fn zeros(growth: usize) -> Self {
        Self {
            phi: DenseSubnet::zeros(1, SUBBAND_CHANNELS, growth),
            rho: DenseSubnet::zeros(SUBBAND_CHANNELS, 1, growth),
            eta: DenseSubnet::zeros(SUBBAND_CHANNELS, 1, growth),
        }
    }

    pub fn forward_graph(&self, g: &mut Graph<T>, visual: Var, audio: Var) -> (Var, Var) {
        let shift = self.phi.eval(g, audio);
        let visual = g.add(visual, shift);
        let log_scale = self.rho.eval(g, visual);
        let log_scale = g.sigmoid(log_scale);
        let scale = g.exp(log_scale);
        let scaled = g.mul(audio, scale);
        let offset = self.eta.eval(g, visual);
        (visual, g.add(scaled, offset))
    }

    pub fn inverse_graph(&self, g: &mut Graph<T>, visual: Var, audio: Var) -> (Var, Var) {
        let offset = self.eta.eval(g, visual);
        let centred = g.sub(audio, offset);
        let log_scale = self.rho.eval(g, visual);
        let log_scale = g.sigmoid(log_scale);
        let neg = g.scale(log_scale, -T::one());
        let inv_scale = g.exp(neg);
        let audio = g.mul(centred, inv_scale);
        let shift = self.phi.eval(g, audio);
        (g.sub(visual, shift), audio)
    }
}

impl<T: Real> Module<T> for CouplingBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Arc<Tensor<T>>)) {
        self.phi.visit(&join(prefix, "phi"), f);
        self.rho.visit(&join(prefix, "rho"), f);
        self.eta.visit(&join(prefix, "eta"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Arc<Tensor<T>>)) {
        self.phi.visit_mut(&join(prefix, "phi"), f);
        self.rho.visit_mut(&join(prefix, "rho"), f);
        self.eta.visit_mut(&join(prefix, "eta"), f);
    }
}

#[derive(Debug, Clone)]
pub struct CouplingStack<T: Real> {
    pub blocks: Vec<CouplingBlock<T>>,
}

impl<T: Real> CouplingStack<T> {
    pub fn new(blocks: usize, growth: usize, rng: &mut impl Rng) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::InvalidArgument("coupling stack needs at least one block".into()));
        }
        Ok(Self { blocks: (0..blocks).map(|_| CouplingBlock::new(growth, rng)).collect() })
    }

    pub fn zeros(blocks: usize, growth: usize) -> Result<Self> {
        if blocks == 0 {
            return Err(Error::InvalidArgument("coupling stack needs at least one block".into()));
        }
        Ok(Self { blocks: (0..blocks).map(|_| CouplingBlock::zeros(growth)).collect() })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn forward_graph(&self, g: &mut Graph<T>, mut visual: Var, mut audio: Var) -> (Var, Var) {
        for b in &self.blocks {
            (visual, audio) = b.forward_graph(g, visual, audio);
        }
        (visual, audio)
    }

    pub fn inverse_graph(&self, g: &mut Graph<T>, mut visual: Var, mut audio: Var) -> (Var, Var) {
        for b in self.blocks.iter().rev() {
            (visual, audio) = b.inverse_graph(g, visual, audio);
        }
        (visual, audio)
    }
}

impl<T: Real> Module<T> for CouplingStack<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Arc<Tensor<T>>)) {
        for (k, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{k}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Arc<Tensor<T>>)) {
        for (k, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{k}")), f);
        }
    }
}

/// Predicts the final audio latent from watermarked subbands (`48 -> 1`).
#[derive(Debug, Clone)]
pub struct NoiseEstimator<T: Real> {
    pub net: DenseSubnet<T>,
}

impl<T: Real> NoiseEstimator<T> {
    pub fn new(growth: usize, rng: &mut impl Rng) -> Self {
        Self { net: DenseSubnet::new(SUBBAND_CHANNELS, 1, growth, rng) }
    }

    pub fn zeros(growth: usize) -> Self {
        Self { net: DenseSubnet::zeros(SUBBAND_CHANNELS, 1, growth) }
    }

    pub fn eval(&self, g: &mut Graph<T>, subbands: Var) -> Var {
        self.net.eval(g, subbands)
    }
}

impl<T: Real> Module<T> for NoiseEstimator<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Arc<Tensor<T>>)) {
        self.net.visit(prefix, f)
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Arc<Tensor<T>>)) {
        self.net.visit_mut(prefix, f)
    }
}

/// Visual and audio latents between two blocks; `layer_index` runs from 1
/// (inputs) to `L + 1` (stack outputs).
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState<T: Real> {
    pub visual: Tensor<T>,
    pub audio: Tensor<T>,
    pub layer_index: usize,
}

impl<T: Real> LatentState<T> {
    pub fn new(visual: Tensor<T>, audio: Tensor<T>) -> Result<Self> {
        check_latents(&visual, &audio)?;
        Ok(Self { visual, audio, layer_index: 1 })
    }
}

fn check_latents<T: Real>(visual: &Tensor<T>, audio: &Tensor<T>) -> Result<()> {
    match (visual.shape(), audio.shape()) {
        ([n, SUBBAND_CHANNELS, h, w], [n2, 1, h2, w2]) if n == n2 && h == h2 && w == w2 => {}
        (v, a) => {
            return Err(Error::Dimension(format!("latents [n, 48, h, w] / [n, 1, h, w] expected, got {v:?} / {a:?}")))
        }
    }
    if !visual.all_finite() || !audio.all_finite() {
        return Err(Error::Numeric("non-finite latent".into()));
    }
    Ok(())
}

fn run_block<T: Real>(
    state: &LatentState<T>,
    f: impl FnOnce(&mut Graph<T>, Var, Var) -> (Var, Var),
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_latents(&state.visual, &state.audio)?;
    let mut g = Graph::no_grad();
    let v = g.constant(state.visual.clone());
    let a = g.constant(state.audio.clone());
    let (v, a) = f(&mut g, v, a);
    let (v, a) = (g.value(v).clone(), g.value(a).clone());
    if !v.all_finite() || !a.all_finite() {
        return Err(Error::Numeric("coupling produced non-finite values".into()));
    }
    Ok((v, a))
}

pub fn coupling_forward<T: Real>(state: &LatentState<T>, block: &CouplingBlock<T>) -> Result<LatentState<T>> {
    let (visual, audio) = run_block(state, |g, v, a| block.forward_graph(g, v, a))?;
    Ok(LatentState { visual, audio, layer_index: state.layer_index + 1 })
}

pub fn coupling_inverse<T: Real>(state: &LatentState<T>, block: &CouplingBlock<T>) -> Result<LatentState<T>> {
    if state.layer_index < 2 {
        return Err(Error::InvalidArgument("cannot invert below the input layer".into()));
    }
    let (visual, audio) = run_block(state, |g, v, a| block.inverse_graph(g, v, a))?;
    Ok(LatentState { visual, audio, layer_index: state.layer_index - 1 })
}

/// `(I^1, A^1) -> (I^{L+1}, A^{L+1})`
pub fn stack_forward<T: Real>(
    visual: &Tensor<T>,
    audio: &Tensor<T>,
    stack: &CouplingStack<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let state = LatentState::new(visual.clone(), audio.clone())?;
    run_block(&state, |g, v, a| stack.forward_graph(g, v, a))
}

/// `(I^{L+1}, A^{L+1}) -> (I^1, A^1)`
pub fn stack_inverse<T: Real>(
    visual: &Tensor<T>,
    audio: &Tensor<T>,
    stack: &CouplingStack<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let state = LatentState::new(visual.clone(), audio.clone())?;
    run_block(&state, |g, v, a| stack.inverse_graph(g, v, a))
}

/// Estimate of `A^{L+1}` from `[n, 48, h, w]` subbands.
pub fn noise_estimate<T: Real>(subbands: &Tensor<T>, estimator: &NoiseEstimator<T>) -> Result<Tensor<T>> {
    estimator.net.forward(subbands)
}
