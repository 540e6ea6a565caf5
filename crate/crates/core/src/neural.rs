//! LSTM cell, stacked bidirectional encoder and the affine emission layer,
//! with hand-derived reverse-mode gradients.
//!
//! One step of the cell, for input `x` and previous state `(h, c)`:
//!
//! ```text
//! i  = σ(W_hi h + W_ei x + b_i)
//! f  = σ(W_hf h + W_ef x + b_f)
//! c̃  = tanh(W_hc h + W_ec x + b_c)
//! c' = f ⊙ c + i ⊙ c̃
//! o  = σ(W_ho h + W_eo x + b_o)
//! h' = o ⊙ tanh(c')
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{add_assign, sigmoid, Matrix, Tensors};

/// Weights of one gate: recurrent matrix (H×H), input matrix (H×D), bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub w_h: Matrix,
    pub w_e: Matrix,
    pub b: Vec<f64>,
}

impl Gate {
    fn zeros(hidden: usize, input: usize) -> Self {
        Gate {
            w_h: Matrix::zeros(hidden, hidden),
            w_e: Matrix::zeros(hidden, input),
            b: vec![0.0; hidden],
        }
    }

    fn uniform<R: Rng>(hidden: usize, input: usize, bound: f64, rng: &mut R) -> Self {
        Gate {
            w_h: Matrix::uniform(hidden, hidden, bound, rng),
            w_e: Matrix::uniform(hidden, input, bound, rng),
            b: (0..hidden)
                .map(|_| if bound > 0.0 { rng.gen_range(-bound..bound) } else { 0.0 })
                .collect(),
        }
    }

    /// `W_h h + W_e x + b`
    fn pre_activation(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
        let mut a = self.b.clone();
        self.w_h.mul_vec_add(h, &mut a);
        self.w_e.mul_vec_add(x, &mut a);
        a
    }

    fn accumulate(&mut self, da: &[f64], x: &[f64], h_prev: &[f64]) {
        self.w_h.add_outer(da, h_prev);
        self.w_e.add_outer(da, x);
        add_assign(&mut self.b, da);
    }

    fn check(&self, hidden: usize, input: usize) -> bool {
        self.w_h.shape() == (hidden, hidden)
            && self.w_e.shape() == (hidden, input)
            && self.b.len() == hidden
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    pub input_gate: Gate,
    pub forget_gate: Gate,
    pub candidate: Gate,
    pub output_gate: Gate,
}

impl LstmParams {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        LstmParams {
            input_gate: Gate::zeros(hidden, input),
            forget_gate: Gate::zeros(hidden, input),
            candidate: Gate::zeros(hidden, input),
            output_gate: Gate::zeros(hidden, input),
        }
    }

    /// Uniform in `[-√(1/H), √(1/H)]`, forget-gate bias set to 1.
    pub fn init<R: Rng>(hidden: usize, input: usize, rng: &mut R) -> Self {
        let bound = (1.0 / hidden.max(1) as f64).sqrt();
        let mut p = LstmParams {
            input_gate: Gate::uniform(hidden, input, bound, rng),
            forget_gate: Gate::uniform(hidden, input, bound, rng),
            candidate: Gate::uniform(hidden, input, bound, rng),
            output_gate: Gate::uniform(hidden, input, bound, rng),
        };
        p.forget_gate.b.fill(1.0);
        p
    }

    pub fn hidden(&self) -> usize {
        self.input_gate.b.len()
    }

    pub fn input(&self) -> usize {
        self.input_gate.w_e.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, d) = (self.hidden(), self.input());
        let ok = [&self.input_gate, &self.forget_gate, &self.candidate, &self.output_gate]
            .iter()
            .all(|g| g.check(h, d));
        if ok {
            Ok(())
        } else {
            Err(Error::shape("inconsistent LSTM gate shapes"))
        }
    }
}

impl Tensors for LstmParams {
    fn tensors(&self) -> Vec<&[f64]> {
        [&self.input_gate, &self.forget_gate, &self.candidate, &self.output_gate]
            .into_iter()
            .flat_map(|g| [g.w_h.as_slice(), g.w_e.as_slice(), g.b.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        [
            &mut self.input_gate,
            &mut self.forget_gate,
            &mut self.candidate,
            &mut self.output_gate,
        ]
        .into_iter()
        .flat_map(|g| [g.w_h.as_mut_slice(), g.w_e.as_mut_slice(), g.b.as_mut_slice()])
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros(hidden: usize) -> Self {
        LstmState {
            h: vec![0.0; hidden],
            c: vec![0.0; hidden],
        }
    }
}

/// Activations of one step, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    tanh_c: Vec<f64>,
}

pub fn lstm_step(params: &LstmParams, x: &[f64], prev: &LstmState) -> Result<LstmState> {
    Ok(lstm_step_cached(params, x, prev)?.0)
}

pub fn lstm_step_cached(params: &LstmParams, x: &[f64], prev: &LstmState) -> Result<(LstmState, StepCache)> {
    let hidden = params.hidden();
    if x.len() != params.input() || prev.h.len() != hidden || prev.c.len() != hidden {
        return Err(Error::shape(format!(
            "LSTM step expects input {} and state {hidden}, got input {} and state {}/{}",
            params.input(),
            x.len(),
            prev.h.len(),
            prev.c.len()
        )));
    }
    let i: Vec<f64> = params.input_gate.pre_activation(x, &prev.h).into_iter().map(sigmoid).collect();
    let f: Vec<f64> = params.forget_gate.pre_activation(x, &prev.h).into_iter().map(sigmoid).collect();
    let g: Vec<f64> = params.candidate.pre_activation(x, &prev.h).into_iter().map(f64::tanh).collect();
    let o: Vec<f64> = params.output_gate.pre_activation(x, &prev.h).into_iter().map(sigmoid).collect();
    let c: Vec<f64> = (0..hidden).map(|k| f[k] * prev.c[k] + i[k] * g[k]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = o.iter().zip(&tanh_c).map(|(o, t)| o * t).collect();
    let cache = StepCache {
        x: x.to_vec(),
        h_prev: prev.h.clone(),
        c_prev: prev.c.clone(),
        i,
        f,
        g,
        o,
        tanh_c,
    };
    Ok((LstmState { h, c }, cache))
}

/// Backpropagates through one step. `dh` and `dc` are the gradients on the
/// step's output `h` and `c`; gradients are added into `grads`, and the
/// returned triple is `(dx, dh_prev, dc_prev)`.
pub fn lstm_step_backward(
    params: &LstmParams,
    cache: &StepCache,
    dh: &[f64],
    dc: &[f64],
    grads: &mut LstmParams,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hidden = params.hidden();
    let mut da_i = vec![0.0; hidden];
    let mut da_f = vec![0.0; hidden];
    let mut da_g = vec![0.0; hidden];
    let mut da_o = vec![0.0; hidden];
    let mut dc_prev = vec![0.0; hidden];
    for k in 0..hidden {
        let (i, f, g, o, t) = (cache.i[k], cache.f[k], cache.g[k], cache.o[k], cache.tanh_c[k]);
        let dct = dc[k] + dh[k] * o * (1.0 - t * t);
        da_o[k] = dh[k] * t * o * (1.0 - o);
        da_i[k] = dct * g * i * (1.0 - i);
        da_g[k] = dct * i * (1.0 - g * g);
        da_f[k] = dct * cache.c_prev[k] * f * (1.0 - f);
        dc_prev[k] = dct * f;
    }
    let mut dx = vec![0.0; params.input()];
    let mut dh_prev = vec![0.0; hidden];
    for (gate, grad, da) in [
        (&params.input_gate, &mut grads.input_gate, &da_i),
        (&params.forget_gate, &mut grads.forget_gate, &da_f),
        (&params.candidate, &mut grads.candidate, &da_g),
        (&params.output_gate, &mut grads.output_gate, &da_o),
    ] {
        grad.accumulate(da, &cache.x, &cache.h_prev);
        gate.w_h.tr_mul_vec_add(da, &mut dh_prev);
        gate.w_e.tr_mul_vec_add(da, &mut dx);
    }
    (dx, dh_prev, dc_prev)
}

/// Runs the cell over `inputs` from a zero state, left to right or right to
/// left. Hidden states are returned by position, not by time step.
pub fn run_direction(
    params: &LstmParams,
    inputs: &[Vec<f64>],
    reverse: bool,
) -> Result<(Vec<Vec<f64>>, Vec<StepCache>)> {
    let n = inputs.len();
    let mut state = LstmState::zeros(params.hidden());
    let mut hs = vec![Vec::new(); n];
    let mut caches = Vec::with_capacity(n);
    for step in 0..n {
        let t = if reverse { n - 1 - step } else { step };
        let (next, cache) = lstm_step_cached(params, &inputs[t], &state)?;
        hs[t] = next.h.clone();
        caches.push(cache);
        state = next;
    }
    Ok((hs, caches))
}

/// Reverse of [`run_direction`]. `dhs` is indexed by position; returns input
/// gradients by position.
pub fn run_direction_backward(
    params: &LstmParams,
    caches: &[StepCache],
    dhs: &[Vec<f64>],
    reverse: bool,
    grads: &mut LstmParams,
) -> Vec<Vec<f64>> {
    let n = caches.len();
    let hidden = params.hidden();
    let mut dxs = vec![Vec::new(); n];
    let mut dh_next = vec![0.0; hidden];
    let mut dc_next = vec![0.0; hidden];
    for step in (0..n).rev() {
        let t = if reverse { n - 1 - step } else { step };
        let mut dh = dhs[t].clone();
        add_assign(&mut dh, &dh_next);
        let (dx, dh_prev, dc_prev) = lstm_step_backward(params, &caches[step], &dh, &dc_next, grads);
        dxs[t] = dx;
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    dxs
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiLayer {
    pub forward: LstmParams,
    pub backward: LstmParams,
}

/// Stacked BiLSTM followed by an affine projection from the top layer's
/// concatenated states (2H) to K tag scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiLstmParams {
    pub layers: Vec<BiLayer>,
    pub emit_w: Matrix,
    pub emit_b: Vec<f64>,
}

impl BiLstmParams {
    pub fn zeros(input: usize, hidden: usize, layers: usize, tags: usize) -> Self {
        let layers = (0..layers.max(1))
            .map(|l| {
                let d = if l == 0 { input } else { 2 * hidden };
                BiLayer {
                    forward: LstmParams::zeros(hidden, d),
                    backward: LstmParams::zeros(hidden, d),
                }
            })
            .collect();
        BiLstmParams {
            layers,
            emit_w: Matrix::zeros(tags, 2 * hidden),
            emit_b: vec![0.0; tags],
        }
    }

    pub fn init<R: Rng>(input: usize, hidden: usize, layers: usize, tags: usize, rng: &mut R) -> Self {
        let layers = (0..layers.max(1))
            .map(|l| {
                let d = if l == 0 { input } else { 2 * hidden };
                BiLayer {
                    forward: LstmParams::init(hidden, d, rng),
                    backward: LstmParams::init(hidden, d, rng),
                }
            })
            .collect();
        let bound = (1.0 / (2 * hidden).max(1) as f64).sqrt();
        BiLstmParams {
            layers,
            emit_w: Matrix::uniform(tags, 2 * hidden, bound, rng),
            emit_b: vec![0.0; tags],
        }
    }

    pub fn input(&self) -> usize {
        self.layers[0].forward.input()
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].forward.hidden()
    }

    pub fn tags(&self) -> usize {
        self.emit_b.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::shape("BiLSTM has no layers"));
        }
        let h = self.hidden();
        for (l, layer) in self.layers.iter().enumerate() {
            layer.forward.validate()?;
            layer.backward.validate()?;
            let d = if l == 0 { self.input() } else { 2 * h };
            for dir in [&layer.forward, &layer.backward] {
                if dir.hidden() != h || dir.input() != d {
                    return Err(Error::shape(format!("layer {l} has inconsistent sizes")));
                }
            }
        }
        if self.emit_w.shape() != (self.tags(), 2 * h) {
            return Err(Error::shape(format!(
                "emission matrix is {:?}, expected ({}, {})",
                self.emit_w.shape(),
                self.tags(),
                2 * h
            )));
        }
        Ok(())
    }
}

impl Tensors for BiLstmParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = self
            .layers
            .iter()
            .flat_map(|l| l.forward.tensors().into_iter().chain(l.backward.tensors()))
            .collect();
        out.push(self.emit_w.as_slice());
        out.push(&self.emit_b);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = self
            .layers
            .iter_mut()
            .flat_map(|l| {
                let BiLayer { forward, backward } = l;
                forward.tensors_mut().into_iter().chain(backward.tensors_mut())
            })
            .collect();
        out.push(self.emit_w.as_mut_slice());
        out.push(&mut self.emit_b);
        out
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    forward: Vec<StepCache>,
    backward: Vec<StepCache>,
}

#[derive(Debug, Clone)]
pub struct BiLstmCache {
    layers: Vec<LayerCache>,
    top: Vec<Vec<f64>>,
}

impl BiLstmCache {
    pub fn len(&self) -> usize {
        self.top.len()
    }

    pub fn is_empty(&self) -> bool {
        self.top.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct BiLstmOutput {
    /// Top-layer `[h_fwd; h_bwd]` per position.
    pub hidden: Vec<Vec<f64>>,
    /// K tag scores per position.
    pub emissions: Vec<Vec<f64>>,
    pub cache: BiLstmCache,
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

pub fn bilstm_forward(params: &BiLstmParams, seq: &[Vec<f64>]) -> Result<BiLstmOutput> {
    if seq.is_empty() {
        return Err(Error::shape("BiLSTM input sequence is empty"));
    }
    let mut inputs: Vec<Vec<f64>> = seq.to_vec();
    let mut layers = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let (hf, cf) = run_direction(&layer.forward, &inputs, false)?;
        let (hb, cb) = run_direction(&layer.backward, &inputs, true)?;
        inputs = hf.iter().zip(&hb).map(|(a, b)| concat(a, b)).collect();
        layers.push(LayerCache {
            forward: cf,
            backward: cb,
        });
    }
    let emissions = inputs
        .iter()
        .map(|h| {
            let mut e = params.emit_b.clone();
            params.emit_w.mul_vec_add(h, &mut e);
            e
        })
        .collect();
    Ok(BiLstmOutput {
        hidden: inputs.clone(),
        emissions,
        cache: BiLstmCache { layers, top: inputs },
    })
}

/// Gradients of a scalar loss with respect to every parameter and to each
/// input vector, given `d_emissions = ∂loss/∂emissions`.
pub fn bilstm_backward(
    params: &BiLstmParams,
    cache: &BiLstmCache,
    d_emissions: &[Vec<f64>],
) -> Result<(BiLstmParams, Vec<Vec<f64>>)> {
    let mut grads = params.zeroed();
    let dx = bilstm_backward_into(params, cache, d_emissions, &mut grads)?;
    Ok((grads, dx))
}

/// As [`bilstm_backward`], adding parameter gradients into `grads`.
pub fn bilstm_backward_into(
    params: &BiLstmParams,
    cache: &BiLstmCache,
    d_emissions: &[Vec<f64>],
    grads: &mut BiLstmParams,
) -> Result<Vec<Vec<f64>>> {
    if d_emissions.len() != cache.len() || cache.layers.len() != params.layers.len() {
        return Err(Error::shape(format!(
            "backward got {} emission gradients for a cached sequence of {}",
            d_emissions.len(),
            cache.len()
        )));
    }
    if let Some(bad) = d_emissions.iter().find(|d| d.len() != params.tags()) {
        return Err(Error::shape(format!(
            "emission gradient of width {}, expected {}",
            bad.len(),
            params.tags()
        )));
    }
    let h = params.hidden();
    let mut d_top: Vec<Vec<f64>> = Vec::with_capacity(cache.len());
    for (de, top) in d_emissions.iter().zip(&cache.top) {
        grads.emit_w.add_outer(de, top);
        add_assign(&mut grads.emit_b, de);
        let mut dh = vec![0.0; 2 * h];
        params.emit_w.tr_mul_vec_add(de, &mut dh);
        d_top.push(dh);
    }
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let (dfw, dbw): (Vec<Vec<f64>>, Vec<Vec<f64>>) =
            d_top.iter().map(|d| (d[..h].to_vec(), d[h..].to_vec())).unzip();
        let g = &mut grads.layers[l];
        let dx_f = run_direction_backward(&layer.forward, &lc.forward, &dfw, false, &mut g.forward);
        let dx_b = run_direction_backward(&layer.backward, &lc.backward, &dbw, true, &mut g.backward);
        d_top = dx_f
            .into_iter()
            .zip(dx_b)
            .map(|(mut a, b)| {
                add_assign(&mut a, &b);
                a
            })
            .collect();
    }
    Ok(d_top)
}
