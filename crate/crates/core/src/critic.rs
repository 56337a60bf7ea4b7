//! Action-value critic: a small dense network Q(o, ·) with hand-written
//! backpropagation, TD(0) training against a periodically synced target
//! network, and the trajectory filter that keeps only argmax-consistent
//! reasoning records.
//!
//! The published architecture is fixed: 16 inputs (4 phases × queued + 3
//! segment counts), two rectified hidden layers of width 20, 4 outputs. The
//! layer code itself handles arbitrary widths so gradient oracles can run on
//! small nets.

use crate::finetune::ReasoningRecord;
use crate::netmodel::PhaseId;
use crate::observe::IntersectionObservation;
use crate::scalar::Scalar;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const INPUT_DIM: usize = 16;
pub const HIDDEN_DIM: usize = 20;
pub const OUTPUT_DIM: usize = 4;

#[derive(Debug, Error)]
pub enum CriticError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at step {step}: loss {loss}")]
    Divergence { step: usize, loss: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Flattens an observation into the critic's input layout: for each phase in
/// canonical order, [queued_total, segment 1, segment 2, segment 3]. Raw
/// counts, no normalization. Requires a 3-segment observation.
pub fn featurize<F: Scalar>(obs: &IntersectionObservation) -> Vec<F> {
    assert_eq!(obs.segment_count(), 3, "critic features require 3-segment observations");
    let mut v = Vec::with_capacity(INPUT_DIM);
    for phase in PhaseId::ALL {
        let p = obs.phase(phase);
        v.push(F::from_f64_c(f64::from(p.queued_total())));
        for seg in 1..=3 {
            v.push(F::from_f64_c(f64::from(p.segment_total(seg))));
        }
    }
    v
}

/// One affine layer, weights stored row-major `[out × in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<F> {
    pub w: Vec<F>,
    pub b: Vec<F>,
    pub inputs: usize,
    pub outputs: usize,
}

impl<F: Scalar> Dense<F> {
    fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Dense<F> {
        // Uniform fan-balanced init keeps early activations at unit scale.
        // Biases are drawn too: with all-zero biases a fully inactive layer
        // would sit exactly on the rectifier kink.
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let w = (0..inputs * outputs)
            .map(|_| F::from_f64_c(rng.gen_range(-bound..bound)))
            .collect();
        let b = (0..outputs).map(|_| F::from_f64_c(rng.gen_range(-bound..bound))).collect();
        Dense { w, b, inputs, outputs }
    }

    fn zeros_like(&self) -> Dense<F> {
        Dense {
            w: vec![F::zero(); self.w.len()],
            b: vec![F::zero(); self.b.len()],
            inputs: self.inputs,
            outputs: self.outputs,
        }
    }

    fn forward(&self, x: &[F], out: &mut Vec<F>) {
        out.clear();
        for o in 0..self.outputs {
            let row = &self.w[o * self.inputs..(o + 1) * self.inputs];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc = acc + *wi * *xi;
            }
            out.push(acc);
        }
    }

    fn validate(&self) -> Result<(), CriticError> {
        if self.w.len() != self.inputs * self.outputs || self.b.len() != self.outputs {
            return Err(CriticError::Shape(format!(
                "layer declared {}x{} but holds {} weights / {} biases",
                self.outputs,
                self.inputs,
                self.w.len(),
                self.b.len()
            )));
        }
        if self.w.iter().chain(&self.b).any(|v| !v.is_finite()) {
            return Err(CriticError::Shape("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// The critic network: three affine layers with ReLU between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticNet<F> {
    pub layers: Vec<Dense<F>>,
}

impl<F: Scalar> CriticNet<F> {
    /// The published 16→20→20→4 architecture, seeded initialization.
    pub fn new(seed: u64) -> CriticNet<F> {
        Self::with_dims(&[INPUT_DIM, HIDDEN_DIM, HIDDEN_DIM, OUTPUT_DIM], seed)
    }

    /// Arbitrary layer widths; used by gradient oracles on small nets.
    pub fn with_dims(dims: &[usize], seed: u64) -> CriticNet<F> {
        assert!(dims.len() >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims.windows(2).map(|d| Dense::init(d[0], d[1], &mut rng)).collect();
        CriticNet { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.inputs)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    fn check_input(&self, features: &[F]) -> Result<(), CriticError> {
        if features.len() != self.input_dim() {
            return Err(CriticError::Shape(format!(
                "expected {} features, got {}",
                self.input_dim(),
                features.len()
            )));
        }
        Ok(())
    }

    /// Action values Q(o, ·).
    pub fn forward(&self, features: &[F]) -> Result<Vec<F>, CriticError> {
        self.check_input(features)?;
        let mut cur = features.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward(&cur, &mut next);
            if i != last {
                for v in next.iter_mut() {
                    *v = v.max(F::zero());
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Q(o, a).
    pub fn score(&self, features: &[F], action: PhaseId) -> Result<F, CriticError> {
        Ok(self.forward(features)?[action.index()])
    }

    /// Indices of all actions attaining the maximum Q(o, ·).
    pub fn argmax_set(&self, features: &[F]) -> Result<Vec<usize>, CriticError> {
        let q = self.forward(features)?;
        let best = q.iter().cloned().fold(F::neg_infinity(), F::max);
        Ok((0..q.len()).filter(|i| q[*i] == best).collect())
    }

    /// Forward pass retaining pre-activation values per layer for backprop.
    fn forward_trace(&self, features: &[F]) -> (Vec<Vec<F>>, Vec<Vec<F>>) {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = Vec::with_capacity(self.layers.len() + 1);
        act.push(features.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::new();
            layer.forward(act.last().unwrap(), &mut z);
            pre.push(z.clone());
            if i != last {
                for v in z.iter_mut() {
                    *v = v.max(F::zero());
                }
            }
            act.push(z);
        }
        (pre, act)
    }

    pub fn save<W: std::io::Write>(&self, mut sink: W) -> Result<(), CriticError>
    where
        F: Serialize,
    {
        let text = serde_json::to_string_pretty(self)?;
        sink.write_all(text.as_bytes())?;
        Ok(())
    }

    pub fn load<R: std::io::Read>(reader: R) -> Result<CriticNet<F>, CriticError>
    where
        F: serde::de::DeserializeOwned,
    {
        let net: CriticNet<F> = serde_json::from_reader(reader)?;
        if net.layers.is_empty() {
            return Err(CriticError::Shape("no layers".into()));
        }
        for pair in net.layers.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                return Err(CriticError::Shape(format!(
                    "layer boundary {} → {} does not chain",
                    pair[0].outputs, pair[1].inputs
                )));
            }
        }
        for layer in &net.layers {
            layer.validate()?;
        }
        Ok(net)
    }
}

/// Gradient holder mirroring a network's parameter shapes.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub layers: Vec<Dense<F>>,
}

impl<F: Scalar> Gradients<F> {
    fn zeros_like(net: &CriticNet<F>) -> Gradients<F> {
        Gradients {
            layers: net.layers.iter().map(Dense::zeros_like).collect(),
        }
    }
}

/// One TD transition: features at the switch, action taken, reward observed
/// (negative queue), next-switch features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition<F> {
    pub o: Vec<F>,
    pub a: usize,
    pub r: F,
    pub o_next: Vec<F>,
    pub terminal: bool,
}

/// Mean squared TD error over a batch and its gradient w.r.t. `net`:
///
///   L = mean_i ( r_i + γ·max_a' Q_target(o'_i, a') − Q(o_i, a_i) )²
///
/// with a zero bootstrap on terminal transitions.
pub fn td_loss<F: Scalar>(
    net: &CriticNet<F>,
    target: &CriticNet<F>,
    batch: &[Transition<F>],
    gamma: F,
) -> Result<(F, Gradients<F>), CriticError> {
    if batch.is_empty() {
        return Err(CriticError::Shape("empty batch".into()));
    }
    let mut grads = Gradients::zeros_like(net);
    let mut loss = F::zero();
    let n = F::from_f64_c(batch.len() as f64);
    let last = net.layers.len() - 1;
    for tr in batch {
        net.check_input(&tr.o)?;
        if tr.a >= net.output_dim() {
            return Err(CriticError::Shape(format!("action index {} out of range", tr.a)));
        }
        let bootstrap = if tr.terminal {
            F::zero()
        } else {
            let qn = target.forward(&tr.o_next)?;
            qn.into_iter().fold(F::neg_infinity(), F::max)
        };
        let target_value = tr.r + gamma * bootstrap;
        let (pre, act) = net.forward_trace(&tr.o);
        let q = act.last().unwrap();
        let err = target_value - q[tr.a];
        loss = loss + err * err;

        // d(err²)/dQ(o,a) = −2·err; propagated through the chosen output only.
        let two = F::from_f64_c(2.0);
        let mut delta = vec![F::zero(); net.output_dim()];
        delta[tr.a] = -two * err / n;
        for li in (0..net.layers.len()).rev() {
            let layer = &net.layers[li];
            let input = &act[li];
            let g = &mut grads.layers[li];
            for o in 0..layer.outputs {
                if delta[o] == F::zero() {
                    continue;
                }
                g.b[o] = g.b[o] + delta[o];
                let row = &mut g.w[o * layer.inputs..(o + 1) * layer.inputs];
                for (gi, xi) in row.iter_mut().zip(input) {
                    *gi = *gi + delta[o] * *xi;
                }
            }
            if li == 0 {
                break;
            }
            let mut prev = vec![F::zero(); layer.inputs];
            for o in 0..layer.outputs {
                if delta[o] == F::zero() {
                    continue;
                }
                let row = &layer.w[o * layer.inputs..(o + 1) * layer.inputs];
                for (pi, wi) in prev.iter_mut().zip(row) {
                    *pi = *pi + delta[o] * *wi;
                }
            }
            // Rectifier gate of the layer below (hidden layers only).
            for (pi, zi) in prev.iter_mut().zip(&pre[li - 1]) {
                if *zi <= F::zero() {
                    *pi = F::zero();
                }
            }
            let _ = last;
            delta = prev;
        }
    }
    Ok((loss / n, grads))
}

/// Uniform ring buffer of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<F> {
    data: Vec<Transition<F>>,
    capacity: usize,
    next: usize,
}

impl<F: Scalar> ReplayBuffer<F> {
    pub fn new(capacity: usize) -> ReplayBuffer<F> {
        ReplayBuffer {
            data: Vec::new(),
            capacity,
            next: 0,
        }
    }

    pub fn push(&mut self, tr: Transition<F>) {
        if self.data.len() < self.capacity {
            self.data.push(tr);
        } else {
            self.data[self.next] = tr;
        }
        self.next = (self.next + 1) % self.capacity.max(1);
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Uniform sample without replacement within the batch.
    pub fn sample(&self, k: usize, rng: &mut ChaCha8Rng) -> Vec<Transition<F>> {
        let take = k.min(self.data.len());
        rand::seq::index::sample(rng, self.data.len(), take)
            .into_iter()
            .map(|i| self.data[i].clone())
            .collect()
    }
}

/// Training hyperparameters. Defaults follow the published settings where
/// stated (learning rate, buffer and sample sizes); γ and the target-sync
/// period are config-exposed choices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCfg {
    pub lr: f64,
    pub gamma: f64,
    pub capacity: usize,
    pub sample_size: usize,
    pub target_sync: usize,
    pub steps: usize,
    pub divergence_threshold: f64,
    pub seed: u64,
}

impl Default for TrainCfg {
    fn default() -> Self {
        TrainCfg {
            lr: 1e-3,
            gamma: 0.8,
            capacity: 12_000,
            sample_size: 3_000,
            target_sync: 200,
            steps: 1_000,
            divergence_threshold: 1e9,
            seed: 0,
        }
    }
}

/// Adaptive-moment state mirroring the network parameters.
struct AdamState<F> {
    m: Vec<Dense<F>>,
    v: Vec<Dense<F>>,
    t: u64,
}

/// TD trainer: replay buffer, adaptive-moment updates, periodic target sync.
pub struct Trainer<F: Scalar> {
    pub net: CriticNet<F>,
    target: CriticNet<F>,
    pub buffer: ReplayBuffer<F>,
    cfg: TrainCfg,
    adam: AdamState<F>,
    rng: ChaCha8Rng,
    steps_done: usize,
    pub loss_curve: Vec<f64>,
}

impl<F: Scalar> Trainer<F> {
    pub fn new(cfg: TrainCfg) -> Trainer<F> {
        let net = CriticNet::new(cfg.seed);
        Self::with_net(net, cfg)
    }

    pub fn with_net(net: CriticNet<F>, cfg: TrainCfg) -> Trainer<F> {
        let adam = AdamState {
            m: net.layers.iter().map(Dense::zeros_like).collect(),
            v: net.layers.iter().map(Dense::zeros_like).collect(),
            t: 0,
        };
        Trainer {
            target: net.clone(),
            buffer: ReplayBuffer::new(cfg.capacity),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1)),
            adam,
            net,
            cfg,
            steps_done: 0,
            loss_curve: Vec::new(),
        }
    }

    pub fn push(&mut self, tr: Transition<F>) {
        self.buffer.push(tr);
    }

    pub fn extend(&mut self, transitions: impl IntoIterator<Item = Transition<F>>) {
        for tr in transitions {
            self.buffer.push(tr);
        }
    }

    fn adam_step(&mut self, grads: &Gradients<F>) {
        self.adam.t += 1;
        let lr = F::from_f64_c(self.cfg.lr);
        let b1 = F::from_f64_c(0.9);
        let b2 = F::from_f64_c(0.999);
        let eps = F::from_f64_c(1e-8);
        let one = F::one();
        let bc1 = one - F::from_f64_c(0.9f64.powi(self.adam.t as i32));
        let bc2 = one - F::from_f64_c(0.999f64.powi(self.adam.t as i32));
        for li in 0..self.net.layers.len() {
            let g = &grads.layers[li];
            let m = &mut self.adam.m[li];
            let v = &mut self.adam.v[li];
            let layer = &mut self.net.layers[li];
            for (idx, gw) in g.w.iter().enumerate() {
                m.w[idx] = b1 * m.w[idx] + (one - b1) * *gw;
                v.w[idx] = b2 * v.w[idx] + (one - b2) * *gw * *gw;
                let mhat = m.w[idx] / bc1;
                let vhat = v.w[idx] / bc2;
                layer.w[idx] = layer.w[idx] - lr * mhat / (vhat.sqrt() + eps);
            }
            for (idx, gb) in g.b.iter().enumerate() {
                m.b[idx] = b1 * m.b[idx] + (one - b1) * *gb;
                v.b[idx] = b2 * v.b[idx] + (one - b2) * *gb * *gb;
                let mhat = m.b[idx] / bc1;
                let vhat = v.b[idx] / bc2;
                layer.b[idx] = layer.b[idx] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }

    /// Runs `steps` gradient steps. With an empty buffer this is a no-op.
    pub fn train_steps(&mut self, steps: usize) -> Result<(), CriticError> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        for _ in 0..steps {
            let batch = self.buffer.sample(self.cfg.sample_size, &mut self.rng);
            let gamma = F::from_f64_c(self.cfg.gamma);
            let (loss, grads) = td_loss(&self.net, &self.target, &batch, gamma)?;
            let loss_f = loss.to_f64_c();
            self.loss_curve.push(loss_f);
            if !loss_f.is_finite() || loss_f > self.cfg.divergence_threshold {
                return Err(CriticError::Divergence {
                    step: self.steps_done,
                    loss: loss_f,
                });
            }
            self.adam_step(&grads);
            self.steps_done += 1;
            if self.cfg.target_sync > 0 && self.steps_done % self.cfg.target_sync == 0 {
                self.target = self.net.clone();
            }
        }
        Ok(())
    }

    /// Full offline run over the configured step budget.
    pub fn train(&mut self) -> Result<(), CriticError> {
        self.train_steps(self.cfg.steps)
    }
}

/// Keeps records whose action is in the critic's argmax set for their stored
/// features; ties at the maximum keep the record. Output is a subset of the
/// input in original order, so the operation is idempotent.
pub fn filter_trajectories(records: &[ReasoningRecord], net: &CriticNet<f64>) -> Result<Vec<ReasoningRecord>, CriticError> {
    let mut kept = Vec::new();
    for record in records {
        let argmax = net.argmax_set(&record.features)?;
        if argmax.contains(&record.action.index()) {
            kept.push(record.clone());
        }
    }
    Ok(kept)
}
