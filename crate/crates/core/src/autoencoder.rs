//! Recurrent autoencoders over trajectories. A stacked recurrent encoder
//! reads the normalized frames; its last top-layer state is mapped to a
//! latent vector (RAE) or to a diagonal Gaussian (VRAE). The decoder starts
//! from `tanh(A z + a)` in every layer, reads zero inputs and emits one
//! frame per step through a linear readout. Gradients are computed by hand
//! (backpropagation through time).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddedPoint, Embedding, EmbeddingTag};
use crate::error::{Error, Result};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::trajectory::{ChannelSelection, TrajId, Trajectory, TrajectorySource};

const LOGVAR_CLAMP: f64 = 10.0;
const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AeKind {
    Rae,
    Vrae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub kind: AeKind,
    pub cell: CellKind,
    pub hidden: usize,
    pub latent: usize,
    pub layers: usize,
    pub channels: ChannelSelection,
    pub epochs: usize,
    pub adam: AdamConfig,
    /// Fraction of epochs over which the KL weight ramps from 0 to 1.
    pub kl_warmup: f64,
    /// Length groups larger than this are split.
    pub max_batch: usize,
    pub seed: u64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            kind: AeKind::Rae,
            cell: CellKind::Lstm,
            hidden: 64,
            latent: 64,
            layers: 2,
            channels: ChannelSelection::default(),
            epochs: 300,
            adam: AdamConfig::default(),
            kl_warmup: 0.2,
            max_batch: 32,
            seed: 0,
        }
    }
}

impl AeConfig {
    pub fn desk() -> Self {
        AeConfig {
            hidden: 16,
            latent: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.latent == 0 || self.layers == 0 {
            return Err(Error::invalid("hidden size, latent size and depth must be positive"));
        }
        if !(self.adam.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..=1.0).contains(&self.kl_warmup) {
            return Err(Error::invalid("KL warm-up fraction must lie in [0, 1]"));
        }
        if self.max_batch == 0 {
            return Err(Error::invalid("max batch must be positive"));
        }
        Ok(())
    }

    /// KL weight for `epoch`: linear from 0 over the warm-up, then 1.
    pub fn kl_weight(&self, epoch: usize) -> f64 {
        let warm = (self.kl_warmup * self.epochs as f64).ceil() as usize;
        if warm == 0 {
            1.0
        } else {
            (epoch as f64 / warm as f64).min(1.0)
        }
    }
}

/// Per-channel affine normalization fitted on the training pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn identity(arity: usize) -> Self {
        Normalizer {
            mean: vec![0.0; arity],
            std: vec![1.0; arity],
        }
    }

    pub fn fit(pool: &[&Trajectory], channels: ChannelSelection) -> Self {
        let idx = channels.indices();
        let mut n = 0usize;
        let mut sum = vec![0.0; idx.len()];
        let mut sq = vec![0.0; idx.len()];
        for t in pool {
            for f in &t.frames {
                for (k, &c) in idx.iter().enumerate() {
                    sum[k] += f[c];
                    sq[k] += f[c] * f[c];
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let v = (s / n - m * m).max(0.0).sqrt();
                if v > 1e-12 {
                    v
                } else {
                    1.0
                }
            })
            .collect();
        Normalizer { mean, std }
    }

    /// Flattened `T x arity` normalized series.
    pub fn apply(&self, t: &Trajectory, channels: ChannelSelection) -> Vec<f64> {
        let idx = channels.indices();
        t.frames
            .iter()
            .flat_map(|f| idx.iter().enumerate().map(move |(k, &c)| (f[c] - self.mean[k]) / self.std[k]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct CellIdx {
    input: usize,
    w: Option<usize>,
    u: usize,
    b: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    enc: Vec<CellIdx>,
    head: Vec<(usize, usize)>,
    dec_init: Vec<(usize, usize)>,
    dec: Vec<CellIdx>,
    readout: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub config: AeConfig,
    pub normalizer: Normalizer,
    pub params: ParamStore,
    /// Mean loss per epoch.
    pub loss_trace: Vec<f64>,
    layout: Layout,
}

impl PartialEq for Autoencoder {
    fn eq(&self, o: &Self) -> bool {
        self.config == o.config && self.normalizer == o.normalizer && self.params == o.params
    }
}

/// Activations of one recurrent layer over a sequence.
struct SeqTrace {
    input: Vec<f64>,
    h0: Vec<f64>,
    c0: Vec<f64>,
    /// Per step: gate activations (LSTM: i f g o; GRU: r u n plus U_n h).
    gates: Vec<Vec<f64>>,
    hs: Vec<Vec<f64>>,
    cs: Vec<Vec<f64>>,
}

/// Everything the backward pass needs for one trajectory.
struct Forward {
    enc: Vec<SeqTrace>,
    enc_top: Vec<f64>,
    mu: Vec<f64>,
    logvar: Vec<f64>,
    clamped: Vec<bool>,
    eta: Vec<f64>,
    z: Vec<f64>,
    dec_h0: Vec<Vec<f64>>,
    dec: Vec<SeqTrace>,
    output: Vec<f64>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matvec_add(out: &mut [f64], w: &[f64], x: &[f64]) {
    let cols = x.len();
    if cols == 0 {
        return;
    }
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn matvec_t_add(out: &mut [f64], w: &[f64], d: &[f64]) {
    let cols = out.len();
    if cols == 0 {
        return;
    }
    for (dr, row) in d.iter().zip(w.chunks_exact(cols)) {
        if *dr != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += dr * a;
            }
        }
    }
}

fn outer_add(g: &mut [f64], d: &[f64], x: &[f64]) {
    let cols = x.len();
    if cols == 0 {
        return;
    }
    for (dr, row) in d.iter().zip(g.chunks_exact_mut(cols)) {
        if *dr != 0.0 {
            for (o, a) in row.iter_mut().zip(x) {
                *o += dr * a;
            }
        }
    }
}

/// Mutable gradient view of one tensor inside a flat gradient buffer.
fn gslice<'a>(grad: &'a mut [f64], params: &ParamStore, idx: usize) -> &'a mut [f64] {
    let r = params.specs()[idx].range();
    &mut grad[r]
}

/// `sum_i -1/2 (1 + logvar_i - mu_i^2 - exp(logvar_i))`.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(m, lv)| -0.5 * (1.0 + lv - m * m - lv.exp()))
        .sum()
}

impl Autoencoder {
    fn build_layout(config: &AeConfig, arity: usize) -> (ParamStore, Layout) {
        let mut p = ParamStore::new();
        let (h, l, g) = (config.hidden, config.latent, config.cell.gates());
        let cell = |p: &mut ParamStore, name: &str, input: usize| CellIdx {
            input,
            w: (input > 0).then(|| p.add(format!("{name}.w"), &[g * h, input])),
            u: p.add(format!("{name}.u"), &[g * h, h]),
            b: p.add(format!("{name}.b"), &[g * h]),
        };
        let enc = (0..config.layers)
            .map(|k| cell(&mut p, &format!("enc{k}"), if k == 0 { arity } else { h }))
            .collect();
        let heads = match config.kind {
            AeKind::Rae => vec!["latent"],
            AeKind::Vrae => vec!["mu", "logvar"],
        };
        let head = heads
            .iter()
            .map(|n| (p.add(format!("{n}.w"), &[l, h]), p.add(format!("{n}.b"), &[l])))
            .collect();
        let dec_init = (0..config.layers)
            .map(|k| (p.add(format!("dec{k}.init.w"), &[h, l]), p.add(format!("dec{k}.init.b"), &[h])))
            .collect();
        let dec = (0..config.layers)
            .map(|k| cell(&mut p, &format!("dec{k}"), if k == 0 { 0 } else { h }))
            .collect();
        let readout = (p.add("readout.w", &[arity, h]), p.add("readout.b", &[arity]));
        (
            p,
            Layout {
                enc,
                head,
                dec_init,
                dec,
                readout,
            },
        )
    }

    /// Model with every parameter drawn from U(-1/sqrt(H), 1/sqrt(H)).
    pub fn init(config: &AeConfig, normalizer: Normalizer) -> Result<Self> {
        config.validate()?;
        let arity = config.channels.arity();
        if normalizer.mean.len() != arity {
            return Err(Error::DimensionMismatch {
                expected: arity,
                got: normalizer.mean.len(),
            });
        }
        let (mut params, layout) = Self::build_layout(config, arity);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let bound = 1.0 / (config.hidden as f64).sqrt();
        for i in 0..params.specs().len() {
            params.fill_uniform(i, bound, &mut rng);
        }
        Ok(Autoencoder {
            config: config.clone(),
            normalizer,
            params,
            loss_trace: Vec::new(),
            layout,
        })
    }

    pub fn arity(&self) -> usize {
        self.config.channels.arity()
    }

    fn run_cell(&self, c: &CellIdx, input: Vec<f64>, steps: usize, h0: Vec<f64>) -> SeqTrace {
        let h = self.config.hidden;
        let p = &self.params;
        let u = p.tensor(c.u);
        let b = p.tensor(c.b);
        let w = c.w.map(|w| p.tensor(w));
        let mut trace = SeqTrace {
            h0: h0.clone(),
            c0: vec![0.0; h],
            gates: Vec::with_capacity(steps),
            hs: Vec::with_capacity(steps),
            cs: Vec::with_capacity(steps),
            input,
        };
        let mut hp = h0;
        let mut cp = vec![0.0; h];
        for t in 0..steps {
            let x = &trace.input[t * c.input..(t + 1) * c.input];
            match self.config.cell {
                CellKind::Lstm => {
                    let mut a = b.to_vec();
                    if let Some(w) = w {
                        matvec_add(&mut a, w, x);
                    }
                    matvec_add(&mut a, u, &hp);
                    let mut gates = vec![0.0; 4 * h];
                    let mut cn = vec![0.0; h];
                    let mut hn = vec![0.0; h];
                    for k in 0..h {
                        let (i, f, g, o) = (sigmoid(a[k]), sigmoid(a[h + k]), a[2 * h + k].tanh(), sigmoid(a[3 * h + k]));
                        gates[k] = i;
                        gates[h + k] = f;
                        gates[2 * h + k] = g;
                        gates[3 * h + k] = o;
                        cn[k] = f * cp[k] + i * g;
                        hn[k] = o * cn[k].tanh();
                    }
                    trace.gates.push(gates);
                    trace.cs.push(cn.clone());
                    trace.hs.push(hn.clone());
                    cp = cn;
                    hp = hn;
                }
                CellKind::Gru => {
                    let mut a = b.to_vec();
                    if let Some(w) = w {
                        matvec_add(&mut a, w, x);
                    }
                    let mut ur = vec![0.0; 2 * h];
                    matvec_add(&mut ur, &u[..2 * h * h], &hp);
                    let mut un = vec![0.0; h];
                    matvec_add(&mut un, &u[2 * h * h..], &hp);
                    let mut gates = vec![0.0; 4 * h];
                    let mut hn = vec![0.0; h];
                    for k in 0..h {
                        let r = sigmoid(a[k] + ur[k]);
                        let z = sigmoid(a[h + k] + ur[h + k]);
                        let n = (a[2 * h + k] + r * un[k]).tanh();
                        gates[k] = r;
                        gates[h + k] = z;
                        gates[2 * h + k] = n;
                        gates[3 * h + k] = un[k];
                        hn[k] = (1.0 - z) * n + z * hp[k];
                    }
                    trace.gates.push(gates);
                    trace.cs.push(Vec::new());
                    trace.hs.push(hn.clone());
                    hp = hn;
                }
            }
        }
        trace
    }

    /// Backward through one layer. `dh_ext[t]` is the loss gradient on the
    /// layer output at step t (empty when none). Returns the gradient on the
    /// inputs (flattened) and on the initial hidden state.
    fn back_cell(&self, c: &CellIdx, tr: &SeqTrace, dh_ext: &[Vec<f64>], grad: &mut [f64]) -> (Vec<f64>, Vec<f64>) {
        let h = self.config.hidden;
        let steps = tr.hs.len();
        let p = &self.params;
        let u = p.tensor(c.u);
        let w = c.w.map(|w| p.tensor(w));
        let mut dx = vec![0.0; steps * c.input];
        let mut dh = vec![0.0; h];
        let mut dc = vec![0.0; h];
        let g = self.config.cell.gates();
        let mut da = vec![0.0; g * h];
        for t in (0..steps).rev() {
            if let Some(e) = dh_ext.get(t).filter(|e| !e.is_empty()) {
                for (a, b) in dh.iter_mut().zip(e) {
                    *a += b;
                }
            }
            let hp = if t == 0 { &tr.h0 } else { &tr.hs[t - 1] };
            let gt = &tr.gates[t];
            let x = &tr.input[t * c.input..(t + 1) * c.input];
            let mut dh_prev = vec![0.0; h];
            match self.config.cell {
                CellKind::Lstm => {
                    let cp = if t == 0 { &tr.c0 } else { &tr.cs[t - 1] };
                    let cn = &tr.cs[t];
                    for k in 0..h {
                        let (i, f, gg, o) = (gt[k], gt[h + k], gt[2 * h + k], gt[3 * h + k]);
                        let tc = cn[k].tanh();
                        let d_o = dh[k] * tc;
                        let dct = dc[k] + dh[k] * o * (1.0 - tc * tc);
                        da[k] = dct * gg * i * (1.0 - i);
                        da[h + k] = dct * cp[k] * f * (1.0 - f);
                        da[2 * h + k] = dct * i * (1.0 - gg * gg);
                        da[3 * h + k] = d_o * o * (1.0 - o);
                        dc[k] = dct * f;
                    }
                    outer_add(gslice(grad, p, c.u), &da, hp);
                    matvec_t_add(&mut dh_prev, u, &da);
                }
                CellKind::Gru => {
                    // da holds (d a_r, d a_z, d a_n) for W and b; the
                    // recurrent n-block sees d(U_n h) = d a_n * r.
                    let mut dun = vec![0.0; h];
                    for k in 0..h {
                        let (r, z, n, un) = (gt[k], gt[h + k], gt[2 * h + k], gt[3 * h + k]);
                        let dn = dh[k] * (1.0 - z);
                        let dz = dh[k] * (hp[k] - n);
                        dh_prev[k] = dh[k] * z;
                        let dan = dn * (1.0 - n * n);
                        let dr = dan * un;
                        dun[k] = dan * r;
                        da[k] = dr * r * (1.0 - r);
                        da[h + k] = dz * z * (1.0 - z);
                        da[2 * h + k] = dan;
                    }
                    let gu = gslice(grad, p, c.u);
                    let (gu_rz, gu_n) = gu.split_at_mut(2 * h * h);
                    outer_add(gu_rz, &da[..2 * h], hp);
                    outer_add(gu_n, &dun, hp);
                    matvec_t_add(&mut dh_prev, &u[..2 * h * h], &da[..2 * h]);
                    matvec_t_add(&mut dh_prev, &u[2 * h * h..], &dun);
                }
            }
            for (gb, d) in gslice(grad, p, c.b).iter_mut().zip(&da) {
                *gb += d;
            }
            if let (Some(wi), Some(w)) = (c.w, w) {
                outer_add(gslice(grad, p, wi), &da, x);
                matvec_t_add(&mut dx[t * c.input..(t + 1) * c.input], w, &da);
            }
            dh = dh_prev;
        }
        (dx, dh)
    }

    fn encode_trace(&self, x: &[f64], steps: usize) -> (Vec<SeqTrace>, Vec<f64>) {
        let h = self.config.hidden;
        let mut traces = Vec::with_capacity(self.layout.enc.len());
        let mut input = x.to_vec();
        for c in &self.layout.enc {
            let tr = self.run_cell(c, input, steps, vec![0.0; h]);
            input = tr.hs.concat();
            traces.push(tr);
        }
        let top = traces.last().and_then(|t| t.hs.last()).cloned().unwrap_or_else(|| vec![0.0; h]);
        (traces, top)
    }

    fn head(&self, k: usize, top: &[f64]) -> Vec<f64> {
        let (w, b) = self.layout.head[k];
        let mut out = self.params.tensor(b).to_vec();
        matvec_add(&mut out, self.params.tensor(w), top);
        out
    }

    fn forward(&self, x: &[f64], steps: usize, eta: Option<&[f64]>) -> Forward {
        let (enc, top) = self.encode_trace(x, steps);
        let mu = self.head(0, &top);
        let (logvar, clamped, eta_v, z) = match self.config.kind {
            AeKind::Rae => (Vec::new(), Vec::new(), Vec::new(), mu.clone()),
            AeKind::Vrae => {
                let raw = self.head(1, &top);
                let clamped: Vec<bool> = raw.iter().map(|v| v.abs() > LOGVAR_CLAMP).collect();
                let lv: Vec<f64> = raw.iter().map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)).collect();
                let eta_v = eta.map_or_else(|| vec![0.0; mu.len()], <[f64]>::to_vec);
                let z = mu
                    .iter()
                    .zip(&lv)
                    .zip(&eta_v)
                    .map(|((m, l), e)| m + (0.5 * l).exp() * e)
                    .collect();
                (lv, clamped, eta_v, z)
            }
        };
        let dec_h0: Vec<Vec<f64>> = self
            .layout
            .dec_init
            .iter()
            .map(|&(w, b)| {
                let mut a = self.params.tensor(b).to_vec();
                matvec_add(&mut a, self.params.tensor(w), &z);
                a.iter().map(|v| v.tanh()).collect()
            })
            .collect();
        let mut dec = Vec::with_capacity(self.layout.dec.len());
        let mut input = Vec::new();
        for (c, h0) in self.layout.dec.iter().zip(&dec_h0) {
            let tr = self.run_cell(c, input, steps, h0.clone());
            input = tr.hs.concat();
            dec.push(tr);
        }
        let (rw, rb) = self.layout.readout;
        let arity = self.arity();
        let mut output = vec![0.0; steps * arity];
        let top_dec = dec.last().expect("at least one decoder layer");
        for t in 0..steps {
            let o = &mut output[t * arity..(t + 1) * arity];
            o.copy_from_slice(self.params.tensor(rb));
            matvec_add(o, self.params.tensor(rw), &top_dec.hs[t]);
        }
        Forward {
            enc,
            enc_top: top,
            mu,
            logvar,
            clamped,
            eta: eta_v,
            z,
            dec_h0,
            dec,
            output,
        }
    }

    /// Loss of one trajectory, adding `scale` times its gradient into `grad`.
    fn sample_loss_grad(&self, x: &[f64], steps: usize, eta: Option<&[f64]>, kl_weight: f64, scale: f64, grad: &mut [f64]) -> (f64, f64) {
        let f = self.forward(x, steps, eta);
        let arity = self.arity();
        let count = (steps * arity) as f64;
        let mut mse = 0.0;
        let mut dy = vec![0.0; steps * arity];
        for k in 0..dy.len() {
            let e = f.output[k] - x[k];
            mse += e * e;
            dy[k] = 2.0 * e / count * scale;
        }
        mse /= count;
        let kl = if self.config.kind == AeKind::Vrae {
            kl_divergence(&f.mu, &f.logvar)
        } else {
            0.0
        };
        let p = &self.params;
        let h = self.config.hidden;

        // Readout.
        let (rw, rb) = self.layout.readout;
        let top_dec = f.dec.last().expect("decoder layer");
        let mut dh_top = Vec::with_capacity(steps);
        for t in 0..steps {
            let d = &dy[t * arity..(t + 1) * arity];
            outer_add(gslice(grad, p, rw), d, &top_dec.hs[t]);
            for (g, v) in gslice(grad, p, rb).iter_mut().zip(d) {
                *g += v;
            }
            let mut dh = vec![0.0; h];
            matvec_t_add(&mut dh, p.tensor(rw), d);
            dh_top.push(dh);
        }

        // Decoder layers, top down.
        let mut dz = vec![0.0; self.config.latent];
        let mut ext = dh_top;
        for k in (0..self.layout.dec.len()).rev() {
            let (dx, dh0) = self.back_cell(&self.layout.dec[k], &f.dec[k], &ext, grad);
            ext = if k > 0 { dx.chunks(h).map(<[f64]>::to_vec).collect() } else { Vec::new() };
            let (iw, ib) = self.layout.dec_init[k];
            let da: Vec<f64> = dh0.iter().zip(&f.dec_h0[k]).map(|(d, v)| d * (1.0 - v * v)).collect();
            outer_add(gslice(grad, p, iw), &da, &f.z);
            for (g, v) in gslice(grad, p, ib).iter_mut().zip(&da) {
                *g += v;
            }
            matvec_t_add(&mut dz, p.tensor(iw), &da);
        }

        // Latent head.
        let mut dtop = vec![0.0; h];
        let mut dmu = dz.clone();
        if self.config.kind == AeKind::Vrae {
            let mut dlv = vec![0.0; dz.len()];
            for i in 0..dz.len() {
                let s = (0.5 * f.logvar[i]).exp();
                dmu[i] += kl_weight * scale * f.mu[i];
                if !f.clamped[i] {
                    dlv[i] = dz[i] * f.eta[i] * 0.5 * s + kl_weight * scale * 0.5 * (f.logvar[i].exp() - 1.0);
                }
            }
            let (w, b) = self.layout.head[1];
            outer_add(gslice(grad, p, w), &dlv, &f.enc_top);
            for (g, v) in gslice(grad, p, b).iter_mut().zip(&dlv) {
                *g += v;
            }
            matvec_t_add(&mut dtop, p.tensor(w), &dlv);
        }
        let (w, b) = self.layout.head[0];
        outer_add(gslice(grad, p, w), &dmu, &f.enc_top);
        for (g, v) in gslice(grad, p, b).iter_mut().zip(&dmu) {
            *g += v;
        }
        matvec_t_add(&mut dtop, p.tensor(w), &dmu);

        // Encoder layers, top down; only the last step of the top layer
        // feeds the head.
        let mut ext: Vec<Vec<f64>> = vec![Vec::new(); steps];
        if steps > 0 {
            ext[steps - 1] = dtop;
        }
        for k in (0..self.layout.enc.len()).rev() {
            let (dx, _) = self.back_cell(&self.layout.enc[k], &f.enc[k], &ext, grad);
            if k > 0 {
                ext = dx.chunks(h).map(<[f64]>::to_vec).collect();
            }
        }
        (mse, kl)
    }

    /// Mean loss over a batch of equal-length normalized series and its
    /// gradient. `eta` holds one noise vector per member (VRAE only).
    pub fn batch_loss_and_grad(&self, batch: &[&[f64]], eta: Option<&[Vec<f64>]>, kl_weight: f64) -> Result<(f64, Vec<f64>)> {
        let arity = self.arity();
        let steps = batch.first().map_or(0, |x| x.len() / arity);
        if batch.is_empty() || steps == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if batch.iter().any(|x| x.len() != steps * arity) {
            return Err(Error::invalid("batch members differ in length"));
        }
        if self.config.kind == AeKind::Vrae && eta.is_some_and(|e| e.len() != batch.len()) {
            return Err(Error::invalid("one noise vector per batch member"));
        }
        let scale = 1.0 / batch.len() as f64;
        let parts: Vec<(f64, f64, Vec<f64>)> = batch
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let mut g = self.params.zeros_like();
                let e = eta.map(|e| e[i].as_slice());
                let (mse, kl) = self.sample_loss_grad(x, steps, e, kl_weight, scale, &mut g);
                (mse, kl, g)
            })
            .collect();
        let mut grad = self.params.zeros_like();
        let mut loss = 0.0;
        for (mse, kl, g) in parts {
            loss += scale * (mse + kl_weight * kl);
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        Ok((loss, grad))
    }

    fn check_channels(&self, t: &Trajectory) -> Result<()> {
        if t.frames.is_empty() {
            return Err(Error::InvalidTrajectory {
                id: t.id,
                reason: "no frames".into(),
            });
        }
        Ok(())
    }

    /// Latent code: RAE vector, or VRAE `(mean, log-variance)`.
    pub fn encode(&self, t: &Trajectory) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        self.check_channels(t)?;
        let x = self.normalizer.apply(t, self.config.channels);
        self.encode_series(&x)
    }

    /// Encodes an already normalized, flattened series.
    pub fn encode_series(&self, x: &[f64]) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let arity = self.arity();
        if x.is_empty() || x.len() % arity != 0 {
            return Err(Error::DimensionMismatch {
                expected: arity,
                got: x.len() % arity.max(1),
            });
        }
        let (_, top) = self.encode_trace(x, x.len() / arity);
        let mu = self.head(0, &top);
        Ok(match self.config.kind {
            AeKind::Rae => (mu, None),
            AeKind::Vrae => {
                let lv = self.head(1, &top).iter().map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)).collect();
                (mu, Some(lv))
            }
        })
    }

    /// Reconstruction from the latent mean, in original units, one row per frame.
    pub fn reconstruct(&self, t: &Trajectory) -> Result<Vec<Vec<f64>>> {
        self.check_channels(t)?;
        let x = self.normalizer.apply(t, self.config.channels);
        let arity = self.arity();
        let f = self.forward(&x, t.len(), None);
        Ok(f
            .output
            .chunks(arity)
            .map(|r| r.iter().enumerate().map(|(k, v)| v * self.normalizer.std[k] + self.normalizer.mean[k]).collect())
            .collect())
    }

    /// Mean reconstruction MSE (normalized units) over a pool, using the latent mean.
    pub fn reconstruction_mse(&self, pool: &[&Trajectory]) -> Result<f64> {
        let arity = self.arity();
        let total: f64 = pool
            .par_iter()
            .map(|t| {
                let x = self.normalizer.apply(t, self.config.channels);
                let f = self.forward(&x, t.len(), None);
                f.output.iter().zip(&x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (t.len() * arity) as f64
            })
            .sum();
        Ok(total / pool.len().max(1) as f64)
    }

    pub fn tag(&self) -> EmbeddingTag {
        match self.config.kind {
            AeKind::Rae => EmbeddingTag::Rae,
            AeKind::Vrae => EmbeddingTag::Vrae,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "kind": "autoencoder",
            "config": self.config,
            "normalizer": self.normalizer,
        });
        self.params.save(path, &header)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, store) = ParamStore::load(path)?;
        let config: AeConfig = serde_json::from_value(header["config"].clone())?;
        let normalizer: Normalizer = serde_json::from_value(header["normalizer"].clone())?;
        let mut model = Autoencoder::init(&config, normalizer)?;
        model.params.load_values(&store)?;
        Ok(model)
    }

    /// Loss trace as `epoch loss` lines.
    pub fn loss_trace_text(&self) -> String {
        let mut out = String::from("# epoch loss\n");
        for (e, l) in self.loss_trace.iter().enumerate() {
            let _ = writeln!(out, "{e} {l:.10}");
        }
        out
    }
}

/// Splits indices into batches of one common length, at most `max` each.
pub fn length_batches(lengths: &[usize], max: usize) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in lengths.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
        .into_values()
        .flat_map(|g| g.chunks(max).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect()
}

/// Trains on the pool with length-grouped batches in seeded shuffled order.
pub fn train_autoencoder(pool: &[&Trajectory], config: &AeConfig) -> Result<Autoencoder> {
    if pool.is_empty() {
        return Err(Error::invalid("cannot train on an empty pool"));
    }
    let normalizer = Normalizer::fit(pool, config.channels);
    let mut model = Autoencoder::init(config, normalizer)?;
    let series: Vec<Vec<f64>> = pool.iter().map(|t| model.normalizer.apply(t, config.channels)).collect();
    let lengths: Vec<usize> = pool.iter().map(|t| t.len()).collect();
    let mut batches = length_batches(&lengths, config.max_batch);
    let mut opt = Adam::new(config.adam, model.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA5A5_5A5A_0F0F_F0F0);
    for epoch in 0..config.epochs {
        let klw = config.kl_weight(epoch);
        batches.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in &batches {
            let xs: Vec<&[f64]> = batch.iter().map(|&i| series[i].as_slice()).collect();
            let eta: Option<Vec<Vec<f64>>> = (config.kind == AeKind::Vrae).then(|| {
                batch
                    .iter()
                    .map(|_| (0..config.latent).map(|_| StandardNormal.sample(&mut rng)).collect())
                    .collect()
            });
            let (loss, grad) = model.batch_loss_and_grad(&xs, eta.as_deref(), klw)?;
            if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                let mut trace = model.loss_trace.clone();
                trace.push(loss);
                return Err(Error::Diverged { epoch, loss, trace });
            }
            opt.step(model.params.as_mut_slice(), &grad);
            if !model.params.all_finite() {
                return Err(Error::NonFiniteLoss {
                    loss,
                    norms: model.params.norms(),
                });
            }
            sum += loss * batch.len() as f64;
            count += batch.len();
        }
        model.loss_trace.push(sum / count as f64);
    }
    Ok(model)
}

/// Trains on every trajectory the source exposes.
pub fn train_from_source(source: &dyn TrajectorySource, config: &AeConfig) -> Result<Autoencoder> {
    let ids = source.ids();
    let pool: Vec<&Trajectory> = ids.iter().filter_map(|&id| source.fetch(id)).collect();
    train_autoencoder(&pool, config)
}

/// One point per trajectory: the latent vector (RAE) or posterior mean (VRAE).
pub fn embed_pool(model: &Autoencoder, pool: &[&Trajectory]) -> Result<Embedding> {
    let tag = model.tag();
    let points = pool
        .par_iter()
        .map(|t| {
            Ok(EmbeddedPoint {
                id: t.id,
                tag,
                coords: model.encode(t)?.0,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Embedding::from_points(points)
}

pub fn embedded_ids(e: &Embedding) -> Vec<TrajId> {
    e.iter().map(|(id, _)| id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::one_nn_accuracy;
    use crate::generator::{generate_pool, GeneratorParams};
    use crate::trajectory::{AccessLogged, ClassLabel, TrajectoryStore};

    fn tiny(kind: AeKind, cell: CellKind) -> AeConfig {
        AeConfig {
            kind,
            cell,
            hidden: 3,
            latent: 3,
            epochs: 10,
            seed: 7,
            ..AeConfig::default()
        }
    }

    fn short_pool(per_class: usize, len: usize, seed: u64) -> TrajectoryStore {
        let params = GeneratorParams {
            min_len: len,
            max_len: len,
            ..GeneratorParams::default()
        };
        generate_pool(per_class, &params, seed).unwrap()
    }

    fn grad_check(kind: AeKind, cell: CellKind) {
        let mut pool: Vec<Trajectory> = short_pool(1, 8, 3).iter().take(2).cloned().collect();
        for t in &mut pool {
            t.frames.truncate(4);
        }
        let pool: Vec<&Trajectory> = pool.iter().collect();
        let cfg = tiny(kind, cell);
        let mut model = Autoencoder::init(&cfg, Normalizer::fit(&pool, cfg.channels)).unwrap();
        let xs: Vec<Vec<f64>> = pool.iter().map(|t| model.normalizer.apply(t, cfg.channels)).collect();
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let eta = vec![vec![0.3, -1.1, 0.7], vec![-0.4, 0.2, 1.5]];
        let eta = (kind == AeKind::Vrae).then_some(eta.as_slice());
        let (_, grad) = model.batch_loss_and_grad(&refs, eta, 0.6).unwrap();
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..model.params.len() {
            let orig = model.params.as_slice()[i];
            model.params.as_mut_slice()[i] = orig + eps;
            let up = model.batch_loss_and_grad(&refs, eta, 0.6).unwrap().0;
            model.params.as_mut_slice()[i] = orig - eps;
            let down = model.batch_loss_and_grad(&refs, eta, 0.6).unwrap().0;
            model.params.as_mut_slice()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-4, "{kind:?}/{cell:?}: worst relative error {worst:e}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        for kind in [AeKind::Rae, AeKind::Vrae] {
            for cell in [CellKind::Lstm, CellKind::Gru] {
                grad_check(kind, cell);
            }
        }
    }

    #[test]
    fn kl_closed_form() {
        assert_eq!(kl_divergence(&[0.0; 4], &[0.0; 4]), 0.0);
        assert!((kl_divergence(&[1.0, 0.0, 0.0], &[0.0; 3]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_weight_ramps() {
        let cfg = AeConfig {
            epochs: 100,
            ..AeConfig::default()
        };
        assert_eq!(cfg.kl_weight(0), 0.0);
        assert!((cfg.kl_weight(10) - 0.5).abs() < 1e-12);
        assert_eq!(cfg.kl_weight(20), 1.0);
        assert_eq!(cfg.kl_weight(99), 1.0);
    }

    #[test]
    fn zero_parameters_give_zero_latent() {
        let store = short_pool(1, 20, 1);
        let t = store.iter().next().unwrap();
        for kind in [AeKind::Rae, AeKind::Vrae] {
            let mut m = Autoencoder::init(&tiny(kind, CellKind::Lstm), Normalizer::identity(3)).unwrap();
            m.params.as_mut_slice().fill(0.0);
            assert!(m.encode(t).unwrap().0.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn reconstruction_has_input_length() {
        let params = GeneratorParams {
            min_len: 30,
            max_len: 60,
            ..GeneratorParams::default()
        };
        let store = generate_pool(2, &params, 5).unwrap();
        let m = Autoencoder::init(&AeConfig::desk(), Normalizer::identity(3)).unwrap();
        for t in store.iter() {
            let r = m.reconstruct(t).unwrap();
            assert_eq!(r.len(), t.len());
            assert!(r.iter().all(|row| row.len() == 3));
        }
    }

    #[test]
    fn zero_epochs_is_initialization() {
        let store = short_pool(2, 8, 4);
        let pool: Vec<&Trajectory> = store.iter().collect();
        let cfg = AeConfig {
            epochs: 0,
            ..tiny(AeKind::Vrae, CellKind::Lstm)
        };
        let trained = train_autoencoder(&pool, &cfg).unwrap();
        let fresh = Autoencoder::init(&cfg, Normalizer::fit(&pool, cfg.channels)).unwrap();
        assert_eq!(trained, fresh);
        assert!(trained.loss_trace.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let store = short_pool(2, 10, 6);
        let pool: Vec<&Trajectory> = store.iter().collect();
        for kind in [AeKind::Rae, AeKind::Vrae] {
            let cfg = tiny(kind, CellKind::Lstm);
            let a = train_autoencoder(&pool, &cfg).unwrap();
            let b = train_autoencoder(&pool, &cfg).unwrap();
            assert_eq!(a.params.as_slice(), b.params.as_slice());
            assert_eq!(a.loss_trace, b.loss_trace);
        }
    }

    #[test]
    fn learns_a_repeated_trajectory() {
        let store = short_pool(1, 25, 8);
        let one = store.iter().next().unwrap();
        let pool: Vec<&Trajectory> = vec![one; 32];
        let cfg = AeConfig {
            epochs: 200,
            max_batch: 4,
            seed: 3,
            ..AeConfig::desk()
        };
        let init = Autoencoder::init(&cfg, Normalizer::fit(&pool, cfg.channels)).unwrap();
        let before = init.reconstruction_mse(&pool).unwrap();
        let model = train_autoencoder(&pool, &cfg).unwrap();
        let after = model.reconstruction_mse(&pool).unwrap();
        assert!(after < 0.1 * before, "mse {before} -> {after}");
    }

    #[test]
    fn loss_falls_over_each_window() {
        let store = short_pool(3, 12, 9);
        let pool: Vec<&Trajectory> = store.iter().collect();
        let cfg = AeConfig {
            epochs: 120,
            max_batch: 64,
            seed: 1,
            ..AeConfig::desk()
        };
        let m = train_autoencoder(&pool, &cfg).unwrap();
        for w in m.loss_trace.windows(21) {
            assert!(w[20] <= w[0], "loss rose over a 20-epoch window: {} -> {}", w[0], w[20]);
        }
    }

    #[test]
    fn latent_separates_classes() {
        let params = GeneratorParams {
            min_len: 30,
            max_len: 34,
            ..GeneratorParams::default()
        };
        let store = generate_pool(30, &params, 11).unwrap();
        let pool: Vec<&Trajectory> = store.iter().collect();
        let cfg = AeConfig {
            epochs: 300,
            seed: 2,
            ..AeConfig::desk()
        };
        let m = train_autoencoder(&pool, &cfg).unwrap();
        let e = embed_pool(&m, &pool).unwrap();
        assert_eq!(e.tag, EmbeddingTag::Rae);
        let pts: Vec<Vec<f64>> = pool.iter().map(|t| e.get(t.id).unwrap().to_vec()).collect();
        let labels: Vec<_> = pool.iter().map(|t| t.label).collect();
        let acc = one_nn_accuracy(&pts, &labels);
        assert!(acc >= 0.7, "1-NN accuracy {acc}");
    }

    #[test]
    fn restricted_training_never_reads_cut_ins() {
        let store = short_pool(4, 10, 12);
        let known = [ClassLabel::LeftDriveBy, ClassLabel::RightDriveBy];
        let view = store.restricted_to(&known);
        let logged = AccessLogged::new(&view);
        let m = train_from_source(&logged, &tiny(AeKind::Rae, CellKind::Lstm)).unwrap();
        assert!(m.loss_trace.len() == 10);
        for id in logged.accessed() {
            assert_ne!(store.label_of(id).unwrap(), Some(ClassLabel::CutIn));
        }
        assert_eq!(logged.accessed().len(), 8);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ae.ckpt");
        let store = short_pool(2, 10, 13);
        let pool: Vec<&Trajectory> = store.iter().collect();
        let m = train_autoencoder(&pool, &tiny(AeKind::Vrae, CellKind::Gru)).unwrap();
        m.save(&path).unwrap();
        let back = Autoencoder::load(&path).unwrap();
        assert_eq!(m, back);
        let t = pool[0];
        assert_eq!(m.encode(t).unwrap(), back.encode(t).unwrap());
    }

    #[test]
    fn batches_share_a_length() {
        let lens = [5, 7, 5, 5, 7, 9];
        let b = length_batches(&lens, 2);
        assert_eq!(b.iter().map(Vec::len).sum::<usize>(), lens.len());
        for batch in &b {
            assert!(batch.len() <= 2);
            assert!(batch.iter().all(|&i| lens[i] == lens[batch[0]]));
        }
    }
}
