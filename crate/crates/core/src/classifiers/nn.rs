//! Fully connected network: hidden layers are linear, batch norm, ReLU; the
//! output layer is linear followed by softmax. Trained with Adam on the mean
//! cross-entropy.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{softmax, PredictiveDistribution};
use crate::error::{Error, Result};
use crate::params::{Adam, AdamConfig, ParamStore};
use crate::trajectory::ClassLabel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NnConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub batch_norm: bool,
    /// Weight on the old running statistics.
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NnConfig {
    fn default() -> Self {
        NnConfig {
            hidden: vec![128, 256],
            epochs: 150,
            batch_size: 16,
            adam: AdamConfig::default(),
            batch_norm: true,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
        }
    }
}

impl NnConfig {
    /// Deeper stack used on the variational autoencoder embedding.
    pub fn vrae_variant() -> Self {
        NnConfig {
            hidden: vec![64, 128, 256, 128, 64],
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerIdx {
    w: usize,
    b: usize,
    bn: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct NnModel {
    pub classes: Vec<ClassLabel>,
    pub widths: Vec<usize>,
    pub batch_norm: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub params: ParamStore,
    pub running_mean: Vec<Vec<f64>>,
    pub running_var: Vec<Vec<f64>>,
    /// Mean mini-batch loss per epoch.
    pub loss_trace: Vec<f64>,
    /// Inference-mode cross-entropy on the whole training set after each epoch.
    pub train_loss: Vec<f64>,
    layers: Vec<LayerIdx>,
}

impl PartialEq for NnModel {
    fn eq(&self, o: &Self) -> bool {
        self.classes == o.classes
            && self.widths == o.widths
            && self.params == o.params
            && self.running_mean == o.running_mean
            && self.running_var == o.running_var
    }
}

struct Cache {
    inputs: Vec<Vec<f64>>,
    pre_relu: Vec<Vec<f64>>,
    xhat: Vec<Vec<f64>>,
    inv_std: Vec<Vec<f64>>,
    batch_mean: Vec<Vec<f64>>,
    batch_var: Vec<Vec<f64>>,
}

impl NnModel {
    fn layout(widths: &[usize], batch_norm: bool) -> (ParamStore, Vec<LayerIdx>) {
        let mut params = ParamStore::new();
        let n_layers = widths.len() - 1;
        let layers = (0..n_layers)
            .map(|l| {
                let (i, o) = (widths[l], widths[l + 1]);
                let w = params.add(format!("l{l}.w"), &[o, i]);
                let b = params.add(format!("l{l}.b"), &[o]);
                let bn = (batch_norm && l + 1 < n_layers)
                    .then(|| (params.add(format!("l{l}.gamma"), &[o]), params.add(format!("l{l}.beta"), &[o])));
                LayerIdx { w, b, bn }
            })
            .collect();
        (params, layers)
    }

    /// Freshly initialized network: weights and biases U(-1/sqrt(fan_in), +),
    /// batch-norm scale 1 and shift 0.
    pub fn init(classes: Vec<ClassLabel>, in_dim: usize, config: &NnConfig, seed: u64) -> Self {
        let mut widths = vec![in_dim];
        widths.extend(&config.hidden);
        widths.push(classes.len());
        let (mut params, layers) = Self::layout(&widths, config.batch_norm);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, idx) in layers.iter().enumerate() {
            let bound = 1.0 / (widths[l] as f64).sqrt();
            params.fill_uniform(idx.w, bound, &mut rng);
            params.fill_uniform(idx.b, bound, &mut rng);
            if let Some((g, _)) = idx.bn {
                params.tensor_mut(g).fill(1.0);
            }
        }
        let hidden = &widths[1..widths.len() - 1];
        NnModel {
            classes,
            batch_norm: config.batch_norm,
            bn_eps: config.bn_eps,
            bn_momentum: config.bn_momentum,
            params,
            running_mean: hidden.iter().map(|&w| vec![0.0; w]).collect(),
            running_var: hidden.iter().map(|&w| vec![1.0; w]).collect(),
            loss_trace: Vec::new(),
            train_loss: Vec::new(),
            layers,
            widths,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    fn linear(&self, l: usize, a: &[f64], rows: usize) -> Vec<f64> {
        let (i_dim, o_dim) = (self.widths[l], self.widths[l + 1]);
        let w = self.params.tensor(self.layers[l].w);
        let b = self.params.tensor(self.layers[l].b);
        let mut z = vec![0.0; rows * o_dim];
        for r in 0..rows {
            let x = &a[r * i_dim..(r + 1) * i_dim];
            for o in 0..o_dim {
                let row = &w[o * i_dim..(o + 1) * i_dim];
                z[r * o_dim + o] = b[o] + row.iter().zip(x).map(|(p, q)| p * q).sum::<f64>();
            }
        }
        z
    }

    /// Training-mode forward pass on a row-major batch. Returns the logits.
    fn forward_train(&self, x: &[f64], rows: usize) -> (Vec<f64>, Cache) {
        let n_layers = self.layers.len();
        let mut cache = Cache {
            inputs: Vec::with_capacity(n_layers),
            pre_relu: Vec::new(),
            xhat: Vec::new(),
            inv_std: Vec::new(),
            batch_mean: Vec::new(),
            batch_var: Vec::new(),
        };
        let mut a = x.to_vec();
        for l in 0..n_layers {
            let z = self.linear(l, &a, rows);
            cache.inputs.push(a);
            if l + 1 == n_layers {
                return (z, cache);
            }
            let width = self.widths[l + 1];
            let u = if let Some((gi, bi)) = self.layers[l].bn {
                let (g, be) = (self.params.tensor(gi), self.params.tensor(bi));
                let mut mean = vec![0.0; width];
                let mut var = vec![0.0; width];
                for r in 0..rows {
                    for c in 0..width {
                        mean[c] += z[r * width + c];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                for r in 0..rows {
                    for c in 0..width {
                        let d = z[r * width + c] - mean[c];
                        var[c] += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.bn_eps).sqrt()).collect();
                let mut xhat = vec![0.0; rows * width];
                let mut u = vec![0.0; rows * width];
                for r in 0..rows {
                    for c in 0..width {
                        let k = r * width + c;
                        xhat[k] = (z[k] - mean[c]) * inv[c];
                        u[k] = g[c] * xhat[k] + be[c];
                    }
                }
                cache.xhat.push(xhat);
                cache.inv_std.push(inv);
                cache.batch_mean.push(mean);
                cache.batch_var.push(var);
                u
            } else {
                z
            };
            a = u.iter().map(|v| v.max(0.0)).collect();
            cache.pre_relu.push(u);
        }
        unreachable!("network has an output layer")
    }

    /// Mean cross-entropy of a batch and its gradient with respect to every
    /// parameter, with batch norm using the batch statistics.
    pub fn loss_and_grad(&self, x: &[f64], targets: &[usize]) -> (f64, Vec<f64>) {
        let (loss, grad, _) = self.loss_grad_cache(x, targets);
        (loss, grad)
    }

    fn loss_grad_cache(&self, x: &[f64], targets: &[usize]) -> (f64, Vec<f64>, Cache) {
        let rows = targets.len();
        let (logits, cache) = self.forward_train(x, rows);
        let k = self.classes.len();
        let mut loss = 0.0;
        let mut dz = vec![0.0; rows * k];
        for r in 0..rows {
            let p = softmax(&logits[r * k..(r + 1) * k]);
            loss -= p[targets[r]].max(f64::MIN_POSITIVE).ln();
            for c in 0..k {
                dz[r * k + c] = (p[c] - if c == targets[r] { 1.0 } else { 0.0 }) / rows as f64;
            }
        }
        loss /= rows as f64;

        let mut grad = self.params.zeros_like();
        let n_layers = self.layers.len();
        for l in (0..n_layers).rev() {
            let (i_dim, o_dim) = (self.widths[l], self.widths[l + 1]);
            if l + 1 < n_layers {
                // dz currently holds the gradient w.r.t. this layer's ReLU output.
                let u = &cache.pre_relu[l];
                for (d, v) in dz.iter_mut().zip(u) {
                    if *v <= 0.0 {
                        *d = 0.0;
                    }
                }
                if let Some((gi, bi)) = self.layers[l].bn {
                    let g = self.params.tensor(gi).to_vec();
                    let xhat = &cache.xhat[l];
                    let inv = &cache.inv_std[l];
                    let go = self.params.specs()[gi].offset;
                    let bo = self.params.specs()[bi].offset;
                    let mut sum_dxh = vec![0.0; o_dim];
                    let mut sum_dxh_xh = vec![0.0; o_dim];
                    for r in 0..rows {
                        for c in 0..o_dim {
                            let kk = r * o_dim + c;
                            grad[go + c] += dz[kk] * xhat[kk];
                            grad[bo + c] += dz[kk];
                            let dxh = dz[kk] * g[c];
                            sum_dxh[c] += dxh;
                            sum_dxh_xh[c] += dxh * xhat[kk];
                        }
                    }
                    let n = rows as f64;
                    for r in 0..rows {
                        for c in 0..o_dim {
                            let kk = r * o_dim + c;
                            let dxh = dz[kk] * g[c];
                            dz[kk] = inv[c] / n * (n * dxh - sum_dxh[c] - xhat[kk] * sum_dxh_xh[c]);
                        }
                    }
                }
            }
            let a = &cache.inputs[l];
            let w = self.params.tensor(self.layers[l].w);
            let wo = self.params.specs()[self.layers[l].w].offset;
            let bo = self.params.specs()[self.layers[l].b].offset;
            let mut da = vec![0.0; rows * i_dim];
            for r in 0..rows {
                let ar = &a[r * i_dim..(r + 1) * i_dim];
                for o in 0..o_dim {
                    let d = dz[r * o_dim + o];
                    if d == 0.0 {
                        continue;
                    }
                    grad[bo + o] += d;
                    let gw = &mut grad[wo + o * i_dim..wo + (o + 1) * i_dim];
                    for (gv, av) in gw.iter_mut().zip(ar) {
                        *gv += d * av;
                    }
                    let dr = &mut da[r * i_dim..(r + 1) * i_dim];
                    for (dv, wv) in dr.iter_mut().zip(&w[o * i_dim..(o + 1) * i_dim]) {
                        *dv += d * wv;
                    }
                }
            }
            dz = da;
        }
        (loss, grad, cache)
    }

    /// Inference-mode logits, batch norm using the running statistics.
    pub fn logits(&self, point: &[f64]) -> Result<Vec<f64>> {
        if point.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: point.len(),
            });
        }
        let n_layers = self.layers.len();
        let mut a = point.to_vec();
        for l in 0..n_layers {
            let mut z = self.linear(l, &a, 1);
            if l + 1 == n_layers {
                return Ok(z);
            }
            if let Some((gi, bi)) = self.layers[l].bn {
                let (g, be) = (self.params.tensor(gi), self.params.tensor(bi));
                for (c, v) in z.iter_mut().enumerate() {
                    let xhat = (*v - self.running_mean[l][c]) / (self.running_var[l][c] + self.bn_eps).sqrt();
                    *v = g[c] * xhat + be[c];
                }
            }
            a = z.into_iter().map(|v| v.max(0.0)).collect();
        }
        unreachable!("network has an output layer")
    }

    pub fn predict_proba(&self, point: &[f64]) -> Result<PredictiveDistribution> {
        let logits = self.logits(point)?;
        PredictiveDistribution::new(self.classes.clone(), softmax(&logits))
    }

    /// Mean cross-entropy over a labelled set in inference mode.
    pub fn eval_loss(&self, points: &[Vec<f64>], labels: &[ClassLabel]) -> Result<f64> {
        let mut total = 0.0;
        for (p, l) in points.iter().zip(labels) {
            total -= self.predict_proba(p)?.prob_of(*l).max(f64::MIN_POSITIVE).ln();
        }
        Ok(total / points.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut store = self.params.clone();
        for (l, (m, v)) in self.running_mean.iter().zip(&self.running_var).enumerate() {
            let i = store.add(format!("l{l}.running_mean"), &[m.len()]);
            store.tensor_mut(i).copy_from_slice(m);
            let i = store.add(format!("l{l}.running_var"), &[v.len()]);
            store.tensor_mut(i).copy_from_slice(v);
        }
        let header = CheckpointHeader {
            kind: "nn".into(),
            classes: self.classes.clone(),
            widths: self.widths.clone(),
            batch_norm: self.batch_norm,
            bn_eps: self.bn_eps,
            bn_momentum: self.bn_momentum,
        };
        store.save(path, &header)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, store) = ParamStore::load(path)?;
        let h: CheckpointHeader = serde_json::from_value(header)?;
        let (mut params, layers) = Self::layout(&h.widths, h.batch_norm);
        for i in 0..params.specs().len() {
            let name = params.specs()[i].name.clone();
            let src = store.by_name(&name).ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                reason: format!("missing tensor {name}"),
            })?;
            params.tensor_mut(i).copy_from_slice(src);
        }
        let hidden = h.widths.len() - 2;
        let stat = |kind: &str| -> Result<Vec<Vec<f64>>> {
            (0..hidden)
                .map(|l| {
                    store.by_name(&format!("l{l}.{kind}")).map(<[f64]>::to_vec).ok_or_else(|| Error::Format {
                        path: path.display().to_string(),
                        reason: format!("missing l{l}.{kind}"),
                    })
                })
                .collect()
        };
        Ok(NnModel {
            classes: h.classes,
            batch_norm: h.batch_norm,
            bn_eps: h.bn_eps,
            bn_momentum: h.bn_momentum,
            params,
            running_mean: stat("running_mean")?,
            running_var: stat("running_var")?,
            loss_trace: Vec::new(),
            train_loss: Vec::new(),
            layers,
            widths: h.widths,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    classes: Vec<ClassLabel>,
    widths: Vec<usize>,
    batch_norm: bool,
    bn_eps: f64,
    bn_momentum: f64,
}

pub fn nn_train(points: &[Vec<f64>], labels: &[ClassLabel], config: &NnConfig, seed: u64) -> Result<NnModel> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(Error::invalid("network training needs one label per point and at least one point"));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("training points of unequal dimension"));
    }
    let mut classes = labels.to_vec();
    classes.sort();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::SingleClass(classes.len()));
    }
    let targets: Vec<usize> = labels.iter().map(|l| classes.iter().position(|c| c == l).unwrap()).collect();
    let mut model = NnModel::init(classes, dim, config, seed);
    let mut opt = Adam::new(config.adam, model.params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_ba7c);
    let mut order: Vec<usize> = (0..points.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() == 1 && config.batch_norm {
                log::debug!("epoch {epoch}: skipping a batch of one under batch norm");
                continue;
            }
            let x: Vec<f64> = chunk.iter().flat_map(|&i| points[i].iter().copied()).collect();
            let t: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let (loss, grad, cache) = model.loss_grad_cache(&x, &t);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss,
                    norms: model.params.norms(),
                });
            }
            opt.step(model.params.as_mut_slice(), &grad);
            let m = model.bn_momentum;
            for (l, (bm, bv)) in cache.batch_mean.iter().zip(&cache.batch_var).enumerate() {
                for c in 0..bm.len() {
                    model.running_mean[l][c] = m * model.running_mean[l][c] + (1.0 - m) * bm[c];
                    model.running_var[l][c] = m * model.running_var[l][c] + (1.0 - m) * bv[c];
                }
            }
            sum += loss * chunk.len() as f64;
            count += chunk.len();
        }
        if count > 0 {
            model.loss_trace.push(sum / count as f64);
        }
        let full = model.eval_loss(points, labels)?;
        model.train_loss.push(full);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};
    use ClassLabel::*;

    fn blobs(centers: &[(f64, f64, ClassLabel)], per: usize, sd: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<ClassLabel>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, sd).unwrap();
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..per {
            for &(x, y, l) in centers {
                pts.push(vec![x + n.sample(&mut rng), y + n.sample(&mut rng)]);
                labels.push(l);
            }
        }
        (pts, labels)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let config = NnConfig {
            hidden: vec![4],
            ..NnConfig::default()
        };
        let mut model = NnModel::init(vec![LeftDriveBy, RightDriveBy, CutIn], 2, &config, 3);
        // Move batch-norm parameters off their identity values.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for v in model.params.as_mut_slice() {
            *v += rng.random_range(-0.3..0.3);
        }
        let x = [0.3, -1.2, 1.1, 0.4, -0.7, 0.9, 0.2, 0.05];
        let t = [0, 2, 1, 2];
        let (_, grad) = model.loss_and_grad(&x, &t);
        let h = 1e-5;
        let mut worst = 0.0f64;
        for k in 0..model.params.len() {
            let orig = model.params.as_slice()[k];
            model.params.as_mut_slice()[k] = orig + h;
            let (lp, _) = model.loss_and_grad(&x, &t);
            model.params.as_mut_slice()[k] = orig - h;
            let (lm, _) = model.loss_and_grad(&x, &t);
            model.params.as_mut_slice()[k] = orig;
            let num = (lp - lm) / (2.0 * h);
            let rel = (num - grad[k]).abs() / (num.abs() + grad[k].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn zero_final_layer_is_uniform() {
        let mut model = NnModel::init(vec![LeftDriveBy, RightDriveBy, CutIn], 2, &NnConfig::default(), 0);
        let last = model.layers.len() - 1;
        let (w, b) = (model.layers[last].w, model.layers[last].b);
        model.params.tensor_mut(w).fill(0.0);
        model.params.tensor_mut(b).fill(0.0);
        let p = model.predict_proba(&[3.0, -2.0]).unwrap();
        assert!(p.probs.iter().all(|v| *v == 1.0 / 3.0));
    }

    #[test]
    fn zero_epochs_leaves_initialization() {
        let (pts, labels) = blobs(&[(-2.0, 0.0, LeftDriveBy), (2.0, 0.0, RightDriveBy)], 10, 0.3, 0);
        let config = NnConfig {
            epochs: 0,
            ..NnConfig::default()
        };
        let trained = nn_train(&pts, &labels, &config, 9).unwrap();
        let init = NnModel::init(vec![LeftDriveBy, RightDriveBy], 2, &config, 9);
        assert_eq!(trained, init);
        let p = trained.predict_proba(&pts[0]).unwrap();
        assert!((p.probs.iter().sum::<f64>() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (pts, labels) = blobs(&[(-2.0, 0.0, LeftDriveBy), (2.0, 0.0, RightDriveBy)], 50, 0.5, 1);
        let config = NnConfig {
            epochs: 200,
            ..NnConfig::default()
        };
        let model = nn_train(&pts, &labels, &config, 1).unwrap();
        let correct = pts
            .iter()
            .zip(&labels)
            .filter(|(p, l)| model.predict_proba(p).unwrap().argmax() == **l)
            .count();
        assert!(correct as f64 / pts.len() as f64 >= 0.99);
    }

    #[test]
    fn three_blob_centres_and_loss_windows() {
        let centers = [(-3.0, 0.0, LeftDriveBy), (3.0, 0.0, RightDriveBy), (0.0, 4.0, CutIn)];
        let (pts, labels) = blobs(&centers, 20, 0.8, 2);
        let config = NnConfig {
            batch_size: pts.len(),
            ..NnConfig::default()
        };
        let model = nn_train(&pts, &labels, &config, 2).unwrap();
        for &(x, y, l) in &centers {
            let p = model.predict_proba(&[x, y]).unwrap();
            assert_eq!(p.argmax(), l);
            assert_eq!(p, model.predict_proba(&[x, y]).unwrap());
        }
        let trace = &model.train_loss;
        for w in 0..trace.len().saturating_sub(20) {
            assert!(trace[w + 20] < trace[w], "loss rose over epochs {w}..{}", w + 20);
        }
    }

    #[test]
    fn retraining_is_reproducible() {
        let (pts, labels) = blobs(&[(-1.0, 0.0, LeftDriveBy), (1.0, 0.0, RightDriveBy)], 9, 0.5, 3);
        let config = NnConfig {
            epochs: 20,
            ..NnConfig::default()
        };
        assert_eq!(nn_train(&pts, &labels, &config, 5).unwrap(), nn_train(&pts, &labels, &config, 5).unwrap());
    }

    #[test]
    fn checkpoint_round_trip() {
        let (pts, labels) = blobs(&[(-1.0, 0.0, LeftDriveBy), (1.0, 0.0, CutIn)], 9, 0.5, 3);
        let config = NnConfig {
            epochs: 5,
            ..NnConfig::vrae_variant()
        };
        let model = nn_train(&pts, &labels, &config, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nn.ckpt");
        model.save(&path).unwrap();
        let back = NnModel::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.predict_proba(&pts[3]).unwrap(), model.predict_proba(&pts[3]).unwrap());
    }
}
