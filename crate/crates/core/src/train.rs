//! Minibatch training with adaptive-moment optimizers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PatchSet;
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::network::{argmax_map, Model};
use crate::params::Forward;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Decoupled weight decay.
    #[default]
    AdamW,
    /// Weight decay folded into the gradient.
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Coefficient of the `Σ‖W‖²` loss term.
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.006,
            optimizer: OptimizerKind::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            lambda: 1e-4,
            batch_size: 4,
            epochs: 60,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::precondition("train", "learning rate must be finite and nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::precondition("train", "betas must lie in [0, 1)"));
        }
        if self.eps <= 0.0 || self.weight_decay < 0.0 || self.lambda < 0.0 {
            return Err(Error::precondition("train", "eps must be positive, decay and lambda nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::precondition("train", "batch size must be positive"));
        }
        Ok(())
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: TrainConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Optimizer {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = model.store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Optimizer {
            cfg: cfg.clone(),
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn update(&mut self, model: &mut Model, grads: &[Tensor]) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (k, entry) in model.store.entries_mut().iter_mut().enumerate() {
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let w = entry.value.data_mut();
            for i in 0..w.len() {
                let mut g = grads[k].data()[i];
                if c.optimizer == OptimizerKind::Adam {
                    g += c.weight_decay * w[i];
                }
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let step = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                let decay = if c.optimizer == OptimizerKind::AdamW {
                    c.weight_decay * w[i]
                } else {
                    0.0
                };
                w[i] -= c.lr * (step + decay);
            }
        }
    }
}

/// One optimization step on `x: [N, B, S, S]`; returns the loss.
pub fn train_step(model: &mut Model, opt: &mut Optimizer, x: &Tensor, labels: &[u8], lambda: f64) -> Result<f64> {
    let (loss, grads, stats) = {
        let mut fw = Forward::new(&model.store, true, true);
        let xv = fw.input(x.clone());
        let logits = model.net.forward(&mut fw, xv)?;
        let loss = model.net.loss(&mut fw, logits, labels, lambda)?;
        let value = fw.graph.value(loss).item();
        if !value.is_finite() {
            let tensor = match fw.graph.first_non_finite() {
                Some((node, op)) => format!("{op} output (node {node})"),
                None => "loss".to_string(),
            };
            return Err(Error::NonFinite { tensor });
        }
        let mut g = fw.graph.backward(loss)?;
        let grads = fw.param_grads(&mut g);
        if let Some(k) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                tensor: format!("gradient of {}", model.store.entries()[k].name),
            });
        }
        (value, grads, fw.take_stat_updates())
    };
    for (id, s) in stats {
        model.store.set_stats(id, s);
    }
    opt.update(model, &grads);
    Ok(loss)
}

/// Eval-mode confusion matrix over the selected patches.
pub fn evaluate_patches(model: &Model, set: &PatchSet, indices: &[usize], batch: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.net.cfg.classes);
    for chunk in indices.chunks(batch.max(1)) {
        let (x, labels) = set.batch(chunk)?;
        let logits = model.predict_logits(&x, chunk.len())?;
        let (c, s) = (logits.dim(1), logits.dim(2));
        let per = c * s * s;
        for (k, lab) in labels.chunks(s * s).enumerate() {
            let scores = Tensor::new(&[c, s, s], logits.data()[k * per..(k + 1) * per].to_vec())?;
            cm.accumulate_slices(&argmax_map(&scores).data, lab)?;
        }
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss.
    pub loss: f64,
    pub val_miou: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the highest validation mIoU.
    pub best: Model,
    pub best_epoch: usize,
    pub best_miou: f64,
    pub trace: Vec<EpochRecord>,
}

pub fn trace_csv(trace: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,loss,val_mIoU\n");
    for r in trace {
        s.push_str(&format!("{},{:.9},{:.6}\n", r.epoch, r.loss, r.val_miou));
    }
    s
}

/// Trains on `train` patches, validating on `val` after every epoch.
pub fn train(
    model: &mut Model,
    set: &PatchSet,
    train: &[usize],
    val: &[usize],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::precondition("train", "training and validation sets must be nonempty"));
    }
    let mut opt = Optimizer::new(model, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = train.to_vec();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best = (model.clone(), 0, f64::NEG_INFINITY);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, labels) = set.batch(chunk)?;
            total += train_step(model, &mut opt, &x, &labels, cfg.lambda)?;
            batches += 1;
        }
        let miou = evaluate_patches(model, set, val, cfg.batch_size)?.compute().miou;
        let rec = EpochRecord {
            epoch,
            loss: total / batches as f64,
            val_miou: miou,
        };
        on_epoch(&rec);
        if miou > best.2 {
            best = (model.clone(), epoch, miou);
        }
        trace.push(rec);
    }
    Ok(TrainOutcome {
        best: best.0,
        best_epoch: best.1,
        best_miou: best.2.max(0.0),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Modules, NetworkConfig};
    use crate::wtbc::{KernelSet, WtbcConfig};

    fn tiny_model(seed: u64) -> Model {
        let cfg = NetworkConfig {
            bands: 3,
            classes: 2,
            widths: [8, 16],
            modules: Modules::default(),
            wtbc: WtbcConfig {
                levels: 1,
                kernels: KernelSet::K3,
                ..WtbcConfig::default()
            },
            ..NetworkConfig::default()
        };
        Model::new(cfg, seed).unwrap()
    }

    fn batch(seed: u64) -> (Tensor, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut rng);
        let labels = (0..128).map(|i| (x.data()[(i / 64) * 192 + i % 64] > 0.0) as u8).collect();
        (x, labels)
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut model = tiny_model(1);
        let before = model.store.entries().to_vec();
        let cfg = TrainConfig {
            lr: 0.0,
            weight_decay: 0.1,
            ..TrainConfig::default()
        };
        let mut opt = Optimizer::new(&model, &cfg);
        let (x, l) = batch(2);
        for _ in 0..3 {
            train_step(&mut model, &mut opt, &x, &l, 1e-4).unwrap();
        }
        assert_eq!(model.store.entries(), &before[..]);
    }

    #[test]
    fn steps_reduce_loss_on_a_fixed_batch() {
        let mut model = tiny_model(3);
        let cfg = TrainConfig::default();
        let mut opt = Optimizer::new(&model, &cfg);
        let (x, l) = batch(4);
        let first = train_step(&mut model, &mut opt, &x, &l, 0.0).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = train_step(&mut model, &mut opt, &x, &l, 0.0).unwrap();
        }
        assert!(last < first, "{first} -> {last}");
        assert_eq!(opt.steps(), 31);
    }

    #[test]
    fn decoupled_and_coupled_decay_differ() {
        let (x, l) = batch(5);
        let run = |kind| {
            let mut model = tiny_model(6);
            let cfg = TrainConfig {
                optimizer: kind,
                weight_decay: 0.5,
                ..TrainConfig::default()
            };
            let mut opt = Optimizer::new(&model, &cfg);
            train_step(&mut model, &mut opt, &x, &l, 0.0).unwrap();
            train_step(&mut model, &mut opt, &x, &l, 0.0).unwrap();
            model.store
        };
        assert_ne!(run(OptimizerKind::Adam), run(OptimizerKind::AdamW));
    }

    #[test]
    fn nan_input_is_reported() {
        let mut model = tiny_model(7);
        let mut opt = Optimizer::new(&model, &TrainConfig::default());
        let (mut x, l) = batch(8);
        x.data_mut()[5] = f64::NAN;
        let err = train_step(&mut model, &mut opt, &x, &l, 0.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }), "{err}");
    }

    #[test]
    fn trace_csv_format() {
        let t = vec![EpochRecord {
            epoch: 1,
            loss: 0.5,
            val_miou: 0.25,
        }];
        assert_eq!(trace_csv(&t), "epoch,loss,val_mIoU\n1,0.500000000,0.250000\n");
    }
}
