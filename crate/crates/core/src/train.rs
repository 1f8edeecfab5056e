//! Desk-scale trainer: decoupled-weight-decay Adam, linear warmup followed by
//! a periodic cosine schedule, and windowed hard-Dice evaluation.

use indexmap::IndexMap;
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Ctx, Tape};
use crate::error::{Error, Result};
use crate::loss::{foreground_dice, hard_dice, total_loss, LabelVolume, LossParts};
use crate::model::LightMedSeg;
use crate::params::ParamStore;
use crate::phantom::Phantom;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub warmup_epochs: usize,
    pub period_epochs: usize,
    pub lr_floor: f64,
    /// Epochs per evaluation window.
    pub eval_every: usize,
    /// Stop at the end of a window once mean foreground Dice reaches this.
    pub target_dice: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 1,
            lr: 2e-4,
            weight_decay: 1e-5,
            betas: (0.9, 0.999),
            eps: 1e-8,
            warmup_epochs: 5,
            period_epochs: 100,
            lr_floor: 1e-9,
            eval_every: 10,
            target_dice: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if self.epochs == 0 || self.batch_size == 0 || self.period_epochs == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs, batch size, period and eval window must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0 && self.lr_floor >= 0.0) {
            return Err(Error::Config("learning rate, decay and floor must be non-negative, eps positive".into()));
        }
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("betas {:?} must lie in [0, 1)", self.betas)));
        }
        Ok(())
    }
}

/// Learning rate as a function of the global step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup_steps: usize,
    pub period_steps: usize,
}

impl Schedule {
    pub fn new(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        Self {
            peak: cfg.lr,
            floor: cfg.lr_floor.min(cfg.lr),
            warmup_steps: cfg.warmup_epochs * steps_per_epoch,
            period_steps: cfg.period_epochs * steps_per_epoch,
        }
    }

    /// Linear from 0 over the warmup, then cosine from `peak` towards `floor`
    /// restarting every period.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let t = ((step - self.warmup_steps) % self.period_steps) as f64 / self.period_steps as f64;
        self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with decoupled weight decay: decay is applied to the parameter before
/// the moment update, as in the reference deep-learning libraries.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    state: IndexMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            beta1: cfg.betas.0,
            beta2: cfg.betas.1,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            state: IndexMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &IndexMap<String, Tensor<f32>>, lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, g) in grads {
            if !store.get(name).is_some_and(|p| p.trainable) {
                continue;
            }
            let data = store.data_mut(name)?;
            if data.len() != g.numel() {
                return Err(Error::shape("adamw", format!("gradient for `{name}` has the wrong size")));
            }
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; data.len()],
                v: vec![0.0; data.len()],
            });
            for (((p, &gi), m), v) in data.iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                let gi = gi as f64;
                let mut x = *p as f64;
                x -= lr * self.weight_decay * x;
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                let mhat = *m / c1;
                let vhat = *v / c2;
                x -= lr * mhat / (vhat.sqrt() + self.eps);
                *p = x as f32;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate used by the epoch's last step.
    pub lr: f64,
    pub loss: LossParts,
    /// Mean foreground hard Dice, present at window ends.
    pub dice: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub final_dice: Option<f64>,
    pub stopped_early: bool,
}

impl TrainLog {
    /// Mean total loss over consecutive windows of `size` epochs (a trailing
    /// partial window is included).
    pub fn window_means(&self, size: usize) -> Vec<f64> {
        self.epochs
            .chunks(size.max(1))
            .map(|w| w.iter().map(|e| e.loss.total).sum::<f64>() / w.len() as f64)
            .collect()
    }
}

/// Mean foreground hard Dice and per-class Dice over every sample.
pub fn evaluate(model: &LightMedSeg, store: &ParamStore<f32>, data: &[Phantom]) -> Result<(f64, Vec<f64>)> {
    let mut per_class = vec![0.0; model.config.num_classes];
    let mut fg = 0.0;
    for p in data {
        let pred = model.predict(store, &p.volume)?;
        let d = hard_dice(&pred, &p.labels)?;
        fg += foreground_dice(&d);
        for (a, b) in per_class.iter_mut().zip(&d) {
            *a += b;
        }
    }
    let n = data.len().max(1) as f64;
    per_class.iter_mut().for_each(|v| *v /= n);
    Ok((fg / n, per_class))
}

pub struct Trainer<'m> {
    pub model: &'m LightMedSeg,
    pub store: ParamStore<f32>,
    pub config: TrainConfig,
    pub optimizer: AdamW,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m LightMedSeg, store: ParamStore<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.check_store(&store)?;
        Ok(Self {
            model,
            store,
            optimizer: AdamW::new(&config),
            config,
        })
    }

    /// One forward/backward/update on a batch; returns the loss components.
    pub fn step(&mut self, volume: &Tensor<f32>, labels: &LabelVolume, lr: f64, epoch: usize) -> Result<LossParts> {
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &self.store);
        let out = self.model.forward(cx, tape.constant(volume.clone()))?;
        let (loss, parts) = total_loss(out.logits, labels)?;
        if !parts.total.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step: self.optimizer.steps() as usize,
                detail: format!("non-finite loss {parts:?}"),
            });
        }
        let grads = tape.backward(loss)?.into_named();
        drop(tape);
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                step: self.optimizer.steps() as usize,
                detail: format!("non-finite gradient for `{name}`"),
            });
        }
        self.optimizer.update(&mut self.store, &grads, lr)?;
        Ok(parts)
    }

    pub fn train(&mut self, data: &[Phantom]) -> Result<TrainLog> {
        if data.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let cfg = self.config.clone();
        let batches = data.len().div_ceil(cfg.batch_size);
        let schedule = Schedule::new(&cfg, batches);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut log = TrainLog::default();
        let mut global = 0usize;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut sum = LossParts::default();
            let mut lr = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let vols: Vec<&Tensor<f32>> = chunk.iter().map(|&i| &data[i].volume).collect();
                let labs: Vec<&LabelVolume> = chunk.iter().map(|&i| &data[i].labels).collect();
                let x = Tensor::stack_batch(&vols)?;
                let y = LabelVolume::stack(&labs)?;
                lr = schedule.lr(global);
                let p = self.step(&x, &y, lr, epoch)?;
                sum.dice += p.dice;
                sum.ce += p.ce;
                sum.boundary += p.boundary;
                sum.total += p.total;
                global += 1;
            }
            let k = batches as f64;
            let loss = LossParts {
                dice: sum.dice / k,
                ce: sum.ce / k,
                boundary: sum.boundary / k,
                total: sum.total / k,
            };
            let window_end = (epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs;
            let dice = if window_end {
                Some(evaluate(self.model, &self.store, data)?.0)
            } else {
                None
            };
            info!(
                "epoch {:>4} lr {:.3e} loss {:.5} (dice {:.4} ce {:.4} bdry {:.4}){}",
                epoch + 1,
                lr,
                loss.total,
                loss.dice,
                loss.ce,
                loss.boundary,
                dice.map(|d| format!(" fg-dice {d:.4}")).unwrap_or_default()
            );
            log.epochs.push(EpochLog {
                epoch: epoch + 1,
                lr,
                loss,
                dice,
            });
            if let Some(d) = dice {
                log.final_dice = Some(d);
                if cfg.target_dice.is_some_and(|t| d >= t) {
                    log.stopped_early = epoch + 1 < cfg.epochs;
                    break;
                }
            }
        }
        Ok(log)
    }
}
