//! AdamW training loop and evaluation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sbanet_autograd::GradTape;

use crate::data::Sample;
use crate::error::{config_err, CoreError, Result};
use crate::metrics::{aggregate, MetricsReport, THRESHOLDS};
use crate::model::{ce_loss, predict_mask, Model};
use crate::params::{Ctx, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { lr: 5e-4, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments per registered parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub hyper: AdamW,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(hyper: AdamW, store: &ParamStore) -> Self {
        let zeros = || store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { hyper, m: zeros(), v: zeros(), step: 0 }
    }
}

/// One decoupled-weight-decay Adam update, in registry order.
/// `grads[i]` is the gradient of parameter `i`.
pub fn adamw_step(store: &mut ParamStore, grads: &[Option<Vec<f64>>], st: &mut OptimState) -> Result<()> {
    if grads.len() != store.len() || st.m.len() != store.len() {
        return Err(CoreError::Contract(format!(
            "{} gradients and {} moment buffers for {} parameters",
            grads.len(),
            st.m.len(),
            store.len()
        )));
    }
    for (i, (name, t)) in store.iter().enumerate() {
        match &grads[i] {
            None => return Err(CoreError::Contract(format!("missing gradient for parameter {name}"))),
            Some(g) if g.len() != t.len() => {
                return Err(CoreError::Contract(format!("gradient for {name} has {} values, expected {}", g.len(), t.len())))
            }
            _ => {}
        }
    }
    st.step += 1;
    let h = st.hyper;
    let bc1 = 1.0 - h.beta1.powi(st.step as i32);
    let bc2 = 1.0 - h.beta2.powi(st.step as i32);
    let decay = 1.0 - h.lr * h.weight_decay;
    for (i, (_, t)) in store.iter_mut().enumerate() {
        let g = grads[i].as_deref().expect("checked above");
        let (m, v) = (&mut st.m[i], &mut st.v[i]);
        for (j, w) in t.values_mut().iter_mut().enumerate() {
            *w *= decay;
            m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * g[j];
            v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *w -= h.lr * mh / (vh.sqrt() + h.eps);
        }
    }
    Ok(())
}

/// Loss, logits and per-parameter gradients for one sample.
pub struct SampleGrad {
    pub loss: f64,
    pub logits: Vec<f64>,
    pub grads: Vec<Vec<f64>>,
}

fn check_geometry(model: &Model, s: &Sample) -> Result<()> {
    let side = model.cfg.image_size;
    if s.height != side || s.width != side {
        return config_err(format!("sample {} is {}×{}, model expects {side}×{side}", s.id, s.height, s.width));
    }
    Ok(())
}

pub fn sample_grad(model: &Model, store: &ParamStore, s: &Sample) -> Result<SampleGrad> {
    check_geometry(model, s)?;
    let tape = GradTape::with_seed(model.cfg.seed);
    let ctx = Ctx::bind(&tape, store);
    let logits = model.forward(&ctx, &s.image(), &s.ids(), s.valid)?;
    let loss = ce_loss(logits, &s.mask)?;
    let value = loss.item();
    let g = tape.backward(loss)?;
    let grads = ctx.vars().iter().map(|v| g.wrt(*v).expect("bound parameter").to_vec()).collect();
    Ok(SampleGrad { loss: value, logits: logits.to_vec(), grads })
}

/// Inference logits `[H·W × 2]` for one sample.
pub fn infer(model: &Model, store: &ParamStore, s: &Sample) -> Result<Vec<f64>> {
    check_geometry(model, s)?;
    let tape = GradTape::with_seed(model.cfg.seed);
    let ctx = Ctx::frozen(&tape, store);
    Ok(model.forward(&ctx, &s.image(), &s.ids(), s.valid)?.to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub optim: AdamW,
    /// Shuffling seed.
    pub seed: u64,
    /// Stop after this many updates even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self { epochs: 1, batch: 4, optim: AdamW::default(), seed: 0, max_steps: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Mean IoU of the predictions made during the epoch's forward passes.
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub wall_time_s: f64,
    pub seed: u64,
    pub config_hash: String,
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{},{l}\n", i + 1));
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,loss,miou\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.miou));
        }
        s
    }
}

/// Epoch order: a permutation derived from `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Mini-batch AdamW with a constant learning rate. Gradients are averaged
/// over the batch, summed in batch order.
pub fn train(model: &Model, store: &mut ParamStore, data: &[Sample], opts: &TrainOptions) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(CoreError::Contract("training set is empty".into()));
    }
    if opts.batch == 0 {
        return config_err("batch size must be positive");
    }
    let start = Instant::now();
    let mut st = OptimState::new(opts.optim, store);
    let mut log = TrainLog {
        losses: Vec::new(),
        epochs: Vec::new(),
        wall_time_s: 0.0,
        seed: opts.seed,
        config_hash: model.cfg.hash(),
    };
    'outer: for epoch in 0..opts.epochs {
        let order = epoch_order(data.len(), opts.seed, epoch);
        let (mut epoch_loss, mut steps) = (0.0, 0usize);
        let mut preds: Vec<(Vec<u8>, &[u8])> = Vec::with_capacity(data.len());
        for batch in order.chunks(opts.batch) {
            if opts.max_steps.is_some_and(|m| log.losses.len() >= m) {
                break;
            }
            let mut sum: Vec<Vec<f64>> = store.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
            let mut loss = 0.0;
            for &i in batch {
                let sg = sample_grad(model, store, &data[i])?;
                loss += sg.loss;
                for (acc, g) in sum.iter_mut().zip(&sg.grads) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                preds.push((predict_mask(&sg.logits), &data[i].mask));
            }
            let k = batch.len() as f64;
            loss /= k;
            if !loss.is_finite() {
                let ids: Vec<u32> = batch.iter().map(|&i| data[i].id).collect();
                return Err(CoreError::Numeric(format!(
                    "non-finite loss {loss} at step {} (epoch {epoch}, samples {ids:?})",
                    log.losses.len() + 1
                )));
            }
            let grads: Vec<Option<Vec<f64>>> =
                sum.into_iter().map(|mut g| {
                    g.iter_mut().for_each(|v| *v /= k);
                    Some(g)
                }).collect();
            adamw_step(store, &grads, &mut st)?;
            log.losses.push(loss);
            epoch_loss += loss;
            steps += 1;
        }
        if steps > 0 {
            let miou = aggregate(&preds, &THRESHOLDS)?.miou;
            log.epochs.push(EpochRecord { epoch: epoch + 1, loss: epoch_loss / steps as f64, miou });
        }
        if opts.max_steps.is_some_and(|m| log.losses.len() >= m) {
            break 'outer;
        }
    }
    log.wall_time_s = start.elapsed().as_secs_f64();
    Ok(log)
}

/// Metrics of `logits_for` over `data`, in dataset order.
pub fn evaluate_with(data: &[Sample], mut logits_for: impl FnMut(&Sample) -> Result<Vec<f64>>) -> Result<MetricsReport> {
    let mut pairs = Vec::with_capacity(data.len());
    for s in data {
        pairs.push((predict_mask(&logits_for(s)?), s.mask.as_slice()));
    }
    aggregate(&pairs, &THRESHOLDS)
}

pub fn evaluate(model: &Model, store: &ParamStore, data: &[Sample]) -> Result<MetricsReport> {
    evaluate_with(data, |s| infer(model, store, s))
}
