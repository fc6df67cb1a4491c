//! Training with the paired classification discrepancy loss, evaluation,
//! shift-consistency measurement, and forward-latency benchmarking.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::blocks::DualHeadOut;
use crate::data::{labels, to_input, PlateSample};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::Sgd;
use crate::rng::{derive_seed_indexed, seeded_rng};
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const CE_EPS: f64 = 1e-9;

#[derive(Clone, Debug, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Coupled L2 penalty applied inside the SGD step.
    pub weight_decay: f64,
    /// The last `cooldown_epochs` epochs run with momentum 0 so the weights
    /// settle instead of orbiting the minimum. Clamped to `epochs`.
    pub cooldown_epochs: usize,
    /// Weight of the subtracted L1 head-discrepancy term.
    pub lambda_d: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 5,
            lr: 1e-3,
            momentum: 0.9,
            weight_decay: 1e-3,
            cooldown_epochs: 20,
            lambda_d: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.lambda_d < 0.0 {
            return Err(Error::Config(format!("lambda_d must be >= 0, got {}", self.lambda_d)));
        }
        // lr/momentum/decay ranges are the optimizer's contract.
        Sgd::<f64>::new(self.lr, self.momentum, self.weight_decay).map(|_| ())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy over the epoch's own training batches (train-mode forward).
    pub train_accuracy_pct: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Metrics {
    pub accuracy_pct: f64,
    /// Per true class; `None` when the class has no samples.
    pub per_class_accuracy_pct: Vec<Option<f64>>,
    /// `confusion[actual][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    /// Mean L1 distance between the two head probability rows.
    pub mean_discrepancy: f64,
    pub evaluated: usize,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LatencyReport {
    pub median_ms_per_sample: f64,
    pub p90_ms_per_sample: f64,
    pub batch_size: usize,
    pub warmup: usize,
    pub reps: usize,
    pub env: String,
}

/// One-hot rows for a label vector.
pub fn one_hot<S: Scalar>(y: &[usize], classes: usize) -> Tensor<S> {
    Tensor::from_fn(&[y.len(), classes], |i| {
        if y[i / classes] == i % classes {
            S::one()
        } else {
            S::zero()
        }
    })
}

/// Row argmax with ties broken toward the lower class index.
fn argmax_row<S: Scalar>(rows: &[S], row: usize, k: usize) -> usize {
    let r = &rows[row * k..(row + 1) * k];
    let mut best = 0;
    for (i, v) in r.iter().enumerate() {
        if v.tof() > r[best].tof() {
            best = i;
        }
    }
    best
}

fn mean_ce<S: Scalar>(tape: &mut Tape<S>, p: NodeId, y: NodeId, n: f64) -> Result<NodeId> {
    let lp = tape.ln_clamped(p, CE_EPS);
    let picked = tape.mul(lp, y)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0 / n))
}

/// `L = CE(agg,y) + CE(p1,y)/2 + CE(p2,y)/2 - lambda_d * mean ||p1 - p2||_1`,
/// recorded on the tape so it is differentiable end to end. `y` is a one-hot
/// leaf of the same shape as the probability rows.
pub fn discrepancy_loss<S: Scalar>(
    tape: &mut Tape<S>,
    head: &DualHeadOut,
    y: NodeId,
    lambda_d: f64,
) -> Result<NodeId> {
    if lambda_d < 0.0 {
        return Err(Error::Config(format!("lambda_d must be >= 0, got {lambda_d}")));
    }
    let n = tape.value(head.agg).shape()[0] as f64;
    let ce_agg = mean_ce(tape, head.agg, y, n)?;
    let ce1 = mean_ce(tape, head.p1, y, n)?;
    let ce2 = mean_ce(tape, head.p2, y, n)?;
    let ce_heads = tape.add(ce1, ce2)?;
    let ce_heads = tape.scale(ce_heads, 0.5);
    let supervised = tape.add(ce_agg, ce_heads)?;
    if lambda_d == 0.0 {
        return Ok(supervised);
    }
    let diff = tape.sub(head.p1, head.p2)?;
    let diff = tape.abs(diff);
    let total_l1 = tape.sum_all(diff);
    let weighted = tape.scale(total_l1, lambda_d / n);
    tape.sub(supervised, weighted)
}

/// SGD training over shuffled mini-batches. Deterministic given the graph's
/// init seed and `cfg.seed`; aborts with context if the loss leaves the
/// finite range.
pub fn train<S: Scalar>(
    graph: &mut Graph<S>,
    samples: &[PlateSample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let classes = graph
        .classes()
        .ok_or_else(|| Error::Graph("training requires a network ending in a dual head".into()))?;
    if samples.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.label.class_index() >= classes) {
        return Err(Error::Config(format!(
            "label {} exceeds the network's {classes} classes",
            s.label.class_index()
        )));
    }

    let mut opt: Sgd<S> = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay)?;
    let cool_start = cfg.epochs.saturating_sub(cfg.cooldown_epochs);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if epoch == cool_start && cfg.momentum != 0.0 && cfg.cooldown_epochs > 0 {
            opt = Sgd::new(cfg.lr, 0.0, cfg.weight_decay)?;
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut seeded_rng(derive_seed_indexed(cfg.seed, "shuffle", epoch as u64)));

        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut correct = 0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PlateSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let x = to_input::<S>(&batch)?;
            let y = labels(&batch);
            let mut pass = graph.forward_train(&x)?;
            let head = pass.head.expect("dual head presence checked above");
            let y_node = pass.tape.leaf(one_hot(&y, classes));
            let loss = discrepancy_loss(&mut pass.tape, &head, y_node, cfg.lambda_d)?;
            let loss_val = pass.tape.value(loss).data()[0].tof();
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss diverged to {loss_val} at epoch {epoch}, batch {batch_idx}"
                )));
            }
            let agg = pass.tape.value(head.agg).data();
            correct += y.iter().enumerate().filter(|&(i, &label)| argmax_row(agg, i, classes) == label).count();

            pass.tape.backward(loss)?;
            graph.take_grads(&pass);
            let mut params = graph.params_mut();
            opt.step(&mut params).map_err(|e| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("{msg} at epoch {epoch}, batch {batch_idx}"))
                }
                other => other,
            })?;
            loss_sum += loss_val;
            batches += 1;
        }
        history.push(EpochStats {
            epoch,
            mean_loss: loss_sum / batches as f64,
            train_accuracy_pct: 100.0 * correct as f64 / samples.len() as f64,
        });
    }
    Ok(history)
}

/// Eval-mode metrics over a sample set. Never mutates the graph.
pub fn evaluate<S: Scalar>(graph: &Graph<S>, samples: &[PlateSample]) -> Result<Metrics> {
    let classes = graph
        .classes()
        .ok_or_else(|| Error::Graph("evaluation requires a network ending in a dual head".into()))?;
    if samples.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut discrepancy_sum = 0.0;
    for chunk in samples.chunks(64) {
        let batch: Vec<&PlateSample> = chunk.iter().collect();
        let x = to_input::<S>(&batch)?;
        let pass = graph.forward_eval(&x)?;
        let head = pass.head.expect("dual head presence checked above");
        let agg = pass.tape.value(head.agg).data();
        let p1 = pass.tape.value(head.p1).data();
        let p2 = pass.tape.value(head.p2).data();
        for (i, s) in batch.iter().enumerate() {
            let pred = argmax_row(agg, i, classes);
            confusion[s.label.class_index()][pred] += 1;
            discrepancy_sum += p1[i * classes..(i + 1) * classes]
                .iter()
                .zip(&p2[i * classes..(i + 1) * classes])
                .map(|(&a, &b)| (a.tof() - b.tof()).abs())
                .sum::<f64>();
        }
    }
    let diag: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let per_class: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| 100.0 * row[c] as f64 / total as f64)
        })
        .collect();
    Ok(Metrics {
        accuracy_pct: 100.0 * diag as f64 / samples.len() as f64,
        per_class_accuracy_pct: per_class,
        confusion,
        mean_discrepancy: discrepancy_sum / samples.len() as f64,
        evaluated: samples.len(),
        warnings: graph.eval_warnings(),
    })
}

/// Fraction of (sample, shift) pairs whose predicted class matches the
/// unshifted prediction, over all circular shifts up to `max_shift` pixels in
/// both axes.
pub fn shift_consistency<S: Scalar>(
    graph: &Graph<S>,
    samples: &[PlateSample],
    max_shift: usize,
) -> Result<f64> {
    if max_shift == 0 {
        return Err(Error::Config("max_shift must be >= 1".into()));
    }
    let classes = graph
        .classes()
        .ok_or_else(|| Error::Graph("shift consistency requires a dual-head network".into()))?;
    if samples.is_empty() {
        return Err(Error::Config("shift consistency needs at least one sample".into()));
    }
    let m = max_shift as isize;
    let mut agree = 0usize;
    let mut total = 0usize;
    for s in samples {
        let mut variants = vec![s.clone()];
        for dy in -m..=m {
            for dx in -m..=m {
                if (dy, dx) != (0, 0) {
                    variants.push(circular_shift(s, dy, dx));
                }
            }
        }
        let refs: Vec<&PlateSample> = variants.iter().collect();
        let x = to_input::<S>(&refs)?;
        let pass = graph.forward_eval(&x)?;
        let head = pass.head.expect("dual head presence checked above");
        let agg = pass.tape.value(head.agg).data();
        let base = argmax_row(agg, 0, classes);
        for i in 1..variants.len() {
            total += 1;
            if argmax_row(agg, i, classes) == base {
                agree += 1;
            }
        }
    }
    Ok(agree as f64 / total as f64)
}

fn circular_shift(s: &PlateSample, dy: isize, dx: isize) -> PlateSample {
    let (h, w) = (s.height as isize, s.width as isize);
    let mut image = vec![0u8; s.image.len()];
    for y in 0..h {
        for x in 0..w {
            let sy = (y - dy).rem_euclid(h) as usize;
            let sx = (x - dx).rem_euclid(w) as usize;
            image[(y * w + x) as usize] = s.image[sy * s.width + sx];
        }
    }
    PlateSample { image, ..s.clone() }
}

/// Forward-only wall-clock timing. Absolute numbers are environment-relative;
/// the report carries a descriptor instead of implying comparability.
pub fn bench_latency<S: Scalar>(
    graph: &Graph<S>,
    batch_size: usize,
    warmup: usize,
    reps: usize,
) -> Result<LatencyReport> {
    if reps == 0 || batch_size == 0 {
        return Err(Error::Config("bench needs reps >= 1 and batch_size >= 1".into()));
    }
    let (c, h, w) = graph.input_shape();
    let x = Tensor::from_fn(&[batch_size, c, h, w], |i| S::fromf((i % 251) as f64 / 251.0));
    for _ in 0..warmup {
        graph.forward_eval(&x)?;
    }
    let mut per_sample_ms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        graph.forward_eval(&x)?;
        per_sample_ms.push(t0.elapsed().as_secs_f64() * 1000.0 / batch_size as f64);
    }
    per_sample_ms.sort_by(|a, b| a.partial_cmp(b).expect("timings are finite"));
    let median = if reps % 2 == 1 {
        per_sample_ms[reps / 2]
    } else {
        (per_sample_ms[reps / 2 - 1] + per_sample_ms[reps / 2]) / 2.0
    };
    let p90 = per_sample_ms[((reps as f64 * 0.9).ceil() as usize).clamp(1, reps) - 1];
    let threads = std::thread::available_parallelism().map(usize::from).unwrap_or(1);
    Ok(LatencyReport {
        median_ms_per_sample: median,
        p90_ms_per_sample: p90,
        batch_size,
        warmup,
        reps,
        env: format!("{}-{}, {} cpus", std::env::consts::OS, std::env::consts::ARCH, threads),
    })
}
