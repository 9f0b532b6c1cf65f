//! The optimization loop: vanilla training, KD, linear-region KD and
//! NoiseKD, with SGD + momentum and step learning-rate decay.
//!
//! Randomness is split into independent streams (student init, CE-batch
//! augmentation, region sampling, noise) so that switching a loss term off
//! never shifts the draws seen by the other terms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, st_dif, EpochRecord, RunMetadata, RunReport, RunSummary, REPORT_SCHEMA_VERSION};
use crate::model::{Mlp, MlpSpec};
use crate::objectives::{cross_entropy, kd_loss, kd_loss_split, l2rkd_loss, DistillConfig, LossParts, Method};
use crate::rng::{tag, RandomSource, Rng};
use crate::sampling::{augment, noise_batch, sample_region_batch, sample_region_batch_per_sample, AugmentPolicy};
use crate::tape::Tape;
use crate::tensor::Tensor;

fn default_epochs() -> usize {
    40
}
fn default_batch_size() -> usize {
    64
}
fn default_lr() -> f64 {
    0.05
}
fn default_momentum() -> f64 {
    0.9
}
fn default_decay_epochs() -> Vec<usize> {
    vec![25, 33]
}
fn default_decay_factor() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_decay_epochs")]
    pub lr_decay_epochs: Vec<usize>,
    #[serde(default = "default_decay_factor")]
    pub lr_decay_factor: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub augment: AugmentPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr: default_lr(),
            momentum: default_momentum(),
            lr_decay_epochs: default_decay_epochs(),
            lr_decay_factor: default_decay_factor(),
            seed: 0,
            distill: DistillConfig::default(),
            augment: AugmentPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "lr_decay_epochs must be strictly ascending, got {:?}",
                self.lr_decay_epochs
            )));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::Config(format!(
                "lr_decay_factor must be positive, got {}",
                self.lr_decay_factor
            )));
        }
        self.distill.validate()?;
        self.augment.validate()
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.distill.method = method;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Base rate divided by `factor` once for every decay epoch already reached.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let passed = cfg.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
    cfg.lr / cfg.lr_decay_factor.powi(passed as i32)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub step: u64,
    pub lr: f64,
}

/// Classical momentum: `v ← μ·v + g`, `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Option<Tensor>],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
    }
    if state.velocity.len() != params.len() {
        return Err(Error::Contract("optimizer state does not match parameter count".into()));
    }
    for (i, ((p, g), v)) in params.iter_mut().zip(grads).zip(&mut state.velocity).enumerate() {
        let g = g
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("missing gradient for parameter {i}")))?;
        if g.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::shape("sgd_step", p.shape(), g.shape()));
        }
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    state.step += 1;
    state.lr = lr;
    Ok(())
}

impl Mlp {
    /// Parameter tensors in `w0, b0, w1, b1, …` order.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Region batches to draw at 1-based `step`, so that after `S` steps
/// `floor(S / r)` batches have been drawn.
pub fn region_batches_at(step: u64, r: f64) -> usize {
    let upto = |s: u64| (s as f64 / r + 1e-9).floor() as u64;
    (upto(step) - upto(step.saturating_sub(1))) as usize
}

fn check_compat(net: &Mlp, ds: &Dataset, role: &str) -> Result<()> {
    if net.input_dim() != ds.dim() || net.output_dim() != ds.classes {
        return Err(Error::Shape {
            op: if role == "teacher" {
                "teacher (in, out) vs dataset (dim, classes)"
            } else {
                "student (in, out) vs dataset (dim, classes)"
            },
            left: vec![net.input_dim(), net.output_dim()],
            right: vec![ds.dim(), ds.classes],
        });
    }
    Ok(())
}

pub fn config_hash(cfg: &TrainConfig, student: &MlpSpec, teacher: Option<&MlpSpec>, dataset: &str) -> String {
    let text = serde_json::to_string(&(cfg, student, teacher, dataset)).expect("plain data serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

struct Streams {
    augment: Rng,
    region: Rng,
    noise: Rng,
}

/// Trains a student from scratch. Returns the final parameters and a
/// per-epoch report.
pub fn train(
    teacher: Option<&Mlp>,
    student_spec: &MlpSpec,
    train_ds: &Dataset,
    test_ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Mlp, RunReport)> {
    cfg.validate()?;
    student_spec.validate()?;
    let method = cfg.distill.method;
    let teacher = match (method.needs_teacher(), teacher) {
        (true, Some(t)) => Some(t),
        (true, None) => return Err(Error::Config(format!("method {method} needs a teacher"))),
        (false, Some(_)) => return Err(Error::Config("vanilla training takes no teacher".into())),
        (false, None) => None,
    };
    if train_ds.dim() != test_ds.dim() || train_ds.classes != test_ds.classes {
        return Err(Error::shape(
            "train vs test (dim, classes)",
            &[train_ds.dim(), train_ds.classes],
            &[test_ds.dim(), test_ds.classes],
        ));
    }

    let root = Rng::new(cfg.seed);
    let mut student = Mlp::init(student_spec, root.split(tag("init")).seed())?;
    check_compat(&student, train_ds, "student")?;
    if let Some(t) = teacher {
        check_compat(t, train_ds, "teacher")?;
    }
    let mut streams = Streams {
        augment: root.split(tag("augment")),
        region: root.split(tag("region")),
        noise: root.split(tag("noise")),
    };

    let n = train_ds.len();
    let mut opt = OptimizerState::default();
    let mut step: u64 = 0;
    let mut total_regions: u64 = 0;
    let mut records = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let order = batches(n, cfg.batch_size, cfg.seed, epoch)?;
        let partner = if method == Method::L2rkd {
            streams.region.permutation(n)
        } else {
            Vec::new()
        };

        let mut ce_sum = 0.0;
        let mut distill_sum = 0.0;
        let mut distill_steps = 0usize;
        let mut total_sum = 0.0;
        let mut region_count = 0usize;
        let mut lambdas = Vec::new();
        let mut offset = 0;

        for idx in &order {
            step += 1;
            let partner_idx = partner.get(offset..offset + idx.len()).unwrap_or(&[]);
            offset += idx.len();

            let ctx = StepContext {
                teacher,
                train_ds,
                cfg,
                step,
            };
            let out = ctx.run(&mut student, idx, partner_idx, &mut streams, &mut opt, lr)?;
            if !out.total.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    epoch,
                    value: out.total,
                });
            }
            ce_sum += out.ce;
            total_sum += out.total;
            if let Some(d) = out.distill {
                distill_sum += d;
                distill_steps += 1;
            }
            region_count += out.regions;
            lambdas.extend(out.lambdas);
        }
        total_regions += region_count as u64;

        if !student.is_finite() {
            return Err(Error::NonFinite {
                step,
                epoch,
                value: f64::NAN,
            });
        }
        let steps = order.len();
        let train_acc = accuracy(&student.forward(&train_ds.features)?, &train_ds.labels)?;
        let test_acc = accuracy(&student.forward(&test_ds.features)?, &test_ds.labels)?;
        let dif = teacher.map(|t| st_dif(&student, t, &test_ds.features)).transpose()?;
        records.push(EpochRecord {
            epoch,
            lr,
            ce_loss: ce_sum / steps as f64,
            distill_loss: (distill_steps > 0).then(|| distill_sum / distill_steps as f64),
            total_loss: total_sum / steps as f64,
            train_accuracy: train_acc,
            test_accuracy: test_acc,
            st_dif: dif,
            steps,
            region_batches: region_count,
            lambdas,
        });
    }

    let last = records.last().expect("epochs >= 1");
    let summary = RunSummary {
        final_test_accuracy: last.test_accuracy,
        final_st_dif: last.st_dif,
        total_steps: step,
        total_region_batches: total_regions,
    };
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        metadata: RunMetadata {
            config_hash: config_hash(cfg, student_spec, teacher.map(|t| &t.spec), &train_ds.name),
            seed: cfg.seed,
            dataset: train_ds.name.clone(),
            method: method.to_string(),
            student_widths: student_spec.layer_widths.clone(),
            teacher_widths: teacher.map(|t| t.spec.layer_widths.clone()),
            train_samples: train_ds.len(),
            test_samples: test_ds.len(),
        },
        epochs: records,
        summary,
    };
    report.validate()?;
    Ok((student, report))
}

struct StepContext<'a> {
    teacher: Option<&'a Mlp>,
    train_ds: &'a Dataset,
    cfg: &'a TrainConfig,
    step: u64,
}

struct StepOutcome {
    total: f64,
    ce: f64,
    distill: Option<f64>,
    regions: usize,
    lambdas: Vec<f64>,
}

impl StepContext<'_> {
    fn augmented(&self, idx: &[usize], rng: &mut Rng) -> Result<Tensor> {
        let x = self.train_ds.features.select_rows(idx);
        augment(&x, self.train_ds.layout, &self.cfg.augment, rng)
    }

    fn run(
        &self,
        student: &mut Mlp,
        idx: &[usize],
        partner_idx: &[usize],
        streams: &mut Streams,
        opt: &mut OptimizerState,
        lr: f64,
    ) -> Result<StepOutcome> {
        let cfg = &self.cfg.distill;
        let labels: Vec<usize> = idx.iter().map(|&i| self.train_ds.labels[i]).collect();
        let x_aug = self.augmented(idx, &mut streams.augment)?;

        let mut tape = Tape::new();
        let vars = student.register(&mut tape);
        let xv = tape.constant(x_aug.clone());
        let logits = student.forward_on_tape(&mut tape, &vars, xv)?;
        let mut regions = 0;
        let mut lambdas = Vec::new();

        let parts = match cfg.method {
            Method::Vanilla => {
                let ce = cross_entropy(&mut tape, logits, &labels)?;
                LossParts {
                    total: ce,
                    ce,
                    distill: None,
                }
            }
            Method::Kd => {
                let t = self.teacher.expect("checked").forward(&x_aug)?;
                kd_loss(&mut tape, logits, &t, &labels, cfg)?
            }
            Method::Noisekd => {
                let teacher = self.teacher.expect("checked");
                let xn = noise_batch(&x_aug, cfg.noise_std(), &mut streams.noise)?;
                let t = teacher.forward(&xn)?;
                let xnv = tape.constant(xn);
                let sn = student.forward_on_tape(&mut tape, &vars, xnv)?;
                kd_loss_split(&mut tape, logits, &labels, sn, &t, cfg)?
            }
            Method::L2rkd => {
                let teacher = self.teacher.expect("checked");
                let count = region_batches_at(self.step, cfg.r);
                let n = self.train_ds.len();
                let b = idx.len();
                let mut s_region = Vec::with_capacity(count);
                let mut t_region = Vec::with_capacity(count);
                for k in 0..count {
                    let (a, bx) = if k == 0 && !cfg.independent_region_endpoints {
                        (x_aug.clone(), self.augmented(partner_idx, &mut streams.region)?)
                    } else {
                        let ia: Vec<usize> = (0..b).map(|_| streams.region.index(n)).collect();
                        let ib: Vec<usize> = (0..b).map(|_| streams.region.index(n)).collect();
                        (
                            self.augmented(&ia, &mut streams.region)?,
                            self.augmented(&ib, &mut streams.region)?,
                        )
                    };
                    let x_hat = if cfg.per_sample_lambda {
                        let (x, ls) = sample_region_batch_per_sample(&a, &bx, &mut streams.region)?;
                        lambdas.extend(ls);
                        x
                    } else {
                        let (x, l) = sample_region_batch(&a, &bx, &mut streams.region)?;
                        lambdas.push(l);
                        x
                    };
                    t_region.push(teacher.forward(&x_hat)?);
                    let hv = tape.constant(x_hat);
                    s_region.push(student.forward_on_tape(&mut tape, &vars, hv)?);
                }
                regions = count;
                l2rkd_loss(&mut tape, logits, &labels, &s_region, &t_region, cfg)?
            }
        };

        let total = tape.value(parts.total).item();
        let ce = tape.value(parts.ce).item();
        let distill = parts.distill.map(|d| tape.value(d).item());
        if !total.is_finite() {
            return Ok(StepOutcome {
                total,
                ce,
                distill,
                regions,
                lambdas,
            });
        }

        let mut grads = tape.backward(parts.total)?;
        let flat: Vec<Option<Tensor>> = vars
            .iter()
            .flat_map(|lv| [grads.take(lv.weight), grads.take(lv.bias)])
            .collect();
        sgd_step(&mut student.params_mut(), &flat, opt, lr, self.cfg.momentum)?;

        Ok(StepOutcome {
            total,
            ce,
            distill,
            regions,
            lambdas,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RSweepRow {
    pub r: f64,
    pub seed: u64,
    pub final_test_accuracy: f64,
    pub final_st_dif: Option<f64>,
}

/// One linear-region run per `(r, seed)`, executed in parallel. Rows come
/// back in `r`-major order regardless of scheduling.
pub fn sweep_r(
    teacher: &Mlp,
    student_spec: &MlpSpec,
    train_ds: &Dataset,
    test_ds: &Dataset,
    base: &TrainConfig,
    r_values: &[f64],
    seeds: &[u64],
) -> Result<Vec<RSweepRow>> {
    if let Some(&bad) = r_values.iter().find(|&&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::Config(format!("r values must be positive, got {bad}")));
    }
    let cells: Vec<(f64, u64)> = r_values
        .iter()
        .flat_map(|&r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    cells
        .par_iter()
        .map(|&(r, seed)| {
            let mut cfg = base.clone().with_method(Method::L2rkd).with_seed(seed);
            cfg.distill.r = r;
            let (_, report) = train(Some(teacher), student_spec, train_ds, test_ds, &cfg)?;
            Ok(RSweepRow {
                r,
                seed,
                final_test_accuracy: report.summary.final_test_accuracy,
                final_st_dif: report.summary.final_st_dif,
            })
        })
        .collect()
}
