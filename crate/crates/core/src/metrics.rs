//! Accuracy, student-teacher logit difference, and run reports.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Mlp;
use crate::tensor::Tensor;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Fraction of rows whose argmax equals the label. Ties resolve to the
/// lowest class index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (b, _) = logits.dims2()?;
    if b != labels.len() {
        return Err(Error::shape("accuracy", logits.shape(), &[labels.len()]));
    }
    if b == 0 {
        return Ok(0.0);
    }
    let hits = logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / b as f64)
}

/// Mean over inputs and classes of the squared logit difference.
pub fn st_dif(student: &Mlp, teacher: &Mlp, inputs: &Tensor) -> Result<f64> {
    if student.input_dim() != teacher.input_dim() || student.output_dim() != teacher.output_dim() {
        return Err(Error::Shape {
            op: "st_dif (student vs teacher in/out widths)",
            left: vec![student.input_dim(), student.output_dim()],
            right: vec![teacher.input_dim(), teacher.output_dim()],
        });
    }
    let s = student.forward(inputs)?;
    let t = teacher.forward(inputs)?;
    logit_mse(&s, &t)
}

/// Mean squared difference of two logit matrices, summed in row order.
pub fn logit_mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("logit_mse", a.shape(), b.shape()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum();
    Ok(total / a.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean unweighted cross-entropy over the epoch's steps.
    pub ce_loss: f64,
    /// Mean unweighted distillation term over the steps that evaluated one.
    pub distill_loss: Option<f64>,
    /// Mean weighted objective.
    pub total_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub st_dif: Option<f64>,
    pub steps: usize,
    pub region_batches: usize,
    /// Interpolation coefficients drawn this epoch, in order.
    pub lambdas: Vec<f64>,
}

impl EpochRecord {
    pub fn is_finite(&self) -> bool {
        self.lr.is_finite()
            && self.ce_loss.is_finite()
            && self.distill_loss.is_none_or(f64::is_finite)
            && self.total_loss.is_finite()
            && self.st_dif.is_none_or(f64::is_finite)
            && self.lambdas.iter().all(|l| l.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub seed: u64,
    pub dataset: String,
    pub method: String,
    pub student_widths: Vec<usize>,
    pub teacher_widths: Option<Vec<usize>>,
    pub train_samples: usize,
    pub test_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_test_accuracy: f64,
    pub final_st_dif: Option<f64>,
    pub total_steps: u64,
    pub total_region_batches: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub metadata: RunMetadata,
    pub epochs: Vec<EpochRecord>,
    pub summary: RunSummary,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line<'a> {
    Metadata(&'a RunMetadata),
    Epoch(&'a EpochRecord),
    Summary(&'a RunSummary),
}

impl RunReport {
    /// Epochs contiguous from 0 and every logged value finite.
    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.epochs.iter().enumerate() {
            if e.epoch != i {
                return Err(Error::Contract(format!("epoch record {i} is labelled {}", e.epoch)));
            }
            if !e.is_finite() {
                return Err(Error::Contract(format!("epoch {i} has a non-finite field")));
            }
        }
        Ok(())
    }

    /// One JSON object per line: metadata, each epoch, then the summary.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        let mut push = |line: Line<'_>| -> Result<()> {
            serde_json::to_writer(&mut out, &line)?;
            out.push(b'\n');
            Ok(())
        };
        push(Line::Metadata(&self.metadata))?;
        for e in &self.epochs {
            push(Line::Epoch(e))?;
        }
        push(Line::Summary(&self.summary))?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MlpSpec;
    use crate::rng::{RandomSource, Rng};

    #[test]
    fn aligned_one_hot_is_perfect() {
        let logits = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(accuracy(&logits, &[0, 2]).unwrap(), 1.0);
    }

    #[test]
    fn ties_go_to_lowest_class() {
        assert_eq!(accuracy(&Tensor::zeros(&[4, 3]), &[0, 0, 0, 0]).unwrap(), 1.0);
        assert_eq!(accuracy(&Tensor::zeros(&[4, 3]), &[1, 1, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn hand_counted_fixture() {
        let logits = Tensor::from_rows(&[
            vec![0.1, 0.9, 0.0],  // 1
            vec![2.0, -1.0, 1.0], // 0
            vec![0.0, 0.0, 3.0],  // 2
            vec![0.5, 0.5, 0.1],  // 0 (tie)
            vec![-1.0, -2.0, -0.5], // 2
        ])
        .unwrap();
        // hits: row0 yes, row1 no, row2 yes, row3 yes, row4 no
        assert_eq!(accuracy(&logits, &[1, 2, 2, 0, 1]).unwrap(), 3.0 / 5.0);
    }

    #[test]
    fn accuracy_invariant_under_scale_and_shift() {
        let mut rng = Rng::new(1);
        let data: Vec<f64> = (0..40).map(|_| rng.normal()).collect();
        let logits = Tensor::new(vec![10, 4], data).unwrap();
        let labels: Vec<usize> = (0..10).map(|i| i % 4).collect();
        let base = accuracy(&logits, &labels).unwrap();
        assert_eq!(accuracy(&logits.scale(3.5), &labels).unwrap(), base);
        assert_eq!(accuracy(&logits.map(|v| v + 7.0), &labels).unwrap(), base);
    }

    fn net(seed: u64) -> Mlp {
        Mlp::init(&MlpSpec::new(vec![3, 5, 4]).unwrap(), seed).unwrap()
    }

    fn inputs(n: usize) -> Tensor {
        let mut rng = Rng::new(3);
        Tensor::new(vec![n, 3], (0..n * 3).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn st_dif_self_is_zero() {
        assert_eq!(st_dif(&net(1), &net(1), &inputs(10)).unwrap(), 0.0);
    }

    #[test]
    fn st_dif_constant_offset() {
        let t = net(2);
        let mut s = t.clone();
        s.layers[1].bias = Tensor::full(&[4], 0.75);
        assert!((st_dif(&s, &t, &inputs(10)).unwrap() - 0.5625).abs() < 1e-12);
    }

    #[test]
    fn st_dif_matches_double_loop_and_is_symmetric() {
        let (s, t) = (net(4), net(5));
        let x = inputs(10);
        let (fs, ft) = (s.forward(&x).unwrap(), t.forward(&x).unwrap());
        let mut acc = 0.0;
        for i in 0..10 {
            let mut row = 0.0;
            for k in 0..4 {
                row += (fs.row(i)[k] - ft.row(i)[k]).powi(2);
            }
            acc += row / 4.0;
        }
        let expected = acc / 10.0;
        let got = st_dif(&s, &t, &x).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert_eq!(got, st_dif(&t, &s, &x).unwrap());
    }

    #[test]
    fn st_dif_dimension_mismatch() {
        let other = Mlp::init(&MlpSpec::new(vec![3, 2]).unwrap(), 0).unwrap();
        assert!(st_dif(&net(1), &other, &inputs(2)).is_err());
    }
}
