//! Fully connected ReLU networks used for both teacher and student.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{RandomSource, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "kdlab-mlp";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

/// Layer widths from input dimension to class count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>) -> Result<Self> {
        let spec = Self {
            layer_widths,
            activation: Activation::Relu,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least input and output widths, got {:?}",
                self.layer_widths
            )));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::Config(format!(
                "layer widths must be positive, got {:?}",
                self.layer_widths
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[fan_in × fan_out]`
    pub weight: Tensor,
    /// `[fan_out]`
    pub bias: Tensor,
}

/// An MLP's spec together with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

/// Tape handles for one layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: Mlp,
}

impl Mlp {
    /// He-normal weights (`N(0, 2 / fan_in)`) and zero biases.
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::new(seed);
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| std * rng.normal()).collect();
                Layer {
                    weight: Tensor::new(vec![fan_in, fan_out], data).expect("sized"),
                    bias: Tensor::zeros(&[fan_out]),
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, d) = x.dims2()?;
        if d != self.input_dim() {
            return Err(Error::Shape {
                op: "mlp input (expected width, actual width)",
                left: vec![self.input_dim()],
                right: vec![d],
            });
        }
        Ok(())
    }

    /// Logits for a `[B × d]` batch, with no gradient tracking.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.matmul(&layer.weight)?.add_row_vector(&layer.bias)?;
            if i < last {
                h = h.relu();
            }
        }
        Ok(h)
    }

    /// Registers every parameter on `tape` as a gradient leaf.
    pub fn register(&self, tape: &mut Tape) -> Vec<LayerVars> {
        self.layers
            .iter()
            .map(|l| LayerVars {
                weight: tape.param(l.weight.clone()),
                bias: tape.param(l.bias.clone()),
            })
            .collect()
    }

    /// Logits on the tape, using parameter handles from [`Mlp::register`].
    pub fn forward_on_tape(&self, tape: &mut Tape, vars: &[LayerVars], x: Var) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let last = vars.len() - 1;
        let mut h = x;
        for (i, lv) in vars.iter().enumerate() {
            h = tape.matmul(h, lv.weight)?;
            h = tape.add_bias(h, lv.bias)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Data(format!("not a checkpoint: format tag {:?}", ck.format)));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let model = ck.model;
        model.spec.validate()?;
        let widths = &model.spec.layer_widths;
        if model.layers.len() != widths.len() - 1 {
            return Err(Error::Data("layer count does not match spec".into()));
        }
        for (l, w) in model.layers.iter().zip(widths.windows(2)) {
            if l.weight.shape() != [w[0], w[1]] || l.bias.shape() != [w[1]] {
                return Err(Error::Data(format!(
                    "layer shapes {:?}/{:?} do not match widths {w:?}",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn init_is_deterministic() {
        let spec = MlpSpec::new(vec![2, 8, 2]).unwrap();
        let a = Mlp::init(&spec, 7).unwrap();
        let b = Mlp::init(&spec, 7).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&la.weight), bits(&lb.weight));
        }
        assert!(a.layers.iter().all(|l| l.bias.data().iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_variance_matches_fan_in() {
        // 100 x 100 = 10^4 draws, target 2 / fan_in
        let spec = MlpSpec::new(vec![100, 100, 2]).unwrap();
        let m = Mlp::init(&spec, 11).unwrap();
        let w = m.layers[0].weight.data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / w.len() as f64;
        let target = 2.0 / 100.0;
        assert!((var - target).abs() / target < 0.1, "var {var}");
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let spec = MlpSpec::new(vec![3, 4, 2]).unwrap();
        let mut m = Mlp::init(&spec, 1).unwrap();
        for l in &mut m.layers {
            l.weight = Tensor::zeros(l.weight.shape());
        }
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 9.0]]).unwrap();
        assert!(m.forward(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_network() {
        let spec = MlpSpec::new(vec![2, 2]).unwrap();
        let mut m = Mlp::init(&spec, 0).unwrap();
        m.layers[0].weight = Tensor::eye(2);
        let x = Tensor::from_rows(&[vec![3.0, -1.0]]).unwrap();
        assert_eq!(m.forward(&x).unwrap().data(), &[3.0, -1.0]);
    }

    #[test]
    fn input_width_mismatch_names_both() {
        let m = Mlp::init(&MlpSpec::new(vec![3, 2]).unwrap(), 0).unwrap();
        let msg = m.forward(&Tensor::zeros(&[1, 4])).unwrap_err().to_string();
        assert!(msg.contains("[3]") && msg.contains("[4]"), "{msg}");
    }

    #[test]
    fn forward_matches_plain_loops() {
        let spec = MlpSpec::new(vec![3, 5, 4]).unwrap();
        let m = Mlp::init(&spec, 5).unwrap();
        let mut rng = Rng::new(99);
        let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let got = m.forward(&x).unwrap();

        for (b, xrow) in rows.iter().enumerate() {
            let mut h = xrow.clone();
            for (li, layer) in m.layers.iter().enumerate() {
                let (fi, fo) = layer.weight.dims2().unwrap();
                let mut next = vec![0.0; fo];
                for o in 0..fo {
                    let mut acc = layer.bias.data()[o];
                    for i in 0..fi {
                        acc += h[i] * layer.weight.data()[i * fo + o];
                    }
                    next[o] = if li + 1 < m.layers.len() { acc.max(0.0) } else { acc };
                }
                h = next;
            }
            for (k, v) in h.iter().enumerate() {
                assert!((got.row(b)[k] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let m = Mlp::init(&MlpSpec::new(vec![2, 6, 6, 3]).unwrap(), 2).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -0.7], vec![1.1, 0.2]]).unwrap();
        let mut tape = Tape::new();
        let vars = m.register(&mut tape);
        let xv = tape.constant(x.clone());
        let out = m.forward_on_tape(&mut tape, &vars, xv).unwrap();
        assert_eq!(tape.value(out), &m.forward(&x).unwrap());
    }

    #[test]
    fn rejects_wrong_checkpoint_version() {
        let m = Mlp::init(&MlpSpec::new(vec![2, 2]).unwrap(), 0).unwrap();
        let text = m.to_json().unwrap().replace("\"version\":1", "\"version\":9");
        assert!(Mlp::from_json(&text).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn checkpoint_roundtrip_is_bit_exact(seed in any::<u64>(), hidden in 1usize..12, scale in -1e6f64..1e6) {
            let mut m = Mlp::init(&MlpSpec::new(vec![3, hidden, 2]).unwrap(), seed).unwrap();
            m.layers[1].bias = Tensor::full(&[2], scale / 3.0);
            let back = Mlp::from_json(&m.to_json().unwrap()).unwrap();
            for (a, b) in m.layers.iter().zip(&back.layers) {
                for (x, y) in a.weight.data().iter().chain(a.bias.data()).zip(b.weight.data().iter().chain(b.bias.data())) {
                    prop_assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}
