//! Experiment plumbing shared by the CLI and the acceptance suite: data
//! preparation, teacher training, single distillation runs, and sweeps
//! with median aggregation.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, ExperimentConfig};
use crate::data::{
    few_shot_subsample, gen_synthetic, load_idx, split, Dataset, DatasetManifest, Standardization,
};
use crate::error::{Error, Result};
use crate::metrics::RunReport;
use crate::model::Mlp;
use crate::objectives::Method;
use crate::train::{train, TrainConfig};

/// Train and test splits after standardization.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub test: Dataset,
    pub standardization: Option<Standardization>,
}

impl PreparedData {
    /// Student training set: the full split or a stratified subset.
    pub fn student_train(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if fraction >= 1.0 {
            Ok(self.train.clone())
        } else {
            few_shot_subsample(&self.train, fraction, seed)
        }
    }
}

pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let d = &cfg.dataset;
    let (train_ds, test_ds, frozen) = match d.source {
        DatasetSource::Synthetic => {
            let kind = d.generator.as_ref().expect("validated");
            let all = gen_synthetic(
                kind,
                d.n.expect("validated"),
                d.dim.expect("validated"),
                d.classes.expect("validated"),
                d.seed,
            )?;
            let (a, b) = split(&all, d.train_fraction, d.seed)?;
            (a, b, None)
        }
        DatasetSource::Idx => {
            let p = |o: &Option<std::path::PathBuf>| cfg.resolve(o.as_ref().expect("validated"));
            (
                load_idx(p(&d.train_images), p(&d.train_labels))?,
                load_idx(p(&d.test_images), p(&d.test_labels))?,
                None,
            )
        }
        DatasetSource::Manifest => {
            let mpath = cfg.resolve(d.manifest.as_ref().expect("validated"));
            let manifest = DatasetManifest::load(&mpath)?;
            let entry = manifest.entry(d.entry.as_deref().expect("validated"))?;
            let root = mpath.parent().unwrap_or(Path::new(""));
            let p = |q: &Path| if q.is_absolute() { q.to_path_buf() } else { root.join(q) };
            (
                load_idx(p(&entry.train_images), p(&entry.train_labels))?,
                load_idx(p(&entry.test_images), p(&entry.test_labels))?,
                entry.standardization.clone(),
            )
        }
    };
    let standardize = d.standardize.unwrap_or(d.source != DatasetSource::Synthetic);
    if !standardize {
        return Ok(PreparedData {
            train: train_ds,
            test: test_ds,
            standardization: None,
        });
    }
    let st = match frozen {
        Some(s) => s,
        None => Standardization::fit(&train_ds)?,
    };
    Ok(PreparedData {
        train: st.apply(&train_ds)?,
        test: st.apply(&test_ds)?,
        standardization: Some(st),
    })
}

/// Loads the configured teacher checkpoint, or trains one.
pub fn obtain_teacher(cfg: &ExperimentConfig, data: &PreparedData) -> Result<(Mlp, Option<RunReport>)> {
    if let Some(ck) = &cfg.teacher.checkpoint {
        let t = Mlp::load(cfg.resolve(ck))?;
        return Ok((t, None));
    }
    let (t, report) = train_teacher(cfg, data)?;
    Ok((t, Some(report)))
}

pub fn train_teacher(cfg: &ExperimentConfig, data: &PreparedData) -> Result<(Mlp, RunReport)> {
    let spec = cfg.teacher_spec()?;
    train(None, &spec, &data.train, &data.test, &cfg.teacher_train_config())
}

/// Parameters of one student run that vary across a sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunSpec {
    pub method: Method,
    pub seed: u64,
    pub few_shot_fraction: f64,
    pub r: Option<f64>,
    pub noise_sigma: Option<f64>,
}

impl RunSpec {
    pub fn new(method: Method, seed: u64) -> Self {
        Self {
            method,
            seed,
            few_shot_fraction: 1.0,
            r: None,
            noise_sigma: None,
        }
    }

    pub fn train_config(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone().with_method(self.method).with_seed(self.seed);
        if let Some(r) = self.r {
            cfg.distill.r = r;
        }
        if let Some(s) = self.noise_sigma {
            cfg.distill.noise_sigma = s;
        }
        cfg
    }
}

/// One student run. The few-shot subset is drawn with the run seed.
/// The teacher is ignored for `vanilla` and required otherwise.
pub fn run_student(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    teacher: Option<&Mlp>,
    run: &RunSpec,
) -> Result<(Mlp, RunReport)> {
    let spec = cfg.student_spec()?;
    let train_ds = data.student_train(run.few_shot_fraction, run.seed)?;
    let tcfg = run.train_config(&cfg.train);
    let teacher = teacher.filter(|_| run.method.needs_teacher());
    train(teacher, &spec, &train_ds, &data.test, &tcfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    R,
    FewShot,
    Method,
    Noise,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::R => "r",
            SweepAxis::FewShot => "few_shot",
            SweepAxis::Method => "method",
            SweepAxis::Noise => "noise",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "r" => Ok(SweepAxis::R),
            "few_shot" | "few-shot" => Ok(SweepAxis::FewShot),
            "method" => Ok(SweepAxis::Method),
            "noise" => Ok(SweepAxis::Noise),
            other => Err(Error::Config(format!(
                "unknown sweep axis {other:?} (expected r, few_shot, method or noise)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: SweepAxis,
    /// Axis value; `None` on the method axis.
    pub value: Option<f64>,
    pub method: Method,
    pub seed: u64,
    pub final_test_accuracy: f64,
    pub final_st_dif: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub value: Option<f64>,
    pub method: Method,
    pub runs: usize,
    pub median_test_accuracy: f64,
    pub median_st_dif: Option<f64>,
}

/// True if any run on the axis distills from a teacher.
pub fn axis_needs_teacher(cfg: &ExperimentConfig, axis: SweepAxis) -> Result<bool> {
    Ok(sweep_grid(cfg, axis)?.iter().any(|(_, r)| r.method.needs_teacher()))
}

/// Run grid for an axis, in (value, method, seed) order.
pub fn sweep_grid(cfg: &ExperimentConfig, axis: SweepAxis) -> Result<Vec<(Option<f64>, RunSpec)>> {
    let s = &cfg.sweep;
    let empty = |field: &str| Error::Config(format!("sweep.{field} is empty"));
    if s.seeds.is_empty() {
        return Err(empty("seeds"));
    }
    let mut grid = Vec::new();
    match axis {
        SweepAxis::Method => {
            if s.methods.is_empty() {
                return Err(empty("methods"));
            }
            for &m in &s.methods {
                for &seed in &s.seeds {
                    grid.push((None, RunSpec::new(m, seed)));
                }
            }
        }
        SweepAxis::FewShot => {
            if s.few_shot_fractions.is_empty() {
                return Err(empty("few_shot_fractions"));
            }
            if s.methods.is_empty() {
                return Err(empty("methods"));
            }
            for &f in &s.few_shot_fractions {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::Config(format!("few-shot fraction {f} is outside (0, 1]")));
                }
                for &m in &s.methods {
                    for &seed in &s.seeds {
                        let mut run = RunSpec::new(m, seed);
                        run.few_shot_fraction = f;
                        grid.push((Some(f), run));
                    }
                }
            }
        }
        SweepAxis::R => {
            if s.r_values.is_empty() {
                return Err(empty("r_values"));
            }
            for &r in &s.r_values {
                if !(r > 0.0 && r.is_finite()) {
                    return Err(Error::Config(format!("r value {r} must be positive")));
                }
                for &seed in &s.seeds {
                    let mut run = RunSpec::new(Method::L2rkd, seed);
                    run.r = Some(r);
                    grid.push((Some(r), run));
                }
            }
        }
        SweepAxis::Noise => {
            if s.noise_sigmas.is_empty() {
                return Err(empty("noise_sigmas"));
            }
            for &sigma in &s.noise_sigmas {
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::Config(format!("noise sigma {sigma} must be non-negative")));
                }
                for &seed in &s.seeds {
                    let mut run = RunSpec::new(Method::Noisekd, seed);
                    run.noise_sigma = Some(sigma);
                    grid.push((Some(sigma), run));
                }
            }
        }
    }
    Ok(grid)
}

/// Runs every grid point on a bounded pool. Rows come back in grid order.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    teacher: Option<&Mlp>,
    axis: SweepAxis,
) -> Result<Vec<SweepRow>> {
    let grid = sweep_grid(cfg, axis)?;
    if teacher.is_none() {
        if let Some((_, run)) = grid.iter().find(|(_, r)| r.method.needs_teacher()) {
            return Err(Error::Config(format!("method {} needs a teacher", run.method)));
        }
    }
    let job = || -> Result<Vec<SweepRow>> {
        grid.par_iter()
            .map(|(value, run)| {
                let (_, report) = run_student(cfg, data, teacher, run)?;
                Ok(SweepRow {
                    axis,
                    value: *value,
                    method: run.method,
                    seed: run.seed,
                    final_test_accuracy: report.summary.final_test_accuracy,
                    final_st_dif: report.summary.final_st_dif,
                })
            })
            .collect()
    };
    match cfg.sweep.workers {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("sweep.workers: {e}")))?
            .install(job),
        None => job(),
    }
}

/// Median of a non-empty slice; the mean of the two middle values for
/// even lengths.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Groups rows by (value, method) in first-seen order and takes medians.
pub fn aggregate(rows: &[SweepRow]) -> Vec<SweepCell> {
    let mut keys: Vec<(Option<f64>, Method)> = Vec::new();
    for r in rows {
        let k = (r.value, r.method);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(value, method)| {
            let group: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.value == value && r.method == method)
                .collect();
            let acc: Vec<f64> = group.iter().map(|r| r.final_test_accuracy).collect();
            let difs: Option<Vec<f64>> = group.iter().map(|r| r.final_st_dif).collect();
            SweepCell {
                value,
                method,
                runs: group.len(),
                median_test_accuracy: median(&acc),
                median_st_dif: difs.map(|d| median(&d)),
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_rows_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(Error::from)?;
    w.write_record(["axis", "value", "method", "seed", "final_test_accuracy", "final_st_dif"])?;
    for r in rows {
        w.write_record([
            r.axis.name().to_string(),
            opt(r.value),
            r.method.to_string(),
            r.seed.to_string(),
            r.final_test_accuracy.to_string(),
            opt(r.final_st_dif),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

pub fn write_summary_csv(axis: SweepAxis, cells: &[SweepCell], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref()).map_err(Error::from)?;
    w.write_record(["axis", "value", "method", "runs", "median_test_accuracy", "median_st_dif"])?;
    for c in cells {
        w.write_record([
            axis.name().to_string(),
            opt(c.value),
            c.method.to_string(),
            c.runs.to_string(),
            c.median_test_accuracy.to_string(),
            opt(c.median_st_dif),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

/// Plot-ready series: one block per method, `x y` pairs separated by
/// blank lines (gnuplot `index` layout).
pub fn series_text(axis: SweepAxis, cells: &[SweepCell]) -> String {
    let mut methods: Vec<Method> = Vec::new();
    for c in cells {
        if !methods.contains(&c.method) {
            methods.push(c.method);
        }
    }
    let mut out = String::new();
    for (i, m) in methods.iter().enumerate() {
        if i > 0 {
            out.push_str("\n\n");
        }
        let _ = writeln!(out, "# method={m} axis={}", axis.name());
        let _ = writeln!(out, "# x median_test_accuracy median_st_dif");
        for (j, c) in cells.iter().filter(|c| c.method == *m).enumerate() {
            let x = c.value.unwrap_or(j as f64);
            let dif = c.median_st_dif.map_or("nan".to_string(), |d| d.to_string());
            let _ = writeln!(out, "{x} {} {dif}", c.median_test_accuracy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(value: Option<f64>, method: Method, seed: u64, acc: f64) -> SweepRow {
        SweepRow {
            axis: SweepAxis::R,
            value,
            method,
            seed,
            final_test_accuracy: acc,
            final_st_dif: Some(acc * 2.0),
        }
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(&[7.0]), 7.0);
    }

    #[test]
    fn aggregation_groups_in_order() {
        let rows = vec![
            row(Some(1.0), Method::L2rkd, 0, 0.9),
            row(Some(1.0), Method::L2rkd, 1, 0.7),
            row(Some(1.0), Method::L2rkd, 2, 0.8),
            row(Some(2.0), Method::L2rkd, 0, 0.5),
        ];
        let cells = aggregate(&rows);
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0].runs, 3);
        assert_eq!(cells[0].median_test_accuracy, 0.8);
        assert_eq!(cells[0].median_st_dif, Some(1.6));
        assert_eq!(cells[1].value, Some(2.0));
    }

    #[test]
    fn axis_parsing() {
        assert_eq!("few_shot".parse::<SweepAxis>().unwrap(), SweepAxis::FewShot);
        assert!("depth".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn series_blocks_per_method() {
        let rows = vec![
            row(Some(0.5), Method::Kd, 0, 0.6),
            row(Some(0.5), Method::L2rkd, 0, 0.7),
        ];
        let text = series_text(SweepAxis::FewShot, &aggregate(&rows));
        assert_eq!(text.matches("# method=").count(), 2);
        assert!(text.contains("0.5 0.7 1.4"));
    }
}
