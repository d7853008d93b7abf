//! Synthetic teacher-student tasks.
//!
//! The teacher is the toy model with each adapted weight shifted by a planted
//! low-rank `Δ`. With `delta_rank = 0` the teacher is the base model itself.

use serde::{Deserialize, Serialize};

use super::toy::{forward_weights, HeadSpec, ToyModel};
use crate::error::{Error, Result};
use crate::tensor::{derive_seed, matmul, sample, DistributionSpec, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    MatrixRegression,
    TokenClassification,
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "matrix-regression" | "regression" => Ok(TaskKind::MatrixRegression),
            "token-classification" | "classification" => Ok(TaskKind::TokenClassification),
            _ => Err(Error::invalid(format!("unknown task kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_train: usize,
    pub n_eval: usize,
    /// Rank of the planted shift on every adapted layer.
    pub delta_rank: usize,
    /// Entry scale of `Δ` relative to the base weight's init std.
    pub delta_scale: f64,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::MatrixRegression,
            n_train: 1024,
            n_eval: 256,
            delta_rank: 8,
            delta_scale: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Regression(Matrix),
    Classification(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(m) => m.rows(),
            Targets::Classification(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn select(&self, idx: &[usize]) -> Result<Targets> {
        Ok(match self {
            Targets::Regression(m) => Targets::Regression(select_rows(m, idx)?),
            Targets::Classification(v) => Targets::Classification(idx.iter().map(|&i| v[i]).collect()),
        })
    }
}

pub(crate) fn select_rows(m: &Matrix, idx: &[usize]) -> Result<Matrix> {
    let mut data = Vec::with_capacity(idx.len() * m.cols());
    for &i in idx {
        data.extend_from_slice(m.row(i));
    }
    Matrix::new(idx.len(), m.cols(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub x_train: Matrix,
    pub y_train: Targets,
    pub x_eval: Matrix,
    pub y_eval: Targets,
    /// Teacher weights, one per model layer.
    pub teacher: Vec<Matrix>,
}

pub fn make_task(model: &ToyModel, spec: &TaskSpec) -> Result<Dataset> {
    if spec.n_train == 0 || spec.n_eval == 0 {
        return Err(Error::invalid("task sizes must be >= 1"));
    }
    if !(spec.delta_scale.is_finite() && spec.delta_scale >= 0.0) {
        return Err(Error::invalid("delta scale must be finite and >= 0"));
    }
    match (spec.kind, model.spec.head) {
        (TaskKind::MatrixRegression, HeadSpec::Regression { .. })
        | (TaskKind::TokenClassification, HeadSpec::Classification { .. }) => {}
        (kind, head) => {
            return Err(Error::invalid(format!("task {kind:?} does not fit model head {head:?}")));
        }
    }
    let mut teacher = model.weights.clone();
    for (i, layer, w) in model.adapted() {
        if spec.delta_rank >= layer.d.min(layer.k) {
            return Err(Error::invalid(format!(
                "delta rank {} must be < min(d,k) of layer {}",
                spec.delta_rank, layer.name
            )));
        }
        if spec.delta_rank == 0 {
            continue;
        }
        let q = spec.delta_rank;
        let base_std = 1.0 / (layer.k as f64).sqrt();
        let scale = spec.delta_scale * base_std / (q as f64).sqrt();
        let unit = DistributionSpec::Normal { mean: 0.0, std: 1.0 };
        let u = sample(&unit, layer.d, q, derive_seed(spec.seed, &layer.name, "delta-u"))?;
        let v = sample(&unit, q, layer.k, derive_seed(spec.seed, &layer.name, "delta-v"))?;
        let delta = matmul(&u, &v)?.scale(scale)?;
        teacher[i] = w.add(&delta)?;
    }

    let input = DistributionSpec::Normal { mean: 0.0, std: 1.0 };
    let k0 = model.spec.input_dim();
    let x_train = sample(&input, spec.n_train, k0, derive_seed(spec.seed, "inputs", "train"))?;
    let x_eval = sample(&input, spec.n_eval, k0, derive_seed(spec.seed, "inputs", "eval"))?;
    let label = |x: &Matrix| -> Result<Targets> {
        let out = forward_weights(&teacher, model.spec.nonlinearity, x)?;
        Ok(match spec.kind {
            TaskKind::MatrixRegression => Targets::Regression(out),
            TaskKind::TokenClassification => Targets::Classification((0..out.rows()).map(|i| argmax(out.row(i))).collect()),
        })
    };
    let y_train = label(&x_train)?;
    let y_eval = label(&x_eval)?;
    Ok(Dataset {
        spec: *spec,
        x_train,
        y_train,
        x_eval,
        y_eval,
        teacher,
    })
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::toy::ToyModelSpec;

    #[test]
    fn same_seed_same_dataset() {
        let model = ToyModel::generate(&ToyModelSpec::default()).unwrap();
        let spec = TaskSpec { n_train: 16, n_eval: 8, ..Default::default() };
        assert_eq!(make_task(&model, &spec).unwrap(), make_task(&model, &spec).unwrap());
        let other = TaskSpec { seed: 1, ..spec };
        assert_ne!(make_task(&model, &spec).unwrap(), make_task(&model, &other).unwrap());
    }

    #[test]
    fn zero_rank_teacher_is_the_base_model() {
        let model = ToyModel::generate(&ToyModelSpec::default()).unwrap();
        let spec = TaskSpec { n_train: 16, n_eval: 8, delta_rank: 0, ..Default::default() };
        let ds = make_task(&model, &spec).unwrap();
        assert_eq!(ds.teacher, model.weights);
        match &ds.y_train {
            Targets::Regression(y) => assert_eq!(y, &model.forward(&ds.x_train).unwrap()),
            _ => unreachable!(),
        }
    }

    #[test]
    fn planted_shift_has_requested_rank_and_only_touches_adapted_layers() {
        let model = ToyModel::generate(&ToyModelSpec::default()).unwrap();
        let spec = TaskSpec { n_train: 4, n_eval: 4, delta_rank: 3, ..Default::default() };
        let ds = make_task(&model, &spec).unwrap();
        assert_eq!(ds.teacher[0], model.weights[0]);
        assert_eq!(ds.teacher[3], model.weights[3]);
        for i in [1, 2] {
            let delta = ds.teacher[i].sub(&model.weights[i]).unwrap();
            let svd = nalgebra::DMatrix::from_row_slice(64, 64, delta.data()).svd(false, false);
            let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
            s.sort_by(|a, b| b.total_cmp(a));
            assert!(s[2] > 1e-3, "{s:?}");
            assert!(s[3] < 1e-12 * s[0]);
        }
    }

    #[test]
    fn classification_labels_are_in_range() {
        let spec_m = ToyModelSpec::with_head(HeadSpec::Classification { classes: 5 }, 3);
        let model = ToyModel::generate(&spec_m).unwrap();
        let spec = TaskSpec {
            kind: TaskKind::TokenClassification,
            n_train: 64,
            n_eval: 16,
            ..Default::default()
        };
        let ds = make_task(&model, &spec).unwrap();
        match &ds.y_train {
            Targets::Classification(v) => {
                assert_eq!(v.len(), 64);
                assert!(v.iter().all(|&c| c < 5));
            }
            _ => unreachable!(),
        }
        let mismatched = TaskSpec { kind: TaskKind::MatrixRegression, ..spec };
        assert!(make_task(&model, &mismatched).is_err());
    }

    #[test]
    fn invalid_sizes_are_rejected() {
        let model = ToyModel::generate(&ToyModelSpec::default()).unwrap();
        assert!(make_task(&model, &TaskSpec { n_train: 0, ..Default::default() }).is_err());
        assert!(make_task(&model, &TaskSpec { n_eval: 0, ..Default::default() }).is_err());
        assert!(make_task(&model, &TaskSpec { delta_rank: 64, ..Default::default() }).is_err());
    }
}
