use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec::{DistillSpec, Method, ProjectionInit};
use crate::transformer::{truncated_normal, ModelConfig, Qkv, INIT_STD};
use crate::{Error, Graph, Result, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ProjectionKey {
    /// `W_i^j`: student layer `i` to teacher layer `j`, `[d_h^S, d_h^T]`.
    Hidden { student: usize, teacher: usize },
    /// `W_{α,a}`: relation head `a` (1-based) of `α`, `[d_r^S, d_r^T]`.
    Relation { qkv: Qkv, head: usize },
}

impl ProjectionKey {
    pub fn name(&self) -> String {
        match self {
            ProjectionKey::Hidden { student, teacher } => format!("proj.hidden.{student}.{teacher}"),
            ProjectionKey::Relation { qkv, head } => format!("proj.relation.{}.{head}", qkv.short()),
        }
    }
}

/// Learned linear maps from student to teacher spaces.
#[derive(Debug, Clone, Default)]
pub struct ProjectionBank {
    entries: BTreeMap<ProjectionKey, Tensor>,
}

fn init_matrix(rows: usize, cols: usize, init: ProjectionInit, rng: &mut ChaCha8Rng) -> Tensor {
    let data = match init {
        ProjectionInit::Random => truncated_normal(rng, rows * cols, INIT_STD),
        ProjectionInit::Identity => {
            let mut d = vec![0.0; rows * cols];
            (0..rows.min(cols)).for_each(|i| d[i * cols + i] = 1.0);
            d
        }
    };
    Tensor::new(vec![rows, cols], data).expect("consistent shape").with_grad()
}

impl ProjectionBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// Projections required by `spec` for the given pair of architectures.
    pub fn for_spec(spec: &DistillSpec, student: &ModelConfig, teacher: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bank = Self::new();
        match spec.method {
            Method::HiddenState => {
                let mapping = spec.mapping(student, teacher)?.expect("hidden-state method");
                for (i, j) in mapping.pairs() {
                    let w = init_matrix(student.hidden_size, teacher.hidden_size, spec.projection_init, &mut rng);
                    bank.insert(ProjectionKey::Hidden { student: i, teacher: j }, w);
                }
            }
            Method::DirectMiniLm => {
                let a_r = spec.resolved_relation_heads(teacher).expect("attention method");
                let (ds, dt) = (student.hidden_size / a_r, teacher.hidden_size / a_r);
                for qkv in Qkv::ALL {
                    for head in 1..=a_r {
                        let w = init_matrix(ds, dt, spec.projection_init, &mut rng);
                        bank.insert(ProjectionKey::Relation { qkv, head }, w);
                    }
                }
                if spec.orthogonality_constraint {
                    bank.orthonormalize()?;
                }
            }
            _ => {}
        }
        Ok(bank)
    }

    pub fn insert(&mut self, key: ProjectionKey, w: Tensor) {
        self.entries.insert(key, w);
    }

    pub fn get(&self, key: ProjectionKey) -> Option<&Tensor> {
        self.entries.get(&key)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = ProjectionKey> + '_ {
        self.entries.keys().copied()
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.values()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.values_mut()
    }

    /// `(name, tensor)` pairs in key order, for checkpointing.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.entries.iter().map(|(k, t)| (k.name(), t)).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Replaces every matrix by the nearest one with orthonormal rows
    /// (modified Gram-Schmidt over rows).
    pub fn orthonormalize(&mut self) -> Result<()> {
        for (key, w) in &mut self.entries {
            orthonormalize_rows(w).map_err(|e| Error::InvalidSpec(format!("{}: {e}", key.name())))?;
        }
        Ok(())
    }

    pub fn bind<'g>(&self, graph: &'g Graph) -> BoundProjections<'g> {
        BoundProjections { vars: self.entries.iter().map(|(k, t)| (*k, graph.leaf(t))).collect() }
    }
}

/// Orthonormalizes the rows of `w` in place; needs rows ≤ cols.
pub fn orthonormalize_rows(w: &mut Tensor) -> std::result::Result<(), String> {
    let (rows, cols) = (w.rows(), w.cols());
    if rows > cols {
        return Err(format!("{rows} rows cannot be orthonormal in {cols} dimensions"));
    }
    let d = w.data_mut();
    for i in 0..rows {
        for j in 0..i {
            let dot: f64 = (0..cols).map(|c| d[i * cols + c] * d[j * cols + c]).sum();
            for c in 0..cols {
                d[i * cols + c] -= dot * d[j * cols + c];
            }
        }
        let norm = (0..cols).map(|c| d[i * cols + c].powi(2)).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(format!("row {i} is linearly dependent"));
        }
        (0..cols).for_each(|c| d[i * cols + c] /= norm);
    }
    Ok(())
}

/// Projections registered on a graph.
pub struct BoundProjections<'g> {
    vars: BTreeMap<ProjectionKey, Var<'g>>,
}

impl<'g> BoundProjections<'g> {
    pub fn from_vars(vars: impl IntoIterator<Item = (ProjectionKey, Var<'g>)>) -> Self {
        Self { vars: vars.into_iter().collect() }
    }

    pub fn get(&self, key: ProjectionKey) -> Result<Var<'g>> {
        self.vars.get(&key).copied().ok_or_else(|| Error::MissingProjection(key.name()))
    }

    /// Variables in key order (matches [`ProjectionBank::tensors`]).
    pub fn vars(&self) -> impl Iterator<Item = Var<'g>> + '_ {
        self.vars.values().copied()
    }
}
