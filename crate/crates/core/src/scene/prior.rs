//! Knowledge-graph rows consumed by the scene heads: one bridge node per
//! semantic class, the mechanism prototypes and the severity node groups.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Result, SceneError, CITYSCAPES_CLASSES, MECHANISMS, PRIOR_GROUPS};
use crate::kge::Embeddings;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgePrior {
    pub dim: usize,
    /// `19 × dim`, in [`CITYSCAPES_CLASSES`] order.
    pub classes: Tensor,
    /// `8 × dim`, in [`MECHANISMS`] order.
    pub mechanisms: Tensor,
    /// `(group, n_g × dim)` in [`PRIOR_GROUPS`] order.
    pub groups: Vec<(String, Tensor)>,
}

const GROUP_SIZES: [usize; 7] = [9, 10, 9, 4, 8, 10, 11];

impl KnowledgePrior {
    pub fn from_embeddings(emb: &Embeddings) -> Result<Self> {
        let rows = |label: &str, names: &[&str]| -> Result<Tensor> {
            let rows = names
                .iter()
                .map(|n| {
                    let id = format!("{label}:{n}");
                    emb.get(&id)
                        .map(<[f64]>::to_vec)
                        .ok_or_else(|| SceneError::Config(format!("no embedding for bridge node {id}")))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::from_rows(&rows)?)
        };
        let groups = PRIOR_GROUPS
            .iter()
            .map(|g| {
                let found = emb.with_prefix(&format!("{g}:"));
                if found.is_empty() {
                    return Err(SceneError::Config(format!("severity group {g} has no embedded nodes")));
                }
                let rows: Vec<Vec<f64>> = found.iter().map(|(_, r)| r.to_vec()).collect();
                Ok((g.to_string(), Tensor::from_rows(&rows)?))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim: emb.dim,
            classes: rows("CITYSCAPES", &CITYSCAPES_CLASSES)?,
            mechanisms: rows("MECHANISM", &MECHANISMS)?,
            groups,
        })
    }

    /// Standard normal rows with the real group sizes.
    pub fn synthetic(seed: u64, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |n: usize| {
            let data = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            Tensor::new(vec![n, dim], data).expect("synthetic prior shape")
        };
        let classes = gen(CITYSCAPES_CLASSES.len());
        let mechanisms = gen(MECHANISMS.len());
        let groups = PRIOR_GROUPS
            .iter()
            .zip(GROUP_SIZES)
            .map(|(g, n)| (g.to_string(), gen(n)))
            .collect();
        Self {
            dim,
            classes,
            mechanisms,
            groups,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |t: &Tensor, rows: usize| t.shape() == [rows, self.dim] && t.is_finite();
        if self.dim == 0 || !ok(&self.classes, CITYSCAPES_CLASSES.len()) || !ok(&self.mechanisms, MECHANISMS.len()) {
            return Err(SceneError::Config("knowledge prior rows have the wrong shape".into()));
        }
        if self.groups.is_empty() {
            return Err(SceneError::Config("knowledge prior has no severity groups".into()));
        }
        for (g, t) in &self.groups {
            if t.rows() == 0 || !ok(t, t.rows()) {
                return Err(SceneError::Config(format!("severity group {g} is empty or malformed")));
            }
        }
        Ok(())
    }
}
