//! Projection of expert states into a shared width, the two fusion rules,
//! and the relevance head.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ExpertOutput;
use crate::numeric::{affine, dot, relu, sigmoid, Matrix, Rng};
use crate::router::RoutingDecision;

/// Per-expert affine maps `h' = W_i h + b_i` into a shared width `d`,
/// indexed by expert id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionLayer {
    pub dim: usize,
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl ProjectionLayer {
    pub fn zeros(hidden_dims: &[usize], dim: usize) -> Self {
        Self {
            dim,
            weights: hidden_dims.iter().map(|&di| Matrix::zeros(dim, di)).collect(),
            biases: vec![vec![0.0; dim]; hidden_dims.len()],
        }
    }

    /// Uniform in `±1/√d_i`, expert by expert.
    pub fn init(hidden_dims: &[usize], dim: usize, rng: &mut Rng) -> Self {
        let mut weights = Vec::with_capacity(hidden_dims.len());
        let mut biases = Vec::with_capacity(hidden_dims.len());
        for &di in hidden_dims {
            let bound = 1.0 / (di as f64).sqrt();
            weights.push(Matrix::uniform(dim, di, bound, rng));
            biases.push((0..dim).map(|_| rng.uniform(-bound, bound)).collect());
        }
        Self {
            dim,
            weights,
            biases,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.weights.len()
    }

    pub fn project_hidden(&self, expert: usize, hidden: &[f64]) -> Result<Vec<f64>> {
        let w = self.weights.get(expert).ok_or(Error::UnknownExpert(expert))?;
        affine(w, hidden, &self.biases[expert])
    }
}

pub fn project(output: &ExpertOutput, layer: &ProjectionLayer) -> Result<Vec<f64>> {
    layer.project_hidden(output.expert_id, &output.hidden)
}

/// Concatenated slots, one per routing budget position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedRepresentation {
    pub z: Vec<f64>,
    pub slot_ids: Vec<usize>,
    /// Gate of each occupied slot; padding slots carry 0.
    pub slot_gates: Vec<f64>,
}

fn lookup<'a>(projected: &'a BTreeMap<usize, Vec<f64>>, expert: usize) -> Result<&'a [f64]> {
    projected
        .get(&expert)
        .map(Vec::as_slice)
        .ok_or(Error::UnknownExpert(expert))
}

/// Slot `j` holds the `j`-th selected expert (ascending id), scaled by its
/// gate when `gate_scaling` is set. Slots past the selection are zero.
pub fn concat_fuse(
    decision: &RoutingDecision,
    projected: &BTreeMap<usize, Vec<f64>>,
    k: usize,
    gate_scaling: bool,
) -> Result<FusedRepresentation> {
    if decision.selected.len() > k {
        return Err(Error::InvalidArgument(format!(
            "{} experts selected but only {k} slots available",
            decision.selected.len()
        )));
    }
    let d = match decision.selected.first() {
        Some(&(e, _)) => lookup(projected, e)?.len(),
        None => return Err(Error::InvalidArgument("routing selected no expert".into())),
    };
    let mut z = vec![0.0; k * d];
    let mut slot_ids = Vec::with_capacity(k);
    let mut slot_gates = vec![0.0; k];
    for (j, &(e, g)) in decision.selected.iter().enumerate() {
        let h = lookup(projected, e)?;
        if h.len() != d {
            return Err(Error::Dimension {
                context: "concat_fuse",
                expected: d,
                actual: h.len(),
            });
        }
        let scale = if gate_scaling { g } else { 1.0 };
        for (dst, &v) in z[j * d..(j + 1) * d].iter_mut().zip(h) {
            *dst = scale * v;
        }
        slot_ids.push(e);
        slot_gates[j] = g;
    }
    Ok(FusedRepresentation {
        z,
        slot_ids,
        slot_gates,
    })
}

/// `Σ g_i h'_i` over the selected experts.
pub fn weighted_fuse(
    decision: &RoutingDecision,
    projected: &BTreeMap<usize, Vec<f64>>,
) -> Result<Vec<f64>> {
    let mut out: Option<Vec<f64>> = None;
    for &(e, g) in &decision.selected {
        let h = lookup(projected, e)?;
        let acc = out.get_or_insert_with(|| vec![0.0; h.len()]);
        if acc.len() != h.len() {
            return Err(Error::Dimension {
                context: "weighted_fuse",
                expected: acc.len(),
                actual: h.len(),
            });
        }
        for (a, &v) in acc.iter_mut().zip(h) {
            *a += g * v;
        }
    }
    out.ok_or_else(|| Error::InvalidArgument("routing selected no expert".into()))
}

/// `ŷ = σ(w_c · ReLU(W_p z + b_p) + b_c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub w_p: Matrix,
    pub b_p: Vec<f64>,
    pub w_c: Vec<f64>,
    pub b_c: f64,
}

impl ClassifierHead {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_p: Matrix::zeros(hidden, input),
            b_p: vec![0.0; hidden],
            w_c: vec![0.0; hidden],
            b_c: 0.0,
        }
    }

    pub fn init(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let bp = 1.0 / (input as f64).sqrt();
        let bc = 1.0 / (hidden as f64).sqrt();
        let w_p = Matrix::uniform(hidden, input, bp, rng);
        let b_p = (0..hidden).map(|_| rng.uniform(-bp, bp)).collect();
        let w_c = (0..hidden).map(|_| rng.uniform(-bc, bc)).collect();
        let b_c = rng.uniform(-bc, bc);
        Self { w_p, b_p, w_c, b_c }
    }

    pub fn input_width(&self) -> usize {
        self.w_p.cols()
    }

    pub fn hidden_width(&self) -> usize {
        self.w_p.rows()
    }

    /// Pre-activation of the hidden layer.
    pub fn hidden_pre(&self, z: &[f64]) -> Result<Vec<f64>> {
        affine(&self.w_p, z, &self.b_p)
    }

    /// Pre-sigmoid relevance logit.
    pub fn logit(&self, z: &[f64]) -> Result<f64> {
        let r = relu(&self.hidden_pre(z)?);
        Ok(dot(&self.w_c, &r) + self.b_c)
    }
}

pub fn classify(z: &[f64], head: &ClassifierHead) -> Result<f64> {
    head.logit(z).map(sigmoid)
}
