//! Dense tensors, a define-by-run compute graph with reverse-mode gradients,
//! named parameter stores and a finite-difference checker.

mod check;
mod graph;
mod params;
mod tensor;

pub use check::{grad_check, GradCheckReport, REL_FLOOR};
pub use graph::{Gradients, Graph, NodeId};
pub use params::{ParamId, ParamKey, ParamStore, Parameterized};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Softmax of a plain tensor along `axis`, outside of any graph.
pub fn softmax(logits: &Tensor, axis: usize) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone())?;
    let y = g.softmax(x, axis)?;
    Ok(g.value(y).clone())
}

/// `-log softmax(logits)[target]` for a single logit vector.
pub fn cross_entropy_from_logits(logits: &Tensor, target: usize) -> Result<f64> {
    if target >= logits.numel() {
        return Err(Error::Index(format!("target {target} out of range for {} logits", logits.numel())));
    }
    let mut g = Graph::new();
    let x = g.constant(logits.clone())?;
    let l = g.cross_entropy(x, &[target])?;
    Ok(g.value(l).item())
}
