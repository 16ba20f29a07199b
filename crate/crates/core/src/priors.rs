//! Self-supervised consistency priors.
//!
//! * Temporal: predictions for a window and for the same window shifted a
//!   few frames back should agree within a tolerance `xi_t` (bpm):
//!   `L_t = sum_i max(0, |hr_a[i] - hr_b[i]| - xi_t)`.
//! * Spatial: in every latent feature map, activations at region `j` and at
//!   region `j + delta_s` should agree:
//!   `L_s = sum_maps sum_{j < H_i - delta_s} || F[:, j, :] - F[:, j + delta_s, :] ||_1`.
//!
//! The adaptation objective is `L_p = lambda_s * L_s + lambda_t * L_t`.

use serde::{Deserialize, Serialize};

use crate::adapter::{Evaluation, Objective};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::net::{BoundParams, Network};
use crate::stmap::WindowPair;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    pub lambda_s: f64,
    pub lambda_t: f64,
    /// Temporal tolerance, bpm.
    pub xi_t: f64,
    /// Region offset compared by the spatial prior.
    pub delta_s: usize,
    /// Upper bound of the random temporal shift, frames.
    pub delta_max: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            lambda_s: 0.001,
            lambda_t: 0.01,
            xi_t: 8.0,
            delta_s: 1,
            delta_max: 59,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_s.is_finite()
            && self.lambda_s >= 0.0
            && self.lambda_t.is_finite()
            && self.lambda_t >= 0.0
            && self.xi_t.is_finite()
            && self.xi_t >= 0.0
            && self.delta_s >= 1
            && self.delta_max >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!(
                "invalid prior config {self:?}"
            )))
        }
    }
}

/// Records the temporal consistency loss between two equal-length vectors.
pub fn tcl(graph: &mut Graph, hr_a: NodeId, hr_b: NodeId, xi_t: f64) -> Result<NodeId> {
    let (sa, sb) = (graph.value(hr_a).shape(), graph.value(hr_b).shape());
    if sa.len() != 1 || sa != sb {
        return Err(Error::ShapeMismatch {
            op: "tcl",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        });
    }
    let diff = graph.sub(hr_a, hr_b)?;
    let dist = graph.abs(diff)?;
    let excess = graph.hinge(dist, xi_t)?;
    graph.sum(excess)
}

/// Records the spatial consistency loss over `[C, H, W]` feature maps,
/// comparing slices along the region axis (axis 1). Maps with at most
/// `delta_s` regions contribute nothing.
pub fn scl(graph: &mut Graph, features: &[NodeId], delta_s: usize) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for &map in features {
        let shape = graph.value(map).shape();
        if shape.len() != 3 {
            return Err(Error::InvalidOperand {
                op: "scl",
                reason: format!("feature maps must be [C, H, W], got {shape:?}"),
            });
        }
        let regions = shape[1];
        if delta_s == 0 || regions <= delta_s {
            continue;
        }
        let span = regions - delta_s;
        let head = graph.slice(map, 1, 0, span)?;
        let tail = graph.slice(map, 1, delta_s, span)?;
        let diff = graph.sub(head, tail)?;
        let dist = graph.abs(diff)?;
        let term = graph.sum(dist)?;
        total = Some(match total {
            Some(acc) => graph.add(acc, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => graph.constant(Tensor::scalar(0.0)),
    })
}

pub fn tcl_value(hr_a: &[f64], hr_b: &[f64], xi_t: f64) -> Result<f64> {
    if hr_a.len() != hr_b.len() {
        return Err(Error::SeriesLength(hr_a.len(), hr_b.len()));
    }
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(hr_a.to_vec()));
    let b = g.constant(Tensor::vector(hr_b.to_vec()));
    let loss = tcl(&mut g, a, b, xi_t)?;
    Ok(g.value(loss).data()[0])
}

pub fn scl_value(features: &[Tensor], delta_s: usize) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = features.iter().map(|f| g.constant(f.clone())).collect();
    let loss = scl(&mut g, &ids, delta_s)?;
    Ok(g.value(loss).data()[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PriorTerms {
    pub total: f64,
    pub temporal: f64,
    pub spatial: f64,
}

/// Node ids of a recorded prior loss.
#[derive(Debug, Clone, Copy)]
pub struct PriorNodes {
    pub total: NodeId,
    pub temporal: NodeId,
    pub spatial: NodeId,
    pub hr_current: NodeId,
}

/// Runs the network on both windows of `pair` and records `L_p`. The spatial
/// term uses the current window's features only.
pub fn record_prior_loss(
    graph: &mut Graph,
    net: &Network,
    params: &[f64],
    pair: &WindowPair,
    config: &PriorConfig,
) -> Result<(PriorNodes, BoundParams)> {
    let bound = net.bind(graph, params)?;
    let current = net.forward(graph, &bound, &pair.current)?;
    let shifted = net.forward(graph, &bound, &pair.shifted)?;
    let temporal = tcl(graph, current.hr, shifted.hr, config.xi_t)?;
    let spatial = scl(graph, &current.features, config.delta_s)?;
    let ws = graph.scale(spatial, config.lambda_s)?;
    let wt = graph.scale(temporal, config.lambda_t)?;
    let total = graph.add(ws, wt)?;
    Ok((
        PriorNodes {
            total,
            temporal,
            spatial,
            hr_current: current.hr,
        },
        bound,
    ))
}

/// Evaluates `L_p` without differentiating.
pub fn prior_loss_value(
    net: &Network,
    params: &[f64],
    pair: &WindowPair,
    config: &PriorConfig,
) -> Result<PriorTerms> {
    let mut graph = Graph::new();
    let (nodes, _) = record_prior_loss(&mut graph, net, params, pair, config)?;
    Ok(PriorTerms {
        total: graph.value(nodes.total).data()[0],
        temporal: graph.value(nodes.temporal).data()[0],
        spatial: graph.value(nodes.spatial).data()[0],
    })
}

/// Evaluates `L_p` and its gradient with respect to the flat parameters.
pub fn prior_loss(
    net: &Network,
    params: &[f64],
    pair: &WindowPair,
    config: &PriorConfig,
) -> Result<(PriorTerms, Vec<f64>)> {
    let mut graph = Graph::new();
    let (nodes, bound) = record_prior_loss(&mut graph, net, params, pair, config)?;
    let terms = PriorTerms {
        total: graph.value(nodes.total).data()[0],
        temporal: graph.value(nodes.temporal).data()[0],
        spatial: graph.value(nodes.spatial).data()[0],
    };
    let grads = graph.backward(nodes.total)?;
    Ok((terms, bound.flat_gradient(&grads)))
}

/// `L_p` on one window pair as an adaptation objective.
pub struct PriorObjective<'a> {
    pub net: &'a Network,
    pub pair: &'a WindowPair,
    pub config: &'a PriorConfig,
}

impl Objective for PriorObjective<'_> {
    type Aux = PriorTerms;

    fn evaluate(&mut self, params: &[f64]) -> Result<Evaluation<PriorTerms>> {
        let (terms, grad) = prior_loss(self.net, params, self.pair, self.config)?;
        Ok(Evaluation {
            loss: terms.total,
            grad,
            aux: terms,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tcl_identical_is_zero() {
        assert_eq!(
            tcl_value(&[70.0, 80.0, 90.0], &[70.0, 80.0, 90.0], 8.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn tcl_worked_case() {
        assert_eq!(tcl_value(&[10.0, 0.0], &[0.0, 0.0], 8.0).unwrap(), 2.0);
    }

    #[test]
    fn tcl_inside_tolerance_has_zero_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::vector(vec![70.0, 72.0, 75.0]));
        let b = g.leaf(Tensor::vector(vec![71.0, 65.0, 80.0]));
        let loss = tcl(&mut g, a, b, 8.0).unwrap();
        assert_eq!(g.value(loss).data(), &[0.0]);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(a).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(grads.get(b).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tcl_length_mismatch() {
        assert!(tcl_value(&[1.0, 2.0], &[1.0], 8.0).is_err());
    }

    #[test]
    fn scl_worked_case() {
        // One channel, three regions, two time steps: columns (1,1), (2,2), (4,4).
        let map = Tensor::new(vec![1, 3, 2], vec![1.0, 1.0, 2.0, 2.0, 4.0, 4.0]).unwrap();
        assert_eq!(scl_value(&[map], 1).unwrap(), 6.0);
    }

    #[test]
    fn scl_constant_and_empty() {
        let flat = Tensor::new(vec![2, 4, 3], (0..24).map(|i| (i / 12) as f64).collect()).unwrap();
        assert_eq!(scl_value(std::slice::from_ref(&flat), 1).unwrap(), 0.0);
        let varied = Tensor::new(vec![1, 3, 2], vec![1.0, 5.0, 2.0, 0.0, 3.0, 9.0]).unwrap();
        assert_eq!(scl_value(std::slice::from_ref(&varied), 3).unwrap(), 0.0);
        assert_eq!(scl_value(&[varied], 7).unwrap(), 0.0);
        assert_eq!(scl_value(&[], 1).unwrap(), 0.0);
    }

    #[test]
    fn defaults_match_published_settings() {
        let c = PriorConfig::default();
        assert_eq!(
            (c.lambda_s, c.lambda_t, c.xi_t, c.delta_max),
            (0.001, 0.01, 8.0, 59)
        );
    }
}
