//! Error-routing strategies: which error signal each layer receives and
//! which constraints hold on the feedback matrices.
//!
//! | kind | source     | feedback `V`                         |
//! |------|------------|--------------------------------------|
//! | tied | layerwise  | mirrors `W_{l+1}^T` (SGD limit)      |
//! | fa   | layerwise  | fixed at initialisation              |
//! | dfa  | direct     | fixed at initialisation              |
//! | kp   | either     | plastic, shares decay with `W`       |

use serde::{Deserialize, Serialize};

use crate::linalg::{cosine, Matrix};
use crate::network::{ConfigError, Network, NetworkState, OutputError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingKind {
    Tied,
    Fa,
    Dfa,
    Kp,
}

/// Where hidden layers take their error from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ErrorSource {
    /// `eps_l = m_{l+1}`, the modulatory drive of the layer above.
    Layerwise,
    /// `eps_l = e_L` for every layer.
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingStrategy {
    pub kind: RoutingKind,
    pub source: ErrorSource,
}

impl RoutingStrategy {
    pub fn new(kind: RoutingKind, source: ErrorSource) -> Result<Self, ConfigError> {
        match (kind, source) {
            (RoutingKind::Dfa, ErrorSource::Layerwise) => {
                Err(ConfigError::Routing("dfa broadcasts the output error; use source = direct".into()))
            }
            (RoutingKind::Tied | RoutingKind::Fa, ErrorSource::Direct) => {
                Err(ConfigError::Routing(format!("{kind:?} routing requires layerwise error source")))
            }
            _ => Ok(Self { kind, source }),
        }
    }

    pub fn tied() -> Self {
        Self { kind: RoutingKind::Tied, source: ErrorSource::Layerwise }
    }
    pub fn fa() -> Self {
        Self { kind: RoutingKind::Fa, source: ErrorSource::Layerwise }
    }
    pub fn dfa() -> Self {
        Self { kind: RoutingKind::Dfa, source: ErrorSource::Direct }
    }
    /// Layerwise routing with plastic feedback (KP / weight mirror).
    pub fn kp_layerwise() -> Self {
        Self { kind: RoutingKind::Kp, source: ErrorSource::Layerwise }
    }
    /// Direct routing with plastic feedback.
    pub fn kp_direct() -> Self {
        Self { kind: RoutingKind::Kp, source: ErrorSource::Direct }
    }

    pub fn v_trainable(&self) -> bool {
        self.kind == RoutingKind::Kp
    }

    /// Dimension of the error signal arriving at (0-based) layer `layer`
    /// of a network with widths `d_0..d_L`.
    pub fn source_dim(&self, widths: &[usize], layer: usize) -> usize {
        let top = widths.len() - 2;
        let out = widths[top + 1];
        if layer == top {
            return out;
        }
        match self.source {
            ErrorSource::Layerwise => widths[layer + 2],
            ErrorSource::Direct => out,
        }
    }
}

/// Per-layer routed errors `eps_l` and modulatory drives `m_l = V_l eps_l`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutedErrors {
    pub eps: Vec<Vec<f64>>,
    pub drive: Vec<Vec<f64>>,
}

/// Routes a given output error `e_L` through the network in `state`, with
/// `x` as the current input (needed only for the optional derivative gate).
pub fn route_errors(net: &Network, state: &NetworkState, x: &[f64], e_out: &[f64]) -> RoutedErrors {
    let flat = state.flatten();
    let mut scratch = net.scratch();
    net.forward_pre(&flat, x, &mut scratch);
    net.backward(&flat, e_out, &mut scratch);
    RoutedErrors { eps: scratch.eps.clone(), drive: scratch.drive.clone() }
}

/// Re-imposes the routing constraints on `V` after a solver step:
/// tied mirrors `W_{l+1}^T`, fa/dfa restore the initial feedback, kp is free.
pub fn apply_constraints(net: &Network, state: &mut NetworkState, initial: &NetworkState) {
    let mut flat = state.flatten();
    net.apply_constraints_flat(&mut flat, &initial.flatten());
    *state = NetworkState::unflatten(net.layout(), state.t, &flat).expect("layout unchanged");
}

/// Cosine between `vec(V_l)` and `vec(W_{l+1}^T)` for each hidden layer;
/// `None` when the shapes differ (direct routing) or a matrix is zero.
pub fn feedback_alignment(net: &Network, state: &NetworkState) -> Vec<Option<f64>> {
    let hidden = net.num_layers() - 1;
    (0..hidden)
        .map(|l| {
            let v = &state.v[l];
            let w_next = state.w[l + 1].columns(net.widths()[l + 1]).transpose();
            if (v.rows, v.cols) != (w_next.rows, w_next.cols) {
                return None;
            }
            cosine(&v.data, &w_next.data)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentMetrics {
    /// Per hidden layer, V against the transposed forward weights above it.
    pub feedback: Vec<Option<f64>>,
    /// Per layer, routed quasi-static update against the tied-routing update.
    pub gradient: Vec<Option<f64>>,
}

/// Gradient alignment over a probe set: the summed equilibrium update of the
/// network's own routing compared with the summed tied-routing update on the
/// same state and samples.
pub fn gradient_alignment(net: &Network, state: &NetworkState, probes: &[(Vec<f64>, Vec<f64>)]) -> Vec<Option<f64>> {
    let tied = net.with_routing(RoutingStrategy::tied());
    let mut own_sum: Option<Vec<Matrix>> = None;
    let mut tied_sum: Option<Vec<Matrix>> = None;
    for (x, y) in probes {
        let own = net.equilibrium_update(state, x, OutputError::Target(y));
        let reference = tied.equilibrium_update(state, x, OutputError::Target(y));
        accumulate(&mut own_sum, own);
        accumulate(&mut tied_sum, reference);
    }
    match (own_sum, tied_sum) {
        (Some(a), Some(b)) => a.iter().zip(&b).map(|(x, y)| cosine(&x.data, &y.data)).collect(),
        _ => vec![None; net.num_layers()],
    }
}

fn accumulate(sum: &mut Option<Vec<Matrix>>, update: Vec<Matrix>) {
    match sum {
        None => *sum = Some(update),
        Some(s) => s.iter_mut().zip(&update).for_each(|(a, b)| a.add_assign(b)),
    }
}

pub fn alignment_metrics(net: &Network, state: &NetworkState, probes: &[(Vec<f64>, Vec<f64>)]) -> AlignmentMetrics {
    AlignmentMetrics { feedback: feedback_alignment(net, state), gradient: gradient_alignment(net, state, probes) }
}
