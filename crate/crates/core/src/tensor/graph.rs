use super::{Real, Tensor5};
use crate::error::{DdnError, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A differentiable operation recorded on the tape.
///
/// `forward` may stash whatever it needs for `backward` in `self`; it is
/// re-run when leaf values change (see [`Graph::recompute`]).
pub trait Op<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&mut self, inputs: &[&Tensor5<T>]) -> Result<Tensor5<T>>;

    /// Gradients with respect to each input. Entries whose `needs` flag is
    /// false may be returned as `None`.
    fn backward(
        &self,
        inputs: &[&Tensor5<T>],
        output: &Tensor5<T>,
        grad: &Tensor5<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor5<T>>>;
}

enum Kind<T: Real> {
    Input,
    Param(String),
    Op(Box<dyn Op<T>>),
}

struct Node<T: Real> {
    kind: Kind<T>,
    inputs: Vec<NodeId>,
    value: Tensor5<T>,
    requires_grad: bool,
}

/// Define-by-run tape. Nodes are stored in creation order, which is a
/// topological order because an op can only consume existing nodes.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor5<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor5<T>) -> NodeId {
        self.push(Kind::Input, Vec::new(), value, false)
    }

    /// A named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor5<T>) -> NodeId {
        self.push(Kind::Param(name.into()), Vec::new(), value, true)
    }

    pub fn apply(&mut self, mut op: impl Op<T> + 'static, inputs: &[NodeId]) -> Result<NodeId> {
        let value = {
            let vals: Vec<&Tensor5<T>> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
            op.forward(&vals)?
        };
        check_finite(op.name(), &value)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push(Kind::Op(Box::new(op)), inputs.to_vec(), value, requires_grad))
    }

    fn push(&mut self, kind: Kind<T>, inputs: Vec<NodeId>, value: Tensor5<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            kind,
            inputs,
            value,
            requires_grad,
        });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor5<T> {
        &self.nodes[id.0].value
    }

    pub fn take_value(&mut self, id: NodeId) -> Tensor5<T> {
        std::mem::replace(&mut self.nodes[id.0].value, Tensor5::zeros([0, 0, 0, 0, 0]))
    }

    pub fn op_name(&self, id: NodeId) -> &str {
        match &self.nodes[id.0].kind {
            Kind::Input => "input",
            Kind::Param(_) => "param",
            Kind::Op(op) => op.name(),
        }
    }

    /// Trainable leaves in creation order.
    pub fn params(&self) -> Vec<(NodeId, &str)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.kind {
                Kind::Param(name) => Some((NodeId(i), name.as_str())),
                _ => None,
            })
            .collect()
    }

    /// Replaces a leaf value. Call [`Graph::recompute`] afterwards.
    pub fn set_value(&mut self, id: NodeId, value: Tensor5<T>) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if matches!(node.kind, Kind::Op(_)) {
            return Err(DdnError::shape("only leaf values can be replaced"));
        }
        if node.value.shape() != value.shape() {
            return Err(DdnError::shape(format!(
                "leaf shape {:?} cannot take {:?}",
                node.value.shape(),
                value.shape()
            )));
        }
        node.value = value;
        Ok(())
    }

    /// Re-runs every op node.
    pub fn recompute(&mut self) -> Result<()> {
        self.recompute_after(None)
    }

    /// Re-runs the op nodes that depend on `changed` (all nodes when `None`).
    fn recompute_after(&mut self, changed: Option<NodeId>) -> Result<()> {
        let mut dirty = vec![changed.is_none(); self.nodes.len()];
        let start = match changed {
            Some(id) => {
                dirty[id.0] = true;
                id.0 + 1
            }
            None => 0,
        };
        for i in start..self.nodes.len() {
            if !matches!(self.nodes[i].kind, Kind::Op(_)) {
                continue;
            }
            if changed.is_some() {
                if !self.nodes[i].inputs.iter().any(|j| dirty[j.0]) {
                    continue;
                }
                dirty[i] = true;
            }
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            let vals: Vec<&Tensor5<T>> = node.inputs.iter().map(|j| &before[j.0].value).collect();
            if let Kind::Op(op) = &mut node.kind {
                let v = op.forward(&vals)?;
                check_finite(op.name(), &v)?;
                node.value = v;
            }
        }
        Ok(())
    }

    /// Reverse-mode accumulation from a scalar node. Gradients of leaves
    /// that require them are available through [`Graph::grad`] afterwards.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(DdnError::shape(format!(
                "backward needs a scalar loss, node has shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor5::filled(self.nodes[loss.0].value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Kind::Op(op) = &node.kind else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = self.grads[i].take() else { continue };
            let needs: Vec<bool> = node
                .inputs
                .iter()
                .map(|j| self.nodes[j.0].requires_grad)
                .collect();
            let vals: Vec<&Tensor5<T>> = node.inputs.iter().map(|j| &self.nodes[j.0].value).collect();
            let in_grads = op.backward(&vals, &node.value, &grad, &needs);
            debug_assert_eq!(in_grads.len(), node.inputs.len());
            for ((j, g), need) in node.inputs.iter().zip(in_grads).zip(needs) {
                let Some(g) = g else { continue };
                if !need {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.nodes[j.0].value.shape(), "{}", op.name());
                match &mut self.grads[j.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor5<T>> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of every parameter (zeros when the loss does not depend on it).
    pub fn param_grads(&self) -> Vec<(String, Tensor5<T>)> {
        self.params()
            .into_iter()
            .map(|(id, name)| {
                let g = self.grads[id.0]
                    .clone()
                    .unwrap_or_else(|| Tensor5::zeros(self.nodes[id.0].value.shape()));
                (name.to_string(), g)
            })
            .collect()
    }
}

fn check_finite<T: Real>(name: &str, v: &Tensor5<T>) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(DdnError::Numeric(format!("{name} produced a non-finite value")))
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Parameter, flat index, analytic and numeric gradient at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares backward gradients of every parameter coordinate against central
/// differences `(L(p + eps) - L(p - eps)) / 2 eps`.
///
/// Relative error is `|a - b| / max(1e-8, |a| + |b|)`.
pub fn grad_check<T: Real>(graph: &mut Graph<T>, loss: NodeId, eps: f64) -> Result<GradCheck> {
    graph.backward(loss)?;
    let params: Vec<(NodeId, String)> = graph
        .params()
        .into_iter()
        .map(|(id, n)| (id, n.to_string()))
        .collect();
    let analytic: Vec<Tensor5<T>> = params
        .iter()
        .map(|(id, _)| {
            graph
                .grad(*id)
                .cloned()
                .unwrap_or_else(|| Tensor5::zeros(graph.value(*id).shape()))
        })
        .collect();

    let mut report = GradCheck {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    let eval = |g: &mut Graph<T>, id: NodeId, t: Tensor5<T>| -> Result<f64> {
        g.set_value(id, t)?;
        g.recompute_after(Some(id))?;
        Ok(g.value(loss).item().f64())
    };
    for ((id, name), grad) in params.iter().zip(&analytic) {
        let original = graph.value(*id).clone();
        for k in 0..original.len() {
            let mut plus = original.clone();
            plus.data_mut()[k] = T::of(original.data()[k].f64() + eps);
            let mut minus = original.clone();
            minus.data_mut()[k] = T::of(original.data()[k].f64() - eps);
            let lp = eval(graph, *id, plus)?;
            let lm = eval(graph, *id, minus)?;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = grad.data()[k].f64();
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((name.clone(), k, a, numeric));
            }
        }
        graph.set_value(*id, original)?;
        graph.recompute_after(Some(*id))?;
    }
    Ok(report)
}
