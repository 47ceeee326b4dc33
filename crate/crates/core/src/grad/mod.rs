//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] records operations on a tape as they execute; [`Tensor`] is a
//! cheap handle into it. Calling [`Graph::backward`] on a scalar loss fills
//! in gradients for every recorded node that requires them. Each op's
//! backward rule is a closure capturing the forward values it needs, so the
//! sweep itself is a single reverse pass with no graph re-walking.
//!
//! Graphs are confined to one thread by construction (`Rc`); independent
//! graphs parallelize freely.

mod ops;
pub mod checkpoint;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

/// Backward rule: given the node's output gradient, produce one gradient per
/// parent, in parent order.
type VjpFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    parents: Vec<usize>,
    vjp: Option<VjpFn>,
    requires_grad: bool,
}

#[derive(Default)]
struct GraphInner {
    nodes: Vec<Node>,
}

/// A recording tape. Clone handles freely; they share the same tape.
#[derive(Clone, Default)]
pub struct Graph {
    inner: Rc<RefCell<GraphInner>>,
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
    shape: Vec<usize>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<usize>,
        vjp: Option<VjpFn>,
        requires_grad: bool,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            data,
            grad: None,
            parents,
            vjp: if requires_grad { vjp } else { None },
            requires_grad,
        });
        Tensor { graph: self.clone(), id, shape }
    }

    /// A differentiable input (weights, the waveform under attack, ...).
    pub fn leaf(&self, data: Vec<f64>, shape: &[usize]) -> Tensor {
        self.push(shape.to_vec(), data, vec![], None, true)
    }

    /// A value gradients do not flow into.
    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Tensor {
        self.push(shape.to_vec(), data, vec![], None, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor {
        self.constant(vec![v], &[1])
    }

    /// Record a unary op with an explicit forward value and backward rule.
    /// This is how domain modules register bespoke nodes (FFT power spectra,
    /// framing, frozen-assignment feature compression, BPDA).
    pub fn custom_unary(
        &self,
        input: &Tensor,
        out_shape: Vec<usize>,
        out_data: Vec<f64>,
        vjp: impl Fn(&[f64]) -> Vec<f64> + 'static,
    ) -> Tensor {
        let rg = input.requires_grad();
        self.push(
            out_shape,
            out_data,
            vec![input.id],
            Some(Box::new(move |g| vec![vjp(g)])),
            rg,
        )
    }

    /// Reverse accumulation from a scalar loss. Fills `grad` on every node
    /// reachable from the loss that requires gradients; visits each node
    /// exactly once.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape
            )));
        }
        let mut inner = self.inner.borrow_mut();
        if !inner.nodes[loss.id].requires_grad {
            return Err(Error::Contract(
                "loss does not depend on any differentiable input".into(),
            ));
        }
        for node in &mut inner.nodes {
            node.grad = None;
        }
        inner.nodes[loss.id].grad = Some(vec![1.0]);

        // The tape is already topologically ordered: parents precede children.
        for id in (0..=loss.id).rev() {
            let Some(grad) = inner.nodes[id].grad.take() else {
                continue;
            };
            let parent_grads = match &inner.nodes[id].vjp {
                Some(vjp) => vjp(&grad),
                None => {
                    inner.nodes[id].grad = Some(grad);
                    continue;
                }
            };
            let parents = inner.nodes[id].parents.clone();
            debug_assert_eq!(parent_grads.len(), parents.len());
            for (pid, pg) in parents.into_iter().zip(parent_grads) {
                if !inner.nodes[pid].requires_grad {
                    continue;
                }
                match &mut inner.nodes[pid].grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&pg) {
                            *a += b;
                        }
                    }
                    None => inner.nodes[pid].grad = Some(pg),
                }
            }
            inner.nodes[id].grad = Some(grad);
        }
        Ok(())
    }
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        numel(&self.shape)
    }

    pub fn value(&self) -> Vec<f64> {
        self.graph.inner.borrow().nodes[self.id].data.clone()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.graph.inner.borrow().nodes[self.id].data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.inner.borrow().nodes[self.id].grad.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.inner.borrow().nodes[self.id].requires_grad
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }

    /// Run `f` with a borrow of the forward value, without cloning.
    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.graph.inner.borrow().nodes[self.id].data)
    }

    pub(crate) fn binary_op(
        &self,
        other: &Tensor,
        shape: Vec<usize>,
        data: Vec<f64>,
        vjp: impl Fn(&[f64]) -> Vec<Vec<f64>> + 'static,
    ) -> Tensor {
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(
            shape,
            data,
            vec![self.id, other.id],
            Some(Box::new(vjp)),
            rg,
        )
    }

    pub(crate) fn unary_op(
        &self,
        shape: Vec<usize>,
        data: Vec<f64>,
        vjp: impl Fn(&[f64]) -> Vec<f64> + 'static,
    ) -> Tensor {
        self.graph.custom_unary(self, shape, data, vjp)
    }
}

/// Compare the backward gradient of `f` against central finite differences
/// at `x`, sampling up to `max_coords` coordinates. Returns the maximum
/// relative error over the sampled coordinates.
pub fn grad_check(
    f: impl Fn(&Graph, &Tensor) -> Result<Tensor>,
    x: &[f64],
    shape: &[usize],
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64> {
    let g = Graph::new();
    let xt = g.leaf(x.to_vec(), shape);
    let loss = f(&g, &xt)?;
    g.backward(&loss)?;
    let analytic = xt.grad().ok_or_else(|| Error::Contract("input got no gradient".into()))?;

    let mut coords: Vec<usize> = (0..x.len()).collect();
    if coords.len() > max_coords {
        // Deterministic subsample.
        let mut state = seed;
        let mut picked = Vec::with_capacity(max_coords);
        for _ in 0..max_coords {
            state = crate::rng::splitmix64(state);
            picked.push((state % x.len() as u64) as usize);
        }
        picked.sort_unstable();
        picked.dedup();
        coords = picked;
    }

    let eval = |xs: &[f64]| -> Result<f64> {
        let g = Graph::new();
        let xt = g.leaf(xs.to_vec(), shape);
        Ok(f(&g, &xt)?.item())
    };

    let mut worst = 0.0f64;
    let mut perturbed = x.to_vec();
    for &i in &coords {
        let orig = perturbed[i];
        perturbed[i] = orig + h;
        let fp = eval(&perturbed)?;
        perturbed[i] = orig - h;
        let fm = eval(&perturbed)?;
        perturbed[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs());
        if denom > 1e-10 {
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        } else {
            worst = worst.max((analytic[i] - numeric).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], &[2]);
        let loss = x.square().unwrap().sum().unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn relu_kink_sides() {
        for (v, expect) in [(-1.0, 0.0), (1.0, 1.0)] {
            let g = Graph::new();
            let x = g.leaf(vec![v], &[1]);
            let loss = x.relu().unwrap().sum().unwrap();
            g.backward(&loss).unwrap();
            assert_eq!(x.grad().unwrap(), vec![expect]);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], &[2]);
        let y = x.square().unwrap();
        assert!(matches!(g.backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_is_idempotent_per_graph() {
        let g = Graph::new();
        let x = g.leaf(vec![3.0, -1.0], &[2]);
        let loss = x.square().unwrap().sum().unwrap();
        g.backward(&loss).unwrap();
        let first = x.grad().unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), first);
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let err = grad_check(
            |g, x| {
                let w = g.constant(vec![2.0, -3.0, 0.5], &[3]);
                x.mul(&w)?.sum()
            },
            &[0.3, -0.2, 0.9],
            &[3],
            1e-4,
            8,
            0,
        )
        .unwrap();
        assert!(err <= 1e-8, "relative error {err}");
    }

    #[test]
    fn fan_out_accumulates() {
        // loss = x*x + 3x; dl/dx = 2x + 3.
        let g = Graph::new();
        let x = g.leaf(vec![2.0], &[1]);
        let sq = x.mul(&x).unwrap();
        let lin = x.scale(3.0).unwrap();
        let loss = sq.add(&lin).unwrap().sum().unwrap();
        g.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }
}
