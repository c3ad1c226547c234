//! Dense N-dimensional f64 arrays with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap-to-clone handle onto an immutable value node.
//! Applying an operation records the inputs and a backward rule on the
//! result node; [`Tensor::backward`] traces the reachable subgraph in
//! topological order and accumulates gradients into every leaf that was
//! created with `requires_grad`.
//!
//! Everything is 64-bit and strictly sequential, so identical inputs
//! produce bit-identical forward values and gradients.

mod conv;
mod interp;
mod norm;
mod ops;

pub mod gradcheck;

pub use conv::conv3d;
pub use interp::{avg_pool3d, upsample_trilinear};
pub use norm::instance_norm;
pub use ops::{concat_channels, global_avg_pool, linear};

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Backward rule attached to a non-leaf node.
///
/// `backward` receives the node's forward value and incoming gradient and
/// returns one gradient per parent (`None` for parents that do not require
/// grad — those gradients are never materialized).
pub(crate) trait OpNode {
    fn parents(&self) -> Vec<Tensor>;
    fn backward(&self, out_data: &[f64], out_grad: &[f64]) -> Vec<Option<Vec<f64>>>;
    fn name(&self) -> &'static str;
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    op: Option<Box<dyn OpNode>>,
}

/// Handle onto a node of the computation graph.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.node.id)
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("op", &self.node.op.as_ref().map(|o| o.name()))
            .finish()
    }
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Option<Box<dyn OpNode>>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad,
                grad: RefCell::new(None),
                op,
            }),
        }
    }

    /// Constant tensor (does not require grad).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor::new(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates gradients (a learnable parameter).
    pub fn parameter(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor::new(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), vec![0.0; shape.iter().product()], false, None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::new(shape.to_vec(), vec![value; shape.iter().product()], false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::new(vec![1], vec![value], false, None)
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Box<dyn OpNode>) -> Tensor {
        let requires = op.parents().iter().any(|p| p.requires_grad());
        Tensor::new(shape, data, requires, if requires { Some(op) } else { None })
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Borrow the forward value.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.node.data.borrow(), |v| v.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.borrow().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data.borrow()[0]
    }

    /// Accumulated gradient, if backward has reached this node.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// In-place update of a leaf's value (optimizer steps, finite differences).
    pub fn update_data(&self, f: impl FnOnce(&mut [f64])) {
        f(self.node.data.borrow_mut().as_mut_slice());
    }

    /// Replace the value, keeping the shape.
    pub fn set_data(&self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::Dimension(format!(
                "set_data: expected {} elements for shape {:?}, got {}",
                self.numel(),
                self.shape(),
                data.len()
            )));
        }
        *self.node.data.borrow_mut() = data;
        Ok(())
    }

    fn accumulate_grad(&self, contribution: &[f64]) {
        debug_assert_eq!(contribution.len(), self.numel());
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            None => *slot = Some(contribution.to_vec()),
        }
    }

    /// Reverse-mode differentiation from a scalar loss.
    ///
    /// Accumulates into the `grad` slot of every reachable node that
    /// requires grad; leaves keep their gradient until `zero_grad`.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Usage(
                "backward on a tensor that does not require grad".into(),
            ));
        }
        let graph = Graph::trace(self);
        self.accumulate_grad(&[1.0]);
        for t in graph.order.iter().rev() {
            let op = match &t.node.op {
                Some(op) => op,
                None => continue,
            };
            let out_grad = match t.node.grad.borrow().clone() {
                Some(g) => g,
                None => continue,
            };
            let parent_grads = {
                let out_data = t.data();
                op.backward(&out_data, &out_grad)
            };
            let parents = op.parents();
            debug_assert_eq!(parents.len(), parent_grads.len());
            for (parent, pg) in parents.iter().zip(parent_grads) {
                if let Some(pg) = pg {
                    debug_assert!(parent.requires_grad(), "gradient for non-grad parent");
                    parent.accumulate_grad(&pg);
                }
            }
            // Interior gradients are not needed once consumed.
            if t.node.op.is_some() && t.node.id != self.node.id {
                *t.node.grad.borrow_mut() = None;
            }
        }
        Ok(())
    }
}

/// Topologically ordered record of the grad-requiring subgraph below a root.
pub struct Graph {
    order: Vec<Tensor>,
}

impl Graph {
    /// Depth-first trace; `order` lists every reachable grad-requiring node
    /// exactly once, parents before children.
    pub fn trace(root: &Tensor) -> Graph {
        enum Visit {
            Enter(Tensor),
            Exit(Tensor),
        }
        let mut order = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut stack = vec![Visit::Enter(root.clone())];
        while let Some(v) = stack.pop() {
            match v {
                Visit::Enter(t) => {
                    if !seen.insert(t.node.id) {
                        continue;
                    }
                    stack.push(Visit::Exit(t.clone()));
                    if let Some(op) = &t.node.op {
                        for p in op.parents() {
                            if p.requires_grad() && !seen.contains(&p.node.id) {
                                stack.push(Visit::Enter(p));
                            }
                        }
                    }
                }
                Visit::Exit(t) => order.push(t),
            }
        }
        Graph { order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Node ids in topological order (parents before children).
    pub fn node_ids(&self) -> Vec<u64> {
        self.order.iter().map(|t| t.node.id).collect()
    }

    /// True if every node appears after all of its parents.
    pub fn is_topologically_ordered(&self) -> bool {
        let mut position = std::collections::HashMap::new();
        for (i, t) in self.order.iter().enumerate() {
            position.insert(t.node.id, i);
        }
        for (i, t) in self.order.iter().enumerate() {
            if let Some(op) = &t.node.op {
                for p in op.parents() {
                    if p.requires_grad() {
                        match position.get(&p.node.id) {
                            Some(&j) if j < i => {}
                            _ => return false,
                        }
                    }
                }
            }
        }
        true
    }
}

/// Standard-normal tensor from a seeded generator.
pub fn randn<R: rand::Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    use rand_distr::StandardNormal;
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(shape.to_vec(), data, false, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let w = Tensor::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let y = w.mul_scalar(2.0);
        assert!(matches!(y.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let w = Tensor::parameter(&[2, 3], vec![0.5; 6]).unwrap();
        let loss = w.sum();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let w = Tensor::parameter(&[2], vec![1.0, -2.0]).unwrap();
        let loss = w.mul(&w).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, -4.0]);
    }

    #[test]
    fn fanout_accumulates_twice() {
        let w = Tensor::parameter(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let single = w.sum();
        single.backward().unwrap();
        let g1 = w.grad().unwrap();
        w.zero_grad();

        let double = w.sum().add(&w.sum()).unwrap();
        double.backward().unwrap();
        let g2 = w.grad().unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(*b, 2.0 * *a);
        }
    }

    #[test]
    fn graph_visits_each_node_once_in_topo_order() {
        // Diamond: w -> a, w -> b, loss = a + b.
        let w = Tensor::parameter(&[2], vec![1.0, 2.0]).unwrap();
        let a = w.mul_scalar(2.0);
        let b = w.mul_scalar(3.0);
        let loss = a.add(&b).unwrap().sum();
        let graph = Graph::trace(&loss);
        let ids = graph.node_ids();
        let unique: std::collections::HashSet<_> = ids.iter().collect();
        assert_eq!(unique.len(), ids.len(), "node visited more than once");
        assert!(graph.is_topologically_ordered());
    }

    #[test]
    fn no_grad_nodes_are_not_traced() {
        let c = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::parameter(&[2], vec![3.0, 4.0]).unwrap();
        let loss = c.mul(&w).unwrap().sum();
        let graph = Graph::trace(&loss);
        // c requires no grad: it must not appear in the traced graph.
        assert!(!graph.node_ids().contains(&c.node.id));
        loss.backward().unwrap();
        assert!(c.grad().is_none());
        assert!(w.grad().is_some());
    }

    #[test]
    fn forward_and_grad_are_bit_deterministic() {
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
            let w = Tensor::parameter(&[16], randn(&[16], &mut rng).to_vec()).unwrap();
            let x = randn(&[16], &mut rng);
            let loss = w.mul(&x).unwrap().exp().sum();
            loss.backward().unwrap();
            (loss.item().to_bits(), w.grad().unwrap().iter().map(|g| g.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}
