use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use parking_lot::RwLock;

/// Backward closure: receives the gradient of the loss w.r.t. this node's
/// output and a sink that accumulates gradients into parent nodes by id.
pub(crate) type BackwardFn = Box<dyn Fn(&ArrayD<f64>, &mut dyn FnMut(usize, ArrayD<f64>))>;

pub(crate) struct Node {
    pub value: Rc<ArrayD<f64>>,
    pub op: &'static str,
    pub backward: Option<BackwardFn>,
}

#[derive(Default)]
pub(crate) struct GraphInner {
    pub nodes: Vec<Node>,
    /// (param, leaf node id) for every trainable use of a parameter.
    pub param_uses: Vec<(Param, usize)>,
}

/// A computation tape. Clone is shallow; all clones append to the same tape.
#[derive(Clone, Default)]
pub struct Graph(Rc<RefCell<GraphInner>>);

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<f64>,
        op: &'static str,
        backward: Option<BackwardFn>,
    ) -> Var {
        let mut inner = self.0.borrow_mut();
        let id = inner.nodes.len();
        let shape = value.shape().to_vec();
        inner.nodes.push(Node {
            value: Rc::new(value),
            op,
            backward,
        });
        Var {
            graph: self.clone(),
            id,
            shape,
        }
    }

    /// A leaf that does not require gradients.
    pub fn constant(&self, value: ArrayD<f64>) -> Var {
        self.push(value, "constant", None)
    }

    /// A leaf whose gradient is retained in [`Gradients`] after backward.
    pub fn leaf(&self, value: ArrayD<f64>) -> Var {
        self.push(value, "leaf", None)
    }

    /// A trainable use of `param`: after backward, the leaf's gradient is
    /// added into `param.grad`. Using the same param several times in one
    /// graph accumulates all contributions.
    pub fn param(&self, param: &Param) -> Var {
        let v = self.push(param.value(), "param", None);
        self.0.borrow_mut().param_uses.push((param.clone(), v.id));
        v
    }

    /// A frozen use of `param`: gradients may flow *through* downstream ops
    /// but nothing is accumulated into the parameter.
    pub fn frozen(&self, param: &Param) -> Var {
        self.push(param.value(), "param_frozen", None)
    }

    pub(crate) fn value(&self, id: usize) -> Rc<ArrayD<f64>> {
        Rc::clone(&self.0.borrow().nodes[id].value)
    }

    pub(crate) fn same_as(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Names of all ops recorded so far, in execution order.
    pub fn ops_used(&self) -> Vec<&'static str> {
        self.0.borrow().nodes.iter().map(|n| n.op).collect()
    }

    /// Reverse pass from a scalar loss. Gradients of `leaf` nodes are
    /// retained in the returned [`Gradients`]; gradients of `param` leaves
    /// are additionally accumulated into the parameters.
    pub fn backward(&self, loss: &Var) -> Gradients {
        assert!(
            Rc::ptr_eq(&self.0, &loss.graph.0),
            "loss belongs to a different graph"
        );
        let inner = self.0.borrow();
        assert_eq!(
            inner.nodes[loss.id].value.len(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            inner.nodes[loss.id].value.shape()
        );
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..inner.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(ArrayD::ones(IxDyn(&[1])));

        for id in (0..=loss.id).rev() {
            if grads[id].is_none() || inner.nodes[id].backward.is_none() {
                continue;
            }
            let g = grads[id].take().expect("grad present");
            let bw = inner.nodes[id].backward.as_ref().expect("backward present");
            bw(&g, &mut |pid, contrib| {
                debug_assert!(pid < id, "backward must target earlier nodes");
                match &mut grads[pid] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            });
        }

        for (param, id) in &inner.param_uses {
            if let Some(g) = &grads[*id] {
                param.add_grad(g);
            }
        }
        Gradients { grads }
    }
}

/// Gradients of leaf nodes, produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    /// Gradient w.r.t. a leaf var. `None` if the loss does not depend on it.
    pub fn wrt(&self, v: &Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

/// A node in a computation graph: a handle into the tape plus a cached shape.
#[derive(Clone)]
pub struct Var {
    pub(crate) graph: Graph,
    pub(crate) id: usize,
    pub(crate) shape: Vec<usize>,
}

impl Var {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shared handle to the value array.
    pub fn value(&self) -> Rc<ArrayD<f64>> {
        self.graph.value(self.id)
    }

    /// Owned copy of the value array.
    pub fn to_array(&self) -> ArrayD<f64> {
        (*self.value()).clone()
    }

    /// The single element of a scalar var.
    pub fn scalar(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar() on shape {:?}", v.shape());
        v.iter().next().copied().expect("non-empty")
    }

    /// Re-enter the value as a constant: gradients stop here.
    pub fn detach(&self) -> Var {
        self.graph.constant(self.to_array())
    }
}

struct ParamInner {
    name: String,
    value: ArrayD<f64>,
    grad: ArrayD<f64>,
}

/// A trainable tensor living outside any graph. Cheap to clone (shared), and
/// thread-safe so immutable models can run inference from rayon workers.
#[derive(Clone)]
pub struct Param(Arc<RwLock<ParamInner>>);

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param(Arc::new(RwLock::new(ParamInner {
            name: name.into(),
            value,
            grad,
        })))
    }

    pub fn name(&self) -> String {
        self.0.read().name.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.read().value.shape().to_vec()
    }

    pub fn value(&self) -> ArrayD<f64> {
        self.0.read().value.clone()
    }

    pub fn grad(&self) -> ArrayD<f64> {
        self.0.read().grad.clone()
    }

    pub fn set_value(&self, value: ArrayD<f64>) {
        let mut inner = self.0.write();
        assert_eq!(
            inner.value.shape(),
            value.shape(),
            "set_value shape mismatch for {}",
            inner.name
        );
        inner.value = value;
    }

    pub fn add_grad(&self, g: &ArrayD<f64>) {
        let mut inner = self.0.write();
        inner.grad += g;
    }

    pub fn zero_grad(&self) {
        self.0.write().grad.fill(0.0);
    }

    /// Apply an in-place update `value[i] += f(grad[i], i)`-style closure over
    /// (value, grad) pairs. Used by optimizers.
    pub fn update_with<F>(&self, mut f: F)
    where
        F: FnMut(&mut ArrayD<f64>, &ArrayD<f64>),
    {
        let mut inner = self.0.write();
        let ParamInner { value, grad, .. } = &mut *inner;
        f(value, grad);
    }
}

