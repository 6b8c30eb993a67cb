use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{Float, Tensor};

pub(crate) type BackwardFn<T> = Box<dyn FnOnce(&Tensor<T>, &mut GradBuffer<T>)>;

enum Node<T> {
    Param(ParamId),
    Op(BackwardFn<T>),
}

/// A value flowing through the graph. `node` is `None` for constants and for
/// every value computed while recording is off.
#[derive(Clone, Debug)]
pub struct Var<T> {
    pub(crate) value: Arc<Tensor<T>>,
    pub(crate) node: Option<usize>,
}

impl<T: Float> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn into_tensor(self) -> Tensor<T> {
        Arc::try_unwrap(self.value).unwrap_or_else(|a| (*a).clone())
    }
}

/// Gradient slots indexed by node, filled lazily during the reverse sweep.
pub(crate) struct GradBuffer<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Float> GradBuffer<T> {
    /// Zero-initialised accumulator for `node`.
    pub(crate) fn slot(&mut self, node: usize, shape: &[usize]) -> &mut Tensor<T> {
        let s = &mut self.slots[node];
        if s.is_none() {
            *s = Some(Tensor::zeros(shape));
        }
        let t = s.as_mut().expect("slot initialised above");
        debug_assert_eq!(t.shape(), shape);
        t
    }

    pub(crate) fn add(&mut self, node: usize, grad: Tensor<T>) {
        match &mut self.slots[node] {
            Some(t) => t.add_assign(&grad).expect("gradient shape matches value shape"),
            s @ None => *s = Some(grad),
        }
    }
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn new() -> Self {
        Self { grads: BTreeMap::new() }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor<T>)> {
        self.grads.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Element-wise sum, used for gradient accumulation across micro-batches.
    pub fn accumulate(&mut self, other: Gradients<T>) {
        for (id, g) in other.grads {
            match self.grads.get_mut(&id) {
                Some(t) => t.add_assign(&g).expect("same parameter, same shape"),
                None => {
                    self.grads.insert(id, g);
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.values_mut() {
            g.scale_in_place(s);
        }
    }

    /// Global L2 norm over every gradient, accumulated in `f64`.
    pub fn global_norm(&self) -> f64 {
        self.grads.values().map(Tensor::sum_squares_f64).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

/// Reverse-mode tape. Build one per forward pass; call [`Graph::backward`]
/// to consume it. With recording off (`Graph::inference`) no closures are
/// kept and intermediates are freed as soon as they go out of scope.
pub struct Graph<T> {
    record: bool,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self { record: true, nodes: RefCell::new(Vec::new()) }
    }

    pub fn inference() -> Self {
        Self { record: false, nodes: RefCell::new(Vec::new()) }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var { value: Arc::new(value), node: None }
    }

    pub fn constant_shared(&self, value: Arc<Tensor<T>>) -> Var<T> {
        Var { value, node: None }
    }

    /// Leaf for a stored parameter. Frozen parameters enter as constants,
    /// so nothing upstream of them is differentiated.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<T> {
        let value = Arc::clone(store.get(id));
        if self.record && !store.is_frozen(id) {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node::Param(id));
            Var { value, node: Some(nodes.len() - 1) }
        } else {
            Var { value, node: None }
        }
    }

    pub(crate) fn push_op(
        &self,
        value: Tensor<T>,
        any_parent_tracked: bool,
        backward: impl FnOnce(&Tensor<T>, &mut GradBuffer<T>) + 'static,
    ) -> Var<T> {
        if self.record && any_parent_tracked {
            let mut nodes = self.nodes.borrow_mut();
            nodes.push(Node::Op(Box::new(backward)));
            Var { value: Arc::new(value), node: Some(nodes.len() - 1) }
        } else {
            Var { value: Arc::new(value), node: None }
        }
    }

    /// Backpropagate from a scalar output.
    ///
    /// # Panics
    /// If `output` is not a single-element tensor.
    pub fn backward(self, output: &Var<T>) -> Gradients<T> {
        assert_eq!(output.value.numel(), 1, "backward needs a scalar output");
        let seed = Tensor::full(output.shape(), T::one());
        self.backward_with(output, seed)
    }

    pub fn backward_with(self, output: &Var<T>, seed: Tensor<T>) -> Gradients<T> {
        let mut grads = Gradients::new();
        let Some(root) = output.node else {
            return grads;
        };
        let mut nodes = self.nodes.into_inner();
        nodes.truncate(root + 1);
        let mut buf = GradBuffer { slots: (0..nodes.len()).map(|_| None).collect() };
        buf.slots[root] = Some(seed);
        while let Some(node) = nodes.pop() {
            let idx = nodes.len();
            let Some(g) = buf.slots[idx].take() else {
                continue;
            };
            match node {
                Node::Param(id) => match grads.grads.get_mut(&id) {
                    Some(t) => t.add_assign(&g).expect("parameter shape is fixed"),
                    None => {
                        grads.grads.insert(id, g);
                    }
                },
                Node::Op(f) => f(&g, &mut buf),
            }
        }
        grads
    }
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}
