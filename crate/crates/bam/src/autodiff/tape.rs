//! The Wengert list: append-only node arena plus reverse sweep.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use super::params::ParamStore;
use super::Real;

/// Backward closure: receives the output gradient and returns one gradient
/// contribution per parent, each matching that parent's value shape.
pub(crate) type BackwardFn<F> = Box<dyn Fn(&ArrayD<F>) -> Vec<ArrayD<F>>>;

struct Node<F: Real> {
    value: Rc<ArrayD<F>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<F>>,
}

/// Records a computation graph. All [`Var`]s borrow the tape, so graphs
/// cannot outlive it; dropping the tape frees every intermediate.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
    named: RefCell<Vec<(String, usize)>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            named: RefCell::new(Vec::new()),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub(crate) fn push_node(
        &self,
        value: Rc<ArrayD<F>>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<F>>,
    ) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
        });
        Var {
            tape: self,
            index: nodes.len() - 1,
        }
    }

    /// A leaf holding the given value.
    pub fn constant(&self, value: ArrayD<F>) -> Var<'_, F> {
        self.push_node(Rc::new(value), Vec::new(), None)
    }

    /// A zero-dimensional leaf.
    pub fn scalar(&self, v: F) -> Var<'_, F> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// A leaf initialized from a named store entry; the name is remembered
    /// so gradients can be routed back to the store after [`Tape::backward`].
    pub fn param(&self, store: &ParamStore<F>, name: &str) -> Var<'_, F> {
        let entry = store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"));
        let var = self.constant(entry.value.clone());
        self.named.borrow_mut().push((name.to_owned(), var.index));
        var
    }

    /// Parameter leaves registered via [`Tape::param`], in creation order.
    pub fn named_params(&self) -> Vec<(String, usize)> {
        self.named.borrow().clone()
    }

    pub(crate) fn value_of(&self, index: usize) -> Rc<ArrayD<F>> {
        self.nodes.borrow()[index].value.clone()
    }

    /// Reverse sweep from a scalar root. Returns per-node gradients.
    pub fn backward(&self, root: Var<'_, F>) -> Gradients<F> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.index].value.len(),
            1,
            "backward root must be a scalar, got shape {:?}",
            nodes[root.index].value.shape()
        );
        let mut grads: Vec<Option<ArrayD<F>>> = vec![None; nodes.len()];
        grads[root.index] = Some(ArrayD::from_elem(
            nodes[root.index].value.raw_dim(),
            F::one(),
        ));
        for idx in (0..=root.index).rev() {
            if grads[idx].is_none() {
                continue;
            }
            let node = &nodes[idx];
            let Some(backward) = &node.backward else {
                continue;
            };
            let g = grads[idx].take().expect("checked above");
            let contribs = backward(&g);
            grads[idx] = Some(g);
            debug_assert_eq!(contribs.len(), node.parents.len());
            for (&parent, contrib) in node.parents.iter().zip(contribs) {
                debug_assert_eq!(
                    contrib.shape(),
                    nodes[parent].value.shape(),
                    "gradient contribution shape mismatch",
                );
                match &mut grads[parent] {
                    Some(acc) => acc.zip_mut_with(&contrib, |a, &b| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Gradients { grads }
    }
}

/// Handle to one tape node. Cheap to copy; all arithmetic on it records
/// new nodes on the owning tape.
pub struct Var<'t, F: Real> {
    pub(crate) tape: &'t Tape<F>,
    pub(crate) index: usize,
}

impl<'t, F: Real> Clone for Var<'t, F> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<'t, F: Real> Copy for Var<'t, F> {}

impl<'t, F: Real> Var<'t, F> {
    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    /// Shared handle to the node's value.
    pub fn value(&self) -> Rc<ArrayD<F>> {
        self.tape.value_of(self.index)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// The single element of a scalar node.
    pub fn scalar_value(&self) -> F {
        let v = self.value();
        assert_eq!(v.len(), 1, "expected scalar, got shape {:?}", v.shape());
        *v.iter().next().expect("length checked")
    }

    pub(crate) fn same_tape(&self, other: &Var<'t, F>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "variables belong to different tapes"
        );
    }
}

/// Gradients of one backward sweep, indexed by the variables of the tape.
pub struct Gradients<F: Real> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient with respect to `v`, if any path reached it.
    pub fn wrt(&self, v: Var<'_, F>) -> Option<&ArrayD<F>> {
        self.grads.get(v.index).and_then(|g| g.as_ref())
    }

    pub(crate) fn by_index(&self, index: usize) -> Option<&ArrayD<F>> {
        self.grads.get(index).and_then(|g| g.as_ref())
    }
}
