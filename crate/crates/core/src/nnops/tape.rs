use std::collections::{BTreeMap, HashMap};

use super::{NnError, ParamId, ParamStore, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Vector-Jacobian product of one recorded operation.
pub(crate) trait Backward<T: Real> {
    /// Gradients with respect to each input, in input order.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Real> {
    value: Option<Tensor<T>>,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// Define-by-run reverse-mode tape. Rebuilt for every forward pass.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    param_order: Vec<ParamId>,
    consumed: bool,
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T: Real> {
    params: BTreeMap<ParamId, Tensor<T>>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient of a leaf created with `requires_grad = true`.
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&var)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor<T>> {
        self.params
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), param_order: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf value. Gradients for it are reported when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), inputs: Vec::new(), op: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf for a registered parameter. Repeated calls return the same node,
    /// so every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let entry = store.entry(id);
        let v = self.leaf(entry.tensor.clone(), entry.trainable);
        self.params.insert(id, v);
        self.param_order.push(id);
        v
    }

    /// Bytes of tensor data currently held by the tape.
    pub fn value_bytes(&self) -> usize {
        self.nodes.iter().filter_map(|n| n.value.as_ref()).map(|t| t.len() * std::mem::size_of::<T>()).sum()
    }

    /// Parameters read by the recorded forward pass, in first-use order.
    pub fn params_used(&self) -> &[ParamId] {
        &self.param_order
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0].value.as_ref().expect("value already released by backward")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        op: impl Backward<T> + 'static,
    ) -> Var {
        assert!(!self.consumed, "recording on a tape after backward");
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op: Option<Box<dyn Backward<T>>> =
            if requires_grad { Some(Box::new(op)) } else { None };
        self.nodes.push(Node {
            value: Some(value),
            inputs: inputs.iter().map(|v| v.0).collect(),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Intermediate values are released as the sweep passes them, so the
    /// tape cannot be differentiated twice.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>, NnError> {
        if self.consumed {
            return Err(NnError::BackwardTwice);
        }
        let loss_shape = self.value(loss).shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(NnError::Shape(format!(
                "backward needs a scalar loss, got shape {loss_shape:?}"
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(NnError::Detached);
        }
        self.consumed = true;

        let param_of: HashMap<usize, ParamId> =
            self.params.iter().map(|(id, v)| (v.0, *id)).collect();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::from_vec(&loss_shape, vec![T::one()])?);

        let mut out = Gradients { params: BTreeMap::new(), leaves: HashMap::new() };
        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                None => {
                    if let Some(id) = param_of.get(&idx) {
                        out.params.insert(*id, grad);
                    } else {
                        out.leaves.insert(Var(idx), grad);
                    }
                }
                Some(op) => {
                    let inputs: Vec<&Tensor<T>> = node
                        .inputs
                        .iter()
                        .map(|&i| self.nodes[i].value.as_ref().expect("input released early"))
                        .collect();
                    let output = node.value.as_ref().expect("output released early");
                    let input_grads = op.backward(&inputs, output, &grad);
                    debug_assert_eq!(input_grads.len(), node.inputs.len());
                    let targets = node.inputs.clone();
                    for (target, g) in targets.into_iter().zip(input_grads) {
                        let Some(g) = g else { continue };
                        if !self.nodes[target].requires_grad {
                            continue;
                        }
                        match &mut grads[target] {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                    // every consumer of this node has already been swept
                    self.nodes[idx].value = None;
                    self.nodes[idx].op = None;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap(), true);
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_x() {
        let mut tape = Tape::<f64>::new();
        let vals = vec![1.0, -2.0, 3.0, 0.5];
        let x = tape.leaf(Tensor::from_vec(&[4], vals.clone()).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        let expect: Vec<f64> = vals.iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.wrt(x).unwrap().data(), &expect[..]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::ones(&[3]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(NnError::BackwardTwice)));
    }

    #[test]
    fn detached_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(&[3]));
        let s = tape.sum(x);
        assert!(matches!(tape.backward(s), Err(NnError::Detached)));
    }

    #[test]
    fn reused_param_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(&[1], vec![3.0]).unwrap(), true);
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let q = tape.add(p, a).unwrap();
        let s = tape.sum(q);
        let g = tape.backward(s).unwrap();
        // d/dw (w^2 + w) = 2w + 1
        assert_eq!(g.param(id).unwrap().data(), &[7.0]);
    }
}
