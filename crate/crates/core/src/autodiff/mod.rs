//! Minimal dense-tensor reverse-mode automatic differentiation.
//!
//! Values are double precision, row-major. A [`Tape`] records every
//! operation touching a tracked tensor; [`Tensor::backward`] replays the
//! tape in reverse topological order (which is simply reverse insertion
//! order) and accumulates gradients for every tracked node. Tensors are
//! immutable once produced.

mod conv;
mod ops;
mod sample;

pub use sample::identity_flow;

use crate::error::{DehazeError, Result};
use std::cell::RefCell;
use std::rc::Rc;

type BackwardFn = Box<dyn Fn(&[f64], &mut GradStore)>;

struct Node {
    len: usize,
    backward: Option<BackwardFn>,
}

/// Operation record for one training step or one forward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Rc<Tape> {
        Rc::new(Tape::default())
    }

    fn push(&self, len: usize, backward: Option<BackwardFn>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { len, backward });
        nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// New tracked leaf tensor (a parameter or input under differentiation).
    pub fn leaf(self: &Rc<Self>, shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf shape/data mismatch"
        );
        let id = self.push(data.len(), None);
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            trace: Some((Rc::clone(self), id)),
        }
    }
}

/// Per-node gradient buffers produced by a backward pass.
pub struct GradStore {
    lens: Vec<usize>,
    grads: Vec<Option<Vec<f64>>>,
}

impl GradStore {
    /// Gradient buffer for node `id`, zero-initialized on first access.
    fn buf(&mut self, id: usize) -> &mut [f64] {
        if self.grads[id].is_none() {
            self.grads[id] = Some(vec![0.0; self.lens[id]]);
        }
        self.grads[id].as_mut().unwrap()
    }

    /// Gradient of `t`, or all zeros when no path reached it.
    pub fn grad(&self, t: &Tensor) -> Vec<f64> {
        match &t.trace {
            Some((_, id)) => self.grads[*id]
                .clone()
                .unwrap_or_else(|| vec![0.0; t.len()]),
            None => vec![0.0; t.len()],
        }
    }
}

/// Dense double-precision tensor. Cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    trace: Option<(Rc<Tape>, usize)>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.trace.is_some())
            .finish()
    }
}

impl Tensor {
    /// Untracked constant tensor.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape/data mismatch"
        );
        Tensor {
            shape: shape.to_vec(),
            data: Rc::new(data),
            trace: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_tracked(&self) -> bool {
        self.trace.is_some()
    }

    pub fn scalar_value(&self) -> f64 {
        assert_eq!(self.len(), 1, "scalar_value on non-scalar tensor");
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Detached copy: same values, no gradient history.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            trace: None,
        }
    }

    fn tape_of(inputs: &[&Tensor]) -> Option<Rc<Tape>> {
        let mut found: Option<Rc<Tape>> = None;
        for t in inputs {
            if let Some((tape, _)) = &t.trace {
                if let Some(prev) = &found {
                    assert!(
                        Rc::ptr_eq(prev, tape),
                        "operands recorded on different tapes"
                    );
                } else {
                    found = Some(Rc::clone(tape));
                }
            }
        }
        found
    }

    fn node_id(&self) -> Option<usize> {
        self.trace.as_ref().map(|(_, id)| *id)
    }

    /// Builds the op result, recording `backward` when any input is tracked.
    /// The closure receives the output gradient and the gradient store.
    fn make(
        inputs: &[&Tensor],
        shape: Vec<usize>,
        data: Vec<f64>,
        backward: impl Fn(&[f64], &mut GradStore) + 'static,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let trace = Tensor::tape_of(inputs).map(|tape| {
            let id = tape.push(data.len(), Some(Box::new(backward)));
            (tape, id)
        });
        Tensor {
            shape,
            data: Rc::new(data),
            trace,
        }
    }

    /// Reverse pass from a scalar root. Returns per-node gradients.
    pub fn backward(&self) -> Result<GradStore> {
        if self.len() != 1 {
            return Err(DehazeError::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape
            )));
        }
        let (tape, root) = self
            .trace
            .as_ref()
            .ok_or_else(|| DehazeError::contract("backward on untracked tensor"))?;
        let nodes = tape.nodes.borrow();
        let mut store = GradStore {
            lens: nodes.iter().map(|n| n.len).collect(),
            grads: vec![None; nodes.len()],
        };
        store.buf(*root)[0] = 1.0;
        for id in (0..=*root).rev() {
            if store.grads[id].is_none() {
                continue;
            }
            if let Some(bw) = &nodes[id].backward {
                let g = store.grads[id].take().unwrap();
                bw(&g, &mut store);
                store.grads[id] = Some(g);
            }
        }
        Ok(store)
    }
}

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central finite difference: max_i |analytic_i - fd_i| / max(1, |fd_i|).
pub fn grad_check(f: impl Fn(&Tensor) -> Tensor, x: &Tensor, eps: f64) -> f64 {
    let tape = Tape::new();
    let leaf = tape.leaf(x.shape(), x.data().to_vec());
    let y = f(&leaf);
    let store = y.backward().expect("grad_check root must be scalar");
    let analytic = store.grad(&leaf);

    let mut max_err: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.data().to_vec();
        plus[i] += eps;
        let mut minus = x.data().to_vec();
        minus[i] -= eps;
        let fp = f(&Tensor::from_vec(x.shape(), plus)).scalar_value();
        let fm = f(&Tensor::from_vec(x.shape(), minus)).scalar_value();
        let fd = (fp - fm) / (2.0 * eps);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
        max_err = max_err.max(err);
    }
    max_err
}

/// `grad_check` over several inputs at once; checks each coordinate of each
/// input and returns the worst relative error.
pub fn grad_check_multi(f: impl Fn(&[Tensor]) -> Tensor, xs: &[Tensor], eps: f64) -> f64 {
    let tape = Tape::new();
    let leaves: Vec<Tensor> = xs
        .iter()
        .map(|x| tape.leaf(x.shape(), x.data().to_vec()))
        .collect();
    let y = f(&leaves);
    let store = y.backward().expect("grad_check root must be scalar");

    let mut max_err: f64 = 0.0;
    for (k, x) in xs.iter().enumerate() {
        let analytic = store.grad(&leaves[k]);
        for i in 0..x.len() {
            let eval = |delta: f64| {
                let inputs: Vec<Tensor> = xs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        if j == k {
                            let mut d = t.data().to_vec();
                            d[i] += delta;
                            Tensor::from_vec(t.shape(), d)
                        } else {
                            t.detach()
                        }
                    })
                    .collect();
                f(&inputs).scalar_value()
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let err = (analytic[i] - fd).abs() / fd.abs().max(1.0);
            max_err = max_err.max(err);
        }
    }
    max_err
}
