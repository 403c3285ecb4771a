//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`GradTape`] starts empty. [`GradTape::watch`] registers a leaf tensor;
//! every operation that consumes a tracked tensor appends a node holding its
//! backward rule. Because nodes are only ever appended, and an operation can
//! only consume tensors that already exist, the node list is always in
//! topological order and [`GradTape::backward`] is a single reverse sweep.
//!
//! Backward rules capture detached copies of their inputs, so the tape never
//! owns a reference back to itself.

use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Vec<Tensor<T>> + Send + Sync>;

struct Node<T: Scalar> {
    shape: Vec<usize>,
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

pub(crate) struct TapeCore<T: Scalar> {
    nodes: Mutex<Vec<Node<T>>>,
}

impl<T: Scalar> TapeCore<T> {
    fn push(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.lock().expect("tape poisoned");
        nodes.push(node);
        nodes.len() - 1
    }
}

#[derive(Clone)]
pub(crate) struct TapeLink<T: Scalar> {
    pub(crate) core: Arc<TapeCore<T>>,
    pub(crate) id: usize,
}

/// Appends a node for `out` if any input is tracked; otherwise returns `out`
/// unchanged. `backward` maps the output gradient to one gradient per input,
/// in input order.
pub(crate) fn record<T, F>(mut out: Tensor<T>, inputs: &[&Tensor<T>], backward: F) -> Tensor<T>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Vec<Tensor<T>> + Send + Sync + 'static,
{
    let Some(core) = inputs.iter().find_map(|t| t.link.as_ref().map(|l| Arc::clone(&l.core))) else {
        return out;
    };
    let parents = inputs
        .iter()
        .map(|t| {
            t.link.as_ref().map(|l| {
                assert!(
                    Arc::ptr_eq(&l.core, &core),
                    "operation mixes tensors from different tapes"
                );
                l.id
            })
        })
        .collect();
    let id = core.push(Node {
        shape: out.shape.clone(),
        parents,
        backward: Some(Box::new(backward)),
    });
    out.link = Some(TapeLink { core, id });
    out
}

/// An append-only record of differentiable operations.
///
/// One tape per thread; the tape itself is not meant to be shared.
pub struct GradTape<T: Scalar = f64> {
    core: Arc<TapeCore<T>>,
}

impl<T: Scalar> Default for GradTape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GradTape<T> {
    pub fn new() -> Self {
        GradTape {
            core: Arc::new(TapeCore {
                nodes: Mutex::new(Vec::new()),
            }),
        }
    }

    /// Registers `t` as a leaf and returns a tracked handle to the same values.
    pub fn watch(&self, t: &Tensor<T>) -> Tensor<T> {
        let id = self.core.push(Node {
            shape: t.shape.clone(),
            parents: Vec::new(),
            backward: None,
        });
        let mut out = t.detach();
        out.link = Some(TapeLink {
            core: Arc::clone(&self.core),
            id,
        });
        out
    }

    pub fn len(&self) -> usize {
        self.core.nodes.lock().expect("tape poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Propagates d(loss)/d(node) to every node that `loss` depends on.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Gradients<T>> {
        if loss.len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let root = match &loss.link {
            Some(l) if Arc::ptr_eq(&l.core, &self.core) => l.id,
            Some(_) => return Err(Error::Autograd("loss belongs to a different tape".into())),
            None => return Err(Error::Autograd("loss is not recorded on any tape".into())),
        };
        let nodes = self.core.nodes.lock().expect("tape poisoned");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root + 1];
        grads[root] = Some(Tensor::from_parts(loss.shape.clone(), vec![T::one()]));
        for id in (0..=root).rev() {
            let node = &nodes[id];
            let (Some(g), Some(rule)) = (&grads[id], &node.backward) else {
                continue;
            };
            let parent_grads = rule(g);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(p) = *parent else { continue };
                debug_assert_eq!(pg.shape, nodes[p].shape, "gradient shape for node {p}");
                grads[p] = Some(match grads[p].take() {
                    Some(acc) => acc.add_raw(&pg),
                    None => pg,
                });
            }
        }
        Ok(Gradients {
            core: Arc::clone(&self.core),
            grads,
        })
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T: Scalar> {
    core: Arc<TapeCore<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for a tensor recorded on the same tape, if the loss depends on it.
    pub fn get(&self, t: &Tensor<T>) -> Option<&Tensor<T>> {
        let link = t.link.as_ref()?;
        if !Arc::ptr_eq(&link.core, &self.core) {
            return None;
        }
        self.grads.get(link.id)?.as_ref()
    }

    /// Like [`Gradients::get`], but an unreachable tensor gets an all-zero gradient.
    pub fn get_or_zero(&self, t: &Tensor<T>) -> Tensor<T> {
        self.get(t)
            .cloned()
            .unwrap_or_else(|| Tensor::from_parts(t.shape.clone(), vec![T::zero(); t.len()]))
    }
}

/// Central-difference gradient of a scalar function:
/// `(f(x + eps·eᵢ) − f(x − eps·eᵢ)) / (2·eps)` for every element `i`.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Tensor<T>, eps: f64) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Autograd(format!(
            "finite difference step must be positive, got {eps}"
        )));
    }
    let base = x.detach();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let v = base.data[i].as_f64();
        let plus = f(&base.with_element(i, T::from_f64(v + eps)))?.as_f64();
        let minus = f(&base.with_element(i, T::from_f64(v - eps)))?.as_f64();
        grad.push(T::from_f64((plus - minus) / (2.0 * eps)));
    }
    Ok(Tensor::from_parts(x.shape.clone(), grad))
}

/// Gradients smaller than this in magnitude are compared absolutely. Central
/// differences carry about `1e-16·|f| / eps` of round-off (`1e-11` to `1e-9`
/// at `eps = 1e-5`), which would otherwise dominate gradients that are
/// exactly zero, such as those of key-projection biases.
pub const GRAD_ABS_FLOOR: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|)`, with [`GRAD_ABS_FLOOR`] as the smallest denominator.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_ABS_FLOOR)
}
