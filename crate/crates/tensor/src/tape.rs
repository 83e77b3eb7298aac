//! Wengert tape for reverse-mode differentiation.
//!
//! Every operation on a tape-linked [`Var`] appends a record holding its
//! inputs and output. Backward rules are themselves written with `Var`
//! operations, so running them with `create_graph` records the backward pass
//! on the same tape and it can be differentiated again.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::ops::Op;
use crate::tensor::Tensor;

#[derive(Clone)]
pub(crate) struct Slot<T> {
    pub id: Option<usize>,
    pub value: Arc<Tensor<T>>,
}

pub(crate) struct Record<T> {
    pub op: Op,
    pub inputs: Vec<Slot<T>>,
    pub output: Arc<Tensor<T>>,
}

struct TapeInner<T> {
    records: Vec<Record<T>>,
}

/// Single-writer operation log shared by every [`Var`] recorded on it.
pub struct Tape<T: Element> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Element> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// A tensor value, optionally linked to a record on its tape.
///
/// Vars without an id are constants: operations on constants only are
/// evaluated eagerly and never recorded.
pub struct Var<T: Element> {
    pub(crate) tape: Tape<T>,
    pub(crate) id: Option<usize>,
    pub(crate) value: Arc<Tensor<T>>,
}

impl<T: Element> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape.clone(),
            id: self.id,
            value: Arc::clone(&self.value),
        }
    }
}

impl<T: Element> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value)
            .finish()
    }
}

/// Gradients of a scalar loss with respect to every named leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    map: HashMap<String, Tensor<T>>,
}

impl<T> FromIterator<(String, Tensor<T>)> for Gradients<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Gradients {
            map: iter.into_iter().collect(),
        }
    }
}

impl<T: Element> Gradients<T> {
    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.map.insert(name.into(), grad);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn take(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.remove(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    /// Root of the summed squares of all gradient entries.
    pub fn global_norm(&self) -> f64 {
        let mut names: Vec<_> = self.map.keys().collect();
        names.sort();
        names
            .into_iter()
            .map(|n| {
                self.map[n]
                    .data()
                    .iter()
                    .map(|v| {
                        let v = v.to_f64().unwrap_or(0.0);
                        v * v
                    })
                    .sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                records: Vec::new(),
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn same(&self, other: &Tape<T>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn push(&self, op: Op, inputs: Vec<Slot<T>>, output: Arc<Tensor<T>>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.records.push(Record { op, inputs, output });
        inner.records.len() - 1
    }

    /// A value that never receives gradients.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        self.constant_arc(Arc::new(value))
    }

    pub fn constant_arc(&self, value: Arc<Tensor<T>>) -> Var<T> {
        Var {
            tape: self.clone(),
            id: None,
            value,
        }
    }

    /// An anonymous differentiable input.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        self.leaf_arc(None, Arc::new(value))
    }

    /// A named differentiable input, reported by [`Tape::backward`].
    pub fn param(&self, name: &str, value: Arc<Tensor<T>>) -> Var<T> {
        self.leaf_arc(Some(name.to_string()), value)
    }

    fn leaf_arc(&self, name: Option<String>, value: Arc<Tensor<T>>) -> Var<T> {
        let id = self.push(Op::Leaf { name }, Vec::new(), Arc::clone(&value));
        Var {
            tape: self.clone(),
            id: Some(id),
            value,
        }
    }

    /// Gradients of `loss` with respect to each named leaf on the tape.
    /// Leaves the loss does not depend on get zero tensors.
    pub fn backward(&self, loss: &Var<T>) -> Result<Gradients<T>> {
        let leaves: Vec<(String, Var<T>)> = {
            let inner = self.inner.borrow();
            inner
                .records
                .iter()
                .enumerate()
                .filter_map(|(id, r)| match &r.op {
                    Op::Leaf { name: Some(n) } => Some((
                        n.clone(),
                        Var {
                            tape: self.clone(),
                            id: Some(id),
                            value: Arc::clone(&r.output),
                        },
                    )),
                    _ => None,
                })
                .collect()
        };
        let refs: Vec<&Var<T>> = leaves.iter().map(|(_, v)| v).collect();
        let grads = self.grad(loss, &refs, false)?;
        let mut map = HashMap::with_capacity(leaves.len());
        for ((name, _), g) in leaves.into_iter().zip(grads) {
            let value = Arc::try_unwrap(g.value).unwrap_or_else(|a| (*a).clone());
            map.insert(name, value);
        }
        Ok(Gradients { map })
    }

    /// Gradients of the scalar `loss` with respect to `wrt`.
    ///
    /// With `create_graph` the backward computation is recorded, so the
    /// returned vars can feed a further differentiation.
    pub fn grad(&self, loss: &Var<T>, wrt: &[&Var<T>], create_graph: bool) -> Result<Vec<Var<T>>> {
        if !loss.tape.same(self) || wrt.iter().any(|w| !w.tape.same(self)) {
            return Err(TensorError::TapeMismatch);
        }
        if !loss.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss.value.shape().to_vec()));
        }
        let out = loss.id.ok_or(TensorError::Detached)?;

        let mut needed = vec![false; out + 1];
        for w in wrt {
            if let Some(id) = w.id.filter(|&id| id <= out) {
                needed[id] = true;
            }
        }
        {
            let inner = self.inner.borrow();
            for (i, rec) in inner.records[..=out].iter().enumerate() {
                if !needed[i] && rec.inputs.iter().any(|s| s.id.is_some_and(|p| needed[p])) {
                    needed[i] = true;
                }
            }
        }

        let mut wanted: HashMap<usize, Option<Var<T>>> =
            wrt.iter().filter_map(|w| w.id).map(|id| (id, None)).collect();
        let mut grads: Vec<Option<Var<T>>> = vec![None; out + 1];
        grads[out] = Some(self.constant(Tensor::full(loss.value.shape(), T::one())?));

        for i in (0..=out).rev() {
            if !needed[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Some(slot) = wanted.get_mut(&i) {
                *slot = Some(g.clone());
            }
            let (op, inputs, output) = {
                let inner = self.inner.borrow();
                let r = &inner.records[i];
                (r.op.clone(), r.inputs.clone(), Arc::clone(&r.output))
            };
            if inputs.is_empty() {
                continue;
            }
            let as_var = |id: Option<usize>, value: Arc<Tensor<T>>| Var {
                tape: self.clone(),
                id: if create_graph { id } else { None },
                value,
            };
            let in_vars: Vec<Var<T>> = inputs
                .iter()
                .map(|s| as_var(s.id, Arc::clone(&s.value)))
                .collect();
            let out_var = as_var(Some(i), output);
            let g = if create_graph { g } else { g.detach() };
            let needs: Vec<bool> = inputs
                .iter()
                .map(|s| s.id.is_some_and(|p| needed[p]))
                .collect();
            let contributions = op.backward(&in_vars, &out_var, &g, &needs)?;
            for (slot, contrib) in inputs.iter().zip(contributions) {
                let (Some(pid), Some(c)) = (slot.id, contrib) else { continue };
                if !needed[pid] {
                    continue;
                }
                grads[pid] = Some(match grads[pid].take() {
                    Some(acc) => acc.add(&c)?,
                    None => c,
                });
            }
        }

        wrt.iter()
            .map(|w| {
                let found = w.id.and_then(|id| wanted.get(&id).cloned().flatten());
                match found {
                    Some(g) => Ok(g),
                    None => Ok(self.constant(w.value.zeros_like())),
                }
            })
            .collect()
    }
}
