//! Named parameter storage and the per-forward binding of parameters onto a
//! [`Graph`].

use std::cell::RefCell;

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::gradcheck::{finite_diff_check, FdOptions, FdReport};
use crate::tensor::{BnMode, Element, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Trained and weight-decayed.
    Weight,
    /// Trained, exempt from weight decay (normalization affines, class token).
    NoDecay,
    /// Not trained; updated as a side effect of forward passes (running stats).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T: Element = f32> {
    pub tensor: Tensor<T>,
    pub kind: ParamKind,
}

/// Ordered name → tensor map. Insertion order is the canonical order used by
/// checkpoints and the optimizer.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T: Element = f32> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor<T>,
        kind: ParamKind,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::contract(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let (index, _) = self.entries.insert_full(name, ParamEntry { tensor, kind });
        Ok(ParamId(index))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].tensor
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries
            .get_index(id.0)
            .map(|(n, _)| n.as_str())
            .expect("valid id")
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.get_index_of(name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ParamEntry<T>)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, e))| (ParamId(i), n.as_str(), e))
    }

    /// Replace a tensor by name, keeping its shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::dim(format!(
                "parameter {name:?} has shape {:?}, got {:?}",
                entry.tensor.shape(),
                tensor.shape()
            )));
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(n, e)| {
                    (
                        n.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast(),
                            kind: e.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind != ParamKind::Buffer)
            .map(|e| e.tensor.numel())
            .sum()
    }
}

/// Weight initializers.
pub mod init {
    use super::*;

    /// Glorot uniform for a `[fan_in, fan_out]` linear map.
    pub fn xavier<T: Element, R: Rng + ?Sized>(
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Tensor<T> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Tensor::uniform(&[fan_in, fan_out], -a, a, rng)
    }

    /// He uniform for an `[out, in, kh, kw]` convolution kernel.
    pub fn conv<T: Element, R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor<T> {
        let fan_in = shape[1] * shape[2] * shape[3];
        let a = (6.0 / fan_in as f64).sqrt();
        Tensor::uniform(&shape, -a, a, rng)
    }
}

enum Slot<'g, T: Element> {
    Param(Var<'g, T>),
    Buffer(Tensor<T>),
}

/// One forward pass's view of a [`ParamStore`]: every trainable parameter is
/// a leaf on `graph`, buffers are copied in, and buffer updates produced
/// during the pass are collected for the caller to commit.
pub struct Session<'g, T: Element = f32> {
    graph: &'g Graph<T>,
    slots: Vec<Slot<'g, T>>,
    mode: BnMode,
    updates: RefCell<Vec<(ParamId, Tensor<T>)>>,
}

impl<'g, T: Element> Session<'g, T> {
    /// `track` decides whether parameters are gradient-tracked leaves.
    pub fn new(graph: &'g Graph<T>, store: &ParamStore<T>, mode: BnMode, track: bool) -> Self {
        let slots = store
            .iter()
            .map(|(_, _, e)| match e.kind {
                ParamKind::Buffer => Slot::Buffer(e.tensor.clone()),
                _ => Slot::Param(graph.leaf(e.tensor.clone(), track)),
            })
            .collect();
        Session {
            graph,
            slots,
            mode,
            updates: RefCell::new(Vec::new()),
        }
    }

    /// Bind caller-provided variables, one per trainable entry of `store` in
    /// store order; `store`'s own values are used only for buffers.
    pub fn from_vars(
        graph: &'g Graph<T>,
        store: &ParamStore<T>,
        vars: &[Var<'g, T>],
        mode: BnMode,
    ) -> Result<Self> {
        let mut it = vars.iter();
        let mut slots = Vec::with_capacity(store.len());
        for (_, name, e) in store.iter() {
            slots.push(match e.kind {
                ParamKind::Buffer => Slot::Buffer(e.tensor.clone()),
                _ => {
                    let v = *it
                        .next()
                        .ok_or_else(|| Error::contract("fewer variables than parameters"))?;
                    if v.shape() != e.tensor.shape() {
                        return Err(Error::dim(format!(
                            "variable for {name:?} has shape {:?}",
                            v.shape()
                        )));
                    }
                    Slot::Param(v)
                }
            });
        }
        if it.next().is_some() {
            return Err(Error::contract("more variables than parameters"));
        }
        Ok(Session {
            graph,
            slots,
            mode,
            updates: RefCell::new(Vec::new()),
        })
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn p(&self, id: ParamId) -> Var<'g, T> {
        match &self.slots[id.0] {
            Slot::Param(v) => *v,
            Slot::Buffer(_) => panic!("parameter {} is a buffer", id.0),
        }
    }

    pub fn buffer(&self, id: ParamId) -> &Tensor<T> {
        match &self.slots[id.0] {
            Slot::Buffer(t) => t,
            Slot::Param(_) => panic!("parameter {} is not a buffer", id.0),
        }
    }

    pub fn push_update(&self, id: ParamId, value: Tensor<T>) {
        self.updates.borrow_mut().push((id, value));
    }

    pub fn take_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.updates.borrow_mut())
    }

    /// Gradients of every trainable parameter after `backward`; parameters
    /// the loss did not reach get zeros.
    pub fn grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match s {
                Slot::Param(v) => Some((
                    ParamId(i),
                    v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())),
                )),
                Slot::Buffer(_) => None,
            })
            .collect()
    }
}

impl<T: Element> ParamStore<T> {
    /// Values of every trainable entry, in store order.
    pub fn trainable_tensors(&self) -> Vec<Tensor<T>> {
        self.entries
            .values()
            .filter(|e| e.kind != ParamKind::Buffer)
            .map(|e| e.tensor.clone())
            .collect()
    }

    /// Commit buffer updates collected by a [`Session`].
    pub fn apply_updates(&mut self, updates: Vec<(ParamId, Tensor<T>)>) {
        for (id, t) in updates {
            self.entries[id.0].tensor = t;
        }
    }
}

/// Finite-difference check of `f` with respect to `inputs` and every
/// trainable parameter of `store`.
pub fn check_with_params<T, F>(
    store: &ParamStore<T>,
    inputs: &[Tensor<T>],
    mode: BnMode,
    opts: &FdOptions,
    f: F,
) -> Result<FdReport>
where
    T: Element,
    F: for<'g> Fn(&Session<'g, T>, &[Var<'g, T>]) -> Result<Var<'g, T>>,
{
    let k = inputs.len();
    let mut all = inputs.to_vec();
    all.extend(store.trainable_tensors());
    finite_diff_check(
        |g, vars| {
            let sess = Session::from_vars(g, store, &vars[k..], mode)?;
            f(&sess, &vars[..k])
        },
        &all,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(&[1]), ParamKind::Weight).unwrap();
        assert!(s.add("a", Tensor::zeros(&[1]), ParamKind::Weight).is_err());
        assert_eq!(s.id("a").unwrap().index(), 0);
    }

    #[test]
    fn session_binds_params_and_skips_buffers() {
        let mut s = ParamStore::<f64>::new();
        let w = s.add("w", Tensor::ones(&[2]), ParamKind::Weight).unwrap();
        s.add("rm", Tensor::zeros(&[2]), ParamKind::Buffer).unwrap();
        let g = Graph::new();
        let sess = Session::new(&g, &s, BnMode::Train, true);
        let loss = sess.p(w).square().sum_all();
        g.backward(loss).unwrap();
        let grads = sess.grads();
        assert_eq!(grads.len(), 1);
        assert_eq!(grads[0].1.data(), &[2.0, 2.0]);
    }
}
