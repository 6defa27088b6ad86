//! Reverse-mode automatic differentiation over dynamic-shape `f64` arrays.
//!
//! A [`Graph`] is a tape recorded during one forward pass. Every operation
//! appends a node holding the result value and, when gradients are required,
//! a closure that routes the incoming gradient to the node's parents.
//! [`Graph::backward`] walks the tape in reverse and returns per-parameter
//! gradients.
//!
//! Design constraints served here:
//! - all arithmetic is `f64` so analytic gradients can be compared against
//!   central finite differences at tight tolerances;
//! - execution is sequential and allocation order is deterministic, so a
//!   fixed seed reproduces losses bit-for-bit;
//! - parameters live outside the tape in a [`ParamStore`], letting many
//!   tapes (one per image) run in parallel against shared weights.

mod conv;
mod ops;

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

pub use conv::{col2im, im2col};

/// Dynamic-dimension f64 tensor.
pub type Arr = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

pub(crate) type BackFn = Box<dyn Fn(&Arr, &mut GradSink)>;

pub(crate) struct Node {
    value: Arc<Arr>,
    requires_grad: bool,
    backward: Option<BackFn>,
}

/// Gradient accumulator indexed by node id.
pub struct GradSink {
    grads: Vec<Option<Arr>>,
}

impl GradSink {
    pub fn add(&mut self, id: usize, delta: Arr) {
        match &mut self.grads[id] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    /// Accumulate without allocating when the slot is empty and the caller
    /// can hand over ownership; otherwise adds element-wise.
    pub fn add_view(&mut self, id: usize, delta: &Arr) {
        match &mut self.grads[id] {
            Some(g) => *g += delta,
            slot => *slot = Some(delta.clone()),
        }
    }
}

/// Whether a tape records backward closures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// One forward pass: values plus the backward tape.
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    param_nodes: Vec<(ParamId, usize)>,
    mode: Mode,
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub(crate) fn push(
        &mut self,
        value: Arr,
        requires_grad: bool,
        backward: Option<BackFn>,
    ) -> Var {
        self.push_arc(Arc::new(value), requires_grad, backward)
    }

    pub(crate) fn push_arc(
        &mut self,
        value: Arc<Arr>,
        requires_grad: bool,
        backward: Option<BackFn>,
    ) -> Var {
        let tracked = requires_grad && self.mode == Mode::Train;
        self.nodes.push(Node {
            value,
            requires_grad: tracked,
            backward: if tracked { backward } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a node.
    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub(crate) fn value_arc(&self, v: Var) -> Arc<Arr> {
        Arc::clone(&self.nodes[v.0].value)
    }

    /// Scalar value of a single-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let a = self.value(v);
        debug_assert_eq!(a.len(), 1, "scalar_value on non-scalar node");
        a.iter().next().copied().unwrap_or(0.0)
    }

    /// Untracked constant.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push(value, false, None)
    }

    /// Untracked scalar constant (shape `[1]`).
    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Arr::from_elem(IxDyn(&[1]), value))
    }

    /// Tracked leaf holding a parameter value; its gradient is reported
    /// under the parameter's id after `backward`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.arc(id);
        let tracked = self.mode == Mode::Train;
        self.nodes.push(Node {
            value,
            requires_grad: tracked,
            backward: None,
        });
        let v = Var(self.nodes.len() - 1);
        if tracked {
            self.param_nodes.push((id, v.0));
        }
        v
    }

    /// Reverse pass from a scalar root. Returns gradients for every
    /// parameter node reachable from the root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.value(root).len(),
            1,
            "backward root must be a scalar"
        );
        let mut sink = GradSink {
            grads: vec![None; self.nodes.len()],
        };
        sink.grads[root.0] = Some(Arr::from_elem(self.value(root).raw_dim(), 1.0));
        for id in (0..=root.0).rev() {
            if sink.grads[id].is_none() {
                continue;
            }
            if let Some(back) = &self.nodes[id].backward {
                // Interior grads are consumed as we go; only leaves keep theirs.
                let g = sink.grads[id].take().expect("grad present");
                back(&g, &mut sink);
            }
        }
        let mut grads = Gradients::default();
        for &(pid, node) in &self.param_nodes {
            if let Some(g) = sink.grads[node].take() {
                grads.accumulate(pid, g);
            }
        }
        grads
    }
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Default)]
pub struct Gradients {
    by_param: std::collections::BTreeMap<usize, Arr>,
}

impl Gradients {
    pub fn accumulate(&mut self, id: ParamId, g: Arr) {
        match self.by_param.get_mut(&id.0) {
            Some(acc) => *acc += &g,
            None => {
                self.by_param.insert(id.0, g);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Arr> {
        self.by_param.get(&id.0)
    }

    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.by_param {
            self.accumulate(ParamId(id), g);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for g in self.by_param.values_mut() {
            g.mapv_inplace(|x| x * k);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Arr)> {
        self.by_param.iter().map(|(&id, g)| (ParamId(id), g))
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

/// Named, shared parameter tensors.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

#[derive(Clone)]
struct ParamEntry {
    name: String,
    value: Arc<Arr>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Arr) -> ParamId {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|e| e.name == name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value: Arc::new(value),
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Arr {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Arr {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Arr) {
        debug_assert_eq!(self.entries[id.0].value.shape(), value.shape());
        self.entries[id.0].value = Arc::new(value);
    }

    fn arc(&self, id: ParamId) -> Arc<Arr> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Arr)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), e.value.as_ref()))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Ids whose name starts with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.name.starts_with(prefix))
            .map(|(i, _)| ParamId(i))
            .collect()
    }
}

/// Adam optimizer with bias correction; update order follows parameter ids,
/// so steps are deterministic.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Arr>,
    v: Vec<Arr>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store
            .iter()
            .map(|(_, _, a)| Arr::zeros(a.raw_dim()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            });
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            });
        }
    }

    /// Serialized state: (step, first moments, second moments).
    pub fn state(&self) -> (u64, &[Arr], &[Arr]) {
        (self.t, &self.m, &self.v)
    }

    pub fn restore(&mut self, t: u64, m: Vec<Arr>, v: Vec<Arr>) {
        self.t = t;
        self.m = m;
        self.v = v;
    }
}

/// Uniform init in `[-limit, limit]`.
pub fn uniform_init(rng: &mut impl Rng, shape: &[usize], limit: f64) -> Arr {
    Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-limit..=limit))
}

/// Gaussian init with the given standard deviation.
pub fn normal_init(rng: &mut impl Rng, shape: &[usize], std: f64) -> Arr {
    use rand::distributions::Distribution;
    let dist = rand_distributions_normal(std);
    Arr::from_shape_fn(IxDyn(shape), |_| dist.sample(rng))
}

fn rand_distributions_normal(std: f64) -> impl rand::distributions::Distribution<f64> {
    // Box-Muller via two uniforms keeps us off rand_distr for one function.
    struct Normal {
        std: f64,
    }
    impl rand::distributions::Distribution<f64> for Normal {
        fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            self.std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        }
    }
    Normal { std }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn backward_through_sum_of_products() {
        let mut store = ParamStore::new();
        let a = store.add("a", Arr::from_shape_vec(IxDyn(&[2]), vec![2.0, 3.0]).unwrap());
        let b = store.add("b", Arr::from_shape_vec(IxDyn(&[2]), vec![5.0, 7.0]).unwrap());
        let mut g = Graph::new(Mode::Train);
        let va = g.param(&store, a);
        let vb = g.param(&store, b);
        let prod = g.mul(va, vb);
        let loss = g.sum_all(prod);
        assert_eq!(g.scalar_value(loss), 2.0 * 5.0 + 3.0 * 7.0);
        let grads = g.backward(loss);
        assert_eq!(grads.get(a).unwrap().as_slice().unwrap(), &[5.0, 7.0]);
        assert_eq!(grads.get(b).unwrap().as_slice().unwrap(), &[2.0, 3.0]);
    }

    #[test]
    fn shared_parameter_grads_accumulate() {
        let mut store = ParamStore::new();
        let a = store.add("a", Arr::from_elem(IxDyn(&[1]), 3.0));
        let mut g = Graph::new(Mode::Train);
        let v1 = g.param(&store, a);
        let v2 = g.param(&store, a);
        let s = g.mul(v1, v2); // a^2
        let loss = g.sum_all(s);
        let grads = g.backward(loss);
        // d(a^2)/da = 2a = 6
        assert_eq!(grads.get(a).unwrap()[[0]], 6.0);
    }

    #[test]
    fn inference_mode_records_no_tape() {
        let mut store = ParamStore::new();
        let a = store.add("a", Arr::from_elem(IxDyn(&[4]), 1.5));
        let mut g = Graph::new(Mode::Inference);
        let v = g.param(&store, a);
        let r = g.relu(v);
        assert!(!g.requires_grad(r));
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add("p", Arr::from_elem(IxDyn(&[1]), 4.0));
        let mut adam = Adam::new(&store, 0.1);
        for _ in 0..200 {
            let mut g = Graph::new(Mode::Train);
            let v = g.param(&store, p);
            let sq = g.mul(v, v);
            let loss = g.sum_all(sq);
            let grads = g.backward(loss);
            adam.step(&mut store, &grads);
        }
        assert!(store.get(p)[[0]].abs() < 0.05);
    }
}
