//! Named parameter storage, initialization and per-pass graph binding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Ordered, uniquely named set of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.find(&name).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.params.push(Param { name, value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Overwrites values from a store with identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(Error::Contract(format!(
                "parameter count mismatch: {} vs {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(Error::Contract(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(())
    }
}

/// Seeded initializer. Every tensor draws from its own stream keyed by
/// parameter name, so values do not depend on construction order.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { seed }
    }

    fn rng(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(fnv1a(name.as_bytes()));
        rng
    }

    /// Uniform in ±√(6/(fan_in+fan_out)).
    pub fn xavier(&self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(name, shape, bound)
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Tensor {
        let mut rng = self.rng(name);
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape product matches")
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Gradients aligned with a [`ParamStore`]; unbound parameters get zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Tensor>);

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients(store.iter().map(|p| Tensor::zeros(p.value.shape())).collect())
    }

    pub fn global_norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.0 {
            t.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn all_finite(&self) -> bool {
        self.0.iter().all(Tensor::all_finite)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }
}

/// One forward/backward pass: a fresh graph plus lazily bound parameters.
pub struct Session<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    expert_frame_evals: u64,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            expert_frame_evals: 0,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The graph leaf for `id`, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.graph.param(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.graph.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub(crate) fn count_expert_frames(&mut self, frames: usize) {
        self.expert_frame_evals += frames as u64;
    }

    /// Number of (frame, expert) feed-forward evaluations performed so far.
    pub fn expert_frame_evals(&self) -> u64 {
        self.expert_frame_evals
    }

    /// Gradients after `graph.backward`, zero for parameters never bound.
    pub fn gradients(&self) -> Gradients {
        let grads = self
            .store
            .iter()
            .zip(&self.bound)
            .map(|(p, v)| {
                v.and_then(|v| self.graph.grad_tensor(v))
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape()))
            })
            .collect();
        Gradients(grads)
    }
}


/// Finite-difference check of `f` with respect to every parameter in `store`
/// and every tensor in `inputs`.
pub fn check_gradients<F>(
    store: &ParamStore,
    inputs: &[Tensor],
    f: F,
    cfg: &crate::autodiff::GradCheckConfig,
) -> Result<crate::autodiff::GradCheckReport>
where
    F: Fn(&mut Session, &[Var]) -> Result<Var>,
{
    let mut sess = Session::new(store);
    let leaves: Vec<Var> = inputs.iter().map(|x| sess.graph.param(x.clone())).collect();
    let loss = f(&mut sess, &leaves)?;
    sess.graph.backward(loss)?;
    let mut analytic = sess.gradients().0;
    for (&v, x) in leaves.iter().zip(inputs) {
        analytic.push(sess.graph.grad_tensor(v).unwrap_or_else(|| Tensor::zeros(x.shape())));
    }

    let mut all: Vec<Tensor> = store.iter().map(|p| p.value.clone()).collect();
    all.extend(inputs.iter().cloned());
    let n_params = store.len();
    let mut probe_store = store.clone();
    crate::autodiff::compare_with_finite_differences(
        &analytic,
        &all,
        |probe| {
            for (p, t) in probe_store.iter_mut().zip(&probe[..n_params]) {
                p.value.data_mut().copy_from_slice(t.data());
            }
            let mut sess = Session::new(&probe_store);
            let leaves: Vec<Var> = probe[n_params..].iter().map(|x| sess.input(x.clone())).collect();
            let loss = f(&mut sess, &leaves)?;
            Ok(sess.value(loss).item())
        },
        cfg,
    )
}
