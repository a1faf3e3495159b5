use super::tensor::Tensor;
use crate::scalar::Real;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Named, ordered collection of learnable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// He-normal initialised weight with the given fan-in.
    pub fn add_he(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ParamId {
        let std = (2.0 / fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copy every tensor whose name and shape match from `other`.
    /// Returns the number of tensors copied.
    pub fn load_matching(&mut self, other: &ParamSet<T>) -> usize {
        let mut copied = 0;
        for (i, name) in self.names.iter().enumerate() {
            if let Some(j) = other.find(name) {
                if other.tensors[j.0].shape() == self.tensors[i].shape() {
                    self.tensors[i] = other.tensors[j.0].clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// Gradient buffers aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Grads<T> {
    slots: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn new(n: usize) -> Self {
        Self { slots: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.slots[id.0].as_ref()
    }

    pub fn accumulate(&mut self, id: ParamId, g: Tensor<T>) {
        match &mut self.slots[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    pub fn merge(&mut self, other: Grads<T>) {
        for (i, g) in other.slots.into_iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.slots.iter_mut().flatten() {
            g.scale(s);
        }
    }

    pub fn global_norm(&self) -> T {
        self.slots
            .iter()
            .flatten()
            .flat_map(|g| g.data().iter())
            .map(|&v| v * v)
            .sum::<T>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(Tensor::all_finite)
    }
}

/// Adam optimizer state.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: f64) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr: T::lit(lr),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Apply one update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &Grads<T>) {
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        for i in 0..params.len() {
            let Some(g) = grads.get(ParamId(i)) else { continue };
            let p = params.get_mut(ParamId(i)).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (T::one() - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (T::one() - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
