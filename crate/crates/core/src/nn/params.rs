use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors, in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, usize>,
}

/// Graph handles for every parameter of a store, valid for one [`Graph`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.values.iter_mut()
    }

    /// Overwrites a parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if self.values[id.0].shape() != value.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}`: shape {:?} does not match {:?}",
                value.shape(),
                self.values[id.0].shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .values
                .iter()
                .map(|t| g.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }

    /// Gradient buffers after `g.backward`, zero-filled where the loss did
    /// not depend on a parameter.
    pub fn grads(&self, g: &Graph, bound: &Bound) -> Vec<Vec<f64>> {
        self.values
            .iter()
            .zip(&bound.vars)
            .map(|(t, &v)| {
                g.grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

/// Seeded parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `(-k, k)` with `k = 1 / sqrt(fan_in)`.
    pub fn uniform(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        let k = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-k..k)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }
}

/// Errors above this trigger a retry at other step sizes.
const KINK_RETRY_ABOVE: f64 = 1e-5;
/// Gradients below this multiple of the difference quotient's roundoff
/// are compared against that floor rather than their own size.
const RESOLUTION_FACTOR: f64 = 1e4;

/// Per-parameter finite-difference check of a scalar function of `store`.
/// Returns `(name, max relative error)` for every parameter.
///
/// A coordinate that mismatches at `h` is retried at `10h` and at `h/10`
/// down to `h/1000`, keeping its best error: roundoff or a step straddling
/// a ReLU kink spoils only some step sizes, a wrong backward rule all.
///
/// The relative-error denominator is floored at `1e4 * eps * |f| / step`:
/// a central difference cannot resolve gradients much smaller than its
/// own roundoff, so those are judged on absolute error.
pub fn check_param_gradients<F>(store: &ParamStore, f: F, h: f64) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g, true);
    let loss = f(&mut g, &bound)?;
    g.backward(loss)?;
    let analytic = store.grads(&g, &bound);
    let f0 = g.value(loss).item().abs();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let b = s.bind(&mut g, false);
        let out = f(&mut g, &b)?;
        Ok(g.value(out).item())
    };
    let mut work = store.clone();
    let mut report = Vec::with_capacity(store.len());
    for id in store.ids() {
        let mut worst: f64 = 0.0;
        for i in 0..store.get(id).numel() {
            let orig = store.get(id).data()[i];
            let mut err = f64::INFINITY;
            for step in [h, 10.0 * h, h / 10.0, h / 100.0, h / 1000.0] {
                work.get_mut(id).data_mut()[i] = orig + step;
                let plus = eval(&work)?;
                work.get_mut(id).data_mut()[i] = orig - step;
                let minus = eval(&work)?;
                work.get_mut(id).data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * step);
                let floor = RESOLUTION_FACTOR * f64::EPSILON * f0 / step;
                let a = analytic[id.0][i];
                let denom = a.abs().max(numeric.abs()).max(floor).max(1e-8);
                err = err.min((a - numeric).abs() / denom);
                if err < KINK_RETRY_ABOVE {
                    break;
                }
            }
            worst = worst.max(err);
        }
        report.push((store.name(id).to_string(), worst));
    }
    Ok(report)
}
