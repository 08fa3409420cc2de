//! Named parameter collections shared by every trainable component.
//!
//! A `ParamStore` is an ordered list of named f64 matrices. Order is fixed by
//! the model constructor, so optimizer state, EMA mirrors, and serialized
//! checkpoints all agree on layout; lookups by name are O(1).

use std::collections::{BTreeMap, HashMap};

use meduet_tensor::{Tape, TensorId};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    arrays: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, arr: Array2<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {}",
            name
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.arrays.push(arr);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        let i = self.index[name];
        &self.arrays[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        let i = self.index[name];
        &mut self.arrays[i]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.arrays.iter().map(|a| a.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.arrays.iter())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn array_at(&self, i: usize) -> &Array2<f64> {
        &self.arrays[i]
    }

    pub fn array_at_mut(&mut self, i: usize) -> &mut Array2<f64> {
        &mut self.arrays[i]
    }

    /// Subset copy keeping parameters whose name starts with any prefix.
    /// Order is inherited from self.
    pub fn filtered(&self, prefixes: &[&str]) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, arr) in self.iter() {
            if prefixes.iter().any(|p| name.starts_with(p)) {
                out.insert(name, arr.clone());
            }
        }
        out
    }

    /// EMA update toward `source`: self = decay * self + (1 - decay) * source.
    /// Every name in self must exist in source.
    pub fn ema_update(&mut self, source: &ParamStore, decay: f64) {
        for i in 0..self.names.len() {
            let src = source.get(&self.names[i]);
            let dst = &mut self.arrays[i];
            dst.zip_mut_with(src, |t, &s| *t = decay * *t + (1.0 - decay) * s);
        }
    }

    /// Binds every parameter onto a tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let ids = self
            .arrays
            .iter()
            .map(|a| {
                if trainable {
                    tape.param(a.clone())
                } else {
                    tape.constant(a.clone())
                }
            })
            .collect();
        BoundParams {
            ids,
            index: self.index.clone(),
        }
    }

    pub fn to_container(&self) -> BTreeMap<String, Array2<f64>> {
        self.iter().map(|(n, a)| (n.to_string(), a.clone())).collect()
    }

    /// Loads values into an already-constructed store. Names and shapes must
    /// match exactly; extra or missing entries are errors.
    pub fn load_values(&mut self, map: &BTreeMap<String, Array2<f64>>) -> Result<()> {
        if map.len() != self.names.len() {
            return Err(Error::Config(format!(
                "parameter count mismatch: container has {}, model expects {}",
                map.len(),
                self.names.len()
            )));
        }
        for i in 0..self.names.len() {
            let name = &self.names[i];
            let arr = map.get(name).ok_or_else(|| {
                Error::Config(format!("container missing parameter {}", name))
            })?;
            if arr.dim() != self.arrays[i].dim() {
                return Err(Error::Config(format!(
                    "parameter {} shape {:?} != expected {:?}",
                    name,
                    arr.dim(),
                    self.arrays[i].dim()
                )));
            }
            self.arrays[i] = arr.clone();
        }
        Ok(())
    }

    /// Copies values for every name that exists in both stores with matching
    /// shape; returns how many were copied. Used for warm starts.
    pub fn load_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for i in 0..self.names.len() {
            if other.contains(&self.names[i]) {
                let src = other.get(&self.names[i]);
                if src.dim() == self.arrays[i].dim() {
                    self.arrays[i] = src.clone();
                    copied += 1;
                }
            }
        }
        copied
    }
}

/// Tape handles for a bound store.
pub struct BoundParams {
    pub ids: Vec<TensorId>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> TensorId {
        self.ids[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {}", name))]
    }

    /// Gradients in store order; zero matrices where no adjoint arrived.
    pub fn collect_grads(&self, tape: &Tape, store: &ParamStore) -> Vec<Array2<f64>> {
        store
            .names()
            .enumerate()
            .map(|(i, _)| {
                tape.grad(self.ids[i])
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(store.array_at(i).dim()))
            })
            .collect()
    }
}

// ---- initializers ----

/// Normal(0, std) truncated at two standard deviations.
pub fn trunc_normal(rng: &mut ChaCha12Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| loop {
        // Box-Muller keeps the dependency surface small and the stream stable.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    })
}

pub fn zeros(rows: usize, cols: usize) -> Array2<f64> {
    Array2::zeros((rows, cols))
}

pub fn ones(rows: usize, cols: usize) -> Array2<f64> {
    Array2::ones((rows, cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn insertion_order_is_stable() {
        let mut s = ParamStore::new();
        s.insert("z", zeros(1, 1));
        s.insert("a", zeros(1, 1));
        let names: Vec<&str> = s.names().collect();
        assert_eq!(names, vec!["z", "a"]);
    }

    #[test]
    fn container_round_trip() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.insert("w", trunc_normal(&mut rng, 3, 2, 0.02));
        s.insert("b", zeros(1, 2));
        let map = s.to_container();
        let mut fresh = ParamStore::new();
        fresh.insert("w", zeros(3, 2));
        fresh.insert("b", zeros(1, 2));
        fresh.load_values(&map).unwrap();
        assert_eq!(fresh.get("w"), s.get("w"));
    }

    #[test]
    fn load_values_rejects_shape_mismatch() {
        let mut s = ParamStore::new();
        s.insert("w", zeros(2, 2));
        let mut map = BTreeMap::new();
        map.insert("w".to_string(), zeros(3, 3));
        assert!(s.load_values(&map).is_err());
    }

    #[test]
    fn ema_moves_toward_source() {
        let mut teacher = ParamStore::new();
        teacher.insert("w", zeros(1, 1));
        let mut student = ParamStore::new();
        student.insert("w", ones(1, 1));
        teacher.ema_update(&student, 0.9);
        assert!((teacher.get("w")[[0, 0]] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn filtered_keeps_prefixes() {
        let mut s = ParamStore::new();
        s.insert("enc.0.w", zeros(1, 1));
        s.insert("dec.0.w", zeros(1, 1));
        s.insert("enc.1.w", zeros(1, 1));
        let f = s.filtered(&["enc."]);
        assert_eq!(f.len(), 2);
        assert!(f.contains("enc.0.w") && f.contains("enc.1.w"));
    }

    #[test]
    fn trunc_normal_respects_bounds() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let a = trunc_normal(&mut rng, 50, 50, 0.02);
        for &v in a.iter() {
            assert!(v.abs() <= 0.04 + 1e-12);
        }
    }
}
