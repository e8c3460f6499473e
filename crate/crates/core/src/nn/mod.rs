//! Model building blocks: parameter storage, initialization, and Adam.

pub mod lstm;
pub mod transformer;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::autograd::{Grads, Tape, Value, Var};
use crate::error::{Result, SmlmError};

/// One named trainable matrix plus its Adam moment buffers.
pub struct Param {
    pub name: String,
    pub value: Value,
    m: Array2<f64>,
    v: Array2<f64>,
}

impl Param {
    fn new(name: String, value: Array2<f64>) -> Self {
        let dim = value.dim();
        Param {
            name,
            value: Arc::new(value),
            m: Array2::zeros(dim),
            v: Array2::zeros(dim),
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }
}

/// Flat collection of parameters; models refer to entries by index.
#[derive(Default)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Array2<f64>) -> usize {
        self.params.push(Param::new(name.to_string(), value));
        self.params.len() - 1
    }

    /// Xavier-uniform matrix: limit `sqrt(6 / (fan_in + fan_out))`.
    pub fn add_xavier(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha20Rng,
    ) -> usize {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit));
        self.add(name, value)
    }

    /// Unit-variance uniform matrix (`±√3`), the usual scale for embedding
    /// tables so downstream fan-in initializations see unit-variance
    /// inputs.
    pub fn add_unit_variance(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha20Rng,
    ) -> usize {
        let limit = 3.0f64.sqrt();
        let value = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-limit..limit));
        self.add(name, value)
    }

    pub fn add_zeros(&mut self, name: &str, rows: usize, cols: usize) -> usize {
        self.add(name, Array2::zeros((rows, cols)))
    }

    /// Registers every parameter as a leaf on `tape`; the returned vector is
    /// index-aligned with `self.params`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.params
            .iter()
            .map(|p| tape.leaf_shared(Arc::clone(&p.value)))
            .collect()
    }

    /// Pulls gradients for the listed parameters out of a backward result.
    pub fn collect_grads(
        &self,
        bound: &[Var<'_>],
        grads: &mut Grads,
        indices: &[usize],
    ) -> Vec<(usize, Array2<f64>)> {
        indices
            .iter()
            .filter_map(|&i| grads.take(bound[i]).map(|g| (i, g)))
            .collect()
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.params.len()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Deep copy of parameter values (moment buffers reset).
    pub fn snapshot(&self) -> Vec<Array2<f64>> {
        self.params.iter().map(|p| (*p.value).clone()).collect()
    }

    /// Restores values captured by [`ParamStore::snapshot`].
    pub fn restore(&mut self, snapshot: &[Array2<f64>]) {
        assert_eq!(snapshot.len(), self.params.len());
        for (p, s) in self.params.iter_mut().zip(snapshot) {
            p.value = Arc::new(s.clone());
            p.m.fill(0.0);
            p.v.fill(0.0);
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SMLMCKPT";
const CHECKPOINT_VERSION: u32 = 1;

impl ParamStore {
    /// Writes all parameter values as named little-endian f64 tensors.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io_err = |e| SmlmError::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        w.write_all(CHECKPOINT_MAGIC).map_err(io_err)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION).map_err(io_err)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)
            .map_err(io_err)?;
        for p in &self.params {
            w.write_u32::<LittleEndian>(p.name.len() as u32)
                .map_err(io_err)?;
            w.write_all(p.name.as_bytes()).map_err(io_err)?;
            let (rows, cols) = p.value.dim();
            w.write_u32::<LittleEndian>(rows as u32).map_err(io_err)?;
            w.write_u32::<LittleEndian>(cols as u32).map_err(io_err)?;
            for &v in p.value.iter() {
                w.write_f64::<LittleEndian>(v).map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)
    }

    /// Loads values saved by [`ParamStore::save`] into a store with an
    /// identical layout; any name or shape mismatch is a corruption error.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let io_err = |e| SmlmError::io(path, e);
        let corrupt = |reason: String| SmlmError::CorruptedArtifact {
            path: path.into(),
            reason,
        };
        let mut r = BufReader::new(File::open(path).map_err(io_err)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io_err)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
        if version != CHECKPOINT_VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let count = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        if count != self.params.len() {
            return Err(corrupt(format!(
                "{count} tensors but model has {}",
                self.params.len()
            )));
        }
        for p in &mut self.params {
            let name_len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(io_err)?;
            let name = String::from_utf8(name).map_err(|_| corrupt("non-utf8 name".into()))?;
            if name != p.name {
                return Err(corrupt(format!("expected tensor `{}`, found `{name}`", p.name)));
            }
            let rows = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
            let cols = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
            if (rows, cols) != p.value.dim() {
                return Err(corrupt(format!(
                    "tensor `{name}` is {rows}x{cols}, expected {:?}",
                    p.value.dim()
                )));
            }
            let mut data = Array2::zeros((rows, cols));
            for v in data.iter_mut() {
                *v = r.read_f64::<LittleEndian>().map_err(io_err)?;
            }
            p.value = Arc::new(data);
            p.m.fill(0.0);
            p.v.fill(0.0);
        }
        let mut rest = [0u8; 1];
        match r.read(&mut rest).map_err(io_err)? {
            0 => Ok(()),
            _ => Err(corrupt("trailing bytes".into())),
        }
    }
}

/// L2 norm over a set of gradient matrices taken as one flat vector.
pub fn global_norm(grads: &[(usize, Array2<f64>)]) -> f64 {
    grads
        .iter()
        .map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scales all gradients so their global norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [(usize, Array2<f64>)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

/// Adam optimizer with bias correction. One instance per parameter group.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    /// Applies one update. Panics if any parameter is still borrowed by a
    /// live tape; drop the tape before stepping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(usize, Array2<f64>)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, g) in grads {
            let p = &mut store.params[*idx];
            p.m = &p.m * self.beta1 + &(g * (1.0 - self.beta1));
            p.v = &p.v * self.beta2 + &g.mapv(|v| v * v) * (1.0 - self.beta2);
            let value = Arc::get_mut(&mut p.value)
                .expect("parameter still borrowed by a tape during optimizer step");
            for ((w, &m), &v) in value.iter_mut().zip(p.m.iter()).zip(p.v.iter()) {
                let mhat = m / bc1;
                let vhat = v / bc2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn xavier_init_is_seed_deterministic_and_bounded() {
        let mut a = ChaCha20Rng::seed_from_u64(7);
        let mut b = ChaCha20Rng::seed_from_u64(7);
        let mut sa = ParamStore::new();
        let mut sb = ParamStore::new();
        let ia = sa.add_xavier("w", 20, 30, &mut a);
        let ib = sb.add_xavier("w", 20, 30, &mut b);
        assert_eq!(&*sa.params[ia].value, &*sb.params[ib].value);
        let limit = (6.0 / 50.0_f64).sqrt();
        assert!(sa.params[ia].value.iter().all(|v| v.abs() < limit));
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", array![[5.0, -3.0]]);
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let tape = Tape::new();
            let bound = store.bind(&tape);
            let loss = bound[w].square().sum_all();
            let mut grads = tape.backward(loss);
            let updates = store.collect_grads(&bound, &mut grads, &[w]);
            drop(grads);
            drop(tape);
            opt.step(&mut store, &updates);
        }
        assert!(store.params[w].value.iter().all(|v| v.abs() < 1e-4));
    }

    #[test]
    fn clip_rescales_to_threshold() {
        let mut grads = vec![(0usize, array![[3.0, 0.0]]), (1usize, array![[0.0, 4.0]])];
        let pre = clip_global_norm(&mut grads, 1e-3);
        assert!((pre - 5.0).abs() < 1e-12);
        let post = global_norm(&grads);
        assert!((post - 1e-3).abs() < 1e-9);
        // Direction preserved.
        assert!((grads[0].1[[0, 0]] / grads[1].1[[0, 1]] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn clip_leaves_small_gradients_alone() {
        let mut grads = vec![(0usize, array![[1e-5, 0.0]])];
        clip_global_norm(&mut grads, 1e-3);
        assert_eq!(grads[0].1[[0, 0]], 1e-5);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact_and_rejects_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        store.add_xavier("a", 3, 4, &mut rng);
        store.add_xavier("b", 2, 2, &mut rng);
        store.save(&path).unwrap();

        let mut other = ParamStore::new();
        let mut rng2 = ChaCha20Rng::seed_from_u64(99);
        other.add_xavier("a", 3, 4, &mut rng2);
        other.add_xavier("b", 2, 2, &mut rng2);
        other.load_into(&path).unwrap();
        for (p, q) in store.params.iter().zip(&other.params) {
            assert_eq!(&*p.value, &*q.value);
        }

        // Wrong layout: name mismatch.
        let mut wrong = ParamStore::new();
        wrong.add_zeros("a", 3, 4);
        wrong.add_zeros("c", 2, 2);
        assert!(wrong.load_into(&path).is_err());
        // Wrong shape.
        let mut wrong = ParamStore::new();
        wrong.add_zeros("a", 3, 4);
        wrong.add_zeros("b", 2, 3);
        assert!(wrong.load_into(&path).is_err());
        // Truncated file.
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let mut trunc = ParamStore::new();
        let mut rng3 = ChaCha20Rng::seed_from_u64(1);
        trunc.add_xavier("a", 3, 4, &mut rng3);
        trunc.add_xavier("b", 2, 2, &mut rng3);
        assert!(trunc.load_into(&path).is_err());
    }
}
