//! Named parameter tensors with deterministic initialization and a
//! versioned checkpoint format.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// All trainable tensors, keyed by dotted names. Iteration order is sorted,
/// which keeps initialization, optimization, and serialization deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scaled-uniform initialization: `U(-s, s)` with `s = sqrt(6 / (fan_in + fan_out))`.
    pub fn init_uniform(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
        let s = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect();
        self.insert(name, Array2::from_shape_vec((rows, cols), data).unwrap());
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::zeros((rows, cols)));
    }

    pub fn init_ones(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::ones((rows, cols)));
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        self.tensors.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Registers the tensor on a tape so its gradient is collected.
    pub fn var(&self, tape: &Tape, name: &str) -> Var {
        tape.param(name, self.get(name).clone())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRecord {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Serialized RNG position: seed plus the ChaCha word offset, enough to
/// resume the stream exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        RngState {
            seed,
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word_pos {:?}", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Single-archive checkpoint: version, config echo, RNG state, tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub rng: RngState,
    params: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value, rng: RngState, store: &ParamStore) -> Self {
        let config_hash = hash_json(&config);
        let params = store
            .iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    TensorRecord {
                        rows: t.nrows(),
                        cols: t.ncols(),
                        data: t.iter().copied().collect(),
                    },
                )
            })
            .collect();
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config,
            config_hash,
            rng,
            params,
        }
    }

    pub fn into_store(self) -> Result<(ParamStore, serde_json::Value, RngState)> {
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let mut store = ParamStore::new();
        for (name, rec) in self.params {
            if rec.data.len() != rec.rows * rec.cols {
                return Err(Error::Checkpoint(format!("tensor {name:?} has wrong length")));
            }
            store.insert(
                &name,
                Array2::from_shape_vec((rec.rows, rec.cols), rec.data).unwrap(),
            );
        }
        Ok((store, self.config, self.rng))
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load<R: Read>(r: R) -> Result<Self> {
        Ok(serde_json::from_reader(r)?)
    }
}

/// FNV-1a over the canonical JSON encoding; used to detect config mismatches
/// between a checkpoint and an evaluation request.
pub fn hash_json(value: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_deterministic() {
        let mut a = ParamStore::new();
        let mut b = ParamStore::new();
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        a.init_uniform("w", 3, 4, &mut r1);
        b.init_uniform("w", 3, 4, &mut r2);
        assert_eq!(a.get("w"), b.get("w"));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        store.init_uniform("a.w", 2, 3, &mut rng);
        store.init_zeros("b.bias", 1, 3);
        let cfg = serde_json::json!({"text_dim": 8});
        let ck = Checkpoint::new(cfg, RngState::capture(3, &rng), &store);

        let mut buf1 = Vec::new();
        ck.save(&mut buf1).unwrap();
        let loaded = Checkpoint::load(buf1.as_slice()).unwrap();
        let (store2, cfg2, rng2) = loaded.into_store().unwrap();
        let ck2 = Checkpoint::new(cfg2, rng2, &store2);
        let mut buf2 = Vec::new();
        ck2.save(&mut buf2).unwrap();
        assert_eq!(buf1, buf2);
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let _burn: f64 = rng.gen();
        let state = RngState::capture(11, &rng);
        let mut resumed = state.restore().unwrap();
        let a: f64 = rng.gen();
        let b: f64 = resumed.gen();
        assert_eq!(a, b);
    }

    #[test]
    fn version_mismatch_rejected() {
        let store = ParamStore::new();
        let rng = ChaCha8Rng::seed_from_u64(1);
        let mut ck = Checkpoint::new(serde_json::json!({}), RngState::capture(1, &rng), &store);
        ck.version = 99;
        assert!(ck.into_store().is_err());
    }
}
