use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Learned weights.
    Weight,
    /// Running statistics; never touched by the optimizer.
    Buffer,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with std `sqrt(2 / fan_out)`.
    KaimingFanOut { fan_out: usize },
    Uniform { limit: f32 },
}

/// Shared switch that lets every batch-norm layer of a network use a
/// caller-chosen running-statistics momentum, e.g. `1 / (k + 1)` on the
/// `k`-th calibration batch for an exact cumulative average.
#[derive(Debug, Default)]
pub struct BnControl {
    momentum_bits: AtomicU64,
}

impl BnControl {
    /// `None` restores each layer's own momentum.
    pub fn set_momentum(&self, momentum: Option<f64>) {
        self.momentum_bits
            .store(momentum.map_or(0, f64::to_bits), Ordering::SeqCst);
    }

    pub fn momentum_or(&self, default: f64) -> f64 {
        match self.momentum_bits.load(Ordering::SeqCst) {
            0 => default,
            bits => f64::from_bits(bits),
        }
    }
}

pub struct ParamEntry {
    pub var: Var,
    pub kind: ParamKind,
}

/// Named backbone tensors. Initialization draws from a seeded generator in
/// creation order, so a given seed always yields the same network.
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
    trainable: bool,
    rng: ChaCha8Rng,
    device: Device,
    bn_control: Arc<BnControl>,
}

impl ParamStore {
    pub fn new(seed: u64, trainable: bool) -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            trainable,
            rng: ChaCha8Rng::seed_from_u64(seed),
            device: Device::Cpu,
            bn_control: Arc::default(),
        }
    }

    pub fn bn_control(&self) -> Arc<BnControl> {
        self.bn_control.clone()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    fn create(&mut self, name: &str, shape: &[usize], init: Init, kind: ParamKind) -> Result<Var> {
        if self.entries.contains_key(name) {
            return Err(Error::Shape(format!("duplicate parameter name {name}")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::KaimingFanOut { fan_out } => {
                let std = (2.0 / fan_out as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut self.rng);
                        (z * std) as f32
                    })
                    .collect()
            }
            Init::Uniform { limit } => (0..n).map(|_| self.rng.random_range(-limit..=limit)).collect(),
        };
        let var = Var::from_vec(values, shape, &self.device)?;
        self.entries.insert(
            name.to_owned(),
            ParamEntry {
                var: var.clone(),
                kind,
            },
        );
        Ok(var)
    }

    /// A learned tensor, detached from autograd when the store is frozen.
    pub fn weight(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let var = self.create(name, shape, init, ParamKind::Weight)?;
        Ok(if self.trainable {
            var.as_tensor().clone()
        } else {
            var.as_detached_tensor()
        })
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.create(name, shape, init, ParamKind::Buffer)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn count(&self, kind: ParamKind) -> usize {
        self.entries
            .values()
            .filter(|e| e.kind == kind)
            .map(|e| e.var.elem_count())
            .sum()
    }

    /// Overwrite every tensor from `tensors`, which must cover all names
    /// with matching shapes. Extra tensors (e.g. a classifier) are ignored.
    pub fn load_from(&self, tensors: &std::collections::HashMap<String, Tensor>, origin: &str) -> Result<()> {
        for (name, entry) in &self.entries {
            let src = tensors.get(name).ok_or_else(|| Error::Incompatible {
                what: format!("weights in {origin}"),
                expected: format!("tensor `{name}`"),
                found: "nothing".into(),
            })?;
            if src.dims() != entry.var.dims() {
                return Err(Error::Incompatible {
                    what: format!("shape of `{name}` in {origin}"),
                    expected: format!("{:?}", entry.var.dims()),
                    found: format!("{:?}", src.dims()),
                });
            }
            entry.var.set(&src.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }
}
