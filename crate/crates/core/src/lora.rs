//! Low-rank adapters: `W' = W + scale·A·B` on selected denoiser layers.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::tensor::{gemm, hash_blocks, Matrix, Real};

const ADAPTER_KIND: [u8; 4] = *b"LORA";

#[derive(Clone, Debug, PartialEq)]
pub struct LoRAAdapter<T> {
    pub layer_id: String,
    /// `m × r`.
    pub a: Matrix<T>,
    /// `r × n`.
    pub b: Matrix<T>,
    pub scale: T,
}

impl<T: Real> LoRAAdapter<T> {
    /// `A ~ N(0, 0.01²)`, `B = 0`.
    pub fn init<R: Rng + ?Sized>(layer_id: &str, m: usize, n: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank >= m.min(n) {
            return Err(Error::config(format!(
                "rank {rank} must satisfy 0 < r < min({m}, {n}) for layer {layer_id}"
            )));
        }
        let normal = Normal::new(0.0, 0.01).expect("valid normal");
        let a = (0..m * rank).map(|_| T::lit(normal.sample(rng))).collect();
        Ok(LoRAAdapter {
            layer_id: layer_id.to_string(),
            a: Matrix::from_vec(m, rank, a)?,
            b: Matrix::zeros(rank, n),
            scale: T::one(),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.cols
    }

    /// `(m, n)` of the adapted weight.
    pub fn target_shape(&self) -> (usize, usize) {
        (self.a.rows, self.b.cols)
    }

    pub fn num_params(&self) -> usize {
        self.a.data.len() + self.b.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite() && self.scale.is_finite()
    }

    fn check(&self, m: usize, n: usize) -> Result<()> {
        if self.a.cols != self.b.rows || self.target_shape() != (m, n) {
            return Err(Error::shape(format!(
                "adapter {} is {}×{}·{}×{}, layer weight is {m}×{n}",
                self.layer_id, self.a.rows, self.a.cols, self.b.rows, self.b.cols
            )));
        }
        Ok(())
    }
}

/// `W + scale·A·B`; `W` is not modified.
pub fn effective_weight<T: Real>(w: &Matrix<T>, adapter: &LoRAAdapter<T>) -> Result<Matrix<T>> {
    adapter.check(w.rows, w.cols)?;
    let mut out = w.clone();
    gemm(adapter.scale, adapter.a.op(), adapter.b.op(), T::one(), &mut out.data);
    Ok(out)
}

/// `(dL/dA, dL/dB) = (dL/dW'·Bᵀ·scale, Aᵀ·dL/dW'·scale)`.
pub fn lora_grads<T: Real>(d_wp: &Matrix<T>, adapter: &LoRAAdapter<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    adapter.check(d_wp.rows, d_wp.cols)?;
    let r = adapter.rank();
    let mut da = Matrix::zeros(d_wp.rows, r);
    gemm(adapter.scale, d_wp.op(), adapter.b.op().t(), T::zero(), &mut da.data);
    let mut db = Matrix::zeros(r, d_wp.cols);
    gemm(adapter.scale, adapter.a.op().t(), d_wp.op(), T::zero(), &mut db.data);
    Ok((da, db))
}

/// Layers a model exposes for adaptation: id → (rows, cols) of the weight.
pub trait Adaptable {
    fn adaptable_layers(&self) -> Vec<(String, (usize, usize))>;
    fn num_base_params(&self) -> usize;
}

/// Adapters keyed by layer id. Attaching validates against the model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdapterSet<T> {
    adapters: BTreeMap<String, LoRAAdapter<T>>,
}

/// Adapter parameters must stay below this fraction of the base model.
pub const MAX_ADAPTER_FRACTION: f64 = 0.1;

impl<T: Real> AdapterSet<T> {
    pub fn new() -> Self {
        AdapterSet {
            adapters: BTreeMap::new(),
        }
    }

    /// Fresh zero-product adapters on every adaptable layer of `model`.
    pub fn for_model<M: Adaptable, R: Rng + ?Sized>(model: &M, rank: usize, rng: &mut R) -> Result<Self> {
        let mut set = AdapterSet::new();
        for (id, (m, n)) in model.adaptable_layers() {
            set.attach(LoRAAdapter::init(&id, m, n, rank, rng)?, model)?;
        }
        Ok(set)
    }

    pub fn attach<M: Adaptable>(&mut self, adapter: LoRAAdapter<T>, model: &M) -> Result<()> {
        let layers = model.adaptable_layers();
        let Some((_, (m, n))) = layers.iter().find(|(id, _)| *id == adapter.layer_id) else {
            return Err(Error::config(format!("unknown adaptable layer '{}'", adapter.layer_id)));
        };
        adapter.check(*m, *n)?;
        if self.adapters.contains_key(&adapter.layer_id) {
            return Err(Error::config(format!("layer '{}' already has an adapter", adapter.layer_id)));
        }
        let total = self.num_params() + adapter.num_params();
        let limit = MAX_ADAPTER_FRACTION * model.num_base_params() as f64;
        if total as f64 >= limit {
            return Err(Error::config(format!(
                "adapters would hold {total} parameters, limit is {limit:.0} (10% of the base model)"
            )));
        }
        self.adapters.insert(adapter.layer_id.clone(), adapter);
        Ok(())
    }

    pub fn detach(&mut self, layer_id: &str) -> Result<LoRAAdapter<T>> {
        self.adapters
            .remove(layer_id)
            .ok_or_else(|| Error::config(format!("no adapter attached to '{layer_id}'")))
    }

    pub fn get(&self, layer_id: &str) -> Option<&LoRAAdapter<T>> {
        self.adapters.get(layer_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &LoRAAdapter<T>> {
        self.adapters.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LoRAAdapter<T>> {
        self.adapters.values_mut()
    }

    pub fn len(&self) -> usize {
        self.adapters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adapters.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.adapters.values().map(LoRAAdapter::num_params).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.adapters.values().all(LoRAAdapter::is_finite)
    }

    /// Flat parameter blocks `[A₁, B₁, A₂, B₂, …]` in layer-id order.
    pub fn param_blocks_mut(&mut self) -> Vec<&mut [T]> {
        self.adapters
            .values_mut()
            .flat_map(|a| [&mut a.a.data[..], &mut a.b.data[..]])
            .collect()
    }

    pub fn hash(&self) -> String {
        hash_blocks(
            self.adapters
                .values()
                .flat_map(|a| [(a.layer_id.as_str(), &a.a.data[..]), (a.layer_id.as_str(), &a.b.data[..])]),
        )
    }
}

impl AdapterSet<f32> {
    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        let layers: Vec<_> = self
            .adapters
            .values()
            .map(|a| json!({ "layer_id": a.layer_id, "rank": a.rank(), "scale": a.scale, "m": a.a.rows, "n": a.b.cols }))
            .collect();
        let mut c = Container::new(ADAPTER_KIND, json!({ "layers": layers, "hash": self.hash(), "extra": meta }));
        for a in self.adapters.values() {
            c.push(format!("{}.A", a.layer_id), vec![a.a.rows, a.a.cols], a.a.data.clone());
            c.push(format!("{}.B", a.layer_id), vec![a.b.rows, a.b.cols], a.b.data.clone());
        }
        c
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        self.to_container(meta).write(path)
    }

    /// Loads adapters and checks them against `model`.
    pub fn load<M: Adaptable>(path: &Path, model: &M) -> Result<(Self, serde_json::Value)> {
        let c = Container::read(path, ADAPTER_KIND)?;
        let layers = c.meta["layers"]
            .as_array()
            .ok_or_else(|| Error::ingestion(path, "missing adapter layer list"))?;
        let mut set = AdapterSet::new();
        for l in layers {
            let bad = || Error::ingestion(path, format!("malformed adapter entry {l}"));
            let id = l["layer_id"].as_str().ok_or_else(bad)?;
            let r = l["rank"].as_u64().ok_or_else(bad)? as usize;
            let m = l["m"].as_u64().ok_or_else(bad)? as usize;
            let n = l["n"].as_u64().ok_or_else(bad)? as usize;
            let scale = l["scale"].as_f64().ok_or_else(bad)? as f32;
            let adapter = LoRAAdapter {
                layer_id: id.to_string(),
                a: Matrix::from_vec(m, r, c.require(&format!("{id}.A"), m * r, path)?.to_vec())?,
                b: Matrix::from_vec(r, n, c.require(&format!("{id}.B"), r * n, path)?.to_vec())?,
                scale,
            };
            set.attach(adapter, model)
                .map_err(|e| Error::ingestion(path, e.to_string()))?;
        }
        Ok((set, c.meta["extra"].clone()))
    }
}
