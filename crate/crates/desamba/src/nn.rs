//! Parameter storage, layer building blocks, and the optimizer.
//!
//! Parameters are initialized from per-name RNG streams
//! (`init/<param name>`), so two stores built from the same seed and the
//! same layer names hold bitwise-identical tensors regardless of
//! construction order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels::ConvSpec;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Array;

pub struct Param {
    pub name: String,
    pub value: Array,
    /// Whether weight decay applies (matrices/kernels yes, biases/norms no).
    pub decay: bool,
}

pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, usize>,
    seed: u64,
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    TruncNormal(f64),
    Zero,
    One,
    Const(f64),
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore { params: Vec::new(), by_name: BTreeMap::new(), seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, decay: bool) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name: {name}"
        );
        let value = match init {
            Init::TruncNormal(std) => {
                let mut rng = Rng::for_component(self.seed, &format!("init/{name}"));
                Array::trunc_randn(shape, std, &mut rng)
            }
            Init::Zero => Array::zeros(shape),
            Init::One => Array::filled(shape, 1.0),
            Init::Const(v) => Array::filled(shape, v),
        };
        self.params.push(Param { name: name.to_string(), value, decay });
        self.by_name.insert(name.to_string(), self.params.len() - 1);
        self.params.len() - 1
    }

    pub fn value(&self, slot: usize) -> &Array {
        &self.params[slot].value
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Array {
        &mut self.params[slot].value
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    /// Exact number of scalar parameters.
    pub fn scalar_count(&self) -> u64 {
        self.params.iter().map(|p| p.value.len() as u64).sum()
    }

    /// Serialize all parameters (name, shape, f64 payload) to a writer.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"DSPM")?;
        w.write_all(&1u32.to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Load parameter values by name; every stored name must exist here with
    /// a matching shape.
    pub fn load<R: Read>(&mut self, mut r: R) -> Result<()> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"DSPM" {
            return Err(Error::Ingestion("bad parameter file magic".into()));
        }
        let mut u32buf = [0u8; 4];
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u32buf)?;
        r.read_exact(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        for _ in 0..count {
            r.read_exact(&mut u32buf)?;
            let nlen = u32::from_le_bytes(u32buf) as usize;
            let mut name = vec![0u8; nlen];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Ingestion("non-utf8 parameter name".into()))?;
            r.read_exact(&mut u32buf)?;
            let rank = u32::from_le_bytes(u32buf) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                r.read_exact(&mut u64buf)?;
                shape.push(u64::from_le_bytes(u64buf) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut u64buf)?;
                data.push(f64::from_le_bytes(u64buf));
            }
            let slot = self.slot(&name).ok_or_else(|| {
                Error::Ingestion(format!("checkpoint parameter {name} unknown to this model"))
            })?;
            if self.params[slot].value.shape() != shape.as_slice() {
                return Err(Error::Ingestion(format!(
                    "checkpoint parameter {name} shape {:?} does not match model {:?}",
                    shape,
                    self.params[slot].value.shape()
                )));
            }
            self.params[slot].value = Array::from_vec(&shape, data);
        }
        Ok(())
    }

    pub fn save_path(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.save(std::io::BufWriter::new(f))
    }

    pub fn load_path(&mut self, path: &Path) -> Result<()> {
        let f = std::fs::File::open(path)?;
        self.load(std::io::BufReader::new(f))
    }
}

/// Grouped 3D convolution layer.
pub struct Conv3d {
    pub w: usize,
    pub b: Option<usize>,
    pub spec: ConvSpec,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: [usize; 3],
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        groups: usize,
        init: Init,
        bias: bool,
    ) -> Self {
        assert_eq!(in_ch % groups, 0);
        let w = store.add(
            &format!("{name}.w"),
            &[out_ch, in_ch / groups, kernel[0], kernel[1], kernel[2]],
            init,
            true,
        );
        let b = bias.then(|| store.add(&format!("{name}.b"), &[out_ch], Init::Zero, false));
        Conv3d { w, b, spec: ConvSpec { stride, pad, groups }, in_ch, out_ch, kernel }
    }

    /// Stride-1, same-padded convolution (odd kernels).
    pub fn same(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        groups: usize,
        init: Init,
    ) -> Self {
        debug_assert_eq!(k % 2, 1);
        let p = k / 2;
        Conv3d::new(store, name, in_ch, out_ch, [k, k, k], [1, 1, 1], [p, p, p], groups, init, true)
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = t.bind_param(self.w, store.value(self.w));
        let b = self.b.map(|slot| t.bind_param(slot, store.value(slot)));
        t.conv3d(x, w, b, self.spec)
    }

    pub fn out_shape(&self, in_shape: &[usize; 5]) -> [usize; 5] {
        let mut out = [in_shape[0], self.out_ch, 0, 0, 0];
        for a in 0..3 {
            out[2 + a] =
                (in_shape[2 + a] + 2 * self.spec.pad[a] - self.kernel[a]) / self.spec.stride[a] + 1;
        }
        out
    }

    /// Multiply-accumulates for one forward pass at the given input shape.
    pub fn macs(&self, in_shape: &[usize; 5]) -> u64 {
        let out = self.out_shape(in_shape);
        let out_elems: u64 = out.iter().product::<usize>() as u64;
        let per_elem = (self.in_ch / self.spec.groups * self.kernel.iter().product::<usize>()) as u64;
        out_elems * per_elem
    }
}

/// Fully connected layer over `[batch, features]`.
pub struct Linear {
    pub w: usize,
    pub b: Option<usize>,
    pub nin: usize,
    pub nout: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        nin: usize,
        nout: usize,
        init: Init,
        bias: bool,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), &[nout, nin], init, true);
        let b = bias.then(|| store.add(&format!("{name}.b"), &[nout], Init::Zero, false));
        Linear { w, b, nin, nout }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = t.bind_param(self.w, store.value(self.w));
        let b = self.b.map(|slot| t.bind_param(slot, store.value(slot)));
        t.linear(x, w, b)
    }

    pub fn macs(&self, batch: usize) -> u64 {
        (batch * self.nin * self.nout) as u64
    }
}

/// Channel layer norm (stats over the channel axis at every voxel).
pub struct LayerNorm {
    pub gamma: usize,
    pub beta: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(&format!("{name}.g"), &[channels], Init::One, false);
        let beta = store.add(&format!("{name}.b"), &[channels], Init::Zero, false);
        LayerNorm { gamma, beta, eps: 1e-6 }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = t.bind_param(self.gamma, store.value(self.gamma));
        let b = t.bind_param(self.beta, store.value(self.beta));
        t.layer_norm_ch(x, g, b, self.eps)
    }
}

/// Global response normalization (both scales start at zero, so the layer is
/// a passthrough at init).
pub struct Grn {
    pub gamma: usize,
    pub beta: usize,
    pub eps: f64,
}

impl Grn {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.add(&format!("{name}.g"), &[channels], Init::Zero, false);
        let beta = store.add(&format!("{name}.b"), &[channels], Init::Zero, false);
        Grn { gamma, beta, eps: 1e-6 }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = t.bind_param(self.gamma, store.value(self.gamma));
        let b = t.bind_param(self.beta, store.value(self.beta));
        t.grn(x, g, b, self.eps)
    }
}

/// Embedding table for one categorical feature.
pub struct Embedding {
    pub table: usize,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(store: &mut ParamStore, name: &str, vocab: usize, dim: usize) -> Self {
        let table = store.add(&format!("{name}.emb"), &[vocab, dim], Init::TruncNormal(0.02), true);
        Embedding { table, vocab, dim }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, ids: &[usize]) -> Var {
        let tv = t.bind_param(self.table, store.value(self.table));
        t.embedding(tv, ids)
    }
}

/// AdamW with decoupled weight decay.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step_count: 0,
            m: store.params().iter().map(|p| Array::zeros(p.value.shape())).collect(),
            v: store.params().iter().map(|p| Array::zeros(p.value.shape())).collect(),
        }
    }

    /// One update with the given per-slot gradients (missing slots are
    /// simply untouched this step, matching graph-level loss gating).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(usize, Array)], lr: f64) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        for (slot, grad) in grads {
            let slot = *slot;
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            let decay = if store.params()[slot].decay { self.weight_decay } else { 0.0 };
            let value = store.value_mut(slot);
            for i in 0..grad.len() {
                let gi = grad.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let p = value.data()[i];
                value.data_mut()[i] = p - lr * (mhat / (vhat.sqrt() + self.eps) + decay * p);
            }
        }
    }

    /// Serialize optimizer state (moments and step counter) for resume.
    pub fn save<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"DSOP")?;
        w.write_all(&self.step_count.to_le_bytes())?;
        w.write_all(&(self.m.len() as u64).to_le_bytes())?;
        for arr in self.m.iter().chain(self.v.iter()) {
            w.write_all(&(arr.len() as u64).to_le_bytes())?;
            for &x in arr.data() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load<R: Read>(&mut self, mut r: R) -> Result<()> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"DSOP" {
            return Err(Error::Ingestion("bad optimizer state magic".into()));
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        self.step_count = u64::from_le_bytes(u64buf);
        r.read_exact(&mut u64buf)?;
        let count = u64::from_le_bytes(u64buf) as usize;
        if count != self.m.len() {
            return Err(Error::Ingestion(format!(
                "optimizer state has {count} slots, model has {}",
                self.m.len()
            )));
        }
        for idx in 0..2 * count {
            r.read_exact(&mut u64buf)?;
            let n = u64::from_le_bytes(u64buf) as usize;
            let target = if idx < count { &mut self.m[idx] } else { &mut self.v[idx - count] };
            if n != target.len() {
                return Err(Error::Ingestion("optimizer slot length mismatch".into()));
            }
            for i in 0..n {
                r.read_exact(&mut u64buf)?;
                target.data_mut()[i] = f64::from_le_bytes(u64buf);
            }
        }
        Ok(())
    }
}

/// Collect per-parameter gradients from a finished backward pass.
pub fn param_grads(tape: &Tape, grads: &crate::tape::Gradients) -> Vec<(usize, Array)> {
    let mut out = Vec::new();
    for &(slot, node) in tape.bound_params() {
        if let Some(g) = grads.wrt(Var(node)) {
            out.push((slot, g.clone()));
        }
    }
    out
}
