//! Neural-network plumbing on top of the autodiff tape.
//!
//! Parameters live in a `ParamStore` keyed by dotted names ("enc.blk0.attn.wq")
//! and are materialized as tape leaves through `TapeParams`, which caches one
//! leaf per name per tape so gradients accumulate correctly. Layers are free
//! functions over that naming convention. Training state (Adam moments) and
//! parameters round-trip through a little-endian binary checkpoint format.

use crate::autodiff::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;
use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

/// Epsilon used by every layer norm in the repo.
pub const LN_EPS: f64 = 1e-5;

/// Named parameter tensors, ordered by name for deterministic iteration.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.params.values().map(|t| t.len()) .sum()
    }

    /// Linear layer: weights uniform in (-1/sqrt(fan_in), +1/sqrt(fan_in)),
    /// bias zero. Creates `<name>.w` (fan_in x fan_out) and `<name>.b`.
    pub fn init_linear(&mut self, name: &str, fan_in: usize, fan_out: usize, seed: u64) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut rng = rng_from_seed(seed);
        self.insert(
            format!("{name}.w"),
            Tensor::rand_uniform(&[fan_in, fan_out], -bound, bound, &mut rng),
        );
        self.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
    }

    /// Zero-initialized linear layer (modulation projections, output heads
    /// that must start uniform).
    pub fn init_linear_zero(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.insert(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        self.insert(format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
    }

    /// Affine layer-norm parameters: gain ones, bias zeros.
    pub fn init_layer_norm(&mut self, name: &str, width: usize) {
        self.insert(format!("{name}.g"), Tensor::filled(&[1, width], 1.0));
        self.insert(format!("{name}.b"), Tensor::zeros(&[1, width]));
    }

    /// Embedding table (rows x dim), uniform in (-1/sqrt(dim), +1/sqrt(dim)).
    pub fn init_embedding(&mut self, name: &str, rows: usize, dim: usize, seed: u64) {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut rng = rng_from_seed(seed);
        self.insert(
            name.to_string(),
            Tensor::rand_uniform(&[rows, dim], -bound, bound, &mut rng),
        );
    }

    /// Q/K/V/output projections for one attention module.
    pub fn init_attention(&mut self, name: &str, d_model: usize, seed: u64) {
        self.init_linear(&format!("{name}.q"), d_model, d_model, seed ^ 0x51);
        self.init_linear(&format!("{name}.k"), d_model, d_model, seed ^ 0x52);
        self.init_linear(&format!("{name}.v"), d_model, d_model, seed ^ 0x53);
        self.init_linear(&format!("{name}.o"), d_model, d_model, seed ^ 0x54);
    }

    /// DSLN conditioning maps, zero-initialized so the module starts as a
    /// plain layer norm.
    pub fn init_dsln(&mut self, name: &str, d_cond: usize, width: usize) {
        self.init_linear_zero(&format!("{name}.gain"), d_cond, width);
        self.init_linear_zero(&format!("{name}.shift"), d_cond, width);
    }
}

/// Per-tape view of a `ParamStore`: hands out one cached leaf per parameter.
pub struct TapeParams<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    cache: RefCell<HashMap<String, Var<'t>>>,
}

impl<'t, 's> TapeParams<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        TapeParams { tape, store, cache: RefCell::new(HashMap::new()) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Leaf var for a parameter; panics on unknown names (a model bug).
    pub fn get(&self, name: &str) -> Var<'t> {
        if let Some(v) = self.cache.borrow().get(name) {
            return *v;
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        let v = self.tape.leaf(t);
        self.cache.borrow_mut().insert(name.to_string(), v);
        v
    }

    /// Collect gradients for every parameter touched on this tape.
    pub fn grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, var) in self.cache.borrow().iter() {
            if let Some(g) = grads.get(*var) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }

    /// Names of parameters this tape has touched so far.
    pub fn touched(&self) -> Vec<String> {
        let mut names: Vec<String> = self.cache.borrow().keys().cloned().collect();
        names.sort();
        names
    }
}

/// Finite-difference report for a whole parameterized model.
#[derive(Debug, Clone)]
pub struct ParamGradReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_elem: usize,
    pub n_checked: usize,
}

/// Gradient-check a scalar model loss against every parameter it touches.
///
/// `f` builds the loss from a `TapeParams` view; it is re-run with perturbed
/// stores for the central differences, so it must be deterministic.
pub fn grad_check_params<F>(store: &ParamStore, f: F, eps: f64) -> Result<ParamGradReport>
where
    F: for<'a, 'b> Fn(&TapeParams<'a, 'b>) -> Var<'a>,
{
    let eval = |s: &ParamStore| -> f64 {
        let tape = Tape::new();
        let p = TapeParams::new(&tape, s);
        f(&p).value().data()[0]
    };

    let tape = Tape::new();
    let p = TapeParams::new(&tape, store);
    let out = f(&p);
    let out_value = out.value();
    if out_value.len() != 1 {
        return Err(Error::input("grad_check_params target must be scalar"));
    }
    if !out_value.is_finite() {
        return Err(Error::non_finite("grad_check_params forward pass"));
    }
    let grads = tape.backward(out);
    let analytic = p.grads(&grads);
    let touched = p.touched();

    let mut work = store.clone();
    let mut report = ParamGradReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_elem: 0,
        n_checked: 0,
    };
    for name in &touched {
        let n = store.get(name).map(|t| t.len()).unwrap_or(0);
        for j in 0..n {
            let orig = work.get(name).unwrap().data()[j];
            work.get_mut(name).unwrap().data_mut()[j] = orig + eps;
            let fp = eval(&work);
            work.get_mut(name).unwrap().data_mut()[j] = orig - eps;
            let fm = eval(&work);
            work.get_mut(name).unwrap().data_mut()[j] = orig;
            let fd = (fp - fm) / (2.0 * eps);
            let a = analytic.get(name).map(|t| t.data()[j]).unwrap_or(0.0);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            report.n_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_elem = j;
            }
        }
    }
    Ok(report)
}

// ---- layers -----------------------------------------------------------------

pub fn linear<'t>(p: &TapeParams<'t, '_>, name: &str, x: Var<'t>) -> Var<'t> {
    x.matmul(p.get(&format!("{name}.w"))).add_row(p.get(&format!("{name}.b")))
}

/// Layer norm with learned gain and bias; constant input rows land exactly on
/// the bias.
pub fn layer_norm<'t>(p: &TapeParams<'t, '_>, name: &str, x: Var<'t>) -> Var<'t> {
    x.layer_norm(LN_EPS)
        .mul_row(p.get(&format!("{name}.g")))
        .add_row(p.get(&format!("{name}.b")))
}

/// Speaker-conditioned layer norm: layer_norm(x) * (1 + gain(e)) + shift(e).
/// With zero-initialized maps this is exactly the plain layer norm.
pub fn dsln<'t>(p: &TapeParams<'t, '_>, name: &str, x: Var<'t>, cond: Var<'t>) -> Var<'t> {
    let width = x.shape().last().copied().unwrap_or(0);
    let ones = p.tape.constant(Tensor::filled(&[1, width], 1.0));
    let gain = linear(p, &format!("{name}.gain"), cond).add(ones);
    let shift = linear(p, &format!("{name}.shift"), cond);
    x.layer_norm(LN_EPS).mul_row(gain).add_row(shift)
}

/// Scaled dot-product attention: softmax(q k^T * scale) v.
///
/// Rejects an empty key set; with a single key/value row the output is that
/// value row exactly (softmax over one logit).
pub fn attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, scale: f64) -> Result<Var<'t>> {
    let (kq, kk, kv) = (q.shape(), k.shape(), v.shape());
    if k.value().rows() == 0 {
        return Err(Error::input("attention over an empty key set"));
    }
    if kq.last() != kk.last() {
        return Err(Error::input(format!(
            "attention query/key width mismatch: {kq:?} vs {kk:?}"
        )));
    }
    if k.value().rows() != v.value().rows() {
        return Err(Error::input(format!(
            "attention key/value row mismatch: {kk:?} vs {kv:?}"
        )));
    }
    Ok(q.matmul(k.t()).scale(scale).softmax().matmul(v))
}

/// Additive mask for causal self-attention: 0 on and below the diagonal,
/// -inf strictly above. -inf logits carry exactly zero softmax weight, which
/// is what makes the causality perturbation tests exact.
pub fn causal_mask(n: usize) -> Tensor {
    let mut m = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in (i + 1)..n {
            m.set(i, j, f64::NEG_INFINITY);
        }
    }
    m
}

/// Multi-head attention with parameters under `name` (q/k/v/o projections).
/// `mask` is added to the pre-softmax scores of every head.
pub fn multi_head_attention<'t>(
    p: &TapeParams<'t, '_>,
    name: &str,
    x_q: Var<'t>,
    x_kv: Var<'t>,
    heads: usize,
    mask: Option<Var<'t>>,
) -> Var<'t> {
    let d_model = x_q.shape().last().copied().unwrap();
    assert!(d_model % heads == 0, "width {d_model} not divisible by {heads} heads");
    let d_head = d_model / heads;
    let scale = 1.0 / (d_head as f64).sqrt();

    let q = linear(p, &format!("{name}.q"), x_q);
    let k = linear(p, &format!("{name}.k"), x_kv);
    let v = linear(p, &format!("{name}.v"), x_kv);

    let mut merged: Option<Var<'t>> = None;
    for h in 0..heads {
        let qh = q.slice_cols(h * d_head, d_head);
        let kh = k.slice_cols(h * d_head, d_head);
        let vh = v.slice_cols(h * d_head, d_head);
        let mut scores = qh.matmul(kh.t()).scale(scale);
        if let Some(m) = mask {
            scores = scores.add(m);
        }
        let out = scores.softmax().matmul(vh);
        merged = Some(match merged {
            None => out,
            Some(acc) => acc.concat_cols(out),
        });
    }
    linear(p, &format!("{name}.o"), merged.unwrap())
}

/// Mean cross entropy of logit rows against integer targets; validates range.
pub fn cross_entropy<'t>(logits: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    let v = logits.value();
    if targets.len() != v.rows() {
        return Err(Error::input(format!(
            "{} targets for {} logit rows",
            targets.len(),
            v.rows()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= v.cols()) {
        return Err(Error::input(format!(
            "cross_entropy target {bad} out of range for {} classes",
            v.cols()
        )));
    }
    Ok(logits.ce_rows(targets).mean_all())
}

/// Sinusoidal features for a scalar position/time, as a 1 x dim row.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Tensor {
    assert!(dim % 2 == 0, "sinusoidal embedding wants an even dim");
    let half = dim / 2;
    let mut out = Tensor::zeros(&[1, dim]);
    for i in 0..half {
        let freq = 10000f64.powf(-(i as f64) / half as f64);
        out.set(0, 2 * i, (t * freq).sin());
        out.set(0, 2 * i + 1, (t * freq).cos());
    }
    out
}

/// Fixed sinusoidal position table, len x dim.
pub fn positional_encoding(len: usize, dim: usize) -> Tensor {
    let mut out = Tensor::zeros(&[len, dim]);
    for pos in 0..len {
        let row = sinusoidal_embedding(pos as f64, dim);
        for c in 0..dim {
            out.set(pos, c, row.at(0, c));
        }
    }
    out
}

// ---- optimizer --------------------------------------------------------------

/// Adam with bias correction. Parameters whose name fails `trainable` keep
/// their values (the freeze mechanism for partially trained stages).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        trainable: impl Fn(&str) -> bool,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            if !trainable(name) {
                continue;
            }
            let p = match store.get_mut(name) {
                Some(p) => p,
                None => continue,
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                p.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ---- checkpoints ------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"DYN1";
const CKPT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub seed: u64,
    pub config_hash: [u8; 32],
    pub step: u64,
}

fn write_tensor(w: &mut impl Write, name: &str, t: &Tensor) -> std::io::Result<()> {
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u8).to_le_bytes())?;
    for d in t.shape() {
        w.write_all(&(*d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::input("checkpoint truncated".to_string()))?;
    Ok(buf)
}

fn read_tensor(r: &mut impl Read) -> Result<(String, Tensor)> {
    let name_len = u16::from_le_bytes(read_exact::<2>(r)?) as usize;
    let mut name_buf = vec![0u8; name_len];
    r.read_exact(&mut name_buf)
        .map_err(|_| Error::input("checkpoint truncated".to_string()))?;
    let name = String::from_utf8(name_buf)
        .map_err(|_| Error::input("checkpoint name not utf-8".to_string()))?;
    let ndim = read_exact::<1>(r)?[0] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u32::from_le_bytes(read_exact::<4>(r)?) as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f64::from_le_bytes(read_exact::<8>(r)?));
    }
    Ok((name, Tensor::new(shape, data)?))
}

/// Write parameters (and optionally optimizer state) with a validated header.
pub fn save_checkpoint(
    path: &Path,
    header: &CheckpointHeader,
    store: &ParamStore,
    opt: Option<&Adam>,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.write_all(CKPT_MAGIC)?;
    buf.write_all(&CKPT_VERSION.to_le_bytes())?;
    buf.write_all(&header.seed.to_le_bytes())?;
    buf.write_all(&header.config_hash)?;
    buf.write_all(&header.step.to_le_bytes())?;
    buf.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, t) in store.iter() {
        write_tensor(&mut buf, name, t)?;
    }
    match opt {
        None => buf.write_all(&[0u8])?,
        Some(adam) => {
            buf.write_all(&[1u8])?;
            for v in [adam.lr, adam.beta1, adam.beta2, adam.eps] {
                buf.write_all(&v.to_le_bytes())?;
            }
            buf.write_all(&adam.t.to_le_bytes())?;
            buf.write_all(&(adam.m.len() as u32).to_le_bytes())?;
            for (name, t) in &adam.m {
                write_tensor(&mut buf, name, t)?;
            }
            for (name, t) in &adam.v {
                write_tensor(&mut buf, name, t)?;
            }
        }
    }
    // Write-then-rename so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, ParamStore, Option<Adam>)> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let magic = read_exact::<4>(&mut r)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::input(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u16::from_le_bytes(read_exact::<2>(&mut r)?);
    if version != CKPT_VERSION {
        return Err(Error::input(format!(
            "checkpoint format version {version} unsupported (this build reads {CKPT_VERSION})"
        )));
    }
    let seed = u64::from_le_bytes(read_exact::<8>(&mut r)?);
    let config_hash = read_exact::<32>(&mut r)?;
    let step = u64::from_le_bytes(read_exact::<8>(&mut r)?);
    let n = u32::from_le_bytes(read_exact::<4>(&mut r)?) as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let (name, t) = read_tensor(&mut r)?;
        store.insert(name, t);
    }
    let has_opt = read_exact::<1>(&mut r)?[0];
    let opt = if has_opt == 1 {
        let lr = f64::from_le_bytes(read_exact::<8>(&mut r)?);
        let beta1 = f64::from_le_bytes(read_exact::<8>(&mut r)?);
        let beta2 = f64::from_le_bytes(read_exact::<8>(&mut r)?);
        let eps = f64::from_le_bytes(read_exact::<8>(&mut r)?);
        let t = u64::from_le_bytes(read_exact::<8>(&mut r)?);
        let n_state = u32::from_le_bytes(read_exact::<4>(&mut r)?) as usize;
        let mut adam = Adam::new(lr);
        adam.beta1 = beta1;
        adam.beta2 = beta2;
        adam.eps = eps;
        adam.t = t;
        for _ in 0..n_state {
            let (name, tens) = read_tensor(&mut r)?;
            adam.m.insert(name, tens);
        }
        for _ in 0..n_state {
            let (name, tens) = read_tensor(&mut r)?;
            adam.v.insert(name, tens);
        }
        Some(adam)
    } else {
        None
    };
    Ok((CheckpointHeader { seed, config_hash, step }, store, opt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{GRAD_CHECK_EPS, GRAD_CHECK_TOL};
    use crate::rng::rng_from_seed;

    #[test]
    fn linear_hand_computed() {
        // x = [2, 3], W = [[1, -1], [0.5, 2]], b = [10, 20]
        // y = [2*1 + 3*0.5 + 10, 2*-1 + 3*2 + 20] = [13.5, 24]
        let mut store = ParamStore::new();
        store.insert("l.w", Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap());
        store.insert("l.b", Tensor::new(vec![1, 2], vec![10.0, 20.0]).unwrap());
        let tape = Tape::new();
        let p = TapeParams::new(&tape, &store);
        let x = tape.constant(Tensor::new(vec![1, 2], vec![2.0, 3.0]).unwrap());
        let y = linear(&p, "l", x).value();
        assert_eq!(y.data(), &[13.5, 24.0]);
    }

    #[test]
    fn layer_norm_constant_input_returns_bias() {
        let mut store = ParamStore::new();
        store.init_layer_norm("ln", 4);
        store.get_mut("ln.b").unwrap().data_mut().copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let tape = Tape::new();
        let p = TapeParams::new(&tape, &store);
        let x = tape.constant(Tensor::filled(&[2, 4], 7.0));
        let y = layer_norm(&p, "ln", x).value();
        assert_eq!(y.row(0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(y.row(1), &[1.0, 2.0, 3.0, 4.0]);
        assert!(y.is_finite());
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let tape = Tape::new();
        let mut rng = rng_from_seed(3);
        let q = tape.constant(Tensor::rand_normal(&[4, 6], &mut rng));
        let k = tape.constant(Tensor::rand_normal(&[1, 6], &mut rng));
        let v = tape.constant(Tensor::rand_normal(&[1, 6], &mut rng));
        let out = attention(q, k, v, 0.5).unwrap().value();
        for r in 0..4 {
            for c in 0..6 {
                assert_eq!(out.at(r, c), v.value().at(0, c));
            }
        }
    }

    #[test]
    fn attention_empty_keys_is_input_error() {
        let tape = Tape::new();
        let q = tape.constant(Tensor::zeros(&[2, 4]));
        let k = tape.constant(Tensor::zeros(&[0, 4]));
        let v = tape.constant(Tensor::zeros(&[0, 4]));
        let err = attention(q, k, v, 1.0).unwrap_err();
        assert!(err.to_string().contains("input error"));
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, 4]));
        let err = cross_entropy(logits, &[4]).unwrap_err();
        assert!(err.to_string().contains("out of range"));
    }

    #[test]
    fn dsln_zero_init_equals_plain_layer_norm() {
        let mut store = ParamStore::new();
        store.init_dsln("d", 3, 5);
        let tape = Tape::new();
        let p = TapeParams::new(&tape, &store);
        let mut rng = rng_from_seed(4);
        let x = tape.constant(Tensor::rand_normal(&[6, 5], &mut rng));
        let e = tape.constant(Tensor::rand_normal(&[1, 3], &mut rng));
        let y = dsln(&p, "d", x, e).value();
        let plain = x.layer_norm(LN_EPS).value();
        assert_eq!(y, plain);
    }

    #[test]
    fn dsln_departs_from_plain_ln_once_maps_are_nonzero() {
        let mut store = ParamStore::new();
        store.init_dsln("d", 3, 5);
        store.get_mut("d.gain.w").unwrap().data_mut()[0] = 0.3;
        store.get_mut("d.shift.w").unwrap().data_mut()[7] = -0.2;
        let tape = Tape::new();
        let p = TapeParams::new(&tape, &store);
        let mut rng = rng_from_seed(5);
        let x = tape.constant(Tensor::rand_normal(&[4, 5], &mut rng));
        let e1 = tape.constant(Tensor::rand_normal(&[1, 3], &mut rng));
        let e2 = tape.constant(Tensor::rand_normal(&[1, 3], &mut rng));
        let y1 = dsln(&p, "d", x, e1).value();
        let y2 = dsln(&p, "d", x, e2).value();
        let diff: f64 = y1.sub(&y2).unwrap().max_abs();
        assert!(diff > 1e-6, "same input, different speakers must differ, got {diff}");
    }

    #[test]
    fn grads_mha_block() {
        // Gradient-check a full attention block through the naming scheme.
        let mut store = ParamStore::new();
        store.init_attention("attn", 8, 99);
        store.init_layer_norm("ln", 8);
        let mut rng = rng_from_seed(6);
        let x = Tensor::rand_normal(&[5, 8], &mut rng);

        let rep = grad_check_params(
            &store,
            |p| {
                let xin = p.tape().constant(x.clone());
                let h = layer_norm(p, "ln", xin);
                multi_head_attention(p, "attn", h, h, 2, None).sq_norm_per_row()
            },
            GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(rep.max_rel_err < GRAD_CHECK_TOL, "{}", rep.max_rel_err);
    }

    #[test]
    fn grads_dsln_conditioning() {
        let mut store = ParamStore::new();
        store.init_dsln("d", 4, 6);
        // Perturb off the zero init so gradients flow through both maps.
        store.get_mut("d.gain.w").unwrap().data_mut()[3] = 0.2;
        store.get_mut("d.shift.w").unwrap().data_mut()[9] = -0.4;
        let mut rng = rng_from_seed(7);
        let x = Tensor::rand_normal(&[5, 6], &mut rng);
        let e = Tensor::rand_normal(&[1, 4], &mut rng);
        let rep = grad_check_params(
            &store,
            |p| {
                let xin = p.tape().constant(x.clone());
                let cond = p.tape().constant(e.clone());
                dsln(p, "d", xin, cond).sq_norm_per_row()
            },
            GRAD_CHECK_EPS,
        )
        .unwrap();
        assert!(rep.max_rel_err < GRAD_CHECK_TOL, "{}", rep.max_rel_err);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        // With bias correction, step 1 moves each weight by ~lr * sign(g).
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new(vec![1, 3], vec![0.5, -2.0, 1e-12]).unwrap());
        let mut adam = Adam::new(1e-3);
        adam.step(&mut store, &grads, |_| true);
        let w = store.get("w").unwrap();
        assert!((w.data()[0] - (1.0 - 1e-3)).abs() < 1e-6);
        assert!((w.data()[1] - (2.0 + 1e-3)).abs() < 1e-6);
        // Tiny gradient: update shrinks toward zero rather than lr-sized.
        assert!((w.data()[2] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn adam_respects_freeze_filter() {
        let mut store = ParamStore::new();
        store.insert("frozen.w", Tensor::scalar(1.0));
        store.insert("live.w", Tensor::scalar(1.0));
        let mut grads = BTreeMap::new();
        grads.insert("frozen.w".to_string(), Tensor::scalar(5.0));
        grads.insert("live.w".to_string(), Tensor::scalar(5.0));
        let mut adam = Adam::new(1e-2);
        adam.step(&mut store, &grads, |n| n.starts_with("live"));
        assert_eq!(store.get("frozen.w").unwrap().data()[0], 1.0);
        assert_ne!(store.get("live.w").unwrap().data()[0], 1.0);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::new();
        store.init_linear("a", 7, 3, 11);
        store.init_embedding("emb", 5, 4, 12);
        let mut adam = Adam::new(2e-3);
        let mut grads = BTreeMap::new();
        grads.insert("a.w".to_string(), Tensor::filled(&[7, 3], 0.25));
        adam.step(&mut store, &grads, |_| true);

        let header = CheckpointHeader { seed: 99, config_hash: [7u8; 32], step: 41 };
        save_checkpoint(&path, &header, &store, Some(&adam)).unwrap();
        let (h2, s2, opt2) = load_checkpoint(&path).unwrap();
        assert_eq!(header, h2);
        for (name, t) in store.iter() {
            let r = s2.get(name).unwrap();
            assert_eq!(t.data(), r.data(), "tensor {name} changed across roundtrip");
        }
        let opt2 = opt2.unwrap();
        assert_eq!(opt2.t, adam.t);
        assert_eq!(opt2.lr, adam.lr);
        assert_eq!(opt2.m.get("a.w").unwrap().data(), adam.m.get("a.w").unwrap().data());
    }

    #[test]
    fn checkpoint_rejects_garbage_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint(&bad).is_err());

        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::new();
        store.init_linear("a", 4, 4, 1);
        let header = CheckpointHeader { seed: 1, config_hash: [0u8; 32], step: 0 };
        save_checkpoint(&path, &header, &store, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_checkpoint(&cut).unwrap_err();
        assert!(err.to_string().contains("truncated"), "got {err}");
    }
}
