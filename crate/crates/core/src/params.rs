//! Named parameter store, tape binding, and the checkpoint archive.
//!
//! Parameters live in a sorted map of dotted names ("decoder.layer0.msg.wq")
//! to value/gradient pairs. A forward pass binds names to tape leaves through
//! [`FwdCtx`]; after backward the harvested gradients flow back here and the
//! optimizer walks the map in name order. Checkpoints are a flat binary
//! archive of (name, shape, little-endian f64 values) with a version header,
//! written in sorted order so equal parameter sets give equal bytes.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{hash_name, CounterRng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One parameter: a value and, after a training step, its gradient.
/// The gradient, when present, always has the value's shape.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), Param { value, grad: None });
    }

    /// Xavier-uniform matrix (rows = fan-in, cols = fan-out), keyed by
    /// (seed, name) so init replays exactly.
    pub fn add_matrix(&mut self, name: &str, rows: usize, cols: usize, seed: u64) {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let mut rng = CounterRng::keyed(&[seed, hash_name(name)]);
        self.insert(name, Tensor::from_fn(vec![rows, cols], |_| rng.uniform(-limit, limit)));
    }

    /// Embedding-style table with entries uniform in (-scale, scale).
    pub fn add_table(&mut self, name: &str, rows: usize, cols: usize, scale: f64, seed: u64) {
        let mut rng = CounterRng::keyed(&[seed, hash_name(name)]);
        self.insert(name, Tensor::from_fn(vec![rows, cols], |_| rng.uniform(-scale, scale)));
    }

    pub fn add_zeros(&mut self, name: &str, shape: Vec<usize>) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn add_ones(&mut self, name: &str, shape: Vec<usize>) {
        self.insert(name, Tensor::full(shape, 1.0));
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries.get(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        p.value = value;
        Ok(())
    }

    /// Stores a gradient; shapes must agree with the value.
    pub fn set_grad(&mut self, name: &str, grad: Tensor) -> Result<()> {
        let p = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{name}`")))?;
        if grad.shape() != p.value.shape() {
            return Err(Error::Shape(format!(
                "gradient for `{name}`: {:?} vs value {:?}",
                grad.shape(),
                p.value.shape()
            )));
        }
        p.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// Total scalar count across all parameters.
    pub fn coord_count(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    // ── Checkpoint archive ──────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, p) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamSet> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        let mut r = std::io::BufReader::new(file);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if magic != *MAGIC {
            return Err(Error::Checkpoint("bad magic or unsupported version".into()));
        }
        let count = read_u64(&mut r)?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            if name_len > 4096 {
                return Err(Error::Checkpoint(format!("implausible name length {name_len}")));
            }
            let mut name_buf = vec![0u8; name_len];
            read_exact(&mut r, &mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            if ndim > 8 {
                return Err(Error::Checkpoint(format!("implausible rank {ndim} for `{name}`")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u64(&mut r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 8];
            for _ in 0..n {
                read_exact(&mut r, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            set.insert(name, Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?);
        }
        Ok(set)
    }

    /// Checks that this set has exactly the given names and shapes.
    pub fn expect_layout(&self, layout: &[(String, Vec<usize>)]) -> Result<()> {
        for (name, shape) in layout {
            let p = self.entries.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing parameter `{name}`"))
            })?;
            if p.value.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, model wants {:?}",
                    p.value.shape(),
                    shape
                )));
            }
        }
        if self.entries.len() != layout.len() {
            let expected: std::collections::BTreeSet<&String> = layout.iter().map(|(n, _)| n).collect();
            let extra: Vec<&String> =
                self.entries.keys().filter(|n| !expected.contains(n)).take(3).collect();
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model wants {}; unexpected: {:?}",
                self.entries.len(),
                layout.len(),
                extra
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.entries.iter().map(|(n, p)| (n.clone(), p.value.shape().to_vec())).collect()
    }
}

const MAGIC: &[u8; 8] = b"GSRCKP\x00\x01";

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint("archive ends early (truncated file?)".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

// ── Forward context ─────────────────────────────────────────────────────

/// Everything a forward pass needs: the tape, the parameters, train/eval
/// mode, and the dropout key material. Parameters bind lazily and are
/// memoized, so shared weights become one tape leaf with accumulated
/// gradients.
pub struct FwdCtx<'a> {
    pub tape: Tape,
    params: &'a ParamSet,
    bound: RefCell<BTreeMap<String, Var>>,
    frozen_prefixes: Vec<String>,
    /// Dropout fires only in train mode.
    pub train: bool,
    pub seed: u64,
    pub step: u64,
}

impl<'a> FwdCtx<'a> {
    /// Evaluation context: dropout off, nothing marked trainable.
    pub fn eval(params: &'a ParamSet) -> Self {
        Self::on_tape(Tape::new(), params)
    }

    /// Evaluation context over an existing tape; used when the caller
    /// already holds variables (gradient checks, probes).
    pub fn on_tape(tape: Tape, params: &'a ParamSet) -> Self {
        FwdCtx {
            tape,
            params,
            bound: RefCell::new(BTreeMap::new()),
            frozen_prefixes: vec![String::new()],
            train: false,
            seed: 0,
            step: 0,
        }
    }

    /// Training context. Parameters whose name starts with any frozen prefix
    /// bind as constants: gradients neither reach them nor update them.
    pub fn train(params: &'a ParamSet, frozen_prefixes: &[&str], seed: u64, step: u64) -> Self {
        FwdCtx {
            tape: Tape::new(),
            params,
            bound: RefCell::new(BTreeMap::new()),
            frozen_prefixes: frozen_prefixes.iter().map(|s| s.to_string()).collect(),
            train: true,
            seed,
            step,
        }
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Binds a parameter to the tape, memoized by name.
    pub fn p(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(v.clone());
        }
        let value = self.params.value(name)?.clone();
        let var = if self.train && !self.is_frozen(name) {
            self.tape.trainable(value)
        } else {
            self.tape.leaf(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Dropout keyed by (seed, site, step); identity in eval mode.
    pub fn dropout(&self, v: &Var, p: f64, site: &str) -> Var {
        if !self.train || p <= 0.0 {
            return v.clone();
        }
        let mut rng = CounterRng::keyed(&[self.seed, hash_name(site), self.step]);
        v.dropout(p, &mut rng)
    }

    /// Gradients of every trainable bound parameter, in name order.
    /// Call after `tape.backward`; parameters the replay never reached
    /// return zeros (they did not influence the objective).
    pub fn grads(&self) -> Vec<(String, Tensor)> {
        let bound = self.bound.borrow();
        let mut out = Vec::new();
        for (name, var) in bound.iter() {
            if !var.is_trainable() {
                continue;
            }
            let g = self
                .tape
                .grad(var)
                .unwrap_or_else(|| Tensor::zeros(var.shape()));
            out.push((name.clone(), g));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set() -> ParamSet {
        let mut ps = ParamSet::new();
        ps.add_matrix("a.w", 3, 2, 7);
        ps.add_zeros("a.b", vec![2]);
        ps.add_ones("ln.gamma", vec![4]);
        ps.add_table("embed", 5, 2, 0.1, 7);
        ps
    }

    #[test]
    fn init_is_deterministic_per_seed_and_name() {
        let a = sample_set();
        let b = sample_set();
        for ((na, pa), (nb, pb)) in a.iter().zip(b.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.value, pb.value);
        }
        let mut c = ParamSet::new();
        c.add_matrix("a.w", 3, 2, 8);
        assert_ne!(a.value("a.w").unwrap(), c.value("a.w").unwrap());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ps = sample_set();
        ps.save(&path).unwrap();
        let loaded = ParamSet::load(&path).unwrap();
        assert_eq!(ps.len(), loaded.len());
        for (name, p) in ps.iter() {
            assert_eq!(&p.value, &loaded.get(name).unwrap().value, "{name}");
        }
        // Same content, same bytes.
        ps.save(&dir.path().join("again.ckpt")).unwrap();
        let a = std::fs::read(&path).unwrap();
        let b = std::fs::read(dir.path().join("again.ckpt")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_checkpoint_is_an_error_not_a_panic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        sample_set().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(ParamSet::load(&cut), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTCKPT0somedata").unwrap();
        assert!(matches!(ParamSet::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn expect_layout_flags_shape_drift() {
        let ps = sample_set();
        let mut layout = ps.layout();
        assert!(ps.expect_layout(&layout).is_ok());
        layout[0].1 = vec![9, 9];
        assert!(ps.expect_layout(&layout).is_err());
    }

    #[test]
    fn grad_shape_mismatch_is_rejected() {
        let mut ps = sample_set();
        assert!(ps.set_grad("a.b", Tensor::zeros(vec![3])).is_err());
        assert!(ps.set_grad("a.b", Tensor::zeros(vec![2])).is_ok());
    }

    #[test]
    fn fwd_ctx_binds_frozen_params_as_constants() {
        let ps = sample_set();
        let ctx = FwdCtx::train(&ps, &["a."], 1, 0);
        let w = ctx.p("a.w").unwrap();
        let g = ctx.p("ln.gamma").unwrap();
        assert!(!w.is_trainable());
        assert!(g.is_trainable());
        // Memoized: binding twice gives the same node.
        assert_eq!(ctx.p("a.w").unwrap().id(), w.id());
    }

    #[test]
    fn fwd_ctx_harvests_grads_for_trainables_only() {
        let ps = sample_set();
        let ctx = FwdCtx::train(&ps, &["embed"], 1, 0);
        let w = ctx.p("a.w").unwrap();
        let e = ctx.p("embed").unwrap();
        let loss = w.sum_all().add(&e.sum_all()).unwrap().sum_all();
        ctx.tape.backward(&loss).unwrap();
        let grads = ctx.grads();
        let names: Vec<&str> = grads.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, vec!["a.w"]);
        assert!(grads[0].1.data().iter().all(|&v| v == 1.0));
    }
}
