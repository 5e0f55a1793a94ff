//! Binary checkpoint format. Everything is little-endian:
//!
//! ```text
//! magic        4 bytes  "CGMC"
//! version      u32      1
//! input_dim    u32
//! hidden       u32
//! depth        u32
//! embed_dim    u32
//! clusters     u32
//! tau          f64
//! bn_momentum  f64
//! bn_eps       f64
//! rng_seed     32 bytes
//! rng_stream   u64
//! rng_word_pos u128
//! tensor_count u32
//! per tensor:  u32 rows, u32 cols, rows*cols f64 (row-major)
//! ```
//!
//! Tensor order: `pre.weight`, `pre.bias`, `bn.gamma`, `bn.beta`,
//! `bn.running_mean`, `bn.running_var`, then for the feature head and the
//! cluster head each hidden layer's weight and bias followed by the output
//! layer's weight and bias. Biases and batchnorm vectors are stored as
//! `1×width`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::network::{Architecture, BatchNorm, Linear, Mlp, ModelParams};
use crate::tensor::Mat;

pub const MAGIC: &[u8; 4] = b"CGMC";
pub const VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::param(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_tensor(w: &mut impl Write, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    put_u32(w, rows)?;
    put_u32(w, cols)?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn put_linear(w: &mut impl Write, l: &Linear) -> Result<()> {
    put_tensor(w, l.weight.rows(), l.weight.cols(), l.weight.data())?;
    put_tensor(w, 1, l.bias.len(), &l.bias)
}

pub fn write_checkpoint(model: &ModelParams, mut w: impl Write) -> Result<()> {
    let a = &model.arch;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for v in [a.input_dim, a.hidden, a.depth, a.embed_dim, a.clusters] {
        put_u32(&mut w, v)?;
    }
    for v in [a.tau, model.bn.momentum, model.bn.eps] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&model.rng.get_seed())?;
    w.write_all(&model.rng.get_stream().to_le_bytes())?;
    w.write_all(&model.rng.get_word_pos().to_le_bytes())?;

    let heads = [&model.feature_head, &model.cluster_head];
    let count = 6 + heads.iter().map(|h| 2 * (h.hidden.len() + 1)).sum::<usize>();
    put_u32(&mut w, count)?;
    put_linear(&mut w, &model.pre)?;
    let width = model.bn.width();
    for v in [&model.bn.gamma, &model.bn.beta, &model.bn.running_mean, &model.bn.running_var] {
        put_tensor(&mut w, 1, width, v)?;
    }
    for head in heads {
        for layer in head.hidden.iter().chain(std::iter::once(&head.out)) {
            put_linear(&mut w, layer)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_checkpoint(model: &ModelParams, path: &Path) -> Result<()> {
    write_checkpoint(model, BufWriter::new(File::create(path)?))
}

/// Reader that tracks its byte offset for error messages.
struct Cursor<'a, R> {
    inner: R,
    offset: u64,
    path: &'a Path,
}

impl<R: Read> Cursor<'_, R> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            location: format!("byte {}", self.offset),
            message: message.into(),
        }
    }

    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.fail(format!("truncated while reading {what}")))?;
        self.offset += N as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(what)?) as usize)
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes(what)?))
    }

    fn tensor(&mut self, rows: usize, cols: usize, what: &str) -> Result<Vec<f64>> {
        let (r, c) = (self.u32(what)?, self.u32(what)?);
        if (r, c) != (rows, cols) {
            return Err(self.fail(format!("{what} is {r}x{c}, header implies {rows}x{cols}")));
        }
        (0..rows * cols).map(|_| self.f64(what)).collect()
    }

    fn linear(&mut self, in_dim: usize, out_dim: usize, what: &str) -> Result<Linear> {
        let weight = Mat::new(out_dim, in_dim, self.tensor(out_dim, in_dim, what)?)?;
        let bias = self.tensor(1, out_dim, what)?;
        Ok(Linear { weight, bias })
    }

    fn mlp(&mut self, hidden: usize, depth: usize, out_dim: usize, what: &str) -> Result<Mlp> {
        let mut layers = Vec::with_capacity(depth);
        for i in 0..depth {
            layers.push(self.linear(hidden, hidden, &format!("{what}.hidden{i}"))?);
        }
        let out = self.linear(hidden, out_dim, &format!("{what}.out"))?;
        Ok(Mlp { hidden: layers, out })
    }
}

/// Reads a checkpoint; `path` only labels errors.
pub fn read_checkpoint(r: impl Read, path: &Path) -> Result<ModelParams> {
    let mut c = Cursor { inner: r, offset: 0, path };
    let magic: [u8; 4] = c.bytes("magic")?;
    if &magic != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            location: "byte 0".into(),
            message: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = c.u32("version")?;
    if version != VERSION as usize {
        return Err(c.fail(format!("unsupported checkpoint version {version}")));
    }
    let arch = Architecture {
        input_dim: c.u32("input_dim")?,
        hidden: c.u32("hidden")?,
        depth: c.u32("depth")?,
        embed_dim: c.u32("embed_dim")?,
        clusters: c.u32("clusters")?,
        tau: c.f64("tau")?,
    };
    arch.validate().map_err(|e| c.fail(e.to_string()))?;
    let momentum = c.f64("bn_momentum")?;
    let eps = c.f64("bn_eps")?;
    let seed: [u8; 32] = c.bytes("rng_seed")?;
    let stream = u64::from_le_bytes(c.bytes("rng_stream")?);
    let word_pos = u128::from_le_bytes(c.bytes("rng_word_pos")?);
    let count = c.u32("tensor_count")?;
    let expected = 6 + 4 * (arch.depth + 1);
    if count != expected {
        return Err(c.fail(format!("{count} tensors, header implies {expected}")));
    }

    let pre = c.linear(arch.input_dim, arch.hidden, "pre")?;
    let h = arch.hidden;
    let bn = BatchNorm {
        gamma: c.tensor(1, h, "bn.gamma")?,
        beta: c.tensor(1, h, "bn.beta")?,
        running_mean: c.tensor(1, h, "bn.running_mean")?,
        running_var: c.tensor(1, h, "bn.running_var")?,
        momentum,
        eps,
    };
    let feature_head = c.mlp(h, arch.depth, arch.embed_dim, "feature")?;
    let cluster_head = c.mlp(h, arch.depth, arch.clusters, "cluster")?;
    let mut trailing = [0u8; 1];
    if c.inner.read(&mut trailing)? != 0 {
        return Err(c.fail("trailing bytes after last tensor"));
    }

    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    Ok(ModelParams::from_parts(arch, pre, bn, feature_head, cluster_head, rng))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    read_checkpoint(BufReader::new(File::open(path)?), path)
}
