//! Little-endian binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` version, `u32` reserved, then `u64` fields
//! `layers, heads_per_layer, model_dim, mlp_dim, vocab_size, max_bins, seed,
//! optimizer, step, param_count`, the `f64` parameters, a `u64` moment count
//! and that many first then second Adam moments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{init_model, ModelState, OptimizerKind, ToyModelConfig};
use crate::error::{LabError, Result};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"TCASLAB\0";
const VERSION: u32 = 1;

fn put_u64<W: Write>(w: &mut W, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn ck_err(e: std::io::Error) -> LabError {
    LabError::Checkpoint(e.to_string())
}

pub fn write_checkpoint<W: Write>(state: &ModelState, mut w: W) -> Result<()> {
    let c = &state.cfg;
    (|| -> std::io::Result<()> {
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        let opt = match c.optimizer {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => 1,
        };
        for v in [
            c.layers as u64,
            c.heads_per_layer as u64,
            c.model_dim as u64,
            c.mlp_dim as u64,
            c.vocab_size as u64,
            c.max_bins as u64,
            c.seed,
            opt,
            state.step,
            state.params.len() as u64,
        ] {
            put_u64(&mut w, v)?;
        }
        put_f64s(&mut w, &state.params)?;
        put_u64(&mut w, state.adam_m.len() as u64)?;
        put_f64s(&mut w, &state.adam_m)?;
        put_f64s(&mut w, &state.adam_v)?;
        w.flush()
    })()
    .map_err(ck_err)
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|e| LabError::Checkpoint(format!("truncated: {e}")))?;
        Ok(b)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| LabError::Checkpoint(format!("{what} {v} out of range")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| Ok(f64::from_le_bytes(self.bytes()?))).collect()
    }
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<ModelState> {
    let mut r = Reader { inner: r };
    if r.bytes::<8>()? != CHECKPOINT_MAGIC {
        return Err(LabError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.bytes()?);
    if version != VERSION {
        return Err(LabError::Checkpoint(format!("unsupported version {version}")));
    }
    let _reserved = r.bytes::<4>()?;
    let cfg = ToyModelConfig {
        layers: r.usize("layers")?,
        heads_per_layer: r.usize("heads_per_layer")?,
        model_dim: r.usize("model_dim")?,
        mlp_dim: r.usize("mlp_dim")?,
        vocab_size: r.usize("vocab_size")?,
        max_bins: r.usize("max_bins")?,
        seed: r.u64()?,
        optimizer: match r.u64()? {
            0 => OptimizerKind::Sgd,
            1 => OptimizerKind::Adam,
            k => return Err(LabError::Checkpoint(format!("unknown optimizer code {k}"))),
        },
    };
    let step = r.u64()?;
    let count = r.usize("param_count")?;
    cfg.validate().map_err(|e| LabError::Checkpoint(e.to_string()))?;
    let mut state = init_model(&cfg)?;
    if count != state.params.len() {
        return Err(LabError::Checkpoint(format!(
            "param_count {count} does not match architecture ({})",
            state.params.len()
        )));
    }
    state.params = r.f64s(count)?;
    let moments = r.usize("moment count")?;
    if moments != count {
        return Err(LabError::Checkpoint(format!("moment count {moments} != {count}")));
    }
    state.adam_m = r.f64s(count)?;
    state.adam_v = r.f64s(count)?;
    state.step = step;
    let mut trailing = [0u8; 1];
    match r.inner.read(&mut trailing) {
        Ok(0) => Ok(state),
        Ok(_) => Err(LabError::Checkpoint("trailing bytes".into())),
        Err(e) => Err(ck_err(e)),
    }
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    let f = File::create(&tmp).map_err(|e| LabError::io(&tmp, e))?;
    write_checkpoint(state, BufWriter::new(f))?;
    std::fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let f = File::open(path).map_err(|e| LabError::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}
