//! Flat binary parameter checkpoints.
//!
//! Layout (all integers little-endian `u64` unless noted):
//!
//! ```text
//! magic      8 bytes  "SRCKPT01"
//! kind       u8       0 = GMF, 1 = MLP, 2 = NeuMF
//! num_users, num_items, embedding_dim, n_widths, widths[n_widths]
//! values     f64 LE   every parameter group in declaration order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelDims};
use crate::config::ModelKind;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"SRCKPT01";

fn kind_code(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::Gmf => 0,
        ModelKind::Mlp => 1,
        ModelKind::NeuMf => 2,
    }
}

pub fn write_checkpoint<T: Scalar, W: Write>(model: &Model<T>, mut w: W) -> std::io::Result<()> {
    let dims = model.dims();
    w.write_all(MAGIC)?;
    w.write_all(&[kind_code(model.kind())])?;
    let header = [
        dims.num_users,
        dims.num_items,
        dims.embedding_dim,
        dims.mlp_layer_widths.len(),
    ];
    for v in header.iter().chain(&dims.mlp_layer_widths) {
        w.write_all(&(*v as u64).to_le_bytes())?;
    }
    for (_, group) in model.param_groups() {
        for &x in group {
            w.write_all(&x.as_f64().to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<Model<T>> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind).map_err(|_| bad("truncated header"))?;
    let kind = match kind[0] {
        0 => ModelKind::Gmf,
        1 => ModelKind::Mlp,
        2 => ModelKind::NeuMf,
        k => return Err(Error::Checkpoint(format!("unknown model kind {k}"))),
    };
    let read_u64 = |r: &mut R| -> Result<usize> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
        usize::try_from(u64::from_le_bytes(b)).map_err(|_| bad("dimension overflow"))
    };
    let num_users = read_u64(&mut r)?;
    let num_items = read_u64(&mut r)?;
    let embedding_dim = read_u64(&mut r)?;
    let n_widths = read_u64(&mut r)?;
    if n_widths > 64 {
        return Err(bad("implausible layer count"));
    }
    let widths = (0..n_widths).map(|_| read_u64(&mut r)).collect::<Result<Vec<_>>>()?;
    let dims = ModelDims {
        num_users,
        num_items,
        embedding_dim,
        mlp_layer_widths: widths,
    };
    let mut model = Model::<T>::zeros(kind, dims)?;
    let mut buf = [0u8; 8];
    for group in model.param_groups_mut() {
        for x in group.iter_mut() {
            r.read_exact(&mut buf).map_err(|_| bad("truncated parameter body"))?;
            *x = T::lit(f64::from_le_bytes(buf));
        }
    }
    if r.read(&mut buf).map_err(|_| bad("read error"))? != 0 {
        return Err(bad("trailing bytes after parameters"));
    }
    Ok(model)
}

pub fn save_checkpoint<T: Scalar>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(model, BufWriter::new(file)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(file))
}
