//! Binary tensor container.
//!
//! Layout (little-endian): magic `KDT1`, `u32` tensor count, then per tensor
//! a `u16` name length, the UTF-8 name, a `u8` rank, `rank` `u32` dims and
//! the `f64` values. Model checkpoints store the architecture as a leading
//! tensor named [`CONFIG_TENSOR`].

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{ModelConfig, TransformerModel};
use crate::{Error, Result, Tensor};

pub const MAGIC: &[u8; 4] = b"KDT1";
pub const CONFIG_TENSOR: &str = "meta.config";

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Writes named tensors in container format.
pub fn write_tensors<'a, W: Write>(
    w: &mut W,
    tensors: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[t.rank() as u8])?;
        for &d in t.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| bad(format!("truncated while reading {what}: {e}")))?;
    Ok(buf)
}

/// Reads every tensor of a container.
pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    if &read_exact::<_, 4>(r, "magic")? != MAGIC {
        return Err(bad("not a KDT1 container"));
    }
    let count = u32::from_le_bytes(read_exact(r, "tensor count")?) as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(r, "name length")?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(|e| bad(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = read_exact::<_, 1>(r, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_exact(r, "dims")?) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes).map_err(|e| bad(format!("truncated data of {name}: {e}")))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
        out.push((name, t));
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe).map_err(|e| bad(e.to_string()))? != 0 {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok(out)
}

fn config_tensor(c: &ModelConfig) -> Tensor {
    let fields = [
        c.num_layers as f64,
        c.num_heads as f64,
        c.hidden_size as f64,
        c.ff_size as f64,
        c.vocab_size as f64,
        c.max_seq_len as f64,
        c.dropout,
        c.layer_norm_eps,
    ];
    Tensor::new(vec![fields.len()], fields.to_vec()).expect("fixed shape")
}

fn config_from_tensor(t: &Tensor) -> Result<ModelConfig> {
    let v = t.data();
    if t.shape() != [8] || v[..6].iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
        return Err(bad("malformed config tensor"));
    }
    let cfg = ModelConfig {
        num_layers: v[0] as usize,
        num_heads: v[1] as usize,
        hidden_size: v[2] as usize,
        ff_size: v[3] as usize,
        vocab_size: v[4] as usize,
        max_seq_len: v[5] as usize,
        dropout: v[6],
        layer_norm_eps: v[7],
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Serializes a model (config tensor first, then parameters in canonical order).
pub fn write_model<W: Write>(model: &TransformerModel, w: &mut W) -> io::Result<()> {
    let config = config_tensor(model.config());
    let entries = std::iter::once((CONFIG_TENSOR, &config)).chain(model.named_parameters());
    let entries: Vec<_> = entries.collect();
    write_tensors(w, entries.into_iter())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<TransformerModel> {
    let mut tensors = read_tensors(r)?.into_iter();
    let (name, config) = tensors.next().ok_or_else(|| bad("empty container"))?;
    if name != CONFIG_TENSOR {
        return Err(bad(format!("first tensor is {name:?}, expected {CONFIG_TENSOR:?}")));
    }
    let config = config_from_tensor(&config)?;
    let template = TransformerModel::names_for(&config);
    let rest: Vec<(String, Tensor)> = tensors.collect();
    if rest.len() != template.len() {
        return Err(bad(format!("{} parameter tensors, expected {}", rest.len(), template.len())));
    }
    let mut params = Vec::with_capacity(rest.len());
    for ((name, t), want) in rest.into_iter().zip(&template) {
        if &name != want {
            return Err(bad(format!("found {name:?} where {want:?} was expected")));
        }
        params.push(t);
    }
    TransformerModel::from_parameters(&config, params).map_err(|e| bad(e.to_string()))
}

pub fn save(model: &TransformerModel, path: &Path) -> Result<String> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = HashingWriter::new(BufWriter::new(file));
    write_model(model, &mut w).map_err(|e| Error::io(path, e))?;
    let (inner, id) = w.finish();
    inner.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    Ok(id)
}

pub fn load(path: &Path) -> Result<TransformerModel> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_model(&mut BufReader::new(file))
}

/// SHA-256 (hex) of the serialized bytes; computed by streaming, without buffering.
pub fn checkpoint_id(model: &TransformerModel) -> String {
    let mut w = HashingWriter::new(io::sink());
    write_model(model, &mut w).expect("sink does not fail");
    w.finish().1
}

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: &Path) -> Result<String> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut w = HashingWriter::new(io::sink());
    io::copy(&mut BufReader::new(file), &mut w).map_err(|e| Error::io(path, e))?;
    Ok(w.finish().1)
}

/// Forwards writes while hashing them.
pub struct HashingWriter<W> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> HashingWriter<W> {
    pub fn new(inner: W) -> Self {
        Self { inner, hasher: Sha256::new() }
    }

    pub fn finish(self) -> (W, String) {
        let digest = self.hasher.finalize();
        (self.inner, digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TransformerModel {
        TransformerModel::init(&ModelConfig::new(2, 2, 4, 6, 9, 5).unwrap(), 3).unwrap()
    }

    #[test]
    fn roundtrip_in_memory_is_bit_exact() {
        let m = tiny();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        let back = read_model(&mut buf.as_slice()).unwrap();
        assert!(m.bit_eq(&back));
        assert_eq!(back.config(), m.config());
    }

    #[test]
    fn id_matches_file_digest() {
        let m = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.kdt");
        let id = save(&m, &path).unwrap();
        assert_eq!(id, checkpoint_id(&m));
        assert_eq!(id, file_digest(&path).unwrap());
        assert_eq!(id.len(), 64);
        let mut other = tiny();
        other.parameters_mut()[0].data_mut()[0] += 1e-12;
        assert_ne!(checkpoint_id(&other), id);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let mut buf = Vec::new();
        write_model(&tiny(), &mut buf).unwrap();
        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(read_model(&mut bad_magic.as_slice()).is_err());
        assert!(read_model(&mut &buf[..buf.len() - 3]).is_err());
        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_model(&mut trailing.as_slice()).is_err());
    }
}
