//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "TINYLMCK" | format_version u32 | V u64 | d u64 | L u64 | nonlinearity u8 | seed u64
//! tensor_count u32
//! repeated: name_len u32 | name utf-8 | rank u32 | dims u64… | values f64…
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::model::{Layer, Nonlinearity, TinyLM};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"TINYLMCK";
pub const FORMAT_VERSION: u32 = 1;

pub fn to_bytes(model: &TinyLM) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.vocab_size() as u64).to_le_bytes());
    out.extend_from_slice(&(model.width() as u64).to_le_bytes());
    out.extend_from_slice(&(model.num_layers() as u64).to_le_bytes());
    out.push(model.nonlinearity.tag());
    out.extend_from_slice(&model.seed.to_le_bytes());
    let names = model.param_names();
    let params = model.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in names.iter().zip(params) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for &x in tensor.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<TinyLM> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a TinyLM checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let v = r.u64()? as usize;
    let d = r.u64()? as usize;
    let l = r.u64()? as usize;
    let tag = r.u8()?;
    let nonlinearity = Nonlinearity::from_tag(tag)
        .ok_or_else(|| Error::Format(format!("unknown nonlinearity tag {tag}")))?;
    let seed = r.u64()?;
    let mut model = TinyLM::zeros(v, d, l, nonlinearity);
    model.seed = seed;
    let count = r.u32()? as usize;
    let names = model.param_names();
    if count != names.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, model needs {}",
            names.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for expected in &names {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
        if name != expected {
            return Err(Error::Format(format!("expected tensor {expected}, found {name}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|x| x as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name}: {e}")))?);
    }
    if r.pos != buf.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    let mut it = tensors.into_iter();
    let embed = it.next().unwrap();
    let mut layers = Vec::with_capacity(l);
    for _ in 0..l {
        let weight = it.next().unwrap();
        let bias = it.next().unwrap();
        layers.push(Layer { weight, bias });
    }
    let unembed = it.next().unwrap();
    for (got, want) in [embed.shape(), unembed.shape()]
        .into_iter()
        .zip([[v, d], [d, v]])
    {
        if got != want {
            return Err(Error::Format(format!("tensor shape {got:?}, expected {want:?}")));
        }
    }
    for layer in &layers {
        if layer.weight.shape() != [d, d] || layer.bias.shape() != [d] {
            return Err(Error::Format("layer tensor has the wrong shape".into()));
        }
    }
    model.embed = embed;
    model.layers = layers;
    model.unembed = unembed;
    Ok(model)
}

pub fn save(model: &TinyLM, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TinyLM> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}
