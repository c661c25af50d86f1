//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"MHDC"
//! u32    format version (1)
//! u64    client id
//! u32    backbone layer count, then one activation byte per layer
//!        (0 = relu, 1 = identity)
//! u32    tensor count, then per tensor:
//!          u32 name length, name bytes (utf-8)
//!          u32 rank, u64 per dimension
//!          f64 values, row-major
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::path::Path;

use crate::error::{MhdError, Result};
use crate::nn::{Activation, Backbone, ClientModel, Dense, Matrix};

const MAGIC: &[u8; 4] = b"MHDC";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(model: &ClientModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * model.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(model.client_id as u64).to_le_bytes());
    out.extend_from_slice(&(model.backbone.activations.len() as u32).to_le_bytes());
    for a in &model.backbone.activations {
        out.push(match a {
            Activation::Relu => 0,
            Activation::Identity => 1,
        });
    }
    let layout = model.tensor_layout();
    out.extend_from_slice(&(layout.len() as u32).to_le_bytes());
    for ((name, shape), data) in layout.iter().zip(model.tensors()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
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
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| MhdError::Format("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

struct RawTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn dense_from(w: RawTensor, b: RawTensor, prefix: &str) -> Result<Dense> {
    if w.name != format!("{prefix}.weight") || b.name != format!("{prefix}.bias") {
        return Err(MhdError::Format(format!("expected {prefix}.weight/{prefix}.bias, found {}/{}", w.name, b.name)));
    }
    if w.shape.len() != 2 || b.shape.len() != 1 || b.shape[0] != w.shape[0] {
        return Err(MhdError::Format(format!("bad shapes for {prefix}")));
    }
    Ok(Dense {
        weight: Matrix::from_vec(w.shape[0], w.shape[1], w.data).map_err(|e| MhdError::Format(e.to_string()))?,
        bias: b.data,
    })
}

pub fn decode(bytes: &[u8]) -> Result<ClientModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(MhdError::Format("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(MhdError::Format(format!("unsupported version {version}")));
    }
    let client_id = r.u64()? as usize;
    let n_layers = r.u32()? as usize;
    let activations = (0..n_layers)
        .map(|_| match r.u8()? {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Identity),
            other => Err(MhdError::Format(format!("unknown activation tag {other}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let n_tensors = r.u32()? as usize;
    if n_tensors < 2 * (n_layers + 1) || !n_tensors.is_multiple_of(2) {
        return Err(MhdError::Format(format!("{n_tensors} tensors cannot describe {n_layers} layers plus heads")));
    }
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|e| MhdError::Format(e.to_string()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push(RawTensor { name, shape, data });
    }
    if r.pos != bytes.len() {
        return Err(MhdError::Format("trailing bytes".into()));
    }

    let mut it = tensors.into_iter();
    let mut pair = |prefix: &str| -> Result<Dense> {
        let w = it.next().expect("count checked");
        let b = it.next().expect("count checked");
        dense_from(w, b, prefix)
    };
    let layers = (0..n_layers).map(|i| pair(&format!("backbone.{i}"))).collect::<Result<Vec<_>>>()?;
    let main_head = pair("head.main")?;
    let n_aux = n_tensors / 2 - n_layers - 1;
    let aux_heads = (0..n_aux).map(|k| pair(&format!("head.aux{}", k + 1))).collect::<Result<Vec<_>>>()?;
    let model = ClientModel { client_id, backbone: Backbone { layers, activations }, main_head, aux_heads };
    model.validate().map_err(|e| MhdError::Format(e.to_string()))?;
    Ok(model)
}

pub fn save(model: &ClientModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ClientModel> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), hidden in 0usize..3, aux in 0usize..4) {
            let arch = Architecture {
                input_dim: 3,
                hidden: vec![4; hidden],
                embedding_dim: 5,
                num_classes: 3,
                num_aux_heads: aux,
            };
            let mut m = ClientModel::init(&arch, 7, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            m.main_head.bias[0] = -0.0;
            m.main_head.bias[1] = f64::MIN_POSITIVE / 3.0;
            let back = decode(&encode(&m)).unwrap();
            let bits = |m: &ClientModel| -> Vec<u64> {
                m.tensors().concat().iter().map(|v| v.to_bits()).collect()
            };
            prop_assert_eq!(bits(&back), bits(&m));
            prop_assert_eq!(back.architecture(), m.architecture());
            prop_assert_eq!(back.client_id, 7);
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let arch = Architecture { input_dim: 2, hidden: vec![], embedding_dim: 2, num_classes: 2, num_aux_heads: 1 };
        let m = ClientModel::init(&arch, 0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let bytes = encode(&m);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad_version = bytes;
        bad_version[4] = 9;
        assert!(decode(&bad_version).is_err());
    }
}
