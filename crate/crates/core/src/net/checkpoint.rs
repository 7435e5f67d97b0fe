//! Binary tensor checkpoints.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "PCCK" | version = 1 | tensor count
//! per tensor: name length | UTF-8 name | rank | dims... | f64 LE data (row-major)
//! ```
//!
//! A network checkpoint stores a leading `meta` vector describing the
//! architecture, followed by the parameter tensors in canonical order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Affine, LowRankAdapter, NetworkConfig, Params, VelocityNetwork};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PCCK";
pub const VERSION: u32 = 1;

const META: &str = "meta";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[NamedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&u32_of(tensors.len())?.to_le_bytes())?;
    for t in tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} declares {} elements but holds {}",
                t.name,
                expected,
                t.data.len()
            )));
        }
        w.write_all(&u32_of(t.name.len())?.to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&u32_of(t.shape.len())?.to_le_bytes())?;
        for d in &t.shape {
            w.write_all(&u32_of(*d)?.to_le_bytes())?;
        }
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("{n} does not fit in 32 bits")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(u32::from_le_bytes(buf))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("truncated checkpoint".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank)
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf).map_err(truncated)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

fn meta_vector(net: &VelocityNetwork) -> Vec<f64> {
    let c = net.config();
    vec![
        c.input_dim as f64,
        c.hidden_width as f64,
        c.num_layers as f64,
        c.embed_dim as f64,
        c.vocab_size as f64,
        c.seq_len as f64,
        c.concept_token as f64,
        if net.is_frozen() { 1.0 } else { 0.0 },
        net.adapter_rank().unwrap_or(0) as f64,
    ]
}

pub fn network_tensors(net: &VelocityNetwork) -> Vec<NamedTensor> {
    let meta = meta_vector(net);
    let mut out = vec![NamedTensor {
        name: META.into(),
        shape: vec![meta.len()],
        data: meta,
    }];
    out.extend(net.params().tensors().into_iter().map(|t| NamedTensor {
        name: t.name,
        shape: t.shape,
        data: t.data.to_vec(),
    }));
    out
}

pub fn save_network(net: &VelocityNetwork, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_tensors(&mut buf, &network_tensors(net))?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_network(path: &Path) -> Result<VelocityNetwork> {
    let bytes = fs::read(path)?;
    network_from_tensors(read_tensors(bytes.as_slice())?)
}

pub fn network_from_tensors(tensors: Vec<NamedTensor>) -> Result<VelocityNetwork> {
    let mut iter = tensors.into_iter();
    let meta = iter
        .next()
        .filter(|t| t.name == META && t.data.len() == 9)
        .ok_or_else(|| Error::Checkpoint("missing meta tensor".into()))?;
    let as_usize = |v: f64| -> Result<usize> {
        if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
            Ok(v as usize)
        } else {
            Err(Error::Checkpoint(format!("bad meta value {v}")))
        }
    };
    let m = meta
        .data
        .iter()
        .map(|v| as_usize(*v))
        .collect::<Result<Vec<_>>>()?;
    let cfg = NetworkConfig {
        input_dim: m[0],
        hidden_width: m[1],
        num_layers: m[2],
        embed_dim: m[3],
        vocab_size: m[4],
        seq_len: m[5],
        concept_token: m[6],
    };
    let frozen = m[7] == 1;
    let adapted = m[8] > 0;
    cfg.validate()?;

    let mut next = |name: &str| -> Result<NamedTensor> {
        let t = iter
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.name != name {
            return Err(Error::Checkpoint(format!(
                "expected tensor {name}, found {}",
                t.name
            )));
        }
        Ok(t)
    };
    let matrix = |t: NamedTensor| -> Result<Array2<f64>> {
        if t.shape.len() != 2 {
            return Err(Error::Checkpoint(format!("tensor {} must be rank 2", t.name)));
        }
        Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    };
    let vector = |t: NamedTensor| -> Result<Array1<f64>> {
        if t.shape.len() != 1 {
            return Err(Error::Checkpoint(format!("tensor {} must be rank 1", t.name)));
        }
        Ok(Array1::from_vec(t.data))
    };

    let token_table = matrix(next("token_table")?)?;
    let concept_slots = matrix(next("concept_slots")?)?;
    let mut blocks = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let weight = matrix(next(&format!("blocks.{l}.weight"))?)?;
        let bias = vector(next(&format!("blocks.{l}.bias"))?)?;
        blocks.push(Affine { weight, bias });
    }
    let head = Affine {
        weight: matrix(next("head.weight")?)?,
        bias: vector(next("head.bias")?)?,
    };
    let mut adapters = Vec::new();
    if adapted {
        for l in 0..cfg.num_layers {
            let down = matrix(next(&format!("adapters.{l}.down"))?)?;
            let up = matrix(next(&format!("adapters.{l}.up"))?)?;
            adapters.push(LowRankAdapter { down, up });
        }
    }
    if iter.next().is_some() {
        return Err(Error::Checkpoint("unexpected trailing tensors".into()));
    }
    VelocityNetwork::from_params(
        cfg,
        Params {
            token_table,
            concept_slots,
            blocks,
            head,
            adapters,
        },
        frozen,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout_is_exact() {
        let tensors = vec![NamedTensor {
            name: "w".into(),
            shape: vec![1, 2],
            data: vec![1.0, -2.5],
        }];
        let mut buf = Vec::new();
        write_tensors(&mut buf, &tensors).unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"PCCK");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(b"w");
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(read_tensors(buf.as_slice()).unwrap(), tensors);
    }

    #[test]
    fn rejects_wrong_version_and_magic() {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[]).unwrap();
        buf[4] = 2;
        let err = read_tensors(buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("version 2"), "{err}");
        buf[0] = b'X';
        assert!(read_tensors(buf.as_slice()).is_err());
        assert!(read_tensors(&b"PCCK"[..]).is_err());
    }

    #[test]
    fn network_round_trip_keeps_adapter_and_freeze() {
        let net = VelocityNetwork::new(NetworkConfig::default(), 4)
            .unwrap()
            .attach_adapter(4, 2)
            .unwrap()
            .clone_frozen();
        let back = network_from_tensors(network_tensors(&net)).unwrap();
        assert_eq!(back, net);
    }
}
