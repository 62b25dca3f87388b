//! Versioned binary checkpoints.
//!
//! ```text
//! magic    8 bytes   "CVRCKPT\0"
//! version  u32 LE    1
//! cfg_len  u32 LE    followed by the network config as UTF-8 JSON
//! count    u32 LE    number of tensors
//! count x { name_len u16 LE, name bytes, ndim u8, ndim x u32 LE dims }
//! tensor data, in table order, as little-endian f32
//! ```
//!
//! Only parameter values are stored; optimizer moments restart at zero.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::network::{NetConfig, Network};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"CVRCKPT\0";
pub const VERSION: u32 = 1;

/// Named view of one parameter tensor.
pub struct TensorRef<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [F],
}

impl<F: Scalar> Network<F> {
    /// Parameter tensors in canonical order.
    pub fn tensors(&self) -> Vec<TensorRef<'_, F>> {
        let mut out = vec![
            TensorRef {
                name: "embedding".into(),
                shape: vec![self.emb.rows, self.emb.dim],
                data: &self.emb.table,
            },
            TensorRef {
                name: "shared.w".into(),
                shape: vec![self.shared.n_out, self.shared.n_in],
                data: &self.shared.w.value,
            },
            TensorRef {
                name: "shared.b".into(),
                shape: vec![self.shared.n_out],
                data: &self.shared.b.value,
            },
        ];
        for (k, h) in self.heads.iter().enumerate() {
            for (part, d) in [("hidden", &h.hidden), ("out", &h.out)] {
                out.push(TensorRef {
                    name: format!("head{k}.{part}.w"),
                    shape: vec![d.n_out, d.n_in],
                    data: &d.w.value,
                });
                out.push(TensorRef {
                    name: format!("head{k}.{part}.b"),
                    shape: vec![d.n_out],
                    data: &d.b.value,
                });
            }
        }
        if let Some(p) = &self.policy {
            out.push(TensorRef {
                name: "policy.w".into(),
                shape: vec![p.n_out, p.n_in],
                data: &p.w.value,
            });
            out.push(TensorRef {
                name: "policy.b".into(),
                shape: vec![p.n_out],
                data: &p.b.value,
            });
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = vec![
            &mut self.emb.table,
            &mut self.shared.w.value,
            &mut self.shared.b.value,
        ];
        for h in &mut self.heads {
            out.push(&mut h.hidden.w.value);
            out.push(&mut h.hidden.b.value);
            out.push(&mut h.out.w.value);
            out.push(&mut h.out.b.value);
        }
        if let Some(p) = &mut self.policy {
            out.push(&mut p.w.value);
            out.push(&mut p.b.value);
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `tensor[i]` label for every scalar parameter, in flat order.
    pub fn flat_names(&self) -> Vec<String> {
        self.tensors()
            .iter()
            .flat_map(|t| (0..t.data.len()).map(move |i| format!("{}[{i}]", t.name)))
            .collect()
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(self.config()).expect("config serializes");
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        let tensors = self.tensors();
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for t in &tensors {
            w.write_all(&(t.name.len() as u16).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&[t.shape.len() as u8])?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
        }
        for t in &tensors {
            for &v in t.data {
                w.write_all(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_checkpoint(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    /// Overwrites parameters from a checkpoint with identical tensor names
    /// and shapes.
    pub fn read_into<R: Read>(&mut self, r: R) -> Result<()> {
        let (_, header, data) = read_raw(r)?;
        let expected: Vec<(String, Vec<usize>)> = self
            .tensors()
            .into_iter()
            .map(|t| (t.name, t.shape))
            .collect();
        if header != expected {
            let diff = header
                .iter()
                .zip(&expected)
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("{} {:?} vs expected {} {:?}", a.0, a.1, b.0, b.1))
                .unwrap_or_else(|| format!("{} tensors vs expected {}", header.len(), expected.len()));
            return Err(Error::Shape(diff));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            for (dst, &src) in t.iter_mut().zip(&data[offset..]) {
                *dst = F::of(src as f64);
            }
            offset += t.len();
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self> {
        let (cfg, header, data) = read_raw(r)?;
        let mut net = Network::new(cfg);
        let expected: Vec<(String, Vec<usize>)> = net.tensors().into_iter().map(|t| (t.name, t.shape)).collect();
        if header != expected {
            return Err(Error::Shape("tensor table does not match the stored config".into()));
        }
        let mut offset = 0;
        for t in net.tensors_mut() {
            for (dst, &src) in t.iter_mut().zip(&data[offset..]) {
                *dst = F::of(src as f64);
            }
            offset += t.len();
        }
        Ok(net)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(BufReader::new(f))
    }
}

type Header = Vec<(String, Vec<usize>)>;

fn read_raw<R: Read>(mut r: R) -> Result<(NetConfig, Header, Vec<f32>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let io = |e: std::io::Error| Error::Checkpoint(e.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let cfg_len = read_u32(&mut r).map_err(io)? as usize;
    let mut cfg = vec![0u8; cfg_len];
    r.read_exact(&mut cfg).map_err(io)?;
    let cfg: NetConfig = serde_json::from_slice(&cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let count = read_u32(&mut r).map_err(io)? as usize;
    let mut header = Vec::with_capacity(count);
    let mut total = 0usize;
    for _ in 0..count {
        let mut len = [0u8; 2];
        r.read_exact(&mut len).map_err(io)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim).map_err(io)?;
        let shape = (0..ndim[0])
            .map(|_| read_u32(&mut r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        total += shape.iter().product::<usize>();
        header.push((name, shape));
    }
    let mut bytes = vec![0u8; total * 4];
    r.read_exact(&mut bytes).map_err(io)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((cfg, header, data))
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Feature;

    fn cfg(n_heads: usize) -> NetConfig {
        NetConfig {
            dim: 10,
            n_fields: 2,
            embed_dim: 3,
            hidden: 4,
            head_hidden: 4,
            n_heads,
            policy: true,
            seed: 1,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_preserves_predictions() {
        let net = Network::<f32>::new(cfg(2));
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = Network::<f32>::read_checkpoint(&buf[..]).unwrap();
        let x = [Feature::one_hot(1), Feature::one_hot(7)];
        assert_eq!(net.forward(&x), back.forward(&x));

        let mut other = Network::<f32>::new(NetConfig { seed: 99, ..cfg(2) });
        other.read_into(&buf[..]).unwrap();
        assert_eq!(other.forward(&x), net.forward(&x));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let net = Network::<f32>::new(cfg(2));
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        let mut three = Network::<f32>::new(cfg(3));
        assert!(matches!(three.read_into(&buf[..]), Err(Error::Shape(_))));
        let mut wider = Network::<f32>::new(NetConfig { hidden: 5, ..cfg(2) });
        assert!(matches!(wider.read_into(&buf[..]), Err(Error::Shape(_))));
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let net = Network::<f32>::new(cfg(1));
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Network::<f32>::read_checkpoint(&bad[..]).is_err());
        assert!(Network::<f32>::read_checkpoint(&buf[..buf.len() - 3]).is_err());
    }
}
