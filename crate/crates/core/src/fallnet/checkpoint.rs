//! Binary formats: FallNet checkpoints (`SFNV1`) and single tensors (`SFT1`).
//!
//! Checkpoint: magic, tensor count (u32), then per tensor a u32 name length,
//! UTF-8 name, u32 rank, u32 dims and f64 payload; a CRC32 of everything
//! before it closes the file. The first tensor, `config`, stores the network
//! hyper-parameters. Integers and floats are little-endian.
//!
//! Tensor: magic, u32 rank, u32 dims, f32 payload, CRC32.

use std::io::{Read, Write};
use std::path::Path;

use super::net::{FallNet, FallNetConfig};
use super::tensor::Real;
use super::FallNetError;

const NET_MAGIC: &[u8; 5] = b"SFNV1";
const TENSOR_MAGIC: &[u8; 4] = b"SFT1";

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FallNetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| FallNetError::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, FallNetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Splits off and verifies the trailing CRC32.
fn verified_body<'a>(bytes: &'a [u8], magic: &[u8]) -> Result<&'a [u8], FallNetError> {
    if bytes.len() < magic.len() + 4 || &bytes[..magic.len()] != magic {
        return Err(FallNetError::Checkpoint("bad magic".into()));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    let want = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != want {
        return Err(FallNetError::Checkpoint("CRC mismatch".into()));
    }
    Ok(&body[magic.len()..])
}

fn config_tensor(cfg: &FallNetConfig) -> Vec<f64> {
    let mut v = vec![
        cfg.freq_bins as f64,
        cfg.channels as f64,
        cfg.latent as f64,
        cfg.slope,
        cfg.kl_weight,
        cfg.norm_eps,
        cfg.input_norm_eps,
        cfg.dc_bins as f64,
        cfg.widths.len() as f64,
    ];
    v.extend(cfg.widths.iter().map(|&w| w as f64));
    v
}

fn config_from(v: &[f64]) -> Result<FallNetConfig, FallNetError> {
    let bad = || FallNetError::Checkpoint("malformed config tensor".into());
    if v.len() < 9 {
        return Err(bad());
    }
    let nb = v[8] as usize;
    if v.len() != 9 + nb {
        return Err(bad());
    }
    Ok(FallNetConfig {
        freq_bins: v[0] as usize,
        channels: v[1] as usize,
        latent: v[2] as usize,
        slope: v[3],
        kl_weight: v[4],
        norm_eps: v[5],
        input_norm_eps: v[6],
        dc_bins: v[7] as usize,
        widths: v[9..].iter().map(|&w| w as usize).collect(),
    })
}

pub fn encode_checkpoint<T: Real>(net: &FallNet<T>) -> Vec<u8> {
    let mut buf = NET_MAGIC.to_vec();
    let entries = net.param_entries();
    put_u32(&mut buf, entries.len() + 1);
    let mut tensor = |name: &str, dims: &[usize], vals: &mut dyn Iterator<Item = f64>| {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, dims.len());
        dims.iter().for_each(|&d| put_u32(&mut buf, d));
        vals.for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    };
    let cfg = config_tensor(net.config());
    tensor("config", &[cfg.len()], &mut cfg.iter().copied());
    for e in entries {
        let vals = &net.params()[e.offset..e.offset + e.len];
        tensor(&e.name, &e.dims, &mut vals.iter().map(|v| v.f64()));
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<FallNet<T>, FallNetError> {
    let body = verified_body(bytes, NET_MAGIC)?;
    let mut r = Reader { buf: body, pos: 0 };
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FallNetError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| FallNetError::Checkpoint("size overflow".into()))?)?;
        let vals: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push((name, dims, vals));
    }
    if r.pos != body.len() {
        return Err(FallNetError::Checkpoint("trailing bytes".into()));
    }
    let Some((name, _, cfg_vals)) = tensors.first() else {
        return Err(FallNetError::Checkpoint("empty checkpoint".into()));
    };
    if name != "config" {
        return Err(FallNetError::Checkpoint("missing config tensor".into()));
    }
    let cfg = config_from(cfg_vals)?;
    let mut net = FallNet::<T>::new(cfg, 0)?;
    let entries = net.param_entries().to_vec();
    if entries.len() + 1 != tensors.len() {
        return Err(FallNetError::Checkpoint("tensor count mismatch".into()));
    }
    for (e, (name, dims, vals)) in entries.iter().zip(&tensors[1..]) {
        if &e.name != name || &e.dims != dims {
            return Err(FallNetError::Checkpoint(format!("unexpected tensor {name} {dims:?}")));
        }
        for (dst, v) in net.params_mut()[e.offset..e.offset + e.len].iter_mut().zip(vals) {
            *dst = T::of(*v);
        }
    }
    Ok(net)
}

pub fn save_checkpoint<T: Real>(net: &FallNet<T>, path: &Path) -> Result<(), FallNetError> {
    let bytes = encode_checkpoint(net);
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<FallNet<T>, FallNetError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

/// Dense tensor as carried by the `SFT1` format.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode_tensor(dims: &[usize], data: &[f32]) -> Vec<u8> {
    assert_eq!(dims.iter().product::<usize>(), data.len());
    let mut buf = TENSOR_MAGIC.to_vec();
    put_u32(&mut buf, dims.len());
    dims.iter().for_each(|&d| put_u32(&mut buf, d));
    data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes()));
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn decode_tensor(bytes: &[u8]) -> Result<RawTensor, FallNetError> {
    let body = verified_body(bytes, TENSOR_MAGIC)?;
    let mut r = Reader { buf: body, pos: 0 };
    let rank = r.u32()?;
    if rank == 0 || rank > 8 {
        return Err(FallNetError::Checkpoint(format!("unsupported rank {rank}")));
    }
    let dims = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    if dims.contains(&0) {
        return Err(FallNetError::Checkpoint("zero-sized dimension".into()));
    }
    let n = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(4).map(|b| (n, b)))
        .ok_or_else(|| FallNetError::Checkpoint("size overflow".into()))?;
    if body.len() - r.pos != n.1 {
        return Err(FallNetError::Checkpoint(format!(
            "payload is {} bytes, dims {dims:?} need {}",
            body.len() - r.pos,
            n.1
        )));
    }
    let data = r
        .take(n.1)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(RawTensor { dims, data })
}

/// Decodes the `SFT1` frame at the start of `bytes` and returns the rest.
pub fn split_tensor(bytes: &[u8]) -> Result<(RawTensor, &[u8]), FallNetError> {
    let bad = |m: &str| FallNetError::Checkpoint(m.to_string());
    let word = |i: usize| -> Result<usize, FallNetError> {
        let w = bytes.get(i..i + 4).ok_or_else(|| bad("truncated header"))?;
        Ok(u32::from_le_bytes(w.try_into().expect("4 bytes")) as usize)
    };
    if bytes.get(..4) != Some(&TENSOR_MAGIC[..]) {
        return Err(bad("bad magic"));
    }
    let rank = word(4)?;
    if rank == 0 || rank > 8 {
        return Err(FallNetError::Checkpoint(format!("unsupported rank {rank}")));
    }
    let count = (0..rank)
        .map(|k| word(8 + 4 * k))
        .try_fold(1usize, |a, d| d.ok().and_then(|d| a.checked_mul(d)))
        .ok_or_else(|| bad("size overflow"))?;
    let len = count
        .checked_mul(4)
        .and_then(|p| p.checked_add(8 + 4 * rank + 4))
        .ok_or_else(|| bad("size overflow"))?;
    if bytes.len() < len {
        return Err(bad("truncated payload"));
    }
    let (frame, rest) = bytes.split_at(len);
    Ok((decode_tensor(frame)?, rest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn test_checkpoint_roundtrip_exact() {
        let net = FallNet::<f64>::new(FallNetConfig::tiny(), 3).unwrap();
        let bytes = encode_checkpoint(&net);
        assert_eq!(&bytes[..5], b"SFNV1");
        let back: FallNet<f64> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.config(), net.config());
    }

    #[test]
    fn test_checkpoint_corruption_detected() {
        let net = FallNet::<f64>::new(FallNetConfig::tiny(), 3).unwrap();
        let mut bytes = encode_checkpoint(&net);
        bytes[40] ^= 0x55;
        assert!(decode_checkpoint::<f64>(&bytes).is_err());
        assert!(decode_checkpoint::<f64>(&bytes[..20]).is_err());
    }

    #[test]
    fn test_checkpoint_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.sfn");
        let net = FallNet::<f32>::new(FallNetConfig::tiny(), 9).unwrap();
        save_checkpoint(&net, &p).unwrap();
        let back: FallNet<f32> = load_checkpoint(&p).unwrap();
        assert_eq!(back.params(), net.params());
    }

    #[test]
    fn test_tensor_roundtrip_and_errors() {
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5).collect();
        let bytes = encode_tensor(&[2, 3, 4], &data);
        let t = decode_tensor(&bytes).unwrap();
        assert_eq!(t.dims, vec![2, 3, 4]);
        assert_eq!(t.data, data);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_tensor(&bad).is_err());
        // Dims that disagree with the payload, CRC recomputed.
        let mut lie = encode_tensor(&[2, 3, 4], &data);
        lie[8..12].copy_from_slice(&4u32.to_le_bytes());
        let n = lie.len() - 4;
        let crc = crc32fast::hash(&lie[..n]);
        lie[n..].copy_from_slice(&crc.to_le_bytes());
        assert!(decode_tensor(&lie).is_err());
    }

    #[test]
    fn test_split_tensor_concatenated() {
        let mut buf = encode_tensor(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        buf.extend(encode_tensor(&[1], &[7.5]));
        let (a, rest) = split_tensor(&buf).unwrap();
        assert_eq!(a.dims, vec![2, 3]);
        let (b, rest) = split_tensor(rest).unwrap();
        assert_eq!(b.data, vec![7.5]);
        assert!(rest.is_empty());
        assert!(split_tensor(&buf[..10]).is_err());
        let mut huge = b"SFT1".to_vec();
        huge.extend(2u32.to_le_bytes());
        huge.extend(u32::MAX.to_le_bytes());
        huge.extend(u32::MAX.to_le_bytes());
        assert!(split_tensor(&huge).is_err());
    }
}
