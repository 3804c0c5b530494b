//! Binary checkpoint container.
//!
//! All integers are little-endian `u64` unless noted:
//!
//! ```text
//! magic      8 bytes  "KILNCKPT"
//! version    u32
//! seed       u64
//! config     u64 length + UTF-8 JSON of NetworkConfig
//! count      u64 number of arrays
//! array ×count:
//!   name     u64 length + UTF-8 bytes
//!   ndim     u64, then ndim × u64 dims
//!   data     product(dims) × f64 (IEEE-754, little-endian)
//! ```
//!
//! Arrays are the learnable parameters followed by `<bn>/running_mean` and
//! `<bn>/running_var` for every batchnorm layer.

use std::fs;
use std::path::Path;

use super::{build_network, ArchError, Network, NetworkConfig, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KILNCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    put_u64(out, b.len() as u64);
    out.extend_from_slice(b);
}

fn put_array(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    put_bytes(out, name.as_bytes());
    put_u64(out, shape.len() as u64);
    for &d in shape {
        put_u64(out, d as u64);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(network: &Network) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u64(&mut out, network.seed());
    let config = serde_json::to_vec(network.config()).expect("config serialises");
    put_bytes(&mut out, &config);
    put_u64(
        &mut out,
        (network.params().len() + 2 * network.batchnorms().len()) as u64,
    );
    for p in network.params() {
        put_array(&mut out, &p.name, p.value.shape(), p.value.data());
    }
    for bn in network.batchnorms() {
        let c = [bn.state.channels()];
        put_array(
            &mut out,
            &format!("{}/running_mean", bn.name),
            &c,
            &bn.state.running_mean,
        );
        put_array(&mut out, &format!("{}/running_var", bn.name), &c, &bn.state.running_var);
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
            .ok_or_else(|| ArchError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| ArchError::Checkpoint("length overflows".into()))
    }

    fn string(&mut self) -> Result<&'a str> {
        let n = self.len()?;
        std::str::from_utf8(self.take(n)?).map_err(|e| ArchError::Checkpoint(e.to_string()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Network> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(ArchError::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ArchError::Checkpoint(format!("unsupported version {version}")));
    }
    let seed = r.u64()?;
    let config: NetworkConfig =
        serde_json::from_str(r.string()?).map_err(|e| ArchError::Checkpoint(format!("config: {e}")))?;
    let mut network = build_network(&config, seed)?;

    let count = r.len()?;
    let expected = network.params().len() + 2 * network.batchnorms().len();
    if count != expected {
        return Err(ArchError::Checkpoint(format!("{count} arrays, network has {expected}")));
    }
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?.to_owned();
        let ndim = r.len()?;
        let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(
            n.checked_mul(8)
                .ok_or_else(|| ArchError::Checkpoint("array too large".into()))?,
        )?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push((name, shape, data));
    }
    if r.pos != bytes.len() {
        return Err(ArchError::Checkpoint("trailing bytes".into()));
    }

    let mut it = arrays.into_iter();
    let mismatch = |name: &str, want: &str| ArchError::Checkpoint(format!("array `{name}` where `{want}` expected"));
    for p in network.params_mut() {
        let (name, shape, data) = it.next().unwrap();
        if name != p.name || shape != p.value.shape() {
            return Err(mismatch(&name, &p.name));
        }
        p.value = Tensor::new(shape, data)?;
    }
    for bn in network.batchnorms_mut() {
        for (suffix, dst) in [
            ("running_mean", &mut bn.state.running_mean),
            ("running_var", &mut bn.state.running_var),
        ] {
            let (name, shape, data) = it.next().unwrap();
            let want = format!("{}/{suffix}", bn.name);
            if name != want || shape != [dst.len()] {
                return Err(mismatch(&name, &want));
            }
            *dst = data;
        }
    }
    Ok(network)
}

pub fn save_checkpoint(network: &Network, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(network)).map_err(|source| ArchError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| ArchError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = NetworkConfig::new(1, 0, 1, 0.125).with_input_size(32);
        let mut net = build_network(&cfg, 9).unwrap();
        net.params_mut()[0].value.data_mut()[0] = -0.123456789;
        net.batchnorms_mut()[2].state.running_var[0] = 7.5;
        let back = decode(&encode(&net)).unwrap();
        assert_eq!(back.seed(), 9);
        for (a, b) in net.params().iter().zip(back.params()) {
            assert_eq!(a.value, b.value);
        }
        for (a, b) in net.batchnorms().iter().zip(back.batchnorms()) {
            assert_eq!(a.state, b.state);
        }
    }

    #[test]
    fn corruption_detected() {
        let cfg = NetworkConfig::new(1, 0, 1, 0.125).with_input_size(32);
        let bytes = encode(&build_network(&cfg, 0).unwrap());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
    }
}
