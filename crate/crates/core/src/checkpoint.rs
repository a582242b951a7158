//! Binary checkpoints.
//!
//! All integers are little-endian. The layout is:
//!
//! 1. the magic `R2N2CKPT`, then a `u32` version and the `u64` config
//!    digest;
//! 2. a parameter block;
//! 3. a second block in the same layout holding the Adam moments
//!    (`m/<name>`, `v/<name>`) and a rank-0 `adam/step`.
//!
//! A block is a `u32` entry count followed by the entries. Each entry is a
//! `u16` name length and the name, then a `u8` rank and `u32` dims, then the
//! data as `f32` values.
//!
//! The canonical config text lives next to the checkpoint in `<path>.cfg`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::hash::{fnv1a64, stream};
use crate::network::Network;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::training::AdamState;

pub const MAGIC: &[u8; 8] = b"R2N2CKPT";
pub const VERSION: u32 = 1;
/// Steps beyond this are not exactly representable as `f32`.
const MAX_STEP: u64 = 1 << 24;

pub struct Checkpoint {
    pub config: RunConfig,
    pub net: Network,
    pub store: ParamStore,
    pub adam: AdamState,
}

pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

fn put_entry(out: &mut Vec<u8>, name: &str, t: &Tensor) -> Result<()> {
    let n =
        u16::try_from(name.len()).map_err(|_| Error::invalid("checkpoint", format!("name `{name}` is too long")))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let rank = u8::try_from(t.shape().len()).map_err(|_| Error::invalid("checkpoint", "rank exceeds 255"))?;
    out.push(rank);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::invalid("checkpoint", "dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(())
}

fn put_block(out: &mut Vec<u8>, entries: &[(String, &Tensor)]) -> Result<()> {
    let n = u32::try_from(entries.len()).map_err(|_| Error::invalid("checkpoint", "too many entries"))?;
    out.extend_from_slice(&n.to_le_bytes());
    for (name, t) in entries {
        put_entry(out, name, t)?;
    }
    Ok(())
}

/// Serialize parameters and optimizer state under a config digest.
pub fn encode(digest: u64, store: &ParamStore, adam: &AdamState) -> Result<Vec<u8>> {
    if adam.m.len() != store.len() || adam.v.len() != store.len() {
        return Err(Error::invalid(
            "checkpoint",
            "optimizer state does not match the parameters",
        ));
    }
    if adam.step > MAX_STEP {
        return Err(Error::invalid(
            "checkpoint",
            format!("step {} exceeds {MAX_STEP}", adam.step),
        ));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&digest.to_le_bytes());
    let params: Vec<(String, &Tensor)> = store.iter().map(|(_, p)| (p.name.clone(), &*p.value)).collect();
    put_block(&mut out, &params)?;
    let step = Tensor::scalar(adam.step as f64);
    let mut state: Vec<(String, &Tensor)> = Vec::with_capacity(2 * params.len() + 1);
    for ((name, _), m) in params.iter().zip(&adam.m) {
        state.push((format!("m/{name}"), m));
    }
    for ((name, _), v) in params.iter().zip(&adam.v) {
        state.push((format!("v/{name}"), v));
    }
    state.push(("adam/step".into(), &step));
    put_block(&mut out, &state)?;
    Ok(out)
}

struct Reader<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.b.len())
            .ok_or("truncated checkpoint")?;
        let s = &self.b[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn entry(&mut self) -> std::result::Result<(String, Tensor), String> {
        let n = self.u16()? as usize;
        let name = std::str::from_utf8(self.take(n)?)
            .map_err(|_| "entry name is not UTF-8")?
            .to_string();
        let rank = self.u8()? as usize;
        let shape = (0..rank)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&l| l <= self.b.len() / 4)
            .ok_or_else(|| format!("entry `{name}` has an impossible shape {shape:?}"))?;
        let raw = self.take(4 * len)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        Ok((name, t))
    }

    fn block(&mut self) -> std::result::Result<Vec<(String, Tensor)>, String> {
        let n = self.u32()? as usize;
        (0..n).map(|_| self.entry()).collect()
    }
}

/// Raw contents: digest, parameter entries and optimizer entries.
pub type Decoded = (u64, Vec<(String, Tensor)>, Vec<(String, Tensor)>);

pub fn decode(bytes: &[u8]) -> std::result::Result<Decoded, String> {
    let mut r = Reader { b: bytes, at: 0 };
    if r.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let digest = r.u64()?;
    let params = r.block()?;
    let state = r.block()?;
    if r.at != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.at));
    }
    Ok((digest, params, state))
}

pub fn save(path: &Path, config: &RunConfig, store: &ParamStore, adam: &AdamState) -> Result<()> {
    let bytes = encode(config.digest(), store, adam)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let cfg_path = sidecar(path);
    fs::write(&cfg_path, config.canonical()).map_err(|e| Error::io(&cfg_path, e))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a checkpoint and its config, rebuilding the network around the
/// stored parameters.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (digest, params, state) = decode(&bytes).map_err(|m| Error::format(path, m))?;
    let cfg_path = sidecar(path);
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    if fnv1a64(text.as_bytes()) != digest {
        return Err(Error::format(&cfg_path, "config digest does not match the checkpoint"));
    }
    let config = RunConfig::parse(&text)?;
    let mut store = ParamStore::new();
    let net = Network::new(&config.network, &mut store, &mut stream(config.seed, "init"))?;
    let bad = |m: String| Error::format(path, m);
    if params.len() != store.len() {
        return Err(bad(format!(
            "{} parameters stored, the network has {}",
            params.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (&id, (name, t)) in ids.iter().zip(params) {
        if store.name(id) != name {
            return Err(bad(format!(
                "parameter `{name}` found where `{}` was expected",
                store.name(id)
            )));
        }
        store.set(id, t).map_err(|e| bad(e.to_string()))?;
    }
    let mut adam = AdamState::new(&store);
    let mut entries = state.into_iter();
    for (k, dst) in [("m", &mut adam.m), ("v", &mut adam.v)] {
        for (n, &id) in ids.iter().enumerate() {
            let want = format!("{k}/{}", store.name(id));
            match entries.next() {
                Some((name, t)) if name == want && t.shape() == store.get(id).shape() => dst[n] = t,
                _ => return Err(bad(format!("optimizer entry `{want}` is missing or malformed"))),
            }
        }
    }
    match (entries.next(), entries.next()) {
        (Some((name, t)), None) if name == "adam/step" && t.len() == 1 && t.data()[0] >= 0.0 => {
            adam.step = t.data()[0] as u64;
        }
        _ => return Err(bad("optimizer step entry is missing or malformed".into())),
    }
    Ok(Checkpoint {
        config,
        net,
        store,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_rejects_damage() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new([2], vec![0.5, -1.0]).unwrap());
        let adam = AdamState::new(&s);
        let bytes = encode(7, &s, &adam).unwrap();
        let (digest, params, state) = decode(&bytes).unwrap();
        assert_eq!(digest, 7);
        assert_eq!(params[0].1.data(), &[0.5, -1.0]);
        assert_eq!(state.len(), 3);
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode(&long).is_err());
    }
}
