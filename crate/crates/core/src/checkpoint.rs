//! Versioned model container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "GCMCKPT\0" | u32 version | u64 len, config JSON bytes
//! u64 count | count x (u64 len, name bytes, tensor dump)
//! ```
//!
//! Batch-norm statistics are stored as tensors named `@stats/<layer>/mean`
//! and `@stats/<layer>/var`.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamStore, StatsStore};
use crate::tensor::{RunningStats, Tensor};

pub const MAGIC: &[u8; 8] = b"GCMCKPT\0";
pub const VERSION: u32 = 1;
const STATS_PREFIX: &str = "@stats/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub params: ParamStore,
    pub stats: StatsStore,
}

fn put_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<()> {
    w.write_all(&(b.len() as u64).to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn get_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

fn get_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>> {
    let n = get_u64(r)?;
    if n > 1 << 32 {
        return Err(Error::Malformed(format!("implausible field length {n}")));
    }
    let mut b = vec![0u8; n as usize];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(b)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Malformed("truncated checkpoint".into())
    } else {
        Error::Io(e)
    }
}

fn utf8(b: Vec<u8>) -> Result<String> {
    String::from_utf8(b).map_err(|_| Error::Malformed("non-UTF-8 text in checkpoint".into()))
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        put_bytes(w, self.config.as_bytes())?;
        let count = self.params.len() + 2 * self.stats.len();
        w.write_all(&(count as u64).to_le_bytes())?;
        for (name, t) in self.params.iter() {
            put_bytes(w, name.as_bytes())?;
            t.write_dump(w)?;
        }
        for (name, s) in self.stats.iter() {
            for (field, v) in [("mean", &s.mean), ("var", &s.var)] {
                put_bytes(w, format!("{STATS_PREFIX}{name}/{field}").as_bytes())?;
                Tensor::new(vec![v.len()], v.clone())?.write_dump(w)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Malformed("not a checkpoint (bad magic)".into()));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v).map_err(truncated)?;
        let version = u32::from_le_bytes(v);
        if version != VERSION {
            return Err(Error::UnsupportedFormat(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let config = utf8(get_bytes(r)?)?;
        let count = get_u64(r)?;
        let mut params = ParamStore::new();
        let mut pending: Vec<(String, Option<Vec<f64>>, Option<Vec<f64>>)> = Vec::new();
        for _ in 0..count {
            let name = utf8(get_bytes(r)?)?;
            let t = Tensor::read_dump(r)?;
            let Some(rest) = name.strip_prefix(STATS_PREFIX) else {
                params.insert(name, t)?;
                continue;
            };
            let (layer, field) = rest
                .rsplit_once('/')
                .ok_or_else(|| Error::Malformed(format!("bad statistics entry {name}")))?;
            let idx = match pending.iter().position(|(l, _, _)| l == layer) {
                Some(i) => i,
                None => {
                    pending.push((layer.to_string(), None, None));
                    pending.len() - 1
                }
            };
            let slot = match field {
                "mean" => &mut pending[idx].1,
                "var" => &mut pending[idx].2,
                _ => return Err(Error::Malformed(format!("bad statistics entry {name}"))),
            };
            *slot = Some(t.into_data());
        }
        let mut stats = StatsStore::default();
        for (layer, mean, var) in pending {
            match (mean, var) {
                (Some(mean), Some(var)) if mean.len() == var.len() => stats.insert(layer, RunningStats { mean, var })?,
                _ => return Err(Error::Malformed(format!("incomplete statistics for {layer}"))),
            }
        }
        Ok(Self { config, params, stats })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.insert("a.w", Tensor::new(vec![2, 2], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap()).unwrap();
        params.insert("b", Tensor::scalar(std::f64::consts::PI).unwrap()).unwrap();
        let mut stats = StatsStore::default();
        stats.insert("bn1", RunningStats { mean: vec![0.25, -1.5], var: vec![1.0, 3.0] }).unwrap();
        Checkpoint { config: "{\"k\":1}".into(), params, stats }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.params.get("a.w").unwrap()), bits(c.params.get("a.w").unwrap()));
        assert_eq!(back.stats.get("bn1").unwrap().mean, vec![0.25, -1.5]);
        assert_eq!(back.config, c.config);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(Error::Malformed(_))));
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(Checkpoint::read_from(&mut &cut[..]), Err(Error::Malformed(_))));
        let mut v2 = buf;
        v2[8] = 2;
        assert!(matches!(Checkpoint::read_from(&mut v2.as_slice()), Err(Error::UnsupportedFormat(_))));
    }
}
