//! Binary checkpoints: a magic tag and version, the network configuration as
//! JSON, then named float32 tensors with shape headers. All integers are
//! little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use aqflow_core::{Error, Result, SensorSize};
use serde::{Deserialize, Serialize};

use crate::net::{Network, NetworkConfig};
use crate::tape::Tensor;

pub const MAGIC: &[u8; 4] = b"AQCK";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: NetworkConfig,
    sensor: [u16; 2],
}

fn bad(message: impl Into<String>) -> Error {
    Error::Parse {
        location: "checkpoint".into(),
        message: message.into(),
    }
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
    Ok(u32::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, n: usize) -> Result<Vec<u8>> {
    let mut b = Vec::new();
    r.take(n as u64).read_to_end(&mut b)?;
    if b.len() != n {
        return Err(bad("truncated"));
    }
    Ok(b)
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::InvalidArgument(format!("{what} too large for a checkpoint")))
}

pub fn write_checkpoint(net: &Network, mut w: impl Write) -> Result<()> {
    let header = Header {
        config: net.config().clone(),
        sensor: [net.sensor().width, net.sensor().height],
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    w.write_all(MAGIC)?;
    put_u32(&mut w, VERSION)?;
    put_u32(&mut w, len_u32(json.len(), "header")?)?;
    w.write_all(&json)?;
    put_u32(&mut w, len_u32(net.params().len(), "tensor count")?)?;
    for (name, t) in net.param_names().iter().zip(net.params()) {
        put_u32(&mut w, len_u32(name.len(), "name")?)?;
        w.write_all(name.as_bytes())?;
        put_u32(&mut w, len_u32(t.shape.len(), "rank")?)?;
        for &d in &t.shape {
            put_u32(&mut w, len_u32(d, "dimension")?)?;
        }
        for &v in &t.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(mut r: impl Read) -> Result<Network> {
    let magic = get_bytes(&mut r, 4)?;
    if magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = get_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n = get_u32(&mut r)? as usize;
    let header: Header = serde_json::from_slice(&get_bytes(&mut r, n)?).map_err(|e| bad(e.to_string()))?;
    let count = get_u32(&mut r)? as usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let n = get_u32(&mut r)? as usize;
        let name = String::from_utf8(get_bytes(&mut r, n)?).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = get_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| get_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("tensor too large"))?;
        let raw = get_bytes(&mut r, len.checked_mul(4).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes"));
    }
    let sensor = SensorSize::new(header.sensor[0], header.sensor[1]);
    Network::from_parts(header.config, sensor, tensors).map_err(|e| bad(e.to_string()))
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(net, &mut w)?;
    Ok(w.flush()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bytes(net: &Network) -> Vec<u8> {
        let mut b = Vec::new();
        write_checkpoint(net, &mut b).unwrap();
        b
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let net = Network::new(NetworkConfig::default(), SensorSize::new(20, 14)).unwrap();
        let first = bytes(&net);
        let loaded = read_checkpoint(first.as_slice()).unwrap();
        assert_eq!(loaded.config(), net.config());
        assert_eq!(loaded.sensor(), net.sensor());
        assert_eq!(bytes(&loaded), first);
        for (a, b) in loaded.params().iter().zip(net.params()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let net = Network::new(NetworkConfig::toy(), SensorSize::new(8, 8)).unwrap();
        let good = bytes(&net);
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(read_checkpoint(magic.as_slice()).is_err());
        let mut version = good.clone();
        version[4] = 9;
        assert!(read_checkpoint(version.as_slice()).is_err());
        assert!(read_checkpoint(&good[..good.len() - 3]).is_err());
        let mut long = good.clone();
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
        assert!(read_checkpoint(&b""[..]).is_err());
    }
}
