//! Weight checkpoint container.
//!
//! Layout (little-endian):
//! - magic `R2NC`, u32 version, u32 header length `n`
//! - `n` bytes of JSON header: network config, iteration, metadata and the
//!   name and shape of every stored array
//! - the arrays' f64 values in header order
//!
//! Network arrays come first, followed by any auxiliary arrays (optimizer
//! moments) under their own names.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{NetConfig, ParamStore, R2N2Net};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"R2NC";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: R2N2Net,
    /// Number of completed training iterations.
    pub iteration: u64,
    pub auxiliary: Vec<(String, Tensor)>,
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: NetConfig,
    iteration: u64,
    metadata: serde_json::Value,
    network: Vec<ArrayInfo>,
    auxiliary: Vec<ArrayInfo>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayInfo {
    name: String,
    shape: Vec<usize>,
}

fn infos<'a>(it: impl Iterator<Item = (&'a str, &'a Tensor)>) -> Vec<ArrayInfo> {
    it.map(|(n, t)| ArrayInfo {
        name: n.to_string(),
        shape: t.shape().to_vec(),
    })
    .collect()
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    let header = Header {
        config: checkpoint.net.config().clone(),
        iteration: checkpoint.iteration,
        metadata: checkpoint.metadata.clone(),
        network: infos(checkpoint.net.params().entries()),
        auxiliary: infos(checkpoint.auxiliary.iter().map(|(n, t)| (n.as_str(), t))),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format(path, e.to_string()))?;
    // write next to the target and rename so an interrupted save never
    // leaves a truncated checkpoint behind
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(json.len() as u32)?;
        w.write_all(&json)?;
        let arrays = checkpoint
            .net
            .params()
            .tensors()
            .iter()
            .chain(checkpoint.auxiliary.iter().map(|(_, t)| t));
        for t in arrays {
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        drop(w);
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    let len = r.read_u32::<LittleEndian>().map_err(|e| Error::io(path, e))? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::format(path, e.to_string()))?;
    let mut read_arrays = |infos: &[ArrayInfo]| -> Result<Vec<(String, Tensor)>> {
        infos
            .iter()
            .map(|info| {
                let n: usize = info.shape.iter().product();
                let mut data = vec![0.0; n];
                r.read_f64_into::<LittleEndian>(&mut data)
                    .map_err(|e| Error::format(path, format!("truncated array {}: {e}", info.name)))?;
                Ok((info.name.clone(), Tensor::new(&info.shape, data)))
            })
            .collect()
    };
    let network = read_arrays(&header.network)?;
    let auxiliary = read_arrays(&header.auxiliary)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(Error::format(path, format!("{} trailing bytes", rest.len())));
    }
    let net = R2N2Net::from_params(header.config, ParamStore::new(network))
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Checkpoint {
        net,
        iteration: header.iteration,
        auxiliary,
        metadata: header.metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.r2nc");
        let net = R2N2Net::new(NetConfig::toy(16, 32), 5).unwrap();
        let ck = Checkpoint {
            net,
            iteration: 42,
            auxiliary: vec![("adam.m.stem.weight".into(), Tensor::new(&[2], vec![0.1, -3.0]))],
            metadata: serde_json::json!({"seed": 9}),
        };
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
    }

    #[test]
    fn rejects_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.r2nc");
        std::fs::write(&path, b"XXXX0000").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));

        let ck = Checkpoint {
            net: R2N2Net::zeros(NetConfig::toy(16, 32)).unwrap(),
            iteration: 0,
            auxiliary: vec![],
            metadata: serde_json::Value::Null,
        };
        save_checkpoint(&path, &ck).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
        assert!(matches!(load_checkpoint(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
