//! Self-describing checkpoint container: magic, version, JSON header, then
//! length-prefixed binary blobs.

use std::fs;
use std::path::Path;

use crate::dataprep::write_atomic;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"PGCK";
pub const FORMAT_VERSION: u32 = 1;

pub fn write(path: &Path, header: &serde_json::Value, blobs: &[Vec<u8>]) -> Result<()> {
    let head = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + head.len() + blobs.iter().map(|b| b.len() + 8).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(head.len() as u32).to_le_bytes());
    out.extend_from_slice(&head);
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for b in blobs {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        out.extend_from_slice(b);
    }
    write_atomic(path, &out)
}

pub fn read(path: &Path) -> Result<(serde_json::Value, Vec<Vec<u8>>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes).map_err(|m| Error::Checkpoint(format!("{}: {m}", path.display())))
}

fn parse(bytes: &[u8]) -> std::result::Result<(serde_json::Value, Vec<Vec<u8>>), String> {
    let take = |off: &mut usize, n: usize| -> std::result::Result<&[u8], String> {
        let s = bytes.get(*off..*off + n).ok_or("truncated file")?;
        *off += n;
        Ok(s)
    };
    let mut off = 0;
    if take(&mut off, 4)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let hlen = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let header = serde_json::from_slice(take(&mut off, hlen)?).map_err(|e| e.to_string())?;
    let n = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let mut blobs = Vec::with_capacity(n);
    for _ in 0..n {
        let len = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()) as usize;
        blobs.push(take(&mut off, len)?.to_vec());
    }
    Ok((header, blobs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let header = serde_json::json!({"kind": "test", "epoch": 3});
        write(&p, &header, &[vec![1, 2, 3], vec![]]).unwrap();
        let (h, b) = read(&p).unwrap();
        assert_eq!(h, header);
        assert_eq!(b, vec![vec![1, 2, 3], vec![]]);
        let mut raw = fs::read(&p).unwrap();
        raw.truncate(raw.len() - 2);
        fs::write(&p, &raw).unwrap();
        assert!(matches!(read(&p), Err(Error::Checkpoint(_))));
    }
}
