//! Parameter checkpoints.
//!
//! ```text
//! b"FABK" | u32 count | count x ( u32 name_len | utf-8 name | tensor snapshot )
//! ```
//!
//! Each tensor snapshot uses the `FABT` layout from [`crate::tensor`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{read_snapshot_from, write_snapshot_to, Tensor};

const MAGIC: &[u8; 4] = b"FABK";

pub fn write_checkpoint_to<W: Write>(w: &mut W, records: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for (name, t) in records {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_snapshot_to(w, t)?;
    }
    Ok(())
}

pub fn read_checkpoint_from<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    if &word != MAGIC {
        return Err(Error::Invalid(format!("bad checkpoint magic {word:?}")));
    }
    r.read_exact(&mut word)?;
    let count = u32::from_le_bytes(word) as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        r.read_exact(&mut word)?;
        let mut name = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Invalid("parameter name is not utf-8".into()))?;
        records.push((name, read_snapshot_from(r)?));
    }
    Ok(records)
}

pub fn save_checkpoint(path: impl AsRef<Path>, records: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint_to(&mut w, records)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint_from(&mut r).map_err(|e| match e {
        Error::Invalid(msg) => Error::Format {
            path: path.to_path_buf(),
            msg,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let records = vec![
            ("backbone.0.conv.weight".to_string(), Tensor::full(&[2, 1, 3, 3], 0.25)),
            (
                "backbone.0.conv.bias".to_string(),
                Tensor::new(&[2], vec![1.0, -1.0]).unwrap(),
            ),
        ];
        let mut buf = Vec::new();
        write_checkpoint_to(&mut buf, &records).unwrap();
        assert_eq!(&buf[..4], b"FABK");
        assert_eq!(read_checkpoint_from(&mut &buf[..]).unwrap(), records);
    }
}
