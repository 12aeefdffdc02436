//! PGDF binary field files and CSV export.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "PGDF" | version u32 | H u32 | W u32 | C u32 | spacing f64 | boundary u8 | H·W·C f64
//! ```

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Boundary, Field, GridSpec};
use crate::error::{Error, Result};

pub const PGDF_MAGIC: &[u8; 4] = b"PGDF";
pub const PGDF_VERSION: u32 = 1;

pub fn write_pgdf<W: Write>(field: &Field, mut out: W) -> Result<()> {
    let s = field.spec();
    out.write_all(PGDF_MAGIC)?;
    out.write_all(&PGDF_VERSION.to_le_bytes())?;
    for dim in [s.height, s.width, s.channels] {
        let dim = u32::try_from(dim).map_err(|_| Error::Format(format!("dimension {dim} exceeds u32")))?;
        out.write_all(&dim.to_le_bytes())?;
    }
    out.write_all(&s.spacing.to_le_bytes())?;
    out.write_all(&[s.boundary.code()])?;
    for v in field.values() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_pgdf<R: Read>(mut input: R) -> Result<Field> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != PGDF_MAGIC {
        return Err(Error::Format("missing PGDF magic".into()));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |input: &mut R| -> Result<u32> {
        input.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut input)?;
    if version != PGDF_VERSION {
        return Err(Error::Format(format!("unsupported PGDF version {version}")));
    }
    let height = read_u32(&mut input)? as usize;
    let width = read_u32(&mut input)? as usize;
    let channels = read_u32(&mut input)? as usize;
    let mut f64buf = [0u8; 8];
    input.read_exact(&mut f64buf)?;
    let spacing = f64::from_le_bytes(f64buf);
    let mut b = [0u8; 1];
    input.read_exact(&mut b)?;
    let spec = GridSpec::new(height, width, channels, spacing, Boundary::from_code(b[0])?)?;
    let mut values = Vec::with_capacity(spec.len());
    for _ in 0..spec.len() {
        input.read_exact(&mut f64buf)?;
        values.push(f64::from_le_bytes(f64buf));
    }
    if input.read(&mut b)? != 0 {
        return Err(Error::Format("trailing bytes after PGDF payload".into()));
    }
    Field::new(spec, values)
}

pub fn write_pgdf_file(field: &Field, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pgdf(field, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_pgdf_file(path: impl AsRef<Path>) -> Result<Field> {
    read_pgdf(BufReader::new(File::open(path)?))
}

/// One row per cell: `channel,row,col,value`.
pub fn to_csv(field: &Field) -> String {
    let s = field.spec();
    let mut out = String::from("channel,row,col,value\n");
    for c in 0..s.channels {
        for i in 0..s.height {
            for j in 0..s.width {
                let _ = writeln!(out, "{c},{i},{j},{}", field.get(c, i, j));
            }
        }
    }
    out
}
