//! Little-endian helpers shared by the checkpoint and sequence formats.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn short(what: &str) -> impl FnOnce(io::Error) -> Error + '_ {
    move |e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            Error::Truncated(what.to_string())
        } else {
            Error::Io(e)
        }
    }
}

pub(crate) fn expect_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut found = [0u8; 4];
    r.read_exact(&mut found).map_err(short("magic"))?;
    if &found != magic {
        return Err(Error::BadMagic {
            expected: magic.to_vec(),
            found: found.to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn expect_version(r: &mut impl Read, version: u32) -> Result<()> {
    let found = read_u32(r, "version")?;
    if found != version {
        return Err(Error::UnsupportedVersion {
            expected: version,
            found,
        });
    }
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    r.read_u32::<LittleEndian>().map_err(short(what))
}

pub(crate) fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    r.read_u64::<LittleEndian>().map_err(short(what))
}

pub(crate) fn read_f64(r: &mut impl Read, what: &str) -> Result<f64> {
    r.read_f64::<LittleEndian>().map_err(short(what))
}

pub(crate) fn read_f32s(r: &mut impl Read, n: usize, what: &str) -> Result<Vec<f32>> {
    let mut data = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut data).map_err(short(what))?;
    Ok(data)
}

pub(crate) fn read_string(r: &mut impl Read, what: &str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(short(what))?;
    String::from_utf8(buf).map_err(|_| Error::invalid(format!("{what} is not valid UTF-8")))
}

pub(crate) fn write_string(w: &mut impl Write, s: &str) -> io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub(crate) fn write_f32s(w: &mut impl Write, data: &[f32]) -> io::Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

/// `name, rank, extents, payload`.
pub(crate) fn write_named_tensor(w: &mut impl Write, name: &str, t: &Tensor<f32>) -> io::Result<()> {
    write_string(w, name)?;
    w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
    for &d in t.shape() {
        w.write_u32::<LittleEndian>(d as u32)?;
    }
    write_f32s(w, t.data())
}

pub(crate) fn read_named_tensor(r: &mut impl Read) -> Result<(String, Tensor<f32>)> {
    let name = read_string(r, "tensor name")?;
    let rank = read_u32(r, "tensor rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(Error::invalid(format!("tensor {name} has implausible rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u32(r, "tensor extent").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = shape.iter().product();
    let data = read_f32s(r, n, &name)?;
    Ok((name, Tensor::new(shape, data)?))
}

pub(crate) use byteorder::WriteBytesExt as WriteLe;
pub(crate) type Le = LittleEndian;
