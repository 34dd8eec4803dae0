//! Binary parameter checkpoint.
//!
//! Layout (all integers little-endian):
//!   header:  magic "ICAFPARM" | format version u32 | precision bits u8 | seed u64 | record count u64
//!   record:  name length u32 | name bytes (UTF-8) | shape 4 x u32 | raw little-endian scalars
//!
//! Round-trips are bit-exact: scalars are written and read as raw IEEE bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::params::ParamStore;
use crate::tensor::{Precision, Scalar, Shape4, Tensor4};

const MAGIC: &[u8; 8] = b"ICAFPARM";
const VERSION: u32 = 1;

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[T::PRECISION.bits()])?;
    w.write_all(&store.seed().to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (name, value) in store.iter_values() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        let s = value.shape();
        for dim in [s.n, s.c, s.h, s.w] {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(value.len() * T::BYTE_WIDTH);
        for &v in value.data() {
            v.write_le(&mut buf);
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written at the same precision. The store seed is taken
/// from the header so later lazily-initialized parameters stay reproducible.
pub fn load<T: Scalar>(path: &Path) -> Result<ParamStore<T>> {
    if !path.exists() {
        return Err(CoreError::MissingInput(format!(
            "checkpoint {}",
            path.display()
        )));
    }
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CoreError::InvalidArgument(format!(
            "{} is not a parameter checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CoreError::InvalidArgument(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut prec = [0u8; 1];
    r.read_exact(&mut prec)?;
    let precision = Precision::from_bits(prec[0])?;
    if precision != T::PRECISION {
        return Err(CoreError::InvalidArgument(format!(
            "checkpoint precision is {}-bit, requested {}-bit",
            precision.bits(),
            T::PRECISION.bits()
        )));
    }
    let seed = read_u64(&mut r)?;
    let count = read_u64(&mut r)?;

    let mut store = ParamStore::new(seed);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| {
            CoreError::InvalidArgument("checkpoint contains a non-UTF-8 parameter name".into())
        })?;
        let dims = [
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
            read_u32(&mut r)? as usize,
        ];
        let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
        let mut raw = vec![0u8; shape.len() * T::BYTE_WIDTH];
        r.read_exact(&mut raw)?;
        let data: Vec<T> = raw
            .chunks_exact(T::BYTE_WIDTH)
            .map(|chunk| T::read_le(chunk))
            .collect();
        store.set_value(&name, Tensor4::new(shape, data)?)?;
    }
    Ok(store)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
