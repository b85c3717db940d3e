//! `.ckpt` files: `XDLF`, u32 version, u32 entry count, then per entry a u16
//! name length, the UTF-8 name and an embedded `.ten` payload. All integers
//! are little-endian. Entries hold every parameter and buffer of a store.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::io::{decode_ten, encode_ten};
use crate::tensor::Scalar;

pub const CKPT_MAGIC: &[u8; 4] = b"XDLF";
pub const CKPT_VERSION: u32 = 1;

pub fn encode_checkpoint<T: Scalar>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.named_tensors() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::format("checkpoint", format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_ten(t, &mut out)?;
    }
    Ok(out)
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::format("checkpoint", format!("truncated: {e}")))?;
    Ok(buf)
}

/// Loads every entry into `store`; names and shapes must match exactly and
/// every tensor of the store must be present.
pub fn decode_checkpoint_into<T: Scalar>(bytes: &[u8], store: &mut ParamStore<T>) -> Result<()> {
    let mut r = Cursor::new(bytes);
    if &read_exact::<4>(&mut r)? != CKPT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != CKPT_VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    if count != store.len() {
        return Err(Error::format(
            "checkpoint",
            format!("{count} entries, model has {} (built for another variant?)", store.len()),
        ));
    }
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::format("checkpoint", format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::format("checkpoint", "name is not UTF-8"))?;
        let t = decode_ten(&mut r)?;
        if t.dtype() != T::DTYPE {
            return Err(Error::format(
                "checkpoint",
                format!("{name}: stored {:?}, expected {:?}", t.dtype(), T::DTYPE),
            ));
        }
        store.set_by_name(&name, t.into_tensor())?;
    }
    if (r.position() as usize) != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, store: &ParamStore<T>) -> Result<()> {
    fs::write(path, encode_checkpoint(store)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>, store: &mut ParamStore<T>) -> Result<()> {
    decode_checkpoint_into(&fs::read(path)?, store)
}
