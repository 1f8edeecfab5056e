//! Binary containers: `LMSW` named weight sets and `RV3D` raw volumes.
//! All integers and payloads are little-endian.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{numel, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"LMSW";
pub const VOLUME_MAGIC: &[u8; 4] = b"RV3D";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

struct Reader<R> {
    inner: R,
    format: &'static str,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::format(self.format, format!("truncated while reading {what}")),
            _ => Error::Io(e),
        })?;
        Ok(buf)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.bytes::<1>(what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.bytes::<4>("magic")?;
        if &got != magic {
            return Err(Error::format(self.format, format!("bad magic {got:?}")));
        }
        let v = self.u32("version")?;
        if v != FORMAT_VERSION {
            return Err(Error::format(self.format, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let mut raw = vec![0u8; n * 4];
        self.inner.read_exact(&mut raw).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::format(self.format, format!("truncated payload for {what}")),
            _ => Error::Io(e),
        })?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::format(self.format, "trailing bytes after last record")),
        }
    }
}

fn write_f32s(w: &mut impl Write, data: &[f32]) -> Result<()> {
    let mut raw = Vec::with_capacity(data.len() * 4);
    for v in data {
        raw.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&raw)?;
    Ok(())
}

fn u32_of(n: usize, format: &'static str, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::format(format, format!("{what} {n} exceeds u32")))
}

pub fn write_weights(w: &mut impl Write, store: &ParamStore<f32>) -> Result<()> {
    const F: &str = "LMSW";
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&u32_of(store.len(), F, "entry count")?.to_le_bytes())?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::format(F, format!("name `{}` too long", p.name)))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value.shape();
        let rank = u8::try_from(shape.len()).map_err(|_| Error::format(F, "rank exceeds 255"))?;
        w.write_all(&[rank])?;
        for &e in shape {
            w.write_all(&u32_of(e, F, "extent")?.to_le_bytes())?;
        }
        write_f32s(w, p.value.data())?;
    }
    Ok(())
}

/// Reads every entry as a trainable parameter, in file order.
pub fn read_weights(r: impl Read) -> Result<ParamStore<f32>> {
    let mut rd = Reader { inner: r, format: "LMSW" };
    rd.header(WEIGHTS_MAGIC)?;
    let count = rd.u32("entry count")?;
    let mut store = ParamStore::default();
    for _ in 0..count {
        let len = rd.u16("name length")? as usize;
        let mut name = vec![0u8; len];
        rd.inner
            .read_exact(&mut name)
            .map_err(|_| Error::format("LMSW", "truncated name"))?;
        let name = String::from_utf8(name).map_err(|_| Error::format("LMSW", "name is not UTF-8"))?;
        let rank = rd.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| rd.u32("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let data = rd.f32s(numel(&shape), &name)?;
        store.insert(name, Tensor::new(shape, data)?, true)?;
    }
    rd.expect_end()?;
    Ok(store)
}

pub fn save_weights(path: impl AsRef<Path>, store: &ParamStore<f32>) -> Result<()> {
    let mut buf = Vec::new();
    write_weights(&mut buf, store)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<ParamStore<f32>> {
    read_weights(std::fs::read(path)?.as_slice())
}

/// Writes a `(C, D, H, W)` volume. A leading batch axis of 1 is dropped.
pub fn write_volume(w: &mut impl Write, volume: &Tensor<f32>) -> Result<()> {
    const F: &str = "RV3D";
    let dims: [usize; 4] = match volume.shape() {
        &[c, d, h, wd] => [c, d, h, wd],
        &[1, c, d, h, wd] => [c, d, h, wd],
        other => return Err(Error::format(F, format!("cannot store shape {other:?} as (C, D, H, W)"))),
    };
    w.write_all(VOLUME_MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for e in dims {
        w.write_all(&u32_of(e, F, "extent")?.to_le_bytes())?;
    }
    w.write_all(&[DTYPE_F32])?;
    write_f32s(w, volume.data())
}

/// Reads a volume as a `(C, D, H, W)` tensor.
pub fn read_volume(r: impl Read) -> Result<Tensor<f32>> {
    let mut rd = Reader { inner: r, format: "RV3D" };
    rd.header(VOLUME_MAGIC)?;
    let dims = (0..4)
        .map(|_| rd.u32("extent").map(|e| e as usize))
        .collect::<Result<Vec<_>>>()?;
    let dtype = rd.u8("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(Error::format("RV3D", format!("unsupported dtype code {dtype}")));
    }
    let data = rd.f32s(numel(&dims), "volume")?;
    rd.expect_end()?;
    Tensor::new(dims, data)
}

pub fn save_volume(path: impl AsRef<Path>, volume: &Tensor<f32>) -> Result<()> {
    let mut buf = Vec::new();
    write_volume(&mut buf, volume)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    read_volume(std::fs::read(path)?.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_round_trip_bitwise() {
        let mut store = ParamStore::default();
        store
            .insert("a.weight", Tensor::new(vec![2, 3], vec![1.5, -0.0, f32::MIN_POSITIVE, 3e38, -7.25, 0.1]).unwrap(), true)
            .unwrap();
        store.insert("s", Tensor::scalar(42.0f32), true).unwrap();
        let mut buf = Vec::new();
        write_weights(&mut buf, &store).unwrap();
        assert_eq!(&buf[..4], b"LMSW");
        let back = read_weights(buf.as_slice()).unwrap();
        let mut again = Vec::new();
        write_weights(&mut again, &back).unwrap();
        assert_eq!(buf, again);
        let bits = |s: &ParamStore<f32>| -> Vec<u32> { s.iter().flat_map(|p| p.value.data().iter().map(|v| v.to_bits())).collect() };
        assert_eq!(bits(&store), bits(&back));
    }

    #[test]
    fn weights_reject_corruption() {
        let mut store = ParamStore::default();
        store.insert("w", Tensor::<f32>::ones(vec![4]), true).unwrap();
        let mut buf = Vec::new();
        write_weights(&mut buf, &store).unwrap();
        assert!(matches!(read_weights(&buf[..buf.len() - 1]), Err(Error::Format { .. })));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_weights(bad.as_slice()), Err(Error::Format { .. })));
        let mut long = buf.clone();
        long.push(0);
        assert!(read_weights(long.as_slice()).is_err());
    }

    #[test]
    fn volume_round_trip_and_layout() {
        let v = Tensor::from_fn(vec![2, 2, 3, 4], |i| i as f32 * 0.5 - 3.0);
        let mut buf = Vec::new();
        write_volume(&mut buf, &v).unwrap();
        assert_eq!(buf.len(), 4 + 4 + 16 + 1 + 4 * 48);
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(buf[24], 0);
        let back = read_volume(buf.as_slice()).unwrap();
        assert_eq!(back, v);
        let batched = Tensor::new(vec![1, 2, 2, 3, 4], v.data().to_vec()).unwrap();
        let mut buf2 = Vec::new();
        write_volume(&mut buf2, &batched).unwrap();
        assert_eq!(buf, buf2);
        buf[24] = 1;
        assert!(read_volume(buf.as_slice()).is_err());
    }
}
