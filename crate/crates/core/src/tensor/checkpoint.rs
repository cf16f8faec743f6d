//! `CKPT` parameter files: magic, u32 count, then per tensor a u32 name
//! length, the UTF-8 name, u32 rank, u32 dims and f32 values, all little-endian.

use std::fs;
use std::path::Path;

use super::{ParamSet, Scalar, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"CKPT";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), TensorError> {
    let v = u32::try_from(v).map_err(|_| TensorError::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint<T: Scalar>(params: &ParamSet<T>) -> Result<Vec<u8>, TensorError> {
    let mut out = Vec::with_capacity(16 + 4 * params.numel());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, params.len())?;
    for (name, t) in params.iter() {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            TensorError::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ParamSet<T>, TensorError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(TensorError::Checkpoint("bad magic".into()));
    }
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let len = r.u32()?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| TensorError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()?;
        if rank > 4 {
            return Err(TensorError::Checkpoint(format!("{name}: rank {rank} exceeds 4")));
        }
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| TensorError::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        params
            .insert(name, Tensor::new(shape, data)?)
            .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(TensorError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(params)
}

pub fn write_checkpoint<T: Scalar>(path: &Path, params: &ParamSet<T>) -> Result<(), TensorError> {
    let bytes = encode_checkpoint(params)?;
    fs::write(path, bytes).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<ParamSet<T>, TensorError> {
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ParamSet<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        p.insert_uniform("enc.w", &[4, 2, 3, 3], 18, &mut rng).unwrap();
        p.insert_uniform("enc.b", &[4], 18, &mut rng).unwrap();
        p.insert("scalar", Tensor::scalar(0.25)).unwrap();
        p
    }

    #[test]
    fn round_trip_is_bitwise() {
        let p = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&path, &p).unwrap();
        let q: ParamSet<f32> = read_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.names().collect::<Vec<_>>(), ["enc.w", "enc.b", "scalar"]);
    }

    #[test]
    fn layout_matches_format() {
        let mut p = ParamSet::<f32>::new();
        p.insert("ab", Tensor::new(vec![2], vec![1.0, -2.0]).unwrap()).unwrap();
        let b = encode_checkpoint(&p).unwrap();
        let mut want = b"CKPT".to_vec();
        for v in [1u32, 2] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        want.extend_from_slice(b"ab");
        for v in [1u32, 2] {
            want.extend_from_slice(&v.to_le_bytes());
        }
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let b = encode_checkpoint(&sample()).unwrap();
        assert!(decode_checkpoint::<f32>(&b[..b.len() - 1]).is_err());
        assert!(decode_checkpoint::<f32>(b"CKPX\0\0\0\0").is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode_checkpoint::<f32>(&extra).is_err());
    }
}
