//! Flat binary array layout used by checkpoints.
//!
//! A single array is stored as
//!
//! ```text
//! magic   4 bytes  "CMAR"
//! width   u8       bytes per element (4 = f32, 8 = f64)
//! rank    u8       number of axes (0..=4)
//! dims    rank × u64 little-endian
//! values  product(dims) × width bytes, little-endian, row-major
//! ```
//!
//! A named collection prefixes each array with `u32 name_len` + UTF-8 name
//! and starts with `"CMNA"` followed by a `u32` entry count.

use std::io::{Read, Write};

use super::{Array, Element, TensorError, MAX_RANK};

const ARRAY_MAGIC: &[u8; 4] = b"CMAR";
const NAMED_MAGIC: &[u8; 4] = b"CMNA";

pub fn write_array<T: Element, W: Write>(w: &mut W, a: &Array<T>) -> Result<(), TensorError> {
    let width = T::PRECISION.byte_width();
    let mut buf = Vec::with_capacity(6 + 8 * a.rank() + width * a.len());
    buf.extend_from_slice(ARRAY_MAGIC);
    buf.push(width as u8);
    buf.push(a.rank() as u8);
    for d in a.shape() {
        buf.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    for v in a.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_array<T: Element, R: Read>(r: &mut R) -> Result<Array<T>, TensorError> {
    let mut head = [0u8; 6];
    r.read_exact(&mut head)?;
    if &head[..4] != ARRAY_MAGIC {
        return Err(TensorError::Format("bad array magic".into()));
    }
    let width = head[4] as usize;
    if width != T::PRECISION.byte_width() {
        return Err(TensorError::Format(format!(
            "element width {width} does not match requested precision {:?}",
            T::PRECISION
        )));
    }
    let rank = head[5] as usize;
    if rank > MAX_RANK {
        return Err(TensorError::Format(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 8];
        r.read_exact(&mut d)?;
        shape.push(u64::from_le_bytes(d) as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * width];
    r.read_exact(&mut raw)?;
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    Array::from_vec(&shape, data)
}

pub fn write_named<T: Element, W: Write>(w: &mut W, arrays: &[(String, Array<T>)]) -> Result<(), TensorError> {
    w.write_all(NAMED_MAGIC)?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, a) in arrays {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_array(w, a)?;
    }
    Ok(())
}

pub fn read_named<T: Element, R: Read>(r: &mut R) -> Result<Vec<(String, Array<T>)>, TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != NAMED_MAGIC {
        return Err(TensorError::Format("bad named-array magic".into()));
    }
    let mut n = [0u8; 4];
    r.read_exact(&mut n)?;
    let count = u32::from_le_bytes(n) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut n)?;
        let mut name = vec![0u8; u32::from_le_bytes(n) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| TensorError::Format(e.to_string()))?;
        out.push((name, read_array(r)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn array_layout_is_stable() {
        let a = Array::<f32>::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_array(&mut buf, &a).unwrap();
        let mut expected = b"CMAR".to_vec();
        expected.extend_from_slice(&[4, 1]);
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expected);
        let back: Array<f32> = read_array(&mut buf.as_slice()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let a = Array::<f64>::scalar(3.0);
        let mut buf = Vec::new();
        write_array(&mut buf, &a).unwrap();
        assert!(read_array::<f32, _>(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn named_roundtrip() {
        let arrays = vec![
            ("w".to_string(), Array::<f64>::from_vec(&[2, 2], vec![1., 2., 3., 4.]).unwrap()),
            ("b".to_string(), Array::<f64>::zeros(&[3])),
        ];
        let mut buf = Vec::new();
        write_named(&mut buf, &arrays).unwrap();
        let back = read_named::<f64, _>(&mut buf.as_slice()).unwrap();
        assert_eq!(back, arrays);
    }
}
