//! Binary parameter files: magic `LTSM`, then little-endian
//! `version: u32`, `count: u32` and for each parameter
//! `name_len: u32, name, rank: u32, dims: [u32; rank], values: [f32]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::nn::{Parameterized, Tensor};
use crate::real::Real;

const MAGIC: &[u8; 4] = b"LTSM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor<f32>,
}

fn format_err(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "checkpoint",
        detail: detail.into(),
    }
}

pub fn write_tensors<W: Write>(mut w: W, tensors: &[NamedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32)?;
    for t in tensors {
        w.write_u32::<LittleEndian>(t.name.len() as u32)?;
        w.write_all(t.name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.tensor.shape().len() as u32)?;
        for &d in t.tensor.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in t.tensor.data() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<NamedTensor>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(format_err("bad magic"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>()? as usize;
        if len > 4096 {
            return Err(format_err("parameter name too long"));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| format_err("name is not utf-8"))?;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        if rank > 4 {
            return Err(format_err(format!("{name}: rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let n: usize = dims.iter().product();
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data)?;
        out.push(NamedTensor {
            name,
            tensor: Tensor::new(&dims, data)?,
        });
    }
    Ok(out)
}

pub fn snapshot<T: Real, M: Parameterized<T> + ?Sized>(model: &M) -> Vec<NamedTensor> {
    model
        .parameters()
        .iter()
        .map(|p| NamedTensor {
            name: p.name.clone(),
            tensor: p.value.cast(),
        })
        .collect()
}

/// Copies stored values into the model, matching by name and shape.
pub fn restore<T: Real, M: Parameterized<T> + ?Sized>(
    model: &mut M,
    tensors: &[NamedTensor],
) -> Result<()> {
    let params = model.parameters_mut();
    if params.len() != tensors.len() {
        return Err(format_err(format!(
            "model has {} parameters, file has {}",
            params.len(),
            tensors.len()
        )));
    }
    for p in params {
        let t = tensors
            .iter()
            .find(|t| t.name == p.name)
            .ok_or_else(|| format_err(format!("missing parameter {}", p.name)))?;
        if t.tensor.shape() != p.value.shape() {
            return Err(format_err(format!(
                "{}: stored shape {:?}, model shape {:?}",
                p.name,
                t.tensor.shape(),
                p.value.shape()
            )));
        }
        p.value = t.tensor.cast();
        p.zero_grad();
    }
    Ok(())
}

pub fn save<T: Real, M: Parameterized<T> + ?Sized>(model: &M, path: &Path) -> Result<()> {
    write_tensors(BufWriter::new(File::create(path)?), &snapshot(model))
}

pub fn load_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    read_tensors(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Parameter;

    struct Two {
        a: Parameter<f64>,
        b: Parameter<f64>,
    }

    impl Parameterized<f64> for Two {
        fn parameters(&self) -> Vec<&Parameter<f64>> {
            vec![&self.a, &self.b]
        }
        fn parameters_mut(&mut self) -> Vec<&mut Parameter<f64>> {
            vec![&mut self.a, &mut self.b]
        }
    }

    fn model(seed: f64) -> Two {
        Two {
            a: Parameter::new("a", Tensor::from_fn(&[2, 3], |i| i as f64 * seed)),
            b: Parameter::new("b.bias", Tensor::from_fn(&[4], |i| -(i as f64) * seed)),
        }
    }

    #[test]
    fn round_trip_restores_values() {
        let m = model(0.25);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &snapshot(&m)).unwrap();
        let mut other = model(0.0);
        restore(&mut other, &read_tensors(buf.as_slice()).unwrap()).unwrap();
        assert_eq!(other.a.value, m.a.value);
        assert_eq!(other.b.value, m.b.value);
    }

    #[test]
    fn rejects_shape_mismatch_and_bad_magic() {
        let m = model(1.0);
        let mut tensors = snapshot(&m);
        tensors[0].tensor = Tensor::zeros(&[3, 2]);
        let mut other = model(0.0);
        assert!(restore(&mut other, &tensors).is_err());
        assert!(read_tensors(&b"XXXX\x01\0\0\0\0\0\0\0"[..]).is_err());
    }
}
