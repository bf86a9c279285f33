//! Binary model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "SMRLABCK"
//! version  u8
//! form     u8       0 = dense, 1 = diagonal
//! n        u64      state dimension
//! m        u64      channel dimension
//! count    u32      number of tensors
//! count × { name_len u16, name utf-8, rank u8, dims u64 × rank, values f64 × prod(dims) }
//! ```
//!
//! A single model stores `a`, `b`, `c`, `dt`; gate parameters are stored
//! under `smr.*` names next to them.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::ParamForm;
use crate::gradkit::{ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"SMRLABCK";
pub const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u8),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match model: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub form: ParamForm,
    pub n: usize,
    pub m: usize,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params(form: ParamForm, n: usize, m: usize, params: &ParamSet) -> Self {
        Self {
            form,
            n,
            m,
            tensors: params
                .iter()
                .map(|(name, t)| (name.to_string(), Tensor::new(t.shape(), t.data().to_vec()).expect("same shape")))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies stored values into `params`, matching by name and shape.
    pub fn apply_to(&self, params: &mut ParamSet) -> Result<(), CheckpointError> {
        for (name, t) in &self.tensors {
            let id = params
                .find(name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("unknown tensor {name}")))?;
            let dst = params.get_mut(id);
            if dst.shape() != t.shape() {
                return Err(CheckpointError::Mismatch(format!("{name}: stored {:?}, model {:?}", t.shape(), dst.shape())));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        if self.tensors.len() != params.len() {
            return Err(CheckpointError::Mismatch(format!(
                "checkpoint holds {} tensors, model has {}",
                self.tensors.len(),
                params.len()
            )));
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION, form_tag(self.form)])?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&(self.m as u64).to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            let bytes = name.as_bytes();
            let len = u16::try_from(bytes.len()).map_err(|_| CheckpointError::Corrupt(format!("name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(bytes)?;
            w.write_all(&[t.rank() as u8])?;
            for d in t.shape() {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut head = [0u8; 2];
        r.read_exact(&mut head).map_err(truncated)?;
        if head[0] != VERSION {
            return Err(CheckpointError::Version(head[0]));
        }
        let form = match head[1] {
            0 => ParamForm::Dense,
            1 => ParamForm::Diagonal,
            t => return Err(CheckpointError::Corrupt(format!("unknown form tag {t}"))),
        };
        let n = read_u64(r)? as usize;
        let m = read_u64(r)? as usize;
        let mut cnt = [0u8; 4];
        r.read_exact(&mut cnt).map_err(truncated)?;
        let count = u32::from_le_bytes(cnt);
        let mut tensors = Vec::new();
        for _ in 0..count {
            let mut nl = [0u8; 2];
            r.read_exact(&mut nl).map_err(truncated)?;
            let mut name = vec![0u8; u16::from_le_bytes(nl) as usize];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name).map_err(|_| CheckpointError::Corrupt("tensor name is not utf-8".into()))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank).map_err(truncated)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                shape.push(read_u64(r)? as usize);
            }
            let total = shape.iter().try_fold(1usize, |a, d| a.checked_mul(*d));
            let total = total
                .filter(|t| *t <= 1 << 28)
                .ok_or_else(|| CheckpointError::Corrupt(format!("{name}: implausible shape {shape:?}")))?;
            let mut data = Vec::with_capacity(total);
            let mut buf = [0u8; 8];
            for _ in 0..total {
                r.read_exact(&mut buf).map_err(truncated)?;
                data.push(f64::from_le_bytes(buf));
            }
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Self { form, n, m, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn form_tag(form: ParamForm) -> u8 {
    match form {
        ParamForm::Dense => 0,
        ParamForm::Diagonal => 1,
    }
}

fn truncated(e: std::io::Error) -> CheckpointError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        CheckpointError::Corrupt("truncated".into())
    } else {
        CheckpointError::Io(e)
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::vector(&[-0.5, -1.0]));
        ps.add("b", Tensor::matrix(&[&[1.0], &[2.0]]));
        ps.add("dt", Tensor::scalar(0.01));
        Checkpoint::from_params(ParamForm::Diagonal, 2, 1, &ps)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(CheckpointError::BadMagic)));
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(CheckpointError::Version(9))));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(Checkpoint::read_from(&mut &short[..]), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn apply_restores_values() {
        let ck = sample();
        let mut ps = ParamSet::new();
        ps.add("a", Tensor::zeros(&[2]));
        ps.add("b", Tensor::zeros(&[2, 1]));
        ps.add("dt", Tensor::scalar(0.0));
        ck.apply_to(&mut ps).unwrap();
        assert_eq!(ps.get(ps.find("b").unwrap()).data(), &[1.0, 2.0]);
    }
}
