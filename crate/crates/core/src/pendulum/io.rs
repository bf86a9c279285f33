use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{PendulumConfig, PendulumDataset, PendulumError, PendulumSample};

pub const DATASET_MAGIC: &[u8; 8] = b"SMRPENDU";
pub const DATASET_VERSION: u32 = 1;

fn put_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_f64s(w: &mut impl Write, v: &[f64]) -> io::Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn get_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read, n: usize) -> io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}

/// Header: magic, version (u32), train and test counts, L and image side
/// (u64 each), then the generator parameters t_max, g/l, damping,
/// corruption (f64) and seed (u64). Each sample follows as timestamps,
/// frames and targets (f64 LE) and one mask byte per frame.
pub fn write_dataset(data: &PendulumDataset, w: &mut impl Write) -> io::Result<()> {
    let c = &data.config;
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    for v in [data.train.len(), data.test.len(), c.seq_len, c.image_side] {
        put_u64(w, v as u64)?;
    }
    put_f64s(w, &[c.t_max, c.gravity, c.damping, c.corruption])?;
    put_u64(w, c.seed)?;
    for s in data.train.iter().chain(&data.test) {
        put_f64s(w, &s.timestamps)?;
        put_f64s(w, &s.frames)?;
        put_f64s(w, &s.targets)?;
        w.write_all(&s.mask.iter().map(|m| u8::from(*m)).collect::<Vec<_>>())?;
    }
    Ok(())
}

pub fn read_dataset(r: &mut impl Read) -> Result<PendulumDataset, PendulumError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(PendulumError::Format("bad magic".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != DATASET_VERSION {
        return Err(PendulumError::Format(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = usize::try_from(get_u64(r)?).map_err(|_| PendulumError::Format("dimension overflow".into()))?;
    }
    let [train, test, len, side] = dims;
    if len == 0 || side < 4 || len.saturating_mul(side * side) > 1 << 32 {
        return Err(PendulumError::Format(format!("implausible shape L = {len}, side = {side}")));
    }
    let p = get_f64s(r, 4)?;
    let config = PendulumConfig {
        seq_len: len,
        image_side: side,
        t_max: p[0],
        gravity: p[1],
        damping: p[2],
        corruption: p[3],
        train_size: train,
        test_size: test,
        seed: get_u64(r)?,
    };
    let mut read_sample = || -> Result<PendulumSample, PendulumError> {
        let timestamps = get_f64s(r, len)?;
        let frames = get_f64s(r, len * side * side)?;
        let targets = get_f64s(r, len * 2)?;
        let mut mask = vec![0u8; len];
        r.read_exact(&mut mask)?;
        if mask.iter().any(|m| *m > 1) {
            return Err(PendulumError::Format("mask byte is not 0 or 1".into()));
        }
        Ok(PendulumSample {
            timestamps,
            frames,
            targets,
            mask: mask.into_iter().map(|m| m == 1).collect(),
        })
    };
    let train_set = (0..train).map(|_| read_sample()).collect::<Result<Vec<_>, _>>()?;
    let test_set = (0..test).map(|_| read_sample()).collect::<Result<Vec<_>, _>>()?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(PendulumError::Format("trailing bytes".into()));
    }
    Ok(PendulumDataset {
        config,
        train: train_set,
        test: test_set,
    })
}

pub fn save_dataset(data: &PendulumDataset, path: &Path) -> Result<(), PendulumError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dataset(data, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<PendulumDataset, PendulumError> {
    read_dataset(&mut BufReader::new(File::open(path)?))
}

/// Binary PGM (P5) of one frame with values in `[0, 1]`.
pub fn frame_pgm(frame: &[f64], side: usize) -> Vec<u8> {
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    out.extend(frame.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pendulum::generate_dataset;

    #[test]
    fn round_trip_is_exact() {
        let cfg = PendulumConfig {
            train_size: 2,
            test_size: 1,
            seq_len: 5,
            ..Default::default()
        };
        let d = generate_dataset(&cfg).unwrap();
        let mut buf = Vec::new();
        write_dataset(&d, &mut buf).unwrap();
        assert_eq!(buf.len(), 12 + 32 + 40 + 3 * (5 * 8 * (1 + 576 + 2) + 5));
        assert_eq!(read_dataset(&mut buf.as_slice()).unwrap(), d);
        buf.push(0);
        assert!(read_dataset(&mut buf.as_slice()).is_err());
        buf[0] = b'X';
        assert!(matches!(read_dataset(&mut buf.as_slice()), Err(PendulumError::Format(_))));
    }

    #[test]
    fn pgm_header() {
        let pgm = frame_pgm(&[0.0, 1.0, 0.5, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], 4);
        assert!(pgm.starts_with(b"P5\n4 4\n255\n"));
        assert_eq!(&pgm[11..15], &[0, 255, 128, 255]);
    }
}
