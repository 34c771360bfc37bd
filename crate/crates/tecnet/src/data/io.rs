//! Dataset file format (little-endian):
//!
//! ```text
//! magic "TECSEQ1\0" | u32 version=1 | u32 n_frames | u32 height=72
//! | u32 width=72 | f32 max_train | u8 frame_space | u8 normalized
//! | per frame: i64 epoch + 72*72 f32 row-major (north first, west first)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, FrameSpace, TecDataset, TecMap, GRID};

const MAGIC: &[u8; 8] = b"TECSEQ1\0";
const VERSION: u32 = 1;

pub fn save_dataset(dataset: &TecDataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let frames = dataset.frames();
    let (space, normalized) = match frames.first() {
        Some(f) => (f.space, f.normalized),
        None => (FrameSpace::Geographic, false),
    };
    for f in frames {
        if f.space != space || f.normalized != normalized {
            return Err(DataError::Format(
                "frames disagree on space/normalization flags".into(),
            ));
        }
        if f.grid.len() != GRID * GRID {
            return Err(DataError::Format(format!(
                "frame at epoch {} is not {GRID}x{GRID}",
                f.epoch
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(frames.len() as u32).to_le_bytes())?;
    w.write_all(&(GRID as u32).to_le_bytes())?;
    w.write_all(&(GRID as u32).to_le_bytes())?;
    w.write_all(&dataset.max_train.to_le_bytes())?;
    w.write_all(&[space.tag(), u8::from(normalized)])?;
    for f in frames {
        w.write_all(&f.epoch.to_le_bytes())?;
        for v in &f.grid {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<TecDataset, DataError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(DataError::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(DataError::Format(format!(
            "unsupported version {version} (expected {VERSION})"
        )));
    }
    let n_frames = read_u32(&mut r)? as usize;
    let height = read_u32(&mut r)? as usize;
    let width = read_u32(&mut r)? as usize;
    if height != GRID || width != GRID {
        return Err(DataError::Format(format!(
            "unsupported grid {height}x{width} (expected {GRID}x{GRID})"
        )));
    }
    let mut f4 = [0u8; 4];
    read_exact(&mut r, &mut f4)?;
    let max_train = f32::from_le_bytes(f4);
    let mut flags = [0u8; 2];
    read_exact(&mut r, &mut flags)?;
    let space = FrameSpace::from_tag(flags[0])
        .ok_or_else(|| DataError::Format(format!("bad frame-space tag {}", flags[0])))?;
    let normalized = match flags[1] {
        0 => false,
        1 => true,
        other => return Err(DataError::Format(format!("bad normalized flag {other}"))),
    };

    let mut frames = Vec::with_capacity(n_frames);
    let mut buf = vec![0u8; GRID * GRID * 4];
    for _ in 0..n_frames {
        let mut e8 = [0u8; 8];
        read_exact(&mut r, &mut e8)?;
        let epoch = i64::from_le_bytes(e8);
        read_exact(&mut r, &mut buf)?;
        let grid: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        frames.push(TecMap {
            grid,
            epoch,
            space,
            normalized,
        });
    }
    // must be at end of file
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(DataError::Format("trailing bytes after frames".into()));
    }
    let mut ds = TecDataset::new(frames);
    ds.max_train = max_train;
    Ok(ds)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), DataError> {
    r.read_exact(buf)
        .map_err(|_| DataError::Format("truncated file".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::super::{synth_generate, SynthConfig};
    use super::*;

    fn small_dataset() -> TecDataset {
        let cfg = SynthConfig {
            frames: 10,
            ..SynthConfig::default()
        };
        let mut ds = TecDataset::new(synth_generate(&cfg, 7));
        ds.max_train = 55.5;
        ds
    }

    #[test]
    fn round_trip_is_exact_and_files_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.tecseq");
        let p2 = dir.path().join("b.tecseq");
        let ds = small_dataset();
        save_dataset(&ds, &p1).unwrap();
        let loaded = load_dataset(&p1).unwrap();
        assert_eq!(loaded.len(), ds.len());
        assert_eq!(loaded.max_train, ds.max_train);
        for (a, b) in ds.frames().iter().zip(loaded.frames().iter()) {
            assert_eq!(a.epoch, b.epoch);
            assert_eq!(a.grid, b.grid);
            assert_eq!(a.space, b.space);
            assert_eq!(a.normalized, b.normalized);
        }
        save_dataset(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.tecseq");
        save_dataset(&small_dataset(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] ^= 0xff;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_dataset(&p), Err(DataError::Format(m)) if m.contains("magic")));
    }

    #[test]
    fn truncation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.tecseq");
        save_dataset(&small_dataset(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_dataset(&p), Err(DataError::Format(m)) if m.contains("truncated")));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ds.tecseq");
        save_dataset(&small_dataset(), &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[8] = 9;
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_dataset(&p), Err(DataError::Format(m)) if m.contains("version")));
    }
}
