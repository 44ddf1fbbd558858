//! Binary dataset container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MSTD" | version u32 | num_sequences u32 | H u32 | W u32 | C u32 |
//!   num_sequences x ( L u32 | variant u8 | timestamps f64[L] | labels u8[L] | images f32[L*H*W*C] )
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, SequenceSample};
use crate::error::{Error, Result};
use crate::tensor::checkpoint::ByteReader;

pub const DATASET_MAGIC: &[u8; 4] = b"MSTD";
pub const DATASET_VERSION: u32 = 1;

fn dim(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::data(format!("{what} {value} does not fit in u32")))
}

pub fn write_dataset<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    for (v, what) in [
        (ds.sequences.len(), "sequence count"),
        (ds.height, "height"),
        (ds.width, "width"),
        (ds.channels, "channels"),
    ] {
        w.write_all(&dim(v, what)?.to_le_bytes())?;
    }
    let img = ds.image_len();
    for (i, seq) in ds.sequences.iter().enumerate() {
        let l = seq.len();
        if seq.labels.len() != l || seq.images.len() != l || seq.images.iter().any(|im| im.len() != img) {
            return Err(Error::data(format!("sequence {i} has inconsistent lengths")));
        }
        w.write_all(&dim(l, "sequence length")?.to_le_bytes())?;
        w.write_all(&[u8::from(seq.variant)])?;
        for t in &seq.timestamps {
            w.write_all(&t.to_le_bytes())?;
        }
        w.write_all(&seq.labels)?;
        let mut bytes = Vec::with_capacity(img * 4);
        for image in &seq.images {
            bytes.clear();
            for p in image {
                bytes.extend_from_slice(&p.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Parses a whole dataset; any malformation yields a format error carrying
/// the byte offset and no partial result.
pub fn read_dataset<R: Read>(r: R) -> Result<Dataset> {
    let mut cur = ByteReader::new(r);
    let magic = cur.bytes(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(cur.error_at(0, format!("bad magic {magic:?}")));
    }
    let version = cur.u32("version")?;
    if version != DATASET_VERSION {
        return Err(cur.error_at(4, format!("unsupported version {version}")));
    }
    let count = cur.u32("sequence count")? as usize;
    let height = cur.u32("height")? as usize;
    let width = cur.u32("width")? as usize;
    let channels = cur.u32("channels")? as usize;
    if height == 0 || width == 0 || channels == 0 {
        return Err(cur.error_at(12, "zero image dimension"));
    }
    let img = height * width * channels;
    let mut sequences = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let l = cur.u32("sequence length")? as usize;
        let at = cur.offset;
        let variant = match cur.u8("variant flag")? {
            0 => false,
            1 => true,
            other => return Err(cur.error_at(at, format!("variant flag {other} is not 0 or 1"))),
        };
        let at = cur.offset;
        let mut timestamps = Vec::with_capacity(l);
        for _ in 0..l {
            timestamps.push(cur.f64("timestamps")?);
        }
        if timestamps.iter().any(|t| !t.is_finite()) || timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(cur.error_at(at, "timestamps are not finite and strictly increasing"));
        }
        let labels = cur.bytes(l, "labels")?;
        let mut images = Vec::with_capacity(l);
        for _ in 0..l {
            let raw = cur.bytes(img * 4, "images")?;
            images.push(
                raw.chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect(),
            );
        }
        sequences.push(SequenceSample {
            timestamps,
            images,
            labels,
            variant,
        });
    }
    if !cur.at_end()? {
        return Err(cur.error_at(cur.offset, "trailing bytes after last sequence"));
    }
    Ok(Dataset {
        height,
        width,
        channels,
        sequences,
    })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), ds)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    read_dataset(BufReader::new(File::open(path)?))
}
