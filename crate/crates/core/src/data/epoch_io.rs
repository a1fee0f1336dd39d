//! `EPOC1` little-endian epoch files.
//!
//! ```text
//! 0..6   magic "EPOC1\0"
//!        u32 n_trials, u32 n_channels, u32 n_samples, f32 fs, u32 n_classes
//!        n_trials x u32 labels
//!        n_trials * n_channels * n_samples x f32, trial-major, then channel
//! ```
//! Channel names are not stored; readers assign [`default_channel_names`].

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{default_channel_names, EpochSet};
use crate::error::{Error, Result};

pub const EPOCH_MAGIC: &[u8; 6] = b"EPOC1\0";

pub fn write_epochs_to<W: Write>(mut w: W, e: &EpochSet) -> std::io::Result<()> {
    w.write_all(EPOCH_MAGIC)?;
    for v in [e.n_trials, e.n_channels, e.n_samples] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    w.write_all(&e.fs.to_le_bytes())?;
    w.write_all(&(e.n_classes as u32).to_le_bytes())?;
    for &l in &e.labels {
        w.write_all(&l.to_le_bytes())?;
    }
    for &v in &e.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

pub fn write_epochs(path: &Path, e: &EpochSet) -> Result<()> {
    e.validate()?;
    let f = File::create(path).map_err(|err| Error::io(path, err))?;
    write_epochs_to(BufWriter::new(f), e).map_err(|err| Error::io(path, err))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn word(&mut self, field: &'static str) -> Result<[u8; 4]> {
        let bytes = self
            .buf
            .get(self.pos..self.pos + 4)
            .ok_or(Error::TruncatedHeader { field })?;
        self.pos += 4;
        Ok(bytes.try_into().expect("4 bytes"))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        self.word(field).map(u32::from_le_bytes)
    }
}

pub fn read_epochs_from(bytes: &[u8]) -> Result<EpochSet> {
    let magic = bytes.get(..6).unwrap_or(bytes);
    if magic != EPOCH_MAGIC {
        return Err(Error::BadMagic {
            found: magic.to_vec(),
        });
    }
    let mut cur = Cursor { buf: bytes, pos: 6 };
    let n_trials = cur.u32("n_trials")? as usize;
    let n_channels = cur.u32("n_channels")? as usize;
    let n_samples = cur.u32("n_samples")? as usize;
    let fs = f32::from_le_bytes(cur.word("fs")?);
    let n_classes = cur.u32("n_classes")?;

    if n_channels < 2 {
        return Err(Error::InvalidHeader {
            field: "n_channels",
            reason: format!("{n_channels} (at least 2 required)"),
        });
    }
    if !(fs > 0.0) || !fs.is_finite() {
        return Err(Error::InvalidHeader {
            field: "fs",
            reason: format!("{fs} is not a positive sampling rate"),
        });
    }
    if n_classes == 0 {
        return Err(Error::InvalidHeader {
            field: "n_classes",
            reason: "0".into(),
        });
    }

    let n_values = n_trials
        .checked_mul(n_channels)
        .and_then(|v| v.checked_mul(n_samples))
        .ok_or(Error::InvalidHeader {
            field: "n_samples",
            reason: "trial x channel x sample count overflows".into(),
        })?;
    let expected = (n_trials + n_values) * 4;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: payload.len(),
        });
    }
    let words = |range: std::ops::Range<usize>| {
        payload[range]
            .chunks_exact(4)
            .map(|c| <[u8; 4]>::try_from(c).expect("4 bytes"))
    };
    let labels: Vec<u32> = words(0..n_trials * 4).map(u32::from_le_bytes).collect();
    if let Some((trial, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
        return Err(Error::LabelOutOfRange {
            trial,
            label,
            n_classes,
        });
    }
    let data = words(n_trials * 4..expected).map(f32::from_le_bytes).collect();
    Ok(EpochSet {
        n_trials,
        n_channels,
        n_samples,
        n_classes: n_classes as usize,
        fs,
        data,
        labels,
        channel_names: default_channel_names(n_channels),
    })
}

pub fn read_epochs(path: &Path) -> Result<EpochSet> {
    let f = File::open(path).map_err(|err| Error::io(path, err))?;
    let mut bytes = Vec::new();
    BufReader::new(f)
        .read_to_end(&mut bytes)
        .map_err(|err| Error::io(path, err))?;
    read_epochs_from(&bytes)
}
