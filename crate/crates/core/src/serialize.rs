//! On-disk ciphertext format.
//!
//! A record is: layout tag (`u8`: 0 none, 1 matrix, 2 dataset, 3 image
//! column), four `u32` layout dimensions, depth `u32`, slot count `u64`,
//! then the slots as little-endian `f64`. A single-ciphertext file is the
//! magic `PHESIM01` followed by one record; a bundle is the magic
//! `PHEBND01`, a `u32` count and that many records. All integers are
//! little-endian.
//!
//! These files hold the simulator's plaintext slots, so they carry no
//! secrecy at all; file names produced by the CLI say `SIMULATED`.

use std::fs;
use std::path::Path;

use crate::engine::{Ciphertext, LayoutTag};
use crate::error::{Error, Result};

const CT_MAGIC: &[u8; 8] = b"PHESIM01";
const BUNDLE_MAGIC: &[u8; 8] = b"PHEBND01";

fn layout_fields(tag: Option<LayoutTag>) -> (u8, [u32; 4]) {
    match tag {
        None => (0, [0; 4]),
        Some(LayoutTag::Matrix { rows, cols }) => (1, [rows, cols, 0, 0]),
        Some(LayoutTag::Dataset { rows, stride, h, w }) => (2, [rows, stride, h, w]),
        Some(LayoutTag::ImageColumn { h, batch }) => (3, [h, batch, 0, 0]),
    }
}

fn push_record(out: &mut Vec<u8>, ct: &Ciphertext) {
    let (tag, dims) = layout_fields(ct.layout());
    out.push(tag);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&(ct.depth() as u32).to_le_bytes());
    out.extend_from_slice(&(ct.slot_count() as u64).to_le_bytes());
    for v in ct.raw_slots() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Ingest { path: self.path.to_path_buf(), offset: self.pos as u64, msg: msg.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos.saturating_add(n))
            .ok_or_else(|| self.err(format!("truncated: missing {what}")))?;
        self.pos += n;
        Ok(chunk)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let got = self.take(8, "magic")?;
        if got != expected {
            self.pos = 0;
            return Err(self.err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    fn record(&mut self) -> Result<Ciphertext> {
        let start = self.pos;
        let tag = self.take(1, "layout tag")?[0];
        let mut d = [0u32; 4];
        for v in &mut d {
            *v = self.u32("layout dimension")?;
        }
        let layout = match tag {
            0 => None,
            1 => Some(LayoutTag::Matrix { rows: d[0], cols: d[1] }),
            2 => Some(LayoutTag::Dataset { rows: d[0], stride: d[1], h: d[2], w: d[3] }),
            3 => Some(LayoutTag::ImageColumn { h: d[0], batch: d[1] }),
            other => {
                self.pos = start;
                return Err(self.err(format!("unknown layout tag {other}")));
            }
        };
        let depth = self.u32("depth")? as usize;
        let count = u64::from_le_bytes(self.take(8, "slot count")?.try_into().expect("8 bytes"));
        if count == 0 || !count.is_power_of_two() {
            self.pos -= 8;
            return Err(self.err(format!("invalid slot count {count}")));
        }
        let count = usize::try_from(count).map_err(|_| self.err("slot count too large"))?;
        let raw = self.take(count.saturating_mul(8), "slot data")?;
        let slots = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(Ciphertext::from_parts(slots, depth, layout))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(self.err(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn ciphertext_to_bytes(ct: &Ciphertext) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 29 + ct.slot_count() * 8);
    out.extend_from_slice(CT_MAGIC);
    push_record(&mut out, ct);
    out
}

pub fn write_ciphertext(path: &Path, ct: &Ciphertext) -> Result<()> {
    fs::write(path, ciphertext_to_bytes(ct)).map_err(|e| Error::io(path, e))
}

pub fn read_ciphertext(path: &Path) -> Result<Ciphertext> {
    let bytes = read_file(path)?;
    let mut r = Reader { path, bytes: &bytes, pos: 0 };
    r.magic(CT_MAGIC)?;
    let ct = r.record()?;
    r.finish()?;
    Ok(ct)
}

pub fn write_bundle(path: &Path, cts: &[Ciphertext]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&(cts.len() as u32).to_le_bytes());
    for ct in cts {
        push_record(&mut out, ct);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_bundle(path: &Path) -> Result<Vec<Ciphertext>> {
    let bytes = read_file(path)?;
    let mut r = Reader { path, bytes: &bytes, pos: 0 };
    r.magic(BUNDLE_MAGIC)?;
    let count = r.u32("ciphertext count")?;
    let cts = (0..count).map(|_| r.record()).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(cts)
}

/// Reject ciphertexts whose slot count differs from the engine's.
pub fn check_slots(path: &Path, cts: &[Ciphertext], slots: usize) -> Result<()> {
    if let Some(ct) = cts.iter().find(|ct| ct.slot_count() != slots) {
        return Err(Error::input(
            path,
            format!("ciphertext has {} slots but the engine is configured for {slots}", ct.slot_count()),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Backend, SimEngine};

    fn sample(e: &SimEngine) -> Ciphertext {
        let ct = e.enc(&[1.5, -0.0, f64::MIN_POSITIVE, 1e300, std::f64::consts::PI]).unwrap();
        let ct = e.mul(&ct, &ct).unwrap();
        ct.with_layout(LayoutTag::Dataset { rows: 2, stride: 4, h: 1, w: 3 })
    }

    #[test]
    fn single_round_trip_is_bit_exact() {
        let e = SimEngine::with_slots(8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.SIMULATED.ct");
        let ct = sample(&e);
        write_ciphertext(&p, &ct).unwrap();
        let back = read_ciphertext(&p).unwrap();
        assert_eq!(back.depth(), 1);
        assert_eq!(back.layout(), ct.layout());
        let bits = |c: &Ciphertext| c.raw_slots().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ct));
    }

    #[test]
    fn bundle_round_trip() {
        let e = SimEngine::with_slots(4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.SIMULATED.bundle");
        let cts = vec![e.enc(&[1.0]).unwrap(), e.enc(&[2.0, 3.0]).unwrap().with_layout(LayoutTag::Matrix { rows: 1, cols: 2 })];
        write_bundle(&p, &cts).unwrap();
        assert_eq!(read_bundle(&p).unwrap(), cts);
        assert!(read_ciphertext(&p).is_err());
    }

    #[test]
    fn corruption_is_reported_with_offset() {
        let e = SimEngine::with_slots(8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.SIMULATED.ct");
        let bytes = ciphertext_to_bytes(&sample(&e));
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        let err = read_ciphertext(&p).unwrap_err();
        assert!(matches!(err, Error::Ingest { .. }), "{err}");
        assert!(err.to_string().contains("x.SIMULATED.ct"));
        let mut bad = bytes.clone();
        bad[8] = 9;
        fs::write(&p, &bad).unwrap();
        assert!(matches!(read_ciphertext(&p), Err(Error::Ingest { offset: 8, .. })));
        fs::write(&p, b"nonsense").unwrap();
        assert!(matches!(read_ciphertext(&p), Err(Error::Ingest { offset: 0, .. })));
    }
}
