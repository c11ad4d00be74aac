//! Per-subject recording container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! u32  subject_id length   | UTF-8 subject id
//! f64  rate_hz
//! u32  n_channels
//! per channel: u32 name length | UTF-8 name | u64 sample count
//! per channel, in header order: f32 samples
//! ```
//!
//! A JSON sidecar (`<file>.json`) mirrors the header for humans and other
//! tools; the binary file alone is authoritative.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Channel, PsgIoError, Recording};

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    subject_id: String,
    rate_hz: f64,
    channels: Vec<SidecarChannel>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SidecarChannel {
    name: String,
    n_samples: u64,
}

fn unreadable(path: &Path, reason: impl Into<String>) -> PsgIoError {
    PsgIoError::Unreadable { path: path.display().to_string(), reason: reason.into() }
}

/// Writes a recording container plus its JSON sidecar. Samples are stored as
/// little-endian `f32`.
pub fn write_recording(path: &Path, rec: &Recording) -> Result<(), PsgIoError> {
    let file = File::create(path)
        .map_err(|e| PsgIoError::Io { path: path.display().to_string(), source: e })?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| PsgIoError::Io { path: path.display().to_string(), source: e };

    let id = rec.subject_id.as_bytes();
    w.write_all(&(id.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(id).map_err(io)?;
    w.write_all(&rec.rate_hz.to_le_bytes()).map_err(io)?;
    w.write_all(&(rec.channels().len() as u32).to_le_bytes()).map_err(io)?;
    for ch in rec.channels() {
        let name = ch.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(name).map_err(io)?;
        w.write_all(&(ch.samples.len() as u64).to_le_bytes()).map_err(io)?;
    }
    for ch in rec.channels() {
        let mut buf = Vec::with_capacity(ch.samples.len() * 4);
        for &v in &ch.samples {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    w.flush().map_err(io)?;

    let sidecar = Sidecar {
        subject_id: rec.subject_id.clone(),
        rate_hz: rec.rate_hz,
        channels: rec
            .channels()
            .iter()
            .map(|c| SidecarChannel { name: c.name.clone(), n_samples: c.samples.len() as u64 })
            .collect(),
    };
    let sidecar_path = sidecar_path(path);
    std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar).unwrap())
        .map_err(|e| PsgIoError::Io { path: sidecar_path.display().to_string(), source: e })?;
    Ok(())
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    os.into()
}

/// Reads a recording container. Channel names and order are preserved
/// verbatim; samples come back as `f64` (exact, since they are stored as
/// `f32`).
pub fn read_recording(path: &Path) -> Result<Recording, PsgIoError> {
    let file = File::open(path)
        .map_err(|e| unreadable(path, format!("cannot open: {e}")))?;
    let mut r = BufReader::new(file);

    let subject_id = read_string(&mut r, path)?;
    let rate_hz = f64::from_le_bytes(read_array(&mut r, path)?);
    if !(rate_hz.is_finite() && rate_hz > 0.0) {
        return Err(unreadable(path, format!("invalid rate {rate_hz}")));
    }
    let n_channels = u32::from_le_bytes(read_array(&mut r, path)?) as usize;
    if n_channels == 0 {
        return Err(PsgIoError::Empty { path: path.display().to_string() });
    }
    if n_channels > 4096 {
        return Err(unreadable(path, format!("implausible channel count {n_channels}")));
    }

    let mut headers = Vec::with_capacity(n_channels);
    for _ in 0..n_channels {
        let name = read_string(&mut r, path)?;
        let count = u64::from_le_bytes(read_array(&mut r, path)?);
        if count > (1 << 34) {
            return Err(unreadable(path, format!("implausible sample count {count}")));
        }
        headers.push((name, count as usize));
    }

    let mut channels = Vec::with_capacity(n_channels);
    for (name, count) in headers {
        let mut buf = vec![0u8; count * 4];
        r.read_exact(&mut buf)
            .map_err(|e| unreadable(path, format!("truncated samples for {name}: {e}")))?;
        let samples: Vec<f64> = buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        channels.push(Channel { name, samples });
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(|e| unreadable(path, e.to_string()))? != 0 {
        return Err(unreadable(path, "trailing bytes after last channel"));
    }

    Ok(Recording::new(subject_id, rate_hz, channels))
}

fn read_string<R: Read>(r: &mut R, path: &Path) -> Result<String, PsgIoError> {
    let len = u32::from_le_bytes(read_array(r, path)?) as usize;
    if len > (1 << 20) {
        return Err(unreadable(path, format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|e| unreadable(path, format!("truncated string: {e}")))?;
    String::from_utf8(buf).map_err(|e| unreadable(path, format!("invalid UTF-8: {e}")))
}

fn read_array<R: Read, const N: usize>(r: &mut R, path: &Path) -> Result<[u8; N], PsgIoError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| unreadable(path, format!("truncated header: {e}")))?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn quantized(v: f64) -> f64 {
        v as f32 as f64
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("s0001.psg");
        let channels = vec![
            Channel {
                name: "C3".into(),
                samples: (0..256 * 4).map(|i| quantized((i as f64 * 0.01).sin() * 40.0)).collect(),
            },
            Channel {
                name: "ECG-I".into(),
                samples: (0..256 * 4).map(|i| quantized((i as f64 * 0.21).cos())).collect(),
            },
        ];
        let rec = Recording::new("s0001", 256.0, channels);
        write_recording(&path, &rec).unwrap();
        let back = read_recording(&path).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.channel_names(), vec!["C3", "ECG-I"]);
        // Writing what was read reproduces the exact file.
        let path2 = dir.path().join("copy.psg");
        write_recording(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn zero_channels_is_empty_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.psg");
        let rec = Recording::new("nobody", 100.0, vec![]);
        write_recording(&path, &rec).unwrap();
        match read_recording(&path) {
            Err(PsgIoError::Empty { .. }) => {}
            other => panic!("expected Empty, got {other:?}"),
        }
    }

    #[test]
    fn garbage_is_unreadable() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("garbage.psg");
        std::fs::write(&path, b"not a container at all").unwrap();
        match read_recording(&path) {
            Err(PsgIoError::Unreadable { .. }) => {}
            other => panic!("expected Unreadable, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_unreadable() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.psg");
        let rec = Recording::new(
            "s1",
            10.0,
            vec![Channel { name: "C3".into(), samples: vec![1.0; 100] }],
        );
        write_recording(&path, &rec).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(read_recording(&path), Err(PsgIoError::Unreadable { .. })));
    }
}
