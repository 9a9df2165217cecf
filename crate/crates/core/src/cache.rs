//! Preprocessed-recording cache: raw little-endian `f32` samples plus a
//! JSON sidecar carrying labels, rate and the event list.

use crate::dsp::Recording;
use crate::edf::ScoredEvent;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CacheError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad sidecar: {0}")]
    Sidecar(#[from] serde_json::Error),
    #[error("cache size mismatch: sidecar declares {want} samples, file holds {got}")]
    SizeMismatch { want: usize, got: usize },
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    labels: Vec<String>,
    fs: f64,
    num_samples: usize,
    events: Vec<ScoredEvent>,
}

pub fn bin_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.f32"))
}

pub fn sidecar_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.json"))
}

pub fn save_recording(dir: &Path, id: &str, rec: &Recording) -> Result<(), CacheError> {
    std::fs::create_dir_all(dir)?;
    let sidecar = Sidecar {
        labels: rec.labels.clone(),
        fs: rec.fs,
        num_samples: rec.num_samples,
        events: rec.events.clone(),
    };
    std::fs::write(
        sidecar_path(dir, id),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    let mut bytes = Vec::with_capacity(rec.channels.len() * 4);
    for v in &rec.channels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(bin_path(dir, id), bytes)?;
    Ok(())
}

pub fn load_recording(dir: &Path, id: &str) -> Result<Recording, CacheError> {
    let sidecar: Sidecar =
        serde_json::from_str(&std::fs::read_to_string(sidecar_path(dir, id))?)?;
    let bytes = std::fs::read(bin_path(dir, id))?;
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let want = sidecar.labels.len() * sidecar.num_samples;
    if values.len() != want {
        return Err(CacheError::SizeMismatch {
            want,
            got: values.len(),
        });
    }
    Ok(Recording {
        labels: sidecar.labels,
        fs: sidecar.fs,
        channels: values,
        num_samples: sidecar.num_samples,
        events: sidecar.events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording {
            labels: vec!["C3-M2".into(), "Leg EMG".into()],
            fs: 128.0,
            channels: (0..64).map(|i| (i as f32 * 0.317).sin()).collect(),
            num_samples: 32,
            events: vec![ScoredEvent::new(1, 3.5, 2.0)],
        };
        save_recording(dir.path(), "rec-01", &rec).unwrap();
        let back = load_recording(dir.path(), "rec-01").unwrap();
        assert_eq!(back.labels, rec.labels);
        assert_eq!(back.events, rec.events);
        let bits_a: Vec<u32> = rec.channels.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u32> = back.channels.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn truncated_cache_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording {
            labels: vec!["a".into()],
            fs: 128.0,
            channels: vec![0.0; 16],
            num_samples: 16,
            events: vec![],
        };
        save_recording(dir.path(), "x", &rec).unwrap();
        let bin = bin_path(dir.path(), "x");
        let bytes = std::fs::read(&bin).unwrap();
        std::fs::write(&bin, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_recording(dir.path(), "x"),
            Err(CacheError::SizeMismatch { .. })
        ));
    }
}
