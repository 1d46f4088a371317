//! Line-delimited JSON files for trajectories and embeddings, and the
//! dataset manifest.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::embedding::{EmbeddedPoint, Embedding};
use crate::error::{Error, Result};
use crate::generator::{Dataset, DatasetSpec};
use crate::partition::DatasetPartition;
use crate::trajectory::{Trajectory, TrajectoryStore};

pub const TRAJECTORY_FILE: &str = "trajectories.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Rounds to `digits` significant decimal digits.
pub fn round_sig(x: f64, digits: usize) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{:.*e}", digits.saturating_sub(1), x).parse().unwrap_or(x)
}

fn rounded(t: &Trajectory) -> Trajectory {
    Trajectory {
        frames: t.frames.iter().map(|f| f.map(|v| round_sig(v, 9))).collect(),
        ..t.clone()
    }
}

fn format_err(path: &Path, reason: impl ToString) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.to_string(),
    }
}

fn write_lines<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

/// One trajectory per line, values rounded to 9 significant digits.
pub fn write_trajectories<'a>(path: &Path, trajectories: impl IntoIterator<Item = &'a Trajectory>) -> Result<()> {
    write_lines(path, trajectories.into_iter().map(rounded))
}

/// Reads and validates a trajectory file.
pub fn read_trajectories(path: &Path) -> Result<TrajectoryStore> {
    let mut store = TrajectoryStore::new();
    for t in read_lines::<Trajectory>(path)? {
        t.validate()?;
        store.insert(t)?;
    }
    Ok(store)
}

pub fn write_embedding(path: &Path, embedding: &Embedding) -> Result<()> {
    write_lines(path, embedding.points())
}

pub fn read_embedding(path: &Path) -> Result<Embedding> {
    Embedding::from_points(read_lines::<EmbeddedPoint>(path)?)
}

/// Two-column numeric text with a comment header.
pub fn write_trace(path: &Path, header: &str, values: &[f64]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# {header}")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(w, "{i} {v:.10e}")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DatasetSpec,
    pub partition: DatasetPartition,
}

/// Writes `trajectories.jsonl` and `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_trajectories(&dir.join(TRAJECTORY_FILE), dataset.store.iter())?;
    let manifest = Manifest {
        spec: dataset.spec.clone(),
        partition: dataset.partition.clone(),
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset`]; every partition id must
/// name a stored trajectory.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(&mpath)?).map_err(|e| format_err(&mpath, e))?;
    let store = read_trajectories(&dir.join(TRAJECTORY_FILE))?;
    let p = &manifest.partition;
    for id in p.annotated().iter().chain(p.unlabeled()).chain(p.test()) {
        if store.get(*id).is_err() {
            return Err(format_err(&mpath, format!("partition names unknown trajectory {id}")));
        }
    }
    Ok(Dataset {
        spec: manifest.spec,
        store,
        partition: manifest.partition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::generate_dataset;

    #[test]
    fn nine_significant_digits() {
        assert_eq!(round_sig(1.0 / 7.0, 9), 0.142857143);
        assert_eq!(round_sig(-0.000123456789123, 9), -0.000123456789);
        assert_eq!(round_sig(0.0, 9), 0.0);
        assert_eq!(round_sig(123456789012.0, 9), 123456789000.0);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&DatasetSpec::new(10, (10, 40, 20), 3)).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.partition, ds.partition);
        assert_eq!(back.spec, ds.spec);
        for t in ds.store.iter() {
            let b = back.store.get(t.id).unwrap();
            assert_eq!((b.label, b.variant, b.len()), (t.label, t.variant, t.len()));
            for (fa, fb) in t.frames.iter().zip(&b.frames) {
                for (x, y) in fa.iter().zip(fb) {
                    assert!((x - y).abs() <= 1e-8 * x.abs().max(1e-300));
                }
            }
        }
        // A second write of what was read is byte-identical.
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(dir2.path(), &back).unwrap();
        assert_eq!(
            fs::read(dir.path().join(TRAJECTORY_FILE)).unwrap(),
            fs::read(dir2.path().join(TRAJECTORY_FILE)).unwrap()
        );
    }

    #[test]
    fn overlapping_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_dataset(&DatasetSpec::new(33, (3, 3, 3), 0)).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let first = v["partition"]["test"][0].clone();
        v["partition"]["annotated"].as_array_mut().unwrap().push(first);
        fs::write(&path, v.to_string()).unwrap();
        assert!(read_dataset(dir.path()).is_err());
    }

    #[test]
    fn malformed_line_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        fs::write(&path, "{\"id\":0,\"frames\":[[0,0,0],[1,1,1]],\"label\":null,\"variant\":null}\nnot json\n").unwrap();
        match read_trajectories(&path) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("line 2")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn embedding_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.jsonl");
        let pts = (0..5)
            .map(|i| EmbeddedPoint {
                id: crate::trajectory::TrajId(i),
                tag: crate::embedding::EmbeddingTag::MTsne,
                coords: vec![i as f64 * 0.1, -1.0 / (i as f64 + 3.0)],
            })
            .collect();
        let e = Embedding::from_points(pts).unwrap();
        write_embedding(&path, &e).unwrap();
        assert_eq!(read_embedding(&path).unwrap(), e);
    }
}
