//! Class-anchor extraction and `.imlsnap` snapshot files.
//!
//! A snapshot file is one JSON document: a readable header (format tag,
//! version, backbone config, meta, tensor shapes, anchor ids and round tags,
//! SHA-256 of the payload) and a base64 payload holding every float as
//! little-endian IEEE-754 bits, params first and anchor centers last.

use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::model::{
    embed, freeze_snapshot, AnchorSet, BackboneConfig, Layer, ModelError, ModelSnapshot,
    ParamStore, SnapshotMeta,
};

pub const SNAPSHOT_FORMAT: &str = "imlsnap";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: unsupported snapshot version {found} (expected {expected})")]
    Version {
        path: String,
        found: u64,
        expected: u32,
    },
    #[error("{path}: corrupt snapshot: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("{path}: inconsistent shapes: {reason}")]
    Shape { path: String, reason: String },
    #[error("io error on {path}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mean embedding over all rows of each class, tagged with `round`.
pub fn extract_anchors(
    params: &ParamStore,
    dataset: &Dataset,
    round: u32,
) -> Result<AnchorSet, StoreError> {
    if dataset.is_empty() {
        return Err(StoreError::EmptyDataset);
    }
    let z = embed(params, dataset.features())?;
    let f = z.cols();
    let ids = dataset.class_ids();
    let mut centers = Vec::with_capacity(ids.len() * f);
    for &class in &ids {
        let rows = dataset.class_rows(class);
        let mut acc = vec![0.0; f];
        for &r in rows {
            for (a, v) in acc.iter_mut().zip(z.row(r)) {
                *a += v;
            }
        }
        centers.extend(acc.into_iter().map(|a| a / rows.len() as f64));
    }
    let centers = Tensor::matrix(ids.len(), f, centers).expect("sized above");
    Ok(AnchorSet::uniform_round(ids, centers, round)?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnchorHeader {
    class_ids: Vec<usize>,
    round_tags: Vec<u32>,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotFile {
    format: String,
    version: u32,
    config: BackboneConfig,
    meta: SnapshotMeta,
    param_shapes: Vec<Vec<usize>>,
    anchors: AnchorHeader,
    checksum: String,
    payload: String,
}

fn encode(snapshot: &ModelSnapshot) -> SnapshotFile {
    let params = snapshot.params();
    let anchors = snapshot.anchors();
    let mut bytes = Vec::with_capacity((params.num_values() + anchors.centers().numel()) * 8);
    for t in params.tensors().chain(std::iter::once(anchors.centers())) {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    SnapshotFile {
        format: SNAPSHOT_FORMAT.into(),
        version: SNAPSHOT_VERSION,
        config: snapshot.config().clone(),
        meta: snapshot.meta().clone(),
        param_shapes: params.tensors().map(|t| t.shape().to_vec()).collect(),
        anchors: AnchorHeader {
            class_ids: anchors.class_ids().to_vec(),
            round_tags: anchors.round_tags().to_vec(),
            rows: anchors.len(),
            cols: anchors.centers().cols(),
        },
        checksum: hex::encode(Sha256::digest(&bytes)),
        payload: STANDARD.encode(&bytes),
    }
}

/// Serialized snapshot document.
pub fn snapshot_to_string(snapshot: &ModelSnapshot) -> String {
    serde_json::to_string(&encode(snapshot)).expect("snapshot serializes")
}

/// Writes `snapshot` to `path` through a temporary file in the same
/// directory followed by a rename.
pub fn save_snapshot(snapshot: &ModelSnapshot, path: &Path) -> Result<(), StoreError> {
    let io = |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(snapshot_to_string(snapshot).as_bytes())
        .map_err(io)?;
    tmp.write_all(b"\n").map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

pub fn load_snapshot(path: &Path) -> Result<ModelSnapshot, StoreError> {
    let shown = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| StoreError::Io {
        path: shown.clone(),
        source,
    })?;
    snapshot_from_str(&text, &shown)
}

/// Parses a snapshot document; `origin` names the source in errors.
pub fn snapshot_from_str(text: &str, origin: &str) -> Result<ModelSnapshot, StoreError> {
    let corrupt = |reason: String| StoreError::Corrupt {
        path: origin.to_string(),
        reason,
    };
    let shape = |reason: String| StoreError::Shape {
        path: origin.to_string(),
        reason,
    };
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| corrupt(e.to_string()))?;
    if value.get("format").and_then(|v| v.as_str()) != Some(SNAPSHOT_FORMAT) {
        return Err(corrupt("missing or wrong format tag".into()));
    }
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| corrupt("missing version".into()))?;
    if version != u64::from(SNAPSHOT_VERSION) {
        return Err(StoreError::Version {
            path: origin.to_string(),
            found: version,
            expected: SNAPSHOT_VERSION,
        });
    }
    let file: SnapshotFile = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
    let bytes = STANDARD
        .decode(file.payload.as_bytes())
        .map_err(|e| corrupt(format!("payload: {e}")))?;
    if hex::encode(Sha256::digest(&bytes)) != file.checksum {
        return Err(corrupt("checksum mismatch".into()));
    }
    if bytes.len() % 8 != 0 {
        return Err(corrupt("payload length is not a multiple of 8".into()));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));

    let dims = file.config.layer_dims();
    if file.param_shapes.len() != 2 * dims.len() {
        return Err(shape(format!(
            "{} parameter tensors for {} layers",
            file.param_shapes.len(),
            dims.len()
        )));
    }
    let mut take = |shape_: &[usize]| -> Result<Tensor, StoreError> {
        let n: usize = shape_.iter().product();
        let data: Vec<f64> = values.by_ref().take(n).collect();
        if data.len() != n {
            return Err(shape(format!("payload too short for shape {shape_:?}")));
        }
        Tensor::new(shape_.to_vec(), data).map_err(|e| shape(e.to_string()))
    };
    let mut layers = Vec::with_capacity(dims.len());
    for (i, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let (ws, bs) = (&file.param_shapes[2 * i], &file.param_shapes[2 * i + 1]);
        if ws != &[fan_in, fan_out] || bs != &[fan_out] {
            return Err(shape(format!(
                "layer {i} shapes {ws:?}/{bs:?} do not match config"
            )));
        }
        layers.push(Layer {
            weight: take(ws)?,
            bias: take(bs)?,
        });
    }
    let a = &file.anchors;
    if a.class_ids.len() != a.rows || a.round_tags.len() != a.rows {
        return Err(shape("anchor ids, round tags and rows disagree".into()));
    }
    let centers = take(&[a.rows, a.cols])?;
    if values.next().is_some() {
        return Err(shape("payload longer than declared shapes".into()));
    }
    let anchors = AnchorSet::new(a.class_ids.clone(), centers, a.round_tags.clone())
        .map_err(|e| shape(e.to_string()))?;
    freeze_snapshot(
        &file.config,
        &ParamStore::from_layers(layers),
        anchors,
        file.meta,
    )
    .map_err(|e| shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_backbone;

    fn snap(classes: usize) -> ModelSnapshot {
        let config = BackboneConfig::new(3, vec![4], 2);
        let params = init_backbone(&config, 4).unwrap();
        let centers = Tensor::matrix(
            classes,
            2,
            (0..classes * 2).map(|v| v as f64 * 0.1 - 0.35).collect(),
        )
        .unwrap();
        let anchors = AnchorSet::new(
            (0..classes).map(|c| c * 3).collect(),
            centers,
            vec![1; classes],
        )
        .unwrap();
        freeze_snapshot(
            &config,
            &params,
            anchors,
            SnapshotMeta {
                seed: 4,
                round: 1,
                method: "ida".into(),
            },
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.imlsnap");
        let s = snap(5);
        save_snapshot(&s, &path).unwrap();
        let back = load_snapshot(&path).unwrap();
        assert!(back.bit_eq(&s));
        assert_eq!(back.fingerprint(), s.fingerprint());
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let text = snapshot_to_string(&snap(3));
        let cut = &text[..text.len() / 2];
        assert!(matches!(
            snapshot_from_str(cut, "t"),
            Err(StoreError::Corrupt { .. })
        ));
    }

    #[test]
    fn flipped_payload_fails_checksum() {
        let mut file = encode(&snap(3));
        let mut bytes = STANDARD.decode(&file.payload).unwrap();
        bytes[0] ^= 1;
        file.payload = STANDARD.encode(&bytes);
        let text = serde_json::to_string(&file).unwrap();
        let err = snapshot_from_str(&text, "t").unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn wrong_version_is_reported() {
        let mut file = encode(&snap(3));
        file.version = 99;
        let text = serde_json::to_string(&file).unwrap();
        assert!(matches!(
            snapshot_from_str(&text, "t"),
            Err(StoreError::Version { found: 99, .. })
        ));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut file = encode(&snap(3));
        file.anchors.rows = 4;
        let text = serde_json::to_string(&file).unwrap();
        assert!(matches!(
            snapshot_from_str(&text, "t"),
            Err(StoreError::Shape { .. })
        ));
    }

    #[test]
    fn anchors_are_class_means() {
        let config = BackboneConfig::new(2, vec![], 2);
        let p = init_backbone(&config, 1).unwrap();
        let x = Tensor::from_rows(&[vec![0.5, 1.0], vec![2.0, 0.1], vec![-1.0, 3.0]]).unwrap();
        let d = Dataset::new(x.clone(), vec![4, 9, 4], "d").unwrap();
        let a = extract_anchors(&p, &d, 0).unwrap();
        let z = embed(&p, &x).unwrap();
        assert_eq!(a.class_ids(), &[4, 9]);
        assert_eq!(a.centers().row(1), z.row(1));
        for j in 0..2 {
            assert!((a.centers().at(0, j) - (z.at(0, j) + z.at(2, j)) / 2.0).abs() < 1e-15);
        }
        let empty = Dataset::new(Tensor::zeros(vec![0, 2]), vec![], "e").unwrap();
        assert!(extract_anchors(&p, &empty, 0).is_err());
    }

    #[test]
    fn anchor_storage_is_linear_in_classes() {
        let small = snapshot_to_string(&snap(4)).len();
        let large = snapshot_to_string(&snap(40)).len();
        let per_class = (large - small) as f64 / 36.0;
        // c = 3 covers base64 expansion plus the id and round tag entries
        assert!(per_class <= 3.0 * 2.0 * 8.0, "{per_class}");
    }
}
