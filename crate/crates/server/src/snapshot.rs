//! Session snapshots for the browser client.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! u32 json_len | json metadata | N x 3 f32 positions | N label bytes | N provenance bytes
//! ```
//!
//! Label byte 255 marks an unlabeled point. Provenance bytes: 0 none, 1 seed, 2 grown,
//! 3 predicted, 4 corrected.

use pcal_core::labels::{ClassId, Provenance};
use pcal_core::session::{Phase, Session};
use serde::{Deserialize, Serialize};

pub const UNLABELED_BYTE: u8 = 255;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnapshotMeta {
    pub session_id: String,
    pub phase: Phase,
    pub round: usize,
    pub num_classes: usize,
    pub points: usize,
    pub clicks_total: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Metrics>,
}

impl SnapshotMeta {
    pub fn of(session: &Session, metrics: Option<Metrics>) -> Self {
        Self {
            session_id: session.id().to_string(),
            phase: session.phase(),
            round: session.round(),
            num_classes: session.num_classes(),
            points: session.cloud().len(),
            clicks_total: session.clicks().len(),
            metrics,
        }
    }
}

/// Decoded snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub meta: SnapshotMeta,
    pub positions: Vec<[f32; 3]>,
    pub labels: Vec<Option<ClassId>>,
    pub provenance: Vec<Option<Provenance>>,
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SnapshotError {
    #[error("snapshot truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("snapshot has {0} trailing bytes")]
    Trailing(usize),
    #[error("invalid snapshot metadata: {0}")]
    Meta(String),
    #[error("invalid {what} byte {value} at point {index}")]
    Byte { what: &'static str, value: u8, index: usize },
    #[error("classes above 254 cannot be encoded")]
    TooManyClasses,
}

pub fn encode_snapshot(session: &Session, metrics: Option<Metrics>) -> Result<Vec<u8>, SnapshotError> {
    let labels = session.labels();
    let snapshot = Snapshot {
        meta: SnapshotMeta::of(session, metrics),
        positions: session.cloud().positions().to_vec(),
        labels: labels.classes(),
        provenance: labels.entries().iter().map(|e| e.map(|l| l.provenance)).collect(),
    };
    encode(&snapshot)
}

pub fn encode(snapshot: &Snapshot) -> Result<Vec<u8>, SnapshotError> {
    if snapshot.meta.num_classes > usize::from(UNLABELED_BYTE) {
        return Err(SnapshotError::TooManyClasses);
    }
    let json = serde_json::to_vec(&snapshot.meta).map_err(|e| SnapshotError::Meta(e.to_string()))?;
    let n = snapshot.positions.len();
    let mut out = Vec::with_capacity(4 + json.len() + 14 * n);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in &snapshot.positions {
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for l in &snapshot.labels {
        out.push(l.map_or(UNLABELED_BYTE, |c| c as u8));
    }
    for p in &snapshot.provenance {
        out.push(p.map_or(0, Provenance::to_byte));
    }
    Ok(out)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, len: usize) -> Result<&'a [u8], SnapshotError> {
    let end = at.checked_add(len).filter(|&e| e <= bytes.len()).ok_or(SnapshotError::Truncated {
        need: at.saturating_add(len),
        have: bytes.len(),
    })?;
    let out = &bytes[*at..end];
    *at = end;
    Ok(out)
}

pub fn decode_snapshot(bytes: &[u8]) -> Result<Snapshot, SnapshotError> {
    let mut at = 0;
    let len = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().expect("4 bytes")) as usize;
    let meta: SnapshotMeta =
        serde_json::from_slice(take(bytes, &mut at, len)?).map_err(|e| SnapshotError::Meta(e.to_string()))?;
    let n = meta.points;
    if meta.num_classes > usize::from(UNLABELED_BYTE) {
        return Err(SnapshotError::TooManyClasses);
    }
    let block = take(bytes, &mut at, n.checked_mul(12).ok_or(SnapshotError::Meta("point count overflows".into()))?)?;
    let positions = block
        .chunks_exact(12)
        .map(|c| {
            let f = |k: usize| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().expect("4 bytes"));
            [f(0), f(1), f(2)]
        })
        .collect();
    let labels = take(bytes, &mut at, n)?
        .iter()
        .enumerate()
        .map(|(index, &b)| match b {
            UNLABELED_BYTE => Ok(None),
            c if usize::from(c) < meta.num_classes => Ok(Some(ClassId::from(c))),
            value => Err(SnapshotError::Byte { what: "label", value, index }),
        })
        .collect::<Result<_, _>>()?;
    let provenance = take(bytes, &mut at, n)?
        .iter()
        .enumerate()
        .map(|(index, &b)| match b {
            0 => Ok(None),
            value => Provenance::from_byte(value).map(Some).ok_or(SnapshotError::Byte { what: "provenance", value, index }),
        })
        .collect::<Result<_, _>>()?;
    if at != bytes.len() {
        return Err(SnapshotError::Trailing(bytes.len() - at));
    }
    Ok(Snapshot { meta, positions, labels, provenance })
}
