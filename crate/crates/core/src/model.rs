//! Domain types shared by every stage, plus the JSON Lines file formats.
//!
//! All logs start with a header line `{"format":"jumptrack/v1", ...}`
//! followed by one record per line. Readers accept files without a header.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "jumptrack/v1";

pub type LocationId = usize;
pub type TargetId = u64;

/// One detection: 2D position and feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub pos: Vector2<f64>,
    pub feat: Vector3<f64>,
}

impl Measurement {
    pub fn new(pos: [f64; 2], feat: [f64; 3]) -> Self {
        Self {
            pos: pos.into(),
            feat: feat.into(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pos.iter().chain(self.feat.iter()).all(|v| v.is_finite())
    }
}

/// Everything seen at one time step: the visited location and its detections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationFrame {
    pub k: usize,
    pub location: LocationId,
    pub measurements: Vec<Measurement>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Existence {
    Unborn,
    Alive,
    Dead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    NoJump,
    Jump,
}

/// Discrete location of a target. `Unknown` aggregates every unobserved
/// destination of a jump into a single state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Place {
    At(LocationId),
    Unknown,
}

impl Place {
    pub fn location(self) -> Option<LocationId> {
        match self {
            Place::At(l) => Some(l),
            Place::Unknown => None,
        }
    }
}

/// Which measurement of the current frame a target produced, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Association {
    None,
    Measurement(usize),
}

impl Association {
    pub fn index(self) -> Option<usize> {
        match self {
            Association::None => None,
            Association::Measurement(m) => Some(m),
        }
    }

    pub fn is_some(self) -> bool {
        matches!(self, Association::Measurement(_))
    }
}

/// Discrete state (e, u, l, c) of one target at one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiscreteState {
    pub existence: Existence,
    pub action: Action,
    pub place: Place,
    pub association: Association,
}

/// Gaussian posterior of one target: spatial block and feature block.
///
/// `spatial_known` is false after a jump with no associated measurement; the
/// position is then uniform over the target's location and `mean_s`/`cov_s`
/// carry no information.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEstimate {
    pub mean_s: Vector2<f64>,
    pub cov_s: Matrix2<f64>,
    pub mean_f: Vector3<f64>,
    pub cov_f: Matrix3<f64>,
    pub spatial_known: bool,
}

impl GaussianEstimate {
    /// Posterior after a single measurement under a flat prior.
    pub fn from_measurement(y: &Measurement, sigma_r: f64, r_f: &Matrix3<f64>) -> Self {
        Self {
            mean_s: y.pos,
            cov_s: Matrix2::identity() * (sigma_r * sigma_r),
            mean_f: y.feat,
            cov_f: *r_f,
            spatial_known: true,
        }
    }
}

/// Per-step bookkeeping kept for the learning stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum JumpKind {
    /// Left a known location (counts as a jump event).
    FromKnown,
    /// Re-entered the observed location from the aggregate unknown state.
    Reentry,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssociationRecord {
    pub measurement: usize,
    /// Filtered spatial estimate right after the update at this step.
    pub mean_s: Vector2<f64>,
    pub cov_s: Matrix2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub jump: Option<JumpKind>,
    pub association: Option<AssociationRecord>,
}

/// Persistent (structurally shared) list of a target's step records, newest
/// first. Cloning a particle copies a pointer, not the history.
#[derive(Debug, Clone, Default)]
pub struct History {
    head: Option<Arc<HistoryNode>>,
    len: usize,
}

#[derive(Debug)]
struct HistoryNode {
    record: StepRecord,
    prev: Option<Arc<HistoryNode>>,
}

impl History {
    pub fn push(&mut self, record: StepRecord) {
        let prev = self.head.take();
        self.head = Some(Arc::new(HistoryNode { record, prev }));
        self.len += 1;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Records in chronological order.
    pub fn to_vec(&self) -> Vec<StepRecord> {
        let mut out = Vec::with_capacity(self.len);
        let mut node = self.head.as_deref();
        while let Some(n) = node {
            out.push(n.record.clone());
            node = n.prev.as_deref();
        }
        out.reverse();
        out
    }
}

impl Drop for HistoryNode {
    fn drop(&mut self) {
        // unlink iteratively so long chains cannot overflow the stack
        let mut next = self.prev.take();
        while let Some(node) = next {
            match Arc::try_unwrap(node) {
                Ok(mut inner) => next = inner.prev.take(),
                Err(_) => break,
            }
        }
    }
}

/// One target inside one particle.
#[derive(Debug, Clone)]
pub struct TargetTrack {
    pub id: TargetId,
    pub born: usize,
    pub died: Option<usize>,
    pub state: DiscreteState,
    pub estimate: GaussianEstimate,
    /// Step at which `estimate.cov_s` was last brought up to date.
    pub last_update: usize,
    pub history: History,
}

impl TargetTrack {
    pub fn is_alive(&self) -> bool {
        self.died.is_none()
    }

    /// Number of steps with `e = alive`, counted up to `last_step` inclusive.
    pub fn alive_steps(&self, last_step: usize) -> usize {
        let end = self.died.map_or(last_step + 1, |d| d.min(last_step + 1));
        end.saturating_sub(self.born)
    }
}

/// One joint hypothesis over every target.
#[derive(Debug, Clone)]
pub struct Particle {
    /// Normalized log weight.
    pub log_weight: f64,
    /// Alive targets, sorted by id.
    pub targets: Vec<TargetTrack>,
    /// Dead targets, kept for learning.
    pub retired: Vec<TargetTrack>,
}

impl Particle {
    pub fn empty(log_weight: f64) -> Self {
        Self {
            log_weight,
            targets: Vec::new(),
            retired: Vec::new(),
        }
    }

    pub fn weight(&self) -> f64 {
        self.log_weight.exp()
    }

    pub fn n_alive(&self) -> usize {
        self.targets.len()
    }

    pub fn target(&self, id: TargetId) -> Option<&TargetTrack> {
        self.targets
            .binary_search_by_key(&id, |t| t.id)
            .ok()
            .map(|i| &self.targets[i])
    }

    pub fn contains_id(&self, id: TargetId) -> bool {
        self.target(id).is_some() || self.retired.iter().any(|t| t.id == id)
    }

    pub fn all_targets(&self) -> impl Iterator<Item = &TargetTrack> {
        self.targets.iter().chain(self.retired.iter())
    }
}

/// Ground truth for one object at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthObject {
    pub id: u64,
    pub alive: bool,
    pub location: LocationId,
    pub pos: Vector2<f64>,
    pub feat: Vector3<f64>,
    /// Whether the object produced a measurement at this step.
    #[serde(default)]
    pub detected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    pub k: usize,
    pub observed_location: LocationId,
    pub objects: Vec<TruthObject>,
}

/// Origin of each measurement of one frame: an object id, or `None` for clutter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceFrame {
    pub k: usize,
    pub sources: Vec<Option<u64>>,
}

/// Posterior summary of one reported target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub id: TargetId,
    pub weight: f64,
    /// Location mode; `None` means the unknown aggregate state.
    pub location: Option<LocationId>,
    pub pos: Option<[f64; 2]>,
    pub feat: [f64; 3],
}

/// Filter output for one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub k: usize,
    pub location: LocationId,
    pub n_targets: usize,
    pub targets: Vec<TargetSummary>,
    /// Identity assigned to each measurement of the frame; `None` when no
    /// particle explains it with a target.
    pub assignments: Vec<Option<TargetId>>,
    #[serde(default)]
    pub log_normalizer: f64,
}

pub type TrackReport = Vec<StepReport>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub format: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_locations: Option<usize>,
}

impl LogHeader {
    pub fn new(kind: &str) -> Self {
        Self {
            format: FORMAT_TAG.to_string(),
            kind: Some(kind.to_string()),
            n_locations: None,
        }
    }
}

/// A detection log with its optional header metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionLog {
    pub n_locations: Option<usize>,
    pub frames: Vec<ObservationFrame>,
}

impl DetectionLog {
    /// Number of locations: the header value, else one past the largest id seen.
    pub fn n_locations(&self) -> usize {
        self.n_locations.unwrap_or_else(|| {
            self.frames
                .iter()
                .map(|f| f.location + 1)
                .max()
                .unwrap_or(1)
        })
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Option<LogHeader>, Vec<(usize, T)>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = None;
    let mut items = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        if header.is_none() && items.is_empty() && trimmed.contains("\"format\"") {
            let h: LogHeader = serde_json::from_str(trimmed).map_err(|e| parse_err(e.to_string()))?;
            if h.format != FORMAT_TAG {
                return Err(parse_err(format!("unsupported format {:?}", h.format)));
            }
            header = Some(h);
            continue;
        }
        let item: T = serde_json::from_str(trimmed).map_err(|e| parse_err(e.to_string()))?;
        items.push((line_no, item));
    }
    Ok((header, items))
}

fn write_jsonl<T: Serialize>(path: &Path, header: &LogHeader, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    serde_json::to_writer(&mut out, header).map_err(|e| io(e.into()))?;
    out.write_all(b"\n").map_err(io)?;
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads a detection log: JSON Lines, one [`ObservationFrame`] per line,
/// with strictly increasing `k`.
pub fn read_detection_log(path: impl AsRef<Path>) -> Result<DetectionLog> {
    let path = path.as_ref();
    let (header, items) = read_jsonl::<ObservationFrame>(path)?;
    let mut frames = Vec::with_capacity(items.len());
    for (line, frame) in items {
        if let Some(prev) = frames.last().map(|f: &ObservationFrame| f.k) {
            if frame.k <= prev {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("non-monotone step index: k = {} after k = {prev}", frame.k),
                });
            }
        }
        if let Some(m) = frame.measurements.iter().position(|m| !m.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("measurement {m} has non-finite components"),
            });
        }
        frames.push(frame);
    }
    Ok(DetectionLog {
        n_locations: header.and_then(|h| h.n_locations),
        frames,
    })
}

pub fn write_detection_log(
    path: impl AsRef<Path>,
    frames: &[ObservationFrame],
    n_locations: Option<usize>,
) -> Result<()> {
    let header = LogHeader {
        n_locations,
        ..LogHeader::new("detections")
    };
    write_jsonl(path.as_ref(), &header, frames)
}

pub fn write_track_report(report: &[StepReport], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path.as_ref(), &LogHeader::new("track-report"), report)
}

pub fn read_track_report(path: impl AsRef<Path>) -> Result<TrackReport> {
    let (_, items) = read_jsonl(path.as_ref())?;
    Ok(items.into_iter().map(|(_, r)| r).collect())
}

pub fn write_ground_truth(frames: &[GroundTruthFrame], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path.as_ref(), &LogHeader::new("ground-truth"), frames)
}

pub fn read_ground_truth(path: impl AsRef<Path>) -> Result<Vec<GroundTruthFrame>> {
    let (_, items) = read_jsonl(path.as_ref())?;
    Ok(items.into_iter().map(|(_, r)| r).collect())
}

pub fn write_provenance(frames: &[ProvenanceFrame], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path.as_ref(), &LogHeader::new("provenance"), frames)
}

pub fn read_provenance(path: impl AsRef<Path>) -> Result<Vec<ProvenanceFrame>> {
    let (_, items) = read_jsonl(path.as_ref())?;
    Ok(items.into_iter().map(|(_, r)| r).collect())
}
