//! Keypoint CSV files and the column-mapping adapter for detector exports.
//!
//! Native layout:
//!
//! ```text
//! # kinetrack.keypoints/1
//! # rig_id: synthetic-6
//! # frame_rate: 120
//! # frames: 0 100
//! # markers: l_eye,r_eye,...
//! frame,camera,marker,u,v,likelihood
//! 0,0,l_eye,1402.25,733.5,1
//! ```
//!
//! `camera` is the calibration id and `marker` a skeleton marker name.
//! The `frames` line (first frame, count) is optional; without it the run
//! spans the frames that carry rows.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::camera::CameraRig;
use crate::error::{Error, Result};
use crate::observation::{Observation, ObservationSet};
use crate::skeleton::SkeletonModel;

pub const KEYPOINT_SCHEMA: &str = "kinetrack.keypoints/1";
const COLUMNS: [&str; 6] = ["frame", "camera", "marker", "u", "v", "likelihood"];

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointHeader {
    pub rig_id: String,
    pub frame_rate: f64,
    pub marker_names: Vec<String>,
    /// (first frame, frame count).
    pub frames: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointRow {
    pub frame: usize,
    pub camera: u32,
    pub marker: String,
    pub u: f64,
    pub v: f64,
    pub likelihood: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KeypointFile {
    pub header: KeypointHeader,
    pub rows: Vec<KeypointRow>,
}

/// Source column names for each field of a long-format detector export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMapping {
    pub frame: String,
    pub camera: String,
    pub marker: String,
    pub u: String,
    pub v: String,
    /// Absent column: every row gets `default_likelihood`.
    pub likelihood: Option<String>,
    pub default_likelihood: f64,
    /// Detector label → skeleton marker name.
    pub marker_aliases: BTreeMap<String, String>,
    /// Rows whose (aliased) label is not a skeleton marker are dropped instead of rejected.
    pub skip_unknown_markers: bool,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        ColumnMapping {
            frame: "frame".into(),
            camera: "camera".into(),
            marker: "marker".into(),
            u: "u".into(),
            v: "v".into(),
            likelihood: None,
            default_likelihood: 1.0,
            marker_aliases: BTreeMap::new(),
            skip_unknown_markers: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(field: &str, what: &str, line: usize) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::parse("keypoints", format!("line {line}: bad {what} '{field}'")))
}

impl KeypointFile {
    pub fn from_observations(obs: &ObservationSet, rig: &CameraRig, marker_names: &[String]) -> Self {
        KeypointFile {
            header: KeypointHeader {
                rig_id: rig.rig_id.clone(),
                frame_rate: rig.frame_rate,
                marker_names: marker_names.to_vec(),
                frames: obs.frames.first().map(|f| (f.frame, obs.len())),
            },
            rows: obs
                .rows()
                .map(|o| KeypointRow {
                    frame: o.frame,
                    camera: rig.cameras[o.camera].id,
                    marker: marker_names[o.marker].clone(),
                    u: o.u,
                    v: o.v,
                    likelihood: o.likelihood,
                })
                .collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let h = &self.header;
        let mut out = format!(
            "# {KEYPOINT_SCHEMA}\n# rig_id: {}\n# frame_rate: {}\n",
            h.rig_id, h.frame_rate
        );
        if let Some((first, count)) = h.frames {
            out.push_str(&format!("# frames: {first} {count}\n"));
        }
        out.push_str(&format!("# markers: {}\n", h.marker_names.join(",")));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(COLUMNS).expect("in-memory csv");
        for r in &self.rows {
            w.write_record([
                r.frame.to_string(),
                r.camera.to_string(),
                r.marker.clone(),
                r.u.to_string(),
                r.v.to_string(),
                r.likelihood.to_string(),
            ])
            .expect("in-memory csv");
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8"));
        out
    }

    /// Parses the native format.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().peekable();
        match lines.next() {
            Some((_, l)) if l.trim() == format!("# {KEYPOINT_SCHEMA}") => {}
            Some((_, l)) => {
                return Err(Error::invalid(format!(
                    "keypoints: expected '# {KEYPOINT_SCHEMA}' on the first line, found '{l}'"
                )))
            }
            None => return Err(Error::invalid("keypoints: empty file")),
        }
        let mut rig_id = None;
        let mut frame_rate = None;
        let mut markers = None;
        let mut frames = None;
        let mut body_start = 1;
        while let Some((i, line)) = lines.peek().copied() {
            let Some(rest) = line.strip_prefix('#') else { break };
            lines.next();
            body_start = i + 1;
            let Some((key, value)) = rest.split_once(':') else { continue };
            let value = value.trim();
            match key.trim() {
                "rig_id" => rig_id = Some(value.to_string()),
                "frame_rate" => frame_rate = Some(parse_num::<f64>(value, "frame_rate", i + 1)?),
                "markers" => markers = Some(value.split(',').map(|s| s.trim().to_string()).collect()),
                "frames" => {
                    let mut it = value.split_whitespace();
                    let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
                        return Err(Error::parse("keypoints", format!("line {}: frames needs 'first count'", i + 1)));
                    };
                    frames = Some((parse_num(a, "first frame", i + 1)?, parse_num(b, "frame count", i + 1)?));
                }
                _ => {}
            }
        }
        let header = KeypointHeader {
            rig_id: rig_id.ok_or_else(|| Error::invalid("keypoints: missing '# rig_id:' header"))?,
            frame_rate: frame_rate.ok_or_else(|| Error::invalid("keypoints: missing '# frame_rate:' header"))?,
            marker_names: markers.ok_or_else(|| Error::invalid("keypoints: missing '# markers:' header"))?,
            frames,
        };
        let body: String = text.lines().skip(body_start).map(|l| format!("{l}\n")).collect();
        let native = ColumnMapping {
            likelihood: Some("likelihood".into()),
            ..Default::default()
        };
        let mut file = Self::parse_with_mapping(&body, &native, header)?;
        // Native files carry exactly the canonical columns.
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        let cols: Vec<String> = rdr
            .headers()
            .map_err(|e| Error::parse("keypoints", e))?
            .iter()
            .map(str::to_string)
            .collect();
        if cols != COLUMNS {
            return Err(Error::invalid(format!(
                "keypoints: expected columns {}, found {}",
                COLUMNS.join(","),
                cols.join(",")
            )));
        }
        file.rows.sort_by(|a, b| (a.frame, a.camera, &a.marker).cmp(&(b.frame, b.camera, &b.marker)));
        Ok(file)
    }

    /// Reads a long-format CSV (one detection per row) with arbitrary column
    /// names. Header metadata that the export lacks is supplied by the caller.
    pub fn parse_with_mapping(text: &str, mapping: &ColumnMapping, header: KeypointHeader) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let heads = rdr.headers().map_err(|e| Error::parse("keypoints", e))?.clone();
        let col = |name: &str| {
            heads
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::invalid(format!("keypoints: missing column '{name}'")))
        };
        let (fi, ci, mi, ui, vi) = (
            col(&mapping.frame)?,
            col(&mapping.camera)?,
            col(&mapping.marker)?,
            col(&mapping.u)?,
            col(&mapping.v)?,
        );
        let li = mapping.likelihood.as_deref().map(col).transpose()?;
        let known: std::collections::HashSet<&str> = header.marker_names.iter().map(String::as_str).collect();
        let mut rows = Vec::new();
        for (n, rec) in rdr.records().enumerate() {
            let line = n + 2;
            let rec = rec.map_err(|e| Error::parse("keypoints", format!("line {line}: {e}")))?;
            let label = &rec[mi];
            let marker = mapping.marker_aliases.get(label).map_or(label, String::as_str);
            if !known.contains(marker) {
                if mapping.skip_unknown_markers {
                    continue;
                }
                return Err(Error::invalid(format!(
                    "keypoints: line {line}: marker '{marker}' is not declared in the header"
                )));
            }
            rows.push(KeypointRow {
                frame: parse_num(&rec[fi], "frame", line)?,
                camera: parse_num(&rec[ci], "camera", line)?,
                marker: marker.to_string(),
                u: parse_num(&rec[ui], "u", line)?,
                v: parse_num(&rec[vi], "v", line)?,
                likelihood: match li {
                    Some(i) => parse_num(&rec[i], "likelihood", line)?,
                    None => mapping.default_likelihood,
                },
            });
        }
        Ok(KeypointFile { header, rows })
    }

    /// Resolves names and camera ids against the rig and skeleton.
    pub fn to_observations(&self, rig: &CameraRig, model: &SkeletonModel) -> Result<ObservationSet> {
        let h = &self.header;
        if h.rig_id != rig.rig_id {
            return Err(Error::invalid(format!(
                "keypoints: rig id '{}' does not match calibration '{}'",
                h.rig_id, rig.rig_id
            )));
        }
        if (h.frame_rate - rig.frame_rate).abs() > 1e-9 * rig.frame_rate {
            return Err(Error::invalid(format!(
                "keypoints: frame rate {} does not match calibration {}",
                h.frame_rate, rig.frame_rate
            )));
        }
        for name in &h.marker_names {
            if model.marker_index(name).is_none() {
                return Err(Error::invalid(format!("keypoints: unknown marker '{name}'")));
            }
        }
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let camera = rig.camera_index(r.camera).ok_or_else(|| {
                    Error::invalid(format!("keypoints: camera id {} is not in rig '{}'", r.camera, rig.rig_id))
                })?;
                let marker = model
                    .marker_index(&r.marker)
                    .ok_or_else(|| Error::invalid(format!("keypoints: unknown marker '{}'", r.marker)))?;
                Ok(Observation {
                    frame: r.frame,
                    camera,
                    marker,
                    u: r.u,
                    v: r.v,
                    likelihood: r.likelihood,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut set = ObservationSet::from_rows(rows, rig.len(), model.markers.len())?;
        if let Some((first, count)) = h.frames {
            if let Some(r) = self.rows.iter().find(|r| r.frame < first || r.frame >= first + count) {
                return Err(Error::invalid(format!(
                    "keypoints: frame {} falls outside the declared frames {first}..{}",
                    r.frame,
                    first + count
                )));
            }
            let mut full = ObservationSet::with_frames(rig.len(), model.markers.len(), first, count);
            for f in set.frames.drain(..) {
                let pos = f.frame - first;
                full.frames[pos] = f;
            }
            set = full;
        }
        Ok(set)
    }
}
