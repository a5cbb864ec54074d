//! Skeleton sequences: file loading, per-frame normalization and velocities.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KgsError, Result};

/// A single-person skeleton sequence stored as a dense `T×V×C` array.
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    frames: usize,
    joints: usize,
    channels: usize,
    positions: Vec<f64>,
    pub label: Option<usize>,
}

impl SkeletonSequence {
    pub fn new(
        frames: usize,
        joints: usize,
        channels: usize,
        positions: Vec<f64>,
        label: Option<usize>,
    ) -> Result<Self> {
        if !(channels == 2 || channels == 3) {
            return Err(KgsError::Field {
                field: "C".into(),
                message: format!("expected 2 or 3 coordinate channels, got {channels}"),
            });
        }
        if frames < 2 {
            return Err(KgsError::Shape(format!(
                "sequence needs at least 2 frames, got {frames}"
            )));
        }
        if joints == 0 {
            return Err(KgsError::Field {
                field: "V".into(),
                message: "at least one joint is required".into(),
            });
        }
        if positions.len() != frames * joints * channels {
            return Err(KgsError::Dimension(format!(
                "payload holds {} values but T×V×C = {}×{}×{} = {}",
                positions.len(),
                frames,
                joints,
                channels,
                frames * joints * channels
            )));
        }
        if let Some(idx) = positions.iter().position(|x| !x.is_finite()) {
            let c = idx % channels;
            let v = (idx / channels) % joints;
            let t = idx / (channels * joints);
            return Err(KgsError::Data(format!(
                "non-finite coordinate {} at frame {t}, joint {v}, channel {c}",
                positions[idx]
            )));
        }
        Ok(Self {
            frames,
            joints,
            channels,
            positions,
            label,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    /// Coordinates of joint `v` at frame `t`.
    pub fn joint(&self, t: usize, v: usize) -> &[f64] {
        let start = (t * self.joints + v) * self.channels;
        &self.positions[start..start + self.channels]
    }

    /// Applies `f` to every coordinate, keeping the shape.
    pub fn map_coords(&self, mut f: impl FnMut(usize, f64) -> f64) -> Result<Self> {
        let channels = self.channels;
        let positions = self
            .positions
            .iter()
            .enumerate()
            .map(|(i, &x)| f(i % channels, x))
            .collect();
        Self::new(self.frames, self.joints, channels, positions, self.label)
    }

    /// Serializes to the skeleton file format, one frame per line.
    pub fn to_json(&self) -> String {
        let mut out = String::new();
        let _ = write!(
            out,
            "{{\n  \"T\": {},\n  \"V\": {},\n  \"C\": {},\n",
            self.frames, self.joints, self.channels
        );
        if let Some(label) = self.label {
            let _ = writeln!(out, "  \"label\": {label},");
        }
        out.push_str("  \"frames\": [\n");
        for t in 0..self.frames {
            let frame: Vec<&[f64]> = (0..self.joints).map(|v| self.joint(t, v)).collect();
            let line = serde_json::to_string(&frame).expect("finite coordinates serialize");
            let sep = if t + 1 == self.frames { "" } else { "," };
            let _ = writeln!(out, "    {line}{sep}");
        }
        out.push_str("  ]\n}\n");
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| KgsError::io(path, e))
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(untagged)]
enum Coord {
    Number(f64),
    Text(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonFile {
    #[serde(rename = "T")]
    frames: usize,
    #[serde(rename = "V")]
    joints: usize,
    #[serde(rename = "C")]
    channels: usize,
    #[serde(default)]
    label: Option<usize>,
    #[serde(rename = "frames")]
    data: Vec<Vec<Vec<Coord>>>,
}

/// Quotes bare `NaN` / `Infinity` tokens (as written by many JSON encoders)
/// so they surface as data errors instead of syntax errors.
fn quote_non_finite_tokens(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut in_string = false;
    let mut escaped = false;
    let mut rest = text;
    while let Some(ch) = rest.chars().next() {
        if in_string {
            out.push(ch);
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_string = false;
            }
            rest = &rest[ch.len_utf8()..];
            continue;
        }
        if ch == '"' {
            in_string = true;
            out.push(ch);
            rest = &rest[1..];
            continue;
        }
        let token = ["-Infinity", "Infinity", "NaN"]
            .into_iter()
            .find(|tok| rest.starts_with(tok));
        if let Some(tok) = token {
            out.push('"');
            out.push_str(tok);
            out.push('"');
            rest = &rest[tok.len()..];
        } else {
            out.push(ch);
            rest = &rest[ch.len_utf8()..];
        }
    }
    out
}

/// Parses the skeleton file format from a string.
pub fn parse_sequence(text: &str) -> Result<SkeletonSequence> {
    let text = quote_non_finite_tokens(text);
    let file: SkeletonFile = serde_json::from_str(&text).map_err(KgsError::from_json)?;
    if file.data.len() != file.frames {
        return Err(KgsError::Dimension(format!(
            "header declares T={} but `frames` holds {} frames",
            file.frames,
            file.data.len()
        )));
    }
    let mut positions = Vec::with_capacity(file.frames * file.joints * file.channels);
    for (t, frame) in file.data.into_iter().enumerate() {
        if frame.len() != file.joints {
            return Err(KgsError::Dimension(format!(
                "frame {t} holds {} joints, header declares V={}",
                frame.len(),
                file.joints
            )));
        }
        for (v, joint) in frame.into_iter().enumerate() {
            if joint.len() != file.channels {
                return Err(KgsError::Dimension(format!(
                    "frame {t}, joint {v} holds {} coordinates, header declares C={}",
                    joint.len(),
                    file.channels
                )));
            }
            for (c, coord) in joint.into_iter().enumerate() {
                let value = match coord {
                    Coord::Number(x) => x,
                    Coord::Text(s) => s.trim().parse::<f64>().map_err(|_| KgsError::Field {
                        field: format!("frames[{t}][{v}][{c}]"),
                        message: format!("`{s}` is not a number"),
                    })?,
                };
                positions.push(value);
            }
        }
    }
    SkeletonSequence::new(
        file.frames,
        file.joints,
        file.channels,
        positions,
        file.label,
    )
}

/// Loads and validates a skeleton file.
pub fn load_sequence(path: impl AsRef<Path>) -> Result<SkeletonSequence> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| KgsError::io(path, e))?;
    parse_sequence(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationParams {
    /// Half extent of the box the content is scaled into.
    pub target_half_extent: f64,
    /// Frames whose bounding radius falls below this are only centered.
    pub epsilon_radius: f64,
}

impl Default for NormalizationParams {
    fn default() -> Self {
        Self {
            target_half_extent: 0.8,
            epsilon_radius: 1e-8,
        }
    }
}

/// Centers every frame on the mean of its joints and scales it so the
/// farthest joint sits at distance `target_half_extent` from the origin.
pub fn normalize_sequence(
    seq: &SkeletonSequence,
    params: &NormalizationParams,
) -> Result<SkeletonSequence> {
    let s = params.target_half_extent;
    if !(s > 0.0 && s <= 1.0) {
        return Err(KgsError::Config(format!(
            "target_half_extent must lie in (0, 1], got {s}"
        )));
    }
    let (v_count, c_count) = (seq.joints, seq.channels);
    let mut out = seq.positions.clone();
    for frame in out.chunks_mut(v_count * c_count) {
        let mut center = [0.0; 3];
        for joint in frame.chunks(c_count) {
            for (acc, x) in center.iter_mut().zip(joint) {
                *acc += x;
            }
        }
        center.iter_mut().for_each(|c| *c /= v_count as f64);
        let mut radius: f64 = 0.0;
        for joint in frame.chunks_mut(c_count) {
            for (x, c) in joint.iter_mut().zip(&center) {
                *x -= c;
            }
            radius = radius.max(joint.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
        if radius < params.epsilon_radius {
            frame.iter_mut().for_each(|x| *x = 0.0);
        } else {
            let scale = s / radius;
            frame.iter_mut().for_each(|x| *x *= scale);
        }
    }
    SkeletonSequence::new(seq.frames, v_count, c_count, out, seq.label)
}

/// Normalized positions together with forward-difference velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicSequence {
    frames: usize,
    joints: usize,
    channels: usize,
    positions: Vec<f64>,
    velocities: Vec<f64>,
    pub label: Option<usize>,
}

impl KinematicSequence {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn velocities(&self) -> &[f64] {
        &self.velocities
    }

    pub fn position(&self, t: usize, v: usize) -> &[f64] {
        let start = (t * self.joints + v) * self.channels;
        &self.positions[start..start + self.channels]
    }

    pub fn velocity(&self, t: usize, v: usize) -> &[f64] {
        let start = (t * self.joints + v) * self.channels;
        &self.velocities[start..start + self.channels]
    }

    /// The same sequence with every velocity set to zero.
    pub fn with_zero_velocity(&self) -> Self {
        Self {
            velocities: vec![0.0; self.velocities.len()],
            ..self.clone()
        }
    }
}

/// Forward differences `x[t+1] - x[t]`; the last frame repeats the
/// previous velocity.
pub fn compute_velocity(seq: &SkeletonSequence) -> Result<KinematicSequence> {
    if seq.frames < 2 {
        return Err(KgsError::Shape(format!(
            "velocity needs at least 2 frames, got {}",
            seq.frames
        )));
    }
    let stride = seq.joints * seq.channels;
    let p = &seq.positions;
    let mut velocities = vec![0.0; p.len()];
    for t in 0..seq.frames - 1 {
        for i in 0..stride {
            velocities[t * stride + i] = p[(t + 1) * stride + i] - p[t * stride + i];
        }
    }
    let last = (seq.frames - 1) * stride;
    velocities.copy_within(last - stride..last, last);
    Ok(KinematicSequence {
        frames: seq.frames,
        joints: seq.joints,
        channels: seq.channels,
        positions: p.clone(),
        velocities,
        label: seq.label,
    })
}

/// Load → normalize → differentiate.
pub fn prepare(seq: &SkeletonSequence, params: &NormalizationParams) -> Result<KinematicSequence> {
    compute_velocity(&normalize_sequence(seq, params)?)
}
