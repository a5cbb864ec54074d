//! Seeded synthetic skeleton tasks that isolate kinematic and topological cues.

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{KgsError, Result};
use crate::skeleton::{load_sequence, SkeletonSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// One joint circles at angular rate ω (class 0) or 2ω (class 1).
    SpeedDiscrimination,
    /// Which of two joints moves rigidly with joint 0.
    CorrelationTopology,
    /// One joint oscillates along X (class 0) or Y (class 1).
    TrajectoryClasses,
}

impl TaskKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "speed_discrimination" | "speed" => Ok(Self::SpeedDiscrimination),
            "correlation_topology" | "correlation" => Ok(Self::CorrelationTopology),
            "trajectory_classes" | "trajectory" => Ok(Self::TrajectoryClasses),
            other => Err(KgsError::Config(format!("unknown synthetic task `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::SpeedDiscrimination => "speed_discrimination",
            Self::CorrelationTopology => "correlation_topology",
            Self::TrajectoryClasses => "trajectory_classes",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticTaskSpec {
    pub task: TaskKind,
    #[serde(alias = "V")]
    pub joints: usize,
    #[serde(alias = "T")]
    pub frames: usize,
    pub samples_per_class: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// Base angular rate of the speed task, radians per frame.
    pub omega: f64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::SpeedDiscrimination,
            joints: 5,
            frames: 16,
            samples_per_class: 100,
            noise_std: 0.0,
            seed: 0,
            omega: 0.25,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_class < 1 {
            return Err(KgsError::Config("samples_per_class must be ≥ 1".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(KgsError::Config(format!("noise_std must be ≥ 0, got {}", self.noise_std)));
        }
        if self.frames < 2 {
            return Err(KgsError::Config("synthetic sequences need at least 2 frames".into()));
        }
        let min_joints = match self.task {
            TaskKind::CorrelationTopology => 3,
            _ => 2,
        };
        if self.joints < min_joints {
            return Err(KgsError::Config(format!(
                "{} needs at least {min_joints} joints, got {}",
                self.task.name(),
                self.joints
            )));
        }
        Ok(())
    }
}

fn sample_rng(spec: &SyntheticTaskSpec, class: usize, index: usize) -> ChaCha8Rng {
    let stream = (class as u64) << 32 | index as u64;
    ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Rest positions of joints `skip..joints` on a radius-0.25 ring; earlier entries are placeholders.
fn rest_pose(joints: usize, skip: usize) -> Vec<[f64; 3]> {
    let count = joints.saturating_sub(skip).max(1) as f64;
    (0..joints)
        .map(|j| {
            let angle = TAU * j.saturating_sub(skip) as f64 / count;
            [0.25 * angle.cos(), 0.25 * angle.sin(), if j % 2 == 0 { 0.2 } else { -0.2 }]
        })
        .collect()
}

fn jitter(rng: &mut ChaCha8Rng, noise: Option<&Normal<f64>>, p: [f64; 3]) -> [f64; 3] {
    match noise {
        Some(n) => [p[0] + n.sample(rng), p[1] + n.sample(rng), p[2] + n.sample(rng)],
        None => p,
    }
}

fn clamp_unit(p: [f64; 3]) -> [f64; 3] {
    p.map(|x| x.clamp(-1.0, 1.0))
}

fn assemble(frames: Vec<Vec<[f64; 3]>>, label: usize) -> SkeletonSequence {
    let (t, v) = (frames.len(), frames[0].len());
    let data = frames.into_iter().flatten().flatten().collect();
    SkeletonSequence::new(t, v, 3, data, Some(label)).expect("generated sequences are valid")
}

fn noise_dist(spec: &SyntheticTaskSpec) -> Option<Normal<f64>> {
    (spec.noise_std > 0.0).then(|| Normal::new(0.0, spec.noise_std).expect("finite std"))
}

/// Class `c ∈ {0, 1}`: joint 0 travels a radius-0.5 circle in the XY plane at
/// `(c+1)·ω` radians per frame from a uniformly random phase; the remaining
/// joints hold a rest pose with optional per-frame jitter.
pub fn generate_speed_task(spec: &SyntheticTaskSpec) -> Result<Vec<SkeletonSequence>> {
    spec.validate()?;
    let noise = noise_dist(spec);
    let rest = rest_pose(spec.joints, 1);
    let mut out = Vec::with_capacity(2 * spec.samples_per_class);
    for class in 0..2 {
        let rate = (class + 1) as f64 * spec.omega;
        for i in 0..spec.samples_per_class {
            let mut rng = sample_rng(spec, class, i);
            let phase = rng.gen_range(0.0..TAU);
            let frames = (0..spec.frames)
                .map(|t| {
                    let angle = phase + rate * t as f64;
                    let mut frame = vec![[0.5 * angle.cos(), 0.5 * angle.sin(), 0.0]];
                    for &p in &rest[1..] {
                        frame.push(clamp_unit(jitter(&mut rng, noise.as_ref(), p)));
                    }
                    frame
                })
                .collect();
            out.push(assemble(frames, class));
        }
    }
    Ok(out)
}

/// Smooth random path: a sum of two sinusoids per axis around `center`.
fn random_path(rng: &mut ChaCha8Rng, center: [f64; 3], amplitude: f64, frames: usize) -> Vec<[f64; 3]> {
    let params: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                rng.gen_range(0.1..0.35),
                rng.gen_range(0.0..TAU),
                rng.gen_range(0.35..0.7),
                rng.gen_range(0.0..TAU),
            ]
        })
        .collect();
    (0..frames)
        .map(|t| {
            let t = t as f64;
            let mut p = [0.0; 3];
            for (axis, [f1, p1, f2, p2]) in params.iter().enumerate() {
                p[axis] = center[axis] + amplitude * (0.6 * (f1 * t + p1).sin() + 0.4 * (f2 * t + p2).sin());
            }
            p
        })
        .collect()
}

/// Class `c ∈ {0, 1}`: joint `1 + c` is rigidly attached to joint 0 at a small
/// fixed offset while joint `2 − c` wanders independently in the opposite
/// corner of the volume; other joints hold a rest pose.
pub fn generate_correlation_task(spec: &SyntheticTaskSpec) -> Result<Vec<SkeletonSequence>> {
    spec.validate()?;
    let noise = noise_dist(spec);
    let rest = rest_pose(spec.joints, 3);
    let mut out = Vec::with_capacity(2 * spec.samples_per_class);
    for class in 0..2 {
        let (partner, loner) = (1 + class, 2 - class);
        for i in 0..spec.samples_per_class {
            let mut rng = sample_rng(spec, class, i);
            let anchor = random_path(&mut rng, [-0.4, -0.3, -0.3], 0.2, spec.frames);
            let far = random_path(&mut rng, [0.45, 0.35, 0.35], 0.2, spec.frames);
            let dir: [f64; 3] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-6);
            let offset = dir.map(|d| 0.1 * d / norm);
            let frames = (0..spec.frames)
                .map(|t| {
                    let mut frame = vec![[0.0; 3]; spec.joints];
                    frame[0] = anchor[t];
                    frame[partner] = [anchor[t][0] + offset[0], anchor[t][1] + offset[1], anchor[t][2] + offset[2]];
                    frame[loner] = far[t];
                    for (j, p) in rest.iter().enumerate().skip(3) {
                        frame[j] = *p;
                    }
                    frame
                        .into_iter()
                        .map(|p| clamp_unit(jitter(&mut rng, noise.as_ref(), p)))
                        .collect()
                })
                .collect();
            out.push(assemble(frames, class));
        }
    }
    Ok(out)
}

/// Class 0: joint 0 oscillates along X; class 1: along Y. Random phase and amplitude.
pub fn generate_trajectory_task(spec: &SyntheticTaskSpec) -> Result<Vec<SkeletonSequence>> {
    spec.validate()?;
    let noise = noise_dist(spec);
    let rest = rest_pose(spec.joints, 1);
    let mut out = Vec::with_capacity(2 * spec.samples_per_class);
    for class in 0..2 {
        for i in 0..spec.samples_per_class {
            let mut rng = sample_rng(spec, class, i);
            let phase = rng.gen_range(0.0..TAU);
            let amplitude = rng.gen_range(0.3..0.6);
            let rate = rng.gen_range(0.3..0.6);
            let frames = (0..spec.frames)
                .map(|t| {
                    let s = amplitude * (phase + rate * t as f64).sin();
                    let lead = if class == 0 { [s, 0.0, 0.0] } else { [0.0, s, 0.0] };
                    let mut frame = vec![clamp_unit(jitter(&mut rng, noise.as_ref(), lead))];
                    for &p in &rest[1..] {
                        frame.push(clamp_unit(jitter(&mut rng, noise.as_ref(), p)));
                    }
                    frame
                })
                .collect();
            out.push(assemble(frames, class));
        }
    }
    Ok(out)
}

pub fn generate(spec: &SyntheticTaskSpec) -> Result<Vec<SkeletonSequence>> {
    match spec.task {
        TaskKind::SpeedDiscrimination => generate_speed_task(spec),
        TaskKind::CorrelationTopology => generate_correlation_task(spec),
        TaskKind::TrajectoryClasses => generate_trajectory_task(spec),
    }
}

/// Seeded stratified split; each class contributes `round(n_c · train_fraction)` items to train.
pub fn split_dataset<T: Clone>(
    items: &[T],
    label: impl Fn(&T) -> usize,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(KgsError::Config(format!("train_fraction must lie in (0, 1), got {train_fraction}")));
    }
    let classes = items.iter().map(&label).max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, item) in items.iter().enumerate() {
        by_class[label(item)].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (class, members) in by_class.iter_mut().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(KgsError::Config(format!("class {class} has fewer than 2 samples")));
        }
        members.shuffle(&mut rng);
        let n_train = ((members.len() as f64 * train_fraction).round() as usize).clamp(1, members.len() - 1);
        train.extend(members[..n_train].iter().map(|&i| i));
        test.extend(members[n_train..].iter().map(|&i| i));
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((
        train.into_iter().map(|i| items[i].clone()).collect(),
        test.into_iter().map(|i| items[i].clone()).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub label: usize,
}

/// Index of a generated dataset; sample paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: Option<SyntheticTaskSpec>,
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| KgsError::io(path, e))?;
        serde_json::from_str(&text).map_err(KgsError::from_json)
    }

    /// Loads every listed sequence, resolving paths against the manifest directory.
    pub fn load_sequences(&self, manifest_path: impl AsRef<Path>) -> Result<Vec<(String, SkeletonSequence)>> {
        let base = manifest_path.as_ref().parent().map(Path::to_path_buf).unwrap_or_default();
        self.samples
            .iter()
            .map(|entry| {
                let path = base.join(&entry.path);
                let mut seq = load_sequence(&path)?;
                if seq.label.is_some_and(|l| l != entry.label) {
                    return Err(KgsError::Data(format!(
                        "{}: file label {:?} disagrees with manifest label {}",
                        path.display(),
                        seq.label,
                        entry.label
                    )));
                }
                seq.label = Some(entry.label);
                Ok((entry.path.clone(), seq))
            })
            .collect()
    }
}

/// Writes every sequence plus `manifest.json` into `dir` and returns the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, spec: &SyntheticTaskSpec, seqs: &[SkeletonSequence]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| KgsError::io(dir, e))?;
    let mut samples = Vec::with_capacity(seqs.len());
    for (i, seq) in seqs.iter().enumerate() {
        let name = format!("sample_{i:04}.json");
        seq.save(dir.join(&name))?;
        samples.push(ManifestEntry {
            path: name,
            label: seq.label.unwrap_or(0),
        });
    }
    let manifest = Manifest { spec: Some(spec.clone()), samples };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| KgsError::io(&path, e))?;
    Ok(path)
}
