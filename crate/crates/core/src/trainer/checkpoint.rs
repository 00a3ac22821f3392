//! Checkpoint files: a text header (version, iteration, config, scene,
//! tensor manifest) followed by little-endian `f32` payload in manifest
//! order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dsk::{CanonicalKernel, DskParams};
use crate::error::{Error, Result};
use crate::field::RadianceFieldParams;
use crate::nn::Parameters;
use crate::renderer::{Camera, Intrinsics};
use crate::synth::format_pose;

use super::adam::{Adam, Moments};
use super::config::TrainConfig;
use super::{Model, SceneInfo};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "blurfield-checkpoint";
const PAYLOAD_MARK: &str = "[payload]\n";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: usize,
    pub config: TrainConfig,
    pub scene: SceneInfo,
    pub model: Model,
    pub adam: Adam,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    /// Every stored tensor: parameters, then first and second moments.
    fn manifest(&self) -> Vec<(String, Vec<usize>, &[f32])> {
        let params = self.model.named_tensors();
        let mut out: Vec<(String, Vec<usize>, &[f32])> =
            params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec(), t.data())).collect();
        for (kind, pick) in [("m", 0usize), ("v", 1)] {
            for ((n, t), st) in params.iter().zip(&self.adam.moments) {
                let data: &[f32] = if pick == 0 { &st.m } else { &st.v };
                out.push((format!("adam.{kind}.{n}"), t.shape().to_vec(), data));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut h = String::new();
        let w = &mut h;
        let line = |w: &mut String, s: String| writeln!(w, "{s}").expect("string write");
        line(w, format!("{MAGIC} {CHECKPOINT_VERSION}"));
        line(w, format!("iteration = {}", self.iteration));
        line(w, format!("adam_step = {}", self.adam.step));
        line(w, "[config]".into());
        w.push_str(&self.config.to_text());
        line(w, "[scene]".into());
        let i = self.scene.intrinsics;
        line(w, format!("intrinsics = {} {} {} {} {} {}", i.fx, i.fy, i.cx, i.cy, i.width, i.height));
        line(w, format!("near = {}", self.scene.near));
        line(w, format!("far = {}", self.scene.far));
        line(w, format!("position_scale = {}", self.scene.position_scale));
        for cam in &self.scene.train_cameras {
            line(w, format!("pose = {}", format_pose(cam)));
        }
        if let Some(d) = &self.model.dsk {
            line(w, "[kernel]".into());
            for p in &d.canonical.points {
                line(w, format!("point = {} {}", p[0], p[1]));
            }
        }
        line(w, "[tensors]".into());
        let manifest = self.manifest();
        for (name, shape, _) in &manifest {
            let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
            line(w, format!("{name} = {}", dims.join(" ")));
        }
        h.push_str(PAYLOAD_MARK);
        let mut bytes = h.into_bytes();
        for (_, _, data) in &manifest {
            for v in *data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        bytes
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mark = PAYLOAD_MARK.as_bytes();
        let split = bytes
            .windows(mark.len())
            .position(|w| w == mark)
            .ok_or_else(|| err("truncated header"))?;
        let header = std::str::from_utf8(&bytes[..split]).map_err(|_| err("header is not UTF-8"))?;
        let payload = &bytes[split + mark.len()..];
        let header = Header::parse(header)?;

        let config = TrainConfig::parse(Path::new("<checkpoint config>"), &header.config)
            .map_err(|e| err(format!("config: {e}")))?;
        let scene = header.scene()?;
        let field = RadianceFieldParams::zeros(config.field_config(scene.position_scale))?;
        let dsk = if header.kernel_points.is_empty() {
            None
        } else {
            let canonical = CanonicalKernel {
                points: header.kernel_points.clone(),
            };
            Some(DskParams::zeros(
                config.dsk_config(scene.depth_range()),
                scene.train_cameras.len(),
                canonical,
            )?)
        };
        if dsk.is_some() != config.dsk_enabled {
            return Err(err("kernel section does not match dsk_enabled"));
        }
        let model = Model { field, dsk };
        let lens: Vec<usize> = model.named_tensors().iter().map(|(_, t)| t.len()).collect();
        let mut ckpt = Checkpoint {
            iteration: header.iteration,
            config,
            scene,
            adam: Adam {
                step: header.adam_step,
                moments: lens.iter().map(|&n| Moments::zeros(n)).collect(),
            },
            model,
        };

        let expected: Vec<(String, Vec<usize>)> =
            ckpt.manifest().into_iter().map(|(n, s, _)| (n, s)).collect();
        if expected.len() != header.tensors.len() {
            return Err(err(format!(
                "manifest lists {} tensors, model needs {}",
                header.tensors.len(),
                expected.len()
            )));
        }
        for ((en, es), (n, s)) in expected.iter().zip(&header.tensors) {
            if en != n || es != s {
                return Err(err(format!("tensor {n} {s:?} does not match expected {en} {es:?}")));
            }
        }
        let total: usize = expected.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        if payload.len() != total * 4 {
            return Err(err(format!(
                "payload holds {} bytes, manifest needs {}",
                payload.len(),
                total * 4
            )));
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let mut fill = |dst: &mut [f32]| {
            for d in dst {
                *d = values.next().expect("length checked");
            }
        };
        for (_, t) in ckpt.model.named_tensors_mut() {
            fill(t.data_mut());
        }
        for st in &mut ckpt.adam.moments {
            fill(&mut st.m);
        }
        for st in &mut ckpt.adam.moments {
            fill(&mut st.v);
        }
        Ok(ckpt)
    }

    /// Writes through a temporary file so a crash never leaves a partial
    /// checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[derive(Default)]
struct Header {
    iteration: usize,
    adam_step: u64,
    config: String,
    intrinsics: Option<Intrinsics>,
    near: Option<f64>,
    far: Option<f64>,
    position_scale: Option<f32>,
    poses: Vec<Vec<f64>>,
    kernel_points: Vec<[f64; 2]>,
    tensors: Vec<(String, Vec<usize>)>,
}

fn reals(v: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let out = v
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| err(format!("bad {what}: {v:?}")))?;
    if out.len() != n {
        return Err(err(format!("{what} needs {n} values, got {}", out.len())));
    }
    Ok(out)
}

impl Header {
    fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let first = lines.next().ok_or_else(|| err("empty header"))?;
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .ok_or_else(|| err("not a checkpoint file"))?;
        if version != CHECKPOINT_VERSION.to_string() {
            return Err(err(format!(
                "version {version} is not supported (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut h = Header::default();
        let mut section = "";
        for line in lines {
            if line.starts_with('[') {
                section = match line {
                    "[config]" => "config",
                    "[scene]" => "scene",
                    "[kernel]" => "kernel",
                    "[tensors]" => "tensors",
                    other => return Err(err(format!("unknown section {other}"))),
                };
                continue;
            }
            if section == "config" {
                h.config.push_str(line);
                h.config.push('\n');
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(format!("malformed header line {line:?}")))?;
            let bad = || err(format!("bad value in {line:?}"));
            match (section, k) {
                ("", "iteration") => h.iteration = v.parse().map_err(|_| bad())?,
                ("", "adam_step") => h.adam_step = v.parse().map_err(|_| bad())?,
                ("scene", "intrinsics") => {
                    let r = reals(v, 6, "intrinsics")?;
                    h.intrinsics = Some(Intrinsics {
                        fx: r[0],
                        fy: r[1],
                        cx: r[2],
                        cy: r[3],
                        width: r[4] as usize,
                        height: r[5] as usize,
                    });
                }
                ("scene", "near") => h.near = Some(v.parse().map_err(|_| bad())?),
                ("scene", "far") => h.far = Some(v.parse().map_err(|_| bad())?),
                ("scene", "position_scale") => h.position_scale = Some(v.parse().map_err(|_| bad())?),
                ("scene", "pose") => h.poses.push(reals(v, 12, "pose")?),
                ("kernel", "point") => {
                    let r = reals(v, 2, "kernel point")?;
                    h.kernel_points.push([r[0], r[1]]);
                }
                ("tensors", name) => {
                    let shape = v
                        .split_whitespace()
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<Vec<_>, _>>()
                        .map_err(|_| bad())?;
                    h.tensors.push((name.to_string(), shape));
                }
                _ => return Err(err(format!("unexpected header line {line:?}"))),
            }
        }
        Ok(h)
    }

    fn scene(&self) -> Result<SceneInfo> {
        let intrinsics = self.intrinsics.ok_or_else(|| err("missing intrinsics"))?;
        let cams = self
            .poses
            .iter()
            .map(|v| {
                let rot = [[v[0], v[1], v[2]], [v[4], v[5], v[6]], [v[8], v[9], v[10]]];
                Camera::new(rot, [v[3], v[7], v[11]], intrinsics)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneInfo {
            intrinsics,
            near: self.near.ok_or_else(|| err("missing near"))?,
            far: self.far.ok_or_else(|| err("missing far"))?,
            position_scale: self.position_scale.ok_or_else(|| err("missing position_scale"))?,
            train_cameras: cams,
        })
    }
}
