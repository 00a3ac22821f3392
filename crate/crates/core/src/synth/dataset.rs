//! Multi-view dataset generation and the on-disk layout.
//!
//! ```text
//! intrinsics.txt      fx fy cx cy width height
//! poses_train.txt     one 3×4 camera-to-world matrix per line, row-major
//! poses_test.txt
//! train/NNN.png       blurry inputs, gamma encoded
//! test_sharp/NNN.png  sharp ground truth, gamma encoded
//! meta.txt            key = value
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::renderer::{Camera, Intrinsics, Mat3, Vec3};

use super::degrade::{synth_defocus_blur, synth_motion_blur, DefocusBlurSpec, DefocusRange, MotionBlurSpec, MotionRange};
use super::scene::{render_reference, AnalyticScene};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlurKind {
    None,
    Motion,
    Defocus,
}

impl BlurKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BlurKind::None => "none",
            BlurKind::Motion => "motion",
            BlurKind::Defocus => "defocus",
        }
    }
}

impl FromStr for BlurKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(BlurKind::None),
            "motion" => Ok(BlurKind::Motion),
            "defocus" => Ok(BlurKind::Defocus),
            other => Err(Error::invalid(format!("unknown blur type {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub scene: String,
    pub blur: BlurKind,
    pub train_views: usize,
    pub test_views: usize,
    pub width: usize,
    pub height: usize,
    pub seed: u64,
    /// Marching steps of the reference renderer.
    pub steps: usize,
    pub fov_x_deg: f64,
    pub orbit_radius: f64,
    pub motion: MotionRange,
    pub defocus: DefocusRange,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scene: "blobs".into(),
            blur: BlurKind::Motion,
            train_views: 16,
            test_views: 4,
            width: 64,
            height: 64,
            seed: 0,
            steps: 256,
            fov_x_deg: 40.0,
            orbit_radius: 4.0,
            motion: MotionRange::default(),
            defocus: DefocusRange::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub near: f64,
    pub far: f64,
    pub blur: BlurKind,
    pub seed: u64,
    pub scene: String,
}

/// Cameras and gamma-encoded images of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub intrinsics: Intrinsics,
    pub train_cameras: Vec<Camera>,
    pub train_images: Vec<Image>,
    pub test_cameras: Vec<Camera>,
    pub test_images: Vec<Image>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn near(&self) -> f64 {
        self.meta.near
    }

    pub fn far(&self) -> f64 {
        self.meta.far
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_cameras.len() != self.train_images.len() || self.test_cameras.len() != self.test_images.len() {
            return Err(Error::invalid("camera and image counts differ"));
        }
        if self.train_cameras.is_empty() {
            return Err(Error::invalid("dataset has no training views"));
        }
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        if let Some(img) = self
            .train_images
            .iter()
            .chain(&self.test_images)
            .find(|i| i.width() != w || i.height() != h)
        {
            return Err(Error::invalid(format!(
                "image is {}x{}, intrinsics say {w}x{h}",
                img.width(),
                img.height()
            )));
        }
        Ok(())
    }
}

/// Sub-stream of the dataset seed for one purpose.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Orbit camera at `azimuth`/`elevation` (degrees) looking at the origin
/// with world up `+z`.
pub fn orbit_camera(radius: f64, azimuth_deg: f64, elevation_deg: f64, intrinsics: Intrinsics) -> Result<Camera> {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let center = [radius * el.cos() * az.cos(), radius * el.cos() * az.sin(), radius * el.sin()];
    Camera::look_at(center, [0.0; 3], [0.0, 0.0, 1.0], intrinsics)
}

/// Training views spread over the upper hemisphere; test views sit at
/// azimuths between them.
pub fn view_rig(cfg: &SynthConfig) -> Result<(Vec<Camera>, Vec<Camera>)> {
    let intr = Intrinsics::from_fov(cfg.width, cfg.height, cfg.fov_x_deg);
    let mut rng = stream(cfg.seed, 1);
    let k = cfg.train_views as f64;
    let train = (0..cfg.train_views)
        .map(|i| {
            let az = 360.0 * (i as f64 + rng.gen_range(-0.2..0.2)) / k;
            let el = 20.0 + 30.0 * ((i as f64 * 0.618_034) % 1.0);
            orbit_camera(cfg.orbit_radius, az, el, intr)
        })
        .collect::<Result<Vec<_>>>()?;
    let t = cfg.test_views.max(1) as f64;
    let test = (0..cfg.test_views)
        .map(|j| {
            let az = 360.0 * (j as f64 + 0.5) / t + 180.0 / k;
            orbit_camera(cfg.orbit_radius, az, 35.0, intr)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((train, test))
}

/// Renders a dataset: blurry training views and sharp test views, both
/// gamma encoded and quantized to 8 bits.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.train_views == 0 || cfg.width == 0 || cfg.height == 0 {
        return Err(Error::invalid("dataset needs at least one training view and a nonzero resolution"));
    }
    let scene = AnalyticScene::preset(&cfg.scene, &mut stream(cfg.seed, 0))?;
    let (train_cameras, test_cameras) = view_rig(cfg)?;
    let mut blur_rng = stream(cfg.seed, 2);
    let encode = |img: Image| img.gamma_encoded().quantized();
    let mut train_images = Vec::with_capacity(train_cameras.len());
    for cam in &train_cameras {
        let linear = match cfg.blur {
            BlurKind::None => render_reference(&scene, cam, cfg.steps)?,
            BlurKind::Motion => {
                let spec = MotionBlurSpec::sample(&cfg.motion, &mut blur_rng);
                synth_motion_blur(&scene, cam, &spec, cfg.steps)?
            }
            BlurKind::Defocus => {
                let spec = DefocusBlurSpec::sample(&cfg.defocus, &mut blur_rng);
                synth_defocus_blur(&scene, cam, &spec, cfg.steps)?
            }
        };
        train_images.push(encode(linear));
    }
    let test_images = test_cameras
        .iter()
        .map(|cam| render_reference(&scene, cam, cfg.steps).map(encode))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        intrinsics: train_cameras[0].intrinsics(),
        train_cameras,
        train_images,
        test_cameras,
        test_images,
        meta: DatasetMeta {
            near: scene.near,
            far: scene.far,
            blur: cfg.blur,
            seed: cfg.seed,
            scene: cfg.scene.clone(),
        },
    })
}

pub fn format_pose(cam: &Camera) -> String {
    let r = &cam.rotation;
    let c = cam.center;
    let vals = [
        r[0][0], r[0][1], r[0][2], c[0], r[1][0], r[1][1], r[1][2], c[1], r[2][0], r[2][1], r[2][2], c[2],
    ];
    vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn write_poses(path: &Path, cameras: &[Camera]) -> Result<()> {
    let mut s = String::new();
    for cam in cameras {
        writeln!(s, "{}", format_pose(cam)).expect("string write");
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_reals(path: &Path, line_no: usize, line: &str, expect: usize) -> Result<Vec<f64>> {
    let vals = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::parse(path, line_no, format!("not a number: {t:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != expect {
        return Err(Error::parse(path, line_no, format!("expected {expect} values, found {}", vals.len())));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::parse(path, line_no, "non-finite value"));
    }
    Ok(vals)
}

pub fn read_intrinsics(path: &Path) -> Result<Intrinsics> {
    let text = read_text(path)?;
    let (no, line) = text
        .lines()
        .enumerate()
        .find(|(_, l)| !l.trim().is_empty())
        .ok_or_else(|| Error::parse(path, 1, "empty intrinsics file"))?;
    let v = parse_reals(path, no + 1, line, 6)?;
    let dim = |x: f64| {
        if x >= 1.0 && x.fract() == 0.0 {
            Ok(x as usize)
        } else {
            Err(Error::parse(path, no + 1, format!("bad image dimension {x}")))
        }
    };
    Ok(Intrinsics {
        fx: v[0],
        fy: v[1],
        cx: v[2],
        cy: v[3],
        width: dim(v[4])?,
        height: dim(v[5])?,
    })
}

/// One camera per non-empty line of a pose file.
pub fn read_poses(path: &Path, intrinsics: Intrinsics) -> Result<Vec<Camera>> {
    let text = read_text(path)?;
    let mut cams = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = parse_reals(path, i + 1, line, 12)?;
        let rotation: Mat3 = [[v[0], v[1], v[2]], [v[4], v[5], v[6]], [v[8], v[9], v[10]]];
        let center: Vec3 = [v[3], v[7], v[11]];
        let cam = Camera::new(rotation, center, intrinsics)
            .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
        cams.push(cam);
    }
    Ok(cams)
}

/// `key = value` lines; `#` starts a comment.
pub fn parse_key_values(path: &Path, text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, i + 1, format!("expected `key = value`, got {line:?}")))?;
        out.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let text = read_text(path)?;
    let (mut near, mut far, mut blur, mut seed, mut scene) = (None, None, None, None, None);
    for (line, k, v) in parse_key_values(path, &text)? {
        let bad = |what: &str| Error::parse(path, line, format!("bad {what} {v:?}"));
        match k.as_str() {
            "near" => near = Some(v.parse::<f64>().map_err(|_| bad("near"))?),
            "far" => far = Some(v.parse::<f64>().map_err(|_| bad("far"))?),
            "blur_type" => blur = Some(v.parse::<BlurKind>().map_err(|_| bad("blur_type"))?),
            "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad("seed"))?),
            "scene" => scene = Some(v.clone()),
            _ => {}
        }
    }
    let missing = |k: &str| Error::parse(path, 0, format!("missing key {k}"));
    let meta = DatasetMeta {
        near: near.ok_or_else(|| missing("near"))?,
        far: far.ok_or_else(|| missing("far"))?,
        blur: blur.ok_or_else(|| missing("blur_type"))?,
        seed: seed.ok_or_else(|| missing("seed"))?,
        scene: scene.ok_or_else(|| missing("scene"))?,
    };
    if !(meta.near > 0.0 && meta.near < meta.far) {
        return Err(Error::parse(path, 0, format!("bad bounds {}..{}", meta.near, meta.far)));
    }
    Ok(meta)
}

fn image_name(i: usize) -> String {
    format!("{i:03}.png")
}

fn write_images(dir: &Path, images: &[Image]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, img) in images.iter().enumerate() {
        img.save_png(&dir.join(image_name(i)))?;
    }
    Ok(())
}

fn read_images(dir: &Path, count: usize) -> Result<Vec<Image>> {
    (0..count).map(|i| Image::load_png(&dir.join(image_name(i)))).collect()
}

/// Writes the dataset into a temporary sibling directory and renames it
/// into place, so `out` never holds a partial dataset. An existing dataset
/// at `out` is replaced; any other non-empty directory is an error.
pub fn write_dataset(dataset: &Dataset, out: &Path) -> Result<()> {
    dataset.validate()?;
    if out.exists() {
        let is_dataset = out.join("meta.txt").is_file();
        let empty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_none();
        if !is_dataset && !empty {
            return Err(Error::invalid(format!(
                "{} exists and is not a dataset directory",
                out.display()
            )));
        }
    }
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let name = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = parent.join(format!(".{name}.partial-{}", std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    let result = write_into(dataset, &tmp).and_then(|()| {
        if out.exists() {
            fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
        }
        fs::rename(&tmp, out).map_err(|e| Error::io(out, e))
    });
    if result.is_err() {
        let _ = fs::remove_dir_all(&tmp);
    }
    result
}

fn write_into(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let i = dataset.intrinsics;
    let path = dir.join("intrinsics.txt");
    fs::write(&path, format!("{} {} {} {} {} {}\n", i.fx, i.fy, i.cx, i.cy, i.width, i.height))
        .map_err(|e| Error::io(&path, e))?;
    write_poses(&dir.join("poses_train.txt"), &dataset.train_cameras)?;
    write_poses(&dir.join("poses_test.txt"), &dataset.test_cameras)?;
    write_images(&dir.join("train"), &dataset.train_images)?;
    write_images(&dir.join("test_sharp"), &dataset.test_images)?;
    let m = &dataset.meta;
    let path = dir.join("meta.txt");
    let text = format!(
        "near = {}\nfar = {}\nblur_type = {}\nseed = {}\nscene = {}\n",
        m.near,
        m.far,
        m.blur.as_str(),
        m.seed,
        m.scene
    );
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let intrinsics = read_intrinsics(&dir.join("intrinsics.txt"))?;
    let train_cameras = read_poses(&dir.join("poses_train.txt"), intrinsics)?;
    let test_path = dir.join("poses_test.txt");
    let test_cameras = if test_path.exists() {
        read_poses(&test_path, intrinsics)?
    } else {
        Vec::new()
    };
    let meta = read_meta(&dir.join("meta.txt"))?;
    let train_images = read_images(&dir.join("train"), train_cameras.len())?;
    let test_images = read_images(&dir.join("test_sharp"), test_cameras.len())?;
    let ds = Dataset {
        intrinsics,
        train_cameras,
        train_images,
        test_cameras,
        test_images,
        meta,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(blur: BlurKind, seed: u64) -> SynthConfig {
        SynthConfig {
            blur,
            train_views: 3,
            test_views: 2,
            width: 12,
            height: 10,
            seed,
            steps: 64,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn round_trip() {
        let ds = generate_dataset(&tiny(BlurKind::Motion, 3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        write_dataset(&ds, &out).unwrap();
        let back = read_dataset(&out).unwrap();
        assert_eq!(back.meta, ds.meta);
        assert_eq!(back.intrinsics, ds.intrinsics);
        for (a, b) in ds.train_cameras.iter().chain(&ds.test_cameras).zip(back.train_cameras.iter().chain(&back.test_cameras)) {
            assert_eq!(a, b);
        }
        // images are already quantized, so they survive exactly
        assert_eq!(back.train_images, ds.train_images);
        assert_eq!(back.test_images, ds.test_images);
        // rewriting over an existing dataset is allowed
        write_dataset(&ds, &out).unwrap();
    }

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_dataset(&tiny(BlurKind::Defocus, 9)).unwrap();
        let b = generate_dataset(&tiny(BlurKind::Defocus, 9)).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&tiny(BlurKind::Defocus, 10)).unwrap();
        assert_ne!(a.train_images, c.train_images);
    }

    #[test]
    fn missing_intrinsics_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("intrinsics.txt"), "{err}");
    }

    #[test]
    fn malformed_pose_reports_line() {
        let ds = generate_dataset(&tiny(BlurKind::None, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("d");
        write_dataset(&ds, &out).unwrap();
        let p = out.join("poses_train.txt");
        let mut text = fs::read_to_string(&p).unwrap();
        text.push_str("1 2 3\n");
        fs::write(&p, text).unwrap();
        match read_dataset(&out).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 4),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn refuses_to_clobber_foreign_directory() {
        let ds = generate_dataset(&tiny(BlurKind::None, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("notes.txt"), "keep").unwrap();
        assert!(write_dataset(&ds, dir.path()).is_err());
        assert!(dir.path().join("notes.txt").exists());
    }

    #[test]
    fn key_values_skip_comments() {
        let kv = parse_key_values(Path::new("x"), "# header\na = 1 # trailing\n\nb=two\n").unwrap();
        assert_eq!(kv, vec![(2, "a".into(), "1".into()), (4, "b".into(), "two".into())]);
        assert!(parse_key_values(Path::new("x"), "oops\n").is_err());
    }
}
