//! Images, scene manifests and run configuration files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Frame, Split};
use crate::error::{Error, Result};
use crate::geom::Aabb;
use crate::metrics::{linear_to_srgb, srgb_to_linear};
use crate::renderer::Camera;
use crate::scene::SyntheticSpec;
use crate::superres::SrConfig;
use crate::trainer::{preset, TrainConfig};
use crate::wavelet::Plane;

/// Decodes a PNG to linear RGB. Alpha is composited over `background`.
pub fn read_png(path: &Path, background: [f64; 3]) -> Result<Plane> {
    let img = image::open(path)
        .map_err(|e| Error::Load(format!("{}: {e}", path.display())))?
        .to_rgba8();
    let (w, h) = img.dimensions();
    Ok(Plane::from_fn(h as usize, w as usize, 3, |y, x, c| {
        let p = img.get_pixel(x as u32, y as u32);
        let a = p[3] as f64 / 255.0;
        srgb_to_linear(p[c] as f64 / 255.0) * a + background[c] * (1.0 - a)
    }))
}

/// Encodes a linear RGB plane as an 8-bit sRGB PNG.
pub fn write_png(path: &Path, img: &Plane) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", img.channels())));
    }
    let (h, w, _) = img.shape();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let t = img.texel(y as usize, x as usize);
        image::Rgb([quantize(t[0]), quantize(t[1]), quantize(t[2])])
    });
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    buf.save(path)?;
    Ok(())
}

fn quantize(v: f64) -> u8 {
    (linear_to_srgb(v) * 255.0).round() as u8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub file_path: String,
    pub transform_matrix: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

/// `transforms.json` layout. `fl_x`, `near`, `far` and `aabb` are optional extensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub camera_angle_x: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fl_x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub near: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub far: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aabb: Option<[[f64; 3]; 2]>,
    pub frames: Vec<ManifestFrame>,
}

const DEFAULT_NEAR: f64 = 2.0;
const DEFAULT_FAR: f64 = 6.0;
const DEFAULT_HALF_EXTENT: f64 = 1.5;

/// Loads a dataset from a manifest file, or from a directory holding either
/// `transforms.json` or `transforms_{train,val,test}.json`.
pub fn load_scene(path: &Path) -> Result<Dataset> {
    let mut manifests: Vec<(PathBuf, Option<Split>)> = Vec::new();
    if path.is_dir() {
        let single = path.join("transforms.json");
        if single.is_file() {
            manifests.push((single, None));
        } else {
            for (name, split) in [("train", Split::Train), ("val", Split::Val), ("test", Split::Test)] {
                let p = path.join(format!("transforms_{name}.json"));
                if p.is_file() {
                    manifests.push((p, Some(split)));
                }
            }
        }
        if manifests.is_empty() {
            return Err(Error::Load(format!("no transforms*.json in {}", path.display())));
        }
    } else {
        manifests.push((path.to_path_buf(), None));
    }
    let mut frames = Vec::new();
    let mut bbox = None;
    for (file, split) in manifests {
        let text = std::fs::read_to_string(&file).map_err(|e| Error::Load(format!("{}: {e}", file.display())))?;
        let manifest: SceneManifest =
            serde_json::from_str(&text).map_err(|e| Error::Load(format!("{}: {e}", file.display())))?;
        if let Some([min, max]) = manifest.aabb {
            bbox = Some(Aabb { min, max });
        }
        let base = file.parent().unwrap_or(Path::new("."));
        load_frames(&manifest, base, split, &mut frames)?;
    }
    if frames.is_empty() {
        return Err(Error::Load("manifest lists no frames".into()));
    }
    Dataset::new(frames, bbox.unwrap_or(Aabb::cube(DEFAULT_HALF_EXTENT))).map_err(|e| Error::Load(e.to_string()))
}

fn load_frames(manifest: &SceneManifest, base: &Path, split: Option<Split>, out: &mut Vec<Frame>) -> Result<()> {
    for (i, f) in manifest.frames.iter().enumerate() {
        let mut file = base.join(&f.file_path);
        if !file.is_file() && file.extension().is_none() {
            file.set_extension("png");
        }
        if !file.is_file() {
            return Err(Error::Load(format!("frame {i}: missing image {}", file.display())));
        }
        let image = read_png(&file, [1.0; 3])?;
        let c2w = matrix4(&f.transform_matrix).map_err(|e| Error::Load(format!("frame {i}: {e}")))?;
        let focal = manifest
            .fl_x
            .unwrap_or(0.5 * image.width() as f64 / (0.5 * manifest.camera_angle_x).tan());
        let camera = Camera::new(
            focal,
            image.width(),
            image.height(),
            c2w,
            manifest.near.unwrap_or(DEFAULT_NEAR),
            manifest.far.unwrap_or(DEFAULT_FAR),
        )
        .map_err(|e| Error::Load(format!("frame {i} ({}): {e}", f.file_path)))?;
        out.push(Frame {
            id: out.len(),
            image,
            camera,
            split: f.split.or(split).unwrap_or(Split::Train),
        });
    }
    Ok(())
}

fn matrix4(rows: &[Vec<f64>]) -> Result<[[f64; 4]; 4]> {
    if rows.len() != 4 || rows.iter().any(|r| r.len() != 4) {
        return Err(Error::Load("transform_matrix must be 4x4".into()));
    }
    let mut m = [[0.0; 4]; 4];
    for (i, r) in rows.iter().enumerate() {
        for (j, &v) in r.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Load("transform_matrix has non-finite entries".into()));
            }
            m[i][j] = v;
        }
    }
    Ok(m)
}

/// Writes PNGs and a single `transforms.json` with per-frame split tags.
/// All cameras must share intrinsics and depth bounds.
pub fn export_scene(dataset: &Dataset, dir: &Path) -> Result<()> {
    let first = dataset
        .frames
        .first()
        .ok_or_else(|| Error::Config("cannot export an empty dataset".into()))?;
    std::fs::create_dir_all(dir)?;
    let mut frames = Vec::new();
    for f in &dataset.frames {
        let name = format!("r_{:03}.png", f.id);
        write_png(&dir.join(&name), &f.image)?;
        frames.push(ManifestFrame {
            file_path: name,
            transform_matrix: f.camera.c2w.iter().map(|r| r.to_vec()).collect(),
            split: Some(f.split),
        });
    }
    let cam = first.camera;
    let manifest = SceneManifest {
        camera_angle_x: 2.0 * (0.5 * cam.width as f64 / cam.focal).atan(),
        fl_x: Some(cam.focal),
        near: Some(cam.near),
        far: Some(cam.far),
        aabb: Some([dataset.bbox.min, dataset.bbox.max]),
        frames,
    };
    std::fs::write(dir.join("transforms.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub views: usize,
    pub resolution: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub spec: SyntheticSpec,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            views: 20,
            resolution: 64,
            seed: 0,
            spec: SyntheticSpec::default(),
        }
    }
}

/// Contents of a run configuration file (TOML).
///
/// ```toml
/// preset = "micro"
///
/// [train]            # any TrainConfig field, overriding the preset
/// rays_per_batch = 512
///
/// [sr]               # SrConfig fields
/// l_lr = 1
///
/// [synthetic]        # view count, resolution, seed and SyntheticSpec fields
/// views = 20
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub train: toml::Table,
    pub sr: Option<SrConfig>,
    pub synthetic: Option<SyntheticConfig>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// The preset (default `micro`) with the `[train]` table applied on top.
    pub fn train_config(&self, preset_override: Option<&str>) -> Result<TrainConfig> {
        let name = preset_override.or(self.preset.as_deref()).unwrap_or("micro");
        let base = TrainConfig::from_preset(&preset(name)?);
        apply_overrides(&base, &self.train)
    }
}

pub fn apply_overrides(base: &TrainConfig, overrides: &toml::Table) -> Result<TrainConfig> {
    let mut table = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
    let known: BTreeMap<_, _> = table.keys().map(|k| (k.clone(), ())).collect();
    for (k, v) in overrides {
        if !known.contains_key(k) {
            return Err(Error::Config(format!("unknown train option {k:?}")));
        }
        table.insert(k.clone(), v.clone());
    }
    let cfg: TrainConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_on_preset() {
        let rc = RunConfig::from_toml("preset = \"small\"\n[train]\nrays_per_batch = 77\ngamma = 0.0\n").unwrap();
        let cfg = rc.train_config(None).unwrap();
        assert_eq!(cfg.rays_per_batch, 77);
        assert_eq!(cfg.gamma, 0.0);
        assert_eq!(cfg.n_final, 1024);
        let bad = RunConfig::from_toml("[train]\nbogus = 1\n").unwrap();
        assert!(bad.train_config(None).is_err());
    }
}
