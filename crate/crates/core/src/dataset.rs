use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Aabb;
use crate::renderer::Camera;
use crate::wavelet::Plane;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One posed view. Images hold linear RGB in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub id: usize,
    pub image: Plane,
    pub camera: Camera,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub frames: Vec<Frame>,
    pub bbox: Aabb,
}

impl Dataset {
    pub fn new(frames: Vec<Frame>, bbox: Aabb) -> Result<Self> {
        let ds = Dataset { frames, bbox };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.bbox.is_valid() {
            return Err(Error::Config("invalid scene bounding box".into()));
        }
        for f in &self.frames {
            f.camera.validate()?;
            let (h, w, c) = f.image.shape();
            if c != 3 || h != f.camera.height || w != f.camera.width {
                return Err(Error::Shape(format!(
                    "frame {}: image {h}x{w}x{c} does not match camera {}x{}",
                    f.id, f.camera.height, f.camera.width
                )));
            }
        }
        for split in [Split::Train, Split::Val, Split::Test] {
            let mut sizes = self.split(split).map(|f| f.image.shape());
            if let Some(first) = sizes.next() {
                if sizes.any(|s| s != first) {
                    return Err(Error::Shape(format!("{split:?} images differ in size")));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Frame> + '_ {
        self.frames.iter().filter(move |f| f.split == split)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Smallest near and largest far plane over all cameras.
    pub fn depth_range(&self) -> (f64, f64) {
        let near = self.frames.iter().map(|f| f.camera.near).fold(f64::INFINITY, f64::min);
        let far = self.frames.iter().map(|f| f.camera.far).fold(0.0, f64::max);
        (near, far)
    }
}
