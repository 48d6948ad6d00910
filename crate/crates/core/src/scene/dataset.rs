//! `scene.json` manifests and in-memory datasets.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::render::{Aabb, Image, PinholeCamera};

pub const MANIFEST_NAME: &str = "scene.json";
pub const MANIFEST_VERSION: u32 = 1;

fn default_near() -> f64 {
    0.05
}

fn default_far() -> f64 {
    1e3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world, row-major 3×4.
    pub pose: Vec<f64>,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
    pub frames: Vec<String>,
    /// Optional per-pixel ground-truth dynamic mask (PNG, nonzero = dynamic).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dynamic_mask: Option<String>,
}

impl CameraEntry {
    pub fn camera(&self) -> Result<PinholeCamera> {
        if self.pose.len() != 12 {
            return Err(Error::Dataset(format!(
                "camera `{}`: pose needs 12 values, found {}",
                self.id,
                self.pose.len()
            )));
        }
        let p = &self.pose;
        let cam = PinholeCamera {
            width: self.width,
            height: self.height,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            pose: [
                [p[0], p[1], p[2], p[3]],
                [p[4], p[5], p[6], p[7]],
                [p[8], p[9], p[10], p[11]],
            ],
            near: self.near,
            far: self.far,
        };
        cam.validate()
            .map_err(|e| Error::Dataset(format!("camera `{}`: {e}", self.id)))?;
        Ok(cam)
    }

    pub fn from_camera(id: impl Into<String>, cam: &PinholeCamera, frames: Vec<String>) -> Self {
        CameraEntry {
            id: id.into(),
            width: cam.width,
            height: cam.height,
            fx: cam.fx,
            fy: cam.fy,
            cx: cam.cx,
            cy: cam.cy,
            pose: cam.pose.iter().flatten().copied().collect(),
            near: cam.near,
            far: cam.far,
            frames,
            dynamic_mask: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    #[serde(rename = "T")]
    pub frame_count: usize,
    pub bounds: Aabb,
    pub cameras: Vec<CameraEntry>,
    pub split: Split,
}

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone)]
pub struct DatasetCamera {
    pub id: String,
    pub camera: PinholeCamera,
    /// One image per frame, RGB in `[0,1]`.
    pub frames: Vec<Image>,
    pub dynamic_mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
pub struct SceneDataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub cameras: Vec<DatasetCamera>,
    pub frame_count: usize,
    pub bounds: Aabb,
    /// Indices into `cameras`.
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl SceneDataset {
    /// Normalized time of frame `f`.
    pub fn time_of(&self, f: usize) -> f64 {
        frame_time(f, self.frame_count)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.frame_count).map(|f| self.time_of(f)).collect()
    }

    pub fn camera_index(&self, id: &str) -> Option<usize> {
        self.cameras.iter().position(|c| c.id == id)
    }
}

/// `f / (T − 1)`, or 0 for single-frame videos.
pub fn frame_time(f: usize, frame_count: usize) -> f64 {
    if frame_count <= 1 {
        0.0
    } else {
        f as f64 / (frame_count - 1) as f64
    }
}

/// Reads and validates `dir/scene.json` and decodes every referenced image.
pub fn load_dataset(dir: &Path) -> Result<SceneDataset> {
    let path = dir.join(MANIFEST_NAME);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported manifest version {} (expected {MANIFEST_VERSION})",
            manifest.version
        )));
    }
    if manifest.frame_count == 0 {
        return Err(Error::Dataset("T must be >= 1".into()));
    }
    manifest.bounds.validate()?;
    if manifest.cameras.is_empty() {
        return Err(Error::Dataset("manifest lists no cameras".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for c in &manifest.cameras {
        if !seen.insert(c.id.as_str()) {
            return Err(Error::Dataset(format!("duplicate camera id `{}`", c.id)));
        }
        if c.frames.len() != manifest.frame_count {
            return Err(Error::Dataset(format!(
                "camera `{}` lists {} frames but T = {}",
                c.id,
                c.frames.len(),
                manifest.frame_count
            )));
        }
        for f in &c.frames {
            let p = dir.join(f);
            if !p.exists() {
                return Err(Error::MissingFile(p));
            }
        }
    }
    let lookup = |ids: &[String]| -> Result<Vec<usize>> {
        ids.iter()
            .map(|id| {
                manifest
                    .cameras
                    .iter()
                    .position(|c| &c.id == id)
                    .ok_or_else(|| Error::Dataset(format!("split references unknown camera `{id}`")))
            })
            .collect()
    };
    let train = lookup(&manifest.split.train)?;
    let test = lookup(&manifest.split.test)?;
    if train.is_empty() {
        return Err(Error::Dataset("split.train is empty".into()));
    }

    let cameras: Vec<DatasetCamera> = manifest
        .cameras
        .par_iter()
        .map(|entry| {
            let camera = entry.camera()?;
            let frames: Vec<Image> = entry
                .frames
                .iter()
                .map(|f| {
                    let p = dir.join(f);
                    let im = Image::load_png(&p)?;
                    if im.width != camera.width || im.height != camera.height {
                        return Err(Error::Dataset(format!(
                            "{} is {}x{}, camera `{}` is {}x{}",
                            p.display(),
                            im.width,
                            im.height,
                            entry.id,
                            camera.width,
                            camera.height
                        )));
                    }
                    Ok(im)
                })
                .collect::<Result<_>>()?;
            let dynamic_mask = match &entry.dynamic_mask {
                Some(m) => {
                    let p = dir.join(m);
                    let im = Image::load_png(&p)?;
                    if im.width != camera.width || im.height != camera.height {
                        return Err(Error::Dataset(format!("{} has the wrong resolution", p.display())));
                    }
                    Some(im.data.chunks_exact(3).map(|px| px[0] > 0.5).collect())
                }
                None => None,
            };
            Ok(DatasetCamera {
                id: entry.id.clone(),
                camera,
                frames,
                dynamic_mask,
            })
        })
        .collect::<Result<_>>()?;

    Ok(SceneDataset {
        root: dir.to_path_buf(),
        frame_count: manifest.frame_count,
        bounds: manifest.bounds,
        manifest,
        cameras,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tiny(dir: &Path, cams: usize, frames: usize) -> Manifest {
        let cam = PinholeCamera::look_at(4, 3, 4.0, [0.0, 0.0, -3.0], [0.0; 3], [0.0, 1.0, 0.0], 0.5, 6.0);
        let mut entries = Vec::new();
        for c in 0..cams {
            let mut names = Vec::new();
            for f in 0..frames {
                let name = format!("cam{c}/{f:04}.png");
                Image::filled(4, 3, 3, (c * frames + f) as f32 / 10.0)
                    .save_png(&dir.join(&name))
                    .unwrap();
                names.push(name);
            }
            entries.push(CameraEntry::from_camera(format!("cam{c}"), &cam, names));
        }
        let m = Manifest {
            version: 1,
            frame_count: frames,
            bounds: Aabb::cube(1.0),
            cameras: entries,
            split: Split {
                train: vec!["cam0".into()],
                test: vec!["cam1".into()],
            },
        };
        m.save(dir).unwrap();
        m
    }

    #[test]
    fn loads_two_cameras_three_frames() {
        let dir = tempfile::tempdir().unwrap();
        write_tiny(dir.path(), 2, 3);
        let d = load_dataset(dir.path()).unwrap();
        assert_eq!(d.frame_count, 3);
        assert_eq!(d.cameras.iter().map(|c| c.frames.len()).sum::<usize>(), 6);
        assert_eq!(d.times(), vec![0.0, 0.5, 1.0]);
        assert_eq!(d.test, vec![1]);
    }

    #[test]
    fn missing_frame_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_tiny(dir.path(), 2, 2);
        std::fs::remove_file(dir.path().join("cam1/0001.png")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("cam1/0001.png")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn inconsistent_manifests_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = write_tiny(dir.path(), 2, 2);
        m.cameras[1].frames.pop();
        m.save(dir.path()).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));

        let mut m = write_tiny(dir.path(), 2, 2);
        m.cameras[0].fx = -1.0;
        m.save(dir.path()).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));

        let mut m = write_tiny(dir.path(), 2, 2);
        m.split.test = vec!["nope".into()];
        m.save(dir.path()).unwrap();
        assert!(load_dataset(dir.path()).is_err());

        let mut m = write_tiny(dir.path(), 2, 2);
        m.cameras[0].width = 5;
        m.save(dir.path()).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
