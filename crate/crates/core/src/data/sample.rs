//! Stereo samples, their on-disk layout and the dataset manifest.
//!
//! One sample is a directory holding `left.png`, `right.png` (8-bit RGB),
//! `disparity.pfm` (invalid pixels stored as +inf), `object_mask.png`
//! (16-bit instance ids, 0 = background) and `meta.json` (camera rig and
//! scene description). The manifest is a JSON array of entries with paths
//! relative to the manifest's directory.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, RgbImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::geometry::CameraRig;
use super::pfm::{read_pfm, write_pfm};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectShape {
    Rectangle,
    Ellipse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPose {
    /// Instance id in the object mask.
    pub id: u16,
    pub shape: ObjectShape,
    /// Centre (column, row) in left-image pixels.
    pub center: [f64; 2],
    /// Half extents (columns, rows).
    pub half_size: [f64; 2],
    pub disparity: f64,
    pub transparent: bool,
    /// Weight of the object's own surface pattern for transparent objects.
    pub alpha: f64,
}

impl ObjectPose {
    pub fn contains(&self, u: f64, v: f64) -> bool {
        let dx = (u - self.center[0]) / self.half_size[0];
        let dy = (v - self.center[1]) / self.half_size[1];
        match self.shape {
            ObjectShape::Rectangle => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            ObjectShape::Ellipse => dx * dx + dy * dy <= 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMeta {
    pub scene_id: String,
    pub seed: u64,
    /// Background disparity plane `a + b·v/H + c·u/W`.
    pub background_plane: [f64; 3],
    pub objects: Vec<ObjectPose>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StereoSample {
    pub left: RgbImage,
    pub right: RgbImage,
    pub gt_disparity: Array2<f32>,
    pub valid: Array2<bool>,
    pub object_mask: Array2<u16>,
    pub rig: CameraRig,
    pub meta: SceneMeta,
}

impl StereoSample {
    pub fn height(&self) -> usize {
        self.gt_disparity.nrows()
    }

    pub fn width(&self) -> usize {
        self.gt_disparity.ncols()
    }

    /// Columns `x0..x0 + width` of every field, with the principal point
    /// shifted to match.
    pub fn crop_columns(&self, x0: usize, width: usize) -> Result<StereoSample> {
        let (h, w) = self.gt_disparity.dim();
        if width == 0 || x0 + width > w {
            return Err(Error::Shape(format!("crop {x0}+{width} outside width {w}")));
        }
        let img = |i: &RgbImage| image::imageops::crop_imm(i, x0 as u32, 0, width as u32, h as u32).to_image();
        let cols = ndarray::s![.., x0..x0 + width];
        let mut rig = self.rig.clone();
        rig.cx -= x0 as f64;
        rig.width = width;
        Ok(StereoSample {
            left: img(&self.left),
            right: img(&self.right),
            gt_disparity: self.gt_disparity.slice(cols).to_owned(),
            valid: self.valid.slice(cols).to_owned(),
            object_mask: self.object_mask.slice(cols).to_owned(),
            rig,
            meta: self.meta.clone(),
        })
    }

    pub fn check_consistent(&self) -> Result<()> {
        let (h, w) = self.gt_disparity.dim();
        let img_ok = |img: &RgbImage| img.width() as usize == w && img.height() as usize == h;
        if !img_ok(&self.left) || !img_ok(&self.right) || self.valid.dim() != (h, w) || self.object_mask.dim() != (h, w)
        {
            return Err(Error::Shape(format!("sample {} fields disagree in size", self.meta.scene_id)));
        }
        for (d, v) in self.gt_disparity.iter().zip(self.valid.iter()) {
            if *v && !(d.is_finite() && *d >= 0.0) {
                return Err(Error::Shape(format!(
                    "sample {}: valid pixel with disparity {d}",
                    self.meta.scene_id
                )));
            }
        }
        Ok(())
    }

    /// Pixels belonging to transparent objects.
    pub fn transparent_mask(&self) -> Array2<u16> {
        let transparent: Vec<u16> = self.meta.objects.iter().filter(|o| o.transparent).map(|o| o.id).collect();
        self.object_mask.mapv(|id| if id != 0 && transparent.contains(&id) { id } else { 0 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub left: PathBuf,
    pub right: PathBuf,
    pub disparity: PathBuf,
    pub object_mask: PathBuf,
    pub meta: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MetaFile {
    rig: CameraRig,
    scene: SceneMeta,
}

/// Entries plus the directory they are relative to.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            entries: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let entries: Vec<ManifestEntry> =
            serde_json::from_str(&text).map_err(|e| Error::malformed(path, e.to_string()))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { root, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.entries)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Check that every referenced file exists.
    pub fn verify(&self) -> Result<()> {
        for e in &self.entries {
            for p in [&e.left, &e.right, &e.disparity, &e.object_mask, &e.meta] {
                let full = self.root.join(p);
                if !full.is_file() {
                    return Err(Error::MissingFile(full));
                }
            }
        }
        Ok(())
    }

    pub fn load_sample(&self, entry: &ManifestEntry) -> Result<StereoSample> {
        load_sample(&self.root, entry)
    }
}

/// Write a sample under `root/<id>/` and return its manifest entry.
pub fn save_sample(sample: &StereoSample, root: &Path, id: &str, split: Split) -> Result<ManifestEntry> {
    sample.check_consistent()?;
    let rel = PathBuf::from(id);
    let dir = root.join(&rel);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let entry = ManifestEntry {
        id: id.to_string(),
        split,
        left: rel.join("left.png"),
        right: rel.join("right.png"),
        disparity: rel.join("disparity.pfm"),
        object_mask: rel.join("object_mask.png"),
        meta: rel.join("meta.json"),
    };
    let save_png = |img: &RgbImage, p: &Path| -> Result<()> {
        img.save(p).map_err(|source| Error::Image {
            path: p.to_path_buf(),
            source,
        })
    };
    save_png(&sample.left, &root.join(&entry.left))?;
    save_png(&sample.right, &root.join(&entry.right))?;

    let disp = ndarray::Zip::from(&sample.gt_disparity)
        .and(&sample.valid)
        .map_collect(|d, v| if *v { *d } else { f32::INFINITY });
    write_pfm(&root.join(&entry.disparity), &disp)?;

    let (h, w) = sample.object_mask.dim();
    let mask: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, sample.object_mask.iter().copied().collect())
            .expect("mask buffer size");
    let mp = root.join(&entry.object_mask);
    mask.save(&mp).map_err(|source| Error::Image { path: mp.clone(), source })?;

    let meta = MetaFile {
        rig: sample.rig.clone(),
        scene: sample.meta.clone(),
    };
    let meta_path = root.join(&entry.meta);
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
    Ok(entry)
}

fn read_rgb(path: &Path) -> Result<RgbImage> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn load_sample(root: &Path, entry: &ManifestEntry) -> Result<StereoSample> {
    let left = read_rgb(&root.join(&entry.left))?;
    let right = read_rgb(&root.join(&entry.right))?;
    let disp_path = root.join(&entry.disparity);
    let disp = read_pfm(&disp_path)?;

    let mp = root.join(&entry.object_mask);
    if !mp.is_file() {
        return Err(Error::MissingFile(mp));
    }
    let mask_img = image::open(&mp)
        .map_err(|source| Error::Image { path: mp.clone(), source })?
        .to_luma16();
    let (mw, mh) = mask_img.dimensions();
    let object_mask = Array2::from_shape_vec((mh as usize, mw as usize), mask_img.into_raw())
        .map_err(|e| Error::malformed(&mp, e.to_string()))?;

    let meta_path = root.join(&entry.meta);
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: MetaFile = serde_json::from_str(&text).map_err(|e| Error::malformed(&meta_path, e.to_string()))?;

    let (h, w) = disp.dim();
    for (name, iw, ih) in [
        ("left image", left.width() as usize, left.height() as usize),
        ("right image", right.width() as usize, right.height() as usize),
        ("object mask", mw as usize, mh as usize),
    ] {
        if (iw, ih) != (w, h) {
            return Err(Error::malformed(
                &disp_path,
                format!("{name} is {iw}x{ih} but disparity is {w}x{h}"),
            ));
        }
    }
    let valid = disp.mapv(|d| d.is_finite() && d >= 0.0);
    Ok(StereoSample {
        left,
        right,
        gt_disparity: disp,
        valid,
        object_mask,
        rig: meta.rig,
        meta: meta.scene,
    })
}
