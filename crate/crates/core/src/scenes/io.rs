//! On-disk dataset layout:
//!
//! ```text
//! scene/
//!   manifest.json        schema version, sizes, depth range
//!   cameras.json         [view][frame] -> {K, T, width, height}
//!   scene.json           generating spec (optional)
//!   rgb/v{V}_t{T}.png    8-bit color
//!   depth/v{V}_t{T}.pfm  float depth
//!   sparse_depth.txt     "view t x y z" per line
//!   sparse_flow.txt      "v t x y u s x' y'" per line
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::SceneSpec;
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::image::Image;
use crate::priors::sparse::{self, SparseDepthPoint, SparseFlowMatch};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub views: usize,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub z_near: f64,
    pub z_far: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cameras: Vec<Vec<Camera>>,
    pub rgb: Vec<Vec<Image>>,
    pub depth: Vec<Vec<Image>>,
    pub sparse_depth: Vec<SparseDepthPoint>,
    pub sparse_flow: Vec<SparseFlowMatch>,
    pub z_near: f64,
    pub z_far: f64,
    pub spec: Option<SceneSpec>,
}

impl Dataset {
    /// Renders every view and frame of `spec`.
    pub fn from_spec(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let mut rgb = Vec::new();
        let mut depth = Vec::new();
        for v in 0..spec.views() {
            let (mut rv, mut dv) = (Vec::new(), Vec::new());
            for t in 0..spec.frames {
                let (c, d) = spec.render_gt(v, t);
                rv.push(c);
                dv.push(d);
            }
            rgb.push(rv);
            depth.push(dv);
        }
        Ok(Self {
            cameras: spec.cameras.clone(),
            rgb,
            depth,
            sparse_depth: Vec::new(),
            sparse_flow: Vec::new(),
            z_near: spec.z_near,
            z_far: spec.z_far,
            spec: Some(spec.clone()),
        })
    }

    pub fn views(&self) -> usize {
        self.cameras.len()
    }

    pub fn frames(&self) -> usize {
        self.cameras.first().map_or(0, |v| v.len())
    }

    pub fn manifest(&self) -> Manifest {
        let c = &self.cameras[0][0];
        Manifest {
            schema_version: SCHEMA_VERSION,
            views: self.views(),
            frames: self.frames(),
            width: c.width,
            height: c.height,
            z_near: self.z_near,
            z_far: self.z_far,
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for sub in ["rgb", "depth"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        write_json(&dir.join("manifest.json"), &self.manifest())?;
        write_json(&dir.join("cameras.json"), &self.cameras)?;
        if let Some(spec) = &self.spec {
            write_json(&dir.join("scene.json"), spec)?;
        }
        for v in 0..self.views() {
            for t in 0..self.frames() {
                write_png(&rgb_path(dir, v, t), &self.rgb[v][t])?;
                write_pfm(&depth_path(dir, v, t), &self.depth[v][t])?;
            }
        }
        write_text(&dir.join("sparse_depth.txt"), &sparse::depth_to_text(&self.sparse_depth))?;
        write_text(&dir.join("sparse_flow.txt"), &sparse::flow_to_text(&self.sparse_flow))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        if manifest.schema_version != SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                found: manifest.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let cameras: Vec<Vec<Camera>> = read_json(&dir.join("cameras.json"))?;
        if cameras.len() != manifest.views || cameras.iter().any(|v| v.len() != manifest.frames) {
            return Err(Error::format(dir.join("cameras.json"), "camera count disagrees with manifest"));
        }
        let mut rgb = Vec::new();
        let mut depth = Vec::new();
        for v in 0..manifest.views {
            let (mut rv, mut dv) = (Vec::new(), Vec::new());
            for t in 0..manifest.frames {
                rv.push(read_png(&rgb_path(dir, v, t))?);
                dv.push(read_pfm(&depth_path(dir, v, t))?);
            }
            rgb.push(rv);
            depth.push(dv);
        }
        let spec_path = dir.join("scene.json");
        let spec = if spec_path.exists() { Some(read_json(&spec_path)?) } else { None };
        let sd_path = dir.join("sparse_depth.txt");
        let sparse_depth = if sd_path.exists() {
            sparse::depth_from_text(&read_text(&sd_path)?).map_err(|m| Error::format(&sd_path, m))?
        } else {
            Vec::new()
        };
        let sf_path = dir.join("sparse_flow.txt");
        let sparse_flow = if sf_path.exists() {
            sparse::flow_from_text(&read_text(&sf_path)?).map_err(|m| Error::format(&sf_path, m))?
        } else {
            Vec::new()
        };
        Ok(Self {
            cameras,
            rgb,
            depth,
            sparse_depth,
            sparse_flow,
            z_near: manifest.z_near,
            z_far: manifest.z_far,
            spec,
        })
    }
}

pub fn rgb_path(dir: &Path, v: usize, t: usize) -> PathBuf {
    dir.join("rgb").join(format!("v{v}_t{t}.png"))
}

pub fn depth_path(dir: &Path, v: usize, t: usize) -> PathBuf {
    dir.join("depth").join(format!("v{v}_t{t}.pfm"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    write_text(path, &s)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = read_text(path)?;
    serde_json::from_str(&s).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_text(path: &Path, s: &str) -> Result<()> {
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a 1- or 3-channel image as an 8-bit PNG.
pub fn write_png(path: &Path, img: &Image) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let res = match img.channels {
        1 => image::GrayImage::from_raw(w, h, bytes).map(|b| b.save(path)),
        3 => image::RgbImage::from_raw(w, h, bytes).map(|b| b.save(path)),
        c => return Err(Error::Shape(format!("cannot write a {c}-channel PNG"))),
    };
    match res {
        Some(Ok(())) => Ok(()),
        Some(Err(e)) => Err(Error::format(path, e.to_string())),
        None => Err(Error::Shape("image buffer size mismatch".into())),
    }
}

/// Reads a PNG as rgb in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| Error::format(path, e.to_string()))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Image {
        width: w as usize,
        height: h as usize,
        channels: 3,
        data: img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
    })
}

/// Writes a single-channel little-endian PFM (rows bottom to top).
pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    let tag = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::Shape(format!("cannot write a {c}-channel PFM"))),
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            for &v in img.pixel(x, y) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a PFM in either byte order.
pub fn read_pfm(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m.to_string());
    // header: three whitespace-separated lines
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PFM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        _ => return Err(bad("not a PFM file")),
    };
    let w: usize = fields[1].parse().map_err(|_| bad("bad PFM width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad PFM height"))?;
    let scale: f64 = fields[3].parse().map_err(|_| bad("bad PFM scale"))?;
    let little = scale < 0.0;
    let n = w * h * channels;
    if bytes.len() < pos + 4 * n {
        return Err(bad("truncated PFM data"));
    }
    let mut img = Image::new(w, h, channels);
    for (k, chunk) in bytes[pos..pos + 4 * n].chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) } as f64;
        let row = k / (w * channels);
        let rem = k % (w * channels);
        let y = h - 1 - row;
        img.data[(y * w) * channels + rem] = v;
    }
    Ok(img)
}
