//! Little-endian binary checkpoints.
//!
//! A file is a `u32` record count followed by records:
//!
//! ```text
//! "SPVW" | u32 version | u32 tag | u32 n_ints | n_ints x i64
//!        | u32 n_meta | n_meta x f64 | u64 n_params | n_params x f64
//! ```

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::hexplane::HexPlaneField;
use super::mlp::{DecoderConfig, Mlp};
use super::{Aabb, DensityField, FieldConfig, ModelConfig, RadianceModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPVW";
pub const VERSION: u32 = 1;

pub const TAG_VOXEL: u32 = 1;
pub const TAG_TENSOR: u32 = 2;
pub const TAG_HASH: u32 = 3;
pub const TAG_ENCODED: u32 = 4;
pub const TAG_HEXPLANE: u32 = 5;
pub const TAG_DECODER: u32 = 6;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub tag: u32,
    pub ints: Vec<i64>,
    pub meta: Vec<f64>,
    pub params: Vec<f64>,
}

pub fn encode_records(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&r.tag.to_le_bytes());
        out.extend_from_slice(&(r.ints.len() as u32).to_le_bytes());
        for v in &r.ints {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(r.meta.len() as u32).to_le_bytes());
        for v in &r.meta {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(r.params.len() as u64).to_le_bytes());
        for v in &r.params {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_records(bytes: &[u8], path: &Path) -> Result<Vec<Record>> {
    let bad = |m: &str| Error::format(path, m.to_string());
    let mut c = Cursor::new(bytes);
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    let mut u32_ = |c: &mut Cursor<&[u8]>| -> Result<u32> {
        c.read_exact(&mut b4).map_err(|_| bad("truncated checkpoint"))?;
        Ok(u32::from_le_bytes(b4))
    };
    let n = u32_(&mut c)?;
    let mut out = Vec::new();
    for _ in 0..n {
        let mut magic = [0u8; 4];
        c.read_exact(&mut magic).map_err(|_| bad("truncated checkpoint"))?;
        if &magic != MAGIC {
            return Err(bad("bad checkpoint magic"));
        }
        let version = u32_(&mut c)?;
        if version != VERSION {
            return Err(Error::SchemaVersion { found: version, expected: VERSION });
        }
        let tag = u32_(&mut c)?;
        let ni = u32_(&mut c)? as usize;
        let mut ints = Vec::with_capacity(ni);
        for _ in 0..ni {
            c.read_exact(&mut b8).map_err(|_| bad("truncated checkpoint"))?;
            ints.push(i64::from_le_bytes(b8));
        }
        let nm = u32_(&mut c)? as usize;
        let mut meta = Vec::with_capacity(nm);
        for _ in 0..nm {
            c.read_exact(&mut b8).map_err(|_| bad("truncated checkpoint"))?;
            meta.push(f64::from_le_bytes(b8));
        }
        c.read_exact(&mut b8).map_err(|_| bad("truncated checkpoint"))?;
        let np = u64::from_le_bytes(b8) as usize;
        if np > bytes.len() / 8 {
            return Err(bad("parameter count exceeds file size"));
        }
        let mut params = Vec::with_capacity(np);
        for _ in 0..np {
            c.read_exact(&mut b8).map_err(|_| bad("truncated checkpoint"))?;
            params.push(f64::from_le_bytes(b8));
        }
        out.push(Record { tag, ints, meta, params });
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    fs::write(path, encode_records(records)).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&bytes, path)
}

fn bbox_meta(b: &Aabb) -> Vec<f64> {
    b.min.iter().chain(&b.max).copied().collect()
}

fn bbox_from(meta: &[f64]) -> Result<Aabb> {
    Aabb::new([meta[0], meta[1], meta[2]], [meta[3], meta[4], meta[5]])
}

fn split_params(params: &[f64], sizes: &[usize]) -> Option<Vec<Vec<f64>>> {
    if sizes.iter().sum::<usize>() != params.len() {
        return None;
    }
    let mut out = Vec::new();
    let mut off = 0;
    for &s in sizes {
        out.push(params[off..off + s].to_vec());
        off += s;
    }
    Some(out)
}

impl RadianceModel {
    pub fn to_records(&self) -> Vec<Record> {
        let shift = self.config.density_shift;
        let field = match &self.field {
            DensityField::Voxel(f) => Record {
                tag: TAG_VOXEL,
                ints: vec![f.dims[0] as i64, f.dims[1] as i64, f.dims[2] as i64, f.feature_dim as i64],
                meta: [bbox_meta(&f.bbox), vec![shift]].concat(),
                params: f.params.clone(),
            },
            DensityField::Tensor(f) => Record {
                tag: TAG_TENSOR,
                ints: vec![
                    f.dims[0] as i64,
                    f.dims[1] as i64,
                    f.dims[2] as i64,
                    f.rank_density as i64,
                    f.rank_color as i64,
                    f.feature_dim as i64,
                ],
                meta: [bbox_meta(&f.bbox), vec![f.sigma_max, shift]].concat(),
                params: [f.density.clone(), f.color.clone(), f.basis.clone()].concat(),
            },
            DensityField::Hash(f) => Record {
                tag: TAG_HASH,
                ints: vec![
                    f.levels as i64,
                    f.features_per_level as i64,
                    f.log2_table as i64,
                    f.base_resolution as i64,
                    f.max_resolution as i64,
                    f.feature_dim as i64,
                    f.mlp.hidden as i64,
                ],
                meta: [bbox_meta(&f.bbox), vec![f.s_near, shift]].concat(),
                params: [f.tables.clone(), f.mlp.params.clone()].concat(),
            },
            DensityField::Encoded(f) => Record {
                tag: TAG_ENCODED,
                ints: vec![f.degrees as i64, f.feature_dim as i64, f.mlp.hidden as i64],
                meta: [bbox_meta(&f.bbox), vec![shift]].concat(),
                params: f.mlp.params.clone(),
            },
        };
        let c = &self.decoder.config;
        let (has_res, d1, d2) = match c.residual_pe {
            Some((a, b)) => (1, a as i64, b as i64),
            None => (0, 0, 0),
        };
        let decoder = Record {
            tag: TAG_DECODER,
            ints: vec![
                c.feature_dim as i64,
                c.hidden as i64,
                c.view_dependent as i64,
                c.view_degrees as i64,
                has_res,
                d1,
                d2,
                c.time_conditioned as i64,
                c.time_degrees as i64,
                c.visibility_head as i64,
            ],
            meta: vec![],
            params: [
                self.decoder.color.params.clone(),
                self.decoder.visibility.as_ref().map(|m| m.params.clone()).unwrap_or_default(),
            ]
            .concat(),
        };
        vec![field, decoder]
    }

    /// Rebuilds a model from a field record followed by a decoder record.
    pub fn from_records(field: &Record, decoder: &Record, path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m.to_string());
        let di = &decoder.ints;
        if decoder.tag != TAG_DECODER || di.len() != 10 {
            return Err(bad("expected a decoder record"));
        }
        let dcfg = DecoderConfig {
            feature_dim: di[0] as usize,
            hidden: di[1] as usize,
            view_dependent: di[2] != 0,
            view_degrees: di[3] as usize,
            residual_pe: (di[4] != 0).then_some((di[5] as usize, di[6] as usize)),
            time_conditioned: di[7] != 0,
            time_degrees: di[8] as usize,
            visibility_head: di[9] != 0,
        };
        let i = |k: usize| field.ints.get(k).copied().unwrap_or(0) as usize;
        let m = &field.meta;
        if m.len() < 7 {
            return Err(bad("field record metadata too short"));
        }
        let bbox = bbox_from(m)?;
        let (fcfg, shift) = match field.tag {
            TAG_VOXEL => (FieldConfig::Voxel { resolution: [i(0), i(1), i(2)], feature_dim: i(3) }, m[6]),
            TAG_TENSOR => (
                FieldConfig::Tensor {
                    resolution: [i(0), i(1), i(2)],
                    rank_density: i(3),
                    rank_color: i(4),
                    feature_dim: i(5),
                    sigma_max: m[6],
                },
                *m.get(7).ok_or_else(|| bad("tensor record metadata too short"))?,
            ),
            TAG_HASH => (
                FieldConfig::Hash {
                    levels: i(0),
                    features_per_level: i(1),
                    log2_table: i(2) as u32,
                    base_resolution: i(3),
                    max_resolution: i(4),
                    s_near: m[6],
                    feature_dim: i(5),
                },
                *m.get(7).ok_or_else(|| bad("hash record metadata too short"))?,
            ),
            TAG_ENCODED => (FieldConfig::Encoded { degrees: i(0), feature_dim: i(1) }, m[6]),
            _ => return Err(bad("unknown field record tag")),
        };
        let config = ModelConfig {
            bbox,
            field: fcfg,
            decoder: dcfg,
            density_shift: shift,
            hidden: di[1] as usize,
        };
        // build a skeleton with the right shapes, then overwrite parameters
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = RadianceModel::new(config, &mut rng)?;
        let sizes: Vec<usize> = model.field.blocks().iter().map(|b| b.2.len()).collect();
        let parts = split_params(&field.params, &sizes).ok_or_else(|| bad("field parameter count mismatch"))?;
        for (dst, src) in model.field.blocks_mut().into_iter().zip(parts) {
            *dst = src;
        }
        let mut dsizes = vec![model.decoder.color.params.len()];
        if let Some(v) = &model.decoder.visibility {
            dsizes.push(v.params.len());
        }
        let parts = split_params(&decoder.params, &dsizes).ok_or_else(|| bad("decoder parameter count mismatch"))?;
        model.decoder.color.params = parts[0].clone();
        if let Some(v) = &mut model.decoder.visibility {
            v.params = parts[1].clone();
        }
        Ok(model)
    }
}

impl HexPlaneField {
    pub fn to_record(&self) -> Record {
        let mut ints = vec![self.resolutions.len() as i64];
        ints.extend(self.resolutions.iter().map(|&r| r as i64));
        ints.extend([
            self.time_resolution as i64,
            self.feature_dim as i64,
            self.frames as i64,
            self.decoder.hidden as i64,
        ]);
        Record {
            tag: TAG_HEXPLANE,
            ints,
            meta: [bbox_meta(&self.bbox), vec![self.canonical_time]].concat(),
            params: [self.planes.clone(), self.decoder.params.clone()].concat(),
        }
    }

    pub fn from_record(r: &Record, path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(path, m.to_string());
        if r.tag != TAG_HEXPLANE || r.ints.is_empty() || r.meta.len() < 7 {
            return Err(bad("expected a hexplane record"));
        }
        let nl = r.ints[0] as usize;
        if r.ints.len() != nl + 5 {
            return Err(bad("hexplane record shape mismatch"));
        }
        let res: Vec<usize> = r.ints[1..=nl].iter().map(|&v| v as usize).collect();
        let rest: Vec<usize> = r.ints[nl + 1..].iter().map(|&v| v as usize).collect();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut f = HexPlaneField::new(bbox_from(&r.meta)?, res, rest[0], rest[1], rest[2], rest[3], &mut rng)?;
        f.canonical_time = r.meta[6];
        let sizes = [f.planes.len(), Mlp::param_count(f.feature_dim, rest[3], 3)];
        let parts = split_params(&r.params, &sizes).ok_or_else(|| bad("hexplane parameter count mismatch"))?;
        f.planes = parts[0].clone();
        f.decoder.params = parts[1].clone();
        Ok(f)
    }
}

/// Saved models: a radiance model and, for dynamic scenes, its motion field.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub model: RadianceModel,
    pub motion: Option<HexPlaneField>,
}

impl ModelBundle {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut recs = self.model.to_records();
        if let Some(m) = &self.motion {
            recs.push(m.to_record());
        }
        write_records(path, &recs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let recs = read_records(path)?;
        if recs.len() < 2 {
            return Err(Error::format(path, "checkpoint holds fewer than two records"));
        }
        let model = RadianceModel::from_records(&recs[0], &recs[1], path)?;
        let motion = match recs.get(2) {
            Some(r) => Some(HexPlaneField::from_record(r, path)?),
            None => None,
        };
        Ok(Self { model, motion })
    }
}
