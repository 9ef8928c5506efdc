//! File formats.
//!
//! - EDEP: `EDEP`, width and height as u32 LE, then f32 LE depths, row-major, top row first.
//! - PPM (P6, maxval 255) for RGB rasters with values in `[0, 1]`.
//! - OBJ subset: `v x y z` and `f i j k` lines, 1-indexed.
//! - Point text: one `x y z` per line, 9 significant digits.
//! - Box JSON: array of `{center, size, heading, category, score?}`, or an
//!   array of such arrays (one per scene).
//! - PCTX checkpoint: `PCTX`, config fields as u32 LE (`mask_fraction` in
//!   parts per million), then every parameter block as f64 LE in canonical order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::boxes3d::{BoxRecord, OrientedBox};
use crate::context::params::EncoderParams;
use crate::context::ContextConfig;
use crate::layout_mesh::LayoutMesh;
use crate::pano_geom::EquirectRaster;
use crate::pointcloud::PointCloud;
use crate::{Error, Result, Vec3};

const EDEP_MAGIC: &[u8; 4] = b"EDEP";
const PCTX_MAGIC: &[u8; 4] = b"PCTX";
const PPM_MAX: f64 = 255.0;

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, at: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Format(format!("{}: truncated at byte {}", self.what, self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.buf.len() {
            return Err(Error::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.at
            )));
        }
        Ok(())
    }
}

pub fn encode_edep(depth: &EquirectRaster) -> Result<Vec<u8>> {
    if depth.channels != 1 {
        return Err(Error::Shape("EDEP holds single-channel rasters".into()));
    }
    let mut out = Vec::with_capacity(12 + 4 * depth.data.len());
    out.extend_from_slice(EDEP_MAGIC);
    out.extend_from_slice(&(depth.width as u32).to_le_bytes());
    out.extend_from_slice(&(depth.height as u32).to_le_bytes());
    for &d in &depth.data {
        out.extend_from_slice(&(d as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_edep(bytes: &[u8]) -> Result<EquirectRaster> {
    let mut r = Reader::new(bytes, "EDEP");
    if r.take(4)? != EDEP_MAGIC {
        return Err(Error::Format("missing EDEP magic".into()));
    }
    let w = r.u32()? as usize;
    let h = r.u32()? as usize;
    let n = w
        .checked_mul(h)
        .filter(|&n| n <= bytes.len() / 4)
        .ok_or_else(|| Error::Format(format!("EDEP header {w} x {h} exceeds the file")))?;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.f32()? as f64);
    }
    r.finish()?;
    EquirectRaster::new(w, h, 1, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_edep(path: &Path, depth: &EquirectRaster) -> Result<()> {
    Ok(fs::write(path, encode_edep(depth)?)?)
}

pub fn read_edep(path: &Path) -> Result<EquirectRaster> {
    decode_edep(&fs::read(path)?)
}

pub fn encode_ppm(rgb: &EquirectRaster) -> Result<Vec<u8>> {
    if rgb.channels != 3 {
        return Err(Error::Shape("PPM holds three-channel rasters".into()));
    }
    let mut out = format!("P6\n{} {}\n255\n", rgb.width, rgb.height).into_bytes();
    out.extend(rgb.data.iter().map(|&v| (v.clamp(0.0, 1.0) * PPM_MAX).round() as u8));
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<EquirectRaster> {
    // Header: magic, width, height, maxval separated by whitespace; comments allowed.
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(Error::Format(format!("unsupported PPM magic {}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM field {s}")));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Format(format!("PPM maxval {maxval} unsupported")));
    }
    let body = &bytes[(i + 1).min(bytes.len())..];
    if body.len() != w * h * 3 {
        return Err(Error::Format(format!("PPM body has {} bytes, expected {}", body.len(), w * h * 3)));
    }
    let data = body.iter().map(|&b| b as f64 / PPM_MAX).collect();
    EquirectRaster::new(w, h, 3, data).map_err(|e| Error::Format(e.to_string()))
}

pub fn mesh_to_obj(mesh: &LayoutMesh) -> String {
    let mut s = String::new();
    for v in &mesh.vertices {
        writeln!(s, "v {} {} {}", v.x, v.y, v.z).unwrap();
    }
    for f in &mesh.faces {
        writeln!(s, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).unwrap();
    }
    s
}

pub fn obj_to_mesh(text: &str) -> Result<LayoutMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let bad = || Error::Format(format!("OBJ line {}: {line}", ln + 1));
        match it.next() {
            Some("v") => {
                let c: Vec<f64> = it.map(|t| t.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
                if c.len() != 3 {
                    return Err(bad());
                }
                vertices.push(Vec3::new(c[0], c[1], c[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|t| t.split('/').next().unwrap_or("").parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad())?;
                if idx.len() != 3 || idx.iter().any(|&i| i == 0) {
                    return Err(bad());
                }
                faces.push([idx[0] - 1, idx[1] - 1, idx[2] - 1]);
            }
            _ => return Err(bad()),
        }
    }
    LayoutMesh::new(vertices, faces).map_err(|e| Error::Format(e.to_string()))
}

pub fn write_obj(path: &Path, mesh: &LayoutMesh) -> Result<()> {
    Ok(fs::write(path, mesh_to_obj(mesh))?)
}

pub fn read_obj(path: &Path) -> Result<LayoutMesh> {
    obj_to_mesh(&fs::read_to_string(path)?)
}

pub fn points_to_text(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.points.len() * 48);
    for p in &cloud.points {
        writeln!(s, "{:.8e} {:.8e} {:.8e}", p.x, p.y, p.z).unwrap();
    }
    s
}

pub fn text_to_points(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let c: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("point line {}: {line}", ln + 1)))?;
        if c.len() != 3 {
            return Err(Error::Format(format!("point line {} has {} fields", ln + 1, c.len())));
        }
        points.push(Vec3::new(c[0], c[1], c[2]));
    }
    Ok(PointCloud::new(points))
}

pub fn boxes_to_json(boxes: &[OrientedBox]) -> Result<String> {
    let recs: Vec<BoxRecord> = boxes.iter().map(BoxRecord::from).collect();
    Ok(serde_json::to_string_pretty(&recs)?)
}

pub fn scenes_to_json(scenes: &[Vec<OrientedBox>]) -> Result<String> {
    let recs: Vec<Vec<BoxRecord>> = scenes
        .iter()
        .map(|s| s.iter().map(BoxRecord::from).collect())
        .collect();
    Ok(serde_json::to_string_pretty(&recs)?)
}

/// Boxes grouped by scene; a flat array or a scene file is one scene.
pub fn boxes_from_json(text: &str) -> Result<Vec<Vec<OrientedBox>>> {
    let mut value: serde_json::Value = serde_json::from_str(text)?;
    if let Some(b) = value.get_mut("boxes") {
        value = b.take();
    }
    let arr = value
        .as_array()
        .ok_or_else(|| Error::Format("box JSON must be an array".into()))?;
    let nested = !arr.is_empty() && arr.iter().all(|v| v.is_array());
    let groups: Vec<Vec<BoxRecord>> = if nested {
        serde_json::from_value(value)?
    } else {
        vec![serde_json::from_value(value)?]
    };
    groups
        .iter()
        .map(|g| {
            g.iter()
                .map(|r| OrientedBox::try_from(r).map_err(|e| Error::Format(e.to_string())))
                .collect()
        })
        .collect()
}

fn config_fields(cfg: &ContextConfig) -> Result<[u32; 14]> {
    let ppm = (cfg.mask_fraction * 1e6).round();
    let fit = |x: usize| u32::try_from(x).map_err(|_| Error::Format(format!("{x} exceeds u32")));
    Ok([
        fit(cfg.d)?,
        fit(cfg.heads)?,
        fit(cfg.layers)?,
        fit(cfg.t_image)?,
        fit(cfg.t_layout)?,
        fit(cfg.t_point)?,
        fit(cfg.t_object)?,
        ppm as u32,
        fit(cfg.size_classes)?,
        fit(cfg.heading_bins)?,
        fit(cfg.categories)?,
        fit(cfg.image_feat_dim)?,
        fit(cfg.shape_dim)?,
        fit(cfg.ffn_dim)?,
    ])
}

pub fn encode_checkpoint(cfg: &ContextConfig, params: &EncoderParams) -> Result<Vec<u8>> {
    params.check_shapes(cfg)?;
    let mut out = Vec::with_capacity(4 + 56 + 8 * params.num_params());
    out.extend_from_slice(PCTX_MAGIC);
    for f in config_fields(cfg)? {
        out.extend_from_slice(&f.to_le_bytes());
    }
    for (_, b) in params.blocks() {
        for &x in b.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ContextConfig, EncoderParams)> {
    let mut r = Reader::new(bytes, "PCTX");
    if r.take(4)? != PCTX_MAGIC {
        return Err(Error::Format("missing PCTX magic".into()));
    }
    let mut f = [0usize; 14];
    for x in f.iter_mut() {
        *x = r.u32()? as usize;
    }
    let cfg = ContextConfig {
        d: f[0],
        heads: f[1],
        layers: f[2],
        t_image: f[3],
        t_layout: f[4],
        t_point: f[5],
        t_object: f[6],
        mask_fraction: f[7] as f64 / 1e6,
        size_classes: f[8],
        heading_bins: f[9],
        categories: f[10],
        image_feat_dim: f[11],
        shape_dim: f[12],
        ffn_dim: f[13],
    };
    cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
    let mut params = EncoderParams::init(&cfg, 0)?;
    let expected = params.num_params();
    if bytes.len().saturating_sub(60) != 8 * expected {
        return Err(Error::Format(format!(
            "PCTX body has {} bytes, expected {}",
            bytes.len().saturating_sub(60),
            8 * expected
        )));
    }
    for b in params.blocks_mut() {
        for x in b.iter_mut() {
            *x = r.f64()?;
        }
    }
    r.finish()?;
    Ok((cfg, params))
}

pub fn write_checkpoint(path: &Path, cfg: &ContextConfig, params: &EncoderParams) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(cfg, params)?)?)
}

pub fn read_checkpoint(path: &Path) -> Result<(ContextConfig, EncoderParams)> {
    decode_checkpoint(&fs::read(path)?)
}
