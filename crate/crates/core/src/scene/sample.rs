//! Scene samples: ingested feature maps, binary masks, decoder embeddings
//! and per-entity labels, plus their on-disk archive form.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Result, SceneError, CITYSCAPES_CLASSES, MECHANISMS, SEVERITIES, SIDES};

pub const POOL_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, bits }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.width + x] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `(y, x)` of every set pixel, row-major.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.width, i % self.width))
    }

    /// Mean `(y, x)` of the set pixels.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let n = self.count();
        if n == 0 {
            return None;
        }
        let (sy, sx) = self
            .pixels()
            .fold((0.0, 0.0), |(a, b), (y, x)| (a + y as f64, b + x as f64));
        Some((sy / n as f64, sx / n as f64))
    }

    /// Row-major, least significant bit first.
    pub fn pack(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    pub fn unpack(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let n = height * width;
        if bytes.len() != n.div_ceil(8) {
            return Err(SceneError::Archive(format!(
                "mask {height}x{width} needs {} bytes, got {}",
                n.div_ceil(8),
                bytes.len()
            )));
        }
        let bits = (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        Ok(Self { height, width, bits })
    }
}

/// `C × H × W`, row-major per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn get_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f64 {
        &mut self.data[(c * self.height + y) * self.width + x]
    }
}

/// Per-channel mask-weighted mean `Σ F·M / (Σ M + ε)`.
pub fn masked_pool(f: &FeatureMap, m: &Mask) -> Result<Vec<f64>> {
    if (f.height, f.width) != (m.height, m.width) {
        return Err(SceneError::Validation(format!(
            "feature map {}x{} vs mask {}x{}",
            f.height, f.width, m.height, m.width
        )));
    }
    let denom = m.count() as f64 + POOL_EPS;
    Ok((0..f.channels)
        .map(|c| m.pixels().map(|(y, x)| f.get(c, y, x)).sum::<f64>() / denom)
        .collect())
}

/// `(overlap, proximity)`: the share of the entity mask on the ego path, and
/// one minus the centroid distance to the ego-vehicle mask over the image
/// diagonal, clamped to `[0, 1]`. Empty masks give 0 for the affected value.
pub fn compute_geometry(entity: &Mask, path: &Mask, vehicle: &Mask) -> (f64, f64) {
    let n = entity.count();
    let overlap = if n == 0 {
        0.0
    } else {
        entity.pixels().filter(|&(y, x)| path.get(y, x)).count() as f64 / n as f64
    };
    let proximity = match (entity.centroid(), vehicle.centroid()) {
        (Some((ey, ex)), Some((vy, vx))) => {
            let diag = ((entity.height as f64).powi(2) + (entity.width as f64).powi(2)).sqrt();
            let d = ((ey - vy).powi(2) + (ex - vx).powi(2)).sqrt();
            (1.0 - d / diag).clamp(0.0, 1.0)
        }
        _ => 0.0,
    };
    (overlap, proximity)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationLabel {
    pub mechanism: usize,
    pub side: usize,
    pub severity: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityLabels {
    pub relevant: bool,
    /// Present exactly when `relevant`.
    pub relation: Option<RelationLabel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entity {
    pub mask: Mask,
    /// Decoder embedding row.
    pub embedding: Vec<f64>,
    /// Index into [`CITYSCAPES_CLASSES`].
    pub class: usize,
    pub labels: Option<EntityLabels>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: String,
    pub rgb: FeatureMap,
    pub disp: FeatureMap,
    pub path: Mask,
    pub vehicle: Mask,
    pub entities: Vec<Entity>,
}

impl SceneSample {
    pub fn embed_dim(&self) -> usize {
        self.entities.first().map_or(0, |e| e.embedding.len())
    }

    pub fn is_labeled(&self) -> bool {
        self.entities.iter().all(|e| e.labels.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SceneError::Validation(format!("sample {}: {m}", self.id)));
        let (h, w) = (self.rgb.height, self.rgb.width);
        if (self.disp.height, self.disp.width) != (h, w) {
            return bad("disparity map size differs from RGB map".into());
        }
        for (name, m) in [("path", &self.path), ("vehicle", &self.vehicle)] {
            if (m.height, m.width) != (h, w) {
                return bad(format!("{name} mask size differs from feature maps"));
            }
        }
        let labeled = self.entities.iter().filter(|e| e.labels.is_some()).count();
        if labeled != 0 && labeled != self.entities.len() {
            return bad("labels must be present for all entities or none".into());
        }
        let d = self.embed_dim();
        for (i, e) in self.entities.iter().enumerate() {
            if (e.mask.height, e.mask.width) != (h, w) {
                return bad(format!("entity {i} mask size differs from feature maps"));
            }
            if e.embedding.len() != d {
                return bad(format!("entity {i} embedding width {} != {d}", e.embedding.len()));
            }
            if e.class >= CITYSCAPES_CLASSES.len() {
                return bad(format!("entity {i} class {} out of range", e.class));
            }
            if let Some(l) = e.labels {
                match l.relation {
                    Some(r) if !l.relevant => return bad(format!("entity {i} irrelevant but has relation {r:?}")),
                    None if l.relevant => return bad(format!("entity {i} relevant without relation labels")),
                    Some(r)
                        if r.mechanism >= MECHANISMS.len()
                            || r.side >= SIDES.len()
                            || r.severity >= SEVERITIES.len() =>
                    {
                        return bad(format!("entity {i} label out of range"))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

const MAGIC: &[u8; 8] = b"HATSSCN1";
const DTYPE_BITS: u8 = 0;
const DTYPE_F32: u8 = 1;

#[derive(Serialize, Deserialize)]
struct SidecarEntity {
    class: String,
    labels: Option<SidecarLabels>,
}

#[derive(Serialize, Deserialize)]
struct SidecarLabels {
    relevant: bool,
    mechanism: Option<String>,
    side: Option<String>,
    severity: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    version: u32,
    id: String,
    height: usize,
    width: usize,
    entities: Vec<SidecarEntity>,
}

fn name_of(vocab: &[&str], i: usize) -> String {
    vocab[i].to_owned()
}

fn index_of(vocab: &[&str], what: &str, v: &str) -> Result<usize> {
    vocab
        .iter()
        .position(|x| *x == v)
        .ok_or_else(|| SceneError::Archive(format!("unknown {what} {v:?}")))
}

fn write_tensor<W: Write>(w: &mut W, name: &str, dtype: u8, dims: &[usize], payload: &[u8]) -> std::io::Result<()> {
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[dtype, dims.len() as u8])?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(payload.len() as u64).to_le_bytes())?;
    w.write_all(payload)
}

fn f32_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

/// Rounds every value through `f32`, the archive's storage precision.
pub fn round_f32(values: &mut [f64]) {
    for v in values {
        *v = *v as f32 as f64;
    }
}

struct RawTensor {
    dtype: u8,
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, RawTensor)>> {
    if read_exact(r, 8)?.as_slice() != MAGIC {
        return Err(SceneError::Archive("bad magic".into()));
    }
    let count = u32::from_le_bytes(read_exact(r, 4)?.try_into().expect("4 bytes")) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(r, 2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(read_exact(r, len)?).map_err(|e| SceneError::Archive(e.to_string()))?;
        let head = read_exact(r, 2)?;
        let dims = (0..head[1])
            .map(|_| Ok(u32::from_le_bytes(read_exact(r, 4)?.try_into().expect("4 bytes")) as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = u64::from_le_bytes(read_exact(r, 8)?.try_into().expect("8 bytes")) as usize;
        let payload = read_exact(r, n)?;
        out.push((
            name,
            RawTensor {
                dtype: head[0],
                dims,
                payload,
            },
        ));
    }
    Ok(out)
}

fn take<'a>(tensors: &'a [(String, RawTensor)], name: &str) -> Result<&'a RawTensor> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| SceneError::Archive(format!("missing tensor {name}")))
}

fn as_f32(t: &RawTensor, name: &str) -> Result<Vec<f64>> {
    let n: usize = t.dims.iter().product();
    if t.dtype != DTYPE_F32 || t.payload.len() != 4 * n {
        return Err(SceneError::Archive(format!("tensor {name}: expected {n} f32 values")));
    }
    Ok(t.payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect())
}

fn as_mask(t: &RawTensor, name: &str) -> Result<Mask> {
    if t.dtype != DTYPE_BITS || t.dims.len() != 2 {
        return Err(SceneError::Archive(format!("tensor {name}: expected a 2-d bit mask")));
    }
    Mask::unpack(t.dims[0], t.dims[1], &t.payload)
}

fn as_map(t: &RawTensor, name: &str) -> Result<FeatureMap> {
    if t.dims.len() != 3 {
        return Err(SceneError::Archive(format!("tensor {name}: expected C×H×W")));
    }
    Ok(FeatureMap {
        channels: t.dims[0],
        height: t.dims[1],
        width: t.dims[2],
        data: as_f32(t, name)?,
    })
}

impl SceneSample {
    /// Writes `{dir}/{id}.bin` (named tensors) and `{dir}/{id}.json`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        self.validate()?;
        std::fs::create_dir_all(dir)?;
        let bin = dir.join(format!("{}.bin", self.id));
        let mut w = std::io::BufWriter::new(std::fs::File::create(&bin)?);
        w.write_all(MAGIC)?;
        let count = 5 + self.entities.len();
        w.write_all(&(count as u32).to_le_bytes())?;
        let map_dims = |m: &FeatureMap| vec![m.channels, m.height, m.width];
        write_tensor(
            &mut w,
            "rgb",
            DTYPE_F32,
            &map_dims(&self.rgb),
            &f32_bytes(&self.rgb.data),
        )?;
        write_tensor(
            &mut w,
            "disp",
            DTYPE_F32,
            &map_dims(&self.disp),
            &f32_bytes(&self.disp.data),
        )?;
        for (name, m) in [("path", &self.path), ("vehicle", &self.vehicle)] {
            write_tensor(&mut w, name, DTYPE_BITS, &[m.height, m.width], &m.pack())?;
        }
        let emb: Vec<f64> = self.entities.iter().flat_map(|e| e.embedding.iter().copied()).collect();
        write_tensor(
            &mut w,
            "embed",
            DTYPE_F32,
            &[self.entities.len(), self.embed_dim()],
            &f32_bytes(&emb),
        )?;
        for (i, e) in self.entities.iter().enumerate() {
            write_tensor(
                &mut w,
                &format!("entity.{i}"),
                DTYPE_BITS,
                &[e.mask.height, e.mask.width],
                &e.mask.pack(),
            )?;
        }
        w.flush()?;
        let sidecar = Sidecar {
            version: 1,
            id: self.id.clone(),
            height: self.rgb.height,
            width: self.rgb.width,
            entities: self
                .entities
                .iter()
                .map(|e| SidecarEntity {
                    class: name_of(&CITYSCAPES_CLASSES, e.class),
                    labels: e.labels.map(|l| SidecarLabels {
                        relevant: l.relevant,
                        mechanism: l.relation.map(|r| name_of(&MECHANISMS, r.mechanism)),
                        side: l.relation.map(|r| name_of(&SIDES, r.side)),
                        severity: l.relation.map(|r| name_of(&SEVERITIES, r.severity)),
                    }),
                })
                .collect(),
        };
        let json = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        std::fs::write(dir.join(format!("{}.json", self.id)), json + "\n")?;
        Ok(bin)
    }

    /// Reads a sample from its `.bin` path and the `.json` beside it.
    pub fn load(bin: &Path) -> Result<Self> {
        let tensors = read_tensors(&mut std::io::BufReader::new(std::fs::File::open(bin)?))?;
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(bin.with_extension("json"))?)
            .map_err(|e| SceneError::Archive(format!("{}: {e}", bin.with_extension("json").display())))?;
        if side.version != 1 {
            return Err(SceneError::Archive(format!(
                "unsupported sidecar version {}",
                side.version
            )));
        }
        let embed = take(&tensors, "embed")?;
        let (o, d) = match embed.dims[..] {
            [o, d] => (o, d),
            _ => return Err(SceneError::Archive("embed must be 2-d".into())),
        };
        if o != side.entities.len() {
            return Err(SceneError::Archive(format!(
                "{o} embeddings for {} entities",
                side.entities.len()
            )));
        }
        let rows = as_f32(embed, "embed")?;
        let entities = side
            .entities
            .iter()
            .enumerate()
            .map(|(i, se)| {
                let labels = match &se.labels {
                    None => None,
                    Some(l) => {
                        let relation = match (&l.mechanism, &l.side, &l.severity) {
                            (Some(m), Some(s), Some(v)) => Some(RelationLabel {
                                mechanism: index_of(&MECHANISMS, "mechanism", m)?,
                                side: index_of(&SIDES, "side", s)?,
                                severity: index_of(&SEVERITIES, "severity", v)?,
                            }),
                            (None, None, None) => None,
                            _ => return Err(SceneError::Archive(format!("entity {i}: partial relation labels"))),
                        };
                        Some(EntityLabels {
                            relevant: l.relevant,
                            relation,
                        })
                    }
                };
                Ok(Entity {
                    mask: as_mask(take(&tensors, &format!("entity.{i}"))?, "entity")?,
                    embedding: rows[i * d..(i + 1) * d].to_vec(),
                    class: index_of(&CITYSCAPES_CLASSES, "class", &se.class)?,
                    labels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let s = Self {
            id: side.id,
            rgb: as_map(take(&tensors, "rgb")?, "rgb")?,
            disp: as_map(take(&tensors, "disp")?, "disp")?,
            path: as_mask(take(&tensors, "path")?, "path")?,
            vehicle: as_mask(take(&tensors, "vehicle")?, "vehicle")?,
            entities,
        };
        if (s.rgb.height, s.rgb.width) != (side.height, side.width) {
            return Err(SceneError::Archive("sidecar size disagrees with tensors".into()));
        }
        s.validate()?;
        Ok(s)
    }
}

/// Every `*.bin` sample in `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<SceneSample>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    paths.sort();
    paths.iter().map(|p| SceneSample::load(p)).collect()
}

/// Constant per-sample inputs: every pooled vector and geometry pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneInputs {
    /// RGB pool over the path mask.
    pub path_rgb: Vec<f64>,
    /// `[rgb; disp]` pools over the path and vehicle masks.
    pub path_vis: Vec<f64>,
    pub vehicle_vis: Vec<f64>,
    /// `[rgb; disp]` pool per entity.
    pub entity_vis: Vec<Vec<f64>>,
    pub embeddings: Vec<Vec<f64>>,
    /// `(overlap, proximity)` per entity.
    pub geometry: Vec<(f64, f64)>,
    pub classes: Vec<usize>,
}

impl SceneInputs {
    pub fn from_sample(s: &SceneSample) -> Result<Self> {
        s.validate()?;
        let vis = |m: &Mask| -> Result<Vec<f64>> {
            let mut v = masked_pool(&s.rgb, m)?;
            v.extend(masked_pool(&s.disp, m)?);
            Ok(v)
        };
        Ok(Self {
            path_rgb: masked_pool(&s.rgb, &s.path)?,
            path_vis: vis(&s.path)?,
            vehicle_vis: vis(&s.vehicle)?,
            entity_vis: s.entities.iter().map(|e| vis(&e.mask)).collect::<Result<_>>()?,
            embeddings: s.entities.iter().map(|e| e.embedding.clone()).collect(),
            geometry: s
                .entities
                .iter()
                .map(|e| compute_geometry(&e.mask, &s.path, &s.vehicle))
                .collect(),
            classes: s.entities.iter().map(|e| e.class).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}
