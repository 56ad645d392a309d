//! On-disk formats and configuration: the bit-exact volume container,
//! slice stacks, dataset manifests, atlas/denoiser checkpoints, and the
//! flat key=value run configuration.
//!
//! Volume container layout (little-endian):
//!
//! ```text
//! magic "SADIRVOL" | version u32 | dims 3xu32 | spacing 3xf32
//! | channels u32 | dtype u32 (1=f32, 2=f64) | payload
//! ```
//!
//! Payload is x-fastest, channel-major. Readers validate magic, version,
//! dtype and exact payload length, and report the byte offset of any
//! malformed field.

use crate::denoiser::{DenoiserParams, DenoiserShape};
use crate::error::{Error, Result};
use crate::grid::{check_same_grid, Axis, GridSpec, ScalarVolume, VectorField};
use crate::Scalar;
use std::fmt;
use std::path::Path;

pub const VOLUME_MAGIC: &[u8; 8] = b"SADIRVOL";
pub const SLICES_MAGIC: &[u8; 8] = b"SADIRSLC";
pub const TENSORS_MAGIC: &[u8; 8] = b"SADIRTNS";
pub const FORMAT_VERSION: u32 = 1;

/// Default number of slices in a sparse stack.
pub const DEFAULT_SLICE_COUNT: usize = 8;

// ---------------------------------------------------------------------------
// Low-level byte cursor with offset-carrying errors
// ---------------------------------------------------------------------------

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], path: &Path) -> Self {
        Self {
            buf,
            pos: 0,
            path: path.display().to_string(),
        }
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail(format!(
                "truncated while reading {what}: need {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes(b.try_into().unwrap()))
    }

    fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        let got = self.take(8, "magic")?;
        if got != magic {
            self.pos = 0;
            return Err(self.fail(format!(
                "bad magic {:?} (expected {:?})",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(magic)
            )));
        }
        Ok(())
    }

    fn expect_version(&mut self) -> Result<()> {
        let at = self.pos;
        let v = self.u32("version")?;
        if v != FORMAT_VERSION {
            self.pos = at;
            return Err(self.fail(format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn expect_eof(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(format!(
                "{} trailing bytes after payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn read_payload<T: Scalar>(r: &mut Reader<'_>, dtype: u32, count: usize) -> Result<Vec<T>> {
    let width = match dtype {
        1 => 4,
        2 => 8,
        other => {
            return Err(r.fail(format!("unknown dtype {other}")));
        }
    };
    let bytes = r.take(count * width, "payload")?;
    let mut out = Vec::with_capacity(count);
    match dtype {
        1 => {
            for chunk in bytes.chunks_exact(4) {
                out.push(T::of_f64(f32::from_le_bytes(chunk.try_into().unwrap()) as f64));
            }
        }
        _ => {
            for chunk in bytes.chunks_exact(8) {
                out.push(T::of_f64(f64::from_le_bytes(chunk.try_into().unwrap())));
            }
        }
    }
    Ok(out)
}

fn grid_header(out: &mut Vec<u8>, grid: &GridSpec) {
    for d in grid.dims() {
        push_u32(out, d as u32);
    }
    for h in grid.spacing() {
        push_f32(out, h as f32);
    }
}

fn read_grid(r: &mut Reader<'_>) -> Result<GridSpec> {
    let dims = [
        r.u32("dims[0]")? as usize,
        r.u32("dims[1]")? as usize,
        r.u32("dims[2]")? as usize,
    ];
    let at = r.pos;
    let spacing = [
        r.f32("spacing[0]")? as f64,
        r.f32("spacing[1]")? as f64,
        r.f32("spacing[2]")? as f64,
    ];
    GridSpec::with_spacing(dims, spacing).map_err(|e| {
        let mut rr = Reader {
            buf: r.buf,
            pos: at,
            path: r.path.clone(),
        };
        rr.pos = at;
        rr.fail(format!("invalid grid header: {e}"))
    })
}

// ---------------------------------------------------------------------------
// Volume container
// ---------------------------------------------------------------------------

fn encode_field<T: Scalar>(grid: &GridSpec, channels: u32, data: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(44 + data.len() * std::mem::size_of::<T>());
    out.extend_from_slice(VOLUME_MAGIC);
    push_u32(&mut out, FORMAT_VERSION);
    grid_header(&mut out, grid);
    push_u32(&mut out, channels);
    push_u32(&mut out, T::DTYPE);
    for &v in data {
        v.write_le(&mut out);
    }
    out
}

fn decode_field<T: Scalar>(path: &Path, bytes: &[u8]) -> Result<(GridSpec, u32, Vec<T>)> {
    let mut r = Reader::new(bytes, path);
    r.expect_magic(VOLUME_MAGIC)?;
    r.expect_version()?;
    let grid = read_grid(&mut r)?;
    let channels = r.u32("channels")?;
    if channels == 0 {
        return Err(r.fail("channel count must be positive"));
    }
    let dtype = r.u32("dtype")?;
    let data = read_payload::<T>(&mut r, dtype, channels as usize * grid.len())?;
    r.expect_eof()?;
    Ok((grid, channels, data))
}

/// Write a scalar volume to the container format.
pub fn write_volume<T: Scalar>(path: &Path, vol: &ScalarVolume<T>) -> Result<()> {
    std::fs::write(path, encode_field(vol.grid(), 1, vol.data()))?;
    Ok(())
}

/// Read a scalar volume; the stored dtype is converted to `T` if needed.
pub fn read_volume<T: Scalar>(path: &Path) -> Result<ScalarVolume<T>> {
    let bytes = std::fs::read(path)?;
    let (grid, channels, data) = decode_field::<T>(path, &bytes)?;
    if channels != 1 {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 36,
            message: format!("expected a 1-channel scalar volume, found {channels} channels"),
        });
    }
    ScalarVolume::from_vec(grid, data)
}

/// Write a 3-channel vector field to the container format.
pub fn write_vector_field<T: Scalar>(path: &Path, field: &VectorField<T>) -> Result<()> {
    std::fs::write(path, encode_field(field.grid(), 3, field.data()))?;
    Ok(())
}

pub fn read_vector_field<T: Scalar>(path: &Path) -> Result<VectorField<T>> {
    let bytes = std::fs::read(path)?;
    let (grid, channels, data) = decode_field::<T>(path, &bytes)?;
    if channels != 3 {
        return Err(Error::Format {
            path: path.display().to_string(),
            offset: 36,
            message: format!("expected a 3-channel vector field, found {channels} channels"),
        });
    }
    VectorField::from_vec(grid, data)
}

// ---------------------------------------------------------------------------
// Sparse slice stacks
// ---------------------------------------------------------------------------

/// A sparse stack of 2D planes extracted from a volume along one axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceStack<T: Scalar> {
    axis: Axis,
    indices: Vec<usize>,
    planes: Vec<Vec<T>>,
    source_grid: GridSpec,
}

impl<T: Scalar> SliceStack<T> {
    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn planes(&self) -> &[Vec<T>] {
        &self.planes
    }

    pub fn source_grid(&self) -> &GridSpec {
        &self.source_grid
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// The two in-plane axes (ascending) for a slicing axis.
fn plane_axes(axis: Axis) -> (usize, usize) {
    match axis {
        Axis::X => (1, 2),
        Axis::Y => (0, 2),
        Axis::Z => (0, 1),
    }
}

/// Extract `count` equispaced planes at indices round((i + 0.5) * D /
/// count), clipped to bounds and deduplicated. Exact halves round down so
/// `count == D` selects every plane.
pub fn extract_slices<T: Scalar>(
    vol: &ScalarVolume<T>,
    axis: Axis,
    count: usize,
) -> Result<SliceStack<T>> {
    let grid = *vol.grid();
    let d = grid.dims()[axis.index()];
    if count < 1 || count > d {
        return Err(Error::InvalidParameter(format!(
            "slice count {count} out of range for axis dim {d}"
        )));
    }
    let mut indices: Vec<usize> = (0..count)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * d as f64 / count as f64 - 0.5).ceil() as usize;
            pos.min(d - 1)
        })
        .collect();
    indices.dedup();

    let (a1, a2) = plane_axes(axis);
    let dims = grid.dims();
    let strides = grid.strides();
    let planes = indices
        .iter()
        .map(|&k| {
            let mut plane = Vec::with_capacity(dims[a1] * dims[a2]);
            for j2 in 0..dims[a2] {
                for j1 in 0..dims[a1] {
                    let idx = k * strides[axis.index()] + j1 * strides[a1] + j2 * strides[a2];
                    plane.push(vol.data()[idx]);
                }
            }
            plane
        })
        .collect();

    Ok(SliceStack {
        axis,
        indices,
        planes,
        source_grid: grid,
    })
}

/// Embed a slice stack into an otherwise-zero volume plus a binary mask of
/// its planes.
pub fn embed_slices<T: Scalar>(
    stack: &SliceStack<T>,
    grid: &GridSpec,
) -> Result<(ScalarVolume<T>, ScalarVolume<T>)> {
    check_same_grid("embed_slices", &stack.source_grid, grid)?;
    let (a1, a2) = plane_axes(stack.axis);
    let dims = grid.dims();
    let strides = grid.strides();
    let mut embedded = ScalarVolume::zeros(*grid);
    let mut mask = ScalarVolume::zeros(*grid);
    for (&k, plane) in stack.indices.iter().zip(&stack.planes) {
        let mut p = 0;
        for j2 in 0..dims[a2] {
            for j1 in 0..dims[a1] {
                let idx = k * strides[stack.axis.index()] + j1 * strides[a1] + j2 * strides[a2];
                embedded.data_mut()[idx] = plane[p];
                mask.data_mut()[idx] = T::one();
                p += 1;
            }
        }
    }
    Ok((embedded, mask))
}

/// Slice-stack container:
/// magic | version | axis u32 | count u32 | dims | spacing | dtype | indices | planes.
pub fn write_slice_stack<T: Scalar>(path: &Path, stack: &SliceStack<T>) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(SLICES_MAGIC);
    push_u32(&mut out, FORMAT_VERSION);
    push_u32(&mut out, stack.axis.index() as u32);
    push_u32(&mut out, stack.indices.len() as u32);
    grid_header(&mut out, &stack.source_grid);
    push_u32(&mut out, T::DTYPE);
    for &i in &stack.indices {
        push_u32(&mut out, i as u32);
    }
    for plane in &stack.planes {
        for &v in plane {
            v.write_le(&mut out);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_slice_stack<T: Scalar>(path: &Path) -> Result<SliceStack<T>> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes, path);
    r.expect_magic(SLICES_MAGIC)?;
    r.expect_version()?;
    let axis_at = r.pos;
    let axis = match r.u32("axis")? {
        0 => Axis::X,
        1 => Axis::Y,
        2 => Axis::Z,
        other => {
            r.pos = axis_at;
            return Err(r.fail(format!("invalid axis tag {other}")));
        }
    };
    let count = r.u32("count")? as usize;
    let grid = read_grid(&mut r)?;
    let dtype = r.u32("dtype")?;
    let d = grid.dims()[axis.index()];
    let mut indices = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.pos;
        let idx = r.u32("slice index")? as usize;
        if idx >= d || indices.last().is_some_and(|&last| idx <= last) {
            r.pos = at;
            return Err(r.fail(format!("slice indices must be sorted, distinct and < {d}")));
        }
        indices.push(idx);
    }
    let (a1, a2) = plane_axes(axis);
    let plane_len = grid.dims()[a1] * grid.dims()[a2];
    let mut planes = Vec::with_capacity(count);
    for _ in 0..count {
        planes.push(read_payload::<T>(&mut r, dtype, plane_len)?);
    }
    r.expect_eof()?;
    Ok(SliceStack {
        axis,
        indices,
        planes,
        source_grid: grid,
    })
}

// ---------------------------------------------------------------------------
// Dataset manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Usage(format!("unknown split {other:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One dataset subject: volume path plus optional slice stack and
/// ground-truth initial velocity, all relative to the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectEntry {
    pub volume: String,
    pub slices: Option<String>,
    pub true_v0: Option<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub template: Option<String>,
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    pub fn subjects_in(&self, split: Split) -> impl Iterator<Item = (usize, &SubjectEntry)> {
        self.subjects
            .iter()
            .enumerate()
            .filter(move |(_, s)| s.split == split)
    }

    pub fn render(&self) -> String {
        let mut out = String::from("sadir-manifest v1\n");
        if let Some(t) = &self.template {
            out.push_str(&format!("template {t}\n"));
        }
        for s in &self.subjects {
            out.push_str(&format!("subject split={} vol={}", s.split, s.volume));
            if let Some(sl) = &s.slices {
                out.push_str(&format!(" slices={sl}"));
            }
            if let Some(v0) = &s.true_v0 {
                out.push_str(&format!(" v0={v0}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("sadir-manifest v1") => {}
            other => {
                return Err(Error::Usage(format!(
                    "not a dataset manifest (header {other:?})"
                )));
            }
        }
        let mut manifest = DatasetManifest::default();
        for line in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(t) = line.strip_prefix("template ") {
                manifest.template = Some(t.trim().to_string());
                continue;
            }
            let body = line.strip_prefix("subject ").ok_or_else(|| {
                Error::Usage(format!("unrecognized manifest line {line:?}"))
            })?;
            let mut split = None;
            let mut vol = None;
            let mut slices = None;
            let mut v0 = None;
            for field in body.split_whitespace() {
                let (key, value) = field.split_once('=').ok_or_else(|| {
                    Error::Usage(format!("malformed subject field {field:?}"))
                })?;
                match key {
                    "split" => split = Some(Split::parse(value)?),
                    "vol" => vol = Some(value.to_string()),
                    "slices" => slices = Some(value.to_string()),
                    "v0" => v0 = Some(value.to_string()),
                    other => {
                        return Err(Error::Usage(format!(
                            "unknown subject field {other:?}"
                        )));
                    }
                }
            }
            manifest.subjects.push(SubjectEntry {
                volume: vol
                    .ok_or_else(|| Error::Usage("subject entry missing vol=".into()))?,
                slices,
                true_v0: v0,
                split: split
                    .ok_or_else(|| Error::Usage("subject entry missing split=".into()))?,
            });
        }
        Ok(manifest)
    }
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    std::fs::write(path, manifest.render())?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    DatasetManifest::parse(&text)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Save the atlas state as volume files plus a metadata record in `dir`.
pub fn save_atlas_state<T: Scalar>(dir: &Path, state: &crate::atlas::AtlasState<T>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_volume(&dir.join("atlas.svol"), &state.atlas)?;
    for (n, v) in state.velocities.iter().enumerate() {
        write_vector_field(&dir.join(format!("velocity_{n:03}.svol")), v)?;
    }
    let mut meta = format!(
        "sigma={}\nsubjects={}\n",
        state.sigma.into_f64(),
        state.velocities.len()
    );
    for e in &state.energy_trace {
        meta.push_str(&format!("energy={e}\n"));
    }
    std::fs::write(dir.join("atlas_meta.txt"), meta)?;
    Ok(())
}

pub fn load_atlas_state<T: Scalar>(dir: &Path) -> Result<crate::atlas::AtlasState<T>> {
    let atlas = read_volume::<T>(&dir.join("atlas.svol"))?;
    let meta = std::fs::read_to_string(dir.join("atlas_meta.txt"))?;
    let mut sigma = None;
    let mut count = None;
    let mut trace = Vec::new();
    for line in meta.lines() {
        if let Some(v) = line.strip_prefix("sigma=") {
            sigma = v.parse::<f64>().ok();
        } else if let Some(v) = line.strip_prefix("subjects=") {
            count = v.parse::<usize>().ok();
        } else if let Some(v) = line.strip_prefix("energy=") {
            if let Ok(e) = v.parse::<f64>() {
                trace.push(e);
            }
        }
    }
    let sigma =
        sigma.ok_or_else(|| Error::Usage("atlas_meta.txt is missing sigma=".into()))?;
    let count =
        count.ok_or_else(|| Error::Usage("atlas_meta.txt is missing subjects=".into()))?;
    let mut velocities = Vec::with_capacity(count);
    for n in 0..count {
        velocities.push(read_vector_field::<T>(
            &dir.join(format!("velocity_{n:03}.svol")),
        )?);
    }
    Ok(crate::atlas::AtlasState {
        atlas,
        velocities,
        sigma: T::of_f64(sigma),
        energy_trace: trace,
    })
}

/// Named-tensor container used for denoiser checkpoints.
pub fn write_tensors<T: Scalar>(path: &Path, tensors: &[(String, Vec<usize>, &[T])]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(TENSORS_MAGIC);
    push_u32(&mut out, FORMAT_VERSION);
    push_u32(&mut out, tensors.len() as u32);
    for (name, dims, data) in tensors {
        push_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        push_u32(&mut out, T::DTYPE);
        push_u32(&mut out, dims.len() as u32);
        let expected: usize = dims.iter().product();
        debug_assert_eq!(expected, data.len());
        for &d in dims {
            push_u32(&mut out, d as u32);
        }
        for &v in *data {
            v.write_le(&mut out);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_tensors<T: Scalar>(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<T>)>> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader::new(&bytes, path);
    r.expect_magic(TENSORS_MAGIC)?;
    r.expect_version()?;
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name_at = r.pos;
        let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec()).map_err(|_| {
            let mut rr = Reader {
                buf: &bytes,
                pos: name_at,
                path: path.display().to_string(),
            };
            rr.pos = name_at;
            rr.fail("tensor name is not valid utf-8")
        })?;
        let dtype = r.u32("dtype")?;
        let ndim = r.u32("ndim")? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32("dim")? as usize);
        }
        let len: usize = dims.iter().product();
        let data = read_payload::<T>(&mut r, dtype, len)?;
        out.push((name, dims, data));
    }
    r.expect_eof()?;
    Ok(out)
}

/// Save denoiser parameters as named tensors (plus a hyperparameter record).
pub fn save_denoiser<T: Scalar>(path: &Path, params: &DenoiserParams<T>) -> Result<()> {
    let shape = params.shape();
    let hyper: Vec<T> = [
        shape.channels,
        shape.blocks,
        shape.embed_dim,
        shape.se_reduction,
    ]
    .iter()
    .map(|&v| T::of_f64(v as f64))
    .collect();
    let mut tensors: Vec<(String, Vec<usize>, &[T])> =
        vec![("hyperparams".to_string(), vec![4], hyper.as_slice())];
    let slots = params.tensors();
    for slot in &slots {
        tensors.push((
            slot.name.clone(),
            vec![slot.len],
            &params.data()[slot.offset..slot.offset + slot.len],
        ));
    }
    write_tensors(path, &tensors)
}

pub fn load_denoiser<T: Scalar>(path: &Path) -> Result<DenoiserParams<T>> {
    let tensors = read_tensors::<T>(path)?;
    let hyper = tensors
        .iter()
        .find(|(name, _, _)| name == "hyperparams")
        .ok_or_else(|| Error::Usage("denoiser checkpoint is missing hyperparams".into()))?;
    if hyper.2.len() != 4 {
        return Err(Error::Usage("denoiser hyperparams must have 4 entries".into()));
    }
    let shape = DenoiserShape {
        channels: hyper.2[0].into_f64() as usize,
        blocks: hyper.2[1].into_f64() as usize,
        embed_dim: hyper.2[2].into_f64() as usize,
        se_reduction: hyper.2[3].into_f64() as usize,
    };
    let template = DenoiserParams::<T>::from_raw(shape, vec![T::zero(); shape.parameter_count()?])?;
    let mut data = vec![T::zero(); template.len()];
    for slot in template.tensors() {
        let found = tensors
            .iter()
            .find(|(name, _, _)| *name == slot.name)
            .ok_or_else(|| {
                Error::Usage(format!("denoiser checkpoint is missing tensor {}", slot.name))
            })?;
        if found.2.len() != slot.len {
            return Err(Error::Usage(format!(
                "tensor {} has length {} (expected {})",
                slot.name,
                found.2.len(),
                slot.len
            )));
        }
        data[slot.offset..slot.offset + slot.len].copy_from_slice(&found.2);
    }
    DenoiserParams::from_raw(shape, data)
}

// ---------------------------------------------------------------------------
// Run configuration (flat key=value)
// ---------------------------------------------------------------------------

/// Every tunable of the pipeline, with desk-scale defaults. Parsed from a
/// flat key=value file (# comments allowed); CLI flags override afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // metric
    pub alpha: f64,
    pub gamma: f64,
    pub power: u32,
    // shooting
    pub shoot_steps: usize,
    // atlas
    pub sigma: f64,
    pub outer_iters: usize,
    pub velocity_steps: usize,
    pub atlas_steps: usize,
    pub lr_velocity: f64,
    pub lr_atlas: f64,
    pub reg_weight: f64,
    // diffusion
    pub t_max: usize,
    pub beta_start: Option<f64>,
    pub beta_end: Option<f64>,
    pub init_std: f64,
    pub band_fraction: f64,
    /// Componentwise clean-estimate clamp during sampling; 0 disables it.
    pub x0_clamp: f64,
    /// Per-step sampling noise scale (0 = deterministic chain).
    pub sampler_noise: f64,
    // denoiser
    pub channels: usize,
    pub blocks: usize,
    pub embed_dim: usize,
    pub se_reduction: usize,
    // training
    pub lambda: f64,
    pub eta: f64,
    pub eps_loss_weight: f64,
    pub epochs: usize,
    pub alternation_period: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    // data
    pub slice_count: usize,
    pub slice_axis: Axis,
    pub deform_scale: f64,
    pub template: String,
    pub threshold: f64,
    // variational baseline
    pub var_iters: usize,
    pub var_lr: f64,
    pub var_eta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Usage(format!(
                "unknown optimizer {other:?} (expected adam or sgd)"
            ))),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            alpha: crate::metric::DEFAULT_ALPHA,
            gamma: crate::metric::DEFAULT_GAMMA,
            power: crate::metric::DEFAULT_POWER,
            shoot_steps: crate::geodesic::DEFAULT_STEPS,
            sigma: crate::atlas::DEFAULT_SIGMA,
            outer_iters: 50,
            velocity_steps: 3,
            atlas_steps: 2,
            lr_velocity: 2e-4,
            lr_atlas: 2e-5,
            reg_weight: 0.0,
            t_max: 50,
            beta_start: None,
            beta_end: None,
            // unit-variance start matches the unit-variance forward steps;
            // the diffusion module's own sample() default remains 0.1
            init_std: 1.0,
            band_fraction: crate::pipeline::DEFAULT_BAND_FRACTION,
            x0_clamp: 3.0,
            sampler_noise: 0.0,
            channels: crate::denoiser::DEFAULT_CHANNELS,
            blocks: crate::denoiser::DEFAULT_BLOCKS,
            embed_dim: crate::denoiser::DEFAULT_EMBED_DIM,
            se_reduction: crate::denoiser::DEFAULT_SE_REDUCTION,
            lambda: 1.0,
            eta: 0.5,
            eps_loss_weight: 1.0,
            epochs: 30,
            alternation_period: 3,
            lr: 1e-3,
            weight_decay: 0.0,
            optimizer: OptimizerKind::Adam,
            slice_count: DEFAULT_SLICE_COUNT,
            slice_axis: Axis::Z,
            deform_scale: 1.5,
            template: "two-lobe-bump".to_string(),
            threshold: crate::metrics::DEFAULT_THRESHOLD,
            var_iters: 80,
            var_lr: 2e-4,
            var_eta: 0.5,
        }
    }
}

impl RunConfig {
    /// Apply one key=value pair; unknown keys are reported by name.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value.parse().map_err(|_| {
                Error::Usage(format!("config value for {key} is invalid: {value:?}"))
            })
        }
        match key {
            "alpha" => self.alpha = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "power" => self.power = num(key, value)?,
            "shoot_steps" => self.shoot_steps = num(key, value)?,
            "sigma" => self.sigma = num(key, value)?,
            "outer_iters" => self.outer_iters = num(key, value)?,
            "velocity_steps" => self.velocity_steps = num(key, value)?,
            "atlas_steps" => self.atlas_steps = num(key, value)?,
            "lr_velocity" => self.lr_velocity = num(key, value)?,
            "lr_atlas" => self.lr_atlas = num(key, value)?,
            "reg_weight" => self.reg_weight = num(key, value)?,
            "t_max" => self.t_max = num(key, value)?,
            "beta_start" => self.beta_start = Some(num(key, value)?),
            "beta_end" => self.beta_end = Some(num(key, value)?),
            "init_std" => self.init_std = num(key, value)?,
            "band_fraction" => self.band_fraction = num(key, value)?,
            "x0_clamp" => self.x0_clamp = num(key, value)?,
            "sampler_noise" => self.sampler_noise = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "blocks" => self.blocks = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "se_reduction" => self.se_reduction = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "eta" => self.eta = num(key, value)?,
            "eps_loss_weight" => self.eps_loss_weight = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "alternation_period" => self.alternation_period = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "optimizer" => self.optimizer = OptimizerKind::parse(value)?,
            "slice_count" => self.slice_count = num(key, value)?,
            "slice_axis" => self.slice_axis = Axis::parse(value)?,
            "deform_scale" => self.deform_scale = num(key, value)?,
            "template" => self.template = value.to_string(),
            "threshold" => self.threshold = num(key, value)?,
            "var_iters" => self.var_iters = num(key, value)?,
            "var_lr" => self.var_lr = num(key, value)?,
            "var_eta" => self.var_eta = num(key, value)?,
            _ => {
                return Err(Error::Usage(format!("unknown config key {key:?}")));
            }
        }
        Ok(())
    }

    /// Parse a whole config file; unknown keys are collected and listed.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let mut unknown = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Usage(format!(
                    "{}:{}: expected key=value, got {raw:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            match self.apply(key.trim(), value.trim()) {
                Ok(()) => {}
                Err(Error::Usage(msg)) if msg.starts_with("unknown config key") => {
                    unknown.push(key.trim().to_string());
                }
                Err(e) => return Err(e),
            }
        }
        if !unknown.is_empty() {
            return Err(Error::Usage(format!(
                "unknown config keys: {}",
                unknown.join(", ")
            )));
        }
        Ok(())
    }

    /// The noise schedule implied by the config: explicit endpoints when
    /// both are set, otherwise endpoints scaled to the step count.
    pub fn noise_schedule<T: Scalar>(&self) -> Result<crate::diffusion::NoiseSchedule<T>> {
        match (self.beta_start, self.beta_end) {
            (Some(s), Some(e)) => crate::diffusion::NoiseSchedule::linear(self.t_max, s, e),
            (None, None) => crate::diffusion::NoiseSchedule::scaled_linear(self.t_max),
            _ => Err(Error::Usage(
                "beta_start and beta_end must be set together".into(),
            )),
        }
    }
}
