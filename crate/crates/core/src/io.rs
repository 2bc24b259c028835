//! File formats: raw volumes with structured-text sidecar headers,
//! run-length-encoded annotations, binary weight files with an embedded
//! config snapshot, and evaluation / cross-validation reports.
//!
//! All writers are deterministic (fixed field order, shortest round-trip
//! float formatting) and atomic (write to a temp file, then rename), so a
//! failed save never leaves a partial file and identical inputs produce
//! byte-identical outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::detect::Detection;
use crate::error::{Error, Result};
use crate::eval::{
    format_mean_std, format_percent1, format_percent2, AneurysmOutcome, CaseEval, CrossvalSummary,
    DetectionOutcome, EvalReport, SizeBin, SIZE_BIN_LABELS,
};
use crate::model::{AttentionPosition, Model, NetworkConfig};
use crate::tensor::Tensor;
use crate::volume::Volume;

pub const VOLUME_MAGIC: &str = "# aneuscan volume v1";
pub const ANNOTATION_MAGIC: &str = "# aneuscan annotation v1";
pub const REPORT_MAGIC: &str = "# aneuscan report v1";
pub const CROSSVAL_MAGIC: &str = "# aneuscan crossval v1";
pub const WEIGHTS_MAGIC: &[u8; 7] = b"AWNET1\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeDtype {
    F32,
    I16,
}

impl VolumeDtype {
    fn as_str(self) -> &'static str {
        match self {
            VolumeDtype::F32 => "f32",
            VolumeDtype::I16 => "i16",
        }
    }

    fn size(self) -> usize {
        match self {
            VolumeDtype::F32 => 4,
            VolumeDtype::I16 => 2,
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp_name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?
        .to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Ordered key:value reader for text headers with line-number diagnostics.
struct FieldReader<'a> {
    path: &'a Path,
    lines: Vec<&'a str>,
    pos: usize,
}

impl<'a> FieldReader<'a> {
    fn new(path: &'a Path, text: &'a str, magic: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.first() != Some(&magic) {
            return Err(Error::format(
                path,
                "magic",
                "line 1",
                format!("expected `{magic}`"),
            ));
        }
        Ok(Self {
            path,
            lines,
            pos: 1,
        })
    }

    fn line_no(&self) -> usize {
        self.pos + 1
    }

    fn next_field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.lines.get(self.pos).copied().ok_or_else(|| {
            Error::format(
                self.path,
                key,
                format!("line {}", self.line_no()),
                "unexpected end of file",
            )
        })?;
        let value = line.strip_prefix(&format!("{key}: ")).ok_or_else(|| {
            Error::format(
                self.path,
                key,
                format!("line {}", self.line_no()),
                format!("expected `{key}: ...`, found `{line}`"),
            )
        })?;
        self.pos += 1;
        Ok(value)
    }

    /// Remaining lines (for repeated records after the fixed header).
    fn rest(self) -> (Vec<&'a str>, usize) {
        (self.lines[self.pos..].to_vec(), self.pos + 1)
    }
}

fn parse_usize3(path: &Path, field: &str, line: usize, s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::format(
            path,
            field,
            format!("line {line}"),
            format!("expected three integers, found `{s}`"),
        ));
    }
    let mut out = [0usize; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p.parse().map_err(|_| {
            Error::format(
                path,
                field,
                format!("line {line}"),
                format!("invalid integer `{p}`"),
            )
        })?;
    }
    Ok(out)
}

fn parse_f64_triplet(path: &Path, field: &str, line: usize, s: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::format(
            path,
            field,
            format!("line {line}"),
            format!("expected three reals, found `{s}`"),
        ));
    }
    let mut out = [0f64; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p.parse().map_err(|_| {
            Error::format(
                path,
                field,
                format!("line {line}"),
                format!("invalid real `{p}`"),
            )
        })?;
    }
    Ok(out)
}

/// Payload file name for a volume header path: same stem, `.vraw` extension.
pub fn payload_name(header_path: &Path) -> PathBuf {
    header_path.with_extension("vraw")
}

/// Write `<path>` (a `.vhdr` sidecar) plus the raw payload alongside it.
pub fn save_volume(path: &Path, vol: &Volume, dtype: VolumeDtype) -> Result<()> {
    let payload_path = payload_name(path);
    let payload_file = payload_path
        .file_name()
        .expect("payload path has a file name")
        .to_string_lossy()
        .into_owned();
    let [nx, ny, nz] = vol.dims();
    let [sx, sy, sz] = vol.spacing();
    let mut header = String::new();
    let _ = writeln!(header, "{VOLUME_MAGIC}");
    let _ = writeln!(header, "dims: {nx} {ny} {nz}");
    let _ = writeln!(header, "spacing: {sx} {sy} {sz}");
    let _ = writeln!(header, "dtype: {}", dtype.as_str());
    let _ = writeln!(header, "byte_order: little");
    let _ = writeln!(header, "order: x-fastest");
    let _ = writeln!(header, "payload: {payload_file}");

    let mut bytes = Vec::with_capacity(vol.len() * dtype.size());
    match dtype {
        VolumeDtype::F32 => {
            for &v in vol.voxels() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        VolumeDtype::I16 => {
            for &v in vol.voxels() {
                let q = v.round().clamp(i16::MIN as f32, i16::MAX as f32) as i16;
                bytes.extend_from_slice(&q.to_le_bytes());
            }
        }
    }
    write_atomic(&payload_path, &bytes)?;
    write_atomic(path, header.as_bytes())
}

pub fn load_volume(path: &Path) -> Result<Volume> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = FieldReader::new(path, &text, VOLUME_MAGIC)?;
    let dims = {
        let line = r.line_no();
        let v = r.next_field("dims")?;
        parse_usize3(path, "dims", line, v)?
    };
    let spacing = {
        let line = r.line_no();
        let v = r.next_field("spacing")?;
        parse_f64_triplet(path, "spacing", line, v)?
    };
    let dtype_line = r.line_no();
    let dtype = match r.next_field("dtype")? {
        "f32" => VolumeDtype::F32,
        "i16" => VolumeDtype::I16,
        other => {
            return Err(Error::format(
                path,
                "dtype",
                format!("line {dtype_line}"),
                format!("unknown dtype `{other}`"),
            ))
        }
    };
    let bo_line = r.line_no();
    let bo = r.next_field("byte_order")?;
    if bo != "little" {
        return Err(Error::format(
            path,
            "byte_order",
            format!("line {bo_line}"),
            format!("only `little` is supported, found `{bo}`"),
        ));
    }
    let order_line = r.line_no();
    let order = r.next_field("order")?;
    if order != "x-fastest" {
        return Err(Error::format(
            path,
            "order",
            format!("line {order_line}"),
            format!("only `x-fastest` is supported, found `{order}`"),
        ));
    }
    let payload_file = r.next_field("payload")?;
    let payload_path = path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(payload_file);

    let bytes = std::fs::read(&payload_path).map_err(|e| Error::io(&payload_path, e))?;
    let n = dims[0] * dims[1] * dims[2];
    let expected = n * dtype.size();
    if bytes.len() != expected {
        return Err(Error::format(
            &payload_path,
            "payload",
            format!("byte {}", bytes.len().min(expected)),
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let voxels: Vec<f32> = match dtype {
        VolumeDtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        VolumeDtype::I16 => bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
    };
    Volume::new(dims, spacing, voxels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedAneurysm {
    /// Sorted flat voxel indices (x-fastest).
    pub voxels: Vec<usize>,
    pub diameter_mm: f64,
    pub location: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub case_id: String,
    pub dims: [usize; 3],
    pub aneurysms: Vec<AnnotatedAneurysm>,
}

/// Runs of consecutive indices as `start+len` tokens.
pub fn encode_rle(sorted_voxels: &[usize]) -> String {
    let mut runs: Vec<(usize, usize)> = Vec::new();
    for &v in sorted_voxels {
        match runs.last_mut() {
            Some((start, len)) if *start + *len == v => *len += 1,
            _ => runs.push((v, 1)),
        }
    }
    runs.iter()
        .map(|(s, l)| format!("{s}+{l}"))
        .collect::<Vec<_>>()
        .join(",")
}

pub fn decode_rle(path: &Path, line: usize, s: &str, n_voxels: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    if s.is_empty() {
        return Err(Error::format(
            path,
            "runs",
            format!("line {line}"),
            "empty run list",
        ));
    }
    for tok in s.split(',') {
        let (start, len) = tok.split_once('+').ok_or_else(|| {
            Error::format(
                path,
                "runs",
                format!("line {line}"),
                format!("run `{tok}` is not start+len"),
            )
        })?;
        let start: usize = start.parse().map_err(|_| {
            Error::format(path, "runs", format!("line {line}"), format!("bad start in `{tok}`"))
        })?;
        let len: usize = len.parse().map_err(|_| {
            Error::format(path, "runs", format!("line {line}"), format!("bad length in `{tok}`"))
        })?;
        if len == 0 || start + len > n_voxels {
            return Err(Error::format(
                path,
                "runs",
                format!("line {line}"),
                format!("run `{tok}` escapes the volume ({n_voxels} voxels)"),
            ));
        }
        if let Some(&last) = out.last() {
            if start <= last {
                return Err(Error::format(
                    path,
                    "runs",
                    format!("line {line}"),
                    format!("run `{tok}` overlaps or is out of order"),
                ));
            }
        }
        out.extend(start..start + len);
    }
    Ok(out)
}

pub fn save_annotation(path: &Path, annot: &Annotation) -> Result<()> {
    if annot.case_id.contains(char::is_whitespace) || annot.case_id.is_empty() {
        return Err(Error::format(
            path,
            "case",
            "write",
            "case id must be non-empty without whitespace",
        ));
    }
    let mut text = String::new();
    let _ = writeln!(text, "{ANNOTATION_MAGIC}");
    let _ = writeln!(text, "case: {}", annot.case_id);
    let _ = writeln!(
        text,
        "dims: {} {} {}",
        annot.dims[0], annot.dims[1], annot.dims[2]
    );
    for a in &annot.aneurysms {
        let mut line = format!("aneurysm: diameter_mm={}", a.diameter_mm);
        if let Some(loc) = &a.location {
            let _ = write!(line, " location={loc}");
        }
        let _ = write!(line, " runs={}", encode_rle(&a.voxels));
        let _ = writeln!(text, "{line}");
    }
    write_atomic(path, text.as_bytes())
}

pub fn load_annotation(path: &Path) -> Result<Annotation> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = FieldReader::new(path, &text, ANNOTATION_MAGIC)?;
    let case_id = r.next_field("case")?.to_string();
    let dims = {
        let line = r.line_no();
        let v = r.next_field("dims")?;
        parse_usize3(path, "dims", line, v)?
    };
    let n = dims[0] * dims[1] * dims[2];
    let (rest, first_line) = r.rest();
    let mut aneurysms = Vec::new();
    for (i, line) in rest.iter().enumerate() {
        let line_no = first_line + i;
        if line.is_empty() {
            continue;
        }
        let body = line.strip_prefix("aneurysm: ").ok_or_else(|| {
            Error::format(
                path,
                "aneurysm",
                format!("line {line_no}"),
                format!("expected `aneurysm: ...`, found `{line}`"),
            )
        })?;
        let mut diameter = None;
        let mut location = None;
        let mut voxels = None;
        for tok in body.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| {
                Error::format(
                    path,
                    "aneurysm",
                    format!("line {line_no}"),
                    format!("token `{tok}` is not key=value"),
                )
            })?;
            match k {
                "diameter_mm" => {
                    let d: f64 = v.parse().map_err(|_| {
                        Error::format(
                            path,
                            "diameter_mm",
                            format!("line {line_no}"),
                            format!("invalid real `{v}`"),
                        )
                    })?;
                    if d <= 0.0 {
                        return Err(Error::format(
                            path,
                            "diameter_mm",
                            format!("line {line_no}"),
                            "diameter must be > 0",
                        ));
                    }
                    diameter = Some(d);
                }
                "location" => location = Some(v.to_string()),
                "runs" => voxels = Some(decode_rle(path, line_no, v, n)?),
                other => {
                    return Err(Error::format(
                        path,
                        other,
                        format!("line {line_no}"),
                        "unknown aneurysm field",
                    ))
                }
            }
        }
        let diameter_mm = diameter.ok_or_else(|| {
            Error::format(path, "diameter_mm", format!("line {line_no}"), "missing")
        })?;
        let voxels = voxels
            .ok_or_else(|| Error::format(path, "runs", format!("line {line_no}"), "missing"))?;
        aneurysms.push(AnnotatedAneurysm {
            voxels,
            diameter_mm,
            location,
        });
    }
    Ok(Annotation {
        case_id,
        dims,
        aneurysms,
    })
}

fn config_lines(config: &NetworkConfig) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "levels: {}", config.levels);
    let _ = writeln!(s, "base_channels: {}", config.base_channels);
    let _ = writeln!(s, "p_drop: {}", config.p_drop);
    let _ = writeln!(s, "leaky_slope: {}", config.leaky_slope);
    let _ = writeln!(s, "se_ratio: {}", config.se_ratio);
    let _ = writeln!(s, "attention: {}", config.attention.as_str());
    let _ = writeln!(s, "out_classes: {}", config.out_classes);
    let _ = writeln!(s, "input_dims: {}", config.input_dims);
    s
}

fn parse_config(path: &Path, r: &mut FieldReader<'_>) -> Result<NetworkConfig> {
    fn field<T: std::str::FromStr>(
        path: &Path,
        r: &mut FieldReader<'_>,
        key: &'static str,
    ) -> Result<T> {
        let line = r.line_no();
        let v = r.next_field(key)?;
        v.parse().map_err(|_| {
            Error::format(
                path,
                key,
                format!("line {line}"),
                format!("invalid value `{v}`"),
            )
        })
    }
    let levels = field(path, r, "levels")?;
    let base_channels = field(path, r, "base_channels")?;
    let p_drop = field(path, r, "p_drop")?;
    let leaky_slope = field(path, r, "leaky_slope")?;
    let se_ratio = field(path, r, "se_ratio")?;
    let attention_line = r.line_no();
    let attention = AttentionPosition::parse(r.next_field("attention")?).map_err(|e| {
        Error::format(path, "attention", format!("line {attention_line}"), e.to_string())
    })?;
    let out_classes = field(path, r, "out_classes")?;
    let input_dims = field(path, r, "input_dims")?;
    Ok(NetworkConfig {
        levels,
        base_channels,
        p_drop,
        leaky_slope,
        se_ratio,
        attention,
        out_classes,
        input_dims,
    })
}

/// Save the network config for a run directory.
pub fn save_config(path: &Path, config: &NetworkConfig) -> Result<()> {
    let text = format!("# aneuscan config v1\n{}", config_lines(config));
    write_atomic(path, text.as_bytes())
}

pub fn load_config(path: &Path) -> Result<NetworkConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = FieldReader::new(path, &text, "# aneuscan config v1")?;
    parse_config(path, &mut r)
}

/// Binary weights: magic, u64 LE header length, text header (config snapshot
/// plus the ordered parameter manifest), then the little-endian f32 payload.
pub fn save_weights(path: &Path, model: &Model<f32>) -> Result<()> {
    let mut header = config_lines(&model.config);
    for (name, tensor) in model.names().iter().zip(model.params()) {
        let shape = tensor.shape();
        let _ = writeln!(
            header,
            "param: {name} {},{},{},{},{}",
            shape[0], shape[1], shape[2], shape[3], shape[4]
        );
    }
    let mut bytes = Vec::new();
    bytes.extend_from_slice(WEIGHTS_MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for tensor in model.params() {
        for &v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &bytes)
}

pub fn load_weights(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < WEIGHTS_MAGIC.len() + 8 || &bytes[..7] != WEIGHTS_MAGIC {
        return Err(Error::format(path, "magic", "byte 0", "not a weights file"));
    }
    let header_len = u64::from_le_bytes(bytes[7..15].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 15 + header_len {
        return Err(Error::format(
            path,
            "header",
            "byte 15",
            format!("declared header length {header_len} exceeds file size"),
        ));
    }
    let header = std::str::from_utf8(&bytes[15..15 + header_len])
        .map_err(|_| Error::format(path, "header", "byte 15", "header is not UTF-8"))?;
    // Reuse the line reader; the header has no magic line of its own.
    let text = format!("# weights header\n{header}");
    let mut r = FieldReader::new(path, &text, "# weights header")?;
    let config = parse_config(path, &mut r)?;
    let (rest, first_line) = r.rest();

    let mut manifest: Vec<(String, [usize; 5])> = Vec::new();
    for (i, line) in rest.iter().enumerate() {
        if line.is_empty() {
            continue;
        }
        let line_no = first_line + i;
        let body = line.strip_prefix("param: ").ok_or_else(|| {
            Error::format(
                path,
                "param",
                format!("header line {line_no}"),
                format!("expected `param: ...`, found `{line}`"),
            )
        })?;
        let (name, shape_s) = body.rsplit_once(' ').ok_or_else(|| {
            Error::format(path, "param", format!("header line {line_no}"), "missing shape")
        })?;
        let dims: Vec<usize> = shape_s
            .split(',')
            .map(|p| {
                p.parse().map_err(|_| {
                    Error::format(
                        path,
                        "param",
                        format!("header line {line_no}"),
                        format!("invalid shape component `{p}`"),
                    )
                })
            })
            .collect::<Result<_>>()?;
        if dims.len() != 5 {
            return Err(Error::format(
                path,
                "param",
                format!("header line {line_no}"),
                "shape must have five components",
            ));
        }
        manifest.push((name.to_string(), [dims[0], dims[1], dims[2], dims[3], dims[4]]));
    }

    let total: usize = manifest.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let payload = &bytes[15 + header_len..];
    if payload.len() != total * 4 {
        return Err(Error::format(
            path,
            "payload",
            format!("byte {}", 15 + header_len),
            format!("expected {} bytes, found {}", total * 4, payload.len()),
        ));
    }
    let mut offset = 0usize;
    let mut named = Vec::with_capacity(manifest.len());
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = payload[offset..offset + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        offset += n * 4;
        named.push((name, Tensor::from_vec(shape, data)?));
    }
    Model::from_parts(config, named)
        .map_err(|e| Error::format(path, "param", "manifest", e.to_string()))
}

fn fmt_triplet(v: [usize; 3]) -> String {
    format!("{},{},{}", v[0], v[1], v[2])
}

fn parse_triplet(path: &Path, field: &str, line: usize, s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::format(
            path,
            field,
            format!("line {line}"),
            format!("expected a,b,c, found `{s}`"),
        ));
    }
    let mut out = [0usize; 3];
    for (i, p) in parts.iter().enumerate() {
        out[i] = p.parse().map_err(|_| {
            Error::format(path, field, format!("line {line}"), format!("bad integer `{p}`"))
        })?;
    }
    Ok(out)
}

/// Serialize an evaluation report. Aggregate lines are recomputable from the
/// per-case rows; floats use shortest round-trip formatting.
pub fn save_report(path: &Path, report: &EvalReport) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "{REPORT_MAGIC}");
    let _ = writeln!(s, "cases: {}", report.per_case.len());
    for c in &report.per_case {
        let _ = writeln!(
            s,
            "case: id={} gt={} tp={} fp={} fn={}",
            c.case_id,
            c.aneurysms.len(),
            c.tp,
            c.fp,
            c.fn_count
        );
        for (i, d) in c.detections.iter().enumerate() {
            let mut line = format!(
                "det: case={} id={} box_min={} box_size={} score={} component={}",
                c.case_id,
                i,
                fmt_triplet(d.detection.box_min),
                fmt_triplet(d.detection.box_size),
                d.detection.score,
                d.detection.component_id
            );
            match d.matched {
                Some((gi, frac)) => {
                    let _ = write!(line, " match=tp gt={gi} overlap={frac}");
                }
                None => {
                    let _ = write!(line, " match=fp");
                }
            }
            let _ = writeln!(s, "{line}");
        }
        for (i, a) in c.aneurysms.iter().enumerate() {
            let _ = writeln!(
                s,
                "gt: case={} id={} diameter_mm={} detected={}",
                c.case_id, i, a.diameter_mm, a.detected
            );
        }
    }
    let _ = writeln!(
        s,
        "aggregate: tp={} fp={} fn={}",
        report.tp, report.fp, report.fn_count
    );
    match report.sensitivity {
        Some(v) => {
            let _ = writeln!(s, "sensitivity: {v} ({})", format_percent1(v));
        }
        None => {
            let _ = writeln!(s, "sensitivity: none (no positives)");
        }
    }
    let _ = writeln!(s, "fp_per_case: {}", report.fp_per_case);
    for b in &report.size_bins {
        let _ = writeln!(
            s,
            "bin: label={} n={} detected={} sensitivity={}",
            b.label, b.total, b.detected, b.sensitivity
        );
    }
    write_atomic(path, s.as_bytes())
}

fn kv_map<'a>(
    path: &Path,
    record: &'static str,
    line_no: usize,
    body: &'a str,
) -> Result<Vec<(&'a str, &'a str)>> {
    body.split_whitespace()
        .map(|tok| {
            tok.split_once('=').ok_or_else(|| {
                Error::format(
                    path,
                    record,
                    format!("line {line_no}"),
                    format!("token `{tok}` is not key=value"),
                )
            })
        })
        .collect()
}

fn lookup<'a>(
    path: &Path,
    record: &'static str,
    line_no: usize,
    kv: &[(&'a str, &'a str)],
    key: &str,
) -> Result<&'a str> {
    kv.iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| {
            Error::format(
                path,
                record,
                format!("line {line_no}"),
                format!("missing `{key}`"),
            )
        })
}

fn parse_num<T: std::str::FromStr>(
    path: &Path,
    field: &str,
    line_no: usize,
    s: &str,
) -> Result<T> {
    s.parse().map_err(|_| {
        Error::format(
            path,
            field,
            format!("line {line_no}"),
            format!("invalid number `{s}`"),
        )
    })
}

pub fn load_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = FieldReader::new(path, &text, REPORT_MAGIC)?;
    let n_cases: usize = {
        let line = r.line_no();
        parse_num(path, "cases", line, r.next_field("cases")?)?
    };
    let (rest, first_line) = r.rest();
    let mut cases: Vec<CaseEval> = Vec::new();
    let mut bins: Vec<SizeBin> = Vec::new();
    for (i, line) in rest.iter().enumerate() {
        let line_no = first_line + i;
        if line.is_empty() {
            continue;
        }
        if let Some(body) = line.strip_prefix("case: ") {
            let kv = kv_map(path, "case", line_no, body)?;
            cases.push(CaseEval {
                case_id: lookup(path, "case", line_no, &kv, "id")?.to_string(),
                tp: parse_num(path, "tp", line_no, lookup(path, "case", line_no, &kv, "tp")?)?,
                fp: parse_num(path, "fp", line_no, lookup(path, "case", line_no, &kv, "fp")?)?,
                fn_count: parse_num(path, "fn", line_no, lookup(path, "case", line_no, &kv, "fn")?)?,
                detections: Vec::new(),
                aneurysms: Vec::new(),
            });
        } else if let Some(body) = line.strip_prefix("det: ") {
            let kv = kv_map(path, "det", line_no, body)?;
            let case = cases.last_mut().ok_or_else(|| {
                Error::format(path, "det", format!("line {line_no}"), "det before case")
            })?;
            let matched = match lookup(path, "det", line_no, &kv, "match")? {
                "tp" => Some((
                    parse_num(path, "gt", line_no, lookup(path, "det", line_no, &kv, "gt")?)?,
                    parse_num(
                        path,
                        "overlap",
                        line_no,
                        lookup(path, "det", line_no, &kv, "overlap")?,
                    )?,
                )),
                "fp" => None,
                other => {
                    return Err(Error::format(
                        path,
                        "match",
                        format!("line {line_no}"),
                        format!("unknown outcome `{other}`"),
                    ))
                }
            };
            case.detections.push(DetectionOutcome {
                detection: Detection {
                    box_min: parse_triplet(
                        path,
                        "box_min",
                        line_no,
                        lookup(path, "det", line_no, &kv, "box_min")?,
                    )?,
                    box_size: parse_triplet(
                        path,
                        "box_size",
                        line_no,
                        lookup(path, "det", line_no, &kv, "box_size")?,
                    )?,
                    score: parse_num(
                        path,
                        "score",
                        line_no,
                        lookup(path, "det", line_no, &kv, "score")?,
                    )?,
                    component_id: parse_num(
                        path,
                        "component",
                        line_no,
                        lookup(path, "det", line_no, &kv, "component")?,
                    )?,
                },
                matched,
            });
        } else if let Some(body) = line.strip_prefix("gt: ") {
            let kv = kv_map(path, "gt", line_no, body)?;
            let case = cases.last_mut().ok_or_else(|| {
                Error::format(path, "gt", format!("line {line_no}"), "gt before case")
            })?;
            case.aneurysms.push(AneurysmOutcome {
                diameter_mm: parse_num(
                    path,
                    "diameter_mm",
                    line_no,
                    lookup(path, "gt", line_no, &kv, "diameter_mm")?,
                )?,
                detected: lookup(path, "gt", line_no, &kv, "detected")? == "true",
            });
        } else if let Some(body) = line.strip_prefix("bin: ") {
            let kv = kv_map(path, "bin", line_no, body)?;
            let label_s = lookup(path, "bin", line_no, &kv, "label")?;
            let label = SIZE_BIN_LABELS
                .iter()
                .find(|&&l| l == label_s)
                .ok_or_else(|| {
                    Error::format(
                        path,
                        "label",
                        format!("line {line_no}"),
                        format!("unknown bin `{label_s}`"),
                    )
                })?;
            bins.push(SizeBin {
                label,
                total: parse_num(path, "n", line_no, lookup(path, "bin", line_no, &kv, "n")?)?,
                detected: parse_num(
                    path,
                    "detected",
                    line_no,
                    lookup(path, "bin", line_no, &kv, "detected")?,
                )?,
                sensitivity: parse_num(
                    path,
                    "sensitivity",
                    line_no,
                    lookup(path, "bin", line_no, &kv, "sensitivity")?,
                )?,
            });
        }
        // aggregate / sensitivity / fp_per_case lines are recomputed below.
    }
    if cases.len() != n_cases {
        return Err(Error::format(
            path,
            "cases",
            "line 2",
            format!("header says {n_cases} cases, found {}", cases.len()),
        ));
    }
    Ok(EvalReport::from_cases(cases))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub index: usize,
    pub test_cases: usize,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    pub sensitivity: f64,
    pub fp_per_case: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossvalReport {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldResult>,
    pub summary: CrossvalSummary,
}

pub fn save_crossval(path: &Path, report: &CrossvalReport) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "{CROSSVAL_MAGIC}");
    let _ = writeln!(s, "k: {}", report.k);
    let _ = writeln!(s, "seed: {}", report.seed);
    for f in &report.folds {
        let _ = writeln!(
            s,
            "fold: index={} test={} tp={} fp={} fn={} sensitivity={} fp_per_case={}",
            f.index, f.test_cases, f.tp, f.fp, f.fn_count, f.sensitivity, f.fp_per_case
        );
    }
    let _ = writeln!(s, "mean: {}", report.summary.mean);
    let _ = writeln!(s, "std: {}", report.summary.std);
    let _ = writeln!(s, "best: {}", report.summary.best);
    let _ = writeln!(
        s,
        "summary: {}",
        format_mean_std(report.summary.mean, report.summary.std)
    );
    let _ = writeln!(s, "best_fold: {}", format_percent2(report.summary.best));
    write_atomic(path, s.as_bytes())
}

pub fn load_crossval(path: &Path) -> Result<CrossvalReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = FieldReader::new(path, &text, CROSSVAL_MAGIC)?;
    let k: usize = {
        let line = r.line_no();
        parse_num(path, "k", line, r.next_field("k")?)?
    };
    let seed: u64 = {
        let line = r.line_no();
        parse_num(path, "seed", line, r.next_field("seed")?)?
    };
    let (rest, first_line) = r.rest();
    let mut folds = Vec::new();
    for (i, line) in rest.iter().enumerate() {
        let line_no = first_line + i;
        if let Some(body) = line.strip_prefix("fold: ") {
            let kv = kv_map(path, "fold", line_no, body)?;
            folds.push(FoldResult {
                index: parse_num(path, "index", line_no, lookup(path, "fold", line_no, &kv, "index")?)?,
                test_cases: parse_num(path, "test", line_no, lookup(path, "fold", line_no, &kv, "test")?)?,
                tp: parse_num(path, "tp", line_no, lookup(path, "fold", line_no, &kv, "tp")?)?,
                fp: parse_num(path, "fp", line_no, lookup(path, "fold", line_no, &kv, "fp")?)?,
                fn_count: parse_num(path, "fn", line_no, lookup(path, "fold", line_no, &kv, "fn")?)?,
                sensitivity: parse_num(
                    path,
                    "sensitivity",
                    line_no,
                    lookup(path, "fold", line_no, &kv, "sensitivity")?,
                )?,
                fp_per_case: parse_num(
                    path,
                    "fp_per_case",
                    line_no,
                    lookup(path, "fold", line_no, &kv, "fp_per_case")?,
                )?,
            });
        }
    }
    if folds.len() != k {
        return Err(Error::format(
            path,
            "fold",
            "line 2",
            format!("expected {k} folds, found {}", folds.len()),
        ));
    }
    let sens: Vec<f64> = folds.iter().map(|f| f.sensitivity).collect();
    Ok(CrossvalReport {
        k,
        seed,
        folds,
        summary: crate::eval::crossval_summary(&sens),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_network, Mode};
    use crate::tensor::Rng;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().expect("temp dir")
    }

    #[test]
    fn volume_f32_round_trip_is_bit_exact() {
        let dir = tmpdir();
        let mut rng = Rng::from_seed(1);
        let n = 16 * 16 * 16;
        let voxels: Vec<f32> = (0..n).map(|_| rng.uniform(-100.0, 900.0) as f32).collect();
        let vol = Volume::new([16, 16, 16], [0.5, 0.5, 1.2], voxels).unwrap();
        let path = dir.path().join("case.vhdr");
        save_volume(&path, &vol, VolumeDtype::F32).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back, vol);

        // Saving the loaded volume reproduces the files byte for byte.
        let path2 = dir.path().join("copy.vhdr");
        save_volume(&path2, &back, VolumeDtype::F32).unwrap();
        let raw1 = std::fs::read(payload_name(&path)).unwrap();
        let raw2 = std::fs::read(payload_name(&path2)).unwrap();
        assert_eq!(raw1, raw2);
    }

    #[test]
    fn volume_i16_round_trip_on_integral_values() {
        let dir = tmpdir();
        let voxels: Vec<f32> = (0..64).map(|i| (i * 16) as f32).collect();
        let vol = Volume::new([4, 4, 4], [1.0; 3], voxels).unwrap();
        let path = dir.path().join("q.vhdr");
        save_volume(&path, &vol, VolumeDtype::I16).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.voxels(), vol.voxels());
    }

    #[test]
    fn truncated_payload_reports_byte_counts() {
        let dir = tmpdir();
        let vol = Volume::filled([4, 4, 4], [1.0; 3], 1.0);
        let path = dir.path().join("t.vhdr");
        save_volume(&path, &vol, VolumeDtype::F32).unwrap();
        let raw = payload_name(&path);
        let bytes = std::fs::read(&raw).unwrap();
        std::fs::write(&raw, &bytes[..100]).unwrap();
        let err = load_volume(&path).unwrap_err();
        assert_eq!(err.class(), "FormatError");
        let msg = err.to_string();
        assert!(msg.contains("256") && msg.contains("100"), "{msg}");
    }

    #[test]
    fn malformed_header_names_field_and_line() {
        let dir = tmpdir();
        let path = dir.path().join("bad.vhdr");
        std::fs::write(
            &path,
            "# aneuscan volume v1\ndims: 4 4\nspacing: 1 1 1\n",
        )
        .unwrap();
        let err = load_volume(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dims") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn annotation_round_trip_and_validation() {
        let dir = tmpdir();
        let annot = Annotation {
            case_id: "case_007".into(),
            dims: [32, 32, 32],
            aneurysms: vec![
                AnnotatedAneurysm {
                    voxels: vec![100, 101, 102, 200, 300, 301],
                    diameter_mm: 4.711234567,
                    location: Some("synthetic".into()),
                },
                AnnotatedAneurysm {
                    voxels: vec![5000],
                    diameter_mm: 2.0,
                    location: None,
                },
            ],
        };
        let path = dir.path().join("case.annot");
        save_annotation(&path, &annot).unwrap();
        let back = load_annotation(&path).unwrap();
        assert_eq!(back, annot);

        // Out-of-bounds runs are rejected with the line number.
        std::fs::write(
            &path,
            "# aneuscan annotation v1\ncase: x\ndims: 2 2 2\naneurysm: diameter_mm=1 runs=7+2\n",
        )
        .unwrap();
        let err = load_annotation(&path).unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
    }

    #[test]
    fn rle_is_compact_and_exact() {
        assert_eq!(encode_rle(&[1, 2, 3, 7, 9, 10]), "1+3,7+1,9+2");
        let p = Path::new("x");
        assert_eq!(
            decode_rle(p, 1, "1+3,7+1,9+2", 100).unwrap(),
            vec![1, 2, 3, 7, 9, 10]
        );
        assert!(decode_rle(p, 1, "5+0", 100).is_err());
        assert!(decode_rle(p, 1, "3+2,4+1", 100).is_err());
    }

    #[test]
    fn weights_round_trip_preserves_forward_outputs() {
        let dir = tmpdir();
        let cfg = crate::model::NetworkConfig {
            levels: 2,
            base_channels: 4,
            p_drop: 0.3,
            leaky_slope: 0.01,
            se_ratio: 4,
            attention: AttentionPosition::Middle,
            out_classes: 3,
            input_dims: 16,
        };
        let model = build_network::<f32>(&cfg, 77).unwrap();
        let path = dir.path().join("model.awnet");
        save_weights(&path, &model).unwrap();
        let back = load_weights(&path).unwrap();
        assert_eq!(back.config, model.config);
        for (a, b) in model.params().iter().zip(back.params()) {
            assert_eq!(a, b, "load(save(m)) must be bit-exact");
        }
        let input = Tensor::filled([1, 1, 16, 16, 16], 0.3);
        let o1 = model
            .forward(input.clone(), Mode::Inference, &mut Rng::from_seed(0))
            .unwrap();
        let o2 = back
            .forward(input, Mode::Inference, &mut Rng::from_seed(0))
            .unwrap();
        assert_eq!(o1, o2);
    }

    #[test]
    fn corrupt_weights_are_rejected() {
        let dir = tmpdir();
        let path = dir.path().join("bad.awnet");
        std::fs::write(&path, b"NOTAWNET").unwrap();
        assert_eq!(load_weights(&path).unwrap_err().class(), "FormatError");
    }

    #[test]
    fn report_round_trip_and_recompute() {
        let dims = [64usize, 64, 64];
        let gt: Vec<usize> = (0..10).map(|i| 10 + i + 64 * (10 + 64 * 10)).collect();
        let det = Detection {
            box_min: [10, 10, 10],
            box_size: [10, 1, 1],
            score: 0.93121142,
            component_id: 0,
        };
        let c1 = CaseEval::evaluate("a", &[det], &[(gt.clone(), 4.2)], dims);
        let c2 = CaseEval::evaluate("b", &[], &[(gt, 12.5)], dims);
        let report = EvalReport::from_cases(vec![c1, c2]);

        let dir = tmpdir();
        let path = dir.path().join("eval.report");
        save_report(&path, &report).unwrap();
        let back = load_report(&path).unwrap();
        assert_eq!(back, report);

        // Byte-identical when re-saved.
        let path2 = dir.path().join("eval2.report");
        save_report(&path2, &back).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn crossval_round_trip() {
        let folds: Vec<FoldResult> = [0.9772, 0.9812, 0.9695]
            .iter()
            .enumerate()
            .map(|(i, &s)| FoldResult {
                index: i,
                test_cases: 8,
                tp: 8,
                fp: 2,
                fn_count: 0,
                sensitivity: s,
                fp_per_case: 0.25,
            })
            .collect();
        let sens: Vec<f64> = folds.iter().map(|f| f.sensitivity).collect();
        let report = CrossvalReport {
            k: 3,
            seed: 7,
            folds,
            summary: crate::eval::crossval_summary(&sens),
        };
        let dir = tmpdir();
        let path = dir.path().join("cv.cvreport");
        save_crossval(&path, &report).unwrap();
        let back = load_crossval(&path).unwrap();
        assert_eq!(back, report);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("best_fold: 98.12%"), "{text}");
    }

    #[test]
    fn no_partial_file_on_failed_save() {
        let dir = tmpdir();
        // Writing into a missing subdirectory fails before any rename.
        let path = dir.path().join("missing").join("x.report");
        let report = EvalReport::from_cases(vec![CaseEval {
            case_id: "a".into(),
            tp: 0,
            fp: 0,
            fn_count: 0,
            detections: vec![],
            aneurysms: vec![],
        }]);
        assert!(save_report(&path, &report).is_err());
        assert!(!path.exists());
    }
}
