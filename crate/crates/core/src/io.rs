//! On-disk formats. Binary files are little-endian with a four-byte magic and a
//! `u32` version; text files are comma-separated with a header line.

use std::fmt::Write as _;
use std::path::Path;

use crate::cnn::{AdamConfig, CnnArchitecture, CnnParams};
use crate::enkf::{DynamicsSummary, Ensemble, Observations, DIRECTION_BINS};
use crate::error::{Error, Result};
use crate::grid::{standardize, Field, FrameWindow, GridSpec, StandardizationRecord};
use crate::kernel::build_rbf_basis;
use crate::likelihood::{IdeModel, NoiseParams, TrainingConfig};
use crate::verify::ScoreReport;

pub const FORMAT_VERSION: u32 = 1;
pub const SEQUENCE_MAGIC: [u8; 4] = *b"IDEQ";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"IDEC";
pub const ENSEMBLE_MAGIC: [u8; 4] = *b"IDEN";

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::TruncatedPayload(format!("need {n} bytes at offset {}, file has {}", self.pos, self.bytes.len()))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn header(&mut self, magic: [u8; 4]) -> Result<()> {
        let found = self.array::<4>()?;
        if found != magic {
            return Err(Error::BadMagic { expected: magic, found });
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported format version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::ShapeMismatchOnLoad(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn grid_from(n: usize) -> Result<GridSpec> {
    GridSpec::new(n).map_err(|e| Error::ShapeMismatchOnLoad(e.to_string()))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Raw frames (32-bit on disk) plus the moments that standardize each one.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceFile {
    pub frames: Vec<Field>,
    pub records: Vec<StandardizationRecord>,
}

fn round_to_f32(f: &Field) -> Result<Field> {
    Field::new(f.grid(), f.values().iter().map(|&v| v as f32 as f64).collect())
}

impl SequenceFile {
    pub fn new(frames: Vec<Field>, records: Vec<StandardizationRecord>) -> Result<Self> {
        if frames.is_empty() || frames.len() != records.len() {
            return Err(Error::InvalidArgument(format!("{} frames with {} records", frames.len(), records.len())));
        }
        if frames.iter().any(|f| f.grid() != frames[0].grid()) {
            return Err(Error::ShapeMismatch("frames on different grids".into()));
        }
        let frames = frames.iter().map(round_to_f32).collect::<Result<_>>()?;
        Ok(Self { frames, records })
    }

    /// Frames already in model units.
    pub fn identity(frames: Vec<Field>) -> Result<Self> {
        let records = vec![StandardizationRecord::IDENTITY; frames.len()];
        Self::new(frames, records)
    }

    /// Per-frame moments taken from the frames as they will be stored.
    pub fn with_standardization(frames: Vec<Field>) -> Result<Self> {
        let frames: Vec<Field> = frames.iter().map(round_to_f32).collect::<Result<_>>()?;
        let records = frames.iter().map(|f| standardize(f).map(|s| s.1)).collect::<Result<_>>()?;
        Self::new(frames, records)
    }

    pub fn grid(&self) -> GridSpec {
        self.frames[0].grid()
    }

    pub fn standardized(&self) -> Result<Vec<Field>> {
        self.frames
            .iter()
            .zip(&self.records)
            .map(|(f, r)| Field::new(f.grid(), f.values().iter().map(|&v| r.apply(v)).collect()))
            .collect()
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let n = self.grid().n();
        let mut out = Vec::with_capacity(20 + self.frames.len() * (4 * n * n + 16));
        out.extend_from_slice(&SEQUENCE_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u32(&mut out, n)?;
        put_u32(&mut out, self.frames.len())?;
        // scalar width in bits, row-major flag, two reserved bytes
        out.extend_from_slice(&[32, 1, 0, 0]);
        for f in &self.frames {
            for &v in f.values() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        for r in &self.records {
            put_f64(&mut out, r.mean);
            put_f64(&mut out, r.sd);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        c.header(SEQUENCE_MAGIC)?;
        let n = c.usize()?;
        let t_len = c.usize()?;
        let [width, row_major, _, _] = c.array::<4>()?;
        if width != 32 || row_major != 1 {
            return Err(Error::ShapeMismatchOnLoad(format!("scalar width {width}, row-major flag {row_major}")));
        }
        let grid = grid_from(n)?;
        if t_len == 0 {
            return Err(Error::ShapeMismatchOnLoad("sequence holds no frames".into()));
        }
        let payload = c.take(t_len.checked_mul(4 * n * n).ok_or_else(|| Error::TruncatedPayload("frame payload size overflows".into()))?)?;
        let frames = payload
            .chunks_exact(4 * n * n)
            .map(|chunk| {
                let values = chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
                Field::new(grid, values)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut records = Vec::with_capacity(t_len);
        for _ in 0..t_len {
            let (mean, sd) = (c.f64()?, c.f64()?);
            records.push(StandardizationRecord::new(mean, sd).map_err(|e| Error::ShapeMismatchOnLoad(e.to_string()))?);
        }
        c.finish()?;
        Ok(Self { frames, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

/// A fitted model together with what produced it.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: IdeModel,
    pub training: TrainingConfig,
    /// Residual noise per zone; empty until residuals have been fitted.
    pub noise: Vec<NoiseParams>,
}

impl Checkpoint {
    /// Tensor table in layout order. The transposed advection filters and the shared
    /// head are not separate entries, so tied tensors appear once.
    pub fn encode(&self) -> Result<Vec<u8>> {
        let params = &self.model.params;
        let arch = params.architecture();
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u32(&mut out, arch.tau)?;
        put_u32(&mut out, arch.input_side)?;
        put_u32(&mut out, arch.n_stages())?;
        for &f in &arch.filters {
            put_u32(&mut out, f)?;
        }
        put_u32(&mut out, arch.patch)?;
        put_u32(&mut out, arch.r)?;
        put_f64(&mut out, self.model.basis.bandwidth());
        put_f64(&mut out, self.model.theta_min);

        let tc = &self.training;
        put_u32(&mut out, tc.batch_size)?;
        put_f64(&mut out, tc.adam.lr);
        put_f64(&mut out, tc.adam.beta1);
        put_f64(&mut out, tc.adam.beta2);
        put_f64(&mut out, tc.adam.eps);
        put_u32(&mut out, tc.max_epochs)?;
        put_f64(&mut out, tc.valid_fraction);
        put_f64(&mut out, tc.tolerance);
        out.extend_from_slice(&tc.seed.to_le_bytes());
        put_f64(&mut out, tc.sigma2_0);
        out.extend_from_slice(&tc.max_steps.map_or(u64::MAX, |m| m as u64).to_le_bytes());

        put_u32(&mut out, self.noise.len())?;
        for p in &self.noise {
            put_f64(&mut out, p.sigma2);
            put_f64(&mut out, p.rho);
        }

        put_u32(&mut out, params.entries().len())?;
        for e in params.entries() {
            let name = e.name.as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                put_u32(&mut out, d)?;
            }
            for &v in params.tensor(&e.name).expect("entry exists") {
                put_f64(&mut out, v);
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut c = Cursor::new(bytes);
        c.header(CHECKPOINT_MAGIC)?;
        let tau = c.usize()?;
        let input_side = c.usize()?;
        let stages = c.usize()?;
        if stages > 16 {
            return Err(Error::ShapeMismatchOnLoad(format!("{stages} convolution stages")));
        }
        let filters = (0..stages).map(|_| c.usize()).collect::<Result<Vec<_>>>()?;
        let patch = c.usize()?;
        let r = c.usize()?;
        let arch = CnnArchitecture::new(tau, input_side, filters, patch, r).map_err(|e| Error::ShapeMismatchOnLoad(e.to_string()))?;
        let bandwidth = c.f64()?;
        let theta_min = c.f64()?;

        let batch_size = c.usize()?;
        let adam = AdamConfig { lr: c.f64()?, beta1: c.f64()?, beta2: c.f64()?, eps: c.f64()? };
        let max_epochs = c.usize()?;
        let valid_fraction = c.f64()?;
        let tolerance = c.f64()?;
        let seed = c.u64()?;
        let sigma2_0 = c.f64()?;
        let max_steps = match c.u64()? {
            u64::MAX => None,
            m => Some(m as usize),
        };
        let training = TrainingConfig { batch_size, adam, max_epochs, valid_fraction, tolerance, seed, sigma2_0, max_steps };

        let n_noise = c.usize()?;
        let mut noise = Vec::new();
        for _ in 0..n_noise {
            let (s2, rho) = (c.f64()?, c.f64()?);
            noise.push(NoiseParams::new(s2, rho).map_err(|e| Error::ShapeMismatchOnLoad(e.to_string()))?);
        }

        let mut params = CnnParams::zeros(arch.clone())?;
        let n_tensors = c.usize()?;
        if n_tensors != params.entries().len() {
            return Err(Error::ShapeMismatchOnLoad(format!(
                "{n_tensors} stored tensors, architecture has {}",
                params.entries().len()
            )));
        }
        let mut seen = vec![false; n_tensors];
        for _ in 0..n_tensors {
            let len = c.u16()? as usize;
            let name = std::str::from_utf8(c.take(len)?).map_err(|_| Error::ShapeMismatchOnLoad("tensor name is not UTF-8".into()))?.to_owned();
            let ndim = c.u8()? as usize;
            let shape = (0..ndim).map(|_| c.usize()).collect::<Result<Vec<_>>>()?;
            let k = params
                .entries()
                .iter()
                .position(|e| e.name == name)
                .ok_or_else(|| Error::ShapeMismatchOnLoad(format!("unexpected tensor '{name}'")))?;
            if params.entries()[k].shape != shape || seen[k] {
                return Err(Error::ShapeMismatchOnLoad(format!(
                    "tensor '{name}' has shape {shape:?}, architecture expects {:?}",
                    params.entries()[k].shape
                )));
            }
            seen[k] = true;
            let count: usize = shape.iter().product();
            let raw = c.take(count * 8)?;
            let dst = params.tensor_mut(&name).expect("entry exists");
            for (d, b) in dst.iter_mut().zip(raw.chunks_exact(8)) {
                *d = f64::from_le_bytes(b.try_into().expect("8 bytes"));
            }
        }
        c.finish()?;
        let basis = build_rbf_basis(grid_from(input_side)?, r, bandwidth).map_err(|e| Error::ShapeMismatchOnLoad(e.to_string()))?;
        let mut model = IdeModel::new(params, basis)?;
        model.theta_min = theta_min;
        Ok(Self { model, training, noise })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

/// Filter state handed from `filter` to `forecast`: every member's window at one time.
pub fn encode_ensemble(ens: &Ensemble) -> Result<Vec<u8>> {
    let n = ens.grid().n();
    let mut out = Vec::with_capacity(36 + ens.size() * ens.tau() * n * n * 8);
    out.extend_from_slice(&ENSEMBLE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, n)?;
    put_u32(&mut out, ens.tau())?;
    put_u32(&mut out, ens.size())?;
    out.extend_from_slice(&(ens.t as u64).to_le_bytes());
    out.extend_from_slice(&ens.seed.to_le_bytes());
    for m in &ens.members {
        for f in m.frames() {
            for &v in f.values() {
                put_f64(&mut out, v);
            }
        }
    }
    Ok(out)
}

pub fn decode_ensemble(bytes: &[u8]) -> Result<Ensemble> {
    let mut c = Cursor::new(bytes);
    c.header(ENSEMBLE_MAGIC)?;
    let grid = grid_from(c.usize()?)?;
    let tau = c.usize()?;
    let size = c.usize()?;
    let t = c.u64()? as usize;
    let seed = c.u64()?;
    if tau == 0 || size < 2 {
        return Err(Error::ShapeMismatchOnLoad(format!("{size} members of {tau} frames")));
    }
    let payload = c.take(size.saturating_mul(tau).saturating_mul(grid.len() * 8))?;
    c.finish()?;
    let values: Vec<f64> = payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    let members = values
        .chunks_exact(tau * grid.len())
        .map(|m| FrameWindow::new(m.chunks_exact(grid.len()).map(|f| Field::new(grid, f.to_vec())).collect::<Result<_>>()?))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(members, t, seed)
}

pub fn observations_csv(obs: &[Observations], grid: GridSpec) -> String {
    let mut s = String::from("t,pixel_row,pixel_col,value\n");
    for o in obs {
        for (&p, &v) in o.pixels.iter().zip(&o.values) {
            let (r, c) = grid.row_col(p);
            let _ = writeln!(s, "{},{r},{c},{v}", o.t);
        }
    }
    s
}

fn field<T: std::str::FromStr>(line: usize, raw: Option<&str>, what: &str) -> Result<T> {
    raw.map(str::trim)
        .and_then(|r| r.parse().ok())
        .ok_or_else(|| Error::Parse(format!("line {line}: bad or missing {what}")))
}

/// One `Observations` per time from the first to the last time present; times
/// without rows come back empty.
pub fn parse_observations_csv(text: &str, grid: GridSpec, sigma2_eps: f64) -> Result<Vec<Observations>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "t,pixel_row,pixel_col,value" => {}
        _ => return Err(Error::Parse("observations header must be 't,pixel_row,pixel_col,value'".into())),
    }
    let mut rows: Vec<(usize, usize, f64)> = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let t: usize = field(i + 1, parts.next(), "t")?;
        let r: usize = field(i + 1, parts.next(), "pixel_row")?;
        let c: usize = field(i + 1, parts.next(), "pixel_col")?;
        let v: f64 = field(i + 1, parts.next(), "value")?;
        if parts.next().is_some() {
            return Err(Error::Parse(format!("line {}: too many columns", i + 1)));
        }
        if r >= grid.n() || c >= grid.n() {
            return Err(Error::Parse(format!("line {}: pixel ({r}, {c}) outside a {}-pixel grid", i + 1, grid.n())));
        }
        rows.push((t, grid.index(r, c), v));
    }
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let t0 = rows.iter().map(|r| r.0).min().expect("nonempty");
    let t1 = rows.iter().map(|r| r.0).max().expect("nonempty");
    (t0..=t1)
        .map(|t| {
            let (pixels, values) = rows.iter().filter(|r| r.0 == t).map(|r| (r.1, r.2)).unzip();
            Observations::new(t, pixels, values, sigma2_eps, grid)
        })
        .collect()
}

pub fn dynamics_summary_csv(summary: &DynamicsSummary, grid: GridSpec) -> String {
    let mut s = String::from("pixel_row,pixel_col,mean_theta1,mean_theta2,mean_theta3,var_theta1,var_theta2,var_theta3");
    for b in 0..DIRECTION_BINS {
        let _ = write!(s, ",bin_{b:02}");
    }
    s.push('\n');
    for i in 0..grid.len() {
        let (r, c) = grid.row_col(i);
        let _ = write!(s, "{r},{c}");
        for k in 0..3 {
            let _ = write!(s, ",{}", summary.theta_mean[k][i]);
        }
        for k in 0..3 {
            let _ = write!(s, ",{}", summary.theta_var[k][i]);
        }
        for count in summary.direction_hist[i] {
            let _ = write!(s, ",{count}");
        }
        s.push('\n');
    }
    s
}

/// One scored row; `t = None` is the aggregate over all times.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub method: String,
    pub zone: usize,
    pub t: Option<usize>,
    pub report: ScoreReport,
}

pub fn score_csv(rows: &[ScoreRow]) -> String {
    let mut s = String::from("method,zone,t,rmspe,crps,is90,cov90\n");
    for row in rows {
        let t = row.t.map_or_else(|| "all".to_owned(), |t| t.to_string());
        let r = &row.report;
        let _ = writeln!(s, "{},{},{t},{},{},{},{}", row.method, row.zone, r.rmspe, r.crps, r.is90, r.cov90);
    }
    s
}
