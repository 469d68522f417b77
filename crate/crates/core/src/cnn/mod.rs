//! Convolutional map from a window of frames to kernel basis weights.
//!
//! Three pathways produce `w1` (diffusion), `w2` (x-advection) and `w3`
//! (y-advection). Each pathway runs its own first convolution stage over the
//! window, then a trunk of convolution stages shared by all pathways, then a
//! linear head. The `w3` first-stage filters are the spatial transpose of the
//! `w2` filters and `w3` reuses the `w2` head, so neither is stored.
//!
//! Parameter tensors live in one flat buffer and are named
//! `stage{l}.pathway{p}.filters` / `.bias` (`p = 1` diffusion, `p = 2` advection,
//! `p = 0` for shared trunk stages) and `head.A1`, `head.A2`.

mod adam;
mod layers;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use layers::{conv3d_backward, conv3d_stage, maxpool2, rectify, Tensor3};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::FrameWindow;
use crate::kernel::DynamicsWeights;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CnnArchitecture {
    pub tau: usize,
    pub input_side: usize,
    /// Filter count per convolution stage.
    pub filters: Vec<usize>,
    /// Odd spatial patch size shared by all stages.
    pub patch: usize,
    /// Output length of each head (number of basis functions).
    pub r: usize,
}

impl CnnArchitecture {
    pub fn new(tau: usize, input_side: usize, filters: Vec<usize>, patch: usize, r: usize) -> Result<Self> {
        let arch = Self { tau, input_side, filters, patch, r };
        arch.validate()?;
        Ok(arch)
    }

    /// 16×16 inputs, stages of 8, 16 and 32 filters, 5×5 patches, 16 basis functions.
    pub fn desk(tau: usize) -> Self {
        Self { tau, input_side: 16, filters: vec![8, 16, 32], patch: 5, r: 16 }
    }

    /// 64×64 inputs, stages of 64, 128 and 256 filters, 64 basis functions.
    pub fn full_scale(tau: usize) -> Self {
        Self { tau, input_side: 64, filters: vec![64, 128, 256], patch: 5, r: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau < 1 || self.filters.is_empty() || self.filters.contains(&0) || self.r == 0 {
            return Err(Error::ShapeMismatch(format!("degenerate architecture {self:?}")));
        }
        if self.patch.is_multiple_of(2) {
            return Err(Error::ShapeMismatch(format!("patch size {} must be odd", self.patch)));
        }
        let div = 1usize << self.filters.len();
        if !self.input_side.is_multiple_of(div) || self.input_side < div {
            return Err(Error::ShapeMismatch(format!(
                "input side {} does not halve cleanly through {} pooling stages",
                self.input_side,
                self.filters.len()
            )));
        }
        Ok(())
    }

    pub fn n_stages(&self) -> usize {
        self.filters.len()
    }

    pub fn feature_side(&self) -> usize {
        self.input_side >> self.filters.len()
    }

    /// Length of the vectorised final feature stack fed to the heads.
    pub fn flat_dim(&self) -> usize {
        self.filters[self.filters.len() - 1] * self.feature_side().pow(2)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn layout(arch: &CnnArchitecture) -> Vec<TensorEntry> {
    let p = arch.patch;
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();
    for pathway in [1, 2] {
        specs.push((format!("stage1.pathway{pathway}.filters"), vec![arch.filters[0], arch.tau, p, p]));
        specs.push((format!("stage1.pathway{pathway}.bias"), vec![arch.filters[0]]));
    }
    for l in 1..arch.n_stages() {
        specs.push((format!("stage{}.pathway0.filters", l + 1), vec![arch.filters[l], arch.filters[l - 1], p, p]));
        specs.push((format!("stage{}.pathway0.bias", l + 1), vec![arch.filters[l]]));
    }
    specs.push(("head.A1".into(), vec![arch.r, arch.flat_dim()]));
    specs.push(("head.A2".into(), vec![arch.r, arch.flat_dim()]));
    let mut offset = 0;
    specs
        .into_iter()
        .map(|(name, shape)| {
            let e = TensorEntry { name, shape, offset };
            offset += e.len();
            e
        })
        .collect()
}

/// Which output a forward pathway produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pathway {
    Diffusion,
    AdvectionX,
    AdvectionY,
}

impl Pathway {
    pub const ALL: [Pathway; 3] = [Pathway::Diffusion, Pathway::AdvectionX, Pathway::AdvectionY];

    fn stage1_entry(self) -> usize {
        match self {
            Pathway::Diffusion => 0,
            _ => 2,
        }
    }

    fn head_entry(self, arch: &CnnArchitecture) -> usize {
        let base = 4 + 2 * (arch.n_stages() - 1);
        match self {
            Pathway::Diffusion => base,
            _ => base + 1,
        }
    }
}

/// All network parameters in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams {
    arch: CnnArchitecture,
    entries: Vec<TensorEntry>,
    data: Vec<f64>,
}

impl CnnParams {
    pub fn zeros(arch: CnnArchitecture) -> Result<Self> {
        arch.validate()?;
        let entries = layout(&arch);
        let len = entries.last().map(|e| e.offset + e.len()).unwrap_or(0);
        Ok(Self { arch, entries, data: vec![0.0; len] })
    }

    /// Glorot-uniform filters, zero biases and small uniform heads.
    pub fn init(arch: CnnArchitecture, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p2 = params.arch.patch * params.arch.patch;
        let head_start = params.entries[Pathway::Diffusion.head_entry(&params.arch)].offset;
        for e in params.entries.clone() {
            let slice = &mut params.data[e.offset..e.offset + e.len()];
            if e.name.ends_with(".filters") {
                let fan_out = e.shape[0] * p2;
                let fan_in = e.shape[1] * p2;
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                slice.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
            } else if e.offset >= head_start {
                slice.iter_mut().for_each(|v| *v = rng.gen_range(-1e-3..1e-3));
            }
        }
        Ok(params)
    }

    pub fn architecture(&self) -> &CnnArchitecture {
        &self.arch
    }

    pub fn entries(&self) -> &[TensorEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn slice(&self, entry: usize) -> &[f64] {
        let e = &self.entries[entry];
        &self.data[e.offset..e.offset + e.len()]
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let idx = self.entries.iter().position(|e| e.name == name)?;
        Some(self.slice(idx))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let e = self.entries.iter().find(|e| e.name == name)?.clone();
        Some(&mut self.data[e.offset..e.offset + e.len()])
    }

    /// First-stage filters of the `w3` pathway: the per-lag spatial transpose of
    /// the stored `w2` filters.
    pub fn w3_stage1_filters(&self) -> Vec<f64> {
        transpose_filters(self.slice(2), self.arch.patch)
    }

    /// The head applied to the `w3` pathway (the `w2` head).
    pub fn head_a3(&self) -> &[f64] {
        self.slice(Pathway::AdvectionX.head_entry(&self.arch))
    }

    fn stage1_filters(&self, p: Pathway) -> std::borrow::Cow<'_, [f64]> {
        match p {
            Pathway::AdvectionY => std::borrow::Cow::Owned(self.w3_stage1_filters()),
            _ => std::borrow::Cow::Borrowed(self.slice(p.stage1_entry())),
        }
    }

    fn stage_params(&self, p: Pathway, stage: usize) -> (std::borrow::Cow<'_, [f64]>, &[f64]) {
        if stage == 0 {
            (self.stage1_filters(p), self.slice(p.stage1_entry() + 1))
        } else {
            let e = 4 + 2 * (stage - 1);
            (std::borrow::Cow::Borrowed(self.slice(e)), self.slice(e + 1))
        }
    }

    fn fingerprint(&self) -> u64 {
        // FNV-1a over the raw bits
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.data {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Transpose the two spatial axes of every `[k][q]` slice of a `[k][q][p][p]` tensor.
pub fn transpose_filters(filters: &[f64], patch: usize) -> Vec<f64> {
    let p2 = patch * patch;
    let mut out = vec![0.0; filters.len()];
    for (src, dst) in filters.chunks(p2).zip(out.chunks_mut(p2)) {
        for a in 0..patch {
            for b in 0..patch {
                dst[a * patch + b] = src[b * patch + a];
            }
        }
    }
    out
}

/// Gradients laid out exactly like [`CnnParams::as_slice`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<f64>);

impl Gradients {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        self.0.iter_mut().zip(&other.0).for_each(|(a, b)| *a += scale * b);
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|v| *v *= s);
    }

    pub fn tensor<'a>(&'a self, params: &CnnParams, name: &str) -> Option<&'a [f64]> {
        let e = params.entries.iter().find(|e| e.name == name)?;
        Some(&self.0[e.offset..e.offset + e.len()])
    }
}

/// One convolution stage's intermediate values: its input, the convolution output
/// before rectification, and the rectified-pooled output with pooling argmaxes.
#[derive(Debug, Clone)]
pub struct StageFeatures {
    pub input: Tensor3,
    pub conv: Tensor3,
    pub pooled: Tensor3,
    pub argmax: Vec<usize>,
}

/// Everything a forward pass keeps for the backward pass.
#[derive(Debug, Clone)]
pub struct FeatureStack {
    fingerprint: u64,
    pub pathways: Vec<Vec<StageFeatures>>,
}

impl FeatureStack {
    /// Vectorised final features of one pathway.
    pub fn flat(&self, p: Pathway) -> &[f64] {
        &self.pathways[p as usize].last().expect("at least one stage").pooled.data
    }

    /// Rectifier signs and pooling choices; equal patterns mean the network is
    /// locally linear between the two evaluations.
    pub fn activation_pattern(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for stages in &self.pathways {
            for s in stages {
                out.extend(s.conv.data.iter().map(|v| (*v > 0.0) as usize));
                out.extend(&s.argmax);
            }
        }
        out
    }
}

fn window_tensor(window: &FrameWindow) -> Result<Tensor3> {
    let side = window.grid().n();
    let mut data = Vec::with_capacity(window.tau() * side * side);
    for f in window.frames() {
        data.extend_from_slice(f.values());
    }
    Tensor3::new(window.tau(), side, data)
}

fn matvec(a: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows).map(|r| a[r * cols..(r + 1) * cols].iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

pub fn cnn_forward(window: &FrameWindow, params: &CnnParams) -> Result<(DynamicsWeights, FeatureStack)> {
    let arch = &params.arch;
    if window.tau() != arch.tau || window.grid().n() != arch.input_side {
        return Err(Error::ShapeMismatch(format!(
            "window is {} frames of side {}, network expects {} of side {}",
            window.tau(),
            window.grid().n(),
            arch.tau,
            arch.input_side
        )));
    }
    let x0 = window_tensor(window)?;
    let mut pathways = Vec::with_capacity(3);
    let mut outputs = Vec::with_capacity(3);
    for p in Pathway::ALL {
        let mut stages = Vec::with_capacity(arch.n_stages());
        let mut x = x0.clone();
        for l in 0..arch.n_stages() {
            let (filters, bias) = params.stage_params(p, l);
            let conv = conv3d_stage(&x, &filters, bias, arch.patch)?;
            let rect = Tensor3 { channels: conv.channels, side: conv.side, data: rectify(&conv.data) };
            let (pooled, argmax) = maxpool2(&rect)?;
            let next = pooled.clone();
            stages.push(StageFeatures { input: x, conv, pooled, argmax });
            x = next;
        }
        let head = params.slice(p.head_entry(arch));
        outputs.push(matvec(head, arch.r, &x.data));
        pathways.push(stages);
    }
    let w3 = outputs.pop().expect("three pathways");
    let w2 = outputs.pop().expect("three pathways");
    let w1 = outputs.pop().expect("three pathways");
    Ok((DynamicsWeights { w1, w2, w3 }, FeatureStack { fingerprint: params.fingerprint(), pathways }))
}

/// Reverse-mode gradients of `Σ_i <upstream_i, w_i>` with respect to every stored
/// parameter. Tied tensors receive the sum of both pathways' contributions.
pub fn cnn_backward(params: &CnnParams, cache: &FeatureStack, upstream: &DynamicsWeights) -> Result<Gradients> {
    if cache.fingerprint != params.fingerprint() {
        return Err(Error::StaleCache);
    }
    let arch = &params.arch;
    if upstream.w1.len() != arch.r || upstream.w2.len() != arch.r || upstream.w3.len() != arch.r {
        return Err(Error::ShapeMismatch("upstream gradient length differs from r".into()));
    }
    let mut grads = Gradients::zeros(params.len());
    for p in Pathway::ALL {
        let gw = match p {
            Pathway::Diffusion => &upstream.w1,
            Pathway::AdvectionX => &upstream.w2,
            Pathway::AdvectionY => &upstream.w3,
        };
        let stages = &cache.pathways[p as usize];
        let flat = &stages.last().expect("at least one stage").pooled.data;
        let d = flat.len();
        let head_e = &params.entries[p.head_entry(arch)];
        let head = params.slice(p.head_entry(arch));
        let mut gflat = vec![0.0; d];
        {
            let ga = &mut grads.0[head_e.offset..head_e.offset + head_e.len()];
            for (r, &g) in gw.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let row = &head[r * d..(r + 1) * d];
                for j in 0..d {
                    ga[r * d + j] += g * flat[j];
                    gflat[j] += g * row[j];
                }
            }
        }
        let mut gpooled = Tensor3 {
            channels: stages.last().unwrap().pooled.channels,
            side: stages.last().unwrap().pooled.side,
            data: gflat,
        };
        for l in (0..arch.n_stages()).rev() {
            let st = &stages[l];
            // route through pooling, then the rectifier
            let mut gconv = Tensor3::zeros(st.conv.channels, st.conv.side);
            for (o, &src) in st.argmax.iter().enumerate() {
                if st.conv.data[src] > 0.0 {
                    gconv.data[src] += gpooled.data[o];
                }
            }
            let (filters, _) = params.stage_params(p, l);
            let (fe, be) = if l == 0 { (p.stage1_entry(), p.stage1_entry() + 1) } else { (4 + 2 * (l - 1), 5 + 2 * (l - 1)) };
            let (f_off, f_len) = (params.entries[fe].offset, params.entries[fe].len());
            let (b_off, b_len) = (params.entries[be].offset, params.entries[be].len());
            let mut gf = vec![0.0; f_len];
            let mut gb = vec![0.0; b_len];
            let gin = conv3d_backward(&st.input, &filters, arch.patch, &gconv, &mut gf, &mut gb, l > 0);
            if p == Pathway::AdvectionY && l == 0 {
                gf = transpose_filters(&gf, arch.patch);
            }
            grads.0[f_off..f_off + f_len].iter_mut().zip(&gf).for_each(|(a, b)| *a += b);
            grads.0[b_off..b_off + b_len].iter_mut().zip(&gb).for_each(|(a, b)| *a += b);
            if let Some(gin) = gin {
                gpooled = gin;
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Field, GridSpec};

    fn window(side: usize, tau: usize, seed: u64) -> FrameWindow {
        let grid = GridSpec::new(side).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FrameWindow::new((0..tau).map(|_| Field::from_fn(grid, |_| rng.gen_range(-1.0..1.0)).unwrap()).collect())
            .unwrap()
    }

    #[test]
    fn zero_window_gives_zero_weights() {
        let params = CnnParams::init(CnnArchitecture::desk(3), 1).unwrap();
        let grid = GridSpec::new(16).unwrap();
        let w = FrameWindow::new(vec![Field::zeros(grid); 3]).unwrap();
        let (out, _) = cnn_forward(&w, &params).unwrap();
        assert!(out.w1.iter().chain(&out.w2).chain(&out.w3).all(|&v| v == 0.0));
    }

    #[test]
    fn flattened_dimensions() {
        assert_eq!(CnnArchitecture::full_scale(3).flat_dim(), 16384);
        assert_eq!(CnnArchitecture::desk(3).flat_dim(), 128);
        assert!(CnnArchitecture::new(3, 12, vec![4, 4, 4], 5, 4).is_err());
        assert!(CnnArchitecture::new(3, 16, vec![4], 4, 4).is_err());
    }

    #[test]
    fn tensor_names_and_tying() {
        let mut params = CnnParams::init(CnnArchitecture::desk(3), 2).unwrap();
        let names: Vec<&str> = params.entries().iter().map(|e| e.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "stage1.pathway1.filters",
                "stage1.pathway1.bias",
                "stage1.pathway2.filters",
                "stage1.pathway2.bias",
                "stage2.pathway0.filters",
                "stage2.pathway0.bias",
                "stage3.pathway0.filters",
                "stage3.pathway0.bias",
                "head.A1",
                "head.A2"
            ]
        );
        params.tensor_mut("stage1.pathway2.filters").unwrap()[1] = 7.5;
        // filter 0, lag 0, (a=1, b=0) in the transposed view
        assert_eq!(params.w3_stage1_filters()[5], 7.5);
        params.tensor_mut("head.A2").unwrap()[3] = -4.0;
        assert_eq!(params.head_a3()[3], -4.0);
    }

    #[test]
    fn forward_is_deterministic() {
        let params = CnnParams::init(CnnArchitecture::desk(3), 3).unwrap();
        let w = window(16, 3, 4);
        let (a, _) = cnn_forward(&w, &params).unwrap();
        let (b, _) = cnn_forward(&w, &params).unwrap();
        assert_eq!(a, b);
        assert!(cnn_forward(&window(8, 3, 4), &params).is_err());
    }

    #[test]
    fn pooled_features_are_nonnegative() {
        let params = CnnParams::init(CnnArchitecture::desk(3), 5).unwrap();
        let (_, cache) = cnn_forward(&window(16, 3, 6), &params).unwrap();
        for stages in &cache.pathways {
            for s in stages {
                assert!(s.pooled.data.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn linear_head_gradient() {
        let mut params = CnnParams::init(CnnArchitecture::new(3, 8, vec![2, 3], 3, 4).unwrap(), 7).unwrap();
        let a2 = params.tensor_mut("head.A2").unwrap();
        a2.iter_mut().for_each(|v| *v = 0.0);
        a2[0] = 1.0;
        let (_, cache) = cnn_forward(&window(8, 3, 8), &params).unwrap();
        let mut up = DynamicsWeights::zeros(4);
        up.w2[0] = 1.0;
        let g = cnn_backward(&params, &cache, &up).unwrap();
        let ga = g.tensor(&params, "head.A2").unwrap();
        let d = params.architecture().flat_dim();
        assert_eq!(&ga[..d], cache.flat(Pathway::AdvectionX));
        assert!(ga[d..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut params = CnnParams::init(CnnArchitecture::new(3, 8, vec![2, 3], 3, 4).unwrap(), 9).unwrap();
        let (_, cache) = cnn_forward(&window(8, 3, 1), &params).unwrap();
        params.as_mut_slice()[0] += 1.0;
        let r = cnn_backward(&params, &cache, &DynamicsWeights::zeros(4));
        assert!(matches!(r, Err(Error::StaleCache)));
    }

    #[test]
    fn transposed_input_swaps_first_stage_features() {
        let params = CnnParams::init(CnnArchitecture::new(3, 8, vec![2], 3, 4).unwrap(), 11).unwrap();
        let w = window(8, 3, 12);
        let (_, c) = cnn_forward(&w, &params).unwrap();
        let (_, ct) = cnn_forward(&w.transpose(), &params).unwrap();
        // the y pathway on the transposed input sees the x pathway's features, transposed
        let a = &c.pathways[Pathway::AdvectionX as usize][0].conv;
        let b = &ct.pathways[Pathway::AdvectionY as usize][0].conv;
        for k in 0..a.channels {
            for i in 0..8 {
                for j in 0..8 {
                    assert!((a.map(k)[i * 8 + j] - b.map(k)[j * 8 + i]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let arch = CnnArchitecture::new(3, 8, vec![2, 3], 3, 4).unwrap();
        let mut params = CnnParams::init(arch, 13).unwrap();
        // larger heads so every parameter has a visible effect
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for name in ["head.A1", "head.A2"] {
            params.tensor_mut(name).unwrap().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        for name in ["stage1.pathway1.bias", "stage1.pathway2.bias", "stage2.pathway0.bias"] {
            params.tensor_mut(name).unwrap().iter_mut().for_each(|v| *v = rng.gen_range(0.0..0.2));
        }
        let w = window(8, 3, 15);
        let up = DynamicsWeights {
            w1: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            w2: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            w3: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let loss = |p: &CnnParams| -> (f64, Vec<usize>) {
            let (out, cache) = cnn_forward(&w, p).unwrap();
            let l = (0..3).map(|c| out.get(c).iter().zip(up.get(c)).map(|(a, b)| a * b).sum::<f64>()).sum();
            (l, cache.activation_pattern())
        };
        let (_, cache) = cnn_forward(&w, &params).unwrap();
        let base_pattern = cache.activation_pattern();
        let g = cnn_backward(&params, &cache, &up).unwrap();
        let h = 1e-4;
        let mut checked = 0;
        for i in 0..params.len() {
            let mut plus = params.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[i] -= h;
            let (lp, pp) = loss(&plus);
            let (lm, pm) = loss(&minus);
            if pp != base_pattern || pm != base_pattern {
                continue;
            }
            let fd = (lp - lm) / (2.0 * h);
            let scale = fd.abs().max(g.0[i].abs()).max(1e-6);
            assert!((fd - g.0[i]).abs() / scale < 1e-4, "param {i}: fd {fd} vs {}", g.0[i]);
            checked += 1;
        }
        assert!(checked > params.len() * 9 / 10, "only {checked} of {} checked", params.len());
    }

    #[test]
    fn tied_filters_collect_both_pathways() {
        // with only w3 upstream, the shared first-stage filters still get gradient
        let arch = CnnArchitecture::new(3, 8, vec![2], 3, 4).unwrap();
        let params = CnnParams::init(arch, 21).unwrap();
        let w = window(8, 3, 22);
        let (_, cache) = cnn_forward(&w, &params).unwrap();
        let mut up = DynamicsWeights::zeros(4);
        up.w3 = vec![1.0, -1.0, 0.5, 2.0];
        let g = cnn_backward(&params, &cache, &up).unwrap();
        assert!(g.tensor(&params, "stage1.pathway2.filters").unwrap().iter().any(|&v| v != 0.0));
        assert!(g.tensor(&params, "stage1.pathway1.filters").unwrap().iter().all(|&v| v == 0.0));
        assert!(g.tensor(&params, "head.A2").unwrap().iter().any(|&v| v != 0.0));
    }
}
