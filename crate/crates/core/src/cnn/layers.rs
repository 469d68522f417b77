//! Convolution, rectification and pooling on stacks of square maps, with their
//! reverse-mode counterparts.

use crate::error::{Error, Result};

/// `channels` square maps of side `side`, stored channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub side: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(channels: usize, side: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * side * side {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {channels} maps of side {side}",
                data.len()
            )));
        }
        Ok(Self { channels, side, data })
    }

    pub fn zeros(channels: usize, side: usize) -> Self {
        Self { channels, side, data: vec![0.0; channels * side * side] }
    }

    pub fn map(&self, c: usize) -> &[f64] {
        let s2 = self.side * self.side;
        &self.data[c * s2..(c + 1) * s2]
    }
}

/// Same-padded convolution of every input channel with a 3-D filter, summed over
/// channels, one output map per filter:
///
/// `F_k[i, j] = b_k + Σ_q Σ_{l,m} x_q[i - l, j - m] · g_{k,q}[l, m]`
///
/// with `l, m` running over `-h..=h` for a patch of side `2h + 1`. `filters` is laid
/// out as `[k][q][a][b]` with `l = a - h`, `m = b - h`.
pub fn conv3d_stage(input: &Tensor3, filters: &[f64], biases: &[f64], patch: usize) -> Result<Tensor3> {
    check_conv(input, filters, biases, patch)?;
    let out_ch = biases.len();
    let s = input.side;
    let h = patch / 2;
    let mut out = Tensor3::zeros(out_ch, s);
    let fsize = input.channels * patch * patch;
    for k in 0..out_ch {
        let o = &mut out.data[k * s * s..(k + 1) * s * s];
        o.iter_mut().for_each(|v| *v = biases[k]);
        for q in 0..input.channels {
            let x = input.map(q);
            for a in 0..patch {
                let (i0, i1) = valid_range(a, h, s);
                for b in 0..patch {
                    let w = filters[k * fsize + (q * patch + a) * patch + b];
                    if w == 0.0 {
                        continue;
                    }
                    let (j0, j1) = valid_range(b, h, s);
                    for i in i0..i1 {
                        let src = &x[(i + h - a) * s..];
                        let dst = &mut o[i * s..(i + 1) * s];
                        for j in j0..j1 {
                            dst[j] += w * src[j + h - b];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

// output rows i with 0 <= i - (a - h) < s
fn valid_range(a: usize, h: usize, s: usize) -> (usize, usize) {
    let lo = a.saturating_sub(h);
    let hi = (s + a).saturating_sub(h).min(s);
    (lo, hi)
}

fn check_conv(input: &Tensor3, filters: &[f64], biases: &[f64], patch: usize) -> Result<()> {
    if patch.is_multiple_of(2) {
        return Err(Error::ShapeMismatch(format!("patch size {patch} must be odd")));
    }
    if filters.len() != biases.len() * input.channels * patch * patch {
        return Err(Error::ShapeMismatch(format!(
            "{} filter weights for {} filters of depth {} and patch {patch}",
            filters.len(),
            biases.len(),
            input.channels
        )));
    }
    Ok(())
}

/// Gradients of a [`conv3d_stage`] call given the upstream gradient `gout`.
/// Filter and bias gradients are accumulated into `gfilters` / `gbias`; the input
/// gradient is returned when `want_input` is set.
pub fn conv3d_backward(
    input: &Tensor3,
    filters: &[f64],
    patch: usize,
    gout: &Tensor3,
    gfilters: &mut [f64],
    gbias: &mut [f64],
    want_input: bool,
) -> Option<Tensor3> {
    let s = input.side;
    let h = patch / 2;
    let fsize = input.channels * patch * patch;
    let mut gin = want_input.then(|| Tensor3::zeros(input.channels, s));
    for k in 0..gout.channels {
        let go = gout.map(k);
        gbias[k] += go.iter().sum::<f64>();
        for q in 0..input.channels {
            let x = input.map(q);
            for a in 0..patch {
                let (i0, i1) = valid_range(a, h, s);
                for b in 0..patch {
                    let fi = k * fsize + (q * patch + a) * patch + b;
                    let (j0, j1) = valid_range(b, h, s);
                    let mut acc = 0.0;
                    for i in i0..i1 {
                        let src = &x[(i + h - a) * s..];
                        let g = &go[i * s..(i + 1) * s];
                        for j in j0..j1 {
                            acc += g[j] * src[j + h - b];
                        }
                    }
                    gfilters[fi] += acc;
                    if let Some(gin) = gin.as_mut() {
                        let w = filters[fi];
                        if w == 0.0 {
                            continue;
                        }
                        let gq = &mut gin.data[q * s * s..(q + 1) * s * s];
                        for i in i0..i1 {
                            let row = (i + h - a) * s;
                            let g = &go[i * s..(i + 1) * s];
                            for j in j0..j1 {
                                gq[row + j + h - b] += w * g[j];
                            }
                        }
                    }
                }
            }
        }
    }
    gin
}

pub fn rectify(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Non-overlapping 2×2 max pooling with stride 2, per channel. Also returns, for
/// every output cell, the flat input index of the selected maximum (first on ties).
pub fn maxpool2(x: &Tensor3) -> Result<(Tensor3, Vec<usize>)> {
    if !x.side.is_multiple_of(2) {
        return Err(Error::OddSide(x.side));
    }
    let s = x.side;
    let half = s / 2;
    let mut out = Tensor3::zeros(x.channels, half);
    let mut arg = vec![0usize; out.data.len()];
    for c in 0..x.channels {
        let base = c * s * s;
        for i in 0..half {
            for j in 0..half {
                let mut best = base + 2 * i * s + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * s + 2 * j + dj;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                let o = c * half * half + i * half + j;
                out.data[o] = x.data[best];
                arg[o] = best;
            }
        }
    }
    Ok((out, arg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, c: usize, s: usize) -> Tensor3 {
        Tensor3::new(c, s, (0..c * s * s).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct loops over every output pixel, filter offset and channel.
    fn naive_conv(x: &Tensor3, g: &[f64], b: &[f64], p: usize) -> Tensor3 {
        let s = x.side as isize;
        let h = (p / 2) as isize;
        let mut out = Tensor3::zeros(b.len(), x.side);
        for k in 0..b.len() {
            for i in 0..s {
                for j in 0..s {
                    let mut acc = b[k];
                    for q in 0..x.channels {
                        for l in -h..=h {
                            for m in -h..=h {
                                let (si, sj) = (i - l, j - m);
                                if si < 0 || sj < 0 || si >= s || sj >= s {
                                    continue;
                                }
                                let gi = ((k * x.channels + q) * p + (l + h) as usize) * p + (m + h) as usize;
                                acc += x.data[q * x.side * x.side + (si * s + sj) as usize] * g[gi];
                            }
                        }
                    }
                    out.data[k * x.side * x.side + (i * s + j) as usize] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn identity_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, 1, 5);
        assert_eq!(conv3d_stage(&x, &[1.0], &[0.0], 1).unwrap(), x);
        let mut g = vec![0.0; 9];
        g[4] = 1.0;
        assert_eq!(conv3d_stage(&x, &g, &[0.0], 3).unwrap(), x);
    }

    #[test]
    fn constant_input_response() {
        let x = Tensor3::new(2, 8, vec![1.5; 128]).unwrap();
        let g: Vec<f64> = (0..2 * 9).map(|i| 0.1 * i as f64 - 0.4).collect();
        let total: f64 = g.iter().sum();
        let out = conv3d_stage(&x, &g, &[0.25], 3).unwrap();
        for i in 1..7 {
            for j in 1..7 {
                assert!((out.data[i * 8 + j] - (1.5 * total + 0.25)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, 1, 6);
        let g: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        assert_eq!(conv3d_stage(&x, &g, &[0.0], 3).unwrap(), naive_conv(&x, &g, &[0.0], 3));
        let x = rand_tensor(&mut rng, 3, 8);
        let g: Vec<f64> = (0..4 * 3 * 25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = [0.1, -0.2, 0.3, 0.0];
        let fast = conv3d_stage(&x, &g, &b, 5).unwrap();
        let slow = naive_conv(&x, &g, &b, 5);
        for (a, c) in fast.data.iter().zip(&slow.data) {
            assert!((a - c).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_shape_errors() {
        let x = Tensor3::zeros(2, 4);
        assert!(matches!(conv3d_stage(&x, &[0.0; 9], &[0.0], 3), Err(Error::ShapeMismatch(_))));
        assert!(matches!(conv3d_stage(&x, &[0.0; 8], &[0.0], 2), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn conv_backward_against_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, 2, 6);
        let g: Vec<f64> = (0..3 * 2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b = [0.1, 0.2, -0.3];
        let up = rand_tensor(&mut rng, 3, 6);
        let loss = |x: &Tensor3, g: &[f64], b: &[f64]| -> f64 {
            conv3d_stage(x, g, b, 3).unwrap().data.iter().zip(&up.data).map(|(a, c)| a * c).sum()
        };
        let mut gg = vec![0.0; g.len()];
        let mut gb = vec![0.0; 3];
        let gx = conv3d_backward(&x, &g, 3, &up, &mut gg, &mut gb, true).unwrap();
        let h = 1e-6;
        for i in (0..g.len()).step_by(5) {
            let (mut p, mut m) = (g.clone(), g.clone());
            p[i] += h;
            m[i] -= h;
            assert!(((loss(&x, &p, &b) - loss(&x, &m, &b)) / (2.0 * h) - gg[i]).abs() < 1e-7);
        }
        for i in (0..x.data.len()).step_by(7) {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data[i] += h;
            m.data[i] -= h;
            assert!(((loss(&p, &g, &b) - loss(&m, &g, &b)) / (2.0 * h) - gx.data[i]).abs() < 1e-7);
        }
        assert!((gb[1] - up.map(1).iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn rectify_cases() {
        assert_eq!(rectify(&[-2.0]), vec![0.0]);
        assert_eq!(rectify(&[3.0]), vec![3.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let v: Vec<f64> = (0..50).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = rectify(&v);
        for (a, b) in v.iter().zip(&r) {
            assert_eq!(*b, if *a > 0.0 { *a } else { 0.0 });
        }
        assert_eq!(rectify(&r), r);
    }

    #[test]
    fn pooling_cases() {
        let x = Tensor3::new(1, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (p, arg) = maxpool2(&x).unwrap();
        assert_eq!(p.data, vec![4.0]);
        assert_eq!(arg, vec![3]);
        let (p, _) = maxpool2(&Tensor3::new(1, 4, vec![2.5; 16]).unwrap()).unwrap();
        assert_eq!(p.data, vec![2.5; 4]);
        assert!(matches!(maxpool2(&Tensor3::zeros(1, 3)), Err(Error::OddSide(3))));

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, 2, 8);
        let (p, _) = maxpool2(&x).unwrap();
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let m = x.map(c);
                    let block = [m[2 * i * 8 + 2 * j], m[2 * i * 8 + 2 * j + 1], m[(2 * i + 1) * 8 + 2 * j], m[(2 * i + 1) * 8 + 2 * j + 1]];
                    let best = block.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    assert_eq!(p.data[c * 16 + i * 4 + j], best);
                }
            }
        }
        let (pr, _) = maxpool2(&Tensor3::new(2, 8, rectify(&x.data)).unwrap()).unwrap();
        assert!(pr.data.iter().all(|&v| v >= 0.0));
    }
}
