//! Layers with explicit forward caches and backward passes.

use rand::Rng;

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{gemm, Scalar, Tensor};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// 3x3 (padding 1) or 1x1 convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

pub struct ConvCache<T> {
    col: Vec<T>,
    h: usize,
    w: usize,
}

fn im2col3<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let (c, h, w) = x.shape();
    let hw = h * w;
    let mut col = vec![T::zero(); c * 9 * hw];
    for ci in 0..c {
        let src = x.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let base = (ci * 9 + ky * 3 + kx) * hw;
                let dst = &mut col[base..base + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..(sy as usize + 1) * w];
                    let drow = &mut dst[y * w..(y + 1) * w];
                    match kx {
                        0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                        1 => drow.copy_from_slice(srow),
                        _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                    }
                }
            }
        }
    }
    col
}

fn col2im3<T: Scalar>(col: &[T], c: usize, h: usize, w: usize) -> Tensor<T> {
    let hw = h * w;
    let mut x = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let dst = &mut x.data[ci * hw..(ci + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let base = (ci * 9 + ky * 3 + kx) * hw;
                let src = &col[base..base + hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..(sy as usize + 1) * w];
                    let srow = &src[y * w..(y + 1) * w];
                    let (d, s) = match kx {
                        0 => (&mut drow[..w - 1], &srow[1..]),
                        1 => (&mut drow[..], srow),
                        _ => (&mut drow[1..], &srow[..w - 1]),
                    };
                    for (a, &b) in d.iter_mut().zip(s) {
                        *a = *a + b;
                    }
                }
            }
        }
    }
    x
}

impl Conv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(k == 1 || k == 3, "only 1x1 and 3x3 convolutions");
        let weight = store.add_he(format!("{name}.weight"), vec![cout, cin, k, k], cin * k * k, rng);
        let bias = store.add_const(format!("{name}.bias"), vec![cout], 0.0);
        Conv { cin, cout, k, weight, bias }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        assert_eq!(x.c, self.cin, "conv input channels");
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let col = if self.k == 1 { x.data.clone() } else { im2col3(x) };
        let mut out = Tensor::zeros(self.cout, h, w);
        for (co, &b) in p.get(self.bias).iter().enumerate() {
            out.data[co * hw..(co + 1) * hw].iter_mut().for_each(|v| *v = b);
        }
        let kk = self.cin * self.k * self.k;
        gemm(false, false, self.cout, hw, kk, T::one(), p.get(self.weight), &col, T::one(), &mut out.data);
        (out, ConvCache { col, h, w })
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        cache: ConvCache<T>,
        dy: &Tensor<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let hw = cache.h * cache.w;
        let kk = self.cin * self.k * self.k;
        gemm(false, true, self.cout, kk, hw, T::one(), &dy.data, &cache.col, T::one(), g.get_mut(self.weight));
        let db = g.get_mut(self.bias);
        for (co, slot) in db.iter_mut().enumerate() {
            *slot = *slot + dy.data[co * hw..(co + 1) * hw].iter().copied().sum::<T>();
        }
        if !need_dx {
            return None;
        }
        let mut dcol = vec![T::zero(); kk * hw];
        gemm(true, false, kk, hw, self.cout, T::one(), p.get(self.weight), &dy.data, T::zero(), &mut dcol);
        Some(if self.k == 1 {
            Tensor::from_vec(self.cin, cache.h, cache.w, dcol)
        } else {
            col2im3(&dcol, self.cin, cache.h, cache.w)
        })
    }
}

/// Transposed convolution, kernel 2, stride 2.
#[derive(Debug, Clone)]
pub struct UpConv {
    pub cin: usize,
    pub cout: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl UpConv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_he(format!("{name}.weight"), vec![cin, cout, 2, 2], cin, rng);
        let bias = store.add_const(format!("{name}.bias"), vec![cout], 0.0);
        UpConv { cin, cout, weight, bias }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "up-conv input channels");
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let c4 = self.cout * 4;
        let mut y = vec![T::zero(); c4 * hw];
        gemm(true, false, c4, hw, self.cin, T::one(), p.get(self.weight), &x.data, T::zero(), &mut y);
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor::zeros(self.cout, oh, ow);
        let bias = p.get(self.bias);
        for co in 0..self.cout {
            for a in 0..2 {
                for b in 0..2 {
                    let src = &y[(co * 4 + a * 2 + b) * hw..(co * 4 + a * 2 + b + 1) * hw];
                    for i in 0..h {
                        let row = &mut out.data[co * oh * ow + (2 * i + a) * ow..co * oh * ow + (2 * i + a + 1) * ow];
                        for j in 0..w {
                            row[2 * j + b] = src[i * w + j] + bias[co];
                        }
                    }
                }
            }
        }
        out
    }

    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, g: &mut Grads<T>, x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
        let (h, w) = (x.h, x.w);
        let hw = h * w;
        let (oh, ow) = (2 * h, 2 * w);
        let c4 = self.cout * 4;
        let mut dyr = vec![T::zero(); c4 * hw];
        let db = g.get_mut(self.bias);
        for co in 0..self.cout {
            db[co] = db[co] + dy.channel(co).iter().copied().sum::<T>();
            for a in 0..2 {
                for b in 0..2 {
                    let dst = &mut dyr[(co * 4 + a * 2 + b) * hw..(co * 4 + a * 2 + b + 1) * hw];
                    for i in 0..h {
                        let row = &dy.data[co * oh * ow + (2 * i + a) * ow..co * oh * ow + (2 * i + a + 1) * ow];
                        for j in 0..w {
                            dst[i * w + j] = row[2 * j + b];
                        }
                    }
                }
            }
        }
        gemm(false, true, self.cin, c4, hw, T::one(), &x.data, &dyr, T::one(), g.get_mut(self.weight));
        let mut dx = Tensor::zeros(self.cin, h, w);
        gemm(false, false, self.cin, hw, c4, T::one(), p.get(self.weight), &dyr, T::zero(), &mut dx.data);
        dx
    }
}

/// Per-sample, per-channel normalisation with learned scale and shift.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub c: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
}

impl InstanceNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        let gamma = store.add_const(format!("{name}.gamma"), vec![c], 1.0);
        let beta = store.add_const(format!("{name}.beta"), vec![c], 0.0);
        InstanceNorm { c, gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &mut Tensor<T>) -> NormCache<T> {
        let hw = x.plane();
        let n = T::from_usize(hw).expect("plane size");
        let eps = T::from_f64_lossy(INSTANCE_NORM_EPS);
        let (gamma, beta) = (p.get(self.gamma), p.get(self.beta));
        let mut xhat = vec![T::zero(); x.data.len()];
        let mut inv_std = vec![T::zero(); self.c];
        for k in 0..self.c {
            let ch = &mut x.data[k * hw..(k + 1) * hw];
            let mean = ch.iter().copied().sum::<T>() / n;
            let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[k] = is;
            for (v, xh) in ch.iter_mut().zip(&mut xhat[k * hw..(k + 1) * hw]) {
                *xh = (*v - mean) * is;
                *v = gamma[k] * *xh + beta[k];
            }
        }
        NormCache { xhat, inv_std }
    }

    pub fn backward<T: Scalar>(&self, p: &ParamStore<T>, g: &mut Grads<T>, cache: &NormCache<T>, dy: &mut Tensor<T>) {
        let hw = dy.plane();
        let n = T::from_usize(hw).expect("plane size");
        let gamma = p.get(self.gamma);
        for k in 0..self.c {
            let d = &mut dy.data[k * hw..(k + 1) * hw];
            let xh = &cache.xhat[k * hw..(k + 1) * hw];
            let sum_d: T = d.iter().copied().sum();
            let sum_dx: T = d.iter().zip(xh).map(|(&a, &b)| a * b).sum();
            let dg = g.get_mut(self.gamma);
            dg[k] = dg[k] + sum_dx;
            let dbeta = g.get_mut(self.beta);
            dbeta[k] = dbeta[k] + sum_d;
            // dxhat = gamma * dy; dx = inv_std / n * (n dxhat - sum dxhat - xhat sum(dxhat xhat))
            let scale = gamma[k] * cache.inv_std[k] / n;
            for (v, &h) in d.iter_mut().zip(xh) {
                *v = scale * (n * *v - sum_d - h * sum_dx);
            }
        }
    }
}

pub fn leaky_relu<T: Scalar>(x: &mut Tensor<T>, slope: T) -> Vec<bool> {
    x.data
        .iter_mut()
        .map(|v| {
            let pos = *v > T::zero();
            if !pos {
                *v = *v * slope;
            }
            pos
        })
        .collect()
}

pub fn leaky_relu_backward<T: Scalar>(dy: &mut Tensor<T>, positive: &[bool], slope: T) {
    for (d, &pos) in dy.data.iter_mut().zip(positive) {
        if !pos {
            *d = *d * slope;
        }
    }
}

/// 2x2 max pooling, stride 2. Returns the flat argmax index per output.
pub fn max_pool2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (c, h, w) = x.shape();
    assert!(h % 2 == 0 && w % 2 == 0, "max pool needs even sides");
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(c, oh, ow);
    let mut arg = vec![0u32; c * oh * ow];
    for k in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = k * h * w + 2 * i * w + 2 * j;
                for (a, b) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = k * h * w + (2 * i + a) * w + 2 * j + b;
                    if x.data[idx] > x.data[best] {
                        best = idx;
                    }
                }
                let o = k * oh * ow + i * ow + j;
                out.data[o] = x.data[best];
                arg[o] = best as u32;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Scalar>(dy: &Tensor<T>, arg: &[u32], shape: (usize, usize, usize)) -> Tensor<T> {
    let mut dx = Tensor::zeros(shape.0, shape.1, shape.2);
    for (&d, &i) in dy.data.iter().zip(arg) {
        dx.data[i as usize] = dx.data[i as usize] + d;
    }
    dx
}

/// Convolution, instance norm, leaky ReLU.
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    pub conv: Conv,
    pub norm: InstanceNorm,
}

pub struct CnaCache<T> {
    conv: ConvCache<T>,
    norm: NormCache<T>,
    positive: Vec<bool>,
}

impl ConvNormAct {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        ConvNormAct {
            conv: Conv::new(store, &format!("{name}.conv"), cin, cout, 3, rng),
            norm: InstanceNorm::new(store, &format!("{name}.norm"), cout),
        }
    }

    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, x: &Tensor<T>, slope: T) -> (Tensor<T>, CnaCache<T>) {
        let (mut y, conv) = self.conv.forward(p, x);
        let norm = self.norm.forward(p, &mut y);
        let positive = leaky_relu(&mut y, slope);
        (y, CnaCache { conv, norm, positive })
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        g: &mut Grads<T>,
        cache: CnaCache<T>,
        mut dy: Tensor<T>,
        slope: T,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        leaky_relu_backward(&mut dy, &cache.positive, slope);
        self.norm.backward(p, g, &cache.norm, &mut dy);
        self.conv.backward(p, g, cache.conv, &dy, need_dx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct_conv3(x: &Tensor<f64>, wt: &[f64], bias: &[f64], cout: usize) -> Tensor<f64> {
        let (cin, h, w) = x.shape();
        let mut out = Tensor::zeros(cout, h, w);
        for co in 0..cout {
            for y in 0..h {
                for xx in 0..w {
                    let mut s = bias[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = y as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    s += wt[((co * cin + ci) * 3 + ky) * 3 + kx]
                                        * x.data[(ci * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                    }
                    out.data[(co * h + y) * w + xx] = s;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::default();
        let conv = Conv::new(&mut store, "c", 3, 4, 3, &mut rng);
        store.get_mut(conv.bias).copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
        let x = Tensor::from_vec(3, 5, 6, (0..90).map(|i| ((i * 37) % 11) as f64 - 5.0).collect());
        let (y, _) = conv.forward(&store, &x);
        let expected = direct_conv3(&x, store.get(conv.weight), store.get(conv.bias), 4);
        for (a, b) in y.data.iter().zip(&expected.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn up_conv_places_kernel_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::default();
        let up = UpConv::new(&mut store, "u", 1, 1, &mut rng);
        store.get_mut(up.weight).copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let x = Tensor::from_vec(1, 1, 2, vec![1.0, 10.0]);
        let y = up.forward(&store, &x);
        assert_eq!((y.h, y.w), (2, 4));
        assert_eq!(y.data, vec![1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 30.0, 40.0]);
    }

    #[test]
    fn instance_norm_standardizes() {
        let mut store = ParamStore::<f64>::default();
        let norm = InstanceNorm::new(&mut store, "n", 2);
        let mut x = Tensor::from_vec(2, 2, 2, vec![1.0, 2.0, 3.0, 4.0, 10.0, 10.0, 10.0, 14.0]);
        norm.forward(&store, &mut x);
        for k in 0..2 {
            let ch = x.channel(k);
            let mean: f64 = ch.iter().sum::<f64>() / 4.0;
            let var: f64 = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn pool_picks_maximum() {
        let x = Tensor::from_vec(1, 2, 4, vec![1.0f32, 5.0, 2.0, 2.0, 3.0, 4.0, 9.0, 2.0]);
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.data, vec![5.0, 9.0]);
        let dx = max_pool2_backward(&Tensor::from_vec(1, 1, 2, vec![1.0, 2.0]), &arg, (1, 2, 4));
        assert_eq!(dx.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn single_conv_parameter_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::default();
        Conv::new(&mut store, "c", 1, 8, 3, &mut rng);
        assert_eq!(store.count(), 80);
    }
}
