//! Dense ReLU networks with hand-written backprop, Adam, and binary IO.
//!
//! Storage is row-major throughout. A batch is `batch x width`; a layer's
//! weight matrix is `n_in x n_out`, so the forward pass is `y = x W + b`.
//! Matrix products go through `matrixmultiply`.

use std::fmt::Debug;
use std::io::{Read, Write};

use num_traits::Float;
use overtake_core::{Result, SimError};
use rand::Rng;

/// Floating type a network can be instantiated with.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    /// `c = alpha * a * b + beta * c` on raw strided storage.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n`, `m x n` views.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize,
        alpha: Self, a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self, c: *mut Self, rsc: isize, csc: isize,
    );

    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize,
        alpha: f32, a: *const f32, rsa: isize, csa: isize,
        b: *const f32, rsb: isize, csb: isize,
        beta: f32, c: *mut f32, rsc: isize, csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn of_f64(x: f64) -> f32 {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize, k: usize, n: usize,
        alpha: f64, a: *const f64, rsa: isize, csa: isize,
        b: *const f64, rsb: isize, csb: isize,
        beta: f64, c: *mut f64, rsc: isize, csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn of_f64(x: f64) -> f64 {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major `c (m x n) = op(a) op(b) + beta c`, where `op` optionally
/// transposes. `a` is logically `m x k`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize, k: usize, n: usize,
    a: &[T], a_transposed: bool,
    b: &[T], b_transposed: bool,
    beta: T, c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above cover every index the strides reach.
    unsafe {
        T::gemm_raw(m, k, n, T::one(), a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    pub n_in: usize,
    pub n_out: usize,
    /// `n_in x n_out`, row-major.
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Layer { n_in, n_out, w: vec![T::zero(); n_in * n_out], b: vec![T::zero(); n_out] }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng + ?Sized>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let lim = (6.0 / (n_in + n_out) as f64).sqrt();
        let w = (0..n_in * n_out).map(|_| T::of_f64(rng.random_range(-lim..lim))).collect();
        Layer { n_in, n_out, w, b: vec![T::zero(); n_out] }
    }
}

/// Multi-layer perceptron: ReLU after every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Layer<T>>,
}

/// Activations saved by [`Mlp::forward`]: `acts[0]` is the input and
/// `acts[l + 1]` the output of layer `l` (post-ReLU for hidden layers).
#[derive(Debug, Clone)]
pub struct Cache<T> {
    pub batch: usize,
    pub acts: Vec<Vec<T>>,
}

impl<T> Cache<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().expect("cache always holds the input")
    }
}

/// Parameter gradients, laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        Grads { layers: net.layers.iter().map(|l| Layer::zeros(l.n_in, l.n_out)).collect() }
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| [l.w.as_slice(), l.b.as_slice()]).collect()
    }

    pub fn scale(&mut self, s: T) {
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|x| *x = *x * s);
        }
    }

    pub fn add_assign(&mut self, other: &Grads<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.iter_mut().zip(&b.w).for_each(|(x, y)| *x = *x + *y);
            a.b.iter_mut().zip(&b.b).for_each(|(x, y)| *x = *x + *y);
        }
    }
}

impl<T: Scalar> Mlp<T> {
    /// Glorot-initialized network with the given layer widths.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need at least input and output widths");
        Mlp { layers: sizes.windows(2).map(|w| Layer::glorot(w[0], w[1], rng)).collect() }
    }

    pub fn zeros(sizes: &[usize]) -> Self {
        Mlp { layers: sizes.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect() }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].n_in];
        s.extend(self.layers.iter().map(|l| l.n_out));
        s
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().map(|l| l.n_out).unwrap_or(0)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| [l.w.as_slice(), l.b.as_slice()]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers.iter_mut().flat_map(|l| [l.w.as_mut_slice(), l.b.as_mut_slice()]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Forward pass over `batch` rows of `x`.
    pub fn forward(&self, x: &[T], batch: usize) -> Cache<T> {
        assert_eq!(x.len(), batch * self.n_in(), "input width mismatch");
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut y: Vec<T> = Vec::with_capacity(batch * l.n_out);
            for _ in 0..batch {
                y.extend_from_slice(&l.b);
            }
            gemm(batch, l.n_in, l.n_out, &acts[i], false, &l.w, false, T::one(), &mut y);
            if i < last {
                y.iter_mut().for_each(|v| *v = v.max(T::zero()));
            }
            acts.push(y);
        }
        Cache { batch, acts }
    }

    /// Convenience forward returning only the output.
    pub fn predict(&self, x: &[T], batch: usize) -> Vec<T> {
        self.forward(x, batch).acts.pop().unwrap_or_default()
    }

    /// Reverse pass from `grad_out` (`batch x n_out`). Returns parameter
    /// gradients when requested, and always the input gradient.
    pub fn backward(&self, cache: &Cache<T>, grad_out: &[T], need_param_grads: bool) -> (Option<Grads<T>>, Vec<T>) {
        let batch = cache.batch;
        assert_eq!(grad_out.len(), batch * self.n_out(), "output gradient width mismatch");
        let mut grads = need_param_grads.then(|| Grads::zeros_like(self));
        let mut g = grad_out.to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate().rev() {
            if i < last {
                for (gv, &a) in g.iter_mut().zip(&cache.acts[i + 1]) {
                    if a <= T::zero() {
                        *gv = T::zero();
                    }
                }
            }
            if let Some(gr) = grads.as_mut() {
                let gl = &mut gr.layers[i];
                gemm(l.n_in, batch, l.n_out, &cache.acts[i], true, &g, false, T::zero(), &mut gl.w);
                let mut acc = vec![0.0f64; l.n_out];
                for row in g.chunks_exact(l.n_out) {
                    acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v.as_f64());
                }
                gl.b.iter_mut().zip(&acc).for_each(|(b, &a)| *b = T::of_f64(a));
            }
            let mut gin = vec![T::zero(); batch * l.n_in];
            gemm(batch, l.n_out, l.n_in, &g, false, &l.w, true, T::zero(), &mut gin);
            g = gin;
        }
        (grads, g)
    }

    /// `self <- (1 - tau) self + tau online`.
    pub fn soft_update(&mut self, online: &Mlp<T>, tau: f64) {
        assert_eq!(self.sizes(), online.sizes(), "soft_update shape mismatch");
        let tau_t = T::of_f64(tau);
        let keep = T::of_f64(1.0 - tau);
        for (t, o) in self.tensors_mut().into_iter().zip(online.tensors()) {
            if tau == 1.0 {
                t.copy_from_slice(o);
            } else if tau != 0.0 {
                t.iter_mut().zip(o).for_each(|(a, &b)| *a = keep * *a + tau_t * b);
            }
        }
    }

    /// Element type conversion, e.g. for gradient checks in double precision.
    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::of_f64(x.as_f64())).collect();
        Mlp {
            layers: self
                .layers
                .iter()
                .map(|l| Layer { n_in: l.n_in, n_out: l.n_out, w: conv(&l.w), b: conv(&l.b) })
                .collect(),
        }
    }

    /// Layer sizes followed by every tensor as little-endian f32.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let sizes = self.sizes();
        w.write_all(&(sizes.len() as u32).to_le_bytes())?;
        for s in sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        for t in self.tensors() {
            write_f32s(w, t)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let n = read_u32(r)? as usize;
        if !(2..=16).contains(&n) {
            return Err(SimError::config(format!("implausible layer count {n}")));
        }
        let sizes = (0..n).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        if sizes.iter().any(|&s| s == 0 || s > 1 << 16) {
            return Err(SimError::config(format!("implausible layer sizes {sizes:?}")));
        }
        let mut net = Mlp::zeros(&sizes);
        for t in net.tensors_mut() {
            read_f32s(r, t)?;
        }
        Ok(net)
    }
}

pub(crate) fn write_f32s<W: Write, T: Scalar>(w: &mut W, v: &[T]) -> Result<()> {
    let mut buf = Vec::with_capacity(v.len() * 4);
    for x in v {
        buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f32s<R: Read, T: Scalar>(r: &mut R, out: &mut [T]) -> Result<()> {
    let mut buf = vec![0u8; out.len() * 4];
    r.read_exact(&mut buf)?;
    for (o, c) in out.iter_mut().zip(buf.chunks_exact(4)) {
        *o = T::of_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64);
    }
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam over a fixed list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(shapes: &[usize], config: AdamConfig) -> Self {
        Adam {
            config,
            t: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn for_net(net: &Mlp<T>, config: AdamConfig) -> Self {
        let shapes: Vec<usize> = net.tensors().iter().map(|t| t.len()).collect();
        Adam::new(&shapes, config)
    }

    pub fn step(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>) {
        assert_eq!(params.len(), self.m.len(), "tensor count mismatch");
        assert_eq!(grads.len(), self.m.len(), "tensor count mismatch");
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let step = T::of_f64(c.lr / bc1);
        let (b1, b2) = (T::of_f64(c.beta1), T::of_f64(c.beta2));
        let (ob1, ob2) = (T::of_f64(1.0 - c.beta1), T::of_f64(1.0 - c.beta2));
        let inv_bc2 = T::of_f64(1.0 / bc2);
        let eps = T::of_f64(c.eps);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert!(p.len() == g.len() && p.len() == m.len(), "tensor shape mismatch");
            for i in 0..p.len() {
                m[i] = b1 * m[i] + ob1 * g[i];
                v[i] = b2 * v[i] + ob2 * g[i] * g[i];
                p[i] = p[i] - step * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
    }

    /// Clears the moments of selected entries of one tensor, e.g. after
    /// reinitializing them.
    pub fn reset_entries(&mut self, tensor: usize, entries: impl IntoIterator<Item = usize>) {
        for i in entries {
            self.m[tensor][i] = T::zero();
            self.v[tensor][i] = T::zero();
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&self.t.to_le_bytes())?;
        w.write_all(&(self.m.len() as u32).to_le_bytes())?;
        for (m, v) in self.m.iter().zip(&self.v) {
            w.write_all(&(m.len() as u32).to_le_bytes())?;
            write_f32s(w, m)?;
            write_f32s(w, v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R, config: AdamConfig) -> Result<Self> {
        let t = read_u64(r)?;
        let n = read_u32(r)? as usize;
        if n > 64 {
            return Err(SimError::config(format!("implausible optimizer tensor count {n}")));
        }
        let mut adam = Adam { config, t, m: Vec::with_capacity(n), v: Vec::with_capacity(n) };
        for _ in 0..n {
            let len = read_u32(r)? as usize;
            if len > 1 << 26 {
                return Err(SimError::config("implausible optimizer tensor size"));
            }
            let mut m = vec![T::zero(); len];
            let mut v = vec![T::zero(); len];
            read_f32s(r, &mut m)?;
            read_f32s(r, &mut v)?;
            adam.m.push(m);
            adam.v.push(v);
        }
        Ok(adam)
    }
}

/// Relative error used by gradient checks, with an absolute floor so that
/// near-zero gradients compare on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub worst_relative_error: f64,
    pub checked: usize,
    /// Stencils that flipped a ReLU and were therefore not compared.
    pub kink_crossings: usize,
}

/// Smallest `|pre-activation|` over all hidden units and rows. Central
/// differences are only meaningful when this exceeds the perturbation.
pub fn preactivation_margin(net: &Mlp<f64>, x: &[f64], batch: usize) -> f64 {
    let mut a = x.to_vec();
    let mut margin = f64::INFINITY;
    for l in &net.layers[..net.layers.len() - 1] {
        let mut y: Vec<f64> = (0..batch).flat_map(|_| l.b.iter().copied()).collect();
        gemm(batch, l.n_in, l.n_out, &a, false, &l.w, false, 1.0, &mut y);
        margin = y.iter().fold(margin, |m, v| m.min(v.abs()));
        y.iter_mut().for_each(|v| *v = v.max(0.0));
        a = y;
    }
    margin
}

fn relu_mask(cache: &Cache<f64>) -> Vec<bool> {
    cache.acts[1..cache.acts.len() - 1].iter().flatten().map(|&v| v > 0.0).collect()
}

/// Checks every parameter gradient of `net` against central differences of
/// the loss `sum(out * probe)` on `x`.
pub fn gradient_check(net: &Mlp<f64>, x: &[f64], batch: usize, probe: &[f64], h: f64) -> GradCheck {
    let cache = net.forward(x, batch);
    let base_mask = relu_mask(&cache);
    let (grads, _) = net.backward(&cache, probe, true);
    let grads = grads.expect("parameter gradients requested");
    let eval = |n: &Mlp<f64>| {
        let c = n.forward(x, batch);
        let loss: f64 = c.output().iter().zip(probe).map(|(a, b)| a * b).sum();
        (loss, relu_mask(&c) == base_mask)
    };
    let mut work = net.clone();
    let mut out = GradCheck { worst_relative_error: 0.0, checked: 0, kink_crossings: 0 };
    for (ti, g) in grads.tensors().iter().enumerate() {
        for (i, &ga) in g.iter().enumerate() {
            let orig = work.tensors()[ti][i];
            work.tensors_mut()[ti][i] = orig + h;
            let (up, same_up) = eval(&work);
            work.tensors_mut()[ti][i] = orig - h;
            let (down, same_down) = eval(&work);
            work.tensors_mut()[ti][i] = orig;
            if !(same_up && same_down) {
                out.kink_crossings += 1;
                continue;
            }
            out.checked += 1;
            out.worst_relative_error = out.worst_relative_error.max(relative_error(ga, (up - down) / (2.0 * h)));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_forward<T: Scalar>(net: &Mlp<T>, x: &[T], batch: usize) -> Vec<f64> {
        let mut a: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
        for (li, l) in net.layers.iter().enumerate() {
            let mut y = vec![0.0; batch * l.n_out];
            for r in 0..batch {
                for j in 0..l.n_out {
                    let mut s = l.b[j].as_f64();
                    for i in 0..l.n_in {
                        s += a[r * l.n_in + i] * l.w[i * l.n_out + j].as_f64();
                    }
                    y[r * l.n_out + j] = if li + 1 < net.layers.len() { s.max(0.0) } else { s };
                }
            }
            a = y;
        }
        a
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = Mlp::<f32>::zeros(&[5, 8, 3]);
        assert!(net.predict(&[1.0, -2.0, 3.0, 4.0, 5.0], 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_unit_forward_and_backward() {
        let mut net = Mlp::<f64>::zeros(&[1, 1]);
        net.layers[0].w[0] = 2.0;
        net.layers[0].b[0] = 1.0;
        assert_eq!(net.predict(&[3.0], 1), vec![7.0]);

        // y = w x, loss (y - t)^2 with w = 1, x = 2, t = 0
        let mut lin = Mlp::<f64>::zeros(&[1, 1]);
        lin.layers[0].w[0] = 1.0;
        let cache = lin.forward(&[2.0], 1);
        let y = cache.output()[0];
        let (g, gin) = lin.backward(&cache, &[2.0 * y], true);
        assert_eq!(g.unwrap().layers[0].w[0], 8.0);
        assert_eq!(gin, vec![4.0]);
    }

    #[test]
    fn relu_blocks_negative_units() {
        let mut net = Mlp::<f64>::zeros(&[1, 1, 1]);
        net.layers[0].w[0] = -1.0;
        net.layers[1].w[0] = 1.0;
        let cache = net.forward(&[2.0], 1);
        let (g, gin) = net.backward(&cache, &[1.0], true);
        let g = g.unwrap();
        assert_eq!(g.layers[0].w[0], 0.0);
        assert_eq!(g.layers[0].b[0], 0.0);
        assert_eq!(gin, vec![0.0]);
    }

    #[test]
    fn gemm_forward_matches_naive_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::<f64>::new(&[96, 256, 256, 2], &mut rng);
        let batch = 17;
        let x: Vec<f64> = (0..batch * 96).map(|_| rng.random_range(-1.0..1.0)).collect();
        for (a, b) in net.predict(&x, batch).iter().zip(naive_forward(&net, &x, batch)) {
            assert!((a - b).abs() <= 1e-7, "{a} vs {b}");
        }
        // single precision only agrees to rounding of 256-term sums
        let net32 = net.cast::<f32>();
        let x32: Vec<f32> = x.iter().map(|&v| v as f32).collect();
        for (a, b) in net32.predict(&x32, batch).iter().zip(naive_forward(&net32, &x32, batch)) {
            assert!((*a as f64 - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn forward_is_row_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::<f32>::new(&[6, 16, 16, 3], &mut rng);
        let x: Vec<f32> = (0..5 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let all = net.predict(&x, 5);
        for r in 0..5 {
            let one = net.predict(&x[r * 6..(r + 1) * 6], 1);
            assert_eq!(&all[r * 3..(r + 1) * 3], one.as_slice());
        }
        let mut rev = Vec::new();
        for r in (0..5).rev() {
            rev.extend_from_slice(&x[r * 6..(r + 1) * 6]);
        }
        let out = net.predict(&rev, 5);
        for r in 0..5 {
            assert_eq!(&out[r * 3..(r + 1) * 3], &all[(4 - r) * 3..(5 - r) * 3]);
        }
    }

    #[test]
    fn small_net_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let net = Mlp::<f64>::new(&[16, 32, 32, 4], &mut rng);
            let batch = 8;
            let x = loop {
                let x: Vec<f64> = (0..batch * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
                if preactivation_margin(&net, &x, batch) > 1e-3 {
                    break x;
                }
            };
            let probe: Vec<f64> = (0..batch * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = gradient_check(&net, &x, batch, &probe, 1e-4);
            assert_eq!(r.checked, net.n_params());
            assert!(r.worst_relative_error < 1e-4, "{r:?}");
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0f64, -2.0, 0.5];
        let mut adam = Adam::<f64>::new(&[3], AdamConfig::default());
        adam.step(vec![&mut p], vec![&[0.3, -7.0, 1e-3]]);
        let d = [p[0] - 1.0, p[1] + 2.0, p[2] - 0.5];
        assert!((d[0] + 1e-3).abs() < 1e-8);
        assert!((d[1] - 1e-3).abs() < 1e-8);
        assert!((d[2] + 1e-3).abs() < 1e-7);

        let mut q = vec![4.0f64];
        let mut adam = Adam::<f64>::new(&[1], AdamConfig::default());
        adam.step(vec![&mut q], vec![&[0.0]]);
        assert_eq!(q[0], 4.0);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut w = vec![0.0f64];
        let mut adam = Adam::<f64>::new(&[1], AdamConfig { lr: 0.1, ..Default::default() });
        for _ in 0..200 {
            let g = 2.0 * (w[0] - 3.0);
            adam.step(vec![&mut w], vec![&[g]]);
        }
        assert!((w[0] - 3.0).abs() < 0.05, "{}", w[0]);
    }

    #[test]
    fn soft_update_limits() {
        let online = Mlp::<f32> { layers: vec![Layer { n_in: 1, n_out: 1, w: vec![2.0], b: vec![2.0] }] };
        let mut t = Mlp::<f32>::zeros(&[1, 1]);
        t.soft_update(&online, 0.0);
        assert_eq!(t, Mlp::zeros(&[1, 1]));
        t.soft_update(&online, 0.5);
        assert_eq!(t.layers[0].w[0], 1.0);
        t.soft_update(&online, 1.0);
        assert_eq!(t, online);
    }

    #[test]
    fn binary_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::<f32>::new(&[4, 8, 2], &mut rng);
        let mut buf = Vec::new();
        net.write_to(&mut buf).unwrap();
        let back = Mlp::<f32>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, net);
        assert!(Mlp::<f32>::read_from(&mut &buf[..buf.len() - 1]).is_err());

        let mut adam = Adam::for_net(&net, AdamConfig::default());
        let g = Grads { layers: net.layers.clone() };
        let mut n2 = net.clone();
        adam.step(n2.tensors_mut(), g.tensors());
        let mut buf = Vec::new();
        adam.write_to(&mut buf).unwrap();
        assert_eq!(Adam::<f32>::read_from(&mut buf.as_slice(), AdamConfig::default()).unwrap(), adam);
    }
}
