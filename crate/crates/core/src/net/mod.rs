//! Patch classifier: a small inception/residual CNN with explicit forward and
//! backward passes.
//!
//! The network is generic over the float type so that training runs in `f32`
//! while gradient checks run the identical code in `f64`. Samples of a batch
//! are processed independently except inside training-mode batch norm, whose
//! per-channel statistics are reduced over the batch in sample order.

pub mod arch;
pub mod checkpoint;
pub mod layers;

use std::fmt::Debug;

use ndarray::{
    concatenate, s, Array1, Array2, Array3, Array4, ArrayD, ArrayView3, ArrayView4, Axis, IxDyn,
    LinalgScalar,
};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use arch::{Architecture, InceptionSpec};

use crate::dataio::ImageRgb;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::seed::{rng_for, stream};
use crate::tiling::PATCH_SIZE;

pub trait Scalar: LinalgScalar + Float + FromPrimitive + Send + Sync + Debug + 'static {}
impl Scalar for f32 {}
impl Scalar for f64 {}

pub const BN_EPS: f64 = 1e-5;

/// Trained weights as stored in checkpoints.
pub type NetworkWeights = Network<f32>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    ConvKernel,
    BnScale,
    BnShift,
    FcWeight,
    FcBias,
}

impl ParamKind {
    /// Batch-norm scale and shift are exempt from weight decay.
    pub fn decays(self) -> bool {
        !matches!(self, ParamKind::BnScale | ParamKind::BnShift)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: ArrayD<T>,
}

/// Batch-norm running statistics (not learned by gradient descent).
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub value: Array1<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Softmax output: one probability per scanner model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        if values.is_empty()
            || values.iter().any(|p| !(0.0..=1.0).contains(p))
            || (sum - 1.0).abs() > 1e-6
        {
            return Err(Error::Parameter(format!("not a probability vector: {values:?}")));
        }
        Ok(ProbVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    /// Most probable class; the smallest index wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

/// Softmax in double precision with max subtraction.
pub fn softmax<T: Scalar>(logits: &[T]) -> ProbVector {
    let z: Vec<f64> = logits.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    ProbVector(e.into_iter().map(|v| v / sum).collect())
}

/// Scales 8-bit intensities to [0, 1]; no mean subtraction.
pub fn image_tensor<T: Scalar>(img: &ImageRgb) -> Array3<T> {
    let (h, w) = (img.height(), img.width());
    let raw = img.as_raw();
    let scale = T::from_f64(1.0 / 255.0).unwrap();
    Array3::from_shape_fn((3, h, w), |(c, r, col)| {
        T::from_u8(raw[(r * w + col) * 3 + c]).unwrap() * scale
    })
}

pub fn batch_tensor<T: Scalar>(patches: &[&ImageRgb]) -> Result<Array4<T>> {
    let mut out = Array4::<T>::zeros((patches.len(), 3, PATCH_SIZE, PATCH_SIZE));
    for (n, p) in patches.iter().enumerate() {
        if p.height() != PATCH_SIZE || p.width() != PATCH_SIZE {
            return Err(Error::Shape(format!(
                "patch {n} is {}x{}x3, expected {PATCH_SIZE}x{PATCH_SIZE}x3",
                p.height(),
                p.width()
            )));
        }
        out.index_axis_mut(Axis(0), n).assign(&image_tensor::<T>(p));
    }
    Ok(out)
}

/// Indices of one conv + batch-norm (+ optional ReLU) unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvBn {
    cin: usize,
    cout: usize,
    k: usize,
    weight: usize,
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
    relu: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct InceptionBlock {
    cin: usize,
    branch1: ConvBn,
    reduce3: ConvBn,
    branch3: ConvBn,
    reduce5: ConvBn,
    branch5: ConvBn,
    pool_proj: ConvBn,
    shortcut: ConvBn,
    out_channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    stem: ConvBn,
    blocks: Vec<InceptionBlock>,
    fc_weight: usize,
    fc_bias: usize,
}

struct LayoutBuilder<T> {
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Scalar> LayoutBuilder<T> {
    fn param(&mut self, name: String, kind: ParamKind, value: ArrayD<T>) -> usize {
        self.params.push(Param { name, kind, value });
        self.params.len() - 1
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, relu: bool) -> ConvBn {
        let weight = self.param(
            format!("{name}.conv"),
            ParamKind::ConvKernel,
            ArrayD::zeros(IxDyn(&[cout, cin, k, k])),
        );
        let gamma = self.param(
            format!("{name}.bn.scale"),
            ParamKind::BnScale,
            ArrayD::ones(IxDyn(&[cout])),
        );
        let beta = self.param(
            format!("{name}.bn.shift"),
            ParamKind::BnShift,
            ArrayD::zeros(IxDyn(&[cout])),
        );
        self.buffers.push(Buffer {
            name: format!("{name}.bn.running_mean"),
            value: Array1::zeros(cout),
        });
        self.buffers.push(Buffer {
            name: format!("{name}.bn.running_var"),
            value: Array1::ones(cout),
        });
        let var = self.buffers.len() - 1;
        ConvBn {
            cin,
            cout,
            k,
            weight,
            gamma,
            beta,
            mean: var - 1,
            var,
            relu,
        }
    }
}

/// Weights, batch-norm statistics and the architecture they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    arch: Architecture,
    params: Vec<Param<T>>,
    buffers: Vec<Buffer<T>>,
    layout: Layout,
    version: u64,
}

fn build_layout<T: Scalar>(arch: &Architecture) -> (Layout, Vec<Param<T>>, Vec<Buffer<T>>) {
    let mut b = LayoutBuilder {
        params: Vec::new(),
        buffers: Vec::new(),
    };
    let stem = b.conv_bn("stem", arch.input_channels, arch.stem_channels, arch.stem_kernel, true);
    let mut cin = arch.stem_channels;
    let mut blocks = Vec::new();
    for (i, s) in arch.stages.iter().enumerate() {
        let p = format!("stage{i}");
        let block = InceptionBlock {
            cin,
            branch1: b.conv_bn(&format!("{p}.branch1"), cin, s.branch1, 1, true),
            reduce3: b.conv_bn(&format!("{p}.branch3_reduce"), cin, s.branch3_reduce, 1, true),
            branch3: b.conv_bn(&format!("{p}.branch3"), s.branch3_reduce, s.branch3, 3, true),
            reduce5: b.conv_bn(&format!("{p}.branch5_reduce"), cin, s.branch5_reduce, 1, true),
            branch5: b.conv_bn(&format!("{p}.branch5"), s.branch5_reduce, s.branch5, 5, true),
            pool_proj: b.conv_bn(&format!("{p}.pool_proj"), cin, s.pool_proj, 1, true),
            shortcut: b.conv_bn(&format!("{p}.shortcut"), cin, s.out_channels(), 1, false),
            out_channels: s.out_channels(),
        };
        cin = block.out_channels;
        blocks.push(block);
    }
    let fc_weight = b.param(
        "fc.weight".into(),
        ParamKind::FcWeight,
        ArrayD::zeros(IxDyn(&[arch.num_classes, cin])),
    );
    let fc_bias = b.param(
        "fc.bias".into(),
        ParamKind::FcBias,
        ArrayD::zeros(IxDyn(&[arch.num_classes])),
    );
    (
        Layout {
            stem,
            blocks,
            fc_weight,
            fc_bias,
        },
        b.params,
        b.buffers,
    )
}

/// Builds the default patch network for `num_classes` scanners with seeded
/// kernels uniform in `±1/sqrt(fan_in)`, unit batch-norm scale and zero shift.
pub fn build_network(num_classes: usize, seed: u64) -> Result<NetworkWeights> {
    Network::build(Architecture::patch_net(num_classes), seed)
}

impl<T: Scalar> Network<T> {
    pub fn build(arch: Architecture, seed: u64) -> Result<Self> {
        let mut net = Self::zeroed(arch)?;
        for (i, p) in net.params.iter_mut().enumerate() {
            if matches!(p.kind, ParamKind::ConvKernel | ParamKind::FcWeight) {
                let fan_in: usize = p.value.shape()[1..].iter().product();
                // Kaiming-uniform with negative slope sqrt(5). Full He-normal
                // weights are sqrt(6) times larger, which behind batch norm
                // divides the effective step size by six.
                let bound = 1.0 / (fan_in as f64).sqrt();
                let mut rng = rng_for(seed, &[stream::INIT, i as u64]);
                p.value.mapv_inplace(|_| T::from_f64(rng.random_range(-bound..bound)).unwrap());
            }
        }
        Ok(net)
    }

    /// All kernels zero, batch norm at identity.
    pub fn zeroed(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let (layout, params, buffers) = build_layout(&arch);
        Ok(Network {
            arch,
            params,
            buffers,
            layout,
            version: 0,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn buffers(&self) -> &[Buffer<T>] {
        &self.buffers
    }

    /// Mutable access to a parameter tensor. Invalidates training caches.
    pub fn param_mut(&mut self, index: usize) -> &mut ArrayD<T> {
        self.version += 1;
        &mut self.params[index].value
    }

    pub fn buffer_mut(&mut self, index: usize) -> &mut Array1<T> {
        self.version += 1;
        &mut self.buffers[index].value
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Changes whenever weights or statistics are mutated.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Converts every tensor to another float type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let conv = |v: &T| U::from_f64(v.to_f64().unwrap()).unwrap();
        Network {
            arch: self.arch.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.map(conv),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| Buffer {
                    name: b.name.clone(),
                    value: b.value.map(conv),
                })
                .collect(),
            layout: self.layout.clone(),
            version: 0,
        }
    }

    fn kernel(&self, u: &ConvBn) -> ArrayView4<'_, T> {
        self.params[u.weight]
            .value
            .view()
            .into_dimensionality()
            .expect("kernel tensors are 4-d")
    }

    fn vector(&self, index: usize) -> &[T] {
        self.params[index].value.as_slice().expect("contiguous")
    }

    // ---- eval mode ---------------------------------------------------

    fn conv_bn_eval(&self, u: &ConvBn, x: ArrayView3<T>) -> Array3<T> {
        let mut z = layers::conv_forward(x, self.kernel(u));
        let gamma = self.vector(u.gamma);
        let beta = self.vector(u.beta);
        let mean = &self.buffers[u.mean].value;
        let var = &self.buffers[u.var].value;
        let eps = T::from_f64(BN_EPS).unwrap();
        for (c, mut plane) in z.outer_iter_mut().enumerate() {
            let scale = gamma[c] / (var[c] + eps).sqrt();
            let shift = beta[c] - mean[c] * scale;
            if u.relu {
                plane.mapv_inplace(|v| (v * scale + shift).max(T::zero()));
            } else {
                plane.mapv_inplace(|v| v * scale + shift);
            }
        }
        z
    }

    fn block_eval(&self, b: &InceptionBlock, x: ArrayView3<T>) -> Array3<T> {
        let b1 = self.conv_bn_eval(&b.branch1, x);
        let t3 = self.conv_bn_eval(&b.reduce3, x);
        let b3 = self.conv_bn_eval(&b.branch3, t3.view());
        let t5 = self.conv_bn_eval(&b.reduce5, x);
        let b5 = self.conv_bn_eval(&b.branch5, t5.view());
        let (pooled, _) = layers::maxpool3(x);
        let bp = self.conv_bn_eval(&b.pool_proj, pooled.view());
        let sc = self.conv_bn_eval(&b.shortcut, x);
        let mut out = concatenate(Axis(0), &[b1.view(), b3.view(), b5.view(), bp.view()])
            .expect("branch grids share spatial size");
        out.zip_mut_with(&sc, |o, &s| *o = (*o + s).max(T::zero()));
        out
    }

    /// Eval-mode output of inception stage `stage` (before its pooling).
    pub fn inception_forward(&self, stage: usize, features: ArrayView3<T>) -> Result<Array3<T>> {
        let b = self
            .layout
            .blocks
            .get(stage)
            .ok_or_else(|| Error::Parameter(format!("no inception stage {stage}")))?;
        if features.dim().0 != b.cin {
            return Err(Error::Shape(format!(
                "stage {stage} expects {} input channels, got features of shape {:?}",
                b.cin,
                features.shape()
            )));
        }
        Ok(self.block_eval(b, features))
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.arch.input_size;
        if shape != [self.arch.input_channels, s, s] {
            return Err(Error::Shape(format!(
                "network input must be {}x{s}x{s}, got {shape:?}",
                self.arch.input_channels
            )));
        }
        Ok(())
    }

    /// Eval-mode logits for one `[3, 64, 64]` patch tensor.
    pub fn logits_eval(&self, x: ArrayView3<T>) -> Result<Array1<T>> {
        self.check_input(x.shape())?;
        let mut h = self.conv_bn_eval(&self.layout.stem, x);
        for b in &self.layout.blocks {
            let y = self.block_eval(b, h.view());
            h = layers::maxpool2(y.view()).0;
        }
        let g = global_average(h.view());
        Ok(self.fc(&g))
    }

    fn fc(&self, g: &Array1<T>) -> Array1<T> {
        let w: ndarray::ArrayView2<T> = self.params[self.layout.fc_weight]
            .value
            .view()
            .into_dimensionality()
            .expect("fc weight is 2-d");
        let b = self.vector(self.layout.fc_bias);
        let mut logits = w.dot(g);
        for (l, &bb) in logits.iter_mut().zip(b) {
            *l = *l + bb;
        }
        logits
    }

    /// Eval-mode logits `[batch, classes]`; samples are independent.
    pub fn forward_eval(&self, batch: &Array4<T>, exec: &Exec) -> Result<Array2<T>> {
        self.check_input(&batch.shape()[1..])?;
        let rows = exec.try_map(batch.dim().0, |n| self.logits_eval(batch.index_axis(Axis(0), n)))?;
        let mut out = Array2::zeros((rows.len(), self.arch.num_classes));
        for (n, r) in rows.iter().enumerate() {
            out.row_mut(n).assign(r);
        }
        Ok(out)
    }

    /// Batch forward returning softmax outputs; in train mode also returns
    /// the activation cache needed by [`Network::backward`].
    pub fn forward(
        &self,
        batch: &Array4<T>,
        mode: Mode,
        exec: &Exec,
    ) -> Result<(Vec<ProbVector>, Option<TrainCache<T>>)> {
        let (logits, cache) = match mode {
            Mode::Eval => (self.forward_eval(batch, exec)?, None),
            Mode::Train => {
                let (l, c) = self.forward_train(batch, exec)?;
                (l, Some(c))
            }
        };
        let probs = logits
            .outer_iter()
            .map(|row| softmax(row.as_slice().expect("row of standard array")))
            .collect();
        Ok((probs, cache))
    }

    /// Softmax outputs for eval-mode inference on image patches.
    pub fn predict(&self, patches: &[&ImageRgb], exec: &Exec) -> Result<Vec<ProbVector>> {
        let batch = batch_tensor::<T>(patches)?;
        Ok(self.forward(&batch, Mode::Eval, exec)?.0)
    }

    // ---- train mode --------------------------------------------------

    fn conv_bn_train(&self, u: &ConvBn, x: &Array4<T>, exec: &Exec, pin: Option<&ConvBnCache<T>>) -> ConvBnCache<T> {
        let n = x.dim().0;
        let kernel = self.kernel(u);
        let z = stack(exec.map(n, |i| layers::conv_forward(x.index_axis(Axis(0), i), kernel)));
        let (_, c, h, w) = z.dim();
        let count = (n * h * w) as f64;

        let sums = exec.map(n, |i| channel_sums(z.index_axis(Axis(0), i), None));
        let mean: Vec<f64> = reduce_ordered(&sums, c).into_iter().map(|s| s / count).collect();
        let sq = exec.map(n, |i| channel_sums(z.index_axis(Axis(0), i), Some(&mean)));
        let var: Vec<f64> = reduce_ordered(&sq, c).into_iter().map(|s| s / count).collect();
        let inv_std: Vec<T> = var
            .iter()
            .map(|v| T::from_f64(1.0 / (v + BN_EPS).sqrt()).unwrap())
            .collect();
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m).unwrap()).collect();

        let gamma = self.vector(u.gamma);
        let beta = self.vector(u.beta);
        let mut xhat = z;
        let mut out = Array4::<T>::zeros(xhat.dim());
        for (n_i, (mut xs, mut os)) in xhat.outer_iter_mut().zip(out.outer_iter_mut()).enumerate() {
            for ch in 0..c {
                let (m, is, g, bt) = (mean_t[ch], inv_std[ch], gamma[ch], beta[ch]);
                let mut xp = xs.index_axis_mut(Axis(0), ch);
                let mut op = os.index_axis_mut(Axis(0), ch);
                xp.mapv_inplace(|v| (v - m) * is);
                op.zip_mut_with(&xp, |o, &xh| *o = g * xh + bt);
                if u.relu {
                    match pin {
                        None => op.mapv_inplace(|y| y.max(T::zero())),
                        Some(p) => op.zip_mut_with(&p.out.slice(s![n_i, ch, .., ..]), |y, &on| {
                            if on <= T::zero() {
                                *y = T::zero();
                            }
                        }),
                    }
                }
            }
        }
        let unbiased = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        ConvBnCache {
            xhat,
            out,
            inv_std,
            batch_mean: mean,
            batch_var: var.iter().map(|v| v * unbiased).collect(),
        }
    }

    /// Returns `(dx, [dkernel, dgamma, dbeta])`.
    fn conv_bn_backward(
        &self,
        u: &ConvBn,
        x: &Array4<T>,
        cache: &ConvBnCache<T>,
        dout: &Array4<T>,
        need_dx: bool,
        exec: &Exec,
    ) -> (Option<Array4<T>>, [ArrayD<T>; 3]) {
        let n = x.dim().0;
        let (_, c, h, w) = dout.dim();
        let count = (n * h * w) as f64;
        let mut dy = dout.clone();
        if u.relu {
            dy.zip_mut_with(&cache.out, |d, &o| {
                if o <= T::zero() {
                    *d = T::zero();
                }
            });
        }
        let partial = exec.map(n, |i| {
            let dyi = dy.index_axis(Axis(0), i);
            let xi = cache.xhat.index_axis(Axis(0), i);
            let mut sums = vec![0.0f64; 2 * c];
            for ch in 0..c {
                let (mut sb, mut sg) = (0.0, 0.0);
                for (&d, &xh) in dyi.index_axis(Axis(0), ch).iter().zip(xi.index_axis(Axis(0), ch)) {
                    let d = d.to_f64().unwrap();
                    sb += d;
                    sg += d * xh.to_f64().unwrap();
                }
                sums[ch] = sb;
                sums[c + ch] = sg;
            }
            sums
        });
        let total = reduce_ordered(&partial, 2 * c);
        let (dbeta, dgamma) = total.split_at(c);
        let gamma = self.vector(u.gamma);
        let mut dz = dy;
        for (mut dzs, xs) in dz.outer_iter_mut().zip(cache.xhat.outer_iter()) {
            for ch in 0..c {
                let k = gamma[ch] * cache.inv_std[ch] / T::from_f64(count).unwrap();
                let cnt = T::from_f64(count).unwrap();
                let db = T::from_f64(dbeta[ch]).unwrap();
                let dg = T::from_f64(dgamma[ch]).unwrap();
                let mut dp = dzs.index_axis_mut(Axis(0), ch);
                dp.zip_mut_with(&xs.index_axis(Axis(0), ch), |d, &xh| {
                    *d = k * (cnt * *d - db - xh * dg);
                });
            }
        }
        let kernel = self.kernel(u);
        let per_sample = exec.map(n, |i| {
            layers::conv_backward(x.index_axis(Axis(0), i), kernel, dz.index_axis(Axis(0), i), need_dx)
        });
        let mut dkernel = Array2::<T>::zeros((u.cout, u.cin * u.k * u.k));
        let mut dxs = Vec::with_capacity(if need_dx { n } else { 0 });
        for (dx, dw) in per_sample {
            dkernel = dkernel + dw;
            if let Some(dx) = dx {
                dxs.push(dx);
            }
        }
        let to_t = |v: &[f64]| ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.iter().map(|&x| T::from_f64(x).unwrap()).collect()).unwrap();
        let grads = [
            dkernel
                .into_shape_with_order(IxDyn(&[u.cout, u.cin, u.k, u.k]))
                .expect("kernel-sized"),
            to_t(dgamma),
            to_t(dbeta),
        ];
        let dx = need_dx.then(|| stack(dxs));
        (dx, grads)
    }

    fn block_train(&self, b: &InceptionBlock, x: Array4<T>, exec: &Exec, pin: Option<&BlockCache<T>>) -> BlockCache<T> {
        let n = x.dim().0;
        let branch1 = self.conv_bn_train(&b.branch1, &x, exec, pin.map(|p| &p.branch1));
        let reduce3 = self.conv_bn_train(&b.reduce3, &x, exec, pin.map(|p| &p.reduce3));
        let branch3 = self.conv_bn_train(&b.branch3, &reduce3.out, exec, pin.map(|p| &p.branch3));
        let reduce5 = self.conv_bn_train(&b.reduce5, &x, exec, pin.map(|p| &p.reduce5));
        let branch5 = self.conv_bn_train(&b.branch5, &reduce5.out, exec, pin.map(|p| &p.branch5));
        let (pooled, pool_arg) = match pin {
            None => {
                let parts = exec.map(n, |i| layers::maxpool3(x.index_axis(Axis(0), i)));
                let (pooled, arg): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
                (stack(pooled), arg)
            }
            Some(p) => {
                let pooled = exec.map(n, |i| layers::maxpool3_gather(x.index_axis(Axis(0), i), &p.pool_arg[i]));
                (stack(pooled), p.pool_arg.clone())
            }
        };
        let pool_proj = self.conv_bn_train(&b.pool_proj, &pooled, exec, pin.map(|p| &p.pool_proj));
        let shortcut = self.conv_bn_train(&b.shortcut, &x, exec, pin.map(|p| &p.shortcut));
        let mut out = concatenate(
            Axis(1),
            &[branch1.out.view(), branch3.out.view(), branch5.out.view(), pool_proj.out.view()],
        )
        .expect("branch grids share spatial size");
        out.zip_mut_with(&shortcut.out, |o, &s| *o = *o + s);
        match pin {
            None => out.mapv_inplace(|v| v.max(T::zero())),
            Some(p) => out.zip_mut_with(&p.out, |v, &on| {
                if on <= T::zero() {
                    *v = T::zero();
                }
            }),
        }
        BlockCache {
            input: x,
            branch1,
            reduce3,
            branch3,
            reduce5,
            branch5,
            pooled,
            pool_arg,
            pool_proj,
            shortcut,
            out,
        }
    }

    fn block_backward(
        &self,
        b: &InceptionBlock,
        cache: &BlockCache<T>,
        dout: &Array4<T>,
        need_dx: bool,
        grads: &mut [ArrayD<T>],
        exec: &Exec,
    ) -> Option<Array4<T>> {
        let mut ds = dout.clone();
        ds.zip_mut_with(&cache.out, |d, &o| {
            if o <= T::zero() {
                *d = T::zero();
            }
        });
        let spans = [b.branch1.cout, b.branch3.cout, b.branch5.cout, b.pool_proj.cout];
        let mut start = 0;
        let mut slices = Vec::with_capacity(4);
        for len in spans {
            slices.push(ds.slice(s![.., start..start + len, .., ..]).to_owned());
            start += len;
        }
        let mut store = |u: &ConvBn, g: [ArrayD<T>; 3]| {
            let [dk, dg, db] = g;
            grads[u.weight] = dk;
            grads[u.gamma] = dg;
            grads[u.beta] = db;
        };
        let x = &cache.input;
        let (dx1, g) = self.conv_bn_backward(&b.branch1, x, &cache.branch1, &slices[0], need_dx, exec);
        store(&b.branch1, g);
        let (dt3, g) = self.conv_bn_backward(&b.branch3, &cache.reduce3.out, &cache.branch3, &slices[1], true, exec);
        store(&b.branch3, g);
        let (dx3, g) = self.conv_bn_backward(&b.reduce3, x, &cache.reduce3, &dt3.unwrap(), need_dx, exec);
        store(&b.reduce3, g);
        let (dt5, g) = self.conv_bn_backward(&b.branch5, &cache.reduce5.out, &cache.branch5, &slices[2], true, exec);
        store(&b.branch5, g);
        let (dx5, g) = self.conv_bn_backward(&b.reduce5, x, &cache.reduce5, &dt5.unwrap(), need_dx, exec);
        store(&b.reduce5, g);
        let (dpooled, g) = self.conv_bn_backward(&b.pool_proj, &cache.pooled, &cache.pool_proj, &slices[3], need_dx, exec);
        store(&b.pool_proj, g);
        let (dxs, g) = self.conv_bn_backward(&b.shortcut, x, &cache.shortcut, &ds, need_dx, exec);
        store(&b.shortcut, g);
        if !need_dx {
            return None;
        }
        let dpooled = dpooled.unwrap();
        let dxp = stack(exec.map(x.dim().0, |i| {
            layers::maxpool3_backward(dpooled.index_axis(Axis(0), i), &cache.pool_arg[i])
        }));
        let mut dx = dx1.unwrap();
        for part in [dx3, dx5, Some(dxp), dxs] {
            dx = dx + part.unwrap();
        }
        Some(dx)
    }

    /// Training-mode forward (batch statistics in batch norm). Returns logits
    /// and the cache consumed by [`Network::backward`].
    pub fn forward_train(&self, batch: &Array4<T>, exec: &Exec) -> Result<(Array2<T>, TrainCache<T>)> {
        self.forward_train_impl(batch, exec, None)
    }

    /// Training forward restricted to the smooth piece of the network that
    /// `pin` was recorded on: ReLU on/off states and pooling winners are
    /// replayed from `pin` instead of being recomputed. Agrees with
    /// [`Network::forward_train`] whenever the activation signatures match.
    pub fn forward_train_pinned(
        &self,
        batch: &Array4<T>,
        exec: &Exec,
        pin: &TrainCache<T>,
    ) -> Result<(Array2<T>, TrainCache<T>)> {
        if pin.input.shape() != batch.shape() || pin.blocks.len() != self.layout.blocks.len() {
            return Err(Error::Shape("pinned pattern was recorded on a different batch shape".into()));
        }
        self.forward_train_impl(batch, exec, Some(pin))
    }

    fn forward_train_impl(
        &self,
        batch: &Array4<T>,
        exec: &Exec,
        pin: Option<&TrainCache<T>>,
    ) -> Result<(Array2<T>, TrainCache<T>)> {
        self.check_input(&batch.shape()[1..])?;
        let n = batch.dim().0;
        if n == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        let stem = self.conv_bn_train(&self.layout.stem, batch, exec, pin.map(|p| &p.stem));
        let mut h = stem.out.clone();
        let mut blocks = Vec::with_capacity(self.layout.blocks.len());
        let mut pools = Vec::with_capacity(self.layout.blocks.len());
        for (bi, b) in self.layout.blocks.iter().enumerate() {
            let bc = self.block_train(b, h, exec, pin.map(|p| &p.blocks[bi]));
            let (pooled, arg): (Vec<Array3<T>>, Vec<Vec<u8>>) = match pin {
                None => {
                    let parts = exec.map(n, |i| layers::maxpool2(bc.out.index_axis(Axis(0), i)));
                    parts.into_iter().unzip()
                }
                Some(p) => (
                    exec.map(n, |i| layers::maxpool2_gather(bc.out.index_axis(Axis(0), i), &p.pools[bi][i])),
                    p.pools[bi].clone(),
                ),
            };
            h = stack(pooled);
            pools.push(arg);
            blocks.push(bc);
        }
        let (_, c, fh, fw) = h.dim();
        let inv = T::from_f64(1.0 / (fh * fw) as f64).unwrap();
        let gap = Array2::from_shape_fn((n, c), |(i, ch)| {
            h.slice(s![i, ch, .., ..]).iter().fold(T::zero(), |a, &v| a + v) * inv
        });
        let mut logits = Array2::zeros((n, self.arch.num_classes));
        for i in 0..n {
            logits.row_mut(i).assign(&self.fc(&gap.row(i).to_owned()));
        }
        Ok((
            logits,
            TrainCache {
                version: self.version,
                batch: n,
                input: batch.clone(),
                stem,
                blocks,
                pools,
                pooled_dim: (fh, fw),
                gap,
            },
        ))
    }

    /// Exact gradients of a scalar loss given `dloss/dlogits` (`[batch, classes]`).
    pub fn backward(&self, dlogits: &Array2<T>, cache: &TrainCache<T>, exec: &Exec) -> Result<Gradients<T>> {
        if cache.version != self.version {
            return Err(Error::State(format!(
                "activation cache is stale (taken at weight version {}, weights now at {})",
                cache.version, self.version
            )));
        }
        if dlogits.dim() != (cache.batch, self.arch.num_classes) {
            return Err(Error::Shape(format!(
                "loss gradient is {:?}, expected ({}, {})",
                dlogits.dim(),
                cache.batch,
                self.arch.num_classes
            )));
        }
        let mut grads: Vec<ArrayD<T>> = self.params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect();
        let fc_w: ndarray::ArrayView2<T> = self.params[self.layout.fc_weight]
            .value
            .view()
            .into_dimensionality()
            .expect("2-d");
        grads[self.layout.fc_weight] = dlogits.t().dot(&cache.gap).into_dyn();
        grads[self.layout.fc_bias] = dlogits.sum_axis(Axis(0)).into_dyn();
        let dgap = dlogits.dot(&fc_w);
        let (fh, fw) = cache.pooled_dim;
        let inv = T::from_f64(1.0 / (fh * fw) as f64).unwrap();
        let (n, c) = dgap.dim();
        let mut dh = Array4::from_shape_fn((n, c, fh, fw), |(i, ch, _, _)| dgap[[i, ch]] * inv);
        for (bi, b) in self.layout.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[bi];
            let (_, _, bh, bw) = bc.out.dim();
            let dpre = stack(exec.map(n, |i| {
                layers::maxpool2_backward(dh.index_axis(Axis(0), i), &cache.pools[bi][i], bh, bw)
            }));
            dh = self
                .block_backward(b, bc, &dpre, true, &mut grads, exec)
                .expect("dx requested");
        }
        let stem = &self.layout.stem;
        let (_, g) = self.conv_bn_backward(stem, &cache.input, &cache.stem, &dh, false, exec);
        let [dk, dg, db] = g;
        grads[stem.weight] = dk;
        grads[stem.gamma] = dg;
        grads[stem.beta] = db;
        Ok(Gradients { grads })
    }

    /// Folds the batch statistics of a training forward pass into the running
    /// estimates: `running = (1 - momentum) * running + momentum * batch`.
    pub fn update_running_stats(&mut self, cache: &TrainCache<T>, momentum: f64) {
        let mut units = vec![(self.layout.stem, &cache.stem)];
        for (b, bc) in self.layout.blocks.iter().zip(&cache.blocks) {
            units.extend([
                (b.branch1, &bc.branch1),
                (b.reduce3, &bc.reduce3),
                (b.branch3, &bc.branch3),
                (b.reduce5, &bc.reduce5),
                (b.branch5, &bc.branch5),
                (b.pool_proj, &bc.pool_proj),
                (b.shortcut, &bc.shortcut),
            ]);
        }
        for (u, c) in units {
            for (buf, batch) in [(u.mean, &c.batch_mean), (u.var, &c.batch_var)] {
                let run = &mut self.buffers[buf].value;
                for (r, &b) in run.iter_mut().zip(batch) {
                    *r = T::from_f64((1.0 - momentum) * r.to_f64().unwrap() + momentum * b).unwrap();
                }
            }
        }
        self.version += 1;
    }

    /// Direct access for checkpoint loading and the optimizer.
    pub(crate) fn params_and_buffers_mut(&mut self) -> (&mut [Param<T>], &mut [Buffer<T>]) {
        self.version += 1;
        (&mut self.params, &mut self.buffers)
    }
}

/// Per-parameter gradients, aligned with [`Network::params`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub grads: Vec<ArrayD<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        Gradients {
            grads: net.params.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| *v == T::zero()))
    }
}

struct ConvBnCache<T> {
    xhat: Array4<T>,
    out: Array4<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<f64>,
    /// Unbiased, as used for the running estimate.
    batch_var: Vec<f64>,
}

struct BlockCache<T> {
    input: Array4<T>,
    branch1: ConvBnCache<T>,
    reduce3: ConvBnCache<T>,
    branch3: ConvBnCache<T>,
    reduce5: ConvBnCache<T>,
    branch5: ConvBnCache<T>,
    pooled: Array4<T>,
    pool_arg: Vec<Vec<u32>>,
    pool_proj: ConvBnCache<T>,
    shortcut: ConvBnCache<T>,
    out: Array4<T>,
}

/// Activations recorded by a training-mode forward pass.
pub struct TrainCache<T> {
    version: u64,
    batch: usize,
    input: Array4<T>,
    stem: ConvBnCache<T>,
    blocks: Vec<BlockCache<T>>,
    pools: Vec<Vec<Vec<u8>>>,
    pooled_dim: (usize, usize),
    gap: Array2<T>,
}

impl<T: Scalar> TrainCache<T> {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Hash of every ReLU on/off state and max-pool selection of the pass.
    /// Two passes with equal signatures lie on the same smooth piece of the
    /// network function.
    pub fn activation_signature(&self) -> u64 {
        let mut h = Fnv(0xcbf2_9ce4_8422_2325);
        let mut units = vec![&self.stem];
        for b in &self.blocks {
            units.extend([&b.branch1, &b.reduce3, &b.branch3, &b.reduce5, &b.branch5, &b.pool_proj]);
            h.mask(&b.out);
            for arg in &b.pool_arg {
                arg.iter().for_each(|&a| h.push(u64::from(a)));
            }
        }
        for u in units {
            h.mask(&u.out);
        }
        for arg in self.pools.iter().flatten() {
            arg.iter().for_each(|&a| h.push(u64::from(a)));
        }
        h.0
    }
}

struct Fnv(u64);

impl Fnv {
    fn push(&mut self, v: u64) {
        self.0 = (self.0 ^ v).wrapping_mul(0x0100_0000_01b3);
    }

    fn mask<T: Scalar>(&mut self, a: &Array4<T>) {
        let mut bits = 0u64;
        for (i, &v) in a.iter().enumerate() {
            bits |= u64::from(v > T::zero()) << (i % 64);
            if i % 64 == 63 {
                self.push(bits);
                bits = 0;
            }
        }
        self.push(bits);
    }
}

fn global_average<T: Scalar>(h: ArrayView3<T>) -> Array1<T> {
    let (_, hh, ww) = h.dim();
    let inv = T::from_f64(1.0 / (hh * ww) as f64).unwrap();
    h.outer_iter()
        .map(|p| p.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect()
}

fn stack<T: Scalar>(parts: Vec<Array3<T>>) -> Array4<T> {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal sample shapes")
}

/// Per-channel sums (or squared deviations from `mean`) of one sample, in f64.
fn channel_sums<T: Scalar>(z: ArrayView3<T>, mean: Option<&[f64]>) -> Vec<f64> {
    z.outer_iter()
        .enumerate()
        .map(|(c, plane)| match mean {
            None => plane.iter().map(|v| v.to_f64().unwrap()).sum(),
            Some(m) => plane
                .iter()
                .map(|v| {
                    let d = v.to_f64().unwrap() - m[c];
                    d * d
                })
                .sum(),
        })
        .collect()
}

fn reduce_ordered(parts: &[Vec<f64>], len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for p in parts {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

#[cfg(test)]
mod tests;
