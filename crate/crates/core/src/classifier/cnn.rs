//! Small residual convolutional network for diagram classification.
//!
//! Layout: 3×3 stem convolution, three residual blocks (conv, ReLU, conv,
//! identity shortcut, ReLU, 2×2 average pool), global average pooling and
//! a dense 4-way softmax head. All parameters live in one flat `Vec<f64>`.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{CategoryProbs, RoadCategory};
use crate::crhd::CrhdImage;
use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"MGRD01";
const BLOCKS: usize = 3;
const CLASSES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnArch {
    pub input_px: usize,
    pub channels: usize,
    pub stem_stride: usize,
}

impl Default for CnnArch {
    fn default() -> Self {
        CnnArch { input_px: 128, channels: 8, stem_stride: 2 }
    }
}

impl CnnArch {
    /// 8×8 input, 4 channels, unit stride.
    pub fn toy() -> Self {
        CnnArch { input_px: 8, channels: 4, stem_stride: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !(1..=2).contains(&self.stem_stride) || self.input_px == 0 {
            return Err(Error::argument("invalid CNN architecture"));
        }
        let after_stem = self.stem_px();
        if after_stem % (1 << BLOCKS) != 0 {
            return Err(Error::argument(format!(
                "stem output {after_stem}px must be divisible by {}",
                1 << BLOCKS
            )));
        }
        Ok(())
    }

    fn stem_px(&self) -> usize {
        (self.input_px - 1) / self.stem_stride + 1
    }

    /// `(name, shape)` of every parameter tensor in storage order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.channels;
        let mut v = vec![("stem.w".to_string(), vec![c, 3, 3, 3]), ("stem.b".to_string(), vec![c])];
        for k in 0..BLOCKS {
            for j in 1..=2 {
                v.push((format!("block{k}.conv{j}.w"), vec![c, c, 3, 3]));
                v.push((format!("block{k}.conv{j}.b"), vec![c]));
            }
        }
        v.push(("dense.w".to_string(), vec![CLASSES, c]));
        v.push(("dense.b".to_string(), vec![CLASSES]));
        v
    }

    pub fn param_count(&self) -> usize {
        self.shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Offsets of each tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    stem_w: usize,
    stem_b: usize,
    blocks: [[usize; 4]; BLOCKS],
    dense_w: usize,
    dense_b: usize,
}

impl Layout {
    fn of(arch: &CnnArch) -> Self {
        let c = arch.channels;
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let stem_w = take(c * 27);
        let stem_b = take(c);
        let mut blocks = [[0; 4]; BLOCKS];
        for b in &mut blocks {
            *b = [take(c * c * 9), take(c), take(c * c * 9), take(c)];
        }
        let dense_w = take(CLASSES * c);
        let dense_b = take(CLASSES);
        Layout { stem_w, stem_b, blocks, dense_w, dense_b }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    pub arch: CnnArch,
    pub params: Vec<f64>,
}

/// Network input: `3 × px × px` channel-planar RGB in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnInput {
    pub px: usize,
    pub data: Vec<f32>,
}

impl CnnInput {
    /// Area-average resample of a diagram to `px × px`.
    pub fn from_image(image: &CrhdImage, px: usize) -> Self {
        let src = image.size_px as usize;
        let weights = box_weights(src, px);
        let mut data = vec![0f32; 3 * px * px];
        let scale = (px as f64 / src as f64).powi(2) / 255.0;
        let mut acc = vec![0f64; 3 * px];
        for oy in 0..px {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for &(sy, wy) in &weights[oy] {
                let row = &image.pixels[sy * src * 3..(sy + 1) * src * 3];
                for ox in 0..px {
                    for &(sx, wx) in &weights[ox] {
                        let w = wy * wx;
                        for ch in 0..3 {
                            acc[ch * px + ox] += w * row[sx * 3 + ch] as f64;
                        }
                    }
                }
            }
            for ch in 0..3 {
                for ox in 0..px {
                    data[(ch * px + oy) * px + ox] = (acc[ch * px + ox] * scale) as f32;
                }
            }
        }
        CnnInput { px, data }
    }
}

/// For each output index, the source indices and overlap lengths of the
/// interval `[i·src/dst, (i+1)·src/dst)`.
fn box_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let ratio = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let (a, b) = (i as f64 * ratio, (i + 1) as f64 * ratio);
            let lo = a.floor() as usize;
            let hi = (b.ceil() as usize).min(src);
            (lo..hi)
                .filter_map(|s| {
                    let w = (b.min(s as f64 + 1.0) - a.max(s as f64)).max(0.0);
                    (w > 0.0).then_some((s, w))
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
struct Tensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor { c, h, w, data: vec![0.0; c * h * w] }
    }

    fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }
}

/// Range of output columns whose tap `k` lands inside `[0, len)`.
fn valid_range(k: usize, len: usize, out: usize, stride: usize) -> (usize, usize) {
    let lo = if k == 0 { 1 } else { 0 };
    let hi = if len + 1 < k + 1 { 0 } else { ((len - k) / stride + 1).min(out) };
    (lo, hi.max(lo))
}

fn conv3x3(input: &Tensor, w: &[f64], b: &[f64], cout: usize, stride: usize) -> Tensor {
    let (ho, wo) = ((input.h - 1) / stride + 1, (input.w - 1) / stride + 1);
    let mut out = Tensor::zeros(cout, ho, wo);
    for co in 0..cout {
        let o = &mut out.data[co * ho * wo..(co + 1) * ho * wo];
        o.iter_mut().for_each(|v| *v = b[co]);
        for ci in 0..input.c {
            let src = input.plane(ci);
            for ky in 0..3 {
                let (ylo, yhi) = valid_range(ky, input.h, ho, stride);
                for kx in 0..3 {
                    let wv = w[((co * input.c + ci) * 3 + ky) * 3 + kx];
                    let (xlo, xhi) = valid_range(kx, input.w, wo, stride);
                    for y in ylo..yhi {
                        let srow = &src[(y * stride + ky - 1) * input.w..];
                        let orow = &mut o[y * wo..(y + 1) * wo];
                        if stride == 1 {
                            let s = &srow[xlo + kx - 1..xhi + kx - 1];
                            for (ov, sv) in orow[xlo..xhi].iter_mut().zip(s) {
                                *ov += wv * sv;
                            }
                        } else {
                            for x in xlo..xhi {
                                orow[x] += wv * srow[x * stride + kx - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates `dw`, `db` and (optionally) the input gradient of a conv.
fn conv3x3_backward(
    input: &Tensor,
    w: &[f64],
    dout: &Tensor,
    stride: usize,
    dw: &mut [f64],
    db: &mut [f64],
    mut din: Option<&mut Tensor>,
) {
    let (ho, wo) = (dout.h, dout.w);
    for co in 0..dout.c {
        let g = dout.plane(co);
        db[co] += g.iter().sum::<f64>();
        for ci in 0..input.c {
            let src = input.plane(ci);
            for ky in 0..3 {
                let (ylo, yhi) = valid_range(ky, input.h, ho, stride);
                for kx in 0..3 {
                    let widx = ((co * input.c + ci) * 3 + ky) * 3 + kx;
                    let wv = w[widx];
                    let (xlo, xhi) = valid_range(kx, input.w, wo, stride);
                    let mut acc = 0.0;
                    for y in ylo..yhi {
                        let soff = (y * stride + ky - 1) * input.w;
                        let grow = &g[y * wo..(y + 1) * wo];
                        if stride == 1 {
                            let s = &src[soff + xlo + kx - 1..soff + xhi + kx - 1];
                            for (gv, sv) in grow[xlo..xhi].iter().zip(s) {
                                acc += gv * sv;
                            }
                            if let Some(d) = din.as_deref_mut() {
                                let plane = &mut d.data[ci * input.h * input.w..];
                                let drow = &mut plane[soff + xlo + kx - 1..soff + xhi + kx - 1];
                                for (dv, gv) in drow.iter_mut().zip(&grow[xlo..xhi]) {
                                    *dv += wv * gv;
                                }
                            }
                        } else {
                            for x in xlo..xhi {
                                acc += grow[x] * src[soff + x * stride + kx - 1];
                            }
                            if let Some(d) = din.as_deref_mut() {
                                let plane = &mut d.data[ci * input.h * input.w..];
                                for x in xlo..xhi {
                                    plane[soff + x * stride + kx - 1] += wv * grow[x];
                                }
                            }
                        }
                    }
                    dw[widx] += acc;
                }
            }
        }
    }
}

fn relu(t: &Tensor) -> Tensor {
    Tensor { c: t.c, h: t.h, w: t.w, data: t.data.iter().map(|v| v.max(0.0)).collect() }
}

fn avg_pool2(t: &Tensor) -> Tensor {
    let (h, w) = (t.h / 2, t.w / 2);
    let mut out = Tensor::zeros(t.c, h, w);
    for c in 0..t.c {
        let src = t.plane(c);
        for y in 0..h {
            for x in 0..w {
                let i = 2 * y * t.w + 2 * x;
                out.data[(c * h + y) * w + x] = 0.25 * (src[i] + src[i + 1] + src[i + t.w] + src[i + t.w + 1]);
            }
        }
    }
    out
}

fn avg_pool2_backward(dout: &Tensor) -> Tensor {
    let (h, w) = (dout.h * 2, dout.w * 2);
    let mut din = Tensor::zeros(dout.c, h, w);
    for c in 0..dout.c {
        for y in 0..h {
            for x in 0..w {
                din.data[(c * h + y) * w + x] = 0.25 * dout.data[(c * dout.h + y / 2) * dout.w + x / 2];
            }
        }
    }
    din
}

/// Intermediate values of one residual block needed for backprop.
struct BlockCache {
    input: Tensor,
    z1: Tensor,
    r1: Tensor,
    sum: Tensor,
}

struct ForwardCache {
    input: Tensor,
    stem_z: Tensor,
    blocks: Vec<BlockCache>,
    pooled: Vec<f64>,
    probs: [f64; CLASSES],
}

fn input_tensor(input: &CnnInput) -> Tensor {
    Tensor { c: 3, h: input.px, w: input.px, data: input.data.iter().map(|&v| v as f64).collect() }
}

impl CnnModel {
    /// Kaiming-normal weights (fan-in scaling) and zero biases.
    pub fn init(arch: CnnArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(arch.param_count());
        for (name, shape) in arch.shapes() {
            let n: usize = shape.iter().product();
            if name.ends_with(".b") {
                params.extend(std::iter::repeat(0.0).take(n));
                continue;
            }
            let fan_in: usize = shape[1..].iter().product();
            let gain = if name.starts_with("dense") { 1.0 } else { 2.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
            params.extend((0..n).map(|_| normal.sample(&mut rng)));
        }
        Ok(CnnModel { arch, params })
    }

    pub fn zeros(arch: CnnArch) -> Result<Self> {
        arch.validate()?;
        Ok(CnnModel { arch, params: vec![0.0; arch.param_count()] })
    }

    fn forward_cached(&self, input: &CnnInput) -> ForwardCache {
        let a = &self.arch;
        let c = a.channels;
        let l = Layout::of(a);
        let p = &self.params;
        let x = input_tensor(input);
        let stem_z = conv3x3(&x, &p[l.stem_w..], &p[l.stem_b..], c, a.stem_stride);
        let mut h = relu(&stem_z);
        let mut blocks = Vec::with_capacity(BLOCKS);
        for o in &l.blocks {
            let z1 = conv3x3(&h, &p[o[0]..], &p[o[1]..], c, 1);
            let r1 = relu(&z1);
            let mut sum = conv3x3(&r1, &p[o[2]..], &p[o[3]..], c, 1);
            for (s, v) in sum.data.iter_mut().zip(&h.data) {
                *s += v;
            }
            let next = avg_pool2(&relu(&sum));
            blocks.push(BlockCache { input: h, z1, r1, sum });
            h = next;
        }
        let area = (h.h * h.w) as f64;
        let pooled: Vec<f64> = (0..c).map(|k| h.plane(k).iter().sum::<f64>() / area).collect();
        let mut logits = [0.0; CLASSES];
        for (j, lg) in logits.iter_mut().enumerate() {
            *lg = p[l.dense_b + j] + (0..c).map(|k| p[l.dense_w + j * c + k] * pooled[k]).sum::<f64>();
        }
        ForwardCache { input: x, stem_z, blocks, pooled, probs: CategoryProbs::softmax(logits).0 }
    }

    pub fn forward(&self, input: &CnnInput) -> CategoryProbs {
        CategoryProbs(self.forward_cached(input).probs)
    }

    /// Adds the cross-entropy gradient for one example to `grad` and
    /// returns the example loss.
    fn backward(&self, input: &CnnInput, label: RoadCategory, grad: &mut [f64]) -> f64 {
        let cache = self.forward_cached(input);
        let a = &self.arch;
        let c = a.channels;
        let l = Layout::of(a);
        let p = &self.params;
        let y = label.index();
        let loss = -cache.probs[y].max(f64::MIN_POSITIVE).ln();

        let mut dlogit = cache.probs;
        dlogit[y] -= 1.0;
        let mut dpooled = vec![0.0; c];
        for j in 0..CLASSES {
            grad[l.dense_b + j] += dlogit[j];
            for k in 0..c {
                grad[l.dense_w + j * c + k] += dlogit[j] * cache.pooled[k];
                dpooled[k] += dlogit[j] * p[l.dense_w + j * c + k];
            }
        }
        let last = &cache.blocks[BLOCKS - 1].sum;
        let (fh, fw) = (last.h / 2, last.w / 2);
        let mut dh = Tensor::zeros(c, fh, fw);
        for k in 0..c {
            let g = dpooled[k] / (fh * fw) as f64;
            dh.data[k * fh * fw..(k + 1) * fh * fw].iter_mut().for_each(|v| *v = g);
        }
        for (bc, o) in cache.blocks.iter().zip(&l.blocks).rev() {
            let mut dsum = avg_pool2_backward(&dh);
            for (d, s) in dsum.data.iter_mut().zip(&bc.sum.data) {
                if *s <= 0.0 {
                    *d = 0.0;
                }
            }
            let mut dr1 = Tensor::zeros(c, bc.r1.h, bc.r1.w);
            let (gw2, rest) = grad.split_at_mut(o[3]);
            conv3x3_backward(&bc.r1, &p[o[2]..], &dsum, 1, &mut gw2[o[2]..], rest, Some(&mut dr1));
            for (d, z) in dr1.data.iter_mut().zip(&bc.z1.data) {
                if *z <= 0.0 {
                    *d = 0.0;
                }
            }
            let mut din = dsum;
            let (gw1, rest) = grad.split_at_mut(o[1]);
            conv3x3_backward(&bc.input, &p[o[0]..], &dr1, 1, &mut gw1[o[0]..], rest, Some(&mut din));
            dh = din;
        }
        for (d, z) in dh.data.iter_mut().zip(&cache.stem_z.data) {
            if *z <= 0.0 {
                *d = 0.0;
            }
        }
        let (gw, rest) = grad.split_at_mut(l.stem_b);
        conv3x3_backward(&cache.input, &p[l.stem_w..], &dh, a.stem_stride, &mut gw[l.stem_w..], rest, None);
        loss
    }

    /// Mean cross-entropy over `batch` and its gradient.
    pub fn batch_gradient(&self, batch: &[(&CnnInput, RoadCategory)]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (x, y) in batch {
            loss += self.backward(x, *y, &mut grad);
        }
        let n = batch.len() as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        (loss / n, grad)
    }

    pub fn save(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(64 + 8 * self.params.len());
        buf.extend_from_slice(MAGIC);
        for v in [self.arch.input_px, self.arch.channels, self.arch.stem_stride] {
            buf.extend_from_slice(&(v as u32).to_le_bytes());
        }
        let shapes = self.arch.shapes();
        buf.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
        for (name, shape) in &shapes {
            buf.push(name.len() as u8);
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
        }
        for v in &self.params {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(|e| Error::Format(format!("writing checkpoint: {e}")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = Vec::new();
        self.save(&mut v).expect("writing to memory");
        v
    }

    pub fn load(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| Error::Format(format!("reading checkpoint: {e}")))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, at: 0 };
        if r.take(6)? != MAGIC {
            return Err(bad_checkpoint("bad magic"));
        }
        let arch = CnnArch { input_px: r.u32()?, channels: r.u32()?, stem_stride: r.u32()? };
        arch.validate()?;
        let n_layers = r.u32()?;
        let mut table = Vec::with_capacity(n_layers.min(64));
        for _ in 0..n_layers {
            let len = r.take(1)?[0] as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| bad_checkpoint("layer name"))?;
            let ndim = r.u32()?;
            let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            table.push((name, dims));
        }
        if table != arch.shapes() {
            return Err(bad_checkpoint("layer table does not match architecture"));
        }
        let raw = r.take(8 * arch.param_count())?;
        let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        if r.at != bytes.len() {
            return Err(bad_checkpoint("trailing bytes"));
        }
        Ok(CnnModel { arch, params })
    }
}

fn bad_checkpoint(m: &str) -> Error {
    Error::Format(format!("invalid MGRD01 checkpoint: {m}"))
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self.bytes.get(self.at..self.at + n).ok_or_else(|| bad_checkpoint("truncated"))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Class probabilities for a diagram, resampled to the model input size.
pub fn cnn_forward(model: &CnnModel, image: &CrhdImage) -> CategoryProbs {
    model.forward(&CnnInput::from_image(image, model.arch.input_px))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.0005, batch_size: 2, epochs: 30, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::argument("learning_rate must be a finite value ≥ 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::argument("batch_size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Mean mini-batch loss over the epoch.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: CnnModel,
    pub history: Vec<EpochStats>,
    /// 1-based epoch whose weights were kept; 0 when no epoch ran.
    pub best_epoch: usize,
}

fn accuracy(model: &CnnModel, set: &[(CnnInput, RoadCategory)]) -> f64 {
    let hits = set.iter().filter(|(x, y)| super::assign_category(&model.forward(x)) == *y).count();
    hits as f64 / set.len() as f64
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Mini-batch training with Adam updates and a seeded per-epoch shuffle.
///
/// With a validation set, the weights of the epoch with the best validation
/// accuracy (earliest on ties) are returned; otherwise the final weights.
pub fn cnn_train(
    train: &[(CnnInput, RoadCategory)],
    validation: &[(CnnInput, RoadCategory)],
    arch: CnnArch,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::argument("training set is empty"));
    }
    if let Some((x, _)) = train.iter().chain(validation).find(|(x, _)| x.px != arch.input_px) {
        return Err(Error::argument(format!("input is {}px, model expects {}px", x.px, arch.input_px)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = CnnModel::init(arch, rand::Rng::gen(&mut rng))?;
    let n = model.params.len();
    let (mut m, mut v) = (vec![0.0; n], vec![0.0; n]);
    let mut step = 0i32;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<f64>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| (&train[i].0, train[i].1)).collect();
            let (loss, grad) = model.batch_gradient(&batch);
            loss_sum += loss;
            batches += 1;
            step += 1;
            let c1 = 1.0 - ADAM_BETA1.powi(step);
            let c2 = 1.0 - ADAM_BETA2.powi(step);
            for i in 0..n {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                model.params[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
        let validation_accuracy = (!validation.is_empty()).then(|| accuracy(&model, validation));
        let stats = EpochStats {
            train_loss: loss_sum / batches as f64,
            train_accuracy: accuracy(&model, train),
            validation_accuracy,
        };
        log::debug!("epoch {epoch}: {stats:?}");
        history.push(stats);
        if let Some(acc) = validation_accuracy {
            if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
                best = Some((acc, epoch, model.params.clone()));
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => cfg.epochs,
    };
    Ok(TrainOutcome { model, history, best_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodata::GeoPoint;
    use rand::Rng;

    /// Straight-loop reference forward pass on nested vectors.
    fn oracle_forward(model: &CnnModel, input: &CnnInput) -> [f64; 4] {
        let c = model.arch.channels;
        let p = &model.params;
        let mut cursor = 0;
        let mut next = |len: usize| {
            let s = p[cursor..cursor + len].to_vec();
            cursor += len;
            s
        };
        type Img = Vec<Vec<Vec<f64>>>;
        fn conv(x: &Img, w: &[f64], b: &[f64], cout: usize, stride: usize) -> Img {
            let (cin, h, wd) = (x.len(), x[0].len(), x[0][0].len());
            let ho = (h + 2 - 3) / stride + 1;
            let wo = (wd + 2 - 3) / stride + 1;
            let mut out = vec![vec![vec![0.0; wo]; ho]; cout];
            for co in 0..cout {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut s = b[co];
                        for ci in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = (y * stride + ky) as isize - 1;
                                    let sx = (xx * stride + kx) as isize - 1;
                                    if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                                        s += w[co * cin * 9 + ci * 9 + ky * 3 + kx] * x[ci][sy as usize][sx as usize];
                                    }
                                }
                            }
                        }
                        out[co][y][xx] = s;
                    }
                }
            }
            out
        }
        let relu = |x: Img| -> Img { x.into_iter().map(|p| p.into_iter().map(|r| r.into_iter().map(|v| if v > 0.0 { v } else { 0.0 }).collect()).collect()).collect() };
        let px = input.px;
        let x: Img = (0..3).map(|ch| (0..px).map(|y| (0..px).map(|xx| input.data[ch * px * px + y * px + xx] as f64).collect()).collect()).collect();
        let (sw, sb) = (next(27 * c), next(c));
        let mut h = relu(conv(&x, &sw, &sb, c, model.arch.stem_stride));
        for _ in 0..BLOCKS {
            let (w1, b1, w2, b2) = (next(9 * c * c), next(c), next(9 * c * c), next(c));
            let r1 = relu(conv(&h, &w1, &b1, c, 1));
            let z2 = conv(&r1, &w2, &b2, c, 1);
            let mut s = z2.clone();
            for k in 0..c {
                for y in 0..s[k].len() {
                    for xx in 0..s[k][y].len() {
                        s[k][y][xx] += h[k][y][xx];
                    }
                }
            }
            let s = relu(s);
            let hh = s[0].len() / 2;
            h = (0..c)
                .map(|k| (0..hh).map(|y| (0..hh).map(|xx| (s[k][2 * y][2 * xx] + s[k][2 * y + 1][2 * xx] + s[k][2 * y][2 * xx + 1] + s[k][2 * y + 1][2 * xx + 1]) / 4.0).collect()).collect())
                .collect();
        }
        let g: Vec<f64> = h.iter().map(|pl| pl.iter().flatten().sum::<f64>() / (pl.len() * pl[0].len()) as f64).collect();
        let (dw, db) = (next(4 * c), next(4));
        let logits: Vec<f64> = (0..4).map(|j| db[j] + (0..c).map(|k| dw[j * c + k] * g[k]).sum::<f64>()).collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        [e[0] / z, e[1] / z, e[2] / z, e[3] / z]
    }

    fn random_input(px: usize, seed: u64) -> CnnInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CnnInput { px, data: (0..3 * px * px).map(|_| rng.gen::<f32>()).collect() }
    }

    fn perturbed(arch: CnnArch, seed: u64) -> CnnModel {
        let mut m = CnnModel::init(arch, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        // non-zero biases so every code path carries signal
        for v in &mut m.params {
            *v += rng.gen_range(-0.1..0.1);
        }
        m
    }

    #[test]
    fn zero_weights_give_uniform() {
        let m = CnnModel::zeros(CnnArch::default()).unwrap();
        let img = CrhdImage::blank(512, GeoPoint::new(0.0, 0.0), 100.0, [255, 255, 255]);
        assert_eq!(cnn_forward(&m, &img), CategoryProbs::UNIFORM);
    }

    #[test]
    fn forward_matches_oracle() {
        for (arch, seed) in [(CnnArch::toy(), 1), (CnnArch { input_px: 16, channels: 3, stem_stride: 2 }, 2), (CnnArch { input_px: 32, channels: 2, stem_stride: 1 }, 3)] {
            let m = perturbed(arch, seed);
            let x = random_input(arch.input_px, seed + 10);
            let got = m.forward(&x).0;
            let want = oracle_forward(&m, &x);
            for k in 0..4 {
                assert!((got[k] - want[k]).abs() < 1e-10, "{arch:?}: {got:?} vs {want:?}");
            }
            assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_check() {
        let arch = CnnArch::toy();
        assert!(arch.param_count() <= 5000);
        let mut m = perturbed(arch, 5);
        let xs: Vec<CnnInput> = (0..2).map(|i| random_input(8, 20 + i)).collect();
        let batch = [(&xs[0], RoadCategory::Organic), (&xs[1], RoadCategory::Radial)];
        let (_, grad) = m.batch_gradient(&batch);
        let loss = |m: &CnnModel| m.batch_gradient(&batch).0;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let h = 1e-5;
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let i = rng.gen_range(0..m.params.len());
            let orig = m.params[i];
            m.params[i] = orig + h;
            let up = loss(&m);
            m.params[i] = orig - h;
            let down = loss(&m);
            m.params[i] = orig;
            let num = (up - down) / (2.0 * h);
            let rel = (num - grad[i]).abs() / (num.abs() + grad[i].abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = perturbed(CnnArch::toy(), 9);
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..6], b"MGRD01");
        assert_eq!(CnnModel::from_bytes(&bytes).unwrap(), m);
        assert!(CnnModel::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(CnnModel::from_bytes(&extra).is_err());
        assert!(CnnModel::from_bytes(b"MGRD02").is_err());
    }

    #[test]
    fn area_average_resample() {
        let mut img = CrhdImage::blank(4, GeoPoint::new(0.0, 0.0), 1.0, [255, 255, 255]);
        img.pixels.iter_mut().for_each(|v| *v = 0);
        // top-left 2×2 block white → first output pixel 1.0, others 0.0
        for (x, y) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let i = (y * 4 + x) * 3;
            img.pixels[i..i + 3].copy_from_slice(&[255, 255, 255]);
        }
        let x = CnnInput::from_image(&img, 2);
        assert_eq!(&x.data[..4], &[1.0, 0.0, 0.0, 0.0]);
        // 3 → 2 uses fractional overlaps: each output covers 1.5 source pixels
        let w = box_weights(3, 2);
        assert_eq!(w[0], vec![(0, 1.0), (1, 0.5)]);
        assert_eq!(w[1], vec![(1, 0.5), (2, 1.0)]);
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let data: Vec<_> = RoadCategory::ALL.iter().enumerate().map(|(i, &c)| (random_input(8, i as u64), c)).collect();
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 3, seed: 4, ..Default::default() };
        let out = cnn_train(&data, &[], CnnArch::toy(), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(out.model, CnnModel::init(CnnArch::toy(), rng.gen()).unwrap());
        assert!(cnn_train(&[], &[], CnnArch::toy(), &cfg).is_err());
        assert!(cnn_train(&data, &[], CnnArch::toy(), &TrainConfig { batch_size: 0, ..cfg }).is_err());
    }

    #[test]
    fn defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.learning_rate, c.batch_size, c.epochs), (0.0005, 2, 30));
        assert!(CnnArch::default().param_count() < 1_000_000);
        assert!(CnnArch { input_px: 100, channels: 4, stem_stride: 2 }.validate().is_err());
    }

    fn four_class_set(px: usize) -> Vec<(CnnInput, RoadCategory)> {
        let ds = crate::synth::DatasetSpec::new(1, 3, 64).unwrap();
        ds.items.iter().map(|it| (CnnInput::from_image(&ds.image(it), px), it.label)).collect()
    }

    #[test]
    fn overfits_four_images() {
        let set = four_class_set(8);
        let cfg = TrainConfig { learning_rate: 0.01, batch_size: 4, epochs: 300, seed: 1 };
        let out = cnn_train(&set, &[], CnnArch::toy(), &cfg).unwrap();
        assert_eq!(out.history.last().unwrap().train_accuracy, 1.0);
        let losses: Vec<f64> = out.history.iter().map(|h| h.train_loss).collect();
        let down = losses.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(down as f64 >= 0.9 * (losses.len() - 1) as f64, "{down} of {}", losses.len() - 1);
    }

    #[test]
    fn training_is_deterministic() {
        let set = four_class_set(8);
        let cfg = TrainConfig { learning_rate: 0.01, batch_size: 2, epochs: 5, seed: 9 };
        let a = cnn_train(&set, &set, CnnArch::toy(), &cfg).unwrap();
        let b = cnn_train(&set, &set, CnnArch::toy(), &cfg).unwrap();
        assert_eq!(a.model.to_bytes(), b.model.to_bytes());
        assert_eq!(a.best_epoch, b.best_epoch);
        assert!(cnn_train(&[], &[], CnnArch::toy(), &cfg).is_err());
    }
}
