//! A small conditional noise-prediction network over 3-channel velocity
//! fields, with explicit forward, backward, and parameter updates.
//!
//! The input is the 6-channel concatenation [y(3), atlas, embedded slices,
//! slice mask]. A stem convolution lifts it to `C` channels, `R` residual
//! blocks follow (each: conv, FiLM scale/shift from a sinusoidal time
//! embedding, ELU, conv, squeeze-excitation channel gate), and a
//! zero-initialized head maps back to 3 channels after a tanh-approximated
//! GELU. All convolutions are 3x3x3 with clamp padding.
//!
//! Parameters live in one flat buffer described by a tensor table, so the
//! optimizer, the checkpoint format, and finite-difference checks can
//! address every tensor uniformly.

use crate::error::{Error, Result};
use crate::grid::{check_same_grid, GridSpec, ScalarVolume, VectorField};
use crate::Scalar;
use rand::Rng;

/// Default channel width.
pub const DEFAULT_CHANNELS: usize = 16;
/// Default number of residual blocks.
pub const DEFAULT_BLOCKS: usize = 4;
/// Default sinusoidal time-embedding dimension.
pub const DEFAULT_EMBED_DIM: usize = 32;
/// Default squeeze-excitation reduction.
pub const DEFAULT_SE_REDUCTION: usize = 4;

/// Conditioning inputs shared by every diffusion step: the atlas, the
/// observed slices embedded at their planes, and the binary plane mask.
#[derive(Debug, Clone)]
pub struct ConditioningPack<T: Scalar> {
    pub atlas: ScalarVolume<T>,
    pub slices_embedded: ScalarVolume<T>,
    pub slice_mask: ScalarVolume<T>,
}

impl<T: Scalar> ConditioningPack<T> {
    pub fn new(
        atlas: ScalarVolume<T>,
        slices_embedded: ScalarVolume<T>,
        slice_mask: ScalarVolume<T>,
    ) -> Result<Self> {
        check_same_grid("conditioning", atlas.grid(), slices_embedded.grid())?;
        check_same_grid("conditioning", atlas.grid(), slice_mask.grid())?;
        if slice_mask
            .data()
            .iter()
            .any(|&m| !(m == T::zero() || m == T::one()))
        {
            return Err(Error::InvalidParameter("slice mask must be binary".into()));
        }
        Ok(Self {
            atlas,
            slices_embedded,
            slice_mask,
        })
    }

    pub fn grid(&self) -> &GridSpec {
        self.atlas.grid()
    }
}

/// Anything that predicts the injected noise from `(y_tau, tau, cond)`.
pub trait EpsPredictor<T: Scalar> {
    fn predict(
        &self,
        y_tau: &VectorField<T>,
        tau: usize,
        cond: &ConditioningPack<T>,
    ) -> Result<VectorField<T>>;
}

/// Network hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserShape {
    /// Hidden channel count C.
    pub channels: usize,
    /// Residual block count R.
    pub blocks: usize,
    /// Sinusoidal embedding dimension E (must be even).
    pub embed_dim: usize,
    /// Squeeze-excitation reduction r.
    pub se_reduction: usize,
}

impl Default for DenoiserShape {
    fn default() -> Self {
        Self {
            channels: DEFAULT_CHANNELS,
            blocks: DEFAULT_BLOCKS,
            embed_dim: DEFAULT_EMBED_DIM,
            se_reduction: DEFAULT_SE_REDUCTION,
        }
    }
}

const IN_CHANNELS: usize = 6;
const OUT_CHANNELS: usize = 3;
const KERNEL: usize = 27; // 3x3x3

/// One named tensor inside the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct TensorSlot {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    stem_w: usize,
    stem_b: usize,
    head_w: usize,
    head_b: usize,
    block_base: usize,
    block_stride: usize,
    total: usize,
}

impl DenoiserShape {
    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.blocks == 0 || self.embed_dim == 0 || self.se_reduction == 0 {
            return Err(Error::InvalidParameter(
                "denoiser hyperparameters must be positive".into(),
            ));
        }
        if self.embed_dim % 2 != 0 {
            return Err(Error::InvalidParameter(
                "embedding dimension must be even".into(),
            ));
        }
        if self.channels % self.se_reduction != 0 {
            return Err(Error::InvalidParameter(
                "channels must be divisible by the squeeze-excitation reduction".into(),
            ));
        }
        Ok(())
    }

    fn se_hidden(&self) -> usize {
        self.channels / self.se_reduction
    }

    /// Total number of parameters for this shape.
    pub fn parameter_count(&self) -> Result<usize> {
        self.validate()?;
        Ok(self.layout().total)
    }

    fn layout(&self) -> Layout {
        let c = self.channels;
        let e = self.embed_dim;
        let sh = self.se_hidden();
        let stem_w = 0;
        let stem_b = stem_w + c * IN_CHANNELS * KERNEL;
        let block_base = stem_b + c;
        let block_stride = (c * c * KERNEL + c) * 2  // two convs
            + (c * e + c) * 2                         // film scale/shift affines
            + (sh * c + sh)                           // se fc1
            + (c * sh + c); // se fc2
        let head_w = block_base + self.blocks * block_stride;
        let head_b = head_w + OUT_CHANNELS * c * KERNEL;
        let total = head_b + OUT_CHANNELS;
        Layout {
            stem_w,
            stem_b,
            head_w,
            head_b,
            block_base,
            block_stride,
            total,
        }
    }
}

/// Offsets of the tensors of one residual block.
#[derive(Debug, Clone, Copy)]
struct BlockOffsets {
    conv1_w: usize,
    conv1_b: usize,
    conv2_w: usize,
    conv2_b: usize,
    film_scale_w: usize,
    film_scale_b: usize,
    film_shift_w: usize,
    film_shift_b: usize,
    se_fc1_w: usize,
    se_fc1_b: usize,
    se_fc2_w: usize,
    se_fc2_b: usize,
}

fn block_offsets(shape: &DenoiserShape, layout: &Layout, block: usize) -> BlockOffsets {
    let c = shape.channels;
    let e = shape.embed_dim;
    let sh = shape.se_hidden();
    let mut o = layout.block_base + block * layout.block_stride;
    let mut take = |len: usize| {
        let at = o;
        o += len;
        at
    };
    BlockOffsets {
        conv1_w: take(c * c * KERNEL),
        conv1_b: take(c),
        conv2_w: take(c * c * KERNEL),
        conv2_b: take(c),
        film_scale_w: take(c * e),
        film_scale_b: take(c),
        film_shift_w: take(c * e),
        film_shift_b: take(c),
        se_fc1_w: take(sh * c),
        se_fc1_b: take(sh),
        se_fc2_w: take(c * sh),
        se_fc2_b: take(c),
    }
}

/// All weights of the conditional noise predictor, as one flat buffer.
#[derive(Debug, Clone)]
pub struct DenoiserParams<T: Scalar> {
    shape: DenoiserShape,
    data: Vec<T>,
}

impl<T: Scalar> DenoiserParams<T> {
    /// He-style random init for hidden layers; the head starts at zero so
    /// the network predicts zero noise before training.
    pub fn init<R: Rng + ?Sized>(shape: DenoiserShape, rng: &mut R) -> Result<Self> {
        shape.validate()?;
        let layout = shape.layout();
        let mut data = vec![T::zero(); layout.total];
        let mut fill = |range: std::ops::Range<usize>, fan_in: usize, data: &mut Vec<T>| {
            let std = (2.0 / fan_in as f64).sqrt();
            for slot in &mut data[range] {
                *slot = T::standard_normal(rng) * T::of_f64(std);
            }
        };
        fill(
            layout.stem_w..layout.stem_w + shape.channels * IN_CHANNELS * KERNEL,
            IN_CHANNELS * KERNEL,
            &mut data,
        );
        for b in 0..shape.blocks {
            let off = block_offsets(&shape, &layout, b);
            let c = shape.channels;
            let e = shape.embed_dim;
            let sh = shape.se_hidden();
            fill(off.conv1_w..off.conv1_w + c * c * KERNEL, c * KERNEL, &mut data);
            fill(off.conv2_w..off.conv2_w + c * c * KERNEL, c * KERNEL, &mut data);
            fill(off.film_scale_w..off.film_scale_w + c * e, e, &mut data);
            fill(off.film_shift_w..off.film_shift_w + c * e, e, &mut data);
            fill(off.se_fc1_w..off.se_fc1_w + sh * c, c, &mut data);
            fill(off.se_fc2_w..off.se_fc2_w + c * sh, sh, &mut data);
        }
        // head stays zero
        Ok(Self { shape, data })
    }

    /// All-zero parameters of the same shape (used for gradient buffers).
    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape,
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn from_raw(shape: DenoiserShape, data: Vec<T>) -> Result<Self> {
        shape.validate()?;
        let layout = shape.layout();
        if data.len() != layout.total {
            return Err(Error::InvalidParameter(format!(
                "parameter buffer length {} does not match shape (expected {})",
                data.len(),
                layout.total
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "parameter buffer contains non-finite values".into(),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &DenoiserShape {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Named tensor table (for checkpoints and per-tensor checks).
    pub fn tensors(&self) -> Vec<TensorSlot> {
        let layout = self.shape.layout();
        let c = self.shape.channels;
        let e = self.shape.embed_dim;
        let sh = self.shape.se_hidden();
        let mut out = vec![
            TensorSlot {
                name: "stem.w".into(),
                offset: layout.stem_w,
                len: c * IN_CHANNELS * KERNEL,
            },
            TensorSlot {
                name: "stem.b".into(),
                offset: layout.stem_b,
                len: c,
            },
        ];
        for b in 0..self.shape.blocks {
            let off = block_offsets(&self.shape, &layout, b);
            let pairs = [
                ("conv1.w", off.conv1_w, c * c * KERNEL),
                ("conv1.b", off.conv1_b, c),
                ("conv2.w", off.conv2_w, c * c * KERNEL),
                ("conv2.b", off.conv2_b, c),
                ("film_scale.w", off.film_scale_w, c * e),
                ("film_scale.b", off.film_scale_b, c),
                ("film_shift.w", off.film_shift_w, c * e),
                ("film_shift.b", off.film_shift_b, c),
                ("se_fc1.w", off.se_fc1_w, sh * c),
                ("se_fc1.b", off.se_fc1_b, sh),
                ("se_fc2.w", off.se_fc2_w, c * sh),
                ("se_fc2.b", off.se_fc2_b, c),
            ];
            for (name, offset, len) in pairs {
                out.push(TensorSlot {
                    name: format!("block{b}.{name}"),
                    offset,
                    len,
                });
            }
        }
        out.push(TensorSlot {
            name: "head.w".into(),
            offset: layout.head_w,
            len: OUT_CHANNELS * c * KERNEL,
        });
        out.push(TensorSlot {
            name: "head.b".into(),
            offset: layout.head_b,
            len: OUT_CHANNELS,
        });
        out
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

#[inline]
fn elu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x.exp() - T::one()
    }
}

#[inline]
fn elu_grad<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        x.exp()
    }
}

#[inline]
fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}

#[inline]
fn relu_grad<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// GELU with the tanh approximation.
#[inline]
fn gelu_tanh<T: Scalar>(x: T) -> T {
    let c = T::of_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = T::of_f64(0.044715);
    let half = T::of_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (T::one() + inner.tanh())
}

#[inline]
fn gelu_tanh_grad<T: Scalar>(x: T) -> T {
    let c = T::of_f64(0.797_884_560_802_865_4);
    let k = T::of_f64(0.044715);
    let half = T::of_f64(0.5);
    let three = T::of_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * k * x * x)
}

/// Sinusoidal embedding of the diffusion step index.
fn time_embedding<T: Scalar>(tau: usize, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let mut out = vec![T::zero(); dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let angle = tau as f64 * freq;
        out[2 * i] = T::of_f64(angle.sin());
        out[2 * i + 1] = T::of_f64(angle.cos());
    }
    out
}

// ---------------------------------------------------------------------------
// Convolution with clamp padding
// ---------------------------------------------------------------------------

/// out[co] = bias[co] + sum_ci conv3x3x3(in[ci], w[co][ci]) with clamped
/// reads at the boundary. Channel-major flat buffers.
fn conv3d<T: Scalar>(
    input: &[T],
    c_in: usize,
    weights: &[T],
    bias: &[T],
    c_out: usize,
    grid: &GridSpec,
    output: &mut [T],
) {
    let [nx, ny, nz] = grid.dims();
    let n = grid.len();
    debug_assert_eq!(input.len(), c_in * n);
    debug_assert_eq!(weights.len(), c_out * c_in * KERNEL);
    debug_assert_eq!(output.len(), c_out * n);

    for co in 0..c_out {
        let (before, rest) = output.split_at_mut(co * n);
        let _ = before;
        let out_ch = &mut rest[..n];
        out_ch.iter_mut().for_each(|o| *o = bias[co]);
        for ci in 0..c_in {
            let in_ch = &input[ci * n..(ci + 1) * n];
            let w = &weights[(co * c_in + ci) * KERNEL..(co * c_in + ci + 1) * KERNEL];
            let mut i = 0;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let mut acc = T::zero();
                        let mut k = 0;
                        for dz in -1i64..=1 {
                            let zz = (z as i64 + dz).clamp(0, nz as i64 - 1) as usize;
                            for dy in -1i64..=1 {
                                let yy = (y as i64 + dy).clamp(0, ny as i64 - 1) as usize;
                                for dx in -1i64..=1 {
                                    let xx = (x as i64 + dx).clamp(0, nx as i64 - 1) as usize;
                                    acc += w[k] * in_ch[xx + nx * (yy + ny * zz)];
                                    k += 1;
                                }
                            }
                        }
                        out_ch[i] += acc;
                        i += 1;
                    }
                }
            }
        }
    }
}

/// Backward pass of [`conv3d`]: accumulates input, weight and bias
/// gradients from the output cotangent.
#[allow(clippy::too_many_arguments)]
fn conv3d_backward<T: Scalar>(
    input: &[T],
    c_in: usize,
    weights: &[T],
    c_out: usize,
    grid: &GridSpec,
    d_output: &[T],
    d_input: &mut [T],
    d_weights: &mut [T],
    d_bias: &mut [T],
) {
    let [nx, ny, nz] = grid.dims();
    let n = grid.len();
    for co in 0..c_out {
        let d_out_ch = &d_output[co * n..(co + 1) * n];
        d_bias[co] += d_out_ch.iter().fold(T::zero(), |a, &b| a + b);
        for ci in 0..c_in {
            let in_ch = &input[ci * n..(ci + 1) * n];
            let w = &weights[(co * c_in + ci) * KERNEL..(co * c_in + ci + 1) * KERNEL];
            let dw = &mut d_weights[(co * c_in + ci) * KERNEL..(co * c_in + ci + 1) * KERNEL];
            let d_in_ch = &mut d_input[ci * n..(ci + 1) * n];
            let mut i = 0;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let g = d_out_ch[i];
                        if g != T::zero() {
                            let mut k = 0;
                            for dz in -1i64..=1 {
                                let zz = (z as i64 + dz).clamp(0, nz as i64 - 1) as usize;
                                for dy in -1i64..=1 {
                                    let yy = (y as i64 + dy).clamp(0, ny as i64 - 1) as usize;
                                    for dx in -1i64..=1 {
                                        let xx = (x as i64 + dx).clamp(0, nx as i64 - 1) as usize;
                                        let idx = xx + nx * (yy + ny * zz);
                                        dw[k] += g * in_ch[idx];
                                        d_in_ch[idx] += g * w[k];
                                        k += 1;
                                    }
                                }
                            }
                        }
                        i += 1;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Saved activations of one forward pass, for the backward sweep.
pub struct ForwardTrace<T: Scalar> {
    grid: GridSpec,
    input: Vec<T>,     // 6 x n
    stem_pre: Vec<T>,  // C x n, before ELU
    blocks: Vec<BlockTrace<T>>,
    trunk_out: Vec<T>, // C x n, after all blocks (pre-GELU)
    emb: Vec<T>,       // E
}

struct BlockTrace<T> {
    x_in: Vec<T>,      // C x n, block input
    conv1_out: Vec<T>, // C x n, conv1 + bias (pre-FiLM)
    film_pre: Vec<T>,  // C x n, after FiLM, before ELU
    conv2_out: Vec<T>, // C x n, conv2 output (pre-SE)
    pooled: Vec<T>,    // C
    se_pre: Vec<T>,    // hidden, pre-ReLU
    se_hidden: Vec<T>, // hidden, post-ReLU
    gate_pre: Vec<T>,  // C, pre-sigmoid
    gate: Vec<T>,      // C
    scale: Vec<T>,     // C (FiLM scale)
}

impl<T: Scalar> DenoiserParams<T> {
    /// Predict the injected noise for `(y_tau, tau, cond)`.
    pub fn forward(
        &self,
        y_tau: &VectorField<T>,
        tau: usize,
        cond: &ConditioningPack<T>,
    ) -> Result<VectorField<T>> {
        let (eps_hat, _) = self.forward_traced(y_tau, tau, cond, false)?;
        Ok(eps_hat)
    }

    /// Forward pass that optionally records activations for [`Self::backward`].
    pub fn forward_traced(
        &self,
        y_tau: &VectorField<T>,
        tau: usize,
        cond: &ConditioningPack<T>,
        record: bool,
    ) -> Result<(VectorField<T>, Option<ForwardTrace<T>>)> {
        check_same_grid("denoiser", y_tau.grid(), cond.grid())?;
        let grid = *y_tau.grid();
        let n = grid.len();
        let c = self.shape.channels;
        let layout = self.shape.layout();

        // 6-channel input: [y(3), atlas, slices, mask]
        let mut input = vec![T::zero(); IN_CHANNELS * n];
        input[..3 * n].copy_from_slice(y_tau.data());
        input[3 * n..4 * n].copy_from_slice(cond.atlas.data());
        input[4 * n..5 * n].copy_from_slice(cond.slices_embedded.data());
        input[5 * n..6 * n].copy_from_slice(cond.slice_mask.data());

        let emb = time_embedding::<T>(tau, self.shape.embed_dim);

        let mut stem_pre = vec![T::zero(); c * n];
        conv3d(
            &input,
            IN_CHANNELS,
            &self.data[layout.stem_w..layout.stem_w + c * IN_CHANNELS * KERNEL],
            &self.data[layout.stem_b..layout.stem_b + c],
            c,
            &grid,
            &mut stem_pre,
        );
        let mut x: Vec<T> = stem_pre.iter().map(|&v| elu(v)).collect();

        let mut blocks = Vec::new();
        for b in 0..self.shape.blocks {
            let off = block_offsets(&self.shape, &layout, b);
            let x_in = x.clone();

            let mut conv1_out = vec![T::zero(); c * n];
            conv3d(
                &x,
                c,
                &self.data[off.conv1_w..off.conv1_w + c * c * KERNEL],
                &self.data[off.conv1_b..off.conv1_b + c],
                c,
                &grid,
                &mut conv1_out,
            );

            // FiLM from the time embedding: t * (1 + scale) + shift per channel
            let e = self.shape.embed_dim;
            let mut scale = vec![T::zero(); c];
            let mut shift = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = self.data[off.film_scale_b + ch];
                let mut sh = self.data[off.film_shift_b + ch];
                for j in 0..e {
                    s += self.data[off.film_scale_w + ch * e + j] * emb[j];
                    sh += self.data[off.film_shift_w + ch * e + j] * emb[j];
                }
                scale[ch] = s;
                shift[ch] = sh;
            }
            let mut film_pre = vec![T::zero(); c * n];
            for ch in 0..c {
                let s = T::one() + scale[ch];
                let sh = shift[ch];
                for i in 0..n {
                    film_pre[ch * n + i] = conv1_out[ch * n + i] * s + sh;
                }
            }
            let hidden: Vec<T> = film_pre.iter().map(|&v| elu(v)).collect();

            let mut conv2_out = vec![T::zero(); c * n];
            conv3d(
                &hidden,
                c,
                &self.data[off.conv2_w..off.conv2_w + c * c * KERNEL],
                &self.data[off.conv2_b..off.conv2_b + c],
                c,
                &grid,
                &mut conv2_out,
            );

            // squeeze-excitation: global average pool, fc1+ReLU, fc2, sigmoid
            let sh_dim = self.shape.se_hidden();
            let inv_n = T::one() / T::of_f64(n as f64);
            let mut pooled = vec![T::zero(); c];
            for ch in 0..c {
                pooled[ch] = conv2_out[ch * n..(ch + 1) * n]
                    .iter()
                    .fold(T::zero(), |a, &b| a + b)
                    * inv_n;
            }
            let mut se_pre = vec![T::zero(); sh_dim];
            for h in 0..sh_dim {
                let mut acc = self.data[off.se_fc1_b + h];
                for ch in 0..c {
                    acc += self.data[off.se_fc1_w + h * c + ch] * pooled[ch];
                }
                se_pre[h] = acc;
            }
            let se_hidden: Vec<T> = se_pre.iter().map(|&v| relu(v)).collect();
            let mut gate_pre = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = self.data[off.se_fc2_b + ch];
                for h in 0..sh_dim {
                    acc += self.data[off.se_fc2_w + ch * sh_dim + h] * se_hidden[h];
                }
                gate_pre[ch] = acc;
            }
            let gate: Vec<T> = gate_pre.iter().map(|&v| sigmoid(v)).collect();

            // residual add of the gated branch
            for ch in 0..c {
                let g = gate[ch];
                for i in 0..n {
                    x[ch * n + i] = x_in[ch * n + i] + conv2_out[ch * n + i] * g;
                }
            }

            if record {
                blocks.push(BlockTrace {
                    x_in,
                    conv1_out,
                    film_pre,
                    conv2_out,
                    pooled,
                    se_pre,
                    se_hidden,
                    gate_pre,
                    gate,
                    scale,
                });
            }
        }

        let trunk_out = x.clone();
        let activated: Vec<T> = x.iter().map(|&v| gelu_tanh(v)).collect();
        let mut head_out = vec![T::zero(); OUT_CHANNELS * n];
        conv3d(
            &activated,
            c,
            &self.data[layout.head_w..layout.head_w + OUT_CHANNELS * c * KERNEL],
            &self.data[layout.head_b..layout.head_b + OUT_CHANNELS],
            OUT_CHANNELS,
            &grid,
            &mut head_out,
        );

        let eps_hat = VectorField::from_vec(grid, head_out)?;
        let trace = if record {
            Some(ForwardTrace {
                grid,
                input,
                stem_pre,
                blocks,
                trunk_out,
                emb,
            })
        } else {
            None
        };
        Ok((eps_hat, trace))
    }

    /// Exact gradients of the recorded forward computation w.r.t. every
    /// parameter and w.r.t. the diffused input `y_tau`.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        d_eps_hat: &VectorField<T>,
    ) -> Result<(DenoiserParams<T>, VectorField<T>)> {
        check_same_grid("denoiser backward", &trace.grid, d_eps_hat.grid())?;
        let grid = trace.grid;
        let n = grid.len();
        let c = self.shape.channels;
        let layout = self.shape.layout();

        let mut grads = self.zeros_like();

        // head conv
        let activated: Vec<T> = trace.trunk_out.iter().map(|&v| gelu_tanh(v)).collect();
        let mut d_activated = vec![T::zero(); c * n];
        {
            let g = grads.data_mut();
            let (left, right) = g.split_at_mut(layout.head_b);
            conv3d_backward(
                &activated,
                c,
                &self.data[layout.head_w..layout.head_w + OUT_CHANNELS * c * KERNEL],
                OUT_CHANNELS,
                &grid,
                d_eps_hat.data(),
                &mut d_activated,
                &mut left[layout.head_w..layout.head_w + OUT_CHANNELS * c * KERNEL],
                &mut right[..OUT_CHANNELS],
            );
        }
        let mut d_x: Vec<T> = trace
            .trunk_out
            .iter()
            .zip(&d_activated)
            .map(|(&pre, &g)| g * gelu_tanh_grad(pre))
            .collect();

        // residual blocks, reversed
        for b in (0..self.shape.blocks).rev() {
            let off = block_offsets(&self.shape, &layout, b);
            let tr = &trace.blocks[b];
            let e = self.shape.embed_dim;
            let sh_dim = self.shape.se_hidden();
            let inv_n = T::one() / T::of_f64(n as f64);

            // x = x_in + conv2_out * gate  (gate per channel)
            let mut d_conv2 = vec![T::zero(); c * n];
            let mut d_gate = vec![T::zero(); c];
            for ch in 0..c {
                let g = tr.gate[ch];
                let mut acc = T::zero();
                for i in 0..n {
                    let dxi = d_x[ch * n + i];
                    d_conv2[ch * n + i] = dxi * g;
                    acc += dxi * tr.conv2_out[ch * n + i];
                }
                d_gate[ch] = acc;
            }

            // gate = sigmoid(gate_pre)
            let mut d_gate_pre = vec![T::zero(); c];
            for ch in 0..c {
                let s = sigmoid(tr.gate_pre[ch]);
                d_gate_pre[ch] = d_gate[ch] * s * (T::one() - s);
            }
            // gate_pre = se_fc2_b + se_fc2_w @ se_hidden
            let mut d_se_hidden = vec![T::zero(); sh_dim];
            for ch in 0..c {
                let g = d_gate_pre[ch];
                grads.data[off.se_fc2_b + ch] += g;
                for h in 0..sh_dim {
                    grads.data[off.se_fc2_w + ch * sh_dim + h] += g * tr.se_hidden[h];
                    d_se_hidden[h] += g * self.data[off.se_fc2_w + ch * sh_dim + h];
                }
            }
            // se_hidden = relu(se_pre); se_pre = fc1(pooled)
            let mut d_pooled = vec![T::zero(); c];
            for h in 0..sh_dim {
                let g = d_se_hidden[h] * relu_grad(tr.se_pre[h]);
                grads.data[off.se_fc1_b + h] += g;
                for ch in 0..c {
                    grads.data[off.se_fc1_w + h * c + ch] += g * tr.pooled[ch];
                    d_pooled[ch] += g * self.data[off.se_fc1_w + h * c + ch];
                }
            }
            // pooled = mean over voxels of conv2_out
            for ch in 0..c {
                let g = d_pooled[ch] * inv_n;
                for i in 0..n {
                    d_conv2[ch * n + i] += g;
                }
            }

            // conv2
            let hidden: Vec<T> = tr.film_pre.iter().map(|&v| elu(v)).collect();
            let mut d_hidden = vec![T::zero(); c * n];
            {
                let g = grads.data_mut();
                let (left, right) = g.split_at_mut(off.conv2_b);
                conv3d_backward(
                    &hidden,
                    c,
                    &self.data[off.conv2_w..off.conv2_w + c * c * KERNEL],
                    c,
                    &grid,
                    &d_conv2,
                    &mut d_hidden,
                    &mut left[off.conv2_w..off.conv2_w + c * c * KERNEL],
                    &mut right[..c],
                );
            }

            // hidden = elu(film_pre); film_pre = conv1_out * (1+scale) + shift
            let mut d_film_pre = vec![T::zero(); c * n];
            for i in 0..c * n {
                d_film_pre[i] = d_hidden[i] * elu_grad(tr.film_pre[i]);
            }
            let mut d_conv1 = vec![T::zero(); c * n];
            let mut d_scale = vec![T::zero(); c];
            let mut d_shift = vec![T::zero(); c];
            for ch in 0..c {
                let s = T::one() + tr.scale[ch];
                let mut acc_scale = T::zero();
                let mut acc_shift = T::zero();
                for i in 0..n {
                    let g = d_film_pre[ch * n + i];
                    d_conv1[ch * n + i] = g * s;
                    acc_scale += g * tr.conv1_out[ch * n + i];
                    acc_shift += g;
                }
                d_scale[ch] = acc_scale;
                d_shift[ch] = acc_shift;
            }
            // film affines from the embedding
            for ch in 0..c {
                grads.data[off.film_scale_b + ch] += d_scale[ch];
                grads.data[off.film_shift_b + ch] += d_shift[ch];
                for j in 0..e {
                    grads.data[off.film_scale_w + ch * e + j] += d_scale[ch] * trace.emb[j];
                    grads.data[off.film_shift_w + ch * e + j] += d_shift[ch] * trace.emb[j];
                }
            }

            // conv1
            let mut d_x_in = vec![T::zero(); c * n];
            {
                let g = grads.data_mut();
                let (left, right) = g.split_at_mut(off.conv1_b);
                conv3d_backward(
                    &tr.x_in,
                    c,
                    &self.data[off.conv1_w..off.conv1_w + c * c * KERNEL],
                    c,
                    &grid,
                    &d_conv1,
                    &mut d_x_in,
                    &mut left[off.conv1_w..off.conv1_w + c * c * KERNEL],
                    &mut right[..c],
                );
            }

            // residual: d(x_in) = d_x (skip path) + d_x_in (branch path)
            for i in 0..c * n {
                d_x[i] += d_x_in[i];
            }
        }

        // stem: x = elu(stem_pre), stem_pre = conv(input)
        let mut d_stem_pre = vec![T::zero(); c * n];
        for i in 0..c * n {
            d_stem_pre[i] = d_x[i] * elu_grad(trace.stem_pre[i]);
        }
        let mut d_input = vec![T::zero(); IN_CHANNELS * n];
        {
            let g = grads.data_mut();
            let (left, right) = g.split_at_mut(layout.stem_b);
            conv3d_backward(
                &trace.input,
                IN_CHANNELS,
                &self.data[layout.stem_w..layout.stem_w + c * IN_CHANNELS * KERNEL],
                c,
                &grid,
                &d_stem_pre,
                &mut d_input,
                &mut left[layout.stem_w..layout.stem_w + c * IN_CHANNELS * KERNEL],
                &mut right[..c],
            );
        }

        let d_y = VectorField::from_vec(grid, d_input[..3 * n].to_vec())?;
        Ok((grads, d_y))
    }
}

impl<T: Scalar> EpsPredictor<T> for DenoiserParams<T> {
    fn predict(
        &self,
        y_tau: &VectorField<T>,
        tau: usize,
        cond: &ConditioningPack<T>,
    ) -> Result<VectorField<T>> {
        self.forward(y_tau, tau, cond)
    }
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

/// Plain SGD update: `params -= lr * (grads + weight_decay * params)`.
pub fn sgd_step<T: Scalar>(
    params: &mut DenoiserParams<T>,
    grads: &DenoiserParams<T>,
    lr: T,
    weight_decay: T,
) {
    debug_assert_eq!(params.len(), grads.len());
    for (p, &g) in params.data.iter_mut().zip(&grads.data) {
        *p = *p - lr * (g + weight_decay * *p);
    }
}

/// Cosine-annealed learning rate over an epoch budget.
pub fn cosine_lr(base: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs <= 1 {
        return base;
    }
    let t = epoch.min(total_epochs - 1) as f64 / (total_epochs - 1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam moment buffers.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    m: Vec<T>,
    v: Vec<T>,
    t: usize,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &DenoiserParams<T>) -> Self {
        Self {
            m: vec![T::zero(); params.len()],
            v: vec![T::zero(); params.len()],
            t: 0,
            beta1: T::of_f64(0.9),
            beta2: T::of_f64(0.999),
            eps: T::of_f64(1e-8),
        }
    }

    pub fn step(
        &mut self,
        params: &mut DenoiserParams<T>,
        grads: &DenoiserParams<T>,
        lr: T,
        weight_decay: T,
    ) {
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = T::one() - b1.powi(self.t as i32);
        let bc2 = T::one() - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads.data[i] + weight_decay * params.data[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params.data[i] = params.data[i] - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
