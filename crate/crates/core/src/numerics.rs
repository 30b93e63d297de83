//! Dense kernels shared by every other module: the feature transform `F(u; θ)`,
//! its reverse-mode derivative, and norms.
//!
//! Everything here is a pure function of its inputs. Summation order is fixed,
//! so repeated calls are bitwise reproducible on any thread.

use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative with respect to the pre-activation. Relu uses 0 at the kink.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Shape of a feature transform.
///
/// Convolutions use stride 1 and zero padding of `kernel / 2`, so a square
/// odd kernel preserves the spatial extent. States are laid out channel-major
/// (`[channel][row][col]`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TransformKind {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        channels_in: usize,
        channels_out: usize,
        height: usize,
        width: usize,
        kernel: usize,
    },
}

impl TransformKind {
    pub fn input_len(&self) -> usize {
        match *self {
            TransformKind::Dense { inputs, .. } => inputs,
            TransformKind::Conv2d {
                channels_in,
                height,
                width,
                ..
            } => channels_in * height * width,
        }
    }

    pub fn output_len(&self) -> usize {
        match *self {
            TransformKind::Dense { outputs, .. } => outputs,
            TransformKind::Conv2d {
                channels_out,
                height,
                width,
                ..
            } => channels_out * height * width,
        }
    }

    pub fn weight_len(&self) -> usize {
        match *self {
            TransformKind::Dense { inputs, outputs } => inputs * outputs,
            TransformKind::Conv2d {
                channels_in,
                channels_out,
                kernel,
                ..
            } => channels_in * channels_out * kernel * kernel,
        }
    }

    pub fn bias_len(&self) -> usize {
        match *self {
            TransformKind::Dense { outputs, .. } => outputs,
            TransformKind::Conv2d { channels_out, .. } => channels_out,
        }
    }

    /// Number of weights feeding one output entry; used for weight scaling.
    pub fn fan_in(&self) -> usize {
        match *self {
            TransformKind::Dense { inputs, .. } => inputs,
            TransformKind::Conv2d {
                channels_in,
                kernel,
                ..
            } => channels_in * kernel * kernel,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            TransformKind::Dense { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return Err(Error::Config("dense transform needs nonzero sizes".into()));
                }
            }
            TransformKind::Conv2d {
                channels_in,
                channels_out,
                height,
                width,
                kernel,
            } => {
                if channels_in == 0 || channels_out == 0 || height == 0 || width == 0 {
                    return Err(Error::Config("conv2d transform needs nonzero sizes".into()));
                }
                if kernel % 2 == 0 {
                    return Err(Error::Config(format!(
                        "conv2d kernel must be odd to preserve width, got {kernel}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parameters `θ` of one feature transform `F(u; θ) = act(K u + b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformParams {
    pub kind: TransformKind,
    /// Dense: row-major `outputs × inputs`. Conv2d: `[c_out][c_in][ky][kx]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl TransformParams {
    pub fn new(
        kind: TransformKind,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        kind.validate()?;
        dim_check("transform weights", kind.weight_len(), weights.len())?;
        dim_check("transform bias", kind.bias_len(), bias.len())?;
        Ok(Self {
            kind,
            weights,
            bias,
            activation,
        })
    }

    pub fn zeros(kind: TransformKind, activation: Activation) -> Result<Self> {
        Self::new(
            kind,
            vec![0.0; kind.weight_len()],
            vec![0.0; kind.bias_len()],
            activation,
        )
    }

    pub fn dense(
        inputs: usize,
        outputs: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        Self::new(TransformKind::Dense { inputs, outputs }, weights, bias, activation)
    }

    #[inline]
    pub fn input_len(&self) -> usize {
        self.kind.input_len()
    }

    #[inline]
    pub fn output_len(&self) -> usize {
        self.kind.output_len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// `F(u; θ)` as a new vector.
    pub fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.output_len()];
        self.apply_into(u, &mut out)?;
        Ok(out)
    }

    /// `F(u; θ)` written into `out`.
    pub fn apply_into(&self, u: &[f64], out: &mut [f64]) -> Result<()> {
        dim_check("transform input", self.input_len(), u.len())?;
        dim_check("transform output", self.output_len(), out.len())?;
        self.pre_activation(u, out);
        for v in out.iter_mut() {
            *v = self.activation.eval(*v);
        }
        Ok(())
    }

    /// `K u + b`, shapes already checked by the caller.
    pub(crate) fn pre_activation(&self, u: &[f64], z: &mut [f64]) {
        match self.kind {
            TransformKind::Dense { inputs, .. } => {
                for ((zi, row), bi) in z
                    .iter_mut()
                    .zip(self.weights.chunks_exact(inputs))
                    .zip(&self.bias)
                {
                    let mut acc = *bi;
                    for (w, x) in row.iter().zip(u) {
                        acc += w * x;
                    }
                    *zi = acc;
                }
            }
            TransformKind::Conv2d {
                channels_in,
                channels_out,
                height,
                width,
                kernel,
            } => {
                let pad = kernel / 2;
                let plane = height * width;
                for co in 0..channels_out {
                    let zc = &mut z[co * plane..(co + 1) * plane];
                    zc.fill(self.bias[co]);
                    for ci in 0..channels_in {
                        let uc = &u[ci * plane..(ci + 1) * plane];
                        let wk = &self.weights[(co * channels_in + ci) * kernel * kernel..]
                            [..kernel * kernel];
                        conv_plane_accumulate(zc, uc, wk, height, width, kernel, pad);
                    }
                }
            }
        }
    }

    /// Reverse-mode derivative of `F` at input `u`.
    ///
    /// `grad_out` is the cotangent of `F(u)`. Parameter gradients are
    /// accumulated into `grad_weights` / `grad_bias`; the input cotangent
    /// `Kᵀ (act'(z) ⊙ grad_out)` overwrites `grad_in`.
    pub fn backward(
        &self,
        u: &[f64],
        grad_out: &[f64],
        grad_in: &mut [f64],
        grad_weights: &mut [f64],
        grad_bias: &mut [f64],
    ) -> Result<()> {
        dim_check("backward input", self.input_len(), u.len())?;
        dim_check("backward cotangent", self.output_len(), grad_out.len())?;
        dim_check("backward input cotangent", self.input_len(), grad_in.len())?;
        dim_check("backward weight gradient", self.weights.len(), grad_weights.len())?;
        dim_check("backward bias gradient", self.bias.len(), grad_bias.len())?;

        let mut delta = vec![0.0; self.output_len()];
        self.pre_activation(u, &mut delta);
        for (d, g) in delta.iter_mut().zip(grad_out) {
            *d = self.activation.derivative(*d) * g;
        }
        grad_in.fill(0.0);

        match self.kind {
            TransformKind::Dense { inputs, .. } => {
                for ((row, grow), (d, gb)) in self
                    .weights
                    .chunks_exact(inputs)
                    .zip(grad_weights.chunks_exact_mut(inputs))
                    .zip(delta.iter().zip(grad_bias.iter_mut()))
                {
                    *gb += d;
                    for ((w, gw), (x, gi)) in row
                        .iter()
                        .zip(grow.iter_mut())
                        .zip(u.iter().zip(grad_in.iter_mut()))
                    {
                        *gw += d * x;
                        *gi += w * d;
                    }
                }
            }
            TransformKind::Conv2d {
                channels_in,
                channels_out,
                height,
                width,
                kernel,
            } => {
                let pad = kernel / 2;
                let plane = height * width;
                let kk = kernel * kernel;
                for co in 0..channels_out {
                    let dc = &delta[co * plane..(co + 1) * plane];
                    grad_bias[co] += dc.iter().sum::<f64>();
                    for ci in 0..channels_in {
                        let uc = &u[ci * plane..(ci + 1) * plane];
                        let off = (co * channels_in + ci) * kk;
                        let wk = &self.weights[off..off + kk];
                        let gwk = &mut grad_weights[off..off + kk];
                        let gic = &mut grad_in[ci * plane..(ci + 1) * plane];
                        for y in 0..height {
                            for x in 0..width {
                                let d = dc[y * width + x];
                                if d == 0.0 {
                                    continue;
                                }
                                for ky in 0..kernel {
                                    let Some(iy) = shifted(y, ky, pad, height) else {
                                        continue;
                                    };
                                    for kx in 0..kernel {
                                        let Some(ix) = shifted(x, kx, pad, width) else {
                                            continue;
                                        };
                                        gwk[ky * kernel + kx] += d * uc[iy * width + ix];
                                        gic[iy * width + ix] += wk[ky * kernel + kx] * d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Parameters in storage order: weights then bias.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.weights.iter().chain(self.bias.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.weights.iter_mut().chain(self.bias.iter_mut())
    }
}

#[inline]
fn shifted(pos: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
    let p = (pos + k).checked_sub(pad)?;
    (p < extent).then_some(p)
}

fn conv_plane_accumulate(
    z: &mut [f64],
    u: &[f64],
    w: &[f64],
    height: usize,
    width: usize,
    kernel: usize,
    pad: usize,
) {
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for ky in 0..kernel {
                let Some(iy) = shifted(y, ky, pad, height) else {
                    continue;
                };
                for kx in 0..kernel {
                    let Some(ix) = shifted(x, kx, pad, width) else {
                        continue;
                    };
                    acc += w[ky * kernel + kx] * u[iy * width + ix];
                }
            }
            z[y * width + x] += acc;
        }
    }
}

/// Euclidean norm over every entry.
pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn max_abs(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |m: f64, (x, y)| m.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_zero_weights_tanh_is_zero() {
        let t = TransformParams::zeros(
            TransformKind::Dense {
                inputs: 3,
                outputs: 3,
            },
            Activation::Tanh,
        )
        .unwrap();
        assert_eq!(t.apply(&[0.3, -7.0, 2.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn dense_identity() {
        let w = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let t = TransformParams::dense(3, 3, w, vec![0.0; 3], Activation::Identity).unwrap();
        assert_eq!(t.apply(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn dense_affine_relu() {
        let t = TransformParams::dense(
            2,
            2,
            vec![1.0, 0.0, 0.0, 1.0],
            vec![1.0, -1.0],
            Activation::Relu,
        )
        .unwrap();
        assert_eq!(t.apply(&[-2.0, 3.0]).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn shape_errors() {
        let t = TransformParams::zeros(
            TransformKind::Dense {
                inputs: 2,
                outputs: 2,
            },
            Activation::Tanh,
        )
        .unwrap();
        assert!(matches!(t.apply(&[1.0]), Err(Error::Dimension(_))));
        assert!(TransformParams::dense(2, 2, vec![0.0; 3], vec![0.0; 2], Activation::Tanh).is_err());
        let even = TransformKind::Conv2d {
            channels_in: 1,
            channels_out: 1,
            height: 3,
            width: 3,
            kernel: 2,
        };
        assert!(TransformParams::zeros(even, Activation::Relu).is_err());
    }

    #[test]
    fn conv_identity_kernel_preserves_state() {
        // 3x3 kernel with a single centre tap is the identity under zero padding.
        let kind = TransformKind::Conv2d {
            channels_in: 1,
            channels_out: 1,
            height: 3,
            width: 4,
            kernel: 3,
        };
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        let t = TransformParams::new(kind, w, vec![0.0], Activation::Identity).unwrap();
        let u: Vec<f64> = (0..12).map(|i| i as f64 - 5.0).collect();
        assert_eq!(t.apply(&u).unwrap(), u);
    }

    #[test]
    fn conv_matches_explicit_padded_sum() {
        let kind = TransformKind::Conv2d {
            channels_in: 2,
            channels_out: 2,
            height: 3,
            width: 3,
            kernel: 3,
        };
        let w: Vec<f64> = (0..36).map(|i| ((i * 7 % 11) as f64 - 5.0) / 10.0).collect();
        let b = vec![0.25, -0.5];
        let t = TransformParams::new(kind, w.clone(), b.clone(), Activation::Identity).unwrap();
        let u: Vec<f64> = (0..18).map(|i| ((i * 5 % 7) as f64 - 3.0) / 4.0).collect();
        let out = t.apply(&u).unwrap();

        // Explicit zero-padded 5x5 planes.
        let mut padded = vec![0.0; 2 * 25];
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    padded[c * 25 + (y + 1) * 5 + x + 1] = u[c * 9 + y * 3 + x];
                }
            }
        }
        for co in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let mut s = b[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                s += w[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                    * padded[ci * 25 + (y + ky) * 5 + x + kx];
                            }
                        }
                    }
                    assert!((out[co * 9 + y * 3 + x] - s).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let kinds = [
            TransformKind::Dense {
                inputs: 3,
                outputs: 2,
            },
            TransformKind::Conv2d {
                channels_in: 2,
                channels_out: 1,
                height: 3,
                width: 2,
                kernel: 3,
            },
        ];
        for kind in kinds {
            let nw = kind.weight_len();
            let nb = kind.bias_len();
            let w: Vec<f64> = (0..nw).map(|i| ((i * 13 % 17) as f64 - 8.0) / 20.0).collect();
            let b: Vec<f64> = (0..nb).map(|i| 0.1 * i as f64 - 0.05).collect();
            let mut t = TransformParams::new(kind, w, b, Activation::Tanh).unwrap();
            let u: Vec<f64> = (0..kind.input_len())
                .map(|i| ((i * 3 % 5) as f64 - 2.0) / 3.0)
                .collect();
            let g: Vec<f64> = (0..kind.output_len()).map(|i| 1.0 - 0.3 * i as f64).collect();
            let objective = |t: &TransformParams, u: &[f64]| -> f64 {
                t.apply(u).unwrap().iter().zip(&g).map(|(a, b)| a * b).sum()
            };
            let mut gi = vec![0.0; kind.input_len()];
            let mut gw = vec![0.0; nw];
            let mut gb = vec![0.0; nb];
            t.backward(&u, &g, &mut gi, &mut gw, &mut gb).unwrap();

            let eps = 1e-6;
            for i in 0..u.len() {
                let mut up = u.clone();
                up[i] += eps;
                let mut um = u.clone();
                um[i] -= eps;
                let fd = (objective(&t, &up) - objective(&t, &um)) / (2.0 * eps);
                assert!((fd - gi[i]).abs() < 1e-8, "input {i}: {fd} vs {}", gi[i]);
            }
            let analytic: Vec<f64> = gw.iter().chain(gb.iter()).copied().collect();
            for (k, a) in analytic.iter().enumerate() {
                let orig = *t.params().nth(k).unwrap();
                *t.params_mut().nth(k).unwrap() = orig + eps;
                let fp = objective(&t, &u);
                *t.params_mut().nth(k).unwrap() = orig - eps;
                let fm = objective(&t, &u);
                *t.params_mut().nth(k).unwrap() = orig;
                let fd = (fp - fm) / (2.0 * eps);
                assert!((fd - a).abs() < 1e-8, "param {k}: {fd} vs {a}");
            }
        }
    }

    #[test]
    fn l2_norm_basics() {
        assert_eq!(l2_norm(&[0.0; 5]), 0.0);
        assert_eq!(l2_norm(&[3.0, 4.0]), 5.0);
        assert_eq!(l2_norm(&[]), 0.0);
    }
}
