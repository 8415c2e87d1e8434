//! Raw loops behind the convolution and normalization ops.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn cols_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_positions(&self) -> usize {
        self.ho * self.wo
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one `[C,H,W]` image into `[C*kh*kw, Ho*Wo]` columns.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.out_positions();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.out_positions();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let base = ii as usize * g.w;
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            plane[base + jj as usize] = plane[base + jj as usize] + src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// 3×3 depthwise cross-correlation, stride 1, zero padding 1, on one plane.
pub fn dw3x3_plane<T: Scalar>(x: &[T], k: &[T], bias: T, h: usize, w: usize, out: &mut [T]) {
    for i in 0..h {
        for j in 0..w {
            let mut acc = bias;
            for di in 0..3 {
                let ii = i as isize + di as isize - 1;
                if ii < 0 || ii >= h as isize {
                    continue;
                }
                for dj in 0..3 {
                    let jj = j as isize + dj as isize - 1;
                    if jj < 0 || jj >= w as isize {
                        continue;
                    }
                    acc = acc + k[di * 3 + dj] * x[ii as usize * w + jj as usize];
                }
            }
            out[i * w + j] = acc;
        }
    }
}

/// Backward of [`dw3x3_plane`]: accumulates into `dx` and `dk`.
pub fn dw3x3_plane_backward<T: Scalar>(
    x: &[T],
    k: &[T],
    dy: &[T],
    h: usize,
    w: usize,
    dx: Option<&mut [T]>,
    dk: Option<&mut [T]>,
) {
    if let Some(dx) = dx {
        for i in 0..h {
            for j in 0..w {
                let g = dy[i * w + j];
                for di in 0..3 {
                    let ii = i as isize + di as isize - 1;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for dj in 0..3 {
                        let jj = j as isize + dj as isize - 1;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let o = ii as usize * w + jj as usize;
                        dx[o] = dx[o] + k[di * 3 + dj] * g;
                    }
                }
            }
        }
    }
    if let Some(dk) = dk {
        for di in 0..3 {
            for dj in 0..3 {
                let mut acc = T::zero();
                for i in 0..h {
                    let ii = i as isize + di as isize - 1;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let jj = j as isize + dj as isize - 1;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        acc = acc + x[ii as usize * w + jj as usize] * dy[i * w + j];
                    }
                }
                dk[di * 3 + dj] = dk[di * 3 + dj] + acc;
            }
        }
    }
}

pub const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const GELU_C: f64 = 0.044_715;

pub fn gelu<T: Scalar>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::of(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
