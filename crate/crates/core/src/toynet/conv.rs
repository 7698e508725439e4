//! 3x3x3 zero-padded convolutions over `[n][c][w][h][d]` tensors.

use core::ops::Range;

use super::Scalar;

pub const KERNEL_VOLUME: usize = 27;

// Output positions along one axis for which `pos + offset` is inside `0..len`.
#[inline]
fn valid(len: usize, offset: isize) -> Range<usize> {
    let lo = (-offset).max(0) as usize;
    let hi = (len as isize - offset).clamp(0, len as isize) as usize;
    lo..hi.max(lo)
}

#[inline]
fn offsets() -> impl Iterator<Item = (usize, [isize; 3])> {
    (0..KERNEL_VOLUME).map(|k| (k, [(k / 9) as isize - 1, ((k / 3) % 3) as isize - 1, (k % 3) as isize - 1]))
}

/// Visits every (output row, input row) pair of z-slices that overlap for a
/// kernel offset. `f(out_start, in_start, len)`.
#[inline]
fn for_each_row(shape: [usize; 3], d: [isize; 3], mut f: impl FnMut(usize, usize, usize)) {
    let [w, h, dep] = shape;
    let zr = valid(dep, d[2]);
    if zr.is_empty() {
        return;
    }
    let len = zr.len();
    for x in valid(w, d[0]) {
        let sx = (x as isize + d[0]) as usize;
        for y in valid(h, d[1]) {
            let sy = (y as isize + d[1]) as usize;
            let out = (x * h + y) * dep + zr.start;
            let inp = (sx * h + sy) * dep + (zr.start as isize + d[2]) as usize;
            f(out, inp, len);
        }
    }
}

pub struct ConvShape {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub spatial: [usize; 3],
}

impl ConvShape {
    fn vox(&self) -> usize {
        self.spatial.iter().product()
    }
}

/// `out = conv(input, weights) + bias`. `out` is overwritten.
pub fn forward<T: Scalar>(s: &ConvShape, input: &[T], weights: &[T], bias: &[T], out: &mut [T]) {
    let vox = s.vox();
    debug_assert_eq!(input.len(), s.n * s.cin * vox);
    debug_assert_eq!(out.len(), s.n * s.cout * vox);
    for n in 0..s.n {
        for o in 0..s.cout {
            let dst = &mut out[(n * s.cout + o) * vox..][..vox];
            dst.fill(bias[o]);
            for i in 0..s.cin {
                let src = &input[(n * s.cin + i) * vox..][..vox];
                let wk = &weights[(o * s.cin + i) * KERNEL_VOLUME..][..KERNEL_VOLUME];
                for (k, d) in offsets() {
                    let wv = wk[k];
                    if wv == T::zero() {
                        continue;
                    }
                    for_each_row(s.spatial, d, |a, b, len| {
                        for (y, &x) in dst[a..a + len].iter_mut().zip(&src[b..b + len]) {
                            *y = *y + wv * x;
                        }
                    });
                }
            }
        }
    }
}

/// Accumulates parameter gradients and, if requested, the input gradient.
pub fn backward<T: Scalar>(
    s: &ConvShape,
    input: &[T],
    weights: &[T],
    grad_out: &[T],
    grad_w: &mut [T],
    grad_b: &mut [T],
    mut grad_in: Option<&mut [T]>,
) {
    let vox = s.vox();
    if let Some(g) = grad_in.as_deref_mut() {
        g.fill(T::zero());
    }
    for n in 0..s.n {
        for o in 0..s.cout {
            let go = &grad_out[(n * s.cout + o) * vox..][..vox];
            grad_b[o] = grad_b[o] + go.iter().fold(T::zero(), |acc, &v| acc + v);
            for i in 0..s.cin {
                let src = &input[(n * s.cin + i) * vox..][..vox];
                let base = (o * s.cin + i) * KERNEL_VOLUME;
                for (k, d) in offsets() {
                    let mut acc = T::zero();
                    for_each_row(s.spatial, d, |a, b, len| {
                        for (&g, &x) in go[a..a + len].iter().zip(&src[b..b + len]) {
                            acc = acc + g * x;
                        }
                    });
                    grad_w[base + k] = grad_w[base + k] + acc;
                    if let Some(gi) = grad_in.as_deref_mut() {
                        let wv = weights[base + k];
                        let gi = &mut gi[(n * s.cin + i) * vox..][..vox];
                        for_each_row(s.spatial, d, |a, b, len| {
                            for (t, &g) in gi[b..b + len].iter_mut().zip(&go[a..a + len]) {
                                *t = *t + wv * g;
                            }
                        });
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    // Direct definition with explicit bounds checks.
    fn naive(s: &ConvShape, input: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let [sw, sh, sd] = s.spatial;
        let vox = sw * sh * sd;
        let mut out = vec![0.0; s.n * s.cout * vox];
        for n in 0..s.n {
            for o in 0..s.cout {
                for x in 0..sw {
                    for y in 0..sh {
                        for z in 0..sd {
                            let mut acc = b[o];
                            for i in 0..s.cin {
                                for k in 0..27 {
                                    let (dx, dy, dz) = (k / 9, (k / 3) % 3, k % 3);
                                    let (px, py, pz) = (x + dx, y + dy, z + dz);
                                    if px < 1 || py < 1 || pz < 1 || px > sw || py > sh || pz > sd {
                                        continue;
                                    }
                                    let idx = ((n * s.cin + i) * sw + px - 1) * sh * sd + (py - 1) * sd + pz - 1;
                                    acc += w[(o * s.cin + i) * 27 + k] * input[idx];
                                }
                            }
                            out[((n * s.cout + o) * sw + x) * sh * sd + y * sd + z] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution() {
        let s = ConvShape { n: 2, cin: 2, cout: 3, spatial: [4, 3, 5] };
        let mut rng = crate::rng::CounterRng::new(4);
        let input: Vec<f64> = (0..2 * 2 * 60).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let w: Vec<f64> = (0..3 * 2 * 27).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let b = vec![0.1, -0.2, 0.3];
        let mut out = vec![0.0; 2 * 3 * 60];
        forward(&s, &input, &w, &b, &mut out);
        let want = naive(&s, &input, &w, &b);
        for (a, b) in out.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_is_adjoint() {
        // <conv(x), g> == <x, conv^T(g)> with zero bias
        let s = ConvShape { n: 1, cin: 2, cout: 2, spatial: [3, 4, 2] };
        let mut rng = crate::rng::CounterRng::new(8);
        let x: Vec<f64> = (0..48).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let g: Vec<f64> = (0..48).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let w: Vec<f64> = (0..2 * 2 * 27).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let mut y = vec![0.0; 48];
        forward(&s, &x, &w, &[0.0, 0.0], &mut y);
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; 2];
        let mut gx = vec![0.0; 48];
        backward(&s, &x, &w, &g, &mut gw, &mut gb, Some(&mut gx));
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
        // and linear in w: <conv(x), g> == <w, grad_w>
        let rhs_w: f64 = w.iter().zip(&gw).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs_w).abs() < 1e-12);
    }
}
