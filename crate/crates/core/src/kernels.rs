//! Forward and backward kernels for the tape operations.
//!
//! All tensors are `(N, C, H, W)` row-major. Backward kernels accumulate
//! into the gradient buffers they are given.

use crate::tensor::{Scalar, Shape, Tensor};

/// Unfolds one batch item into a `(C·k·k) × (H·W)` column matrix with zero
/// padding of `k/2`.
fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x_out, d) in dst.iter_mut().enumerate() {
                        let sx = x_out as isize + kx as isize - pad as isize;
                        *d = if sx < 0 || sx >= w as isize {
                            T::zero()
                        } else {
                            src[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the image, adding.
fn col2im_add<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let pad = k / 2;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut dx[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for (x_out, &v) in src.iter().enumerate() {
                        let sx = x_out as isize + kx as isize - pad as isize;
                        if sx >= 0 && sx < w as isize {
                            dst[sx as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Same-padded, stride-1 2D convolution (cross-correlation).
/// `w` is `(Cout, Cin, k, k)`, `b` is `(Cout, 1, 1, 1)`.
pub fn conv2d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let [n, cin, h, wd] = x.shape().0;
    let [cout, _, k, _] = w.shape().0;
    let hw = h * wd;
    let kk = cin * k * k;
    let mut out = Tensor::zeros(Shape::new(n, cout, h, wd));
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    for i in 0..n {
        let xi = &x.data()[i * cin * hw..(i + 1) * cin * hw];
        let oi = &mut out.data_mut()[i * cout * hw..(i + 1) * cout * hw];
        for (co, plane) in oi.chunks_exact_mut(hw).enumerate() {
            plane.fill(b.data()[co]);
        }
        let cols_ref: &[T] = if k == 1 {
            xi
        } else {
            im2col(xi, cin, h, wd, k, &mut cols);
            &cols
        };
        T::gemm(cout, kk, hw, w.data(), false, cols_ref, false, T::one(), oi);
    }
    out
}

/// Gradients of [`conv2d_forward`]. `dx` is skipped when `None`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    mut dx: Option<&mut Tensor<T>>,
    dw: Option<&mut Tensor<T>>,
    db: Option<&mut Tensor<T>>,
) {
    let [n, cin, h, wd] = x.shape().0;
    let [cout, _, k, _] = w.shape().0;
    let hw = h * wd;
    let kk = cin * k * k;
    if let Some(db) = db {
        for i in 0..n {
            let di = &dout.data()[i * cout * hw..(i + 1) * cout * hw];
            for (co, plane) in di.chunks_exact(hw).enumerate() {
                db.data_mut()[co] += plane.iter().copied().sum::<T>();
            }
        }
    }
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); kk * hw] };
    let mut dcols = vec![T::zero(); if dx.is_some() { kk * hw } else { 0 }];
    let mut dw = dw;
    for i in 0..n {
        let xi = &x.data()[i * cin * hw..(i + 1) * cin * hw];
        let di = &dout.data()[i * cout * hw..(i + 1) * cout * hw];
        if let Some(dw) = dw.as_deref_mut() {
            let cols_ref: &[T] = if k == 1 {
                xi
            } else {
                im2col(xi, cin, h, wd, k, &mut cols);
                &cols
            };
            // dW (Cout × kk) += dOut (Cout × hw) · colsᵀ (hw × kk)
            T::gemm(cout, hw, kk, di, false, cols_ref, true, T::one(), dw.data_mut());
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxi = &mut dx.data_mut()[i * cin * hw..(i + 1) * cin * hw];
            if k == 1 {
                T::gemm(kk, cout, hw, w.data(), true, di, false, T::one(), dxi);
            } else {
                T::gemm(kk, cout, hw, w.data(), true, di, false, T::zero(), &mut dcols);
                col2im_add(&dcols, cin, h, wd, k, dxi);
            }
        }
    }
}

/// Single-channel 3×3×3 convolution over each item's `(C, H, W)` volume,
/// zero padded. `w` is `(1, 3, 3, 3)` indexed `[0, dc, dy, dx]`.
pub fn conv3d_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: T) -> Tensor<T> {
    let [n, c, h, wd] = x.shape().0;
    let mut out = Tensor::full(x.shape(), bias);
    let xd = x.data();
    let wv = w.data();
    let od = out.data_mut();
    for i in 0..n {
        for z in 0..c {
            for dz in 0..3 {
                let sz = z as isize + dz as isize - 1;
                if sz < 0 || sz >= c as isize {
                    continue;
                }
                for dy in 0..3 {
                    for dxk in 0..3 {
                        let wt = wv[(dz * 3 + dy) * 3 + dxk];
                        for y in 0..h {
                            let sy = y as isize + dy as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src = ((i * c + sz as usize) * h + sy as usize) * wd;
                            let dst = ((i * c + z) * h + y) * wd;
                            let (x_lo, x_hi) = shifted_range(wd, dxk);
                            for xo in x_lo..x_hi {
                                od[dst + xo] += wt * xd[src + xo + dxk - 1];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output columns `x` for which `x + d - 1` is inside `[0, w)`.
fn shifted_range(w: usize, d: usize) -> (usize, usize) {
    match d {
        0 => (1.min(w), w),
        1 => (0, w),
        _ => (0, w.saturating_sub(1)),
    }
}

pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dout: &Tensor<T>,
    mut dx: Option<&mut Tensor<T>>,
    mut dw: Option<&mut Tensor<T>>,
    db: Option<&mut Tensor<T>>,
) {
    let [n, c, h, wd] = x.shape().0;
    let xd = x.data();
    let gd = dout.data();
    if let Some(db) = db {
        db.data_mut()[0] += dout.sum();
    }
    for i in 0..n {
        for z in 0..c {
            for dz in 0..3 {
                let sz = z as isize + dz as isize - 1;
                if sz < 0 || sz >= c as isize {
                    continue;
                }
                for dy in 0..3 {
                    for dxk in 0..3 {
                        let widx = (dz * 3 + dy) * 3 + dxk;
                        let wt = w.data()[widx];
                        let mut acc = T::zero();
                        for y in 0..h {
                            let sy = y as isize + dy as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let src = ((i * c + sz as usize) * h + sy as usize) * wd;
                            let dst = ((i * c + z) * h + y) * wd;
                            let (x_lo, x_hi) = shifted_range(wd, dxk);
                            if let Some(dx) = dx.as_deref_mut() {
                                let dxd = dx.data_mut();
                                for xo in x_lo..x_hi {
                                    dxd[src + xo + dxk - 1] += wt * gd[dst + xo];
                                }
                            }
                            for xo in x_lo..x_hi {
                                acc += xd[src + xo + dxk - 1] * gd[dst + xo];
                            }
                        }
                        if let Some(dw) = dw.as_deref_mut() {
                            dw.data_mut()[widx] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Sub-pixel rearrangement: input `(n, c, h, w)` goes to output
/// `(n, c / s², s·h + (c mod s²) / s, s·w + (c mod s²) mod s)`.
pub fn pixel_shuffle_forward<T: Scalar>(x: &Tensor<T>, s: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape().0;
    let s2 = s * s;
    let mut out = Tensor::zeros(Shape::new(n, c / s2, h * s, w * s));
    for i in 0..n {
        for ci in 0..c {
            let (co, sub) = (ci / s2, ci % s2);
            let (oy, ox) = (sub / s, sub % s);
            for y in 0..h {
                for xx in 0..w {
                    let v = x.at([i, ci, y, xx]);
                    out.set([i, co, s * y + oy, s * xx + ox], v);
                }
            }
        }
    }
    out
}

/// Inverse rearrangement of [`pixel_shuffle_forward`]; also its adjoint.
pub fn pixel_unshuffle<T: Scalar>(y: &Tensor<T>, s: usize) -> Tensor<T> {
    let [n, c, h, w] = y.shape().0;
    let s2 = s * s;
    let (lh, lw) = (h / s, w / s);
    Tensor::from_fn(Shape::new(n, c * s2, lh, lw), |[i, ci, yy, xx]| {
        let (co, sub) = (ci / s2, ci % s2);
        y.at([i, co, s * yy + sub / s, s * xx + sub % s])
    })
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Per batch item: stacks the `K` stage features as rows of `F̂ ∈ R^{K×D}`,
/// computes `S = rowsoftmax(F̂F̂ᵀ)` and returns `S·F̂ + F̂` laid out as `K`
/// consecutive channel blocks, plus the `N·K·K` affinities.
pub fn stage_affinity_forward<T: Scalar>(stages: &[&Tensor<T>]) -> (Tensor<T>, Vec<T>) {
    let kst = stages.len();
    let shape = stages[0].shape();
    let [n, c, h, w] = shape.0;
    let d = shape.item();
    let mut out = Tensor::zeros(Shape::new(n, c * kst, h, w));
    let mut affinity = vec![T::zero(); n * kst * kst];
    let mut f = vec![T::zero(); kst * d];
    for i in 0..n {
        for (k, st) in stages.iter().enumerate() {
            f[k * d..(k + 1) * d].copy_from_slice(&st.data()[i * d..(i + 1) * d]);
        }
        let s = &mut affinity[i * kst * kst..(i + 1) * kst * kst];
        T::gemm(kst, d, kst, &f, false, &f, true, T::zero(), s);
        for row in s.chunks_exact_mut(kst) {
            softmax_in_place(row);
        }
        let oi = &mut out.data_mut()[i * kst * d..(i + 1) * kst * d];
        oi.copy_from_slice(&f);
        T::gemm(kst, kst, d, s, false, &f, false, T::one(), oi);
    }
    (out, affinity)
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

/// Gradients of [`stage_affinity_forward`] with respect to each stage.
pub fn stage_affinity_backward<T: Scalar>(
    stages: &[&Tensor<T>],
    affinity: &[T],
    dout: &Tensor<T>,
) -> Vec<Tensor<T>> {
    let kst = stages.len();
    let shape = stages[0].shape();
    let n = shape.n();
    let d = shape.item();
    let mut grads: Vec<Tensor<T>> = (0..kst).map(|_| Tensor::zeros(shape)).collect();
    let mut f = vec![T::zero(); kst * d];
    let mut df = vec![T::zero(); kst * d];
    let mut ds = vec![T::zero(); kst * kst];
    for i in 0..n {
        for (k, st) in stages.iter().enumerate() {
            f[k * d..(k + 1) * d].copy_from_slice(&st.data()[i * d..(i + 1) * d]);
        }
        let s = &affinity[i * kst * kst..(i + 1) * kst * kst];
        let dy = &dout.data()[i * kst * d..(i + 1) * kst * d];
        // identity path and Sᵀ·dY
        df.copy_from_slice(dy);
        T::gemm(kst, kst, d, s, true, dy, false, T::one(), &mut df);
        // dS = dY·F̂ᵀ, then through the row softmax
        T::gemm(kst, d, kst, dy, false, &f, true, T::zero(), &mut ds);
        for r in 0..kst {
            let srow = &s[r * kst..(r + 1) * kst];
            let drow = &mut ds[r * kst..(r + 1) * kst];
            let dot: T = srow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
            for (g, &p) in drow.iter_mut().zip(srow) {
                *g = p * (*g - dot);
            }
        }
        // G = F̂F̂ᵀ, so dF̂ += (dG + dGᵀ)·F̂
        let mut sym = vec![T::zero(); kst * kst];
        for a in 0..kst {
            for b in 0..kst {
                sym[a * kst + b] = ds[a * kst + b] + ds[b * kst + a];
            }
        }
        T::gemm(kst, kst, d, &sym, false, &f, false, T::one(), &mut df);
        for (k, g) in grads.iter_mut().enumerate() {
            g.data_mut()[i * d..(i + 1) * d].copy_from_slice(&df[k * d..(k + 1) * d]);
        }
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Direct sliding-window convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let [n, cin, h, wd] = x.shape().0;
        let [cout, _, k, _] = w.shape().0;
        let p = (k / 2) as isize;
        Tensor::from_fn(Shape::new(n, cout, h, wd), |[i, co, y, xx]| {
            let mut acc = b.data()[co];
            for ci in 0..cin {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - p;
                        let sx = xx as isize + kx as isize - p;
                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                            acc += w.at([co, ci, ky, kx]) * x.at([i, ci, sy as usize, sx as usize]);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        for (k, cin, cout) in [(3, 2, 3), (1, 4, 2), (5, 1, 1)] {
            let x = random(Shape::new(2, cin, 5, 6), 1);
            let w = random(Shape::new(cout, cin, k, k), 2);
            let b = random(Shape::new(cout, 1, 1, 1), 3);
            let got = conv2d_forward(&x, &w, &b);
            let want = naive_conv(&x, &w, &b);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn conv_backward_is_adjoint() {
        // <conv(x), g> is linear in x and w, so its gradients are exact:
        // <dx, x> + <dw, w> + <db, b> = 2<conv(x), g> - <b-term, g>
        let x = random(Shape::new(1, 2, 4, 5), 4);
        let w = random(Shape::new(3, 2, 3, 3), 5);
        let b = Tensor::zeros(Shape::new(3, 1, 1, 1));
        let g = random(Shape::new(1, 3, 4, 5), 6);
        let y = conv2d_forward(&x, &w, &b);
        let mut dx = Tensor::zeros(x.shape());
        let mut dw = Tensor::zeros(w.shape());
        conv2d_backward(&x, &w, &g, Some(&mut dx), Some(&mut dw), None);
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let via_x: f64 = dx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        let via_w: f64 = dw.data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-12);
        assert!((lhs - via_w).abs() < 1e-12);
    }

    #[test]
    fn conv3d_matches_direct_sum() {
        let x = random(Shape::new(2, 3, 4, 5), 7);
        let w = random(Shape::new(1, 3, 3, 3), 8);
        let y = conv3d_forward(&x, &w, 0.25);
        let [_, c, h, wd] = x.shape().0;
        for i in 0..2 {
            for z in 0..c {
                for yy in 0..h {
                    for xx in 0..wd {
                        let mut acc = 0.25;
                        for dz in 0..3 {
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let (sz, sy, sx) = (
                                        z as isize + dz - 1,
                                        yy as isize + dy - 1,
                                        xx as isize + dx - 1,
                                    );
                                    if (0..c as isize).contains(&sz)
                                        && (0..h as isize).contains(&sy)
                                        && (0..wd as isize).contains(&sx)
                                    {
                                        acc += w.at([0, dz as usize, dy as usize, dx as usize])
                                            * x.at([i, sz as usize, sy as usize, sx as usize]);
                                    }
                                }
                            }
                        }
                        assert!((y.at([i, z, yy, xx]) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn pixel_shuffle_round_trip() {
        let x = random(Shape::new(2, 8, 3, 2), 9);
        let y = pixel_shuffle_forward(&x, 2);
        assert_eq!(y.shape(), Shape::new(2, 2, 6, 4));
        assert_eq!(pixel_unshuffle(&y, 2), x);
    }

    #[test]
    fn softmax_rows_sum_to_one_even_for_large_logits() {
        let mut row = [1e4f64, 1e4 - 1.0, -3e4];
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(row.iter().all(|v| v.is_finite()));
    }
}
