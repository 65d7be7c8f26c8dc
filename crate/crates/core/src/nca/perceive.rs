use ndarray::Array2;

use super::Real;

/// Horizontal-gradient Sobel kernel (responds to vertical edges), `[dy][dx]`,
/// normalized by 1/8.
pub const SOBEL_X: [[f64; 3]; 3] = [
    [-0.125, 0.0, 0.125],
    [-0.25, 0.0, 0.25],
    [-0.125, 0.0, 0.125],
];

/// Vertical-gradient Sobel kernel, the transpose of [`SOBEL_X`].
pub const SOBEL_Y: [[f64; 3]; 3] = [
    [-0.125, -0.25, -0.125],
    [0.0, 0.0, 0.0],
    [0.125, 0.25, 0.125],
];

/// Flat indices of the 3×3 neighbourhood of every pixel with replicate
/// padding, ordered `[dy][dx]` row-major.
fn neighbourhoods(height: usize, width: usize) -> Vec<[usize; 9]> {
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let mut n = [0usize; 9];
            for dy in 0..3 {
                for dx in 0..3 {
                    let yy = clamp(y as isize + dy as isize - 1, height);
                    let xx = clamp(x as isize + dx as isize - 1, width);
                    n[dy * 3 + dx] = yy * width + xx;
                }
            }
            out.push(n);
        }
    }
    out
}

fn taps<T: Real>() -> ([T; 9], [T; 9]) {
    let mut kx = [T::zero(); 9];
    let mut ky = [T::zero(); 9];
    for i in 0..9 {
        kx[i] = T::from_f64_lossy(SOBEL_X[i / 3][i % 3]);
        ky[i] = T::from_f64_lossy(SOBEL_Y[i / 3][i % 3]);
    }
    (kx, ky)
}

/// Fixed perception stage. For state channel `c` the output holds the
/// identity at column `3c`, the horizontal Sobel response at `3c + 1` and the
/// vertical one at `3c + 2`.
pub fn perceive<T: Real>(state: &Array2<T>, height: usize, width: usize) -> Array2<T> {
    let channels = state.ncols();
    let nbrs = neighbourhoods(height, width);
    let (kx, ky) = taps::<T>();
    let mut out = Array2::<T>::zeros((height * width, 3 * channels));
    for (p, n) in nbrs.iter().enumerate() {
        let mut row = out.row_mut(p);
        for c in 0..channels {
            let mut gx = T::zero();
            let mut gy = T::zero();
            for (k, &q) in n.iter().enumerate() {
                let v = state[[q, c]];
                gx += kx[k] * v;
                gy += ky[k] * v;
            }
            row[3 * c] = state[[p, c]];
            row[3 * c + 1] = gx;
            row[3 * c + 2] = gy;
        }
    }
    out
}

/// Transpose of [`perceive`]: maps a gradient over perception features back
/// to a gradient over state channels.
pub fn perceive_adjoint<T: Real>(grad: &Array2<T>, height: usize, width: usize) -> Array2<T> {
    let channels = grad.ncols() / 3;
    let nbrs = neighbourhoods(height, width);
    let (kx, ky) = taps::<T>();
    let mut out = Array2::<T>::zeros((height * width, channels));
    for (p, n) in nbrs.iter().enumerate() {
        let g = grad.row(p);
        for c in 0..channels {
            out[[p, c]] += g[3 * c];
            let (gx, gy) = (g[3 * c + 1], g[3 * c + 2]);
            for (k, &q) in n.iter().enumerate() {
                out[[q, c]] += kx[k] * gx + ky[k] * gy;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_grid_has_zero_gradients() {
        let state = Array2::from_elem((5 * 4, 2), 5.0f64);
        let p = perceive(&state, 5, 4);
        for c in 0..2 {
            assert!(p.column(3 * c).iter().all(|&v| v == 5.0));
            assert!(p.column(3 * c + 1).iter().all(|&v| v == 0.0));
            assert!(p.column(3 * c + 2).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn vertical_step_edge_by_hand() {
        // 3x3 grid, left column 0, middle and right columns 1.
        //   0 1 1
        //   0 1 1
        //   0 1 1
        let vals = [0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        let state = Array2::from_shape_vec((9, 1), vals.to_vec()).unwrap();
        let p = perceive(&state, 3, 3);
        // With replicate padding each row's neighbourhood repeats the same
        // columns, so gx = (1+2+1)/8 * (right - left).
        // x=0: left=pad(0)=0, right=1 -> 0.5; x=1: left=0, right=1 -> 0.5;
        // x=2: left=1, right=pad(1)=1 -> 0.0.
        let gx: Vec<f64> = p.column(1).to_vec();
        let expected = [0.5, 0.5, 0.0, 0.5, 0.5, 0.0, 0.5, 0.5, 0.0];
        assert_eq!(gx, expected);
        assert!(p.column(2).iter().all(|&v| v == 0.0));
        assert_eq!(p.column(0).to_vec(), vals.to_vec());
    }

    #[test]
    fn adjoint_matches_inner_product() {
        let (h, w, c) = (4, 5, 3);
        let x = Array2::from_shape_fn((h * w, c), |(p, k)| ((p * 7 + k * 3) as f64).sin());
        let g = Array2::from_shape_fn((h * w, 3 * c), |(p, k)| ((p * 5 + k) as f64).cos());
        let lhs: f64 = perceive(&x, h, w).iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(perceive_adjoint(&g, h, w).iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    proptest! {
        #[test]
        fn perception_is_linear(scale in -10.0f64..10.0, seed in 0u64..1000) {
            let state = Array2::from_shape_fn((16, 2), |(p, k)| ((seed as usize + p * 3 + k) as f64).sin());
            let scaled = state.mapv(|v| v * scale);
            let a = perceive(&scaled, 4, 4);
            let b = perceive(&state, 4, 4).mapv(|v| v * scale);
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-12 * (1.0 + y.abs()));
            }
        }
    }
}
