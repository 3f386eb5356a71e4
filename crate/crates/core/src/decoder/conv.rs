use ndarray::{Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use crate::nn::{join, trunc_normal, Parameterized, Scalar};

/// Depthwise `k × k` convolution over a token grid, zero padded, stride 1.
///
/// Tokens are laid out sample-major then row-major, so a batch is a
/// `(B·rows·cols) × d` matrix.
#[derive(Clone, Debug)]
pub struct DepthwiseConv<F> {
    pub kernel: Array2<F>, // (k·k) × d, row-major taps
    pub bias: Array1<F>,
    pub size: usize,
}

impl<F: Scalar> DepthwiseConv<F> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, size: usize, dim: usize, std: f64) -> Self {
        assert!(size % 2 == 1, "kernel size must be odd");
        Self { kernel: trunc_normal(rng, (size * size, dim), std), bias: Array1::zeros(dim), size }
    }

    fn taps(&self) -> impl Iterator<Item = (usize, isize, isize)> + '_ {
        let pad = (self.size / 2) as isize;
        (0..self.size * self.size).map(move |t| (t, (t / self.size) as isize - pad, (t % self.size) as isize - pad))
    }

    pub fn forward(&self, x: ArrayView2<F>, grid: (usize, usize)) -> Array2<F> {
        let (rows, cols) = grid;
        let n = rows * cols;
        assert_eq!(x.nrows() % n, 0, "token count is not a multiple of the grid");
        let mut out = Array2::zeros(x.raw_dim());
        for b in 0..x.nrows() / n {
            for r in 0..rows {
                for c in 0..cols {
                    let o = b * n + r * cols + c;
                    let mut orow = out.row_mut(o);
                    orow.assign(&self.bias);
                    for (t, dr, dc) in self.taps() {
                        let (rr, cc) = (r as isize + dr, c as isize + dc);
                        if rr < 0 || cc < 0 || rr >= rows as isize || cc >= cols as isize {
                            continue;
                        }
                        let i = b * n + rr as usize * cols + cc as usize;
                        ndarray::Zip::from(&mut orow)
                            .and(x.row(i))
                            .and(self.kernel.row(t))
                            .for_each(|o, &xv, &w| *o += xv * w);
                    }
                }
            }
        }
        out
    }

    pub fn backward(&self, x: ArrayView2<F>, dy: ArrayView2<F>, grid: (usize, usize), grad: &mut Self) -> Array2<F> {
        let (rows, cols) = grid;
        let n = rows * cols;
        let mut dx = Array2::zeros(x.raw_dim());
        for b in 0..x.nrows() / n {
            for r in 0..rows {
                for c in 0..cols {
                    let o = b * n + r * cols + c;
                    let g = dy.row(o);
                    grad.bias += &g;
                    for (t, dr, dc) in self.taps() {
                        let (rr, cc) = (r as isize + dr, c as isize + dc);
                        if rr < 0 || cc < 0 || rr >= rows as isize || cc >= cols as isize {
                            continue;
                        }
                        let i = b * n + rr as usize * cols + cc as usize;
                        ndarray::Zip::from(grad.kernel.row_mut(t))
                            .and(x.row(i))
                            .and(&g)
                            .for_each(|w, &xv, &gv| *w += xv * gv);
                        ndarray::Zip::from(dx.row_mut(i))
                            .and(self.kernel.row(t))
                            .and(&g)
                            .for_each(|d, &w, &gv| *d += w * gv);
                    }
                }
            }
        }
        dx
    }
}

impl<F: Scalar> Parameterized<F> for DepthwiseConv<F> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewD<'a, F>)) {
        f(join(prefix, "kernel"), self.kernel.view().into_dyn());
        f(join(prefix, "bias"), self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, ArrayViewMutD<'_, F>)) {
        f(join(prefix, "kernel"), self.kernel.view_mut().into_dyn());
        f(join(prefix, "bias"), self.bias.view_mut().into_dyn());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_by_one_is_channel_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = DepthwiseConv::<f64>::init(&mut rng, 1, 3, 1.0);
        let x: Array2<f64> = trunc_normal(&mut rng, (8, 3), 1.0);
        let y = conv.forward(x.view(), (2, 2));
        for i in 0..8 {
            for j in 0..3 {
                assert!((y[[i, j]] - x[[i, j]] * conv.kernel[[0, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = DepthwiseConv::<f64>::init(&mut rng, 3, 2, 1.0);
        let x: Array2<f64> = trunc_normal(&mut rng, (2 * 9, 2), 1.0);
        let w: Array2<f64> = trunc_normal(&mut rng, (2 * 9, 2), 1.0);
        let grid = (3, 3);
        let mut g = conv.zeroed();
        let dx = conv.backward(x.view(), w.view(), grid, &mut g);
        let loss = |c: &DepthwiseConv<f64>, x: &Array2<f64>| (&c.forward(x.view(), grid) * &w).sum();
        let h = 1e-6;
        for (i, j) in [(0, 0), (4, 1), (13, 0), (17, 1)] {
            let mut xp = x.clone();
            xp[[i, j]] += h;
            let mut xm = x.clone();
            xm[[i, j]] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h);
            assert!((fd - dx[[i, j]]).abs() < 1e-7);
        }
        for (t, j) in [(0, 0), (4, 1), (8, 0)] {
            let mut cp = conv.clone();
            cp.kernel[[t, j]] += h;
            let mut cm = conv.clone();
            cm.kernel[[t, j]] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h);
            assert!((fd - g.kernel[[t, j]]).abs() < 1e-7);
        }
    }
}
