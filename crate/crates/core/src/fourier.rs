//! 2-D Fourier transforms and single-row kernels.
//!
//! Conventions: `fft2` is the plain unnormalized forward DFT, `ifft2` carries
//! the full 1/(H*W) factor, so `ifft2(fft2(a)) == a`.
//!
//! Echo-planar sampling touches one k-space row per segment, so the hot paths
//! avoid full 2-D transforms: a single output row of `fft2(a)` is a twiddle-
//! weighted sum of image rows followed by one width-W FFT, and the inverse
//! transform of a k-space array supported on one row is an outer product of a
//! height-H phasor with one width-W inverse FFT. Both are exact, not
//! approximations.

use ndarray::{Array1, Array2};
use num_complex::Complex;
use num_traits::Float;
use rustfft::{Fft, FftNum, FftPlanner};
use std::sync::Arc;

/// Cached FFT plans and twiddle tables for one (H, W) image size.
pub struct FourierPlan<T: FftNum> {
    height: usize,
    width: usize,
    fwd_w: Arc<dyn Fft<T>>,
    inv_w: Arc<dyn Fft<T>>,
    fwd_h: Arc<dyn Fft<T>>,
    inv_h: Arc<dyn Fft<T>>,
    /// roots_fwd[r] = exp(-i 2 pi r / H); computed in f64 then cast down.
    roots_fwd: Vec<Complex<T>>,
    roots_inv: Vec<Complex<T>>,
    scratch: Vec<Complex<T>>,
}

impl<T: FftNum + Float> FourierPlan<T> {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd_w = planner.plan_fft_forward(width);
        let inv_w = planner.plan_fft_inverse(width);
        let fwd_h = planner.plan_fft_forward(height);
        let inv_h = planner.plan_fft_inverse(height);
        let root = |r: usize, sign: f64| {
            let ang = sign * std::f64::consts::TAU * r as f64 / height as f64;
            Complex::new(
                T::from(ang.cos()).unwrap(),
                T::from(ang.sin()).unwrap(),
            )
        };
        let roots_fwd = (0..height).map(|r| root(r, -1.0)).collect();
        let roots_inv = (0..height).map(|r| root(r, 1.0)).collect();
        let scratch_len = [&fwd_w, &inv_w, &fwd_h, &inv_h]
            .iter()
            .map(|f| f.get_inplace_scratch_len())
            .max()
            .unwrap()
            .max(height);
        FourierPlan {
            height,
            width,
            fwd_w,
            inv_w,
            fwd_h,
            inv_h,
            roots_fwd,
            roots_inv,
            scratch: vec![Complex::new(T::zero(), T::zero()); scratch_len],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn assert_shape(&self, a: &Array2<Complex<T>>) {
        assert_eq!(
            a.dim(),
            (self.height, self.width),
            "array shape does not match plan"
        );
    }

    /// Unnormalized forward 2-D DFT.
    pub fn fft2(&mut self, a: &Array2<Complex<T>>) -> Array2<Complex<T>> {
        self.assert_shape(a);
        let mut out = a.clone();
        self.transform_rows(&mut out, true);
        self.transform_cols(&mut out, true);
        out
    }

    /// Inverse 2-D DFT with the 1/(H*W) factor.
    pub fn ifft2(&mut self, a: &Array2<Complex<T>>) -> Array2<Complex<T>> {
        self.assert_shape(a);
        let mut out = a.clone();
        self.transform_rows(&mut out, false);
        self.transform_cols(&mut out, false);
        let scale = T::from(1.0 / (self.height * self.width) as f64).unwrap();
        out.mapv_inplace(|v| v * scale);
        out
    }

    fn transform_rows(&mut self, a: &mut Array2<Complex<T>>, forward: bool) {
        let fft = if forward { &self.fwd_w } else { &self.inv_w }.clone();
        for mut row in a.rows_mut() {
            let buf = row.as_slice_mut().expect("row-major layout");
            fft.process_with_scratch(buf, &mut self.scratch);
        }
    }

    fn transform_cols(&mut self, a: &mut Array2<Complex<T>>, forward: bool) {
        let fft = if forward { &self.fwd_h } else { &self.inv_h }.clone();
        let h = self.height;
        for j in 0..self.width {
            for i in 0..h {
                self.scratch[i] = a[[i, j]];
            }
            let (buf, rest) = self.scratch.split_at_mut(h);
            fft.process_with_scratch(buf, rest);
            for i in 0..h {
                a[[i, j]] = self.scratch[i];
            }
        }
    }

    /// Row `ell` of `fft2(a)` without computing the rest:
    /// first reduce over image rows with exact twiddles, then one row FFT.
    pub fn kspace_row(&mut self, a: &Array2<Complex<T>>, ell: usize) -> Array1<Complex<T>> {
        self.assert_shape(a);
        assert!(ell < self.height, "row index out of range");
        let mut acc = Array1::from_elem(self.width, Complex::new(T::zero(), T::zero()));
        for (i, row) in a.rows().into_iter().enumerate() {
            let tw = self.roots_fwd[(ell * i) % self.height];
            for (dst, &src) in acc.iter_mut().zip(row.iter()) {
                *dst = *dst + tw * src;
            }
        }
        let fft = self.fwd_w.clone();
        fft.process_with_scratch(acc.as_slice_mut().unwrap(), &mut self.scratch);
        acc
    }

    /// `ifft2` of a k-space array that is zero outside row `ell`:
    /// separable into a height-H phasor times one width-W inverse FFT.
    pub fn row_to_image(&mut self, row: &Array1<Complex<T>>, ell: usize) -> Array2<Complex<T>> {
        assert_eq!(row.len(), self.width, "row length does not match plan");
        assert!(ell < self.height, "row index out of range");
        let mut line = row.clone();
        let fft = self.inv_w.clone();
        fft.process_with_scratch(line.as_slice_mut().unwrap(), &mut self.scratch);
        let scale = T::from(1.0 / (self.height * self.width) as f64).unwrap();
        let mut out = Array2::from_elem(
            (self.height, self.width),
            Complex::new(T::zero(), T::zero()),
        );
        for i in 0..self.height {
            let ph = self.roots_inv[(ell * i) % self.height] * scale;
            for (dst, &src) in out.row_mut(i).iter_mut().zip(line.iter()) {
                *dst = ph * src;
            }
        }
        out
    }
}

/// One-shot unnormalized forward 2-D DFT (plans are cheap at test sizes).
pub fn fft2(a: &Array2<Complex<f64>>) -> Array2<Complex<f64>> {
    FourierPlan::new(a.nrows(), a.ncols()).fft2(a)
}

/// One-shot inverse 2-D DFT with the 1/(H*W) factor.
pub fn ifft2(a: &Array2<Complex<f64>>) -> Array2<Complex<f64>> {
    FourierPlan::new(a.nrows(), a.ncols()).ifft2(a)
}
