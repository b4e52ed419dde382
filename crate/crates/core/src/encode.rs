//! Echo-planar encoding of rotated views under an off-resonance field.
//!
//! Each view acquires every R-th k-space row in a single shot. Row
//! `line_offset + s*R` is read at echo time `te_first + s*esp`, so the field
//! winds an extra phase `exp(-i 2 pi f t_s)` into the object before each
//! line. The forward operator is therefore a sum over segments of
//! (phase-modulate, coil-weight, take one k-space row); its adjoint under
//! the 1/(H*W)-weighted k-space inner product reverses each step with
//! conjugates.
//!
//! A rotated view is handled entirely upstream: the image, field, and coil
//! arrays passed in are the scene sampled on that view's rotated grid, and
//! the operator itself always encodes along the first array axis.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use num_complex::{Complex, Complex64};
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::FftNum;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::FourierPlan;
use crate::geometry::{rotate_coords, RotationAngle};
use crate::phantom::{CoilSet, ComplexImage, FieldMap, Scene};

/// Acquisition geometry and timing for one view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    /// In-plane rotation of this view's encoding axes.
    pub angle: RotationAngle,
    /// Undersampling factor R: every R-th row is acquired.
    pub accel: usize,
    /// Index of the first acquired row, in 0..R.
    pub line_offset: usize,
    /// Echo spacing between consecutive acquired lines, seconds.
    pub esp_s: f64,
    /// Echo time of the first acquired line, seconds.
    pub te_first_s: f64,
}

impl ViewSpec {
    pub fn validate(&self, height: usize) -> Result<()> {
        if self.accel == 0 || self.accel > height {
            return Err(Error::Config(format!(
                "acceleration {} invalid for {} rows",
                self.accel, height
            )));
        }
        if self.line_offset >= self.accel {
            return Err(Error::Config(format!(
                "line offset {} must be below acceleration {}",
                self.line_offset, self.accel
            )));
        }
        if !(self.esp_s > 0.0) || self.te_first_s < 0.0 {
            return Err(Error::Config(format!(
                "timing must satisfy esp > 0 and te_first >= 0, got esp={} te={}",
                self.esp_s, self.te_first_s
            )));
        }
        Ok(())
    }

    /// Acquired k-space row indices, in acquisition order.
    pub fn acquired_lines(&self, height: usize) -> Vec<usize> {
        (self.line_offset..height).step_by(self.accel).collect()
    }

    /// Number of acquired lines (segments) for `height` rows.
    pub fn segments(&self, height: usize) -> usize {
        self.acquired_lines(height).len()
    }

    /// Echo time of segment `s`, seconds.
    pub fn echo_time(&self, s: usize) -> f64 {
        self.te_first_s + s as f64 * self.esp_s
    }
}

/// K-space data for one view, shape (coils, segments, width); segment `s`
/// holds acquired row `line_offset + s*accel`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewData {
    pub spec: ViewSpec,
    pub data: Array3<Complex64>,
}

/// A multi-view acquisition of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct KSpaceSet {
    pub views: Vec<ViewData>,
    /// Image grid (H, W) the data encodes.
    pub shape: (usize, usize),
    pub coil_count: usize,
    pub seed: u64,
    pub noise_snr_db: Option<f64>,
}

/// Per-view encoding kernels shared by simulation and reconstruction.
/// Holds the coil maps in the view frame plus cached FFT plans, and applies
/// the per-segment pieces of the forward model.
pub struct ViewOperator<T: FftNum> {
    plan: FourierPlan<T>,
    coils: Array3<Complex<T>>,
    lines: Vec<usize>,
    times: Vec<f64>,
    /// Per segment: tw[i] = exp(-i 2 pi l_s i / H), the row-reduction
    /// weights of the acquired line.
    twiddles: Vec<Vec<Complex<T>>>,
    row_scratch: Vec<Complex<T>>,
}

impl<T: FftNum + Float> ViewOperator<T> {
    pub fn new(coils: Array3<Complex<T>>, spec: &ViewSpec) -> Result<Self> {
        let (c, h, w) = coils.dim();
        if c == 0 {
            return Err(Error::InvalidCoilCount(0));
        }
        spec.validate(h)?;
        let lines = spec.acquired_lines(h);
        let times = (0..lines.len()).map(|s| spec.echo_time(s)).collect();
        let twiddles = lines
            .iter()
            .map(|&ell| {
                (0..h)
                    .map(|i| {
                        let ang = -std::f64::consts::TAU * ((ell * i) % h) as f64 / h as f64;
                        Complex::new(
                            T::from(ang.cos()).unwrap(),
                            T::from(ang.sin()).unwrap(),
                        )
                    })
                    .collect()
            })
            .collect();
        Ok(ViewOperator {
            plan: FourierPlan::new(h, w),
            coils,
            lines,
            times,
            twiddles,
            row_scratch: vec![Complex::new(T::zero(), T::zero()); w],
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.plan.shape()
    }

    pub fn coil_count(&self) -> usize {
        self.coils.dim().0
    }

    pub fn segments(&self) -> usize {
        self.lines.len()
    }

    pub fn time(&self, s: usize) -> f64 {
        self.times[s]
    }

    pub fn coil(&self, c: usize) -> ArrayView2<'_, Complex<T>> {
        self.coils.index_axis(Axis(0), c)
    }

    /// Phase wound by field `f` at echo time of segment `s`:
    /// exp(-i 2 pi f t_s), elementwise.
    pub fn segment_phase(&self, field: &Array2<T>, s: usize) -> Array2<Complex<T>> {
        let t = self.times[s];
        field.mapv(|f| {
            let ang = -std::f64::consts::TAU * t * f.to_f64().unwrap();
            Complex::new(
                T::from(ang.cos()).unwrap(),
                T::from(ang.sin()).unwrap(),
            )
        })
    }

    /// K-space rows of segment `s` for all coils, given the already
    /// phase-modulated image `w`: row l_s of fft2(S_c * w). Shape (C, W).
    pub fn kspace_segment(&mut self, w: &Array2<Complex<T>>, s: usize) -> Array2<Complex<T>> {
        let (_, _, width) = self.coils.dim();
        let mut out = Array2::from_elem(
            (self.coil_count(), width),
            Complex::new(T::zero(), T::zero()),
        );
        let ell = self.lines[s];
        for c in 0..self.coil_count() {
            let weighted = &self.coils.index_axis(Axis(0), c) * w;
            out.row_mut(c).assign(&self.plan.kspace_row(&weighted, ell));
        }
        out
    }

    /// Adjoint of `kspace_segment` under the 1/(H*W)-weighted k-space inner
    /// product: sum_c conj(S_c) * ifft2(embed rows at l_s).
    pub fn adjoint_segment(
        &mut self,
        rows: &Array2<Complex<T>>,
        s: usize,
    ) -> Array2<Complex<T>> {
        let (h, w) = self.plan.shape();
        let ell = self.lines[s];
        let mut acc = Array2::from_elem((h, w), Complex::new(T::zero(), T::zero()));
        for c in 0..self.coil_count() {
            let img = self.plan.row_to_image(&rows.row(c).to_owned(), ell);
            let coil = self.coils.index_axis(Axis(0), c);
            for ((dst, &s_val), &v) in acc.iter_mut().zip(coil.iter()).zip(img.iter()) {
                *dst = *dst + s_val.conj() * v;
            }
        }
        acc
    }

    /// Self-adjoint per-segment normal operator
    /// G_s x = sum_c conj(S_c) * ifft2(mask_{l_s} fft2(S_c x)).
    pub fn normal_segment(&mut self, x: &Array2<Complex<T>>, s: usize) -> Array2<Complex<T>> {
        let rows = self.kspace_segment(x, s);
        self.adjoint_segment(&rows, s)
    }

    /// Accumulates `G_s x` into `out`. The width-axis FFT of the forward pass
    /// is undone by the inverse FFT of the adjoint, so the pair reduces to a
    /// row reduction and a rank-one expansion per coil:
    /// G_s x = (1/H) sum_c conj(S_c) * (conj(tw) (x) r_c),
    /// r_c[j] = sum_i tw[i] S_c[i,j] x[i,j].
    pub fn normal_segment_into(
        &mut self,
        x: &Array2<Complex<T>>,
        s: usize,
        out: &mut Array2<Complex<T>>,
    ) {
        let (h, w) = self.plan.shape();
        debug_assert_eq!(x.dim(), (h, w));
        debug_assert_eq!(out.dim(), (h, w));
        let tw = &self.twiddles[s];
        let inv_h = T::one() / T::from(h).unwrap();
        let zero = Complex::new(T::zero(), T::zero());
        let xs = x.as_slice().expect("contiguous image");
        let os = out.as_slice_mut().expect("contiguous output");
        let r = &mut self.row_scratch;
        for c in 0..self.coils.dim().0 {
            let coil = self.coils.index_axis(Axis(0), c);
            let cs = coil.as_slice().expect("contiguous coil map");
            r.fill(zero);
            for i in 0..h {
                let t = tw[i];
                let row_c = &cs[i * w..(i + 1) * w];
                let row_x = &xs[i * w..(i + 1) * w];
                for j in 0..w {
                    r[j] = r[j] + t * row_c[j] * row_x[j];
                }
            }
            for i in 0..h {
                let phi = tw[i].conj() * inv_h;
                let row_c = &cs[i * w..(i + 1) * w];
                let row_o = &mut os[i * w..(i + 1) * w];
                for j in 0..w {
                    row_o[j] = row_o[j] + row_c[j].conj() * (phi * r[j]);
                }
            }
        }
    }
}

/// Encodes one view: image, field, and coils are all sampled in the view
/// frame. Returns (coils, segments, width) k-space.
pub fn forward_view(
    img: &ComplexImage,
    field: &FieldMap,
    coils: &CoilSet,
    spec: &ViewSpec,
) -> Result<Array3<Complex64>> {
    let (h, w) = img.dim();
    check_view_shapes(img.dim(), field.dim(), coils)?;
    let mut op = ViewOperator::<f64>::new(coils.maps.clone(), spec)?;
    let segs = op.segments();
    let mut out = Array3::zeros((coils.count(), segs, w));
    let _ = h;
    for s in 0..segs {
        let phase = op.segment_phase(field, s);
        let wimg = img * &phase;
        let rows = op.kspace_segment(&wimg, s);
        out.index_axis_mut(Axis(1), s).assign(&rows);
    }
    Ok(out)
}

/// Adjoint of `forward_view` under the weighted k-space inner product:
/// sum_s conj(phase_s) * sum_c conj(S_c) * ifft2(embedded row s).
pub fn adjoint_view(
    kspace: &Array3<Complex64>,
    field: &FieldMap,
    coils: &CoilSet,
    spec: &ViewSpec,
) -> Result<ComplexImage> {
    let (h, w) = field.dim();
    check_view_shapes((h, w), field.dim(), coils)?;
    let mut op = ViewOperator::<f64>::new(coils.maps.clone(), spec)?;
    if kspace.dim() != (coils.count(), op.segments(), w) {
        return Err(Error::ShapeMismatch(format!(
            "k-space shape {:?} does not match (coils {}, segments {}, width {})",
            kspace.dim(),
            coils.count(),
            op.segments(),
            w
        )));
    }
    let mut acc = Array2::zeros((h, w));
    for s in 0..op.segments() {
        let rows = kspace.index_axis(Axis(1), s).to_owned();
        let img = op.adjoint_segment(&rows, s);
        let phase = op.segment_phase(field, s);
        for ((dst, &p), &v) in acc.iter_mut().zip(phase.iter()).zip(img.iter()) {
            *dst += p.conj() * v;
        }
    }
    Ok(acc)
}

fn check_view_shapes(
    img: (usize, usize),
    field: (usize, usize),
    coils: &CoilSet,
) -> Result<()> {
    if coils.count() == 0 {
        return Err(Error::InvalidCoilCount(0));
    }
    if img != field || img != coils.shape() {
        return Err(Error::ShapeMismatch(format!(
            "image {:?}, field {:?}, coils {:?} must agree",
            img,
            field,
            coils.shape()
        )));
    }
    Ok(())
}

/// Simulates the full multi-view acquisition of an analytic scene.
///
/// Each view samples the scene on its own rotated grid and encodes it.
/// With `noise_snr_db` set, i.i.d. complex Gaussian noise at that SNR
/// (relative to the per-view signal RMS) is added from a per-view
/// deterministic stream.
pub fn simulate_views(
    scene: &Scene,
    height: usize,
    width: usize,
    specs: &[ViewSpec],
    noise_snr_db: Option<f64>,
    seed: u64,
) -> Result<KSpaceSet> {
    if specs.is_empty() {
        return Err(Error::Config("at least one view is required".into()));
    }
    let grid = crate::geometry::make_grid(height, width)?;
    let mut views = Vec::with_capacity(specs.len());
    for (v, spec) in specs.iter().enumerate() {
        let rotated = rotate_coords(&grid, spec.angle);
        let (img, field, coils) = scene.sample(&rotated)?;
        let mut data = forward_view(&img, &field, &coils, spec)?;
        if let Some(snr_db) = noise_snr_db {
            add_noise(&mut data, snr_db, seed.wrapping_add(v as u64))?;
        }
        views.push(ViewData { spec: *spec, data });
    }
    Ok(KSpaceSet {
        views,
        shape: (height, width),
        coil_count: scene.coils.count(),
        seed,
        noise_snr_db,
    })
}

fn add_noise(data: &mut Array3<Complex64>, snr_db: f64, stream_seed: u64) -> Result<()> {
    let n = data.len();
    if n == 0 {
        return Err(Error::DegenerateData("empty k-space".into()));
    }
    let rms = (data.iter().map(|v| v.norm_sqr()).sum::<f64>() / n as f64).sqrt();
    if rms == 0.0 {
        return Err(Error::DegenerateData(
            "cannot scale noise to an all-zero signal".into(),
        ));
    }
    let sigma = rms / 10f64.powf(snr_db / 20.0) / 2f64.sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Numeric(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    for v in data.iter_mut() {
        *v += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
    }
    Ok(())
}
