//! Joint reconstruction: loss pieces, schedules, the optimizer, and the
//! training loop that fits the image and field networks to multi-view data.
//!
//! The objective compares each view's data and model prediction after both
//! are mapped through the same fixed coil/Fourier adjoint. The data side,
//! `target_n = sum_s sum_c conj(S_c) ifft2(embed d_n[c,s])`, is precomputed
//! once and normalized by `rho`, the largest target magnitude across views.
//! The model side re-encodes the networks through the physics every
//! iteration:
//!
//!   pred_n = sum_s G_s(phase_s * m),   G_s x = sum_c conj(S_c)
//!            ifft2(mask_{l_s} fft2(S_c x)),
//!
//! with `m` the image network sampled on the view's rotated grid and
//! `phase_s = exp(-i 2 pi f t_s)` from the field network on the same grid.
//! `G_s` is self-adjoint, which keeps the backward pass cheap: the residual
//! gradient is pushed back through each segment by reapplying `G_s`, the
//! image gradient unwinds the phase conjugate, and the field gradient is the
//! phase-sensitivity term `2 pi t_s Im(conj(g_u) u)`.
//!
//! A staircase-scheduled total-variation penalty on the field (evaluated on
//! the regular grid) steers the early iterations, then switches off so the
//! data term refines details. Optimization is decoupled-weight-decay Adam
//! with decay on the dense-layer weights only. Everything runs
//! single-threaded with fixed reduction order, so results are bit-exact
//! reproducible for a given seed.

use ndarray::{Array2, NdFloat};
use num_complex::Complex;

use rustfft::FftNum;

use crate::encode::{adjoint_view, KSpaceSet, ViewOperator};
use crate::error::{Error, Result};
use crate::geometry::{make_grid, rotate_coords};
use crate::inr::{
    init_network, HashGridConfig, MlpCache, MlpConfig, NetQuery, NetworkParams, ParamSet,
};
use crate::phantom::{AnalyticCoils, ComplexImage, FieldMap};

/// Network shapes shared by the two coordinate networks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetsConfig {
    pub hash: HashGridConfig,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    /// Hz represented by one unit of raw field-network output.
    pub b0_scale: f64,
}

impl Default for NetsConfig {
    fn default() -> Self {
        NetsConfig {
            hash: HashGridConfig::default(),
            hidden_width: 256,
            hidden_layers: 2,
            b0_scale: 100.0,
        }
    }
}

/// Optimization hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Decoupled weight decay, applied to dense-layer weights only.
    pub weight_decay: f64,
    pub tv_base: f64,
    pub tv_decay: f64,
    pub tv_interval: usize,
    pub tv_off_after: usize,
    /// Smoothed-L1 transition point.
    pub delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 6000,
            lr: 3e-3,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.01,
            tv_base: 1e-5,
            tv_decay: 0.1,
            tv_interval: 1000,
            tv_off_after: 5000,
            delta: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.delta > 0.0) || self.tv_interval == 0 {
            return Err(Error::Config(
                "lr, delta, and tv_interval must be positive".into(),
            ));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Where per-view off-resonance phases come from during fitting: the field
/// network being optimized, or fixed known maps (one per view, in that
/// view's frame) used to isolate the image problem.
pub enum FieldSource {
    Network,
    Fixed(Vec<FieldMap>),
}

/// Outcome of a fit. Each history entry holds the data-fidelity and
/// total-variation terms of one iteration's objective, in that order.
#[derive(Debug, Clone)]
pub struct FitReport {
    pub loss_history: Vec<[f64; 2]>,
    pub iterations_run: usize,
    pub final_loss: f64,
    pub stopped_early: bool,
}

/// Objective value split into its two terms.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub data: f64,
    pub tv: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.data + self.tv
    }
}

/// Smoothed L1 penalty: quadratic inside `delta`, linear outside.
pub fn smoothed_l1(r: f64, delta: f64) -> f64 {
    debug_assert!(delta > 0.0);
    let a = r.abs();
    if a < delta {
        0.5 * r * r / delta
    } else {
        a - 0.5 * delta
    }
}

/// Derivative of `smoothed_l1` in `r`.
pub fn smoothed_l1_grad(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a < delta {
        r / delta
    } else {
        r.signum()
    }
}

/// Anisotropic total variation of a scalar map, averaged over pixels:
/// sum of forward-difference magnitudes along both axes, divided by H*W.
pub fn tv_regularizer(f: &Array2<f64>) -> f64 {
    let (h, w) = f.dim();
    assert!(h >= 1 && w >= 1, "map must be non-empty");
    let mut acc = 0.0;
    for i in 0..h {
        for j in 0..w {
            if i + 1 < h {
                acc += (f[[i + 1, j]] - f[[i, j]]).abs();
            }
            if j + 1 < w {
                acc += (f[[i, j + 1]] - f[[i, j]]).abs();
            }
        }
    }
    acc / (h * w) as f64
}

/// Staircase TV weight: `base` decayed by `decay` every `interval`
/// iterations, and exactly zero from `off_after` onward.
pub fn tv_weight(iteration: usize, base: f64, decay: f64, interval: usize, off_after: usize) -> f64 {
    assert!(interval > 0, "decay interval must be positive");
    if iteration >= off_after {
        return 0.0;
    }
    base * decay.powi((iteration / interval) as i32)
}

/// TV value and its subgradient for a map in `T` (value kept in f64).
fn tv_value_grad<T: NdFloat>(f: &Array2<T>) -> (f64, Array2<T>) {
    let (h, w) = f.dim();
    let inv_n = 1.0 / (h * w) as f64;
    let mut value = 0.0;
    let mut grad = Array2::zeros((h, w));
    let sgn = |d: f64| -> f64 {
        if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    for i in 0..h {
        for j in 0..w {
            if i + 1 < h {
                let d = (f[[i + 1, j]] - f[[i, j]]).to_f64().unwrap();
                value += d.abs();
                let s = T::from(sgn(d) * inv_n).unwrap();
                grad[[i + 1, j]] = grad[[i + 1, j]] + s;
                grad[[i, j]] = grad[[i, j]] - s;
            }
            if j + 1 < w {
                let d = (f[[i, j + 1]] - f[[i, j]]).to_f64().unwrap();
                value += d.abs();
                let s = T::from(sgn(d) * inv_n).unwrap();
                grad[[i, j + 1]] = grad[[i, j + 1]] + s;
                grad[[i, j]] = grad[[i, j]] - s;
            }
        }
    }
    (value * inv_n, grad)
}

/// Per-view fixed adjoint images `sum_s sum_c conj(S_c) ifft2(embed d_n)`
/// and the normalization `rho` (their largest magnitude across views).
pub fn precompute_targets(
    data: &KSpaceSet,
    coils: &AnalyticCoils,
) -> Result<(Vec<ComplexImage>, f64)> {
    let (h, w) = data.shape;
    let grid = make_grid(h, w)?;
    let zero_field = Array2::zeros((h, w));
    let mut targets = Vec::with_capacity(data.views.len());
    let mut rho = 0.0f64;
    for view in &data.views {
        let rotated = rotate_coords(&grid, view.spec.angle);
        let coil_maps = coils.eval_on(&rotated);
        let t = adjoint_view(&view.data, &zero_field, &coil_maps, &view.spec)?;
        rho = rho.max(t.iter().map(|v| v.norm()).fold(0.0, f64::max));
        targets.push(t);
    }
    if rho == 0.0 || !rho.is_finite() {
        return Err(Error::DegenerateData(
            "adjoint targets are all zero or non-finite".into(),
        ));
    }
    Ok((targets, rho))
}

struct ViewState<T: FftNum> {
    op: ViewOperator<T>,
    /// Normalized adjoint image this view's prediction must match.
    target: Array2<Complex<T>>,
    /// Known field in this view's frame when the field is not optimized.
    fixed_field: Option<Array2<T>>,
}

struct AdamState<T> {
    m: ParamSet<T>,
    v: ParamSet<T>,
}

impl<T: NdFloat> AdamState<T> {
    fn new(like: &ParamSet<T>) -> Self {
        AdamState {
            m: like.zeros_like(),
            v: like.zeros_like(),
        }
    }
}

/// Fits the image network (and usually the field network) to one multi-view
/// acquisition. `T` selects the arithmetic width of the hot loop.
pub struct Trainer<T: FftNum> {
    nets: NetsConfig,
    cfg: TrainConfig,
    views: Vec<ViewState<T>>,
    image_net: NetworkParams<T>,
    field_net: Option<NetworkParams<T>>,
    adam_image: AdamState<T>,
    adam_field: Option<AdamState<T>>,
    /// One query over every view's rotated grid, concatenated, so each
    /// network runs one batched forward/backward per iteration.
    multi_query: NetQuery<T>,
    /// Query on the regular grid, for the TV penalty and final inference.
    grid_query: NetQuery<T>,
    /// Index of a view whose rotation is the identity, if any; its batched
    /// rows double as the regular grid for the TV penalty.
    zero_view: Option<usize>,
    shape: (usize, usize),
    n_views: usize,
    iteration: usize,
    loss_history: Vec<[f64; 2]>,
}

impl<T: NdFloat + FftNum> Trainer<T> {
    pub fn new(
        data: &KSpaceSet,
        coils: &AnalyticCoils,
        nets: NetsConfig,
        cfg: TrainConfig,
        field_source: FieldSource,
    ) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = data.shape;
        let grid = make_grid(h, w)?;
        if data.views.is_empty() {
            return Err(Error::Config("no views to fit".into()));
        }
        let (targets, rho) = precompute_targets(data, coils)?;

        let fixed_fields = match &field_source {
            FieldSource::Network => None,
            FieldSource::Fixed(maps) => {
                if maps.len() != data.views.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "{} fixed field maps for {} views",
                        maps.len(),
                        data.views.len()
                    )));
                }
                for f in maps {
                    if f.dim() != (h, w) {
                        return Err(Error::ShapeMismatch(format!(
                            "fixed field shape {:?}, expected {:?}",
                            f.dim(),
                            (h, w)
                        )));
                    }
                }
                Some(maps)
            }
        };

        let cast_c = |v: num_complex::Complex64| {
            Complex::new(T::from(v.re).unwrap(), T::from(v.im).unwrap())
        };
        let mut views = Vec::with_capacity(data.views.len());
        let mut all_coords = Vec::with_capacity(data.views.len() * h * w);
        for (n, view) in data.views.iter().enumerate() {
            let rotated = rotate_coords(&grid, view.spec.angle);
            let coil_maps = coils.eval_on(&rotated).maps.mapv(cast_c);
            let op = ViewOperator::new(coil_maps, &view.spec)?;
            if view.data.dim() != (coils.count(), op.segments(), w) {
                return Err(Error::ShapeMismatch(format!(
                    "view {n}: k-space {:?} does not match (coils {}, segments {}, width {})",
                    view.data.dim(),
                    coils.count(),
                    op.segments(),
                    w
                )));
            }
            let target = targets[n].mapv(|v| cast_c(v / rho));
            all_coords.extend_from_slice(rotated.coords());
            let fixed_field =
                fixed_fields.map(|maps| maps[n].mapv(|v| T::from(v).unwrap()));
            views.push(ViewState {
                op,
                target,
                fixed_field,
            });
        }
        let multi_query = NetQuery::new(&nets.hash, &all_coords);

        let image_mlp = MlpConfig {
            input: nets.hash.output_dim(),
            hidden_width: nets.hidden_width,
            hidden_layers: nets.hidden_layers,
            output: 2,
        };
        let field_mlp = MlpConfig {
            output: 1,
            ..image_mlp
        };
        let mut image_net = init_network::<T>(nets.hash, image_mlp, 1.0, cfg.seed)?;
        image_net.rho = rho;
        let field_net = match field_source {
            FieldSource::Network => Some(init_network::<T>(
                nets.hash,
                field_mlp,
                nets.b0_scale,
                cfg.seed.wrapping_add(1),
            )?),
            FieldSource::Fixed(_) => None,
        };

        let adam_image = AdamState::new(&image_net.params);
        let adam_field = field_net.as_ref().map(|n| AdamState::new(&n.params));
        let grid_query = NetQuery::new(&nets.hash, grid.coords());
        let zero_view = data
            .views
            .iter()
            .position(|v| v.spec.angle.degrees() == 0.0);
        Ok(Trainer {
            nets,
            cfg,
            views,
            image_net,
            field_net,
            adam_image,
            adam_field,
            multi_query,
            grid_query,
            zero_view,
            shape: (h, w),
            n_views: data.views.len(),
            iteration: 0,
            loss_history: Vec::with_capacity(cfg.iterations),
        })
    }

    pub fn rho(&self) -> f64 {
        self.image_net.rho
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn loss_history(&self) -> &[[f64; 2]] {
        &self.loss_history
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn nets_config(&self) -> &NetsConfig {
        &self.nets
    }

    pub fn image_net(&self) -> &NetworkParams<T> {
        &self.image_net
    }

    pub fn field_net(&self) -> Option<&NetworkParams<T>> {
        self.field_net.as_ref()
    }

    pub fn image_net_mut(&mut self) -> &mut NetworkParams<T> {
        &mut self.image_net
    }

    pub fn field_net_mut(&mut self) -> Option<&mut NetworkParams<T>> {
        self.field_net.as_mut()
    }

    /// Objective value and parameter gradients at the current iterate,
    /// without updating anything.
    pub fn loss_and_grads(&mut self) -> Result<(LossTerms, ParamSet<T>, Option<ParamSet<T>>)> {
        let (h, w) = self.shape;
        let pixels = h * w;
        let delta = self.cfg.delta;
        // mean over views, pixels, and the two real channels
        let scale = 1.0 / (self.n_views * pixels * 2) as f64;
        let lambda = tv_weight(
            self.iteration,
            self.cfg.tv_base,
            self.cfg.tv_decay,
            self.cfg.tv_interval,
            self.cfg.tv_off_after,
        );

        let mut grad_image = self.image_net.params.zeros_like();
        let mut grad_field = self.field_net.as_ref().map(|n| n.params.zeros_like());
        let mut data_term = 0.0f64;
        let mut tv_term = 0.0f64;
        let tau = std::f64::consts::TAU;
        let zero_c = Complex::new(T::zero(), T::zero());
        let cis = |ang: f64| {
            Complex::new(T::from(ang.cos()).unwrap(), T::from(ang.sin()).unwrap())
        };

        // one batched query per network over all views' rotated grids
        let (raw_img, cache_img) = self.multi_query.forward(&self.image_net);
        let field_pass = self
            .field_net
            .as_ref()
            .filter(|_| self.views.iter().any(|vs| vs.fixed_field.is_none()))
            .map(|net| self.multi_query.forward(net));
        let mut d_raw_img = Array2::zeros((self.n_views * pixels, 2));
        let mut d_raw_field = field_pass
            .as_ref()
            .map(|_| Array2::zeros((self.n_views * pixels, 1)));

        for (v, vs) in self.views.iter_mut().enumerate() {
            let off = v * pixels;
            // image network rows for this view -> complex image
            let mut m = Array2::from_elem((h, w), zero_c);
            {
                let ms = m.as_slice_mut().expect("contiguous");
                for (p, slot) in ms.iter_mut().enumerate() {
                    *slot = Complex::new(raw_img[[off + p, 0]], raw_img[[off + p, 1]]);
                }
            }

            // field in this view's frame: fixed map or the field network
            let field: Array2<T> = match (&vs.fixed_field, &field_pass, &self.field_net) {
                (Some(f), _, _) => f.clone(),
                (None, Some((raw_f, _)), Some(net)) => {
                    let s = T::from(net.out_scale).unwrap();
                    Array2::from_shape_fn((h, w), |(i, j)| raw_f[[off + i * w + j, 0]] * s)
                }
                _ => unreachable!("constructor enforces a field source"),
            };

            // forward: pred = sum_s G_s(phase_s * m), keeping u_s = phase_s * m.
            // The phase ladder exp(-i 2 pi f t_s) advances by a fixed
            // per-pixel step between echoes, so trig runs once per view.
            let segs = vs.op.segments();
            let te = vs.op.time(0);
            let mut phase = field.mapv(|f| cis(-tau * te * f.to_f64().unwrap()));
            let step = (segs > 1).then(|| {
                let esp = vs.op.time(1) - vs.op.time(0);
                field.mapv(|f| cis(-tau * esp * f.to_f64().unwrap()))
            });
            let mut pred = Array2::from_elem((h, w), zero_c);
            let mut u_cache = Vec::with_capacity(segs);
            for s in 0..segs {
                let u = &phase * &m;
                vs.op.normal_segment_into(&u, s, &mut pred);
                let this_phase = if s + 1 < segs {
                    let next = &phase * step.as_ref().unwrap();
                    std::mem::replace(&mut phase, next)
                } else {
                    phase.clone()
                };
                u_cache.push((this_phase, u));
            }

            // smoothed-L1 residual and its gradient w.r.t. pred
            let mut g_pred = Array2::from_elem((h, w), zero_c);
            for ((gp, &t), &p) in g_pred.iter_mut().zip(vs.target.iter()).zip(pred.iter()) {
                let r = t - p;
                let (rr, ri) = (r.re.to_f64().unwrap(), r.im.to_f64().unwrap());
                data_term += scale * (smoothed_l1(rr, delta) + smoothed_l1(ri, delta));
                // d loss / d pred = -scale * sl1'(residual), channelwise
                *gp = Complex::new(
                    T::from(-scale * smoothed_l1_grad(rr, delta)).unwrap(),
                    T::from(-scale * smoothed_l1_grad(ri, delta)).unwrap(),
                );
            }

            // backward through the segments: G_s is self-adjoint
            let mut g_m = Array2::from_elem((h, w), zero_c);
            let mut g_u = Array2::from_elem((h, w), zero_c);
            let mut g_field: Option<Array2<T>> =
                d_raw_field.as_ref().map(|_| Array2::zeros((h, w)));
            for (s, (ph, u)) in u_cache.iter().enumerate() {
                g_u.fill(zero_c);
                vs.op.normal_segment_into(&g_pred, s, &mut g_u);
                for ((gm, &p), &gu) in g_m.iter_mut().zip(ph.iter()).zip(g_u.iter()) {
                    *gm = *gm + p.conj() * gu;
                }
                if let Some(gf) = g_field.as_mut() {
                    let t2pi = T::from(tau * vs.op.time(s)).unwrap();
                    for ((g, &gu), &uu) in gf.iter_mut().zip(g_u.iter()).zip(u.iter()) {
                        // d/df of exp(-i 2 pi f t): phase sensitivity
                        let im = (gu.conj() * uu).im;
                        *g = *g + t2pi * im;
                    }
                }
            }

            // stage this view's rows of the batched backward inputs
            for (p, &g) in g_m.iter().enumerate() {
                d_raw_img[[off + p, 0]] = g.re;
                d_raw_img[[off + p, 1]] = g.im;
            }
            if let (Some(gf), Some(d_raw), Some(net)) =
                (g_field, d_raw_field.as_mut(), self.field_net.as_ref())
            {
                let s = T::from(net.out_scale).unwrap();
                for (p, &g) in gf.iter().enumerate() {
                    d_raw[[off + p, 0]] = g * s;
                }
            }
        }

        // total-variation penalty on the field over the regular grid. When a
        // view sits at 0 degrees its batched rows are that grid, so the
        // penalty rides on the batched backward; otherwise it gets its own
        // pass through `grid_query`.
        let mut tv_extra: Option<(Array2<T>, MlpCache<T>)> = None;
        if lambda > 0.0 {
            if let (Some((raw_f, _)), Some(net)) = (&field_pass, self.field_net.as_ref()) {
                let s = T::from(net.out_scale).unwrap();
                let lam = T::from(lambda).unwrap();
                let (fmap, off) = match self.zero_view {
                    Some(v0) => {
                        let off = v0 * pixels;
                        let f = Array2::from_shape_fn((h, w), |(i, j)| {
                            raw_f[[off + i * w + j, 0]] * s
                        });
                        (f, Some(off))
                    }
                    None => {
                        let (raw_g, cache) = self.grid_query.forward(net);
                        let f = Array2::from_shape_fn((h, w), |(i, j)| {
                            raw_g[[i * w + j, 0]] * s
                        });
                        tv_extra = Some((Array2::zeros((pixels, 1)), cache));
                        (f, None)
                    }
                };
                let (tv, tv_grad) = tv_value_grad(&fmap);
                tv_term = lambda * tv;
                match (off, d_raw_field.as_mut(), tv_extra.as_mut()) {
                    (Some(off), Some(d_raw), _) => {
                        for (p, &g) in tv_grad.iter().enumerate() {
                            d_raw[[off + p, 0]] = d_raw[[off + p, 0]] + lam * g * s;
                        }
                    }
                    (None, _, Some((d_raw, _))) => {
                        for (p, &g) in tv_grad.iter().enumerate() {
                            d_raw[[p, 0]] = lam * g * s;
                        }
                    }
                    _ => unreachable!("one of the two TV routes is prepared"),
                }
            }
        }

        self.multi_query
            .backward(&self.image_net, &cache_img, &d_raw_img, &mut grad_image);
        if let (Some((_, cache)), Some(d_raw), Some(net), Some(acc)) = (
            field_pass,
            d_raw_field,
            self.field_net.as_ref(),
            grad_field.as_mut(),
        ) {
            self.multi_query.backward(net, &cache, &d_raw, acc);
        }
        if let (Some((d_raw, cache)), Some(net), Some(acc)) =
            (tv_extra, self.field_net.as_ref(), grad_field.as_mut())
        {
            self.grid_query.backward(net, &cache, &d_raw, acc);
        }

        let terms = LossTerms {
            data: data_term,
            tv: tv_term,
        };
        if !terms.total().is_finite() {
            return Err(Error::Divergence {
                iteration: self.iteration,
            });
        }
        Ok((terms, grad_image, grad_field))
    }

    /// One optimization step; returns the objective value before the update.
    pub fn loss_step(&mut self) -> Result<f64> {
        let (terms, grad_image, grad_field) = self.loss_and_grads()?;
        let t = self.iteration + 1;
        adam_update(
            &mut self.image_net.params,
            &grad_image,
            &mut self.adam_image,
            &self.cfg,
            t,
        );
        if let (Some(net), Some(grads), Some(state)) = (
            self.field_net.as_mut(),
            grad_field.as_ref(),
            self.adam_field.as_mut(),
        ) {
            adam_update(&mut net.params, grads, state, &self.cfg, t);
        }
        self.iteration = t;
        self.loss_history.push([terms.data, terms.tv]);
        Ok(terms.total())
    }

    /// Runs the configured number of iterations.
    pub fn fit(&mut self) -> Result<FitReport> {
        self.fit_with_callback(|_, _, _| true)
    }

    /// Runs iterations until the budget is exhausted or the callback returns
    /// false (inspected after every step).
    pub fn fit_with_callback(
        &mut self,
        mut keep_going: impl FnMut(&Self, usize, f64) -> bool,
    ) -> Result<FitReport> {
        let mut stopped_early = false;
        let mut last = f64::NAN;
        let start = self.iteration;
        while self.iteration < self.cfg.iterations {
            last = self.loss_step()?;
            if !keep_going(self, self.iteration, last) {
                stopped_early = self.iteration < self.cfg.iterations;
                break;
            }
        }
        Ok(FitReport {
            loss_history: self.loss_history.clone(),
            iterations_run: self.iteration - start,
            final_loss: last,
            stopped_early,
        })
    }

    /// Final inference on the regular grid: de-normalized image and, when a
    /// field network was fitted, the off-resonance map in Hz.
    pub fn infer(&self) -> (ComplexImage, Option<FieldMap>) {
        let (h, w) = self.shape;
        let (raw_img, _) = self.grid_query.forward(&self.image_net);
        let rho = self.image_net.rho;
        let image = Array2::from_shape_fn((h, w), |(i, j)| {
            let p = i * w + j;
            num_complex::Complex64::new(
                raw_img[[p, 0]].to_f64().unwrap(),
                raw_img[[p, 1]].to_f64().unwrap(),
            ) * rho
        });
        let field = self.field_net.as_ref().map(|net| {
            let (raw_f, _) = self.grid_query.forward(net);
            Array2::from_shape_fn((h, w), |(i, j)| {
                raw_f[[i * w + j, 0]].to_f64().unwrap() * net.out_scale
            })
        });
        (image, field)
    }
}

/// Decoupled-weight-decay Adam step; decay touches dense weights only.
fn adam_update<T: NdFloat>(
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    t: usize,
) {
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    let lr = T::from(cfg.lr).unwrap();
    let b1t = T::from(b1).unwrap();
    let b2t = T::from(b2).unwrap();
    let one_m_b1 = T::from(1.0 - b1).unwrap();
    let one_m_b2 = T::from(1.0 - b2).unwrap();
    let inv_bc1 = T::from(1.0 / bc1).unwrap();
    let inv_bc2 = T::from(1.0 / bc2).unwrap();
    let eps = T::from(cfg.eps).unwrap();
    let decay = T::from(cfg.lr * cfg.weight_decay).unwrap();

    let walk = |p: &mut T, g: T, m: &mut T, v: &mut T, decayed: bool| {
        *m = b1t * *m + one_m_b1 * g;
        *v = b2t * *v + one_m_b2 * g * g;
        let mhat = *m * inv_bc1;
        let vhat = *v * inv_bc2;
        let mut next = *p - lr * mhat / (vhat.sqrt() + eps);
        if decayed {
            next = next - decay * *p;
        }
        *p = next;
    };

    for ((p, &g), (m, v)) in params
        .table
        .iter_mut()
        .zip(&grads.table)
        .zip(state.m.table.iter_mut().zip(state.v.table.iter_mut()))
    {
        walk(p, g, m, v, false);
    }
    for (k, (pw, gw)) in params.weights.iter_mut().zip(&grads.weights).enumerate() {
        for ((p, &g), (m, v)) in pw
            .iter_mut()
            .zip(gw.iter())
            .zip(state.m.weights[k].iter_mut().zip(state.v.weights[k].iter_mut()))
        {
            walk(p, g, m, v, true);
        }
    }
    for (k, (pb, gb)) in params.biases.iter_mut().zip(&grads.biases).enumerate() {
        for ((p, &g), (m, v)) in pb
            .iter_mut()
            .zip(gb.iter())
            .zip(state.m.biases[k].iter_mut().zip(state.v.biases[k].iter_mut()))
        {
            walk(p, g, m, v, false);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn smoothed_l1_examples() {
        assert_eq!(smoothed_l1(0.0, 1.0), 0.0);
        assert_eq!(smoothed_l1(0.5, 1.0), 0.125);
        assert_eq!(smoothed_l1(-0.5, 1.0), 0.125);
        assert_eq!(smoothed_l1(1.0, 1.0), 0.5);
        assert_eq!(smoothed_l1(2.0, 1.0), 1.5);
        assert_eq!(smoothed_l1(-3.0, 1.0), 2.5);
    }

    #[test]
    fn smoothed_l1_is_continuous_at_delta() {
        let delta = 0.7;
        let below = smoothed_l1(delta - 1e-9, delta);
        let above = smoothed_l1(delta + 1e-9, delta);
        assert!((below - above).abs() < 1e-8);
        let gb = smoothed_l1_grad(delta - 1e-9, delta);
        let ga = smoothed_l1_grad(delta + 1e-9, delta);
        assert!((gb - ga).abs() < 1e-8);
    }

    #[test]
    fn smoothed_l1_grad_matches_finite_difference() {
        let delta = 1.0;
        for &r in &[-2.5, -0.9, -0.1, 0.2, 0.8, 3.0] {
            let eps = 1e-6;
            let fd = (smoothed_l1(r + eps, delta) - smoothed_l1(r - eps, delta)) / (2.0 * eps);
            assert!((fd - smoothed_l1_grad(r, delta)).abs() < 1e-6, "r={r}");
        }
    }

    #[test]
    fn tv_of_constant_map_is_zero() {
        let f = Array2::from_elem((5, 7), 3.25);
        assert_eq!(tv_regularizer(&f), 0.0);
    }

    #[test]
    fn tv_of_single_step() {
        // one horizontal step of height 2 in a 1x2 map: |2| / 2 pixels
        let f = array![[0.0, 2.0]];
        assert_eq!(tv_regularizer(&f), 1.0);
    }

    #[test]
    fn tv_of_ramp() {
        // ramp 0,1,2,3 along one row: |1|*3 / 4
        let f = array![[0.0, 1.0, 2.0, 3.0]];
        assert_eq!(tv_regularizer(&f), 0.75);
    }

    #[test]
    fn tv_counts_both_axes() {
        let f = array![[0.0, 1.0], [1.0, 0.0]];
        // four unit differences / 4 pixels
        assert_eq!(tv_regularizer(&f), 1.0);
    }

    #[test]
    fn tv_weight_schedule() {
        let w = |i| tv_weight(i, 1e-5, 0.1, 1000, 5000);
        assert_eq!(w(0), 1e-5);
        assert_eq!(w(999), 1e-5);
        assert!((w(1000) - 1e-6).abs() < 1e-18);
        assert!((w(2500) - 1e-7).abs() < 1e-19);
        assert!((w(4999) - 1e-9).abs() < 1e-21);
        assert_eq!(w(5000), 0.0);
        assert_eq!(w(6000), 0.0);
    }

    #[test]
    fn tv_weight_monotone_nonincreasing() {
        let mut prev = f64::INFINITY;
        for i in 0..7000 {
            let w = tv_weight(i, 1e-5, 0.1, 1000, 5000);
            assert!(w <= prev);
            prev = w;
        }
    }

    #[test]
    fn tv_grad_matches_finite_difference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut f: Array2<f64> = Array2::from_shape_fn((5, 4), |_| rng.gen_range(-2.0..2.0));
        let (_, grad) = tv_value_grad(&f);
        let eps = 1e-6;
        for idx in [(0, 0), (2, 2), (4, 3), (1, 0)] {
            let orig = f[idx];
            f[idx] = orig + eps;
            let up = tv_regularizer(&f);
            f[idx] = orig - eps;
            let down = tv_regularizer(&f);
            f[idx] = orig;
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - grad[idx]).abs() < 1e-6, "{idx:?}: fd={fd} an={}", grad[idx]);
        }
    }

    use crate::encode::simulate_views;
    use crate::geometry::RotationAngle;
    use crate::phantom::{AnalyticField, AnalyticPhantom, GaussianBump, Scene};

    fn tiny_scene() -> Scene {
        Scene {
            phantom: AnalyticPhantom::head(),
            field: AnalyticField {
                poly_hz: [10.0, 25.0, -20.0, 30.0, 0.0, -15.0],
                bumps: vec![GaussianBump {
                    center: [0.1, -0.05],
                    sigma: 0.12,
                    amplitude_hz: 60.0,
                }],
                max_abs_hz: 500.0,
            },
            coils: AnalyticCoils::ring(2, 11).unwrap(),
        }
    }

    fn tiny_specs(n: usize, accel: usize) -> Vec<crate::encode::ViewSpec> {
        (0..n)
            .map(|k| crate::encode::ViewSpec {
                angle: RotationAngle::from_degrees(360.0 * k as f64 / n as f64),
                accel,
                line_offset: 0,
                esp_s: 0.5e-3,
                te_first_s: 1.0e-3,
            })
            .collect()
    }

    fn tiny_nets() -> NetsConfig {
        NetsConfig {
            hash: HashGridConfig {
                levels: 2,
                features: 2,
                log2_table: 8,
                base_resolution: 4,
                growth: 2.0,
            },
            hidden_width: 8,
            hidden_layers: 2,
            b0_scale: 100.0,
        }
    }

    #[test]
    fn full_loss_gradient_matches_finite_difference() {
        let data = simulate_views(&tiny_scene(), 8, 8, &tiny_specs(1, 2), None, 1).unwrap();
        let cfg = TrainConfig {
            seed: 3,
            ..Default::default()
        };
        let mut tr = Trainer::<f64>::new(
            &data,
            &tiny_scene().coils,
            tiny_nets(),
            cfg,
            FieldSource::Network,
        )
        .unwrap();
        // make both networks produce order-one outputs so every path is live
        {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
            for v in tr.image_net_mut().params.table.iter_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
            for v in tr.field_net_mut().unwrap().params.table.iter_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
        let (_, gi, gf) = tr.loss_and_grads().unwrap();
        let gf = gf.unwrap();

        let eps = 1e-5;
        let mut checked = 0usize;
        let mut check = |tr: &mut Trainer<f64>, which: char, slot: usize, analytic: f64| {
            let read = |tr: &mut Trainer<f64>| -> f64 { tr.loss_and_grads().unwrap().0.total() };
            let bump = |tr: &mut Trainer<f64>, d: f64| match which {
                'i' => tr.image_net_mut().params.table[slot] += d,
                'w' => {
                    let w = &mut tr.image_net_mut().params.weights[0];
                    let c = w.ncols();
                    w[[slot / c, slot % c]] += d;
                }
                'f' => tr.field_net_mut().unwrap().params.table[slot] += d,
                'v' => {
                    let w = &mut tr.field_net_mut().unwrap().params.weights[1];
                    let c = w.ncols();
                    w[[slot / c, slot % c]] += d;
                }
                'b' => tr.field_net_mut().unwrap().params.biases[2][slot] += d,
                _ => unreachable!(),
            };
            bump(tr, eps);
            let up = read(tr);
            bump(tr, -2.0 * eps);
            let down = read(tr);
            bump(tr, eps);
            let fd = (up - down) / (2.0 * eps);
            let denom = fd.abs().max(analytic.abs()).max(1e-10);
            assert!(
                ((fd - analytic) / denom).abs() < 1e-4,
                "{which}[{slot}]: fd={fd:e} analytic={analytic:e}"
            );
            checked += 1;
        };

        for slot in (0..gi.table.len()).step_by(13).take(8) {
            let g = gi.table[slot];
            check(&mut tr, 'i', slot, g);
        }
        for slot in (0..gf.table.len()).step_by(17).take(8) {
            let g = gf.table[slot];
            check(&mut tr, 'f', slot, g);
        }
        for slot in (0..gi.weights[0].len()).step_by(7).take(6) {
            let c = gi.weights[0].ncols();
            let g = gi.weights[0][[slot / c, slot % c]];
            check(&mut tr, 'w', slot, g);
        }
        for slot in (0..gf.weights[1].len()).step_by(11).take(6) {
            let c = gf.weights[1].ncols();
            let g = gf.weights[1][[slot / c, slot % c]];
            check(&mut tr, 'v', slot, g);
        }
        check(&mut tr, 'b', 0, gf.biases[2][0]);
        assert!(checked >= 25, "exercised {checked} parameters");
    }

    #[test]
    fn field_gradient_without_identity_view_matches_finite_difference() {
        // no 0-degree view, so the TV penalty takes its own grid pass
        let spec = crate::encode::ViewSpec {
            angle: RotationAngle::from_degrees(45.0),
            accel: 2,
            line_offset: 0,
            esp_s: 0.5e-3,
            te_first_s: 1.0e-3,
        };
        let data = simulate_views(&tiny_scene(), 8, 8, &[spec], None, 1).unwrap();
        let cfg = TrainConfig {
            seed: 3,
            ..Default::default()
        };
        let mut tr = Trainer::<f64>::new(
            &data,
            &tiny_scene().coils,
            tiny_nets(),
            cfg,
            FieldSource::Network,
        )
        .unwrap();
        {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
            for v in tr.field_net_mut().unwrap().params.table.iter_mut() {
                *v = rng.gen_range(-0.3..0.3);
            }
        }
        let (_, _, gf) = tr.loss_and_grads().unwrap();
        let gf = gf.unwrap();
        let eps = 1e-5;
        let mut checked = 0usize;
        for slot in (0..gf.table.len()).step_by(17).take(8) {
            let analytic = gf.table[slot];
            tr.field_net_mut().unwrap().params.table[slot] += eps;
            let up = tr.loss_and_grads().unwrap().0.total();
            tr.field_net_mut().unwrap().params.table[slot] -= 2.0 * eps;
            let down = tr.loss_and_grads().unwrap().0.total();
            tr.field_net_mut().unwrap().params.table[slot] += eps;
            let fd = (up - down) / (2.0 * eps);
            let denom = fd.abs().max(analytic.abs()).max(1e-10);
            assert!(
                ((fd - analytic) / denom).abs() < 1e-4,
                "f[{slot}]: fd={fd:e} analytic={analytic:e}"
            );
            checked += 1;
        }
        assert!(checked >= 5, "exercised {checked} parameters");
    }

    #[test]
    fn fit_reduces_loss() {
        let data = simulate_views(&tiny_scene(), 12, 12, &tiny_specs(2, 2), None, 2).unwrap();
        let cfg = TrainConfig {
            iterations: 60,
            seed: 5,
            ..Default::default()
        };
        let mut tr = Trainer::<f64>::new(
            &data,
            &tiny_scene().coils,
            tiny_nets(),
            cfg,
            FieldSource::Network,
        )
        .unwrap();
        let report = tr.fit().unwrap();
        assert_eq!(report.iterations_run, 60);
        assert!(!report.stopped_early);
        assert!(report
            .loss_history
            .iter()
            .all(|[d, t]| d.is_finite() && t.is_finite()));
        let start: f64 = report.loss_history[0].iter().sum();
        assert!(
            report.final_loss < 0.5 * start,
            "start={} end={}",
            start,
            report.final_loss
        );
        let (img, field) = tr.infer();
        assert_eq!(img.dim(), (12, 12));
        assert_eq!(field.unwrap().dim(), (12, 12));
    }

    #[test]
    fn fixed_field_mode_skips_field_network() {
        let scene = tiny_scene();
        let data = simulate_views(&scene, 12, 12, &tiny_specs(1, 1), None, 3).unwrap();
        let grid = make_grid(12, 12).unwrap();
        let rotated = rotate_coords(&grid, data.views[0].spec.angle);
        let truth_field = crate::phantom::make_b0(&scene.field, &rotated).unwrap();
        let cfg = TrainConfig {
            iterations: 150,
            seed: 4,
            ..Default::default()
        };
        let mut tr = Trainer::<f64>::new(
            &data,
            &scene.coils,
            tiny_nets(),
            cfg,
            FieldSource::Fixed(vec![truth_field]),
        )
        .unwrap();
        assert!(tr.field_net().is_none());
        let report = tr.fit().unwrap();
        let start: f64 = report.loss_history[0].iter().sum();
        assert!(report.final_loss < 0.1 * start);
        let (_, field) = tr.infer();
        assert!(field.is_none());
    }

    #[test]
    fn early_stop_callback_halts_fit() {
        let data = simulate_views(&tiny_scene(), 8, 8, &tiny_specs(1, 2), None, 6).unwrap();
        let cfg = TrainConfig {
            iterations: 500,
            seed: 6,
            ..Default::default()
        };
        let mut tr = Trainer::<f64>::new(
            &data,
            &tiny_scene().coils,
            tiny_nets(),
            cfg,
            FieldSource::Network,
        )
        .unwrap();
        let report = tr.fit_with_callback(|_, i, _| i < 20).unwrap();
        assert_eq!(report.iterations_run, 20);
        assert!(report.stopped_early);
    }

    #[test]
    fn training_is_deterministic() {
        let data = simulate_views(&tiny_scene(), 8, 8, &tiny_specs(2, 2), Some(30.0), 7).unwrap();
        let run = || {
            let cfg = TrainConfig {
                iterations: 10,
                seed: 7,
                ..Default::default()
            };
            let mut tr = Trainer::<f64>::new(
                &data,
                &tiny_scene().coils,
                tiny_nets(),
                cfg,
                FieldSource::Network,
            )
            .unwrap();
            tr.fit().unwrap();
            (tr.loss_history().to_vec(), tr.infer())
        };
        let (la, (ia, fa)) = run();
        let (lb, (ib, fb)) = run();
        assert_eq!(la, lb);
        assert_eq!(ia, ib);
        assert_eq!(fa.unwrap(), fb.unwrap());
    }

    #[test]
    fn non_finite_loss_reports_divergence() {
        let data = simulate_views(&tiny_scene(), 8, 8, &tiny_specs(1, 2), None, 8).unwrap();
        let mut tr = Trainer::<f64>::new(
            &data,
            &tiny_scene().coils,
            tiny_nets(),
            TrainConfig::default(),
            FieldSource::Network,
        )
        .unwrap();
        // poison the image output bias; hidden-layer ReLUs would absorb a
        // NaN planted earlier (max against zero drops it)
        let last = tr.image_net().params.biases.len() - 1;
        tr.image_net_mut().params.biases[last][0] = f64::NAN;
        assert!(matches!(
            tr.loss_step(),
            Err(Error::Divergence { iteration: 0 })
        ));
    }

    #[test]
    fn invalid_train_config_rejected() {
        let data = simulate_views(&tiny_scene(), 8, 8, &tiny_specs(1, 2), None, 9).unwrap();
        for cfg in [
            TrainConfig {
                iterations: 0,
                ..Default::default()
            },
            TrainConfig {
                lr: 0.0,
                ..Default::default()
            },
            TrainConfig {
                betas: (1.0, 0.999),
                ..Default::default()
            },
            TrainConfig {
                tv_interval: 0,
                ..Default::default()
            },
        ] {
            assert!(Trainer::<f64>::new(
                &data,
                &tiny_scene().coils,
                tiny_nets(),
                cfg,
                FieldSource::Network,
            )
            .is_err());
        }
    }

    #[test]
    fn fixed_field_shape_mismatch_rejected() {
        let data = simulate_views(&tiny_scene(), 8, 8, &tiny_specs(2, 2), None, 10).unwrap();
        let wrong_count = FieldSource::Fixed(vec![Array2::zeros((8, 8))]);
        assert!(Trainer::<f64>::new(
            &data,
            &tiny_scene().coils,
            tiny_nets(),
            TrainConfig::default(),
            wrong_count,
        )
        .is_err());
        let wrong_shape =
            FieldSource::Fixed(vec![Array2::zeros((4, 4)), Array2::zeros((4, 4))]);
        assert!(Trainer::<f64>::new(
            &data,
            &tiny_scene().coils,
            tiny_nets(),
            TrainConfig::default(),
            wrong_shape,
        )
        .is_err());
    }

    #[test]
    fn single_precision_trainer_runs() {
        let data = simulate_views(&tiny_scene(), 8, 8, &tiny_specs(1, 2), None, 12).unwrap();
        let cfg = TrainConfig {
            iterations: 30,
            seed: 12,
            ..Default::default()
        };
        let mut tr = Trainer::<f32>::new(
            &data,
            &tiny_scene().coils,
            tiny_nets(),
            cfg,
            FieldSource::Network,
        )
        .unwrap();
        let report = tr.fit().unwrap();
        assert!(report.final_loss.is_finite());
        let start: f64 = report.loss_history[0].iter().sum();
        assert!(report.final_loss < start);
    }
}

