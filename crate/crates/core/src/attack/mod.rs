//! Perturbation crafting against watermark decoders: white-box, black-box
//! transfer through a surrogate, cross-resolution adaptation, budget
//! escalation and success adjudication.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{Image, Seed, Shape, Watermark};
use crate::error::{shape_mismatch, Error, Result};
use crate::metrics::{self, MetricRecord};
use crate::nn::{Adam, AdamConfig, Graph, Scalar, Tensor, Var};
use crate::wmnet::{
    check_watermark, decode_bits, resize_map, DifferentiableDecoder, Pipeline, WatermarkEstimate, WatermarkSpec,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Mse,
    L1,
}

/// Which crafting objective to minimise. `l` is the configured distance
/// between decoder probabilities and a watermark; bit logits are scaled by
/// `1 / logit_temperature` first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// `l(γ, β) − l(γ, α)`, both terms depending on δ.
    WhiteboxFull,
    /// `l(β, γ) − l(β, α)`; the second term is constant.
    AlgorithmLiteral,
    /// `l(γ, β)` only.
    Blackbox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Escalation {
    pub epsilon_max: f64,
    /// Number of budgets tried, base included.
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuccessPolicy {
    /// Bit kinds: removal iff BER to α reaches this.
    pub removal_threshold: f64,
    /// Image kinds: success needs perceptual distance to β below this ...
    pub image_success_threshold: f64,
    /// ... and cosine similarity to β at least this.
    pub image_success_cosine: f64,
    /// Image kinds: removal iff cosine similarity to α falls below this.
    pub image_removal_cosine: f64,
    pub pyramid_seed: u64,
}

impl Default for SuccessPolicy {
    fn default() -> Self {
        Self {
            removal_threshold: 0.25,
            image_success_threshold: 0.1,
            image_success_cosine: 0.9,
            image_removal_cosine: 0.5,
            pyramid_seed: crate::wmnet::DEFAULT_PYRAMID_SEED,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub learning_rate: f64,
    pub max_iter: usize,
    pub loss: LossKind,
    pub objective: Objective,
    pub escalation: Option<Escalation>,
    pub clamp_pixels: bool,
    pub quantize_before_verify: bool,
    /// Early-exit check cadence in iterations; 0 disables early exit.
    pub check_every: usize,
    /// Bit kinds: the crafting decoder must clear every logit by at least
    /// this much before the loop stops early. 0 stops at the first match.
    pub confidence_margin: f64,
    /// Bit kinds: logits are divided by this before the sigmoid, so
    /// confidently decoded bits keep a usable gradient.
    pub logit_temperature: f64,
    pub policy: SuccessPolicy,
    pub seed: Seed,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            learning_rate: 0.001,
            max_iter: 5000,
            loss: LossKind::Mse,
            objective: Objective::WhiteboxFull,
            escalation: None,
            clamp_pixels: true,
            quantize_before_verify: false,
            check_every: 1,
            confidence_margin: 0.0,
            logit_temperature: 10.0,
            policy: SuccessPolicy::default(),
            seed: Seed(0),
        }
    }
}

/// Budgets from Table-style presets.
pub const EPSILON_PRESETS: [f64; 4] = [0.002, 0.008, 0.02, 0.1];

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument("epsilon must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive".into(),
            ));
        }
        if self.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        if !(self.logit_temperature > 0.0 && self.logit_temperature.is_finite()) {
            return Err(Error::InvalidArgument(
                "logit_temperature must be positive".into(),
            ));
        }
        if !(self.confidence_margin >= 0.0 && self.confidence_margin.is_finite()) {
            return Err(Error::InvalidArgument(
                "confidence_margin must be non-negative".into(),
            ));
        }
        if let Some(e) = &self.escalation {
            if !(e.epsilon_max >= self.epsilon && e.epsilon_max.is_finite()) {
                return Err(Error::InvalidArgument(
                    "escalation epsilon_max must be at least epsilon".into(),
                ));
            }
            if e.steps == 0 || (e.steps == 1 && e.epsilon_max != self.epsilon) {
                return Err(Error::InvalidArgument(
                    "escalation needs at least 2 steps to reach epsilon_max".into(),
                ));
            }
        }
        Ok(())
    }

    /// Budgets tried in order: geometric from `epsilon`, ending exactly at
    /// `epsilon_max`.
    pub fn budgets(&self) -> Vec<f64> {
        match &self.escalation {
            None => vec![self.epsilon],
            Some(e) if e.steps <= 1 => vec![self.epsilon],
            Some(e) => {
                let r = (e.epsilon_max / self.epsilon).powf(1.0 / (e.steps - 1) as f64);
                let mut v: Vec<f64> = (0..e.steps)
                    .map(|i| self.epsilon * r.powi(i as i32))
                    .collect();
                v[0] = self.epsilon;
                v[e.steps - 1] = e.epsilon_max;
                v
            }
        }
    }
}

/// Additive perturbation in the host image layout (HWC).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub shape: Shape,
    pub delta: Vec<f64>,
}

impl Perturbation {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            delta: vec![0.0; shape.0 * shape.1 * shape.2],
        }
    }

    pub fn linf(&self) -> f64 {
        self.delta.iter().fold(0.0, |m, d| m.max(d.abs()))
    }

    /// `clamp(W + δ, 0, 1)`.
    pub fn apply(&self, w: &Image) -> Result<Image> {
        if w.shape() != self.shape {
            return Err(shape_mismatch(
                format!("{:?}", self.shape),
                format!("{:?}", w.shape()),
            ));
        }
        let (h, wd, c) = self.shape;
        let px = w
            .pixels()
            .iter()
            .zip(&self.delta)
            .map(|(&p, &d)| (p as f64 + d).clamp(0.0, 1.0) as f32)
            .collect();
        Image::from_clamped(h, wd, c, px)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CraftOutcome {
    pub delta: Perturbation,
    pub loss_trace: Vec<f64>,
    pub iterations: usize,
    /// Whether the crafting decoder decoded β at exit.
    pub reached_target: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub id: String,
    pub attacked: Image,
    pub delta: Perturbation,
    pub extracted: Watermark,
    pub success: bool,
    pub removal: bool,
    /// Gradient steps summed over every escalation attempt.
    pub iterations_used: usize,
    pub attempts: usize,
    pub loss_trace: Vec<f64>,
    pub metrics: MetricRecord,
    pub epsilon_used: f64,
    /// Bit kinds: BER of the extraction against the original watermark.
    pub ber_alpha: Option<f64>,
    /// Black-box runs: whether the surrogate was fooled.
    pub surrogate_success: Option<bool>,
}

fn image_tensor_hwc_to_nchw(shape: Shape, hwc: &[f64]) -> Vec<f64> {
    let (h, w, c) = shape;
    let mut out = vec![0.0; hwc.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(ch * h + y) * w + x] = hwc[(y * w + x) * c + ch];
            }
        }
    }
    out
}

fn nchw_to_hwc(shape: Shape, nchw: &[f64]) -> Vec<f64> {
    let (h, w, c) = shape;
    let mut out = vec![0.0; nchw.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(y * w + x) * c + ch] = nchw[(ch * h + y) * w + x];
            }
        }
    }
    out
}

/// Distance between decoder probabilities `p` and fixed targets, as a
/// graph node.
fn distance<T: Scalar>(g: &mut Graph<T>, p: Var, target: &[f64], loss: LossKind) -> Var {
    let shape = g.shape(p);
    let t = g.constant(Tensor::from_vec(
        shape,
        target.iter().map(|&v| T::from_f64_lossy(v)).collect(),
    ));
    match loss {
        LossKind::Mse => g.mse(p, t),
        LossKind::L1 => {
            let d = g.sub(p, t);
            // |d| = d·sign(d) with the sign held constant.
            let sign = g.value(d).map(|v| {
                if v > T::zero() {
                    T::one()
                } else if v < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            });
            let sv = g.constant(sign);
            let a = g.mul(d, sv);
            g.mean(a)
        }
    }
}

fn scalar_distance(p: &[f64], t: &[f64], loss: LossKind) -> f64 {
    let n = p.len() as f64;
    match loss {
        LossKind::Mse => p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n,
        LossKind::L1 => p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / n,
    }
}

/// Objective value, decoder logits, and gradient with respect to δ (HWC)
/// at the current δ.
pub fn objective_and_gradient<T: Scalar, D: DifferentiableDecoder<T> + ?Sized>(
    decoder: &D,
    w: &Image,
    delta: &Perturbation,
    alpha: Option<&Watermark>,
    beta: &Watermark,
    cfg: &AttackConfig,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let shape = w.shape();
    let (h, wd, c) = shape;
    let host: Vec<f64> = w
        .pixels()
        .iter()
        .zip(&delta.delta)
        .map(|(&p, &d)| p as f64 + d)
        .collect();
    let x = Tensor::from_vec(
        [1, c, h, wd],
        image_tensor_hwc_to_nchw(shape, &host)
            .into_iter()
            .map(T::from_f64_lossy)
            .collect(),
    );
    let mut g = Graph::<T>::new();
    let xv = g.input(x);
    let xin = if cfg.clamp_pixels {
        g.clamp(xv, T::zero(), T::one())
    } else {
        xv
    };
    let logits = decoder.logits(&mut g, xin);
    let probs = if matches!(beta, Watermark::Bits(_)) {
        let z = g.scale(logits, T::from_f64_lossy(1.0 / cfg.logit_temperature));
        g.sigmoid(z)
    } else {
        g.sigmoid(logits)
    };
    let beta_t = beta.target_values();
    let need_alpha = || {
        alpha.map(|a| a.target_values()).ok_or_else(|| {
            Error::InvalidArgument("objective needs the original watermark α".into())
        })
    };
    let obj = match cfg.objective {
        Objective::Blackbox => distance(&mut g, probs, &beta_t, cfg.loss),
        Objective::WhiteboxFull => {
            let a = need_alpha()?;
            let lb = distance(&mut g, probs, &beta_t, cfg.loss);
            let la = distance(&mut g, probs, &a, cfg.loss);
            g.sub(lb, la)
        }
        Objective::AlgorithmLiteral => {
            let a = need_alpha()?;
            let lb = distance(&mut g, probs, &beta_t, cfg.loss);
            let k = scalar_distance(&beta_t, &a, cfg.loss);
            let kc = g.constant(Tensor::scalar(T::from_f64_lossy(k)));
            g.sub(lb, kc)
        }
    };
    let value = g.value(obj).value().as_f64();
    let logit_vals: Vec<f64> = g.value(logits).data().iter().map(|v| v.as_f64()).collect();
    let grads = g.backward(obj);
    let gx: Vec<f64> = match grads.get(xv) {
        Some(t) => t.data().iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; h * wd * c],
    };
    Ok((value, logit_vals, nchw_to_hwc(shape, &gx)))
}

fn reached(
    spec: &WatermarkSpec,
    logits: &[f64],
    beta: &Watermark,
    cfg: &AttackConfig,
) -> Result<bool> {
    let est = WatermarkEstimate::new(*spec, logits.to_vec())?;
    match spec {
        WatermarkSpec::Bits { .. } => {
            let b = beta.bits().expect("checked kind").bits();
            Ok(logits.iter().zip(b).all(|(&z, &bit)| {
                if bit {
                    z > cfg.confidence_margin
                } else {
                    z <= -cfg.confidence_margin
                }
            }) && decode_bits(&est)?.bits() == beta.bits())
        }
        WatermarkSpec::Image { .. } => {
            let im = est.to_image()?;
            let ok = image_success(&Watermark::Image(im), beta, &cfg.policy)?;
            Ok(ok)
        }
    }
}

/// Adam on δ from zero, clipping to `[−ε, ε]` after every step, until the
/// decoder reads β or `max_iter` steps have been taken.
pub fn craft<T: Scalar, D: DifferentiableDecoder<T> + ?Sized>(
    decoder: &D,
    w: &Image,
    alpha: Option<&Watermark>,
    beta: &Watermark,
    cfg: &AttackConfig,
) -> Result<CraftOutcome> {
    cfg.validate()?;
    if w.shape() != decoder.input_shape() {
        return Err(shape_mismatch(
            format!("{:?}", decoder.input_shape()),
            format!("{:?}", w.shape()),
        ));
    }
    let spec = decoder.watermark_spec();
    check_watermark(&spec, beta)?;
    if let Some(a) = alpha {
        check_watermark(&spec, a)?;
    }
    let eps = cfg.epsilon;
    let mut delta = Perturbation::zeros(w.shape());
    let mut adam = Adam::<f64>::new(AdamConfig::with_lr(cfg.learning_rate));
    let mut trace = Vec::new();
    let mut steps = 0usize;
    let mut ok = false;
    loop {
        let (obj, logits, grad) = objective_and_gradient(decoder, w, &delta, alpha, beta, cfg)?;
        if !obj.is_finite() {
            return Err(Error::NonFiniteObjective { iteration: steps });
        }
        trace.push(obj);
        let check = cfg.check_every > 0 && steps.is_multiple_of(cfg.check_every);
        if (check || steps == cfg.max_iter) && reached(&spec, &logits, beta, cfg)? {
            ok = true;
            break;
        }
        if steps == cfg.max_iter {
            break;
        }
        adam.begin_step();
        adam.update(0, &mut delta.delta, &grad);
        for d in &mut delta.delta {
            *d = d.clamp(-eps, eps);
        }
        steps += 1;
    }
    Ok(CraftOutcome {
        delta,
        loss_trace: trace,
        iterations: steps,
        reached_target: ok,
    })
}

fn image_success(extracted: &Watermark, beta: &Watermark, policy: &SuccessPolicy) -> Result<bool> {
    let (e, b) = (
        extracted.image().expect("image kind"),
        beta.image().expect("image kind"),
    );
    Ok(
        metrics::lpips_proxy(e, b, policy.pyramid_seed)? < policy.image_success_threshold
            && metrics::cosine_similarity(extracted, beta)? >= policy.image_success_cosine,
    )
}

/// `(success, removal)` for an extracted watermark.
pub fn adjudicate(
    extracted: &Watermark,
    alpha: &Watermark,
    beta: &Watermark,
    policy: &SuccessPolicy,
) -> Result<(bool, bool)> {
    match (extracted, alpha, beta) {
        (Watermark::Bits(_), Watermark::Bits(_), Watermark::Bits(_)) => Ok((
            metrics::ber(extracted, beta)? == 0.0,
            metrics::ber(extracted, alpha)? >= policy.removal_threshold,
        )),
        (Watermark::Image(_), Watermark::Image(_), Watermark::Image(_)) => Ok((
            image_success(extracted, beta, policy)?,
            metrics::cosine_similarity(extracted, alpha)? < policy.image_removal_cosine,
        )),
        _ => Err(Error::KindMismatch(
            "adjudication needs watermarks of one kind".into(),
        )),
    }
}

fn decoded(target: &Pipeline, image: &Image) -> Result<Watermark> {
    let est = target.extract(image)?;
    match target.profile.watermark {
        WatermarkSpec::Bits { .. } => decode_bits(&est),
        WatermarkSpec::Image { .. } => Ok(Watermark::Image(est.to_image()?)),
    }
}

#[allow(clippy::too_many_arguments)]
fn finish(
    target: &Pipeline,
    w: &Image,
    delta: Perturbation,
    alpha: &Watermark,
    beta: &Watermark,
    cfg: &AttackConfig,
    outcome: &CraftOutcome,
    surrogate_success: Option<bool>,
) -> Result<AttackResult> {
    let mut attacked = delta.apply(w)?;
    if cfg.quantize_before_verify {
        attacked = attacked.quantize8();
    }
    let extracted = decoded(target, &attacked)?;
    let (success, removal) = adjudicate(&extracted, alpha, beta, &cfg.policy)?;
    let metrics = metrics::metric_record(w, &attacked, &extracted, beta, target.arch.pyramid_seed)?;
    let ber_alpha = match extracted {
        Watermark::Bits(_) => Some(metrics::ber(&extracted, alpha)?),
        Watermark::Image(_) => None,
    };
    Ok(AttackResult {
        id: String::new(),
        attacked,
        delta,
        extracted,
        success,
        removal,
        iterations_used: outcome.iterations,
        attempts: 1,
        loss_trace: outcome.loss_trace.clone(),
        metrics,
        epsilon_used: cfg.epsilon,
        ber_alpha,
        surrogate_success,
    })
}

/// Craft against the target decoder itself and score the result on it.
pub fn attack_whitebox(
    target: &Pipeline,
    w: &Image,
    alpha: &Watermark,
    beta: &Watermark,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let outcome = craft(target, w, Some(alpha), beta, cfg)?;
    finish(
        target,
        w,
        outcome.delta.clone(),
        alpha,
        beta,
        cfg,
        &outcome,
        None,
    )
}

/// Craft against `surrogate` and score on `target`. When the surrogate
/// works at another resolution or channel count, δ is still crafted at the
/// target resolution and the surrogate reads it through [`Resized`].
/// `alpha` is used for scoring only; a surrogate whose watermark is
/// shorter than the target's is compared on its leading bits, and a
/// wider one only has its leading outputs optimised.
pub fn attack_blackbox<D: DifferentiableDecoder<f32> + ?Sized>(
    surrogate: &D,
    target: &Pipeline,
    w: &Image,
    alpha: &Watermark,
    beta: &Watermark,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    check_watermark(&target.profile.watermark, beta)?;
    check_watermark(&target.profile.watermark, alpha)?;
    if w.shape() != target.cover_shape() {
        return Err(shape_mismatch(
            format!("{:?}", target.cover_shape()),
            format!("{:?}", w.shape()),
        ));
    }
    if let (WatermarkSpec::Bits { n }, Watermark::Bits(b)) = (surrogate.watermark_spec(), beta) {
        if n > b.len() {
            let lead = LeadingBits::new(surrogate, b.len())?;
            return blackbox_on(&lead, target, w, alpha, beta, beta.clone(), cfg);
        }
        let s_beta = Watermark::Bits(b.truncated(n));
        return blackbox_on(surrogate, target, w, alpha, beta, s_beta, cfg);
    }
    blackbox_on(surrogate, target, w, alpha, beta, beta.clone(), cfg)
}

fn blackbox_on<D: DifferentiableDecoder<f32> + ?Sized>(
    surrogate: &D,
    target: &Pipeline,
    w: &Image,
    alpha: &Watermark,
    beta: &Watermark,
    s_beta: Watermark,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let mut bb = cfg.clone();
    bb.objective = Objective::Blackbox;
    let outcome = if surrogate.input_shape() == w.shape() {
        craft(surrogate, w, None, &s_beta, &bb)?
    } else {
        craft(&Resized::new(surrogate, w.shape())?, w, None, &s_beta, &bb)?
    };
    let delta = outcome.delta.clone();
    finish(
        target,
        w,
        delta,
        alpha,
        beta,
        cfg,
        &outcome,
        Some(outcome.reached_target),
    )
}

/// The first `n` outputs of a bit decoder, so a wider surrogate can attack
/// a narrower target without its spare outputs entering the objective.
pub struct LeadingBits<'a, D: ?Sized> {
    inner: &'a D,
    n: usize,
}

impl<'a, D: ?Sized> LeadingBits<'a, D> {
    pub fn new<T: Scalar>(inner: &'a D, n: usize) -> Result<Self>
    where
        D: DifferentiableDecoder<T>,
    {
        match inner.watermark_spec() {
            WatermarkSpec::Bits { n: m } if n >= 1 && n <= m => Ok(Self { inner, n }),
            other => Err(Error::KindMismatch(format!(
                "cannot take {n} leading bits of {other:?}"
            ))),
        }
    }
}

impl<T: Scalar, D: DifferentiableDecoder<T> + ?Sized> DifferentiableDecoder<T>
    for LeadingBits<'_, D>
{
    fn input_shape(&self) -> Shape {
        self.inner.input_shape()
    }

    fn watermark_spec(&self) -> WatermarkSpec {
        WatermarkSpec::Bits { n: self.n }
    }

    fn logits(&self, g: &mut Graph<T>, x: Var) -> Var {
        let y = self.inner.logits(g, x);
        let m = self.inner.watermark_spec().arity();
        let mut sel = Tensor::zeros([self.n, m, 1, 1]);
        for i in 0..self.n {
            sel.data_mut()[i * m + i] = T::one();
        }
        let sel = g.constant(sel);
        g.linear(y, sel, None)
    }
}

/// A decoder viewed through [`Image::adapt`]: it takes images of `shape`
/// and resizes (bilinear) and converts channels (luma or replication)
/// inside the graph before the inner decoder.
pub struct Resized<'a, D: ?Sized> {
    inner: &'a D,
    shape: Shape,
}

impl<'a, D: ?Sized> Resized<'a, D> {
    pub fn new<T: Scalar>(inner: &'a D, shape: Shape) -> Result<Self>
    where
        D: DifferentiableDecoder<T>,
    {
        let to = inner.input_shape().2;
        if ![1, 3].contains(&shape.2) || ![1, 3].contains(&to) || shape.0 == 0 || shape.1 == 0 {
            return Err(Error::InvalidArgument(format!(
                "cannot view a {:?} decoder from {shape:?}",
                inner.input_shape()
            )));
        }
        Ok(Self { inner, shape })
    }
}

impl<T: Scalar, D: DifferentiableDecoder<T> + ?Sized> DifferentiableDecoder<T> for Resized<'_, D> {
    fn input_shape(&self) -> Shape {
        self.shape
    }

    fn watermark_spec(&self) -> WatermarkSpec {
        self.inner.watermark_spec()
    }

    fn logits(&self, g: &mut Graph<T>, x: Var) -> Var {
        let (h, w, c) = self.shape;
        let (ih, iw, ic) = self.inner.input_shape();
        let mut y = x;
        if (h, w) != (ih, iw) {
            y = g.spatial(y, Arc::new(resize_map((h, w), (ih, iw))));
        }
        if c != ic {
            let k: Vec<T> = if ic == 1 {
                crate::data::LUMA.iter().map(|&v| T::from_f64_lossy(v as f64)).collect()
            } else {
                vec![T::one(); ic]
            };
            let k = g.constant(Tensor::from_vec([ic, c, 1, 1], k));
            y = g.conv2d(y, k, None, 1, 0);
        }
        self.inner.logits(g, y)
    }
}

/// Retry `attack` over the escalation budgets until one succeeds.
pub fn escalate(
    attack: impl Fn(&AttackConfig) -> Result<AttackResult>,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    let budgets = cfg.budgets();
    let mut total_iters = 0;
    let mut last = None;
    for (i, &eps) in budgets.iter().enumerate() {
        let mut c = cfg.clone();
        c.epsilon = eps;
        c.escalation = None;
        let mut r = attack(&c)?;
        total_iters += r.iterations_used;
        r.iterations_used = total_iters;
        r.attempts = i + 1;
        r.epsilon_used = eps;
        let done = r.success;
        last = Some(r);
        if done {
            break;
        }
    }
    Ok(last.expect("at least one budget"))
}
