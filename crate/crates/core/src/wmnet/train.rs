use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::noise::noise_graph;
use super::pipeline::{check_watermark, decode_bits, watermark_batch, Pipeline};
use super::profile::WatermarkSpec;
use crate::data::{sample_bit_watermark, Dataset, Image, Seed, Watermark};
use crate::error::{shape_mismatch, Error, Result};
use crate::nn::{Adam, AdamConfig, Gradients, Graph, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub image_mse: f64,
    pub perceptual: f64,
    pub residual_l2: f64,
    pub watermark: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            image_mse: 10.0,
            perceptual: 0.05,
            residual_l2: 0.0,
            watermark: 1.0,
            adversarial: 0.001,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub loss_weights: LossWeights,
    pub seed: Seed,
    /// Test items scored after each epoch.
    #[serde(default = "default_eval_limit")]
    pub eval_limit: usize,
}

fn default_eval_limit() -> usize {
    200
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            loss_weights: LossWeights::default(),
            seed: Seed(0),
            eval_limit: default_eval_limit(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.loss_weights;
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch_size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(
                "learning_rate must be positive".into(),
            ));
        }
        let all = [
            w.image_mse,
            w.perceptual,
            w.residual_l2,
            w.watermark,
            w.adversarial,
        ];
        if all.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if w.watermark <= 0.0 {
            return Err(Error::InvalidArgument(
                "watermark loss weight must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Epoch means of each loss term, plus held-out scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub image_mse: f64,
    pub perceptual: f64,
    pub residual_l2: f64,
    pub watermark: f64,
    pub adversarial: f64,
    pub discriminator: f64,
    /// Bit accuracy on the test split (bit watermarks only).
    pub test_bit_accuracy: Option<f64>,
    pub test_psnr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Loss terms of one batch, as graph nodes.
pub(crate) struct BatchLoss {
    pub total: Var,
    pub terms: [Var; 5],
    pub marked: Var,
}

/// Build the full training loss for one batch on `g`. `noise_rng` draws the
/// distortion layer.
pub(crate) fn batch_loss<T: Scalar>(
    p: &Pipeline<T>,
    g: &mut Graph<T>,
    covers: &[&Image],
    wms: &[&Watermark],
    weights: &LossWeights,
    noise_rng: &mut rand_chacha::ChaCha8Rng,
    train: bool,
) -> BatchLoss {
    let t = T::from_f64_lossy;
    let x = g.constant(Image::batch_tensor(covers));
    let m = watermark_batch(g, wms, &p.profile.watermark);
    let w = p.encoder.forward(g, x, m, train);
    let noisy = if p.profile.noise_layers.is_empty() {
        w
    } else {
        let spec = p.profile.noise_layers[noise_rng.random_range(0..p.profile.noise_layers.len())];
        noise_graph(g, w, &spec, noise_rng)
    };
    let logits = p.decoder.forward(g, noisy, train);

    let mse = g.mse(w, x);
    let perc = p.pyramid.distance(g, w, x);
    let diff = g.sub(w, x);
    let res = g.item_sum_sq(diff);
    let wm_loss = match p.profile.watermark {
        WatermarkSpec::Bits { .. } => {
            let targets = wms.iter().flat_map(|w| w.target_values()).map(t).collect();
            g.bce_logits(logits, targets, None)
        }
        WatermarkSpec::Image { .. } => {
            let probs = g.sigmoid(logits);
            let secret = m;
            let se = g.mse(probs, secret);
            let sp = p.pyramid.distance(g, probs, secret);
            g.add(se, sp)
        }
    };
    let adv = match &p.discriminator {
        Some(d) if weights.adversarial > 0.0 => {
            let score = d.forward(g, w, false);
            g.bce_logits(score, vec![T::zero(); covers.len()], None)
        }
        _ => g.constant(crate::nn::Tensor::scalar(T::zero())),
    };
    let terms = [mse, perc, res, wm_loss, adv];
    let ws = [
        weights.image_mse,
        weights.perceptual,
        weights.residual_l2,
        weights.watermark,
        weights.adversarial,
    ];
    let mut total: Option<Var> = None;
    for (&v, &wt) in terms.iter().zip(&ws) {
        if wt == 0.0 {
            continue;
        }
        let s = g.scale(v, t(wt));
        total = Some(match total {
            Some(acc) => g.add(acc, s),
            None => s,
        });
    }
    BatchLoss {
        total: total.expect("watermark weight is positive"),
        terms,
        marked: w,
    }
}

/// Weighted training loss of one batch in training mode, with gradients for
/// every encoder and decoder parameter. The noise layer is drawn from
/// `noise_seed`, so equal seeds give the same loss surface.
pub fn training_loss<T: Scalar>(
    p: &Pipeline<T>,
    covers: &[&Image],
    wms: &[&Watermark],
    weights: &LossWeights,
    noise_seed: Seed,
) -> Result<(f64, Gradients<T>)> {
    if covers.is_empty() || covers.len() != wms.len() {
        return Err(Error::InvalidArgument(format!(
            "{} covers for {} watermarks",
            covers.len(),
            wms.len()
        )));
    }
    for (c, w) in covers.iter().zip(wms) {
        if c.shape() != p.cover_shape() {
            return Err(shape_mismatch(p.cover_shape(), c.shape()));
        }
        check_watermark(&p.profile.watermark, w)?;
    }
    let mut g = Graph::new();
    let l = batch_loss(p, &mut g, covers, wms, weights, &mut noise_seed.rng(), true);
    let v = g.value(l.total).data()[0].as_f64();
    Ok((v, g.backward(l.total)))
}

/// Fresh bit watermarks for the given items of one epoch, or partner
/// images for image watermarks.
fn epoch_watermarks(
    p_spec: &WatermarkSpec,
    data: &Dataset,
    epoch_seed: Seed,
) -> Result<Vec<Watermark>> {
    match *p_spec {
        WatermarkSpec::Bits { n } => (0..data.len())
            .map(|i| sample_bit_watermark(n, epoch_seed.derive_index("bits", i as u64)))
            .collect(),
        WatermarkSpec::Image { .. } => {
            let mut partner: Vec<usize> = (0..data.len()).collect();
            partner.shuffle(&mut epoch_seed.derive("partners").rng());
            data.items()
                .iter()
                .enumerate()
                .map(|(i, it)| match &it.watermark {
                    Some(wm @ Watermark::Image(_)) => Ok(wm.clone()),
                    _ => Ok(Watermark::Image(data.items()[partner[i]].image.clone())),
                })
                .collect()
        }
    }
}

/// Held-out watermarks, fixed per item so epochs are comparable.
pub fn eval_watermarks(spec: &WatermarkSpec, data: &Dataset, seed: Seed) -> Result<Vec<Watermark>> {
    epoch_watermarks(spec, data, seed.derive("eval"))
}

/// Mean bit accuracy and PSNR of embed → extract on `data`.
pub fn evaluate_pipeline(
    p: &Pipeline,
    data: &Dataset,
    wms: &[Watermark],
) -> Result<(Option<f64>, f64)> {
    let covers: Vec<&Image> = data.images().collect();
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut psnr = 0.0;
    for (cs, ws) in covers.chunks(64).zip(wms.chunks(64)) {
        let wr: Vec<&Watermark> = ws.iter().collect();
        let marked = p.embed_batch(cs, &wr)?;
        for (c, m) in cs.iter().zip(&marked) {
            psnr += crate::metrics::psnr(c, m)?;
        }
        if p.profile.watermark.is_bits() {
            let refs: Vec<&Image> = marked.iter().collect();
            for (est, w) in p.extract_batch(&refs)?.iter().zip(ws) {
                let d = decode_bits(est)?;
                let (a, b) = (d.bits().unwrap().bits(), w.bits().unwrap().bits());
                correct += a.iter().zip(b).filter(|(x, y)| x == y).count();
                total += a.len();
            }
        }
    }
    let acc = p
        .profile
        .watermark
        .is_bits()
        .then(|| correct as f64 / total.max(1) as f64);
    Ok((acc, psnr / covers.len().max(1) as f64))
}

/// Train encoder and decoder (and the discriminator when present and
/// weighted) with Adam.
pub fn train_pipeline(
    mut p: Pipeline,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Pipeline, TrainHistory)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if data.shape() != Some(p.profile.cover_shape) {
        return Err(shape_mismatch(
            format!("{:?}", p.profile.cover_shape),
            format!("{:?}", data.shape()),
        ));
    }
    for it in data.items() {
        if let Some(wm) = &it.watermark {
            if !p.profile.watermark.is_bits() {
                check_watermark(&p.profile.watermark, wm)?;
            }
        }
    }
    let test = test.map(|t| t.take(cfg.eval_limit));
    let test_wms = match &test {
        Some(t) => Some(eval_watermarks(&p.profile.watermark, t, cfg.seed)?),
        None => None,
    };

    let adam_cfg = AdamConfig::with_lr(cfg.learning_rate);
    let mut enc_opt = Adam::new(adam_cfg);
    let mut dec_opt = Adam::new(adam_cfg);
    let mut disc_opt = Adam::new(adam_cfg);
    let train_disc = p.discriminator.is_some() && cfg.loss_weights.adversarial > 0.0;
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        let epoch_seed = cfg.seed.derive_index("epoch", epoch as u64);
        let wms = epoch_watermarks(&p.profile.watermark, data, epoch_seed)?;
        order.shuffle(&mut epoch_seed.derive("shuffle").rng());
        let mut noise_rng = epoch_seed.derive("noise").rng();
        let mut sums = [0.0f64; 7];
        let mut batches = 0usize;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let covers: Vec<&Image> = chunk.iter().map(|&i| &data.items()[i].image).collect();
            let marks: Vec<&Watermark> = chunk.iter().map(|&i| &wms[i]).collect();
            let mut g = Graph::<f32>::new();
            let loss = batch_loss(
                &p,
                &mut g,
                &covers,
                &marks,
                &cfg.loss_weights,
                &mut noise_rng,
                true,
            );
            let total = g.value(loss.total).value() as f64;
            if !total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: total,
                });
            }
            sums[0] += total;
            for (s, &v) in sums[1..6].iter_mut().zip(&loss.terms) {
                *s += g.value(v).value() as f64;
            }
            let grads = g.backward(loss.total);
            enc_opt.step_params(&mut p.encoder.params, &grads);
            dec_opt.step_params(&mut p.decoder.params, &grads);

            if train_disc {
                let d = p.discriminator.as_mut().expect("checked");
                let mut dg = Graph::<f32>::new();
                let real = dg.constant(Image::batch_tensor(&covers));
                let fake = dg.constant(g.value(loss.marked).clone());
                let sr = d.forward(&mut dg, real, true);
                let sf = d.forward(&mut dg, fake, true);
                let n = covers.len();
                let lr = dg.bce_logits(sr, vec![0.0; n], None);
                let lf = dg.bce_logits(sf, vec![1.0; n], None);
                let dl = dg.add(lr, lf);
                let v = dg.value(dl).value() as f64;
                if !v.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        batch: bi,
                        loss: v,
                    });
                }
                sums[6] += v;
                let dgrads = dg.backward(dl);
                disc_opt.step_params(&mut d.params, &dgrads);
            }
            if !p.all_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: f64::NAN,
                });
            }
            batches += 1;
        }
        let k = batches as f64;
        let (acc, psnr) = match (&test, &test_wms) {
            (Some(t), Some(w)) if !t.is_empty() => {
                let (a, s) = evaluate_pipeline(&p, t, w)?;
                (a, Some(s))
            }
            _ => (None, None),
        };
        history.epochs.push(EpochRecord {
            epoch,
            total: sums[0] / k,
            image_mse: sums[1] / k,
            perceptual: sums[2] / k,
            residual_l2: sums[3] / k,
            watermark: sums[4] / k,
            adversarial: sums[5] / k,
            discriminator: sums[6] / k,
            test_bit_accuracy: acc,
            test_psnr: psnr,
        });
    }
    p.train_config = Some(cfg.clone());
    Ok((p, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, DatasetSource, Split};
    use crate::nn::Tensor;
    use crate::wmnet::{ArchConfig, TechniqueProfile};

    fn tiny_profile(disc: bool) -> TechniqueProfile {
        TechniqueProfile {
            name: "tiny".into(),
            cover_shape: (8, 8, 1),
            watermark: WatermarkSpec::Bits { n: 2 },
            has_discriminator: disc,
            noise_layers: vec![crate::wmnet::NoiseSpec::fresh(
                crate::wmnet::NoiseKind::Blur { size: 3 },
            )],
            screen_shoot_robust: false,
        }
    }

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            width: 1,
            msg_channels: 1,
            pyramid_seed: 3,
        }
    }

    #[test]
    fn config_preconditions() {
        let c = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.loss_weights.watermark = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.loss_weights.perceptual = -1.0;
        assert!(c.validate().is_err());
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn training_loss_gradient_matches_finite_differences() {
        let profile = tiny_profile(false);
        let p: Pipeline<f64> = Pipeline::new(&profile, tiny_arch(), Seed(11)).unwrap();
        assert!(
            p.num_parameters() <= 500,
            "{} parameters",
            p.num_parameters()
        );
        let data = build_dataset(
            "t",
            &DatasetSource::Synthetic,
            3,
            (8, 8, 1),
            Split::Train,
            Seed(2),
        )
        .unwrap();
        let covers: Vec<&Image> = data.images().collect();
        let wms: Vec<Watermark> = (0..3)
            .map(|i| sample_bit_watermark(2, Seed(40 + i)).unwrap())
            .collect();
        let wr: Vec<&Watermark> = wms.iter().collect();
        let weights = LossWeights {
            image_mse: 1.0,
            perceptual: 0.5,
            residual_l2: 0.1,
            watermark: 1.0,
            adversarial: 0.0,
        };
        let loss_of = |p: &Pipeline<f64>| {
            let mut g = Graph::new();
            let l = batch_loss(p, &mut g, &covers, &wr, &weights, &mut Seed(1).rng(), true);
            let v = g.value(l.total).value();
            (v, g.backward(l.total))
        };
        let (_, grads) = loss_of(&p);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for (which, ps) in [(0, &p.encoder.params), (1, &p.decoder.params)] {
            for ti in 0..ps.len() {
                let analytic = grads
                    .param(ps.key(ti))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(ps.tensor(ti).shape()));
                for j in (0..ps.tensor(ti).len()).step_by(3) {
                    let bump = |d: f64| {
                        let mut q = p.clone();
                        let t = if which == 0 {
                            q.encoder.params.tensor_mut(ti)
                        } else {
                            q.decoder.params.tensor_mut(ti)
                        };
                        t.data_mut()[j] += d;
                        loss_of(&q).0
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    let a = analytic.data()[j];
                    let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                    worst = worst.max(rel);
                    checked += 1;
                }
            }
        }
        assert!(checked > 100);
        assert!(worst <= 1e-4, "worst relative error {worst:e}");
    }

    #[test]
    fn adversarial_weight_zero_ignores_discriminator_init() {
        let profile = tiny_profile(true);
        let data = build_dataset(
            "t",
            &DatasetSource::Synthetic,
            12,
            (8, 8, 1),
            Split::Train,
            Seed(2),
        )
        .unwrap();
        let mut cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        };
        cfg.loss_weights.adversarial = 0.0;
        let run = |disc_seed: u64| {
            let mut p = Pipeline::<f32>::new(&profile, tiny_arch(), Seed(5)).unwrap();
            p.discriminator = Some(crate::wmnet::Discriminator::new(
                1,
                &tiny_arch(),
                Seed(disc_seed),
            ));
            train_pipeline(p, &data, None, &cfg).unwrap().0
        };
        let (a, b) = (run(1), run(2));
        assert_eq!(a.encoder.params, b.encoder.params);
        assert_eq!(a.decoder.params, b.decoder.params);
    }

    #[test]
    fn training_is_deterministic_and_records_history() {
        let profile = tiny_profile(true);
        let data = build_dataset(
            "t",
            &DatasetSource::Synthetic,
            10,
            (8, 8, 1),
            Split::Train,
            Seed(2),
        )
        .unwrap();
        let test = build_dataset(
            "v",
            &DatasetSource::Synthetic,
            4,
            (8, 8, 1),
            Split::Test,
            Seed(3),
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let p = Pipeline::<f32>::new(&profile, tiny_arch(), Seed(5)).unwrap();
        let (a, ha) = train_pipeline(p.clone(), &data, Some(&test), &cfg).unwrap();
        let (b, hb) = train_pipeline(p.clone(), &data, Some(&test), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert_eq!(ha.epochs.len(), 3);
        assert!(ha
            .epochs
            .iter()
            .all(|e| e.test_bit_accuracy.is_some() && e.discriminator > 0.0));
        assert_ne!(a.encoder.params, p.encoder.params);
        assert!(a.all_finite());
    }

    #[test]
    fn divergence_is_reported() {
        let profile = tiny_profile(false);
        let data = build_dataset(
            "t",
            &DatasetSource::Synthetic,
            4,
            (8, 8, 1),
            Split::Train,
            Seed(2),
        )
        .unwrap();
        let mut p = Pipeline::<f32>::new(&profile, tiny_arch(), Seed(5)).unwrap();
        p.decoder.params.tensor_mut(0).data_mut()[0] = f32::NAN;
        let err = train_pipeline(p, &data, None, &TrainConfig::default()).unwrap_err();
        assert!(matches!(
            err,
            Error::Divergence {
                epoch: 0,
                batch: 0,
                ..
            }
        ));
    }

    #[test]
    fn rejects_mismatched_dataset() {
        let profile = tiny_profile(false);
        let data = build_dataset(
            "t",
            &DatasetSource::Synthetic,
            4,
            (8, 8, 3),
            Split::Train,
            Seed(2),
        )
        .unwrap();
        let p = Pipeline::<f32>::new(&profile, tiny_arch(), Seed(5)).unwrap();
        assert!(train_pipeline(p, &data, None, &TrainConfig::default()).is_err());
    }

    #[test]
    fn watermark_only_training_reduces_bce() {
        let profile = TechniqueProfile {
            name: "wm-only".into(),
            cover_shape: (16, 16, 1),
            watermark: WatermarkSpec::Bits { n: 4 },
            has_discriminator: false,
            noise_layers: vec![],
            screen_shoot_robust: false,
        };
        let arch = ArchConfig {
            width: 4,
            msg_channels: 2,
            pyramid_seed: 3,
        };
        let data = build_dataset(
            "t",
            &DatasetSource::Synthetic,
            256,
            (16, 16, 1),
            Split::Train,
            Seed(2),
        )
        .unwrap();
        let mut monotone = 0;
        for seed in 0..10u64 {
            let cfg = TrainConfig {
                epochs: 5,
                batch_size: 16,
                learning_rate: 3e-3,
                seed: Seed(seed),
                loss_weights: LossWeights {
                    image_mse: 0.0,
                    perceptual: 0.0,
                    residual_l2: 0.0,
                    watermark: 1.0,
                    adversarial: 0.0,
                },
                ..TrainConfig::default()
            };
            let p = Pipeline::<f32>::new(&profile, arch, Seed(100 + seed)).unwrap();
            let (_, h) = train_pipeline(p, &data, None, &cfg).unwrap();
            let bce: Vec<f64> = h.epochs.iter().map(|e| e.watermark).collect();
            if bce.windows(2).all(|w| w[1] < w[0]) {
                monotone += 1;
            }
        }
        assert!(monotone >= 9, "{monotone}/10 runs monotone");
    }
}
