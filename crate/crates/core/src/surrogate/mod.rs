//! Attacker-side models: surrogate training, pair harvesting, decoder
//! fine-tuning and the shared cross-resolution surrogate.

mod archive;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use archive::{load_pairs, save_pairs, PAIR_MANIFEST};

use crate::data::{sample_bit_watermark, synthetic_image, Dataset, Image, Seed, Shape, Watermark};
use crate::error::{shape_mismatch, Error, Result};
use crate::metrics;
use crate::nn::{Adam, AdamConfig, Graph, Tensor};
use crate::wmnet::{
    check_watermark, decode_bits, ArchConfig, LossWeights, NoiseKind, NoiseSpec, Pipeline,
    TechniqueProfile, TrainConfig, TrainHistory, WatermarkSpec,
};

/// A watermarked image harvested from a target together with the payload
/// that was embedded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackPair {
    pub id: String,
    /// Name of the target that produced the pair.
    pub source: String,
    pub watermarked: Image,
    pub wm: Watermark,
}

/// Loss weights used for every surrogate. Favours decoding accuracy over
/// imperceptibility, since the surrogate encoder output is never shipped.
pub fn surrogate_loss_weights() -> LossWeights {
    LossWeights {
        image_mse: 0.5,
        perceptual: 0.05,
        residual_l2: 0.0,
        watermark: 1.0,
        adversarial: 0.0,
    }
}

/// Train a fresh surrogate pipeline for `profile`, initialised from
/// `cfg.seed`. The loss weights of `cfg` are replaced by
/// [`surrogate_loss_weights`].
pub fn train_surrogate(
    profile: &TechniqueProfile,
    arch: ArchConfig,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Pipeline, TrainHistory)> {
    let p = Pipeline::new(profile, arch, cfg.seed.derive("surrogate-init"))?;
    let cfg = TrainConfig {
        loss_weights: surrogate_loss_weights(),
        ..cfg.clone()
    };
    crate::wmnet::train_pipeline(p, data, test, &cfg)
}

/// Embed a fresh seeded watermark into each of the first `n` covers.
pub fn harvest_pairs(
    target: &Pipeline,
    covers: &Dataset,
    n: usize,
    seed: Seed,
) -> Result<Vec<AttackPair>> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "harvest needs at least one pair".into(),
        ));
    }
    if n > covers.len() {
        return Err(Error::InvalidArgument(format!(
            "harvest of {n} pairs needs {n} covers, only {} available",
            covers.len()
        )));
    }
    let items = &covers.items()[..n];
    let wms: Vec<Watermark> = (0..n)
        .map(|i| {
            let s = seed.derive_index("harvest", i as u64);
            match target.profile.watermark {
                WatermarkSpec::Bits { n } => sample_bit_watermark(n, s),
                WatermarkSpec::Image {
                    height,
                    width,
                    channels,
                } => Ok(Watermark::Image(synthetic_image(
                    (height, width, channels),
                    s,
                )?)),
            }
        })
        .collect::<Result<_>>()?;
    let mut pairs = Vec::with_capacity(n);
    for (chunk, wchunk) in items.chunks(64).zip(wms.chunks(64)) {
        let covers: Vec<&Image> = chunk.iter().map(|it| &it.image).collect();
        let wr: Vec<&Watermark> = wchunk.iter().collect();
        let marked = target.embed_batch(&covers, &wr)?;
        for ((it, im), wm) in chunk.iter().zip(marked).zip(wchunk) {
            pairs.push(AttackPair {
                id: it.id.clone(),
                source: target.profile.name.clone(),
                watermarked: im,
                wm: wm.clone(),
            });
        }
    }
    Ok(pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneBudget {
    pub epochs: usize,
    pub num_pairs: usize,
    pub learning_rate: f64,
    pub seed: Seed,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Fraction of pairs held out for accuracy reporting.
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    /// Std of Gaussian noise added to training inputs; 0 disables it.
    #[serde(default = "default_input_noise")]
    pub input_noise: f64,
}

fn default_input_noise() -> f64 {
    0.05
}

fn default_batch() -> usize {
    16
}

fn default_holdout() -> f64 {
    0.1
}

impl FinetuneBudget {
    pub fn new(epochs: usize, num_pairs: usize) -> Self {
        Self {
            epochs,
            num_pairs,
            learning_rate: 1e-3,
            seed: Seed(0),
            batch_size: default_batch(),
            holdout_fraction: default_holdout(),
            input_noise: default_input_noise(),
        }
    }

    /// Named budgets: per-technique optima plus the 100-epoch umbrella
    /// recipe and the pooled common-surrogate recipe.
    pub fn preset(name: &str) -> Option<Self> {
        let (e, n) = match name {
            "redmark" => (40, 200),
            "hidden" => (60, 300),
            "pimog" => (70, 400),
            "hiding-images" => (90, 500),
            "umbrella" => (100, 500),
            "common" => (90, 500),
            _ => return None,
        };
        Some(Self::new(e, n))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.num_pairs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "fine-tuning epochs, num_pairs and batch_size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(
                "fine-tuning learning_rate must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::InvalidArgument(
                "holdout_fraction must lie in [0, 1)".into(),
            ));
        }
        if !(self.input_noise >= 0.0 && self.input_noise <= 0.5) {
            return Err(Error::InvalidArgument(
                "input_noise must lie in [0, 0.5]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    /// Loss on the training pairs before any update.
    pub initial_loss: f64,
    /// Loss on the training pairs after the last epoch.
    pub final_loss: f64,
    /// Mean batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub train_ids: Vec<String>,
    pub heldout_ids: Vec<String>,
    /// Bit accuracy (bits) or cosine similarity (images) on held-out pairs.
    pub heldout_accuracy: Option<f64>,
}

/// Fixed targets and mask of one pair for a decoder emitting `spec`. Bit
/// payloads shorter than the decoder are padded with masked zeros.
fn pair_targets(spec: &WatermarkSpec, wm: &Watermark) -> Result<(Vec<f32>, Vec<f32>)> {
    match (spec, wm) {
        (WatermarkSpec::Bits { n }, Watermark::Bits(b)) => {
            if b.len() > *n {
                return Err(shape_mismatch(
                    format!("at most {n} bits"),
                    format!("{} bits", b.len()),
                ));
            }
            let mut t: Vec<f32> = b.bits().iter().map(|&x| x as u8 as f32).collect();
            let mut m = vec![1.0; t.len()];
            t.resize(*n, 0.0);
            m.resize(*n, 0.0);
            Ok((t, m))
        }
        (WatermarkSpec::Image { .. }, Watermark::Image(_)) => {
            check_watermark(spec, wm)?;
            let t: Vec<f32> = wm.target_values().iter().map(|&v| v as f32).collect();
            let m = vec![1.0; t.len()];
            Ok((t, m))
        }
        _ => Err(Error::KindMismatch(format!(
            "surrogate decodes {} but pair carries {}",
            if spec.is_bits() { "bits" } else { "images" },
            wm.kind_name()
        ))),
    }
}

fn decoder_loss(
    p: &Pipeline,
    g: &mut Graph<f32>,
    images: Tensor<f32>,
    targets: &[&(Vec<f32>, Vec<f32>)],
    train: bool,
) -> crate::nn::Var {
    let x = g.constant(images);
    let logits = p.decoder.forward(g, x, train);
    match p.profile.watermark {
        WatermarkSpec::Bits { .. } => {
            let t = targets
                .iter()
                .flat_map(|(t, _)| t.iter().copied())
                .collect();
            let m = targets
                .iter()
                .flat_map(|(_, m)| m.iter().copied())
                .collect();
            g.bce_logits(logits, t, Some(m))
        }
        WatermarkSpec::Image { .. } => {
            let probs = g.sigmoid(logits);
            let shape = g.shape(probs);
            let t = g.constant(Tensor::from_vec(
                shape,
                targets
                    .iter()
                    .flat_map(|(t, _)| t.iter().copied())
                    .collect(),
            ));
            let se = g.mse(probs, t);
            let sp = p.pyramid.distance(g, probs, t);
            g.add(se, sp)
        }
    }
}

fn mean_loss(p: &Pipeline, pairs: &[&AttackPair], targets: &[&(Vec<f32>, Vec<f32>)]) -> f64 {
    let mut total = 0.0;
    for (pc, tc) in pairs.chunks(64).zip(targets.chunks(64)) {
        let ims: Vec<&Image> = pc.iter().map(|p| &p.watermarked).collect();
        let mut g = Graph::new();
        let l = decoder_loss(p, &mut g, Image::batch_tensor(&ims), tc, false);
        total += g.value(l).value() as f64 * pc.len() as f64;
    }
    total / pairs.len().max(1) as f64
}

/// Agreement between the decoder and the payloads of `pairs`: bit accuracy
/// over the unmasked bits, or mean cosine similarity for images.
pub fn pair_accuracy(p: &Pipeline, pairs: &[&AttackPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to score".into()));
    }
    let ims: Vec<&Image> = pairs.iter().map(|p| &p.watermarked).collect();
    let ests = crate::wmnet::decoder_estimates(&p.decoder, &ims)?;
    let mut acc = 0.0;
    for (e, pair) in ests.iter().zip(pairs) {
        acc += match &pair.wm {
            Watermark::Bits(b) => {
                let d = decode_bits(e)?;
                metrics::bit_accuracy(
                    &Watermark::Bits(d.bits().unwrap().truncated(b.len())),
                    &pair.wm,
                )?
            }
            Watermark::Image(_) => {
                metrics::cosine_similarity(&Watermark::Image(e.to_image()?), &pair.wm)?
            }
        };
    }
    Ok(acc / pairs.len() as f64)
}

/// Fit the surrogate decoder to the harvested pairs with the encoder
/// frozen. The first `budget.num_pairs` pairs are used; a seeded
/// `holdout_fraction` of them is reserved for the report.
pub fn finetune_decoder(
    mut p: Pipeline,
    pairs: &[AttackPair],
    budget: &FinetuneBudget,
) -> Result<(Pipeline, FinetuneReport)> {
    budget.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "fine-tuning needs at least one pair".into(),
        ));
    }
    if pairs.len() < budget.num_pairs {
        return Err(Error::InvalidArgument(format!(
            "budget asks for {} pairs, {} supplied",
            budget.num_pairs,
            pairs.len()
        )));
    }
    let pairs = &pairs[..budget.num_pairs];
    let spec = p.profile.watermark;
    let mut targets = Vec::with_capacity(pairs.len());
    for pair in pairs {
        if pair.watermarked.shape() != p.profile.cover_shape {
            return Err(shape_mismatch(
                format!("{:?}", p.profile.cover_shape),
                format!(
                    "{:?} (pair {}; resize first)",
                    pair.watermarked.shape(),
                    pair.id
                ),
            ));
        }
        targets.push(pair_targets(&spec, &pair.wm)?);
    }

    let mut idx: Vec<usize> = (0..pairs.len()).collect();
    idx.shuffle(&mut budget.seed.derive("holdout").rng());
    let n_hold =
        ((pairs.len() as f64 * budget.holdout_fraction).round() as usize).min(pairs.len() - 1);
    let (hold, train) = idx.split_at(n_hold);
    let train_pairs: Vec<&AttackPair> = train.iter().map(|&i| &pairs[i]).collect();
    let train_targets: Vec<&(Vec<f32>, Vec<f32>)> = train.iter().map(|&i| &targets[i]).collect();
    let initial_loss = mean_loss(&p, &train_pairs, &train_targets);

    let mut opt = Adam::new(AdamConfig::with_lr(budget.learning_rate));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(budget.epochs);
    let normal =
        rand_distr::Normal::new(0.0f32, budget.input_noise.max(0.0) as f32).expect("valid std");
    for epoch in 0..budget.epochs {
        let es = budget.seed.derive_index("finetune-epoch", epoch as u64);
        order.shuffle(&mut es.derive("shuffle").rng());
        let mut noise_rng = es.derive("noise").rng();
        let mut sum = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(budget.batch_size).enumerate() {
            let ims: Vec<&Image> = chunk.iter().map(|&i| &train_pairs[i].watermarked).collect();
            let mut x: Tensor<f32> = Image::batch_tensor(&ims);
            if budget.input_noise > 0.0 {
                for v in x.data_mut() {
                    *v = (*v + rand_distr::Distribution::sample(&normal, &mut noise_rng))
                        .clamp(0.0, 1.0);
                }
            }
            let ts: Vec<&(Vec<f32>, Vec<f32>)> = chunk.iter().map(|&i| train_targets[i]).collect();
            let mut g = Graph::new();
            let l = decoder_loss(&p, &mut g, x, &ts, true);
            let v = g.value(l).value() as f64;
            if !v.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: v,
                });
            }
            sum += v;
            batches += 1;
            let grads = g.backward(l);
            opt.step_params(&mut p.decoder.params, &grads);
        }
        epoch_losses.push(sum / batches as f64);
    }
    let final_loss = mean_loss(&p, &train_pairs, &train_targets);
    let hold_pairs: Vec<&AttackPair> = hold.iter().map(|&i| &pairs[i]).collect();
    let heldout_accuracy = if hold_pairs.is_empty() {
        None
    } else {
        Some(pair_accuracy(&p, &hold_pairs)?)
    };
    Ok((
        p,
        FinetuneReport {
            initial_loss,
            final_loss,
            epoch_losses,
            train_ids: train_pairs.iter().map(|p| p.id.clone()).collect(),
            heldout_ids: hold_pairs.iter().map(|p| p.id.clone()).collect(),
            heldout_accuracy,
        },
    ))
}

/// One surrogate shared by several bit-string targets of differing shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CommonSurrogateSpec {
    pub io_shape: Shape,
    pub wm_bits: usize,
    pub member_targets: Vec<TechniqueProfile>,
}

impl CommonSurrogateSpec {
    /// Default desk-scale shape: 64×64×3 and a 10-bit cap.
    pub fn new(member_targets: Vec<TechniqueProfile>) -> Self {
        Self {
            io_shape: (64, 64, 3),
            wm_bits: 10,
            member_targets,
        }
    }

    /// The unscaled 224×224×3 variant.
    pub fn full_scale(member_targets: Vec<TechniqueProfile>) -> Self {
        Self {
            io_shape: (224, 224, 3),
            ..Self::new(member_targets)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.wm_bits == 0 {
            return Err(Error::InvalidArgument("wm_bits must be at least 1".into()));
        }
        if self.member_targets.is_empty() {
            return Err(Error::InvalidArgument(
                "common surrogate needs member targets".into(),
            ));
        }
        for m in &self.member_targets {
            if !m.watermark.is_bits() {
                return Err(Error::KindMismatch(format!(
                    "common surrogate member {} uses an image watermark",
                    m.name
                )));
            }
        }
        Ok(())
    }

    pub fn profile(&self) -> TechniqueProfile {
        TechniqueProfile {
            name: "common-surrogate".into(),
            cover_shape: self.io_shape,
            watermark: WatermarkSpec::Bits { n: self.wm_bits },
            has_discriminator: false,
            noise_layers: vec![NoiseSpec::fresh(NoiseKind::GaussianNoise { std: 0.01 })],
            screen_shoot_robust: false,
        }
    }

    /// How a member's bits map onto the surrogate's: the first
    /// `min(member, wm_bits)` positions, remaining surrogate bits masked.
    pub fn bit_mapping(&self, member: &TechniqueProfile) -> (usize, usize) {
        let n = member.watermark.arity();
        (n.min(self.wm_bits), self.wm_bits.saturating_sub(n))
    }

    /// Resize pairs to the shared shape and cut their payload to the cap.
    pub fn pool(&self, pairs: &[AttackPair]) -> Result<Vec<AttackPair>> {
        pairs
            .iter()
            .map(|p| {
                let wm = match &p.wm {
                    Watermark::Bits(b) => Watermark::Bits(b.truncated(self.wm_bits)),
                    Watermark::Image(_) => {
                        return Err(Error::KindMismatch(format!(
                            "pair {} carries an image watermark",
                            p.id
                        )))
                    }
                };
                Ok(AttackPair {
                    id: p.id.clone(),
                    source: p.source.clone(),
                    watermarked: p.watermarked.adapt(self.io_shape)?,
                    wm,
                })
            })
            .collect()
    }
}

/// Train the shared surrogate at `spec.io_shape` with `spec.wm_bits` bits.
pub fn build_common_surrogate(
    spec: &CommonSurrogateSpec,
    arch: ArchConfig,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Pipeline, TrainHistory)> {
    spec.validate()?;
    train_surrogate(&spec.profile(), arch, data, test, cfg)
}

/// Fine-tune the shared surrogate on pairs pooled from every member.
pub fn finetune_common(
    p: Pipeline,
    pooled: &[AttackPair],
    budget: &FinetuneBudget,
) -> Result<(Pipeline, FinetuneReport)> {
    if pooled.is_empty() {
        return Err(Error::InvalidArgument("pooled pair set is empty".into()));
    }
    finetune_decoder(p, pooled, budget)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_dataset, DatasetSource, Split};
    use crate::wmnet::build_pipeline;

    fn tiny() -> TechniqueProfile {
        TechniqueProfile {
            name: "tiny".into(),
            cover_shape: (16, 16, 1),
            watermark: WatermarkSpec::Bits { n: 8 },
            has_discriminator: false,
            noise_layers: vec![],
            screen_shoot_robust: false,
        }
    }

    fn covers(n: usize) -> Dataset {
        build_dataset(
            "c",
            &DatasetSource::Synthetic,
            n,
            (16, 16, 1),
            Split::AttackPairs,
            Seed(8),
        )
        .unwrap()
    }

    #[test]
    fn harvest_contract() {
        let mut wide = tiny();
        wide.watermark = WatermarkSpec::Bits { n: 32 };
        let t = build_pipeline(&wide, Seed(1)).unwrap();
        let c = covers(500);
        let pairs = harvest_pairs(&t, &c, 500, Seed(2)).unwrap();
        assert_eq!(pairs.len(), 500);
        let distinct: std::collections::HashSet<_> =
            pairs.iter().map(|p| p.wm.bits().unwrap().clone()).collect();
        assert_eq!(distinct.len(), 500);
        assert_eq!(pairs, harvest_pairs(&t, &c, 500, Seed(2)).unwrap());
        assert!(harvest_pairs(&t, &c, 0, Seed(2)).is_err());
        assert!(harvest_pairs(&t, &c, 501, Seed(2)).is_err());
    }

    #[test]
    fn finetune_freezes_encoder_and_lowers_loss() {
        let t = build_pipeline(&tiny(), Seed(1)).unwrap();
        let pairs = harvest_pairs(&t, &covers(40), 40, Seed(2)).unwrap();
        let s = build_pipeline(&tiny(), Seed(5)).unwrap();
        let mut b = FinetuneBudget::new(5, 40);
        b.input_noise = 0.01;
        let (f, rep) = finetune_decoder(s.clone(), &pairs, &b).unwrap();
        assert_eq!(f.encoder.params, s.encoder.params);
        assert_ne!(f.decoder.params, s.decoder.params);
        assert!(rep.final_loss <= rep.initial_loss);
        assert_eq!(rep.heldout_ids.len(), 4);
        assert_eq!(rep.epoch_losses.len(), 5);
        assert!(rep.heldout_accuracy.is_some());
        let (g, rep2) = finetune_decoder(s.clone(), &pairs, &b).unwrap();
        assert_eq!(f, g);
        assert_eq!(rep, rep2);
        assert!(finetune_decoder(s.clone(), &pairs, &FinetuneBudget::new(1, 41)).is_err());
        assert!(finetune_decoder(s.clone(), &[], &FinetuneBudget::new(1, 1)).is_err());
        assert!(FinetuneBudget::new(0, 1).validate().is_err());
    }

    #[test]
    fn finetune_rejects_mismatches() {
        let t = build_pipeline(&tiny(), Seed(1)).unwrap();
        let pairs = harvest_pairs(&t, &covers(4), 4, Seed(2)).unwrap();
        let mut other = tiny();
        other.cover_shape = (8, 8, 1);
        let s = build_pipeline(&other, Seed(5)).unwrap();
        assert!(finetune_decoder(s, &pairs, &FinetuneBudget::new(1, 4)).is_err());
        let mut img = TechniqueProfile::hiding_images_like();
        img.cover_shape = (16, 16, 1);
        img.watermark = WatermarkSpec::Image {
            height: 16,
            width: 16,
            channels: 1,
        };
        let s = build_pipeline(&img, Seed(5)).unwrap();
        assert!(matches!(
            finetune_decoder(s, &pairs, &FinetuneBudget::new(1, 4)),
            Err(Error::KindMismatch(_))
        ));
    }

    #[test]
    fn budget_presets() {
        let b = FinetuneBudget::preset("redmark").unwrap();
        assert_eq!((b.epochs, b.num_pairs), (40, 200));
        assert_eq!(
            FinetuneBudget::preset("hidden").map(|b| (b.epochs, b.num_pairs)),
            Some((60, 300))
        );
        assert_eq!(
            FinetuneBudget::preset("pimog").map(|b| (b.epochs, b.num_pairs)),
            Some((70, 400))
        );
        assert_eq!(
            FinetuneBudget::preset("hiding-images").map(|b| (b.epochs, b.num_pairs)),
            Some((90, 500))
        );
        assert_eq!(
            FinetuneBudget::preset("umbrella").map(|b| (b.epochs, b.num_pairs)),
            Some((100, 500))
        );
        assert!(FinetuneBudget::preset("x").is_none());
    }

    #[test]
    fn common_surrogate_spec() {
        let members = vec![
            TechniqueProfile::hidden_like(),
            TechniqueProfile::redmark_like(),
            TechniqueProfile::pimog_like(),
        ];
        let spec = CommonSurrogateSpec::new(members.clone());
        spec.validate().unwrap();
        assert_eq!(spec.profile().watermark, WatermarkSpec::Bits { n: 10 });
        assert_eq!(spec.bit_mapping(&TechniqueProfile::redmark_like()), (8, 2));
        assert_eq!(spec.bit_mapping(&TechniqueProfile::hidden_like()), (10, 0));
        let mut bad = members;
        bad.push(TechniqueProfile::hiding_images_like());
        assert!(CommonSurrogateSpec::new(bad).validate().is_err());

        let t = build_pipeline(&tiny(), Seed(1)).unwrap();
        let pairs = harvest_pairs(&t, &covers(3), 3, Seed(2)).unwrap();
        let mut small = CommonSurrogateSpec::new(vec![tiny()]);
        small.io_shape = (24, 24, 3);
        small.wm_bits = 6;
        let pooled = small.pool(&pairs).unwrap();
        assert_eq!(pooled[0].watermarked.shape(), (24, 24, 3));
        assert_eq!(pooled[0].wm.bits().unwrap().len(), 6);
        assert!(finetune_common(
            build_pipeline(&small.profile(), Seed(3)).unwrap(),
            &[],
            &FinetuneBudget::new(1, 1)
        )
        .is_err());
    }

    #[test]
    fn short_payloads_are_masked() {
        let (t, m) = pair_targets(
            &WatermarkSpec::Bits { n: 4 },
            &Watermark::Bits(crate::data::BitString::from_u8(&[1, 0]).unwrap()),
        )
        .unwrap();
        assert_eq!(t, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(m, [1.0, 1.0, 0.0, 0.0]);
    }
}
