//! Adversarial training against embedding-shift attacks.
//!
//! The defended quantity is the embedding displacement an attacker can buy
//! with an ℓ∞ pixel budget. Every ranking attack in this crate works by
//! moving an embedding, so capping the reachable displacement blunts all of
//! them at once. Two variants:
//!
//! * **Shift-replace** - each triplet member is replaced by its max-shift
//!   adversarial counterpart before the triplet loss is applied, so the
//!   model learns its metric structure on worst-case inputs.
//! * **Trip-es** - the clean triplet loss plus a penalty term that is the
//!   sum of the max-shift displacements themselves, suppressing them
//!   directly. Works best with the cosine metric; under the Euclidean
//!   metric the penalty can blow up, which the divergence guard converts
//!   into a clean `Diverged` error rather than NaN-poisoned weights.
//!
//! A tempting third family, generating the adversarial examples by ascent
//! on the triplet loss itself (the usual recipe for classifiers, whether
//! one-step or iterated), reliably diverges for ranking embeddings: the
//! triplet loss is unbounded above and ascent drags the whole embedding
//! cloud apart faster than the outer step can repair it. Those adaptations
//! are documented here as known-divergent and deliberately not offered.
//!
//! The inner attacks see gradients to the images only (parameters frozen);
//! the outer step treats the perturbed images as constants and
//! backpropagates to parameters through a fresh forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attack::{max_shift_batch, AttackError, Budget};
use crate::data::Dataset;
use crate::metrics::paired_row_distances;
use crate::model::{
    triplet_hinge, ClassIndex, DefenseTag, EmbeddingModel, LossKind, ModelError, TrainConfig,
};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum DefenseError {
    #[error("invalid defense config: {0}")]
    BadConfig(String),
    #[error("defensive training diverged at epoch {epoch} with batch loss {loss}")]
    Diverged { epoch: usize, loss: f32 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Attack(#[from] AttackError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefenseVariant {
    ShiftReplace,
    TripEs,
}

/// Batch losses above this are treated as divergence. Healthy batch losses
/// here are O(margin); the guard turns runaway training into an error
/// instead of a NaN checkpoint.
pub const DIVERGENCE_LIMIT: f32 = 1e6;

#[derive(Clone, Debug)]
pub struct DefenseConfig {
    pub base: TrainConfig,
    /// Inner max-shift budget: the strongest adversary the model trains
    /// against. Defaults to the full ε = 0.3 attack budget.
    pub inner: Budget,
    pub variant: DefenseVariant,
    /// Weight of the shift penalty (trip-es only).
    pub trip_es_weight: f32,
}

impl DefenseConfig {
    pub fn new(base: TrainConfig) -> DefenseConfig {
        DefenseConfig {
            base,
            inner: Budget::from_epsilon(0.3),
            variant: DefenseVariant::ShiftReplace,
            trip_es_weight: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct DefenseHistory {
    /// Mean defensive batch loss per epoch.
    pub epoch_loss: Vec<f32>,
    /// Defensive loss of every batch, in order.
    pub batch_adversarial: Vec<f32>,
    /// Plain triplet loss of the same batches on their clean images.
    pub batch_clean: Vec<f32>,
    /// Triplets dropped because their inner attack failed.
    pub skipped: usize,
}

/// Max-shift counterparts for an interleaved triplet batch `[3B, dim]`.
/// Normally one batched inner attack; if that aborts (non-finite loss or
/// gradient, e.g. parameters already damaged), falls back to per-triplet
/// attacks and drops the offending triplets with a warning. Returns the
/// adversarial pixels and the per-triplet keep mask.
fn inner_adversarial(
    model: &EmbeddingModel,
    flat: &[f32],
    budget: &Budget,
) -> Result<(Vec<f32>, Vec<bool>, usize), AttackError> {
    let d = model.input_dim();
    let triplets = flat.len() / (3 * d);
    match max_shift_batch(model, flat, budget) {
        Ok((adv, _)) => Ok((adv, vec![true; triplets], 0)),
        Err(AttackError::NonFinite { .. }) => {
            let mut adv = flat.to_vec();
            let mut keep = vec![true; triplets];
            let mut skipped = 0;
            for t in 0..triplets {
                let span = t * 3 * d..(t + 1) * 3 * d;
                match max_shift_batch(model, &flat[span.clone()], budget) {
                    Ok((rows, _)) => adv[span].copy_from_slice(&rows),
                    Err(AttackError::NonFinite { step }) => {
                        eprintln!(
                            "warning: inner max-shift attack went non-finite at step {step}; \
                             skipping triplet {t}"
                        );
                        keep[t] = false;
                        skipped += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok((adv, keep, skipped))
        }
        Err(e) => Err(e),
    }
}

/// Rows of `flat` (`[rows, dim]`) whose triplet is kept, as a tensor.
fn kept_tensor(flat: &[f32], dim: usize, keep: &[bool]) -> Tensor {
    let kept = keep.iter().filter(|&&k| k).count();
    let mut out = Vec::with_capacity(kept * 3 * dim);
    for (t, &k) in keep.iter().enumerate() {
        if k {
            out.extend_from_slice(&flat[t * 3 * dim..(t + 1) * 3 * dim]);
        }
    }
    Tensor::from_vec(out, vec![kept * 3, dim])
}

/// Mean triplet loss over an interleaved embedding batch `[3B, n]`.
fn triplet_mean(metric: crate::metrics::Metric, emb: &Tensor, margin: f32) -> Tensor {
    let b = emb.shape()[0] / 3;
    let anchors: Vec<usize> = (0..b).map(|i| 3 * i).collect();
    let positives: Vec<usize> = (0..b).map(|i| 3 * i + 1).collect();
    let negatives: Vec<usize> = (0..b).map(|i| 3 * i + 2).collect();
    let a = emb.select_rows(&anchors);
    let p = emb.select_rows(&positives);
    let n = emb.select_rows(&negatives);
    let d_ap = paired_row_distances(metric, &a, &p);
    let d_an = paired_row_distances(metric, &a, &n);
    triplet_hinge(&d_ap, &d_an, margin).mean()
}

/// Adversarial training. Mirrors plain training exactly (same seed stream,
/// same batch structure) with the inner attack spliced in, so a zero inner
/// budget reproduces the vanilla model bit for bit. The returned model is
/// tagged with its defense variant and inner ε, and carries that tag
/// through checkpoints.
pub fn harden(
    data: &Dataset,
    cfg: &DefenseConfig,
) -> Result<(EmbeddingModel, DefenseHistory), DefenseError> {
    let model = EmbeddingModel::init(cfg.base.arch.clone(), cfg.base.metric, cfg.base.seed);
    harden_model(model, data, cfg)
}

/// The same adversarial loop started from an existing model (adversarial
/// fine-tuning) instead of a fresh initialization. A cold start tends to
/// sink into a degenerate plateau where every embedding direction nearly
/// coincides: the defensive loss sits at the margin with vanishing
/// gradients, absolute shifts look suppressed, but ranks (scale-free) stay
/// exactly as fragile as vanilla. Starting from a converged model keeps
/// the embedding spread out, so the hinge keeps a live gradient toward
/// genuine robustness. The starting model must match the config's
/// architecture and metric; it is copied, not modified.
pub fn harden_from(
    start: &EmbeddingModel,
    data: &Dataset,
    cfg: &DefenseConfig,
) -> Result<(EmbeddingModel, DefenseHistory), DefenseError> {
    if start.arch() != &cfg.base.arch {
        return Err(DefenseError::BadConfig(format!(
            "starting model is `{}`, config wants `{}`",
            start.arch().name,
            cfg.base.arch.name
        )));
    }
    if start.metric() != cfg.base.metric {
        return Err(DefenseError::BadConfig(format!(
            "starting model uses {:?}, config wants {:?}",
            start.metric(),
            cfg.base.metric
        )));
    }
    let copy = EmbeddingModel::from_bytes(&start.to_bytes())?;
    harden_model(copy, data, cfg)
}

fn harden_model(
    mut model: EmbeddingModel,
    data: &Dataset,
    cfg: &DefenseConfig,
) -> Result<(EmbeddingModel, DefenseHistory), DefenseError> {
    assert_eq!(data.dim, cfg.base.arch.input_dim(), "dataset dim vs architecture input");
    let margin = match cfg.base.loss {
        LossKind::Triplet { margin } => margin,
        LossKind::Contrastive { .. } => {
            return Err(DefenseError::BadConfig(
                "defensive training is built on the triplet loss".into(),
            ))
        }
    };
    if !cfg.trip_es_weight.is_finite() || cfg.trip_es_weight < 0.0 {
        return Err(DefenseError::BadConfig(format!(
            "trip_es_weight must be finite and nonnegative, got {}",
            cfg.trip_es_weight
        )));
    }
    let defended = cfg.inner.epsilon > 0.0;
    let classes = ClassIndex::build(data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.base.seed.wrapping_add(0x5151_7e3a));
    let steps = (data.len() / cfg.base.batch).max(1);
    let mut history = DefenseHistory::default();
    for epoch in 0..cfg.base.epochs {
        let mut epoch_loss = 0.0f64;
        for _ in 0..steps {
            let b = cfg.base.batch;
            let mut idx = Vec::with_capacity(3 * b);
            for _ in 0..b {
                let (a, p, n) = classes.sample_triplet(data, &mut rng);
                idx.push(a);
                idx.push(p);
                idx.push(n);
            }
            let clean_flat: Vec<f32> =
                idx.iter().flat_map(|&i| data.image(i).iter().copied()).collect();
            let (adv_flat, keep, skipped) = if defended {
                inner_adversarial(&model, &clean_flat, &cfg.inner)?
            } else {
                (clean_flat.clone(), vec![true; b], 0)
            };
            history.skipped += skipped;
            let kept = keep.iter().filter(|&&k| k).count();
            if kept == 0 {
                return Err(DefenseError::Diverged { epoch, loss: f32::NAN });
            }
            let clean = kept_tensor(&clean_flat, data.dim, &keep);
            let adv = kept_tensor(&adv_flat, data.dim, &keep);

            let tape = Tape::new();
            let tracked = model.tracked_params(&tape);
            let loss = match cfg.variant {
                DefenseVariant::ShiftReplace => {
                    let emb = model.embed_with(&tracked, &adv);
                    triplet_mean(cfg.base.metric, &emb, margin)
                }
                DefenseVariant::TripEs => {
                    let emb_clean = model.embed_with(&tracked, &clean);
                    let base = triplet_mean(cfg.base.metric, &emb_clean, margin);
                    if defended {
                        // shift penalty: both embeddings depend on the
                        // parameters; the perturbation is frozen
                        let emb_adv = model.embed_with(&tracked, &adv);
                        let shifts = paired_row_distances(cfg.base.metric, &emb_adv, &emb_clean);
                        base.add(&shifts.sum().scale(cfg.trip_es_weight / kept as f32))
                    } else {
                        base
                    }
                }
            };
            let value = loss.item();
            if !value.is_finite() || value > DIVERGENCE_LIMIT {
                return Err(DefenseError::Diverged { epoch, loss: value });
            }
            // clean reference loss for the same surviving triplets,
            // computed off the tape
            let clean_value =
                triplet_mean(cfg.base.metric, &model.embed(&clean), margin).item();
            history.batch_adversarial.push(value);
            history.batch_clean.push(clean_value);
            loss.backward();
            model.apply_step(&tracked, cfg.base.lr);
            epoch_loss += value as f64;
        }
        history.epoch_loss.push((epoch_loss / steps as f64) as f32);
    }
    model.set_defense(match cfg.variant {
        DefenseVariant::ShiftReplace => DefenseTag::ShiftReplace { inner_epsilon: cfg.inner.epsilon },
        DefenseVariant::TripEs => DefenseTag::TripEs { inner_epsilon: cfg.inner.epsilon },
    });
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::{max_shift, AttackContext, AttackKind, AttackSpec, AttackTarget, InnerSum};
    use crate::data::{make_synthetic, SyntheticSpec};
    use crate::metrics::Metric;
    use crate::model::{train, Architecture};
    use rand::Rng;

    fn small_data() -> Dataset {
        make_synthetic(&SyntheticSpec { classes: 4, per_class: 40, dim: 16, std: 0.05, seed: 7 })
    }

    fn base_cfg(metric: Metric) -> TrainConfig {
        let mut cfg = TrainConfig::new(Architecture::mlp("t", &[16, 16, 8]), metric);
        cfg.epochs = 3;
        cfg.seed = 3;
        cfg
    }

    fn param_bits(m: &EmbeddingModel) -> Vec<Vec<u32>> {
        m.params().iter().map(|p| p.data().iter().map(|v| v.to_bits()).collect()).collect()
    }

    #[test]
    fn zero_inner_budget_reproduces_vanilla_training_bitwise() {
        let data = small_data();
        let base = base_cfg(Metric::Euclidean);
        let (vanilla, _) = train(&data, &base).unwrap();
        for variant in [DefenseVariant::ShiftReplace, DefenseVariant::TripEs] {
            let mut cfg = DefenseConfig::new(base.clone());
            cfg.inner = Budget::from_epsilon(0.0);
            cfg.variant = variant;
            let (defended, history) = harden(&data, &cfg).unwrap();
            assert_eq!(param_bits(&defended), param_bits(&vanilla), "{variant:?}");
            assert_eq!(history.skipped, 0);
            // logged clean and adversarial losses coincide
            for (a, c) in history.batch_adversarial.iter().zip(&history.batch_clean) {
                assert_eq!(a.to_bits(), c.to_bits());
            }
        }
    }

    #[test]
    fn harden_is_deterministic() {
        let data = small_data();
        let mut cfg = DefenseConfig::new(base_cfg(Metric::Euclidean));
        cfg.base.epochs = 2;
        let (a, _) = harden(&data, &cfg).unwrap();
        let (b, _) = harden(&data, &cfg).unwrap();
        assert_eq!(param_bits(&a), param_bits(&b));
    }

    #[test]
    fn defended_model_is_tagged_and_tag_survives_checkpoint() {
        let data = small_data();
        let mut cfg = DefenseConfig::new(base_cfg(Metric::Euclidean));
        cfg.base.epochs = 1;
        let (model, _) = harden(&data, &cfg).unwrap();
        assert_eq!(model.defense(), Some(DefenseTag::ShiftReplace { inner_epsilon: 0.3 }));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("def.ckpt");
        model.save(&path).unwrap();
        let back = EmbeddingModel::load(&path).unwrap();
        assert_eq!(back.defense(), model.defense());
    }

    #[test]
    fn adversarial_batches_cost_at_least_as_much_as_clean_early() {
        let data = small_data();
        let mut cfg = DefenseConfig::new(base_cfg(Metric::Euclidean));
        cfg.base.epochs = 1;
        let (_, history) = harden(&data, &cfg).unwrap();
        let n = history.batch_adversarial.len();
        assert!(n > 0);
        let harder = history
            .batch_adversarial
            .iter()
            .zip(&history.batch_clean)
            .filter(|(a, c)| *a >= *c)
            .count();
        assert!(
            harder * 10 >= n * 8,
            "adversarial replacement should not make batches cheaper: {harder}/{n}"
        );
    }

    /// Bigger fixture for the behavioral comparisons: the suppression
    /// effect accumulates with SGD steps, so these need more than the
    /// smoke-test epoch counts. Cosine metric bounds the reachable shift,
    /// which is the regime the defense is built for.
    fn defense_pair() -> (Dataset, EmbeddingModel, EmbeddingModel) {
        let data = make_synthetic(&SyntheticSpec {
            classes: 4,
            per_class: 80,
            dim: 16,
            std: 0.05,
            seed: 7,
        });
        let mut base = base_cfg(Metric::Cosine);
        base.epochs = 12;
        let (vanilla, _) = train(&data, &base).unwrap();
        let (defended, _) = harden(&data, &DefenseConfig::new(base)).unwrap();
        (data, vanilla, defended)
    }

    #[test]
    fn hardening_suppresses_reachable_shift() {
        let (data, vanilla, defended) = defense_pair();
        let budget = Budget::from_epsilon(0.3);
        let mut v_mean = 0.0f64;
        let mut d_mean = 0.0f64;
        let probes: Vec<usize> = (0..10).map(|i| 7 + 13 * i).collect();
        for &i in &probes {
            let (_, vs, _) = max_shift(&vanilla, data.image(i), &budget).unwrap();
            let (_, ds, _) = max_shift(&defended, data.image(i), &budget).unwrap();
            v_mean += vs as f64;
            d_mean += ds as f64;
        }
        assert!(
            d_mean < v_mean,
            "defended model should be harder to displace: {d_mean} vs {v_mean}"
        );
    }

    #[test]
    fn hardening_blunts_a_raising_attack() {
        let (data, vanilla, defended) = defense_pair();
        let mut spec =
            AttackSpec::new(AttackKind::CaPlus, vec![5, 90], Budget::from_epsilon(0.3));
        spec.inner = InnerSum::Full;
        let gap = |model: &EmbeddingModel| {
            let ctx = AttackContext::new(model, &data.images, None).unwrap();
            let mut total = 0.0f64;
            let targets = [17usize, 33, 71, 104, 201, 305];
            for &t in &targets {
                let out =
                    crate::attack::run_attack(&ctx, &AttackTarget::Corpus(t), &spec).unwrap();
                total += (out.before.mean - out.after.mean) as f64;
            }
            total / targets.len() as f64
        };
        let v_gap = gap(&vanilla);
        let d_gap = gap(&defended);
        assert!(
            d_gap < v_gap,
            "defense should shrink the rank change: defended {d_gap} vs vanilla {v_gap}"
        );
    }

    #[test]
    fn warm_start_checks_compatibility_and_tags_output() {
        let data = small_data();
        let base = base_cfg(Metric::Euclidean);
        let (vanilla, _) = train(&data, &base).unwrap();
        let mut cfg = DefenseConfig::new(base);
        cfg.base.epochs = 1;
        let (tuned, _) = harden_from(&vanilla, &data, &cfg).unwrap();
        assert_eq!(tuned.defense(), Some(DefenseTag::ShiftReplace { inner_epsilon: 0.3 }));
        assert_ne!(param_bits(&tuned), param_bits(&vanilla), "fine-tuning should move the weights");
        assert!(vanilla.defense().is_none(), "the starting model must stay untouched");

        let mut other_arch = DefenseConfig::new(base_cfg(Metric::Euclidean));
        other_arch.base.arch = Architecture::mlp("other", &[16, 12, 8]);
        assert!(matches!(harden_from(&vanilla, &data, &other_arch), Err(DefenseError::BadConfig(_))));

        let other_metric = DefenseConfig::new(base_cfg(Metric::Cosine));
        assert!(matches!(harden_from(&vanilla, &data, &other_metric), Err(DefenseError::BadConfig(_))));
    }

    #[test]
    fn trip_es_trains_on_cosine_and_penalty_shows_in_loss() {
        let data = small_data();
        let mut cfg = DefenseConfig::new(base_cfg(Metric::Cosine));
        cfg.variant = DefenseVariant::TripEs;
        cfg.base.epochs = 2;
        let (model, history) = harden(&data, &cfg).unwrap();
        assert_eq!(model.defense(), Some(DefenseTag::TripEs { inner_epsilon: 0.3 }));
        // the logged defensive loss includes the nonnegative penalty
        for (a, c) in history.batch_adversarial.iter().zip(&history.batch_clean) {
            assert!(a + 1e-5 >= *c, "penalized loss {a} below clean {c}");
        }
    }

    #[test]
    fn forced_blowup_is_flagged_diverged() {
        let data = small_data();
        let mut cfg = DefenseConfig::new(base_cfg(Metric::Euclidean));
        cfg.variant = DefenseVariant::TripEs;
        cfg.trip_es_weight = 1e12; // drives the first batch loss over the limit
        match harden(&data, &cfg) {
            Err(DefenseError::Diverged { epoch, loss }) => {
                assert_eq!(epoch, 0);
                assert!(loss > DIVERGENCE_LIMIT || !loss.is_finite());
            }
            Err(other) => panic!("expected Diverged, got {other}"),
            Ok(_) => panic!("expected Diverged, training completed"),
        }
    }

    #[test]
    fn contrastive_base_is_rejected() {
        let data = small_data();
        let mut base = base_cfg(Metric::Euclidean);
        base.loss = LossKind::contrastive();
        let cfg = DefenseConfig::new(base);
        assert!(matches!(harden(&data, &cfg), Err(DefenseError::BadConfig(_))));
    }

    #[test]
    fn labels_are_untouched() {
        let data = small_data();
        let before = data.labels.clone();
        let mut cfg = DefenseConfig::new(base_cfg(Metric::Euclidean));
        cfg.base.epochs = 1;
        harden(&data, &cfg).unwrap();
        assert_eq!(data.labels, before);
    }

    #[test]
    fn inner_images_stay_feasible() {
        let data = small_data();
        let (model, _) = train(&data, &base_cfg(Metric::Euclidean)).unwrap();
        let budget = Budget::from_epsilon(0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let idx: Vec<usize> = (0..9).map(|_| rng.gen_range(0..data.len())).collect();
        let flat: Vec<f32> = idx.iter().flat_map(|&i| data.image(i).iter().copied()).collect();
        let (adv, keep, skipped) = inner_adversarial(&model, &flat, &budget).unwrap();
        assert_eq!(keep, vec![true; 3]);
        assert_eq!(skipped, 0);
        crate::attack::assert_feasible(&flat, &adv, budget.epsilon);
    }
}
