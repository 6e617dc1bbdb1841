//! Rank attacks on embedding models: sign-gradient PGD inside an ℓ∞ ball,
//! hinge losses that raise or lower items in a retrieval ranking, and the
//! shared (universal) perturbation variant.
//!
//! Vocabulary used throughout: the *attacked item* is the image being
//! perturbed; its *counterparts* are the corpus items whose ranking
//! relationship to it the attack manipulates. Candidate attacks (CA)
//! perturb a corpus candidate against a set of queries; query attacks (QA)
//! perturb the query against a set of candidates. "+" kinds pull the
//! counterpart ranks toward the top, "−" kinds push them away.
//!
//! All losses are built on the tape, so one backward pass yields the pixel
//! gradient. Reported ranks always use the full corpus; only the loss's
//! inner sum over the corpus may be subsampled.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::Polarity;
use crate::metrics::{
    distances_to_rows, normalized_rank, paired_row_distances, MetricsError, RankReport,
    RankingIndex,
};
use crate::model::{EmbeddingModel, ModelError};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack spec: {0}")]
    BadSpec(String),
    #[error("non-finite loss or gradient at PGD step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

// ── Perturbation budget ─────────────────────────────────────────────────

/// The feasible set of an attack: pixel perturbations with ‖r‖∞ ≤ epsilon
/// that keep the image in [0,1], explored by `iterations` signed steps of
/// size `alpha`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Budget {
    pub epsilon: f32,
    pub alpha: f32,
    pub iterations: usize,
}

impl Budget {
    /// Default step size and iteration count for a given radius:
    /// α = min(max(ε/10, 1/255), 0.01), η = min(max(10, 2ε/α), 30) rounded
    /// up. The quotient is snapped within 1e-6 of an integer before the
    /// ceiling so that decimal radii like 0.1 (where 2ε/α is exactly 20 in
    /// decimal but lands a hair above it in binary) do not gain a step.
    pub fn from_epsilon(epsilon: f32) -> Budget {
        assert!(
            epsilon.is_finite() && (0.0..=1.0).contains(&epsilon),
            "budget: epsilon {epsilon} outside [0,1]"
        );
        let alpha = (epsilon / 10.0).max(1.0 / 255.0).min(0.01);
        let quotient = 2.0 * epsilon as f64 / alpha as f64;
        let iterations = (quotient.max(10.0).min(30.0) - 1e-6).ceil() as usize;
        Budget { epsilon, alpha, iterations }
    }
}

/// Sign function with sgn(0) = 0: pixels with zero gradient must not move,
/// unlike with `f32::signum` which maps 0 to 1.
pub fn sgn(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Minimize,
    Maximize,
}

/// Panics unless every pixel of `x` lies in the feasible set around `x0`:
/// within the f32-computed box [x0−ε, x0+ε] intersected with [0,1].
pub fn assert_feasible(x0: &[f32], x: &[f32], epsilon: f32) {
    assert_eq!(x0.len(), x.len(), "feasibility: length {} vs {}", x0.len(), x.len());
    for j in 0..x.len() {
        let lo = (x0[j] - epsilon).max(0.0);
        let hi = (x0[j] + epsilon).min(1.0);
        assert!(
            x[j] >= lo && x[j] <= hi,
            "infeasible pixel {j}: {} outside [{lo}, {hi}] (x0 {} epsilon {epsilon})",
            x[j],
            x0[j]
        );
    }
}

/// Projected sign-gradient descent (or ascent) from `x0`, no random start,
/// exactly `budget.iterations` steps. Each step clamps to the ε-box around
/// `x0` and then to [0,1]; with `x0` in [0,1] this double clamp lands
/// exactly in the feasible set, asserted every step.
///
/// `loss_grad` maps the current image to (loss value, pixel gradient).
/// Returns the final image and the loss recorded at the start of each
/// iteration.
pub fn pgd<F>(
    x0: &[f32],
    budget: &Budget,
    direction: Direction,
    mut loss_grad: F,
) -> Result<(Vec<f32>, Vec<f32>), AttackError>
where
    F: FnMut(&[f32]) -> Result<(f32, Vec<f32>), AttackError>,
{
    if x0.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(AttackError::BadSpec("start image has pixels outside [0,1]".into()));
    }
    let eps = budget.epsilon;
    let step = match direction {
        Direction::Minimize => -budget.alpha,
        Direction::Maximize => budget.alpha,
    };
    let mut x = x0.to_vec();
    let mut trace = Vec::with_capacity(budget.iterations);
    for it in 0..budget.iterations {
        let (loss, g) = loss_grad(&x)?;
        if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Err(AttackError::NonFinite { step: it });
        }
        assert_eq!(g.len(), x.len(), "pgd: gradient length {} vs image {}", g.len(), x.len());
        trace.push(loss);
        for j in 0..x.len() {
            let lo = (x0[j] - eps).max(0.0);
            let hi = (x0[j] + eps).min(1.0);
            x[j] = (x[j] + step * sgn(g[j])).clamp(lo, hi);
        }
        assert_feasible(x0, &x, eps);
    }
    Ok((x, trace))
}

// ── Attack kinds and specs ──────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttackKind {
    /// Raise a candidate toward the top of its queries' rankings.
    CaPlus,
    /// Push a candidate away from its queries.
    CaMinus,
    /// Perturb the query so chosen candidates rise.
    QaPlus,
    /// Perturb the query so chosen candidates fall.
    QaMinus,
    /// Push the item's own embedding as far as possible (no ranking goal).
    MaxShift,
    /// Pure-distance alternative to CA+: minimize Σ d(q, c̃), no hinge.
    DistCaPlus,
    /// Pure-distance alternative to QA−: maximize Σ d(q̃, c), no hinge.
    DistQaMinus,
}

/// Which role the attacked item plays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    /// Attacked item is a candidate; counterparts are queries.
    Candidate,
    /// Attacked item is the query; counterparts are candidates.
    Query,
    /// No counterparts; the item fights its own embedding.
    SelfShift,
}

impl AttackKind {
    pub const ALL: [AttackKind; 7] = [
        AttackKind::CaPlus,
        AttackKind::CaMinus,
        AttackKind::QaPlus,
        AttackKind::QaMinus,
        AttackKind::MaxShift,
        AttackKind::DistCaPlus,
        AttackKind::DistQaMinus,
    ];

    /// The four hinge-ranked kinds, the ones with a universal variant.
    pub const RANKED: [AttackKind; 4] =
        [AttackKind::CaPlus, AttackKind::CaMinus, AttackKind::QaPlus, AttackKind::QaMinus];

    pub fn label(self) -> &'static str {
        match self {
            AttackKind::CaPlus => "CA+",
            AttackKind::CaMinus => "CA-",
            AttackKind::QaPlus => "QA+",
            AttackKind::QaMinus => "QA-",
            AttackKind::MaxShift => "MaxShift",
            AttackKind::DistCaPlus => "DistAlt-CA+",
            AttackKind::DistQaMinus => "DistAlt-QA-",
        }
    }

    pub fn side(self) -> Side {
        match self {
            AttackKind::CaPlus | AttackKind::CaMinus | AttackKind::DistCaPlus => Side::Candidate,
            AttackKind::QaPlus | AttackKind::QaMinus | AttackKind::DistQaMinus => Side::Query,
            AttackKind::MaxShift => Side::SelfShift,
        }
    }

    /// How counterparts are sampled: raising kinds start from unrelated
    /// (uniform) counterparts, lowering kinds from the item's near pool.
    pub fn polarity(self) -> Option<Polarity> {
        match self {
            AttackKind::CaPlus | AttackKind::QaPlus | AttackKind::DistCaPlus => {
                Some(Polarity::Raise)
            }
            AttackKind::CaMinus | AttackKind::QaMinus | AttackKind::DistQaMinus => {
                Some(Polarity::Lower)
            }
            AttackKind::MaxShift => None,
        }
    }

    fn direction(self) -> Direction {
        match self {
            AttackKind::MaxShift => Direction::Maximize,
            _ => Direction::Minimize,
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ca+" => Ok(AttackKind::CaPlus),
            "ca-" => Ok(AttackKind::CaMinus),
            "qa+" => Ok(AttackKind::QaPlus),
            "qa-" => Ok(AttackKind::QaMinus),
            "maxshift" | "max-shift" => Ok(AttackKind::MaxShift),
            "distalt-ca+" | "dist-ca+" => Ok(AttackKind::DistCaPlus),
            "distalt-qa-" | "dist-qa-" => Ok(AttackKind::DistQaMinus),
            other => Err(format!(
                "unknown attack kind '{other}' (CA+|CA-|QA+|QA-|MaxShift|DistAlt-CA+|DistAlt-QA-)"
            )),
        }
    }
}

/// How the loss's inner sum over the corpus is evaluated. Reported ranks
/// always use the full corpus regardless.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InnerSum {
    /// Full corpus up to 4096 items, then a fixed random 256-subsample.
    Auto,
    Full,
    Subsample(usize),
}

impl InnerSum {
    fn cap(self, pool: usize) -> Option<usize> {
        match self {
            InnerSum::Full => None,
            InnerSum::Auto => (pool > 4096).then_some(256),
            InnerSum::Subsample(k) => Some(k.min(pool)),
        }
    }
}

/// Everything defining one attack except the item it runs on.
#[derive(Clone, Debug)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// Corpus indices: queries for candidate attacks, candidates for query
    /// attacks, empty for MaxShift. Must be distinct and exclude the item.
    pub counterparts: Vec<usize>,
    pub budget: Budget,
    /// Weight ξ of the semantics-preserving term (query attacks only).
    /// Zero skips the term entirely, bit-for-bit.
    pub xi: f32,
    /// Size G of the frozen near-neighbor pool used by the SP term and the
    /// SP rank report. Zero disables both.
    pub sp_count: usize,
    pub inner: InnerSum,
    /// Seed for the inner-sum subsample.
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, counterparts: Vec<usize>, budget: Budget) -> AttackSpec {
        AttackSpec { kind, counterparts, budget, xi: 0.0, sp_count: 5, inner: InnerSum::Auto, seed: 0 }
    }
}

/// The image under attack: a corpus member (by index) or an arbitrary image.
#[derive(Clone, Debug)]
pub enum AttackTarget {
    Corpus(usize),
    Image(Vec<f32>),
}

impl AttackTarget {
    /// The corpus slot to exclude from rank comparisons and inner sums.
    pub fn slot(&self) -> Option<usize> {
        match self {
            AttackTarget::Corpus(i) => Some(*i),
            AttackTarget::Image(_) => None,
        }
    }

    fn image(&self, ctx: &AttackContext) -> Result<Vec<f32>, AttackError> {
        match self {
            AttackTarget::Corpus(i) => {
                if *i >= ctx.len() {
                    return Err(AttackError::BadSpec(format!(
                        "target index {i} out of bounds for corpus of {}",
                        ctx.len()
                    )));
                }
                Ok(ctx.image(*i).to_vec())
            }
            AttackTarget::Image(v) => {
                let d = ctx.model.input_dim();
                if v.len() != d {
                    return Err(AttackError::BadSpec(format!(
                        "target image has {} pixels, model wants {d}",
                        v.len()
                    )));
                }
                Ok(v.clone())
            }
        }
    }
}

// ── Attack context ──────────────────────────────────────────────────────

/// A model plus the fixed corpus it ranks over: the shared, immutable state
/// of every attack. Building one embeds the whole corpus once.
pub struct AttackContext<'a> {
    model: &'a EmbeddingModel,
    images: &'a [f32],
    index: RankingIndex,
}

impl<'a> AttackContext<'a> {
    pub fn new(
        model: &'a EmbeddingModel,
        images: &'a [f32],
        labels: Option<Vec<u8>>,
    ) -> Result<AttackContext<'a>, AttackError> {
        let d = model.input_dim();
        if images.is_empty() || images.len() % d != 0 {
            return Err(AttackError::BadSpec(format!(
                "corpus of {} pixels is not a nonempty multiple of {d}",
                images.len()
            )));
        }
        let index = model.index(images, labels)?;
        Ok(AttackContext { model, images, index })
    }

    pub fn model(&self) -> &EmbeddingModel {
        self.model
    }

    pub fn index(&self) -> &RankingIndex {
        &self.index
    }

    pub fn images(&self) -> &[f32] {
        self.images
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let d = self.model.input_dim();
        &self.images[i * d..(i + 1) * d]
    }
}

// ── Outcome ─────────────────────────────────────────────────────────────

/// Rank bookkeeping around one adversarial image. Rank reports hold one
/// entry per counterpart; MaxShift, having none, reports empty ranks with a
/// NaN mean.
#[derive(Clone, Debug)]
pub struct RankEvaluation {
    pub before: RankReport,
    pub after: RankReport,
    pub sp_before: Option<RankReport>,
    pub sp_after: Option<RankReport>,
    /// Distance between the item's embedding before and after.
    pub shift: f32,
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub adversarial: Vec<f32>,
    pub before: RankReport,
    pub after: RankReport,
    pub sp_before: Option<RankReport>,
    pub sp_after: Option<RankReport>,
    pub shift: f32,
    /// Loss at the start of each PGD iteration.
    pub loss_trace: Vec<f32>,
}

fn report(ranks: Vec<f32>) -> RankReport {
    let mean = if ranks.is_empty() {
        f32::NAN
    } else {
        (ranks.iter().map(|&v| v as f64).sum::<f64>() / ranks.len() as f64) as f32
    };
    RankReport { per_target: ranks, mean }
}

// ── Loss construction ───────────────────────────────────────────────────

enum LossPlan {
    /// Hinge CA±: constants d(q_i, x_t) laid out [k, w] so the tracked
    /// query-distance row broadcasts over it.
    CaHinge { q_rows: Tensor, dxq: Tensor, k: usize },
    DistCa { q_rows: Tensor },
    /// Hinge QA±, with the optional frozen SP rows sharing the inner sum.
    QaHinge { c_rows: Tensor, x_rows: Tensor, sp_rows: Option<Tensor>, xi: f32 },
    DistQa { c_rows: Tensor },
    Shift { e0: Tensor },
}

struct PreparedAttack {
    kind: AttackKind,
    plan: LossPlan,
    sp_idx: Option<Vec<usize>>,
}

impl PreparedAttack {
    /// Loss value and pixel gradient at image `x`.
    fn loss_grad(&self, model: &EmbeddingModel, x: &[f32]) -> Result<(f32, Vec<f32>), AttackError> {
        let tape = Tape::new();
        let xt = tape.leaf(x.to_vec(), vec![1, model.input_dim()]);
        let loss = self.loss_tensor(model, &xt);
        let v = loss.item();
        loss.backward();
        Ok((v, xt.grad().expect("attack input is tracked")))
    }

    fn loss_value(&self, model: &EmbeddingModel, x: &[f32]) -> f32 {
        let t = Tensor::from_vec(x.to_vec(), vec![1, model.input_dim()]);
        self.loss_tensor(model, &t).item()
    }

    /// Build the loss for this attack with `xt` standing in for the
    /// attacked image (tracked or constant, possibly a row of a batch).
    fn loss_tensor(&self, model: &EmbeddingModel, xt: &Tensor) -> Tensor {
        let e = model.embed(xt);
        self.loss_from_embedding(model, &e)
    }

    fn loss_from_embedding(&self, model: &EmbeddingModel, e: &Tensor) -> Tensor {
        let metric = model.metric();
        match (&self.plan, self.kind) {
            (LossPlan::CaHinge { q_rows, dxq, k }, kind) => {
                let d_qc = distances_to_rows(metric, e, q_rows);
                let grid = d_qc.broadcast_rows(*k);
                let hinge = match kind {
                    AttackKind::CaPlus => grid.sub(dxq),
                    AttackKind::CaMinus => dxq.sub(&grid),
                    _ => unreachable!("hinge plan built for {kind:?}"),
                };
                hinge.relu().sum()
            }
            (LossPlan::DistCa { q_rows }, _) => distances_to_rows(metric, e, q_rows).sum(),
            (LossPlan::QaHinge { c_rows, x_rows, sp_rows, xi }, kind) => {
                let raise = matches!(kind, AttackKind::QaPlus);
                let d_qx = distances_to_rows(metric, e, x_rows);
                let mut loss = qa_hinge(metric, e, c_rows, &d_qx, raise);
                if *xi > 0.0 {
                    let sp = sp_rows.as_ref().expect("xi > 0 requires an SP pool");
                    loss = loss.add(&qa_hinge(metric, e, sp, &d_qx, true).scale(*xi));
                }
                loss
            }
            (LossPlan::DistQa { c_rows }, _) => {
                distances_to_rows(metric, e, c_rows).sum().scale(-1.0)
            }
            (LossPlan::Shift { e0 }, _) => paired_row_distances(metric, e, e0).sum(),
        }
    }
}

/// Σ over rows of `c_rows` of Σ_x hinge terms against the shared inner
/// distances `d_qx`. `raise` selects [d(q,c) − d(q,x)]_+, otherwise its
/// mirror.
fn qa_hinge(
    metric: crate::metrics::Metric,
    e: &Tensor,
    c_rows: &Tensor,
    d_qx: &Tensor,
    raise: bool,
) -> Tensor {
    let m = c_rows.shape()[0];
    let mut total: Option<Tensor> = None;
    for i in 0..m {
        let d_ci = distances_to_rows(metric, e, &c_rows.row(i));
        let h = if raise { d_ci.sub(d_qx) } else { d_qx.sub(&d_ci) }.relu().sum();
        total = Some(match total {
            Some(t) => t.add(&h),
            None => h,
        });
    }
    total.expect("qa_hinge: no counterpart rows")
}

/// Deterministic inner-sum index set: the corpus minus the attacked slot,
/// optionally subsampled (sorted, drawn from a seeded stream).
pub(crate) fn choose_inner(
    n: usize,
    slot: Option<usize>,
    inner: InnerSum,
    seed: u64,
) -> Vec<usize> {
    let pool: Vec<usize> = (0..n).filter(|i| Some(*i) != slot).collect();
    match inner.cap(pool.len()) {
        None => pool,
        Some(k) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1f3_5a5a_9e1b_0007);
            let mut picks = rand::seq::index::sample(&mut rng, pool.len(), k).into_vec();
            picks.sort_unstable();
            picks.into_iter().map(|i| pool[i]).collect()
        }
    }
}

fn has_duplicates(ids: &[usize]) -> bool {
    let mut seen = ids.to_vec();
    seen.sort_unstable();
    seen.windows(2).any(|w| w[0] == w[1])
}

fn validate_counterparts(
    ctx: &AttackContext,
    kind: AttackKind,
    counterparts: &[usize],
    slot: Option<usize>,
) -> Result<(), AttackError> {
    if kind.side() == Side::SelfShift {
        if !counterparts.is_empty() {
            return Err(AttackError::BadSpec("MaxShift takes no counterparts".into()));
        }
        return Ok(());
    }
    if counterparts.is_empty() {
        return Err(AttackError::BadSpec(format!("{kind} needs at least one counterpart")));
    }
    if has_duplicates(counterparts) {
        return Err(AttackError::BadSpec("counterpart indices must be distinct".into()));
    }
    if let Some(&bad) = counterparts.iter().find(|&&c| c >= ctx.len()) {
        return Err(AttackError::BadSpec(format!(
            "counterpart {bad} out of bounds for corpus of {}",
            ctx.len()
        )));
    }
    if let Some(s) = slot {
        if counterparts.contains(&s) {
            return Err(AttackError::BadSpec(format!(
                "attacked item {s} cannot be its own counterpart"
            )));
        }
    }
    Ok(())
}

fn prepare(
    ctx: &AttackContext,
    target: &AttackTarget,
    spec: &AttackSpec,
    x0: &[f32],
) -> Result<PreparedAttack, AttackError> {
    let slot = target.slot();
    validate_counterparts(ctx, spec.kind, &spec.counterparts, slot)?;
    if !spec.xi.is_finite() || spec.xi < 0.0 {
        return Err(AttackError::BadSpec(format!("xi must be finite and nonnegative, got {}", spec.xi)));
    }
    if spec.xi > 0.0 && !matches!(spec.kind, AttackKind::QaPlus | AttackKind::QaMinus) {
        return Err(AttackError::BadSpec(format!("{} has no semantics-preserving term", spec.kind)));
    }
    if spec.xi > 0.0 && spec.sp_count == 0 {
        return Err(AttackError::BadSpec("xi > 0 needs a nonempty SP pool (sp_count)".into()));
    }
    if matches!(spec.inner, InnerSum::Subsample(0)) {
        return Err(AttackError::BadSpec("inner subsample size must be positive".into()));
    }
    let metric = ctx.model.metric();
    let (plan, sp_idx) = match spec.kind.side() {
        Side::SelfShift => {
            let e0 = Tensor::from_vec(
                ctx.model.embed_slice(x0),
                vec![1, ctx.model.embed_dim()],
            );
            (LossPlan::Shift { e0 }, None)
        }
        Side::Candidate => {
            let q_rows = ctx.index.embeddings_of(&spec.counterparts);
            if spec.kind == AttackKind::DistCaPlus {
                (LossPlan::DistCa { q_rows }, None)
            } else {
                let inner = choose_inner(ctx.len(), slot, spec.inner, spec.seed);
                if inner.is_empty() {
                    return Err(AttackError::BadSpec(
                        "corpus too small: inner sum has no items".into(),
                    ));
                }
                let w = spec.counterparts.len();
                let mut dxq = Vec::with_capacity(inner.len() * w);
                for &x in &inner {
                    for &q in &spec.counterparts {
                        dxq.push(metric.distance(ctx.index.embedding(q), ctx.index.embedding(x))?);
                    }
                }
                let k = inner.len();
                let dxq = Tensor::from_vec(dxq, vec![k, w]);
                (LossPlan::CaHinge { q_rows, dxq, k }, None)
            }
        }
        Side::Query => {
            let c_rows = ctx.index.embeddings_of(&spec.counterparts);
            let sp_idx = if spec.sp_count > 0 {
                let mut excl = spec.counterparts.clone();
                if let Some(s) = slot {
                    excl.push(s);
                }
                if ctx.len() - excl.len() < spec.sp_count {
                    return Err(AttackError::BadSpec(format!(
                        "SP pool of {} wants {} items besides the query and counterparts",
                        ctx.len() - excl.len(),
                        spec.sp_count
                    )));
                }
                let q_emb = ctx.model.embed_slice(x0);
                Some(ctx.index.nearest(&q_emb, spec.sp_count, &excl)?)
            } else {
                None
            };
            if spec.kind == AttackKind::DistQaMinus {
                (LossPlan::DistQa { c_rows }, sp_idx)
            } else {
                let inner = choose_inner(ctx.len(), slot, spec.inner, spec.seed);
                if inner.is_empty() {
                    return Err(AttackError::BadSpec(
                        "corpus too small: inner sum has no items".into(),
                    ));
                }
                let x_rows = ctx.index.embeddings_of(&inner);
                let sp_rows = match (&sp_idx, spec.xi > 0.0) {
                    (Some(ids), true) => Some(ctx.index.embeddings_of(ids)),
                    _ => None,
                };
                (LossPlan::QaHinge { c_rows, x_rows, sp_rows, xi: spec.xi }, sp_idx)
            }
        }
    };
    Ok(PreparedAttack { kind: spec.kind, plan, sp_idx })
}

/// The value of the attack objective at `image` (the objective PGD
/// minimizes, or maximizes for MaxShift). Exposed for loss inspection and
/// cross-checks.
pub fn attack_loss(
    ctx: &AttackContext,
    target: &AttackTarget,
    spec: &AttackSpec,
    image: &[f32],
) -> Result<f32, AttackError> {
    let x0 = target.image(ctx)?;
    if image.len() != x0.len() {
        return Err(AttackError::BadSpec(format!(
            "probe image has {} pixels, model wants {}",
            image.len(),
            x0.len()
        )));
    }
    let prepared = prepare(ctx, target, spec, &x0)?;
    Ok(prepared.loss_value(ctx.model, image))
}

/// The attack objective and its pixel gradient at `image`: exactly what
/// one PGD step observes. Exposed for gradient checks and custom outer
/// optimizers.
pub fn attack_loss_grad(
    ctx: &AttackContext,
    target: &AttackTarget,
    spec: &AttackSpec,
    image: &[f32],
) -> Result<(f32, Vec<f32>), AttackError> {
    let x0 = target.image(ctx)?;
    if image.len() != x0.len() {
        return Err(AttackError::BadSpec(format!(
            "probe image has {} pixels, model wants {}",
            image.len(),
            x0.len()
        )));
    }
    let prepared = prepare(ctx, target, spec, &x0)?;
    prepared.loss_grad(ctx.model, image)
}

// ── Rank evaluation ─────────────────────────────────────────────────────

/// Rank the attack's counterparts before and after the perturbation, over
/// the full corpus. Excludes only the attacked item's own slot (if it is a
/// corpus member): the attacked item plays query or replaced-candidate and
/// is not ranked against itself. `sp` optionally adds near-pool reports for
/// query-side kinds.
pub fn evaluate_attack(
    ctx: &AttackContext,
    kind: AttackKind,
    target: &AttackTarget,
    adversarial: &[f32],
    counterparts: &[usize],
    sp: Option<&[usize]>,
) -> Result<RankEvaluation, AttackError> {
    let x0 = target.image(ctx)?;
    let slot = target.slot();
    let metric = ctx.model.metric();
    let e0 = ctx.model.embed_slice(&x0);
    let e1 = ctx.model.embed_slice(adversarial);
    let shift = metric.distance(&e0, &e1)?;
    let n_eff = ctx.len() - usize::from(slot.is_some());
    match kind.side() {
        Side::SelfShift => Ok(RankEvaluation {
            before: report(vec![]),
            after: report(vec![]),
            sp_before: None,
            sp_after: None,
            shift,
        }),
        Side::Candidate => {
            let mut before = Vec::with_capacity(counterparts.len());
            let mut after = Vec::with_capacity(counterparts.len());
            for &q in counterparts {
                let qe = ctx.index.embedding(q);
                let dq = ctx.index.distances_from(qe)?;
                let rb = RankingIndex::rank_from_distances(&dq, metric.distance(qe, &e0)?, slot);
                let ra = RankingIndex::rank_from_distances(&dq, metric.distance(qe, &e1)?, slot);
                before.push(normalized_rank(rb, n_eff));
                after.push(normalized_rank(ra, n_eff));
            }
            Ok(RankEvaluation {
                before: report(before),
                after: report(after),
                sp_before: None,
                sp_after: None,
                shift,
            })
        }
        Side::Query => {
            let d0 = ctx.index.distances_from(&e0)?;
            let d1 = ctx.index.distances_from(&e1)?;
            let rank = |dists: &[f32], c: usize| {
                normalized_rank(RankingIndex::rank_from_distances(dists, dists[c], slot), n_eff)
            };
            let before: Vec<f32> = counterparts.iter().map(|&c| rank(&d0, c)).collect();
            let after: Vec<f32> = counterparts.iter().map(|&c| rank(&d1, c)).collect();
            let sp_before = sp.map(|ids| report(ids.iter().map(|&s| rank(&d0, s)).collect()));
            let sp_after = sp.map(|ids| report(ids.iter().map(|&s| rank(&d1, s)).collect()));
            Ok(RankEvaluation {
                before: report(before),
                after: report(after),
                sp_before,
                sp_after,
                shift,
            })
        }
    }
}

/// Run one attack end to end: prepare the loss, run PGD, re-rank.
pub fn run_attack(
    ctx: &AttackContext,
    target: &AttackTarget,
    spec: &AttackSpec,
) -> Result<AttackOutcome, AttackError> {
    let x0 = target.image(ctx)?;
    let prepared = prepare(ctx, target, spec, &x0)?;
    let model = ctx.model;
    let (adversarial, loss_trace) = if spec.kind == AttackKind::MaxShift {
        max_shift_batch(model, &x0, &spec.budget)?
    } else {
        pgd(&x0, &spec.budget, spec.kind.direction(), |x| prepared.loss_grad(model, x))?
    };
    let eval = evaluate_attack(
        ctx,
        spec.kind,
        target,
        &adversarial,
        &spec.counterparts,
        prepared.sp_idx.as_deref(),
    )?;
    Ok(AttackOutcome {
        adversarial,
        before: eval.before,
        after: eval.after,
        sp_before: eval.sp_before,
        sp_after: eval.sp_after,
        shift: eval.shift,
        loss_trace,
    })
}

// ── Max-shift convenience ───────────────────────────────────────────────

/// Maximize every image's embedding displacement at once. `xs` holds B
/// images row-major; the returned layout matches. Rows are independent, so
/// this equals B single-image runs bit for bit, at a fraction of the tape
/// overhead. Used heavily by adversarial training.
///
/// The displacement objective is flat at its own start: at x̃ = x0 the
/// distance and its gradient are both exactly zero, so sign steps would
/// never leave. When the gradient vanishes identically, the step instead
/// pushes every pixel toward the farther wall of its feasible interval, a
/// deterministic escape that is optimal for a linear embedding; as soon as
/// the true gradient is nonzero it takes over.
pub fn max_shift_batch(
    model: &EmbeddingModel,
    xs: &[f32],
    budget: &Budget,
) -> Result<(Vec<f32>, Vec<f32>), AttackError> {
    let d = model.input_dim();
    assert_eq!(xs.len() % d, 0, "max_shift_batch: {} pixels not a multiple of {d}", xs.len());
    let b = xs.len() / d;
    let eps = budget.epsilon;
    let e0 = Tensor::from_vec(model.embed_slice(xs), vec![b, model.embed_dim()]);
    pgd(xs, budget, Direction::Maximize, |x| {
        let tape = Tape::new();
        let xt = tape.leaf(x.to_vec(), vec![b, d]);
        let e = model.embed(&xt);
        let loss = paired_row_distances(model.metric(), &e, &e0).sum();
        let v = loss.item();
        loss.backward();
        let mut g = xt.grad().expect("batch input is tracked");
        if g.iter().all(|&v| v == 0.0) {
            for j in 0..g.len() {
                let hi = (xs[j] + eps).min(1.0) - xs[j];
                let lo = xs[j] - (xs[j] - eps).max(0.0);
                g[j] = if hi >= lo { 1.0 } else { -1.0 };
            }
        }
        Ok((v, g))
    })
}

/// Single-image max-shift: returns (adversarial, achieved shift, trace).
pub fn max_shift(
    model: &EmbeddingModel,
    x0: &[f32],
    budget: &Budget,
) -> Result<(Vec<f32>, f32, Vec<f32>), AttackError> {
    let (adv, trace) = max_shift_batch(model, x0, budget)?;
    let shift = model.metric().distance(&model.embed_slice(x0), &model.embed_slice(&adv))?;
    Ok((adv, shift, trace))
}

// ── Universal (shared) perturbation ─────────────────────────────────────

/// Counterpart protocol for a shared perturbation: raising kinds share one
/// set across all targets, lowering kinds need each target's own near pool.
#[derive(Clone, Debug)]
pub enum UniversalCounterparts {
    Shared(Vec<usize>),
    PerTarget(Vec<Vec<usize>>),
}

#[derive(Clone, Debug)]
pub struct UniversalSpec {
    /// One of the four hinge-ranked kinds.
    pub kind: AttackKind,
    pub counterparts: UniversalCounterparts,
    pub epsilon: f32,
    /// Targets per gradient step.
    pub batch: usize,
    pub iterations: usize,
    pub inner: InnerSum,
    pub seed: u64,
}

impl UniversalSpec {
    /// Defaults: batch 32, 5× the per-image iteration count for this
    /// radius, automatic inner sum.
    pub fn new(kind: AttackKind, counterparts: UniversalCounterparts, epsilon: f32) -> UniversalSpec {
        let per_image = Budget::from_epsilon(epsilon);
        UniversalSpec {
            kind,
            counterparts,
            epsilon,
            batch: 32,
            iterations: 5 * per_image.iterations,
            inner: InnerSum::Auto,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct UniversalOutcome {
    /// The shared pixel perturbation r, ‖r‖∞ ≤ ε.
    pub perturbation: Vec<f32>,
    pub loss_trace: Vec<f32>,
}

/// clamp(x + r, 0, 1): how a shared perturbation is applied to any image.
pub fn apply_universal(x: &[f32], r: &[f32]) -> Vec<f32> {
    assert_eq!(x.len(), r.len(), "apply_universal: {} pixels vs r of {}", x.len(), r.len());
    x.iter().zip(r).map(|(&a, &b)| (a + b).clamp(0.0, 1.0)).collect()
}

fn universal_prepare(
    ctx: &AttackContext,
    targets: &[usize],
    spec: &UniversalSpec,
) -> Result<Vec<PreparedAttack>, AttackError> {
    if !AttackKind::RANKED.contains(&spec.kind) {
        return Err(AttackError::BadSpec(format!(
            "universal perturbations exist for hinge-ranked kinds only, not {}",
            spec.kind
        )));
    }
    if targets.is_empty() {
        return Err(AttackError::BadSpec("universal attack needs at least one target".into()));
    }
    if has_duplicates(targets) {
        return Err(AttackError::BadSpec("universal targets must be distinct".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= ctx.len()) {
        return Err(AttackError::BadSpec(format!(
            "target {bad} out of bounds for corpus of {}",
            ctx.len()
        )));
    }
    if let UniversalCounterparts::PerTarget(sets) = &spec.counterparts {
        if sets.len() != targets.len() {
            return Err(AttackError::BadSpec(format!(
                "{} counterpart sets for {} targets",
                sets.len(),
                targets.len()
            )));
        }
    }
    if matches!(spec.inner, InnerSum::Subsample(0)) {
        return Err(AttackError::BadSpec("inner subsample size must be positive".into()));
    }
    // One base inner sample shared by all targets; each target drops itself.
    let base = choose_inner(ctx.len(), None, spec.inner, spec.seed);
    let metric = ctx.model.metric();
    let mut plans = Vec::with_capacity(targets.len());
    for (pos, &t) in targets.iter().enumerate() {
        let counterparts = match &spec.counterparts {
            UniversalCounterparts::Shared(c) => c.as_slice(),
            UniversalCounterparts::PerTarget(sets) => sets[pos].as_slice(),
        };
        validate_counterparts(ctx, spec.kind, counterparts, Some(t))?;
        let inner: Vec<usize> = base.iter().copied().filter(|&i| i != t).collect();
        if inner.is_empty() {
            return Err(AttackError::BadSpec("corpus too small: inner sum has no items".into()));
        }
        let plan = match spec.kind.side() {
            Side::Candidate => {
                let q_rows = ctx.index.embeddings_of(counterparts);
                let mut dxq = Vec::with_capacity(inner.len() * counterparts.len());
                for &x in &inner {
                    for &q in counterparts {
                        dxq.push(metric.distance(ctx.index.embedding(q), ctx.index.embedding(x))?);
                    }
                }
                let k = inner.len();
                let dxq = Tensor::from_vec(dxq, vec![k, counterparts.len()]);
                LossPlan::CaHinge { q_rows, dxq, k }
            }
            Side::Query => LossPlan::QaHinge {
                c_rows: ctx.index.embeddings_of(counterparts),
                x_rows: ctx.index.embeddings_of(&inner),
                sp_rows: None,
                xi: 0.0,
            },
            Side::SelfShift => unreachable!("kind already restricted to ranked"),
        };
        plans.push(PreparedAttack { kind: spec.kind, plan, sp_idx: None });
    }
    Ok(plans)
}

/// Sum of the per-target attack losses at shared perturbation `r`, each
/// target perturbed as clamp(x+r, 0, 1). This is the objective the
/// universal PGD optimizes (via mini-batch averages of the same terms).
pub fn universal_loss(
    ctx: &AttackContext,
    targets: &[usize],
    spec: &UniversalSpec,
    r: &[f32],
) -> Result<f32, AttackError> {
    let d = ctx.model.input_dim();
    if r.len() != d {
        return Err(AttackError::BadSpec(format!("r has {} pixels, model wants {d}", r.len())));
    }
    let plans = universal_prepare(ctx, targets, spec)?;
    let mut total = 0.0f64;
    for (plan, &t) in plans.iter().zip(targets) {
        let x = apply_universal(ctx.image(t), r);
        total += plan.loss_value(ctx.model, &x) as f64;
    }
    Ok(total as f32)
}

/// Optimize one shared perturbation over all targets: signed gradient steps
/// on r (projected to ‖r‖∞ ≤ ε), gradient averaged over a target
/// mini-batch per step, with feasibility enforced by clamping inside the
/// loss graph.
pub fn universal_perturbation(
    ctx: &AttackContext,
    targets: &[usize],
    spec: &UniversalSpec,
) -> Result<UniversalOutcome, AttackError> {
    let plans = universal_prepare(ctx, targets, spec)?;
    if spec.batch == 0 {
        return Err(AttackError::BadSpec("universal batch must be positive".into()));
    }
    assert!(
        spec.epsilon.is_finite() && (0.0..=1.0).contains(&spec.epsilon),
        "universal: epsilon {} outside [0,1]",
        spec.epsilon
    );
    let eps = spec.epsilon;
    let alpha = Budget::from_epsilon(eps).alpha;
    let d = ctx.model.input_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7u64.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut r = vec![0.0f32; d];
    let mut trace = Vec::with_capacity(spec.iterations);
    for step in 0..spec.iterations {
        let chosen: Vec<usize> = if targets.len() <= spec.batch {
            (0..targets.len()).collect()
        } else {
            let mut v = rand::seq::index::sample(&mut rng, targets.len(), spec.batch).into_vec();
            v.sort_unstable();
            v
        };
        let tape = Tape::new();
        let rt = tape.leaf(r.clone(), vec![1, d]);
        let mut batch_images = Vec::with_capacity(chosen.len() * d);
        for &pos in &chosen {
            batch_images.extend_from_slice(ctx.image(targets[pos]));
        }
        let xb = Tensor::from_vec(batch_images, vec![chosen.len(), d]);
        let perturbed = xb.add(&rt).clamp(0.0, 1.0);
        let emb = ctx.model.embed(&perturbed);
        let mut total: Option<Tensor> = None;
        for (row, &pos) in chosen.iter().enumerate() {
            let e = emb.select_rows(&[row]);
            let term = plans[pos].loss_from_embedding(ctx.model, &e);
            total = Some(match total {
                Some(t) => t.add(&term),
                None => term,
            });
        }
        let loss = total.expect("nonempty batch").scale(1.0 / chosen.len() as f32);
        let v = loss.item();
        loss.backward();
        let g = rt.grad().expect("r is tracked");
        if !v.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(AttackError::NonFinite { step });
        }
        trace.push(v);
        for j in 0..d {
            r[j] = (r[j] - alpha * sgn(g[j])).clamp(-eps, eps);
        }
    }
    Ok(UniversalOutcome { perturbation: r, loss_trace: trace })
}
