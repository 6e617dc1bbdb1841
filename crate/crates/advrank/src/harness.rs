//! Experiment orchestration: attack sweeps over (kind, ε, w/m) grids,
//! transfer matrices between models, shared-perturbation (universal)
//! evaluation on seen/unseen targets, and the ξ trade-off search, all
//! aggregated into one deterministic table format with a CSV emitter.
//!
//! Determinism contract: every trial's randomness derives from a stable
//! hash of (plan seed, model name, kind, ε, w/m, trial index), so results
//! are a pure function of the plan and inputs. Work fans out across a
//! thread pool but rows are keyed and sorted, making the output
//! independent of completion order and of the pool size. Models cross
//! thread boundaries as checkpoint bytes (their parameters are not Send).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::attack::{
    apply_universal, evaluate_attack, run_attack, universal_perturbation, AttackContext,
    AttackError, AttackKind, AttackSpec, AttackTarget, Budget, InnerSum, Side,
    UniversalCounterparts, UniversalSpec,
};
use crate::data::{sample_counterparts, DataError, Dataset};
use crate::model::{EmbeddingModel, ModelError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid plan: {0}")]
    BadPlan(String),
    #[error("bad table: {0}")]
    BadTable(String),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ── Seed derivation ─────────────────────────────────────────────────────

/// Stable 64-bit mix (FNV-1a over the parts). Trial seeds must not depend
/// on scheduling, hash-map order, or platform.
fn mix_seed(base: u64, parts: &[&[u8]]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ base.wrapping_mul(0x1000_0000_01b3);
    for part in parts {
        for &b in *part {
            h ^= b as u64;
            h = h.wrapping_mul(0x100_0000_01b3);
        }
        h ^= 0xff; // part separator so ("ab","c") != ("a","bc")
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

fn trial_seed(base: u64, model: &str, kind: AttackKind, epsilon: f32, wm: usize, trial: usize) -> u64 {
    mix_seed(
        base,
        &[
            model.as_bytes(),
            kind.label().as_bytes(),
            &epsilon.to_bits().to_le_bytes(),
            &(wm as u64).to_le_bytes(),
            &(trial as u64).to_le_bytes(),
        ],
    )
}

// ── Result table ────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellKey {
    pub model: String,
    pub kind: String,
    /// ε as bits so keys are Ord; construct via `CellKey::new`.
    epsilon_bits: u32,
    pub wm: usize,
}

impl CellKey {
    pub fn new(model: &str, kind: &str, epsilon: f32, wm: usize) -> CellKey {
        CellKey { model: model.into(), kind: kind.into(), epsilon_bits: epsilon.to_bits(), wm }
    }

    pub fn epsilon(&self) -> f32 {
        f32::from_bits(self.epsilon_bits)
    }
}

/// Aggregated means over a cell's trials. Rank fields are None for kinds
/// without that report (self-shift attacks have no ranks; only query-side
/// kinds have SP ranks).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellStats {
    pub rank_before: Option<f32>,
    pub rank_after: Option<f32>,
    pub sp_before: Option<f32>,
    pub sp_after: Option<f32>,
    pub shift: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellValue {
    Stats(CellStats),
    Error(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResultTable {
    /// Sorted by key; unique keys.
    pub rows: Vec<(CellKey, CellValue)>,
}

pub const CSV_HEADER: &str = "model,kind,epsilon,wm,rank_before,rank_after,sp_before,sp_after,shift";

impl ResultTable {
    pub fn from_rows(mut rows: Vec<(CellKey, CellValue)>) -> ResultTable {
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        ResultTable { rows }
    }

    pub fn get(&self, key: &CellKey) -> Option<&CellValue> {
        self.rows
            .binary_search_by(|(k, _)| k.cmp(key))
            .ok()
            .map(|i| &self.rows[i].1)
    }

    pub fn has_errors(&self) -> bool {
        self.rows.iter().any(|(_, v)| matches!(v, CellValue::Error(_)))
    }

    pub fn merge(tables: Vec<ResultTable>) -> ResultTable {
        ResultTable::from_rows(tables.into_iter().flat_map(|t| t.rows).collect())
    }

    /// Render as CSV: ranks in percent with one decimal, shift with four
    /// decimals, empty fields where a statistic does not apply, every
    /// field of a failed cell spelled `ERR`. Byte-stable for a fixed
    /// table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for (key, value) in &self.rows {
            let _ = write!(out, "{},{},{},{}", key.model, key.kind, key.epsilon(), key.wm);
            match value {
                CellValue::Stats(s) => {
                    let pct = |v: Option<f32>| match v {
                        Some(v) => format!("{:.1}", v * 100.0),
                        None => String::new(),
                    };
                    let _ = write!(
                        out,
                        ",{},{},{},{},{:.4}",
                        pct(s.rank_before),
                        pct(s.rank_after),
                        pct(s.sp_before),
                        pct(s.sp_after),
                        s.shift
                    );
                }
                CellValue::Error(_) => out.push_str(",ERR,ERR,ERR,ERR,ERR"),
            }
            out.push('\n');
        }
        out
    }

    /// Fixed-width table for eyeballing; same content as the CSV.
    pub fn to_text(&self) -> String {
        let header: Vec<String> = CSV_HEADER.split(',').map(str::to_string).collect();
        let mut grid = vec![header];
        for line in self.to_csv().lines().skip(1) {
            grid.push(line.split(',').map(str::to_string).collect());
        }
        render_table(&grid)
    }
}

/// Right-align rows of fields into a fixed-width text table.
pub fn render_table(grid: &[Vec<String>]) -> String {
    let cols = grid.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut widths = vec![0usize; cols];
    for row in grid {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let mut out = String::new();
    for row in grid {
        let mut line = String::new();
        for (i, cell) in row.iter().enumerate() {
            if i > 0 {
                line.push_str("  ");
            }
            let _ = write!(line, "{cell:>width$}", width = widths[i]);
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// Write the table's CSV rendering to a file.
pub fn emit_report(table: &ResultTable, path: &Path) -> Result<(), HarnessError> {
    Ok(std::fs::write(path, table.to_csv())?)
}

/// Parse CSV produced by `to_csv` back into field rows (header checked,
/// values kept as strings). Used by the report renderer and the exit-code
/// rule: any `ERR` field marks a failed cell.
pub fn parse_csv(text: &str) -> Result<Vec<Vec<String>>, HarnessError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        Some(h) => return Err(HarnessError::BadTable(format!("unexpected header: {h}"))),
        None => return Err(HarnessError::BadTable("empty file".into())),
    }
    let want = CSV_HEADER.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<String> = line.split(',').map(str::to_string).collect();
        if fields.len() != want {
            return Err(HarnessError::BadTable(format!(
                "row {}: {} fields, expected {want}",
                i + 2,
                fields.len()
            )));
        }
        rows.push(fields);
    }
    Ok(rows)
}

// ── Attack sweep ────────────────────────────────────────────────────────

/// The full experiment grid: every (model, kind, ε, w/m) cell runs
/// `trials` independent attacks on freshly sampled items.
#[derive(Clone, Debug)]
pub struct SweepPlan {
    pub kinds: Vec<AttackKind>,
    pub epsilons: Vec<f32>,
    /// Counterpart counts: queries w for candidate attacks, candidates m
    /// for query attacks.
    pub wm: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    /// SP weight for QA+ cells.
    pub qa_plus_xi: f32,
    /// SP weight for QA- cells.
    pub qa_minus_xi: f32,
    /// SP pool size G for query-side cells.
    pub sp_count: usize,
    pub inner: InnerSum,
}

impl Default for SweepPlan {
    fn default() -> SweepPlan {
        SweepPlan {
            kinds: AttackKind::RANKED.to_vec(),
            epsilons: vec![0.01, 0.03, 0.1, 0.3],
            wm: vec![1, 2, 5, 10],
            trials: 200,
            seed: 0,
            qa_plus_xi: 1.0,
            qa_minus_xi: 100.0,
            sp_count: 5,
            inner: InnerSum::Auto,
        }
    }
}

impl SweepPlan {
    fn validate(&self) -> Result<(), HarnessError> {
        if self.kinds.is_empty() || self.epsilons.is_empty() || self.wm.is_empty() {
            return Err(HarnessError::BadPlan("empty kind, epsilon, or w/m grid".into()));
        }
        if self.trials == 0 {
            return Err(HarnessError::BadPlan("trials must be positive".into()));
        }
        Ok(())
    }

    fn spec_for(&self, kind: AttackKind, counterparts: Vec<usize>, epsilon: f32, seed: u64) -> AttackSpec {
        let mut spec = AttackSpec::new(kind, counterparts, Budget::from_epsilon(epsilon));
        spec.inner = self.inner;
        spec.seed = seed;
        match kind {
            AttackKind::QaPlus => {
                spec.xi = self.qa_plus_xi;
                spec.sp_count = self.sp_count;
            }
            AttackKind::QaMinus => {
                spec.xi = self.qa_minus_xi;
                spec.sp_count = self.sp_count;
            }
            _ => {
                spec.xi = 0.0;
                spec.sp_count = 0;
            }
        }
        spec
    }
}

/// One trial's protocol, shared verbatim by the sweep and the transfer
/// runner so a transfer diagonal reproduces the corresponding sweep cell:
/// the trial seed picks the attacked item uniformly, then its counterparts
/// ("+" kinds uniformly, "−" kinds from the item's top-1% pool).
fn sample_trial(
    ctx: &AttackContext,
    plan: &SweepPlan,
    model: &str,
    kind: AttackKind,
    epsilon: f32,
    wm: usize,
    trial: usize,
) -> Result<(usize, AttackSpec), AttackError> {
    let seed = trial_seed(plan.seed, model, kind, epsilon, wm, trial);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let item = rng.gen_range(0..ctx.len());
    let counterparts = match kind.polarity() {
        Some(polarity) => sample_counterparts(ctx.index(), item, polarity, wm, &mut rng)
            .map_err(|e| AttackError::BadSpec(e.to_string()))?,
        None => vec![],
    };
    Ok((item, spec_with_seed(plan, kind, counterparts, epsilon, seed)))
}

fn spec_with_seed(
    plan: &SweepPlan,
    kind: AttackKind,
    counterparts: Vec<usize>,
    epsilon: f32,
    seed: u64,
) -> AttackSpec {
    plan.spec_for(kind, counterparts, epsilon, seed)
}

struct TrialStats {
    before: Option<f32>,
    after: Option<f32>,
    sp_before: Option<f32>,
    sp_after: Option<f32>,
    shift: f32,
}

fn mean_of(values: Vec<Option<f32>>) -> Option<f32> {
    let picked: Vec<f32> = values.into_iter().flatten().collect();
    if picked.is_empty() {
        None
    } else {
        Some((picked.iter().map(|&v| v as f64).sum::<f64>() / picked.len() as f64) as f32)
    }
}

fn run_cell(
    model_name: &str,
    model: &EmbeddingModel,
    corpus: &Dataset,
    plan: &SweepPlan,
    kind: AttackKind,
    epsilon: f32,
    wm: usize,
) -> CellValue {
    let ctx = match AttackContext::new(model, &corpus.images, None) {
        Ok(c) => c,
        Err(e) => return CellValue::Error(e.to_string()),
    };
    let mut trials = Vec::with_capacity(plan.trials);
    for trial in 0..plan.trials {
        let outcome = sample_trial(&ctx, plan, model_name, kind, epsilon, wm, trial)
            .and_then(|(item, spec)| run_attack(&ctx, &AttackTarget::Corpus(item), &spec));
        match outcome {
            Ok(out) => trials.push(TrialStats {
                before: finite_or_none(out.before.mean),
                after: finite_or_none(out.after.mean),
                sp_before: out.sp_before.map(|r| r.mean),
                sp_after: out.sp_after.map(|r| r.mean),
                shift: out.shift,
            }),
            Err(e) => return CellValue::Error(format!("trial {trial}: {e}")),
        }
    }
    CellValue::Stats(CellStats {
        rank_before: mean_of(trials.iter().map(|t| t.before).collect()),
        rank_after: mean_of(trials.iter().map(|t| t.after).collect()),
        sp_before: mean_of(trials.iter().map(|t| t.sp_before).collect()),
        sp_after: mean_of(trials.iter().map(|t| t.sp_after).collect()),
        shift: mean_of(trials.iter().map(|t| Some(t.shift)).collect()).unwrap_or(f32::NAN),
    })
}

fn finite_or_none(v: f32) -> Option<f32> {
    v.is_finite().then_some(v)
}

/// Run the whole grid. Cells fan out over the thread pool; each failure is
/// recorded as an `ERR` cell and the sweep continues.
pub fn run_attack_sweep(
    models: &[(String, EmbeddingModel)],
    corpus: &Dataset,
    plan: &SweepPlan,
) -> Result<ResultTable, HarnessError> {
    plan.validate()?;
    if models.is_empty() {
        return Err(HarnessError::BadPlan("no models".into()));
    }
    let frozen: Vec<(String, Vec<u8>)> =
        models.iter().map(|(name, m)| (name.clone(), m.to_bytes())).collect();
    let mut cells = Vec::new();
    for (name, bytes) in &frozen {
        for &kind in &plan.kinds {
            for &epsilon in &plan.epsilons {
                for &wm in &plan.wm {
                    cells.push((name.as_str(), bytes.as_slice(), kind, epsilon, wm));
                }
            }
        }
    }
    let rows: Vec<(CellKey, CellValue)> = cells
        .par_iter()
        .map(|&(name, bytes, kind, epsilon, wm)| {
            let key = CellKey::new(name, kind.label(), epsilon, wm);
            let value = match EmbeddingModel::from_bytes(bytes) {
                Ok(model) => run_cell(name, &model, corpus, plan, kind, epsilon, wm),
                Err(e) => CellValue::Error(e.to_string()),
            };
            (key, value)
        })
        .collect();
    Ok(ResultTable::from_rows(rows))
}

// ── Transfer matrix ─────────────────────────────────────────────────────

/// Mean attacked ranks of adversarial examples crafted on one model and
/// evaluated on every model. `cells[i][j]` crafts on `names[i]`, ranks on
/// `names[j]`; the diagonal is the white-box attack.
#[derive(Clone, Debug)]
pub struct TransferMatrix {
    pub names: Vec<String>,
    pub kind: AttackKind,
    pub epsilon: f32,
    pub wm: usize,
    /// Mean normalized rank after attack, crafted-on × evaluated-on.
    pub cells: Vec<Vec<f32>>,
    /// Mean unattacked rank on each evaluated model (column baseline).
    pub baseline: Vec<f32>,
}

impl TransferMatrix {
    /// Table rows with the crafted-on and evaluated-on models spelled as
    /// `source->target`.
    pub fn rows(&self) -> Vec<(CellKey, CellValue)> {
        let mut rows = Vec::new();
        for (i, src) in self.names.iter().enumerate() {
            for (j, dst) in self.names.iter().enumerate() {
                let key =
                    CellKey::new(&format!("{src}->{dst}"), self.kind.label(), self.epsilon, self.wm);
                rows.push((
                    key,
                    CellValue::Stats(CellStats {
                        rank_before: Some(self.baseline[j]),
                        rank_after: Some(self.cells[i][j]),
                        sp_before: None,
                        sp_after: None,
                        shift: f32::NAN,
                    }),
                ));
            }
        }
        rows
    }
}

/// Craft each trial's adversarial image on every source model, then rank
/// the same counterpart set in every destination model's index. Targets
/// and counterparts are sampled with the sweep's own derivation, so cell
/// (i,i) reproduces the sweep cell for model i exactly.
pub fn run_transfer(
    models: &[(String, EmbeddingModel)],
    corpus: &Dataset,
    kind: AttackKind,
    epsilon: f32,
    wm: usize,
    trials: usize,
    seed: u64,
) -> Result<TransferMatrix, HarnessError> {
    if models.len() < 2 {
        return Err(HarnessError::BadPlan("transfer needs at least two models".into()));
    }
    if kind.side() == Side::SelfShift {
        return Err(HarnessError::BadPlan("transfer is defined for ranked kinds".into()));
    }
    if trials == 0 {
        return Err(HarnessError::BadPlan("trials must be positive".into()));
    }
    let d = models[0].1.input_dim();
    if models.iter().any(|(_, m)| m.input_dim() != d) {
        return Err(HarnessError::BadPlan("models expect different image shapes".into()));
    }
    let plan = SweepPlan { seed, ..SweepPlan::default() };
    let n_models = models.len();
    let contexts: Vec<AttackContext> = models
        .iter()
        .map(|(_, m)| AttackContext::new(m, &corpus.images, None))
        .collect::<Result<_, _>>()?;

    let mut sums = vec![vec![0.0f64; n_models]; n_models];
    let mut base_sums = vec![0.0f64; n_models];
    let mut base_count = 0usize;
    for (i, (name, _)) in models.iter().enumerate() {
        for trial in 0..trials {
            let (item, spec) = sample_trial(&contexts[i], &plan, name, kind, epsilon, wm, trial)?;
            let target = AttackTarget::Corpus(item);
            let out = run_attack(&contexts[i], &target, &spec)?;
            for (j, ctx_j) in contexts.iter().enumerate() {
                if j == i {
                    sums[i][j] += out.after.mean as f64;
                } else {
                    let eval = evaluate_attack(
                        ctx_j,
                        kind,
                        &target,
                        &out.adversarial,
                        &spec.counterparts,
                        None,
                    )?;
                    sums[i][j] += eval.after.mean as f64;
                }
                if i == 0 {
                    let eval = evaluate_attack(
                        ctx_j,
                        kind,
                        &target,
                        corpus.image(item),
                        &spec.counterparts,
                        None,
                    )?;
                    base_sums[j] += eval.before.mean as f64;
                }
            }
            if i == 0 {
                base_count += 1;
            }
        }
    }
    let cells = sums
        .into_iter()
        .map(|row| row.into_iter().map(|s| (s / trials as f64) as f32).collect())
        .collect();
    let baseline =
        base_sums.into_iter().map(|s| (s / base_count as f64) as f32).collect();
    Ok(TransferMatrix {
        names: models.iter().map(|(n, _)| n.clone()).collect(),
        kind,
        epsilon,
        wm,
        cells,
        baseline,
    })
}

// ── Universal evaluation ────────────────────────────────────────────────

/// Universal-variant label for a ranked kind: image-agnostic CA+/CA-/QA±.
pub fn universal_label(kind: AttackKind) -> &'static str {
    match kind {
        AttackKind::CaPlus => "I-CA+",
        AttackKind::CaMinus => "I-CA-",
        AttackKind::QaPlus => "I-QA+",
        AttackKind::QaMinus => "I-QA-",
        other => panic!("no universal variant for {other}"),
    }
}

#[derive(Clone, Debug)]
pub struct UniversalRun {
    pub kind: AttackKind,
    pub epsilon: f32,
    pub wm: usize,
    pub perturbation: Vec<f32>,
    pub seen: CellStats,
    pub unseen: CellStats,
    pub seen_targets: Vec<usize>,
    pub unseen_targets: Vec<usize>,
}

impl UniversalRun {
    /// Two table rows, the model name suffixed with the evaluation split.
    pub fn rows(&self, model: &str) -> Vec<(CellKey, CellValue)> {
        let label = universal_label(self.kind);
        vec![
            (
                CellKey::new(&format!("{model}:seen"), label, self.epsilon, self.wm),
                CellValue::Stats(self.seen),
            ),
            (
                CellKey::new(&format!("{model}:unseen"), label, self.epsilon, self.wm),
                CellValue::Stats(self.unseen),
            ),
        ]
    }
}

/// Optimize one shared perturbation on a seen split (`frac` of the corpus)
/// and evaluate it on both the seen split and a disjoint unseen split of
/// the same size. Raising kinds share one counterpart set; lowering kinds
/// give each target its own top-1% pool.
pub fn run_universal(
    model_name: &str,
    model: &EmbeddingModel,
    corpus: &Dataset,
    kind: AttackKind,
    epsilon: f32,
    wm: usize,
    frac: f32,
    seed: u64,
) -> Result<UniversalRun, HarnessError> {
    if !(0.0..=0.5).contains(&frac) || frac <= 0.0 {
        return Err(HarnessError::BadPlan(format!("frac must be in (0, 0.5], got {frac}")));
    }
    let ctx = AttackContext::new(model, &corpus.images, None)?;
    let n = ctx.len();
    let per_split = ((n as f32 * frac).round() as usize).max(1);
    if 2 * per_split > n {
        return Err(HarnessError::BadPlan(format!(
            "corpus of {n} cannot hold two disjoint splits of {per_split}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
        seed,
        &[model_name.as_bytes(), universal_label(kind).as_bytes(), &epsilon.to_bits().to_le_bytes()],
    ));
    let mut picks = rand::seq::index::sample(&mut rng, n, 2 * per_split).into_vec();
    // disjoint by construction: one sample without replacement, split in two
    let unseen_targets: Vec<usize> = picks.split_off(per_split);
    let seen_targets = picks;

    let counterparts = match kind.polarity().expect("universal kinds are ranked") {
        crate::data::Polarity::Raise => {
            let mut shared = Vec::with_capacity(wm);
            while shared.len() < wm {
                let c = rng.gen_range(0..n);
                if !shared.contains(&c) && !seen_targets.contains(&c) && !unseen_targets.contains(&c)
                {
                    shared.push(c);
                }
            }
            UniversalCounterparts::Shared(shared)
        }
        crate::data::Polarity::Lower => {
            let mut sets = Vec::with_capacity(seen_targets.len());
            for &t in &seen_targets {
                sets.push(
                    sample_counterparts(ctx.index(), t, crate::data::Polarity::Lower, wm, &mut rng)
                        .map_err(|e| AttackError::BadSpec(e.to_string()))?,
                );
            }
            UniversalCounterparts::PerTarget(sets)
        }
    };

    let mut spec = UniversalSpec::new(kind, counterparts.clone(), epsilon);
    spec.seed = seed;
    let outcome = universal_perturbation(&ctx, &seen_targets, &spec)?;

    let evaluate_split = |targets: &[usize], sets: &UniversalCounterparts| {
        let mut stats = Vec::with_capacity(targets.len());
        for (pos, &t) in targets.iter().enumerate() {
            let cps: &[usize] = match sets {
                UniversalCounterparts::Shared(c) => c,
                UniversalCounterparts::PerTarget(sets) => &sets[pos],
            };
            let adv = apply_universal(ctx.image(t), &outcome.perturbation);
            let eval =
                evaluate_attack(&ctx, kind, &AttackTarget::Corpus(t), &adv, cps, None)?;
            stats.push((eval.before.mean, eval.after.mean, eval.shift));
        }
        Ok::<_, HarnessError>(stats)
    };

    // unseen "−" targets need their own pools, sampled with the same rng
    let unseen_sets = match &counterparts {
        UniversalCounterparts::Shared(c) => UniversalCounterparts::Shared(c.clone()),
        UniversalCounterparts::PerTarget(_) => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
                seed,
                &[model_name.as_bytes(), b"unseen-pools", &epsilon.to_bits().to_le_bytes()],
            ));
            let mut sets = Vec::with_capacity(unseen_targets.len());
            for &t in &unseen_targets {
                sets.push(
                    sample_counterparts(ctx.index(), t, crate::data::Polarity::Lower, wm, &mut rng)
                        .map_err(|e| AttackError::BadSpec(e.to_string()))?,
                );
            }
            UniversalCounterparts::PerTarget(sets)
        }
    };

    let summarize = |stats: Vec<(f32, f32, f32)>| {
        let n = stats.len() as f64;
        CellStats {
            rank_before: Some((stats.iter().map(|s| s.0 as f64).sum::<f64>() / n) as f32),
            rank_after: Some((stats.iter().map(|s| s.1 as f64).sum::<f64>() / n) as f32),
            sp_before: None,
            sp_after: None,
            shift: (stats.iter().map(|s| s.2 as f64).sum::<f64>() / n) as f32,
        }
    };
    let seen = summarize(evaluate_split(&seen_targets, &counterparts)?);
    let unseen = summarize(evaluate_split(&unseen_targets, &unseen_sets)?);
    Ok(UniversalRun {
        kind,
        epsilon,
        wm,
        perturbation: outcome.perturbation,
        seen,
        unseen,
        seen_targets,
        unseen_targets,
    })
}

// ── ξ trade-off search ──────────────────────────────────────────────────

/// Sweep the SP weight ξ for the query-side kinds, holding everything else
/// fixed. A row per (kind, ξ) reports the attack's rank movement and the
/// collateral movement of the frozen near pool; the kind label carries the
/// ξ value since the table schema has no ξ column.
pub fn run_xi_search(
    model_name: &str,
    model: &EmbeddingModel,
    corpus: &Dataset,
    xi_grid: &[f32],
    kinds: &[AttackKind],
    epsilon: f32,
    wm: usize,
    trials: usize,
    seed: u64,
) -> Result<ResultTable, HarnessError> {
    if xi_grid.is_empty() || xi_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(HarnessError::BadPlan("xi grid must be nonempty and ascending".into()));
    }
    if kinds
        .iter()
        .any(|k| !matches!(k, AttackKind::QaPlus | AttackKind::QaMinus))
    {
        return Err(HarnessError::BadPlan("xi search applies to query-side kinds".into()));
    }
    let bytes = model.to_bytes();
    let cells: Vec<(AttackKind, f32)> =
        kinds.iter().flat_map(|&k| xi_grid.iter().map(move |&xi| (k, xi))).collect();
    let base = SweepPlan { seed, trials, ..SweepPlan::default() };
    let rows: Vec<(CellKey, CellValue)> = cells
        .par_iter()
        .map(|&(kind, xi)| {
            let mut plan = base.clone();
            match kind {
                AttackKind::QaPlus => plan.qa_plus_xi = xi,
                AttackKind::QaMinus => plan.qa_minus_xi = xi,
                _ => unreachable!(),
            }
            let value = match EmbeddingModel::from_bytes(&bytes) {
                Ok(model) => run_cell(model_name, &model, corpus, &plan, kind, epsilon, wm),
                Err(e) => CellValue::Error(e.to_string()),
            };
            let label = format!("{} xi={}", kind.label(), xi);
            (CellKey::new(model_name, &label, epsilon, wm), value)
        })
        .collect();
    Ok(ResultTable::from_rows(rows))
}

// ── File configuration ──────────────────────────────────────────────────

/// Keys accepted in the TOML config file; command-line flags override any
/// of them. All keys are optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub corpus_size: Option<usize>,
    pub data_dir: Option<PathBuf>,
    pub trials: Option<usize>,
    pub epsilons: Option<Vec<f32>>,
    pub wm: Option<Vec<usize>>,
    pub kinds: Option<Vec<String>>,
    pub models: Option<Vec<PathBuf>>,
    pub out: Option<PathBuf>,
    pub xi_grid: Option<Vec<f32>>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| HarnessError::BadPlan(format!("config: {e}")))
    }
}

/// Run a closure on a thread pool of the requested size (0 = default
/// pool). The closure must be Send: hand models in as checkpoint bytes
/// and revive them inside.
pub fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, HarnessError> {
    if jobs == 0 {
        Ok(f())
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| HarnessError::BadPlan(format!("thread pool: {e}")))?;
        Ok(pool.install(f))
    }
}
