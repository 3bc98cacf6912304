//! Experiment drivers on top of the engine: the fine-tuning ablation grid,
//! low-shot learning curves and learning-rate schedule dumps.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{
    run_clf_finetune, run_lm_finetune, transfer_vocab, Checkpoint, CheckpointMeta, EngineError, ModelKind,
    RunMetrics, Stage, StageConfig,
};
use crate::finetune::{cosine_lr, LrSchedule, StlrSchedule, UnfreezeMode, UnfreezePolicy};
use crate::lm::LmModel;
use crate::text::LabeledDoc;

/// Learning rate of every group in variants without discriminative rates.
pub const UNIFORM_LR: f64 = 0.001;
/// Learning rate of the groups below the top one under chain-thaw.
pub const CHAIN_THAW_LOWER_LR: f64 = 0.0001;
/// Early-stopping patience for baselines when the base config sets none.
pub const BASELINE_PATIENCE: usize = 3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown variant {0:?} (expected one of {list})", list = Variant::ALL.map(|v| v.name()).join(", "))]
    UnknownVariant(String),
    #[error("unknown low-shot mode {0:?} (expected supervised or semi_supervised)")]
    UnknownMode(String),
    #[error("budget {budget} needs {needed} examples of class {label:?}, which has {available}")]
    Budget {
        budget: usize,
        label: String,
        needed: usize,
        available: usize,
    },
    #[error("{0}")]
    Spec(String),
    #[error("bad CSV: {0}")]
    Csv(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Classifier fine-tuning methods compared in the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    FromScratch,
    Full,
    FullDiscr,
    FullDiscrStlr,
    Last,
    ChainThaw,
    Freez,
    FreezDiscr,
    FreezStlr,
    FreezCos,
    FreezDiscrStlr,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::FromScratch,
        Variant::Full,
        Variant::FullDiscr,
        Variant::FullDiscrStlr,
        Variant::Last,
        Variant::ChainThaw,
        Variant::Freez,
        Variant::FreezDiscr,
        Variant::FreezStlr,
        Variant::FreezCos,
        Variant::FreezDiscrStlr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::FromScratch => "from_scratch",
            Variant::Full => "full",
            Variant::FullDiscr => "full_discr",
            Variant::FullDiscrStlr => "full_discr_stlr",
            Variant::Last => "last",
            Variant::ChainThaw => "chain_thaw",
            Variant::Freez => "freez",
            Variant::FreezDiscr => "freez_discr",
            Variant::FreezStlr => "freez_stlr",
            Variant::FreezCos => "freez_cos",
            Variant::FreezDiscrStlr => "freez_discr_stlr",
        }
    }

    /// Whether the trunk comes from the given language model rather than a
    /// random initialisation.
    pub fn pretrained(self) -> bool {
        self != Variant::FromScratch
    }

    /// Parses a comma-separated list, rejecting unknown names.
    pub fn parse_list(list: &str) -> Result<Vec<Variant>, HarnessError> {
        list.split(',').map(|s| s.trim().parse()).collect()
    }

    /// `base` adjusted to this variant. Everything except the full method
    /// trains with early stopping.
    pub fn configure(self, base: &StageConfig) -> StageConfig {
        let mut cfg = base.clone();
        let (unfreeze, discriminative, schedule) = match self {
            Variant::FromScratch | Variant::Full => (UnfreezeMode::Full, false, LrSchedule::Constant),
            Variant::FullDiscr => (UnfreezeMode::Full, true, LrSchedule::Constant),
            Variant::FullDiscrStlr => (UnfreezeMode::Full, true, LrSchedule::default()),
            Variant::Last => (UnfreezeMode::LastOnly, false, LrSchedule::Constant),
            Variant::ChainThaw => (UnfreezeMode::ChainThaw, false, LrSchedule::Constant),
            Variant::Freez => (UnfreezeMode::Gradual, false, LrSchedule::Constant),
            Variant::FreezDiscr => (UnfreezeMode::Gradual, true, LrSchedule::Constant),
            Variant::FreezStlr => (UnfreezeMode::Gradual, false, LrSchedule::default()),
            Variant::FreezCos => (UnfreezeMode::Gradual, false, LrSchedule::cosine()),
            Variant::FreezDiscrStlr => (UnfreezeMode::Gradual, true, base.schedule),
        };
        cfg.unfreeze = UnfreezePolicy {
            mode: unfreeze,
            ..base.unfreeze
        };
        cfg.discriminative = discriminative;
        cfg.schedule = schedule;
        if !discriminative {
            cfg.base_lr = UNIFORM_LR;
            cfg.lower_lr = (self == Variant::ChainThaw).then_some(CHAIN_THAW_LOWER_LR);
        }
        if self != Variant::FreezDiscrStlr {
            cfg.early_stopping = Some(base.early_stopping.unwrap_or(BASELINE_PATIENCE));
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| HarnessError::UnknownVariant(s.to_string()))
    }
}

/// Splits `docs` into (train, val) with `round(val_frac * n_c)` examples of
/// each class `c` in the validation part. Both parts keep the input order.
pub fn stratified_split(docs: &[LabeledDoc], val_frac: f64, seed: u64) -> (Vec<LabeledDoc>, Vec<LabeledDoc>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut is_val = vec![false; docs.len()];
    for idx in by_class(docs).values_mut() {
        idx.shuffle(&mut rng);
        let n_val = (val_frac * idx.len() as f64).round() as usize;
        for &i in &idx[..n_val] {
            is_val[i] = true;
        }
    }
    let (val, train): (Vec<_>, Vec<_>) = docs.iter().zip(is_val).partition(|(_, v)| *v);
    (
        train.into_iter().map(|(d, _)| d.clone()).collect(),
        val.into_iter().map(|(d, _)| d.clone()).collect(),
    )
}

/// `budget` examples split as evenly as the classes allow (the first
/// `budget % k` classes in label order get one more). A budget equal to the
/// whole set returns it unchanged. Selected examples keep the input order.
pub fn balanced_subsample(docs: &[LabeledDoc], budget: usize, seed: u64) -> Result<Vec<LabeledDoc>, HarnessError> {
    if budget == docs.len() {
        return Ok(docs.to_vec());
    }
    let classes = by_class(docs);
    let k = classes.len().max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(budget);
    for (c, (label, idx)) in classes.into_iter().enumerate() {
        let needed = budget / k + usize::from(c < budget % k);
        if needed > idx.len() {
            return Err(HarnessError::Budget {
                budget,
                label: label.to_string(),
                needed,
                available: idx.len(),
            });
        }
        chosen.extend(idx.choose_multiple(&mut rng, needed).copied());
    }
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| docs[i].clone()).collect())
}

fn by_class(docs: &[LabeledDoc]) -> BTreeMap<&str, Vec<usize>> {
    let mut m: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, d) in docs.iter().enumerate() {
        m.entry(d.label.as_str()).or_default().push(i);
    }
    m
}

/// A randomly initialised language model with the architecture and
/// vocabulary of `like`.
pub fn scratch_checkpoint(like: &Checkpoint, seed: u64) -> Result<Checkpoint, HarnessError> {
    let model = LmModel::<f32>::new(like.meta.lm.clone(), &mut ChaCha8Rng::seed_from_u64(seed))
        .map_err(EngineError::from)?;
    Ok(Checkpoint::from_params(
        CheckpointMeta {
            kind: ModelKind::Lm,
            head: None,
            labels: Vec::new(),
            ..like.meta.clone()
        },
        &model.params,
    ))
}

/// Runs `f` over `items` on up to `jobs` threads. Results come back in
/// input order; after the first failure no new items are started.
pub fn par_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>, HarnessError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R, HarnessError> + Sync,
{
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let out: Mutex<Vec<Option<Result<R, HarnessError>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() || failed.load(Ordering::Relaxed) {
                    break;
                }
                let r = f(&items[i]);
                if r.is_err() {
                    failed.store(true, Ordering::Relaxed);
                }
                out.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    let mut results = Vec::with_capacity(items.len());
    for r in out.into_inner().expect("result lock").into_iter().flatten() {
        results.push(r?);
    }
    if results.len() != items.len() {
        return Err(HarnessError::Spec("a grid cell failed".into()));
    }
    Ok(results)
}

fn to_csv<S: Serialize>(rows: &[S]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory CSV write");
    }
    String::from_utf8(w.into_inner().expect("in-memory CSV flush")).expect("CSV is UTF-8")
}

fn from_csv<D: DeserializeOwned>(text: &str) -> Result<Vec<D>, HarnessError> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| HarnessError::Csv(e.to_string()))
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Classifier settings shared by every variant before its adjustments.
    pub config: StageConfig,
    pub val_frac: f64,
    /// Seed of the validation split and of the training subsample.
    pub split_seed: u64,
    /// Balanced cap on the number of training examples after the split.
    pub train_limit: Option<usize>,
    pub jobs: usize,
}

impl AblationSpec {
    pub fn new(variants: Vec<Variant>, seeds: Vec<u64>) -> Self {
        Self {
            variants,
            seeds,
            config: StageConfig::for_stage(Stage::ClfFinetune),
            val_frac: 0.1,
            split_seed: 0,
            train_limit: None,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub variant: Variant,
    pub seed: u64,
    pub val_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationGrid {
    pub rows: Vec<GridRow>,
}

impl AblationGrid {
    pub fn errors(&self, variant: Variant) -> Vec<f64> {
        self.rows.iter().filter(|r| r.variant == variant).map(|r| r.val_error).collect()
    }

    pub fn median(&self, variant: Variant) -> Option<f64> {
        median(&self.errors(variant))
    }

    pub fn to_csv(&self) -> String {
        to_csv(&self.rows)
    }

    pub fn from_csv(text: &str) -> Result<Self, HarnessError> {
        Ok(Self { rows: from_csv(text)? })
    }
}

/// Fine-tunes a classifier for every (variant, seed) pair on a stratified
/// split of `data` and records the final validation error. `lm` supplies
/// the trunk, and the vocabulary and architecture of `from_scratch` runs.
pub fn run_ablation(spec: &AblationSpec, lm: &Checkpoint, data: &[LabeledDoc]) -> Result<AblationGrid, HarnessError> {
    if spec.variants.is_empty() || spec.seeds.is_empty() {
        return Err(HarnessError::Spec("ablation needs at least one variant and one seed".into()));
    }
    spec.config.validate()?;
    let (train, val) = stratified_split(data, spec.val_frac, spec.split_seed);
    let train = match spec.train_limit {
        Some(n) if n < train.len() => balanced_subsample(&train, n, spec.split_seed)?,
        _ => train,
    };
    let mut cells: Vec<(Variant, u64)> = Vec::new();
    for &v in &spec.variants {
        for &s in &spec.seeds {
            if !cells.contains(&(v, s)) {
                cells.push((v, s));
            }
        }
    }
    let rows = par_map(&cells, spec.jobs, |&(variant, seed)| {
        let mut cfg = variant.configure(&spec.config);
        cfg.seed = seed;
        let trunk = if variant.pretrained() {
            lm.clone()
        } else {
            scratch_checkpoint(lm, seed)?
        };
        let (_, m) = run_clf_finetune(&cfg, &trunk, &train, &val)?;
        let val_error = final_error(&m, cfg.early_stopping.is_some())?;
        log::info!("ablation {variant} seed {seed}: val_error={val_error:.4}");
        Ok(GridRow { variant, seed, val_error })
    })?;
    let mut grid = AblationGrid { rows };
    grid.rows.sort_by_key(|r| (r.variant, r.seed));
    Ok(grid)
}

/// Validation error of the model a run returns: the last epoch, or under
/// early stopping the first epoch with the lowest validation loss.
fn final_error(m: &RunMetrics, early_stopping: bool) -> Result<f64, HarnessError> {
    let row = if early_stopping {
        m.rows
            .iter()
            .filter(|r| r.val_loss.is_some())
            .reduce(|best, r| if r.val_loss < best.val_loss { r } else { best })
    } else {
        m.last()
    };
    row.and_then(|r| r.val_error)
        .ok_or_else(|| HarnessError::Spec("run produced no validation error".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LowShotMode {
    /// Language-model fine-tuning sees only the labeled subsample.
    Supervised,
    /// Language-model fine-tuning sees every training document.
    SemiSupervised,
    /// Random trunk, no language-model stages.
    FromScratch,
}

impl LowShotMode {
    pub fn name(self) -> &'static str {
        match self {
            LowShotMode::Supervised => "supervised",
            LowShotMode::SemiSupervised => "semi_supervised",
            LowShotMode::FromScratch => "from_scratch",
        }
    }
}

impl FromStr for LowShotMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "supervised" => Ok(LowShotMode::Supervised),
            "semi_supervised" => Ok(LowShotMode::SemiSupervised),
            _ => Err(HarnessError::UnknownMode(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowShotSpec {
    budgets: Vec<usize>,
    pub modes: Vec<LowShotMode>,
    pub seeds: Vec<u64>,
    pub lm_config: StageConfig,
    pub clf_config: StageConfig,
    pub val_frac: f64,
    /// Seed of the fixed validation split.
    pub split_seed: u64,
    pub jobs: usize,
}

impl LowShotSpec {
    /// Budgets are sorted and deduplicated. A from-scratch baseline runs at
    /// every budget in addition to `modes`.
    pub fn new(budgets: Vec<usize>, modes: Vec<LowShotMode>, seeds: Vec<u64>) -> Self {
        let mut budgets = budgets;
        budgets.sort_unstable();
        budgets.dedup();
        Self {
            budgets,
            modes,
            seeds,
            lm_config: StageConfig::for_stage(Stage::LmFinetune),
            clf_config: StageConfig::for_stage(Stage::ClfFinetune),
            val_frac: 0.1,
            split_seed: 0,
            jobs: 1,
        }
    }

    pub fn budgets(&self) -> &[usize] {
        &self.budgets
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub budget: usize,
    pub mode: LowShotMode,
    pub seed: u64,
    pub val_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LowShotCurve {
    pub rows: Vec<CurveRow>,
}

impl LowShotCurve {
    pub fn errors(&self, budget: usize, mode: LowShotMode) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.budget == budget && r.mode == mode)
            .map(|r| r.val_error)
            .collect()
    }

    pub fn error(&self, budget: usize, mode: LowShotMode, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.budget == budget && r.mode == mode && r.seed == seed)
            .map(|r| r.val_error)
    }

    pub fn median(&self, budget: usize, mode: LowShotMode) -> Option<f64> {
        median(&self.errors(budget, mode))
    }

    pub fn to_csv(&self) -> String {
        to_csv(&self.rows)
    }

    pub fn from_csv(text: &str) -> Result<Self, HarnessError> {
        Ok(Self { rows: from_csv(text)? })
    }
}

/// Validation error against the number of labeled examples. The validation
/// split is drawn once and shared by every budget; each (budget, seed)
/// draws its own balanced subsample of the remaining documents.
pub fn run_lowshot(spec: &LowShotSpec, pretrained: &Checkpoint, data: &[LabeledDoc]) -> Result<LowShotCurve, HarnessError> {
    if spec.budgets.is_empty() || spec.seeds.is_empty() {
        return Err(HarnessError::Spec("low-shot run needs at least one budget and one seed".into()));
    }
    spec.lm_config.validate()?;
    spec.clf_config.validate()?;
    let (train, val) = stratified_split(data, spec.val_frac, spec.split_seed);
    let mut subsets = HashMap::new();
    for &b in &spec.budgets {
        for &s in &spec.seeds {
            subsets.insert((b, s), balanced_subsample(&train, b, s)?);
        }
    }
    let corpus = |docs: &[LabeledDoc]| docs.iter().map(|d| format!("{}\n", d.text)).collect::<String>();
    let lm_cfg = |seed: u64| StageConfig {
        seed,
        ..spec.lm_config.clone()
    };

    let semi_lms: HashMap<u64, Checkpoint> = if spec.modes.contains(&LowShotMode::SemiSupervised) {
        let all = corpus(&train);
        let lms = par_map(&spec.seeds, spec.jobs, |&s| Ok(run_lm_finetune(&lm_cfg(s), pretrained, &all)?.0))?;
        spec.seeds.iter().copied().zip(lms).collect()
    } else {
        HashMap::new()
    };
    // From-scratch trunks share the vocabulary that fine-tuning produces.
    let (_, task_vocab) = transfer_vocab(pretrained, &corpus(&train))?;
    let scratch_like = Checkpoint {
        meta: CheckpointMeta {
            vocab: task_vocab.tokens().to_vec(),
            lm: crate::lm::LmConfig {
                vocab_size: task_vocab.len(),
                ..pretrained.meta.lm.clone()
            },
            ..pretrained.meta.clone()
        },
        tensors: Vec::new(),
    };

    let mut modes = spec.modes.clone();
    modes.push(LowShotMode::FromScratch);
    modes.sort_unstable();
    modes.dedup();
    let mut cells = Vec::new();
    for &b in &spec.budgets {
        for &m in &modes {
            for &s in &spec.seeds {
                cells.push((b, m, s));
            }
        }
    }
    let rows = par_map(&cells, spec.jobs, |&(budget, mode, seed)| {
        let labeled = &subsets[&(budget, seed)];
        let (trunk, variant) = match mode {
            LowShotMode::Supervised => (
                run_lm_finetune(&lm_cfg(seed), pretrained, &corpus(labeled))?.0,
                Variant::FreezDiscrStlr,
            ),
            LowShotMode::SemiSupervised => (semi_lms[&seed].clone(), Variant::FreezDiscrStlr),
            LowShotMode::FromScratch => (scratch_checkpoint(&scratch_like, seed)?, Variant::FromScratch),
        };
        let mut cfg = variant.configure(&spec.clf_config);
        cfg.seed = seed;
        let (_, m) = run_clf_finetune(&cfg, &trunk, labeled, &val)?;
        let val_error = final_error(&m, cfg.early_stopping.is_some())?;
        log::info!("lowshot {} budget {budget} seed {seed}: val_error={val_error:.4}", mode.name());
        Ok(CurveRow {
            budget,
            mode,
            seed,
            val_error,
        })
    })?;
    Ok(LowShotCurve { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub t: usize,
    pub lr: f64,
}

/// The learning rate at every iteration `0..=total` of a run peaking at
/// `eta_max`.
pub fn schedule_curve(schedule: LrSchedule, total: usize, eta_max: f64) -> Result<Vec<ScheduleRow>, HarnessError> {
    let lr = |t: usize| -> Result<f64, HarnessError> {
        Ok(match schedule {
            LrSchedule::Stlr { cut_frac, ratio } => StlrSchedule::new(total, cut_frac, ratio, eta_max)
                .map_err(EngineError::from)?
                .lr(t)
                .map_err(EngineError::from)?,
            LrSchedule::Cosine { min_frac } => cosine_lr(t, total, eta_max, min_frac * eta_max),
            LrSchedule::Constant => eta_max,
        })
    };
    (0..=total).map(|t| Ok(ScheduleRow { t, lr: lr(t)? })).collect()
}

pub fn schedule_csv(rows: &[ScheduleRow]) -> String {
    to_csv(rows)
}

pub fn parse_schedule_csv(text: &str) -> Result<Vec<ScheduleRow>, HarnessError> {
    from_csv(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(counts: &[(&str, usize)]) -> Vec<LabeledDoc> {
        counts
            .iter()
            .flat_map(|&(l, n)| {
                (0..n).map(move |i| LabeledDoc {
                    label: l.to_string(),
                    text: format!("{l} {i}"),
                })
            })
            .collect()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!(matches!("freeze".parse::<Variant>(), Err(HarnessError::UnknownVariant(_))));
    }

    #[test]
    fn only_the_full_method_skips_early_stopping() {
        let base = StageConfig::for_stage(Stage::ClfFinetune);
        for v in Variant::ALL {
            let cfg = v.configure(&base);
            assert_eq!(cfg.early_stopping.is_none(), v == Variant::FreezDiscrStlr, "{v}");
        }
    }

    #[test]
    fn chain_thaw_rates() {
        let cfg = Variant::ChainThaw.configure(&StageConfig::for_stage(Stage::ClfFinetune));
        assert_eq!(cfg.base_lr, UNIFORM_LR);
        assert_eq!(cfg.lower_lr, Some(CHAIN_THAW_LOWER_LR));
        assert_eq!(cfg.unfreeze.mode, UnfreezeMode::ChainThaw);
    }

    #[test]
    fn subsample_is_balanced() {
        let d = docs(&[("a", 10), ("b", 30)]);
        let s = balanced_subsample(&d, 9, 1).unwrap();
        assert_eq!(s.iter().filter(|x| x.label == "a").count(), 5);
        assert_eq!(s.iter().filter(|x| x.label == "b").count(), 4);
        assert!(matches!(
            balanced_subsample(&d, 30, 1),
            Err(HarnessError::Budget { needed: 15, available: 10, .. })
        ));
        assert_eq!(balanced_subsample(&d, 40, 1).unwrap(), d);
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let d = docs(&[("a", 7), ("b", 13)]);
        let (train, val) = stratified_split(&d, 0.1, 3);
        assert_eq!(train.len() + val.len(), d.len());
        assert!(val.iter().all(|v| !train.contains(v)));
        assert_eq!(val.iter().filter(|x| x.label == "a").count(), 1);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn par_map_keeps_order_and_stops_on_error() {
        let items: Vec<usize> = (0..20).collect();
        let out = par_map(&items, 4, |&i| Ok(i * 2)).unwrap();
        assert_eq!(out, (0..20).map(|i| i * 2).collect::<Vec<_>>());
        let err = par_map(&items, 3, |&i| {
            if i == 5 {
                Err(HarnessError::Spec("boom".into()))
            } else {
                Ok(i)
            }
        });
        assert!(matches!(err, Err(HarnessError::Spec(m)) if m == "boom"));
    }
}
