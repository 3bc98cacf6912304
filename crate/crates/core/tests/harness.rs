use proptest::prelude::*;
use ulmfit::engine::*;
use ulmfit::finetune::LrSchedule;
use ulmfit::harness::*;
use ulmfit::lm::LmDropouts;
use ulmfit::synth;
use ulmfit::text::LabeledDoc;

fn tiny_lm() -> Checkpoint {
    let mut cfg = StageConfig::for_stage(Stage::Pretrain);
    cfg.epochs = 1;
    cfg.batch_size = 8;
    cfg.bptt = 20;
    cfg.model = ModelSpec {
        embed_dim: 8,
        hidden_dim: 12,
        n_layers: 2,
        dropouts: LmDropouts::PAPER.scaled(0.2),
        ..ModelSpec::default()
    };
    run_pretrain(&cfg, &synth::general_corpus(5_000, 5)).unwrap().0
}

fn quick_clf() -> StageConfig {
    let mut cfg = StageConfig::for_stage(Stage::ClfFinetune);
    cfg.epochs = 2;
    cfg.batch_size = 8;
    cfg.bptt = 40;
    cfg
}

fn quick_lm() -> StageConfig {
    let mut cfg = StageConfig::for_stage(Stage::LmFinetune);
    cfg.epochs = 1;
    cfg.batch_size = 4;
    cfg.bptt = 20;
    cfg
}

fn labeled(counts: &[(&str, usize)]) -> Vec<LabeledDoc> {
    counts
        .iter()
        .flat_map(|&(l, n)| {
            (0..n).map(move |i| LabeledDoc {
                label: l.to_string(),
                text: format!("doc {i} of {l}"),
            })
        })
        .collect()
}

#[test]
fn variant_registry_is_exhaustive() {
    let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
    assert_eq!(
        names,
        [
            "from_scratch",
            "full",
            "full_discr",
            "full_discr_stlr",
            "last",
            "chain_thaw",
            "freez",
            "freez_discr",
            "freez_stlr",
            "freez_cos",
            "freez_discr_stlr"
        ]
    );
    // Adding a variant without listing it breaks this match.
    for v in Variant::ALL {
        match v {
            Variant::FromScratch
            | Variant::Full
            | Variant::FullDiscr
            | Variant::FullDiscrStlr
            | Variant::Last
            | Variant::ChainThaw
            | Variant::Freez
            | Variant::FreezDiscr
            | Variant::FreezStlr
            | Variant::FreezCos
            | Variant::FreezDiscrStlr => {}
        }
    }
}

#[test]
fn every_variant_runs_and_the_grid_is_complete() {
    let lm = tiny_lm();
    let data = synth::reviews(40, 2);
    let mut spec = AblationSpec::new(Variant::ALL.to_vec(), vec![1]);
    spec.config = quick_clf();
    let grid = run_ablation(&spec, &lm, &data).unwrap();
    assert_eq!(grid.rows.len(), 11);
    for v in Variant::ALL {
        let e = grid.errors(v);
        assert_eq!(e.len(), 1, "{v}");
        assert!((0.0..=1.0).contains(&e[0]));
    }
    let csv = grid.to_csv();
    assert!(csv.starts_with("variant,seed,val_error\n"));
    assert_eq!(AblationGrid::from_csv(&csv).unwrap(), grid);
}

#[test]
fn grid_is_independent_of_job_count() {
    let lm = tiny_lm();
    let data = synth::reviews(30, 4);
    let mut spec = AblationSpec::new(vec![Variant::FreezDiscrStlr, Variant::FromScratch], vec![2, 1]);
    spec.config = quick_clf();
    let serial = run_ablation(&spec, &lm, &data).unwrap();
    spec.jobs = 3;
    let parallel = run_ablation(&spec, &lm, &data).unwrap();
    assert_eq!(serial, parallel);
    let keys: Vec<_> = serial.rows.iter().map(|r| (r.variant, r.seed)).collect();
    assert_eq!(
        keys,
        [
            (Variant::FromScratch, 1),
            (Variant::FromScratch, 2),
            (Variant::FreezDiscrStlr, 1),
            (Variant::FreezDiscrStlr, 2)
        ]
    );
}

#[test]
fn unknown_variant_fails_before_training() {
    let err = Variant::parse_list("full,freeze_all").unwrap_err();
    assert!(matches!(&err, HarnessError::UnknownVariant(v) if v == "freeze_all"));
    assert!(err.to_string().contains("freez_discr_stlr"));
}

#[test]
fn ablation_needs_two_classes() {
    let lm = tiny_lm();
    let mut spec = AblationSpec::new(vec![Variant::Last], vec![1]);
    spec.config = quick_clf();
    let err = run_ablation(&spec, &lm, &labeled(&[("a", 20)])).unwrap_err();
    assert!(matches!(err, HarnessError::Engine(EngineError::SingleClass(_))), "{err}");
}

#[test]
fn train_limit_subsamples_after_the_split() {
    let lm = tiny_lm();
    let data = synth::reviews(60, 4);
    let mut spec = AblationSpec::new(vec![Variant::Last], vec![1]);
    spec.config = quick_clf();
    spec.train_limit = Some(100);
    let all = run_ablation(&spec, &lm, &data).unwrap();
    spec.train_limit = None;
    assert_eq!(run_ablation(&spec, &lm, &data).unwrap(), all);
    spec.train_limit = Some(10);
    run_ablation(&spec, &lm, &data).unwrap();
}

#[test]
fn lowshot_curve_covers_every_cell() {
    let lm = tiny_lm();
    let data = synth::reviews(60, 6);
    let mut spec = LowShotSpec::new(
        vec![20, 10],
        vec![LowShotMode::Supervised, LowShotMode::SemiSupervised],
        vec![1, 2],
    );
    spec.lm_config = quick_lm();
    spec.clf_config = quick_clf();
    assert_eq!(spec.budgets(), [10, 20]);
    let curve = run_lowshot(&spec, &lm, &data).unwrap();
    assert_eq!(curve.rows.len(), 2 * 3 * 2);
    for b in [10, 20] {
        for m in [LowShotMode::Supervised, LowShotMode::SemiSupervised, LowShotMode::FromScratch] {
            assert_eq!(curve.errors(b, m).len(), 2, "{b} {m:?}");
        }
    }
    let csv = curve.to_csv();
    assert!(csv.starts_with("budget,mode,seed,val_error\n"));
    assert!(csv.contains(",semi_supervised,"));
    assert_eq!(LowShotCurve::from_csv(&csv).unwrap(), curve);
}

#[test]
fn full_budget_matches_a_plain_run() {
    let lm = tiny_lm();
    let data = synth::reviews(30, 6);
    let (train, val) = stratified_split(&data, 0.1, 0);
    let mut spec = LowShotSpec::new(vec![train.len()], vec![LowShotMode::Supervised], vec![3]);
    spec.lm_config = quick_lm();
    spec.clf_config = quick_clf();
    let curve = run_lowshot(&spec, &lm, &data).unwrap();

    let text: String = train.iter().map(|d| format!("{}\n", d.text)).collect();
    let mut lm_cfg = quick_lm();
    lm_cfg.seed = 3;
    let (ft, _) = run_lm_finetune(&lm_cfg, &lm, &text).unwrap();
    let mut clf_cfg = Variant::FreezDiscrStlr.configure(&quick_clf());
    clf_cfg.seed = 3;
    let (_, m) = run_clf_finetune(&clf_cfg, &ft, &train, &val).unwrap();
    assert_eq!(
        curve.error(train.len(), LowShotMode::Supervised, 3),
        m.last().unwrap().val_error
    );
}

#[test]
fn budget_beyond_a_class_is_an_error() {
    let lm = tiny_lm();
    let data = labeled(&[("a", 30), ("b", 8)]);
    let spec = LowShotSpec::new(vec![10, 20], vec![LowShotMode::Supervised], vec![1]);
    let err = run_lowshot(&spec, &lm, &data).unwrap_err();
    assert!(
        matches!(&err, HarnessError::Budget { budget: 20, label, .. } if label == "b"),
        "{err}"
    );
}

#[test]
fn lowshot_modes_parse() {
    assert_eq!("semi_supervised".parse::<LowShotMode>().unwrap(), LowShotMode::SemiSupervised);
    assert!("from_scratch".parse::<LowShotMode>().is_err());
    assert!("semi".parse::<LowShotMode>().is_err());
}

#[test]
fn schedule_dump_peaks_at_cut() {
    let rows = schedule_curve(LrSchedule::default(), 1000, 0.01).unwrap();
    assert_eq!(rows.len(), 1001);
    assert_eq!(rows[100], ScheduleRow { t: 100, lr: 0.01 });
    assert!((rows[0].lr - 3.125e-4).abs() < 1e-12);
    let csv = schedule_csv(&rows);
    assert!(csv.starts_with("t,lr\n"));
    assert_eq!(parse_schedule_csv(&csv).unwrap(), rows);

    let cos = schedule_curve(LrSchedule::cosine(), 10, 0.5).unwrap();
    assert_eq!(cos[0].lr, 0.5);
    assert!(cos[10].lr.abs() < 1e-15);
    assert!(schedule_curve(LrSchedule::default(), 5, 0.01).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stratified_split_matches_class_proportions(
        counts in prop::collection::vec(1usize..60, 2..5),
        frac in 0.05f64..0.5,
        seed in any::<u64>(),
    ) {
        let names = ["a", "b", "c", "d"];
        let spec: Vec<(&str, usize)> = names.iter().copied().zip(counts.iter().copied()).collect();
        let data = labeled(&spec);
        let (train, val) = stratified_split(&data, frac, seed);
        prop_assert_eq!(train.len() + val.len(), data.len());
        for &(l, n) in &spec {
            let k = val.iter().filter(|d| d.label == l).count() as f64;
            prop_assert!((k - frac * n as f64).abs() <= 1.0, "{} {} {}", l, k, n);
        }
        let (train2, val2) = stratified_split(&data, frac, seed);
        prop_assert_eq!(train2, train);
        prop_assert_eq!(val2, val);
    }

    #[test]
    fn subsample_is_balanced_and_drawn_from_the_data(
        a in 5usize..40,
        b in 5usize..40,
        budget in 2usize..10,
        seed in any::<u64>(),
    ) {
        let data = labeled(&[("a", a), ("b", b)]);
        let s = balanced_subsample(&data, budget, seed).unwrap();
        prop_assert_eq!(s.len(), budget);
        let na = s.iter().filter(|d| d.label == "a").count();
        prop_assert!(na.abs_diff(budget - na) <= 1);
        prop_assert!(s.iter().all(|d| data.contains(d)));
    }
}
