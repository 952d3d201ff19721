use pixelsail::numerics::ParamSet;
use pixelsail::train::{
    checkpoint_config, load_model, load_records, Archive, RunConfig, StepLog, SyntheticKind, Trainer, CSV_HEADER,
};
use pixelsail::Error;

fn small(steps: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.synthetic_kind = SyntheticKind::Mixed;
    cfg.data.synthetic_n = 6;
    cfg.train.batch_size = 2;
    cfg.train.steps = steps;
    cfg.train.lr = 2e-3;
    cfg.train.seed = 5;
    cfg
}

fn trainer(cfg: &RunConfig) -> Trainer {
    let (recs, base) = load_records(cfg).unwrap();
    Trainer::new(cfg.clone(), &recs, base.as_deref()).unwrap()
}

fn csv(logs: &[StepLog]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for l in logs {
        s.push_str(&l.csv_line());
        s.push('\n');
    }
    s
}

#[test]
fn identical_runs_write_identical_logs() {
    let cfg = small(10);
    let a = trainer(&cfg).run(None, |_, _| Ok(())).unwrap();
    let b = trainer(&cfg).run(None, |_, _| Ok(())).unwrap();
    assert_eq!(a.len(), 10);
    assert_eq!(csv(&a), csv(&b));
    assert!(a.iter().all(|l| l.l_distill > 0.0 && l.l_ntp > 0.0));
    let mut other = cfg.clone();
    other.train.seed = 6;
    assert_ne!(csv(&trainer(&other).run(None, |_, _| Ok(())).unwrap()), csv(&a));
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let mut cfg = small(10);
    cfg.train.weight_decay = 0.1;
    let mut t = trainer(&cfg);
    let before: ParamSet = t.model().params().clone();
    t.override_learning_rate(Some(0.0));
    let logs = t.run(None, |_, _| Ok(())).unwrap();
    assert_eq!(logs.len(), 10);
    assert!(logs.iter().all(|l| l.lr == 0.0));
    assert!(t.model().params().bit_eq(&before));

    cfg.train.lr = 0.0;
    let (recs, base) = load_records(&cfg).unwrap();
    assert!(matches!(Trainer::new(cfg, &recs, base.as_deref()), Err(Error::Config(_))));
}

#[test]
fn training_lowers_the_loss() {
    let cfg = small(30);
    let logs = trainer(&cfg).run(None, |_, _| Ok(())).unwrap();
    let total = |l: &StepLog| l.l_ntp + 2.0 * l.l_ce + 0.5 * l.l_dice;
    let head: f64 = logs[..5].iter().map(total).sum();
    let tail: f64 = logs[25..].iter().map(total).sum();
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn resume_matches_straight_through_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(20);
    let mut straight = trainer(&cfg);
    let full = straight.run(None, |_, _| Ok(())).unwrap();

    let mut first = trainer(&cfg);
    let head = first.run(Some(10), |_, _| Ok(())).unwrap();
    let path = dir.path().join("mid.ckpt");
    first.save(&path).unwrap();
    drop(first);

    let (recs, base) = load_records(&cfg).unwrap();
    let mut resumed = Trainer::resume(cfg.clone(), &recs, base.as_deref(), &path).unwrap();
    assert_eq!(resumed.step_index(), 10);
    let tail = resumed.run(None, |_, _| Ok(())).unwrap();
    let joined: Vec<StepLog> = head.into_iter().chain(tail).collect();
    assert_eq!(csv(&joined), csv(&full));
    assert_eq!(joined.last().unwrap().l_ntp.to_bits(), full.last().unwrap().l_ntp.to_bits());
    assert!(resumed.model().params().bit_eq(straight.model().params()));
    assert_eq!(resumed.to_archive().unwrap().to_bytes().unwrap(), straight.to_archive().unwrap().to_bytes().unwrap());
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(3);
    let mut t = trainer(&cfg);
    t.run(None, |_, _| Ok(())).unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    t.save(&p1).unwrap();
    Archive::load(&p1).unwrap().save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    let a = Archive::load(&p1).unwrap();
    assert_eq!(checkpoint_config(&a).unwrap(), cfg);
    let m = load_model(&p1, &cfg).unwrap();
    assert!(m.params().bit_eq(t.model().params()));
}

#[test]
fn damaged_checkpoints_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(1);
    let mut t = trainer(&cfg);
    t.run(None, |_, _| Ok(())).unwrap();
    let p = dir.path().join("c.ckpt");
    t.save(&p).unwrap();
    let bytes = std::fs::read(&p).unwrap();

    for cut in [bytes.len() - 1, bytes.len() / 2, 40, 5, 0] {
        let q = dir.path().join(format!("cut{cut}.ckpt"));
        std::fs::write(&q, &bytes[..cut]).unwrap();
        let err = Archive::load(&q).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "cut {cut}: {err}");
    }

    // a model with different shapes is rejected, naming the first key
    let mut wide = cfg.clone();
    wide.model.channels = 32;
    let err = load_model(&p, &wide).unwrap_err().to_string();
    assert!(err.contains("tok_emb") || err.contains("param"), "{err}");

    let (recs, base) = load_records(&cfg).unwrap();
    let mut fewer = cfg.clone();
    fewer.data.synthetic_n = 4;
    let (few, _) = load_records(&fewer).unwrap();
    assert!(Trainer::resume(fewer, &few, base.as_deref(), &p).is_err());
    assert!(Trainer::resume(cfg, &recs, base.as_deref(), &dir.path().join("missing.ckpt")).is_err());
}
