use std::path::Path;

use hsam::checkpoint::{self, Checkpoint};
use hsam::log::{parse_log, EpochRecord};
use hsam::report::{self, Format};
use hsam::{config, dataset_io, pgm, run, Error};
use hsam_core::config::RunConfig;
use hsam_core::data::{generate, Dataset, GenerateSpec};
use hsam_core::metrics::HdVariant;
use hsam_core::verify::miniature_config;

fn tiny(seed: u64, n: usize) -> Dataset {
    generate(&GenerateSpec { seed, n, height: 16, width: 16, classes: 3, tail_ratio: 0.7, split: "train".into() })
        .unwrap()
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.model = miniature_config();
    cfg.train.batch_size = 4;
    cfg.train.epochs = 4;
    cfg.train.checkpoint_every = 2;
    cfg.optim.warmup_steps = 4;
    cfg
}

#[test]
fn dataset_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.hsd");
    let ds = tiny(1, 5);
    dataset_io::write(&ds, &path).unwrap();
    let (back, manifest) = dataset_io::read(&path).unwrap();
    assert_eq!(back, ds);
    assert_eq!(manifest.n, 5);
    assert_eq!(manifest.frequencies.iter().sum::<u64>(), 5 * 256);
    assert_eq!(dataset_io::encode(&back), std::fs::read(&path).unwrap());
}

#[test]
fn corrupted_magic_fails_at_offset_zero() {
    let mut bytes = dataset_io::encode(&tiny(2, 2));
    bytes[0] = b'X';
    let e = dataset_io::decode(&bytes).unwrap_err();
    assert_eq!(e.offset, 0);
    assert_eq!(e.field.as_deref(), Some("magic"));
}

#[test]
fn sample_count_mismatch_names_the_field() {
    let ds = tiny(3, 3);
    let mut bytes = dataset_io::encode(&ds);
    bytes.truncate(bytes.len() - 10);
    let e = dataset_io::decode(&bytes).unwrap_err();
    assert_eq!(e.field.as_deref(), Some("n"));

    let bytes = dataset_io::encode(&ds);
    let text = String::from_utf8_lossy(&bytes).replacen("n=3", "n=4", 1);
    let e = dataset_io::decode(text.as_bytes());
    assert_eq!(e.unwrap_err().field.as_deref(), Some("n"));
}

#[test]
fn out_of_range_label_is_located() {
    let ds = tiny(4, 1);
    let mut bytes = dataset_io::encode(&ds);
    let last = bytes.len() - 1;
    bytes[last] = 9;
    let e = dataset_io::decode(&bytes).unwrap_err();
    assert_eq!(e.offset, last as u64);
    assert_eq!(e.field.as_deref(), Some("mask"));
}

#[test]
fn unreadable_path_is_an_io_error() {
    let e = dataset_io::read(Path::new("/nonexistent/dir/x.hsd")).unwrap_err();
    assert!(matches!(e, Error::Io { .. }));
}

#[test]
fn config_round_trip_and_unknown_keys() {
    let cfg = tiny_config();
    let text = config::to_toml(&cfg);
    assert_eq!(config::parse(&text).unwrap(), cfg);
    let e = config::parse("seed = 1\n[train]\nepochz = 3\n").unwrap_err();
    assert!(e.to_string().contains("epochz"), "{e}");
    let e = config::parse("[model.decoder]\nclasses = 1\n").unwrap_err();
    assert!(e.to_string().contains("classes"), "{e}");
}

#[test]
fn shipped_default_config_matches_the_builtin_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let cfg = config::load(&path).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.loss.lambda_dice, 0.9);
    assert_eq!(cfg.loss.lambda_ce, 0.1);
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let cfg = tiny_config();
    let ds = tiny(5, 8);
    let table = hsam_core::data::class_frequencies(&ds, &cfg.data.noise).table;
    let mut t = hsam_core::train::Trainer::new(&cfg, table).unwrap();
    t.train_epoch(&ds).unwrap();
    let ck = checkpoint::from_trainer(&t);
    let bytes = ck.encode();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.encode(), bytes);
    let r = checkpoint::restore(&back, None).unwrap();
    assert_eq!(r.epoch, 1);
    assert_eq!(r.opt.step, t.opt.step);
    assert_eq!(r.opt.m, t.opt.m);
    for ((_, a), (_, b)) in r.store.iter().zip(t.store.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }

    let mut bad = bytes.clone();
    bad[1] = 0;
    assert_eq!(Checkpoint::decode(&bad).unwrap_err().offset, 0);
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());

    let mut other = cfg.clone();
    other.model.decoder.mlp_dim = 8;
    let e = checkpoint::restore(&back, Some(&other)).err().unwrap();
    assert!(e.to_string().contains("config hash mismatch"), "{e}");
    let mut reseeded = cfg.clone();
    reseeded.seed = 99;
    assert!(checkpoint::restore(&back, Some(&reseeded)).is_err());
}

fn train_into(cfg: &RunConfig, ds: &Dataset, out: &Path, resume: Option<&Path>) -> Vec<EpochRecord> {
    let plan = run::TrainPlan { cfg, train: ds, eval: Some(ds), out, resume };
    run::train(&plan, |_| {}).unwrap().records
}

#[test]
fn resume_replays_the_uninterrupted_run() {
    let cfg = tiny_config();
    let ds = tiny(6, 8);
    let dir = tempfile::tempdir().unwrap();
    let (full, part) = (dir.path().join("full"), dir.path().join("part"));
    let records = train_into(&cfg, &ds, &full, None);
    assert_eq!(records.len(), 4);
    assert!(full.join(run::checkpoint_name(2)).exists());
    assert!(full.join(run::checkpoint_name(4)).exists());

    std::fs::create_dir_all(&part).unwrap();
    let mid = part.join("mid.hck");
    std::fs::copy(full.join(run::checkpoint_name(2)), &mid).unwrap();
    let resumed = train_into(&cfg, &ds, &part, Some(&mid));
    assert_eq!(resumed, records[2..]);

    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&full.join(run::FINAL_CHECKPOINT)), read(&part.join(run::FINAL_CHECKPOINT)));
    let full_log = String::from_utf8(read(&full.join(run::LOG_FILE))).unwrap();
    let part_log = String::from_utf8(read(&part.join(run::LOG_FILE))).unwrap();
    assert!(full_log.ends_with(&part_log));
    assert_eq!(parse_log(&full_log).unwrap(), records);
}

#[test]
fn target_dice_stops_early() {
    let mut cfg = tiny_config();
    cfg.train.target_dice = Some(0.0);
    let ds = tiny(7, 4);
    let dir = tempfile::tempdir().unwrap();
    let plan = run::TrainPlan { cfg: &cfg, train: &ds, eval: Some(&ds), out: dir.path(), resume: None };
    let outcome = run::train(&plan, |_| {}).unwrap();
    assert!(outcome.reached_target);
    assert_eq!(outcome.records.len(), 1);
    assert!(dir.path().join(run::FINAL_CHECKPOINT).exists());
}

#[test]
fn mismatched_dataset_is_refused() {
    let cfg = tiny_config();
    let ds = generate(&GenerateSpec { seed: 1, n: 2, height: 32, width: 32, classes: 3, tail_ratio: 0.5, split: "x".into() })
        .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let plan = run::TrainPlan { cfg: &cfg, train: &ds, eval: None, out: dir.path(), resume: None };
    assert!(run::train(&plan, |_| {}).is_err());
}

#[test]
fn evaluation_reports_and_masks() {
    let mut cfg = tiny_config();
    cfg.train.epochs = 1;
    let ds = tiny(8, 3);
    let dir = tempfile::tempdir().unwrap();
    let records = train_into(&cfg, &ds, dir.path(), None);
    let ev = run::evaluate_checkpoint(&dir.path().join(run::FINAL_CHECKPOINT), Some(&cfg), &ds, HdVariant::Max).unwrap();
    assert_eq!(Some(ev.report.mean_dice), records[0].eval_dice);
    let masks = dir.path().join("masks");
    run::dump_masks(&masks, &ds, &ev.predictions).unwrap();
    let (w, h, maxval, px) = pgm::decode(&std::fs::read(masks.join("gt_0002.pgm")).unwrap()).unwrap();
    assert_eq!((w, h, maxval), (16, 16, 2));
    assert_eq!(px, ds.samples[2].mask);

    let csv = report::metric_table(&ev.report, Format::Csv);
    let dice_1: f64 = csv.lines().nth(2).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(dice_1, ev.report.per_class_dice[1]);
    let text = report::metric_table(&ev.report, Format::Text);
    assert!(text.contains(&ev.report.mean_dice.to_string()));
}

#[test]
fn pgm_round_trip() {
    let labels: Vec<u8> = (0..12).map(|i| (i % 4) as u8).collect();
    let bytes = pgm::encode(&labels, 3, 4, 4).unwrap();
    assert!(bytes.starts_with(b"P5\n4 3\n3\n"));
    assert_eq!(pgm::decode(&bytes), Some((4, 3, 3, labels)));
}

#[test]
fn log_lines_round_trip() {
    let r = EpochRecord {
        epoch: 3,
        lambda_w: 0.8 * (-0.015f64).exp(),
        loss_stage1: 0.123456789012345,
        loss_stage2: None,
        loss_total: 1.0 / 3.0,
        lr: 2.5e-3,
        steps: 25,
        eval_dice: Some(0.9),
        eval_hd: None,
    };
    let line = r.to_line();
    assert!(line.contains("loss_stage2=na"));
    assert_eq!(EpochRecord::parse(&line).unwrap(), r);
    let table = report::log_table(&[r.clone()], Format::Csv);
    assert_eq!(table.lines().count(), 2);
}
