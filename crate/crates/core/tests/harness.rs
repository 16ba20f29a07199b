mod common;

use std::fs;
use std::path::Path;

use bitta_core::adapter::AdapterConfig;
use bitta_core::harness::{
    ablate, instance_starts, metrics, parse_records_csv, pretrain, records_csv, rolling_mae,
    run_tta, trailing_len, ExperimentConfig, InstanceRecord, Mode, PretrainConfig, Timeline,
    TtaConfig,
};
use bitta_core::net::{
    init_params, load_checkpoint, save_checkpoint, ModelCheckpoint, Network, NetworkConfig,
};
use bitta_core::priors::PriorConfig;
use bitta_core::stmap::build_window;
use bitta_core::synth::{generate_stream, DomainShift, Stream, StreamParams};
use bitta_core::Error;
use proptest::prelude::*;
use tempfile::TempDir;

fn net_config() -> NetworkConfig {
    NetworkConfig {
        hr_offset: 90.0,
        hr_scale: 20.0,
        ..NetworkConfig::default()
    }
}

fn stream(frames: usize, seed: u64, hr_sigma: f64, noise: f64) -> Stream {
    let p = StreamParams {
        duration_frames: frames,
        hr_step_sigma: hr_sigma,
        noise_sigma: noise,
        ..StreamParams::default()
    };
    generate_stream(&p, seed).unwrap()
}

fn quick_pretrain() -> PretrainConfig {
    PretrainConfig {
        epochs: 1,
        learning_rate: 0.01,
        stride: 32,
        seed: 3,
        clip_norm: 1.0,
        ..PretrainConfig::default()
    }
}

fn checkpoint() -> ModelCheckpoint {
    pretrain(
        &quick_pretrain(),
        &net_config(),
        &[stream(1500, 1, 0.3, 0.05)],
    )
    .unwrap()
    .0
}

fn target() -> Stream {
    let shift = DomainShift {
        noise_sigma: 0.2,
        ..DomainShift::identity()
    };
    stream(900, 2, 0.2, 0.0).shifted(&shift, 5).unwrap()
}

fn tta(mode: Mode, max: usize) -> TtaConfig {
    TtaConfig {
        mode,
        max_instances: max,
        ..TtaConfig::default()
    }
}

#[test]
fn zero_learning_rate_keeps_initial_parameters() {
    let cfg = PretrainConfig {
        learning_rate: 0.0,
        ..quick_pretrain()
    };
    let (ckpt, report) = pretrain(&cfg, &net_config(), &[stream(600, 1, 0.2, 0.0)]).unwrap();
    assert_eq!(ckpt.params, init_params(&net_config(), cfg.seed).unwrap());
    assert_eq!(report.steps, (600 - 128) / 32 + 1);
}

#[test]
fn pretraining_is_reproducible_to_the_byte() {
    let dir = TempDir::new().unwrap();
    let source = [stream(900, 4, 0.3, 0.05)];
    for name in ["a.ckpt", "b.ckpt"] {
        let (ckpt, _) = pretrain(&quick_pretrain(), &net_config(), &source).unwrap();
        save_checkpoint(&dir.path().join(name), &ckpt).unwrap();
    }
    assert_eq!(
        fs::read(dir.path().join("a.ckpt")).unwrap(),
        fs::read(dir.path().join("b.ckpt")).unwrap()
    );
}

#[test]
fn training_error_falls_on_a_clean_constant_source() {
    let p = StreamParams {
        duration_frames: 6000,
        hr_start: 72.0,
        hr_step_sigma: 0.0,
        ..StreamParams::default()
    };
    let source = generate_stream(&p, 8).unwrap();
    let cfg = PretrainConfig {
        stride: 8,
        ..quick_pretrain()
    };
    let (_, report) = pretrain(&cfg, &net_config(), &[source]).unwrap();
    assert!(report.steps >= 200);
    assert!(
        report.last_mae < report.first_mae,
        "{} -> {}",
        report.first_mae,
        report.last_mae
    );
}

#[test]
fn pretraining_rejects_bad_sources() {
    assert!(matches!(
        pretrain(&quick_pretrain(), &net_config(), &[]),
        Err(Error::Empty(_))
    ));
    assert!(matches!(
        pretrain(
            &quick_pretrain(),
            &net_config(),
            &[stream(100, 1, 0.2, 0.0)]
        ),
        Err(Error::Empty(_))
    ));
}

#[test]
fn checkpoint_file_roundtrip() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("m.ckpt");
    let ckpt = checkpoint();
    save_checkpoint(&path, &ckpt).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    save_checkpoint(&dir.path().join("again.ckpt"), &back).unwrap();
    assert_eq!(
        fs::read(&path).unwrap(),
        fs::read(dir.path().join("again.ckpt")).unwrap()
    );

    let bytes = fs::read(&path).unwrap();
    fs::write(&path, &bytes[..bytes.len() - 1]).unwrap();
    assert!(load_checkpoint(&path).is_err());
    let wrong = ModelCheckpoint {
        params: vec![0.0; 3],
        ..ckpt
    };
    assert!(matches!(
        save_checkpoint(&path, &wrong),
        Err(Error::CountMismatch { .. })
    ));
}

#[test]
fn no_adapt_leaves_parameters_alone_and_predicts_with_them() {
    let ckpt = checkpoint();
    let target = target();
    let run = run_tta(
        &tta(Mode::NoAdapt, 0),
        &PriorConfig::default(),
        &AdapterConfig::default(),
        &ckpt,
        &target,
    )
    .unwrap();
    assert_eq!(run.params, ckpt.params);
    assert!(run.state.is_none());
    let net = Network::new(ckpt.config.clone()).unwrap();
    let starts = instance_starts(900, 128, 59, 32, 0);
    assert_eq!(run.timeline.records.len(), starts.len());
    for (r, &s) in run.timeline.records.iter().zip(&starts) {
        let w = build_window(&target, s, 128, 16).unwrap();
        let hr = net.predict(&ckpt.params, &w).unwrap();
        assert_eq!(r.pred_hr, hr.iter().sum::<f64>() / hr.len() as f64);
        assert_eq!((r.start, r.gt_hr, r.branch.as_str()), (s, w.gt_hr, "none"));
    }
}

#[test]
fn predictions_never_see_their_own_update() {
    let ckpt = checkpoint();
    let target = target();
    let priors = PriorConfig::default();
    let adapter = AdapterConfig {
        learning_rate: 0.01,
        ..AdapterConfig::default()
    };
    let short = run_tta(&tta(Mode::BiTta, 5), &priors, &adapter, &ckpt, &target).unwrap();
    let long = run_tta(&tta(Mode::BiTta, 6), &priors, &adapter, &ckpt, &target).unwrap();
    assert_eq!(long.timeline.records[..5], short.timeline.records[..]);
    assert_ne!(short.params, ckpt.params);

    let net = Network::new(ckpt.config.clone()).unwrap();
    let last = &long.timeline.records[5];
    let w = build_window(&target, last.start, 128, 16).unwrap();
    let hr = net.predict(&short.params, &w).unwrap();
    assert_eq!(last.pred_hr, hr.iter().sum::<f64>() / hr.len() as f64);
}

#[test]
fn perfect_predictor_scores_zero() {
    // Zero weights output the offset; a constant-HR target at that offset
    // is predicted exactly.
    let cfg = NetworkConfig {
        hr_offset: 84.0,
        ..NetworkConfig::default()
    };
    let ckpt = ModelCheckpoint {
        params: vec![0.0; cfg.param_count()],
        config: cfg,
        note: String::new(),
    };
    let p = StreamParams {
        duration_frames: 600,
        hr_start: 84.0,
        hr_step_sigma: 0.0,
        ..StreamParams::default()
    };
    let target = generate_stream(&p, 1).unwrap();
    let run = run_tta(
        &tta(Mode::NoAdapt, 0),
        &PriorConfig::default(),
        &AdapterConfig::default(),
        &ckpt,
        &target,
    )
    .unwrap();
    let m = run.timeline.overall;
    assert_eq!((m.mae, m.rmse, m.pearson), (0.0, 0.0, None));

    let records: Vec<InstanceRecord> = (0..8)
        .map(|i| {
            let mut r = run.timeline.records[0].clone();
            r.gt_hr = 70.0 + i as f64;
            r.pred_hr = r.gt_hr;
            r
        })
        .collect();
    let t = Timeline::from_records(Mode::Priors, records, 0.25, 0).unwrap();
    assert_eq!((t.overall.mae, t.overall.rmse), (0.0, 0.0));
    assert!((t.overall.pearson.unwrap() - 1.0).abs() < 1e-12);
}

fn brute_metrics(p: &[f64], g: &[f64]) -> (f64, f64, f64) {
    let n = p.len() as f64;
    let mut abs = 0.0;
    let mut sq = 0.0;
    for i in 0..p.len() {
        abs += (p[i] - g[i]).abs();
        sq += (p[i] - g[i]) * (p[i] - g[i]);
    }
    let (mp, mg) = (p.iter().sum::<f64>() / n, g.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..p.len() {
        sxy += (p[i] - mp) * (g[i] - mg);
        sxx += (p[i] - mp) * (p[i] - mp);
        syy += (g[i] - mg) * (g[i] - mg);
    }
    (abs / n, (sq / n).sqrt(), sxy / (sxx * syy).sqrt())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_agree_with_brute_force(
        pairs in prop::collection::vec((40.0..250.0f64, 40.0..250.0f64), 3..200),
        fraction in 0.01..1.0f64,
    ) {
        let (p, g): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let m = metrics(&p, &g).unwrap();
        let (mae, rmse, r) = brute_metrics(&p, &g);
        prop_assert!((m.mae - mae).abs() < 1e-12);
        prop_assert!((m.rmse - rmse).abs() < 1e-12);
        prop_assert!((m.pearson.unwrap() - r).abs() < 1e-12);

        let records: Vec<InstanceRecord> = p.iter().zip(&g).enumerate().map(|(i, (&pr, &gt))| InstanceRecord {
            index: i, start: i, delta: 1, pred_hr: pr, gt_hr: gt, loss: 0.0, temporal: 0.0,
            spatial: 0.0, branch: "none".into(), lambda: 0.0, grad_norm: 0.0,
            pa_grad_norm: 0.0, final_grad_norm: 0.0,
        }).collect();
        let t = Timeline::from_records(Mode::NoAdapt, records, fraction, 0).unwrap();
        let k = ((p.len() as f64 * fraction).ceil() as usize).max(1);
        prop_assert_eq!(t.trailing_count, k);
        prop_assert_eq!(trailing_len(p.len(), fraction), k);
        let from = p.len() - k;
        let mae_tail = brute_metrics(&p[from..], &g[from..]).0;
        prop_assert!((t.trailing.mae - mae_tail).abs() < 1e-12);

        let back = parse_records_csv(&records_csv(&t.records)).unwrap();
        prop_assert_eq!(back, t.records);
    }
}

#[test]
fn rolling_mae_has_one_value_per_full_window() {
    let errs = [1.0, 3.0, 5.0, 7.0];
    assert_eq!(rolling_mae(&errs, 2), vec![2.0, 4.0, 6.0]);
    assert_eq!(rolling_mae(&errs, 4), vec![4.0]);
    assert!(rolling_mae(&errs, 5).is_empty());
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn ablation_is_deterministic_and_complete() {
    let ckpt = checkpoint();
    let target = target();
    let dir = TempDir::new().unwrap();
    let mut reports = Vec::new();
    for name in ["one", "two"] {
        let report = ablate(
            &tta(Mode::BiTta, 8),
            &PriorConfig::default(),
            &AdapterConfig::default(),
            &ckpt,
            &target,
        )
        .unwrap();
        report.write(&dir.path().join(name)).unwrap();
        reports.push(report);
    }
    let one = files_under(&dir.path().join("one"));
    assert_eq!(one, files_under(&dir.path().join("two")));
    assert_eq!(one.len(), 2 + 2 * 5);

    let report = &reports[0];
    let table = report.table();
    assert_eq!(table.lines().count(), 6);
    for (mode, line) in Mode::ALL.iter().zip(table.lines().skip(1)) {
        assert!(line.starts_with(mode.as_str()));
        assert_eq!(report.get(*mode).unwrap().records.len(), 8);
    }
    // Every mode sees the same instances and the same predictions at t = 0.
    let first: Vec<f64> = report
        .timelines
        .iter()
        .map(|t| t.records[0].pred_hr)
        .collect();
    assert!(first.iter().all(|&p| p == first[0]));
}

#[test]
fn shipped_scenario_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/scenario.json");
    let cfg = ExperimentConfig::load(&path).unwrap();
    assert_eq!(cfg.adapter, AdapterConfig::default());
    assert_eq!(cfg.priors, PriorConfig::default());
    assert_eq!(cfg.tta.trailing_fraction, 0.25);
    let frames = cfg.target.params.duration_frames;
    let instances = instance_starts(
        frames,
        cfg.network.window_len,
        cfg.priors.delta_max,
        cfg.tta.stride_for(cfg.network.window_len),
        cfg.tta.max_instances,
    );
    assert!(instances.len() >= 2000);
}
