use flowtrack_core::model::ModelConfig;
use flowtrack_core::pipeline::RunConfig;
use flowtrack_core::synth_bench::{
    gen_sequence, loss_trend_decreasing, run_ablation, train_from, train_toy, AblationProtocol,
    AblationRow, MetricsReport, SeedRun, SynthConfig, SynthSequence, TrainConfig,
};
use flowtrack_core::{Error, Variant};

fn data(count: usize, length: usize) -> Vec<SynthSequence> {
    (0..count as u64)
        .map(|i| {
            gen_sequence(&SynthConfig {
                seed: 40 + i,
                length,
                ..SynthConfig::default()
            })
            .unwrap()
        })
        .collect()
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let model = ModelConfig::tiny(Variant::Full);
    let cfg = TrainConfig {
        steps: 3,
        lr: 0.0,
        batch: 2,
        ..TrainConfig::default()
    };
    let out = train_toy(&model, &RunConfig::default(), &data(2, 6), &cfg).unwrap();
    let init = model.init_params(cfg.seed).unwrap();
    for ((name, a), (_, b)) in out.params.iter().zip(init.iter()) {
        assert_eq!(a.value, b.value, "{name}");
    }
    assert_eq!(out.curve.len(), 3);
}

#[test]
fn same_seed_same_parameters() {
    let model = ModelConfig::tiny(Variant::C);
    let d = data(2, 6);
    let cfg = TrainConfig {
        steps: 4,
        batch: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let a = train_toy(&model, &RunConfig::default(), &d, &cfg).unwrap();
    let b = train_toy(&model, &RunConfig::default(), &d, &cfg).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.curve_csv(), b.curve_csv());
    assert_eq!(a.data_hash, b.data_hash);
    let c = train_toy(
        &model,
        &RunConfig::default(),
        &d,
        &TrainConfig { seed: 10, ..cfg },
    )
    .unwrap();
    assert_ne!(a.data_hash, c.data_hash);
}

#[test]
fn overfits_a_single_pair() {
    // Two frames, no jitter or flip: every draw is the same template,
    // dynamic region and search crop.
    let model = ModelConfig::toy(Variant::Full);
    let d = data(1, 2);
    let cfg = TrainConfig {
        steps: 500,
        batch: 1,
        flip: false,
        max_shift: 0.0,
        scale_jitter: 0.0,
        ..TrainConfig::default()
    };
    let out = train_toy(&model, &RunConfig::default(), &d, &cfg).unwrap();
    let first = out.curve[0];
    let last = *out.curve.last().unwrap();
    assert!(last < 0.1 * first, "loss {first} -> {last}");
    assert!(loss_trend_decreasing(&out.curve, 50));
}

#[test]
fn runaway_learning_rate_is_divergence() {
    let model = ModelConfig::tiny(Variant::Baseline);
    let cfg = TrainConfig {
        steps: 50,
        lr: 1e4,
        clip_norm: 0.0,
        batch: 1,
        ..TrainConfig::default()
    };
    let err = train_toy(&model, &RunConfig::default(), &data(1, 4), &cfg).unwrap_err();
    assert!(matches!(err, Error::Divergence(_)), "{err}");
}

#[test]
fn resumed_training_continues_from_given_parameters() {
    let model = ModelConfig::tiny(Variant::Full);
    let d = data(1, 4);
    let cfg = TrainConfig {
        steps: 2,
        batch: 1,
        ..TrainConfig::default()
    };
    let start = model.init_params(77).unwrap();
    let out = train_from(&model, &RunConfig::default(), &d, &cfg, start.clone()).unwrap();
    assert_ne!(out.params, start);
    assert_eq!(out.params.len(), start.len());
}

#[test]
fn trend_check() {
    assert!(loss_trend_decreasing(&[3.0, 2.9, 2.0, 1.0], 2));
    assert!(!loss_trend_decreasing(&[1.0, 1.0, 2.0, 3.0], 2));
    assert!(!loss_trend_decreasing(&[1.0], 2));
}

fn report(ao: f64) -> MetricsReport {
    MetricsReport::from_series(vec![ao], vec![0.0], &[0.0])
}

#[test]
fn ablation_row_median_and_range() {
    let row = AblationRow {
        variant: Variant::C,
        runs: [0.4, 0.9, 0.5, 0.7, 0.6]
            .iter()
            .enumerate()
            .map(|(i, &ao)| SeedRun {
                seed: i as u64,
                metrics: report(ao),
                final_loss: 1.0,
                data_hash: String::new(),
            })
            .collect(),
    };
    assert_eq!(row.median_ao(), 0.6);
    assert_eq!(row.ao_range(), (0.4, 0.9));
}

#[test]
fn small_ablation_keeps_order_and_data_stream() {
    let protocol = AblationProtocol {
        variants: vec![Variant::A, Variant::Baseline, Variant::Full],
        seeds: vec![0, 1],
        train_data: SynthConfig {
            seed: 3,
            length: 5,
            ..SynthConfig::default()
        },
        train_sequences: 2,
        eval_data: SynthConfig {
            seed: 4,
            length: 4,
            ..SynthConfig::default()
        },
        eval_sequences: 1,
        train: TrainConfig {
            steps: 2,
            batch: 1,
            ..TrainConfig::default()
        },
        ..AblationProtocol::default()
    };
    let mut lines = Vec::new();
    let result = run_ablation(&protocol, ModelConfig::tiny, |l| lines.push(l.to_string())).unwrap();
    let order: Vec<Variant> = result.rows.iter().map(|r| r.variant).collect();
    assert_eq!(order, protocol.variants);
    assert_eq!(lines.len(), 6);
    // Baseline and A differ only where template queries meet search keys:
    // 16 template rows by 64 search columns.
    assert_eq!(result.mask_diff_cells, Some(16 * 64));
    for seed in 0..2 {
        let hashes: Vec<&str> = result
            .rows
            .iter()
            .map(|r| r.runs[seed].data_hash.as_str())
            .collect();
        assert!(hashes.windows(2).all(|w| w[0] == w[1]));
    }
    let table = result.table();
    let a = table.find("\nA ").unwrap();
    let b = table.find("\nbaseline").unwrap();
    assert!(a < b, "{table}");
    assert_eq!(result.csv().lines().count(), 1 + 3 * 2);
}
