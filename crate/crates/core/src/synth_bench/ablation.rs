use super::metrics::{compute_metrics, MetricsReport};
use super::synth::{gen_sequence, SynthConfig, SynthSequence};
use super::train::{train_toy, TrainConfig};
use crate::error::{Error, Result};
use crate::flow_mask::{build_mask, FlowPolicy, Variant};
use crate::model::ModelConfig;
use crate::numerics::ParamStore;
use crate::pipeline::{RunConfig, Tracker};

/// Scores a tracker on each sequence. The initialisation frame is left out
/// of the metrics.
pub fn evaluate(
    model: &ModelConfig,
    params: &ParamStore,
    run: &RunConfig,
    sequences: &[SynthSequence],
) -> Result<Vec<MetricsReport>> {
    let tracker = Tracker::new(model, params, run)?;
    sequences
        .iter()
        .map(|s| {
            let results = tracker.run_sequence(&s.frames, &s.boxes[0])?;
            let pred: Vec<_> = results.iter().skip(1).map(|r| r.rect).collect();
            compute_metrics(&pred, &s.boxes[1..])
        })
        .collect()
}

/// Sequences generated from `base` with seeds `base.seed + i`.
pub fn gen_dataset(base: &SynthConfig, count: usize) -> Result<Vec<SynthSequence>> {
    (0..count as u64)
        .map(|i| {
            gen_sequence(&SynthConfig {
                seed: base.seed.wrapping_add(i),
                ..base.clone()
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct AblationProtocol {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub train_data: SynthConfig,
    pub train_sequences: usize,
    pub eval_data: SynthConfig,
    pub eval_sequences: usize,
    pub train: TrainConfig,
    pub run: RunConfig,
}

impl Default for AblationProtocol {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Baseline, Variant::C, Variant::Full],
            seeds: (0..5).collect(),
            train_data: SynthConfig {
                seed: 1_000,
                ..SynthConfig::default()
            },
            train_sequences: 200,
            eval_data: SynthConfig {
                seed: 9_000,
                ..SynthConfig::default()
            },
            eval_sequences: 50,
            train: TrainConfig::default(),
            run: RunConfig {
                update_interval: 5,
                update_threshold: 0.5,
                ..RunConfig::default()
            },
        }
    }
}

/// One seed's result for one variant.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: MetricsReport,
    pub final_loss: f64,
    pub data_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub runs: Vec<SeedRun>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationRow {
    fn column(&self, f: impl Fn(&MetricsReport) -> f64) -> Vec<f64> {
        self.runs.iter().map(|r| f(&r.metrics)).collect()
    }

    pub fn median_ao(&self) -> f64 {
        median(self.column(|m| m.ao))
    }

    pub fn median_sr50(&self) -> f64 {
        median(self.column(|m| m.sr50))
    }

    pub fn median_sr75(&self) -> f64 {
        median(self.column(|m| m.sr75))
    }

    /// Smallest and largest AO over seeds.
    pub fn ao_range(&self) -> (f64, f64) {
        let v = self.column(|m| m.ao);
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    /// Mask cells differing between the baseline and variant A, if both ran.
    pub mask_diff_cells: Option<usize>,
}

/// Largest AO drop between successive variants of the trend that is only
/// a warning.
pub const TREND_TOLERANCE: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrendVerdict {
    Pass,
    /// Inversions no larger than [`TREND_TOLERANCE`].
    Warn(Vec<String>),
    Fail(Vec<String>),
}

impl AblationResult {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Checks that median AO does not decrease along `ladder`. Drops up to
    /// [`TREND_TOLERANCE`] are warnings, larger ones failures.
    pub fn trend(&self, ladder: &[Variant]) -> TrendVerdict {
        let mut warnings = Vec::new();
        let mut failures = Vec::new();
        for pair in ladder.windows(2) {
            let (Some(a), Some(b)) = (self.row(pair[0]), self.row(pair[1])) else {
                failures.push(format!("missing {} or {}", pair[0], pair[1]));
                continue;
            };
            let (x, y) = (a.median_ao(), b.median_ao());
            let msg = format!("{} AO {:.4} < {} AO {:.4}", pair[1], y, pair[0], x);
            if y + TREND_TOLERANCE < x {
                failures.push(msg);
            } else if y < x {
                warnings.push(msg);
            }
        }
        if !failures.is_empty() {
            TrendVerdict::Fail(failures)
        } else if !warnings.is_empty() {
            TrendVerdict::Warn(warnings)
        } else {
            TrendVerdict::Pass
        }
    }

    /// Aligned text table of medians and AO ranges (percent).
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<9} {:>7} {:>15} {:>7} {:>7} {:>6}\n",
            "variant", "AO", "AO range", "SR50", "SR75", "seeds"
        );
        for r in &self.rows {
            let (lo, hi) = r.ao_range();
            s.push_str(&format!(
                "{:<9} {:>7.2} {:>15} {:>7.2} {:>7.2} {:>6}\n",
                r.variant.name(),
                100.0 * r.median_ao(),
                format!("{:.2}..{:.2}", 100.0 * lo, 100.0 * hi),
                100.0 * r.median_sr50(),
                100.0 * r.median_sr75(),
                r.runs.len()
            ));
        }
        s
    }

    /// One CSV line per variant and seed.
    pub fn csv(&self) -> String {
        let mut s = String::from("variant,seed,ao,sr50,sr75,auc,final_loss,data_hash\n");
        for r in &self.rows {
            for run in &r.runs {
                let m = &run.metrics;
                s.push_str(&format!(
                    "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}\n",
                    r.variant.name(),
                    run.seed,
                    m.ao,
                    m.sr50,
                    m.sr75,
                    m.auc,
                    run.final_loss,
                    run.data_hash
                ));
            }
        }
        s
    }
}

/// Mask cells where the baseline and variant A disagree at the first
/// layer. Errors if any of them is not a template-query/search-key cell.
pub fn baseline_mask_diff(model: &ModelConfig) -> Result<usize> {
    let build = |v: Variant| {
        let mut policy = FlowPolicy::new(v);
        policy.layers = model.encoder.layers();
        build_mask(&policy, &model.geometry.layout(v), 1, None)
    };
    let base = build(Variant::Baseline)?;
    let a = build(Variant::A)?;
    let layout = model.geometry.layout(Variant::A);
    let diff = base.diff(&a);
    let x = layout.x_start();
    for &(q, k) in &diff {
        if q >= layout.n_z || k < x {
            return Err(Error::Policy(format!(
                "baseline and A masks differ outside template rows/search columns at ({q}, {k})"
            )));
        }
    }
    Ok(diff.len())
}

/// Trains every variant on every seed and evaluates it. All variants of a
/// seed see the same initial parameters and the same sample stream; a
/// differing stream is reported as an error.
pub fn run_ablation(
    protocol: &AblationProtocol,
    model_for: impl Fn(Variant) -> ModelConfig,
    mut progress: impl FnMut(&str),
) -> Result<AblationResult> {
    let mask_diff_cells = if protocol.variants.contains(&Variant::Baseline)
        && protocol.variants.contains(&Variant::A)
    {
        Some(baseline_mask_diff(&model_for(Variant::A))?)
    } else {
        None
    };
    let train = gen_dataset(&protocol.train_data, protocol.train_sequences)?;
    let eval = gen_dataset(&protocol.eval_data, protocol.eval_sequences)?;
    let mut rows: Vec<AblationRow> = protocol
        .variants
        .iter()
        .map(|&variant| AblationRow {
            variant,
            runs: Vec::new(),
        })
        .collect();
    for &seed in &protocol.seeds {
        let mut hash: Option<String> = None;
        for row in &mut rows {
            let model = model_for(row.variant);
            let cfg = TrainConfig {
                seed,
                ..protocol.train.clone()
            };
            let out = train_toy(&model, &protocol.run, &train, &cfg)?;
            match &hash {
                Some(h) if *h != out.data_hash => {
                    return Err(Error::Input(format!(
                        "seed {seed}: variant {} saw a different sample stream",
                        row.variant
                    )))
                }
                Some(_) => {}
                None => hash = Some(out.data_hash.clone()),
            }
            let reports = evaluate(&model, &out.params, &protocol.run, &eval)?;
            let metrics = MetricsReport::mean_of(&reports);
            progress(&format!(
                "seed {seed} variant {}: AO {:.4} SR50 {:.4} loss {:.4}",
                row.variant,
                metrics.ao,
                metrics.sr50,
                out.curve.last().copied().unwrap_or(f64::NAN)
            ));
            row.runs.push(SeedRun {
                seed,
                metrics,
                final_loss: out.curve.last().copied().unwrap_or(f64::NAN),
                data_hash: out.data_hash,
            });
        }
    }
    Ok(AblationResult {
        rows,
        mask_diff_cells,
    })
}
