//! Analysis, ablation and complexity commands.

use std::fs::{self, File};
use std::path::{Path, PathBuf};

use xflab_core::analysis::{
    anchor_ablation_report, attention_entropy, first_token_attention, gate_profile, lambda_ratio_map,
    layer_similarity_matrix, pca_core_features, token_similarity, ActivationTrace, MetricTable,
};
use xflab_core::complexity::{enumerate_params, r_flops, r_p_dynamic, r_p_static, schedule_calc, ComplexityReport};
use xflab_core::model::{
    CheckpointContainer, ForwardOptions, ModelConfig, TraceOptions, TransformerModel, Variant, DM_HIDDEN,
};
use xflab_core::tensor::DType;

use crate::corpus::Corpus;
use crate::error::{CliError, CliResult};

/// Loads a checkpoint of either precision as an f64 model.
pub fn load_model(path: &Path) -> CliResult<(TransformerModel<f64>, CheckpointContainer)> {
    let c = CheckpointContainer::load(path)?;
    let model = match c.entry("embed.weight").map(|e| e.dtype) {
        Some(DType::F32) => TransformerModel::<f32>::from_container(&c)?.cast::<f64>(),
        _ => TransformerModel::<f64>::from_container(&c)?,
    };
    Ok((model, c))
}

/// Full traces of the first `count` evaluation windows.
pub fn traces(model: &TransformerModel<f64>, corpus: &Corpus, count: usize) -> CliResult<Vec<ActivationTrace>> {
    let windows = corpus.eval_windows(count, model.config().seq_len);
    if windows.is_empty() {
        return Err(CliError::Other("corpus has no window to analyze".into()));
    }
    let opts = ForwardOptions {
        trace: TraceOptions::all(),
        ablate_anchor: false,
    };
    windows
        .iter()
        .map(|(x, _)| Ok(model.forward_with(x, &opts)?.trace.expect("trace requested")))
        .collect()
}

/// Cell-wise mean of tables with identical layout.
pub fn mean_tables(tables: &[MetricTable]) -> MetricTable {
    let mut out = tables[0].clone();
    let n = tables.len() as f64;
    for (r, row) in out.rows.iter_mut().enumerate() {
        for (c, v) in row.values.iter_mut().enumerate() {
            *v = tables.iter().map(|t| t.rows[r].values[c]).sum::<f64>() / n;
        }
    }
    out
}

#[derive(Clone, Debug, Default)]
pub struct AnalyzeOutcome {
    pub written: Vec<PathBuf>,
    /// `(metric, reason)` for metrics that do not apply to the model.
    pub skipped: Vec<(String, String)>,
}

fn write_table(out_dir: &Path, name: &str, table: &MetricTable) -> CliResult<PathBuf> {
    let path = out_dir.join(format!("{name}.csv"));
    table.write_csv(File::create(&path)?)?;
    Ok(path)
}

pub fn analyze(
    checkpoint: &Path,
    corpus: Option<&Corpus>,
    metrics: &[String],
    sequences: usize,
    variance_target: f64,
    out_dir: &Path,
) -> CliResult<AnalyzeOutcome> {
    fs::create_dir_all(out_dir)?;
    let (model, container) = load_model(checkpoint)?;
    let mut outcome = AnalyzeOutcome::default();
    let needs_trace = metrics.iter().any(|m| m != "lambda_ratio");
    let traces = if needs_trace {
        let corpus = corpus.ok_or_else(|| CliError::Config("these metrics need a corpus (data.corpus or --corpus)".into()))?;
        traces(&model, corpus, sequences)?
    } else {
        Vec::new()
    };
    let per_trace = |f: &dyn Fn(&ActivationTrace) -> xflab_core::Result<MetricTable>| -> CliResult<MetricTable> {
        let tables = traces.iter().map(f).collect::<xflab_core::Result<Vec<_>>>()?;
        Ok(mean_tables(&tables))
    };
    for metric in metrics {
        let table = match metric.as_str() {
            "entropy" => per_trace(&attention_entropy)?,
            "sink" => per_trace(&first_token_attention)?,
            "similarity" => per_trace(&token_similarity)?,
            "pca" => per_trace(&|t| pca_core_features(t, variance_target))?,
            "gates" => {
                if !model.config().gating {
                    let why = format!("variant `{}` has no attention gates", model.config().variant);
                    eprintln!("skipping `gates`: {why}");
                    outcome.skipped.push((metric.clone(), why));
                    continue;
                }
                per_trace(&gate_profile)?
            }
            "layer_similarity" => {
                let l = model.config().n_layers;
                let mut sum = vec![vec![0.0; l]; l];
                for t in &traces {
                    for (acc, row) in sum.iter_mut().zip(layer_similarity_matrix(t)?) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v / traces.len() as f64;
                        }
                    }
                }
                let path = out_dir.join("layer_similarity.csv");
                let mut w = csv::Writer::from_path(&path)?;
                let mut header = vec!["layer".to_string()];
                header.extend((1..=l).map(|i| i.to_string()));
                w.write_record(&header)?;
                for (i, row) in sum.iter().enumerate() {
                    let mut rec = vec![(i + 1).to_string()];
                    rec.extend(row.iter().map(|v| v.to_string()));
                    w.write_record(&rec)?;
                }
                w.flush()?;
                outcome.written.push(path);
                continue;
            }
            "lambda_ratio" => {
                if !model.config().has_anchor() {
                    let why = format!("variant `{}` has no mixing coefficients", model.config().variant);
                    eprintln!("skipping `lambda_ratio`: {why}");
                    outcome.skipped.push((metric.clone(), why));
                    continue;
                }
                let map = lambda_ratio_map(&container)?;
                let path = out_dir.join("lambda_ratio.csv");
                map.write_csv(File::create(&path)?)?;
                println!("lambda_ratio: near-zero anchor fraction {:.4}", map.near_zero_fraction);
                outcome.written.push(path);
                continue;
            }
            other => return Err(CliError::Config(format!("unknown metric `{other}`"))),
        };
        outcome.written.push(write_table(out_dir, metric, &table)?);
    }
    Ok(outcome)
}

/// Before/after tables plus a side-by-side `ablation.csv`.
pub fn ablate(
    checkpoint: &Path,
    corpus: &Corpus,
    sequences: usize,
    variance_target: f64,
    out_dir: &Path,
) -> CliResult<Vec<PathBuf>> {
    let (model, _) = load_model(checkpoint)?;
    if !model.config().has_anchor() {
        return Err(CliError::Other(format!(
            "refusing to ablate: variant `{}` has no anchor pathway",
            model.config().variant
        )));
    }
    fs::create_dir_all(out_dir)?;
    let seqs: Vec<Vec<usize>> = corpus
        .eval_windows(sequences, model.config().seq_len)
        .into_iter()
        .map(|(x, _)| x)
        .collect();
    if seqs.is_empty() {
        return Err(CliError::Other("corpus has no window to analyze".into()));
    }
    let report = anchor_ablation_report(&model, &seqs, variance_target)?;
    let before = write_table(out_dir, "ablation_before", &report.before)?;
    let after = write_table(out_dir, "ablation_after", &report.after)?;
    let path = out_dir.join("ablation.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["layer", "pca_before", "pca_after", "similarity_before", "similarity_after"])?;
    for (b, a) in report.before.rows.iter().zip(&report.after.rows) {
        w.write_record([
            b.layer.to_string(),
            b.values[0].to_string(),
            a.values[0].to_string(),
            b.values[1].to_string(),
            a.values[1].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(vec![before, after, path])
}

/// One published quantity and what this implementation computes for it.
#[derive(Clone, Debug, PartialEq)]
pub struct TableCheck {
    pub name: String,
    pub expected: f64,
    pub computed: f64,
    /// Absolute tolerance.
    pub tolerance: f64,
}

impl TableCheck {
    pub fn passed(&self) -> bool {
        (self.computed - self.expected).abs() <= self.tolerance
    }
}

pub const TABLE_VOCAB: usize = 57_601;

pub fn table_config(variant: Variant, n_layers: usize, d_model: usize, dynamic: bool) -> ModelConfig {
    ModelConfig::preset(variant, n_layers, d_model, 16, TABLE_VOCAB, 2048).with_mix(|m| m.dynamic = dynamic)
}

/// Parameter counts (within 0.5%), overhead ratios (within 0.05 percentage
/// points) and schedule integers (exact).
pub fn table_checks() -> Vec<TableCheck> {
    let params = |name: &str, cfg: ModelConfig, expected: f64| TableCheck {
        name: name.into(),
        expected,
        computed: enumerate_params(&cfg, true) as f64,
        tolerance: 0.005 * expected,
    };
    let percent = |name: &str, value: f64, expected: f64| TableCheck {
        name: name.into(),
        expected,
        computed: 100.0 * value,
        tolerance: 0.05,
    };
    let exact = |name: &str, value: u64, expected: u64| TableCheck {
        name: name.into(),
        expected: expected as f64,
        computed: value as f64,
        tolerance: 0.0,
    };
    let dm = DM_HIDDEN as u64;
    let (steps10, warm10) = schedule_calc(10_000_000_000, 262_144, 0.2);
    let (steps20, _) = schedule_calc(20_000_000_000, 262_144, 0.2);
    vec![
        params("params ungated L=32 d=1024", table_config(Variant::Base, 32, 1024, false), 454e6),
        params("params gated L=29 d=1024", table_config(Variant::Gated, 29, 1024, false), 453e6),
        params("params exoformer L=29 d=1024", table_config(Variant::Exoformer, 29, 1024, false), 457e6),
        params("params gated L=32 d=1536", table_config(Variant::Gated, 32, 1536, false), 1.01e9),
        params(
            "params dynamic exoformer L=32 d=1536",
            table_config(Variant::Exoformer, 32, 1536, true),
            1.02e9,
        ),
        percent("R_P static (%) L=32 d=1024", r_p_static(32, 1024), 1.2),
        percent("R_P dynamic (%) L=32 d=1024", r_p_dynamic(32, 1024, dm), 1.3),
        percent("R_FLOPs (%) L=32 d=1024", r_flops(32, 1024, dm), 1.33),
        exact("total steps 10B / 262144", steps10, 38_147),
        exact("warmdown steps 20% of 38147", warm10, 7_630),
        exact("total steps 20B / 262144", steps20, 76_293),
    ]
}

pub fn render_checks(checks: &[TableCheck]) -> String {
    let w = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    checks
        .iter()
        .map(|c| {
            format!(
                "{:<w$}  expected {:>14}  computed {:>14}  {}\n",
                c.name,
                fmt_num(c.expected),
                fmt_num(c.computed),
                if c.passed() { "ok" } else { "MISMATCH" }
            )
        })
        .collect()
}

fn fmt_num(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.4}")
    }
}

/// Prints and stores the report for `config` (when given); with
/// `check_tables` also verifies the published numbers.
pub fn complexity(config: Option<&ModelConfig>, check_tables: bool, out_dir: &Path) -> CliResult<String> {
    let mut text = String::new();
    if let Some(cfg) = config {
        fs::create_dir_all(out_dir)?;
        let report = ComplexityReport::for_config(cfg);
        text.push_str(&report.render());
        fs::write(out_dir.join("complexity.txt"), report.render())?;
        fs::write(out_dir.join("complexity.json"), serde_json::to_string_pretty(&report)?)?;
    }
    if check_tables {
        let checks = table_checks();
        let rendered = render_checks(&checks);
        if !text.is_empty() {
            text.push('\n');
        }
        text.push_str(&rendered);
        let failed: Vec<&TableCheck> = checks.iter().filter(|c| !c.passed()).collect();
        if !failed.is_empty() {
            print!("{text}");
            let list = failed
                .iter()
                .map(|c| format!("{}: expected {}, computed {}", c.name, fmt_num(c.expected), fmt_num(c.computed)))
                .collect::<Vec<_>>()
                .join("; ");
            return Err(CliError::Assertion(format!("{} table check(s) failed: {list}", failed.len())));
        }
    }
    if config.is_none() && !check_tables {
        return Err(CliError::Config("complexity needs --config or --check-tables".into()));
    }
    print!("{text}");
    Ok(text)
}
