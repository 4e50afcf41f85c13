use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use opencil::checkpoint::write_checkpoint;
use opencil::config::RunConfigFile;
use opencil::engine::{
    run_sequence_with, softmax_threshold_baseline, summarize_seeds, Ablation, EngineConfig, RunReport, SeedSummary,
    TaskLayout,
};
use opencil::eval::MetricsReport;
use opencil::graph::Graph;

use crate::{Classify, CliResult};

/// Root for relative or missing `output_dir` settings.
pub const OUTPUT_ROOT_ENV: &str = "OPENCIL_OUTPUT_ROOT";

pub const REPORT_FILE: &str = "report.json";

struct Loaded {
    cfg: RunConfigFile,
    graph: Graph,
    out: PathBuf,
}

/// `--output` wins; otherwise `output_dir` from the config, resolved under
/// the output root when relative; otherwise `<root>/<config stem>`. Without
/// the environment variable the root is the config file's directory.
fn resolve_output(config_path: &Path, cfg: &RunConfigFile, flag: Option<PathBuf>) -> PathBuf {
    if let Some(p) = flag {
        return p;
    }
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| config_dir(config_path).to_path_buf());
    match &cfg.output_dir {
        Some(d) if d.is_absolute() => d.clone(),
        Some(d) => root.join(d),
        None => {
            let stem = config_path.file_stem().map(|s| s.to_os_string()).unwrap_or_else(|| "run".into());
            root.join("runs").join(stem)
        }
    }
}

fn config_dir(path: &Path) -> &Path {
    path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn load(config_path: &Path, output: Option<PathBuf>) -> CliResult<Loaded> {
    let cfg = RunConfigFile::load(config_path)
        .with_context(|| format!("config {}", config_path.display()))
        .validation()?;
    let graph = cfg
        .load_graph(config_dir(config_path))
        .context("loading dataset")
        .validation()?;
    let out = resolve_output(config_path, &cfg, output);
    Ok(Loaded { cfg, graph, out })
}

fn write(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents)
        .with_context(|| format!("writing {}", path.display()))
        .runtime()
}

fn write_run(dir: &Path, report: &RunReport, checkpoints: &[(usize, String)]) -> CliResult<()> {
    fs::create_dir_all(dir)
        .with_context(|| format!("creating {}", dir.display()))
        .runtime()?;
    write(&dir.join(REPORT_FILE), &report.to_json())?;
    write(&dir.join("manifest.json"), &report.manifest.to_json())?;
    write(&dir.join("training_log.csv"), &report.training_log_csv())?;
    for m in &report.tasks {
        write(&dir.join(format!("curve-task-{}.tsv", m.task_index)), &m.curve_text())?;
    }
    for (t, text) in checkpoints {
        write(&dir.join(format!("checkpoint-task-{t}.txt")), text)?;
    }
    Ok(())
}

fn task_line(method: &str, seed: u64, m: &MetricsReport) -> String {
    format!(
        "{method} seed {seed} task {}: OSCR {:.4}  ACC {:.4}  AUC {:.4}  (known {}, unknown {})",
        m.task_index, m.oscr, m.closed_acc, m.auc, m.num_known, m.num_unknown
    )
}

fn run_full(graph: &Graph, layout: &TaskLayout, config: &EngineConfig, dir: &Path) -> CliResult<RunReport> {
    let method = match config.ablation {
        None => "ogcil".to_string(),
        Some(a) => format!("ogcil/{a}"),
    };
    let mut checkpoints = Vec::new();
    let report = run_sequence_with(graph, layout, config, |m, state| {
        println!("{}", task_line(&method, config.seed, m));
        checkpoints.push((m.task_index, write_checkpoint(state)));
    })
    .with_context(|| format!("{method} seed {}", config.seed))
    .runtime()?;
    write_run(dir, &report, &checkpoints)?;
    Ok(report)
}

fn run_baseline(graph: &Graph, layout: &TaskLayout, config: &EngineConfig, dir: &Path) -> CliResult<RunReport> {
    let report = softmax_threshold_baseline(graph, layout, config)
        .with_context(|| format!("baseline seed {}", config.seed))
        .runtime()?;
    for m in &report.tasks {
        println!("{}", task_line(&report.method, config.seed, m));
    }
    write_run(dir, &report, &[])?;
    Ok(report)
}

fn seed_dir(base: &Path, seed: u64) -> PathBuf {
    base.join(format!("seed-{seed}"))
}

pub fn summary_text(method: &str, s: &SeedSummary) -> String {
    format!(
        "{method} over {} seed(s): OSCR {:.4} ± {:.4}  ACC {:.4} ± {:.4}  AUC {:.4} ± {:.4}",
        s.seeds.len(),
        s.oscr.mean,
        s.oscr.std,
        s.closed_acc.mean,
        s.closed_acc.std,
        s.auc.mean,
        s.auc.std
    )
}

fn summarize(method: &str, reports: &[RunReport], dir: &Path) -> CliResult<()> {
    let s = summarize_seeds(reports).runtime()?;
    let line = summary_text(method, &s);
    println!("{line}");
    write(&dir.join("summary.txt"), &format!("{line}\n"))
}

pub fn cmd_run(config_path: &Path, output: Option<PathBuf>, baseline: bool) -> CliResult<()> {
    let Loaded { cfg, graph, out } = load(config_path, output)?;
    let layout = cfg.layout();
    let mut reports = Vec::new();
    for &seed in &cfg.seeds {
        reports.push(run_full(&graph, &layout, &cfg.engine_config(seed), &seed_dir(&out, seed))?);
    }
    summarize("ogcil", &reports, &out)?;
    if baseline {
        let base = out.join("baseline");
        let mut reports = Vec::new();
        for &seed in &cfg.seeds {
            reports.push(run_baseline(&graph, &layout, &cfg.engine_config(seed), &seed_dir(&base, seed))?);
        }
        summarize("softmax-threshold", &reports, &base)?;
    }
    Ok(())
}

/// A previous full run at this seed is reused when its recorded config
/// matches exactly.
fn existing_full(dir: &Path, config: &EngineConfig) -> Option<RunReport> {
    let text = fs::read_to_string(dir.join(REPORT_FILE)).ok()?;
    let r = RunReport::from_json(&text).ok()?;
    (r.config == *config).then_some(r)
}

pub fn comparison_table(ablation: Ablation, full: &[RunReport], ablated: &[RunReport]) -> String {
    let mut out = format!(
        "seed\tfull_oscr\t{a}_oscr\tdelta_oscr\tfull_acc\t{a}_acc\tfull_auc\t{a}_auc\n",
        a = ablation.name()
    );
    let row = |out: &mut String, label: &str, f: [f64; 3], a: [f64; 3]| {
        let _ = writeln!(
            out,
            "{label}\t{:.4}\t{:.4}\t{:+.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}",
            f[0],
            a[0],
            a[0] - f[0],
            f[1],
            a[1],
            f[2],
            a[2]
        );
    };
    let triple = |r: &RunReport| {
        let u = &r.averages.uniform;
        [u.oscr, u.closed_acc, u.auc]
    };
    let mut sums = ([0.0; 3], [0.0; 3]);
    for (f, a) in full.iter().zip(ablated) {
        let (tf, ta) = (triple(f), triple(a));
        row(&mut out, &f.config.seed.to_string(), tf, ta);
        for i in 0..3 {
            sums.0[i] += tf[i];
            sums.1[i] += ta[i];
        }
    }
    let n = full.len().max(1) as f64;
    row(&mut out, "mean", sums.0.map(|v| v / n), sums.1.map(|v| v / n));
    out
}

pub fn cmd_ablate(config_path: &Path, ablation: Ablation, output: Option<PathBuf>) -> CliResult<()> {
    let Loaded { cfg, graph, out } = load(config_path, output)?;
    let layout = cfg.layout();
    let ablation_dir = out.join(format!("ablate-{}", ablation.name()));
    let (mut full, mut ablated) = (Vec::new(), Vec::new());
    for &seed in &cfg.seeds {
        let config = cfg.engine_config(seed);
        let dir = seed_dir(&out, seed);
        let report = match existing_full(&dir, &config) {
            Some(r) => {
                println!("ogcil seed {seed}: reusing {}", dir.display());
                r
            }
            None => run_full(&graph, &layout, &config, &dir)?,
        };
        full.push(report);
        let config = config.with_ablation(Some(ablation));
        ablated.push(run_full(&graph, &layout, &config, &seed_dir(&ablation_dir, seed))?);
    }
    summarize(&format!("ogcil/{ablation}"), &ablated, &ablation_dir)?;
    let table = comparison_table(ablation, &full, &ablated);
    print!("{table}");
    write(&ablation_dir.join("comparison.tsv"), &table)
}
