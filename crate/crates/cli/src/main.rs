//! `synthgauge` command-line driver.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use synthgauge::classifier::{run_scenarios, ClassGenerators, TrainParams};
use synthgauge::dataio::{
    read_config, read_embeddings, read_json, write_embeddings, write_json, EmbeddingSet, PipelineConfig,
};
use synthgauge::error::{Error, ErrorKind, Result};
use synthgauge::fedsim::{run_federation, FedConfig};
use synthgauge::metrics::{evaluate_all, FeatureExtractor};
use synthgauge::pipeline::{
    fit_generator, project_options, project_with_class_generators, run_pipeline, stage_gen, take_evenly, tsne_artifacts,
    write_scenarios,
};
use synthgauge::projector::batch_project;
use synthgauge::rng::derive_seed;
use synthgauge::sefa::{edit_sweep, factorize};
use synthgauge::toygen::{sample_latents, ToyGenerator};
use synthgauge::viz::{csv_string, fmt_f64, sweep_svg, write_text, TsneConfig};

#[derive(Debug, Parser)]
#[command(name = "synthgauge", version, about = "Synthetic data generation and validation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Real embeddings (EMB1).
    #[arg(long, global = true)]
    real: Option<PathBuf>,
    /// Generated embeddings (EMB1).
    #[arg(long, global = true)]
    gen: Option<PathBuf>,
    /// Validation embeddings for `classify` (EMB1).
    #[arg(long, global = true)]
    val: Option<PathBuf>,
    /// Per-class generators as written by `gen`.
    #[arg(long, global = true)]
    generator: Option<PathBuf>,
    /// Worker threads; 0 picks automatically.
    #[arg(long, global = true, env = "SYNTHGAUGE_THREADS")]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Sample real data, fit per-class generators, write a synthetic set.
    Gen,
    /// Fidelity, diversity and authenticity metrics for --real vs --gen.
    Metrics,
    /// Project the first `project_targets` rows of --real into latent space.
    Project,
    /// Latent directions of a generator and an edit sweep.
    Sefa,
    /// Federated training simulation with isolated baselines.
    Fedsim,
    /// Baseline / synthetic / augmented classifier table.
    Classify,
    /// t-SNE layout of --real (and --gen).
    Tsne,
    /// gen, metrics, classify, project and tsne in one run.
    Pipeline,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Gen => "gen",
            Command::Metrics => "metrics",
            Command::Project => "project",
            Command::Sefa => "sefa",
            Command::Fedsim => "fedsim",
            Command::Classify => "classify",
            Command::Tsne => "tsne",
            Command::Pipeline => "pipeline",
        }
    }
}

#[derive(Debug, Serialize)]
struct RunManifest {
    subcommand: String,
    version: String,
    seed: u64,
    config: PipelineConfig,
    inputs: Vec<String>,
    outputs: Vec<String>,
    duration_secs: f64,
    error: Option<String>,
}

/// Inputs read and artifacts written so far, plus per-stage summaries.
struct Run<'a> {
    cli: &'a Cli,
    cfg: PipelineConfig,
    inputs: Vec<String>,
    outputs: Vec<String>,
    summary: Vec<String>,
}

impl Run<'_> {
    fn out(&mut self, name: &str) -> PathBuf {
        self.outputs.push(name.to_string());
        self.cli.out.join(name)
    }

    fn input(&mut self, path: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
        let p = path
            .clone()
            .ok_or_else(|| Error::validation(format!("{} requires --{flag}", self.cli.command.name())))?;
        self.inputs.push(p.display().to_string());
        Ok(p)
    }

    fn embeddings(&mut self, path: &Option<PathBuf>, flag: &str) -> Result<EmbeddingSet> {
        read_embeddings(self.input(path, flag)?)
    }

    fn generators(&mut self) -> Result<Option<ClassGenerators>> {
        if self.cli.generator.is_none() {
            return Ok(None);
        }
        let p = self.input(&self.cli.generator.clone(), "generator")?;
        read_json(p).map(Some)
    }

    /// Class-0 generator from --generator, or a freshly seeded one.
    fn single_generator(&mut self, sample_dim: usize) -> Result<ToyGenerator> {
        match self.generators()? {
            Some(g) => Ok(g.generators[0].clone()),
            None => ToyGenerator::with_dims(self.cfg.latent_dim, sample_dim, false, self.cfg.seed),
        }
    }
}

fn cmd_gen(r: &mut Run) -> Result<()> {
    let g = stage_gen(&r.cfg)?;
    write_embeddings(&g.real_train, r.out("real_train.emb"))?;
    write_embeddings(&g.real_val, r.out("real_val.emb"))?;
    write_embeddings(&g.synthetic, r.out("synthetic.emb"))?;
    write_json(&g.generators, r.out("generators.json"))?;
    r.summary.push(format!(
        "gen: {} train, {} val, {} synthetic samples",
        g.real_train.len(),
        g.real_val.len(),
        g.synthetic.len()
    ));
    Ok(())
}

fn cmd_metrics(r: &mut Run) -> Result<()> {
    let real = r.embeddings(&r.cli.real.clone(), "real")?;
    let gen = r.embeddings(&r.cli.gen.clone(), "gen")?;
    let g = r.single_generator(real.dim())?;
    let report = evaluate_all("metrics", &real, &gen, &g, &FeatureExtractor::identity(real.dim()), &r.cfg)?;
    write_json(&report, r.out("metrics.json"))?;
    r.summary.push(format!(
        "metrics: fid {:.6} kid {:.6} precision {:.3} recall {:.3} ppl {:.4} authenticity {:.3}",
        report.fid, report.kid_mean, report.precision, report.recall, report.ppl, report.authenticity
    ));
    Ok(())
}

fn cmd_project(r: &mut Run) -> Result<()> {
    let real = r.embeddings(&r.cli.real.clone(), "real")?;
    let n = r.cfg.project_targets.min(real.len());
    let targets = real.select(&(0..n).collect::<Vec<_>>())?;
    let extractor = FeatureExtractor::identity(real.dim());
    let opt = project_options(&r.cfg);
    let batch = match r.generators()? {
        Some(gens) => project_with_class_generators(&targets, &gens, &extractor, &opt, None)?,
        None => {
            let g = ToyGenerator::with_dims(r.cfg.latent_dim, real.dim(), false, r.cfg.seed)?;
            batch_project(&targets, &g, &extractor, &opt)?
        }
    };
    write_json(&batch, r.out("projection.json"))?;
    r.summary.push(format!(
        "project: {} of {} targets, mean cosine {:.6}, median {:.6}",
        batch.stats.count,
        targets.len(),
        batch.stats.mean,
        batch.stats.median
    ));
    Ok(())
}

fn cmd_sefa(r: &mut Run) -> Result<()> {
    let g = r.single_generator(r.cfg.sample_dim)?;
    let basis = factorize(&g)?;
    write_json(&basis, r.out("sefa_basis.json"))?;
    let z = sample_latents(1, g.latent_dim(), derive_seed(r.cfg.seed, &[0x5efa]))?;
    let w = g.mapping(&z[0], None)?;
    let cells = edit_sweep(&w, &basis, &g, &r.cfg.sefa_indices, &r.cfg.sefa_alphas)?;
    let mut header = vec!["index".to_string(), "alpha".to_string()];
    header.extend((0..g.sample_dim()).map(|j| format!("x{j}")));
    let rows: Vec<Vec<String>> = cells
        .iter()
        .map(|c| {
            let mut row = vec![c.index.to_string(), fmt_f64(c.alpha)];
            row.extend(c.sample.iter().map(|v| fmt_f64(*v)));
            row
        })
        .collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_text(&csv_string(&header, &rows)?, r.out("sefa_sweep.csv"))?;
    write_text(&sweep_svg(&cells)?, r.out("sefa_sweep.svg"))?;
    r.summary.push(format!(
        "sefa: {} directions, top significance {:.4}, {} sweep cells",
        basis.len(),
        basis.significances[0],
        cells.len()
    ));
    Ok(())
}

fn cmd_fedsim(r: &mut Run) -> Result<()> {
    let run = run_federation(&FedConfig::from_pipeline(&r.cfg))?;
    write_json(&run, r.out("federation.json"))?;
    let mut rows = Vec::new();
    for c in &run.clients {
        for (round, local) in c.local_eval_loss.iter().enumerate() {
            rows.push(vec![
                c.id.to_string(),
                c.sample_count.to_string(),
                (round + 1).to_string(),
                fmt_f64(*local),
                fmt_f64(run.eval_loss[round]),
            ]);
        }
    }
    write_text(
        &csv_string(&["client", "samples", "round", "local_eval_loss", "aggregated_eval_loss"], &rows)?,
        r.out("client_losses.csv"),
    )?;
    let ratios: Vec<String> = run
        .speedups
        .iter()
        .map(|s| match s.ratio {
            Some(v) => format!("client {} {v:.2}x", s.client),
            None => format!("client {} not reached", s.client),
        })
        .collect();
    r.summary.push(format!(
        "fedsim: {} rounds, final loss {:.5}; speedup {}",
        run.eval_loss.len(),
        run.eval_loss.last().copied().unwrap_or(f64::NAN),
        ratios.join(", ")
    ));
    Ok(())
}

fn cmd_classify(r: &mut Run) -> Result<()> {
    let (train, val, gens) = if r.cli.real.is_some() {
        let train = r.embeddings(&r.cli.real.clone(), "real")?;
        let val = r.embeddings(&r.cli.val.clone(), "val")?;
        let gens = match r.generators()? {
            Some(g) => g,
            None => {
                let mut fitted = Vec::new();
                for class in 0..2u8 {
                    let idx: Vec<usize> = (0..train.len()).filter(|&i| train.labels()[i] == class).collect();
                    let rows = train.select(&idx)?.rows_f64();
                    fitted.push(fit_generator(&rows, &r.cfg, derive_seed(r.cfg.seed, &[0x6e0, class as u64]))?.0);
                }
                let g1 = fitted.pop().expect("two classes");
                let g0 = fitted.pop().expect("two classes");
                ClassGenerators { generators: [g0, g1] }
            }
        };
        (train, val, gens)
    } else {
        let g = stage_gen(&r.cfg)?;
        (g.real_train, g.real_val, g.generators)
    };
    let table = run_scenarios(&train, &val, &gens, &TrainParams::from_pipeline(&r.cfg), r.cfg.synth_scale)?;
    let (json, csv) = (r.out("scenarios.json"), r.out("scenarios.csv"));
    write_scenarios(&table, &json, &csv)?;
    r.summary.push(format!(
        "classify: {}",
        table
            .rows
            .iter()
            .map(|row| format!("{} acc {:.3} auc {:.3}", row.name, row.metrics.acc, row.metrics.auc))
            .collect::<Vec<_>>()
            .join(", ")
    ));
    Ok(())
}

fn cmd_tsne(r: &mut Run) -> Result<()> {
    let real = r.embeddings(&r.cli.real.clone(), "real")?;
    let mut sets = vec![take_evenly(&real, r.cfg.tsne_points)?];
    if r.cli.gen.is_some() {
        let gen = r.embeddings(&r.cli.gen.clone(), "gen")?;
        let half = r.cfg.tsne_points / 2;
        sets[0] = take_evenly(&real, r.cfg.tsne_points - half.min(gen.len()))?;
        sets.push(take_evenly(&gen, half)?);
    }
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut sources = Vec::new();
    for s in &sets {
        points.extend(s.rows_f64());
        labels.extend_from_slice(s.labels());
        sources.extend(std::iter::repeat_n(s.source(), s.len()));
    }
    let (csv, svg, kl) = tsne_artifacts(&points, &labels, &sources, &TsneConfig::from_pipeline(&r.cfg))?;
    write_text(&csv, r.out("tsne.csv"))?;
    write_text(&svg, r.out("tsne.svg"))?;
    r.summary.push(format!("tsne: {} points, final KL {kl:.4}", points.len()));
    Ok(())
}

fn cmd_pipeline(r: &mut Run) -> Result<()> {
    let s = run_pipeline(&r.cfg, &r.cli.out)?;
    r.outputs.extend(s.artifacts);
    r.summary.extend(s.log);
    Ok(())
}

fn load_config(cli: &Cli) -> Result<(PipelineConfig, Vec<String>)> {
    let (mut cfg, inputs) = match &cli.config {
        Some(p) => (read_config(p)?, vec![p.display().to_string()]),
        None => (PipelineConfig::default(), Vec::new()),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok((cfg, inputs))
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Validation => 2,
        ErrorKind::Numerical => 3,
        ErrorKind::Other => 1,
    }
}

fn execute(cli: &Cli) -> Result<Vec<String>> {
    let (cfg, inputs) = load_config(cli)?;
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    let start = Instant::now();
    let mut run = Run {
        cli,
        cfg,
        inputs,
        outputs: Vec::new(),
        summary: Vec::new(),
    };
    let result = match cli.command {
        Command::Gen => cmd_gen(&mut run),
        Command::Metrics => cmd_metrics(&mut run),
        Command::Project => cmd_project(&mut run),
        Command::Sefa => cmd_sefa(&mut run),
        Command::Fedsim => cmd_fedsim(&mut run),
        Command::Classify => cmd_classify(&mut run),
        Command::Tsne => cmd_tsne(&mut run),
        Command::Pipeline => cmd_pipeline(&mut run),
    };
    let manifest = RunManifest {
        subcommand: cli.command.name().to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: run.cfg.seed,
        config: run.cfg.clone(),
        inputs: run.inputs.clone(),
        outputs: run.outputs.clone(),
        duration_secs: start.elapsed().as_secs_f64(),
        error: result.as_ref().err().map(ToString::to_string),
    };
    let written = write_json(&manifest, cli.out.join("manifest.json"));
    result?;
    written?;
    Ok(run.summary)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = cli.threads.filter(|&n| n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("synthgauge: cannot configure {n} threads: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(&cli) {
        Ok(lines) => {
            for l in lines {
                println!("{l}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("synthgauge {}: {e}", cli.command.name());
            ExitCode::from(exit_code(&e))
        }
    }
}
