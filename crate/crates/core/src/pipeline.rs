//! End-to-end runs: generate, validate, explain.
//!
//! `run_pipeline` chains data generation and generator fitting, fidelity
//! metrics, the classifier scenario table, projection with edge-case
//! neighbor augmentation, and a t-SNE view, writing every artifact into
//! one directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{
    evaluate, predict_proba, run_scenarios, train, ClassGenerators, ClassifierModel, ClsMetrics,
    ScenarioTable, TrainParams,
};
use crate::dataio::{write_embeddings, write_json, EmbeddingSet, MetricReport, PipelineConfig, Source};
use crate::error::{Error, Result, ResultExt};
use crate::fedsim::{local_train, ClientState, MomentMatching};
use crate::metrics::{evaluate_all, DistanceStats, FeatureExtractor};
use crate::numerics::mean_cov;
use crate::projector::{batch_project, generate_neighbors, BatchProjection, ProjectOptions, ProjectionOutcome};
use crate::rng::derive_seed;
use crate::toygen::{sample_dataset, DataDistribution, ToyGenerator};
use crate::viz::{csv_string, fmt_f64, scatter_svg, tsne, write_text, TsneConfig};

const TRAIN_KEY: u64 = 0x7a1;
const VAL_KEY: u64 = 0x7a2;
const GEN_KEY: u64 = 0x6e0;
const SYNTH_KEY: u64 = 0x5e7;

/// Generated real data and fitted per-class generators.
#[derive(Debug, Clone)]
pub struct GenStage {
    pub real_train: EmbeddingSet,
    pub real_val: EmbeddingSet,
    pub generators: ClassGenerators,
    /// Moment-matching training loss per fitting step, per class.
    pub fit_losses: [Vec<f64>; 2],
    /// Synthetic set with the class counts of `real_train`.
    pub synthetic: EmbeddingSet,
}

/// Fit an unconditional generator to the moments of `rows` by gradient
/// descent on the moment-matching loss, with a fresh latent batch every
/// `fed_exchange_every` steps.
pub fn fit_generator(rows: &[Vec<f64>], cfg: &PipelineConfig, seed: u64) -> Result<(ToyGenerator, Vec<f64>)> {
    let template = ToyGenerator::with_dims(cfg.latent_dim, cfg.sample_dim, false, seed)?;
    let (target_mean, cov) = mean_cov(rows)?;
    let objective = MomentMatching {
        template: template.clone(),
        target_mean,
        target_cov: cov.to_matrix(),
        lambda: cfg.fed_lambda,
        batch_size: cfg.fed_batch,
        seed,
        client_id: 0,
    };
    let mut client = ClientState::new(0, rows.len(), template.params(), objective);
    let chunk = cfg.fed_exchange_every.max(1);
    while client.steps < cfg.gen_fit_steps {
        let steps = chunk.min(cfg.gen_fit_steps - client.steps);
        client = local_train(client, steps, cfg.fed_lr)?;
    }
    Ok((template.with_params(&client.params)?, client.loss_history))
}

/// Synthetic samples with the same class counts as `like`, tagged synthetic.
pub fn synthesize_like(gens: &ClassGenerators, like: &EmbeddingSet, seed: u64) -> Result<EmbeddingSet> {
    use crate::classifier::SyntheticSource;
    let mut rows = Vec::with_capacity(like.len());
    let mut labels = Vec::with_capacity(like.len());
    for class in 0..2u8 {
        let n = like.class_count(class);
        rows.extend(gens.generate(class, n, seed)?);
        labels.extend(std::iter::repeat_n(class, n));
    }
    EmbeddingSet::from_rows(&rows, labels, Source::Synthetic)
}

pub fn stage_gen(cfg: &PipelineConfig) -> Result<GenStage> {
    cfg.validate()?;
    let dist = DataDistribution::standard(cfg.sample_dim, cfg.class_ratio, cfg.seed)?;
    let real_train = sample_dataset(&dist, cfg.n_train, derive_seed(cfg.seed, &[TRAIN_KEY]))?;
    let real_val = sample_dataset(&dist, cfg.n_val, derive_seed(cfg.seed, &[VAL_KEY]))?;
    let mut fitted = Vec::with_capacity(2);
    for class in 0..2u8 {
        let idx: Vec<usize> = (0..real_train.len()).filter(|&i| real_train.labels()[i] == class).collect();
        if idx.len() < 2 {
            return Err(Error::validation(format!(
                "class {class} has {} training samples; at least 2 are needed to fit a generator",
                idx.len()
            )));
        }
        let rows = real_train.select(&idx)?.rows_f64();
        fitted.push(
            fit_generator(&rows, cfg, derive_seed(cfg.seed, &[GEN_KEY, class as u64]))
                .context(format!("fitting class {class} generator"))?,
        );
    }
    let (g1, l1) = fitted.pop().expect("two classes");
    let (g0, l0) = fitted.pop().expect("two classes");
    let generators = ClassGenerators { generators: [g0, g1] };
    let synthetic = synthesize_like(&generators, &real_train, derive_seed(cfg.seed, &[SYNTH_KEY]))?;
    Ok(GenStage {
        real_train,
        real_val,
        generators,
        fit_losses: [l0, l1],
        synthetic,
    })
}

/// Fixed random tanh features standing in for a pretrained image network.
pub fn metric_extractor(cfg: &PipelineConfig) -> FeatureExtractor {
    FeatureExtractor::seeded(cfg.sample_dim, cfg.sample_dim, derive_seed(cfg.seed, &[0xfe]))
}

/// Project each target with the generator of its own class; outcomes keep
/// input order and the summary covers all successful projections.
pub fn project_with_class_generators(
    targets: &EmbeddingSet,
    gens: &ClassGenerators,
    extractor: &FeatureExtractor,
    opt: &ProjectOptions,
    close_threshold: Option<f64>,
) -> Result<BatchProjection> {
    let mut outcomes: Vec<Option<ProjectionOutcome>> = vec![None; targets.len()];
    for class in 0..2u8 {
        let idx: Vec<usize> = (0..targets.len()).filter(|&i| targets.labels()[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        let part = targets.select(&idx)?;
        let opt_c = ProjectOptions {
            seed: derive_seed(opt.seed, &[class as u64]),
            ..opt.clone()
        };
        let batch = batch_project(&part, &gens.generators[class as usize], extractor, &opt_c)
            .context(format!("projecting class {class}"))?;
        for (i, o) in idx.into_iter().zip(batch.outcomes) {
            outcomes[i] = Some(o);
        }
    }
    let outcomes: Vec<ProjectionOutcome> = outcomes.into_iter().map(|o| o.expect("every target projected")).collect();
    let (ids, finals): (Vec<u32>, Vec<f64>) = outcomes
        .iter()
        .filter_map(|o| o.result.as_ref().map(|r| (r.target_id, r.final_cosine)))
        .unzip();
    let stats = DistanceStats::from_distances(&ids, &finals, close_threshold)?;
    Ok(BatchProjection { outcomes, stats })
}

/// Projection settings taken from the configuration.
pub fn project_options(cfg: &PipelineConfig) -> ProjectOptions {
    ProjectOptions {
        max_steps: cfg.project_max_steps,
        lr: cfg.project_lr,
        tol: 1e-12,
        seed: derive_seed(cfg.seed, &[0x9a]),
        restarts: cfg.project_restarts,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeCaseReport {
    /// Ids of the targets treated as edge cases.
    pub edge_ids: Vec<u32>,
    pub neighbors_added: usize,
    pub radius: f64,
    pub before: ClsMetrics,
    pub after: ClsMetrics,
}

/// Targets ordered by how ambiguous the classifier finds them:
/// misclassified first, then by `|p − 0.5|`, ties by index.
pub fn edge_case_order(probs: &[f64], labels: &[u8]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    let wrong = |i: usize| (probs[i] >= 0.5) != (labels[i] == 1);
    idx.sort_by(|&a, &b| {
        wrong(b)
            .cmp(&wrong(a))
            .then((probs[a] - 0.5).abs().total_cmp(&(probs[b] - 0.5).abs()))
            .then(a.cmp(&b))
    });
    idx
}

/// Neighbors of the projected edge cases, labelled as their targets and
/// synthesized by the matching class generator.
pub fn edge_case_neighbors(
    projection: &BatchProjection,
    targets: &EmbeddingSet,
    edges: &[usize],
    gens: &ClassGenerators,
    cfg: &PipelineConfig,
) -> Result<EmbeddingSet> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for &i in edges {
        let Some(r) = projection.outcomes[i].result.as_ref() else {
            continue;
        };
        let class = targets.labels()[i];
        let g = &gens.generators[class as usize];
        for w in generate_neighbors(&r.w_star, cfg.neighbors, cfg.neighbor_radius, derive_seed(cfg.seed, &[0xed, i as u64]))? {
            rows.push(g.synthesize(&w)?);
            labels.push(class);
        }
    }
    if rows.is_empty() {
        return EmbeddingSet::empty(targets.dim(), Source::Synthetic);
    }
    EmbeddingSet::from_rows(&rows, labels, Source::Synthetic)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub report: MetricReport,
    pub scenarios: ScenarioTable,
    pub edge_cases: EdgeCaseReport,
    pub tsne_final_kl: f64,
    /// Artifact file names inside the output directory.
    pub artifacts: Vec<String>,
    /// One line per stage.
    pub log: Vec<String>,
}

struct Out<'a> {
    dir: &'a Path,
    names: Vec<String>,
}

impl Out<'_> {
    fn path(&mut self, name: &str) -> PathBuf {
        self.names.push(name.to_string());
        self.dir.join(name)
    }
}

fn scenario_csv(t: &ScenarioTable) -> Result<String> {
    let rows: Vec<Vec<String>> = t
        .rows
        .iter()
        .map(|r| {
            let m = &r.metrics;
            vec![
                r.name.clone(),
                r.train_benign.to_string(),
                r.train_malignant.to_string(),
                fmt_f64(m.acc),
                fmt_f64(m.auc),
                fmt_f64(m.f1),
                fmt_f64(m.sensitivity),
                fmt_f64(m.specificity),
            ]
        })
        .collect();
    csv_string(
        &["scenario", "train_benign", "train_malignant", "acc", "auc", "f1", "sensitivity", "specificity"],
        &rows,
    )
}

/// Write the scenario table as JSON and CSV.
pub fn write_scenarios(t: &ScenarioTable, json: &Path, csv: &Path) -> Result<()> {
    write_json(t, json)?;
    write_text(&scenario_csv(t)?, csv)
}

/// t-SNE of labelled points tagged by source; returns the CSV and SVG text
/// and the final KL value.
pub fn tsne_artifacts(
    points: &[Vec<f64>],
    labels: &[u8],
    sources: &[Source],
    cfg: &TsneConfig,
) -> Result<(String, String, f64)> {
    let r = tsne(points, cfg)?;
    let mut header = vec!["x", "y", "z"];
    header.truncate(cfg.output_dims);
    header.extend(["label", "source"]);
    let rows: Vec<Vec<String>> = r
        .layout
        .iter()
        .zip(labels)
        .zip(sources)
        .map(|((p, l), s)| {
            let mut row: Vec<String> = p.iter().map(|v| fmt_f64(*v)).collect();
            row.push(l.to_string());
            row.push(match s {
                Source::Real => "real".into(),
                Source::Synthetic => "synthetic".into(),
            });
            row
        })
        .collect();
    let csv = csv_string(&header, &rows)?;
    let svg = scatter_svg(&r.layout, labels, sources)?;
    Ok((csv, svg, *r.kl.last().unwrap_or(&f64::NAN)))
}

/// `n` rows at evenly spaced indices, in order.
pub fn take_evenly(set: &EmbeddingSet, n: usize) -> Result<EmbeddingSet> {
    let n = n.min(set.len());
    let idx: Vec<usize> = (0..n).map(|k| k * set.len() / n.max(1)).collect();
    set.select(&idx)
}

/// Full run. Every artifact is written under `out`.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<PipelineSummary> {
    cfg.validate()?;
    let view_real = (cfg.tsne_points / 2).min(cfg.n_val);
    let view_points = view_real + (cfg.tsne_points - view_real).min(cfg.n_train);
    TsneConfig::from_pipeline(cfg).validate(view_points)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut o = Out { dir: out, names: Vec::new() };
    let mut log = Vec::new();

    let gen = stage_gen(cfg).context("gen")?;
    write_embeddings(&gen.real_train, o.path("real_train.emb"))?;
    write_embeddings(&gen.real_val, o.path("real_val.emb"))?;
    write_embeddings(&gen.synthetic, o.path("synthetic.emb"))?;
    write_json(&gen.generators, o.path("generators.json"))?;
    log.push(format!(
        "gen: {} train, {} val, {} synthetic; fit loss {:.3e} / {:.3e}",
        gen.real_train.len(),
        gen.real_val.len(),
        gen.synthetic.len(),
        gen.fit_losses[0].last().unwrap_or(&f64::NAN),
        gen.fit_losses[1].last().unwrap_or(&f64::NAN)
    ));

    let extractor = metric_extractor(cfg);
    let mut report = evaluate_all("pipeline", &gen.real_train, &gen.synthetic, &gen.generators.generators[0], &extractor, cfg)
        .context("metrics")?;
    log.push(format!(
        "metrics: fid {:.4} kid {:.4} precision {:.3} recall {:.3} ppl {:.4} authenticity {:.3}",
        report.fid, report.kid_mean, report.precision, report.recall, report.ppl, report.authenticity
    ));

    let hp = TrainParams::from_pipeline(cfg);
    let scenarios = run_scenarios(&gen.real_train, &gen.real_val, &gen.generators, &hp, cfg.synth_scale)
        .context("classify")?;
    write_scenarios(&scenarios, &o.path("scenarios.json"), &o.path("scenarios.csv"))?;
    log.push(format!(
        "classify: {}",
        scenarios
            .rows
            .iter()
            .map(|r| format!("{} acc {:.3} auc {:.3}", r.name, r.metrics.acc, r.metrics.auc))
            .collect::<Vec<_>>()
            .join(", ")
    ));

    let baseline: ClassifierModel = train(&gen.real_train, &gen.real_val, &hp).context("baseline classifier")?;
    let embed = FeatureExtractor::from_layer(baseline.hidden_layer().clone());
    let targets = take_evenly(&gen.real_train, cfg.project_targets)?;
    let opt = project_options(cfg);
    let projection = project_with_class_generators(&targets, &gen.generators, &embed, &opt, None).context("project")?;
    write_json(&projection, o.path("projection.json"))?;
    report.distance_stats = Some(projection.stats.clone());
    write_json(&report, o.path("metrics.json"))?;

    let probs = predict_proba(&baseline, &targets.rows_f64())?;
    let mut edges = edge_case_order(&probs, targets.labels());
    edges.truncate(cfg.edge_cases);
    let neighbors = edge_case_neighbors(&projection, &targets, &edges, &gen.generators, cfg)?;
    let augmented = gen.real_train.concat(&neighbors)?;
    let after_model = train(&augmented, &gen.real_val, &hp).context("edge-case classifier")?;
    let edge_report = EdgeCaseReport {
        edge_ids: edges.iter().map(|&i| targets.ids()[i]).collect(),
        neighbors_added: neighbors.len(),
        radius: cfg.neighbor_radius,
        before: evaluate(&baseline, &gen.real_val, 0.5)?,
        after: evaluate(&after_model, &gen.real_val, 0.5)?,
    };
    write_json(&edge_report, o.path("edge_cases.json"))?;
    log.push(format!(
        "project: {} targets, mean cosine {:.4}, median {:.4}; {} edge-case neighbors, acc {:.3} -> {:.3}",
        projection.stats.count,
        projection.stats.mean,
        projection.stats.median,
        neighbors.len(),
        edge_report.before.acc,
        edge_report.after.acc
    ));

    let half = cfg.tsne_points / 2;
    let real_pts = take_evenly(&gen.real_val, half)?;
    let synth_pts = take_evenly(&gen.synthetic, cfg.tsne_points - real_pts.len())?;
    let mut points = embed.extract_rows(&real_pts.rows_f64())?;
    points.extend(embed.extract_rows(&synth_pts.rows_f64())?);
    let labels = [real_pts.labels(), synth_pts.labels()].concat();
    let sources: Vec<Source> = std::iter::repeat_n(Source::Real, real_pts.len())
        .chain(std::iter::repeat_n(Source::Synthetic, synth_pts.len()))
        .collect();
    let (csv, svg, kl) = tsne_artifacts(&points, &labels, &sources, &TsneConfig::from_pipeline(cfg)).context("tsne")?;
    write_text(&csv, o.path("tsne.csv"))?;
    write_text(&svg, o.path("tsne.svg"))?;
    log.push(format!("tsne: {} points, final KL {kl:.4}", points.len()));

    Ok(PipelineSummary {
        report,
        scenarios,
        edge_cases: edge_report,
        tsne_final_kl: kl,
        artifacts: o.names,
        log,
    })
}
