//! Acceptance suite. Each criterion prints one PASS/FAIL line with its
//! measurements and wall time; the process fails if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use synthgauge::classifier::{
    auc, fingerprint, init_network, logistic_loss_grad, run_scenarios, scenario_training_sets, ReplaySource,
    TrainParams,
};
use synthgauge::dataio::{
    read_embeddings, read_json, round_sig9, to_json_string, write_embeddings, write_json, EmbeddingSet,
    MetricReport, PipelineConfig, Source,
};
use synthgauge::fedsim::{fedavg, moment_loss, run_federation_only, run_isolated, speedup, FedConfig};
use synthgauge::metrics::{
    authenticity_rows, fid_rows, ppl, precision_recall_rows, sample_ppl_paths, DistanceStats, FeatureExtractor,
    Interpolation,
};
use synthgauge::nn::{Layer, Mlp};
use synthgauge::numerics::{euclidean, knn_distance, knn_radii, Matrix, Metric};
use synthgauge::projector::{project, projection_loss_grad, ProjectOptions};
use synthgauge::rng::counter_uniform;
use synthgauge::sefa::{edit, factorize, factorize_weight};
use synthgauge::toygen::{sample_dataset, sample_latents, DataDistribution, ToyGenerator};
use synthgauge::viz::{silhouette, tsne, TsneConfig};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ok<T>(r: synthgauge::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn uniform(seed: u64, keys: &[u64], n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n as u64).map(|i| lo + (hi - lo) * counter_uniform(seed, keys, i)).collect()
}

fn pick(seed: u64, keys: &[u64], lo: usize, hi: usize) -> usize {
    lo + (counter_uniform(seed, keys, 0) * (hi - lo + 1) as f64) as usize
}

fn normals(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    sample_latents(n, dim, seed).expect("positive dims")
}

fn shift(rows: &[Vec<f64>], by: f64) -> Vec<Vec<f64>> {
    rows.iter().map(|r| r.iter().map(|v| v + by).collect()).collect()
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn axpy(x: &[f64], a: f64, v: &[f64]) -> Vec<f64> {
    x.iter().zip(v).map(|(x, v)| x + a * v).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

// ---- brute-force oracles -------------------------------------------------

fn brute_kth(points: &[Vec<f64>], q: &[f64], k: usize, skip: Option<usize>) -> f64 {
    let mut d: Vec<f64> = points
        .iter()
        .enumerate()
        .filter(|(j, _)| Some(*j) != skip)
        .map(|(_, p)| euclidean(q, p))
        .collect();
    d.sort_by(f64::total_cmp);
    d[k - 1]
}

fn brute_radii(points: &[Vec<f64>], k: usize) -> Vec<f64> {
    (0..points.len()).map(|i| brute_kth(points, &points[i], k, Some(i))).collect()
}

fn brute_coverage(queries: &[Vec<f64>], centers: &[Vec<f64>], k: usize) -> f64 {
    let radii = brute_radii(centers, k);
    let mut inside = 0;
    for q in queries {
        let mut hit = false;
        for (c, r) in centers.iter().zip(&radii) {
            if euclidean(q, c) <= *r {
                hit = true;
            }
        }
        inside += usize::from(hit);
    }
    inside as f64 / queries.len() as f64
}

fn brute_memorized(train: &[Vec<f64>], gen: &[Vec<f64>]) -> Vec<bool> {
    let nn = brute_radii(train, 1);
    gen.iter()
        .map(|s| {
            let mut best = 0;
            for j in 1..train.len() {
                if euclidean(s, &train[j]) < euclidean(s, &train[best]) {
                    best = j;
                }
            }
            euclidean(s, &train[best]) < nn[best]
        })
        .collect()
}

fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut twice_wins = 0u64;
    let (mut pos, mut neg) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] == 1 {
            pos += 1;
        } else {
            neg += 1;
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] == 0 {
                twice_wins += if si > sj { 2 } else if si == sj { 1 } else { 0 };
            }
        }
    }
    (twice_wins as f64 / 2.0) / (pos * neg) as f64
}

// ---- criteria ------------------------------------------------------------

fn metric_identities() -> Check {
    let a = normals(40, 5, 0xa1);
    let f0 = ok(fid_rows(&a, &a))?;
    ensure(f0.abs() <= 1e-8, format!("fid(a,a) = {f0:e}"))?;

    let col = |v: &[f64]| v.iter().map(|&x| vec![x]).collect::<Vec<_>>();
    let shifted = ok(fid_rows(&col(&[-1.0, 0.0, 1.0]), &col(&[0.0, 1.0, 2.0])))?;
    let widened = ok(fid_rows(&col(&[-1.0, 0.0, 1.0]), &col(&[-2.0, 0.0, 2.0])))?;
    ensure((shifted - 1.0).abs() <= 1e-6, format!("mean-shift FID {shifted}"))?;
    ensure((widened - 1.0).abs() <= 1e-6, format!("variance FID {widened}"))?;

    let real = normals(60, 4, 0xa2);
    let sub: Vec<Vec<f64>> = real.iter().step_by(2).cloned().collect();
    let (p_id, r_id) = ok(precision_recall_rows(&sub, &sub, 3))?;
    ensure(p_id == 1.0 && r_id == 1.0, format!("identity P/R {p_id}/{r_id}"))?;
    let (p_sub, _) = ok(precision_recall_rows(&real, &sub, 3))?;
    ensure(p_sub == 1.0, format!("subsample precision {p_sub}"))?;
    let (p_far, r_far) = ok(precision_recall_rows(&real, &shift(&real, 1e4), 3))?;
    ensure(p_far == 0.0 && r_far == 0.0, format!("displaced P/R {p_far}/{r_far}"))?;

    let train = normals(30, 4, 0xa3);
    let far = shift(&normals(20, 4, 0xa4), 1e3);
    for (m, c) in [(0usize, 5usize), (5, 7), (12, 1), (20, 30)] {
        let mut gen: Vec<Vec<f64>> = (0..c).map(|i| train[i % train.len()].clone()).collect();
        gen.extend(far.iter().take(m).cloned());
        let auth = ok(authenticity_rows(&train, &gen))?;
        let want = m as f64 / (m + c) as f64;
        ensure(auth.score == want, format!("authenticity m={m} c={c}: {} != {want}", auth.score))?;
    }
    Ok(format!("fid(a,a)={f0:.1e}, 1-D FID {shifted}/{widened}, P/R identity 1/1, displaced 0/0, m/(m+c) exact"))
}

fn oracle_equivalence() -> Check {
    let instances = 60;
    for inst in 0..instances as u64 {
        let s = 0xb0 + inst;
        let nr = pick(s, &[1], 5, 30);
        let ng = pick(s, &[2], 5, 30);
        let dim = pick(s, &[3], 1, 4);
        let k = pick(s, &[4], 1, nr.min(ng) - 1);
        // every third instance lives on a small integer grid to force ties
        let grid = inst % 3 == 0;
        let draw = |n: usize, key: u64| -> Vec<Vec<f64>> {
            (0..n as u64)
                .map(|i| {
                    uniform(s, &[key, i], dim, 0.0, 4.0)
                        .into_iter()
                        .map(|v| if grid { v.floor() } else { v })
                        .collect()
                })
                .collect()
        };
        let real = draw(nr, 5);
        let gen = draw(ng, 6);

        let radii = ok(knn_radii(&real, k, Metric::Euclidean))?;
        ensure(radii == brute_radii(&real, k), format!("instance {inst}: knn radii differ"))?;
        let cross = ok(knn_distance(&real, &gen, k, Metric::Euclidean))?;
        let want: Vec<f64> = gen.iter().map(|q| brute_kth(&real, q, k, None)).collect();
        ensure(cross == want, format!("instance {inst}: knn distances differ"))?;

        let (p, r) = ok(precision_recall_rows(&real, &gen, k))?;
        let (bp, br) = (brute_coverage(&gen, &real, k), brute_coverage(&real, &gen, k));
        ensure(p == bp && r == br, format!("instance {inst}: P/R {p}/{r} vs {bp}/{br}"))?;

        let auth = ok(authenticity_rows(&real, &gen))?;
        ensure(auth.memorized == brute_memorized(&real, &gen), format!("instance {inst}: flags differ"))?;

        let n = nr + ng;
        let labels: Vec<u8> = (0..n).map(|i| u8::from(i < 2 || (i >= 4 && counter_uniform(s, &[7], i as u64) < 0.4))).collect();
        let scores: Vec<f64> = uniform(s, &[8], n, 0.0, 6.0)
            .into_iter()
            .map(|v| if grid { v.floor() } else { v })
            .collect();
        let a = ok(auc(&scores, &labels))?;
        let b = brute_auc(&scores, &labels);
        ensure(a == b, format!("instance {inst}: AUC {a} vs {b}"))?;
    }
    Ok(format!("{instances} instances, sizes <= 60, all four oracles bit-exact"))
}

const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;

fn directional(f: &dyn Fn(&[f64]) -> f64, x: &[f64], v: &[f64]) -> f64 {
    (f(&axpy(x, FD_STEP, v)) - f(&axpy(x, -FD_STEP, v))) / (2.0 * FD_STEP)
}

fn gradient_suites() -> Check {
    let probes = 100u64;
    let mut worst = [0.0f64; 3];

    // generator: w-space backprop for even probes, parameter backprop through
    // the moment-matching objective for odd ones
    for i in 0..probes {
        let g = ok(ToyGenerator::with_dims(6, 9, false, 0xc0 + i))?;
        let (a, b) = if i % 2 == 0 {
            let w = uniform(i, &[1], 6, -1.5, 1.5);
            let ct = uniform(i, &[2], 9, -1.0, 1.0);
            let v = unit(uniform(i, &[3], 6, -1.0, 1.0));
            let grad = ok(g.grad_wrt_w(&w, &ct))?;
            let f = |x: &[f64]| dot(&g.synthesize(x).expect("dims"), &ct);
            (dot(&grad, &v), directional(&f, &w, &v))
        } else {
            let z = normals(8, 6, 0xc100 + i);
            let mean = uniform(i, &[4], 9, -0.5, 0.5);
            let cov = Matrix::diag(&uniform(i, &[5], 9, 0.1, 0.6));
            let theta = g.params();
            let v = unit(uniform(i, &[6], theta.len(), -1.0, 1.0));
            let (_, grad) = ok(moment_loss(&g, &theta, &z, &mean, &cov, 0.5, true))?;
            let f = |x: &[f64]| moment_loss(&g, x, &z, &mean, &cov, 0.5, false).expect("dims").0;
            (dot(&grad.expect("requested"), &v), directional(&f, &theta, &v))
        };
        worst[0] = worst[0].max(rel_err(a, b, FD_FLOOR));
    }

    for i in 0..probes {
        let g = ok(ToyGenerator::with_dims(5, 8, false, 0xd0 + i))?;
        let ex = FeatureExtractor::seeded(8, 6, 0xd100 + i);
        let target = uniform(i, &[1], 6, -0.8, 0.8);
        let w = uniform(i, &[2], 5, -1.5, 1.5);
        let v = unit(uniform(i, &[3], 5, -1.0, 1.0));
        let (_, grad) = ok(projection_loss_grad(&g, &ex, &target, &w))?;
        let f = |x: &[f64]| projection_loss_grad(&g, &ex, &target, x).expect("dims").0;
        worst[1] = worst[1].max(rel_err(dot(&grad, &v), directional(&f, &w, &v), FD_FLOOR));
    }

    for i in 0..probes {
        let dim = 4 + (i % 5) as usize;
        let net = ok(init_network(dim, 0xe0 + i))?;
        let rows: Vec<Vec<f64>> = (0..12).map(|r| uniform(i, &[1, r], dim, -2.0, 2.0)).collect();
        let labels: Vec<u8> = (0..12u64).map(|r| u8::from(r % 2 == 0 || counter_uniform(i, &[2], r) < 0.3)).collect();
        let theta = net.params();
        let v = unit(uniform(i, &[3], theta.len(), -1.0, 1.0));
        let (_, grad) = ok(logistic_loss_grad(&net, &rows, &labels))?;
        let f = |x: &[f64]| {
            let mut n = net.clone();
            n.set_params(x).expect("length");
            logistic_loss_grad(&n, &rows, &labels).expect("dims").0
        };
        worst[2] = worst[2].max(rel_err(dot(&grad, &v), directional(&f, &theta, &v), FD_FLOOR));
    }

    let names = ["generator", "projection", "classifier"];
    for (name, w) in names.iter().zip(worst) {
        ensure(w <= 1e-5, format!("{name} gradient relative error {w:.2e}"))?;
    }
    Ok(format!(
        "{probes} probes each, worst relative error generator {:.1e}, projection {:.1e}, classifier {:.1e}",
        worst[0], worst[1], worst[2]
    ))
}

fn self_inversion() -> Check {
    let cfg = PipelineConfig::default();
    let g = ok(ToyGenerator::new(&cfg, false))?;
    let ex = FeatureExtractor::identity(cfg.sample_dim);
    let opt = ProjectOptions::default();
    ensure(opt.max_steps == 2000 && opt.restarts == 3, "unexpected projection defaults")?;
    let zs = normals(20, cfg.latent_dim, 0xacc4);
    let mut losses = Vec::new();
    for (i, z) in zs.iter().enumerate() {
        let target = ok(g.generate(z, None))?;
        let r = ok(project(&target, i as u32, None, &g, &ex, &opt))?;
        ensure(r.steps_used <= 2000, format!("target {i} used {} steps", r.steps_used))?;
        losses.push(r.final_loss);
    }
    let hits = losses.iter().filter(|&&l| l < 1e-6).count();
    let worst = losses.iter().cloned().fold(0.0, f64::max);
    ensure(hits >= 19, format!("{hits}/20 targets below 1e-6 (worst {worst:.2e})"))?;
    Ok(format!("{hits}/20 targets below 1e-6, worst final loss {worst:.2e}"))
}

fn sefa_correctness() -> Check {
    let golden = ok(factorize_weight(&Matrix::diag(&[3.0, 2.0, 1.0])))?;
    ensure(golden.significances == vec![9.0, 4.0, 1.0], format!("diag eigenvalues {:?}", golden.significances))?;
    let e = |i: usize| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    ensure(golden.directions == vec![e(0), e(1), e(2)], "diag directions are not the unit axes")?;

    let random = Matrix {
        rows: 32,
        cols: 16,
        data: uniform(0x5efa, &[], 32 * 16, -1.0, 1.0),
    };
    let cfg = PipelineConfig::default();
    let g = ok(ToyGenerator::new(&cfg, false))?;
    let mut residual = 0.0f64;
    for a in [&random, &g.first_synthesis_layer().weight] {
        let basis = ok(factorize_weight(a))?;
        for (v, lambda) in basis.directions.iter().zip(&basis.significances) {
            let av: Vec<f64> = (0..a.rows).map(|r| dot(a.row(r), v)).collect();
            for c in 0..a.cols {
                let atav: f64 = (0..a.rows).map(|r| a.get(r, c) * av[r]).sum();
                residual = residual.max((atav - lambda * v[c]).abs());
            }
        }
    }
    ensure(residual < 1e-8, format!("eigen residual {residual:e}"))?;

    let basis = ok(factorize(&g))?;
    let layer = g.first_synthesis_layer();
    let w = uniform(0x5efb, &[], cfg.latent_dim, -1.0, 1.0);
    let base = layer.preactivation(&w);
    let mut disp = 0.0f64;
    for i in [0, 1, 5, cfg.latent_dim - 1] {
        for alpha in [-3.0, -1.0, 0.5, 2.0] {
            let moved = layer.preactivation(&ok(edit(&w, &basis, i, alpha))?);
            let v = &basis.directions[i];
            for r in 0..layer.weight.rows {
                let want = alpha * dot(layer.weight.row(r), v);
                disp = disp.max((moved[r] - base[r] - want).abs());
            }
        }
    }
    ensure(disp <= 1e-10, format!("displacement error {disp:e}"))?;
    Ok(format!("diag(3,2,1) exact, eigen residual {residual:.1e}, displacement error {disp:.1e}"))
}

fn fedavg_algebra() -> Check {
    let mut worst = 0.0f64;
    let mut perm_worst = 0.0f64;
    for inst in 0..50u64 {
        let k = pick(inst, &[1], 1, 6);
        let dim = pick(inst, &[2], 1, 20);
        let params: Vec<Vec<f64>> = (0..k as u64).map(|c| uniform(inst, &[3, c], dim, -5.0, 5.0)).collect();
        let weights: Vec<f64> = (0..k as u64).map(|c| pick(inst, &[4, c], 1, 3000) as f64).collect();
        let got = ok(fedavg(&params, &weights))?;
        let total: f64 = weights.iter().sum();
        for d in 0..dim {
            let want: f64 = params.iter().zip(&weights).map(|(p, w)| w * p[d]).sum::<f64>() / total;
            worst = worst.max((got[d] - want).abs());
        }
        let order: Vec<usize> = (0..k).rev().collect();
        let pp: Vec<Vec<f64>> = order.iter().map(|&i| params[i].clone()).collect();
        let pw: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
        let permuted = ok(fedavg(&pp, &pw))?;
        for d in 0..dim {
            perm_worst = perm_worst.max((got[d] - permuted[d]).abs());
        }
        if k == 1 {
            ensure(got == params[0], format!("instance {inst}: single-client average is not bit-exact"))?;
        }
    }
    ensure(worst <= 1e-12, format!("weighted mean error {worst:e}"))?;
    ensure(perm_worst <= 1e-12, format!("permutation difference {perm_worst:e}"))?;

    let single = FedConfig {
        client_sizes: vec![200],
        rounds: 3,
        ..FedConfig::from_pipeline(&PipelineConfig::default())
    };
    let fed = ok(run_federation_only(&single))?;
    let iso = ok(run_isolated(&single, 0))?;
    ensure(fed.aggregated == iso.params && fed.eval_loss == iso.eval_loss, "single-client federation differs from isolated")?;

    let three = FedConfig {
        rounds: 1,
        ..FedConfig::from_pipeline(&PipelineConfig::default())
    };
    ensure(three.client_sizes == vec![200, 1200, 2000], "unexpected default client sizes")?;
    let run = ok(run_federation_only(&three))?;
    for (c, want) in run.clients.iter().zip([1.0 / 17.0, 6.0 / 17.0, 10.0 / 17.0]) {
        ensure((c.weight - want).abs() <= 1e-10, format!("client {} weight {}", c.id, c.weight))?;
    }
    Ok(format!(
        "mean error {worst:.1e}, permutation {perm_worst:.1e}, single client bit-exact, weights 1/17 6/17 10/17"
    ))
}

fn smallest_client_benefit() -> Check {
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in 0..10u64 {
        let cfg = FedConfig::from_pipeline(&PipelineConfig {
            seed,
            ..Default::default()
        });
        let smallest = (0..cfg.client_sizes.len()).min_by_key(|&i| cfg.client_sizes[i]).expect("clients");
        let fed = ok(run_federation_only(&cfg))?;
        let iso = ok(run_isolated(&cfg, smallest))?;
        let s = speedup(&fed, &iso, smallest, cfg.loss_threshold);
        let win = match (s.federated_steps, s.isolated_steps) {
            (Some(f), Some(i)) => f < i,
            (Some(_), None) => true,
            _ => false,
        };
        wins += usize::from(win);
        notes.push(match (s.ratio, s.isolated_steps) {
            (Some(r), _) => format!("{r:.2}"),
            (None, None) if s.federated_steps.is_some() => "iso-unreached".to_string(),
            _ => "fed-unreached".to_string(),
        });
    }
    let line = format!("{wins}/10 seeds faster federated; speedup ratios [{}]", notes.join(", "));
    ensure(wins >= 8, line.clone())?;
    Ok(line)
}

fn scenario_protocol() -> Check {
    let cfg = PipelineConfig::default();
    let dist = ok(DataDistribution::standard(cfg.sample_dim, cfg.class_ratio, cfg.seed))?;
    let train = ok(sample_dataset(&dist, cfg.n_train, 0x7a1))?;
    let val = ok(sample_dataset(&dist, cfg.n_val, 0x7a2))?;
    let replay = ReplaySource::new(&train);
    let hp = TrainParams::from_pipeline(&cfg);
    let sets = ok(scenario_training_sets(&train, &replay, cfg.synth_scale, hp.seed))?;
    let aug = &sets.iter().find(|(n, _)| *n == "aug").expect("aug row").1;
    ensure(aug.class_count(0) == aug.class_count(1), "aug training set is not balanced")?;

    let table = ok(run_scenarios(&train, &val, &replay, &hp, cfg.synth_scale))?;
    let row = |name: &str| table.rows.iter().find(|r| r.name == name).expect("row");
    let (base, synth, aug_row) = (row("baseline"), row("synth"), row("aug"));
    ensure(aug_row.train_benign == aug_row.train_malignant, "aug row counts differ")?;
    let print = fingerprint(&val);
    ensure(
        table.rows.iter().all(|r| r.validation_fingerprint == print && r.validation_size == val.len()),
        "rows evaluated on different validation sets",
    )?;
    let gap = (synth.metrics.acc - base.metrics.acc).abs();
    let line = format!(
        "baseline acc {:.4}, synth acc {:.4} (gap {:.2} pp), aug {}/{}, one validation set {print}",
        base.metrics.acc,
        synth.metrics.acc,
        100.0 * gap,
        aug_row.train_benign,
        aug_row.train_malignant
    );
    ensure(gap <= 0.02, line.clone())?;
    Ok(line)
}

fn ppl_closed_form() -> Check {
    let d = 6;
    let ident = || Mlp::new(vec![Layer::identity(d)]).expect("layer");
    let g = ok(ToyGenerator::from_parts(ident(), ident(), None, 3))?;
    let ex = FeatureExtractor::identity(d);
    let (n, seed) = (200, 0x991);
    let paths = ok(sample_ppl_paths(&g, n, seed))?;
    let want = paths
        .iter()
        .map(|p| p.w_end.iter().zip(&p.w_start).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    let mut worst = 0.0f64;
    let mut values = Vec::new();
    for eps in [1e-3, 1e-4, 1e-5] {
        let v = ok(ppl(&g, &ex, n, eps, Interpolation::LerpW, seed))?;
        worst = worst.max(rel_err(v, want, 0.0));
        values.push(v);
    }
    ensure(worst < 1e-6, format!("PPL relative error {worst:e}"))?;
    Ok(format!("PPL {:.6} vs closed form {want:.6}, worst relative error {worst:.1e} over 3 epsilons", values[1]))
}

fn tsne_clusters() -> Check {
    let mut good = 0;
    let mut scores = Vec::new();
    for seed in 0..10u64 {
        let mut x = normals(30, 5, 0x75e0 + seed);
        x.extend(shift(&normals(30, 5, 0x75f0 + seed), 20.0));
        let labels: Vec<u8> = (0..60).map(|i| u8::from(i >= 30)).collect();
        let cfg = TsneConfig {
            output_dims: 2,
            perplexity: 10.0,
            seed,
            ..Default::default()
        };
        let r = ok(tsne(&x, &cfg))?;
        let tail = &r.kl[cfg.exaggeration_iters..];
        ensure(tail.windows(2).all(|w| w[1] <= w[0]), format!("seed {seed}: KL increased after exaggeration"))?;
        let s = ok(silhouette(&r.layout, &labels))?;
        good += usize::from(s > 0.5);
        scores.push(s);
    }
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let line = format!("silhouette > 0.5 in {good}/10 seeds (min {lo:.3}), KL non-increasing after exaggeration");
    ensure(good >= 9, line.clone())?;
    Ok(line)
}

fn list_files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .expect("output dir")
        .map(|e| e.expect("entry").file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

fn determinism_and_io() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dirs = [tmp.path().join("a"), tmp.path().join("b")];
    for d in &dirs {
        let status = Command::new(env!("CARGO_BIN_EXE_synthgauge"))
            .args(["--seed", "42", "--out"])
            .arg(d)
            .arg("pipeline")
            .stdout(Stdio::null())
            .status()
            .map_err(|e| e.to_string())?;
        ensure(status.success(), format!("pipeline exited with {status}"))?;
    }
    let names = list_files(&dirs[0]);
    ensure(names == list_files(&dirs[1]), "runs produced different file sets")?;
    let mut compared = 0;
    for name in names.iter().filter(|n| *n != "manifest.json") {
        let a = std::fs::read(dirs[0].join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dirs[1].join(name)).map_err(|e| e.to_string())?;
        ensure(a == b, format!("{name} differs between runs"))?;
        compared += 1;
    }

    let original = dirs[0].join("real_train.emb");
    let set = ok(read_embeddings(&original))?;
    let copy = tmp.path().join("copy.emb");
    ok(write_embeddings(&set, &copy))?;
    ensure(std::fs::read(&original).ok() == std::fs::read(&copy).ok(), "EMB1 rewrite changed bytes")?;
    let odd = vec![vec![f64::from(f32::MIN_POSITIVE), -0.0, 1e30], vec![f64::from(f32::MAX), 1.0 / 3.0, -7.25]];
    let odd_set = ok(EmbeddingSet::from_rows(&odd, vec![1, 0], Source::Synthetic))?;
    ok(write_embeddings(&odd_set, &copy))?;
    let back = ok(read_embeddings(&copy))?;
    ensure(back == odd_set, "EMB1 round trip lost data")?;
    ensure(back.raw_vectors().iter().zip(odd_set.raw_vectors()).all(|(a, b)| a.to_bits() == b.to_bits()), "EMB1 bits changed")?;

    let metrics_path = dirs[0].join("metrics.json");
    let report: MetricReport = ok(read_json(&metrics_path))?;
    ensure(
        std::fs::read_to_string(&metrics_path).ok() == Some(ok(to_json_string(&report))?),
        "metrics.json does not re-serialize to the same bytes",
    )?;
    let raw = MetricReport {
        scenario: "round-trip".into(),
        kid_mean: -1.0 / 7.0,
        kid_std: 2.0f64.sqrt(),
        fid: 1e-300,
        precision: 0.1 + 0.2,
        recall: 1.0,
        ppl: 123456.789012345,
        authenticity: 0.0,
        distance_stats: Some(ok(DistanceStats::from_distances(&[3, 1, 2], &[0.3, 0.01, 0.25], Some(0.1)))?),
    };
    let json_path = tmp.path().join("r.json");
    ok(write_json(&raw, &json_path))?;
    let parsed: MetricReport = ok(read_json(&json_path))?;
    ensure(parsed.kid_mean == round_sig9(raw.kid_mean) && parsed.ppl == round_sig9(raw.ppl), "JSON values are not the 9-digit roundings")?;
    ensure(ok(to_json_string(&parsed))? == ok(to_json_string(&raw))?, "JSON round trip is not a fixed point")?;
    let cfg = PipelineConfig::default();
    ensure(ok(PipelineConfig::from_json(&ok(to_json_string(&cfg))?))? == cfg, "config JSON round trip changed values")?;

    Ok(format!("{compared} artifacts byte-identical across two runs, EMB1 and JSON round trips lossless"))
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Check,
}

fn main() {
    let criteria = [
        Criterion { name: "metric identities", limit: Duration::from_secs(5), run: metric_identities },
        Criterion { name: "oracle equivalence", limit: Duration::from_secs(30), run: oracle_equivalence },
        Criterion { name: "gradient suites", limit: Duration::from_secs(30), run: gradient_suites },
        Criterion { name: "projection self-inversion", limit: Duration::from_secs(60), run: self_inversion },
        Criterion { name: "sefa correctness", limit: Duration::from_secs(5), run: sefa_correctness },
        Criterion { name: "fedavg algebra", limit: Duration::from_secs(10), run: fedavg_algebra },
        Criterion { name: "smallest-client benefit", limit: Duration::from_secs(300), run: smallest_client_benefit },
        Criterion { name: "scenario-table protocol", limit: Duration::from_secs(60), run: scenario_protocol },
        Criterion { name: "ppl closed form", limit: Duration::from_secs(10), run: ppl_closed_form },
        Criterion { name: "t-sne cluster preservation", limit: Duration::from_secs(60), run: tsne_clusters },
        Criterion { name: "determinism and i/o", limit: Duration::from_secs(120), run: determinism_and_io },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, c) in criteria.iter().enumerate() {
        let id = format!("{:02}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| c.name.contains(f.as_str()) || *f == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|_| Err("panicked".into()));
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if took > c.limit => Err(format!("{detail}; over the {}s limit", c.limit.as_secs())),
            other => other,
        };
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {id} {tag} {} ({:.1}s): {detail}", c.name, took.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
