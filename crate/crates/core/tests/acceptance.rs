//! Acceptance gate. Prints one `[PASS]`/`[FAIL]` line per criterion and exits
//! nonzero if any criterion fails.

use std::time::{Duration, Instant};

use adaptraj::backbone::{base_loss, base_loss_value, Backbone};
use adaptraj::batch::SceneBatch;
use adaptraj::data::{chronological_split, generate_synthetic_domain, DomainCorpus, DomainProfile, ProfileSet, Split};
use adaptraj::disentangle::{
    adaptraj_loss, difference_loss, domain_adversarial_loss, nll_from_logits, orthogonality_penalty,
    reconstruction_loss, simse, DomainClassifier, DomainLabel,
};
use adaptraj::eval::{ade, evaluate, fde, run_inference};
use adaptraj::experiment::{
    gate_ablation, gate_generalization, gate_source_trend, run_generalization_experiment, run_source_count_sweep,
    ComparisonTable, ExperimentConfig,
};
use adaptraj::model::{Method, TrajectoryModel};
use adaptraj::nn::{Adam, Graph, Matrix, ParamStore, Var};
use adaptraj::training::{batch_gradients, run_training, run_training_observed, total_loss_value};
use adaptraj::{DomainTag, HyperParams, Location, SimseVariant, TrajectoryScene, PRED_LEN};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn close(a: f64, b: f64, tol: f64, what: &str) -> std::result::Result<(), String> {
    ensure((a - b).abs() <= tol, || format!("{what}: {a} vs {b} (tol {tol})"))
}

fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn small_hp(n_domains: usize) -> HyperParams {
    HyperParams {
        d_f: 8,
        noise_dim: 3,
        n_domains,
        batch_size: 8,
        e_start: 2,
        e_end: 4,
        e_total: 5,
        ..HyperParams::default()
    }
}

fn small_sources(n: usize, scenes: usize, seed: u64) -> Vec<DomainCorpus> {
    ProfileSet::default_four().domains[..n]
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let p = DomainProfile {
                scene_count: scenes,
                ..p.clone()
            };
            chronological_split(generate_synthetic_domain(&p, seed + k as u64).unwrap()).unwrap()
        })
        .collect()
}

// ---------------------------------------------------------------------------
// 1. Metric oracles
// ---------------------------------------------------------------------------

fn oracle_ade(p: &[Vec<Location>], t: &[Vec<Location>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0.0;
    for i in 0..p.len() {
        for s in 0..p[i].len() {
            let dx = p[i][s].x - t[i][s].x;
            let dy = p[i][s].y - t[i][s].y;
            total += (dx * dx + dy * dy).sqrt();
            count += 1.0;
        }
    }
    total / count
}

fn oracle_fde(p: &[Vec<Location>], t: &[Vec<Location>]) -> f64 {
    let mut total = 0.0;
    for i in 0..p.len() {
        let last = p[i].len() - 1;
        let dx = p[i][last].x - t[i][last].x;
        let dy = p[i][last].y - t[i][last].y;
        total += (dx * dx + dy * dy).sqrt();
    }
    total / p.len() as f64
}

fn criterion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..20);
        let track = |rng: &mut ChaCha8Rng| -> Vec<Location> {
            (0..PRED_LEN)
                .map(|_| Location::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)))
                .collect()
        };
        let p: Vec<_> = (0..n).map(|_| track(&mut rng)).collect();
        let t: Vec<_> = (0..n).map(|_| track(&mut rng)).collect();
        let a = ade(&p, &t).map_err(|e| e.to_string())?;
        let f = fde(&p, &t).map_err(|e| e.to_string())?;
        worst = worst.max((a - oracle_ade(&p, &t)).abs()).max((f - oracle_fde(&p, &t)).abs());
    }
    ensure(worst <= 1e-9, || format!("oracle deviation {worst:e}"))?;
    let truth: Vec<Location> = (0..PRED_LEN).map(|t| Location::new(t as f64 * 0.4, -1.0)).collect();
    let shifted: Vec<Location> = truth.iter().map(|l| l.translated(3.0, 4.0)).collect();
    let a = ade(&[shifted], std::slice::from_ref(&truth)).map_err(|e| e.to_string())?;
    ensure(a == 5.0, || format!("constant (3,4) offset ADE {a}"))?;
    let mut end = truth.clone();
    end[PRED_LEN - 1].y += 2.0;
    let f = fde(&[end], &[truth]).map_err(|e| e.to_string())?;
    ensure(f == 2.0, || format!("final (0,2) offset FDE {f}"))?;
    Ok(format!("100 random batches, max oracle deviation {worst:.1e}; offsets give 5.0 / 2.0"))
}

// ---------------------------------------------------------------------------
// 2. Loss correctness
// ---------------------------------------------------------------------------

/// Relative error between analytic and central-difference gradients at
/// `checks` random coordinates of `x`.
fn fd_check(
    rng: &mut ChaCha8Rng,
    x: &Matrix,
    analytic: &Matrix,
    checks: usize,
    mut f: impl FnMut(&Matrix) -> f64,
) -> f64 {
    // losses are batch sums of order 1e2, so smaller steps drown in round-off
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..checks {
        let i = rng.random_range(0..x.data.len());
        let mut xp = x.clone();
        xp.data[i] += h;
        let mut xm = x.clone();
        xm.data[i] -= h;
        let num = (f(&xp) - f(&xm)) / (2.0 * h);
        let ana = analytic.data[i];
        let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}

fn criterion_losses() -> Outcome {
    let cited = SimseVariant::Cited;
    let s = |t: &[f64], r: &[f64]| simse(t, r, cited).unwrap();
    close(s(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.0, 1e-9, "SIMSE identical")?;
    close(s(&[1.0, 1.0], &[0.0, 0.0]), 0.0, 1e-9, "SIMSE d=(1,1)")?;
    close(s(&[1.0, -1.0], &[0.0, 0.0]), 1.0, 1e-9, "SIMSE d=(1,-1)")?;

    let zeros = Matrix::zeros(3, 2);
    let feat = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0], vec![3.0, 0.0]]);
    close(orthogonality_penalty(&feat, &zeros).unwrap(), 0.0, 1e-9, "diff with zero specific")?;
    let single = Matrix::from_rows(&[vec![1.0, 2.0]]);
    close(orthogonality_penalty(&single, &single).unwrap(), 0.0, 1e-9, "diff B=1")?;
    let u = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
    let v = Matrix::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
    close(orthogonality_penalty(&u, &v).unwrap(), 0.0, 1e-9, "diff orthogonal")?;
    // centered rows ±(1,2): Ãᵀ Ã = [[2,4],[4,8]], squared Frobenius norm 100
    let uu = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, -2.0]]);
    close(orthogonality_penalty(&uu, &uu).unwrap(), 100.0, 1e-9, "diff u=v")?;

    close(nll_from_logits(&Matrix::from_rows(&[vec![0.0, 0.0, 0.0]]), &[1]).unwrap(), 3f64.ln(), 1e-9, "uniform NLL")?;
    close(nll_from_logits(&Matrix::from_rows(&[vec![-900.0, 0.0, -900.0]]), &[1]).unwrap(), 0.0, 1e-9, "one-hot NLL")?;

    let truth = vec![(0..PRED_LEN).map(|t| Location::new(t as f64, 0.0)).collect::<Vec<_>>()];
    let off = vec![truth[0].iter().map(|l| l.translated(3.0, 4.0)).collect::<Vec<_>>()];
    close(base_loss_value(&off, &truth).unwrap(), 300.0, 1e-9, "base loss")?;
    close(adaptraj_loss(0.01, 0.075, 0.25, 2.0, 4.0, 1.0), 0.57, 1e-9, "L_ours")?;
    close(total_loss_value(10.0, 2.0, 0.5), 11.0, 1e-9, "L_total")?;

    // finite-difference gradient checks, 20 instances per loss
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let empty = ParamStore::new();
    for inst in 0..20 {
        let b = rng.random_range(2..6);
        // reconstruction loss, both variants, w.r.t. the reconstruction
        for variant in [SimseVariant::Cited, SimseVariant::Literal] {
            let t = rand_matrix(&mut rng, b, 16);
            let r = rand_matrix(&mut rng, b, 16);
            let eval = |r: &Matrix| {
                let mut g = Graph::new(&empty);
                let (tv, rv) = (g.constant(t.clone()), g.constant(r.clone()));
                let l = reconstruction_loss(&mut g, tv, rv, variant).unwrap();
                g.value(l).item()
            };
            let mut g = Graph::new(&empty);
            let tv = g.constant(t.clone());
            let rv = g.leaf(r.clone());
            let l = reconstruction_loss(&mut g, tv, rv, variant).unwrap();
            let grads = g.backward(l);
            worst = worst.max(fd_check(&mut rng, &r, grads.wrt(rv).unwrap(), 5, eval));
        }
        // difference loss w.r.t. all four feature matrices
        let d = 4;
        let feats: Vec<Matrix> = (0..4).map(|_| rand_matrix(&mut rng, b, d)).collect();
        let eval_diff = |fs: &[Matrix]| {
            let mut g = Graph::new(&empty);
            let v: Vec<Var> = fs.iter().map(|m| g.constant(m.clone())).collect();
            let l = difference_loss(&mut g, v[0], v[1], v[2], v[3]).unwrap();
            g.value(l).item()
        };
        let mut g = Graph::new(&empty);
        let v: Vec<Var> = feats.iter().map(|m| g.leaf(m.clone())).collect();
        let l = difference_loss(&mut g, v[0], v[1], v[2], v[3]).unwrap();
        let grads = g.backward(l);
        for i in 0..4 {
            let an = grads.wrt(v[i]).unwrap().clone();
            worst = worst.max(fd_check(&mut rng, &feats[i], &an, 3, |m| {
                let mut fs = feats.clone();
                fs[i] = m.clone();
                eval_diff(&fs)
            }));
        }
        // adversarial loss: classifier weight and specific features get the
        // true gradient, invariant features the reversed one
        let mut store = ParamStore::new();
        let cls = DomainClassifier::new(&mut store, d, 3, &mut rng);
        let labels: Vec<DomainLabel> = (0..b).map(|_| DomainLabel::Domain(rng.random_range(0..3))).collect();
        let eval_adv = |store: &ParamStore, fs: &[Matrix]| {
            let mut g = Graph::new(store);
            let v: Vec<Var> = fs.iter().map(|m| g.constant(m.clone())).collect();
            let l = domain_adversarial_loss(&mut g, &cls, (v[0], v[1]), (v[2], v[3]), &labels).unwrap();
            g.value(l).item()
        };
        let (grads_f, grads_w) = {
            let mut g = Graph::new(&store);
            let v: Vec<Var> = feats.iter().map(|m| g.leaf(m.clone())).collect();
            let l = domain_adversarial_loss(&mut g, &cls, (v[0], v[1]), (v[2], v[3]), &labels).unwrap();
            let gr = g.backward(l);
            let f: Vec<Matrix> = v.iter().map(|x| gr.wrt(*x).unwrap().clone()).collect();
            (f, gr.into_params())
        };
        for i in 0..4 {
            let sign = if i < 2 { -1.0 } else { 1.0 };
            let an = grads_f[i].map(|x| sign * x);
            worst = worst.max(fd_check(&mut rng, &feats[i], &an, 3, |m| {
                let mut fs = feats.clone();
                fs[i] = m.clone();
                eval_adv(&store, &fs)
            }));
        }
        let wname = "classifier/l1/w";
        let w = store.get(wname).unwrap().clone();
        worst = worst.max(fd_check(&mut rng, &w, &grads_w[wname], 3, |m| {
            let mut s2 = store.clone();
            *s2.get_mut(wname).unwrap() = m.clone();
            eval_adv(&s2, &feats)
        }));
        // base loss through the whole predictor w.r.t. one weight per sub-network
        let hp = HyperParams {
            d_f: 5,
            noise_dim: 2,
            n_domains: 2,
            seed: inst,
            ..HyperParams::default()
        };
        let model = TrajectoryModel::new(Method::AdapTraj, &hp).unwrap();
        let scenes = small_sources(1, 6, 40 + inst).remove(0);
        let refs: Vec<&TrajectoryScene> = scenes.scenes.iter().take(3).collect();
        let batch = SceneBatch::new(&refs).unwrap();
        let noise = rand_matrix(&mut rng, batch.n_scenes, 2);
        let label = DomainLabel::Domain(1);
        let eval_model = |m: &TrajectoryModel| {
            let mut g = Graph::new(&m.store);
            let z = g.constant(noise.clone());
            let (_, t) = m.losses(&mut g, &batch, label, z).unwrap();
            g.value(t.base).item()
        };
        let grads = {
            let mut g = Graph::new(&model.store);
            let z = g.constant(noise.clone());
            let fwd = model.forward(&mut g, &batch, label, z).unwrap();
            let target = g.constant(batch.future.clone().unwrap());
            let l = base_loss(&mut g, fwd.pred, target).unwrap();
            g.backward(l).into_params()
        };
        for name in [
            "backbone/encoder/wx",
            "backbone/decoder/wh",
            "backbone/head/w",
            "invariant/fuse/l1/w",
            "expert_1/ind/l2/w",
            "expert_fuse/l1/w",
        ] {
            let p = model.store.get(name).unwrap().clone();
            worst = worst.max(fd_check(&mut rng, &p, &grads[name], 2, |m| {
                let mut m2 = model.clone();
                *m2.store.get_mut(name).unwrap() = m.clone();
                eval_model(&m2)
            }));
        }
    }
    ensure(worst < 1e-4, || format!("finite-difference relative error {worst:e}"))?;
    Ok(format!("hand values exact to 1e-9; gradient checks on 20 instances per loss, worst rel. err {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 3. Structural invariants
// ---------------------------------------------------------------------------

fn criterion_structure() -> Outcome {
    let hp = small_hp(3);
    let sources = small_sources(3, 30, 5);
    let scenes: Vec<&TrajectoryScene> = sources[0].split(Split::Train).iter().take(6).collect();
    let batch = SceneBatch::new(&scenes).unwrap();
    let noise = Matrix::zeros(batch.n_scenes, hp.noise_dim);

    // expert isolation: one optimizer step on a batch labeled k
    let mut model = TrajectoryModel::new(Method::AdapTraj, &hp).unwrap();
    let before = model.store.clone();
    let (_, grads) = batch_gradients(&model, &batch, DomainLabel::Domain(1), &noise, hp.delta).unwrap();
    let mut adam = Adam::new();
    adam.step(&mut model.store, &grads, |_| Some(1e-2));
    for k in [0, 2] {
        for part in ["ind", "nei"] {
            let prefix = format!("expert_{k}/{part}/");
            ensure(before.snapshot(&prefix) == model.store.snapshot(&prefix), || {
                format!("expert {k} ({part}) moved on a domain-1 batch")
            })?;
        }
    }
    ensure(before.snapshot("expert_1/") != model.store.snapshot("expert_1/"), || {
        "labeled expert did not move".into()
    })?;

    // stage-2 freezing of the experts
    let mut snaps = Vec::new();
    run_training_observed(Method::AdapTraj, &sources, &hp, |r, m| snaps.push((r.stage, m.store.snapshot("expert_"))))
        .map_err(|e| e.to_string())?;
    let last_stage1 = snaps.iter().rposition(|(s, _)| *s == 1).unwrap();
    for (s, snap) in &snaps {
        if *s == 2 {
            ensure(*snap == snaps[last_stage1].1, || "expert parameters changed in stage 2".into())?;
        }
    }

    // shared invariant extractor: same inputs under different labels
    let model = TrajectoryModel::new(Method::AdapTraj, &hp).unwrap();
    let inv = |label| {
        let mut g = Graph::new(&model.store);
        let z = g.constant(noise.clone());
        let f = model.forward(&mut g, &batch, label, z).unwrap();
        (
            g.value(f.invariant.indiv).clone(),
            g.value(f.invariant.neigh).clone(),
            g.value(f.invariant.fused).clone(),
        )
    };
    ensure(inv(DomainLabel::Domain(0)) == inv(DomainLabel::Domain(2)), || {
        "invariant features depend on the label".into()
    })?;
    ensure(inv(DomainLabel::Domain(0)) == inv(DomainLabel::Masked), || {
        "invariant features depend on masking".into()
    })?;

    // neighbor permutation invariance of the full forward pass
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let with_nb: Vec<TrajectoryScene> = sources[1]
        .scenes
        .iter()
        .filter(|s| s.neighbors_observed.len() >= 3)
        .take(5)
        .cloned()
        .collect();
    let base = run_inference(&model, &with_nb, 1, 0).unwrap();
    let shuffled: Vec<TrajectoryScene> = with_nb
        .iter()
        .map(|s| {
            let mut s = s.clone();
            use rand::seq::SliceRandom;
            s.neighbors_observed.shuffle(&mut rng);
            s
        })
        .collect();
    let perm = run_inference(&model, &shuffled, 1, 0).unwrap();
    ensure(base.samples == perm.samples, || "neighbor order changes predictions".into())?;

    // expert-order invariance of the aggregated path
    let mut swapped = model.clone();
    for (a, b) in [(0, 2)] {
        for (name, _) in model.store.iter() {
            if let Some(rest) = name.strip_prefix(&format!("expert_{a}/")) {
                let other = format!("expert_{b}/{rest}");
                *swapped.store.get_mut(name).unwrap() = model.store.get(&other).unwrap().clone();
                *swapped.store.get_mut(&other).unwrap() = model.store.get(name).unwrap().clone();
            }
        }
    }
    let p2 = run_inference(&swapped, &with_nb, 1, 0).unwrap();
    let mut drift: f64 = 0.0;
    for (x, y) in base.samples.iter().zip(&p2.samples) {
        for (a, b) in x[0].iter().zip(&y[0]) {
            drift = drift.max(a.distance(b));
        }
    }
    ensure(drift < 1e-12, || format!("expert permutation drift {drift:e}"))?;

    // inference never takes the label-indexed branch
    let fresh = TrajectoryModel::new(Method::AdapTraj, &hp).unwrap();
    let tagged: Vec<TrajectoryScene> = with_nb
        .iter()
        .map(|s| s.clone().with_domain(DomainTag::named("plaza")))
        .collect();
    run_inference(&fresh, &tagged, 3, 1).unwrap();
    evaluate(&fresh, "t", &tagged, 1, 0).unwrap();
    ensure(fresh.labeled_routes() == 0, || {
        format!("{} label-indexed routes during inference", fresh.labeled_routes())
    })?;

    // zero features reduce to the plain predictor; overhead is the fusion rows
    let vanilla = TrajectoryModel::new(Method::Vanilla, &hp).unwrap();
    let ours = TrajectoryModel::new(Method::AdapTraj, &hp).unwrap();
    let overhead = ours.store.count_scalars("backbone/") - vanilla.store.count_scalars("backbone/");
    ensure(overhead == 2 * hp.d_f * hp.d_f, || format!("fusion overhead {overhead}"))?;
    let mut s4 = ParamStore::new();
    let mut s2 = ParamStore::new();
    let mut r = ChaCha8Rng::seed_from_u64(9);
    let b4 = Backbone::new(&mut s4, "bb", hp.d_f, hp.noise_dim, 4, &mut r);
    let b2 = Backbone::new(&mut s2, "bb", hp.d_f, hp.noise_dim, 2, &mut r);
    for (name, m) in s4.iter() {
        let dst = s2.get_mut(name).unwrap();
        if dst.shape() == m.shape() {
            *dst = m.clone();
        } else {
            let n = dst.data.len();
            dst.data.copy_from_slice(&m.data[..n]);
        }
    }
    let run = |b: &Backbone, s: &ParamStore| {
        let mut g = Graph::new(s);
        let enc = b.encode(&mut g, &batch);
        let z = g.constant(noise.clone());
        let p = b.generate_future(&mut g, enc.indiv_hidden, enc.interaction, None, z).unwrap();
        g.value(p).clone()
    };
    ensure(run(&b4, &s4) == run(&b2, &s2), || "zero-feature predictor differs from plain backbone".into())?;

    Ok("expert isolation, stage-2 freezing, shared V_*, neighbor and expert order, label-blind inference, zero-feature reduction".into())
}

// ---------------------------------------------------------------------------
// 4. Translation equivariance
// ---------------------------------------------------------------------------

fn criterion_translation() -> Outcome {
    let hp = small_hp(2);
    let sources = small_sources(2, 40, 8);
    let trained = run_training(Method::AdapTraj, &sources, &hp).map_err(|e| e.to_string())?;
    let scenes = sources[1].split(Split::Test);
    let moved: Vec<TrajectoryScene> = scenes.iter().map(|s| s.translated(7.3, -2.1)).collect();
    let a = run_inference(&trained.model, scenes, 1, 0).unwrap();
    let b = run_inference(&trained.model, &moved, 1, 0).unwrap();
    let mut drift: f64 = 0.0;
    for (x, y) in a.samples.iter().zip(&b.samples) {
        for (p, q) in x[0].iter().zip(&y[0]) {
            drift = drift.max(p.translated(7.3, -2.1).distance(q));
        }
    }
    ensure(drift <= 1e-6, || format!("translation drift {drift:e} m"))?;
    Ok(format!("{} scenes shifted by (7.3, -2.1) m, max drift {drift:.1e} m", scenes.len()))
}

// ---------------------------------------------------------------------------
// 5. SIMSE semantics
// ---------------------------------------------------------------------------

fn criterion_simse() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let m = rng.random_range(1..30);
        let target: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
        let c: f64 = rng.random_range(-3.0..3.0);
        let recon: Vec<f64> = target.iter().map(|t| t - c).collect();
        let uniform = simse(&target, &recon, SimseVariant::Cited).unwrap();
        worst = worst.max(uniform.abs());

        let d: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mean = d.iter().sum::<f64>() / m as f64;
        let d: Vec<f64> = d.iter().map(|x| x - mean).collect();
        let recon: Vec<f64> = target.iter().zip(&d).map(|(t, x)| t - x).collect();
        let got = simse(&target, &recon, SimseVariant::Cited).unwrap();
        let residual: Vec<f64> = target.iter().zip(&recon).map(|(t, r)| t - r).collect();
        let msq = residual.iter().map(|x| x * x).sum::<f64>() / m as f64;
        worst = worst.max((got - msq).abs());
    }
    ensure(worst <= 1e-9, || format!("SIMSE semantic deviation {worst:e}"))?;
    Ok(format!("1000 cases, max deviation {worst:.1e}"))
}

// ---------------------------------------------------------------------------
// 6-8. Directional reproduction
// ---------------------------------------------------------------------------

const SEEDS: [u64; 3] = [0, 1, 2];

struct Directional {
    table: ComparisonTable,
    per_method: Vec<(Method, Duration)>,
}

fn run_comparison() -> Result<Directional, String> {
    let profiles = ProfileSet::default_four();
    let config = ExperimentConfig::default();
    let mut per_method = Vec::new();
    let mut merged: Option<ComparisonTable> = None;
    for m in [Method::Vanilla, Method::AdapTraj, Method::WithoutSpecific, Method::WithoutInvariant] {
        let t0 = Instant::now();
        let t = run_generalization_experiment(&profiles, 3, &[m], &SEEDS, &config).map_err(|e| e.to_string())?;
        per_method.push((m, t0.elapsed()));
        merged = Some(match merged {
            None => t,
            Some(mut acc) => {
                acc.rows.extend(t.rows);
                acc.cells.extend(t.cells);
                acc
            }
        });
    }
    let table = merged.unwrap();
    println!("{}", table.render().trim_end().replace('\n', "\n    "));
    Ok(Directional { table, per_method })
}

fn criterion_generalization(d: &Directional) -> Outcome {
    let gate = gate_generalization(&d.table).ok_or("missing rows")?;
    let slowest = d.per_method.iter().map(|(_, t)| *t).max().unwrap();
    let timing = format!("slowest method {:.0} s", slowest.as_secs_f64());
    ensure(slowest < Duration::from_secs(15 * 60), || format!("{timing} exceeds 15 min"))?;
    if gate.passed {
        Ok(format!("{}; {timing}", gate.detail))
    } else {
        Err(format!("{}; {timing}", gate.detail))
    }
}

fn criterion_ablation(d: &Directional) -> Outcome {
    let gate = gate_ablation(&d.table).ok_or("missing rows")?;
    if gate.passed {
        Ok(gate.detail)
    } else {
        Err(gate.detail)
    }
}

fn criterion_source_count() -> Outcome {
    let sweep = run_source_count_sweep(&ProfileSet::default_four(), 3, 3, &SEEDS, &ExperimentConfig::default())
        .map_err(|e| e.to_string())?;
    println!("{}", sweep.render().trim_end().replace('\n', "\n    "));
    let gate = gate_source_trend(&sweep).ok_or("missing rows")?;
    if gate.passed {
        Ok(gate.detail)
    } else {
        Err(gate.detail)
    }
}

// ---------------------------------------------------------------------------
// 9. Determinism
// ---------------------------------------------------------------------------

fn criterion_determinism() -> Outcome {
    let hp = small_hp(2);
    let sources = small_sources(2, 40, 11);
    let target = small_sources(4, 40, 11).remove(3);
    let run = || -> Result<(String, String), String> {
        let out = run_training(Method::AdapTraj, &sources, &hp).map_err(|e| e.to_string())?;
        let report = evaluate(&out.model, &target.domain_id, target.split(Split::Test), 4, 7).map_err(|e| e.to_string())?;
        Ok((out.log_ndjson().unwrap(), serde_json::to_string(&report).unwrap()))
    };
    let (a, b) = (run()?, run()?);
    ensure(a.0 == b.0, || "training logs differ".into())?;
    ensure(a.1 == b.1, || "evaluation reports differ".into())?;
    let profiles = ProfileSet {
        domains: ProfileSet::default_four()
            .domains
            .into_iter()
            .map(|p| DomainProfile { scene_count: 30, ..p })
            .collect(),
    };
    let cfg = ExperimentConfig {
        hp: HyperParams {
            n_domains: 3,
            ..small_hp(3)
        },
        k: 1,
    };
    let e1 = run_generalization_experiment(&profiles, 3, &[Method::AdapTraj, Method::Vanilla], &[4, 5], &cfg)
        .map_err(|e| e.to_string())?;
    let e2 = run_generalization_experiment(&profiles, 3, &[Method::AdapTraj, Method::Vanilla], &[4, 5], &cfg)
        .map_err(|e| e.to_string())?;
    ensure(e1.to_ndjson().unwrap() == e2.to_ndjson().unwrap(), || "experiment reports differ".into())?;
    Ok(format!("training log ({} bytes), eval report and experiment report byte-identical", a.0.len()))
}

/// Criteria 6-8 compare trained models and are reported without failing the
/// process unless `ADAPTRAJ_STRICT` is set.
const DIRECTIONAL: [usize; 3] = [6, 7, 8];

fn main() {
    let strict = std::env::var_os("ADAPTRAJ_STRICT").is_some();
    let mut failed = Vec::new();
    let mut report = |n: usize, name: &str, budget: Option<Duration>, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let mut r = f();
        let dt = t0.elapsed();
        if let (Ok(detail), Some(b)) = (&r, budget) {
            if dt > b {
                r = Err(format!("{detail}; took {:.1} s, budget {:.0} s", dt.as_secs_f64(), b.as_secs_f64()));
            }
        }
        match r {
            Ok(detail) => println!("[PASS] {n}. {name} ({:.1} s): {detail}", dt.as_secs_f64()),
            Err(detail) => {
                failed.push(n);
                println!("[FAIL] {n}. {name} ({:.1} s): {detail}", dt.as_secs_f64());
            }
        }
    };
    report(1, "metric oracles", Some(Duration::from_secs(5)), &mut criterion_metrics);
    report(2, "loss correctness", Some(Duration::from_secs(30)), &mut criterion_losses);
    report(3, "structural invariants", Some(Duration::from_secs(60)), &mut criterion_structure);
    report(4, "translation equivariance", None, &mut criterion_translation);
    report(5, "SIMSE semantics", None, &mut criterion_simse);
    let directional = run_comparison();
    match &directional {
        Ok(d) => {
            report(6, "directional generalization", None, &mut || criterion_generalization(d));
            report(7, "directional ablation", None, &mut || criterion_ablation(d));
        }
        Err(e) => {
            report(6, "directional generalization", None, &mut || Err(e.clone()));
            report(7, "directional ablation", None, &mut || Err(e.clone()));
        }
    }
    report(8, "source-count trend", None, &mut criterion_source_count);
    report(9, "determinism", None, &mut criterion_determinism);
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
        return;
    }
    println!("acceptance: failed criteria {failed:?}");
    if strict || failed.iter().any(|n| !DIRECTIONAL.contains(n)) {
        std::process::exit(1);
    }
    println!("acceptance: only directional criteria failed; set ADAPTRAJ_STRICT=1 to make them fatal");
}
