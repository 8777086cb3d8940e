//! Acceptance suite. Runs every primary criterion at its stated tolerance and
//! prints one PASS/FAIL line per criterion; exits non-zero if any fails.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use mmrank::corpus::{relevance_of, Session, DEFAULT_DWELL_THRESHOLD};
use mmrank::embedding::{build_vocabulary, Embedder, Layout, Modality, SparseVector};
use mmrank::metrics::{ndcg, wilcoxon_signed_rank, EvalReport};
use mmrank::pairgen::{
    make_instances, mine_preference_pairs, pairwise_transform, DiffVector, Label, PairwiseInstance,
};
use mmrank::pipeline::{run_experiment, ExperimentConfig};
use mmrank::ranksvm::{
    objective, objective_gradient, pairwise_error, train_sgd, LinearWeights, TrainConfig,
};
use mmrank::synthlog::{
    generate_sessions, generate_sessions_traced, generate_world, write_world, World, WorldSpec,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(
        elapsed < limit,
        format!("runtime {elapsed:.1?} exceeds {limit:?}"),
    )
}

fn criterion_1() -> Check {
    let start = Instant::now();
    let v = ndcg(&[1.0, 0.0, 1.0], 3).map_err(|e| e.to_string())?;
    ensure((v - 0.91972).abs() <= 1e-4, format!("ndcg([1,0,1],3) = {v}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checked_promotions = 0;
    for _ in 0..1000 {
        let len = rng.random_range(1..=20);
        let mut rel: Vec<f64> = (0..len).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect();
        if !rel.iter().any(|&r| r > 0.0) {
            rel[rng.random_range(0..len)] = 1.0;
        }
        let cutoff = rng.random_range(1..=len);
        let mut ideal = rel.clone();
        ideal.sort_by(|a, b| b.total_cmp(a));
        if ideal[..cutoff].iter().any(|&r| r > 0.0) {
            let v = ndcg(&ideal, cutoff).map_err(|e| e.to_string())?;
            ensure(v == 1.0, format!("ideal list {ideal:?} scored {v}"))?;
        }
        let v = ndcg(&rel, len).map_err(|e| e.to_string())?;
        ensure((0.0..=1.0).contains(&v), format!("ndcg {v} outside [0, 1] for {rel:?}"))?;
        // Promoting a relevant item above an adjacent irrelevant one never hurts.
        for i in 0..len - 1 {
            if rel[i] == 0.0 && rel[i + 1] > 0.0 {
                let mut promoted = rel.clone();
                promoted.swap(i, i + 1);
                let after = ndcg(&promoted, len).map_err(|e| e.to_string())?;
                ensure(after >= v, format!("promotion lowered ndcg for {rel:?} at {i}"))?;
                checked_promotions += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(5))?;
    Ok(format!(
        "ndcg([1,0,1],3) = {v:.5}; 1000 lists bounded, {checked_promotions} promotions monotone; {elapsed:.2?}"
    ))
}

/// A small catalog whose listings are embeddable in every modality.
fn toy_world() -> World {
    let spec = WorldSpec {
        n_queries: 5,
        n_listings_per_query: 40,
        n_sessions_per_query: 2000,
        live_listings: None,
        image_dim: 6,
        ..WorldSpec::default()
    };
    generate_world(&spec).expect("valid spec")
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let world = toy_world();
    let vocab = build_vocabulary(&world.catalog, 1).map_err(|e| e.to_string())?;
    let embedder = Embedder::new(&world.catalog, &vocab, Some(&world.store));
    let ids: Vec<&str> = world.catalog.iter().map(|l| l.listing_id.as_str()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 0..1000 {
        let modality = Modality::ALL[k % 3];
        let a = ids[rng.random_range(0..ids.len())];
        let b = ids[rng.random_range(0..ids.len())];
        let da = embedder.embed(a, modality).map_err(|e| e.to_string())?;
        let db = embedder.embed(b, modality).map_err(|e| e.to_string())?;
        let ab = pairwise_transform("q", &da, &db, Label::WellOrdered).map_err(|e| e.to_string())?;
        let ba = pairwise_transform("q", &db, &da, Label::WellOrdered).map_err(|e| e.to_string())?;
        let rev = pairwise_transform("q", &da, &db, Label::Reversed).map_err(|e| e.to_string())?;
        ensure(ab.x == ba.x.negated(), format!("diff({a},{b}) != -diff({b},{a})"))?;
        ensure(
            rev.x == ab.x.negated() && rev.y == Label::Reversed && ab.y == Label::WellOrdered,
            format!("reversed instance for ({a},{b}) is not the mirror image"),
        )?;
    }

    let spec = &world.spec;
    let sessions = generate_sessions(&world, spec).map_err(|e| e.to_string())?;
    let pairs = mine_preference_pairs(&sessions, DEFAULT_DWELL_THRESHOLD);
    ensure(pairs.len() >= 10_000, format!("only {} pairs mined", pairs.len()))?;
    let set = make_instances(&pairs[..10_000], &embedder, Modality::Text, 42);
    let n = set.instances.len() as f64;
    ensure(n == 10_000.0, format!("{} of 10000 pairs produced instances", n))?;
    let positives = set.instances.iter().filter(|i| i.y == Label::WellOrdered).count() as f64;
    let sigma = (n * 0.25).sqrt();
    let z = (positives - n / 2.0) / sigma;
    ensure(z.abs() < 4.0, format!("{positives} positive labels, z = {z:.2}"))?;

    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(10))?;
    Ok(format!(
        "1000 pairs antisymmetric; {positives} of 10000 labels +1 (z = {z:+.2}); {elapsed:.2?}"
    ))
}

fn dense_instance(x: Vec<f64>, y: Label) -> PairwiseInstance {
    PairwiseInstance {
        query: "q".into(),
        x: DiffVector {
            sparse: SparseVector::empty(0),
            dense: x,
        },
        y,
    }
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    // Separable set: labels from a fixed direction, points kept off the boundary.
    let truth = [0.6, -0.8];
    let mut instances = Vec::new();
    while instances.len() < 200 {
        let x = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let m: f64 = x[0] * truth[0] + x[1] * truth[1];
        if m.abs() < 0.1 {
            continue;
        }
        let y = if m > 0.0 { Label::WellOrdered } else { Label::Reversed };
        instances.push(dense_instance(x, y));
    }
    let config = TrainConfig {
        epochs: 5,
        seed: 3,
        ..TrainConfig::default()
    };
    let model = train_sgd(&instances, Modality::Image, &config).map_err(|e| e.to_string())?;
    let err = pairwise_error(&model.weights, &instances).map_err(|e| e.to_string())?;
    ensure(err == 0.0, format!("pairwise error {err} after 5 epochs"))?;

    // Gradient check on a mixed sparse/dense layout, away from hinge kinks.
    let layout = Layout {
        sparse_dim: 6,
        dense_dim: 4,
    };
    let dim = layout.logical_dim();
    let gen_instance = |rng: &mut ChaCha8Rng| {
        let entries: Vec<(usize, f64)> = (0..layout.sparse_dim)
            .filter_map(|i| rng.random_bool(0.5).then(|| (i, rng.random_range(-1.0..1.0))))
            .collect();
        PairwiseInstance {
            query: "q".into(),
            x: DiffVector {
                sparse: SparseVector::from_entries(layout.sparse_dim, entries).expect("valid entries"),
                dense: (0..layout.dense_dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            },
            y: if rng.random_bool(0.5) { Label::WellOrdered } else { Label::Reversed },
        }
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut points = 0;
    while points < 100 {
        let insts: Vec<PairwiseInstance> = (0..20).map(|_| gen_instance(&mut rng)).collect();
        let flat: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let w = LinearWeights::from_flat(layout, &flat);
        let lambda2 = rng.random_range(0.0..1.0);
        // Smooth point: every margin at least 10h away from the kink.
        let smooth = insts.iter().all(|i| {
            let m = i.y.sign() * w.dot_diff(&i.x).expect("layout");
            (1.0 - m).abs() > 1e-3
        });
        if !smooth {
            continue;
        }
        points += 1;
        let analytic = objective_gradient(&w, &insts, 0.0, lambda2).map_err(|e| e.to_string())?;
        for j in 0..dim {
            let mut plus = flat.clone();
            let mut minus = flat.clone();
            plus[j] += h;
            minus[j] -= h;
            let fp = objective(&LinearWeights::from_flat(layout, &plus), &insts, 0.0, lambda2)
                .map_err(|e| e.to_string())?;
            let fm = objective(&LinearWeights::from_flat(layout, &minus), &insts, 0.0, lambda2)
                .map_err(|e| e.to_string())?;
            let numeric = (fp - fm) / (2.0 * h);
            let rel = (numeric - analytic[j]).abs() / analytic[j].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    ensure(worst <= 1e-5, format!("worst relative gradient error {worst:.2e}"))?;

    // Heavy L1 clips every weight to exactly zero.
    let heavy = TrainConfig {
        lambda1: 1e3,
        ..config.clone()
    };
    let sparse_insts: Vec<PairwiseInstance> = (0..200).map(|_| gen_instance(&mut rng)).collect();
    let model = train_sgd(&sparse_insts, Modality::Multimodal, &heavy).map_err(|e| e.to_string())?;
    let nonzero = model.weights.to_flat().iter().filter(|&&v| v != 0.0).count();
    ensure(nonzero == 0, format!("{nonzero} non-zero weights under lambda1 = 1e3"))?;

    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(30))?;
    Ok(format!(
        "separable set error 0 in 5 epochs; worst gradient rel. error {worst:.1e} over 100 points; lambda1=1e3 gives all-zero weights; {elapsed:.2?}"
    ))
}

fn lift_world(image_signal: f64) -> WorldSpec {
    WorldSpec {
        n_queries: 20,
        n_listings_per_query: 200,
        n_sessions_per_query: 500,
        text_ambiguity: 0.6,
        image_signal,
        seed: 7,
        ..WorldSpec::default()
    }
}

fn run_world(spec: &WorldSpec) -> Result<(EvalReport, String), String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let files = write_world(spec, dir.path(), true).map_err(|e| e.to_string())?;
    let config = ExperimentConfig {
        catalog: files.catalog,
        embeddings: Some(files.embeddings),
        train_sessions: files.train_sessions,
        validation_sessions: files.validation_sessions,
        test_sessions: files.test_sessions,
        seed: 7,
        ..ExperimentConfig::default()
    };
    let out = run_experiment(&config).map_err(|e| e.to_string())?;
    let json = out.report.to_json().map_err(|e| e.to_string())?;
    Ok((out.report, json))
}

/// Macro-averaged test NDCG of the generative model's Bayes ranker per modality.
fn bayes_means(spec: &WorldSpec) -> Result<BTreeMap<Modality, f64>, String> {
    let world = generate_world(spec).map_err(|e| e.to_string())?;
    let sessions = generate_sessions(&world, spec).map_err(|e| e.to_string())?;
    let split = mmrank::synthlog::split_sessions(sessions, spec.train_fraction, spec.validation_fraction);
    let mut out = BTreeMap::new();
    for modality in [Modality::Text, Modality::Multimodal] {
        let mut per_query: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for s in &split.test {
            if let Some(v) = bayes_session_ndcg(&world, s, modality)? {
                per_query.entry(&s.query).or_default().push(v);
            }
        }
        let means: Vec<f64> = per_query.values().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect();
        out.insert(modality, means.iter().sum::<f64>() / means.len() as f64);
    }
    Ok(out)
}

fn bayes_session_ndcg(world: &World, s: &Session, modality: Modality) -> Result<Option<f64>, String> {
    let mut scored = Vec::new();
    for r in &s.presented {
        let odds = world
            .log_posterior_odds(&s.query, &r.listing_id, modality)
            .map_err(|e| e.to_string())?;
        scored.push((odds, r.listing_id.as_str(), relevance_of(r.interaction, DEFAULT_DWELL_THRESHOLD)));
    }
    if !scored.iter().any(|x| x.2 > 0.0) {
        return Ok(None);
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    let rel: Vec<f64> = scored.iter().map(|x| x.2).collect();
    ndcg(&rel, rel.len()).map(Some).map_err(|e| e.to_string())
}

fn lift_and_p(report: &EvalReport) -> Result<(f64, f64), String> {
    let lift = *report.lifts.get("multimodal").ok_or("no multimodal lift in report")?;
    let p = report
        .significance
        .get("multimodal")
        .ok_or("no multimodal significance test in report")?
        .p_value;
    Ok((lift, p))
}

fn criterion_4_and_7() -> (Check, Check) {
    let start = Instant::now();
    let signal = lift_world(2.0);
    let null = lift_world(0.0);

    let first = run_world(&signal);
    let c4 = (|| {
        let (report, _) = first.clone()?;
        let n_queries = report.per_query["multimodal"].len();
        ensure(n_queries == 20, format!("{n_queries} queries evaluated"))?;
        let (lift, p) = lift_and_p(&report)?;
        ensure(lift >= 5.0 && p < 0.01, format!("signal 2.0: lift {lift:+.2}% p = {p:.3e}"))?;

        let (null_report, _) = run_world(&null)?;
        let (null_lift, null_p) = lift_and_p(&null_report)?;
        ensure(
            null_lift.abs() < 2.0 && null_p > 0.05,
            format!("signal 0: lift {null_lift:+.2}% p = {null_p:.3}"),
        )?;

        // Upper-bound oracle: the Bayes ranker must admit the lift, gain nothing
        // from images when they carry no signal, and not be beaten by the learner.
        let bayes = bayes_means(&signal)?;
        let bayes_lift = 100.0 * (bayes[&Modality::Multimodal] - bayes[&Modality::Text]) / bayes[&Modality::Text];
        ensure(bayes_lift >= 5.0, format!("Bayes lift only {bayes_lift:+.2}%"))?;
        let learned_mm = report.modality_means["multimodal"];
        ensure(
            learned_mm <= bayes[&Modality::Multimodal] + 0.01,
            format!("learned MM {learned_mm:.4} beats Bayes {:.4}", bayes[&Modality::Multimodal]),
        )?;
        let bayes_null = bayes_means(&null)?;
        ensure(
            bayes_null[&Modality::Multimodal] == bayes_null[&Modality::Text],
            "Bayes rankers differ with uninformative images",
        )?;

        let elapsed = start.elapsed();
        within(elapsed, Duration::from_secs(600))?;
        Ok(format!(
            "MM vs text {lift:+.2}% (p = {p:.2e}); signal 0: {null_lift:+.2}% (p = {null_p:.3}); Bayes ranker text {:.4} / MM {:.4} ({bayes_lift:+.1}%), learned text {:.4} / MM {learned_mm:.4}; {elapsed:.1?}",
            bayes[&Modality::Text],
            bayes[&Modality::Multimodal],
            report.modality_means["text"],
        ))
    })();

    let c7 = (|| {
        let (_, a) = first?;
        let (_, b) = run_world(&signal)?;
        ensure(a == b, "EvalReport JSON differs between identical runs")?;
        Ok(format!("two runs produced identical {}-byte EvalReports", a.len()))
    })();
    (c4, c7)
}

fn criterion_5() -> Check {
    let start = Instant::now();
    let spec = WorldSpec {
        n_queries: 1,
        n_listings_per_query: 200,
        n_sessions_per_query: 10_000,
        position_bias: vec![1.0, 0.8, 0.6, 0.4],
        live_listings: None,
        seed: 5,
        ..WorldSpec::default()
    };
    let world = generate_world(&spec).map_err(|e| e.to_string())?;
    let traced = generate_sessions_traced(&world, &spec).map_err(|e| e.to_string())?;
    // [shown, preferred] for the relevant member placed upper / lower.
    let mut upper = [0.0f64; 2];
    let mut lower = [0.0f64; 2];
    for (session, trace) in &traced {
        let fp = trace.fairpairs.as_ref().ok_or("session without FairPairs trace")?;
        for &(a, b) in &fp.pairs {
            let rel = |pos: usize| world.truth.relevance(&session.query, &session.presented[pos].listing_id) == Some(1);
            let (rel_pos, irr_pos, bucket) = match (rel(a), rel(b)) {
                (true, false) => (a, b, &mut upper),
                (false, true) => (b, a, &mut lower),
                _ => continue,
            };
            let th = DEFAULT_DWELL_THRESHOLD;
            bucket[0] += 1.0;
            let preferred = relevance_of(session.presented[rel_pos].interaction, th) > 0.0
                && relevance_of(session.presented[irr_pos].interaction, th) == 0.0;
            if preferred {
                bucket[1] += 1.0;
            }
        }
    }
    let (pu, pl) = (upper[1] / upper[0], lower[1] / lower[0]);
    let pooled = (upper[1] + lower[1]) / (upper[0] + lower[0]);
    let sigma = (pooled * (1.0 - pooled) * (1.0 / upper[0] + 1.0 / lower[0])).sqrt();
    let z = (pu - pl) / sigma;
    ensure(z.abs() < 4.0, format!("upper {pu:.4} vs lower {pl:.4}, z = {z:.2}"))?;
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(60))?;
    Ok(format!(
        "relevant preferred when upper {pu:.4} (n={}), lower {pl:.4} (n={}), z = {z:+.2}; {elapsed:.2?}",
        upper[0], lower[0]
    ))
}

/// Two-sided exact p by enumerating every sign assignment of the midranks.
fn brute_force_p(diffs: &[f64]) -> (f64, f64) {
    let nz: Vec<f64> = diffs.iter().copied().filter(|d| *d != 0.0).collect();
    let n = nz.len();
    let mut ranks = vec![0.0; n];
    for i in 0..n {
        let less = nz.iter().filter(|d| d.abs() < nz[i].abs()).count() as f64;
        let equal = nz.iter().filter(|d| d.abs() == nz[i].abs()).count() as f64;
        ranks[i] = less + (equal + 1.0) / 2.0;
    }
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let total: f64 = ranks.iter().sum();
    let w = w_plus.min(total - w_plus);
    let mut at_most = 0u64;
    for mask in 0u32..(1 << n) {
        let t: f64 = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| ranks[i]).sum();
        if t <= w + 1e-9 {
            at_most += 1;
        }
    }
    ((2.0 * at_most as f64 / (1u64 << n) as f64).min(1.0), w)
}

fn criterion_6() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut checked = 0;
    for n in 1..=12usize {
        for k in 0..50 {
            // Every other vector draws from a small integer set to force ties.
            let diffs: Vec<f64> = (0..n)
                .map(|_| {
                    if k % 2 == 0 {
                        rng.random_range(-3i32..=3) as f64
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect();
            if diffs.iter().all(|d| *d == 0.0) {
                continue;
            }
            let paired: Vec<(f64, f64)> = diffs.iter().map(|d| (0.0, *d)).collect();
            let got = wilcoxon_signed_rank(&paired).map_err(|e| e.to_string())?;
            let (p, w) = brute_force_p(&diffs);
            ensure(
                (got.p_value - p).abs() <= 1e-12 && (got.statistic - w).abs() <= 1e-12,
                format!("n={n}: p {} vs brute force {p} for {diffs:?}", got.p_value),
            )?;
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    within(elapsed, Duration::from_secs(60))?;
    Ok(format!("{checked} vectors with n <= 12 match enumeration; {elapsed:.2?}"))
}

fn main() {
    let (c4, c7) = criterion_4_and_7();
    let results = [
        ("1 metric oracle suite", criterion_1()),
        ("2 pairwise transform suite", criterion_2()),
        ("3 optimizer suite", criterion_3()),
        ("4 synthetic multimodal lift", c4),
        ("5 FairPairs debiasing", criterion_5()),
        ("6 Wilcoxon exact mode", criterion_6()),
        ("7 determinism", c7),
    ];
    let mut failed = 0;
    for (name, result) in &results {
        match result {
            Ok(detail) => println!("PASS criterion {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
