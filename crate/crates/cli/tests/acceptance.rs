//! One PASS/FAIL line per headline criterion. Run with
//! `cargo test -p sf-lens-cli --test acceptance -- --nocapture`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use sf_lens_core::csf::{available_channels, compute_channel, mcd_channels, msr, pe, ChannelName};
use sf_lens_core::ingest::{generate_synthetic_bundle, InferenceBundle, SyntheticSpec};
use sf_lens_core::latent::{
    adjusted_rand_index, kmeans, reduce_pca, reduce_tsne, TsneParams, DEFAULT_CLUSTERS, PCA_DIMS,
};
use sf_lens_core::metrics::{aurc, default_studies, eaurc, evaluate, rc_curve, MetricReport, RunId};
use sf_lens_core::model::{residual, McdLogitStack};
use sf_lens_core::shift::{corrupt, CorruptionKind, CorruptionSpec, Image};
use sf_lens_core::{rng, Execution};

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bundle(spec: SyntheticSpec) -> InferenceBundle {
    generate_synthetic_bundle(&spec).expect("fixture generates")
}

fn scores(b: &InferenceBundle, name: &ChannelName) -> Vec<f64> {
    compute_channel(&b.runs()[0], name, Execution::Parallel).unwrap().scores
}

/// Risk at every prefix, recomputed from scratch: each record's rank is the
/// number of records ahead of it.
fn oracle_aurc(residuals: &[u8], conf: &[f64], ids: &[String]) -> f64 {
    let n = residuals.len();
    let rank: Vec<usize> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| conf[j] > conf[i] || (conf[j] == conf[i] && ids[j] < ids[i]))
                .count()
        })
        .collect();
    let mut total = 0.0;
    for j in 1..=n {
        let errors = (0..n).filter(|&i| rank[i] < j && residuals[i] == 1).count();
        total += errors as f64 / j as f64;
    }
    100.0 * total / n as f64
}

fn aurc_oracle() -> Outcome {
    let mut g = rng::stream(2024, &[]);
    let mut instances = Vec::with_capacity(1000);
    for _ in 0..1000 {
        let n = g.random_range(1..=1000usize);
        let levels = g.random_range(1..=n.min(50));
        let grid: Vec<f64> = (0..levels).map(|_| g.random::<f64>()).collect();
        let mut conf: Vec<f64> = (0..n).map(|_| g.random::<f64>()).collect();
        // Replace about half the scores with values from a small grid.
        for c in conf.iter_mut() {
            if g.random_bool(0.5) {
                *c = grid[g.random_range(0..levels)];
            }
        }
        let p = g.random::<f64>();
        let residuals: Vec<u8> = (0..n).map(|_| u8::from(g.random_bool(p))).collect();
        let mut ids: Vec<String> = (0..n).map(|i| format!("r{i:04}")).collect();
        ids.shuffle(&mut g);
        instances.push((residuals, conf, ids));
    }

    let start = Instant::now();
    let ours: Vec<f64> = instances
        .iter()
        .map(|(r, c, ids)| aurc(&rc_curve(r, c, ids).unwrap()))
        .collect();
    let elapsed = start.elapsed();

    let worst = instances
        .iter()
        .zip(&ours)
        .map(|((r, c, ids), a)| (oracle_aurc(r, c, ids) - a).abs())
        .fold(0.0, f64::max);
    check(
        worst <= 1e-9 && elapsed < Duration::from_secs(10),
        format!("max |diff| {worst:.2e}, {:.2}s for 1000 instances", elapsed.as_secs_f64()),
    )
}

fn worked_example() -> Outcome {
    let residuals = [0u8, 0, 1, 1];
    let ids = ["a", "b", "c", "d"];
    let fwd = rc_curve(&residuals, &[0.9, 0.8, 0.2, 0.1], &ids).unwrap();
    let rev = rc_curve(&residuals, &[0.1, 0.2, 0.8, 0.9], &ids).unwrap();
    let (a, e, r) = (aurc(&fwd), eaurc(&fwd), aurc(&rev));
    let shown = format!("{a:.4} / {e:.4} / {r:.4}");
    check(
        fwd.risk == [0.0, 0.0, 1.0 / 3.0, 0.5]
            && (a - 250.0 / 12.0).abs() < 1e-12
            && e.abs() < 1e-12
            && (r - 950.0 / 12.0).abs() < 1e-12
            && shown == "20.8333 / 0.0000 / 79.1667",
        format!("risks {:?}, aurc / e-aurc / reversed = {shown}", fwd.risk),
    )
}

fn binary_equivalence() -> Outcome {
    let mut checked = 0;
    for seed in 0..5 {
        for (t, sep) in [(1, 2.0), (1, 0.5), (10, 2.0), (10, 8.0)] {
            let b = bundle(SyntheticSpec {
                n: 600,
                k: 2,
                t,
                class_separation: sep,
                shift_offset: 2.0,
                seed,
                ..Default::default()
            });
            let run = &b.runs()[0];
            let res: Vec<u8> = run.records().iter().map(residual).collect();
            let ids: Vec<&str> = run.records().iter().map(|r| r.id.as_str()).collect();
            let mut pairs = vec![(ChannelName::Msr, ChannelName::Pe)];
            if t == 1 {
                pairs.push((ChannelName::McdMsr, ChannelName::McdPe));
            }
            for (x, y) in pairs {
                let cx = rc_curve(&res, &scores(&b, &x), &ids).unwrap();
                let cy = rc_curve(&res, &scores(&b, &y), &ids).unwrap();
                if cx != cy || aurc(&cx).to_bits() != aurc(&cy).to_bits() {
                    return Err(format!("{x} vs {y} differ (seed {seed}, t {t}, sep {sep})"));
                }
                checked += 1;
            }
        }
    }
    Ok(format!("{checked} channel pairs identical"))
}

fn mcd_degeneracy() -> Outcome {
    let mut worst = 0.0f64;
    let mut n = 0;
    for seed in 0..3 {
        for k in [2, 5, 10] {
            let b = bundle(SyntheticSpec {
                n: 500,
                k,
                t: 1,
                seed,
                ..Default::default()
            });
            for r in b.runs()[0].records() {
                let stored = r.mcd.clone().unwrap();
                let own = McdLogitStack::new(1, k, r.logits.values().to_vec()).unwrap();
                for stack in [stored, own] {
                    let z = stack.sample(0);
                    let s = mcd_channels(&stack);
                    worst = [s.mcd_msr - msr(z), s.mcd_pe - pe(z), s.mcd_ee - pe(z)]
                        .iter()
                        .fold(worst, |w, d| w.max(d.abs()));
                    n += 1;
                }
            }
        }
    }
    check(worst <= 1e-12, format!("max |diff| {worst:.2e} over {n} single-sample stacks"))
}

fn jensen() -> Outcome {
    let (mut records, mut equal) = (0, 0);
    for seed in 0..3 {
        for (k, t) in [(2, 1), (2, 10), (5, 4), (10, 20)] {
            let b = bundle(SyntheticSpec {
                n: 500,
                k,
                t,
                seed,
                corrupted: 5,
                shift_offset: 3.0,
                ..Default::default()
            });
            for r in b.runs()[0].records() {
                let stack = r.mcd.as_ref().unwrap();
                let s = mcd_channels(stack);
                let identical = stack.samples().all(|x| x == stack.sample(0));
                if s.mcd_ee < s.mcd_pe || (s.mcd_ee == s.mcd_pe) != identical {
                    return Err(format!(
                        "record {}: ee {} pe {} identical {identical}",
                        r.id, s.mcd_ee, s.mcd_pe
                    ));
                }
                records += 1;
                equal += usize::from(identical);
            }
        }
    }
    Ok(format!("{records} records, {equal} with identical samples and zero gap"))
}

fn row(report: &MetricReport, study: &str, channel: &ChannelName) -> f64 {
    report.find(study, channel, RunId::Index(0)).unwrap().aurc
}

fn discrimination() -> Outcome {
    let random = ChannelName::External("random".into());
    let channels = [ChannelName::Msr, random.clone()];
    let mut gaps = Vec::new();
    let mut detail = Vec::new();
    for seed in 0..3 {
        let b = bundle(SyntheticSpec {
            n: 2000,
            class_separation: 8.0,
            seed,
            ..Default::default()
        });
        let report = evaluate(&b, &default_studies(&b), &channels, Execution::Parallel).unwrap();
        let (m, r) = (row(&report, "iid", &ChannelName::Msr), row(&report, "iid", &random));
        detail.push(format!("seed {seed}: msr {m:.4} random {r:.4}"));
        gaps.push(r - m);
    }
    let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
    check(mean >= 5.0, format!("mean gap {mean:.4} points ({})", detail.join("; ")))
}

fn shift_degradation() -> Outcome {
    let b = bundle(SyntheticSpec {
        n: 2000,
        class_separation: 8.0,
        shift_offset: 4.0,
        ..Default::default()
    });
    let channels = available_channels(&b.runs()[0]);
    let report = evaluate(&b, &default_studies(&b), &channels, Execution::Parallel).unwrap();
    let mut detail = Vec::new();
    let mut ok = true;
    for c in &channels {
        let (iid, target) = (row(&report, "iid", c), row(&report, "target", c));
        ok &= target > iid;
        detail.push(format!("{c} {iid:.3}->{target:.3}"));
    }
    check(ok && channels.len() == 7, detail.join(", "))
}

fn spec(kind: CorruptionKind, level: u8) -> CorruptionSpec {
    CorruptionSpec::new(kind, level, 7).unwrap()
}

fn corruption_statistics() -> Outcome {
    let grey = Image::filled(64, 64, 1, 0.5);
    let n = (64 * 64) as f64;
    let mut notes = Vec::new();
    for level in 1..=5 {
        let sigma = CorruptionKind::GaussianNoise.parameter(level).unwrap();
        let out = corrupt(&grey, &spec(CorruptionKind::GaussianNoise, level), "g").unwrap();
        let mean = out.mean();
        let var = out.data.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let bound = 3.0 * sigma * sigma * (2.0 / (n - 1.0)).sqrt();
        if (var - sigma * sigma).abs() > bound {
            return Err(format!("noise level {level}: variance {var:.6} vs {:.6} ± {bound:.6}", sigma * sigma));
        }
    }
    notes.push("noise variance within 3σ at all levels".to_string());

    for kind in [CorruptionKind::BrightnessUp, CorruptionKind::BrightnessDown] {
        for level in 1..=5 {
            let beta = kind.parameter(level).unwrap();
            let out = corrupt(&grey, &spec(kind, level), "b").unwrap();
            let worst = out
                .data
                .iter()
                .map(|&v| (f64::from(v) - (0.5 + beta)).abs())
                .fold(0.0, f64::max);
            if worst > 1e-6 {
                return Err(format!("{kind} level {level}: off by {worst:.2e}"));
            }
        }
    }
    notes.push("brightness shift exact to 1e-6".to_string());

    let mut g = rng::stream(99, &[]);
    let noise = Image::new(48, 48, 3, (0..48 * 48 * 3).map(|_| g.random::<f32>()).collect());
    let blob = Image::from_fn(64, 64, 1, |y, x, _| {
        let (dy, dx) = (y as f32 - 32.0, x as f32 - 21.0);
        0.1 + 0.8 * (-(dy * dy + dx * dx) / 120.0).exp()
    });
    for img in [&noise, &blob] {
        for kind in CorruptionKind::ALL {
            let change: Vec<f64> = (1..=5)
                .map(|l| corrupt(img, &spec(kind, l), "m").unwrap().mean_abs_diff(img))
                .collect();
            if !change.windows(2).all(|w| w[0] <= w[1]) {
                return Err(format!("{kind} not monotone: {change:?}"));
            }
        }
    }
    notes.push("severity monotone for every kind".to_string());
    Ok(notes.join(", "))
}

fn blobs(per: usize, d: usize, sep: f64, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut g = rng::stream(seed, &[]);
    let mut data = Vec::with_capacity(3 * per * d);
    let mut labels = Vec::with_capacity(3 * per);
    for i in 0..3 * per {
        labels.push(i % 3);
        for j in 0..d {
            let center = if j == i % 3 { sep } else { 0.0 };
            data.push(center + g.sample::<f64, _>(StandardNormal));
        }
    }
    (data, labels)
}

fn embedding_pipeline() -> Outcome {
    let (data, truth) = blobs(100, 50, 20.0, 3);
    let params = TsneParams::default();
    let run = |exec: Execution| {
        let pca = reduce_pca(&data, 300, 50, PCA_DIMS, exec).unwrap();
        let out = reduce_tsne(&pca.projected, pca.dims, &params, exec).unwrap();
        let labels = kmeans(&out.coords, 3, params.seed, exec).labels;
        (out.coords, labels)
    };
    let start = Instant::now();
    let (coords, labels) = run(Execution::Parallel);
    let elapsed = start.elapsed();
    let ari = adjusted_rand_index(&labels, &truth);

    let pool = |threads| rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
    let same = [
        run(Execution::Parallel),
        run(Execution::Sequential),
        pool(1).install(|| run(Execution::Parallel)),
        pool(4).install(|| run(Execution::Parallel)),
    ]
    .iter()
    .all(|(c, l)| *c == coords && *l == labels);
    check(
        ari >= 0.9 && same && elapsed < Duration::from_secs(60),
        format!("ari {ari:.4}, identical across runs/modes/threads {same}, {:.1}s", elapsed.as_secs_f64()),
    )
}

fn kmeans_monotone() -> Outcome {
    let mut g = rng::stream(77, &[]);
    let mut iterations = 0;
    for case in 0..100 {
        let n = g.random_range(10..400usize);
        let k = g.random_range(1..=12usize).min(n);
        let spread = g.random_range(0.5..5.0);
        let points: Vec<[f64; 3]> = (0..n)
            .map(|_| [0; 3].map(|_| spread * g.sample::<f64, _>(StandardNormal) + g.random_range(0..4) as f64))
            .collect();
        let km = kmeans(&points, k, case, Execution::Parallel);
        if let Some(w) = km.wcss.windows(2).find(|w| w[1] > w[0]) {
            return Err(format!("case {case}: wcss rose {} -> {}", w[0], w[1]));
        }
        iterations += km.wcss.len();
    }
    let points: Vec<[f64; 3]> = (0..200).map(|i| [i as f64, (i * 7 % 13) as f64, 0.0]).collect();
    let default_k = kmeans(&points, DEFAULT_CLUSTERS, 0, Execution::Parallel).centers.len();
    check(
        DEFAULT_CLUSTERS == 9 && default_k == 9,
        format!("100 instances, {iterations} assignment steps non-increasing; default k {default_k}"),
    )
}

fn sf_lens(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sf-lens"))
        .args(args)
        .env_remove("SF_LENS_BUNDLE_ROOT")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let path = |p: &Path| p.to_str().unwrap().to_string();
    let (b, outcomes) = (path(root), path(&root.join("outcomes.csv")));
    let start = Instant::now();
    sf_lens(&["synth", "--n", "2000", "--separation", "4", "--corrupted", "20", "--out", &b])?;
    sf_lens(&["split", "--preset", "mskcc-acq", "--bundle", &b])?;
    let report = sf_lens(&["evaluate", "--bundle", &b, "--outcomes", &outcomes])?;
    sf_lens(&["embed", "--bundle", &b])?;
    let failures = sf_lens(&["failures", "--bundle", &b, "--top", "10"])?;
    let elapsed = start.elapsed();

    let text = std::fs::read_to_string(root.join("outcomes.csv")).map_err(|e| e.to_string())?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().unwrap().clone();
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let get = |name: &str| rec[col(name)].parse::<usize>().unwrap();
        if get("tp") + get("fp") + get("tn") + get("fn") != get("n") {
            return Err(format!("counts do not partition n: {rec:?}"));
        }
        rows += 1;
    }
    check(
        rows > 0 && report.lines().count() > 1 && failures.lines().count() > 1 && elapsed < Duration::from_secs(300),
        format!("{rows} outcome rows partition n, {:.1}s", elapsed.as_secs_f64()),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("aurc oracle equivalence", aurc_oracle),
        ("worked-example goldens", worked_example),
        ("k=2 ranking equivalence", binary_equivalence),
        ("mcd degeneracy at t=1", mcd_degeneracy),
        ("jensen property", jensen),
        ("csf discrimination on fixture", discrimination),
        ("shift degradation", shift_degradation),
        ("corruption statistics", corruption_statistics),
        ("embedding pipeline", embedding_pipeline),
        ("k-means", kmeans_monotone),
        ("end-to-end cli", end_to_end),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                println!("FAIL {name}: {detail}");
                failed.push(name);
            }
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
