//! Acceptance criteria 1-9. Prints one line per criterion and exits non-zero
//! if any criterion fails. Criterion 9 runs only when `BAME_DATASET_CSV`
//! points at a dataset CSV.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail the check

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bame_core::demographics::{classify_origin, IntersectionKey, MappingTable};
use bame_core::extraction::rule_based_extract;
use bame_core::metrics::{
    dpr, ngram_diversity, representation_summary, tally_batch, target_distribution, tvd, Axis, Distribution,
};
use bame_core::pipeline::{Method, DEFAULT_OCCUPATIONS};
use bame_core::report;
use bame_core::stats::{proportion_ci, wilcoxon_signed_rank, Alternative, TestMethod};

type Criterion = (&'static str, fn() -> Verdict);

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Verdict::Fail(format!($($msg)+));
        }
    };
}

fn c1_tvd_fixture() -> Verdict {
    let observed = Distribution::new(Axis::Gender, vec![0.515, 0.485]).unwrap();
    let target = target_distribution(Axis::Gender);
    let start = Instant::now();
    let d = tvd(&observed, &target).unwrap();
    let elapsed = start.elapsed();
    ensure!((d - 0.015).abs() <= 1e-12, "tvd = {d}, want 0.015 within 1e-12");
    ensure!(elapsed < Duration::from_millis(1), "took {elapsed:?}, want < 1 ms");
    Verdict::Pass(format!("tvd = {d:.15} in {elapsed:?}"))
}

/// Signed-rank tail counts by direct enumeration, with midranks from
/// pairwise comparison.
fn brute_force_wilcoxon(d: &[f64], alternative: Alternative) -> (f64, f64) {
    let x: Vec<f64> = d.iter().copied().filter(|v| *v != 0.0).collect();
    let n = x.len();
    // doubled midrank = 2 * #smaller + #equal (self included) + 1
    let rank2: Vec<u64> = x
        .iter()
        .map(|a| {
            let smaller = x.iter().filter(|b| b.abs() < a.abs()).count() as u64;
            let equal = x.iter().filter(|b| b.abs() == a.abs()).count() as u64;
            2 * smaller + equal + 1
        })
        .collect();
    let observed: u64 = (0..n).filter(|&i| x[i] > 0.0).map(|i| rank2[i]).sum();
    let (mut ge, mut le) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let s: u64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| rank2[i]).sum();
        ge += (s >= observed) as u64;
        le += (s <= observed) as u64;
    }
    let total = (1u64 << n) as f64;
    let p = match alternative {
        Alternative::Greater => ge as f64 / total,
        Alternative::TwoSided => (2.0 * ge.min(le) as f64 / total).min(1.0),
    };
    (observed as f64 / 2.0, p)
}

fn c2_wilcoxon() -> Verdict {
    let diffs = [0.12, 0.45, 0.08, 0.91, 0.33, 0.27, 0.6, 0.05];
    let r = wilcoxon_signed_rank(&diffs, Alternative::Greater).unwrap();
    ensure!(r.statistic == 36.0, "W = {}, want 36", r.statistic);
    ensure!((r.p_value - 0.003906).abs() <= 5e-4, "p = {}, want 0.003906 within 5e-4", r.p_value);
    ensure!(r.method == TestMethod::Exact, "method {:?}", r.method);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    while checked < 500 {
        let n = rng.gen_range(1..=12);
        // half-integer grid so ties and zeros are common
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(-6i32..=6) as f64 * 0.5).collect();
        if d.iter().all(|v| *v == 0.0) {
            continue;
        }
        for alt in [Alternative::Greater, Alternative::TwoSided] {
            let got = wilcoxon_signed_rank(&d, alt).unwrap();
            let (w, p) = brute_force_wilcoxon(&d, alt);
            ensure!(
                got.statistic == w && got.p_value == p,
                "{d:?} {alt:?}: got W={} p={}, oracle W={w} p={p}",
                got.statistic,
                got.p_value
            );
        }
        checked += 1;
    }
    Verdict::Pass(format!("W = 36, p = {:.6}; {checked} random vectors match enumeration", r.p_value))
}

fn c3_dpr() -> Verdict {
    for axis in [Axis::Gender, Axis::Ethnicity, Axis::Intersection] {
        let t = target_distribution(axis);
        let r = dpr(&t, &t).unwrap();
        ensure!(r.ratios().iter().all(|x| *x == 1.0), "{axis}: identity ratios {:?}", r.ratios());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let target = target_distribution(Axis::Intersection);
    let cells = IntersectionKey::all();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let labels: Vec<_> = (0..rng.gen_range(1..=48))
            .map(|_| {
                let k = cells[rng.gen_range(0..8)];
                common::label(k.gender(), k.ethnicity())
            })
            .collect();
        let base = tally_batch(&labels, "x");
        let base_dpr = dpr(&Distribution::from_counts(Axis::Intersection, &base.intersection).unwrap(), &target).unwrap();
        for k in [2usize, 7, 100] {
            let scaled: Vec<_> = labels.iter().flat_map(|l| std::iter::repeat_n(l.clone(), k)).collect();
            let t = tally_batch(&scaled, "x");
            let r = dpr(&Distribution::from_counts(Axis::Intersection, &t.intersection).unwrap(), &target).unwrap();
            for (a, b) in base_dpr.ratios().iter().zip(r.ratios()) {
                worst = worst.max((a - b).abs());
                ensure!((a - b).abs() <= 1e-12, "k = {k}: ratio {a} became {b}");
            }
        }
    }
    Verdict::Pass(format!("identity exact; max scaling drift {worst:e}"))
}

fn c4_representation() -> Verdict {
    let mut tallies = Vec::new();
    for (i, (f, m)) in std::iter::repeat_n((12, 12), 21).chain([(13, 11); 3]).chain([(11, 13)]).enumerate() {
        tallies.push(tally_batch(&common::gender_labels(f, m), DEFAULT_OCCUPATIONS[i]));
    }
    let s = representation_summary(&tallies).unwrap();
    let got = (s.equal_pct, s.over_female_pct, s.over_male_pct);
    ensure!(got == (84.0, 12.0, 4.0), "got {got:?}, want (84.0, 12.0, 4.0)");
    Verdict::Pass("84.0 / 12.0 / 4.0".into())
}

fn c5_extraction() -> Verdict {
    let stories = common::story_fixtures();
    let origins = common::classification_fixtures();
    let table = MappingTable::default_table();
    let mut failures = Vec::new();
    for (story, g, e) in &stories {
        let r = rule_based_extract(story);
        if (r.resolved.gender, r.resolved.ethnicity) != (*g, *e) {
            failures.push(format!("{:.40}... -> {:?}/{:?}", story, r.resolved.gender, r.resolved.ethnicity));
        }
    }
    for (origin, e) in &origins {
        let got = classify_origin(origin, &table);
        if got != *e {
            failures.push(format!("{origin} -> {got:?}, want {e:?}"));
        }
    }
    ensure!(failures.is_empty(), "{}", failures.join("; "));
    Verdict::Pass(format!("{} stories and {} origin phrases, 100%", stories.len(), origins.len()))
}

fn c6_deterministic() -> Verdict {
    let occs = ["Sales", "Healthcare", "Legal"];
    let start = Instant::now();
    let mut snaps = Vec::new();
    for _ in 0..2 {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = common::mock_config(bame_core::backend::MockScript::seeded(42), &occs, &Method::ALL);
        let (records, rep, dir) = common::run_into(tmp.path(), "det", cfg);
        ensure!(records.len() == 9, "{} records, want 9", records.len());
        ensure!(records.iter().all(|r| r.is_ok()), "a record failed");
        ensure!(rep.groups.len() == 3 && rep.deltas.len() == 1, "incomplete report");
        ensure!(rep.deltas[0].wilcoxon.is_some(), "delta test missing: {:?}", rep.deltas[0].reason);
        snaps.push(common::snapshot(&dir));
    }
    let elapsed = start.elapsed();
    let (a, b) = (&snaps[0], &snaps[1]);
    ensure!(a.keys().eq(b.keys()), "file sets differ");
    let differing: Vec<&String> = a.keys().filter(|k| a[*k] != b[*k]).collect();
    ensure!(differing.is_empty(), "files differ: {differing:?}");
    ensure!(elapsed < Duration::from_secs(10), "two runs took {elapsed:?}");
    Verdict::Pass(format!("9 records, {} files identical across runs, {elapsed:.2?} for both", a.len()))
}

fn c7_mitigation() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = common::mock_config(common::skewed_script(7), &DEFAULT_OCCUPATIONS, &Method::ALL);
    let (_, rep, _) = common::run_into(tmp.path(), "skew", cfg);
    let vanilla = rep.group("mock-llm", Method::Vanilla).unwrap();
    let bame = rep.group("mock-llm", Method::Bame).unwrap();
    ensure!(vanilla.occupations.len() == 25 && bame.occupations.len() == 25, "missing occupations");
    for v in &vanilla.occupations {
        let b = bame.occupations.iter().find(|b| b.occupation == v.occupation).unwrap();
        let (vt, bt) = (v.ethnicity_tvd.unwrap(), b.ethnicity_tvd.unwrap());
        ensure!(bt < vt, "{}: bame tvd {bt} not below vanilla {vt}", v.occupation);
    }
    let d = &rep.deltas[0];
    let delta = d.delta.as_ref().unwrap();
    ensure!(delta.values().iter().all(|x| *x >= 0.0), "negative delta: {:?}", delta.values());
    let w = d.wilcoxon.as_ref().unwrap();
    ensure!(w.p_value < 0.05, "p = {}", w.p_value);
    Verdict::Pass(format!(
        "tvd mean {:.3} -> {:.3}; min delta {:.3}; W = {}, p = {:.6}",
        vanilla.ethnicity_tvd_mean.unwrap(),
        bame.ethnicity_tvd_mean.unwrap(),
        delta.values().iter().cloned().fold(f64::INFINITY, f64::min),
        w.statistic,
        w.p_value
    ))
}

fn random_distribution(rng: &mut ChaCha8Rng, axis: Axis) -> Distribution {
    loop {
        let w: Vec<f64> = (0..axis.len())
            .map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen::<f64>() })
            .collect();
        let s: f64 = w.iter().sum();
        if s > 0.0 {
            return Distribution::new(axis, w.iter().map(|x| x / s).collect()).unwrap();
        }
    }
}

fn c8_properties() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let axes = [Axis::Gender, Axis::Ethnicity, Axis::Intersection];
    for _ in 0..1000 {
        let axis = axes[rng.gen_range(0..3)];
        let (p, q, r) = (random_distribution(&mut rng, axis), random_distribution(&mut rng, axis), random_distribution(&mut rng, axis));
        let pq = tvd(&p, &q).unwrap();
        ensure!((0.0..=1.0).contains(&pq), "tvd out of range: {pq}");
        ensure!(pq == tvd(&q, &p).unwrap(), "tvd not symmetric");
        ensure!(tvd(&p, &p).unwrap() == 0.0, "tvd(p, p) != 0");
        ensure!(tvd(&p, &r).unwrap() <= pq + tvd(&q, &r).unwrap() + 1e-12, "triangle inequality");
    }
    let vocab = ["the", "chef", "baked", "bread", "a", "nurse", "smiled", "and", "we", "talked"];
    for _ in 0..1000 {
        let mut texts: Vec<String> = (0..rng.gen_range(1..6))
            .map(|_| (0..rng.gen_range(3..20)).map(|_| *vocab.choose(&mut rng).unwrap()).collect::<Vec<_>>().join(" "))
            .collect();
        for n in 1..=3 {
            let d = ngram_diversity(&texts, n).unwrap();
            ensure!(d > 0.0 && d <= 1.0, "diversity {d} outside (0, 1]");
        }
        let before: Vec<f64> = (1..=3).map(|n| ngram_diversity(&texts, n).unwrap()).collect();
        texts.shuffle(&mut rng);
        let after: Vec<f64> = (1..=3).map(|n| ngram_diversity(&texts, n).unwrap()).collect();
        ensure!(before == after, "diversity changed under permutation");
    }
    let mut widest = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=5000u64);
        let k = rng.gen_range(0..=n);
        let ci = proportion_ci(k, n, 0.95).unwrap();
        ensure!(0.0 <= ci.lower && ci.lower <= ci.point && ci.point <= ci.upper && ci.upper <= 1.0, "ordering {ci:?}");
        if n >= 600 {
            widest = widest.max(ci.half_width());
            ensure!(ci.half_width() <= 0.04, "half-width {} at n = {n}", ci.half_width());
        }
    }
    let worst = proportion_ci(300, 600, 0.95).unwrap().half_width();
    ensure!(worst <= 0.04, "half-width {worst} at 300/600");
    Verdict::Pass(format!("1000 cases per property; widest half-width at n >= 600: {:.4}", widest.max(worst)))
}

fn is_gpt4(model: &str) -> bool {
    let m = model.to_lowercase().replace([' ', '_'], "-");
    m.contains("gpt-4") || m.contains("gpt4")
}

fn c9_dataset() -> Verdict {
    let Ok(path) = std::env::var("BAME_DATASET_CSV") else {
        return Verdict::Skip("BAME_DATASET_CSV not set; dataset unavailable".into());
    };
    let tmp = tempfile::tempdir().unwrap();
    let dir = match report::ingest_dataset(std::path::Path::new(&path), tmp.path(), Some("dataset")) {
        Ok(d) => d,
        Err(e) => return Verdict::Fail(format!("ingest failed: {e}")),
    };
    let rep = report::analyze_run(&dir, Default::default()).unwrap();
    let find = |m: Method| rep.groups.iter().find(|g| is_gpt4(&g.model) && g.method == m);
    let (Some(v), Some(b)) = (find(Method::Vanilla), find(Method::Bame)) else {
        return Verdict::Fail("dataset has no GPT-4 vanilla and bame groups".into());
    };
    let (vt, bt) = (v.ethnicity_tvd_mean.unwrap_or(f64::NAN), b.ethnicity_tvd_mean.unwrap_or(f64::NAN));
    ensure!((vt - 0.235).abs() <= 0.01, "GPT-4 vanilla tvd {vt}, want 0.235 +- 0.01");
    ensure!((bt - 0.203).abs() <= 0.01, "GPT-4 bame tvd {bt}, want 0.203 +- 0.01");
    // mean per-story diversity over the vanilla and bame stories
    let records = bame_core::pipeline::RunStore::open(&dir).load_records().unwrap();
    let stories: Vec<&String> = records
        .iter()
        .filter(|r| matches!(r.method, Method::Vanilla | Method::Bame))
        .flat_map(|r| r.stories.iter())
        .collect();
    let mut got = Vec::new();
    for (n, want) in [(1, 0.95), (2, 0.99), (3, 1.0)] {
        let scores: Vec<f64> = stories.iter().filter_map(|s| ngram_diversity(&[s.as_str()], n).ok()).collect();
        let mean = scores.iter().sum::<f64>() / scores.len().max(1) as f64;
        ensure!((mean - want).abs() <= 0.02, "{n}-gram diversity {mean:.4}, want {want} +- 0.02");
        got.push(mean);
    }
    Verdict::Pass(format!("tvd {vt:.3} -> {bt:.3}; diversity {:.3}/{:.3}/{:.3}", got[0], got[1], got[2]))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("TVD fixture", c1_tvd_fixture),
        ("Wilcoxon fixture and enumeration oracle", c2_wilcoxon),
        ("DPR identity and scaling", c3_dpr),
        ("representation summary fixture", c4_representation),
        ("extraction fixtures", c5_extraction),
        ("deterministic end-to-end", c6_deterministic),
        ("mitigation inequality", c7_mitigation),
        ("metric property suite", c8_properties),
        ("dataset ingestion", c9_dataset),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let verdict = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::Fail(format!("panicked: {msg}"))
        });
        let (tag, detail) = match verdict {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("criterion {} {tag} {name}: {detail}", i + 1);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
