//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criterion 9 reads a NAS-Bench-101 record file from `NAR_NB101_RECORDS`
//! and is skipped when the variable is unset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use nar_core::encoding::{encode, ArchitectureRecord, EncodingLayout, Family};
use nar_core::model::gradcheck::finite_difference_check;
use nar_core::numcore::Tensor;
use nar_core::tiers::{
    build_histogram, kl_divergence, select_distribution, Selection, SelectionRule, TierBucket,
    KL_SMOOTHING,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

type Check = std::result::Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn nar(dir: &Path, args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_nar"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| format!("spawning nar: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "nar {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(())
}

fn json(path: &Path) -> std::result::Result<Value, String> {
    let text = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    serde_json::from_slice(&text).map_err(|e| format!("{}: {e}", path.display()))
}

fn num(v: &Value, key: &str) -> std::result::Result<f64, String> {
    v[key].as_f64().ok_or_else(|| format!("missing number `{key}`"))
}

fn gradients() -> Check {
    let start = Instant::now();
    let r = finite_difference_check(17, 4).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    ensure(r.worst < 1e-4, format!("relative error {:.2e} at {}", r.worst, r.worst_param))?;
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!(
        "{} tensors, {} entries, max relative error {:.2e}, {secs:.1}s",
        r.tensors_checked, r.entries_checked, r.worst
    ))
}

fn running_mean() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (n, d) = (rng.gen_range(1..4), rng.gen_range(1..5));
        let mut bucket = TierBucket::new(0, n, d);
        let mut stored: Vec<Tensor> = Vec::new();
        for _ in 0..rng.gen_range(1..10) {
            let batch: Vec<Tensor> = (0..rng.gen_range(1..6))
                .map(|_| Tensor::from_fn(&[n, d], |_| rng.gen_range(-20.0..20.0)))
                .collect();
            stored.extend(batch.iter().cloned());
            bucket.update_embedding(&batch).map_err(|e| e.to_string())?;
        }
        for (i, e) in bucket.embedding.data().iter().enumerate() {
            let mean = stored.iter().map(|t| t.data()[i]).sum::<f64>() / stored.len() as f64;
            worst = worst.max((e - mean).abs() / mean.abs().max(1e-300));
        }
    }
    ensure(worst < 1e-10, format!("relative error {worst:.2e}"))?;
    Ok(format!("1000 sequences, max relative error {worst:.2e}"))
}

fn histograms() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    let h = build_histogram(&[10.0, 20.0, 30.0, 40.0], 10, 3).map_err(|e| e.to_string())?;
    let want = [0.2, 0.1, 0.1];
    ensure(
        h.masses.len() == 3 && h.masses.iter().zip(want).all(|(&m, w)| close(m, w)),
        format!("worked example masses {:?}", h.masses),
    )?;
    ensure(h.delta == 10, format!("worked example step {}", h.delta))?;
    // (25 - 0) / 3 rounds up to 9
    let h = build_histogram(&[0.0, 25.0], 4, 3).map_err(|e| e.to_string())?;
    ensure(h.delta == 9, format!("ceiling step {}", h.delta))?;
    let h = build_histogram(&[7.0, 7.0, 7.0], 6, 5).map_err(|e| e.to_string())?;
    ensure(
        h.masses.len() == 1 && close(h.masses[0], 0.5),
        format!("degenerate masses {:?}", h.masses),
    )?;
    let p = build_histogram(&[0.0, 0.0, 0.0, 0.0, 0.0, 2.0, 2.0, 2.0, 2.0, 2.0], 10, 2)
        .map_err(|e| e.to_string())?;
    ensure(kl_divergence(&p, &p) == 0.0, "KL(p, p) is not zero")?;
    let mut skewed = vec![0.0; 9];
    skewed.push(2.0);
    let q = build_histogram(&skewed, 10, 2).map_err(|e| e.to_string())?;
    let smooth = |a: f64| (a + KL_SMOOTHING) / (1.0 + 2.0 * KL_SMOOTHING);
    let exact: f64 = [(0.5, 0.9), (0.5, 0.1)]
        .iter()
        .map(|&(a, b)| smooth(a) * (smooth(a) / smooth(b)).ln())
        .sum();
    let d = kl_divergence(&p, &q);
    ensure((d - exact).abs() < 1e-9, format!("KL {d} vs {exact}"))?;
    ensure((d - 0.5108).abs() < 1e-4, format!("KL {d}"))?;
    Ok(format!("masses, step, single bin and KL = {d:.6} nats"))
}

fn selection_branches() -> Check {
    let rule = SelectionRule::default();
    ensure(
        (rule.theta, rule.zeta, rule.beta) == (0.1, 2.5, 4),
        "default constants changed",
    )?;
    let k = 256;
    let hist = |base: f64, n: usize| {
        let v: Vec<f64> = (0..n).map(|i| base + i as f64).collect();
        build_histogram(&v, k, 10).expect("non-empty")
    };
    let (tiny, top, far) = (hist(0.0, 5), hist(0.0, 50), hist(1000.0, 50));
    let sel = |hs: [&_; 5]| select_distribution(&hs.map(Some), k, &rule).map_err(|e| e.to_string());
    let sparse = sel([&tiny, &far, &far, &far, &far])?;
    let overlapping = sel([&top, &far, &far, &top, &far])?;
    let distinct = sel([&top, &top, &top, &far, &far])?;
    ensure(
        matches!(sparse, Selection::IntervalOnly { .. }),
        "sparse tier 1 did not fall back to its interval",
    )?;
    ensure(
        matches!(overlapping, Selection::IntervalOnly { .. }),
        "overlapping tiers did not fall back to the interval",
    )?;
    ensure(
        matches!(distinct, Selection::Full(_)),
        "distinct tier 1 did not use its histogram",
    )?;
    Ok("sparse, overlapping and distinct cases".into())
}

fn golden_files() -> Check {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/encoding");
    let manifest = json(&dir.join("manifest.json"))?;
    let entries = manifest.as_array().ok_or("manifest is not a list")?;
    let mut shapes = Vec::new();
    for e in entries {
        let record: ArchitectureRecord =
            serde_json::from_value(e["record"].clone()).map_err(|e| e.to_string())?;
        let layout = match record.family {
            Family::Dag7 => EncodingLayout::dag7(),
            Family::Fixed4 => EncodingLayout::fixed4(),
            Family::Synth => EncodingLayout::synth(6, 3),
        };
        let t = encode(&record, &layout).map_err(|e| e.to_string())?;
        let blob = fs::read(dir.join(e["blob"].as_str().ok_or("missing blob")?))
            .map_err(|e| e.to_string())?;
        ensure(t.to_le_bytes() == blob, format!("{} bytes differ", record.id))?;
        shapes.push((t.channels, t.resolution));
    }
    ensure(
        shapes.contains(&(19, 7)) && shapes.contains(&(31, 4)),
        format!("fixture shapes {shapes:?}"),
    )?;
    Ok(format!("{} fixtures byte-identical", entries.len()))
}

/// synth, train, eval on the held-out split, five-seed statistics search.
fn pipeline(dir: &Path) -> std::result::Result<(), String> {
    fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    nar(dir, &["synth", "--profile", "synth", "--seed", "0", "--out", "run"])?;
    let records = ["--records", "run/space.jsonl"];
    nar(dir, &[&["train", "--seed", "0", "--out", "run"][..], &records].concat())?;
    nar(
        dir,
        &["eval", "--records", "run/heldout.jsonl", "--checkpoint", "run/model.ckpt", "--out", "run/eval"],
    )?;
    let search = ["search", "--mode", "statistics", "--repeats", "5", "--seed", "0", "--out", "run"];
    nar(dir, &[&search[..], &records].concat())
}

struct Run {
    dir: PathBuf,
    seconds: f64,
}

fn end_to_end(run: &Run) -> Check {
    let summary = json(&run.dir.join("run/summary.json"))?;
    let runs = summary["runs"].as_array().ok_or("summary has no runs")?;
    ensure(runs.len() == 5, format!("{} runs", runs.len()))?;
    let space = runs[0]["space_size"].as_u64().ok_or("missing space_size")?;
    ensure(space >= 10_000, format!("space of {space}"))?;
    let permille: Vec<f64> = runs
        .iter()
        .map(|r| num(r, "best_permille"))
        .collect::<std::result::Result<_, _>>()?;
    let hits = permille.iter().filter(|&&p| p <= 10.0).count();
    let tau = num(&json(&run.dir.join("run/eval/eval_metrics.json"))?, "kendall_tau")?;
    let ranks: Vec<String> = runs.iter().map(|r| r["best_rank"].to_string()).collect();
    let detail = format!(
        "space {space}, best ranks [{}], {hits}/5 in top 1%, held-out tau {tau:.4}, {:.0}s",
        ranks.join(", "),
        run.seconds
    );
    ensure(hits >= 4 && tau >= 0.6 && run.seconds < 1200.0, detail.clone())?;
    Ok(detail)
}

fn beats_chance(run: &Run) -> Check {
    let m = json(&run.dir.join("run/metrics.json"))?;
    let (acc, adj) = (num(&m, "tier_accuracy")?, num(&m, "adjacent_tier_accuracy")?);
    let detail = format!("tier accuracy {acc:.4}, adjacent {adj:.4}");
    ensure(acc > 0.35 && adj > 0.75, detail.clone())?;
    Ok(detail)
}

fn accounting(run: &Run) -> Check {
    for seed in 0..5 {
        let text = fs::read_to_string(run.dir.join(format!("run/search_seed{seed}.jsonl")))
            .map_err(|e| e.to_string())?;
        let lines: Vec<Value> = text
            .lines()
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| e.to_string())?;
        let (summary, iterations) = lines.split_last().ok_or("empty report")?;
        let candidates: usize = iterations
            .iter()
            .map(|it| it["candidates"].as_array().map_or(0, |c| c.len()))
            .sum();
        let queries = summary["summary"]["queries"].as_u64();
        ensure(
            iterations.len() == 50 && candidates == 250 && queries == Some(250),
            format!("seed {seed}: {} iterations, {candidates} candidates, queries {queries:?}", iterations.len()),
        )?;
    }
    let cfg = run.dir.join("top1.json");
    fs::write(&cfg, r#"{"search": {"top_k": 1}}"#).map_err(|e| e.to_string())?;
    nar(
        &run.dir,
        &["search", "--config", "top1.json", "--records", "run/space.jsonl", "--checkpoint", "run/model.ckpt", "--out", "top1"],
    )?;
    let s = json(&run.dir.join("top1/summary.json"))?;
    let q = s["runs"][0]["queries"].as_u64();
    ensure(q == Some(50), format!("top-1 queries {q:?}"))?;
    Ok("250 queries at top-5 for 5 seeds, 50 at top-1".into())
}

fn external() -> Outcome {
    let Some(path) = std::env::var_os("NAR_NB101_RECORDS") else {
        return Outcome::Skip("NAR_NB101_RECORDS not set".into());
    };
    let check = || -> Check {
        let path = fs::canonicalize(&path).map_err(|e| e.to_string())?;
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let records = path.to_str().ok_or("non-UTF-8 path")?;
        nar(dir.path(), &["train", "--profile", "nb101", "--records", records, "--out", "nb"])?;
        nar(
            dir.path(),
            &["eval", "--profile", "nb101", "--records", "nb/heldout.jsonl", "--checkpoint", "nb/model.ckpt", "--out", "nb/eval"],
        )?;
        let tau = num(&json(&dir.path().join("nb/eval/eval_metrics.json"))?, "kendall_tau")?;
        let detail = format!("held-out tau {tau:.4}");
        ensure(tau >= 0.70, detail.clone())?;
        Ok(detail)
    };
    outcome(check())
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn determinism(first: &Run, second: &Run) -> Check {
    let a = files(&first.dir.join("run"));
    let b = files(&second.dir.join("run"));
    ensure(a.len() == b.len(), format!("{} vs {} files", a.len(), b.len()))?;
    for (pa, pb) in a.iter().zip(&b) {
        let rel = pa.strip_prefix(&first.dir).expect("under run dir");
        ensure(pb.strip_prefix(&second.dir).ok() == Some(rel), format!("file sets differ at {}", rel.display()))?;
        let same = fs::read(pa).map_err(|e| e.to_string())? == fs::read(pb).map_err(|e| e.to_string())?;
        ensure(same, format!("{} differs", rel.display()))?;
    }
    Ok(format!("{} output files identical across reruns", a.len()))
}

fn main() {
    let mut outcomes: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |n: u32, name: &'static str, outcome: Outcome| {
        report(n, name, &outcome);
        outcomes.push((n, name, outcome));
    };
    record(1, "gradient suite", outcome(gradients()));
    record(2, "tier-embedding running mean", outcome(running_mean()));
    record(3, "histogram and KL", outcome(histograms()));
    record(4, "distribution selection branches", outcome(selection_branches()));
    record(5, "encoding golden files", outcome(golden_files()));

    let tmp = tempfile::tempdir().expect("temp dir");
    let run_once = |name: &str| -> std::result::Result<Run, String> {
        let dir = tmp.path().join(name);
        let start = Instant::now();
        pipeline(&dir)?;
        Ok(Run {
            dir,
            seconds: start.elapsed().as_secs_f64(),
        })
    };
    let first = run_once("a");
    let with = |f: &dyn Fn(&Run) -> Check| first.as_ref().map_err(Clone::clone).and_then(f);
    record(6, "end-to-end synthetic search", outcome(with(&end_to_end)));
    record(7, "ranking beats chance", outcome(with(&beats_chance)));
    record(8, "query-budget accounting", outcome(with(&accounting)));

    record(9, "external NAS-Bench-101 ranking", external());

    let second = run_once("b");
    let det = match (&first, &second) {
        (Ok(a), Ok(b)) => determinism(a, b),
        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
    };
    record(10, "determinism", outcome(det));

    let failed = outcomes.iter().filter(|(_, _, o)| matches!(o, Outcome::Fail(_))).count();
    println!("acceptance: {} criteria, {failed} failed", outcomes.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

fn outcome(check: Check) -> Outcome {
    check.map_or_else(Outcome::Fail, Outcome::Pass)
}

fn report(n: u32, name: &str, outcome: &Outcome) {
    let (tag, detail) = match outcome {
        Outcome::Pass(d) => ("PASS", d),
        Outcome::Fail(d) => ("FAIL", d),
        Outcome::Skip(d) => ("SKIP", d),
    };
    println!("[{tag}] criterion {n:>2}: {name}: {detail}");
}
