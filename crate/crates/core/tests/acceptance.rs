//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use discrim_distill::cli::{cmd_ablate, cmd_compare, cmd_run};
use discrim_distill::engine::{run_round, train_student, LearnerState, Method, Teachers};
use discrim_distill::expert::{train_expert, ExpertData};
use discrim_distill::losses::{distillation_loss, temperature_softmax, DistillSpec};
use discrim_distill::memory::herding_select;
use discrim_distill::metrics::RoundReport;
use discrim_distill::similarity::{select_similar, ClassCentres};
use discrim_distill::train::TrainSet;
use discrim_distill::Matrix;
use rand::seq::SliceRandom;
use rand::Rng;

type Outcome = Result<String, String>;

const CONFIGS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/configs");

/// Copy of a shipped config with its outputs redirected into `dir`.
fn redirected(name: &str, dir: &Path) -> PathBuf {
    let text = std::fs::read_to_string(Path::new(CONFIGS).join(name)).unwrap();
    let text: String = text
        .lines()
        .map(|l| {
            if l.starts_with("output_dir") {
                "output_dir = \"out\""
            } else {
                l
            }
        })
        .collect::<Vec<_>>()
        .join("\n");
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = rng(1001);
    let mut worst = 0.0f64;
    let trials = 60;
    for _ in 0..trials {
        worst = worst.max(instance_max_rel_err(&random_instance(&mut rng)));
    }
    let secs = start.elapsed().as_secs_f64();
    let msg =
        format!("{trials} instances, max relative error {worst:.2e} (< 1e-4), {secs:.2}s (< 30s)");
    if worst < 1e-4 && secs < 30.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn loss_identities() -> Outcome {
    let mut rng = rng(1002);
    let mut worst_norm = 0.0f64;
    let mut worst_shift = 0.0f64;
    for _ in 0..1000 {
        let k = rng.gen_range(1..10);
        let t = rng.gen_range(1.0..10.0);
        let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let p = temperature_softmax(&z, t);
        worst_norm = worst_norm.max((p.iter().sum::<f64>() - 1.0).abs());
        let c = rng.gen_range(-100.0..100.0);
        let q = temperature_softmax(&z.iter().map(|v| v + c).collect::<Vec<_>>(), t);
        worst_shift = p
            .iter()
            .zip(&q)
            .map(|(a, b)| (a - b).abs())
            .fold(worst_shift, f64::max);
    }
    let mut gibbs_violations = 0;
    let comparisons = 100;
    for _ in 0..comparisons {
        let k = rng.gen_range(2..8);
        let teacher = random_matrix(2, k, 4.0, &mut rng);
        let spec =
            DistillSpec::new(teacher.clone(), (0..k).collect(), rng.gen_range(1.0..5.0)).unwrap();
        let other = random_matrix(2, k, 4.0, &mut rng);
        let (at, _) = distillation_loss(&teacher, &spec).unwrap();
        let (off, _) = distillation_loss(&other, &spec).unwrap();
        if off < at - 1e-12 {
            gibbs_violations += 1;
        }
    }
    let mut nonzero_outside = 0;
    for _ in 0..200 {
        let width = rng.gen_range(2..9);
        let mut map: Vec<usize> = (0..width).collect();
        map.shuffle(&mut rng);
        map.truncate(rng.gen_range(1..width));
        let z = random_matrix(3, width, 3.0, &mut rng);
        let spec =
            DistillSpec::new(random_matrix(3, map.len(), 3.0, &mut rng), map.clone(), 2.0).unwrap();
        let (_, g) = distillation_loss(&z, &spec).unwrap();
        for i in 0..3 {
            for k in (0..width).filter(|k| !map.contains(k)) {
                if g.get(i, k) != 0.0 {
                    nonzero_outside += 1;
                }
            }
        }
    }
    let msg = format!(
        "|sum-1| max {worst_norm:.1e} (< 1e-12), shift max {worst_shift:.1e}, \
         Gibbs violations {gibbs_violations}/{comparisons}, non-zero grads outside map {nonzero_outside}"
    );
    if worst_norm < 1e-12 && worst_shift < 1e-12 && gibbs_violations == 0 && nonzero_outside == 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn oracles() -> Outcome {
    let mut rng = rng(1003);
    let trials = 500;
    let mut herding_mismatch = 0;
    for _ in 0..trials {
        let n = rng.gen_range(1..=8);
        let h = rng.gen_range(1..=4);
        let f: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..h)
                    .map(|_| f64::from(rng.gen_range(-2i32..=2)) * 0.5)
                    .collect()
            })
            .collect();
        let m = rng.gen_range(1..=n);
        if herding_select(&Matrix::from_rows(&f).unwrap(), m).unwrap() != herding_oracle(&f, m) {
            herding_mismatch += 1;
        }
    }
    let mut similar_mismatch = 0;
    for _ in 0..trials {
        let n_new = rng.gen_range(1..=4);
        let n_old = rng.gen_range(0..=8 - n_new);
        let mut draw = |ids: std::ops::Range<u32>| -> Vec<(u32, Vec<f64>)> {
            ids.map(|c| {
                (
                    c,
                    (0..2)
                        .map(|_| f64::from(rng.gen_range(-2i32..=2)))
                        .collect(),
                )
            })
            .collect()
        };
        let old = draw(0..n_old as u32);
        let new = draw(20..20 + n_new as u32);
        let m = rng.gen_range(0..=3);
        let c = |v: &[(u32, Vec<f64>)]| ClassCentres::new(v.iter().cloned().collect());
        if select_similar(&c(&new), &c(&old), m) != similar_oracle(&new, &old, m) {
            similar_mismatch += 1;
        }
    }
    let msg = format!(
        "herding mismatches {herding_mismatch}/{trials}, similar-class mismatches {similar_mismatch}/{trials}"
    );
    if herding_mismatch == 0 && similar_mismatch == 0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn reductions() -> Outcome {
    let (_, rounds) = small_task(1004);
    // (a) zero expert weight
    let losses = |method: Method| {
        let mut cfg = small_config(method);
        cfg.lambda2 = 0.0;
        let mut state = LearnerState::new(&[8], cfg.memory_k);
        rounds
            .iter()
            .flat_map(|r| run_round(&mut state, r, &cfg).unwrap().batch_losses)
            .collect::<Vec<f64>>()
    };
    let a = losses(Method::DistillOldOnly);
    let b = losses(Method::DistillOldPlusExpert);
    let gap = if a.len() == b.len() {
        a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };

    // (b) no similar classes: rebuild dual distillation by hand every round
    let mut cfg = small_config(Method::DistillOldPlusExpert);
    cfg.m_similar = 0;
    let mut state = LearnerState::new(&[8], cfg.memory_k);
    run_round(&mut state, &rounds[0], &cfg).unwrap();
    let mut identical = true;
    for r in &rounds[1..] {
        let before = state.clone();
        run_round(&mut state, r, &cfg).unwrap();
        let old = before.model.clone().unwrap();
        let expert = train_expert(
            ExpertData {
                new_classes: &r.data,
                similar_old: &[],
            },
            &old,
            cfg.expert_init,
            &cfg.schedule,
            cfg.expert,
            cfg.stage_seed(r.index, "expert"),
        )
        .unwrap();
        let mut student = old
            .expand_head(
                r.classes.len(),
                cfg.head_init_scale,
                cfg.stage_seed(r.index, "head"),
            )
            .unwrap();
        let mut order = before.class_order.clone();
        order.extend(&r.classes);
        let mut x = Matrix::zeros(0, old.input_dim());
        let mut t = Vec::new();
        for (c, m) in r.data.iter().chain(before.exemplars.iter()) {
            x = x.vstack(m).unwrap();
            t.extend(std::iter::repeat_n(
                order.iter().position(|o| o == c).unwrap(),
                m.rows(),
            ));
        }
        train_student(
            &mut student,
            &TrainSet::new(x, t).unwrap(),
            &order,
            Teachers {
                old: Some(&old),
                expert: Some(&expert),
            },
            &cfg,
            cfg.stage_seed(r.index, "student-batches"),
        )
        .unwrap();
        identical &= state.model.as_ref() == Some(&student);
    }
    let msg = format!(
        "(a) max per-batch gap {gap:.1e} over {} batches (<= 1e-12); (b) m=0 bit-identical to dual distillation: {identical}",
        a.len()
    );
    if gap <= 1e-12 && identical {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

struct Benchmark {
    reports: Vec<RoundReport>,
    seconds: f64,
}

fn benchmark() -> Benchmark {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let methods = [
        Method::Finetune,
        Method::DistillOldOnly,
        Method::DistillOldPlusExpert,
    ];
    let (out, _) = cmd_compare(&redirected("confusable.toml", dir.path()), &methods).unwrap();
    Benchmark {
        reports: out.reports,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn per_method<'a>(b: &'a Benchmark, method: &'a str) -> impl Iterator<Item = &'a RoundReport> + 'a {
    b.reports.iter().filter(move |r| r.method == method)
}

fn confusion_direction(b: &Benchmark) -> Outcome {
    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = b.reports.iter().map(|r| r.seed).collect();
        s.dedup();
        s.sort_unstable();
        s.dedup();
        s
    };
    let cumulative = |method: &str| {
        mean(seeds.iter().map(|&s| {
            per_method(b, method)
                .filter(|r| r.seed == s && r.round >= 2)
                .map(|r| r.confusion_errors as f64)
                .sum::<f64>()
        }))
    };
    let last = b.reports.iter().map(|r| r.round).max().unwrap();
    let final_acc = |method: &str| {
        mean(
            per_method(b, method)
                .filter(|r| r.round == last)
                .map(|r| r.mean_accuracy),
        )
    };
    let (cb, cp) = (
        cumulative("distill_old_only"),
        cumulative("distill_old_plus_expert"),
    );
    let (ab, ap) = (
        final_acc("distill_old_only"),
        final_acc("distill_old_plus_expert"),
    );
    let msg = format!(
        "{} seeds, {last} rounds: cumulative confusion rounds 2-{last} baseline {cb:.1} vs proposed {cp:.1}; \
         final accuracy baseline {ab:.4} vs proposed {ap:.4}; wall clock {:.1}s (< 600s)",
        seeds.len(),
        b.seconds
    );
    if seeds.len() >= 10 && cp < cb && ap > ab && b.seconds < 600.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn forgetting_direction(b: &Benchmark) -> Outcome {
    let last = b.reports.iter().map(|r| r.round).max().unwrap();
    let retention = |method: &str| {
        let mut first = Vec::new();
        let mut end = Vec::new();
        for r1 in per_method(b, method).filter(|r| r.round == 1) {
            let rl = per_method(b, method)
                .find(|r| r.seed == r1.seed && r.round == last)
                .unwrap();
            first.push(mean(
                r1.new_classes.iter().map(|c| r1.per_class_accuracy[c]),
            ));
            end.push(mean(
                r1.new_classes.iter().map(|c| rl.per_class_accuracy[c]),
            ));
        }
        mean(end.into_iter()) / mean(first.into_iter())
    };
    let (f, d) = (retention("finetune"), retention("distill_old_only"));
    let msg = format!("round-1 class accuracy retained at round {last}: finetune {f:.3} (< 0.5), distill_old_only {d:.3} (> 0.5)");
    if f < 0.5 && d > 0.5 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn ablation() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (out, rows) = cmd_ablate(&redirected("confusable.toml", dir.path()), &[0, 1, 2])
        .map_err(|e| e.to_string())?;
    let csv = std::fs::read_to_string(out.dir.join("ablation.csv")).map_err(|e| e.to_string())?;
    let header_ok = csv.lines().next() == Some("variant,seed,final_accuracy,avg_over_rounds");
    let mut by_variant: BTreeMap<String, (usize, f64, f64)> = BTreeMap::new();
    for r in &rows {
        let e = by_variant.entry(r.variant.clone()).or_default();
        e.0 += 1;
        e.1 += r.final_accuracy;
        e.2 += r.avg_over_rounds;
    }
    let summary: Vec<String> = ["B", "0", "1", "2"]
        .iter()
        .filter_map(|v| {
            by_variant.get(*v).map(|(n, f, a)| {
                format!("{v}: final {:.4} avg {:.4}", f / *n as f64, a / *n as f64)
            })
        })
        .collect();
    let complete = summary.len() == 4
        && rows
            .iter()
            .all(|r| r.final_accuracy.is_finite() && r.avg_over_rounds.is_finite());
    let msg = format!("{} rows; {}", rows.len(), summary.join(", "));
    if header_ok && complete && csv.lines().count() == rows.len() + 1 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

type Command<'a> = (&'a str, Box<dyn Fn() + 'a>);

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = redirected("quick.toml", dir.path());
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("runs = [0]", "runs = [0, 1]");
    std::fs::write(&cfg, text).unwrap();
    let out = dir.path().join("out");
    let snapshot = || -> BTreeMap<String, Vec<u8>> {
        std::fs::read_dir(&out)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| {
                (
                    e.file_name().to_string_lossy().into_owned(),
                    std::fs::read(e.path()).unwrap(),
                )
            })
            .collect()
    };
    let commands: [Command<'_>; 3] = [
        ("run", Box::new(|| drop(cmd_run(&cfg).unwrap()))),
        (
            "compare",
            Box::new(|| {
                drop(
                    cmd_compare(
                        &cfg,
                        &[Method::DistillOldOnly, Method::DistillOldPlusExpert],
                    )
                    .unwrap(),
                )
            }),
        ),
        (
            "ablate",
            Box::new(|| drop(cmd_ablate(&cfg, &[0, 1, 2]).unwrap())),
        ),
    ];
    let mut checked = Vec::new();
    for (name, command) in &commands {
        let _ = std::fs::remove_dir_all(&out);
        command();
        let first = snapshot();
        let _ = std::fs::remove_dir_all(&out);
        command();
        let second = snapshot();
        if first != second {
            let differing: Vec<&String> = first
                .keys()
                .filter(|k| first.get(*k) != second.get(*k))
                .collect();
            return Err(format!("`{name}` rerun differs in {differing:?}"));
        }
        checked.push(format!("{name} ({} files)", first.len()));
    }
    Ok(format!("byte-identical reruns: {}", checked.join(", ")))
}

fn main() {
    let started = Instant::now();
    let bench = benchmark();
    let results: Vec<(&str, Outcome)> = vec![
        ("1 gradient correctness", gradients()),
        ("2 loss identities", loss_identities()),
        ("3 oracle equivalence", oracles()),
        ("4 degenerate reductions", reductions()),
        ("5 confusion direction", confusion_direction(&bench)),
        ("6 forgetting direction", forgetting_direction(&bench)),
        ("7 ablation harness", ablation()),
        ("8 determinism", determinism()),
    ];
    let mut failed = 0;
    for (name, outcome) in &results {
        match outcome {
            Ok(msg) => println!("PASS criterion {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name}: {msg}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed in {:.1}s",
        results.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
