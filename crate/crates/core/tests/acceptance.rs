//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and
//! exits non-zero when any criterion fails.
//!
//! Criterion 10 needs the Criteo conversion log; point `CVR_CRITEO_PATH`
//! at it (plain or gzipped) to run it.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cvr_core::datagen::{FieldSpec, Generator, GeneratorConfig, MixtureComponent};
use cvr_core::domain::{final_label, matured_subset, Feature, ImpressionRecord, Split, TaskSchedule, DAY, HOUR};
use cvr_core::ingest::{read_criteo, CriteoParser};
use cvr_core::learners::{build_learner, Hyper, Learner, LearnerContext, LearnerKind, LearnerSpec};
use cvr_core::model::gradcheck::{grad_check, CheckBatch, HeadSelect};
use cvr_core::model::loss::{fnc_calibrate, pu_loss, Objective};
use cvr_core::model::{AdamConfig, NetConfig, Network};
use cvr_core::pipelines::{emit_fake_negative_stream, FakeNegativePipeline, MaturedPipeline};
use cvr_core::sim::{feedback_rates, run_simulation, Poison, SimConfig, SimReport};

struct Outcome {
    status: &'static str,
    detail: String,
}

fn pass(ok: bool, detail: String) -> Outcome {
    Outcome {
        status: if ok { "PASS" } else { "FAIL" },
        detail,
    }
}

fn ordering_hyper() -> Hyper {
    Hyper {
        adam: AdamConfig {
            lr: 2e-3,
            ..AdamConfig::default()
        },
        batch_size: 64,
        ..Hyper::default()
    }
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let objectives = [
        Objective::Bce,
        Objective::Fnw,
        Objective::Pu { non_negative: false },
        Objective::Pu { non_negative: true },
    ];
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut checks = 0;
    for instance in 0..50 {
        let n_fields = rng.random_range(1..=3);
        let cfg = NetConfig {
            dim: 8 * n_fields as u32,
            n_fields,
            embed_dim: rng.random_range(2..=4),
            hidden: rng.random_range(3..=6),
            head_hidden: rng.random_range(3..=6),
            n_heads: rng.random_range(2..=4),
            policy: true,
            seed: instance,
            ..NetConfig::default()
        };
        let net = Network::<f64>::new(cfg.clone());
        let sample_x = |rng: &mut ChaCha8Rng| -> Vec<Feature> {
            (0..n_fields)
                .map(|f| Feature {
                    index: f as u32 * 8 + rng.random_range(0..8),
                    value: rng.random_range(0.5..1.5),
                })
                .collect()
        };
        let samples: Vec<(Vec<Feature>, u8)> = (0..6)
            .map(|_| (sample_x(&mut rng), rng.random_bool(0.4) as u8))
            .collect();
        for k in 0..cfg.n_heads {
            for &objective in &objectives {
                let batch = CheckBatch::Head {
                    objective,
                    samples: samples.clone(),
                };
                let r = grad_check(&net, &batch, HeadSelect::Task(k));
                checks += 1;
                if r.max_rel_error > worst {
                    worst = r.max_rel_error;
                    worst_at = format!("instance {instance} head {k} {objective:?} {}", r.worst.unwrap_or_default());
                }
            }
        }
        let policy = CheckBatch::Policy {
            samples: samples
                .iter()
                .map(|(x, _)| (x.clone(), rng.random_range(0..cfg.n_heads)))
                .collect(),
        };
        let r = grad_check(&net, &policy, HeadSelect::Policy);
        checks += 1;
        if r.max_rel_error > worst {
            worst = r.max_rel_error;
            worst_at = format!("instance {instance} policy {}", r.worst.unwrap_or_default());
        }
    }
    pass(
        worst < 1e-4,
        format!("{checks} checks, max relative error {worst:.2e} ({worst_at})"),
    )
}

fn criterion_2() -> Outcome {
    let cfg = GeneratorConfig::feature_delay_preset(2, 100_000, 14);
    let d_max = cfg.d_max;
    let records = Generator::new(cfg).unwrap().generate();
    let tau = records.last().unwrap().log_time + d_max + 1;
    let subset = matured_subset(&records, tau, d_max);
    let agree = subset.iter().filter(|(r, y)| *y == final_label(r, d_max)).count();
    pass(
        subset.len() == records.len() && agree == records.len(),
        format!("{agree}/{} matured labels equal the final label", records.len()),
    )
}

fn criterion_3() -> Outcome {
    let worst = (1..=99)
        .map(|i| {
            let p = i as f64 / 100.0;
            (fnc_calibrate(p / (1.0 + p)) - p).abs()
        })
        .fold(0.0, f64::max);
    pass(worst < 1e-9, format!("max |calibrate(p/(1+p)) - p| = {worst:.2e} over 99 points"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d_max = 10 * HOUR;
    let mut records: Vec<ImpressionRecord> = (0..100u64)
        .map(|id| {
            let s = rng.random_range(0..100 * HOUR);
            let t = rng.random_bool(0.3).then(|| s + rng.random_range(0..=d_max));
            ImpressionRecord::new(id, s, t, vec![Feature::one_hot(0)], d_max).unwrap()
        })
        .collect();
    records.sort_by_key(|r| (r.log_time, r.id));
    let preds: Vec<f64> = records.iter().map(|_| rng.random_range(0.01..0.99)).collect();
    let pu: f64 = emit_fake_negative_stream(&records, i64::MAX)
        .iter()
        .map(|e| pu_loss(preds[e.pos], e.label).0)
        .sum();
    let bce: f64 = records
        .iter()
        .zip(&preds)
        .map(|(r, &p)| if final_label(r, d_max) == 1 { -p.ln() } else { -(1.0 - p).ln() })
        .sum();
    pass((pu - bce).abs() < 1e-9, format!("PU sum {pu:.12} vs BCE sum {bce:.12}"))
}

fn criterion_5() -> Outcome {
    let cfg = GeneratorConfig {
        seed: 5,
        n_records: 200_000,
        horizon: 30 * DAY,
        d_max: 2 * DAY,
        n_buckets: 64,
        fields: vec![
            FieldSpec::fixed(40),
            FieldSpec::fixed(4),
            FieldSpec::fixed(40),
            FieldSpec::fixed(40),
        ],
        bias: -2.0,
        weight_scale: 0.7,
        true_weights: vec![],
        delay_mixture: vec![
            MixtureComponent::with_mean(0.5, HOUR),
            MixtureComponent::with_mean(0.5, 10 * HOUR),
        ],
        delay_modulation: None,
    };
    let g = Generator::new(cfg.clone()).unwrap();
    let records = g.generate();
    let held_out = Generator::new(GeneratorConfig {
        seed: 55,
        n_records: 20_000,
        true_weights: g.weights().to_vec(),
        ..cfg.clone()
    })
    .unwrap()
    .generate();
    let ctx = LearnerContext {
        dim: g.dim(),
        n_fields: 4,
        schedule: TaskSchedule::new(vec![cfg.d_max]).unwrap(),
        seed: 5,
    };
    let mut prophet = build_learner::<f32>(&LearnerSpec::new(LearnerKind::Prophet).with_hyper(ordering_hyper()), &ctx).unwrap();
    let tau = records.last().unwrap().log_time + cfg.d_max + 1;
    let stats = prophet.update(tau, &records).unwrap();
    let (mut model, mut bayes) = (0.0, 0.0);
    for r in &held_out {
        let p = g.true_cvr(&r.features);
        let q = prophet.predict(&r.features).clamp(1e-7, 1.0 - 1e-7);
        model -= p * q.ln() + (1.0 - p) * (1.0 - q).ln();
        bayes -= p * p.ln() + (1.0 - p) * (1.0 - p).ln();
    }
    let rel = model / bayes - 1.0;
    pass(
        rel.abs() < 0.05,
        format!(
            "one pass over {} records: prophet {:.5} vs Bayes {:.5} nats ({:+.2}%)",
            stats.examples,
            model / held_out.len() as f64,
            bayes / held_out.len() as f64,
            100.0 * rel
        ),
    )
}

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn ordering_run(seed: u64) -> SimReport {
    let schedule = TaskSchedule::short_horizon();
    let cfg = GeneratorConfig::feature_delay_preset(seed, 50_000, 14);
    let g = Generator::new(cfg).unwrap();
    let records = g.generate();
    let ctx = LearnerContext {
        dim: g.dim(),
        n_fields: 4,
        schedule: schedule.clone(),
        seed,
    };
    let mut kinds = vec![LearnerKind::ProphetStar, LearnerKind::Ftp];
    kinds.extend(schedule.delays().iter().map(|&delay| LearnerKind::Waiting { delay }));
    let mut learners: Vec<Box<dyn Learner>> = kinds
        .into_iter()
        .map(|k| build_learner::<f32>(&LearnerSpec::new(k).with_hyper(ordering_hyper()), &ctx).unwrap())
        .collect();
    let sim = SimConfig {
        warmup: 0.3,
        ..SimConfig::default()
    };
    run_simulation(&records, &mut learners, &schedule, &sim).unwrap()
}

fn criterion_6(runs: &[SimReport]) -> Outcome {
    let mut ok = 0;
    let mut parts = Vec::new();
    for (seed, r) in SEEDS.iter().zip(runs) {
        let ll = |n: &str| r.aggregate(n).unwrap().log_loss.unwrap();
        let (star, ftp) = (ll("prophet_star"), ll("ftp"));
        let best_waiting = r
            .aggregates
            .iter()
            .filter(|a| a.learner.starts_with("waiting_"))
            .map(|a| a.log_loss.unwrap())
            .fold(f64::INFINITY, f64::min);
        let holds = star <= ftp && ftp <= best_waiting;
        ok += holds as usize;
        parts.push(format!("seed {seed}: {star:.4} <= {ftp:.4} <= {best_waiting:.4} {}", if holds { "ok" } else { "no" }));
    }
    pass(ok >= 4, format!("{ok}/5 seeds; {}", parts.join("; ")))
}

fn criterion_7(runs: &[SimReport]) -> Outcome {
    let mut ok = 0;
    let mut parts = Vec::new();
    for (seed, r) in SEEDS.iter().zip(runs) {
        let im = &r.imitation[0].1;
        let holds = im.policy_hits > im.best_constant_hits;
        ok += holds as usize;
        parts.push(format!(
            "seed {seed}: {:.3} vs {:.3}",
            im.policy_accuracy(),
            im.constant_accuracy()
        ));
    }
    pass(ok >= 4, format!("{ok}/5 seeds policy beats best constant task; {}", parts.join("; ")))
}

fn criterion_8(runs: &[SimReport]) -> Outcome {
    let mut ok = 0;
    let mut parts = Vec::new();
    for (seed, r) in SEEDS.iter().zip(runs) {
        let rows = &r.best_task[0].1;
        let long_mass = 100.0 - rows[0].feedback_pct;
        let all_positive = rows.iter().all(|row| row.best_pct > 0.0);
        let shortest_not_majority = long_mass <= 30.0 || rows[0].best_pct <= 50.0;
        let holds = all_positive && shortest_not_majority;
        ok += holds as usize;
        let best: Vec<String> = rows.iter().map(|row| format!("{:.1}", row.best_pct)).collect();
        parts.push(format!("seed {seed}: best% [{}], long-delay mass {long_mass:.1}%", best.join(", ")));
    }
    pass(ok == SEEDS.len(), format!("{ok}/5 seeds; {}", parts.join("; ")))
}

fn criterion_9() -> Outcome {
    let schedule = TaskSchedule::short_horizon();
    let d_max = schedule.d_max();
    let mut cfg = GeneratorConfig::feature_delay_preset(9, 10_000, 7);
    cfg.d_max = d_max;
    let g = Generator::new(cfg).unwrap();
    let mut records = g.generate();
    for r in records.iter_mut().skip(3).step_by(10) {
        r.split = Split::Eval;
    }
    let end = records.last().unwrap().log_time + d_max + 2 * HOUR;

    let mut problems = Vec::new();
    for &d in schedule.delays() {
        let mut p = MaturedPipeline::new(d);
        let mut seen = BTreeMap::new();
        let mut tau = 0;
        while tau <= end {
            for (pos, _) in p.release_for_task(&records, tau).unwrap() {
                *seen.entry(records[pos].id).or_insert(0) += 1;
            }
            tau += HOUR;
        }
        let eligible: BTreeMap<u64, i32> = records
            .iter()
            .filter(|r| r.split == Split::Train && r.log_time < tau - HOUR - d)
            .map(|r| (r.id, 1))
            .collect();
        if seen != eligible {
            problems.push(format!("matured d={d} released {} of {}", seen.len(), eligible.len()));
        }
    }
    let mut fnp = FakeNegativePipeline::new(d_max);
    let mut events = Vec::new();
    let mut tau = 0;
    while tau <= end {
        events.extend(fnp.release(&records, tau).unwrap());
        tau += HOUR;
    }
    events.sort_by_key(|e| (e.emit_time, e.label, e.pos));
    if events != emit_fake_negative_stream(&records, i64::MAX) {
        problems.push("fake-negative events differ from the batch stream".into());
    }

    let ctx = LearnerContext {
        dim: g.dim(),
        n_fields: 4,
        schedule: schedule.clone(),
        seed: 9,
    };
    let hyper = Hyper {
        hidden: 32,
        head_hidden: 32,
        ..ordering_hyper()
    };
    let run = |poison: Poison| {
        let kinds = [
            LearnerKind::Ftp,
            LearnerKind::Prophet,
            LearnerKind::ProphetStar,
            LearnerKind::Waiting { delay: 6 * HOUR },
            LearnerKind::Pu { non_negative: false },
            LearnerKind::Fnw,
            LearnerKind::Fnc,
        ];
        let mut learners: Vec<Box<dyn Learner>> = kinds
            .into_iter()
            .map(|k| build_learner::<f32>(&LearnerSpec::new(k).with_hyper(hyper.clone()), &ctx).unwrap())
            .collect();
        let sim = SimConfig {
            poison,
            ..SimConfig::default()
        };
        let report = run_simulation(&records, &mut learners, &schedule, &sim).unwrap();
        let log = learners[0].extended_log().unwrap();
        let captured_once = log.len() == records.len()
            && log.entries().iter().map(|e| e.id).collect::<std::collections::BTreeSet<_>>().len() == records.len();
        let all_consumed = log
            .entries()
            .iter()
            .filter(|e| e.log_time < report.eval_end)
            .all(|e| e.is_matured());
        (report, captured_once && all_consumed)
    };
    let (clean, extlog_ok) = run(Poison::Off);
    if !extlog_ok {
        problems.push("extended log not captured and consumed exactly once".into());
    }
    let (erase, _) = run(Poison::Erase);
    let (imminent, _) = run(Poison::Imminent);
    if erase != clean || imminent != clean {
        problems.push("poisoning future conversion times changed the report".into());
    }
    let (again, _) = run(Poison::Off);
    if again != clean || again.to_csv() != clean.to_csv() || again.to_json() != clean.to_json() {
        problems.push("rerun produced a different report".into());
    }
    let detail = if problems.is_empty() {
        format!(
            "{} records: exactly-once release, poison invariance and bit-identical reruns hold",
            records.len()
        )
    } else {
        problems.join("; ")
    };
    pass(problems.is_empty(), detail)
}

fn criterion_10() -> Outcome {
    let Some(path) = std::env::var_os("CVR_CRITEO_PATH") else {
        return Outcome {
            status: "SKIP",
            detail: "set CVR_CRITEO_PATH to the Criteo conversion log to run".into(),
        };
    };
    let path = std::path::PathBuf::from(path);
    let records = match read_criteo(&path, &CriteoParser::new(1 << 16).unwrap()) {
        Ok(r) => r,
        Err(e) => return pass(false, format!("could not read {}: {e}", path.display())),
    };
    let rates = feedback_rates(&records, &TaskSchedule::criteo());
    let target = [60.0, 80.0, 90.0, 95.0, 100.0];
    let ok = rates.iter().zip(target).all(|(r, t)| (r - t).abs() <= 3.0);
    let shown: Vec<String> = rates.iter().map(|r| format!("{r:.1}")).collect();
    pass(ok, format!("feedback% [{}] vs [60, 80, 90, 95, 100]", shown.join(", ")))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        if o.status == "FAIL" {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {name:<22} {} ({:.1}s) {}",
            o.status,
            t.elapsed().as_secs_f64(),
            o.detail
        );
    };
    report(1, "gradient suite", &mut criterion_1);
    report(2, "matured identity", &mut criterion_2);
    report(3, "fnc inverse", &mut criterion_3);
    report(4, "pu risk identity", &mut criterion_4);
    report(5, "prophet near bayes", &mut criterion_5);
    let t = Instant::now();
    let runs: Vec<SimReport> = SEEDS.iter().map(|&s| ordering_run(s)).collect();
    println!("ordering runs: 5 seeds in {:.1}s", t.elapsed().as_secs_f64());
    report(6, "directional ordering", &mut || criterion_6(&runs));
    report(7, "policy imitation", &mut || criterion_7(&runs));
    report(8, "best-task spread", &mut || criterion_8(&runs));
    report(9, "pipeline properties", &mut criterion_9);
    report(10, "criteo feedback rates", &mut criterion_10);
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
