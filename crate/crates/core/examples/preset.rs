//! Runs the feature-delay preset with FTP, the skyline and two waiting
//! baselines, then prints the aggregate metrics and FTP's best-task table.
//!
//!     cargo run --release -p cvr-core --example preset [seed]

use cvr_core::datagen::{Generator, GeneratorConfig};
use cvr_core::learners::{build_learner, Hyper, LearnerContext, LearnerKind, LearnerSpec};
use cvr_core::sim::{best_task_table, run_simulation, SimConfig};
use cvr_core::TaskSchedule;

fn main() -> cvr_core::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let generator = Generator::new(GeneratorConfig::feature_delay_preset(seed, 50_000, 14))?;
    let records = generator.generate();
    let schedule = TaskSchedule::short_horizon();
    let ctx = LearnerContext {
        dim: generator.dim(),
        n_fields: generator.config().fields.len(),
        schedule: schedule.clone(),
        seed,
    };

    let mut hyper = Hyper::default();
    hyper.adam.lr = 2e-3;
    hyper.batch_size = 64;
    let kinds = [
        LearnerKind::ProphetStar,
        LearnerKind::Ftp,
        LearnerKind::Waiting { delay: schedule.delays()[0] },
        LearnerKind::Waiting { delay: schedule.d_max() },
    ];
    let mut learners = kinds
        .into_iter()
        .map(|k| build_learner::<f32>(&LearnerSpec::new(k).with_hyper(hyper.clone()), &ctx))
        .collect::<cvr_core::Result<Vec<_>>>()?;

    let cfg = SimConfig {
        warmup: 0.3,
        ..SimConfig::default()
    };
    let report = run_simulation(&records, &mut learners, &schedule, &cfg)?;
    print!("{}", report.summary_table());
    for (name, rows) in &report.best_task {
        println!("\n{name}");
        print!("{}", best_task_table(rows));
    }
    Ok(())
}
