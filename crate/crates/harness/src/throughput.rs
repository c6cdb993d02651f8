//! Optimizer-step throughput per augmentation choice.

use std::time::Instant;

use rand::seq::SliceRandom;

use lemda_core::gradcore::{Module, Optimizer};
use lemda_core::rng::derive;
use lemda_core::trainer::{baseline_step, lemda_step, Augmentation};

use crate::config::{AugmentationChoice, ExperimentConfig};
use crate::error::{HarnessError, Result};
use crate::run::{build_augmentation, build_dataset, build_task_network, TRAIN_STREAM};

#[derive(Clone, Debug, PartialEq)]
pub struct ThroughputReport {
    pub augmentation: AugmentationChoice,
    pub batch_size: usize,
    pub timed_steps: usize,
    /// Inverse of the median step time.
    pub steps_per_second: f64,
    pub examples_per_second: f64,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times `timed_steps` training steps after `warmup_steps` untimed ones, on
/// the first seed of `config`, in the calling thread.
pub fn measure_throughput(config: &ExperimentConfig, warmup_steps: usize, timed_steps: usize) -> Result<ThroughputReport> {
    if timed_steps < 10 {
        return Err(HarnessError::Invalid(format!("timed_steps must be >= 10, got {timed_steps}")));
    }
    config.validate()?;
    let seed = config.seeds[0];
    let dataset = build_dataset(config, seed)?;
    let train = dataset.train_batch();
    let mut f = build_task_network(config, &dataset, seed)?;
    let mut augmentation = build_augmentation(config, &f, seed)?;
    let t = &config.train;
    let mut opt_f = Optimizer::new(t.optimizer, t.lr_f, f.param_set())?;
    let mut opt_g = match &augmentation {
        Augmentation::Lemda { network, .. } => Some(Optimizer::new(t.optimizer, t.lr_g, network.param_set())?),
        Augmentation::Baseline(_) => None,
    };
    let mut rng = derive(seed, TRAIN_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut times = Vec::with_capacity(timed_steps);
    let mut examples = 0usize;
    for step in 0..warmup_steps + timed_steps {
        if cursor + t.batch_size > order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let idx = &order[cursor..(cursor + t.batch_size).min(order.len())];
        cursor += idx.len();
        let batch = train.select(idx);
        let start = Instant::now();
        match &mut augmentation {
            Augmentation::Baseline(spec) => baseline_step(&mut f, spec, &batch, &mut opt_f, &mut rng, step)?,
            Augmentation::Lemda { network, config: lc } => lemda_step(
                &mut f,
                network,
                &batch,
                lc,
                &mut opt_f,
                opt_g.as_mut().expect("created with the network"),
                &mut rng,
                step,
            )?,
        };
        let elapsed = start.elapsed().as_secs_f64();
        if step >= warmup_steps {
            times.push(elapsed.max(1e-9));
            examples = idx.len();
        }
    }
    let step_time = median(&mut times);
    Ok(ThroughputReport {
        augmentation: config.augmentation,
        batch_size: examples,
        timed_steps,
        steps_per_second: 1.0 / step_time,
        examples_per_second: examples as f64 / step_time,
    })
}

/// One report per augmentation choice, all on otherwise identical configs.
pub fn compare_throughput(
    config: &ExperimentConfig,
    choices: &[AugmentationChoice],
    warmup_steps: usize,
    timed_steps: usize,
) -> Result<Vec<ThroughputReport>> {
    choices
        .iter()
        .map(|&a| {
            let mut c = config.clone();
            c.augmentation = a;
            measure_throughput(&c, warmup_steps, timed_steps)
        })
        .collect()
}

pub fn to_csv(reports: &[ThroughputReport]) -> String {
    let mut out = String::from("augmentation,batch_size,timed_steps,steps_per_second,examples_per_second\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.augmentation, r.batch_size, r.timed_steps, r.steps_per_second, r.examples_per_second
        ));
    }
    out
}
