use std::borrow::Cow;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::transfer::{train_scratch, transfer_train};
use super::TransferConfig;
use crate::data::{split_dataset, Dataset, Task};
use crate::error::{Error, Result};
use crate::nn::{Encoder, EncoderConfig};

/// One row of the sweep table.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum SweepArm {
    /// Linear probe on a frozen encoder.
    Frozen { name: String, encoder: Encoder },
    /// End-to-end training from a random initialisation.
    Scratch {
        name: String,
        encoder: EncoderConfig,
    },
}

impl SweepArm {
    pub fn name(&self) -> &str {
        match self {
            SweepArm::Frozen { name, .. } | SweepArm::Scratch { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub tasks: Vec<Task>,
    pub fractions: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Settings shared by every run; task, fraction and seed are overridden.
    pub transfer: TransferConfig,
    /// Worker threads, at least one.
    pub threads: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            tasks: vec![Task::Arrhythmia, Task::Gender],
            fractions: vec![1.0, 0.1, 0.01],
            seeds: vec![0, 1, 2],
            transfer: TransferConfig::default(),
            threads: 1,
        }
    }
}

/// Test accuracies of one arm, task and fraction across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub arm: String,
    pub task: Task,
    pub fraction: f64,
    /// In `[0, 1]`, ordered like the seeds.
    pub accuracies: Vec<f64>,
}

impl SweepCell {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    /// Sample standard deviation; zero for a single seed.
    pub fn std(&self) -> f64 {
        let n = self.accuracies.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        (self.accuracies.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub fractions: Vec<f64>,
    pub cells: Vec<SweepCell>,
}

fn percent_label(f: f64) -> String {
    format!("{}%", (f * 1e4).round() / 1e2)
}

impl SweepResult {
    pub fn cell(&self, arm: &str, task: Task, fraction: f64) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.arm == arm && c.task == task && c.fraction == fraction)
    }

    /// One row per arm and task, one `mean±std` column per fraction, in
    /// percentage points.
    pub fn table_csv(&self) -> String {
        let mut out = String::from("arm,task");
        for &f in &self.fractions {
            let _ = write!(out, ",{}", percent_label(f));
        }
        out.push('\n');
        let mut rows: Vec<(&str, Task)> = Vec::new();
        for c in &self.cells {
            if !rows.contains(&(c.arm.as_str(), c.task)) {
                rows.push((&c.arm, c.task));
            }
        }
        for (arm, task) in rows {
            let _ = write!(out, "{arm},{task}");
            for &f in &self.fractions {
                match self.cell(arm, task, f) {
                    Some(c) => {
                        let _ = write!(out, ",{:.2}±{:.2}", 100.0 * c.mean(), 100.0 * c.std());
                    }
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Long format for plotting accuracy against label fraction.
    pub fn plot_csv(&self) -> String {
        let mut out = String::from("arm,task,fraction,mean_accuracy,std_accuracy,n_seeds\n");
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6},{}",
                c.arm,
                c.task,
                c.fraction,
                c.mean(),
                c.std(),
                c.accuracies.len()
            );
        }
        out
    }
}

/// Runs every arm × task × fraction × seed combination. Results do not
/// depend on the thread count.
pub fn scarcity_sweep(arms: &[SweepArm], ds: &Dataset, spec: &SweepSpec) -> Result<SweepResult> {
    if arms.is_empty()
        || spec.tasks.is_empty()
        || spec.fractions.is_empty()
        || spec.seeds.is_empty()
    {
        return Err(Error::invalid(
            "sweep",
            "need at least one arm, task, fraction and seed",
        ));
    }
    spec.transfer.validate()?;
    let ds = match ds.splits {
        Some(_) => Cow::Borrowed(ds),
        None => Cow::Owned(split_dataset(
            ds,
            spec.transfer.split,
            spec.transfer.split_seed,
        )?),
    };
    let mut jobs = Vec::new();
    for (a, _) in arms.iter().enumerate() {
        for &task in &spec.tasks {
            for &fraction in &spec.fractions {
                for &seed in &spec.seeds {
                    jobs.push((a, task, fraction, seed));
                }
            }
        }
    }
    let results: Mutex<Vec<Option<Result<f64>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let run = |&(a, task, fraction, seed): &(usize, Task, f64, u64)| -> Result<f64> {
        let config = TransferConfig {
            task,
            fraction,
            seed,
            ..spec.transfer.clone()
        };
        let result = match &arms[a] {
            SweepArm::Frozen { encoder, .. } => transfer_train(encoder, &ds, &config)?,
            SweepArm::Scratch { encoder, .. } => train_scratch(encoder, &ds, &config)?,
        };
        log::info!(
            "{} {task} {}: seed {seed} test accuracy {:.4}",
            arms[a].name(),
            percent_label(fraction),
            result.test_accuracy
        );
        Ok(result.test_accuracy)
    };
    std::thread::scope(|scope| {
        for _ in 0..spec.threads.max(1).min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(job) = jobs.get(i) else { break };
                let r = run(job);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    let results = results.into_inner().expect("worker panicked");
    let mut cells: Vec<SweepCell> = Vec::new();
    for (job, r) in jobs.iter().zip(results) {
        let acc = r.expect("every job runs")?;
        let (a, task, fraction, _) = *job;
        let arm = arms[a].name();
        match cells.last_mut() {
            Some(c) if c.arm == arm && c.task == task && c.fraction == fraction => {
                c.accuracies.push(acc)
            }
            _ => cells.push(SweepCell {
                arm: arm.to_string(),
                task,
                fraction,
                accuracies: vec![acc],
            }),
        }
    }
    Ok(SweepResult {
        fractions: spec.fractions.clone(),
        cells,
    })
}
