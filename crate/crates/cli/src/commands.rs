use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use advmask::augment::{apply_adversarial_mask, AugmentationSpec};
use advmask::checkpoint::Checkpoint;
use advmask::data::{
    generate_synthetic_ecg, load_dataset, save_dataset, split_dataset, Dataset, LEAD_NAMES,
    N_LEADS, SCHEMA_VERSION,
};
use advmask::nn::{Encoder, EncoderConfig, Mode};
use advmask::objectives::apply_per_record;
use advmask::tensor::Tape;
use advmask::training::{
    metrics_csv, pretrain, scarcity_sweep, train_scratch, transfer_train, SweepArm, SweepResult,
    SweepSpec,
};
use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{set_n_masks, RunConfig};
use crate::{
    Cli, Command, GenDataArgs, GlobalArgs, PretrainArgs, PreviewArgs, SweepArgs, TransferArgs,
};

pub const THREADS_ENV: &str = "ADVMASK_THREADS";

fn resolve(global: &GlobalArgs) -> Result<RunConfig> {
    let config = match &global.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let seed = global.seed.unwrap_or(config.seed);
    Ok(config.with_seed(seed))
}

fn data_dir(arg: &Option<PathBuf>, config: &RunConfig) -> Result<PathBuf> {
    arg.clone()
        .or_else(|| config.data.clone())
        .context("no dataset given; pass --data DIR or set \"data\" in the config")
}

fn load(dir: &Path) -> Result<Dataset> {
    load_dataset(dir).with_context(|| format!("cannot load dataset {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ck = Checkpoint::load(path)
        .with_context(|| format!("cannot load checkpoint {}", path.display()))?;
    let trained_on = ck.header.dataset_schema_version;
    if trained_on != SCHEMA_VERSION {
        bail!(
            "checkpoint {} was trained on dataset schema version {trained_on}, but datasets here use schema version {SCHEMA_VERSION}",
            path.display()
        );
    }
    Ok(ck)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn out_dir(global: &GlobalArgs, default: &str) -> Result<PathBuf> {
    let dir = global.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn random_encoder(config: &EncoderConfig, seed: u64) -> Result<Encoder> {
    Ok(Encoder::new(
        config.clone(),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )?)
}

fn threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("{THREADS_ENV} must be a positive integer, got {v:?}"),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Writes a synthetic dataset directory and returns its path.
pub fn cmd_gen_data(global: &GlobalArgs, args: &GenDataArgs) -> Result<PathBuf> {
    let mut config = resolve(global)?;
    let synthetic = &mut config.synthetic;
    if let Some(n) = args.n {
        synthetic.n_records = n;
    }
    if let Some(length) = args.length {
        synthetic.length = length;
    }
    if let Some(balance) = args.balance {
        synthetic.rhythm_proportions = balance.proportions();
    }
    config.validate()?;
    let dir = global.out.clone().unwrap_or_else(|| PathBuf::from("data"));
    let occupied = dir.is_file() || fs::read_dir(&dir).is_ok_and(|mut d| d.next().is_some());
    if occupied && !args.force {
        bail!(
            "{} already exists; pass --force to overwrite",
            dir.display()
        );
    }
    let mut ds = generate_synthetic_ecg(&config.synthetic, config.seed)?;
    if !args.unsplit {
        ds = split_dataset(&ds, config.transfer.split, config.seed)?;
    }
    save_dataset(&ds, &dir, true)?;
    log::info!("wrote {} records to {}", ds.len(), dir.display());
    Ok(dir)
}

/// Paths written by [`cmd_pretrain`].
#[derive(Debug, Clone)]
pub struct PretrainFiles {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub config: PathBuf,
}

pub fn cmd_pretrain(global: &GlobalArgs, args: &PretrainArgs) -> Result<PretrainFiles> {
    let mut config = resolve(global)?;
    let data = data_dir(&args.data, &config)?;
    let p = &mut config.pretrain;
    if let Some(name) = &args.aug {
        p.augmentation = AugmentationSpec::from_name(name)?;
    }
    if let Some(n) = args.n_masks {
        set_n_masks(&mut p.augmentation, n)?;
    }
    if let Some(e) = args.max_epochs {
        p.max_epochs = e;
    }
    if let Some(lr) = args.lr {
        p.lr_encoder = lr;
        p.lr_adversary = lr;
    }
    p.record_wall_time |= args.wall_time;
    config.data = Some(data.clone());
    config.validate()?;

    let ds = load(&data)?;
    let out = pretrain(&config.pretrain, &ds)?;
    let dir = out_dir(global, "pretrain")?;
    let files = PretrainFiles {
        checkpoint: dir.join("checkpoint.amck"),
        metrics: dir.join("metrics.csv"),
        config: dir.join("config.json"),
    };
    out.checkpoint
        .save(&files.checkpoint)
        .with_context(|| format!("cannot write {}", files.checkpoint.display()))?;
    write(&files.metrics, &metrics_csv(&out.metrics))?;
    write(&files.config, &config.to_json()?)?;
    Ok(files)
}

pub const TRANSFER_HEADER: &str =
    "arm,task,fraction,seed,train_size,best_epoch,val_accuracy,test_accuracy";

/// Runs one transfer and returns the path of its results CSV.
pub fn cmd_transfer(global: &GlobalArgs, args: &TransferArgs) -> Result<PathBuf> {
    let mut config = resolve(global)?;
    let data = data_dir(&args.data, &config)?;
    let t = &mut config.transfer;
    if let Some(task) = args.task {
        t.task = task;
    }
    if let Some(f) = args.fraction {
        t.fraction = f;
    }
    if let Some(e) = args.max_epochs {
        t.max_epochs = e;
    }
    config.validate()?;
    let ds = load(&data)?;
    let (arm, result) = if args.scratch {
        (
            "scratch".to_string(),
            train_scratch(&config.pretrain.encoder, &ds, &config.transfer)?,
        )
    } else if args.random_init {
        let encoder = random_encoder(&config.pretrain.encoder, config.seed)?;
        (
            "random_init".to_string(),
            transfer_train(&encoder, &ds, &config.transfer)?,
        )
    } else {
        let path = args
            .checkpoint
            .clone()
            .or_else(|| config.checkpoint.clone())
            .context("pass --checkpoint PATH, --scratch or --random-init")?;
        let ck = load_checkpoint(&path)?;
        (
            ck.header.augmentation.clone(),
            transfer_train(&ck.encoder, &ds, &config.transfer)?,
        )
    };
    let t = &config.transfer;
    let dir = out_dir(global, "transfer")?;
    let results = dir.join("transfer_results.csv");
    let line = format!(
        "{arm},{},{},{},{},{},{},{}",
        t.task,
        t.fraction,
        t.seed,
        result.train_size,
        result.best_epoch,
        result.val_accuracy,
        result.test_accuracy
    );
    write(&results, &format!("{TRANSFER_HEADER}\n{line}\n"))?;
    write(
        &dir.join("transfer_metrics.csv"),
        &metrics_csv(&result.metrics),
    )?;
    log::info!(
        "{arm} {}: test accuracy {:.4}",
        t.task,
        result.test_accuracy
    );
    Ok(results)
}

/// Runs the sweep and writes `sweep_table.csv` and `sweep_plot.csv`.
pub fn cmd_sweep(global: &GlobalArgs, args: &SweepArgs) -> Result<SweepResult> {
    let mut config = resolve(global)?;
    let data = data_dir(&args.data, &config)?;
    if let Some(fractions) = &args.fractions {
        ensure!(
            !fractions.is_empty(),
            "--fractions needs at least one value"
        );
        config.sweep.fractions = fractions.clone();
    }
    if let Some(n) = args.seeds {
        config.sweep.n_seeds = n;
    }
    if let Some(task) = args.task {
        config.sweep.tasks = vec![task];
    }
    if let Some(e) = args.max_epochs {
        config.transfer.max_epochs = e;
    }
    config.sweep.scratch |= args.scratch;
    config.sweep.random_init |= args.random_init;
    config.validate()?;
    ensure!(config.sweep.n_seeds > 0, "need at least one seed");

    let mut arms = Vec::new();
    let mut paths = args.checkpoints.clone();
    if paths.is_empty() {
        paths.extend(config.checkpoint.clone());
    }
    let mut encoder_config = config.pretrain.encoder.clone();
    for (i, path) in paths.iter().enumerate() {
        let ck = load_checkpoint(path)?;
        if i == 0 {
            encoder_config = ck.header.encoder.clone();
        }
        let mut name = ck.header.augmentation.clone();
        if arms.iter().any(|a: &SweepArm| a.name() == name) {
            name = format!("{name}:{}", path.display());
        }
        arms.push(SweepArm::Frozen {
            name,
            encoder: ck.encoder,
        });
    }
    if config.sweep.random_init {
        arms.push(SweepArm::Frozen {
            name: "random_init".into(),
            encoder: random_encoder(&encoder_config, config.seed)?,
        });
    }
    if config.sweep.scratch {
        arms.push(SweepArm::Scratch {
            name: "scratch".into(),
            encoder: encoder_config,
        });
    }
    ensure!(
        !arms.is_empty(),
        "nothing to sweep; pass --checkpoint, --scratch or --random-init"
    );

    let ds = load(&data)?;
    let spec = SweepSpec {
        tasks: config.sweep.tasks.clone(),
        fractions: config.sweep.fractions.clone(),
        seeds: config.sweep_seeds(),
        transfer: config.transfer.clone(),
        threads: threads()?,
    };
    let result = scarcity_sweep(&arms, &ds, &spec)?;
    let dir = out_dir(global, "sweep")?;
    write(&dir.join("sweep_table.csv"), &result.table_csv())?;
    write(&dir.join("sweep_plot.csv"), &result.plot_csv())?;
    Ok(result)
}

/// Writes lead II before and after augmentation, plus generator masks for
/// adversarial chains, and returns the CSV path.
pub fn cmd_augment_preview(global: &GlobalArgs, args: &PreviewArgs) -> Result<PathBuf> {
    let config = resolve(global)?;
    let data = data_dir(&args.data, &config)?;
    let ds = load(&data)?;
    let record = match &args.record {
        Some(id) => ds
            .records
            .iter()
            .find(|r| &r.id == id)
            .with_context(|| format!("no record {id:?} in {}", data.display()))?,
        None => ds.records.first().context("dataset is empty")?,
    };
    let spec = AugmentationSpec::from_name(&args.aug)?;
    let fs_hz = record.sampling_rate_hz;
    let d = record.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let x = &record.signal;

    let (augmented, masks) = match spec.adversarial_plan()? {
        None => (spec.apply(x, fs_hz, &mut rng)?, None),
        Some(plan) => {
            let path = args
                .checkpoint
                .clone()
                .or_else(|| config.checkpoint.clone())
                .context(
                    "an adversarial preview needs --checkpoint with a trained mask generator",
                )?;
            let ck = load_checkpoint(&path)?;
            let generator = ck
                .generator
                .with_context(|| format!("checkpoint {} has no mask generator", path.display()))?;
            let n = generator.config.n_masks;
            let source = match &plan.before {
                Some(before) => before.apply(x, fs_hz, &mut rng)?,
                None => x.clone(),
            };
            let index = match args.mask_index {
                Some(i) if n < N_LEADS && i >= n => {
                    bail!("--mask-index {i} is out of range for {n} masks")
                }
                Some(i) => i,
                None if n < N_LEADS => rng.random_range(0..n),
                None => 0,
            };
            let tape = Tape::new();
            let bind = generator.params.bind(&tape, false);
            let xv = tape.constant(source.reshape(&[1, N_LEADS, d])?);
            let (m, _) = generator.forward(&bind, xv, Mode::Eval)?;
            let mut out =
                apply_adversarial_mask(xv, m, index, config.pretrain.objective.binarize_gamma)?;
            if let Some(after) = &plan.after {
                out = apply_per_record(out, &[after.sample_affine(N_LEADS, d, fs_hz, &mut rng)?])?;
            }
            (
                out.value().reshape(&[N_LEADS, d])?,
                Some(m.value().reshape(&[n, d])?),
            )
        }
    };

    const LEAD_II: usize = 1;
    let per_lead = masks.as_ref().is_some_and(|m| m.shape()[0] == N_LEADS);
    let mut csv = String::from("t,lead_II_original,lead_II_augmented");
    if let Some(m) = &masks {
        for k in 0..m.shape()[0] {
            let _ = write!(csv, ",mask_{k}");
        }
    }
    let others: Vec<usize> = if per_lead {
        (0..N_LEADS).filter(|&l| l != LEAD_II).collect()
    } else {
        Vec::new()
    };
    for &l in &others {
        let _ = write!(csv, ",lead_{0}_original,lead_{0}_augmented", LEAD_NAMES[l]);
    }
    csv.push('\n');
    for t in 0..d {
        let at = |lead: usize| lead * d + t;
        let _ = write!(
            csv,
            "{},{},{}",
            t as f32 / fs_hz,
            x.data()[at(LEAD_II)],
            augmented.data()[at(LEAD_II)]
        );
        if let Some(m) = &masks {
            for k in 0..m.shape()[0] {
                let _ = write!(csv, ",{}", m.data()[k * d + t]);
            }
        }
        for &l in &others {
            let _ = write!(csv, ",{},{}", x.data()[at(l)], augmented.data()[at(l)]);
        }
        csv.push('\n');
    }
    let path = global
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("preview.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .with_context(|| format!("cannot create {}", parent.display()))?;
    }
    write(&path, &csv)?;
    Ok(path)
}

/// Dispatches a parsed command line.
pub fn run(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::GenData(a) => println!("{}", cmd_gen_data(g, a)?.display()),
        Command::Pretrain(a) => {
            let files = cmd_pretrain(g, a)?;
            println!(
                "{}\n{}",
                files.checkpoint.display(),
                files.metrics.display()
            );
        }
        Command::Transfer(a) => println!("{}", cmd_transfer(g, a)?.display()),
        Command::Sweep(a) => print!("{}", cmd_sweep(g, a)?.table_csv()),
        Command::AugmentPreview(a) => println!("{}", cmd_augment_preview(g, a)?.display()),
    }
    Ok(())
}
