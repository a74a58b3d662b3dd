//! Command-line surface of the `scsm` binary.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::checks::{run_suite, Suite};
use crate::data::{
    dataset_sample, load_dataset, write_dataset, write_mask, write_tensor, CLASS_NAMES,
};
use crate::error::{Error, Result};
use crate::metrics::{report, summary, ConfusionMatrix, Summary};
use crate::model::{evaluate, LossValues, Scsm, ScsmConfig, Trainer};
use crate::smg::ArgmaxMask;
use crate::tensor::Tensor;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Format { .. } | Error::Incompatible(_) | Error::Dimension(_) => {
            EXIT_IO
        }
        Error::Numeric(_) | Error::Contract(_) => EXIT_NUMERIC,
    }
}

/// Model configuration plus the run's dataset sizes, seed and output directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ScsmConfig,
    pub seed: u64,
    pub train_samples: usize,
    pub val_samples: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ScsmConfig::default(),
            seed: 7,
            train_samples: 400,
            val_samples: 100,
            out_dir: PathBuf::from("scsm-out"),
        }
    }
}

impl RunConfig {
    pub const RUN_KEYS: [&'static str; 4] = ["seed", "train_samples", "val_samples", "out_dir"];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = || Error::config(format!("{key}: cannot parse {value:?}"));
        match key {
            "seed" => self.seed = value.trim().parse().map_err(|_| bad())?,
            "train_samples" => self.train_samples = value.trim().parse().map_err(|_| bad())?,
            "val_samples" => self.val_samples = value.trim().parse().map_err(|_| bad())?,
            "out_dir" => self.out_dir = PathBuf::from(value.trim()),
            _ => self.model.set(key, value)?,
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.train_samples == 0 || self.val_samples == 0 {
            return Err(Error::config(
                "train_samples and val_samples must be positive",
            ));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "seed={}\ntrain_samples={}\nval_samples={}\nout_dir={}\n",
            self.seed,
            self.train_samples,
            self.val_samples,
            self.out_dir.display()
        );
        out.push_str(&self.model.to_text());
        out
    }

    /// Training split: dataset indices `0..train_samples`.
    pub fn train_set(&self) -> Result<Vec<(Tensor, ArgmaxMask)>> {
        self.split(0, self.train_samples)
    }

    /// Validation split: the next `val_samples` indices after the training split.
    pub fn val_set(&self) -> Result<Vec<(Tensor, ArgmaxMask)>> {
        self.split(self.train_samples, self.val_samples)
    }

    fn split(&self, start: usize, count: usize) -> Result<Vec<(Tensor, ArgmaxMask)>> {
        (start..start + count)
            .map(|i| {
                dataset_sample(self.seed, i, self.model.height, self.model.width)
                    .map(|s| (s.image, s.truth))
            })
            .collect()
    }
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Scsm,
    pub losses: Vec<LossValues>,
    pub val: ConfusionMatrix,
    pub summary: Summary,
    pub seconds: f64,
}

/// Trains on the synthetic split of `cfg` and scores the validation split.
pub fn train_run(
    cfg: &RunConfig,
    mut progress: impl FnMut(usize, &LossValues),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let train = cfg.train_set()?;
    let val = cfg.val_set()?;
    let mut trainer = Trainer::new(Scsm::new(cfg.model.clone(), cfg.seed)?);
    let mut losses = Vec::with_capacity(cfg.model.max_iter);
    trainer.fit(&train, cfg.seed, |it, l| {
        losses.push(*l);
        progress(it, l);
    })?;
    let model = trainer.into_model();
    let cm = evaluate(&model, &val)?;
    Ok(TrainOutcome {
        model,
        losses,
        summary: summary(&cm)?,
        val: cm,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn loss_csv(losses: &[LossValues]) -> String {
    let mut out = String::from("iter,loss_o,loss_d,loss_a,total\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{i},{:?},{:?},{:?},{:?}", l.o, l.d, l.a, l.total).unwrap();
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Parser)]
#[command(
    name = "scsm",
    version,
    about = "Scene-coupling semantic segmentation on synthetic aerial scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// key=value configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if let Some(m) = self.max_iter {
            cfg.model.max_iter = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a synthetic split; writes model.sck, loss.csv and metrics.txt
    Train(RunArgs),
    /// Score a checkpoint on a dataset manifest
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score the truth masks against themselves instead of running a model
        #[arg(long)]
        score_truth: bool,
    },
    /// Write a synthetic dataset with a manifest
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
    },
    /// Finite-difference gradient checks: rope, dct, smg, sca, model or all
    Gradcheck {
        selector: String,
        #[arg(long, default_value_t = 1e-5)]
        threshold: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train variants along one axis: frequency, block, angles, rope or loss
    Ablate {
        axis: String,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Dump per-block attention weights and gates for one sample
    Attention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn say(out: &mut dyn Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<stdout>", e))
}

pub fn execute(command: Command, out: &mut dyn Write) -> Result<i32> {
    match command {
        Command::Train(args) => cmd_train(&args.resolve()?, out),
        Command::Eval {
            checkpoint,
            manifest,
            out: dir,
            score_truth,
        } => cmd_eval(
            checkpoint.as_deref(),
            &manifest,
            dir.as_deref(),
            score_truth,
            out,
        ),
        Command::Generate {
            out: dir,
            count,
            seed,
            height,
            width,
        } => {
            let samples = (0..count)
                .map(|i| dataset_sample(seed, i, height, width))
                .collect::<Result<Vec<_>>>()?;
            let manifest = write_dataset(&dir, &samples)?;
            say(
                out,
                &format!("wrote {count} samples, manifest {}\n", manifest.display()),
            )?;
            Ok(EXIT_OK)
        }
        Command::Gradcheck {
            selector,
            threshold,
            seed,
        } => cmd_gradcheck(&selector, threshold, seed, out),
        Command::Ablate { axis, run } => cmd_ablate(&axis, &run.resolve()?, out),
        Command::Attention {
            checkpoint,
            manifest,
            index,
            out: dir,
        } => cmd_attention(&checkpoint, &manifest, index, &dir, out),
    }
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    create_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("config.txt"), &cfg.to_text())?;
    let every = (cfg.model.max_iter / 20).max(1);
    let mut log = String::new();
    let outcome = train_run(cfg, |it, l| {
        if it % every == 0 {
            let _ = writeln!(log, "iter {it} loss {:.5}", l.total);
        }
    })?;
    outcome.model.save(cfg.out_dir.join("model.sck"))?;
    write_text(&cfg.out_dir.join("loss.csv"), &loss_csv(&outcome.losses))?;
    let metrics = report(&outcome.val, &CLASS_NAMES)?;
    write_text(&cfg.out_dir.join("metrics.txt"), &metrics)?;
    say(out, &log)?;
    say(
        out,
        &format!(
            "trained {} iterations in {:.1}s\n{metrics}",
            outcome.losses.len(),
            outcome.seconds
        ),
    )?;
    Ok(EXIT_OK)
}

pub fn cmd_eval(
    checkpoint: Option<&Path>,
    manifest: &Path,
    dir: Option<&Path>,
    score_truth: bool,
    out: &mut dyn Write,
) -> Result<i32> {
    let data = load_dataset(manifest)?;
    let cm = if score_truth {
        let k = data
            .iter()
            .map(|(_, m)| m.max_label() + 1)
            .max()
            .unwrap_or(1)
            .max(CLASS_NAMES.len());
        let mut cm = ConfusionMatrix::new(k);
        for (_, truth) in &data {
            cm.accumulate(truth, truth)?;
        }
        cm
    } else {
        let path =
            checkpoint.ok_or_else(|| Error::config("eval needs --checkpoint or --score-truth"))?;
        let model = Scsm::load(path)?;
        let cfg = model.config();
        for (image, _) in &data {
            if image.shape() != [cfg.in_channels, cfg.height, cfg.width] {
                return Err(Error::Incompatible(format!(
                    "checkpoint expects [{}, {}, {}] images, dataset has {:?}",
                    cfg.in_channels,
                    cfg.height,
                    cfg.width,
                    image.shape()
                )));
            }
        }
        evaluate(&model, &data)?
    };
    let text = report(&cm, &CLASS_NAMES)?;
    if let Some(dir) = dir {
        create_dir(dir)?;
        write_text(&dir.join("metrics.txt"), &text)?;
    }
    say(out, &text)?;
    Ok(EXIT_OK)
}

pub fn cmd_gradcheck(
    selector: &str,
    threshold: f64,
    seed: u64,
    out: &mut dyn Write,
) -> Result<i32> {
    let suites = Suite::parse(selector)?;
    let mut all_pass = true;
    for s in suites {
        let r = run_suite(s, seed)?;
        let pass = r.worst < threshold;
        all_pass &= pass;
        say(
            out,
            &format!(
                "{:<6} worst={:.3e} checked={} {}\n",
                s.name(),
                r.worst,
                r.checked,
                if pass { "pass" } else { "FAIL" }
            ),
        )?;
    }
    Ok(if all_pass { EXIT_OK } else { EXIT_NUMERIC })
}

/// Named configuration variants along one ablation axis.
pub fn ablation_variants(axis: &str, base: &ScsmConfig) -> Result<Vec<(String, ScsmConfig)>> {
    let with = |f: &dyn Fn(&mut ScsmConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let variants: Vec<(String, ScsmConfig)> = match axis {
        "frequency" => [1, 4, 8, 16, 32]
            .into_iter()
            .filter(|m| base.c_attn % m == 0)
            .map(|m| (format!("M={m}"), with(&|c| c.frequencies = m)))
            .collect(),
        "block" => {
            let (fh, fw) = base.feature_extents();
            [2, 4, 8]
                .into_iter()
                .filter(|&b| b <= fh.min(fw))
                .map(|b| (format!("block={b}"), with(&|c| c.block = (b, b))))
                .collect()
        }
        "angles" => vec![
            (
                "identical".into(),
                with(&|c| c.head.identical_angles = true),
            ),
            (
                "different".into(),
                with(&|c| c.head.identical_angles = false),
            ),
        ],
        "rope" => vec![
            ("no-rope".into(), with(&|c| c.head.rope = false)),
            ("rope".into(), with(&|c| c.head.rope = true)),
        ],
        "loss" => [0.4, 0.8, 1.0]
            .into_iter()
            .map(|w| (format!("L_d weight={w}"), with(&|c| c.loss_weights[1] = w)))
            .collect(),
        _ => return Err(Error::config(format!("unknown ablation axis {axis:?}"))),
    };
    Ok(variants)
}

pub fn cmd_ablate(axis: &str, cfg: &RunConfig, out: &mut dyn Write) -> Result<i32> {
    let variants = ablation_variants(axis, &cfg.model)?;
    create_dir(&cfg.out_dir)?;
    let mut table = format!(
        "# ablation over {axis}, seed {}; desk-scale relative ordering only, absolute values are not comparable to published benchmarks\nvariant\tmiou\taf\toa\tseconds\n",
        cfg.seed
    );
    for (name, model) in variants {
        let run = RunConfig {
            model,
            ..cfg.clone()
        };
        let o = train_run(&run, |_, _| {})?;
        let s = o.summary;
        writeln!(
            table,
            "{name}\t{:.4}\t{:.4}\t{:.4}\t{:.1}",
            s.miou, s.af, s.oa, o.seconds
        )
        .unwrap();
    }
    write_text(&cfg.out_dir.join(format!("ablation_{axis}.txt")), &table)?;
    say(out, &table)?;
    Ok(EXIT_OK)
}

pub fn cmd_attention(
    checkpoint: &Path,
    manifest: &Path,
    index: usize,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<i32> {
    let model = Scsm::load(checkpoint)?;
    let data = load_dataset(manifest)?;
    let (image, _) = data
        .get(index)
        .ok_or_else(|| Error::config(format!("index {index} beyond the {} samples", data.len())))?;
    let fwd = model.forward(image)?;
    create_dir(dir)?;
    for (i, b) in fwd.attention.iter().enumerate() {
        write_tensor(dir.join(format!("block{i:03}_weights.sct")), &b.weights)?;
        if let Some(g) = &b.gate {
            write_tensor(dir.join(format!("block{i:03}_gate.sct")), g)?;
        }
    }
    write_mask(dir.join("pre_mask.pgm"), &fwd.pre_mask)?;
    write_mask(
        dir.join("prediction.pgm"),
        &crate::smg::argmax(&fwd.logits_o)?,
    )?;
    say(
        out,
        &format!(
            "wrote {} attention blocks to {}\n",
            fwd.attention.len(),
            dir.display()
        ),
    )?;
    Ok(EXIT_OK)
}
