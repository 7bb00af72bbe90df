use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use spiking_s4::checkpoint::Checkpoint;
use spiking_s4::config::RunConfig;
use spiking_s4::data::{self, manifest, read_wav, write_wav, AudioClip, Manifest, Split};
use spiking_s4::model::Model;
use spiking_s4::objective::{si_snr, summarize, write_metrics, MetricRecord};
use spiking_s4::profile::cost_report;
use spiking_s4::train::{evaluate, load_examples, write_loss_curve, Trainer};
use spiking_s4::{Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "spiking-s4", version, about = "Spiking state-space speech enhancement")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured SSM execution mode.
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Convolution,
    Recurrent,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Convolution => "convolution",
            Mode::Recurrent => "recurrent",
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic clean/noise/noisy dataset.
    Synth {
        /// Output directory (default: paths.data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train, writing checkpoints and a loss curve to paths.run_dir.
    Train {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Enhance one WAV file.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Clean reference; prints the SI-SNR change when given.
        #[arg(long)]
        clean: Option<PathBuf>,
    },
    /// Score a manifest split and write a per-utterance metric report.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to manifest.tsv under paths.data_dir.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: String,
        /// Metric report path (default: <run_dir>/metrics_<split>.jsonl).
        #[arg(long)]
        output: Option<PathBuf>,
        /// Score an all-pass mask instead of a model.
        #[arg(long)]
        identity: bool,
    },
    /// Report parameter and FLOP counts.
    Profile {
        /// STFT frames per sample (default: one second of audio).
        #[arg(long)]
        frames: Option<usize>,
        /// Profile a trained checkpoint instead of a fresh model.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
        ErrorClass::Io => 5,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(m) = cli.mode {
        cfg.model.mode = m.name().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn load_model(path: &Path, cli: &Cli) -> Result<Model> {
    let ckpt = Checkpoint::load(path)?;
    let mut model = Model::from_params(ckpt.header.config.model.clone(), ckpt.params)?;
    if let Some(cfg_path) = &cli.config {
        let cfg = RunConfig::load(cfg_path)?;
        let mut want = cfg.model.clone();
        want.mode = model.config().mode.clone();
        if want != *model.config() {
            return Err(Error::Checkpoint(format!(
                "checkpoint format v{} stores a model config that differs from {}",
                spiking_s4::checkpoint::VERSION,
                cfg_path.display()
            )));
        }
    }
    if let Some(m) = cli.mode {
        model.set_mode(m.name())?;
    }
    Ok(model)
}

fn synth(cli: &Cli, out: Option<&Path>) -> Result<()> {
    let cfg = load_config(cli)?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.data_dir.clone());
    create_dir(&dir)?;
    let m = data::generate_dataset(&cfg.dataset, cfg.seed, &dir)?;
    println!(
        "wrote {} triplets ({} train, {} val, {} test) to {}",
        m.records.len(),
        m.split(Split::Train).len(),
        m.split(Split::Val).len(),
        m.split(Split::Test).len(),
        dir.display()
    );
    println!("dataset_sha256={}", data::dataset_digest(&m)?);
    Ok(())
}

fn train(cli: &Cli, resume: Option<&Path>) -> Result<()> {
    let cfg = load_config(cli)?;
    let manifest = Manifest::read(&cfg.paths.data_dir.join(manifest::FILE_NAME))?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(cfg.clone(), Checkpoint::load(p)?)?,
        None => Trainer::new(cfg.clone())?,
    };
    let stft = trainer.model.stft().clone();
    let train: Vec<_> = load_examples(&manifest, Split::Train, &stft)?.into_iter().map(|(_, e)| e).collect();
    let val: Vec<_> = load_examples(&manifest, Split::Val, &stft)?.into_iter().map(|(_, e)| e).collect();
    let run = &cfg.paths.run_dir;
    create_dir(run)?;
    let last = run.join("last.ckpt");
    if resume.is_none() {
        trainer.checkpoint().save(&last)?;
    }
    println!(
        "training {} trainable parameters on {} examples ({} val), mode {}",
        trainer.model.params.trainable_count(),
        train.len(),
        val.len(),
        trainer.model.config().mode
    );
    while trainer.epoch < cfg.train.epochs {
        let (log, improved) = match trainer.run_epoch(&train, &val) {
            Ok(r) => r,
            Err(e) => {
                eprintln!("aborting; last good checkpoint kept at {}", last.display());
                return Err(e);
            }
        };
        println!(
            "epoch {:>3}  train {:>9.4}  val {:>9.4}  val si-snr {:>7.3} dB (noisy {:.3}){}",
            log.epoch,
            log.train_loss,
            log.val_loss,
            log.val_si_snr,
            log.val_si_snr_noisy,
            if improved { "  *" } else { "" }
        );
        let ck = trainer.checkpoint();
        ck.save(&last)?;
        if improved {
            ck.save(&run.join("best.ckpt"))?;
        }
        write_loss_curve(&run.join("loss_curve.csv"), &trainer.history)?;
    }
    Ok(())
}

fn enhance(cli: &Cli, checkpoint: &Path, input: &Path, output: &Path, clean: Option<&Path>) -> Result<()> {
    let model = load_model(checkpoint, cli)?;
    let noisy = read_wav(input)?;
    if noisy.sample_rate != model.config().sample_rate {
        return Err(Error::Input(format!(
            "{} is sampled at {} Hz, the model expects {} Hz",
            input.display(),
            noisy.sample_rate,
            model.config().sample_rate
        )));
    }
    let (out, _) = model.enhance(&noisy.samples)?;
    write_wav(&AudioClip::new(out.clone(), noisy.sample_rate), output)?;
    println!("wrote {} samples to {}", out.len(), output.display());
    if let Some(c) = clean {
        let reference = read_wav(c)?;
        let rec = MetricRecord::new(
            input.display().to_string(),
            si_snr(&noisy.samples, &reference.samples)?,
            si_snr(&out, &reference.samples)?,
        );
        println!(
            "si_snr_noisy={:.4} si_snr_enhanced={:.4} delta={:.4}",
            rec.si_snr_noisy, rec.si_snr_enhanced, rec.delta
        );
    }
    Ok(())
}

fn eval(
    cli: &Cli,
    checkpoint: Option<&Path>,
    manifest_path: Option<&Path>,
    split: &str,
    output: Option<&Path>,
    identity: bool,
) -> Result<()> {
    let cfg = load_config(cli)?;
    let split: Split = split.parse()?;
    let mpath = manifest_path.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.data_dir.join(manifest::FILE_NAME));
    let manifest = Manifest::read(&mpath)?;
    let records: Vec<MetricRecord> = if identity {
        let stft = spiking_s4::dsp::Stft::new(cfg.model.stft())?;
        let recs = manifest.split(split);
        if recs.is_empty() {
            return Err(Error::Input(format!("split `{split}` is empty")));
        }
        recs.into_iter()
            .map(|r| {
                let (clean, noisy) = manifest.load(r)?;
                let spec = stft.stft(&noisy.samples)?;
                let out = stft.istft(&spec, noisy.len())?;
                Ok(MetricRecord::new(
                    r.id.clone(),
                    si_snr(&noisy.samples, &clean.samples)?,
                    si_snr(&out, &clean.samples)?,
                ))
            })
            .collect::<Result<_>>()?
    } else {
        let ck = checkpoint.ok_or_else(|| Error::Config("eval needs --checkpoint or --identity".into()))?;
        let model = load_model(ck, cli)?;
        let examples = load_examples(&manifest, split, model.stft())?;
        if examples.is_empty() {
            return Err(Error::Input(format!("split `{split}` is empty")));
        }
        let ids: Vec<String> = examples.iter().map(|(id, _)| id.clone()).collect();
        let ex: Vec<_> = examples.into_iter().map(|(_, e)| e).collect();
        evaluate(&model, &ex, cfg.train.batch_size, cfg.train.lambda)?.records(&ids)
    };
    let out = output
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.run_dir.join(format!("metrics_{split}.jsonl")));
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let file = std::fs::File::create(&out).map_err(|e| Error::io(&out, e))?;
    write_metrics(std::io::BufWriter::new(file), &records).map_err(|e| Error::io(&out, e))?;
    let s = summarize(&records);
    println!("utterances={}", s.count);
    println!("si_snr_noisy_mean={:.4}", s.mean_si_snr_noisy);
    println!("si_snr_enhanced_mean={:.4} std={:.4}", s.mean_si_snr_enhanced, s.std_si_snr_enhanced);
    println!("delta_mean={:.4} std={:.4}", s.mean_delta, s.std_delta);
    println!("report={}", out.display());
    Ok(())
}

fn profile(cli: &Cli, frames: Option<usize>, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = load_config(cli)?;
    let model = match checkpoint {
        Some(p) => load_model(p, cli)?,
        None => Model::new(cfg.model.clone(), cfg.seed)?,
    };
    let t = frames.unwrap_or_else(|| model.config().stft().frames(model.config().sample_rate as usize));
    if t == 0 {
        return Err(Error::Config("frames must be at least 1".into()));
    }
    let probe = data::synthesize(&cfg.dataset, cfg.seed, 0)?;
    let report = cost_report(&model, t, Some(&probe.noisy.samples))?;
    print!("{}", report.render());
    let doubled = cost_report(&model, 2 * t, None)?;
    println!("flops_ratio_2t={:.4}", doubled.total_flops() as f64 / report.total_flops() as f64);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { out } => synth(cli, out.as_deref()),
        Command::Train { resume } => train(cli, resume.as_deref()),
        Command::Enhance { checkpoint, input, output, clean } => enhance(cli, checkpoint, input, output, clean.as_deref()),
        Command::Eval { checkpoint, manifest, split, output, identity } => {
            eval(cli, checkpoint.as_deref(), manifest.as_deref(), split, output.as_deref(), *identity)
        }
        Command::Profile { frames, checkpoint } => profile(cli, *frames, checkpoint.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
