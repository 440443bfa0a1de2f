use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gridguide::config::{parse_dfa_stages, RunConfig};
use gridguide::data::load_dataset;
use gridguide::imageio::{read_ppm, write_atomic};
use gridguide::pipeline::{self, Model, Overrides};
use gridguide::{Error, Result};

#[derive(Parser)]
#[command(name = "gridguide", version, about = "Text-grounded placement guidance toolkit")]
struct Cli {
    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or checkpoint file for `train`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(flatten)]
    ablation: Ablation,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Ablation {
    /// Stages using deformable alignment, e.g. `2,3,4` or `none`.
    #[arg(long, global = true, value_name = "LIST")]
    dfa_stages: Option<String>,
    #[arg(long, global = true)]
    no_offsets: bool,
    #[arg(long, global = true)]
    no_scalar: bool,
    #[arg(long, global = true)]
    no_card: bool,
    #[arg(long, global = true)]
    no_guidance: bool,
    #[arg(long, global = true)]
    no_activation: bool,
    #[arg(long, global = true)]
    no_dilation: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene dataset.
    GenData {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        side: Option<usize>,
    },
    /// Train the fusion branch and the toy denoiser; writes a checkpoint.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Guided generation for one image and caption.
    Run {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        caption: String,
    },
    /// Placement metrics over a dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Per-head attention maps of one fusion stage.
    DumpAttn {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long)]
        stage: usize,
    },
}

fn overrides(a: &Ablation) -> Result<Overrides> {
    Ok(Overrides {
        dfa_stages: a.dfa_stages.as_deref().map(parse_dfa_stages).transpose()?,
        no_offsets: a.no_offsets,
        no_scalar: a.no_scalar,
        no_card: a.no_card,
        no_guidance: a.no_guidance,
        no_activation: a.no_activation,
        no_dilation: a.no_dilation,
    })
}

fn required(p: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.ok_or_else(|| Error::Usage(format!("missing {what}")))
}

fn out_dir(cli_out: &Option<PathBuf>) -> PathBuf {
    cli_out.clone().unwrap_or_else(|| PathBuf::from("."))
}

fn load_model(cfg: &RunConfig, ov: &Overrides, ckpt: Option<PathBuf>) -> Result<Model> {
    let path = required(ckpt.or_else(|| cfg.checkpoint.clone()), "--checkpoint")?;
    let mut model = Model::load(&path)?;
    model.configure_runtime(cfg, ov)?;
    Ok(model)
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let ov = overrides(&cli.ablation)?;
    match cli.command {
        Command::GenData { n, side } => {
            if let Some(n) = n {
                cfg.data.scenes = n;
            }
            if let Some(s) = side {
                cfg.data.side = s;
            }
            cfg.validate()?;
            let out = out_dir(&cli.out);
            let count = pipeline::gen_data(&cfg, &out)?;
            println!("{count}");
        }
        Command::Train { data, resume, epochs } => {
            ov.apply(&mut cfg);
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let data = required(data.or_else(|| cfg.data_dir.clone()), "--data")?;
            let samples = load_dataset(&data)?;
            let mut model = match resume {
                Some(p) => {
                    let mut m = Model::load(&p)?;
                    m.cfg.train.epochs = cfg.train.epochs;
                    m
                }
                None => Model::new(cfg.clone())?,
            };
            pipeline::train(&mut model, &samples, |e, l| println!("{e}\t{l:.9}"))?;
            let out = cli.out.clone().or(cfg.checkpoint.clone()).unwrap_or_else(|| PathBuf::from("model.ckpt"));
            model.save(&out)?;
            eprintln!("checkpoint written to {}", out.display());
        }
        Command::Run { checkpoint, image, caption } => {
            let model = load_model(&cfg, &ov, checkpoint)?;
            let img = read_ppm(&image)?;
            let out = pipeline::run(&model, &img, &caption)?;
            for p in pipeline::write_run(&out_dir(&cli.out), &out)? {
                println!("{}", p.display());
            }
        }
        Command::Eval { checkpoint, data } => {
            let model = load_model(&cfg, &ov, checkpoint)?;
            let data = required(data.or_else(|| cfg.data_dir.clone()), "--data")?;
            let report = pipeline::evaluate(&model, &load_dataset(&data)?)?;
            let dir = out_dir(&cli.out);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let path = dir.join("report.tsv");
            write_atomic(&path, report.to_tsv().as_bytes())?;
            let m = report.mean;
            println!("iou\t{:.6}\tsize\t{:.6}\tdist\t{:.6}", m.iou, m.size_score, m.dist_score);
        }
        Command::DumpAttn { checkpoint, image, caption, stage } => {
            if !(1..=4).contains(&stage) {
                return Err(Error::Usage(format!("stage must lie in 1..4, got {stage}")));
            }
            let model = load_model(&cfg, &ov, checkpoint)?;
            let img = read_ppm(&image)?;
            let dump = pipeline::attention_maps(&model, &img, &caption, stage)?;
            for p in pipeline::write_attention(&out_dir(&cli.out), stage, &dump)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
