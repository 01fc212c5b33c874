use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vitq::checkpoint::{self, Checkpoint};
use vitq::config::RunConfig;
use vitq::data::{self, CalibrationSource, LabeledSet};
use vitq::prompt::{run_banks, PromptBank, ToyClassifier, ToyGenerator};
use vitq::ptq::run_ptq;
use vitq::teacher::{evaluate, pretrain};
use vitq::vit::TinyViT;

#[derive(Parser)]
#[command(name = "vitq", version, about = "Post-training quantization for small vision transformers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// key=value config file; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. --set ptq.iters=100
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the full-precision teacher on toy data
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Initialize rescales and quantizers from calibration images
    Calibrate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// e.g. W4A4, W1.58A8; "none" keeps the full-precision path
        #[arg(long)]
        bits: Option<String>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the joint quantization optimization
    Quantize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Top-1 accuracy of both paths and their agreement
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate with quantization disabled
        #[arg(long)]
        bypass: bool,
    },
    /// Learn multi-mode prompt banks on the toy generator and classifier
    PromptLearn {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long = "M")]
        m: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a deterministic toy dataset
    GenToyData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim()).map_err(anyhow::Error::msg)?;
    }
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, v).map_err(anyhow::Error::msg)?;
        }
    }
    for (k, v) in cfg.entries() {
        println!("config {k}={v}");
    }
    Ok(cfg)
}

fn path(p: Option<PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

fn show<T: ToString>(v: Option<T>) -> Option<String> {
    v.map(|v| v.to_string())
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    match p {
        Some(p) => Ok(p),
        None => bail!("missing --{flag}"),
    }
}

fn write_report(path: &Option<PathBuf>, text: &str) -> Result<()> {
    if let Some(p) = path {
        checkpoint::write_atomic(p, text.as_bytes())
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn load(p: &Path) -> Result<TinyViT> {
    checkpoint::load_model(p).with_context(|| format!("loading {}", p.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Pretrain {
            common,
            out,
            report,
            seed,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("path.out", path(out)),
                    ("path.report", path(report)),
                    ("pretrain.seed", show(seed)),
                ],
            )?;
            let out = need(&cfg.out, "out")?;
            if cfg.data.image_size != cfg.model.image_size || cfg.data.channels != cfg.model.channels
            {
                bail!("toy data geometry does not match the model input");
            }
            let mut model = TinyViT::new(cfg.model.clone(), cfg.quant_mode())?;
            let train = cfg.data.teacher_set();
            let rep = pretrain(&mut model, &train, &cfg.pretrain)?;
            let eval = cfg.data.generate().eval;
            if !eval.is_empty() {
                let e = evaluate(&model, &eval)?;
                println!("pretrain fp_accuracy={:?}", e.fp_accuracy);
            }
            let mut text = String::new();
            for (i, l) in &rep.losses {
                text.push_str(&format!("iter={i} loss={l:?}\n"));
            }
            write_report(&cfg.report, &text)?;
            checkpoint::save_model(&model, out)?;
            println!("wrote {}", out.display());
        }
        Cmd::Calibrate {
            common,
            ckpt,
            data,
            bits,
            samples,
            out,
        } => {
            let bypass = matches!(bits.as_deref(), Some("none" | "fp"));
            let bits = if bypass { None } else { bits };
            let cfg = resolve(
                &common,
                &[
                    ("path.ckpt", path(ckpt)),
                    ("path.data", path(data)),
                    ("path.out", path(out)),
                    ("quant.bits", bits),
                    ("calib.samples", show(samples)),
                ],
            )?;
            let mut model = load(need(&cfg.ckpt, "ckpt")?)?;
            let src = CalibrationSource::from_dir(need(&cfg.data_dir, "data")?)?;
            src.check_shape(model.config())?;
            model.set_bits(cfg.bits.clone());
            model.mode_mut().quantize_attn_probs = cfg.quantize_attn_probs;
            model.mode_mut().enabled = !bypass;
            let batch = src.head_batch(cfg.calib_samples, model.config())?;
            model.calibrate(&batch, &cfg.calibration)?;
            let out = need(&cfg.out, "out")?;
            checkpoint::save_model(&model, out)?;
            println!("calibrated bits={} samples={}", cfg.bits, batch.shape()[0]);
            println!("wrote {}", out.display());
        }
        Cmd::Quantize {
            common,
            ckpt,
            data,
            out,
            report,
            seed,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("path.ckpt", path(ckpt)),
                    ("path.data", path(data)),
                    ("path.out", path(out)),
                    ("path.report", path(report)),
                    ("ptq.seed", show(seed)),
                ],
            )?;
            let mut model = load(need(&cfg.ckpt, "ckpt")?)?;
            let src = CalibrationSource::from_dir(need(&cfg.data_dir, "data")?)?;
            let out = need(&cfg.out, "out")?;
            let rep = run_ptq(&mut model, &src, &cfg.ptq, &cfg.loss)?;
            write_report(&cfg.report, &rep.to_lines())?;
            checkpoint::save_model(&model, out)?;
            println!(
                "quantize init_loss={:?} final_loss={:?}",
                rep.init.total, rep.final_.total
            );
            println!("wrote {}", out.display());
        }
        Cmd::Eval {
            common,
            ckpt,
            data,
            bypass,
        } => {
            let cfg = resolve(&common, &[("path.ckpt", path(ckpt)), ("path.data", path(data))])?;
            let mut model = load(need(&cfg.ckpt, "ckpt")?)?;
            if bypass {
                model.mode_mut().enabled = false;
            }
            let set = LabeledSet::from_dir(need(&cfg.data_dir, "data")?)?;
            let e = evaluate(&model, &set)?;
            println!(
                "eval fp_accuracy={:?} q_accuracy={:?} agreement={:?} samples={}",
                e.fp_accuracy,
                e.q_accuracy,
                e.agreement,
                set.len()
            );
        }
        Cmd::PromptLearn {
            common,
            classes,
            m,
            out,
            report,
            seed,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("prompt.classes", show(classes)),
                    ("prompt.m", show(m)),
                    ("path.out", path(out)),
                    ("path.report", path(report)),
                    ("prompt.seed", show(seed)),
                ],
            )?;
            let out = need(&cfg.out, "out")?;
            let k = cfg.prompt_classes;
            if k == 0 {
                bail!("prompt learning needs at least one class");
            }
            let s = cfg.prompt.seed;
            let gen = ToyGenerator::new(cfg.prompt_tokens, cfg.prompt_dim, 16, 16, s);
            let clf = ToyClassifier::new(gen.channels, gen.size, 32, k, s.wrapping_add(1));
            let banks = (0..k)
                .map(|c| {
                    PromptBank::init(
                        c,
                        cfg.prompt_m,
                        cfg.prompt_tokens,
                        cfg.prompt_dim,
                        cfg.prompt_semantic,
                        s.wrapping_add(2),
                    )
                })
                .collect::<vitq::Result<Vec<_>>>()?;
            let results = run_banks(&banks, &gen, &clf, &cfg.prompt)?;
            let mut ck = Checkpoint::default();
            ck.config.insert("prompt.seed".into(), s.to_string());
            let mut text = String::new();
            for (bank, rep) in &results {
                ck.banks.push(bank.to_record());
                text.push_str(&rep.to_lines());
                println!(
                    "prompt class={} init_cls={:?} final_cls={:?} init_cos={:?} final_cos={:?}",
                    bank.class_id,
                    rep.init.cls_mean,
                    rep.final_.cls_mean,
                    rep.init.mean_abs_cosine,
                    rep.final_.mean_abs_cosine
                );
            }
            write_report(&cfg.report, &text)?;
            ck.write(out)?;
            println!("wrote {}", out.display());
        }
        Cmd::GenToyData {
            common,
            classes,
            per_class,
            seed,
            out,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("data.classes", show(classes)),
                    ("data.per_class", show(per_class)),
                    ("data.seed", show(seed)),
                    ("path.out", path(out)),
                ],
            )?;
            let out = need(&cfg.out, "out")?;
            if cfg.data.classes == 0 {
                bail!("class count must be positive");
            }
            let split = cfg.data.generate();
            data::write_dataset(out, &split)?;
            println!(
                "gen-toy-data calibration={} eval={}",
                split.calibration.len(),
                split.eval.len()
            );
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
