use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use vtn_core::gradcheck::{check_names, run_check, GradcheckOptions};
use vtn_core::synth::SceneSpec;
use vtn_core::tape::ALL_OPS;
use vtn_core::OpKind;

use crate::config::{RunConfig, VariantName};
use crate::dataset::{generate, SceneFile};
use crate::error::{exit, AppError, Result};
use crate::run::{eval_checkpoint, restore, train_grid, train_run};
use crate::visualize::{read_pgm, render, snapshot, summarize};

#[derive(Parser, Debug)]
#[command(name = "vtn", version, about = "Train, check and inspect channel-wise warping networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated variants; runs a grid into `<out_dir>/<variant>-seed<k>`.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Comma-separated seeds for the grid.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on its configured dataset and print JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        /// Random cases per op.
        #[arg(long)]
        cases: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Corrupt one op's backward (fault-injection fixture).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Export warp fields, warped features and candidate probabilities.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset image index.
        #[arg(long, conflicts_with = "image")]
        index: Option<usize>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Binary PGM of the model's input size.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Pixels `row,col` on the warped map for probability maps; defaults to the centre.
        #[arg(long = "pixel", value_parser = parse_pixel)]
        pixels: Vec<(usize, usize)>,
        #[arg(long, default_value_t = 8)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a dataset to blobs plus a manifest.
    DatasetGen {
        /// Scene spec JSON; the built-in benchmark when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

fn parse_pixel(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected row,col")?;
    let p = |t: &str| t.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((p(a)?, p(b)?))
}

/// Runs a parsed command, writing human output to `out` and diagnostics to
/// `err`. Returns the process exit code.
pub fn run(cli: Cli, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match dispatch(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Train {
            config,
            variants,
            seeds,
            out: out_dir,
        } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(dir) = out_dir {
                cfg.out_dir = dir;
            }
            if variants.is_empty() && seeds.is_empty() {
                match train_run(&cfg, &cfg.out_dir, err)? {
                    Some(r) => {
                        let _ = writeln!(out, "{}", serde_json::to_string_pretty(&r).expect("report"));
                    }
                    None => {
                        let _ = writeln!(out, "wrote initialization checkpoint to {}", cfg.out_dir.display());
                    }
                }
            } else {
                let variants = if variants.is_empty() {
                    vec![cfg.variant]
                } else {
                    variants
                        .iter()
                        .map(|v| {
                            VariantName::parse(v)
                                .ok_or_else(|| AppError::config("--variants", format!("unknown variant '{v}'")))
                        })
                        .collect::<Result<_>>()?
                };
                let seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds };
                let summary = train_grid(&cfg, &variants, &seeds, err)?;
                let _ = writeln!(out, "{}", serde_json::to_string_pretty(&summary).expect("summary"));
            }
            Ok(exit::OK)
        }
        Command::Eval { checkpoint, split } => {
            let r = eval_checkpoint(&checkpoint, split == SplitArg::Train)?;
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&r).expect("report"));
            Ok(exit::OK)
        }
        Command::Gradcheck {
            cases,
            seed,
            inject_fault,
        } => gradcheck(cases, seed, inject_fault, out),
        Command::Visualize {
            checkpoint,
            index,
            split,
            image,
            pixels,
            scale,
            out: dir,
        } => {
            let (_, data, mut model) = restore::<f64>(&checkpoint)?;
            let (h, w) = (data.spec.height, data.spec.width);
            let img = match (image, index) {
                (Some(path), _) => {
                    let (iw, ih, px) = read_pgm(&path)?;
                    if (ih, iw) != (h, w) {
                        return Err(AppError::config("--image", format!("image is {ih}x{iw}, model expects {h}x{w}")));
                    }
                    px
                }
                (None, idx) => {
                    let s = if split == SplitArg::Train { &data.train } else { &data.test };
                    let i = idx.unwrap_or(0);
                    if i >= s.len() {
                        return Err(AppError::config("--index", format!("{i} out of range for {} images", s.len())));
                    }
                    s.image(i).to_vec()
                }
            };
            let snap = snapshot(&mut model, &img, h, w)?;
            let pixels = if pixels.is_empty() {
                vec![(snap.height / 2, snap.width / 2)]
            } else {
                pixels
            };
            let files = render(&snap, &pixels, &dir, scale)?;
            summarize(&snap, out);
            let _ = writeln!(out, "wrote {} files to {}", files.len(), dir.display());
            Ok(exit::OK)
        }
        Command::DatasetGen {
            spec,
            train,
            test,
            seed,
            out: dir,
        } => {
            if train == 0 || test == 0 {
                return Err(AppError::config("--train/--test", "both splits need at least one image"));
            }
            let spec = match spec {
                Some(p) => SceneFile::load(&p)?,
                None => SceneSpec::desk_default(),
            };
            let manifest = generate(&spec, train, test, seed, &dir)?;
            let _ = writeln!(
                out,
                "wrote {} train / {} test images to {} (manifest {})",
                manifest.train.count,
                manifest.test.count,
                dir.display(),
                manifest.hash()
            );
            Ok(exit::OK)
        }
    }
}

fn gradcheck(cases: Option<usize>, seed: Option<u64>, fault: Option<String>, out: &mut dyn Write) -> Result<i32> {
    let mut opts = GradcheckOptions::default();
    if let Some(n) = cases {
        if n == 0 {
            return Err(AppError::config("--cases", "must be >= 1"));
        }
        opts.cases = n;
        opts.pipeline_cases = n;
        opts.layer_cases = opts.layer_cases.min(n);
    }
    if let Some(s) = seed {
        opts.seed = s;
    }
    if let Some(name) = fault {
        let op: OpKind = ALL_OPS
            .into_iter()
            .find(|o| o.name() == name)
            .ok_or_else(|| AppError::config("--inject-fault", format!("unknown op '{name}'")))?;
        opts.fault = Some(op);
    }
    let start = std::time::Instant::now();
    let mut failed = Vec::new();
    let _ = writeln!(out, "{:<24} {:>6} {:>12}  status", "op", "cases", "max_rel_err");
    for name in check_names() {
        let Some(r) = run_check(name, &opts)? else { continue };
        let _ = writeln!(
            out,
            "{:<24} {:>6} {:>12.3e}  {}",
            r.name,
            r.cases,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(r.name.to_string());
        }
    }
    let _ = writeln!(
        out,
        "tolerance {:.0e}, {:.2} s",
        opts.tolerance,
        start.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        Ok(exit::OK)
    } else {
        Err(AppError::Gradcheck(failed))
    }
}
