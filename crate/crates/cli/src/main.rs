use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cbmt::data_io::{generate_synthetic, load_manifest_samples, Split, SynthSpec};
use cbmt::datamodel::{load_checkpoint, save_checkpoint, validate_config, CbmtConfig};
use cbmt::engine::{adapt, build_model, evaluate_model, train_source, write_adapt_outputs, AblationMode, AdaptOptions};
use cbmt::meanteacher::ModelAdapter;
use cbmt::plot::{render_curves, CsvTable, Series};
use cbmt::{CbmtError, ImageSampleF32};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cbmt", version, about = "Source-free domain adaptive segmentation with a class-balanced mean teacher")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised training on a labeled source manifest.
    TrainSource {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Labeled source manifest (`id,image_path,mask_path`).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapts a source checkpoint to unlabeled target images.
    Adapt {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        source_ckpt: PathBuf,
        /// Target manifest; masks, if listed, are ignored.
        #[arg(long)]
        target_data: PathBuf,
        /// Labeled target manifest scored after every epoch (logging only).
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// `cbmt`, `vanilla-pl` or `ablation:<pl|ema|ema+aug|ema+calib|full>`.
        #[arg(long, default_value = "cbmt")]
        mode: String,
    },
    /// Dice and ASSD of a checkpoint on a labeled manifest.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dice and foreground-fraction curves from one or more run logs.
    PlotCurves {
        #[arg(long, required = true, num_args = 1..)]
        runlog: Vec<PathBuf>,
        /// Series labels, in the order of `--runlog`.
        #[arg(long, num_args = 1..)]
        label: Vec<String>,
        /// An `.svg` file, or a directory that receives `curves.svg`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes the synthetic fundus-like benchmark.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        /// TOML file with generator settings; flags below override it.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        n_images: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        /// Square image side in pixels.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, env = "CBMT_SEED")]
        seed: Option<u64>,
    },
}

/// Configuration sources, lowest precedence first: defaults, `--config`,
/// `--set`, the named flags, `--seed`/`CBMT_SEED`.
#[derive(Args, Clone, Debug, Default)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any field, e.g. `--set roi_size=[128,128]` or `--set augment.flip_prob=0.3`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, env = "CBMT_SEED")]
    seed: Option<u64>,
    #[arg(long, alias = "lr_source")]
    lr_source: Option<f64>,
    #[arg(long, alias = "lr_adapt")]
    lr_adapt: Option<f64>,
    #[arg(long, alias = "epochs_source")]
    epochs_source: Option<usize>,
    #[arg(long, alias = "epochs_adapt")]
    epochs_adapt: Option<usize>,
    #[arg(long, alias = "batch_size")]
    batch_size: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, alias = "lambda_ema")]
    lambda_ema: Option<f64>,
    #[arg(long, alias = "pl_lr_factor")]
    pl_lr_factor: Option<f64>,
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), CbmtError> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(part) = parts.next() {
        if parts.peek().is_none() {
            if !cur.contains_key(part) {
                return Err(bad_field(key, "unknown field"));
            }
            cur.insert(part.to_string(), value);
            return Ok(());
        }
        cur = cur
            .get_mut(part)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| bad_field(key, "unknown section"))?;
    }
    Err(bad_field(key, "empty key"))
}

fn bad_field(field: &str, reason: &str) -> CbmtError {
    CbmtError::Config {
        field: field.to_string(),
        reason: reason.to_string(),
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ConfigArgs {
    fn resolve(&self) -> Result<CbmtConfig, CbmtError> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CbmtError::File {
                    path: p.clone(),
                    message: e.to_string(),
                })?;
                CbmtConfig::from_toml_str(&text)?
            }
            None => CbmtConfig::default(),
        };
        if !self.set.is_empty() {
            let mut table = toml::Table::try_from(&cfg).map_err(|e| bad_field("<config>", &e.to_string()))?;
            for kv in &self.set {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| bad_field(kv, "expected KEY=VALUE"))?;
                set_path(&mut table, k.trim(), parse_value(v.trim()))?;
            }
            cfg = table
                .try_into()
                .map_err(|e: toml::de::Error| bad_field("--set", &e.to_string()))?;
        }
        macro_rules! apply {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        apply!(lr_source, lr_adapt, epochs_source, epochs_adapt, batch_size, gamma, alpha, lambda_ema, pl_lr_factor, seed);
        validate_config(cfg)
    }
}

fn io_err(path: &Path, e: impl ToString) -> CbmtError {
    CbmtError::File {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CbmtError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn prepare_out(out: &Path, cfg: Option<&CbmtConfig>) -> Result<(), CbmtError> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    if let Some(cfg) = cfg {
        let text = cfg.to_toml_string();
        log::info!("effective config:\n{text}");
        write_text(&out.join("effective_config.toml"), &text)?;
    }
    Ok(())
}

fn load_split(path: &Path, split: Split, cfg: &CbmtConfig) -> Result<Vec<ImageSampleF32>, CbmtError> {
    let samples = load_manifest_samples::<f32>(path, split, cfg.roi_size)?;
    if samples.is_empty() {
        return Err(CbmtError::Empty(format!("dataset {}", path.display())));
    }
    Ok(samples)
}

fn parse_mode(mode: &str) -> Result<AblationMode, CbmtError> {
    match mode {
        "cbmt" => Ok(AblationMode::Full),
        "vanilla-pl" => Ok(AblationMode::PseudoLabel),
        m => match m.strip_prefix("ablation:") {
            Some(row) => row.parse(),
            None => Err(CbmtError::InvalidArgument(format!(
                "unknown mode `{m}` (expected cbmt, vanilla-pl or ablation:<row>)"
            ))),
        },
    }
}

fn run(cli: Cli) -> Result<(), CbmtError> {
    match cli.command {
        Command::TrainSource { cfg, data, out } => {
            let cfg = cfg.resolve()?;
            prepare_out(&out, Some(&cfg))?;
            let samples = load_split(&data, Split::Train, &cfg)?;
            let mut model = build_model::<f32>(&cfg);
            let run = train_source(&samples, &cfg, &mut model)?;
            let mut csv = String::from("epoch,lr,loss\n");
            for (e, l) in run.epoch_losses.iter().enumerate() {
                csv.push_str(&format!("{},{},{}\n", e, cfg.lr_source_at(e), l));
            }
            write_text(&out.join("source_loss.csv"), &csv)?;
            save_checkpoint(&out.join("source.bin"), &run.params, cfg.hash())?;
            log::info!("wrote {}", out.join("source.bin").display());
        }
        Command::Adapt {
            cfg,
            source_ckpt,
            target_data,
            eval_data,
            out,
            mode,
        } => {
            let mode = parse_mode(&mode)?;
            let cfg = mode.configure(&cfg.resolve()?);
            prepare_out(&out, Some(&cfg))?;
            let source = load_checkpoint::<f32>(&source_ckpt)?.params;
            let mut target = load_split(&target_data, Split::Train, &cfg)?;
            for s in &mut target {
                s.mask = None;
            }
            let eval = eval_data.map(|p| load_split(&p, Split::Test, &cfg)).transpose()?;
            let opts = AdaptOptions {
                eval_set: eval.as_deref(),
                out_dir: Some(&out),
            };
            let run = adapt(&target, &source, &cfg, || build_model::<f32>(&cfg), opts)?;
            write_adapt_outputs(&run, &cfg, mode.as_str(), &out)?;
            log::info!("wrote {}", out.join("teacher_final.bin").display());
        }
        Command::Evaluate { cfg, ckpt, data, out } => {
            let cfg = cfg.resolve()?;
            prepare_out(&out, Some(&cfg))?;
            let samples = load_split(&data, Split::Test, &cfg)?;
            let params = load_checkpoint::<f32>(&ckpt)?.params;
            let mut model = build_model::<f32>(&cfg);
            model.read_params().check_compatible(&params)?;
            model.write_params(&params)?;
            let report = evaluate_model(&mut model, &samples, cfg.batch_size)?;
            write_text(&out.join("per_image.csv"), &report.result.per_image_csv())?;
            let json = serde_json::to_string_pretty(&report.result.aggregate_json()).expect("json");
            write_text(&out.join("metrics.json"), &(json + "\n"))?;
            log::info!("mean dice {:.4}", report.result.mean_dice());
        }
        Command::PlotCurves { runlog, label, out } => {
            if !label.is_empty() && label.len() != runlog.len() {
                return Err(CbmtError::InvalidArgument(format!(
                    "{} labels for {} run logs",
                    label.len(),
                    runlog.len()
                )));
            }
            let series = runlog
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                    let table = CsvTable::parse(&text, &p.display().to_string())?;
                    let label = label.get(i).cloned().unwrap_or_else(|| {
                        p.parent()
                            .and_then(|d| d.file_name())
                            .map(|d| d.to_string_lossy().into_owned())
                            .unwrap_or_else(|| p.display().to_string())
                    });
                    Ok(Series { label, table })
                })
                .collect::<Result<Vec<_>, CbmtError>>()?;
            let (svg, panels) = render_curves(&series)?;
            let path = if out.extension().is_some_and(|e| e == "svg") {
                if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
                }
                out
            } else {
                prepare_out(&out, None)?;
                out.join("curves.svg")
            };
            write_text(&path, &svg)?;
            log::info!("wrote {} with panels {:?}", path.display(), panels);
        }
        Command::SynthGen {
            out,
            spec,
            n_images,
            n_test,
            size,
            seed,
        } => {
            let mut s = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
                    toml::from_str::<SynthSpec>(&text).map_err(|e| bad_field("--spec", &e.to_string()))?
                }
                None => SynthSpec::default(),
            };
            if let Some(n) = n_images {
                s.n_images = n;
            }
            if let Some(n) = n_test {
                s.n_test = n;
            }
            if let Some(side) = size {
                let scale = side as f64 / s.image_size[0] as f64;
                s.image_size = [side, side];
                s.disc_radius_range = s.disc_radius_range.map(|r| r * scale);
            }
            if let Some(seed) = seed {
                s.seed = seed;
            }
            prepare_out(&out, None)?;
            generate_synthetic(&s, &out)?;
            write_text(&out.join("synth_spec.toml"), &toml::to_string(&s).expect("spec serializes"))?;
            let cfg = CbmtConfig {
                roi_size: s.image_size,
                ..CbmtConfig::default()
            };
            write_text(&out.join("cbmt.toml"), &cfg.to_toml_string())?;
            log::info!("wrote benchmark under {}", out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &CbmtError) -> u8 {
    match e {
        CbmtError::Config { .. }
        | CbmtError::Empty(_)
        | CbmtError::InvalidArgument(_)
        | CbmtError::Unlabeled { .. }
        | CbmtError::Parse { .. } => 2,
        _ => 1,
    }
}

#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn tune_allocator() {
    // Large convolution buffers are reused from the heap rather than mapped
    // and zeroed on every batch.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 256 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 512 << 20);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn tune_allocator() {}

fn main() -> ExitCode {
    tune_allocator();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
