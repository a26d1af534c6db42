use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use mcc::harness::render::{read_image_png, write_heatmap_png, write_image_png, write_label_png};
use mcc::harness::{datasets, evaluate, mask_sweep, Checkpoint, MiouReport, TrainConfig, Trainer};
use mcc::masking::{mask_stats, MaskStats};
use mcc::pseudo::ReliableLabel;
use mcc::{Error, Result};

#[derive(Parser)]
#[command(name = "mcc", version, about = "Masked collaborative contrast on a toy vision transformer")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a key=value config; writes a log, a checkpoint and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Score pseudo labels and decoder output of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
    /// Write CAM heatmaps and the reliable label map for one PNG image.
    Cam {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Comma-separated 0/1 image labels; predicted by the classifier when omitted.
        #[arg(long)]
        labels: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Statistics of sampled key masks as CSV.
    MaskStats {
        #[arg(long)]
        ratio: f64,
        #[arg(long)]
        scale: usize,
        #[arg(long, default_value_t = 8)]
        grid: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// One short training run per (ratio, scale) cell; CSV on stdout.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        scales: Vec<usize>,
    },
    /// Render a synthetic sample and its ground truth as PNG.
    Sample {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::parse(&fs::read_to_string(path)?)
}

fn print_report(name: &str, r: &MiouReport) {
    let cells: Vec<String> = r
        .per_class
        .iter()
        .map(|v| v.map_or("nan".into(), |v| format!("{v:.4}")))
        .collect();
    println!("{name},{:.4},{}", r.mean, cells.join(","));
}

fn train(config: &Path, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = read_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("config.txt"), cfg.to_text())?;
    let (train, val) = datasets(&cfg)?;
    let mut t = Trainer::new(&cfg, train)?;
    let mut log = std::io::BufWriter::new(fs::File::create(out.join("train_log.jsonl"))?);
    let start = Instant::now();
    if let Err(e) = t.run(Some(&mut log)) {
        log.flush()?;
        let dump = out.join("failure.mcck");
        t.checkpoint().save(&dump)?;
        eprintln!("training aborted at step {}; state written to {}", t.step, dump.display());
        return Err(e);
    }
    log.flush()?;
    t.checkpoint().save(&out.join("model.mcck"))?;
    let report = evaluate(&t.model, &t.store, &val)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(out.join("metrics.json"), json)?;
    eprintln!("trained {} steps in {:.1}s", t.step, start.elapsed().as_secs_f64());
    println!("metric,mean,per_class...");
    print_report("pseudo_miou", &report.pseudo);
    print_report("seg_miou", &report.seg);
    Ok(())
}

fn eval(checkpoint: &Path, split: Split) -> Result<()> {
    let t = Trainer::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let (train, val) = datasets(t.config())?;
    let data = match split {
        Split::Train => train,
        Split::Val => val,
    };
    let report = evaluate(&t.model, &t.store, &data)?;
    println!("metric,mean,per_class...");
    print_report("pseudo_miou", &report.pseudo);
    print_report("seg_miou", &report.seg);
    Ok(())
}

fn cam(checkpoint: &Path, image: &Path, labels: Option<&str>, out: Option<&Path>) -> Result<()> {
    let t = Trainer::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let cfg = t.config();
    let c = cfg.encoder.num_classes;
    let img = read_image_png(image)?;
    let labels: Vec<bool> = match labels {
        Some(s) => {
            let v: Vec<bool> = s.split(',').map(|x| x.trim() == "1").collect();
            if v.len() != c {
                return Err(Error::config(format!("expected {c} labels, got {}", v.len())));
            }
            v
        }
        None => {
            let p = t.model.predict(&t.store, &img, &vec![true; c])?;
            let logits = p.cls_logits.data();
            let mut v: Vec<bool> = logits.iter().map(|&x| x > 0.0).collect();
            if !v.iter().any(|&b| b) {
                let best = (0..c).fold(0, |b, k| if logits[k] > logits[b] { k } else { b });
                v[best] = true;
            }
            v
        }
    };
    if !labels.iter().any(|&b| b) {
        return Err(Error::config("at least one label must be set"));
    }
    let pred = t.model.predict(&t.store, &img, &labels)?;
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| image.with_extension(""));
    fs::create_dir_all(&out)?;
    let p = cfg.encoder.patch_size;
    for k in (0..c).filter(|&k| labels[k]) {
        write_heatmap_png(&out.join(format!("cam_class{}.png", k + 1)), &pred.final_cam, k, p)?;
    }
    let label = t.model.pixel_label(&pred.final_cam)?;
    write_label_png(&out.join("label.png"), &label, c)?;
    let names: Vec<String> = (0..c).filter(|&k| labels[k]).map(|k| (k + 1).to_string()).collect();
    println!("classes {} written to {}", names.join(","), out.display());
    Ok(())
}

fn sample(config: Option<&Path>, split: Split, index: usize, out: &Path) -> Result<()> {
    let cfg = match config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    let (train, val) = datasets(&cfg)?;
    let data = match split {
        Split::Train => train,
        Split::Val => val,
    };
    let s = data
        .get(index)
        .ok_or_else(|| Error::config(format!("index {index} outside split of {}", data.len())))?;
    write_image_png(out, &s.image)?;
    let gt = ReliableLabel {
        height: s.image.height,
        width: s.image.width,
        labels: s.gt_mask.clone(),
    };
    write_label_png(&out.with_extension("gt.png"), &gt, cfg.encoder.num_classes)?;
    let labels: Vec<&str> = s.image_labels.iter().map(|&b| if b { "1" } else { "0" }).collect();
    println!("{}", labels.join(","));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, seed, out } => train(&config, seed, &out),
        Cmd::Eval { checkpoint, split } => eval(&checkpoint, split),
        Cmd::Cam {
            checkpoint,
            image,
            labels,
            out,
        } => cam(&checkpoint, &image, labels.as_deref(), out.as_deref()),
        Cmd::MaskStats {
            ratio,
            scale,
            grid,
            trials,
            seed,
        } => {
            let s = mask_stats(ratio, scale, grid, grid, trials, seed)?;
            println!("{}", MaskStats::CSV_HEADER);
            println!("{}", s.csv_row());
            Ok(())
        }
        Cmd::Sweep { config, ratios, scales } => {
            let cfg = read_config(&config)?;
            println!("{}", mcc::harness::sweep::CSV_HEADER);
            mask_sweep(&cfg, &ratios, &scales, |row| {
                println!("{}", row.csv_row());
                let _ = std::io::stdout().flush();
            })?;
            Ok(())
        }
        Cmd::Sample {
            config,
            split,
            index,
            out,
        } => sample(config.as_deref(), split, index, &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
