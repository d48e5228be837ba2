use std::path::PathBuf;

use clap::{Parser, Subcommand};

use hsiscan::data;
use hsiscan::error::{Error, Result};
use hsiscan::eval;
use hsiscan::routes::{Direction, FlattenOrder};
use hsiscan::train::{self, ModelCheckpoint};
use hsiscan::verify;
use hsiscan::{bench, Real};

#[derive(Parser)]
#[command(
    name = "hsiscan",
    version,
    about = "Hyperspectral image classification with 3-D spectral-spatial selective state-space scanning"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a JSON config and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test side of a stratified split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split seed; defaults to the checkpoint's training seed.
        #[arg(long)]
        split_seed: Option<u64>,
        /// Train fraction; defaults to the checkpoint's training fraction.
        #[arg(long)]
        fraction: Option<Real>,
    },
    /// Train one model per scanning route and write a CSV report.
    Routes {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Seeds per route (consecutive from the config seed).
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Classify every pixel and render a P6 pixmap.
    Map {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the selective scan across sequence lengths.
    BenchScan {
        #[arg(long, default_value_t = 16)]
        state: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
    },
    /// Generate a synthetic labeled cube.
    Synth {
        #[arg(long)]
        classes: usize,
        /// Cube shape as HxWxV, e.g. 32x32x16.
        #[arg(long)]
        shape: String,
        #[arg(long)]
        sigma: Real,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the oracle-equivalence and gradient suites; exit 0/1.
    ScanCheck,
    /// Dump a flattening index map as CSV (seq_pos, p_row, p_col, k).
    IndexMap {
        /// "spectral" or "spatial".
        #[arg(long)]
        order: String,
        /// "forward" or "reversed".
        #[arg(long, default_value = "forward")]
        direction: String,
        #[arg(long)]
        p: usize,
        #[arg(long)]
        k: usize,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(Error::invalid(format!("shape '{s}' is not HxWxV")));
    }
    let dims: Vec<usize> = parts
        .iter()
        .map(|p| {
            p.parse()
                .map_err(|_| Error::invalid(format!("bad extent '{p}' in shape '{s}'")))
        })
        .collect::<Result<_>>()?;
    Ok((dims[0], dims[1], dims[2]))
}

fn print_eval(result: &eval::EvalResult, class_names: &[String]) {
    println!("{:<4} {:<24} {:>10}", "no.", "class", "accuracy");
    for (i, acc) in result.report.per_class.iter().enumerate() {
        let name = class_names.get(i).map(String::as_str).unwrap_or("?");
        match acc {
            Some(a) => println!("{:<4} {:<24} {:>10.4}", i + 1, name, a),
            None => println!("{:<4} {:<24} {:>10}", i + 1, name, "no samples"),
        }
    }
    if !result.report.excluded.is_empty() {
        let list: Vec<String> = result
            .report
            .excluded
            .iter()
            .map(|c| (c + 1).to_string())
            .collect();
        println!("excluded from AA (no test samples): {}", list.join(", "));
    }
    println!("OA    {:.4}", result.report.oa);
    println!("AA    {:.4}", result.report.aa);
    println!("Kappa {:.4}", result.report.kappa);
}

fn run(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Train { config, out } => {
            let cfg = train::load_train_config(&config)?;
            let outcome = train::train(&cfg, |epoch, loss| {
                println!("epoch {epoch:>4} loss {loss:.6}");
            })?;
            outcome.checkpoint.save(&out)?;
            println!(
                "saved checkpoint to {} (final loss {:.6})",
                out.display(),
                outcome.checkpoint.metadata.final_loss
            );
            Ok(0)
        }
        Cmd::Eval {
            ckpt,
            data,
            split_seed,
            fraction,
        } => {
            let checkpoint = ModelCheckpoint::load(&ckpt)?;
            let cube = data::load_cube(&data)?;
            let seed = split_seed.unwrap_or(checkpoint.metadata.seed);
            let frac = fraction.unwrap_or(checkpoint.config.train_fraction);
            let split = data::stratified_split(&cube.labels, frac, seed)?;
            let result = eval::evaluate_checkpoint(&checkpoint, &cube, &split)?;
            print_eval(&result, &cube.class_names);
            Ok(0)
        }
        Cmd::Routes { config, out, seeds } => {
            let cfg = train::load_train_config(&config)?;
            if cfg.dataset.is_empty() {
                return Err(Error::invalid("config has no dataset path"));
            }
            let cube = data::load_cube(&cfg.dataset)?;
            let rows = train::route_ablation(&cfg, &cube, seeds, |route, seed| {
                println!("training route {route} seed {seed}");
            })?;
            std::fs::write(&out, train::ablation_csv(&rows))?;
            print!("{}", train::ablation_table(&rows));
            println!("wrote {}", out.display());
            Ok(0)
        }
        Cmd::Map { ckpt, data, out } => {
            let checkpoint = ModelCheckpoint::load(&ckpt)?;
            let cube = data::load_cube(&data)?;
            let labels = eval::predict_map(&checkpoint, &cube)?;
            let palette = eval::class_palette(cube.num_classes());
            eval::write_ppm(&out, cube.width, cube.height, &labels, &palette)?;
            let sidecar = serde_json::json!({
                "class_names": cube.class_names,
                "palette": palette,
                "width": cube.width,
                "height": cube.height,
            });
            let sidecar_path = format!("{}.json", out.display());
            std::fs::write(&sidecar_path, serde_json::to_string_pretty(&sidecar).unwrap())?;
            println!("wrote {} and {}", out.display(), sidecar_path);
            Ok(0)
        }
        Cmd::BenchScan { state, dim } => {
            let report = bench::bench_scan(dim, state)?;
            print!("{}", report.table());
            Ok(0)
        }
        Cmd::Synth {
            classes,
            shape,
            sigma,
            seed,
            out,
        } => {
            let (h, w, v) = parse_shape(&shape)?;
            let cube = data::synth_dataset(classes, h, w, v, sigma, seed)?;
            data::save_cube(&cube, &out)?;
            println!(
                "wrote {} ({h}x{w}x{v}, {} classes, {} labeled pixels)",
                out.display(),
                classes,
                cube.labeled_count()
            );
            Ok(0)
        }
        Cmd::ScanCheck => {
            let checks = verify::run_scan_checks();
            let mut ok = true;
            for c in &checks {
                let status = if c.passed { "PASS" } else { "FAIL" };
                println!("[{status}] {:<20} {}", c.name, c.detail);
                ok &= c.passed;
            }
            Ok(if ok { 0 } else { 1 })
        }
        Cmd::IndexMap {
            order,
            direction,
            p,
            k,
            out,
        } => {
            let order = match order.as_str() {
                "spectral" => FlattenOrder::Spectral,
                "spatial" => FlattenOrder::Spatial,
                other => {
                    return Err(Error::invalid(format!(
                        "unknown order '{other}' (expected spectral or spatial)"
                    )))
                }
            };
            let direction = match direction.as_str() {
                "forward" => Direction::Forward,
                "reversed" => Direction::Reversed,
                other => {
                    return Err(Error::invalid(format!(
                        "unknown direction '{other}' (expected forward or reversed)"
                    )))
                }
            };
            if p == 0 || k == 0 {
                return Err(Error::invalid("p and k must be positive"));
            }
            let csv = hsiscan::routes::index_map_csv(order, direction, p, k);
            match out {
                Some(path) => {
                    std::fs::write(&path, csv)?;
                    println!("wrote {}", path.display());
                }
                None => print!("{csv}"),
            }
            Ok(0)
        }
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
