//! `pkmem` command line.
//!
//! Exit codes: 0 success, 2 bad configuration or input, 3 a verification
//! failed, 4 numeric abort, 1 anything else.

use crate::embedding_bag::bench::{rank_strategies, run_bench, BenchRow, BenchSpec, IndexProfile, CSV_HEADER};
use crate::embedding_bag::Strategy;
use crate::error::{Error, Result};
use crate::memory_layer::gradcheck::{check_case, standard_cases};
use crate::sharded_memory::{Fault, Phase};
use crate::tensor::Scalar;
use crate::trainer::ablate::default_values;
use crate::trainer::gradcheck::{check_model, tiny_model_config};
use crate::trainer::{ablate, Axis, Checkpoint, MetricsLog, TrainConfig, Trainer, ABLATION_HEADER};
use crate::verify::{shard_check, verify_topk, ShardSetup, TopkSweep};
use clap::{Parser, Subcommand};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Layer gradient tolerance.
pub const LAYER_GRAD_TOL: f64 = 1e-4;
/// Whole-model gradient tolerance.
pub const MODEL_GRAD_TOL: f64 = 1e-3;

#[derive(Parser, Debug)]
#[command(name = "pkmem", version, about = "Product-key memory layers: verification, benchmarks and training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON training config; missing fields take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Threads for lookups and embedding-bag passes.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Force the order-independent reverse-indices backward.
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Compute in f64 instead of f32.
    #[arg(long, global = true)]
    pub wide_precision: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Compare product-key top-k with brute force.
    VerifyTopk {
        #[arg(long, value_delimiter = ',', default_values_t = [4usize, 16, 64])]
        half_n: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 4, 16])]
        k: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        seeds: u64,
        #[arg(long, default_value_t = 16)]
        key_dim: usize,
        #[arg(long)]
        qk_norm: bool,
        /// Corrupt one result to exercise the failure path.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Time the embedding-bag backward strategies.
    BenchBag {
        #[arg(long, value_delimiter = ',', default_values_t = [32usize, 128, 512])]
        n: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4])]
        worker_counts: Vec<usize>,
        #[arg(long, default_value_t = 65536)]
        num_rows: usize,
        #[arg(long, default_value_t = 1024)]
        bags: usize,
        #[arg(long, default_value_t = 32)]
        bag_size: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long, default_value_t = 1.1)]
        zipf: f64,
    },
    /// Check the sharded protocol against a single device.
    ShardCheck {
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 4, 8])]
        groups: Vec<usize>,
        #[arg(long, default_value_t = 4096)]
        num_rows: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 32)]
        bags: usize,
        #[arg(long, default_value_t = 8)]
        bag_size: usize,
        /// `drop|duplicate:gather|exchange|grad_route:FROM:TO`
        #[arg(long)]
        inject_fault: Option<String>,
    },
    /// Train on synthetic facts.
    Train {
        /// Also train the dense baseline and compare.
        #[arg(long)]
        paired: bool,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sweep one architecture axis.
    Ablate {
        /// placement, num_memory_layers, key_dim, v_dim or memory_size
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Finite-difference checks of layers and a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::Index { .. } | Error::Json(_) | Error::Checkpoint(_) => {
            EXIT_CONFIG
        }
        Error::Verification(_) | Error::Protocol(_) | Error::Consistency(_) => EXIT_VERIFY,
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => 1,
    }
}

/// Parses `args` and runs; returns the process exit code.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn header(cli: &Cli, what: &str, cfg_hash: Option<&str>) -> String {
    let mut h = format!("# pkmem {} {what}", env!("CARGO_PKG_VERSION"));
    if let Some(c) = cfg_hash {
        let _ = write!(h, " config={c}");
    }
    if let Some(s) = cli.seed {
        let _ = write!(h, " seed={s}");
    }
    let _ = write!(h, " precision={}", if cli.wide_precision { "f64" } else { "f32" });
    h
}

fn write_file(dir: &Path, name: &str, body: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, body)?;
    Ok(path)
}

/// JSON reports carry their header as the first field.
fn write_json(dir: &Path, name: &str, header: &str, body: &impl Serialize) -> Result<PathBuf> {
    let mut value = serde_json::json!({ "header": header });
    value["report"] = serde_json::to_value(body)?;
    write_file(dir, name, &(serde_json::to_string_pretty(&value)? + "\n"))
}

pub fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    if cli.deterministic {
        cfg.strategy = Strategy::ReverseIndices;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::VerifyTopk {
            half_n,
            k,
            seeds,
            key_dim,
            qk_norm,
            inject_fault,
        } => {
            let sweep = TopkSweep {
                half_ns: half_n.clone(),
                ks: k.clone(),
                seeds: *seeds,
                key_dim: *key_dim,
                qk_norm: *qk_norm,
            };
            let corrupt = inject_fault.then_some(0);
            let report = if cli.wide_precision {
                verify_topk::<f64>(&sweep, corrupt)?
            } else {
                verify_topk::<f32>(&sweep, corrupt)?
            };
            let h = header(cli, "verify-topk", None);
            write_json(&cli.out, "verify_topk.json", &h, &report)?;
            println!(
                "verify-topk: {} cases, {} mismatches, {} skipped (k > half_n), {:.2}s",
                report.cases,
                report.mismatches.len(),
                report.skipped.len(),
                report.elapsed_s
            );
            if !report.mismatches.is_empty() {
                let mut dump = h + "\n";
                for m in &report.mismatches {
                    let _ = writeln!(
                        dump,
                        "half_n={} k={} seed={}\n  expected {:?} {:?}\n  got      {:?} {:?}",
                        m.half_n, m.k, m.seed, m.expected, m.expected_scores, m.got, m.got_scores
                    );
                }
                let path = write_file(&cli.out, "verify_topk_diff.txt", &dump)?;
                return Err(Error::Verification(format!(
                    "{} top-k mismatches, see {}",
                    report.mismatches.len(),
                    path.display()
                )));
            }
            Ok(())
        }
        Command::BenchBag {
            n,
            worker_counts,
            num_rows,
            bags,
            bag_size,
            repeats,
            zipf,
        } => {
            let strategies: &[Strategy] = if cli.deterministic {
                &[Strategy::ReverseIndices]
            } else {
                &Strategy::ALL
            };
            let mut all_rows = Vec::new();
            let mut ranking = header(cli, "bench-bag ranking", None) + "\n";
            for profile in [IndexProfile::Uniform, IndexProfile::Zipf(*zipf)] {
                let rows = bench_grid(strategies, n, worker_counts, *num_rows, *bags, *bag_size, *repeats, profile, cli)?;
                let name = match profile {
                    IndexProfile::Uniform => "uniform",
                    _ => "zipf",
                };
                let mut csv = header(cli, &format!("bench-bag profile={profile}"), None);
                csv.push('\n');
                csv.push_str(CSV_HEADER);
                csv.push('\n');
                for r in &rows {
                    csv.push_str(&r.csv_line());
                    csv.push('\n');
                }
                write_file(&cli.out, &format!("bench_{name}.csv"), &csv)?;
                let _ = writeln!(ranking, "[{profile}] n,workers,fastest,median_ns");
                for (dim, w, s, med) in rank_strategies(&rows) {
                    let _ = writeln!(ranking, "{dim},{w},{},{med:.0}", s.name());
                }
                all_rows.extend(rows);
            }
            write_file(&cli.out, "bench_ranking.txt", &ranking)?;
            print!("{ranking}");
            let bad = all_rows.iter().filter(|r| !r.checksum_ok()).count();
            if bad > 0 {
                return Err(Error::Verification(format!("{bad} benchmark rows failed the checksum")));
            }
            Ok(())
        }
        Command::ShardCheck {
            groups,
            num_rows,
            dim,
            bags,
            bag_size,
            inject_fault,
        } => {
            let fault = inject_fault.as_deref().map(parse_fault).transpose()?;
            let setup = ShardSetup {
                num_rows: *num_rows,
                dim: *dim,
                bags_per_worker: *bags,
                bag_size: *bag_size,
                seed: cli.seed.unwrap_or(0),
            };
            let mut checks = Vec::new();
            for &g in groups {
                let c = if cli.wide_precision {
                    shard_check::<f64>(&setup, g, fault)?
                } else {
                    shard_check::<f32>(&setup, g, fault)?
                };
                println!(
                    "G={g}: forward {} backward {} phase3 {} no-full-output {} exchanged={}B",
                    c.forward_bit_exact, c.backward_bit_exact, c.phase3_bytes_ok, c.no_full_output, c.forward.bytes_exchanged
                );
                checks.push(c);
            }
            write_json(&cli.out, "shard_check.json", &header(cli, "shard-check", None), &checks)?;
            if checks.iter().any(|c| !c.ok()) {
                return Err(Error::Verification("sharded results differ from single device".into()));
            }
            Ok(())
        }
        Command::Train {
            paired,
            resume,
            checkpoint_every,
            steps,
        } => {
            let mut cfg = load_config(cli)?;
            if let Some(s) = steps {
                cfg.steps = *s;
            }
            if *paired {
                let dense = cfg.dense_baseline();
                let mem = run_train(cli, &cfg, resume.as_deref(), *checkpoint_every, &cli.out.join("memory"))?;
                let base = run_train(cli, &dense, None, *checkpoint_every, &cli.out.join("dense"))?;
                let summary = serde_json::json!({
                    "memory_steps_to_90": mem.steps_to_recall(0.9),
                    "dense_steps_to_90": base.steps_to_recall(0.9),
                    "memory_final_eval_nll": mem.last().map(|r| r.eval_nll),
                    "dense_final_eval_nll": base.last().map(|r| r.eval_nll),
                    "memory_params": mem.params,
                    "dense_params": base.params,
                    "memory_flops_per_token": mem.flops_per_token,
                    "dense_flops_per_token": base.flops_per_token,
                });
                write_json(&cli.out, "paired.json", &header(cli, "train paired", Some(&cfg.hash())), &summary)?;
                println!("{}", serde_json::to_string_pretty(&summary)?);
            } else {
                run_train(cli, &cfg, resume.as_deref(), *checkpoint_every, &cli.out)?;
            }
            Ok(())
        }
        Command::Ablate { axis, values, steps } => {
            let axis: Axis = axis.parse()?;
            let mut cfg = load_config(cli)?;
            if let Some(s) = steps {
                cfg.steps = *s;
            }
            let values = if values.is_empty() {
                default_values(axis, &cfg)
            } else {
                values.clone()
            };
            let rows = ablate(&cfg, axis, &values)?;
            let mut csv = header(cli, &format!("ablate axis={axis}"), Some(&cfg.hash())) + "\n";
            csv.push_str(ABLATION_HEADER);
            csv.push('\n');
            for r in &rows {
                csv.push_str(&r.csv_line());
                csv.push('\n');
            }
            write_file(&cli.out, &format!("ablation_{axis}.csv"), &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::Gradcheck { seeds } => {
            let mut text = header(cli, "gradcheck", None) + "\ncase,seed,max_rel_err,tolerance,ok\n";
            let mut failed = 0;
            for (name, case) in standard_cases() {
                for seed in 0..*seeds {
                    let r = check_case(&case, seed)?;
                    let ok = r.max_rel_err < LAYER_GRAD_TOL;
                    failed += usize::from(!ok);
                    let _ = writeln!(text, "{name},{seed},{:.3e},{LAYER_GRAD_TOL:e},{ok}", r.max_rel_err);
                }
            }
            for seed in 0..*seeds {
                let r = check_model(&tiny_model_config(seed), 4, seed)?;
                let ok = r.max_rel_err < MODEL_GRAD_TOL;
                failed += usize::from(!ok);
                let _ = writeln!(text, "toy_model,{seed},{:.3e},{MODEL_GRAD_TOL:e},{ok}", r.max_rel_err);
            }
            write_file(&cli.out, "gradcheck.csv", &text)?;
            print!("{text}");
            if failed > 0 {
                return Err(Error::Verification(format!("{failed} gradient checks over tolerance")));
            }
            Ok(())
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn bench_grid(
    strategies: &[Strategy],
    dims: &[usize],
    worker_counts: &[usize],
    num_rows: usize,
    bags: usize,
    bag_size: usize,
    repeats: usize,
    profile: IndexProfile,
    cli: &Cli,
) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &dim in dims {
        for &workers in worker_counts {
            for &strategy in strategies {
                rows.extend(run_bench(&BenchSpec {
                    strategy,
                    num_rows,
                    dim,
                    bags,
                    bag_size,
                    workers,
                    repeats,
                    profile,
                    seed: cli.seed.unwrap_or(0),
                })?);
            }
        }
    }
    Ok(rows)
}

fn parse_fault(s: &str) -> Result<Fault> {
    let bad = || Error::Config(format!("fault `{s}` is not kind:phase:from:to"));
    let parts: Vec<&str> = s.split(':').collect();
    let [kind, phase, from, to] = parts[..] else {
        return Err(bad());
    };
    let phase = match phase {
        "gather" => Phase::Gather,
        "exchange" => Phase::Exchange,
        "grad_route" => Phase::GradRoute,
        _ => return Err(bad()),
    };
    let from = from.parse().map_err(|_| bad())?;
    let to = to.parse().map_err(|_| bad())?;
    match kind {
        "drop" => Ok(Fault::Drop { phase, from, to }),
        "duplicate" => Ok(Fault::Duplicate { phase, from, to }),
        _ => Err(bad()),
    }
}

fn run_train(
    cli: &Cli,
    cfg: &TrainConfig,
    resume: Option<&Path>,
    checkpoint_every: Option<usize>,
    out: &Path,
) -> Result<MetricsLog> {
    if cli.wide_precision {
        train_to::<f64>(cfg, resume, checkpoint_every, out)
    } else {
        train_to::<f32>(cfg, resume, checkpoint_every, out)
    }
}

fn train_to<T: Scalar>(
    cfg: &TrainConfig,
    resume: Option<&Path>,
    checkpoint_every: Option<usize>,
    out: &Path,
) -> Result<MetricsLog> {
    std::fs::create_dir_all(out)?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.config.hash() != cfg.hash() {
                return Err(Error::Config(format!(
                    "checkpoint config {} differs from {}",
                    ckpt.config.hash(),
                    cfg.hash()
                )));
            }
            Trainer::<T>::from_checkpoint(ckpt)?
        }
        None => Trainer::<T>::new(cfg.clone())?,
    };
    let ckpt_path = out.join("checkpoint.bin");
    let log = trainer.run(|t| {
        if let Some(every) = checkpoint_every {
            if every > 0 && t.step % every == 0 {
                t.checkpoint().save(&ckpt_path)?;
            }
        }
        Ok(())
    })?;
    write_file(out, "metrics.jsonl", &log.to_jsonl())?;
    write_file(out, "curve.csv", &log.to_plot_csv())?;
    write_json(out, "summary.json", &log.header(), &log)?;
    if let Some(last) = log.last() {
        println!(
            "{}: step {} eval_nll {:.4} recall {:.3} ({:.1}s)",
            out.display(),
            last.step,
            last.eval_nll,
            last.recall,
            log.elapsed_s
        );
    }
    Ok(log)
}
