//! `fdnml` command line: `run` drives the whole pipeline from one TOML
//! config, the other subcommands expose single stages for ad-hoc work.
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure,
//! 5 stage failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use fdnml::distance::DqCurveSet;
use fdnml::ingest::{self, ColumnMap};
use fdnml::multifractal::analyze;
use fdnml::pipeline::{self, PipelineConfig};
use fdnml::{complexity, fracnet, seed, tabular, Error, Result};

#[derive(Parser)]
#[command(
    name = "fdnml",
    version,
    about = "Multifractal EEG characterization, fractional coupling identification, and fatigue-level classification"
)]
struct Cli {
    /// Pipeline configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Worker threads for within-stage parallelism (default: all cores).
    /// Results do not depend on this.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    /// Output directory, overriding the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Progress and warnings on stderr.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled synthetic trials in the CSV layout `ingest` reads.
    Synth,
    /// Normalize one raw trial CSV into the canonical layout.
    Ingest {
        input: PathBuf,
        /// Column-map TOML; falls back to the config, then to a bare
        /// all-columns map.
        #[arg(long, value_name = "PATH")]
        column_map: Option<PathBuf>,
        /// Fatigue level attached when no column map provides one.
        #[arg(long, default_value_t = 0)]
        label: u8,
        /// Sample rate attached when no column map provides one.
        #[arg(long, default_value_t = 256.0)]
        sample_rate: f64,
    },
    /// Multifractal summary of every channel of one trial.
    Mfa {
        input: PathBuf,
        #[arg(long, value_name = "PATH")]
        column_map: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        label: u8,
        #[arg(long, default_value_t = 256.0)]
        sample_rate: f64,
    },
    /// Identify windowed coupling matrices of one trial.
    FdnFit {
        input: PathBuf,
        #[arg(long, value_name = "PATH")]
        column_map: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        label: u8,
        #[arg(long, default_value_t = 256.0)]
        sample_rate: f64,
    },
    /// LZ76 complexity of coupling-trajectory files, plus a rank test across
    /// fatigue levels when two or more are present.
    Lzc {
        /// Trajectory CSVs written by `fdn-fit` or a pipeline run.
        #[arg(required = true)]
        trajectories: Vec<PathBuf>,
    },
    /// Wasserstein-1 distances between per-level D_q samples taken from
    /// `mfa` summary JSONs.
    Wdist {
        #[arg(required = true)]
        summaries: Vec<PathBuf>,
    },
    /// Cross-validate and train the classifier on a completed run directory.
    Train,
    /// Score the saved checkpoint against a run directory's windows.
    Evaluate,
    /// Run every configured stage and write the report.
    Run,
    /// Rebuild report.md from an existing run directory.
    Report,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(&cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::from_toml_file(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn ensure_out(cfg: &PipelineConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::data(format!("cannot create `{}`: {e}", cfg.out_dir.display())))?;
    Ok(&cfg.out_dir)
}

/// Explicit map, else the config's, else a bare all-columns map sized from
/// the file itself.
fn resolve_map(
    explicit: &Option<PathBuf>,
    cfg: &PipelineConfig,
    input: &Path,
    label: u8,
    sample_rate: f64,
) -> Result<ColumnMap> {
    if let Some(p) = explicit {
        return ColumnMap::from_toml_file(p);
    }
    if let Some(p) = &cfg.data.column_map {
        return ColumnMap::from_toml_file(p);
    }
    let table = tabular::read_table(input, None)?;
    let n_cols = table
        .rows
        .iter()
        .map(|r| r.len())
        .min()
        .ok_or_else(|| Error::data(format!("`{}` holds no data rows", input.display())))?;
    Ok(ColumnMap::bare(n_cols, sample_rate, label))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "input".to_string())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::data(format!("serialization: {e}")))?;
    text.push('\n');
    fs::write(path, text)
        .map_err(|e| Error::data(format!("cannot write `{}`: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)
        .map_err(|e| Error::data(format!("cannot write `{}`: {e}", path.display())))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// (header, cells) of a comma-separated file; cells stay strings.
fn read_cells(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::data(format!("cannot read `{}`: {e}", path.display())))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::data(format!("`{}` is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    Ok((header, rows))
}

fn col(header: &[String], name: &str, path: &Path) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::data(format!("`{}` lacks a `{name}` column", path.display())))
}

fn dispatch(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::config("--threads must be at least 1"));
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Run => {
            let manifest = pipeline::run_pipeline(&cfg)?;
            for s in &manifest.stages {
                if cli.verbose {
                    eprintln!("stage {}: {} outputs", s.name, s.outputs.len());
                }
                for w in &s.warnings {
                    eprintln!("warning [{}]: {w}", s.name);
                }
            }
            println!(
                "completed {} stages under {}",
                manifest.stages.len(),
                cfg.out_dir.display()
            );
            println!("report: {}", cfg.out_dir.join("report.md").display());
            Ok(())
        }
        Command::Report => {
            let path = pipeline::write_report(&cfg.out_dir)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Synth => {
            let out = ensure_out(&cfg)?;
            let recs = pipeline::synth_trials(&cfg.data, cfg.seed)?;
            let mut sidecar = String::new();
            for rec in &recs {
                let path = out.join(format!("{}.csv", rec.trial_id));
                rec.write_csv(&path)?;
                sidecar.push_str(&format!("{},{}\n", rec.trial_id, rec.fatigue_level));
                if cli.verbose {
                    eprintln!("trial {} level {}", rec.trial_id, rec.fatigue_level);
                }
            }
            write_file(&out.join("labels.csv"), &sidecar)?;
            println!("wrote {} trials under {}", recs.len(), out.display());
            Ok(())
        }
        Command::Ingest {
            input,
            column_map,
            label,
            sample_rate,
        } => {
            let out = ensure_out(&cfg)?;
            let map = resolve_map(column_map, &cfg, input, *label, *sample_rate)?;
            let (rec, diag) = ingest::load_recording(input, &map)?;
            let s = stem(input);
            let canonical = out.join(format!("{s}_canonical.csv"));
            rec.write_csv(&canonical)?;
            println!("wrote {}", canonical.display());
            write_json(
                &out.join(format!("{s}_ingest.json")),
                &serde_json::json!({
                    "trial_id": rec.trial_id,
                    "fatigue_level": rec.fatigue_level,
                    "sample_rate_hz": rec.sample_rate_hz,
                    "rows_read": diag.rows_read,
                    "rows_dropped": diag.rows_dropped,
                    "channels": diag.channels,
                }),
            )
        }
        Command::Mfa {
            input,
            column_map,
            label,
            sample_rate,
        } => {
            let out = ensure_out(&cfg)?;
            let map = resolve_map(column_map, &cfg, input, *label, *sample_rate)?;
            let (rec, _) = ingest::load_recording(input, &map)?;
            let mut summaries = Vec::with_capacity(rec.n_channels());
            for (c, x) in rec.samples.iter().enumerate() {
                let opts = cfg
                    .mfa
                    .options_with_bootstrap(seed::derive_indexed(cfg.seed, "mfa-cli", c as u64))?;
                summaries.push(analyze(x, &opts)?);
            }
            let k = summaries[0].qs.len();
            let mean_dq: Vec<f64> = (0..k)
                .map(|i| summaries.iter().map(|s| s.dq[i]).sum::<f64>() / summaries.len() as f64)
                .collect();
            let s = stem(input);
            let mut csv = String::from("channel,q,dq,ci_low,ci_high\n");
            for (c, summary) in summaries.iter().enumerate() {
                for (i, &q) in summary.qs.iter().enumerate() {
                    let (lo, hi) = summary
                        .bootstrap
                        .as_ref()
                        .map(|b| b.dq_ci[i])
                        .unwrap_or((f64::NAN, f64::NAN));
                    csv.push_str(&format!("{c},{q},{},{lo},{hi}\n", summary.dq[i]));
                }
            }
            write_file(&out.join(format!("{s}_dq.csv")), &csv)?;
            write_json(
                &out.join(format!("{s}_mfa.json")),
                &serde_json::json!({
                    "trial_id": rec.trial_id,
                    "fatigue_level": rec.fatigue_level,
                    "channels": rec.channels,
                    "qs": summaries[0].qs,
                    "mean_dq": mean_dq,
                    "per_channel": summaries,
                }),
            )
        }
        Command::FdnFit {
            input,
            column_map,
            label,
            sample_rate,
        } => {
            let out = ensure_out(&cfg)?;
            let map = resolve_map(column_map, &cfg, input, *label, *sample_rate)?;
            let (rec, _) = ingest::load_recording(input, &map)?;
            let windowed = ingest::window(&rec, &cfg.window)?;
            let est = fracnet::estimate_alphas(&rec.samples)?;
            let orders: Vec<f64> = est.iter().map(|a| a.alpha).collect();
            let traj = fracnet::coupling_trajectory(&windowed, &orders, &cfg.fdn)?;
            let s = stem(input);

            let n = traj.n_channels;
            let mut csv = String::from("trial,window,label,valid,converged,iterations,residual_rms");
            for r in 0..n {
                for c in 0..n {
                    csv.push_str(&format!(",a{r}{c}"));
                }
            }
            csv.push('\n');
            for (w, fit) in traj.fits.iter().enumerate() {
                match fit {
                    Some(f) => {
                        csv.push_str(&format!(
                            "0,{w},{},1,{},{},{}",
                            traj.fatigue_level,
                            u8::from(f.converged),
                            f.iterations,
                            f.residual_rms
                        ));
                        for v in &f.a_flat {
                            csv.push_str(&format!(",{v}"));
                        }
                    }
                    None => {
                        csv.push_str(&format!("0,{w},{},0,0,0,NaN", traj.fatigue_level));
                        csv.push_str(&",NaN".repeat(n * n));
                    }
                }
                csv.push('\n');
            }
            write_file(&out.join(format!("{s}_traj.csv")), &csv)?;
            write_json(
                &out.join(format!("{s}_fdn.json")),
                &serde_json::json!({
                    "trial_id": traj.trial_id,
                    "fatigue_level": traj.fatigue_level,
                    "n_channels": n,
                    "n_windows": traj.n_windows(),
                    "invalid_windows": traj.invalid_windows,
                    "alphas": est,
                }),
            )
        }
        Command::Lzc { trajectories } => {
            let out = ensure_out(&cfg)?;
            let mut csv = String::from("file,trial,label,c,ci,n,degenerate\n");
            let mut by_label: Vec<(u8, f64)> = Vec::new();
            for path in trajectories {
                let (h, rows) = read_cells(path)?;
                let tc = col(&h, "trial", path)?;
                let lc = col(&h, "label", path)?;
                let vc = col(&h, "valid", path)?;
                let rc = col(&h, "residual_rms", path)?;
                let mut trials: Vec<String> = rows.iter().map(|r| r[tc].clone()).collect();
                trials.dedup();
                for trial in trials {
                    let mut flat = Vec::new();
                    let mut label: u8 = 0;
                    for r in rows.iter().filter(|r| r[tc] == trial) {
                        label = r[lc].parse().unwrap_or(0);
                        if r[vc] == "1" {
                            for cell in &r[rc + 1..] {
                                let v: f64 = cell.parse().map_err(|_| {
                                    Error::data(format!(
                                        "non-numeric coupling entry in `{}`",
                                        path.display()
                                    ))
                                })?;
                                flat.push(v);
                            }
                        }
                    }
                    if flat.is_empty() {
                        return Err(Error::data(format!(
                            "`{}` trial {trial} has no valid windows",
                            path.display()
                        )));
                    }
                    let ci = complexity::complexity_index(&flat)?;
                    csv.push_str(&format!(
                        "{},{trial},{label},{},{},{},{}\n",
                        stem(path),
                        ci.c,
                        ci.ci,
                        ci.n,
                        u8::from(ci.degenerate)
                    ));
                    by_label.push((label, ci.ci));
                }
            }
            write_file(&out.join("lzc.csv"), &csv)?;

            let mut levels: Vec<u8> = by_label.iter().map(|&(l, _)| l).collect();
            levels.sort_unstable();
            levels.dedup();
            let groups: Vec<Vec<f64>> = levels
                .iter()
                .map(|&l| {
                    by_label
                        .iter()
                        .filter(|&&(g, _)| g == l)
                        .map(|&(_, v)| v)
                        .collect()
                })
                .collect();
            if levels.len() >= 2 && groups.iter().all(|g| g.len() >= 2) {
                let cmp = complexity::group_compare(&groups)?;
                write_json(
                    &out.join("lzc_groups.json"),
                    &serde_json::json!({
                        "levels": levels,
                        "h": cmp.h,
                        "p_value": cmp.p_value,
                        "dof": cmp.dof,
                    }),
                )?;
            } else if cli.verbose {
                eprintln!("group test skipped: need two levels with two trajectories each");
            }
            Ok(())
        }
        Command::Wdist { summaries } => {
            let out = ensure_out(&cfg)?;
            let mut per_level: Vec<(u8, Vec<Vec<f64>>)> = Vec::new();
            let mut grid: Option<Vec<f64>> = None;
            for path in summaries {
                let text = fs::read_to_string(path)
                    .map_err(|e| Error::data(format!("cannot read `{}`: {e}", path.display())))?;
                let v: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| Error::data(format!("malformed `{}`: {e}", path.display())))?;
                let level = v["fatigue_level"]
                    .as_u64()
                    .ok_or_else(|| Error::data(format!("`{}` lacks fatigue_level", path.display())))?
                    as u8;
                let nums = |key: &str| -> Result<Vec<f64>> {
                    v[key]
                        .as_array()
                        .ok_or_else(|| Error::data(format!("`{}` lacks {key}", path.display())))?
                        .iter()
                        .map(|x| {
                            x.as_f64().ok_or_else(|| {
                                Error::data(format!("non-numeric {key} in `{}`", path.display()))
                            })
                        })
                        .collect()
                };
                let qs = nums("qs")?;
                match &grid {
                    None => grid = Some(qs),
                    Some(g) => {
                        if g.len() != qs.len() || g.iter().zip(&qs).any(|(a, b)| (a - b).abs() > 1e-9)
                        {
                            return Err(Error::config(format!(
                                "`{}` uses a different q grid",
                                path.display()
                            )));
                        }
                    }
                }
                let curve = nums("mean_dq")?;
                match per_level.iter_mut().find(|(l, _)| *l == level) {
                    Some((_, curves)) => curves.push(curve),
                    None => per_level.push((level, vec![curve])),
                }
            }
            per_level.sort_by_key(|&(l, _)| l);
            let q = grid.unwrap_or_default();
            let sets: Vec<DqCurveSet> = per_level
                .into_iter()
                .map(|(level, curves)| DqCurveSet {
                    level,
                    q: q.clone(),
                    curves,
                })
                .collect();
            if sets.len() < 2 || sets.iter().any(|s| s.curves.len() < 2) {
                return Err(Error::data(
                    "need at least two fatigue levels with two summaries each",
                ));
            }
            let scalar = fdnml::distance::pairwise_scalar_distances(&sets, cfg.distance.scalar_q)?;
            let curve = fdnml::distance::pairwise_curve_distances(&sets)?;
            let mut csv = String::from("mode,level_a,level_b,distance\n");
            let mut pairs = Vec::new();
            for (a, b, d) in scalar.pairs() {
                csv.push_str(&format!("scalar,{a},{b},{d}\n"));
                pairs.push(serde_json::json!({"mode": "scalar", "level_a": a, "level_b": b, "distance": d}));
            }
            for (a, b, d) in curve.pairs() {
                csv.push_str(&format!("curve,{a},{b},{d}\n"));
                pairs.push(serde_json::json!({"mode": "curve", "level_a": a, "level_b": b, "distance": d}));
            }
            write_file(&out.join("w1.csv"), &csv)?;
            write_json(
                &out.join("w1.json"),
                &serde_json::json!({"scalar_q": cfg.distance.scalar_q, "pairs": pairs}),
            )
        }
        Command::Train => {
            let rels = pipeline::train_on_run_dir(&cfg, &cfg.out_dir)?;
            for rel in rels {
                println!("wrote {}", cfg.out_dir.join(rel).display());
            }
            Ok(())
        }
        Command::Evaluate => {
            let path = pipeline::evaluate_on_run_dir(&cfg, &cfg.out_dir)?;
            let text = fs::read_to_string(&path)
                .map_err(|e| Error::data(format!("cannot read `{}`: {e}", path.display())))?;
            let v: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::data(format!("malformed `{}`: {e}", path.display())))?;
            println!("wrote {}", path.display());
            println!(
                "window accuracy {:.4} over {} windows",
                v["metrics"]["accuracy"].as_f64().unwrap_or(f64::NAN),
                v["n_windows"]
            );
            Ok(())
        }
    }
}
