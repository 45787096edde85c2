use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use msloc::config::Config;
use msloc::consensus::Fusion;
use msloc::evaluation::{
    ate_rmse, format_recall_csv, format_recall_text, format_timing_csv, format_timing_text, recall_table,
    timing_report, StageTiming, Trajectory, DEFAULT_THRESHOLDS,
};
use msloc::geometry::Pose;
use msloc::io::{self, load, write_text, CandidateFile, QueryFile};
use msloc::pipeline::{self, Inputs};
use msloc::refine::{refine, RefineOutput, Variant};
use msloc::simulator::generate;
use msloc::{Error, Result};

#[derive(Parser)]
#[command(name = "msloc", version, about = "Multi-session localization back-end on simulated scenes")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// `key = value` file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides one config key, e.g. `--set lambda2=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a scene and write every input artifact into a directory.
    Simulate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-session candidate poses for every query frame.
    Localize {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the pooled-RANSAC trajectory.
        #[arg(long)]
        merged: Option<PathBuf>,
    },
    /// Pick one candidate per frame by consensus maximization.
    Fuse {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        out_selection: PathBuf,
        #[arg(long)]
        out_trajectory: PathBuf,
    },
    /// EM pose-graph refinement of a fused selection.
    Refine {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        selection: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        odometry: PathBuf,
        #[command(flatten)]
        out: RefineOutputs,
    },
    /// One guided pruning round followed by consensus and refinement.
    Polish {
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        tracks: PathBuf,
        #[arg(long)]
        odometry: PathBuf,
        /// Refined trajectory to polish.
        #[arg(long)]
        refined: PathBuf,
        #[arg(long)]
        out_candidates: PathBuf,
        #[arg(long)]
        out_selection: PathBuf,
        #[command(flatten)]
        out: RefineOutputs,
    },
    /// Recall table of one or more trajectories against the truth.
    Eval {
        #[arg(long)]
        truth: PathBuf,
        /// `name=path`, repeatable; columns keep this order.
        #[arg(long = "est", value_name = "NAME=PATH", required = true)]
        estimates: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Simulate, then run every stage and write a report.
    Pipeline {
        #[arg(long)]
        out: PathBuf,
        /// Also run all four refinement variants.
        #[arg(long)]
        ablation: bool,
    },
}

#[derive(Args)]
struct RefineOutputs {
    #[arg(long)]
    out_trajectory: PathBuf,
    #[arg(long)]
    out_weights: PathBuf,
    #[arg(long)]
    out_log: PathBuf,
}

fn load_config(c: &Common) -> Result<Config> {
    let mut cfg = match &c.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for o in &c.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override `{o}` is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim()).map_err(Error::InvalidConfig)?;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_all(dir: &Path, files: &[(&str, String)]) -> Result<()> {
    for (name, text) in files {
        write_text(&dir.join(name), text)?;
    }
    Ok(())
}

fn trajectory_of(frames: &[(usize, f64)], poses: &[Option<Pose>]) -> Trajectory {
    frames.iter().zip(poses).filter_map(|((_, ts), p)| p.map(|p| (*ts, p))).collect()
}

fn all_some(poses: &[Pose]) -> Vec<Option<Pose>> {
    poses.iter().copied().map(Some).collect()
}

fn inputs_from_files(cfg: &Config, queries: &QueryFile, tracks: &Path, odometry: &Path) -> Result<Inputs> {
    Ok(Inputs {
        k: cfg.scenario.intrinsics,
        frames: queries.frames.clone(),
        matches: queries.matches.clone(),
        tracks: load(tracks, io::parse_tracks)?,
        odometry: load(odometry, io::parse_odometry)?,
    })
}

fn refine_files(frames: &[usize], out: &RefineOutput) -> (String, String) {
    (io::format_weights(frames, &out.state), io::format_log(&out.log))
}

fn write_refined(o: &RefineOutputs, frames: &[(usize, f64)], out: &RefineOutput) -> Result<()> {
    let ids: Vec<usize> = frames.iter().map(|(f, _)| *f).collect();
    let (w, log) = refine_files(&ids, out);
    write_text(&o.out_trajectory, &io::format_trajectory(&trajectory_of(frames, &all_some(&out.state.poses))))?;
    write_text(&o.out_weights, &w)?;
    write_text(&o.out_log, &log)
}

fn fusion_files(frames: &[(usize, f64)], fusion: &Fusion) -> (String, String) {
    (
        io::format_selection(fusion),
        io::format_trajectory(&trajectory_of(frames, &pipeline::chosen_poses(fusion))),
    )
}

fn cmd_simulate(cfg: &Config, out: &Path) -> Result<()> {
    let sc = generate(&cfg.scenario())?;
    let queries = QueryFile {
        frames: sc.frames.iter().map(|f| (f.frame, f.timestamp)).collect(),
        matches: sc.frames.iter().map(|f| (f.frame, f.matches.clone())).collect(),
    };
    let truth: Trajectory = sc.truth.timestamps.iter().copied().zip(sc.truth.poses.iter().copied()).collect();
    write_all(
        out,
        &[
            ("config.txt", cfg.to_text()),
            ("queries.txt", io::format_queries(&queries)),
            ("tracks.txt", io::format_tracks(&sc.tracks)),
            ("odometry.txt", io::format_odometry(&sc.odometry)),
            ("truth.txt", io::format_trajectory(&truth)),
            ("labels.txt", io::format_labels(&sc.truth)),
        ],
    )?;
    for m in &sc.maps {
        write_text(&out.join("maps").join(format!("session_{}_{}.map", m.session_id, m.source)), &io::format_map(m))?;
    }
    Ok(())
}

fn cmd_eval(truth: &Path, estimates: &[String], thresholds: &[f64], out_csv: Option<&Path>) -> Result<String> {
    let truth = load(truth, io::parse_trajectory)?;
    let mut columns = Vec::new();
    let mut ate = String::new();
    for e in estimates {
        let (name, path) = e
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("estimate `{e}` is not NAME=PATH")))?;
        let est = load(Path::new(path), io::parse_trajectory)?;
        columns.push((name.to_string(), recall_table(&est, &truth, thresholds)?));
        ate.push_str(&format!("ate_rmse {name} {}\n", io::fmt_f64(ate_rmse(&est, &truth, false)?)));
    }
    if let Some(p) = out_csv {
        write_text(p, &format_recall_csv(&columns))?;
    }
    Ok(format!("{}{ate}", format_recall_text(&columns)))
}

fn timed<T>(timings: &mut Vec<StageTiming>, stage: &str, frames: usize, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    timings.push(StageTiming {
        stage: stage.into(),
        total_ms: start.elapsed().as_secs_f64() * 1e3,
        frames,
    });
    out
}

fn cmd_pipeline(cfg: &Config, out: &Path, ablation: bool) -> Result<()> {
    cmd_simulate(cfg, out)?;
    let pc = cfg.pipeline();
    let queries = load(&out.join("queries.txt"), io::parse_queries)?;
    let inputs = inputs_from_files(cfg, &queries, &out.join("tracks.txt"), &out.join("odometry.txt"))?;
    let truth = load(&out.join("truth.txt"), io::parse_trajectory)?;
    let n = inputs.frames.len();
    let frame_ids: Vec<usize> = inputs.frames.iter().map(|(f, _)| *f).collect();
    let mut timings = Vec::new();

    let candidates = timed(&mut timings, "localize", n, || pipeline::localize_all(&inputs, &pc.localize));
    let merged = timed(&mut timings, "merge", n, || pipeline::merge_baseline(&inputs, &pc.localize));
    let fusion = timed(&mut timings, "consensus", n, || pipeline::fuse_all(&candidates, &inputs, &pc))?;
    let problem = pipeline::build_problem(&inputs, &fusion.chosen, &pc);
    let refined = timed(&mut timings, "refine", n, || refine(&problem, &pc.refine))?;
    let (sel, fused) = fusion_files(&inputs.frames, &fusion);
    let (w, log) = refine_files(&frame_ids, &refined);
    write_all(
        out,
        &[
            ("candidates.txt", io::format_candidates(&inputs.frames, &candidates)),
            ("merged.txt", io::format_trajectory(&trajectory_of(&inputs.frames, &merged))),
            ("selection.txt", sel),
            ("fused.txt", fused),
            ("refined.txt", io::format_trajectory(&trajectory_of(&inputs.frames, &all_some(&refined.state.poses)))),
            ("weights.txt", w),
            ("refine_log.csv", log),
        ],
    )?;

    let mut columns: Vec<(String, Trajectory)> = vec![
        ("merge".into(), trajectory_of(&inputs.frames, &merged)),
        ("consensus".into(), trajectory_of(&inputs.frames, &pipeline::chosen_poses(&fusion))),
    ];
    if ablation {
        for v in Variant::ALL {
            let rc = msloc::refine::RefineConfig { variant: v, ..pc.refine };
            let r = timed(&mut timings, &format!("refine_{v}"), n, || refine(&problem, &rc))?;
            columns.push((v.to_string(), trajectory_of(&inputs.frames, &all_some(&r.state.poses))));
        }
    } else {
        columns.push((pc.refine.variant.to_string(), trajectory_of(&inputs.frames, &all_some(&refined.state.poses))));
    }
    if pc.polish {
        let pol = timed(&mut timings, "polish", n, || msloc::polish::polish(&inputs, &refined.state.poses, &pc))?;
        let (sel, traj) = fusion_files(&inputs.frames, &pol.fusion);
        let (w, log) = refine_files(&frame_ids, &pol.refined);
        let polished = trajectory_of(&inputs.frames, &all_some(&pol.refined.state.poses));
        write_all(
            out,
            &[
                ("polish_candidates.txt", io::format_candidates(&inputs.frames, &pol.candidates)),
                ("polish_selection.txt", sel),
                ("polish_fused.txt", traj),
                ("polished.txt", io::format_trajectory(&polished)),
                ("polish_weights.txt", w),
                ("polish_log.csv", log),
            ],
        )?;
        columns.push(("polished".into(), polished));
    }

    let mut tables = Vec::new();
    let mut ate = String::from("\nate_rmse_m\n");
    for (name, t) in &columns {
        tables.push((name.clone(), recall_table(t, &truth, &DEFAULT_THRESHOLDS)?));
        ate.push_str(&format!("{name} {:.4}\n", ate_rmse(t, &truth, false)?));
    }
    let report = format!("recall (%) by translation threshold, {n} frames\n{}{ate}", format_recall_text(&tables));
    let rows = timing_report(&timings);
    write_all(
        out,
        &[
            ("report.txt", report.clone()),
            ("report.csv", format_recall_csv(&tables)),
            ("timing.txt", format_timing_text(&rows)),
            ("timing.csv", format_timing_csv(&rows)),
        ],
    )?;
    print!("{report}\n{}", format_timing_text(&rows));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let pc = cfg.pipeline();
    match cli.cmd {
        Cmd::Simulate { out } => cmd_simulate(&cfg, &out),
        Cmd::Localize { queries, out, merged } => {
            let q = load(&queries, io::parse_queries)?;
            let inputs = Inputs {
                k: cfg.scenario.intrinsics,
                frames: q.frames.clone(),
                matches: q.matches,
                tracks: Default::default(),
                odometry: Default::default(),
            };
            let sets = pipeline::localize_all(&inputs, &pc.localize);
            write_text(&out, &io::format_candidates(&inputs.frames, &sets))?;
            if let Some(m) = merged {
                let poses = pipeline::merge_baseline(&inputs, &pc.localize);
                write_text(&m, &io::format_trajectory(&trajectory_of(&inputs.frames, &poses)))?;
            }
            Ok(())
        }
        Cmd::Fuse {
            candidates,
            tracks,
            out_selection,
            out_trajectory,
        } => {
            let CandidateFile { frames, sets } = load(&candidates, io::parse_candidates)?;
            let tracks = load(&tracks, io::parse_tracks)?;
            let fusion = msloc::consensus::fuse(&sets, &tracks, &cfg.scenario.intrinsics, pc.sampson_threshold)?;
            let (sel, traj) = fusion_files(&frames, &fusion);
            write_text(&out_selection, &sel)?;
            write_text(&out_trajectory, &traj)
        }
        Cmd::Refine {
            candidates,
            selection,
            tracks,
            odometry,
            out,
        } => {
            let CandidateFile { frames, sets } = load(&candidates, io::parse_candidates)?;
            let sel = load(&selection, io::parse_selection)?;
            let chosen = io::chosen_from_selection(&selection, &sel, &sets)?;
            let q = QueryFile {
                frames: frames.clone(),
                matches: BTreeMap::new(),
            };
            let inputs = inputs_from_files(&cfg, &q, &tracks, &odometry)?;
            let problem = pipeline::build_problem(&inputs, &chosen, &pc);
            let refined = refine(&problem, &pc.refine)?;
            write_refined(&out, &frames, &refined)
        }
        Cmd::Polish {
            queries,
            tracks,
            odometry,
            refined,
            out_candidates,
            out_selection,
            out,
        } => {
            let q = load(&queries, io::parse_queries)?;
            let inputs = inputs_from_files(&cfg, &q, &tracks, &odometry)?;
            let traj = load(&refined, io::parse_trajectory)?;
            let by_time: BTreeMap<i64, Pose> = traj.iter().map(|(ts, p)| (msloc::evaluation::time_key(*ts), *p)).collect();
            let poses = inputs
                .frames
                .iter()
                .map(|(f, ts)| {
                    by_time.get(&msloc::evaluation::time_key(*ts)).copied().ok_or_else(|| Error::Parse {
                        path: refined.clone(),
                        line: 0,
                        msg: format!("no pose for frame {f}"),
                    })
                })
                .collect::<Result<Vec<Pose>>>()?;
            let pol = msloc::polish::polish(&inputs, &poses, &pc)?;
            let (sel, _) = fusion_files(&inputs.frames, &pol.fusion);
            write_text(&out_candidates, &io::format_candidates(&inputs.frames, &pol.candidates))?;
            write_text(&out_selection, &sel)?;
            write_refined(&out, &inputs.frames, &pol.refined)
        }
        Cmd::Eval {
            truth,
            estimates,
            thresholds,
            out_csv,
        } => {
            let thr = thresholds.unwrap_or_else(|| DEFAULT_THRESHOLDS.to_vec());
            print!("{}", cmd_eval(&truth, &estimates, &thr, out_csv.as_deref())?);
            Ok(())
        }
        Cmd::Pipeline { out, ablation } => cmd_pipeline(&cfg, &out, ablation),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", io::error_record(&e));
            ExitCode::FAILURE
        }
    }
}
