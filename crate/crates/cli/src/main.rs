use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use denseloop::geometry::Keyframe;
use denseloop::harness::dataset::{read_visibility, write_visibility, Dataset};
use denseloop::harness::metrics::default_probes;
use denseloop::harness::{
    eval_ate_rmse, eval_registration, eval_surface, read_ba_problem, read_ply, read_surfel_ply, synth_scene, write_ply,
    write_surfel_ply, FlatConfig, PlyFormat, RegistrationLog, SynthConfig, TrajectoryFile,
};
use denseloop::loop_pipeline::{make_fragments, propose_loops, Fragment, Frame, OverlapParams};
use denseloop::map_correction::{correct_surfels, SurfelMap};
use denseloop::optimization::{bundle_adjust, pose_graph_optimize, BaConfig, PgoParams};
use denseloop::pipeline::{run_pipeline, PipelineConfig};
use denseloop::registration::{register_global, RegistrationParams};
use denseloop::verification::{edge_info, info_or, optimize_line_process, EdgeInfo, LineProcessParams, PoseGraph};
use denseloop::{PointCloud, RigidTransform};

#[derive(Parser)]
#[command(name = "denseloop", version, about = "Dense loop closure back-end for RGB-D SLAM")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Globally register a source cloud onto a target cloud.
    Register {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value_t = 4_000_000)]
        hypotheses: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        leaf: f64,
        #[arg(long, default_value_t = 0.075)]
        dmax: f64,
        #[arg(long, default_value_t = 0.1)]
        normal_radius: f64,
        #[arg(long, default_value_t = 0.25)]
        feature_radius: f64,
        #[arg(long, default_value_t = 0.9)]
        tau: f64,
        #[arg(long, default_value_t = 0.25)]
        min_inlier_ratio: f64,
        /// Defaults to dmax^2 / 2.
        #[arg(long)]
        max_fitness: Option<f64>,
        #[arg(long, default_value_t = 30.0)]
        normal_angle_deg: f64,
    },
    /// Fuse per-frame clouds into fragments.
    Fragments {
        #[arg(long)]
        trajectory: PathBuf,
        /// Directory of frame_NNNNNN.ply clouds in camera coordinates.
        #[arg(long)]
        clouds: PathBuf,
        #[arg(long)]
        keyframes: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        k: usize,
        #[arg(long, default_value_t = 0.05)]
        leaf: f64,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Propose loops between fragments, optionally registering them into the graph.
    Loops {
        #[arg(long)]
        frags: PathBuf,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        d_overlap: f64,
        #[arg(long, default_value_t = 0.2)]
        o_min: f64,
        /// Register each proposal and add successful ones as loop edges.
        #[arg(long)]
        register: bool,
        #[arg(long, default_value_t = 4_000_000)]
        hypotheses: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        /// Output graph; defaults to overwriting --graph.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run line-process verification over the graph's loop edges.
    Verify {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        frags: Option<PathBuf>,
        #[arg(long = "mu-tau", default_value_t = 0.2)]
        mu_tau: f64,
        #[arg(long, default_value_t = 1000.0)]
        lambda: f64,
        #[arg(long, default_value_t = 0.25)]
        reject: f64,
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        /// Output graph; defaults to overwriting --graph.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pose-graph optimization and/or bundle adjustment.
    Optimize {
        #[arg(long)]
        graph: Option<PathBuf>,
        #[arg(long = "ba-problem")]
        ba_problem: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Move surfels with the corrections of their observing keyframes.
    CorrectMap {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        visibility: PathBuf,
        #[arg(long)]
        old: PathBuf,
        #[arg(long)]
        new: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute evaluation metrics.
    Evaluate {
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        estimate: Option<PathBuf>,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        recon: Option<PathBuf>,
        #[arg(long)]
        results: Option<PathBuf>,
        /// Rigidly align the estimate before ATE.
        #[arg(long)]
        align: bool,
    },
    /// Generate a synthetic sequence directory.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full loop-closure pipeline over a sequence directory.
    Pipeline {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Ate,
    Surface,
    Registration,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Register {
            source,
            target,
            hypotheses,
            seed,
            leaf,
            dmax,
            normal_radius,
            feature_radius,
            tau,
            min_inlier_ratio,
            max_fitness,
            normal_angle_deg,
        } => {
            let params = RegistrationParams {
                leaf,
                normal_radius,
                feature_radius,
                hypothesis_count: hypotheses,
                similarity_tau: tau,
                d_max: dmax,
                min_inlier_ratio,
                max_fitness: max_fitness.unwrap_or(dmax * dmax / 2.0),
                normal_angle_max: normal_angle_deg.to_radians(),
                seed,
            };
            let p = read_ply(&source)?;
            let q = read_ply(&target)?;
            match register_global(&p, &q, &params)? {
                Some(r) => {
                    let m: Vec<String> = r.transform.to_row_major().iter().map(|v| v.to_string()).collect();
                    println!("transform {}", m.join(" "));
                    println!("inlier_ratio {}", r.inlier_ratio);
                    println!("fitness {}", r.fitness);
                    println!("hypothesis {}", r.hypothesis_index);
                    Ok(ExitCode::SUCCESS)
                }
                None => {
                    println!("no alignment");
                    Ok(ExitCode::from(2))
                }
            }
        }
        Command::Fragments {
            trajectory,
            clouds,
            keyframes,
            k,
            leaf,
            epsilon,
            out,
        } => {
            let traj = TrajectoryFile::read(&trajectory)?;
            let frames = traj
                .records
                .iter()
                .enumerate()
                .map(|(i, r)| {
                    Ok(Frame {
                        timestamp: r.timestamp,
                        pose: r.pose(),
                        cloud: read_ply(clouds.join(format!("frame_{i:06}.ply")))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let kfs = match keyframes {
                Some(p) => read_keyframes(&p)?,
                None => Vec::new(),
            };
            let frags = make_fragments(&frames, &kfs, k, leaf)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut sidecar = String::from("# id anchor first_frame last_frame\n");
            for f in &frags {
                write_ply(out.join(format!("fragment_{:04}.ply", f.id)), &f.local, PlyFormat::BinaryLittleEndian)?;
                writeln!(sidecar, "{} {} {} {}", f.id, f.anchor_keyframe, f.frame_range.0, f.frame_range.1)?;
            }
            fs::write(out.join("anchors.txt"), sidecar)?;
            let graph = odometry_graph(&frags, epsilon)?;
            write_graph(&out.join("graph.json"), &graph)?;
            println!("fragments {}", frags.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Loops {
            frags,
            graph,
            d_overlap,
            o_min,
            register,
            hypotheses,
            seed,
            epsilon,
            out,
        } => {
            let mut g = read_graph(&graph)?;
            let fragments = read_fragments(&frags, &g)?;
            let proposals = propose_loops(&fragments, &g, &OverlapParams { d_overlap, o_min })?;
            let params = RegistrationParams {
                hypothesis_count: hypotheses,
                seed,
                ..RegistrationParams::default()
            };
            for p in &proposals {
                let mut line = format!("{} {} {}", p.target, p.source, p.overlap_ratio);
                if register {
                    let (i, j) = (p.target, p.source);
                    match register_global(&fragments[j].local, &fragments[i].local, &params) {
                        Ok(Some(r)) => {
                            let info = edge_info(&fragments[i].local, &fragments[j].local, &RigidTransform::identity(), &r.transform, epsilon);
                            match info {
                                Ok(info) => {
                                    g.add_loop(i, j, r.transform, info);
                                    write!(line, " registered {}", r.inlier_ratio)?;
                                }
                                Err(_) => line.push_str(" unregistered"),
                            }
                        }
                        _ => line.push_str(" unregistered"),
                    }
                }
                println!("{line}");
            }
            if register {
                write_graph(out.as_ref().unwrap_or(&graph), &g)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify {
            graph,
            frags,
            mu_tau,
            lambda,
            reject,
            epsilon,
            out,
        } => {
            let mut g = read_graph(&graph)?;
            if let Some(dir) = frags {
                let fragments = read_fragments(&dir, &g)?;
                denseloop::verification::recompute_info(&mut g, &fragments, epsilon)?;
            }
            let params = LineProcessParams {
                lambda_odo: lambda,
                mu_tau,
                reject_l: reject,
                ..LineProcessParams::default()
            };
            let outcome = optimize_line_process(&g, &params)?;
            for l in &outcome.labels {
                println!("{} {} {} {}", l.i, l.j, l.weight, if l.accepted { "accepted" } else { "rejected" });
            }
            write_graph(out.as_ref().unwrap_or(&graph), &outcome.graph)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Optimize {
            graph,
            ba_problem,
            lambda,
            out,
        } => {
            if graph.is_none() && ba_problem.is_none() {
                bail!("optimize needs --graph, --ba-problem or both");
            }
            let mut written = None;
            if let Some(path) = &graph {
                let g = read_graph(path)?;
                let r = pose_graph_optimize(
                    &g,
                    &PgoParams {
                        lambda_odo: lambda,
                        ..PgoParams::default()
                    },
                )?;
                println!("pgo_initial_cost {}", r.initial_cost);
                println!("pgo_final_cost {}", r.final_cost);
                let ts: Vec<f64> = (0..r.poses.len()).map(|k| k as f64).collect();
                written = Some(TrajectoryFile::from_poses(&ts, &r.poses)?);
            }
            if let Some(path) = &ba_problem {
                let problem = read_ba_problem(path)?;
                let r = bundle_adjust(&problem, &BaConfig::default())?;
                println!("ba_iterations {}", r.iterations);
                println!("ba_rmse_px {}", r.rmse);
                let ts: Vec<f64> = r.keyframes.iter().map(|k| k.timestamp).collect();
                let poses: Vec<RigidTransform> = r.keyframes.iter().map(|k| k.pose).collect();
                written = Some(TrajectoryFile::from_poses(&ts, &poses)?);
            }
            written.expect("one optimizer ran").write(&out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::CorrectMap {
            map,
            visibility,
            old,
            new,
            out,
        } => {
            let m = SurfelMap {
                surfels: read_surfel_ply(&map)?,
                visibility: read_visibility(&visibility)?,
            };
            let corrected = correct_surfels(&m, &read_keyframes(&old)?, &read_keyframes(&new)?)?;
            write_surfel_ply(&out, &corrected.surfels, PlyFormat::BinaryLittleEndian)?;
            println!("surfels {}", corrected.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Evaluate {
            mode,
            estimate,
            truth,
            recon,
            results,
            align,
        } => {
            match mode {
                Mode::Ate => {
                    let est = TrajectoryFile::read(estimate.context("--estimate is required for ate")?)?;
                    let gt = TrajectoryFile::read(&truth)?;
                    println!("ate_rmse {}", eval_ate_rmse(&est, &gt, align)?);
                }
                Mode::Surface => {
                    let r = read_ply(recon.context("--recon is required for surface")?)?;
                    let (mean, median) = eval_surface(&r, &read_ply(&truth)?)?;
                    println!("mean {mean}");
                    println!("median {median}");
                }
                Mode::Registration => {
                    let res = RegistrationLog::read(results.context("--results is required for registration")?)?;
                    let probes = default_probes();
                    let s = eval_registration(&res, &RegistrationLog::read(&truth)?, &|_, _| probes.clone());
                    println!("recall {}", s.recall);
                    println!("precision {}", s.precision);
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Synth { config, out } => {
            let cfg = match config {
                Some(p) => SynthConfig::from_flat(&FlatConfig::read(&p)?)?,
                None => SynthConfig::default(),
            };
            let scene = synth_scene(&cfg)?;
            Dataset::from_synth(&scene).save(&out)?;
            fs::write(out.join("scene.cfg"), cfg.to_flat().to_text())?;
            println!("frames {}", scene.clouds.len());
            println!("keyframes {}", scene.keyframes.len());
            println!("surfels {}", scene.surfels.len());
            println!("landmarks {}", scene.ba.landmarks.len());
            Ok(ExitCode::SUCCESS)
        }
        Command::Pipeline { dataset, config, out } => {
            let cfg = match config {
                Some(p) => PipelineConfig::from_flat(&FlatConfig::read(&p)?)?,
                None => PipelineConfig::default(),
            };
            let data = Dataset::load(&dataset)?;
            let result = run_pipeline(&data, &cfg)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            result.trajectory.write(out.join("trajectory.txt"))?;
            if !result.keyframes.is_empty() {
                let ts: Vec<f64> = result.keyframes.iter().map(|k| k.timestamp).collect();
                let poses: Vec<RigidTransform> = result.keyframes.iter().map(|k| k.pose).collect();
                TrajectoryFile::from_poses(&ts, &poses)?.write(out.join("keyframes.txt"))?;
            }
            if let Some(m) = &result.map {
                write_surfel_ply(out.join("map.ply"), &m.surfels, PlyFormat::BinaryLittleEndian)?;
                write_visibility(out.join("visibility.txt"), &m.visibility)?;
            }
            result.loop_log.write(out.join("loops.log"))?;
            let report = result.report.to_text();
            fs::write(out.join("report.txt"), &report)?;
            print!("{report}");
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Keyframes from a TUM file; ids are line order.
fn read_keyframes(path: &Path) -> Result<Vec<Keyframe>> {
    Ok(TrajectoryFile::read(path)?
        .records
        .iter()
        .enumerate()
        .map(|(id, r)| Keyframe {
            id,
            timestamp: r.timestamp,
            pose: r.pose(),
        })
        .collect())
}

fn odometry_graph(frags: &[Fragment], epsilon: f64) -> Result<PoseGraph> {
    let mut g = PoseGraph::default();
    for (k, f) in frags.iter().enumerate() {
        if k == 0 {
            g.push_pose(f.pose, RigidTransform::identity(), EdgeInfo::identity());
            continue;
        }
        let rel = frags[k - 1].pose.inverse() * f.pose;
        let info = info_or(
            edge_info(&frags[k - 1].local, &f.local, &RigidTransform::identity(), &rel, epsilon),
            EdgeInfo::identity(),
        )?;
        g.push_pose(f.pose, rel, info);
    }
    Ok(g)
}

fn read_graph(path: &Path) -> Result<PoseGraph> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let g: PoseGraph = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    g.validate()?;
    Ok(g)
}

fn write_graph(path: &Path, g: &PoseGraph) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(g)?).with_context(|| format!("writing {}", path.display()))
}

/// Fragments from `fragment_NNNN.ply` files, placed at the graph poses.
fn read_fragments(dir: &Path, g: &PoseGraph) -> Result<Vec<Fragment>> {
    g.poses
        .iter()
        .enumerate()
        .map(|(id, pose)| {
            let local: PointCloud = read_ply(dir.join(format!("fragment_{id:04}.ply")))?;
            Ok(Fragment {
                id,
                cloud: local.transformed(pose),
                local,
                pose: *pose,
                anchor_keyframe: id,
                frame_range: (0, 0),
            })
        })
        .collect()
}
