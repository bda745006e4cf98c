use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use scenelet_core::db::{default_categories, SceneletDb};
use scenelet_core::energy::{combined_joints, scene_objects, EnergyBreakdown, Problem};
use scenelet_core::io::{self, AnnotationsDoc, Config, Document, SceneDoc, TemplateDoc};
use scenelet_core::pipeline::{self, FrameScore, PipelineOutput};
use scenelet_core::synth::{self, ObjectEval, PoseErrors};
use scenelet_core::tracker;

#[derive(Parser)]
#[command(name = "scenelet", version, about = "Scene layout and world-space motion from monocular joint tracks")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Configuration document; defaults are used for anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; all cores when absent.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Build a scenelet database from recordings or from synthetic captures.
    BuildDb {
        #[arg(long, num_args = 1.., required_unless_present = "synthetic")]
        recordings: Vec<PathBuf>,
        /// Generate this many scenelets from synthetic rooms instead.
        #[arg(long, conflicts_with = "recordings")]
        synthetic: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-frame interaction scores and their maxima.
    Charness {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        track: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct the scene and world motion for a track.
    Fit {
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        track: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write this many temporally distinct alternatives next to `out`.
        #[arg(long, default_value_t = 0)]
        top_diverse: usize,
        /// Print the energy breakdown of every written scene as JSON.
        #[arg(long)]
        dump_energy: bool,
    },
    /// Assign per-frame skeleton detections to actors.
    Track {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        actors: usize,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a ground-truth scene with its camera and rendered track.
    Synth {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        db: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Compare a reconstruction against ground truth.
    Eval {
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Same-label objects farther apart than this stay unmatched.
        #[arg(long, default_value_t = 1.0)]
        max_distance_m: f64,
    },
    /// Write cuboids and pelvis paths of a scene as Wavefront OBJ.
    ExportObj {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CharnessReport {
    scores: Vec<FrameScore>,
    /// Local maxima above the score threshold.
    peaks: Vec<usize>,
    /// Frames the candidate stages start from.
    anchors: Vec<usize>,
    occluded: Vec<bool>,
}

impl Document for CharnessReport {
    const FORMAT: &'static str = "charness";
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EvalReport {
    pose_all: PoseErrors,
    /// Only present when the truth marks hidden frames.
    pose_visible: Option<PoseErrors>,
    pose_hidden: Option<PoseErrors>,
    objects_interacted: ObjectEval,
    objects_all: ObjectEval,
    /// Share of interacted-with truth objects that found a match.
    interacted_recall: f64,
}

impl Document for EvalReport {
    const FORMAT: &'static str = "evaluation";
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.global.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<scenelet_core::Error>())
                .map_or(1, |c| c.exit_code());
            ExitCode::from(code as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let config = match &cli.global.config {
        Some(p) => io::load_config(p)?,
        None => Config::default(),
    };
    let seed = cli.global.seed;
    match cli.command {
        Command::BuildDb {
            recordings,
            synthetic,
            out,
        } => {
            let db = match synthetic {
                Some(n) => synth::synthetic_database(n, seed, config.database.clone())?,
                None => {
                    let recs = recordings
                        .iter()
                        .map(|p| io::load_recording(p))
                        .collect::<scenelet_core::Result<Vec<_>>>()?;
                    SceneletDb::build(&recs, default_categories(), config.database.clone())?
                }
            };
            log::info!("database with {} scenelets", db.len());
            io::save_database(&out, &db)?;
        }
        Command::Charness {
            db,
            track,
            camera,
            out,
        } => {
            let db = io::load_database(&db)?;
            let (track, _) = io::load_track(&track)?;
            let camera = io::load_camera(&camera)?;
            let p = pipeline::charness_profile(&db, &track, &camera, &config.pipeline)?;
            io::save(
                &out,
                &CharnessReport {
                    scores: p.scores,
                    peaks: p.peaks,
                    anchors: p.anchors,
                    occluded: p.mask.occluded,
                },
            )?;
        }
        Command::Fit {
            db,
            track,
            camera,
            out,
            top_diverse,
            dump_energy,
        } => {
            let db = io::load_database(&db)?;
            let (track, first_frames) = io::load_track(&track)?;
            let camera = io::load_camera(&camera)?;
            let result = pipeline::run(&db, &track, &camera, &config.pipeline, top_diverse)?;
            let doc = SceneDoc::from_output(&result, &db, &camera, &first_frames);
            io::save(&out, &doc)?;
            let mut energies = vec![(out.clone(), result.breakdown)];
            for (i, (state, breakdown)) in result.alternatives.iter().enumerate() {
                let path = alternative_path(&out, i + 1);
                let alt = alternative(&result, state, *breakdown, &db, &camera, &config)?;
                io::save(&path, &SceneDoc::from_output(&alt, &db, &camera, &first_frames))?;
                energies.push((path, *breakdown));
            }
            if dump_energy {
                for (path, e) in energies {
                    println!(
                        "{}",
                        serde_json::json!({ "scene": path.display().to_string(), "energy": e })
                    );
                }
            }
        }
        Command::Track {
            detections,
            actors,
            annotations,
            out,
        } => {
            let (frames, rate) = io::load_detections(&detections)?;
            let pins = match annotations {
                Some(p) => io::load::<AnnotationsDoc>(&p)?.pins,
                None => Vec::new(),
            };
            let assignment = tracker::solve_tracking(&frames, actors, &pins, config.tracker.pairwise_weight)?;
            let tracks = tracker::actor_tracks(&frames, &assignment, actors, rate);
            if tracks.is_empty() {
                bail!("no actor was assigned any detection");
            }
            let firsts: Vec<usize> = tracks.iter().map(|t| t.0).collect();
            let track = scenelet_core::energy::ObservationTrack::concat(tracks.into_iter().map(|t| t.1).collect())?;
            io::save_track(&out, &track, &firsts)?;
        }
        Command::Synth { template, db, out_dir } => {
            let template: TemplateDoc = io::load(&template)?;
            let db = io::load_database(&db)?;
            let scene = synth::generate_scene(&db, &template.scene, seed)?;
            let rendering = synth::render_observations(&scene, &template.render, seed)?;
            std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
            io::save(
                &out_dir.join("truth.json"),
                &SceneDoc::from_truth(&scene, rendering.hidden_frames()),
            )?;
            io::save_track(&out_dir.join("track.json"), &rendering.track, &[0])?;
            io::save_camera(&out_dir.join("camera.json"), &scene.camera)?;
        }
        Command::Eval {
            result,
            truth,
            report,
            max_distance_m,
        } => {
            let r = evaluate(&result, &truth, max_distance_m)?;
            io::save(&report, &r)?;
        }
        Command::ExportObj { scene, out } => {
            let doc: SceneDoc = io::load(&scene)?;
            let text = io::scene_to_obj(&doc).map_err(|e| anyhow::anyhow!("{}: at `body.{}`: {}", scene.display(), e.field, e.message))?;
            std::fs::write(&out, text).with_context(|| format!("writing {}", out.display()))?;
        }
    }
    Ok(())
}

fn alternative_path(out: &Path, i: usize) -> PathBuf {
    let stem = out.file_stem().map_or("scene".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.alt{i}.json"))
}

/// A pipeline output that carries an alternative state instead of the best.
fn alternative(
    best: &PipelineOutput,
    state: &scenelet_core::energy::SceneState,
    breakdown: EnergyBreakdown,
    db: &SceneletDb,
    camera: &scenelet_core::geometry::Camera,
    config: &Config,
) -> Result<PipelineOutput> {
    let problem = Problem {
        db,
        track: &best.track,
        camera,
        config: &config.pipeline.energy,
    };
    let mut out = best.clone();
    out.joints = combined_joints(&problem, state)?;
    out.objects = scene_objects(db, state);
    out.state = state.clone();
    out.breakdown = breakdown;
    out.alternatives.clear();
    Ok(out)
}

fn evaluate(result: &Path, truth: &Path, max_distance: f64) -> Result<EvalReport> {
    let schema = |file: &Path, e: io::Invalid| anyhow::anyhow!("{}: at `body.{}`: {}", file.display(), e.field, e.message);
    let r: SceneDoc = io::load(result)?;
    let t: SceneDoc = io::load(truth)?;
    let truth_scene = t.to_truth().map_err(|e| schema(truth, e))?;
    let rp = r.poses().map_err(|e| schema(result, e))?;
    let tp = truth_scene.poses();
    if rp.len() != tp.len() {
        bail!("result has {} frames but the truth has {}", rp.len(), tp.len());
    }
    let all: Vec<usize> = (0..tp.len()).collect();
    let pose_all = synth::eval_pose(&rp, &tp, &truth_scene.camera, &all)?;
    let (pose_visible, pose_hidden) = if t.hidden_frames.len() == tp.len() {
        let (hidden, visible): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| t.hidden_frames[i]);
        (
            Some(synth::eval_pose(&rp, &tp, &truth_scene.camera, &visible)?),
            Some(synth::eval_pose(&rp, &tp, &truth_scene.camera, &hidden)?),
        )
    } else {
        (None, None)
    };
    let result_objects = r.objects().map_err(|e| schema(result, e))?;
    let interacted: Vec<_> = truth_scene
        .objects
        .iter()
        .filter(|o| o.interacted)
        .map(|o| o.object.clone())
        .collect();
    let objects_interacted = synth::eval_objects(&result_objects, &interacted, max_distance);
    let objects_all = synth::eval_objects(&result_objects, &truth_scene.placed_objects(), max_distance);
    let interacted_recall = if interacted.is_empty() {
        1.0
    } else {
        objects_interacted.matches.len() as f64 / interacted.len() as f64
    };
    Ok(EvalReport {
        pose_all,
        pose_visible,
        pose_hidden,
        objects_interacted,
        objects_all,
        interacted_recall,
    })
}
