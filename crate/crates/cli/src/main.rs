use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use densetrack::config::ModelConfig;
use densetrack::decoder::FlowField;
use densetrack::metrics::{dense_to_queries, tap_metrics, FlowAccumulator, TAP_THRESHOLDS};
use densetrack::splatting::SplatMode;
use densetrack::synth::{self, read_flo, read_pgm, read_ppm, write_flo, write_pgm, write_ppm, Mask, SceneConfig};
use densetrack::tensor::Tensor;
use densetrack::trainer::{Checkpoint, TrainConfig, Trainer};
use densetrack::tracker::Model;
use densetrack::{viz, Error, Result};

#[derive(Parser, Debug, Serialize)]
#[command(name = "densetrack", version, about = "Online dense point tracking on synthetic and recorded sequences")]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
enum Command {
    /// Generate synthetic sequences with ground truth.
    Gen(GenArgs),
    /// Train a model on a corpus of sequences.
    Train(TrainArgs),
    /// Track every first-frame pixel through a sequence.
    Track(TrackArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Render flow fields with the color wheel.
    Viz(VizArgs),
}

#[derive(Args, Debug, Serialize)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    num: usize,
    /// Square canvas side in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 24)]
    frames: usize,
    #[arg(long, default_value_t = 2)]
    min_objects: usize,
    #[arg(long, default_value_t = 4)]
    max_objects: usize,
    #[arg(long, default_value_t = 1.5)]
    max_speed: f64,
    #[arg(long)]
    rotation: bool,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// A sequence directory or a directory of sequence directories.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 4e-4)]
    lr: f64,
    #[arg(long = "iters-N", default_value_t = 12)]
    iters_n: usize,
    #[arg(long, default_value_t = 3)]
    mem_len: usize,
    #[arg(long, default_value_t = 24)]
    video_len: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 4)]
    bptt: usize,
    #[arg(long, default_value_t = 10)]
    log_every: usize,
    /// Comma-separated components to disable.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
    #[arg(long, default_value = "linear")]
    splat: String,
    /// `toy` or `default` model widths.
    #[arg(long, default_value = "toy")]
    scale: String,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Train on the sequences as stored, without random flips and channel orders.
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args, Debug, Serialize)]
struct TrackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sequence directory containing `frames/`.
    #[arg(long)]
    seq: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "iters-N", default_value_t = 16)]
    iters_n: usize,
    #[arg(long)]
    mem_len: Option<usize>,
    /// Stop after this many frames.
    #[arg(long)]
    max_frames: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    /// Prediction directory with `flow/` and `vis/`, or a directory of them.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth sequence directory, or a directory of them.
    #[arg(long)]
    gt: PathBuf,
    /// Text file of first-frame query points, one `x y` pair per line.
    #[arg(long)]
    queries: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct VizArgs {
    /// A `.flo` file or a directory of them.
    #[arg(long)]
    flow: PathBuf,
    /// Output `.ppm` file, or directory when `--flow` is a directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    max_flow: Option<f64>,
    /// Visibility `.pgm` file or directory; occluded pixels get stripes.
    #[arg(long)]
    vis: Option<PathBuf>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'static str,
    config: &'a Cli,
    seed: u64,
    threads: usize,
    version: &'static str,
    out_dir: &'a Path,
}

fn write_manifest(cli: &Cli, command: &'static str, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let m = RunManifest { command, config: cli, seed: cli.seed, threads: cli.threads, version: env!("CARGO_PKG_VERSION"), out_dir };
    let json = serde_json::to_string_pretty(&m).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(out_dir.join("manifest.json"), json)?;
    Ok(())
}

/// `dir` itself when it holds `marker`, else its sorted subdirectories that do.
fn sequence_dirs(dir: &Path, marker: &str) -> Result<Vec<PathBuf>> {
    if dir.join(marker).exists() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(marker).exists())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn numbered_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    files.sort();
    Ok(files)
}

fn cmd_gen(cli: &Cli, a: &GenArgs) -> Result<()> {
    let base = SceneConfig {
        height: a.size,
        width: a.size,
        frames: a.frames,
        num_objects: [a.min_objects, a.max_objects],
        speed_range: [0.0, a.max_speed],
        rotation: a.rotation,
        size_range: [(a.size as f64 / 5.0).max(1.0), (a.size as f64 * 0.45).max(1.0)],
        ..SceneConfig::default()
    };
    base.validate()?;
    write_manifest(cli, "gen", &a.out)?;
    let written: Vec<Result<(String, u64)>> = (0..a.num)
        .into_par_iter()
        .map(|i| {
            let seed = cli.seed.wrapping_add(i as u64);
            let rec = synth::generate(&SceneConfig { seed, ..base.clone() })?;
            let name = format!("seq_{i:04}");
            synth::save_sequence(&rec, a.out.join(&name))?;
            Ok((name, seed))
        })
        .collect();
    for w in written {
        let (name, seed) = w?;
        println!("{name} seed={seed}");
    }
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut model = match a.scale.as_str() {
        "toy" => ModelConfig::toy(),
        "default" => ModelConfig::default(),
        other => return Err(Error::Config(format!("unknown scale `{other}`; use toy or default"))),
    };
    model.memory_len = a.mem_len;
    model.splat_mode = a.splat.parse::<SplatMode>().map_err(Error::Config)?;
    for name in &a.ablate {
        model.toggles.disable(name.trim())?;
    }
    let config = TrainConfig {
        model,
        iters: a.iters_n,
        video_len: a.video_len,
        lr: a.lr,
        steps: a.steps,
        batch_size: a.batch,
        bptt_window: a.bptt,
        log_every: a.log_every,
        seed: cli.seed,
        augment: !a.no_augment,
        ..TrainConfig::default()
    };
    config.validate()?;
    let dirs = sequence_dirs(&a.data, "config.json")?;
    if dirs.is_empty() {
        return Err(Error::Config(format!("no sequences found under {}", a.data.display())));
    }
    write_manifest(cli, "train", &a.out)?;
    let corpus = dirs.iter().map(synth::load_sequence).collect::<Result<Vec<_>>>()?;
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(config, Checkpoint::load(p)?)?,
        None => Trainer::new(config)?,
    };
    let ckpt_path = a.out.join("checkpoint.spot");
    let mut log = String::from("step,loss,epe\n");
    let result = trainer.run(&corpus, |e| {
        println!("step={} loss={:.6} epe={:.4}", e.step, e.loss, e.epe);
        log += &e.csv();
        log.push('\n');
    });
    fs::write(a.out.join("loss.csv"), &log)?;
    trainer.checkpoint().save(&ckpt_path)?;
    result?;
    println!("checkpoint={}", ckpt_path.display());
    Ok(())
}

fn cmd_track(a: &TrackArgs, cli: &Cli) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut model = Model::new(ckpt.config.clone())?;
    if let Some(l) = a.mem_len {
        model.set_memory_len(l)?;
    }
    let mut frames = numbered_files(&a.seq.join("frames"), "ppm")?;
    if frames.is_empty() {
        return Err(Error::Config(format!("no frames under {}", a.seq.join("frames").display())));
    }
    if let Some(m) = a.max_frames {
        frames.truncate(m.max(1));
    }
    write_manifest(cli, "track", &a.out)?;
    fs::create_dir_all(a.out.join("flow"))?;
    fs::create_dir_all(a.out.join("vis"))?;
    let mut state = None;
    for (t, path) in frames.iter().enumerate() {
        let frame = read_ppm(path)?;
        let (next, out) = match state.take() {
            None => model.init(&ckpt.params, &frame)?,
            Some(s) => model.step(&ckpt.params, s, &frame, a.iters_n).map_err(|e| match e {
                Error::Shape(m) => Error::Config(format!("{}: {m}", path.display())),
                other => other,
            })?,
        };
        state = Some(next);
        write_flo(a.out.join(format!("flow/{t:05}.flo")), &out.flow)?;
        let px: Vec<u8> = out.vis.prob().data().iter().map(|&p| (p * 255.0).round() as u8).collect();
        write_pgm(a.out.join(format!("vis/{t:05}.pgm")), out.flow.width(), out.flow.height(), &px)?;
        println!("frame={t}");
    }
    Ok(())
}

fn read_vis_prob(path: &Path) -> Result<Tensor<f32>> {
    let (w, h, px) = read_pgm(path)?;
    Tensor::new([1, h, w], px.iter().map(|&b| b as f32 / 255.0).collect())
}

fn read_queries(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut offset = 0;
    for line in text.lines() {
        let t = line.trim();
        if !t.is_empty() && !t.starts_with('#') {
            let nums: Vec<f64> = t
                .split(|c: char| c.is_whitespace() || c == ',')
                .filter(|s| !s.is_empty())
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Parse { offset, msg: format!("bad query line `{t}`") })?;
            let [x, y] = nums[..] else {
                return Err(Error::Parse { offset, msg: format!("expected `x y`, got `{t}`") });
            };
            out.push((x, y));
        }
        offset += line.len() + 1;
    }
    Ok(out)
}

fn print_metric(split: &str, name: &str, v: Option<f64>) {
    match v {
        Some(v) => {
            println!("{split}.{name}={v:.6}");
            println!("{name},{split},{v:.6}");
        }
        None => println!("{split}.{name}=n/a"),
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let gt_dirs = sequence_dirs(&a.gt, "config.json")?;
    let pred_dirs = sequence_dirs(&a.pred, "flow")?;
    if gt_dirs.is_empty() || gt_dirs.len() != pred_dirs.len() {
        return Err(Error::Contract(format!(
            "{} prediction sets for {} ground-truth sequences",
            pred_dirs.len(),
            gt_dirs.len()
        )));
    }
    let queries = a.queries.as_deref().map(read_queries).transpose()?;
    let mut total = FlowAccumulator::default();
    let (mut pred_tracks, mut gt_tracks) = (densetrack::metrics::Tracks::default(), densetrack::metrics::Tracks::default());
    for (gd, pd) in gt_dirs.iter().zip(&pred_dirs) {
        let gt = synth::load_sequence(gd)?;
        let flows = numbered_files(&pd.join("flow"), "flo")?;
        let vis = numbered_files(&pd.join("vis"), "pgm")?;
        if flows.len() != gt.len() || vis.len() != gt.len() {
            return Err(Error::Contract(format!(
                "{}: {} flow and {} visibility files for {} frames",
                pd.display(),
                flows.len(),
                vis.len(),
                gt.len()
            )));
        }
        let pred_flow = flows.iter().map(read_flo).collect::<Result<Vec<FlowField>>>()?;
        let pred_vis = vis.iter().map(|p| read_vis_prob(p)).collect::<Result<Vec<_>>>()?;
        let mut acc = FlowAccumulator::default();
        let first = usize::from(gt.len() > 1);
        for t in first..gt.len() {
            acc.add(&pred_flow[t], &pred_vis[t], &gt.gt_flow[t], &gt.gt_vis[t])?;
            total.add(&pred_flow[t], &pred_vis[t], &gt.gt_flow[t], &gt.gt_vis[t])?;
        }
        let m = acc.finish()?;
        let split = gd.file_name().map_or("seq".into(), |n| n.to_string_lossy().into_owned());
        print_metric(&split, "epe_all", Some(m.epe_all));
        print_metric(&split, "epe_vis", m.epe_vis);
        print_metric(&split, "epe_occ", m.epe_occ);
        print_metric(&split, "oa", Some(m.oa));
        if let Some(q) = &queries {
            let gt_vis: Vec<Tensor<f32>> = gt.gt_vis.iter().map(Mask::to_tensor).collect();
            let p = dense_to_queries(&pred_flow, &pred_vis, q)?;
            let g = dense_to_queries(&gt.gt_flow, &gt_vis, q)?;
            pred_tracks.positions.extend(p.positions);
            pred_tracks.occluded.extend(p.occluded);
            gt_tracks.positions.extend(g.positions);
            gt_tracks.occluded.extend(g.occluded);
        }
    }
    let m = total.finish()?;
    print_metric("all", "epe_all", Some(m.epe_all));
    print_metric("all", "epe_vis", m.epe_vis);
    print_metric("all", "epe_occ", m.epe_occ);
    print_metric("all", "oa", Some(m.oa));
    if queries.is_some() {
        let tm = tap_metrics(&pred_tracks, &gt_tracks, &TAP_THRESHOLDS)?;
        print_metric("all", "aj", Some(tm.aj));
        print_metric("all", "delta_avg", Some(tm.delta_avg));
        print_metric("all", "tap_oa", Some(tm.oa));
    }
    Ok(())
}

fn render_one(flow: &Path, vis: Option<&Path>, out: &Path, max_flow: Option<f64>) -> Result<()> {
    let f = read_flo(flow)?;
    let occluded = match vis {
        Some(v) => {
            let (w, h, px) = read_pgm(v)?;
            if (w, h) != (f.width(), f.height()) {
                return Err(Error::Shape(format!("{}: visibility {w}x{h} does not match flow", v.display())));
            }
            Some(px.iter().map(|&b| b < 128).collect::<Vec<bool>>())
        }
        None => None,
    };
    write_ppm(out, &viz::render_flow(&f, max_flow, occluded.as_deref()))
}

fn cmd_viz(cli: &Cli, a: &VizArgs) -> Result<()> {
    if a.flow.is_dir() {
        write_manifest(cli, "viz", &a.out)?;
        for f in numbered_files(&a.flow, "flo")? {
            let stem = f.file_stem().unwrap().to_string_lossy().into_owned();
            let vis = a.vis.as_ref().map(|d| d.join(format!("{stem}.pgm")));
            render_one(&f, vis.as_deref(), &a.out.join(format!("{stem}.ppm")), a.max_flow)?;
        }
        Ok(())
    } else {
        if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            write_manifest(cli, "viz", dir)?;
        }
        render_one(&a.flow, a.vis.as_deref(), &a.out, a.max_flow)
    }
}

fn run(cli: &Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Track(a) => cmd_track(a, cli),
        Command::Eval(a) => cmd_eval(a),
        Command::Viz(a) => cmd_viz(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
