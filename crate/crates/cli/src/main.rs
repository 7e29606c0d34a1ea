use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use molmap::experiments::{run_experiment, Experiment};
use molmap::hybrid::RoiSet;
use molmap::model::GroundTruth;
use molmap::pipeline::{Pipeline, PipelineConfig, SegmentationResult};
use molmap::simulate::CoincidenceImage;
use molmap::{Error, Result};

#[derive(Parser)]
#[command(name = "molmap", version, about = "Molecular maps from photon-antibunching scans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured noise seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate confocal and STED coincidence images of the ground truth.
    Simulate(Common),
    /// Segment a STED image into validated regions.
    Segment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sted: PathBuf,
    },
    /// Count molecules per region on a confocal image.
    Count {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        confocal: PathBuf,
        #[arg(long)]
        rois: PathBuf,
        /// Ground truth; adds truth and coverage columns to the CSV.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Simulate, segment and count in one go.
    Pipeline(Common),
    /// Run a replicate study: figure4, figure5, figure6, figure7, coverage or clt.
    Experiment {
        name: String,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("molmap: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("molmap: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 3,
            })
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("MOLMAP_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("MOLMAP_THREADS={v} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn setup(common: &Common) -> Result<(Pipeline, PathBuf)> {
    let mut config = PipelineConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        config.seed = s;
    }
    if let Some(o) = &common.out {
        config.out = Some(o.clone());
    }
    let out = config.out.clone().unwrap_or_else(|| PathBuf::from("molmap-out"));
    std::fs::create_dir_all(&out).map_err(|e| Error::Data(format!("cannot create {}: {e}", out.display())))?;
    Ok((Pipeline::new(config)?, out))
}

fn run(command: Command) -> Result<Vec<PathBuf>> {
    match command {
        Command::Simulate(common) => {
            let (p, out) = setup(&common)?;
            let gt = p.ground_truth_checked()?;
            let (confocal, sted) = p.simulate(&gt, p.config.seed)?;
            Ok(vec![
                write_image(&out, "confocal.json", &confocal)?,
                write_image(&out, "sted.json", &sted)?,
                write_truth(&out, &gt, &p.hash)?,
            ])
        }
        Command::Segment { common, sted } => {
            let (p, out) = setup(&common)?;
            let sted = read_image(&sted)?;
            let scanner = p.scanner(sted.n)?;
            let cal = p.calibration(&scanner, sted.n)?;
            let seg = p.segment(&sted, &scanner, &cal)?;
            write_segmentation(&out, &seg, &p.hash)
        }
        Command::Count {
            common,
            confocal,
            rois,
            truth,
        } => {
            let (p, out) = setup(&common)?;
            let confocal = read_image(&confocal)?;
            let rois = RoiSet::from_json_str(&read_text(&rois)?)?;
            let mut map = p.count(&confocal, &rois)?.map;
            if let Some(t) = truth {
                let gt = GroundTruth::from_json_str(&read_text(&t)?)?;
                if gt.n != map.n {
                    return Err(Error::Data(format!("truth is {0}x{0}, map is {1}x{1}", gt.n, map.n)));
                }
                map.attach_truth(&gt);
            }
            write_map(&out, &map)
        }
        Command::Pipeline(common) => {
            let (p, out) = setup(&common)?;
            let run = p.run()?;
            let mut files = vec![
                write_image(&out, "confocal.json", &run.confocal)?,
                write_image(&out, "sted.json", &run.sted)?,
                write_truth(&out, &run.ground_truth, &p.hash)?,
            ];
            files.extend(write_segmentation(&out, &run.segmentation, &p.hash)?);
            files.extend(write_map(&out, &run.map)?);
            Ok(files)
        }
        Command::Experiment { name, common } => {
            let which: Experiment = name.parse()?;
            let (p, out) = setup(&common)?;
            run_experiment(which, &p, &out)
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn read_image(path: &Path) -> Result<CoincidenceImage> {
    if path.extension().is_some_and(|e| e == "csv") {
        CoincidenceImage::read_csv(path)
    } else {
        CoincidenceImage::from_json_str(&read_text(path)?).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

fn write_image(dir: &Path, name: &str, img: &CoincidenceImage) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, img.to_json_string()?)?;
    Ok(path)
}

fn write_truth(dir: &Path, gt: &GroundTruth, hash: &str) -> Result<PathBuf> {
    let mut v = serde_json::to_value(gt)?;
    v["config_hash"] = serde_json::Value::String(hash.to_string());
    let path = dir.join("truth.json");
    std::fs::write(&path, serde_json::to_string(&v)?)?;
    Ok(path)
}

fn write_segmentation(dir: &Path, seg: &SegmentationResult, hash: &str) -> Result<Vec<PathBuf>> {
    let boxes = serde_json::json!({
        "config_hash": hash,
        "selected": seg.selected,
        "pruned": seg.pruned,
    });
    let files = [
        dir.join("rois.json"),
        dir.join("rois.pgm"),
        dir.join("boxes.json"),
        dir.join("watershed.pgm"),
    ];
    seg.rois.write_json(&files[0])?;
    seg.rois.write_pgm(&files[1])?;
    std::fs::write(&files[2], serde_json::to_string(&boxes)?)?;
    seg.watershed.write_pgm(&files[3], Some(hash))?;
    Ok(files.to_vec())
}

fn write_map(dir: &Path, map: &molmap::counting::MolecularMap) -> Result<Vec<PathBuf>> {
    let files = [dir.join("map.json"), dir.join("map.csv"), dir.join("density.pgm")];
    std::fs::write(&files[0], map.to_json_string()?)?;
    map.write_csv(&files[1])?;
    map.write_density_pgm(&files[2])?;
    Ok(files.to_vec())
}
