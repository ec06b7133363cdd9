//! The sample, train, upsample, and eval commands.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use puflow::diffcore::{Adam, AdamConfig};
use puflow::geometry::PointCloud;
use puflow::iodata::{
    builtin_shape, load_checkpoint, read_off, read_ply_ascii, read_xyz, sample_mesh_poissonish,
    sample_mesh_uniform, save_checkpoint, write_ply_points, write_xyz, TriangleMesh,
};
use puflow::losses::{
    chamfer_distance, emd_metric, hausdorff_distance, jsd_voxel, point_to_surface_distance,
};
use puflow::model::Model;
use puflow::pipeline::{upsample_cloud, PipelineConfig};
use puflow::training::{
    build_patch_pairs, model_from_checkpoint, snapshot, train as train_loop, PatchPair,
};
use puflow::Scalar;

use crate::config::TrainSettings;
use crate::{CliError, EvalArgs, SampleArgs, SampleMethod, TrainArgs, UpsampleArgs};

/// Key stored next to the model config so inference can default to the
/// patch size the model was trained with.
const PATCH_SIZE_KEY: &str = "pipeline.patch_size";

fn extension(path: &Path) -> String {
    path.extension()
        .map(|e| e.to_string_lossy().to_ascii_lowercase())
        .unwrap_or_default()
}

fn read_mesh(path: &Path) -> Result<TriangleMesh<Scalar>, CliError> {
    match extension(path).as_str() {
        "off" => Ok(read_off(path)?),
        "ply" => Ok(read_ply_ascii(path)?),
        other => Err(CliError::Usage(format!(
            "unsupported mesh format {other:?} for {} (expected .off or .ply)",
            path.display()
        ))),
    }
}

fn read_points(path: &Path) -> Result<Vec<[Scalar; 3]>, CliError> {
    match extension(path).as_str() {
        "xyz" => Ok(read_xyz(path)?.points),
        "off" | "ply" => Ok(read_mesh(path)?.vertices),
        other => Err(CliError::Usage(format!(
            "unsupported point format {other:?} for {} (expected .xyz, .ply, or .off)",
            path.display()
        ))),
    }
}

fn write_points(path: &Path, points: Vec<[Scalar; 3]>) -> Result<(), CliError> {
    let cloud = PointCloud::new(points);
    match extension(path).as_str() {
        "xyz" => Ok(write_xyz(path, &cloud)?),
        "ply" => Ok(write_ply_points(path, &cloud)?),
        other => Err(CliError::Usage(format!(
            "unsupported output format {other:?} for {} (expected .xyz or .ply)",
            path.display()
        ))),
    }
}

pub fn sample(args: &SampleArgs) -> Result<(), CliError> {
    let mesh: TriangleMesh<Scalar> = match (&args.shape, &args.mesh) {
        (Some(name), None) => builtin_shape(name, args.resolution)?,
        (None, Some(path)) => read_mesh(path)?,
        _ => {
            return Err(CliError::Usage(
                "exactly one of --shape and --mesh is required".into(),
            ))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let cloud = match args.method {
        SampleMethod::Uniform => sample_mesh_uniform(&mesh, args.count, &mut rng)?,
        SampleMethod::Poisson => sample_mesh_poissonish(&mesh, args.count, &mut rng)?,
    };
    write_points(&args.out, cloud.points)?;
    println!("points={}", args.count);
    println!("file={}", args.out.display());
    Ok(())
}

/// Matched <stem>.sparse.xyz / <stem>.dense.xyz clouds under a directory,
/// sorted by stem for reproducible runs.
fn load_data_dir(dir: &Path) -> Result<Vec<(String, Vec<[Scalar; 3]>, Vec<[Scalar; 3]>)>, CliError> {
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?
    {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".sparse.xyz") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    if stems.is_empty() {
        return Err(CliError::Data(format!(
            "{}: no <stem>.sparse.xyz files found",
            dir.display()
        )));
    }
    let mut out = Vec::with_capacity(stems.len());
    for stem in stems {
        let sparse = read_xyz(&dir.join(format!("{stem}.sparse.xyz")))?.points;
        let dense_path = dir.join(format!("{stem}.dense.xyz"));
        if !dense_path.exists() {
            return Err(CliError::Data(format!(
                "{}: missing {stem}.dense.xyz next to {stem}.sparse.xyz",
                dir.display()
            )));
        }
        let dense = read_xyz(&dense_path)?.points;
        out.push((stem, sparse, dense));
    }
    Ok(out)
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let settings = TrainSettings::resolve(args)?;
    let mut log = String::new();
    for line in settings.echo_lines() {
        println!("{line}");
        log.push_str(&line);
        log.push('\n');
    }

    let clouds = load_data_dir(&args.data_dir)?;
    let ratio = settings.model.interp.ratio;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.train.seed);
    let mut pairs: Vec<PatchPair<Scalar>> = Vec::with_capacity(settings.pairs);
    let per = settings.pairs / clouds.len();
    let extra = settings.pairs % clouds.len();
    for (i, (_, sparse, dense)) in clouds.iter().enumerate() {
        let want = per + usize::from(i < extra);
        pairs.extend(build_patch_pairs(
            sparse,
            dense,
            want,
            settings.patch_size,
            ratio,
            &mut rng,
        )?);
    }

    let mut model: Model<Scalar> = Model::new(settings.model, &mut rng)?;
    let mut extra_config = settings.train.to_pairs();
    extra_config.push((PATCH_SIZE_KEY.into(), settings.patch_size.to_string()));

    let ckpt = if settings.train.epochs == 0 {
        snapshot(&model, None, 0, &rng, &extra_config)
    } else {
        let mut adam = Adam::new(&model.store, AdamConfig::with_lr(settings.train.learning_rate));
        let report = train_loop(
            &mut model,
            &mut adam,
            &pairs,
            &settings.train,
            &mut rng,
            |stats| {
                let line = stats.log_line();
                log.push_str(&line);
                log.push('\n');
                println!("{line}");
                eprintln!(
                    "epoch {} finished in {:.1}s",
                    stats.epoch, stats.seconds
                );
            },
        )?;
        let mut best = report.best;
        best.config.extend(extra_config);
        eprintln!(
            "best epoch {} (val_emd {:?})",
            report.best_epoch, report.best_val
        );
        best
    };

    save_checkpoint(&args.out_checkpoint, &ckpt)?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out_checkpoint.with_extension("log"));
    std::fs::write(&log_path, log)?;
    println!("checkpoint={}", args.out_checkpoint.display());
    println!("log={}", log_path.display());
    Ok(())
}

pub fn upsample(args: &UpsampleArgs) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model: Model<Scalar> = model_from_checkpoint(&ckpt)?;
    if let Some(ratio) = args.ratio {
        if ratio != model.ratio() {
            return Err(CliError::Data(format!(
                "requested ratio {ratio} but the checkpoint was trained for {}",
                model.ratio()
            )));
        }
    }
    let patch_size = match args.patch_size {
        Some(n) => n,
        None => match ckpt.config_value(PATCH_SIZE_KEY) {
            Some(raw) => raw.parse().map_err(|_| {
                CliError::Data(format!("checkpoint has bad {PATCH_SIZE_KEY} {raw:?}"))
            })?,
            None => 64,
        },
    };
    let input = read_points(&args.input)?;
    let cfg = PipelineConfig {
        patch_size,
        coverage: args.coverage,
        jobs: args.jobs,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let output = upsample_cloud(&model, &input, &cfg, &mut rng)?;
    println!("points={}", output.len());
    write_points(&args.out, output)?;
    println!("file={}", args.out.display());
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let pred = read_points(&args.pred)?;
    let gt = read_points(&args.gt)?;
    let mut report = String::new();
    writeln!(report, "cd={:.9e}", chamfer_distance(&pred, &gt)?).unwrap();
    // The matching metric needs equal counts; nan marks "not applicable".
    if pred.len() == gt.len() {
        writeln!(report, "emd={:.9e}", emd_metric(&pred, &gt)?).unwrap();
    } else {
        writeln!(report, "emd=nan").unwrap();
    }
    writeln!(report, "hd={:.9e}", hausdorff_distance(&pred, &gt)?).unwrap();
    writeln!(report, "jsd={:.9e}", jsd_voxel(&pred, &gt)?).unwrap();
    if let Some(mesh_path) = &args.mesh {
        let mesh = read_mesh(mesh_path)?;
        let tris: Vec<[[Scalar; 3]; 3]> = mesh
            .triangles
            .iter()
            .map(|t| [mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]])
            .collect();
        writeln!(report, "p2f={:.9e}", point_to_surface_distance(&pred, &tris)?).unwrap();
    }
    print!("{report}");
    if let Some(out) = &args.out {
        std::fs::write(out, &report)?;
    }
    Ok(())
}

/// Shared by the check command: a reproducible synthetic patch.
pub fn random_patch(n: usize, rng: &mut ChaCha8Rng) -> Vec<[Scalar; 3]> {
    (0..n)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect()
}

/// Resolves the checkpoint argument for the check command.
pub fn load_or_fresh(path: Option<&PathBuf>, seed: u64) -> Result<Model<Scalar>, CliError> {
    match path {
        Some(p) => {
            let ckpt = load_checkpoint(p)?;
            Ok(model_from_checkpoint(&ckpt)?)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(Model::new(Default::default(), &mut rng)?)
        }
    }
}
