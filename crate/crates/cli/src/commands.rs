use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use duosplat_core::image::{read_mask_png, read_rgb_png, write_rgb_png, Grid};
use duosplat_core::pipeline::Prior;
use duosplat_core::ply::{read_gaussian_ply, write_gaussian_ply, write_point_cloud_ply};
use duosplat_core::splat::render;
use duosplat_core::synth::{make_dataset, SubjectViews};
use duosplat_core::training::{stage1_sample, stage2_sample, train_stage1, train_stage2};
use duosplat_core::{
    evaluate, CameraModel, CanonicalView, Checkpoint, Dataset, Error as CoreError, GaussianNet, PointMap, PointMapNet, Reconstructor, Rgb, RgbImage,
};

use crate::config::{Overrides, RunConfig};
use crate::error::{CliError, CliResult};
use crate::{Cli, Command, Device, ExportKind};

pub const STAGE1_CKPT: &str = "stage1.ckpt";
pub const MODEL_CKPT: &str = "model.ckpt";

pub fn run(cli: &Cli) -> CliResult<()> {
    let g = &cli.global;
    let cfg = RunConfig::resolve(
        g.config.as_deref(),
        Overrides {
            seed: g.seed,
            resolution: g.resolution,
        },
    )?;
    if g.device == Device::GpuIfAvailable {
        log::warn!("no GPU backend is built in; running on the CPU");
    }
    let out = &g.out;
    match &cli.command {
        Command::GenData { subjects, novel_views } => gen_data(cfg, &g.data, *subjects, *novel_views),
        Command::TrainStage1 { iterations, subjects } => {
            create_dir(out)?;
            stage1(cfg, &g.data, out, *iterations, *subjects)
        }
        Command::TrainStage2 {
            stage1,
            iterations,
            subjects,
        } => {
            create_dir(out)?;
            let ck = stage1.clone().unwrap_or_else(|| out.join(STAGE1_CKPT));
            stage2(cfg, &g.data, out, &ck, *iterations, *subjects)
        }
        Command::Infer {
            checkpoint,
            front,
            front_mask,
            back,
            back_mask,
        } => {
            let rec = reconstructor(&cfg, &model_path(checkpoint, out))?;
            create_dir(out)?;
            infer(&rec, out, [front, front_mask, back, back_mask])
        }
        Command::Render { ply, camera, azimuth } => {
            create_dir(out)?;
            render_ply(&cfg, out, ply, camera, azimuth)
        }
        Command::Eval { checkpoint, views } => {
            let rec = reconstructor(&cfg, &model_path(checkpoint, out))?;
            let data = load_dataset(&cfg, &g.data)?;
            let report = evaluate(&rec, &data.subjects, (*views).into(), data.config.rig.background)?;
            report.write(out)?;
            let summary = serde_json::to_string_pretty(&report.summary()).expect("summary serializes");
            println!("{summary}");
            Ok(())
        }
        Command::ExportPly { checkpoint, subject, kind } => {
            let rec = reconstructor(&cfg, &model_path(checkpoint, out))?;
            let data = load_dataset(&cfg, &g.data)?;
            create_dir(out)?;
            export(&rec, &data, out, subject.as_deref(), *kind)
        }
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CoreError::Io {
        path: path.to_path_buf(),
        source,
    }
    .into()
}

fn model_path(flag: &Option<PathBuf>, out: &Path) -> PathBuf {
    flag.clone().unwrap_or_else(|| out.join(MODEL_CKPT))
}

fn gen_data(mut cfg: RunConfig, root: &Path, subjects: Option<usize>, novel: Option<usize>) -> CliResult<()> {
    if let Some(n) = subjects {
        cfg.data.n_subjects = n;
    }
    if let Some(n) = novel {
        cfg.data.novel_views = n;
    }
    let manifest = make_dataset(&cfg.data, root)?;
    log::info!("wrote {} views of {} subjects to {}", manifest.bundles.len(), cfg.data.n_subjects, root.display());
    Ok(())
}

fn load_dataset(cfg: &RunConfig, root: &Path) -> CliResult<Dataset> {
    let data = Dataset::load(root)?;
    let res = data.config.rig.resolution;
    if res != cfg.net.image_size {
        return Err(CliError::Usage(format!(
            "dataset at {} has resolution {res}, the network expects {}",
            root.display(),
            cfg.net.image_size
        )));
    }
    Ok(data)
}

fn first_subjects(data: &Dataset, n: Option<usize>) -> CliResult<&[SubjectViews]> {
    let n = n.unwrap_or(data.subjects.len());
    if n == 0 || n > data.subjects.len() {
        return Err(CliError::Usage(format!("requested {n} subjects, dataset has {}", data.subjects.len())));
    }
    Ok(&data.subjects[..n])
}

fn log_file(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| io_error(path, e))?))
}

fn stage1(mut cfg: RunConfig, root: &Path, out: &Path, iterations: Option<usize>, subjects: Option<usize>) -> CliResult<()> {
    if let Some(n) = iterations {
        cfg.stage1.iterations = n;
    }
    let data = load_dataset(&cfg, root)?;
    let mut net = PointMapNet::new(cfg.net.clone(), cfg.seed)?;
    let samples = first_subjects(&data, subjects)?
        .iter()
        .map(|s| stage1_sample(&net, s))
        .collect::<duosplat_core::Result<Vec<_>>>()?;
    let log_path = out.join("stage1.log.jsonl");
    let mut log = log_file(&log_path)?;
    let history = train_stage1(&mut net, &samples, &cfg.stage1, Some(&mut log))?;
    log.flush().map_err(|e| io_error(&log_path, e))?;
    let last = history.last().expect("at least one iteration");
    log::info!("stage 1 done: loss {:.5}, delta {:.4}, {:.1}s", last.loss, net.delta(), last.elapsed_s);
    let path = out.join(STAGE1_CKPT);
    Checkpoint {
        pointmap: net,
        regressor: None,
        history,
    }
    .save(&path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn stage2(mut cfg: RunConfig, root: &Path, out: &Path, stage1: &Path, iterations: Option<usize>, subjects: Option<usize>) -> CliResult<()> {
    if let Some(n) = iterations {
        cfg.stage2.iterations = n;
    }
    let ck = Checkpoint::load_for(stage1, &cfg.net)?;
    let data = load_dataset(&cfg, root)?;
    let mut rec = Reconstructor {
        pointmap: ck.pointmap,
        gaussian: GaussianNet::new(cfg.unet.clone(), cfg.seed)?,
        activation: cfg.activation.clone(),
        options: cfg.pipeline,
    };
    let samples = first_subjects(&data, subjects)?
        .iter()
        .map(|s| stage2_sample(&rec, s))
        .collect::<duosplat_core::Result<Vec<_>>>()?;
    let log_path = out.join("stage2.log.jsonl");
    let mut log = log_file(&log_path)?;
    let history = train_stage2(&mut rec.gaussian, &samples, &cfg.stage2, data.config.rig.background, Some(&mut log))?;
    log.flush().map_err(|e| io_error(&log_path, e))?;
    let last = history.last().expect("at least one iteration");
    log::info!("stage 2 done: loss {:.5}, {:.1}s", last.loss, last.elapsed_s);
    let path = out.join(MODEL_CKPT);
    let mut all = ck.history;
    all.extend(history);
    Checkpoint {
        pointmap: rec.pointmap,
        regressor: Some((rec.gaussian, rec.activation)),
        history: all,
    }
    .save(&path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn reconstructor(cfg: &RunConfig, path: &Path) -> CliResult<Reconstructor> {
    let ck = Checkpoint::load_for(path, &cfg.net)?;
    let Some((gaussian, activation)) = ck.regressor else {
        return Err(CoreError::Format {
            path: path.to_path_buf(),
            reason: "checkpoint holds no Gaussian regressor; run train-stage2 first".into(),
        }
        .into());
    };
    Ok(Reconstructor {
        pointmap: ck.pointmap,
        gaussian,
        activation,
        options: cfg.pipeline,
    })
}

/// Colors valid points by their position normalized over the map's bounding box.
fn pointmap_image(map: &PointMap) -> RgbImage {
    let pts = map.valid_points();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in &pts {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    Grid::from_fn(map.width(), map.height(), |r, c| {
        if !*map.valid.get(r, c) {
            return [0.0; 3];
        }
        let p = map.points.get(r, c);
        std::array::from_fn(|k| if hi[k] > lo[k] { (p[k] - lo[k]) / (hi[k] - lo[k]) } else { 0.5 })
    })
}

/// Input or pseudo-view color of every fused point.
fn cloud_colors(prior: &Prior) -> Vec<Rgb> {
    let sources = &prior.cloud.sources;
    sources.iter().map(|s| *prior.images[s.view.index()].get(s.row as usize, s.col as usize)).collect()
}

fn infer(rec: &Reconstructor, out: &Path, [front, front_mask, back, back_mask]: [&PathBuf; 4]) -> CliResult<()> {
    let f = read_rgb_png(front)?;
    let fm = read_mask_png(front_mask)?;
    let b = read_rgb_png(back)?;
    let bm = read_mask_png(back_mask)?;
    let r = rec.reconstruct(&f, &fm, &b, &bm)?;
    let ply = out.join("gaussians.ply");
    write_gaussian_ply(&ply, &r.gaussians)?;
    write_point_cloud_ply(&out.join("points.ply"), &r.prior.cloud.positions, Some(&cloud_colors(&r.prior)))?;
    let debug = out.join("debug");
    create_dir(&debug)?;
    for v in CanonicalView::ALL {
        let i = v.index();
        write_rgb_png(&debug.join(format!("{}.input.png", v.name())), &r.prior.images[i])?;
        write_rgb_png(&debug.join(format!("{}.pointmap.png", v.name())), &pointmap_image(&r.prior.maps[i]))?;
    }
    let counts: Vec<usize> = r.prior.maps.iter().map(PointMap::valid_count).collect();
    log::info!("valid pixels front/back/left/right {counts:?}");
    println!("{} gaussians -> {}", r.gaussians.len(), ply.display());
    Ok(())
}

fn render_ply(cfg: &RunConfig, out: &Path, ply: &Path, cameras: &[PathBuf], azimuths: &[f64]) -> CliResult<()> {
    if cameras.is_empty() && azimuths.is_empty() {
        return Err(CliError::Usage("render needs at least one --camera or --azimuth".into()));
    }
    let set = read_gaussian_ply(ply)?;
    let mut views: Vec<(String, CameraModel)> = Vec::new();
    for path in cameras {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let cam: CameraModel = serde_json::from_str(&text).map_err(|e| CoreError::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        cam.validate()?;
        let stem = path.file_stem().map_or("camera".into(), |s| s.to_string_lossy().into_owned());
        views.push((stem, cam));
    }
    let front = cfg.data.rig.camera_at(0.0);
    for &a in azimuths {
        views.push((format!("azimuth_{a:07.3}"), cfg.data.rig.camera_at(a).relative_to(&front)));
    }
    for (name, cam) in views {
        let img = render(&set, &cam, cfg.data.rig.background)?.image;
        let path = out.join(format!("{name}.png"));
        write_rgb_png(&path, &img)?;
        println!("{}", path.display());
    }
    Ok(())
}

fn export(rec: &Reconstructor, data: &Dataset, out: &Path, subject: Option<&str>, kind: ExportKind) -> CliResult<()> {
    let s = match subject {
        Some(id) => data
            .subjects
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| CliError::Usage(format!("no subject {id} in the dataset")))?,
        None => &data.subjects[0],
    };
    let f = s.canonical(CanonicalView::Front);
    let b = s.canonical(CanonicalView::Back);
    let path = match kind {
        ExportKind::Gaussians => {
            let r = rec.reconstruct(&f.image, &f.mask, &b.image, &b.mask)?;
            let path = out.join(format!("{}.ply", s.id));
            write_gaussian_ply(&path, &r.gaussians)?;
            path
        }
        ExportKind::Points => {
            let prior = rec.prior(&f.image, &f.mask, &b.image, &b.mask)?;
            let path = out.join(format!("{}.points.ply", s.id));
            write_point_cloud_ply(&path, &prior.cloud.positions, Some(&cloud_colors(&prior)))?;
            path
        }
    };
    println!("{}", path.display());
    Ok(())
}
