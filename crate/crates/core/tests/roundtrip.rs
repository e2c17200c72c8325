use duosplat_core::eval::EvalViews;
use duosplat_core::geometry::CanonicalView;
use duosplat_core::ply::{read_gaussian_ply, write_gaussian_ply};
use duosplat_core::splat::render;
use duosplat_core::synth::{make_dataset, RigConfig};
use duosplat_core::{evaluate, Checkpoint, Dataset, DatasetConfig, GaussianNet, NetConfig, PointMapNet, Reconstructor, UNetConfig};

fn tiny_net() -> NetConfig {
    NetConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 16,
        heads: 2,
        mlp_ratio: 2,
        n_encoder_blocks: 1,
        n_decoder_blocks: 2,
        ..NetConfig::default()
    }
}

fn tiny_data() -> DatasetConfig {
    DatasetConfig {
        n_subjects: 2,
        novel_views: 2,
        rig: RigConfig {
            resolution: 16,
            ..RigConfig::default()
        },
        ..DatasetConfig::default()
    }
}

#[test]
fn stored_dataset_matches_generated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_data();
    let manifest = make_dataset(&cfg, dir.path()).unwrap();
    assert_eq!(manifest.bundles.len(), 2 * 6);
    let (generated, loaded) = (Dataset::generate(&cfg).unwrap(), Dataset::load(dir.path()).unwrap());
    assert_eq!(generated.subjects.len(), loaded.subjects.len());
    for (a, b) in generated.subjects.iter().zip(&loaded.subjects) {
        for v in CanonicalView::ALL {
            let (x, y) = (a.canonical(v), b.canonical(v));
            assert_eq!(x.mask.as_slice(), y.mask.as_slice());
            assert_eq!(x.camera, y.camera);
            // Colors pass through 8-bit PNG.
            let worst = x.image.as_slice().iter().zip(y.image.as_slice()).flat_map(|(p, q)| (0..3).map(move |k| (p[k] - q[k]).abs())).fold(0.0, f64::max);
            assert!(worst <= 0.5 / 255.0 + 1e-12, "{worst}");
        }
    }
}

#[test]
fn reconstruction_survives_checkpoint_and_ply() {
    let dir = tempfile::tempdir().unwrap();
    let data = Dataset::generate(&tiny_data()).unwrap();
    let rec = Reconstructor {
        pointmap: PointMapNet::new(tiny_net(), 1).unwrap(),
        gaussian: GaussianNet::new(UNetConfig { channels: 8, levels: 2, groups: 2 }, 2).unwrap(),
        activation: Default::default(),
        options: Default::default(),
    };
    let ckpt = dir.path().join("model.ckpt");
    Checkpoint {
        pointmap: rec.pointmap.clone(),
        regressor: Some((rec.gaussian.clone(), rec.activation.clone())),
        history: Vec::new(),
    }
    .save(&ckpt)
    .unwrap();
    let loaded = Checkpoint::load_for(&ckpt, &tiny_net()).unwrap();
    let (gaussian, activation) = loaded.regressor.unwrap();
    let reloaded = Reconstructor {
        pointmap: loaded.pointmap,
        gaussian,
        activation,
        options: Default::default(),
    };

    let s = &data.subjects[0];
    let (f, b) = (s.canonical(CanonicalView::Front), s.canonical(CanonicalView::Back));
    let a = rec.reconstruct(&f.image, &f.mask, &b.image, &b.mask).unwrap().gaussians;
    let r = reloaded.reconstruct(&f.image, &f.mask, &b.image, &b.mask).unwrap().gaussians;
    assert_eq!(a, r);

    let ply = dir.path().join("g.ply");
    write_gaussian_ply(&ply, &a).unwrap();
    let back = read_gaussian_ply(&ply).unwrap();
    let bg = data.config.rig.background;
    let (x, y) = (render(&a, &f.camera.relative_to(&f.camera), bg).unwrap(), render(&back, &f.camera.relative_to(&f.camera), bg).unwrap());
    let worst = x.image.as_slice().iter().zip(y.image.as_slice()).flat_map(|(p, q)| (0..3).map(move |k| (p[k] - q[k]).abs())).fold(0.0, f64::max);
    assert!(worst < 1e-5, "{worst}");

    let report = evaluate(&rec, &data.subjects, EvalViews::All, bg).unwrap();
    assert_eq!(report.rows.len(), 2 * 6);
    assert!(report.rows.iter().all(|row| row.psnr.is_finite() && row.ssim <= 1.0));
}
