//! On-disk and in-memory synthetic datasets.
//!
//! Layout under the dataset root:
//!
//! ```text
//! manifest.json
//! subject_0000/front.png          8-bit RGB
//! subject_0000/front.mask.png     1-bit foreground mask
//! subject_0000/front.depth.f32    "DF32", H u16, W u16, H·W little-endian f32
//! subject_0000/front.cam.json     CameraModel as JSON
//! subject_0000/novel_045.000.*    held-out views, same four files
//! ```
//!
//! `manifest.json` holds the generator settings and one entry per bundle with
//! its subject seed, view tag, azimuth, relative file paths and inline camera.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{make_subject, render_view, RigConfig, SubjectConfig, ViewBundle, ViewTag};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, CanonicalView};
use crate::image::{read_depth, read_mask_png, read_rgb_png, write_depth, write_mask_png, write_rgb_png};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_subjects: usize,
    /// Held-out views per subject, spread evenly between the canonical azimuths.
    pub novel_views: usize,
    /// Subject `i` uses seed `base_seed + i`.
    pub base_seed: u64,
    pub subject: SubjectConfig,
    pub rig: RigConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            n_subjects: 10,
            novel_views: 4,
            base_seed: 0,
            subject: SubjectConfig::default(),
            rig: RigConfig::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 {
            return Err(Error::InvalidConfig("dataset needs at least one subject".into()));
        }
        self.subject.validate()?;
        self.rig.validate()
    }

    /// Azimuths `360·(k + 0.5)/n`, which never coincide with a canonical view when n ≤ 4.
    pub fn novel_azimuths(&self) -> Vec<f64> {
        novel_azimuths(self.novel_views)
    }

    fn tags(&self) -> Vec<ViewTag> {
        CanonicalView::ALL
            .into_iter()
            .map(ViewTag::Canonical)
            .chain(self.novel_azimuths().into_iter().map(|a| ViewTag::Novel { azimuth_deg: a }))
            .collect()
    }
}

pub fn novel_azimuths(n: usize) -> Vec<f64> {
    (0..n).map(|k| 360.0 * (k as f64 + 0.5) / n as f64).collect()
}

pub fn subject_id(index: usize) -> String {
    format!("subject_{index:04}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject: String,
    pub seed: u64,
    pub view: ViewTag,
    pub azimuth_deg: f64,
    /// Paths relative to the dataset root.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub depth: PathBuf,
    pub camera_file: PathBuf,
    pub camera: CameraModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: DatasetConfig,
    pub bundles: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(root: &Path) -> Result<Manifest> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format(&path, format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }
}

/// All rendered views of one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectViews {
    pub id: String,
    pub seed: u64,
    /// Front, back, left, right, then the novel views.
    pub bundles: Vec<ViewBundle>,
}

impl SubjectViews {
    pub fn canonical(&self, view: CanonicalView) -> &ViewBundle {
        self.bundles
            .iter()
            .find(|b| b.view_tag == ViewTag::Canonical(view))
            .expect("subject is missing a canonical view")
    }

    pub fn novel(&self) -> impl Iterator<Item = &ViewBundle> {
        self.bundles.iter().filter(|b| matches!(b.view_tag, ViewTag::Novel { .. }))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub subjects: Vec<SubjectViews>,
}

impl Dataset {
    /// Renders every subject without touching the filesystem.
    pub fn generate(config: &DatasetConfig) -> Result<Dataset> {
        config.validate()?;
        let tags = config.tags();
        let mut subjects = Vec::with_capacity(config.n_subjects);
        for i in 0..config.n_subjects {
            let seed = config.base_seed + i as u64;
            let scene = make_subject(seed, &config.subject)?;
            let bundles = tags
                .iter()
                .map(|&tag| render_view(&scene, &config.rig.camera_at(tag.azimuth_deg()), config.rig.background, config.rig.supersample, tag))
                .collect::<Result<Vec<_>>>()?;
            subjects.push(SubjectViews {
                id: subject_id(i),
                seed,
                bundles,
            });
        }
        Ok(Dataset {
            config: config.clone(),
            subjects,
        })
    }

    /// Reads a dataset written by [`make_dataset`]. Depth comes back quantized to f32.
    pub fn load(root: &Path) -> Result<Dataset> {
        let manifest = Manifest::load(root)?;
        let mut subjects: Vec<SubjectViews> = Vec::new();
        for e in &manifest.bundles {
            let bundle = load_bundle(root, e)?;
            match subjects.last_mut() {
                Some(s) if s.id == e.subject => s.bundles.push(bundle),
                _ => subjects.push(SubjectViews {
                    id: e.subject.clone(),
                    seed: e.seed,
                    bundles: vec![bundle],
                }),
            }
        }
        for s in &subjects {
            for v in CanonicalView::ALL {
                if !s.bundles.iter().any(|b| b.view_tag == ViewTag::Canonical(v)) {
                    let path = root.join(MANIFEST_FILE);
                    return Err(Error::format(&path, format!("{} has no {} view", s.id, v.name())));
                }
            }
        }
        Ok(Dataset {
            config: manifest.config,
            subjects,
        })
    }
}

fn load_bundle(root: &Path, e: &ManifestEntry) -> Result<ViewBundle> {
    let image = read_rgb_png(&root.join(&e.image))?;
    let mask = read_mask_png(&root.join(&e.mask))?;
    let depth = read_depth(&root.join(&e.depth))?;
    let cam_path = root.join(&e.camera_file);
    let cam_text = fs::read_to_string(&cam_path).map_err(|err| Error::io(&cam_path, err))?;
    let camera: CameraModel = serde_json::from_str(&cam_text).map_err(|err| Error::format(&cam_path, err.to_string()))?;
    camera.validate().map_err(|err| Error::format(&cam_path, err.to_string()))?;
    let dims = (camera.width, camera.height);
    if image.dims() != dims || mask.dims() != dims || depth.dims() != dims {
        return Err(Error::format(root.join(&e.image), "view rasters disagree with the camera resolution"));
    }
    Ok(ViewBundle {
        image,
        mask,
        depth,
        camera,
        view_tag: e.view,
    })
}

/// Renders the dataset and writes it under `out_dir`, returning the manifest.
pub fn make_dataset(config: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    let data = Dataset::generate(config)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut bundles = Vec::new();
    for s in &data.subjects {
        let dir = out_dir.join(&s.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for b in &s.bundles {
            let stem = b.view_tag.file_stem();
            let rel = |ext: &str| PathBuf::from(&s.id).join(format!("{stem}.{ext}"));
            let entry = ManifestEntry {
                subject: s.id.clone(),
                seed: s.seed,
                view: b.view_tag,
                azimuth_deg: b.view_tag.azimuth_deg(),
                image: rel("png"),
                mask: rel("mask.png"),
                depth: rel("depth.f32"),
                camera_file: rel("cam.json"),
                camera: b.camera.clone(),
            };
            write_rgb_png(&out_dir.join(&entry.image), &b.image)?;
            write_mask_png(&out_dir.join(&entry.mask), &b.mask)?;
            write_depth(&out_dir.join(&entry.depth), &b.depth)?;
            let cam_path = out_dir.join(&entry.camera_file);
            let cam_json = serde_json::to_string_pretty(&b.camera).expect("camera serializes");
            fs::write(&cam_path, cam_json).map_err(|e| Error::io(&cam_path, e))?;
            bundles.push(entry);
        }
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        config: config.clone(),
        bundles,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project_points, unproject_depth};

    fn small() -> DatasetConfig {
        DatasetConfig {
            n_subjects: 2,
            novel_views: 4,
            base_seed: 7,
            rig: RigConfig {
                resolution: 32,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn counts_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_dataset(&small(), dir.path()).unwrap();
        assert_eq!(m.bundles.len(), 16);
        let reloaded = Manifest::load(dir.path()).unwrap();
        assert_eq!(reloaded, m);
        for e in &m.bundles {
            for p in [&e.image, &e.mask, &e.depth, &e.camera_file] {
                assert!(dir.path().join(p).is_file(), "{p:?}");
            }
        }
        assert!(dir.path().join("subject_0001/novel_045.000.png").is_file());
        let d = Dataset::load(dir.path()).unwrap();
        assert_eq!(d.subjects.len(), 2);
        assert_eq!(d.subjects[1].seed, 8);
        assert_eq!(d.subjects[0].novel().count(), 4);
    }

    #[test]
    fn regeneration_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let m = make_dataset(&small(), a.path()).unwrap();
        make_dataset(&small(), b.path()).unwrap();
        for e in &m.bundles {
            for p in [&e.image, &e.mask, &e.depth, &e.camera_file] {
                assert_eq!(fs::read(a.path().join(p)).unwrap(), fs::read(b.path().join(p)).unwrap());
            }
        }
        assert_eq!(fs::read(a.path().join(MANIFEST_FILE)).unwrap(), fs::read(b.path().join(MANIFEST_FILE)).unwrap());
    }

    #[test]
    fn stored_depth_reprojects_to_its_pixels() {
        let dir = tempfile::tempdir().unwrap();
        make_dataset(&small(), dir.path()).unwrap();
        let d = Dataset::load(dir.path()).unwrap();
        for s in &d.subjects {
            for b in &s.bundles {
                let pm = unproject_depth(&b.depth, &b.mask, &b.camera).unwrap();
                let px = pm.valid_pixels();
                let uv = project_points(&pm.valid_points(), &b.camera);
                for ((r, c), p) in px.iter().zip(&uv) {
                    assert!((p[0] - *c as f64).abs() < 1e-4 && (p[1] - *r as f64).abs() < 1e-4);
                    assert!((p[2] - *b.depth.get(*r, *c)).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn missing_files_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_dataset(&small(), dir.path()).unwrap();
        let victim = dir.path().join(&m.bundles[3].depth);
        fs::remove_file(&victim).unwrap();
        let err = Dataset::load(dir.path()).unwrap_err();
        assert!(err.to_string().contains("back.depth.f32") || err.to_string().contains("right.depth.f32"), "{err}");
    }

    #[test]
    fn novel_azimuths_avoid_canonical() {
        assert_eq!(novel_azimuths(4), vec![45.0, 135.0, 225.0, 315.0]);
        assert_eq!(ViewTag::Novel { azimuth_deg: 45.0 }.file_stem(), "novel_045.000");
    }
}
