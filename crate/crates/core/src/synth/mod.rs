//! Procedural subjects, analytic rendering and dataset I/O.

mod dataset;
mod render;
pub mod scene;

pub use dataset::{make_dataset, novel_azimuths, subject_id, Dataset, DatasetConfig, Manifest, ManifestEntry, SubjectViews, MANIFEST_FILE};
pub use render::{render_view, RigConfig, ViewBundle, ViewTag};
pub use scene::{make_subject, SubjectConfig, SubjectScene};
