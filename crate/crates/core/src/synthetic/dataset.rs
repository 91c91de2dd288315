//! Dataset generation, manifests and the training/evaluation data views.
//!
//! Layout on disk: `<root>/<split>/images/NNNNNN.png` plus
//! `<root>/<split>/manifest.json`. Every record carries its AU bits, but
//! target-domain labels only leave the manifest through
//! [`LabeledSplit::for_evaluation`]; training code receives an
//! [`UnlabeledSplit`] that never holds them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthetic::render::{splitmix64, Renderer};
use crate::synthetic::types::{
    AuLabels, Domain, DomainStyleSpec, FaceGeometry, FaceImage, IdentitySpec, StyleDistribution,
    ToyFaceSample, AU_NAMES, MAX_AUS, MIN_AUS,
};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const GENERATOR_VERSION: &str = "toyface-1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// What to generate for one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Directory name under the dataset root, e.g. `source` or `target_eval`.
    pub name: String,
    pub domain: Domain,
    pub subjects: usize,
    pub frames_per_subject: usize,
    /// Positive rate per AU; its length fixes `K`.
    pub au_marginals: Vec<f64>,
    /// Identity ids are `identity_offset..identity_offset + subjects`.
    pub identity_offset: u32,
    pub height: usize,
    pub width: usize,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::invalid("name", format!("`{}` is not a plain directory name", self.name)));
        }
        if self.subjects == 0 {
            return Err(Error::invalid("subjects", "must be positive"));
        }
        if self.frames_per_subject == 0 {
            return Err(Error::invalid("frames_per_subject", "must be positive"));
        }
        let k = self.au_marginals.len();
        if !(MIN_AUS..=MAX_AUS).contains(&k) {
            return Err(Error::invalid(
                "num_aus",
                format!("{k} outside [{MIN_AUS}, {MAX_AUS}]"),
            ));
        }
        if let Some(p) = self.au_marginals.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid("au_marginals", format!("{p} is not a probability")));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid("image_size", "must be at least 8"));
        }
        Ok(())
    }

    pub fn num_aus(&self) -> usize {
        self.au_marginals.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub file: String,
    pub au: AuLabels,
    pub identity_id: u32,
    pub frame_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityEntry {
    pub identity: IdentitySpec,
    pub style: DomainStyleSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub generator_version: String,
    pub split: String,
    pub domain: Domain,
    pub master_seed: u64,
    pub num_aus: usize,
    pub height: usize,
    pub width: usize,
    pub au_names: Vec<String>,
    pub identities: Vec<IdentityEntry>,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn load(split_dir: &Path) -> Result<Self> {
        let path = split_dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Manifest {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Manifest {
                path,
                reason: format!("unsupported schema version {}", manifest.schema_version),
            });
        }
        Ok(manifest)
    }

    pub fn identity(&self, id: u32) -> Option<&IdentityEntry> {
        self.identities.iter().find(|e| e.identity.identity_id == id)
    }

    /// Rebuilds the full sample for record `index` by re-rendering it.
    pub fn sample(&self, index: usize) -> Result<ToyFaceSample> {
        let rec = self
            .records
            .get(index)
            .ok_or_else(|| Error::invalid("index", format!("{index} out of range")))?;
        let entry = self.identity(rec.identity_id).ok_or_else(|| Error::Manifest {
            path: PathBuf::from(&self.split),
            reason: format!("no oracle parameters for identity {}", rec.identity_id),
        })?;
        let image = Renderer::new(self.height, self.width).render(
            &rec.au,
            &entry.identity,
            &entry.style,
            rec.frame_seed,
        )?;
        Ok(ToyFaceSample {
            image,
            au: rec.au.clone(),
            identity: entry.identity.clone(),
            style: entry.style.clone(),
            frame_seed: rec.frame_seed,
        })
    }

    /// Checks that every listed image exists and matches a fresh render
    /// after 8-bit quantization.
    pub fn verify(&self, split_dir: &Path) -> Result<()> {
        for (i, rec) in self.records.iter().enumerate() {
            let stored = load_image(&split_dir.join(&rec.file))?;
            let fresh = self.sample(i)?.image.quantized();
            if stored != fresh {
                return Err(Error::Manifest {
                    path: split_dir.join(&rec.file),
                    reason: "image does not match its render parameters".into(),
                });
            }
        }
        Ok(())
    }
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Seed for one stream of one split; independent of generation order.
fn stream_seed(master_seed: u64, split: &str, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master_seed ^ fnv1a(split)) ^ splitmix64(stream << 48 ^ index))
}

const STREAM_IDENTITY: u64 = 1;
const STREAM_FRAME: u64 = 2;

pub fn sample_identity(identity_id: u32, rng: &mut impl Rng) -> IdentitySpec {
    let mut draw = |r: crate::synthetic::types::Range| r.lerp(rng.gen::<f32>());
    IdentitySpec {
        identity_id,
        geometry: FaceGeometry {
            face_width: draw(FaceGeometry::FACE_WIDTH),
            face_height: draw(FaceGeometry::FACE_HEIGHT),
            eye_spacing: draw(FaceGeometry::EYE_SPACING),
            brow_height: draw(FaceGeometry::BROW_HEIGHT),
            mouth_width: draw(FaceGeometry::MOUTH_WIDTH),
            skin: FaceGeometry::SKIN.map(&mut draw),
        },
    }
}

pub fn sample_style(domain: Domain, rng: &mut impl Rng) -> DomainStyleSpec {
    let d = StyleDistribution::for_domain(domain);
    DomainStyleSpec {
        domain,
        background_hue: d.background_hue.lerp(rng.gen()),
        brightness: d.brightness.lerp(rng.gen()),
        contrast: d.contrast.lerp(rng.gen()),
        tint: d.tint.lerp(rng.gen()),
        texture: d.textures[rng.gen_range(0..d.textures.len())],
        texture_strength: d.texture_strength.lerp(rng.gen()),
    }
}

/// Builds the manifest (identities and records) without touching disk.
pub fn plan_split(spec: &SplitSpec, master_seed: u64) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut identities = Vec::with_capacity(spec.subjects);
    for s in 0..spec.subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
            master_seed,
            &spec.name,
            STREAM_IDENTITY,
            s as u64,
        ));
        let id = spec.identity_offset + s as u32;
        identities.push(IdentityEntry {
            identity: sample_identity(id, &mut rng),
            style: sample_style(spec.domain, &mut rng),
        });
    }
    let mut records = Vec::with_capacity(spec.subjects * spec.frames_per_subject);
    for s in 0..spec.subjects {
        for _ in 0..spec.frames_per_subject {
            let index = records.len();
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                master_seed,
                &spec.name,
                STREAM_FRAME,
                index as u64,
            ));
            let bits = spec
                .au_marginals
                .iter()
                .map(|&p| rng.gen_bool(p) as u8)
                .collect();
            records.push(ManifestRecord {
                file: format!("images/{index:06}.png"),
                au: AuLabels::new(bits)?,
                identity_id: identities[s].identity.identity_id,
                frame_seed: rng.gen(),
            });
        }
    }
    Ok(DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        generator_version: GENERATOR_VERSION.to_string(),
        split: spec.name.clone(),
        domain: spec.domain,
        master_seed,
        num_aus: spec.num_aus(),
        height: spec.height,
        width: spec.width,
        au_names: AU_NAMES[..spec.num_aus()]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        identities,
        records,
    })
}

/// Renders and writes one split under `root/<spec.name>/`.
pub fn generate_domain_dataset(
    spec: &SplitSpec,
    master_seed: u64,
    root: &Path,
) -> Result<DatasetManifest> {
    let manifest = plan_split(spec, master_seed)?;
    let dir = root.join(&spec.name);
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for i in 0..manifest.records.len() {
        let sample = manifest.sample(i)?;
        let path = dir.join(&manifest.records[i].file);
        sample
            .image
            .to_rgb8()
            .save_with_format(&path, image::ImageFormat::Png)?;
    }
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_image(path: &Path) -> Result<FaceImage> {
    let img = image::open(path)?.to_rgb8();
    Ok(FaceImage::from_rgb8(&img))
}

/// Image stack in channel-first layout, `n x 3 x H x W`, values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ImageStack {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageStack {
    pub fn len(&self) -> usize {
        self.data.len() / (3 * self.height * self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn image_chw(&self, i: usize) -> &[f32] {
        let n = 3 * self.height * self.width;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> FaceImage {
        FaceImage::from_chw(self.height, self.width, self.image_chw(i))
            .expect("stack images are well-formed")
    }

    fn from_files(split_dir: &Path, manifest: &DatasetManifest) -> Result<Self> {
        let mut data = Vec::with_capacity(manifest.records.len() * 3 * manifest.height * manifest.width);
        for rec in &manifest.records {
            let img = load_image(&split_dir.join(&rec.file))?;
            if img.height() != manifest.height || img.width() != manifest.width {
                return Err(Error::Manifest {
                    path: split_dir.join(&rec.file),
                    reason: format!(
                        "image is {}x{}, manifest says {}x{}",
                        img.height(),
                        img.width(),
                        manifest.height,
                        manifest.width
                    ),
                });
            }
            data.extend(img.to_chw());
        }
        Ok(Self {
            height: manifest.height,
            width: manifest.width,
            data,
        })
    }
}

/// A split with labels: source training data, or any split opened for
/// evaluation.
#[derive(Clone, Debug)]
pub struct LabeledSplit {
    pub domain: Domain,
    pub num_aus: usize,
    pub images: ImageStack,
    pub labels: Vec<AuLabels>,
    pub identity_ids: Vec<u32>,
}

impl LabeledSplit {
    /// Opens a source-domain split for training. Target splits are refused.
    pub fn source_for_training(split_dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(split_dir)?;
        if manifest.domain != Domain::Source {
            return Err(Error::Manifest {
                path: split_dir.to_path_buf(),
                reason: "labeled training data must come from the source domain".into(),
            });
        }
        Self::from_manifest(split_dir, &manifest)
    }

    /// Opens any split including its AU labels. Only evaluation code calls
    /// this on target splits.
    pub fn for_evaluation(split_dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(split_dir)?;
        Self::from_manifest(split_dir, &manifest)
    }

    fn from_manifest(split_dir: &Path, manifest: &DatasetManifest) -> Result<Self> {
        Ok(Self {
            domain: manifest.domain,
            num_aus: manifest.num_aus,
            images: ImageStack::from_files(split_dir, manifest)?,
            labels: manifest.records.iter().map(|r| r.au.clone()).collect(),
            identity_ids: manifest.records.iter().map(|r| r.identity_id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Target-domain training view: images and identities, no AU labels.
#[derive(Clone, Debug)]
pub struct UnlabeledSplit {
    pub domain: Domain,
    pub images: ImageStack,
    pub identity_ids: Vec<u32>,
}

impl UnlabeledSplit {
    pub fn open(split_dir: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(split_dir)?;
        Ok(Self {
            domain: manifest.domain,
            images: ImageStack::from_files(split_dir, &manifest)?,
            identity_ids: manifest.records.iter().map(|r| r.identity_id).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.identity_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.identity_ids.is_empty()
    }
}

/// Identity ids with their record indices, in ascending id order.
pub fn group_by_identity(ids: &[u32]) -> BTreeMap<u32, Vec<usize>> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        groups.entry(id).or_default().push(i);
    }
    groups
}

pub fn unique_identities(manifest: &DatasetManifest) -> BTreeSet<u32> {
    manifest.records.iter().map(|r| r.identity_id).collect()
}
