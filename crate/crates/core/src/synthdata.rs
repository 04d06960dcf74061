//! Synthetic cross-modal tracklet corpus and its on-disk format.
//!
//! Each identity is a coloured silhouette (head, torso, legs) with a
//! swinging limb blob whose angular frequency is an identity trait. A
//! random per-tracklet phase offset means single frames carry no motion
//! identity. Confusable pairs share appearance and differ only in motion
//! frequency, and the IR channel collapse additionally merges identities
//! whose clothing differs mainly in hue.
//!
//! Tracklet file (`.vct`): `"VCT1"`, `u32` tracklet id, `u32` identity,
//! `u8` modality (0 RGB, 1 IR), `u8` camera, `u8` frame count, `u16` H,
//! `u16` W, then `frames × 3 × H × W` little-endian `f32` pixels.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Error, Result};
use crate::network::ModalClass;
use crate::scalar::Scalar;
use crate::seeding::{domain, stream_rng};
use crate::tensor::Tensor;

pub const TRACKLET_MAGIC: &[u8; 4] = b"VCT1";
pub const TRACKLET_FRAMES: usize = 24;
pub const NUM_CAMERAS: usize = 12;
/// Cameras `0..6` are visible-light, `6..12` infrared.
pub const RGB_CAMERAS: usize = 6;
pub const APPEARANCE_DIM: usize = 10;
pub const NOISE_SIGMA: f64 = 0.02;
/// Confusable partners differ by at most this much per appearance entry.
pub const APPEARANCE_EPS: f64 = 0.02;
/// Minimum motion-frequency gap inside a confusable pair.
pub const FREQ_GAP: f64 = 0.75;
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const IDENTITIES_FILE: &str = "identities.csv";
const TRAIN_SHARE: (usize, usize) = (500, 427);
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const SKIN: [f64; 3] = [0.85, 0.7, 0.6];

#[derive(Clone, Debug, PartialEq)]
pub struct IdentitySpec {
    pub id: usize,
    /// Upper-body RGB, lower-body RGB, limb RGB, then build (torso width share).
    pub appearance: [f64; APPEARANCE_DIM],
    /// Limb cycles per 24-frame tracklet.
    pub motion_freq: f64,
    pub motion_phase: f64,
    pub confusable_partner: Option<usize>,
}

impl IdentitySpec {
    fn colour(&self, part: usize) -> [f64; 3] {
        let a = &self.appearance;
        [a[3 * part], a[3 * part + 1], a[3 * part + 2]]
    }

    fn build(&self) -> f64 {
        self.appearance[9]
    }
}

/// Fixed intensity map `gain · x + offset` of camera `c`.
pub fn camera_response(camera: usize) -> (f64, f64) {
    let k = camera as f64;
    (0.9 + 0.2 * ((k * 0.37).sin() * 0.5 + 0.5), 0.05 * (k * 1.3).cos())
}

/// Limb angle at frame `t` (fractional frames allowed).
pub fn limb_angle(spec: &IdentitySpec, t: f64, phase_offset: f64) -> f64 {
    2.0 * PI * spec.motion_freq * t / TRACKLET_FRAMES as f64 + spec.motion_phase + phase_offset
}

/// Limb blob centre `(y, x)` in pixels.
pub fn limb_centre(angle: f64, height: usize, width: usize) -> (f64, f64) {
    let (h, w) = (height as f64, width as f64);
    (0.45 * h + 0.1 * h * angle.cos(), 0.5 * w + 0.35 * w * angle.sin())
}

/// Renders frame `t` of a tracklet as `[3 × H × W]` with values in `[0, 1]`.
pub fn render_frame<R: Rng + ?Sized>(
    spec: &IdentitySpec,
    t: usize,
    modality: ModalClass,
    camera: usize,
    phase_offset: f64,
    size: (usize, usize),
    noise: &mut R,
) -> Result<Tensor<f64>> {
    if t >= TRACKLET_FRAMES {
        return Err(invalid(format!("frame index {t} out of range")));
    }
    if modality == ModalClass::Neither {
        return Err(invalid("frames are rendered as RGB or IR"));
    }
    let (height, width) = size;
    let (h, w) = (height as f64, width as f64);
    let plane = height * width;
    let mut px = vec![0.0; 3 * plane];
    let cx = 0.5 * w;
    let torso_half = 0.5 * spec.build() * w;
    let (ly, lx) = limb_centre(limb_angle(spec, t as f64, phase_offset), height, width);
    let sigma2 = (0.08 * h).powi(2);
    for y in 0..height {
        for x in 0..width {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut colour = None;
            let head = ((fy - 0.14 * h) / (0.09 * h)).powi(2) + ((fx - cx) / (0.16 * w)).powi(2);
            if head <= 1.0 {
                colour = Some(SKIN);
            } else if fy >= 0.24 * h && fy < 0.58 * h && (fx - cx).abs() <= torso_half {
                colour = Some(spec.colour(0));
            } else if fy >= 0.58 * h && fy < 0.96 * h && (fx - cx).abs() <= 0.3 * w && (fx - cx).abs() >= 0.04 * w {
                colour = Some(spec.colour(1));
            }
            let mut rgb = colour.unwrap_or([0.0; 3]);
            let alpha = 0.9 * (-((fy - ly).powi(2) + (fx - lx).powi(2)) / (2.0 * sigma2)).exp();
            let limb = spec.colour(2);
            for c in 0..3 {
                rgb[c] = rgb[c] * (1.0 - alpha) + limb[c] * alpha;
            }
            if modality == ModalClass::Ir {
                let l = LUMA.iter().zip(&rgb).map(|(k, v)| k * v).sum::<f64>();
                rgb = [l; 3];
            }
            for c in 0..3 {
                px[c * plane + y * width + x] = rgb[c];
            }
        }
    }
    let (gain, offset) = camera_response(camera);
    let normal = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    // IR is a single sensor channel replicated three times.
    let channels = if modality == ModalClass::Ir { 1 } else { 3 };
    for c in 0..channels {
        for k in c * plane..(c + 1) * plane {
            px[k] = (gain * px[k] + offset + normal.sample(noise)).clamp(0.0, 1.0);
        }
    }
    if channels == 1 {
        px.copy_within(0..plane, plane);
        px.copy_within(0..plane, 2 * plane);
    }
    Tensor::new(vec![3, height, width], px)
}

/// One stored tracklet; pixels are `[frames × 3 × H × W]` in `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tracklet {
    pub tracklet_id: u32,
    pub identity: u32,
    pub modality: ModalClass,
    pub camera: u8,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub pixels: Vec<f32>,
}

impl Tracklet {
    pub fn frame_len(&self) -> usize {
        3 * self.height * self.width
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.pixels[t * n..(t + 1) * n]
    }

    /// Selected frames as `[n × 3 × H × W]`.
    pub fn select<S: Scalar>(&self, indices: &[usize]) -> Result<Tensor<S>> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.frames) {
            return Err(invalid(format!("frame {bad} out of range for {} frames", self.frames)));
        }
        let mut data = Vec::with_capacity(indices.len() * self.frame_len());
        for &i in indices {
            data.extend(self.frame(i).iter().map(|&v| S::lit(v as f64)));
        }
        Tensor::new(vec![indices.len(), 3, self.height, self.width], data)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let modality = match self.modality {
            ModalClass::Rgb => 0u8,
            ModalClass::Ir => 1,
            ModalClass::Neither => return Err(invalid("tracklets are RGB or IR")),
        };
        let frames = u8::try_from(self.frames).map_err(|_| Error::Format("too many frames".into()))?;
        let h = u16::try_from(self.height).map_err(|_| Error::Format("height exceeds u16".into()))?;
        let wd = u16::try_from(self.width).map_err(|_| Error::Format("width exceeds u16".into()))?;
        if self.pixels.len() != self.frames * self.frame_len() {
            return Err(Error::Format("pixel count does not match header".into()));
        }
        w.write_all(TRACKLET_MAGIC)?;
        w.write_all(&self.tracklet_id.to_le_bytes())?;
        w.write_all(&self.identity.to_le_bytes())?;
        w.write_all(&[modality, self.camera, frames])?;
        w.write_all(&h.to_le_bytes())?;
        w.write_all(&wd.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.pixels.len() * 4);
        for v in &self.pixels {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut head = [0u8; 4 + 4 + 4 + 3 + 2 + 2];
        r.read_exact(&mut head)?;
        if &head[..4] != TRACKLET_MAGIC {
            return Err(Error::Format(format!("bad tracklet magic {:?}", &head[..4])));
        }
        let u32_at = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap());
        let u16_at = |i: usize| u16::from_le_bytes(head[i..i + 2].try_into().unwrap()) as usize;
        let modality = match head[12] {
            0 => ModalClass::Rgb,
            1 => ModalClass::Ir,
            m => return Err(Error::Format(format!("bad tracklet modality {m}"))),
        };
        let (frames, height, width) = (head[14] as usize, u16_at(15), u16_at(17));
        if frames == 0 || height == 0 || width == 0 {
            return Err(Error::Format("empty tracklet".into()));
        }
        let mut bytes = vec![0u8; frames * 3 * height * width * 4];
        r.read_exact(&mut bytes)?;
        let pixels = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            tracklet_id: u32_at(4),
            identity: u32_at(8),
            modality,
            camera: head[13],
            height,
            width,
            frames,
            pixels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub tracklet_id: u32,
    pub identity: u32,
    pub modality: ModalClass,
    pub camera: u8,
    pub frames: usize,
    /// Relative to the corpus directory.
    pub path: PathBuf,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub const HEADER: [&'static str; 7] = ["tracklet_id", "identity", "modality", "camera", "frames", "path", "split"];

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
        w.write_record(Self::HEADER).map_err(csv_error)?;
        for r in &self.records {
            w.write_record([
                r.tracklet_id.to_string(),
                r.identity.to_string(),
                (r.modality.index()).to_string(),
                r.camera.to_string(),
                r.frames.to_string(),
                r.path.to_string_lossy().into_owned(),
                r.split.name().to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path).map_err(csv_error)?;
        let header = rd.headers().map_err(csv_error)?.clone();
        if header.iter().ne(Self::HEADER) {
            return Err(Error::Format(format!("unexpected manifest header {header:?}")));
        }
        let mut records = Vec::new();
        for row in rd.records() {
            let row = row.map_err(csv_error)?;
            let field = |i: usize| row.get(i).unwrap_or_default();
            let num = |i: usize| -> Result<u64> {
                field(i)
                    .parse()
                    .map_err(|_| Error::Format(format!("bad manifest field {:?} in {row:?}", field(i))))
            };
            let modality = match num(2)? {
                0 => ModalClass::Rgb,
                1 => ModalClass::Ir,
                m => return Err(Error::Format(format!("bad modality {m}"))),
            };
            let split = match field(6) {
                "train" => Split::Train,
                "test" => Split::Test,
                s => return Err(Error::Format(format!("bad split {s:?}"))),
            };
            records.push(ManifestRecord {
                tracklet_id: num(0)? as u32,
                identity: num(1)? as u32,
                modality,
                camera: num(3)? as u8,
                frames: num(4)? as usize,
                path: PathBuf::from(field(5)),
                split,
            });
        }
        let m = Self { records };
        m.check_disjoint()?;
        Ok(m)
    }

    /// Train and test identity sets must not overlap.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut split_of = HashMap::new();
        for r in &self.records {
            if let Some(prev) = split_of.insert(r.identity, r.split) {
                if prev != r.split {
                    return Err(Error::Format(format!("identity {} appears in both splits", r.identity)));
                }
            }
        }
        Ok(())
    }

    pub fn identities(&self, split: Split) -> Vec<u32> {
        let mut ids: Vec<u32> = self.records.iter().filter(|r| r.split == split).map(|r| r.identity).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_ids: usize,
    pub tracklets_per_id_per_modality: usize,
    pub confusable_fraction: f64,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_ids: 20,
            tracklets_per_id_per_modality: 4,
            confusable_fraction: 0.5,
            height: 32,
            width: 16,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_ids < 4 {
            return Err(Error::Config(format!("need at least 4 identities, got {}", self.num_ids)));
        }
        if !(0.0..=1.0).contains(&self.confusable_fraction) {
            return Err(Error::Config("confusable_fraction must lie in [0, 1]".into()));
        }
        if self.tracklets_per_id_per_modality == 0 || self.height < 8 || self.width < 8 {
            return Err(Error::Config("tracklet count and frame size must be positive (frames at least 8×8)".into()));
        }
        Ok(())
    }

    pub fn num_pairs(&self) -> usize {
        ((self.confusable_fraction * self.num_ids as f64 / 2.0).round() as usize).min(self.num_ids / 2)
    }
}

/// Identity specs: identities `0..2k` form the `k` confusable pairs `(2i, 2i+1)`.
pub fn identity_specs(cfg: &SynthConfig) -> Vec<IdentitySpec> {
    let mut rng = stream_rng(cfg.seed, domain::IDENTITIES, 0);
    let pairs = cfg.num_pairs();
    let mut out = Vec::with_capacity(cfg.num_ids);
    let appearance = |rng: &mut rand_chacha::ChaCha8Rng| {
        let mut a = [0.0; APPEARANCE_DIM];
        for v in a.iter_mut().take(9) {
            *v = rng.random_range(0.1..0.95);
        }
        a[9] = rng.random_range(0.35..0.6);
        a
    };
    for p in 0..pairs {
        let base = appearance(&mut rng);
        let mut twin = base;
        for v in &mut twin {
            *v += rng.random_range(-0.5 * APPEARANCE_EPS..0.5 * APPEARANCE_EPS);
        }
        let fa = rng.random_range(0.5..1.25);
        let fb = rng.random_range(fa + FREQ_GAP..=2.0);
        for (k, (a, f)) in [(base, fa), (twin, fb)].into_iter().enumerate() {
            out.push(IdentitySpec {
                id: 2 * p + k,
                appearance: a,
                motion_freq: f,
                motion_phase: rng.random_range(0.0..2.0 * PI),
                confusable_partner: Some(2 * p + 1 - k),
            });
        }
    }
    for id in 2 * pairs..cfg.num_ids {
        out.push(IdentitySpec {
            id,
            appearance: appearance(&mut rng),
            motion_freq: rng.random_range(0.5..2.0),
            motion_phase: rng.random_range(0.0..2.0 * PI),
            confusable_partner: None,
        });
    }
    out
}

/// Identity-disjoint split in the 500:427 ratio; pairs stay together.
pub fn split_identities(cfg: &SynthConfig, specs: &[IdentitySpec]) -> Vec<Split> {
    let mut rng = stream_rng(cfg.seed, domain::IDENTITIES, 1);
    let mut units: Vec<Vec<usize>> = Vec::new();
    for s in specs {
        match s.confusable_partner {
            Some(p) if p < s.id => {}
            Some(p) => units.push(vec![s.id, p]),
            None => units.push(vec![s.id]),
        }
    }
    units.shuffle(&mut rng);
    let total = specs.len();
    let target = ((total * TRAIN_SHARE.0) as f64 / (TRAIN_SHARE.0 + TRAIN_SHARE.1) as f64).round() as usize;
    let target = target.clamp(2, total - 2);
    let mut split = vec![Split::Test; total];
    let mut train = 0;
    for unit in &units {
        if train + unit.len() <= target {
            for &id in unit {
                split[id] = Split::Train;
            }
            train += unit.len();
        }
    }
    split
}

/// Two RGB and two IR cameras per identity, drawn without replacement.
fn assign_cameras(cfg: &SynthConfig, id: usize) -> ([u8; 2], [u8; 2]) {
    let mut rng = stream_rng(cfg.seed, domain::IDENTITIES, 1000 + id as u64);
    let mut rgb: Vec<u8> = (0..RGB_CAMERAS as u8).collect();
    let mut ir: Vec<u8> = (RGB_CAMERAS as u8..NUM_CAMERAS as u8).collect();
    rgb.shuffle(&mut rng);
    ir.shuffle(&mut rng);
    ([rgb[0], rgb[1]], [ir[0], ir[1]])
}

pub fn render_tracklet(
    cfg: &SynthConfig,
    spec: &IdentitySpec,
    tracklet_id: u32,
    modality: ModalClass,
    camera: u8,
) -> Result<Tracklet> {
    let mut rng = stream_rng(cfg.seed, domain::TRACKLET, tracklet_id as u64);
    let phase_offset = rng.random_range(0.0..2.0 * PI);
    let mut pixels = Vec::with_capacity(TRACKLET_FRAMES * 3 * cfg.height * cfg.width);
    for t in 0..TRACKLET_FRAMES {
        let f = render_frame(spec, t, modality, camera as usize, phase_offset, (cfg.height, cfg.width), &mut rng)?;
        pixels.extend(f.data().iter().map(|&v| v as f32));
    }
    Ok(Tracklet {
        tracklet_id,
        identity: spec.id as u32,
        modality,
        camera,
        height: cfg.height,
        width: cfg.width,
        frames: TRACKLET_FRAMES,
        pixels,
    })
}

/// Writes `tracklets/*.vct`, `manifest.csv` and `identities.csv` under `out`.
pub fn generate_corpus(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out.join("tracklets"))?;
    let specs = identity_specs(cfg);
    let split = split_identities(cfg, &specs);
    let mut records = Vec::new();
    let mut next_id = 0u32;
    for spec in &specs {
        let (rgb, ir) = assign_cameras(cfg, spec.id);
        for (modality, cams) in [(ModalClass::Rgb, rgb), (ModalClass::Ir, ir)] {
            for k in 0..cfg.tracklets_per_id_per_modality {
                let camera = cams[k % 2];
                let t = render_tracklet(cfg, spec, next_id, modality, camera)?;
                let rel = PathBuf::from("tracklets").join(format!("{next_id:05}.vct"));
                t.save(&out.join(&rel))?;
                records.push(ManifestRecord {
                    tracklet_id: next_id,
                    identity: spec.id as u32,
                    modality,
                    camera,
                    frames: TRACKLET_FRAMES,
                    path: rel,
                    split: split[spec.id],
                });
                next_id += 1;
            }
        }
    }
    let manifest = Manifest { records };
    manifest.write(&out.join(MANIFEST_FILE))?;
    write_identities(&out.join(IDENTITIES_FILE), &specs, &split)?;
    log::info!(
        "generated {} tracklets for {} identities ({} confusable pairs) in {}",
        manifest.records.len(),
        specs.len(),
        cfg.num_pairs(),
        out.display()
    );
    Ok(manifest)
}

fn write_identities(path: &Path, specs: &[IdentitySpec], split: &[Split]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(["identity", "motion_freq", "motion_phase", "partner", "split"]).map_err(csv_error)?;
    for s in specs {
        w.write_record([
            s.id.to_string(),
            format!("{:.6}", s.motion_freq),
            format!("{:.6}", s.motion_phase),
            s.confusable_partner.map(|p| p.to_string()).unwrap_or_default(),
            split[s.id].name().to_string(),
        ])
        .map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// A corpus loaded into memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub tracklets: Vec<Tracklet>,
}

impl Corpus {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = Manifest::read(&root.join(MANIFEST_FILE))?;
        let mut tracklets = Vec::with_capacity(manifest.records.len());
        for r in &manifest.records {
            let t = Tracklet::load(&root.join(&r.path))?;
            if t.tracklet_id != r.tracklet_id || t.identity != r.identity || t.modality != r.modality || t.frames != r.frames {
                return Err(Error::Format(format!("{} disagrees with the manifest", r.path.display())));
            }
            tracklets.push(t);
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            tracklets,
        })
    }

    /// Indices of tracklets in `split` with at least `min_frames` frames.
    pub fn indices(&self, split: Split, min_frames: usize) -> Vec<usize> {
        (0..self.tracklets.len())
            .filter(|&i| self.manifest.records[i].split == split && self.tracklets[i].frames >= min_frames)
            .collect()
    }

    pub fn frame_size(&self) -> Option<(usize, usize)> {
        self.tracklets.first().map(|t| (t.height, t.width))
    }
}

/// Shared-across-frames horizontal flip (p = 0.5) and 4-pixel zero-pad crop.
pub fn augment<S: Scalar, R: Rng + ?Sized>(frames: &Tensor<S>, rng: &mut R, enable: bool) -> Result<Tensor<S>> {
    if !enable {
        return Ok(frames.clone());
    }
    let flip = rng.random_bool(0.5);
    let dy = rng.random_range(0..=8);
    let dx = rng.random_range(0..=8);
    let out = if flip { flip_horizontal(frames)? } else { frames.clone() };
    pad_crop(&out, 4, dy, dx)
}

fn check_frames<S: Scalar>(frames: &Tensor<S>) -> Result<(usize, usize, usize)> {
    match *frames.shape() {
        [n, c, h, w] => Ok((n * c, h, w)),
        _ => Err(Error::InvalidShape {
            op: "augment",
            shape: frames.shape().to_vec(),
            reason: "expected [n, 3, H, W]".into(),
        }),
    }
}

pub fn flip_horizontal<S: Scalar>(frames: &Tensor<S>) -> Result<Tensor<S>> {
    let (_, _, w) = check_frames(frames)?;
    let mut data = frames.data().to_vec();
    for row in data.chunks_exact_mut(w) {
        row.reverse();
    }
    Tensor::new(frames.shape().to_vec(), data)
}

/// Zero-pads by `pad` on every side, then crops the original size at `(dy, dx)`.
pub fn pad_crop<S: Scalar>(frames: &Tensor<S>, pad: usize, dy: usize, dx: usize) -> Result<Tensor<S>> {
    let (planes, h, w) = check_frames(frames)?;
    if dy > 2 * pad || dx > 2 * pad {
        return Err(invalid(format!("crop offset ({dy}, {dx}) exceeds padding {pad}")));
    }
    let mut data = vec![S::zero(); frames.len()];
    for p in 0..planes {
        let src = &frames.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    dst[y * w + x] = src[sy as usize * w + sx as usize];
                }
            }
        }
    }
    Tensor::new(frames.shape().to_vec(), data)
}
