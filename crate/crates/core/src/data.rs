//! Synthetic bi-temporal change dataset, PPM images and manifest loading.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const TEMPLATE_TEXT: &str = include_str!("../data/captions.txt");

/// Smallest canvas the object sizes below fit into.
pub const MIN_IMAGE_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (expected train, val or test)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Background {
    Desert,
    Green,
    Water,
}

impl Background {
    const ALL: [Background; 3] = [Background::Desert, Background::Green, Background::Water];

    pub fn word(self) -> &'static str {
        match self {
            Background::Desert => "desert",
            Background::Green => "grassland",
            Background::Water => "lake",
        }
    }

    fn color(self) -> [f32; 3] {
        match self {
            Background::Desert => [0.85, 0.74, 0.52],
            Background::Green => [0.36, 0.62, 0.30],
            Background::Water => [0.20, 0.38, 0.78],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kind {
    House,
    Road,
    Tree,
    Building,
}

impl Kind {
    const ALL: [Kind; 4] = [Kind::House, Kind::Road, Kind::Tree, Kind::Building];

    pub fn word(self) -> &'static str {
        match self {
            Kind::House => "house",
            Kind::Road => "road",
            Kind::Tree => "tree",
            Kind::Building => "building",
        }
    }

    fn color(self) -> [f32; 3] {
        match self {
            Kind::House => [0.78, 0.22, 0.18],
            Kind::Road => [0.24, 0.24, 0.26],
            Kind::Tree => [0.08, 0.30, 0.08],
            Kind::Building => [0.93, 0.93, 0.95],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Orientation {
    Horizontal,
    Vertical,
}

impl Orientation {
    pub fn word(self) -> &'static str {
        match self {
            Orientation::Horizontal => "horizontal",
            Orientation::Vertical => "vertical",
        }
    }
}

/// An axis-aligned object occupying rows `y..y+h`, columns `x..x+w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Object {
    pub kind: Kind,
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub orientation: Orientation,
}

impl Object {
    fn overlaps(&self, o: &Object, margin: usize) -> bool {
        self.x < o.x + o.w + margin && o.x < self.x + self.w + margin && self.y < o.y + o.h + margin && o.y < self.y + self.h + margin
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub background: Background,
    pub objects: Vec<Object>,
    pub seed: u64,
}

impl SceneSpec {
    /// Renders the scene as a `[3,S,S]` image in `[0,1]` with Gaussian noise.
    pub fn render(&self, size: usize, noise: f64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut img = vec![0f32; 3 * size * size];
        let bg = self.background.color();
        for c in 0..3 {
            img[c * size * size..(c + 1) * size * size].fill(bg[c]);
        }
        for o in &self.objects {
            let col = o.kind.color();
            for y in o.y..o.y + o.h {
                for x in o.x..o.x + o.w {
                    for c in 0..3 {
                        img[(c * size + y) * size + x] = col[c];
                    }
                }
            }
        }
        if noise > 0.0 {
            let n = Normal::new(0.0, noise).expect("finite noise level");
            for v in &mut img {
                *v = (*v + n.sample(&mut rng) as f32).clamp(0.0, 1.0);
            }
        }
        Tensor::new(&[3, size, size], img).expect("image buffer matches its shape")
    }
}

/// One bi-temporal sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: String,
    /// `[3,S,S]` images, or `[C_o,H,W]` precomputed features.
    pub before: Tensor<f32>,
    pub after: Tensor<f32>,
    pub captions: Vec<String>,
    pub split: Split,
    pub changed: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<SamplePair>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> Vec<&SamplePair> {
        self.pairs.iter().filter(|p| p.split == s).collect()
    }

    pub fn split_counts(&self) -> HashMap<Split, usize> {
        let mut m = HashMap::new();
        for p in &self.pairs {
            *m.entry(p.split).or_insert(0) += 1;
        }
        m
    }
}

/// Caption template sets, keyed by section name.
#[derive(Clone, Debug)]
pub struct Templates {
    pub version: u32,
    sections: HashMap<String, Vec<String>>,
}

impl Templates {
    pub fn builtin() -> &'static Templates {
        static T: std::sync::OnceLock<Templates> = std::sync::OnceLock::new();
        T.get_or_init(|| Templates::parse(TEMPLATE_TEXT).expect("built-in caption templates parse"))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut version = None;
        let mut sections: HashMap<String, Vec<String>> = HashMap::new();
        let mut current: Option<String> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(name.to_string());
                sections.entry(name.to_string()).or_default();
            } else if let (None, Some(v)) = (&current, line.strip_prefix("version")) {
                let v = v.trim_start().trim_start_matches('=').trim();
                version = Some(v.parse().map_err(|_| Error::Format(format!("templates line {}: bad version", i + 1)))?);
            } else if let Some(s) = &current {
                sections.get_mut(s).expect("section exists").push(line.to_string());
            } else {
                return Err(Error::Format(format!("templates line {}: text outside a section", i + 1)));
            }
        }
        for s in ["add.one", "add.many", "remove.one", "remove.many", "nochange"] {
            match sections.get(s) {
                Some(v) if v.len() >= 5 => {}
                _ => return Err(Error::Format(format!("template section [{s}] needs at least 5 lines"))),
            }
        }
        Ok(Templates {
            version: version.ok_or_else(|| Error::Format("templates have no version".into()))?,
            sections,
        })
    }

    pub fn section(&self, name: &str) -> &[String] {
        self.sections.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_nochange(&self, caption: &str) -> bool {
        let c = caption.trim().to_lowercase();
        self.section("nochange").iter().any(|t| *t == c)
    }
}

/// Synthetic dataset settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub pairs: usize,
    pub image_size: usize,
    pub p_change: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub noise: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            pairs: 64,
            image_size: 32,
            p_change: 0.5,
            val_fraction: 0.1,
            test_fraction: 0.1,
            noise: 0.02,
        }
    }
}

/// SplitMix64 finalizer; derives independent streams from (seed, index).
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for stream `stream` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix(mix(seed) ^ stream)
}

/// The caption occurring most often across all references of `pairs`
/// (ties go to the lexicographically smallest).
pub fn most_frequent_caption<'a>(pairs: impl IntoIterator<Item = &'a SamplePair>) -> Option<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for p in pairs {
        for c in &p.captions {
            *counts.entry(c.as_str()).or_insert(0) += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(c, _)| c.to_string())
}

fn hash_id(seed: u64, id: &str) -> u64 {
    id.bytes().fold(mix(seed), |h, b| mix(h ^ b as u64))
}

/// Split of a sample as a pure function of `(seed, id)`.
pub fn assign_split(seed: u64, id: &str, val_fraction: f64, test_fraction: f64) -> Split {
    let u = (hash_id(seed ^ 0x5EED_5EED, id) >> 11) as f64 / (1u64 << 53) as f64;
    if u < test_fraction {
        Split::Test
    } else if u < test_fraction + val_fraction {
        Split::Val
    } else {
        Split::Train
    }
}

fn count_word(n: usize) -> &'static str {
    match n {
        2 => "two",
        3 => "three",
        _ => "one",
    }
}

/// Random free spot for one object, or `None` when there is no room.
fn place(rng: &mut ChaCha8Rng, kind: Kind, orientation: Orientation, size: usize, taken: &[Object]) -> Option<Object> {
    for _ in 0..200 {
        let (w, h) = match kind {
            Kind::House => {
                let s = rng.random_range(3..=4);
                (s, s)
            }
            Kind::Tree => {
                let s = rng.random_range(2..=3);
                (s, s)
            }
            Kind::Building => {
                let s = rng.random_range(5..=6);
                (s, s)
            }
            Kind::Road => {
                let len = rng.random_range(size / 2..=size - 4);
                match orientation {
                    Orientation::Horizontal => (len, 2),
                    Orientation::Vertical => (2, len),
                }
            }
        };
        if w + 2 > size || h + 2 > size {
            break;
        }
        let o = Object {
            kind,
            x: rng.random_range(1..=size - 1 - w),
            y: rng.random_range(1..=size - 1 - h),
            w,
            h,
            orientation,
        };
        if taken.iter().all(|t| !t.overlaps(&o, 1)) {
            return Some(o);
        }
    }
    None
}

fn fill(template: &str, thing: &str, things: &str, count: usize, bg: Background) -> String {
    template
        .replace("{things}", things)
        .replace("{thing}", thing)
        .replace("{count}", count_word(count))
        .replace("{bg}", bg.word())
}

/// Generates one pair; also returns the before/after scene specs.
pub fn generate_pair(cfg: &GenConfig, index: usize) -> Result<(SamplePair, SceneSpec, SceneSpec)> {
    let size = cfg.image_size;
    if size < MIN_IMAGE_SIZE {
        return Err(Error::Config(format!("image_size {size} is below the minimum of {MIN_IMAGE_SIZE}")));
    }
    let id = format!("pair{index:05}");
    let pair_seed = mix(cfg.seed ^ mix(index as u64));
    let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
    let bg = Background::ALL[rng.random_range(0..3)];
    let changed = rng.random_bool(cfg.p_change.clamp(0.0, 1.0));
    let kind = Kind::ALL[rng.random_range(0..4)];
    let orientation = if rng.random_bool(0.5) {
        Orientation::Horizontal
    } else {
        Orientation::Vertical
    };
    // background clutter of kinds other than the one that changes
    let mut base = Vec::new();
    for _ in 0..rng.random_range(0..=2) {
        let others: Vec<Kind> = Kind::ALL.iter().copied().filter(|&k| k != kind && k != Kind::Road).collect();
        let k = others[rng.random_range(0..others.len())];
        match place(&mut rng, k, Orientation::Horizontal, size, &base) {
            Some(o) => base.push(o),
            None => break,
        }
    }
    let templates = Templates::builtin();
    let (before_objs, after_objs, captions) = if changed {
        let wanted = rng.random_range(1..=3);
        let mut event = Vec::new();
        for _ in 0..wanted {
            let taken: Vec<Object> = base.iter().chain(&event).copied().collect();
            match place(&mut rng, kind, orientation, size, &taken) {
                Some(o) => event.push(o),
                None => break,
            }
        }
        if event.is_empty() {
            // clutter filled the canvas; the changing object takes precedence
            base.clear();
            let o = place(&mut rng, kind, orientation, size, &[]).ok_or_else(|| {
                Error::Config(format!("image_size {size} is too small to place a {}", kind.word()))
            })?;
            event.push(o);
        }
        // crowded canvases may hold fewer objects than drawn
        let count = event.len();
        let adding = rng.random_bool(0.5);
        let section = match (adding, count) {
            (true, 1) => "add.one",
            (true, _) => "add.many",
            (false, 1) => "remove.one",
            (false, _) => "remove.many",
        };
        let (thing, things) = if kind == Kind::Road {
            (format!("{} road", orientation.word()), format!("{} roads", orientation.word()))
        } else {
            (kind.word().to_string(), format!("{}s", kind.word()))
        };
        let mut ts = templates.section(section).to_vec();
        ts.shuffle(&mut rng);
        let caps = ts.iter().take(5).map(|t| fill(t, &thing, &things, count, bg)).collect();
        let with: Vec<Object> = base.iter().chain(&event).copied().collect();
        if adding {
            (base, with, caps)
        } else {
            (with, base, caps)
        }
    } else {
        let mut ts = templates.section("nochange").to_vec();
        ts.shuffle(&mut rng);
        (base.clone(), base, ts.into_iter().take(5).collect())
    };
    let before = SceneSpec {
        background: bg,
        objects: before_objs,
        seed: mix(pair_seed ^ 1),
    };
    let after = SceneSpec {
        background: bg,
        objects: after_objs,
        seed: mix(pair_seed ^ 2),
    };
    let pair = SamplePair {
        split: assign_split(cfg.seed, &id, cfg.val_fraction, cfg.test_fraction),
        before: before.render(size, cfg.noise),
        after: after.render(size, cfg.noise),
        captions,
        changed: before.objects != after.objects,
        id,
    };
    Ok((pair, before, after))
}

pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    if cfg.pairs == 0 {
        return Err(Error::Config("pairs must be >= 1".into()));
    }
    if cfg.image_size < MIN_IMAGE_SIZE {
        return Err(Error::Config(format!(
            "image_size {} is below the minimum of {MIN_IMAGE_SIZE}",
            cfg.image_size
        )));
    }
    if !(0.0..=1.0).contains(&cfg.p_change) {
        return Err(Error::Config(format!("p_change {} outside [0, 1]", cfg.p_change)));
    }
    let pairs = (0..cfg.pairs)
        .map(|i| generate_pair(cfg, i).map(|(p, _, _)| p))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { pairs })
}

// ------------------------------------------------------------------ PPM

/// Encodes a `[3,H,W]` image in `[0,1]` as binary PPM.
pub fn encode_ppm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::dim("ppm", format!("expected [3,H,W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = d[(c * h + y) * w + x].clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        let mut found = [0u8; 4];
        for (d, s) in found.iter_mut().zip(bytes) {
            *d = *s;
        }
        return Err(Error::BadMagic { found });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Truncated { what: "PPM header".into() }),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed PPM header".into()))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Unsupported(format!("PPM maxval {maxval}; only 8-bit images are supported")));
    }
    if w == 0 || h == 0 {
        return Err(Error::Format("PPM with zero extent".into()));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h * 3;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Truncated { what: "PPM raster".into() })?;
    let mut img = vec![0f32; need];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img[(c * h + y) * w + x] = raster[(y * w + x) * 3 + c] as f32 / 255.0;
            }
        }
    }
    Tensor::new(&[3, h, w], img)
}

// ------------------------------------------------------------------ manifest

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub before: String,
    pub after: String,
    pub captions: Vec<String>,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub changed: Option<bool>,
}

/// Reads a PPM image or a single-entry tensor container.
pub fn load_array(path: &Path) -> Result<Tensor<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    if bytes.starts_with(b"SATC") {
        let c = Container::from_bytes(&bytes)?;
        match c.entries.as_slice() {
            [e] => c.tensor(&e.name),
            es => Err(Error::Format(format!("{} holds {} entries, expected one array", path.display(), es.len()))),
        }
    } else {
        decode_ppm(&bytes)
    }
}

/// Writes PPM images under `dir/images` and `dir/manifest.json`.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::file(&img_dir, e))?;
    let mut entries = Vec::with_capacity(ds.pairs.len());
    for p in &ds.pairs {
        let b = format!("images/{}_before.ppm", p.id);
        let a = format!("images/{}_after.ppm", p.id);
        for (rel, img) in [(&b, &p.before), (&a, &p.after)] {
            let path = dir.join(rel);
            std::fs::write(&path, encode_ppm(img)?).map_err(|e| Error::file(&path, e))?;
        }
        entries.push(ManifestEntry {
            id: p.id.clone(),
            before: b,
            after: a,
            captions: p.captions.clone(),
            split: p.split.to_string(),
            changed: Some(p.changed),
        });
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&entries)?;
    std::fs::write(&path, text).map_err(|e| Error::file(&path, e))?;
    Ok(path)
}

/// Loads and validates a manifest; image paths are relative to its folder.
///
/// Entries without a `changed` flag are marked unchanged when their first
/// caption is one of the no-change templates.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    load_manifest_with(path, None)
}

/// Name of a precomputed feature entry in a feature container.
pub fn feature_entry(id: &str, side: &str) -> String {
    format!("{id}/{side}")
}

/// Like [`load_manifest`], but with `features` the arrays come from the
/// container entries `<id>/before` and `<id>/after` instead of image files.
pub fn load_manifest_with(path: &Path, features: Option<&Container>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::with_capacity(entries.len());
    for e in entries {
        let fail = |reason: String| Error::Load { id: e.id.clone(), reason };
        let split: Split = e
            .split
            .parse()
            .map_err(|_| fail(format!("unknown split tag `{}`", e.split)))?;
        if e.captions.is_empty() || e.captions.iter().all(|c| c.trim().is_empty()) {
            return Err(fail("no captions".into()));
        }
        let (before, after) = match features {
            Some(c) => (
                c.tensor(&feature_entry(&e.id, "before")).map_err(|err| fail(err.to_string()))?,
                c.tensor(&feature_entry(&e.id, "after")).map_err(|err| fail(err.to_string()))?,
            ),
            None => (
                load_array(&root.join(&e.before)).map_err(|err| fail(format!("{}: {err}", e.before)))?,
                load_array(&root.join(&e.after)).map_err(|err| fail(format!("{}: {err}", e.after)))?,
            ),
        };
        if before.shape() != after.shape() {
            return Err(fail(format!(
                "before {:?} and after {:?} differ in shape",
                before.shape(),
                after.shape()
            )));
        }
        let changed = e
            .changed
            .unwrap_or_else(|| !Templates::builtin().is_nochange(&e.captions[0]));
        pairs.push(SamplePair {
            id: e.id,
            before,
            after,
            captions: e.captions,
            split,
            changed,
        });
    }
    let ds = Dataset { pairs };
    let counts = ds.split_counts();
    log::info!(
        "loaded {} pairs: train {}, val {}, test {}",
        ds.pairs.len(),
        counts.get(&Split::Train).unwrap_or(&0),
        counts.get(&Split::Val).unwrap_or(&0),
        counts.get(&Split::Test).unwrap_or(&0)
    );
    Ok(ds)
}
