//! Synthetic bitemporal change pairs and the JSONL dataset manifest.
//!
//! Every scene has a noisy flat background and one shape present at both
//! times. Change pairs also add or remove a second shape in another quadrant.
//! Pairs alternate change / no-change, starting with change.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::normalize;
use crate::error::{Result, SftError};
use crate::format;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// No-change captions; the first is the canonical training target.
pub const NO_CHANGE_POOL: [&str; 5] = [
    "there is no change",
    "the scene is unchanged",
    "nothing has changed",
    "the two images are the same",
    "no difference can be seen",
];

const ADDED_TEMPLATES: [&str; 5] = [
    "a {s} was added in the {q}",
    "a new {s} appears in the {q}",
    "there is a new {s} in the {q}",
    "a {s} has been built in the {q}",
    "the {q} now has a {s}",
];

const REMOVED_TEMPLATES: [&str; 5] = [
    "a {s} was removed from the {q}",
    "the {s} in the {q} is gone",
    "the {s} in the {q} has disappeared",
    "a {s} has been demolished in the {q}",
    "the {q} no longer has a {s}",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Rectangle,
    Bar,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Rectangle, Shape::Bar];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Rectangle => "rectangle",
            Shape::Bar => "bar",
        }
    }

    /// Random `(height, width)` in pixels.
    fn extent<R: Rng + ?Sized>(self, rng: &mut R) -> (usize, usize) {
        let (long, short) = match self {
            Shape::Square => {
                let s = rng.gen_range(8..=12);
                return (s, s);
            }
            Shape::Rectangle => (rng.gen_range(15..=18), rng.gen_range(8..=10)),
            Shape::Bar => (rng.gen_range(20..=26), rng.gen_range(3..=4)),
        };
        if rng.gen_bool(0.5) {
            (long, short)
        } else {
            (short, long)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quadrant::TopLeft => "top left",
            Quadrant::TopRight => "top right",
            Quadrant::BottomLeft => "bottom left",
            Quadrant::BottomRight => "bottom right",
        }
    }

    /// Top-left pixel `(row, col)` of the quadrant.
    pub fn origin(self) -> (usize, usize) {
        let half = IMAGE_SIZE / 2;
        match self {
            Quadrant::TopLeft => (0, 0),
            Quadrant::TopRight => (0, half),
            Quadrant::BottomLeft => (half, 0),
            Quadrant::BottomRight => (half, half),
        }
    }

    pub fn containing(row: usize, col: usize) -> Quadrant {
        let half = IMAGE_SIZE / 2;
        match (row >= half, col >= half) {
            (false, false) => Quadrant::TopLeft,
            (false, true) => Quadrant::TopRight,
            (true, false) => Quadrant::BottomLeft,
            (true, true) => Quadrant::BottomRight,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Added,
    Removed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub shape: Shape,
    pub quadrant: Quadrant,
    pub action: Action,
}

impl Edit {
    pub fn captions(&self) -> Vec<String> {
        let templates = match self.action {
            Action::Added => ADDED_TEMPLATES,
            Action::Removed => REMOVED_TEMPLATES,
        };
        templates
            .iter()
            .map(|t| t.replace("{s}", self.shape.name()).replace("{q}", self.quadrant.name()))
            .collect()
    }
}

/// One bitemporal pair with its reference captions.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image_id: String,
    pub img1: Tensor,
    pub img2: Tensor,
    /// First caption is the training target, all of them are references.
    pub captions: Vec<String>,
}

impl Sample {
    /// Whether the target caption describes a change.
    pub fn is_change(&self) -> bool {
        !is_no_change_caption(&self.captions[0])
    }
}

/// Membership in the no-change pool after normalization.
pub fn is_no_change_caption(caption: &str) -> bool {
    let c = normalize(caption);
    NO_CHANGE_POOL.iter().any(|p| normalize(p) == c)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub sample: Sample,
    /// `None` for no-change pairs.
    pub edit: Option<Edit>,
}

fn background<R: Rng + ?Sized>(rng: &mut R) -> Tensor {
    let n = IMAGE_SIZE * IMAGE_SIZE;
    let mut img = Tensor::zeros(&[3, IMAGE_SIZE, IMAGE_SIZE]);
    for c in 0..3 {
        let base: f64 = rng.gen_range(0.05..0.25);
        for v in &mut img.data_mut()[c * n..(c + 1) * n] {
            *v = base + rng.gen_range(-0.05..0.05);
        }
    }
    img
}

fn draw<R: Rng + ?Sized>(img: &mut Tensor, shape: Shape, quadrant: Quadrant, rng: &mut R) {
    let (h, w) = shape.extent(rng);
    let (r0, c0) = quadrant.origin();
    let half = IMAGE_SIZE / 2;
    let top = r0 + rng.gen_range(2..=half - 2 - h);
    let left = c0 + rng.gen_range(2..=half - 2 - w);
    let color: [f64; 3] = [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)];
    let n = IMAGE_SIZE * IMAGE_SIZE;
    for (c, &value) in color.iter().enumerate() {
        for r in top..top + h {
            for col in left..left + w {
                img.data_mut()[c * n + r * IMAGE_SIZE + col] = value;
            }
        }
    }
}

/// `n` deterministic pairs; even indices are change pairs.
pub fn generate_dataset(n: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(SftError::Contract("dataset size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut scene = background(&mut rng);
        let static_q = *Quadrant::ALL.choose(&mut rng).unwrap();
        let static_shape = *Shape::ALL.choose(&mut rng).unwrap();
        draw(&mut scene, static_shape, static_q, &mut rng);
        let (img1, img2, captions, edit) = if i % 2 == 0 {
            let others: Vec<Quadrant> = Quadrant::ALL.into_iter().filter(|&q| q != static_q).collect();
            let edit = Edit {
                shape: *Shape::ALL.choose(&mut rng).unwrap(),
                quadrant: *others.choose(&mut rng).unwrap(),
                action: if rng.gen_bool(0.5) { Action::Added } else { Action::Removed },
            };
            let mut edited = scene.clone();
            draw(&mut edited, edit.shape, edit.quadrant, &mut rng);
            let (a, b) = match edit.action {
                Action::Added => (scene, edited),
                Action::Removed => (edited, scene),
            };
            (a, b, edit.captions(), Some(edit))
        } else {
            let captions = NO_CHANGE_POOL.iter().map(|s| s.to_string()).collect();
            (scene.clone(), scene, captions, None)
        };
        out.push(SyntheticSample {
            sample: Sample {
                image_id: format!("sample{i:04}"),
                img1,
                img2,
                captions,
            },
            edit,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    pub t1: PathBuf,
    pub t2: PathBuf,
    pub captions: Vec<String>,
}

/// Writes `manifest.jsonl` plus `images/<id>_t{1,2}.sft1` under `dir`.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| SftError::io(&images, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut text = Vec::new();
    for s in samples {
        let t1 = PathBuf::from("images").join(format!("{}_t1.sft1", s.image_id));
        let t2 = PathBuf::from("images").join(format!("{}_t2.sft1", s.image_id));
        format::save(&dir.join(&t1), &s.img1)?;
        format::save(&dir.join(&t2), &s.img2)?;
        let entry = ManifestEntry {
            image_id: Some(s.image_id.clone()),
            t1,
            t2,
            captions: s.captions.clone(),
        };
        serde_json::to_writer(&mut text, &entry).map_err(|e| SftError::json("manifest entry", e))?;
        text.push(b'\n');
    }
    let mut f = std::fs::File::create(&manifest).map_err(|e| SftError::io(&manifest, e))?;
    f.write_all(&text).map_err(|e| SftError::io(&manifest, e))?;
    Ok(manifest)
}

/// Reads a manifest; image paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path).map_err(|e| SftError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let line_no = i + 1;
        let start = offset;
        offset += line.len() as u64;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let bad = |msg: String| SftError::Format {
            path: path.to_path_buf(),
            offset: start,
            msg: format!("line {line_no}: {msg}"),
        };
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        if entry.captions.is_empty() || entry.captions.len() > 5 {
            return Err(bad(format!("expected 1 to 5 captions, got {}", entry.captions.len())));
        }
        if entry.captions.iter().any(|c| normalize(c).is_empty()) {
            return Err(bad("empty caption".into()));
        }
        let img1 = format::load(&base.join(&entry.t1))?;
        let img2 = format::load(&base.join(&entry.t2))?;
        if img1.shape() != img2.shape() || img1.rank() != 3 {
            return Err(bad(format!(
                "image shapes {:?} and {:?} must match and be [C, H, W]",
                img1.shape(),
                img2.shape()
            )));
        }
        out.push(Sample {
            image_id: entry.image_id.unwrap_or_else(|| format!("line{line_no}")),
            img1,
            img2,
            captions: entry.captions,
        });
    }
    if out.is_empty() {
        log::warn!("{}: manifest has no samples", path.display());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Recovers the edit from pixels alone: changed-pixel bounding box gives
    /// quadrant and shape class, brightness at time 2 gives the action.
    fn read_edit(s: &Sample) -> Option<Edit> {
        let n = IMAGE_SIZE * IMAGE_SIZE;
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        let mut bright_after = None;
        for r in 0..IMAGE_SIZE {
            for c in 0..IMAGE_SIZE {
                let px = r * IMAGE_SIZE + c;
                if (0..3).any(|ch| s.img1.data()[ch * n + px] != s.img2.data()[ch * n + px]) {
                    r0 = r0.min(r);
                    r1 = r1.max(r);
                    c0 = c0.min(c);
                    c1 = c1.max(c);
                    bright_after = Some((0..3).all(|ch| s.img2.data()[ch * n + px] >= 0.6));
                }
            }
        }
        let bright_after = bright_after?;
        let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
        let ratio = h.max(w) as f64 / h.min(w) as f64;
        let shape = if h == w {
            Shape::Square
        } else if ratio < 3.0 {
            Shape::Rectangle
        } else {
            Shape::Bar
        };
        Some(Edit {
            shape,
            quadrant: Quadrant::containing((r0 + r1) / 2, (c0 + c1) / 2),
            action: if bright_after { Action::Added } else { Action::Removed },
        })
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = generate_dataset(16, 7).unwrap();
        let b = generate_dataset(16, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_dataset(16, 8).unwrap());
        assert_eq!(a.iter().filter(|s| s.edit.is_some()).count(), 8);
        assert_eq!(a.iter().filter(|s| s.sample.is_change()).count(), 8);
        for s in &a {
            assert!(s.sample.img1.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(s.sample.img1.shape(), &[3, 64, 64]);
        }
        assert!(generate_dataset(0, 1).is_err());
    }

    #[test]
    fn captions_match_pixels() {
        for seed in 0..10 {
            for s in generate_dataset(24, seed).unwrap() {
                let seen = read_edit(&s.sample);
                assert_eq!(seen, s.edit);
                match seen {
                    None => assert!(s.sample.captions.iter().all(|c| is_no_change_caption(c))),
                    Some(e) => {
                        for c in &s.sample.captions {
                            assert!(c.contains(e.shape.name()) && c.contains(e.quadrant.name()), "{c}");
                            assert!(!is_no_change_caption(c));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn manifest_round_trip() {
        let samples: Vec<Sample> = generate_dataset(4, 3).unwrap().into_iter().map(|s| s.sample).collect();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_dataset(dir.path(), &samples).unwrap();
        assert_eq!(load_manifest(&manifest).unwrap(), samples);
    }

    #[test]
    fn manifest_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_manifest(&path).unwrap().is_empty());
        std::fs::write(&path, "{not json}\n").unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        assert!(err.is_io());

        std::fs::write(dir.path().join("bad.sft1"), b"XXXX").unwrap();
        std::fs::write(&path, r#"{"t1": "bad.sft1", "t2": "bad.sft1", "captions": ["x"]}"#).unwrap();
        let err = load_manifest(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.sft1") && msg.contains("byte offset 0"), "{msg}");
    }
}
