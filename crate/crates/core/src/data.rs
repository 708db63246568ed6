//! Volume and annotation files, preprocessing, and the synthetic dataset
//! generator.
//!
//! A volume `name` lives in `name.vol` (raw little-endian scalars, x-fastest)
//! next to a text header `name.volhdr`; its landmarks live in
//! `name.landmarks`. In memory a volume is a row-major `[H, W, D]` tensor
//! indexed `[x][y][z]`.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::heatmap::gaussian;
use crate::landmarks::{Landmark, LandmarkSet};
use crate::tensor::{cast, DType, Element, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const VOLHDR_MAGIC: &str = "LMK3D-VOLHDR";
const LANDMARKS_MAGIC: &str = "LMK3D-LANDMARKS";

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeHeader {
    pub version: u32,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: DType,
}

impl VolumeHeader {
    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn to_text(&self) -> String {
        let [h, w, d] = self.dims;
        let [sx, sy, sz] = self.spacing;
        format!(
            "{VOLHDR_MAGIC} {}\ndims {h} {w} {d}\nspacing {sx} {sy} {sz}\ndtype {}\n",
            self.version,
            self.dtype.tag()
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Data(format!("volume header: {m}"));
        let mut lines = text.lines();
        let version = parse_magic(lines.next(), VOLHDR_MAGIC).map_err(bad)?;
        let dims = parse_triple::<usize>(lines.next(), "dims").map_err(bad)?;
        let spacing = parse_triple::<f64>(lines.next(), "spacing").map_err(bad)?;
        let dtype_line = lines.next().unwrap_or_default();
        let dtype = dtype_line
            .strip_prefix("dtype ")
            .and_then(DType::from_tag)
            .ok_or_else(|| bad(format!("bad dtype line {dtype_line:?}")))?;
        if dims.contains(&0) {
            return Err(bad(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(bad(format!("spacing must be positive, got {spacing:?}")));
        }
        Ok(VolumeHeader { version, dims, spacing, dtype })
    }
}

fn parse_magic(line: Option<&str>, magic: &str) -> std::result::Result<u32, String> {
    let line = line.unwrap_or_default();
    let version = line
        .strip_prefix(magic)
        .and_then(|r| r.trim().parse::<u32>().ok())
        .ok_or_else(|| format!("expected `{magic} <version>`, found {line:?}"))?;
    if version != FORMAT_VERSION {
        return Err(format!("unsupported format version {version} (this build reads {FORMAT_VERSION})"));
    }
    Ok(version)
}

fn parse_triple<V: std::str::FromStr>(line: Option<&str>, key: &str) -> std::result::Result<[V; 3], String> {
    let line = line.unwrap_or_default();
    let parts: Vec<&str> = line.split_whitespace().collect();
    match parts.as_slice() {
        [k, a, b, c] if *k == key => match (a.parse(), b.parse(), c.parse()) {
            (Ok(a), Ok(b), Ok(c)) => Ok([a, b, c]),
            _ => Err(format!("bad numbers in {line:?}")),
        },
        _ => Err(format!("expected `{key} a b c`, found {line:?}")),
    }
}

/// Row-major `[x][y][z]` index to x-fastest file order and back.
fn file_index([h, w, _]: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + h * (y + w * z)
}

pub fn volume_bytes<T: Element>(volume: &Tensor<T>) -> Result<Vec<u8>> {
    let &[h, w, d] = volume.shape() else {
        return Err(Error::invalid("save_volume", format!("expected [H, W, D], got {:?}", volume.shape())));
    };
    let mut ordered = vec![T::zero(); h * w * d];
    for (i, &v) in volume.data().iter().enumerate() {
        let (x, y, z) = (i / (w * d), (i / d) % w, i % d);
        ordered[file_index([h, w, d], x, y, z)] = v;
    }
    let mut out = Vec::with_capacity(ordered.len() * T::DTYPE.width());
    ordered.into_iter().for_each(|v| v.write_le(&mut out));
    Ok(out)
}

pub fn volume_from_bytes<T: Element>(header: &VolumeHeader, bytes: &[u8]) -> Result<Tensor<T>> {
    if header.dtype != T::DTYPE {
        return Err(Error::Data(format!(
            "volume stored as {}, requested {}",
            header.dtype.tag(),
            T::DTYPE.tag()
        )));
    }
    let width = T::DTYPE.width();
    let expect = header.voxels() * width;
    if bytes.len() != expect {
        return Err(Error::Data(format!(
            "volume payload holds {} bytes, header {:?} x {} needs {expect}",
            bytes.len(),
            header.dims,
            header.dtype.tag()
        )));
    }
    let dims = header.dims;
    let [_, w, d] = dims;
    let values: Vec<T> = bytes.chunks_exact(width).map(T::read_le).collect();
    Tensor::from_fn(dims.to_vec(), |i| values[file_index(dims, i / (w * d), (i / d) % w, i % d)])
}

/// Writes `stem.volhdr` and `stem.vol`.
pub fn save_volume<T: Element>(stem: &Path, volume: &Tensor<T>, spacing: [f64; 3]) -> Result<()> {
    let bytes = volume_bytes(volume)?;
    let dims = [volume.shape()[0], volume.shape()[1], volume.shape()[2]];
    let header = VolumeHeader { version: FORMAT_VERSION, dims, spacing, dtype: T::DTYPE };
    write_atomic(&with_ext(stem, "vol"), &bytes)?;
    write_atomic(&with_ext(stem, "volhdr"), header.to_text().as_bytes())
}

pub fn load_volume_header(stem: &Path) -> Result<VolumeHeader> {
    VolumeHeader::parse(&read_text(&with_ext(stem, "volhdr"))?)
}

pub fn load_volume<T: Element>(stem: &Path) -> Result<(VolumeHeader, Tensor<T>)> {
    let header = load_volume_header(stem)?;
    let path = with_ext(stem, "vol");
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let t = volume_from_bytes(&header, &bytes)?;
    Ok((header, t))
}

pub fn landmarks_to_text(set: &LandmarkSet) -> Result<String> {
    let [sx, sy, sz] = set.spacing;
    let mut s = format!("{LANDMARKS_MAGIC} {FORMAT_VERSION}\nspacing {sx} {sy} {sz}\ncount {}\n", set.len());
    for lm in &set.landmarks {
        if lm.name.is_empty() || lm.name.chars().any(char::is_whitespace) {
            return Err(Error::Data(format!("landmark name {:?} must be non-empty without whitespace", lm.name)));
        }
        let [x, y, z] = lm.pos;
        s.push_str(&format!("{} {} {x} {y} {z} {}\n", lm.id, lm.name, u8::from(lm.present)));
    }
    Ok(s)
}

pub fn landmarks_from_text(text: &str) -> Result<LandmarkSet> {
    let bad = |m: String| Error::Data(format!("landmark file: {m}"));
    let mut lines = text.lines();
    parse_magic(lines.next(), LANDMARKS_MAGIC).map_err(bad)?;
    let spacing = parse_triple::<f64>(lines.next(), "spacing").map_err(bad)?;
    let count_line = lines.next().unwrap_or_default();
    let count: usize = count_line
        .strip_prefix("count ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad(format!("bad count line {count_line:?}")))?;
    let mut landmarks = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines.next().ok_or_else(|| bad(format!("expected {count} records")))?;
        let f: Vec<&str> = line.split_whitespace().collect();
        let [id, name, x, y, z, present] = f.as_slice() else {
            return Err(bad(format!("bad record {line:?}")));
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number in {line:?}")));
        landmarks.push(Landmark {
            id: id.parse().map_err(|_| bad(format!("bad id in {line:?}")))?,
            name: name.to_string(),
            pos: [num(x)?, num(y)?, num(z)?],
            present: match *present {
                "1" => true,
                "0" => false,
                _ => return Err(bad(format!("present flag must be 0 or 1 in {line:?}"))),
            },
        });
    }
    if lines.any(|l| !l.trim().is_empty()) {
        return Err(bad("trailing records beyond count".into()));
    }
    let set = LandmarkSet { landmarks, spacing };
    set.validate(None)?;
    Ok(set)
}

pub fn save_landmarks(stem: &Path, set: &LandmarkSet) -> Result<()> {
    write_atomic(&with_ext(stem, "landmarks"), landmarks_to_text(set)?.as_bytes())
}

pub fn load_landmarks(stem: &Path) -> Result<LandmarkSet> {
    landmarks_from_text(&read_text(&with_ext(stem, "landmarks"))?)
}

/// Case names (file stems) of every volume header in `dir`, sorted.
pub fn list_cases(dir: &Path) -> Result<Vec<String>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::new();
    for e in entries {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "volhdr") {
            if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                names.push(s.to_string());
            }
        }
    }
    names.sort();
    Ok(names)
}

/// Min-max rescale to `[0, 255]`; a constant volume maps to zeros.
pub fn normalize_intensity<T: Element>(volume: &Tensor<T>) -> Tensor<T> {
    let d = volume.data();
    let lo = d.iter().copied().fold(T::infinity(), T::min);
    let hi = d.iter().copied().fold(T::neg_infinity(), T::max);
    if !(hi > lo) {
        return volume.map(|_| T::zero());
    }
    let (range, top) = (hi - lo, cast::<T>(255.0));
    volume.map(|v| (v - lo) * top / range)
}

/// Copies the `[crop]` block at `corner` out of a tensor whose first three
/// axes are spatial.
pub fn crop_tensor<T: Element>(t: &Tensor<T>, corner: [usize; 3], crop: [usize; 3]) -> Result<Tensor<T>> {
    let s = t.shape();
    if s.len() < 3 || (0..3).any(|ax| corner[ax] + crop[ax] > s[ax]) {
        return Err(Error::invalid("crop", format!("crop {crop:?} at {corner:?} exceeds {s:?}")));
    }
    let inner: usize = s[3..].iter().product();
    let mut out = Vec::with_capacity(crop.iter().product::<usize>() * inner);
    for x in 0..crop[0] {
        for y in 0..crop[1] {
            let start = (((corner[0] + x) * s[1] + corner[1] + y) * s[2] + corner[2]) * inner;
            out.extend_from_slice(&t.data()[start..start + crop[2] * inner]);
        }
    }
    let mut shape = crop.to_vec();
    shape.extend_from_slice(&s[3..]);
    Tensor::new(shape, out)
}

/// Crops at a seeded uniform corner; landmarks are shifted and those falling
/// outside become absent. Returns the corner too.
pub fn random_crop<T: Element>(
    volume: &Tensor<T>,
    landmarks: &LandmarkSet,
    crop: [usize; 3],
    seed: u64,
) -> Result<(Tensor<T>, LandmarkSet, [usize; 3])> {
    let s = volume.shape();
    if s.len() != 3 || (0..3).any(|ax| crop[ax] == 0 || crop[ax] > s[ax]) {
        return Err(Error::invalid("random_crop", format!("crop {crop:?} does not fit volume {s:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corner = [0, 1, 2].map(|ax| rng.random_range(0..=s[ax] - crop[ax]));
    let mut out = landmarks.clone();
    for lm in &mut out.landmarks {
        if !lm.present {
            continue;
        }
        for (p, &c) in lm.pos.iter_mut().zip(&corner) {
            *p -= c as f64;
        }
        if (0..3).any(|ax| lm.pos[ax] < 0.0 || lm.pos[ax] > (crop[ax] - 1) as f64) {
            lm.present = false;
        }
    }
    Ok((crop_tensor(volume, corner, crop)?, out, corner))
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub count: usize,
    pub dims: [usize; 3],
    pub landmarks: usize,
    pub sigma_blob: f64,
    pub noise_level: f64,
    pub missing_prob: f64,
    pub spacing: [f64; 3],
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            count: 5,
            dims: [32, 32, 16],
            landmarks: 2,
            sigma_blob: 2.0,
            noise_level: 0.2,
            missing_prob: 0.0,
            spacing: [1.0; 3],
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("synth.count must be positive".into()));
        }
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::Config(format!("synthetic dims must be >= 8 per axis, got {:?}", self.dims)));
        }
        if self.landmarks == 0 || self.landmarks > self.dims[0] {
            return Err(Error::Config(format!(
                "need 1..={} landmarks for a slab layout along x, got {}",
                self.dims[0], self.landmarks
            )));
        }
        if !(self.sigma_blob > 0.0) {
            return Err(Error::Config("sigma_blob must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.noise_level) {
            return Err(Error::Config("noise_level must lie in [0, 1) so blob peaks stay the maximum".into()));
        }
        if !(0.0..=1.0).contains(&self.missing_prob) {
            return Err(Error::Config("missing_prob must lie in [0, 1]".into()));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("spacing must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCase {
    pub name: String,
    pub volume: Tensor<f32>,
    pub landmarks: LandmarkSet,
}

const PLACEMENT_TRIES: usize = 10_000;

/// Generates every case in memory. Case `i` draws from its own ChaCha stream
/// of the master seed, so cases are independent of each other's draws.
///
/// Landmark `l` is placed at integer coordinates inside slab
/// `l * H / L <= x < (l + 1) * H / L`, which gives each channel a
/// learnable identity, and at least `2 sigma_blob` from earlier landmarks.
pub fn synth_cases(spec: &SynthSpec) -> Result<Vec<SynthCase>> {
    spec.validate()?;
    let [h, w, d] = spec.dims;
    let l = spec.landmarks;
    (0..spec.count)
        .map(|case| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(case as u64);
            let mut pos: Vec<[f64; 3]> = Vec::with_capacity(l);
            for li in 0..l {
                let (x0, x1) = (li * h / l, (li + 1) * h / l);
                let placed = (0..PLACEMENT_TRIES).find_map(|_| {
                    let p = [
                        rng.random_range(x0..x1) as f64,
                        rng.random_range(0..w) as f64,
                        rng.random_range(0..d) as f64,
                    ];
                    let far = pos.iter().all(|q| {
                        let d2: f64 = (0..3).map(|ax| (p[ax] - q[ax]).powi(2)).sum();
                        d2.sqrt() >= 2.0 * spec.sigma_blob
                    });
                    far.then_some(p)
                });
                pos.push(placed.ok_or_else(|| {
                    Error::Config(format!(
                        "cannot place {l} landmarks {} voxels apart in a {:?} volume",
                        2.0 * spec.sigma_blob,
                        spec.dims
                    ))
                })?);
            }
            let present: Vec<bool> = (0..l).map(|_| !rng.random_bool(spec.missing_prob)).collect();
            let noise: Vec<f64> = (0..h * w * d).map(|_| rng.random_range(0.0..1.0) * spec.noise_level).collect();
            let volume = Tensor::from_fn([h, w, d], |i| {
                let v = [i / (w * d), (i / d) % w, i % d].map(|c| c as f64);
                let blob = pos
                    .iter()
                    .zip(&present)
                    .filter(|(_, &p)| p)
                    .map(|(q, _)| gaussian((0..3).map(|ax| (v[ax] - q[ax]).powi(2)).sum(), spec.sigma_blob))
                    .fold(0.0, f64::max);
                noise[i].max(blob) as f32
            })?;
            let positions: Vec<Option<[f64; 3]>> =
                pos.iter().zip(&present).map(|(p, &ok)| ok.then_some(*p)).collect();
            Ok(SynthCase {
                name: format!("case_{case:03}"),
                volume,
                landmarks: LandmarkSet::from_positions(&positions, spec.spacing),
            })
        })
        .collect()
}

/// Generates and writes every case into `dir`; returns the case names.
pub fn synth_generate(spec: &SynthSpec, dir: &Path) -> Result<Vec<String>> {
    let cases = synth_cases(spec)?;
    for c in &cases {
        let stem = dir.join(&c.name);
        save_volume(&stem, &c.volume, spec.spacing)?;
        save_landmarks(&stem, &c.landmarks)?;
    }
    Ok(cases.into_iter().map(|c| c.name).collect())
}

/// A case ready for the network: intensities normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T: Element> {
    pub name: String,
    pub input: Tensor<T>,
    pub landmarks: LandmarkSet,
}

pub fn prepare<T: Element, U: Element>(name: &str, volume: &Tensor<U>, landmarks: &LandmarkSet) -> Result<Sample<T>> {
    let &[h, w, d] = volume.shape() else {
        return Err(Error::Data(format!("{name}: expected a 3-D volume, got {:?}", volume.shape())));
    };
    landmarks.validate(Some([h, w, d]))?;
    let inv = cast::<U>(1.0 / 255.0);
    Ok(Sample {
        name: name.to_string(),
        input: normalize_intensity(volume).map(|v| v * inv).cast(),
        landmarks: landmarks.clone(),
    })
}

/// Loads and prepares every case of a dataset directory.
pub fn load_dataset<T: Element>(dir: &Path) -> Result<Vec<Sample<T>>> {
    let names = list_cases(dir)?;
    if names.is_empty() {
        return Err(Error::Data(format!("no .volhdr files in {}", dir.display())));
    }
    names
        .iter()
        .map(|n| {
            let stem = dir.join(n);
            let header = load_volume_header(&stem)?;
            let lms = load_landmarks(&stem)?;
            if lms.spacing != header.spacing {
                return Err(Error::Data(format!("{n}: annotation spacing differs from the volume header")));
            }
            match header.dtype {
                DType::F32 => prepare(n, &load_volume::<f32>(&stem)?.1, &lms),
                DType::F64 => prepare(n, &load_volume::<f64>(&stem)?.1, &lms),
            }
        })
        .collect()
}
